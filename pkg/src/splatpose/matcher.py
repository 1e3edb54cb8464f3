"""2D keypoint correspondences between rendered and query images.

The built-in matcher is classical and deterministic: Harris corners on both
images, zero-mean normalized cross-correlation patch descriptors, mutual
nearest neighbors with a ratio test. The oracle matcher projects co-visible
Gaussian means through both poses and is used to isolate optimizer behavior
from matcher quality. ``lift_matches`` back-projects rendered keypoints
through the expected-depth map, turning matches into 3D anchors whose
reprojection is differentiable in the pose.

All keypoint coordinates are normalized: pixel position divided by image
width/height, so both live in [0, 1)^2.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .geometry import CameraIntrinsics, Pose
from .renderer import RenderedImage

HARRIS_K = 0.04
HARRIS_SIGMA = 1.0
NMS_SIZE = 3
MAX_CORNERS = 512
PATCH = 11          # descriptor window, must be odd
LOWE_RATIO = 0.9
MIN_ALPHA_LIFT = 0.5


@dataclass(frozen=True)
class Match:
    """One correspondence: m in the rendered image, q in the query image."""

    m: np.ndarray
    q: np.ndarray
    confidence: float


@dataclass(frozen=True)
class MatchSet:
    """Packed correspondences; m, q are (N, 2) arrays in normalized coords."""

    m: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))
    q: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))
    confidence: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self):
        object.__setattr__(self, "m", np.asarray(self.m, dtype=float).reshape(-1, 2))
        object.__setattr__(self, "q", np.asarray(self.q, dtype=float).reshape(-1, 2))
        object.__setattr__(self, "confidence", np.asarray(self.confidence, dtype=float).reshape(-1))
        if not (len(self.m) == len(self.q) == len(self.confidence)):
            raise ValueError("m, q, confidence must have equal length")

    @property
    def n(self) -> int:
        return len(self.m)

    @property
    def matches(self) -> list[Match]:
        return [Match(self.m[i], self.q[i], float(self.confidence[i])) for i in range(self.n)]

    @classmethod
    def empty(cls) -> "MatchSet":
        return cls()


@dataclass(frozen=True)
class AnchorPoint:
    """3D world point lifted from a rendered-image match via expected depth."""

    world: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "world", np.asarray(self.world, dtype=float).reshape(3))


@dataclass(frozen=True)
class MatcherConfig:
    confidence_threshold: float = 0.7
    max_matches: int = 256


def _to_gray(image: np.ndarray) -> np.ndarray:
    img = np.asarray(image, dtype=float)
    if img.ndim == 3:
        return img[:, :, 0] * 0.299 + img[:, :, 1] * 0.587 + img[:, :, 2] * 0.114
    return img


def _harris_corners(gray: np.ndarray) -> np.ndarray:
    """Top corners as (n, 2) integer (x, y), strongest response first."""
    ix = ndimage.sobel(gray, axis=1, mode="nearest")
    iy = ndimage.sobel(gray, axis=0, mode="nearest")
    sxx = ndimage.gaussian_filter(ix * ix, HARRIS_SIGMA, mode="nearest")
    syy = ndimage.gaussian_filter(iy * iy, HARRIS_SIGMA, mode="nearest")
    sxy = ndimage.gaussian_filter(ix * iy, HARRIS_SIGMA, mode="nearest")
    resp = sxx * syy - sxy * sxy - HARRIS_K * (sxx + syy) ** 2

    peaks = (resp == ndimage.maximum_filter(resp, size=NMS_SIZE)) & (resp > 0)
    if resp.max() > 0:
        peaks &= resp > 0.005 * resp.max()
    # keep full descriptor windows inside the image
    half = PATCH // 2
    peaks[:half, :] = False
    peaks[-half:, :] = False
    peaks[:, :half] = False
    peaks[:, -half:] = False

    ys, xs = np.nonzero(peaks)
    if len(xs) == 0:
        return np.zeros((0, 2), dtype=int)
    order = np.lexsort((xs, ys, -resp[ys, xs]))[:MAX_CORNERS]
    return np.stack([xs[order], ys[order]], axis=1)


def _dominant_orientations(gray: np.ndarray, corners: np.ndarray) -> np.ndarray:
    """Per-corner orientation of the Gaussian-weighted mean gradient (radians)."""
    ix = ndimage.gaussian_filter(ndimage.sobel(gray, axis=1, mode="nearest"),
                                 2.0, mode="nearest")
    iy = ndimage.gaussian_filter(ndimage.sobel(gray, axis=0, mode="nearest"),
                                 2.0, mode="nearest")
    return np.arctan2(iy[corners[:, 1], corners[:, 0]], ix[corners[:, 1], corners[:, 0]])


def _descriptors(image: np.ndarray, gray: np.ndarray,
                 corners: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Orientation-normalized ZNCC patch descriptors; drops flat patches.

    Each 11x11 patch is sampled (bilinearly) on a grid rotated to the corner's
    dominant gradient orientation, making the descriptor invariant to in-plane
    rotation. All color channels enter the descriptor: on palette-colored
    scenes chroma carries most of the distinctiveness that survives viewpoint
    change.
    """
    img = np.asarray(image, dtype=float)
    if img.ndim == 2:
        img = img[:, :, None]
    if len(corners) == 0:
        return corners, np.zeros((0, PATCH * PATCH * img.shape[2]))
    half = PATCH // 2
    theta = _dominant_orientations(gray, corners)
    cos_t, sin_t = np.cos(theta), np.sin(theta)
    off = np.arange(-half, half + 1, dtype=float)
    gy, gx = np.meshgrid(off, off, indexing="ij")
    # rotate the sampling grid by theta around each corner
    sx = corners[:, 0, None] + cos_t[:, None] * gx.ravel() - sin_t[:, None] * gy.ravel()
    sy = corners[:, 1, None] + sin_t[:, None] * gx.ravel() + cos_t[:, None] * gy.ravel()
    h, w = img.shape[:2]
    sx = np.clip(sx, 0.0, w - 1.0)
    sy = np.clip(sy, 0.0, h - 1.0)
    x0 = np.clip(np.floor(sx).astype(int), 0, w - 2)
    y0 = np.clip(np.floor(sy).astype(int), 0, h - 2)
    fx = (sx - x0)[:, :, None]
    fy = (sy - y0)[:, :, None]
    patches = (img[y0, x0] * (1 - fx) * (1 - fy) + img[y0, x0 + 1] * fx * (1 - fy)
               + img[y0 + 1, x0] * (1 - fx) * fy + img[y0 + 1, x0 + 1] * fx * fy)
    patches = patches.reshape(len(corners), -1)
    patches = patches - patches.mean(axis=1, keepdims=True)
    norms = np.linalg.norm(patches, axis=1)
    ok = norms > 1e-8
    return corners[ok], patches[ok] / norms[ok, None]


def match_images(rendered, query: np.ndarray, cfg: MatcherConfig = MatcherConfig()) -> MatchSet:
    """Detect-and-match between the rendered image and the query image.

    Never raises on failure to match; an empty MatchSet is the caller's signal
    to fall back to the comparing loss alone.
    """
    img_r = rendered.color if isinstance(rendered, RenderedImage) else np.asarray(rendered)
    img_q = np.asarray(query)
    if img_r.shape[:2] != img_q.shape[:2]:
        raise ValueError(f"image sizes differ: {img_r.shape[:2]} vs {img_q.shape[:2]}")
    h, w = img_r.shape[:2]

    gray_r = _to_gray(img_r)
    gray_q = _to_gray(img_q)
    c_r, d_r = _descriptors(img_r, gray_r, _harris_corners(gray_r))
    c_q, d_q = _descriptors(img_q, gray_q, _harris_corners(gray_q))
    if len(c_r) == 0 or len(c_q) == 0:
        return MatchSet.empty()

    sim = d_r @ d_q.T
    best_rq = np.argmax(sim, axis=1)
    best_qr = np.argmax(sim, axis=0)
    rows = np.arange(len(c_r))
    mutual = best_qr[best_rq] == rows

    def ratio_ok(scores: np.ndarray, best_idx: int) -> bool:
        if len(scores) < 2:
            return True
        d_best = 1.0 - scores[best_idx]
        second = np.partition(scores, -2)[-2]
        return d_best <= LOWE_RATIO * (1.0 - second)

    picked = []
    for i in np.nonzero(mutual)[0]:
        j = best_rq[i]
        if not ratio_ok(sim[i, :], j) or not ratio_ok(sim[:, j], i):
            continue
        conf = float(np.clip(0.5 * (sim[i, j] + 1.0), 0.0, 1.0))
        if conf >= cfg.confidence_threshold:
            picked.append((conf, i, j))
    if not picked:
        return MatchSet.empty()

    picked.sort(key=lambda t: (-t[0], t[1], t[2]))
    picked = picked[:cfg.max_matches]
    m = np.array([[c_r[i, 0] / w, c_r[i, 1] / h] for _, i, _ in picked])
    q = np.array([[c_q[j, 0] / w, c_q[j, 1] / h] for _, _, j in picked])
    conf = np.array([t[0] for t in picked])
    return MatchSet(m, q, conf)


def oracle_match(scene, pose_est: Pose, pose_gt: Pose, k: CameraIntrinsics,
                 sample_count: int = 256, seed: int = 0,
                 rendered: RenderedImage | None = None,
                 depth_tol: float = 0.2) -> MatchSet:
    """Ground-truth matcher: projects co-visible Gaussian means through both poses.

    Candidates come from a seed-fixed permutation of the scene, so the emitted
    set changes only through visibility as the pose moves (no re-draw churn
    between iterations). When the render at pose_est is supplied, means whose
    depth disagrees with the rendered expected depth at their pixel by more
    than depth_tol are treated as occluded and skipped; without it they would
    later be lifted onto whatever surface is actually in front, corrupting the
    matching gradient with parallax.
    """
    p_est = scene.means @ pose_est.rotation_matrix().T + pose_est.translation
    p_gt = scene.means @ pose_gt.rotation_matrix().T + pose_gt.translation

    def pix(p):
        with np.errstate(divide="ignore", invalid="ignore"):
            u = k.fx * p[:, 0] / p[:, 2] + k.cx
            v = k.fy * p[:, 1] / p[:, 2] + k.cy
        return u, v

    u_e, v_e = pix(p_est)
    u_g, v_g = pix(p_gt)
    vis = (p_est[:, 2] > k.z_near) & (p_gt[:, 2] > k.z_near)
    vis &= (u_e >= 0) & (u_e <= k.width - 1) & (v_e >= 0) & (v_e <= k.height - 1)
    vis &= (u_g >= 0) & (u_g <= k.width - 1) & (v_g >= 0) & (v_g <= k.height - 1)
    pool = np.random.default_rng(seed).permutation(len(scene.means))
    idx = pool[vis[pool]]
    if rendered is not None and len(idx) > 0:
        depth_at = _bilinear(rendered.depth, u_e[idx], v_e[idx])
        idx = idx[np.abs(p_est[idx, 2] - depth_at) <= depth_tol]
    idx = idx[:sample_count]
    if len(idx) == 0:
        return MatchSet.empty()
    m = np.stack([u_e[idx] / k.width, v_e[idx] / k.height], axis=1)
    q = np.stack([u_g[idx] / k.width, v_g[idx] / k.height], axis=1)
    return MatchSet(m, q, np.ones(len(idx)))


def _bilinear(img: np.ndarray, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    h, w = img.shape[:2]
    x = np.clip(x, 0.0, w - 1.0)
    y = np.clip(y, 0.0, h - 1.0)
    x0 = np.clip(np.floor(x).astype(int), 0, w - 2) if w > 1 else np.zeros_like(x, dtype=int)
    y0 = np.clip(np.floor(y).astype(int), 0, h - 2) if h > 1 else np.zeros_like(y, dtype=int)
    fx = x - x0
    fy = y - y0
    return (img[y0, x0] * (1 - fx) * (1 - fy) + img[y0, x0 + 1] * fx * (1 - fy)
            + img[y0 + 1, x0] * (1 - fx) * fy + img[y0 + 1, x0 + 1] * fx * fy)


def lift_matches(matches: MatchSet, rendered: RenderedImage, pose: Pose,
                 k: CameraIntrinsics) -> list[tuple[AnchorPoint, np.ndarray]]:
    """Back-project rendered keypoints through the depth map to 3D anchors.

    Matches landing on background (interpolated alpha < 0.5) or holes in the
    depth map are dropped. Reprojecting a surviving anchor through ``pose``
    reproduces its rendered keypoint by construction.
    """
    if matches.n == 0:
        return []
    px = matches.m[:, 0] * k.width
    py = matches.m[:, 1] * k.height
    alpha = _bilinear(rendered.alpha, px, py)
    depth = _bilinear(rendered.depth, px, py)
    ok = (alpha >= MIN_ALPHA_LIFT) & (depth > 0)

    inv = pose.invert()
    R_inv = inv.rotation_matrix()
    out = []
    for i in np.nonzero(ok)[0]:
        z = depth[i]
        p_cam = np.array([(px[i] - k.cx) / k.fx * z, (py[i] - k.cy) / k.fy * z, z])
        world = R_inv @ p_cam + inv.translation
        out.append((AnchorPoint(world), matches.q[i].copy()))
    return out


def load_match_file(path) -> MatchSet:
    """Read 'mx my qx qy conf' text lines (normalized coordinates)."""
    rows = []
    with open(path) as f:
        for ln, line in enumerate(f, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 5:
                raise ValueError(f"{path}:{ln}: expected 5 fields, got {len(parts)}")
            vals = [float(p) for p in parts]
            if not all(0.0 <= v <= 1.0 for v in vals):
                raise ValueError(f"{path}:{ln}: values must lie in [0, 1]")
            rows.append(vals)
    if not rows:
        return MatchSet.empty()
    arr = np.array(rows)
    return MatchSet(arr[:, 0:2], arr[:, 2:4], arr[:, 4])
