"""The two loss terms and their pose gradients.

Comparing loss: mean squared error between the composited render and the
query. Matching loss: mean squared distance between corresponding keypoints
in normalized image coordinates. The matching gradient treats match
coordinates and lifted anchors as constants within a step; the pose enters
only through reprojecting the anchors.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import CameraIntrinsics, Pose, Twist, projection_jacobian
from .matcher import AnchorPoint, MatchSet, lift_matches
from .renderer import backward_pose, render
from .scene import Scene


@dataclass(frozen=True)
class LossWeights:
    w_c: float = 1.0
    w_m: float = 0.5

    def __post_init__(self):
        if self.w_c < 0 or self.w_m < 0:
            raise ValueError("loss weights must be nonnegative")
        if self.w_c == 0 and self.w_m == 0:
            raise ValueError("at least one loss weight must be positive")


@dataclass(frozen=True)
class LossBreakdown:
    l_com: float
    l_ma: float
    total: float
    n_matches: int
    grad: Twist

    @property
    def no_matches(self) -> bool:
        return self.n_matches == 0


def loss_compare(image: np.ndarray, query: np.ndarray) -> tuple[float, np.ndarray]:
    """MSE over all pixels and channels, plus its gradient image 2(I-Q)/size."""
    image = np.asarray(image, dtype=float)
    query = np.asarray(query, dtype=float)
    if image.shape != query.shape:
        raise ValueError(f"image shapes differ: {image.shape} vs {query.shape}")
    diff = image - query
    return float(np.mean(diff * diff)), 2.0 * diff / diff.size


def loss_match(matches: MatchSet) -> float:
    """Mean squared keypoint distance in normalized coordinates; 0 when empty."""
    if matches.n == 0:
        return 0.0
    d = matches.m - matches.q
    return float(np.mean(np.sum(d * d, axis=1)))


def grad_match(lifted: list[tuple[AnchorPoint, np.ndarray]], pose: Pose,
               k: CameraIntrinsics) -> Twist:
    """Twist gradient of the matching loss through anchor reprojection.

    For each pair the residual is r = normalize(project(anchor, pose)) - q and
    the gradient is (2/N) sum (J_norm J_proj)^T r. Anchors that fall behind
    the camera at the evaluation pose are skipped.
    """
    if not lifted:
        return Twist()
    n = len(lifted)
    j_norm = np.diag([1.0 / k.width, 1.0 / k.height])
    g = np.zeros(6)
    R = pose.rotation_matrix()
    for anchor, q in lifted:
        p = R @ anchor.world + pose.translation
        if p[2] <= k.z_near:
            continue
        pix = np.array([k.fx * p[0] / p[2] + k.cx, k.fy * p[1] / p[2] + k.cy])
        r = np.array([pix[0] / k.width, pix[1] / k.height]) - q
        J = j_norm @ projection_jacobian(anchor.world, pose, k)
        g += J.T @ r
    return Twist.from_array(2.0 / n * g)


def combined(scene: Scene, pose: Pose, k: CameraIntrinsics, query: np.ndarray,
             weights: LossWeights, matcher_fn, threads: int = 1) -> LossBreakdown:
    """Render once, evaluate both terms, and combine their twist gradients.

    ``matcher_fn(rendered, query, pose) -> MatchSet``. Match coordinates and
    lifted anchors are frozen within the evaluation: the gradient flows only
    through the pixel colors (comparing) and the anchor reprojection
    (matching). With a zero weight the corresponding term is skipped entirely,
    so w_m = 0 reproduces the comparing-only gradient bit for bit.
    """
    rendered = render(scene, pose, k, threads=threads)
    l_com, dL_dcolor = loss_compare(rendered.color, query)

    l_ma = 0.0
    n_matches = 0
    g_match = None
    if weights.w_m > 0:
        matches = matcher_fn(rendered, query, pose)
        n_matches = matches.n
        l_ma = loss_match(matches)
        lifted = lift_matches(matches, rendered, pose, k)
        if lifted:
            g_match = grad_match(lifted, pose, k).as_array()

    if weights.w_c > 0:
        grad = weights.w_c * backward_pose(scene, pose, k, dL_dcolor, threads=threads).as_array()
        if g_match is not None:
            grad = grad + weights.w_m * g_match
    elif g_match is not None:
        grad = weights.w_m * g_match
    else:
        grad = np.zeros(6)

    total = weights.w_c * l_com + weights.w_m * l_ma
    return LossBreakdown(l_com=l_com, l_ma=l_ma, total=total,
                         n_matches=n_matches, grad=Twist.from_array(grad))
