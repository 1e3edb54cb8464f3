"""The fixed 3D Gaussian scene: container, covariance, PLY ingest/egress, synth generator.

Scenes are stored struct-of-arrays for the rasterizer; ``Gaussian3D`` is the
per-element view used for construction and inspection. PLY files follow the
de-facto splatting export schema: float32, binary little-endian, scales stored
as logs, opacity as a pre-sigmoid logit, color as spherical-harmonic DC
coefficients (f_dc = (rgb - 0.5) / C0).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import quat_to_matrix

# DC spherical-harmonic basis constant: rgb = 0.5 + SH_C0 * f_dc.
SH_C0 = 0.28209479177387814

# Color palette for synthetic scenes; saturated and well separated so renders
# carry enough photometric texture for corner detection.
PALETTE = np.array([
    [0.90, 0.10, 0.10],
    [0.10, 0.75, 0.20],
    [0.15, 0.25, 0.95],
    [0.95, 0.80, 0.10],
    [0.80, 0.15, 0.85],
    [0.10, 0.85, 0.85],
    [0.95, 0.50, 0.10],
    [0.55, 0.95, 0.15],
    [0.30, 0.10, 0.70],
    [0.95, 0.95, 0.90],
    [0.60, 0.40, 0.15],
    [0.15, 0.50, 0.40],
])


class PlySchemaError(ValueError):
    """PLY file does not carry the expected vertex properties."""


class EmptySceneError(ValueError):
    """Operation requires at least one Gaussian."""


@dataclass(frozen=True)
class Gaussian3D:
    """One anisotropic Gaussian: mean (m), per-axis std devs, orientation, opacity, RGB."""

    mean: np.ndarray
    scale: np.ndarray
    rot: np.ndarray
    opacity: float
    color: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "mean", np.asarray(self.mean, dtype=float).reshape(3))
        scale = np.asarray(self.scale, dtype=float).reshape(3)
        if np.any(scale <= 0):
            raise ValueError(f"scale components must be positive, got {scale}")
        object.__setattr__(self, "scale", scale)
        q = np.asarray(self.rot, dtype=float).reshape(4)
        object.__setattr__(self, "rot", q / np.linalg.norm(q))
        if not (0.0 < self.opacity <= 1.0):
            raise ValueError(f"opacity must be in (0, 1], got {self.opacity}")
        color = np.asarray(self.color, dtype=float).reshape(3)
        if np.any(color < 0) or np.any(color > 1):
            raise ValueError(f"color components must be in [0, 1], got {color}")
        object.__setattr__(self, "color", color)


def covariance(g: Gaussian3D) -> np.ndarray:
    """3x3 world-frame covariance R diag(scale)^2 R^T."""
    R = quat_to_matrix(g.rot)
    return (R * g.scale**2) @ R.T


@dataclass
class Scene:
    """Ordered collection of Gaussians plus a background color.

    Arrays are the canonical storage (means (N,3), scales (N,3), rots (N,4)
    unit wxyz, opacities (N,), colors (N,3)); iteration order is storage
    order and is the determinism anchor for rendering.
    """

    means: np.ndarray
    scales: np.ndarray
    rots: np.ndarray
    opacities: np.ndarray
    colors: np.ndarray
    background: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.means = np.ascontiguousarray(self.means, dtype=float).reshape(-1, 3)
        n = len(self.means)
        self.scales = np.ascontiguousarray(self.scales, dtype=float).reshape(n, 3)
        self.rots = np.ascontiguousarray(self.rots, dtype=float).reshape(n, 4)
        norms = np.linalg.norm(self.rots, axis=1, keepdims=True)
        self.rots = self.rots / norms
        self.opacities = np.ascontiguousarray(self.opacities, dtype=float).reshape(n)
        self.colors = np.ascontiguousarray(self.colors, dtype=float).reshape(n, 3)
        self.background = np.asarray(self.background, dtype=float).reshape(3)

    @classmethod
    def from_gaussians(cls, gaussians: list[Gaussian3D], background=(0.0, 0.0, 0.0)) -> "Scene":
        if not gaussians:
            return cls(np.zeros((0, 3)), np.zeros((0, 3)), np.zeros((0, 4)),
                       np.zeros(0), np.zeros((0, 3)), np.asarray(background, dtype=float))
        return cls(
            means=np.array([g.mean for g in gaussians]),
            scales=np.array([g.scale for g in gaussians]),
            rots=np.array([g.rot for g in gaussians]),
            opacities=np.array([g.opacity for g in gaussians]),
            colors=np.array([g.color for g in gaussians]),
            background=np.asarray(background, dtype=float),
        )

    def __len__(self) -> int:
        return len(self.means)

    def __getitem__(self, i: int) -> Gaussian3D:
        return Gaussian3D(self.means[i], self.scales[i], self.rots[i],
                          float(self.opacities[i]), self.colors[i])

    @property
    def gaussians(self) -> list[Gaussian3D]:
        return [self[i] for i in range(len(self))]

    def permuted(self, order: np.ndarray) -> "Scene":
        """Scene with Gaussians reordered by ``order`` (same background)."""
        return Scene(self.means[order], self.scales[order], self.rots[order],
                     self.opacities[order], self.colors[order], self.background.copy())


def _fibonacci_directions(n: int) -> np.ndarray:
    """n near-evenly spaced unit vectors (Fibonacci sphere)."""
    i = np.arange(n)
    phi = np.pi * (3.0 - np.sqrt(5.0)) * i
    z = 1.0 - 2.0 * (i + 0.5) / n
    r = np.sqrt(np.maximum(0.0, 1.0 - z * z))
    return np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=1)


def synth_scene(count: int = 1000,
                box=((-1.0, -1.0, -1.0), (1.0, 1.0, 1.0)),
                scale_range=(0.035, 0.06),
                opacity_range=(0.85, 0.98),
                seed: int = 0,
                background=(0.0, 0.0, 0.0),
                layout: str = "cluster",
                n_balls: int = 16) -> Scene:
    """Deterministic random scene with palette colors; pure function of its spec.

    Two layouts:
      - "cluster" (default): Gaussians tile the surfaces of n_balls small
        spheres arranged around the box center, each ball textured with a
        distinct pair of palette colors. The two-level structure (ball-scale
        landmarks, blob-scale texture) keeps classical keypoint matching
        usable across large viewpoint changes, standing in for the object
        scenes used in camera-pose benchmarks.
      - "volume": means uniform in the box; generic fixture for renderer and
        gradient tests.
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    lo = np.asarray(box[0], dtype=float)
    hi = np.asarray(box[1], dtype=float)
    if np.any(hi <= lo):
        raise ValueError(f"degenerate bounding box {box}")
    if not (0 < scale_range[0] <= scale_range[1]):
        raise ValueError(f"bad scale range {scale_range}")
    if not (0 < opacity_range[0] <= opacity_range[1] <= 1):
        raise ValueError(f"bad opacity range {opacity_range}")
    rng = np.random.default_rng(seed)

    if layout == "volume":
        means = rng.uniform(lo, hi, size=(count, 3))
        colors = PALETTE[rng.integers(0, len(PALETTE), size=count)]
    elif layout == "cluster":
        center = 0.5 * (lo + hi)
        h = 0.5 * float(np.min(hi - lo))
        balls = min(n_balls, count)
        per, extra = divmod(count, balls)
        rot_global = quat_to_matrix(_random_quat(rng))
        centers = _fibonacci_directions(balls) @ rot_global.T * (0.55 * h)
        centers += rng.uniform(-0.05 * h, 0.05 * h, size=centers.shape)
        pairs = [(a, b) for a in range(len(PALETTE)) for b in range(a + 1, len(PALETTE))]
        pair_idx = rng.permutation(len(pairs))[:balls]
        means_parts, color_parts = [], []
        for b in range(balls):
            nb = per + (1 if b < extra else 0)
            dirs = _fibonacci_directions(nb) @ quat_to_matrix(_random_quat(rng)).T
            radii = 0.22 * h * (1.0 + rng.uniform(-0.08, 0.08, size=nb))
            means_parts.append(center + centers[b] + dirs * radii[:, None])
            ca, cb = pairs[pair_idx[b]]
            pick = rng.integers(0, 2, size=nb)
            color_parts.append(np.where(pick[:, None] == 0, PALETTE[ca], PALETTE[cb]))
        means = np.concatenate(means_parts)
        colors = np.concatenate(color_parts)
    else:
        raise ValueError(f"unknown layout {layout!r}")

    scales = rng.uniform(scale_range[0], scale_range[1], size=(count, 3))
    rots = rng.normal(size=(count, 4))
    rots /= np.linalg.norm(rots, axis=1, keepdims=True)
    opacities = rng.uniform(opacity_range[0], opacity_range[1], size=count)
    return Scene(means, scales, rots, opacities, colors, np.asarray(background, dtype=float))


def _random_quat(rng) -> np.ndarray:
    q = rng.normal(size=4)
    return q / np.linalg.norm(q)


# --- PLY ingest/egress ------------------------------------------------------

_REQUIRED_PROPS = ("x", "y", "z", "f_dc_0", "f_dc_1", "f_dc_2", "opacity",
                   "scale_0", "scale_1", "scale_2", "rot_0", "rot_1", "rot_2", "rot_3")

_PLY_TYPES = {
    "float": ("<f4", 4), "float32": ("<f4", 4),
    "double": ("<f8", 8), "float64": ("<f8", 8),
    "uchar": ("<u1", 1), "uint8": ("<u1", 1),
    "char": ("<i1", 1), "int8": ("<i1", 1),
    "short": ("<i2", 2), "int16": ("<i2", 2),
    "ushort": ("<u2", 2), "uint16": ("<u2", 2),
    "int": ("<i4", 4), "int32": ("<i4", 4),
    "uint": ("<u4", 4), "uint32": ("<u4", 4),
}


def _sigmoid(x):
    return np.where(x >= 0, 1.0 / (1.0 + np.exp(-x)), np.exp(x) / (1.0 + np.exp(x)))


def load_ply(path) -> Scene:
    """Read a binary-little-endian splat PLY into a Scene.

    Applies exp to log-scales, sigmoid to opacity logits, DC-to-RGB color
    conversion, and normalizes quaternions. Extra properties (normals,
    higher-order SH) are ignored. Never returns a partial scene.
    """
    with open(path, "rb") as f:
        magic = f.readline().strip()
        if magic != b"ply":
            raise PlySchemaError(f"schema mismatch: not a PLY file ({path})")
        fmt = f.readline().strip()
        if fmt != b"format binary_little_endian 1.0":
            raise PlySchemaError(f"schema mismatch: unsupported format {fmt!r}")
        count = None
        in_vertex = False
        props: list[tuple[str, str]] = []
        while True:
            line = f.readline()
            if not line:
                raise PlySchemaError("schema mismatch: unterminated header")
            line = line.decode("ascii", "replace").strip()
            if line == "end_header":
                break
            parts = line.split()
            if parts[:2] == ["element", "vertex"]:
                count = int(parts[2])
                in_vertex = True
            elif parts and parts[0] == "element":
                in_vertex = False
            elif parts and parts[0] == "property" and in_vertex:
                if parts[1] not in _PLY_TYPES:
                    raise PlySchemaError(f"schema mismatch: unsupported type {parts[1]}")
                props.append((parts[2], parts[1]))
        if count is None:
            raise PlySchemaError("schema mismatch: no vertex element")
        if count == 0:
            raise EmptySceneError("empty scene")
        names = [p[0] for p in props]
        for req in _REQUIRED_PROPS:
            if req not in names:
                raise PlySchemaError(f"schema mismatch: missing property {req}")
        dtype = np.dtype([(name, _PLY_TYPES[typ][0]) for name, typ in props])
        raw = f.read(count * dtype.itemsize)
        if len(raw) != count * dtype.itemsize:
            raise PlySchemaError("schema mismatch: truncated vertex data")
        rec = np.frombuffer(raw, dtype=dtype, count=count)

    col = lambda name: rec[name].astype(np.float64)
    means = np.stack([col("x"), col("y"), col("z")], axis=1)
    scales = np.exp(np.stack([col("scale_0"), col("scale_1"), col("scale_2")], axis=1))
    opacities = _sigmoid(col("opacity"))
    f_dc = np.stack([col("f_dc_0"), col("f_dc_1"), col("f_dc_2")], axis=1)
    colors = np.clip(0.5 + SH_C0 * f_dc, 0.0, 1.0)
    rots = np.stack([col("rot_0"), col("rot_1"), col("rot_2"), col("rot_3")], axis=1)
    return Scene(means, scales, rots, opacities, colors)


def save_ply(scene: Scene, path) -> None:
    """Write a Scene with the inverse transforms of load_ply (float32 LE)."""
    n = len(scene)
    if n == 0:
        raise EmptySceneError("empty scene")
    # logit needs opacity strictly inside (0, 1)
    op = np.clip(scene.opacities, 1e-9, 1.0 - 1e-6)
    fields = [
        ("x", scene.means[:, 0]), ("y", scene.means[:, 1]), ("z", scene.means[:, 2]),
        ("nx", np.zeros(n)), ("ny", np.zeros(n)), ("nz", np.zeros(n)),
        ("f_dc_0", (scene.colors[:, 0] - 0.5) / SH_C0),
        ("f_dc_1", (scene.colors[:, 1] - 0.5) / SH_C0),
        ("f_dc_2", (scene.colors[:, 2] - 0.5) / SH_C0),
        ("opacity", np.log(op) - np.log1p(-op)),
        ("scale_0", np.log(scene.scales[:, 0])),
        ("scale_1", np.log(scene.scales[:, 1])),
        ("scale_2", np.log(scene.scales[:, 2])),
        ("rot_0", scene.rots[:, 0]), ("rot_1", scene.rots[:, 1]),
        ("rot_2", scene.rots[:, 2]), ("rot_3", scene.rots[:, 3]),
    ]
    header = ["ply", "format binary_little_endian 1.0", f"element vertex {n}"]
    header += [f"property float {name}" for name, _ in fields]
    header.append("end_header")
    body = np.stack([np.asarray(v, dtype=np.float32) for _, v in fields], axis=1)
    with open(path, "wb") as f:
        f.write(("\n".join(header) + "\n").encode("ascii"))
        f.write(np.ascontiguousarray(body, dtype="<f4").tobytes())
