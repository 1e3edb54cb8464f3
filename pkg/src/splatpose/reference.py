"""Brute-force reference renderer used as an oracle for the production path.

Deliberately naive: every Gaussian (in front of the near plane) is blended
over every pixel of the image in exact depth order, with no bounding boxes,
no support cutoff, and no early termination. Kept free of any code from
``renderer`` beyond the shared type definitions so the two implementations
can disagree.
"""

from __future__ import annotations

import numpy as np

from .geometry import CameraIntrinsics, Pose, quat_to_matrix
from .renderer import ALPHA_MAX, ALPHA_VIS, COV_FLOOR, RenderedImage
from .scene import EmptySceneError, Scene, covariance


def render_reference(scene: Scene, pose: Pose, k: CameraIntrinsics) -> RenderedImage:
    if len(scene) == 0:
        raise EmptySceneError("empty scene")
    W_rot = pose.rotation_matrix()
    splats = []
    for i in range(len(scene)):
        g = scene[i]
        p = W_rot @ g.mean + pose.translation
        if p[2] <= k.z_near:
            continue
        x, y, z = p
        J = np.array([
            [k.fx / z, 0.0, -k.fx * x / z**2],
            [0.0, k.fy / z, -k.fy * y / z**2],
        ])
        cov_cam = W_rot @ covariance(g) @ W_rot.T
        cov2d = J @ cov_cam @ J.T + COV_FLOOR * np.eye(2)
        mean2d = np.array([k.fx * x / z + k.cx, k.fy * y / z + k.cy])
        splats.append((z, i, mean2d, np.linalg.inv(cov2d), g.opacity, g.color))
    splats.sort(key=lambda s: (s[0], s[1]))

    ys, xs = np.mgrid[0:k.height, 0:k.width]
    color = np.zeros((k.height, k.width, 3))
    alpha_sum = np.zeros((k.height, k.width))
    depth_sum = np.zeros((k.height, k.width))
    trans = np.ones((k.height, k.width))
    for z, _, mean2d, conic, opacity, rgb in splats:
        dx = xs - mean2d[0]
        dy = ys - mean2d[1]
        power = -0.5 * (conic[0, 0] * dx**2 + 2.0 * conic[0, 1] * dx * dy + conic[1, 1] * dy**2)
        alpha = np.minimum(ALPHA_MAX, opacity * np.exp(power))
        w = alpha * trans
        color += w[:, :, None] * rgb
        alpha_sum += w
        depth_sum += w * z
        trans = trans * (1.0 - alpha)

    color += trans[:, :, None] * scene.background
    visible = alpha_sum >= ALPHA_VIS
    depth = np.zeros((k.height, k.width))
    np.divide(depth_sum, alpha_sum, out=depth, where=visible)
    depth[~visible] = 0.0
    return RenderedImage(color=color, alpha=alpha_sum, depth=depth)
