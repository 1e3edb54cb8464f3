"""The outer estimation loop: render, lose, differentiate, step on the twist.

Adam runs in the 6-dimensional tangent space. Each step evaluates the
combined loss at the current pose, takes an Adam step on a local twist delta,
and retracts with pose <- exp_se3(-delta) * pose; the Adam moments persist
across steps while delta re-zeroes. Everything is deterministic for a fixed
configuration.
"""

from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .geometry import CameraIntrinsics, Pose, Twist, exp_se3, rotation_geodesic_deg
from .losses import LossBreakdown, LossWeights, combined
from .matcher import MatcherConfig, MatchSet, load_match_file, match_images, oracle_match
from .scene import Scene


class OptimizerDivergedError(RuntimeError):
    """Loss or gradient went non-finite; carries the iteration index."""

    def __init__(self, iteration: int, detail: str):
        super().__init__(f"non-finite value at iteration {iteration}: {detail}")
        self.iteration = iteration


@dataclass(frozen=True)
class OptimizerConfig:
    max_iters: int = 300
    lr: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    plateau_patience: int = 20   # halve lr after this many non-improving iters
    lr_decay: float = 0.5
    min_lr: float = 0.0          # floor for the plateau decay (0 = none)
    converge_grad_tol: float = 1e-7
    converge_loss_tol: float = 1e-10
    w_c: float = 1.0
    w_m: float = 0.5
    matcher: str = "builtin"     # builtin | oracle | file:<path>
    confidence_threshold: float = 0.7
    max_matches: int = 256
    oracle_samples: int = 256
    seed: int = 0
    render_threads: int = 1

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")

    @property
    def weights(self) -> LossWeights:
        return LossWeights(self.w_c, self.w_m)


@dataclass(frozen=True)
class OptimizerState:
    """Immutable optimizer state; step() returns a successor."""

    pose: Pose
    m: np.ndarray = field(default_factory=lambda: np.zeros(6))
    v: np.ndarray = field(default_factory=lambda: np.zeros(6))
    step_count: int = 0
    lr: float = 0.01
    best_loss: float = math.inf
    since_improve: int = 0
    converged: bool = False


@dataclass(frozen=True)
class TrajectoryPoint:
    iteration: int
    pose: Pose
    loss: LossBreakdown


@dataclass
class PoseEstimate:
    final_pose: Pose
    trajectory: list[TrajectoryPoint]
    converged: bool
    iters_used: int
    wall_time: float


@dataclass(frozen=True)
class PoseError:
    rot_err_deg: float
    trans_err_m: float


def step(state: OptimizerState, eval_fn, cfg: OptimizerConfig) -> tuple[OptimizerState, LossBreakdown]:
    """One optimization step: evaluate, check convergence, Adam-update the pose.

    Pure given a pure eval_fn, so replaying from the same state reproduces the
    same successor. Convergence is checked before moving, making an exact
    minimum a fixed point.
    """
    lb = eval_fn(state.pose)
    g = lb.grad.as_array()
    if not (np.isfinite(lb.total) and np.all(np.isfinite(g))):
        raise OptimizerDivergedError(state.step_count,
                                     f"total={lb.total!r} grad={g!r}")
    if np.linalg.norm(g) < cfg.converge_grad_tol or lb.total < cfg.converge_loss_tol:
        return replace(state, converged=True), lb

    t = state.step_count + 1
    m = cfg.beta1 * state.m + (1.0 - cfg.beta1) * g
    v = cfg.beta2 * state.v + (1.0 - cfg.beta2) * g * g
    m_hat = m / (1.0 - cfg.beta1**t)
    v_hat = v / (1.0 - cfg.beta2**t)
    delta = state.lr * m_hat / (np.sqrt(v_hat) + cfg.eps)
    pose = exp_se3(Twist.from_array(-delta)).compose(state.pose)

    if lb.total < state.best_loss:
        best, since = lb.total, 0
    else:
        best, since = state.best_loss, state.since_improve + 1
    lr = state.lr
    if since >= cfg.plateau_patience:
        lr *= cfg.lr_decay
        since = 0
    return OptimizerState(pose=pose, m=m, v=v, step_count=t, lr=lr,
                          best_loss=best, since_improve=since), lb


def make_matcher(cfg: OptimizerConfig, scene: Scene, k: CameraIntrinsics,
                 gt: Pose | None = None):
    """Build the matcher callable named by cfg.matcher.

    The oracle matcher samples the same subset of means every iteration
    (seeded once per run) so optimization runs replay exactly.
    """
    if cfg.matcher == "builtin":
        mc = MatcherConfig(cfg.confidence_threshold, cfg.max_matches)
        return lambda rendered, query, pose: match_images(rendered, query, mc)
    if cfg.matcher == "oracle":
        if gt is None:
            raise ValueError("oracle matcher requires the ground-truth pose")
        return lambda rendered, query, pose: oracle_match(
            scene, pose, gt, k, cfg.oracle_samples, cfg.seed)
    if cfg.matcher.startswith("file:"):
        fixed = load_match_file(cfg.matcher[5:])
        return lambda rendered, query, pose: fixed
    raise ValueError(f"unknown matcher {cfg.matcher!r}")


def estimate_pose(scene: Scene, query: np.ndarray, init: Pose, k: CameraIntrinsics,
                  cfg: OptimizerConfig = OptimizerConfig(),
                  gt: Pose | None = None, matcher_fn=None) -> PoseEstimate:
    """Minimize the combined loss from ``init``; returns the full trajectory.

    Stops at max_iters, gradient norm below converge_grad_tol, or total loss
    below converge_loss_tol.
    """
    if matcher_fn is None:
        matcher_fn = make_matcher(cfg, scene, k, gt)
    weights = cfg.weights

    def eval_fn(pose: Pose) -> LossBreakdown:
        return combined(scene, pose, k, query, weights, matcher_fn,
                        threads=cfg.render_threads)

    state = OptimizerState(pose=init, lr=cfg.lr)
    trajectory: list[TrajectoryPoint] = []
    t0 = time.perf_counter()
    converged = False
    iters_used = 0
    for it in range(cfg.max_iters + 1):
        prev_pose = state.pose
        state, lb = step(state, eval_fn, cfg)
        trajectory.append(TrajectoryPoint(it, prev_pose, lb))
        iters_used = it
        if state.converged:
            converged = True
            break
        if it == cfg.max_iters:
            # cap reached: keep the last evaluated pose as the result
            state = replace(state, pose=prev_pose)
            break
    return PoseEstimate(final_pose=trajectory[-1].pose, trajectory=trajectory,
                        converged=converged, iters_used=iters_used,
                        wall_time=time.perf_counter() - t0)


def evaluate(est: Pose, gt: Pose) -> PoseError:
    """Rotation error (geodesic degrees) and camera-center distance (m)."""
    return PoseError(rot_err_deg=rotation_geodesic_deg(est, gt),
                     trans_err_m=float(np.linalg.norm(est.camera_center() - gt.camera_center())))


def save_trajectory_csv(estimate: PoseEstimate, path, gt: Pose | None = None) -> None:
    """Write the trajectory as CSV; error columns are empty without a gt pose."""
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["iter", "rot_err_deg", "trans_err_m", "l_com", "l_ma", "total", "n_matches"])
        for pt in estimate.trajectory:
            if gt is not None:
                err = evaluate(pt.pose, gt)
                rot, trans = repr(err.rot_err_deg), repr(err.trans_err_m)
            else:
                rot, trans = "", ""
            w.writerow([pt.iteration, rot, trans, repr(pt.loss.l_com),
                        repr(pt.loss.l_ma), repr(pt.loss.total), pt.loss.n_matches])
