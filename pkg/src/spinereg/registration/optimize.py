"""Global pose search: basin hopping over a box-constrained quasi-Newton core.

The outer loop randomly perturbs the current minimizer, runs a bounded
L-BFGS-B descent with forward-difference gradients, and Metropolis-accepts
the result; the best pose ever seen is returned together with a
monotone best-so-far trace. Everything is driven by one seeded RNG, so
results are bit-reproducible for a fixed config.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, asdict
from typing import Callable, List, Optional, Tuple

import numpy as np
from scipy.optimize import minimize

from ..errors import OptimizationError
from ..geometry import NeighborIndex, PointCloud
from ..kinematics import ArticulatedPose, SpineModel, clamp_pose
from .correspond import ObjectiveReport
from .objective import MeshSampleCache, decode_pose, encode_pose, objective


@dataclass(frozen=True)
class OptimizerConfig:
    """Hyperparameters for the basin-hopping pose search.

    ``hop_step`` is (radians, mm) applied to angle and translation
    parameters respectively; ``None`` means half the per-parameter box
    half-width. ``fd_step`` is the forward-difference step, again per
    parameter class. ``global_bounds`` boxes the global transform around
    the initial pose. ``smooth_correspondences`` swaps the hard
    correspondence count for a sigmoid relaxation inside the optimizer.
    """

    corr_threshold: float = 8.0
    basinhop_iterations: int = 50
    hop_step: Optional[Tuple[float, float]] = None
    metropolis_temperature: float = 0.1
    inner_max_iters: int = 60
    inner_max_evals: int = 0  # 0 = no cap beyond inner_max_iters
    fd_step: Tuple[float, float] = (1e-3, 0.1)
    global_rot_bound: float = np.radians(15.0)
    global_trans_bound: float = 50.0
    sample_count: int = 30_000
    smooth_correspondences: bool = False
    smooth_tau: Optional[float] = None
    containment_tau: Optional[float] = None
    posterior_sampling: bool = False
    seed: int = 0

    def __post_init__(self):
        positives = {
            "corr_threshold": self.corr_threshold,
            "metropolis_temperature": self.metropolis_temperature,
            "inner_max_iters": self.inner_max_iters,
            "global_rot_bound": self.global_rot_bound,
            "global_trans_bound": self.global_trans_bound,
            "sample_count": self.sample_count,
        }
        for name, value in positives.items():
            if value <= 0:
                raise ValueError(f"{name} must be positive, got {value}")
        if self.basinhop_iterations < 0:
            raise ValueError("basinhop_iterations must be >= 0")
        if min(self.fd_step) <= 0:
            raise ValueError("fd_step components must be positive")
        if self.hop_step is not None and min(self.hop_step) <= 0:
            raise ValueError("hop_step components must be positive")

    @property
    def effective_smooth_tau(self) -> Optional[float]:
        if not self.smooth_correspondences:
            return None
        return self.smooth_tau if self.smooth_tau is not None else self.corr_threshold / 5.0

    @property
    def effective_containment_tau(self) -> Optional[float]:
        # Containment is only relaxed when correspondence smoothing is on.
        if not self.smooth_correspondences:
            return None
        return self.containment_tau

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "OptimizerConfig":
        doc = json.loads(text)
        if doc.get("hop_step") is not None:
            doc["hop_step"] = tuple(doc["hop_step"])
        if "fd_step" in doc:
            doc["fd_step"] = tuple(doc["fd_step"])
        return cls(**doc)


@dataclass
class TracePoint:
    iteration: int
    combined: float
    corr_ratio: float
    containment: float
    elapsed_ms: float


ProgressCallback = Callable[[TracePoint], None]


def _parameter_bounds(model: SpineModel, x0: np.ndarray,
                      cfg: OptimizerConfig) -> np.ndarray:
    """Per-parameter (lo, hi): joint limits, then a box around the init global."""
    rows = [joint.limits for joint in model.joints]
    joint_bounds = np.vstack(rows) if rows else np.zeros((0, 2))
    rot0, trans0 = x0[-6:-3], x0[-3:]
    global_bounds = np.vstack([
        np.column_stack([rot0 - cfg.global_rot_bound, rot0 + cfg.global_rot_bound]),
        np.column_stack([trans0 - cfg.global_trans_bound, trans0 + cfg.global_trans_bound]),
    ])
    return np.vstack([joint_bounds, global_bounds])


def _per_parameter(model: SpineModel, angle_value: float, trans_value: float) -> np.ndarray:
    n_angles = 3 * model.n_joints + 3  # joint angles plus global rotvec
    return np.concatenate([np.full(n_angles, angle_value), np.full(3, trans_value)])


def optimize_pose(model: SpineModel, scene: PointCloud, init: ArticulatedPose,
                  cfg: OptimizerConfig,
                  on_progress: Optional[ProgressCallback] = None,
                  ) -> Tuple[ArticulatedPose, List[Tuple[int, float]]]:
    """Search for the articulated pose that best explains the scene.

    Returns the best (clamped) pose found and a monotone best-so-far
    trace of (basin-hop iteration, combined objective). The incumbent is
    seeded with the initial pose, so the result never scores worse than
    the init. ``basinhop_iterations=0`` reduces to a single local
    minimization.
    """
    if scene.normals is None:
        raise OptimizationError("scene cloud must carry normals")
    start = time.perf_counter()
    rng = np.random.default_rng(cfg.seed)
    scene_index = NeighborIndex(scene)
    cache = MeshSampleCache.build(model, cfg.sample_count, cfg.seed,
                                  posterior_only=cfg.posterior_sampling)
    tau = cfg.effective_smooth_tau
    ctau = cfg.effective_containment_tau

    def evaluate(x: np.ndarray) -> ObjectiveReport:
        return objective(model, x, scene, scene_index, cfg.corr_threshold, cache,
                         smooth_tau=tau, containment_tau=ctau)

    def f(x: np.ndarray) -> float:
        value = evaluate(x).combined
        if not np.isfinite(value):
            raise OptimizationError(f"non-finite objective at parameters {x.tolist()}")
        return value

    x0 = encode_pose(model, clamp_pose(model, init))
    bounds = _parameter_bounds(model, x0, cfg)
    lo, hi = bounds[:, 0], bounds[:, 1]
    x0 = np.clip(x0, lo, hi)
    eps = _per_parameter(model, cfg.fd_step[0], cfg.fd_step[1])
    if cfg.hop_step is None:
        hop = 0.5 * (hi - lo) / 2.0
    else:
        hop = _per_parameter(model, cfg.hop_step[0], cfg.hop_step[1])

    def local_min(x_start: np.ndarray, capped: bool = True) -> Tuple[np.ndarray, float]:
        options = {"maxiter": cfg.inner_max_iters, "eps": eps}
        if capped and cfg.inner_max_evals:
            options["maxfun"] = cfg.inner_max_evals
        res = minimize(f, np.clip(x_start, lo, hi), method="L-BFGS-B",
                       bounds=list(zip(lo, hi)), options=options)
        x_clipped = np.clip(res.x, lo, hi)
        return x_clipped, f(x_clipped)

    trace: List[Tuple[int, float]] = []

    def record(iteration: int, best_x: np.ndarray, best_f: float) -> None:
        trace.append((iteration, best_f))
        if on_progress is not None:
            report = evaluate(best_x)
            on_progress(TracePoint(iteration, best_f, report.corr_ratio,
                                   report.containment,
                                   (time.perf_counter() - start) * 1e3))

    f0 = f(x0)
    best_x, best_f = x0.copy(), f0
    record(0, best_x, best_f)

    x_cur, f_cur = local_min(x0)
    if f_cur < best_f:
        best_x, best_f = x_cur.copy(), f_cur
    record(0, best_x, best_f)

    for it in range(1, cfg.basinhop_iterations + 1):
        x_try = np.clip(x_cur + rng.uniform(-1.0, 1.0, len(x_cur)) * hop, lo, hi)
        x_new, f_new = local_min(x_try)
        if f_new < best_f:
            best_x, best_f = x_new.copy(), f_new
        # Metropolis acceptance against the current basin.
        if f_new <= f_cur or rng.random() < np.exp(-(f_new - f_cur)
                                                   / cfg.metropolis_temperature):
            x_cur, f_cur = x_new, f_new
        record(it, best_x, best_f)

    if cfg.basinhop_iterations > 0 and cfg.inner_max_evals:
        # Exploration minimizations run eval-capped; finish the incumbent
        # with one uncapped descent so the returned pose is fully polished.
        x_pol, f_pol = local_min(best_x, capped=False)
        if f_pol < best_f:
            best_x, best_f = x_pol, f_pol
        record(cfg.basinhop_iterations, best_x, best_f)

    return decode_pose(model, best_x, clamp=True), trace
