"""Constrained first-order refinement of rig poses and intrinsics.

The objective is

    lambda_epi * sum_sets mean Sampson  +  lambda_reproj * sum_sets mean reprojection
    + lambda_barrier * sum_params barrier(delta; bounds, T)

over the flat delta vector of ``rig.flatten_params``.  Gradients come from
reverse-mode autodiff (jax, float64) through the same array kernels the
numpy API in ``geometry`` uses.  Updates are plain gradient descent with
heavy-ball momentum.  Per-group step sizes are scaled by a sensitivity
preconditioner built from projection Jacobians, rig-level rates are divided
by the frame count, and all rates follow a cosine schedule with warm
restarts.
"""
from __future__ import annotations

import math
import os
from dataclasses import dataclass, field

os.environ.setdefault(
    "XLA_FLAGS", "--xla_cpu_multi_thread_eigen=false intra_op_parallelism_threads=1"
)

import jax  # noqa: E402
import jax.numpy as jnp  # noqa: E402
import numpy as np  # noqa: E402

from .camera import BehindCamera, intrinsic_jacobian, pose_delta_jacobian  # noqa: E402
from .constraints import (  # noqa: E402
    BarrierSpec,
    OutOfBounds,
    TemperatureSchedule,
    barrier_terms,
    clamp_interior,
    temperature,
)
from .geometry import (  # noqa: E402
    NoAcceptedMatches,
    _mm,
    _mv,
    epipolar_distance_kernel,
    fundamental_kernel,
    reprojection_kernel,
    sampson_kernel,
    triangulate_kernel,
    normalized_coords,
)
from .lie import SE3Pose, so3_exp  # noqa: E402
from .rig import (  # noqa: E402
    INTRINSIC_GROUPS,
    DeviceTrajectory,
    RigModel,
    flatten_params,
    unflatten_params,
)

jax.config.update("jax_enable_x64", True)


class Diverged(RuntimeError):
    pass


class InsufficientSamples(ValueError):
    pass


class InsufficientMatches(ValueError):
    pass


@dataclass(frozen=True)
class LossWeights:
    lambda_barrier: float = 0.1
    lambda_epi: float = 1e-3
    lambda_reproj: float = 5e-4

    def __post_init__(self):
        if min(self.lambda_barrier, self.lambda_epi, self.lambda_reproj) < 0:
            raise ValueError("loss weights must be >= 0")


@dataclass(frozen=True)
class LRSchedule:
    """Cosine decay with warm restarts at fixed fractions of ``max_iter``.

    Each segment starts at its peak (1.0) and decays to ``floor`` at the
    next restart.
    """

    max_iter: int = 5000
    restarts: tuple = (0.0, 1.0 / 6.0, 0.5)
    floor: float = 0.01

    def restart_iters(self) -> list:
        return sorted({int(round(f * self.max_iter)) for f in self.restarts})

    def factor(self, iteration: int) -> float:
        starts = self.restart_iters()
        ends = starts[1:] + [self.max_iter]
        for start, end in zip(starts, ends):
            if start <= iteration < end or (iteration >= end and end == self.max_iter):
                span = max(end - start, 1)
                frac = min((iteration - start) / span, 1.0)
                return self.floor + (1.0 - self.floor) * 0.5 * (1.0 + math.cos(math.pi * frac))
        return 1.0


@dataclass(frozen=True)
class RefineConfig:
    weights: LossWeights = field(default_factory=LossWeights)
    bounds: BarrierSpec = field(default_factory=BarrierSpec)
    max_iter: int = 5000
    # largest peak rates that stay stable at an exact solution of the default benchmark
    lr_extrinsic: float = 5e-5
    lr_intrinsic: float = 1e-2  # relative to each intrinsic's initial value
    lr_floor: float = 0.01
    t_start: float = 1.0
    t_end: float = 1e4
    momentum: float = 0.9
    seed: int = 0
    log_every: int = 50
    precondition_samples: int = 400
    intrinsics_learnable: bool = True
    barrier_enabled: bool = True
    precondition_enabled: bool = True
    epipolar_enabled: bool = True
    reproj_enabled: bool = True

    def __post_init__(self):
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must be in [0, 1)")
        if self.max_iter < 0:
            raise ValueError("max_iter must be >= 0")

    @property
    def schedule(self) -> LRSchedule:
        return LRSchedule(self.max_iter, floor=self.lr_floor)

    @property
    def temperature_schedule(self) -> TemperatureSchedule:
        return TemperatureSchedule(self.t_start, self.t_end, max(self.max_iter, 1))

    @property
    def bounded(self) -> bool:
        return self.barrier_enabled and self.weights.lambda_barrier > 0


# --- batched objective ------------------------------------------------------------


class Problem:
    """Flattened, jit-compiled objective over a fixed set of matches."""

    def __init__(
        self,
        traj: DeviceTrajectory,
        rig: RigModel,
        match_sets,
        weights: LossWeights = LossWeights(),
        bounds: BarrierSpec = BarrierSpec(),
        intrinsics: bool = True,
        epipolar: bool = True,
        reproj: bool = True,
        barrier: bool = True,
    ):
        self.traj, self.rig = traj, rig
        self.x0, self.layout = flatten_params(traj, rig, intrinsics)
        self.k0 = np.array([c.intrinsics.vector for c in rig.cameras])
        self.lower, self.upper = bounds.arrays(self.layout, self.k0)
        self.weights = weights
        self.use_epi = epipolar and weights.lambda_epi > 0
        self.use_reproj = reproj and weights.lambda_reproj > 0
        self.use_barrier = barrier and weights.lambda_barrier > 0
        self.match_sets = list(match_sets)

        self.R_hat = np.stack([f.pose_hat.rotation for f in traj.frames])
        self.t_hat = np.stack([f.pose_hat.translation for f in traj.frames])
        self.R_ext = np.stack([c.extrinsic.rotation for c in rig.cameras])
        self.t_ext = np.stack([c.extrinsic.translation for c in rig.cameras])
        if not self.match_sets:
            raise InsufficientMatches("no match sets")
        cam_index = {cid: j for j, cid in enumerate(rig.camera_ids)}
        # per-set pose indices; matches are stored contiguously by set
        self.set_fi = np.array([ms.frame_i for ms in self.match_sets])
        self.set_fj = np.array([ms.frame_j for ms in self.match_sets])
        self.set_ci = np.array([cam_index[ms.camera_i] for ms in self.match_sets])
        self.set_cj = np.array([cam_index[ms.camera_j] for ms in self.match_sets])
        sizes = [len(ms) for ms in self.match_sets]
        self.num_sets = len(self.match_sets)
        self.set_id = np.repeat(np.arange(self.num_sets), sizes)
        self.px_i = np.concatenate([ms.pixels_i for ms in self.match_sets])
        self.px_j = np.concatenate([ms.pixels_j for ms in self.match_sets])

        self._eval_and_grad = jax.jit(jax.value_and_grad(self._evaluate, has_aux=True))
        self._eval = jax.jit(self._evaluate)

    # unpacking
    def _split(self, x):
        L = self.layout
        phi = x[L.phi_slice].reshape(-1, 6)
        rho = x[L.rho_slice].reshape(-1, 6)
        if L.intrinsics:
            dk = x[L.intrinsic_slice].reshape(-1, 4)
        else:
            dk = jnp.zeros((L.num_cameras, 4))
        return phi, rho, dk

    def _set_geometry(self, x):
        """Camera poses and intrinsics of both views of every match set."""
        phi, rho, dk = self._split(x)
        R_dev = _mm(self.R_hat, so3_exp(phi[:, :3], jnp), jnp)
        t_dev = _mv(self.R_hat, phi[:, 3:], jnp) + self.t_hat
        R_cam = _mm(self.R_ext, so3_exp(rho[:, :3], jnp), jnp)
        t_cam = _mv(self.R_ext, rho[:, 3:], jnp) + self.t_ext
        K = self.k0 + dk

        def pose(f, c):
            return _mm(R_dev[f], R_cam[c], jnp), _mv(R_dev[f], t_cam[c], jnp) + t_dev[f]

        R_i, t_i = pose(self.set_fi, self.set_ci)
        R_j, t_j = pose(self.set_fj, self.set_cj)
        return R_i, t_i, R_j, t_j, K[self.set_ci], K[self.set_cj]

    def _per_match(self, *arrays):
        return [a[self.set_id] for a in arrays]

    def _set_mean(self, values, weights):
        num = jax.ops.segment_sum(values * weights, self.set_id, self.num_sets, indices_are_sorted=True)
        den = jax.ops.segment_sum(weights, self.set_id, self.num_sets, indices_are_sorted=True)
        return jnp.where(den > 0, num / jnp.where(den > 0, den, 1.0), 0.0), den

    def _evaluate(self, x, temp):
        """Loss terms plus pooled Ep-e / RP-e, from one pass over the matches."""
        geo = self._set_geometry(x)
        (F,) = self._per_match(fundamental_kernel(*geo, jnp))
        res, acc, _, _ = reprojection_kernel(*self._per_match(*geo), self.px_i, self.px_j, jnp)
        accf = acc.astype(res.dtype)
        out = {}
        if self.use_epi:
            d, valid = sampson_kernel(F, self.px_i, self.px_j, jnp)
            per_set, _ = self._set_mean(d, valid.astype(d.dtype))
            out["epipolar"] = jnp.sum(per_set)
        else:
            out["epipolar"] = jnp.asarray(0.0)
        if self.use_reproj:
            per_set, _ = self._set_mean(res, accf)
            out["reproj"] = jnp.sum(per_set)
        else:
            out["reproj"] = jnp.asarray(0.0)
        if self.use_barrier:
            out["barrier"] = jnp.sum(barrier_terms(x, self.lower, self.upper, temp, jnp))
        else:
            out["barrier"] = jnp.asarray(0.0)
        w = self.weights
        loss = w.lambda_epi * out["epipolar"] + w.lambda_reproj * out["reproj"] + w.lambda_barrier * out["barrier"]

        dist, valid = epipolar_distance_kernel(F, self.px_i, self.px_j, jnp)
        n_valid = jnp.sum(valid)
        n_acc = jnp.sum(accf)
        out["epe"] = jnp.where(n_valid > 0, jnp.sum(jnp.where(valid, dist, 0.0)) / jnp.maximum(n_valid, 1), 0.0)
        out["rpe"] = jnp.where(n_acc > 0, 0.5 * jnp.sum(res) / jnp.maximum(n_acc, 1.0), 0.0)
        out["accepted"] = n_acc
        out["loss"] = loss
        return loss, out

    # public evaluation
    def check_bounds(self, x):
        if self.use_barrier and (np.any(x <= self.lower) or np.any(x >= self.upper)):
            bad = np.flatnonzero((x <= self.lower) | (x >= self.upper))[0]
            raise OutOfBounds(
                f"parameter {bad} ({self.layout.groups[bad]}) = {x[bad]:.6g} outside "
                f"({self.lower[bad]:.6g}, {self.upper[bad]:.6g})"
            )

    def step_eval(self, x, temp: float = 1.0):
        """(loss, gradient, terms) where ``terms`` also carries epe/rpe/accepted."""
        x = np.asarray(x, dtype=float)
        self.check_bounds(x)
        (value, aux), grad = self._eval_and_grad(jnp.asarray(x), temp)
        return float(value), np.asarray(grad), {k: float(v) for k, v in aux.items()}

    def value_and_grad(self, x, temp: float = 1.0):
        value, grad, _ = self.step_eval(x, temp)
        return value, grad

    def terms(self, x, temp: float = 1.0) -> dict:
        _, aux = self._eval(jnp.asarray(x, dtype=float), temp)
        return {k: float(v) for k, v in aux.items()}

    def value(self, x, temp: float = 1.0) -> float:
        self.check_bounds(np.asarray(x, dtype=float))
        return self.terms(x, temp)["loss"]

    def metrics(self, x) -> tuple:
        t = self.terms(x)
        return t["epe"], t["rpe"], int(t["accepted"])

    def unflatten(self, x):
        return unflatten_params(self.traj, self.rig, x, self.layout)


def total_loss(
    traj, rig, match_sets, weights: LossWeights = LossWeights(), bounds: BarrierSpec = BarrierSpec(),
    temp: float = 1.0, intrinsics: bool = True,
):
    """Loss and gradient (flat-parameter order) at the deltas stored in ``traj``/``rig``."""
    problem = Problem(traj, rig, match_sets, weights, bounds, intrinsics=intrinsics)
    value, grad, terms = problem.step_eval(problem.x0, temp)
    if problem.use_reproj and terms["accepted"] == 0:
        raise NoAcceptedMatches("no match survives triangulation gating")
    return value, grad


# --- preconditioning --------------------------------------------------------------


@dataclass(frozen=True)
class PreconditionedRates:
    multipliers: dict  # group -> lr multiplier
    sensitivity: dict  # group -> mean diagonal of the averaged J^T J

    def vector(self, layout) -> np.ndarray:
        return np.array([self.multipliers[str(g)] for g in layout.groups])


def _median_normalize(values: dict) -> dict:
    med = float(np.median(list(values.values())))
    return {g: v / med for g, v in values.items()}


def compute_preconditioner(traj: DeviceTrajectory, rig: RigModel, sample_points, sample_views) -> PreconditionedRates:
    """Per-group learning-rate multipliers from projection sensitivities.

    ``sample_points`` (S, 3) world points, ``sample_views`` S pairs of
    (frame_index, camera_id).  For each sample the 2x16 Jacobian of its
    pixel w.r.t. (phi, rho, relative intrinsics) is formed; the per-sample
    Gram matrices are averaged, and each group's multiplier is proportional
    to the inverse square root of its mean diagonal entry, normalized so the
    median multiplier is 1.  Intrinsic columns are taken per unit relative
    change, which makes all eight groups comparable.
    """
    points = np.asarray(sample_points, dtype=float).reshape(-1, 3)
    diag = np.zeros(16)
    n = 0
    for p, (f, cid) in zip(points, sample_views):
        frame = traj.frame(int(f))
        cam = rig.camera(cid)
        k = cam.effective_intrinsics
        try:
            J_pose = pose_delta_jacobian(p, frame.pose, cam.effective_extrinsic, k)
        except BehindCamera:
            continue
        pose = frame.pose
        ext = cam.effective_extrinsic
        p_dev = pose.rotation.T @ (p - pose.translation)
        p_cam = ext.rotation.T @ (p_dev - ext.translation)
        J_k = intrinsic_jacobian(p_cam) * k.vector  # relative parameterization
        J = np.hstack([J_pose, J_k])
        diag += np.sum(J * J, axis=0)
        n += 1
    if n < 10:
        raise InsufficientSamples(f"need >= 10 visible point-view samples, got {n}")
    diag /= n
    slices = {
        "phi_rot": slice(0, 3), "phi_trans": slice(3, 6), "rho_rot": slice(6, 9),
        "rho_trans": slice(9, 12), "fx": slice(12, 13), "fy": slice(13, 14),
        "cx": slice(14, 15), "cy": slice(15, 16),
    }
    sens = {g: float(np.mean(diag[s])) for g, s in slices.items()}
    tiny = 1e-12 * max(sens.values())
    raw = {g: 1.0 / math.sqrt(max(v, tiny)) for g, v in sens.items()}
    return PreconditionedRates(_median_normalize(raw), sens)


def triangulated_samples(traj, rig, match_sets, max_samples: int = 400, seed: int = 0):
    """Sample points (S, 3) and views from line intersections of the matches."""
    from .rig import effective_pose

    pts, views = [], []
    for ms in match_sets:
        pose_i = effective_pose(traj, rig, ms.frame_i, ms.camera_i)
        pose_j = effective_pose(traj, rig, ms.frame_j, ms.camera_j)
        k_i = rig.camera(ms.camera_i).effective_intrinsics.vector
        k_j = rig.camera(ms.camera_j).effective_intrinsics.vector
        d_i = normalized_coords(ms.pixels_i, k_i) @ pose_i.rotation.T
        d_j = normalized_coords(ms.pixels_j, k_j) @ pose_j.rotation.T
        d_i /= np.linalg.norm(d_i, axis=1, keepdims=True)
        d_j /= np.linalg.norm(d_j, axis=1, keepdims=True)
        o_i = np.broadcast_to(pose_i.translation, d_i.shape)
        o_j = np.broadcast_to(pose_j.translation, d_j.shape)
        t, s, _, ok = triangulate_kernel(o_i, d_i, o_j, d_j)
        ok = ok & (t > 0) & (s > 0)
        mid = 0.5 * ((o_i + t[:, None] * d_i) + (o_j + s[:, None] * d_j))
        for p in mid[ok]:
            pts.append(p)
            views.append((ms.frame_i, ms.camera_i))
            pts.append(p)
            views.append((ms.frame_j, ms.camera_j))
    if len(pts) > max_samples:
        idx = np.sort(np.random.default_rng(seed).choice(len(pts), max_samples, replace=False))
        pts = [pts[i] for i in idx]
        views = [views[i] for i in idx]
    return np.array(pts).reshape(-1, 3), views


# --- optimization loop ------------------------------------------------------------


@dataclass
class History:
    iteration: list = field(default_factory=list)
    loss: list = field(default_factory=list)
    epe: list = field(default_factory=list)
    rpe: list = field(default_factory=list)
    temperature: list = field(default_factory=list)
    lr_factor: list = field(default_factory=list)
    max_bound_fraction: list = field(default_factory=list)
    clamped: list = field(default_factory=list)

    def append(self, **row):
        for k, v in row.items():
            getattr(self, k).append(v)

    def columns(self) -> list:
        return list(self.__dataclass_fields__)

    def rows(self, every: int = 1):
        keys = self.columns()
        n = len(self.iteration)
        for i in range(n):
            if self.iteration[i] % every == 0 or i == n - 1:
                yield {k: getattr(self, k)[i] for k in keys}


@dataclass
class RefineResult:
    trajectory: DeviceTrajectory
    rig: RigModel
    history: History
    rates: PreconditionedRates | None
    iterations: int
    x: np.ndarray


def _bound_fraction(x, lower, upper) -> float:
    mid = 0.5 * (lower + upper)
    half = 0.5 * (upper - lower)
    return float(np.max(np.abs(x - mid) / half)) if len(x) else 0.0


def iterations_to_fraction(values, fraction: float = 0.95) -> int:
    """First index where the reduction from values[0] reaches ``fraction`` of the final one."""
    v = np.asarray(values, dtype=float)
    target = fraction * (v[0] - v[-1])
    hits = np.flatnonzero(v[0] - v >= target)
    return int(hits[0]) if len(hits) else len(v) - 1


def _step_sizes(problem: Problem, config: RefineConfig, rates: PreconditionedRates | None) -> np.ndarray:
    layout = problem.layout
    lr = np.empty(layout.size)
    for i, (g, owner) in enumerate(zip(layout.groups, layout.owners)):
        g = str(g)
        if g in INTRINSIC_GROUPS:
            lr[i] = config.lr_intrinsic * problem.k0[owner][INTRINSIC_GROUPS.index(g)]
        else:
            lr[i] = config.lr_extrinsic
    # rig parameters collect gradient from every frame, so their curvature grows with
    # the frame count; without this the shared rotations limit the stable step size
    lr[layout.phi_slice.stop:] /= layout.num_frames
    if rates is not None:
        lr *= rates.vector(layout)
    return lr


def _optimize(problem: Problem, lr_base: np.ndarray, config: RefineConfig, schedule: LRSchedule | None = None):
    """Run the update loop; history row ``k`` describes the iterate after ``k`` steps."""
    x = problem.x0.copy()
    schedule = schedule or config.schedule
    temps = config.temperature_schedule
    m = np.zeros_like(x)
    history = History()
    trainable = lr_base > 0
    active = bool(problem.use_epi or problem.use_reproj or problem.use_barrier) and trainable.any()
    clamped = 0

    def record(it, terms, temp, factor):
        history.append(
            iteration=it, loss=terms["loss"], epe=terms["epe"], rpe=terms["rpe"], temperature=temp,
            lr_factor=factor, max_bound_fraction=_bound_fraction(x, problem.lower, problem.upper),
            clamped=clamped,
        )

    n_iter = config.max_iter if active else 0
    for it in range(n_iter):
        temp = temperature(temps, it)
        factor = schedule.factor(it)
        loss, grad, terms = problem.step_eval(x, temp)
        if not (np.isfinite(loss) and np.all(np.isfinite(grad))):
            raise Diverged(f"non-finite loss at iteration {it}")
        record(it, terms, temp, factor)
        lr = lr_base * factor
        m = config.momentum * m + grad
        step = lr * m
        x = np.where(trainable, x - step, x)
        if problem.use_barrier:
            xc = clamp_interior(x, problem.lower, problem.upper)
            clamped = int(np.sum(xc != x))
            x = xc
        if not np.all(np.isfinite(x)):
            raise Diverged(f"non-finite parameters at iteration {it}")
    t_final = temperature(temps, n_iter) if n_iter else temps.t_start
    record(n_iter, problem.terms(x, t_final), t_final, schedule.factor(n_iter))
    return x, history


def run_refinement(traj: DeviceTrajectory, rig: RigModel, match_sets, config: RefineConfig = RefineConfig()) -> RefineResult:
    """Refine device deltas, rig deltas and (optionally) intrinsics."""
    problem = Problem(
        traj, rig, match_sets, config.weights, config.bounds,
        intrinsics=config.intrinsics_learnable, epipolar=config.epipolar_enabled,
        reproj=config.reproj_enabled, barrier=config.bounded,
    )
    problem.check_bounds(problem.x0)
    rates = None
    if config.precondition_enabled:
        pts, views = triangulated_samples(traj, rig, match_sets, config.precondition_samples, config.seed)
        rates = compute_preconditioner(traj, rig, pts, views)
    lr = _step_sizes(problem, config, rates)
    x, history = _optimize(problem, lr, config)
    new_traj, new_rig = problem.unflatten(x)
    return RefineResult(new_traj, new_rig, history, rates, config.max_iter, x)


@dataclass(frozen=True)
class AdaptConfig:
    iterations: int = 500
    lr: float = 1e-4
    lr_floor: float = 0.01
    lambda_epi: float = 1e-3
    lambda_reproj: float = 5e-4
    min_matches: int = 8


def test_time_adapt(
    traj: DeviceTrajectory, rig: RigModel, frame_index: int, match_sets, config: AdaptConfig = AdaptConfig()
) -> SE3Pose:
    """Refine one frame's device pose against frozen neighbours.

    Only ``phi`` of ``frame_index`` is optimized, using the geometric losses
    of match sets that involve that frame.  Returns the adapted device pose;
    ``traj`` and ``rig`` are not modified.
    """
    traj.frame(frame_index)
    sets = [ms for ms in match_sets if frame_index in (ms.frame_i, ms.frame_j)]
    if sum(len(ms) for ms in sets) < config.min_matches:
        raise InsufficientMatches(f"frame {frame_index} has fewer than {config.min_matches} matches")
    weights = LossWeights(0.0, config.lambda_epi, config.lambda_reproj)
    problem = Problem(traj, rig, sets, weights, intrinsics=False, barrier=False)
    lr = np.zeros(problem.layout.size)
    lr[6 * frame_index: 6 * frame_index + 6] = config.lr
    run_cfg = RefineConfig(
        weights=weights, max_iter=config.iterations, barrier_enabled=False,
        precondition_enabled=False, intrinsics_learnable=False,
    )
    schedule = LRSchedule(config.iterations, restarts=(0.0,), floor=config.lr_floor)
    x, _ = _optimize(problem, lr, run_cfg, schedule)
    new_traj, _ = problem.unflatten(x)
    return new_traj.frames[frame_index].pose
