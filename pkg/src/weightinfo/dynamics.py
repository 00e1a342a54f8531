"""Training dynamics: SGD/Langevin runs, escape times, stability Jacobians,
the toy-model information pipeline, and the 2-D plane projection of weight paths.

Every operation is a deterministic function of its explicit seed. Independent
trials derive their streams from (master seed, trial index), so results do not
depend on execution order.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from . import ndcore, fisher as fisher_mod, infoweights, models
from .models import LabeledDataset, ModelSpec, ToyModelConfig
from .ndcore import WeightVector, as_tensor


class DivergenceError(RuntimeError):
    """Training loss exploded or produced non-finite weights."""

    def __init__(self, step: int, message: str | None = None):
        self.step = step
        super().__init__(message or f"training diverged at step {step}")


class StabilityUndefinedError(RuntimeError):
    """A run used for a stability Jacobian did not converge."""


class DegeneratePlaneError(ValueError):
    """The spanning vectors of the projection plane are (near-)collinear."""


DIVERGENCE_LOSS = 1e6

NOISE_MODES = ("minibatch", "isotropic")


@dataclass(frozen=True)
class TrainConfig:
    """SGD hyper-parameters; `isotropic` noise means full-batch Langevin steps."""

    step_size: float
    batch_size: int
    steps: int
    momentum: float = 0.0
    weight_decay: float = 0.0
    noise: str = "minibatch"
    temperature: float = 0.0
    snapshot_stride: int = 1
    seed: int = 0

    def __post_init__(self):
        if not self.step_size >= 0:
            raise ValueError("step_size must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")
        if self.noise not in NOISE_MODES:
            raise ValueError(f"noise must be one of {NOISE_MODES}")
        if self.noise == "isotropic" and not self.temperature > 0:
            raise ValueError("isotropic noise requires temperature > 0")
        if self.snapshot_stride < 1:
            raise ValueError("snapshot_stride must be >= 1")


@dataclass
class TrainTrace:
    """Recorded optimization path: strided snapshots, per-step batch losses."""

    snapshots: list[tuple[int, WeightVector]]
    losses: np.ndarray
    final: WeightVector
    config: TrainConfig

    def snapshot_steps(self) -> list[int]:
        return [s for s, _ in self.snapshots]

    def to_json(self) -> str:
        payload = {
            "config": {
                "step_size": self.config.step_size,
                "batch_size": self.config.batch_size,
                "steps": self.config.steps,
                "momentum": self.config.momentum,
                "weight_decay": self.config.weight_decay,
                "noise": self.config.noise,
                "temperature": self.config.temperature,
                "snapshot_stride": self.config.snapshot_stride,
                "seed": self.config.seed,
            },
            "layout": [[name, list(shape)] for name, shape in self.final.layout],
            "snapshots": {str(s): [float(v) for v in w.values] for s, w in self.snapshots},
            "losses": [float(v) for v in self.losses],
        }
        return json.dumps(payload, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "TrainTrace":
        obj = json.loads(text)
        layout = tuple((n, tuple(s)) for n, s in obj["layout"])
        snaps = sorted(((int(k), WeightVector(np.array(v), layout))
                        for k, v in obj["snapshots"].items()), key=lambda t: t[0])
        cfg = TrainConfig(**obj["config"])
        return cls(snapshots=list(snaps), losses=np.array(obj["losses"]),
                   final=snaps[-1][1], config=cfg)


def sgd_train(model: ModelSpec, data: LabeledDataset, cfg: TrainConfig,
              w0: WeightVector) -> TrainTrace:
    """Minibatch SGD with without-replacement shuffled epochs.

    In `isotropic` mode each step uses the full-batch gradient plus
    sqrt(2 eta T) Gaussian noise instead of minibatch noise. The recorded
    per-step loss is the loss of the batch used for that step, evaluated
    before the update.
    """
    if w0.dim != model.n_params:
        raise ValueError("w0 dimension does not match the model")
    if cfg.batch_size > data.n:
        raise ValueError("batch_size exceeds the dataset size")
    rng = np.random.default_rng(np.random.SeedSequence([int(cfg.seed), 0x56D]))
    w = w0.values.copy()
    velocity = np.zeros_like(w)
    losses = np.empty(cfg.steps)
    snapshots: list[tuple[int, WeightVector]] = [(0, w0.with_values(w.copy()))]
    full_batch = cfg.noise == "isotropic" or cfg.batch_size == data.n
    perm = None
    pos = data.n  # force a reshuffle on first use
    for step in range(cfg.steps):
        if full_batch:
            batch = data
        else:
            if pos + cfg.batch_size > data.n:
                perm = rng.permutation(data.n)
                pos = 0
            batch = data.subset(perm[pos : pos + cfg.batch_size])
            pos += cfg.batch_size
        wv = w0.with_values(w)
        losses[step] = ndcore.loss(model, wv, batch)
        if not np.isfinite(losses[step]) or losses[step] > DIVERGENCE_LOSS:
            raise DivergenceError(step)
        g = ndcore.grad_loss(model, wv, batch).values
        if cfg.weight_decay > 0:
            g = g + cfg.weight_decay * w
        if cfg.momentum > 0:
            velocity = cfg.momentum * velocity + g
            update = velocity
        else:
            update = g
        w = w - cfg.step_size * update
        if cfg.noise == "isotropic":
            w = w + math.sqrt(2.0 * cfg.step_size * cfg.temperature) * rng.standard_normal(w.size)
        if not np.all(np.isfinite(w)):
            raise DivergenceError(step)
        if (step + 1) % cfg.snapshot_stride == 0:
            snapshots.append((step + 1, w0.with_values(w.copy())))
    if snapshots[-1][0] != cfg.steps:
        snapshots.append((cfg.steps, w0.with_values(w.copy())))
    return TrainTrace(snapshots=snapshots, losses=losses,
                      final=snapshots[-1][1], config=cfg)


def free_energy(model: ModelSpec, w: WeightVector, data: LabeledDataset,
                T: float, damping: float | None = None) -> float:
    """F(w) = L_D(w) + (T/2) log|F(w)|, with the Fisher log-det damped."""
    if T < 0:
        raise ValueError("temperature must be >= 0")
    base = ndcore.loss(model, w, data)
    if T == 0:
        return base
    est = fisher_mod.fisher_exact(model, w, data.inputs)
    eps = fisher_mod.default_damping(est) if damping is None else damping
    return base + 0.5 * T * fisher_mod.logdet_damped(est, eps)


def toy_free_energy(theta: float, data: LabeledDataset, c: float, T: float) -> float:
    """Toy-model free energy with the closed-form Fisher 2 N phi'(theta)^2."""
    base = models.toy_loss(theta, data, c)
    if T == 0:
        return base
    F = models.toy_fisher(theta, data.n, c)
    with np.errstate(divide="ignore"):
        return float(base + 0.5 * T * np.log(F))


# ---------------------------------------------------------------------------
# scalar landscapes, saddle location, Kramers escape
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ScalarLandscape:
    """A loss surface over R^dim with optional analytic gradient.

    `grad_batch`, when given, maps an (R, dim) array of walker positions to
    their gradients; it is what the escape simulation uses.
    """

    f: Callable[[np.ndarray], float]
    dim: int = 1
    grad: Callable[[np.ndarray], np.ndarray] | None = None
    grad_batch: Callable[[np.ndarray], np.ndarray] | None = None

    def value(self, w) -> float:
        return float(self.f(np.atleast_1d(np.asarray(w, dtype=float))))

    def gradient(self, w) -> np.ndarray:
        w = np.atleast_1d(np.asarray(w, dtype=float))
        if self.grad is not None:
            return np.asarray(self.grad(w), dtype=float)
        return ndcore.fd_gradient(lambda v: self.f(v), w)

    def gradients(self, pts: np.ndarray) -> np.ndarray:
        if self.grad_batch is not None:
            return np.asarray(self.grad_batch(pts), dtype=float)
        return np.stack([self.gradient(p) for p in pts])

    def hessian(self, w) -> np.ndarray:
        w = np.atleast_1d(np.asarray(w, dtype=float))
        return ndcore.fd_hessian_of_grad(self.gradient, w)


def double_well_1d() -> ScalarLandscape:
    """L(w) = (w^2 - 1)^2 / 4: minima at +-1, saddle at 0, barrier 1/4."""

    def f(w):
        return float((w[0] ** 2 - 1.0) ** 2 / 4.0)

    def g(w):
        return np.array([(w[0] ** 2 - 1.0) * w[0]])

    def gb(pts):
        x = pts[:, 0]
        return ((x * x - 1.0) * x)[:, None]

    return ScalarLandscape(f=f, dim=1, grad=g, grad_batch=gb)


def double_well_2d(transverse: float = 1.0) -> ScalarLandscape:
    """Double well along the first axis plus a quadratic transverse direction."""

    def f(w):
        return float((w[0] ** 2 - 1.0) ** 2 / 4.0 + 0.5 * transverse * w[1] ** 2)

    def g(w):
        return np.array([(w[0] ** 2 - 1.0) * w[0], transverse * w[1]])

    def gb(pts):
        x, y = pts[:, 0], pts[:, 1]
        return np.stack([(x * x - 1.0) * x, transverse * y], axis=1)

    return ScalarLandscape(f=f, dim=2, grad=g, grad_batch=gb)


def find_saddle_1d(landscape: ScalarLandscape, a: float, b: float,
                   grid: int = 2001, tol: float = 1e-12) -> np.ndarray:
    """Saddle between two 1-D minima a < b: interior grid max, then bisection on f'."""
    xs = np.linspace(a, b, grid)
    vals = np.array([landscape.value([x]) for x in xs])
    i = int(np.argmax(vals[1:-1])) + 1
    lo, hi = xs[i - 1], xs[i + 1]

    def dfd(x):
        return float(landscape.gradient([x])[0])

    glo, ghi = dfd(lo), dfd(hi)
    if glo * ghi > 0:
        return np.array([xs[i]])
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        gm = dfd(mid)
        if glo * gm <= 0:
            hi, ghi = mid, gm
        else:
            lo, glo = mid, gm
    return np.array([0.5 * (lo + hi)])


def find_saddle_string(landscape: ScalarLandscape, wa, wb, nodes: int = 64,
                       iters: int = 400, step: float = 0.01) -> np.ndarray:
    """Zero-temperature string method between two minima; returns the max-energy node.

    Nodes relax along the component of the gradient perpendicular to the path
    and are re-distributed to equal arc length each iteration.
    """
    wa = np.atleast_1d(np.asarray(wa, dtype=float))
    wb = np.atleast_1d(np.asarray(wb, dtype=float))
    path = np.linspace(0.0, 1.0, nodes)[:, None] * (wb - wa)[None, :] + wa[None, :]
    for _ in range(iters):
        grads = landscape.gradients(path)
        tang = np.zeros_like(path)
        tang[1:-1] = path[2:] - path[:-2]
        norms = np.linalg.norm(tang[1:-1], axis=1, keepdims=True)
        norms[norms == 0] = 1.0
        tang[1:-1] /= norms
        perp = grads - np.sum(grads * tang, axis=1, keepdims=True) * tang
        path[1:-1] -= step * perp[1:-1]
        # reparametrize to equal arc length
        seg = np.linalg.norm(np.diff(path, axis=0), axis=1)
        s = np.concatenate([[0.0], np.cumsum(seg)])
        if s[-1] == 0:
            break
        s /= s[-1]
        target = np.linspace(0.0, 1.0, nodes)
        new_path = np.empty_like(path)
        for d in range(path.shape[1]):
            new_path[:, d] = np.interp(target, s, path[:, d])
        path = new_path
    vals = np.array([landscape.value(p) for p in path])
    return path[int(np.argmax(vals))]


def kramers_prediction(landscape: ScalarLandscape, w_star, w_saddle,
                       T: float) -> tuple[float, float, float]:
    """Expected escape time (2 pi / |lambda_1|) exp((F(ws) - F(w*)) / T).

    The landscape free energy uses the curvature in place of the model Fisher:
    F(w) = L(w) + (T/2) log|det H(w)|. Returns (tau, loss_barrier, lambda_1).
    """
    w_star = np.atleast_1d(np.asarray(w_star, dtype=float))
    w_saddle = np.atleast_1d(np.asarray(w_saddle, dtype=float))
    H_min = landscape.hessian(w_star)
    H_sad = landscape.hessian(w_saddle)
    lam = np.linalg.eigvalsh(H_sad)
    lambda1 = float(lam[0])
    if lambda1 >= 0:
        raise ValueError("saddle point has no negative curvature direction")
    barrier = landscape.value(w_saddle) - landscape.value(w_star)
    fe_diff = barrier + 0.5 * T * (
        float(np.log(np.abs(np.linalg.det(H_sad)))) -
        float(np.log(np.abs(np.linalg.det(H_min))))
    )
    tau = (2.0 * math.pi / abs(lambda1)) * math.exp(fe_diff / T)
    return tau, barrier, lambda1


@dataclass
class EscapeTimeStats:
    """First-exit statistics of isotropic Langevin dynamics from a loss basin."""

    first_exit_steps: np.ndarray
    mean_steps: float
    mean_time: float
    predicted_kramers: float
    temperature: float
    barrier: float
    lambda1: float
    eta: float
    runs: int
    censored: int
    exit_points: np.ndarray


def escape_time_mc(landscape: ScalarLandscape, w_star, basin, T: float, eta: float,
                   runs: int, seed: int, max_steps: int = 50_000_000,
                   saddle=None) -> EscapeTimeStats:
    """Simulate Langevin first exits from a basin and compare to the Kramers law.

    `basin` is either a callable mapping an (R, dim) position array to a boolean
    membership mask, or a (lo, hi) interval for 1-D landscapes. Runs that do not
    exit within `max_steps` are censored (counted, excluded from the mean).
    """
    if not (T > 0 and eta > 0 and runs >= 1):
        raise ValueError("need T > 0, eta > 0, runs >= 1")
    w_star = np.atleast_1d(np.asarray(w_star, dtype=float))
    dim = w_star.size
    if isinstance(basin, tuple) and dim == 1:
        lo, hi = float(basin[0]), float(basin[1])

        def inside(pts):
            return (pts[:, 0] > lo) & (pts[:, 0] < hi)
    else:
        inside = basin

    if saddle is None:
        if isinstance(basin, tuple) and dim == 1:
            # the relevant saddle is the basin edge the walker actually crosses:
            # the boundary with the lower loss
            cand = [np.array([lo]), np.array([hi])]
            saddle = min(cand, key=landscape.value)
        else:
            raise ValueError("pass the saddle explicitly for non-interval basins")
    saddle = np.atleast_1d(np.asarray(saddle, dtype=float))
    predicted, barrier, lambda1 = kramers_prediction(landscape, w_star, saddle, T)

    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0xE5C]))
    pos = np.tile(w_star, (runs, 1))
    active = np.arange(runs)
    exit_steps = np.full(runs, -1, dtype=np.int64)
    exit_points = np.zeros((runs, dim))
    sigma = math.sqrt(2.0 * eta * T)
    step = 0
    while active.size > 0 and step < max_steps:
        step += 1
        g = landscape.gradients(pos[active])
        pos[active] = pos[active] - eta * g + sigma * rng.standard_normal((active.size, dim))
        out = ~inside(pos[active])
        if np.any(out):
            left = active[out]
            exit_steps[left] = step
            exit_points[left] = pos[left]
            active = active[~out]
    exited = exit_steps[exit_steps > 0]
    mean_steps = float(exited.mean()) if exited.size else float("nan")
    return EscapeTimeStats(
        first_exit_steps=exited,
        mean_steps=mean_steps,
        mean_time=mean_steps * eta,
        predicted_kramers=predicted,
        temperature=T,
        barrier=barrier,
        lambda1=lambda1,
        eta=eta,
        runs=runs,
        censored=int(active.size),
        exit_points=exit_points[exit_steps > 0],
    )


def _basin_radius(basin) -> float:
    if isinstance(basin, tuple):
        return float(basin[1] - basin[0])
    return 2.0


# ---------------------------------------------------------------------------
# stability Jacobians
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SampleSwap:
    """Replace sample `index` with (new_x, new_y); the column is Delta w* per swap."""

    index: int
    new_x: np.ndarray
    new_y: float


@dataclass(frozen=True)
class InputShift:
    """Shift coordinate `coord` of sample `index` by +-delta (central differences).

    `index=None` shifts every sample, realizing a scalar dataset-translation
    parameter. For the scalar toy model the shift applies to the observations.
    """

    index: int | None
    coord: int
    delta: float


Perturbation = SampleSwap | InputShift


def _swap_dataset(data: LabeledDataset, pert: SampleSwap) -> LabeledDataset:
    x = data.inputs.copy()
    t = data.targets.copy()
    x[pert.index] = np.asarray(pert.new_x, dtype=float)
    t[pert.index] = float(pert.new_y)
    return LabeledDataset(x, t, data.n_classes)


def _shift_dataset(data: LabeledDataset, pert: InputShift, sign: float,
                   on_targets: bool) -> LabeledDataset:
    if on_targets:
        t = data.targets.copy()
        if pert.index is None:
            t += sign * pert.delta
        else:
            t[pert.index] += sign * pert.delta
        return LabeledDataset(data.inputs, t, data.n_classes)
    x = data.inputs.copy()
    if pert.index is None:
        x[:, pert.coord] += sign * pert.delta
    else:
        x[pert.index, pert.coord] += sign * pert.delta
    return LabeledDataset(x, data.targets, data.n_classes)


def dataset_jacobian(model, data: LabeledDataset, cfg: TrainConfig, w0,
                     scheme: Sequence[Perturbation],
                     convergence_tol: float = 1e-5) -> np.ndarray:
    """Finite-difference sensitivity of the trained endpoint to dataset changes.

    Re-trains with the same config and seed per perturbed dataset; returns a
    (k x len(scheme)) matrix whose columns are Delta w* per unit perturbation.
    `model` may be a ModelSpec (w0 a WeightVector; shifts act on inputs) or a
    ToyModelConfig (w0 a scalar theta; shifts act on the observations).
    Raises StabilityUndefinedError when a base or perturbed run ends with a
    gradient norm above `convergence_tol`.
    """
    toy = isinstance(model, ToyModelConfig)

    def train(d: LabeledDataset) -> np.ndarray:
        if toy:
            theta = _toy_train_single(d, cfg, float(w0), model.c)
            grad = abs(models.toy_loss_grad(theta, d, model.c))
            if grad > convergence_tol:
                raise StabilityUndefinedError(
                    f"toy run gradient norm {grad:.3e} above {convergence_tol:.1e}"
                )
            return np.array([theta])
        trace = sgd_train(model, d, cfg, w0)
        gnorm = float(np.linalg.norm(ndcore.grad_loss(model, trace.final, d).values))
        if gnorm > convergence_tol:
            raise StabilityUndefinedError(
                f"run gradient norm {gnorm:.3e} above {convergence_tol:.1e}"
            )
        return trace.final.values

    base = train(data)
    cols = []
    for pert in scheme:
        if isinstance(pert, SampleSwap):
            moved = train(_swap_dataset(data, pert))
            cols.append(moved - base)
        else:
            plus = train(_shift_dataset(data, pert, +1.0, toy))
            minus = train(_shift_dataset(data, pert, -1.0, toy))
            cols.append((plus - minus) / (2.0 * pert.delta))
    return np.stack(cols, axis=1)


def _toy_train_single(data: LabeledDataset, cfg: TrainConfig, theta0: float,
                      c: float) -> float:
    """Scalar-toy SGD mirroring sgd_train's minibatch protocol."""
    obs = data.targets
    n = obs.size
    rng = np.random.default_rng(np.random.SeedSequence([int(cfg.seed), 0x56D]))
    theta = float(theta0)
    full = cfg.batch_size >= n
    perm = None
    pos = n
    for _ in range(cfg.steps):
        if full:
            xb = obs.mean()
        else:
            if pos + cfg.batch_size > n:
                perm = rng.permutation(n)
                pos = 0
            xb = obs[perm[pos : pos + cfg.batch_size]].mean()
            pos += cfg.batch_size
        val, dval = models.toy_phi(theta, c)
        theta += 2.0 * cfg.step_size * (xb - val) * dval
        if not np.isfinite(theta):
            raise DivergenceError(-1, "toy training diverged")
    return theta


# ---------------------------------------------------------------------------
# toy-model information pipeline
# ---------------------------------------------------------------------------

# Floor on the closed-form per-dataset Fisher when forming the Cramer-Rao
# post-distribution: keeps the mixture proper at zero-slope (clamped) minima.
TOY_FISHER_FLOOR = 1.0

# lambda^2 search grid for the best proper Gaussian pre-distribution. The grid
# spans narrow informative pres; the expected IW is monotone in lambda^2 here,
# and a narrow pre is what makes the Gaussian IW orders of magnitude larger
# than the Shannon MI.
TOY_LAMBDA2_GRID = (1e-3, 3e-3, 1e-2, 3e-2, 1e-1)

# beta for the Gaussian IW: Sigma* = (beta/2) F^-1 matches the Cramer-Rao
# post-distribution variance F^-1 at beta = 2.
TOY_BETA_IW = 2.0


@dataclass
class ToyBatchResult:
    batch_size: int
    shannon_mi_nats: float
    gaussian_iw_nats: float
    gaussian_iw_lambda2: float
    sf_approx_nats: float
    sf_raw_nats: float
    sf_clamped: bool
    mean_abs_theta: float
    flat_fraction: float
    mean_fisher: float
    fisher_ci_lo: float
    fisher_ci_hi: float
    theta_stars: np.ndarray
    fishers: np.ndarray


@dataclass
class ToyReport:
    results: list[ToyBatchResult]
    n_datasets: int
    runs_per: int
    step_size: float
    steps: int
    c: float
    n_samples: int
    lambda2_grid: tuple[float, ...]
    beta_iw: float
    flat_threshold: float
    mi_mc_samples: int
    entropy_d: float
    seed: int

    def batch_sizes(self) -> list[int]:
        return [r.batch_size for r in self.results]

    def marginal_histogram(self, bins: int = 80, lim: float | None = None):
        """Pooled end-point histograms per batch size: (edges, {B: counts})."""
        if lim is None:
            lim = max(float(np.abs(r.theta_stars).max()) for r in self.results)
        edges = np.linspace(-lim, lim, bins + 1)
        counts = {r.batch_size: np.histogram(r.theta_stars, bins=edges)[0]
                  for r in self.results}
        return edges, counts


def toy_polish(theta: float, xbar: float, c: float) -> float:
    """Exact minimizer of the toy loss inside theta's basin.

    Solves phi(theta*) = xbar by bisection between neighbouring zero-slope
    points; when |xbar| > 1 the minimizer is the basin edge with phi = sign(xbar).
    """
    bounds = models.toy_basin_boundaries(c, n=40)
    all_b = np.concatenate([-bounds[::-1], bounds])
    i = int(np.searchsorted(all_b, theta))
    lo = all_b[i - 1] if i > 0 else -bounds[-1] * 10
    hi = all_b[i] if i < all_b.size else bounds[-1] * 10
    flo, _ = models.toy_phi(lo, c)
    fhi, _ = models.toy_phi(hi, c)
    target = float(xbar)
    if target <= min(flo, fhi):
        return float(lo if flo < fhi else hi)
    if target >= max(flo, fhi):
        return float(lo if flo > fhi else hi)
    a, b = lo, hi
    fa = flo
    for _ in range(200):
        mid = 0.5 * (a + b)
        fm, _ = models.toy_phi(mid, c)
        if (fm - target) * (fa - target) <= 0:
            b = mid
        else:
            a, fa = mid, fm
        if b - a < 1e-13 * max(1.0, abs(a)):
            break
    return float(0.5 * (a + b))


def _toy_cohort_endpoints(obs: np.ndarray, theta0: np.ndarray, eta: float,
                          batch_size: int, steps: int, perm_seeds: list,
                          c: float) -> np.ndarray:
    """Vectorized SGD over a cohort of datasets (rows of `obs`), same step count.

    Batch index streams are drawn per dataset from `perm_seeds`, so a shifted
    copy of a cohort re-uses exactly the same minibatch sequence.
    """
    m, n = obs.shape
    theta = theta0.copy()
    if batch_size >= n:
        for _ in range(steps):
            xb = obs.mean(axis=1)
            val = np.sin(c * np.arcsinh(theta))
            dval = c * np.cos(c * np.arcsinh(theta)) / np.sqrt(1.0 + theta * theta)
            theta = theta + 2.0 * eta * (xb - val) * dval
        return theta
    rngs = [np.random.default_rng(s) for s in perm_seeds]
    steps_done = 0
    per_epoch = n // batch_size
    while steps_done < steps:
        perms = np.stack([r.permutation(n) for r in rngs])
        for p in range(per_epoch):
            if steps_done >= steps:
                break
            idx = perms[:, p * batch_size : (p + 1) * batch_size]
            xb = np.take_along_axis(obs, idx, axis=1).mean(axis=1)
            u = np.arcsinh(theta)
            val = np.sin(c * u)
            dval = c * np.cos(c * u) / np.sqrt(1.0 + theta * theta)
            theta = theta + 2.0 * eta * (xb - val) * dval
            steps_done += 1
    return theta


def _toy_shannon_mi(theta_stars: np.ndarray, variances: np.ndarray,
                    mc_samples: int, seed: int) -> float:
    """E_D[KL(Q_d || mixture)] for scalar Gaussian components (vectorized)."""
    m = theta_stars.size
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x707A]))
    sd = np.sqrt(variances)
    log_norm = -0.5 * np.log(2.0 * np.pi * variances)
    total = 0.0
    for d in range(m):
        x = theta_stars[d] + sd[d] * rng.standard_normal(mc_samples)
        # component log-densities at the samples: (m, S)
        z = (x[None, :] - theta_stars[:, None]) / sd[:, None]
        comp = log_norm[:, None] - 0.5 * z * z
        mix = _logsumexp_rows(comp) - math.log(m)
        total += float(np.mean(comp[d] - mix))
    return total / m


def _logsumexp_rows(a: np.ndarray) -> np.ndarray:
    mx = a.max(axis=0)
    return mx + np.log(np.exp(a - mx).sum(axis=0))


def _toy_gaussian_iw(theta_stars: np.ndarray, fishers: np.ndarray, beta: float,
                     lambda2_grid) -> tuple[float, float]:
    """Expected Eq.-7 information over end points, minimized over the lambda^2 grid."""
    best_val, best_l2 = math.inf, float("nan")
    for l2 in lambda2_grid:
        shift = beta / (2.0 * l2)
        M = fishers + shift
        sigma_star = (beta / 2.0) / M
        iw = (0.5 * np.log(M) + 0.5 * math.log(2.0 * l2 / beta) - 0.5
              + (theta_stars**2 + sigma_star) / (2.0 * l2))
        mean_iw = float(np.mean(iw))
        if mean_iw < best_val:
            best_val, best_l2 = mean_iw, float(l2)
    return best_val, best_l2


def toy_pipeline(cfg: ToyModelConfig, batch_sizes: Sequence[int], datasets: int,
                 runs_per: int, t_config: TrainConfig, seed: int,
                 lambda2_grid=TOY_LAMBDA2_GRID, beta_iw: float = TOY_BETA_IW,
                 flat_threshold: float | None = None,
                 mi_mc_samples: int = infoweights.MIXTURE_KL_SAMPLES,
                 sf_delta: float = 1e-4, compute_sf: bool = True) -> ToyReport:
    """Fig-3 style sweep: marginals, Shannon MI, and Gaussian IW vs batch size.

    For each batch size the same `datasets` sampled tasks are trained
    (`runs_per` runs each, fresh init per run), end points are polished to the
    exact in-basin minimizer, and three quantities are computed: the mixture
    Shannon MI with Cramer-Rao posts N(theta*, F^-1), the expected Gaussian IW
    under the best pre-distribution on the lambda^2 grid, and (optionally) the
    stability-Jacobian MI approximation from finite-difference retraining on
    shifted observations.
    """
    if datasets < 2:
        raise ValueError("need at least 2 datasets for mixture MI")
    if runs_per < 1:
        raise ValueError("runs_per must be >= 1")
    batch_sizes = [int(b) for b in batch_sizes]
    if any(b < 1 or b > cfg.n_samples for b in batch_sizes):
        raise ValueError("batch sizes must lie in [1, N]")
    if flat_threshold is None:
        flat_threshold = float(np.sinh((0.5 + 2.0) * np.pi / cfg.c))

    master = np.random.SeedSequence([int(seed), 0xF163])
    data_seeds, init_seeds, batch_root, mi_root = master.spawn(4)

    obs = np.empty((datasets, cfg.n_samples))
    for d, s in enumerate(data_seeds.spawn(datasets)):
        rng = np.random.default_rng(s)
        mu = rng.uniform(-1.0, 1.0)
        obs[d] = mu + rng.standard_normal(cfg.n_samples)

    n_walkers = datasets * runs_per
    theta0 = np.empty(n_walkers)
    for i, s in enumerate(init_seeds.spawn(n_walkers)):
        theta0[i] = np.random.default_rng(s).uniform(-20.0, 20.0)
    obs_rep = np.repeat(obs, runs_per, axis=0)
    xbar_rep = obs_rep.mean(axis=1)

    entropy_d = models.toy_mean_entropy(cfg.n_samples)
    all_perm_seeds = batch_root.spawn(len(batch_sizes) * n_walkers)
    results = []
    for bi, b in enumerate(batch_sizes):
        perm_seeds = all_perm_seeds[bi * n_walkers : (bi + 1) * n_walkers]
        ends = _toy_cohort_endpoints(obs_rep, theta0, t_config.step_size, b,
                                     t_config.steps, perm_seeds, cfg.c)
        theta_star = np.array([
            toy_polish(t, xb, cfg.c) for t, xb in zip(ends, xbar_rep)
        ])
        fishers = models.toy_fisher(theta_star, cfg.n_samples, cfg.c)
        variances = 1.0 / np.maximum(fishers, TOY_FISHER_FLOOR)
        mi = _toy_shannon_mi(theta_star, variances, mi_mc_samples,
                             seed=int(mi_root.generate_state(1)[0]) + bi)
        iw, iw_l2 = _toy_gaussian_iw(theta_star, fishers, beta_iw, lambda2_grid)

        sf_val, sf_raw, sf_clamped = float("nan"), float("nan"), False
        if compute_sf:
            plus = _toy_cohort_endpoints(obs_rep + sf_delta, theta0,
                                         t_config.step_size, b, t_config.steps,
                                         perm_seeds, cfg.c)
            minus = _toy_cohort_endpoints(obs_rep - sf_delta, theta0,
                                          t_config.step_size, b, t_config.steps,
                                          perm_seeds, cfg.c)
            th_p = np.array([toy_polish(t, xb + sf_delta, cfg.c)
                             for t, xb in zip(plus, xbar_rep)])
            th_m = np.array([toy_polish(t, xb - sf_delta, cfg.c)
                             for t, xb in zip(minus, xbar_rep)])
            jac = (th_p - th_m) / (2.0 * sf_delta)
            approx = infoweights.shannon_fisher_approx(
                entropy_d,
                [np.array([[j]]) for j in jac],
                [np.array([[f]]) for f in fishers],
                beta=1.0,
            )
            sf_val, sf_raw, sf_clamped = approx.nats, approx.raw_nats, approx.clamped

        flat_frac = float(np.mean(np.abs(theta_star) > flat_threshold))
        mean_f = float(fishers.mean())
        sd_f = float(fishers.std(ddof=1)) / math.sqrt(fishers.size)
        results.append(ToyBatchResult(
            batch_size=b,
            shannon_mi_nats=mi,
            gaussian_iw_nats=iw,
            gaussian_iw_lambda2=iw_l2,
            sf_approx_nats=sf_val,
            sf_raw_nats=sf_raw,
            sf_clamped=sf_clamped,
            mean_abs_theta=float(np.abs(theta_star).mean()),
            flat_fraction=flat_frac,
            mean_fisher=mean_f,
            fisher_ci_lo=mean_f - 1.96 * sd_f,
            fisher_ci_hi=mean_f + 1.96 * sd_f,
            theta_stars=theta_star,
            fishers=fishers,
        ))
    return ToyReport(
        results=results,
        n_datasets=datasets,
        runs_per=runs_per,
        step_size=t_config.step_size,
        steps=t_config.steps,
        c=cfg.c,
        n_samples=cfg.n_samples,
        lambda2_grid=tuple(float(x) for x in lambda2_grid),
        beta_iw=float(beta_iw),
        flat_threshold=float(flat_threshold),
        mi_mc_samples=int(mi_mc_samples),
        entropy_d=float(entropy_d),
        seed=int(seed),
    )


# ---------------------------------------------------------------------------
# plane projection of weight trajectories
# ---------------------------------------------------------------------------


@dataclass
class PlaneReport:
    """2-D coordinates of two training paths plus the projected Fisher ellipse."""

    coords_a: np.ndarray
    coords_b: np.ndarray
    basis: np.ndarray
    fisher_2x2: np.ndarray
    ellipse_axes: np.ndarray
    ellipse_vectors: np.ndarray
    endpoint_distance: float


def plane_projection(w0: WeightVector, trace_a: TrainTrace, trace_b: TrainTrace,
                     f_diag: np.ndarray) -> PlaneReport:
    """Project two weight paths onto the plane through (w0, final_a, final_b).

    The basis is Gram-Schmidt on (final_a - w0, final_b - w0); the diagonal
    Fisher is projected as B^T diag(F) B and its inverse ellipse semi-axes are
    1/sqrt(eigenvalues).
    """
    f_diag = as_tensor(f_diag, "f_diag").ravel()
    origin = w0.values
    va = trace_a.final.values - origin
    vb = trace_b.final.values - origin
    if va.shape != vb.shape or va.shape != origin.shape or f_diag.size != origin.size:
        raise ValueError("weight dimensions do not match")
    na = np.linalg.norm(va)
    nb = np.linalg.norm(vb)
    if na == 0 or nb == 0:
        raise DegeneratePlaneError("a final point coincides with the origin")
    u1 = va / na
    resid = vb - (vb @ u1) * u1
    nr = np.linalg.norm(resid)
    angle = math.atan2(nr, abs(float(vb @ u1)))
    if angle < 1e-6:
        raise DegeneratePlaneError(
            f"spanning vectors are collinear (angle {angle:.2e} rad)"
        )
    u2 = resid / nr
    basis = np.stack([u1, u2], axis=1)

    def project(trace: TrainTrace) -> np.ndarray:
        pts = np.stack([w.values - origin for _, w in trace.snapshots])
        return pts @ basis

    fisher_2x2 = basis.T @ (f_diag[:, None] * basis)
    fisher_2x2 = 0.5 * (fisher_2x2 + fisher_2x2.T)
    evals, evecs = np.linalg.eigh(fisher_2x2)
    axes = 1.0 / np.sqrt(np.maximum(evals, 1e-300))
    return PlaneReport(
        coords_a=project(trace_a),
        coords_b=project(trace_b),
        basis=basis,
        fisher_2x2=fisher_2x2,
        ellipse_axes=axes,
        ellipse_vectors=evecs,
        endpoint_distance=float(np.linalg.norm(trace_a.final.values - trace_b.final.values)),
    )
