"""Fisher Information estimators and the Hessian-Fisher decomposition check.

The Fisher is always taken with labels sampled from the model,
F = (1/N) sum_x sum_y p_w(y|x) g g^T with g = grad_w log p_w(y|x), so it
depends on the inputs only. Class expectations are summed exactly whenever the
class count is small (the default for every desk-scale experiment); otherwise
labels are Monte-Carlo sampled.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import ndcore
from .ndcore import CapacityError, DENSE_PARAM_CAP, WeightVector, as_tensor

# Exact class-sum expectation is used whenever C <= this; MC sampling beyond.
EXACT_CLASS_SUM_MAX = 32

# Relative damping floor for log-determinants of rank-deficient Fisher matrices.
DAMPING_RELATIVE = 1e-8

FORMS = ("full", "diagonal", "trace")
METHODS = ("exact-expectation", "mc-sampled")


@dataclass
class FisherEstimate:
    """Fisher matrix (or diagonal/trace summary) with estimation metadata."""

    form: str
    values: np.ndarray | float
    method: str
    mc_samples: int = 0
    damping: float = 0.0

    def __post_init__(self):
        if self.form not in FORMS:
            raise ValueError(f"form must be one of {FORMS}")
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}")
        if self.form == "trace":
            self.values = float(self.values)
        else:
            self.values = as_tensor(self.values, "fisher values")

    @property
    def k(self) -> int:
        if self.form == "full":
            return self.values.shape[0]
        if self.form == "diagonal":
            return self.values.size
        return 0

    @property
    def trace(self) -> float:
        if self.form == "full":
            return float(np.trace(self.values))
        if self.form == "diagonal":
            return float(self.values.sum())
        return float(self.values)

    def matrix(self) -> np.ndarray:
        if self.form != "full":
            raise ValueError(f"{self.form!r} estimate has no full matrix")
        return self.values

    def to_json(self) -> str:
        vals = self.values
        payload = {
            "form": self.form,
            "k": self.k,
            "method": self.method,
            "mc_samples": int(self.mc_samples),
            "damping": float(self.damping),
            "values": [float(v) for v in np.atleast_1d(vals).ravel()],
        }
        return json.dumps(payload, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "FisherEstimate":
        obj = json.loads(text)
        vals = np.array(obj["values"], dtype=np.float64)
        if obj["form"] == "full":
            vals = vals.reshape(obj["k"], obj["k"])
        elif obj["form"] == "trace":
            vals = float(vals[0])
        return cls(
            form=obj["form"],
            values=vals,
            method=obj["method"],
            mc_samples=int(obj["mc_samples"]),
            damping=float(obj["damping"]),
        )


def default_damping(F: FisherEstimate | np.ndarray) -> float:
    """Relative damping floor: 1e-8 * mean diagonal scale of F."""
    if isinstance(F, FisherEstimate):
        k = max(F.k, 1)
        tr = F.trace
    else:
        arr = np.asarray(F)
        k = arr.shape[0]
        tr = float(np.trace(arr))
    return DAMPING_RELATIVE * max(tr / k, 1e-300)


def _check_cap(k: int) -> None:
    if k > DENSE_PARAM_CAP:
        raise CapacityError(
            f"full Fisher needs k <= {DENSE_PARAM_CAP} (got {k}); "
            "use fisher_trace_diag instead"
        )


def _as_inputs(inputs) -> np.ndarray:
    x = as_tensor(inputs, "inputs")
    return x[None, :] if x.ndim == 1 else x


def fisher_exact(model, w: WeightVector, inputs) -> FisherEstimate:
    """Dense Fisher with the class expectation summed exactly.

    Regressor heads use the closed-form Gaussian-likelihood Fisher
    (2/N) sum_x df df^T instead of a class sum.
    """
    _check_cap(w.dim)
    x = _as_inputs(inputs)
    n = x.shape[0]
    if model.head == "squared-error":
        g = ndcore.output_grads(model, w, x)
        F = (2.0 / n) * (g.T @ g)
    else:
        probs, grads = ndcore.score_grads_all_classes(model, w, x)
        weighted = grads * probs[:, :, None]
        flat_g = grads.reshape(-1, w.dim)
        flat_wg = weighted.reshape(-1, w.dim)
        F = (flat_wg.T @ flat_g) / n
    F = 0.5 * (F + F.T)
    return FisherEstimate(form="full", values=F, method="exact-expectation")


def fisher_mc(model, w: WeightVector, inputs, m: int, seed: int) -> FisherEstimate:
    """Monte-Carlo Fisher: draw (x uniform over inputs, y ~ p_w(y|x)) m times."""
    if m < 1:
        raise ValueError("need m >= 1 samples")
    _check_cap(w.dim)
    x = _as_inputs(inputs)
    n = x.shape[0]
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0xF15]))
    idx = rng.integers(0, n, size=m)
    F = np.zeros((w.dim, w.dim))
    if model.head == "squared-error":
        g_all = ndcore.output_grads(model, w, x)
        preds = ndcore.forward(model, w, x)
        for i in idx:
            y = preds[i] + rng.normal(0.0, np.sqrt(ndcore.GAUSSIAN_HEAD_VARIANCE))
            g = (y - preds[i]) / ndcore.GAUSSIAN_HEAD_VARIANCE * g_all[i]
            F += np.outer(g, g)
    else:
        probs, grads = ndcore.score_grads_all_classes(model, w, x)
        for i in idx:
            y = rng.choice(probs.shape[1], p=probs[i])
            g = grads[i, y]
            F += np.outer(g, g)
    F /= m
    F = 0.5 * (F + F.T)
    return FisherEstimate(form="full", values=F, method="mc-sampled", mc_samples=m)


def fisher_trace_diag(model, w: WeightVector, inputs, m: int = 0, seed: int = 0) -> FisherEstimate:
    """Diagonal of the Fisher (any k), via squared per-layer backprop terms.

    Uses exact class sums when C <= EXACT_CLASS_SUM_MAX and m == 0; otherwise
    samples m labels per input from the model.
    """
    x = _as_inputs(inputs)
    n = x.shape[0]
    if model.head == "squared-error":
        acts, _ = ndcore._forward_cache(model, w, x)
        # per-sample Fisher diag = (1/var) * (df/dw)^2; fold 1/sqrt(var) into the seed
        scale = 1.0 / np.sqrt(ndcore.GAUSSIAN_HEAD_VARIANCE)
        diag = _diag_from_seeds(model, w, acts, scale * np.ones((n, 1))) / n
        return FisherEstimate(form="diagonal", values=diag, method="exact-expectation")
    acts, logits = ndcore._forward_cache(model, w, x)
    probs = ndcore.softmax(logits)
    c = probs.shape[1]
    if c <= EXACT_CLASS_SUM_MAX and m == 0:
        diag = np.zeros(w.dim)
        for cls in range(c):
            seed_mat = -probs.copy()
            seed_mat[:, cls] += 1.0
            seed_mat *= np.sqrt(probs[:, cls])[:, None]
            diag += _diag_from_seeds(model, w, acts, seed_mat)
        diag /= n
        return FisherEstimate(form="diagonal", values=diag, method="exact-expectation")
    if m < 1:
        raise ValueError(f"need m >= 1 label samples when C > {EXACT_CLASS_SUM_MAX}")
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0xD1A6]))
    diag = np.zeros(w.dim)
    for _ in range(m):
        ys = _sample_rows(rng, probs)
        seed_mat = -probs.copy()
        seed_mat[np.arange(n), ys] += 1.0
        diag += _diag_from_seeds(model, w, acts, seed_mat)
    diag /= n * m
    return FisherEstimate(form="diagonal", values=diag, method="mc-sampled", mc_samples=m)


def _sample_rows(rng, probs: np.ndarray) -> np.ndarray:
    cdf = np.cumsum(probs, axis=1)
    u = rng.random(probs.shape[0])
    return (u[:, None] > cdf).sum(axis=1)


def _diag_from_seeds(model, w, acts, dlogits) -> np.ndarray:
    """Sum over samples of squared per-sample weight grads, without k^2 storage.

    For layer weights the per-sample gradient is an outer product a d^T, so its
    square sums to (a^2)^T (d^2) via a single matmul.
    """
    pairs = ndcore._unpack(model, w)
    parts_W = [None] * len(pairs)
    parts_b = [None] * len(pairs)
    delta = dlogits
    for i in range(len(pairs) - 1, -1, -1):
        W, _ = pairs[i]
        h_prev = acts[i]
        parts_W[i] = ((h_prev * h_prev).T @ (delta * delta)).ravel()
        parts_b[i] = (delta * delta).sum(axis=0)
        if i > 0:
            delta = delta @ W.T
            h = acts[i]
            if model.activation == "tanh":
                delta = delta * (1.0 - h * h)
            else:
                delta = delta * (h > 0.0)
    flat = []
    for gW, gb in zip(parts_W, parts_b):
        flat.append(gW)
        flat.append(gb)
    return np.concatenate(flat)


def layer_trace_contributions(model, diag: np.ndarray) -> dict[str, float]:
    """Split a diagonal Fisher into per-layout-segment trace contributions."""
    out = {}
    pos = 0
    for name, shape in model.layout():
        size = int(np.prod(shape))
        out[name] = float(diag[pos : pos + size].sum())
        pos += size
    return out


def logdet_damped(F: FisherEstimate, eps: float) -> float:
    """log |F + eps I| via Cholesky of the symmetrized, damped matrix."""
    if F.form != "full":
        raise ValueError("logdet_damped requires a full-form Fisher estimate")
    if not eps > 0:
        raise ValueError("damping eps must be positive")
    M = 0.5 * (F.values + F.values.T) + eps * np.eye(F.k)
    try:
        L = np.linalg.cholesky(M)
    except np.linalg.LinAlgError as exc:
        raise ValueError(
            "damped Fisher is not positive definite; increase eps"
        ) from exc
    F.damping = float(eps)
    return float(2.0 * np.sum(np.log(np.diag(L))))


def hessian_fisher_residual(model, w: WeightVector, data) -> tuple[np.ndarray, float]:
    """H - F and the relative Frobenius residual ||H - F|| / ||H||."""
    H = ndcore.hessian_fd(model, w, data)
    F = fisher_exact(model, w, data.inputs).values
    R = H - F
    denom = float(np.linalg.norm(H))
    rel = float(np.linalg.norm(R)) / denom if denom > 0 else float("inf")
    return R, rel
