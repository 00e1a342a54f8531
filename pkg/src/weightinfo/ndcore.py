"""Dense float64 array core: MLP forward/backward passes and finite-difference probes.

Everything here is a pure function of its inputs. Models are fully-connected
nets (tanh or relu) with either a softmax cross-entropy head or a scalar
squared-error head; gradients are computed by layer-wise reverse mode,
vectorized over samples with a fixed summation order so results do not depend
on batch chunking.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

# Full k x k matrices (Hessian, Fisher) are only materialized below this
# parameter count; larger models must use trace/diagonal estimators.
DENSE_PARAM_CAP = 2000

# Central-difference step: h_i = FD_STEP_SCALE * max(1, |w_i|).
FD_STEP_SCALE = 1e-5

# Squared-error losses are read as the negative log-likelihood of a Gaussian
# observation model with this variance, so that per-sample Fisher = 2 * df df^T.
GAUSSIAN_HEAD_VARIANCE = 0.5


class CapacityError(RuntimeError):
    """Requested a dense k x k object for a model over the parameter cap."""


def as_tensor(x, name: str = "tensor") -> np.ndarray:
    """Coerce to a float64 ndarray and reject non-finite entries."""
    arr = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains NaN or Inf entries")
    return arr


@dataclass(frozen=True)
class WeightVector:
    """Flat parameter vector plus the layout mapping segments to layer shapes.

    ``layout`` is an ordered tuple of (name, shape) pairs; segment sizes must
    sum to ``len(values)``.
    """

    values: np.ndarray
    layout: tuple[tuple[str, tuple[int, ...]], ...]

    def __post_init__(self):
        vals = as_tensor(self.values, "weights").ravel()
        object.__setattr__(self, "values", vals)
        layout = tuple((str(n), tuple(int(d) for d in s)) for n, s in self.layout)
        object.__setattr__(self, "layout", layout)
        total = sum(int(np.prod(s)) for _, s in layout)
        if total != vals.size or vals.size == 0:
            raise ValueError(
                f"layout covers {total} parameters but values has {vals.size}"
            )

    @property
    def dim(self) -> int:
        return self.values.size

    def segments(self) -> dict[str, np.ndarray]:
        """Views of the flat vector reshaped per layout entry."""
        out = {}
        pos = 0
        for name, shape in self.layout:
            size = int(np.prod(shape))
            out[name] = self.values[pos : pos + size].reshape(shape)
            pos += size
        return out

    def with_values(self, values: np.ndarray) -> "WeightVector":
        return WeightVector(values=values, layout=self.layout)


def flatten_segments(arrays: Iterable[np.ndarray]) -> np.ndarray:
    return np.concatenate([np.asarray(a, dtype=np.float64).ravel() for a in arrays])


# ---------------------------------------------------------------------------
# forward / backward for the supported model family
# ---------------------------------------------------------------------------


def _unpack(model, w: WeightVector) -> list[tuple[np.ndarray, np.ndarray]]:
    """Split a flat weight vector into per-layer (W, b) pairs."""
    sizes = model.layer_sizes
    segs = w.segments()
    pairs = []
    for i in range(len(sizes) - 1):
        pairs.append((segs[f"W{i}"], segs[f"b{i}"]))
    return pairs


def _check_input(model, x: np.ndarray) -> np.ndarray:
    x = as_tensor(x, "input")
    single = x.ndim == 1
    if single:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != model.layer_sizes[0]:
        raise ValueError(
            f"input shape {x.shape} incompatible with model input dim "
            f"{model.layer_sizes[0]}"
        )
    return x if not single else x  # caller handles squeeze via flag


def _forward_cache(model, w: WeightVector, x: np.ndarray):
    """Forward pass keeping post-activations of every layer.

    Returns (activations, logits): ``activations[0]`` is the input batch,
    ``activations[i]`` the post-activation output of layer i (1-based), and
    ``logits`` the raw output of the last layer (no head applied).
    """
    pairs = _unpack(model, w)
    acts = [x]
    h = x
    for i, (W, b) in enumerate(pairs):
        z = h @ W + b
        if i < len(pairs) - 1:
            h = np.tanh(z) if model.activation == "tanh" else np.maximum(z, 0.0)
        else:
            h = z
        acts.append(h)
    return acts, acts[-1]


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def forward(model, w: WeightVector, x) -> np.ndarray:
    """Model outputs: class probabilities for classifiers, reals for regressors."""
    x = as_tensor(x, "input")
    single = x.ndim == 1
    xb = x[None, :] if single else x
    if xb.ndim != 2 or xb.shape[1] != model.layer_sizes[0]:
        raise ValueError(
            f"input shape {x.shape} incompatible with model input dim "
            f"{model.layer_sizes[0]}"
        )
    _, logits = _forward_cache(model, w, xb)
    if model.head == "softmax-xent":
        out = softmax(logits)
    else:
        out = logits[:, 0]
    return out[0] if single else out


def _backprop_to_weights(model, w, acts, dlogits) -> np.ndarray:
    """Reverse pass from output-layer seeds to a summed flat weight gradient.

    ``dlogits`` has shape (N, out); the result sums contributions over the
    batch in index order.
    """
    pairs = _unpack(model, w)
    grads_W = [None] * len(pairs)
    grads_b = [None] * len(pairs)
    delta = dlogits
    for i in range(len(pairs) - 1, -1, -1):
        W, _ = pairs[i]
        h_prev = acts[i]
        grads_W[i] = h_prev.T @ delta
        grads_b[i] = delta.sum(axis=0)
        if i > 0:
            delta = delta @ W.T
            h = acts[i]
            if model.activation == "tanh":
                delta = delta * (1.0 - h * h)
            else:
                delta = delta * (h > 0.0)
    flat = []
    for gW, gb in zip(grads_W, grads_b):
        flat.append(gW.ravel())
        flat.append(gb.ravel())
    return np.concatenate(flat)


def _per_sample_weight_grads(model, w, acts, dlogits) -> np.ndarray:
    """Per-sample flat weight gradients, shape (N, k)."""
    pairs = _unpack(model, w)
    n = dlogits.shape[0]
    parts_W = [None] * len(pairs)
    parts_b = [None] * len(pairs)
    delta = dlogits
    for i in range(len(pairs) - 1, -1, -1):
        W, _ = pairs[i]
        h_prev = acts[i]
        parts_W[i] = np.einsum("si,sj->sij", h_prev, delta).reshape(n, -1)
        parts_b[i] = delta
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
    return np.concatenate(flat, axis=1)


def loss(model, w: WeightVector, data) -> float:
    """Mean cross-entropy (classifier) or mean squared error (regressor)."""
    if data.n == 0:
        raise ValueError("dataset is empty")
    _, logits = _forward_cache(model, w, data.inputs)
    if model.head == "softmax-xent":
        logp = log_softmax(logits)
        picked = logp[np.arange(data.n), data.targets.astype(int)]
        return float(-picked.mean())
    resid = logits[:, 0] - data.targets
    return float(np.mean(resid * resid))


def accuracy(model, w: WeightVector, data) -> float:
    if model.head != "softmax-xent":
        raise ValueError("accuracy is only defined for classifier heads")
    probs = forward(model, w, data.inputs)
    return float(np.mean(probs.argmax(axis=1) == data.targets.astype(int)))


def mean_confidence(model, w: WeightVector, data) -> float:
    """Mean predicted probability of the true class."""
    probs = forward(model, w, data.inputs)
    return float(probs[np.arange(data.n), data.targets.astype(int)].mean())


def grad_loss(model, w: WeightVector, data) -> WeightVector:
    """Gradient of the mean training loss with respect to the weights."""
    if data.n == 0:
        raise ValueError("dataset is empty")
    acts, logits = _forward_cache(model, w, data.inputs)
    n = data.n
    if model.head == "softmax-xent":
        probs = softmax(logits)
        seed = probs.copy()
        seed[np.arange(n), data.targets.astype(int)] -= 1.0
        seed /= n
    else:
        seed = (2.0 / n) * (logits[:, 0] - data.targets)[:, None]
    flat = _backprop_to_weights(model, w, acts, seed)
    return w.with_values(flat)


def per_sample_loglik_grad(model, w: WeightVector, x, y) -> WeightVector:
    """Gradient of log p_w(y | x) for one sample.

    Classifiers use the softmax likelihood; regressors use the Gaussian
    observation model N(f_w(x), GAUSSIAN_HEAD_VARIANCE).
    """
    x = as_tensor(x, "input")
    if x.ndim != 1:
        raise ValueError("per_sample_loglik_grad expects a single input vector")
    xb = x[None, :]
    acts, logits = _forward_cache(model, w, xb)
    if model.head == "softmax-xent":
        c = model.layer_sizes[-1]
        yi = int(y)
        if yi < 0 or yi >= c or float(y) != yi:
            raise ValueError(f"label {y!r} is not a class index in [0, {c})")
        probs = softmax(logits)
        seed = -probs
        seed[0, yi] += 1.0
    else:
        seed = np.array([[(float(y) - logits[0, 0]) / GAUSSIAN_HEAD_VARIANCE]])
    flat = _backprop_to_weights(model, w, acts, seed)
    return w.with_values(flat)


def score_grads_all_classes(model, w: WeightVector, inputs) -> tuple[np.ndarray, np.ndarray]:
    """Per-sample, per-class score gradients for a classifier.

    Returns (probs, grads) with probs of shape (N, C) and grads of shape
    (N, C, k): grads[s, c] = grad_w log p_w(c | x_s).
    """
    if model.head != "softmax-xent":
        raise ValueError("score_grads_all_classes requires a classifier head")
    x = as_tensor(inputs, "inputs")
    if x.ndim == 1:
        x = x[None, :]
    acts, logits = _forward_cache(model, w, x)
    n, c = logits.shape
    probs = softmax(logits)
    grads = np.empty((n, c, w.dim))
    for cls in range(c):
        seed = -probs.copy()
        seed[:, cls] += 1.0
        grads[:, cls, :] = _per_sample_weight_grads(model, w, acts, seed)
    return probs, grads


def output_grads(model, w: WeightVector, inputs) -> np.ndarray:
    """Per-sample gradients of the scalar regression output, shape (N, k)."""
    if model.head != "squared-error":
        raise ValueError("output_grads requires a regressor head")
    x = as_tensor(inputs, "inputs")
    if x.ndim == 1:
        x = x[None, :]
    acts, logits = _forward_cache(model, w, x)
    seed = np.ones((x.shape[0], 1))
    return _per_sample_weight_grads(model, w, acts, seed)


# ---------------------------------------------------------------------------
# finite-difference probes
# ---------------------------------------------------------------------------


def fd_steps(w: np.ndarray) -> np.ndarray:
    return FD_STEP_SCALE * np.maximum(1.0, np.abs(w))


def fd_gradient(f: Callable[[np.ndarray], float], w0) -> np.ndarray:
    """Central-difference gradient of a scalar function of a flat vector."""
    w0 = as_tensor(w0, "w0").ravel()
    h = fd_steps(w0)
    g = np.empty_like(w0)
    for i in range(w0.size):
        wp = w0.copy()
        wm = w0.copy()
        wp[i] += h[i]
        wm[i] -= h[i]
        g[i] = (f(wp) - f(wm)) / (2.0 * h[i])
    return g


def fd_hessian_of_grad(grad_fn: Callable[[np.ndarray], np.ndarray], w0) -> np.ndarray:
    """Symmetrized central-difference Jacobian of a gradient function."""
    w0 = as_tensor(w0, "w0").ravel()
    k = w0.size
    if k > DENSE_PARAM_CAP:
        raise CapacityError(
            f"dense Hessian needs k <= {DENSE_PARAM_CAP} (got {k}); "
            "use trace/diagonal Fisher estimators instead"
        )
    h = fd_steps(w0)
    H = np.empty((k, k))
    for i in range(k):
        wp = w0.copy()
        wm = w0.copy()
        wp[i] += h[i]
        wm[i] -= h[i]
        H[:, i] = (grad_fn(wp) - grad_fn(wm)) / (2.0 * h[i])
    return 0.5 * (H + H.T)


def hessian_fd(model, w: WeightVector, data) -> np.ndarray:
    """Dense loss Hessian by central differences of the exact gradient."""
    if w.dim > DENSE_PARAM_CAP:
        raise CapacityError(
            f"dense Hessian needs k <= {DENSE_PARAM_CAP} (got {w.dim}); "
            "use trace/diagonal Fisher estimators instead"
        )

    def grad_at(vals: np.ndarray) -> np.ndarray:
        return grad_loss(model, w.with_values(vals), data).values

    return fd_hessian_of_grad(grad_at, w.values)
