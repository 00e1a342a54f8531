"""Model specifications, synthetic datasets, and the redundant-parametrization toy regressor."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import integrate, stats

from .ndcore import WeightVector, as_tensor

ACTIVATIONS = ("tanh", "relu")
HEADS = ("softmax-xent", "squared-error")


@dataclass(frozen=True)
class ModelSpec:
    """Fully-connected network: layer_sizes includes input and output dims."""

    layer_sizes: tuple[int, ...]
    activation: str = "tanh"
    head: str = "softmax-xent"

    def __post_init__(self):
        sizes = tuple(int(s) for s in self.layer_sizes)
        object.__setattr__(self, "layer_sizes", sizes)
        if len(sizes) < 2 or any(s <= 0 for s in sizes):
            raise ValueError(f"layer_sizes must be >= 2 positive ints, got {sizes}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"activation must be one of {ACTIVATIONS}")
        if self.head not in HEADS:
            raise ValueError(f"head must be one of {HEADS}")
        if self.head == "squared-error" and sizes[-1] != 1:
            raise ValueError("squared-error head requires a single output unit")

    @property
    def n_params(self) -> int:
        sizes = self.layer_sizes
        return sum(sizes[i] * sizes[i + 1] + sizes[i + 1] for i in range(len(sizes) - 1))

    @property
    def n_classes(self) -> int | None:
        return self.layer_sizes[-1] if self.head == "softmax-xent" else None

    def layout(self) -> tuple[tuple[str, tuple[int, ...]], ...]:
        sizes = self.layer_sizes
        entries = []
        for i in range(len(sizes) - 1):
            entries.append((f"W{i}", (sizes[i], sizes[i + 1])))
            entries.append((f"b{i}", (sizes[i + 1],)))
        return tuple(entries)


@dataclass(frozen=True)
class LabeledDataset:
    """N samples: inputs (N, d) and either integer class labels or real targets."""

    inputs: np.ndarray
    targets: np.ndarray
    n_classes: int | None = None

    def __post_init__(self):
        x = as_tensor(self.inputs, "inputs")
        if x.ndim != 2:
            raise ValueError("inputs must be a 2-D (N, d) matrix")
        t = as_tensor(self.targets, "targets").ravel()
        if x.shape[0] != t.size or t.size < 1:
            raise ValueError("inputs and targets must share N >= 1 samples")
        if self.n_classes is not None:
            c = int(self.n_classes)
            if c < 2:
                raise ValueError("n_classes must be >= 2")
            labels = t.astype(int)
            if np.any(labels != t) or labels.min() < 0 or labels.max() >= c:
                raise ValueError(f"labels must be integers in [0, {c})")
            object.__setattr__(self, "n_classes", c)
        object.__setattr__(self, "inputs", x)
        object.__setattr__(self, "targets", t)

    @property
    def n(self) -> int:
        return self.inputs.shape[0]

    @property
    def dim(self) -> int:
        return self.inputs.shape[1]

    def subset(self, idx) -> "LabeledDataset":
        return LabeledDataset(self.inputs[idx], self.targets[idx], self.n_classes)


def init_weights(model: ModelSpec, seed: int) -> WeightVector:
    """He-style init: weights ~ N(0, 2/fan_in), zero biases, deterministic per seed."""
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x57E1]))
    parts = []
    sizes = model.layer_sizes
    for i in range(len(sizes) - 1):
        fan_in = sizes[i]
        parts.append(rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_in, sizes[i + 1])).ravel())
        parts.append(np.zeros(sizes[i + 1]))
    return WeightVector(np.concatenate(parts), model.layout())


# ---------------------------------------------------------------------------
# dataset generators
# ---------------------------------------------------------------------------

TWO_MOONS_NOISE = 0.1
BLOB_STD = 0.5
BLOB_CENTER_SCALE = 2.0


def make_dataset_2d_binary(n: int, seed: int) -> LabeledDataset:
    """Two interleaved 2-D moons with labels {0, 1}; needs a nonlinear boundary."""
    if n < 2:
        raise ValueError("need n >= 2 samples")
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x2D]))
    n0 = n // 2
    n1 = n - n0
    t0 = rng.uniform(0.0, np.pi, size=n0)
    t1 = rng.uniform(0.0, np.pi, size=n1)
    outer = np.stack([np.cos(t0), np.sin(t0)], axis=1)
    inner = np.stack([1.0 - np.cos(t1), 0.5 - np.sin(t1)], axis=1)
    x = np.concatenate([outer, inner], axis=0)
    x += rng.normal(0.0, TWO_MOONS_NOISE, size=x.shape)
    y = np.concatenate([np.zeros(n0), np.ones(n1)])
    perm = rng.permutation(n)
    return LabeledDataset(x[perm], y[perm], n_classes=2)


def _blob_centers(k: int, d: int, seed: int) -> np.ndarray:
    """k centers on a rotated, scaled orthogonal frame; independent of k up to prefix."""
    if d < 2 or k < 2:
        raise ValueError("need k >= 2 and d >= 2")
    if k > d:
        raise ValueError(f"blob construction requires k <= d (got k={k}, d={d})")
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0xB10B]))
    # Random orthogonal matrix from QR; fixed by (seed, d) so class j's center
    # does not depend on how many classes are requested.
    a = rng.normal(size=(d, d))
    q, r = np.linalg.qr(a)
    q *= np.sign(np.diag(r))
    return BLOB_CENTER_SCALE * np.sqrt(2.0) * q[:k, :]


def make_dataset_kclass(n: int, k: int, d: int, seed: int) -> LabeledDataset:
    """k Gaussian blobs in d dims; the first k' classes form a prefix subset task."""
    if k < 2 or d < 2:
        raise ValueError("need k >= 2 and d >= 2")
    if n < k:
        raise ValueError("need at least one sample per class")
    centers = _blob_centers(k, d, seed)
    per = n // k
    counts = [per + (1 if j < n - per * k else 0) for j in range(k)]
    ss = np.random.SeedSequence([int(seed), 0xC1A55])
    class_seeds = ss.spawn(k)
    xs, ys = [], []
    for j in range(k):
        rng = np.random.default_rng(class_seeds[j])
        xs.append(centers[j] + rng.normal(0.0, BLOB_STD, size=(counts[j], d)))
        ys.append(np.full(counts[j], j, dtype=float))
    return LabeledDataset(np.concatenate(xs), np.concatenate(ys), n_classes=k)


# ---------------------------------------------------------------------------
# toy mean-regression model with redundant parametrization
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ToyModelConfig:
    """Scalar datasets x_i ~ N(mu, 1) with mu ~ Unif[-1, 1]; phi frequency c."""

    n_samples: int = 100
    c: float = 6.0

    def __post_init__(self):
        if self.n_samples < 1:
            raise ValueError("n_samples must be >= 1")
        if not self.c > 0:
            raise ValueError("phi frequency c must be positive")


def make_toy_dataset(cfg: ToyModelConfig, seed: int) -> tuple[float, LabeledDataset]:
    """Sample mu ~ Unif[-1, 1] and N observations x_i ~ N(mu, 1)."""
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x70D]))
    mu = float(rng.uniform(-1.0, 1.0))
    obs = mu + rng.standard_normal(cfg.n_samples)
    inputs = np.zeros((cfg.n_samples, 1))
    return mu, LabeledDataset(inputs, obs)


def toy_phi(theta, c: float = 6.0):
    """Redundant parametrization phi(theta) = sin(c * asinh(theta)).

    Returns (value, derivative). Range is [-1, 1], phi is odd, every target in
    (-1, 1) is reached by infinitely many theta, and |phi'| decays like
    1/sqrt(1 + theta^2) so outer minima of the induced loss are flatter.
    """
    if not c > 0:
        raise ValueError("c must be positive")
    th = np.asarray(theta, dtype=np.float64)
    u = np.arcsinh(th)
    val = np.sin(c * u)
    deriv = c * np.cos(c * u) / np.sqrt(1.0 + th * th)
    if np.isscalar(theta) or th.ndim == 0:
        return float(val), float(deriv)
    return val, deriv


def toy_loss(theta: float, data: LabeledDataset, c: float = 6.0) -> float:
    """Mean squared deviation between the observations and phi(theta)."""
    val, _ = toy_phi(theta, c)
    resid = data.targets - val
    return float(np.mean(resid * resid))


def toy_loss_grad(theta: float, data: LabeledDataset, c: float = 6.0) -> float:
    val, dval = toy_phi(theta, c)
    return float(-2.0 * np.mean(data.targets - val) * dval)


def toy_fisher(theta, n_samples: int, c: float = 6.0):
    """Closed-form Fisher of the toy model, dataset-total convention: 2 N phi'(theta)^2.

    The mean squared loss is read as the Gaussian negative log-likelihood
    N(phi(theta), 1/2) per sample, which gives per-sample Fisher 2 phi'^2 and
    per-dataset Fisher 2 N phi'^2.
    """
    _, deriv = toy_phi(theta, c)
    return 2.0 * n_samples * np.square(deriv)


def toy_basin_boundaries(c: float = 6.0, n: int = 12) -> np.ndarray:
    """Positive loss-basin boundaries: |phi| = 1 at theta = sinh((pi/2 + j pi)/c)."""
    j = np.arange(n)
    return np.sinh((np.pi / 2 + j * np.pi) / c)


def toy_mean_entropy(n_samples: int) -> float:
    """Differential entropy (nats) of the dataset mean x_bar = mu + N(0, 1/N)."""
    s = 1.0 / np.sqrt(n_samples)

    def density(m):
        return 0.5 * (stats.norm.cdf((m + 1.0) / s) - stats.norm.cdf((m - 1.0) / s))

    lo, hi = -1.0 - 8.0 * s, 1.0 + 8.0 * s
    val, _ = integrate.quad(
        lambda m: -density(m) * np.log(max(density(m), 1e-300)), lo, hi, limit=200
    )
    return float(val)


# ---------------------------------------------------------------------------
# CSV round-trip for datasets
# ---------------------------------------------------------------------------


def dataset_to_csv(data: LabeledDataset, path) -> None:
    """Write features then a `label` column; floats use shortest round-trip form."""
    path = Path(path)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([f"f{i}" for i in range(data.dim)] + ["label"])
        for row, t in zip(data.inputs, data.targets):
            writer.writerow([repr(float(v)) for v in row] + [repr(float(t))])


def dataset_from_csv(path, n_classes: int | None = None) -> LabeledDataset:
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if not header or header[-1] != "label":
            raise ValueError("expected a header ending in 'label'")
        d = len(header) - 1
        feats, labels = [], []
        for row in reader:
            feats.append([float(v) for v in row[:d]])
            labels.append(float(row[d]))
    inputs = np.array(feats, dtype=np.float64).reshape(len(labels), d)
    return LabeledDataset(inputs, np.array(labels), n_classes=n_classes)
