"""Complexity, Information in the Weights, PAC-Bayes bounds, and MI approximations.

All quantities are in nats. The pre- and post-distributions are Gaussian
encodings (isotropic, diagonal, or full covariance); they are coding choices,
not Bayesian priors/posteriors.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.special import logsumexp

from . import ndcore, fisher as fisher_mod
from .ndcore import WeightVector, as_tensor

LOG_2PI = math.log(2.0 * math.pi)

# MC budget for KL-against-mixture estimates (per mixture component).
MIXTURE_KL_SAMPLES = 10_000

# Default pre-distribution variance; override per experiment.
DEFAULT_LAMBDA2 = 10.0

COV_KINDS = ("isotropic", "diagonal", "full")


@dataclass(frozen=True)
class GaussianSpec:
    """Gaussian over weight space with isotropic, diagonal, or full covariance."""

    mean: np.ndarray
    cov_kind: str
    cov: float | np.ndarray

    def __post_init__(self):
        mean = as_tensor(self.mean, "mean").ravel()
        object.__setattr__(self, "mean", mean)
        if self.cov_kind not in COV_KINDS:
            raise ValueError(f"cov_kind must be one of {COV_KINDS}")
        if self.cov_kind == "isotropic":
            var = float(self.cov)
            if not var > 0:
                raise ValueError("isotropic variance must be positive")
            object.__setattr__(self, "cov", var)
        elif self.cov_kind == "diagonal":
            diag = as_tensor(self.cov, "cov diagonal").ravel()
            if diag.size != mean.size or np.any(diag <= 0):
                raise ValueError("diagonal covariance must be positive, length k")
            object.__setattr__(self, "cov", diag)
        else:
            C = as_tensor(self.cov, "covariance")
            if C.shape != (mean.size, mean.size):
                raise ValueError("full covariance must be k x k")
            if np.linalg.norm(C - C.T) > 1e-10 * max(np.linalg.norm(C), 1.0):
                raise ValueError("full covariance must be symmetric")
            C = 0.5 * (C + C.T)
            eig = np.linalg.eigvalsh(C)
            if eig.min() <= 0:
                raise ValueError("full covariance must be positive definite")
            object.__setattr__(self, "cov", C)

    @classmethod
    def isotropic(cls, mean, var: float) -> "GaussianSpec":
        return cls(mean=np.asarray(mean, dtype=float), cov_kind="isotropic", cov=var)

    @classmethod
    def diagonal(cls, mean, variances) -> "GaussianSpec":
        return cls(mean=np.asarray(mean, dtype=float), cov_kind="diagonal", cov=variances)

    @classmethod
    def full(cls, mean, cov) -> "GaussianSpec":
        return cls(mean=np.asarray(mean, dtype=float), cov_kind="full", cov=cov)

    @property
    def dim(self) -> int:
        return self.mean.size

    def cov_matrix(self) -> np.ndarray:
        if self.cov_kind == "isotropic":
            return self.cov * np.eye(self.dim)
        if self.cov_kind == "diagonal":
            return np.diag(self.cov)
        return self.cov

    def cov_diag(self) -> np.ndarray:
        if self.cov_kind == "isotropic":
            return np.full(self.dim, self.cov)
        if self.cov_kind == "diagonal":
            return self.cov
        return np.diag(self.cov)

    def cov_trace(self) -> float:
        return float(self.cov_diag().sum())

    def cov_logdet(self) -> float:
        if self.cov_kind == "full":
            L = np.linalg.cholesky(self.cov)
            return float(2.0 * np.sum(np.log(np.diag(L))))
        return float(np.sum(np.log(self.cov_diag())))

    def sample(self, rng: np.random.Generator, m: int) -> np.ndarray:
        z = rng.standard_normal((m, self.dim))
        if self.cov_kind == "isotropic":
            return self.mean + math.sqrt(self.cov) * z
        if self.cov_kind == "diagonal":
            return self.mean + np.sqrt(self.cov) * z
        L = np.linalg.cholesky(self.cov)
        return self.mean + z @ L.T

    def logpdf(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        d = x - self.mean
        if self.cov_kind == "full":
            L = np.linalg.cholesky(self.cov)
            y = np.linalg.solve(L, d.T).T
            quad = np.sum(y * y, axis=1)
        else:
            quad = np.sum(d * d / self.cov_diag(), axis=1)
        return -0.5 * (quad + self.dim * LOG_2PI + self.cov_logdet())


def kl_gaussians(q: GaussianSpec, p: GaussianSpec) -> float:
    """KL(q || p) in nats for an isotropic or diagonal pre-distribution p.

    Closed form: 1/2 [ (mq-mp)^T Dp^-1 (mq-mp) + tr(Dp^-1 Sq)
                       + logdet Dp - logdet Sq - k ].
    """
    if q.dim != p.dim:
        raise ValueError("q and p must share the same dimension")
    if p.cov_kind == "full":
        raise ValueError("pre-distribution must be isotropic or diagonal")
    pvar = p.cov_diag()
    dmean = q.mean - p.mean
    quad = float(np.sum(dmean * dmean / pvar))
    tr = float(np.sum(q.cov_diag() / pvar)) if q.cov_kind != "full" else float(
        np.sum(np.diag(q.cov) / pvar)
    )
    return 0.5 * (quad + tr + float(np.sum(np.log(pvar))) - q.cov_logdet() - q.dim)


@dataclass
class ComplexityReport:
    """Terms of the complexity trade-off C_beta = E_Q[loss] + beta * KL(Q||P)."""

    beta: float
    expected_loss: float
    kl_nats: float
    c_beta: float
    mc_samples: int

    def to_json(self) -> str:
        return json.dumps(
            {
                "beta": self.beta,
                "expected-loss": self.expected_loss,
                "kl-nats": self.kl_nats,
                "c-beta": self.c_beta,
                "mc-samples": self.mc_samples,
            },
            sort_keys=True,
        )


def complexity(model, data, q: GaussianSpec, p: GaussianSpec, beta: float,
               m: int, seed: int) -> ComplexityReport:
    """Monte-Carlo E_{w~Q}[L_D] plus the exact KL term, assembled at level beta."""
    if m < 1:
        raise ValueError("need m >= 1 weight samples")
    if beta < 0:
        raise ValueError("beta must be non-negative")
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0xC0DE]))
    layout = model.layout()
    samples = q.sample(rng, m)
    losses = [ndcore.loss(model, WeightVector(s, layout), data) for s in samples]
    expected = float(np.mean(losses))
    kl = kl_gaussians(q, p)
    return ComplexityReport(
        beta=float(beta),
        expected_loss=expected,
        kl_nats=kl,
        c_beta=expected + beta * kl,
        mc_samples=m,
    )


def optimal_sigma(H: np.ndarray, beta: float, lambda2: float) -> np.ndarray:
    """Covariance minimizing the quadratic complexity surrogate:
    Sigma* = (beta/2) (H + beta/(2 lambda^2) I)^-1.
    """
    H = as_tensor(H, "H")
    if H.ndim != 2 or H.shape[0] != H.shape[1]:
        raise ValueError("H must be square")
    if not beta > 0 or not lambda2 > 0:
        raise ValueError("beta and lambda2 must be positive")
    k = H.shape[0]
    M = 0.5 * (H + H.T) + (beta / (2.0 * lambda2)) * np.eye(k)
    try:
        L = np.linalg.cholesky(M)
    except np.linalg.LinAlgError as exc:
        raise ValueError(
            "H + beta/(2 lambda^2) I is not positive definite; substitute the "
            "Fisher for the Hessian as the stable PSD curvature proxy"
        ) from exc
    Minv = np.linalg.inv(M)
    return (beta / 2.0) * 0.5 * (Minv + Minv.T)


def fisher_iw(H_or_F: np.ndarray, w_star, beta: float, lambda2: float) -> float:
    """Information in the Weights for Gaussian pre/post at the optimal covariance.

    Equals KL( N(w*, Sigma*) || N(0, lambda^2 I) ) exactly, with
    Sigma* = (beta/2)(H + beta/(2 lambda^2) I)^-1:

        1/2 log|H + beta/(2 lambda^2) I| + (k/2) log(2 lambda^2 / beta) - k/2
        + (1/(2 lambda^2)) [ ||w*||^2 + tr(Sigma*) ].

    In a fully flat landscape (H = 0, w* = 0) the post reverts to the pre and
    the value is 0. At non-minima pass the Fisher in place of the Hessian,
    which keeps the shifted matrix positive definite.
    """
    H = as_tensor(H_or_F, "H_or_F")
    w = as_tensor(w_star.values if isinstance(w_star, WeightVector) else w_star, "w_star").ravel()
    k = w.size
    if H.shape != (k, k):
        raise ValueError("H_or_F must be k x k for a k-dim w_star")
    if not beta > 0 or not lambda2 > 0:
        raise ValueError("beta and lambda2 must be positive")
    M = 0.5 * (H + H.T) + (beta / (2.0 * lambda2)) * np.eye(k)
    try:
        L = np.linalg.cholesky(M)
    except np.linalg.LinAlgError as exc:
        raise ValueError(
            "H + beta/(2 lambda^2) I is not positive definite; substitute the "
            "Fisher for the Hessian as the stable PSD curvature proxy"
        ) from exc
    logdet_M = float(2.0 * np.sum(np.log(np.diag(L))))
    Minv = np.linalg.inv(M)
    tr_sigma = (beta / 2.0) * float(np.trace(Minv))
    return (
        0.5 * logdet_M
        + 0.5 * k * math.log(2.0 * lambda2 / beta)
        - 0.5 * k
        + (float(w @ w) + tr_sigma) / (2.0 * lambda2)
    )


def logdet_only_iw(F: np.ndarray, eps: float | None = None) -> float:
    """Improper-prior reporting mode: the lambda-free term (1/2) log|F + eps I|.

    Only the log-determinant survives the uninformative-prior limit; the
    divergent additive constant is dropped. This is a reporting quantity and
    must never feed a PAC-Bayes bound.
    """
    F = as_tensor(F, "F")
    est = fisher_mod.FisherEstimate(form="full", values=F, method="exact-expectation")
    if eps is None:
        eps = fisher_mod.default_damping(est)
    return 0.5 * fisher_mod.logdet_damped(est, eps)


@dataclass
class PacBayesReport:
    """PAC-Bayes test-loss bound and its ingredients."""

    train_loss: float
    kl_nats: float
    n: int
    beta: float
    delta: float
    bound: float
    expectation_form: bool

    def to_json(self) -> str:
        return json.dumps(
            {
                "train-loss": self.train_loss,
                "kl-nats": self.kl_nats,
                "n": self.n,
                "beta": self.beta,
                "delta": self.delta,
                "bound": self.bound,
                "expectation-form": self.expectation_form,
            },
            sort_keys=True,
        )


def pac_bayes_bound(train_loss: float, kl_nats: float, n: int, beta: float,
                    delta: float = 0.05, expectation_form: bool = False) -> PacBayesReport:
    """Test-loss bound (1 - 1/(2 beta))^-1 [L + (beta/N)(KL + log 1/delta)].

    The expectation form drops the log(1/delta) confidence term. Assumes the
    per-sample loss is bounded by 1.
    """
    if beta <= 0.5:
        raise ValueError("beta must exceed 1/2 for the prefactor to be defined")
    if not 0.0 <= train_loss <= 1.0:
        raise ValueError("train_loss must lie in [0, 1] (loss bounded by 1)")
    if kl_nats < 0:
        raise ValueError("kl_nats must be non-negative")
    if n < 1:
        raise ValueError("n must be >= 1")
    if not 0.0 < delta <= 1.0:
        raise ValueError("delta must lie in (0, 1]")
    conf = 0.0 if expectation_form else math.log(1.0 / delta)
    bound = (train_loss + (beta / n) * (kl_nats + conf)) / (1.0 - 1.0 / (2.0 * beta))
    return PacBayesReport(
        train_loss=float(train_loss),
        kl_nats=float(kl_nats),
        n=int(n),
        beta=float(beta),
        delta=float(delta),
        bound=float(bound),
        expectation_form=bool(expectation_form),
    )


def minimize_bound_beta(train_loss: float, kl_nats: float, n: int, delta: float = 0.05,
                        lo: float = 0.5 + 1e-6, hi: float = 1e4,
                        tol: float = 1e-10) -> tuple[float, float]:
    """Golden-section search for the beta minimizing the PAC-Bayes bound."""

    def val(b: float) -> float:
        return pac_bayes_bound(train_loss, kl_nats, n, b, delta).bound

    phi = (math.sqrt(5.0) - 1.0) / 2.0
    a, b = lo, hi
    c, d = b - phi * (b - a), a + phi * (b - a)
    fc, fd = val(c), val(d)
    while b - a > tol * max(1.0, b):
        if fc < fd:
            b, d, fd = d, c, fc
            c = b - phi * (b - a)
            fc = val(c)
        else:
            a, c, fc = c, d, fd
            d = a + phi * (b - a)
            fd = val(d)
    best = 0.5 * (a + b)
    return best, val(best)


# ---------------------------------------------------------------------------
# adapted prior and Shannon mutual information
# ---------------------------------------------------------------------------


def mixture_logpdf(components: Sequence[GaussianSpec], weights: np.ndarray,
                   x: np.ndarray) -> np.ndarray:
    logs = np.stack([g.logpdf(x) for g in components], axis=0)
    return logsumexp(logs + np.log(weights)[:, None], axis=0)


def adapted_prior_mi(posts: Sequence[GaussianSpec], weights=None,
                     mc_samples: int = MIXTURE_KL_SAMPLES, seed: int = 0) -> float:
    """Shannon MI I(w; D) = E_D[ KL(Q(w|D) || Qbar) ] with Qbar the mixture marginal.

    The KL of each component against the mixture is estimated by Monte Carlo
    with a fixed per-component sample budget.
    """
    posts = list(posts)
    if len(posts) == 0:
        raise ValueError("need at least one post-distribution")
    if len(posts) == 1:
        return 0.0
    if weights is None:
        weights = np.full(len(posts), 1.0 / len(posts))
    weights = np.asarray(weights, dtype=float)
    if weights.size != len(posts) or abs(weights.sum() - 1.0) > 1e-8 or np.any(weights < 0):
        raise ValueError("weights must be a probability vector over posts")
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0xA1D]))
    total = 0.0
    for wgt, q in zip(weights, posts):
        if wgt == 0.0:
            continue
        x = q.sample(rng, mc_samples)
        kl_est = float(np.mean(q.logpdf(x) - mixture_logpdf(posts, weights, x)))
        total += wgt * kl_est
    return total


def expected_kl_to_prior(posts: Sequence[GaussianSpec], weights, prior: GaussianSpec,
                         mc_samples: int = MIXTURE_KL_SAMPLES, seed: int = 0) -> float:
    """E_D[ KL(Q(w|D) || P) ] by Monte Carlo, for arbitrary Gaussian P."""
    weights = np.asarray(weights, dtype=float)
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0xE4B]))
    total = 0.0
    for wgt, q in zip(weights, posts):
        if wgt == 0.0:
            continue
        x = q.sample(rng, mc_samples)
        total += wgt * float(np.mean(q.logpdf(x) - prior.logpdf(x)))
    return total


@dataclass
class MiApprox:
    """An MI approximation in nats; negative raw values are clamped with a flag."""

    nats: float
    raw_nats: float
    clamped: bool
    damped: bool = False

    def __float__(self) -> float:
        return self.nats


def _logdet_psd(M: np.ndarray, damp_policy: bool = False) -> tuple[float, bool]:
    """log det of a PSD matrix; optionally fall back to relative damping."""
    sign, logdet = np.linalg.slogdet(M)
    if sign > 0 and np.isfinite(logdet):
        return float(logdet), False
    if not damp_policy:
        return float("-inf"), False
    k = M.shape[0]
    eps = fisher_mod.DAMPING_RELATIVE * max(float(np.trace(M)) / k, 1e-300)
    sign, logdet = np.linalg.slogdet(M + eps * np.eye(k))
    if sign <= 0 or not np.isfinite(logdet):
        return float("-inf"), True
    return float(logdet), True


def brunel_nadal_mi(entropy_x: float, fishers: Sequence[np.ndarray]) -> MiApprox:
    """Low-noise MI approximation: H(x) - E_x[ (1/2) log((2 pi e)^k / |F_{y|x}|) ].

    Valid when the conditional concentrates; the raw value is clamped at zero
    (with a flag) when the regime is violated.
    """
    fishers = [np.atleast_2d(as_tensor(F, "fisher")) for F in fishers]
    if len(fishers) == 0:
        raise ValueError("need at least one conditional Fisher")
    k = fishers[0].shape[0]
    terms = []
    for F in fishers:
        if F.shape != (k, k):
            raise ValueError("all conditional Fishers must share the same shape")
        if np.linalg.norm(F - F.T) > 1e-8 * max(np.linalg.norm(F), 1.0):
            raise ValueError("conditional Fisher must be symmetric")
        eig_min = float(np.linalg.eigvalsh(0.5 * (F + F.T)).min())
        if eig_min < -1e-8 * max(float(np.linalg.norm(F)), 1.0):
            raise ValueError("conditional Fisher must be PSD")
        logdet, _ = _logdet_psd(0.5 * (F + F.T))
        terms.append(0.5 * (k * math.log(2.0 * math.pi * math.e) - logdet))
    raw = float(entropy_x) - float(np.mean(terms))
    clamped = raw < 0.0
    return MiApprox(nats=max(raw, 0.0), raw_nats=raw, clamped=clamped)


def gaussian_param_fisher(dmu: np.ndarray, sigma: np.ndarray,
                          dsigma: Sequence[np.ndarray] | None = None) -> np.ndarray:
    """Fisher of a Gaussian family N(mu(theta), Sigma(theta)) in its parameters.

    F_{mn} = d_m mu^T Sigma^-1 d_n mu
             + (1/2) tr(Sigma^-1 d_m Sigma Sigma^-1 d_n Sigma);
    the second term is omitted when the covariance derivatives are not given.
    """
    dmu = as_tensor(dmu, "dmu")
    if dmu.ndim == 1:
        dmu = dmu[:, None]
    sigma = np.atleast_2d(as_tensor(sigma, "sigma"))
    n = sigma.shape[0]
    if dmu.shape[0] != n:
        raise ValueError("dmu rows must match the Gaussian dimension")
    try:
        L = np.linalg.cholesky(0.5 * (sigma + sigma.T))
    except np.linalg.LinAlgError as exc:
        raise ValueError("sigma must be positive definite") from exc
    sol = np.linalg.solve(sigma, dmu)
    F = dmu.T @ sol
    if dsigma is not None:
        p = dmu.shape[1]
        if len(dsigma) != p:
            raise ValueError("need one covariance derivative per parameter")
        sinv_ds = [np.linalg.solve(sigma, np.atleast_2d(np.asarray(dS, dtype=float)))
                   for dS in dsigma]
        for m in range(p):
            for nn in range(p):
                F[m, nn] += 0.5 * float(np.trace(sinv_ds[m] @ sinv_ds[nn]))
    return 0.5 * (F + F.T)


def shannon_fisher_approx(entropy_d: float, jac_w, F_w, beta: float) -> MiApprox:
    """MI between weights and dataset via the stability Jacobian and weight Fisher.

    With post-distribution N(w*, beta F^-1), the conditional Fisher of the
    dataset parameters is grad_D w*^T (F/beta) grad_D w*; the MI approximation
    is H(D) minus the expected log-volume of the corresponding ellipsoid.
    Accepts a single Jacobian/Fisher pair or parallel lists (averaged over
    datasets); clamped at zero with a flag when negative.
    """
    if not beta > 0:
        raise ValueError("beta must be positive")
    jacs = jac_w if isinstance(jac_w, (list, tuple)) else [jac_w]
    fws = F_w if isinstance(F_w, (list, tuple)) else [F_w] * len(jacs)
    if len(fws) != len(jacs):
        raise ValueError("need one Fisher per Jacobian (or a single shared one)")
    terms = []
    damped_any = False
    for J, F in zip(jacs, fws):
        J = as_tensor(J, "jacobian")
        if J.ndim == 0:
            J = J.reshape(1, 1)
        elif J.ndim == 1:
            J = J[:, None]
        F = np.atleast_2d(as_tensor(F, "fisher"))
        p = J.shape[1]
        M = J.T @ (F / beta) @ J
        logdet, damped = _logdet_psd(0.5 * (M + M.T), damp_policy=True)
        damped_any = damped_any or damped
        terms.append(0.5 * (p * math.log(2.0 * math.pi * math.e) - logdet))
    raw = float(entropy_d) - float(np.mean(terms))
    clamped = raw < 0.0
    return MiApprox(nats=max(raw, 0.0), raw_nats=raw, clamped=clamped, damped=damped_any)
