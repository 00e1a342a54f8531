"""Effective information in the activations under task-preserving weight noise.

Activations of layer L are perturbed with n ~ N(0, beta (F_w + eps I)^-1); the
conditional Fisher of the activations given the input follows the linearized
Gaussian form F_{z|x} = (grad_x f)^T (J Sigma* J^T + eps I)^-1 (grad_x f), and
the effective mutual information is assembled with the low-noise approximation.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from . import fisher as fisher_mod, ndcore
from .fisher import FisherEstimate
from .ndcore import WeightVector, as_tensor

LOG_2PIE = math.log(2.0 * math.pi * math.e)


def _check_layer(model, layer: int) -> int:
    n_layers = len(model.layer_sizes) - 1
    layer = int(layer)
    if not 1 <= layer <= n_layers:
        raise ValueError(f"layer must be in [1, {n_layers}], got {layer}")
    return layer


def layer_activations(model, w: WeightVector, x, layer: int) -> np.ndarray:
    """Post-activation output of the given layer (1-based); raw logits for the last."""
    layer = _check_layer(model, layer)
    x = as_tensor(x, "input")
    single = x.ndim == 1
    xb = x[None, :] if single else x
    acts, _ = ndcore._forward_cache(model, w, xb)
    out = acts[layer]
    return out[0] if single else out


def weight_jacobian(model, w: WeightVector, x, layer: int) -> np.ndarray:
    """Jacobian of layer activations with respect to all weights: (dim z, k).

    Columns belonging to layers above the probed one are zero.
    """
    layer = _check_layer(model, layer)
    x = as_tensor(x, "input")
    if x.ndim != 1:
        raise ValueError("weight_jacobian expects a single input vector")
    xb = x[None, :]
    acts, _ = ndcore._forward_cache(model, w, xb)
    pairs = ndcore._unpack(model, w)
    z = acts[layer][0]
    dim_z = z.size
    jac = np.zeros((dim_z, w.dim))
    # reverse-mode seed per output coordinate, truncated at the probed layer
    for j in range(dim_z):
        seed = np.zeros((1, dim_z))
        seed[0, j] = 1.0
        if layer < len(pairs) and model.activation == "tanh":
            seed = seed * (1.0 - z * z)
        elif layer < len(pairs):
            seed = seed * (z > 0.0)
        jac[j] = _backprop_weights_truncated(model, pairs, acts, seed, layer)
    return jac


def _backprop_weights_truncated(model, pairs, acts, dlast, layer: int) -> np.ndarray:
    """Flat weight gradient for one seed on the pre-activation of `layer`.

    ``dlast`` is the gradient w.r.t. the pre-activation z_layer = h @ W + b
    (already multiplied by the activation derivative where applicable).
    """
    grads = {i: (np.zeros_like(pairs[i][0]), np.zeros_like(pairs[i][1]))
             for i in range(len(pairs))}
    delta = dlast
    for i in range(layer - 1, -1, -1):
        W, _ = pairs[i]
        h_prev = acts[i]
        grads[i] = (h_prev.T @ delta, delta.sum(axis=0))
        if i > 0:
            delta = delta @ W.T
            h = acts[i]
            if model.activation == "tanh":
                delta = delta * (1.0 - h * h)
            else:
                delta = delta * (h > 0.0)
    flat = []
    for i in range(len(pairs)):
        gW, gb = grads[i]
        flat.append(gW.ravel())
        flat.append(gb.ravel())
    return np.concatenate(flat)


def input_jacobian(model, w: WeightVector, x, layer: int) -> np.ndarray:
    """Jacobian of layer activations with respect to the input: (dim z, dim x)."""
    layer = _check_layer(model, layer)
    x = as_tensor(x, "input")
    if x.ndim != 1:
        raise ValueError("input_jacobian expects a single input vector")
    xb = x[None, :]
    acts, _ = ndcore._forward_cache(model, w, xb)
    pairs = ndcore._unpack(model, w)
    # forward-accumulate d h_i / d x; the final weight layer has no activation
    J = np.eye(model.layer_sizes[0])
    for i in range(layer):
        W, _ = pairs[i]
        J = J @ W
        if i < len(pairs) - 1:
            h = acts[i + 1][0]
            if model.activation == "tanh":
                J = J * (1.0 - h * h)[None, :]
            else:
                J = J * (h > 0.0)[None, :]
    return J.T


def perturbation_covariance(F_w: FisherEstimate, beta: float,
                            eps: float | None = None) -> tuple[np.ndarray, float]:
    """Sigma*_w = beta (F + eps I)^-1 with the fisher-module damping policy."""
    if F_w.form != "full":
        raise ValueError("perturbed-weight sampling needs a full-form Fisher")
    if not beta >= 0:
        raise ValueError("beta must be non-negative")
    if eps is None:
        eps = max(fisher_mod.default_damping(F_w), 1e-12)
    M = 0.5 * (F_w.values + F_w.values.T) + eps * np.eye(F_w.k)
    cov = beta * np.linalg.inv(M)
    return 0.5 * (cov + cov.T), float(eps)


def perturbed_activations(model, w: WeightVector, F_w: FisherEstimate, beta: float,
                          x, m: int, seed: int, layer: int | None = None) -> np.ndarray:
    """m activation samples z_n = f_{w+n}(x) with n ~ N(0, beta (F + eps I)^-1)."""
    if m < 1:
        raise ValueError("need m >= 1 samples")
    layer = len(model.layer_sizes) - 1 if layer is None else _check_layer(model, layer)
    cov, _ = perturbation_covariance(F_w, beta, None)
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0xAC7]))
    if beta == 0:
        noise = np.zeros((m, w.dim))
    else:
        L = np.linalg.cholesky(cov + 1e-300 * np.eye(w.dim))
        noise = rng.standard_normal((m, w.dim)) @ L.T
    out = np.empty((m, model.layer_sizes[layer]))
    for i in range(m):
        out[i] = layer_activations(model, w.with_values(w.values + noise[i]), x, layer)
    return out


def fisher_z_given_x(model, w: WeightVector, F_w: FisherEstimate, beta: float,
                     x, layer: int) -> np.ndarray:
    """Conditional Fisher of the perturbed activations with respect to the input.

    F_{z|x} = (grad_x f)^T (J_f Sigma* J_f^T + eps I)^-1 (grad_x f) with
    Sigma* = beta (F_w + eps_w I)^-1.
    """
    layer = _check_layer(model, layer)
    if not beta > 0:
        raise ValueError("beta must be positive")
    cov_w, _ = perturbation_covariance(F_w, beta, None)
    J = weight_jacobian(model, w, x, layer)
    G = input_jacobian(model, w, x, layer)
    S = J @ cov_w @ J.T
    S = 0.5 * (S + S.T)
    eps_z = fisher_mod.DAMPING_RELATIVE * max(float(np.trace(S)) / max(S.shape[0], 1), 1e-300)
    Sd = S + eps_z * np.eye(S.shape[0])
    F = G.T @ np.linalg.solve(Sd, G)
    return 0.5 * (F + F.T)


@dataclass
class EffectiveInfoReport:
    """Per-probe conditional-Fisher log-dets and the assembled effective MI."""

    beta: float
    layer: int
    logdet_fzx: np.ndarray
    delta_i: float
    entropy_x: float | None
    i_eff: float | None
    clamped: bool
    input_dim: int

    def to_json(self) -> str:
        return json.dumps(
            {
                "beta": self.beta,
                "layer": self.layer,
                "per-probe-logdet-fzx": [float(v) for v in self.logdet_fzx],
                "delta-i": self.delta_i,
                "entropy-x": self.entropy_x,
                "i-eff": self.i_eff,
                "clamped": self.clamped,
                "input-dim": self.input_dim,
            },
            sort_keys=True,
        )


def effective_mi(model, w: WeightVector, F_w: FisherEstimate, beta: float,
                 probes, layer: int, entropy_x: float | None = None) -> EffectiveInfoReport:
    """Effective MI ingredients over a probe set.

    delta_i = -mean_x (1/2) log((2 pi e)^{dim x} / |F_{z|x}|) is reported always;
    i_eff = entropy_x + delta_i (clamped at 0) is present when entropy_x is given.
    """
    probes = as_tensor(probes, "probes")
    if probes.ndim == 1:
        probes = probes[None, :]
    if probes.shape[0] == 0:
        raise ValueError("probe set must be nonempty")
    dim_x = probes.shape[1]
    logdets = np.empty(probes.shape[0])
    for i, x in enumerate(probes):
        F = fisher_z_given_x(model, w, F_w, beta, x, layer)
        sign, logdet = np.linalg.slogdet(F)
        logdets[i] = logdet if sign > 0 else -np.inf
    delta_i = float(np.mean(0.5 * logdets) - 0.5 * dim_x * LOG_2PIE)
    i_eff = None
    clamped = False
    if entropy_x is not None:
        raw = float(entropy_x) + delta_i
        clamped = raw < 0
        i_eff = max(raw, 0.0)
    return EffectiveInfoReport(
        beta=float(beta),
        layer=int(layer),
        logdet_fzx=logdets,
        delta_i=delta_i,
        entropy_x=entropy_x,
        i_eff=i_eff,
        clamped=clamped,
        input_dim=dim_x,
    )
