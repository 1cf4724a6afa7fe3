"""Adaptation objectives: the contrastive residual loss, its analytic
gradient assembly, and the baseline/ablation losses.

The central objects are pairwise preference logits
    l = beta * (E_phi(x_t) - E_phi(x_s)) - beta * (E_theta(x_t) - E_theta(x_s))
and the loss mean(-log sigmoid(l)).  Source-model energies enter as
constants; normalization constants cancel in the pairwise difference and are
never computed.  The per-pair gradient weight is w = sigmoid(-l).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels
from .autodiff import Tensor
from .model import energy


def cretta_logit(e_phi_s: float, e_phi_t: float, e_theta_s: float,
                 e_theta_t: float, beta: float) -> float:
    """Preference logit for a single (x_s, x_t) pair."""
    if beta <= 0:
        raise ValueError("beta must be positive")
    return beta * (e_phi_t - e_phi_s) - beta * (e_theta_t - e_theta_s)


def gradient_weight(l):
    """Per-pair gradient weight w = sigmoid(-l); scalar or array."""
    return kernels.sigmoid(-np.asarray(l, dtype=np.float64)) if np.ndim(l) \
        else kernels.sigmoid(-float(l))


@dataclass
class PairBatch:
    """Paired source/target samples with their four energies and logits.

    source_index/target_index map each of the P pairs onto rows of the
    stored sample blocks; the energy vectors and logits are pair-indexed
    (aligned pairing: P = n; cartesian: P = n * k).  Labels never appear.
    """
    source_inputs: np.ndarray
    target_inputs: np.ndarray
    source_index: np.ndarray
    target_index: np.ndarray
    e_phi_s: np.ndarray
    e_phi_t: np.ndarray
    e_theta_s: Tensor
    e_theta_t: Tensor
    beta: float
    logit: Tensor

    @property
    def num_pairs(self) -> int:
        return int(self.logit.data.shape[0])

    def weights(self) -> np.ndarray:
        return kernels.sigmoid(-self.logit.data)


def build_pair_batch(source_inputs, target_inputs, e_phi_s, e_phi_t,
                     e_theta_s: Tensor, e_theta_t: Tensor, pairs,
                     beta: float) -> PairBatch:
    """Expand per-sample energies onto the pair list and form the logits.

    pairs is a (target_index, source_index) tuple of equal-length integer
    arrays; source-model energies are plain arrays (constants on the tape).
    """
    if beta <= 0:
        raise ValueError("beta must be positive")
    ti = np.asarray(pairs[0], dtype=np.int64)
    si = np.asarray(pairs[1], dtype=np.int64)
    if ti.shape != si.shape or ti.ndim != 1 or ti.size == 0:
        raise ValueError("pair index arrays must be equal-length and non-empty")
    e_phi_s = np.asarray(e_phi_s, dtype=np.float64)
    e_phi_t = np.asarray(e_phi_t, dtype=np.float64)
    if not (np.isfinite(e_phi_s).all() and np.isfinite(e_phi_t).all()):
        raise ValueError("source-model energies must be finite")

    phi_s = e_phi_s[si]
    phi_t = e_phi_t[ti]
    theta_s = e_theta_s.take(si)
    theta_t = e_theta_t.take(ti)
    source_bias = Tensor(beta * (phi_t - phi_s))
    logit = source_bias - (theta_t - theta_s) * beta
    return PairBatch(
        source_inputs=np.asarray(source_inputs, dtype=np.float64),
        target_inputs=np.asarray(target_inputs, dtype=np.float64),
        source_index=si, target_index=ti,
        e_phi_s=phi_s, e_phi_t=phi_t,
        e_theta_s=theta_s, e_theta_t=theta_t,
        beta=float(beta), logit=logit)


def cretta_loss(batch: PairBatch) -> Tensor:
    """mean(-log sigmoid(l)) over the pair batch; ln 2 at a fresh clone."""
    if batch.num_pairs == 0:
        raise ValueError("empty pair batch")
    return -batch.logit.log_sigmoid().mean()


def weighted_energy_surrogate(batch: PairBatch, weights: np.ndarray) -> Tensor:
    """(beta/P) * sum_i w_i * (E_theta(x_t)_i - E_theta(x_s)_i) with the
    weights held constant.

    Its tape gradient is exactly the manually assembled per-pair combination
    (beta/P) sum_i w_i (grad E_t_i - grad E_s_i), so backpropagating through
    it applies an arbitrary-weight update without autodiffing a reweighted
    loss.
    """
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != (batch.num_pairs,):
        raise ValueError("one weight per pair required")
    diff = batch.e_theta_t - batch.e_theta_s
    return (Tensor(w) * diff).sum() * (batch.beta / batch.num_pairs)


def assemble_cretta_gradient(batch: PairBatch, grads_e_theta_s: dict,
                             grads_e_theta_t: dict) -> dict:
    """Combine per-pair energy gradients into the loss gradient.

    grads_e_theta_s/t map parameter names to stacked arrays of shape
    [P, *param.shape] holding the gradient of each pair's source/target
    energy.  Returns (1/P) sum_i w_i * beta * (g_t[i] - g_s[i]) per
    parameter, which must match the tape gradient of cretta_loss.
    """
    if set(grads_e_theta_s) != set(grads_e_theta_t):
        raise ValueError("gradient dicts must cover the same parameters")
    w = batch.weights()
    p = batch.num_pairs
    out = {}
    for name, g_s in grads_e_theta_s.items():
        g_t = grads_e_theta_t[name]
        if np.shape(g_s) != np.shape(g_t) or np.shape(g_s)[0] != p:
            raise ValueError(f"per-pair gradient shape mismatch for {name!r}")
        out[name] = np.tensordot(w, np.asarray(g_t) - np.asarray(g_s),
                                 axes=(0, 0)) * (batch.beta / p)
    return out


def per_pair_energy_gradients(energy_vec: Tensor,
                              named_params: dict[str, Tensor]) -> dict:
    """Gradient of every row of an energy tensor w.r.t. each named parameter,
    via one backward pass per row over the shared forward tape.

    Clobbers and then clears .grad on the given tensors.  Test/oracle path;
    the adaptation loop never calls this.
    """
    n = energy_vec.data.shape[0]
    out = {name: np.zeros((n, *t.data.shape)) for name, t in named_params.items()}
    for i in range(n):
        for t in named_params.values():
            t.grad = None
        energy_vec.take(np.array([i])).sum().backward()
        for name, t in named_params.items():
            if t.grad is not None:
                out[name][i] = t.grad
    for t in named_params.values():
        t.grad = None
    return out


# ---------------------------------------------------------------------------
# ablation and baseline losses
# ---------------------------------------------------------------------------

def no_contrastive_loss(e_theta_t: Tensor) -> Tensor:
    """Direct target-energy minimization: mean E_theta(x_t)."""
    if e_theta_t.data.size == 0:
        raise ValueError("empty batch")
    return e_theta_t.mean()


def no_contrastive_sigma_loss(e_phi_t, e_theta_t: Tensor, beta: float) -> Tensor:
    """Alternative reading of the same ablation: keep the sigmoid but drop
    every source-sample term, l' = beta * (E_phi(x_t) - E_theta(x_t))."""
    if beta <= 0:
        raise ValueError("beta must be positive")
    if e_theta_t.data.size == 0:
        raise ValueError("empty batch")
    bias = Tensor(beta * np.asarray(e_phi_t, dtype=np.float64))
    return -(bias - e_theta_t * beta).log_sigmoid().mean()


def pairwise_non_residual_loss(e_theta_s: Tensor, e_theta_t: Tensor) -> Tensor:
    """mean(-log sigmoid(E_theta(x_s) - E_theta(x_t))); no source-model terms,
    so it differs from the residual loss exactly by the phi bias inside the
    sigmoid (equal whenever E_phi(x_t) = E_phi(x_s) pairwise, beta = 1)."""
    if e_theta_s.data.size == 0 or e_theta_s.data.shape != e_theta_t.data.shape:
        raise ValueError("populations must be non-empty and aligned")
    return -(e_theta_s - e_theta_t).log_sigmoid().mean()


def nce_loss(e_theta_s: Tensor, e_phi_s, e_theta_t: Tensor, e_phi_t,
             variant: str = "residual", constant: float = 0.0,
             beta: float = 1.0) -> Tensor:
    """Binary logistic density-ratio loss: targets are positives with reward
    r(x), sources negatives with log(1 - sigmoid(r)) = log sigmoid(-r).

    variant "non_residual" uses r = -(E_theta - E_phi) + C; "residual" uses
    r = -(1/beta) * Etilde + c with the residual energy
    Etilde = beta * (E_theta - E_phi).  The two coincide whenever the
    additive constants do, since beta cancels.
    """
    if e_theta_s.data.size == 0 or e_theta_t.data.size == 0:
        raise ValueError("both populations must be non-empty")
    if variant not in ("residual", "non_residual"):
        raise ValueError(f"unknown nce variant {variant!r}")
    if beta <= 0:
        raise ValueError("beta must be positive")

    # In residual form the 1/beta prefactor cancels the beta inside the
    # residual energy, so both variants reduce to E_phi - E_theta + constant.
    def reward(e_theta: Tensor, e_phi) -> Tensor:
        return Tensor(np.asarray(e_phi, dtype=np.float64)) - e_theta + constant

    r_t = reward(e_theta_t, e_phi_t)
    r_s = reward(e_theta_s, e_phi_s)
    return -r_t.log_sigmoid().mean() - (-r_s).log_sigmoid().mean()


def entropy_loss(logits: Tensor) -> Tensor:
    """Mean Shannon entropy (nats) of the softmax rows."""
    if logits.data.ndim != 2 or logits.data.shape[0] == 0:
        raise ValueError("entropy_loss expects a non-empty [n x C] tensor")
    n = logits.data.shape[0]
    log_z = -energy(logits)
    log_probs = logits - log_z.reshape(n, 1)
    probs = log_probs.exp()
    return -(probs * log_probs).sum() / n


def pseudo_label_loss(logits: Tensor, confidence_threshold: float):
    """Self-training cross-entropy against own argmax predictions.

    Rows whose max softmax probability falls below the threshold are
    excluded; returns (loss, retained_count), loss 0 when nothing is kept.
    Argmax ties resolve to the lowest class index, the same rule accuracy
    uses.
    """
    if not 0.0 <= confidence_threshold < 1.0:
        raise ValueError("confidence threshold must lie in [0, 1)")
    n, c = logits.data.shape
    probs = kernels.softmax_rows(logits.data)
    predicted = np.argmax(probs, axis=1)
    confident = probs[np.arange(n), predicted] >= confidence_threshold
    kept = int(confident.sum())
    if kept == 0:
        return Tensor(0.0), 0
    log_z = -energy(logits)
    log_probs = logits - log_z.reshape(n, 1)
    pick = np.zeros((n, c))
    pick[np.nonzero(confident)[0], predicted[confident]] = 1.0 / kept
    return -(log_probs * Tensor(pick)).sum(), kept
