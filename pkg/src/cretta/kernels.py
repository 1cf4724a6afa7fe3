"""Numerically stable array kernels with two interchangeable backends.

Hot inner loops (row log-sum-exp, softmax, sigmoid/log-sigmoid, batch-norm
reductions, the Adam update, calibration binning) exist twice: a vectorized
numpy implementation and a loop implementation compiled with numba when it
is available.  The active backend is chosen once at import time from the
CRETTA_BACKEND environment variable ("numba" or "numpy"); the default is
numba with a silent fallback to numpy when numba is not installed.

Both backends agree to float64 rounding noise (~1e-15 relative); nothing in
the package relies on bitwise agreement *between* backends, only on
determinism *within* one.
"""

from __future__ import annotations

import math
import os

import numpy as np

BACKEND_ENV_VAR = "CRETTA_BACKEND"


def _resolve_backend() -> str:
    choice = os.environ.get(BACKEND_ENV_VAR, "").strip().lower()
    if choice not in ("", "numba", "numpy"):
        raise ValueError(
            f"{BACKEND_ENV_VAR} must be 'numba' or 'numpy', got {choice!r}"
        )
    if choice == "numpy":
        return "numpy"
    try:
        import numba  # noqa: F401
    except ImportError:
        if choice == "numba":
            raise RuntimeError(
                f"{BACKEND_ENV_VAR}=numba requested but numba is not importable"
            )
        return "numpy"
    return "numba"


BACKEND = _resolve_backend()

if BACKEND == "numba":
    from numba import njit as _njit
else:
    _njit = None


# ---------------------------------------------------------------------------
# numpy implementations
# ---------------------------------------------------------------------------

def _logsumexp_rows_numpy(x, temperature):
    m = np.max(x, axis=1)
    shifted = np.exp((x - m[:, None]) / temperature)
    return m + temperature * np.log(np.sum(shifted, axis=1))


def _softmax_rows_numpy(x):
    m = np.max(x, axis=1, keepdims=True)
    e = np.exp(x - m)
    return e / np.sum(e, axis=1, keepdims=True)


def _sigmoid_numpy(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _log_sigmoid_numpy(x):
    # -softplus(-x) = min(x, 0) - log1p(exp(-|x|)); finite for any finite x.
    return np.minimum(x, 0.0) - np.log1p(np.exp(-np.abs(x)))


def _batch_moments_numpy(x):
    mean = np.mean(x, axis=0)
    var = np.mean((x - mean) ** 2, axis=0)
    return mean, var


def _batchnorm_forward_numpy(x, mean, var, gamma, beta, eps):
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x - mean) * inv_std
    return xhat * gamma + beta, xhat, inv_std


def _batchnorm_backward_batch_numpy(g, xhat, gamma, inv_std):
    n = g.shape[0]
    s1 = np.sum(g, axis=0)
    s2 = np.sum(g * xhat, axis=0)
    dx = (gamma * inv_std) * (g - s1 / n - xhat * (s2 / n))
    return dx, s2, s1


def _batchnorm_backward_frozen_numpy(g, xhat, gamma, inv_std):
    dgamma = np.sum(g * xhat, axis=0)
    dbeta = np.sum(g, axis=0)
    dx = g * (gamma * inv_std)
    return dx, dgamma, dbeta


def _adam_update_numpy(param, grad, m, v, t, lr, beta1, beta2, eps):
    m *= beta1
    m += (1.0 - beta1) * grad
    v *= beta2
    v += (1.0 - beta2) * grad * grad
    m_hat = m / (1.0 - beta1 ** t)
    v_hat = v / (1.0 - beta2 ** t)
    param -= lr * m_hat / (np.sqrt(v_hat) + eps)


def _calibration_bin_stats_numpy(conf, correct, bins):
    # bin(c) = ceil(c * bins), with c = 0 placed in bin 1.
    idx = np.ceil(conf * bins).astype(np.int64)
    idx[idx < 1] = 1
    idx -= 1
    counts = np.bincount(idx, minlength=bins).astype(np.float64)
    conf_sums = np.bincount(idx, weights=conf, minlength=bins)
    correct_sums = np.bincount(idx, weights=correct, minlength=bins)
    return counts, conf_sums, correct_sums


# ---------------------------------------------------------------------------
# loop implementations (numba targets)
# ---------------------------------------------------------------------------

def _logsumexp_rows_loop(x, temperature):
    n, c = x.shape
    out = np.empty(n)
    for i in range(n):
        m = x[i, 0]
        for k in range(1, c):
            if x[i, k] > m:
                m = x[i, k]
        acc = 0.0
        for k in range(c):
            acc += math.exp((x[i, k] - m) / temperature)
        out[i] = m + temperature * math.log(acc)
    return out


def _softmax_rows_loop(x):
    n, c = x.shape
    out = np.empty((n, c))
    for i in range(n):
        m = x[i, 0]
        for k in range(1, c):
            if x[i, k] > m:
                m = x[i, k]
        acc = 0.0
        for k in range(c):
            e = math.exp(x[i, k] - m)
            out[i, k] = e
            acc += e
        for k in range(c):
            out[i, k] /= acc
    return out


def _sigmoid_loop(x):
    n = x.shape[0]
    out = np.empty(n)
    for i in range(n):
        if x[i] >= 0.0:
            out[i] = 1.0 / (1.0 + math.exp(-x[i]))
        else:
            e = math.exp(x[i])
            out[i] = e / (1.0 + e)
    return out


def _log_sigmoid_loop(x):
    n = x.shape[0]
    out = np.empty(n)
    for i in range(n):
        lo = x[i] if x[i] < 0.0 else 0.0
        out[i] = lo - math.log1p(math.exp(-abs(x[i])))
    return out


def _batch_moments_loop(x):
    n, d = x.shape
    mean = np.zeros(d)
    var = np.zeros(d)
    for i in range(n):
        for j in range(d):
            mean[j] += x[i, j]
    for j in range(d):
        mean[j] /= n
    for i in range(n):
        for j in range(d):
            delta = x[i, j] - mean[j]
            var[j] += delta * delta
    for j in range(d):
        var[j] /= n
    return mean, var


def _batchnorm_forward_loop(x, mean, var, gamma, beta, eps):
    n, d = x.shape
    y = np.empty((n, d))
    xhat = np.empty((n, d))
    inv_std = np.empty(d)
    for j in range(d):
        inv_std[j] = 1.0 / math.sqrt(var[j] + eps)
    for i in range(n):
        for j in range(d):
            xhat[i, j] = (x[i, j] - mean[j]) * inv_std[j]
            y[i, j] = xhat[i, j] * gamma[j] + beta[j]
    return y, xhat, inv_std


def _batchnorm_backward_batch_loop(g, xhat, gamma, inv_std):
    n, d = g.shape
    s1 = np.zeros(d)
    s2 = np.zeros(d)
    for i in range(n):
        for j in range(d):
            s1[j] += g[i, j]
            s2[j] += g[i, j] * xhat[i, j]
    dx = np.empty((n, d))
    for i in range(n):
        for j in range(d):
            dx[i, j] = gamma[j] * inv_std[j] * (
                g[i, j] - s1[j] / n - xhat[i, j] * s2[j] / n
            )
    return dx, s2, s1


def _batchnorm_backward_frozen_loop(g, xhat, gamma, inv_std):
    n, d = g.shape
    dgamma = np.zeros(d)
    dbeta = np.zeros(d)
    dx = np.empty((n, d))
    for i in range(n):
        for j in range(d):
            dgamma[j] += g[i, j] * xhat[i, j]
            dbeta[j] += g[i, j]
            dx[i, j] = g[i, j] * gamma[j] * inv_std[j]
    return dx, dgamma, dbeta


def _adam_update_loop(param, grad, m, v, t, lr, beta1, beta2, eps):
    n = param.shape[0]
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for i in range(n):
        m[i] = beta1 * m[i] + (1.0 - beta1) * grad[i]
        v[i] = beta2 * v[i] + (1.0 - beta2) * grad[i] * grad[i]
        m_hat = m[i] / c1
        v_hat = v[i] / c2
        param[i] -= lr * m_hat / (math.sqrt(v_hat) + eps)


def _calibration_bin_stats_loop(conf, correct, bins):
    counts = np.zeros(bins)
    conf_sums = np.zeros(bins)
    correct_sums = np.zeros(bins)
    for i in range(conf.shape[0]):
        b = int(math.ceil(conf[i] * bins))
        if b < 1:
            b = 1
        counts[b - 1] += 1.0
        conf_sums[b - 1] += conf[i]
        correct_sums[b - 1] += correct[i]
    return counts, conf_sums, correct_sums


_NUMPY_IMPLS = {
    "logsumexp_rows": _logsumexp_rows_numpy,
    "softmax_rows": _softmax_rows_numpy,
    "sigmoid": _sigmoid_numpy,
    "log_sigmoid": _log_sigmoid_numpy,
    "batch_moments": _batch_moments_numpy,
    "batchnorm_forward": _batchnorm_forward_numpy,
    "batchnorm_backward_batch": _batchnorm_backward_batch_numpy,
    "batchnorm_backward_frozen": _batchnorm_backward_frozen_numpy,
    "adam_update": _adam_update_numpy,
    "calibration_bin_stats": _calibration_bin_stats_numpy,
}

_LOOP_IMPLS = {
    "logsumexp_rows": _logsumexp_rows_loop,
    "softmax_rows": _softmax_rows_loop,
    "sigmoid": _sigmoid_loop,
    "log_sigmoid": _log_sigmoid_loop,
    "batch_moments": _batch_moments_loop,
    "batchnorm_forward": _batchnorm_forward_loop,
    "batchnorm_backward_batch": _batchnorm_backward_batch_loop,
    "batchnorm_backward_frozen": _batchnorm_backward_frozen_loop,
    "adam_update": _adam_update_loop,
    "calibration_bin_stats": _calibration_bin_stats_loop,
}

#: name -> {backend -> callable}; the numba column exists only when numba
#: imports, so benchmarks and parity tests can reach both paths explicitly.
IMPLEMENTATIONS: dict[str, dict] = {
    name: {"numpy": fn} for name, fn in _NUMPY_IMPLS.items()
}

if BACKEND == "numba":
    for _name, _fn in _LOOP_IMPLS.items():
        IMPLEMENTATIONS[_name]["numba"] = _njit(cache=True)(_fn)

_ACTIVE = {name: table[BACKEND] for name, table in IMPLEMENTATIONS.items()}


def warm_up() -> None:
    """Trigger JIT compilation of every kernel (no-op on the numpy backend)."""
    x = np.array([[0.0, 1.0], [1.0, 0.0], [0.5, 0.5]])
    v = np.array([-1.0, 0.0, 1.0])
    ones = np.ones(2)
    _ACTIVE["logsumexp_rows"](x, 1.0)
    _ACTIVE["softmax_rows"](x)
    _ACTIVE["sigmoid"](v)
    _ACTIVE["log_sigmoid"](v)
    mean, var = _ACTIVE["batch_moments"](x)
    _, xhat, inv_std = _ACTIVE["batchnorm_forward"](x, mean, var, ones, ones, 1e-5)
    _ACTIVE["batchnorm_backward_batch"](x, xhat, ones, inv_std)
    _ACTIVE["batchnorm_backward_frozen"](x, xhat, ones, inv_std)
    _ACTIVE["adam_update"](v.copy(), v.copy(), np.zeros(3), np.zeros(3),
                           1, 1e-3, 0.9, 0.999, 1e-8)
    _ACTIVE["calibration_bin_stats"](np.array([0.0, 0.5, 1.0]),
                                     np.array([1.0, 0.0, 1.0]), 10)


# ---------------------------------------------------------------------------
# public wrappers
# ---------------------------------------------------------------------------

def _as_matrix(x) -> np.ndarray:
    return np.ascontiguousarray(x, dtype=np.float64)


def logsumexp_rows(x, temperature: float = 1.0) -> np.ndarray:
    """Per-row temperature log-sum-exp of a 2-D array, max-subtraction stable."""
    x = _as_matrix(x)
    if x.ndim != 2 or x.shape[1] == 0:
        raise ValueError("logsumexp_rows expects a non-empty 2-D array")
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    if not np.isfinite(x).all():
        raise ValueError("logsumexp_rows input must be finite")
    return _ACTIVE["logsumexp_rows"](x, float(temperature))


def log_sum_exp(values, temperature: float = 1.0) -> float:
    """T * log(sum_k exp(values[k] / T)) for a 1-D vector; overflow safe."""
    values = np.ascontiguousarray(values, dtype=np.float64)
    if values.ndim != 1 or values.size == 0:
        raise ValueError("log_sum_exp expects a non-empty 1-D vector")
    return float(logsumexp_rows(values[None, :], temperature)[0])


def softmax_rows(x) -> np.ndarray:
    """Row-wise softmax of a 2-D array."""
    x = _as_matrix(x)
    if x.ndim != 2 or x.shape[1] == 0:
        raise ValueError("softmax_rows expects a non-empty 2-D array")
    return _ACTIVE["softmax_rows"](x)


def sigmoid(x):
    """Stable logistic sigmoid; accepts a scalar or an array."""
    arr = np.ascontiguousarray(np.atleast_1d(x), dtype=np.float64)
    out = _ACTIVE["sigmoid"](arr.ravel()).reshape(arr.shape)
    if np.isscalar(x) or np.ndim(x) == 0:
        return float(out[0])
    return out


def log_sigmoid(x):
    """log(sigmoid(x)) computed as -softplus(-x); finite for finite input."""
    arr = np.ascontiguousarray(np.atleast_1d(x), dtype=np.float64)
    out = _ACTIVE["log_sigmoid"](arr.ravel()).reshape(arr.shape)
    if np.isscalar(x) or np.ndim(x) == 0:
        return float(out[0])
    return out


def batch_moments(x):
    """Per-column mean and biased variance of a 2-D batch."""
    return _ACTIVE["batch_moments"](_as_matrix(x))


def batchnorm_forward(x, mean, var, gamma, beta, eps):
    """Normalize columns with given moments; returns (y, xhat, inv_std)."""
    return _ACTIVE["batchnorm_forward"](
        _as_matrix(x), _as_vector(mean), _as_vector(var),
        _as_vector(gamma), _as_vector(beta), float(eps))


def batchnorm_backward_batch(g, xhat, gamma, inv_std):
    """Backward for batch-statistics normalization: (dx, dgamma, dbeta)."""
    return _ACTIVE["batchnorm_backward_batch"](
        _as_matrix(g), _as_matrix(xhat), _as_vector(gamma), _as_vector(inv_std))


def batchnorm_backward_frozen(g, xhat, gamma, inv_std):
    """Backward when the moments are constants: (dx, dgamma, dbeta)."""
    return _ACTIVE["batchnorm_backward_frozen"](
        _as_matrix(g), _as_matrix(xhat), _as_vector(gamma), _as_vector(inv_std))


def adam_update(param, grad, m, v, t, lr, beta1, beta2, eps) -> None:
    """In-place Adam update with bias correction on flat float64 views."""
    _ACTIVE["adam_update"](param, grad, m, v, int(t),
                           float(lr), float(beta1), float(beta2), float(eps))


def calibration_bin_stats(conf, correct, bins: int):
    """Per-bin (count, confidence sum, correct sum) over equal-width bins."""
    conf = _as_vector(conf)
    correct = np.ascontiguousarray(correct, dtype=np.float64)
    if conf.shape != correct.shape:
        raise ValueError("confidence and correctness lengths differ")
    return _ACTIVE["calibration_bin_stats"](conf, correct, int(bins))


def _as_vector(x) -> np.ndarray:
    return np.ascontiguousarray(x, dtype=np.float64)
