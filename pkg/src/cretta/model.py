"""Batch-normalized MLP classifiers and the logit free energy.

The same Classifier plays the frozen source model and the adaptable target
model; roles differ only in mutability.  Hidden layers are affine -> batch
norm -> ReLU, the head is a plain affine producing C logits.  Energies are
computed on the gradient tape as the negative temperature log-sum-exp of the
logits, so a constant logit shift moves every energy by exactly the opposite
amount and normalization constants never appear.
"""

from __future__ import annotations

import json
import copy

import numpy as np

from . import kernels
from .autodiff import Tensor, as_tensor, batch_norm
from .optim import Adam
from .seeding import rng_for

BN_EPS = 1e-5
BN_MOMENTUM = 0.1
DEFAULT_HIDDEN = (32, 32)

CHECKPOINT_FORMAT = "cretta-model"
CHECKPOINT_VERSION = 1


class Classifier:
    """MLP with batch-norm hidden layers; role is "source" or "target".

    widths lists every layer size, input first, class count last, e.g.
    [2, 32, 32, 2].  Source-role models reject mutation at the API level and
    hold no gradient state.
    """

    def __init__(self, widths, seed: int, role: str = "target",
                 pretrain_seed: int | None = None):
        widths = [int(w) for w in widths]
        if len(widths) < 2:
            raise ValueError("widths needs at least input and output sizes")
        if role not in ("source", "target"):
            raise ValueError(f"unknown role {role!r}")
        self.widths = widths
        self.seed = int(seed)
        self.role = role
        self.pretrain_seed = pretrain_seed
        self.num_hidden = len(widths) - 2

        rng = rng_for(seed, "model-init")
        self.params: dict[str, Tensor] = {}
        self.running: dict[str, np.ndarray] = {}
        for i in range(self.num_hidden):
            fan_in, fan_out = widths[i], widths[i + 1]
            w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_in, fan_out))
            self.params[f"layers.{i}.weight"] = Tensor(w)
            self.params[f"layers.{i}.bias"] = Tensor(np.zeros(fan_out))
            self.params[f"layers.{i}.bn_gamma"] = Tensor(np.ones(fan_out))
            self.params[f"layers.{i}.bn_beta"] = Tensor(np.zeros(fan_out))
            self.running[f"layers.{i}.running_mean"] = np.zeros(fan_out)
            self.running[f"layers.{i}.running_var"] = np.ones(fan_out)
        w = rng.normal(0.0, np.sqrt(2.0 / widths[-2]),
                       size=(widths[-2], widths[-1]))
        self.params["head.weight"] = Tensor(w)
        self.params["head.bias"] = Tensor(np.zeros(widths[-1]))

    @property
    def input_dim(self) -> int:
        return self.widths[0]

    @property
    def num_classes(self) -> int:
        return self.widths[-1]

    def set_requires_grad(self, mask: dict[str, bool]) -> None:
        if self.role == "source":
            raise ValueError("source-role classifiers are immutable")
        for name, tensor in self.params.items():
            tensor.requires_grad = bool(mask.get(name, False))

    def param_values(self) -> dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self.params.items()}

    def load_param_values(self, values: dict[str, np.ndarray]) -> None:
        if self.role == "source":
            raise ValueError("source-role classifiers are immutable")
        for name, arr in values.items():
            target = self.params[name].data
            if target.shape != np.shape(arr):
                raise ValueError(f"shape mismatch loading {name!r}")
            np.copyto(target, arr)

    def param_hash(self) -> str:
        import hashlib
        h = hashlib.sha256()
        for name in sorted(self.params):
            h.update(name.encode())
            h.update(np.ascontiguousarray(self.params[name].data).tobytes())
        for name in sorted(self.running):
            h.update(name.encode())
            h.update(np.ascontiguousarray(self.running[name]).tobytes())
        return h.hexdigest()


def forward(model: Classifier, batch, bn_mode: str = "batch",
            update_running: bool = False) -> Tensor:
    """Run the classifier; returns the [n x C] logits tensor.

    bn_mode "batch" normalizes with the current batch's moments (requires
    n >= 2), "running" with the stored running statistics.  update_running
    folds the batch moments into the running statistics (pretraining only;
    adaptation keeps them frozen).
    """
    x = as_tensor(batch)
    if x.data.ndim != 2:
        raise ValueError("forward expects a 2-D batch")
    n, d = x.data.shape
    if d != model.input_dim:
        raise ValueError(f"input width {d} does not match model width "
                         f"{model.input_dim}")
    if not np.isfinite(x.data).all():
        raise ValueError("forward input must be finite")
    if bn_mode not in ("batch", "running"):
        raise ValueError(f"unknown bn_mode {bn_mode!r}")
    if bn_mode == "batch" and n < 2:
        raise ValueError("batch statistics need at least 2 samples")
    if update_running and (bn_mode != "batch" or model.role == "source"):
        raise ValueError("running statistics update requires a mutable model "
                         "in batch mode")

    h = x
    for i in range(model.num_hidden):
        p = model.params
        h = h @ p[f"layers.{i}.weight"] + p[f"layers.{i}.bias"]
        if bn_mode == "batch":
            mean, var = kernels.batch_moments(h.data)
            if update_running:
                rm = model.running[f"layers.{i}.running_mean"]
                rv = model.running[f"layers.{i}.running_var"]
                unbiased = var * (n / (n - 1))
                rm *= 1.0 - BN_MOMENTUM
                rm += BN_MOMENTUM * mean
                rv *= 1.0 - BN_MOMENTUM
                rv += BN_MOMENTUM * unbiased
        else:
            mean = model.running[f"layers.{i}.running_mean"]
            var = model.running[f"layers.{i}.running_var"]
        h = batch_norm(h, p[f"layers.{i}.bn_gamma"], p[f"layers.{i}.bn_beta"],
                       mean, var, BN_EPS, stats_from_batch=(bn_mode == "batch"))
        h = h.relu()
    logits = h @ model.params["head.weight"] + model.params["head.bias"]
    return logits


def energy(logits, temperature: float = 1.0) -> Tensor:
    """Per-row free energy -T log sum_k exp(logit_k / T), on the tape.

    The row maxima enter as constants (the standard shift trick), which
    leaves the gradient exactly -softmax(logits / T).
    """
    t = as_tensor(logits)
    if t.data.ndim != 2 or t.data.shape[1] < 2:
        raise ValueError("energy expects [n x C] logits with C >= 2")
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    if not np.isfinite(t.data).all():
        raise ValueError("energy input must be finite")
    n = t.data.shape[0]
    row_max = np.max(t.data, axis=1)
    shifted = (t - Tensor(row_max[:, None])) / temperature
    lse = shifted.exp().sum(axis=1).log() * temperature + Tensor(row_max)
    return -lse


def energy_values(logits: np.ndarray, temperature: float = 1.0) -> np.ndarray:
    """energy() for plain arrays, off the tape."""
    return -kernels.logsumexp_rows(logits, temperature)


def energy_logit_grad(logits, temperature: float = 1.0) -> np.ndarray:
    """Analytic d(energy)/d(logits) = -softmax(logits / T), rowwise.

    Serves as an independent oracle for the tape gradient of energy().
    """
    arr = np.asarray(logits, dtype=np.float64)
    squeeze = arr.ndim == 1
    if squeeze:
        arr = arr[None, :]
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    out = -kernels.softmax_rows(arr / temperature)
    return out[0] if squeeze else out


def clone_as_target(source: Classifier) -> Classifier:
    """Deep copy of a source model with role target; parameters bitwise equal."""
    if source.role != "source":
        raise ValueError("clone_as_target expects a source-role classifier")
    clone = Classifier(source.widths, seed=source.seed, role="target",
                       pretrain_seed=source.pretrain_seed)
    for name, tensor in source.params.items():
        clone.params[name] = Tensor(tensor.data.copy())
    for name, arr in source.running.items():
        clone.running[name] = arr.copy()
    return clone


def as_source(model: Classifier) -> Classifier:
    """Frozen deep copy with role source (end of pretraining)."""
    frozen = copy.copy(model)
    frozen.params = {name: Tensor(t.data.copy()) for name, t in model.params.items()}
    frozen.running = {name: arr.copy() for name, arr in model.running.items()}
    frozen.role = "source"
    return frozen


def build_param_mask(model: Classifier, policy: str) -> dict[str, bool]:
    """Adaptable-parameter selection: "bn_affine" (default), "all", "head",
    or "none" for variants that never update."""
    names = list(model.params)
    if policy == "bn_affine":
        mask = {n: (".bn_gamma" in n or ".bn_beta" in n) for n in names}
    elif policy == "all":
        mask = {n: True for n in names}
    elif policy == "head":
        mask = {n: n.startswith("head.") for n in names}
    elif policy == "none":
        mask = {n: False for n in names}
    else:
        raise ValueError(f"unknown param mask policy {policy!r}")
    return mask


# ---------------------------------------------------------------------------
# checkpointing
# ---------------------------------------------------------------------------

def checkpoint_dict(model: Classifier) -> dict:
    return {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "widths": model.widths,
        "seed": model.seed,
        "pretrain_seed": model.pretrain_seed,
        "role": model.role,
        "params": {n: t.data.tolist() for n, t in model.params.items()},
        "running": {n: a.tolist() for n, a in model.running.items()},
    }


def classifier_from_dict(payload: dict) -> Classifier:
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise ValueError("not a model checkpoint")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {payload.get('version')!r}")
    model = Classifier(payload["widths"], seed=payload["seed"], role="target",
                       pretrain_seed=payload.get("pretrain_seed"))
    for name, value in payload["params"].items():
        arr = np.asarray(value, dtype=np.float64)
        if name not in model.params or model.params[name].data.shape != arr.shape:
            raise ValueError(f"checkpoint parameter {name!r} does not fit the "
                             "declared architecture")
        model.params[name] = Tensor(arr)
    for name, value in payload["running"].items():
        arr = np.asarray(value, dtype=np.float64)
        if name not in model.running or model.running[name].shape != arr.shape:
            raise ValueError(f"checkpoint statistic {name!r} does not fit")
        model.running[name] = arr
    model.role = payload["role"]
    return model


def save_checkpoint(model: Classifier, path) -> None:
    """JSON checkpoint; float repr round-trips exactly."""
    with open(path, "w") as fh:
        json.dump(checkpoint_dict(model), fh)


def load_checkpoint(path) -> Classifier:
    with open(path) as fh:
        payload = json.load(fh)
    return classifier_from_dict(payload)


# ---------------------------------------------------------------------------
# source pretraining
# ---------------------------------------------------------------------------

def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean negative log softmax probability of the labels."""
    n, c = logits.data.shape
    log_z = -energy(logits)
    log_probs = logits - log_z.reshape(n, 1)
    one_hot = np.zeros((n, c))
    one_hot[np.arange(n), labels] = 1.0
    return -(log_probs * Tensor(one_hot)).sum() / n


def pretrain_source(dataset, widths=None, seed: int = 0, epochs: int = 30,
                    lr: float = 1e-3, batch_size: int = 200) -> Classifier:
    """Train a scratch classifier on a labeled dataset and freeze it.

    Deterministic for a fixed seed; batch statistics drive normalization and
    the running statistics during training.
    """
    widths = list(widths) if widths is not None else (
        [dataset.inputs.shape[1], *DEFAULT_HIDDEN, dataset.num_classes])
    model = Classifier(widths, seed=seed, role="target", pretrain_seed=seed)
    model.set_requires_grad(build_param_mask(model, "all"))
    opt = Adam(model.params, lr=lr)
    n = dataset.inputs.shape[0]
    for epoch in range(epochs):
        order = rng_for(seed, "pretrain-shuffle", epoch).permutation(n)
        for start in range(0, n - 1, batch_size):
            idx = order[start:start + batch_size]
            if idx.size < 2:
                continue
            logits = forward(model, dataset.inputs[idx], bn_mode="batch",
                             update_running=True)
            loss = cross_entropy(logits, dataset.labels[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
    return as_source(model)
