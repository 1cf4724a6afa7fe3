"""Adam optimizer with bias correction.

adam_step applies the textbook recurrence to flat arrays; Adam wraps it for
a set of named parameter tensors, tracking one (m, v) pair per parameter and
a single shared step count.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .autodiff import Tensor


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step_count: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(state: AdamState, params: dict, grads: dict) -> dict:
    """One Adam update over named flat-or-shaped float64 arrays, in place.

    Parameters absent from grads are left untouched; step_count increments
    once per call regardless.
    """
    state.step_count += 1
    for name, grad in grads.items():
        param = params[name]
        if param.shape != np.shape(grad):
            raise ValueError(f"gradient shape mismatch for {name!r}: "
                             f"{np.shape(grad)} vs {param.shape}")
        if not param.flags["C_CONTIGUOUS"]:
            raise ValueError(f"parameter {name!r} must be C-contiguous")
        if name not in state.m:
            state.m[name] = np.zeros(param.size)
            state.v[name] = np.zeros(param.size)
        flat_grad = np.ascontiguousarray(grad, dtype=np.float64).ravel()
        kernels.adam_update(param.ravel(), flat_grad,
                            state.m[name], state.v[name],
                            state.step_count, state.lr,
                            state.beta1, state.beta2, state.epsilon)
    return params


class Adam:
    """Adam over named Tensors; only listed parameters ever move."""

    def __init__(self, named_params: dict[str, Tensor], lr: float = 1e-3,
                 beta1: float = 0.9, beta2: float = 0.999, epsilon: float = 1e-8):
        self.params = dict(named_params)
        self.state = AdamState(lr=lr, beta1=beta1, beta2=beta2, epsilon=epsilon)

    def step(self) -> None:
        grads = {name: t.grad for name, t in self.params.items()
                 if t.grad is not None}
        data = {name: self.params[name].data for name in grads}
        adam_step(self.state, data, grads)

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None
