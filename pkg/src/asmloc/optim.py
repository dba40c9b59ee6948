"""Parameter storage and the Adam update."""

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor
from .errors import ContractError


class ParameterStore(dict):
    """Ordered mapping of parameter name to a requires_grad ``Tensor``."""

    def add(self, name, value):
        t = Tensor(np.array(value, dtype=np.float64), requires_grad=True)
        t.zero_grad()
        self[name] = t
        return t

    def zero_grad(self):
        for p in self.values():
            p.zero_grad()

    def state_dict(self):
        return {k: v.data.copy() for k, v in self.items()}

    def load_state_dict(self, arrays):
        for k, v in arrays.items():
            if k not in self:
                raise KeyError(k)
            if self[k].shape != np.shape(v):
                raise ContractError(f"{k}: expected shape {self[k].shape}, got {np.shape(v)}")
            self[k].data = np.array(v, dtype=np.float64)

    def copy(self):
        out = ParameterStore()
        for k, v in self.items():
            out.add(k, v.data)
        return out


@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: ParameterStore, state: AdamState) -> None:
    """One bias-corrected Adam update of every parameter, then zero the grads."""
    for name, p in params.items():
        if p.grad is None:
            raise ContractError(f"parameter {name!r} has no gradient")
    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    for name, p in params.items():
        g = p.grad
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p.data = p.data - state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        p.zero_grad()
