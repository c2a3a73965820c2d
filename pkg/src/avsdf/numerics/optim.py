"""Adam with bias correction, updating parameter arrays in place."""
from __future__ import annotations

from dataclasses import dataclass, field

import numba
import numpy as np

from ..errors import ContractViolation

BETA1 = 0.9
BETA2 = 0.999
EPS = 1e-8


@numba.njit(cache=True)
def _adam_kernel(p, g, m, v, step, b1, nb1, b2, nb2, inv_sqrt_c2, eps):
    # scalars arrive pre-cast to the storage dtype, so f32 buffers use f32
    # arithmetic (vectorizes) and f64 buffers use f64
    for i in range(p.size):
        gi = g[i]
        mi = b1 * m[i] + nb1 * gi
        vi = b2 * v[i] + nb2 * gi * gi
        m[i] = mi
        v[i] = vi
        p[i] = p[i] - step * mi / (np.sqrt(vi) * inv_sqrt_c2 + eps)


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0
    beta1: float = BETA1
    beta2: float = BETA2
    eps: float = EPS

    @classmethod
    def for_params(cls, params: dict) -> "AdamState":
        st = cls()
        for k, p in params.items():
            arr = p if isinstance(p, np.ndarray) else p.data
            st.m[k] = np.zeros_like(arr)
            st.v[k] = np.zeros_like(arr)
        return st


def adam_step(params: dict, grads: dict, state: AdamState, lr: float) -> None:
    """One bias-corrected Adam update of every parameter present in ``grads``.

    ``params`` maps names to Tensors (or arrays); their storage is updated in
    place. Parameters missing from ``grads`` are treated as having zero
    gradient, which still advances their moments.
    """
    state.t += 1
    c1 = 1.0 - state.beta1 ** state.t
    c2 = 1.0 - state.beta2 ** state.t
    for name, p in params.items():
        arr = p if isinstance(p, np.ndarray) else p.data
        if name not in state.m:
            state.m[name] = np.zeros_like(arr)
            state.v[name] = np.zeros_like(arr)
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(arr)
        if g.shape != arr.shape:
            raise ContractViolation(f"gradient shape {g.shape} != parameter shape {arr.shape} for {name}")
        if not arr.flags.c_contiguous:
            raise ContractViolation(f"parameter {name} must be C-contiguous")
        g = np.ascontiguousarray(g, dtype=arr.dtype)
        f = arr.dtype.type
        _adam_kernel(arr.reshape(-1), g.reshape(-1), state.m[name].reshape(-1),
                     state.v[name].reshape(-1), f(lr / c1), f(state.beta1), f(1.0 - state.beta1),
                     f(state.beta2), f(1.0 - state.beta2), f(1.0 / np.sqrt(c2)), f(state.eps))
