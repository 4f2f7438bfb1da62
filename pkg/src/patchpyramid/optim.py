"""Adam optimizer and the finite-difference gradient oracle."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg.blas import daxpy, dscal

from .errors import ShapeError
from .tensor import Tensor


@dataclass
class AdamState:
    """Per-parameter first/second moments plus the shared step counter."""

    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)
    _scratch: list = field(default_factory=list)

    def ensure(self, params: list[Tensor]) -> None:
        if not self.m:
            self.m = [np.zeros_like(p.data) for p in params]
            self.v = [np.zeros_like(p.data) for p in params]
            self._scratch = [np.empty_like(p.data) for p in params]


def adam_step(params: list[Tensor], grads: list[np.ndarray], state: AdamState) -> list[Tensor]:
    """One Adam update with bias correction; parameters update in place.

    The learning rate is read from ``state`` at call time so callers can
    drive a schedule by mutating ``state.lr`` between steps.  All arithmetic
    runs in place through preallocated scratch: parameter traffic, not
    flops, bounds the step on large models.
    """
    state.ensure(params)
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    sc2 = np.sqrt(c2)
    for p, g, m, v, buf in zip(params, grads, state.m, state.v, state._scratch):
        if g.shape != p.data.shape:
            raise ShapeError(f"adam_step: grad shape {g.shape} does not match param {p.data.shape}")
        gf = np.ascontiguousarray(g).reshape(-1)
        mf, vf, bf = m.reshape(-1), v.reshape(-1), buf.reshape(-1)
        np.multiply(gf, gf, out=bf)
        dscal(b2, vf)
        daxpy(bf, vf, a=1.0 - b2)       # v = b2 v + (1-b2) g^2
        dscal(b1, mf)
        daxpy(gf, mf, a=1.0 - b1)       # m = b1 m + (1-b1) g
        # lr * (m/c1) / (sqrt(v/c2) + eps) rearranged to avoid dividing v:
        # (lr*sqrt(c2)/c1) * m / (sqrt(v) + eps*sqrt(c2)).
        np.sqrt(vf, out=bf)
        bf += state.eps * sc2
        np.divide(mf, bf, out=bf)
        daxpy(bf, p.data.reshape(-1), a=-(state.lr * sc2 / c1))
    return params


class Adam:
    """Convenience wrapper binding named parameters to an AdamState."""

    def __init__(self, params: list[Tensor], lr: float):
        self.params = params
        self.state = AdamState(lr=lr)

    @property
    def lr(self) -> float:
        return self.state.lr

    @lr.setter
    def lr(self, value: float) -> None:
        self.state.lr = value

    def step(self) -> None:
        grads = []
        for p in self.params:
            if p.grad is None:
                grads.append(np.zeros_like(p.data))
            else:
                grads.append(p.grad)
        adam_step(self.params, grads, self.state)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


def finite_diff_gradient(f, point: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient estimate of scalar ``f`` per coordinate."""
    point = np.asarray(point, dtype=np.float64)
    flat = point.reshape(-1).copy()
    grad = np.empty_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(flat.reshape(point.shape)))
        flat[i] = orig - h
        fm = float(f(flat.reshape(point.shape)))
        flat[i] = orig
        grad[i] = (fp - fm) / (2.0 * h)
    return grad.reshape(point.shape)
