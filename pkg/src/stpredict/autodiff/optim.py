"""ADAM with bias correction."""
from dataclasses import dataclass, field

import numpy as np


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def adam_step(params, grads, state):
    """Update ``params`` (Tensors) in place from ``grads`` (arrays).

    Moment buffers are created lazily on the first call.
    """
    params, grads = list(params), list(grads)
    if len(grads) != len(params):
        raise ValueError(f"adam_step: {len(params)} params but {len(grads)} grads")
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            raise ValueError(f"adam_step: missing gradient for parameter #{i} {p.shape}")
        if g.shape != p.shape:
            raise ValueError(f"adam_step: gradient #{i} has shape {g.shape}, parameter {p.shape}")
    if not state.m:
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        dt = p.data.dtype.type
        m *= dt(b1)
        m += dt(1 - b1) * g
        v *= dt(b2)
        v += dt(1 - b2) * (g * g)
        denom = np.sqrt(v / dt(c2)) + dt(state.eps)
        p.data -= dt(state.lr) * (m / dt(c1)) / denom
    return params


class Adam:
    """Optimizer bound to a fixed, ordered list of leaf tensors."""

    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.state = AdamState(lr=lr, beta1=beta1, beta2=beta2, eps=eps)

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self, grads=None):
        if grads is None:
            missing = [i for i, p in enumerate(self.params) if p.grad is None]
            if missing:
                raise ValueError(f"adam: parameters {missing} have no gradient")
            grads = [p.grad for p in self.params]
        adam_step(self.params, grads, self.state)
