"""Decoupled-weight-decay Adam and the per-epoch exponential LR schedule."""

from __future__ import annotations

import numpy as np


def lr_at_epoch(base_lr, decay, epoch):
    """base_lr * decay**epoch, computed as a single power."""
    return float(base_lr) * float(decay) ** int(epoch)


class AdamW(object):
    """AdamW over an explicit parameter list.

    ``step`` consumes a gradient record (mapping parameter -> ndarray); any
    parameter absent from the record is left untouched that step, so frozen
    submodules cost nothing.
    """

    def __init__(self, params, lr=2e-4, betas=(0.8, 0.99), eps=1e-9,
                 weight_decay=0.01):
        self.params = list(params)
        if len(set(map(id, self.params))) != len(self.params):
            raise ValueError("duplicate parameter in optimizer")
        self.lr = float(lr)
        self.beta1, self.beta2 = betas
        self.eps = float(eps)
        self.weight_decay = float(weight_decay)
        self.t = 0
        self._m = {id(p): np.zeros_like(p.data) for p in self.params}
        self._v = {id(p): np.zeros_like(p.data) for p in self.params}

    def step(self, record):
        self.t += 1
        b1t = 1.0 - self.beta1 ** self.t
        b2t = 1.0 - self.beta2 ** self.t
        for p in self.params:
            g = record.get(p)
            if g is None:
                continue
            k = id(p)
            m = self._m[k]
            v = self._v[k]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            if self.weight_decay:
                p.data -= self.lr * self.weight_decay * p.data
            p.data -= self.lr * (m / b1t) / (np.sqrt(v / b2t) + self.eps)

    def state_tensors(self):
        """(name, array) pairs of moment state, for checkpointing."""
        out = []
        for i, p in enumerate(self.params):
            out.append((f"m.{i}", self._m[id(p)]))
            out.append((f"v.{i}", self._v[id(p)]))
        return out
