import logging

import numpy as np

logger = logging.getLogger(__name__)


class Adam:
    """
    Adaptive-moment optimizer with decoupled weight decay

    Moment state is keyed by parameter object. When a parameter shrinks
    (pruned architecture logits or importance scores), retain() keeps the
    moments of the surviving coordinates and drops the rest.
    """

    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self._m = {id(p): np.zeros_like(p.data) for p in self.params}
        self._v = {id(p): np.zeros_like(p.data) for p in self.params}

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        self.step_count += 1
        bias1 = 1.0 - self.beta1 ** self.step_count
        bias2 = 1.0 - self.beta2 ** self.step_count
        for p in self.params:
            if p.grad is None:
                continue
            key = id(p)
            m = self._m[key] = self.beta1 * self._m[key] + (1.0 - self.beta1) * p.grad
            v = self._v[key] = self.beta2 * self._v[key] + (1.0 - self.beta2) * p.grad * p.grad
            if self.weight_decay:
                p.data = p.data * (1.0 - self.lr * self.weight_decay)
            p.data = p.data - self.lr * (m / bias1) / (np.sqrt(v / bias2) + self.eps)

    def retain(self, param, keep_index):
        """Keep moment entries at keep_index for a parameter that was shrunk"""
        key = id(param)
        if key not in self._m:
            return
        keep_index = np.asarray(keep_index, dtype=np.int64)
        self._m[key] = self._m[key][keep_index]
        self._v[key] = self._v[key][keep_index]
        logger.debug(f"optimizer state for {param!r} reduced to {keep_index.size} coordinates")

    def state_dict(self):
        return {"step_count": self.step_count}
