"""Reference optimizers for dynamics comparisons: GD, plain/clipped
multiplicative weight updates, and AdamW with decoupled weight decay.

All of them share the minimal interface the harness expects: a ``params``
dict of name -> float64 array, ``step(grads, lr)``, the two metric norms and
a checkpointable state dict.
"""

from __future__ import annotations

import math

import numpy as np

ADAMW_EPS = 1e-8


def _check_finite(grads: dict):
    for k, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for {k!r}")


class _BaseOptimizer:
    kind = "base"

    def __init__(self, params: dict):
        self.params = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
        self.step_count = 0

    def eval_params(self) -> dict:
        return self.params

    def weight_l2(self) -> float:
        return math.sqrt(sum(float(np.sum(v * v)) for v in self.params.values()))

    def momentum_l2_pos(self) -> float:
        return 0.0

    def _extra_arrays(self) -> dict:
        return {}

    def _meta(self) -> dict:
        return {}

    def state_dict(self) -> dict:
        arrays = {f"param/{k}": v for k, v in self.params.items()}
        arrays.update(self._extra_arrays())
        return {"kind": self.kind,
                "meta": {"step_count": self.step_count, **self._meta()},
                "arrays": arrays}

    def load_state_dict(self, state: dict):
        if state.get("kind") != self.kind:
            raise ValueError(f"checkpoint kind {state.get('kind')!r} != {self.kind!r}")
        self.step_count = int(state["meta"]["step_count"])
        for k in self.params:
            self.params[k] = np.array(state["arrays"][f"param/{k}"])


class GD(_BaseOptimizer):
    """Plain gradient descent: theta <- theta - eta * grad."""

    kind = "gd"

    def step(self, grads: dict, lr: float):
        _check_finite(grads)
        for k, g in grads.items():
            self.params[k] = self.params[k] - lr * g
        self.step_count += 1


class MWU(_BaseOptimizer):
    """Sign-aware multiplicative update theta <- theta * exp(-eta * grad * sign(theta)).

    Zeros are absorbing (sign(0) = 0) and signs never change. With
    ``clip=c`` the magnitudes are clamped to c after every step (the
    "mwu-clip" / Madam-style variant).
    """

    kind = "mwu"

    def __init__(self, params: dict, clip: float | None = None):
        super().__init__(params)
        self.clip = clip

    def step(self, grads: dict, lr: float):
        _check_finite(grads)
        for k, g in grads.items():
            theta = self.params[k]
            theta = theta * np.exp(-lr * g * np.sign(theta))
            if self.clip is not None:
                theta = np.clip(theta, -self.clip, self.clip)
            self.params[k] = theta
        self.step_count += 1

    def _meta(self):
        return {"clip": self.clip}


class AdamW(_BaseOptimizer):
    """Adam with bias correction and decoupled weight decay."""

    kind = "adamw"

    def __init__(self, params: dict, beta1: float = 0.9, beta2: float = 0.999,
                 weight_decay: float = 0.1):
        super().__init__(params)
        self.beta1, self.beta2 = beta1, beta2
        self.weight_decay = weight_decay
        self.m = {k: np.zeros_like(v) for k, v in self.params.items()}
        self.v = {k: np.zeros_like(v) for k, v in self.params.items()}

    def step(self, grads: dict, lr: float):
        _check_finite(grads)
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1**t
        bc2 = 1.0 - self.beta2**t
        for k, g in grads.items():
            self.m[k] = self.beta1 * self.m[k] + (1 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1 - self.beta2) * g * g
            m_hat = self.m[k] / bc1
            v_hat = self.v[k] / bc2
            theta = self.params[k] * (1.0 - lr * self.weight_decay)
            self.params[k] = theta - lr * m_hat / (np.sqrt(v_hat) + ADAMW_EPS)

    def momentum_l2_pos(self) -> float:
        return math.sqrt(sum(float(np.sum(v * v)) for v in self.m.values()))

    def _extra_arrays(self):
        out = {f"m/{k}": v for k, v in self.m.items()}
        out.update({f"v/{k}": v for k, v in self.v.items()})
        return out

    def _meta(self):
        return {"beta1": self.beta1, "beta2": self.beta2, "weight_decay": self.weight_decay}

    def load_state_dict(self, state: dict):
        super().load_state_dict(state)
        meta = state["meta"]
        self.beta1, self.beta2 = meta["beta1"], meta["beta2"]
        self.weight_decay = meta["weight_decay"]
        self.m = {k: np.array(state["arrays"][f"m/{k}"]) for k in self.params}
        self.v = {k: np.array(state["arrays"][f"v/{k}"]) for k in self.params}
