"""Minimal dense-tensor reverse-mode automatic differentiation.

All arithmetic is double precision; low precision only ever enters through an
explicit matmul hook, whose backward pass is straight-through (gradients are
taken w.r.t. the untransformed operands). The supported primitive set is
exactly what the model zoo needs; broadcasting is limited to bias-add.

A Tape records primitive applications in execution order; backward() replays
it in exact reverse order, accumulating each gradient once per consumer.
"""

from __future__ import annotations

import math

import numpy as np


class ShapeError(ValueError):
    """Operand shapes incompatible for a primitive."""


class NonFiniteError(FloatingPointError):
    """A primitive produced a non-finite intermediate."""


class Tensor:
    """Dense float64 array node. Leaves carry parameters or inputs."""

    __slots__ = ("data", "grad", "name")

    def __init__(self, data, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, name={self.name!r})"


class Tape:
    """Execution-order record of primitive applications."""

    def __init__(self):
        self._nodes = []  # (out, inputs, backward_fn)

    def _record(self, op_name, out, inputs, backward_fn):
        if not np.all(np.isfinite(out.data)):
            raise NonFiniteError(f"{op_name}: non-finite output")
        self._nodes.append((out, inputs, backward_fn))
        return out

    def backward(self, loss: Tensor):
        """Accumulate d(loss)/d(tensor) into .grad of every reachable tensor."""
        if loss.data.shape != ():
            raise ShapeError("backward: loss must be scalar")
        for out, inputs, _ in self._nodes:
            out.grad = None
            for t in inputs:
                t.grad = None
        loss.grad = np.ones(())
        for out, inputs, backward_fn in reversed(self._nodes):
            if out.grad is None:
                continue
            for t, g in zip(inputs, backward_fn(out.grad)):
                if g is None:
                    continue
                t.grad = g if t.grad is None else t.grad + g

    def gradients(self, loss: Tensor, leaves) -> list[np.ndarray]:
        """Gradients for the given leaves; unreached leaves get zeros."""
        self.backward(loss)
        return [t.grad if t.grad is not None else np.zeros_like(t.data) for t in leaves]

    # -- primitives -------------------------------------------------------

    def matmul(self, a: Tensor, b: Tensor, hook=None) -> Tensor:
        """2-D matrix product, optionally with a forward-only operand/output
        transform (straight-through backward)."""
        if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
            raise ShapeError(f"matmul: {a.data.shape} x {b.data.shape}")
        if hook is None:
            out_data = a.data @ b.data
        else:
            fa = hook.transform_operand(a.data, contraction_axis=1)
            fb = hook.transform_operand(b.data, contraction_axis=0)
            out_data = hook.transform_output(fa @ fb)
        out = Tensor(out_data)

        def backward(g):
            return g @ b.data.T, a.data.T @ g

        return self._record("matmul", out, (a, b), backward)

    def transpose(self, a: Tensor) -> Tensor:
        if a.data.ndim != 2:
            raise ShapeError(f"transpose: expected 2-D, got {a.data.shape}")
        out = Tensor(a.data.T)
        return self._record("transpose", out, (a,), lambda g: (g.T,))

    def add(self, a: Tensor, b: Tensor) -> Tensor:
        """Elementwise add; also supports bias-add of a vector onto rows."""
        bias_add = a.data.ndim == 2 and b.data.shape == (a.data.shape[1],)
        if not bias_add and a.data.shape != b.data.shape:
            raise ShapeError(f"add: {a.data.shape} + {b.data.shape}")
        out = Tensor(a.data + b.data)

        def backward(g):
            return g, g.sum(axis=0) if bias_add else g

        return self._record("add", out, (a, b), backward)

    def mul(self, a: Tensor, b: Tensor) -> Tensor:
        if a.data.shape != b.data.shape:
            raise ShapeError(f"mul: {a.data.shape} * {b.data.shape}")
        out = Tensor(a.data * b.data)
        return self._record("mul", out, (a, b), lambda g: (g * b.data, g * a.data))

    def const_mul(self, a: Tensor, c: float) -> Tensor:
        out = Tensor(a.data * c)
        return self._record("const_mul", out, (a,), lambda g: (g * c,))

    def const_add(self, a: Tensor, c) -> Tensor:
        """Add a fixed (non-differentiated) array or scalar, e.g. a mask."""
        c = np.asarray(c, dtype=np.float64)
        if c.shape != () and c.shape != a.data.shape:
            raise ShapeError(f"const_add: {a.data.shape} + {c.shape}")
        out = Tensor(a.data + c)
        return self._record("const_add", out, (a,), lambda g: (g,))

    def relu(self, a: Tensor) -> Tensor:
        out = Tensor(np.maximum(a.data, 0.0))
        return self._record("relu", out, (a,), lambda g: (g * (a.data > 0),))

    def gelu(self, a: Tensor) -> Tensor:
        """Tanh-approximate GELU (the GPT-2 flavor)."""
        c = math.sqrt(2.0 / math.pi)
        x = a.data
        inner = c * (x + 0.044715 * x**3)
        t = np.tanh(inner)
        out = Tensor(0.5 * x * (1.0 + t))

        def backward(g):
            dinner = c * (1.0 + 3 * 0.044715 * x**2)
            return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner),)

        return self._record("gelu", out, (a,), backward)

    def layernorm(self, a: Tensor, scale: Tensor, eps: float = 1e-5) -> Tensor:
        """Row-wise layer normalization with a learned gain, no bias."""
        if a.data.ndim != 2 or scale.data.shape != (a.data.shape[1],):
            raise ShapeError(f"layernorm: {a.data.shape} with scale {scale.data.shape}")
        x = a.data
        mu = x.mean(axis=1, keepdims=True)
        var = x.var(axis=1, keepdims=True)
        inv = 1.0 / np.sqrt(var + eps)
        xhat = (x - mu) * inv
        out = Tensor(xhat * scale.data)

        def backward(g):
            gx = g * scale.data
            dx = inv * (
                gx
                - gx.mean(axis=1, keepdims=True)
                - xhat * (gx * xhat).mean(axis=1, keepdims=True)
            )
            return dx, (g * xhat).sum(axis=0)

        return self._record("layernorm", out, (a, scale), backward)

    def softmax(self, a: Tensor) -> Tensor:
        """Row-wise softmax."""
        if a.data.ndim != 2:
            raise ShapeError(f"softmax: expected 2-D, got {a.data.shape}")
        z = a.data - a.data.max(axis=1, keepdims=True)
        e = np.exp(z)
        s = e / e.sum(axis=1, keepdims=True)
        out = Tensor(s)

        def backward(g):
            return (s * (g - (g * s).sum(axis=1, keepdims=True)),)

        return self._record("softmax", out, (a,), backward)

    def cross_entropy(self, logits: Tensor, labels) -> Tensor:
        """Mean cross-entropy of row logits against integer labels."""
        labels = np.asarray(labels)
        if logits.data.ndim != 2 or labels.shape != (logits.data.shape[0],):
            raise ShapeError(f"cross_entropy: {logits.data.shape} with labels {labels.shape}")
        z = logits.data - logits.data.max(axis=1, keepdims=True)
        lse = np.log(np.exp(z).sum(axis=1))
        n = len(labels)
        out = Tensor((lse - z[np.arange(n), labels]).mean())

        def backward(g):
            p = np.exp(z - lse[:, None])
            p[np.arange(n), labels] -= 1.0
            return (g * p / n,)

        return self._record("cross_entropy", out, (logits,), backward)

    def mse(self, pred: Tensor, target) -> Tensor:
        """Mean squared error against a fixed target."""
        target = np.asarray(target, dtype=np.float64)
        if pred.data.shape != target.shape:
            raise ShapeError(f"mse: {pred.data.shape} vs {target.shape}")
        diff = pred.data - target
        out = Tensor((diff * diff).mean())
        return self._record("mse", out, (pred,), lambda g: (g * 2.0 * diff / diff.size,))

    def sum_all(self, a: Tensor) -> Tensor:
        out = Tensor(a.data.sum())
        return self._record("sum_all", out, (a,), lambda g: (g * np.ones_like(a.data),))
