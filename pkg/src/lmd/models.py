"""Desk-scale model zoo and synthetic tasks.

Two architectures: an MLP (with biases, to exercise the generic parameter
path) and a single-block transformer whose layernorms carry gain-only scale
parameters and no biases anywhere. Every parameter group carries a kind tag
(weight | bias | scale) that routes it to the matching optimizer
initialization; an untagged group cannot exist by construction.

Default weight init is fan-in-scaled normal, std = 1/sqrt(fan_in); biases
start at zero, gains at one (via the scale tag).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .tensor import Tape, Tensor


@dataclass(frozen=True)
class ModelSpec:
    architecture: str  # "mlp" | "tiny-transformer"
    layer_sizes: tuple = ()  # mlp only
    activation: str = "relu"
    objective: str = "classify"  # "classify" | "regress" (mlp only)
    vocab: int = 8  # transformer only
    dim: int = 16
    seq_len: int = 8
    target_scale: float = 1.0  # regression target amplification


def build(spec: ModelSpec, seed: int):
    if spec.architecture == "mlp":
        return Mlp(spec, seed)
    if spec.architecture == "tiny-transformer":
        return TinyTransformer(spec, seed)
    raise ValueError(f"unknown architecture {spec.architecture!r}")


def _leaves(params: dict) -> dict:
    return {k: Tensor(v, name=k) for k, v in params.items()}


class Mlp:
    """Fully connected net; relu or gelu hidden activations."""

    def __init__(self, spec: ModelSpec, seed: int):
        if len(spec.layer_sizes) < 2:
            raise ValueError("mlp needs at least input and output sizes")
        self.spec = spec
        rng = np.random.Generator(np.random.Philox(key=[seed, 0]))
        self.params0 = {}
        sizes = spec.layer_sizes
        for i in range(len(sizes) - 1):
            fan_in = sizes[i]
            w = rng.standard_normal((sizes[i], sizes[i + 1])) / math.sqrt(fan_in)
            self.params0[f"w{i}"] = (w, "weight")
            self.params0[f"b{i}"] = (np.zeros(sizes[i + 1]), "bias")

    def param_count(self) -> int:
        sizes = self.spec.layer_sizes
        return sum(sizes[i] * sizes[i + 1] + sizes[i + 1] for i in range(len(sizes) - 1))

    def _forward(self, tape: Tape, leaves: dict, X, hook=None) -> Tensor:
        h = Tensor(X)
        n_layers = len(self.spec.layer_sizes) - 1
        for i in range(n_layers):
            h = tape.add(tape.matmul(h, leaves[f"w{i}"], hook=hook), leaves[f"b{i}"])
            if i < n_layers - 1:
                h = tape.gelu(h) if self.spec.activation == "gelu" else tape.relu(h)
        return h

    def loss_and_grads(self, params: dict, batch, hook=None):
        X, y = batch
        tape = Tape()
        leaves = _leaves(params)
        out = self._forward(tape, leaves, X, hook=hook)
        if self.spec.objective == "classify":
            loss = tape.cross_entropy(out, y)
        else:
            loss = tape.mse(out, y)
        names = list(params)
        grads = tape.gradients(loss, [leaves[n] for n in names])
        return float(loss.data), dict(zip(names, grads))

    def eval_metric(self, params: dict, batch, hook=None):
        """(loss, accuracy-or-negative-mse) without gradients."""
        X, y = batch
        tape = Tape()
        leaves = _leaves(params)
        out = self._forward(tape, leaves, X, hook=hook)
        if self.spec.objective == "classify":
            loss = tape.cross_entropy(out, y)
            acc = float(np.mean(np.argmax(out.data, axis=1) == y))
            return float(loss.data), acc
        loss = tape.mse(out, y)
        return float(loss.data), -float(loss.data)


class TinyTransformer:
    """Single-block causal transformer: gain-only layernorms, no biases."""

    def __init__(self, spec: ModelSpec, seed: int):
        self.spec = spec
        d, v, t = spec.dim, spec.vocab, spec.seq_len
        rng = np.random.Generator(np.random.Philox(key=[seed, 0]))

        def w(fan_in, shape):
            return rng.standard_normal(shape) / math.sqrt(fan_in)

        self.params0 = {
            "emb": (w(v, (v, d)), "weight"),
            "pos": (0.01 * rng.standard_normal((t, d)), "weight"),
            "ln1_g": (np.ones(d), "scale"),
            "wq": (w(d, (d, d)), "weight"),
            "wk": (w(d, (d, d)), "weight"),
            "wv": (w(d, (d, d)), "weight"),
            "wo": (w(d, (d, d)), "weight"),
            "ln2_g": (np.ones(d), "scale"),
            "w1": (w(d, (d, 4 * d)), "weight"),
            "w2": (w(4 * d, (4 * d, d)), "weight"),
            "lnf_g": (np.ones(d), "scale"),
            "head": (w(d, (d, v)), "weight"),
        }
        self._mask = np.where(np.tril(np.ones((t, t))) > 0, 0.0, -1e9)

    def param_count(self) -> int:
        d, v, t = self.spec.dim, self.spec.vocab, self.spec.seq_len
        return v * d + t * d + 3 * d + 4 * d * d + d * 4 * d + 4 * d * d + d * v

    def scale_param_names(self):
        return [k for k, (_, kind) in self.params0.items() if kind == "scale"]

    def _forward_seq(self, tape: Tape, leaves: dict, seq, hook=None) -> Tensor:
        """Logits (T, vocab) for one integer sequence of length seq_len."""
        t, v, d = self.spec.seq_len, self.spec.vocab, self.spec.dim
        onehot = np.zeros((t, v))
        onehot[np.arange(t), seq] = 1.0
        x = tape.add(tape.matmul(Tensor(onehot), leaves["emb"], hook=hook), leaves["pos"])

        h = tape.layernorm(x, leaves["ln1_g"])
        q = tape.matmul(h, leaves["wq"], hook=hook)
        k = tape.matmul(h, leaves["wk"], hook=hook)
        val = tape.matmul(h, leaves["wv"], hook=hook)
        scores = tape.const_mul(tape.matmul(q, tape.transpose(k), hook=hook), 1.0 / math.sqrt(d))
        attn = tape.softmax(tape.const_add(scores, self._mask))
        ctx = tape.matmul(tape.matmul(attn, val, hook=hook), leaves["wo"], hook=hook)
        x = tape.add(x, ctx)

        h = tape.layernorm(x, leaves["ln2_g"])
        h = tape.matmul(tape.gelu(tape.matmul(h, leaves["w1"], hook=hook)), leaves["w2"], hook=hook)
        x = tape.add(x, h)

        x = tape.layernorm(x, leaves["lnf_g"])
        return tape.matmul(x, leaves["head"], hook=hook)

    def _batch_loss(self, tape: Tape, leaves: dict, batch, hook=None) -> Tensor:
        seqs, targets = batch  # (B, T) ints each; targets are next tokens
        total = None
        for b in range(len(seqs)):
            logits = self._forward_seq(tape, leaves, seqs[b], hook=hook)
            loss_b = tape.cross_entropy(logits, targets[b])
            total = loss_b if total is None else tape.add(total, loss_b)
        return tape.const_mul(total, 1.0 / len(seqs))

    def loss_and_grads(self, params: dict, batch, hook=None):
        tape = Tape()
        leaves = _leaves(params)
        loss = self._batch_loss(tape, leaves, batch, hook=hook)
        names = list(params)
        grads = tape.gradients(loss, [leaves[n] for n in names])
        return float(loss.data), dict(zip(names, grads))

    def eval_metric(self, params: dict, batch, hook=None):
        """(mean loss, next-token accuracy)."""
        seqs, targets = batch
        tape = Tape()
        leaves = _leaves(params)
        losses, hits, total = [], 0, 0
        for b in range(len(seqs)):
            logits = self._forward_seq(tape, leaves, seqs[b], hook=hook)
            losses.append(float(tape.cross_entropy(logits, targets[b]).data))
            hits += int(np.sum(np.argmax(logits.data, axis=1) == targets[b]))
            total += len(targets[b])
        return float(np.mean(losses)), hits / total


@dataclass
class Dataset:
    kind: str  # "classify" | "regress" | "lm"
    train: tuple
    eval: tuple
    meta: dict = field(default_factory=dict)


def synthetic_tasks(task: str, n: int, seed: int, **kw) -> Dataset:
    """Reproducible desk-scale datasets."""
    rng = np.random.Generator(np.random.Philox(key=[seed, 1]))
    if task == "two-class-gaussians":
        sep = kw.get("separation", 4.0)
        return _gaussians(rng, n, sep)
    if task == "xor-rings":
        return _xor_rings(rng, n)
    if task == "char-sequence-copy":
        return _char_copy(rng, n, kw.get("seq_len", 8), kw.get("vocab", 8))
    if task == "scaled-regression":
        return _scaled_regression(rng, n, kw.get("target_scale", 8.0))
    raise ValueError(f"unknown task {task!r}")


def _split(X, y, n):
    return (X[:n], y[:n]), (X[n:], y[n:])


def _gaussians(rng, n, sep):
    total = 2 * n
    y = rng.integers(0, 2, size=total)
    centers = np.where(y[:, None] == 1, sep / 2.0, -sep / 2.0) * np.array([1.0, 0.0])
    X = centers + rng.standard_normal((total, 2))
    train, ev = _split(X, y, n)
    return Dataset(kind="classify", train=train, eval=ev)


def _xor_rings(rng, n):
    # XOR of quadrant signs with radial jitter: not linearly separable.
    total = 2 * n
    X = rng.uniform(-2, 2, size=(total, 2))
    radius = np.sqrt((X * X).sum(axis=1))
    X = X * (1.0 + 0.1 * np.sin(4 * radius))[:, None]
    y = ((X[:, 0] > 0) ^ (X[:, 1] > 0)).astype(int)
    train, ev = _split(X, y, n)
    return Dataset(kind="classify", train=train, eval=ev)


def _char_copy(rng, n, seq_len, vocab):
    # Second half of each sequence repeats the first half; the next-token
    # objective is predictable exactly on the copied half.
    if seq_len % 2 != 0:
        raise ValueError("char-sequence-copy needs an even seq_len")
    half = seq_len // 2
    total = 2 * n
    first = rng.integers(0, vocab, size=(total, half))
    seqs = np.concatenate([first, first], axis=1)
    targets = np.roll(seqs, -1, axis=1)
    targets[:, -1] = seqs[:, 0]
    train, ev = _split(seqs, targets, n)
    return Dataset(kind="lm", train=train, eval=ev,
                   meta={"vocab": vocab, "seq_len": seq_len})


def _scaled_regression(rng, n, target_scale):
    # Optimum needs weights of magnitude target_scale, far above a fan-in
    # init: a growth-demanding task.
    total = 2 * n
    X = rng.standard_normal((total, 2))
    w_star = np.array([target_scale, -0.7 * target_scale])
    y = (X @ w_star)[:, None] + 0.1 * rng.standard_normal((total, 1))
    train, ev = _split(X, y, n)
    return Dataset(kind="regress", train=train, eval=ev, meta={"w_star": w_star})
