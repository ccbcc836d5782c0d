"""Experiment runner: config parsing, LR schedule, training loop, metrics.

A run is fully determined by its config file: flat `key = value` lines with a
closed schema (unknown keys are errors). Every emitted CSV byte is a function
of (config, seed); floats are written with 17 significant digits so replays
can be compared byte-for-byte.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from . import baselines, mx
from .lmd import LMD, LmdHyper, clip_global_norm
from .lognormal import RngStream
from .models import ModelSpec, build, synthetic_tasks

CSV_HEADER = "step,loss,eval_metric,weight_l2,momentum_l2_pos,lr"


class ConfigError(ValueError):
    pass


class NumericalAbort(RuntimeError):
    """Training produced a non-finite loss; carries the offending step."""

    def __init__(self, step: int, message: str = ""):
        super().__init__(f"non-finite loss at step {step}. {message}".strip())
        self.step = step


def lr_schedule(step: int, total: int, warmup: int, peak: float, floor_frac: float) -> float:
    """Linear ramp 0 -> peak over `warmup` steps, then cosine down to
    floor_frac * peak at `total`."""
    if warmup > total:
        raise ConfigError(f"warmup ({warmup}) exceeds total steps ({total})")
    if not 0 <= step <= total:
        raise ValueError(f"step {step} outside [0, {total}]")
    if not 0 <= floor_frac <= 1:
        raise ConfigError(f"floor_frac must lie in [0, 1], got {floor_frac}")
    if step < warmup:
        return peak * step / warmup
    if total == warmup:
        return peak
    floor = floor_frac * peak
    progress = (step - warmup) / (total - warmup)
    return floor + (peak - floor) * 0.5 * (1.0 + math.cos(math.pi * progress))


@dataclass
class RunConfig:
    task: str = "two-class-gaussians"
    n_train: int = 256
    model: str = "mlp"
    layer_sizes: tuple = (2, 32, 2)
    activation: str = "relu"
    vocab: int = 8
    seq_len: int = 8
    dim: int = 16
    target_scale: float = 8.0

    optimizer: str = "lmd"
    steps: int = 500
    batch_size: int = 32
    J: int = 1
    S: int = 1
    forward_precision: str = "full"  # full | mxfp6 | mxfp4
    sample_mode: str = "sampled"  # sampled | mean
    peak_lr: float = 0.005
    warmup_steps: int = 0
    floor_frac: float = 0.0
    seed: int = 0
    log_interval: int = 10
    out_dir: str = "run"

    # LMD hyperparameters / ablation switches
    sigma: float = 0.125
    beta1: float = 0.95
    beta2: float = 0.99
    grad_clip: float = 0.0  # 0 disables
    decay_mode: str = "multiplicative"
    grad_scaling: str = "by-theta"
    momentum_order: str = "lion"

    # baseline hyperparameters
    adamw_beta2: float = 0.999
    weight_decay: float = 0.1
    mwu_clip: float = 1.0

    def __post_init__(self):
        if self.J * self.S < 1:
            raise ConfigError("J * S must be at least 1")
        if self.forward_precision not in ("full", "mxfp6", "mxfp4"):
            raise ConfigError(f"unknown forward_precision {self.forward_precision!r}")
        if self.sample_mode not in ("sampled", "mean"):
            raise ConfigError(f"unknown sample_mode {self.sample_mode!r}")
        if self.optimizer not in ("lmd", "adamw", "gd", "mwu", "mwu-clip"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        if self.log_interval < 1:
            raise ConfigError("log_interval must be positive")


_TUPLE_KEYS = {"layer_sizes"}


def parse_config(text: str) -> RunConfig:
    """Parse the flat key-value config format; unknown keys are errors."""
    known = {f.name: f.type for f in fields(RunConfig)}
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected `key = value`, got {raw!r}")
        key, _, val = line.partition("=")
        key, val = key.strip(), val.strip()
        if key not in known:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        default = getattr(RunConfig, "__dataclass_fields__")[key].default
        try:
            if key in _TUPLE_KEYS:
                values[key] = tuple(int(x) for x in val.split(","))
            elif isinstance(default, bool):
                values[key] = val.lower() in ("1", "true", "yes")
            elif isinstance(default, int):
                values[key] = int(val)
            elif isinstance(default, float):
                values[key] = float(val)
            else:
                values[key] = val
        except ValueError as e:
            raise ConfigError(f"line {lineno}: bad value for {key!r}: {e}") from None
    try:
        return RunConfig(**values)
    except (TypeError, ValueError) as e:
        raise ConfigError(str(e)) from None


def load_config(path) -> RunConfig:
    return parse_config(Path(path).read_text())


def _fmt(x: float) -> str:
    return f"{x:.17g}"


@dataclass
class MetricRecord:
    step: int
    loss: float
    eval_metric: float
    weight_l2: float
    momentum_l2_pos: float
    lr: float

    def csv_row(self) -> str:
        return ",".join([str(self.step)] + [_fmt(v) for v in (
            self.loss, self.eval_metric, self.weight_l2, self.momentum_l2_pos, self.lr)])


def save_checkpoint(path, optimizer, extra_meta: dict | None = None):
    state = optimizer.state_dict()
    meta = {"kind": state["kind"], "meta": state["meta"]}
    if extra_meta:
        meta["extra"] = extra_meta
    np.savez(path, __meta__=np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8),
             **state["arrays"])


def load_checkpoint(path) -> dict:
    with np.load(path) as z:
        meta = json.loads(bytes(z["__meta__"].tobytes()).decode())
        arrays = {k: z[k] for k in z.files if k != "__meta__"}
    return {"kind": meta["kind"], "meta": meta["meta"], "arrays": arrays}


def _build_optimizer(config: RunConfig, model):
    if config.optimizer == "lmd":
        hyper = LmdHyper(
            eta=config.peak_lr, sigma=config.sigma,
            beta1=config.beta1, beta2=config.beta2,
            grad_clip=config.grad_clip or None,
            momentum_order=config.momentum_order,
            decay_mode=config.decay_mode, grad_scaling=config.grad_scaling)
        return LMD(model.params0, hyper)
    flat = {k: v for k, (v, _) in model.params0.items()}
    if config.optimizer == "adamw":
        return baselines.AdamW(flat, beta2=config.adamw_beta2,
                               weight_decay=config.weight_decay)
    if config.optimizer == "gd":
        return baselines.GD(flat)
    if config.optimizer == "mwu":
        return baselines.MWU(flat)
    if config.optimizer == "mwu-clip":
        return baselines.MWU(flat, clip=config.mwu_clip)
    raise ConfigError(f"unknown optimizer {config.optimizer!r}")


def _model_spec(config: RunConfig) -> ModelSpec:
    return ModelSpec(architecture=config.model, layer_sizes=tuple(config.layer_sizes),
                     activation=config.activation,
                     objective="regress" if config.task == "scaled-regression" else "classify",
                     vocab=config.vocab, dim=config.dim, seq_len=config.seq_len)


def _dataset(config: RunConfig):
    kw = {}
    if config.task == "char-sequence-copy":
        kw = {"seq_len": config.seq_len, "vocab": config.vocab}
    elif config.task == "scaled-regression":
        kw = {"target_scale": config.target_scale}
    return synthetic_tasks(config.task, config.n_train, config.seed, **kw)


class TrainResult:
    def __init__(self, records, csv_text, optimizer, out_dir):
        self.records = records
        self.csv_text = csv_text
        self.optimizer = optimizer
        self.out_dir = out_dir


def _lmd_contribution(optimizer: LMD, model, batch, hook, rng):
    """One Monte-Carlo contribution: sample, forward/backward, EG+- and decay
    gradients."""
    ctx = optimizer.sample(rng=rng, mode="sampled") if rng is not None \
        else optimizer.sample(mode="mean")
    loss, raw = model.loss_and_grads(ctx.theta_trick(), batch, hook=hook)
    if optimizer.hyper.grad_clip is not None:
        raw = clip_global_norm(raw, optimizer.hyper.grad_clip)
    return loss, optimizer.grad_transform(ctx, raw), optimizer.reg_gradient(ctx)


def train(config: RunConfig, write_files: bool = True) -> TrainResult:
    """Run the training loop; returns records and (optionally) writes
    metrics.csv, config.echo and checkpoint.npz under config.out_dir."""
    model = build(_model_spec(config), config.seed)
    data = _dataset(config)
    optimizer = _build_optimizer(config, model)
    hook = None if config.forward_precision == "full" else mx.make_hook(config.forward_precision)
    is_lmd = config.optimizer == "lmd"
    n_contrib = config.J * config.S

    batch_rng = np.random.Generator(np.random.Philox(key=[config.seed, 2]))
    X_train, y_train = data.train
    eval_batch = data.eval

    def minibatch():
        idx = batch_rng.integers(0, len(X_train), size=config.batch_size)
        return X_train[idx], y_train[idx]

    def record(step, loss, lr):
        eval_loss, eval_metric = model.eval_metric(optimizer.eval_params(), eval_batch, hook=hook)
        return MetricRecord(step=step, loss=loss, eval_metric=eval_metric,
                            weight_l2=optimizer.weight_l2(),
                            momentum_l2_pos=optimizer.momentum_l2_pos(), lr=lr)

    records = []
    loss0, _ = model.eval_metric(optimizer.eval_params(), data.train, hook=hook)
    records.append(record(0, loss0, lr_schedule(0, config.steps, config.warmup_steps,
                                                config.peak_lr, config.floor_frac)))

    abort = None
    for i in range(1, config.steps + 1):
        lr = lr_schedule(i, config.steps, config.warmup_steps, config.peak_lr,
                         config.floor_frac)
        batch = minibatch()
        try:
            if is_lmd:
                contribs = []
                for idx in range(n_contrib):
                    rng = None
                    if config.sample_mode == "sampled" and config.sigma > 0:
                        stream_id = (i - 1) * n_contrib + idx
                        rng = RngStream(seed=config.seed, stream_id=stream_id)
                    contribs.append(_lmd_contribution(optimizer, model, batch, hook, rng))
                loss = float(np.mean([c[0] for c in contribs]))
                g = LMD.aggregate([c[1] for c in contribs])
                r = LMD.aggregate([c[2] for c in contribs])
                if not math.isfinite(loss):
                    raise NumericalAbort(i)
                optimizer.step(g, r, lr=lr)
            else:
                loss, grads = model.loss_and_grads(optimizer.eval_params(), batch, hook=hook)
                if not math.isfinite(loss):
                    raise NumericalAbort(i)
                if config.grad_clip:
                    grads = clip_global_norm(grads, config.grad_clip)
                optimizer.step(grads, lr)
            if i % config.log_interval == 0 or i == config.steps:
                records.append(record(i, loss, lr))
        except NumericalAbort as e:
            abort = e
            break
        except FloatingPointError as e:
            abort = NumericalAbort(i, str(e))
            break

    csv_text = "\n".join([CSV_HEADER] + [r.csv_row() for r in records]) + "\n"

    out_dir = Path(config.out_dir)
    if write_files:
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "metrics.csv").write_text(csv_text)
        if abort is None:
            # never write a checkpoint for an aborted run
            save_checkpoint(out_dir / "checkpoint.npz", optimizer,
                            extra_meta={"steps": config.steps, "seed": config.seed})
    if abort is not None:
        raise abort

    return TrainResult(records, csv_text, optimizer, out_dir)


def read_metrics_csv(path) -> dict:
    """Load a metrics CSV into a dict of column -> float array."""
    lines = Path(path).read_text().strip().splitlines()
    if not lines or lines[0] != CSV_HEADER:
        raise ValueError(f"{path}: not a metrics CSV")
    cols = CSV_HEADER.split(",")
    data = {c: [] for c in cols}
    for line in lines[1:]:
        for c, v in zip(cols, line.split(",")):
            data[c].append(float(v))
    return {c: np.asarray(v) for c, v in data.items()}


def compare(run_dirs, out_dir) -> dict:
    """Align completed runs by step, write a combined CSV and charts.

    Returns {"table": combined rows, "csv": path, "figure": path}.
    """
    from .report import render_comparison

    run_dirs = [Path(d) for d in run_dirs]
    if len(run_dirs) < 2:
        raise ValueError("compare needs at least two runs")
    runs = {d.name: read_metrics_csv(d / "metrics.csv") for d in run_dirs}
    names = list(runs)
    steps0 = runs[names[0]]["step"]
    for n in names[1:]:
        if not np.array_equal(runs[n]["step"], steps0):
            raise ValueError(f"run {n!r} has a mismatched logging interval")

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    metric_cols = [c for c in CSV_HEADER.split(",") if c != "step"]
    header = ["step"] + [f"{n}.{c}" for n in names for c in metric_cols]
    rows = []
    for i, s in enumerate(steps0):
        row = [str(int(s))] + [_fmt(runs[n][c][i]) for n in names for c in metric_cols]
        rows.append(",".join(row))
    csv_path = out_dir / "combined.csv"
    csv_path.write_text("\n".join([",".join(header)] + rows) + "\n")
    fig_path = render_comparison(runs, out_dir / "compare.svg")
    return {"runs": names, "csv": csv_path, "figure": fig_path}
