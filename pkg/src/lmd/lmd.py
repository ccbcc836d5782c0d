"""Log-normal multiplicative dynamics (LMD) optimizer.

Every signed weight theta is carried as a pair of nonnegative medians
(m_plus, m_minus) with theta_trick = theta_plus - theta_minus (the EG+- trick),
so a multiplicative update can express sign changes. One training contribution
looks like:

    eps ~ LogN(0, sigma^2)        per entry, for both halves
    theta = m * eps               multiplicative noise injection
    g = theta * [I; -I]^T grad    loss gradient scaled by the weight
    r = coeff * (log theta - log m_r)   multiplicative weight decay gradient
    nu-EMA + sign step: m *= exp(-eta * (sign(nu_temp) + r))

Entries that are exactly zero (the negative half of scale parameters) stay
zero under every update: noise, decay and the exponential step are all
multiplicative.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .lognormal import LogNormalSpec, RngStream, kl_equal_sigma, sample_noise

DEFAULT_SIGMA = 0.125


def default_prior_median(sigma: float = DEFAULT_SIGMA) -> float:
    """Reference prior median 0.01 * exp(sigma^2 / 2)."""
    return 0.01 * math.exp(0.5 * sigma**2)


@dataclass(frozen=True)
class LmdHyper:
    """LMD hyperparameters.

    The temperature is never stored: it is recomputed from (sigma, m_r) via
    the normalization r(1) = 1, which gives tau = -sigma^2 / log(m_r) for
    m_r < 1, i.e. a decay coefficient tau / sigma^2 = -1 / log(m_r) that stays
    well defined at sigma = 0.
    """

    eta: float = 0.005
    sigma: float = DEFAULT_SIGMA
    m_r: float = field(default_factory=default_prior_median)
    beta1: float = 0.95
    beta2: float = 0.99
    grad_clip: float | None = None
    # "lion": nu_temp interpolates the pre-update momentum with the fresh
    # gradient before nu's own EMA update. "listing": nu updates first and
    # nu_temp reads the updated value.
    momentum_order: str = "lion"
    decay_mode: str = "multiplicative"  # or "additive"
    grad_scaling: str = "by-theta"  # or "none"

    def __post_init__(self):
        if not 0 < self.m_r < 1:
            raise ValueError(f"m_r must lie in (0, 1), got {self.m_r}")
        if self.sigma < 0:
            raise ValueError("sigma must be nonnegative")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("betas must lie in [0, 1)")
        if self.momentum_order not in ("lion", "listing"):
            raise ValueError(f"unknown momentum_order {self.momentum_order!r}")
        if self.decay_mode not in ("multiplicative", "additive"):
            raise ValueError(f"unknown decay_mode {self.decay_mode!r}")
        if self.grad_scaling not in ("by-theta", "none"):
            raise ValueError(f"unknown grad_scaling {self.grad_scaling!r}")

    @property
    def mean_factor(self) -> float:
        return math.exp(0.5 * self.sigma**2)

    @property
    def tau(self) -> float:
        return -(self.sigma**2) / math.log(self.m_r) if self.sigma > 0 else 0.0

    @property
    def reg_coeff(self) -> float:
        """tau / sigma^2 for the weight groups: -1 / log(m_r)."""
        return -1.0 / math.log(self.m_r)

    # Scale parameters (normalization gains initialized to 1) use their own
    # prior median exp(-sigma^2/2) so the sampled mean is exactly 1, and a
    # temperature chosen so the decay gradient hits 1 at theta = 2.
    @property
    def m_r_scale(self) -> float:
        return math.exp(-0.5 * self.sigma**2)

    @property
    def reg_coeff_scale(self) -> float:
        """tau_scale / sigma^2 = 1 / (log 2 + sigma^2 / 2)."""
        return 1.0 / (math.log(2.0) + 0.5 * self.sigma**2)

    @property
    def tau_scale(self) -> float:
        return self.sigma**2 * self.reg_coeff_scale if self.sigma > 0 else 0.0


def init_from_default(theta0: np.ndarray, hyper: LmdHyper):
    """Split a default initialization into (m_plus, m_minus).

    The positive part of theta0 lands in m_plus (discounted by exp(-sigma^2/2)
    so the sampled mean is preserved), the negative part in m_minus, and both
    halves get the prior median added so E[theta_plus - theta_minus] = theta0
    exactly.
    """
    theta0 = np.asarray(theta0, dtype=np.float64)
    shrink = math.exp(-0.5 * hyper.sigma**2)
    m_plus = np.where(theta0 > 0, theta0 * shrink + hyper.m_r, hyper.m_r)
    m_minus = np.where(theta0 > 0, hyper.m_r, -theta0 * shrink + hyper.m_r)
    return m_plus, m_minus


def init_scale_param(shape, hyper: LmdHyper):
    """(m_plus, m_minus) for gains initialized to one: mean exactly 1,
    negative half pinned at zero."""
    m_plus = np.full(shape, math.exp(-0.5 * hyper.sigma**2))
    m_minus = np.zeros(shape)
    return m_plus, m_minus


@dataclass
class SampleContext:
    """Sampled (or mean-mode) weights for one forward/backward evaluation."""

    mode: str  # "sampled" or "mean"
    theta_plus: dict
    theta_minus: dict

    def theta_trick(self) -> dict:
        return {k: self.theta_plus[k] - self.theta_minus[k] for k in self.theta_plus}


def clip_global_norm(grads: dict, max_norm: float) -> dict:
    """Scale a gradient dict so its global l2 norm is at most max_norm."""
    total = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if total <= max_norm or total == 0.0:
        return grads
    s = max_norm / total
    return {k: g * s for k, g in grads.items()}


class LMD:
    """The optimizer. Holds (m_plus, m_minus, nu_plus, nu_minus) per tensor.

    ``params`` maps name -> (theta0 array, kind) with kind in
    {"weight", "bias", "scale"}; scale groups get the special prior.
    """

    def __init__(self, params: dict, hyper: LmdHyper | None = None):
        self.hyper = hyper or LmdHyper()
        self.groups = {}
        self.step_count = 0
        for name, (theta0, kind) in params.items():
            if kind not in ("weight", "bias", "scale"):
                raise ValueError(f"parameter {name!r} has unknown kind {kind!r}")
            is_scale = kind == "scale"
            if is_scale:
                m_plus, m_minus = init_scale_param(np.shape(theta0), self.hyper)
            else:
                m_plus, m_minus = init_from_default(theta0, self.hyper)
            self.groups[name] = {
                "is_scale": is_scale,
                "m_plus": m_plus,
                "m_minus": m_minus,
                "nu_plus": np.zeros_like(m_plus),
                "nu_minus": np.zeros_like(m_minus),
            }

    # -- sampling ---------------------------------------------------------

    def sample(self, rng: RngStream | np.random.Generator | None = None,
               mode: str = "sampled") -> SampleContext:
        """Draw theta = m * eps, or theta = m * exp(sigma^2/2) in mean mode."""
        if mode not in ("sampled", "mean"):
            raise ValueError(f"unknown sample mode {mode!r}")
        sigma = self.hyper.sigma
        if mode == "mean" or sigma == 0.0:
            f = self.hyper.mean_factor if mode == "mean" else 1.0
            tp = {k: g["m_plus"] * f for k, g in self.groups.items()}
            tm = {k: g["m_minus"] * f for k, g in self.groups.items()}
            return SampleContext(mode=mode, theta_plus=tp, theta_minus=tm)
        if rng is None:
            raise ValueError("sampled mode needs an rng")
        gen = rng.generator() if isinstance(rng, RngStream) else rng
        spec = LogNormalSpec(sigma=sigma)
        tp, tm = {}, {}
        for k, g in self.groups.items():
            tp[k] = g["m_plus"] * sample_noise(spec, g["m_plus"].shape, gen)
            tm[k] = g["m_minus"] * sample_noise(spec, g["m_minus"].shape, gen)
        return SampleContext(mode="sampled", theta_plus=tp, theta_minus=tm)

    # -- per-contribution gradients ---------------------------------------

    def grad_transform(self, ctx: SampleContext, grads: dict) -> dict:
        """EG+- gradient: g_plus = theta_plus * grad, g_minus = -theta_minus * grad.

        ``grads`` holds d(loss)/d(theta_trick) per tensor. With the "none"
        gradient-scaling ablation the theta factor is dropped.
        """
        out = {}
        for k, grad in grads.items():
            if grad.shape != ctx.theta_plus[k].shape:
                raise ValueError(f"grad_transform: shape mismatch for {k!r}")
            if self.hyper.grad_scaling == "by-theta":
                out[k] = (ctx.theta_plus[k] * grad, -ctx.theta_minus[k] * grad)
            else:
                out[k] = (grad.copy(), -grad)
        return out

    def _group_reg(self, group):
        h = self.hyper
        if group["is_scale"]:
            return h.m_r_scale, h.reg_coeff_scale
        return h.m_r, h.reg_coeff

    def reg_gradient(self, ctx: SampleContext) -> dict:
        """Decay gradient per half; entries with m = 0 get r = 0."""
        out = {}
        for k, g in self.groups.items():
            m_r, coeff = self._group_reg(g)
            halves = []
            for m, theta in ((g["m_plus"], ctx.theta_plus[k]),
                             (g["m_minus"], ctx.theta_minus[k])):
                live = m > 0
                if self.hyper.decay_mode == "multiplicative":
                    r = np.where(live, coeff * (np.log(np.where(live, theta, 1.0)) - math.log(m_r)), 0.0)
                else:
                    r = np.where(live, (theta - m_r) / (1.0 - m_r), 0.0)
                halves.append(r)
            out[k] = tuple(halves)
        return out

    @staticmethod
    def aggregate(contributions: list) -> dict:
        """Arithmetic mean of per-sample dicts of (plus, minus) pairs, summed
        in list order so parallel and serial evaluation agree bit-for-bit."""
        if not contributions:
            raise ValueError("aggregate: empty contribution set")
        acc = {k: [p.copy(), m.copy()] for k, (p, m) in contributions[0].items()}
        for c in contributions[1:]:
            for k, (p, m) in c.items():
                acc[k][0] += p
                acc[k][1] += m
        n = len(contributions)
        return {k: (p / n, m / n) for k, (p, m) in acc.items()}

    # -- update -----------------------------------------------------------

    def step(self, g: dict, r: dict, lr: float | None = None):
        """One sign-momentum multiplicative update; rejects non-finite input
        before touching any state."""
        h = self.hyper
        eta = h.eta if lr is None else lr
        for k in self.groups:
            for arr in (*g[k], *r[k]):
                if not np.all(np.isfinite(arr)):
                    raise FloatingPointError(f"step: non-finite update input for {k!r}")
        for k, group in self.groups.items():
            for side, gk, rk in (("plus", g[k][0], r[k][0]), ("minus", g[k][1], r[k][1])):
                nu = group[f"nu_{side}"]
                if h.momentum_order == "lion":
                    nu_temp = h.beta1 * nu + (1 - h.beta1) * gk
                    nu_new = h.beta2 * nu + (1 - h.beta2) * gk
                else:
                    nu_new = h.beta2 * nu + (1 - h.beta2) * gk
                    nu_temp = h.beta1 * nu_new + (1 - h.beta1) * gk
                group[f"nu_{side}"] = nu_new
                group[f"m_{side}"] = group[f"m_{side}"] * np.exp(-eta * (np.sign(nu_temp) + rk))
        self.step_count += 1

    # -- diagnostics ------------------------------------------------------

    def elbo_diagnostic(self, loss_samples) -> float:
        """MC mean of the loss plus the closed-form tau-weighted KL to the
        prior (zero-median entries carry no KL)."""
        loss_samples = np.asarray(loss_samples, dtype=np.float64)
        if loss_samples.size == 0:
            raise ValueError("elbo_diagnostic needs at least one loss sample")
        h = self.hyper
        kl = 0.0
        if h.sigma > 0:
            for g in self.groups.values():
                m_r = h.m_r_scale if g["is_scale"] else h.m_r
                tau = h.tau_scale if g["is_scale"] else h.tau
                for side in ("m_plus", "m_minus"):
                    m = g[side]
                    live = m > 0
                    if np.any(live):
                        kl += tau * float(np.sum(
                            kl_equal_sigma(np.log(m[live]), math.log(m_r), h.sigma)))
        return float(loss_samples.mean()) + kl

    def weight_l2(self) -> float:
        """l2 norm of the mean weights (m_plus - m_minus) * exp(sigma^2/2)."""
        f = self.hyper.mean_factor
        total = sum(float(np.sum(((g["m_plus"] - g["m_minus"]) * f) ** 2))
                    for g in self.groups.values())
        return math.sqrt(total)

    def momentum_l2_pos(self) -> float:
        """l2 norm of the positive-half momentum."""
        return math.sqrt(sum(float(np.sum(g["nu_plus"] ** 2)) for g in self.groups.values()))

    def eval_params(self) -> dict:
        """Mean-mode weights theta_trick for evaluation."""
        return self.sample(mode="mean").theta_trick()

    # -- checkpointing ----------------------------------------------------

    def state_dict(self) -> dict:
        arrays = {}
        meta = {"step_count": self.step_count,
                "hyper": {k: getattr(self.hyper, k) for k in (
                    "eta", "sigma", "m_r", "beta1", "beta2", "grad_clip",
                    "momentum_order", "decay_mode", "grad_scaling")},
                "groups": {k: {"is_scale": g["is_scale"]} for k, g in self.groups.items()}}
        for name, g in self.groups.items():
            for key in ("m_plus", "m_minus", "nu_plus", "nu_minus"):
                arrays[f"{name}/{key}"] = g[key]
        return {"kind": "lmd", "meta": meta, "arrays": arrays}

    def load_state_dict(self, state: dict):
        if state.get("kind") != "lmd":
            raise ValueError("checkpoint is not an LMD state")
        meta = state["meta"]
        self.hyper = replace(LmdHyper(), **meta["hyper"])
        self.step_count = int(meta["step_count"])
        self.groups = {}
        for name, ginfo in meta["groups"].items():
            self.groups[name] = {"is_scale": bool(ginfo["is_scale"])}
            for key in ("m_plus", "m_minus", "nu_plus", "nu_minus"):
                self.groups[name][key] = np.array(state["arrays"][f"{name}/{key}"])
