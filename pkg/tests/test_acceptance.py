"""Acceptance gate: one test per shipped guarantee, one PASS line each.

Quantitative properties are checked against independent oracles (finite
differences, exhaustive enumeration, closed forms); qualitative dynamics
claims are checked on fixed desk-scale configurations over multiple seeds.
Run with `pytest tests/test_acceptance.py -v -s`.
"""

import math
import time
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from lmd.harness import RunConfig, train, _dataset, _model_spec
from lmd.lmd import LMD, LmdHyper, init_from_default
from lmd.lognormal import LogNormalSpec, RngStream, sample_noise
from lmd.models import ModelSpec, build, synthetic_tasks
from lmd.mx import MXFP4_E2M1, MXFP6_E2M3, decode_element, encode_element, quantize_block


def ok(num, name):
    print(f"\n[{num:02d}] {name}: PASS")


def fresh_params(model):
    return {k: v.copy() for k, (v, _) in model.params0.items()}


def perturbed_loss(model, params, batch, key, idx, delta):
    p = {n: v.copy() for n, v in params.items()}
    p[key][idx] += delta
    return model.loss_and_grads(p, batch)[0]


def test_c01_gradient_correctness():
    # autodiff vs central finite differences, max relative error < 1e-6
    t0 = time.time()
    worst = 0.0
    eps = 1e-6

    mlp = build(ModelSpec(architecture="mlp", layer_sizes=(3, 6, 2)), seed=5)
    rng = np.random.default_rng(0)
    batch = (rng.standard_normal((8, 3)), rng.integers(0, 2, 8))
    params = fresh_params(mlp)
    _, grads = mlp.loss_and_grads(params, batch)
    for k, v in params.items():
        it = np.nditer(v, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            fd = (perturbed_loss(mlp, params, batch, k, idx, eps)
                  - perturbed_loss(mlp, params, batch, k, idx, -eps)) / (2 * eps)
            worst = max(worst, abs(grads[k][idx] - fd) / max(abs(fd), 1e-4))

    tf = build(ModelSpec(architecture="tiny-transformer", vocab=5, dim=8, seq_len=4), seed=6)
    seqs = rng.integers(0, 5, (2, 4))
    targets = rng.integers(0, 5, (2, 4))
    tbatch = (seqs, targets)
    tparams = fresh_params(tf)
    _, tgrads = tf.loss_and_grads(tparams, tbatch)
    coord_rng = np.random.default_rng(1)
    for k, v in tparams.items():
        flat = coord_rng.choice(v.size, size=min(4, v.size), replace=False)
        for f in flat:
            idx = np.unravel_index(f, v.shape)
            fd = (perturbed_loss(tf, tparams, tbatch, k, idx, eps)
                  - perturbed_loss(tf, tparams, tbatch, k, idx, -eps)) / (2 * eps)
            worst = max(worst, abs(tgrads[k][idx] - fd) / max(abs(fd), 1e-4))

    elapsed = time.time() - t0
    assert worst < 1e-6, f"max relative error {worst:.3g}"
    assert elapsed < 60, f"took {elapsed:.1f}s"
    ok(1, f"gradient correctness (max rel err {worst:.2e}, {elapsed:.1f}s)")


def test_c02_eg_pm_log_space_gradient():
    # sigma = 0: transformed gradients match finite differences of
    # mu -> loss(exp(mu_plus) - exp(mu_minus)), relative error < 1e-5
    h = LmdHyper(sigma=0.0, m_r=0.01)
    theta0 = np.array([0.8, -0.3, 0.1, 1.7, -0.05])
    opt = LMD({"w": (theta0, "weight")}, h)
    ctx = opt.sample(mode="sampled")
    theta = ctx.theta_plus["w"] - ctx.theta_minus["w"]
    g = opt.grad_transform(ctx, {"w": np.cos(theta) + theta})

    def loss(mu_p, mu_m):
        t = np.exp(mu_p) - np.exp(mu_m)
        return float(np.sum(np.sin(t) + 0.5 * t * t))

    mu_p = np.log(opt.groups["w"]["m_plus"])
    mu_m = np.log(opt.groups["w"]["m_minus"])
    eps, worst = 1e-6, 0.0
    for i in range(len(theta0)):
        for half, mu in ((0, mu_p), (1, mu_m)):
            up, dn = mu.copy(), mu.copy()
            up[i] += eps
            dn[i] -= eps
            fd = ((loss(up, mu_m) if half == 0 else loss(mu_p, up))
                  - (loss(dn, mu_m) if half == 0 else loss(mu_p, dn))) / (2 * eps)
            worst = max(worst, abs(g["w"][half][i] - fd) / max(abs(fd), 1e-8))
    assert worst < 1e-5, worst
    ok(2, f"EG+- log-space gradient (max rel err {worst:.2e})")


def test_c03_decay_fixed_point():
    # gradient-free sigma=0 trajectory matches the geometric recursion
    # log m <- (1-a) log m + a log m_r, a = -eta / log m_r, to 1e-12 per step
    eta, m_r = 0.1, math.exp(-2)
    h = LmdHyper(eta=eta, sigma=0.0, m_r=m_r)
    opt = LMD({"w": (np.zeros(1), "weight")}, h)
    opt.groups["w"]["m_plus"][:] = 1.0
    alpha = -eta / math.log(m_r)
    log_m, worst = 0.0, 0.0
    zeros = {"w": (np.zeros(1), np.zeros(1))}
    for _ in range(1000):
        ctx = opt.sample(mode="sampled")
        opt.step(zeros, opt.reg_gradient(ctx))
        log_m = (1 - alpha) * log_m + alpha * math.log(m_r)
        worst = max(worst, abs(math.log(opt.groups["w"]["m_plus"][0]) - log_m))
    assert worst < 1e-12, worst
    ok(3, f"multiplicative decay fixed point (max dev {worst:.2e} over 1000 steps)")


def test_c04_regularizer_anchors():
    h = LmdHyper()
    opt = LMD({"w": (np.ones(1), "weight"), "s": (np.ones(1), "scale")}, h)

    def r_at(theta_w, theta_s):
        from lmd.lmd import SampleContext
        ctx = SampleContext(mode="mean",
                            theta_plus={"w": np.array([theta_w]), "s": np.array([theta_s])},
                            theta_minus={"w": np.array([theta_w]), "s": np.array([0.0])})
        return opt.reg_gradient(ctx)

    assert r_at(1.0, 1.0)["w"][0][0] == 1.0
    assert r_at(h.m_r, 1.0)["w"][0][0] == 0.0
    assert r_at(1.0, 2.0)["s"][0][0] == 1.0
    ok(4, "regularizer anchors r(1)=1, r(m_r)=0, scale r(2)=1 (exact)")


def test_c05_initialization_identity():
    h = LmdHyper()
    rng = np.random.default_rng(0)
    theta0 = rng.uniform(-10, 10, 10**4)
    m_plus, m_minus = init_from_default(theta0, h)
    worst = float(np.max(np.abs((m_plus - m_minus) * h.mean_factor - theta0)))
    assert worst < 1e-12, worst
    ok(5, f"initialization mean identity (max dev {worst:.2e} over 1e4 draws)")


def test_c06_log_normal_moments():
    sigma, n = 0.125, 10**6
    samples = sample_noise(LogNormalSpec(sigma=sigma), n, RngStream(seed=2))
    mean_cf = math.exp(sigma**2 / 2)
    std_cf = mean_cf * math.sqrt(math.expm1(sigma**2))
    se_mean = samples.std(ddof=1) / math.sqrt(n)
    assert abs(samples.mean() - mean_cf) < 3 * se_mean
    v = (samples - samples.mean()) ** 2
    se_std = v.std(ddof=1) / math.sqrt(n) / (2 * std_cf)
    assert abs(samples.std(ddof=1) - std_cf) < 3 * se_std
    ratio_cf = std_cf / mean_cf
    for m in (0.01, 1.0, 100.0):
        scaled = m * samples[:10**5]
        ratio = scaled.std(ddof=1) / scaled.mean()
        assert abs(ratio - ratio_cf) < 3 * ratio_cf / math.sqrt(2 * 10**5) + 1e-3, m
    ok(6, "log-normal moments within 3 SE; std/mean ratio scale-free")


def test_c07_mx_codec():
    for fmt in (MXFP6_E2M3, MXFP4_E2M1):
        for code in range(fmt.num_codes):
            v = float(decode_element(code, fmt))
            assert float(decode_element(int(encode_element(v, fmt)), fmt)) == v
    rng = np.random.default_rng(0)
    violations = 0
    for fmt in (MXFP6_E2M3, MXFP4_E2M1):
        table = fmt.decode_table()
        for _ in range(10):
            vals = rng.uniform(-9, 9, 10**5)
            decoded = table[encode_element(vals, fmt)]
            clipped = np.clip(vals, -fmt.max_value, fmt.max_value)
            best = np.min(np.abs(clipped[:, None] - table[None, :]), axis=1)
            violations += int(np.sum(np.abs(clipped - decoded) > best))
    assert violations == 0
    for fmt in (MXFP6_E2M3, MXFP4_E2M1):
        for s in (-4, 0, 6):
            vals = rng.uniform(-1, 1, 32) * 2.0**s * fmt.max_value * 3
            block = quantize_block(vals, fmt)
            grid_max = fmt.max_value * 2.0**block.scale_exp
            decoded = fmt.decode_table()[block.codes] * 2.0**block.scale_exp
            assert np.max(np.abs(decoded)) <= grid_max
    ok(7, "MX codec: exhaustive round trip, 1e6-value nearest oracle, block max bound")


def _run(**kw):
    base = dict(log_interval=1000, out_dir="unused")
    base.update(kw)
    return train(RunConfig(**base), write_files=False)


def _weight_ratio(result):
    return result.records[-1].weight_l2 / result.records[0].weight_l2


def test_c08_unbounded_growth_vs_lmd():
    # growth-demanding regression: unclipped MWU inflates its weight norm,
    # LMD keeps it near the initialization scale
    cfg = dict(task="scaled-regression", target_scale=8.0, layer_sizes=(2, 8, 1),
               steps=1000, seed=0)
    mwu = _run(optimizer="mwu", peak_lr=0.01, **cfg)
    lmd = _run(optimizer="lmd", peak_lr=0.005, **cfg)
    r_mwu, r_lmd = _weight_ratio(mwu), _weight_ratio(lmd)
    assert r_mwu >= 2 * r_lmd, (r_mwu, r_lmd)
    assert 0.5 <= r_lmd <= 2.0, r_lmd
    ok(8, f"MWU growth {r_mwu:.2f}x vs LMD {r_lmd:.2f}x (>= 2x separation)")


def test_c09_mxfp6_forward_matches_full_precision():
    diffs = []
    for seed in (0, 1, 2):
        cfg = dict(task="two-class-gaussians", layer_sizes=(2, 32, 2),
                   optimizer="lmd", steps=300, seed=seed)
        full = _run(forward_precision="full", **cfg)
        mx6 = _run(forward_precision="mxfp6", **cfg)
        rel = abs(mx6.records[-1].loss - full.records[-1].loss) / abs(full.records[-1].loss)
        diffs.append(rel)
        assert rel < 0.05, (seed, rel)
    ok(9, "MXFP6 forward within 5% of full precision "
          f"(rel diffs {', '.join(f'{d:.1%}' for d in diffs)})")


def test_c10_ablation_grid():
    cells = [("multiplicative", "by-theta"), ("multiplicative", "none"),
             ("additive", "by-theta"), ("additive", "none")]
    wins = 0
    for seed in (0, 1, 2):
        finals = {}
        for decay, scaling in cells:
            res = _run(task="scaled-regression", target_scale=8.0,
                       layer_sizes=(2, 8, 1), optimizer="lmd", steps=500,
                       decay_mode=decay, grad_scaling=scaling, seed=seed)
            finals[(decay, scaling)] = res.records[-1].weight_l2
        if min(finals, key=finals.get) == ("multiplicative", "by-theta"):
            wins += 1
    assert wins >= 2, wins
    ok(10, f"(multiplicative, gradient-scaled) smallest weight norm in {wins}/3 seeds")


def test_c11_sampled_vs_mean_under_mxfp4():
    # noise dither under coarse MXFP4 grids: sampled training ends with a
    # weight norm no larger than mean-mode training
    wins = 0
    margins = []
    for seed in (0, 1, 2):
        cfg = dict(task="scaled-regression", target_scale=0.5,
                   layer_sizes=(2, 16, 1), optimizer="lmd", steps=2000,
                   forward_precision="mxfp4", floor_frac=1.0, sigma=0.25,
                   seed=seed)
        sampled = _run(sample_mode="sampled", **cfg)
        mean = _run(sample_mode="mean", **cfg)
        margins.append(mean.records[-1].weight_l2 - sampled.records[-1].weight_l2)
        if sampled.records[-1].weight_l2 <= mean.records[-1].weight_l2:
            wins += 1
    assert wins >= 2, (wins, margins)
    ok(11, f"sampled <= mean weight norm under MXFP4 in {wins}/3 seeds")


def test_c12_determinism():
    cfg = dict(task="two-class-gaussians", layer_sizes=(2, 16, 2),
               optimizer="lmd", steps=30, J=2, S=2, log_interval=10)
    a = _run(**cfg)
    b = _run(**cfg)
    assert a.csv_text == b.csv_text
    rng = np.random.default_rng(0)
    contribs = [{"w": (rng.standard_normal(64), rng.standard_normal(64))}
                for _ in range(16)]
    serial = LMD.aggregate(contribs)
    with ThreadPoolExecutor(max_workers=8) as pool:
        indexed = dict(pool.map(lambda i: (i, contribs[i]), range(16)))
    parallel = LMD.aggregate([indexed[i] for i in range(16)])
    assert np.array_equal(serial["w"][0], parallel["w"][0])
    assert np.array_equal(serial["w"][1], parallel["w"][1])
    ok(12, "byte-identical CSV replay; parallel == serial aggregation bit-for-bit")


def test_c13_convergence_sanity():
    cfg = RunConfig(task="two-class-gaussians", layer_sizes=(2, 32, 2),
                    optimizer="lmd", steps=500, log_interval=500)
    result = train(cfg, write_files=False)
    model = build(_model_spec(cfg), cfg.seed)
    data = _dataset(cfg)
    _, train_acc = model.eval_metric(result.optimizer.eval_params(), data.train)
    assert train_acc >= 0.95, train_acc
    for optimizer, lr in (("adamw", 0.001), ("mwu-clip", 0.01)):
        res = _run(task="two-class-gaussians", layer_sizes=(2, 32, 2),
                   optimizer=optimizer, peak_lr=lr, steps=500)
        assert np.isfinite(res.records[-1].loss)
    ok(13, f"LMD train accuracy {train_acc:.1%} in 500 steps; baselines complete")
