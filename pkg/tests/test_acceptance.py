"""Acceptance suite: one test per criterion, at the stated tolerances.

Run with `pytest tests/test_acceptance.py -v -s` to see one pass line per
criterion (a pytest FAILED line is the fail signal). The sweeps here are the
full-size ones; the per-module tests cover the same machinery at small scale.
"""

import math
import time

import numpy as np
import pytest

from dispersionlab import autograd as ag
from dispersionlab import traced
from dispersionlab.analysis import (
    BoundedSampler,
    complexity_estimate,
    instrumented_counts,
    measure_dispersion,
    remark_counterexample,
)
from dispersionlab.attention import (
    SemaParams,
    WindowSpec,
    homogeneous_mix,
    sema_attention,
    sema_attention_full,
    softmax_attention,
    window_attention,
)
from dispersionlab.model import (
    ModelConfig,
    SyntheticTask,
    init_params,
    parameter_count,
    receptive_field_grid,
    stage_grids,
    train_toy,
    zero_lepe,
)
from dispersionlab.posenc import DepthwiseKernel, GridSpec
from dispersionlab.rng import rng_for
from dispersionlab.ssm import SsmParams, mamba_as_attention, ssm_closed_form, ssm_scan

SWEEP_N = [64, 128, 256, 512, 1024, 2048, 4096]


def report(num, text):
    print(f"\ncriterion {num:02d} PASS: {text}")


def test_criterion_01_softmax_dispersion_law():
    t0 = time.time()
    sampler = BoundedSampler(d=16, logit_bound=1.0)
    rep = measure_dispersion("softmax", None, sampler, SWEEP_N, trials=32, seed=42)
    elapsed = time.time() - t0
    assert -1.15 <= rep.slope <= -0.85, rep.slope
    # measure_dispersion raises on any out-of-bounds coefficient, so reaching
    # here means 100% containment; the recorded envelopes must agree
    for mx, mn, hi, lo in zip(rep.max_coeff, rep.min_coeff, rep.upper_bound, rep.lower_bound):
        assert lo <= mn <= mx <= hi
    assert elapsed < 120.0
    report(1, f"softmax slope {rep.slope:+.3f} in [-1.15, -0.85], bounds held "
              f"({elapsed:.1f}s)")


def test_criterion_02_linear_dispersion_law():
    sampler = BoundedSampler(d=16, logit_bound=1.0)
    rep = measure_dispersion("linear", None, sampler, SWEEP_N, trials=32, seed=42)
    assert -1.15 <= rep.slope <= -0.85, rep.slope
    for mx, mn, hi, lo in zip(rep.max_coeff, rep.min_coeff, rep.upper_bound, rep.lower_bound):
        assert lo <= mn <= mx <= hi
    report(2, f"linear slope {rep.slope:+.3f} in [-1.15, -0.85], bounds held")


def test_criterion_03_window_non_dispersion():
    sampler = BoundedSampler(d=16, logit_bound=1.0, tile_rows=8)
    rep = measure_dispersion("window", None, sampler, SWEEP_N, trials=8, seed=42,
                             win=WindowSpec(8))
    first = rep.max_coeff[0]
    assert all(m == first for m in rep.max_coeff)  # bitwise constant
    assert rep.slope == 0.0
    report(3, f"window max coefficient bitwise constant ({first:.6f}) across "
              f"n=64..4096, slope exactly 0")


def test_criterion_04_remark_counterexample():
    limit = 6.0 / math.pi**2
    values = []
    for n in (1, 2, 3, 10, 100, 1000, 10**4, 10**5, 10**6):
        first, bound = remark_counterexample(n)
        assert bound == pytest.approx(limit)
        assert first > limit
        values.append(first)
    assert all(a > b for a, b in zip(values, values[1:]))  # strictly decreasing
    assert abs(values[-1] - limit) < 1e-5
    report(4, f"first coefficient stays above 6/pi^2 and reaches it within "
              f"{abs(values[-1] - limit):.1e} at n=1e6")


def test_criterion_05_ssm_triple_equivalence():
    t0 = time.time()
    worst = 0.0
    for inst in range(100):
        rng = rng_for(42, "acceptance-ssm", inst)
        n = int(rng.integers(1, 17))
        d_state = int(rng.integers(1, 9))
        channels = int(rng.integers(1, 9))
        x = rng.standard_normal((n, channels))
        p = SsmParams.random(rng, n, d_state, channels)
        h_seq, y = ssm_scan(p, x)
        for m in range(1, n + 1):
            h_m, y_m = ssm_closed_form(p, x, m)
            worst = max(worst,
                        float(np.abs(h_m.array - h_seq[m - 1].array).max()),
                        float(np.abs(y_m.array[0] - y.array[m - 1]).max()))
        p0 = SsmParams(p.A_tilde, p.B, p.C_out, p.D, p.Delta, np.zeros_like(p.h0))
        _, y0 = ssm_scan(p0, x)
        worst = max(worst, float(np.abs(mamba_as_attention(p0, x).array - y0.array).max()))
    elapsed = time.time() - t0
    assert worst < 1e-12, worst
    assert elapsed < 30.0
    report(5, f"scan/closed-form/attention-form max abs diff {worst:.2e} over "
              f"100 instances ({elapsed:.1f}s)")


def test_criterion_06_sema_decomposition():
    rng = rng_for(42, "acceptance-sema")
    for _ in range(50):
        n = int(rng.choice([4, 8, 12]))
        d = int(rng.integers(2, 6))
        w = WindowSpec(int(rng.choice([1, 2, 4])))
        q, k, v = rng.standard_normal((3, n, d))
        sema = sema_attention(q, k, v, w).array
        rebuilt = window_attention(q, k, v, w).array + homogeneous_mix(v).array
        assert np.array_equal(sema, rebuilt)  # diff exactly 0.0

    # full pipeline with LePE zeroed and a single window collapses to
    # softmax attention over the rotated projections plus the value mean
    n, d = 8, 4
    x = rng.standard_normal((n, d))
    wq, wk, wv = rng.standard_normal((3, d, d))
    params = SemaParams(wq, wk, wv, DepthwiseKernel.zeros(d))
    out = sema_attention_full(x, params, WindowSpec(n), GridSpec.linear(n)).array
    q, k, v = x @ wq, x @ wk, x @ wv
    t = np.arange(d // 2)
    ang = np.arange(float(n))[:, None] * (10000.0 ** (-2.0 * t / d))[None, :]

    def rot(m):
        out_ = np.empty_like(m)
        out_[:, 0::2] = m[:, 0::2] * np.cos(ang) - m[:, 1::2] * np.sin(ang)
        out_[:, 1::2] = m[:, 0::2] * np.sin(ang) + m[:, 1::2] * np.cos(ang)
        return out_

    expect = softmax_attention(rot(q), rot(k), v).array + v.mean(axis=0)
    diff = np.abs(out - expect).max()
    assert diff < 1e-12, diff
    report(6, f"sema == window + mix exactly on 50 instances; full pipeline "
              f"collapse diff {diff:.2e} < 1e-12")


def test_criterion_07_gradchecks_all_variants():
    t0 = time.time()
    rng = rng_for(7, "acceptance-gradcheck")
    q, k, v = rng.standard_normal((3, 8, 4))
    qa, ka = np.abs(q), np.abs(k)  # focused features need nonnegative support
    cases = {
        "softmax": (lambda a, b, c: ag.sum_all(traced.softmax_attention(a, b, c)), [q, k, v]),
        "linear": (lambda a, b, c: ag.sum_all(traced.linear_attention(a, b, c)), [q, k, v]),
        "focused": (lambda a, b, c: ag.sum_all(traced.focused_attention(a, b, c, 3)), [qa, ka, v]),
        "window": (lambda a, b, c: ag.sum_all(traced.window_attention(a, b, c, 4)), [q, k, v]),
        "sema": (lambda a, b, c: ag.sum_all(traced.sema_attention(a, b, c, 4)), [q, k, v]),
        "mila": (lambda a, b, c: ag.sum_all(traced.mila_attention(a, b, c)), [q, k, v]),
    }
    errs = {}
    for name, (fn, inputs) in cases.items():
        rep = ag.gradcheck(fn, inputs, step=1e-5, tol=1e-5)
        assert rep.passed, f"{name}: {rep.max_rel_err}"
        errs[name] = rep.max_rel_err
    elapsed = time.time() - t0
    assert elapsed < 60.0
    worst = max(errs, key=errs.get)
    report(7, f"six variants pass at 1e-5 (worst {worst}: {errs[worst]:.2e}; "
              f"{elapsed:.1f}s)")


def test_criterion_08_complexity_scaling():
    import gc

    n_values = [256, 512, 1024, 2048, 4096, 8192]
    d, w = 64, 8  # head-dim-scale width keeps compute above dispatch overhead
    times = {"sema": [], "full": []}
    for n in n_values:
        rng = rng_for(42, "acceptance-bench", n)
        q, k, v = rng.standard_normal((3, n, d))
        repeats = max(3, (1 << 22) // (n * n))  # more reps where calls are short
        for name, fn in (("sema", lambda: sema_attention(q, k, v, WindowSpec(w))),
                         ("full", lambda: softmax_attention(q, k, v))):
            gc.collect()
            fn()  # warmup: exclude first-call allocation noise
            reps = []
            for _ in range(repeats):
                t0 = time.perf_counter()
                fn()
                reps.append(time.perf_counter() - t0)
            # the minimum is the least noise-contaminated estimate of cost
            times[name].append(min(reps))
    logs = np.log(n_values)
    sema_exp = float(np.polyfit(logs, np.log(times["sema"]), 1)[0])
    full_exp = float(np.polyfit(logs, np.log(times["full"]), 1)[0])
    assert 0.9 <= sema_exp <= 1.3, sema_exp
    assert 1.7 <= full_exp <= 2.3, full_exp

    rng = rng_for(42, "acceptance-counter")
    q64 = rng.standard_normal((64, d))
    for variant, ww in (("full", None), ("window", w), ("homogeneous_mix", None),
                        ("sema", w), ("linear", None)):
        assert complexity_estimate(variant, 64, d, ww) == instrumented_counts(
            variant, q64, q64, q64, ww)
    report(8, f"wall-time exponents sema {sema_exp:+.2f} in [0.9, 1.3], "
              f"full {full_exp:+.2f} in [1.7, 2.3]; counters match at n=64")


def _ablation_config(averaging: bool) -> ModelConfig:
    return ModelConfig(stage_dims=(8,), stage_depths=(1,), stage_heads=(1,),
                       window=2, patch_size=4, num_classes=2, image_size=32,
                       head_mode="first_token", averaging_enabled=averaging)


def test_criterion_09_receptive_field():
    params = init_params(_ablation_config(True))
    grid_on = receptive_field_grid(_ablation_config(True), params, 9)
    assert (grid_on > 0).all()

    grid_off = receptive_field_grid(_ablation_config(False), zero_lepe(params),
                                    9).reshape(8, 8)
    window = np.zeros((8, 8), dtype=bool)
    window[:2, :2] = True
    assert (grid_off[window] > 0).all()
    assert (grid_off[~window] == 0).all()  # exact structural zeros
    report(9, "averaging connects every token pair; without averaging and "
              "LePE the cross-window Jacobian is exactly 0")


def test_criterion_10_ablation_direction():
    t0 = time.time()
    task = SyntheticTask()
    res_on = train_toy(_ablation_config(True), task, epochs=30, seed=13)
    res_off = train_toy(_ablation_config(False), task, epochs=30, seed=13)
    elapsed = time.time() - t0
    assert res_on.best_val_acc >= 0.9, res_on.best_val_acc
    assert max(res_off.val_acc) <= 0.6, max(res_off.val_acc)
    # fixture values pinned from the first seeded run of this protocol
    assert res_on.best_val_acc == pytest.approx(1.0, abs=1e-12)
    assert res_on.best_epoch == 7
    assert max(res_off.val_acc) == pytest.approx(0.5703125, abs=1e-12)
    assert elapsed < 300.0
    report(10, f"averaging-on reaches {res_on.best_val_acc:.3f} (epoch "
               f"{res_on.best_epoch}), averaging-off stays at "
               f"{max(res_off.val_acc):.4f} ({elapsed:.0f}s)")


def test_criterion_11_architecture_fidelity():
    cfg = ModelConfig.tiny_224()
    grids = stage_grids(cfg)
    assert grids == [56, 28, 14, 7]
    count = parameter_count(cfg)
    assert 18_000_000 <= count <= 34_000_000
    report(11, f"stage grids 56/28/14/7; parameter count {count / 1e6:.2f}M "
               f"in [18M, 34M] (informational)")
