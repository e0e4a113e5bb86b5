"""Acceptance checks. Each test prints one ``ACCEPTANCE <n> PASS|FAIL`` line."""

import time

import numpy as np
import pytest

from sot_head.cli import RunConfig, cmd_bench
from sot_head.gradcheck import max_relative_error, numerical_grad
from sot_head.head import SCHEMES, init_head
from sot_head.linalg import frobenius_norm, svd
from sot_head.model import OptimSettings, SynthTaskSpec, ToyModelConfig, init_params, loss_and_grads, train
from sot_head.normalization import (
    SvpnConfig,
    deflation_sequence,
    mpn,
    power_iterate,
    start_vector,
    svpn_approx,
    svpn_exact,
    svpn_exact_backward,
)
from sot_head.pooling import init_mgcrp, representation_size
from sot_head.seeding import rng_for


def separated(rng, m, n, min_gap=0.1):
    while True:
        q = rng.standard_normal((m, n))
        s = np.linalg.svd(q, compute_uv=False)
        if np.min(np.append(-np.diff(s), s[-1])) > min_gap:
            return q


def test_1_exact_backward_finite_differences(verdict):
    t0 = time.perf_counter()
    alphas = (0.3, 0.5, 0.7)
    worst = 0.0
    for i in range(100):
        rng = rng_for(1, i)
        m, n = (int(x) for x in rng.integers((3, 3), (9, 7)))  # 3x3 through 8x6
        q = separated(rng, m, n)
        g = rng.standard_normal((m, n))
        alpha = alphas[i % 3]
        _, factors = svpn_exact(q, alpha)
        an = svpn_exact_backward(factors, alpha, g).grad
        num = numerical_grad(lambda: float(np.sum(g * svpn_exact(q, alpha)[0])), q, h=1e-5)
        worst = max(worst, max_relative_error(an, num))
    elapsed = time.perf_counter() - t0
    verdict(1, worst < 1e-4 and elapsed < 30,
            f"100 instances, max rel error {worst:.2e} (< 1e-4), {elapsed:.1f}s (< 30s)")


def test_2_deflation_reproduces_svd_spectrum(verdict):
    t0 = time.perf_counter()
    worst = 0.0
    for i in range(50):
        rng = rng_for(2, i)
        m, n = (int(x) for x in rng.integers(1, 9, size=2))
        q = rng.standard_normal((m, n))
        est = np.array([t.value for t in deflation_sequence(q, min(m, n), 200)])
        worst = max(worst, float(np.max(np.abs(est - svd(q).s))))
    elapsed = time.perf_counter() - t0
    verdict(2, worst < 1e-8 and elapsed < 10,
            f"50 matrices up to 8x8, max abs error {worst:.2e} (< 1e-8), {elapsed:.1f}s (< 10s)")


def test_3_approximate_identities(verdict):
    bitwise = True
    for i in range(20):
        rng = rng_for(3, i)
        m, n = (int(x) for x in rng.integers(2, 9, size=2))
        q = rng.standard_normal((m, n))
        alpha = (0.3, 0.5, 0.7)[i % 3]
        iters = 1 + i % 4
        lam = power_iterate(q, start_vector(n), iters).value
        bitwise &= np.array_equal(svpn_approx(q, SvpnConfig(alpha, 1, iters)), q / lam ** (1 - alpha))
    worst = 0.0
    for i in range(20):
        q = rng_for(3, 100 + i).standard_normal((4, 4))
        exact = svpn_exact(q, 0.5)[0]
        approx = svpn_approx(q, SvpnConfig(0.5, 4, 200))
        worst = max(worst, frobenius_norm(approx - exact) / frobenius_norm(exact))
    verdict(3, bitwise and worst < 1e-6,
            f"r=1 bitwise equal: {bitwise}; full-rank 4x4 max rel error {worst:.2e} (< 1e-6)")


def test_4_homogeneity_and_spectrum(verdict):
    hom = spread = 0.0
    for i in range(20):
        rng = rng_for(4, i)
        m, n = (int(x) for x in rng.integers(1, 9, size=2))
        q = rng.standard_normal((m, n))
        alpha = (0.3, 0.5, 0.7)[i % 3]
        base, factors = svpn_exact(q, alpha)
        for c in (0.5, 2.0, 10.0):
            hom = max(hom, float(np.max(np.abs(svpn_exact(c * q, alpha)[0] - c**alpha * base))))
        spread = max(spread, float(np.max(np.abs(svd(base).s - factors.s**alpha))))
    verdict(4, hom < 1e-10 and spread < 1e-8,
            f"homogeneity max error {hom:.2e} (< 1e-10); spectrum max error {spread:.2e} (< 1e-8)")


def test_5_mpn_square_root(verdict):
    worst = 0.0
    for i in range(20):
        rng = rng_for(5, i)
        p = int(rng.integers(2, 9))
        z = rng.standard_normal((p, p + int(rng.integers(1, 10))))
        spd = z @ z.T
        r = mpn(spd, 0.5)
        worst = max(worst, frobenius_norm(r @ r - spd) / frobenius_norm(spd))
    verdict(5, worst < 1e-8, f"20 SPD matrices, max rel error {worst:.2e} (< 1e-8)")


SMALLEST = dict(depth=2, token_dim=4, msa_heads=2, mlp_hidden=8, seq_len=6, class_count=3,
                mgcrp_heads=2, mgcrp_m=2, mgcrp_n=2)


def test_6_end_to_end_gradients(verdict):
    t0 = time.perf_counter()
    results = {}
    for scheme in SCHEMES:
        for pooling in ("gap", "gcp", "mgcrp"):
            cfg = ToyModelConfig(scheme=scheme, pooling=pooling, **SMALLEST)
            params = init_params(cfg)
            rng = rng_for(6, SCHEMES.index(scheme), len(pooling))
            for k in params:
                params[k] += rng.standard_normal(params[k].shape) * 0.3
            x = rng.standard_normal((2, 4, 6))
            y = np.array([0, 2])
            _, grads = loss_and_grads(params, cfg, x, y)
            worst = 0.0
            for k in params:
                num = numerical_grad(lambda: loss_and_grads(params, cfg, x, y)[0], params[k])
                worst = max(worst, max_relative_error(grads[k], num))
            results[(scheme, pooling)] = worst
    elapsed = time.perf_counter() - t0
    worst_cell = max(results, key=results.get)
    ok = all(v < 1e-3 for v in results.values()) and elapsed < 300
    verdict(6, ok, f"{len(results)} scheme x pooling cells, worst {worst_cell} {results[worst_cell]:.2e} "
                   f"(< 1e-3), {elapsed:.1f}s (< 300s)")


@pytest.mark.slow
def test_7_second_order_separation(verdict):
    steps = 500
    opt = OptimSettings(train_size=1024, test_size=512)
    mg, ga = [], []
    for seed in range(3):
        task = SynthTaskSpec(seed=seed)
        for pooling, acc in (("mgcrp", mg), ("gap", ga)):
            t0 = time.perf_counter()
            rep = train(ToyModelConfig(scheme="sum", pooling=pooling, seed=seed), task, steps, opt)
            assert time.perf_counter() - t0 < 600
            acc.append(rep.test_accuracy)
    ok = min(mg) >= 0.9 and max(ga) <= 0.6
    verdict(7, ok, f"covariance_task, {steps} steps, seeds 0-2: MGCrP test acc "
                   f"{', '.join(f'{a:.3f}' for a in mg)} (>= 0.9); GAP {', '.join(f'{a:.3f}' for a in ga)} (<= 0.6)")


def _k_label(size):
    labels = {0.5: "0.5K", 1: "1K", 2: "2K", 3: "3K", 6: "6K"}
    return labels[min(labels, key=lambda k: abs(k * 1000 - size))]


def test_8_structural_sizes(verdict):
    checks = []
    checks.append(representation_size(6, 14, 14) == 1176)
    params = init_mgcrp(rng_for(8), 256, 6, 14, 14)
    head = init_head(rng_for(8, 1), "concat", 256, params, 1000)
    checks.append(head.fc_joint.weight.shape[1] == 1432)
    table_a = [(1, 32, 32), (2, 24, 24), (4, 16, 16), (6, 14, 14), (8, 12, 12)]
    checks.append(all(_k_label(representation_size(*c)) == "1K" for c in table_a))
    table_b = {(6, 9, 9): "0.5K", (6, 14, 14): "1K", (6, 18, 18): "2K", (6, 24, 24): "3K", (6, 32, 32): "6K"}
    checks.append(all(_k_label(representation_size(*c)) == lab for c, lab in table_b.items()))
    all_cfgs = table_a + list(table_b)
    checks.append(all(init_mgcrp(rng_for(8, i), 8, *c).size == c[0] * c[1] * c[2] for i, c in enumerate(all_cfgs)))
    sizes = ", ".join(str(representation_size(*c)) for c in table_b)
    verdict(8, all(checks), f"1176 and 1432 exact; size tables [{sizes}] match 0.5K/1K/2K/3K/6K")


def test_9_approximate_is_faster(verdict):
    rep = cmd_bench(RunConfig.resolve("bench", {"sizes": "64", "repeats": "200", "error_r": "1",
                                                "error_iters": "1"}))
    speedup = rep.summary["speedup_64"]
    verdict(9, speedup >= 2.0, f"64x64 approx(1,1) / exact throughput {speedup:.1f}x (>= 2x); "
                               f"full-scale reference ~20x")
