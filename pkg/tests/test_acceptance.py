"""Acceptance suite: one test per criterion, each recording a PASS/FAIL line.

Lines are echoed to stdout and collected into an "acceptance criteria"
section of the pytest terminal summary. Runtime limits are part of each
criterion and are checked against wall-clock time.
"""

import json
import math
import time

import numpy as np
import pytest

from fragileflow.calibrate_eval import (
    buffer_from_quantile,
    calibrate_gamma,
    calibration_sweep,
    perturbed_margins,
)
from fragileflow.core_risk import GateParams, build_flow_matrix, gate, margins_rows, softmax_rows, vsr_exact, vwr
from fragileflow.experiment import confusion_direction, default_paired_config, run_paired, structured_task
from fragileflow.io_cli import analyze_dump, cli_main, load_dump
from fragileflow.model import ToyModel
from fragileflow.pac_bayes import (
    BoundInputs,
    PosteriorSpec,
    bridge_check,
    estimate_rho,
    gaussian_kl,
    pac_bound,
    score_sensitivity,
    stability_certificate,
)
from fragileflow.perturb import PerturbSpec, keyed_rng, make_paired_batch
from fragileflow.spectral import power_iteration
from fragileflow.toy_train import (
    TrainConfig,
    ce_loss_and_grad,
    composite_objective,
    generate_synth_task,
    r_spec_and_grad,
    stability_kl_and_grad,
    train,
)

from .conftest import record_criterion
from .test_core_risk import random_flow_matrix
from .test_io_cli import FIXTURE, GOLDEN, diff_against_oracle, load_oracle, oracle_view
from .test_spectral import gap_matrix
from .test_toy_train import fd_coords, fd_errors, fisher_ratio, margin_stability_violations, random_instance


def verdict(number, title, ok, detail, elapsed, limit):
    ok = bool(ok) and elapsed < limit
    status = "PASS" if ok else "FAIL"
    record_criterion(f"criterion {number}: {status} {title} ({detail}; {elapsed:.2f}s / limit {limit:g}s)")
    assert ok, f"criterion {number} failed: {detail}, {elapsed:.2f}s"


def test_01_norm_conversion():
    t0 = time.perf_counter()
    rng = np.random.default_rng(101)
    worst = -math.inf
    for i in range(1200):
        K = int(rng.integers(2, 17))
        if i % 2:
            M = random_flow_matrix(rng, K)
        else:
            S = rng.normal(scale=rng.uniform(0.5, 4), size=(8 * K, K))
            y = rng.integers(0, K, 8 * K)
            M = build_flow_matrix(S, GateParams(rng.uniform(0, 2)), labels=y)
        worst = max(worst, vwr(M) - math.sqrt(K) * vsr_exact(M))
    verdict(1, "vwr <= sqrt(K) vsr", worst <= 1e-9, f"1200 matrices, max excess {worst:.3g}",
            time.perf_counter() - t0, 5)


def test_02_pointwise_bridge_constant():
    t0 = time.perf_counter()
    rng = np.random.default_rng(102)
    violations = total = 0
    for _ in range(200):
        K = int(rng.integers(2, 9))
        n = 600
        S = rng.normal(scale=rng.uniform(0.1, 5), size=(n, K))
        y = rng.integers(0, K, n)
        ties = rng.random(n) < 0.05
        S[ties, (y[ties] + 1) % K] = S[ties, y[ties]]
        gp = GateParams(float(rng.choice([0.0, rng.uniform(0, 4)])), float(rng.uniform(1e-3, 2)))
        delta, _, _ = margins_rows(S, y)
        p_y = softmax_rows(S)[np.arange(n), y]
        rhs = 2 * (1 + math.exp(gp.gamma)) * gate(delta, gp) * (1 - p_y)
        violations += int(np.sum((delta <= gp.gamma) & (rhs < 1.0)))
        total += n
    verdict(2, "1{margin<=gamma} <= 2(1+e^gamma) g (1-p_y)", violations == 0 and total >= 10 ** 5,
            f"{total} triples, {violations} violations", time.perf_counter() - t0, 5)


def test_03_margin_stability():
    t0 = time.perf_counter()
    violations, checked = margin_stability_violations(np.random.default_rng(103), 110_000)
    verdict(3, "argmax stable under shifts < gamma/2", violations == 0 and checked >= 10 ** 5,
            f"{checked} trials, {violations} violations", time.perf_counter() - t0, 5)


def test_04_gradient_fidelity():
    t0 = time.perf_counter()
    worst = {"ce": 0.0, "r_spec": 0.0, "r_stab": 0.0, "composite": 0.0}
    models = 0
    seed = 1000
    while models < 6:
        seed += 1
        model, batch, gp, v, u, rng = random_instance(seed, "mlp1" if models % 2 else "linear")
        if model.d_train < 20:
            continue
        models += 1
        w = model.weights
        coords = fd_coords(model, rng, 20)
        ref = softmax_rows(model.scores(batch.clean_inputs))
        at = model.with_weights
        checks = {
            "ce": (lambda m: ce_loss_and_grad(m, batch)),
            "r_spec": (lambda m: r_spec_and_grad(m, batch, gp, v, 1e-8)[:2]),
            "r_stab": (lambda m: stability_kl_and_grad(m, batch, u, ref)),
            "composite": (lambda m: composite_objective(m, batch, gp, v, u, 0.7, 0.4, 1e-8, ref)),
        }
        for name, fn in checks.items():
            grad = fn(model)[1]
            err = fd_errors(lambda x: fn(at(x))[0], w, grad, coords).max()
            worst[name] = max(worst[name], err)
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
    verdict(4, "analytic gradients match central differences", max(worst.values()) <= 1e-4,
            f"{models} models x 20 coords, max rel err: {detail}", time.perf_counter() - t0, 30)


def test_05_spectral_solver_agreement():
    t0 = time.perf_counter()
    rng = np.random.default_rng(105)
    worst = 0.0
    for _ in range(100):
        K = int(rng.integers(2, 33))
        M = gap_matrix(rng, K, gap=0.1)
        est = power_iteration(M, t_pi=200, tol=0.0).sigma_est
        worst = max(worst, abs(est - vsr_exact(M)) / vsr_exact(M))
    verdict(5, "power iteration vs exact top singular value", worst <= 1e-6,
            f"100 matrices K<=32 with sigma2 <= 0.9 sigma1, max rel err {worst:.2e}", time.perf_counter() - t0, 10)


def pac_formula(vsr, K, m, kl, delta):
    return math.sqrt(K) * vsr + 2 * math.sqrt(2 * K * (kl + 2 * K * math.log(9) + math.log(2 / delta)) / m)


def random_bound_inputs(rng):
    return (float(rng.uniform(0, 1.5)), int(rng.integers(2, 40)), int(rng.integers(1, 10 ** 6)),
            float(rng.exponential(50)), float(rng.uniform(1e-6, 0.999)))


def test_06_pac_bayes_bound():
    t0 = time.perf_counter()
    rng = np.random.default_rng(106)
    worst = 0.0
    for _ in range(100):
        args = random_bound_inputs(rng)
        ref = pac_formula(*args)
        worst = max(worst, abs(pac_bound(BoundInputs(*args)).total - ref) / max(1.0, ref))
    bad = 0
    for _ in range(1000):
        vsr, K, m, kl, delta = random_bound_inputs(rng)
        base = pac_bound(BoundInputs(vsr, K, m, kl, delta)).total
        up = [
            pac_bound(BoundInputs(vsr + rng.uniform(1e-3, 1), K, m, kl, delta)).total,
            pac_bound(BoundInputs(vsr, K, m, kl + rng.uniform(1e-3, 10), delta)).total,
            pac_bound(BoundInputs(vsr, K + int(rng.integers(1, 5)), m, kl, delta)).total,
        ]
        down = [
            pac_bound(BoundInputs(vsr, K, m + int(rng.integers(1, 1000)), kl, delta)).total,
            pac_bound(BoundInputs(vsr, K, m, kl, min(delta + rng.uniform(1e-4, 0.5), 0.9999))).total,
        ]
        bad += sum(u <= base for u in up) + sum(d >= base for d in down if delta < 0.9999)
    verdict(6, "PAC-Bayes bound formula and monotonicity", worst <= 1e-12 and bad == 0,
            f"100 oracle checks, max rel err {worst:.1e}; 1000 pairs x 5 directions, {bad} violations",
            time.perf_counter() - t0, 5)


def kl_formula(mu, s, t):
    d = len(mu)
    return sum(x * x for x in mu) / (2 * t * t) + d / 2 * (s * s / (t * t) - 1 - math.log(s * s / (t * t)))


def test_07_gaussian_kl():
    t0 = time.perf_counter()
    rng = np.random.default_rng(107)
    zero_ok = all(
        gaussian_kl(PosteriorSpec(np.zeros(int(d)), s, s)) == 0.0
        for d, s in zip(rng.integers(1, 200, 50), rng.uniform(1e-3, 10, 50))
    )
    positive_ok = True
    worst = 0.0
    negatives = 0
    for i in range(1000):
        d = int(rng.integers(1, 100))
        mu = rng.normal(scale=rng.uniform(0, 3), size=d)
        s, t = rng.uniform(1e-3, 5, 2)
        if i % 3 == 0:
            mu = np.zeros(d)
        if i % 5 == 0:
            s = t
        kl = gaussian_kl(PosteriorSpec(mu, s, t))
        ref = kl_formula(mu.tolist(), s, t)
        worst = max(worst, abs(kl - ref) / max(1.0, ref))
        negatives += kl < 0
        if not (i % 3 == 0 and i % 5 == 0):
            positive_ok &= kl > 0
    ok = zero_ok and positive_ok and worst <= 1e-12 and negatives == 0
    verdict(7, "Gaussian KL zero iff posterior = prior, formula, nonnegative", ok,
            f"1000 specs, max rel err {worst:.1e}, {negatives} negative", time.perf_counter() - t0, 2)


BRIDGE_CONFIGS = [
    ("linear", "gaussian_noise", 0.5),
    ("mlp1", "gaussian_noise", 0.5),
    ("linear", "directional_shift", 1.0),
    ("mlp1", "pgd", 0.3),
    ("linear", "pgd", 0.3),
]


def trained_bridge_instance(i, kind, pkind, magnitude):
    task = structured_task(seed=i)
    train_set, val_set, test_set = generate_synth_task(task)
    init = ToyModel.random(kind, task.feature_dim, task.K, 8 if kind == "mlp1" else 0,
                           scale=0.1, rng=keyed_rng(i, "init"))
    direction = confusion_direction(task) if pkind == "directional_shift" else None
    spec = PerturbSpec(pkind, magnitude, direction=direction, seed=i)
    model, _ = train(init, train_set, TrainConfig(steps=200, batch_size=128, perturb=spec, seed=i))
    val = make_paired_batch(*val_set, spec, model, purpose="val_perturb")
    gp = buffer_from_quantile(calibrate_gamma(perturbed_margins(model, (val.perturbed_inputs, val.labels)), 0.25))
    test = make_paired_batch(*test_set, spec, model, purpose="eval_perturb")
    return model, gp, test.perturbed_inputs, test.labels


def choose_sigma(model, X, gp, seed, n_samples=200, target=0.2):
    """Largest sigma_Q (to bisection precision) whose measured rho is <= target.

    Starts from the Gaussian certificate and uses the same posterior draws as
    the bridge check, so the selected sigma_Q has measured rho <= target.
    """
    sens = score_sensitivity(model, X)
    _, lo = stability_certificate(sens, PosteriorSpec(model.weights, 1.0, 1.0), 0.1, gp.gamma)

    def rho(sigma):
        return estimate_rho(PosteriorSpec(model.weights, sigma, 1.0), model.with_weights, X,
                            gp.gamma, n_samples, seed)

    hi = 2 * lo
    while rho(hi) <= target:
        lo, hi = hi, 2 * hi
    for _ in range(8):
        mid = math.sqrt(lo * hi)
        lo, hi = (mid, hi) if rho(mid) <= target else (lo, mid)
    return lo


@pytest.fixture(scope="module")
def bridge_results():
    t0 = time.perf_counter()
    rows = []
    for i, (kind, pkind, magnitude) in enumerate(BRIDGE_CONFIGS):
        model, gp, X, y = trained_bridge_instance(i, kind, pkind, magnitude)
        sigma = choose_sigma(model, X, gp, i)
        out = bridge_check(PosteriorSpec(model.weights, sigma, 1.0), model.with_weights, X, y, gp, 200, seed=i)
        rows.append({"config": f"{kind}/{pkind}", "gamma": gp.gamma, "sigma_q": sigma, **out})
    return rows, time.perf_counter() - t0


def test_08_empirical_bridge(bridge_results):
    rows, elapsed = bridge_results
    ok = all(r["rho_hat"] <= 0.2 and r["wcr_det"] <= r["bound"] + 3 * r["stderr"] for r in rows)
    ok &= len(rows) >= 5 and all(r["n_samples"] >= 200 for r in rows)
    detail = "; ".join(f"{r['config']} wcr {r['wcr_det']:.3f} <= {r['bound']:.3f} (rho {r['rho_hat']:.2f})"
                       for r in rows)
    verdict(8, "WCR_det <= 2(1+e^gamma) VWR(Q) + rho + 3 SE", ok, detail, elapsed, 120)


def test_09_stability_case_one(bridge_results):
    rows, elapsed = bridge_results
    violations = sum(r["case1_violations"] for r in rows)
    stable = sum(round((1 - r["rho_hat"]) * r["n_samples"]) for r in rows)
    verdict(9, "stable draws keep margin <= gamma on mean-model errors", violations == 0,
            f"{stable} stable draws over {len(rows)} configs, {violations} violations", elapsed, 120)


def paired_means(alpha, beta, seeds=(0, 1, 2)):
    cfg = default_paired_config(alpha=alpha, beta=beta)
    results = [run_paired(cfg, s, with_bound=False) for s in seeds]
    return {
        name: {key: float(np.mean([getattr(r["runs"][name]["report"], key) for r in results]))
               for key in ("vsr_hat", "vwr_hat", "clean_acc")}
        for name in ("base", "plugin")
    }


def test_10_directional_replication():
    t0 = time.perf_counter()
    m = paired_means(0.1, 0.05)
    b, p = m["base"], m["plugin"]
    acc_drop = b["clean_acc"] - p["clean_acc"]
    ok = p["vsr_hat"] < b["vsr_hat"] and p["vwr_hat"] < b["vwr_hat"] and acc_drop < 0.01
    detail = (f"VSR {b['vsr_hat']:.4f} -> {p['vsr_hat']:.4f}, VWR {b['vwr_hat']:.4f} -> {p['vwr_hat']:.4f}, "
              f"clean acc drop {100 * acc_drop:.2f}pp, 3 seeds")
    verdict(10, "plug-in lowers mean VSR and VWR at < 1pp clean cost", ok, detail, time.perf_counter() - t0, 180)


def test_11_spectral_only_ablation():
    t0 = time.perf_counter()
    m = paired_means(0.1, 0.0)
    b, p = m["base"], m["plugin"]
    verdict(11, "beta = 0 variant still lowers mean VSR", p["vsr_hat"] < b["vsr_hat"],
            f"VSR {b['vsr_hat']:.4f} -> {p['vsr_hat']:.4f}, 3 seeds", time.perf_counter() - t0, 180)


def test_12_calibration_monotonicity():
    t0 = time.perf_counter()
    cfg = default_paired_config()
    task = cfg.task
    train_set, val_set, _ = generate_synth_task(task)
    init = ToyModel.random("linear", task.feature_dim, task.K, scale=0.01, rng=keyed_rng(0, "init"))
    model, _ = train(init, train_set, cfg.train.replace(alpha=0.0, beta=0.0))
    ptb = make_paired_batch(*val_set, cfg.eval_perturb, model, purpose="val_perturb")
    qs = [0.10, 0.25, 0.50]
    rows = calibration_sweep(model, (val_set, (ptb.perturbed_inputs, ptb.labels)), qs, GateParams(0.0, 0.25))
    gammas = [r[1] for r in rows]
    vwrs = [r[2].vwr_hat for r in rows]
    ok = all(b >= a for a, b in zip(gammas, gammas[1:])) and all(b >= a - 1e-9 for a, b in zip(vwrs, vwrs[1:]))
    dump = load_dump(FIXTURE)
    dump_rows = [analyze_dump(dump, "noise", q, kappa=0.25) for q in qs]
    dump_g = [r[2]["gamma_quantile"] for r in dump_rows]
    dump_v = [r[0].vwr_hat for r in dump_rows]
    ok &= all(b >= a for a, b in zip(dump_g, dump_g[1:])) and all(b >= a - 1e-9 for a, b in zip(dump_v, dump_v[1:]))
    detail = (f"model gamma {[round(g, 3) for g in gammas]} vwr {[round(v, 4) for v in vwrs]}; "
              f"dump gamma {[round(g, 3) for g in dump_g]} vwr {[round(v, 4) for v in dump_v]}")
    verdict(12, "gamma_q and VWR nondecreasing in q", ok, detail, time.perf_counter() - t0, 60)


def test_13_fisher_diagnostic():
    t0 = time.perf_counter()
    ratios = []
    for seed in range(3):
        rng = np.random.default_rng(130 + seed)
        model = ToyModel.random("linear", int(rng.integers(2, 7)), int(rng.integers(2, 6)), rng=rng, scale=0.7)
        X = rng.normal(size=(8, model.feature_dim))
        ratios.append(float(fisher_ratio(model, X, 1e-3, 10_000, seed=seed)))
    ok = all(abs(r - 1) <= 0.1 for r in ratios)
    verdict(13, "E[KL] / quadratic Fisher form near 1 at sigma_Q = 1e-3", ok,
            f"3 linear models x 10^4 draws, ratios {[round(r, 4) for r in ratios]}", time.perf_counter() - t0, 30)


def test_14_golden_run(tmp_path):
    t0 = time.perf_counter()
    outs = []
    for i in range(2):
        out = tmp_path / f"report{i}.json"
        code = cli_main(["analyze", "--input", str(FIXTURE), "--condition", "noise", "--q", "0.25", "--out", str(out)])
        outs.append((code, out.read_bytes() if out.exists() else b""))
    golden = GOLDEN.read_bytes()
    byte_match = all(code == 0 and data == golden for code, data in outs)
    mismatched = diff_against_oracle(oracle_view(json.loads(golden)), load_oracle().analyze(FIXTURE, "noise", 0.25))
    ok = byte_match and not mismatched
    detail = (f"2 runs byte-identical to golden: {byte_match}; "
              f"golden vs standalone oracle within 1e-12: {not mismatched}")
    verdict(14, "analyze on the 500-record fixture reproduces the golden report", ok, detail,
            time.perf_counter() - t0, 5)
