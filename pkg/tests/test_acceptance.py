"""Acceptance gate: one test per primary criterion, each reporting a
PASS/FAIL line (collected again in the terminal summary).

Set ``XCALSURV_FULL_SCALE=1`` to also run the full-scale tradeoff sweep.
"""

import json
import os
import shutil
import time

import numpy as np
import pytest
from scipy.stats import kstest

from gradcheck import rel_err
from xcalsurv.cli import VOLATILE_KEYS, main
from xcalsurv.data import BinScheme, Dataset, split_dataset
from xcalsurv.losses import nll_loss, scrps_loss
from xcalsurv.metrics import (bin_contributions, censored_exact_dcal, concordance,
                              concordance_bruteforce, exact_dcal)
from xcalsurv.models import TimeGrid, build_model
from xcalsurv.params import finite_difference_gradient
from xcalsurv.simulate import GammaSimConfig, simulate_gamma, simulate_risk_groups
from xcalsurv.train import TrainConfig, run_sweep, train
from xcalsurv.xcal import (CdfBatch, SoftConfig, batch_penalty_mean, jensen_slack_report,
                           soft_dcal, soft_dcal_grad, xcal_batch_penalty)

RESULTS = []


def report(number, name, ok, detail):
    line = f"[criterion {number:>2}] {'PASS' if ok else 'FAIL'}  {name}: {detail}"
    RESULTS.append(line)
    print(line)
    assert ok, line


def noise_threshold(n, B=20):
    return 3.0 * (1.0 - 1.0 / B) / n


def nll_monotone(values, allowed=1):
    return sum(b < a for a, b in zip(values, values[1:])) <= allowed


# -- 1. tradeoff reproduction -------------------------------------------------

DESK_LAMS = [0.0, 1.0, 10.0, 100.0, 500.0]
DESK = dict(learning_rate=1e-2, batch_size=2000, epochs=300)


def tradeoff_summary(rows, lams):
    out = {}
    for lam in lams:
        sel = [r for r in rows if r["lam"] == lam and not r["error"]]
        out[lam] = {k: float(np.mean([r[k] for r in sel])) for k in ("nll", "dcal", "concordance")}
    return out


def test_c01_tradeoff_desk():
    start = time.time()
    data, _ = simulate_gamma(GammaSimConfig(n=20000, censoring=True, seed=0))
    split = split_dataset(data, (0.5, 0.25, 0.25), 0)
    rows = run_sweep(TrainConfig(**DESK), DESK_LAMS, [0, 1, 2], split)
    elapsed = time.time() - start
    s = tradeoff_summary(rows, DESK_LAMS)
    ratio = s[500.0]["dcal"] / s[0.0]["dcal"]
    conc = min(v["concordance"] for v in s.values())
    nll = [s[l]["nll"] for l in DESK_LAMS]
    ok = (ratio <= 0.1 and conc >= 0.85 and nll_monotone(nll) and elapsed <= 600
          and all(not r["error"] for r in rows))
    table = "; ".join(f"lam={l:g} nll={v['nll']:.3f} dcal={v['dcal']:.2e} c={v['concordance']:.3f}"
                      for l, v in s.items())
    report(1, "gamma-sim tradeoff (desk)", ok,
           f"dcal ratio {ratio:.3f} (<=0.1), min concordance {conc:.3f} (>=0.85), "
           f"runtime {elapsed:.0f}s | {table}")


@pytest.mark.slow
@pytest.mark.skipif(os.environ.get("XCALSURV_FULL_SCALE") != "1",
                    reason="full-scale sweep is opt-in (XCALSURV_FULL_SCALE=1)")
def test_c01_tradeoff_full_scale():
    start = time.time()
    data, _ = simulate_gamma(GammaSimConfig(n=200000, censoring=True, seed=0))
    split = split_dataset(data, (0.5, 0.25, 0.25), 0)
    rows = run_sweep(TrainConfig.full(), DESK_LAMS, [0], split)
    s = tradeoff_summary(rows, DESK_LAMS)
    conc = min(v["concordance"] for v in s.values())
    nll = [s[l]["nll"] for l in DESK_LAMS]
    ok = (s[0.0]["dcal"] >= 0.015 and s[500.0]["dcal"] <= 5e-4 and conc >= 0.85
          and nll_monotone(nll))
    report(1, "gamma-sim tradeoff (full scale)", ok,
           f"dcal {s[0.0]['dcal']:.2e} -> {s[500.0]['dcal']:.2e}, min concordance {conc:.3f}, "
           f"runtime {time.time() - start:.0f}s")


# -- 2. calibrated truth ------------------------------------------------------

def test_c02_oracle_truth_calibrated():
    n, bins = 50000, BinScheme.equal(20)
    thr = noise_threshold(n)
    d_unc, o_unc = simulate_gamma(GammaSimConfig(n=n, censoring=False, seed=11))
    unc = exact_dcal(o_unc.cdf(d_unc.x, o_unc.true_times), bins)
    d_c, o_c = simulate_gamma(GammaSimConfig(n=n, censoring=True, seed=12))
    cen = censored_exact_dcal(o_c.cdf(d_c.x, d_c.time), d_c.event, bins)
    report(2, "calibrated-truth zero", unc <= thr and cen <= thr,
           f"uncensored {unc:.2e}, censored {cen:.2e}, threshold {thr:.2e}")


# -- 3. Jensen bound ----------------------------------------------------------

@pytest.fixture(scope="module")
def lam0_cdfs():
    """CDF values of a lambda=0 log-normal model on a large train sample."""
    data, _ = simulate_gamma(GammaSimConfig(n=20000, censoring=True, seed=0))
    split = split_dataset(data, (0.5, 0.25, 0.25), 0)
    model, _ = train(TrainConfig(learning_rate=1e-2, batch_size=512, epochs=10), split)
    big, _ = simulate_gamma(GammaSimConfig(n=100000, censoring=True, seed=0))
    f = np.clip(model.evaluate(big.x, big.time).cdf, 0.0, 1.0)
    return CdfBatch(f, big.event)


def test_c03_jensen_bound(lam0_cdfs):
    cfg = SoftConfig()
    rng = np.random.default_rng(3)
    sub_idx = rng.choice(len(lam0_cdfs), 5000, replace=False)
    sub = CdfBatch(lam0_cdfs.values[sub_idx], lam0_cdfs.events[sub_idx])
    pooled_sub = soft_dcal(sub, cfg)
    worst = np.inf
    for _ in range(1000):
        m = int(np.exp(rng.uniform(np.log(16), np.log(1000))))
        perm = rng.permutation(len(sub))
        part = [perm[i:i + m] for i in range(0, len(sub), m)]
        worst = min(worst, batch_penalty_mean(sub, cfg, part) - pooled_sub)
    rows = {r["batch_size"]: r for r in
            jensen_slack_report(lam0_cdfs, cfg, [500, 10000], trials=10, seed=4)}
    pooled = rows[500]["soft_dcal"]
    b500, b1e4 = rows[500]["upper_bound"], rows[10000]["upper_bound"]
    ok = worst >= -1e-12 and b500 > pooled and abs(b1e4 / pooled - 1) <= 0.05
    report(3, "Jensen bound", ok,
           f"min(bound - pooled) over 1000 partitions {worst:.2e}; pooled {pooled:.5f}, "
           f"bound@500 {b500:.5f}, bound@1e4 {b1e4:.5f} ({100 * (b1e4 / pooled - 1):.2f}%)")


# -- 4. gradient suite --------------------------------------------------------

FAMILIES = ["lognormal", "weibull", "categorical", "mtlr"]


def _grad_cases(seed, family, hidden):
    r = np.random.default_rng([seed, FAMILIES.index(family), len(hidden)])
    grid = TimeGrid(np.concatenate([[0.0], np.sort(r.uniform(0.2, 5.0, 6))]))
    interp = bool(seed % 2)
    model = build_model(family, 3, hidden, time_grid=grid, interpolate=interp)
    theta = model.init_params(seed) + 0.3 * r.standard_normal(model.n_params)
    x = r.standard_normal((8, 3))
    t = r.uniform(0.1, 4.0, 8)
    cens = Dataset(x, t, r.random(8) < 0.5)
    unc = Dataset(x, t, np.ones(8, dtype=bool))
    cfg = SoftConfig(1e4)

    def penalty_value(batch):
        return lambda th: soft_dcal(
            CdfBatch(np.clip(model.evaluate(batch.x, batch.time, th).cdf, 0, 1), batch.event), cfg)

    cases = []
    for tag, batch in (("censored", cens), ("uncensored", unc)):
        cases.append((f"nll/{tag}", nll_loss(model, batch, theta).grad,
                      lambda th, b=batch: nll_loss(model, b, th).value))
        cases.append((f"xcal/{tag}", xcal_batch_penalty(model, batch, cfg, theta).grad,
                      penalty_value(batch)))
        if family != "weibull":
            cases.append((f"scrps/{tag}", scrps_loss(model, batch, theta).grad,
                          lambda th, b=batch: scrps_loss(model, b, th).value))
    return theta, cases


def test_c04_gradient_suite():
    worst, failures, count = 0.0, [], 0
    for family in FAMILIES:
        for hidden in ((), (5,)):
            for seed in range(20):
                theta, cases = _grad_cases(seed, family, hidden)
                for name, analytic, f in cases:
                    err = rel_err(analytic, finite_difference_gradient(f, theta))
                    count += 1
                    worst = max(worst, err)
                    if err >= 1e-4:
                        failures.append(f"{family}/{hidden}/{seed}/{name}={err:.1e}")
    report(4, "gradient suite", not failures,
           f"{count} checks, worst relative error {worst:.2e} (<1e-4)"
           + (f"; failures {failures[:5]}" if failures else ""))


# -- 5. gamma fidelity --------------------------------------------------------

def test_c05_gamma_fidelity():
    rng = np.random.default_rng(5)
    bins = BinScheme.equal(20)
    batches = [rng.beta(rng.uniform(0.5, 3), rng.uniform(0.5, 3), 1000) for _ in range(100)]
    gaps = []
    for gamma in (1e1, 1e2, 1e3, 1e4):
        cfg = SoftConfig(gamma, bins)
        gaps.append(np.mean([abs(soft_dcal(CdfBatch.uncensored(b), cfg) - exact_dcal(b, bins))
                             for b in batches]))
    mono = all(b <= a for a, b in zip(gaps, gaps[1:]))
    clear = []
    for b in batches:
        keep = np.min(np.abs(b[:, None] - bins.edges[None, :]), axis=1) > 1e-3
        c = b[keep]
        clear.append(abs(soft_dcal(CdfBatch.uncensored(c), SoftConfig(1e7, bins)) - exact_dcal(c, bins)))
    ok = mono and max(clear) <= 1e-3
    report(5, "gamma fidelity", ok,
           "mean gaps " + ", ".join(f"{g:.2e}" for g in gaps)
           + f"; max gap at 1e7 on edge-clear batches {max(clear):.2e}")


# -- 6. boundary fix ----------------------------------------------------------

def test_c06_boundary_fix():
    f = np.linspace(0.9505, 0.9995, 50)
    _, g_ext = soft_dcal_grad(CdfBatch.uncensored(f), SoftConfig(), extend=True)
    _, g_raw = soft_dcal_grad(CdfBatch.uncensored(f), SoftConfig(), extend=False)
    upper = f > 0.975
    ok = bool(np.all(g_ext > 0) and np.any(g_raw[upper] <= 0))
    report(6, "boundary fix", ok,
           f"extended: min dP/dF {g_ext.min():.3e} (all > 0); "
           f"unextended: {int(np.sum(g_raw <= 0))}/{len(f)} nonpositive above midpoint")


# -- 7. censoring uniformity --------------------------------------------------

def test_c07_censoring_uniformity():
    lines, ok = [], True
    data, oracle = simulate_gamma(GammaSimConfig(n=200000, censoring=True, seed=7))
    strata = [("gamma", data, oracle, None)]
    rdata, roracle = simulate_risk_groups(150000, seed=7)
    strata.append(("risk", rdata, roracle, roracle.weights["labels"]))
    for name, d, o, labels in strata:
        cens = ~d.event
        fu = o.cdf(d.x[cens], d.time[cens])
        ft = o.cdf(d.x[cens], o.true_times[cens])
        keep = fu < 1 - 1e-9
        v = (ft[keep] - fu[keep]) / (1 - fu[keep])
        if labels is None:
            # strata: quartiles of the true linear predictor
            eta = (d.x[cens] @ o.weights["failure"])[keep]
            key = np.digitize(eta, np.quantile(eta, [0.25, 0.5, 0.75]))
        else:
            key = labels[cens][keep]
        for k in np.unique(key):
            sel = v[key == k][:10000]
            if len(sel) < 10000:
                continue
            ks = kstest(sel, "uniform").statistic
            ok &= ks <= 0.02
            lines.append(f"{name}:{k} KS={ks:.4f}")
    ok &= len(lines) >= 8
    report(7, "censoring uniformity", ok, ", ".join(lines))


# -- 8. concordance oracle ----------------------------------------------------

def test_c08_concordance_oracle():
    rng = np.random.default_rng(8)
    mismatches, done = 0, 0
    while done < 200:
        n = int(rng.integers(2, 201))
        t = rng.integers(1, max(3, n // 2), n).astype(float) if rng.random() < 0.5 else rng.random(n)
        e = rng.random(n) < rng.uniform(0.2, 1.0)
        risk = rng.integers(0, 5, n).astype(float) if rng.random() < 0.5 else rng.standard_normal(n)
        if not np.any((t[:, None] < t[None, :]) & e[:, None]):
            continue
        done += 1
        mismatches += concordance(t, e, risk) != concordance_bruteforce(t, e, risk)
    report(8, "concordance oracle", mismatches == 0, f"{done} datasets, {mismatches} mismatches")


# -- 9. hard-metric equivalences ---------------------------------------------

def test_c09_hard_metric_equivalences():
    rng = np.random.default_rng(9)
    bitwise = all(
        censored_exact_dcal(f, np.ones(len(f), dtype=bool)) == exact_dcal(f)
        for f in (rng.random(int(rng.integers(1, 3000))) for _ in range(200)))
    bins = BinScheme.equal(20)
    n_mc, worst_z, bad = 10**6, 0.0, 0
    for _ in range(50):
        fu = rng.uniform(0.0, 0.99)
        k = int(rng.integers(bins.assign(np.array([fu]))[0], 20))
        expected = bin_contributions(np.array([fu]), np.array([False]), bins)[k]
        v = rng.uniform(fu, 1.0, n_mc)
        freq = np.mean(bins.assign(v) == k)
        sd = np.sqrt(expected * (1 - expected) / n_mc)
        z = abs(freq - expected) / sd if sd > 0 else (0.0 if freq == expected else np.inf)
        worst_z = max(worst_z, z)
        bad += z > 3
    report(9, "hard-metric equivalences", bitwise and bad == 0,
           f"bitwise equality on 200 all-event sets: {bitwise}; "
           f"50 Monte Carlo bin checks, worst |z| {worst_z:.2f} (<=3)")


# -- 10. CLI determinism -----------------------------------------------------

def _snapshot(root):
    out = {}
    for p in sorted(root.rglob("*")):
        if p.is_file():
            if p.name.endswith("manifest.json"):
                d = json.loads(p.read_text())
                out[str(p.relative_to(root))] = {k: v for k, v in d.items() if k not in VOLATILE_KEYS}
            else:
                out[str(p.relative_to(root))] = p.read_bytes()
    return out


def test_c10_cli_determinism(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    root = tmp_path / "run"
    commands = [
        ["simulate", "gamma", "--n", "2000", "--seed", "3", "--out", "run/data"],
        ["simulate", "risk-groups", "--n", "500", "--seed", "3", "--out", "run/data"],
        ["train", "--data", "run/data/gamma.csv", "--lam", "50", "--epochs", "3",
         "--hidden", "8", "--dropout", "0.1", "--out", "run/ck"],
        ["train", "--data", "run/data/gamma.csv", "--family", "mtlr", "--loss", "scrps",
         "--epochs", "2", "--interpolate", "--out", "run/ck_mtlr"],
        ["evaluate", "--checkpoint", "run/ck", "--data", "run/data/gamma.csv"],
        ["sweep", "--data", "run/data/gamma.csv", "--lams", "0,10", "--seeds", "0,1",
         "--epochs", "1", "--out", "run/sweep.csv"],
    ]
    snaps = []
    for _ in range(2):
        if root.exists():
            shutil.rmtree(root)
        codes = [main(c) for c in commands]
        assert codes == [0] * len(commands)
        snaps.append(_snapshot(root))
    differing = sorted(k for k in snaps[0] if snaps[0][k] != snaps[1].get(k))
    same_files = set(snaps[0]) == set(snaps[1])
    report(10, "CLI determinism", same_files and not differing,
           f"{len(snaps[0])} output files across {len(commands)} commands; differing: {differing}")
