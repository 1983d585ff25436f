"""Acceptance criteria 1-9; each test records one PASS/FAIL line in the terminal summary."""
import json
import re
import time
from importlib import resources

import numpy as np

from conftest import MODEL_SEED
from syncstego import covmodel, devpipe, formats, lattice, syncembed
from syncstego.cli import main
from syncstego.costmap import (CostMap, costs_from_probabilities, pmf_from_lambda, probabilities_from_costs,
                               ternary_entropy, variance_from_p0)

ASSET = resources.files("syncstego").joinpath("data/neighbor_tables.txt").read_text()


def test_c1_gaussian_mapping_round_trip(criterion):
    t0 = time.perf_counter()
    n = 1000
    p0 = np.linspace(0.34, 0.999, n)
    q = 1.0 + np.arange(n) % 16
    pm = (1 - p0) / 2
    pmf = np.stack([pm, p0, pm], axis=-1)
    costs = costs_from_probabilities(pmf)[:, 0]
    back = pmf_from_lambda(costs, 1.0)
    var = variance_from_p0(back[:, 1], q)
    g = syncembed.quantized_pmf(np.zeros(n), np.sqrt(var), q)
    err = np.abs(g - pmf).max()
    dt = time.perf_counter() - t0
    criterion(1, "Gaussian mapping round trip", err <= 1e-9 and dt < 1.0,
              f"max |dp| = {err:.2e} over {n} points, {dt:.3f} s")


def _toys():
    rng = np.random.default_rng(2024)
    toys = []
    for i in range(20):
        n = 2 + i % 4                      # 2..5 variables including the target
        A = rng.normal(size=(n, n + 2))
        C = A @ A.T
        d = np.sqrt(np.diag(C))
        R = C / np.outer(d, d)
        v = rng.uniform(0.2, 5.0, n)
        S = R * np.sqrt(np.outer(v, v))
        h = rng.multivariate_normal(np.zeros(n - 1), S[1:, 1:])
        toys.append((S, h))
    return toys


def _mc_oracle(S, h, rng, n_samples=1_000_000, keep=0.05):
    """Conditional moments from samples only: thin slab around h, then local linear regression."""
    x = rng.multivariate_normal(np.zeros(len(S)), S, size=n_samples, method="eigh")
    y, X = x[:, 0], x[:, 1:] - h
    dist = np.abs(X / np.sqrt(np.diag(S)[1:])).max(axis=1)
    sel = dist <= np.quantile(dist, keep)
    D = np.column_stack([np.ones(sel.sum()), X[sel]])
    coef, *_ = np.linalg.lstsq(D, y[sel], rcond=None)
    resid = y[sel] - D @ coef
    m, p = D.shape
    s2 = resid @ resid / (m - p)
    se_mu = np.sqrt(s2 * np.linalg.inv(D.T @ D)[0, 0])
    se_var = s2 * np.sqrt(2.0 / (m - p))
    return coef[0], s2, se_mu, se_var


def test_c2_conditional_gaussian_vs_monte_carlo(criterion):
    t0 = time.perf_counter()
    rng = np.random.default_rng(7)
    worst = 0.0
    for S, h in _toys():
        sig = syncembed.LocalCovariance(S)
        g = syncembed.conditional_gaussian(sig, h)
        mu, var, se_mu, se_var = _mc_oracle(S, h, rng)
        worst = max(worst, abs(g.mean - mu) / se_mu, abs(g.var - var) / se_var)
    g = syncembed.conditional_gaussian(syncembed.build_sigma(1.0, [1.0], [0.5]), [1.0])
    biv = max(abs(g.mean - 0.5), abs(g.var - 0.75))
    dt = time.perf_counter() - t0
    criterion(2, "conditional Gaussian vs Monte Carlo", worst < 3 and biv <= 1e-12 and dt < 30,
              f"worst |z| = {worst:.2f} SE over 20 toys, bivariate err {biv:.1e}, {dt:.1f} s")


def test_c3_lambda_search(criterion, cover64):
    t0 = time.perf_counter()
    costs = CostMap.quant_proportional(cover64)
    nz = cover64.nzac()
    worst = 0.0
    for h in np.round(np.arange(1, 11) * 0.1, 1):
        pmf, sol = probabilities_from_costs(costs, h * nz)
        worst = max(worst, abs(ternary_entropy(pmf).sum() / nz - h))
    dt = time.perf_counter() - t0
    criterion(3, "lambda search", worst <= 1e-4 and dt < 5,
              f"max |H - target| = {worst:.1e} bits/nzAC (nzAC={nz}), {dt:.2f} s")


def test_c4_lattice_tables(criterion, capsys):
    ok_cli = main(["validate-tables", "--dump"]) == 0
    counts = capsys.readouterr().out.split()
    counts_ok = ok_cli and [int(c) for c in counts[2::3]] == list(lattice.LATTICE_COUNTS)
    headers = 0
    headers_ok = True
    for ln in ASSET.splitlines():
        m = re.match(r"^L(\d) (\d),(\d) B\d:", ln)
        if m:
            lat, mode = int(m.group(1)), (int(m.group(2)), int(m.group(3)))
            headers += 1
            headers_ok &= lattice.lattice_of(lat // 4, 0, mode) == lat
    faults = {
        "missing entry": ASSET.replace("L7 0,6 B0: 6,6 5,6", "L7 0,6 B0: 6,6", 1),
        "bad checksum": ASSET.replace("# Syntax:", "# syntax:"),
        "swapped blockref": ASSET.replace("blockref 1 -1 0", "blockref 1 -1 1"),
    }
    located = 0
    for text in faults.values():
        try:
            lattice.load_neighbor_tables(text)
        except lattice.TableValidationError as exc:
            located += bool(exc.issues) and all(i.message for i in exc.issues)
    criterion(4, "lattice tables", counts_ok and headers_ok and located == len(faults),
              f"counts {counts[2::3]}, {headers} header lines checked, {located}/{len(faults)} faults located")


def test_c5_lattice0_invariance(criterion, estimated_model, tables):
    covers = {"q=1": devpipe.make_cover(64, seed=1), "QF95": devpipe.make_cover(64, seed=2, quality=95)}
    mism = 0
    checked = 0
    conditioned = 0
    for name, cover in covers.items():
        costs = CostMap.quant_proportional(cover)
        for h in (0.2, 0.5):
            pmf, cmap, rep, realized = syncembed.synchronized_embed(costs, cover, estimated_model, tables,
                                                                    H_in=h, seed=3)
            lat = syncembed.lattice_index_map(*cover.blocks_shape)
            mism += int(np.count_nonzero(realized[lat == 0] != pmf[lat == 0]))
            checked += int((lat == 0).sum())
            conditioned += rep.n_conditioned
    criterion(5, "lattice 0 invariance", mism == 0 and conditioned > 0,
              f"{mism} differing pmf entries over {checked} lattice-0 coefficients, "
              f"{conditioned} conditioned elsewhere")


def test_c6_entropy_drop(criterion, estimated_model, tables):
    t0 = time.perf_counter()
    plan = syncembed.SyncPlan(estimated_model, tables)
    drops = []
    for i in range(20):
        cover = devpipe.make_cover(64, seed=100 + i)
        costs = CostMap.quant_proportional(cover)
        sched = lattice.build_schedule(*cover.blocks_shape[::-1], tables)
        for h in (0.1, 0.2, 0.3, 0.4, 0.5):
            cal = syncembed.calibrate_payload(costs, cover, estimated_model, tables, h, seed=i, q=np.ones((8, 8)),
                                              schedule=sched, plan=plan)
            drops.append(cal.H_in - cal.H_out)
    drops = np.array(drops)
    dt = time.perf_counter() - t0
    criterion(6, "entropy drop", np.all(drops > 0) and np.all(drops < 0.1) and dt < 300,
              f"{len(drops)} runs, drop in [{drops.min():.4f}, {drops.max():.4f}] bits/nzAC, {dt:.1f} s")


def test_c7_covariance_structure(criterion, tables):
    t0 = time.perf_counter()
    noise1 = devpipe.NoiseParams(a=0.01, b=0.0)
    noise2 = devpipe.NoiseParams(a=0.0, b=100.0)
    corr1 = covmodel.estimate_correlation(200, size=64, noise=noise1, seed=MODEL_SEED)
    corr2 = covmodel.estimate_correlation(200, size=64, noise=noise2, seed=MODEL_SEED)
    m1 = covmodel.sparsify(corr1, 0.05)
    m2 = covmodel.sparsify(corr2, 0.05)
    dt = time.perf_counter() - t0
    rep = covmodel.validate_structure(m1, corr1)
    diag_keys = [k for k, *_ in m1.entries() if k[0] != 0 and k[1] != 0]
    P, _ = covmodel.reorder_to_lattices(m1.dense((0, 0)))
    ident = all(np.array_equal(P[16 * g:16 * g + 16, 16 * g:16 * g + 16], np.eye(16)) for g in range(4))
    _, residual = covmodel.reorder_to_lattices(corr1)
    agree = covmodel.pattern_agreement(m1, m2)
    # reported, not gated: with independent seeds the threshold-boundary entries reshuffle by sampling noise
    corr3 = covmodel.estimate_correlation(200, size=64, noise=noise2, seed=MODEL_SEED + 1)
    agree_indep = covmodel.pattern_agreement(m1, covmodel.sparsify(corr3, 0.05))
    ok = (not diag_keys and rep.max_diagonal_rho < 0.05 and ident and residual < 0.05 and agree >= 0.95
          and dt < 600)
    criterion(7, "covariance structure", ok,
              f"{len(m1)} entries, max diagonal-offset |rho| {rep.max_diagonal_rho:.3f}, "
              f"identity blocks {ident}, residual {residual:.3f}, pattern agreement {agree:.3f} "
              f"(common seed; independent seeds {agree_indep:.3f}), {dt:.0f} s")


def test_c8_cli_determinism(criterion, estimated_model, tmp_path):
    formats.write_corr(tmp_path / "m.corr", estimated_model)
    assert main(["make-cover", "--size", "64", "--seed", "5", "--out", str(tmp_path / "c.qdct"),
                 "--costs-out", str(tmp_path / "c.cost")]) == 0
    outs = []
    codes = []
    for i, t in enumerate((1, 1, 8, 8)):
        d = tmp_path / f"run{i}"
        d.mkdir()
        codes.append(main(["embed", "--cover", str(tmp_path / "c.qdct"), "--costs", str(tmp_path / "c.cost"),
                           "--model", str(tmp_path / "m.corr"), "--payload", "0.4", "--seed", "17",
                           "--threads", str(t), "--out", str(d / "s.qdct"), "--changes", str(d / "s.chg"),
                           "--report", str(d / "r.json"), "--lattice-csv", str(d / "l.csv")]))
        outs.append(tuple((d / f).read_bytes() for f in ("s.qdct", "s.chg", "r.json", "l.csv")))
    same = all(o == outs[0] for o in outs)
    n_changed = json.loads(outs[0][2])["n_plus"] + json.loads(outs[0][2])["n_minus"]
    criterion(8, "determinism and thread invariance", codes == [0] * 4 and same and n_changed > 0,
              f"4 runs (threads 1,1,8,8), outputs identical: {same}")


def test_c9_performance_512(criterion, estimated_model, tables):
    cover = devpipe.make_cover(512, seed=9)
    costs = CostMap.quant_proportional(cover)
    t0 = time.perf_counter()
    pmf, cmap, rep, _ = syncembed.synchronized_embed(costs, cover, estimated_model, tables, H_in=0.4, seed=1,
                                                     threads=1)
    dt = time.perf_counter() - t0
    criterion(9, "512x512 performance", dt < 30 and rep.n_conditioned > 0,
              f"{dt:.1f} s single-threaded, drop {rep.drop:.4f} bits/nzAC")
