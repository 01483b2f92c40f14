"""Acceptance criteria, each checked at its stated tolerance.

Every test records a single PASS/FAIL line, printed in the terminal summary
under "acceptance criteria".
"""

import time
from datetime import date

import numpy as np
import pytest

from _oracles import design_mc
from bpds.cli import main
from bpds.design import (DesignConfig, closed_form_tilt, curve, design_ensemble, design_sweep,
                         fit_design_models, run_design, target_rule_max, tilt_derivatives)
from bpds.dlm import NIWState, TVVARFilter, evolve, initial_state, update
from bpds.mixture import ModelEnsemble, NormalPredictive
from bpds.portfolio import PortfolioConfig, markowitz, run_backtest, synthetic_prices
from bpds.tilting import (achieved_score, initial_score_moments, local_tilt_approx,
                          ratio_standard_error, solve_tilt, tilt_weights)
from conftest import random_spd
from test_dlm import batch_posterior


def test_1_tilt_fixed_point(criterion):
    rng = np.random.default_rng(1)
    worst_time, worst_ratio, ok = 0.0, 0.0, True
    start = time.perf_counter()
    for i in range(50):
        J, k = rng.integers(1, 6), rng.integers(1, 4)
        preds = [NormalPredictive(rng.normal(size=k), random_spd(rng, k, rng.uniform(0.3, 2)))
                 for _ in range(J)]
        ens = ModelEnsemble.from_predictives(preds, 10_000, seed=i)
        w = rng.dirichlet(np.ones(J))
        m0, v0 = initial_score_moments(ens.samples, w)
        target = m0 + rng.uniform(-0.5, 0.5, size=k) * np.sqrt(np.diag(v0))
        t0 = time.perf_counter()
        sol = solve_tilt(ens.samples, w, target)
        worst_time = max(worst_time, time.perf_counter() - t0)
        tw = tilt_weights(ens.samples, sol.tau, w)
        e = np.exp(ens.samples @ sol.tau)
        for c in range(k):
            se = ratio_standard_error(w, e, ens.samples[:, :, c], sol.achieved[c])
            err = abs(sol.achieved[c] - target[c])
            worst_ratio = max(worst_ratio, err / max(1e-8, 3 * se))
            ok &= err <= max(1e-8, 3 * se)
        ok &= bool(sol.converged) and np.allclose(tw.pi_tilde, sol.pi_tilde)
    total = time.perf_counter() - start
    ok &= worst_time < 0.05 and total < 10
    assert criterion(1, ok, f"50 problems, worst solve {1e3 * worst_time:.1f} ms, suite "
                     f"{total:.2f} s, worst |g-m| / tol {worst_ratio:.2e}")


def test_2_gaussian_oracle(criterion):
    n = 100_000
    y = np.random.default_rng(2).standard_normal(n)
    ens = ModelEnsemble(y[None, :, None])
    lines, ok = [], True
    for m in (0.1, 0.5, 1.0):
        sol = solve_tilt(ens.samples, [1.0], [m])
        tau = sol.tau[0]
        e = np.exp(tau * y)
        _, h = achieved_score(ens.samples, [1.0], sol.tau)
        # delta method: se(tau) = se(g) / (dg / dtau)
        se_tau = ratio_standard_error([1.0], e[None], y[None], m) / h[0, 0]
        se_kl = e.std() / (np.sqrt(n) * e.mean())
        ok &= abs(tau - m) <= 3 * se_tau and abs(sol.kl - m * m / 2) <= 3 * se_kl
        lines.append(f"m={m}: |tau-m|/se {abs(tau - m) / se_tau:.2f}, "
                     f"|kl-m^2/2|/se {abs(sol.kl - m * m / 2) / se_kl:.2f}")
    assert criterion(2, ok, "; ".join(lines))


def test_3_local_perturbation_order(criterion):
    rng = np.random.default_rng(3)
    preds = [NormalPredictive([0.0, 1.0], [[1.0, 0.3], [0.3, 2.0]]),
             NormalPredictive([0.5, -0.5], [[0.5, 0.0], [0.0, 1.0]])]
    ens = ModelEnsemble.from_predictives(preds, 20_000, seed=3)
    w = np.array([0.4, 0.6])
    m0, v0 = initial_score_moments(ens.samples, w)
    direction = rng.normal(size=2) * np.sqrt(np.diag(v0))
    errs = []
    for h in range(4):
        eps = 0.2 * direction / 2**h
        tau_nr = solve_tilt(ens.samples, w, m0 + eps, tol=1e-13).tau
        tau_lin, _, _ = local_tilt_approx(m0, v0, eps)
        errs.append(np.linalg.norm(tau_nr - tau_lin))
    orders = np.log2(np.array(errs[:-1]) / np.array(errs[1:]))
    ok = bool(np.all(orders >= 1.8))
    assert criterion(3, ok, f"observed orders {np.round(orders, 3).tolist()}")


def test_4_derivative_checks(criterion):
    ens = ModelEnsemble.from_predictives(
        [NormalPredictive([0.2, -0.1], [[1.0, 0.4], [0.4, 0.8]]),
         NormalPredictive([-0.3, 0.5], [[0.6, -0.1], [-0.1, 1.2]])], 5000, seed=4)
    w, h = [0.3, 0.7], 1e-5
    worst = 0.0
    for tau in ([0.0, 0.0], [0.4, -0.2], [-0.8, 1.1]):
        tau = np.array(tau)
        _, jac = achieved_score(ens.samples, w, tau)
        for c in range(2):
            dt = np.zeros(2)
            dt[c] = h
            fd = (achieved_score(ens.samples, w, tau + dt)[0]
                  - achieved_score(ens.samples, w, tau - dt)[0]) / (2 * h)
            worst = max(worst, np.max(np.abs(fd - jac[:, c]) / np.abs(jac[:, c])))
    models = fit_design_models(DesignConfig(seed=4))
    x = np.linspace(0.5, 1.5, 41)
    worst_design = 0.0
    for tau in (0.05, 1.0, 12.0):
        t = np.full(x.shape, tau)
        da, d2a = tilt_derivatives(models, x, t)
        fa = (closed_form_tilt(models, x, t + h)["a"] - closed_form_tilt(models, x, t - h)["a"])
        fd2 = tilt_derivatives(models, x, t + h)[0] - tilt_derivatives(models, x, t - h)[0]
        worst_design = max(worst_design, np.max(np.abs(fa / (2 * h) - da) / np.abs(da)),
                           np.max(np.abs(fd2 / (2 * h) - d2a) / np.abs(d2a)))
    ok = worst <= 1e-5 and worst_design <= 1e-5
    assert criterion(4, ok, f"sample Jacobian rel err {worst:.1e}; closed-form derivative "
                     f"rel err {worst_design:.1e}")


def test_5_design_closed_forms_vs_monte_carlo(criterion):
    models = fit_design_models(DesignConfig(seed=5))
    pi = np.full(4, 0.25)
    grid = np.linspace(0.5, 1.5, 41)
    cur = curve(models, grid, target_rule_max(models), pi)
    worst, checks, bad = 0.0, 0, []
    for i, x in enumerate(grid):
        tau = cur["tau"][i]
        q = closed_form_tilt(models, x, tau)
        mc = design_mc(models, x, tau, pi, 100_000, seed=5)
        # the library's sample path on the same draws agrees with the oracle
        ens = design_ensemble(models, x, 100_000, 5)
        s = -(ens.samples[:, :, 0] - models.y0) ** 2 / 2 \
            - (models.penalties * (models.controls - models.x0) ** 2 / 2)[:, None]
        tw = tilt_weights(s[:, :, None], [tau], pi)
        assert np.allclose(tw.a, mc["a"][0], rtol=1e-10)
        assert np.allclose(tw.pi_tilde, mc["pi_tilde"][0], rtol=1e-10)
        closed = {"a": q["a"], "m_star": q["m_star"], "v_star": q["v_star"],
                  "pi_tilde": cur["pi_tilde"][i], "utility": cur["utility"][i]}
        for key, val in closed.items():
            est, se = mc[key]
            z = np.abs(np.asarray(val) - est) / np.maximum(se, 1e-300)
            checks += z.size
            worst = max(worst, float(z.max()))
            if np.any(z > 3):
                bad.append(f"{key}@x={x:.3f}")
    ok = not bad
    detail = f"{checks} comparisons on 41 controls, max |diff|/se {worst:.2f}"
    if bad:
        detail += f", outside 3 se: {', '.join(bad[:5])}"
    assert criterion(5, ok, detail)


def test_6_design_study_statistics(criterion):
    start = time.perf_counter()
    summary, ok = [], True
    means = {}
    for c in (1.0, 0.1):
        reps = design_sweep(DesignConfig(c=c), range(200))
        loss = {m: np.mean([r.row(m)["loss"] for r in reps]) for m in ("BPDS", "BMA", "Equal")}
        means[c] = loss
        summary.append(f"c={c}: mean loss BPDS {loss['BPDS']:.3f}, BMA {loss['BMA']:.3f}, "
                       f"Equal {loss['Equal']:.3f}")
    elapsed = time.perf_counter() - start
    ok_c1 = means[1.0]["BPDS"] < means[1.0]["BMA"] and means[1.0]["BPDS"] < means[1.0]["Equal"]
    ratio = means[0.1]["BMA"] / means[0.1]["BPDS"]
    ok_c01 = ratio >= 2.0
    ok = ok_c1 and ok_c01 and elapsed < 300
    ref = run_design(DesignConfig(seed=0))
    reference = (1.60, 1.14, 3.26, 0.61, 0.58, 1.21, 0.47)
    refs = ", ".join(f"{r['method']} {r['loss']:.2f}/{p:.2f}" for r, p in zip(ref.rows, reference))
    print(f"seed 0 losses (ours/reference single seed, not asserted): {refs}")
    assert criterion(6, ok, f"{'; '.join(summary)}; c=1 ordering {'ok' if ok_c1 else 'violated'}"
                     f"; c=0.1 BMA/BPDS ratio {ratio:.2f} (need >= 2); {elapsed:.1f} s")


def test_7_tvvar_filter(criterion):
    worst = 0.0
    for seed in range(20):
        rng = np.random.default_rng(100 + seed)
        p, q, n = rng.integers(1, 6), rng.integers(1, 4), rng.integers(5, 80)
        M0 = rng.normal(size=(p, q))
        C0 = random_spd(rng, p, 2.0)
        D0 = random_spd(rng, q, 1.0)
        F = rng.normal(size=(n, p))
        Y = F @ rng.normal(size=(p, q)) + rng.normal(size=(n, q))
        st = NIWState(M0, C0, q + 2.0, D0)
        for t in range(n):
            st = update(evolve(st), F[t], Y[t])
        Mn, Cn, hn, Dn = batch_posterior(M0, C0, q + 2.0, D0, F, Y)
        worst = max(worst, *(np.max(np.abs(a - b) / np.maximum(1.0, np.abs(b)))
                             for a, b in ((st.M, Mn), (st.C, Cn), (st.D, Dn))))
        assert st.h == hn
    rng = np.random.default_rng(7)
    y = np.cumsum(rng.normal(scale=0.01, size=(1003, 3)), axis=0)
    filt = TVVARFilter(initial_state(3, 3, 0.9995, 0.98, 1e-4), 3)
    min_eig = np.inf
    for t in range(3, 1003):
        filt.step(y[:t], y[t])
        min_eig = min(min_eig, np.linalg.eigvalsh(filt.state.C).min(),
                      np.linalg.eigvalsh(filt.state.D).min())
    hand = update(evolve(NIWState(np.zeros((1, 1)), np.eye(1), 3.0, np.eye(1))), [1.0], [2.0])
    hand_ok = hand.M[0, 0] == 1.0 and hand.C[0, 0] == 0.5 and hand.D[0, 0] == 3.0
    ok = worst <= 1e-8 and min_eig > 0 and filt.state.jitter_count == 0 and hand_ok
    assert criterion(7, ok, f"batch max rel err {worst:.1e} on 20 problems; 1000 steps min "
                     f"eigenvalue {min_eig:.2e}, jitter {filt.state.jitter_count}; hand example "
                     f"{'exact' if hand_ok else 'wrong'}")


def test_8_markowitz(criterion):
    rng = np.random.default_rng(8)
    worst, worst_scale = 0.0, 0.0
    for _ in range(100):
        q = rng.integers(2, 14)
        V, f = random_spd(rng, q, rng.uniform(1e-3, 10)), rng.normal(0.1, 0.5, size=q)
        m = rng.normal(0.1, 0.3)
        x = markowitz(f, V, m)
        worst = max(worst, abs(x.sum() - 1), abs(x @ f - m))
        xs = markowitz(f, rng.uniform(0.01, 100) * V, m)
        worst_scale = max(worst_scale, np.max(np.abs(xs - x)) / max(1.0, np.max(np.abs(x))))
    hand = markowitz([0.2, 0.0], np.eye(2), 0.2)
    hand_err = np.max(np.abs(hand - [1.0, 0.0]))
    ok = worst <= 1e-10 and hand_err <= 1e-12 and worst_scale <= 1e-8
    assert criterion(8, ok, f"max constraint error {worst:.1e}; hand example error "
                     f"{hand_err:.1e}; scale change {worst_scale:.1e}")


@pytest.fixture(scope="module")
def full_backtest():
    assets, dates, prices = synthetic_prices(q=3, n_days=600, seed=0)
    cfg = PortfolioConfig(n_samples=5000, seed=0)
    start = time.perf_counter()
    res = run_backtest(cfg, prices, dates, assets)
    return cfg, (assets, dates, prices), res, time.perf_counter() - start


def test_9_portfolio_backtest(criterion, full_backtest):
    cfg, (assets, dates, prices), res, elapsed = full_backtest
    cut = cfg.n_train + 40
    part = run_backtest(cfg, prices[:cut], dates[:cut], assets)
    n = cut - cfg.n_train
    trunc_ok = all(np.array_equal(led.x, res.ledgers[k].x[:n]) for k, led in part.ledgers.items())
    trunc_ok &= np.array_equal(part.next_decision.x, res.ledgers["BPDS"].x[n])
    inv = []
    for name, led in res.ledgers.items():
        if np.max(np.abs(led.x.sum(axis=1) - 1)) > 1e-10:
            inv.append(f"{name} sum-to-one")
        if np.any(led.value <= 0):
            inv.append(f"{name} value")
        if not np.allclose(led.value, 100 * np.cumprod(1 + led.returns / 100), rtol=1e-9):
            inv.append(f"{name} value recomputation")
    bp = res.ledgers["BPDS"]
    for nm, w in (("pi", bp.pi), ("pi_tilde", bp.pi_tilde), ("BMA pi", res.ledgers["BMA"].pi),
                  ("AVS pi", res.ledgers["AVS"].pi)):
        if np.any(w < 0) or not np.allclose(w.sum(axis=1), 1, atol=1e-12):
            inv.append(nm)
    if not np.all((res.d > 0) & (res.d < 0.1)):
        inv.append("cone")
    bma_dev = float(np.max(np.abs(res.bma_target - 0.1)))
    if bma_dev > 1e-12:
        inv.append("BMA target")
    rets = [res.ledgers[lab].returns for lab in cfg.labels]
    distinct = len(rets) == 6 and all(not np.allclose(rets[i], rets[j])
                                      for i in range(6) for j in range(i + 1, 6))
    ok = trunc_ok and not inv and distinct and elapsed < 180
    assert criterion(9, ok, f"truncation {'bit-exact' if trunc_ok else 'MISMATCH'}; invariant "
                     f"violations {inv or 'none'}; max |BMA target-0.1| {bma_dev:.1e}; six "
                     f"ledgers {'distinct' if distinct else 'NOT distinct'}; full run "
                     f"{elapsed:.1f} s; Sharpe BPDS {res.sharpe['BPDS']:.2f}, BMA "
                     f"{res.sharpe['BMA']:.2f}, AVS {res.sharpe['AVS']:.2f}")


def _snapshot(directory):
    return {p.name: p.read_bytes() for p in sorted(directory.iterdir())}


def test_10_determinism(criterion, tmp_path):
    import json
    prices = tmp_path / "prices.csv"
    main(["portfolio", "synth", "--seed", "10", "--days", "340", "--out", str(prices)])
    tilt = tmp_path / "tilt.json"
    tilt.write_text(json.dumps({
        "study": "et-solve", "seed": 10,
        "et_solve": {"models": [{"family": "normal", "mean": [0.0, 1.0],
                                 "cov": [[1.0, 0.2], [0.2, 0.5]]},
                                {"family": "t", "loc": [0.5, 0.0], "scale": [[1.0, 0.0],
                                                                             [0.0, 1.0]],
                                 "df": 5}],
                     "target": [0.4, 0.6]}}))
    runs = {"design": ["design", "run", "--seed", "10", "--c", "0.1"],
            "portfolio": ["portfolio", "run", "--seed", "10", "--prices", str(prices)],
            "et-solve": ["et-solve", "--config", str(tilt)]}
    same = {}
    for name, argv in runs.items():
        out = tmp_path / name
        snaps = []
        for _ in range(2):
            assert main(argv + ["--out", str(out)]) == 0
            snaps.append(_snapshot(out))
        same[name] = snaps[0] == snaps[1]
    ok = all(same.values())
    assert criterion(10, ok, ", ".join(f"{k} {'byte-identical' if v else 'DIFFERS'}"
                                       for k, v in same.items()))
