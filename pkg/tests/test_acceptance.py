"""Acceptance criteria, one test and one printed PASS/FAIL line each."""
import json
import time

import numpy as np

from cmit.cli import main
from cmit.cloud_model import CloudDescriptor, forward_generate_arrays, reverse_generate
from cmit.ensemble_pso import SwarmConfig, objective, pso_fit
from cmit.stats_eval import load_published_table, read_eval_table, summarize

from desk import write_config
from gradcheck import ALL_CHECKS
from overfit import BOUNDS, STEPS, run_overfit
from psosets import grid_oracle, random_set

MODELS = ["Transformer", "Cloud Transformer", "CMIT"]


def _close(value, target, tol):
    return abs(value - target) <= tol


def test_criterion_1_published_statistics(tmp_path, verdict, capsys):
    t0 = time.perf_counter()
    code = main(["stats", "--out", str(tmp_path)])
    elapsed = time.perf_counter() - t0
    capsys.readouterr()
    s = summarize(load_published_table())
    means = [s.mean_mape[m] for m in MODELS]
    ranks = s.friedman.avg_ranks
    wt, wc = s.wilcoxon["Transformer"], s.wilcoxon["Cloud Transformer"]
    comp = (tmp_path / "comparison_table.csv").read_text()
    checks = [
        ("exit code", code == 0, f"{code}"),
        ("Mean-MAPE", all(_close(a, b, 0.01) for a, b in zip(means, [24.72, 24.41, 22.01]))
         and "Mean-MAPE,24.72,24.41,22.01" in comp, " / ".join(f"{m:.4f}" for m in means)),
        ("Win/Loss", [s.win_loss[m] for m in MODELS] == [(1, 30), (5, 26), (25, 6)],
         " ".join(f"{w}/{l}" for w, l in (s.win_loss[m] for m in MODELS))),
        ("F-rank", all(_close(a, b, 0.01) for a, b in zip(ranks, [2.35, 2.32, 1.32])),
         "got " + " / ".join(f"{r:.3f}" for r in ranks) + ", want 2.35 / 2.32 / 1.32"),
        ("Wilcoxon vs Transformer", (wt.r_plus, wt.r_minus) == (481, 15),
         f"R+={wt.r_plus:g} R-={wt.r_minus:g}, want 481/15"),
        ("Wilcoxon vs Cloud Transformer", (wc.r_plus, wc.r_minus) == (413.5, 82.5),
         f"R+={wc.r_plus:g} R-={wc.r_minus:g}, want 413.5/82.5"),
        ("p vs Transformer", abs(wt.p_one_sided / 2.6e-6 - 1) <= 0.2, f"{wt.p_one_sided:.3g}, want 2.6e-06 +-20%"),
        ("p vs Cloud Transformer", abs(wc.p_one_sided / 6.1e-4 - 1) <= 0.2, f"{wc.p_one_sided:.3g}, want 6.1e-04 +-20%"),
        ("runtime", elapsed < 1.0, f"{elapsed:.3f}s < 1s"),
    ]
    verdict(1, checks)


def test_criterion_2_cloud_roundtrip(verdict):
    t0 = time.perf_counter()
    x, _, _ = forward_generate_arrays(CloudDescriptor(10, 2, 0.2), 100_000, rng_seed=2024)
    d = reverse_generate(x)
    elapsed = time.perf_counter() - t0
    verdict(2, [
        ("Ex", _close(d.ex, 10, 0.05), f"{d.ex:.4f}"),
        ("En", _close(d.en, 2, 0.05), f"{d.en:.4f}"),
        ("He", _close(d.he, 0.2, 0.15), f"{d.he:.4f}"),
        ("runtime", elapsed < 5.0, f"{elapsed:.3f}s < 5s"),
    ])


def test_criterion_3_gradient_suite(verdict):
    worst = {}
    for name, check in ALL_CHECKS.items():
        worst[name] = max(max(check(seed).values()) for seed in range(20))
    verdict(3, [(name, err <= 1e-4, f"max rel err {err:.1e}") for name, err in sorted(worst.items())])


def test_criterion_4_overfit_oracle(verdict):
    t0 = time.perf_counter()
    checks = []
    for kind in ("layer", "cloud"):
        trained, _ = run_overfit(kind, stochastic=False)
        steps = len(trained.loss_trace) - 1
        mse = min(tr for _, tr, _ in trained.loss_trace)
        checks.append((f"{kind} norm", mse <= BOUNDS[kind] and steps <= STEPS,
                       f"train MSE {mse:.2e} <= {BOUNDS[kind]:g} after {steps} steps"))
    elapsed = time.perf_counter() - t0
    checks.append(("runtime", elapsed < 120, f"{elapsed:.1f}s < 120s"))
    verdict(4, checks)


def test_criterion_5_pso(verdict):
    monotone = corner = 0
    for seed in range(100):
        ts = random_set(seed)
        res = pso_fit(ts, SwarmConfig(seed=seed))
        monotone += all(b <= a for a, b in zip(res.trace, res.trace[1:]))
        corner += res.f <= min(objective(ts, (1, 0)), objective(ts, (0, 1))) + 1e-9
    dev = []
    for seed in range(1000, 1020):
        ts = random_set(seed)
        dev.append(abs(pso_fit(ts, SwarmConfig(seed=seed)).w[0] - grid_oracle(ts)[0]))
    verdict(5, [
        ("(a) monotone gbest", monotone == 100, f"{monotone}/100 sets"),
        ("(b) grid oracle", max(dev) <= 1e-2, f"max |w - w_grid| {max(dev):.1e} on 20 sets"),
        ("(c) corner bound", corner == 100, f"{corner}/100 sets"),
    ])


def _run(root, name):
    cfg = write_config(root / f"{name}.json")
    return main(["run", "--config", str(cfg), "--out", str(root / name)]), root / name


def test_criterion_6_end_to_end(tmp_path, verdict):
    code, out = _run(tmp_path, "run")
    table = read_eval_table(out / "eval_table.csv")
    fits = json.loads((out / "fit_objectives.json").read_text())["fits"]
    beats = [f["f_opt"] <= min(f["f1_only"], f["f2_only"]) + 1e-9 for f in fits.values()]
    reports = [(out / "reports" / n).exists() for n in ("comparison_table.csv", "wilcoxon_table.csv", "bar_data.csv")]
    # reported only: test-set superiority on synthetic data is not a requirement
    wins = int(np.sum(table.column("CMIT") <= table.column("Transformer")))
    verdict(6, [
        ("exit code", code == 0, f"{code}"),
        ("EvalTable", table.mape.shape == (5, 3) and table.model_names == MODELS
         and bool(np.all(np.isfinite(table.mape))), f"{table.mape.shape[0]} datasets x {table.mape.shape[1]} models"),
        ("reports", all(reports), "comparison, wilcoxon, bar data"),
        ("fit objective", len(beats) == 5 and all(beats), f"CMIT <= both single models on {sum(beats)}/5"),
        ("info", True, f"test MAPE CMIT <= Transformer on {wins}/5 synthetic datasets"),
    ])


def test_criterion_7_determinism(tmp_path, verdict):
    (c1, a), (c2, b) = _run(tmp_path, "a"), _run(tmp_path, "b")
    files = ["eval_table.csv"] + [f"datasets/D{i}/weights.json" for i in range(1, 6)]
    same = [(a / f).read_bytes() == (b / f).read_bytes() for f in files]
    verdict(7, [
        ("exit codes", c1 == c2 == 0, f"{c1}, {c2}"),
        ("byte-identical", all(same), f"{sum(same)}/{len(files)} files (EvalTable + weights)"),
    ])
