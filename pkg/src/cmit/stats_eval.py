"""Evaluation statistics: MAPE, win/loss counts, Friedman ranks and Wilcoxon signed-rank tests."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import stats as st


class DegenerateInputError(ValueError):
    pass


class TableFormatError(ValueError):
    pass


# --------------------------------------------------------------------------
# table


@dataclass
class EvalTable:
    dataset_ids: list[str]
    model_names: list[str]
    mape: np.ndarray                       # [datasets, models], percent
    meta: dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        self.mape = np.asarray(self.mape, dtype=float).reshape(len(self.dataset_ids), len(self.model_names))
        if np.isnan(self.mape).any():
            raise TableFormatError("EvalTable contains NaN")
        if len(set(self.dataset_ids)) != len(self.dataset_ids):
            raise TableFormatError("dataset ids must be unique")

    def column(self, name: str) -> np.ndarray:
        return self.mape[:, self.model_names.index(name)]

    def to_csv(self, path=None, fmt: str = "{:.6f}") -> str:
        buf = io.StringIO()
        for k, v in self.meta.items():
            buf.write(f"# {k}={v}\n")
        buf.write(",".join(["dataset", *self.model_names]) + "\n")
        for ds, row in zip(self.dataset_ids, self.mape):
            buf.write(",".join([ds, *(fmt.format(x) for x in row)]) + "\n")
        text = buf.getvalue()
        if path is not None:
            Path(path).write_text(text)
        return text


def read_eval_table(path) -> EvalTable:
    """Parse a ``dataset,<model>,...`` CSV; ``#`` lines carry ``key=value`` metadata."""
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise TableFormatError(f"cannot read {path}: {exc}") from exc
    return parse_eval_table(text, source=str(path))


def parse_eval_table(text: str, source: str = "<string>") -> EvalTable:
    meta, body = {}, []
    for line in text.splitlines():
        if line.startswith("#"):
            k, sep, v = line[1:].strip().partition("=")
            if sep:
                meta[k.strip()] = v.strip()
        elif line.strip():
            body.append(line)
    rows = list(csv.reader(body))
    if not rows or rows[0][0].strip().lower() != "dataset" or len(rows[0]) < 2:
        raise TableFormatError(f"{source}: header must start with 'dataset' and name >= 1 model")
    models = [c.strip() for c in rows[0][1:]]
    ids, vals = [], []
    for i, r in enumerate(rows[1:], start=2):
        if len(r) != len(models) + 1:
            raise TableFormatError(f"{source}: data row {i} has {len(r)} fields, expected {len(models) + 1}")
        try:
            vals.append([float(x) for x in r[1:]])
        except ValueError as exc:
            raise TableFormatError(f"{source}: data row {i}: {exc}") from None
        ids.append(r[0].strip())
    if not ids:
        raise TableFormatError(f"{source}: no data rows")
    if not np.all(np.isfinite(vals)) or np.min(vals) < 0:
        raise TableFormatError(f"{source}: MAPE values must be finite and >= 0")
    return EvalTable(ids, models, np.array(vals), meta)


def load_published_table() -> EvalTable:
    """The published 31-dataset MAPE table shipped with the package."""
    text = resources.files("cmit").joinpath("data/table2.csv").read_text()
    return parse_eval_table(text, source="table2.csv")


# --------------------------------------------------------------------------
# metrics


def mape(truth: Sequence[float], pred: Sequence[float]) -> float:
    """Mean absolute percentage error in percent."""
    y = np.asarray(truth, dtype=float)
    yh = np.asarray(pred, dtype=float)
    if y.shape != yh.shape or y.size == 0:
        raise ValueError(f"mape needs equal non-empty inputs, got {y.shape} and {yh.shape}")
    if np.any(y <= 0):
        raise ValueError("mape requires strictly positive truths")
    return float(100.0 * np.mean(np.abs(yh - y) / y))


def win_loss(table: EvalTable) -> dict[str, tuple[int, int]]:
    """Per model, datasets where it has the smallest MAPE (ties all win) and the rest."""
    if len(table.model_names) < 2:
        raise ValueError("win_loss needs at least 2 models")
    best = table.mape.min(axis=1, keepdims=True)
    wins = (table.mape == best).sum(axis=0)
    n = len(table.dataset_ids)
    return {m: (int(w), n - int(w)) for m, w in zip(table.model_names, wins)}


# --------------------------------------------------------------------------
# rank tests


def average_ranks(values: np.ndarray) -> np.ndarray:
    """Ascending ranks along the last axis, ties sharing their average rank."""
    return st.rankdata(values, axis=-1, method="average")


@dataclass
class FriedmanResult:
    avg_ranks: list[float]
    statistic: float
    p_value: float


def friedman(table: EvalTable) -> FriedmanResult:
    """Friedman test over datasets (blocks) and models (treatments), with tie correction."""
    n, k = table.mape.shape
    if k < 2:
        raise DegenerateInputError("friedman needs at least 2 models")
    if n < 2:
        raise DegenerateInputError("friedman needs at least 2 datasets")
    ranks = average_ranks(table.mape)
    avg = ranks.mean(axis=0)
    ties = 0.0
    for row in table.mape:
        _, counts = np.unique(row, return_counts=True)
        ties += float(np.sum(counts**3 - counts))
    denom = 1.0 - ties / (n * k * (k * k - 1))
    if denom <= 0:
        return FriedmanResult([float(r) for r in avg], 0.0, 1.0)
    chi2 = 12.0 * n / (k * (k + 1)) * float(np.sum((avg - (k + 1) / 2.0) ** 2)) / denom
    return FriedmanResult([float(r) for r in avg], chi2, float(st.chi2.sf(chi2, k - 1)))


@dataclass
class WilcoxonResult:
    r_plus: float
    r_minus: float
    n_effective: int
    z: float
    p_one_sided: float


def wilcoxon_signed_rank(x: Sequence[float], y: Sequence[float], zero_method: str = "wilcox") -> WilcoxonResult:
    """Paired signed-rank test on ``d = x - y``.

    ``zero_method="wilcox"`` drops zero differences; ``"pratt"`` ranks them
    and then discards their ranks. The statistic is
    ``z = (max(R+, R-) - n(n+1)/4) / sqrt(n(n+1)(2n+1)/24)`` with no
    continuity or tie correction, and the p-value is the upper normal tail.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError("wilcoxon needs two equal-length 1-D samples")
    if len(x) < 5:
        raise ValueError("wilcoxon needs at least 5 pairs")
    # decimal-equal differences must tie despite binary rounding
    d = np.round(x - y, 10)
    if np.all(d == 0):
        raise DegenerateInputError("all paired differences are zero")
    if zero_method == "wilcox":
        d = d[d != 0]
        r = average_ranks(np.abs(d))
    elif zero_method == "pratt":
        r = average_ranks(np.abs(d))
        keep = d != 0
        d, r = d[keep], r[keep]
    else:
        raise ValueError(f"unknown zero_method {zero_method!r}")
    n = len(d)
    r_plus = float(r[d > 0].sum())
    r_minus = float(r[d < 0].sum())
    if zero_method == "wilcox":
        mu, sigma = n * (n + 1) / 4.0, math.sqrt(n * (n + 1) * (2 * n + 1) / 24.0)
    else:
        total = r_plus + r_minus
        mu, sigma = total / 2.0, math.sqrt(float(np.sum(r**2)) / 4.0)
    z = (max(r_plus, r_minus) - mu) / sigma
    return WilcoxonResult(r_plus, r_minus, n, z, float(st.norm.sf(z)))


def exact_signed_rank_p(x: Sequence[float], y: Sequence[float]) -> float:
    """Exact one-sided p of ``max(R+, R-)`` by enumerating all sign assignments (small n only)."""
    d = np.round(np.asarray(x, float) - np.asarray(y, float), 10)
    d = d[d != 0]
    n = len(d)
    if n > 20:
        raise ValueError("exact enumeration limited to n <= 20")
    r = average_ranks(np.abs(d))
    observed = max(r[d > 0].sum(), r[d < 0].sum())
    signs = ((np.arange(2**n)[:, None] >> np.arange(n)) & 1).astype(bool)
    rp = (signs * r).sum(axis=1)
    return float(np.mean(rp >= observed - 1e-12))


# --------------------------------------------------------------------------
# reporting


@dataclass
class EvalSummary:
    table: EvalTable
    mean_mape: dict[str, float]
    win_loss: dict[str, tuple[int, int]]
    friedman: FriedmanResult | None
    wilcoxon: dict[str, WilcoxonResult]
    errors: list[str] = field(default_factory=list)

    @property
    def reference(self) -> str:
        return self.table.model_names[-1]


def summarize(table: EvalTable) -> EvalSummary:
    """Run every statistic; the last model column is the reference for the Wilcoxon tests.

    Failures of individual tests are collected in ``errors`` rather than raised.
    """
    errors = []
    means = {m: float(v) for m, v in zip(table.model_names, table.mape.mean(axis=0))}
    wl = win_loss(table) if len(table.model_names) >= 2 else {}
    try:
        fr = friedman(table)
    except DegenerateInputError as exc:
        fr = None
        errors.append(f"friedman: {exc}")
    ref = table.model_names[-1]
    wil = {}
    for name in table.model_names[:-1]:
        try:
            wil[name] = wilcoxon_signed_rank(table.column(name), table.column(ref))
        except ValueError as exc:
            errors.append(f"wilcoxon {ref} vs {name}: {exc}")
    return EvalSummary(table, means, wl, fr, wil, errors)


def _fmt_p(p: float) -> str:
    return f"{p:.2g}" if p < 1e-3 else f"{p:.5f}"


def comparison_table_csv(s: EvalSummary) -> str:
    """Per-dataset MAPEs plus Mean-MAPE, Win/Loss, F-rank and p-value rows."""
    models = s.table.model_names
    out = io.StringIO()
    w = csv.writer(out, lineterminator="\n")
    w.writerow(["Dataset", *models])
    for ds, row in zip(s.table.dataset_ids, s.table.mape):
        w.writerow([ds, *(f"{v:.2f}" for v in row)])
    w.writerow(["Mean-MAPE", *(f"{s.mean_mape[m]:.2f}" for m in models)])
    w.writerow(["Win/Loss", *(f"{s.win_loss[m][0]}/{s.win_loss[m][1]}" for m in models)])
    if s.friedman is not None:
        w.writerow(["F-rank", *(f"{r:.2f}" for r in s.friedman.avg_ranks)])
    w.writerow(["p-value", *(_fmt_p(s.wilcoxon[m].p_one_sided) if m in s.wilcoxon else "\\" for m in models)])
    if s.friedman is not None:
        w.writerow(["Friedman chi2", f"{s.friedman.statistic:.4f}", f"p={_fmt_p(s.friedman.p_value)}",
                    *([""] * (len(models) - 2))])
    return out.getvalue()


def significance_table_csv(s: EvalSummary) -> str:
    out = io.StringIO()
    w = csv.writer(out, lineterminator="\n")
    w.writerow(["Comparison", "R+", "R-", "n", "z", "p-value (one-sided)"])
    for name, r in s.wilcoxon.items():
        w.writerow([f"{s.reference} vs. {name}", f"{r.r_plus:g}", f"{r.r_minus:g}", r.n_effective,
                    f"{r.z:.4f}", _fmt_p(r.p_one_sided)])
    return out.getvalue()


def bar_data_csv(table: EvalTable) -> str:
    out = io.StringIO()
    w = csv.writer(out, lineterminator="\n")
    w.writerow(["dataset", "model", "mape"])
    for ds, row in zip(table.dataset_ids, table.mape):
        for m, v in zip(table.model_names, row):
            w.writerow([ds, m, f"{v:.6f}"])
    return out.getvalue()


def emit_report(s: EvalSummary, out_dir, svg: bool = False, header: dict | None = None) -> dict[str, Path]:
    """Write the comparison table, significance table and bar-chart data under ``out_dir``."""
    if s is None or len(s.table.dataset_ids) == 0:
        raise ValueError("nothing to report")
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create report directory {out_dir}: {exc}") from exc
    prefix = "".join(f"# {k}={v}\n" for k, v in (header or {}).items())
    files = {
        "comparison": out_dir / "comparison_table.csv",
        "significance": out_dir / "wilcoxon_table.csv",
        "bars": out_dir / "bar_data.csv",
    }
    bodies = {
        "comparison": comparison_table_csv(s),
        "significance": significance_table_csv(s),
        "bars": bar_data_csv(s.table),
    }
    for key, path in files.items():
        try:
            path.write_text(prefix + bodies[key])
        except OSError as exc:
            raise OSError(f"cannot write {path}: {exc}") from exc
    if svg:
        files["chart"] = out_dir / "bar_chart.svg"
        render_bar_chart(s.table, files["chart"])
    return files


def render_bar_chart(table: EvalTable, path) -> None:
    """Grouped bars of MAPE per dataset; needs matplotlib."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    matplotlib.rcParams["svg.hashsalt"] = "cmit"
    n, k = table.mape.shape
    x = np.arange(n)
    width = 0.8 / k
    fig, ax = plt.subplots(figsize=(max(8, n * 0.4), 4))
    for j, name in enumerate(table.model_names):
        ax.bar(x + (j - (k - 1) / 2) * width, table.mape[:, j], width, label=name)
    ax.set_xticks(x, table.dataset_ids, rotation=90)
    ax.set_ylabel("MAPE (%)")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
