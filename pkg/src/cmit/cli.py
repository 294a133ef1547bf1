"""Batch command line: generate synthetic data, run the F1/F2/CMIT pipeline, compute statistics.

Exit codes: 0 success, 1 partial failure or degenerate statistics, 2 invalid input.
"""
from __future__ import annotations

import argparse
import concurrent.futures as cf
import dataclasses
import hashlib
import json
import logging
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .data_pipeline import (
    SplitSpec, StandardScaler, TimeSeriesDataset, concat_windows, default_profiles,
    generate_synthetic, load_csv, make_windows, split, write_csv,
)
from .ensemble_pso import SwarmConfig, build_ensemble_set, combine_pair, objective, pso_fit
from .forecaster import ModelConfig, build_model, predict, train
from .stats_eval import EvalTable, TableFormatError, emit_report, mape, read_eval_table, summarize

log = logging.getLogger("cmit")

MODEL_NAMES = {"layer": "Transformer", "cloud": "Cloud Transformer", "cmit": "CMIT"}
EXIT_OK, EXIT_PARTIAL, EXIT_INVALID = 0, 1, 2


class InvalidInput(Exception):
    pass


# --------------------------------------------------------------------------
# configuration


@dataclass
class RunConfig:
    """Declarative form of a full run; see README for the JSON schema."""
    datasets: list[str] = field(default_factory=list)
    synthetic: dict | None = None
    split: SplitSpec = field(default_factory=SplitSpec)
    model: dict = field(default_factory=dict)
    f1: dict = field(default_factory=dict)
    f2: dict = field(default_factory=dict)
    swarm: dict = field(default_factory=dict)
    out: str = "out"
    seed: int = 0
    workers: int = 0
    norm: str = "both"

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(d)
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise InvalidInput(f"unknown config keys: {sorted(unknown)}")
        if "split" in d and isinstance(d["split"], dict):
            d["split"] = SplitSpec.from_dict(d["split"])
        cfg = cls(**d)
        cfg.validate()
        return cfg

    def validate(self):
        if not self.datasets and not self.synthetic:
            raise InvalidInput("config needs 'datasets' paths or a 'synthetic' section")
        if self.norm not in ("layer", "cloud", "both"):
            raise InvalidInput(f"norm must be layer|cloud|both, got {self.norm!r}")
        if self.workers < 0:
            raise InvalidInput("workers must be >= 0")
        try:
            self.model_config("layer", 0)
            self.model_config("cloud", 0)
            self.swarm_config(0)
        except (TypeError, ValueError) as exc:
            raise InvalidInput(f"invalid nested config: {exc}") from exc

    def model_config(self, kind: str, seed: int) -> ModelConfig:
        over = self.f1 if kind == "layer" else self.f2
        return ModelConfig.from_dict({**self.model, **over, "norm_kind": kind, "seed": seed})

    def swarm_config(self, seed: int) -> SwarmConfig:
        return SwarmConfig(**{**self.swarm, "seed": seed})

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["split"] = self.split.to_dict()
        return d

    def resolved(self) -> dict:
        """Everything that influences results, with defaults filled in."""
        d = self.to_dict()
        for k in ("out", "workers"):
            d.pop(k)
        d["model_f1"] = self.model_config("layer", 0).to_dict()
        d["model_f2"] = self.model_config("cloud", 0).to_dict()
        d["swarm_resolved"] = dataclasses.asdict(self.swarm_config(0))
        return d

    def config_hash(self) -> str:
        blob = json.dumps(self.resolved(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


def derive_seed(global_seed: int, index: int, stream: int = 0) -> int:
    return int(np.random.SeedSequence([global_seed, index, stream]).generate_state(1)[0])


def physical_cores() -> int:
    # os.cpu_count reports logical cores; halve when hyper-threading is likely
    n = os.cpu_count() or 1
    return max(1, n // 2) if n >= 4 else n


# --------------------------------------------------------------------------
# per-dataset pipeline


@dataclass
class DatasetJob:
    index: int
    dataset: TimeSeriesDataset
    cfg: RunConfig
    out_dir: str
    meta: dict


def _write_with_header(path: Path, meta: dict, body: str):
    path.write_text("".join(f"# {k}={v}\n" for k, v in meta.items()) + body)


def run_dataset(job: DatasetJob) -> dict:
    """Train F1/F2, fit the PSO weights on validation predictions and score everything on test."""
    cfg, ds = job.cfg, job.dataset
    out = Path(job.out_dir) / "datasets" / ds.id
    out.mkdir(parents=True, exist_ok=True)
    meta = {**job.meta, "dataset": ds.id}

    parts = split(ds, cfg.split)
    scaler = StandardScaler.fit(parts.train_loads)
    mcfg = cfg.model_config("layer", derive_seed(cfg.seed, job.index))
    p = mcfg.lookback
    train_w = concat_windows([make_windows(seg, p, scaler) for seg in parts.train])

    def ctx(sub):
        i = ds.index_of(sub.dates[0])
        if i < p:
            raise ValueError(f"{ds.id}: not enough history before {sub.dates[0]} for lookback {p}")
        return ds.loads[i - p:i]

    val_w = make_windows(parts.val, p, scaler, context=ctx(parts.val))
    test_w = make_windows(parts.test, p, scaler, context=ctx(parts.test))

    kinds = ["layer", "cloud"] if cfg.norm == "both" else [cfg.norm]
    val_preds, test_preds = {}, {}
    for kind in kinds:
        mc = cfg.model_config(kind, derive_seed(cfg.seed, job.index))
        tm = train(build_model(mc), train_w, val_w, scaler)
        tag = "f1" if kind == "layer" else "f2"
        tm.save(out / f"{tag}_checkpoint.json", meta=meta)
        trace = "epoch,train_mse,val_mse\n" + "".join(f"{e},{a!r},{b!r}\n" for e, a, b in tm.loss_trace)
        _write_with_header(out / f"{tag}_loss.csv", meta, trace)
        val_preds[kind] = predict(tm, val_w)
        test_preds[kind] = predict(tm, test_w)

    truth = parts.test.loads
    result = {"dataset": ds.id, "mape": {}}
    for kind in kinds:
        result["mape"][MODEL_NAMES[kind]] = mape(truth, test_preds[kind])
    cols = {MODEL_NAMES[k]: test_preds[k] for k in kinds}
    if cfg.norm == "both":
        ts = build_ensemble_set(val_preds["layer"], val_preds["cloud"], parts.val.loads)
        fit = pso_fit(ts, cfg.swarm_config(derive_seed(cfg.seed, job.index, 1)))
        fused = combine_pair(test_preds["layer"], test_preds["cloud"], fit.w)
        result["mape"][MODEL_NAMES["cmit"]] = mape(truth, fused)
        cols[MODEL_NAMES["cmit"]] = fused
        fit.save(out / "weights.json", meta=meta)
        result["fit"] = {"f_opt": fit.f, "f1_only": objective(ts, [1, 0]), "f2_only": objective(ts, [0, 1])}
    lines = ["date,truth," + ",".join(cols)]
    for i, day in enumerate(parts.test.dates):
        lines.append(",".join([day.isoformat(), repr(float(truth[i]))] + [repr(float(c[i])) for c in cols.values()]))
    _write_with_header(out / "predictions.csv", meta, "\n".join(lines) + "\n")
    return result


def _run_job(job: DatasetJob) -> tuple[str, dict | None, str | None]:
    try:
        return job.dataset.id, run_dataset(job), None
    except Exception as exc:  # isolate per-dataset failures
        log.exception("dataset %s failed", job.dataset.id)
        return job.dataset.id, None, f"{type(exc).__name__}: {exc}"


def resolve_datasets(cfg: RunConfig) -> list[TimeSeriesDataset]:
    if cfg.synthetic:
        syn = {"n_clusters": 5, "n_days": 789, "seed": cfg.seed, **cfg.synthetic}
        profiles = default_profiles(syn["n_clusters"], syn["seed"])
        return [generate_synthetic(pr, syn["n_days"], derive_seed(syn["seed"], i, 2), dataset_id=f"D{i + 1}")
                for i, pr in enumerate(profiles)]
    out = []
    for path in cfg.datasets:
        out.append(load_csv(path))
    return out


# --------------------------------------------------------------------------
# commands


def cmd_generate(n_clusters: int, n_days: int, seed: int, out_dir) -> int:
    if n_clusters < 1:
        raise InvalidInput("n_clusters must be >= 1")
    if n_days < 60:
        raise InvalidInput(f"n_days must be >= 60, got {n_days}")
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write_probe"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        raise InvalidInput(f"output directory {out} is not writable: {exc}") from exc
    width = max(2, len(str(n_clusters)))
    print("file,rows,first_date,last_date,mean_load")
    for i, pr in enumerate(default_profiles(n_clusters, seed)):
        name = f"cluster_{i + 1:0{width}d}"
        ds = generate_synthetic(pr, n_days, derive_seed(seed, i, 2), dataset_id=name)
        path = out / f"{name}.csv"
        write_csv(ds, path)
        print(f"{path.name},{len(ds)},{ds.dates[0]},{ds.dates[-1]},{ds.loads.mean():.3f}")
    return EXIT_OK


def cmd_run(cfg: RunConfig) -> int:
    out = Path(cfg.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise InvalidInput(f"cannot create output directory {out}: {exc}") from exc
    meta = {"config_hash": cfg.config_hash(), "seed": cfg.seed, "version": __version__}
    (out / "config.json").write_text(json.dumps({**cfg.resolved(), "meta": meta}, indent=1, sort_keys=True) + "\n")
    try:
        datasets = resolve_datasets(cfg)
    except (OSError, ValueError) as exc:
        raise InvalidInput(str(exc)) from exc
    ids = [d.id for d in datasets]
    if len(set(ids)) != len(ids):
        raise InvalidInput(f"duplicate dataset ids: {ids}")
    jobs = [DatasetJob(i, ds, cfg, str(out), meta) for i, ds in enumerate(datasets)]
    workers = cfg.workers or physical_cores()
    if workers == 1 or len(jobs) == 1:
        results = [_run_job(j) for j in jobs]
    else:
        with cf.ProcessPoolExecutor(max_workers=min(workers, len(jobs))) as pool:
            results = list(pool.map(_run_job, jobs))

    ok = [(i, r) for i, r, err in results if r is not None]
    failures = {i: err for i, r, err in results if err is not None}
    (out / "failures.json").write_text(json.dumps(failures, indent=1, sort_keys=True) + "\n")
    if ok:
        models = list(ok[0][1]["mape"])
        table = EvalTable([i for i, _ in ok], models, np.array([[r["mape"][m] for m in models] for _, r in ok]), meta)
        table.to_csv(out / "eval_table.csv")
        fits = {i: r["fit"] for i, r in ok if "fit" in r}
        if fits:
            (out / "fit_objectives.json").write_text(json.dumps({"meta": meta, "fits": fits}, indent=1) + "\n")
        if len(models) >= 2:
            s = summarize(table)
            emit_report(s, out / "reports", header=meta)
    for i, err in failures.items():
        log.error("%s: %s", i, err)
    return EXIT_OK if not failures else EXIT_PARTIAL


def cmd_stats(eval_table_path, out_dir, svg: bool = False) -> int:
    try:
        table = read_eval_table(eval_table_path)
    except TableFormatError as exc:
        raise InvalidInput(str(exc)) from exc
    if len(table.model_names) < 2:
        raise InvalidInput("stats needs at least 2 model columns")
    s = summarize(table)
    files = emit_report(s, out_dir, svg=svg, header=table.meta)
    for m in table.model_names:
        w, l = s.win_loss[m]
        print(f"{m}: mean MAPE {s.mean_mape[m]:.2f}  win/loss {w}/{l}"
              + (f"  F-rank {s.friedman.avg_ranks[table.model_names.index(m)]:.2f}" if s.friedman else ""))
    for name, r in s.wilcoxon.items():
        print(f"{s.reference} vs. {name}: R+={r.r_plus:g} R-={r.r_minus:g} p={r.p_one_sided:.3g}")
    for err in s.errors:
        print(f"warning: {err}", file=sys.stderr)
    for key, path in files.items():
        log.info("wrote %s: %s", key, path)
    return EXIT_PARTIAL if s.errors else EXIT_OK


# --------------------------------------------------------------------------
# argument parsing


def _parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="cmit", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=__version__)
    sub = ap.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write synthetic cluster load CSVs")
    g.add_argument("--n-clusters", type=int, default=31)
    g.add_argument("--n-days", type=int, default=789)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)

    r = sub.add_parser("run", help="train F1/F2, fit CMIT weights, evaluate on test")
    r.add_argument("--config", required=True, help="JSON run configuration")
    r.add_argument("--seed", type=int)
    r.add_argument("--out")
    r.add_argument("--workers", type=int)
    r.add_argument("--norm", choices=["layer", "cloud", "both"])
    r.add_argument("--position-update", choices=["damped", "standard"])

    for name, helptext in (("stats", "statistics tables from an EvalTable CSV"),
                           ("report", "statistics tables plus an SVG bar chart")):
        s = sub.add_parser(name, help=helptext)
        s.add_argument("table", nargs="?", help="EvalTable CSV (default: the shipped published table)")
        s.add_argument("--out", required=True)
    return ap


def _load_run_config(args) -> RunConfig:
    try:
        raw = json.loads(Path(args.config).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise InvalidInput(f"cannot read config {args.config}: {exc}") from exc
    if not isinstance(raw, dict):
        raise InvalidInput("config must be a JSON object")
    for key in ("seed", "out", "workers", "norm"):
        if getattr(args, key) is not None:
            raw[key] = getattr(args, key)
    if args.position_update is not None:
        raw["swarm"] = {**raw.get("swarm", {}), "position_update": args.position_update}
    try:
        return RunConfig.from_dict(raw)
    except (TypeError, ValueError) as exc:
        raise InvalidInput(str(exc)) from exc


def _default_table_path() -> str:
    from importlib import resources
    return str(resources.files("cmit").joinpath("data/table2.csv"))


def main(argv=None) -> int:
    level = os.environ.get("CMIT_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")
    args = _parser().parse_args(argv)
    try:
        if args.command == "generate":
            return cmd_generate(args.n_clusters, args.n_days, args.seed, args.out)
        if args.command == "run":
            return cmd_run(_load_run_config(args))
        table = args.table or _default_table_path()
        return cmd_stats(table, args.out, svg=args.command == "report")
    except InvalidInput as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
