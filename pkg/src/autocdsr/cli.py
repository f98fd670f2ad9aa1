"""Command-line entry point: generate, train, evaluate, strata, trajectory, sweep, bench.

Every command works on a run directory with a fixed layout::

    <run>/config.resolved.json   resolved config of every command run here
    <run>/data/                  interactions.tsv + manifest.json
    <run>/checkpoints/
    <run>/logs/
    <run>/reports/

Errors are reported as a single JSON line on stderr, for example
``{"error": "config", "field": "model.num_heads", "message": "...", "exit": 3}``.
"""
from __future__ import annotations

import argparse
import json
import os
import shutil
import sys
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

from .config import ConfigError, build_dataclass, load_config_file, to_plain

THREADS_ENV = "AUTOCDSR_THREADS"
EXIT_OK, EXIT_RUNTIME, EXIT_USAGE, EXIT_CONFIG = 0, 1, 2, 3

DATA_FILE = "interactions.tsv"
MANIFEST_FILE = "manifest.json"
RESOLVED_FILE = "config.resolved.json"


class RunDirExists(RuntimeError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # one machine-parsable line instead of usage + message
        _emit("usage", "", message, EXIT_USAGE)
        raise SystemExit(EXIT_USAGE)


def _emit(kind: str, field_: str, message: str, code: int) -> None:
    print(json.dumps({"error": kind, "field": field_, "message": message, "exit": code}), file=sys.stderr)


# ----------------------------------------------------------- config tables


@dataclass
class EvalSettings:
    num_negatives: int = 99
    seed: int = 0
    ks: tuple[int, ...] = (5, 10, 20)

    def __post_init__(self):
        if self.num_negatives < 1:
            raise ValueError("num_negatives must be >= 1")
        if not self.ks or min(self.ks) < 1:
            raise ValueError("ks must be non-empty positive cut-offs")


@dataclass
class StrataSettings:
    k: int = 10
    num_negatives: int = 99
    seed: int = 0


@dataclass
class TrajectorySettings:
    window: int = 20
    fraction: float = 0.2


@dataclass
class SweepSettings:
    grid: tuple[tuple[float, float], ...] = ((1.0, 0.0), (0.9, 0.1), (0.5, 0.5))
    num_negatives: int = 99
    train: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.grid:
            raise ValueError("grid must not be empty")


@dataclass
class BenchSettings:
    methods: tuple[str, ...] = ("naive-cross-domain", "autocdsr")
    base: str = "naive-cross-domain"
    steps: int = 200
    warmup: int = 20
    train: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.base not in self.methods:
            raise ValueError("base must be one of methods")
        if self.steps < 200:
            raise ValueError("steps must be >= 200")


# ---------------------------------------------------------------- helpers


def _read_config(path: str | None) -> dict:
    return load_config_file(path) if path else {}


def _prepare_out(path: Path, force: bool, guard: Path | None = None) -> None:
    """Create ``path``; refuse to reuse an existing run unless forced."""
    probe = guard if guard is not None else path
    if probe.exists() and (probe.is_file() or any(probe.iterdir())) and not force:
        raise RunDirExists(f"{probe} already exists; pass --force to overwrite")
    if force and guard is not None and guard.is_dir():
        shutil.rmtree(guard)
    elif force and guard is None and path.is_dir():
        shutil.rmtree(path)
    path.mkdir(parents=True, exist_ok=True)


def _record_resolved(run: Path, command: str, resolved: dict) -> None:
    path = run / RESOLVED_FILE
    doc = json.loads(path.read_text()) if path.exists() else {}
    doc[command] = resolved
    path.write_text(json.dumps(doc, indent=2, sort_keys=True))


def _load_dataset(data_dir: Path):
    from .data import load_tsv, read_manifest_catalog

    data = data_dir / "data" if (data_dir / "data").is_dir() else data_dir
    catalog = read_manifest_catalog(data / MANIFEST_FILE)
    return load_tsv(data / DATA_FILE, catalog)


def _train_config(doc: dict, catalog, seed: int | None, prefix: str = ""):
    from .train import TrainConfig

    doc = dict(doc)
    model = dict(doc.get("model") or {})
    model.setdefault("vocab_size", catalog.size)
    model.setdefault("num_domains", max(len(catalog.domains), 1))
    doc["model"] = model
    overrides = {"seed": seed} if seed is not None else None
    return build_dataclass(TrainConfig, doc, prefix, overrides)


def _threads(args) -> int:
    if args.threads is not None:
        return max(int(args.threads), 1)
    return max(int(os.environ.get(THREADS_ENV, "1") or 1), 1)


def _copy_data(src: Path, run: Path) -> None:
    src_data = src / "data" if (src / "data").is_dir() else src
    dst = run / "data"
    if src_data.resolve() == dst.resolve():
        return
    dst.mkdir(parents=True, exist_ok=True)
    for name in (DATA_FILE, MANIFEST_FILE):
        shutil.copyfile(src_data / name, dst / name)


# --------------------------------------------------------------- commands


def cmd_generate(args) -> None:
    from .data import SynthConfig, synthesize, write_manifest, write_tsv

    doc = _read_config(args.config)
    cfg = build_dataclass(SynthConfig, doc, "", {"seed": args.seed} if args.seed is not None else None)
    out = Path(args.out)
    _prepare_out(out, args.force)
    ds = synthesize(cfg)
    (out / "data").mkdir(exist_ok=True)
    write_tsv(out / "data" / DATA_FILE, ds.sequences)
    write_manifest(out / "data" / MANIFEST_FILE, ds, {"generator": to_plain(cfg)})
    _record_resolved(out, "generate", to_plain(cfg))


def _load_run_dataset(args):
    if not args.data:
        raise ConfigError("--data", "a data directory is required")
    return _load_dataset(Path(args.data))


def cmd_train(args) -> None:
    from .train import SINGLE, domain_view, prepare_split, train

    doc = _read_config(args.config)
    data_dir = Path(args.data) if args.data else None
    if data_dir is None:
        raise ConfigError("--data", "a data directory is required")
    from .data import read_manifest_catalog

    data_sub = data_dir / "data" if (data_dir / "data").is_dir() else data_dir
    catalog = read_manifest_catalog(data_sub / MANIFEST_FILE)
    tcfg = _train_config(doc, catalog, args.seed)
    run = Path(args.out) if args.out else data_dir
    _prepare_out(run, args.force, guard=run / "checkpoints")
    for sub in ("logs", "reports"):
        if args.force and (run / sub).is_dir():
            shutil.rmtree(run / sub)
    _copy_data(data_dir, run)
    ds = _load_dataset(run)
    split = prepare_split(ds, tcfg)
    (run / "checkpoints").mkdir(exist_ok=True)
    if tcfg.method == SINGLE:
        domains = [tcfg.domain] if tcfg.domain is not None else list(catalog.domains)
        for d in domains:
            cfg_d = replace(tcfg, domain=None)
            train(
                cfg_d,
                domain_view(split, d),
                ds.catalog,
                log_dir=run / "logs" / f"domain-{d}",
                checkpoint_path=run / "checkpoints" / f"domain-{d}.json",
            )
    else:
        train(tcfg, split, ds.catalog, log_dir=run / "logs", checkpoint_path=run / "checkpoints" / "best.json")
    _record_resolved(run, "train", to_plain(tcfg))


def load_recommender(run: Path, catalog):
    """Scorer for a trained run directory (single-domain runs route by target domain)."""
    from .model import load_checkpoint
    from .train import AUTO_PLUS, SequenceRecommender, SingleDomainRecommender

    ckdir = run / "checkpoints"
    best = ckdir / "best.json"
    if best.exists():
        state, meta = load_checkpoint(best)
        method = meta.get("train_config", {}).get("method")
        return SequenceRecommender(state, bottleneck=method == AUTO_PLUS), "cross"
    models = {}
    for p in sorted(ckdir.glob("domain-*.json")):
        d = int(p.stem.split("-", 1)[1])
        state, _ = load_checkpoint(p)
        models[d] = SequenceRecommender(state, domain=d)
    if not models:
        raise FileNotFoundError(f"no checkpoints under {ckdir}")
    return SingleDomainRecommender(models, catalog), "single"


def _split_for_run(run: Path, ds):
    from .train import TrainConfig, prepare_split

    resolved = json.loads((run / RESOLVED_FILE).read_text()) if (run / RESOLVED_FILE).exists() else {}
    tdoc = resolved.get("train")
    tcfg = TrainConfig.from_dict(tdoc) if tdoc else TrainConfig(model=None)
    return prepare_split(ds, tcfg)


def cmd_evaluate(args) -> None:
    from .evaluation import evaluate

    doc = _read_config(args.config)
    es = build_dataclass(EvalSettings, doc, "", {"seed": args.seed} if args.seed is not None else None)
    run = Path(args.run)
    ds = _load_dataset(Path(args.data) if args.data else run)
    split = _split_for_run(run, ds)
    scorer, _ = load_recommender(run, ds.catalog)
    reports = run / "reports"
    _prepare_out(reports, args.force, guard=reports / "eval.json")
    n = min(es.num_negatives, ds.catalog.size - 1)
    rep = evaluate(scorer, split.test, ds.catalog, n, es.seed, es.ks, model_id=run.name, threads=_threads(args))
    rep.write_json(reports / "eval.json")
    rep.write_csv(reports / "eval.csv")
    _record_resolved(run, "evaluate", to_plain(es))


def cmd_strata(args) -> None:
    from .evaluation import strata_report

    doc = _read_config(args.config)
    ss = build_dataclass(StrataSettings, doc, "", {"seed": args.seed} if args.seed is not None else None)
    cross_run, single_run = Path(args.cross), Path(args.single)
    ds = _load_dataset(Path(args.data) if args.data else cross_run)
    split = _split_for_run(cross_run, ds)
    single, kind_s = load_recommender(single_run, ds.catalog)
    cross, kind_c = load_recommender(cross_run, ds.catalog)
    if kind_s != "single" or kind_c != "cross":
        raise ValueError("strata needs a single-domain run for --single and a cross-domain run for --cross")
    if cross.bottleneck:
        raise ValueError("strata attention statistics need a run without bottleneck tokens")
    out = Path(args.out) if args.out else cross_run / "reports"
    _prepare_out(out, args.force, guard=out / "strata.json")
    n = min(ss.num_negatives, ds.catalog.size - 1)
    table = strata_report(single, cross, cross.attention_stats, split.test, ds.catalog, ss.k, n, ss.seed)
    table.write_csv(out / "strata.csv")
    table.write_json(out / "strata.json")


def cmd_trajectory(args) -> None:
    from .evaluation import weight_trajectory_report
    from .pareto import read_step_log

    doc = _read_config(args.config)
    ts = build_dataclass(TrajectorySettings, doc)
    logs: dict[float, list] = {}
    for r in args.runs:
        run = Path(r)
        steps = run / "logs" / "steps.csv"
        if not steps.exists():
            raise FileNotFoundError(f"missing log {steps}")
        resolved = json.loads((run / RESOLVED_FILE).read_text())
        rate = float(resolved["train"].get("corruption_rate", 0.0))
        logs.setdefault(rate, []).append(read_step_log(steps))
    out = Path(args.out)
    _prepare_out(out, args.force, guard=out / "trajectory.csv")
    rep = weight_trajectory_report(logs, window=ts.window, fraction=ts.fraction)
    rep.write_csv(out / "trajectory.csv")
    rep.write_summary_csv(out / "trajectory_summary.csv")


def cmd_sweep(args) -> None:
    from .train import sweep_static_weights, prepare_split

    doc = _read_config(args.config)
    ds = _load_run_dataset(args)
    train_doc = doc.get("train", {})
    sw = build_dataclass(SweepSettings, doc)
    tcfg = _train_config(train_doc, ds.catalog, args.seed, "train")
    out = Path(args.out)
    _prepare_out(out, args.force)
    results = sweep_static_weights(tcfg, prepare_split(ds, tcfg), ds.catalog, sw.grid, sw.num_negatives)
    (out / "checkpoints").mkdir()
    (out / "reports").mkdir()
    from .model import save_checkpoint

    rows = []
    for alpha, rep, res in results:
        tag = f"static-{alpha[0]:g}-{alpha[1]:g}"
        save_checkpoint(out / "checkpoints" / f"{tag}.json", res.state, {"static_alpha": list(alpha)})
        rep.write_json(out / "reports" / f"{tag}.json")
        for d, m in rep.per_domain.items():
            rows.append({"alpha1": alpha[0], "alpha2": alpha[1], "domain": d, **m})
    _write_rows(out / "reports" / "sweep.csv", rows)
    _record_resolved(out, "sweep", {**to_plain(sw), "train": to_plain(tcfg)})


def cmd_bench(args) -> None:
    from .evaluation import overhead_report, time_steps, write_overhead_csv
    from .train import Trainer, prepare_split

    doc = _read_config(args.config)
    ds = _load_run_dataset(args)
    bs = build_dataclass(BenchSettings, doc)
    tcfg = _train_config(bs.train, ds.catalog, args.seed, "train")
    out = Path(args.out)
    _prepare_out(out, args.force)
    split = prepare_split(ds, tcfg)
    rates = {}
    for m in bs.methods:
        cfg = _train_config({**bs.train, "method": m}, ds.catalog, args.seed, "train")
        trainer = Trainer(cfg, ds.catalog)
        batches = trainer.batches(split.train)
        rates[m] = time_steps(lambda _k: trainer.step(next(batches)), bs.steps, bs.warmup)
    rows = overhead_report(rates, bs.base)
    (out / "reports").mkdir()
    write_overhead_csv(out / "reports" / "overhead.csv", rows)
    _record_resolved(out, "bench", {**to_plain(bs), "train": to_plain(tcfg)})


def _write_rows(path: Path, rows: list[dict]) -> None:
    import csv

    if not rows:
        path.write_text("")
        return
    with path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)


# ------------------------------------------------------------------ parser


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="autocdsr", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, out_required=False):
        sp.add_argument("--config", help="JSON or TOML config file")
        sp.add_argument("--out", required=out_required, help="output run directory")
        sp.add_argument("--seed", type=int, help="override the config seed")
        sp.add_argument("--force", action="store_true", help="overwrite existing outputs")
        sp.add_argument("--threads", type=int, help=f"worker threads (default ${THREADS_ENV} or 1)")

    sp = sub.add_parser("generate", help="write a synthetic dataset (TSV + manifest)")
    common(sp, out_required=True)
    sp.set_defaults(func=cmd_generate)

    sp = sub.add_parser("train", help="train one method; writes checkpoints and logs")
    common(sp)
    sp.add_argument("--data", help="directory holding data/ (defaults the run directory)")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("evaluate", help="test-set report for a trained run")
    common(sp)
    sp.add_argument("--run", required=True, help="trained run directory")
    sp.add_argument("--data", help="dataset directory (default: the run)")
    sp.set_defaults(func=cmd_evaluate)

    sp = sub.add_parser("strata", help="single- vs cross-domain strata table")
    common(sp)
    sp.add_argument("--single", required=True, help="single-domain run directory")
    sp.add_argument("--cross", required=True, help="cross-domain run directory")
    sp.add_argument("--data", help="dataset directory (default: the cross run)")
    sp.set_defaults(func=cmd_strata)

    sp = sub.add_parser("trajectory", help="alpha2 trajectories across corruption rates")
    common(sp, out_required=True)
    sp.add_argument("--runs", nargs="+", required=True, help="trained run directories")
    sp.set_defaults(func=cmd_trajectory)

    sp = sub.add_parser("sweep", help="static-weight sweep")
    common(sp, out_required=True)
    sp.add_argument("--data", required=True, help="dataset directory")
    sp.set_defaults(func=cmd_sweep)

    sp = sub.add_parser("bench", help="per-step throughput and overhead")
    common(sp, out_required=True)
    sp.add_argument("--data", required=True, help="dataset directory")
    sp.set_defaults(func=cmd_bench)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # --help (0) or a usage error (2)
        return int(exc.code or 0)
    try:
        args.func(args)
    except ConfigError as exc:
        _emit("config", exc.field, exc.message, EXIT_CONFIG)
        return EXIT_CONFIG
    except RunDirExists as exc:
        _emit("exists", "--out", str(exc), EXIT_CONFIG)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001 - any failure maps to the runtime exit code
        _emit("runtime", "", f"{type(exc).__name__}: {exc}", EXIT_RUNTIME)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
