"""Command-line harness: ``gen``, ``train``, ``sweep`` and ``report``.

Every command takes one JSON run config (``--config``).  Keys mirror the
dataclasses: ``protocol``, ``strategy``, ``optim``, ``losses``, ``encoder``,
``capacity``, ``seeds``, ``out``, ``data`` and ``convention``.  Missing keys
take the library defaults.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import json
import logging
import math
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import DomainSpec, ProtocolSpec, generate_domain, load_dataset, save_dataset
from .eval import CONVENTIONS, SUMMARY_HEADER, read_rmatrix_csv, report, summary_row, write_rmatrix_csv
from .losses import LossConfig
from .model import EncoderConfig
from .trainer import ABLATIONS, METHODS, OptimConfig, StrategyConfig, run_protocol

log = logging.getLogger("replaylab")

SWEEP_HEADER = ["omega", "mr_at_1_mean", "forgetting_mean"]
MANIFEST = "manifest.json"
HISTORY_FIELDS = ["step", "epoch", "batch_size", "l_pr", "l_kd", "l_rehearsal", "l_mse",
                  "active_fraction"]


class CliError(Exception):
    """User-facing failure; printed and turned into a nonzero exit."""


# ---------------------------------------------------------------- config


def _protocol_from(d: dict) -> ProtocolSpec:
    d = dict(d)
    domains = d.pop("domains", None)
    if domains is not None:
        d["domains"] = [DomainSpec(**{k: tuple(v) if isinstance(v, list) else v
                                      for k, v in spec.items()}) for spec in domains]
    proto = ProtocolSpec(**d)
    for spec in proto.domains:
        spec.validate()
    return proto


@dataclass
class RunConfig:
    protocol: ProtocolSpec = field(default_factory=ProtocolSpec)
    strategy: StrategyConfig = field(default_factory=StrategyConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    losses: LossConfig = field(default_factory=LossConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    capacity: int = 64
    seeds: list[int] = field(default_factory=lambda: [0])
    out: str = "runs"
    data: str | None = None
    convention: str = "eq8-literal"

    def __post_init__(self):
        if self.capacity < 1:
            raise ValueError("capacity must be >= 1")
        if not self.seeds:
            raise ValueError("need at least one seed")
        if self.convention not in CONVENTIONS:
            raise ValueError(f"convention must be one of {CONVENTIONS}")

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        kw = dict(d)
        if "protocol" in kw:
            kw["protocol"] = _protocol_from(kw["protocol"])
        for key, typ in (("strategy", StrategyConfig), ("optim", OptimConfig),
                         ("losses", LossConfig), ("encoder", EncoderConfig)):
            if key in kw:
                kw[key] = typ(**kw[key])
        return cls(**kw)

    def to_dict(self) -> dict:
        return json.loads(json.dumps(dataclasses.asdict(self)))

    @property
    def data_dir(self) -> Path:
        return Path(self.data) if self.data else Path(self.out) / "data"

    def digest(self) -> str:
        return sha256_text(canonical_json(self.to_dict()))


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def sha256_text(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def sha256_files(paths: Sequence[Path]) -> str:
    h = hashlib.sha256()
    for p in paths:
        h.update(Path(p).name.encode("utf-8"))
        h.update(Path(p).read_bytes())
    return h.hexdigest()


def load_config(path: str | None) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise CliError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise CliError(f"config {path} is not valid JSON: {exc}") from exc
    try:
        return RunConfig.from_dict(doc)
    except (TypeError, ValueError) as exc:
        raise CliError(f"invalid config {path}: {exc}") from exc


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _write_csv(path: Path, header: list[str], rows: list[list]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _read_csv(path: Path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


# ---------------------------------------------------------------- gen


def domain_file(data_dir: Path, t: int) -> Path:
    return Path(data_dir) / f"domain_{t + 1}.jsonl"


def cmd_gen(cfg: RunConfig, out: str | Path | None = None) -> list[Path]:
    """Write one JSONL file per domain plus ``protocol.json``."""
    data_dir = Path(out) if out is not None else cfg.data_dir
    try:
        data_dir.mkdir(parents=True, exist_ok=True)
        paths = []
        for t, spec in enumerate(cfg.protocol.domains):
            path = domain_file(data_dir, t)
            save_dataset(path, generate_domain(spec))
            paths.append(path)
        _write_json(data_dir / "protocol.json", {
            "protocol": cfg.to_dict()["protocol"],
            "config_hash": cfg.digest(),
            "files": [p.name for p in paths],
            "content_hash": sha256_files(paths),
        })
    except OSError as exc:
        raise CliError(f"cannot write datasets to {data_dir}: {exc}") from exc
    return paths


# ---------------------------------------------------------------- train


def run_label(method: str, ablation: str = "none") -> str:
    return method if ablation == "none" else f"{method}-{ablation}"


def _domain_paths(cfg: RunConfig) -> list[Path]:
    paths = [domain_file(cfg.data_dir, t) for t in range(len(cfg.protocol.domains))]
    for p in paths:
        if not p.is_file():
            raise CliError(f"missing dataset file {p} (run 'gen' first)")
    return paths


def _train_one(cfg_dict: dict, label: str, seed: int, run_dir: str) -> dict:
    """Worker: one protocol run for one seed, writing all its artifacts."""
    cfg = RunConfig.from_dict(cfg_dict)
    paths = _domain_paths(cfg)
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / MANIFEST).unlink(missing_ok=True)

    result = run_protocol(cfg.protocol, cfg.strategy, cfg.optim, cfg.losses,
                          capacity=cfg.capacity, seed=seed,
                          load_domain=lambda t: load_dataset(paths[t]),
                          encoder_cfg=cfg.encoder, out_dir=run_dir)
    rep = report(result.r_matrix, cfg.convention)
    write_rmatrix_csv(run_dir / "rmatrix.csv", result.r_matrix)
    _write_csv(run_dir / "summary.csv", SUMMARY_HEADER, [summary_row(label, seed, rep)])
    _write_csv(run_dir / "history.csv", HISTORY_FIELDS,
               [[h.get(k, "") for k in HISTORY_FIELDS] for h in result.state.history])
    manifest = {
        "method": label, "seed": seed, "config": cfg_dict,
        "config_hash": sha256_text(canonical_json(cfg_dict)),
        "input_hash": sha256_files(paths),
        "convention": cfg.convention,
        "wall_times": result.wall_times,
        "r_matrix": result.r_matrix.tolist(),
        "mr_at_1": rep.mr_at_1, "forgetting": rep.forgetting,
        "complete": True,
    }
    # written last: its presence marks the run complete
    _write_json(run_dir / MANIFEST, manifest)
    return manifest


def _dispatch(jobs: int, tasks: list[tuple]) -> list[dict]:
    if jobs <= 1 or len(tasks) <= 1:
        return [_train_one(*t) for t in tasks]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        futures = [pool.submit(_train_one, *t) for t in tasks]
        return [f.result() for f in futures]


def _merge_summary(path: Path, rows: list[list]) -> None:
    """Upsert rows keyed by (method, seed) into an aggregate summary CSV."""
    merged: dict[tuple[str, str], list] = {}
    if path.is_file():
        for r in _read_csv(path):
            merged[(r["method"], r["seed"])] = [r[k] for k in SUMMARY_HEADER]
    for r in rows:
        merged[(str(r[0]), str(r[1]))] = r
    ordered = sorted(merged.values(), key=lambda r: (str(r[0]), int(r[1])))
    _write_csv(path, SUMMARY_HEADER, ordered)


def cmd_train(cfg: RunConfig, jobs: int = 1, out: str | Path | None = None) -> list[dict]:
    """Run the protocol once per seed; returns the run manifests."""
    _domain_paths(cfg)
    label = run_label(cfg.strategy.method, _ablation_of(cfg.strategy))
    root = Path(out) if out is not None else Path(cfg.out)
    cfg_dict = cfg.to_dict()
    tasks = [(cfg_dict, label, seed, str(root / label / f"seed{seed}")) for seed in cfg.seeds]
    try:
        manifests = _dispatch(jobs, tasks)
    except RuntimeError as exc:
        raise CliError(str(exc)) from exc
    rows = []
    for m in manifests:
        rows.append(_read_csv(Path(root) / label / f"seed{m['seed']}" / "summary.csv")[0])
    _merge_summary(root / "summary.csv", [[r[k] for k in SUMMARY_HEADER] for r in rows])
    return manifests


def _ablation_of(strategy: StrategyConfig) -> str:
    """Name of the single ablation a strategy matches, else "none"."""
    base = StrategyConfig(method=strategy.method)
    fields = ("sampling", "rehearsal_enabled", "replay_mode", "memory_policy")
    for name in ("no-loss-aware", "no-rehearsal", "mix", "max-replacement"):
        probe = dataclasses.replace(base, **ABLATIONS[name])
        if all(getattr(probe, k) == getattr(strategy, k) for k in fields):
            return name
    return "none"


# ---------------------------------------------------------------- sweep


def _fmt_value(v: float) -> str:
    return repr(float(v))


def cmd_sweep(cfg: RunConfig, values: Sequence[float], jobs: int = 1,
              out: str | Path | None = None) -> Path:
    """Run every omega value over all seeds and write ``sweep_omega.csv``.

    A value whose ``done.json`` exists under ``sweep/omega_<v>/`` is not
    rerun, so an interrupted sweep resumes where it stopped.
    """
    if not values:
        raise CliError("sweep needs at least one value")
    for v in values:
        if not math.isfinite(v) or v < 0:
            raise CliError(f"invalid omega value {v!r}: must be finite and >= 0")
    _domain_paths(cfg)
    root = Path(out) if out is not None else Path(cfg.out)
    rows = []
    for v in values:
        vdir = root / "sweep" / f"omega_{_fmt_value(v)}"
        done = vdir / "done.json"
        if done.is_file():
            rec = json.loads(done.read_text(encoding="utf-8"))
        else:
            vcfg = dataclasses.replace(cfg, losses=dataclasses.replace(cfg.losses, omega=float(v)))
            manifests = cmd_train(vcfg, jobs=jobs, out=vdir)
            fs = [m["forgetting"] for m in manifests if m["forgetting"] is not None]
            rec = {
                "omega": float(v),
                "seeds": [m["seed"] for m in manifests],
                "mr_at_1_mean": float(np.mean([m["mr_at_1"] for m in manifests])),
                "forgetting_mean": float(np.mean(fs)) if fs else None,
                "config_hash": vcfg.digest(),
            }
            _write_json(done, rec)
        f = rec["forgetting_mean"]
        rows.append([_fmt_value(v), repr(rec["mr_at_1_mean"]), "" if f is None else repr(f)])
    path = root / "sweep_omega.csv"
    _write_csv(path, SWEEP_HEADER, rows)
    return path


# ---------------------------------------------------------------- report


def _find_runs(paths: Sequence[str | Path]) -> tuple[list[Path], list[Path]]:
    """Seed directories under ``paths``: (complete, incomplete)."""
    complete, incomplete = [], []
    seen = set()
    for p in paths:
        p = Path(p)
        if not p.exists():
            incomplete.append(p)
            continue
        candidates = [p] if (p / "rmatrix.csv").exists() or (p / MANIFEST).exists() else []
        candidates += sorted({q.parent for pat in ("rmatrix.csv", MANIFEST) for q in p.rglob(pat)})
        for c in candidates:
            # sweep runs are only reported when asked for directly
            if c.resolve() in seen or "sweep" in c.relative_to(p).parts:
                continue
            seen.add(c.resolve())
            ok = (c / MANIFEST).is_file() and (c / "rmatrix.csv").is_file()
            (complete if ok else incomplete).append(c)
    return complete, incomplete


def cmd_report(paths: Sequence[str | Path], out: str | Path,
               convention: str | None = None) -> list[Path]:
    """Merge completed runs into comparison, series and R-matrix grid CSVs."""
    if not paths:
        raise CliError("report needs at least one run directory")
    complete, incomplete = _find_runs(paths)
    for p in incomplete:
        print(f"skipping incomplete run: {p}", file=sys.stderr)
    if not complete:
        raise CliError("no completed runs found")
    runs: dict[str, list[tuple[int, np.ndarray]]] = {}
    conv_used = set()
    for c in complete:
        m = json.loads((c / MANIFEST).read_text(encoding="utf-8"))
        conv_used.add(convention or m.get("convention", "eq8-literal"))
        runs.setdefault(m["method"], []).append((int(m["seed"]), read_rmatrix_csv(c / "rmatrix.csv")))
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    conv = convention or (conv_used.pop() if len(conv_used) == 1 else "eq8-literal")

    summary, comparison, series, written = [], [], [], []
    for method in sorted(runs):
        items = sorted(runs[method], key=lambda x: x[0])
        reps = [report(r, conv) for _, r in items]
        summary += [summary_row(method, s, rep) for (s, _), rep in zip(items, reps)]
        fs = [rep.forgetting for rep in reps if rep.forgetting is not None]
        comparison.append([method, len(items), repr(float(np.mean([rep.mr_at_1 for rep in reps]))),
                           repr(float(np.mean(fs))) if fs else ""])
        mean_r = np.mean([r for _, r in items], axis=0)
        T = mean_r.shape[0]
        for l in range(T):
            series.append([method, l + 1, repr(float(mean_r[l, :l + 1].mean()))]
                          + [repr(float(v)) for v in mean_r[l]])
        grid = out / f"rmatrix_{method}.csv"
        _write_csv(grid, ["step"] + [f"task{t + 1}" for t in range(mean_r.shape[1])],
                   [[l + 1] + [repr(float(v)) for v in mean_r[l]] for l in range(T)])
        written.append(grid)
    n_tasks = max(r.shape[1] for items in runs.values() for _, r in items)
    targets = {
        "summary.csv": (SUMMARY_HEADER, summary),
        "comparison.csv": (["method", "n_seeds", "mr_at_1_mean", "forgetting_mean"], comparison),
        "series.csv": (["method", "step", "seen_mean"] + [f"task{t + 1}" for t in range(n_tasks)], series),
    }
    for name, (header, rows) in targets.items():
        _write_csv(out / name, header, rows)
        written.append(out / name)
    _write_json(out / "report.json", {"convention": conv, "runs": [str(c) for c in complete],
                                      "skipped": [str(p) for p in incomplete]})
    return written


# ---------------------------------------------------------------- entry point


def _apply_overrides(cfg: RunConfig, args) -> RunConfig:
    if getattr(args, "seed", None):
        cfg.seeds = list(args.seed)
    if getattr(args, "convention", None):
        cfg.convention = args.convention
    method = getattr(args, "method", None)
    ablation = getattr(args, "ablation", None)
    if method or ablation:
        method = method or cfg.strategy.method
        keep = {k: getattr(cfg.strategy, k) for k in ("kd_variant", "selection_source")}
        if ablation:
            cfg.strategy = StrategyConfig.from_ablation(ablation, method=method, **keep)
        else:
            cfg.strategy = dataclasses.replace(cfg.strategy, method=method)
    cfg.strategy.seeds = list(cfg.seeds)
    return cfg


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="replaylab", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, seeds=True):
        p.add_argument("--config", help="JSON run config")
        p.add_argument("--out", help="output directory")
        if seeds:
            p.add_argument("--seed", type=int, action="append", help="seed (repeatable)")
            p.add_argument("--jobs", type=int, default=1, help="parallel worker processes")
            p.add_argument("--method", choices=METHODS)
            p.add_argument("--ablation", choices=sorted(ABLATIONS))
            p.add_argument("--convention", choices=CONVENTIONS)

    common(sub.add_parser("gen", help="generate the synthetic domains"), seeds=False)
    common(sub.add_parser("train", help="run the continual protocol"))
    sw = sub.add_parser("sweep", help="omega sensitivity sweep")
    common(sw)
    sw.add_argument("--param", default="omega", choices=["omega"])
    sw.add_argument("--values", type=float, nargs="+", default=[0.01, 0.05, 0.08, 0.1, 0.5])
    rp = sub.add_parser("report", help="merge finished runs into CSV tables")
    rp.add_argument("runs", nargs="*", help="run directories (searched recursively)")
    rp.add_argument("--out", required=True)
    rp.add_argument("--convention", choices=CONVENTIONS)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    start = time.perf_counter()
    try:
        if args.command == "report":
            written = cmd_report(args.runs, args.out, args.convention)
        else:
            cfg = _apply_overrides(load_config(args.config), args)
            if args.command == "gen":
                written = cmd_gen(cfg, args.out)
            elif args.command == "train":
                if args.jobs < 1:
                    raise CliError("--jobs must be >= 1")
                written = [m["method"] + f"/seed{m['seed']}" for m in cmd_train(cfg, args.jobs, args.out)]
            else:
                if args.jobs < 1:
                    raise CliError("--jobs must be >= 1")
                written = [cmd_sweep(cfg, args.values, args.jobs, args.out)]
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    for w in written:
        print(w)
    log.info("%s finished in %.1fs", args.command, time.perf_counter() - start)
    return 0


if __name__ == "__main__":
    sys.exit(main())
