"""Command-line entry point: ``sentinel {run,sweep,grid,ablate,calibrate}``.

Exit codes: 0 success, 1 runtime failure (partial outputs kept), 2 invalid
configuration. Outputs carry no wall-clock data so reruns with the same
seed are byte-identical; timings go to ``timings.log``.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import math
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path
from typing import Any, Callable, Sequence

import numpy as np
import yaml

from . import __version__
from .aggregators import AggKind, AggregatorSpec
from .attacks import AttackKind, AttackSpec
from .config import (ConfigError, GridConfig, RunConfig, SweepConfig, config_hash,
                     load_config, to_dict)
from .detector import DetectorConfig, calibrate_tau_ks, honest_ks_statistics
from .errors import InvalidInput
from .mp import ks_fallback_threshold
from .sim import (ROUND_FIELDS, ExperimentConfig, attack_grid, detection_rate, grid_means,
                  phase_sweep, run_experiment, standard_config, suite_detection)

SCHEMAS = {"rounds": "rounds/v1", "sweep": "sweep/v1", "grid": "grid/v1",
           "ablate": "ablate/v1", "calibrate": "calibrate/v1"}


def _fmt(v: Any) -> str:
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, bool):
        return "1" if v else "0"
    return str(v)


def write_csv(path: Path, schema: str, columns: Sequence[str], rows: Sequence[dict]):
    """CSV whose first line is ``# schema=<name>`` followed by the header row."""
    buf = io.StringIO()
    buf.write(f"# schema={schema}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([_fmt(r.get(c, "")) for c in columns])
    path.write_text(buf.getvalue())


def read_csv(path: Path) -> tuple[str, list[dict]]:
    lines = Path(path).read_text().splitlines()
    schema = lines[0].split("=", 1)[1] if lines and lines[0].startswith("# schema=") else ""
    return schema, list(csv.DictReader(lines[1:]))


def _json(path: Path, obj: dict):
    path.write_text(json.dumps(_clean(obj), sort_keys=True, indent=2) + "\n")


def _clean(x):
    if isinstance(x, dict):
        return {str(k): _clean(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_clean(v) for v in x]
    if isinstance(x, (np.floating, float)):
        x = float(x)
        return x if math.isfinite(x) else None
    if isinstance(x, np.integer):
        return int(x)
    return x


class Run:
    """Collects outputs and writes summary.json and manifest.json at the end."""

    def __init__(self, command: str, out: Path, rc: RunConfig | None, seed: int):
        self.command = command
        self.out = out
        self.rc = rc
        self.seed = seed
        self.files: list[str] = []
        self.ticks = 0
        self.timings: list[str] = []
        out.mkdir(parents=True, exist_ok=True)

    def csv(self, name: str, schema: str, columns, rows):
        write_csv(self.out / name, schema, columns, rows)
        self.files.append(name)

    def finish(self, results: dict, status: str = "ok"):
        chash = config_hash(self.rc) if self.rc is not None else None
        _json(self.out / "summary.json", {
            "command": self.command, "status": status, "seed": self.seed,
            "version": __version__, "config_hash": chash, "results": results})
        self.files.append("summary.json")
        if self.timings:
            (self.out / "timings.log").write_text("\n".join(self.timings) + "\n")
            self.files.append("timings.log")
        _json(self.out / "manifest.json", {
            "command": self.command, "seed": self.seed, "version": __version__,
            "config": to_dict(self.rc) if self.rc is not None else None,
            "config_hash": chash, "outputs": sorted(self.files + ["manifest.json"]),
            "start_tick": 0, "end_tick": self.ticks})


def _pmap(fn: Callable, items: list, threads: int) -> list:
    """Map in a process pool when threads > 1; results keep input order."""
    if threads <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=threads) as ex:
        return list(ex.map(fn, items))


def _seeded(rc: RunConfig, seed: int | None) -> RunConfig:
    if seed is None:
        return rc
    exp = replace(rc.experiment, seed=seed, attack=replace(rc.experiment.attack, seed=seed))
    return replace(rc, experiment=exp)


# -- commands

def cmd_run(rc: RunConfig, out: Path, threads: int = 1) -> int:
    cfg = rc.experiment
    res = run_experiment(cfg)
    run = Run("run", out, rc, cfg.seed)
    run.csv("metrics.csv", SCHEMAS["rounds"], ROUND_FIELDS, [m.row() for m in res.metrics])
    run.ticks = len(res.metrics)
    run.timings.append(f"run_seconds {res.seconds:.3f}")
    summ = res.summary()
    run.finish(summ, "ok" if summ["failed_rounds"] == 0 else "failed_rounds")
    return 0 if summ["failed_rounds"] == 0 else 1


def _sweep_point(args):
    x, sw, seed, det = args
    return phase_sweep(points=(x,), seeds=sw.seeds, n=sw.n, d=sw.d, f=sw.f, bias=sw.bias,
                       cfg=det, seed=seed)[0]


def cmd_sweep(rc: RunConfig, out: Path, threads: int = 1) -> int:
    sw, seed = rc.sweep, rc.experiment.seed
    det = rc.experiment.aggregator.detector
    rows = _pmap(_sweep_point, [(x, sw, seed, det) for x in sw.points], threads)
    run = Run("sweep", out, rc, seed)
    run.csv("sweep.csv", SCHEMAS["sweep"], ["sigma2f2", "detection_rate", "fpr", "regime"], rows)
    run.ticks = len(rows)
    from scipy.stats import spearmanr
    rho = float(spearmanr([r["sigma2f2"] for r in rows],
                          [r["detection_rate"] for r in rows]).statistic) if len(rows) > 2 else None
    run.finish({"points": len(rows), "spearman_rho": rho, "seeds": sw.seeds})
    return 0


def _grid_cell(args):
    base, a, k, seeds = args
    return attack_grid(base, attacks=(AttackKind(a),), aggregators=(AggKind(k),), seeds=seeds)[0]


def cmd_grid(rc: RunConfig, out: Path, threads: int = 1) -> int:
    g = rc.grid
    cells = [(rc.experiment, a, k, g.seeds) for a in g.attacks for k in g.aggregators]
    rows = _pmap(_grid_cell, cells, threads)
    run = Run("grid", out, rc, rc.experiment.seed)
    run.csv("grid.csv", SCHEMAS["grid"],
            ["attack", "aggregator", "final_grad_norm2", "detection_rate", "failed", "error"], rows)
    run.ticks = len(rows)
    means = grid_means(rows)
    failed = sum(r["failed"] for r in rows)
    ranking = sorted(means, key=lambda k: (math.isnan(means[k]), means[k]))
    run.finish({"cells": len(rows), "failed_cells": failed, "mean_final_grad_norm2": means,
                "ranking": ranking}, "ok" if not failed else "partial")
    return 0 if not failed else 1


ABLATIONS = ("sketch", "period", "layerwise", "thresholds")


def ablate_sketch(rc: RunConfig, sizes=(64, 128, 256, 512), n: int = 300, d: int = 512,
                  seeds: int = 20, draws: int = 100, sigma2f2: float = 0.1, f: float = 0.2):
    """Detection of a moment-matched attack as the sketch grows (k >= n is exact)."""
    det = rc.experiment.aggregator.detector
    seed = rc.experiment.seed
    sigma = math.sqrt(sigma2f2) / f
    atk = AttackSpec(AttackKind.MOMENT_MATCHED, seed=seed)
    rows = []
    for k in sizes:
        tau = calibrate_tau_ks(n, d, k if k < n else None, draws=draws)
        cfg = replace(det, sketch_size=k, tau_ks=tau)
        r = detection_rate(n, d, f, sigma, atk, cfg, seeds, seed)
        rows.append({"setting": f"k={k}", "k": k, "tau_ks": tau, **r})
    return rows


def _suite(rc: RunConfig, seeds: int, **kw) -> dict:
    base = standard_config(seed=rc.experiment.seed, **kw)
    r = suite_detection(base, seeds=seeds)
    return {k: v for k, v in r.items() if k != "cells"}


def ablate_period(rc: RunConfig, seeds: int = 2, timings: list | None = None):
    rows = []
    for p in (1, 5):
        det = DetectorConfig(detection_period=p)
        t0 = time.perf_counter()
        r = _suite(rc, seeds, aggregator=AggregatorSpec(AggKind.SENTINEL, detector=det))
        if timings is not None:
            timings.append(f"period={p} seconds {time.perf_counter() - t0:.3f}")
        rows.append({"setting": f"period={p}", **r})
    return rows


def ablate_layerwise(rc: RunConfig, seeds: int = 2):
    rows = []
    for lw in (False, True):
        det = DetectorConfig(layerwise=lw)
        r = _suite(rc, seeds, layer_dims=(64, 64, 128),
                   aggregator=AggregatorSpec(AggKind.SENTINEL, detector=det))
        rows.append({"setting": "layerwise" if lw else "full", **r})
    return rows


def ablate_thresholds(rc: RunConfig, seeds: int = 2):
    rows = []
    for online in (False, True):
        r = _suite(rc, seeds, online_thresholds=online, rounds=60)
        rows.append({"setting": "online" if online else "offline", **r})
    return rows


def cmd_ablate(kind: str, rc: RunConfig, out: Path, threads: int = 1) -> int:
    run = Run(f"ablate-{kind}", out, rc, rc.experiment.seed)
    if kind == "sketch":
        rows = ablate_sketch(rc)
    elif kind == "period":
        rows = ablate_period(rc, timings=run.timings)
    elif kind == "layerwise":
        rows = ablate_layerwise(rc)
    elif kind == "thresholds":
        rows = ablate_thresholds(rc)
    else:
        raise InvalidInput(f"unknown ablation {kind!r}")
    cols = ["setting", "detection_rate", "fpr"] + [c for c in ("final_grad_norm2", "k", "tau_ks")
                                                   if c in rows[0]]
    run.csv(f"ablate_{kind}.csv", SCHEMAS["ablate"], cols, rows)
    run.ticks = len(rows)
    run.finish({"kind": kind, "rows": [{c: r.get(c) for c in cols} for r in rows]})
    return 0


def cmd_calibrate(n: int, d: int, draws: int, k: int | None, out: Path | None,
                  write: Path | None, seed: int | None) -> int:
    if draws < 100:
        tau = ks_fallback_threshold(n)
        print(f"draws < 100: using the asymptotic fallback tau_ks = {tau!r}")
        source = "fallback"
    else:
        kw = {} if seed is None else {"seed": seed}
        tau = calibrate_tau_ks(n, d, k, draws=draws, **kw)
        print(f"tau_ks = {tau!r}  (n={n}, d={d}, k={k}, draws={draws})")
        source = "calibrated"
    if write is not None:
        data = yaml.safe_load(write.read_text()) if write.exists() else {}
        data = data or {}
        data.setdefault("detector", {})
        data["detector"]["tau_ks"] = float(tau)
        write.write_text(yaml.safe_dump(data, sort_keys=True))
    if out is not None:
        run = Run("calibrate", out, None, seed if seed is not None else 0)
        run.csv("calibrate.csv", SCHEMAS["calibrate"], ["n", "d", "k", "draws", "tau_ks", "source"],
                [{"n": n, "d": d, "k": k if k is not None else "", "draws": draws,
                  "tau_ks": tau, "source": source}])
        run.ticks = 1
        run.finish({"tau_ks": tau, "source": source})
    return 0


# -- argument parsing

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="override the config seed")
    common.add_argument("--out", type=Path, default=Path("out"), help="output directory")
    common.add_argument("--config", type=Path, default=None, help="YAML config file")
    common.add_argument("--threads", type=int, default=1, help="worker processes for cells")
    p = argparse.ArgumentParser(prog="sentinel", description="Spectral Byzantine screening")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)
    for name, hlp in (("run", "one training run"), ("sweep", "phase sweep"),
                      ("grid", "attack x aggregator grid")):
        s = sub.add_parser(name, parents=[common], help=hlp)
        s.add_argument("config_path", nargs="?", type=Path, default=None)
    a = sub.add_parser("ablate", parents=[common], help="ablation tables")
    a.add_argument("kind", choices=ABLATIONS)
    c = sub.add_parser("calibrate", parents=[common], help="Monte-Carlo tau_ks")
    c.add_argument("--n", type=int, required=True)
    c.add_argument("--d", type=int, required=True)
    c.add_argument("--draws", type=int, default=500)
    c.add_argument("--k", type=int, default=None, help="sketch size")
    c.add_argument("--write", type=Path, default=None, help="store tau_ks into this config")
    return p


_DEFAULT_RUN = "experiment:\n  n: 50\n  rounds: 30\n"


def _load(args, required: bool) -> RunConfig:
    path = getattr(args, "config_path", None) or args.config
    if path is None:
        if required:
            raise ConfigError("--config", "a config file is required for this command")
        from .config import parse_config
        return _seeded(parse_config(_DEFAULT_RUN), args.seed)
    return _seeded(load_config(path), args.seed)


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "calibrate":
            out = args.out if "--out" in (argv if argv is not None else sys.argv) else None
            return cmd_calibrate(args.n, args.d, args.draws, args.k, out, args.write, args.seed)
        rc = _load(args, required=args.command == "run")
        if args.command == "run":
            return cmd_run(rc, args.out, args.threads)
        if args.command == "sweep":
            return cmd_sweep(rc, args.out, args.threads)
        if args.command == "grid":
            return cmd_grid(rc, args.out, args.threads)
        return cmd_ablate(args.kind, rc, args.out, args.threads)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - reported as a runtime failure
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
