"""Command-line front end: ``mlmule simulate | partition-stats | trace-convert | compare``.

Exit codes: 0 ok, 2 bad configuration or input, 3 file-system failure,
4 trace input mostly malformed, 5 runs with mismatched learner shapes.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import os
import sys
from collections import defaultdict
from concurrent.futures import ProcessPoolExecutor
from datetime import datetime
from pathlib import Path

import numpy as np

from . import __version__
from . import config as cfgmod
from .engine import data_stream, make_partition, run_simulation
from .errors import ConfigError, TraceParseError, ValidationError
from .metrics import accuracy_curve, moving_average, read_csv
from .partition import label_entropy, synth_dataset
from .worldsim import build_world

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_MALFORMED, EXIT_SHAPE = 0, 2, 3, 4, 5
THREADS_ENV = "MULE_SIM_THREADS"

log = logging.getLogger("mlmule")


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


# --- helpers ---------------------------------------------------------------


def parse_seeds(text: str) -> list[int]:
    """``"0..9"`` (inclusive range), ``"3"`` or ``"1,4,7"``."""
    text = text.strip()
    try:
        if ".." in text:
            lo, hi = (int(x) for x in text.split("..", 1))
            if hi < lo:
                raise ValueError
            return list(range(lo, hi + 1))
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise ConfigError(f"cannot parse seed list {text!r}", key="seeds") from None


def load_config(path, overrides) -> cfgmod.SimConfig:
    if path is None:
        return cfgmod.loads("", overrides)
    if not os.path.exists(path):
        raise ConfigError(f"config file {path} does not exist", key="config")
    return cfgmod.load(path, overrides)


def run_file_name(cfg: cfgmod.SimConfig) -> str:
    return f"{cfg.method}_{cfg.mobility_label}_{cfg.seed}.csv"


def worker_count(n_jobs: int) -> int:
    raw = os.environ.get(THREADS_ENV, "")
    cap = os.cpu_count() or 1
    if raw.strip():
        try:
            cap = max(1, int(raw))
        except ValueError:
            raise ConfigError(f"{THREADS_ENV} must be an integer, got {raw!r}", key=THREADS_ENV) from None
    return max(1, min(cap, n_jobs))


def _simulate_one(cfg: cfgmod.SimConfig):
    return cfg.seed, run_simulation(cfg)


# --- simulate ----------------------------------------------------------------


def cmd_simulate(args) -> int:
    base = load_config(args.config, args.set)
    seeds = parse_seeds(args.seeds) if args.seeds else [base.seed]
    cfgs = [base.with_overrides(seed=s) for s in seeds]
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise CliError(f"cannot create {out}: {exc}", EXIT_IO) from None

    workers = worker_count(len(cfgs))
    if workers == 1:
        results = [_simulate_one(c) for c in cfgs]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_simulate_one, cfgs))

    files = []
    try:
        for cfg, (seed, mlog) in zip(cfgs, results):
            name = run_file_name(cfg)
            mlog.write_csv(out / name)
            files.append(name)
            if mlog.cycles:
                mlog.write_cycles_csv(out / name.replace(".csv", "_cycles.csv"))
        manifest = {
            "config_hash": cfgmod.config_hash(base),
            "seeds": seeds,
            "out_dir": str(out),
            "files": files,
            "method": base.method,
            "mobility": base.mobility_label,
            "shape_tag": base.architecture().shape_tag,
            "version": __version__,
        }
        (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
        (out / "config.cfg").write_text(cfgmod.dumps(base))
        if args.plot:
            from .plotting import plot_curves
            tidy = _tidy_rows([(base.method, base.mobility_label, read_csv(out / f)) for f in files], 1)
            plot_curves(tidy, out / "accuracy.png", title=f"{base.method} ({base.mobility_label})")
    except OSError as exc:
        raise CliError(f"cannot write results: {exc}", EXIT_IO) from None

    for name, (_, mlog) in zip(files, results):
        print(f"{name}\tfinal_post={mlog.final('post_acc'):.4f}\tfinal_pre={mlog.final('pre_acc'):.4f}"
              f"\tstopped_early={int(mlog.stopped_early)}")
    return EXIT_OK


# --- partition-stats -----------------------------------------------------------


def partition_table(cfg: cfgmod.SimConfig):
    """``(owners, counts, entropies)`` for the partition the run with ``cfg`` would use."""
    rng = data_stream(cfg.seed)
    ds = synth_dataset(cfg.synth_spec(), rng)
    assign = make_partition(cfg, ds, build_world(cfg.world_config()), rng)
    owners = sorted(assign.parts)
    counts = np.array([np.bincount(ds.labels[assign.parts[o]], minlength=ds.n_classes) for o in owners])
    return owners, counts, [label_entropy(c) for c in counts]


def cmd_partition_stats(args) -> int:
    cfg = load_config(args.config, args.set)
    owners, counts, ent = partition_table(cfg)
    header = ["owner"] + [f"c{k}" for k in range(counts.shape[1])] + ["n", "entropy"]
    try:
        fh = open(args.out, "w", encoding="utf-8", newline="") if args.out else sys.stdout
    except OSError as exc:
        raise CliError(f"cannot write {args.out}: {exc}", EXIT_IO) from None
    try:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for o, row, h in zip(owners, counts, ent):
            w.writerow([o, *(int(v) for v in row), int(row.sum()), f"{h:.6f}"])
    finally:
        if fh is not sys.stdout:
            fh.close()
    if args.plot:
        from .plotting import plot_partition
        try:
            plot_partition(owners, counts, args.plot, title=f"{cfg.scheme} partition")
        except OSError as exc:
            raise CliError(f"cannot write {args.plot}: {exc}", EXIT_IO) from None
    return EXIT_OK


# --- trace-convert ---------------------------------------------------------------


def _parse_time(raw: str) -> float:
    try:
        return float(raw)
    except ValueError:
        return datetime.fromisoformat(raw).timestamp()


def convert_checkins(lines, tick_seconds: float = 1.0, n_spaces: int = 8, origin: float | None = None):
    """Check-in rows ``user,place,timestamp,dwell`` -> (trace rows, stats).

    Timestamps are seconds (or ISO 8601) and dwell is in seconds; both are
    bucketed into ticks of ``tick_seconds``. Places are mapped to spaces in
    order of first appearance; places already named ``s<k>`` keep their id.
    A visit that overlaps the same user's previous one is clipped to start
    where the previous ends (dropped if nothing remains).
    """
    rows, malformed, total = [], 0, 0
    for raw in lines:
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        total += 1
        parts = [x.strip() for x in line.split(",")]
        try:
            if len(parts) != 4 or not parts[0] or not parts[1]:
                raise ValueError
            ts, dwell = _parse_time(parts[2]), float(parts[3])
            if not (math.isfinite(ts) and math.isfinite(dwell)) or dwell <= 0:
                raise ValueError
        except ValueError:
            malformed += 1
            continue
        rows.append((parts[0], parts[1], ts, dwell))
    t0 = origin if origin is not None else min((r[2] for r in rows), default=0.0)
    places: dict[str, str] = {}
    users: set[str] = set()
    n_new = 0
    visits = []
    for user, place, ts, dwell in rows:
        if place not in places:
            if place.startswith("s") and place[1:].isdigit() and int(place[1:]) < n_spaces:
                places[place] = place
            else:
                places[place] = f"s{n_new % n_spaces}"
                n_new += 1
        start = max(int(math.floor((ts - t0) / tick_seconds)), 0)
        dur = max(int(math.ceil(dwell / tick_seconds)), 1)
        visits.append((start, user, places[place], dur))
        users.add(user)
    visits.sort()
    out, last_end, clipped = [], {}, 0
    for start, user, place, dur in visits:
        end = start + dur
        s = max(start, last_end.get(user, 0))
        if s != start:
            clipped += 1
        if end <= s:
            continue
        out.append((user, place, s, end - s))
        last_end[user] = end
    stats = {"rows": total, "malformed": malformed, "records": len(out), "clipped": clipped,
             "users": len(users), "places": len(places)}
    return out, stats


def cmd_trace_convert(args) -> int:
    try:
        with open(args.input, encoding="utf-8") as fh:
            lines = fh.readlines()
    except OSError as exc:
        raise CliError(f"cannot read {args.input}: {exc}", EXIT_IO) from None
    rows, stats = convert_checkins(lines, args.tick_seconds, args.spaces, args.origin)
    summary = " ".join(f"{k}={v}" for k, v in stats.items())
    if stats["rows"] and stats["malformed"] * 2 > stats["rows"]:
        print(f"trace-convert: too many malformed rows ({summary})", file=sys.stderr)
        return EXIT_MALFORMED
    try:
        with open(args.output, "w", encoding="utf-8", newline="\n") as fh:
            fh.write("# user_id,place_id,start_step,duration_steps\n")
            for user, place, start, dur in rows:
                fh.write(f"{user},{place},{start},{dur}\n")
    except OSError as exc:
        raise CliError(f"cannot write {args.output}: {exc}", EXIT_IO) from None
    print(summary)
    return EXIT_OK


# --- compare -----------------------------------------------------------------------


def _tidy_rows(runs, window: int):
    """Mean curve per (method, mobility) over all seeds and entities, then smoothed."""
    grouped = defaultdict(list)
    for method, mob, rows in runs:
        grouped[(method, mob)].extend(rows)
    out = []
    for (method, mob) in sorted(grouped):
        ts, acc = accuracy_curve(grouped[(method, mob)], "post_acc")
        smooth = moving_average(acc, window)
        for t, a, s in zip(ts, acc, smooth):
            out.append({"method": method, "p_cross": mob, "t": int(t),
                        "accuracy": f"{a:.6f}", "smoothed": f"{s:.6f}"})
    return out


def cmd_compare(args) -> int:
    runs, shapes = [], {}
    for d in args.run_dirs:
        path = Path(d) / "manifest.json"
        try:
            manifest = json.loads(path.read_text())
            for f in manifest["files"]:
                runs.append((manifest["method"], manifest["mobility"], read_csv(Path(d) / f)))
        except OSError as exc:
            raise CliError(f"cannot read run directory {d}: {exc}", EXIT_IO) from None
        except (KeyError, ValueError) as exc:
            raise CliError(f"{d}: malformed run directory ({exc})", EXIT_CONFIG) from None
        shapes[d] = manifest["shape_tag"]
    if len(set(shapes.values())) > 1:
        detail = ", ".join(f"{d}={s}" for d, s in shapes.items())
        print(f"compare: learner shapes differ: {detail}", file=sys.stderr)
        return EXIT_SHAPE
    if args.window < 1:
        raise ConfigError("window must be >= 1", key="window")
    tidy = _tidy_rows(runs, args.window)
    fields = ["method", "p_cross", "t", "accuracy", "smoothed"]
    try:
        fh = open(args.out, "w", encoding="utf-8", newline="") if args.out else sys.stdout
        try:
            w = csv.DictWriter(fh, fields, lineterminator="\n")
            w.writeheader()
            w.writerows(tidy)
        finally:
            if fh is not sys.stdout:
                fh.close()
        if args.plot:
            from .plotting import plot_curves
            plot_curves(tidy, args.plot)
    except OSError as exc:
        raise CliError(f"cannot write comparison: {exc}", EXIT_IO) from None
    return EXIT_OK


# --- entry point -----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mlmule", description="Mobile-mule collaborative learning simulator.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="show warnings from the simulator")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="run one configuration over a list of seeds")
    s.add_argument("--config", help="sectioned key=value config file (defaults if omitted)")
    s.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key")
    s.add_argument("--seeds", help='seed list: "0..9", "3" or "1,4,7" (default: config seed)')
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--plot", action="store_true", help="also render accuracy.png")
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("partition-stats", help="per-owner x per-class counts and label entropy")
    s.add_argument("--config")
    s.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    s.add_argument("--out", help="CSV path (stdout if omitted)")
    s.add_argument("--plot", metavar="PNG", help="also render a stacked bar chart")
    s.set_defaults(func=cmd_partition_stats)

    s = sub.add_parser("trace-convert", help="check-in rows -> trace replay format")
    s.add_argument("input")
    s.add_argument("output")
    s.add_argument("--tick-seconds", type=float, default=1.0, help="seconds per simulation step")
    s.add_argument("--spaces", type=int, default=8, help="number of spaces places are folded onto")
    s.add_argument("--origin", type=float, default=None,
                   help="timestamp of step 0 (default: earliest check-in)")
    s.set_defaults(func=cmd_trace_convert)

    s = sub.add_parser("compare", help="join run directories into one tidy smoothed CSV")
    s.add_argument("run_dirs", nargs="+")
    s.add_argument("--window", type=int, default=5, help="moving-average window in evaluation points")
    s.add_argument("--out", help="CSV path (stdout if omitted)")
    s.add_argument("--plot", metavar="PNG", help="also render the curves")
    s.set_defaults(func=cmd_compare)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.verbose else logging.ERROR,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (TraceParseError, ValidationError) as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except CliError as exc:
        print(str(exc), file=sys.stderr)
        return exc.code
    except OSError as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
