"""Command-line harness: ``disagg-nvm run | sweep | crash-matrix | bank``.

Every subcommand prints a table; ``--jsonl PATH`` also writes one JSON record
per line (``-`` sends the records to stdout instead of the table). The exit
status is 1 when any invariant check failed and 2 on a configuration error.
"""

from __future__ import annotations

import argparse
import sys

from .bench.crashmatrix import crash_matrix, load_script
from .bench.runner import SWEEP_PARAMS, bank, format_table, run, sweep
from .bench.workload import DISTRIBUTIONS, PUT_RATIOS, WorkloadSpec
from .cache import POLICIES
from .errors import ConfigError
from .frontend import Mode
from .structures import Kind

KINDS = [k.name.lower() for k in Kind]
MODES = [m.value for m in Mode]


def _workload_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--kind", choices=KINDS, default="bst")
    p.add_argument("--mode", choices=MODES, default="RCB")
    p.add_argument("--put", type=int, choices=PUT_RATIOS, default=100, help="percentage of puts")
    p.add_argument("--dist", choices=DISTRIBUTIONS, default="uniform")
    p.add_argument("--zipf-s", type=float, default=0.99)
    p.add_argument("--ops", type=int, default=10_000)
    p.add_argument("--keys", type=int, default=100_000)
    p.add_argument("--preload", type=int, default=0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--batch", type=int, default=None)
    p.add_argument("--cache-fraction", type=float, default=0.10)
    p.add_argument("--cache-pages", type=int, default=None)
    p.add_argument("--rr-set", type=int, default=32)
    p.add_argument("--policy", choices=POLICIES, default="hybrid")
    p.add_argument("--partitions", type=int, default=None)
    p.add_argument("--writers", type=int, default=1)
    p.add_argument("--readers", type=int, default=0)
    p.add_argument("--reader-ops", type=int, default=0)
    p.add_argument("--backends", type=int, default=1)
    p.add_argument("--mirrors", type=int, default=0)


def _spec(a) -> WorkloadSpec:
    return WorkloadSpec(
        kind=Kind[a.kind.upper()], mode=Mode(a.mode), put_ratio=a.put, distribution=a.dist,
        zipf_s=a.zipf_s, ops=a.ops, keys=a.keys, preload=a.preload, seed=a.seed,
        batch_size=a.batch, cache_fraction=a.cache_fraction, cache_pages=a.cache_pages,
        rr_set_size=a.rr_set, policy=a.policy, partitions=a.partitions, writers=a.writers,
        readers=a.readers, reader_ops=a.reader_ops, n_backends=a.backends, mirrors=a.mirrors,
    )


def _emit(records, table: str, jsonl: str | None) -> None:
    if jsonl == "-":
        for r in records:
            print(r.to_json())
        return
    print(table)
    if jsonl:
        with open(jsonl, "w") as f:
            for r in records:
                f.write(r.to_json() + "\n")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="disagg-nvm", description="Simulated disaggregated-NVM data structures")
    sub = ap.add_subparsers(dest="cmd", required=True)

    p = sub.add_parser("run", help="one measured workload")
    _workload_flags(p)
    p.add_argument("--jsonl")
    p.add_argument("--trace", help="write the fabric event trace (JSON lines) here")

    p = sub.add_parser("sweep", help="one run per parameter value")
    _workload_flags(p)
    p.add_argument("--param", choices=SWEEP_PARAMS, required=True)
    p.add_argument("--values", required=True, help="comma-separated values")
    p.add_argument("--jsonl")

    p = sub.add_parser("crash-matrix", help="seeded crash points with recovery and oracle checks")
    p.add_argument("--points", type=int, default=1024)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--kinds", default=",".join(KINDS))
    p.add_argument("--modes", default=",".join(MODES))
    p.add_argument("--ops", type=int, default=48, help="operations per crash point")
    p.add_argument("--script", help="JSON list of crash points instead of a generated plan")
    p.add_argument("--jsonl")

    p = sub.add_parser("bank", help="transfer workload with balance conservation")
    p.add_argument("--accounts", type=int, default=100)
    p.add_argument("--txs", type=int, default=10_000)
    p.add_argument("--index", choices=("hash", "bpt"), default="hash")
    p.add_argument("--mode", choices=MODES, default="RCB")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--crash-at", type=int, default=None, help="crash the front-end after this many events")
    p.add_argument("--jsonl")
    return ap


def main(argv=None) -> int:
    a = build_parser().parse_args(argv)
    try:
        if a.cmd == "run":
            reports = [run(_spec(a), name="run", trace_path=a.trace)]
            _emit(reports, format_table(reports), a.jsonl)
        elif a.cmd == "sweep":
            values = [v.strip() for v in a.values.split(",") if v.strip()]
            reports = sweep(_spec(a), a.param, values)
            _emit(reports, format_table(reports), a.jsonl)
        elif a.cmd == "bank":
            reports = [bank(a.accounts, a.txs, a.index, a.mode, a.seed, a.crash_at)]
            _emit(reports, format_table(reports), a.jsonl)
        else:
            points = load_script(a.script) if a.script else None
            kinds = [Kind[k.strip().upper()] for k in a.kinds.split(",") if k.strip()]
            modes = [Mode(m.strip()) for m in a.modes.split(",") if m.strip()]
            rep = crash_matrix(kinds, modes, a.points, a.seed, a.ops, points)
            lines = [f"cases {rep.cases}  passed {rep.passed}  crashed {rep.crashed}  digest {rep.digest[:16]}"]
            lines += [f"  case {k:>4}: {v}" for k, v in rep.by_case.items()]
            lines += [f"  {k:>18}: {v}" for k, v in rep.by_phase.items()]
            lines += [f"  FAIL {f['label']}: {f['detail']}" for f in rep.failures]
            _emit([rep], "\n".join(lines), a.jsonl)
            reports = [rep]
    except (ConfigError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0 if all(r.ok for r in reports) else 1


if __name__ == "__main__":
    sys.exit(main())
