"""Command-line front end.

Subcommands: parse, solve, gen-data, split, bench, report.  Exit codes:
0 success, 2 no solution / infeasible, 3 invalid input.
"""

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .bench import (
    BenchConfig,
    load_network,
    markdown_table,
    records_from_csv,
    rows_from_records,
    run_benchmark,
    run_method,
    sample_instances,
    split_dataset,
)
from .errors import AcopfError
from .formulation import SolveStatus, nominal_instance
from .history import load_dataset, save_dataset

EXIT_OK = 0
EXIT_NO_SOLUTION = 2
EXIT_BAD_INPUT = 3


class _Parser(argparse.ArgumentParser):
    # argparse exits 2 on usage errors; bad input is 3 here
    def error(self, message):
        self.print_usage(sys.stderr)
        raise SystemExit2(message)


class SystemExit2(Exception):
    pass


def _build_parser():
    p = _Parser(prog="acopf",
                description="AC optimal power flow solvers and benchmarks")
    p.add_argument("-v", "--verbose", action="store_true",
                   help="log solver progress")
    sub = p.add_subparsers(dest="command", required=True)

    q = sub.add_parser("parse", help="parse a case and print a summary")
    q.add_argument("case")

    q = sub.add_parser("solve", help="solve one instance")
    q.add_argument("case")
    q.add_argument("--method", choices=("ip", "sbb"), default="ip")
    q.add_argument("--formulation", choices=("rect", "polar"),
                   default="rect")
    q.add_argument("--init", choices=("flat", "hist"), default="flat")
    q.add_argument("--bounds", choices=("original", "eps", "knn"),
                   default="original")
    q.add_argument("--k", type=int, default=100)
    q.add_argument("--eps", type=float, default=1e-5)
    q.add_argument("--gap-tol", type=float, default=0.01,
                   help="certification gap, percent")
    q.add_argument("--feas-tol", type=float, default=1e-5)
    q.add_argument("--time-limit", type=float, default=3600.0,
                   metavar="SECONDS")
    q.add_argument("--dataset", metavar="FILE",
                   help="historical dataset for hist/knn/eps")
    q.add_argument("--json-out", metavar="FILE")

    q = sub.add_parser("gen-data", help="sample and label instances")
    q.add_argument("case")
    q.add_argument("--n", type=int, default=500)
    q.add_argument("--pct", type=float, default=0.05)
    q.add_argument("--seed", type=int, default=0)
    q.add_argument("--out", required=True, metavar="FILE")
    q.add_argument("--label-methods", default="IP-P-F,IP-R-F,SP-O",
                   help="comma-separated labeling methods")
    q.add_argument("--time-limit", type=float, default=3600.0,
                   metavar="SECONDS")

    q = sub.add_parser("split", help="split a dataset into train/test")
    q.add_argument("dataset")
    q.add_argument("--train", type=int, required=True)
    q.add_argument("--test", type=int, required=True)
    q.add_argument("--seed", type=int, default=0)
    q.add_argument("--train-out", metavar="FILE")
    q.add_argument("--test-out", metavar="FILE")

    q = sub.add_parser("bench", help="run the benchmark protocol")
    q.add_argument("--config", required=True, metavar="FILE")
    q.add_argument("--csv-out", metavar="FILE")
    q.add_argument("--md-out", metavar="FILE")

    q = sub.add_parser("report", help="results CSV to a markdown table")
    q.add_argument("results")
    q.add_argument("--gap-tol", type=float, default=0.01)
    q.add_argument("--time-limit", type=float, default=None)
    return p


def _cmd_parse(args):
    net = load_network(args.case)
    a = net.arr
    inst = nominal_instance(net)
    print(f"case: {net.name}")
    print(f"buses: {a.nb}  branches: {a.nl}  generators: {a.ng}")
    print(f"rated branches: {int(np.sum(a.smax > 0))}")
    print(f"nominal demand: {float(np.sum(inst.pd)):.4f} + "
          f"j{float(np.sum(inst.qd)):.4f} p.u.")
    return EXIT_OK


def _method_id(args):
    if args.method == "ip":
        return "IP-{}-{}".format("R" if args.formulation == "rect" else "P",
                                 "F" if args.init == "flat" else "H")
    return {"original": "SP-O", "eps": "SP-eps",
            "knn": f"SP-K{args.k}"}[args.bounds]


def _cmd_solve(args):
    net = load_network(args.case)
    inst = nominal_instance(net)
    method = _method_id(args)
    train = ref_entry = None
    if args.init == "hist" or args.bounds in ("eps", "knn"):
        if not args.dataset:
            raise SystemExit2(f"{method} requires --dataset")
        train = load_dataset(args.dataset, net)
        if args.bounds == "eps":
            from .history import nearest_instance
            ref_entry = train.entries[nearest_instance(train, inst)]
    rep = run_method(method, net, inst, train=train, ref_entry=ref_entry,
                     k=args.k, eps=args.eps, gap_tol_pct=args.gap_tol,
                     time_limit=args.time_limit)
    doc = {
        "case": net.name, "method": method, "status": rep.status.name,
        "objective": rep.objective, "lower_bound": rep.lower_bound,
        "gap_pct": rep.gap_pct, "max_violation": rep.max_violation,
        "iterations": rep.iterations, "nodes": rep.nodes,
        "wall_time_s": rep.wall_time, "message": rep.message,
    }
    if rep.solution is not None:
        doc["pg"] = rep.solution.pg.tolist()
        doc["qg"] = rep.solution.qg.tolist()
        doc["e"] = rep.solution.state.e.tolist()
        doc["f"] = rep.solution.state.f.tolist()
    text = json.dumps(doc, indent=1, default=float)
    if args.json_out:
        Path(args.json_out).write_text(text + "\n")
    print(f"{method} on {net.name}: {rep.status.name}  "
          f"objective={rep.objective:.6f}  "
          f"violation={rep.max_violation:.3e}  "
          f"time={rep.wall_time:.2f}s")
    if rep.solution is None:
        return EXIT_NO_SOLUTION
    ok = rep.max_violation <= args.feas_tol
    return EXIT_OK if ok else EXIT_NO_SOLUTION


def _cmd_gen_data(args):
    from .bench import build_dataset
    net = load_network(args.case)
    labels = tuple(m.strip() for m in args.label_methods.split(",")
                   if m.strip())
    cfg = BenchConfig(case=args.case, n_instances=args.n, pct=args.pct,
                      seed=args.seed, n_train=0, n_test=0,
                      label_methods=labels, time_limit_s=args.time_limit)
    instances = sample_instances(net, args.n, args.pct, args.seed)
    ds = build_dataset(net, instances, cfg)
    save_dataset(args.out, ds)
    n_cert = sum(1 for en in ds.entries if en.certified)
    print(f"labeled {len(ds.entries)} of {args.n} instances "
          f"({n_cert} certified) -> {args.out}")
    return EXIT_OK


def _cmd_split(args):
    from .history import HistoricalDataset
    ds = load_dataset(args.dataset)
    train, test = split_dataset(ds, args.train, args.test, args.seed)
    if args.train_out:
        save_dataset(args.train_out, train)
    if args.test_out:
        test_ds = HistoricalDataset(
            network_fingerprint=ds.network_fingerprint, entries=test,
            sampling=dict(ds.sampling))
        save_dataset(args.test_out, test_ds)
    print(f"split {len(ds.entries)} entries into "
          f"{len(train.entries)} train / {len(test)} test")
    return EXIT_OK


def _cmd_bench(args):
    with open(args.config) as fh:
        doc = json.load(fh)
    cfg = BenchConfig.from_dict(doc)
    res = run_benchmark(cfg, out_csv=args.csv_out)
    if args.md_out:
        Path(args.md_out).write_text(res.markdown)
    print(res.markdown, end="")
    if not res.records:
        return EXIT_OK
    any_feasible = any(r["feasible"] for r in res.records)
    return EXIT_OK if any_feasible else EXIT_NO_SOLUTION


def _cmd_report(args):
    records = records_from_csv(Path(args.results).read_text())
    rows = rows_from_records(records)
    print(markdown_table(rows, args.gap_tol, args.time_limit), end="")
    return EXIT_OK


_COMMANDS = {
    "parse": _cmd_parse,
    "solve": _cmd_solve,
    "gen-data": _cmd_gen_data,
    "split": _cmd_split,
    "bench": _cmd_bench,
    "report": _cmd_report,
}


def main(argv=None):
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit2 as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_BAD_INPUT
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s")
    try:
        return _COMMANDS[args.command](args)
    except SystemExit2 as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_BAD_INPUT
    except (AcopfError, ValueError, KeyError, OSError,
            json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_BAD_INPUT


if __name__ == "__main__":
    sys.exit(main())
