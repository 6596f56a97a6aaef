"""Benchmark harness: demand sampling, dataset labeling, train/test
splitting, the seven method configurations, and metric aggregation.

The full protocol (5 000 instances, 4 900/100 split, one-hour limit)
is supported but the defaults are scaled down to 500 instances and a
450/50 split so a complete run fits on a desk machine.
"""

import csv
import io
import logging
import math
import re
import time
from concurrent.futures import FIRST_COMPLETED, ProcessPoolExecutor, wait
from dataclasses import dataclass, field
from pathlib import Path
from types import SimpleNamespace

import numpy as np

from .cases import AVAILABLE, load_case
from .errors import AllLabelingFailed, EmptyReportSet, InsufficientEntries
from .formulation import Instance, RectState, SolveStatus, feasibility_check, \
    nominal_instance
from .grid import parse_matpower_case
from .history import DatasetEntry, HistoricalDataset, epsilon_bounds, \
    knn_bounds, network_fingerprint, original_bounds
from .interior_point import IpOptions, flat_start, historical_start, solve_ip
from .qcqp import build_qcqp, nlp_for
from .spatial_bb import SbbOptions, solve_sbb

log = logging.getLogger(__name__)

IP_METHODS = ("IP-R-F", "IP-R-H", "IP-P-F", "IP-P-H")
DEFAULT_METHODS = ("IP-R-F", "IP-R-H", "IP-P-F", "IP-P-H",
                   "SP-O", "SP-eps", "SP-K")
_SPK = re.compile(r"^SP-K(\d+)?$")


def _valid_method(m):
    return m in IP_METHODS or m in ("SP-O", "SP-eps") or _SPK.match(m)


@dataclass
class BenchConfig:
    """Knobs of one benchmark run; see module docstring for scale."""

    case: str
    n_instances: int = 500
    pct: float = 0.05
    seed: int = 0
    n_train: int = 450
    n_test: int = 50
    methods: tuple = DEFAULT_METHODS
    k: int = 100
    eps: float = 1e-5
    gap_tol_pct: float = 0.01
    feas_tol: float = 1e-5
    time_limit_s: float = 3600.0
    # labeling runs these per instance; trim the list (or the limit) for
    # quick datasets where a certified label is not worth the wait
    label_methods: tuple = ("IP-P-F", "IP-R-F", "SP-O")
    label_time_limit_s: float = None
    workers: int = 1

    def __post_init__(self):
        if self.n_instances < 1:
            raise ValueError("n_instances must be at least 1")
        if not 0.0 <= self.pct < 1.0:
            raise ValueError("pct must lie in [0, 1)")
        if self.n_train + self.n_test > self.n_instances:
            raise ValueError("n_train + n_test exceeds n_instances")
        if self.gap_tol_pct <= 0 or self.feas_tol <= 0 \
                or self.time_limit_s <= 0:
            raise ValueError("tolerances and the time limit must be positive")
        if self.workers < 1:
            raise ValueError("workers must be at least 1")
        self.methods = tuple(self.methods)
        self.label_methods = tuple(self.label_methods)
        for m in self.methods + self.label_methods:
            if not _valid_method(m):
                raise ValueError(f"unknown method spec {m!r}")

    @classmethod
    def from_dict(cls, doc):
        known = set(cls.__dataclass_fields__)
        extra = set(doc) - known
        if extra:
            raise ValueError(f"unknown config keys: {sorted(extra)}")
        if "case" not in doc:
            raise ValueError("config is missing 'case'")
        return cls(**doc)


@dataclass
class MetricsRow:
    """One table line: aggregates over the feasible test instances."""

    method: str
    mean_time: float
    max_time: float
    mean_gap: float
    max_gap: float
    mean_sub: float
    max_sub: float
    n_infeasible: int


@dataclass
class BenchResult:
    rows: list
    records: list
    csv_text: str
    markdown: str
    dataset: HistoricalDataset = field(default=None, repr=False)


def load_network(case):
    """A bundled case name or a path to a MATPOWER .m file."""
    if case in AVAILABLE:
        return load_case(case)
    path = Path(case)
    if path.exists():
        return parse_matpower_case(path.read_text(), name=path.stem)
    raise KeyError(f"{case!r} is neither a bundled case nor a file")


def sample_instances(net, n, pct, seed):
    """n demand profiles with every nominal load scaled by its own
    uniform factor in [1-pct, 1+pct]; zero loads stay zero."""
    if n < 1:
        raise ValueError("need at least one instance")
    rng = np.random.default_rng(seed)
    nom = nominal_instance(net)
    out = []
    for _ in range(n):
        pd = nom.pd * rng.uniform(1.0 - pct, 1.0 + pct, nom.pd.size)
        qd = nom.qd * rng.uniform(1.0 - pct, 1.0 + pct, nom.qd.size)
        out.append(Instance(pd=pd, qd=qd))
    return out


def run_method(method, net, inst, *, train=None, ref_entry=None, k=100,
               eps=1e-5, gap_tol_pct=0.01, time_limit=3600.0):
    """One solve of one instance with one method configuration.

    train supplies the historical data for the -H initializations and
    the learned SP-K bounds; ref_entry supplies the known solution that
    the idealized SP-eps variant tightens around.
    """
    if method in IP_METHODS:
        form = "rect" if method[3] == "R" else "polar"
        nlp = nlp_for(net, inst, form)
        if method[5] == "F":
            x0 = flat_start(net, form)
        else:
            if train is None:
                raise ValueError(f"{method} needs a training dataset")
            x0 = historical_start(train, inst, net, form)
        return solve_ip(nlp, x0, IpOptions(time_limit=time_limit))

    spk = _SPK.match(method)
    if method == "SP-O":
        box = original_bounds(net.buses)
    elif method == "SP-eps":
        if ref_entry is None:
            raise ValueError("SP-eps needs the instance's labeled solution")
        known = SimpleNamespace(state=RectState(e=ref_entry.e, f=ref_entry.f))
        box = epsilon_bounds(known, eps, original_bounds(net.buses))
    elif spk:
        if train is None:
            raise ValueError(f"{method} needs a training dataset")
        kk = int(spk.group(1)) if spk.group(1) else k
        box = knn_bounds(train, inst, min(kk, len(train.entries)))
    else:
        raise ValueError(f"unknown method spec {method!r}")
    prob = build_qcqp(net, inst, box)
    return solve_sbb(prob, box, SbbOptions(gap_tol_pct=gap_tol_pct,
                                           time_limit=time_limit))


def build_dataset(net, instances, config):
    """Label each instance with its best feasible solution.

    Every labeling method runs independently; solutions violating the
    feasibility tolerance are discarded.  A certified global solve wins
    outright, otherwise the lowest feasible objective does.  Instances
    where nothing survives are logged and excluded.
    """
    if not instances:
        raise AllLabelingFailed("no instances to label")
    tl = config.label_time_limit_s or config.time_limit_s
    entries = []
    n_failed = 0
    for i, inst in enumerate(instances):
        best = None
        cert = None
        for m in config.label_methods:
            rep = run_method(m, net, inst, k=config.k, eps=config.eps,
                             gap_tol_pct=config.gap_tol_pct, time_limit=tl)
            sol = rep.solution
            if sol is None:
                continue
            fc = feasibility_check(sol, inst, net, config.feas_tol)
            if fc.max_violation > config.feas_tol:
                continue
            if m == "SP-O" and rep.status == SolveStatus.Optimal \
                    and cert is None:
                cert = sol
            if best is None or sol.objective < best.objective:
                best = sol
        pick = cert if cert is not None else best
        if pick is None:
            n_failed += 1
            log.warning("labeling failed for instance %d: nothing feasible", i)
            continue
        entries.append(DatasetEntry(
            instance=inst, e=pick.state.e.copy(), f=pick.state.f.copy(),
            pg=pick.pg.copy(), qg=pick.qg.copy(),
            objective=float(pick.objective), certified=cert is not None))
    if not entries:
        raise AllLabelingFailed(
            f"all {len(instances)} instances failed to label")
    if n_failed:
        log.warning("excluded %d of %d instances from the dataset",
                    n_failed, len(instances))
    return HistoricalDataset(network_fingerprint=network_fingerprint(net),
                             entries=entries,
                             sampling={"seed": config.seed, "pct": config.pct})


def split_dataset(ds, n_train, n_test, seed):
    """Disjoint train dataset and labeled test entries, fixed by seed."""
    m = len(ds.entries)
    if n_train + n_test > m:
        raise InsufficientEntries(f"requested {n_train}+{n_test} from {m}")
    perm = np.random.default_rng(seed).permutation(m)
    tr = np.sort(perm[:n_train])
    te = np.sort(perm[n_train:n_train + n_test])
    train = HistoricalDataset(network_fingerprint=ds.network_fingerprint,
                              entries=[ds.entries[int(i)] for i in tr],
                              sampling=dict(ds.sampling))
    return train, [ds.entries[int(i)] for i in te]


def suboptimality_pct(obj, ref):
    """100 (obj - ref) / ref, with negatives inside 1e-9 relative noise
    clamped to zero."""
    sub = 100.0 * (obj - ref) / ref
    if -1e-7 <= sub < 0.0:
        return 0.0
    return sub


def _gap_of(rep):
    if math.isfinite(rep.gap_pct):
        return float(rep.gap_pct)
    if rep.solution is not None and math.isfinite(rep.lower_bound):
        return 100.0 * (rep.objective - rep.lower_bound) \
            / max(abs(rep.objective), 1e-9)
    return math.inf


def _aggregate(method, feas, times, gaps, subs):
    n_inf = sum(1 for ok in feas if not ok)
    if times:
        row = (float(np.mean(times)), float(np.max(times)),
               float(np.mean(gaps)), float(np.max(gaps)),
               float(np.mean(subs)), float(np.max(subs)))
    else:
        row = (math.nan,) * 6
    return MetricsRow(method, *row, n_infeasible=n_inf)


def compute_metrics(reports, references, method="", feas_tol=1e-5):
    """Aggregate one method's reports against per-instance references.

    Instances with no feasible solution are excluded from every average
    and counted in n_infeasible.
    """
    if len(reports) == 0:
        raise EmptyReportSet("no reports to aggregate")
    feas, times, gaps, subs = [], [], [], []
    for rep, ref in zip(reports, references):
        ok = rep.solution is not None and rep.max_violation <= feas_tol
        feas.append(ok)
        if not ok:
            continue
        times.append(float(rep.wall_time))
        gaps.append(_gap_of(rep))
        subs.append(suboptimality_pct(float(rep.objective), float(ref)))
    return _aggregate(method, feas, times, gaps, subs)


_CSV_FIELDS = ("method", "instance", "feasible", "status", "objective",
               "lower_bound", "gap_pct", "sub_pct", "max_violation",
               "nodes", "iterations", "solve_seconds", "total_seconds")


def records_to_csv(records, workers=1):
    """Per-instance results, full float precision, worker count header."""
    buf = io.StringIO()
    buf.write(f"# workers={workers}\n")
    w = csv.writer(buf)
    w.writerow(_CSV_FIELDS)
    for r in records:
        w.writerow([repr(v) if isinstance(v, float) else v
                    for v in (r[k] for k in _CSV_FIELDS)])
    return buf.getvalue()


def records_from_csv(text):
    lines = [ln for ln in text.splitlines() if not ln.startswith("#")]
    out = []
    for row in csv.DictReader(io.StringIO("\n".join(lines))):
        rec = dict(row)
        rec["instance"] = int(row["instance"])
        rec["feasible"] = int(row["feasible"])
        rec["nodes"] = int(row["nodes"])
        rec["iterations"] = int(row["iterations"])
        for k in ("objective", "lower_bound", "gap_pct", "sub_pct",
                  "max_violation", "solve_seconds", "total_seconds"):
            rec[k] = float(row[k])
        out.append(rec)
    return out


def rows_from_records(records):
    """MetricsRow per method, first-appearance order, straight from the
    per-instance records (so the CSV reproduces the table exactly)."""
    order, by = [], {}
    for r in records:
        if r["method"] not in by:
            by[r["method"]] = []
            order.append(r["method"])
        by[r["method"]].append(r)
    rows = []
    for m in order:
        recs = by[m]
        feas = [bool(r["feasible"]) for r in recs]
        times = [r["solve_seconds"] for r in recs if r["feasible"]]
        gaps = [r["gap_pct"] for r in recs if r["feasible"]]
        subs = [r["sub_pct"] for r in recs if r["feasible"]]
        rows.append(_aggregate(m, feas, times, gaps, subs))
    return rows


def _sig2(x):
    return f"{x:.2g}"


def _fmt_time(x, limit):
    if not math.isfinite(x):
        return "-"
    if limit is not None and x >= 0.999 * limit:
        return "TL"
    if x < 1.0:
        return "<1"
    return _sig2(x)


def _fmt_gap(x, tol):
    if not math.isfinite(x):
        return "-"
    if x <= tol:
        return "✓"
    return _sig2(x)


def _fmt_sub(x):
    if not math.isfinite(x):
        return "-"
    return _sig2(x)


def markdown_table(rows, gap_tol_pct=0.01, time_limit_s=None):
    """Summary table: 2 significant digits, sub-second times as <1,
    within-tolerance gaps as a check mark, inapplicable cells as -."""
    out = ["| method | time mean (s) | time max (s) | gap mean (%) "
           "| gap max (%) | sub mean (%) | sub max (%) | #inf |",
           "|" + "---|" * 8]
    for r in rows:
        cells = (r.method,
                 _fmt_time(r.mean_time, time_limit_s),
                 _fmt_time(r.max_time, time_limit_s),
                 _fmt_gap(r.mean_gap, gap_tol_pct),
                 _fmt_gap(r.max_gap, gap_tol_pct),
                 _fmt_sub(r.mean_sub),
                 _fmt_sub(r.max_sub),
                 str(r.n_infeasible))
        out.append("| " + " | ".join(cells) + " |")
    return "\n".join(out) + "\n"


def _run_one(method, net, entry, idx, train, config):
    t0 = time.perf_counter()
    rep = run_method(method, net, entry.instance, train=train,
                     ref_entry=entry, k=config.k, eps=config.eps,
                     gap_tol_pct=config.gap_tol_pct,
                     time_limit=config.time_limit_s)
    total = time.perf_counter() - t0
    ok = rep.solution is not None and rep.max_violation <= config.feas_tol
    return {"method": method, "instance": idx, "feasible": int(ok),
            "status": rep.status.name, "objective": float(rep.objective),
            "lower_bound": float(rep.lower_bound),
            "gap_pct": _gap_of(rep) if ok else float(rep.gap_pct),
            "sub_pct": math.nan, "max_violation": float(rep.max_violation),
            "nodes": int(rep.nodes), "iterations": int(rep.iterations),
            "solve_seconds": float(rep.wall_time),
            "total_seconds": float(total)}


_POOL = {}


def _pool_init(net, train, test, config):
    _POOL.update(net=net, train=train, test=test, config=config)


def _pool_run(task):
    method, idx = task
    return _run_one(method, _POOL["net"], _POOL["test"][idx], idx,
                    _POOL["train"], _POOL["config"])


def _fill_sub(records, test):
    # reference: the certified optimum when the label is certified, else
    # the best objective seen for that instance (label included)
    refs = {}
    for i, entry in enumerate(test):
        ref = entry.objective
        if not entry.certified:
            cand = [r["objective"] for r in records
                    if r["instance"] == i and r["feasible"]]
            if cand:
                ref = min(ref, min(cand))
        refs[i] = ref
    for r in records:
        r["sub_pct"] = (suboptimality_pct(r["objective"], refs[r["instance"]])
                        if r["feasible"] else math.nan)


def run_benchmark(config, net=None, dataset=None, out_csv=None):
    """The full protocol on one network.

    net and dataset short-circuit the sampling and labeling stages when
    the caller already has them.  Data-boosted methods see only the
    train split; SP-eps additionally reads the test entry's own labeled
    solution, which is exactly its idealized role.  Interruption still
    flushes the records gathered so far.
    """
    if net is None:
        net = load_network(config.case)
    if dataset is None:
        instances = sample_instances(net, config.n_instances, config.pct,
                                     config.seed)
        dataset = build_dataset(net, instances, config)
    train, test = split_dataset(dataset, config.n_train, config.n_test,
                                config.seed)
    if not config.methods:
        log.warning("no methods configured: empty benchmark table")

    tasks = [(m, i) for m in config.methods for i in range(len(test))]
    records = []
    try:
        if config.workers > 1:
            with ProcessPoolExecutor(
                    max_workers=config.workers, initializer=_pool_init,
                    initargs=(net, train, test, config)) as ex:
                done = {}
                futs = {ex.submit(_pool_run, t): p
                        for p, t in enumerate(tasks)}
                try:
                    pending = set(futs)
                    while pending:
                        ready, pending = wait(pending,
                                              return_when=FIRST_COMPLETED)
                        for fu in ready:
                            done[futs[fu]] = fu.result()
                except KeyboardInterrupt:
                    for fu in futs:
                        fu.cancel()
                    raise
                finally:
                    records = [done[p] for p in sorted(done)]
        else:
            for method, i in tasks:
                records.append(_run_one(method, net, test[i], i, train,
                                        config))
    except KeyboardInterrupt:
        log.warning("interrupted: flushing %d of %d results",
                    len(records), len(tasks))

    _fill_sub(records, test)
    rows = rows_from_records(records)
    csv_text = records_to_csv(records, config.workers)
    if out_csv is not None:
        Path(out_csv).write_text(csv_text)
    md = markdown_table(rows, config.gap_tol_pct, config.time_limit_s)
    return BenchResult(rows=rows, records=records, csv_text=csv_text,
                       markdown=md, dataset=dataset)
