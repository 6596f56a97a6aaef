"""Operating points, power-flow physics and feasibility checking.

Rectangular coordinates write the bus voltage as V = e + jf, which makes
every power-flow expression quadratic; the polar form (v, theta) is kept as
an equivalent alternative.  All functions are pure and vectorised over the
network tables.
"""

import enum
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionMismatch, NonpositiveMagnitude, ZeroVoltage


class SolveStatus(enum.Enum):
    Optimal = "Optimal"
    Feasible = "Feasible"
    Infeasible = "Infeasible"
    TimeLimit = "TimeLimit"
    IterationLimit = "IterationLimit"
    NumericalFailure = "NumericalFailure"


@dataclass
class Instance:
    """One operating point's demand: nodal active/reactive load in p.u."""

    pd: np.ndarray
    qd: np.ndarray

    def __post_init__(self):
        self.pd = np.asarray(self.pd, dtype=float)
        self.qd = np.asarray(self.qd, dtype=float)
        if self.pd.shape != self.qd.shape:
            raise DimensionMismatch("pd and qd lengths differ")


@dataclass
class RectState:
    e: np.ndarray
    f: np.ndarray


@dataclass
class PolarState:
    v: np.ndarray
    theta: np.ndarray


@dataclass
class VoltageBox:
    """Per-bus rectangular bounds on (e, f)."""

    e_lo: np.ndarray
    e_hi: np.ndarray
    f_lo: np.ndarray
    f_hi: np.ndarray

    def __post_init__(self):
        self.e_lo = np.asarray(self.e_lo, dtype=float)
        self.e_hi = np.asarray(self.e_hi, dtype=float)
        self.f_lo = np.asarray(self.f_lo, dtype=float)
        self.f_hi = np.asarray(self.f_hi, dtype=float)

    def is_empty(self):
        return bool(np.any(self.e_lo > self.e_hi) or np.any(self.f_lo > self.f_hi))

    def copy(self):
        return VoltageBox(self.e_lo.copy(), self.e_hi.copy(),
                          self.f_lo.copy(), self.f_hi.copy())

    def contains(self, e, f, slack=0.0):
        return bool(np.all(e >= self.e_lo - slack) and np.all(e <= self.e_hi + slack)
                    and np.all(f >= self.f_lo - slack) and np.all(f <= self.f_hi + slack))


@dataclass
class OpfSolution:
    """Full primal point: voltages, generator outputs, branch flows."""

    state: RectState
    pg: np.ndarray
    qg: np.ndarray
    pf: np.ndarray
    qf: np.ndarray
    pt: np.ndarray
    qt: np.ndarray
    objective: float


@dataclass
class ConstraintReport:
    feasible: bool
    max_violation: float
    worst_constraint: str
    by_family: dict


@dataclass
class SolveReport:
    status: SolveStatus
    objective: float = math.nan
    lower_bound: float = -math.inf
    gap_pct: float = math.inf
    solution: OpfSolution = None
    wall_time: float = 0.0
    iterations: int = 0
    nodes: int = 0
    max_violation: float = math.nan
    message: str = ""
    # diagnostic extras, not part of the serialized report
    extra: dict = field(default_factory=dict)


def nominal_instance(net):
    """Demand from the case file itself."""
    a = net.arr
    return Instance(pd=a.pd.copy(), qd=a.qd.copy())


def objective(pg, gens):
    """Total generation cost sum(c2 pg^2 + c1 pg + c0)."""
    pg = np.asarray(pg, dtype=float)
    if pg.shape[-1] != len(gens):
        raise DimensionMismatch(f"{pg.shape[-1]} outputs for {len(gens)} generators")
    c2 = np.array([g.c2 for g in gens])
    c1 = np.array([g.c1 for g in gens])
    c0 = np.array([g.c0 for g in gens])
    return float(np.sum(c2 * pg**2 + c1 * pg + c0))


def flow_equations(state, net):
    """Branch flows (pf, qf, pt, qt) from a rectangular state.

    With from-bus n and to-bus m:

        pf = Gff (en^2+fn^2) + Gft (en em + fn fm) + Bft (fn em - en fm)
        qf = -Bff (en^2+fn^2) - Bft (en em + fn fm) + Gft (fn em - en fm)

    and symmetrically on the to side.
    """
    a = net.arr
    e, f = np.asarray(state.e, float), np.asarray(state.f, float)
    ef, ff = e[a.f], f[a.f]
    et, ft = e[a.t], f[a.t]
    sf = ef * ef + ff * ff
    st = et * et + ft * ft
    K = ef * et + ff * ft      # vn vm cos(tn - tm)
    L = ff * et - ef * ft      # vn vm sin(tn - tm)
    pf = a.Gff * sf + a.Gft * K + a.Bft * L
    qf = -a.Bff * sf - a.Bft * K + a.Gft * L
    pt = a.Gtt * st + a.Gtf * K - a.Btf * L
    qt = -a.Btt * st - a.Btf * K - a.Gtf * L
    return pf, qf, pt, qt


def polar_flow_equations(state, net):
    """Branch flows from a polar state; same conventions as flow_equations."""
    a = net.arr
    v, th = np.asarray(state.v, float), np.asarray(state.theta, float)
    vf, vt = v[a.f], v[a.t]
    d = th[a.f] - th[a.t]
    cs, sn = np.cos(d), np.sin(d)
    vv = vf * vt
    pf = a.Gff * vf**2 + vv * (a.Gft * cs + a.Bft * sn)
    qf = -a.Bff * vf**2 + vv * (-a.Bft * cs + a.Gft * sn)
    pt = a.Gtt * vt**2 + vv * (a.Gtf * cs - a.Btf * sn)
    qt = -a.Btt * vt**2 + vv * (-a.Btf * cs - a.Gtf * sn)
    return pf, qf, pt, qt


def _check_lengths(net, **vecs):
    want = {"pg": net.ng, "qg": net.ng, "pf": net.nl, "qf": net.nl,
            "pt": net.nl, "qt": net.nl, "pd": net.nb, "qd": net.nb,
            "e": net.nb, "f": net.nb, "v": net.nb, "theta": net.nb}
    for name, vec in vecs.items():
        if len(vec) != want[name]:
            raise DimensionMismatch(f"{name} has length {len(vec)}, want {want[name]}")


def balance_residuals(state, inst, net, pg, qg, pf, qf, pt, qt):
    """Nodal power-balance residuals (rP, rQ); zero iff balance holds.

    rP_n = sum_{g at n} pg - pd_n - Gsh_n (en^2+fn^2) - sum_out pf - sum_in pt
    rQ_n = sum_{g at n} qg - qd_n + Bsh_n (en^2+fn^2) - sum_out qf - sum_in qt
    """
    a = net.arr
    _check_lengths(net, pg=pg, qg=qg, pf=pf, qf=qf, pt=pt, qt=qt,
                   pd=inst.pd, e=state.e)
    e, f = np.asarray(state.e, float), np.asarray(state.f, float)
    s = e * e + f * f
    rP = (np.bincount(a.gen_bus, weights=pg, minlength=a.nb)
          - inst.pd - a.gs * s
          - np.bincount(a.f, weights=pf, minlength=a.nb)
          - np.bincount(a.t, weights=pt, minlength=a.nb))
    rQ = (np.bincount(a.gen_bus, weights=qg, minlength=a.nb)
          - inst.qd + a.bs * s
          - np.bincount(a.f, weights=qf, minlength=a.nb)
          - np.bincount(a.t, weights=qt, minlength=a.nb))
    return rP, rQ


def polar_residuals(state, inst, net, pg, qg):
    """Power-flow mismatches in polar coordinates.

    Flows are evaluated internally from (v, theta); agrees with the
    rectangular residuals after coordinate conversion to 1e-12 relative.
    """
    v = np.asarray(state.v, float)
    if np.any(v <= 0.0):
        raise NonpositiveMagnitude("voltage magnitude must be positive")
    a = net.arr
    _check_lengths(net, pg=pg, qg=qg, pd=inst.pd, v=v)
    pf, qf, pt, qt = polar_flow_equations(state, net)
    s = v * v
    rP = (np.bincount(a.gen_bus, weights=pg, minlength=a.nb)
          - inst.pd - a.gs * s
          - np.bincount(a.f, weights=pf, minlength=a.nb)
          - np.bincount(a.t, weights=pt, minlength=a.nb))
    rQ = (np.bincount(a.gen_bus, weights=qg, minlength=a.nb)
          - inst.qd + a.bs * s
          - np.bincount(a.f, weights=qf, minlength=a.nb)
          - np.bincount(a.t, weights=qt, minlength=a.nb))
    return rP, rQ


def rect_to_polar(state):
    e, f = np.asarray(state.e, float), np.asarray(state.f, float)
    s = e * e + f * f
    if np.any(s == 0.0):
        raise ZeroVoltage("angle undefined at the origin")
    return PolarState(v=np.sqrt(s), theta=np.arctan2(f, e))


def polar_to_rect(state):
    v, th = np.asarray(state.v, float), np.asarray(state.theta, float)
    return RectState(e=v * np.cos(th), f=v * np.sin(th))


def make_solution(net, state, pg, qg, flows=None):
    """Assemble an OpfSolution, computing flows and objective when needed."""
    if flows is None:
        flows = flow_equations(state, net)
    pf, qf, pt, qt = flows
    return OpfSolution(state=state, pg=np.asarray(pg, float),
                       qg=np.asarray(qg, float),
                       pf=np.asarray(pf, float), qf=np.asarray(qf, float),
                       pt=np.asarray(pt, float), qt=np.asarray(qt, float),
                       objective=objective(pg, net.generators))


def feasibility_check(sol, inst, net, tol=1e-5):
    """Evaluate every constraint of the formulation at a solution.

    Violations are absolute per-unit quantities: equality residuals for the
    balances and flow definitions, constraint excess for the inequalities
    (squared-magnitude form for voltage limits, squared apparent power for
    thermal limits, exactly as the constraints are written).
    """
    a = net.arr
    e, f = sol.state.e, sol.state.f
    rP, rQ = balance_residuals(sol.state, inst, net, sol.pg, sol.qg,
                               sol.pf, sol.qf, sol.pt, sol.qt)
    pf, qf, pt, qt = flow_equations(sol.state, net)
    flow_def = np.concatenate([sol.pf - pf, sol.qf - qf, sol.pt - pt, sol.qt - qt])

    s = e * e + f * f
    v_excess = np.maximum(a.vmin**2 - s, s - a.vmax**2)
    gen_excess = np.concatenate([a.pmin - sol.pg, sol.pg - a.pmax,
                                 a.qmin - sol.qg, sol.qg - a.qmax])
    rated = a.smax > 0.0
    if np.any(rated):
        s2 = a.smax[rated] ** 2
        th = np.concatenate([sol.pf[rated]**2 + sol.qf[rated]**2 - s2,
                             sol.pt[rated]**2 + sol.qt[rated]**2 - s2])
    else:
        th = np.zeros(0)

    families = {
        "balance-P": np.abs(rP),
        "balance-Q": np.abs(rQ),
        "flow-def": np.abs(flow_def),
        "v-limits": np.maximum(v_excess, 0.0),
        "gen-limits": np.maximum(gen_excess, 0.0),
        "thermal": np.maximum(th, 0.0),
    }
    by_family = {k: float(v.max()) if v.size else 0.0 for k, v in families.items()}
    worst_family = max(by_family, key=lambda k: by_family[k])
    worst_idx = int(np.argmax(families[worst_family])) if families[worst_family].size else 0
    max_violation = by_family[worst_family]
    return ConstraintReport(
        feasible=max_violation <= tol,
        max_violation=max_violation,
        worst_constraint=f"{worst_family}[{worst_idx}]",
        by_family=by_family,
    )


# ---- JSON serialization (per-unit values, bus order = case order) ----

def instance_to_dict(inst):
    return {"pd": list(inst.pd), "qd": list(inst.qd)}


def instance_from_dict(d):
    return Instance(pd=np.array(d["pd"], float), qd=np.array(d["qd"], float))


def solution_to_dict(sol):
    return {
        "e": list(sol.state.e), "f": list(sol.state.f),
        "pg": list(sol.pg), "qg": list(sol.qg),
        "pf": list(sol.pf), "qf": list(sol.qf),
        "pt": list(sol.pt), "qt": list(sol.qt),
        "objective": sol.objective,
    }


def solution_from_dict(d):
    return OpfSolution(
        state=RectState(e=np.array(d["e"], float), f=np.array(d["f"], float)),
        pg=np.array(d["pg"], float), qg=np.array(d["qg"], float),
        pf=np.array(d["pf"], float), qf=np.array(d["qf"], float),
        pt=np.array(d["pt"], float), qt=np.array(d["qt"], float),
        objective=float(d["objective"]),
    )


def report_to_dict(rep):
    def fin(x):
        return x if x is not None and math.isfinite(x) else None

    d = {
        "status": rep.status.value,
        "objective": fin(rep.objective),
        "lower_bound": fin(rep.lower_bound),
        "gap_pct": fin(rep.gap_pct),
        "max_violation": fin(rep.max_violation),
        "wall_time": rep.wall_time,
        "iterations": rep.iterations,
        "nodes": rep.nodes,
        "solution": solution_to_dict(rep.solution) if rep.solution else None,
    }
    if rep.message:
        d["message"] = rep.message
    return d


def save_report(path, rep):
    with open(path, "w") as fh:
        json.dump(report_to_dict(rep), fh, indent=1)
        fh.write("\n")
