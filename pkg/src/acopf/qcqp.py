"""QCQP assembly for the rectangular formulation, plus the polar NLP.

Both problem classes expose the same evaluation interface consumed by the
interior-point solver:

    n, lo, hi            variable count and box bounds
    objective/gradient   scalar cost and dense gradient
    eq/ineq              constraint values (equalities = 0, inequalities <= 0)
    jac_eq/jac_ineq      dense Jacobians
    hess                 dense Hessian of w*f + yE.cE + yI.g

Variable ordering is deterministic: e, f, pg, qg, pf, qf, pt, qt for the
rectangular problem; v, theta, pg, qg, pf, qf, pt, qt for the polar one.
"""

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .errors import EmptyBox
from .formulation import (
    Instance,
    OpfSolution,
    RectState,
    VoltageBox,
    make_solution,
    objective as objective_fn,
    polar_to_rect,
    PolarState,
)


@dataclass
class VarLayout:
    slices: dict
    n: int

    def unpack(self, x, *names):
        return tuple(x[self.slices[k]] for k in names)


def _layout(order, sizes):
    slices, pos = {}, 0
    for name, size in zip(order, sizes):
        slices[name] = slice(pos, pos + size)
        pos += size
    return VarLayout(slices=slices, n=pos)


@dataclass
class ConstraintSet:
    """m constraints c(x) = b + A x + sum_k qc_k x[qi_k] x[qj_k] (row qrow_k)."""

    m: int
    n: int
    A: sp.csr_matrix
    b: np.ndarray
    qrow: np.ndarray
    qi: np.ndarray
    qj: np.ndarray
    qc: np.ndarray
    names: list = field(default_factory=list)

    def __post_init__(self):
        self._Ad = None
        self._coo = None

    def value(self, x):
        out = self.b + self.A.dot(x)
        if self.qc.size:
            out += np.bincount(self.qrow, weights=self.qc * x[self.qi] * x[self.qj],
                               minlength=self.m)
        return out

    def jac_dense(self, x):
        if self._Ad is None:
            self._Ad = self.A.toarray()
        J = self._Ad.copy()
        if self.qc.size:
            np.add.at(J, (self.qrow, self.qi), self.qc * x[self.qj])
            np.add.at(J, (self.qrow, self.qj), self.qc * x[self.qi])
        return J

    def jac_coo(self, x):
        """Structural triplets (duplicates additive, pattern point-independent)."""
        if self._coo is None:
            self._coo = self.A.tocoo()
        Ac = self._coo
        rows = np.concatenate([Ac.row, self.qrow, self.qrow])
        cols = np.concatenate([Ac.col, self.qi, self.qj])
        data = np.concatenate([Ac.data, self.qc * x[self.qj], self.qc * x[self.qi]])
        return rows, cols, data

    def jac_csr(self, x):
        rows, cols, data = self.jac_coo(x)
        return sp.csr_matrix((data, (rows, cols)), shape=(self.m, self.n))

    def hess_into(self, H, lam):
        if self.qc.size:
            w = lam[self.qrow] * self.qc
            np.add.at(H, (self.qi, self.qj), w)
            np.add.at(H, (self.qj, self.qi), w)


def _empty_cset(m, n, A_rows=None, b=None, quads=None, names=None):
    if A_rows is None:
        A = sp.csr_matrix((m, n))
    else:
        r, c, v = A_rows
        A = sp.csr_matrix((v, (r, c)), shape=(m, n))
    if quads is None:
        qrow = qi = qj = np.zeros(0, dtype=np.intp)
        qc = np.zeros(0)
    else:
        qrow, qi, qj, qc = (np.asarray(quads[0], dtype=np.intp),
                            np.asarray(quads[1], dtype=np.intp),
                            np.asarray(quads[2], dtype=np.intp),
                            np.asarray(quads[3], dtype=float))
    return ConstraintSet(m=m, n=n, A=A, b=np.zeros(m) if b is None else np.asarray(b, float),
                         qrow=qrow, qi=qi, qj=qj, qc=qc, names=names or [])


@dataclass
class QcqpProblem:
    """Rectangular AC-OPF as a quadratically constrained quadratic program."""

    layout: VarLayout
    n: int
    lo: np.ndarray
    hi: np.ndarray
    box: VoltageBox
    obj_qi: np.ndarray
    obj_qj: np.ndarray
    obj_qc: np.ndarray
    obj_lin: np.ndarray
    obj_const: float
    eq: ConstraintSet
    ineq: ConstraintSet
    net: object = None
    inst: object = None
    convex: bool = False


def build_qcqp(net, inst, box):
    """Assemble formulation (2) over the given voltage box.

    Equality rows: balance-P, balance-Q, then the four flow-definition
    families.  Inequality rows: squared magnitude upper/lower, then thermal
    limits on rated branches.  Generator bounds and the VoltageBox become
    variable bounds.
    """
    a = net.arr
    nb, nl, ng = a.nb, a.nl, a.ng
    if box.is_empty():
        raise EmptyBox("voltage box has lo > hi")
    lay = _layout(("e", "f", "pg", "qg", "pf", "qf", "pt", "qt"),
                  (nb, nb, ng, ng, nl, nl, nl, nl))
    n = lay.n
    E = np.arange(nb)
    Fv = lay.slices["f"].start + np.arange(nb)
    PG = lay.slices["pg"].start + np.arange(ng)
    QG = lay.slices["qg"].start + np.arange(ng)
    PF = lay.slices["pf"].start + np.arange(nl)
    QF = lay.slices["qf"].start + np.arange(nl)
    PT = lay.slices["pt"].start + np.arange(nl)
    QT = lay.slices["qt"].start + np.arange(nl)
    eF, fF, eT, fT = E[a.f], Fv[a.f], E[a.t], Fv[a.t]

    lo = np.full(n, -np.inf)
    hi = np.full(n, np.inf)
    lo[E], hi[E] = box.e_lo, box.e_hi
    lo[Fv], hi[Fv] = box.f_lo, box.f_hi
    lo[PG], hi[PG] = a.pmin, a.pmax
    lo[QG], hi[QG] = a.qmin, a.qmax

    # ---- equalities ----
    rowP = np.arange(nb)
    rowQ = nb + np.arange(nb)
    row_pf = 2 * nb + np.arange(nl)
    row_qf = 2 * nb + nl + np.arange(nl)
    row_pt = 2 * nb + 2 * nl + np.arange(nl)
    row_qt = 2 * nb + 3 * nl + np.arange(nl)
    mE = 2 * nb + 4 * nl

    Ar = np.concatenate([rowP[a.gen_bus], rowP[a.f], rowP[a.t],
                         rowQ[a.gen_bus], rowQ[a.f], rowQ[a.t],
                         row_pf, row_qf, row_pt, row_qt])
    Ac = np.concatenate([PG, PF, PT, QG, QF, QT, PF, QF, PT, QT])
    Av = np.concatenate([np.ones(ng), -np.ones(2 * nl),
                         np.ones(ng), -np.ones(2 * nl), np.ones(4 * nl)])
    bE = np.zeros(mE)
    bE[rowP] = -inst.pd
    bE[rowQ] = -inst.qd

    # quadratic terms; each row of comments names the product carried
    qrow, qi, qj, qc = [], [], [], []

    def add(rows, ii, jj, cc):
        qrow.append(rows)
        qi.append(ii)
        qj.append(jj)
        qc.append(cc)

    gsn = a.gs != 0.0
    if np.any(gsn):
        idx = np.where(gsn)[0]
        add(rowP[idx], E[idx], E[idx], -a.gs[idx])
        add(rowP[idx], Fv[idx], Fv[idx], -a.gs[idx])
    bsn = a.bs != 0.0
    if np.any(bsn):
        idx = np.where(bsn)[0]
        add(rowQ[idx], E[idx], E[idx], a.bs[idx])
        add(rowQ[idx], Fv[idx], Fv[idx], a.bs[idx])

    # pf_k - [Gff sf + Gft K + Bft L] = 0, K = eF eT + fF fT, L = fF eT - eF fT
    add(row_pf, eF, eF, -a.Gff); add(row_pf, fF, fF, -a.Gff)
    add(row_pf, eF, eT, -a.Gft); add(row_pf, fF, fT, -a.Gft)
    add(row_pf, fF, eT, -a.Bft); add(row_pf, eF, fT, a.Bft)
    # qf_k - [-Bff sf - Bft K + Gft L] = 0
    add(row_qf, eF, eF, a.Bff); add(row_qf, fF, fF, a.Bff)
    add(row_qf, eF, eT, a.Bft); add(row_qf, fF, fT, a.Bft)
    add(row_qf, fF, eT, -a.Gft); add(row_qf, eF, fT, a.Gft)
    # pt_k - [Gtt st + Gtf K - Btf L] = 0
    add(row_pt, eT, eT, -a.Gtt); add(row_pt, fT, fT, -a.Gtt)
    add(row_pt, eF, eT, -a.Gtf); add(row_pt, fF, fT, -a.Gtf)
    add(row_pt, fF, eT, a.Btf); add(row_pt, eF, fT, -a.Btf)
    # qt_k - [-Btt st - Btf K - Gtf L] = 0
    add(row_qt, eT, eT, a.Btt); add(row_qt, fT, fT, a.Btt)
    add(row_qt, eF, eT, a.Btf); add(row_qt, fF, fT, a.Btf)
    add(row_qt, fF, eT, a.Gtf); add(row_qt, eF, fT, -a.Gtf)

    eq_names = ([f"balance-P[{i}]" for i in range(nb)]
                + [f"balance-Q[{i}]" for i in range(nb)]
                + [f"flow-pf[{k}]" for k in range(nl)]
                + [f"flow-qf[{k}]" for k in range(nl)]
                + [f"flow-pt[{k}]" for k in range(nl)]
                + [f"flow-qt[{k}]" for k in range(nl)])
    eq = _empty_cset(mE, n, (Ar, Ac, Av), bE,
                     (np.concatenate(qrow), np.concatenate(qi),
                      np.concatenate(qj), np.concatenate(qc)), eq_names)

    # ---- inequalities: vmax, vmin, thermal on rated branches ----
    rated = np.where(a.smax > 0.0)[0]
    nr = rated.size
    mI = 2 * nb + 2 * nr
    r_vmax = np.arange(nb)
    r_vmin = nb + np.arange(nb)
    r_thf = 2 * nb + np.arange(nr)
    r_tht = 2 * nb + nr + np.arange(nr)
    bI = np.zeros(mI)
    bI[r_vmax] = -a.vmax**2
    bI[r_vmin] = a.vmin**2
    bI[r_thf] = -a.smax[rated] ** 2
    bI[r_tht] = -a.smax[rated] ** 2
    iq_row = np.concatenate([r_vmax, r_vmax, r_vmin, r_vmin,
                             r_thf, r_thf, r_tht, r_tht])
    iq_i = np.concatenate([E, Fv, E, Fv, PF[rated], QF[rated], PT[rated], QT[rated]])
    iq_c = np.concatenate([np.ones(2 * nb), -np.ones(2 * nb), np.ones(4 * nr)])
    ineq_names = ([f"vmax[{i}]" for i in range(nb)]
                  + [f"vmin[{i}]" for i in range(nb)]
                  + [f"thermal-f[{k}]" for k in rated]
                  + [f"thermal-t[{k}]" for k in rated])
    ineq = _empty_cset(mI, n, None, bI, (iq_row, iq_i, iq_i, iq_c), ineq_names)

    obj_lin = np.zeros(n)
    obj_lin[PG] = a.c1
    return QcqpProblem(
        layout=lay, n=n, lo=lo, hi=hi, box=box,
        obj_qi=PG.copy(), obj_qj=PG.copy(), obj_qc=a.c2.copy(),
        obj_lin=obj_lin, obj_const=float(np.sum(a.c0)),
        eq=eq, ineq=ineq, net=net, inst=inst, convex=False,
    )


class QcqpNlp:
    """Evaluation adapter exposing a QcqpProblem to the interior-point solver."""

    def __init__(self, problem):
        self.p = problem
        self.n = problem.n
        self.lo = problem.lo
        self.hi = problem.hi
        self.mE = problem.eq.m
        self.mI = problem.ineq.m
        self.convex = problem.convex
        # concatenated quadratic terms for one-shot Hessian assembly
        self._hi_ = np.concatenate([problem.obj_qi, problem.eq.qi, problem.ineq.qi])
        self._hj_ = np.concatenate([problem.obj_qj, problem.eq.qj, problem.ineq.qj])
        self._hc_ = np.concatenate([problem.obj_qc, problem.eq.qc, problem.ineq.qc])
        self._hrow_eq = problem.eq.qrow
        self._hrow_iq = problem.ineq.qrow
        self._nobj = problem.obj_qc.size
        # tall, sparse inequality systems (lifted relaxations) go through
        # sparse Jacobian products in the solver
        self.use_sparse_ineq = problem.ineq.m > 3 * problem.n

    def objective(self, x):
        p = self.p
        return float(p.obj_const + p.obj_lin.dot(x)
                     + np.sum(p.obj_qc * x[p.obj_qi] * x[p.obj_qj]))

    def gradient(self, x):
        p = self.p
        g = p.obj_lin.copy()
        np.add.at(g, p.obj_qi, p.obj_qc * x[p.obj_qj])
        np.add.at(g, p.obj_qj, p.obj_qc * x[p.obj_qi])
        return g

    def eq(self, x):
        return self.p.eq.value(x)

    def ineq(self, x):
        return self.p.ineq.value(x)

    def jac_eq(self, x):
        return self.p.eq.jac_dense(x)

    def jac_ineq(self, x):
        return self.p.ineq.jac_dense(x)

    def jac_ineq_sparse(self, x):
        return self.p.ineq.jac_csr(x)

    def hess(self, x, w, yE, yI):
        weights = np.concatenate([
            np.full(self._nobj, w) * self.p.obj_qc,
            yE[self._hrow_eq] * self.p.eq.qc,
            yI[self._hrow_iq] * self.p.ineq.qc,
        ])
        H = np.zeros((self.n, self.n))
        np.add.at(H, (self._hi_, self._hj_), weights)
        np.add.at(H, (self._hj_, self._hi_), weights)
        return H

    def extract_solution(self, x):
        p = self.p
        e, f, pg, qg, pf, qf, pt, qt = p.layout.unpack(
            x, "e", "f", "pg", "qg", "pf", "qf", "pt", "qt")
        return OpfSolution(
            state=RectState(e=e.copy(), f=f.copy()),
            pg=pg.copy(), qg=qg.copy(),
            pf=pf.copy(), qf=qf.copy(), pt=pt.copy(), qt=qt.copy(),
            objective=objective_fn(pg, p.net.generators),
        )


class PolarProblem:
    """AC-OPF in polar coordinates with analytic first and second derivatives.

    The nonlinearity lives in the flow-definition rows: every flow
    expression has the shape D va^2 + vF vT (A cos d + B sin d) with
    d = theta_F - theta_T; its derivatives follow from
    C = A cos d + B sin d and S = dC/dd = -A sin d + B cos d.
    """

    def __init__(self, net, inst):
        a = net.arr
        self.net, self.inst = net, inst
        nb, nl, ng = a.nb, a.nl, a.ng
        self.nb, self.nl, self.ng = nb, nl, ng
        lay = _layout(("v", "theta", "pg", "qg", "pf", "qf", "pt", "qt"),
                      (nb, nb, ng, ng, nl, nl, nl, nl))
        self.layout = lay
        self.n = lay.n
        self.convex = False

        self.V = np.arange(nb)
        self.TH = nb + np.arange(nb)
        self.PG = lay.slices["pg"].start + np.arange(ng)
        self.QG = lay.slices["qg"].start + np.arange(ng)
        self.PF = lay.slices["pf"].start + np.arange(nl)
        self.QF = lay.slices["qf"].start + np.arange(nl)
        self.PT = lay.slices["pt"].start + np.arange(nl)
        self.QT = lay.slices["qt"].start + np.arange(nl)

        self.lo = np.full(self.n, -np.inf)
        self.hi = np.full(self.n, np.inf)
        self.lo[self.V], self.hi[self.V] = a.vmin, a.vmax
        self.lo[self.TH], self.hi[self.TH] = a.theta_min, a.theta_max
        self.lo[self.PG], self.hi[self.PG] = a.pmin, a.pmax
        self.lo[self.QG], self.hi[self.QG] = a.qmin, a.qmax

        self.mE = 2 * nb + 4 * nl
        self.rowP = np.arange(nb)
        self.rowQ = nb + np.arange(nb)
        self.row_flow = [2 * nb + q * nl + np.arange(nl) for q in range(4)]

        # constant Jacobian entries: generator and flow-variable columns
        rows = [self.rowP[a.gen_bus], self.rowP[a.f], self.rowP[a.t],
                self.rowQ[a.gen_bus], self.rowQ[a.f], self.rowQ[a.t]]
        cols = [self.PG, self.PF, self.PT, self.QG, self.QF, self.QT]
        vals = [np.ones(ng), -np.ones(nl), -np.ones(nl),
                np.ones(ng), -np.ones(nl), -np.ones(nl)]
        for q, col in enumerate((self.PF, self.QF, self.PT, self.QT)):
            rows.append(self.row_flow[q])
            cols.append(col)
            vals.append(np.ones(nl))
        self._JE_const = np.zeros((self.mE, self.n))
        self._JE_const[np.concatenate(rows), np.concatenate(cols)] = \
            np.concatenate(vals)

        # thermal inequality rows on rated branches
        self.rated = np.where(a.smax > 0.0)[0]
        self.mI = 2 * self.rated.size
        # (a_side, D, A, B) per flow quantity, row-aligned with row_flow
        self._spec = [
            ("F", a.Gff, a.Gft, a.Bft),
            ("F", -a.Bff, -a.Bft, a.Gft),
            ("T", a.Gtt, a.Gtf, -a.Btf),
            ("T", -a.Btt, -a.Btf, -a.Gtf),
        ]

    def _trig(self, x):
        a = self.net.arr
        v, th = x[self.V], x[self.TH]
        vF, vT = v[a.f], v[a.t]
        d = th[a.f] - th[a.t]
        return v, vF, vT, np.cos(d), np.sin(d)

    def _flow_exprs(self, x):
        _, vF, vT, cs, sn = self._trig(x)
        vv = vF * vT
        out = []
        for side, D, A, B in self._spec:
            va = vF if side == "F" else vT
            out.append(D * va**2 + vv * (A * cs + B * sn))
        return out

    def objective(self, x):
        a = self.net.arr
        pg = x[self.PG]
        return float(np.sum(a.c2 * pg**2 + a.c1 * pg + a.c0))

    def gradient(self, x):
        a = self.net.arr
        g = np.zeros(self.n)
        g[self.PG] = 2.0 * a.c2 * x[self.PG] + a.c1
        return g

    def eq(self, x):
        a = self.net.arr
        v = x[self.V]
        s = v * v
        out = np.zeros(self.mE)
        out[self.rowP] = (np.bincount(a.gen_bus, weights=x[self.PG], minlength=self.nb)
                          - self.inst.pd - a.gs * s
                          - np.bincount(a.f, weights=x[self.PF], minlength=self.nb)
                          - np.bincount(a.t, weights=x[self.PT], minlength=self.nb))
        out[self.rowQ] = (np.bincount(a.gen_bus, weights=x[self.QG], minlength=self.nb)
                          - self.inst.qd + a.bs * s
                          - np.bincount(a.f, weights=x[self.QF], minlength=self.nb)
                          - np.bincount(a.t, weights=x[self.QT], minlength=self.nb))
        exprs = self._flow_exprs(x)
        for q, col in enumerate((self.PF, self.QF, self.PT, self.QT)):
            out[self.row_flow[q]] = x[col] - exprs[q]
        return out

    def jac_eq(self, x):
        a = self.net.arr
        J = self._JE_const.copy()
        v = x[self.V]
        J[self.rowP, self.V] = -2.0 * a.gs * v
        J[self.rowQ, self.V] = 2.0 * a.bs * v
        _, vF, vT, cs, sn = self._trig(x)
        vv = vF * vT
        vFi, vTi = self.V[a.f], self.V[a.t]
        tFi, tTi = self.TH[a.f], self.TH[a.t]
        for q, (side, D, A, B) in enumerate(self._spec):
            C = A * cs + B * sn
            S = -A * sn + B * cs
            dvF = vT * C + (2.0 * D * vF if side == "F" else 0.0)
            dvT = vF * C + (2.0 * D * vT if side == "T" else 0.0)
            rows = self.row_flow[q]
            np.add.at(J, (rows, vFi), -dvF)
            np.add.at(J, (rows, vTi), -dvT)
            np.add.at(J, (rows, tFi), -vv * S)
            np.add.at(J, (rows, tTi), vv * S)
        return J

    def ineq(self, x):
        if self.mI == 0:
            return np.zeros(0)
        a = self.net.arr
        r = self.rated
        s2 = a.smax[r] ** 2
        return np.concatenate([
            x[self.PF[r]]**2 + x[self.QF[r]]**2 - s2,
            x[self.PT[r]]**2 + x[self.QT[r]]**2 - s2,
        ])

    def jac_ineq(self, x):
        J = np.zeros((self.mI, self.n))
        if self.mI == 0:
            return J
        r = self.rated
        nr = r.size
        rows = np.arange(nr)
        J[rows, self.PF[r]] = 2.0 * x[self.PF[r]]
        J[rows, self.QF[r]] = 2.0 * x[self.QF[r]]
        J[nr + rows, self.PT[r]] = 2.0 * x[self.PT[r]]
        J[nr + rows, self.QT[r]] = 2.0 * x[self.QT[r]]
        return J

    def hess(self, x, w, yE, yI):
        a = self.net.arr
        H = np.zeros((self.n, self.n))
        H[self.PG, self.PG] = 2.0 * w * a.c2
        # balance shunt curvature
        H[self.V, self.V] += -2.0 * a.gs * yE[self.rowP] + 2.0 * a.bs * yE[self.rowQ]
        _, vF, vT, cs, sn = self._trig(x)
        vv = vF * vT
        vFi, vTi = self.V[a.f], self.V[a.t]
        tFi, tTi = self.TH[a.f], self.TH[a.t]
        for q, (side, D, A, B) in enumerate(self._spec):
            lam = -yE[self.row_flow[q]]  # rows are flow_var - expr
            C = A * cs + B * sn
            S = -A * sn + B * cs
            if side == "F":
                np.add.at(H, (vFi, vFi), lam * 2.0 * D)
            else:
                np.add.at(H, (vTi, vTi), lam * 2.0 * D)
            lC = lam * C
            lS = lam * S
            np.add.at(H, (vFi, vTi), lC)
            np.add.at(H, (vTi, vFi), lC)
            np.add.at(H, (vFi, tFi), vT * lS)
            np.add.at(H, (tFi, vFi), vT * lS)
            np.add.at(H, (vFi, tTi), -vT * lS)
            np.add.at(H, (tTi, vFi), -vT * lS)
            np.add.at(H, (vTi, tFi), vF * lS)
            np.add.at(H, (tFi, vTi), vF * lS)
            np.add.at(H, (vTi, tTi), -vF * lS)
            np.add.at(H, (tTi, vTi), -vF * lS)
            np.add.at(H, (tFi, tFi), -vv * lC)
            np.add.at(H, (tTi, tTi), -vv * lC)
            np.add.at(H, (tFi, tTi), vv * lC)
            np.add.at(H, (tTi, tFi), vv * lC)
        if self.mI:
            r = self.rated
            nr = r.size
            rows = np.arange(nr)
            np.add.at(H, (self.PF[r], self.PF[r]), 2.0 * yI[rows])
            np.add.at(H, (self.QF[r], self.QF[r]), 2.0 * yI[rows])
            np.add.at(H, (self.PT[r], self.PT[r]), 2.0 * yI[nr + rows])
            np.add.at(H, (self.QT[r], self.QT[r]), 2.0 * yI[nr + rows])
        return H

    def extract_solution(self, x):
        state = polar_to_rect(PolarState(v=x[self.V].copy(), theta=x[self.TH].copy()))
        return OpfSolution(
            state=state,
            pg=x[self.PG].copy(), qg=x[self.QG].copy(),
            pf=x[self.PF].copy(), qf=x[self.QF].copy(),
            pt=x[self.PT].copy(), qt=x[self.QT].copy(),
            objective=objective_fn(x[self.PG], self.net.generators),
        )


@dataclass
class DerivativeBundle:
    objective_value: float
    objective_gradient: np.ndarray
    constraint_values: np.ndarray
    jacobian: sp.csr_matrix
    m_eq: int
    m_ineq: int
    hessian_fn: object

    def lagrangian_hessian(self, w, y_eq, y_ineq):
        return sp.csr_matrix(self.hessian_fn(w, y_eq, y_ineq))


def nlp_for(net, inst, formulation="rect", box=None):
    """The NLP adapter for either coordinate system (default original box)."""
    if formulation == "polar":
        return PolarProblem(net, inst)
    if box is None:
        from .history import original_bounds
        box = original_bounds(net.buses)
    return QcqpNlp(build_qcqp(net, inst, box))


def derivatives(x, inst, net, formulation="rect"):
    """First derivatives of all constraints and the Lagrangian Hessian at x.

    x follows the deterministic variable ordering of the corresponding
    problem.  The stacked Jacobian rows are equalities first, then
    inequalities; sparsity patterns do not depend on x.
    """
    nlp = nlp_for(net, inst, formulation)
    x = np.asarray(x, dtype=float)
    if formulation == "polar":
        JE = nlp.jac_eq(x)
        JI = nlp.jac_ineq(x)
        J = sp.csr_matrix(np.vstack([JE, JI]))
    else:
        p = nlp.p
        re_, ce_, de_ = p.eq.jac_coo(x)
        ri_, ci_, di_ = p.ineq.jac_coo(x)
        J = sp.coo_matrix(
            (np.concatenate([de_, di_]),
             (np.concatenate([re_, p.eq.m + ri_]), np.concatenate([ce_, ci_]))),
            shape=(p.eq.m + p.ineq.m, p.n)).tocsr()
    vals = np.concatenate([nlp.eq(x), nlp.ineq(x)])
    return DerivativeBundle(
        objective_value=nlp.objective(x),
        objective_gradient=nlp.gradient(x),
        constraint_values=vals,
        jacobian=J,
        m_eq=nlp.mE,
        m_ineq=nlp.mI,
        hessian_fn=lambda w, yE, yI: nlp.hess(x, w, yE, yI),
    )
