"""Spatial branch-and-bound for the rectangular AC-OPF QCQP.

Each node relaxes the voltage products over its box: squares e^2, f^2
and the four per-branch bilinears are lifted into auxiliary variables
tied down by secant/McCormick envelopes, turning balance and flow
structure into linear rows over the lifted space while thermal limits
stay convex quadratic.  The convex node program is solved with the
interior-point machinery; branching splits the voltage box where the
lifted values disagree most with the actual products.
"""

import dataclasses
import heapq
import math
import time
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .errors import (
    EmptyBoxDetected,
    InfeasibleNode,
    InvertedBounds,
    NoBranchCandidate,
)
from .formulation import (
    OpfSolution,
    RectState,
    SolveReport,
    SolveStatus,
    VoltageBox,
    feasibility_check,
    flow_equations,
    objective as cost_of,
)
from .interior_point import IpOptions, solve_ip
from .qcqp import ConstraintSet, QcqpProblem, _empty_cset, _layout


@dataclass
class LinearCut:
    """a_x x + a_y y + a_w w (sense) rhs, sense one of "<=", ">="."""

    a_x: float
    a_y: float
    a_w: float
    rhs: float
    sense: str = "<="

    def holds(self, x, y, w, tol=1e-12):
        lhs = self.a_x * x + self.a_y * y + self.a_w * w
        scale = 1 + abs(self.rhs)
        if self.sense == "<=":
            return lhs <= self.rhs + tol * scale
        return lhs >= self.rhs - tol * scale


@dataclass
class SbbNode:
    id: int
    box: VoltageBox
    lb: float
    depth: int
    warm: object = field(default=None, repr=False, compare=False)


@dataclass
class SbbOptions:
    gap_tol_pct: float = 0.01
    time_limit: float = 3600.0
    max_nodes: int = 1_000_000
    branch_rule: str = "max-violation"
    fbbt_rounds: int = 2
    obbt_rounds: int = 3
    cone_cut_rounds: int = 8
    cone_cut_tol: float = 1e-6
    collect_nodes: bool = False
    node_log: object = None
    ip_opts: IpOptions = None


def mccormick_envelope(x_lo, x_hi, y_lo, y_hi):
    """The four standard envelope cuts for w = x*y over a box.

    Two underestimators (sense >=) and two overestimators (sense <=),
    each written as w - ax - by (sense) rhs.
    """
    if x_lo > x_hi or y_lo > y_hi:
        raise InvertedBounds("envelope requires lo <= hi")
    return [
        LinearCut(a_x=-y_lo, a_y=-x_lo, a_w=1.0, rhs=-x_lo * y_lo, sense=">="),
        LinearCut(a_x=-y_hi, a_y=-x_hi, a_w=1.0, rhs=-x_hi * y_hi, sense=">="),
        LinearCut(a_x=-y_hi, a_y=-x_lo, a_w=1.0, rhs=-x_lo * y_hi, sense="<="),
        LinearCut(a_x=-y_lo, a_y=-x_hi, a_w=1.0, rhs=-x_hi * y_lo, sense="<="),
    ]


def square_envelope(x_lo, x_hi):
    """Secant over-estimator and three tangent under-estimators of w = x^2."""
    if x_lo > x_hi:
        raise InvertedBounds("envelope requires lo <= hi")
    cuts = [LinearCut(a_x=-(x_lo + x_hi), a_y=0.0, a_w=1.0,
                      rhs=-x_lo * x_hi, sense="<=")]
    for t in (x_lo, 0.5 * (x_lo + x_hi), x_hi):
        cuts.append(LinearCut(a_x=-2.0 * t, a_y=0.0, a_w=1.0,
                              rhs=-t * t, sense=">="))
    return cuts


def _interval_square(lo, hi):
    """Elementwise interval of x^2 over [lo, hi]."""
    hi2 = np.maximum(lo * lo, hi * hi)
    lo2 = np.where((lo <= 0) & (hi >= 0), 0.0, np.minimum(lo * lo, hi * hi))
    return lo2, hi2


def _angle_intervals(e_lo, e_hi, f_lo, f_hi):
    """Smallest [lo, hi] containing atan2(f, e) over each bus box.

    Exact for boxes in the closed right half-plane, where atan2 is
    monotone in each argument and the extremes sit at two corners.
    A box reaching into e < 0 falls back to the full circle.
    """
    hi = np.where(f_hi >= 0.0, np.arctan2(f_hi, e_lo), np.arctan2(f_hi, e_hi))
    lo = np.where(f_lo <= 0.0, np.arctan2(f_lo, e_lo), np.arctan2(f_lo, e_hi))
    wild = e_lo < -1e-12
    hi = np.where(wild, math.pi, hi)
    lo = np.where(wild, -math.pi, lo)
    return lo, hi


def fbbt(problem, box, rounds):
    """Shrink the voltage box by interval propagation of the magnitude
    limits, with a per-bus balance interval infeasibility test each round.

    Sound: any point feasible inside the input box stays inside the
    output box.  Raises EmptyBoxDetected when the region is proven empty.
    """
    net = problem.net
    a = net.arr
    out = box.copy()
    for _ in range(max(0, int(rounds))):
        e_lo2, e_hi2 = _interval_square(out.e_lo, out.e_hi)
        f_lo2, f_hi2 = _interval_square(out.f_lo, out.f_hi)

        # e^2 <= vmax^2 - min f^2, and the f analogue
        cap = a.vmax**2 - f_lo2
        if np.any(cap < 0):
            raise EmptyBoxDetected("imaginary part alone exceeds vmax")
        s = np.sqrt(cap)
        out.e_hi = np.minimum(out.e_hi, s)
        out.e_lo = np.maximum(out.e_lo, -s)
        cap = a.vmax**2 - e_lo2
        if np.any(cap < 0):
            raise EmptyBoxDetected("real part alone exceeds vmax")
        s = np.sqrt(cap)
        out.f_hi = np.minimum(out.f_hi, s)
        out.f_lo = np.maximum(out.f_lo, -s)
        if out.is_empty():
            raise EmptyBoxDetected("magnitude upper bound emptied the box")

        # e^2 >= vmin^2 - max f^2 excludes a band (-s, s); prune the side
        # of the box that cannot reach the surviving half-lines
        for lo_arr, hi_arr, other_hi2 in (
            (out.e_lo, out.e_hi, f_hi2),
            (out.f_lo, out.f_hi, e_hi2),
        ):
            need = a.vmin**2 - other_hi2
            mask = need > 0
            if not np.any(mask):
                continue
            s = np.zeros_like(need)
            s[mask] = np.sqrt(need[mask])
            only_right = mask & (lo_arr > -s)
            only_left = mask & (hi_arr < s) & ~only_right
            dead = mask & (lo_arr > -s) & (hi_arr < s)
            if np.any(dead):
                raise EmptyBoxDetected("band below vmin covers the whole box")
            hi_arr[:] = np.where(only_left, np.minimum(hi_arr, -s), hi_arr)
            lo_arr[:] = np.where(only_right, np.maximum(lo_arr, s), lo_arr)
        if out.is_empty():
            raise EmptyBoxDetected("magnitude lower bound emptied the box")

        e_lo2, e_hi2 = _interval_square(out.e_lo, out.e_hi)
        f_lo2, f_hi2 = _interval_square(out.f_lo, out.f_hi)
        _balance_interval_check(problem, e_lo2 + f_lo2, e_hi2 + f_hi2)
    return out


def _balance_interval_check(problem, s_lo, s_hi):
    """Per-bus interval test: generation minus demand minus shunt must
    overlap what the incident rated branches can carry."""
    net, inst = problem.net, problem.inst
    a = net.arr
    nb = a.nb
    gp_lo = np.bincount(a.gen_bus, weights=a.pmin, minlength=nb)
    gp_hi = np.bincount(a.gen_bus, weights=a.pmax, minlength=nb)
    gq_lo = np.bincount(a.gen_bus, weights=a.qmin, minlength=nb)
    gq_hi = np.bincount(a.gen_bus, weights=a.qmax, minlength=nb)

    shunt_p = np.stack([-a.gs * s_lo, -a.gs * s_hi])
    shunt_q = np.stack([a.bs * s_lo, a.bs * s_hi])
    p_lo = gp_lo - inst.pd + shunt_p.min(axis=0)
    p_hi = gp_hi - inst.pd + shunt_p.max(axis=0)
    q_lo = gq_lo - inst.qd + shunt_q.min(axis=0)
    q_hi = gq_hi - inst.qd + shunt_q.max(axis=0)

    cap = np.bincount(a.f, weights=a.smax, minlength=nb) \
        + np.bincount(a.t, weights=a.smax, minlength=nb)
    unrated = np.bincount(a.f, weights=(a.smax <= 0).astype(float), minlength=nb) \
        + np.bincount(a.t, weights=(a.smax <= 0).astype(float), minlength=nb)
    rated_bus = unrated == 0
    bad = rated_bus & ((p_hi < -cap) | (p_lo > cap)
                       | (q_hi < -cap) | (q_lo > cap))
    if np.any(bad):
        raise EmptyBoxDetected(
            f"balance interval empty at bus index {int(np.where(bad)[0][0])}")


class _RelaxTemplate:
    """Prebuilt pieces of the lifted node relaxation.

    Variables: e, f, pg, qg, u = e^2, w = f^2, and per branch the
    products a = eF*eT, b = fF*fT, c = fF*eT, d = eF*fT.  Balance rows
    become linear over the lifted variables; only the secant and
    McCormick rows depend on the node box, so everything else is
    assembled once and reused across the tree.
    """

    def __init__(self, problem):
        net, inst = problem.net, problem.inst
        self.net, self.inst = net, inst
        a = net.arr
        nb, nl, ng = a.nb, a.nl, a.ng
        self.nb, self.nl, self.ng = nb, nl, ng
        lay = _layout(("e", "f", "pg", "qg", "u", "w", "a", "b", "c", "d"),
                      (nb, nb, ng, ng, nb, nb, nl, nl, nl, nl))
        self.layout = lay
        n = lay.n
        self.n = n
        o = {k: lay.slices[k].start for k in lay.slices}
        E = o["e"] + np.arange(nb)
        F = o["f"] + np.arange(nb)
        PG = o["pg"] + np.arange(ng)
        QG = o["qg"] + np.arange(ng)
        U = o["u"] + np.arange(nb)
        W = o["w"] + np.arange(nb)
        A_ = o["a"] + np.arange(nl)
        B_ = o["b"] + np.arange(nl)
        C_ = o["c"] + np.arange(nl)
        D_ = o["d"] + np.arange(nl)
        self.idx = dict(E=E, F=F, PG=PG, QG=QG, U=U, W=W, A=A_, B=B_, C=C_, D=D_)

        # balance equalities, linear over lifted variables
        rows, cols, vals = [], [], []

        def put(r, c, v):
            rows.append(np.asarray(r, dtype=np.intp))
            cols.append(np.asarray(c, dtype=np.intp))
            vals.append(np.broadcast_to(np.asarray(v, dtype=float),
                                        np.shape(r)).copy())

        fr, to = a.f, a.t
        rowP = np.arange(nb)
        rowQ = nb + np.arange(nb)
        put(rowP[a.gen_bus], PG, np.ones(ng))
        put(rowQ[a.gen_bus], QG, np.ones(ng))
        put(rowP, U, -a.gs)
        put(rowP, W, -a.gs)
        put(rowQ, U, a.bs)
        put(rowQ, W, a.bs)
        put(rowP[fr], U[fr], -a.Gff); put(rowP[fr], W[fr], -a.Gff)
        put(rowP[fr], A_, -a.Gft); put(rowP[fr], B_, -a.Gft)
        put(rowP[fr], C_, -a.Bft); put(rowP[fr], D_, a.Bft)
        put(rowP[to], U[to], -a.Gtt); put(rowP[to], W[to], -a.Gtt)
        put(rowP[to], A_, -a.Gtf); put(rowP[to], B_, -a.Gtf)
        put(rowP[to], C_, a.Btf); put(rowP[to], D_, -a.Btf)
        put(rowQ[fr], U[fr], a.Bff); put(rowQ[fr], W[fr], a.Bff)
        put(rowQ[fr], A_, a.Bft); put(rowQ[fr], B_, a.Bft)
        put(rowQ[fr], C_, -a.Gft); put(rowQ[fr], D_, a.Gft)
        put(rowQ[to], U[to], a.Btt); put(rowQ[to], W[to], a.Btt)
        put(rowQ[to], A_, a.Btf); put(rowQ[to], B_, a.Btf)
        put(rowQ[to], C_, a.Gtf); put(rowQ[to], D_, -a.Gtf)
        bE = np.concatenate([-inst.pd, -inst.qd])
        eq_names = ([f"balance-P[{i}]" for i in range(nb)]
                    + [f"balance-Q[{i}]" for i in range(nb)])
        self.eq = _empty_cset(
            2 * nb, n,
            (np.concatenate(rows), np.concatenate(cols), np.concatenate(vals)),
            bE, None, eq_names)

        # inequality block sizes; the row order is fixed so the quadratic
        # terms (squares and thermal) can be wired to rows once
        self.rated = np.where(a.smax > 0.0)[0]
        nr = self.rated.size
        self.m_vmag = 2 * nb
        self.m_sq = 2 * nb
        self.m_sec = 2 * nb
        self.m_mc = 16 * nl
        self.m_th = 2 * nr
        self.m_sector = 4 * nl
        self.mI = (self.m_vmag + self.m_sq + self.m_sec + self.m_mc
                   + self.m_th + self.m_sector)

        # vmag rows: u + w <= vmax^2 and vmin^2 <= u + w
        r_vmax = np.arange(nb)
        r_vmin = nb + np.arange(nb)
        vr = np.concatenate([r_vmax, r_vmax, r_vmin, r_vmin])
        vc = np.concatenate([U, W, U, W])
        vv = np.concatenate([np.ones(2 * nb), -np.ones(2 * nb)])
        self.A_vmag = sp.csr_matrix((vv, (vr, vc)), shape=(self.m_vmag, n))
        self.b_vmag = np.concatenate([-a.vmax**2, a.vmin**2])

        # convex halves of the squares: e^2 - u <= 0, f^2 - w <= 0
        sqr = np.arange(2 * nb)
        self.A_sq = sp.csr_matrix(
            (-np.ones(2 * nb), (sqr, np.concatenate([U, W]))),
            shape=(self.m_sq, n))
        self.b_sq = np.zeros(2 * nb)
        off_sq = self.m_vmag
        q_rows = [off_sq + np.arange(2 * nb)]
        q_i = [np.concatenate([E, F])]
        q_j = [np.concatenate([E, F])]
        q_c = [np.ones(2 * nb)]

        # thermal rows: squared apparent power in the lifted flow
        # expressions, one row per rated branch end
        off_th = self.m_vmag + self.m_sq + self.m_sec + self.m_mc
        th_rows, th_i, th_j, th_c = [], [], [], []
        for pos, k in enumerate(self.rated):
            for r_off, coefs in (
                (0, [(U[fr[k]], a.Gff[k]), (W[fr[k]], a.Gff[k]),
                     (A_[k], a.Gft[k]), (B_[k], a.Gft[k]),
                     (C_[k], a.Bft[k]), (D_[k], -a.Bft[k])]),
                (0, [(U[fr[k]], -a.Bff[k]), (W[fr[k]], -a.Bff[k]),
                     (A_[k], -a.Bft[k]), (B_[k], -a.Bft[k]),
                     (C_[k], a.Gft[k]), (D_[k], -a.Gft[k])]),
                (nr, [(U[to[k]], a.Gtt[k]), (W[to[k]], a.Gtt[k]),
                      (A_[k], a.Gtf[k]), (B_[k], a.Gtf[k]),
                      (C_[k], -a.Btf[k]), (D_[k], a.Btf[k])]),
                (nr, [(U[to[k]], -a.Btt[k]), (W[to[k]], -a.Btt[k]),
                      (A_[k], -a.Btf[k]), (B_[k], -a.Btf[k]),
                      (C_[k], -a.Gtf[k]), (D_[k], a.Gtf[k])]),
            ):
                row = off_th + r_off + pos
                for ii in range(6):
                    vi, ci = coefs[ii]
                    for jj in range(ii, 6):
                        vj, cj = coefs[jj]
                        th_rows.append(row)
                        th_i.append(min(vi, vj))
                        th_j.append(max(vi, vj))
                        th_c.append(ci * cj if ii == jj else 2.0 * ci * cj)
        self.b_th = (np.concatenate([-a.smax[self.rated] ** 2] * 2)
                     if nr else np.zeros(0))
        q_rows.append(np.asarray(th_rows, dtype=np.intp))
        q_i.append(np.asarray(th_i, dtype=np.intp))
        q_j.append(np.asarray(th_j, dtype=np.intp))
        q_c.append(np.asarray(th_c, dtype=float))

        # branch cone ||(a+b, c-d, (sF-sT)/2)|| <= (sF+sT)/2 where
        # sX = u[X] + w[X]: an equality at every real voltage point
        # (Lagrange identity), so the cone is a valid restriction that
        # ties the products to the squares when the box is wide.  It is
        # enforced through linear supporting cuts pooled on the template;
        # every cut is implied by the cone via Cauchy-Schwarz, so the pool
        # is box-independent and shared by the whole search tree, and the
        # node programs stay convex with definite row Hessians.
        self.cone_cols = np.stack(
            [A_, B_, C_, D_, U[fr], W[fr], U[to], W[to]], axis=1)
        self.pool_dirs = [([], []) for _ in range(nl)]
        self.pool_branch = []
        self.pool_vals = []
        self.pool_names = []
        self._pool_mat = None

        # sector rows: four per branch, tying the product pairs to the
        # angle intervals the node box implies (see build); the pattern
        # is fixed, the tangent data depends on the box
        sec_r = np.repeat(np.arange(self.m_sector), 4)
        sec_c = np.repeat(self.cone_cols[:, :4], 4, axis=0).ravel()
        self._sector_pattern = (sec_r, sec_c)
        self.q_rows = np.concatenate(q_rows)
        self.q_i = np.concatenate(q_i)
        self.q_j = np.concatenate(q_j)
        self.q_c = np.concatenate(q_c)

        # secant rows u <= (lo+hi) e - lo*hi: fixed pattern, box data
        sec_rows = np.repeat(np.arange(2 * nb), 2)
        sec_cols = np.empty(4 * nb, dtype=np.intp)
        sec_cols[0::2] = np.concatenate([U, W])
        sec_cols[1::2] = np.concatenate([E, F])
        self._sec_pattern = (sec_rows, sec_cols)

        # McCormick rows, 4 per product, products ordered a, b, c, d
        self.prod_x = np.concatenate([E[fr], F[fr], F[fr], E[fr]])
        self.prod_y = np.concatenate([E[to], F[to], E[to], F[to]])
        self.prod_w = np.concatenate([A_, B_, C_, D_])
        self._px = self._vspace(self.prod_x)
        self._py = self._vspace(self.prod_y)
        self._lift_sq = np.concatenate([U, W])
        npr = 4 * nl
        mc_rows = np.repeat(np.arange(16 * nl), 3)
        trip = np.empty((16 * nl, 3), dtype=np.intp)
        for c in range(4):
            trip[4 * np.arange(npr) + c, 0] = self.prod_x
            trip[4 * np.arange(npr) + c, 1] = self.prod_y
            trip[4 * np.arange(npr) + c, 2] = self.prod_w
        self._mc_pattern = (mc_rows, trip.ravel())

        # envelope-error bookkeeping: voltage-space ([e; f], size 2nb)
        # factor indices of every lifted product, squares first
        self.pe_vi = np.concatenate([np.arange(2 * nb),
                                     self._vspace(self.prod_x)])
        self.pe_vj = np.concatenate([np.arange(2 * nb),
                                     self._vspace(self.prod_y)])
        self.pe_lift = np.concatenate([np.concatenate([U, W]), self.prod_w])

        self.ineq_names = (
            [f"vmax[{i}]" for i in range(nb)]
            + [f"vmin[{i}]" for i in range(nb)]
            + [f"sq-e[{i}]" for i in range(nb)]
            + [f"sq-f[{i}]" for i in range(nb)]
            + [f"sec-e[{i}]" for i in range(nb)]
            + [f"sec-f[{i}]" for i in range(nb)]
            + [f"mc[{p}.{c}]" for p in range(npr) for c in range(4)]
            + [f"thermal-f[{k}]" for k in self.rated]
            + [f"thermal-t[{k}]" for k in self.rated]
            + [f"sector[{k}.{s}]" for k in range(nl)
               for s in ("d+", "d-", "s+", "s-")])

        self.obj_lin = np.zeros(n)
        self.obj_lin[PG] = a.c1
        self.obj_qi = PG.copy()
        self.obj_qc = a.c2.copy()
        self.obj_const = float(np.sum(a.c0))

    def _vspace(self, col_idx):
        """Map an e/f column index into the stacked [e; f] voltage space."""
        f0 = self.idx["F"][0]
        e0 = self.idx["E"][0]
        out = np.where(col_idx < f0, col_idx - e0, self.nb + col_idx - f0)
        return out.astype(np.intp)

    def build(self, box, pin_tol=2e-8):
        """The convex node program over the given voltage box.

        Voltage variables whose box width is at most pin_tol are treated
        as fixed: their envelope rows would squeeze the lifted variable
        between opposing inequalities with no interior, so the lift is
        pinned through bounds (squares, fully fixed products) or an
        appended equality row (products with one fixed factor) instead.
        """
        a = self.net.arr
        n, nb, nl = self.n, self.nb, self.nl
        vlo = np.concatenate([box.e_lo, box.f_lo])
        vhi = np.concatenate([box.e_hi, box.f_hi])
        mid = 0.5 * (vlo + vhi)
        width = vhi - vlo
        pinned = width <= pin_tol
        buspin = pinned[:nb] & pinned[nb:]
        # envelope rows on very thin boxes squeeze their slacks to
        # ~width^2 regardless of the barrier, wrecking the KKT system;
        # interval bounds on the lifted variable carry those cases
        thin = width <= 1e-5

        sec_data = np.empty(4 * nb)
        sec_data[0::2] = 1.0
        sec_data[1::2] = -(vlo + vhi)
        b_sec = vlo * vhi
        sq_data = -np.ones(2 * nb)
        b_sq = self.b_sq.copy()
        q_c = self.q_c
        A_vmag = self.A_vmag
        b_vmag = self.b_vmag
        b_th = self.b_th
        if np.any(thin):
            sec_data[0::2][thin] = 0.0
            sec_data[1::2][thin] = 0.0
            b_sec[thin] = -1.0
            sq_data[thin] = 0.0
            b_sq[thin] = -1.0
            q_c = q_c.copy()
            q_c[:2 * nb][thin] = 0.0
        if np.any(buspin):
            # a fully fixed bus makes its magnitude rows constant; check
            # them at the fixed point, then drop them from the program
            bidx = np.where(buspin)[0]
            vsq = mid[bidx] ** 2 + mid[nb + bidx] ** 2
            if np.any(vsq > a.vmax[bidx] ** 2 + 1e-9) \
                    or np.any(vsq < a.vmin[bidx] ** 2 - 1e-9):
                raise InfeasibleNode(
                    "fixed voltage violates a magnitude bound")
            dat = A_vmag.data.copy().reshape(2 * nb, 2)
            dat[np.concatenate([bidx, nb + bidx])] = 0.0
            A_vmag = sp.csr_matrix(
                (dat.ravel(), A_vmag.indices, A_vmag.indptr),
                shape=A_vmag.shape)
            b_vmag = b_vmag.copy()
            b_vmag[bidx] = -1.0
            b_vmag[nb + bidx] = -1.0
            # same treatment for thermal rows with both ends fixed
            thpin = buspin[a.f[self.rated]] & buspin[a.t[self.rated]]
            if np.any(thpin):
                tidx = np.where(thpin)[0]
                st = RectState(e=mid[:nb], f=mid[nb:])
                pf, qf, pt, qt = flow_equations(st, self.net)
                br = self.rated[tidx]
                cap = a.smax[br] ** 2 + 1e-9
                if np.any(pf[br] ** 2 + qf[br] ** 2 > cap) \
                        or np.any(pt[br] ** 2 + qt[br] ** 2 > cap):
                    raise InfeasibleNode(
                        "fixed voltages violate a thermal limit")
                q_c = q_c.copy()
                off = 2 * nb
                blk = q_c[off:off + 84 * self.rated.size]
                blk.reshape(self.rated.size, 84)[tidx] = 0.0
                b_th = b_th.copy()
                b_th[tidx] = -1.0
                b_th[self.rated.size + tidx] = -1.0
        A_sec = sp.csr_matrix((sec_data, self._sec_pattern),
                              shape=(self.m_sec, n))
        A_sq = sp.csr_matrix((sq_data, (np.arange(2 * nb), self._lift_sq)),
                             shape=(self.m_sq, n))

        xlo, xhi = vlo[self._px], vhi[self._px]
        ylo, yhi = vlo[self._py], vhi[self._py]
        npr = 4 * nl
        mc_data = np.empty((npr, 4, 3))
        mc_b = np.empty((npr, 4))
        mc_data[:, 0, 0], mc_data[:, 0, 1], mc_data[:, 0, 2] = ylo, xlo, -1.0
        mc_b[:, 0] = -xlo * ylo
        mc_data[:, 1, 0], mc_data[:, 1, 1], mc_data[:, 1, 2] = yhi, xhi, -1.0
        mc_b[:, 1] = -xhi * yhi
        mc_data[:, 2, 0], mc_data[:, 2, 1], mc_data[:, 2, 2] = -yhi, -xlo, 1.0
        mc_b[:, 2] = xlo * yhi
        mc_data[:, 3, 0], mc_data[:, 3, 1], mc_data[:, 3, 2] = -ylo, -xhi, 1.0
        mc_b[:, 3] = xhi * ylo
        xpin = pinned[self._px]
        ypin = pinned[self._py]
        anyp = (xpin | ypin) \
            | (width[self._px] * width[self._py] <= 1e-10)
        if np.any(anyp):
            mc_data[anyp, :, :] = 0.0
            mc_b[anyp, :] = -1.0
        A_mc = sp.csr_matrix((mc_data.ravel(), self._mc_pattern),
                             shape=(self.m_mc, n))

        # sector rows: at a true point (a+b, c-d) = vF*vT*(cos g, sin g)
        # with g the endpoint angle difference, and (a-b, c+d) the same
        # with the angle sum.  Over an angle interval of width <= pi the
        # pair lies in the cone between the two boundary rays, giving one
        # cross-product cut per ray: sin(g - hi) <= 0 <= sin(g - lo)
        # scaled by the nonnegative radius.  Wider intervals drop their
        # rows (zero data, slack constant).
        th_lo, th_hi = _angle_intervals(box.e_lo, box.e_hi,
                                        box.f_lo, box.f_hi)
        sec4 = np.zeros((nl, 4, 4))
        b_sector = np.full((nl, 4), -1.0)
        for fam, (lo_a, hi_a) in enumerate((
                (th_lo[a.f] - th_hi[a.t], th_hi[a.f] - th_lo[a.t]),
                (th_lo[a.f] + th_lo[a.t], th_hi[a.f] + th_hi[a.t]))):
            ok = hi_a - lo_a <= math.pi
            if not np.any(ok):
                continue
            sb = 1.0 if fam == 0 else -1.0
            dd = -1.0 if fam == 0 else 1.0
            sin_hi, cos_hi = np.sin(hi_a[ok]), np.cos(hi_a[ok])
            sin_lo, cos_lo = np.sin(lo_a[ok]), np.cos(lo_a[ok])
            up = 2 * fam
            sec4[ok, up, 0] = -sin_hi
            sec4[ok, up, 1] = -sb * sin_hi
            sec4[ok, up, 2] = cos_hi
            sec4[ok, up, 3] = dd * cos_hi
            sec4[ok, up + 1, 0] = sin_lo
            sec4[ok, up + 1, 1] = sb * sin_lo
            sec4[ok, up + 1, 2] = -cos_lo
            sec4[ok, up + 1, 3] = -dd * cos_lo
            b_sector[ok, up] = 0.0
            b_sector[ok, up + 1] = 0.0
        A_sector = sp.csr_matrix((sec4.ravel(), self._sector_pattern),
                                 shape=(self.m_sector, n))

        A = sp.vstack([A_vmag, A_sq, A_sec, A_mc,
                       sp.csr_matrix((self.m_th, n)), A_sector],
                      format="csr")
        b = np.concatenate([b_vmag, b_sq, b_sec, mc_b.ravel(), b_th,
                            b_sector.ravel()])
        ineq = ConstraintSet(m=self.mI, n=n, A=A, b=b, qrow=self.q_rows,
                             qi=self.q_i, qj=self.q_j, qc=q_c,
                             names=self.ineq_names)

        eq = self.eq
        one = np.where(xpin ^ ypin)[0]
        if one.size:
            c_fix = np.where(xpin[one], mid[self._px[one]], mid[self._py[one]])
            free_col = np.where(xpin[one], self.prod_y[one], self.prod_x[one])
            r = np.repeat(np.arange(one.size), 2)
            cols = np.empty(2 * one.size, dtype=np.intp)
            cols[0::2] = self.prod_w[one]
            cols[1::2] = free_col
            dat = np.empty(2 * one.size)
            dat[0::2] = 1.0
            dat[1::2] = -c_fix
            extra = sp.csr_matrix((dat, (r, cols)), shape=(one.size, n))
            eq = ConstraintSet(
                m=eq.m + one.size, n=n,
                A=sp.vstack([eq.A, extra], format="csr"),
                b=np.concatenate([eq.b, np.zeros(one.size)]),
                qrow=eq.qrow, qi=eq.qi, qj=eq.qj, qc=eq.qc,
                names=eq.names + [f"pin-prod[{int(p)}]" for p in one])

        lo = np.full(n, -np.inf)
        hi = np.full(n, np.inf)
        lo[self.idx["E"]], hi[self.idx["E"]] = box.e_lo, box.e_hi
        lo[self.idx["F"]], hi[self.idx["F"]] = box.f_lo, box.f_hi
        lo[self.idx["PG"]], hi[self.idx["PG"]] = a.pmin, a.pmax
        lo[self.idx["QG"]], hi[self.idx["QG"]] = a.qmin, a.qmax
        # interval bounds on every lifted variable (redundant next to the
        # envelope rows when boxes are wide, load-bearing when thin)
        lo2, hi2 = _interval_square(vlo, vhi)
        lo[self._lift_sq] = lo2
        hi[self._lift_sq] = hi2
        corners = np.stack([vlo[self._px] * vlo[self._py],
                            vlo[self._px] * vhi[self._py],
                            vhi[self._px] * vlo[self._py],
                            vhi[self._px] * vhi[self._py]])
        lo[self.prod_w] = corners.min(axis=0)
        hi[self.prod_w] = corners.max(axis=0)
        if np.any(pinned):
            sq_cols = self._lift_sq[pinned]
            lo[sq_cols] = hi[sq_cols] = mid[pinned] ** 2
            both = xpin & ypin
            if np.any(both):
                w_cols = self.prod_w[both]
                lo[w_cols] = hi[w_cols] = mid[self._px[both]] * mid[self._py[both]]

        return QcqpProblem(
            layout=self.layout, n=n, lo=lo, hi=hi, box=box,
            obj_qi=self.obj_qi, obj_qj=self.obj_qi, obj_qc=self.obj_qc,
            obj_lin=self.obj_lin, obj_const=self.obj_const,
            eq=eq, ineq=ineq, net=self.net, inst=self.inst, convex=True)

    def _cone_parts(self, x):
        """Per-branch cone blocks at x, one row per family.

        Family 0 couples (a+b, c-d), family 1 couples (a-b, c+d); both
        satisfy v1^2 + v2^2 = (uF+wF)(uT+wT) at exact lifts by the
        Lagrange identity, so each lies on the same rotated cone with
        shared radius r and axis coordinate v3.
        """
        cc = self.cone_cols
        s_fr = x[cc[:, 4]] + x[cc[:, 5]]
        s_to = x[cc[:, 6]] + x[cc[:, 7]]
        v3 = 0.5 * (s_fr - s_to)
        r = 0.5 * (s_fr + s_to)
        v1 = np.stack([x[cc[:, 0]] + x[cc[:, 1]],
                       x[cc[:, 0]] - x[cc[:, 1]]])
        v2 = np.stack([x[cc[:, 2]] - x[cc[:, 3]],
                       x[cc[:, 2]] + x[cc[:, 3]]])
        return v1, v2, v3, r

    def cone_violations(self, x):
        """Per-branch distance of the lifted block outside the cones."""
        v1, v2, v3, r = self._cone_parts(x)
        return np.sqrt(v1 * v1 + v2 * v2 + v3 * v3).max(axis=0) - r

    def add_cone_cuts(self, x, tol=1e-7, per_branch=40):
        """Pool supporting cuts for branches outside a cone at x.

        A cut al*v1 + be*v2 + ga*v3 <= r with a unit (al, be, ga) follows
        from ||(v1, v2, v3)|| <= r by Cauchy-Schwarz, so it never excludes
        a point of the cone.  Near-duplicate directions are skipped; the
        per-branch cap bounds the pool over a long search."""
        v1, v2, v3, r = self._cone_parts(x)
        nrm = np.sqrt(v1 * v1 + v2 * v2 + v3 * v3)
        added = 0
        for fam in (0, 1):
            for k in np.where(nrm[fam] - r > tol)[0]:
                dirs = self.pool_dirs[k][fam]
                if nrm[fam, k] <= 1e-12 or len(dirs) >= per_branch:
                    continue
                d = np.array([v1[fam, k], v2[fam, k], v3[k]]) / nrm[fam, k]
                if any(float(d @ old) > 1.0 - 1e-10 for old in dirs):
                    continue
                dirs.append(d)
                al, be, ga = d
                sa = al if fam == 0 else -al
                sb = -be if fam == 0 else be
                self.pool_branch.append(int(k))
                self.pool_vals.append(np.array(
                    [al, sa, be, sb,
                     0.5 * (ga - 1.0), 0.5 * (ga - 1.0),
                     0.5 * (-ga - 1.0), 0.5 * (-ga - 1.0)]))
                self.pool_names.append(f"cone-cut[{k}.{fam}.{len(dirs)}]")
                added += 1
        if added:
            self._pool_mat = None
        return added

    def with_cone_cuts(self, prob):
        """The node program with every pooled cone cut appended."""
        m = len(self.pool_branch)
        if m == 0:
            return prob
        if self._pool_mat is None:
            rows = np.repeat(np.arange(m), 8)
            cols = self.cone_cols[np.asarray(self.pool_branch)].ravel()
            vals = np.concatenate(self.pool_vals)
            self._pool_mat = sp.csr_matrix((vals, (rows, cols)),
                                           shape=(m, self.n))
        ineq = prob.ineq
        cut = ConstraintSet(
            m=ineq.m + m, n=self.n,
            A=sp.vstack([ineq.A, self._pool_mat], format="csr"),
            b=np.concatenate([ineq.b, np.zeros(m)]),
            qrow=ineq.qrow, qi=ineq.qi, qj=ineq.qj, qc=ineq.qc,
            names=ineq.names + list(self.pool_names))
        return dataclasses.replace(prob, ineq=cut)

    def bound_program(self, box, col, sense, cap):
        """Relaxation with objective sense * x[col] and the generation
        cost capped at a known feasible value.  Minimizing it bounds one
        voltage coordinate over the region that can still beat cap."""
        prob = self.with_cone_cuts(self.build(box))
        ineq = prob.ineq
        n = self.n
        pg = self.idx["PG"]
        cut = sp.csr_matrix(
            (self.obj_lin[pg], (np.zeros(self.ng, dtype=np.intp), pg)),
            shape=(1, n))
        nq = self.obj_qi.size
        capped = ConstraintSet(
            m=ineq.m + 1, n=n,
            A=sp.vstack([ineq.A, cut], format="csr"),
            b=np.concatenate([ineq.b, [self.obj_const - cap]]),
            qrow=np.concatenate([ineq.qrow,
                                 np.full(nq, ineq.m, dtype=np.intp)]),
            qi=np.concatenate([ineq.qi, self.obj_qi]),
            qj=np.concatenate([ineq.qj, self.obj_qi]),
            qc=np.concatenate([ineq.qc, self.obj_qc]),
            names=ineq.names + ["cost-cap"])
        obj_lin = np.zeros(n)
        obj_lin[col] = float(sense)
        none = np.zeros(0, dtype=np.intp)
        return dataclasses.replace(
            prob, ineq=capped, obj_lin=obj_lin, obj_qi=none, obj_qj=none,
            obj_qc=np.zeros(0), obj_const=0.0)

    def start_point(self, box):
        x = np.zeros(self.n)
        e0 = 0.5 * (box.e_lo + box.e_hi)
        f0 = 0.5 * (box.f_lo + box.f_hi)
        a = self.net.arr
        x[self.idx["E"]] = e0
        x[self.idx["F"]] = f0
        x[self.idx["PG"]] = 0.5 * (a.pmin + a.pmax)
        x[self.idx["QG"]] = 0.5 * (a.qmin + a.qmax)
        x[self.idx["U"]] = e0**2
        x[self.idx["W"]] = f0**2
        x[self.idx["A"]] = e0[a.f] * e0[a.t]
        x[self.idx["B"]] = f0[a.f] * f0[a.t]
        x[self.idx["C"]] = f0[a.f] * e0[a.t]
        x[self.idx["D"]] = e0[a.f] * f0[a.t]
        return x

    def product_errors(self, x):
        vx = np.concatenate([x[self.idx["E"]], x[self.idx["F"]]])
        return np.abs(x[self.pe_lift] - vx[self.pe_vi] * vx[self.pe_vj])

    def voltage_point(self, x):
        return x[self.idx["E"]].copy(), x[self.idx["F"]].copy()

    def opf_start(self, x):
        """Initial point for the full problem from a relaxation point."""
        e, f = self.voltage_point(x)
        pf, qf, pt, qt = flow_equations(RectState(e=e, f=f), self.net)
        return np.concatenate([e, f, x[self.idx["PG"]], x[self.idx["QG"]],
                               pf, qf, pt, qt])

    def solution_at(self, x):
        """Evaluate a relaxation point as a candidate operating point."""
        e, f = self.voltage_point(x)
        st = RectState(e=e, f=f)
        pf, qf, pt, qt = flow_equations(st, self.net)
        pg = x[self.idx["PG"]].copy()
        return OpfSolution(state=st, pg=pg, qg=x[self.idx["QG"]].copy(),
                           pf=pf, qf=qf, pt=pt, qt=qt,
                           objective=cost_of(pg, self.net.generators))


def _template_for(problem):
    tpl = getattr(problem, "_sbb_template", None)
    if tpl is None:
        tpl = _RelaxTemplate(problem)
        problem._sbb_template = tpl
    return tpl


def _node_ip_defaults():
    # node bounds feed a 0.01% gap test; 1e-6 stationarity is ample and
    # the acceptable fallback covers degenerate envelope vertices where
    # the dual residual plateaus slightly above it
    return IpOptions(tol_kkt=1e-6, tol_feas=1e-7, tol_acceptable=1e-4)


def _relax_node(problem, node, template, ip_opts, time_left=None,
                cut_rounds=8, cut_tol=1e-6):
    """Internal node solve: (lower bound, point, iterate, ip iterations).

    Alternates relaxation solves with cone cut generation at the current
    optimum until the lifted block enters the cone, the round budget or
    deadline runs out, or no new cut can be added.  Every round solves a
    valid relaxation, so the best bound across rounds is returned.
    """
    deadline = (time.perf_counter() + max(time_left, 1e-3)
                if time_left is not None else None)

    def solve_once(x0, warm):
        opts = ip_opts
        if deadline is not None:
            left = deadline - time.perf_counter()
            opts = IpOptions(**{**opts.__dict__,
                                "time_limit": max(left, 1e-3)})
        relax = template.with_cone_cuts(template.build(node.box))
        return solve_ip(relax, x0, opts, warm_iterate=warm)

    x0 = node.warm.x if node.warm is not None else template.start_point(node.box)
    rep = solve_once(x0, node.warm)
    iters = rep.iterations
    best = (-math.inf, None, None)
    rounds = 0
    while True:
        if rep.status == SolveStatus.Infeasible:
            raise InfeasibleNode(f"node {node.id} relaxation infeasible")
        x = rep.extra["x"]
        if not np.all(np.isfinite(x)):
            break
        if rep.status == SolveStatus.Optimal:
            best = (max(best[0], rep.objective), x, rep.extra["iterate"])
        # cuts stay valid at any point, converged or not, so an iteration
        # limit is no reason to stop strengthening
        viol = float(np.max(template.cone_violations(x), initial=0.0))
        if viol <= cut_tol or rounds >= cut_rounds:
            break
        if template.add_cone_cuts(x, tol=cut_tol) == 0:
            break
        if deadline is not None and time.perf_counter() > deadline:
            break
        rounds += 1
        rep = solve_once(x, None)
        iters += rep.iterations
    lb, x, iterate = best
    if x is None:
        x = rep.extra["x"]
        if not np.all(np.isfinite(x)):
            x = template.start_point(node.box)
        # unconverged relaxation: keep the node alive on its inherited bound
        return -math.inf, x, None, iters
    return lb, x, iterate, iters


def node_relaxation(problem, node, ip_opts=None):
    """Lower bound for a node from the lifted convex relaxation.

    Returns (lower bound, relaxation point).  The bound is -inf when the
    relaxation solve stopped without converging (sound, never prunes);
    InfeasibleNode certifies the node region empty of feasible points.
    """
    template = _template_for(problem)
    lb, x, _, _ = _relax_node(problem, node, template,
                              ip_opts or _node_ip_defaults())
    return lb, x


def obbt_tighten(problem, box, cap, rounds=3, ip_opts=None, deadline=None):
    """Shrink the voltage box by bound solves on the capped relaxation.

    Minimizing (maximizing) one voltage coordinate over the lifted
    relaxation with generation cost <= cap bounds that coordinate over
    every region that can still contain an optimum, because cap comes
    from a feasible point.  A small outward margin absorbs the
    subsolver tolerance.  Sequential: each tightened bound feeds the
    next solve.  Stops early at the deadline or when a full round
    gains almost nothing.
    """
    template = _template_for(problem)
    opts = ip_opts or _node_ip_defaults()
    out = box.copy()
    nb = template.nb
    margin = 1e-5
    for _ in range(max(0, int(rounds))):
        lo = np.concatenate([out.e_lo, out.f_lo])
        hi = np.concatenate([out.e_hi, out.f_hi])
        order = np.argsort(lo - hi)
        gained = 0.0
        for var in order:
            e_side = var < nb
            i = var if e_side else var - nb
            lo_arr = out.e_lo if e_side else out.f_lo
            hi_arr = out.e_hi if e_side else out.f_hi
            if hi_arr[i] - lo_arr[i] <= 20 * margin:
                continue
            col = template.idx["E" if e_side else "F"][i]
            for sense in (1.0, -1.0):
                if deadline is not None and time.perf_counter() > deadline:
                    return out
                prog = template.bound_program(out, col, sense, cap)
                rep = solve_ip(prog, template.start_point(out), opts)
                if rep.status != SolveStatus.Optimal:
                    continue
                if sense > 0:
                    new = min(rep.objective - margin, hi_arr[i])
                    if new > lo_arr[i]:
                        gained += new - lo_arr[i]
                        lo_arr[i] = new
                else:
                    new = max(-rep.objective + margin, lo_arr[i])
                    if new < hi_arr[i]:
                        gained += hi_arr[i] - new
                        hi_arr[i] = new
        total = float(np.sum(out.e_hi - out.e_lo)
                      + np.sum(out.f_hi - out.f_lo))
        if gained <= 1e-4 * max(total, 1e-12):
            break
    return out


def select_branch_variable(point, node, problem, rule="max-violation"):
    """Voltage variable (index into stacked [e; f]) and split value.

    max-violation: largest summed envelope error over the products the
    variable enters, split at the relaxation value clamped 20% into the
    box; ties prefer the wider box, then the lower index.  max-range:
    widest box edge, split at its midpoint.
    """
    template = problem if isinstance(problem, _RelaxTemplate) \
        else _template_for(problem)
    box = node.box
    lo = np.concatenate([box.e_lo, box.f_lo])
    hi = np.concatenate([box.e_hi, box.f_hi])
    width = hi - lo
    if rule == "max-range":
        var = int(np.argmax(width))
        if width[var] <= 1e-12:
            raise NoBranchCandidate("box has collapsed in every direction")
        return var, float(0.5 * (lo[var] + hi[var]))

    err = template.product_errors(point)
    if float(np.max(err, initial=0.0)) < 1e-10:
        raise NoBranchCandidate("all lifted products agree with their factors")
    score = np.zeros(width.size)
    np.add.at(score, template.pe_vi, err)
    off_diag = template.pe_vi != template.pe_vj
    np.add.at(score, template.pe_vj[off_diag], err[off_diag])
    cand = np.where(score == np.max(score))[0]
    if cand.size > 1:
        cand = cand[width[cand] == np.max(width[cand])]
    var = int(cand[0])
    vx = np.concatenate([point[template.idx["E"]], point[template.idx["F"]]])
    margin = 0.2 * width[var]
    split = float(np.clip(vx[var], lo[var] + margin, hi[var] - margin))
    return var, split


def _split_box(box, var, value, nb):
    left, right = box.copy(), box.copy()
    if var < nb:
        left.e_hi[var] = value
        right.e_lo[var] = value
    else:
        left.f_hi[var - nb] = value
        right.f_lo[var - nb] = value
    return left, right


def solve_sbb(problem, root_box, opts=None):
    """Global solve of the rectangular QCQP over the given voltage box.

    Best-bound search (depth-first dive until the first incumbent); each
    node is tightened by fbbt, bounded by the lifted convex relaxation,
    and split on the voltage variable picked by the branch rule.
    Optimal means the relative gap closed below gap_tol_pct.
    """
    opts = opts or SbbOptions()
    t0 = time.perf_counter()
    template = _template_for(problem)
    nb = template.nb
    ip_opts = opts.ip_opts or _node_ip_defaults()

    inc_obj = None
    inc_sol = None
    seq = 0
    heap_dive = []
    heap_bound = []
    closed = set()
    stalled_min = math.inf
    pruned_min = math.inf
    lb_report = -math.inf
    lb_excess_rel = -math.inf
    nodes_done = 0
    total_iters = 0
    next_local_at = 0
    collected = []

    def push(node):
        nonlocal seq
        heapq.heappush(heap_dive, (-node.depth, node.lb, seq, node))
        heapq.heappush(heap_bound, (node.lb, seq, node))
        seq += 1

    def open_min_lb():
        while heap_bound and heap_bound[0][-1].id in closed:
            heapq.heappop(heap_bound)
        m = heap_bound[0][0] if heap_bound else math.inf
        return min(m, stalled_min, pruned_min)

    def prune_cut():
        # discarding nodes already within the gap tolerance certifies the
        # incumbent at that tolerance without grinding the tail of the tree
        if inc_obj is None:
            return math.inf
        slack = max(0.999 * (opts.gap_tol_pct / 100.0), 1e-9) * abs(inc_obj)
        return inc_obj - slack

    def pop():
        h = heap_dive if inc_obj is None else heap_bound
        while h:
            node = heapq.heappop(h)[-1]
            if node.id not in closed:
                closed.add(node.id)
                return node
        return None

    def gap_now():
        if inc_obj is None:
            return math.inf
        return 100.0 * (inc_obj - lb_report) / max(abs(inc_obj), 1e-9)

    def try_incumbent(x0_full):
        nonlocal inc_obj, inc_sol, total_iters
        left = opts.time_limit - (time.perf_counter() - t0)
        lopts = IpOptions(**{**ip_opts.__dict__,
                             "time_limit": max(left, 1e-3)})
        rep = solve_ip(problem, x0_full, lopts)
        total_iters += rep.iterations
        if rep.solution is None:
            return False
        fc = feasibility_check(rep.solution, problem.inst, problem.net)
        if fc.max_violation > 1e-5:
            return False
        if inc_obj is None or rep.solution.objective < inc_obj:
            inc_obj = rep.solution.objective
            inc_sol = rep.solution
            return True
        return False

    def log(node, lb, action):
        if opts.node_log is not None:
            inc_s = f"{inc_obj:.12g}" if inc_obj is not None else "-"
            opts.node_log.write(f"{node.id} {node.depth} {lb:.12g} "
                                f"{inc_s} {gap_now():.6g} {action}\n")

    root = root_box.copy()
    # a local solve seeds the incumbent so the root box can be tightened
    # around the set of candidate optima before the tree opens
    try_incumbent(template.opf_start(template.start_point(root)))
    if inc_obj is not None and opts.obbt_rounds > 0:
        # fill the cone cut pool at the root first so the bound solves
        # below run against the strengthened relaxation
        try:
            _relax_node(problem, SbbNode(id=-1, box=root, lb=-math.inf,
                                         depth=0),
                        template, ip_opts,
                        time_left=0.25 * opts.time_limit,
                        cut_rounds=4 * opts.cone_cut_rounds,
                        cut_tol=opts.cone_cut_tol)
        except InfeasibleNode:
            pass
        cost_cap = inc_obj + 1e-9 * max(1.0, abs(inc_obj))
        root = obbt_tighten(problem, root, cost_cap,
                            rounds=opts.obbt_rounds, ip_opts=ip_opts,
                            deadline=t0 + 0.5 * opts.time_limit)
    push(SbbNode(id=0, box=root, lb=-math.inf, depth=0))
    next_id = 1
    status = SolveStatus.Infeasible
    message = "search tree exhausted without a feasible point"

    while True:
        lb_open = open_min_lb()
        cap = inc_obj if inc_obj is not None else math.inf
        if lb_open < math.inf or inc_obj is not None:
            lb_report = max(lb_report, min(lb_open, cap))
        if inc_obj is not None:
            lb_excess_rel = max(
                lb_excess_rel,
                (lb_report - inc_obj) / max(abs(inc_obj), 1e-9))
        if inc_obj is not None and gap_now() <= opts.gap_tol_pct:
            status = SolveStatus.Optimal
            message = "gap closed"
            break
        if time.perf_counter() - t0 > opts.time_limit:
            if inc_obj is not None:
                status = SolveStatus.Feasible
                message = "time limit reached with incumbent"
            else:
                status = SolveStatus.TimeLimit
                message = "time limit reached without incumbent"
            break
        if nodes_done >= opts.max_nodes:
            if inc_obj is not None:
                status = SolveStatus.Feasible
                message = "node limit reached with incumbent"
            else:
                status = SolveStatus.TimeLimit
                message = "node limit reached without incumbent"
            break

        node = pop()
        if node is None:
            if inc_obj is not None:
                lb_report = max(lb_report, min(open_min_lb(), inc_obj))
                status = (SolveStatus.Optimal
                          if gap_now() <= opts.gap_tol_pct
                          else SolveStatus.Feasible)
                message = "tree exhausted"
            break
        nodes_done += 1

        prune_at = prune_cut()
        if node.lb >= prune_at:
            pruned_min = min(pruned_min, node.lb)
            log(node, node.lb, "prune-bound")
            continue

        try:
            box = fbbt(problem, node.box, opts.fbbt_rounds)
        except EmptyBoxDetected:
            log(node, node.lb, "prune-empty")
            continue
        node = SbbNode(id=node.id, box=box, lb=node.lb, depth=node.depth,
                       warm=node.warm)

        time_left = opts.time_limit - (time.perf_counter() - t0)
        try:
            # the root gets a deeper cut loop: cuts found there serve the
            # entire tree, and most of the gap closes before branching
            lb_relax, xrel, iterate, iters = _relax_node(
                problem, node, template, ip_opts, time_left,
                cut_rounds=(4 * opts.cone_cut_rounds if node.id == 0
                            else opts.cone_cut_rounds),
                cut_tol=opts.cone_cut_tol)
        except InfeasibleNode:
            log(node, node.lb, "prune-infeasible")
            continue
        total_iters += iters
        lb_node = max(node.lb, lb_relax)
        if opts.collect_nodes:
            collected.append((node.box, lb_node))
        if lb_node >= prune_at:
            pruned_min = min(pruned_min, lb_node)
            log(node, lb_node, "prune-bound")
            continue

        err_max = float(np.max(template.product_errors(xrel), initial=0.0))
        if node.id == 0 or (err_max < 1e-3 and nodes_done >= next_local_at):
            if try_incumbent(template.opf_start(xrel)):
                log(node, lb_node, "incumbent")
                prune_at = prune_cut()
            next_local_at = nodes_done + 25

        try:
            var, split = select_branch_variable(xrel, node, template,
                                                opts.branch_rule)
        except NoBranchCandidate:
            # products are exact: the relaxation point solves this region
            if math.isfinite(lb_node):
                sol = template.solution_at(xrel)
                fc = feasibility_check(sol, problem.inst, problem.net)
                if fc.max_violation <= 1e-5:
                    if inc_obj is None or sol.objective < inc_obj:
                        inc_obj, inc_sol = sol.objective, sol
                    pruned_min = min(pruned_min, lb_node)
                    log(node, lb_node, "leaf-exact")
                    continue
            stalled_min = min(stalled_min, lb_node)
            log(node, lb_node, "stalled")
            continue

        lbox, rbox = _split_box(node.box, var, split, nb)
        for child_box in (lbox, rbox):
            push(SbbNode(id=next_id, box=child_box, lb=lb_node,
                         depth=node.depth + 1, warm=iterate))
            next_id += 1
        log(node, lb_node, f"branch v{var}@{split:.6g}")

    gap = gap_now()
    report = SolveReport(
        status=status,
        objective=inc_obj if inc_obj is not None else math.nan,
        lower_bound=lb_report,
        gap_pct=gap,
        solution=inc_sol,
        wall_time=time.perf_counter() - t0,
        iterations=total_iters,
        nodes=nodes_done,
        max_violation=(feasibility_check(inc_sol, problem.inst, problem.net)
                       .max_violation if inc_sol is not None else math.nan),
        message=message,
        extra={"lb_excess_rel_max": lb_excess_rel},
    )
    if opts.collect_nodes:
        report.extra["node_boxes"] = collected
    return report
