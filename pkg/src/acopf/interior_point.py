"""Primal-dual interior-point solver with flat and historical starts.

The solver works on any adapter exposing the QcqpNlp evaluation
interface.  Variable bounds are folded into the inequality system as
linear rows against bounds shrunk inward by bound_relax, which keeps
every accepted iterate at least bound_relax inside the true box;
zero-width bounds become equality rows.  The barrier parameter follows
a monotone reduction rule, steps are safeguarded by a
fraction-to-the-boundary rule and an l1 exact-penalty line search, and
Hessian regularization is escalated until the KKT factorization shows
the correct inertia.
"""

import math
import time
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sps

from .formulation import SolveReport, SolveStatus
from .history import nearest_instance
from .linalg import kkt_factor
from .qcqp import QcqpNlp, QcqpProblem


@dataclass
class IpOptions:
    tol_kkt: float = 1e-8
    tol_feas: float = 1e-8
    mu_init: float = 0.1
    mu_shrink: float = 0.2
    max_iter: int = 300
    time_limit: float = math.inf
    bound_relax: float = 1e-8
    # fallback exit: this KKT error held for acceptable_iter straight
    # iterations (with feasibility already at tolerance); 0 disables
    tol_acceptable: float = 0.0
    acceptable_iter: int = 10


@dataclass
class IpIterate:
    """Solver state at exit: primal point, multipliers, barrier weight.

    Multipliers are for the original (unscaled) objective.  Slacks stay
    strictly positive, as do inequality multipliers while mu > 0.
    """

    x: np.ndarray
    y: np.ndarray
    z: np.ndarray
    s: np.ndarray
    mu: float
    stationarity: float = math.nan
    feasibility: float = math.nan
    complementarity: float = math.nan


def _as_nlp(problem):
    return QcqpNlp(problem) if isinstance(problem, QcqpProblem) else problem


class _FoldedNlp:
    """NLP with bounds folded in: equalities for pinned variables, linear
    inequality rows (against bounds drawn in by relax) for the rest."""

    def __init__(self, nlp, relax):
        self.nlp = nlp
        self.n = nlp.n
        lo, hi = nlp.lo, nlp.hi
        width = hi - lo
        pinned = np.isfinite(lo) & np.isfinite(hi) & (width <= 2 * relax)
        self.zw = np.where(pinned)[0]
        self.zw_val = 0.5 * (lo[self.zw] + hi[self.zw])
        room = ~pinned
        self.flo = np.where(np.isfinite(lo) & room)[0]
        self.fhi = np.where(np.isfinite(hi) & room)[0]
        self.lo_s = lo[self.flo] + relax
        self.hi_s = hi[self.fhi] - relax
        self.mEg, self.mIg = nlp.mE, nlp.mI
        self.mE = nlp.mE + self.zw.size
        self.mI = nlp.mI + self.flo.size + self.fhi.size
        self._JE = np.zeros((self.mE, self.n))
        self._JE[self.mEg + np.arange(self.zw.size), self.zw] = 1.0
        self._nlo = self.flo.size

    def interiorize(self, x):
        x = np.array(x, dtype=float)
        x[self.zw] = self.zw_val
        if self.flo.size:
            x[self.flo] = np.maximum(x[self.flo], self.lo_s)
        if self.fhi.size:
            x[self.fhi] = np.minimum(x[self.fhi], self.hi_s)
        # re-assert lower bounds where the box is narrower than 2*relax
        both = np.intersect1d(self.flo, self.fhi, assume_unique=True)
        if both.size:
            lo_b = self.nlp.lo[both]
            hi_b = self.nlp.hi[both]
            bad = x[both] < lo_b
            x[both] = np.where(bad, 0.5 * (lo_b + hi_b), x[both])
        return x

    def cE(self, x):
        out = np.empty(self.mE)
        out[:self.mEg] = self.nlp.eq(x)
        out[self.mEg:] = x[self.zw] - self.zw_val
        return out

    def h(self, x):
        return np.concatenate([
            self.nlp.ineq(x),
            self.lo_s - x[self.flo],
            x[self.fhi] - self.hi_s,
        ])

    def JE(self, x):
        self._JE[:self.mEg] = self.nlp.jac_eq(x)
        return self._JE

    def jac_g(self, x):
        if getattr(self.nlp, "use_sparse_ineq", False):
            return self.nlp.jac_ineq_sparse(x)
        return self.nlp.jac_ineq(x)

    def Jh_dot(self, Jg, dx):
        return np.concatenate([Jg.dot(dx), -dx[self.flo], dx[self.fhi]])

    def JhT_dot(self, Jg, v):
        out = Jg.T.dot(v[:self.mIg]) if self.mIg else np.zeros(self.n)
        out[self.flo] -= v[self.mIg:self.mIg + self._nlo]
        out[self.fhi] += v[self.mIg + self._nlo:]
        return out

    def JhT_sig_Jh(self, Jg, sig):
        if not self.mIg:
            M = np.zeros((self.n, self.n))
        elif sps.issparse(Jg):
            M = (Jg.T.multiply(sig[:self.mIg][None, :]).dot(Jg)).toarray()
        else:
            M = Jg.T.dot(sig[:self.mIg, None] * Jg)
        M[self.flo, self.flo] += sig[self.mIg:self.mIg + self._nlo]
        M[self.fhi, self.fhi] += sig[self.mIg + self._nlo:]
        return M


def flat_start(net, formulation="rect"):
    """Unit voltage profile, generator midpoints, zero flows."""
    a = net.arr
    nb, nl, ng = a.nb, a.nl, a.ng
    x = np.zeros(2 * nb + 2 * ng + 4 * nl)
    if formulation == "rect":
        x[:nb] = 1.0
    elif formulation == "polar":
        x[:nb] = 1.0
    else:
        raise ValueError(f"unknown formulation {formulation!r}")
    x[2 * nb:2 * nb + ng] = 0.5 * (a.pmin + a.pmax)
    x[2 * nb + ng:2 * nb + 2 * ng] = 0.5 * (a.qmin + a.qmax)
    return x


def historical_start(dataset, inst, net, formulation="rect"):
    """Initial point from the stored solution with the closest demand.

    Voltages and generator outputs come straight from the dataset entry;
    flow variables are completed from the entry's voltages so the point
    starts consistent with the flow-definition rows.
    """
    from .formulation import RectState, flow_equations, rect_to_polar

    en = dataset.entries[nearest_instance(dataset, inst)]
    state = RectState(e=en.e.copy(), f=en.f.copy())
    pf, qf, pt, qt = flow_equations(state, net)
    if formulation == "rect":
        head = [en.e, en.f]
    elif formulation == "polar":
        pol = rect_to_polar(state)
        head = [pol.v, pol.theta]
    else:
        raise ValueError(f"unknown formulation {formulation!r}")
    return np.concatenate(head + [en.pg, en.qg, pf, qf, pt, qt])


def _norm_inf(v):
    return float(np.max(np.abs(v))) if v.size else 0.0


def _norm_1(v):
    return float(np.sum(np.abs(v))) if v.size else 0.0


def _refined_solve(fac, M, JE, dc, rhs, n):
    """Solve the condensed KKT system with iterative refinement.

    Returns (residual inf-norm, best step).  Refinement matters once the
    barrier pushes slack/multiplier ratios toward 1e13, where a single
    backsolve can leave errors far above the convergence tolerance.
    """
    step = fac.solve(rhs)
    best = (math.inf, step)
    for _ in range(5):
        rx = rhs[:n] - (M.dot(step[:n]) + JE.T.dot(step[n:]))
        ry = rhs[n:] - (JE.dot(step[:n]) - dc * step[n:])
        rn = max(_norm_inf(rx), _norm_inf(ry))
        if not math.isfinite(rn):
            break
        if rn < best[0]:
            best = (rn, step)
        if rn <= 1e-10 * max(1.0, _norm_inf(rhs)):
            break
        step = step + fac.solve(np.concatenate([rx, ry]))
    return best


def _barrier_error(nlp, fold, w, x, y, z, s, mu):
    """Scaled optimality error of the barrier subproblem at a trial point."""
    g = nlp.gradient(x)
    cE = fold.cE(x)
    hh = fold.h(x)
    JE = fold.JE(x)
    Jg = fold.jac_g(x)
    r_d = w * g + JE.T.dot(y) + fold.JhT_dot(Jg, z)
    denom = max(1, fold.mE + fold.mI)
    sd = max(100.0, (_norm_1(y) + _norm_1(z)) / denom) / 100.0
    sc = max(100.0, _norm_1(z) / max(1, fold.mI)) / 100.0
    return max(_norm_inf(r_d) / sd, _norm_inf(cE), _norm_inf(hh + s),
               _norm_inf(s * z - mu) / sc)


def solve_ip(problem, init, opts=None, warm_iterate=None):
    """Minimize the problem from the given initial point.

    Status Optimal requires both the (unscaled) KKT error and the raw
    constraint violation to pass their tolerances.  The returned report
    carries the final iterate under extra["iterate"] for warm starts.
    """
    opts = opts or IpOptions()
    nlp = _as_nlp(problem)
    t0 = time.perf_counter()
    fold = _FoldedNlp(nlp, opts.bound_relax)
    n, mE, mI = fold.n, fold.mE, fold.mI

    x = fold.interiorize(np.asarray(init, dtype=float))
    gnorm = _norm_inf(nlp.gradient(x))
    w = 1.0 if gnorm <= 100.0 else 100.0 / gnorm
    mu_floor = w * opts.tol_kkt / 10

    mu = opts.mu_init
    hh = fold.h(x)
    if warm_iterate is not None and (warm_iterate.z.shape[0] != mI
                                     or warm_iterate.y.shape[0] != mE):
        # folded dimensions changed (different pinned variables); cold start
        warm_iterate = None
    if warm_iterate is not None:
        s = np.maximum(-hh, 1e-8)
        z = np.maximum(w * warm_iterate.z, 1e-10)
        y = w * warm_iterate.y.copy()
        mu = float(np.clip(np.mean(s * z) if mI else mu, 10 * opts.tol_kkt, opts.mu_init))
    else:
        s = np.maximum(-hh, 1e-2)
        z = np.clip(mu / s, 1e-6, 1e6)
        y = np.zeros(mE)

    nu = 1.0
    dw_last = 0.0
    best_viol = math.inf
    stall = 0
    tiny_steps = 0
    status = SolveStatus.IterationLimit
    message = "iteration limit reached"
    viol = math.inf
    acceptable_run = 0
    it = 0

    for it in range(opts.max_iter):
        f = nlp.objective(x)
        g = nlp.gradient(x)
        cE = fold.cE(x)
        hh = fold.h(x)
        JE = fold.JE(x)
        Jg = fold.jac_g(x)
        r_I = hh + s
        r_d = w * g + JE.T.dot(y) + fold.JhT_dot(Jg, z)
        viol = max(_norm_inf(cE), float(np.max(hh, initial=0.0)))

        # convergence on the unscaled system (multipliers divided by w)
        denom = max(1, mE + mI)
        sd_u = max(100.0, (_norm_1(y) + _norm_1(z)) / (w * denom)) / 100.0
        sc_u = max(100.0, _norm_1(z) / (w * max(1, mI))) / 100.0
        E0 = max(_norm_inf(r_d) / (w * sd_u), _norm_inf(cE), _norm_inf(r_I),
                 _norm_inf(s * z) / (w * sc_u))
        if E0 <= opts.tol_kkt and viol <= opts.tol_feas:
            status = SolveStatus.Optimal
            message = "converged"
            break
        if (opts.tol_acceptable > 0 and E0 <= opts.tol_acceptable
                and viol <= opts.tol_feas):
            acceptable_run += 1
            if acceptable_run >= opts.acceptable_iter:
                status = SolveStatus.Optimal
                message = "converged to acceptable tolerance"
                break
        else:
            acceptable_run = 0
        if time.perf_counter() - t0 > opts.time_limit:
            status = SolveStatus.TimeLimit
            message = "time limit reached"
            break

        # infeasibility heuristic: penalty exploded, violation stopped improving
        if viol < 0.9 * best_viol:
            best_viol = viol
            stall = 0
        else:
            stall += 1
        if (viol > 10 * opts.tol_feas and stall >= 25
                and (nu >= 1e8 or _norm_1(y) / max(1, mE) >= 1e8 or tiny_steps >= 8)):
            status = SolveStatus.Infeasible
            message = "constraint violation stopped improving under exploding penalty"
            break

        # monotone barrier reduction
        sd = max(100.0, (_norm_1(y) + _norm_1(z)) / denom) / 100.0
        sc = max(100.0, _norm_1(z) / max(1, mI)) / 100.0
        E_parts = (_norm_inf(r_d) / sd, _norm_inf(cE), _norm_inf(r_I))
        while mu > mu_floor:
            E_mu = max(*E_parts, _norm_inf(s * z - mu) / sc)
            if E_mu > 10 * mu:
                break
            mu = max(mu_floor, opts.mu_shrink * mu)

        # slacks can underflow on degenerate subproblems; cap the barrier
        # weights so the KKT assembly stays finite and fails soft
        sig = np.minimum(z / s, 1e40)
        H = nlp.hess(x, w, y[:fold.mEg], z[:fold.mIg])
        M0 = H + fold.JhT_sig_Jh(Jg, sig)

        rhs_x = -(r_d + fold.JhT_dot(Jg, sig * r_I - z + mu / s))
        rhs_y = -cE
        rhs = np.concatenate([rhs_x, rhs_y])
        rhs_scale = max(1.0, _norm_inf(rhs))
        if not (np.all(np.isfinite(M0)) and np.all(np.isfinite(rhs))):
            return _final_report(nlp, fold, x, y, z, s, mu, w,
                                 SolveStatus.NumericalFailure,
                                 "KKT assembly not finite", it, t0, viol)

        dw = 0.0
        fac = None
        step = None
        if nlp.convex:
            # convexity already guarantees descent, so gate on the actual
            # solve residual instead of the (roundoff-prone) inertia count
            dc = 1e-8
            while True:
                M = M0 if dw == 0.0 else M0 + dw * np.eye(n)
                fac = kkt_factor(M, JE, dc, convex=True)
                rn, step = _refined_solve(fac, M, JE, dc, rhs, n)
                if rn <= 1e-8 * rhs_scale:
                    break
                dw = max(1e-8, 0.1 * dw_last) if dw == 0.0 else 10.0 * dw
                if dw > 1e14:
                    return _final_report(
                        nlp, fold, x, y, z, s, mu, w,
                        SolveStatus.NumericalFailure,
                        "KKT system not solvable to working accuracy",
                        it, t0, viol)
        else:
            dc = 0.0
            while True:
                M = M0 if dw == 0.0 else M0 + dw * np.eye(n)
                fac = kkt_factor(M, JE, dc)
                if fac.n_pos == n and fac.n_neg == mE and fac.n_zero == 0:
                    break
                if fac.n_zero > 0 and dc == 0.0:
                    dc = 1e-8
                if dw == 0.0:
                    dw = max(1e-8, 0.1 * dw_last)
                else:
                    dw *= 10.0
                if dw > 1e14:
                    return _final_report(
                        nlp, fold, x, y, z, s, mu, w,
                        SolveStatus.NumericalFailure,
                        "KKT inertia not correctable", it, t0, viol)
            _, step = _refined_solve(fac, M, JE, dc, rhs, n)
        if dw > 0.0:
            dw_last = dw

        dx, dy = step[:n], step[n:]
        ds = -r_I - fold.Jh_dot(Jg, dx)
        dz = mu / s - z - sig * ds

        tau = 0.995
        a_p = 1.0
        neg = ds < 0
        if np.any(neg):
            a_p = min(1.0, float(np.min(tau * s[neg] / (-ds[neg]))))
        a_d = 1.0
        neg = dz < 0
        if np.any(neg):
            a_d = min(1.0, float(np.min(tau * z[neg] / (-dz[neg]))))
        nu = max(nu, 2.0 * max(_norm_inf(y + dy), _norm_inf(z + dz)))
        phi0 = w * f - mu * float(np.sum(np.log(s))) + nu * (_norm_1(cE) + _norm_1(r_I))
        Dphi = (w * g.dot(dx) - mu * float(np.sum(ds / s))
                - nu * (_norm_1(cE) + _norm_1(r_I)))

        alpha = a_p
        accepted = False
        for _ in range(40):
            xt = x + alpha * dx
            st = s + alpha * ds
            phit = (w * nlp.objective(xt) - mu * float(np.sum(np.log(st)))
                    + nu * (_norm_1(fold.cE(xt)) + _norm_1(fold.h(xt) + st)))
            if phit <= phi0 + 1e-4 * alpha * min(Dphi, 0.0) + 1e-14 * abs(phi0):
                accepted = True
                break
            alpha *= 0.5
            if alpha < 1e-12:
                break
        y_alpha = alpha
        if not accepted:
            # the merit function cannot see dual progress; accept the
            # fraction-to-boundary step anyway if it reduces the scaled
            # optimality error of the barrier subproblem
            xt2 = x + a_p * dx
            st2 = np.maximum(s + a_p * ds, 1e-300)
            yt2 = y + a_p * dy
            zt2 = np.maximum(z + a_d * dz, 1e-300)
            E_cur = max(_norm_inf(r_d) / sd, _norm_inf(cE), _norm_inf(r_I),
                        _norm_inf(s * z - mu) / sc)
            if _barrier_error(nlp, fold, w, xt2, yt2, zt2, st2, mu) \
                    <= 0.99 * E_cur:
                accepted = True
                alpha = a_p
                y_alpha = a_p
                xt = xt2
                st = st2
        if not accepted:
            tiny_steps += 1
            alpha = max(alpha, 1e-12)
            xt = x + alpha * dx
            st = s + alpha * ds
            # rejected primal step: still repair the equality duals,
            # which the merit function has no say over
            y_alpha = 1.0
        else:
            tiny_steps = 0

        x = xt
        s = np.maximum(st, 1e-300)
        y = y + y_alpha * dy
        z = np.maximum(z + a_d * dz, 1e-300)
        with np.errstate(over="ignore"):
            z = np.clip(z, np.minimum(mu / (1e10 * s), 1e20),
                        (1e10 * mu) / s)

    else:
        it = opts.max_iter

    return _final_report(nlp, fold, x, y, z, s, mu, w, status, message, it, t0, viol)


def _final_report(nlp, fold, x, y, z, s, mu, w, status, message, iters, t0, viol):
    y_u = y / w
    z_u = z / w
    stat, feas, comp = _kkt_norms(nlp, fold, x, y_u, z_u, s)
    iterate = IpIterate(x=x, y=y_u, z=z_u, s=s, mu=mu,
                        stationarity=stat, feasibility=feas, complementarity=comp)
    solution = None
    try:
        solution = nlp.extract_solution(x)
    except (AttributeError, KeyError):
        pass
    return SolveReport(
        status=status,
        objective=nlp.objective(x),
        solution=solution,
        wall_time=time.perf_counter() - t0,
        iterations=iters,
        max_violation=feas,
        message=message,
        extra={"iterate": iterate, "x": x, "kkt_error": max(stat, feas, comp),
               "objective_scale": w},
    )


def _kkt_norms(nlp, fold, x, y, z, s):
    g = nlp.gradient(x)
    cE = fold.cE(x)
    hh = fold.h(x)
    JE = fold.JE(x)
    Jg = fold.jac_g(x)
    stat = _norm_inf(g + JE.T.dot(y) + fold.JhT_dot(Jg, z))
    feas = max(_norm_inf(cE), float(np.max(hh, initial=0.0)))
    comp = _norm_inf(s * z)
    return stat, feas, comp


def kkt_residual(problem, iterate, bound_relax=1e-8):
    """Infinity norms of the stationarity, feasibility, and complementarity
    blocks at mu = 0 for the given iterate."""
    nlp = _as_nlp(problem)
    fold = _FoldedNlp(nlp, bound_relax)
    return _kkt_norms(nlp, fold, iterate.x, iterate.y, iterate.z, iterate.s)
