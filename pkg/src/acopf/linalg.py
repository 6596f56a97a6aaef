"""Dense symmetric-indefinite KKT factorizations with inertia reporting.

Two paths share one interface:

* LDL^T via scipy (Bunch-Kaufman), inertia read off the block-diagonal
  factor.  Works for any symmetric KKT matrix; used for nonconvex solves
  where the inertia decides Hessian regularization.
* Cholesky + Schur complement for convex subproblems: factor M once,
  solve the dense Schur system in the equality multipliers.  Success
  certifies the correct inertia (n positive, mE negative) for free.
"""

from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla


@dataclass
class LdlFactor:
    lp: np.ndarray
    d: np.ndarray
    perm: np.ndarray
    n_pos: int
    n_neg: int
    n_zero: int

    def solve(self, rhs):
        z = rhs[self.perm]
        z = sla.solve_triangular(self.lp, z, lower=True, unit_diagonal=True)
        z = _solve_block_diag(self.d, z)
        z = sla.solve_triangular(self.lp.T, z, lower=False, unit_diagonal=True)
        out = np.empty_like(z)
        out[self.perm] = z
        return out


def _solve_block_diag(d, rhs):
    # d is block diagonal with 1x1 and 2x2 blocks: a tridiagonal solve
    n = d.shape[0]
    ab = np.zeros((3, n))
    ab[0, 1:] = np.diag(d, 1)
    ab[1] = np.diag(d)
    ab[2, :-1] = np.diag(d, -1)
    return sla.solve_banded((1, 1), ab, rhs)


def ldl_factor(K, zero_tol=1e-12):
    """Factor symmetric K, returning the factor plus its inertia."""
    l, d, perm = sla.ldl(K, lower=True)
    n = K.shape[0]
    sub = np.diag(d, -1)
    n_pos = n_neg = n_zero = 0
    i = 0
    while i < n:
        if i + 1 < n and sub[i] != 0.0:
            a, b, c = d[i, i], d[i + 1, i], d[i + 1, i + 1]
            det = a * c - b * b
            if det < 0.0:
                n_pos += 1
                n_neg += 1
            elif det > 0.0:
                if a + c > 0.0:
                    n_pos += 2
                else:
                    n_neg += 2
            else:
                n_zero += 2
            i += 2
        else:
            v = d[i, i]
            scale = max(abs(K[perm[i], perm[i]]), 1.0)
            if v > zero_tol * scale:
                n_pos += 1
            elif v < -zero_tol * scale:
                n_neg += 1
            else:
                n_zero += 1
            i += 1
    return LdlFactor(lp=l[perm], d=d, perm=perm,
                     n_pos=n_pos, n_neg=n_neg, n_zero=n_zero)


@dataclass
class SchurFactor:
    M_chol: tuple
    JE: np.ndarray
    S_chol: tuple
    n: int
    mE: int

    @property
    def n_pos(self):
        return self.n

    @property
    def n_neg(self):
        return self.mE

    @property
    def n_zero(self):
        return 0

    def solve(self, rhs):
        # [[M, JE'], [JE, -dc I]] [dx, dy] = [r1, r2]
        r1, r2 = rhs[:self.n], rhs[self.n:]
        u = sla.cho_solve(self.M_chol, r1)
        dy = sla.cho_solve(self.S_chol, self.JE.dot(u) - r2)
        dx = sla.cho_solve(self.M_chol, r1 - self.JE.T.dot(dy))
        return np.concatenate([dx, dy])


def schur_factor(M, JE, dc):
    """Cholesky-Schur factorization; raises LinAlgError when M is not PD."""
    n, mE = M.shape[0], JE.shape[0]
    Mc = sla.cho_factor(M, lower=True, check_finite=False)
    MiJt = sla.cho_solve(Mc, JE.T)
    S = JE.dot(MiJt) + dc * np.eye(mE)
    Sc = sla.cho_factor(S, lower=True, check_finite=False)
    return SchurFactor(M_chol=Mc, JE=JE, S_chol=Sc, n=n, mE=mE)


def kkt_factor(M, JE, dc, convex=False):
    """Factor [[M, JE'], [JE, -dc I]]; Schur path first when convex."""
    n, mE = M.shape[0], JE.shape[0]
    if convex:
        try:
            return schur_factor(M, JE, dc)
        except sla.LinAlgError:
            pass
    K = np.zeros((n + mE, n + mE))
    K[:n, :n] = M
    K[:n, n:] = JE.T
    K[n:, :n] = JE
    if dc:
        K[n:, n:] = -dc * np.eye(mE)
    return ldl_factor(K)
