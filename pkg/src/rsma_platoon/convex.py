"""Primal-dual interior method for the structured convex subproblems.

A :class:`ConvexProgram` holds real variable blocks and three constraint
classes, all stored as sparse rows:

* linear            a . x <= rhs
* convex quadratic  sum_r (F_r . x + f_r)^2 <= g . x + g0
* power cone        2^(x_a + c) <= x_b

The objective is ``c . x + sum_i w_i (L_i . x + l_i)^2 + const`` with w_i >= 0.
Complex quantities are handled by callers as interleaved real/imaginary
blocks.  ``solve`` runs a Mehrotra-style primal-dual method on the log-barrier
KKT system, preceded by a single-slack phase 1 when the starting point
violates the constraints.  Power cones enter through the slack
log2(x_b) - x_a - c, which describes the same set as x_b - 2^(x_a + c) but
stays well scaled when x_b spans many orders of magnitude.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.optimize import nnls

from .errors import InvalidConfigError

LN2 = math.log(2.0)
DENSE_LIMIT = 500


def _as_rows(idx, coef):
    idx = np.asarray(idx, dtype=np.int64)
    coef = np.asarray(coef, dtype=float)
    if idx.ndim == 1:
        idx = idx[None, :]
    if coef.ndim == 0:
        coef = np.full(idx.shape, float(coef))
    elif coef.ndim == 1 and idx.shape[0] == 1:
        coef = coef[None, :]
    coef = np.broadcast_to(coef, idx.shape)
    return idx, coef


class ConvexProgram:
    def __init__(self):
        self.n = 0
        self.blocks: dict[str, tuple[np.ndarray, tuple]] = {}
        self._lb: list[np.ndarray] = []
        self._ub: list[np.ndarray] = []
        self._c: dict[int, float] = {}
        self.const = 0.0
        # objective squares
        self._sq_r, self._sq_c, self._sq_v, self._sq_l, self._sq_w = [], [], [], [], []
        self._nsq = 0
        # linear
        self._li_r, self._li_c, self._li_v, self._li_rhs = [], [], [], []
        self._nli = 0
        self.lin_labels: list[tuple[str, int, int]] = []
        # quadratic
        self._qF_r, self._qF_c, self._qF_v, self._qf, self._qid = [], [], [], [], []
        self._nqrows = 0
        self._qG_r, self._qG_c, self._qG_v, self._qg0 = [], [], [], []
        self._nq = 0
        self.quad_labels: list[tuple[str, int, int]] = []
        # power cones
        self._pa, self._pb, self._pofs = [], [], []
        self.pow_labels: list[tuple[str, int, int]] = []
        self._compiled = None

    # -- building ---------------------------------------------------------
    def add_variable(self, name: str, shape=(), lb=-np.inf, ub=np.inf) -> np.ndarray:
        if name in self.blocks:
            raise InvalidConfigError(f"variable block {name!r} already declared")
        shape = tuple(np.atleast_1d(shape).tolist()) if np.ndim(shape) else ((int(shape),) if shape != () else ())
        size = int(np.prod(shape)) if shape else 1
        idx = np.arange(self.n, self.n + size).reshape(shape) if shape else np.array(self.n)
        self.n += size
        self._lb.append(np.broadcast_to(np.asarray(lb, dtype=float), (size,)).copy() if np.ndim(lb) == 0
                        else np.asarray(lb, dtype=float).reshape(size))
        self._ub.append(np.broadcast_to(np.asarray(ub, dtype=float), (size,)).copy() if np.ndim(ub) == 0
                        else np.asarray(ub, dtype=float).reshape(size))
        self.blocks[name] = (idx, shape)
        self._compiled = None
        return idx

    def add_linear_objective(self, idx, coef):
        idx = np.asarray(idx, dtype=np.int64).reshape(-1)
        coef = np.broadcast_to(np.asarray(coef, dtype=float), idx.shape).reshape(-1)
        for i, v in zip(idx.tolist(), coef.tolist()):
            self._c[i] = self._c.get(i, 0.0) + v
        self._compiled = None

    def add_objective_constant(self, value: float):
        self.const += float(value)

    def add_square_objective(self, idx, coef, const=0.0, weight=1.0):
        """Add weight_i * (coef_i . x[idx_i] + const_i)^2 for each row i."""
        idx, coef = _as_rows(idx, coef)
        m = idx.shape[0]
        w = np.broadcast_to(np.asarray(weight, dtype=float), (m,))
        if np.any(w < 0):
            raise InvalidConfigError("square objective weights must be nonnegative")
        rows = np.repeat(np.arange(self._nsq, self._nsq + m), idx.shape[1])
        self._sq_r.append(rows)
        self._sq_c.append(idx.reshape(-1))
        self._sq_v.append(coef.reshape(-1))
        self._sq_l.append(np.broadcast_to(np.asarray(const, dtype=float), (m,)).copy())
        self._sq_w.append(w.copy())
        self._nsq += m
        self._compiled = None

    def add_linear(self, idx, coef, rhs, label: str = "linear"):
        """Add rows coef_i . x[idx_i] <= rhs_i."""
        idx, coef = _as_rows(idx, coef)
        m = idx.shape[0]
        rows = np.repeat(np.arange(self._nli, self._nli + m), idx.shape[1])
        self._li_r.append(rows)
        self._li_c.append(idx.reshape(-1))
        self._li_v.append(coef.reshape(-1))
        self._li_rhs.append(np.broadcast_to(np.asarray(rhs, dtype=float), (m,)).copy())
        self.lin_labels.append((label, self._nli, self._nli + m))
        self._nli += m
        self._compiled = None

    def add_quadratic(self, rows_idx, rows_coef, rows_const, aff_idx, aff_coef, aff_const,
                      label: str = "quadratic"):
        """Add constraints sum_r (F_r . x + f_r)^2 <= g . x + g0.

        ``rows_idx``/``rows_coef`` have shape (m, R, w): m constraints with R
        squared rows each.  ``aff_idx``/``aff_coef`` have shape (m, w2).
        """
        Fi = np.asarray(rows_idx, dtype=np.int64)
        Fc = np.broadcast_to(np.asarray(rows_coef, dtype=float), Fi.shape)
        if Fi.ndim == 2:
            Fi, Fc = Fi[None], Fc[None]
        m, R, w = Fi.shape
        fc = np.broadcast_to(np.asarray(rows_const, dtype=float), (m, R)).reshape(-1)
        gi, gc = _as_rows(aff_idx, aff_coef)
        if gi.shape[0] != m:
            gi = np.broadcast_to(gi, (m, gi.shape[1]))
            gc = np.broadcast_to(gc, gi.shape)
        rows = np.repeat(np.arange(self._nqrows, self._nqrows + m * R), w)
        self._qF_r.append(rows)
        self._qF_c.append(Fi.reshape(-1))
        self._qF_v.append(Fc.reshape(-1))
        self._qf.append(fc.copy())
        self._qid.append(np.repeat(np.arange(self._nq, self._nq + m), R))
        self._nqrows += m * R
        self._qG_r.append(np.repeat(np.arange(self._nq, self._nq + m), gi.shape[1]))
        self._qG_c.append(np.asarray(gi).reshape(-1))
        self._qG_v.append(np.asarray(gc).reshape(-1))
        self._qg0.append(np.broadcast_to(np.asarray(aff_const, dtype=float), (m,)).copy())
        self.quad_labels.append((label, self._nq, self._nq + m))
        self._nq += m
        self._compiled = None

    def add_power_cone(self, a_idx, b_idx, label: str = "power", offset=0.0):
        """Add constraints 2^(x_a + offset) <= x_b elementwise."""
        a = np.asarray(a_idx, dtype=np.int64).reshape(-1)
        b = np.asarray(b_idx, dtype=np.int64).reshape(-1)
        start = sum(len(p) for p in self._pa)
        self._pa.append(a)
        self._pb.append(b)
        self._pofs.append(np.broadcast_to(np.asarray(offset, dtype=float), a.shape).copy())
        self.pow_labels.append((label, start, start + a.shape[0]))
        self._compiled = None

    # -- introspection ----------------------------------------------------
    @property
    def lower(self) -> np.ndarray:
        return np.concatenate(self._lb) if self._lb else np.zeros(0)

    @property
    def upper(self) -> np.ndarray:
        return np.concatenate(self._ub) if self._ub else np.zeros(0)

    def counts(self) -> dict:
        """Number of constraint rows per label (bounds excluded)."""
        out: dict[str, int] = {}
        for lab, a, b in self.lin_labels + self.quad_labels + self.pow_labels:
            out[lab] = out.get(lab, 0) + (b - a)
        return out

    def num_constraints(self) -> int:
        return sum(self.counts().values())

    def num_bounds(self) -> int:
        return int(np.isfinite(self.lower).sum() + np.isfinite(self.upper).sum())

    def compile(self) -> "_Compiled":
        if self._compiled is None:
            self._compiled = _Compiled(self)
        return self._compiled

    def unpack(self, x) -> dict:
        x = np.asarray(x, dtype=float)
        return {k: x[idx] if shape else float(x[idx]) for k, (idx, shape) in self.blocks.items()}

    def pack(self, values: dict, default: float = 0.0) -> np.ndarray:
        x = np.full(self.n, default, dtype=float)
        for k, v in values.items():
            idx, _ = self.blocks[k]
            x[idx] = v
        return x

    def objective(self, x) -> float:
        return self.compile().objective(np.asarray(x, dtype=float))

    def dump(self) -> str:
        """Plain-text listing, one variable block or constraint row per line."""
        cp = self.compile()
        lines = [f"variables {self.n}"]
        for k, (idx, shape) in self.blocks.items():
            flat = np.atleast_1d(idx).reshape(-1)
            lines.append(f"var {k} shape={list(shape)} start={int(flat[0])} size={flat.size}")
        lb, ub = self.lower, self.upper
        for i in range(self.n):
            if np.isfinite(lb[i]) or np.isfinite(ub[i]):
                lines.append(f"bound x{i} [{lb[i]:.17g}, {ub[i]:.17g}]")
        c = cp.c
        lines.append("objective linear " + " ".join(f"{v:+.17g}*x{i}" for i, v in enumerate(c) if v != 0))
        L = cp.L.tocsr()
        for r in range(L.shape[0]):
            s, e = L.indptr[r], L.indptr[r + 1]
            terms = " ".join(f"{v:+.17g}*x{j}" for j, v in zip(L.indices[s:e], L.data[s:e]))
            lines.append(f"objective square w={cp.w[r]:.17g} ({terms} {cp.l[r]:+.17g})^2")
        G = cp.G.tocsr()
        for lab, a, b in self.lin_labels:
            for r in range(a, b):
                s, e = G.indptr[r], G.indptr[r + 1]
                terms = " ".join(f"{v:+.17g}*x{j}" for j, v in zip(G.indices[s:e], G.data[s:e]))
                lines.append(f"linear {lab}[{r - a}] {terms} <= {cp.h[r]:.17g}")
        F, Gq = cp.F.tocsr(), cp.Gq.tocsr()
        for lab, a, b in self.quad_labels:
            for q in range(a, b):
                rows = np.nonzero(cp.qid == q)[0]
                sq = []
                for r in rows:
                    s, e = F.indptr[r], F.indptr[r + 1]
                    sq.append("(" + " ".join(f"{v:+.17g}*x{j}" for j, v in zip(F.indices[s:e], F.data[s:e]))
                              + f" {cp.f[r]:+.17g})^2")
                s, e = Gq.indptr[q], Gq.indptr[q + 1]
                aff = " ".join(f"{v:+.17g}*x{j}" for j, v in zip(Gq.indices[s:e], Gq.data[s:e]))
                lines.append(f"quadratic {lab}[{q - a}] {' + '.join(sq)} <= {aff} {cp.g0[q]:+.17g}")
        for lab, a, b in self.pow_labels:
            for r in range(a, b):
                lines.append(f"power {lab}[{r - a}] 2^(x{cp.pa[r]} {cp.pofs[r]:+.17g}) <= x{cp.pb[r]}")
        return "\n".join(lines) + "\n"

    def solve(self, x0=None, **kw) -> "Solution":
        return solve(self, x0=x0, **kw)


def _coo(rows, cols, vals, shape):
    if rows:
        r, c, v = np.concatenate(rows), np.concatenate(cols), np.concatenate(vals)
    else:
        r = c = np.zeros(0, dtype=np.int64)
        v = np.zeros(0)
    return sp.csr_matrix((v, (r, c)), shape=shape)


class _Compiled:
    """Sparse arrays of a program with bounds folded into the linear rows."""

    def __init__(self, prog: ConvexProgram):
        n = prog.n
        self.n = n
        c = np.zeros(n)
        for i, v in prog._c.items():
            c[i] += v
        self.c = c
        self.const = prog.const
        self.L = _coo(prog._sq_r, prog._sq_c, prog._sq_v, (prog._nsq, n))
        self.l = np.concatenate(prog._sq_l) if prog._sq_l else np.zeros(0)
        self.w = np.concatenate(prog._sq_w) if prog._sq_w else np.zeros(0)
        G = _coo(prog._li_r, prog._li_c, prog._li_v, (prog._nli, n))
        h = np.concatenate(prog._li_rhs) if prog._li_rhs else np.zeros(0)
        self.n_general = G.shape[0]
        lb, ub = prog.lower, prog.upper
        il = np.nonzero(np.isfinite(lb))[0]
        iu = np.nonzero(np.isfinite(ub))[0]
        Bl = sp.csr_matrix((-np.ones(il.size), (np.arange(il.size), il)), shape=(il.size, n))
        Bu = sp.csr_matrix((np.ones(iu.size), (np.arange(iu.size), iu)), shape=(iu.size, n))
        self.G = sp.vstack([G, Bl, Bu]).tocsr()
        self.h = np.concatenate([h, -lb[il], ub[iu]])
        self.F = _coo(prog._qF_r, prog._qF_c, prog._qF_v, (prog._nqrows, n))
        self.f = np.concatenate(prog._qf) if prog._qf else np.zeros(0)
        self.qid = np.concatenate(prog._qid) if prog._qid else np.zeros(0, dtype=np.int64)
        self.nq = prog._nq
        self.Gq = _coo(prog._qG_r, prog._qG_c, prog._qG_v, (prog._nq, n))
        self.g0 = np.concatenate(prog._qg0) if prog._qg0 else np.zeros(0)
        self.pa = np.concatenate(prog._pa) if prog._pa else np.zeros(0, dtype=np.int64)
        self.pb = np.concatenate(prog._pb) if prog._pb else np.zeros(0, dtype=np.int64)
        self.pofs = np.concatenate(prog._pofs) if prog._pofs else np.zeros(0)
        self.m = self.G.shape[0] + self.nq + self.pa.size
        # selector turning squared-row weights into per-constraint sums
        self.Q = sp.csr_matrix((np.ones(self.qid.size), (self.qid, np.arange(self.qid.size))),
                               shape=(self.nq, self.qid.size))
        self.FtF_pattern = None

    # objective ----------------------------------------------------------
    def objective(self, x):
        val = float(self.c @ x) + self.const
        if self.w.size:
            r = self.L @ x + self.l
            val += float(np.sum(self.w * r * r))
        return val

    def obj_grad(self, x):
        g = self.c.copy()
        if self.w.size:
            r = self.L @ x + self.l
            g += 2.0 * (self.L.T @ (self.w * r))
        return g

    def obj_hess(self):
        if self.w.size:
            return (2.0 * (self.L.T @ sp.diags(self.w) @ self.L)).tocsc()
        return sp.csc_matrix((self.n, self.n))

    # constraints --------------------------------------------------------
    def slacks(self, x):
        """Slack vectors (linear, quadratic, power); negative means violated."""
        sl = self.h - self.G @ x
        if self.nq:
            r = self.F @ x + self.f
            sq = self.Q @ (r * r)
            sq_ = self.Gq @ x + self.g0 - sq
        else:
            sq_ = np.zeros(0)
        if self.pa.size:
            # log form log2(b) - a: same set, far better scaled than b - 2^a
            b = x[self.pb]
            with np.errstate(divide="ignore", invalid="ignore"):
                sp_ = np.where(b > 0, np.log2(np.where(b > 0, b, 1.0)), -np.inf) - x[self.pa] - self.pofs
        else:
            sp_ = np.zeros(0)
        return sl, sq_, sp_

    def max_violation(self, x) -> float:
        sl, sq, _ = self.slacks(x)
        with np.errstate(over="ignore"):
            spw = x[self.pb] - np.exp2(x[self.pa] + self.pofs) if self.pa.size else np.zeros(0)
        v = 0.0
        for s in (sl, sq, spw):
            if s.size:
                v = max(v, float(np.max(-s)))
        return max(v, 0.0)

    def row_scale(self, x):
        """Magnitude of the terms of each constraint row at ``x``.

        Constraint values are differences of such terms, so rounding error in
        a slack grows with this scale.
        """
        ax = np.abs(x)
        parts = [abs(self.G) @ ax + np.abs(self.h)]
        if self.nq:
            r = self.F @ x + self.f
            parts.append(self.Q @ (r * r) + abs(self.Gq) @ ax + np.abs(self.g0))
        if self.pa.size:
            parts.append(np.abs(x[self.pb]))
        return np.concatenate(parts)

    def rel_violation(self, x) -> float:
        """Largest violation measured relative to ``1 + row_scale``.

        Power cones are measured in the form 2^(a + c) <= b.
        """
        sl, sq, _ = self.slacks(x)
        with np.errstate(over="ignore"):
            spw = x[self.pb] - np.exp2(x[self.pa] + self.pofs) if self.pa.size else np.zeros(0)
        viol = -np.concatenate([sl, sq, spw]) / (1.0 + self.row_scale(x))
        return max(float(np.max(viol, initial=0.0)), 0.0)

    def jacobian(self, x):
        """Sparse Jacobian (m, n) of the constraint functions g(x) = -slack(x)."""
        blocks = [self.G]
        if self.nq:
            r = self.F @ x + self.f
            W = sp.csr_matrix((r, (self.qid, np.arange(r.size))), shape=(self.nq, r.size))
            blocks.append(2.0 * (W @ self.F) - self.Gq)
        if self.pa.size:
            k = np.arange(self.pa.size)
            blocks.append(sp.csr_matrix((np.concatenate([np.ones(k.size), -1.0 / (LN2 * x[self.pb])]),
                                         (np.concatenate([k, k]), np.concatenate([self.pa, self.pb]))),
                                        shape=(k.size, self.n)))
        return sp.vstack(blocks).tocsr()

    def constraint_hessian(self, x, lam):
        """sum_i lam_i * Hessian(g_i) as a sparse (n, n) matrix."""
        H = sp.csr_matrix((self.n, self.n))
        nl = self.G.shape[0]
        if self.nq:
            lq = lam[nl:nl + self.nq]
            H = H + 2.0 * (self.F.T @ sp.diags(lq[self.qid]) @ self.F)
        if self.pa.size:
            lp = lam[nl + self.nq:]
            b = x[self.pb]
            H = H + sp.csr_matrix((lp / (LN2 * b * b), (self.pb, self.pb)), shape=(self.n, self.n))
        return H

    def constraint_jacobian(self, x):
        """Dense version of :meth:`jacobian`."""
        return self.jacobian(x).toarray()


@dataclass
class Solution:
    values: dict
    x: np.ndarray
    objective_value: float
    status: str
    kkt_residual: float
    iterations: int
    duals: dict = field(default_factory=dict)
    max_violation: float = 0.0

    def __getitem__(self, name):
        return self.values[name]

    @property
    def optimal(self) -> bool:
        return self.status == "optimal"


@dataclass
class KktReport:
    primal_violation: float
    dual_violation: float
    complementarity: float
    stationarity: float

    @property
    def residual(self) -> float:
        return max(self.primal_violation, self.dual_violation, self.complementarity, self.stationarity)


def _newton_solver(H):
    """Factorise the (Jacobi-equilibrated) Newton matrix; returns g -> -H^{-1} g."""
    n = H.shape[0]
    d = np.asarray(H.diagonal()).copy()
    d[d <= 0] = 1.0
    sc = 1.0 / np.sqrt(d)
    Hs = sp.diags(sc) @ H @ sp.diags(sc)
    if n <= DENSE_LIMIT:
        A = Hs.toarray()
        A[np.diag_indices(n)] += 1e-13
        try:
            fac = sla.cho_factor(A, lower=True, check_finite=False)

            def inner(r):
                return sla.cho_solve(fac, r, check_finite=False)
        except (np.linalg.LinAlgError, ValueError):
            def inner(r):
                return sla.lstsq(A, r, check_finite=False)[0]
    else:
        A = (Hs + 1e-13 * sp.identity(n)).tocsc()
        try:
            inner = spla.splu(A, permc_spec="MMD_AT_PLUS_A", diag_pivot_thresh=0.0,
                              options={"SymmetricMode": True}).solve
        except RuntimeError:
            A2 = (A + 1e-9 * sp.identity(n)).tocsc()

            def inner(r):
                return spla.spsolve(A2, r)

    def direction(g):
        return sc * inner(-sc * g)
    return direction


def _newton_direction(H, g):
    return _newton_solver(H)(g)


class _Shifted:
    """Phase-1 view of a compiled program: minimise sigma with every slack
    shifted by sigma, plus the floor sigma >= -1 so the problem stays bounded.
    The variable vector is [x, sigma]."""

    def __init__(self, cp: _Compiled):
        self.cp = cp
        self.n = cp.n + 1
        self.m = cp.m + 1
        self.pa, self.pb = cp.pa, cp.pb

    def objective(self, z):
        return float(z[-1])

    def obj_grad(self, z):
        g = np.zeros(self.n)
        g[-1] = 1.0
        return g

    def obj_hess(self):
        return sp.csc_matrix((self.n, self.n))

    def slacks(self, z):
        sg = z[-1]
        return tuple(part + sg for part in self.cp.slacks(z[:-1])) + (np.array([sg + 1.0]),)

    def row_scale(self, z):
        return np.concatenate([self.cp.row_scale(z[:-1]) + abs(z[-1]), [1.0 + abs(z[-1])]])

    def rel_violation(self, z):
        s = np.concatenate(self.slacks(z))
        return max(float(np.max(-s / (1.0 + self.row_scale(z)), initial=0.0)), 0.0)

    def jacobian(self, z):
        J = self.cp.jacobian(z[:-1])
        col = sp.csr_matrix(-np.ones((J.shape[0], 1)))
        last = sp.csr_matrix(([-1.0], ([0], [self.n - 1])), shape=(1, self.n))
        return sp.vstack([sp.hstack([J, col]), last]).tocsr()

    def constraint_hessian(self, z, lam):
        H = self.cp.constraint_hessian(z[:-1], lam[:-1])
        return sp.block_diag([H, sp.csr_matrix((1, 1))]).tocsr()


def phase1(cp: _Compiled, x0, max_iters: int = 200):
    """Find a strictly feasible point by minimising one shared slack.

    Returns (x, iterations, found).
    """
    x0 = np.asarray(x0, dtype=float)
    if cp.pa.size and np.any(x0[cp.pb] <= 0):
        # the log-form cone slack needs b > 0
        x0 = x0.copy()
        bad = x0[cp.pb] <= 0
        x0[cp.pb[bad]] = np.exp2(np.minimum(x0[cp.pa[bad]] + cp.pofs[bad], 60.0)) + 1.0
    s0 = np.concatenate(cp.slacks(x0))
    if s0.size == 0 or s0.min() > 0:
        return x0, 0, True
    z = np.concatenate([x0, [1.0 - s0.min()]])

    def strictly_feasible(zz):
        return bool(np.concatenate(cp.slacks(zz[:-1])).min() > 0)

    z, _, k, _ = _primal_dual(_Shifted(cp), z, 1e-9, max_iters, 0.2, stop=strictly_feasible)
    return z[:-1], k, strictly_feasible(z)


def solve(program: ConvexProgram, x0=None, feas_tol: float = 1e-7, opt_tol: float = 1e-6,
          max_iters: int = 200, sigma: float = 0.2) -> Solution:
    """Solve ``program`` from ``x0`` (a phase 1 runs if it violates the constraints).

    Each Newton step targets at most ``sigma`` times the current average
    complementarity.  Feasibility is judged relative to the magnitude of the
    terms in each row (see ``_Compiled.row_scale``).
    """
    cp = program.compile()
    n = cp.n
    if x0 is None:
        lb, ub = program.lower, program.upper
        x0 = np.zeros(n)
        both = np.isfinite(lb) & np.isfinite(ub)
        x0[both] = 0.5 * (lb[both] + ub[both])
        lo = np.isfinite(lb) & ~both
        x0[lo] = lb[lo] + 1.0
        hi = np.isfinite(ub) & ~both
        x0[hi] = ub[hi] - 1.0
    x = np.asarray(x0, dtype=float).copy()
    iters = 0
    if cp.rel_violation(x) > feas_tol or (cp.pa.size and np.any(x[cp.pb] <= 0)):
        x, k, ok = phase1(cp, x, max_iters)
        iters += k
        if not ok:
            return Solution(program.unpack(x), x, cp.objective(x), "infeasible", math.inf, iters,
                            max_violation=cp.rel_violation(x))
    x, lam, k, status = _primal_dual(cp, x, opt_tol, max(max_iters - iters, 1), sigma, feas_tol)
    iters += k
    f = cp.objective(x)
    sl = np.concatenate(cp.slacks(x))
    gf = cp.obj_grad(x)
    rd = gf + cp.jacobian(x).T @ lam if lam.size else gf
    stat = float(np.max(np.abs(rd))) / (1.0 + float(np.max(np.abs(gf)))) if gf.size else 0.0
    gap_rel = float(sl @ lam) / (1.0 + abs(f)) if lam.size else 0.0
    viol = cp.rel_violation(x)
    if status == "optimal" and viol > feas_tol:
        status = "iteration-limit"
    nl, nq = cp.G.shape[0], cp.nq
    dl, dq, dp = lam[:nl], lam[nl:nl + nq], lam[nl + nq:]
    duals = {}
    for lab, a_, b_ in program.lin_labels:
        duals.setdefault(lab, []).append(dl[a_:b_])
    for lab, a_, b_ in program.quad_labels:
        duals.setdefault(lab, []).append(dq[a_:b_])
    for lab, a_, b_ in program.pow_labels:
        duals.setdefault(lab, []).append(dp[a_:b_])
    duals = {key: np.concatenate(v) for key, v in duals.items()}
    duals["_bounds"] = dl[cp.n_general:]
    duals["_all"] = lam
    return Solution(program.unpack(x), x, f, status, max(gap_rel, stat), iters, duals=duals,
                    max_violation=viol)


def _primal_dual(cp, x, opt_tol: float, max_iters: int, sigma: float,
                 feas_tol: float = 1e-7, stop=None):
    """Primal-dual interior iterations with explicit slacks s and multipliers lam.

    Solves grad f + J^T lam = 0, g(x) + s = 0, s * lam = tau with Newton
    steps and a Mehrotra predictor-corrector choice of tau, capped at
    ``sigma`` times the current complementarity.  The slacks may disagree
    with the constraint values along the way, so ``x`` may start on the
    boundary.  ``stop(x)`` ends the iteration early with status "stopped".
    """
    sl = np.concatenate(cp.slacks(x))
    m = sl.size
    if m == 0:
        lam = np.zeros(0)
        for it in range(max_iters):
            g = cp.obj_grad(x)
            if float(np.max(np.abs(g), initial=0.0)) <= opt_tol:
                return x, lam, it, "optimal"
            x = x + _newton_direction(cp.obj_hess(), g)
        return x, lam, max_iters, "iteration-limit"
    f = cp.objective(x)
    scale = 1.0 + abs(f)
    # start every slack well inside; the residual g(x) + s absorbs the shift
    s = 1.0 + np.abs(sl)
    gf = cp.obj_grad(x)
    J = cp.jacobian(x)
    v = J.T @ (1.0 / s)
    vv = float(v @ v)
    mu0 = -float(gf @ v) / vv if vv > 0 else 0.0
    mu0 = min(max(mu0, 1e-1 * scale / m), 1e3 * scale)
    lam = mu0 / s
    status = "iteration-limit"
    it = 0
    while it < max_iters:
        gf = cp.obj_grad(x)
        J = cp.jacobian(x)
        f = cp.objective(x)
        scale = 1.0 + abs(f)
        sl = np.concatenate(cp.slacks(x))
        rp = s - sl  # g(x) + s with g = -slack
        rd = gf + J.T @ lam
        mu = float(s @ lam) / m
        rs = 1.0 + cp.row_scale(x)
        if (m * mu <= opt_tol * scale and float(np.max(np.abs(rp) / rs)) <= feas_tol
                and float(np.max(np.abs(rd))) <= opt_tol * (1.0 + float(np.max(np.abs(gf))))
                and cp.rel_violation(x) <= feas_tol):
            status = "optimal"
            break
        Hm = cp.obj_hess() + cp.constraint_hessian(x, lam) + J.T @ sp.diags(lam / s) @ J
        newton = _newton_solver(Hm.tocsc())

        def direction(rc):
            # rc: target of s*lam; returns (dx, ds, dlam)
            w = (rc + lam * rp) / s
            dx = newton(gf + J.T @ w)
            Jd = J @ dx
            ds = -rp - Jd
            dlam = (rc - lam * s - lam * ds) / s
            return dx, ds, dlam

        dx, ds, dl = direction(np.zeros(m))
        a_p = _max_step(s, -ds)
        a_d = _max_step(lam, -dl)
        mu_aff = float((s + a_p * ds) @ (lam + a_d * dl)) / m
        sig = min(sigma, (mu_aff / mu) ** 3) if mu > 0 else sigma
        tau = sig * mu
        dx, ds, dl = direction(tau - ds * dl)
        a_p = min(1.0, 0.99 * _max_step(s, -ds, 1.0 / 0.99))
        a_d = min(1.0, 0.99 * _max_step(lam, -dl, 1.0 / 0.99))
        # stay inside the domain of the log-form cone slacks
        while a_p > 1e-14:
            xn = x + a_p * dx
            if not cp.pa.size or np.all(xn[cp.pb] > 0):
                break
            a_p *= 0.5
        x = xn
        s = s + a_p * ds
        lam = lam + a_d * dl
        it += 1
        if stop is not None and stop(x):
            status = "stopped"
            break
    return x, lam, it, status


def _max_step(v, dec, cap: float = 1.0) -> float:
    """Largest a <= cap with v - a * dec >= 0."""
    pos = dec > 0
    if not np.any(pos):
        return cap
    return min(cap, float(np.min(v[pos] / dec[pos])))


def check_kkt(program: ConvexProgram, x, duals=None) -> KktReport:
    """Primal/dual violation, complementarity and stationarity at ``x``.

    Without ``duals`` the multipliers are estimated by nonnegative least
    squares on the stationarity equation.
    """
    cp = program.compile()
    x = np.asarray(x, dtype=float)
    sl, sq, spw = cp.slacks(x)
    s = np.concatenate([sl, sq, spw])
    primal = float(max(0.0, np.max(-s))) if s.size else 0.0
    gf = cp.obj_grad(x)
    J = cp.constraint_jacobian(x)
    if duals is None:
        lam, _ = nnls(-J.T, gf) if J.size else (np.zeros(0), 0.0)
    else:
        lam = np.asarray(duals, dtype=float)
    dual_viol = float(max(0.0, np.max(-lam))) if lam.size else 0.0
    comp = float(np.max(np.abs(lam * np.maximum(s, 0.0)))) if lam.size else 0.0
    stat = float(np.max(np.abs(gf + J.T @ lam))) if gf.size else 0.0
    return KktReport(primal, dual_viol, comp, stat)

