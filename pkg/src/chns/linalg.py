"""Row-compressed sparse matrices, Krylov solvers and a damped Newton driver.

The matrix container keeps the raw CSR arrays; matrix-vector products are
delegated to scipy's compiled CSR kernels.  The Krylov drivers (CG for SPD
blocks, BiCGStab for the nonsymmetric ones) are written here so iteration
counts, breakdown flags and the tolerance contract stay explicit.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import spsolve_triangular

from .errors import ContractError, SolveError


class CompressedSparseMatrix:
    """CSR matrix: row offsets, strictly increasing column indices per row,
    values; duplicates merged at construction."""

    def __init__(self, indptr, indices, data, shape):
        self.indptr = np.asarray(indptr, dtype=np.int64)
        self.indices = np.asarray(indices, dtype=np.int64)
        self.data = np.asarray(data, dtype=float)
        self.shape = tuple(shape)
        if self.indptr.size != self.shape[0] + 1:
            raise ContractError("indptr length must be n_rows + 1")
        if self.indices.size != self.data.size:
            raise ContractError("indices and data must have equal length")

    # ------------------------------------------------------------------

    @classmethod
    def from_coo(cls, rows, cols, vals, shape) -> "CompressedSparseMatrix":
        """Build from triplets, merging duplicate (row, col) entries by addition."""
        m = sp.coo_matrix((vals, (rows, cols)), shape=shape).tocsr()
        m.sum_duplicates()
        m.sort_indices()
        return cls(m.indptr, m.indices, m.data, shape)

    @classmethod
    def from_dense(cls, a) -> "CompressedSparseMatrix":
        m = sp.csr_matrix(np.asarray(a, dtype=float))
        return cls(m.indptr, m.indices, m.data, m.shape)

    @classmethod
    def identity(cls, n) -> "CompressedSparseMatrix":
        m = sp.identity(n, format="csr")
        return cls(m.indptr, m.indices, m.data, (n, n))

    def to_scipy(self) -> sp.csr_matrix:
        return sp.csr_matrix((self.data, self.indices, self.indptr), shape=self.shape)

    def to_dense(self) -> np.ndarray:
        return self.to_scipy().toarray()

    def diagonal(self) -> np.ndarray:
        return self.to_scipy().diagonal()

    def copy(self) -> "CompressedSparseMatrix":
        return CompressedSparseMatrix(self.indptr.copy(), self.indices.copy(),
                                      self.data.copy(), self.shape)

    @property
    def nnz(self) -> int:
        return self.data.size

    def matvec(self, x) -> np.ndarray:
        return spmv(self, x)

    def set_dirichlet_rows(self, mask, values, b, symmetric=True):
        """Impose Dirichlet constraints in place; returns the updated rhs.

        Constrained rows become identity rows.  With ``symmetric=True`` the
        columns are eliminated as well (the known values move to the rhs),
        preserving symmetry for CG.
        """
        mask = np.asarray(mask, dtype=bool)
        values = np.asarray(values, dtype=float)
        b = np.asarray(b, dtype=float).copy()
        if symmetric:
            g = np.zeros(self.shape[1])
            g[mask] = values[mask] if values.shape == mask.shape else values
            b -= self.matvec(g)
        col_mask = mask[self.indices]
        row_ids = np.repeat(np.arange(self.shape[0]), np.diff(self.indptr))
        row_mask = mask[row_ids]
        if symmetric:
            self.data[col_mask & ~row_mask] = 0.0
        self.data[row_mask] = 0.0
        diag_entries = row_mask & (self.indices == row_ids)
        self.data[diag_entries] = 1.0
        b[mask] = values[mask] if values.shape == mask.shape else values
        return b


def spmv(a: CompressedSparseMatrix, x) -> np.ndarray:
    """y = A x."""
    x = np.asarray(x, dtype=float)
    if x.shape != (a.shape[1],):
        raise ContractError(f"vector length {x.shape} does not match matrix {a.shape}")
    return a.to_scipy() @ x


def write_matrix_market(a: CompressedSparseMatrix, path):
    """Export in MatrixMarket coordinate format (1-based indices)."""
    m = a.to_scipy().tocoo()
    with open(path, "w") as f:
        f.write("%%MatrixMarket matrix coordinate real general\n")
        f.write(f"{a.shape[0]} {a.shape[1]} {m.nnz}\n")
        for r, c, v in zip(m.row, m.col, m.data):
            f.write(f"{r + 1} {c + 1} {v:.17g}\n")


# ---------------------------------------------------------------------------
# Solver configuration and preconditioners


@dataclass
class SolverConfig:
    """Tolerances and preconditioner selection for one solver block."""

    rtol: float = 1e-10
    atol: float = 1e-12
    max_iters: int = 5000
    preconditioner: str = "jacobi"   # none | jacobi | ssor
    omega: float = 1.0
    newton_rtol: float = 1e-10
    newton_atol: float = 1e-12
    newton_max_iters: int = 12

    def __post_init__(self):
        if self.rtol <= 0 or self.atol <= 0:
            raise ContractError("solver tolerances must be positive")
        if not 0.0 < self.omega < 2.0:
            raise ContractError("SSOR relaxation must satisfy 0 < omega < 2")
        if self.preconditioner not in ("none", "jacobi", "ssor", "bjacobi2",
                                       "nodeblock2", "fieldsplit2"):
            raise ContractError(f"unknown preconditioner {self.preconditioner!r}")


class _IdentityPC:
    def apply(self, r):
        return r


class _JacobiPC:
    def __init__(self, a: CompressedSparseMatrix):
        d = a.diagonal().copy()
        d[d == 0.0] = 1.0
        self.inv = 1.0 / d

    def apply(self, r):
        return self.inv * r


class _SsorPC:
    """Symmetric SOR preconditioner M = (D/w + L) (w/(2-w)) D^-1 (D/w + U)."""

    def __init__(self, a: CompressedSparseMatrix, omega: float):
        s = a.to_scipy()
        d = s.diagonal().copy()
        d[d == 0.0] = 1.0
        self.omega = omega
        self.diag = d
        lower = sp.tril(s, k=-1).tocsr()
        upper = sp.triu(s, k=1).tocsr()
        dw = sp.diags(d / omega).tocsr()
        self.low = (dw + lower).tocsr()
        self.up = (dw + upper).tocsr()
        self.scale = (2.0 - omega) / omega

    def apply(self, r):
        y = spsolve_triangular(self.low, r, lower=True)
        y = self.diag * y / self.omega
        y = spsolve_triangular(self.up, y, lower=False)
        return self.scale * y


class _ScaledBlockJacobi2PC:
    """Node-block Jacobi for two interleaved dofs per node, applied to the
    symmetrically equilibrated operator: P^-1 = D * blockdiag(D A D)^-1 * D
    with D = diag(|diag A|^-1/2)."""

    def __init__(self, a: CompressedSparseMatrix):
        s = a.to_scipy()
        n2 = s.shape[0]
        if n2 % 2:
            raise ContractError("block preconditioner needs an even system size")
        d = np.sqrt(np.abs(s.diagonal()))
        d[d == 0.0] = 1.0
        self.dinv = 1.0 / d
        d0 = s.diagonal(0) * self.dinv ** 2
        d1 = s.diagonal(1)
        dm1 = s.diagonal(-1)
        n = n2 // 2
        blocks = np.zeros((n, 2, 2))
        blocks[:, 0, 0] = d0[0::2]
        blocks[:, 1, 1] = d0[1::2]
        blocks[:, 0, 1] = d1[0::2] * self.dinv[0::2] * self.dinv[1::2]
        blocks[:, 1, 0] = dm1[0::2] * self.dinv[0::2] * self.dinv[1::2]
        det = blocks[:, 0, 0] * blocks[:, 1, 1] - blocks[:, 0, 1] * blocks[:, 1, 0]
        # Near-singular blocks amplify roundoff through the inverse; fall
        # back to the (equilibrated) diagonal there.
        scale = np.max(np.abs(blocks), axis=(1, 2))
        bad = np.abs(det) < 1e-10 * scale ** 2
        if np.any(bad):
            diag_only = np.zeros((int(bad.sum()), 2, 2))
            diag_only[:, 0, 0] = blocks[bad, 0, 0]
            diag_only[:, 1, 1] = blocks[bad, 1, 1]
            blocks[bad] = diag_only
            det[bad] = blocks[bad, 0, 0] * blocks[bad, 1, 1]
        still = np.abs(det) < 1e-300
        blocks[still] = np.eye(2)
        det[still] = 1.0
        inv = np.empty_like(blocks)
        inv[:, 0, 0] = blocks[:, 1, 1] / det
        inv[:, 1, 1] = blocks[:, 0, 0] / det
        inv[:, 0, 1] = -blocks[:, 0, 1] / det
        inv[:, 1, 0] = -blocks[:, 1, 0] / det
        self.binv = inv

    def apply(self, r):
        z = (self.dinv * r).reshape(-1, 2)
        w = np.einsum("nij,nj->ni", self.binv, z).reshape(-1)
        return self.dinv * w


class _NodeBlock2PC:
    """Exact inverse of the 2x2 per-node diagonal blocks (no equilibration);
    effective when the inter-field couplings dominate the node blocks."""

    def __init__(self, a: CompressedSparseMatrix):
        s = a.to_scipy()
        n2 = s.shape[0]
        if n2 % 2:
            raise ContractError("block preconditioner needs an even system size")
        d0 = s.diagonal(0)
        d1 = s.diagonal(1)
        dm1 = s.diagonal(-1)
        a00, a11 = d0[0::2], d0[1::2]
        a01, a10 = d1[0::2], dm1[0::2]
        det = a00 * a11 - a01 * a10
        scale = np.maximum.reduce([np.abs(a00), np.abs(a11),
                                   np.abs(a01), np.abs(a10)])
        scale[scale == 0.0] = 1.0
        bad = np.abs(det) < 1e-12 * scale ** 2
        det = np.where(bad, scale ** 2, det)
        self.i00 = np.where(bad, 1.0 / scale, a11 / det)
        self.i11 = np.where(bad, 1.0 / scale, a00 / det)
        self.i01 = np.where(bad, 0.0, -a01 / det)
        self.i10 = np.where(bad, 0.0, -a10 / det)

    def apply(self, r):
        r1, r2 = r[0::2], r[1::2]
        out = np.empty_like(r)
        out[0::2] = self.i00 * r1 + self.i01 * r2
        out[1::2] = self.i10 * r1 + self.i11 * r2
        return out


class _FieldSplit2PC:
    """Block upper-triangular preconditioner for two interleaved dofs with a
    diagonal Schur-complement approximation: given the 2x2 block operator
    [[A, B], [C, D]], apply x_2 = S_d^-1 r_2, x_1 = A_d^-1 (r_1 - B x_2)
    with S_d = diag(D) - diag(C) diag(B) / diag(A)."""

    def __init__(self, a: CompressedSparseMatrix):
        s = a.to_scipy()
        n2 = s.shape[0]
        if n2 % 2:
            raise ContractError("block preconditioner needs an even system size")
        idx_p = np.arange(0, n2, 2)
        idx_m = idx_p + 1
        csc = s.tocsc()
        self.b_op = csc[:, idx_m][idx_p, :].tocsr()
        d0 = s.diagonal(0)
        d1 = s.diagonal(1)
        dm1 = s.diagonal(-1)
        da = d0[0::2].copy()
        da[da == 0.0] = 1.0
        self.da = da
        sd = d0[1::2] - dm1[0::2] * d1[0::2] / da
        sd[sd == 0.0] = 1.0
        self.sd = sd

    def apply(self, r):
        rp, rm = r[0::2], r[1::2]
        xm = rm / self.sd
        xp = (rp - self.b_op @ xm) / self.da
        out = np.empty_like(r)
        out[0::2] = xp
        out[1::2] = xm
        return out


def make_preconditioner(a: CompressedSparseMatrix, config: SolverConfig):
    name = config.preconditioner
    if name == "none":
        return _IdentityPC()
    if name == "jacobi":
        return _JacobiPC(a)
    if name == "bjacobi2":
        return _ScaledBlockJacobi2PC(a)
    if name == "nodeblock2":
        return _NodeBlock2PC(a)
    if name == "fieldsplit2":
        return _FieldSplit2PC(a)
    return _SsorPC(a, config.omega)


@dataclass
class SolveResult:
    x: np.ndarray
    iterations: int
    final_residual: float
    converged: bool
    status: str = "converged"
    history: list = field(default_factory=list)


def _tolerance(b, config):
    return max(config.atol, config.rtol * float(np.linalg.norm(b)))


def cg_solve(a: CompressedSparseMatrix, b, x0=None,
             config: Optional[SolverConfig] = None,
             project_nullspace: bool = False) -> SolveResult:
    """Preconditioned conjugate gradients for SPD (or semi-definite) systems.

    With ``project_nullspace`` the constant vector is deflated: rhs, initial
    guess and solution are kept orthogonal to it (pure-Neumann operators).
    """
    config = config or SolverConfig()
    b = np.asarray(b, dtype=float).copy()
    n = b.size
    x = np.zeros(n) if x0 is None else np.asarray(x0, dtype=float).copy()

    def deflate(v):
        return v - v.mean()

    if project_nullspace:
        b = deflate(b)
        x = deflate(x)
    asp = a.to_scipy()
    tol = _tolerance(b, config)
    r = b - asp @ x
    pc = make_preconditioner(a, config)
    z = pc.apply(r)
    if project_nullspace:
        z = deflate(z)
    p = z.copy()
    rz = float(r @ z)
    res = float(np.linalg.norm(r))
    history = [res]
    it = 0
    while res > tol and it < config.max_iters:
        it += 1
        ap = asp @ p
        pap = float(p @ ap)
        if pap <= 0.0:
            true_res = float(np.linalg.norm(b - asp @ x))
            return SolveResult(x, it, true_res, true_res <= tol,
                               status="breakdown", history=history)
        alpha = rz / pap
        x += alpha * p
        r -= alpha * ap
        res = float(np.linalg.norm(r))
        history.append(res)
        if res <= tol:
            break
        z = pc.apply(r)
        if project_nullspace:
            z = deflate(z)
        rz_new = float(r @ z)
        p = z + (rz_new / rz) * p
        rz = rz_new
    if project_nullspace:
        x = deflate(x)
    true_res = float(np.linalg.norm(b - asp @ x))
    converged = true_res <= tol * 1.001
    status = "converged" if converged else "max_iterations"
    return SolveResult(x, it, true_res, converged, status=status, history=history)


def bicgstab_solve(a: CompressedSparseMatrix, b, x0=None,
                   config: Optional[SolverConfig] = None,
                   project_nullspace: bool = False) -> SolveResult:
    """Preconditioned BiCGStab with true-residual restarts.

    The inner recursion restarts from the freshly computed residual on
    rho-breakdown or when the recursive residual has drifted from the true
    one, which is what bounds the attainable accuracy of plain BiCGStab.
    """
    config = config or SolverConfig()
    b = np.asarray(b, dtype=float).copy()
    n = b.size
    x = np.zeros(n) if x0 is None else np.asarray(x0, dtype=float).copy()

    def deflate(v):
        return v - v.mean()

    if project_nullspace:
        b = deflate(b)
        x = deflate(x)
    asp = a.to_scipy()
    tol = _tolerance(b, config)
    pc = make_preconditioner(a, config)
    history = []
    it_total = 0
    status = "max_iterations"
    best_x = x.copy()
    best_res = float(np.linalg.norm(b - asp @ x))
    history.append(best_res)
    no_progress = 0
    while it_total < config.max_iters:
        r = b - asp @ x
        res = float(np.linalg.norm(r))
        if not np.isfinite(res):
            x = best_x.copy()
            r = b - asp @ x
            res = float(np.linalg.norm(r))
        if res <= tol:
            status = "converged"
            break
        restart_start = res
        r0 = r.copy()
        rho = alpha = omega = 1.0
        v = np.zeros(n)
        p = np.zeros(n)
        broke = None
        first = True
        while it_total < config.max_iters:
            it_total += 1
            rho_new = float(r0 @ r)
            if abs(rho_new) < 1e-300 or (not first and abs(omega) < 1e-300):
                broke = "rho_breakdown"
                break
            if first:
                p = r.copy()
                first = False
            else:
                beta = (rho_new / rho) * (alpha / omega)
                p = r + beta * (p - omega * v)
            rho = rho_new
            ph = pc.apply(p)
            if project_nullspace:
                ph = deflate(ph)
            v = asp @ ph
            denom = float(r0 @ v)
            if abs(denom) < 1e-300:
                broke = "rho_breakdown"
                break
            alpha = rho / denom
            s = r - alpha * v
            if float(np.linalg.norm(s)) <= tol:
                x += alpha * ph
                break
            sh = pc.apply(s)
            if project_nullspace:
                sh = deflate(sh)
            t = asp @ sh
            tt = float(t @ t)
            if tt == 0.0:
                x += alpha * ph
                break
            omega = float(t @ s) / tt
            x += alpha * ph + omega * sh
            r = s - omega * t
            res = float(np.linalg.norm(r))
            history.append(res)
            if not np.isfinite(res):
                broke = "diverged"
                break
            if res <= tol:
                break
            # Restart periodically so the recursive residual cannot drift
            # arbitrarily far from the true one.
            if it_total % 120 == 0:
                break
        if broke == "diverged":
            x = best_x.copy()
        true_res = float(np.linalg.norm(b - asp @ x))
        if np.isfinite(true_res) and true_res < best_res:
            best_res = true_res
            best_x = x.copy()
        else:
            x = best_x.copy()
        if true_res <= tol:
            status = "converged"
            break
        if true_res > 0.95 * restart_start:
            no_progress += 1
            if no_progress >= 3:
                status = "stagnated" if broke is None else str(broke)
                break
        else:
            no_progress = 0
    x = best_x
    if project_nullspace:
        x = deflate(x)
    true_res = float(np.linalg.norm(b - asp @ x))
    converged = true_res <= tol * 1.001
    if converged:
        status = "converged"
    return SolveResult(x, it_total, true_res, converged, status=status,
                       history=history)


def newton_solve(residual_fn, jacobian_fn, x0,
                 config: Optional[SolverConfig] = None,
                 linear_solver=bicgstab_solve) -> SolveResult:
    """Damped Newton iteration; each linear subsolve uses BiCGStab.

    Full steps by default; the step is halved up to four times when the
    residual norm fails to decrease.
    """
    config = config or SolverConfig()
    x = np.asarray(x0, dtype=float).copy()
    r = np.asarray(residual_fn(x))
    rnorm = float(np.linalg.norm(r))
    history = [rnorm]
    tol = max(config.newton_atol, config.newton_rtol * rnorm)
    if rnorm <= tol:
        return SolveResult(x, 0, rnorm, True, history=history)
    for it in range(1, config.newton_max_iters + 1):
        jac = jacobian_fn(x)
        lin = linear_solver(jac, -r, x0=None, config=config)
        if not lin.converged and not (np.isfinite(lin.final_residual)
                                      and lin.final_residual <= 0.2 * rnorm):
            # An inexact step still advances Newton as long as the linear
            # residual dropped meaningfully; anything worse is a genuine
            # linear failure.
            return SolveResult(x, it, rnorm, False,
                               status=f"linear_{lin.status}", history=history)
        step = lin.x
        scale = 1.0
        for _ in range(5):
            x_trial = x + scale * step
            r_trial = np.asarray(residual_fn(x_trial))
            rn_trial = float(np.linalg.norm(r_trial))
            if rn_trial < rnorm or scale <= 1.0 / 16.0:
                break
            scale *= 0.5
        x, r, rnorm = x_trial, r_trial, rn_trial
        history.append(rnorm)
        if rnorm <= tol:
            return SolveResult(x, it, rnorm, True, history=history)
    return SolveResult(x, config.newton_max_iters, rnorm, False,
                       status="max_iterations", history=history)
