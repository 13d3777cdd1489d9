"""Shift-invert Krylov eigensolvers: Lanczos with locking and a block variant.

Only the action of a sparse symmetric matrix and a factorisation of
``A - sigma I`` are needed.  Converged Ritz vectors are locked and the
iteration restarts in their orthogonal complement, which recovers repeated
eigenvalues that a single Krylov sequence cannot see.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import NoConvergence


@dataclass
class Factorization:
    """Sparse LU of ``A - shift I`` with the inertia it reveals (``None`` if unknown)."""

    lu: object
    shift: float
    n_negative: int | None

    def solve(self, v):
        return self.lu.solve(v)


def factorize(A: sp.spmatrix, shift: float = 0.0) -> Factorization:
    """Factor ``A - shift I`` for symmetric ``A``.

    A symmetric ordering with diagonal pivots gives ``P (A - shift I) P^T = L D L^T``
    up to scaling, so the signs of ``U``'s diagonal count the eigenvalues below
    ``shift`` (Sylvester's law of inertia).  If SuperLU had to pivot off the
    diagonal, or the factors are inaccurate, fall back to partial pivoting and
    report unknown inertia.
    """
    n = A.shape[0]
    B = sp.csc_matrix(A - shift * sp.identity(n, format="csc"))
    try:
        lu = spla.splu(B, permc_spec="MMD_AT_PLUS_A", diag_pivot_thresh=0.0,
                       options=dict(SymmetricMode=True))
        if np.array_equal(lu.perm_r, lu.perm_c):
            x = np.random.default_rng(0).standard_normal(n)
            err = np.linalg.norm(B @ lu.solve(x) - x) / np.linalg.norm(x)
            if np.isfinite(err) and err < 1e-8:
                return Factorization(lu, shift, int(np.sum(lu.U.diagonal() < 0)))
    except RuntimeError:
        pass
    return Factorization(spla.splu(B), shift, None)


def count_below(A: sp.spmatrix, shift: float) -> int | None:
    """Number of eigenvalues of symmetric ``A`` strictly below ``shift`` (``None`` if undetermined)."""
    return factorize(A, shift).n_negative


def residual_floor(A: sp.spmatrix) -> float:
    """Smallest residual norm that rounding in ``A x`` lets a unit vector reach."""
    return 10.0 * np.finfo(float).eps * float(spla.norm(A, 1))


@dataclass
class LanczosResult:
    eigenvalues: np.ndarray
    eigenvectors: np.ndarray
    residuals: np.ndarray
    restarts: int
    matvecs: int


def _orthogonalize(v, basis, locked):
    # two passes of classical Gram-Schmidt
    for _ in range(2):
        if locked is not None and locked.shape[1]:
            v -= locked @ (locked.T @ v)
        if basis.shape[1]:
            v -= basis @ (basis.T @ v)
    return v


def _krylov(solve, n, m, start, locked):
    Q = np.zeros((n, m))
    alpha = np.zeros(m)
    beta = np.zeros(m)
    q = _orthogonalize(start.copy(), Q[:, :0], locked)
    q /= np.linalg.norm(q)
    k = 0
    for j in range(m):
        Q[:, j] = q
        w = solve(q)
        alpha[j] = q @ w
        w = _orthogonalize(w, Q[:, : j + 1], locked)
        b = np.linalg.norm(w)
        k = j + 1
        if j + 1 == m:
            beta[j] = b
            break
        if b < 1e-14 * max(1.0, abs(alpha[j])):
            beta[j] = 0.0
            break
        beta[j] = b
        q = w / b
    return Q[:, :k], alpha[:k], beta[:k]


def shift_invert_lanczos(A: sp.spmatrix, k: int, sigma: float, *, which: str = "above",
                         tol: float = 1e-10, max_restarts: int | None = None,
                         krylov_dim: int | None = None, seed: int = 0,
                         factor: Factorization | None = None) -> LanczosResult:
    """``k`` eigenpairs of symmetric ``A`` closest to ``sigma``.

    ``which="above"`` assumes ``sigma`` lies below the wanted part of the
    spectrum and returns the ``k`` smallest eigenvalues above it;
    ``which="nearest"`` returns those of smallest ``|lambda - sigma|``.
    Convergence is judged on the residual ``|A x - lambda x| <= tol (|lambda| + 1)``.
    """
    n = A.shape[0]
    if k < 1 or k > n:
        raise ValueError(f"need 1 <= k <= n, got k={k}, n={n}")
    A = sp.csc_matrix(A)
    if factor is None or factor.shift != sigma:
        factor = factorize(A, sigma)
    count = [0]
    floor = residual_floor(A)

    def solve(v):
        count[0] += 1
        return factor.solve(v)

    rng = np.random.default_rng(seed)
    m = krylov_dim or min(n, max(2 * k + 20, 40))
    max_restarts = max_restarts if max_restarts is not None else 4 * k + 10
    locked_vecs = np.zeros((n, 0))
    locked_vals: list[float] = []
    restarts = 0

    def key(theta):
        return -theta if which == "above" else -abs(theta)

    while True:
        avail = n - locked_vecs.shape[1]
        if avail <= 0:
            break
        mm = min(m, avail)
        start = rng.standard_normal(n)
        Q, alpha, beta = _krylov(solve, n, mm, start, locked_vecs)
        theta, S = sla.eigh_tridiagonal(alpha, beta[:-1]) if len(alpha) > 1 else (alpha.copy(), np.ones((1, 1)))
        order = sorted(range(len(theta)), key=lambda i: key(theta[i]))
        accepted = False
        for i in order:
            th = theta[i]
            if th == 0.0:
                continue
            x = Q @ S[:, i]
            x -= locked_vecs @ (locked_vecs.T @ x)
            nx = np.linalg.norm(x)
            if nx < 0.5:
                continue
            x /= nx
            lam = x @ (A @ x)
            res = np.linalg.norm(A @ x - lam * x)
            if res <= max(tol * (abs(lam) + 1.0), floor):
                locked_vecs = np.column_stack([locked_vecs, x])
                locked_vals.append(lam)
                accepted = True
            else:
                # unconverged Ritz value blocks acceptance of anything beyond it
                break
        restarts += 1
        if accepted:
            # stop once k are locked and the complement holds nothing closer
            if len(locked_vals) >= k:
                vals = np.array(locked_vals)
                worst = np.sort(_dist(vals, sigma, which))[k - 1]
                if locked_vecs.shape[1] >= n:
                    break
                if which == "above" and factor.n_negative == 0:
                    # inertia at the k-th value settles whether anything was skipped
                    cut = np.sort(vals)[k - 1]
                    cut += 1e-9 * (abs(cut) + 1.0)
                    below = count_below(A, cut)
                    if below is not None:
                        if below == int(np.sum(vals < cut)):
                            break
                        continue
                probe = _probe(solve, n, mm, rng, locked_vecs, sigma, which)
                if probe is None or probe > worst * (1 + 1e-10) + 1e-12:
                    break
        if restarts > max_restarts:
            raise NoConvergence(f"Lanczos: {len(locked_vals)} of {k} eigenpairs converged "
                                f"after {restarts} restarts", achieved=min(len(locked_vals), k))
        if not accepted:
            m = min(n, int(m * 1.5) + 1)

    vals = np.array(locked_vals)
    order = np.argsort(_dist(vals, sigma, which), kind="stable")[:k]
    vals = vals[order]
    vecs = locked_vecs[:, order]
    o2 = np.argsort(vals, kind="stable")
    vals, vecs = vals[o2], vecs[:, o2]
    res = np.array([np.linalg.norm(A @ vecs[:, i] - vals[i] * vecs[:, i]) for i in range(len(vals))])
    return LanczosResult(vals, vecs, res, restarts, count[0])


def _dist(vals, sigma, which):
    return vals - sigma if which == "above" else np.abs(vals - sigma)


def _probe(solve, n, m, rng, locked, sigma, which):
    """Best Ritz estimate of the next eigenvalue in the unlocked complement."""
    if n - locked.shape[1] <= 0:
        return None
    Q, alpha, beta = _krylov(solve, n, min(m, n - locked.shape[1]), rng.standard_normal(n), locked)
    theta = sla.eigh_tridiagonal(alpha, beta[:-1], eigvals_only=True) if len(alpha) > 1 else alpha
    if which == "above":
        th = theta.max()
        if th <= 0:
            return np.inf
        return 1.0 / th
    th = np.abs(theta).max()
    return np.inf if th == 0 else 1.0 / th


def block_shift_invert(A: sp.spmatrix, k: int, factor: Factorization, *, which: str = "above",
                       tol: float = 1e-10, block: int | None = None, max_dim: int | None = None,
                       seed: int = 0) -> LanczosResult:
    """Block Krylov space of ``(A - sigma I)^{-1}`` with Rayleigh-Ritz on ``A`` itself.

    A random block captures every direction of a (near-)degenerate cluster at
    once, and the Ritz step on ``A`` separates eigenvalues inside a converged
    cluster regardless of how close they are.  ``which`` is ``"above"`` (the
    ``k`` smallest, for ``sigma`` below the spectrum) or ``"nearest"``.
    """
    A = sp.csr_matrix(A)
    n = A.shape[0]
    if k < 1 or k > n:
        raise ValueError(f"need 1 <= k <= n, got k={k}, n={n}")
    sigma = factor.shift
    floor = residual_floor(A)
    b = min(n, block or k + 4)
    max_dim = min(n, max_dim or max(40 * b, 400))
    rng = np.random.default_rng(seed)
    Q = np.linalg.qr(rng.standard_normal((n, b)))[0]
    AQ = A @ Q
    V = Q
    solves = 0
    steps = 0
    while True:
        steps += 1
        H = Q.T @ AQ
        theta, S = np.linalg.eigh(0.5 * (H + H.T))
        if which == "above":
            sel = np.argsort(theta, kind="stable")[:k]
        else:
            sel = np.argsort(np.abs(theta - sigma), kind="stable")[:k]
        X = Q @ S[:, sel]
        lam = theta[sel]
        R = AQ @ S[:, sel] - X * lam
        res = np.linalg.norm(R, axis=0)
        ok = res <= np.maximum(tol * (np.abs(lam) + 1.0), floor)
        if np.all(ok) or Q.shape[1] >= n:
            break
        if Q.shape[1] + b > max_dim:
            raise NoConvergence(f"block Krylov: {int(ok.sum())} of {k} eigenpairs converged in "
                                f"dimension {Q.shape[1]}", achieved=int(ok.sum()))
        W = np.column_stack([factor.solve(V[:, j]) for j in range(V.shape[1])])
        solves += V.shape[1]
        scale = np.linalg.norm(W, axis=0).max()
        for _ in range(2):
            # project and orthonormalise twice: one pass loses orthogonality to Q
            # when the new directions are small
            for _ in range(2):
                W -= Q @ (Q.T @ W)
            W, r = np.linalg.qr(W)
            keep = np.abs(np.diag(r)) > 1e-10 * scale
            W = W[:, keep]
            scale = 1.0
        if W.shape[1] == 0:
            # invariant subspace reached; restart with a fresh random block
            W = rng.standard_normal((n, b))
            for _ in range(2):
                W -= Q @ (Q.T @ W)
            W = np.linalg.qr(W)[0]
        V = W
        Q = np.column_stack([Q, V])
        AQ = np.column_stack([AQ, A @ V])
    order = np.argsort(lam, kind="stable")
    return LanczosResult(lam[order], X[:, order], res[order], steps, solves)


def smallest_eigenpairs(A: sp.spmatrix, k: int, *, tol: float = 1e-10, seed: int = 0) -> LanczosResult:
    """``k`` smallest eigenpairs of symmetric ``A``.

    A Gershgorin bound gives a safe first shift; a short shift-invert Krylov run
    from there estimates ``lambda_1``, and the working shift is placed just below
    that estimate, confirmed by inertia to lie under the whole spectrum.  The
    block Krylov result is then checked for skipped eigenvalues by inertia at
    the ``k``-th value.
    """
    A = sp.csc_matrix(A)
    n = A.shape[0]
    d = A.diagonal()
    off = np.asarray(abs(A).sum(axis=1)).ravel() - np.abs(d)
    lb = float(np.min(d - off))
    lb -= 1e-3 * (1.0 + abs(lb))
    first = factorize(A, lb)
    rng = np.random.default_rng(seed)
    _, alpha, beta = _krylov(first.solve, n, min(n, 24), rng.standard_normal(n), None)
    theta = sla.eigh_tridiagonal(alpha, beta[:-1], eigvals_only=True) if len(alpha) > 1 else alpha
    est = lb + 1.0 / float(np.max(theta))  # an upper bound for lambda_1
    delta = 0.05 * (est - lb) + 1e-8 * (1.0 + abs(est))
    factor = first
    for _ in range(8):
        sigma = est - delta
        if sigma <= lb:
            break
        trial = factorize(A, sigma)
        if trial.n_negative == 0:
            factor = trial
            break
        delta *= 4.0
    block = None
    for attempt in range(4):
        res = block_shift_invert(A, k, factor, which="above", tol=tol, seed=seed + attempt, block=block)
        if k == n:
            return res
        cut = float(res.eigenvalues[-1])
        cut += 1e-9 * (abs(cut) + 1.0)
        below = count_below(A, cut)
        if below is None or below <= k:
            return res
        # more eigenvalues below the k-th Ritz value than found: widen the block
        block = min(n, 2 * (block or k + 4) + (below - k))
    raise NoConvergence(f"{below} eigenvalues lie below the computed k-th value {cut:.6g}", achieved=k)
