"""Synthetic quadratic bilevel instances with known solutions.

Client i holds g_i(x, y) = 0.5 y' A_i y - y'(B_i x + c_i) with A_i symmetric
positive definite, so the aggregate inner problem is a linear system and
every quantity the estimators approximate (y_x, v*, grad h) has a closed
form a test can compute independently.  The outer objective is
F(x, y) = 0.5 ||y - target||^2 + 0.5 outer_reg ||x||^2; with outer_reg > 0
the reduced objective h is strongly convex, which the convergence fixtures
rely on.
"""

from __future__ import annotations

import hashlib

import numpy as np

from fedbilevel.bilevel import BilevelProblem


class QuadraticBilevelProblem(BilevelProblem):
    """See module docstring; all client blocks are dense and explicit."""

    def __init__(
        self,
        hessians: np.ndarray,
        couplings: np.ndarray,
        offsets: np.ndarray,
        target: np.ndarray,
        outer_reg: float = 0.0,
        client_sizes: np.ndarray | None = None,
    ) -> None:
        hessians = np.asarray(hessians, dtype=np.float64)
        couplings = np.asarray(couplings, dtype=np.float64)
        offsets = np.asarray(offsets, dtype=np.float64)
        target = np.asarray(target, dtype=np.float64)
        m, d, d2 = hessians.shape
        if d != d2:
            raise ValueError("client Hessians must be square")
        if couplings.shape[:2] != (m, d) or offsets.shape != (m, d) or target.shape != (d,):
            raise ValueError("inconsistent block shapes")
        self.hessians = hessians
        self.couplings = couplings
        self.offsets = offsets
        self.target = target
        self.outer_reg = float(outer_reg)
        self.outer_dim = couplings.shape[2]
        self.inner_dim = d
        if client_sizes is None:
            client_sizes = np.full(m, 32)
        self.client_sizes = np.asarray(client_sizes, dtype=np.int64)
        if len(self.client_sizes) != m:
            raise ValueError("one shard size per client required")

        w = self.client_weights()
        self.agg_hessian = np.einsum("m,mij->ij", w, hessians)
        self.agg_coupling = np.einsum("m,mij->ij", w, couplings)
        self.agg_offset = w @ offsets
        eigs = np.linalg.eigvalsh(self.agg_hessian)
        if eigs[0] <= 0:
            raise ValueError("aggregate inner Hessian must be positive definite")
        self.mu_strong = float(eigs[0])
        self._smoothness = float(eigs[-1])

    # -- outer objective -----------------------------------------------------

    def outer_value(self, x, y) -> float:
        r = y - self.target
        return 0.5 * float(r @ r) + 0.5 * self.outer_reg * float(x @ x)

    def outer_grad_x(self, x, y):
        return self.outer_reg * x

    def outer_grad_y(self, x, y):
        return y - self.target

    # -- client blocks --------------------------------------------------------

    def client_inner_value(self, i, x, y) -> float:
        drive = self.couplings[i] @ x + self.offsets[i]
        return 0.5 * float(y @ (self.hessians[i] @ y)) - float(y @ drive)

    def client_inner_grad(self, i, x, y):
        return self.hessians[i] @ y - (self.couplings[i] @ x + self.offsets[i])

    def client_hvp_yy(self, i, x, y, v):
        return self.hessians[i] @ v

    def client_hvp_xy(self, i, x, y, v):
        # d(grad_x g_i)/dy applied to v: grad_x g_i = -B_i' y.
        return -self.couplings[i].T @ v

    # -- structure the solvers can exploit ------------------------------------

    def inner_smoothness(self) -> float:
        return self._smoothness

    def inner_solve(self, x, tol=1e-10, y0=None, max_iter=0):
        return np.linalg.solve(self.agg_hessian, self.agg_coupling @ x + self.agg_offset)

    def outer_smoothness(self, power_iterations: int = 200) -> float:
        """Spectral norm of the reduced objective's Hessian.

        Estimated by power iteration on (A^-1 B)' (A^-1 B); deterministic
        start vector so runs agree bit for bit.
        """
        reduced = np.linalg.solve(self.agg_hessian, self.agg_coupling)
        gram = reduced.T @ reduced
        u = np.full(self.outer_dim, 1.0 / np.sqrt(self.outer_dim))
        sigma = 0.0
        for _ in range(power_iterations):
            w = gram @ u
            sigma = float(np.linalg.norm(w))
            if sigma == 0.0:
                break
            u = w / sigma
        return sigma + self.outer_reg

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for arr in (self.hessians, self.couplings, self.offsets, self.target):
            h.update(np.ascontiguousarray(arr).tobytes())
        h.update(np.float64(self.outer_reg).tobytes())
        h.update(self.client_sizes.tobytes())
        return h.hexdigest()[:16]


def _spd_matrix(gen: np.random.Generator, eigenvalues: np.ndarray, rotate: bool) -> np.ndarray:
    d = len(eigenvalues)
    if not rotate:
        return np.diag(eigenvalues)
    q, _ = np.linalg.qr(gen.standard_normal((d, d)))
    return (q * eigenvalues) @ q.T


def stable_rank_spectrum(dim: int, rank: int, head: float = 10.0, tail: float = 0.1) -> np.ndarray:
    """Eigenvalues with ``rank`` dominant values; stable rank ~= rank.

    sum(eig^2) / max(eig)^2 = rank + (dim - rank) (tail/head)^2, so with the
    default 100x head/tail ratio the correction is negligible.
    """
    if not 1 <= rank <= dim:
        raise ValueError("rank must lie in [1, dim]")
    eigs = np.full(dim, tail)
    eigs[:rank] = head
    return eigs


def make_quadratic_problem(
    outer_dim: int,
    inner_dim: int,
    clients: int,
    seed: int,
    eig_range: tuple[float, float] = (1.0, 10.0),
    eigenvalues: np.ndarray | None = None,
    rotate: bool = True,
    shared_hessian: bool = False,
    coupling_scale: float = 1.0,
    offset_scale: float = 1.0,
    outer_reg: float = 0.0,
    client_sizes: np.ndarray | None = None,
) -> QuadraticBilevelProblem:
    """Random instance generator; fully determined by its arguments.

    ``eigenvalues`` pins every client's spectrum (else drawn uniformly from
    ``eig_range``); ``rotate=False`` keeps Hessians diagonal, which makes
    identity-Hessian fixtures exact.  ``shared_hessian`` gives every client
    the same Hessian (curvature homogeneity) while couplings and offsets
    still differ.
    """
    gen = np.random.Generator(np.random.Philox(key=np.array([seed, 0x51AD], dtype=np.uint64)))
    hessians = np.empty((clients, inner_dim, inner_dim))
    shared = None
    for i in range(clients):
        if shared_hessian and shared is not None:
            hessians[i] = shared
            continue
        if eigenvalues is not None:
            eigs = np.asarray(eigenvalues, dtype=np.float64)
        else:
            eigs = gen.uniform(eig_range[0], eig_range[1], size=inner_dim)
        hessians[i] = _spd_matrix(gen, eigs, rotate)
        if shared_hessian:
            shared = hessians[i]
    couplings = coupling_scale * gen.standard_normal((clients, inner_dim, outer_dim)) / np.sqrt(inner_dim)
    offsets = offset_scale * gen.standard_normal((clients, inner_dim))
    target = gen.standard_normal(inner_dim)
    return QuadraticBilevelProblem(
        hessians, couplings, offsets, target,
        outer_reg=outer_reg, client_sizes=client_sizes,
    )
