"""Bilevel problem contract and hypergradient estimators.

The outer objective is h(x) = F(x, y_x) where y_x minimizes a federated
inner objective G(x, y) = sum_i (N_i / N) g_i(x, y), each g_i held by one
client.  By the implicit function theorem the gradient of h is

    grad h(x) = grad_x F(x, y_x) - J_xy(x, y_x) @ v*,
    where  H_yy(x, y_x) @ v* = grad_y F(x, y_x),

with H_yy the inner Hessian in y and J_xy the (outer_dim x inner_dim) cross
derivative.  Everything here reduces to client-local Hessian-vector products,
so no client ever ships a d x d matrix.

Three estimators are provided:

* :func:`exact_hypergradient` — materializes the aggregated Hessian by d
  probes and solves directly.  Oracle for tests and diagnostics; its traffic
  is the d^2-per-client baseline the compressed paths are measured against.
* :func:`iterative_hypergradient` — compressed gradient descent on the
  quadratic q(v) = 0.5 v' H v - v' grad_y F.  Client HVP responses cross the
  wire as count-sketch tables or top-k records; error feedback accumulates
  whatever the compressor dropped and folds it into the next step.
* :func:`sketched_hypergradient` — one-shot: clients ship sketched Hessian
  blocks S2 H_m S1' and cross blocks J_m S1', the server solves the small
  least-squares system and assembles the estimate.  No per-iteration traffic.
"""

from __future__ import annotations

import abc
import math
import warnings
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.linalg

from fedbilevel.compression import (
    CountSketchTable,
    SparseEmbedding,
    sketch_table_shape,
    topk_compress,
)


class DefinitenessError(RuntimeError):
    """Inner Hessian failed its positive-definiteness check."""


class DivergenceError(RuntimeError):
    """Iterative solve left the trust region around the true solution."""


class ConditioningWarning(UserWarning):
    """Sketched system was rank-deficient; a minimum-norm solution was used."""


# Estimators charge transfers through whatever object exposes this method;
# fedsim.CommLedger is the real implementation.
class SupportsCharge(abc.ABC):
    @abc.abstractmethod
    def charge(self, direction: str, kind: str, scalars: int, nbytes: int | None = None) -> None: ...


class BilevelProblem(abc.ABC):
    """Federated bilevel problem: what clients and server can each evaluate.

    Concrete problems provide per-client first- and second-order oracles;
    aggregation helpers weight them by shard size.  Conventions:

    * x is the outer variable (dim ``outer_dim``), y the inner
      (dim ``inner_dim``); both flat float64 vectors.
    * ``client_hvp_yy(i, x, y, v)`` is the inner Hessian of g_i applied to a
      d-vector; ``client_hvp_xy(i, x, y, v)`` is the cross derivative
      d^2 g_i / dx dy applied to a d-vector, an outer_dim-vector.
    * ``mu_strong`` is the strong-convexity constant of the aggregate inner
      objective in y; every solver's step-size logic leans on it.
    """

    outer_dim: int
    inner_dim: int
    client_sizes: np.ndarray
    mu_strong: float

    @property
    def num_clients(self) -> int:
        return len(self.client_sizes)

    @property
    def total_samples(self) -> int:
        return int(np.sum(self.client_sizes))

    # -- per-client oracles ------------------------------------------------

    @abc.abstractmethod
    def outer_value(self, x: np.ndarray, y: np.ndarray) -> float: ...

    @abc.abstractmethod
    def outer_grad_x(self, x: np.ndarray, y: np.ndarray) -> np.ndarray: ...

    @abc.abstractmethod
    def outer_grad_y(self, x: np.ndarray, y: np.ndarray) -> np.ndarray: ...

    @abc.abstractmethod
    def client_inner_value(self, i: int, x: np.ndarray, y: np.ndarray) -> float: ...

    @abc.abstractmethod
    def client_inner_grad(self, i: int, x: np.ndarray, y: np.ndarray) -> np.ndarray: ...

    @abc.abstractmethod
    def client_hvp_yy(self, i: int, x: np.ndarray, y: np.ndarray, v: np.ndarray) -> np.ndarray: ...

    @abc.abstractmethod
    def client_hvp_xy(self, i: int, x: np.ndarray, y: np.ndarray, v: np.ndarray) -> np.ndarray: ...

    # -- aggregation over clients -------------------------------------------

    def client_weights(self, clients: np.ndarray | None = None) -> np.ndarray:
        """Shard sizes normalized over the given client subset (default all)."""
        sizes = self.client_sizes
        if clients is not None:
            sizes = sizes[np.asarray(clients)]
        return sizes / sizes.sum()

    def _aggregate(self, fn, clients: np.ndarray | None):
        idx = np.arange(self.num_clients) if clients is None else np.asarray(clients)
        weights = self.client_weights(idx)
        out = None
        for w, i in zip(weights, idx):
            term = fn(int(i))
            out = w * term if out is None else out + w * term
        return out

    def inner_value(self, x, y, clients=None) -> float:
        return float(self._aggregate(lambda i: self.client_inner_value(i, x, y), clients))

    def inner_grad(self, x, y, clients=None) -> np.ndarray:
        return self._aggregate(lambda i: self.client_inner_grad(i, x, y), clients)

    def hvp_yy(self, x, y, v, clients=None) -> np.ndarray:
        return self._aggregate(lambda i: self.client_hvp_yy(i, x, y, v), clients)

    def hvp_xy(self, x, y, v, clients=None) -> np.ndarray:
        return self._aggregate(lambda i: self.client_hvp_xy(i, x, y, v), clients)

    # -- defaults problems may override --------------------------------------

    def inner_smoothness(self) -> float | None:
        """Upper bound on the aggregate inner Hessian's spectral norm, if known."""
        return None

    def inner_solve(
        self,
        x: np.ndarray,
        tol: float = 1e-10,
        y0: np.ndarray | None = None,
        max_iter: int = 200_000,
    ) -> np.ndarray:
        """Solve the inner problem to gradient-norm tolerance.

        Default is full gradient descent at step 1/L; problems with better
        structure (linear solve, quasi-Newton) override this.
        """
        L = self.inner_smoothness()
        if L is None:
            raise NotImplementedError("inner_solve needs inner_smoothness or an override")
        y = np.zeros(self.inner_dim) if y0 is None else np.array(y0, dtype=np.float64)
        lr = 1.0 / L
        for _ in range(max_iter):
            g = self.inner_grad(x, y)
            if np.linalg.norm(g) <= tol:
                break
            y -= lr * g
        return y

    def project_outer(self, x: np.ndarray) -> np.ndarray:
        """Projection applied after each outer step (identity by default)."""
        return x

    def xy_payload_dim(self, i: int) -> int:
        """Scalars client i must ship for one cross-derivative product.

        Dense problems pay outer_dim; problems whose cross derivative has
        client-local support (sample reweighting) pay only their own rows.
        """
        return self.outer_dim

    def initial_outer(self) -> np.ndarray:
        return np.zeros(self.outer_dim)

    def round_metrics(self, x: np.ndarray, y: np.ndarray) -> dict[str, float]:
        """Extra per-round scalars for traces (accuracy, F1, ...)."""
        return {}

    def fingerprint(self) -> str:
        """Short content hash identifying the instance in run manifests."""
        import hashlib

        h = hashlib.sha256()
        h.update(type(self).__name__.encode())
        h.update(np.asarray([self.outer_dim, self.inner_dim]).tobytes())
        h.update(np.asarray(self.client_sizes).tobytes())
        return h.hexdigest()[:16]


@dataclass
class HypergradientEstimate:
    """Result of one hypergradient estimation call.

    ``value`` is grad_x F - J_xy @ v_solution aggregated with shard-size
    weights over the participating clients, so it can be recomputed from
    ``v_solution`` and checked.  ``comm_cost`` counts every scalar this call
    charged to the ledger (0 when no ledger was attached).
    """

    value: np.ndarray
    v_solution: np.ndarray
    comm_cost: int
    method: str  # "exact" | "iterative" | "non-iterative"


@dataclass
class ErrorAccumulator:
    """Residual a compressor dropped, carried to the next iteration.

    Exactly one representation is set: a full-space vector (top-k, owned by
    one client) or a sketch-space table (count-sketch, owned by the server).
    Zeroed at the start of each estimation call and never reset mid-call.
    """

    owner: str
    vector: np.ndarray | None = None
    table: CountSketchTable | None = None


def schedule_shift_bound(tau: float) -> float:
    """Smallest admissible shift for the decaying step schedule.

    tau is the compressor's contraction parameter (k/d for top-k, recovered
    fraction for sketches, 1 when uncompressed); smaller tau forces a later,
    gentler schedule so error feedback can keep up.
    """
    if not 0.0 < tau <= 1.0:
        raise ValueError(f"tau must lie in (0, 1], got {tau}")
    return max(1.0, (2.0 - tau) / tau * (math.sqrt(2.0 / (2.0 - tau)) + 1.0))


@dataclass
class IterSolverConfig:
    """Configuration for the compressed iterative hypergradient solve.

    Step sizes: ``step_mode="constant"`` uses ``step_size`` directly;
    ``"schedule"`` uses 8 / (mu * (i + shift)) at iteration i, with ``shift``
    defaulting to just above :func:`schedule_shift_bound` for the configured
    compressor.  Note the schedule needs shift >= 4 L / mu to avoid an early
    overshoot on stiff problems; pass ``shift`` explicitly in that case.

    Compressors: "none", "topk" (per-client full-space error feedback) or
    "sketch" (server-side sketch-space error feedback).  ``sketch_size`` is
    the per-message scalar budget; geometry is derived from it unless
    ``sketch_rows``/``sketch_cols`` pin it explicitly.  ``decompress_k``
    bounds how many coordinates each sketch read-back reconstructs (defaults
    to the column count).

    ``averaging="weighted"`` returns the (i + shift)^2-weighted average of
    the post-update iterates instead of the last one.
    """

    iterations: int
    step_mode: str = "schedule"
    step_size: float | None = None
    shift: float | None = None
    compressor: str = "none"
    topk: int | None = None
    sketch_size: int | None = None
    sketch_rows: int | None = None
    sketch_cols: int | None = None
    sketch_seed: int = 0
    sketch_delta: float = 0.05
    decompress_k: int | None = None
    error_feedback: bool = True
    averaging: str = "last"
    v0: np.ndarray | None = None

    def __post_init__(self) -> None:
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.step_mode not in ("constant", "schedule"):
            raise ValueError(f"unknown step_mode {self.step_mode!r}")
        if self.step_mode == "constant":
            if self.step_size is None or self.step_size <= 0:
                raise ValueError("constant step_mode requires a positive step_size")
        if self.compressor not in ("none", "topk", "sketch"):
            raise ValueError(f"unknown compressor {self.compressor!r}")
        if self.compressor == "topk" and (self.topk is None or self.topk < 1):
            raise ValueError("topk compressor requires topk >= 1")
        if self.compressor == "sketch":
            explicit = self.sketch_rows is not None and self.sketch_cols is not None
            if not explicit and self.sketch_size is None:
                raise ValueError("sketch compressor requires sketch_size or explicit rows/cols")
        if self.averaging not in ("last", "weighted"):
            raise ValueError(f"unknown averaging {self.averaging!r}")

    def contraction_fraction(self, dim: int) -> float:
        """tau for the configured compressor on a dim-vector."""
        if self.compressor == "none":
            return 1.0
        if self.compressor == "topk":
            return min(1.0, self.topk / dim)
        rows, cols = self.sketch_geometry(dim)
        k = self.decompress_k if self.decompress_k is not None else cols
        return min(1.0, k / dim)

    def sketch_geometry(self, dim: int) -> tuple[int, int]:
        if self.sketch_rows is not None and self.sketch_cols is not None:
            return self.sketch_rows, self.sketch_cols
        return sketch_table_shape(dim, self.sketch_size, self.sketch_delta)

    def resolve_shift(self, dim: int) -> float:
        bound = schedule_shift_bound(self.contraction_fraction(dim))
        if self.shift is None:
            return bound + 1.0
        if self.shift <= bound:
            raise ValueError(
                f"schedule shift {self.shift} must exceed the admissible bound {bound:.3f}"
            )
        return self.shift


@dataclass
class NonIterSolverConfig:
    """Configuration for the one-shot sketched hypergradient solve.

    ``rows1`` sketches the solution space (the solve returns a vector in the
    span of S1'), ``rows2`` the residual space; both embeddings are derived
    from their seeds, so clients regenerate them locally instead of
    receiving matrices.  ``identity=True`` replaces both sketches with the
    identity (requires rows1 == rows2 == inner dim); test-only mode that
    must reproduce the exact oracle.
    """

    rows1: int
    rows2: int
    seed1: int = 0
    seed2: int = 1
    rcond: float = 1e-10
    identity: bool = False

    def __post_init__(self) -> None:
        if self.rows1 < 1 or self.rows2 < 1:
            raise ValueError("rows1 and rows2 must be positive")


def _resolve_clients(problem: BilevelProblem, clients) -> np.ndarray:
    if clients is None:
        return np.arange(problem.num_clients)
    idx = np.sort(np.asarray(clients, dtype=np.int64))
    if idx.size == 0:
        raise ValueError("need at least one participating client")
    if idx[0] < 0 or idx[-1] >= problem.num_clients or np.any(np.diff(idx) == 0):
        raise ValueError("client indices must be unique and in range")
    return idx


class _ChargeMeter:
    """Wraps an optional ledger; counts scalars charged during one call."""

    def __init__(self, ledger: SupportsCharge | None) -> None:
        self.ledger = ledger
        self.scalars = 0

    def charge(self, direction: str, kind: str, scalars: int, nbytes: int | None = None) -> None:
        self.scalars += int(scalars)
        if self.ledger is not None:
            self.ledger.charge(direction, kind, scalars, nbytes)


def quadratic_grad(
    problem: BilevelProblem,
    x: np.ndarray,
    y: np.ndarray,
    v: np.ndarray,
    clients: np.ndarray | None = None,
) -> np.ndarray:
    """Gradient of q(v) = 0.5 v' H v - v' grad_y F at v.

    H is the inner Hessian aggregated over the given clients with
    shard-size weights; its minimizer is the vector the hypergradient
    correction needs.
    """
    idx = _resolve_clients(problem, clients)
    return problem.hvp_yy(x, y, v, idx) - problem.outer_grad_y(x, y)


def exact_hypergradient(
    problem: BilevelProblem,
    x: np.ndarray,
    y: np.ndarray,
    ledger: SupportsCharge | None = None,
) -> HypergradientEstimate:
    """Direct-solve oracle: materialize H by probes, factor, solve.

    All clients participate with global weights.  Cost is d Hessian-vector
    probes plus a dense Cholesky factorization, so this stays desk-scale
    only; it exists to pin down what the compressed estimators approximate.
    Raises :class:`DefinitenessError` when the factorization reports the
    aggregated Hessian is not positive definite.
    """
    d = problem.inner_dim
    meter = _ChargeMeter(ledger)
    gy = problem.outer_grad_y(x, y)
    gx = problem.outer_grad_x(x, y)

    hessian = np.empty((d, d))
    probe = np.zeros(d)
    for j in range(d):
        probe[j] = 1.0
        hessian[:, j] = problem.hvp_yy(x, y, probe)
        probe[j] = 0.0
    hessian = 0.5 * (hessian + hessian.T)  # probes are symmetric up to roundoff

    try:
        factor = scipy.linalg.cho_factor(hessian, lower=True)
    except np.linalg.LinAlgError as exc:
        raise DefinitenessError(f"inner Hessian is not positive definite: {exc}") from exc
    v = scipy.linalg.cho_solve(factor, gy)

    value = gx - problem.hvp_xy(x, y, v)
    for i in range(problem.num_clients):
        meter.charge("uplink", "hessian-dense", d * d)
        meter.charge("downlink", "v-broadcast", d)
        meter.charge("uplink", "xy-product", problem.xy_payload_dim(i))
    return HypergradientEstimate(value=value, v_solution=v, comm_cost=meter.scalars, method="exact")


def _finish_estimate(
    problem: BilevelProblem,
    x: np.ndarray,
    y: np.ndarray,
    v: np.ndarray,
    clients: np.ndarray,
    weights: np.ndarray,
    meter: _ChargeMeter,
    method: str,
) -> HypergradientEstimate:
    """Final leg shared by the iterative paths: ship v, collect xy products."""
    gx = problem.outer_grad_x(x, y)
    xy = np.zeros(problem.outer_dim)
    for w, m in zip(weights, clients):
        meter.charge("downlink", "v-broadcast", problem.inner_dim)
        xy += w * problem.client_hvp_xy(int(m), x, y, v)
        meter.charge("uplink", "xy-product", problem.xy_payload_dim(int(m)) )
    return HypergradientEstimate(
        value=gx - xy, v_solution=v, comm_cost=meter.scalars, method=method
    )


def iterative_hypergradient(
    problem: BilevelProblem,
    x: np.ndarray,
    y: np.ndarray,
    cfg: IterSolverConfig,
    clients: np.ndarray | None = None,
    ledger: SupportsCharge | None = None,
) -> HypergradientEstimate:
    """Compressed gradient descent on the correction system H v = grad_y F.

    Per iteration each participating client receives the current v, answers
    with its Hessian-vector product compressed per the config, and the
    server aggregates (weighted counter merge for sketches, sparse sum for
    top-k), applies error feedback, and steps.  grad_y F lives on the server
    and is never compressed.

    Aborts with :class:`DivergenceError` once ||v|| exceeds 1e6 times
    ||grad_y F|| / mu, which bounds ||v*|| with six orders of slack.
    """
    idx = _resolve_clients(problem, clients)
    weights = problem.client_weights(idx)
    d = problem.inner_dim
    meter = _ChargeMeter(ledger)

    gy = problem.outer_grad_y(x, y)
    guard = 1e6 * np.linalg.norm(gy) / problem.mu_strong

    if cfg.step_mode == "schedule":
        shift = cfg.resolve_shift(d)
        step = lambda i: 8.0 / (problem.mu_strong * (i + shift))
    else:
        shift = cfg.shift if cfg.shift is not None else 1.0
        step = lambda i: cfg.step_size

    if cfg.v0 is None:
        v = np.zeros(d)
    else:
        v = np.array(cfg.v0, dtype=np.float64)
        if v.shape != (d,):
            raise ValueError("v0 has the wrong dimension")

    if cfg.compressor == "topk":
        if cfg.topk > d:
            raise ValueError(f"topk={cfg.topk} exceeds inner dim {d}")
        client_err = [
            ErrorAccumulator(owner=f"client-{int(m)}", vector=np.zeros(d)) for m in idx
        ]
    elif cfg.compressor == "sketch":
        rows, cols = cfg.sketch_geometry(d)
        template = CountSketchTable(rows, cols, d, cfg.sketch_seed)
        k_dec = cfg.decompress_k if cfg.decompress_k is not None else cols
        server_err = ErrorAccumulator(owner="server", table=template.spawn_empty())

    avg_num = np.zeros(d)
    avg_den = 0.0

    for i in range(cfg.iterations):
        alpha = step(i)
        if cfg.compressor == "none":
            for m in idx:
                meter.charge("downlink", "v-broadcast", d)
                meter.charge("uplink", "hvp-dense", d)
            hv = problem.hvp_yy(x, y, v, idx)
            v = v - alpha * (hv - gy)

        elif cfg.compressor == "topk":
            delta = np.zeros(d)
            for w, m, err in zip(weights, idx, client_err):
                meter.charge("downlink", "v-broadcast", d)
                p = problem.client_hvp_yy(int(m), x, y, v)
                t = alpha * p + err.vector if cfg.error_feedback else alpha * p
                record = topk_compress(t, cfg.topk)
                if cfg.error_feedback:
                    err.vector = t
                    err.vector[record.indices] -= record.values
                meter.charge(
                    "uplink", "hvp-topk", 2 * len(record), record.serialized_nbytes
                )
                delta[record.indices] += w * record.values
            v = v - (delta - alpha * gy)

        else:  # sketch
            tables = []
            for m in idx:
                meter.charge("downlink", "v-broadcast", d)
                p = problem.client_hvp_yy(int(m), x, y, v)
                table = template.spawn_empty().insert(p)
                meter.charge("uplink", "hvp-sketch", table.size, table.serialized_nbytes)
                tables.append(table)
            merged = CountSketchTable.merge_weighted(tables, weights)
            work = merged.scaled(alpha)
            if cfg.error_feedback:
                work.add_scaled(server_err.table)
            record = work.decompress_topk(k_dec)
            delta = record.densify()
            v = v - (delta - alpha * gy)
            if cfg.error_feedback:
                work.add_scaled(template.spawn_empty().insert(delta), -1.0)
                server_err.table = work

        if np.linalg.norm(v) > guard:
            raise DivergenceError(
                f"iterate norm {np.linalg.norm(v):.3e} exceeded guard {guard:.3e} "
                f"at iteration {i}"
            )
        if cfg.averaging == "weighted":
            w_i = (i + 1 + shift) ** 2
            avg_num += w_i * v
            avg_den += w_i

    v_out = avg_num / avg_den if cfg.averaging == "weighted" else v
    return _finish_estimate(problem, x, y, v_out, idx, weights, meter, "iterative")


def sketched_hypergradient(
    problem: BilevelProblem,
    x: np.ndarray,
    y: np.ndarray,
    cfg: NonIterSolverConfig,
    clients: np.ndarray | None = None,
    ledger: SupportsCharge | None = None,
) -> HypergradientEstimate:
    """One-shot sketched solve of the correction system.

    Clients regenerate S1 (rows1 x d) and S2 (rows2 x d) from the shared
    seeds, answer rows1 Hessian probes along the columns of S1', and ship
    the rows2 x rows1 sketched Hessian block plus the cross-derivative
    block.  The server aggregates, solves

        min_w || S2 H S1' w - S2 grad_y F ||

    by column-pivoted least squares (minimum-norm on rank deficiency, with a
    :class:`ConditioningWarning`), and assembles the estimate from the
    aggregated cross blocks; only the rows1 coefficients ever travel back.
    """
    idx = _resolve_clients(problem, clients)
    weights = problem.client_weights(idx)
    d = problem.inner_dim
    meter = _ChargeMeter(ledger)

    gy = problem.outer_grad_y(x, y)
    gx = problem.outer_grad_x(x, y)

    if cfg.identity:
        if cfg.rows1 != d or cfg.rows2 != d:
            raise ValueError("identity sketch mode requires rows1 == rows2 == inner dim")
        probes = [None] * d  # unit vectors, built on the fly
        s1 = s2 = None
    else:
        s1 = SparseEmbedding.generate(cfg.rows1, d, cfg.seed1)
        s2 = SparseEmbedding.generate(cfg.rows2, d, cfg.seed2)
        probes = [s1.adjoint_basis_column(j) for j in range(cfg.rows1)]

    system = np.zeros((cfg.rows2, cfg.rows1))
    cross = np.zeros((problem.outer_dim, cfg.rows1))
    unit = np.zeros(d)
    for w, m in zip(weights, idx):
        m = int(m)
        block = np.empty((cfg.rows2, cfg.rows1))
        xy_block = np.empty((problem.outer_dim, cfg.rows1))
        for j in range(cfg.rows1):
            if cfg.identity:
                unit[j] = 1.0
                probe = unit
            else:
                probe = probes[j]
            hcol = problem.client_hvp_yy(m, x, y, probe)
            block[:, j] = hcol if cfg.identity else s2.apply(hcol)
            xy_block[:, j] = problem.client_hvp_xy(m, x, y, probe)
            if cfg.identity:
                unit[j] = 0.0
        system += w * block
        cross += w * xy_block
        meter.charge("uplink", "sketched-hessian", cfg.rows1 * cfg.rows2)
        meter.charge("uplink", "sketched-xy", problem.xy_payload_dim(m) * cfg.rows1)

    rhs = gy if cfg.identity else s2.apply(gy)
    omega, _, rank, _ = scipy.linalg.lstsq(system, rhs, cond=cfg.rcond, lapack_driver="gelsy")
    if rank < min(system.shape):
        warnings.warn(
            f"sketched system rank {rank} < {min(system.shape)}; "
            "minimum-norm solution used",
            ConditioningWarning,
            stacklevel=2,
        )
    meter.charge("downlink", "omega-broadcast", cfg.rows1)

    v = omega if cfg.identity else s1.apply_adjoint(omega)
    return HypergradientEstimate(
        value=gx - cross @ omega, v_solution=v, comm_cost=meter.scalars, method="non-iterative"
    )
