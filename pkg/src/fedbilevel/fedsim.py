"""Federated training loop, communication ledger and run traces.

One outer round: sample S clients, broadcast the state, let each run T
local SGD steps on its inner shard, aggregate the inner variable by
shard-size weights, estimate the hypergradient with the configured
estimator (sharing the round's client sample unless told to resample),
step the outer variable, project.  Every simulated transfer is charged to a
:class:`CommLedger` through its single ``charge`` method, so traffic totals
are exact by construction rather than estimated after the fact.

Everything is sequential and seeded: identical (problem, config) pairs
produce bitwise-identical traces and CSV exports.
"""

from __future__ import annotations

import dataclasses
import json
import time
import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from fedbilevel.bilevel import (
    BilevelProblem,
    DivergenceError,
    HypergradientEstimate,
    IterSolverConfig,
    NonIterSolverConfig,
    exact_hypergradient,
    iterative_hypergradient,
    sketched_hypergradient,
)


class NumericError(RuntimeError):
    """A client produced a non-finite value mid-round."""


@dataclass
class LedgerRecord:
    round: int
    direction: str  # "uplink" | "downlink"
    kind: str
    scalars: int
    nbytes: int


class CommLedger:
    """Append-only account of every simulated transfer.

    ``direction`` is relative to the server (uplink = client to server).
    ``scalars`` counts transmitted numbers; ``nbytes`` defaults to eight per
    scalar and is overridden by callers that serialize an actual record.
    The ``round`` attribute is stamped onto records by the training loop.
    """

    def __init__(self) -> None:
        self.records: list[LedgerRecord] = []
        self.round = 0
        self._uplink = 0
        self._downlink = 0
        self._nbytes = 0

    def charge(self, direction: str, kind: str, scalars: int, nbytes: int | None = None) -> None:
        if direction not in ("uplink", "downlink"):
            raise ValueError(f"unknown direction {direction!r}")
        if scalars < 0:
            raise ValueError("scalar count must be non-negative")
        nbytes = 8 * scalars if nbytes is None else int(nbytes)
        self.records.append(LedgerRecord(self.round, direction, kind, int(scalars), nbytes))
        if direction == "uplink":
            self._uplink += int(scalars)
        else:
            self._downlink += int(scalars)
        self._nbytes += nbytes

    @property
    def uplink_scalars(self) -> int:
        return self._uplink

    @property
    def downlink_scalars(self) -> int:
        return self._downlink

    @property
    def total_bytes(self) -> int:
        return self._nbytes

    def scalars(self, direction: str | None = None, kind: str | None = None,
                round_index: int | None = None) -> int:
        """Sum of scalar counts over records matching every given filter."""
        total = 0
        for rec in self.records:
            if direction is not None and rec.direction != direction:
                continue
            if kind is not None and rec.kind != kind:
                continue
            if round_index is not None and rec.round != round_index:
                continue
            total += rec.scalars
        return total

    def to_csv(self, path) -> None:
        import csv

        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["round", "direction", "kind", "scalars", "bytes"])
            for rec in self.records:
                writer.writerow([rec.round, rec.direction, rec.kind, rec.scalars, rec.nbytes])


@dataclass
class LedgerReport:
    """Totals plus the reference points compressed traffic is judged against.

    ``dense_hessian_baseline`` is what shipping full d x d client Hessians
    every round would cost; ``fedavg_baseline`` is plain model-update uplink
    traffic.  Top-k records count two scalars per surviving entry (index and
    value); sketch tables count rows*cols.
    """

    rounds: int
    uplink_scalars: int
    downlink_scalars: int
    total_bytes: int
    per_round: list[tuple[int, int, int]]  # (round, uplink, downlink)
    dense_hessian_baseline: int
    fedavg_baseline: int

    @property
    def ratio_vs_dense_hessian(self) -> float:
        return self.uplink_scalars / self.dense_hessian_baseline

    @property
    def ratio_vs_fedavg(self) -> float:
        return self.uplink_scalars / self.fedavg_baseline

    def to_dict(self) -> dict:
        return {
            "rounds": self.rounds,
            "uplink_scalars": self.uplink_scalars,
            "downlink_scalars": self.downlink_scalars,
            "total_bytes": self.total_bytes,
            "dense_hessian_baseline": self.dense_hessian_baseline,
            "fedavg_baseline": self.fedavg_baseline,
            "ratio_vs_dense_hessian": self.ratio_vs_dense_hessian,
            "ratio_vs_fedavg": self.ratio_vs_fedavg,
        }


def ledger_report(ledger: CommLedger, inner_dim: int, clients_per_round: int,
                  rounds: int) -> LedgerReport:
    """Summarize a ledger against the dense-Hessian and FedAvg baselines."""
    per_round: dict[int, list[int]] = {}
    for rec in ledger.records:
        up, down = per_round.setdefault(rec.round, [0, 0])
        if rec.direction == "uplink":
            per_round[rec.round][0] += rec.scalars
        else:
            per_round[rec.round][1] += rec.scalars
    rows = [(k, v[0], v[1]) for k, v in sorted(per_round.items())]
    return LedgerReport(
        rounds=rounds,
        uplink_scalars=ledger.uplink_scalars,
        downlink_scalars=ledger.downlink_scalars,
        total_bytes=ledger.total_bytes,
        per_round=rows,
        dense_hessian_baseline=rounds * clients_per_round * inner_dim * inner_dim,
        fedavg_baseline=rounds * clients_per_round * inner_dim,
    )


@dataclass
class RoundConfig:
    """Knobs of the outer loop.

    ``estimator`` picks the hypergradient path ("exact", "iterative",
    "non-iterative"); the matching sub-config must be present.  Sketch and
    embedding seeds inside those sub-configs are re-derived per round from
    ``seed`` so compression noise is independent across rounds.
    ``inner_mode="solve"`` replaces local SGD with a server-side solve to
    tolerance (oracle comparisons); the default is T local SGD steps.
    """

    rounds: int
    clients_per_round: int
    local_steps: int = 5
    inner_lr: float = 0.01
    outer_lr: float = 0.1
    estimator: str = "exact"
    iter_cfg: IterSolverConfig | None = None
    noniter_cfg: NonIterSolverConfig | None = None
    seed: int = 0
    inner_mode: str = "local-sgd"
    inner_solve_tol: float = 1e-10
    resample_for_estimator: bool = False
    track_grad_norm: bool = False

    def validate(self, problem: BilevelProblem) -> None:
        if self.rounds < 1:
            raise ValueError("rounds must be >= 1")
        if not 1 <= self.clients_per_round <= problem.num_clients:
            raise ValueError(
                f"clients_per_round must lie in [1, {problem.num_clients}]"
            )
        if self.local_steps < 1:
            raise ValueError("local_steps must be >= 1")
        if self.inner_lr <= 0 or self.outer_lr < 0:
            raise ValueError("learning rates must be positive")
        if self.estimator not in ("exact", "iterative", "non-iterative"):
            raise ValueError(f"unknown estimator {self.estimator!r}")
        if self.estimator == "iterative" and self.iter_cfg is None:
            raise ValueError("iterative estimator requires iter_cfg")
        if self.estimator == "non-iterative" and self.noniter_cfg is None:
            raise ValueError("non-iterative estimator requires noniter_cfg")
        if self.inner_mode not in ("local-sgd", "solve"):
            raise ValueError(f"unknown inner_mode {self.inner_mode!r}")


@dataclass
class TraceRow:
    k: int
    x: np.ndarray
    outer_loss: float
    grad_norm_sq: float  # nan unless diagnostics enabled
    uplink_scalars: int
    downlink_scalars: int
    cumulative_bytes: int
    wall_clock: float
    metrics: dict[str, float] = field(default_factory=dict)


class TrainTrace:
    """Per-round history of a run: K+1 rows including the initial state."""

    def __init__(self, config_summary: dict, problem_fingerprint: str) -> None:
        self.rows: list[TraceRow] = []
        self.config_summary = config_summary
        self.problem_fingerprint = problem_fingerprint
        self.ledger = CommLedger()
        self.diverged_at: int | None = None

    @property
    def final_x(self) -> np.ndarray:
        return self.rows[-1].x

    def to_csv(self, path) -> None:
        """Fixed schema: k, outer_loss, grad_norm_sq, uplink_scalars,
        downlink_scalars, cumulative_bytes.  Missing diagnostics are written
        as empty fields; floats use shortest round-trip formatting so
        identical runs export identical bytes."""
        import csv

        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(
                ["k", "outer_loss", "grad_norm_sq", "uplink_scalars",
                 "downlink_scalars", "cumulative_bytes"]
            )
            for row in self.rows:
                writer.writerow([
                    row.k,
                    _fmt(row.outer_loss),
                    _fmt(row.grad_norm_sq),
                    row.uplink_scalars,
                    row.downlink_scalars,
                    row.cumulative_bytes,
                ])


def _fmt(value: float) -> str:
    return "" if value != value else repr(float(value))  # NaN -> empty field


def local_sgd(
    problem: BilevelProblem,
    client: int,
    x: np.ndarray,
    y0: np.ndarray,
    steps: int,
    lr: float,
) -> np.ndarray:
    """T full-batch gradient steps on one client's inner shard.

    Warns (doesn't abort) when the step exceeds the 2/L stability limit for
    the problem's declared smoothness; raises :class:`NumericError` on the
    first non-finite gradient.
    """
    L = problem.inner_smoothness()
    if L is not None and lr >= 2.0 / L:
        warnings.warn(
            f"inner step {lr} >= 2/L = {2.0 / L:.4g}; local SGD may diverge",
            stacklevel=2,
        )
    y = np.array(y0, dtype=np.float64)
    for _ in range(steps):
        g = problem.client_inner_grad(client, x, y)
        if not np.all(np.isfinite(g)):
            raise NumericError(f"client {client} produced a non-finite inner gradient")
        y -= lr * g
    return y


def aggregate_inner(
    y: np.ndarray, updates: list[np.ndarray], sizes: np.ndarray
) -> np.ndarray:
    """Shard-size-weighted merge of client results around the server state."""
    if len(updates) != len(sizes):
        raise ValueError("one shard size per update required")
    w = np.asarray(sizes, dtype=np.float64)
    w = w / w.sum()
    out = np.array(y, dtype=np.float64)
    for wi, yi in zip(w, updates):
        out += wi * (yi - y)
    return out


def _estimate(
    problem: BilevelProblem,
    x: np.ndarray,
    y: np.ndarray,
    cfg: RoundConfig,
    sampled: np.ndarray,
    ledger: CommLedger,
    round_seed: np.random.SeedSequence,
) -> HypergradientEstimate:
    if cfg.estimator == "exact":
        return exact_hypergradient(problem, x, y, ledger)
    if cfg.estimator == "iterative":
        icfg = cfg.iter_cfg
        if icfg.compressor == "sketch":
            seed = int(round_seed.generate_state(1, dtype=np.uint64)[0])
            icfg = replace(icfg, sketch_seed=seed)
        return iterative_hypergradient(problem, x, y, icfg, sampled, ledger)
    seeds = round_seed.generate_state(2, dtype=np.uint64)
    ncfg = cfg.noniter_cfg
    if not ncfg.identity:
        ncfg = replace(ncfg, seed1=int(seeds[0]), seed2=int(seeds[1]))
    return sketched_hypergradient(problem, x, y, ncfg, sampled, ledger)


def run_federated_bilevel(
    problem: BilevelProblem,
    cfg: RoundConfig,
    x0: np.ndarray | None = None,
    y0: np.ndarray | None = None,
) -> TrainTrace:
    """Outer training loop; returns the full trace.

    Client sampling is uniform without replacement each round; the
    hypergradient estimator reuses the round's sample unless
    ``resample_for_estimator`` asks for an independent draw.  The trace's
    ``outer_loss`` column is F at the current iterate pair, which equals
    h(x_k) exactly when ``inner_mode="solve"``.  A :class:`DivergenceError`
    raised by the estimator is re-raised with the round index attached and
    the partial trace stored on the exception (``.trace``).
    """
    cfg.validate(problem)
    x = problem.initial_outer() if x0 is None else np.array(x0, dtype=np.float64)
    y = np.zeros(problem.inner_dim) if y0 is None else np.array(y0, dtype=np.float64)
    if x.shape != (problem.outer_dim,) or y.shape != (problem.inner_dim,):
        raise ValueError("initial state has the wrong dimensions")

    root = np.random.SeedSequence(cfg.seed)
    sample_ss, est_root = root.spawn(2)
    sampler = np.random.Generator(np.random.Philox(sample_ss))
    round_seeds = est_root.spawn(cfg.rounds)

    trace = TrainTrace(_config_summary(cfg), problem.fingerprint())
    ledger = trace.ledger
    d, l = problem.inner_dim, problem.outer_dim

    def record(k: int, x_k: np.ndarray, y_k: np.ndarray) -> None:
        gsq = float("nan")
        if cfg.track_grad_norm:
            y_star = problem.inner_solve(x_k, tol=cfg.inner_solve_tol, y0=y_k)
            g = exact_hypergradient(problem, x_k, y_star).value
            gsq = float(g @ g)
        trace.rows.append(TraceRow(
            k=k,
            x=x_k.copy(),
            outer_loss=problem.outer_value(x_k, y_k),
            grad_norm_sq=gsq,
            uplink_scalars=ledger.uplink_scalars,
            downlink_scalars=ledger.downlink_scalars,
            cumulative_bytes=ledger.total_bytes,
            wall_clock=time.monotonic(),
            metrics=problem.round_metrics(x_k, y_k),
        ))

    record(0, x, y)
    for k in range(cfg.rounds):
        ledger.round = k
        sampled = np.sort(sampler.choice(problem.num_clients, size=cfg.clients_per_round,
                                         replace=False))
        try:
            if cfg.inner_mode == "solve":
                y = problem.inner_solve(x, tol=cfg.inner_solve_tol, y0=y)
            else:
                updates = []
                for m in sampled:
                    ledger.charge("downlink", "state-broadcast", l + d)
                    updates.append(local_sgd(problem, int(m), x, y, cfg.local_steps,
                                             cfg.inner_lr))
                    ledger.charge("uplink", "inner-update", d)
                y = aggregate_inner(y, updates, problem.client_sizes[sampled])

            est_clients = sampled
            if cfg.resample_for_estimator:
                est_clients = np.sort(sampler.choice(
                    problem.num_clients, size=cfg.clients_per_round, replace=False))
            est = _estimate(problem, x, y, cfg, est_clients, ledger, round_seeds[k])
        except DivergenceError as exc:
            trace.diverged_at = k
            err = DivergenceError(f"round {k}: {exc}")
            err.trace = trace
            raise err from exc
        except NumericError as exc:
            err = NumericError(f"round {k}: {exc}")
            err.trace = trace
            raise err from exc

        x = problem.project_outer(x - cfg.outer_lr * est.value)
        record(k + 1, x, y)
    return trace


def run_fedavg(
    problem: BilevelProblem,
    cfg: RoundConfig,
    x_fixed: np.ndarray | None = None,
    y0: np.ndarray | None = None,
) -> TrainTrace:
    """Single-level baseline: FedAvg on the inner variable only.

    The outer variable stays frozen (default: the problem's initial outer
    state, i.e. uniform sample weights for reweighting problems), so this is
    plain federated training of the model the bilevel runs are compared
    against.  Reuses local SGD and the shard-size aggregation rule; one
    client with one local step reduces to centralized gradient descent.
    """
    cfg.validate(problem)
    x = problem.initial_outer() if x_fixed is None else np.array(x_fixed, dtype=np.float64)
    y = np.zeros(problem.inner_dim) if y0 is None else np.array(y0, dtype=np.float64)

    sampler = np.random.Generator(np.random.Philox(np.random.SeedSequence(cfg.seed)))
    trace = TrainTrace(_config_summary(cfg) | {"baseline": "fedavg"}, problem.fingerprint())
    ledger = trace.ledger
    d = problem.inner_dim

    def record(k: int, y_k: np.ndarray) -> None:
        trace.rows.append(TraceRow(
            k=k,
            x=x.copy(),
            outer_loss=problem.outer_value(x, y_k),
            grad_norm_sq=float("nan"),
            uplink_scalars=ledger.uplink_scalars,
            downlink_scalars=ledger.downlink_scalars,
            cumulative_bytes=ledger.total_bytes,
            wall_clock=time.monotonic(),
            metrics=problem.round_metrics(x, y_k),
        ))

    record(0, y)
    for k in range(cfg.rounds):
        ledger.round = k
        sampled = np.sort(sampler.choice(problem.num_clients, size=cfg.clients_per_round,
                                         replace=False))
        updates = []
        for m in sampled:
            ledger.charge("downlink", "state-broadcast", d)
            updates.append(local_sgd(problem, int(m), x, y, cfg.local_steps, cfg.inner_lr))
            ledger.charge("uplink", "inner-update", d)
        y = aggregate_inner(y, updates, problem.client_sizes[sampled])
        record(k + 1, y)
    return trace


def _config_summary(cfg: RoundConfig) -> dict:
    out = {}
    for f in dataclasses.fields(cfg):
        value = getattr(cfg, f.name)
        if dataclasses.is_dataclass(value):
            sub = {}
            for g in dataclasses.fields(value):
                v = getattr(value, g.name)
                if isinstance(v, np.ndarray):
                    v = v.tolist()
                sub[g.name] = v
            value = sub
        out[f.name] = value
    return out
