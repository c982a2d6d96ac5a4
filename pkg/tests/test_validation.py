"""Sweep plumbing: rate-to-geometry mapping, leg configs, check reporting.

The statistical checks themselves run in the acceptance module; here the
deterministic wiring around them is pinned down.
"""

import numpy as np
import pytest

from fedbilevel.bilevel import IterSolverConfig, NonIterSolverConfig
from fedbilevel.fedsim import RoundConfig
from fedbilevel.validation import (
    CheckResult,
    SweepLeg,
    _leg_config,
    iterative_sketch_geometry,
    noniter_sketch_rows,
    run_compression_sweep,
    run_suite,
    run_sweep_leg,
)
from fedbilevel.quadratic import make_quadratic_problem


def test_iterative_geometry_shrinks_with_the_rate():
    assert iterative_sketch_geometry(2000, 20) == (11, 9)
    assert iterative_sketch_geometry(2000, 100) == (5, 4)
    assert iterative_sketch_geometry(2000, 1000) == (1, 2)
    for rate in (2, 20, 100, 1000):
        rows, cols = iterative_sketch_geometry(2000, rate)
        assert rows * cols <= max(2, 2000 // rate)


def test_noniter_rows_scale_like_inverse_root_rate():
    assert noniter_sketch_rows(2000, 10) == 632
    assert noniter_sketch_rows(2000, 100) == 200
    assert noniter_sketch_rows(2000, 1) == 2000
    # payload r^2 lands near d^2/rate
    for rate in (4, 25, 100):
        r = noniter_sketch_rows(2000, rate)
        assert r**2 == pytest.approx(2000**2 / rate, rel=0.05)


def _iter_base():
    return RoundConfig(
        rounds=2, clients_per_round=5, inner_mode="solve", estimator="iterative",
        iter_cfg=IterSolverConfig(iterations=5, step_mode="constant", step_size=0.1,
                                  compressor="sketch", sketch_size=64),
        seed=0,
    )


def test_leg_config_rate_one_disables_compression():
    cfg, geometry = _leg_config(_iter_base(), rate=1, dim=100)
    assert geometry == "none"
    assert cfg.iter_cfg.compressor == "none"

    base = RoundConfig(
        rounds=1, clients_per_round=2, estimator="non-iterative",
        noniter_cfg=NonIterSolverConfig(rows1=10, rows2=30), seed=0,
    )
    cfg, geometry = _leg_config(base, rate=1, dim=100)
    assert geometry == "identity"
    assert cfg.noniter_cfg.identity and cfg.noniter_cfg.rows1 == 100


def test_leg_config_topk_family_scales_k():
    base = _iter_base()
    base = RoundConfig(**{**base.__dict__, "iter_cfg": IterSolverConfig(
        iterations=5, step_mode="constant", step_size=0.1,
        compressor="topk", topk=50)})
    cfg, geometry = _leg_config(base, rate=20, dim=2000)
    assert cfg.iter_cfg.topk == 100
    assert geometry == "topk k=100"


def test_leg_config_pinned_rows_reject_starved_budgets():
    base = _iter_base()
    pinned = RoundConfig(**{**base.__dict__, "iter_cfg": IterSolverConfig(
        iterations=5, step_mode="constant", step_size=0.1,
        compressor="sketch", sketch_rows=11, sketch_cols=9)})
    cfg, _ = _leg_config(pinned, rate=20, dim=2000)
    assert (cfg.iter_cfg.sketch_rows, cfg.iter_cfg.sketch_cols) == (11, 9)
    with pytest.raises(ValueError, match="pinned"):
        _leg_config(pinned, rate=1000, dim=2000)
    with pytest.raises(ValueError):
        _leg_config(pinned, rate=0, dim=2000)


def test_leg_config_requires_a_compressed_estimator():
    base = RoundConfig(rounds=1, clients_per_round=1, estimator="exact")
    with pytest.raises(ValueError, match="iterative or non-iterative"):
        _leg_config(base, rate=20, dim=100)


def test_sweep_runs_and_orders_legs():
    prob = make_quadratic_problem(outer_dim=4, inner_dim=24, clients=5, seed=14,
                                  eig_range=(0.8, 3.0), outer_reg=0.1)
    base = RoundConfig(
        rounds=3, clients_per_round=5, inner_mode="solve", estimator="iterative",
        iter_cfg=IterSolverConfig(iterations=30, step_mode="constant",
                                  step_size=1.0 / prob.inner_smoothness(),
                                  compressor="sketch", sketch_size=12),
        outer_lr=0.05, seed=3,
    )
    legs = run_compression_sweep(prob, base, rates=[1, 4])
    assert [leg.rate for leg in legs] == [1, 4]
    assert legs[0].status == "ok"
    # the uncompressed leg's probe should sit at solver precision
    assert legs[0].rel_hypergrad_err <= 1e-6
    assert legs[0].rel_hypergrad_err <= legs[1].rel_hypergrad_err
    row = legs[0].to_row()
    assert len(row) == len(SweepLeg.csv_columns())


def test_sweep_leg_records_divergence_as_data():
    prob = make_quadratic_problem(outer_dim=4, inner_dim=24, clients=5, seed=14,
                                  eig_range=(0.8, 3.0), outer_reg=0.1)
    base = RoundConfig(
        rounds=3, clients_per_round=5, inner_mode="solve", estimator="iterative",
        iter_cfg=IterSolverConfig(iterations=300, step_mode="constant",
                                  step_size=1e7),
        outer_lr=0.05, seed=3,
    )
    leg = run_sweep_leg(prob, base, rate=1)
    assert leg.status == "diverged@0"
    assert leg.rounds_completed == 0
    assert np.isfinite(leg.outer_loss)


def test_run_suite_rejects_unknown_names():
    with pytest.raises(ValueError, match="unknown suite"):
        run_suite("everything")


def test_check_result_line_and_dict():
    res = CheckResult(name="demo", passed=True, bar="x <= 1",
                      numbers={"x": 0.5}, elapsed_s=0.01)
    line = res.line()
    assert "PASS" in line and "demo" in line
    blob = res.to_dict()
    assert blob["passed"] is True
    assert blob["numbers"]["x"] == 0.5
