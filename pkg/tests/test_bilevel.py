"""Hypergradient estimators against closed forms, finite differences and
each other.

The Monte Carlo fixture at the bottom (d = 2000, 20x sketch) is the slowest
test in the module (~45 s): twenty exact dense solves at d = 2000 provide
the reference values.  Its seed list and measured pass rate (19/20, median
relative error 0.082) were frozen before the assertion was written.
"""

import numpy as np
import pytest

from fedbilevel.bilevel import (
    BilevelProblem,
    DefinitenessError,
    DivergenceError,
    IterSolverConfig,
    NonIterSolverConfig,
    exact_hypergradient,
    iterative_hypergradient,
    quadratic_grad,
    schedule_shift_bound,
    sketched_hypergradient,
)
from fedbilevel.noisylabel import (
    NoiseSpec,
    build_weight_problem,
    inject_label_noise,
    make_blob_dataset,
)
from fedbilevel.quadratic import make_quadratic_problem

from conftest import philox


# -- second-order oracle laws ---------------------------------------------------


def test_hvp_is_symmetric_and_strongly_convex(small_quadratic):
    gen = philox(10, 0)
    x = gen.standard_normal(small_quadratic.outer_dim)
    y = gen.standard_normal(small_quadratic.inner_dim)
    for _ in range(5):
        u = gen.standard_normal(small_quadratic.inner_dim)
        v = gen.standard_normal(small_quadratic.inner_dim)
        Hu = small_quadratic.hvp_yy(x, y, u)
        Hv = small_quadratic.hvp_yy(x, y, v)
        assert u @ Hv == pytest.approx(v @ Hu, rel=1e-10)
        assert v @ Hv >= small_quadratic.mu_strong * (v @ v) - 1e-9


def test_erm_hvp_matches_finite_differences():
    ds = make_blob_dataset(clients=2, samples_per_client=8, classes=3,
                           feature_dim=4, seed=2)
    prob = build_weight_problem(ds, reg=0.05)
    gen = philox(11, 0)
    x = prob.initial_outer()
    y = 0.1 * gen.standard_normal(prob.inner_dim)
    v = gen.standard_normal(prob.inner_dim)
    eps = 1e-5
    fd = (prob.inner_grad(x, y + eps * v) - prob.inner_grad(x, y - eps * v)) / (2 * eps)
    np.testing.assert_allclose(prob.hvp_yy(x, y, v), fd, rtol=1e-4, atol=1e-6)
    # cross term against the weight variable
    u = gen.standard_normal(prob.outer_dim)
    fd_xy = (prob.inner_grad(x + eps * u, y) - prob.inner_grad(x - eps * u, y)) / (2 * eps)
    assert fd_xy @ v == pytest.approx(u @ prob.hvp_xy(x, y, v), rel=1e-4, abs=1e-8)


# -- the correction objective ----------------------------------------------------


def test_quadratic_grad_vanishes_at_the_solve(small_quadratic):
    gen = philox(12, 0)
    x = gen.standard_normal(small_quadratic.outer_dim)
    y = gen.standard_normal(small_quadratic.inner_dim)
    gy = small_quadratic.outer_grad_y(x, y)
    vstar = np.linalg.solve(small_quadratic.agg_hessian, gy)
    assert np.linalg.norm(quadratic_grad(small_quadratic, x, y, vstar)) <= 1e-10


def test_quadratic_grad_identity_hessian():
    prob = make_quadratic_problem(
        outer_dim=2, inner_dim=6, clients=3, seed=1,
        eigenvalues=np.ones(6), rotate=False,
    )
    gen = philox(13, 0)
    x, y, v = gen.standard_normal(2), gen.standard_normal(6), gen.standard_normal(6)
    np.testing.assert_allclose(
        quadratic_grad(prob, x, y, v), v - prob.outer_grad_y(x, y), atol=1e-12
    )


def test_quadratic_grad_is_gradient_of_the_scalar_objective(small_quadratic):
    gen = philox(14, 0)
    x = gen.standard_normal(small_quadratic.outer_dim)
    y = gen.standard_normal(small_quadratic.inner_dim)
    v = gen.standard_normal(small_quadratic.inner_dim)
    gy = small_quadratic.outer_grad_y(x, y)

    def q(v):
        return 0.5 * v @ small_quadratic.hvp_yy(x, y, v) - v @ gy

    eps = 1e-6
    g = quadratic_grad(small_quadratic, x, y, v)
    for j in (0, 7, 39):
        e = np.zeros_like(v)
        e[j] = eps
        fd = (q(v + e) - q(v - e)) / (2 * eps)
        assert g[j] == pytest.approx(fd, rel=1e-5, abs=1e-7)


# -- exact oracle -----------------------------------------------------------------


def test_exact_hypergradient_matches_closed_form(small_quadratic):
    gen = philox(15, 0)
    x = gen.standard_normal(small_quadratic.outer_dim)
    y = gen.standard_normal(small_quadratic.inner_dim)
    est = exact_hypergradient(small_quadratic, x, y)
    A, B = small_quadratic.agg_hessian, small_quadratic.agg_coupling
    expect = small_quadratic.outer_reg * x + B.T @ np.linalg.solve(
        A, y - small_quadratic.target
    )
    np.testing.assert_allclose(est.value, expect, rtol=1e-12, atol=1e-12)
    assert est.method == "exact"


def test_exact_hypergradient_matches_finite_differences(small_quadratic):
    x = philox(16, 0).standard_normal(small_quadratic.outer_dim)
    y = small_quadratic.inner_solve(x)
    est = exact_hypergradient(small_quadratic, x, y)

    def h(x):
        return small_quadratic.outer_value(x, small_quadratic.inner_solve(x))

    eps = 1e-6
    fd = np.empty_like(x)
    for j in range(len(x)):
        e = np.zeros_like(x)
        e[j] = eps
        fd[j] = (h(x + e) - h(x - e)) / (2 * eps)
    np.testing.assert_allclose(est.value, fd, rtol=1e-6, atol=1e-8)


def test_exact_hypergradient_zero_outer_grad_y(small_quadratic):
    # y at the target kills grad_y F, so the correction vanishes entirely
    x = philox(17, 0).standard_normal(small_quadratic.outer_dim)
    est = exact_hypergradient(small_quadratic, x, small_quadratic.target)
    np.testing.assert_allclose(est.v_solution, np.zeros_like(est.v_solution), atol=1e-12)
    np.testing.assert_allclose(est.value, small_quadratic.outer_reg * x, atol=1e-12)


class _NegativeCurvature(BilevelProblem):
    outer_dim = 2
    inner_dim = 3
    client_sizes = np.array([1])
    mu_strong = 1.0

    def outer_value(self, x, y):
        return 0.0

    def outer_grad_x(self, x, y):
        return np.zeros(2)

    def outer_grad_y(self, x, y):
        return np.ones(3)

    def client_inner_value(self, i, x, y):
        return -0.5 * float(y @ y)

    def client_inner_grad(self, i, x, y):
        return -y

    def client_hvp_yy(self, i, x, y, v):
        return -v

    def client_hvp_xy(self, i, x, y, v):
        return np.zeros(2)


def test_exact_hypergradient_rejects_indefinite_hessian():
    with pytest.raises(DefinitenessError):
        exact_hypergradient(_NegativeCurvature(), np.zeros(2), np.zeros(3))


# -- iterative estimator -----------------------------------------------------------


def test_iterative_identity_hessian_converges_in_one_step():
    prob = make_quadratic_problem(
        outer_dim=2, inner_dim=12, clients=3, seed=2,
        eigenvalues=np.ones(12), rotate=False,
    )
    gen = philox(18, 0)
    x, y = gen.standard_normal(2), gen.standard_normal(12)
    cfg = IterSolverConfig(iterations=1, step_mode="constant", step_size=1.0)
    est = iterative_hypergradient(prob, x, y, cfg)
    np.testing.assert_allclose(est.v_solution, prob.outer_grad_y(x, y), atol=1e-12)
    ref = exact_hypergradient(prob, x, y)
    np.testing.assert_allclose(est.value, ref.value, atol=1e-10)


def test_iterative_error_halves_at_least_when_iterations_double():
    # measured ratio 37.8 on this seed; the schedule contracts much faster
    # than the asserted 1.5x floor
    prob = make_quadratic_problem(outer_dim=8, inner_dim=200, clients=5, seed=50,
                                  eig_range=(1.0, 2.0))
    gen = philox(0, 9)
    x = gen.standard_normal(8)
    y = prob.inner_solve(x) + 0.2 * gen.standard_normal(200)
    vstar = np.linalg.solve(prob.agg_hessian, prob.outer_grad_y(x, y))
    errs = {}
    for iters in (64, 128):
        est = iterative_hypergradient(prob, x, y, IterSolverConfig(iterations=iters))
        errs[iters] = np.linalg.norm(est.v_solution - vstar)
    assert errs[64] >= 1.5 * errs[128]


def test_iterative_agrees_with_exact_oracle(small_quadratic):
    gen = philox(19, 0)
    x = gen.standard_normal(small_quadratic.outer_dim)
    y = gen.standard_normal(small_quadratic.inner_dim)
    cfg = IterSolverConfig(
        iterations=1000, step_mode="constant",
        step_size=1.0 / small_quadratic.inner_smoothness(),
    )
    est = iterative_hypergradient(small_quadratic, x, y, cfg)
    ref = exact_hypergradient(small_quadratic, x, y)
    assert np.linalg.norm(est.value - ref.value) <= 1e-8 * np.linalg.norm(ref.value)


def test_iterative_fixed_point_is_preserved(small_quadratic):
    # warm-starting at the solve keeps every uncompressed iterate there
    gen = philox(20, 0)
    x = gen.standard_normal(small_quadratic.outer_dim)
    y = gen.standard_normal(small_quadratic.inner_dim)
    vstar = np.linalg.solve(
        small_quadratic.agg_hessian, small_quadratic.outer_grad_y(x, y)
    )
    cfg = IterSolverConfig(iterations=25, step_mode="constant", step_size=0.1, v0=vstar)
    est = iterative_hypergradient(small_quadratic, x, y, cfg)
    np.testing.assert_allclose(est.v_solution, vstar, atol=1e-10)


def test_iterative_weighted_averaging_converges(small_quadratic):
    # measured 7.0e-7 relative error at I=300 on this fixture
    x = philox(3, 0).standard_normal(small_quadratic.outer_dim)
    y = small_quadratic.inner_solve(x)
    vstar = np.linalg.solve(
        small_quadratic.agg_hessian, small_quadratic.outer_grad_y(x, y)
    )
    cfg = IterSolverConfig(
        iterations=300, step_mode="constant",
        step_size=1.0 / small_quadratic.inner_smoothness(), averaging="weighted",
    )
    est = iterative_hypergradient(small_quadratic, x, y, cfg)
    assert np.linalg.norm(est.v_solution - vstar) <= 1e-5 * np.linalg.norm(vstar)


def test_iterative_full_topk_equals_uncompressed(small_quadratic):
    # k = d drops nothing, so the top-k path must reproduce the dense one
    gen = philox(21, 0)
    x = gen.standard_normal(small_quadratic.outer_dim)
    y = gen.standard_normal(small_quadratic.inner_dim)
    step = 1.0 / small_quadratic.inner_smoothness()
    dense = iterative_hypergradient(
        small_quadratic, x, y,
        IterSolverConfig(iterations=40, step_mode="constant", step_size=step),
    )
    sparse = iterative_hypergradient(
        small_quadratic, x, y,
        IterSolverConfig(iterations=40, step_mode="constant", step_size=step,
                         compressor="topk", topk=small_quadratic.inner_dim),
    )
    np.testing.assert_allclose(sparse.v_solution, dense.v_solution, atol=1e-10)


def test_iterative_diverges_loudly_on_an_unstable_step(small_quadratic):
    gen = philox(22, 0)
    x = gen.standard_normal(small_quadratic.outer_dim)
    y = gen.standard_normal(small_quadratic.inner_dim)
    cfg = IterSolverConfig(iterations=200, step_mode="constant", step_size=1e6)
    with pytest.raises(DivergenceError):
        iterative_hypergradient(small_quadratic, x, y, cfg)


@pytest.mark.filterwarnings("ignore::fedbilevel.bilevel.ConditioningWarning")
def test_estimate_recomputes_from_v_solution(small_quadratic):
    # value must equal grad_x F - J_xy v for the v actually returned; the
    # three-client sketched system is rank-deficient by construction, the
    # minimum-norm fallback is part of what is being recomputed here
    gen = philox(23, 0)
    x = gen.standard_normal(small_quadratic.outer_dim)
    y = gen.standard_normal(small_quadratic.inner_dim)
    clients = np.array([0, 2, 4])
    estimates = [
        exact_hypergradient(small_quadratic, x, y),
        iterative_hypergradient(
            small_quadratic, x, y,
            IterSolverConfig(iterations=30, step_mode="constant", step_size=0.2,
                             compressor="topk", topk=5),
            clients=clients,
        ),
        sketched_hypergradient(
            small_quadratic, x, y, NonIterSolverConfig(rows1=20, rows2=60),
            clients=clients,
        ),
    ]
    for est, idx in zip(estimates, (None, clients, clients)):
        gx = small_quadratic.outer_grad_x(x, y)
        rebuilt = gx - small_quadratic.hvp_xy(x, y, est.v_solution, idx)
        np.testing.assert_allclose(est.value, rebuilt, atol=1e-9)


# -- solver config validation -------------------------------------------------------


def test_iter_config_rejects_bad_settings():
    with pytest.raises(ValueError):
        IterSolverConfig(iterations=0)
    with pytest.raises(ValueError):
        IterSolverConfig(iterations=1, step_mode="constant")  # no step size
    with pytest.raises(ValueError):
        IterSolverConfig(iterations=1, step_mode="warp")
    with pytest.raises(ValueError):
        IterSolverConfig(iterations=1, compressor="topk")  # no k
    with pytest.raises(ValueError):
        IterSolverConfig(iterations=1, compressor="sketch")  # no budget
    with pytest.raises(ValueError):
        IterSolverConfig(iterations=1, averaging="mean")


def test_schedule_shift_bound_values():
    assert schedule_shift_bound(1.0) == pytest.approx(np.sqrt(2.0) + 1.0)
    assert schedule_shift_bound(0.01) > schedule_shift_bound(0.1)
    for bad in (0.0, -0.5, 1.5):
        with pytest.raises(ValueError):
            schedule_shift_bound(bad)


def test_resolve_shift_enforces_the_bound():
    cfg = IterSolverConfig(iterations=1, compressor="topk", topk=1)
    bound = schedule_shift_bound(cfg.contraction_fraction(100))
    assert cfg.resolve_shift(100) == pytest.approx(bound + 1.0)
    with pytest.raises(ValueError):
        IterSolverConfig(iterations=1, compressor="topk", topk=1,
                         shift=bound / 2).resolve_shift(100)


def test_contraction_fraction_by_compressor():
    assert IterSolverConfig(iterations=1).contraction_fraction(50) == 1.0
    assert IterSolverConfig(
        iterations=1, compressor="topk", topk=5
    ).contraction_fraction(50) == pytest.approx(0.1)
    cfg = IterSolverConfig(iterations=1, compressor="sketch",
                           sketch_rows=4, sketch_cols=8, decompress_k=2)
    assert cfg.contraction_fraction(50) == pytest.approx(2 / 50)


def test_topk_larger_than_dim_is_rejected(small_quadratic):
    cfg = IterSolverConfig(iterations=1, compressor="topk",
                           topk=small_quadratic.inner_dim + 1)
    with pytest.raises(ValueError):
        iterative_hypergradient(
            small_quadratic, np.zeros(small_quadratic.outer_dim),
            np.zeros(small_quadratic.inner_dim), cfg,
        )


def test_noniter_config_rejects_bad_rows():
    with pytest.raises(ValueError):
        NonIterSolverConfig(rows1=0, rows2=10)


# -- non-iterative estimator ----------------------------------------------------------


def test_identity_sketch_reproduces_the_exact_oracle(small_quadratic):
    gen = philox(24, 0)
    x = gen.standard_normal(small_quadratic.outer_dim)
    y = gen.standard_normal(small_quadratic.inner_dim)
    d = small_quadratic.inner_dim
    est = sketched_hypergradient(
        small_quadratic, x, y, NonIterSolverConfig(rows1=d, rows2=d, identity=True)
    )
    ref = exact_hypergradient(small_quadratic, x, y)
    np.testing.assert_allclose(est.value, ref.value, rtol=1e-8, atol=1e-10)
    np.testing.assert_allclose(est.v_solution, ref.v_solution, rtol=1e-8, atol=1e-10)


def test_identity_sketch_requires_full_rows(small_quadratic):
    with pytest.raises(ValueError):
        sketched_hypergradient(
            small_quadratic,
            np.zeros(small_quadratic.outer_dim),
            np.zeros(small_quadratic.inner_dim),
            NonIterSolverConfig(rows1=10, rows2=10, identity=True),
        )


def test_sketched_zero_outer_grad_y_gives_zero_correction(small_quadratic):
    x = philox(25, 0).standard_normal(small_quadratic.outer_dim)
    est = sketched_hypergradient(
        small_quadratic, x, small_quadratic.target,
        NonIterSolverConfig(rows1=15, rows2=45),
    )
    np.testing.assert_allclose(est.v_solution, 0.0, atol=1e-12)
    np.testing.assert_allclose(est.value, small_quadratic.outer_reg * x, atol=1e-12)


def test_sketched_seeds_change_the_estimate(small_quadratic):
    gen = philox(26, 0)
    x = gen.standard_normal(small_quadratic.outer_dim)
    y = gen.standard_normal(small_quadratic.inner_dim)
    a = sketched_hypergradient(small_quadratic, x, y,
                               NonIterSolverConfig(rows1=15, rows2=45))
    b = sketched_hypergradient(small_quadratic, x, y,
                               NonIterSolverConfig(rows1=15, rows2=45))
    c = sketched_hypergradient(small_quadratic, x, y,
                               NonIterSolverConfig(rows1=15, rows2=45, seed1=7, seed2=8))
    np.testing.assert_array_equal(a.value, b.value)  # same seeds, same bytes
    assert not np.allclose(a.value, c.value)


# -- frozen Monte Carlo: 20x sketch at d = 2000 ----------------------------------------


def test_sketch_20x_tracks_exact_on_sparse_dominated_tasks():
    # image-like task: one active feature over a blank background makes the
    # per-client curvature messages heavy-hitter dominated, which is the
    # regime the sketch-space error feedback needs.  Measured per-seed
    # relative errors: median 0.082, 19/20 under the 0.2 line (seed 9 is a
    # known outlier at 0.65).
    passing = 0
    for s in range(20):
        ds = make_blob_dataset(
            clients=10, samples_per_client=50, classes=2, feature_dim=1000,
            separation=1.2, val_size=600, seed=s,
            active_features=1, background_scale=0.0,
        )
        ds = inject_label_noise(ds, NoiseSpec(mode="iid", rate=0.3, seed=s))
        prob = build_weight_problem(ds, reg=0.3)
        x = 0.7 * np.ones(prob.outer_dim)
        y = prob.inner_solve(x)
        ref = exact_hypergradient(prob, x, y).value
        cfg = IterSolverConfig(
            iterations=20, step_mode="constant",
            step_size=1.0 / prob.inner_smoothness(),
            compressor="sketch", sketch_rows=11, sketch_cols=9,
            sketch_seed=1000 + s, decompress_k=2,
        )
        try:
            est = iterative_hypergradient(prob, x, y, cfg)
        except DivergenceError:
            continue
        rel = np.linalg.norm(est.value - ref) / np.linalg.norm(ref)
        passing += rel <= 0.2
    assert passing >= 16
