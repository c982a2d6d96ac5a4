"""Federated bilevel optimization with compressed hypergradient estimators.

The package is organized by layer:

* :mod:`fedbilevel.compression` — count-sketch tables, top-k records and
  sparse embeddings, plus their wire formats.
* :mod:`fedbilevel.bilevel` — the bilevel problem contract and the three
  hypergradient estimators (exact oracle, compressed iterative solve,
  one-shot sketched solve).
* :mod:`fedbilevel.quadratic` — synthetic quadratic instances with known
  closed forms, used as fixtures and for calibration runs.
* :mod:`fedbilevel.fedsim` — the federated training loop, local SGD,
  aggregation, the communication ledger and run traces.
* :mod:`fedbilevel.noisylabel` — noisy-label sample reweighting: datasets,
  the weighted ERM problem, the brute-force Shapley oracle and metrics.
* :mod:`fedbilevel.validation` — fixed-seed check suites and the compression
  sweep driver shared by the CLI and the acceptance tests.
* :mod:`fedbilevel.cli` — the ``fedbilevel`` command (run, sweep-compression,
  validate) and its artifact formats.
"""

from fedbilevel.bilevel import (
    BilevelProblem,
    DefinitenessError,
    DivergenceError,
    HypergradientEstimate,
    IterSolverConfig,
    NonIterSolverConfig,
    exact_hypergradient,
    iterative_hypergradient,
    quadratic_grad,
    sketched_hypergradient,
)
from fedbilevel.compression import (
    CountSketchTable,
    SparseEmbedding,
    TopKSparse,
    heavy_hitter_table_shape,
    sketch_table_shape,
    topk_compress,
)
from fedbilevel.fedsim import (
    CommLedger,
    RoundConfig,
    TrainTrace,
    aggregate_inner,
    ledger_report,
    local_sgd,
    run_fedavg,
    run_federated_bilevel,
)
from fedbilevel.noisylabel import (
    LabeledDataset,
    NoiseSpec,
    ShapleyConfig,
    WeightedERMProblem,
    build_weight_problem,
    classify_noisy,
    exact_shapley,
    f1_score,
    inject_label_noise,
    make_blob_dataset,
)
from fedbilevel.quadratic import QuadraticBilevelProblem, make_quadratic_problem
from fedbilevel.validation import run_compression_sweep, run_suite

__version__ = "0.1.0"

__all__ = [
    "BilevelProblem",
    "CommLedger",
    "CountSketchTable",
    "DefinitenessError",
    "DivergenceError",
    "HypergradientEstimate",
    "IterSolverConfig",
    "LabeledDataset",
    "NoiseSpec",
    "NonIterSolverConfig",
    "QuadraticBilevelProblem",
    "RoundConfig",
    "ShapleyConfig",
    "SparseEmbedding",
    "TopKSparse",
    "TrainTrace",
    "WeightedERMProblem",
    "aggregate_inner",
    "build_weight_problem",
    "classify_noisy",
    "exact_hypergradient",
    "exact_shapley",
    "f1_score",
    "heavy_hitter_table_shape",
    "inject_label_noise",
    "iterative_hypergradient",
    "ledger_report",
    "local_sgd",
    "make_blob_dataset",
    "make_quadratic_problem",
    "quadratic_grad",
    "run_compression_sweep",
    "run_fedavg",
    "run_federated_bilevel",
    "run_suite",
    "sketch_table_shape",
    "sketched_hypergradient",
    "topk_compress",
]
