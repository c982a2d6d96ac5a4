"""Noisy-label sample reweighting as a federated bilevel problem.

Each training sample gets a weight in [0, 1]; the inner problem fits a
multinomial logistic model to the weighted, L2-regularized loss over all
client shards, and the outer problem asks the weights to minimize loss on a
clean validation set.  Weights of mislabeled samples get driven toward 0,
so thresholding them recovers the corrupted subset.  A brute-force Shapley
oracle over all 2^N subsets provides an independent ranking of sample value
that learned weights are correlated against in tests.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.optimize

from fedbilevel.bilevel import BilevelProblem


@dataclass
class LabeledDataset:
    """Feature matrix plus labels, sharded across clients.

    ``clean_labels`` and ``flip_mask`` carry the corruption ground truth for
    evaluation only; nothing on the training path reads them.  ``shards``
    lists disjoint index arrays into the sample axis, one per client.
    """

    features: np.ndarray
    labels: np.ndarray
    clean_labels: np.ndarray
    flip_mask: np.ndarray
    shards: list[np.ndarray]
    val_features: np.ndarray
    val_labels: np.ndarray
    num_classes: int

    def __post_init__(self) -> None:
        n = len(self.labels)
        if self.features.shape[0] != n or len(self.clean_labels) != n or len(self.flip_mask) != n:
            raise ValueError("inconsistent sample counts")
        seen = np.concatenate(self.shards) if self.shards else np.array([], dtype=np.int64)
        if len(np.unique(seen)) != len(seen):
            raise ValueError("client shards must be disjoint")
        if len(seen) != n:
            raise ValueError("client shards must cover every sample")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def num_clients(self) -> int:
        return len(self.shards)

    @property
    def shard_sizes(self) -> np.ndarray:
        return np.array([len(s) for s in self.shards], dtype=np.int64)


def make_blob_dataset(
    clients: int,
    samples_per_client: int,
    classes: int,
    feature_dim: int,
    separation: float = 4.0,
    val_size: int = 200,
    seed: int = 0,
    active_features: int | None = None,
    background_scale: float = 1.0,
) -> LabeledDataset:
    """Gaussian class blobs, split iid across clients, plus a clean val set.

    Class means are unit directions scaled by ``separation``; features are
    divided by the root of the effective dimension afterwards so per-sample
    norms stay O(1) regardless of dimension (class overlap then depends on
    separation only).

    ``active_features`` restricts the class signal to a random feature
    subset of that size, with off-subset noise damped to
    ``background_scale``: image-like data where a few bright pixels sit on
    a faint background.  Default keeps every feature active.
    """
    if classes < 2:
        raise ValueError("need at least two classes")
    gen = np.random.Generator(np.random.Philox(key=np.array([seed, 0xB106], dtype=np.uint64)))
    means = gen.standard_normal((classes, feature_dim))
    means *= separation / np.linalg.norm(means, axis=1, keepdims=True)
    noise_std = np.ones(feature_dim)
    scale = np.sqrt(feature_dim)
    if active_features is not None:
        if not 0 < active_features <= feature_dim:
            raise ValueError("active_features must lie in [1, feature_dim]")
        mask = np.zeros(feature_dim, dtype=bool)
        mask[gen.permutation(feature_dim)[:active_features]] = True
        means[:, ~mask] = 0.0
        means *= separation / np.linalg.norm(means, axis=1, keepdims=True)
        noise_std = np.where(mask, 1.0, background_scale)
        scale = np.sqrt(
            active_features + background_scale**2 * (feature_dim - active_features)
        )

    def draw(n: int) -> tuple[np.ndarray, np.ndarray]:
        labels = np.tile(np.arange(classes), n // classes + 1)[:n]
        labels = labels[gen.permutation(n)]
        x = (means[labels] + gen.standard_normal((n, feature_dim)) * noise_std) / scale
        return x, labels.astype(np.int64)

    n_train = clients * samples_per_client
    x, labels = draw(n_train)
    xv, yv = draw(val_size)
    order = gen.permutation(n_train)
    shards = [np.sort(order[i * samples_per_client:(i + 1) * samples_per_client])
              for i in range(clients)]
    return LabeledDataset(
        features=x,
        labels=labels,
        clean_labels=labels.copy(),
        flip_mask=np.zeros(n_train, dtype=bool),
        shards=shards,
        val_features=xv,
        val_labels=yv,
        num_classes=classes,
    )


def load_csv_dataset(
    path,
    clients: int,
    val_size: int,
    seed: int = 0,
    num_classes: int | None = None,
) -> LabeledDataset:
    """Load feature columns + final integer label column from a CSV file.

    Rows are shuffled by ``seed``, the last ``val_size`` become the clean
    validation set and the rest are split evenly across ``clients``.
    """
    raw = np.loadtxt(path, delimiter=",", skiprows=1)
    if raw.ndim != 2 or raw.shape[1] < 2:
        raise ValueError("expected a header row plus feature columns and a label column")
    x, labels = raw[:, :-1], raw[:, -1].astype(np.int64)
    gen = np.random.Generator(np.random.Philox(key=np.array([seed, 0xC57], dtype=np.uint64)))
    order = gen.permutation(len(labels))
    x, labels = x[order], labels[order]
    if val_size >= len(labels):
        raise ValueError("val_size leaves no training samples")
    n_train = len(labels) - val_size
    per = n_train // clients
    if per < 1:
        raise ValueError("not enough samples for the requested client count")
    shards = [np.arange(i * per, (i + 1) * per) for i in range(clients)]
    shards[-1] = np.arange((clients - 1) * per, n_train)  # remainder to the last client
    return LabeledDataset(
        features=x[:n_train],
        labels=labels[:n_train],
        clean_labels=labels[:n_train].copy(),
        flip_mask=np.zeros(n_train, dtype=bool),
        shards=shards,
        val_features=x[n_train:],
        val_labels=labels[n_train:],
        num_classes=num_classes or int(labels.max()) + 1,
    )


@dataclass
class NoiseSpec:
    """Label corruption plan.

    ``mode="iid"`` flips the same fraction ``rate`` on every client;
    ``mode="non-iid"`` draws each client's rate uniformly from
    [``rate_low``, ``rate_high``].  Flip counts are ceil(rate * shard size);
    flipped samples get a uniformly random *different* class.
    """

    mode: str = "iid"
    rate: float = 0.4
    rate_low: float = 0.2
    rate_high: float = 0.9
    seed: int = 0

    def __post_init__(self) -> None:
        if self.mode not in ("iid", "non-iid"):
            raise ValueError(f"unknown noise mode {self.mode!r}")
        for r in (self.rate, self.rate_low, self.rate_high):
            if not 0.0 <= r <= 1.0:
                raise ValueError("noise rates must lie in [0, 1]")
        if self.rate_low > self.rate_high:
            raise ValueError("rate_low must not exceed rate_high")


def inject_label_noise(dataset: LabeledDataset, spec: NoiseSpec) -> LabeledDataset:
    """Return a copy of the dataset with labels flipped per the spec.

    Raises ValueError for single-class data (no different class exists to
    flip to).  rate 0 returns an identical copy with an all-false mask.
    """
    if dataset.num_classes < 2:
        raise ValueError("label flipping needs at least two classes")
    gen = np.random.Generator(np.random.Philox(
        key=np.array([spec.seed, 0xF11B], dtype=np.uint64)))
    labels = dataset.labels.copy()
    mask = np.zeros(len(dataset), dtype=bool)
    for shard in dataset.shards:
        rate = spec.rate if spec.mode == "iid" else gen.uniform(spec.rate_low, spec.rate_high)
        n_flip = math.ceil(rate * len(shard))
        if n_flip == 0:
            continue
        chosen = shard[gen.choice(len(shard), size=n_flip, replace=False)]
        # offset in [1, classes-1] guarantees the new label differs
        offsets = gen.integers(1, dataset.num_classes, size=n_flip)
        labels[chosen] = (dataset.clean_labels[chosen] + offsets) % dataset.num_classes
        mask[chosen] = True
    return LabeledDataset(
        features=dataset.features,
        labels=labels,
        clean_labels=dataset.clean_labels.copy(),
        flip_mask=mask,
        shards=[s.copy() for s in dataset.shards],
        val_features=dataset.val_features,
        val_labels=dataset.val_labels,
        num_classes=dataset.num_classes,
    )


def plant_label_flips(dataset: LabeledDataset, indices, seed: int = 0) -> LabeledDataset:
    """Corrupt exactly the given sample indices (deterministic placement).

    Unlike :func:`inject_label_noise`, which draws flip positions per shard,
    this pins them; fixtures that assert on specific samples need that.  On
    binary tasks the flip is forced (only one wrong class exists), otherwise
    the replacement class is drawn from ``seed``.
    """
    if dataset.num_classes < 2:
        raise ValueError("label flipping needs at least two classes")
    indices = np.asarray(indices, dtype=np.intp)
    gen = np.random.Generator(np.random.Philox(
        key=np.array([seed, 0xF11C], dtype=np.uint64)))
    labels = dataset.labels.copy()
    mask = np.zeros(len(dataset), dtype=bool)
    offsets = gen.integers(1, dataset.num_classes, size=len(indices))
    labels[indices] = (dataset.clean_labels[indices] + offsets) % dataset.num_classes
    mask[indices] = True
    return LabeledDataset(
        features=dataset.features,
        labels=labels,
        clean_labels=dataset.clean_labels.copy(),
        flip_mask=mask,
        shards=[s.copy() for s in dataset.shards],
        val_features=dataset.val_features,
        val_labels=dataset.val_labels,
        num_classes=dataset.num_classes,
    )


def export_flip_mask(dataset: LabeledDataset, path) -> None:
    """Write the corruption ground truth as JSON (evaluation artifact)."""
    import json

    payload = {
        "flipped_indices": np.flatnonzero(dataset.flip_mask).tolist(),
        "per_client_counts": [int(dataset.flip_mask[s].sum()) for s in dataset.shards],
    }
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


class WeightedERMProblem(BilevelProblem):
    """Per-sample-weighted multinomial logistic regression, sharded by client.

    Outer variable: one weight per training sample (dim N), clamped to
    [0, 1] by the projection hook.  Inner variable: the flattened
    (classes x features) weight matrix, so the inner dimension is the
    feature count times the class count.

    Client i's inner objective is its weighted mean loss plus the full ridge
    term, so the aggregate keeps strong convexity exactly ``reg``.  The
    cross derivative w.r.t. a sample's weight is that sample's loss gradient
    scaled by 1/N_i, which is nonzero only on the owning client's rows; a
    cross-derivative product therefore costs the client N_i scalars on the
    wire, not N.
    """

    def __init__(self, dataset: LabeledDataset, reg: float = 1e-3) -> None:
        if reg <= 0:
            raise ValueError("reg must be positive (it is the strong-convexity constant)")
        self.dataset = dataset
        self.reg = float(reg)
        n, p = dataset.features.shape
        self._X = dataset.features
        self._Xval = dataset.val_features
        self.classes = dataset.num_classes
        self.feat_dim = p
        self.outer_dim = n
        self.inner_dim = self.classes * self.feat_dim
        self.client_sizes = dataset.shard_sizes
        self.mu_strong = self.reg
        self._onehot = np.eye(self.classes)[dataset.labels]
        self._val_onehot = np.eye(self.classes)[dataset.val_labels]

    def _weights_matrix(self, y: np.ndarray) -> np.ndarray:
        return y.reshape(self.classes, self.feat_dim)

    # -- outer: clean-validation cross-entropy --------------------------------

    def outer_value(self, x, y) -> float:
        probs = _softmax(self._Xval @ self._weights_matrix(y).T)
        return float(-np.mean(np.log(probs[np.arange(len(probs)), self.dataset.val_labels]
                                     + 1e-300)))

    def outer_grad_x(self, x, y):
        return np.zeros(self.outer_dim)  # validation loss ignores the weights

    def outer_grad_y(self, x, y):
        probs = _softmax(self._Xval @ self._weights_matrix(y).T)
        grad = (probs - self._val_onehot).T @ self._Xval / len(self._Xval)
        return grad.ravel()

    # -- inner: weighted regularized fit ---------------------------------------

    def client_inner_value(self, i, x, y) -> float:
        shard = self.dataset.shards[i]
        w_mat = self._weights_matrix(y)
        probs = _softmax(self._X[shard] @ w_mat.T)
        losses = -np.log(probs[np.arange(len(shard)), self.dataset.labels[shard]] + 1e-300)
        return float(x[shard] @ losses / len(shard) + 0.5 * self.reg * (y @ y))

    def client_inner_grad(self, i, x, y):
        shard = self.dataset.shards[i]
        w_mat = self._weights_matrix(y)
        probs = _softmax(self._X[shard] @ w_mat.T)
        resid = (probs - self._onehot[shard]) * x[shard, None]
        grad = resid.T @ self._X[shard] / len(shard) + self.reg * w_mat
        return grad.ravel()

    def client_hvp_yy(self, i, x, y, v):
        shard = self.dataset.shards[i]
        w_mat = self._weights_matrix(y)
        v_mat = self._weights_matrix(np.asarray(v, dtype=np.float64))
        xs = self._X[shard]
        probs = _softmax(xs @ w_mat.T)
        u = xs @ v_mat.T
        pu = probs * u
        curved = pu - probs * pu.sum(axis=1, keepdims=True)
        out = (curved * x[shard, None]).T @ xs / len(shard) + self.reg * v_mat
        return out.ravel()

    def client_hvp_xy(self, i, x, y, v):
        shard = self.dataset.shards[i]
        w_mat = self._weights_matrix(y)
        v_mat = self._weights_matrix(np.asarray(v, dtype=np.float64))
        xs = self._X[shard]
        probs = _softmax(xs @ w_mat.T)
        u = xs @ v_mat.T
        out = np.zeros(self.outer_dim)
        out[shard] = ((probs - self._onehot[shard]) * u).sum(axis=1) / len(shard)
        return out

    # -- structure ---------------------------------------------------------------

    def xy_payload_dim(self, i: int) -> int:
        return int(self.client_sizes[i])

    def project_outer(self, x):
        return np.clip(x, 0.0, 1.0)

    def initial_outer(self):
        return np.ones(self.outer_dim)

    def inner_smoothness(self) -> float:
        # per-sample CE curvature <= ||x||^2 / 2 at weight <= 1, plus ridge
        worst = max(
            float(np.sum(self._X[s] ** 2, axis=1).max()) for s in self.dataset.shards
        )
        return self.reg + 0.5 * worst

    def inner_solve(self, x, tol=1e-10, y0=None, max_iter=2000):
        y0 = np.zeros(self.inner_dim) if y0 is None else np.asarray(y0, dtype=np.float64)

        def objective(y_flat):
            w = self.client_weights()
            value = 0.0
            grad = np.zeros(self.inner_dim)
            for i in range(self.num_clients):
                value += w[i] * self.client_inner_value(i, x, y_flat)
                grad += w[i] * self.client_inner_grad(i, x, y_flat)
            return value, grad

        result = scipy.optimize.minimize(
            objective, y0, jac=True, method="L-BFGS-B",
            options={"maxiter": max_iter, "gtol": tol, "ftol": 1e-16},
        )
        return result.x

    def round_metrics(self, x, y) -> dict[str, float]:
        w_mat = self._weights_matrix(y)
        pred = np.argmax(self._Xval @ w_mat.T, axis=1)
        acc = float(np.mean(pred == self.dataset.val_labels))
        f1 = f1_score(classify_noisy(x), self.dataset.flip_mask)
        return {"val_accuracy": acc, "f1": f1}

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.dataset.features).tobytes())
        h.update(self.dataset.labels.tobytes())
        for s in self.dataset.shards:
            h.update(s.tobytes())
        h.update(np.ascontiguousarray(self.dataset.val_features).tobytes())
        h.update(self.dataset.val_labels.tobytes())
        h.update(np.float64(self.reg).tobytes())
        return h.hexdigest()[:16]


def build_weight_problem(dataset: LabeledDataset, reg: float = 1e-3) -> WeightedERMProblem:
    """Reweighting problem over the dataset; start from all-ones weights."""
    return WeightedERMProblem(dataset, reg=reg)


# -- noisy-sample classification metrics ------------------------------------


def classify_noisy(weights: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    """Predicted-mislabeled mask: weight strictly below the threshold."""
    return np.asarray(weights) < threshold


def f1_score(predicted: np.ndarray, truth: np.ndarray) -> float:
    """F1 over the positive (mislabeled) class.

    Degenerate case: no predicted and no true positives counts as a perfect
    score (nothing to find, nothing claimed).
    """
    predicted = np.asarray(predicted, dtype=bool)
    truth = np.asarray(truth, dtype=bool)
    if predicted.shape != truth.shape:
        raise ValueError("mask shapes differ")
    tp = int(np.sum(predicted & truth))
    fp = int(np.sum(predicted & ~truth))
    fn = int(np.sum(~predicted & truth))
    if tp == 0:
        return 1.0 if fp == 0 and fn == 0 else 0.0
    return 2.0 * tp / (2.0 * tp + fp + fn)


# -- brute-force Shapley oracle ----------------------------------------------


@dataclass
class ShapleyConfig:
    """Exact Shapley enumeration settings.

    The trainer is deterministic full-batch gradient descent (fixed zero
    init, step 1/L, gradient tolerance), so subset values need no seed and
    the enumeration is reproducible.  ``max_enumeration`` caps N; beyond it
    the 2^N cost is refused rather than attempted.
    """

    reg: float = 0.05
    tol: float = 1e-8
    max_iter: int = 20_000
    max_enumeration: int = 12
    lr: float | None = None


def _train_subset(
    X: np.ndarray, labels: np.ndarray, classes: int, cfg: ShapleyConfig
) -> np.ndarray:
    """Deterministic GD on the regularized mean loss over one subset."""
    n, p = X.shape
    w = np.zeros((classes, p))
    if n == 0:
        return w  # only the ridge term: minimizer is zero
    onehot = np.eye(classes)[labels]
    L = cfg.lr if cfg.lr is not None else None
    step = L if L is not None else 1.0 / (cfg.reg + 0.5 * float(np.sum(X**2, axis=1).max()))
    for _ in range(cfg.max_iter):
        probs = _softmax(X @ w.T)
        grad = (probs - onehot).T @ X / n + cfg.reg * w
        if np.linalg.norm(grad) <= cfg.tol:
            break
        w -= step * grad
    return w


def exact_shapley(dataset: LabeledDataset, cfg: ShapleyConfig | None = None) -> np.ndarray:
    """Per-sample Shapley values of validation gain, by full enumeration.

    The coalition value is the negative validation loss of a model trained
    on the subset; phi_j averages the marginal gain of adding sample j over
    all subsets of the others, with the usual binomial weights.  Every
    subset is trained exactly once (2^N trainings, cached by bitmask).
    """
    cfg = cfg or ShapleyConfig()
    n = len(dataset)
    if n > cfg.max_enumeration:
        raise ValueError(
            f"exact enumeration over {n} samples needs 2^{n} = {2**n} trainings; "
            f"cap is max_enumeration={cfg.max_enumeration}"
        )
    X = dataset.features
    Xval = dataset.val_features
    labels = dataset.labels

    def gain(model: np.ndarray) -> float:
        probs = _softmax(Xval @ model.T)
        return float(np.mean(np.log(probs[np.arange(len(probs)), dataset.val_labels] + 1e-300)))

    values = np.empty(1 << n)
    members = [np.flatnonzero([(mask >> j) & 1 for j in range(n)]) for mask in range(1 << n)]
    for mask in range(1 << n):
        idx = members[mask]
        values[mask] = gain(_train_subset(X[idx], labels[idx], dataset.num_classes, cfg))

    phi = np.zeros(n)
    for j in range(n):
        bit = 1 << j
        for mask in range(1 << n):
            if mask & bit:
                continue
            size = mask.bit_count()
            coeff = 1.0 / (n * math.comb(n - 1, size))
            phi[j] += coeff * (values[mask | bit] - values[mask])
    return phi
