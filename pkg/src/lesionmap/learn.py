"""Multi-class boosting over decision trees, written from first principles.

Weak learners are CART trees grown by exact weighted-Gini split search;
stages are combined with the multi-class exponential-loss weight update
(stage weight ln((1-err)/err) + ln(K-1)), so a stage only earns positive
weight when it beats K-class chance. Probabilities are normalized
alpha-weighted votes. Also houses class balancing, k-fold splitting,
metrics, feature importance and the voxelwise probability map.
"""

import warnings
from dataclasses import dataclass, field

import numpy as np

from .core import Mask, Volume

__all__ = [
    "LabeledDataset",
    "DecisionTree",
    "BoostModel",
    "ExperimentConfig",
    "ExperimentReport",
    "dataset_from_table",
    "balance_classes",
    "kfold_split",
    "train_cart",
    "samme_alpha",
    "train_samme",
    "predict_proba",
    "predict_classes",
    "feature_importance",
    "confusion_matrix",
    "accuracy",
    "run_experiment",
    "probability_map",
    "ALPHA_CAP",
]

# stage weight used when a weak learner is already perfect: large enough to
# dominate any realistic ensemble, finite so serialization stays exact
ALPHA_CAP = float(np.log(1e12))


@dataclass(frozen=True, eq=False)
class LabeledDataset:
    """Feature matrix with class labels and optional sample weights."""

    features: np.ndarray  # (n, f) float64
    labels: np.ndarray  # (n,) values from `classes`
    classes: tuple
    weights: np.ndarray = None  # (n,) nonnegative, None = uniform

    def __post_init__(self):
        X = np.ascontiguousarray(self.features, dtype=np.float64)
        if X.ndim != 2:
            raise ValueError(f"features must be 2D, got shape {X.shape}")
        if not np.all(np.isfinite(X)):
            raise ValueError("features contain non-finite values")
        labels = np.asarray(self.labels)
        if labels.shape != (X.shape[0],):
            raise ValueError(
                f"labels shape {labels.shape} does not match {X.shape[0]} rows")
        classes = tuple(self.classes)
        if len(classes) < 2:
            raise ValueError("need at least 2 classes")
        if len(set(classes)) != len(classes):
            raise ValueError("duplicate class labels")
        lookup = {c: i for i, c in enumerate(classes)}
        try:
            codes = np.array([lookup[v] for v in labels.tolist()], dtype=np.intp)
        except KeyError as err:
            raise ValueError(f"label {err.args[0]!r} not in classes {classes}")
        if self.weights is not None:
            w = np.ascontiguousarray(self.weights, dtype=np.float64)
            if w.shape != (X.shape[0],):
                raise ValueError("weights shape does not match rows")
            if np.any(w < 0) or not np.all(np.isfinite(w)):
                raise ValueError("weights must be finite and non-negative")
            if w.sum() <= 0:
                raise ValueError("weights must sum to a positive value")
            w.setflags(write=False)
            object.__setattr__(self, "weights", w)
        for name, arr in (("features", X), ("labels", labels)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        object.__setattr__(self, "classes", classes)
        codes.setflags(write=False)
        object.__setattr__(self, "_codes", codes)

    @property
    def n_samples(self):
        return int(self.features.shape[0])

    @property
    def n_features(self):
        return int(self.features.shape[1])

    @property
    def n_classes(self):
        return len(self.classes)

    @property
    def codes(self):
        """Labels as indices into `classes`."""
        return self._codes

    def take(self, rows):
        """Row subset as a new dataset."""
        rows = np.asarray(rows, dtype=np.intp)
        w = None if self.weights is None else self.weights[rows]
        return LabeledDataset(self.features[rows], self.labels[rows],
                              self.classes, w)

    def class_counts(self):
        return {c: int(np.sum(self._codes == i))
                for i, c in enumerate(self.classes)}


def dataset_from_table(table, classes, feature_indices=None):
    """Rows of a feature table restricted to the given classes.

    feature_indices selects a column subset (ablation experiments); None
    keeps all features.
    """
    classes = tuple(classes)
    keep = np.isin(table.labels, np.array(classes))
    feats = table.features[keep]
    if feature_indices is not None:
        feats = feats[:, list(feature_indices)]
    return LabeledDataset(feats, table.labels[keep], classes)


@dataclass(frozen=True, eq=False)
class DecisionTree:
    """CART tree in flat preorder arrays; node 0 is the root.

    Internal nodes carry a feature index and threshold (route left when
    x[feature] <= threshold) and child indices later in the arrays; leaves
    have feature -1 and a predicted class. class_mass holds the weighted
    class histogram of the training rows that reached each node, and gain
    the unnormalized Gini decrease of each split (0 at leaves).
    """

    feature: np.ndarray  # (n_nodes,) int, -1 marks a leaf
    threshold: np.ndarray  # (n_nodes,) float, 0 at leaves
    left: np.ndarray  # (n_nodes,) int child index, -1 at leaves
    right: np.ndarray
    leaf_class: np.ndarray  # (n_nodes,) int, -1 at internal nodes
    class_mass: np.ndarray  # (n_nodes, K)
    gain: np.ndarray  # (n_nodes,)
    n_features: int

    def __post_init__(self):
        feature = np.ascontiguousarray(self.feature, dtype=np.intp)
        n = feature.shape[0]
        if n < 1:
            raise ValueError("tree needs at least one node")
        threshold = np.ascontiguousarray(self.threshold, dtype=np.float64)
        left = np.ascontiguousarray(self.left, dtype=np.intp)
        right = np.ascontiguousarray(self.right, dtype=np.intp)
        leaf_class = np.ascontiguousarray(self.leaf_class, dtype=np.intp)
        mass = np.ascontiguousarray(self.class_mass, dtype=np.float64)
        gain = np.ascontiguousarray(self.gain, dtype=np.float64)
        for name, arr in (("threshold", threshold), ("left", left),
                          ("right", right), ("leaf_class", leaf_class),
                          ("gain", gain)):
            if arr.shape != (n,):
                raise ValueError(f"{name} shape {arr.shape}, expected ({n},)")
        if mass.ndim != 2 or mass.shape[0] != n:
            raise ValueError(f"class_mass shape {mass.shape}, expected ({n}, K)")
        internal = feature >= 0
        if np.any(feature[internal] >= self.n_features):
            raise ValueError("split feature index out of range")
        kids = np.concatenate([left[internal], right[internal]])
        ids = np.where(internal)[0]
        if internal.any():
            if kids.min() < 0 or kids.max() >= n:
                raise ValueError("child index out of range")
            if np.any(left[internal] <= ids) or np.any(right[internal] <= ids):
                raise ValueError("children must come after their parent")
        leaves = ~internal
        if np.any(left[leaves] != -1) or np.any(right[leaves] != -1):
            raise ValueError("leaves must have no children")
        k = mass.shape[1]
        if np.any(leaf_class[leaves] < 0) or np.any(leaf_class[leaves] >= k):
            raise ValueError("leaf class out of range")
        if not np.all(np.isfinite(threshold)) or np.any(gain < 0):
            raise ValueError("thresholds must be finite and gains non-negative")
        for name, arr in (("feature", feature), ("threshold", threshold),
                          ("left", left), ("right", right),
                          ("leaf_class", leaf_class), ("class_mass", mass),
                          ("gain", gain)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def n_nodes(self):
        return int(self.feature.shape[0])

    @property
    def n_splits(self):
        return int(np.sum(self.feature >= 0))

    def predict_codes(self, X):
        """Class index per row of X."""
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        if X.shape[1] != self.n_features:
            raise ValueError(
                f"expected {self.n_features} features, got {X.shape[1]}")
        idx = np.zeros(X.shape[0], dtype=np.intp)
        active = self.feature[idx] >= 0
        while active.any():
            rows = np.where(active)[0]
            node = idx[rows]
            go_left = X[rows, self.feature[node]] <= self.threshold[node]
            idx[rows] = np.where(go_left, self.left[node], self.right[node])
            active = self.feature[idx] >= 0
        return self.leaf_class[idx]

    def feature_gains(self):
        """Total split gain per feature."""
        out = np.zeros(self.n_features)
        internal = self.feature >= 0
        np.add.at(out, self.feature[internal], self.gain[internal])
        return out

    def to_dict(self):
        return {
            "feature": self.feature.tolist(),
            "threshold": self.threshold.tolist(),
            "left": self.left.tolist(),
            "right": self.right.tolist(),
            "leaf_class": self.leaf_class.tolist(),
            "class_mass": self.class_mass.tolist(),
            "gain": self.gain.tolist(),
            "n_features": self.n_features,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            feature=np.asarray(d["feature"]),
            threshold=np.asarray(d["threshold"]),
            left=np.asarray(d["left"]),
            right=np.asarray(d["right"]),
            leaf_class=np.asarray(d["leaf_class"]),
            class_mass=np.asarray(d["class_mass"]),
            gain=np.asarray(d["gain"]),
            n_features=int(d["n_features"]),
        )


def _best_split(X, codes, w, rows, n_classes, min_leaf):
    """Exact best (feature, threshold) by weighted Gini decrease.

    Candidates are midpoints between consecutive distinct sorted values.
    Returns (decrease, feature, threshold, left_rows, right_rows) or None.
    """
    xs = X[rows]
    ws = w[rows]
    ys = codes[rows]
    total = np.bincount(ys, weights=ws, minlength=n_classes)
    w_all = total.sum()
    if w_all <= 0:
        return None
    base = (total ** 2).sum() / w_all
    # rounding noise in the decrease is O(eps * w_all); a split must clear it
    tol = 1e-12 * w_all
    n = rows.size
    onehot_w = np.zeros((n, n_classes))
    onehot_w[np.arange(n), ys] = ws
    best = None
    for f in range(X.shape[1]):
        order = np.argsort(xs[:, f], kind="stable")
        xv = xs[order, f]
        cum = np.cumsum(onehot_w[order], axis=0)  # (n, K)
        # boundary after position i requires a strict value increase
        cut = np.where(xv[:-1] < xv[1:])[0]
        if cut.size == 0:
            continue
        n_left = cut + 1
        ok = (n_left >= min_leaf) & (n - n_left >= min_leaf)
        cut = cut[ok]
        if cut.size == 0:
            continue
        m_left = cum[cut]
        w_left = m_left.sum(axis=1)
        m_right = total[None, :] - m_left
        w_right = w_all - w_left
        valid = (w_left > 0) & (w_right > 0)
        if not valid.any():
            continue
        dec = np.full(cut.size, -np.inf)
        dec[valid] = ((m_left[valid] ** 2).sum(axis=1) / w_left[valid]
                      + (m_right[valid] ** 2).sum(axis=1) / w_right[valid]
                      - base)
        j = int(np.argmax(dec))
        if dec[j] <= tol:
            continue
        if best is None or dec[j] > best[0]:
            thr = 0.5 * (xv[cut[j]] + xv[cut[j] + 1])
            go_left = xs[:, f] <= thr
            best = (float(dec[j]), f, float(thr),
                    rows[go_left], rows[~go_left])
    return best


def train_cart(data, weights=None, max_depth=2, min_leaf=1):
    """Grow a CART tree by exact weighted-Gini split search.

    weights overrides the dataset's sample weights (boosting passes its
    current distribution here). Degenerate data produces a single leaf.
    """
    if not isinstance(data, LabeledDataset):
        raise TypeError("expected LabeledDataset")
    if max_depth < 1 or min_leaf < 1:
        raise ValueError("max_depth and min_leaf must be >= 1")
    X = data.features
    codes = data.codes
    k = data.n_classes
    if weights is None:
        weights = data.weights
    if weights is None:
        w = np.full(data.n_samples, 1.0 / data.n_samples)
    else:
        w = np.ascontiguousarray(weights, dtype=np.float64)
        if w.shape != (data.n_samples,):
            raise ValueError("weights shape does not match dataset rows")
        if np.any(w < 0) or w.sum() <= 0:
            raise ValueError("weights must be non-negative with positive sum")

    nodes = []

    def grow(rows, depth):
        node_id = len(nodes)
        nodes.append(None)
        mass = np.bincount(codes[rows], weights=w[rows], minlength=k)
        majority = int(np.argmax(mass))
        split = None
        if depth < max_depth and rows.size >= 2 * min_leaf:
            split = _best_split(X, codes, w, rows, k, min_leaf)
        if split is None:
            nodes[node_id] = (-1, 0.0, -1, -1, majority, mass, 0.0)
            return node_id
        dec, f, thr, rows_l, rows_r = split
        left_id = grow(rows_l, depth + 1)
        right_id = grow(rows_r, depth + 1)
        nodes[node_id] = (f, thr, left_id, right_id, -1, mass, dec)
        return node_id

    grow(np.arange(data.n_samples, dtype=np.intp), 0)
    cols = list(zip(*nodes))
    return DecisionTree(
        feature=np.array(cols[0]), threshold=np.array(cols[1]),
        left=np.array(cols[2]), right=np.array(cols[3]),
        leaf_class=np.array(cols[4]), class_mass=np.stack(cols[5]),
        gain=np.array(cols[6]), n_features=data.n_features)


@dataclass(frozen=True, eq=False)
class BoostModel:
    """Stagewise additive ensemble: trees with their vote weights."""

    trees: tuple
    alphas: np.ndarray
    classes: tuple
    feature_names: tuple
    stage_errors: np.ndarray = field(default=None)

    def __post_init__(self):
        trees = tuple(self.trees)
        alphas = np.ascontiguousarray(self.alphas, dtype=np.float64)
        if alphas.shape != (len(trees),):
            raise ValueError(
                f"{len(trees)} trees but {alphas.shape} stage weights")
        if not np.all(np.isfinite(alphas)) or np.any(alphas < 0):
            raise ValueError("stage weights must be finite and non-negative")
        errors = self.stage_errors
        if errors is None:
            errors = np.full(len(trees), np.nan)
        errors = np.ascontiguousarray(errors, dtype=np.float64)
        if errors.shape != (len(trees),):
            raise ValueError("stage_errors must match the number of stages")
        classes = tuple(self.classes)
        names = tuple(self.feature_names)
        if len(classes) < 2:
            raise ValueError("need at least 2 classes")
        for t in trees:
            if t.n_features != len(names):
                raise ValueError("a tree disagrees with feature_names length")
        alphas.setflags(write=False)
        errors.setflags(write=False)
        object.__setattr__(self, "trees", trees)
        object.__setattr__(self, "alphas", alphas)
        object.__setattr__(self, "classes", classes)
        object.__setattr__(self, "feature_names", names)
        object.__setattr__(self, "stage_errors", errors)

    @property
    def n_stages(self):
        return len(self.trees)

    def to_dict(self):
        stages = []
        for tree, alpha, err in zip(self.trees, self.alphas, self.stage_errors):
            stages.append({
                "alpha": float(alpha),
                "error": None if np.isnan(err) else float(err),
                "tree": tree.to_dict(),
            })
        return {
            "classes": list(self.classes),
            "feature_names": list(self.feature_names),
            "stages": stages,
        }

    @classmethod
    def from_dict(cls, d):
        trees = tuple(DecisionTree.from_dict(s["tree"]) for s in d["stages"])
        alphas = np.array([s["alpha"] for s in d["stages"]], dtype=np.float64)
        errors = np.array([np.nan if s.get("error") is None else s["error"]
                           for s in d["stages"]], dtype=np.float64)
        return cls(trees=trees, alphas=alphas, classes=tuple(d["classes"]),
                   feature_names=tuple(d["feature_names"]),
                   stage_errors=errors)


def samme_alpha(err, n_classes):
    """Stage weight ln((1-err)/err) + ln(K-1); capped when err is 0."""
    if not 0.0 <= err < 1.0:
        raise ValueError(f"stage error must lie in [0, 1), got {err}")
    if n_classes < 2:
        raise ValueError("need at least 2 classes")
    if err == 0.0:
        return ALPHA_CAP + float(np.log(n_classes - 1))
    return float(np.log((1.0 - err) / err) + np.log(n_classes - 1))


def train_samme(data, n_estimators=100, max_depth=2, min_leaf=1, seed=0):
    """Stagewise boosting with the multi-class exponential-loss update.

    Per stage: fit a tree on the current weights, compute the weighted
    error, stop keeping a capped-weight stage when the error is 0, stop
    discarding the stage when it fails K-class admissibility
    (err >= 1 - 1/K); otherwise scale misclassified weights by exp(alpha)
    and renormalize. The procedure is deterministic; seed is accepted for
    interface symmetry with the samplers and recorded by the callers.
    """
    if not isinstance(data, LabeledDataset):
        raise TypeError("expected LabeledDataset")
    if n_estimators < 1:
        raise ValueError("n_estimators must be >= 1")
    del seed  # no stochastic choices in the discrete variant
    k = data.n_classes
    codes = data.codes
    if data.weights is not None:
        w = data.weights / data.weights.sum()
    else:
        w = np.full(data.n_samples, 1.0 / data.n_samples)
    chance = 1.0 - 1.0 / k
    trees, alphas, errors = [], [], []
    for _ in range(n_estimators):
        tree = train_cart(data, weights=w, max_depth=max_depth,
                          min_leaf=min_leaf)
        wrong = tree.predict_codes(data.features) != codes
        err = float(w[wrong].sum())
        if err <= 0.0:
            trees.append(tree)
            alphas.append(samme_alpha(0.0, k))
            errors.append(0.0)
            break
        if err >= chance:
            break
        alpha = samme_alpha(err, k)
        trees.append(tree)
        alphas.append(alpha)
        errors.append(err)
        w = w * np.exp(alpha * wrong)
        w = w / w.sum()
    return BoostModel(trees=tuple(trees), alphas=np.array(alphas),
                      classes=data.classes,
                      feature_names=tuple(f"f{i}" for i in range(data.n_features)),
                      stage_errors=np.array(errors))


def predict_proba(model, x):
    """Normalized alpha-weighted vote shares, one probability per class.

    Accepts a single feature vector or an (n, f) matrix. A model whose
    stage weights sum to zero has no information: uniform probabilities
    are returned with a warning.
    """
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    X = np.atleast_2d(x)
    k = len(model.classes)
    votes = np.zeros((X.shape[0], k))
    for tree, alpha in zip(model.trees, model.alphas):
        pred = tree.predict_codes(X)
        votes[np.arange(X.shape[0]), pred] += alpha
    total = float(model.alphas.sum())
    if total <= 0.0:
        warnings.warn("model has zero total stage weight: returning uniform "
                      "probabilities", stacklevel=2)
        proba = np.full((X.shape[0], k), 1.0 / k)
    else:
        proba = votes / total
    return proba[0] if single else proba


def predict_classes(model, x):
    """Hard label per row: the class with the largest vote share."""
    proba = np.atleast_2d(predict_proba(model, x))
    return np.array(model.classes)[np.argmax(proba, axis=1)]


def feature_importance(model):
    """Per-feature share of alpha-weighted split gain; sums to 1."""
    gains = np.zeros(len(model.feature_names))
    for tree, alpha in zip(model.trees, model.alphas):
        gains += alpha * tree.feature_gains()
    total = gains.sum()
    if total <= 0.0:
        raise ValueError("no splits: the model is all leaves")
    return gains / total


def confusion_matrix(labels_true, labels_pred, classes):
    """(counts, rates): counts[i, j] = true class i predicted j; rates are
    row-normalized (zero rows stay zero)."""
    classes = tuple(classes)
    lookup = {c: i for i, c in enumerate(classes)}
    t = np.asarray(labels_true)
    p = np.asarray(labels_pred)
    if t.shape != p.shape:
        raise ValueError("label arrays differ in length")
    k = len(classes)
    counts = np.zeros((k, k), dtype=np.int64)
    for a, b in zip(t.tolist(), p.tolist()):
        if a not in lookup or b not in lookup:
            raise ValueError(f"label outside classes {classes}: {a!r}/{b!r}")
        counts[lookup[a], lookup[b]] += 1
    row = counts.sum(axis=1, keepdims=True)
    rates = np.divide(counts, row, out=np.zeros((k, k)), where=row > 0)
    return counts, rates


def accuracy(labels_true, labels_pred):
    t = np.asarray(labels_true)
    p = np.asarray(labels_pred)
    if t.shape != p.shape or t.size == 0:
        raise ValueError("label arrays must be equal-length and non-empty")
    return float(np.mean(t == p))


def kfold_split(n, k, seed):
    """k disjoint index folds covering range(n), sizes differing by <= 1."""
    if k < 2:
        raise ValueError("k must be >= 2")
    if n < k:
        raise ValueError(f"cannot split {n} samples into {k} folds")
    rng = np.random.default_rng(seed)
    perm = rng.permutation(n)
    return [np.sort(fold) for fold in np.array_split(perm, k)]


def balance_classes(data, seed):
    """Oversample every class to the majority count by shuffled repetition."""
    if not isinstance(data, LabeledDataset):
        raise TypeError("expected LabeledDataset")
    counts = data.class_counts()
    missing = [c for c, n in counts.items() if n == 0]
    if missing:
        raise ValueError(f"cannot balance: no rows for classes {missing}")
    target = max(counts.values())
    rng = np.random.default_rng(seed)
    picked = []
    for i, c in enumerate(data.classes):
        idx = np.where(data.codes == i)[0]
        reps = []
        while sum(r.size for r in reps) < target:
            reps.append(rng.permutation(idx))
        picked.append(np.concatenate(reps)[:target])
    rows = np.concatenate(picked)
    rows = rows[rng.permutation(rows.size)]
    return data.take(rows)


@dataclass(frozen=True)
class ExperimentConfig:
    """Cross-validation and boosting settings for run_experiment."""

    k_folds: int = 5
    n_estimators: int = 100
    max_depth: int = 2
    min_leaf: int = 1
    seed: int = 0
    holdout_subjects: tuple = ()
    feature_indices: tuple = None  # None = all features

    def __post_init__(self):
        if self.k_folds < 2:
            raise ValueError("k_folds must be >= 2")
        if self.n_estimators < 1 or self.max_depth < 1 or self.min_leaf < 1:
            raise ValueError("boosting sizes must be >= 1")
        object.__setattr__(self, "holdout_subjects",
                           tuple(str(s) for s in self.holdout_subjects))
        if self.feature_indices is not None:
            object.__setattr__(self, "feature_indices",
                               tuple(int(i) for i in self.feature_indices))

    def to_dict(self):
        return {
            "k_folds": self.k_folds,
            "n_estimators": self.n_estimators,
            "max_depth": self.max_depth,
            "min_leaf": self.min_leaf,
            "seed": self.seed,
            "holdout_subjects": list(self.holdout_subjects),
            "feature_indices": (None if self.feature_indices is None
                                else list(self.feature_indices)),
        }


EXPERIMENTS = ("LNC", "LN", "LC")


@dataclass(frozen=True, eq=False)
class ExperimentReport:
    """Cross-validated scores plus the final model for one experiment."""

    experiment: str
    classes: tuple
    feature_names: tuple
    fold_scores: tuple
    mean_accuracy: float
    confusion_counts: np.ndarray  # summed over validation folds
    confusion_rates: np.ndarray
    importances: np.ndarray
    model: BoostModel
    config: ExperimentConfig
    holdout_accuracy: float = None
    holdout_confusion: np.ndarray = None

    def to_dict(self):
        return {
            "experiment": self.experiment,
            "classes": list(self.classes),
            "feature_names": list(self.feature_names),
            "fold_scores": [float(s) for s in self.fold_scores],
            "mean_accuracy": float(self.mean_accuracy),
            "confusion_counts": self.confusion_counts.tolist(),
            "confusion_rates": self.confusion_rates.tolist(),
            "importances": self.importances.tolist(),
            "config": self.config.to_dict(),
            "holdout_accuracy": (None if self.holdout_accuracy is None
                                 else float(self.holdout_accuracy)),
            "holdout_confusion": (None if self.holdout_confusion is None
                                  else self.holdout_confusion.tolist()),
        }


def run_experiment(table, experiment, config=None):
    """k-fold evaluation of one class experiment on a feature table.

    Balancing is applied to each training fold only; validation folds keep
    their natural class ratios. Held-out subjects are excluded from every
    fold and scored once against the final model (trained on the full
    non-held-out pool). Deterministic given the config seed.
    """
    if experiment not in EXPERIMENTS:
        raise ValueError(f"experiment must be one of {EXPERIMENTS}, got {experiment!r}")
    if config is None:
        config = ExperimentConfig()
    classes = tuple(experiment)
    names = table.feature_names
    if config.feature_indices is not None:
        names = tuple(names[i] for i in config.feature_indices)

    in_classes = np.isin(table.labels, np.array(classes))
    held = in_classes & np.isin(table.subjects, np.array(config.holdout_subjects)) \
        if config.holdout_subjects else np.zeros(table.n_rows, dtype=bool)
    pool = in_classes & ~held
    for c in classes:
        if not np.any(table.labels[pool] == c):
            raise ValueError(f"experiment {experiment} needs rows of class {c!r}")

    def subset(sel):
        feats = table.features[sel]
        if config.feature_indices is not None:
            feats = feats[:, list(config.feature_indices)]
        return LabeledDataset(feats, table.labels[sel], classes)

    pool_data = subset(pool)
    folds = kfold_split(pool_data.n_samples, config.k_folds, config.seed)
    scores = []
    counts_sum = np.zeros((len(classes), len(classes)), dtype=np.int64)
    for i, fold in enumerate(folds):
        train_rows = np.setdiff1d(np.arange(pool_data.n_samples), fold)
        train = balance_classes(pool_data.take(train_rows), seed=config.seed + i)
        model = train_samme(train, n_estimators=config.n_estimators,
                            max_depth=config.max_depth,
                            min_leaf=config.min_leaf, seed=config.seed + i)
        model = _with_names(model, names)
        val = pool_data.take(fold)
        pred = predict_classes(model, val.features)
        scores.append(accuracy(val.labels, pred))
        counts, _ = confusion_matrix(val.labels, pred, classes)
        counts_sum += counts

    row = counts_sum.sum(axis=1, keepdims=True)
    rates = np.divide(counts_sum, row, out=np.zeros_like(counts_sum, dtype=np.float64),
                      where=row > 0)

    final_train = balance_classes(pool_data, seed=config.seed + config.k_folds)
    final_model = train_samme(final_train, n_estimators=config.n_estimators,
                              max_depth=config.max_depth,
                              min_leaf=config.min_leaf, seed=config.seed)
    final_model = _with_names(final_model, names)

    holdout_acc = None
    holdout_conf = None
    if held.any():
        held_data = subset(held)
        pred = predict_classes(final_model, held_data.features)
        holdout_acc = accuracy(held_data.labels, pred)
        holdout_conf, _ = confusion_matrix(held_data.labels, pred, classes)

    return ExperimentReport(
        experiment=experiment, classes=classes, feature_names=names,
        fold_scores=tuple(scores), mean_accuracy=float(np.mean(scores)),
        confusion_counts=counts_sum, confusion_rates=rates,
        importances=feature_importance(final_model),
        model=final_model, config=config,
        holdout_accuracy=holdout_acc, holdout_confusion=holdout_conf)


def _with_names(model, names):
    return BoostModel(trees=model.trees, alphas=model.alphas,
                      classes=model.classes, feature_names=names,
                      stage_errors=model.stage_errors)


def probability_map(model, feature_volumes, mask, target_class="L"):
    """Per-voxel probability of the target class inside the mask.

    feature_volumes must match the model's features in order and count.
    Voxels outside the mask, and masked voxels with any non-finite
    feature, get probability 0.
    """
    vols = list(feature_volumes)
    if len(vols) != len(model.feature_names):
        raise ValueError(
            f"model expects {len(model.feature_names)} feature volumes, got {len(vols)}")
    if target_class not in model.classes:
        raise ValueError(f"{target_class!r} not in model classes {model.classes}")
    if not isinstance(mask, Mask):
        mask = Mask(mask)
    for v in vols:
        mask.check_matches(v)
    sel = mask.data
    feats = np.stack([v.data[sel] for v in vols], axis=1)
    finite = np.all(np.isfinite(feats), axis=1)
    probs = np.zeros(feats.shape[0])
    if finite.any():
        proba = np.atleast_2d(predict_proba(model, feats[finite]))
        probs[finite] = proba[:, model.classes.index(target_class)]
    out = np.zeros(mask.dims)
    out[sel] = probs
    return Volume(out, vols[0].spacing, vols[0].affine)
