"""Labeled voxel extraction around lesions.

Turns a lesion-score map plus tissue masks into the three voxel
populations used downstream: lesion voxels (L) by strict thresholding,
normal-appearing white matter (N) as a ring at a minimum exact distance
from any lesion evidence, and control-tissue voxels (C). Feature maps are
then gathered into one table row per labeled voxel.
"""

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .core import Mask, Volume

__all__ = [
    "FEATURE_NAMES",
    "LABEL_ALPHABET",
    "LesionScoreMap",
    "FeatureTable",
    "extract_lesion_voxels",
    "distance_transform_edt",
    "nawm_ring",
    "control_voxels",
    "build_feature_table",
    "concat_tables",
]

FEATURE_NAMES = ("smt_fi", "smt_fe", "met2_fm", "met2_fie", "met2_fcsf")
LABEL_ALPHABET = ("L", "N", "C")


@dataclass(frozen=True)
class LesionScoreMap:
    """Per-voxel lesion score in [0, 1]; healthy tissue scores exactly 0."""

    volume: Volume

    def __post_init__(self):
        d = self.volume.data
        if d.ndim != 3:
            raise ValueError(f"score map must be 3D, got {d.ndim}D")
        if not np.all(np.isfinite(d)):
            raise ValueError("score map contains non-finite values")
        if d.min() < 0.0 or d.max() > 1.0:
            raise ValueError("scores must lie in [0, 1]")

    @property
    def data(self):
        return self.volume.data

    @property
    def grid_shape(self):
        return self.volume.grid_shape

    def positive_mask(self):
        """Boolean volume of any lesion evidence (score > 0)."""
        return self.data > 0.0


@dataclass(frozen=True)
class FeatureTable:
    """One row per labeled voxel: provenance, coordinates, 5 features.

    Rows with any non-finite feature are dropped at construction time by
    build_feature_table; `dropped` carries that count so bookkeeping stays
    auditable after concatenation.
    """

    subjects: np.ndarray  # (n,) str
    indices: np.ndarray  # (n, 3) int
    labels: np.ndarray  # (n,) str, values from LABEL_ALPHABET
    features: np.ndarray  # (n, 5) float64
    dropped: int = 0
    feature_names: tuple = field(default=FEATURE_NAMES)

    def __post_init__(self):
        subs = np.asarray(self.subjects, dtype=str)
        idx = np.asarray(self.indices, dtype=np.intp)
        labs = np.asarray(self.labels, dtype=str)
        feats = np.asarray(self.features, dtype=np.float64)
        n = subs.shape[0]
        if idx.shape != (n, 3):
            raise ValueError(f"indices shape {idx.shape}, expected ({n}, 3)")
        if labs.shape != (n,):
            raise ValueError(f"labels shape {labs.shape}, expected ({n},)")
        if feats.shape != (n, len(self.feature_names)):
            raise ValueError(
                f"features shape {feats.shape}, expected ({n}, {len(self.feature_names)})")
        bad = set(labs.tolist()) - set(LABEL_ALPHABET)
        if bad:
            raise ValueError(f"labels outside alphabet {LABEL_ALPHABET}: {sorted(bad)}")
        if not np.all(np.isfinite(feats)):
            raise ValueError("feature table contains non-finite features")
        if self.dropped < 0:
            raise ValueError("dropped count must be non-negative")
        for name, arr in (("subjects", subs), ("indices", idx),
                          ("labels", labs), ("features", feats)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def n_rows(self):
        return int(self.subjects.shape[0])

    def label_counts(self):
        """Row count per label, over the full alphabet (zeros included)."""
        return {lab: int(np.sum(self.labels == lab)) for lab in LABEL_ALPHABET}


def extract_lesion_voxels(scores, threshold):
    """Voxel indices with score strictly above the threshold (label L).

    The comparison is strict: a voxel scoring exactly the threshold is
    excluded. Returns an (k, 3) index array in lexicographic voxel order.
    """
    if not isinstance(scores, LesionScoreMap):
        scores = LesionScoreMap(scores)
    thr = float(threshold)
    if not 0.0 <= thr <= 1.0:
        raise ValueError(f"threshold must lie in [0, 1], got {thr}")
    return np.argwhere(scores.data > thr)


def distance_transform_edt(mask, metric="euclidean"):
    """Exact distance (voxel units) from every voxel to the nearest mask voxel.

    Mask voxels map to 0. The default metric is Euclidean; "chebyshev"
    selects the max-per-axis metric instead.
    """
    if not isinstance(mask, Mask):
        mask = Mask(mask)
    if mask.n_true == 0:
        raise ValueError("distance transform of an empty mask is undefined")
    if metric == "euclidean":
        dist = ndimage.distance_transform_edt(~mask.data)
    elif metric == "chebyshev":
        dist = ndimage.distance_transform_cdt(~mask.data, metric="chessboard")
        dist = dist.astype(np.float64)
    else:
        raise ValueError(f"unknown metric {metric!r}")
    return Volume(np.ascontiguousarray(dist, dtype=np.float64))


def nawm_ring(scores, wm_mask, min_dist):
    """White-matter voxels at distance >= min_dist from any lesion evidence.

    The lesion reference set is {score > 0}, not the training threshold, so
    the ring keeps clear of every voxel with any lesion signal. Without a
    single positive score the distance is undefined; by convention the whole
    white-matter mask is returned and a warning is issued.
    """
    if not isinstance(scores, LesionScoreMap):
        scores = LesionScoreMap(scores)
    if not isinstance(wm_mask, Mask):
        wm_mask = Mask(wm_mask)
    if float(min_dist) <= 0.0:
        raise ValueError(f"min_dist must be positive, got {min_dist}")
    if scores.grid_shape != wm_mask.dims:
        raise ValueError(
            f"score map shape {scores.grid_shape} != mask dims {wm_mask.dims}")
    lesion = scores.positive_mask()
    if not lesion.any():
        warnings.warn("no lesion voxels: distances treated as infinite, "
                      "returning every white-matter voxel", stacklevel=2)
        return np.argwhere(wm_mask.data)
    dist = distance_transform_edt(Mask(lesion)).data
    return np.argwhere(wm_mask.data & (dist >= float(min_dist)))


def control_voxels(wm_mask):
    """All in-mask voxels of a control subject (label C)."""
    if not isinstance(wm_mask, Mask):
        wm_mask = Mask(wm_mask)
    if wm_mask.n_true == 0:
        raise ValueError("control mask is empty")
    return np.argwhere(wm_mask.data)


def _dedupe_rows(idx):
    """Unique voxel rows in lexicographic order."""
    idx = np.asarray(idx, dtype=np.intp)
    if idx.ndim != 2 or idx.shape[1] != 3:
        raise ValueError(f"index set must be (k, 3), got shape {idx.shape}")
    if idx.shape[0] == 0:
        return idx.reshape(0, 3)
    return np.unique(idx, axis=0)


def build_feature_table(feature_volumes, index_sets, subject):
    """Gather feature values at labeled voxels into a FeatureTable.

    feature_volumes: the 5 maps in FEATURE_NAMES order. index_sets maps a
    label letter to its (k, 3) voxel indices; a voxel listed under two
    different labels is a label conflict. Rows with any non-finite feature
    are dropped and counted.
    """
    vols = list(feature_volumes)
    if len(vols) != len(FEATURE_NAMES):
        raise ValueError(
            f"expected {len(FEATURE_NAMES)} feature volumes, got {len(vols)}")
    shape = vols[0].grid_shape
    for name, vol in zip(FEATURE_NAMES, vols):
        if vol.data.ndim != 3:
            raise ValueError(f"feature volume {name} must be 3D")
        if vol.grid_shape != shape:
            raise ValueError(
                f"feature volume {name} shape {vol.grid_shape} != {shape}")

    bad_labels = set(index_sets) - set(LABEL_ALPHABET)
    if bad_labels:
        raise ValueError(
            f"labels outside alphabet {LABEL_ALPHABET}: {sorted(bad_labels)}")

    # fixed alphabet order, deduped and sorted per label: deterministic rows
    per_label = {}
    for lab in LABEL_ALPHABET:
        if lab in index_sets:
            idx = _dedupe_rows(index_sets[lab])
            if idx.shape[0] > 0:
                if idx.min() < 0 or np.any(idx >= np.array(shape)):
                    raise ValueError(f"label {lab} has out-of-bounds voxel indices")
            per_label[lab] = idx

    seen = {}
    for lab, idx in per_label.items():
        for row in map(tuple, idx):
            if row in seen and seen[row] != lab:
                raise ValueError(
                    f"label conflict at voxel {row}: {seen[row]} vs {lab}")
            seen[row] = lab

    chunks_idx, chunks_lab = [], []
    for lab, idx in per_label.items():
        chunks_idx.append(idx)
        chunks_lab.append(np.full(idx.shape[0], lab, dtype="<U1"))
    if chunks_idx:
        all_idx = np.concatenate(chunks_idx, axis=0)
        all_lab = np.concatenate(chunks_lab)
    else:
        all_idx = np.zeros((0, 3), dtype=np.intp)
        all_lab = np.zeros(0, dtype="<U1")

    feats = np.stack(
        [v.data[all_idx[:, 0], all_idx[:, 1], all_idx[:, 2]] for v in vols],
        axis=1) if all_idx.shape[0] else np.zeros((0, len(FEATURE_NAMES)))
    keep = np.all(np.isfinite(feats), axis=1)
    dropped = int(np.sum(~keep))
    subs = np.full(int(keep.sum()), str(subject))
    return FeatureTable(subjects=subs, indices=all_idx[keep],
                        labels=all_lab[keep], features=feats[keep],
                        dropped=dropped)


def concat_tables(tables):
    """Stack feature tables from several subjects; dropped counts add up."""
    tables = list(tables)
    if not tables:
        raise ValueError("no tables to concatenate")
    return FeatureTable(
        subjects=np.concatenate([t.subjects for t in tables]),
        indices=np.concatenate([t.indices for t in tables], axis=0),
        labels=np.concatenate([t.labels for t in tables]),
        features=np.concatenate([t.features for t in tables], axis=0),
        dropped=int(sum(t.dropped for t in tables)),
    )
