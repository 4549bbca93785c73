"""Text and JSON carriers: gradient schemes, feature-table CSV, model and
report documents, and run manifests. All writes are atomic (temp + rename).
"""

import csv
import io as _io
import json
import os
import tempfile
import warnings

import numpy as np

from .core import DiffusionScheme
from .errors import InputFormatError
from .learn import BoostModel
from .sampling import FEATURE_NAMES, LABEL_ALPHABET, FeatureTable

__all__ = [
    "read_scheme",
    "write_scheme",
    "read_feature_table",
    "write_feature_table",
    "save_model",
    "load_model",
    "save_json",
    "save_text",
    "load_json",
    "write_manifest",
    "build_report",
    "render_report_text",
    "package_versions",
    "CSV_HEADER",
]

CSV_HEADER = ("subject", "i", "j", "k", "label") + FEATURE_NAMES


def _atomic_write(path, payload):
    """Write bytes (or text) so the target never holds a partial file."""
    path = str(path)
    if isinstance(payload, str):
        payload = payload.encode("utf-8")
    parent = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=parent, suffix=".part")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def package_versions():
    """Version stamps recorded into every manifest."""
    import importlib.metadata

    import scipy

    try:
        own = importlib.metadata.version("lesionmap")
    except importlib.metadata.PackageNotFoundError:
        own = "unknown"
    return {"lesionmap": own, "numpy": np.__version__, "scipy": scipy.__version__}


# ------------------------------------------------------------------ schemes

def read_scheme(bval_path, bvec_path, tolerance=50.0):
    """Diffusion scheme from a one-row b-value file and a three-row
    (x, y, z) gradient file.

    Gradients on diffusion-weighted frames are normalized to unit length;
    a deviation beyond 1e-3 draws a warning, a zero vector is an error.
    """
    try:
        bvals = np.atleast_1d(np.loadtxt(str(bval_path), dtype=np.float64))
        rows = np.atleast_2d(np.loadtxt(str(bvec_path), dtype=np.float64))
    except ValueError as err:
        raise InputFormatError(f"unparseable scheme file: {err}")
    if bvals.ndim != 1:
        raise InputFormatError(
            f"{bval_path}: expected a single row of b-values, got shape {bvals.shape}")
    if rows.shape[0] != 3:
        raise InputFormatError(
            f"{bvec_path}: expected 3 rows (x, y, z), got {rows.shape[0]}")
    bvecs = rows.T
    if bvecs.shape[0] != bvals.size:
        raise InputFormatError(
            f"frame count mismatch: {bvals.size} b-values vs {bvecs.shape[0]} gradients")
    dw = bvals > tolerance
    norms = np.linalg.norm(bvecs, axis=1)
    if np.any(norms[dw] < 1e-8):
        frame = int(np.where(dw & (norms < 1e-8))[0][0])
        raise InputFormatError(
            f"zero gradient vector on diffusion-weighted frame {frame}")
    if np.any(np.abs(norms[dw] - 1.0) > 1e-3):
        worst = float(np.max(np.abs(norms[dw] - 1.0)))
        warnings.warn(
            f"gradient norms deviate from 1 by up to {worst:.3g}; normalizing",
            stacklevel=2)
    out = bvecs.copy()
    out[dw] = bvecs[dw] / norms[dw, None]
    return DiffusionScheme(bvals, out, tolerance=tolerance)


def write_scheme(scheme, bval_path, bvec_path):
    """Write a scheme as the paired text files read_scheme consumes."""
    bvals = " ".join(repr(float(b)) for b in scheme.bvals)
    rows = []
    for axis in range(3):
        rows.append(" ".join(repr(float(v)) for v in scheme.bvecs[:, axis]))
    _atomic_write(bval_path, bvals + "\n")
    _atomic_write(bvec_path, "\n".join(rows) + "\n")


# ------------------------------------------------------------- feature CSV

def write_feature_table(table, path):
    """Feature table as CSV under the fixed header."""
    buf = _io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_HEADER)
    for row in range(table.n_rows):
        i, j, k = (int(v) for v in table.indices[row])
        writer.writerow(
            [str(table.subjects[row]), i, j, k, str(table.labels[row])]
            + [repr(float(v)) for v in table.features[row]])
    _atomic_write(path, buf.getvalue())


def read_feature_table(path):
    """Feature table back from CSV; the header must match exactly."""
    with open(str(path), newline="") as f:
        reader = csv.reader(f)
        try:
            header = next(reader)
        except StopIteration:
            raise InputFormatError(f"{path}: empty file")
        if tuple(header) != CSV_HEADER:
            raise InputFormatError(
                f"{path}: header {header} does not match {list(CSV_HEADER)}")
        subjects, indices, labels, feats = [], [], [], []
        for n, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(CSV_HEADER):
                raise InputFormatError(
                    f"{path}:{n}: expected {len(CSV_HEADER)} fields, got {len(row)}")
            if row[4] not in LABEL_ALPHABET:
                raise InputFormatError(f"{path}:{n}: unknown label {row[4]!r}")
            subjects.append(row[0])
            try:
                indices.append([int(v) for v in row[1:4]])
                feats.append([float(v) for v in row[5:]])
            except ValueError as err:
                raise InputFormatError(f"{path}:{n}: {err}")
            labels.append(row[4])
    n = len(subjects)
    return FeatureTable(
        subjects=np.array(subjects, dtype=str),
        indices=np.array(indices, dtype=np.intp).reshape(n, 3),
        labels=np.array(labels, dtype="<U1"),
        features=np.array(feats, dtype=np.float64).reshape(n, len(FEATURE_NAMES)),
        dropped=0)


# ------------------------------------------------------------------- JSON

def save_json(doc, path):
    _atomic_write(path, json.dumps(doc, indent=2, sort_keys=True) + "\n")


def save_text(text, path):
    _atomic_write(path, text)


def load_json(path):
    with open(str(path)) as f:
        try:
            return json.load(f)
        except json.JSONDecodeError as err:
            raise InputFormatError(f"{path}: invalid JSON: {err}")


def save_model(model, path, config=None, seed=None):
    """Model document: classes, feature_names, stages, config, seed."""
    doc = model.to_dict()
    doc["config"] = config
    doc["seed"] = seed
    save_json(doc, path)


def load_model(path):
    """(BoostModel, config, seed) from a model document."""
    doc = load_json(path)
    missing = {"classes", "feature_names", "stages"} - set(doc)
    if missing:
        raise InputFormatError(f"{path}: model document missing {sorted(missing)}")
    try:
        model = BoostModel.from_dict(doc)
    except (KeyError, TypeError, ValueError) as err:
        raise InputFormatError(f"{path}: malformed model document: {err}")
    return model, doc.get("config"), doc.get("seed")


def write_manifest(path, command, inputs, outputs, config, seeds):
    """Provenance record: everything needed to reproduce the run."""
    save_json({
        "command": command,
        "inputs": {k: str(v) for k, v in dict(inputs).items()},
        "outputs": {k: str(v) for k, v in dict(outputs).items()},
        "config": config,
        "seeds": seeds,
        "versions": package_versions(),
    }, path)


# ------------------------------------------------------------------ report

ABLATION_SETS = {
    "Diff": (0, 1),
    "MET2": (2, 3, 4),
    "combined": (0, 1, 2, 3, 4),
}


def _dash(experiment):
    return "-".join(experiment)


def _report_row(name, rep):
    """Normalize an ExperimentReport or its to_dict() form into a row."""
    if isinstance(rep, dict):
        get = rep.get
    else:
        def get(key, default=None):
            return getattr(rep, key, default)
    imps = np.asarray(get("importances"), dtype=np.float64)
    return {
        "experiment": _dash(name),
        "fold_scores": [float(s) for s in get("fold_scores")],
        "mean_accuracy": float(get("mean_accuracy")),
        "confusion_counts": np.asarray(get("confusion_counts")).tolist(),
        "confusion_rates": np.asarray(get("confusion_rates")).tolist(),
        "importances": {n: float(v) for n, v in
                        zip(get("feature_names"), imps)},
        "holdout_accuracy": get("holdout_accuracy"),
    }


def build_report(crossval, ablation=None):
    """Report document from per-experiment results.

    crossval maps experiment name (e.g. "LNC") to its ExperimentReport or
    to that report's dict form; ablation, when given, maps feature-set
    name ("Diff"/"MET2"/"combined") to {experiment: mean accuracy}.
    """
    if not crossval:
        raise ValueError("report needs at least one experiment result")
    k = None
    rows = []
    for name, rep in crossval.items():
        row = _report_row(name, rep)
        if k is None:
            k = len(row["fold_scores"])
        elif len(row["fold_scores"]) != k:
            raise ValueError("experiments were run with different fold counts")
        rows.append(row)
    doc = {"crossval": {"k_folds": k, "rows": rows}}
    if ablation is not None:
        doc["ablation"] = {
            "feature_sets": {name: [FEATURE_NAMES[i] for i in idx]
                             for name, idx in ABLATION_SETS.items()},
            "rows": [{"features": name,
                      "mean_accuracy": {_dash(e): float(v)
                                        for e, v in scores.items()}}
                     for name, scores in ablation.items()],
        }
    return doc


def render_report_text(doc):
    """Plain-text tables: fold scores + mean per experiment, then the
    feature-set ablation when present."""
    lines = []
    cv = doc["crossval"]
    k = cv["k_folds"]
    head = ["Test scores"] + [f"k-{i + 1}" for i in range(k)] + ["mean accuracy"]
    table = [head]
    for row in cv["rows"]:
        table.append([row["experiment"]]
                     + [f"{s:.3f}" for s in row["fold_scores"]]
                     + [f"{row['mean_accuracy']:.3f}"])
    lines.extend(_format_table(table))
    if "ablation" in doc:
        lines.append("")
        experiments = [r["experiment"] for r in cv["rows"]]
        table = [["Mean accuracy"] + experiments]
        for row in doc["ablation"]["rows"]:
            table.append([row["features"]]
                         + [f"{row['mean_accuracy'][e]:.3f}"
                            if e in row["mean_accuracy"] else "-"
                            for e in experiments])
        lines.extend(_format_table(table))
    return "\n".join(lines) + "\n"


def _format_table(rows):
    widths = [max(len(r[c]) for r in rows) for c in range(len(rows[0]))]
    out = []
    for r in rows:
        out.append("  ".join(v.ljust(w) for v, w in zip(r, widths)).rstrip())
    return out
