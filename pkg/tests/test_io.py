import json

import numpy as np
import pytest

from lesionmap.errors import InputFormatError
from lesionmap.io import (
    CSV_HEADER,
    build_report,
    load_json,
    load_model,
    read_feature_table,
    read_scheme,
    render_report_text,
    save_model,
    write_feature_table,
    write_manifest,
    write_scheme,
)
from lesionmap.learn import ExperimentConfig, run_experiment, train_samme, LabeledDataset
from lesionmap.phantom import default_scheme
from lesionmap.sampling import FEATURE_NAMES, FeatureTable


def _write_pair(tmp_path, bvals, bvecs):
    bval_p = tmp_path / "s.bval"
    bvec_p = tmp_path / "s.bvec"
    bval_p.write_text(" ".join(str(b) for b in bvals) + "\n")
    rows = [" ".join(str(v[a]) for v in bvecs) for a in range(3)]
    bvec_p.write_text("\n".join(rows) + "\n")
    return bval_p, bvec_p


class TestScheme:
    def test_paper_shaped_round_trip(self, tmp_path):
        scheme = default_scheme()
        bval_p = tmp_path / "p.bval"
        bvec_p = tmp_path / "p.bvec"
        write_scheme(scheme, bval_p, bvec_p)
        back = read_scheme(bval_p, bvec_p)
        assert back.n_frames == 149
        assert len(back.b0_indices) == 11
        assert back.n_shells == 4
        assert np.array_equal(back.bvals, scheme.bvals)
        assert np.array_equal(back.bvecs, scheme.bvecs)
        assert [s.b for s in back.shells] == [s.b for s in scheme.shells]

    def test_unnormalized_vector_warns_and_fixes(self, tmp_path):
        paths = _write_pair(tmp_path, [0, 1000], [(0, 0, 0), (0.5, 0, 0)])
        with pytest.warns(UserWarning, match="normalizing"):
            scheme = read_scheme(*paths)
        assert np.allclose(scheme.bvecs[1], [1.0, 0.0, 0.0])

    def test_small_deviation_fixed_silently(self, tmp_path):
        v = 1.0 + 5e-4
        paths = _write_pair(tmp_path, [0, 1000], [(0, 0, 0), (v, 0, 0)])
        import warnings as w
        with w.catch_warnings():
            w.simplefilter("error")
            scheme = read_scheme(*paths)
        assert scheme.bvecs[1, 0] == 1.0

    def test_zero_vector_on_dw_frame(self, tmp_path):
        paths = _write_pair(tmp_path, [0, 1000], [(0, 0, 0), (0, 0, 0)])
        with pytest.raises(InputFormatError, match="zero gradient"):
            read_scheme(*paths)

    def test_zero_vectors_fine_on_b0(self, tmp_path):
        paths = _write_pair(tmp_path, [0, 0, 1000],
                            [(0, 0, 0), (0, 0, 0), (0, 0, 1)])
        scheme = read_scheme(*paths)
        assert scheme.b0_indices == (0, 1)

    def test_count_mismatch(self, tmp_path):
        paths = _write_pair(tmp_path, [0, 1000, 2000],
                            [(0, 0, 0), (1, 0, 0)])
        with pytest.raises(InputFormatError, match="mismatch"):
            read_scheme(*paths)

    def test_wrong_row_count(self, tmp_path):
        bval_p = tmp_path / "s.bval"
        bvec_p = tmp_path / "s.bvec"
        bval_p.write_text("0 1000\n")
        bvec_p.write_text("0 1\n0 0\n")  # only x and y rows
        with pytest.raises(InputFormatError, match="3 rows"):
            read_scheme(bval_p, bvec_p)

    def test_unparseable_text(self, tmp_path):
        bval_p = tmp_path / "s.bval"
        bvec_p = tmp_path / "s.bvec"
        bval_p.write_text("zero one\n")
        bvec_p.write_text("0\n0\n1\n")
        with pytest.raises(InputFormatError, match="unparseable"):
            read_scheme(bval_p, bvec_p)


def _small_table(rng, n=12):
    labels = np.array(["L", "N", "C", "N"] * (n // 4))
    return FeatureTable(
        subjects=np.array([f"s{r % 3}" for r in range(n)]),
        indices=rng.integers(0, 30, size=(n, 3)).astype(np.intp),
        labels=labels,
        features=rng.uniform(0, 1, size=(n, 5)),
        dropped=0)


class TestFeatureCsv:
    def test_round_trip_bit_exact(self, tmp_path):
        table = _small_table(np.random.default_rng(0))
        p = tmp_path / "t.csv"
        write_feature_table(table, p)
        back = read_feature_table(p)
        assert np.array_equal(back.subjects, table.subjects)
        assert np.array_equal(back.indices, table.indices)
        assert np.array_equal(back.labels, table.labels)
        assert back.features.tobytes() == table.features.tobytes()

    def test_header_is_fixed(self, tmp_path):
        table = _small_table(np.random.default_rng(1))
        p = tmp_path / "t.csv"
        write_feature_table(table, p)
        first = p.read_text().splitlines()[0]
        assert first == "subject,i,j,k,label," + ",".join(FEATURE_NAMES)

    def test_header_mismatch(self, tmp_path):
        p = tmp_path / "t.csv"
        p.write_text("a,b,c\n")
        with pytest.raises(InputFormatError, match="header"):
            read_feature_table(p)

    def test_empty_file(self, tmp_path):
        p = tmp_path / "t.csv"
        p.write_text("")
        with pytest.raises(InputFormatError, match="empty"):
            read_feature_table(p)

    def test_header_only_gives_zero_rows(self, tmp_path):
        p = tmp_path / "t.csv"
        p.write_text(",".join(CSV_HEADER) + "\n")
        assert read_feature_table(p).n_rows == 0

    def test_bad_label(self, tmp_path):
        p = tmp_path / "t.csv"
        p.write_text(",".join(CSV_HEADER) + "\n"
                     + "s0,1,2,3,X,0.1,0.2,0.3,0.4,0.5\n")
        with pytest.raises(InputFormatError, match="unknown label"):
            read_feature_table(p)

    def test_bad_field_count(self, tmp_path):
        p = tmp_path / "t.csv"
        p.write_text(",".join(CSV_HEADER) + "\ns0,1,2,3,L,0.1\n")
        with pytest.raises(InputFormatError, match="fields"):
            read_feature_table(p)

    def test_bad_number(self, tmp_path):
        p = tmp_path / "t.csv"
        p.write_text(",".join(CSV_HEADER) + "\n"
                     + "s0,1,2,three,L,0.1,0.2,0.3,0.4,0.5\n")
        with pytest.raises(InputFormatError):
            read_feature_table(p)


class TestModelJson:
    def _model(self):
        rng = np.random.default_rng(0)
        X = np.concatenate([rng.normal(0, 1, (40, 3)), rng.normal(4, 1, (40, 3))])
        y = np.array([0] * 40 + [1] * 40)
        return train_samme(LabeledDataset(X, y, (0, 1)), n_estimators=5)

    def test_round_trip_with_envelope(self, tmp_path):
        model = self._model()
        p = tmp_path / "m.json"
        save_model(model, p, config={"max_depth": 2}, seed=7)
        back, config, seed = load_model(p)
        assert config == {"max_depth": 2}
        assert seed == 7
        assert json.dumps(back.to_dict(), sort_keys=True) == \
            json.dumps(model.to_dict(), sort_keys=True)

    def test_document_schema(self, tmp_path):
        p = tmp_path / "m.json"
        save_model(self._model(), p, config=None, seed=3)
        doc = load_json(p)
        assert set(doc) == {"classes", "feature_names", "stages", "config", "seed"}
        assert all(set(s) == {"alpha", "error", "tree"} for s in doc["stages"])

    def test_missing_key_rejected(self, tmp_path):
        p = tmp_path / "m.json"
        p.write_text(json.dumps({"classes": [0, 1]}))
        with pytest.raises(InputFormatError, match="missing"):
            load_model(p)

    def test_invalid_json(self, tmp_path):
        p = tmp_path / "m.json"
        p.write_text("{not json")
        with pytest.raises(InputFormatError, match="JSON"):
            load_model(p)

    def test_malformed_stage(self, tmp_path):
        p = tmp_path / "m.json"
        p.write_text(json.dumps({"classes": [0, 1], "feature_names": ["x"],
                                 "stages": [{"alpha": 1.0}]}))
        with pytest.raises(InputFormatError, match="malformed"):
            load_model(p)


class TestManifest:
    def test_manifest_fields(self, tmp_path):
        p = tmp_path / "run.json"
        write_manifest(p, "train", inputs={"table": "t.csv"},
                       outputs={"model": "m.json"},
                       config={"k": 5}, seeds={"train": 3})
        doc = load_json(p)
        assert set(doc) == {"command", "inputs", "outputs", "config",
                            "seeds", "versions"}
        assert doc["command"] == "train"
        assert set(doc["versions"]) == {"lesionmap", "numpy", "scipy"}
        assert doc["seeds"] == {"train": 3}

    def test_no_temp_leftovers(self, tmp_path):
        write_manifest(tmp_path / "run.json", "x", {}, {}, None, {})
        assert [f for f in tmp_path.iterdir() if f.suffix == ".part"] == []


def _reports(rng):
    centers = {"L": (0.2, 0.8, 0.02, 0.9, 0.05),
               "N": (0.7, 0.3, 0.12, 0.85, 0.02),
               "C": (0.45, 0.55, 0.07, 0.6, 0.3)}
    rows_s, rows_i, rows_l, rows_f = [], [], [], []
    count = 0
    for label, center in centers.items():
        for _ in range(40):
            rows_s.append(f"s{count % 3}")
            rows_i.append((count, 0, 0))
            rows_l.append(label)
            rows_f.append(np.clip(np.asarray(center) + rng.normal(0, 0.05, 5), 0, 1))
            count += 1
    table = FeatureTable(subjects=np.array(rows_s),
                         indices=np.array(rows_i, dtype=np.intp),
                         labels=np.array(rows_l),
                         features=np.array(rows_f), dropped=0)
    cfg = ExperimentConfig(k_folds=3, n_estimators=8, seed=0)
    return {e: run_experiment(table, e, cfg) for e in ("LNC", "LN", "LC")}


class TestReport:
    def test_document_shape(self):
        reports = _reports(np.random.default_rng(0))
        ablation = {"Diff": {"LNC": 0.5, "LN": 0.7},
                    "MET2": {"LNC": 0.55, "LN": 0.72},
                    "combined": {"LNC": 0.6, "LN": 0.85}}
        doc = build_report(reports, ablation)
        assert doc["crossval"]["k_folds"] == 3
        names = [r["experiment"] for r in doc["crossval"]["rows"]]
        assert names == ["L-N-C", "L-N", "L-C"]
        for row in doc["crossval"]["rows"]:
            assert len(row["fold_scores"]) == 3
            assert row["mean_accuracy"] == pytest.approx(
                np.mean(row["fold_scores"]))
            assert set(row["importances"]) == set(FEATURE_NAMES)
        ab_rows = [r["features"] for r in doc["ablation"]["rows"]]
        assert ab_rows == ["Diff", "MET2", "combined"]
        json.dumps(doc)  # must be serializable as-is

    def test_text_render_structure(self):
        reports = _reports(np.random.default_rng(1))
        ablation = {"Diff": {"LNC": 0.5}, "MET2": {"LNC": 0.55},
                    "combined": {"LNC": 0.6}}
        text = render_report_text(build_report(reports, ablation))
        lines = text.splitlines()
        assert lines[0].split() == ["Test", "scores", "k-1", "k-2", "k-3",
                                    "mean", "accuracy"]
        assert lines[1].startswith("L-N-C")
        assert lines[2].startswith("L-N")
        assert lines[3].startswith("L-C")
        ab_head = next(l for l in lines if l.startswith("Mean accuracy"))
        assert "L-N-C" in ab_head
        assert any(l.startswith("Diff") for l in lines)
        assert any(l.startswith("MET2") for l in lines)
        assert any(l.startswith("combined") for l in lines)

    def test_mismatched_fold_counts_rejected(self):
        reports = _reports(np.random.default_rng(2))
        class Stub:
            fold_scores = (0.5, 0.6)
            mean_accuracy = 0.55
            confusion_counts = np.zeros((2, 2), dtype=int)
            confusion_rates = np.zeros((2, 2))
            feature_names = FEATURE_NAMES
            importances = np.full(5, 0.2)
            holdout_accuracy = None
        mixed = {"LNC": reports["LNC"], "LN": Stub()}
        with pytest.raises(ValueError, match="fold counts"):
            build_report(mixed)

    def test_empty_report_rejected(self):
        with pytest.raises(ValueError, match="at least one"):
            build_report({})
