"""Whole-pipeline acceptance gates.

One test per gate, in dependency order. Each prints a single PASS/FAIL
line with the measured numbers so a verbose run reads as a checklist.
Tolerances and runtime budgets are frozen here on purpose; loosening one
is a contract change, not a test fix.
"""

import json
import time

import numpy as np

from lesionmap.core import Mask, Volume, make_t2_grid
from lesionmap.epg import EpgParams, epg_echo_train, epg_echo_trains
from lesionmap.learn import (
    ExperimentConfig,
    LabeledDataset,
    predict_proba,
    probability_map,
    run_experiment,
    train_samme,
)
from lesionmap.met2 import (
    Met2Config,
    default_tv_weight,
    fit_met2_volume,
    nnls,
    tv_denoise_3d,
)
from lesionmap.phantom import (
    PhantomConfig,
    default_acquisition,
    default_scheme,
    make_phantom,
    simulate_dwi,
    simulate_met2,
)
from lesionmap.sampling import (
    FeatureTable,
    build_feature_table,
    concat_tables,
    control_voxels,
    distance_transform_edt,
    extract_lesion_voxels,
    nawm_ring,
)
from lesionmap.smt import (
    ShellMeans,
    fit_smt_voxel,
    fit_smt_volume,
    smt_predict,
    smt_stick_mean,
    smt_zeppelin_mean,
)
from lesionmap.io import ABLATION_SETS, build_report, render_report_text
from oracles import (
    edt_brute_force,
    isochromat_cpmg,
    nnls_exhaustive,
    stick_mean_quadrature,
    zeppelin_mean_quadrature,
)


def _check(label, ok, detail):
    print(f"[{'PASS' if ok else 'FAIL'}] {label}: {detail}")
    assert ok, f"{label}: {detail}"


def _tv_denoise_frames(vol):
    data = vol.data
    weight = default_tv_weight(data[..., 0])
    out = np.empty_like(data)
    for t in range(data.shape[3]):
        out[..., t] = tv_denoise_3d(
            Volume(data[..., t], vol.spacing, vol.affine), weight).data
    return Volume(out, vol.spacing, vol.affine)


# --------------------------------------------------------------- echo trains


def test_gate_01_refocusing_identity():
    """At a perfect 180 the echo train is pure exponential decay."""
    start = time.perf_counter()
    grid = make_t2_grid(10.0, 2000.0, 60)
    delta_te, n_echoes = 10.68, 32
    amps = epg_echo_trains(grid.points, 180.0, 1000.0, delta_te, n_echoes)
    n = np.arange(1, n_echoes + 1)
    expected = np.exp(-n[:, None] * delta_te / grid.points[None, :])
    err = float(np.abs(amps - expected).max())
    elapsed = time.perf_counter() - start
    _check("180-degree identity", err <= 1e-10 and elapsed < 1.0,
           f"max abs err {err:.2e} (tol 1e-10), {elapsed:.2f}s (budget 1s)")


def test_gate_02_bloch_equivalence():
    """Phase-graph recursion against a 10^4-spin Bloch ensemble."""
    start = time.perf_counter()
    delta_te, n_echoes, t1 = 10.68, 32, 1000.0
    worst = 0.0
    for fa in (100.0, 120.0, 150.0, 170.0):
        for t2 in (40.0, 200.0):
            epg = epg_echo_train(EpgParams(t2, t1, delta_te, n_echoes, fa))
            ref = isochromat_cpmg(t2, t1, delta_te, n_echoes, fa,
                                  n_spins=10000)
            worst = max(worst, float(np.abs((epg - ref) / ref).max()))
    elapsed = time.perf_counter() - start
    _check("Bloch ensemble equivalence", worst <= 1e-3 and elapsed < 30.0,
           f"worst per-echo rel err {worst:.2e} (tol 1e-3), "
           f"{elapsed:.1f}s (budget 30s)")


def test_gate_03_nnls_objective():
    """Active-set solver against exhaustive support enumeration."""
    start = time.perf_counter()
    rng = np.random.default_rng(3)
    worst = 0.0
    for _ in range(100):
        A = rng.standard_normal((6, 6))
        b = rng.standard_normal(6)
        x = nnls(A, b)
        obj = float(((A @ x - b) ** 2).sum())
        ref, _ = nnls_exhaustive(A, b)
        worst = max(worst, abs(obj - ref))
    elapsed = time.perf_counter() - start
    _check("NNLS objective optimality", worst <= 1e-9 and elapsed < 5.0,
           f"worst objective gap {worst:.2e} (tol 1e-9), "
           f"{elapsed:.1f}s (budget 5s)")


# ------------------------------------------------------- spectrum round trip


def test_gate_04_met2_round_trip():
    """48-cube phantom at SNR=100: flip angles, myelin fractions, simplex."""
    start = time.perf_counter()
    truth = make_phantom(size=48, seed=4)
    acq = default_acquisition()
    noisy = simulate_met2(truth, acq, snr=100.0, seed=5)
    denoised = _tv_denoise_frames(noisy)
    maps = fit_met2_volume(denoised, truth.brain_mask,
                           Met2Config(acquisition=acq))
    elapsed = time.perf_counter() - start

    wm = truth.wm_mask.data
    fa_err = np.abs(maps.fa_map.data - truth.fa_map)[wm]
    fa_ok = float(np.mean(fa_err <= 2.0))

    nawm = truth.nawm_mask.data
    cores = truth.core_mask.data
    mwf_err = np.abs(maps.f_m.data - truth.f_myelin)
    mae_nawm = float(mwf_err[nawm].mean())
    mae_core = float(mwf_err[cores].mean())

    brain = truth.brain_mask.data
    total = (maps.f_m.data + maps.f_ie.data + maps.f_csf.data)[brain]
    simplex_err = float(np.abs(total - 1.0).max())

    ok = (fa_ok >= 0.95 and mae_nawm <= 0.03 and mae_core <= 0.05
          and simplex_err <= 1e-9 and elapsed < 600.0)
    _check("multi-echo T2 round trip", ok,
           f"FA within 2deg for {fa_ok:.1%} of WM (need 95%), "
           f"MWF MAE {mae_nawm:.4f} NAWM (tol 0.03) / {mae_core:.4f} cores "
           f"(tol 0.05), simplex err {simplex_err:.1e} (tol 1e-9), "
           f"{elapsed:.0f}s (budget 600s)")


# ------------------------------------------------------------ diffusion fits


def test_gate_05_spherical_mean_closed_forms():
    """Stick and zeppelin means against numeric spherical quadrature."""
    worst = 0.0
    for b in np.linspace(700.0, 3000.0, 24):
        for lam in np.linspace(0.3e-3, 3.0e-3, 12):
            worst = max(worst, abs(smt_stick_mean(b, lam)
                                   - stick_mean_quadrature(b, lam)))
            for frac in (0.0, 0.25, 0.5, 1.0):
                perp = frac * lam
                worst = max(worst, abs(
                    smt_zeppelin_mean(b, lam, perp)
                    - zeppelin_mean_quadrature(b, lam, perp)))
    _check("spherical-mean closed forms", worst <= 1e-4,
           f"worst abs err {worst:.2e} (tol 1e-4)")


def test_gate_06_smt_round_trip():
    """Noiseless parameter recovery, then SNR=50 accuracy over phantom WM."""
    scheme = default_scheme()
    b_list = scheme.shell_bs
    n_dirs = np.array([s.n_dirs for s in scheme.shells])
    worst_fi = 0.0
    for f_i in np.linspace(0.1, 0.9, 9):
        for lam in (0.5e-3, 1.1e-3, 1.7e-3, 2.3e-3, 2.9e-3):
            means = ShellMeans(b_list, smt_predict(b_list, f_i, lam), n_dirs)
            fit = fit_smt_voxel(means)
            worst_fi = max(worst_fi, abs(fit.f_i - f_i))

    truth = make_phantom(size=48, seed=4)
    dwi = simulate_dwi(truth, scheme, snr=50.0, seed=6)
    maps = fit_smt_volume(dwi, scheme, truth.wm_mask)
    wm = truth.wm_mask.data
    mae = float(np.abs(maps.f_i.data - truth.f_i)[wm].mean())

    _check("spherical-mean round trip", worst_fi <= 1e-3 and mae <= 0.05,
           f"noiseless worst |f_i err| {worst_fi:.2e} (tol 1e-3), "
           f"SNR=50 WM MAE {mae:.4f} (tol 0.05)")


# ----------------------------------------------------------------- sampling


def test_gate_07_distance_transform_exact():
    """Library distance transform against all-pairs brute force."""
    rng = np.random.default_rng(7)
    worst = 0.0
    for _ in range(50):
        density = rng.uniform(0.005, 0.2)
        mask = rng.random((20, 20, 20)) < density
        if not mask.any():
            mask[tuple(rng.integers(0, 20, size=3))] = True
        dist = distance_transform_edt(Mask(mask)).data
        ref = edt_brute_force(mask)
        worst = max(worst, float(np.abs(dist - ref).max()))
    _check("distance transform exactness", worst == 0.0,
           f"worst deviation {worst} over 50 random 20^3 masks (must be 0)")


def test_gate_08_sampling_semantics():
    """Strict lesion threshold, ring clearance, and L/N disjointness."""
    boundary = np.zeros((4, 4, 4))
    boundary[1, 1, 1] = 0.75  # exactly at threshold: excluded
    boundary[2, 2, 2] = np.nextafter(0.75, 1.0)
    picked = extract_lesion_voxels(Volume(boundary), 0.75)
    strict_ok = (len(picked) == 1 and tuple(picked[0]) == (2, 2, 2))

    truth = make_phantom(size=48, seed=4)
    scores = truth.score_volume()
    lesions = extract_lesion_voxels(scores, 0.75)
    ring = nawm_ring(scores, truth.wm_mask, 6.0)
    dist = distance_transform_edt(Mask(scores.data > 0)).data
    ring_min = float(dist[tuple(ring.T)].min())
    l_set = {tuple(v) for v in lesions}
    n_set = {tuple(v) for v in ring}
    disjoint = not (l_set & n_set)

    ok = strict_ok and ring_min >= 6.0 and disjoint and len(lesions) > 0
    _check("sampling semantics", ok,
           f"boundary voxel excluded: {strict_ok}, ring min distance "
           f"{ring_min:.2f} (need >= 6), L/N overlap "
           f"{len(l_set & n_set)} voxels (need 0)")


# ----------------------------------------------------------------- boosting


def test_gate_09_boosting_contract():
    """Separable blobs, stage-weight sign law, probability simplex,
    bit-stable retraining."""
    rng = np.random.default_rng(9)
    centers = np.array([(0.0, 0.0), (4.0, 0.0), (2.0, 3.5)])
    X = np.concatenate([c + 0.5 * rng.standard_normal((500, 2))
                        for c in centers])
    y = np.repeat(["a", "b", "c"], 500)
    order = rng.permutation(1500)
    X, y = X[order], y[order]
    train = LabeledDataset(X[:1000], y[:1000], classes=("a", "b", "c"))

    model = train_samme(train, n_estimators=50, max_depth=2, seed=1)
    held = predict_proba(model, X[1000:])
    acc = float(np.mean(np.array(model.classes)[held.argmax(axis=1)]
                        == y[1000:]))

    k = 3
    sign_law = all((a > 0) == (e < 1 - 1 / k)
                   for a, e in zip(model.alphas, model.stage_errors)
                   if np.isfinite(e))
    row_err = float(np.abs(held.sum(axis=1) - 1.0).max())
    twin = train_samme(train, n_estimators=50, max_depth=2, seed=1)
    stable = (json.dumps(model.to_dict(), sort_keys=True)
              == json.dumps(twin.to_dict(), sort_keys=True))

    ok = acc >= 0.95 and sign_law and row_err <= 1e-12 and stable
    _check("boosting contract", ok,
           f"held-out accuracy {acc:.3f} (need 0.95), sign law {sign_law}, "
           f"probability row err {row_err:.1e} (tol 1e-12), "
           f"bit-stable retrain {stable}")


# --------------------------------------------------------------- end to end


def _pipeline_subject(seed, n_lesions, scheme, acq):
    config = PhantomConfig(n_lesions=n_lesions)
    truth = make_phantom(size=44, config=config, seed=seed)
    met2 = simulate_met2(truth, acq, snr=100.0, seed=seed + 100)
    dwi = simulate_dwi(truth, scheme, snr=50.0, seed=seed + 200)
    denoised = _tv_denoise_frames(met2)
    mmaps = fit_met2_volume(denoised, truth.wm_mask,
                            Met2Config(acquisition=acq))
    smaps = fit_smt_volume(dwi, scheme, truth.wm_mask)
    features = [smaps.f_i, smaps.f_e, mmaps.f_m, mmaps.f_ie, mmaps.f_csf]
    return truth, features


def test_gate_10_end_to_end():
    """Simulate, denoise, fit, sample, train, predict; judge the held-out
    subject and the lesion-free control."""
    start = time.perf_counter()
    scheme = default_scheme()
    acq = default_acquisition()

    tables = []
    predict_inputs = {}
    for subject, seed, n_lesions in (("train01", 21, 4),
                                     ("holdout01", 22, 4),
                                     ("control01", 23, 0)):
        truth, features = _pipeline_subject(seed, n_lesions, scheme, acq)
        if n_lesions > 0:
            scores = truth.score_volume()
            sets = {"L": extract_lesion_voxels(scores, 0.75),
                    "N": nawm_ring(scores, truth.wm_mask, 6.0)}
        else:
            sets = {"C": control_voxels(truth.wm_mask)}
        tables.append(build_feature_table(features, sets, subject))
        predict_inputs[subject] = (truth, features)

    table = concat_tables(tables[:2])  # the L/N subjects
    config = ExperimentConfig(k_folds=5, n_estimators=100, max_depth=2,
                              seed=10, holdout_subjects=("holdout01",))
    report = run_experiment(table, "LN", config)

    maps = {}
    for subject in ("holdout01", "control01"):
        truth, features = predict_inputs[subject]
        prob = probability_map(report.model, features, truth.wm_mask,
                               target_class="L")
        maps[subject] = float(prob.data[truth.wm_mask.data].mean())
    elapsed = time.perf_counter() - start

    holdout = report.holdout_accuracy
    separated = maps["holdout01"] > maps["control01"]
    ok = (holdout is not None and holdout >= 0.90 and separated
          and elapsed < 1200.0)
    _check("end-to-end pipeline", ok,
           f"held-out voxel accuracy {holdout:.3f} (need 0.90), mean WM "
           f"probability lesion {maps['holdout01']:.4f} vs control "
           f"{maps['control01']:.4f} (must be higher), "
           f"{elapsed:.0f}s (budget 1200s)")


# ------------------------------------------------------------------- report


def test_gate_11_report_shapes():
    """Fold-score table and feature-subset ablation table structure."""
    rng = np.random.default_rng(11)
    centers = {"L": (0.2, 0.8, 0.02, 0.9, 0.05),
               "N": (0.7, 0.3, 0.12, 0.85, 0.02),
               "C": (0.45, 0.55, 0.07, 0.6, 0.3)}
    rows, labels, subjects = [], [], []
    for label, mid in centers.items():
        pts = np.clip(mid + 0.04 * rng.standard_normal((90, 5)), 0, 1)
        rows.append(pts)
        labels += [label] * 90
        subjects += [f"s{i % 3}" for i in range(90)]
    table = FeatureTable(subjects=np.array(subjects),
                         indices=np.zeros((270, 3), dtype=int),
                         labels=np.array(labels),
                         features=np.concatenate(rows))

    k = 5
    crossval = {}
    ablation = {name: {} for name in ABLATION_SETS}
    for experiment in ("LNC", "LN", "LC"):
        config = ExperimentConfig(k_folds=k, n_estimators=10, seed=2)
        crossval[experiment] = run_experiment(table, experiment, config)
        for name, idx in ABLATION_SETS.items():
            sub = ExperimentConfig(k_folds=k, n_estimators=10, seed=2,
                                   feature_indices=idx)
            ablation[name][experiment] = run_experiment(
                table, experiment, sub).mean_accuracy

    doc = build_report(crossval, ablation)
    names = [r["experiment"] for r in doc["crossval"]["rows"]]
    fold_counts = {len(r["fold_scores"]) for r in doc["crossval"]["rows"]}
    means_ok = all(np.isclose(r["mean_accuracy"],
                              np.mean(r["fold_scores"]))
                   for r in doc["crossval"]["rows"])
    ablation_rows = [r["features"] for r in doc["ablation"]["rows"]]

    text = render_report_text(doc)
    lines = text.splitlines()
    head = lines[0].split()
    table1_ok = head == (["Test", "scores"]
                         + [f"k-{i + 1}" for i in range(k)]
                         + ["mean", "accuracy"])
    ablation_head = next(line for line in lines
                         if line.startswith("Mean accuracy"))
    table2_ok = ablation_head.split()[2:] == ["L-N-C", "L-N", "L-C"]

    ok = (names == ["L-N-C", "L-N", "L-C"] and fold_counts == {k}
          and means_ok and ablation_rows == ["Diff", "MET2", "combined"]
          and table1_ok and table2_ok)
    _check("report table shapes", ok,
           f"experiments {names}, fold columns {sorted(fold_counts)}, "
           f"ablation rows {ablation_rows}, headers ok "
           f"{table1_ok and table2_ok}")
