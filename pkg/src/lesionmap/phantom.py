"""Synthetic ground truth and forward-simulated acquisitions.

A phantom is a cube holding per-voxel compartment fractions, relaxation
times, diffusion parameters, fiber directions, a refocusing flip-angle
field, a lesion-score map and a region label per voxel. Forward simulation
reuses the same echo-train and compartment-signal code paths the fitting
modules invert, so noiseless round trips are exact by construction; noise
is Rician, applied to the complex signal before taking magnitude.
"""

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import gaussian_filter

from .core import AcquisitionMET2, DiffusionScheme, Mask, Volume
from .epg import epg_echo_trains
from .sampling import distance_transform_edt

__all__ = [
    "REGION_LABELS",
    "BACKGROUND", "WM", "NAWM", "RIM", "CORE", "CSF",
    "PhantomConfig",
    "PhantomTruth",
    "make_phantom",
    "simulate_met2",
    "simulate_dwi",
    "fibonacci_directions",
    "default_scheme",
    "default_acquisition",
]

REGION_LABELS = ("background", "wm", "nawm", "rim", "core", "csf")
BACKGROUND, WM, NAWM, RIM, CORE, CSF = range(6)


def _check_simplex(name, fractions):
    f = np.asarray(fractions, dtype=np.float64)
    if f.shape != (3,):
        raise ValueError(f"{name} must have 3 entries, got shape {f.shape}")
    if np.any(f < 0.0) or abs(f.sum() - 1.0) > 1e-12:
        raise ValueError(f"{name} is off the simplex: {f.tolist()}")
    return tuple(float(v) for v in f)


@dataclass(frozen=True)
class PhantomConfig:
    """Tissue parameters and lesion geometry for make_phantom.

    Compartment triples are (myelin, intra/extra-cellular, CSF). Lesion
    cores must have lower myelin fraction and f_i and a longer IE T2 than
    the surrounding white matter; rims blend linearly between the two.
    """

    wm_fractions: tuple = (0.15, 0.82, 0.03)
    core_fractions: tuple = (0.05, 0.90, 0.05)
    wm_t2: tuple = (20.0, 80.0, 1500.0)  # ms
    core_ie_t2: float = 110.0  # ms
    wm_f_i: float = 0.70
    core_f_i: float = 0.40
    wm_lambda_par: float = 1.7e-3  # mm^2/s
    core_lambda_par: float = 2.0e-3
    csf_lambda_par: float = 2.9e-3
    fa_range: tuple = (120.0, 170.0)  # degrees
    n_lesions: int = 4
    core_radius_range: tuple = (2.0, 2.6)  # voxels
    rim_width: float = 2.0
    nawm_min_dist: float = 6.0
    t1_tissue: float = 1000.0  # ms
    t1_csf: float = 4000.0

    def __post_init__(self):
        wm = _check_simplex("wm_fractions", self.wm_fractions)
        core = _check_simplex("core_fractions", self.core_fractions)
        object.__setattr__(self, "wm_fractions", wm)
        object.__setattr__(self, "core_fractions", core)
        if any(t <= 0 for t in self.wm_t2) or self.core_ie_t2 <= 0:
            raise ValueError("T2 values must be positive")
        if not core[0] < wm[0]:
            raise ValueError("lesion cores need lower myelin fraction than WM")
        if not self.core_f_i < self.wm_f_i:
            raise ValueError("lesion cores need lower f_i than WM")
        if not self.core_ie_t2 > self.wm_t2[1]:
            raise ValueError("lesion cores need elevated IE T2")
        if not 0.0 <= self.core_f_i <= 1.0 or not 0.0 <= self.wm_f_i <= 1.0:
            raise ValueError("f_i values must lie in [0, 1]")
        lo, hi = self.fa_range
        if not (90.0 <= lo < hi <= 180.0):
            raise ValueError(f"fa_range must satisfy 90 <= lo < hi <= 180, got {self.fa_range}")
        if self.n_lesions < 0:
            raise ValueError("n_lesions must be >= 0")
        rlo, rhi = self.core_radius_range
        if not (0 < rlo <= rhi) or self.rim_width <= 0:
            raise ValueError("lesion radii and rim width must be positive")
        if self.nawm_min_dist <= 0:
            raise ValueError("nawm_min_dist must be positive")
        if min(self.wm_lambda_par, self.core_lambda_par, self.csf_lambda_par) <= 0:
            raise ValueError("diffusivities must be positive")
        if self.t1_tissue <= 0 or self.t1_csf <= 0:
            raise ValueError("T1 values must be positive")


@dataclass(frozen=True, eq=False)
class PhantomTruth:
    """Per-voxel ground truth on a cubic grid.

    Compartment fractions lie on the simplex inside the brain and are zero
    outside; the score map is positive exactly on lesion rims and cores;
    labels partition the grid over the fixed REGION_LABELS alphabet.
    """

    f_myelin: np.ndarray
    f_ie: np.ndarray
    f_csf: np.ndarray
    t2_myelin: np.ndarray
    t2_ie: np.ndarray
    t2_csf: np.ndarray
    f_i: np.ndarray
    lambda_par: np.ndarray
    fiber_dirs: np.ndarray  # (..., 3) unit vectors
    fa_map: np.ndarray  # degrees
    lesion_score: np.ndarray
    labels: np.ndarray  # uint8 codes into REGION_LABELS
    t1_tissue: float = 1000.0
    t1_csf: float = 4000.0

    def __post_init__(self):
        shape = np.asarray(self.labels).shape
        if len(shape) != 3:
            raise ValueError(f"labels must be 3D, got shape {shape}")
        scalar_fields = ("f_myelin", "f_ie", "f_csf", "t2_myelin", "t2_ie",
                         "t2_csf", "f_i", "lambda_par", "fa_map", "lesion_score")
        for name in scalar_fields:
            arr = np.ascontiguousarray(getattr(self, name), dtype=np.float64)
            if arr.shape != shape:
                raise ValueError(f"{name} shape {arr.shape} != {shape}")
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        dirs = np.ascontiguousarray(self.fiber_dirs, dtype=np.float64)
        if dirs.shape != shape + (3,):
            raise ValueError(f"fiber_dirs shape {dirs.shape} != {shape + (3,)}")
        dirs.setflags(write=False)
        object.__setattr__(self, "fiber_dirs", dirs)
        labels = np.ascontiguousarray(self.labels, dtype=np.uint8)
        labels.setflags(write=False)
        object.__setattr__(self, "labels", labels)

        if labels.max(initial=0) >= len(REGION_LABELS):
            raise ValueError("labels outside the region alphabet")
        brain = labels != BACKGROUND
        total = self.f_myelin + self.f_ie + self.f_csf
        if np.any(np.abs(total[brain] - 1.0) > 1e-12):
            raise ValueError("brain-voxel compartment fractions are off the simplex")
        if np.any(total[~brain] != 0.0):
            raise ValueError("background voxels must have zero fractions")
        for name in ("f_myelin", "f_ie", "f_csf"):
            if np.any(getattr(self, name) < 0.0):
                raise ValueError(f"{name} has negative entries")
        if np.any(self.fa_map[brain] < 90.0) or np.any(self.fa_map[brain] > 180.0):
            raise ValueError("fa_map must lie in [90, 180] degrees inside the brain")
        norms = np.linalg.norm(dirs[brain], axis=-1)
        if norms.size and np.any(np.abs(norms - 1.0) > 1e-12):
            raise ValueError("fiber_dirs must be unit vectors inside the brain")
        score = self.lesion_score
        if score.min() < 0.0 or score.max(initial=0.0) > 1.0:
            raise ValueError("lesion scores must lie in [0, 1]")
        lesion = (labels == RIM) | (labels == CORE)
        if np.any(score[~lesion] != 0.0):
            raise ValueError("score must be 0 outside lesion rims and cores")
        if np.any(score[lesion] <= 0.0):
            raise ValueError("score must be positive on lesion voxels")
        if np.any(np.array([self.t2_myelin, self.t2_ie, self.t2_csf]) <= 0.0):
            raise ValueError("per-voxel T2 values must be positive")
        if self.t1_tissue <= 0 or self.t1_csf <= 0:
            raise ValueError("T1 values must be positive")

    @property
    def shape(self):
        return self.labels.shape

    @property
    def brain_mask(self):
        return Mask(self.labels != BACKGROUND)

    @property
    def wm_mask(self):
        """All white matter, lesions included."""
        return Mask(np.isin(self.labels, (WM, NAWM, RIM, CORE)))

    @property
    def nawm_mask(self):
        return Mask(self.labels == NAWM)

    @property
    def core_mask(self):
        return Mask(self.labels == CORE)

    @property
    def rim_mask(self):
        return Mask(self.labels == RIM)

    @property
    def csf_mask(self):
        return Mask(self.labels == CSF)

    def score_volume(self):
        return Volume(self.lesion_score)


def _smooth_field(rng, shape, sigma, lo, hi, focus=None):
    """Seeded Gaussian random field rescaled to [lo, hi].

    With a focus mask the rescaling window is that region's value range, so
    the field spans the full [lo, hi] inside it; values elsewhere are
    clipped into range.
    """
    g = gaussian_filter(rng.standard_normal(shape), sigma, mode="nearest")
    ref = g[focus] if focus is not None else g
    span = np.ptp(ref)
    if span <= 0:
        return np.full(shape, 0.5 * (lo + hi))
    out = lo + (g - ref.min()) * ((hi - lo) / span)
    return np.clip(out, lo, hi)


def _place_lesions(rng, size, config, csf_semi_max, brain_radius):
    """Seeded rejection sampling of non-overlapping lesion centers."""
    rlo, rhi = config.core_radius_range
    placed = []
    if config.n_lesions == 0:
        return placed
    margin = 1.5
    for _ in range(5000):
        if len(placed) == config.n_lesions:
            break
        r_core = float(rng.uniform(rlo, rhi))
        outer = r_core + config.rim_width
        min_center = csf_semi_max + outer + margin
        max_center = brain_radius - outer - margin
        if min_center >= max_center:
            raise ValueError(
                f"phantom size {size} too small for lesions of outer radius {outer:.1f}")
        direction = rng.standard_normal(3)
        direction /= np.linalg.norm(direction)
        center = 0.5 * (size - 1) + direction * rng.uniform(min_center, max_center)
        ok = True
        for other_center, other_r in placed:
            sep = other_r + config.rim_width + outer + 2.0
            if np.linalg.norm(center - other_center) < sep:
                ok = False
                break
        if ok:
            placed.append((center, r_core))
    if len(placed) < config.n_lesions:
        raise ValueError(
            f"could only place {len(placed)} of {config.n_lesions} lesions; "
            "reduce n_lesions or lesion radii")
    return placed


def make_phantom(size=48, config=None, seed=0):
    """Deterministic cubic phantom: brain sphere, ventricle-like CSF
    ellipsoid, spherical lesions with blended rims, smooth flip-angle and
    fiber-direction fields.
    """
    size = int(size)
    if size < 16:
        raise ValueError(f"phantom size must be >= 16, got {size}")
    if config is None:
        config = PhantomConfig()
    rng = np.random.default_rng(seed)

    c = 0.5 * (size - 1)
    ax = np.arange(size, dtype=np.float64) - c
    dx = ax[:, None, None]
    dy = ax[None, :, None]
    dz = ax[None, None, :]
    r2 = dx ** 2 + dy ** 2 + dz ** 2

    brain_radius = 0.44 * size
    brain = r2 <= brain_radius ** 2
    csf_semi = (0.12 * size, 0.08 * size, 0.08 * size)
    csf = ((dx / csf_semi[0]) ** 2 + (dy / csf_semi[1]) ** 2
           + (dz / csf_semi[2]) ** 2) <= 1.0
    csf &= brain

    # smooth fields drawn before lesion placement: fixed RNG consumption order
    fa_map = _smooth_field(rng, (size,) * 3, size / 8.0, *config.fa_range,
                           focus=brain)
    azimuth = _smooth_field(rng, (size,) * 3, size / 6.0, 0.0, 1.5 * np.pi)
    polar = _smooth_field(rng, (size,) * 3, size / 6.0, 0.2 * np.pi, 0.8 * np.pi)
    sin_p = np.sin(polar)
    fiber = np.stack(
        [sin_p * np.cos(azimuth), sin_p * np.sin(azimuth), np.cos(polar)],
        axis=-1)

    lesions = _place_lesions(rng, size, config, max(csf_semi), brain_radius)

    shape = (size,) * 3
    wm_f = config.wm_fractions
    f_myelin = np.zeros(shape)
    f_ie = np.zeros(shape)
    f_csf = np.zeros(shape)
    f_myelin[brain] = wm_f[0]
    f_ie[brain] = wm_f[1]
    f_csf[brain] = wm_f[2]
    t2_myelin = np.full(shape, config.wm_t2[0])
    t2_ie = np.full(shape, config.wm_t2[1])
    t2_csf = np.full(shape, config.wm_t2[2])
    f_i = np.full(shape, config.wm_f_i)
    lambda_par = np.full(shape, config.wm_lambda_par)
    labels = np.zeros(shape, dtype=np.uint8)
    labels[brain] = WM
    score = np.zeros(shape)

    f_myelin[csf] = 0.0
    f_ie[csf] = 0.0
    f_csf[csf] = 1.0
    f_i[csf] = 0.0
    lambda_par[csf] = config.csf_lambda_par
    labels[csf] = CSF

    core_f = config.core_fractions
    for center, r_core in lesions:
        d = np.sqrt((dx - (center[0] - c)) ** 2 + (dy - (center[1] - c)) ** 2
                    + (dz - (center[2] - c)) ** 2)
        core = d <= r_core
        rim = (d > r_core) & (d < r_core + config.rim_width)
        # blend weight: 0 at the core surface, 1 at the rim's outer edge
        w = np.clip((d[rim] - r_core) / config.rim_width, 0.0, 1.0)
        f_myelin[core] = core_f[0]
        f_ie[core] = core_f[1]
        f_csf[core] = core_f[2]
        t2_ie[core] = config.core_ie_t2
        f_i[core] = config.core_f_i
        lambda_par[core] = config.core_lambda_par
        f_myelin[rim] = (1 - w) * core_f[0] + w * wm_f[0]
        f_ie[rim] = (1 - w) * core_f[1] + w * wm_f[1]
        f_csf[rim] = (1 - w) * core_f[2] + w * wm_f[2]
        t2_ie[rim] = (1 - w) * config.core_ie_t2 + w * config.wm_t2[1]
        f_i[rim] = (1 - w) * config.core_f_i + w * config.wm_f_i
        lambda_par[rim] = (1 - w) * config.core_lambda_par + w * config.wm_lambda_par
        labels[core] = CORE
        labels[rim] = RIM
        score[core] = 1.0 - 0.1 * (d[core] / r_core) ** 2
        score[rim] = 0.75 * (1.0 - w)

    # normal-appearing WM: far enough from any lesion evidence
    plain_wm = labels == WM
    if lesions:
        dist = distance_transform_edt(Mask(score > 0.0)).data
        labels[plain_wm & (dist >= config.nawm_min_dist)] = NAWM
    else:
        labels[plain_wm] = NAWM

    return PhantomTruth(
        f_myelin=f_myelin, f_ie=f_ie, f_csf=f_csf,
        t2_myelin=t2_myelin, t2_ie=t2_ie, t2_csf=t2_csf,
        f_i=f_i, lambda_par=lambda_par, fiber_dirs=fiber,
        fa_map=fa_map, lesion_score=score, labels=labels,
        t1_tissue=config.t1_tissue, t1_csf=config.t1_csf)


def _check_snr(snr):
    s = float(snr)
    if math.isnan(s) or s <= 0.0:
        raise ValueError(f"snr must be positive or infinite, got {snr}")
    return s


def wm_reference_first_echo(truth, acq):
    """First-echo amplitude of the median white-matter voxel at a perfect
    180 degree train; the Rician sigma is this value divided by the SNR."""
    wm = truth.wm_mask.data
    region = wm if wm.any() else truth.brain_mask.data
    if not region.any():
        raise ValueError("phantom has no tissue voxels")
    ref = 0.0
    for frac, t2, t1 in (
            (truth.f_myelin, truth.t2_myelin, truth.t1_tissue),
            (truth.f_ie, truth.t2_ie, truth.t1_tissue),
            (truth.f_csf, truth.t2_csf, truth.t1_csf)):
        f = float(np.median(frac[region]))
        if f <= 0.0:
            continue
        train = epg_echo_trains(float(np.median(t2[region])), 180.0, t1,
                                acq.delta_te, acq.n_echoes)
        ref += f * float(train[0, 0])
    return ref


def _rician(noiseless, sigma, rng):
    n1 = rng.standard_normal(noiseless.shape)
    n2 = rng.standard_normal(noiseless.shape)
    return np.hypot(noiseless + sigma * n1, sigma * n2)


def simulate_met2(truth, acq, snr, seed=0):
    """Forward multi-echo simulation: fraction-weighted echo-train mixture
    per voxel at the voxel's flip angle, then Rician noise at the given SNR
    (pass snr=inf for the noiseless signal)."""
    if not isinstance(acq, AcquisitionMET2):
        raise TypeError("expected AcquisitionMET2")
    s = _check_snr(snr)
    brain = truth.brain_mask.data
    sel = np.where(brain.reshape(-1))[0]
    fa = truth.fa_map.reshape(-1)[sel]
    signal = np.zeros((truth.labels.size, acq.n_echoes))
    for frac, t2, t1 in (
            (truth.f_myelin, truth.t2_myelin, truth.t1_tissue),
            (truth.f_ie, truth.t2_ie, truth.t1_tissue),
            (truth.f_csf, truth.t2_csf, truth.t1_csf)):
        f = frac.reshape(-1)[sel]
        trains = epg_echo_trains(t2.reshape(-1)[sel], fa, t1,
                                 acq.delta_te, acq.n_echoes)
        signal[sel] += f[:, None] * trains.T
    signal = signal.reshape(truth.shape + (acq.n_echoes,))
    if math.isinf(s):
        return Volume(signal)
    sigma = wm_reference_first_echo(truth, acq) / s
    rng = np.random.default_rng(seed)
    return Volume(_rician(signal, sigma, rng))


def _cone_axes(dirs, dispersion_deg, n_cone=16):
    """Fixed cone of axes around each direction, for orientation dispersion.

    Returns (n_vox, n_cone, 3); with zero dispersion the cone collapses to
    the direction itself.
    """
    if dispersion_deg == 0.0:
        return dirs[:, None, :]
    theta = np.deg2rad(dispersion_deg)
    helper = np.where(np.abs(dirs[:, :1]) > 0.9,
                      np.array([[0.0, 1.0, 0.0]]),
                      np.array([[1.0, 0.0, 0.0]]))
    u = np.cross(dirs, helper)
    u /= np.linalg.norm(u, axis=1, keepdims=True)
    v = np.cross(dirs, u)
    phi = 2.0 * np.pi * np.arange(n_cone) / n_cone
    ring = (np.cos(phi)[None, :, None] * u[:, None, :]
            + np.sin(phi)[None, :, None] * v[:, None, :])
    return np.cos(theta) * dirs[:, None, :] + np.sin(theta) * ring


def simulate_dwi(truth, scheme, snr, seed=0, dispersion_deg=0.0):
    """Forward diffusion simulation: per-direction stick plus tortuosity
    zeppelin along the voxel's fiber axis, Rician noise at the given SNR.

    The default is model-matched so noiseless shell means equal the
    closed-form prediction up to spherical-sampling error. dispersion_deg
    spreads each voxel's axis over a fixed cone, changing every individual
    direction's signal; shell means stay invariant (averaging rotated
    copies of one axially symmetric kernel cannot move the sphere mean),
    so the mismatch only bites direction-resolved models.
    """
    if not isinstance(scheme, DiffusionScheme):
        raise TypeError("expected DiffusionScheme")
    s = _check_snr(snr)
    if not 0.0 <= float(dispersion_deg) < 90.0:
        raise ValueError(f"dispersion_deg must lie in [0, 90), got {dispersion_deg}")
    brain = truth.brain_mask.data
    sel = np.where(brain.reshape(-1))[0]
    dirs = truth.fiber_dirs.reshape(-1, 3)[sel]
    f_i = truth.f_i.reshape(-1)[sel]
    lam = truth.lambda_par.reshape(-1)[sel]
    bvals = scheme.bvals
    bvecs = scheme.bvecs
    signal = np.zeros((truth.labels.size, scheme.n_frames))

    chunk = 8192
    for start in range(0, sel.size, chunk):
        stop = min(start + chunk, sel.size)
        fi = f_i[start:stop, None]
        lp = lam[start:stop, None]
        lperp = (1.0 - fi) * lp
        axes = _cone_axes(dirs[start:stop], float(dispersion_deg))
        acc = np.zeros((stop - start, scheme.n_frames))
        for k in range(axes.shape[1]):
            dots2 = (axes[:, k, :] @ bvecs.T) ** 2
            stick = np.exp(-bvals[None, :] * lp * dots2)
            zep = np.exp(-bvals[None, :] * (lperp + (lp - lperp) * dots2))
            acc += fi * stick + (1.0 - fi) * zep
        signal[sel[start:stop]] = acc / axes.shape[1]
    signal = signal.reshape(truth.shape + (scheme.n_frames,))
    if math.isinf(s):
        return Volume(signal)
    sigma = 1.0 / s  # unit b0 amplitude
    rng = np.random.default_rng(seed)
    return Volume(_rician(signal, sigma, rng))


def fibonacci_directions(n):
    """n roughly uniform unit vectors on the sphere (golden-angle spiral)."""
    if n < 1:
        raise ValueError("need at least one direction")
    k = np.arange(n) + 0.5
    polar = np.arccos(1.0 - 2.0 * k / n)
    azim = np.pi * (1.0 + np.sqrt(5.0)) * k
    d = np.stack([np.sin(polar) * np.cos(azim),
                  np.sin(polar) * np.sin(azim),
                  np.cos(polar)], axis=1)
    return d / np.linalg.norm(d, axis=1, keepdims=True)


def default_scheme():
    """Four-shell acquisition the defaults are tuned for: 6/20/46/66
    directions at b = 700/1000/2000/3000 s/mm^2 plus 11 b0 frames."""
    counts = {700.0: 6, 1000.0: 20, 2000.0: 46, 3000.0: 66}
    bvals = [0.0] * 11
    bvecs = [np.zeros(3)] * 11
    for b, n in counts.items():
        bvals.extend([b] * n)
        bvecs.extend(fibonacci_directions(n))
    return DiffusionScheme(np.array(bvals), np.array(bvecs))


def default_acquisition():
    """32 echoes at 10.68 ms spacing."""
    return AcquisitionMET2(delta_te=10.68, n_echoes=32)
