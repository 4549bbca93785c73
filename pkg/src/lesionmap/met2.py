"""Multi-component T2 reconstruction.

Pipeline per voxel: normalize the echo train by its first echo, pick the
refocusing flip angle whose EPG dictionary gives the lowest plain-NNLS
mean squared error, select the regularization strength at the corner of
the L-curve, and solve the regularized NNLS for the final T2 spectrum.
Compartment fractions are windowed sums of the spectrum.

The active-set NNLS runs on the normal equations (Gram form), which lets
the volume driver share one Gram matrix per dictionary across all voxels;
hot loops are numba-compiled.
"""

import math
from dataclasses import dataclass, field

import numpy as np
from numba import njit

from .core import AcquisitionMET2, Mask, T2Grid, Volume, make_t2_grid
from .epg import dictionary_stack
from .errors import NumericalError

__all__ = [
    "T2Spectrum", "Met2FitResult", "Met2Maps", "SpectrumStore", "Met2Config",
    "nnls", "second_difference_matrix", "nnls_regularized", "lcurve_select_mu",
    "LCurveSweep", "tv_denoise_3d", "estimate_noise_sigma", "default_tv_weight",
    "fit_voxel_spectrum", "compartment_fractions", "fit_met2_volume",
]

_EPS = float(np.finfo(np.float64).eps)


# --------------------------------------------------------------------------
# domain types

@dataclass(frozen=True, eq=False)
class T2Spectrum:
    """Non-negative amplitudes over a T2 grid."""

    amplitudes: np.ndarray
    grid: T2Grid

    def __post_init__(self):
        a = np.asarray(self.amplitudes, dtype=np.float64)
        if a.shape != (self.grid.p,):
            raise ValueError(f"amplitudes shape {a.shape}, expected ({self.grid.p},)")
        if not np.all(np.isfinite(a)) or np.any(a < 0):
            raise ValueError("spectrum amplitudes must be finite and >= 0")
        a.setflags(write=False)
        object.__setattr__(self, "amplitudes", a)

    @property
    def total_mass(self):
        return float(self.amplitudes.sum())


@dataclass(frozen=True, eq=False)
class Met2FitResult:
    """Single-voxel fit: spectrum, estimated flip angle, fit diagnostics."""

    spectrum: T2Spectrum
    fa: float  # degrees
    residual_norm: float  # normalized signal units
    reg_mu: float
    lcurve_at_edge: bool = False


@dataclass(frozen=True, eq=False)
class Met2Maps:
    """Compartment-fraction and flip-angle maps."""

    f_m: Volume
    f_ie: Volume
    f_csf: Volume
    fa_map: Volume


@dataclass(frozen=True, eq=False)
class SpectrumStore:
    """Per-voxel spectra for the in-mask voxels of a volume fit."""

    grid: T2Grid
    indices: np.ndarray  # (n, 3) voxel coordinates
    amplitudes: np.ndarray  # (n, p)
    reg_mu: np.ndarray
    residual_norm: np.ndarray
    lcurve_at_edge: np.ndarray


@dataclass(frozen=True)
class Met2Config:
    """Settings for the volume-level MET2 fit."""

    acquisition: AcquisitionMET2
    t2_min: float = 10.0
    t2_max: float = 2000.0
    n_t2: int = 60
    fa_min: float = 90.0
    fa_max: float = 180.0
    fa_step: float = 1.0
    fa_median_radius: int = 1  # 0 = keep raw per-voxel picks
    t1: float = 1000.0
    mu_min: float = 1e-6
    mu_max: float = 10.0
    n_mu: int = 64
    myelin_t2_max: float = 40.0  # ms
    ie_t2_max: float = 200.0  # ms

    def grid(self):
        return make_t2_grid(self.t2_min, self.t2_max, self.n_t2)

    def fa_set(self):
        n = int(round((self.fa_max - self.fa_min) / self.fa_step)) + 1
        return self.fa_min + self.fa_step * np.arange(n)

    def mu_grid(self):
        return np.geomspace(self.mu_min, self.mu_max, self.n_mu)

    def cutoffs(self):
        return (self.myelin_t2_max, self.ie_t2_max)


# --------------------------------------------------------------------------
# numba kernels (Gram-form active-set NNLS and the voxel sweeps)

@njit(cache=True)
def _l1_norm(G):
    p = G.shape[0]
    best = 0.0
    for c in range(p):
        tot = 0.0
        for r in range(p):
            tot += abs(G[r, c])
        if tot > best:
            best = tot
    return best


@njit(cache=True)
def _solve_passive(G, f, passive, k):
    """Solve the subproblem restricted to the passive set.

    Returns (idx, s, usable) where usable is False if the solve is
    non-finite or leaves a large residual (dependent columns).
    """
    p = f.size
    idx = np.empty(k, np.int64)
    c = 0
    for j in range(p):
        if passive[j]:
            idx[c] = j
            c += 1
    Gp = np.empty((k, k))
    fp = np.empty(k)
    fmax = 0.0
    for a in range(k):
        ja = idx[a]
        fp[a] = f[ja]
        if abs(fp[a]) > fmax:
            fmax = abs(fp[a])
        for b in range(k):
            Gp[a, b] = G[ja, idx[b]]
    try:
        s = np.linalg.solve(Gp.copy(), fp)
    except Exception:
        # exactly dependent columns: the normal equations are still
        # consistent, so the minimum-norm solution is a valid restricted
        # minimizer and the step/drop logic prunes the dependent atom
        s = np.linalg.lstsq(Gp.copy(), fp)[0]
    usable = True
    for a in range(k):
        if not np.isfinite(s[a]):
            usable = False
    if usable:
        rmax = 0.0
        for a in range(k):
            acc = 0.0
            for b in range(k):
                acc += Gp[a, b] * s[b]
            r = abs(acc - fp[a])
            if r > rmax:
                rmax = r
        if rmax > 1e-6 * (1.0 + fmax):
            usable = False
    return idx, s, usable


@njit(cache=True)
def _inner_descent(G, f, x, passive, max_iter, solves):
    """Step/drop until x is the least-squares solution on the passive set.

    Mutates x and passive in place. Returns (status, solves) where status
    0 means the passive-set invariant holds, 1 iteration cap, 2 singular.
    """
    p = f.size
    while True:
        n_passive = 0
        for j in range(p):
            if passive[j]:
                n_passive += 1
        if n_passive == 0:
            for j in range(p):
                x[j] = 0.0
            return 0, solves
        solves += 1
        if solves > max_iter:
            return 1, solves
        idx, s, usable = _solve_passive(G, f, passive, n_passive)
        if not usable:
            return 2, solves
        smin = 1.0e300
        for a in range(n_passive):
            if s[a] < smin:
                smin = s[a]
        if smin > 0.0:
            for j in range(p):
                x[j] = 0.0
            for a in range(n_passive):
                x[idx[a]] = s[a]
            return 0, solves
        # step toward s until the first passive variable hits zero
        alpha = 1.0e300
        for a in range(n_passive):
            if s[a] <= 0.0:
                j = idx[a]
                denom = x[j] - s[a]
                if denom > 0.0:
                    r = x[j] / denom
                    if r < alpha:
                        alpha = r
        if alpha >= 1.0e300:
            alpha = 0.0
        xmax = 0.0
        for a in range(n_passive):
            j = idx[a]
            x[j] = x[j] + alpha * (s[a] - x[j])
            if x[j] < 0.0:
                x[j] = 0.0
            if x[j] > xmax:
                xmax = x[j]
        drop_tol = 1e-13 * (1.0 + xmax)
        for a in range(n_passive):
            j = idx[a]
            if x[j] <= drop_tol:
                x[j] = 0.0
                passive[j] = False


@njit(cache=True)
def _nnls_gram_state(G, f, tol, max_iter, x, passive):
    """Active-set non-negative least squares on the normal equations.

    Minimizes 0.5*x'Gx - f'x over x >= 0 where G = A'A and f = A'b,
    starting from the feasible state (x, passive) which is mutated in
    place (pass zeros for a cold start). Entering candidates whose
    subproblem is numerically dependent, or whose entering coefficient
    comes back non-positive, are rejected for the current round (the
    anti-cycling rule of the classic algorithm). Returns status: 0 ok,
    1 iteration cap, 2 singular subproblem.
    """
    p = f.size
    banned = np.zeros(p, np.bool_)
    solves = 0
    warm = False
    for j in range(p):
        if passive[j]:
            warm = True
    if warm:
        status, solves = _inner_descent(G, f, x, passive, max_iter, solves)
        if status != 0:
            return status
    w = f - np.dot(G, x)
    while True:
        kbest = -1
        wbest = tol
        for j in range(p):
            if (not passive[j]) and (not banned[j]) and w[j] > wbest:
                wbest = w[j]
                kbest = j
        if kbest < 0:
            return 0
        passive[kbest] = True
        n_passive = 0
        for j in range(p):
            if passive[j]:
                n_passive += 1
        solves += 1
        if solves > max_iter:
            return 1
        idx, s, usable = _solve_passive(G, f, passive, n_passive)
        s_enter = 0.0
        for a in range(n_passive):
            if idx[a] == kbest:
                s_enter = s[a]
        if (not usable) or s_enter <= 0.0:
            passive[kbest] = False
            banned[kbest] = True
            continue
        if np.min(s) > 0.0:
            for j in range(p):
                x[j] = 0.0
            for a in range(n_passive):
                x[idx[a]] = s[a]
        else:
            status, solves = _inner_descent(G, f, x, passive, max_iter, solves)
            if status != 0:
                return status
        w = f - np.dot(G, x)
        for j in range(p):
            banned[j] = False


@njit(cache=True)
def _nnls_gram(G, f, tol, max_iter):
    """Cold-start wrapper around _nnls_gram_state. Returns (x, status)."""
    p = f.size
    x = np.zeros(p)
    passive = np.zeros(p, np.bool_)
    status = _nnls_gram_state(G, f, tol, max_iter, x, passive)
    return x, status


@njit(cache=True)
def _gram_tol(G):
    return 10.0 * 2.220446049250313e-16 * G.shape[0] * _l1_norm(G)


@njit(cache=True)
def _fa_pass(signals, stack, grams, max_iter):
    """Per voxel, index of the flip angle with the lowest plain-NNLS MSE.

    The active set is warm-started across adjacent flip angles, whose
    dictionaries (and hence supports) are close.
    """
    n_vox = signals.shape[0]
    n_fa = stack.shape[0]
    p = stack.shape[2]
    fa_idx = np.zeros(n_vox, np.int64)
    status_out = 0
    tols = np.empty(n_fa)
    for a in range(n_fa):
        tols[a] = _gram_tol(grams[a])
    x = np.zeros(p)
    passive = np.zeros(p, np.bool_)
    for i in range(n_vox):
        b = signals[i]
        bb = np.dot(b, b)
        best = 1.0e300
        bi = 0
        for j in range(p):
            x[j] = 0.0
            passive[j] = False
        for a in range(n_fa):
            f = np.dot(b, stack[a])
            status = _nnls_gram_state(grams[a], f, tols[a], max_iter, x, passive)
            if status != 0:
                status_out = status
            obj = bb - 2.0 * np.dot(f, x) + np.dot(x, np.dot(grams[a], x))
            if obj < best:
                best = obj
                bi = a
        fa_idx[i] = bi
    return fa_idx, status_out


@njit(cache=True)
def _mu_pass(signals, stack, grams, ltl, mus, fa_idx, max_iter):
    """Residual and seminorm (squared) across the mu grid, per voxel.

    The active set is warm-started from the previous grid point; supports
    change slowly along the mu sweep.
    """
    n_vox = signals.shape[0]
    p = ltl.shape[0]
    n_mu = mus.size
    res2 = np.empty((n_vox, n_mu))
    semi2 = np.empty((n_vox, n_mu))
    status_out = 0
    g_mu = np.empty((p, p))
    x = np.zeros(p)
    passive = np.zeros(p, np.bool_)
    for i in range(n_vox):
        a = fa_idx[i]
        b = signals[i]
        bb = np.dot(b, b)
        f = np.dot(b, stack[a])
        G = grams[a]
        for j in range(p):
            x[j] = 0.0
            passive[j] = False
        for q in range(n_mu):
            mu2 = mus[q] * mus[q]
            for r in range(p):
                for c in range(p):
                    g_mu[r, c] = G[r, c] + mu2 * ltl[r, c]
            status = _nnls_gram_state(g_mu, f, _gram_tol(g_mu), max_iter, x, passive)
            if status != 0:
                status_out = status
            r2 = bb - 2.0 * np.dot(f, x) + np.dot(x, np.dot(G, x))
            s2 = np.dot(x, np.dot(ltl, x))
            res2[i, q] = r2 if r2 > 0.0 else 0.0
            semi2[i, q] = s2 if s2 > 0.0 else 0.0
    return res2, semi2, status_out


@njit(cache=True)
def _final_pass(signals, stack, grams, ltl, mus, fa_idx, mu_idx, max_iter):
    """Regularized spectrum at the selected (flip angle, mu) per voxel."""
    n_vox = signals.shape[0]
    p = stack.shape[2]
    spectra = np.empty((n_vox, p))
    resnorm = np.empty(n_vox)
    status_out = 0
    g_mu = np.empty((p, p))
    for i in range(n_vox):
        a = fa_idx[i]
        b = signals[i]
        bb = np.dot(b, b)
        f = np.dot(b, stack[a])
        G = grams[a]
        mu2 = mus[mu_idx[i]] * mus[mu_idx[i]]
        for r in range(p):
            for c in range(p):
                g_mu[r, c] = G[r, c] + mu2 * ltl[r, c]
        x, status = _nnls_gram(g_mu, f, _gram_tol(g_mu), max_iter)
        if status != 0:
            status_out = status
        r2 = bb - 2.0 * np.dot(f, x) + np.dot(x, np.dot(G, x))
        spectra[i] = x
        resnorm[i] = math.sqrt(r2) if r2 > 0.0 else 0.0
    return spectra, resnorm, status_out


# --------------------------------------------------------------------------
# public solvers

def nnls(A, b, max_iter=None):
    """Least squares under non-negativity: minimize ||Ax - b||^2 over x >= 0."""
    A = np.ascontiguousarray(A, dtype=np.float64)
    b = np.ascontiguousarray(b, dtype=np.float64)
    if A.ndim != 2 or b.ndim != 1 or A.shape[0] != b.size:
        raise ValueError(f"incompatible shapes A {A.shape}, b {b.shape}")
    if A.size == 0 or b.size == 0:
        raise ValueError("empty system")
    if not (np.all(np.isfinite(A)) and np.all(np.isfinite(b))):
        raise ValueError("non-finite entries in A or b")
    n = A.shape[1]
    if max_iter is None:
        max_iter = max(50, 10 * n)
    G = A.T @ A
    f = A.T @ b
    try:
        x, status = _nnls_gram(G, f, _gram_tol(G), max_iter)
    except np.linalg.LinAlgError as exc:  # exactly singular subproblem
        raise NumericalError(f"nnls: singular subproblem on {A.shape} system") from exc
    _raise_for_status(status, "nnls", A.shape)
    return x


def _raise_for_status(status, where, shape):
    if status == 1:
        raise NumericalError(f"{where}: active-set iteration cap exceeded on {shape} system")
    if status == 2:
        raise NumericalError(f"{where}: singular passive-set subproblem on {shape} system")


def second_difference_matrix(p):
    """(p-2) x p matrix whose rows apply the [1, -2, 1] stencil."""
    if p < 3:
        raise ValueError(f"second-difference matrix needs p >= 3, got {p}")
    L = np.zeros((p - 2, p))
    for i in range(p - 2):
        L[i, i] = 1.0
        L[i, i + 1] = -2.0
        L[i, i + 2] = 1.0
    return L


def nnls_regularized(A, b, L, mu, max_iter=None):
    """Minimize ||Ax - b||^2 + mu^2 ||Lx||^2 over x >= 0.

    Realized as plain NNLS on the stacked system [A; mu*L] with right-hand
    side [b; 0].
    """
    if mu < 0:
        raise ValueError(f"mu must be >= 0, got {mu}")
    A = np.asarray(A, dtype=np.float64)
    L = np.asarray(L, dtype=np.float64)
    if L.shape[1] != A.shape[1]:
        raise ValueError(f"L columns {L.shape[1]} != A columns {A.shape[1]}")
    if mu == 0.0:
        return nnls(A, b, max_iter=max_iter)
    stacked = np.vstack([A, mu * L])
    rhs = np.concatenate([np.asarray(b, dtype=np.float64), np.zeros(L.shape[0])])
    return nnls(stacked, rhs, max_iter=max_iter)


@dataclass(frozen=True, eq=False)
class LCurveSweep:
    """Residual/seminorm trade-off across the mu grid."""

    mus: np.ndarray
    residual_norms: np.ndarray
    seminorms: np.ndarray
    curvature: np.ndarray
    corner_index: int
    corner_at_edge: bool


def _corner_from_curves(mus, res, semi, d_frac=0.12):
    """Index of maximum signed curvature of the (log res, log semi) curve.

    Curvature at a point is the Menger (circumcircle) curvature of the
    triangle formed with the nearest points at least d_frac of the total
    arc length away on each side. The fixed physical stencil makes the
    corner independent of grid resolution: near mu -> 0 the solutions stop
    changing and consecutive points coincide, which would make curvature
    from adjacent triples meaningless there. Near the curve ends the
    stencil clamps to the last point, but an arm below half a stencil is
    rejected rather than shortened further.

    Returns (index, at_edge, curvature). The sign convention makes the
    L-corner positive; if no positive-curvature corner exists the smallest
    mu is selected and flagged. at_edge is also set when the corner sits
    within two stencil lengths of the start of the effective curve (the
    sweep never bracketed it from below, so the value is a boundary, not
    an interior optimum). Ties break toward smaller mu.
    """
    n = mus.size
    x = np.log(np.clip(res, 1e-150, None))
    y = np.log(np.clip(semi, 1e-150, None))
    seg = np.hypot(np.diff(x), np.diff(y))
    arc = np.concatenate([[0.0], np.cumsum(seg)])
    total = arc[-1]
    kappa = np.full(n, -np.inf)
    if total <= 0.0:
        return 0, True, kappa
    d_min = d_frac * total
    # left[i]: rightmost j with arc[i] - arc[j] >= d_min, clamped to the
    # first point so points near the curve ends keep a shorter arm
    left = np.searchsorted(arc, np.maximum(arc - d_min, 0.0), side="right") - 1
    left = np.maximum(left, 0)
    # right[i]: leftmost k with arc[k] - arc[i] >= d_min, clamped likewise
    right = np.searchsorted(arc, np.minimum(arc + d_min, total), side="left")
    right = np.minimum(right, n - 1)
    i = np.arange(1, n - 1)
    left = left[i]
    right = right[i]
    # a clamped arm shorter than half a stencil estimates curvature from
    # nearly coincident points; drop those candidates instead
    arm_ok = (arc[i] - arc[left] >= 0.5 * d_min) & (arc[right] - arc[i] >= 0.5 * d_min)
    i = i[arm_ok]
    left = left[arm_ok]
    right = right[arm_ok]
    if i.size > 0:
        j = left
        k = right
        ax_, ay_ = x[i] - x[j], y[i] - y[j]
        bx_, by_ = x[k] - x[i], y[k] - y[i]
        cx_, cy_ = x[k] - x[j], y[k] - y[j]
        denom = np.hypot(ax_, ay_) * np.hypot(bx_, by_) * np.hypot(cx_, cy_)
        cross = ax_ * by_ - ay_ * bx_
        good = denom > 1e-300
        kappa[i[good]] = 2.0 * cross[good] / denom[good]
    # curvature below roundoff of the cross product is not a corner
    scale = max(1.0, np.abs(x).max(), np.abs(y).max())
    kappa_tol = 100.0 * np.finfo(np.float64).eps * scale / (d_min * d_min)
    if np.max(kappa) > kappa_tol:
        idx = int(np.argmax(kappa))
        at_edge = arc[idx] < 2.0 * d_min
    else:
        # no convex corner anywhere: fall back to the least-regularized end
        idx = 0
        at_edge = True
    return idx, at_edge, kappa


def lcurve_select_mu(A, b, L, mu_grid, max_iter=None):
    """Pick the regularization strength at the corner of the L-curve.

    Sweeps the mu grid, solving the regularized NNLS at each point, and
    returns (mu_star, LCurveSweep). The corner is the grid point of maximum
    Menger curvature of the discrete (log residual, log seminorm) curve,
    measured over a fixed fraction of the curve's arc length so the result
    does not change with grid density.

    The trade-off only has a meaningful corner when the residual is
    noise-dominated. If the residual at the smallest mu is below 1e-3 of
    ``norm(b)`` the data are effectively noise-free (the floor comes from
    grid discretization, where any regularization only hurts): the
    smallest mu is returned and corner_at_edge is set. The same flag marks
    curves with no convexly curved point at all.
    """
    mu_grid = np.asarray(mu_grid, dtype=np.float64)
    if mu_grid.size < 8:
        raise ValueError(f"mu grid needs >= 8 points, got {mu_grid.size}")
    if np.any(np.diff(mu_grid) <= 0):
        raise ValueError("mu grid must be strictly increasing")
    A = np.asarray(A, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    L = np.asarray(L, dtype=np.float64)
    res = np.empty(mu_grid.size)
    semi = np.empty(mu_grid.size)
    for q, mu in enumerate(mu_grid):
        x = nnls_regularized(A, b, L, mu, max_iter=max_iter)
        res[q] = np.linalg.norm(A @ x - b)
        semi[q] = np.linalg.norm(L @ x)
    if np.ptp(res) <= 1e-12 * max(res.max(), 1e-300):
        raise NumericalError("no corner: all residuals on the mu grid are equal")
    if res[0] <= 1e-3 * max(np.linalg.norm(b), 1e-300):
        kappa = np.full(mu_grid.size, -np.inf)
        sweep = LCurveSweep(mu_grid, res, semi, kappa, 0, True)
        return float(mu_grid[0]), sweep
    idx, at_edge, kappa = _corner_from_curves(mu_grid, res, semi)
    sweep = LCurveSweep(mu_grid, res, semi, kappa, idx, at_edge)
    return float(mu_grid[idx]), sweep


# --------------------------------------------------------------------------
# total variation pre-filter

def _tv_gradient(u):
    g = np.zeros((3,) + u.shape)
    g[0, :-1, :, :] = u[1:, :, :] - u[:-1, :, :]
    g[1, :, :-1, :] = u[:, 1:, :] - u[:, :-1, :]
    g[2, :, :, :-1] = u[:, :, 1:] - u[:, :, :-1]
    return g


def _tv_divergence(p):
    d = np.zeros(p.shape[1:])
    d[:-1, :, :] += p[0, :-1, :, :]
    d[1:, :, :] -= p[0, :-1, :, :]
    d[:, :-1, :] += p[1, :, :-1, :]
    d[:, 1:, :] -= p[1, :, :-1, :]
    d[:, :, :-1] += p[2, :, :, :-1]
    d[:, :, 1:] -= p[2, :, :, :-1]
    return d


def tv_seminorm(data):
    """Isotropic total variation (forward differences, Neumann edges)."""
    g = _tv_gradient(np.asarray(data, dtype=np.float64))
    return float(np.sqrt((g * g).sum(axis=0)).sum())


def tv_objective(u, f, weight):
    return 0.5 * float(((u - f) ** 2).sum()) + weight * tv_seminorm(u)


def tv_denoise_3d(vol, weight, max_iters=200, tol=1e-4):
    """Total-variation denoising by dual projection, in three dimensions.

    Minimizes 0.5*||u - f||^2 + weight*TV(u) with the fixed-point dual
    update; stops when the relative objective change falls below tol or
    after max_iters iterations.
    """
    if weight < 0:
        raise ValueError(f"weight must be >= 0, got {weight}")
    if vol.data.ndim != 3:
        raise ValueError("tv_denoise_3d expects a 3D volume")
    f = np.asarray(vol.data, dtype=np.float64)
    if not np.all(np.isfinite(f)):
        raise ValueError("volume contains non-finite voxels")
    if weight == 0.0:
        return vol.with_data(f.copy())

    lam = float(weight)
    tau = 1.0 / 12.0  # step bound for the 3D dual operator
    p = np.zeros((3,) + f.shape)
    u = f.copy()
    obj = tv_objective(u, f, lam)
    for _ in range(max_iters):
        v = _tv_divergence(p) - f / lam
        g = _tv_gradient(v)
        mag = np.sqrt((g * g).sum(axis=0))
        p = (p + tau * g) / (1.0 + tau * mag)
        u = f - lam * _tv_divergence(p)
        new_obj = tv_objective(u, f, lam)
        if abs(obj - new_obj) <= tol * max(abs(new_obj), 1e-300):
            obj = new_obj
            break
        obj = new_obj
    return vol.with_data(u)


def estimate_noise_sigma(data):
    """Robust noise level from the high-frequency residual.

    Pools first differences along every axis and scales the median absolute
    deviation to a Gaussian sigma (differences carry twice the variance).
    """
    data = np.asarray(data, dtype=np.float64)
    diffs = [np.diff(data, axis=ax).ravel() for ax in range(min(data.ndim, 3))]
    d = np.concatenate(diffs)
    mad = np.median(np.abs(d - np.median(d)))
    return float(1.4826 * mad / np.sqrt(2.0))


def default_tv_weight(data, factor=0.05):
    """Default TV weight: a small multiple of the robust noise estimate."""
    return factor * estimate_noise_sigma(data)


# --------------------------------------------------------------------------
# spectrum fitting

def compartment_fractions(spec, cutoffs=(40.0, 200.0)):
    """(f_myelin, f_ie, f_csf): windowed spectrum masses, normalized to 1.

    Windows are [t2_min, myelin_max), [myelin_max, ie_max), [ie_max, t2_max].
    """
    myelin_max, ie_max = cutoffs
    if not myelin_max < ie_max:
        raise ValueError(f"cutoffs must increase, got {cutoffs}")
    pts = spec.grid.points
    a = spec.amplitudes
    total = a.sum()
    if total <= 0:
        raise ValueError("zero total spectrum mass")
    f_m = a[pts < myelin_max].sum() / total
    f_ie = a[(pts >= myelin_max) & (pts < ie_max)].sum() / total
    f_csf = a[pts >= ie_max].sum() / total
    return float(f_m), float(f_ie), float(f_csf)


def _prepare_engine(grid, acq, fa_set, t1):
    stack = dictionary_stack(grid, acq, fa_set, t1)
    grams = np.ascontiguousarray(
        np.einsum("amp,amq->apq", stack, stack, optimize=True))
    if grid.p >= 3:
        L = second_difference_matrix(grid.p)
        ltl = np.ascontiguousarray(L.T @ L)
    else:
        ltl = None
    return stack, grams, ltl


def _fit_signals(signals, stack, grams, ltl, mu_grid, max_iter=2000,
                 fa_idx=None):
    """Shared fitting path: signals (n, m) already normalized.

    fa_idx, when given, bypasses the flip-angle search (the volume driver
    passes spatially consolidated picks). Returns per-voxel arrays
    (fa_idx, mu_idx or None, spectra, resnorm, at_edge).
    """
    if fa_idx is None:
        fa_idx, status = _fa_pass(signals, stack, grams, max_iter)
        _raise_for_status(status, "fa search", stack.shape)
    n_vox = signals.shape[0]
    if ltl is None:
        # degenerate grid (p < 3): no smoothness regularizer to apply
        zero_mu = np.zeros(1)
        mu_idx = np.zeros(n_vox, np.int64)
        spectra, resnorm, status = _final_pass(
            signals, stack, grams, np.zeros((stack.shape[2],) * 2), zero_mu,
            fa_idx, mu_idx, max_iter)
        _raise_for_status(status, "final fit", stack.shape)
        return fa_idx, None, spectra, resnorm, np.zeros(n_vox, bool)
    res2, semi2, status = _mu_pass(signals, stack, grams, ltl, mu_grid,
                                   fa_idx, max_iter)
    _raise_for_status(status, "mu sweep", stack.shape)
    res = np.sqrt(res2)
    semi = np.sqrt(semi2)
    bnorm = np.linalg.norm(signals, axis=1)
    mu_idx = np.empty(n_vox, np.int64)
    at_edge = np.empty(n_vox, bool)
    for i in range(n_vox):
        if res[i, 0] <= 1e-3 * max(bnorm[i], 1e-300):
            # discretization-limited residual: no noise corner exists
            mu_idx[i] = 0
            at_edge[i] = True
            continue
        idx, edge, _ = _corner_from_curves(mu_grid, res[i], semi[i])
        mu_idx[i] = idx
        at_edge[i] = edge
    spectra, resnorm, status = _final_pass(signals, stack, grams, ltl,
                                           mu_grid, fa_idx, mu_idx, max_iter)
    _raise_for_status(status, "final fit", stack.shape)
    return fa_idx, mu_idx, spectra, resnorm, at_edge


def _fa_lower_median(fa_idx, coords, dims, radius):
    """Lower median of the flip-angle picks over each in-mask neighborhood.

    The refocusing-angle deviation comes from the transmit field, which is
    smooth on the voxel scale, so single-voxel excursions are estimation
    noise rather than anatomy. The lower median keeps every consolidated
    value on the searched grid even when the neighbor count is even.
    """
    r = int(radius)
    size = 2 * r + 1
    padded = np.full((dims[0] + 2 * r, dims[1] + 2 * r, dims[2] + 2 * r),
                     -1, dtype=np.int64)
    padded[r:r + dims[0], r:r + dims[1], r:r + dims[2]][tuple(coords.T)] = fa_idx
    n = coords.shape[0]
    stacked = np.empty((size ** 3, n), dtype=np.int64)
    s = 0
    for di in range(size):
        for dj in range(size):
            for dk in range(size):
                stacked[s] = padded[coords[:, 0] + di,
                                    coords[:, 1] + dj,
                                    coords[:, 2] + dk]
                s += 1
    stacked.sort(axis=0)
    counts = (stacked >= 0).sum(axis=0)  # out-of-mask neighbors sort first
    mid = (size ** 3 - counts) + (counts - 1) // 2
    return stacked[mid, np.arange(n)]


def _normalize_signal(signal):
    signal = np.asarray(signal, dtype=np.float64)
    if not np.all(np.isfinite(signal)) or np.any(signal < 0):
        raise ValueError("signal must be finite and non-negative")
    if signal[0] <= 0 or not signal.any():
        raise ValueError("empty voxel: first echo is zero")
    return signal / signal[0]


def fit_voxel_spectrum(signal, acq, grid, fa_set, t1=1000.0, mu_grid=None):
    """Estimate flip angle and regularized T2 spectrum for one echo train.

    The flip angle is the member of fa_set minimizing the plain-NNLS MSE;
    the final spectrum is the regularized NNLS solution at the L-curve
    corner mu. The signal is normalized by its first echo, so amplitudes
    and residuals are in normalized units.
    """
    b = _normalize_signal(signal)
    if b.size != acq.n_echoes:
        raise ValueError(f"signal length {b.size} != n_echoes {acq.n_echoes}")
    fa_set = np.asarray(fa_set, dtype=np.float64)
    if fa_set.size == 0:
        raise ValueError("fa_set must be non-empty")
    if mu_grid is None:
        mu_grid = np.geomspace(1e-6, 10.0, 64)
    mu_grid = np.asarray(mu_grid, dtype=np.float64)
    stack, grams, ltl = _prepare_engine(grid, acq, tuple(fa_set), t1)
    fa_idx, mu_idx, spectra, resnorm, at_edge = _fit_signals(
        b[None, :], stack, grams, ltl, mu_grid)
    mu = 0.0 if mu_idx is None else float(mu_grid[mu_idx[0]])
    return Met2FitResult(
        spectrum=T2Spectrum(spectra[0], grid),
        fa=float(fa_set[fa_idx[0]]),
        residual_norm=float(resnorm[0]),
        reg_mu=mu,
        lcurve_at_edge=bool(at_edge[0]),
    )


def fit_met2_volume(vol4d, mask, config, store_spectra=False):
    """Fit every in-mask voxel and assemble compartment-fraction maps.

    Maps are zero outside the mask; inside, (f_m, f_ie, f_csf) sum to one.
    Per-voxel flip-angle picks are consolidated with an in-mask median
    (radius config.fa_median_radius; 0 disables) before the regularized
    refit, since the transmit field cannot vary voxel to voxel. With
    store_spectra=True also returns a SpectrumStore.
    """
    if vol4d.data.ndim != 4:
        raise ValueError("fit_met2_volume expects a 4D volume")
    acq = config.acquisition
    if vol4d.n_frames != acq.n_echoes:
        raise ValueError(
            f"volume has {vol4d.n_frames} frames, acquisition expects {acq.n_echoes}")
    mask.check_matches(vol4d)

    grid = config.grid()
    fa_set = config.fa_set()
    mu_grid = config.mu_grid()
    stack, grams, ltl = _prepare_engine(grid, acq, tuple(fa_set), config.t1)

    sel = mask.data
    signals = np.ascontiguousarray(vol4d.data[sel], dtype=np.float64)
    if signals.shape[0] == 0:
        raise ValueError("empty mask")
    first = signals[:, 0]
    if np.any(~np.isfinite(signals)) or np.any(signals < 0):
        raise ValueError("in-mask signals must be finite and non-negative")
    if np.any(first <= 0):
        bad = np.argwhere(sel)[first <= 0][0]
        raise ValueError(f"empty voxel inside mask at {tuple(bad)}")
    signals = signals / first[:, None]

    radius = int(config.fa_median_radius)
    if radius < 0:
        raise ValueError(f"fa_median_radius must be >= 0, got {radius}")
    fa_idx = None
    if radius > 0:
        fa_idx, status = _fa_pass(signals, stack, grams, 2000)
        _raise_for_status(status, "fa search", stack.shape)
        fa_idx = _fa_lower_median(fa_idx, np.argwhere(sel),
                                  vol4d.grid_shape, radius)

    fa_idx, mu_idx, spectra, resnorm, at_edge = _fit_signals(
        signals, stack, grams, ltl, mu_grid, fa_idx=fa_idx)

    pts = grid.points
    myelin_max, ie_max = config.cutoffs()
    w_m = pts < myelin_max
    w_ie = (pts >= myelin_max) & (pts < ie_max)
    w_csf = pts >= ie_max
    total = spectra.sum(axis=1)
    if np.any(total <= 0):
        bad = np.argwhere(sel)[total <= 0][0]
        raise NumericalError(f"zero spectrum mass at voxel {tuple(bad)}")
    f_m = spectra[:, w_m].sum(axis=1) / total
    f_ie = spectra[:, w_ie].sum(axis=1) / total
    f_csf = spectra[:, w_csf].sum(axis=1) / total

    def as_map(values):
        out = np.zeros(vol4d.grid_shape)
        out[sel] = values
        return Volume(out, vol4d.spacing, vol4d.affine)

    maps = Met2Maps(
        f_m=as_map(f_m),
        f_ie=as_map(f_ie),
        f_csf=as_map(f_csf),
        fa_map=as_map(fa_set[fa_idx]),
    )
    if not store_spectra:
        return maps
    mus = (np.zeros(len(total)) if mu_idx is None else mu_grid[mu_idx])
    store = SpectrumStore(
        grid=grid,
        indices=np.argwhere(sel),
        amplitudes=spectra,
        reg_mu=mus,
        residual_norm=resnorm,
        lcurve_at_edge=at_edge,
    )
    return maps, store
