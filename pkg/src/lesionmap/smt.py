"""Spherical-mean diffusion fitting.

Direction-averaging the signal on each b-shell removes the orientation
dependence of the diffusion signal, so a two-compartment model of the
per-shell means (an intra-neurite "stick" plus an extra-neurite zeppelin
whose radial diffusivity follows the tortuosity rule) yields microscopic
tissue fractions that are unconfounded by fibre crossings and dispersion.
"""

from dataclasses import dataclass

import numpy as np
from scipy.optimize import minimize
from scipy.special import erf

from .core import Volume


@dataclass(frozen=True, eq=False)
class ShellMeans:
    """Per-shell direction-averaged signals of one voxel.

    means are normalized by the voxel's mean b=0 signal and clipped to
    (0, 1.5]; values above 1 can only come from noise overshoot.
    """

    b_list: np.ndarray  # s/mm^2, ascending
    means: np.ndarray  # dimensionless
    n_dirs: np.ndarray  # directions averaged per shell

    def __post_init__(self):
        b = np.asarray(self.b_list, dtype=np.float64)
        m = np.asarray(self.means, dtype=np.float64)
        n = np.asarray(self.n_dirs, dtype=np.int64)
        if not (b.shape == m.shape == n.shape) or b.ndim != 1:
            raise ValueError("b_list, means and n_dirs must be 1D and equal length")
        if np.any(np.diff(b) <= 0):
            raise ValueError("b_list must be strictly ascending")
        if np.any(m <= 0) or np.any(m > 1.5):
            raise ValueError("means must lie in (0, 1.5]")
        if np.any(n <= 0):
            raise ValueError("each shell needs at least one direction")
        for name, arr in (("b_list", b), ("means", m), ("n_dirs", n)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def n_shells(self):
        return self.b_list.size


@dataclass(frozen=True)
class SmtFit:
    """Two-compartment spherical-mean fit of one voxel."""

    f_i: float  # intra-neurite signal fraction
    f_e: float  # extra-neurite signal fraction, 1 - f_i
    lambda_par: float  # parallel diffusivity, mm^2/s
    residual_norm: float
    degenerate: bool = False  # no signal decay: boundary fit

    def __post_init__(self):
        if not 0.0 <= self.f_i <= 1.0:
            raise ValueError(f"f_i must lie in [0, 1], got {self.f_i}")
        if self.f_e != 1.0 - self.f_i:
            raise ValueError("f_e must equal 1 - f_i exactly")


@dataclass(frozen=True)
class SmtConfig:
    """Settings for the spherical-mean fit."""

    lambda_min: float = 0.1e-3  # mm^2/s
    lambda_max: float = 3.0e-3  # free-water ceiling
    grid_size: int = 64

    def __post_init__(self):
        if not 0.0 < self.lambda_min < self.lambda_max:
            raise ValueError("need 0 < lambda_min < lambda_max")
        if self.grid_size < 2:
            raise ValueError("grid_size must be at least 2")

    @property
    def bounds(self):
        return (self.lambda_min, self.lambda_max)


@dataclass(frozen=True, eq=False)
class SmtMaps:
    """Voxelwise spherical-mean parameter maps."""

    f_i: Volume
    f_e: Volume
    lambda_par: Volume


def smt_stick_mean(b, lambda_par):
    """Spherical mean of a stick compartment: sqrt(pi/(4x)) erf(sqrt(x)).

    x = b*lambda_par. Below x = 1e-9 the series limit 1 - x/3 is used so
    b = 0 and lambda_par = 0 are exact.
    """
    b = np.asarray(b, dtype=np.float64)
    lambda_par = np.asarray(lambda_par, dtype=np.float64)
    if np.any(b < 0) or np.any(lambda_par < 0):
        raise ValueError("b and lambda_par must be non-negative")
    x = b * lambda_par
    safe = np.where(x < 1e-9, 1.0, x)
    out = np.where(
        x < 1e-9,
        1.0 - x / 3.0,
        np.sqrt(np.pi / (4.0 * safe)) * erf(np.sqrt(safe)),
    )
    return float(out) if out.ndim == 0 else out


def smt_zeppelin_mean(b, lambda_par, lambda_perp):
    """Spherical mean of a zeppelin: exp(-b lperp) times a stick of lpar-lperp."""
    lambda_perp = np.asarray(lambda_perp, dtype=np.float64)
    lambda_par = np.asarray(lambda_par, dtype=np.float64)
    if np.any(lambda_perp < 0):
        raise ValueError("lambda_perp must be non-negative")
    if np.any(lambda_perp > lambda_par):
        raise ValueError("lambda_perp must not exceed lambda_par")
    b = np.asarray(b, dtype=np.float64)
    out = np.exp(-b * lambda_perp) * smt_stick_mean(b, lambda_par - lambda_perp)
    return float(out) if np.ndim(out) == 0 else out


def smt_predict(b_list, f_i, lambda_par):
    """Predicted per-shell means of the stick + tortuosity-zeppelin mixture.

    The zeppelin's radial diffusivity follows the tortuosity rule
    lambda_perp = (1 - f_i) * lambda_par.
    """
    if not 0.0 <= f_i <= 1.0:
        raise ValueError(f"f_i must lie in [0, 1], got {f_i}")
    b = np.asarray(b_list, dtype=np.float64)
    lambda_perp = (1.0 - f_i) * lambda_par
    return f_i * smt_stick_mean(b, lambda_par) + (1.0 - f_i) * smt_zeppelin_mean(
        b, lambda_par, lambda_perp)


def spherical_mean_per_shell(signal, scheme):
    """Average one voxel's signal over each shell, normalized by mean b0.

    Means are clipped into (0, 1.5]: the ceiling allows noise overshoot,
    the floor (1e-6) keeps a fully decayed shell representable.
    """
    signal = np.asarray(signal, dtype=np.float64)
    if signal.shape != (scheme.n_frames,):
        raise ValueError(
            f"signal length {signal.shape} does not match scheme frames "
            f"({scheme.n_frames})")
    if not np.all(np.isfinite(signal)):
        raise ValueError("signal must be finite")
    b0 = signal[list(scheme.b0_indices)].mean()
    if b0 <= 0:
        raise ValueError("invalid voxel: non-positive mean b0 signal")
    means = np.array([signal[list(s.indices)].mean() for s in scheme.shells])
    means = np.clip(means / b0, 1e-6, 1.5)
    return ShellMeans(
        b_list=scheme.shell_bs,
        means=means,
        n_dirs=np.array([s.n_dirs for s in scheme.shells]),
    )


def _grid_objectives(b, means, weights, fi_grid, lp_grid):
    """Weighted squared error at every (f_i, lambda_par) grid node."""
    fi = fi_grid[:, None, None]
    lp = lp_grid[None, :, None]
    bb = b[None, None, :]
    stick = smt_stick_mean(bb, lp)
    zep = np.exp(-bb * (1.0 - fi) * lp) * smt_stick_mean(bb, fi * lp)
    pred = fi * stick + (1.0 - fi) * zep
    return ((pred - means) ** 2 * weights).sum(axis=-1)


def fit_smt_voxel(means, bounds=(0.1e-3, 3.0e-3), grid_size=64):
    """Fit (f_i, lambda_par) to one voxel's shell means.

    Coarse grid search over the full box followed by simplex refinement
    from the best nodes; the weighted squared error uses per-shell weights
    proportional to the direction count, matching the variance of each
    shell's mean estimate. All means >= 1 leave nothing to fit and are
    flagged degenerate (lambda_par pins to the lower bound).
    """
    lo, hi = float(bounds[0]), float(bounds[1])
    if not 0.0 < lo < hi:
        raise ValueError("need 0 < bounds[0] < bounds[1]")
    if means.n_shells < 2:
        raise ValueError("need at least 2 shells to fit two parameters")
    b = means.b_list
    m = means.means
    w = means.n_dirs.astype(np.float64)

    def objective(params):
        fi, lp = params
        pred = smt_predict(b, fi, lp)
        return float((w * (pred - m) ** 2).sum())

    fi_grid = np.linspace(0.0, 1.0, grid_size)
    lp_grid = np.linspace(lo, hi, grid_size)
    obj = _grid_objectives(b, m, w, fi_grid, lp_grid)
    order = np.argsort(obj, axis=None)

    best = None
    for flat in order[:3]:
        i, j = np.unravel_index(flat, obj.shape)
        r = minimize(
            objective,
            x0=[fi_grid[i], lp_grid[j]],
            method="Nelder-Mead",
            bounds=[(0.0, 1.0), (lo, hi)],
            options={"xatol": 1e-8, "fatol": 1e-16, "maxiter": 600},
        )
        if best is None or r.fun < best.fun:
            best = r
    fi, lp = best.x
    fi = float(np.clip(fi, 0.0, 1.0))
    lp = float(np.clip(lp, lo, hi))
    return SmtFit(
        f_i=fi,
        f_e=1.0 - fi,
        lambda_par=lp,
        residual_norm=float(np.sqrt(best.fun)),
        degenerate=bool(np.all(m >= 1.0)),
    )


def _predict_rows(b, fi, lp):
    """smt_predict for column vectors of (f_i, lambda_par), one row each.

    Mirrors the scalar formula operation for operation so a row here and
    smt_predict on that row's parameters produce identical floats.
    """
    stick = smt_stick_mean(b, lp)
    lambda_perp = (1.0 - fi) * lp
    zep = np.exp(-b * lambda_perp) * smt_stick_mean(b, lp - lambda_perp)
    return fi * stick + (1.0 - fi) * zep


def _batched_nelder_mead(b, means, weights, x0, lower, upper,
                         xatol=1e-8, fatol=1e-16, maxiter=600):
    """Bounded Nelder-Mead on the per-row SMT objective, all rows at once.

    Follows the reference simplex algorithm step for step (reflection 1,
    expansion 2, contraction 0.5, shrink 0.5; same initial simplex, bound
    clipping and stop rules as fit_smt_voxel's scipy refinement), so each
    row's trajectory matches a scalar run from the same start; rows share
    only the vectorized objective evaluations. Returns (x, fun) per row.
    """
    rho, chi, psi, sigma = 1, 2, 0.5, 0.5
    nonzdelt, zdelt = 0.05, 0.00025
    n_rows = x0.shape[0]

    def evaluate(points, rows):
        pred = _predict_rows(b, points[:, :1], points[:, 1:2])
        return (weights * (pred - means[rows]) ** 2).sum(axis=1)

    sim = np.repeat(np.clip(x0, lower, upper)[:, None, :], 3, axis=1)
    for k in range(2):
        y = sim[:, 0, k]
        sim[:, k + 1, k] = np.where(y != 0.0, (1 + nonzdelt) * y, zdelt)
    sim = np.where(sim > upper, 2 * upper - sim, sim)
    sim = np.clip(sim, lower, upper)

    all_rows = np.arange(n_rows)
    fsim = np.stack([evaluate(sim[:, j], all_rows) for j in range(3)], axis=1)
    order = np.argsort(fsim, axis=1)
    sim = np.take_along_axis(sim, order[:, :, None], axis=1)
    fsim = np.take_along_axis(fsim, order, axis=1)

    active = np.ones(n_rows, dtype=bool)
    iterations = 1
    while iterations < maxiter:
        spread_x = np.abs(sim[:, 1:] - sim[:, :1]).max(axis=(1, 2))
        spread_f = np.abs(fsim[:, :1] - fsim[:, 1:]).max(axis=1)
        active &= ~((spread_x <= xatol) & (spread_f <= fatol))
        rows = np.where(active)[0]
        if rows.size == 0:
            break
        s = sim[rows]
        f = fsim[rows]
        xbar = (s[:, 0] + s[:, 1]) / 2
        xr = np.clip((1 + rho) * xbar - rho * s[:, 2], lower, upper)
        fxr = evaluate(xr, rows)
        new_x = s[:, 2].copy()
        new_f = f[:, 2].copy()
        shrink = np.zeros(rows.size, dtype=bool)

        expand = fxr < f[:, 0]
        if expand.any():
            xe = np.clip((1 + rho * chi) * xbar[expand]
                         - rho * chi * s[expand, 2], lower, upper)
            fxe = evaluate(xe, rows[expand])
            take_e = fxe < fxr[expand]
            new_x[expand] = np.where(take_e[:, None], xe, xr[expand])
            new_f[expand] = np.where(take_e, fxe, fxr[expand])
        reflect = ~expand & (fxr < f[:, 1])
        new_x[reflect] = xr[reflect]
        new_f[reflect] = fxr[reflect]
        outside = ~expand & ~reflect & (fxr < f[:, 2])
        if outside.any():
            xc = np.clip((1 + psi * rho) * xbar[outside]
                         - psi * rho * s[outside, 2], lower, upper)
            fxc = evaluate(xc, rows[outside])
            take_c = fxc <= fxr[outside]
            new_x[outside] = np.where(take_c[:, None], xc, new_x[outside])
            new_f[outside] = np.where(take_c, fxc, new_f[outside])
            shrink[outside] = ~take_c
        inside = ~expand & ~reflect & ~outside
        if inside.any():
            xcc = np.clip((1 - psi) * xbar[inside] + psi * s[inside, 2],
                          lower, upper)
            fxcc = evaluate(xcc, rows[inside])
            take_cc = fxcc < f[inside, 2]
            new_x[inside] = np.where(take_cc[:, None], xcc, new_x[inside])
            new_f[inside] = np.where(take_cc, fxcc, new_f[inside])
            shrink[inside] = ~take_cc
        s = s.copy()
        f = f.copy()
        s[:, 2] = new_x
        f[:, 2] = new_f
        if shrink.any():
            sub = np.where(shrink)[0]
            for j in (1, 2):
                s[sub, j] = np.clip(
                    s[sub, 0] + sigma * (s[sub, j] - s[sub, 0]), lower, upper)
                f[sub, j] = evaluate(s[sub, j], rows[sub])
        order = np.argsort(f, axis=1)
        sim[rows] = np.take_along_axis(s, order[:, :, None], axis=1)
        fsim[rows] = np.take_along_axis(f, order, axis=1)
        iterations += 1
    return sim[:, 0], fsim[:, 0]


def _fit_rows(b, shell_mat, n_dirs, bounds, grid_size):
    """(f_i, lambda_par) per shell-mean row: coarse grid then simplex.

    The batched equivalent of fit_smt_voxel: same 64x64 grid objective,
    same top-3 start nodes, same refinement semantics, first-wins tie on
    equal refined objectives.
    """
    lo, hi = float(bounds[0]), float(bounds[1])
    weights = n_dirs.astype(np.float64)
    fi_grid = np.linspace(0.0, 1.0, grid_size)
    lp_grid = np.linspace(lo, hi, grid_size)

    n_rows = shell_mat.shape[0]
    starts = np.empty((n_rows, 3), dtype=np.intp)
    # the (chunk, grid, grid, shells) objective temporary stays ~32 MB
    chunk = max(1, int(2**22 // (grid_size * grid_size * b.size)))
    for at in range(0, n_rows, chunk):
        rows = shell_mat[at:at + chunk]
        fi = fi_grid[None, :, None, None]
        lp = lp_grid[None, None, :, None]
        bb = b[None, None, None, :]
        stick = smt_stick_mean(bb, lp)
        zep = np.exp(-bb * (1.0 - fi) * lp) * smt_stick_mean(bb, fi * lp)
        pred = fi * stick + (1.0 - fi) * zep
        obj = ((pred - rows[:, None, None, :]) ** 2 * weights).sum(axis=-1)
        flat = obj.reshape(rows.shape[0], -1)
        starts[at:at + chunk] = np.argsort(flat, axis=1)[:, :3]

    lower = np.array([0.0, lo])
    upper = np.array([1.0, hi])
    best_x = None
    best_f = None
    for column in range(3):
        i, j = np.unravel_index(starts[:, column], (grid_size, grid_size))
        x0 = np.column_stack([fi_grid[i], lp_grid[j]])
        x, fun = _batched_nelder_mead(b, shell_mat, weights, x0, lower, upper)
        if best_x is None:
            best_x, best_f = x, fun
        else:
            win = fun < best_f
            best_x = np.where(win[:, None], x, best_x)
            best_f = np.where(win, fun, best_f)
    f_i = np.clip(best_x[:, 0], 0.0, 1.0)
    lp = np.clip(best_x[:, 1], lo, hi)
    return f_i, lp


def fit_smt_volume(dwi, scheme, mask, config=None):
    """Fit every in-mask voxel and assemble (f_i, f_e, lambda_par) maps.

    Maps are zero outside the mask. Voxel fits are independent, so the
    output does not depend on traversal order; voxels with identical shell
    means are fitted once and share the result.
    """
    if config is None:
        config = SmtConfig()
    if dwi.data.ndim != 4:
        raise ValueError("fit_smt_volume expects a 4D volume")
    if dwi.n_frames != scheme.n_frames:
        raise ValueError(
            f"volume has {dwi.n_frames} frames, scheme expects {scheme.n_frames}")
    mask.check_matches(dwi)

    if len(scheme.shells) < 2:
        raise ValueError("need at least 2 shells to fit two parameters")
    sel = mask.data
    signals = np.ascontiguousarray(dwi.data[sel], dtype=np.float64)
    if signals.shape[0] == 0:
        raise ValueError("empty mask")
    if np.any(~np.isfinite(signals)):
        raise ValueError("in-mask signals must be finite")
    b0 = signals[:, list(scheme.b0_indices)].mean(axis=1)
    if np.any(b0 <= 0):
        bad = np.argwhere(sel)[b0 <= 0][0]
        raise ValueError(
            f"invalid voxel at {tuple(bad)}: non-positive mean b0 signal")
    # per-voxel 1D means: row-axis reductions can differ from the scalar
    # route by an ulp, which the simplex then amplifies past equality
    b0_idx = np.fromiter(scheme.b0_indices, dtype=np.intp)
    shell_idx = [np.fromiter(s.indices, dtype=np.intp) for s in scheme.shells]
    shell_mat = np.empty((signals.shape[0], len(shell_idx)))
    for v in range(signals.shape[0]):
        sig = signals[v]
        row = np.array([sig[idx].mean() for idx in shell_idx])
        shell_mat[v] = np.clip(row / sig[b0_idx].mean(), 1e-6, 1.5)

    b = scheme.shell_bs
    n_dirs = np.array([s.n_dirs for s in scheme.shells])
    unique_rows, inverse = np.unique(shell_mat, axis=0, return_inverse=True)
    inverse = np.asarray(inverse).reshape(-1)
    f_i_u, lp_u = _fit_rows(b, unique_rows, n_dirs,
                            bounds=config.bounds, grid_size=config.grid_size)
    f_i = f_i_u[inverse]
    lp = lp_u[inverse]

    def as_map(values):
        out = np.zeros(dwi.grid_shape)
        out[sel] = values
        return Volume(out, dwi.spacing, dwi.affine)

    return SmtMaps(f_i=as_map(f_i), f_e=as_map(1.0 - f_i), lambda_par=as_map(lp))
