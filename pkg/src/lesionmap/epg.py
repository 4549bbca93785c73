"""Extended-phase-graph forward model for multi-echo spin-echo trains.

Configuration states (F+, F-, Z) are propagated through the CPMG train in
the real-valued reduced form: pulses alternate with relaxation plus a unit
gradient shift over each half echo spacing. Excitation is an ideal 90
degree pulse; only the refocusing angle deviates from 180. Longitudinal
regrowth within the train is neglected (echo trains are short against T1
and the acquired signal is normalized to unit initial magnetization), so
for a 180 degree train the echoes reduce exactly to exp(-n*dTE/T2).

Echo n is the magnitude of the F0 state at time n*dTE.
"""

from dataclasses import dataclass

import numpy as np

from .core import AcquisitionMET2, T2Grid

__all__ = ["EpgParams", "DictionaryMatrix", "epg_echo_train", "epg_echo_trains",
           "build_dictionary", "dictionary_stack"]


@dataclass(frozen=True)
class EpgParams:
    """Parameters of one echo train simulation."""

    t2: float  # ms
    t1: float  # ms
    delta_te: float  # ms
    n_echoes: int
    refocus_fa: float  # degrees

    def __post_init__(self):
        vals = (self.t2, self.t1, self.delta_te, self.refocus_fa)
        if not all(np.isfinite(v) for v in vals):
            raise ValueError(f"non-finite EPG parameter in {vals}")
        if self.t2 <= 0:
            raise ValueError(f"t2 must be positive, got {self.t2}")
        if self.t1 < self.t2:
            raise ValueError(f"t1 must be >= t2, got t1={self.t1}, t2={self.t2}")
        if self.delta_te <= 0:
            raise ValueError(f"delta_te must be positive, got {self.delta_te}")
        if not 0 < self.refocus_fa <= 180:
            raise ValueError(f"refocus_fa must be in (0, 180], got {self.refocus_fa}")
        if self.n_echoes < 1:
            raise ValueError(f"n_echoes must be >= 1, got {self.n_echoes}")


@dataclass(frozen=True, eq=False)
class DictionaryMatrix:
    """n_echoes x p matrix of EPG echo trains, one column per T2 grid point."""

    entries: np.ndarray
    t2_grid: T2Grid
    fa: float  # degrees
    acquisition: AcquisitionMET2

    def __post_init__(self):
        e = np.asarray(self.entries, dtype=np.float64)
        expected = (self.acquisition.n_echoes, self.t2_grid.p)
        if e.shape != expected:
            raise ValueError(f"dictionary shape {e.shape}, expected {expected}")
        if np.any(e < 0) or np.any(e > 1 + 1e-12):
            raise ValueError("dictionary entries must lie in [0, 1]")
        e.setflags(write=False)
        object.__setattr__(self, "entries", e)


def epg_echo_trains(t2s, fas, t1, delta_te, n_echoes):
    """Echo trains for paired (T2, flip angle) columns.

    t2s and fas broadcast against each other to a common 1D shape (m,).
    Returns an (n_echoes, m) array of echo magnitudes for unit initial
    magnetization. The state space is truncated at n_echoes + 1 dephasing
    orders, which is exact: higher orders cannot return to F0 in time.
    """
    t2s, fas = np.broadcast_arrays(np.atleast_1d(np.asarray(t2s, dtype=np.float64)),
                                   np.atleast_1d(np.asarray(fas, dtype=np.float64)))
    if not (np.all(np.isfinite(t2s)) and np.all(np.isfinite(fas))):
        raise ValueError("non-finite t2 or flip angle")
    if np.any(t2s <= 0):
        raise ValueError("t2 values must be positive")
    if not np.isfinite(t1) or not np.isfinite(delta_te) or delta_te <= 0:
        raise ValueError("t1 and delta_te must be finite, delta_te positive")

    m = t2s.size
    n_orders = n_echoes + 1
    half = 0.5 * delta_te
    e2 = np.exp(-half / t2s)  # (m,)
    e1 = np.exp(-half / t1)

    alpha = np.deg2rad(fas)
    c2 = np.cos(alpha / 2.0) ** 2
    s2 = np.sin(alpha / 2.0) ** 2
    sa = np.sin(alpha)
    ca = np.cos(alpha)

    fp = np.zeros((n_orders, m))
    fm = np.zeros((n_orders, m))
    z = np.zeros((n_orders, m))
    fp[0] = 1.0  # ideal 90 degree excitation

    echoes = np.empty((n_echoes, m))
    for n in range(n_echoes):
        _relax_shift(fp, fm, z, e2, e1)
        # refocusing pulse: mix (F+, F-, Z) per order
        fp_new = c2 * fp + s2 * fm + sa * z
        fm_new = s2 * fp + c2 * fm - sa * z
        z_new = 0.5 * sa * (fm - fp) + ca * z
        fp, fm, z = fp_new, fm_new, z_new
        _relax_shift(fp, fm, z, e2, e1)
        echoes[n] = np.abs(fp[0])
    return echoes


def _relax_shift(fp, fm, z, e2, e1):
    """In place: T2/T1 decay over half an echo spacing, then unit gradient shift."""
    fp *= e2
    fm *= e2
    z *= e1
    fp[1:] = fp[:-1]
    fm[:-1] = fm[1:]
    fm[-1] = 0.0
    fp[0] = fm[0]


def epg_echo_train(params):
    """Echo amplitudes (length n_echoes) for one parameter set."""
    if not isinstance(params, EpgParams):
        raise TypeError("expected EpgParams")
    out = epg_echo_trains(params.t2, params.refocus_fa, params.t1,
                          params.delta_te, params.n_echoes)
    return out[:, 0]


def build_dictionary(grid, acq, fa, t1=1000.0):
    """Dictionary matrix at a fixed refocusing angle: column j is the echo
    train for grid.points[j]."""
    entries = epg_echo_trains(grid.points, fa, t1, acq.delta_te, acq.n_echoes)
    return DictionaryMatrix(entries, grid, float(fa), acq)


_DICT_CACHE = {}


def dictionary_stack(grid, acq, fa_set, t1=1000.0):
    """(n_fa, n_echoes, p) stack of dictionaries, cached per parameter set.

    fa_set is any iterable of angles in degrees; the returned array is
    read-only and shared between callers.
    """
    fa_tuple = tuple(float(f) for f in fa_set)
    key = (grid.cache_key(), acq, fa_tuple, float(t1))
    hit = _DICT_CACHE.get(key)
    if hit is not None:
        return hit
    stack = np.stack([
        epg_echo_trains(grid.points, fa, t1, acq.delta_te, acq.n_echoes)
        for fa in fa_tuple
    ])
    stack.setflags(write=False)
    if len(_DICT_CACHE) > 8:
        _DICT_CACHE.clear()
    _DICT_CACHE[key] = stack
    return stack
