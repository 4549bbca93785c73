"""Shared domain types: volumes, masks, acquisitions, shell grouping, T2 grids.

All types are immutable value objects; operations are pure. Voxel storage
order is x-fastest (NIfTI convention): the flat index of voxel (i, j, k)
is ``i + nx * (j + ny * k)``.
"""

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "Volume",
    "Mask",
    "AcquisitionMET2",
    "Shell",
    "DiffusionScheme",
    "T2Grid",
    "group_shells",
    "make_t2_grid",
]


def _freeze(a):
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Volume:
    """3D or 4D scalar grid with voxel spacing and a voxel-to-world affine."""

    data: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)
    affine: np.ndarray = None

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim not in (3, 4):
            raise ValueError(f"volume must be 3D or 4D, got shape {data.shape}")
        if any(n <= 0 for n in data.shape):
            raise ValueError(f"all dims must be positive, got {data.shape}")
        spacing = tuple(float(s) for s in self.spacing)
        if len(spacing) != 3 or any(s <= 0 for s in spacing):
            raise ValueError(f"spacing must be 3 positive values, got {self.spacing}")
        affine = self.affine
        if affine is None:
            affine = np.diag(spacing + (1.0,))
        affine = np.asarray(affine, dtype=np.float64)
        if affine.shape != (4, 4):
            raise ValueError(f"affine must be 4x4, got {affine.shape}")
        object.__setattr__(self, "data", _freeze(data))
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "affine", _freeze(affine))

    @property
    def dims(self):
        return self.data.shape

    @property
    def grid_shape(self):
        """Spatial dims only (nx, ny, nz)."""
        return self.data.shape[:3]

    @property
    def n_frames(self):
        return self.data.shape[3] if self.data.ndim == 4 else 1

    def flat_index(self, i, j, k):
        """x-fastest flat index of voxel (i, j, k)."""
        nx, ny, _ = self.grid_shape
        return i + nx * (j + ny * k)

    def unflatten_index(self, flat):
        nx, ny, nz = self.grid_shape
        if not 0 <= flat < nx * ny * nz:
            raise ValueError(f"flat index {flat} out of range")
        i = flat % nx
        j = (flat // nx) % ny
        k = flat // (nx * ny)
        return i, j, k

    def with_data(self, data):
        """New Volume on the same grid (spacing and affine preserved)."""
        return Volume(data, self.spacing, self.affine)


@dataclass(frozen=True, eq=False)
class Mask:
    """Boolean voxel selection on a 3D grid."""

    data: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3:
            raise ValueError(f"mask must be 3D, got shape {data.shape}")
        if data.dtype != np.bool_:
            data = data.astype(bool)
        object.__setattr__(self, "data", _freeze(data))

    @property
    def dims(self):
        return self.data.shape

    @property
    def n_true(self):
        return int(self.data.sum())

    def check_matches(self, vol):
        if vol.grid_shape != self.dims:
            raise ValueError(
                f"mask dims {self.dims} do not match volume dims {vol.grid_shape}"
            )


@dataclass(frozen=True)
class AcquisitionMET2:
    """Multi-echo spin-echo train parameters."""

    delta_te: float  # ms
    n_echoes: int
    prescribed_fa: float = 180.0  # degrees

    def __post_init__(self):
        if not (np.isfinite(self.delta_te) and self.delta_te > 0):
            raise ValueError(f"delta_te must be positive, got {self.delta_te}")
        if self.n_echoes < 2:
            raise ValueError(f"n_echoes must be >= 2, got {self.n_echoes}")
        if not 0 < self.prescribed_fa <= 180:
            raise ValueError(f"prescribed_fa must be in (0, 180], got {self.prescribed_fa}")

    @property
    def echo_times(self):
        """Echo times in ms, 1-based multiples of delta_te."""
        return self.delta_te * np.arange(1, self.n_echoes + 1)


@dataclass(frozen=True)
class Shell:
    """One b-shell: nominal b-value and the frame indices acquired at it."""

    b: float  # s/mm^2
    indices: tuple

    @property
    def n_dirs(self):
        return len(self.indices)


@dataclass(frozen=True, eq=False)
class DiffusionScheme:
    """b-values and unit gradient directions grouped into shells."""

    bvals: np.ndarray
    bvecs: np.ndarray  # (n_frames, 3), unit vectors for b > 0 frames
    shells: tuple = None
    b0_indices: tuple = None
    tolerance: float = 50.0  # s/mm^2

    def __post_init__(self):
        bvals = np.asarray(self.bvals, dtype=np.float64)
        bvecs = np.asarray(self.bvecs, dtype=np.float64)
        if bvals.ndim != 1:
            raise ValueError("bvals must be a 1D array")
        if bvecs.shape != (bvals.size, 3):
            raise ValueError(
                f"bvecs must have shape ({bvals.size}, 3), got {bvecs.shape}"
            )
        shells, b0 = self.shells, self.b0_indices
        if shells is None or b0 is None:
            b0, shells = group_shells(bvals, self.tolerance)
        norms = np.linalg.norm(bvecs, axis=1)
        dw = np.ones(bvals.size, dtype=bool)
        dw[list(b0)] = False
        if np.any(np.abs(norms[dw] - 1.0) > 1e-6):
            raise ValueError("bvecs must be unit vectors on b > 0 frames")
        object.__setattr__(self, "bvals", _freeze(bvals))
        object.__setattr__(self, "bvecs", _freeze(bvecs))
        object.__setattr__(self, "shells", tuple(shells))
        object.__setattr__(self, "b0_indices", tuple(b0))
        self._check_partition()

    def _check_partition(self):
        seen = list(self.b0_indices)
        for s in self.shells:
            seen.extend(s.indices)
        if sorted(seen) != list(range(self.n_frames)):
            raise ValueError("shells plus b0 set must partition the frames")
        nominals = [s.b for s in self.shells]
        if any(b2 <= b1 for b1, b2 in zip(nominals, nominals[1:])):
            raise ValueError("shell nominal b-values must be strictly increasing")

    @property
    def n_frames(self):
        return self.bvals.size

    @property
    def n_shells(self):
        return len(self.shells)

    @property
    def shell_bs(self):
        return np.array([s.b for s in self.shells])


def group_shells(bvals, tolerance=50.0):
    """Group frames into b0 set and shells of matching nominal b-value.

    Frames with b <= tolerance form the b0 set. Remaining frames are
    clustered by chaining consecutive sorted b-values whose gap is at most
    the tolerance; the nominal b of a shell is the mean of its members.

    Returns (b0_indices, shells) with shells sorted by ascending nominal b.
    Raises if a frame would match two nominals or sits farther than the
    tolerance from its own nominal (ambiguous grouping).
    """
    bvals = np.asarray(bvals, dtype=np.float64)
    if bvals.size == 0:
        raise ValueError("empty b-value list")
    if np.any(bvals < 0) or not np.all(np.isfinite(bvals)):
        raise ValueError("b-values must be finite and non-negative")
    if tolerance < 0:
        raise ValueError("tolerance must be >= 0")

    b0 = tuple(int(i) for i in np.nonzero(bvals <= tolerance)[0])
    dw = np.nonzero(bvals > tolerance)[0]
    if dw.size == 0:
        return b0, ()

    order = dw[np.argsort(bvals[dw], kind="stable")]
    clusters = [[order[0]]]
    for idx in order[1:]:
        if bvals[idx] - bvals[clusters[-1][-1]] <= tolerance:
            clusters[-1].append(idx)
        else:
            clusters.append([idx])

    shells = []
    for members in clusters:
        nominal = float(np.mean(bvals[members]))
        if np.any(np.abs(bvals[members] - nominal) > tolerance):
            raise ValueError(
                f"ambiguous shell grouping: cluster around b={nominal:.1f} wider "
                f"than tolerance {tolerance}"
            )
        shells.append(Shell(nominal, tuple(sorted(int(i) for i in members))))

    for idx in dw:
        n_hits = sum(abs(bvals[idx] - s.b) <= tolerance for s in shells)
        if n_hits > 1:
            raise ValueError(
                f"ambiguous shell grouping: frame {idx} (b={bvals[idx]}) matches "
                f"{n_hits} nominal b-values"
            )
    return b0, tuple(shells)


@dataclass(frozen=True, eq=False)
class T2Grid:
    """Strictly increasing T2 sample points in ms."""

    points: np.ndarray
    log_spaced: bool = True

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim != 1 or pts.size < 1:
            raise ValueError("T2 grid needs a 1D array of points")
        if np.any(pts <= 0) or not np.all(np.isfinite(pts)):
            raise ValueError("T2 points must be positive and finite")
        if np.any(np.diff(pts) <= 0):
            raise ValueError("T2 points must be strictly increasing")
        object.__setattr__(self, "points", _freeze(pts))

    @property
    def p(self):
        return self.points.size

    def cache_key(self):
        return self.points.tobytes()


def make_t2_grid(t2_min, t2_max, p):
    """Geometrically spaced T2 grid from t2_min to t2_max with p points."""
    if not (0 < t2_min < t2_max):
        raise ValueError(f"need 0 < t2_min < t2_max, got ({t2_min}, {t2_max})")
    if p < 2:
        raise ValueError(f"need p >= 2 grid points, got {p}")
    return T2Grid(np.geomspace(t2_min, t2_max, int(p)), log_spaced=True)
