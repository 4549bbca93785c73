"""Single-file NIfTI-1 volumes, read and written directly from the bit layout.

Covers the 348-byte header with the "n+1\\0" magic, uint8/int16/float32/
float64 payloads, optional gzip (picked by suffix or sniffed from the
stream), both byte orders on read, and atomic temp-then-rename writes.
The sform is authoritative on read; writes emit sform always and qform
whenever the affine is shear-free.
"""

import gzip
import os
import struct
import tempfile

import numpy as np

from .core import Volume
from .errors import (
    BadMagicError,
    NiftiError,
    TruncatedFileError,
    UnsupportedDatatypeError,
    UnsupportedFormatError,
)

__all__ = ["read_nifti", "write_nifti", "HEADER_SIZE"]

HEADER_SIZE = 348
VOX_OFFSET = 352  # header + 4-byte empty extension flag
MAGIC_SINGLE = b"n+1\x00"
MAGIC_DETACHED = b"ni1\x00"

_CODE_TO_DTYPE = {2: "u1", 4: "i2", 16: "f4", 64: "f8"}
_DTYPE_TO_CODE = {
    np.dtype(np.uint8): 2,
    np.dtype(np.int16): 4,
    np.dtype(np.float32): 16,
    np.dtype(np.float64): 64,
}


def _load_bytes(path):
    path = str(path)
    try:
        with open(path, "rb") as f:
            head = f.read(2)
            rest = f.read()
    except IsADirectoryError:
        raise NiftiError(f"{path} is a directory")
    raw = head + rest
    if head == b"\x1f\x8b":  # gzip stream regardless of suffix
        try:
            return gzip.decompress(raw)
        except (EOFError, OSError):
            raise TruncatedFileError(f"gzip stream in {path} is corrupt")
    if path.endswith(".gz"):
        raise BadMagicError(f"{path} has a .gz suffix but no gzip magic")
    return raw


def _quaternion_from_affine(affine, spacing):
    """(qfac, (b, c, d), offset) or None when the affine has shear or its
    scalings disagree with the stored pixdims."""
    R = np.array(affine[:3, :3], dtype=np.float64)
    norms = np.sqrt((R ** 2).sum(axis=0))
    if np.any(norms <= 0) or not np.allclose(norms, spacing, rtol=1e-4):
        return None
    R = R / norms
    qfac = 1.0
    if np.linalg.det(R) < 0:
        R[:, 2] = -R[:, 2]
        qfac = -1.0
    if not np.allclose(R.T @ R, np.eye(3), atol=1e-5):
        return None
    tr = np.trace(R)
    if tr > 0:
        s = 2.0 * np.sqrt(tr + 1.0)
        a = 0.25 * s
        b = (R[2, 1] - R[1, 2]) / s
        c = (R[0, 2] - R[2, 0]) / s
        d = (R[1, 0] - R[0, 1]) / s
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = 2.0 * np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2])
        a = (R[2, 1] - R[1, 2]) / s
        b = 0.25 * s
        c = (R[0, 1] + R[1, 0]) / s
        d = (R[0, 2] + R[2, 0]) / s
    elif R[1, 1] > R[2, 2]:
        s = 2.0 * np.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2])
        a = (R[0, 2] - R[2, 0]) / s
        b = (R[0, 1] + R[1, 0]) / s
        c = 0.25 * s
        d = (R[1, 2] + R[2, 1]) / s
    else:
        s = 2.0 * np.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1])
        a = (R[1, 0] - R[0, 1]) / s
        b = (R[0, 2] + R[2, 0]) / s
        c = (R[1, 2] + R[2, 1]) / s
        d = 0.25 * s
    if a < 0:  # stored quaternion must have a non-negative scalar part
        b, c, d = -b, -c, -d
    return qfac, (b, c, d), tuple(affine[:3, 3])


def _affine_from_quaternion(b, c, d, offset, spacing, qfac):
    a2 = 1.0 - (b * b + c * c + d * d)
    a = np.sqrt(a2) if a2 > 0 else 0.0
    R = np.array([
        [a * a + b * b - c * c - d * d, 2 * (b * c - a * d), 2 * (b * d + a * c)],
        [2 * (b * c + a * d), a * a + c * c - b * b - d * d, 2 * (c * d - a * b)],
        [2 * (b * d - a * c), 2 * (c * d + a * b), a * a + d * d - b * b - c * c],
    ])
    scale = np.array(spacing, dtype=np.float64)
    scale[2] *= -1.0 if qfac < 0 else 1.0
    affine = np.eye(4)
    affine[:3, :3] = R * scale[None, :]
    affine[:3, 3] = offset
    return affine


def _pack_header(shape, code, spacing, affine):
    h = bytearray(HEADER_SIZE)
    struct.pack_into("<i", h, 0, HEADER_SIZE)
    dim = [len(shape), *shape] + [1] * (7 - len(shape))
    struct.pack_into("<8h", h, 40, *dim)
    struct.pack_into("<h", h, 70, code)
    struct.pack_into("<h", h, 72, np.dtype(_CODE_TO_DTYPE[code]).itemsize * 8)
    quat = _quaternion_from_affine(affine, spacing)
    qfac = quat[0] if quat else 1.0
    pixdim = [qfac, *spacing] + [1.0] * (7 - len(spacing))
    struct.pack_into("<8f", h, 76, *pixdim)
    struct.pack_into("<f", h, 108, float(VOX_OFFSET))
    struct.pack_into("<2f", h, 112, 1.0, 0.0)  # scl_slope, scl_inter
    struct.pack_into("B", h, 123, 2)  # spatial units: mm
    struct.pack_into("80s", h, 148, b"lesionmap")
    if quat:
        _, (b, c, d), offset = quat
        struct.pack_into("<h", h, 252, 1)
        struct.pack_into("<6f", h, 256, b, c, d, *offset)
    struct.pack_into("<h", h, 254, 1)  # sform_code
    struct.pack_into("<4f", h, 280, *affine[0, :4])
    struct.pack_into("<4f", h, 296, *affine[1, :4])
    struct.pack_into("<4f", h, 312, *affine[2, :4])
    struct.pack_into("4s", h, 344, MAGIC_SINGLE)
    return bytes(h)


def write_nifti(vol, path, dtype=None):
    """Write a Volume as single-file NIfTI-1; gzip when path ends in .gz.

    dtype picks the on-disk payload type; None keeps the volume's own type
    when it is one of the four supported codes (bool becomes uint8,
    anything else float64). The write is atomic and, for .gz, byte-stable
    across runs.
    """
    if not isinstance(vol, Volume):
        raise TypeError("expected Volume")
    if dtype is None:
        src = vol.data.dtype
        if src == np.dtype(bool):
            dtype = np.uint8
        elif src in _DTYPE_TO_CODE:
            dtype = src
        else:
            dtype = np.float64
    dtype = np.dtype(dtype)
    if dtype not in _DTYPE_TO_CODE:
        raise UnsupportedDatatypeError(
            f"cannot store dtype {dtype}; supported: uint8, int16, float32, float64")
    if any(n > 32767 for n in vol.dims):
        raise ValueError(f"dims {vol.dims} exceed the 16-bit header fields")
    code = _DTYPE_TO_CODE[dtype]
    header = _pack_header(vol.dims, code, vol.spacing, vol.affine)
    payload = vol.data.astype(dtype.newbyteorder("<"), copy=False)
    body = header + b"\x00\x00\x00\x00" + payload.tobytes(order="F")

    path = str(path)
    parent = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=parent, suffix=".part")
    try:
        with os.fdopen(fd, "wb") as f:
            if path.endswith(".gz"):
                # fixed mtime keeps repeated writes bit-identical
                with gzip.GzipFile(fileobj=f, mode="wb", mtime=0) as z:
                    z.write(body)
            else:
                f.write(body)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def read_nifti(path):
    """Read a single-file NIfTI-1 volume (optionally gzipped) as a Volume."""
    raw = _load_bytes(path)
    if len(raw) < HEADER_SIZE:
        raise TruncatedFileError(
            f"{path}: {len(raw)} bytes is shorter than the {HEADER_SIZE}-byte header")
    magic = raw[344:348]
    if magic == MAGIC_DETACHED:
        raise UnsupportedFormatError(
            f"{path}: detached header/image pairs are not supported")
    if magic != MAGIC_SINGLE:
        raise BadMagicError(f"{path}: magic {magic!r}, expected {MAGIC_SINGLE!r}")
    for end in ("<", ">"):
        if struct.unpack_from(end + "i", raw, 0)[0] == HEADER_SIZE:
            break
    else:
        raise BadMagicError(f"{path}: header size field is not {HEADER_SIZE}")

    dim = struct.unpack_from(end + "8h", raw, 40)
    ndim = dim[0]
    if ndim not in (3, 4):
        raise UnsupportedFormatError(f"{path}: {ndim}D volumes are not supported")
    shape = dim[1:1 + ndim]
    if any(n <= 0 for n in shape):
        raise NiftiError(f"{path}: non-positive dimension in {shape}")
    code = struct.unpack_from(end + "h", raw, 70)[0]
    if code not in _CODE_TO_DTYPE:
        raise UnsupportedDatatypeError(f"{path}: datatype code {code}")
    pixdim = struct.unpack_from(end + "8f", raw, 76)
    vox_offset = int(struct.unpack_from(end + "f", raw, 108)[0])
    if vox_offset < HEADER_SIZE:
        raise NiftiError(f"{path}: vox_offset {vox_offset} inside the header")
    scl_slope, scl_inter = struct.unpack_from(end + "2f", raw, 112)
    qform_code, sform_code = struct.unpack_from(end + "2h", raw, 252)

    dtype = np.dtype(end + _CODE_TO_DTYPE[code])
    n_values = int(np.prod(shape))
    need = vox_offset + n_values * dtype.itemsize
    if len(raw) < need:
        raise TruncatedFileError(
            f"{path}: payload needs {need} bytes, file has {len(raw)}")
    flat = np.frombuffer(raw, dtype=dtype, count=n_values, offset=vox_offset)
    data = flat.reshape(shape, order="F")
    if end == ">":
        data = data.astype(data.dtype.newbyteorder("<"))
    if scl_slope not in (0.0, 1.0) or (scl_slope != 0.0 and scl_inter != 0.0):
        data = data.astype(np.float64) * scl_slope + scl_inter

    spacing = tuple(p if p > 0 else 1.0 for p in pixdim[1:4])
    if sform_code > 0:
        affine = np.eye(4)
        affine[0] = struct.unpack_from(end + "4f", raw, 280)
        affine[1] = struct.unpack_from(end + "4f", raw, 296)
        affine[2] = struct.unpack_from(end + "4f", raw, 312)
    elif qform_code > 0:
        b, c, d, ox, oy, oz = struct.unpack_from(end + "6f", raw, 256)
        qfac = -1.0 if pixdim[0] < 0 else 1.0
        affine = _affine_from_quaternion(b, c, d, (ox, oy, oz), spacing, qfac)
    else:
        affine = None
    return Volume(data, spacing, affine)
