"""Dense 3D volumes, intensity windowing and file I/O.

Volumes are stored as ``(z, y, x)`` float32 arrays in C order, so ``x`` is the
fastest-varying axis.  That is also the on-disk voxel order of NIfTI-1, which
lets the reader and writer move bytes without any transposition.

Two formats are understood:

* NIfTI-1 single file (``.nii`` / ``.nii.gz``), little-endian, with voxel
  types uint8, int16 and float32.
* raw little-endian float32 (``.bin``) next to a JSON sidecar (``.json``).
"""
from __future__ import annotations

import enum
import gzip
import json
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    CorruptHeader,
    DegenerateRange,
    InvalidGrid,
    IoFailure,
    UnsupportedDatatype,
    UnsupportedFormat,
)

__all__ = [
    "Kind",
    "VoxelGrid",
    "load_volume",
    "save_volume",
    "truncate_normalize",
]


class Kind(str, enum.Enum):
    INTENSITY = "Intensity"
    PROBABILITY = "Probability"
    BINARY = "Binary"


@dataclass(frozen=True, eq=False)
class VoxelGrid:
    """Immutable 3D scalar field with voxel spacing in mm.

    ``array`` is copied to a read-only float32 array on construction.  The
    ``kind`` invariants are checked eagerly: probability grids must lie in
    ``[0, 1]`` and binary grids must contain only 0 and 1.
    """

    array: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    kind: Kind = Kind.INTENSITY
    _flat: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        arr = np.array(self.array, dtype=np.float32, order="C", copy=True)
        if arr.ndim != 3 or min(arr.shape) <= 0:
            raise InvalidGrid(f"expected a non-empty 3D array, got shape {arr.shape}")
        spacing = tuple(float(s) for s in self.spacing)
        if len(spacing) != 3 or not all(np.isfinite(s) and s > 0 for s in spacing):
            raise InvalidGrid(f"spacing must be three positive numbers, got {self.spacing}")
        kind = Kind(self.kind)
        if kind is Kind.PROBABILITY:
            if not np.all((arr >= 0.0) & (arr <= 1.0)):
                raise InvalidGrid("probability grid has values outside [0, 1]")
        elif kind is Kind.BINARY:
            if not np.all((arr == 0.0) | (arr == 1.0)):
                raise InvalidGrid("binary grid has values other than 0 and 1")
        arr.flags.writeable = False
        object.__setattr__(self, "array", arr)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "kind", kind)
        object.__setattr__(self, "_flat", arr.reshape(-1))

    @classmethod
    def from_mask(cls, mask, spacing=(1.0, 1.0, 1.0)) -> "VoxelGrid":
        return cls(np.asarray(mask).astype(bool).astype(np.float32), spacing, Kind.BINARY)

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(int(n) for n in self.array.shape)

    @property
    def values(self) -> np.ndarray:
        """Flat row-major view (x fastest)."""
        return self._flat

    @property
    def size(self) -> int:
        return self.array.size

    def mask(self) -> np.ndarray:
        """Boolean foreground (``value != 0``)."""
        return self.array != 0

    def derive(self, array, kind: Kind | None = None) -> "VoxelGrid":
        return VoxelGrid(array, self.spacing, self.kind if kind is None else kind)

    def contains(self, coord) -> bool:
        return all(0 <= int(c) < n for c, n in zip(coord, self.dims))

    def __eq__(self, other):
        if not isinstance(other, VoxelGrid):
            return NotImplemented
        return (
            self.kind is other.kind
            and self.spacing == other.spacing
            and self.dims == other.dims
            and np.array_equal(self.array, other.array)
        )

    __hash__ = None


def truncate_normalize(grid: VoxelGrid, lo: float, hi: float) -> VoxelGrid:
    """Clamp intensities to ``[lo, hi]`` and rescale linearly to ``[0, 1]``."""
    if not lo < hi:
        raise DegenerateRange(f"lower bound {lo} must be below upper bound {hi}")
    v = grid.array.astype(np.float64)
    out = np.clip((v - lo) / (hi - lo), 0.0, 1.0)
    return VoxelGrid(out, grid.spacing, Kind.PROBABILITY)


# ---------------------------------------------------------------------------
# NIfTI-1
# ---------------------------------------------------------------------------

_NIFTI_HEADER_SIZE = 348
_NIFTI_DTYPES = {2: np.dtype("<u1"), 4: np.dtype("<i2"), 16: np.dtype("<f4")}
_GZIP_MAGIC = b"\x1f\x8b"


def _read_bytes(path: Path) -> bytes:
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise IoFailure(f"cannot read {path}: {exc}") from exc
    if raw[:2] == _GZIP_MAGIC:
        try:
            raw = gzip.decompress(raw)
        except (OSError, EOFError) as exc:
            raise CorruptHeader(f"{path}: broken gzip stream ({exc})") from exc
    return raw


def _kind_from_tag(tag: str | None) -> Kind:
    if not tag:
        return Kind.INTENSITY
    for kind in Kind:
        if tag.lower() == kind.value.lower():
            return kind
    return Kind.INTENSITY


def _parse_nifti(raw: bytes, path) -> VoxelGrid:
    if len(raw) < _NIFTI_HEADER_SIZE:
        raise CorruptHeader(f"{path}: file shorter than a NIfTI-1 header")
    dim = struct.unpack_from("<8h", raw, 40)
    intent_code, datatype, bitpix = struct.unpack_from("<3h", raw, 68)
    pixdim = struct.unpack_from("<8f", raw, 76)
    vox_offset, scl_slope, scl_inter = struct.unpack_from("<3f", raw, 108)
    intent_name = raw[328:344].split(b"\0", 1)[0].decode("ascii", "replace")

    ndim = dim[0]
    if not 3 <= ndim <= 7 or any(d != 1 for d in dim[4 : ndim + 1]):
        raise CorruptHeader(f"{path}: only single-channel 3D volumes are supported (dim={dim})")
    nx, ny, nz = dim[1:4]
    if min(nx, ny, nz) <= 0:
        raise CorruptHeader(f"{path}: non-positive dimension in {dim[1:4]}")
    if datatype not in _NIFTI_DTYPES:
        raise UnsupportedDatatype(f"{path}: NIfTI datatype code {datatype}")
    dtype = _NIFTI_DTYPES[datatype]

    offset = int(vox_offset) if vox_offset >= _NIFTI_HEADER_SIZE else 352
    count = nx * ny * nz
    if len(raw) < offset + count * dtype.itemsize:
        raise CorruptHeader(
            f"{path}: header promises {count} voxels, body holds "
            f"{max(len(raw) - offset, 0) // dtype.itemsize}"
        )
    data = np.frombuffer(raw, dtype=dtype, count=count, offset=offset).astype(np.float32)
    if scl_slope != 0 and np.isfinite(scl_slope) and not (scl_slope == 1 and scl_inter == 0):
        data = data * np.float32(scl_slope) + np.float32(scl_inter)

    # header floats are float32; take the shortest decimal that maps to the
    # stored value so 0.8 reads back as 0.8 rather than 0.800000011920929
    spacing = tuple(
        abs(float(str(np.float32(p)))) if p != 0 else 1.0 for p in (pixdim[3], pixdim[2], pixdim[1])
    )
    return VoxelGrid(data.reshape(nz, ny, nx), spacing, _kind_from_tag(intent_name))


def _nifti_bytes(grid: VoxelGrid) -> bytes:
    if grid.kind is Kind.BINARY:
        datatype, bitpix, body = 2, 8, grid.array.astype("<u1").tobytes()
    else:
        datatype, bitpix, body = 16, 32, grid.array.astype("<f4").tobytes()
    nz, ny, nx = grid.dims
    dz, dy, dx = grid.spacing

    hdr = bytearray(_NIFTI_HEADER_SIZE)
    struct.pack_into("<i", hdr, 0, _NIFTI_HEADER_SIZE)
    struct.pack_into("<8h", hdr, 40, 3, nx, ny, nz, 1, 1, 1, 1)
    struct.pack_into("<3h", hdr, 68, 0, datatype, bitpix)
    struct.pack_into("<8f", hdr, 76, 1.0, dx, dy, dz, 1.0, 1.0, 1.0, 1.0)
    struct.pack_into("<3f", hdr, 108, 352.0, 1.0, 0.0)
    hdr[123] = 2  # xyzt_units: mm
    struct.pack_into("<80s", hdr, 148, b"airwaytopo")
    hdr[328:344] = grid.kind.value.lower().encode("ascii").ljust(16, b"\0")
    hdr[344:348] = b"n+1\0"
    return bytes(hdr) + b"\0\0\0\0" + body


# ---------------------------------------------------------------------------
# raw float32 + JSON sidecar
# ---------------------------------------------------------------------------


def _sidecar_paths(path: Path) -> tuple[Path, Path]:
    if path.suffix == ".json":
        return path, path.with_suffix(".bin")
    return path.with_suffix(".json"), path


def _parse_raw(json_path: Path, bin_path: Path) -> VoxelGrid:
    try:
        meta = json.loads(json_path.read_text())
        dims = [int(d) for d in meta["dims"]]
        spacing = [float(s) for s in meta.get("spacing", (1.0, 1.0, 1.0))]
        dtype = meta.get("dtype", "f32")
    except (OSError, ValueError, KeyError, TypeError) as exc:
        raise CorruptHeader(f"{json_path}: unreadable sidecar ({exc})") from exc
    if len(dims) != 3 or min(dims) <= 0:
        raise CorruptHeader(f"{json_path}: bad dims {dims}")
    if dtype != "f32":
        raise UnsupportedDatatype(f"{json_path}: sidecar dtype {dtype!r}")
    body = _read_bytes(bin_path)
    count = dims[0] * dims[1] * dims[2]
    if len(body) < 4 * count:
        raise CorruptHeader(f"{bin_path}: expected {count} float32 voxels, found {len(body) // 4}")
    data = np.frombuffer(body, dtype="<f4", count=count).reshape(dims)
    return VoxelGrid(data, tuple(spacing), _kind_from_tag(meta.get("kind")))


def _is_raw_path(path: Path) -> bool:
    return path.suffix in (".json", ".bin")


def load_volume(path) -> VoxelGrid:
    """Read a NIfTI-1 or raw+sidecar volume.

    The format is decided by content: gzip and NIfTI magic bytes for NIfTI,
    a JSON object for the sidecar format.
    """
    path = Path(path)
    if not path.exists():
        raise IoFailure(f"no such file: {path}")
    if path.suffix == ".bin":
        json_path, bin_path = _sidecar_paths(path)
        if not json_path.exists():
            raise UnsupportedFormat(f"{path}: raw volume without a JSON sidecar")
        return _parse_raw(json_path, bin_path)

    raw = _read_bytes(path)
    if raw[:1] == b"{":
        json_path, bin_path = _sidecar_paths(path)
        return _parse_raw(path, bin_path)
    if len(raw) >= _NIFTI_HEADER_SIZE and raw[344:348] == b"n+1\0":
        (sizeof_hdr,) = struct.unpack_from("<i", raw, 0)
        if sizeof_hdr != _NIFTI_HEADER_SIZE:
            raise UnsupportedFormat(f"{path}: big-endian or non-standard NIfTI header")
        return _parse_nifti(raw, path)
    if len(raw) < _NIFTI_HEADER_SIZE and raw[:4] == struct.pack("<i", _NIFTI_HEADER_SIZE):
        raise CorruptHeader(f"{path}: truncated NIfTI header")
    raise UnsupportedFormat(f"{path}: unrecognized magic bytes")


def atomic_write_bytes(path, data: bytes) -> None:
    """Write via a temporary file in the target directory, then rename."""
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
        try:
            with os.fdopen(fd, "wb") as fh:
                fh.write(data)
            os.replace(tmp, path)
        except BaseException:
            if os.path.exists(tmp):
                os.unlink(tmp)
            raise
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc


def save_volume(grid: VoxelGrid, path) -> None:
    """Write ``grid`` as NIfTI-1 (``.nii``/``.nii.gz``) or raw+sidecar (``.json``/``.bin``)."""
    path = Path(path)
    if _is_raw_path(path):
        json_path, bin_path = _sidecar_paths(path)
        meta = {
            "dims": list(grid.dims),
            "spacing": list(grid.spacing),
            "kind": grid.kind.value,
            "dtype": "f32",
        }
        atomic_write_bytes(bin_path, grid.array.astype("<f4").tobytes())
        atomic_write_bytes(json_path, json.dumps(meta).encode())
        return
    data = _nifti_bytes(grid)
    if path.name.endswith(".gz"):
        data = gzip.compress(data, mtime=0)
    atomic_write_bytes(path, data)
