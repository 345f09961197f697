"""NIfTI-1 reader and writer (``.nii``, ``.nii.gz`` and ``.hdr``/``.img`` pairs).

Only the fields needed for voxel-space work are interpreted: dimensions,
datatype, spacing (pixdim) and the scl_slope/scl_inter rescale pair. Spatial
transforms (qform/sform) are ignored on read and left unset on write.
"""

from __future__ import annotations

import gzip
import logging
import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from flairnorm.errors import (
    BadMagicError,
    LossyDatatypeError,
    NonBinaryMaskError,
    TruncatedDataError,
    UnsupportedDatatypeError,
)
from flairnorm.volume import Mask, MaskKind, Volume

logger = logging.getLogger(__name__)

HEADER_SIZE = 348
SINGLE_FILE_OFFSET = 352
MAGIC_SINGLE = b"n+1\x00"
MAGIC_PAIR = b"ni1\x00"

# code -> (name, numpy base dtype, bitpix)
DATATYPES = {
    2: ("uint8", np.dtype("u1"), 8),
    4: ("int16", np.dtype("i2"), 16),
    8: ("int32", np.dtype("i4"), 32),
    16: ("float32", np.dtype("f4"), 32),
    64: ("float64", np.dtype("f8"), 64),
}
DATATYPE_CODES = {name: code for code, (name, _, _) in DATATYPES.items()}

XYZT_UNITS_MM = 2


@dataclass
class NiftiHeader:
    sizeof_hdr: int
    dim: tuple[int, ...]
    datatype: int
    bitpix: int
    pixdim: tuple[float, ...]
    vox_offset: float
    scl_slope: float
    scl_inter: float
    magic: bytes
    endian: str = "<"

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(self.dim[1 : 1 + self.dim[0]])

    @property
    def dtype_name(self) -> str:
        return DATATYPES[self.datatype][0]

    @property
    def spacing(self) -> tuple[float, float, float]:
        out = []
        for i in range(1, 4):
            s = abs(float(self.pixdim[i]))
            # 2D files often leave pixdim[3] at zero
            out.append(s if np.isfinite(s) and s > 0 else 1.0)
        return tuple(out)


def _open_bytes(path: Path) -> bytes:
    raw = path.read_bytes()
    if raw[:2] == b"\x1f\x8b":
        return gzip.decompress(raw)
    return raw


def parse_header(buf: bytes) -> NiftiHeader:
    if len(buf) < HEADER_SIZE:
        raise TruncatedDataError(f"header needs {HEADER_SIZE} bytes, got {len(buf)}")
    if struct.unpack("<i", buf[:4])[0] == HEADER_SIZE:
        endian = "<"
    elif struct.unpack(">i", buf[:4])[0] == HEADER_SIZE:
        endian = ">"
    else:
        raise BadMagicError("sizeof_hdr is not 348 in either byte order")
    magic = bytes(buf[344:348])
    if magic not in (MAGIC_SINGLE, MAGIC_PAIR):
        raise BadMagicError(f"bad NIfTI-1 magic {magic!r}")
    dim = struct.unpack(endian + "8h", buf[40:56])
    datatype, bitpix = struct.unpack(endian + "2h", buf[70:74])
    pixdim = struct.unpack(endian + "8f", buf[76:108])
    vox_offset, scl_slope, scl_inter = struct.unpack(endian + "3f", buf[108:120])
    hdr = NiftiHeader(HEADER_SIZE, dim, datatype, bitpix, pixdim, vox_offset, scl_slope, scl_inter, magic, endian)
    _validate(hdr)
    return hdr


def _validate(hdr: NiftiHeader) -> None:
    if hdr.datatype not in DATATYPES:
        raise UnsupportedDatatypeError(f"datatype code {hdr.datatype} is not supported")
    expected_bitpix = DATATYPES[hdr.datatype][2]
    if hdr.bitpix != expected_bitpix:
        raise UnsupportedDatatypeError(
            f"bitpix {hdr.bitpix} inconsistent with datatype {hdr.dtype_name}"
        )
    ndim = hdr.dim[0]
    if not 2 <= ndim <= 7:
        raise ValueError(f"dim[0]={ndim} is invalid")
    if any(n < 1 for n in hdr.dim[1 : 1 + ndim]):
        raise ValueError(f"non-positive extent in dim {hdr.dim}")
    # a trailing singleton time/extra axis is harmless
    if ndim > 3 and any(n != 1 for n in hdr.dim[4 : 1 + ndim]):
        raise ValueError(f"only 2D/3D images are supported, got dim {hdr.dim}")


def read_header(path) -> NiftiHeader:
    return parse_header(_open_bytes(Path(path))[:HEADER_SIZE])


def _pair_image_path(path: Path) -> Path:
    name = path.name
    for hdr_ext, img_ext in ((".hdr.gz", ".img.gz"), (".hdr", ".img")):
        if name.endswith(hdr_ext):
            return path.with_name(name[: -len(hdr_ext)] + img_ext)
    raise BadMagicError(f"{path} has a header-pair magic but is not a .hdr file")


def _read_array(path: Path) -> tuple[NiftiHeader, np.ndarray]:
    buf = _open_bytes(path)
    hdr = parse_header(buf[:HEADER_SIZE])
    if hdr.magic == MAGIC_PAIR:
        payload = _open_bytes(_pair_image_path(path))
    else:
        payload = buf
    shape = hdr.shape[:3]
    dtype = DATATYPES[hdr.datatype][1].newbyteorder(hdr.endian)
    count = int(np.prod(shape))
    start = int(hdr.vox_offset)
    needed = count * dtype.itemsize
    if len(payload) - start < needed:
        raise TruncatedDataError(
            f"{path}: need {needed} payload bytes at offset {start}, file has {max(0, len(payload) - start)}"
        )
    arr = np.frombuffer(payload, dtype=dtype, count=count, offset=start)
    return hdr, arr.reshape(shape, order="F")


def read_nifti(path, kind: MaskKind | str | None = None) -> Volume | Mask:
    """Load a NIfTI-1 file as a :class:`Volume`, or as a :class:`Mask` when ``kind`` is given.

    Intensities are ``stored * scl_slope + scl_inter`` unless ``scl_slope`` is 0.
    """
    path = Path(path)
    hdr, raw = _read_array(path)
    data = raw.astype(np.float64)
    if hdr.scl_slope != 0 and np.isfinite(hdr.scl_slope):
        slope, inter = float(hdr.scl_slope), float(hdr.scl_inter)
        if (slope, inter) != (1.0, 0.0):
            data = data * slope + (inter if np.isfinite(inter) else 0.0)
    if kind is not None:
        if not np.all((data == 0) | (data == 1)):
            raise NonBinaryMaskError(f"{path}: mask contains values other than 0 and 1")
        return Mask(data.astype(bool), kind=MaskKind(kind), spacing=hdr.spacing)
    if not np.all(np.isfinite(data)):
        raise ValueError(f"{path}: volume contains NaN or Inf")
    return Volume(data, spacing=hdr.spacing)


def read_mask(path, kind: MaskKind | str = MaskKind.WML) -> Mask:
    return read_nifti(path, kind=kind)


def _encode(data: np.ndarray, dtype_name: str, quantize: bool) -> np.ndarray:
    target = DATATYPES[DATATYPE_CODES[dtype_name]][1]
    if target.kind in "iu":
        info = np.iinfo(target)
        if quantize:
            data = np.clip(np.rint(data), info.min, info.max)
        elif np.any(data != np.rint(data)) or data.min() < info.min or data.max() > info.max:
            raise LossyDatatypeError(
                f"values do not fit {dtype_name} exactly; pass quantize=True to round and clip"
            )
    elif target == np.dtype("f4"):
        if np.any(np.abs(data) > np.finfo(np.float32).max):
            raise LossyDatatypeError("values overflow float32")
    return data.astype(target.newbyteorder("<"))


def build_header(shape, spacing, dtype_name: str) -> bytes:
    code = DATATYPE_CODES[dtype_name]
    buf = bytearray(HEADER_SIZE)
    struct.pack_into("<i", buf, 0, HEADER_SIZE)
    buf[38:39] = b"r"
    dim = [len(shape), *shape] + [1] * (7 - len(shape))
    struct.pack_into("<8h", buf, 40, *dim)
    struct.pack_into("<2h", buf, 70, code, DATATYPES[code][2])
    pixdim = [1.0, *spacing] + [1.0] * (7 - len(spacing))
    struct.pack_into("<8f", buf, 76, *pixdim)
    struct.pack_into("<3f", buf, 108, float(SINGLE_FILE_OFFSET), 1.0, 0.0)
    buf[123] = XYZT_UNITS_MM
    buf[344:348] = MAGIC_SINGLE
    return bytes(buf)


def write_nifti(obj: Volume | Mask, path, datatype: str | None = None, quantize: bool = False) -> None:
    """Write a single-file little-endian NIfTI-1 image; gzip when ``path`` ends in ``.gz``.

    Masks default to uint8 and volumes to float32. Integer datatypes refuse
    non-integral or out-of-range values unless ``quantize`` is set.
    """
    path = Path(path)
    if datatype is None:
        datatype = "uint8" if isinstance(obj, Mask) else "float32"
    if datatype not in DATATYPE_CODES:
        raise UnsupportedDatatypeError(f"cannot write datatype {datatype!r}")
    data = obj.data.astype(np.float64) if isinstance(obj, Mask) else obj.data
    payload = _encode(data, datatype, quantize).tobytes(order="F")
    blob = build_header(obj.dims, obj.spacing, datatype) + b"\x00" * 4 + payload
    if path.name.endswith(".gz"):
        # mtime=0 keeps repeated writes byte-identical
        blob = gzip.compress(blob, mtime=0)
    tmp = path.with_name(path.name + ".part")
    tmp.write_bytes(blob)
    os.replace(tmp, path)
    logger.debug("wrote %s (%s, dims=%s)", path, datatype, obj.dims)
