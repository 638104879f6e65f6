"""Readers and writers for CT volumes and annotation masks.

Two on-disk formats are understood:

* NIfTI-1, single-file ``.nii`` (optionally gzip-compressed), for whole
  volumes and binary annotation masks.
* A minimal uncompressed DICOM subset (Explicit VR Little Endian) for CT
  series stored one slice per file.

Both parsers are pure functions of their input bytes and return immutable
volume objects that are safe to share across worker processes.  Voxel data
is kept in ``[z, y, x]`` index order so that the flat (C-order) layout is
x-fastest, matching the NIfTI on-disk layout.
"""

from __future__ import annotations

import gzip
import struct
import warnings
from collections import Counter
from dataclasses import dataclass, field

import numpy as np


class ParseError(Exception):
    """Base class for all volume parsing failures."""


class BadMagicError(ParseError):
    """Stream is not the expected file format (wrong magic/marker)."""


class UnsupportedDatatypeError(ParseError):
    """Voxel datatype not in the supported set."""


class LengthMismatchError(ParseError):
    """Header-declared data size disagrees with the stream length."""


class BadSpacingError(ParseError):
    """Nonpositive voxel spacing in the header."""


class DicomParseError(ParseError):
    """Malformed or unsupported DICOM stream."""


class UnsupportedTransferSyntaxError(DicomParseError):
    """Transfer syntax other than Explicit VR Little Endian."""


class MissingTagError(DicomParseError):
    """A required DICOM tag is absent."""


class GeometryMismatchError(DicomParseError):
    """Slices of one series disagree on Rows/Columns/PixelSpacing."""


class DuplicatePositionError(DicomParseError):
    """Two slices share the same z position."""


class SliceGapWarning(UserWarning):
    """Inter-slice gap deviates more than 10% from the modal gap."""


@dataclass(frozen=True)
class RescaleParams:
    """Linear map from stored integers to Hounsfield units."""

    slope: float
    intercept: float

    def __post_init__(self):
        if self.slope == 0:
            raise ValueError("rescale slope must be nonzero")


def apply_rescale(stored, params: RescaleParams) -> float:
    """HU = stored * slope + intercept, exact in double precision."""
    return float(stored) * params.slope + params.intercept


@dataclass(frozen=True)
class Volume:
    """A 3D scalar grid in Hounsfield units with physical spacing.

    ``data`` is indexed ``[z, y, x]``; ``dims`` and ``spacing`` are given
    per axis as ``(x, y, z)``.
    """

    dims: tuple[int, int, int]
    spacing: tuple[float, float, float]
    data: np.ndarray
    source_id: str = ""

    def __post_init__(self):
        nx, ny, nz = self.dims
        if min(self.dims) < 1:
            raise ValueError(f"all dims must be >= 1, got {self.dims}")
        if min(self.spacing) <= 0:
            raise ValueError(f"all spacing must be > 0, got {self.spacing}")
        if self.data.shape != (nz, ny, nx):
            raise ValueError(
                f"data shape {self.data.shape} does not match dims {self.dims}"
            )
        if not np.isfinite(self.data).all():
            raise ValueError("volume contains non-finite HU values")
        self.data.setflags(write=False)

    @classmethod
    def from_array(cls, data: np.ndarray, spacing, source_id: str = "") -> "Volume":
        """Build from a ``[z, y, x]`` array."""
        nz, ny, nx = data.shape
        return cls(
            dims=(nx, ny, nz),
            spacing=tuple(float(s) for s in spacing),
            data=np.ascontiguousarray(data, dtype=np.float32),
            source_id=source_id,
        )


@dataclass(frozen=True)
class AnnotationMask:
    """Binary lesion mask congruent with a :class:`Volume`."""

    dims: tuple[int, int, int]
    spacing: tuple[float, float, float]
    data: np.ndarray
    source_id: str = ""

    def __post_init__(self):
        nx, ny, nz = self.dims
        if min(self.dims) < 1:
            raise ValueError(f"all dims must be >= 1, got {self.dims}")
        if min(self.spacing) <= 0:
            raise ValueError(f"all spacing must be > 0, got {self.spacing}")
        if self.data.shape != (nz, ny, nx):
            raise ValueError(
                f"data shape {self.data.shape} does not match dims {self.dims}"
            )
        bad = np.setdiff1d(np.unique(self.data), [0, 1])
        if bad.size:
            raise ValueError(f"mask values must be 0/1, found {bad[:5]}")
        self.data.setflags(write=False)

    @classmethod
    def from_array(cls, data: np.ndarray, spacing, source_id: str = "") -> "AnnotationMask":
        nz, ny, nx = data.shape
        return cls(
            dims=(nx, ny, nz),
            spacing=tuple(float(s) for s in spacing),
            data=np.ascontiguousarray(data != 0, dtype=np.uint8),
            source_id=source_id,
        )


def check_congruent(vol: Volume, mask: AnnotationMask) -> None:
    """Raise if a mask does not share its volume's grid."""
    if vol.dims != mask.dims:
        raise ValueError(f"dims differ: volume {vol.dims} vs mask {mask.dims}")
    if not np.allclose(vol.spacing, mask.spacing, rtol=1e-6, atol=0):
        raise ValueError(
            f"spacing differs: volume {vol.spacing} vs mask {mask.spacing}"
        )


# ---------------------------------------------------------------------------
# NIfTI-1
# ---------------------------------------------------------------------------

_NIFTI_HDR_SIZE = 348
# datatype code -> (numpy dtype, bitpix)
_NIFTI_DTYPES = {
    2: (np.uint8, 8),
    4: (np.int16, 16),
    8: (np.int32, 32),
    16: (np.float32, 32),
    64: (np.float64, 64),
}
_NIFTI_CODES = {np.dtype(d).name: code for code, (d, _) in _NIFTI_DTYPES.items()}


def _maybe_gunzip(data: bytes) -> bytes:
    if data[:2] == b"\x1f\x8b":
        return gzip.decompress(data)
    return data


def parse_nifti(data: bytes, *, as_mask: bool = False, source_id: str = ""):
    """Parse a NIfTI-1 byte stream into a :class:`Volume` or mask.

    With ``as_mask=True`` the stored values are interpreted binarily
    (nonzero -> 1) and an :class:`AnnotationMask` is returned; the rescale
    slope/intercept are ignored in that case.
    """
    data = _maybe_gunzip(bytes(data))
    if len(data) < _NIFTI_HDR_SIZE:
        raise LengthMismatchError(
            f"stream too short for a NIfTI-1 header: {len(data)} bytes"
        )

    # Byte order is detected from sizeof_hdr.
    for bo in ("<", ">"):
        if struct.unpack_from(bo + "i", data, 0)[0] == _NIFTI_HDR_SIZE:
            break
    else:
        raise BadMagicError("sizeof_hdr is not 348 in either byte order")

    magic = data[344:348]
    if magic not in (b"n+1\x00", b"ni1\x00"):
        raise BadMagicError(f"bad NIfTI magic {magic!r}")

    dim = struct.unpack_from(bo + "8h", data, 40)
    datatype = struct.unpack_from(bo + "h", data, 70)[0]
    pixdim = struct.unpack_from(bo + "8f", data, 76)
    vox_offset = struct.unpack_from(bo + "f", data, 108)[0]
    scl_slope = struct.unpack_from(bo + "f", data, 112)[0]
    scl_inter = struct.unpack_from(bo + "f", data, 116)[0]

    ndim = dim[0]
    if not 1 <= ndim <= 7:
        raise ParseError(f"dim[0] out of range: {ndim}")
    if any(d not in (0, 1) for d in dim[4 : ndim + 1]):
        raise ParseError(f"volumes with a 4th dimension are unsupported: dim={dim}")
    nx = dim[1]
    ny = dim[2] if ndim >= 2 else 1
    nz = dim[3] if ndim >= 3 else 1
    if min(nx, ny, nz) < 1:
        raise ParseError(f"nonpositive voxel counts in dim: {dim[:4]}")

    if datatype not in _NIFTI_DTYPES:
        raise UnsupportedDatatypeError(f"unsupported NIfTI datatype code {datatype}")
    np_dtype, _ = _NIFTI_DTYPES[datatype]

    sx = pixdim[1]
    sy = pixdim[2] if ndim >= 2 else 1.0
    sz = pixdim[3] if ndim >= 3 else 1.0
    if sx <= 0 or sy <= 0 or sz <= 0:
        raise BadSpacingError(f"nonpositive pixdim: {(sx, sy, sz)}")

    # vox_offset below the header+extension floor means "no data here";
    # for single-stream input we read from byte 352 in that case.
    offset = int(vox_offset) if vox_offset >= _NIFTI_HDR_SIZE + 4 else _NIFTI_HDR_SIZE + 4
    n_vox = nx * ny * nz
    need = n_vox * np.dtype(np_dtype).itemsize
    if len(data) < offset + need:
        raise LengthMismatchError(
            f"need {need} data bytes at offset {offset}, stream has {len(data) - offset}"
        )

    stored = np.frombuffer(data, dtype=np.dtype(np_dtype).newbyteorder(bo), count=n_vox, offset=offset)
    stored = stored.reshape(nz, ny, nx)  # x-fastest on disk

    spacing = (float(sx), float(sy), float(sz))
    if as_mask:
        return AnnotationMask(
            dims=(nx, ny, nz),
            spacing=spacing,
            data=np.ascontiguousarray(stored != 0, dtype=np.uint8),
            source_id=source_id,
        )

    slope = float(scl_slope) if scl_slope != 0 else 1.0  # NIfTI-1 convention
    hu = stored.astype(np.float64) * slope + float(scl_inter)
    return Volume(
        dims=(nx, ny, nz),
        spacing=spacing,
        data=np.ascontiguousarray(hu, dtype=np.float32),
        source_id=source_id,
    )


def write_nifti(obj, *, datatype: str | None = None,
                scl_slope: float = 1.0, scl_inter: float = 0.0) -> bytes:
    """Serialize a :class:`Volume` or :class:`AnnotationMask` to NIfTI-1.

    ``datatype`` may name one of uint8/int16/int32/float32/float64.  When
    omitted, masks are written as uint8 and volumes as int16 when every HU
    value is integral and in range (else float32).  Stored values are
    ``(hu - scl_inter) / scl_slope``; the default identity rescale keeps
    the round trip voxel-exact.
    """
    is_mask = isinstance(obj, AnnotationMask)
    if datatype is None:
        if is_mask:
            datatype = "uint8"
        else:
            d = obj.data
            integral = bool(np.all(d == np.round(d)))
            in_range = bool(d.size == 0 or (d.min() >= -32768 and d.max() <= 32767))
            datatype = "int16" if integral and in_range else "float32"
    if datatype not in _NIFTI_CODES:
        raise UnsupportedDatatypeError(f"cannot write datatype {datatype!r}")
    code = _NIFTI_CODES[datatype]
    np_dtype, bitpix = _NIFTI_DTYPES[code]

    if is_mask or (scl_slope == 1.0 and scl_inter == 0.0):
        stored = obj.data.astype(np.float64)
    else:
        stored = (obj.data.astype(np.float64) - scl_inter) / scl_slope
    if np.issubdtype(np_dtype, np.integer):
        stored = np.round(stored)
    stored = stored.astype(np_dtype)

    nx, ny, nz = obj.dims
    hdr = bytearray(_NIFTI_HDR_SIZE)
    struct.pack_into("<i", hdr, 0, _NIFTI_HDR_SIZE)
    struct.pack_into("<8h", hdr, 40, 3, nx, ny, nz, 1, 1, 1, 1)
    struct.pack_into("<h", hdr, 70, code)
    struct.pack_into("<h", hdr, 72, bitpix)
    struct.pack_into("<8f", hdr, 76, 1.0, *obj.spacing, 0.0, 0.0, 0.0, 0.0)
    struct.pack_into("<f", hdr, 108, float(_NIFTI_HDR_SIZE + 4))
    if not is_mask:
        struct.pack_into("<f", hdr, 112, scl_slope)
        struct.pack_into("<f", hdr, 116, scl_inter)
    hdr[344:348] = b"n+1\x00"

    return bytes(hdr) + b"\x00\x00\x00\x00" + stored.tobytes()


# ---------------------------------------------------------------------------
# DICOM (Explicit VR Little Endian, single-frame CT slices)
# ---------------------------------------------------------------------------

EXPLICIT_VR_LE = "1.2.840.10008.1.2.1"

_LONG_VRS = {b"OB", b"OW", b"OF", b"SQ", b"UT", b"UN"}

_TAG_ROWS = (0x0028, 0x0010)
_TAG_COLS = (0x0028, 0x0011)
_TAG_PIXEL_SPACING = (0x0028, 0x0030)
_TAG_BITS_ALLOCATED = (0x0028, 0x0100)
_TAG_PIXEL_REP = (0x0028, 0x0103)
_TAG_RESCALE_INTERCEPT = (0x0028, 0x1052)
_TAG_RESCALE_SLOPE = (0x0028, 0x1053)
_TAG_IPP = (0x0020, 0x0032)
_TAG_SLICE_THICKNESS = (0x0018, 0x0050)
_TAG_TRANSFER_SYNTAX = (0x0002, 0x0010)
_TAG_PIXEL_DATA = (0x7FE0, 0x0010)


def _iter_elements(data: bytes, start: int):
    """Yield (tag, vr, value_bytes) for explicit-VR-LE elements."""
    pos = start
    n = len(data)
    while pos + 8 <= n:
        group, elem = struct.unpack_from("<HH", data, pos)
        vr = data[pos + 4 : pos + 6]
        if not vr.isalpha():
            raise DicomParseError(
                f"implicit VR or garbage at offset {pos} (tag {group:04X},{elem:04X})"
            )
        if vr in _LONG_VRS:
            (length,) = struct.unpack_from("<I", data, pos + 8)
            value_pos = pos + 12
        else:
            (length,) = struct.unpack_from("<H", data, pos + 6)
            value_pos = pos + 8
        if length == 0xFFFFFFFF:
            raise UnsupportedTransferSyntaxError(
                "undefined-length element: stream is not uncompressed Explicit VR LE"
            )
        if value_pos + length > n:
            raise DicomParseError(
                f"element ({group:04X},{elem:04X}) runs past end of stream"
            )
        yield (group, elem), vr, data[value_pos : value_pos + length]
        pos = value_pos + length


def _ds_floats(raw: bytes) -> list[float]:
    text = raw.decode("ascii").strip().strip("\x00")
    return [float(part) for part in text.split("\\") if part.strip()]


def _us_value(raw: bytes) -> int:
    return struct.unpack("<H", raw[:2])[0]


@dataclass
class _SliceInfo:
    rows: int
    cols: int
    pixel_spacing: tuple[float, float]  # (row spacing = sy, col spacing = sx)
    position: tuple[float, float, float]
    slope: float
    intercept: float
    thickness: float | None
    pixels: np.ndarray  # int32, [rows, cols]


def _parse_dicom_slice(data: bytes) -> _SliceInfo:
    data = bytes(data)
    if len(data) < 132 or data[128:132] != b"DICM":
        raise BadMagicError("missing 128-byte preamble + DICM marker")

    elements: dict[tuple[int, int], tuple[bytes, bytes]] = {}
    transfer_syntax = EXPLICIT_VR_LE
    for tag, vr, value in _iter_elements(data, 132):
        if tag == _TAG_TRANSFER_SYNTAX:
            transfer_syntax = value.decode("ascii").rstrip("\x00 ")
            if transfer_syntax != EXPLICIT_VR_LE:
                raise UnsupportedTransferSyntaxError(
                    f"unsupported transfer syntax {transfer_syntax}"
                )
        elif tag[0] != 0x0002:
            elements[tag] = (vr, value)

    def require(tag, name):
        if tag not in elements:
            raise MissingTagError(f"required tag {name} ({tag[0]:04X},{tag[1]:04X}) missing")
        return elements[tag][1]

    rows = _us_value(require(_TAG_ROWS, "Rows"))
    cols = _us_value(require(_TAG_COLS, "Columns"))
    spacing_vals = _ds_floats(require(_TAG_PIXEL_SPACING, "PixelSpacing"))
    if len(spacing_vals) != 2 or min(spacing_vals) <= 0:
        raise BadSpacingError(f"bad PixelSpacing {spacing_vals}")
    ipp = _ds_floats(require(_TAG_IPP, "ImagePositionPatient"))
    if len(ipp) != 3:
        raise DicomParseError(f"ImagePositionPatient needs 3 values, got {ipp}")
    slope_vals = _ds_floats(require(_TAG_RESCALE_SLOPE, "RescaleSlope"))
    inter_vals = _ds_floats(require(_TAG_RESCALE_INTERCEPT, "RescaleIntercept"))
    pixel_bytes = require(_TAG_PIXEL_DATA, "PixelData")

    if _TAG_BITS_ALLOCATED in elements:
        bits = _us_value(elements[_TAG_BITS_ALLOCATED][1])
        if bits != 16:
            raise DicomParseError(f"only 16-bit samples supported, got BitsAllocated={bits}")
    signed = (
        _TAG_PIXEL_REP in elements and _us_value(elements[_TAG_PIXEL_REP][1]) == 1
    )

    need = 2 * rows * cols
    if len(pixel_bytes) < need:
        raise LengthMismatchError(
            f"PixelData holds {len(pixel_bytes)} bytes, need {need} for {rows}x{cols}"
        )
    dtype = np.dtype("<i2") if signed else np.dtype("<u2")
    pixels = np.frombuffer(pixel_bytes, dtype=dtype, count=rows * cols)
    pixels = pixels.reshape(rows, cols).astype(np.int32)

    thickness = None
    if _TAG_SLICE_THICKNESS in elements:
        vals = _ds_floats(elements[_TAG_SLICE_THICKNESS][1])
        if vals:
            thickness = vals[0]

    return _SliceInfo(
        rows=rows,
        cols=cols,
        pixel_spacing=(spacing_vals[0], spacing_vals[1]),
        position=(ipp[0], ipp[1], ipp[2]),
        slope=slope_vals[0],
        intercept=inter_vals[0],
        thickness=thickness,
        pixels=pixels,
    )


def parse_dicom_series(slices, *, source_id: str = "") -> Volume:
    """Assemble one CT volume from per-slice DICOM byte streams.

    Slices are sorted by the z component of ImagePositionPatient
    (ascending) regardless of input order; the inter-slice spacing is
    the modal |dz| over consecutive sorted positions.
    """
    if not slices:
        raise DicomParseError("empty slice list")
    infos = [_parse_dicom_slice(s) for s in slices]

    first = infos[0]
    for info in infos[1:]:
        if (info.rows, info.cols) != (first.rows, first.cols):
            raise GeometryMismatchError(
                f"Rows/Columns differ: {(first.rows, first.cols)} vs {(info.rows, info.cols)}"
            )
        if info.pixel_spacing != first.pixel_spacing:
            raise GeometryMismatchError(
                f"PixelSpacing differs: {first.pixel_spacing} vs {info.pixel_spacing}"
            )

    infos.sort(key=lambda s: s.position[2])
    zs = [s.position[2] for s in infos]
    for a, b in zip(zs, zs[1:]):
        if a == b:
            raise DuplicatePositionError(f"duplicate slice position z={a}")

    if len(infos) == 1:
        sz = first.thickness if first.thickness and first.thickness > 0 else 1.0
    else:
        gaps = [round(abs(b - a), 6) for a, b in zip(zs, zs[1:])]
        counts = Counter(gaps)
        top = max(counts.values())
        sz = min(g for g, c in counts.items() if c == top)
        if sz <= 0:
            raise BadSpacingError(f"degenerate inter-slice gap {sz}")
        for g in gaps:
            if abs(g - sz) > 0.1 * sz:
                warnings.warn(
                    f"inter-slice gap {g} deviates >10% from modal gap {sz}",
                    SliceGapWarning,
                    stacklevel=2,
                )

    hu = np.stack(
        [s.pixels.astype(np.float64) * s.slope + s.intercept for s in infos]
    ).astype(np.float32)

    sy, sx = first.pixel_spacing  # PixelSpacing is (row, col) = (y, x)
    return Volume(
        dims=(first.cols, first.rows, len(infos)),
        spacing=(float(sx), float(sy), float(sz)),
        data=np.ascontiguousarray(hu),
        source_id=source_id,
    )


def _pack_element(group: int, elem: int, vr: bytes, value: bytes) -> bytes:
    if len(value) % 2:
        value += b"\x00" if vr in (b"UI", b"OB") else b" "
    head = struct.pack("<HH", group, elem)
    if vr in _LONG_VRS:
        return head + vr + b"\x00\x00" + struct.pack("<I", len(value)) + value
    return head + vr + struct.pack("<H", len(value)) + value


def write_dicom_slice(pixels: np.ndarray, *, position: tuple[float, float, float],
                      pixel_spacing: tuple[float, float], slope: float = 1.0,
                      intercept: float = 0.0, thickness: float | None = None,
                      signed: bool = True) -> bytes:
    """Serialize one 2D stored-value slice as Explicit-VR-LE DICOM.

    ``pixel_spacing`` is (row spacing, column spacing) in mm, as in the
    PixelSpacing tag.  Used to synthesize series fixtures for the parser.
    """
    pixels = np.asarray(pixels)
    rows, cols = pixels.shape
    dtype = np.dtype("<i2") if signed else np.dtype("<u2")
    raw = pixels.astype(dtype).tobytes()

    def ds(*vals) -> bytes:
        return "\\".join(f"{v:.10g}" for v in vals).encode("ascii")

    meta = _pack_element(0x0002, 0x0010, b"UI", EXPLICIT_VR_LE.encode("ascii"))
    meta = _pack_element(0x0002, 0x0000, b"UL", struct.pack("<I", len(meta))) + meta

    body = b""
    if thickness is not None:
        body += _pack_element(*_TAG_SLICE_THICKNESS, b"DS", ds(thickness))
    body += _pack_element(*_TAG_IPP, b"DS", ds(*position))
    body += _pack_element(*_TAG_ROWS, b"US", struct.pack("<H", rows))
    body += _pack_element(*_TAG_COLS, b"US", struct.pack("<H", cols))
    body += _pack_element(*_TAG_PIXEL_SPACING, b"DS", ds(*pixel_spacing))
    body += _pack_element(*_TAG_BITS_ALLOCATED, b"US", struct.pack("<H", 16))
    body += _pack_element(*_TAG_PIXEL_REP, b"US", struct.pack("<H", 1 if signed else 0))
    body += _pack_element(*_TAG_RESCALE_INTERCEPT, b"DS", ds(intercept))
    body += _pack_element(*_TAG_RESCALE_SLOPE, b"DS", ds(slope))
    body += _pack_element(*_TAG_PIXEL_DATA, b"OW", raw)

    return b"\x00" * 128 + b"DICM" + meta + body
