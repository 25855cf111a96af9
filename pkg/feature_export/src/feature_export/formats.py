"""GPFG feature-grid serialization.

The format is the interchange contract with the pose engine, reimplemented
here from its documented layout so this tool carries no engine dependency:

    magic 'GPFG' | u16 version | u16 height | u16 width | u32 dim | u32 flags
    height*width mask bytes (0/1, row-major)
    height*width*dim little-endian float32 descriptors (row-major)

Masked descriptors are unit-norm within 1e-5, unmasked cells all-zero, and
flag bit 0x1 marks scale/in-plane co-variant grids.
"""

import io
import struct

import numpy as np

GRID_MAGIC = b"GPFG"
GRID_VERSION = 1
NORM_TOL = 1e-5

FLAG_VARIANT = 0x1

_HEADER = struct.Struct("<4sHHHII")


class GridFormatError(ValueError):
    """Malformed GPFG payload; `offset` is the failing byte position."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


def normalize_descriptors(raw: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """L2-normalize masked cells in float64, zero the rest, cast to float32.

    Doing the division in float64 before the cast keeps the unit-norm
    invariant within 1e-5 after float32 rounding.
    """
    raw = np.asarray(raw, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    if raw.ndim != 3 or mask.shape != raw.shape[:2]:
        raise ValueError(
            f"expected (H, W, D) descriptors with (H, W) mask, got "
            f"{raw.shape} / {mask.shape}"
        )
    norms = np.linalg.norm(raw, axis=-1, keepdims=True)
    if np.any(norms[mask] == 0.0):
        raise ValueError("masked cells must have nonzero descriptors")
    out = np.zeros_like(raw)
    np.divide(raw, norms, out=out, where=norms > 0)
    out[~mask] = 0.0
    return out.astype(np.float32)


def _check_grid(data: np.ndarray, mask: np.ndarray) -> None:
    norms = np.linalg.norm(data[mask].astype(np.float64), axis=-1)
    if norms.size and np.any(np.abs(norms - 1.0) > NORM_TOL):
        worst = float(np.abs(norms - 1.0).max())
        raise ValueError(
            f"masked descriptors must be unit-norm within {NORM_TOL}, "
            f"worst deviation {worst}"
        )
    if np.any(data[~mask]):
        raise ValueError("unmasked cells must be all-zero")


def write_grid(data: np.ndarray, mask: np.ndarray, variant: bool, destination) -> None:
    """Serialize one grid to a path or binary file object."""
    data = np.ascontiguousarray(data, dtype=np.float32)
    mask = np.ascontiguousarray(mask, dtype=bool)
    if data.ndim != 3 or mask.shape != data.shape[:2]:
        raise ValueError(
            f"expected (H, W, D) data with (H, W) mask, got {data.shape} / {mask.shape}"
        )
    _check_grid(data, mask)
    h, w, d = data.shape
    payload = (
        _HEADER.pack(GRID_MAGIC, GRID_VERSION, h, w, d, FLAG_VARIANT if variant else 0)
        + mask.astype(np.uint8).tobytes()
        + data.astype("<f4", copy=False).tobytes()
    )
    if hasattr(destination, "write"):
        destination.write(payload)
    else:
        with open(destination, "wb") as fh:
            fh.write(payload)


def grid_to_bytes(data: np.ndarray, mask: np.ndarray, variant: bool) -> bytes:
    buf = io.BytesIO()
    write_grid(data, mask, variant, buf)
    return buf.getvalue()


def read_grid(source) -> tuple[np.ndarray, np.ndarray, bool]:
    """Parse a GPFG payload; returns (data, mask, variant)."""
    if isinstance(source, (bytes, bytearray)):
        raw = bytes(source)
    elif hasattr(source, "read"):
        raw = source.read()
    else:
        with open(source, "rb") as fh:
            raw = fh.read()

    if len(raw) < _HEADER.size:
        raise GridFormatError(
            f"truncated header: need {_HEADER.size} bytes, got {len(raw)}",
            offset=len(raw),
        )
    magic, version, h, w, d, flags = _HEADER.unpack_from(raw, 0)
    if magic != GRID_MAGIC:
        raise GridFormatError(f"bad magic {magic!r}, expected {GRID_MAGIC!r}", offset=0)
    if version != GRID_VERSION:
        raise GridFormatError(f"unsupported grid version {version}", offset=4)
    if flags & ~FLAG_VARIANT:
        raise GridFormatError(f"unknown flag bits 0x{flags & ~FLAG_VARIANT:x}", offset=14)
    if h == 0 or w == 0 or d == 0:
        raise GridFormatError(f"degenerate grid dimensions {h}x{w}x{d}", offset=6)
    mask_off = _HEADER.size
    data_off = mask_off + h * w
    end = data_off + h * w * d * 4
    if len(raw) < end:
        raise GridFormatError(
            f"truncated grid: need {end} bytes, got {len(raw)}", offset=len(raw)
        )
    if len(raw) > end:
        raise GridFormatError(f"{len(raw) - end} trailing bytes after grid data", offset=end)
    mask_raw = np.frombuffer(raw, dtype=np.uint8, count=h * w, offset=mask_off)
    bad = np.nonzero(mask_raw > 1)[0]
    if bad.size:
        raise GridFormatError(
            f"mask byte must be 0 or 1, got {mask_raw[bad[0]]}",
            offset=mask_off + int(bad[0]),
        )
    mask = mask_raw.astype(bool).reshape(h, w)
    data = (
        np.frombuffer(raw, dtype="<f4", count=h * w * d, offset=data_off)
        .astype(np.float32)
        .reshape(h, w, d)
    )
    try:
        _check_grid(data, mask)
    except ValueError as exc:
        raise GridFormatError(f"invalid grid payload: {exc}", offset=data_off) from exc
    return data, mask, bool(flags & FLAG_VARIANT)
