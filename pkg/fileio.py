"""
Binary file formats and artifact export.

RVOL  volumes: magic, version u32, kind u8, dims u32 x3, spacing f32 x3,
      little-endian payload with x fastest.
RIMG  detector images: magic, version u32, channels u8, dims u32 x2 (rows,
      cols), one little-endian f32 plane per channel.
RCKP  named-array checkpoints: magic, version u32, count u32, then per entry
      name length u16, UTF-8 name, rank u8, extents u32 each, f32 data.

Every reader maps malformed input to a distinct ``DataError`` subclass and
names the offending path.
"""

import json
import logging
import struct
from collections import OrderedDict
from pathlib import Path
from typing import Any, Dict, List, Tuple, Union

import numpy as np
import pandas as pd

from utils import (
    BadMagicError,
    DataError,
    DimensionOverflowError,
    TruncatedPayloadError,
    UnsupportedVersionError,
    case_name,
)
from volume import HU_MAX, HU_MIN, LabeledVolume, Volume, VolumeKind

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

FORMAT_VERSION = 1
MAX_ELEMENTS = 1 << 30

RVOL_HEADER = struct.Struct("<4sIB3I3f")
RIMG_HEADER = struct.Struct("<4sIB2I")
RCKP_HEADER = struct.Struct("<4sII")

_F32 = np.dtype("<f4")
_U8 = np.dtype("u1")


def _read_bytes(path: PathLike) -> bytes:
    try:
        return Path(path).read_bytes()
    except FileNotFoundError:
        raise DataError(f"missing input file: {path}")
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}")


def _write_bytes(path: PathLike, payload: bytes) -> None:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(payload)
    except OSError as exc:
        raise DataError(f"cannot write {path}: {exc}")


def _check_header(raw: bytes, header: struct.Struct, magic: bytes, path: PathLike) -> tuple:
    if len(raw) < 4 or raw[:4] != magic:
        raise BadMagicError(f"{path}: bad magic {raw[:4]!r}, expected {magic!r}")
    if len(raw) < header.size:
        raise TruncatedPayloadError(f"{path}: header needs {header.size} bytes, file has {len(raw)}")
    fields = header.unpack_from(raw)
    if fields[1] != FORMAT_VERSION:
        raise UnsupportedVersionError(f"{path}: unsupported {magic.decode()} version {fields[1]}")
    return fields


def _element_count(dims: Tuple[int, ...], path: PathLike) -> int:
    count = 1
    for n in dims:
        if n == 0:
            raise DimensionOverflowError(f"{path}: zero extent in dims {dims}")
        count *= n
        if count > MAX_ELEMENTS:
            raise DimensionOverflowError(f"{path}: dims {dims} exceed {MAX_ELEMENTS} elements")
    return count


def _payload(raw: bytes, offset: int, nbytes: int, path: PathLike) -> bytes:
    available = len(raw) - offset
    if available < nbytes:
        raise TruncatedPayloadError(f"{path}: payload has {available} bytes, header requires {nbytes}")
    return raw[offset:offset + nbytes]


# --- RVOL -----------------------------------------------------------------

def encode_volume(vol: Volume) -> bytes:
    dtype = _U8 if vol.kind == VolumeKind.LABELS else _F32
    header = RVOL_HEADER.pack(b"RVOL", FORMAT_VERSION, int(vol.kind), *vol.shape, *vol.spacing)
    # x fastest on disk; in memory x is the slowest axis
    return header + np.ascontiguousarray(vol.data.transpose(2, 1, 0), dtype=dtype).tobytes()


def decode_volume(raw: bytes, path: PathLike = "<bytes>") -> Volume:
    _, _, kind, nx, ny, nz, sx, sy, sz = _check_header(raw, RVOL_HEADER, b"RVOL", path)
    try:
        kind = VolumeKind(kind)
    except ValueError:
        raise DataError(f"{path}: unknown volume kind {kind}")
    count = _element_count((nx, ny, nz), path)
    dtype = _U8 if kind == VolumeKind.LABELS else _F32
    body = _payload(raw, RVOL_HEADER.size, count * dtype.itemsize, path)
    if len(raw) != RVOL_HEADER.size + len(body):
        raise DataError(f"{path}: {len(raw) - RVOL_HEADER.size - len(body)} trailing bytes after payload")
    data = np.frombuffer(body, dtype=dtype).reshape(nz, ny, nx).transpose(2, 1, 0)
    return Volume(data, (sx, sy, sz), kind)


def write_volume(path: PathLike, vol: Volume) -> None:
    _write_bytes(path, encode_volume(vol))


def read_volume(path: PathLike) -> Volume:
    return decode_volume(_read_bytes(path), path)


# --- RIMG -----------------------------------------------------------------

def encode_image(channels: np.ndarray) -> bytes:
    """``channels`` is ``[C, rows, cols]``; a 2D array is stored as one channel."""
    planes = np.asarray(channels, dtype=np.float32)
    if planes.ndim == 2:
        planes = planes[None]
    if planes.ndim != 3 or planes.shape[0] > 255:
        raise DataError(f"cannot encode image with shape {planes.shape}")
    header = RIMG_HEADER.pack(b"RIMG", FORMAT_VERSION, planes.shape[0], planes.shape[1], planes.shape[2])
    return header + np.ascontiguousarray(planes, dtype=_F32).tobytes()


def decode_image(raw: bytes, path: PathLike = "<bytes>") -> np.ndarray:
    _, _, channels, rows, cols = _check_header(raw, RIMG_HEADER, b"RIMG", path)
    if channels == 0:
        raise DataError(f"{path}: image has no channels")
    count = _element_count((channels, rows, cols), path)
    body = _payload(raw, RIMG_HEADER.size, count * _F32.itemsize, path)
    if len(raw) != RIMG_HEADER.size + len(body):
        raise DataError(f"{path}: {len(raw) - RIMG_HEADER.size - len(body)} trailing bytes after payload")
    return np.frombuffer(body, dtype=_F32).reshape(channels, rows, cols).astype(np.float32)


def write_image(path: PathLike, channels: np.ndarray) -> None:
    _write_bytes(path, encode_image(channels))


def read_image(path: PathLike) -> np.ndarray:
    return decode_image(_read_bytes(path), path)


# --- RCKP -----------------------------------------------------------------

def encode_checkpoint(arrays: Dict[str, np.ndarray]) -> bytes:
    parts = [RCKP_HEADER.pack(b"RCKP", FORMAT_VERSION, len(arrays))]
    for name, value in arrays.items():
        encoded = name.encode("utf-8")
        if len(encoded) > 0xFFFF:
            raise DataError(f"checkpoint entry name too long: {name[:40]}...")
        value = np.asarray(value, dtype=np.float32)
        parts.append(struct.pack("<H", len(encoded)))
        parts.append(encoded)
        parts.append(struct.pack("<B", value.ndim))
        parts.append(struct.pack(f"<{value.ndim}I", *value.shape))
        parts.append(np.ascontiguousarray(value, dtype=_F32).tobytes())
    return b"".join(parts)


def decode_checkpoint(raw: bytes, path: PathLike = "<bytes>") -> "OrderedDict[str, np.ndarray]":
    _, _, count = _check_header(raw, RCKP_HEADER, b"RCKP", path)
    offset = RCKP_HEADER.size
    arrays: "OrderedDict[str, np.ndarray]" = OrderedDict()

    def take(nbytes: int) -> bytes:
        nonlocal offset
        chunk = _payload(raw, offset, nbytes, path)
        offset += nbytes
        return chunk

    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2))
        try:
            name = take(name_len).decode("utf-8")
        except UnicodeDecodeError:
            raise DataError(f"{path}: entry name is not valid UTF-8")
        (rank,) = struct.unpack("<B", take(1))
        shape = struct.unpack(f"<{rank}I", take(4 * rank))
        elements = _element_count(shape, path) if rank else 1
        data = np.frombuffer(take(elements * _F32.itemsize), dtype=_F32)
        if name in arrays:
            raise DataError(f"{path}: duplicate entry {name!r}")
        arrays[name] = data.reshape(shape).astype(np.float32)
    if offset != len(raw):
        raise DataError(f"{path}: {len(raw) - offset} trailing bytes after {count} entries")
    return arrays


def write_checkpoint(path: PathLike, arrays: Dict[str, np.ndarray]) -> None:
    _write_bytes(path, encode_checkpoint(arrays))
    logger.info("Wrote checkpoint %s (%d entries)", path, len(arrays))


def read_checkpoint(path: PathLike) -> "OrderedDict[str, np.ndarray]":
    return decode_checkpoint(_read_bytes(path), path)


def sidecar_path(checkpoint: PathLike) -> Path:
    checkpoint = Path(checkpoint)
    return checkpoint.with_name(checkpoint.name + ".json")


def write_sidecar(checkpoint: PathLike, settings: Dict[str, Any]) -> None:
    _write_bytes(sidecar_path(checkpoint), (json.dumps(settings, indent=2, sort_keys=True) + "\n").encode("utf-8"))


def read_sidecar(checkpoint: PathLike) -> Dict[str, Any]:
    path = sidecar_path(checkpoint)
    try:
        settings = json.loads(_read_bytes(path).decode("utf-8"))
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise DataError(f"{path}: malformed model settings: {exc}")
    if not isinstance(settings, dict):
        raise DataError(f"{path}: model settings must be a JSON object, got {type(settings).__name__}")
    return settings


# --- dataset layout -------------------------------------------------------

def case_paths(root: PathLike, case_id: int) -> Tuple[Path, Path]:
    stem = Path(root) / case_name(case_id)
    return stem.with_name(stem.name + ".hu.rvol"), stem.with_name(stem.name + ".labels.rvol")


def view_path(root: PathLike, case_id: int, theta_deg: float) -> Path:
    return Path(root) / f"{case_name(case_id)}.view{int(round(theta_deg)) % 360:03d}.rimg"


def write_case(root: PathLike, case: LabeledVolume) -> None:
    hu_path, labels_path = case_paths(root, case.case_id)
    write_volume(hu_path, case.hu)
    write_volume(labels_path, case.labels)


def read_case(root: PathLike, case_id: int) -> LabeledVolume:
    hu_path, labels_path = case_paths(root, case_id)
    hu, labels = read_volume(hu_path), read_volume(labels_path)
    if hu.kind != VolumeKind.HU or labels.kind != VolumeKind.LABELS:
        raise DataError(f"{hu_path}: expected an HU/labels pair, found kinds {hu.kind.name}/{labels.kind.name}")
    try:
        return LabeledVolume(hu, labels, case_id)
    except ValueError as exc:
        raise DataError(f"{hu_path}: {exc}")


def list_cases(root: PathLike) -> List[int]:
    """Case ids with an HU volume under ``root``, ascending."""
    ids = []
    for path in Path(root).glob("case_*.hu.rvol"):
        try:
            ids.append(int(path.name[len("case_"):].split(".")[0]))
        except ValueError:
            continue
    return sorted(ids)


# --- exports --------------------------------------------------------------

def center_slice(vol: Volume) -> np.ndarray:
    """Axial slice through the center, rows anterior to posterior, columns right to left of the patient."""
    k = vol.shape[2] // 2
    return vol.data[:, :, k].T


def write_pgm(path: PathLike, image: np.ndarray, low: float = HU_MIN, high: float = HU_MAX) -> None:
    """Write a binary (P5) 8-bit PGM, mapping ``[low, high]`` linearly to ``[0, 255]``."""
    scaled = np.clip((np.asarray(image, dtype=np.float64) - low) / (high - low), 0.0, 1.0)
    pixels = np.round(scaled * 255.0).astype(np.uint8)
    rows, cols = pixels.shape
    _write_bytes(path, f"P5\n{cols} {rows}\n255\n".encode("ascii") + pixels.tobytes())


def write_csv(path: PathLike, frame: pd.DataFrame) -> None:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        frame.to_csv(path, index=False, float_format="%.6g")
    except OSError as exc:
        raise DataError(f"cannot write {path}: {exc}")
    logger.info("Wrote %s (%d rows)", path, len(frame))


def read_csv(path: PathLike) -> pd.DataFrame:
    try:
        return pd.read_csv(path)
    except FileNotFoundError:
        raise DataError(f"missing input file: {path}")
    except (OSError, pd.errors.ParserError, pd.errors.EmptyDataError) as exc:
        raise DataError(f"cannot read {path}: {exc}")
