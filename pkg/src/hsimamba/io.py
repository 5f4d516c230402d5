"""File formats: ENVI cubes, the binary array container, and label CSVs.

The array container is a tiny self-describing format::

    magic   b"HSIA"        4 bytes
    version u8             currently 1
    dtype   u8             see ``_DTYPE_CODES``
    ndim    u8
    shape   u64 * ndim     little-endian
    payload                C-order, little-endian
"""
from __future__ import annotations

import csv
import re
import struct
from pathlib import Path

import numpy as np

MAGIC = b"HSIA"
VERSION = 1

_DTYPE_CODES = {
    1: np.dtype("u1"),
    2: np.dtype("<i2"),
    3: np.dtype("<i4"),
    4: np.dtype("<i8"),
    5: np.dtype("<f4"),
    6: np.dtype("<f8"),
    7: np.dtype("?"),
    8: np.dtype("<u2"),
}
_CODE_FOR = {dt: code for code, dt in _DTYPE_CODES.items()}

# ENVI "data type" codes
ENVI_DTYPES = {
    1: np.dtype("u1"),
    2: np.dtype("i2"),
    3: np.dtype("i4"),
    4: np.dtype("f4"),
    5: np.dtype("f8"),
    12: np.dtype("u2"),
    13: np.dtype("u4"),
    14: np.dtype("i8"),
    15: np.dtype("u8"),
}
_ENVI_CODE_FOR = {dt: code for code, dt in ENVI_DTYPES.items()}

# axis order of the raw payload for each interleave, in terms of (band, line, sample)
_INTERLEAVE_AXES = {"bsq": "bls", "bil": "lbs", "bip": "lsb"}


class FormatError(ValueError):
    """Malformed or unsupported file content."""


# -- array container ---------------------------------------------------------

def write_array(path, array) -> None:
    arr = np.asarray(array)
    code = _CODE_FOR.get(arr.dtype.newbyteorder("<"))
    if code is None:
        raise FormatError(f"unsupported dtype for array container: {arr.dtype}")
    if arr.ndim > 255:
        raise FormatError("too many dimensions")
    head = MAGIC + struct.pack("<BBB", VERSION, code, arr.ndim)
    head += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    with open(path, "wb") as fh:
        fh.write(head)
        fh.write(np.ascontiguousarray(arr, dtype=_DTYPE_CODES[code]).tobytes())


def read_array(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise FormatError(f"{path}: not an array container (bad magic)")
    version, code, ndim = struct.unpack_from("<BBB", data, 4)
    if version != VERSION:
        raise FormatError(f"{path}: unsupported container version {version}")
    if code not in _DTYPE_CODES:
        raise FormatError(f"{path}: unknown dtype code {code}")
    shape = struct.unpack_from(f"<{ndim}Q", data, 7)
    offset = 7 + 8 * ndim
    dt = _DTYPE_CODES[code]
    count = int(np.prod(shape, dtype=np.int64))
    if len(data) - offset != count * dt.itemsize:
        raise FormatError(f"{path}: payload size does not match shape {shape}")
    return np.frombuffer(data, dtype=dt, count=count, offset=offset).reshape(shape).copy()


# -- ENVI --------------------------------------------------------------------

def parse_envi_header(path) -> dict:
    """Parse an ENVI ``.hdr`` into a dict with lower-cased keys.

    Brace-delimited values may span lines; list values come back as lists of
    stripped strings.
    """
    text = Path(path).read_text()
    lines = text.splitlines()
    if not lines or lines[0].strip().upper() != "ENVI":
        raise FormatError(f"{path}: missing ENVI signature line")
    body = "\n".join(lines[1:])
    header = {}
    for match in re.finditer(r"^\s*([^=\n]+?)\s*=\s*(\{[^}]*\}|[^\n]*)", body, re.MULTILINE):
        key = match.group(1).strip().lower()
        value = match.group(2).strip()
        if value.startswith("{"):
            inner = value[1:-1]
            header[key] = [v.strip() for v in inner.split(",") if v.strip()]
        else:
            header[key] = value
    return header


def read_envi(header_path, data_path=None) -> tuple[np.ndarray, dict]:
    """Read an ENVI cube as raw values ordered ``[bands, lines, samples]``."""
    header_path = Path(header_path)
    header = parse_envi_header(header_path)
    if data_path is None:
        data_path = _guess_data_path(header_path)
    try:
        samples = int(header["samples"])
        lines = int(header["lines"])
        bands = int(header["bands"])
    except KeyError as exc:
        raise FormatError(f"{header_path}: header lacks {exc.args[0]!r}") from None
    interleave = header.get("interleave", "bsq").lower()
    if interleave not in _INTERLEAVE_AXES:
        raise FormatError(f"unknown interleave {interleave!r}")
    code = int(header.get("data type", 4))
    if code not in ENVI_DTYPES:
        raise FormatError(f"unsupported ENVI data type {code}")
    dt = ENVI_DTYPES[code].newbyteorder(">" if int(header.get("byte order", 0)) == 1 else "<")
    offset = int(header.get("header offset", 0))

    raw = Path(data_path).read_bytes()[offset:]
    expected = samples * lines * bands * dt.itemsize
    if len(raw) != expected:
        raise FormatError(
            f"size mismatch: header expects {expected} bytes "
            f"({bands} bands x {lines} lines x {samples} samples), file holds {len(raw)}"
        )
    order = _INTERLEAVE_AXES[interleave]
    dims = {"b": bands, "l": lines, "s": samples}
    arr = np.frombuffer(raw, dtype=dt).reshape([dims[a] for a in order])
    arr = np.transpose(arr, [order.index(a) for a in "bls"])
    return np.ascontiguousarray(arr.astype(dt.newbyteorder("="))), header


def write_envi(header_path, cube, interleave: str = "bsq", wavelengths=None,
               data_path=None) -> Path:
    """Write ``cube[bands, lines, samples]`` as ENVI header + raw file.

    Returns the path of the raw data file (``.img`` next to the header unless
    ``data_path`` is given).
    """
    cube = np.asarray(cube)
    interleave = interleave.lower()
    if interleave not in _INTERLEAVE_AXES:
        raise FormatError(f"unknown interleave {interleave!r}")
    code = _ENVI_CODE_FOR.get(cube.dtype.newbyteorder("="))
    if code is None:
        raise FormatError(f"unsupported dtype for ENVI: {cube.dtype}")
    header_path = Path(header_path)
    data_path = Path(data_path) if data_path else header_path.with_suffix(".img")
    bands, lines, samples = cube.shape
    fields = [
        "ENVI",
        f"samples = {samples}",
        f"lines = {lines}",
        f"bands = {bands}",
        "header offset = 0",
        "file type = ENVI Standard",
        f"data type = {code}",
        f"interleave = {interleave}",
        "byte order = 0",
    ]
    if wavelengths is not None:
        fields.append("wavelength = {" + ", ".join(f"{w:g}" for w in wavelengths) + "}")
    header_path.write_text("\n".join(fields) + "\n")
    order = _INTERLEAVE_AXES[interleave]
    payload = np.transpose(cube, ["bls".index(a) for a in order])
    data_path.write_bytes(np.ascontiguousarray(payload, dtype=cube.dtype.newbyteorder("<")).tobytes())
    return data_path


def _guess_data_path(header_path: Path) -> Path:
    for suffix in (".img", ".raw", ".dat", ".bsq", ".bil", ".bip", ""):
        candidate = header_path.with_suffix(suffix)
        if candidate.exists() and candidate != header_path:
            return candidate
    raise FormatError(f"no raw data file found next to {header_path}")


# -- label CSV ---------------------------------------------------------------

def write_label_csv(path, labels: np.ndarray) -> None:
    """One ``row,col,label`` line per labeled pixel (label > 0)."""
    labels = np.asarray(labels)
    rows, cols = np.nonzero(labels > 0)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["row", "col", "label"])
        writer.writerow(["#shape", labels.shape[0], labels.shape[1]])
        for r, c in zip(rows, cols):
            writer.writerow([int(r), int(c), int(labels[r, c])])


def read_label_csv(path, shape=None) -> np.ndarray:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        next(reader)
        entries = []
        for row in reader:
            if row[0] == "#shape":
                shape = shape or (int(row[1]), int(row[2]))
                continue
            entries.append((int(row[0]), int(row[1]), int(row[2])))
    if shape is None:
        raise FormatError(f"{path}: label CSV carries no shape and none was given")
    labels = np.zeros(shape, dtype=np.int64)
    for r, c, v in entries:
        labels[r, c] = v
    return labels
