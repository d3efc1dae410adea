"""Binary artifact formats (all little-endian) plus PPM/PGM rasters.

Format summary:
  ATMP: "ATMP", u16 version=1, u16 grid_h, u16 grid_w, u8 state
        (0 raw / 1 normalized), float32 row-major values.
  PFEA: "PFEA", u16 version=1, u32 n_rows, u32 dim, float32 row-major.
  EMBD: "EMBD", u16 version=1, u32 n_rows, u32 dim, float32 vectors,
        u32 labels, then per row a u32-length-prefixed UTF-8 id.
  AMCK: "AMCK", u16 version=1, u32-length-prefixed "key=value\\n" config
        block, then per parameter array (sorted by name): length-prefixed
        name, u8 rank, u32 dims, float32 data.
"""
from __future__ import annotations

import io
import struct
from pathlib import Path

import numpy as np

from .attention import NORMALIZED, RAW, AttentionMap
from .errors import FormatError

VERSION = 1
_STATE_BYTES = {RAW: 0, NORMALIZED: 1}
_BYTE_STATES = {0: RAW, 1: NORMALIZED}


def _read_exact(f, n: int) -> bytes:
    data = f.read(n)
    if len(data) != n:
        raise FormatError(f"truncated file: wanted {n} bytes, got {len(data)}")
    return data


def _check_header(f, magic: bytes) -> None:
    got = _read_exact(f, 4)
    if got != magic:
        raise FormatError(f"bad magic {got!r}, expected {magic!r}")
    (version,) = struct.unpack("<H", _read_exact(f, 2))
    if version != VERSION:
        raise FormatError(f"unsupported {magic.decode()} version {version}")


def _write_string(f, text: str) -> None:
    data = text.encode("utf-8")
    f.write(struct.pack("<I", len(data)))
    f.write(data)


def _read_string(f) -> str:
    (n,) = struct.unpack("<I", _read_exact(f, 4))
    return _read_exact(f, n).decode("utf-8")


# --- attention maps ---------------------------------------------------------

def write_atmp(path, map_: AttentionMap) -> None:
    if map_.state not in _STATE_BYTES:
        raise FormatError(f"only raw/normalized maps are persisted, got {map_.state!r}")
    with open(path, "wb") as f:
        f.write(b"ATMP")
        f.write(struct.pack("<HHHB", VERSION, map_.grid_h, map_.grid_w, _STATE_BYTES[map_.state]))
        f.write(map_.values.astype("<f4").tobytes())


def read_atmp(path, source: str = "ingested") -> AttentionMap:
    with open(path, "rb") as f:
        _check_header(f, b"ATMP")
        gh, gw, state_byte = struct.unpack("<HHB", _read_exact(f, 5))
        if state_byte not in _BYTE_STATES:
            raise FormatError(f"unknown map state byte {state_byte}")
        data = _read_exact(f, gh * gw * 4)
        if f.read(1):
            raise FormatError("trailing bytes after map values")
    values = np.frombuffer(data, dtype="<f4").reshape(gh, gw)
    return AttentionMap(values, state=_BYTE_STATES[state_byte], source=source)


# --- patch features ---------------------------------------------------------

def write_pfea(path, features: np.ndarray) -> None:
    features = np.asarray(features)
    if features.ndim != 2:
        raise FormatError(f"feature matrix must be 2-D, got {features.shape}")
    with open(path, "wb") as f:
        f.write(b"PFEA")
        f.write(struct.pack("<HII", VERSION, features.shape[0], features.shape[1]))
        f.write(features.astype("<f4").tobytes())


def read_pfea(path) -> np.ndarray:
    with open(path, "rb") as f:
        _check_header(f, b"PFEA")
        n, d = struct.unpack("<II", _read_exact(f, 8))
        data = _read_exact(f, n * d * 4)
        if f.read(1):
            raise FormatError("trailing bytes after feature values")
    return np.frombuffer(data, dtype="<f4").reshape(n, d).astype(np.float64)


# --- embeddings -------------------------------------------------------------

def write_embd(path, vectors: np.ndarray, labels: np.ndarray, ids) -> None:
    vectors = np.asarray(vectors)
    labels = np.asarray(labels)
    ids = list(ids)
    if vectors.ndim != 2 or len(labels) != vectors.shape[0] or len(ids) != vectors.shape[0]:
        raise FormatError("vectors, labels and ids must agree on the row count")
    with open(path, "wb") as f:
        f.write(b"EMBD")
        f.write(struct.pack("<HII", VERSION, vectors.shape[0], vectors.shape[1]))
        f.write(vectors.astype("<f4").tobytes())
        f.write(labels.astype("<u4").tobytes())
        for item in ids:
            _write_string(f, item)


def read_embd(path):
    with open(path, "rb") as f:
        _check_header(f, b"EMBD")
        m, d = struct.unpack("<II", _read_exact(f, 8))
        vectors = np.frombuffer(_read_exact(f, m * d * 4), dtype="<f4").reshape(m, d)
        labels = np.frombuffer(_read_exact(f, m * 4), dtype="<u4").astype(np.int64)
        ids = [_read_string(f) for _ in range(m)]
        if f.read(1):
            raise FormatError("trailing bytes after id strings")
    return vectors.astype(np.float64), labels, ids


# --- model checkpoints ------------------------------------------------------

def write_checkpoint(path, arrays: dict[str, np.ndarray], config_text: str) -> None:
    with open(path, "wb") as f:
        f.write(b"AMCK")
        f.write(struct.pack("<H", VERSION))
        _write_string(f, config_text)
        for name in sorted(arrays):
            arr = np.asarray(arrays[name])
            _write_string(f, name)
            f.write(struct.pack("<B", arr.ndim))
            for dim in arr.shape:
                f.write(struct.pack("<I", dim))
            f.write(arr.astype("<f4").tobytes())


def read_checkpoint(path):
    arrays: dict[str, np.ndarray] = {}
    with open(path, "rb") as f:
        _check_header(f, b"AMCK")
        config_text = _read_string(f)
        while True:
            head = f.read(4)
            if not head:
                break
            if len(head) != 4:
                raise FormatError("truncated parameter record")
            (name_len,) = struct.unpack("<I", head)
            name = _read_exact(f, name_len).decode("utf-8")
            (rank,) = struct.unpack("<B", _read_exact(f, 1))
            shape = tuple(
                struct.unpack("<I", _read_exact(f, 4))[0] for _ in range(rank)
            )
            count = int(np.prod(shape, dtype=np.int64)) if shape else 1
            data = _read_exact(f, count * 4)
            arrays[name] = np.frombuffer(data, dtype="<f4").reshape(shape).copy()
    return arrays, config_text


# --- rasters ----------------------------------------------------------------

def write_ppm(path, pixels_u8: np.ndarray) -> None:
    pixels_u8 = np.asarray(pixels_u8, dtype=np.uint8)
    if pixels_u8.ndim != 3 or pixels_u8.shape[2] != 3:
        raise FormatError(f"PPM wants H x W x 3 uint8, got {pixels_u8.shape}")
    h, w, _ = pixels_u8.shape
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(pixels_u8.tobytes())


def _read_pnm_header(f, magic: bytes):
    if _read_exact(f, 2) != magic:
        raise FormatError(f"not a {magic.decode()} file")
    fields = []
    while len(fields) < 3:
        tok = b""
        ch = f.read(1)
        while ch.isspace():
            ch = f.read(1)
        if ch == b"#":  # comment line
            while ch not in (b"\n", b""):
                ch = f.read(1)
            continue
        while ch and not ch.isspace():
            tok += ch
            ch = f.read(1)
        if not tok:
            raise FormatError("truncated PNM header")
        fields.append(int(tok))
    w, h, maxval = fields
    if maxval != 255:
        raise FormatError(f"only 8-bit rasters supported, maxval {maxval}")
    return w, h


def read_ppm(path) -> np.ndarray:
    with open(path, "rb") as f:
        w, h = _read_pnm_header(f, b"P6")
        data = _read_exact(f, w * h * 3)
    return np.frombuffer(data, dtype=np.uint8).reshape(h, w, 3).copy()


def write_pgm(path, gray_u8: np.ndarray) -> None:
    gray_u8 = np.asarray(gray_u8, dtype=np.uint8)
    if gray_u8.ndim != 2:
        raise FormatError(f"PGM wants H x W uint8, got {gray_u8.shape}")
    h, w = gray_u8.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(gray_u8.tobytes())


def read_pgm(path) -> np.ndarray:
    with open(path, "rb") as f:
        w, h = _read_pnm_header(f, b"P5")
        data = _read_exact(f, w * h)
    return np.frombuffer(data, dtype=np.uint8).reshape(h, w).copy()


def file_digest(path) -> str:
    """Hex SHA-256 of a file, for byte-identity checks."""
    import hashlib

    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def tree_digest(root) -> str:
    """Deterministic digest of a directory tree (paths + contents)."""
    import hashlib

    root = Path(root)
    h = hashlib.sha256()
    for path in sorted(p for p in root.rglob("*") if p.is_file()):
        h.update(str(path.relative_to(root)).encode())
        h.update(bytes.fromhex(file_digest(path)))
    return h.hexdigest()
