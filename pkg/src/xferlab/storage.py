"""Binary containers for checkpoints ("SEVX") and explained datasets ("SEVD"),
plus the ``[section] key = value`` sidecar files.

All integers and floats are little-endian.  Each container ends with a 64-bit
checksum (BLAKE2b, 8-byte digest) of every preceding byte; a reader verifies it
before parsing anything else.

SEVX layout::

    "SEVX" | version u32 | record count u32 |
    per record: name length u32 | UTF-8 name | rank u32 | dims u64 * rank | f64 values
    | checksum u64

SEVD layout::

    "SEVD" | version u32 | split str | domain str | num_patches u32 |
    class count u32 | class names str * n | provenance count u32 | (key str, value str) * n |
    sample count u32 |
    per sample: id str | label i64 | planted count u32 | planted u32 * n |
                pixels (rank u32, dims u64 * rank, f64 values) | has_phi u8 | phi f64 * M
    | checksum u64

where ``str`` is a u32 byte length followed by UTF-8 bytes.
"""
from __future__ import annotations

import configparser
import hashlib
import io
import os
import struct
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .arithmetic import TaskVector
from .data import DataFormatError, Dataset, LabeledImage
from .model import HeadMatrix, ParameterVector, make_layout

CHECKPOINT_MAGIC = b"SEVX"
DATASET_MAGIC = b"SEVD"
FORMAT_VERSION = 1
HEAD_W = "__head__.W"
HEAD_NAMES = "__head__.names"
RESIDUAL_PREFIX = "__residual__."
_NAME_SEP = 0x1F


class ChecksumError(DataFormatError):
    pass


def checksum(payload: bytes) -> bytes:
    return hashlib.blake2b(payload, digest_size=8).digest()


def atomic_write(path, data: bytes | str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data.encode("utf-8") if isinstance(data, str) else data)
    os.replace(tmp, path)
    return path


# primitive writers/readers ------------------------------------------------------

class _Writer:
    def __init__(self, magic: bytes):
        self.buf = io.BytesIO()
        self.buf.write(magic)
        self.u32(FORMAT_VERSION)

    def u32(self, v: int) -> None:
        self.buf.write(struct.pack("<I", v))

    def u8(self, v: int) -> None:
        self.buf.write(struct.pack("<B", v))

    def i64(self, v: int) -> None:
        self.buf.write(struct.pack("<q", v))

    def string(self, s: str) -> None:
        b = s.encode("utf-8")
        self.u32(len(b))
        self.buf.write(b)

    def array(self, a: np.ndarray) -> None:
        a = np.asarray(a, dtype=np.float64)
        self.u32(a.ndim)
        self.buf.write(struct.pack(f"<{a.ndim}Q", *a.shape))
        self.buf.write(np.ascontiguousarray(a, dtype="<f8").tobytes())

    def finish(self) -> bytes:
        payload = self.buf.getvalue()
        return payload + checksum(payload)


class _Reader:
    def __init__(self, raw: bytes, magic: bytes, where: str):
        self.where = where
        if len(raw) < len(magic) + 4 + 8:
            raise DataFormatError(f"{where}: file too short")
        if raw[:4] != magic:
            raise DataFormatError(f"{where}: bad magic {raw[:4]!r}, expected {magic!r}")
        payload, tail = raw[:-8], raw[-8:]
        if checksum(payload) != tail:
            raise ChecksumError(f"{where}: checksum mismatch, file is corrupted")
        self.raw = payload
        self.pos = 4
        version = self.u32()
        if version != FORMAT_VERSION:
            raise DataFormatError(f"{where}: unsupported format version {version}")

    def _take(self, n: int) -> bytes:
        if self.pos + n > len(self.raw):
            raise DataFormatError(f"{self.where}: truncated record at byte {self.pos}")
        out = self.raw[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self._take(4))[0]

    def u8(self) -> int:
        return struct.unpack("<B", self._take(1))[0]

    def i64(self) -> int:
        return struct.unpack("<q", self._take(8))[0]

    def string(self) -> str:
        return self._take(self.u32()).decode("utf-8")

    def array(self) -> np.ndarray:
        rank = self.u32()
        dims = struct.unpack(f"<{rank}Q", self._take(8 * rank))
        n = int(np.prod(dims)) if rank else 1
        return np.frombuffer(self._take(8 * n), dtype="<f8").astype(np.float64).reshape(dims)

    def done(self) -> None:
        if self.pos != len(self.raw):
            raise DataFormatError(f"{self.where}: {len(self.raw) - self.pos} trailing bytes")


# SEVX ---------------------------------------------------------------------------

def encode_records(records: Sequence[tuple[str, np.ndarray]]) -> bytes:
    w = _Writer(CHECKPOINT_MAGIC)
    w.u32(len(records))
    for name, arr in records:
        w.string(name)
        w.array(arr)
    return w.finish()


def decode_records(raw: bytes, where: str = "<bytes>") -> list[tuple[str, np.ndarray]]:
    r = _Reader(raw, CHECKPOINT_MAGIC, where)
    out = [(r.string(), r.array()) for _ in range(r.u32())]
    r.done()
    return out


def _names_to_array(names: Sequence[str]) -> np.ndarray:
    joined = bytes([_NAME_SEP]).join(n.encode("utf-8") for n in names)
    return np.frombuffer(joined, dtype=np.uint8).astype(np.float64)


def _array_to_names(a: np.ndarray) -> tuple[str, ...]:
    raw = bytes(a.astype(np.uint8).tolist())
    return tuple(p.decode("utf-8") for p in raw.split(bytes([_NAME_SEP]))) if raw else ()


def _param_records(theta: ParameterVector, prefix: str = "") -> list[tuple[str, np.ndarray]]:
    return [(prefix + name, theta.values[off:off + int(np.prod(shp))].reshape(shp))
            for name, shp, off in theta.layout]


def _head_records(head: HeadMatrix) -> list[tuple[str, np.ndarray]]:
    return [(HEAD_W, head.W), (HEAD_NAMES, _names_to_array(head.class_names))]


def save_checkpoint(path, theta: ParameterVector, head: HeadMatrix | None = None) -> Path:
    records = _param_records(theta)
    if head is not None:
        records += _head_records(head)
    return atomic_write(path, encode_records(records))


def _split(records) -> tuple[dict[str, np.ndarray], dict[str, np.ndarray]]:
    params, reserved = {}, {}
    for name, arr in records:
        (reserved if name.startswith("__") else params)[name] = arr
    return params, reserved


def _vector(named: Mapping[str, np.ndarray]) -> ParameterVector:
    layout = make_layout({k: v.shape for k, v in named.items()})
    values = (np.concatenate([named[n].reshape(-1) for n, _, _ in layout])
              if layout else np.zeros(0))
    return ParameterVector(values, layout)


def load_checkpoint(path) -> tuple[ParameterVector, HeadMatrix | None]:
    params, reserved = _split(decode_records(Path(path).read_bytes(), str(path)))
    head = None
    if HEAD_W in reserved:
        head = HeadMatrix(reserved[HEAD_W], _array_to_names(reserved.get(HEAD_NAMES, np.zeros(0))))
    return _vector(params), head


def save_task_vector(path, tau: TaskVector) -> Path:
    hi = ParameterVector(tau.values, tau.layout)
    records = _param_records(hi)
    if tau.residual is not None:
        records += _param_records(ParameterVector(tau.residual, tau.layout), RESIDUAL_PREFIX)
    return atomic_write(path, encode_records(records))


def load_task_vector(path, provenance: Mapping[str, str]) -> TaskVector:
    params, reserved = _split(decode_records(Path(path).read_bytes(), str(path)))
    hi = _vector(params)
    lo = {k[len(RESIDUAL_PREFIX):]: v for k, v in reserved.items() if k.startswith(RESIDUAL_PREFIX)}
    residual = _vector(lo).values if lo else None
    return TaskVector(hi.values, hi.base_fingerprint, provenance.get("base_id", ""),
                      provenance.get("finetuned_id", ""), provenance.get("delta", "ft-base"),
                      hi.layout, residual)


# SEVD ---------------------------------------------------------------------------

def encode_dataset(ds: Dataset) -> bytes:
    w = _Writer(DATASET_MAGIC)
    w.string(ds.split)
    w.string(ds.domain)
    w.u32(ds.num_patches)
    w.u32(len(ds.class_names))
    for n in ds.class_names:
        w.string(n)
    w.u32(len(ds.provenance))
    for k in sorted(ds.provenance):
        w.string(k)
        w.string(ds.provenance[k])
    w.u32(len(ds.images))
    for im in ds.images:
        w.string(im.id)
        w.i64(int(im.label))
        w.u32(len(im.planted))
        for m in im.planted:
            w.u32(int(m))
        w.array(im.pixels)
        phi = ds.phi.get(im.id)
        w.u8(phi is not None)
        if phi is not None:
            w.buf.write(np.ascontiguousarray(phi, dtype="<f8").tobytes())
    return w.finish()


def decode_dataset(raw: bytes, where: str = "<bytes>") -> Dataset:
    r = _Reader(raw, DATASET_MAGIC, where)
    split, domain = r.string(), r.string()
    M = r.u32()
    names = tuple(r.string() for _ in range(r.u32()))
    prov = {}
    for _ in range(r.u32()):
        k = r.string()
        prov[k] = r.string()
    images, phis = [], {}
    for _ in range(r.u32()):
        sid, label = r.string(), r.i64()
        planted = tuple(r.u32() for _ in range(r.u32()))
        pixels = r.array()
        if r.u8():
            phis[sid] = np.frombuffer(r._take(8 * M), dtype="<f8").astype(np.float64)
        if not 0 <= label < len(names):
            raise DataFormatError(f"{where}: sample {sid} has label {label} outside {len(names)}")
        images.append(LabeledImage(pixels, int(label), sid, planted))
    r.done()
    return Dataset(split, images, names, M, domain, phis, prov)


def save_dataset(path, ds: Dataset) -> Path:
    return atomic_write(path, encode_dataset(ds))


def load_dataset(path) -> Dataset:
    return decode_dataset(Path(path).read_bytes(), str(path))


# sidecars -----------------------------------------------------------------------

def format_sidecar(sections: Mapping[str, Mapping[str, object]]) -> str:
    lines = []
    for sec, items in sections.items():
        if lines:
            lines.append("")
        lines.append(f"[{sec}]")
        for k, v in items.items():
            lines.append(f"{k} = {v}")
    return "\n".join(lines) + "\n"


def write_sidecar(path, sections: Mapping[str, Mapping[str, object]]) -> Path:
    return atomic_write(path, format_sidecar(sections))


def parse_sidecar(text: str, where: str = "<text>") -> dict[str, dict[str, str]]:
    cp = configparser.ConfigParser(interpolation=None, delimiters=("=",),
                                   comment_prefixes=("#", ";"), inline_comment_prefixes=None)
    cp.optionxform = str
    try:
        cp.read_string(text, source=where)
    except configparser.Error as exc:
        raise DataFormatError(f"{where}: {exc}") from exc
    return {s: dict(cp[s]) for s in cp.sections()}


def read_sidecar(path) -> dict[str, dict[str, str]]:
    return parse_sidecar(Path(path).read_text(encoding="utf-8"), str(path))
