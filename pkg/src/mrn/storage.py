"""Binary containers: dataset caches and model checkpoints.

Dataset cache ("MRNB"): magic, version u16, then one record per instance:
language_id u8, length u8, width u16, labels as u16, then H*W f32 pixels
(row-major, H fixed by the image-height convention). Records run to EOF;
the split boundary comes from the JSON sidecar's per-script counts.

Checkpoints share a named-section layout: a section table (name, offset,
shape) followed by one flat f64 blob. "MRNW" adds language_id and the
union width snapshot; "MRNR" adds the domain count and router depth.
All integers are little-endian.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ContractViolation
from .glyphs import IMAGE_HEIGHT, TextInstance

CACHE_MAGIC = b"MRNB"
BRANCH_MAGIC = b"MRNW"
ROUTER_MAGIC = b"MRNR"
FORMAT_VERSION = 1


def serialize_dataset_cache(instances: Sequence[TextInstance]) -> bytes:
    parts = [CACHE_MAGIC, struct.pack("<H", FORMAT_VERSION)]
    for inst in instances:
        if inst.length > 255:
            raise ContractViolation("instance longer than 255 characters")
        if max(inst.labels) > 0xFFFF:
            raise ContractViolation("label id exceeds u16")
        h, w = inst.image.shape
        if h != IMAGE_HEIGHT:
            raise ContractViolation(f"image height {h} != {IMAGE_HEIGHT}")
        parts.append(struct.pack("<BBH", inst.language_id, inst.length, w))
        parts.append(np.asarray(inst.labels, dtype="<u2").tobytes())
        parts.append(inst.image.astype("<f4").tobytes())
    return b"".join(parts)


def write_dataset_cache(path: str | Path, instances: Sequence[TextInstance]) -> None:
    Path(path).write_bytes(serialize_dataset_cache(instances))


def read_dataset_cache(path: str | Path) -> list[TextInstance]:
    path = Path(path)
    blob = path.read_bytes()
    if blob[:4] != CACHE_MAGIC:
        raise ContractViolation(f"{path}: bad magic {blob[:4]!r}")
    (version,) = struct.unpack_from("<H", blob, 4)
    if version != FORMAT_VERSION:
        raise ContractViolation(f"{path}: unsupported version {version}")
    off = 6
    out: list[TextInstance] = []
    n = len(blob)
    while off < n:
        lang, length, w = struct.unpack_from("<BBH", blob, off)
        off += 4
        labels = np.frombuffer(blob, dtype="<u2", count=length, offset=off)
        off += 2 * length
        px = np.frombuffer(blob, dtype="<f4", count=IMAGE_HEIGHT * w, offset=off)
        off += 4 * IMAGE_HEIGHT * w
        out.append(TextInstance(
            image=px.reshape(IMAGE_HEIGHT, w).copy(),
            labels=tuple(int(x) for x in labels),
            language_id=lang,
        ))
    return out


def file_sha256(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_json(path: str | Path, payload: dict) -> None:
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def read_json(path: str | Path) -> dict:
    return json.loads(Path(path).read_text())


# ---------------------------------------------------------------------------
# named-section parameter blobs


def _write_param_sections(f, params: dict[str, np.ndarray]) -> None:
    f.write(struct.pack("<I", len(params)))
    offset = 0
    arrays = []
    for name, arr in params.items():
        arr = np.asarray(arr, dtype=np.float64)
        arrays.append(arr)
        nb = name.encode("utf-8")
        f.write(struct.pack("<H", len(nb)))
        f.write(nb)
        f.write(struct.pack("<QQB", offset, arr.size, arr.ndim))
        f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        offset += arr.size
    for arr in arrays:
        f.write(arr.astype("<f8").tobytes())


def _read_param_sections(blob: bytes, off: int) -> dict[str, np.ndarray]:
    (n_sections,) = struct.unpack_from("<I", blob, off)
    off += 4
    meta = []
    for _ in range(n_sections):
        (name_len,) = struct.unpack_from("<H", blob, off)
        off += 2
        name = blob[off:off + name_len].decode("utf-8")
        off += name_len
        start, size, ndim = struct.unpack_from("<QQB", blob, off)
        off += 17
        shape = struct.unpack_from(f"<{ndim}I", blob, off)
        off += 4 * ndim
        meta.append((name, start, size, shape))
    out = {}
    for name, start, size, shape in meta:
        arr = np.frombuffer(blob, dtype="<f8", count=size, offset=off + 8 * start)
        out[name] = arr.reshape(shape).copy()
    return out


def write_branch_checkpoint(path: str | Path, language_id: int, union_width: int,
                            params: dict[str, np.ndarray]) -> None:
    with open(path, "wb") as f:
        f.write(BRANCH_MAGIC)
        f.write(struct.pack("<HHI", FORMAT_VERSION, language_id, union_width))
        _write_param_sections(f, params)


def read_branch_checkpoint(path: str | Path):
    blob = Path(path).read_bytes()
    if blob[:4] != BRANCH_MAGIC:
        raise ContractViolation(f"{path}: bad magic {blob[:4]!r}")
    version, language_id, union_width = struct.unpack_from("<HHI", blob, 4)
    if version != FORMAT_VERSION:
        raise ContractViolation(f"{path}: unsupported version {version}")
    params = _read_param_sections(blob, 12)
    return language_id, union_width, params


def write_router_checkpoint(path: str | Path, n_domains: int, depth: int,
                            params: dict[str, np.ndarray]) -> None:
    with open(path, "wb") as f:
        f.write(ROUTER_MAGIC)
        f.write(struct.pack("<HII", FORMAT_VERSION, n_domains, depth))
        _write_param_sections(f, params)


def read_router_checkpoint(path: str | Path):
    blob = Path(path).read_bytes()
    if blob[:4] != ROUTER_MAGIC:
        raise ContractViolation(f"{path}: bad magic {blob[:4]!r}")
    version, n_domains, depth = struct.unpack_from("<HII", blob, 4)
    if version != FORMAT_VERSION:
        raise ContractViolation(f"{path}: unsupported version {version}")
    params = _read_param_sections(blob, 14)
    return n_domains, depth, params
