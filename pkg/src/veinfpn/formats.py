"""On-disk formats: checkpoints, packed vein templates and score CSVs.

Checkpoint layout (all integers little-endian)::

    magic      8 bytes  b"VFPNCKPT"
    version    u32
    blob_len   u32      followed by a UTF-8 JSON document (sorted keys)
    n_tensors  u32
    per tensor: name_len u16, name, dtype u8 (1 = float32),
                shape 4 x u32, raw float32 data

Template layout::

    magic b"VFPNTPL\\0", version u16, H u32, W u32, id_len u16, id,
    then ceil(H*W/8) bytes of row-major bits (numpy packbits order)
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import FormatError, VersionError

CKPT_MAGIC = b"VFPNCKPT"
CKPT_VERSION = 1
TPL_MAGIC = b"VFPNTPL\0"
TPL_VERSION = 1
_F32 = 1


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def config_hash(obj) -> str:
    return hashlib.sha256(canonical_json(obj).encode("utf-8")).hexdigest()[:16]


# --------------------------------------------------------------------------
# checkpoints


class _Reader:
    def __init__(self, data: bytes, source: str) -> None:
        self.data = data
        self.pos = 0
        self.source = source

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise FormatError(f"{self.source}: truncated while reading {what}", self.pos)
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        raw = self.take(struct.calcsize(fmt), what)
        return struct.unpack(fmt, raw)


def write_tensors(meta: dict, tensors: Sequence[tuple[str, np.ndarray]]) -> bytes:
    buf = io.BytesIO()
    blob = canonical_json(meta).encode("utf-8")
    buf.write(CKPT_MAGIC)
    buf.write(struct.pack("<II", CKPT_VERSION, len(blob)))
    buf.write(blob)
    buf.write(struct.pack("<I", len(tensors)))
    for name, arr in tensors:
        arr = np.asarray(arr, dtype="<f4")
        shape = arr.shape
        if len(shape) > 4:
            raise FormatError(f"tensor {name} has more than 4 dimensions")
        shape4 = (1,) * (4 - len(shape)) + tuple(shape)
        raw_name = name.encode("utf-8")
        buf.write(struct.pack("<H", len(raw_name)))
        buf.write(raw_name)
        buf.write(struct.pack("<B4I", _F32, *shape4))
        buf.write(np.ascontiguousarray(arr).tobytes())
    return buf.getvalue()


def read_tensors(data: bytes, source: str = "checkpoint") -> tuple[dict, dict[str, np.ndarray]]:
    r = _Reader(data, source)
    magic = r.take(len(CKPT_MAGIC), "magic")
    if magic != CKPT_MAGIC:
        raise FormatError(f"{source}: bad magic {magic!r}", 0)
    (version,) = r.unpack("<I", "version")
    if version != CKPT_VERSION:
        raise VersionError(f"{source}: unsupported checkpoint version {version}", len(CKPT_MAGIC))
    (blob_len,) = r.unpack("<I", "config length")
    at = r.pos
    try:
        meta = json.loads(r.take(blob_len, "config blob").decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{source}: corrupt config blob ({exc})", at) from exc
    (count,) = r.unpack("<I", "tensor count")
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = r.unpack("<H", "name length")
        at = r.pos
        try:
            name = r.take(name_len, "tensor name").decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FormatError(f"{source}: corrupt tensor name", at) from exc
        at = r.pos
        dtype, *shape = r.unpack("<B4I", f"header of {name}")
        if dtype != _F32:
            raise FormatError(f"{source}: unknown dtype tag {dtype} for {name}", at)
        n = int(np.prod(shape))
        raw = r.take(4 * n, f"data of {name}")
        tensors[name] = np.frombuffer(raw, dtype="<f4").reshape(shape).astype(np.float32)
    if r.pos != len(data):
        raise FormatError(f"{source}: {len(data) - r.pos} trailing bytes", r.pos)
    return meta, tensors


def save_checkpoint(path, model, adam_state=None, extra: dict | None = None) -> str:
    """Serialise model (and optimizer) state; returns the config hash."""
    cfg = model.config.to_dict()
    cfg["alpha"] = float(model.alpha)
    meta = {"format": "veinfpn-checkpoint", "model": cfg, "extra": extra or {}}
    tensors: list[tuple[str, np.ndarray]] = [(n, p.data) for n, p in model.named_parameters()]
    tensors += [(n, b) for n, b in model.named_buffers()]
    if adam_state is not None:
        meta["adam"] = {
            "lr": adam_state.lr,
            "beta1": adam_state.beta1,
            "beta2": adam_state.beta2,
            "eps": adam_state.eps,
            "step": adam_state.step,
            "has_moments": bool(adam_state.m),
        }
        if adam_state.m:
            names = [n for n, _ in model.named_parameters()]
            tensors += [(f"adam.m.{n}", m) for n, m in zip(names, adam_state.m)]
            tensors += [(f"adam.v.{n}", v) for n, v in zip(names, adam_state.v)]
    meta["config_hash"] = config_hash({"model": cfg, "extra": extra or {}})
    Path(path).write_bytes(write_tensors(meta, tensors))
    return meta["config_hash"]


def load_checkpoint(path):
    from .resfpn import ModelConfig, ResFPNModel
    from .tensor import AdamState

    path = Path(path)
    meta, tensors = read_tensors(path.read_bytes(), str(path))
    try:
        cfg = ModelConfig.from_dict(meta["model"])
    except (KeyError, TypeError) as exc:
        raise FormatError(f"{path}: checkpoint lacks a valid model config ({exc})") from exc
    model = ResFPNModel.build(cfg)
    for name, p in model.named_parameters():
        if name not in tensors:
            raise FormatError(f"{path}: missing tensor {name}")
        p.data = tensors[name].reshape(p.data.shape).copy()
    for name, b in model.named_buffers():
        if name not in tensors:
            raise FormatError(f"{path}: missing buffer {name}")
        model.set_buffer(name, tensors[name])
    adam = None
    if "adam" in meta:
        a = meta["adam"]
        adam = AdamState(lr=a["lr"], beta1=a["beta1"], beta2=a["beta2"], eps=a["eps"], step=a["step"])
        if a.get("has_moments"):
            names = [n for n, _ in model.named_parameters()]
            shapes = [p.data.shape for p in model.parameters()]
            adam.m = [tensors[f"adam.m.{n}"].reshape(s).copy() for n, s in zip(names, shapes)]
            adam.v = [tensors[f"adam.v.{n}"].reshape(s).copy() for n, s in zip(names, shapes)]
    return model, adam, meta


# --------------------------------------------------------------------------
# templates


def encode_template(vein_map: np.ndarray, source_id: str = "") -> bytes:
    m = np.asarray(vein_map)
    if m.ndim != 2:
        raise FormatError("template must be 2-D")
    raw_id = source_id.encode("utf-8")
    header = TPL_MAGIC + struct.pack("<HIIH", TPL_VERSION, m.shape[0], m.shape[1], len(raw_id)) + raw_id
    return header + np.packbits(m.astype(bool).reshape(-1)).tobytes()


def decode_template(data: bytes, source: str = "template") -> tuple[np.ndarray, str]:
    r = _Reader(data, source)
    if r.take(len(TPL_MAGIC), "magic") != TPL_MAGIC:
        raise FormatError(f"{source}: bad template magic", 0)
    version, h, w, id_len = r.unpack("<HIIH", "template header")
    if version != TPL_VERSION:
        raise VersionError(f"{source}: unsupported template version {version}", len(TPL_MAGIC))
    sid = r.take(id_len, "source id").decode("utf-8")
    nbytes = (h * w + 7) // 8
    bits = np.frombuffer(r.take(nbytes, "bit plane"), dtype=np.uint8)
    if r.pos != len(data):
        raise FormatError(f"{source}: trailing bytes", r.pos)
    return np.unpackbits(bits)[: h * w].reshape(h, w).astype(np.uint8), sid


# --------------------------------------------------------------------------
# scores


@dataclass(frozen=True)
class ScoreRow:
    probe_id: str
    model_id: str
    score: float
    is_genuine: bool


SCORE_HEADER = ["probe_id", "model_id", "score", "is_genuine"]


def write_scores(path, rows: Iterable[ScoreRow], comment: str | None = None) -> None:
    """Rows sorted by (probe_id, model_id); scores at 6 decimals."""
    rows = sorted(rows, key=lambda r: (r.probe_id, r.model_id))
    with open(path, "w", newline="", encoding="utf-8") as fh:
        if comment:
            fh.write(f"# {comment}\n")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(SCORE_HEADER)
        for r in rows:
            writer.writerow([r.probe_id, r.model_id, f"{r.score:.6f}", int(r.is_genuine)])


def read_scores(path) -> list[ScoreRow]:
    rows: list[ScoreRow] = []
    with open(path, newline="", encoding="utf-8") as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    reader = csv.reader(lines)
    header = next(reader, None)
    if header != SCORE_HEADER:
        raise FormatError(f"{path}: expected header {','.join(SCORE_HEADER)}, got {header}")
    for lineno, rec in enumerate(reader, start=2):
        if not rec:
            continue
        if len(rec) != 4:
            raise FormatError(f"{path}: line {lineno} has {len(rec)} fields")
        try:
            genuine = rec[3].strip().lower()
            if genuine not in ("0", "1", "true", "false"):
                raise ValueError(rec[3])
            rows.append(ScoreRow(rec[0], rec[1], float(rec[2]), genuine in ("1", "true")))
        except ValueError as exc:
            raise FormatError(f"{path}: line {lineno}: bad value ({exc})") from exc
    return rows
