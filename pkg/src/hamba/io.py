"""File formats: checkpoints, synthetic datasets, run-config files and mesh export.

Binary formats are little-endian, start with 4 magic bytes and a version,
and end with a SHA-256 digest of everything before it, so truncation and
bit flips are detected on load.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .hand.kinematics import IMAGE_SIZE, NUM_CAM, NUM_POSE, NUM_SHAPE, NUM_VERTS, load_template

CHECKPOINT_MAGIC = b"GSSK"
CHECKPOINT_VERSION = 1
DATASET_MAGIC = b"GSSH"
DATASET_VERSION = 1
DIGEST_SIZE = 32


class FormatError(ValueError):
    """A file is truncated, corrupted or not in the expected format."""


def _atomic_write(path, payload: bytes) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(payload)
    os.replace(tmp, path)


def _seal(body: bytes) -> bytes:
    return body + hashlib.sha256(body).digest()


def _unseal(raw: bytes, what: str) -> bytes:
    if len(raw) < DIGEST_SIZE:
        raise FormatError(f"{what}: file too short")
    body, digest = raw[:-DIGEST_SIZE], raw[-DIGEST_SIZE:]
    if hashlib.sha256(body).digest() != digest:
        raise FormatError(f"{what}: checksum mismatch (truncated or corrupted)")
    return body


def canonical_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


# ---------------------------------------------------------------- checkpoints

@dataclass
class Checkpoint:
    config: dict
    step: int
    tensors: dict                      # name -> float64 array
    rng_state: Optional[dict] = None
    optimizer: dict = field(default_factory=dict)   # optimizer hyperparameters and counters
    version: int = CHECKPOINT_VERSION

    def to_bytes(self) -> bytes:
        index, blobs, offset = [], [], 0
        for name in sorted(self.tensors):
            arr = np.asarray(self.tensors[name], dtype="<f8")     # tobytes() writes C order
            index.append([name, list(arr.shape), offset])
            blobs.append(arr.tobytes())
            offset += arr.nbytes
        header = canonical_json({"config": self.config, "step": self.step, "rng_state": self.rng_state,
                                 "optimizer": self.optimizer, "tensors": index})
        body = CHECKPOINT_MAGIC + struct.pack("<IQ", self.version, len(header)) + header + b"".join(blobs)
        return _seal(body)

    def save(self, path) -> None:
        _atomic_write(path, self.to_bytes())

    @classmethod
    def from_bytes(cls, raw: bytes) -> "Checkpoint":
        body = _unseal(raw, "checkpoint")
        if body[:4] != CHECKPOINT_MAGIC:
            raise FormatError("checkpoint: bad magic bytes")
        version, hlen = struct.unpack_from("<IQ", body, 4)
        if version != CHECKPOINT_VERSION:
            raise FormatError(f"checkpoint: unsupported version {version}")
        start = 4 + struct.calcsize("<IQ")
        header = json.loads(body[start:start + hlen].decode("utf-8"))
        blob = memoryview(body)[start + hlen:]
        tensors = {}
        for name, shape, offset in header["tensors"]:
            count = int(np.prod(shape, dtype=np.int64))
            if offset + 8 * count > len(blob):
                raise FormatError(f"checkpoint: tensor {name} runs past end of file")
            tensors[name] = np.frombuffer(blob, dtype="<f8", count=count, offset=offset).reshape(shape).copy()
        return cls(header["config"], header["step"], tensors, header["rng_state"], header["optimizer"], version)

    @classmethod
    def load(cls, path) -> "Checkpoint":
        return cls.from_bytes(Path(path).read_bytes())


# ---------------------------------------------------------------- datasets

def record_dtype(height: int = IMAGE_SIZE[0], width: int = IMAGE_SIZE[1], channels: int = 3) -> np.dtype:
    return np.dtype([
        ("image", "<f4", (height, width, channels)),
        ("theta", "<f8", (NUM_POSE,)),
        ("beta", "<f8", (NUM_SHAPE,)),
        ("cam", "<f8", (NUM_CAM,)),
        ("joints3d", "<f8", (21, 3)),
        ("joints2d", "<f8", (21, 2)),
        ("vertices", "<f8", (NUM_VERTS, 3)),
        ("has_3d", "u1"),
        ("has_params", "u1"),
    ])


_DATASET_HEADER = struct.Struct("<4sIIIII")   # magic, version, count, height, width, channels


@dataclass
class DatasetFile:
    records: np.ndarray     # structured array with record_dtype()

    def __len__(self) -> int:
        return len(self.records)

    def to_bytes(self) -> bytes:
        h, w, c = self.records.dtype["image"].shape
        header = _DATASET_HEADER.pack(DATASET_MAGIC, DATASET_VERSION, len(self.records), h, w, c)
        return _seal(header + self.records.tobytes())

    def save(self, path) -> None:
        _atomic_write(path, self.to_bytes())

    @classmethod
    def from_bytes(cls, raw: bytes) -> "DatasetFile":
        body = _unseal(raw, "dataset")
        if len(body) < _DATASET_HEADER.size:
            raise FormatError("dataset: truncated header")
        magic, version, count, h, w, c = _DATASET_HEADER.unpack_from(body)
        if magic != DATASET_MAGIC:
            raise FormatError("dataset: bad magic bytes")
        if version != DATASET_VERSION:
            raise FormatError(f"dataset: unsupported version {version}")
        dtype = record_dtype(h, w, c)
        if len(body) != _DATASET_HEADER.size + count * dtype.itemsize:
            raise FormatError("dataset: size does not match header")
        records = np.frombuffer(body, dtype=dtype, count=count, offset=_DATASET_HEADER.size).copy()
        return cls(records)

    @classmethod
    def load(cls, path) -> "DatasetFile":
        return cls.from_bytes(Path(path).read_bytes())

    @classmethod
    def from_samples(cls, samples) -> "DatasetFile":
        """Pack (image, HandPrediction) pairs."""
        samples = list(samples)
        records = np.zeros(len(samples), dtype=record_dtype())
        for rec, (image, gt) in zip(records, samples):
            rec["image"] = image
            rec["theta"], rec["beta"], rec["cam"] = gt.params.theta, gt.params.beta, gt.params.cam
            rec["joints3d"], rec["joints2d"], rec["vertices"] = gt.joints3d, gt.joints2d, gt.vertices
            rec["has_3d"] = rec["has_params"] = 1
        return cls(records)


def generate_dataset(count: int, seed: int) -> DatasetFile:
    from .hand.synth import synth_sample

    rng = np.random.default_rng(seed)
    return DatasetFile.from_samples(synth_sample(rng) for _ in range(count))


# ---------------------------------------------------------------- config files

def _coerce(text: str, like):
    text = text.strip()
    if isinstance(like, bool):
        if text.lower() in ("1", "true", "yes", "on"):
            return True
        if text.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {text!r}")
    if isinstance(like, int):
        return int(text)
    if isinstance(like, float):
        return float(text)
    if isinstance(like, tuple):
        return tuple(_coerce(part, like[0] if like else "") for part in text.split(",") if part.strip())
    return text


def parse_config_text(text: str) -> dict:
    """``key = value`` lines; ``#`` starts a comment.  Values stay strings."""
    out = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {lineno}: expected 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        out[key] = value
    return out


def layer_config(defaults, file_values: Optional[dict] = None, overrides: Optional[dict] = None):
    """defaults < config file < command-line flags, coerced to the defaults' field types."""
    current = dataclasses.asdict(defaults)
    updates = {}
    for layer in (file_values or {}, overrides or {}):
        for key, value in layer.items():
            if value is None:
                continue
            if key not in current:
                raise ValueError(f"unknown config key {key!r}")
            updates[key] = _coerce(value, current[key]) if isinstance(value, str) else value
    return dataclasses.replace(defaults, **updates)


def format_config(cfg) -> str:
    lines = []
    for key, value in sorted(dataclasses.asdict(cfg).items()):
        if isinstance(value, tuple):
            value = ",".join(str(v) for v in value)
        lines.append(f"{key} = {value}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------- meshes

class MeshParseError(ValueError):
    pass


def mesh_text(vertices: np.ndarray, faces: np.ndarray) -> str:
    lines = [f"v {x:.6f} {y:.6f} {z:.6f}" for x, y, z in np.asarray(vertices, dtype=np.float64)]
    lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in np.asarray(faces)]
    return "\n".join(lines) + "\n"


def export_mesh(pred, path) -> None:
    """Write the hand mesh as Wavefront OBJ text (``v``/``f`` records, 1-based faces)."""
    vertices = np.asarray(pred.vertices)
    if vertices.shape != (NUM_VERTS, 3):
        raise ValueError(f"export_mesh: expected ({NUM_VERTS}, 3) vertices, got {vertices.shape}")
    Path(path).write_text(mesh_text(vertices, load_template().faces), encoding="utf-8")


def parse_obj(path):
    """Minimal OBJ reader for ``v``/``f`` records; raises MeshParseError on any malformed line."""
    verts, faces = [], []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        parts = line.split()
        if not parts or parts[0].startswith("#"):
            continue
        try:
            if parts[0] == "v" and len(parts) == 4:
                verts.append([float(p) for p in parts[1:]])
            elif parts[0] == "f" and len(parts) >= 4:
                faces.append([int(p.split("/")[0]) - 1 for p in parts[1:]])
            else:
                raise MeshParseError(f"line {lineno}: unsupported record {parts[0]!r}")
        except MeshParseError:
            raise
        except ValueError as exc:
            raise MeshParseError(f"line {lineno}: {exc}") from exc
    verts = np.array(verts, dtype=np.float64).reshape(-1, 3)
    for face in faces:
        if min(face) < 0 or max(face) >= len(verts):
            raise MeshParseError(f"face {face} references a missing vertex")
    if not np.all(np.isfinite(verts)):
        raise MeshParseError("non-finite vertex coordinate")
    return verts, faces
