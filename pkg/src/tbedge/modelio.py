"""The ``TBW1`` weight container.

Layout (all integers little-endian)::

    b"TBW1" | u32 header_length | header JSON (UTF-8) | payload

The header is canonical JSON (sorted keys, no whitespace) holding
``format_version``, ``model_spec``, an optional ``optimizer`` block and a
``tensors`` manifest of ``{name, dtype, shape, byte_offset, byte_length,
checksum}`` entries.  Offsets are relative to the payload start, dtypes are
``"f32"`` or ``"f16"``, and ``checksum`` is the CRC-32 of the tensor bytes.
Optimizer velocities are stored as extra tensors named ``opt/<param>``.
"""
from __future__ import annotations

import json
import struct
import zlib
from pathlib import Path
from typing import Dict, Optional, Tuple

import numpy as np

from .nn import Model, ModelSpec, SpecError, parameter_layout
from .optim import OptimizerState

MAGIC = b"TBW1"
FORMAT_VERSION = 1
OPT_PREFIX = "opt/"

DTYPES = {"f32": np.dtype("<f4"), "f16": np.dtype("<f2")}


class ContainerError(ValueError):
    """Base class for unreadable or inconsistent weight containers."""


class BadMagicError(ContainerError):
    pass


class VersionError(ContainerError):
    pass


class TruncatedError(ContainerError):
    pass


class UnknownDtypeError(ContainerError):
    def __init__(self, tag):
        super().__init__(f"unknown tensor dtype tag {tag!r}")
        self.tag = tag


class ChecksumError(ContainerError):
    def __init__(self, tensor: str):
        super().__init__(f"checksum mismatch in tensor {tensor!r}")
        self.tensor = tensor


class ManifestError(ContainerError):
    """Header, manifest and model spec disagree."""


def _tag(a: np.ndarray) -> str:
    if a.dtype == np.float16:
        return "f16"
    return "f32"


def _canonical(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=True).encode("ascii")


def encode(model: Model, optimizer: Optional[OptimizerState] = None) -> bytes:
    """Serialise to container bytes; identical inputs give identical bytes."""
    entries = list(model.params.items()) + list(model.buffers.items())
    if optimizer is not None:
        entries += [(OPT_PREFIX + k, v) for k, v in optimizer.velocity.items()]
    manifest = []
    chunks = []
    offset = 0
    for name, arr in entries:
        tag = _tag(arr) if not name.startswith(OPT_PREFIX) else "f32"
        data = np.ascontiguousarray(arr, dtype=DTYPES[tag]).tobytes()
        manifest.append({
            "name": name,
            "dtype": tag,
            "shape": [int(s) for s in arr.shape],
            "byte_offset": offset,
            "byte_length": len(data),
            "checksum": zlib.crc32(data) & 0xFFFFFFFF,
        })
        chunks.append(data)
        offset += len(data)
    header = {
        "format_version": FORMAT_VERSION,
        "model_spec": model.spec.to_dict(),
        "optimizer": optimizer.hyperparameters() if optimizer is not None else None,
        "tensors": manifest,
    }
    hb = _canonical(header)
    return MAGIC + struct.pack("<I", len(hb)) + hb + b"".join(chunks)


def save(model: Model, path, optimizer: Optional[OptimizerState] = None) -> None:
    """Write ``model`` (and optionally optimizer state) to ``path``."""
    if not str(path):
        raise ValueError("empty output path")
    blob = encode(model, optimizer)
    try:
        Path(path).write_bytes(blob)
    except OSError as exc:
        raise OSError(f"cannot write model container {str(path)!r}: {exc.strerror or exc}") from exc


def _parse_header(blob: bytes) -> Tuple[dict, memoryview]:
    if len(blob) < 8:
        raise TruncatedError(f"file is {len(blob)} bytes, too short for a container")
    if blob[:4] != MAGIC:
        raise BadMagicError(f"bad magic {bytes(blob[:4])!r}, expected {MAGIC!r}")
    (hlen,) = struct.unpack("<I", blob[4:8])
    if 8 + hlen > len(blob):
        raise TruncatedError(f"header claims {hlen} bytes but only {len(blob) - 8} remain")
    try:
        header = json.loads(blob[8:8 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ManifestError(f"header is not valid JSON: {exc}") from exc
    if not isinstance(header, dict):
        raise ManifestError("header must be a JSON object")
    version = header.get("format_version")
    if version != FORMAT_VERSION:
        raise VersionError(f"unsupported format_version {version!r}, expected {FORMAT_VERSION}")
    return header, memoryview(blob)[8 + hlen:]


def _read_tensors(header: dict, payload: memoryview) -> Dict[str, np.ndarray]:
    manifest = header.get("tensors")
    if not isinstance(manifest, list):
        raise ManifestError("header has no tensor manifest")
    tensors: Dict[str, np.ndarray] = {}
    spans = []
    for entry in manifest:
        try:
            name = entry["name"]
            tag = entry["dtype"]
            shape = tuple(int(s) for s in entry["shape"])
            off, length, crc = int(entry["byte_offset"]), int(entry["byte_length"]), int(entry["checksum"])
        except (KeyError, TypeError, ValueError) as exc:
            raise ManifestError(f"malformed manifest entry {entry!r}") from exc
        if name in tensors:
            raise ManifestError(f"duplicate tensor name {name!r}")
        if tag not in DTYPES:
            raise UnknownDtypeError(tag)
        dt = DTYPES[tag]
        if any(s < 0 for s in shape) or length != int(np.prod(shape, dtype=np.int64)) * dt.itemsize:
            raise ManifestError(f"tensor {name!r}: byte_length {length} does not match shape {list(shape)}")
        if off < 0:
            raise ManifestError(f"tensor {name!r}: negative byte_offset")
        if off + length > len(payload):
            raise TruncatedError(
                f"tensor {name!r} spans bytes {off}..{off + length} but payload has {len(payload)}"
            )
        data = payload[off:off + length]
        if zlib.crc32(data) & 0xFFFFFFFF != crc:
            raise ChecksumError(name)
        spans.append((off, off + length, name))
        tensors[name] = np.frombuffer(data, dtype=dt).reshape(shape).astype(dt.newbyteorder("="))
    spans.sort()
    for (a0, a1, an), (b0, b1, bn) in zip(spans, spans[1:]):
        if b0 < a1:
            raise ManifestError(f"tensors {an!r} and {bn!r} overlap")
    return tensors


def decode(blob: bytes) -> Tuple[Model, Optional[OptimizerState]]:
    """Parse and fully validate container bytes."""
    header, payload = _parse_header(blob)
    tensors = _read_tensors(header, payload)
    try:
        spec = ModelSpec.from_dict(header["model_spec"])
        spec.validate()
    except (KeyError, TypeError, SpecError) as exc:
        raise ManifestError(f"invalid model_spec: {exc}") from exc
    layout, buffer_layout = parameter_layout(spec)
    params, buffers = {}, {}
    for name, (shape, _) in layout.items():
        if name not in tensors:
            raise ManifestError(f"missing parameter tensor {name!r}")
        if tensors[name].shape != tuple(shape):
            raise ManifestError(f"parameter {name!r} has shape {tensors[name].shape}, spec says {shape}")
        params[name] = tensors.pop(name)
    for name, shape in buffer_layout.items():
        if name not in tensors:
            raise ManifestError(f"missing buffer tensor {name!r}")
        if tensors[name].shape != tuple(shape):
            raise ManifestError(f"buffer {name!r} has shape {tensors[name].shape}, spec says {shape}")
        if tensors[name].dtype != np.float32:
            raise ManifestError(f"buffer {name!r} must be f32")
        buffers[name] = tensors.pop(name)
    velocity = {}
    for name in list(tensors):
        if name.startswith(OPT_PREFIX) and name[len(OPT_PREFIX):] in params:
            pname = name[len(OPT_PREFIX):]
            if tensors[name].shape != params[pname].shape:
                raise ManifestError(f"velocity {name!r} does not match its parameter shape")
            velocity[pname] = tensors.pop(name)
    if tensors:
        raise ManifestError(f"unexpected tensors in container: {sorted(tensors)}")
    optimizer = None
    opt_header = header.get("optimizer")
    if opt_header is not None:
        try:
            optimizer = OptimizerState(velocity=velocity, **opt_header)
        except TypeError as exc:
            raise ManifestError(f"invalid optimizer block: {exc}") from exc
    elif velocity:
        raise ManifestError("velocity tensors present without an optimizer block")
    return Model(spec, params, buffers), optimizer


def load_checkpoint(path) -> Tuple[Model, Optional[OptimizerState]]:
    """Load a model and, when present, its optimizer state."""
    return decode(Path(path).read_bytes())


def load(path) -> Model:
    """Load and validate a model container."""
    return load_checkpoint(path)[0]
