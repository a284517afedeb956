"""Versioned checkpoint container.

Layout: magic (8 bytes) | version (uint32 LE) | header length (uint64 LE) |
canonical-JSON header | raw little-endian tensor payload | sha256 trailer.
Tensors are stored sorted by name and the header is canonical JSON, so
save -> load -> save is byte-identical. The trailing checksum makes
truncation or bit flips an integrity error rather than a silent misload.

Version history: v1 had no serialized RNG state; v2 (current) stores the
torch global generator state as a uint8 tensor under "rng.torch_global".
Loading a v1 file succeeds with a migration note.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .config import canonical_json
from .errors import DataFormatError, IntegrityError

MAGIC = b"NEURCKPT"
VERSION = 2

_DTYPES = {
    "float16": np.float16,
    "float32": np.float32,
    "float64": np.float64,
    "int32": np.int32,
    "int64": np.int64,
    "uint8": np.uint8,
    "bool": np.bool_,
}


@dataclass
class CheckpointState:
    """Everything a trainer needs to stop and resume exactly."""

    kind: str  # "brain" | "decoupler"
    epoch: int
    config: dict
    tensors: dict[str, np.ndarray] = field(default_factory=dict)
    param_groups: list | None = None
    meta: dict = field(default_factory=dict)
    migration_note: str | None = None


def _dtype_name(arr: np.ndarray) -> str:
    name = arr.dtype.name
    if name not in _DTYPES:
        raise DataFormatError(f"unsupported tensor dtype {name}")
    return name


def save_checkpoint(state: CheckpointState, path: Path) -> str:
    """Write the container; returns the file's sha256 hex digest."""
    names = sorted(state.tensors)
    index = []
    payload = bytearray()
    for name in names:
        # asarray(order="C"), not ascontiguousarray: the latter promotes 0-dim to 1-D
        arr = np.asarray(state.tensors[name], order="C")
        if arr.dtype.byteorder == ">":
            arr = arr.astype(arr.dtype.newbyteorder("<"))
        index.append({"name": name, "dtype": _dtype_name(arr), "shape": list(arr.shape)})
        payload.extend(arr.tobytes())

    header = {
        "kind": state.kind,
        "epoch": int(state.epoch),
        "config": state.config,
        "meta": state.meta,
        "param_groups": state.param_groups,
        "tensors": index,
    }
    header_bytes = canonical_json(header).encode("utf-8")
    body = MAGIC + struct.pack("<I", VERSION) + struct.pack("<Q", len(header_bytes))
    body += header_bytes + bytes(payload)
    digest = hashlib.sha256(body).digest()

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(body + digest)
    tmp.replace(path)
    return hashlib.sha256(body + digest).hexdigest()


def file_sha256(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def load_checkpoint(path: Path, expected_kind: str | None = None) -> CheckpointState:
    blob = Path(path).read_bytes()
    if len(blob) < 8 + 4 + 8 + 32:
        raise IntegrityError(f"{path}: file too short to be a checkpoint")
    if blob[:8] != MAGIC:
        raise DataFormatError(f"{path}: bad magic {blob[:8]!r}")
    version = struct.unpack("<I", blob[8:12])[0]
    if version > VERSION or version < 1:
        raise DataFormatError(
            f"{path}: checkpoint version {version} not supported (reader supports 1..{VERSION})")

    body, digest = blob[:-32], blob[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise IntegrityError(f"{path}: checksum mismatch (corrupt or truncated)")

    header_len = struct.unpack("<Q", blob[12:20])[0]
    header_end = 20 + header_len
    if header_end > len(body):
        raise IntegrityError(f"{path}: header extends past payload")
    try:
        header = json.loads(body[20:header_end].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DataFormatError(f"{path}: bad header: {exc}") from exc

    tensors: dict[str, np.ndarray] = {}
    offset = header_end
    for entry in header["tensors"]:
        dtype = _DTYPES[entry["dtype"]]
        shape = tuple(entry["shape"])
        nbytes = int(np.dtype(dtype).itemsize * int(np.prod(shape, dtype=np.int64)))
        chunk = body[offset:offset + nbytes]
        if len(chunk) != nbytes:
            raise IntegrityError(f"{path}: tensor payload for {entry['name']} truncated")
        arr = np.frombuffer(chunk, dtype=np.dtype(dtype).newbyteorder("<")).copy()
        tensors[entry["name"]] = arr.astype(dtype, copy=False).reshape(shape)
        offset += nbytes
    if offset != len(body):
        raise IntegrityError(f"{path}: {len(body) - offset} unexplained trailing bytes")

    note = None
    if version == 1:
        note = "migrated v1 checkpoint: no serialized RNG state; streams re-derived from seed"

    state = CheckpointState(
        kind=header["kind"], epoch=header["epoch"], config=header["config"],
        tensors=tensors, param_groups=header.get("param_groups"),
        meta=header.get("meta", {}), migration_note=note,
    )
    if expected_kind is not None and state.kind != expected_kind:
        raise DataFormatError(f"{path}: expected a {expected_kind} checkpoint, got {state.kind}")
    return state


# torch <-> container helpers

def pack_module(prefix: str, module: torch.nn.Module) -> dict[str, np.ndarray]:
    out = {}
    for name, tensor in module.state_dict().items():
        out[f"{prefix}.{name}"] = tensor.detach().cpu().contiguous().numpy().copy()
    return out


def unpack_module(prefix: str, tensors: dict[str, np.ndarray], module: torch.nn.Module) -> None:
    state = {}
    skip = len(prefix) + 1
    for name, arr in tensors.items():
        if name.startswith(prefix + "."):
            state[name[skip:]] = torch.from_numpy(np.asarray(arr, order="C"))
    missing = set(module.state_dict()) - set(state)
    if missing:
        raise DataFormatError(f"checkpoint missing parameters under '{prefix}': {sorted(missing)[:4]}")
    module.load_state_dict(state)


def pack_optimizer(prefix: str, optim: torch.optim.Optimizer) -> tuple[dict[str, np.ndarray], list]:
    sd = optim.state_dict()
    tensors = {}
    scalar_state = {}
    for pid, bucket in sd["state"].items():
        for key, value in bucket.items():
            if isinstance(value, torch.Tensor):
                tensors[f"{prefix}.{pid}.{key}"] = value.detach().cpu().contiguous().numpy().copy()
            else:
                scalar_state[f"{pid}.{key}"] = value
    groups = json.loads(json.dumps(sd["param_groups"]))  # tuples -> lists, json-safe
    return tensors, [groups, scalar_state]


def unpack_optimizer(prefix: str, tensors: dict[str, np.ndarray], param_groups: list,
                     optim: torch.optim.Optimizer) -> None:
    groups, scalar_state = param_groups
    state: dict[int, dict] = {}
    skip = len(prefix) + 1
    for name, arr in tensors.items():
        if not name.startswith(prefix + "."):
            continue
        pid_str, key = name[skip:].split(".", 1)
        state.setdefault(int(pid_str), {})[key] = torch.from_numpy(np.asarray(arr, order="C"))
    for flat_key, value in scalar_state.items():
        pid_str, key = flat_key.split(".", 1)
        state.setdefault(int(pid_str), {})[key] = value
    optim.load_state_dict({"state": state, "param_groups": groups})


def torch_rng_tensor() -> np.ndarray:
    return torch.get_rng_state().numpy().copy()


def restore_torch_rng(arr: np.ndarray) -> None:
    torch.set_rng_state(torch.from_numpy(np.ascontiguousarray(arr)))
