"""Deterministic seed derivation.

Every random draw in the package flows from one root seed through named
sub-streams ("data", "init", "mixco", "eval", ...). Stream seeds are derived
with sha256 so they are stable across platforms and python versions, and
per-epoch streams are derived statelessly so resuming from a checkpoint
replays the exact same draws.
"""

from __future__ import annotations

import hashlib

import numpy as np
import torch

_MASK64 = (1 << 64) - 1


def stream_seed(root_seed: int, name: str, index: int | None = None) -> int:
    """64-bit seed for the named sub-stream of ``root_seed``.

    ``index`` keys per-epoch (or per-sample) derivations, e.g.
    ``stream_seed(7, "mixco", epoch)``.
    """
    tag = f"{int(root_seed)}:{name}" if index is None else f"{int(root_seed)}:{name}:{int(index)}"
    digest = hashlib.sha256(tag.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little") & _MASK64


def numpy_stream(root_seed: int, name: str, index: int | None = None) -> np.random.Generator:
    return np.random.default_rng(stream_seed(root_seed, name, index))


def torch_stream(root_seed: int, name: str, index: int | None = None) -> torch.Generator:
    gen = torch.Generator()
    # torch.Generator.manual_seed takes a signed 64-bit value
    gen.manual_seed(stream_seed(root_seed, name, index) & 0x7FFF_FFFF_FFFF_FFFF)
    return gen


def seed_all(root_seed: int, name: str = "init") -> None:
    """Seed torch's global generator from a named stream.

    Module parameter initialization uses torch's global RNG; call this right
    before constructing models so init is reproducible.
    """
    torch.manual_seed(stream_seed(root_seed, name) & 0x7FFF_FFFF_FFFF_FFFF)
