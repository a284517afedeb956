"""The 51-class concept taxonomy and multi-hot encoding.

The ordered concept list ships as a data file; index positions are part of
the contract (classifier logits, multi-hot vectors, and tie-breaking all key
off them). Priority and background membership are overridable subsets.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from importlib import resources

import numpy as np

from .errors import ConfigError, ShapeError

NUM_CONCEPTS = 51


def _load_default_sets() -> dict:
    with resources.files("neurons.data").joinpath("concepts.json").open("r") as fh:
        return json.load(fh)


@dataclass(frozen=True)
class ConceptTaxonomy:
    """Ordered concept names plus priority/background membership.

    names: all 51 concepts, index = class id.
    priority: concepts whose tracks get the displacement multiplier.
    background: concepts excluded from key-object selection.
    """

    names: tuple[str, ...]
    priority: frozenset[str] = field(default_factory=frozenset)
    background: frozenset[str] = field(default_factory=frozenset)

    def __post_init__(self):
        if len(self.names) != NUM_CONCEPTS:
            raise ConfigError(f"taxonomy must have {NUM_CONCEPTS} concepts, got {len(self.names)}")
        if len(set(self.names)) != len(self.names):
            raise ConfigError("taxonomy names must be unique")
        for label, subset in (("priority", self.priority), ("background", self.background)):
            missing = sorted(subset - set(self.names))
            if missing:
                raise ConfigError(f"{label} set has unknown concept(s): {', '.join(missing)}")
        if self.priority & self.background:
            overlap = sorted(self.priority & self.background)
            raise ConfigError(f"priority and background sets overlap: {', '.join(overlap)}")

    def index(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise KeyError(f"unknown concept: {name!r}") from None

    def is_priority(self, name: str) -> bool:
        return name in self.priority

    def is_background(self, name: str) -> bool:
        return name in self.background

    def foreground_names(self) -> tuple[str, ...]:
        return tuple(n for n in self.names if n not in self.background)


def default_taxonomy(priority: list[str] | None = None,
                     background: list[str] | None = None) -> ConceptTaxonomy:
    """Taxonomy from the packaged data file, with optional set overrides."""
    data = _load_default_sets()
    return ConceptTaxonomy(
        names=tuple(data["concepts"]),
        priority=frozenset(data["priority"] if priority is None else priority),
        background=frozenset(data["background"] if background is None else background),
    )


def encode_concepts(names: list[str], taxonomy: ConceptTaxonomy) -> np.ndarray:
    """Multi-hot float32 vector of length 51; duplicates collapse to one hot.

    Unknown names raise KeyError.
    """
    vec = np.zeros(NUM_CONCEPTS, dtype=np.float32)
    for name in names:
        vec[taxonomy.index(name)] = 1.0
    return vec


def decode_concepts(vector: np.ndarray, taxonomy: ConceptTaxonomy) -> list[str]:
    """Names of the set bits of a multi-hot vector, in taxonomy order."""
    vector = np.asarray(vector)
    if vector.shape != (NUM_CONCEPTS,):
        raise ShapeError(f"expected shape ({NUM_CONCEPTS},), got {vector.shape}")
    return [taxonomy.names[i] for i in np.flatnonzero(vector > 0.5)]
