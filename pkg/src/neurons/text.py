"""Caption grammar and the fixed whitespace tokenizer.

Captions come from a tiny closed grammar ("a red mammal drifting left over
the water body"), so a fixed word list covers every sentence the synthetic
annotator can produce. Token ids 0/1/2/3 are pad/bos/eos/unk; the remaining
ids are the sorted grammar words. The id table never changes at runtime.
"""

from __future__ import annotations

import json
from importlib import resources

from .errors import ConfigError

COLORS = ("red", "green", "blue", "yellow", "magenta", "cyan", "orange", "white")
MOVING_VERBS = ("moving", "drifting", "sliding")
STATIC_VERB = "resting"
DIRECTIONS = ("left", "right", "upward", "downward")
_FUNCTION_WORDS = ("a", "over", "the")


def _grammar_words() -> tuple[str, ...]:
    with resources.files("neurons.data").joinpath("concepts.json").open("r") as fh:
        concept_names = json.load(fh)["concepts"]
    words: set[str] = set(_FUNCTION_WORDS)
    words.update(COLORS)
    words.update(MOVING_VERBS)
    words.add(STATIC_VERB)
    words.update(DIRECTIONS)
    for name in concept_names:
        words.update(name.split())
    return tuple(sorted(words))


class CaptionTokenizer:
    """Whitespace tokenizer over the fixed grammar vocabulary."""

    PAD = 0
    BOS = 1
    EOS = 2
    UNK = 3

    def __init__(self, words: tuple[str, ...], vocab_size: int = 512):
        if len(words) + 4 > vocab_size:
            raise ConfigError(f"vocab_size {vocab_size} too small for {len(words)} words")
        if len(set(words)) != len(words):
            raise ConfigError("tokenizer word list has duplicates")
        self.vocab_size = vocab_size
        self.words = words
        self._word_to_id = {w: i + 4 for i, w in enumerate(words)}
        self._id_to_word = {i + 4: w for i, w in enumerate(words)}

    @classmethod
    def default(cls, vocab_size: int = 512) -> "CaptionTokenizer":
        return cls(_grammar_words(), vocab_size=vocab_size)

    def encode(self, text: str) -> list[int]:
        """Token ids for a caption; out-of-vocabulary words map to UNK."""
        return [self._word_to_id.get(w, self.UNK) for w in text.split()]

    def decode(self, ids: list[int]) -> str:
        """Inverse of encode for in-vocabulary ids; specials are dropped."""
        out = []
        for i in ids:
            if i in (self.PAD, self.BOS, self.EOS):
                continue
            out.append(self._id_to_word.get(int(i), "<unk>"))
        return " ".join(out)


def compose_caption(color: str, concept: str, verb: str,
                    direction: str | None, background: str) -> str:
    """Deterministic caption for one scene.

    Static scenes ("resting") carry no direction phrase.
    """
    if direction is None:
        return f"a {color} {concept} {verb} over the {background}"
    return f"a {color} {concept} {verb} {direction} over the {background}"
