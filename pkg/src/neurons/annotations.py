"""Per-clip task annotations and the annotation-client seam.

A client (a captioner + detector + segmenter in production, a deterministic
mock here) is queried per frame; responses are assembled into object tracks,
the key object is selected, and everything needed by the four training tasks
is packed into one TaskAnnotations record.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Protocol

import numpy as np

from .errors import ShapeError
from .taxonomy import NUM_CONCEPTS, ConceptTaxonomy, encode_concepts
from .text import CaptionTokenizer
from .tracks import discover_key_object, tracks_from_masks


@dataclass
class TaskAnnotations:
    """Ground truth for one clip across all four sub-tasks.

    key_object: concept name of the selected key object.
    key_masks: [F, H, W] uint8 in {0, 1}.
    concepts: [51] float32 multi-hot over the taxonomy.
    caption_tokens: tokenizer encoding of caption_text (no specials).
    """

    key_object: str
    key_masks: np.ndarray
    concepts: np.ndarray
    caption_text: str
    caption_tokens: list[int]

    def __post_init__(self):
        masks = np.asarray(self.key_masks)
        if masks.ndim != 3:
            raise ShapeError(f"key_masks must be [F, H, W], got {masks.shape}")
        vals = np.unique(masks)
        if not np.all(np.isin(vals, (0, 1))):
            raise ValueError("key_masks must be binary {0, 1}")
        self.key_masks = masks.astype(np.uint8)
        concepts = np.asarray(self.concepts, dtype=np.float32)
        if concepts.shape != (NUM_CONCEPTS,):
            raise ShapeError(f"concepts must be [{NUM_CONCEPTS}], got {concepts.shape}")
        if not np.all(np.isin(concepts, (0.0, 1.0))):
            raise ValueError("concepts must be multi-hot {0, 1}")
        self.concepts = concepts

    def validate_against(self, taxonomy: ConceptTaxonomy, tokenizer: CaptionTokenizer) -> None:
        """Cross-field checks that need external vocabularies."""
        idx = taxonomy.index(self.key_object)
        if self.concepts[idx] != 1.0:
            raise ValueError(f"key object {self.key_object!r} missing from concept vector")
        if list(self.caption_tokens) != tokenizer.encode(self.caption_text):
            raise ValueError("caption_tokens do not round-trip with caption_text")


class AnnotationClient(Protocol):
    """Frame-level annotation source. Frames are [3, H, W] float32 in [0, 1]."""

    def caption(self, frame: np.ndarray) -> str: ...

    def detect_objects(self, frame: np.ndarray) -> list[tuple[str, str]]:
        """(instance_name, concept) pairs for one frame."""
        ...

    def segment(self, frame: np.ndarray, instance_name: str) -> np.ndarray:
        """[H, W] binary mask for the named instance (empty if absent)."""
        ...


def frame_fingerprint(frame: np.ndarray) -> str:
    """Quantized content hash; stable across float/uint8 round trips."""
    arr = np.asarray(frame)
    if arr.dtype != np.uint8:
        arr = np.round(np.clip(arr, 0.0, 1.0) * 255.0).astype(np.uint8)
    return hashlib.sha256(arr.tobytes()).hexdigest()


@dataclass
class _FrameRecord:
    caption: str
    objects: list[tuple[str, str]]
    masks: dict[str, np.ndarray]


class MockAnnotationClient:
    """Deterministic client backed by a fingerprint -> record table."""

    def __init__(self):
        self._records: dict[str, _FrameRecord] = {}

    def register_frame(self, frame: np.ndarray, caption: str,
                       objects: list[tuple[str, str]],
                       masks: dict[str, np.ndarray]) -> None:
        self._records[frame_fingerprint(frame)] = _FrameRecord(
            caption=caption, objects=list(objects),
            masks={k: (np.asarray(v) > 0).astype(np.uint8) for k, v in masks.items()},
        )

    def _lookup(self, frame: np.ndarray) -> _FrameRecord:
        key = frame_fingerprint(frame)
        if key not in self._records:
            raise KeyError("frame not registered with mock annotation client")
        return self._records[key]

    def caption(self, frame: np.ndarray) -> str:
        return self._lookup(frame).caption

    def detect_objects(self, frame: np.ndarray) -> list[tuple[str, str]]:
        return list(self._lookup(frame).objects)

    def segment(self, frame: np.ndarray, instance_name: str) -> np.ndarray:
        record = self._lookup(frame)
        if instance_name in record.masks:
            return record.masks[instance_name]
        h, w = frame.shape[-2], frame.shape[-1]
        return np.zeros((h, w), dtype=np.uint8)


def build_annotations(frames: np.ndarray, client: AnnotationClient,
                      taxonomy: ConceptTaxonomy, tokenizer: CaptionTokenizer,
                      priority_multiplier: float = 2.0,
                      clip_id: str = "?") -> TaskAnnotations:
    """Query the client per frame and assemble TaskAnnotations.

    The caption comes from the middle frame (index F // 2). Client failures
    propagate wrapped with the clip id.
    """
    frames = np.asarray(frames)
    if frames.ndim != 4 or frames.shape[1] != 3:
        raise ShapeError(f"frames must be [F, 3, H, W], got {frames.shape}")
    num_frames = frames.shape[0]

    try:
        caption = client.caption(frames[num_frames // 2])

        # first-seen instance order fixes track indices
        order: list[str] = []
        concept_of: dict[str, str] = {}
        per_frame_objects: list[list[str]] = []
        for f in range(num_frames):
            present = []
            for name, concept in client.detect_objects(frames[f]):
                present.append(name)
                if name not in concept_of:
                    order.append(name)
                    concept_of[name] = concept
            per_frame_objects.append(present)

        if not order:
            raise ValueError(f"clip {clip_id}: no objects detected in any frame")

        mask_stacks: dict[str, np.ndarray] = {}
        for name in order:
            stack = np.stack([
                np.asarray(client.segment(frames[f], name), dtype=np.uint8)
                for f in range(num_frames)
            ])
            mask_stacks[name] = stack
    except ValueError:
        raise
    except Exception as exc:
        raise RuntimeError(f"annotation client failed on clip {clip_id}: {exc}") from exc

    all_tracks = tracks_from_masks(mask_stacks, concept_of)
    key_track = discover_key_object(all_tracks, taxonomy, priority_multiplier)
    key_name = order[key_track.track_index]

    ann = TaskAnnotations(
        key_object=key_track.concept,
        key_masks=mask_stacks[key_name],
        concepts=encode_concepts([concept_of[n] for n in order], taxonomy),
        caption_text=caption,
        caption_tokens=tokenizer.encode(caption),
    )
    ann.validate_against(taxonomy, tokenizer)
    return ann
