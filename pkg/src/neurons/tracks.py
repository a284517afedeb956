"""Object tracks and key-object selection.

A clip's objects are summarized as tracks (per-frame centroid + area). The
key object is the track a viewer would follow: background classes are
excluded, oversized regions are excluded, classes like humans and animals
get a motion bonus, and the most-displaced survivor wins.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ShapeError
from .taxonomy import ConceptTaxonomy

# tracks whose mean area exceeds this fraction of the canvas are treated as
# scenery rather than objects
MAX_KEY_AREA = 0.5


@dataclass(frozen=True)
class ObjectTrack:
    """One object followed across all frames of a clip.

    centroids: [F, 2] pixel coordinates (x, y).
    areas: [F] mask area as a fraction of the canvas in [0, 1].
    """

    track_index: int
    concept: str
    centroids: np.ndarray
    areas: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.centroids, dtype=np.float64)
        a = np.asarray(self.areas, dtype=np.float64)
        if c.ndim != 2 or c.shape[1] != 2:
            raise ShapeError(f"centroids must be [F, 2], got {c.shape}")
        if a.shape != (c.shape[0],):
            raise ShapeError(f"areas must be [F={c.shape[0]}], got {a.shape}")
        if np.any(a < 0) or np.any(a > 1):
            raise ValueError("areas must be fractions in [0, 1]")
        object.__setattr__(self, "centroids", c)
        object.__setattr__(self, "areas", a)

    @property
    def num_frames(self) -> int:
        return self.centroids.shape[0]

    def mean_area(self) -> float:
        return float(self.areas.mean())


def weighted_displacement(track: ObjectTrack, taxonomy: ConceptTaxonomy,
                          priority_multiplier: float = 2.0) -> float:
    """Total centroid path length, doubled (by default) for priority classes.

    Sum of euclidean distances between consecutive centroids, multiplied by
    ``priority_multiplier`` when the track's concept is in the priority set.
    A single-frame track has no displacement and is rejected.
    """
    if track.num_frames < 2:
        raise ValueError(f"track {track.track_index} has {track.num_frames} frame(s); need >= 2")
    deltas = np.diff(track.centroids, axis=0)
    total = float(np.sqrt((deltas ** 2).sum(axis=1)).sum())
    if taxonomy.is_priority(track.concept):
        total *= priority_multiplier
    return total


def _pick(tracks: list[ObjectTrack], key) -> ObjectTrack:
    # min over (primary, taxonomy index, track index) realizes the tie order
    return min(tracks, key=key)


def discover_key_object(tracks: list[ObjectTrack], taxonomy: ConceptTaxonomy,
                        priority_multiplier: float = 2.0) -> ObjectTrack:
    """Select the clip's key object.

    Rules, in order:
      1. drop tracks whose concept is in the background set;
      2. drop tracks whose mean area exceeds half the canvas;
      3. if any surviving track has a priority concept, choose the priority
         track with the highest weighted displacement, otherwise the highest
         weighted displacement among all survivors;
      4. if nothing survives, fall back to the largest background track
         (largest track overall when the scene has no background tracks).

    All ties break by lowest taxonomy index, then lowest track index.
    """
    if not tracks:
        raise ValueError("no tracks to select from")

    survivors = [
        t for t in tracks
        if not taxonomy.is_background(t.concept) and t.mean_area() <= MAX_KEY_AREA
    ]
    if survivors:
        priority = [t for t in survivors if taxonomy.is_priority(t.concept)]
        pool = priority if priority else survivors
        return _pick(pool, key=lambda t: (
            -weighted_displacement(t, taxonomy, priority_multiplier),
            taxonomy.index(t.concept),
            t.track_index,
        ))

    background = [t for t in tracks if taxonomy.is_background(t.concept)]
    pool = background if background else list(tracks)
    return _pick(pool, key=lambda t: (
        -t.mean_area(),
        taxonomy.index(t.concept),
        t.track_index,
    ))


def mask_centroid_and_area(mask: np.ndarray) -> tuple[tuple[float, float], float]:
    """(x, y) centroid in pixels and area fraction of one binary mask.

    An empty mask centers on the canvas midpoint with area 0.
    """
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise ShapeError(f"mask must be [H, W], got {mask.shape}")
    h, w = mask.shape
    ys, xs = np.nonzero(mask)
    if len(xs) == 0:
        return ((w - 1) / 2.0, (h - 1) / 2.0), 0.0
    return (float(xs.mean()), float(ys.mean())), len(xs) / float(h * w)


def tracks_from_masks(per_object_masks: dict[str, np.ndarray],
                      concepts: dict[str, str]) -> list[ObjectTrack]:
    """Assemble tracks from per-object mask stacks.

    per_object_masks: name -> [F, H, W] binary stack.
    concepts: name -> concept. Track indices follow insertion order of
    ``per_object_masks``.
    """
    tracks = []
    for idx, (name, stack) in enumerate(per_object_masks.items()):
        stack = np.asarray(stack)
        if stack.ndim != 3:
            raise ShapeError(f"mask stack for {name!r} must be [F, H, W], got {stack.shape}")
        cents, areas = [], []
        for f in range(stack.shape[0]):
            (cx, cy), area = mask_centroid_and_area(stack[f])
            cents.append((cx, cy))
            areas.append(area)
        tracks.append(ObjectTrack(
            track_index=idx,
            concept=concepts[name],
            centroids=np.asarray(cents, dtype=np.float64),
            areas=np.asarray(areas, dtype=np.float64),
        ))
    return tracks


def dominant_direction(track: ObjectTrack) -> str | None:
    """left/right/upward/downward by the largest net centroid component.

    None when the track does not move. Image y grows downward, so a negative
    net dy is "upward". Horizontal wins exact diagonal ties.
    """
    net = track.centroids[-1] - track.centroids[0]
    dx, dy = float(net[0]), float(net[1])
    if math.isclose(dx, 0.0, abs_tol=1e-9) and math.isclose(dy, 0.0, abs_tol=1e-9):
        return None
    if abs(dx) >= abs(dy):
        return "right" if dx > 0 else "left"
    return "downward" if dy > 0 else "upward"
