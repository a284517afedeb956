"""Synthetic clip generator.

Renders moving geometric shapes over a flat background plane. Velocities
and start positions are integers and paths stay inside the canvas, so every
mask is a rigid translation of the first frame's mask and ground-truth
tracks are exact. Voxels are a fixed seeded linear projection of the clip's
downsampled pixels plus seeded noise, z-scored across the dataset, so a
decodable clip signature exists by construction.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .annotations import MockAnnotationClient, TaskAnnotations
from .config import ExperimentConfig
from .dataio import ClipDataset, ClipSample, FmriSample, VideoClip
from .rng import numpy_stream
from .taxonomy import ConceptTaxonomy, default_taxonomy, encode_concepts
from .text import COLORS, MOVING_VERBS, STATIC_VERB, CaptionTokenizer, compose_caption
from .tracks import ObjectTrack, discover_key_object, dominant_direction, tracks_from_masks

COLOR_RGB = {
    "red": (0.90, 0.12, 0.10),
    "green": (0.12, 0.78, 0.18),
    "blue": (0.15, 0.25, 0.90),
    "yellow": (0.92, 0.86, 0.12),
    "magenta": (0.85, 0.12, 0.80),
    "cyan": (0.10, 0.80, 0.85),
    "orange": (0.95, 0.55, 0.10),
    "white": (0.95, 0.95, 0.95),
}

BACKGROUND_RGB = {
    "landscape feature": (0.35, 0.42, 0.22),
    "water body": (0.10, 0.25, 0.45),
    "weather phenomenon": (0.55, 0.55, 0.60),
    "climate/atmosphere component": (0.55, 0.70, 0.90),
    "soil/substrate": (0.45, 0.33, 0.20),
}
_FALLBACK_BG_RGB = (0.40, 0.40, 0.40)

SHAPES = ("square", "disk", "triangle")
_DOWNSAMPLE = 8  # spatial grid for the voxel projection features


@dataclass
class SceneObject:
    name: str
    concept: str
    color_name: str
    shape: str
    half_extent: int
    start: tuple[int, int]  # (x, y)
    velocity: tuple[int, int]  # pixels per frame

    def center_at(self, frame: int) -> tuple[int, int]:
        return (self.start[0] + self.velocity[0] * frame,
                self.start[1] + self.velocity[1] * frame)


@dataclass
class SceneSpec:
    clip_id: str
    background: str
    objects: list[SceneObject]
    verb: str
    tracks: list[ObjectTrack]
    key_track_index: int
    caption: str


def rasterize(shape: str, center: tuple[int, int], half_extent: int,
              height: int, width: int) -> np.ndarray:
    """[H, W] uint8 footprint of one shape instance."""
    ys, xs = np.mgrid[0:height, 0:width]
    cx, cy = center
    s = half_extent
    if shape == "square":
        mask = (np.abs(xs - cx) <= s) & (np.abs(ys - cy) <= s)
    elif shape == "disk":
        mask = (xs - cx) ** 2 + (ys - cy) ** 2 <= s ** 2
    elif shape == "triangle":
        # half-width capped at s so the footprint stays inside the placement box
        dy = ys - cy
        mask = (dy >= -s) & (dy <= s) & (np.abs(xs - cx) <= np.minimum(dy + s, s))
    else:
        raise ValueError(f"unknown shape {shape!r}")
    return mask.astype(np.uint8)


def _render_frame(scene: SceneSpec, frame: int, height: int, width: int) -> np.ndarray:
    bg = np.asarray(BACKGROUND_RGB.get(scene.background, _FALLBACK_BG_RGB), dtype=np.float32)
    canvas = np.tile(bg[:, None, None], (1, height, width))
    # mild vertical shading keeps frames from being piecewise-constant
    shade = np.linspace(0.95, 1.05, height, dtype=np.float32)[None, :, None]
    canvas = np.clip(canvas * shade, 0.0, 1.0)
    for obj in scene.objects:
        mask = rasterize(obj.shape, obj.center_at(frame), obj.half_extent, height, width)
        rgb = np.asarray(COLOR_RGB[obj.color_name], dtype=np.float32)
        canvas[:, mask == 1] = rgb[:, None]
    return canvas


def render_scene(scene: SceneSpec, num_frames: int, height: int, width: int) -> np.ndarray:
    return np.stack([_render_frame(scene, f, height, width) for f in range(num_frames)])


def object_masks(scene: SceneSpec, num_frames: int, height: int, width: int) -> dict[str, np.ndarray]:
    """name -> [F, H, W] footprint stacks, plus the background plane."""
    stacks = {}
    for obj in scene.objects:
        stacks[obj.name] = np.stack([
            rasterize(obj.shape, obj.center_at(f), obj.half_extent, height, width)
            for f in range(num_frames)
        ])
    stacks["background"] = np.ones((num_frames, height, width), dtype=np.uint8)
    return stacks


def _sample_object(rng: np.random.Generator, idx: int, taxonomy: ConceptTaxonomy,
                   num_frames: int, height: int, width: int) -> SceneObject:
    concept = str(rng.choice(taxonomy.foreground_names()))
    color_name = str(rng.choice(COLORS))
    shape = str(rng.choice(SHAPES))
    # canvas-relative size: large enough to survive H/4 block-majority
    # downsampling, small enough (mean area < 0.5) to stay key-eligible
    side = min(height, width)
    half = int(rng.integers(max(2, side // 4), side // 3 + 1))
    span = num_frames - 1
    # fastest per-axis step whose full travel still fits inside the canvas
    vmax = min(2, max(0, (side - 1 - 2 * half) // max(span, 1)))
    moving = vmax > 0 and rng.random() < 0.8
    while True:
        if moving:
            v = (int(rng.integers(-vmax, vmax + 1)), int(rng.integers(-vmax, vmax + 1)))
            if v == (0, 0):
                continue
        else:
            v = (0, 0)
        lo_x = half + max(0, -v[0] * span)
        hi_x = width - 1 - half - max(0, v[0] * span)
        lo_y = half + max(0, -v[1] * span)
        hi_y = height - 1 - half - max(0, v[1] * span)
        if lo_x > hi_x or lo_y > hi_y:
            continue
        start = (int(rng.integers(lo_x, hi_x + 1)), int(rng.integers(lo_y, hi_y + 1)))
        return SceneObject(name=f"obj{idx}", concept=concept, color_name=color_name,
                           shape=shape, half_extent=half, start=start, velocity=v)


def sample_scene(rng: np.random.Generator, clip_id: str, taxonomy: ConceptTaxonomy,
                 num_frames: int, height: int, width: int, max_objects: int,
                 priority_multiplier: float = 2.0) -> SceneSpec:
    background = str(rng.choice(sorted(taxonomy.background)))
    n_objects = int(rng.integers(1, max_objects + 1))
    objects = [_sample_object(rng, i, taxonomy, num_frames, height, width)
               for i in range(n_objects)]

    concept_of = {o.name: o.concept for o in objects}
    concept_of["background"] = background
    stacks = object_masks(SceneSpec(clip_id, background, objects, "", [], -1, ""),
                          num_frames, height, width)
    tracks = tracks_from_masks(stacks, concept_of)

    key = discover_key_object(tracks, taxonomy, priority_multiplier)
    key_obj = objects[key.track_index]  # background is the last track, never selected here
    direction = dominant_direction(key)
    verb = STATIC_VERB if direction is None else str(rng.choice(MOVING_VERBS))
    caption = compose_caption(key_obj.color_name, key_obj.concept, verb, direction, background)
    return SceneSpec(clip_id=clip_id, background=background, objects=objects, verb=verb,
                     tracks=tracks, key_track_index=key.track_index, caption=caption)


def voxel_projection(rng: np.random.Generator, voxel_dim: int, feat_dim: int) -> np.ndarray:
    return (rng.standard_normal((voxel_dim, feat_dim)) / np.sqrt(feat_dim)).astype(np.float32)


def clip_features(frames: np.ndarray) -> np.ndarray:
    """Mean-pooled pixel features, [F * 3 * g * g] with g = 8."""
    f, c, h, w = frames.shape
    gh, gw = h // _DOWNSAMPLE, w // _DOWNSAMPLE
    pooled = frames.reshape(f, c, _DOWNSAMPLE, gh, _DOWNSAMPLE, gw).mean(axis=(3, 5))
    return pooled.reshape(-1).astype(np.float32)


def generate_synthetic_dataset(config: ExperimentConfig) -> ClipDataset:
    """Deterministic dataset from the config's root seed.

    The same config (seed included) always yields bit-identical arrays and,
    through save_dataset, bit-identical files.
    """
    d = config.data
    taxonomy = default_taxonomy(config.concepts.priority, config.concepts.background)
    tokenizer = CaptionTokenizer.default(config.model.vocab_size)
    rng = numpy_stream(config.seed, "data")

    scenes, frame_stacks, feature_rows = [], [], []
    for i in range(d.num_clips):
        scene = sample_scene(rng, f"clip_{i:03d}", taxonomy, d.frames, d.height, d.width,
                             d.max_objects, config.concepts.priority_multiplier)
        frames = render_scene(scene, d.frames, d.height, d.width)
        scenes.append(scene)
        frame_stacks.append(frames)
        feature_rows.append(clip_features(frames))

    feats = np.stack(feature_rows)  # [n, feat_dim]
    proj = voxel_projection(numpy_stream(config.seed, "data.projection"), d.voxel_dim,
                            feats.shape[1])
    noise_rng = numpy_stream(config.seed, "data.noise")
    raw = feats @ proj.T + d.noise_scale * noise_rng.standard_normal(
        (d.num_clips, d.voxel_dim)).astype(np.float32)
    mean = raw.mean(axis=0)
    std = raw.std(axis=0)
    voxels = ((raw - mean) / np.maximum(std, 1e-6)).astype(np.float32)

    samples = []
    for i, scene in enumerate(scenes):
        key_track = scene.tracks[scene.key_track_index]
        key_name = scene.objects[scene.key_track_index].name
        stacks = object_masks(scene, d.frames, d.height, d.width)
        concept_names = [o.concept for o in scene.objects] + [scene.background]
        ann = TaskAnnotations(
            key_object=key_track.concept,
            key_masks=stacks[key_name],
            concepts=encode_concepts(concept_names, taxonomy),
            caption_text=scene.caption,
            caption_tokens=tokenizer.encode(scene.caption),
        )
        ann.validate_against(taxonomy, tokenizer)
        samples.append(ClipSample(
            fmri=FmriSample(voxels=voxels[i], subject_id=1, clip_id=scene.clip_id),
            clip=VideoClip(frames=frame_stacks[i].astype(np.float32), clip_id=scene.clip_id),
            annotations=ann,
        ))

    meta = {
        "frames": d.frames, "height": d.height, "width": d.width,
        "voxel_dim": d.voxel_dim, "num_clips": d.num_clips, "seed": config.seed,
    }
    return ClipDataset(samples=samples, taxonomy=taxonomy, tokenizer=tokenizer,
                       meta=meta, scenes=scenes)


def make_annotation_client(dataset: ClipDataset) -> MockAnnotationClient:
    """Mock client answering for every frame the generator rendered."""
    if dataset.scenes is None:
        raise ValueError("dataset has no scene records; was it loaded from disk?")
    client = MockAnnotationClient()
    for sample, scene in zip(dataset.samples, dataset.scenes):
        num_frames, h, w = sample.clip.frames.shape[0], sample.clip.frames.shape[2], \
            sample.clip.frames.shape[3]
        stacks = object_masks(scene, num_frames, h, w)
        objects = [(o.name, o.concept) for o in scene.objects]
        objects.append(("background", scene.background))
        for f in range(num_frames):
            client.register_frame(
                sample.clip.frames[f], scene.caption, objects,
                {name: stacks[name][f] for name in stacks},
            )
    return client
