"""On-disk dataset format and in-memory sample types.

Layout, one directory per clip:

    <root>/dataset.json
    <root>/clip_000/frames/000.png .. 005.png   8-bit RGB
    <root>/clip_000/masks/000.png  .. 005.png   8-bit single channel, 0/255
    <root>/clip_000/annotations                 canonical JSON
    <root>/clip_000/voxels                      16-byte header + float32 LE

The voxel header is magic (8 bytes) + version (uint32 LE) + length
(uint32 LE). Loaders validate aggressively: wrong frame count, non-binary
masks, or a bad voxel header are format errors, not warnings.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .annotations import TaskAnnotations
from .config import canonical_json
from .errors import DataFormatError, ShapeError
from .taxonomy import ConceptTaxonomy, encode_concepts
from .text import CaptionTokenizer

VOXEL_MAGIC = b"NEURVOXL"
VOXEL_VERSION = 1
CLIP_FRAMES = 6


@dataclass
class FmriSample:
    """One preprocessed scan: z-scored float32 voxels tied to a clip."""

    voxels: np.ndarray  # [V] float32
    subject_id: int
    clip_id: str

    def __post_init__(self):
        v = np.asarray(self.voxels, dtype=np.float32)
        if v.ndim != 1:
            raise ShapeError(f"voxels must be 1-D, got {v.shape}")
        self.voxels = v


@dataclass
class VideoClip:
    """Fixed-length frame stack, float32 RGB in [0, 1]."""

    frames: np.ndarray  # [F, 3, H, W]
    clip_id: str

    def __post_init__(self):
        f = np.asarray(self.frames, dtype=np.float32)
        if f.ndim != 4 or f.shape[1] != 3:
            raise ShapeError(f"frames must be [F, 3, H, W], got {f.shape}")
        if f.shape[0] != CLIP_FRAMES:
            raise DataFormatError(f"clips are fixed at {CLIP_FRAMES} frames, got {f.shape[0]}")
        self.frames = f


@dataclass
class ClipSample:
    fmri: FmriSample
    clip: VideoClip
    annotations: TaskAnnotations


def write_voxels(path: Path, voxels: np.ndarray) -> None:
    voxels = np.asarray(voxels, dtype="<f4")
    if voxels.ndim != 1:
        raise ShapeError(f"voxels must be 1-D, got {voxels.shape}")
    header = VOXEL_MAGIC + struct.pack("<II", VOXEL_VERSION, voxels.shape[0])
    path.write_bytes(header + voxels.tobytes())


def read_voxels(path: Path) -> np.ndarray:
    blob = Path(path).read_bytes()
    if len(blob) < 16:
        raise DataFormatError(f"{path}: truncated voxel header")
    magic, version, length = blob[:8], *struct.unpack("<II", blob[8:16])
    if magic != VOXEL_MAGIC:
        raise DataFormatError(f"{path}: bad magic {magic!r}")
    if version != VOXEL_VERSION:
        raise DataFormatError(f"{path}: unsupported voxel format version {version}")
    payload = blob[16:]
    if len(payload) != 4 * length:
        raise DataFormatError(f"{path}: expected {4 * length} payload bytes, got {len(payload)}")
    return np.frombuffer(payload, dtype="<f4").copy()


def _save_png(path: Path, array: np.ndarray, mode: str) -> None:
    Image.fromarray(array, mode=mode).save(path, format="PNG", compress_level=6, optimize=False)


def frames_to_uint8(frames: np.ndarray) -> np.ndarray:
    """[F, 3, H, W] float in [0, 1] -> [F, H, W, 3] uint8."""
    return np.round(np.clip(frames, 0.0, 1.0) * 255.0).astype(np.uint8).transpose(0, 2, 3, 1)


def save_clip(clip_dir: Path, sample: ClipSample) -> None:
    frames_dir = clip_dir / "frames"
    masks_dir = clip_dir / "masks"
    frames_dir.mkdir(parents=True, exist_ok=True)
    masks_dir.mkdir(parents=True, exist_ok=True)

    for i, frame in enumerate(frames_to_uint8(sample.clip.frames)):
        _save_png(frames_dir / f"{i:03d}.png", frame, "RGB")
    for i in range(sample.annotations.key_masks.shape[0]):
        _save_png(masks_dir / f"{i:03d}.png",
                  sample.annotations.key_masks[i].astype(np.uint8) * 255, "L")

    ann = sample.annotations
    record = {
        "key_object": ann.key_object,
        "concepts": [int(i) for i in np.flatnonzero(ann.concepts > 0.5)],
        "caption": ann.caption_text,
    }
    (clip_dir / "annotations").write_text(canonical_json(record) + "\n")
    write_voxels(clip_dir / "voxels", sample.fmri.voxels)


def load_clip(clip_dir: Path, taxonomy: ConceptTaxonomy,
              tokenizer: CaptionTokenizer, subject_id: int = 1) -> ClipSample:
    clip_dir = Path(clip_dir)
    frame_paths = sorted((clip_dir / "frames").glob("*.png"))
    if len(frame_paths) != CLIP_FRAMES:
        raise DataFormatError(
            f"{clip_dir}: expected {CLIP_FRAMES} frames, found {len(frame_paths)}")
    frames = []
    for p in frame_paths:
        arr = np.asarray(Image.open(p).convert("RGB"), dtype=np.float32) / 255.0
        frames.append(arr.transpose(2, 0, 1))
    frames = np.stack(frames)

    mask_paths = sorted((clip_dir / "masks").glob("*.png"))
    if len(mask_paths) != CLIP_FRAMES:
        raise DataFormatError(f"{clip_dir}: expected {CLIP_FRAMES} masks, found {len(mask_paths)}")
    masks = []
    for p in mask_paths:
        arr = np.asarray(Image.open(p).convert("L"))
        bad = np.setdiff1d(np.unique(arr), [0, 255])
        if bad.size:
            raise DataFormatError(f"{p}: mask values must be 0/255, found {bad[:4].tolist()}")
        masks.append((arr == 255).astype(np.uint8))
    masks = np.stack(masks)

    try:
        record = json.loads((clip_dir / "annotations").read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise DataFormatError(f"{clip_dir}: bad annotations file: {exc}") from exc
    for key in ("key_object", "concepts", "caption"):
        if key not in record:
            raise DataFormatError(f"{clip_dir}: annotations missing '{key}'")

    concept_names = [taxonomy.names[i] for i in record["concepts"]]
    annotations = TaskAnnotations(
        key_object=record["key_object"],
        key_masks=masks,
        concepts=encode_concepts(concept_names, taxonomy),
        caption_text=record["caption"],
        caption_tokens=tokenizer.encode(record["caption"]),
    )
    annotations.validate_against(taxonomy, tokenizer)

    voxels = read_voxels(clip_dir / "voxels")
    clip_id = clip_dir.name
    return ClipSample(
        fmri=FmriSample(voxels=voxels, subject_id=subject_id, clip_id=clip_id),
        clip=VideoClip(frames=frames, clip_id=clip_id),
        annotations=annotations,
    )


@dataclass
class ClipDataset:
    """In-memory dataset; ``scenes`` is populated only by the generator."""

    samples: list[ClipSample]
    taxonomy: ConceptTaxonomy
    tokenizer: CaptionTokenizer
    meta: dict
    scenes: list | None = None

    def __len__(self) -> int:
        return len(self.samples)

    def voxel_matrix(self) -> np.ndarray:
        return np.stack([s.fmri.voxels for s in self.samples])

    def frame_tensor(self) -> np.ndarray:
        return np.stack([s.clip.frames for s in self.samples])


def save_dataset(dataset: ClipDataset, out_dir: Path) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for sample in dataset.samples:
        save_clip(out_dir / sample.clip.clip_id, sample)
    meta = dict(dataset.meta)
    meta["clip_ids"] = [s.clip.clip_id for s in dataset.samples]
    (out_dir / "dataset.json").write_text(canonical_json(meta) + "\n")


def dataset_codecs(config) -> tuple[ConceptTaxonomy, CaptionTokenizer]:
    """Taxonomy and tokenizer implied by an ExperimentConfig."""
    from .taxonomy import default_taxonomy

    return (default_taxonomy(config.concepts.priority, config.concepts.background),
            CaptionTokenizer.default(config.model.vocab_size))


def load_dataset(root: Path, taxonomy: ConceptTaxonomy | None = None,
                 tokenizer: CaptionTokenizer | None = None) -> ClipDataset:
    if taxonomy is None:
        from .taxonomy import default_taxonomy
        taxonomy = default_taxonomy()
    if tokenizer is None:
        tokenizer = CaptionTokenizer.default()
    root = Path(root)
    meta_path = root / "dataset.json"
    if not meta_path.exists():
        raise DataFormatError(f"{root}: missing dataset.json")
    meta = json.loads(meta_path.read_text())
    clip_dirs = sorted(d for d in root.iterdir() if d.is_dir() and d.name.startswith("clip_"))
    if not clip_dirs:
        raise DataFormatError(f"{root}: no clip directories")
    samples = [load_clip(d, taxonomy, tokenizer) for d in clip_dirs]
    dims = {s.fmri.voxels.shape[0] for s in samples}
    if len(dims) != 1:
        raise DataFormatError(f"{root}: inconsistent voxel dims {sorted(dims)}")
    return ClipDataset(samples=samples, taxonomy=taxonomy, tokenizer=tokenizer, meta=meta)
