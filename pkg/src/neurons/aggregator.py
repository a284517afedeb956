"""Turns head outputs into conditioning signals and drives video generation.

For one fMRI sample: the classifier head picks the top concept, whose text
embedding conditions the segmentation decoder; predicted masks are rescaled
to [0.5, 1] and multiplied into both the blurry video (decoded rec-head
latents) and the control image (generated from the blurry middle frame).
The caption decoder supplies the prompt. A pluggable text-to-video backend
consumes prompt + control image + blurry video and emits the final clip,
resampled from 3 FPS to 8 FPS.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .config import ExperimentConfig, config_hash
from .dataio import FmriSample, frames_to_uint8, _save_png
from .errors import ReconstructionError, ShapeError
from .taxonomy import ConceptTaxonomy, default_taxonomy
from .text import CaptionTokenizer

log = logging.getLogger(__name__)

KEYFRAME_DIVISOR = 2  # keyframe = frames[len // 2]


def rescale_mask(mask: np.ndarray) -> np.ndarray:
    """Affine map [0,1] -> [0.5,1]: background 0.5, key object 1.0."""
    m = np.asarray(mask, dtype=np.float64)
    if m.size and (m.min() < 0.0 or m.max() > 1.0):
        raise ValueError(f"mask values must lie in [0,1], got "
                         f"[{m.min():.4g}, {m.max():.4g}]")
    return (0.5 + 0.5 * m).astype(np.float32)


def apply_mask_condition(signal: np.ndarray, masks: np.ndarray) -> np.ndarray:
    """Elementwise product of a signal with (already rescaled) masks.

    Accepts a video [F, 3, H, W] with masks [F, H, W], or a control image
    [H, W, 3] with one mask [H, W].
    """
    signal = np.asarray(signal, dtype=np.float64)
    masks = np.asarray(masks, dtype=np.float64)
    if signal.ndim == 4 and masks.ndim == 3:
        if signal.shape[0] != masks.shape[0] or signal.shape[2:] != masks.shape[1:]:
            raise ShapeError(f"video {signal.shape} vs masks {masks.shape}")
        out = signal * masks[:, None]
    elif signal.ndim == 3 and masks.ndim == 2:
        if signal.shape[:2] != masks.shape:
            raise ShapeError(f"image {signal.shape} vs mask {masks.shape}")
        out = signal * masks[:, :, None]
    else:
        raise ShapeError(f"unsupported signal/mask ranks: {signal.shape} / {masks.shape}")
    return out.astype(np.float32)


def interpolate_fps(video: np.ndarray, source_fps: float = 3.0, target_fps: float = 8.0,
                    num_frames: int | None = None) -> np.ndarray:
    """Linear pixel-space resampling to uniform target timestamps.

    Output length is round(F * target_fps / source_fps) unless num_frames
    overrides it; endpoints land exactly on the first and last input frame.
    """
    video = np.asarray(video, dtype=np.float64)
    if video.ndim != 4:
        raise ShapeError(f"video must be [F, C, H, W], got {video.shape}")
    f = video.shape[0]
    if f < 2:
        raise ValueError("need at least 2 frames to interpolate")
    m = int(round(f * target_fps / source_fps)) if num_frames is None else int(num_frames)
    if m < 2:
        raise ValueError(f"target frame count must be >= 2, got {m}")
    positions = (f - 1) * np.arange(m) / (m - 1)
    lo = np.floor(positions).astype(int)
    hi = np.minimum(lo + 1, f - 1)
    frac = (positions - lo).reshape(m, 1, 1, 1)
    out = (1.0 - frac) * video[lo] + frac * video[hi]
    return out.astype(np.float32)


@dataclass
class ConditioningBundle:
    """Everything handed to the video generator, persisted for audit."""

    control_image: np.ndarray  # [H, W, 3] in [0,1]
    blurry_video: np.ndarray  # [F, 3, H, W] in [0,1]
    rescaled_masks: np.ndarray  # [F, H, W] in [0.5,1]
    prompt: str
    top_concept: str
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.prompt or not self.prompt.strip():
            raise ValueError("prompt must be non-empty")
        if self.control_image.ndim != 3 or self.control_image.shape[2] != 3:
            raise ShapeError(f"control image must be [H, W, 3], got {self.control_image.shape}")
        if self.blurry_video.ndim != 4 or self.blurry_video.shape[1] != 3:
            raise ShapeError(f"blurry video must be [F, 3, H, W], got {self.blurry_video.shape}")
        if self.rescaled_masks.shape != (self.blurry_video.shape[0],
                                         *self.blurry_video.shape[2:]):
            raise ShapeError(f"masks {self.rescaled_masks.shape} inconsistent with "
                             f"video {self.blurry_video.shape}")
        lo, hi = float(self.rescaled_masks.min()), float(self.rescaled_masks.max())
        if lo < 0.5 - 1e-6 or hi > 1.0 + 1e-6:
            raise ValueError(f"rescaled masks must lie in [0.5,1], got [{lo:.4g}, {hi:.4g}]")


def build_prompt(cls_logits: torch.Tensor, txt_head, e_txt: torch.Tensor,
                 taxonomy: ConceptTaxonomy, tokenizer: CaptionTokenizer,
                 max_len: int = 32) -> tuple[str, str, bool]:
    """(top concept name, decoded prompt, truncated flag) for one sample.

    If greedy decoding emits nothing before EOS the concept name itself
    becomes the prompt, keeping the bundle's non-empty guarantee.
    """
    if cls_logits.ndim != 1:
        raise ShapeError(f"cls_logits must be [num_concepts], got {tuple(cls_logits.shape)}")
    top_concept = taxonomy.names[int(torch.argmax(cls_logits).item())]
    token_rows, truncated = txt_head.greedy_decode(e_txt[None] if e_txt.ndim == 2 else e_txt,
                                                   max_len=max_len)
    prompt = tokenizer.decode(token_rows[0])
    if not prompt.strip():
        prompt = top_concept
    return top_concept, prompt, truncated


def _upsample_masks(mask_probs: torch.Tensor, height: int, width: int,
                    threshold: float) -> np.ndarray:
    """[F, 1, h, w] sigmoid outputs -> binary [F, H, W] at full resolution."""
    up = torch.nn.functional.interpolate(mask_probs, size=(height, width),
                                         mode="bilinear", align_corners=False)
    return (up[:, 0].detach().numpy() >= threshold).astype(np.float32)


class Reconstructor:
    """Read-only inference wrapper over trained brain + decoupler weights."""

    def __init__(self, brain_model, heads, config: ExperimentConfig, backend,
                 frozen=None, latent_coder=None, unclip=None,
                 taxonomy: ConceptTaxonomy | None = None,
                 tokenizer: CaptionTokenizer | None = None, lineage: dict | None = None):
        from .backends import FrozenEncoderStub, LatentCoderStub, UnclipStub

        self.brain_model = brain_model.eval()
        self.heads = heads.eval()
        self.config = config
        self.backend = backend
        self.frozen = frozen or FrozenEncoderStub.from_config(config)
        self.latent_coder = latent_coder or LatentCoderStub.from_config(config)
        self.unclip = unclip or UnclipStub()
        self.taxonomy = taxonomy or default_taxonomy(config.concepts.priority,
                                                     config.concepts.background)
        self.tokenizer = tokenizer or CaptionTokenizer.default(config.model.vocab_size)
        self.lineage = lineage or {}

    @classmethod
    def from_checkpoints(cls, brain_ckpt: Path, decoupler_ckpt: Path,
                         config: ExperimentConfig | None = None, backend=None,
                         **kwargs) -> "Reconstructor":
        """Load both checkpoints; the decoupler's fine-tuned prior overrides
        the pretraining prior. A lineage hash mismatch only warns: pairing
        checkpoints across runs is allowed, just recorded."""
        from .backends import resolve_t2v_backend
        from .brain import load_brain_model
        from .checkpoint import file_sha256, unpack_module
        from .config import config_from_dict
        from .decoupler import load_decoupler_heads

        heads, dec_state = load_decoupler_heads(decoupler_ckpt, config)
        cfg = config if config is not None else config_from_dict(dec_state.config)
        brain_model, _ = load_brain_model(brain_ckpt, cfg)
        unpack_module("prior", dec_state.tensors, brain_model.prior)
        brain_sha = file_sha256(brain_ckpt)
        recorded = dec_state.meta.get("brain_checkpoint_sha256")
        if recorded and recorded != brain_sha:
            log.warning("decoupler was trained against a different brain checkpoint "
                        "(%s... vs %s...)", recorded[:12], brain_sha[:12])
        if backend is None:
            backend = resolve_t2v_backend(cfg.infer.backend, cfg)
        lineage = {"brain_checkpoint_sha256": brain_sha,
                   "decoupler_checkpoint_sha256": file_sha256(decoupler_ckpt),
                   "decoupler_recorded_brain": recorded}
        return cls(brain_model, heads, cfg, backend, lineage=lineage, **kwargs)

    @torch.no_grad()
    def conditioning(self, sample: FmriSample) -> ConditioningBundle:
        """Run backbone + heads for one sample and assemble the bundle."""
        cfg = self.config
        voxels = torch.from_numpy(sample.voxels[None])
        bundle = self.brain_model(voxels)

        logits = self.heads.cls.logits(bundle.e_vid)[0]
        top_concept, prompt, truncated = build_prompt(
            logits, self.heads.txt, bundle.e_txt, self.taxonomy, self.tokenizer,
            max_len=cfg.decoupler.max_caption_len)

        class_emb = torch.from_numpy(self.frozen.text_embed(top_concept)[None])
        e_seg = self.heads.decoder.cross_attend(bundle.e_vid, class_emb)
        mask_probs = self.heads.decoder.seg_forward(e_seg)[0]  # [F, 1, h, w]
        binary = _upsample_masks(mask_probs, cfg.data.height, cfg.data.width,
                                 cfg.infer.mask_threshold)
        masks = rescale_mask(binary)

        latents = self.heads.decoder.rec_forward(bundle.e_vid, bundle.e_txt)[0]
        blurry = self.latent_coder.decode(latents.detach().numpy())
        control = self.unclip.generate(blurry[blurry.shape[0] // KEYFRAME_DIVISOR])

        return ConditioningBundle(
            control_image=apply_mask_condition(control, masks[masks.shape[0] // KEYFRAME_DIVISOR]),
            blurry_video=apply_mask_condition(blurry, masks),
            rescaled_masks=masks,
            prompt=prompt,
            top_concept=top_concept,
            meta={"clip_id": sample.clip_id, "truncated": truncated},
        )

    def reconstruct(self, sample: FmriSample, seed: int) -> tuple[np.ndarray, ConditioningBundle]:
        """Full reconstruction: conditioning, then the generation backend.

        Backend failures (or out-of-contract outputs) raise an error that
        carries the bundle so partial results can still be persisted.
        """
        cfg = self.config
        bundle = self.conditioning(sample)
        num_frames = int(round(cfg.data.frames * cfg.infer.target_fps / cfg.infer.source_fps))
        try:
            video = self.backend.generate(bundle.prompt, bundle.control_image,
                                          bundle.blurry_video, num_frames, seed)
        except Exception as exc:
            raise ReconstructionError(f"video backend failed: {exc}", bundle=bundle) from exc
        video = np.asarray(video)
        if video.shape != (num_frames, 3, cfg.data.height, cfg.data.width):
            raise ReconstructionError(
                f"backend returned shape {video.shape}, expected "
                f"({num_frames}, 3, {cfg.data.height}, {cfg.data.width})", bundle=bundle)
        if not np.isfinite(video).all() or video.min() < 0.0 or video.max() > 1.0:
            raise ReconstructionError("backend output must be finite in [0,1]", bundle=bundle)
        return video.astype(np.float32), bundle


def reconstruct_video(sample: FmriSample, recon: Reconstructor, seed: int
                      ) -> tuple[np.ndarray, ConditioningBundle]:
    return recon.reconstruct(sample, seed)


# ---------------------------------------------------------------------------
# persistence

def save_reconstruction(out_dir: Path, sample_id: str, video: np.ndarray,
                        bundle: ConditioningBundle, config: ExperimentConfig,
                        seed: int) -> Path:
    """Write one sample's frames plus its conditioning bundle and metadata.

    Layout: <out>/sample_<id>/frames/000.png.., bundle/{prompt.txt,
    top_concept.txt, control.png, masks/, blurry/}, meta.json.
    """
    sample_dir = Path(out_dir) / f"sample_{sample_id}"
    frames_dir = sample_dir / "frames"
    bundle_dir = sample_dir / "bundle"
    frames_dir.mkdir(parents=True, exist_ok=True)
    (bundle_dir / "masks").mkdir(parents=True, exist_ok=True)
    (bundle_dir / "blurry").mkdir(parents=True, exist_ok=True)

    for i, frame in enumerate(frames_to_uint8(video)):  # already [H, W, 3]
        _save_png(frames_dir / f"{i:03d}.png", frame, "RGB")
    (bundle_dir / "prompt.txt").write_text(bundle.prompt + "\n")
    (bundle_dir / "top_concept.txt").write_text(bundle.top_concept + "\n")
    _save_png(bundle_dir / "control.png",
              np.clip(np.round(bundle.control_image * 255), 0, 255).astype(np.uint8), "RGB")
    for i, mask in enumerate(bundle.rescaled_masks):
        _save_png(bundle_dir / "masks" / f"{i:03d}.png",
                  np.clip(np.round(mask * 255), 0, 255).astype(np.uint8), "L")
    for i, frame in enumerate(frames_to_uint8(bundle.blurry_video)):
        _save_png(bundle_dir / "blurry" / f"{i:03d}.png", frame, "RGB")

    meta = {
        "clip_id": bundle.meta.get("clip_id"),
        "seed": seed,
        "config_hash": config_hash(config),
        "top_concept": bundle.top_concept,
        "prompt": bundle.prompt,
        "truncated": bool(bundle.meta.get("truncated", False)),
        "num_frames": int(video.shape[0]),
        "backend": config.infer.backend,
    }
    (sample_dir / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return sample_dir


def load_reconstruction(sample_dir: Path) -> dict:
    """Read back what save_reconstruction wrote (uint8-quantized)."""
    from PIL import Image

    sample_dir = Path(sample_dir)
    meta = json.loads((sample_dir / "meta.json").read_text())

    def _load_frames(folder: Path) -> np.ndarray:
        paths = sorted(folder.glob("*.png"))
        if not paths:
            raise FileNotFoundError(f"no frames under {folder}")
        frames = [np.asarray(Image.open(p), dtype=np.float32) / 255.0 for p in paths]
        return np.stack(frames).transpose(0, 3, 1, 2)

    masks = [np.asarray(Image.open(p), dtype=np.float32) / 255.0
             for p in sorted((sample_dir / "bundle" / "masks").glob("*.png"))]
    return {
        "meta": meta,
        "video": _load_frames(sample_dir / "frames"),
        "blurry": _load_frames(sample_dir / "bundle" / "blurry"),
        "masks": np.stack(masks),
        "prompt": (sample_dir / "bundle" / "prompt.txt").read_text().strip(),
        "top_concept": (sample_dir / "bundle" / "top_concept.txt").read_text().strip(),
    }
