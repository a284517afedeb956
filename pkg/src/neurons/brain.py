"""fMRI backbone: voxels -> image/video/text embeddings.

Pipeline: ridge projection (L2-regularized linear), residual MLP, a prior
network predicting image-space embedding tokens [N, C], a motion projection
lifting them to per-frame video tokens [F, N, C] via learned frame tokens,
and a text head pooling frames into [N_t, C] caption tokens.

Training aligns the three outputs with frozen-encoder targets:
bimixco_loss on video embeddings (over mixup-mixed voxels), plain
bidirectional InfoNCE on text embeddings, MSE on image embeddings.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from .checkpoint import (CheckpointState, load_checkpoint, pack_module, pack_optimizer,
                         restore_torch_rng, save_checkpoint, torch_rng_tensor,
                         unpack_module, unpack_optimizer)
from .config import ExperimentConfig, ModelConfig, config_to_dict
from .contrastive import MixState, bimixco_loss, clip_text_loss, mixco_mix, prior_loss
from .dataio import CLIP_FRAMES, ClipDataset
from .errors import ShapeError, StateError, TrainingDiverged
from .rng import numpy_stream, seed_all

log = logging.getLogger(__name__)


@dataclass
class EmbeddingBundle:
    """Backbone outputs for one batch."""

    e_img: torch.Tensor  # [B, N, C]
    e_vid: torch.Tensor  # [B, F, N, C]
    e_txt: torch.Tensor  # [B, N_t, C]

    def __post_init__(self):
        if self.e_vid.shape[1] != CLIP_FRAMES:
            raise ShapeError(f"e_vid must have {CLIP_FRAMES} frames, got {self.e_vid.shape[1]}")
        for name, t in (("e_img", self.e_img), ("e_vid", self.e_vid), ("e_txt", self.e_txt)):
            if not torch.isfinite(t).all():
                raise ValueError(f"{name} contains non-finite values")


class ResidualBlock(nn.Module):
    def __init__(self, dim: int, dropout: float = 0.0):
        super().__init__()
        self.norm = nn.LayerNorm(dim)
        self.fc1 = nn.Linear(dim, dim)
        self.fc2 = nn.Linear(dim, dim)
        self.drop = nn.Dropout(dropout)

    def forward(self, x):
        h = self.fc2(self.drop(torch.nn.functional.gelu(self.fc1(self.norm(x)))))
        return x + h


class PriorNet(nn.Module):
    """Residual MLP standing in for a diffusion prior; trained with MSE."""

    def __init__(self, hidden_dim: int, blocks: int, tokens: int, channels: int,
                 dropout: float = 0.0):
        super().__init__()
        self.tokens = tokens
        self.channels = channels
        self.blocks = nn.Sequential(*[ResidualBlock(hidden_dim, dropout) for _ in range(blocks)])
        self.out = nn.Linear(hidden_dim, tokens * channels)

    def forward(self, h):
        e = self.out(self.blocks(h))
        return e.view(h.shape[0], self.tokens, self.channels)


class MotionProjection(nn.Module):
    """[B, N, C] image tokens -> [B, F, N, C] via learned per-frame tokens."""

    def __init__(self, channels: int, frames: int = CLIP_FRAMES):
        super().__init__()
        self.proj = nn.Linear(channels, channels)
        self.frame_tokens = nn.Parameter(torch.zeros(frames, channels))
        nn.init.normal_(self.frame_tokens, std=0.02)

    def forward(self, e_img):
        base = self.proj(e_img).unsqueeze(1)  # [B, 1, N, C]
        return base + self.frame_tokens[None, :, None, :]


class BrainModel(nn.Module):
    def __init__(self, model_cfg: ModelConfig, voxel_dim: int):
        super().__init__()
        m = model_cfg
        self.voxel_dim = voxel_dim
        self.tokens = m.tokens
        self.channels = m.channels
        self.text_tokens = m.text_tokens
        self.ridge = nn.Linear(voxel_dim, m.hidden_dim)
        self.mlp = nn.Sequential(*[ResidualBlock(m.hidden_dim, m.dropout)
                                   for _ in range(m.mlp_blocks)])
        self.prior = PriorNet(m.hidden_dim, m.prior_blocks, m.tokens, m.channels, m.dropout)
        self.motion = MotionProjection(m.channels)
        self.text_head = nn.Linear(m.tokens * m.channels, m.text_tokens * m.channels)
        self._initialized = True

    @classmethod
    def empty(cls, model_cfg: ModelConfig, voxel_dim: int) -> "BrainModel":
        """Shell whose parameters are placeholders until a checkpoint fills them."""
        model = cls(model_cfg, voxel_dim)
        model._initialized = False
        return model

    def mark_initialized(self) -> None:
        self._initialized = True

    def backbone_forward(self, voxels: torch.Tensor) -> EmbeddingBundle:
        if not self._initialized:
            raise StateError("BrainModel.empty() shell used before loading parameters")
        if voxels.ndim != 2:
            raise ShapeError(f"voxels must be [B, V], got {tuple(voxels.shape)}")
        if voxels.shape[1] != self.voxel_dim:
            raise ShapeError(f"expected {self.voxel_dim} voxels, got {voxels.shape[1]}")
        h = self.mlp(self.ridge(voxels))
        e_img = self.prior(h)  # [B, N, C]
        e_vid = self.motion(e_img)  # [B, F, N, C]
        pooled = e_vid.mean(dim=1).reshape(voxels.shape[0], -1)
        e_txt = self.text_head(pooled).view(voxels.shape[0], self.text_tokens, self.channels)
        return EmbeddingBundle(e_img=e_img, e_vid=e_vid, e_txt=e_txt)

    forward = backbone_forward


@dataclass
class FrozenTargets:
    """Per-sample frozen-encoder targets, aligned with dataset order."""

    video: np.ndarray  # [n, F, N, C]
    text: np.ndarray  # [n, N_t, C]
    image: np.ndarray  # [n, N, C]


def encode_targets(dataset: ClipDataset, frozen) -> FrozenTargets:
    video = np.stack([frozen.video_embed(s.clip.frames) for s in dataset.samples])
    text = np.stack([frozen.text_embed(s.annotations.caption_text) for s in dataset.samples])
    return FrozenTargets(video=video.astype(np.float32),
                         text=text.astype(np.float32),
                         image=video.mean(axis=1).astype(np.float32))


def epoch_batches(n: int, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    """Shuffled index chunks; a trailing singleton is folded into the previous
    chunk so contrastive batches stay meaningful."""
    order = rng.permutation(n)
    chunks = [order[i:i + batch_size] for i in range(0, n, batch_size)]
    if len(chunks) > 1 and len(chunks[-1]) == 1:
        chunks[-2] = np.concatenate([chunks[-2], chunks[-1]])
        chunks.pop()
    return chunks


@dataclass
class BrainTrainResult:
    model: BrainModel
    history: list[dict]
    checkpoint_path: Path | None


def _brain_optimizer(model: BrainModel, cfg: ExperimentConfig) -> torch.optim.AdamW:
    ridge_params = list(model.ridge.parameters())
    ridge_ids = {id(p) for p in ridge_params}
    rest = [p for p in model.parameters() if id(p) not in ridge_ids]
    return torch.optim.AdamW([
        {"params": ridge_params, "weight_decay": cfg.brain.ridge_weight_decay},
        {"params": rest, "weight_decay": 0.0},
    ], lr=cfg.brain.lr)


def train_brain_model(dataset: ClipDataset, config: ExperimentConfig,
                      out_path: Path | None = None, frozen=None,
                      resume_from: Path | None = None) -> BrainTrainResult:
    """Fit the backbone on one dataset; saves a checkpoint every epoch.

    Deterministic for a fixed config: shuffling and mixing are re-derived per
    epoch from the root seed, so resuming from the epoch-k checkpoint
    continues bit-for-bit like an uninterrupted run.
    """
    if len(dataset) == 0:
        raise ValueError("cannot train on an empty dataset")
    torch.set_num_threads(1)  # keeps reductions reproducible

    if frozen is None:
        from .backends import FrozenEncoderStub
        frozen = FrozenEncoderStub.from_config(config)
    targets = encode_targets(dataset, frozen)

    voxels_np = dataset.voxel_matrix()
    if voxels_np.shape[1] != config.data.voxel_dim:
        raise ShapeError(f"dataset voxel dim {voxels_np.shape[1]} != config {config.data.voxel_dim}")
    voxels = torch.from_numpy(voxels_np)
    video_t = torch.from_numpy(targets.video)
    text_t = torch.from_numpy(targets.text)
    image_t = torch.from_numpy(targets.image)

    seed_all(config.seed, "init.brain")
    model = BrainModel(config.model, config.data.voxel_dim)
    optim = _brain_optimizer(model, config)

    start_epoch = 0
    if resume_from is not None:
        state = load_checkpoint(resume_from, expected_kind="brain")
        unpack_module("model", state.tensors, model)
        model.mark_initialized()
        unpack_optimizer("optim", state.tensors, state.param_groups, optim)
        if "rng.torch_global" in state.tensors:
            restore_torch_rng(state.tensors["rng.torch_global"])
        start_epoch = state.epoch
        if state.migration_note:
            log.warning("%s", state.migration_note)

    n = len(dataset)
    tau, alpha = config.brain.tau, config.brain.mixco_alpha
    history: list[dict] = []
    ckpt_path = Path(out_path) if out_path is not None else None

    for epoch in range(start_epoch, config.brain.epochs):
        order_rng = numpy_stream(config.seed, "data.order.brain", epoch)
        mix_rng = numpy_stream(config.seed, "mixco", epoch)
        sums = {"clipv": 0.0, "clipt": 0.0, "prior": 0.0, "total": 0.0}
        batches = epoch_batches(n, config.brain.batch_size, order_rng)
        model.train()
        for idx in batches:
            idx_t = torch.from_numpy(np.ascontiguousarray(idx))
            x = voxels[idx_t]
            b = x.shape[0]
            if b >= 2:
                state = MixState.sample(b, alpha, mix_rng)
            else:
                state = MixState(lam=torch.ones(1), partner=torch.zeros(1, dtype=torch.long))

            bundle_mix = model(mixco_mix(x, state))
            loss_v = bimixco_loss(bundle_mix.e_vid.reshape(b, -1),
                                  video_t[idx_t].reshape(b, -1), state, tau)

            bundle = model(x)
            loss_t = clip_text_loss(bundle.e_txt, text_t[idx_t], tau)
            loss_p = prior_loss(bundle.e_img, image_t[idx_t])
            total = loss_v + loss_t + loss_p
            if not torch.isfinite(total):
                raise TrainingDiverged(
                    f"non-finite brain loss at epoch {epoch} "
                    f"(clipv={loss_v.item():.4g} clipt={loss_t.item():.4g} prior={loss_p.item():.4g})")

            optim.zero_grad()
            total.backward()
            optim.step()
            w = b / n
            for key, value in (("clipv", loss_v), ("clipt", loss_t),
                               ("prior", loss_p), ("total", total)):
                sums[key] += value.item() * w

        history.append({"epoch": epoch, **sums})
        if ckpt_path is not None:
            save_brain_checkpoint(model, optim, config, epoch + 1, ckpt_path,
                                  last_losses=sums)
        if epoch == start_epoch or (epoch + 1) % 10 == 0:
            log.info("brain epoch %d: total=%.4f clipv=%.4f clipt=%.4f prior=%.4f",
                     epoch, sums["total"], sums["clipv"], sums["clipt"], sums["prior"])

    return BrainTrainResult(model=model, history=history, checkpoint_path=ckpt_path)


def save_brain_checkpoint(model: BrainModel, optim: torch.optim.Optimizer,
                          config: ExperimentConfig, epoch: int, path: Path,
                          last_losses: dict | None = None) -> str:
    tensors = pack_module("model", model)
    opt_tensors, param_groups = pack_optimizer("optim", optim)
    tensors.update(opt_tensors)
    tensors["rng.torch_global"] = torch_rng_tensor()
    state = CheckpointState(
        kind="brain", epoch=epoch, config=config_to_dict(config), tensors=tensors,
        param_groups=param_groups,
        meta={"last_losses": last_losses or {}},
    )
    return save_checkpoint(state, path)


def load_brain_model(path: Path, config: ExperimentConfig | None = None) -> tuple[BrainModel, CheckpointState]:
    """Rebuild a BrainModel from a checkpoint (read-only; no optimizer)."""
    state = load_checkpoint(path, expected_kind="brain")
    from .config import config_from_dict
    cfg = config if config is not None else config_from_dict(state.config)
    model = BrainModel.empty(cfg.model, cfg.data.voxel_dim)
    unpack_module("model", state.tensors, model)
    model.mark_initialized()
    model.eval()
    return model, state
