"""Decoupled task heads over the frozen backbone, and their trainer.

Four heads learn in parallel on top of brain embeddings:
  seg: text-conditioned cross-attention decoder -> key-object masks,
  cls: linear multi-label concept classifier over pooled video tokens,
  txt: prefix-conditioned causal decoder -> caption token NLL,
  rec: shared-trunk decoder -> blurry video latents (MAE).

Loss weights follow a progressive sine curve: weight 1 outside each loss's
active window [S, S+P), and 1 + 9*|sin(pi * C / T)| inside, where C counts
batches since the window opened and T = P * batches_per_epoch. Windows are
staggered (seg, cls, txt, rec) so emphasis sweeps across the tasks.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .checkpoint import (CheckpointState, file_sha256, load_checkpoint, pack_module,
                         pack_optimizer, restore_torch_rng, save_checkpoint,
                         torch_rng_tensor, unpack_module, unpack_optimizer)
from .config import ExperimentConfig, LOSS_NAMES, config_to_dict
from .dataio import CLIP_FRAMES, ClipDataset
from .errors import ShapeError, TrainingDiverged
from .rng import numpy_stream, seed_all
from .taxonomy import NUM_CONCEPTS
from .text import CaptionTokenizer

log = logging.getLogger(__name__)

MASK_EPS = 1e-7
LOG_COLUMNS = ("epoch", "batch", "w1", "w2", "w3", "w4",
               "L_seg", "L_cls", "L_txt", "L_rec", "L_total")


# ---------------------------------------------------------------------------
# schedule

def schedule_weight(epoch: int, batch: int, batches_per_epoch: int,
                    start: int, period_epochs: int) -> float:
    """Progressive emphasis weight for one loss at one training step.

    1.0 outside [start, start + period_epochs); inside, 1 + 9*|sin(pi*C/T)|
    with C = (epoch - start) * batches_per_epoch + batch and
    T = period_epochs * batches_per_epoch. Peaks at 10 mid-window.
    """
    if batches_per_epoch < 1:
        raise ValueError("batches_per_epoch must be >= 1")
    if not 0 <= batch < batches_per_epoch:
        raise ValueError(f"batch {batch} out of range [0, {batches_per_epoch})")
    if epoch < 0 or start < 0 or period_epochs < 1:
        raise ValueError("epoch/start must be >= 0 and period_epochs >= 1")
    if epoch < start or epoch >= start + period_epochs:
        return 1.0
    total = period_epochs * batches_per_epoch
    count = (epoch - start) * batches_per_epoch + batch
    return 1.0 + 9.0 * abs(math.sin(math.pi * count / total))


@dataclass(frozen=True)
class LossWeights:
    seg: float
    cls: float
    txt: float
    rec: float

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.seg, self.cls, self.txt, self.rec)


@dataclass
class LossSchedule:
    """Staggered per-loss windows plus config-level constant overrides."""

    period_epochs: int
    starts: dict[str, int]  # loss name -> start epoch
    overrides: dict[str, float]

    @classmethod
    def from_config(cls, cfg: ExperimentConfig) -> "LossSchedule":
        d = cfg.decoupler
        return cls(period_epochs=d.period_epochs,
                   starts=dict(zip(LOSS_NAMES, d.period_starts)),
                   overrides=dict(d.weight_overrides))

    def at(self, epoch: int, batch: int, batches_per_epoch: int) -> LossWeights:
        values = {}
        for name in LOSS_NAMES:
            if name in self.overrides:
                values[name] = float(self.overrides[name])
            else:
                values[name] = schedule_weight(epoch, batch, batches_per_epoch,
                                               self.starts[name], self.period_epochs)
        return LossWeights(**values)


# ---------------------------------------------------------------------------
# attention and heads

def scaled_dot_attention(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
    """softmax(q k^T / sqrt(d)) v over the last key axis.

    q: [..., Lq, d], k: [..., Lk, d], v: [..., Lk, Dv] -> [..., Lq, Dv].
    Every output row is a convex combination of rows of v.
    """
    if q.shape[-1] != k.shape[-1]:
        raise ShapeError(f"q/k width mismatch: {q.shape[-1]} vs {k.shape[-1]}")
    if k.shape[-2] != v.shape[-2]:
        raise ShapeError(f"k/v length mismatch: {k.shape[-2]} vs {v.shape[-2]}")
    scores = q @ k.transpose(-2, -1) / math.sqrt(q.shape[-1])
    return torch.softmax(scores, dim=-1) @ v


class CrossAttention(nn.Module):
    """Video tokens query text tokens; values are projected text tokens."""

    def __init__(self, channels: int, attn_dim: int):
        super().__init__()
        self.q = nn.Linear(channels, attn_dim, bias=False)
        self.k = nn.Linear(channels, attn_dim, bias=False)
        self.v = nn.Linear(channels, channels, bias=False)

    def forward(self, e_vid: torch.Tensor, e_txt: torch.Tensor) -> torch.Tensor:
        if e_vid.ndim != 4:
            raise ShapeError(f"e_vid must be [B, F, N, C], got {tuple(e_vid.shape)}")
        if e_txt.ndim != 3:
            raise ShapeError(f"e_txt must be [B, N_t, C], got {tuple(e_txt.shape)}")
        b, f, n, _ = e_vid.shape
        q = self.q(e_vid)  # [B, F, N, d]
        k = self.k(e_txt)[:, None]  # [B, 1, N_t, d] broadcast over frames
        v = self.v(e_txt)[:, None]  # [B, 1, N_t, C]
        return scaled_dot_attention(q, k.expand(b, f, -1, -1), v.expand(b, f, -1, -1))


class VideoDecoder(nn.Module):
    """Shared conv trunk over the token grid with seg and rec heads.

    Tokens [N] are laid out as a sqrt(N) x sqrt(N) grid. The seg head emits
    sigmoid masks at (H/4, W/4); the rec head emits latents at (H/8, W/8).
    """

    def __init__(self, channels: int, attn_dim: int, tokens: int,
                 height: int, width: int, latent_channels: int):
        super().__init__()
        self.grid = int(round(tokens ** 0.5))
        if self.grid * self.grid != tokens:
            raise ShapeError(f"tokens must be square, got {tokens}")
        self.channels = channels
        self.seg_size = (height // 4, width // 4)
        self.rec_size = (height // 8, width // 8)
        self.cross = CrossAttention(channels, attn_dim)
        self.trunk = nn.Sequential(
            nn.Conv2d(channels, channels, 3, padding=1), nn.GELU(),
            nn.Conv2d(channels, channels, 3, padding=1), nn.GELU(),
        )
        self.seg_head = nn.Sequential(
            nn.Conv2d(channels, channels // 2, 3, padding=1), nn.GELU(),
            nn.Conv2d(channels // 2, 1, 1),
        )
        self.rec_head = nn.Sequential(
            nn.Conv2d(channels, channels, 3, padding=1), nn.GELU(),
            nn.Conv2d(channels, latent_channels, 1),
        )

    def cross_attend(self, e_vid: torch.Tensor, e_txt: torch.Tensor) -> torch.Tensor:
        return self.cross(e_vid, e_txt)

    def _trunk_features(self, e_seg: torch.Tensor) -> torch.Tensor:
        b, f, n, c = e_seg.shape
        if n != self.grid * self.grid or c != self.channels:
            raise ShapeError(f"expected [B, F, {self.grid ** 2}, {self.channels}], "
                             f"got {tuple(e_seg.shape)}")
        grid = e_seg.reshape(b * f, self.grid, self.grid, c).permute(0, 3, 1, 2)
        return self.trunk(grid)  # [B*F, C, g, g]

    def seg_forward(self, e_seg: torch.Tensor) -> torch.Tensor:
        """Cross-attended tokens -> [B, F, 1, H/4, W/4] sigmoid masks."""
        b, f = e_seg.shape[:2]
        feat = self._trunk_features(e_seg)
        feat = F.interpolate(feat, size=self.seg_size, mode="bilinear", align_corners=False)
        logits = self.seg_head(feat)
        return torch.sigmoid(logits).reshape(b, f, 1, *self.seg_size)

    def rec_forward(self, e_vid: torch.Tensor, e_txt: torch.Tensor) -> torch.Tensor:
        """Video + text embeddings -> [B, F, C_l, H/8, W/8] latents."""
        b, f = e_vid.shape[:2]
        feat = self._trunk_features(self.cross_attend(e_vid, e_txt))
        feat = F.interpolate(feat, size=self.rec_size, mode="bilinear", align_corners=False)
        latents = self.rec_head(feat)
        return latents.reshape(b, f, -1, *self.rec_size)


class ConceptClassifierHead(nn.Module):
    """Mean-pool video tokens over frames and tokens, then one linear map."""

    def __init__(self, channels: int, num_concepts: int = NUM_CONCEPTS):
        super().__init__()
        self.fc = nn.Linear(channels, num_concepts)

    def logits(self, e_vid: torch.Tensor) -> torch.Tensor:
        if e_vid.ndim != 4:
            raise ShapeError(f"e_vid must be [B, F, N, C], got {tuple(e_vid.shape)}")
        pooled = e_vid.mean(dim=(1, 2))  # frame axis first, then tokens
        return self.fc(pooled)

    forward = logits

    def loss(self, e_vid: torch.Tensor, concepts: torch.Tensor) -> torch.Tensor:
        return multilabel_bce(self.logits(e_vid), concepts)


def multilabel_bce(logits: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    """Per-class sigmoid BCE, averaged over classes and batch."""
    if logits.shape != targets.shape:
        raise ShapeError(f"logits {tuple(logits.shape)} vs targets {tuple(targets.shape)}")
    return F.binary_cross_entropy_with_logits(logits, targets)


class _DecoderBlock(nn.Module):
    def __init__(self, dim: int, heads: int, dropout: float = 0.0):
        super().__init__()
        self.ln1 = nn.LayerNorm(dim)
        self.attn = nn.MultiheadAttention(dim, heads, dropout=dropout, batch_first=True)
        self.ln2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(nn.Linear(dim, 4 * dim), nn.GELU(), nn.Linear(4 * dim, dim))

    def forward(self, x, attn_mask):
        h = self.ln1(x)
        a, _ = self.attn(h, h, h, attn_mask=attn_mask, need_weights=False)
        x = x + a
        return x + self.mlp(self.ln2(x))


class TextDecoderHead(nn.Module):
    """Small causal decoder conditioned on a text-embedding prefix.

    The input sequence is [projected e_txt tokens, BOS, s_0 .. s_{L-2}];
    hidden state at prefix+i predicts s_i. Fully causal attention, so token
    s_i depends only on the prefix and earlier tokens.
    """

    def __init__(self, vocab_size: int, d_model: int, layers: int, heads: int,
                 prefix_tokens: int, channels: int, max_len: int = 32):
        super().__init__()
        self.vocab_size = vocab_size
        self.prefix_tokens = prefix_tokens
        self.max_len = max_len
        self.prefix_proj = nn.Linear(channels, d_model)
        self.tok_emb = nn.Embedding(vocab_size, d_model)
        self.pos_emb = nn.Parameter(torch.zeros(prefix_tokens + max_len + 1, d_model))
        nn.init.normal_(self.pos_emb, std=0.02)
        self.blocks = nn.ModuleList([_DecoderBlock(d_model, heads) for _ in range(layers)])
        self.norm = nn.LayerNorm(d_model)
        self.out = nn.Linear(d_model, vocab_size)

    def _run(self, e_txt: torch.Tensor, tokens: torch.Tensor) -> torch.Tensor:
        """tokens: [B, L] targets; returns [B, L, vocab] next-token logits."""
        if e_txt.ndim != 3 or e_txt.shape[1] != self.prefix_tokens:
            raise ShapeError(f"e_txt must be [B, {self.prefix_tokens}, C], got {tuple(e_txt.shape)}")
        b, length = tokens.shape
        if length > self.max_len:
            raise ShapeError(f"token length {length} exceeds max_len {self.max_len}")
        bos = torch.full((b, 1), CaptionTokenizer.BOS, dtype=torch.long, device=tokens.device)
        shifted = torch.cat([bos, tokens[:, :-1]], dim=1)
        x = torch.cat([self.prefix_proj(e_txt), self.tok_emb(shifted)], dim=1)
        seq = x.shape[1]
        x = x + self.pos_emb[:seq].to(x.dtype)
        mask = torch.triu(torch.ones(seq, seq, dtype=torch.bool, device=x.device), diagonal=1)
        for block in self.blocks:
            x = block(x, mask)
        logits = self.out(self.norm(x))
        return logits[:, self.prefix_tokens:self.prefix_tokens + length]

    def token_logits(self, e_txt: torch.Tensor, tokens: torch.Tensor) -> torch.Tensor:
        return self._run(e_txt, tokens)

    def loss(self, e_txt: torch.Tensor, token_lists: list[list[int]]) -> torch.Tensor:
        """Mean NLL per caption (EOS appended), averaged over the batch."""
        if len(token_lists) != e_txt.shape[0]:
            raise ShapeError("batch mismatch between e_txt and token lists")
        seqs = [list(t) + [CaptionTokenizer.EOS] for t in token_lists]
        if any(len(s) == 0 for s in seqs):
            raise ValueError("empty token sequence")
        longest = max(len(s) for s in seqs)
        tokens = torch.full((len(seqs), longest), CaptionTokenizer.PAD, dtype=torch.long,
                            device=e_txt.device)
        for i, s in enumerate(seqs):
            tokens[i, :len(s)] = torch.as_tensor(s, dtype=torch.long)
        lengths = torch.as_tensor([len(s) for s in seqs], device=e_txt.device)
        logits = self._run(e_txt, tokens)
        mask = torch.arange(longest, device=e_txt.device)[None, :] < lengths[:, None]
        return nll_from_logits(logits, tokens, mask)

    @torch.no_grad()
    def greedy_decode(self, e_txt: torch.Tensor, max_len: int | None = None
                      ) -> tuple[list[list[int]], bool]:
        """Argmax decoding until EOS; returns (token lists, truncated flag)."""
        limit = self.max_len if max_len is None else min(max_len, self.max_len)
        b = e_txt.shape[0]
        tokens = torch.full((b, 0), 0, dtype=torch.long, device=e_txt.device)
        done = torch.zeros(b, dtype=torch.bool)
        for _ in range(limit):
            probe = torch.cat(
                [tokens, torch.full((b, 1), CaptionTokenizer.PAD, dtype=torch.long)], dim=1)
            logits = self._run(e_txt, probe)
            nxt = logits[:, -1].argmax(dim=-1)
            tokens = torch.cat([tokens, nxt[:, None]], dim=1)
            done |= nxt.cpu() == CaptionTokenizer.EOS
            if bool(done.all()):
                break
        out = []
        truncated = False
        for row in tokens.tolist():
            if CaptionTokenizer.EOS in row:
                out.append(row[:row.index(CaptionTokenizer.EOS)])
            else:
                out.append(row)
                truncated = True
        return out, truncated


def nll_from_logits(logits: torch.Tensor, tokens: torch.Tensor,
                    mask: torch.Tensor | None = None) -> torch.Tensor:
    """Per-sample mean negative log-likelihood, averaged over the batch.

    logits: [B, L, V], tokens: [B, L], mask: [B, L] bool (True = counted).
    """
    if logits.shape[:2] != tokens.shape:
        raise ShapeError(f"logits {tuple(logits.shape)} vs tokens {tuple(tokens.shape)}")
    logp = F.log_softmax(logits, dim=-1)
    nll = -logp.gather(-1, tokens[:, :, None].clamp(min=0)).squeeze(-1)  # [B, L]
    if mask is None:
        return nll.mean(dim=1).mean()
    counts = mask.sum(dim=1)
    if torch.any(counts == 0):
        raise ValueError("every sequence needs at least one unmasked token")
    per_sample = (nll * mask.to(nll.dtype)).sum(dim=1) / counts.to(nll.dtype)
    return per_sample.mean()


# ---------------------------------------------------------------------------
# per-task losses over plain tensors

def seg_bce_loss(pred: torch.Tensor, target: torch.Tensor,
                 eps: float = MASK_EPS) -> torch.Tensor:
    """Pixel-averaged binary cross-entropy on sigmoid mask probabilities.

    pred in (0, 1) is clamped to [eps, 1 - eps] before the logs.
    """
    if pred.shape != target.shape:
        raise ShapeError(f"pred {tuple(pred.shape)} vs target {tuple(target.shape)}")
    p = pred.clamp(eps, 1.0 - eps)
    t = target.to(pred.dtype)
    return -(t * torch.log(p) + (1.0 - t) * torch.log1p(-p)).mean()


def rec_mae_loss(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Mean absolute error over frames and latent elements."""
    if pred.shape != target.shape:
        raise ShapeError(f"pred {tuple(pred.shape)} vs target {tuple(target.shape)}")
    return (pred - target).abs().mean()


def total_loss(losses: dict[str, torch.Tensor], weights: LossWeights) -> torch.Tensor:
    """Weighted sum w1*seg + w2*cls + w3*txt + w4*rec; non-finite aborts."""
    for name in LOSS_NAMES:
        if name not in losses:
            raise ValueError(f"missing loss term '{name}'")
        if not torch.isfinite(losses[name]):
            raise TrainingDiverged(f"loss '{name}' is non-finite")
    w = weights
    return (w.seg * losses["seg"] + w.cls * losses["cls"]
            + w.txt * losses["txt"] + w.rec * losses["rec"])


# ---------------------------------------------------------------------------
# head container + trainer

class DecouplerHeads(nn.Module):
    def __init__(self, decoder: VideoDecoder, cls_head: ConceptClassifierHead,
                 txt_head: TextDecoderHead):
        super().__init__()
        self.decoder = decoder
        self.cls = cls_head
        self.txt = txt_head

    @classmethod
    def build(cls, config: ExperimentConfig) -> "DecouplerHeads":
        m, d = config.model, config.data
        decoder = VideoDecoder(m.channels, m.attention_dim, m.tokens, d.height, d.width,
                               m.latent_channels)
        cls_head = ConceptClassifierHead(m.channels)
        txt_head = TextDecoderHead(m.vocab_size, m.text_width, m.text_layers, m.text_heads,
                                   m.text_tokens, m.channels,
                                   max_len=config.decoupler.max_caption_len)
        return cls(decoder, cls_head, txt_head)


def downsample_masks(masks: np.ndarray, factor: int = 4) -> np.ndarray:
    """[F, H, W] binary -> [F, 1, H/f, W/f] float32 by block-mean thresholding."""
    f, h, w = masks.shape
    blocks = masks.reshape(f, h // factor, factor, w // factor, factor).mean(axis=(2, 4))
    return (blocks > 0.5).astype(np.float32)[:, None]


@dataclass
class DecouplerTrainResult:
    heads: DecouplerHeads
    brain_model: "object"
    history: list[dict]
    checkpoint_path: Path | None
    log_rows: list[dict]


def train_decoupler(dataset: ClipDataset, config: ExperimentConfig,
                    brain_ckpt: Path, out_path: Path | None = None,
                    log_path: Path | None = None, frozen=None, latent_coder=None,
                    resume_from: Path | None = None) -> DecouplerTrainResult:
    """Train the four heads (and fine-tune the prior at reduced lr).

    The brain trunk is frozen; only the prior co-trains, at
    lr * prior_lr_mult. Every batch appends one CSV row with the scheduled
    weights and raw loss values. A non-finite total aborts, leaving the
    previous epoch's checkpoint on disk.
    """
    from .brain import load_brain_model

    if len(dataset) == 0:
        raise ValueError("cannot train on an empty dataset")
    torch.set_num_threads(1)

    if frozen is None:
        from .backends import FrozenEncoderStub
        frozen = FrozenEncoderStub.from_config(config)
    if latent_coder is None:
        from .backends import LatentCoderStub
        latent_coder = LatentCoderStub.from_config(config)

    brain_model, _ = load_brain_model(brain_ckpt, config)
    brain_sha = file_sha256(brain_ckpt)
    for p in brain_model.parameters():
        p.requires_grad_(False)
    for p in brain_model.prior.parameters():
        p.requires_grad_(True)
    brain_model.train()

    seed_all(config.seed, "init.decoupler")
    heads = DecouplerHeads.build(config)

    n = len(dataset)
    voxels = torch.from_numpy(dataset.voxel_matrix())
    concepts = torch.from_numpy(np.stack([s.annotations.concepts for s in dataset.samples]))
    seg_gt = torch.from_numpy(np.stack([
        downsample_masks(s.annotations.key_masks) for s in dataset.samples]))
    latent_t = torch.from_numpy(np.stack([
        latent_coder.encode(s.clip.frames) for s in dataset.samples]).astype(np.float32))
    class_txt = torch.from_numpy(np.stack([
        frozen.text_embed(s.annotations.key_object) for s in dataset.samples]).astype(np.float32))
    token_lists = [list(s.annotations.caption_tokens) for s in dataset.samples]

    optim = torch.optim.AdamW([
        {"params": list(heads.parameters()), "lr": config.decoupler.lr},
        {"params": list(brain_model.prior.parameters()),
         "lr": config.decoupler.lr * config.decoupler.prior_lr_mult},
    ], weight_decay=0.0)

    start_epoch = 0
    if resume_from is not None:
        state = load_checkpoint(resume_from, expected_kind="decoupler")
        unpack_module("heads", state.tensors, heads)
        unpack_module("prior", state.tensors, brain_model.prior)
        unpack_optimizer("optim", state.tensors, state.param_groups, optim)
        if "rng.torch_global" in state.tensors:
            restore_torch_rng(state.tensors["rng.torch_global"])
        start_epoch = state.epoch
        if state.migration_note:
            log.warning("%s", state.migration_note)

    schedule = LossSchedule.from_config(config)
    ckpt_path = Path(out_path) if out_path is not None else None
    history: list[dict] = []
    log_rows: list[dict] = []
    writer = None
    log_file = None
    if log_path is not None:
        log_path = Path(log_path)
        log_path.parent.mkdir(parents=True, exist_ok=True)
        fresh = resume_from is None or not log_path.exists()
        log_file = open(log_path, "w" if fresh else "a", newline="")
        writer = csv.writer(log_file)
        if fresh:
            writer.writerow(LOG_COLUMNS)

    try:
        for epoch in range(start_epoch, config.decoupler.epochs):
            order_rng = numpy_stream(config.seed, "data.order.decoupler", epoch)
            from .brain import epoch_batches
            batches = epoch_batches(n, config.decoupler.batch_size, order_rng)
            nb = len(batches)
            sums = {name: 0.0 for name in LOSS_NAMES}
            sums["total"] = 0.0
            for b_idx, idx in enumerate(batches):
                idx_t = torch.from_numpy(np.ascontiguousarray(idx))
                with torch.no_grad():
                    hidden = brain_model.mlp(brain_model.ridge(voxels[idx_t]))
                e_img = brain_model.prior(hidden)
                e_vid = brain_model.motion(e_img)
                pooled = e_vid.mean(dim=1).reshape(len(idx), -1)
                e_txt = brain_model.text_head(pooled).view(len(idx), -1, e_vid.shape[-1])

                e_seg = heads.decoder.cross_attend(e_vid, class_txt[idx_t])
                losses = {
                    "seg": seg_bce_loss(heads.decoder.seg_forward(e_seg), seg_gt[idx_t]),
                    "cls": heads.cls.loss(e_vid, concepts[idx_t]),
                    "txt": heads.txt.loss(e_txt, [token_lists[i] for i in idx]),
                    "rec": rec_mae_loss(heads.decoder.rec_forward(e_vid, e_txt),
                                        latent_t[idx_t]),
                }
                weights = schedule.at(epoch, b_idx, nb)
                total = total_loss(losses, weights)

                optim.zero_grad()
                total.backward()
                optim.step()

                row = {
                    "epoch": epoch, "batch": b_idx,
                    "w1": weights.seg, "w2": weights.cls, "w3": weights.txt, "w4": weights.rec,
                    "L_seg": losses["seg"].item(), "L_cls": losses["cls"].item(),
                    "L_txt": losses["txt"].item(), "L_rec": losses["rec"].item(),
                    "L_total": total.item(),
                }
                log_rows.append(row)
                if writer is not None:
                    writer.writerow([repr(row[c]) if isinstance(row[c], float) else row[c]
                                     for c in LOG_COLUMNS])
                w = len(idx) / n
                for name in LOSS_NAMES:
                    sums[name] += losses[name].item() * w
                sums["total"] += total.item() * w

            history.append({"epoch": epoch, **sums})
            if ckpt_path is not None:
                save_decoupler_checkpoint(heads, brain_model, optim, config, epoch + 1,
                                          ckpt_path, brain_sha, last_losses=sums)
            if epoch == start_epoch or (epoch + 1) % 10 == 0:
                log.info("decoupler epoch %d: seg=%.4f cls=%.4f txt=%.4f rec=%.4f",
                         epoch, sums["seg"], sums["cls"], sums["txt"], sums["rec"])
    finally:
        if log_file is not None:
            log_file.close()

    return DecouplerTrainResult(heads=heads, brain_model=brain_model, history=history,
                                checkpoint_path=ckpt_path, log_rows=log_rows)


def save_decoupler_checkpoint(heads: DecouplerHeads, brain_model, optim, config,
                              epoch: int, path: Path, brain_sha: str,
                              last_losses: dict | None = None) -> str:
    tensors = pack_module("heads", heads)
    tensors.update(pack_module("prior", brain_model.prior))
    opt_tensors, param_groups = pack_optimizer("optim", optim)
    tensors.update(opt_tensors)
    tensors["rng.torch_global"] = torch_rng_tensor()
    state = CheckpointState(
        kind="decoupler", epoch=epoch, config=config_to_dict(config), tensors=tensors,
        param_groups=param_groups,
        meta={"brain_checkpoint_sha256": brain_sha, "last_losses": last_losses or {}},
    )
    return save_checkpoint(state, path)


def load_decoupler_heads(path: Path, config: ExperimentConfig | None = None
                         ) -> tuple[DecouplerHeads, CheckpointState]:
    """Rebuild heads from a checkpoint; caller applies prior.* to the brain."""
    from .config import config_from_dict

    state = load_checkpoint(path, expected_kind="decoupler")
    cfg = config if config is not None else config_from_dict(state.config)
    heads = DecouplerHeads.build(cfg)
    unpack_module("heads", state.tensors, heads)
    heads.eval()
    return heads, state
