"""Contrastive alignment losses for brain-to-target training.

bimixco_loss is a four-term bidirectional InfoNCE over mixup-augmented
inputs: each mixed sample pulls toward its own target with weight lambda and
toward its partner's target with weight (1 - lambda), in both directions,
all normalized by 1/(2B). With lambda == 1 it collapses to the plain
symmetric InfoNCE that clip_text_loss computes directly.

Embeddings are flattened per sample and L2-normalized inside the losses, so
similarity is cosine and pre-scaling either side changes nothing.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F


@dataclass
class MixState:
    """Mixup coefficients and partner assignment for one batch.

    lam: [B] in [0, 1]. partner: [B] long, partner[i] != i whenever
    lam[i] < 1 (a fully unmixed sample has no effective partner).
    """

    lam: torch.Tensor
    partner: torch.Tensor

    def __post_init__(self):
        lam = torch.as_tensor(self.lam)
        partner = torch.as_tensor(self.partner, dtype=torch.long)
        if lam.ndim != 1 or partner.shape != lam.shape:
            raise ValueError(f"lam/partner must be matching 1-D, got {lam.shape}/{partner.shape}")
        if torch.any(lam < 0) or torch.any(lam > 1):
            raise ValueError("lam must lie in [0, 1]")
        b = lam.shape[0]
        if torch.any(partner < 0) or torch.any(partner >= b):
            raise ValueError("partner indices out of range")
        self_paired = (partner == torch.arange(b)) & (lam < 1.0)
        if torch.any(self_paired):
            raise ValueError("partner[i] == i requires lam[i] == 1")
        self.lam = lam
        self.partner = partner

    @classmethod
    def sample(cls, batch_size: int, alpha: float, rng: np.random.Generator,
               dtype: torch.dtype = torch.float32) -> "MixState":
        """Beta(alpha, alpha) coefficients and a derangement partner map."""
        if batch_size < 2:
            raise ValueError("mixing needs a batch of at least 2")
        lam = rng.beta(alpha, alpha, size=batch_size)
        p = rng.permutation(batch_size)
        fixed = np.flatnonzero(p == np.arange(batch_size))
        if len(fixed) == 1:
            j = (fixed[0] + 1) % batch_size
            p[fixed[0]], p[j] = p[j], p[fixed[0]]
        elif len(fixed) > 1:
            p[fixed] = np.roll(p[fixed], 1)
        return cls(lam=torch.as_tensor(lam, dtype=dtype), partner=torch.as_tensor(p))


def mixco_mix(inputs: torch.Tensor, state: MixState) -> torch.Tensor:
    """x*_i = lam_i * x_i + (1 - lam_i) * x_{partner_i}."""
    if inputs.shape[0] != state.lam.shape[0]:
        raise ValueError(f"batch mismatch: inputs {inputs.shape[0]}, state {state.lam.shape[0]}")
    lam = state.lam.to(inputs.dtype).view(-1, *([1] * (inputs.ndim - 1)))
    return lam * inputs + (1.0 - lam) * inputs[state.partner]


def _flat_normalize(x: torch.Tensor) -> torch.Tensor:
    return F.normalize(x.reshape(x.shape[0], -1), dim=-1)


def bimixco_loss(emb: torch.Tensor, targets: torch.Tensor, state: MixState,
                 tau: float) -> torch.Tensor:
    """Four-term mixup contrastive loss; see module docstring.

    emb are embeddings of mixed inputs, targets are the unmixed targets.
    """
    if tau <= 0:
        raise ValueError(f"tau must be > 0, got {tau}")
    if emb.shape != targets.shape:
        raise ValueError(f"emb {tuple(emb.shape)} and targets {tuple(targets.shape)} differ")
    b = emb.shape[0]
    if state.lam.shape[0] != b:
        raise ValueError("mix state batch does not match embeddings")

    sim = _flat_normalize(emb) @ _flat_normalize(targets).T / tau
    log_rows = F.log_softmax(sim, dim=1)  # fMRI -> target
    log_cols = F.log_softmax(sim, dim=0)  # target -> fMRI
    idx = torch.arange(b)
    lam = state.lam.to(emb.dtype)
    m = state.partner

    own_fwd = -(lam * log_rows[idx, idx]).sum()
    partner_fwd = -((1.0 - lam) * log_rows[idx, m]).sum()
    own_bwd = -(lam * log_cols[idx, idx]).sum()
    # backward partner term: pairs (l, m_l), weighted by the target's lambda
    partner_bwd = -((1.0 - lam[m]) * log_cols[idx, m]).sum()
    return (own_fwd + partner_fwd + own_bwd + partner_bwd) / (2.0 * b)


def clip_text_loss(emb: torch.Tensor, targets: torch.Tensor, tau: float) -> torch.Tensor:
    """Plain bidirectional InfoNCE (the lambda == 1 case of bimixco_loss)."""
    if tau <= 0:
        raise ValueError(f"tau must be > 0, got {tau}")
    if emb.shape != targets.shape:
        raise ValueError(f"emb {tuple(emb.shape)} and targets {tuple(targets.shape)} differ")
    sim = _flat_normalize(emb) @ _flat_normalize(targets).T / tau
    idx = torch.arange(emb.shape[0])
    fwd = -F.log_softmax(sim, dim=1)[idx, idx].mean()
    bwd = -F.log_softmax(sim, dim=0)[idx, idx].mean()
    return 0.5 * (fwd + bwd)


def prior_loss(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """MSE between predicted and target embeddings."""
    if pred.shape != target.shape:
        raise ValueError(f"pred {tuple(pred.shape)} and target {tuple(target.shape)} differ")
    return F.mse_loss(pred, target)
