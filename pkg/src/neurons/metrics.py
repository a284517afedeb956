"""Metric primitives: retrieval-style classification, pixel quality,
mask overlap, caption n-gram scores, and verb accuracy.

All functions are pure; randomness (distractor sampling, tie-breaking)
comes in through an explicit numpy Generator.
"""

from __future__ import annotations

import logging
import math
from collections import Counter

import numpy as np
from skimage.metrics import structural_similarity

from .errors import ShapeError

log = logging.getLogger(__name__)

PSNR_CAP_DB = 100.0


def nway_topk(gt_probs: np.ndarray, pred_probs: np.ndarray, n: int, k: int,
              rng: np.random.Generator, repeats: int = 100) -> float:
    """Success rate of the ground-truth class over repeated N-way tests.

    Each repeat draws N-1 distractor classes uniformly without replacement;
    success means the gt class (argmax of gt_probs) ranks in the top K of
    pred_probs restricted to the candidates. Ties are broken uniformly at
    random via a per-repeat candidate shuffle.
    """
    gt_probs = np.asarray(gt_probs, dtype=np.float64)
    pred_probs = np.asarray(pred_probs, dtype=np.float64)
    if gt_probs.shape != pred_probs.shape or gt_probs.ndim != 1:
        raise ShapeError(f"probability vectors must match: {gt_probs.shape} vs {pred_probs.shape}")
    labels = gt_probs.shape[0]
    if n > labels:
        raise ValueError(f"n={n} exceeds label-set size {labels}")
    if n < 2 or not 1 <= k < n:
        raise ValueError(f"need n >= 2 and 1 <= k < n, got n={n} k={k}")
    gt_class = int(np.argmax(gt_probs))
    others = np.delete(np.arange(labels), gt_class)
    hits = 0
    for _ in range(repeats):
        distractors = rng.choice(others, size=n - 1, replace=False)
        candidates = np.concatenate([[gt_class], distractors])
        candidates = candidates[rng.permutation(n)]  # shuffle = uniform tie-break
        order = np.argsort(-pred_probs[candidates], kind="stable")
        if gt_class in candidates[order[:k]]:
            hits += 1
    return hits / repeats


def clip_pcc(video: np.ndarray, embedder) -> float:
    """Mean cosine similarity between embeddings of adjacent frames.

    Zero-norm embeddings drop their pairs (logged); a video whose pairs all
    drop raises.
    """
    video = np.asarray(video)
    if video.ndim != 4 or video.shape[0] < 2:
        raise ShapeError(f"need [F>=2, 3, H, W], got {video.shape}")
    embs = [np.asarray(embedder.frame_embed(f), dtype=np.float64).reshape(-1)
            for f in video]
    sims = []
    dropped = 0
    for a, b in zip(embs[:-1], embs[1:]):
        na, nb = np.linalg.norm(a), np.linalg.norm(b)
        if na == 0.0 or nb == 0.0:
            dropped += 1
            continue
        sims.append(float(a @ b / (na * nb)))
    if dropped:
        log.warning("clip_pcc: dropped %d adjacent pair(s) with zero-norm embeddings", dropped)
    if not sims:
        raise ValueError("all adjacent pairs had zero-norm embeddings")
    return float(np.mean(sims))


def ssim(a: np.ndarray, b: np.ndarray) -> float:
    """SSIM with the standard 11x11 Gaussian window (sigma 1.5), range 1."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch: {a.shape} vs {b.shape}")
    if a.ndim == 3 and a.shape[0] == 3:  # [3, H, W] -> channel-last
        a, b = a.transpose(1, 2, 0), b.transpose(1, 2, 0)
    channel_axis = -1 if a.ndim == 3 else None
    return float(structural_similarity(
        a, b, data_range=1.0, gaussian_weights=True, sigma=1.5,
        use_sample_covariance=False, K1=0.01, K2=0.03, channel_axis=channel_axis))


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """10*log10(1/MSE) for unit-range inputs, capped at 100 dB."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP_DB
    return min(10.0 * math.log10(1.0 / mse), PSNR_CAP_DB)


def dice(pred_mask: np.ndarray, gt_mask: np.ndarray) -> float:
    """2|A&B| / (|A|+|B|) for binary masks; both empty -> 1.0 (logged)."""
    pred = np.asarray(pred_mask)
    gt = np.asarray(gt_mask)
    if pred.shape != gt.shape:
        raise ShapeError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    for name, m in (("pred", pred), ("gt", gt)):
        if not np.isin(m, (0, 1)).all():
            raise ValueError(f"{name} mask must be binary (0/1)")
    a = pred.astype(bool)
    b = gt.astype(bool)
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        log.warning("dice: both masks empty, returning 1.0 by convention")
        return 1.0
    return 2.0 * int((a & b).sum()) / total


# ---------------------------------------------------------------------------
# caption metrics

def _ngrams(tokens: list[str], n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def _tokenize(text: str) -> list[str]:
    return text.lower().replace(",", " ").replace(".", " ").split()


def bleu_scores(pred: str, refs: list[str], max_n: int = 4) -> list[float]:
    """Cumulative BLEU-1..max_n with brevity penalty, single prediction.

    Clipped n-gram precision per order; BLEU-n is the brevity penalty times
    the geometric mean of orders 1..n (zero if any precision is zero).
    """
    hyp = _tokenize(pred)
    ref_tok = [_tokenize(r) for r in refs]
    if not hyp or not ref_tok or any(not r for r in ref_tok):
        raise ValueError("prediction and references must be non-empty")
    c = len(hyp)
    # closest reference length; ties favor the shorter reference
    r = min((abs(len(t) - c), len(t)) for t in ref_tok)[1]
    bp = 1.0 if c > r else math.exp(1.0 - r / c)
    precisions = []
    for n in range(1, max_n + 1):
        hyp_counts = _ngrams(hyp, n)
        total = sum(hyp_counts.values())
        if total == 0:
            precisions.append(0.0)
            continue
        clipped = 0
        for gram, count in hyp_counts.items():
            best = max(_ngrams(t, n).get(gram, 0) for t in ref_tok)
            clipped += min(count, best)
        precisions.append(clipped / total)
    scores = []
    for n in range(1, max_n + 1):
        ps = precisions[:n]
        if min(ps) <= 0.0:
            scores.append(0.0)
        else:
            scores.append(bp * math.exp(sum(math.log(p) for p in ps) / n))
    return scores


class CiderScorer:
    """Corpus-level CIDEr: tf-idf n-gram cosine (n=1..4), averaged, x10.

    The idf table comes from the reference corpus; every prediction is then
    scored against its own references.
    """

    def __init__(self, refs_corpus: list[list[str]], max_n: int = 4):
        if not refs_corpus or any(not refs for refs in refs_corpus):
            raise ValueError("CIDEr needs a non-empty reference corpus")
        self.max_n = max_n
        self.num_docs = len(refs_corpus)
        self._df: list[Counter] = [Counter() for _ in range(max_n)]
        self._refs = [[_tokenize(r) for r in refs] for refs in refs_corpus]
        for refs in self._refs:
            for n in range(1, max_n + 1):
                seen = set()
                for r in refs:
                    seen.update(_ngrams(r, n).keys())
                for gram in seen:
                    self._df[n - 1][gram] += 1

    def _tfidf(self, tokens: list[str], n: int) -> dict:
        counts = _ngrams(tokens, n)
        total = sum(counts.values())
        if total == 0:
            return {}
        vec = {}
        for gram, count in counts.items():
            idf = math.log(self.num_docs / max(self._df[n - 1].get(gram, 0), 1))
            vec[gram] = (count / total) * idf
        return vec

    @staticmethod
    def _cosine(u: dict, v: dict) -> float:
        dot = sum(val * v.get(gram, 0.0) for gram, val in u.items())
        nu = math.sqrt(sum(val * val for val in u.values()))
        nv = math.sqrt(sum(val * val for val in v.values()))
        if nu == 0.0 or nv == 0.0:
            return 0.0
        return dot / (nu * nv)

    def score(self, pred: str, doc_index: int) -> float:
        hyp = _tokenize(pred)
        if not hyp:
            raise ValueError("prediction must be non-empty")
        refs = self._refs[doc_index]
        per_n = []
        for n in range(1, self.max_n + 1):
            hv = self._tfidf(hyp, n)
            sims = [self._cosine(hv, self._tfidf(r, n)) for r in refs]
            per_n.append(sum(sims) / len(sims))
        return 10.0 * sum(per_n) / self.max_n


def caption_metrics(pred: str, refs: list[str],
                    cider_scorer: CiderScorer | None = None,
                    doc_index: int = 0) -> dict[str, float]:
    """BLEU-1..4 plus CIDEr (when a corpus scorer is supplied)."""
    b1, b2, b3, b4 = bleu_scores(pred, refs)
    out = {"bleu_1": b1, "bleu_2": b2, "bleu_3": b3, "bleu_4": b4}
    if cider_scorer is not None:
        out["cider"] = cider_scorer.score(pred, doc_index)
    return out


def verb_accuracy(pred: str, ref: str, tagger, embedder,
                  threshold: float = 0.8) -> float:
    """Fraction of predicted verbs matching any reference verb by cosine.

    A predicted verb counts iff its best similarity against the reference
    verbs exceeds the threshold. No predicted verbs -> 0.0 (logged).
    """
    pred_verbs = tagger.verbs(pred)
    ref_verbs = tagger.verbs(ref)
    if not pred_verbs:
        log.warning("verb_accuracy: no verbs found in prediction %r", pred)
        return 0.0
    if not ref_verbs:
        return 0.0
    ref_embs = [embedder.embed(v) for v in ref_verbs]
    correct = 0
    for verb in pred_verbs:
        e = embedder.embed(verb)
        best = max(float(e @ r / (np.linalg.norm(e) * np.linalg.norm(r))) for r in ref_embs)
        if best > threshold:
            correct += 1
    return correct / len(pred_verbs)
