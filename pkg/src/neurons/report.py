"""Sample pairing, metric aggregation, and report emission.

Evaluation pairs one reconstruction per ground-truth clip. Semantic
metrics (N-way retrieval, CLIP-pcc) run on whole videos; pixel metrics
compare the reconstruction frame-by-frame against the ground truth
linearly resampled to the same frame count; Dice compares predicted
bundle masks against ground-truth key-object masks; caption metrics
compare the decoded prompt against the clip caption.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .aggregator import interpolate_fps, load_reconstruction
from .config import ExperimentConfig
from .dataio import ClipDataset, load_dataset
from .errors import DataFormatError
from .metrics import (CiderScorer, caption_metrics, clip_pcc, dice, nway_topk, psnr,
                      ssim, verb_accuracy)
from .rng import numpy_stream

log = logging.getLogger(__name__)

METRIC_ORDER = ("two_way", "fifty_way", "clip_pcc", "ssim", "psnr", "dice",
                "bleu_1", "bleu_2", "bleu_3", "bleu_4", "cider", "verb_acc")

MASK_BINARIZE = 0.75  # rescaled masks are {0.5, 1.0}; midpoint splits them


@dataclass
class EvalPair:
    """One reconstruction matched with its ground truth."""

    sample_id: str
    gt_video: np.ndarray  # [F, 3, H, W]
    pred_video: np.ndarray  # [M, 3, H, W]
    gt_masks: np.ndarray  # [F, H, W] binary
    pred_masks: np.ndarray  # [F, H, W] binary
    gt_caption: str
    pred_caption: str


@dataclass
class MetricReport:
    sample_count: int
    means: dict[str, float]
    stds: dict[str, float]
    rows: list[dict]
    excluded: list[str] = field(default_factory=list)

    def to_json_dict(self) -> dict:
        return {"sample_count": self.sample_count, "means": self.means,
                "stds": self.stds, "rows": self.rows, "excluded": self.excluded}


def _default_backends(config: ExperimentConfig):
    from .backends import (ClassifierStub, FrozenEncoderStub, HashWordEmbedder,
                           LexiconPosTagger)

    return (ClassifierStub.from_config(config), FrozenEncoderStub.from_config(config),
            LexiconPosTagger(), HashWordEmbedder(config.seed))


def evaluate_pairs(pairs: list[EvalPair], config: ExperimentConfig,
                   classifier=None, embedder=None, tagger=None,
                   word_embedder=None) -> MetricReport:
    """All metrics for every pair, reduced to mean/std per metric.

    Distractor sampling derives from the experiment seed and the pair's
    position, so reruns over the same pair list reproduce exact rates.
    """
    if not pairs:
        raise ValueError("no evaluation pairs")
    if classifier is None or embedder is None or tagger is None or word_embedder is None:
        c, e, t, w = _default_backends(config)
        classifier = classifier or c
        embedder = embedder or e
        tagger = tagger or t
        word_embedder = word_embedder or w

    ev = config.eval
    cider = CiderScorer([[p.gt_caption] for p in pairs])
    rows = []
    for i, pair in enumerate(pairs):
        gt_probs = classifier.class_probs(pair.gt_video)
        pred_probs = classifier.class_probs(pair.pred_video)
        row = {"sample_id": pair.sample_id}
        row["two_way"] = nway_topk(gt_probs, pred_probs, 2, ev.top_k,
                                   numpy_stream(config.seed, "eval.nway", 2 * i),
                                   repeats=ev.nway_repeats)
        row["fifty_way"] = nway_topk(gt_probs, pred_probs, 50, ev.top_k,
                                     numpy_stream(config.seed, "eval.nway", 2 * i + 1),
                                     repeats=ev.nway_repeats)
        row["clip_pcc"] = clip_pcc(pair.pred_video, embedder)

        gt = pair.gt_video
        if gt.shape[0] != pair.pred_video.shape[0]:
            gt = interpolate_fps(gt, num_frames=pair.pred_video.shape[0])
        row["ssim"] = float(np.mean([ssim(a, b) for a, b in zip(pair.pred_video, gt)]))
        row["psnr"] = float(np.mean([psnr(a, b) for a, b in zip(pair.pred_video, gt)]))

        row["dice"] = dice(pair.pred_masks.astype(np.uint8), pair.gt_masks.astype(np.uint8))
        row.update(caption_metrics(pair.pred_caption, [pair.gt_caption], cider, i))
        row["verb_acc"] = verb_accuracy(pair.pred_caption, pair.gt_caption,
                                        tagger, word_embedder,
                                        threshold=ev.verb_sim_threshold)
        rows.append(row)

    means = {m: float(np.mean([r[m] for r in rows])) for m in METRIC_ORDER}
    stds = {m: float(np.std([r[m] for r in rows])) for m in METRIC_ORDER}
    return MetricReport(sample_count=len(rows), means=means, stds=stds, rows=rows)


def pairs_from_dirs(run_dir: Path, gt_dir: Path,
                    config: ExperimentConfig | None = None
                    ) -> tuple[list[EvalPair], list[str], ClipDataset]:
    """Match sample_* reconstruction dirs to dataset clips by clip id.

    Returns (pairs, excluded descriptions, dataset). Reconstructions whose
    clip is missing, and clips never reconstructed, are listed and skipped.
    """
    from .dataio import dataset_codecs

    run_dir, gt_dir = Path(run_dir), Path(gt_dir)
    codecs = dataset_codecs(config) if config is not None else (None, None)
    dataset = load_dataset(gt_dir, *codecs)
    by_clip = {s.fmri.clip_id: s for s in dataset.samples}
    sample_dirs = sorted(d for d in run_dir.glob("sample_*") if d.is_dir())
    if not sample_dirs:
        raise DataFormatError(f"no sample_* directories under {run_dir}")

    pairs: list[EvalPair] = []
    excluded: list[str] = []
    seen = set()
    for sdir in sample_dirs:
        try:
            rec = load_reconstruction(sdir)
        except (FileNotFoundError, json.JSONDecodeError, KeyError) as exc:
            excluded.append(f"{sdir.name}: unreadable ({exc})")
            continue
        clip_id = rec["meta"].get("clip_id")
        gt = by_clip.get(clip_id)
        if gt is None:
            excluded.append(f"{sdir.name}: no ground-truth clip '{clip_id}'")
            continue
        seen.add(clip_id)
        pairs.append(EvalPair(
            sample_id=str(clip_id),
            gt_video=gt.clip.frames,
            pred_video=rec["video"],
            gt_masks=gt.annotations.key_masks.astype(np.uint8),
            pred_masks=(rec["masks"] > MASK_BINARIZE).astype(np.uint8),
            gt_caption=gt.annotations.caption_text,
            pred_caption=rec["prompt"],
        ))
    for clip_id in sorted(by_clip.keys() - seen):
        excluded.append(f"{clip_id}: no reconstruction")
    if not pairs:
        raise DataFormatError(f"no pairable samples between {run_dir} and {gt_dir}")
    return pairs, excluded, dataset


def self_pairs(dataset: ClipDataset) -> list[EvalPair]:
    """Ground truth against itself: the report's fixed-point sanity check."""
    return [EvalPair(
        sample_id=str(s.fmri.clip_id),
        gt_video=s.clip.frames, pred_video=s.clip.frames,
        gt_masks=s.annotations.key_masks.astype(np.uint8),
        pred_masks=s.annotations.key_masks.astype(np.uint8),
        gt_caption=s.annotations.caption_text, pred_caption=s.annotations.caption_text,
    ) for s in dataset.samples]


# ---------------------------------------------------------------------------
# rendering

def _fmt(mean: float, std: float) -> str:
    return f"{mean:.4f} ± {std:.4f}"


def render_table(report: MetricReport) -> str:
    """Human-readable summary; column groups follow the results-table layout."""
    m, s = report.means, report.stds
    col = 20
    lines = [
        f"reconstruction report over {report.sample_count} sample(s), mean ± std",
        "",
        "semantic / consistency (video level)",
        "  " + "".join(h.ljust(col) for h in ("2-way", "50-way", "CLIP-pcc")),
        "  " + "".join(_fmt(m[k], s[k]).ljust(col)
                       for k in ("two_way", "fifty_way", "clip_pcc")),
        "",
        "pixel level (vs time-aligned ground truth)",
        "  " + "".join(h.ljust(col) for h in ("SSIM", "PSNR (dB)")),
        "  " + "".join(_fmt(m[k], s[k]).ljust(col) for k in ("ssim", "psnr")),
        "",
        "key-object segmentation",
        f"  Dice {_fmt(m['dice'], s['dice'])}",
        "",
        "caption quality",
        f"  BLEU-1 {_fmt(m['bleu_1'], s['bleu_1'])}   BLEU-2 {_fmt(m['bleu_2'], s['bleu_2'])}",
        f"  BLEU-3 {_fmt(m['bleu_3'], s['bleu_3'])}   BLEU-4 {_fmt(m['bleu_4'], s['bleu_4'])}",
        f"  CIDEr  {_fmt(m['cider'], s['cider'])}   verb accuracy {_fmt(m['verb_acc'], s['verb_acc'])}",
    ]
    if report.excluded:
        lines += ["", "excluded samples:"] + [f"  - {x}" for x in report.excluded]
    return "\n".join(lines) + "\n"


def write_report(report: MetricReport, csv_path: Path, txt_path: Path,
                 json_path: Path | None = None) -> None:
    """report.csv: per-sample rows plus mean/std rows; report.txt: table."""
    csv_path, txt_path = Path(csv_path), Path(txt_path)
    csv_path.parent.mkdir(parents=True, exist_ok=True)
    header = ["sample_id", *METRIC_ORDER]
    lines = [",".join(header)]
    for row in report.rows:
        lines.append(",".join([str(row["sample_id"])]
                              + [repr(float(row[k])) for k in METRIC_ORDER]))
    lines.append(",".join(["mean"] + [repr(report.means[k]) for k in METRIC_ORDER]))
    lines.append(",".join(["std"] + [repr(report.stds[k]) for k in METRIC_ORDER]))
    csv_path.write_text("\n".join(lines) + "\n")
    txt_path.write_text(render_table(report))
    if json_path is not None:
        Path(json_path).write_text(
            json.dumps(report.to_json_dict(), indent=2, sort_keys=True) + "\n")


def emit_report(run_dir: Path, gt_dir: Path, out_prefix: Path,
                config: ExperimentConfig | None = None) -> tuple[MetricReport, dict]:
    """Evaluate a reconstruction run directory and write csv/txt/json files."""
    cfg = config if config is not None else ExperimentConfig()
    pairs, excluded, _ = pairs_from_dirs(run_dir, gt_dir, cfg)
    report = evaluate_pairs(pairs, cfg)
    report.excluded = excluded
    out_prefix = Path(out_prefix)
    paths = {"csv": out_prefix.with_suffix(".csv"), "txt": out_prefix.with_suffix(".txt"),
             "json": out_prefix.with_suffix(".json")}
    write_report(report, paths["csv"], paths["txt"], paths["json"])
    return report, paths
