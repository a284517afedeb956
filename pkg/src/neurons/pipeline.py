"""Run orchestration: data -> train-brain -> train-decoupler -> infer -> eval.

Every stage reads only on-disk artifacts from earlier stages, records the
sha256 of each output in a manifest, and is skipped on resume when its
recorded outputs still exist and hash-verify. The manifest is written
atomically after every stage so an interrupted run resumes cleanly.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import time
from dataclasses import dataclass, field
from pathlib import Path

from .config import ExperimentConfig, config_hash
from .errors import StageError
from .rng import stream_seed

log = logging.getLogger(__name__)

STAGES = ("prepare-data", "train-brain", "train-decoupler", "infer", "eval")
MANIFEST_NAME = "manifest.json"


def _file_sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def hash_tree(root: Path) -> dict[str, str]:
    """{relative path: sha256} for a file or every file under a directory."""
    root = Path(root)
    if root.is_file():
        return {root.name: _file_sha256(root)}
    out = {}
    for path in sorted(p for p in root.rglob("*") if p.is_file()):
        out[path.relative_to(root).as_posix()] = _file_sha256(path)
    return out


@dataclass
class RunManifest:
    config_hash: str
    seed: int
    stages: dict[str, dict] = field(default_factory=dict)
    created_at: str = ""
    updated_at: str = ""

    def to_dict(self) -> dict:
        return {"config_hash": self.config_hash, "seed": self.seed,
                "stages": self.stages, "created_at": self.created_at,
                "updated_at": self.updated_at}

    @classmethod
    def from_dict(cls, raw: dict) -> "RunManifest":
        return cls(config_hash=raw["config_hash"], seed=raw["seed"],
                   stages=dict(raw.get("stages", {})),
                   created_at=raw.get("created_at", ""),
                   updated_at=raw.get("updated_at", ""))


def write_manifest(manifest: RunManifest, path: Path) -> None:
    """Atomic write: tmp file plus rename, so readers never see halves."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(manifest.to_dict(), indent=2, sort_keys=True) + "\n")
    os.replace(tmp, path)


def load_manifest(path: Path) -> RunManifest:
    return RunManifest.from_dict(json.loads(Path(path).read_text()))


def verify_outputs(out_dir: Path, outputs: dict[str, str]) -> list[str]:
    """Paths whose recorded hash no longer matches (or that vanished)."""
    bad = []
    for rel, digest in outputs.items():
        path = Path(out_dir) / rel
        if not path.is_file():
            bad.append(f"{rel}: missing")
        elif _file_sha256(path) != digest:
            bad.append(f"{rel}: hash mismatch")
    return bad


def _stage_complete(manifest: RunManifest, name: str, out_dir: Path) -> bool:
    info = manifest.stages.get(name)
    if not info or info.get("status") != "ok":
        return False
    stale = verify_outputs(out_dir, info.get("outputs", {}))
    if stale:
        log.info("stage %s outputs stale (%s); rerunning", name, "; ".join(stale[:3]))
        return False
    return True


def run_pipeline(config: ExperimentConfig, out_dir: Path, resume: bool = True) -> RunManifest:
    """Execute (or resume) all five stages under one output directory.

    Returns the manifest; a stage failure records the partial lineage and
    raises StageError. Reruns with the same config and seed reproduce
    byte-identical stage outputs.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest_path = out_dir / MANIFEST_NAME

    cfg_hash = config_hash(config)
    manifest = None
    if resume and manifest_path.exists():
        manifest = load_manifest(manifest_path)
        if manifest.config_hash != cfg_hash or manifest.seed != config.seed:
            log.warning("manifest belongs to a different config/seed; restarting run")
            manifest = None
    if manifest is None:
        manifest = RunManifest(config_hash=cfg_hash, seed=config.seed,
                               created_at=time.strftime("%Y-%m-%dT%H:%M:%S"))

    data_dir = out_dir / "data"
    brain_ckpt = out_dir / "brain.ckpt"
    dec_ckpt = out_dir / "decoupler.ckpt"
    dec_log = out_dir / "decoupler_log.csv"
    recon_dir = out_dir / "recon"
    report_prefix = out_dir / "report"

    def run_stage(name: str, fn, outputs: list[Path]) -> None:
        if _stage_complete(manifest, name, out_dir):
            log.info("stage %s already complete; skipping", name)
            return
        start = time.monotonic()
        try:
            fn()
        except Exception as exc:
            manifest.stages[name] = {"status": "failed", "error": str(exc),
                                     "duration_s": round(time.monotonic() - start, 3)}
            manifest.updated_at = time.strftime("%Y-%m-%dT%H:%M:%S")
            write_manifest(manifest, manifest_path)
            raise StageError(f"stage '{name}' failed: {exc}") from exc
        recorded: dict[str, str] = {}
        for out in outputs:
            for rel, digest in hash_tree(out).items():
                key = (out.relative_to(out_dir) / rel).as_posix() if out.is_dir() \
                    else out.relative_to(out_dir).as_posix()
                recorded[key] = digest
        manifest.stages[name] = {"status": "ok", "outputs": recorded,
                                 "duration_s": round(time.monotonic() - start, 3)}
        manifest.updated_at = time.strftime("%Y-%m-%dT%H:%M:%S")
        write_manifest(manifest, manifest_path)
        log.info("stage %s done in %.1fs", name, time.monotonic() - start)

    def stage_data():
        from .dataio import save_dataset
        from .synthetic import generate_synthetic_dataset
        save_dataset(generate_synthetic_dataset(config), data_dir)

    def stage_brain():
        from .brain import train_brain_model
        from .dataio import dataset_codecs, load_dataset
        train_brain_model(load_dataset(data_dir, *dataset_codecs(config)), config,
                          out_path=brain_ckpt)

    def stage_decoupler():
        from .dataio import dataset_codecs, load_dataset
        from .decoupler import train_decoupler
        train_decoupler(load_dataset(data_dir, *dataset_codecs(config)), config,
                        brain_ckpt, out_path=dec_ckpt, log_path=dec_log)

    def stage_infer():
        from .aggregator import Reconstructor, save_reconstruction
        from .dataio import dataset_codecs, load_dataset
        dataset = load_dataset(data_dir, *dataset_codecs(config))
        recon = Reconstructor.from_checkpoints(brain_ckpt, dec_ckpt, config)
        for i, sample in enumerate(dataset.samples):
            seed = stream_seed(config.seed, "infer", i)
            video, bundle = recon.reconstruct(sample.fmri, seed)
            save_reconstruction(recon_dir, str(sample.fmri.clip_id), video, bundle,
                                config, seed)

    def stage_eval():
        from .report import emit_report
        emit_report(recon_dir, data_dir, report_prefix, config)

    run_stage("prepare-data", stage_data, [data_dir])
    run_stage("train-brain", stage_brain, [brain_ckpt])
    run_stage("train-decoupler", stage_decoupler, [dec_ckpt, dec_log])
    run_stage("infer", stage_infer, [recon_dir])
    run_stage("eval", stage_eval, [report_prefix.with_suffix(".csv"),
                                   report_prefix.with_suffix(".txt"),
                                   report_prefix.with_suffix(".json")])
    return manifest
