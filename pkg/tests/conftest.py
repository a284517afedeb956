import copy
from dataclasses import dataclass
from pathlib import Path

import pytest

from neurons.config import ExperimentConfig, config_from_dict
from neurons.dataio import ClipDataset
from neurons.synthetic import generate_synthetic_dataset

# small enough that a full train/infer/eval chain runs in seconds
TINY = {
    "seed": 11,
    "data": {"num_clips": 4, "height": 16, "width": 16, "voxel_dim": 192},
    "model": {"hidden_dim": 48, "mlp_blocks": 1, "prior_blocks": 1, "tokens": 4,
              "channels": 24, "text_tokens": 4, "attention_dim": 12,
              "text_layers": 1, "text_heads": 2, "text_width": 32},
    "brain": {"epochs": 3, "batch_size": 4},
    "decoupler": {"epochs": 3, "batch_size": 2, "period_epochs": 2,
                  "period_starts": [0, 0, 1, 1]},
    "eval": {"nway_repeats": 10},
}


def tiny_config_dict() -> dict:
    return copy.deepcopy(TINY)


@pytest.fixture()
def tiny_config() -> ExperimentConfig:
    return config_from_dict(tiny_config_dict())


@pytest.fixture()
def tiny_dataset(tiny_config) -> ClipDataset:
    return generate_synthetic_dataset(tiny_config)


@dataclass
class TrainedArtifacts:
    config: ExperimentConfig
    dataset: ClipDataset
    dir: Path
    brain_path: Path
    decoupler_path: Path
    log_path: Path
    brain_result: "object"
    decoupler_result: "object"


@pytest.fixture(scope="session")
def trained(tmp_path_factory) -> TrainedArtifacts:
    """One tiny brain + decoupler training shared by inference-level tests."""
    from neurons.brain import train_brain_model
    from neurons.decoupler import train_decoupler

    root = tmp_path_factory.mktemp("trained")
    cfg = config_from_dict(tiny_config_dict())
    dataset = generate_synthetic_dataset(cfg)
    brain_path = root / "brain.ckpt"
    decoupler_path = root / "decoupler.ckpt"
    log_path = root / "decoupler_log.csv"
    brain_result = train_brain_model(dataset, cfg, out_path=brain_path)
    decoupler_result = train_decoupler(dataset, cfg, brain_path,
                                       out_path=decoupler_path, log_path=log_path)
    return TrainedArtifacts(config=cfg, dataset=dataset, dir=root,
                            brain_path=brain_path, decoupler_path=decoupler_path,
                            log_path=log_path, brain_result=brain_result,
                            decoupler_result=decoupler_result)


@dataclass
class TinyRun:
    config: ExperimentConfig
    dataset: ClipDataset
    gt_dir: Path
    run_dir: Path


@pytest.fixture(scope="session")
def tiny_run(trained, tmp_path_factory) -> TinyRun:
    """Saved dataset + per-sample reconstructions for report/CLI tests."""
    from neurons.aggregator import Reconstructor, save_reconstruction
    from neurons.dataio import save_dataset
    from neurons.rng import stream_seed

    root = tmp_path_factory.mktemp("tiny_run")
    gt_dir = root / "data"
    run_dir = root / "recon"
    save_dataset(trained.dataset, gt_dir)
    recon = Reconstructor.from_checkpoints(trained.brain_path, trained.decoupler_path,
                                           trained.config)
    for i, sample in enumerate(trained.dataset.samples):
        seed = stream_seed(trained.config.seed, "infer", i)
        video, bundle = recon.reconstruct(sample.fmri, seed)
        save_reconstruction(run_dir, str(sample.fmri.clip_id), video, bundle,
                            trained.config, seed)
    return TinyRun(config=trained.config, dataset=trained.dataset,
                   gt_dir=gt_dir, run_dir=run_dir)
