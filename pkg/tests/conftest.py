import sys
from pathlib import Path

import numpy as np
import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))

from mi2m.datasets import Recording  # noqa: E402
from mi2m.tokenizer import PatchGeometry  # noqa: E402

torch.set_num_threads(1)


@pytest.fixture
def tiny_geometry():
    # 4 positions in total: 2 wifi, 2 vision
    return PatchGeometry((1, 4, 2), (1, 2, 4), (2, 2), (2, 2))


def make_recording(T=20, activity=0, subject=0, csi_shape=(2, 6, 4), image_shape=(1, 4, 4), name="rec", seed=0):
    rng = np.random.default_rng(seed)
    return Recording(rng.standard_normal((T, *csi_shape)).astype(np.float32),
                     rng.uniform(size=(T, *image_shape)).astype(np.float32),
                     activity, subject, "A", 0, name)


def tiny_config(**overrides):
    """A whole-pipeline config small enough for unit tests (seconds, not minutes)."""
    from mi2m.config import desk_config

    cfg = desk_config(**overrides)
    cfg.synth.activities, cfg.synth.subjects, cfg.synth.frames_per_recording = 3, 2, 40
    cfg.synth.image_shape = (3, 16, 16)
    cfg.tokenizer.codebook_size, cfg.tokenizer.hidden, cfg.tokenizer.epochs = 32, 16, 1
    cfg.tokenizer.max_patches = 1024
    cfg.encoder.layers, cfg.encoder.width, cfg.encoder.heads, cfg.encoder.epochs = 1, 16, 2, 2
    cfg.encoder.batch_size = 32
    cfg.finetune.epochs, cfg.finetune.hidden, cfg.finetune.budget_seconds = 3, 8, 0.16
    cfg.eval.seeds = (1,)
    return cfg


def tiny_synth(root, environment="A", seed=0, cfg=None):
    from mi2m.datasets import SynthConfig, generate_synthetic

    s = (cfg or tiny_config()).synth
    return generate_synthetic(SynthConfig(Path(root), s.activities, s.subjects, s.frames_per_recording, s.csi_shape,
                                          s.image_shape, s.noise, seed, environment, s.frame_rate))


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    return tiny_synth(tmp_path_factory.mktemp("data") / "A")
