import numpy as np
import pytest

from dropclip.model import ModelConfig, init_params
from dropclip.synthdata import DatasetManifest, VOCAB_SIZE


@pytest.fixture
def tiny_cfg():
    """Smallest config that still has every module: 2 frames, 4 patches each."""
    return ModelConfig(resolution=16, patch=8, frames=2, dim=8,
                       vision_layers=1, vision_heads=2,
                       text_layers=1, text_heads=2,
                       decoder_layers=1, decoder_dim=8, decoder_heads=2,
                       proj_dim=4, vocab_size=VOCAB_SIZE, max_text_len=12,
                       temporal_mode="temporal", mlp_ratio=2)


@pytest.fixture
def tiny_tree(tiny_cfg):
    return init_params(tiny_cfg, seed=7)


@pytest.fixture
def tiny_manifest():
    return DatasetManifest(split="train", seed=11, count=64,
                           resolution=16, frames=2, caption_style="motion")


@pytest.fixture
def clip_batch(tiny_cfg):
    rng = np.random.default_rng(3)
    shape = (4, tiny_cfg.frames, tiny_cfg.resolution, tiny_cfg.resolution, 3)
    return rng.random(shape).astype(np.float32)
