import numpy as np
import pytest

from spatioformer.data import ChipBatch, ImageChip, SynthConfig, synth_generate
from spatioformer.model import SpatioformerConfig, init
from spatioformer.numerics import RngStream


@pytest.fixture
def chip3():
    rng = np.random.default_rng(11)
    return ImageChip(rng.uniform(0.1, 0.9, (3, 3, 6)), 135.4, -24.7)


@pytest.fixture
def batch3():
    _, chips = synth_generate(SynthConfig(chip_size=3), 4, RngStream(5))
    return ChipBatch.from_chips(chips)


@pytest.fixture
def sf3():
    cfg = SpatioformerConfig(chip_size=3)
    return init(cfg, RngStream(0)), cfg


@pytest.fixture
def tiny_cfg():
    """A small transformer for tests that train."""
    return {"layers": 1, "heads": 2, "ffn_dim": 16, "head_hidden": 32}
