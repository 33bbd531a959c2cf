"""Shared tiny configurations so unit tests stay fast."""

import numpy as np
import pytest

from fusionrep import data, encoders
from fusionrep.fusion import FusionConfig
from fusionrep.model import ModelConfig
from fusionrep.objectives import MrlConfig


def tiny_model_cfg(mrl=True, share=True, locked_image=0) -> ModelConfig:
    return ModelConfig(
        image=encoders.image_config(
            d_model=8, heads=2, mlp_dim=16, modules=2, layers_per_module=1, seq_len=4, input_dim=3,
            locked_layers=locked_image,
        ),
        text=encoders.text_config(d_model=8, heads=2, mlp_dim=16, layers_per_module=1, seq_len=6),
        fusion=FusionConfig(layers=1, heads=2, mlp_dim=16),
        mrl=MrlConfig([(2, 0.1), (4, 0.1), (8, 1.0)]) if mrl else None,
        share_loss_scalars=share,
    )


def tiny_corpus_spec(**kw) -> data.LatentTopicSpec:
    base = dict(
        topic_count=2, pins_per_topic=16, boards_per_topic=2, attribute_count=3, distractor_pins=24,
        patch_count=4, patch_dim=3, latent_dim=4,
    )
    base.update(kw)
    return data.LatentTopicSpec(**base)


@pytest.fixture
def model_cfg():
    return tiny_model_cfg()


@pytest.fixture(scope="session")
def tiny_corpus():
    return data.generate_synthetic_corpus(tiny_corpus_spec(), seed=3)


def unit_rows(rng, n, d):
    x = rng.normal(size=(n, d))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for n in sorted(RESULTS):
            terminalreporter.write_line(RESULTS[n])
