"""Shared fixtures: small models, images, prompt suites and a scratch run store."""
from typing import List

import pytest
import torch
from hypothesis import settings as hypothesis_settings

from src.images import COLOR_WORDS, synthetic_images
from src.models import PromptSuite, ToyVLMSpec
from src.prompt_suite import load_suite
from src.run_store import RunStore
from src.tokenizer import Tokenizer, build_vocab
from src.toy_vlm import ToyVLM, make_toy_vlm
from tests.helpers import SMALL_TARGETS, TINY_SPEC, small_corpus, write_prompt_files

# Model-backed properties are slow to warm up
hypothesis_settings.register_profile("workbench", deadline=None, max_examples=50)
hypothesis_settings.load_profile("workbench")


@pytest.fixture(scope="session")
def tiny_spec() -> ToyVLMSpec:
    """8x8 images, 4 visual tokens, double precision."""
    return ToyVLMSpec(**TINY_SPEC)


@pytest.fixture(scope="session")
def small_tokenizer() -> Tokenizer:
    return build_vocab(small_corpus(), SMALL_TARGETS + list(COLOR_WORDS))


@pytest.fixture(scope="session")
def tiny_model(tiny_spec, small_tokenizer) -> ToyVLM:
    """Raw seeded init, frozen; shared read-only by every test."""
    return ToyVLM(tiny_spec, small_tokenizer, seed=0).freeze()


@pytest.fixture(scope="session")
def other_tiny_model(tiny_spec, small_tokenizer) -> ToyVLM:
    return ToyVLM(tiny_spec, small_tokenizer, seed=1).freeze()


@pytest.fixture(scope="session")
def tiny_images(tiny_spec) -> List[torch.Tensor]:
    return [
        image.pixels
        for image in synthetic_images(0, 3, size=tiny_spec.image_size, dtype=torch.float64)
    ]


@pytest.fixture
def tiny_image(tiny_images) -> torch.Tensor:
    return tiny_images[0]


@pytest.fixture(scope="session")
def small_suite(tmp_path_factory) -> PromptSuite:
    paths = write_prompt_files(tmp_path_factory.mktemp("prompts"))
    return load_suite(paths, split_seed=0, holdout_fraction=0.5)


@pytest.fixture
def store(tmp_path) -> RunStore:
    return RunStore(tmp_path / "store")


@pytest.fixture(scope="session")
def pretrained_model():
    """Default-architecture ToyVLM after the full pretraining (slow to build)."""
    return make_toy_vlm(ToyVLMSpec(), seed=0, pretrain_steps=2000)
