import pytest
import torch

from answercritic.microworld import WorldConfig, generate_dataset
from answercritic.model import FeatureSpace, ModelConfig, PrefixLM
from answercritic.vocab import Vocabulary


@pytest.fixture(scope="session")
def tiny_world():
    return WorldConfig(
        seed=11,
        n_labelled=12,
        n_unlabelled=8,
        shapes=("circle", "square"),
        colors=("red", "blue"),
        sizes=("small", "big"),
        max_objects=2,
    )


@pytest.fixture(scope="session")
def tiny_splits(tiny_world):
    return generate_dataset(tiny_world)


@pytest.fixture(scope="session")
def tiny_vocab(tiny_world):
    return Vocabulary.for_world(tiny_world)


@pytest.fixture(scope="session")
def tiny_space(tiny_world):
    return FeatureSpace.from_world(tiny_world)


def small_model(vocab, space, seed=0, *, sharpen=0.0, scene_tokens=3):
    config = ModelConfig(
        vocab_size=len(vocab),
        feature_dim=space.dim,
        embed_dim=16,
        n_heads=2,
        n_blocks=2,
        ff_mult=2,
        max_seq_len=48,
        scene_tokens=scene_tokens,
        encoder_hidden=16,
        seed=seed,
    )
    model = PrefixLM(config)
    if sharpen:
        g = torch.Generator().manual_seed(seed + 999)
        with torch.no_grad():
            model.out.weight.uniform_(-sharpen, sharpen, generator=g)
            model.out.bias.uniform_(-sharpen, sharpen, generator=g)
    return model


@pytest.fixture
def tiny_model(tiny_vocab, tiny_space):
    return small_model(tiny_vocab, tiny_space, seed=0)


@pytest.fixture
def sharp_model(tiny_vocab, tiny_space):
    return small_model(tiny_vocab, tiny_space, seed=1, sharpen=1.0)
