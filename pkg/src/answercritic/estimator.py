"""Scikit-learn style estimator facade over the trainer.

``SelfCriticalExplainer`` fits on a list of samples and predicts
(rationale, answer) pairs, so it composes with sklearn tooling
(``get_params``/``set_params``/``clone``) like any other estimator.
"""

from __future__ import annotations

import dataclasses

from sklearn.base import BaseEstimator

from .microworld import Sample, WorldConfig, parse_question, validate_sample
from .model import FeatureSpace, ModelConfig, PrefixLM
from .runconfig import TrainConfig, preset_train_config
from .trainer import EvalOutcome, InferResult, Trainer, evaluate, predict_batch
from .vocab import Vocabulary


def check_samples(X, *, validate: bool = True) -> list[Sample]:
    samples = list(X)
    if not samples:
        raise ValueError("need at least one sample")
    for s in samples:
        if not isinstance(s, Sample):
            raise TypeError(f"expected Sample instances, got {type(s).__name__}")
        if validate:
            validate_sample(s)
    return samples


def world_from_samples(samples: list[Sample]) -> WorldConfig:
    """Smallest attribute inventory covering the given samples."""
    shapes, colors, sizes, kinds = set(), set(), set(), set()
    max_objects = 1
    for s in samples:
        max_objects = max(max_objects, len(s.scene.objects))
        for o in s.scene.objects:
            shapes.add(o.shape)
            colors.add(o.color)
            sizes.add(o.size)
        kinds.add(parse_question(s.question)[0])
    n_labelled = sum(1 for s in samples if s.labelled)
    return WorldConfig(
        seed=0,
        n_labelled=max(n_labelled, 0),
        n_unlabelled=max(len(samples) - n_labelled, 1 - min(n_labelled, 1)),
        shapes=tuple(sorted(shapes)),
        colors=tuple(sorted(colors)),
        sizes=tuple(sorted(sizes)),
        max_objects=max_objects,
        question_kinds=tuple(sorted(kinds)),
    ).validate()


class SelfCriticalExplainer(BaseEstimator):
    """Fit an answer+rationale model with self-critical, semi-supervised
    training; predict (rationale, answer) pairs for new samples.

    ``preset`` selects the ablation rung (row1..row5 or "" for raw flags);
    ``world`` optionally pins the attribute inventory (needed when predict
    will see attributes absent from the training samples).
    """

    def __init__(
        self,
        preset: str = "row5",
        epochs: int = 30,
        learning_rate: float = 1e-5,
        weight_decay: float = 1e-5,
        batch_size: int = 4,
        beam_width: int = 2,
        lambda_weight: float = 10.0,
        mix: str = "1:1",
        scr_warmup_epochs: int = 1,
        inference: str | None = None,
        embed_dim: int = 64,
        n_heads: int = 4,
        n_blocks: int = 2,
        ff_mult: int = 4,
        max_seq_len: int = 64,
        scene_tokens: int = 10,
        encoder_hidden: int = 128,
        score_mean: str = "arithmetic",
        train_encoder: bool = True,
        seed: int = 0,
        world: WorldConfig | None = None,
        extra_tokens: tuple[str, ...] = (),
        max_rationale_len: int = 12,
        max_answer_len: int = 4,
        frontier_cap: int = 512,
    ):
        self.preset = preset
        self.epochs = epochs
        self.learning_rate = learning_rate
        self.weight_decay = weight_decay
        self.batch_size = batch_size
        self.beam_width = beam_width
        self.lambda_weight = lambda_weight
        self.mix = mix
        self.scr_warmup_epochs = scr_warmup_epochs
        self.inference = inference
        self.embed_dim = embed_dim
        self.n_heads = n_heads
        self.n_blocks = n_blocks
        self.ff_mult = ff_mult
        self.max_seq_len = max_seq_len
        self.scene_tokens = scene_tokens
        self.encoder_hidden = encoder_hidden
        self.score_mean = score_mean
        self.train_encoder = train_encoder
        self.seed = seed
        self.world = world
        self.extra_tokens = extra_tokens
        self.max_rationale_len = max_rationale_len
        self.max_answer_len = max_answer_len
        self.frontier_cap = frontier_cap

    # --- config assembly ---------------------------------------------------

    def resolved_train_config(self) -> TrainConfig:
        config = TrainConfig(
            lambda_weight=self.lambda_weight,
            beam_width=self.beam_width,
            batch_size=self.batch_size,
            mix=self.mix,
            learning_rate=self.learning_rate,
            weight_decay=self.weight_decay,
            epochs=self.epochs,
            seed=self.seed,
            scr_warmup_epochs=self.scr_warmup_epochs,
            max_rationale_len=self.max_rationale_len,
            max_answer_len=self.max_answer_len,
            frontier_cap=self.frontier_cap,
        )
        config = preset_train_config(config, self.preset)
        if self.inference is not None:
            config = dataclasses.replace(config, inference=self.inference)
        return config.validate()

    # --- sklearn surface ------------------------------------------------------

    def fit(self, X, y=None) -> "SelfCriticalExplainer":
        samples = check_samples(X)
        world = self.world if self.world is not None else world_from_samples(samples)
        vocab = Vocabulary.for_world(world, extra_tokens=tuple(self.extra_tokens))
        space = FeatureSpace.from_world(world)
        config = self.resolved_train_config()
        model = PrefixLM(
            ModelConfig(
                vocab_size=len(vocab),
                feature_dim=space.dim,
                embed_dim=self.embed_dim,
                n_heads=self.n_heads,
                n_blocks=self.n_blocks,
                ff_mult=self.ff_mult,
                max_seq_len=self.max_seq_len,
                scene_tokens=self.scene_tokens,
                encoder_hidden=self.encoder_hidden,
                score_mean=self.score_mean,
                train_encoder=self.train_encoder,
                seed=self.seed,
            )
        )
        Trainer(model, vocab, space, config).run(samples)
        self.world_ = world
        self.vocab_ = vocab
        self.space_ = space
        self.model_ = model
        self.config_ = config
        return self

    def _check_fitted(self) -> None:
        if not hasattr(self, "model_"):
            raise RuntimeError("this estimator is not fitted yet; call fit first")

    def predict(self, X) -> list[InferResult]:
        self._check_fitted()
        samples = check_samples(X, validate=False)
        return predict_batch(self.model_, self.vocab_, self.space_, samples, self.config_)

    def score(self, X, y=None) -> float:
        """Answer accuracy against the samples' own answers."""
        self._check_fitted()
        samples = check_samples(X)
        results = self.predict(samples)
        hits = sum(1 for s, r in zip(samples, results) if tuple(s.answer) == r.answer)
        return hits / len(samples)

    def evaluate(self, X) -> EvalOutcome:
        self._check_fitted()
        samples = check_samples(X)
        return evaluate(self.model_, self.vocab_, self.space_, samples, self.config_)
