"""Training loop with semi-supervised batch mixing, per-epoch checkpoints,
a line-delimited run log, and the two-stage rationale-then-answer inference.
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass
from pathlib import Path
from random import Random

import torch

from .checkpoint import (
    CheckpointError,
    load_checkpoint,
    restore_model,
    restore_optimizer,
    save_checkpoint,
    verify_compatibility,
)
from .decoding import Candidate, beam_search_many, build_candidate_sets, greedy_many
from .losses import (
    LossBreakdown,
    compute_rewards,
    encode_batch,
    loss_answer,
    loss_explanation,
    loss_explanatory_answer,
    loss_reinforce,
    total_loss,
)
from .metrics import FILTERED, UNFILTERED, EvalPair, MetricReport, build_report
from .microworld import Sample
from .model import FeatureSpace, PrefixLM
from .runconfig import TrainConfig
from .vocab import Vocabulary

RUN_LOG_NAME = "run_log.jsonl"
LAST_CHECKPOINT = "checkpoint_last.npz"


class TrainingDiverged(RuntimeError):
    pass


def _zero(model: PrefixLM) -> torch.Tensor:
    return torch.zeros((), dtype=model.config.torch_dtype)


def train_step(
    model: PrefixLM,
    optimizer: torch.optim.Optimizer,
    vocab: Vocabulary,
    space: FeatureSpace,
    labelled: list[Sample],
    unlabelled: list[Sample],
    config: TrainConfig,
    *,
    scr_active: bool,
) -> tuple[LossBreakdown, dict]:
    """One update: sample candidates without gradients, freeze rewards, then
    re-score every loss with gradients and take a single optimizer step."""
    samples = list(labelled) + list(unlabelled)
    if not samples:
        raise ValueError("train_step needs at least one sample")
    batch = encode_batch(samples, vocab, space, model.config.torch_dtype)

    candidate_sets = None
    records = None
    if scr_active:
        candidate_sets = build_candidate_sets(
            samples,
            model,
            vocab,
            space,
            config.beam_width,
            config.max_rationale_len,
            frontier_cap=config.frontier_cap,
        )
        records = compute_rewards(model, vocab, batch, candidate_sets)

    l_answer = (
        loss_answer(model, vocab, batch, labelled_only=not config.unlabelled_answer_ce)
        if config.use_answer_ce
        else _zero(model)
    )
    l_explanation = (
        loss_explanation(model, vocab, batch) if config.use_explanation_ce else _zero(model)
    )
    if scr_active:
        l_expl_answer = loss_explanatory_answer(
            model, vocab, batch, candidate_sets, human_only=config.explanatory_human_only
        )
        l_reinforce = loss_reinforce(model, vocab, batch, candidate_sets, records)
    else:
        l_expl_answer = _zero(model)
        l_reinforce = _zero(model)

    total = total_loss(l_answer, l_explanation, l_expl_answer, l_reinforce, config.lambda_weight)
    if not bool(torch.isfinite(total)):
        raise TrainingDiverged(
            f"non-finite loss: answer={float(l_answer)} explanation={float(l_explanation)} "
            f"explanatory_answer={float(l_expl_answer)} reinforce={float(l_reinforce)}"
        )
    optimizer.zero_grad()
    total.backward()
    optimizer.step()

    breakdown = LossBreakdown(
        answer=float(l_answer),
        explanation=float(l_explanation),
        explanatory_answer=float(l_expl_answer),
        reinforce=float(l_reinforce),
        total=float(total),
    )
    stats: dict = {"mean_advantage": None, "mean_base_score": None, "mean_expl_score": None}
    if records:
        advantages = [a for r in records for a in r.advantages]
        expl = [p for r in records for p in r.expl_scores]
        if advantages:
            stats["mean_advantage"] = sum(advantages) / len(advantages)
            stats["mean_expl_score"] = sum(expl) / len(expl)
        stats["mean_base_score"] = sum(r.base_score for r in records) / len(records)
    return breakdown, stats


def _cycle_order(rng: Random, count: int, needed: int) -> list[int]:
    """Shuffled indices, reshuffling per pass, long enough to cover needed."""
    order: list[int] = []
    while len(order) < needed:
        block = list(range(count))
        rng.shuffle(block)
        order.extend(block)
    return order[:needed]


class Trainer:
    def __init__(
        self,
        model: PrefixLM,
        vocab: Vocabulary,
        space: FeatureSpace,
        config: TrainConfig,
        *,
        out_dir: str | Path | None = None,
        config_text: str = "",
        log_fn=None,
    ):
        self.model = model
        self.vocab = vocab
        self.space = space
        self.config = config.validate()
        self.out_dir = Path(out_dir) if out_dir is not None else None
        self.config_text = config_text
        self.log_fn = log_fn
        self.optimizer = torch.optim.AdamW(
            [p for p in model.parameters() if p.requires_grad],
            lr=config.learning_rate,
            weight_decay=config.weight_decay,
        )
        self.global_step = 0
        self.start_epoch = 0

    # --- resume -------------------------------------------------------------

    def resume(self) -> int:
        """Load the last checkpoint; refuses a mismatched resolved config."""
        if self.out_dir is None:
            raise CheckpointError("resume needs an output directory")
        data = load_checkpoint(self.out_dir / LAST_CHECKPOINT)
        verify_compatibility(data, config_text=self.config_text, vocab_text=self.vocab.to_text())
        restore_model(data, self.model)
        restore_optimizer(data, self.model, self.optimizer)
        self.start_epoch = data.epoch + 1
        self.global_step = data.meta["global_step"]
        self._truncate_log(data.epoch)
        return self.start_epoch

    def _truncate_log(self, last_epoch: int) -> None:
        log_path = self.out_dir / RUN_LOG_NAME
        if not log_path.exists():
            return
        kept = [
            line
            for line in log_path.read_text().splitlines()
            if json.loads(line)["epoch"] <= last_epoch
        ]
        log_path.write_text("".join(line + "\n" for line in kept))

    # --- main loop ------------------------------------------------------------

    def run(self, train_samples: list[Sample]) -> None:
        config = self.config
        labelled = [s for s in train_samples if s.labelled]
        unlabelled = [s for s in train_samples if not s.labelled] if config.use_unlabelled else []
        if not labelled and not unlabelled:
            raise ValueError("no training samples after applying the unlabelled switch")

        mixing = bool(labelled) and bool(unlabelled)
        if mixing:
            lab_part, unlab_part = config.mix_parts()
            lab_per = max(1, round(config.batch_size * lab_part / (lab_part + unlab_part)))
            lab_per = min(lab_per, config.batch_size - 1)
            unlab_per = config.batch_size - lab_per
            steps = max(
                math.ceil(len(labelled) / lab_per), math.ceil(len(unlabelled) / unlab_per)
            )
        else:
            pool = labelled or unlabelled
            lab_per = config.batch_size if labelled else 0
            unlab_per = 0 if labelled else config.batch_size
            steps = math.ceil(len(pool) / config.batch_size)

        for epoch in range(self.start_epoch, config.epochs):
            scr_active = config.scr and epoch >= config.scr_warmup_epochs
            rng = Random(config.seed * 1_000_003 + epoch + 1)
            lab_order = _cycle_order(rng, len(labelled), steps * lab_per) if lab_per else []
            unlab_order = (
                _cycle_order(rng, len(unlabelled), steps * unlab_per) if unlab_per else []
            )
            lines = []
            for i in range(steps):
                lab_batch = [labelled[j] for j in lab_order[i * lab_per : (i + 1) * lab_per]]
                unlab_batch = [
                    unlabelled[j] for j in unlab_order[i * unlab_per : (i + 1) * unlab_per]
                ]
                breakdown, stats = train_step(
                    self.model,
                    self.optimizer,
                    self.vocab,
                    self.space,
                    lab_batch,
                    unlab_batch,
                    config,
                    scr_active=scr_active,
                )
                record = {"step": self.global_step, "epoch": epoch}
                record.update(breakdown.as_dict())
                record.update(stats)
                lines.append(json.dumps(record))
                self.global_step += 1
            self._end_epoch(epoch, lines)

    def _end_epoch(self, epoch: int, lines: list[str]) -> None:
        if self.log_fn is not None:
            for line in lines:
                self.log_fn(line)
        if self.out_dir is None:
            return
        self.out_dir.mkdir(parents=True, exist_ok=True)
        with open(self.out_dir / RUN_LOG_NAME, "a") as fh:
            fh.write("".join(line + "\n" for line in lines))
        save_checkpoint(
            self.out_dir / LAST_CHECKPOINT,
            self.model,
            config_text=self.config_text,
            vocab_text=self.vocab.to_text(),
            epoch=epoch,
            global_step=self.global_step,
            optimizer=self.optimizer,
        )
        if self.config.keep_epoch_checkpoints:
            save_checkpoint(
                self.out_dir / f"checkpoint_epoch_{epoch:03d}.npz",
                self.model,
                config_text=self.config_text,
                vocab_text=self.vocab.to_text(),
                epoch=epoch,
                global_step=self.global_step,
                optimizer=self.optimizer,
            )


# --- inference and evaluation ---------------------------------------------------


@dataclass(frozen=True)
class InferResult:
    rationale: tuple[str, ...]
    answer: tuple[str, ...]
    base_score: float
    expl_score: float


@dataclass
class EvalOutcome:
    unfiltered: MetricReport
    filtered: MetricReport
    mean_base_score: float
    mean_expl_score: float
    pairs: list[EvalPair]


def _top_rationales(
    model: PrefixLM,
    vocab: Vocabulary,
    space: FeatureSpace,
    samples: list[Sample],
    config: TrainConfig,
) -> tuple[torch.Tensor, list[Candidate]]:
    features = torch.stack([space.features(s.scene, model.config.torch_dtype) for s in samples])
    items = [(i, vocab.encode(s.question) + vocab.reason_prompt_ids) for i, s in enumerate(samples)]
    beams = beam_search_many(
        model,
        features,
        items,
        config.beam_width,
        config.max_rationale_len,
        frontier_cap=config.frontier_cap,
    )
    return features, [b[0] for b in beams]


def _decode_answers(
    model: PrefixLM,
    vocab: Vocabulary,
    features: torch.Tensor,
    samples: list[Sample],
    rationales: list[Candidate],
    config: TrainConfig,
    mode: str,
) -> list[Candidate]:
    if mode == "two_stage":
        items = [
            (
                i,
                vocab.encode(s.question)
                + vocab.reason_prompt_ids
                + list(rationales[i].tokens)
                + vocab.answer_prompt_ids,
            )
            for i, s in enumerate(samples)
        ]
    else:
        items = [
            (i, vocab.encode(s.question) + vocab.answer_prompt_ids)
            for i, s in enumerate(samples)
        ]
    return greedy_many(model, features, items, config.max_answer_len)


def predict_batch(
    model: PrefixLM,
    vocab: Vocabulary,
    space: FeatureSpace,
    samples: list[Sample],
    config: TrainConfig,
    *,
    chunk_size: int = 64,
) -> list[InferResult]:
    """Rationale, answer, and base/explanatory answer scores per sample.

    The rationale is always the top beam candidate from the reason template;
    the answer comes from the explanatory template (two_stage) or the base
    answer template, per ``config.inference``.  Scores are teacher-forced
    against the sample's answer when present, otherwise the predicted one.
    """
    results: list[InferResult] = []
    for start in range(0, len(samples), chunk_size):
        chunk = samples[start : start + chunk_size]
        features, tops = _top_rationales(model, vocab, space, chunk, config)
        answers = _decode_answers(model, vocab, features, chunk, tops, config, config.inference)
        base_rows = []
        expl_rows = []
        predicted = [vocab.decode(answers[i].content_ids()) for i in range(len(chunk))]
        for i, s in enumerate(chunk):
            q = vocab.encode(s.question)
            reference = s.answer if len(s.answer) else predicted[i]
            # an empty decode leaves just the EOS as the scored label
            label = vocab.encode(reference) + [vocab.eos_id]
            base_rows.append((i, q + vocab.answer_prompt_ids, label))
            expl_rows.append(
                (
                    i,
                    q + vocab.reason_prompt_ids + list(tops[i].tokens) + vocab.answer_prompt_ids,
                    label,
                )
            )
        with torch.no_grad():
            base = model.score_rows(features, base_rows)
            expl = model.score_rows(features, expl_rows)
            if model.config.score_mean == "arithmetic":
                base_vals, expl_vals = base.mean_probs(), expl.mean_probs()
            else:
                base_vals, expl_vals = base.geometric_mean_probs(), expl.geometric_mean_probs()
        for i in range(len(chunk)):
            results.append(
                InferResult(
                    rationale=vocab.decode(tops[i].content_ids()),
                    answer=predicted[i],
                    base_score=float(base_vals[i]),
                    expl_score=float(expl_vals[i]),
                )
            )
    return results


def infer(
    model: PrefixLM,
    vocab: Vocabulary,
    space: FeatureSpace,
    sample: Sample,
    config: TrainConfig,
) -> InferResult:
    """Two-stage inference for one sample: decode the rationale first, then
    condition the answer on it."""
    two_stage = dataclasses.replace(config, inference="two_stage")
    return predict_batch(model, vocab, space, [sample], two_stage)[0]


def evaluate(
    model: PrefixLM,
    vocab: Vocabulary,
    space: FeatureSpace,
    samples: list[Sample],
    config: TrainConfig,
    *,
    chunk_size: int = 64,
) -> EvalOutcome:
    """Metric reports (both modes) plus mean base/explanatory answer scores
    of the selected rationale over the given split."""
    if not samples:
        raise ValueError("evaluate needs at least one sample")
    results = predict_batch(model, vocab, space, samples, config, chunk_size=chunk_size)
    pairs = [
        EvalPair(
            sample_id=s.sample_id,
            generated_rationale=r.rationale,
            reference_rationales=(tuple(s.rationale),) if s.labelled else (),
            generated_answer=r.answer,
            reference_answer=tuple(s.answer),
        )
        for s, r in zip(samples, results)
    ]
    return EvalOutcome(
        unfiltered=build_report(pairs, UNFILTERED),
        filtered=build_report(pairs, FILTERED),
        mean_base_score=sum(r.base_score for r in results) / len(results),
        mean_expl_score=sum(r.expl_score for r in results) / len(results),
        pairs=pairs,
    )
