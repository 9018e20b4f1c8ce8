"""Training losses: answer/explanation cross-entropy, answer-score rewards,
and the self-critical reinforcement surrogate.

Reward scores are computed with gradients severed; only the re-scored
log-probabilities of the candidates carry gradient, so the surrogate's
parameter gradient is exactly the per-candidate advantage-weighted score
gradient (advantages as constants).
"""

from __future__ import annotations

from dataclasses import dataclass

import torch

from .decoding import CandidateSet
from .microworld import Sample
from .model import FeatureSpace, PrefixLM
from .vocab import Vocabulary


@dataclass(frozen=True)
class LossBreakdown:
    answer: float
    explanation: float
    explanatory_answer: float
    reinforce: float
    total: float

    def as_dict(self) -> dict:
        return {
            "answer": self.answer,
            "explanation": self.explanation,
            "explanatory_answer": self.explanatory_answer,
            "reinforce": self.reinforce,
            "total": self.total,
        }


@dataclass(frozen=True)
class RewardRecord:
    """Per-sample self-critical rewards: one advantage per beam candidate."""

    sample_id: int
    base_score: float
    expl_scores: tuple[float, ...]
    advantages: tuple[float, ...]


@dataclass
class EncodedBatch:
    """Token/feature view of a batch of samples."""

    samples: list[Sample]
    features: torch.Tensor  # (n, feature_dim)
    question_ids: list[list[int]]
    answer_ids: list[list[int]]  # EOS-terminated labels
    rationale_ids: list[list[int] | None]  # EOS-terminated, None when unlabelled


def encode_batch(
    samples: list[Sample], vocab: Vocabulary, space: FeatureSpace, dtype=torch.float64
) -> EncodedBatch:
    features = torch.stack([space.features(s.scene, dtype) for s in samples])
    return EncodedBatch(
        samples=list(samples),
        features=features,
        question_ids=[vocab.encode(s.question) for s in samples],
        answer_ids=[vocab.encode(s.answer) + [vocab.eos_id] for s in samples],
        rationale_ids=[
            vocab.encode(s.rationale) + [vocab.eos_id] if s.labelled else None for s in samples
        ],
    )


def _zero(model: PrefixLM) -> torch.Tensor:
    return torch.zeros((), dtype=model.config.torch_dtype)


def _mean_score(scores, model: PrefixLM) -> torch.Tensor:
    if model.config.score_mean == "arithmetic":
        return scores.mean_probs()
    return scores.geometric_mean_probs()


def loss_answer(
    model: PrefixLM, vocab: Vocabulary, batch: EncodedBatch, *, labelled_only: bool = False
) -> torch.Tensor:
    """Mean over samples of the token-mean answer cross-entropy under the
    base answer template."""
    idx = [i for i, s in enumerate(batch.samples) if s.labelled or not labelled_only]
    if not idx:
        return _zero(model)
    rows = [
        (i, batch.question_ids[i] + vocab.answer_prompt_ids, batch.answer_ids[i]) for i in idx
    ]
    scores = model.score_rows(batch.features, rows)
    return -scores.mean_logprobs().mean()


def loss_explanation(model: PrefixLM, vocab: Vocabulary, batch: EncodedBatch) -> torch.Tensor:
    """Token-mean rationale cross-entropy under the reason template, averaged
    over labelled samples only; zero when the batch has none."""
    idx = [i for i, s in enumerate(batch.samples) if s.labelled]
    if not idx:
        return _zero(model)
    rows = [
        (i, batch.question_ids[i] + vocab.reason_prompt_ids, batch.rationale_ids[i]) for i in idx
    ]
    scores = model.score_rows(batch.features, rows)
    return -scores.mean_logprobs().mean()


def _explanatory_prefix(vocab: Vocabulary, question_ids: list[int], tokens) -> list[int]:
    return question_ids + vocab.reason_prompt_ids + list(tokens) + vocab.answer_prompt_ids


def compute_rewards(
    model: PrefixLM,
    vocab: Vocabulary,
    batch: EncodedBatch,
    candidate_sets: list[CandidateSet],
) -> list[RewardRecord]:
    """Base and explanatory answer scores, gradients severed.

    The base score is computed once per sample; each beam candidate gets its
    own explanatory score.  A candidate with no content tokens carries no
    evidence, so its explanatory score is defined as the base score
    (advantage zero).
    """
    base_rows = []
    expl_rows = []
    expl_owner = []
    for i, cset in enumerate(candidate_sets):
        base_rows.append(
            (i, batch.question_ids[i] + vocab.answer_prompt_ids, batch.answer_ids[i])
        )
        for j, cand in enumerate(cset.beam_candidates()):
            if len(cand.content_ids()) == 0:
                continue
            prefix = _explanatory_prefix(vocab, batch.question_ids[i], cand.tokens)
            expl_rows.append((i, prefix, batch.answer_ids[i]))
            expl_owner.append((i, j))
    with torch.no_grad():
        base = _mean_score(model.score_rows(batch.features, base_rows), model).tolist()
        expl = (
            _mean_score(model.score_rows(batch.features, expl_rows), model).tolist()
            if expl_rows
            else []
        )
    per_sample: dict[int, dict[int, float]] = {i: {} for i in range(len(candidate_sets))}
    for (i, j), score in zip(expl_owner, expl):
        per_sample[i][j] = score
    records = []
    for i, cset in enumerate(candidate_sets):
        p_base = base[i]
        p_expl = tuple(
            per_sample[i].get(j, p_base) for j in range(len(cset.beam_candidates()))
        )
        records.append(
            RewardRecord(
                sample_id=cset.sample_id,
                base_score=p_base,
                expl_scores=p_expl,
                advantages=tuple(p - p_base for p in p_expl),
            )
        )
    return records


def reinforce_surrogate(
    model: PrefixLM,
    features: torch.Tensor,
    entries: list[tuple[int, list[int], list[tuple[tuple[int, ...], float]]]],
) -> torch.Tensor:
    """Differentiable surrogate whose gradient is the self-critical estimate.

    ``entries``: per sample, (feature_index, decode_prompt_ids,
    [(scored_token_ids, advantage), ...]).  Per sample the surrogate is
    -(1/K') * sum_k advantage_k * logprob(candidate_k); the batch value is the
    mean over entries, samples without candidates contributing zero.
    """
    rows = []
    coeffs = []
    for fi, prompt_ids, cands in entries:
        k_count = len(cands)
        for scored_ids, advantage in cands:
            if advantage == 0.0 or len(scored_ids) == 0:
                continue
            rows.append((fi, prompt_ids, list(scored_ids)))
            coeffs.append(-advantage / k_count)
    if not rows:
        return _zero(model)
    totals = model.score_rows(features, rows).total_logprobs()
    coeff = torch.as_tensor(coeffs, dtype=model.config.torch_dtype)
    return (coeff * totals).sum() / len(entries)


def loss_reinforce(
    model: PrefixLM,
    vocab: Vocabulary,
    batch: EncodedBatch,
    candidate_sets: list[CandidateSet],
    reward_records: list[RewardRecord],
) -> torch.Tensor:
    """Self-critical surrogate over the beam candidates of every sample,
    labelled and unlabelled alike; human candidates are excluded."""
    entries = []
    for i, (cset, record) in enumerate(zip(candidate_sets, reward_records)):
        beams = cset.beam_candidates()
        entries.append(
            (
                i,
                batch.question_ids[i] + vocab.reason_prompt_ids,
                [
                    (cand.scored_ids(), advantage)
                    for cand, advantage in zip(beams, record.advantages)
                ],
            )
        )
    return reinforce_surrogate(model, batch.features, entries)


def loss_explanatory_answer(
    model: PrefixLM,
    vocab: Vocabulary,
    batch: EncodedBatch,
    candidate_sets: list[CandidateSet],
    *,
    human_only: bool = False,
) -> torch.Tensor:
    """Answer cross-entropy conditioned on each candidate rationale, averaged
    over the candidate set, then over labelled samples; zero for unlabelled."""
    rows = []
    owners = []
    labelled_idx = []
    for i, (sample, cset) in enumerate(zip(batch.samples, candidate_sets)):
        if not sample.labelled:
            continue
        labelled_idx.append(i)
        pool = [cset.human_candidate()] if human_only else cset.candidates
        for cand in pool:
            if cand is None or len(cand.content_ids()) == 0:
                continue
            prefix = _explanatory_prefix(vocab, batch.question_ids[i], cand.tokens)
            rows.append((i, prefix, batch.answer_ids[i]))
            owners.append(i)
    if not rows:
        return _zero(model)
    scores = model.score_rows(batch.features, rows)
    ce = -scores.mean_logprobs()
    per_sample = []
    for i in labelled_idx:
        mine = [ce[j] for j, owner in enumerate(owners) if owner == i]
        if mine:
            per_sample.append(torch.stack(mine).mean())
    return torch.stack(per_sample).mean() if per_sample else _zero(model)


def total_loss(
    answer: torch.Tensor,
    explanation: torch.Tensor,
    explanatory_answer: torch.Tensor,
    reinforce: torch.Tensor,
    lambda_weight: float,
) -> torch.Tensor:
    return answer + explanation + explanatory_answer + lambda_weight * reinforce
