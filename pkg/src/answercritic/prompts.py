"""Prompt-sequence assembly around an embedded scene/question prefix.

Three templates hang off one bare prefix:

    prefix          [scene vectors ; question embeddings]
    base answer     prefix ++ "the answer is"
    reason          prefix ++ "the reason is"
    explanatory     prefix ++ "the reason is" ++ rationale ++ "the answer is"
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import torch

from .vocab import Vocabulary


class TemplateError(ValueError):
    pass


class TemplateKind(enum.Enum):
    PREFIX = "prefix"
    BASE_ANSWER = "base_answer"
    REASON = "reason"
    EXPLANATORY = "explanatory"


@dataclass(frozen=True)
class PromptSequence:
    """An embedded prefix: scene vectors followed by embedded tokens.

    ``source_token_ids`` is the token-id view of everything after the scene
    block, so templates stay recoverable from the embedded form.
    """

    embeddings: torch.Tensor  # (length, embed_dim)
    kind: TemplateKind
    source_token_ids: tuple[int, ...]
    scene_len: int

    def __len__(self) -> int:
        return self.embeddings.shape[0]

    def __post_init__(self):
        if self.embeddings.ndim != 2:
            raise TemplateError("prompt embeddings must be a (length, dim) matrix")
        if len(self) != self.scene_len + len(self.source_token_ids):
            raise TemplateError("prompt length must equal scene block plus token block")


def build_prefix(
    scene_vectors: torch.Tensor,
    question_ids: list[int],
    embed,
    *,
    scene_len: int,
    embed_dim: int,
) -> PromptSequence:
    """Concatenate the scene block and the embedded question."""
    if scene_vectors.ndim != 2 or scene_vectors.shape != (scene_len, embed_dim):
        raise TemplateError(
            f"scene block must be {scene_len}x{embed_dim}, got {tuple(scene_vectors.shape)}"
        )
    if len(question_ids) == 0:
        raise TemplateError("question must be non-empty")
    question = embed(question_ids)
    if question.shape[1] != embed_dim:
        raise TemplateError("question embedding dim does not match the scene block")
    return PromptSequence(
        embeddings=torch.cat([scene_vectors, question], dim=0),
        kind=TemplateKind.PREFIX,
        source_token_ids=tuple(question_ids),
        scene_len=scene_len,
    )


def _extend(z: PromptSequence, token_ids: list[int], embed, kind: TemplateKind) -> PromptSequence:
    return PromptSequence(
        embeddings=torch.cat([z.embeddings, embed(token_ids)], dim=0),
        kind=kind,
        source_token_ids=z.source_token_ids + tuple(token_ids),
        scene_len=z.scene_len,
    )


def _require_prefix(z: PromptSequence, what: str) -> None:
    if z.kind is not TemplateKind.PREFIX:
        raise TemplateError(f"{what} requires a bare prefix, got kind {z.kind.value!r}")


def build_answer_template(z: PromptSequence, vocab: Vocabulary, embed) -> PromptSequence:
    _require_prefix(z, "base answer template")
    return _extend(z, vocab.answer_prompt_ids, embed, TemplateKind.BASE_ANSWER)


def build_reason_template(z: PromptSequence, vocab: Vocabulary, embed) -> PromptSequence:
    _require_prefix(z, "reason template")
    return _extend(z, vocab.reason_prompt_ids, embed, TemplateKind.REASON)


def build_explanatory_template(
    z: PromptSequence, rationale_ids: list[int], vocab: Vocabulary, embed
) -> PromptSequence:
    """The rationale-conditioned answer template.

    ``rationale_ids`` must be an EOS-terminated candidate with at least one
    content token.
    """
    _require_prefix(z, "explanatory template")
    if len(rationale_ids) == 0 or rationale_ids[-1] != vocab.eos_id:
        raise TemplateError("rationale must be a non-empty, EOS-terminated sequence")
    if len(rationale_ids) == 1:
        raise TemplateError("rationale must contain at least one token besides EOS")
    token_ids = vocab.reason_prompt_ids + list(rationale_ids) + vocab.answer_prompt_ids
    return _extend(z, token_ids, embed, TemplateKind.EXPLANATORY)
