"""Trainable prefix language model: scene encoder plus a small causal decoder.

The scene encoder is a two-layer MLP that turns a fixed-width symbolic scene
feature vector into a block of prefix vectors; the decoder is a 2-block
pre-norm causal transformer over [scene block ; embedded tokens].  Everything
runs in float64 on CPU so gradients can be certified against finite
differences.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

from .microworld import GRID, Scene, WorldConfig
from .prompts import (
    PromptSequence,
    TemplateError,
    TemplateKind,
    build_answer_template,
    build_explanatory_template,
    build_prefix,
    build_reason_template,
)
from .vocab import Vocabulary

_DTYPES = {"float64": torch.float64, "float32": torch.float32}


class ModelError(ValueError):
    pass


# --- symbolic scene featurization ----------------------------------------


@dataclass(frozen=True)
class FeatureSpace:
    """Attribute inventory the scene featurizer one-hot encodes over.

    Kept separate from the generating world so two worlds with different
    attribute lists can share one encoder (union inventory).
    """

    shapes: tuple[str, ...]
    colors: tuple[str, ...]
    sizes: tuple[str, ...]
    max_objects: int

    @classmethod
    def from_world(
        cls,
        world: WorldConfig,
        extra_shapes: tuple[str, ...] = (),
        extra_colors: tuple[str, ...] = (),
        extra_sizes: tuple[str, ...] = (),
    ) -> "FeatureSpace":
        return cls(
            shapes=tuple(sorted(set(world.shapes) | set(extra_shapes))),
            colors=tuple(sorted(set(world.colors) | set(extra_colors))),
            sizes=tuple(sorted(set(world.sizes) | set(extra_sizes))),
            max_objects=world.max_objects,
        )

    @property
    def slot_dim(self) -> int:
        return 1 + len(self.shapes) + len(self.colors) + len(self.sizes) + 2 * GRID

    @property
    def dim(self) -> int:
        return self.max_objects * self.slot_dim

    def features(self, scene: Scene, dtype=torch.float64) -> torch.Tensor:
        """One-hot slot encoding of up to max_objects objects, zero-padded."""
        if len(scene.objects) > self.max_objects:
            raise ModelError(
                f"scene {scene.scene_id} has {len(scene.objects)} objects, "
                f"feature space allows {self.max_objects}"
            )
        out = torch.zeros(self.dim, dtype=dtype)
        for slot, obj in enumerate(sorted(scene.objects)):
            base = slot * self.slot_dim
            out[base] = 1.0  # presence
            try:
                i_shape = self.shapes.index(obj.shape)
                i_color = self.colors.index(obj.color)
                i_size = self.sizes.index(obj.size)
            except ValueError as exc:
                raise ModelError(f"scene attribute outside the feature space: {exc}") from None
            offset = base + 1
            out[offset + i_shape] = 1.0
            offset += len(self.shapes)
            out[offset + i_color] = 1.0
            offset += len(self.colors)
            out[offset + i_size] = 1.0
            offset += len(self.sizes)
            out[offset + obj.row] = 1.0
            out[offset + GRID + obj.col] = 1.0
        return out


# --- configuration --------------------------------------------------------


@dataclass
class ModelConfig:
    vocab_size: int
    feature_dim: int
    embed_dim: int = 64
    n_heads: int = 4
    n_blocks: int = 2
    ff_mult: int = 4
    max_seq_len: int = 64
    scene_tokens: int = 10
    encoder_hidden: int = 128
    score_mean: str = "arithmetic"  # or "geometric"
    train_encoder: bool = True  # False: first encoder layer stays at its random init
    dtype: str = "float64"
    seed: int = 0

    def validate(self) -> "ModelConfig":
        if self.embed_dim % self.n_heads != 0:
            raise ModelError("embed_dim must be divisible by n_heads")
        if self.score_mean not in ("arithmetic", "geometric"):
            raise ModelError(f"unknown score_mean {self.score_mean!r}")
        if self.dtype not in _DTYPES:
            raise ModelError(f"unknown dtype {self.dtype!r}")
        if min(self.vocab_size, self.feature_dim, self.scene_tokens, self.max_seq_len) < 1:
            raise ModelError("model dimensions must be positive")
        return self

    @property
    def torch_dtype(self):
        return _DTYPES[self.dtype]


# --- decoder blocks --------------------------------------------------------


class _Block(nn.Module):
    def __init__(self, dim: int, n_heads: int, ff_mult: int):
        super().__init__()
        self.n_heads = n_heads
        self.ln1 = nn.LayerNorm(dim)
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)
        self.ln2 = nn.LayerNorm(dim)
        self.ff_in = nn.Linear(dim, ff_mult * dim)
        self.ff_out = nn.Linear(ff_mult * dim, dim)

    def forward(self, x: torch.Tensor, causal_mask: torch.Tensor) -> torch.Tensor:
        b, t, dim = x.shape
        head_dim = dim // self.n_heads
        h = self.ln1(x)
        q, k, v = self.qkv(h).chunk(3, dim=-1)
        q = q.view(b, t, self.n_heads, head_dim).transpose(1, 2)
        k = k.view(b, t, self.n_heads, head_dim).transpose(1, 2)
        v = v.view(b, t, self.n_heads, head_dim).transpose(1, 2)
        att = (q @ k.transpose(-2, -1)) / math.sqrt(head_dim)
        att = att.masked_fill(causal_mask[:t, :t], float("-inf"))
        att = att.softmax(dim=-1)
        x = x + self.proj((att @ v).transpose(1, 2).reshape(b, t, dim))
        x = x + self.ff_out(F.gelu(self.ff_in(self.ln2(x))))
        return x


class PrefixLM(nn.Module):
    """Decoder with a learned scene-prefix encoder.

    With the output projection zero-initialized, a fresh model emits the
    uniform distribution at every position.
    """

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config.validate()
        c = config.embed_dim
        self.token_emb = nn.Embedding(config.vocab_size, c)
        self.pos_emb = nn.Embedding(config.max_seq_len, c)
        self.enc_in = nn.Linear(config.feature_dim, config.encoder_hidden)
        self.enc_out = nn.Linear(config.encoder_hidden, config.scene_tokens * c)
        self.blocks = nn.ModuleList(
            [_Block(c, config.n_heads, config.ff_mult) for _ in range(config.n_blocks)]
        )
        self.ln_f = nn.LayerNorm(c)
        self.out = nn.Linear(c, config.vocab_size)
        self.to(config.torch_dtype)
        self._init_weights(config.seed)
        mask = torch.triu(torch.ones(config.max_seq_len, config.max_seq_len, dtype=torch.bool), 1)
        self.register_buffer("causal_mask", mask, persistent=False)
        if not config.train_encoder:
            self.enc_in.weight.requires_grad_(False)
            self.enc_in.bias.requires_grad_(False)

    def _init_weights(self, seed: int) -> None:
        # symmetric uniform at 1/sqrt(fan_in); output projection zeroed so a
        # fresh model is exactly uniform
        g = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            for module in self.modules():
                if isinstance(module, nn.Linear):
                    bound = 1.0 / math.sqrt(module.weight.shape[1])
                    module.weight.uniform_(-bound, bound, generator=g)
                    module.bias.zero_()
                elif isinstance(module, nn.Embedding):
                    bound = 1.0 / math.sqrt(module.weight.shape[1])
                    module.weight.uniform_(-bound, bound, generator=g)
            self.out.weight.zero_()
            self.out.bias.zero_()

    # --- low-level forward -------------------------------------------------

    def embed(self, token_ids) -> torch.Tensor:
        ids = torch.as_tensor(token_ids, dtype=torch.long)
        if ids.numel() and (ids.min() < 0 or ids.max() >= self.config.vocab_size):
            raise ModelError("token id outside the vocabulary")
        return self.token_emb(ids)

    def encode_scene(self, features: torch.Tensor) -> torch.Tensor:
        """(..., feature_dim) -> (..., scene_tokens, embed_dim)."""
        if features.shape[-1] != self.config.feature_dim:
            raise ModelError(
                f"scene features must have width {self.config.feature_dim}, "
                f"got {features.shape[-1]}"
            )
        h = self.enc_out(F.gelu(self.enc_in(features)))
        return h.view(*features.shape[:-1], self.config.scene_tokens, self.config.embed_dim)

    def forward_embedded(self, x: torch.Tensor) -> torch.Tensor:
        """(batch, length, embed_dim) -> (batch, length, vocab) logits."""
        if x.ndim != 3:
            raise ModelError("expected a (batch, length, dim) tensor")
        t = x.shape[1]
        if t > self.config.max_seq_len:
            raise ModelError(f"sequence of length {t} exceeds max length {self.config.max_seq_len}")
        x = x + self.pos_emb.weight[:t]
        for block in self.blocks:
            x = block(x, self.causal_mask)
        return self.out(self.ln_f(x))

    # --- template construction ---------------------------------------------

    def make_prefix(self, features: torch.Tensor, question_ids: list[int]) -> PromptSequence:
        scene_block = self.encode_scene(features)
        return build_prefix(
            scene_block,
            question_ids,
            self.embed,
            scene_len=self.config.scene_tokens,
            embed_dim=self.config.embed_dim,
        )

    def template_base(
        self, features: torch.Tensor, question_ids: list[int], vocab: Vocabulary
    ) -> PromptSequence:
        return build_answer_template(self.make_prefix(features, question_ids), vocab, self.embed)

    def template_reason(
        self, features: torch.Tensor, question_ids: list[int], vocab: Vocabulary
    ) -> PromptSequence:
        return build_reason_template(self.make_prefix(features, question_ids), vocab, self.embed)

    def template_explanatory(
        self,
        features: torch.Tensor,
        question_ids: list[int],
        rationale_ids: list[int],
        vocab: Vocabulary,
    ) -> PromptSequence:
        return build_explanatory_template(
            self.make_prefix(features, question_ids), rationale_ids, vocab, self.embed
        )

    # --- sequence scoring (spec surface) -------------------------------------

    def forward_logits(
        self, template: PromptSequence, continuation_ids: list[int] = ()
    ) -> torch.Tensor:
        """Per-position next-token distributions over template ++ continuation."""
        x = template.embeddings
        if len(continuation_ids):
            x = torch.cat([x, self.embed(list(continuation_ids))], dim=0)
        logits = self.forward_embedded(x.unsqueeze(0))[0]
        return logits.softmax(dim=-1)

    def _continuation_logprobs(
        self, template: PromptSequence, continuation_ids: list[int]
    ) -> torch.Tensor:
        if len(continuation_ids) == 0:
            raise ModelError("continuation must be non-empty")
        ids = list(continuation_ids)
        x = torch.cat([template.embeddings, self.embed(ids)], dim=0)
        logits = self.forward_embedded(x.unsqueeze(0))[0]
        logprobs = F.log_softmax(logits, dim=-1)
        start = len(template) - 1
        positions = torch.arange(start, start + len(ids))
        return logprobs[positions, torch.as_tensor(ids)]

    def sequence_logprob(
        self, template: PromptSequence, continuation_ids: list[int]
    ) -> tuple[torch.Tensor, torch.Tensor]:
        """(total log-probability, per-token log-probabilities), teacher-forced."""
        per_token = self._continuation_logprobs(template, continuation_ids)
        return per_token.sum(), per_token

    def answer_score(self, template: PromptSequence, answer_ids: list[int]) -> torch.Tensor:
        """Mean teacher-forced probability of the answer tokens, in (0, 1]."""
        if template.kind not in (TemplateKind.BASE_ANSWER, TemplateKind.EXPLANATORY):
            raise TemplateError(
                f"answer_score needs a base-answer or explanatory template, "
                f"got {template.kind.value!r}"
            )
        if len(answer_ids) == 0:
            raise ModelError("answer must be non-empty")
        per_token = self._continuation_logprobs(template, answer_ids)
        if self.config.score_mean == "arithmetic":
            return per_token.exp().mean()
        return per_token.mean().exp()

    # --- batched scoring ------------------------------------------------------

    def score_rows(
        self, features: torch.Tensor, rows: list[tuple[int, list[int], list[int]]]
    ) -> "RowScores":
        """Teacher-forced scores for many (feature, prefix, target) rows at once.

        ``features`` is a (n_scenes, feature_dim) bank; each row is
        (feature_index, prefix_token_ids, target_token_ids).  One forward pass
        serves every row; results match the single-template path exactly.
        """
        if len(rows) == 0:
            raise ModelError("score_rows needs at least one row")
        s = self.config.scene_tokens
        scene_blocks = self.encode_scene(features)
        tok_lens = [len(p) + len(t) for _, p, t in rows]
        t_tok = max(tok_lens)
        ids = torch.zeros(len(rows), t_tok, dtype=torch.long)
        row_index, pos_index, tok_index = [], [], []
        for i, (fi, prefix, target) in enumerate(rows):
            if len(prefix) == 0 or len(target) == 0:
                raise ModelError("rows need a non-empty prefix and target")
            seq = prefix + list(target)
            ids[i, : len(seq)] = torch.as_tensor(seq)
            start = s + len(prefix) - 1
            row_index.extend([i] * len(target))
            pos_index.extend(range(start, start + len(target)))
            tok_index.extend(target)
        if ids.numel() and (ids.min() < 0 or ids.max() >= self.config.vocab_size):
            raise ModelError("token id outside the vocabulary")
        scene_part = scene_blocks[torch.as_tensor([fi for fi, _, _ in rows])]
        x = torch.cat([scene_part, self.token_emb(ids)], dim=1)
        logprobs = F.log_softmax(self.forward_embedded(x), dim=-1)
        row_t = torch.as_tensor(row_index)
        per_token = logprobs[row_t, torch.as_tensor(pos_index), torch.as_tensor(tok_index)]
        return RowScores(
            per_token_logprobs=per_token,
            row_index=row_t,
            n_rows=len(rows),
            target_lens=torch.as_tensor([len(t) for _, _, t in rows], dtype=torch.long),
            dtype=self.config.torch_dtype,
        )

    def next_token_logprobs(
        self, features: torch.Tensor, rows: list[tuple[int, list[int]]]
    ) -> torch.Tensor:
        """Log-distribution of the next token for many (feature, ids) rows."""
        if len(rows) == 0:
            raise ModelError("next_token_logprobs needs at least one row")
        s = self.config.scene_tokens
        scene_blocks = self.encode_scene(features)
        t_tok = max(len(ids) for _, ids in rows)
        ids = torch.zeros(len(rows), t_tok, dtype=torch.long)
        for i, (_, row_ids) in enumerate(rows):
            if len(row_ids) == 0:
                raise ModelError("rows need at least one token before decoding")
            ids[i, : len(row_ids)] = torch.as_tensor(row_ids)
        scene_part = scene_blocks[torch.as_tensor([fi for fi, _ in rows])]
        x = torch.cat([scene_part, self.token_emb(ids)], dim=1)
        logits = self.forward_embedded(x)
        last = torch.as_tensor([s + len(row_ids) - 1 for _, row_ids in rows])
        return F.log_softmax(logits[torch.arange(len(rows)), last], dim=-1)

    def parameter_count(self) -> int:
        return sum(p.numel() for p in self.parameters())


@dataclass
class RowScores:
    """Flat per-token log-probabilities with row bookkeeping."""

    per_token_logprobs: torch.Tensor  # (sum of target lens,)
    row_index: torch.Tensor
    n_rows: int
    target_lens: torch.Tensor
    dtype: torch.dtype = torch.float64

    def total_logprobs(self) -> torch.Tensor:
        out = torch.zeros(self.n_rows, dtype=self.dtype)
        return out.index_add(0, self.row_index, self.per_token_logprobs)

    def mean_logprobs(self) -> torch.Tensor:
        return self.total_logprobs() / self.target_lens.to(self.dtype)

    def mean_probs(self) -> torch.Tensor:
        """Arithmetic mean of per-token probabilities, per row."""
        out = torch.zeros(self.n_rows, dtype=self.dtype)
        summed = out.index_add(0, self.row_index, self.per_token_logprobs.exp())
        return summed / self.target_lens.to(self.dtype)

    def geometric_mean_probs(self) -> torch.Tensor:
        return self.mean_logprobs().exp()
