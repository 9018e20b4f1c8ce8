"""Beam and greedy decoding, and candidate-explanation set construction.

The beam keeps a pool of finished sequences plus an alive frontier.  Because
extending a sequence can only lower its raw summed log-probability, any
prefix scoring below the current K-th best finished sequence can be pruned
without losing a true top-K member; on small instances (the enumeration
budget of the verification oracle) the search is therefore exact.  A frontier
cap bounds the cost on near-flat models, where it degrades gracefully to an
ordinary wide beam.

Ordering everywhere is (higher log-prob first, then lexicographically
smaller token ids), which matches per-step ties broken toward smaller
token ids and earlier beams.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch

from .microworld import Sample
from .model import FeatureSpace, PrefixLM
from .prompts import PromptSequence, TemplateError, TemplateKind
from .vocab import EOS_ID, Vocabulary

DEFAULT_FRONTIER_CAP = 512

BEAM = "BEAM"
HUMAN = "HUMAN"


class DecodingError(ValueError):
    pass


@dataclass(frozen=True)
class Candidate:
    """One decoded sequence; ``tokens`` always ends with EOS (forced at the
    length limit when the model never emitted it)."""

    tokens: tuple[int, ...]
    logprob: float  # raw summed log-prob of the generated tokens; a forced EOS costs nothing
    truncated: bool
    source: str = BEAM

    def scored_ids(self) -> tuple[int, ...]:
        """The tokens the model actually generated (forced EOS excluded)."""
        return self.tokens[:-1] if self.truncated else self.tokens

    def content_ids(self) -> tuple[int, ...]:
        return self.tokens[:-1]

    def sort_key(self):
        return (-self.logprob, self.tokens)


def _beam_engine(step_fn, n_items: int, eos_id: int, k: int, max_len: int, frontier_cap: int):
    """Shared search over ``n_items`` independent contexts.

    ``step_fn(pairs)`` maps [(item, generated_tokens), ...] to a
    (len(pairs), vocab) tensor of next-token log-probabilities.
    """
    if max_len < 1:
        raise DecodingError("max_len must be >= 1")
    finished: list[list[Candidate]] = [[] for _ in range(n_items)]
    alive: list[list[tuple[tuple[int, ...], float]]] = [[((), 0.0)] for _ in range(n_items)]

    for depth in range(max_len):
        pairs = [(i, gen) for i in range(n_items) for gen, _ in alive[i]]
        if not pairs:
            break
        logprobs = step_fn(pairs)
        vocab_size = logprobs.shape[1]
        scores = logprobs.tolist()
        row = 0
        next_alive: list[list[tuple[tuple[int, ...], float]]] = [[] for _ in range(n_items)]
        for i in range(n_items):
            for gen, lp in alive[i]:
                step_scores = scores[row]
                row += 1
                for tok in range(vocab_size):
                    ext = lp + step_scores[tok]
                    if ext == float("-inf"):
                        continue
                    if tok == eos_id:
                        finished[i].append(Candidate(gen + (tok,), ext, truncated=False))
                    elif depth + 1 == max_len:
                        finished[i].append(Candidate(gen + (tok, eos_id), ext, truncated=True))
                    else:
                        next_alive[i].append((gen + (tok,), ext))
        for i in range(n_items):
            finished[i].sort(key=Candidate.sort_key)
            del finished[i][k:]
            bound = finished[i][k - 1].logprob if len(finished[i]) >= k else float("-inf")
            keep = [(gen, lp) for gen, lp in next_alive[i] if lp >= bound]
            keep.sort(key=lambda pair: (-pair[1], pair[0]))
            alive[i] = keep[:frontier_cap]
    return finished


def _template_step_fn(model: PrefixLM, template: PromptSequence):
    def step(pairs):
        gens = [list(gen) for _, gen in pairs]
        n = len(gens)
        base = template.embeddings
        if gens[0]:
            # depth-synchronous: all alive prefixes share one length
            ids = torch.as_tensor(gens, dtype=torch.long)
            x = torch.cat([base.unsqueeze(0).expand(n, -1, -1), model.token_emb(ids)], dim=1)
        else:
            x = base.unsqueeze(0).expand(n, -1, -1)
        logits = model.forward_embedded(x)
        return torch.log_softmax(logits[:, -1], dim=-1)

    return step


def _check_beam_args(model: PrefixLM, k: int) -> None:
    if k < 1:
        raise DecodingError("beam width must be >= 1")
    if k > model.config.vocab_size:
        raise DecodingError(
            f"beam width {k} exceeds the vocabulary size {model.config.vocab_size}"
        )


def beam_search(
    model: PrefixLM,
    template: PromptSequence,
    k: int,
    max_len: int,
    *,
    frontier_cap: int = DEFAULT_FRONTIER_CAP,
) -> list[Candidate]:
    """Top-k EOS-terminated (or length-truncated) continuations of a template.

    Raw summed log-prob scoring, no length normalization; deterministic.
    """
    _check_beam_args(model, k)
    if template.kind not in (TemplateKind.REASON, TemplateKind.EXPLANATORY):
        raise TemplateError(
            f"beam search decodes from reason or explanatory templates, "
            f"got {template.kind.value!r}"
        )
    with torch.no_grad():
        finished = _beam_engine(
            _template_step_fn(model, template), 1, EOS_ID, k, max_len, frontier_cap
        )
    return finished[0]


def beam_search_many(
    model: PrefixLM,
    features: torch.Tensor,
    items: list[tuple[int, list[int]]],
    k: int,
    max_len: int,
    *,
    frontier_cap: int = DEFAULT_FRONTIER_CAP,
) -> list[list[Candidate]]:
    """Beam search for many (feature_index, prompt_token_ids) contexts at once."""
    _check_beam_args(model, k)

    def step(pairs):
        rows = [(items[i][0], items[i][1] + list(gen)) for i, gen in pairs]
        return model.next_token_logprobs(features, rows)

    with torch.no_grad():
        return _beam_engine(step, len(items), EOS_ID, k, max_len, frontier_cap)


def greedy(model: PrefixLM, template: PromptSequence, max_len: int) -> Candidate:
    """Argmax token per step until EOS (or truncation at max_len)."""
    if max_len < 1:
        raise DecodingError("max_len must be >= 1")
    eos = EOS_ID
    step_fn = _template_step_fn(model, template)
    gen: tuple[int, ...] = ()
    total = 0.0
    with torch.no_grad():
        for depth in range(max_len):
            logprobs = step_fn([(0, gen)])[0]
            tok = int(torch.argmax(logprobs))  # ties resolve to the smaller token id
            total += float(logprobs[tok])
            if tok == eos:
                return Candidate(gen + (tok,), total, truncated=False)
            gen = gen + (tok,)
    return Candidate(gen + (eos,), total, truncated=True)


def greedy_many(
    model: PrefixLM,
    features: torch.Tensor,
    items: list[tuple[int, list[int]]],
    max_len: int,
) -> list[Candidate]:
    """Batched argmax decoding for many contexts."""
    if max_len < 1:
        raise DecodingError("max_len must be >= 1")
    eos = EOS_ID
    states: list[tuple[tuple[int, ...], float] | Candidate] = [((), 0.0)] * len(items)
    with torch.no_grad():
        for depth in range(max_len):
            open_idx = [i for i, s in enumerate(states) if not isinstance(s, Candidate)]
            if not open_idx:
                break
            rows = [(items[i][0], items[i][1] + list(states[i][0])) for i in open_idx]
            logprobs = model.next_token_logprobs(features, rows)
            toks = torch.argmax(logprobs, dim=-1)
            for j, i in enumerate(open_idx):
                gen, total = states[i]
                tok = int(toks[j])
                total += float(logprobs[j, tok])
                if tok == eos:
                    states[i] = Candidate(gen + (tok,), total, truncated=False)
                elif depth + 1 == max_len:
                    states[i] = Candidate(gen + (tok, eos), total, truncated=True)
                else:
                    states[i] = (gen + (tok,), total)
    return [s for s in states]  # type: ignore[misc]


@dataclass
class CandidateSet:
    """Beam-sampled explanations for one sample, plus the human rationale
    for labelled samples (appended last)."""

    sample_id: int
    candidates: list[Candidate]

    def beam_candidates(self) -> list[Candidate]:
        return [c for c in self.candidates if c.source == BEAM]

    def human_candidate(self) -> Candidate | None:
        for c in self.candidates:
            if c.source == HUMAN:
                return c
        return None


def build_candidate_sets(
    samples: list[Sample],
    model: PrefixLM,
    vocab: Vocabulary,
    space: FeatureSpace,
    k: int,
    max_len: int,
    *,
    frontier_cap: int = DEFAULT_FRONTIER_CAP,
) -> list[CandidateSet]:
    """Candidate sets for a batch: k beam candidates per sample (labelled and
    unlabelled alike), the human rationale appended for labelled samples."""
    features = torch.stack([space.features(s.scene, model.config.torch_dtype) for s in samples])
    items = [(i, vocab.encode(s.question) + vocab.reason_prompt_ids) for i, s in enumerate(samples)]
    beams = beam_search_many(model, features, items, k, max_len, frontier_cap=frontier_cap)

    sets = []
    human_rows = []
    for i, sample in enumerate(samples):
        candidates = list(beams[i])
        if sample.labelled:
            human_tokens = tuple(vocab.encode(sample.rationale)) + (vocab.eos_id,)
            if all(c.tokens != human_tokens for c in candidates):
                human_rows.append((i, len(candidates), human_tokens))
                candidates.append(Candidate(human_tokens, 0.0, truncated=False, source=HUMAN))
        sets.append(CandidateSet(sample_id=sample.sample_id, candidates=candidates))
    if human_rows:
        with torch.no_grad():
            scores = model.score_rows(
                features, [(i, items[i][1], list(toks)) for i, _, toks in human_rows]
            ).total_logprobs()
        for (i, pos, toks), lp in zip(human_rows, scores.tolist()):
            sets[i].candidates[pos] = Candidate(toks, lp, truncated=False, source=HUMAN)
    return sets


def build_candidate_set(
    sample: Sample,
    model: PrefixLM,
    vocab: Vocabulary,
    space: FeatureSpace,
    k: int,
    max_len: int,
    *,
    frontier_cap: int = DEFAULT_FRONTIER_CAP,
) -> CandidateSet:
    return build_candidate_sets(
        [sample], model, vocab, space, k, max_len, frontier_cap=frontier_cap
    )[0]
