"""Independent brute-force verification of gradients and decoding.

Everything here recomputes results from first principles: full enumeration of
the sequence universe, central finite differences, and exhaustive top-K.  The
only shared machinery with the modules under test is the model's forward
pass.  Enumeration sizes are hard-capped so a misconfigured check fails
loudly instead of blowing up.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np
import torch

from .decoding import Candidate, beam_search, build_candidate_sets
from .losses import (
    compute_rewards,
    encode_batch,
    loss_answer,
    loss_explanation,
    loss_explanatory_answer,
    loss_reinforce,
    reinforce_surrogate,
)
from .microworld import WorldConfig, generate_dataset
from .model import FeatureSpace, ModelConfig, PrefixLM
from .prompts import PromptSequence, TemplateKind
from .vocab import EOS_ID, Vocabulary

ENUMERATION_CAP = 1365


class OracleError(ValueError):
    pass


# --- sequence universe -----------------------------------------------------


def universe_size(vocab_size: int, max_len: int) -> int:
    content = vocab_size - 1
    return sum(content**length for length in range(max_len)) + content**max_len


def enumerate_sequences(vocab_size: int, max_len: int) -> list[tuple[tuple[int, ...], bool]]:
    """All complete decodes: EOS-terminated sequences up to max_len generated
    tokens, plus length-max_len truncations.  Returned in lexicographic order
    of the generated tokens; the boolean flags truncation."""
    if max_len < 1:
        raise OracleError("max_len must be >= 1")
    size = universe_size(vocab_size, max_len)
    if size > ENUMERATION_CAP:
        raise OracleError(
            f"enumeration budget exceeded: {size} sequences > cap {ENUMERATION_CAP}"
        )
    content = [t for t in range(vocab_size) if t != EOS_ID]
    out: list[tuple[tuple[int, ...], bool]] = []

    def grow(prefix: tuple[int, ...]) -> None:
        for tok in sorted([EOS_ID] + content):
            if tok == EOS_ID:
                out.append((prefix + (EOS_ID,), False))
            elif len(prefix) + 1 == max_len:
                out.append((prefix + (tok,), True))
            else:
                grow(prefix + (tok,))

    grow(())
    return out


def _sequence_logprobs(
    model: PrefixLM, template: PromptSequence, sequences: list[tuple[tuple[int, ...], bool]]
) -> torch.Tensor:
    """Teacher-forced total log-probability of each generated sequence,
    computed with the oracle's own position bookkeeping."""
    base = template.embeddings
    length = base.shape[0]
    max_gen = max(len(tokens) for tokens, _ in sequences)
    n = len(sequences)
    ids = torch.zeros(n, max_gen, dtype=torch.long)
    row_index, pos_index, tok_index = [], [], []
    for i, (tokens, _) in enumerate(sequences):
        ids[i, : len(tokens)] = torch.as_tensor(tokens)
        row_index.extend([i] * len(tokens))
        pos_index.extend(range(length - 1, length - 1 + len(tokens)))
        tok_index.extend(tokens)
    x = torch.cat([base.unsqueeze(0).expand(n, -1, -1), model.token_emb(ids)], dim=1)
    logprobs = torch.log_softmax(model.forward_embedded(x), dim=-1)
    per_token = logprobs[
        torch.as_tensor(row_index), torch.as_tensor(pos_index), torch.as_tensor(tok_index)
    ]
    totals = torch.zeros(n, dtype=model.config.torch_dtype)
    return totals.index_add(0, torch.as_tensor(row_index), per_token)


def _grad_dict(model: PrefixLM, value: torch.Tensor) -> dict[str, torch.Tensor]:
    named = [(n, p) for n, p in model.named_parameters() if p.requires_grad]
    if not value.requires_grad:  # a structurally-zero loss has zero gradient
        return {n: torch.zeros_like(p) for n, p in named}
    grads = torch.autograd.grad(value, [p for _, p in named], allow_unused=True)
    return {
        n: (g.detach().clone() if g is not None else torch.zeros_like(p))
        for (n, p), g in zip(named, grads)
    }


def exact_expected_gradient(
    model: PrefixLM,
    template: PromptSequence,
    reward_fn,
    max_len: int,
) -> dict[str, torch.Tensor]:
    """Parameter gradient of the expected reward, by full enumeration.

    ``reward_fn(generated_tokens, truncated)`` supplies the per-sequence
    reward, treated as a constant.  The reinforcement surrogate's gradient
    should equal minus this.
    """
    sequences = enumerate_sequences(model.config.vocab_size, max_len)
    totals = _sequence_logprobs(model, template, sequences)
    rewards = torch.as_tensor(
        [reward_fn(tokens, truncated) for tokens, truncated in sequences],
        dtype=model.config.torch_dtype,
    )
    expected = (totals.exp() * rewards).sum()
    return _grad_dict(model, expected)


def exhaustive_topk(
    model: PrefixLM, template: PromptSequence, k: int, max_len: int
) -> list[Candidate]:
    """True top-k complete decodes by raw summed log-probability (ties toward
    lexicographically smaller token sequences); compared against beam search."""
    if k < 1:
        raise OracleError("k must be >= 1")
    sequences = enumerate_sequences(model.config.vocab_size, max_len)
    with torch.no_grad():
        totals = _sequence_logprobs(model, template, sequences).tolist()
    candidates = []
    for (tokens, truncated), lp in zip(sequences, totals):
        if lp == float("-inf"):
            continue
        full = tokens if not truncated else tokens + (EOS_ID,)
        candidates.append(Candidate(tokens=full, logprob=lp, truncated=truncated))
    candidates.sort(key=Candidate.sort_key)
    return candidates[:k]


# --- finite differences ------------------------------------------------------


def finite_difference(loss_fn, model: PrefixLM, step: float = 1e-5) -> dict[str, np.ndarray]:
    """Central-difference gradient of ``loss_fn()`` (a vector of losses) with
    respect to every trainable parameter, at 64-bit."""
    out: dict[str, np.ndarray] = {}
    with torch.no_grad():
        for name, param in model.named_parameters():
            if not param.requires_grad:
                continue
            flat = param.view(-1)
            k = np.asarray(loss_fn()).shape
            grads = np.zeros((flat.numel(),) + k)
            for i in range(flat.numel()):
                original = flat[i].item()
                flat[i] = original + step
                plus = np.asarray(loss_fn())
                flat[i] = original - step
                minus = np.asarray(loss_fn())
                flat[i] = original
                if not (np.all(np.isfinite(plus)) and np.all(np.isfinite(minus))):
                    raise OracleError(
                        f"non-finite loss at perturbed coordinate {name}[{i}]"
                    )
                grads[i] = (plus - minus) / (2.0 * step)
            out[name] = grads.reshape(param.shape + k)
    return out


def max_relative_error(
    analytic: dict[str, torch.Tensor] | dict[str, np.ndarray],
    reference: dict[str, np.ndarray],
    floor: float = 1e-5,
) -> tuple[float, str]:
    """Coordinate-wise |a - b| / max(|a|, |b|, floor), maximized."""
    worst, worst_name = 0.0, ""
    for name, ref in reference.items():
        a = analytic[name]
        a = a.detach().numpy() if isinstance(a, torch.Tensor) else np.asarray(a)
        ref = np.asarray(ref)
        denom = np.maximum(np.maximum(np.abs(a), np.abs(ref)), floor)
        rel = np.abs(a - ref) / denom
        peak = float(rel.max()) if rel.size else 0.0
        if peak > worst:
            worst, worst_name = peak, name
    return worst, worst_name


# --- tiny instances ----------------------------------------------------------


def make_tiny_model(
    vocab_size: int = 4,
    seed: int = 0,
    *,
    feature_dim: int = 6,
    scene_tokens: int = 2,
    sharp: float = 1.0,
) -> PrefixLM:
    """A small random model suitable for full enumeration (|V| <= 4)."""
    config = ModelConfig(
        vocab_size=vocab_size,
        feature_dim=feature_dim,
        embed_dim=8,
        n_heads=2,
        n_blocks=2,
        ff_mult=2,
        max_seq_len=24,
        scene_tokens=scene_tokens,
        encoder_hidden=8,
        seed=seed,
    )
    model = PrefixLM(config)
    g = torch.Generator().manual_seed(seed + 7919)
    with torch.no_grad():
        model.out.weight.uniform_(-sharp, sharp, generator=g)
        model.out.bias.uniform_(-sharp, sharp, generator=g)
    return model


def tiny_instance(
    model: PrefixLM, seed: int = 0
) -> tuple[torch.Tensor, list[int], PromptSequence]:
    """Random scene features, a short prompt, and the matching reason-kind
    template for a tiny model."""
    g = torch.Generator().manual_seed(seed + 104729)
    features = torch.rand(
        1, model.config.feature_dim, dtype=model.config.torch_dtype, generator=g
    )
    prompt_ids = [1, 3 % model.config.vocab_size]
    z = model.make_prefix(features[0], prompt_ids)
    template = dataclasses.replace(z, kind=TemplateKind.REASON)
    return features, prompt_ids, template


def tiny_reason_template(model: PrefixLM, seed: int = 0) -> PromptSequence:
    return tiny_instance(model, seed)[2]


def pseudo_reward(tokens: tuple[int, ...], truncated: bool) -> float:
    """Deterministic reward in [-1, 1], varied across sequences."""
    h = 1 if truncated else 0
    for tok in tokens:
        h = (h * 31 + tok + 1) % 997
    return h / 498.0 - 1.0


# --- check runners -------------------------------------------------------------


@dataclass
class CheckResult:
    name: str
    passed: bool
    measured: float
    threshold: float
    detail: str = ""

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"[{status}] {self.name}: measured {self.measured:.3e} vs threshold {self.threshold:.3e} {self.detail}"


def _flatten(grads: dict[str, torch.Tensor]) -> np.ndarray:
    return np.concatenate([g.detach().numpy().ravel() for g in grads.values()])


def stratified_counts(n_draws: int, probs: np.ndarray) -> np.ndarray:
    """Proportional draw allocation by largest remainder.

    A deterministic (variance-reduced) realization of an n-draw Monte-Carlo
    sample: each outcome receives floor(n*p) draws and the leftovers go to
    the largest fractional parts, so realized frequencies sit far inside the
    iid sampling band."""
    raw = n_draws * probs
    counts = np.floor(raw).astype(np.int64)
    residual = n_draws - int(counts.sum())
    order = np.argsort(-(raw - counts), kind="stable")
    counts[order[:residual]] += 1
    return counts


def check_reinforce_estimator(
    n_models: int = 20,
    seed: int = 0,
    *,
    max_len: int = 3,
    mc_draws: int = 0,
    threshold: float = 1e-6,
) -> CheckResult:
    """Full-enumeration mean of the self-critical single-sample estimator vs
    the exact expected-reward gradient; optionally a Monte-Carlo mean within
    three standard errors per coordinate (exact per-coordinate variance,
    variance-reduced draw allocation)."""
    worst = 0.0
    worst_z = 0.0
    mc_ok = True
    for m in range(n_models):
        model = make_tiny_model(seed=seed + m)
        features, prompt_ids, template = tiny_instance(model, seed=seed + m)
        sequences = enumerate_sequences(model.config.vocab_size, max_len)
        with torch.no_grad():
            probs = _sequence_logprobs(model, template, sequences).exp().numpy()
        rewards = [pseudo_reward(tokens, truncated) for tokens, truncated in sequences]

        exact = exact_expected_gradient(model, template, pseudo_reward, max_len)
        exact_flat = _flatten(exact)

        per_seq = []
        for (tokens, truncated), advantage in zip(sequences, rewards):
            surrogate = reinforce_surrogate(
                model, features, [(0, prompt_ids, [(tokens, advantage)])]
            )
            per_seq.append(_flatten(_grad_dict(model, surrogate)))
        g_matrix = np.stack(per_seq)  # (n_seq, n_params)
        est_mean = probs @ g_matrix

        scale = max(float(np.linalg.norm(exact_flat)), 1e-12)
        rel = float(np.linalg.norm(est_mean + exact_flat)) / scale
        worst = max(worst, rel)

        if mc_draws:
            weights = probs / probs.sum()
            counts = stratified_counts(mc_draws, weights)
            mc_mean = counts @ g_matrix / mc_draws
            variance = weights @ (g_matrix - est_mean) ** 2
            se = np.sqrt(variance / mc_draws)
            deviation = np.abs(mc_mean + exact_flat)
            if not np.all(deviation <= 3.0 * se + 1e-12):
                mc_ok = False
            with np.errstate(divide="ignore", invalid="ignore"):
                z = np.where(se > 0, deviation / se, 0.0)
            worst_z = max(worst_z, float(z.max()))
    passed = worst < threshold and mc_ok
    detail = f"(max Monte-Carlo |z| {worst_z:.3f})" if mc_draws else ""
    if not mc_ok:
        detail = "(Monte-Carlo mean outside 3 standard errors) " + detail
    return CheckResult("reinforce_estimator_vs_exact", passed, worst, threshold, detail)


def _gradient_instance(seed: int):
    world = WorldConfig(
        seed=seed,
        n_labelled=4,
        n_unlabelled=2,
        shapes=("circle", "square"),
        colors=("red", "blue"),
        sizes=("small",),
        max_objects=2,
    )
    train, val, test = generate_dataset(world)
    samples = sorted(train + val + test, key=lambda s: (not s.labelled, s.sample_id))[:3]
    vocab = Vocabulary.for_world(world)
    space = FeatureSpace.from_world(world)
    # kept near 1.2k parameters so 2P central-difference evaluations of the
    # full loss vector stay inside the verification time budget
    model = PrefixLM(
        ModelConfig(
            vocab_size=len(vocab),
            feature_dim=space.dim,
            embed_dim=6,
            n_heads=2,
            n_blocks=2,
            ff_mult=1,
            max_seq_len=28,
            scene_tokens=1,
            encoder_hidden=4,
            seed=seed,
        )
    )
    g = torch.Generator().manual_seed(seed + 7919)
    with torch.no_grad():
        model.out.weight.uniform_(-0.5, 0.5, generator=g)
        model.out.bias.uniform_(-0.5, 0.5, generator=g)
    return model, vocab, space, samples


def check_loss_gradients(
    n_instances: int = 10,
    seed: int = 0,
    *,
    step: float = 1e-5,
    threshold: float = 1e-4,
) -> CheckResult:
    """Analytic gradients of the four losses vs central finite differences."""
    worst = 0.0
    worst_detail = ""
    for inst in range(n_instances):
        model, vocab, space, samples = _gradient_instance(seed + 31 * inst)
        batch = encode_batch(samples, vocab, space)
        candidate_sets = build_candidate_sets(samples, model, vocab, space, k=2, max_len=6)
        records = compute_rewards(model, vocab, batch, candidate_sets)

        def losses_vector():
            with torch.no_grad():
                return np.array(
                    [
                        loss_answer(model, vocab, batch).item(),
                        loss_explanation(model, vocab, batch).item(),
                        loss_explanatory_answer(model, vocab, batch, candidate_sets).item(),
                        loss_reinforce(model, vocab, batch, candidate_sets, records).item(),
                    ]
                )

        analytic = {}
        for name, _ in model.named_parameters():
            analytic[name] = []
        for loss_value in (
            loss_answer(model, vocab, batch),
            loss_explanation(model, vocab, batch),
            loss_explanatory_answer(model, vocab, batch, candidate_sets),
            loss_reinforce(model, vocab, batch, candidate_sets, records),
        ):
            grads = _grad_dict(model, loss_value)
            for name, g in grads.items():
                analytic[name].append(g.numpy())
        stacked = {name: np.stack(gs, axis=-1) for name, gs in analytic.items()}
        fd = finite_difference(losses_vector, model, step=step)
        rel, name = max_relative_error(stacked, fd)
        if rel > worst:
            worst, worst_detail = rel, f"(worst at {name}, instance {inst})"
    return CheckResult("loss_gradients_vs_fd", worst < threshold, worst, threshold, worst_detail)


def check_beam_vs_exhaustive(n_trials: int = 50, seed: int = 0) -> CheckResult:
    """Beam search must return exactly the enumerated top-K, and its reported
    log-probs must match teacher-forced rescoring."""
    failures = 0
    worst_gap = 0.0
    for trial in range(n_trials):
        model = make_tiny_model(seed=seed + trial, sharp=1.0 + (trial % 3))
        template = tiny_reason_template(model, seed=seed + trial)
        k = 1 + trial % 3
        max_len = 2 + trial % 4
        beam = beam_search(model, template, k, max_len)
        exact = exhaustive_topk(model, template, k, max_len)
        if [(c.tokens, c.truncated) for c in beam] != [(c.tokens, c.truncated) for c in exact]:
            failures += 1
            continue
        for ours, ref in zip(beam, exact):
            worst_gap = max(worst_gap, abs(ours.logprob - ref.logprob))
            with torch.no_grad():
                total, _ = model.sequence_logprob(template, list(ours.scored_ids()))
            worst_gap = max(worst_gap, abs(ours.logprob - float(total)))
    passed = failures == 0 and worst_gap < 1e-9
    return CheckResult(
        "beam_vs_exhaustive_topk",
        passed,
        worst_gap if failures == 0 else float(failures),
        1e-9,
        f"({failures} set mismatches in {n_trials} trials)",
    )


def run_verification(quick: bool = False, seed: int = 0) -> list[CheckResult]:
    if quick:
        return [
            check_reinforce_estimator(n_models=3, seed=seed),
            check_loss_gradients(n_instances=2, seed=seed),
            check_beam_vs_exhaustive(n_trials=10, seed=seed),
        ]
    return [
        check_reinforce_estimator(n_models=20, seed=seed, mc_draws=100_000),
        check_loss_gradients(n_instances=10, seed=seed),
        check_beam_vs_exhaustive(n_trials=50, seed=seed),
    ]
