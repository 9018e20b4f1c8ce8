import math

import numpy as np
import pytest
import torch

from answercritic.oracle import (
    ENUMERATION_CAP,
    OracleError,
    check_beam_vs_exhaustive,
    check_loss_gradients,
    check_reinforce_estimator,
    enumerate_sequences,
    exact_expected_gradient,
    exhaustive_topk,
    finite_difference,
    make_tiny_model,
    max_relative_error,
    pseudo_reward,
    stratified_counts,
    tiny_instance,
    universe_size,
)
from answercritic.vocab import EOS_ID


class TestEnumeration:
    def test_counts(self):
        assert universe_size(4, 3) == 1 + 3 + 9 + 27
        seqs = enumerate_sequences(4, 3)
        assert len(seqs) == 40
        assert (tuple([EOS_ID]), False) == seqs[0] or ((EOS_ID,), False) in seqs
        # lexicographic in generated tokens
        assert [s for s, _ in seqs] == sorted(s for s, _ in seqs)

    def test_finished_and_truncated_forms(self):
        seqs = enumerate_sequences(4, 2)
        for tokens, truncated in seqs:
            if truncated:
                assert len(tokens) == 2 and EOS_ID not in tokens
            else:
                assert tokens[-1] == EOS_ID and EOS_ID not in tokens[:-1]

    def test_probabilities_sum_to_one(self):
        model = make_tiny_model(seed=1)
        _, _, template = tiny_instance(model, seed=1)
        from answercritic.oracle import _sequence_logprobs

        seqs = enumerate_sequences(model.config.vocab_size, 3)
        with torch.no_grad():
            total = float(_sequence_logprobs(model, template, seqs).exp().sum())
        assert math.isclose(total, 1.0, rel_tol=1e-12)

    def test_budget_cap_enforced(self):
        assert universe_size(4, 7) > ENUMERATION_CAP
        with pytest.raises(OracleError, match="budget"):
            enumerate_sequences(4, 7)


class TestExactExpectedGradient:
    def test_constant_reward_gives_zero_gradient(self):
        model = make_tiny_model(seed=3)
        _, _, template = tiny_instance(model, seed=3)
        grads = exact_expected_gradient(model, template, lambda *_: 0.75, max_len=3)
        worst = max(float(g.abs().max()) for g in grads.values())
        assert worst < 1e-12

    def test_single_step_closed_form(self):
        # one decode step over 3 ids: reward = indicator of token 0; the
        # output-bias gradient of E[reward] is the softmax derivative
        # p0 * (one_hot(0) - p)
        model = make_tiny_model(vocab_size=3, seed=5)
        _, _, template = tiny_instance(model, seed=5)
        reward = lambda tokens, truncated: 1.0 if tokens[0] == 0 else 0.0
        grads = exact_expected_gradient(model, template, reward, max_len=1)
        with torch.no_grad():
            probs = model.forward_logits(template)[-1].numpy()
        expected = probs[0] * (np.eye(3)[0] - probs)
        got = grads["out.bias"].numpy()
        assert np.abs(got - expected).max() < 1e-12

    def test_estimator_check_passes(self):
        result = check_reinforce_estimator(n_models=3, seed=0, mc_draws=100_000)
        assert result.passed, result.line()
        assert result.measured < 1e-9

    def test_constant_reward_shift_stays_unbiased(self, monkeypatch):
        # the self-critical baseline direction: shifting every advantage by a
        # constant leaves the estimator's expectation unchanged (sum of
        # probability gradients is zero)
        import answercritic.oracle as oracle_module

        original = oracle_module.reinforce_surrogate

        def shifted(model, features, entries):
            tampered = [
                (fi, prompt, [(toks, adv + 0.05) for toks, adv in cands])
                for fi, prompt, cands in entries
            ]
            return original(model, features, tampered)

        monkeypatch.setattr(oracle_module, "reinforce_surrogate", shifted)
        result = check_reinforce_estimator(n_models=1, seed=0)
        assert result.passed and result.measured < 1e-9

    def test_estimator_check_catches_bias(self, monkeypatch):
        # a genuinely biased estimator (scaled advantages) must fail the gate
        import answercritic.oracle as oracle_module

        original = oracle_module.reinforce_surrogate

        def biased(model, features, entries):
            tampered = [
                (fi, prompt, [(toks, adv * 1.3) for toks, adv in cands])
                for fi, prompt, cands in entries
            ]
            return original(model, features, tampered)

        monkeypatch.setattr(oracle_module, "reinforce_surrogate", biased)
        result = check_reinforce_estimator(n_models=1, seed=0)
        assert not result.passed


class TestFiniteDifference:
    def test_quadratic_exact(self):
        model = make_tiny_model(seed=2)

        def loss():
            with torch.no_grad():
                return np.array([sum(float((p**2).sum()) for p in model.parameters())])

        fd = finite_difference(loss, model, step=1e-5)
        for name, param in model.named_parameters():
            expected = 2.0 * param.detach().numpy()[..., None]
            assert np.abs(fd[name] - expected).max() < 1e-8

    def test_zero_function(self):
        model = make_tiny_model(seed=2)
        fd = finite_difference(lambda: np.zeros(1), model, step=1e-5)
        assert all(np.all(g == 0) for g in fd.values())

    def test_non_finite_flagged(self):
        model = make_tiny_model(seed=2)
        calls = {"n": 0}

        def loss():
            calls["n"] += 1
            return np.array([float("nan") if calls["n"] > 2 else 0.0])

        with pytest.raises(OracleError, match=r"non-finite loss at perturbed coordinate"):
            finite_difference(loss, model, step=1e-5)

    def test_max_relative_error_floor(self):
        analytic = {"w": np.array([1.0, 0.0])}
        reference = {"w": np.array([1.0 + 1e-6, 1e-9])}
        rel, name = max_relative_error(analytic, reference)
        assert name == "w"
        assert rel < 1e-3


class TestExhaustiveTopK:
    def test_k_at_least_universe_returns_all(self):
        model = make_tiny_model(seed=4)
        _, _, template = tiny_instance(model, seed=4)
        out = exhaustive_topk(model, template, k=100, max_len=2)
        assert len(out) == universe_size(4, 2)

    def test_deterministic_model_single_sequence(self):
        model = make_tiny_model(seed=4)
        with torch.no_grad():
            model.out.weight.zero_()
            model.out.bias.fill_(float("-inf"))
            model.out.bias[EOS_ID] = 0.0
        _, _, template = tiny_instance(model, seed=4)
        out = exhaustive_topk(model, template, k=5, max_len=3)
        assert len(out) == 1
        assert out[0].tokens == (EOS_ID,)
        assert out[0].logprob == 0.0

    def test_beam_check_passes(self):
        result = check_beam_vs_exhaustive(n_trials=10, seed=0)
        assert result.passed, result.line()


class TestStratifiedCounts:
    def test_sums_and_proportionality(self):
        probs = np.array([0.5, 0.25, 0.125, 0.125])
        counts = stratified_counts(1000, probs)
        assert counts.sum() == 1000
        assert np.array_equal(counts, np.array([500, 250, 125, 125]))

    def test_residual_goes_to_largest_remainders(self):
        probs = np.array([0.4, 0.35, 0.25])
        counts = stratified_counts(10, probs)
        assert counts.sum() == 10
        assert np.array_equal(counts, np.array([4, 4, 2]))  # 0.5 remainder wins


class TestGradientCheck:
    def test_loss_gradient_check_passes(self):
        result = check_loss_gradients(n_instances=1, seed=0)
        assert result.passed, result.line()
        assert result.measured < 1e-4

    def test_loss_gradient_check_catches_wrong_gradient(self, monkeypatch):
        import answercritic.oracle as oracle_module
        from answercritic.losses import loss_answer as real_loss_answer

        def wrong_loss_answer(model, vocab, batch, **kwargs):
            return 1.5 * real_loss_answer(model, vocab, batch, **kwargs)

        # break only the analytic side: FD still sees the true loss
        calls = {"n": 0}

        def flaky(model, vocab, batch, **kwargs):
            calls["n"] += 1
            if calls["n"] == 1:  # the analytic pass happens first
                return wrong_loss_answer(model, vocab, batch, **kwargs)
            return real_loss_answer(model, vocab, batch, **kwargs)

        monkeypatch.setattr(oracle_module, "loss_answer", flaky)
        result = check_loss_gradients(n_instances=1, seed=0)
        assert not result.passed


class TestPseudoReward:
    def test_deterministic_and_bounded(self):
        seqs = enumerate_sequences(4, 3)
        values = [pseudo_reward(t, tr) for t, tr in seqs]
        assert values == [pseudo_reward(t, tr) for t, tr in seqs]
        assert all(-1.0 <= v <= 1.0 for v in values)
        assert len(set(values)) > 10  # varied rewards
