"""Losses, the small reference LM, gradients, the training loop, checkpoints."""

import math

import numpy as np
import pytest
import torch

from longppl.errors import ConfigError, TrainingError
from longppl.metrics import compute_ppl
from longppl.training import (
    LossBreakdown,
    StepRecord,
    TinyLM,
    TinyLMConfig,
    TinyLMScorer,
    TrainConfig,
    compute_ce,
    compute_longce,
    evaluate_answer_nll,
    load_checkpoint,
    longce_step_loss,
    read_training_log,
    save_checkpoint,
    tiny_lm_gradients,
    train,
    weighted_loss,
    write_training_log,
)

SMALL = TinyLMConfig(
    vocab_size=16,
    context_window=96,
    embedding_dim=16,
    hidden_dim=32,
    n_layers=1,
    n_heads=2,
    seed=0,
)


def small_model(seed=0):
    return TinyLM(
        TinyLMConfig(
            vocab_size=16,
            context_window=96,
            embedding_dim=16,
            hidden_dim=32,
            n_layers=1,
            n_heads=2,
            seed=seed,
        )
    )


def random_batch(model, batch=2, time=12, seed=0):
    g = torch.Generator().manual_seed(seed)
    return torch.randint(0, model.config.vocab_size, (batch, time), generator=g)


class TestComputeCE:
    def test_uniform_average(self):
        assert compute_ce([-1.0, -1.0]) == 1.0

    def test_certain(self):
        assert compute_ce([0.0, 0.0]) == 0.0

    def test_exp_ce_is_ppl(self):
        logps = [-0.3, -1.7, -0.9]
        assert math.exp(compute_ce(logps)) == pytest.approx(
            compute_ppl(logps), rel=1e-15
        )

    def test_empty(self):
        with pytest.raises(ValueError):
            compute_ce([])


class TestComputeLongCE:
    def test_sum_form_arithmetic(self):
        # weights exp(lpg): [2, 0.5]; nlls [1, 2] -> 2*1 + 0.5*2 = 3
        logps_long = [-1.0, -2.0]
        logps_short = [-1.0 - math.log(2), -2.0 + math.log(2)]
        breakdown = compute_longce(logps_long, logps_short, normalization="sum")
        np.testing.assert_allclose(breakdown.weights, [2.0, 0.5], rtol=1e-15)
        assert breakdown.total == pytest.approx(3.0, rel=1e-12)

    def test_mean_form(self):
        logps_long = [-1.0, -2.0]
        logps_short = [-1.0 - math.log(2), -2.0 + math.log(2)]
        breakdown = compute_longce(logps_long, logps_short, normalization="mean")
        assert breakdown.total == pytest.approx(1.5, rel=1e-12)

    def test_zero_gain_equals_ce(self):
        logps = [-0.25, -1.5, -3.0, -0.75]
        breakdown = compute_longce(logps, logps, normalization="mean")
        assert (breakdown.weights == 1.0).all()
        assert breakdown.total == compute_ce(logps)

    def test_clamp_at_gamma(self):
        breakdown = compute_longce([-0.1], [-0.1 - math.log(10)], gamma=5.0)
        assert breakdown.weights[0] == 5.0

    def test_weight_bounds(self):
        rng = np.random.default_rng(3)
        lls = -rng.exponential(1.0, size=200)
        lss = -rng.exponential(1.0, size=200)
        breakdown = compute_longce(lls, lss)
        assert (breakdown.weights > 0).all()
        assert (breakdown.weights <= 5.0).all()

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            compute_longce([-1.0], [-1.0, -2.0])

    def test_bad_normalization(self):
        with pytest.raises(ValueError):
            compute_longce([-1.0], [-1.0], normalization="median")


class TestTinyLMConfigValidation:
    def test_vocab_bounds(self):
        with pytest.raises(ConfigError):
            TinyLMConfig(vocab_size=0)
        with pytest.raises(ConfigError):
            TinyLMConfig(vocab_size=513)

    def test_context_bounds(self):
        with pytest.raises(ConfigError):
            TinyLMConfig(vocab_size=16, context_window=513)

    def test_head_divisibility(self):
        with pytest.raises(ConfigError):
            TinyLMConfig(vocab_size=16, embedding_dim=10, n_heads=3)

    def test_parameter_budget_enforced(self):
        big = TinyLMConfig(
            vocab_size=512,
            context_window=512,
            embedding_dim=256,
            hidden_dim=512,
            n_layers=2,
            n_heads=4,
        )
        with pytest.raises(ConfigError):
            TinyLM(big)

    def test_default_model_under_budget(self):
        model = TinyLM(TinyLMConfig(vocab_size=128))
        assert sum(p.numel() for p in model.parameters()) <= 1_000_000


class TestTinyLM:
    def test_deterministic_init(self):
        a, b = small_model(seed=7), small_model(seed=7)
        for (name, pa), (_, pb) in zip(
            a.state_dict().items(), b.state_dict().items()
        ):
            assert torch.equal(pa, pb), name

    def test_distributions_normalized(self):
        model = small_model()
        batch = random_batch(model, time=10)
        with torch.no_grad():
            dists = model.next_token_logprobs(batch)
        lse = torch.logsumexp(dists, dim=2)
        assert float(lse.abs().max()) < 1e-6

    def test_logprobs_finite_and_nonpositive(self):
        model = small_model()
        lps = model.sequence_logprobs(random_batch(model, time=20))
        assert torch.isfinite(lps).all()
        assert (lps <= 0).all()

    def test_single_symbol_vocab_scores_zero(self):
        model = TinyLM(
            TinyLMConfig(
                vocab_size=1,
                context_window=16,
                embedding_dim=4,
                hidden_dim=8,
                n_layers=1,
                n_heads=1,
            )
        )
        lps = model.sequence_logprobs(torch.zeros(2, 8, dtype=torch.long))
        assert torch.equal(lps, torch.zeros(2, 8, dtype=torch.float64))

    def test_position_window_bound(self):
        model = small_model()
        with pytest.raises(ValueError):
            model.next_token_logprobs(random_batch(model, time=20), start=90)

    def test_first_position_uses_unconditional_distribution(self):
        model = small_model()
        ids = random_batch(model, time=5)
        lps = model.sequence_logprobs(ids)
        init = torch.log_softmax(model.init_logits, dim=0)
        assert torch.equal(lps[:, 0], init[ids[:, 0]])


class TestTinyLMScorer:
    def test_matches_model(self):
        model = small_model()
        scorer = TinyLMScorer(model)
        ids = [3, 1, 4, 1, 5]
        got = scorer.batch_logprobs(ids)
        want = model.sequence_logprobs(torch.tensor([ids]))[0].tolist()
        assert got == want

    def test_logprob_is_last_entry(self):
        scorer = TinyLMScorer(small_model())
        assert scorer.logprob([3, 1, 4], 1) == scorer.batch_logprobs([3, 1, 4, 1])[-1]

    def test_start_shifts_positions(self):
        scorer = TinyLMScorer(small_model())
        assert scorer.batch_logprobs([2, 3], start=0) != scorer.batch_logprobs(
            [2, 3], start=8
        )


class TestGradients:
    def test_zero_weights_zero_gradients(self):
        model = small_model()
        batch = random_batch(model)
        grads = tiny_lm_gradients(model, batch, torch.zeros_like(batch, dtype=torch.float64))
        for name, grad in grads.items():
            assert torch.equal(grad, torch.zeros_like(grad)), name

    def test_unit_weights_match_ce_gradients(self):
        model = small_model()
        batch = random_batch(model)
        grads = tiny_lm_gradients(
            model, batch, torch.ones_like(batch, dtype=torch.float64)
        )
        model.zero_grad(set_to_none=True)
        loss = -model.sequence_logprobs(batch).mean()
        loss.backward()
        for name, param in model.named_parameters():
            torch.testing.assert_close(
                grads[name], param.grad, rtol=1e-12, atol=1e-15
            )
        model.zero_grad(set_to_none=True)

    def test_against_central_finite_differences(self):
        model = TinyLM(
            TinyLMConfig(
                vocab_size=6,
                context_window=12,
                embedding_dim=8,
                hidden_dim=12,
                n_layers=1,
                n_heads=2,
                seed=4,
            )
        )
        g = torch.Generator().manual_seed(4)
        batch = torch.randint(0, 6, (2, 8), generator=g)
        weights = torch.rand(2, 8, generator=g, dtype=torch.float64) * 4 + 0.5
        grads = tiny_lm_gradients(model, batch, weights)
        named = dict(model.named_parameters())
        rng = np.random.default_rng(4)
        names = sorted(named)
        for _ in range(6):
            name = names[rng.integers(len(names))]
            param = named[name]
            idx = int(rng.integers(param.numel()))
            with torch.no_grad():
                flat = param.view(-1)
                orig = flat[idx].item()
                h = 1e-6 * max(1.0, abs(orig))
                flat[idx] = orig + h
                f_plus = weighted_loss(model, batch, weights).item()
                flat[idx] = orig - h
                f_minus = weighted_loss(model, batch, weights).item()
                flat[idx] = orig
            numeric = (f_plus - f_minus) / (2 * h)
            analytic = grads[name].view(-1)[idx].item()
            denom = max(abs(numeric), abs(analytic), 1e-8)
            assert abs(numeric - analytic) / denom < 1e-4, name

    def test_loss_linear_in_weights(self):
        model = small_model()
        batch = random_batch(model)
        g = torch.Generator().manual_seed(9)
        weights = torch.rand(*batch.shape, generator=g, dtype=torch.float64) + 0.1
        single = weighted_loss(model, batch, weights).item()
        double = weighted_loss(model, batch, 2 * weights).item()
        assert double == pytest.approx(2 * single, rel=1e-12)

    def test_weights_do_not_carry_gradient(self):
        model = small_model()
        batch = random_batch(model, batch=2, time=48)
        cfg = TrainConfig(loss_kind="longce", K_short=16, d=8, steps=1)
        model.zero_grad(set_to_none=True)
        total, breakdown = longce_step_loss(model, batch, cfg)
        total.backward()
        live = {
            name: param.grad.detach().clone()
            for name, param in model.named_parameters()
        }
        frozen_weights = torch.from_numpy(breakdown.weights.reshape(batch.shape))
        frozen = tiny_lm_gradients(model, batch, frozen_weights)
        for name in frozen:
            torch.testing.assert_close(live[name], frozen[name], rtol=1e-12, atol=1e-15)


class TestStepLoss:
    def test_unit_weight_longce_equals_ce_bitwise(self):
        model = small_model()
        batch = random_batch(model, batch=3, time=48)
        ce_cfg = TrainConfig(loss_kind="ce", K_short=16, d=8)
        unit_cfg = TrainConfig(loss_kind="longce", unit_weights=True, K_short=16, d=8)
        total_ce, _ = longce_step_loss(model, batch, ce_cfg)
        total_unit, _ = longce_step_loss(model, batch, unit_cfg)
        assert total_ce.item() == total_unit.item()

    def test_weights_within_bounds(self):
        model = small_model()
        batch = random_batch(model, batch=2, time=64)
        cfg = TrainConfig(loss_kind="longce", K_short=16, d=8, gamma=5.0)
        _, breakdown = longce_step_loss(model, batch, cfg)
        assert (breakdown.weights > 0).all()
        assert (breakdown.weights <= 5.0).all()
        assert (breakdown.weights != 1.0).any()  # truncation actually happened

    def test_answer_nll_reported(self):
        model = small_model()
        batch = random_batch(model, batch=2, time=12)
        mask = torch.zeros_like(batch, dtype=torch.bool)
        mask[0, 5] = True
        mask[1, 7] = True
        cfg = TrainConfig(loss_kind="ce", K_short=16, d=8)
        _, breakdown = longce_step_loss(model, batch, cfg, answer_mask=mask)
        lps = model.sequence_logprobs(batch).detach()
        want = float(-(lps[0, 5] + lps[1, 7]) / 2)
        assert breakdown.answer_nll == pytest.approx(want, rel=1e-12)
        _, no_mask = longce_step_loss(model, batch, cfg)
        assert no_mask.answer_nll is None


class TestTrain:
    def corpus(self, n_docs=4, length=24, vocab=16, seed=0):
        rng = np.random.default_rng(seed)
        return [list(rng.integers(0, vocab, size=length)) for _ in range(n_docs)]

    def test_deterministic_trajectory(self):
        cfg = TrainConfig(loss_kind="longce", K_short=16, d=8, steps=5, seed=2)
        corpus = self.corpus()
        log_a = train(small_model(seed=1), corpus, cfg).log
        log_b = train(small_model(seed=1), corpus, cfg).log
        assert [r.loss for r in log_a] == [r.loss for r in log_b]

    def test_ce_descends_on_repeating_corpus(self):
        docs = [[0, 1, 2] * 8] * 4
        model = TinyLM(
            TinyLMConfig(
                vocab_size=3,
                context_window=32,
                embedding_dim=8,
                hidden_dim=16,
                n_layers=1,
                n_heads=2,
                seed=3,
            )
        )
        cfg = TrainConfig(
            loss_kind="ce", learning_rate=0.02, steps=50, batch_size=4, K_short=16, d=8
        )
        log = train(model, docs, cfg).log
        losses = [r.loss for r in log]
        assert all(b < a for a, b in zip(losses, losses[1:]))

    def test_full_prefix_docs_make_longce_identical_to_ce(self):
        # every block sees its whole prefix when documents fit in K_short,
        # so the weights are exactly one
        corpus = self.corpus(length=12)
        ce_cfg = TrainConfig(
            loss_kind="ce", K_short=16, d=8, steps=6, seed=5, learning_rate=0.05
        )
        long_cfg = TrainConfig(
            loss_kind="longce", K_short=16, d=8, steps=6, seed=5, learning_rate=0.05
        )
        ce_log = train(small_model(seed=2), corpus, ce_cfg).log
        long_log = train(small_model(seed=2), corpus, long_cfg).log
        for a, b in zip(ce_log, long_log):
            assert a.loss == b.loss
            assert b.mean_weight == 1.0

    def test_divergence_raises_with_step(self):
        cfg = TrainConfig(
            loss_kind="ce", learning_rate=1e30, steps=20, K_short=16, d=8
        )
        with pytest.raises(TrainingError) as err:
            train(small_model(), self.corpus(), cfg)
        assert isinstance(err.value.step, int)
        assert err.value.step >= 0

    def test_corpus_validation(self):
        model = small_model()
        cfg = TrainConfig(K_short=16, d=8, steps=1)
        with pytest.raises(ConfigError):
            train(model, [], cfg)
        with pytest.raises(ConfigError):
            train(model, [[1, 2], [1, 2, 3]], cfg)
        with pytest.raises(ConfigError):
            train(model, [[1, 99]], cfg)
        with pytest.raises(ConfigError):
            train(model, [[1] * 200], cfg)

    def test_k_short_must_fit_in_window(self):
        cfg = TrainConfig(K_short=96, d=8, steps=1)
        with pytest.raises(ConfigError):
            train(small_model(), self.corpus(), cfg)

    def test_answer_positions_length_checked(self):
        cfg = TrainConfig(K_short=16, d=8, steps=1)
        with pytest.raises(ConfigError):
            train(small_model(), self.corpus(), cfg, answer_positions=[[1]])

    def test_answer_nll_logged(self):
        cfg = TrainConfig(K_short=16, d=8, steps=3, seed=1)
        corpus = self.corpus()
        positions = [[5, 6]] * len(corpus)
        log = train(small_model(), corpus, cfg, answer_positions=positions).log
        assert all(r.answer_nll is not None for r in log)

    def test_evaluate_answer_nll_matches_direct(self):
        model = small_model()
        corpus = self.corpus(n_docs=2, length=10)
        positions = [[3], [4, 7]]
        got = evaluate_answer_nll(model, corpus, positions)
        with torch.no_grad():
            lps = model.sequence_logprobs(torch.tensor(corpus))
        want = float(-(lps[0, 3] + lps[1, 4] + lps[1, 7]) / 3)
        assert got == pytest.approx(want, rel=1e-12)


class TestCheckpoint:
    def test_round_trip_bitwise(self, tmp_path):
        model = small_model(seed=11)
        # nudge parameters away from the seeded init
        cfg = TrainConfig(loss_kind="ce", K_short=16, d=8, steps=2)
        train(model, [[1, 2, 3, 4] * 3] * 2, cfg)
        path = tmp_path / "model.ckpt"
        save_checkpoint(model, path)
        loaded = load_checkpoint(path)
        assert loaded.config == model.config
        for (name, pa), (_, pb) in zip(
            model.state_dict().items(), loaded.state_dict().items()
        ):
            assert torch.equal(pa, pb), name

    def test_scorer_identical_after_reload(self, tmp_path):
        model = small_model(seed=12)
        path = tmp_path / "model.ckpt"
        save_checkpoint(model, path)
        loaded = load_checkpoint(path)
        ids = [1, 2, 3, 4, 5]
        assert TinyLMScorer(model).batch_logprobs(ids) == TinyLMScorer(
            loaded
        ).batch_logprobs(ids)

    def test_truncated_rejected(self, tmp_path):
        model = small_model()
        path = tmp_path / "model.ckpt"
        save_checkpoint(model, path)
        blob = path.read_bytes()
        clipped = tmp_path / "clipped.ckpt"
        clipped.write_bytes(blob[: len(blob) - 16])
        with pytest.raises(ConfigError, match="truncated"):
            load_checkpoint(clipped)

    def test_trailing_bytes_rejected(self, tmp_path):
        model = small_model()
        path = tmp_path / "model.ckpt"
        save_checkpoint(model, path)
        path.write_bytes(path.read_bytes() + b"\x00")
        with pytest.raises(ConfigError, match="trailing"):
            load_checkpoint(path)

    def test_unknown_version_rejected(self, tmp_path):
        import json
        import struct

        header = json.dumps({"format_version": 99, "seed": 0, "config": {}}).encode()
        path = tmp_path / "bad.ckpt"
        path.write_bytes(struct.pack("<Q", len(header)) + header)
        with pytest.raises(ConfigError, match="format_version"):
            load_checkpoint(path)

    def test_garbage_header_rejected(self, tmp_path):
        import struct

        path = tmp_path / "bad.ckpt"
        path.write_bytes(struct.pack("<Q", 4) + b"\xff\xfe\x00\x01")
        with pytest.raises(ConfigError):
            load_checkpoint(path)


class TestTrainingLog:
    def test_round_trip(self, tmp_path):
        records = [
            StepRecord(step=0, loss=1.5, mean_weight=1.0, max_weight=1.0),
            StepRecord(
                step=1, loss=1.25, mean_weight=1.2, max_weight=5.0, answer_nll=2.5
            ),
        ]
        path = tmp_path / "log.jsonl"
        write_training_log(records, path)
        rows = read_training_log(path)
        assert rows[0] == {"step": 0, "loss": 1.5, "mean_weight": 1.0, "max_weight": 1.0}
        assert rows[1]["answer_nll"] == 2.5
        assert "answer_nll" not in rows[0]


class TestTrainConfigValidation:
    def test_loss_kind(self):
        with pytest.raises(ConfigError):
            TrainConfig(loss_kind="mse")

    def test_window_relation(self):
        with pytest.raises(ConfigError):
            TrainConfig(K_short=8, d=16)

    def test_gamma(self):
        with pytest.raises(ConfigError):
            TrainConfig(gamma=0.0)

    def test_normalization(self):
        with pytest.raises(ConfigError):
            TrainConfig(normalization="max")

    def test_momentum_range(self):
        with pytest.raises(ConfigError):
            TrainConfig(momentum=1.0)
