import dataclasses
import math

import numpy as np
import pytest

from dpfed import (
    Algorithm,
    ClipConfig,
    ConfigError,
    EstimatorKind,
    FedTrainError,
    MomentsAccountant,
    ParamVector,
    TrainingConfig,
    bigram_softmax,
    builtin_models,
    epsilon_for,
    run_training,
    sample_users,
    substream,
    synthesize_dataset,
    user_update_fedavg,
    user_update_fedsgd,
)
from dpfed.data import shard_windows
from dpfed.models import ModelSpec


def tiny_dataset(num_users=20, tokens=120, vocab=8, het=0.3, seed=1):
    return synthesize_dataset(num_users, tokens, vocab, het, seed=seed, unroll=6)


def norm_close(a, b, tol=1e-12):
    scale = max(a.flat_norm(), b.flat_norm(), 1e-300)
    return (a - b).flat_norm() <= tol * scale


def base_config(**overrides):
    defaults = dict(
        rounds=3,
        q=0.5,
        example_cap=120.0,
        z=1.0,
        noise_enabled=False,
        clip=ClipConfig.flat(math.inf),
        algorithm=Algorithm.FED_SGD,
        batch_size=None,
        learning_rate=0.5,
        seed=7,
        eval_every=2,
    )
    defaults.update(overrides)
    return TrainingConfig(**defaults)


class TestSampleUsers:
    def test_q_one_selects_everyone(self):
        idx = sample_users(50, 1.0, substream(1, "s"))
        np.testing.assert_array_equal(idx, np.arange(50))

    def test_bernoulli_mean_size_within_3_sigma(self):
        # 10^4 simulated rounds at q = 100/763430 over K users is slow;
        # the same binomial check at K=20000, q=0.005 (expected 100) is not
        K, q, reps = 20_000, 0.005, 10_000
        sizes = np.array(
            [len(sample_users(K, q, substream(2, "bern", r))) for r in range(reps)]
        )
        expected = q * K
        sigma = math.sqrt(K * q * (1 - q))
        assert abs(sizes.mean() - expected) <= 3 * sigma / math.sqrt(reps)

    def test_fixed_sample_exact_count_distinct(self):
        for r in range(20):
            idx = sample_users(500, 0.01, substream(3, "fixed", r), fixed_sample_size=100)
            assert len(idx) == 100
            assert len(set(idx.tolist())) == 100
            assert np.all(np.diff(idx) > 0)

    def test_fixed_sample_uniform_coverage(self):
        counts = np.zeros(40)
        for r in range(2000):
            idx = sample_users(40, 0.1, substream(4, "cov", r), fixed_sample_size=4)
            counts[idx] += 1
        # each user appears ~200 times; 3-sigma binomial band
        expected = 2000 * 4 / 40
        sigma = math.sqrt(2000 * 0.1 * 0.9)
        assert np.all(np.abs(counts - expected) <= 4 * sigma)

    def test_deterministic_under_seed(self):
        a = sample_users(100, 0.3, substream(5, "det", 9))
        b = sample_users(100, 0.3, substream(5, "det", 9))
        np.testing.assert_array_equal(a, b)


class TestUserUpdates:
    def test_zero_learning_rate_zero_update(self):
        ds = tiny_dataset()
        model = bigram_softmax(ds.vocab_size)
        theta0 = model.init(substream(1, "init"))
        for fn in (user_update_fedavg, user_update_fedsgd):
            cfg = base_config(learning_rate=0.0)
            delta, _, clipped = fn(
                ds.users[0].tokens, theta0, model, cfg, ds.unroll, substream(1, "u"), "u0"
            )
            assert delta.flat_norm() == 0.0
            assert not clipped

    def test_fedavg_single_full_batch_equals_fedsgd(self):
        # E=1, one batch covering the shard, no clipping: the two update
        # rules are algebraically the same single gradient step
        ds = tiny_dataset()
        model = bigram_softmax(ds.vocab_size)
        theta0 = model.init(substream(2, "init"))
        cfg = base_config(local_epochs=1, batch_size=None)
        for shard in ds.users[:5]:
            avg, _, _ = user_update_fedavg(
                shard.tokens, theta0, model, cfg, ds.unroll, substream(3, "a"), "x"
            )
            sgd, _, _ = user_update_fedsgd(
                shard.tokens, theta0, model, cfg, ds.unroll, substream(3, "b"), "x"
            )
            assert norm_close(avg, sgd, 1e-12)
            direct = model.gradient(
                theta0, shard_windows(shard.tokens, ds.unroll)
            ).scale(-cfg.learning_rate)
            assert norm_close(sgd, direct, 1e-12)

    def test_fedsgd_clip_contract(self):
        ds = tiny_dataset()
        model = bigram_softmax(ds.vocab_size)
        theta0 = model.init(substream(4, "init"))
        raw, preclip, _ = user_update_fedsgd(
            ds.users[0].tokens, theta0, model, base_config(), ds.unroll, substream(5, "r"), "x"
        )
        S = preclip / 5.0
        cfg = base_config(clip=ClipConfig.flat(S))
        clipped, preclip2, was_clipped = user_update_fedsgd(
            ds.users[0].tokens, theta0, model, cfg, ds.unroll, substream(5, "r"), "x"
        )
        assert preclip2 == pytest.approx(preclip, rel=1e-12)
        assert was_clipped
        assert clipped.flat_norm() == pytest.approx(S, rel=1e-12)

    def test_fedavg_batch_count(self):
        # 1600 tokens, unroll 10, batch 8 -> 20 gradient calls per epoch
        ds = synthesize_dataset(1, 1600, 12, 0.0, seed=5, unroll=10)
        model = bigram_softmax(12)
        calls = []
        counting = dataclasses.replace(
            model,
            gradient=lambda p, b, _g=model.gradient: (calls.append(1), _g(p, b))[1],
        )
        theta0 = model.init(substream(6, "init"))
        cfg = base_config(algorithm=Algorithm.FED_AVG, batch_size=8, local_epochs=1)
        user_update_fedavg(
            ds.users[0].tokens, theta0, counting, cfg, ds.unroll, substream(7, "c"), "x"
        )
        assert len(calls) == 20

    def test_greedy_clipping_keeps_every_intermediate_inside_ball(self):
        ds = tiny_dataset(num_users=2, tokens=96)
        model = bigram_softmax(ds.vocab_size)
        theta0 = model.init(substream(8, "init"))
        S = 0.05
        cfg = base_config(
            algorithm=Algorithm.FED_AVG,
            clip=ClipConfig.flat(S),
            batch_size=4,
            local_epochs=2,
            learning_rate=2.0,
        )
        delta, preclip, was_clipped = user_update_fedavg(
            ds.users[0].tokens, theta0, model, cfg, ds.unroll, substream(9, "g"), "x"
        )
        assert delta.flat_norm() <= S * (1 + 1e-12)
        assert was_clipped
        assert preclip > 0

    def test_end_only_clipping_differs_from_greedy(self):
        ds = tiny_dataset(num_users=2, tokens=96)
        model = bigram_softmax(ds.vocab_size)
        theta0 = model.init(substream(10, "init"))
        args = dict(
            algorithm=Algorithm.FED_AVG,
            clip=ClipConfig.flat(0.05),
            batch_size=4,
            local_epochs=2,
            learning_rate=2.0,
        )
        greedy, _, _ = user_update_fedavg(
            ds.users[0].tokens, theta0, model, base_config(**args), ds.unroll,
            substream(11, "e"), "x",
        )
        end_only, _, _ = user_update_fedavg(
            ds.users[0].tokens, theta0, model,
            base_config(greedy_clip=False, **args), ds.unroll,
            substream(11, "e"), "x",
        )
        assert greedy.flat_norm() <= 0.05 * (1 + 1e-12)
        assert end_only.flat_norm() <= 0.05 * (1 + 1e-12)
        assert not greedy.allclose(end_only, rtol=1e-6)

    def test_non_finite_gradient_names_user(self):
        ds = tiny_dataset(num_users=1)
        model = bigram_softmax(ds.vocab_size)
        broken = dataclasses.replace(
            model,
            gradient=lambda p, b: ParamVector(
                (n, np.full(a.size, math.nan)) for n, a in p.layers()
            ),
        )
        theta0 = model.init(substream(12, "init"))
        with pytest.raises(FedTrainError, match="u000000"):
            user_update_fedavg(
                ds.users[0].tokens, theta0, broken, base_config(), ds.unroll,
                substream(13, "n"), "u000000",
            )


class TestRunTraining:
    def test_matches_direct_full_batch_gradient_descent(self):
        # everyone participates, full-shard FedSGD, no clip/noise: each round
        # is one full-batch GD step on the pooled windows
        ds = tiny_dataset(num_users=6, tokens=96)
        model = bigram_softmax(ds.vocab_size)
        cfg = base_config(rounds=15, q=1.0, learning_rate=0.8, eval_every=100)
        result = run_training(cfg, ds, model)

        pooled = ds.all_windows()
        params = model.init(substream(cfg.seed, "init"))
        losses = [model.loss(params, pooled)]
        for _ in range(15):
            grads = [
                model.gradient(params, shard_windows(u.tokens, ds.unroll))
                for u in ds.users
            ]
            mean_grad = grads[0].zeros_like()
            for g in grads:
                mean_grad = mean_grad + g
            params = params - mean_grad.scale(cfg.learning_rate / ds.num_users)
            losses.append(model.loss(params, pooled))
        assert result.params.allclose(params, rtol=1e-9, atol=1e-12)
        assert all(b <= a + 1e-12 for a, b in zip(losses, losses[1:]))

    def test_bit_identical_reruns(self):
        ds = tiny_dataset()
        model = bigram_softmax(ds.vocab_size)
        cfg = base_config(
            rounds=6, q=0.4, noise_enabled=True, clip=ClipConfig.flat(0.5), z=1.2
        )
        r1 = run_training(cfg, ds, model, eval_set=ds.all_windows())
        r2 = run_training(cfg, ds, model, eval_set=ds.all_windows())
        assert r1.params.equals(r2.params)
        assert r1.round_logs == r2.round_logs
        assert r1.final_epsilon == r2.final_epsilon

    def test_worker_count_does_not_change_bits(self):
        ds = tiny_dataset()
        model = bigram_softmax(ds.vocab_size)
        kwargs = dict(rounds=4, q=0.6, noise_enabled=True, clip=ClipConfig.flat(0.5))
        serial = run_training(base_config(**kwargs, workers=1), ds, model)
        threaded = run_training(base_config(**kwargs, workers=4), ds, model)
        assert serial.params.equals(threaded.params)
        assert serial.round_logs == threaded.round_logs

    def test_epsilon_matches_direct_accountant_query(self):
        ds = tiny_dataset(num_users=25)
        model = bigram_softmax(ds.vocab_size)
        cfg = base_config(
            rounds=8, q=0.2, noise_enabled=True, clip=ClipConfig.flat(1.0),
            z=1.1, delta=1e-6,
        )
        result = run_training(cfg, ds, model)
        assert result.final_epsilon == pytest.approx(
            epsilon_for(0.2, 1.1, 8, 1e-6), rel=1e-12
        )

    def test_scaling_s_and_sigma_together_keeps_epsilon_trajectory(self):
        # sigma = zS/(qW): scaling S by 10 scales sigma but epsilon depends
        # only on (q, z, T, delta) -> trajectories are bit-identical
        ds = tiny_dataset()
        model = bigram_softmax(ds.vocab_size)
        eps = []
        sigmas = []
        for S in (0.3, 3.0):
            cfg = base_config(
                rounds=5, q=0.5, noise_enabled=True, clip=ClipConfig.flat(S), z=1.0
            )
            result = run_training(cfg, ds, model)
            eps.append([lg.epsilon for lg in result.round_logs])
            sigmas.append(result.round_logs[0].sigma)
        assert eps[0] == eps[1]
        assert sigmas[1] == pytest.approx(10 * sigmas[0], rel=1e-12)

    def test_sigma_equals_calibration_and_noise_perturbs(self):
        ds = tiny_dataset()
        model = bigram_softmax(ds.vocab_size)
        S, z, q = 0.4, 1.5, 0.5
        W = ds.total_weight(120.0)
        cfg = base_config(
            rounds=2, q=q, noise_enabled=True, clip=ClipConfig.flat(S), z=z
        )
        result = run_training(cfg, ds, model)
        expected_sigma = z * S / (q * W)
        assert all(lg.sigma == pytest.approx(expected_sigma, rel=1e-12) for lg in result.round_logs)
        quiet = run_training(
            base_config(rounds=2, q=q, clip=ClipConfig.flat(S)), ds, model
        )
        assert not result.params.allclose(quiet.params, rtol=1e-12)

    def test_round_log_fields(self):
        ds = tiny_dataset(num_users=30)
        model = bigram_softmax(ds.vocab_size)
        cfg = base_config(
            rounds=4, q=0.3, noise_enabled=True, clip=ClipConfig.flat(0.2), eval_every=2
        )
        result = run_training(cfg, ds, model, eval_set=ds.all_windows())
        for lg in result.round_logs:
            assert 0.0 <= lg.frac_clipped <= 1.0
            assert lg.sampled_users >= 0
            if lg.sampled_users:
                assert lg.preclip_norm_min <= lg.preclip_norm_median <= lg.preclip_norm_max
            assert lg.epsilon > 0 and math.isfinite(lg.epsilon)
        evaluated = [lg for lg in result.round_logs if lg.accuracy_top1 is not None]
        assert [lg.round for lg in evaluated] == [1, 3]

    def test_resume_reproduces_uninterrupted_run(self):
        ds = tiny_dataset()
        model = bigram_softmax(ds.vocab_size)
        kwargs = dict(q=0.5, noise_enabled=True, clip=ClipConfig.flat(0.5))
        full = run_training(base_config(rounds=10, **kwargs), ds, model)

        first = run_training(base_config(rounds=4, **kwargs), ds, model)
        acc = MomentsAccountant.from_state_dict(first.accountant.state_dict())
        second = run_training(
            base_config(rounds=6, **kwargs),
            ds,
            model,
            start_round=4,
            init_params=first.params,
            accountant=acc,
        )
        assert second.params.equals(full.params)
        assert second.final_epsilon == full.final_epsilon
        assert [lg.epsilon for lg in second.round_logs] == [
            lg.epsilon for lg in full.round_logs[4:]
        ]

    def test_no_noise_epsilon_infinite(self):
        ds = tiny_dataset()
        model = bigram_softmax(ds.vocab_size)
        result = run_training(base_config(rounds=2), ds, model)
        assert math.isinf(result.final_epsilon)
        assert all(math.isinf(lg.epsilon) for lg in result.round_logs)

    def test_noise_requires_finite_clip(self):
        with pytest.raises(ConfigError):
            base_config(noise_enabled=True, clip=ClipConfig.flat(math.inf))

    def test_mean_update_norm_bounded_by_sample_times_sensitivity(self):
        # ||estimate|| <= S * |C| / (qW) for the fixed-denominator estimator
        ds = tiny_dataset(num_users=30)
        model = bigram_softmax(ds.vocab_size)
        S, q = 0.1, 0.4
        W = ds.total_weight(120.0)
        seen = []
        prev = {"params": None}

        def check(log, params, acc):
            if prev["params"] is not None:
                step = params - prev["params"]
                seen.append((step.flat_norm(), log.sampled_users))
            prev["params"] = params

        cfg = base_config(rounds=6, q=q, clip=ClipConfig.flat(S), learning_rate=3.0)
        run_training(cfg, ds, model, round_callback=check)
        for norm, n_users in seen:
            assert norm <= S * n_users / (q * W) + 1e-12
