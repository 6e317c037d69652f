import math

import numpy as np
import pytest

from dpfed import (
    AccountantError,
    ConfigError,
    MomentsAccountant,
    PrivacyConfig,
    build_privacy_table,
    epsilon_for,
    log_moment,
)
from dpfed.accountant import DEFAULT_CHECKPOINTS, DEFAULT_ORDERS

# Reference epsilon grid for the sampled Gaussian mechanism, delta = K^-1.1,
# checkpoints 10^0..10^6 rounds. Tolerance: 1% relative or 0.02 absolute.
EPSILON_TABLE = [
    (1e5, 1e2, 1.0, [0.97, 0.98, 1.00, 1.07, 1.18, 2.21, 7.50]),
    (1e6, 1e1, 1.0, [0.68, 0.69, 0.69, 0.69, 0.69, 0.72, 0.73]),
    (1e6, 1e3, 1.0, [1.17, 1.17, 1.20, 1.28, 1.39, 2.44, 8.13]),
    (1e6, 1e4, 1.0, [1.73, 1.92, 2.08, 3.06, 8.49, 32.38, 187.01]),
    (1e6, 1e3, 3.0, [0.47, 0.47, 0.48, 0.48, 0.49, 0.67, 1.95]),
    (1e9, 1e3, 1.0, [0.84, 0.84, 0.84, 0.85, 0.88, 0.88, 0.88]),
]


def table_tolerance(expected: float) -> float:
    return max(0.01 * expected, 0.02)


class TestLogMoment:
    def test_q1_reduces_to_pure_gaussian_closed_form(self):
        # with q=1 the mixture is N(1, z^2) and the moment has the closed
        # form lam*(lam+1)/(2 z^2); at lam=1 that is 1/z^2
        for z in (0.7, 1.0, 3.0):
            for lam in (1, 2, 5, 17, 32):
                want = lam * (lam + 1) / (2.0 * z * z)
                assert log_moment(1.0, z, lam) == pytest.approx(want, rel=1e-10)

    def test_small_q_vanishes(self):
        for lam in (1, 8, 32):
            assert log_moment(1e-12, 1.0, lam) == pytest.approx(0.0, abs=1e-9)

    def test_nonnegative_and_monotone_in_lambda(self):
        values = [log_moment(1e-3, 1.0, lam) for lam in DEFAULT_ORDERS]
        assert all(v >= 0.0 for v in values)
        assert all(b >= a - 1e-15 for a, b in zip(values, values[1:]))

    def test_against_high_precision_oracle(self):
        # independent oracle: mpmath quadrature of the same two expectations
        # at 50 significant digits
        mp = pytest.importorskip("mpmath")
        mp.mp.dps = 50

        def oracle(q, z, lam):
            qm, zm = mp.mpf(q), mp.mpf(z)
            mu0 = lambda x: mp.npdf(x, 0, zm)
            mu1 = lambda x: mp.npdf(x, 1, zm)
            mu = lambda x: (1 - qm) * mu0(x) + qm * mu1(x)
            hi = max(1 + z * (lam + 25), lam + 1 + 25 * z)
            e2 = mp.quad(
                lambda x: mu(x) * (mu(x) / mu0(x)) ** lam, [-hi, 0, 1, lam + 1, hi]
            )
            e1 = mp.quad(
                lambda x: mu0(x) * (mu0(x) / mu(x)) ** lam, [-hi, 0, 1, hi]
            )
            return float(mp.log(max(e1, e2)))

        for q, z, lam in [
            (1e-3, 1.0, 1),
            (1e-3, 1.0, 13),
            (1e-3, 1.0, 32),
            (0.01, 1.0, 8),
            (1e-3, 3.0, 20),
            (6.549e-3, 1.0, 17),
        ]:
            assert log_moment(q, z, lam) == pytest.approx(
                oracle(q, z, lam), rel=1e-8, abs=1e-12
            )

    def test_input_validation(self):
        with pytest.raises(ConfigError):
            log_moment(0.0, 1.0, 1)
        with pytest.raises(ConfigError):
            log_moment(1.1, 1.0, 1)
        with pytest.raises(ConfigError):
            log_moment(0.5, 0.0, 1)
        with pytest.raises(ConfigError):
            log_moment(0.5, 1.0, 0)


class TestAccountant:
    def test_no_spendings_epsilon_zero(self):
        acc = MomentsAccountant(q=0.01)
        assert acc.get_privacy_spent(1e-9) == 0.0
        assert acc.get_privacy_spent(0.5) == 0.0

    def test_zero_rounds_noop(self):
        acc = MomentsAccountant(q=0.01)
        acc.accum_priv_spending(1.0, rounds=0)
        assert acc.get_privacy_spent(1e-9) == 0.0
        assert acc.history == []

    def test_composition_exactly_additive(self):
        a = MomentsAccountant(q=1e-3)
        a.accum_priv_spending(1.0, rounds=10)
        a.accum_priv_spending(1.0, rounds=90)
        b = MomentsAccountant(q=1e-3)
        b.accum_priv_spending(1.0, rounds=100)
        assert a.log_moments == b.log_moments  # bit-identical per order
        assert a.get_privacy_spent(1e-5) == b.get_privacy_spent(1e-5)

    def test_moments_nondecreasing_as_rounds_accumulate(self):
        acc = MomentsAccountant(q=1e-2)
        prev = list(acc.log_moments)
        for _ in range(5):
            acc.accum_priv_spending(1.0, rounds=3)
            assert all(b >= a for a, b in zip(prev, acc.log_moments))
            prev = list(acc.log_moments)

    def test_first_table_row_first_checkpoint(self):
        # K=1e5 users, 100 expected per round, z=1, 1 round, delta=10^-5.5
        acc = MomentsAccountant(q=1e-3)
        acc.accum_priv_spending(1.0, rounds=1)
        eps = acc.get_privacy_spent(10**-5.5)
        assert eps == pytest.approx(0.97, abs=table_tolerance(0.97))

    def test_variable_noise_scale_per_spending(self):
        acc = MomentsAccountant(q=1e-3)
        acc.accum_priv_spending(1.0, rounds=50)
        acc.accum_priv_spending(1.9, rounds=50)
        mixed = acc.get_privacy_spent(1e-6)
        pure_low = epsilon_for(1e-3, 1.0, 100, 1e-6)
        pure_high = epsilon_for(1e-3, 1.9, 100, 1e-6)
        assert pure_high < mixed < pure_low

    def test_state_roundtrip(self):
        acc = MomentsAccountant(q=5e-3)
        acc.accum_priv_spending(1.0, rounds=7)
        clone = MomentsAccountant.from_state_dict(acc.state_dict())
        assert clone.log_moments == acc.log_moments
        assert clone.history == acc.history
        assert clone.get_privacy_spent(1e-7) == acc.get_privacy_spent(1e-7)

    def test_degenerate_q1_single_round_matches_analytic_grid_minimum(self):
        z, delta = 2.0, 1e-6
        acc = MomentsAccountant(q=1.0)
        acc.accum_priv_spending(z, rounds=1)
        want = min(
            (lam * (lam + 1) / (2 * z * z) + math.log(1 / delta)) / lam
            for lam in DEFAULT_ORDERS
        )
        assert acc.get_privacy_spent(delta) == pytest.approx(want, rel=1e-9)


class TestEpsilonTable:
    @pytest.mark.parametrize("K,C,z,expected", EPSILON_TABLE)
    def test_rows_within_tolerance(self, K, C, z, expected):
        q = C / K
        delta = K**-1.1
        for T, want in zip(DEFAULT_CHECKPOINTS, expected):
            got = epsilon_for(q, z, T, delta)
            assert got == pytest.approx(want, abs=table_tolerance(want)), (
                f"K={K} C={C} z={z} T={T}"
            )

    def test_build_privacy_table_layout(self):
        records = build_privacy_table([1e6], [1e3], [1.0], checkpoints=[1, 10])
        assert len(records) == 2
        assert records[0]["rounds"] == 1 and records[1]["rounds"] == 10
        assert records[0]["delta"] == pytest.approx(1e6**-1.1)
        assert set(records[0]) == {"K", "C_tilde", "z", "rounds", "delta", "epsilon"}

    def test_build_privacy_table_matches_accountant_path(self):
        records = build_privacy_table([1e6], [1e3], [1.0], checkpoints=[100])
        acc = MomentsAccountant(q=1e-3)
        acc.accum_priv_spending(1.0, rounds=100)
        assert records[0]["epsilon"] == pytest.approx(
            acc.get_privacy_spent(1e6**-1.1), rel=1e-12
        )

    def test_sample_larger_than_population_rejected(self):
        with pytest.raises(ConfigError):
            build_privacy_table([100.0], [200.0], [1.0])


class TestMonotonicity:
    def test_epsilon_monotone_in_rounds_z_q_delta(self):
        base = dict(q=1e-3, z=1.0, rounds=1000, delta=1e-6)
        eps = epsilon_for(**base)

        for rounds in (10, 100, 1000, 10_000):
            prev = epsilon_for(base["q"], base["z"], rounds // 10, base["delta"])
            assert epsilon_for(base["q"], base["z"], rounds, base["delta"]) >= prev

        z_sweep = [epsilon_for(base["q"], z, base["rounds"], base["delta"]) for z in (0.8, 1.0, 2.0, 4.0)]
        assert all(b <= a + 1e-12 for a, b in zip(z_sweep, z_sweep[1:]))

        q_sweep = [epsilon_for(q, base["z"], base["rounds"], base["delta"]) for q in (1e-4, 1e-3, 1e-2, 1e-1)]
        assert all(b >= a - 1e-12 for a, b in zip(q_sweep, q_sweep[1:]))

        d_sweep = [epsilon_for(base["q"], base["z"], base["rounds"], d) for d in (1e-9, 1e-7, 1e-5, 1e-3)]
        assert all(b <= a + 1e-12 for a, b in zip(d_sweep, d_sweep[1:]))
        assert eps > 0


class TestPrivacyConfig:
    def test_validation(self):
        PrivacyConfig(q=0.5, z=1.0, delta=1e-9)
        with pytest.raises(ConfigError):
            PrivacyConfig(q=0.0, z=1.0, delta=1e-9)
        with pytest.raises(ConfigError):
            PrivacyConfig(q=0.5, z=-1.0, delta=1e-9)
        with pytest.raises(ConfigError):
            PrivacyConfig(q=0.5, z=1.0, delta=1.0)
