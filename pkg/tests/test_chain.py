import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from markov_sa.chain import (ChainError, TransitionKernel, is_ergodic, is_irreducible, kernel_powers,
                             load_kernel, mixing_profile, n_step_kernel, period, sample_path,
                             stationary_distribution)

TWO = [[0.9, 0.1], [0.2, 0.8]]
SWAP = [[0.0, 1.0], [1.0, 0.0]]
HALF = [[0.5, 0.5], [0.5, 0.5]]


@st.composite
def kernels(draw, max_n=6):
    n = draw(st.integers(1, max_n))
    raw = draw(st.lists(st.lists(st.floats(0.05, 1.0), min_size=n, max_size=n), min_size=n, max_size=n))
    rows = np.array(raw)
    return TransitionKernel(rows / rows.sum(axis=1, keepdims=True))


class TestKernel:
    def test_rejects_bad_rows(self):
        with pytest.raises(ChainError):
            TransitionKernel([[0.5, 0.6], [0.5, 0.5]])
        with pytest.raises(ChainError):
            TransitionKernel([[1.2, -0.2], [0.5, 0.5]])
        with pytest.raises(ChainError):
            TransitionKernel(np.ones((2, 3)) / 3)
        with pytest.raises(ChainError):
            TransitionKernel(np.zeros((0, 0)))

    def test_rows_are_read_only(self):
        k = TransitionKernel(TWO)
        with pytest.raises(ValueError):
            k.rows[0, 0] = 1.0

    def test_csv_round_trip(self, tmp_path):
        k = TransitionKernel([[1 / 3, 2 / 3], [0.25, 0.75]])
        k.to_csv(tmp_path / "k.csv")
        back = load_kernel(tmp_path / "k.csv")
        assert np.array_equal(back.rows, k.rows)

    def test_csv_loader_validates(self, tmp_path):
        (tmp_path / "bad.csv").write_text("0.5,0.6\n0.5,0.5\n")
        with pytest.raises(ChainError):
            load_kernel(tmp_path / "bad.csv")


class TestStationary:
    def test_single_state(self):
        assert stationary_distribution(TransitionKernel([[1.0]])).probs.tolist() == [1.0]

    def test_two_state_linear_solve(self):
        d = stationary_distribution(TransitionKernel(TWO)).probs
        assert np.allclose(d, [2 / 3, 1 / 3], atol=1e-14)

    def test_symmetric(self):
        assert np.allclose(stationary_distribution(TransitionKernel(HALF)).probs, [0.5, 0.5])

    def test_reducible_rejected(self):
        with pytest.raises(ChainError):
            stationary_distribution(TransitionKernel([[1.0, 0.0], [0.0, 1.0]]))

    def test_large_chain_uses_power_iteration(self):
        n = 2001
        rows = np.full((n, n), 0.5 / (n - 1))
        np.fill_diagonal(rows, 0.5)
        d = stationary_distribution(TransitionKernel(rows))
        assert np.allclose(d.probs, 1.0 / n, atol=1e-12)

    @given(kernels())
    def test_fixed_point_and_limit_row(self, k):
        d = stationary_distribution(k)
        assert abs(d.probs.sum() - 1) <= 1e-12
        assert np.abs(d.probs @ k.rows - d.probs).max() <= 1e-10
        assert np.allclose(n_step_kernel(k, 2000).rows[0], d.probs, atol=1e-8)


class TestStructure:
    def test_period_of_swap(self):
        k = TransitionKernel(SWAP)
        assert is_irreducible(k) and period(k) == 2 and not is_ergodic(k)

    def test_aperiodic(self):
        assert is_ergodic(TransitionKernel(TWO))

    def test_three_cycle(self):
        k = TransitionKernel([[0, 1, 0], [0, 0, 1], [1, 0, 0]])
        assert period(k) == 3


class TestNStep:
    def test_zero_is_identity(self):
        assert np.array_equal(n_step_kernel(TransitionKernel(TWO), 0).rows, np.eye(2))

    def test_swap_squared(self):
        assert np.array_equal(n_step_kernel(TransitionKernel(SWAP), 2).rows, np.eye(2))

    def test_hand_product(self):
        assert np.allclose(n_step_kernel(TransitionKernel(TWO), 2).rows, [[0.83, 0.17], [0.34, 0.66]],
                           atol=1e-15)

    def test_negative_rejected(self):
        with pytest.raises(ValueError):
            n_step_kernel(TransitionKernel(TWO), -1)

    @given(kernels(), st.integers(0, 60))
    def test_rows_stay_stochastic(self, k, n):
        assert np.abs(n_step_kernel(k, n).rows.sum(axis=1) - 1).max() <= 1e-10

    def test_kernel_powers_settle(self):
        P = kernel_powers(TransitionKernel(HALF), 50)
        assert P.shape[0] <= 3
        assert np.allclose(P[-1], 0.5)


class TestMixing:
    def test_one_step_mixing(self):
        prof = mixing_profile(TransitionKernel(HALF), 10)
        assert np.all(prof.tv_curve[1:, 1] == 0)

    def test_single_state(self):
        prof = mixing_profile(TransitionKernel([[1.0]]), 10)
        assert np.all(prof.tv_curve[:, 1] == 0)

    def test_eigenvalue_rate(self):
        # P^n - 1 d = 0.7^n (I - 1 d) for this kernel, so tv(n) = 0.7^n tv(0)
        prof = mixing_profile(TransitionKernel(TWO), 60)
        n, tv = prof.tv_curve.T
        pos = tv > 0
        assert np.allclose(tv[pos], 0.7 ** n[pos] * tv[0], rtol=1e-8)
        assert prof.rho == pytest.approx(0.7, abs=1e-3)

    def test_periodic_does_not_mix(self):
        prof = mixing_profile(TransitionKernel(SWAP), 20)
        assert prof.rho == 1.0 and not prof.mixes

    @given(kernels())
    def test_envelope_dominates(self, k):
        prof = mixing_profile(k, 40)
        n, tv = prof.tv_curve.T
        assert np.all(np.diff(tv) <= 0)
        assert 0 <= prof.rho < 1
        assert np.all(tv <= prof.c_mix * prof.rho**n * (1 + 1e-12))


class TestSampling:
    def test_single_state(self):
        assert sample_path(TransitionKernel([[1.0]]), 0, 50, seed=1).tolist() == [0] * 50

    def test_swap(self):
        assert sample_path(TransitionKernel(SWAP), 0, 4, seed=9).tolist() == [0, 1, 0, 1]

    def test_occupancy(self):
        path = sample_path(TransitionKernel(TWO), 0, 10**6, seed=3)
        assert abs(np.mean(path == 0) - 2 / 3) < 0.01

    def test_bitwise_reproducible(self):
        k = TransitionKernel(TWO)
        assert np.array_equal(sample_path(k, 1, 200_000, seed=5), sample_path(k, 1, 200_000, seed=5))
        assert not np.array_equal(sample_path(k, 1, 1000, seed=5), sample_path(k, 1, 1000, seed=6))

    def test_transition_frequencies(self):
        k = TransitionKernel([[0.2, 0.3, 0.5], [0.6, 0.1, 0.3], [0.3, 0.3, 0.4]])
        path = sample_path(k, 0, 400_000, seed=11)
        counts = np.zeros((3, 3))
        np.add.at(counts, (path[:-1], path[1:]), 1)
        freq = counts / counts.sum(axis=1, keepdims=True)
        assert np.abs(freq - k.rows).max() < 0.01

    def test_bad_start(self):
        with pytest.raises(ChainError):
            sample_path(TransitionKernel(TWO), 2, 5, seed=0)
