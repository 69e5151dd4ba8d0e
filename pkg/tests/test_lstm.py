"""Gated cell: degenerate reduction, hand-computed values, ablations, ranges."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hypersphere_ad.autodiff import Rng, ShapeError, Tape
from hypersphere_ad.gradcheck import check_gradients
from hypersphere_ad.lstm import (
    LstmCellParams,
    LstmState,
    full_sequence_step,
    gate_statistics,
    lstm_step,
)


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def cell_oracle(z, p, h0, c0):
    """Direct elementwise evaluation of the gate formulas."""
    u = np.concatenate([h0, z], axis=1)
    s = sigmoid(u @ p.w_input.T + p.b_input)
    o = sigmoid(u @ p.w_output.T + p.b_output)
    f = sigmoid(u @ p.w_forget.T + p.b_forget)
    c_tilde = np.tanh(u @ p.w_candidate.T + p.b_candidate)
    c = f * c0 + s * c_tilde
    return o * np.tanh(c)


def random_params(rng, d_in, d_out, scale=0.8):
    fan = d_out + d_in
    return LstmCellParams(
        *(rng.normal(0, scale, size=(d_out, fan), dtype=np.float64) for _ in range(4)),
        *(rng.normal(0, scale, size=(d_out,), dtype=np.float64) for _ in range(4)),
    )


class TestLstmStep:
    def test_zero_params_give_zero_output(self):
        p = LstmCellParams(
            *(np.zeros((3, 5)) for _ in range(4)), *(np.zeros(3) for _ in range(4))
        )
        t = Tape()
        z = t.leaf(Rng(0).normal(size=(4, 2), dtype=np.float64))
        out, gates = lstm_step(z, p)
        np.testing.assert_array_equal(out.data, np.zeros((4, 3)))
        np.testing.assert_array_equal(gates.s.data, np.full((4, 3), 0.5))

    def test_hand_computed_scalar_case(self):
        # near-open gates, candidate reads z directly: out ~ tanh(tanh(0.5))
        big = 10.0
        p = LstmCellParams(
            w_input=np.array([[0.0, 0.0]]),
            w_output=np.array([[0.0, 0.0]]),
            w_forget=np.array([[0.0, 0.0]]),
            w_candidate=np.array([[0.0, 1.0]]),
            b_input=np.array([big]),
            b_output=np.array([big]),
            b_forget=np.array([0.0]),
            b_candidate=np.array([0.0]),
        )
        t = Tape()
        out, _ = lstm_step(t.leaf(np.array([[0.5]])), p)
        g = sigmoid(big)
        expect = g * np.tanh(g * np.tanh(0.5))
        np.testing.assert_allclose(out.data, [[expect]], atol=1e-12)
        assert abs(out.data[0, 0] - 0.4312) < 1e-3

    def test_no_both_gates_equals_tanh_candidate(self):
        rng = Rng(1)
        p = random_params(rng, 3, 3)
        z = rng.normal(size=(5, 3), dtype=np.float64)
        t = Tape()
        out, gates = lstm_step(t.leaf(z), p, ablation="no_both_gates")
        u = np.concatenate([np.zeros((5, 3)), z], axis=1)
        c_tilde = np.tanh(u @ p.w_candidate.T + p.b_candidate)
        np.testing.assert_array_equal(out.data, np.tanh(c_tilde))
        np.testing.assert_array_equal(gates.s.data, np.ones((5, 3)))
        np.testing.assert_array_equal(gates.o.data, np.ones((5, 3)))

    def test_identity_candidate_passes_z(self):
        rng = Rng(2)
        p = random_params(rng, 3, 3)
        z = rng.normal(size=(4, 3), dtype=np.float64)
        t = Tape()
        out, gates = lstm_step(t.leaf(z), p, ablation="identity_candidate")
        np.testing.assert_allclose(
            out.data, gates.o.data * np.tanh(gates.s.data * z), atol=1e-14
        )

    def test_identity_candidate_needs_square_cell(self):
        p = random_params(Rng(3), 2, 4)
        t = Tape()
        with pytest.raises(ShapeError):
            lstm_step(t.leaf(np.zeros((1, 2))), p, ablation="identity_candidate")

    def test_dimension_mismatch_raises(self):
        p = random_params(Rng(4), 3, 2)
        t = Tape()
        with pytest.raises(ShapeError):
            lstm_step(t.leaf(np.zeros((1, 5))), p)


class TestFullSequenceStep:
    @pytest.mark.parametrize("case", range(100))
    def test_degenerate_reduction_is_bitwise(self, case):
        rng = Rng(1000 + case)
        d_in = int(rng.integers(1, 5))
        d_out = int(rng.integers(1, 5))
        p = random_params(rng, d_in, d_out)
        z = rng.normal(size=(int(rng.integers(1, 4)), d_in), dtype=np.float64)
        t = Tape()
        zt = t.leaf(z)
        a, _ = lstm_step(zt, p)
        b, _ = full_sequence_step(zt, p, LstmState.zeros(d_out, d_out, dtype=np.float64))
        assert a.data.tobytes() == b.data.tobytes()

    def test_pure_memory_when_s_zero_f_one(self):
        # saturate f to ~1 and s to ~0: c == c0, out == o * tanh(c0)
        d = 3
        p = LstmCellParams(
            w_input=np.zeros((d, 2 * d)), w_output=np.zeros((d, 2 * d)),
            w_forget=np.zeros((d, 2 * d)), w_candidate=np.zeros((d, 2 * d)),
            b_input=np.full(d, -500.0), b_output=np.zeros(d),
            b_forget=np.full(d, 500.0), b_candidate=np.zeros(d),
        )
        c0 = Rng(5).normal(size=(d,), dtype=np.float64)
        t = Tape()
        out, gates = full_sequence_step(
            t.leaf(np.zeros((2, d))), p, LstmState(h0=np.zeros(d), c0=c0)
        )
        np.testing.assert_allclose(gates.c.data, np.tile(c0, (2, 1)), atol=1e-12)
        np.testing.assert_allclose(out.data, 0.5 * np.tanh(np.tile(c0, (2, 1))), atol=1e-12)

    def test_matches_formula_oracle(self):
        rng = Rng(6)
        p = random_params(rng, 4, 3)
        z = rng.normal(size=(5, 4), dtype=np.float64)
        c0 = rng.normal(size=(3,), dtype=np.float64)
        h0 = np.zeros(3)
        t = Tape()
        out, _ = full_sequence_step(t.leaf(z), p, LstmState(h0=h0, c0=c0))
        expect = cell_oracle(z, p, np.tile(h0, (5, 1)), c0)
        np.testing.assert_allclose(out.data, expect, atol=1e-12)


class TestGateStatistics:
    def test_constant_gates(self):
        t = Tape()
        p = LstmCellParams(
            *(np.zeros((2, 4)) for _ in range(4)), *(np.zeros(2) for _ in range(4))
        )
        _, gates = lstm_step(t.leaf(np.zeros((3, 2))), p)
        stats = gate_statistics(gates)
        assert stats["mean_gate_s"] == 0.5
        assert stats["mean_gate_o"] == 0.5
        assert stats["mean_gate_f"] == 0.5

    def test_matches_direct_mean(self):
        rng = Rng(7)
        p = random_params(rng, 3, 4)
        z = rng.normal(size=(16, 3), dtype=np.float64)
        t = Tape()
        _, gates = lstm_step(t.leaf(z), p)
        stats = gate_statistics(gates)
        assert stats["mean_gate_s"] == pytest.approx(float(gates.s.data.mean()), abs=0)


class TestProperties:
    @given(st.integers(0, 10_000))
    @settings(max_examples=30, deadline=None)
    def test_gate_ranges_open_interval(self, seed):
        rng = Rng(seed)
        p = random_params(rng, 3, 3, scale=1.0)
        z = rng.normal(size=(4, 3), dtype=np.float64)
        t = Tape()
        out, gates = lstm_step(t.leaf(z), p)
        for g in (gates.s.data, gates.o.data, gates.f.data):
            assert np.all(g > 0) and np.all(g < 1)
        assert np.all(out.data > -1) and np.all(out.data < 1)

    @given(st.integers(0, 10_000))
    @settings(max_examples=20, deadline=None)
    def test_input_gate_monotone_in_bias(self, seed):
        rng = Rng(seed)
        p = random_params(rng, 2, 3)
        z = rng.normal(size=(4, 2), dtype=np.float64)

        def gate_values(bias):
            params = LstmCellParams(
                p.w_input, p.w_output, p.w_forget, p.w_candidate,
                bias, p.b_output, p.b_forget, p.b_candidate,
            )
            t = Tape()
            _, gates = lstm_step(t.leaf(z), params)
            return gates.s.data

        bumped = p.b_input + np.abs(rng.normal(size=(3,), dtype=np.float64))
        assert np.all(gate_values(bumped) >= gate_values(p.b_input))

    def test_gradients_through_cell(self):
        rng = Rng(8)
        from hypersphere_ad.gradcheck import SUITES

        build, arrays = SUITES["lstm_cell"](rng)
        assert check_gradients(build, arrays) < 1e-4
