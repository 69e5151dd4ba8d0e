"""Single-step gated memory cell applied to each latent vector.

The cell is a standard LSTM unit driven as a one-step sequence with
zero initial hidden and cell state, so the recurrence degenerates to

    c = s * c_tilde          (input gate times candidate)
    z_hat = o * tanh(c)      (output gate)

``lstm_step`` is the model path.  ``full_sequence_step`` keeps the
forget-gate term ``f * c0`` and exists so tests can verify that the
degenerate form is exactly the zero-state special case.  Gate-ablation
switches force the input/output gates to all-ones or replace the
candidate with the raw input, matching the ablation variants.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import (
    DEFAULT_DTYPE,
    Rng,
    ShapeError,
    Tensor,
    concat,
    mul,
    sigmoid,
    tanh,
)
from .layers import kaiming_uniform, linear

GATE_ABLATIONS = (
    "none",
    "no_input_gate",
    "no_output_gate",
    "no_both_gates",
    "identity_candidate",
)


@dataclass
class LstmCellParams:
    """Four gate weight matrices of shape (d_out, d_hidden + d_in) and
    their biases.  The hidden columns stay at their init values when the
    initial hidden state is zero (their gradient is identically zero),
    but are kept for checkpoint fidelity."""

    w_input: np.ndarray
    w_output: np.ndarray
    w_forget: np.ndarray
    w_candidate: np.ndarray
    b_input: np.ndarray
    b_output: np.ndarray
    b_forget: np.ndarray
    b_candidate: np.ndarray

    def __post_init__(self):
        shapes = {m.shape for m in (self.w_input, self.w_output, self.w_forget, self.w_candidate)}
        if len(shapes) != 1:
            raise ShapeError(f"gate weight matrices disagree in shape: {shapes}")
        bshapes = {b.shape for b in (self.b_input, self.b_output, self.b_forget, self.b_candidate)}
        if len(bshapes) != 1:
            raise ShapeError(f"gate biases disagree in shape: {bshapes}")

    @property
    def d_out(self) -> int:
        return self.w_input.shape[0]

    @property
    def d_in(self) -> int:
        return self.w_input.shape[1] - self.d_hidden

    @property
    def d_hidden(self) -> int:
        # hidden dim equals output dim for this cell
        return self.w_input.shape[0]

    @classmethod
    def create(cls, d_in: int, d_out: int, rng: Rng, dtype=DEFAULT_DTYPE):
        fan_in = d_out + d_in
        def w():
            return kaiming_uniform((d_out, fan_in), fan_in, rng, dtype)
        return cls(
            w_input=w(), w_output=w(), w_forget=w(), w_candidate=w(),
            b_input=np.zeros(d_out, dtype=dtype),
            b_output=np.zeros(d_out, dtype=dtype),
            b_forget=np.zeros(d_out, dtype=dtype),
            b_candidate=np.zeros(d_out, dtype=dtype),
        )


@dataclass
class LstmState:
    """Initial hidden/cell state; all-zero in the model configuration."""

    h0: np.ndarray
    c0: np.ndarray

    @classmethod
    def zeros(cls, d_hidden: int, d_out: int, dtype=DEFAULT_DTYPE):
        return cls(h0=np.zeros(d_hidden, dtype=dtype), c0=np.zeros(d_out, dtype=dtype))


@dataclass
class GateActivations:
    """Gate and state tensors from one cell application (for diagnostics)."""

    s: Tensor
    o: Tensor
    f: Tensor
    c_tilde: Tensor
    c: Tensor
    h: Tensor


class _BoundCell:
    """Cell parameters bound to a tape as leaf/constant tensors."""

    def __init__(self, tape, params: LstmCellParams, leaves: dict | None):
        if leaves is None:
            leaves = {}
        self.t = tape
        names = ("w_input", "w_output", "w_forget", "w_candidate",
                 "b_input", "b_output", "b_forget", "b_candidate")
        for n in names:
            setattr(self, n, leaves.get(n) or tape.leaf(getattr(params, n)))


def _gates(z: Tensor, cell: _BoundCell, h0: np.ndarray, ablation: str):
    if ablation not in GATE_ABLATIONS:
        raise ShapeError(f"unknown gate ablation {ablation!r}; one of {GATE_ABLATIONS}")
    n = z.data.shape[0]
    tape = z.tape
    h_prev = tape.leaf(np.broadcast_to(h0.astype(z.data.dtype), (n, h0.shape[0])).copy())
    u = concat([h_prev, z], axis=1)

    def gate(w, b):
        return sigmoid(linear(u, w, b))

    if ablation in ("no_input_gate", "no_both_gates"):
        s = tape.leaf(np.ones((n, cell.w_input.data.shape[0]), dtype=z.data.dtype))
    else:
        s = gate(cell.w_input, cell.b_input)
    if ablation in ("no_output_gate", "no_both_gates"):
        o = tape.leaf(np.ones((n, cell.w_output.data.shape[0]), dtype=z.data.dtype))
    else:
        o = gate(cell.w_output, cell.b_output)
    f = gate(cell.w_forget, cell.b_forget)
    if ablation == "identity_candidate":
        if z.data.shape[1] != cell.w_candidate.data.shape[0]:
            raise ShapeError(
                "identity_candidate needs d_in == d_out "
                f"({z.data.shape[1]} vs {cell.w_candidate.data.shape[0]})"
            )
        c_tilde = z
    else:
        c_tilde = tanh(linear(u, cell.w_candidate, cell.b_candidate))
    return s, o, f, c_tilde


def lstm_step(
    z: Tensor,
    params: LstmCellParams,
    state: LstmState | None = None,
    ablation: str = "none",
    leaves: dict | None = None,
):
    """Degenerate one-step cell: c = s * c_tilde, z_hat = o * tanh(c).

    ``leaves`` may supply already-bound parameter tensors (training binds
    them once per tape so gradients land on the shared leaves).
    """
    if state is None:
        state = LstmState.zeros(params.d_hidden, params.d_out, dtype=z.data.dtype)
    cell = _BoundCell(z.tape, params, leaves)
    s, o, f, c_tilde = _gates(z, cell, state.h0, ablation)
    c = mul(s, c_tilde)
    h = mul(o, tanh(c))
    return h, GateActivations(s=s, o=o, f=f, c_tilde=c_tilde, c=c, h=h)


def full_sequence_step(
    z: Tensor,
    params: LstmCellParams,
    state: LstmState,
    ablation: str = "none",
    leaves: dict | None = None,
):
    """General one-step cell with nonzero initial cell state:
    c = f * c0 + s * c_tilde.  Test-only path."""
    cell = _BoundCell(z.tape, params, leaves)
    s, o, f, c_tilde = _gates(z, cell, state.h0, ablation)
    n = z.data.shape[0]
    c0 = np.broadcast_to(state.c0.astype(z.data.dtype), (n, params.d_out)).copy()
    c = mul(f, z.tape.leaf(c0)) + mul(s, c_tilde)
    h = mul(o, tanh(c))
    return h, GateActivations(s=s, o=o, f=f, c_tilde=c_tilde, c=c, h=h)


def gate_statistics(gates: GateActivations) -> dict[str, float]:
    """Mean activation per gate, for epoch metrics and reports."""
    return {
        "mean_gate_s": float(gates.s.data.mean()),
        "mean_gate_o": float(gates.o.data.mean()),
        "mean_gate_f": float(gates.f.data.mean()),
    }
