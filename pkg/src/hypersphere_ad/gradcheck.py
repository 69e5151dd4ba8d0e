"""Central finite-difference verification of every backward rule.

``check_gradients`` compares tape gradients against central differences
for an arbitrary scalar-valued graph builder.  ``run_suites`` executes a
named battery per primitive (arithmetic, layers, the gated cell, loss
terms) over randomly composed graphs and reports the worst relative
error per primitive; the test suite and the ``gradcheck`` CLI
subcommand both drive it.  Everything runs in float64.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from . import layers as ly
from . import losses
from .autodiff import Rng, Tape
from .layers import BatchNormState
from .lstm import LstmCellParams, LstmState, full_sequence_step, lstm_step

DEFAULT_STEP = 1e-5
ERROR_FLOOR = 1e-8


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """max |a-n| / max(|a|, |n|, floor) over all elements."""
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), ERROR_FLOOR)
    err = np.abs(analytic - numeric) / denom
    return float(err.max()) if err.size else 0.0


def check_gradients(build, arrays, h: float = DEFAULT_STEP) -> float:
    """Worst relative error between tape and finite-difference gradients.

    ``build(tape, leaves)`` must construct a scalar loss from leaf
    tensors created from ``arrays`` (list of float64 ndarrays).
    """
    arrays = [np.asarray(a, dtype=np.float64) for a in arrays]

    def evaluate(arrs):
        tape = Tape()
        leaves = [tape.leaf(a) for a in arrs]
        return tape, leaves, build(tape, leaves)

    tape, leaves, loss = evaluate(arrays)
    tape.backward(loss)
    analytic = [tape.grad(leaf) for leaf in leaves]

    worst = 0.0
    for ai, base in enumerate(arrays):
        numeric = np.zeros_like(base)
        flat = base.reshape(-1)
        num_flat = numeric.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + h
            _, _, lp = evaluate(arrays)
            flat[j] = orig - h
            _, _, lm = evaluate(arrays)
            flat[j] = orig
            num_flat[j] = (float(lp.data) - float(lm.data)) / (2 * h)
        worst = max(worst, relative_error(analytic[ai], numeric))
    return worst


def _wrap(tape, y, mix):
    """Reduce an arbitrary tensor to a scalar through a fixed random mix,
    so finite differences see every output element."""
    return ad.reduce_sum(ad.mul(y, mix.astype(y.data.dtype)))


# ---------------------------------------------------------------------------
# per-primitive case builders; each returns (build_fn, arrays)

def _case_elementwise(op_name, rng):
    shape = tuple(rng.integers(1, 5, size=int(rng.integers(1, 4))))
    x = rng.normal(size=shape, dtype=np.float64)
    if op_name == "log":
        x = np.abs(x) + 0.5
    if op_name == "leaky_relu":
        x = x + np.where(np.abs(x) < 0.1, 0.2 * np.sign(x + 0.05), 0.0)  # avoid kink
    mix = rng.normal(size=shape, dtype=np.float64)
    slope = 0.01 if op_name == "leaky_relu" else None

    ops = {
        "sigmoid": ad.sigmoid,
        "tanh": ad.tanh,
        "exp": ad.exp,
        "log": ad.log,
        "square": ad.square,
        "neg": ad.neg,
        "leaky_relu": lambda t: ad.leaky_relu(t, slope),
    }

    def build(tape, leaves):
        return _wrap(tape, ops[op_name](leaves[0]), mix)

    return build, [x]


def _case_binary(op_name, rng):
    broadcast = rng.integers(0, 3)
    if broadcast == 0:
        sa = sb = tuple(rng.integers(1, 5, size=2))
    elif broadcast == 1:  # leading-axis
        sb = tuple(rng.integers(1, 5, size=1))
        sa = (int(rng.integers(2, 5)),) + sb
    else:  # scalar
        sa = tuple(rng.integers(1, 5, size=2))
        sb = ()
    a = rng.normal(size=sa, dtype=np.float64)
    b = rng.normal(size=sb, dtype=np.float64)
    mix = rng.normal(size=np.broadcast_shapes(sa, sb), dtype=np.float64)
    op = {"add": ad.add, "sub": ad.sub, "mul": ad.mul}[op_name]

    def build(tape, leaves):
        return _wrap(tape, op(leaves[0], leaves[1]), mix)

    return build, [a, b]


def _case_matmul(rng):
    m, k, n = (int(v) for v in rng.integers(1, 5, size=3))
    a = rng.normal(size=(m, k), dtype=np.float64)
    b = rng.normal(size=(k, n), dtype=np.float64)
    mix = rng.normal(size=(m, n), dtype=np.float64)

    def build(tape, leaves):
        return _wrap(tape, ad.matmul(leaves[0], leaves[1]), mix)

    return build, [a, b]


def _case_transpose(rng):
    a = rng.normal(size=(int(rng.integers(1, 5)), int(rng.integers(1, 5))), dtype=np.float64)
    mix = rng.normal(size=a.T.shape, dtype=np.float64)

    def build(tape, leaves):
        return _wrap(tape, ad.transpose(leaves[0]), mix)

    return build, [a]


def _well_separated(rng, shape):
    """Distinct values with gaps far above the finite-difference step,
    so perturbing by h never changes an argmax."""
    n = int(np.prod(shape))
    return (rng.permutation(n).astype(np.float64) * 0.3
            + rng.normal(size=n, dtype=np.float64) * 0.01).reshape(shape)


def _case_reduce(op_name, rng):
    shape = tuple(rng.integers(2, 5, size=3))
    x = rng.normal(size=shape, dtype=np.float64)
    if op_name == "max":
        x = _well_separated(rng, shape)
    axis_pick = int(rng.integers(0, 4))
    axes = None if axis_pick == 3 else axis_pick
    op = {"sum": ad.reduce_sum, "mean": ad.reduce_mean, "max": ad.reduce_max}[op_name]
    out_shape = () if axes is None else tuple(s for i, s in enumerate(shape) if i != axes)
    mix = rng.normal(size=out_shape, dtype=np.float64)

    def build(tape, leaves):
        return _wrap(tape, op(leaves[0], axes), mix)

    return build, [x]


def _case_reshape(rng):
    x = rng.normal(size=(2, 3, 4), dtype=np.float64)
    mix = rng.normal(size=(6, 4), dtype=np.float64)

    def build(tape, leaves):
        return _wrap(tape, ad.reshape(leaves[0], (6, 4)), mix)

    return build, [x]


def _case_concat(rng):
    n = int(rng.integers(2, 4))
    da, db = int(rng.integers(1, 4)), int(rng.integers(1, 4))
    a = rng.normal(size=(n, da), dtype=np.float64)
    b = rng.normal(size=(n, db), dtype=np.float64)
    mix = rng.normal(size=(n, da + db), dtype=np.float64)

    def build(tape, leaves):
        return _wrap(tape, ad.concat(leaves, axis=1), mix)

    return build, [a, b]


def _case_conv2d(rng):
    n, ci, co = 1, int(rng.integers(1, 3)), int(rng.integers(1, 3))
    k = int(rng.integers(2, 4))
    stride = int(rng.integers(1, 3))
    padding = int(rng.integers(0, k))
    h = k + stride * int(rng.integers(1, 3))
    x = rng.normal(size=(n, ci, h, h), dtype=np.float64)
    w = rng.normal(size=(co, ci, k, k), dtype=np.float64)
    b = rng.normal(size=(co,), dtype=np.float64)
    y, _ = ly.conv2d_raw(x, w, stride, padding)
    mix = rng.normal(size=y.shape, dtype=np.float64)

    def build(tape, leaves):
        out = ly.conv2d(leaves[0], leaves[1], leaves[2], stride=stride, padding=padding)
        return _wrap(tape, out, mix)

    return build, [x, w, b]


def _case_deconv2d(rng):
    n, ci, co = 1, int(rng.integers(1, 3)), int(rng.integers(1, 3))
    k = int(rng.integers(2, 4))
    stride = int(rng.integers(1, 3))
    padding = int(rng.integers(0, (k + 1) // 2))
    op_pad = int(rng.integers(0, stride))
    h = int(rng.integers(2, 5))
    oh = (h - 1) * stride - 2 * padding + k + op_pad
    if oh < 1:
        padding = 0
        oh = (h - 1) * stride + k + op_pad
    x = rng.normal(size=(n, ci, h, h), dtype=np.float64)
    w = rng.normal(size=(ci, co, k, k), dtype=np.float64)
    b = rng.normal(size=(co,), dtype=np.float64)
    mix = rng.normal(size=(n, co, oh, oh), dtype=np.float64)

    def build(tape, leaves):
        out = ly.deconv2d(
            leaves[0], leaves[1], leaves[2],
            stride=stride, padding=padding, output_padding=op_pad,
        )
        return _wrap(tape, out, mix)

    return build, [x, w, b]


def _case_maxpool(rng):
    x = _well_separated(rng, (1, int(rng.integers(1, 3)), 4, 4))
    mix = rng.normal(size=(1, x.shape[1], 2, 2), dtype=np.float64)

    def build(tape, leaves):
        return _wrap(tape, ly.maxpool2d(leaves[0], 2, 2), mix)

    return build, [x]


def _case_batchnorm(mode, rng):
    n, c, h = 3, int(rng.integers(1, 3)), 3
    x = rng.normal(size=(n, c, h, h), dtype=np.float64)
    gamma = rng.normal(1.0, 0.2, size=(c,), dtype=np.float64)
    beta = rng.normal(size=(c,), dtype=np.float64)
    state = BatchNormState.create(c, dtype=np.float64)
    if mode == "eval":
        state.running_mean = rng.normal(size=(c,), dtype=np.float64)
        state.running_var = np.abs(rng.normal(1.0, 0.3, size=(c,), dtype=np.float64)) + 0.1
    mix = rng.normal(size=x.shape, dtype=np.float64)

    def build(tape, leaves):
        st = BatchNormState(
            gamma=state.gamma, beta=state.beta,
            running_mean=state.running_mean.copy(),
            running_var=state.running_var.copy(),
            momentum=state.momentum, eps=state.eps,
        )
        out = ly.batchnorm(leaves[0], leaves[1], leaves[2], st, mode=mode)
        return _wrap(tape, out, mix)

    return build, [x, gamma, beta]


def _case_linear(rng):
    n, din, dout = int(rng.integers(1, 4)), int(rng.integers(1, 4)), int(rng.integers(1, 4))
    x = rng.normal(size=(n, din), dtype=np.float64)
    w = rng.normal(size=(dout, din), dtype=np.float64)
    b = rng.normal(size=(dout,), dtype=np.float64)
    mix = rng.normal(size=(n, dout), dtype=np.float64)

    def build(tape, leaves):
        return _wrap(tape, ly.linear(leaves[0], leaves[1], leaves[2]), mix)

    return build, [x, w, b]


def _lstm_params_from(arrays, d_out):
    names = ("w_input", "w_output", "w_forget", "w_candidate",
             "b_input", "b_output", "b_forget", "b_candidate")
    return dict(zip(names, arrays))


def _case_lstm(variant, rng):
    d_in = int(rng.integers(1, 4))
    d_out = int(rng.integers(1, 4))
    n = int(rng.integers(1, 3))
    fan = d_out + d_in
    ws = [rng.normal(0, 0.6, size=(d_out, fan), dtype=np.float64) for _ in range(4)]
    bs = [rng.normal(0, 0.3, size=(d_out,), dtype=np.float64) for _ in range(4)]
    z = rng.normal(size=(n, d_in), dtype=np.float64)
    mix = rng.normal(size=(n, d_out), dtype=np.float64)
    c0 = rng.normal(size=(d_out,), dtype=np.float64)

    def build(tape, leaves):
        zt = leaves[0]
        leaf_map = _lstm_params_from(leaves[1:], d_out)
        params = LstmCellParams(*[a.data for a in leaves[1:]])
        if variant == "degenerate":
            out, _ = lstm_step(zt, params, leaves=leaf_map)
        else:
            state = LstmState(h0=np.zeros(d_out), c0=c0)
            out, _ = full_sequence_step(zt, params, state, leaves=leaf_map)
        return _wrap(tape, out, mix)

    return build, [z] + ws + bs


def _case_loss(term, rng):
    n, d = int(rng.integers(2, 5)), int(rng.integers(1, 4))
    z = rng.normal(size=(n, d), dtype=np.float64)
    center = rng.normal(size=(d,), dtype=np.float64)
    hs = losses.HypersphereState(center=center, radius=0.7, nu=0.4)

    if term == "rec":
        x = rng.normal(size=(n, 2, 3), dtype=np.float64)
        xh = rng.normal(size=(n, 2, 3), dtype=np.float64)

        def build(tape, leaves):
            return losses.rec_loss(leaves[0], leaves[1])

        return build, [x, xh]
    if term == "svdd_soft":
        # keep hinge inputs away from the kink at dist^2 == R^2
        d2 = ((z - center) ** 2).sum(axis=1)
        z = z[np.abs(d2 - hs.radius**2) > 0.05]
        if z.shape[0] < 1:
            z = center[None, :] + 1.0

        def build(tape, leaves):
            return losses.svdd_soft(leaves[0], hs)

        return build, [z]
    if term == "svdd_hard":

        def build(tape, leaves):
            return losses.svdd_hard(leaves[0], hs)

        return build, [z]
    if term in ("kl_batch_moments", "kl_per_sample"):
        mode = "batch_moments" if term == "kl_batch_moments" else "per_sample"

        def build(tape, leaves):
            return losses.kl_loss(leaves[0], mode=mode)

        return build, [z]
    if term == "weight_decay":
        ws = [rng.normal(size=(2, 3), dtype=np.float64),
              rng.normal(size=(2, 1, 2, 2), dtype=np.float64)]

        def build(tape, leaves):
            return losses.weight_decay(leaves)

        return build, ws
    raise ValueError(term)


SUITES: dict = {}
for _name in ("sigmoid", "tanh", "exp", "log", "square", "neg", "leaky_relu"):
    SUITES[_name] = (lambda nm: lambda rng: _case_elementwise(nm, rng))(_name)
for _name in ("add", "sub", "mul"):
    SUITES[_name] = (lambda nm: lambda rng: _case_binary(nm, rng))(_name)
SUITES["matmul"] = _case_matmul
SUITES["transpose"] = _case_transpose
for _name in ("sum", "mean", "max"):
    SUITES[f"reduce_{_name}"] = (lambda nm: lambda rng: _case_reduce(nm, rng))(_name)
SUITES["reshape"] = _case_reshape
SUITES["concat"] = _case_concat
SUITES["conv2d"] = _case_conv2d
SUITES["deconv2d"] = _case_deconv2d
SUITES["maxpool2d"] = _case_maxpool
SUITES["batchnorm_train"] = lambda rng: _case_batchnorm("train", rng)
SUITES["batchnorm_eval"] = lambda rng: _case_batchnorm("eval", rng)
SUITES["linear"] = _case_linear
SUITES["lstm_cell"] = lambda rng: _case_lstm("degenerate", rng)
SUITES["lstm_cell_full"] = lambda rng: _case_lstm("full", rng)
for _name in ("rec", "svdd_soft", "svdd_hard", "kl_batch_moments",
              "kl_per_sample", "weight_decay"):
    SUITES[f"loss_{_name}"] = (lambda nm: lambda rng: _case_loss(nm, rng))(_name)


def run_suites(names=None, cases: int = 20, seed: int = 0) -> dict[str, float]:
    """Worst finite-difference relative error per primitive over
    ``cases`` random graphs each."""
    if names is None:
        names = list(SUITES)
    unknown = [n for n in names if n not in SUITES]
    if unknown:
        raise KeyError(f"unknown gradcheck suites: {unknown}")
    results = {}
    for name in names:
        rng = Rng(seed).child(name)
        worst = 0.0
        for i in range(cases):
            build, arrays = SUITES[name](rng.child(i))
            worst = max(worst, check_gradients(build, arrays))
        results[name] = worst
    return results
