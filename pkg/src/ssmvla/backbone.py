"""Stacked selective state-space blocks.

Each block: pre-norm -> in-projection split into a value path u and a
gate path g -> per-token step size / input / output parameters from u ->
discretized linear recurrence over the sequence -> gate with silu(g) ->
out-projection -> residual. The recurrence and its discretization are
fused tape ops with hand-written reverse scans; everything else is
composed from the tensor primitives.

Shapes: sequences are (L, width) or batched (B, L, width); the scan
state per channel is a length-N vector, so discretized parameters are
(..., L, E, N) with E the inner width.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import DimensionError, Tensor


@dataclass
class BackboneConfig:
    d_model: int = 64
    n_blocks: int = 4
    expansion: int = 2
    state_size: int = 8
    dtype: type = np.float32

    def __post_init__(self):
        if min(self.d_model, self.n_blocks, self.expansion, self.state_size) < 1:
            raise ValueError("all backbone dimensions must be >= 1")

    @property
    def d_inner(self):
        return self.expansion * self.d_model


@dataclass
class SsmBlockParams:
    """One block's parameters. A is stored in log space: A = -exp(A_log),
    so the continuous-time decay is strictly negative and the discretized
    transition exp(delta * A) stays in (0, 1)."""

    in_proj: Tensor      # (D, 2E): value path u, then gate path g
    A_log: Tensor        # (E, N)
    delta_proj: Tensor   # (E, E)
    delta_bias: Tensor   # (E,)
    b_proj: Tensor       # (E, N)
    c_proj: Tensor       # (E, N)
    out_proj: Tensor     # (E, D)
    out_bias: Tensor     # (D,)
    norm_gamma: Tensor   # (D,)
    norm_beta: Tensor    # (D,)

    def named(self, prefix):
        return [(f"{prefix}.{f}", getattr(self, f)) for f in (
            "in_proj", "A_log", "delta_proj", "delta_bias", "b_proj",
            "c_proj", "out_proj", "out_bias", "norm_gamma", "norm_beta")]


def init_block(cfg: BackboneConfig, rng: np.random.Generator) -> SsmBlockParams:
    d, e, n = cfg.d_model, cfg.d_inner, cfg.state_size
    dt = cfg.dtype

    def lin(fan_in, *shape):
        return T.parameter(rng.normal(0.0, fan_in ** -0.5, size=shape), dtype=dt)

    # Decay rates spread over decades: A_log rows are log-spaced on [1, N].
    a_row = np.log(np.exp(np.linspace(np.log(1.0), np.log(max(n, 1)), n))) if n > 1 else np.zeros(1)
    a_log = np.tile(a_row, (e, 1))

    # delta_bias chosen so softplus(bias) lands in [1e-3, 1e-1].
    dt_init = np.exp(rng.uniform(np.log(1e-3), np.log(1e-1), size=e))
    delta_bias = np.log(np.expm1(dt_init))

    return SsmBlockParams(
        in_proj=lin(d, d, 2 * e),
        A_log=T.parameter(a_log, dtype=dt),
        delta_proj=lin(e, e, e),
        delta_bias=T.parameter(delta_bias, dtype=dt),
        b_proj=lin(e, e, n),
        c_proj=lin(e, e, n),
        out_proj=lin(e, e, d),
        out_bias=T.parameter(np.zeros(d), dtype=dt),
        norm_gamma=T.parameter(np.ones(d), dtype=dt),
        norm_beta=T.parameter(np.zeros(d), dtype=dt),
    )


def init_backbone(cfg: BackboneConfig, rng: np.random.Generator):
    return [init_block(cfg, rng) for _ in range(cfg.n_blocks)]


def discretize(delta, A_log, B_seq):
    """Per-token discretization of the recurrence parameters.

    A_bar = exp(delta * A) with A = -exp(A_log) (zero-order hold);
    B_bar = delta * B (Euler rule for the input matrix).

    delta (..., L, E) must be positive; A_log (E, N); B_seq (..., L, N).
    Returns (A_bar, B_bar), each (..., L, E, N).
    """
    if delta.data.min() <= 0.0:
        raise DimensionError("discretize: delta must be positive")
    e, n = A_log.data.shape
    if delta.data.shape[-1] != e or B_seq.data.shape[-1] != n:
        raise DimensionError("discretize: shape mismatch between delta, A_log, B_seq")
    return _discretize_a(delta, A_log), _discretize_b(delta, B_seq)


def _discretize_a(delta, A_log):
    a = -np.exp(A_log.data)  # (E, N)
    a_bar = np.exp(delta.data[..., None] * a)
    T._count(2 * a_bar.size)
    out = Tensor(T._finite(a_bar))
    dd = delta.data

    def pull(g):
        ga = g * a_bar  # chain through exp
        d_delta = np.einsum("...len,en->...le", ga, a)
        # dA/dA_log = A itself (A = -exp(A_log))
        lead = tuple(range(ga.ndim - 2))
        d_a_log = (ga * dd[..., None]).sum(axis=lead) * a
        return d_delta, d_a_log

    return T._record(out, (delta, A_log), pull)


def _discretize_b(delta, B_seq):
    b_bar = delta.data[..., None] * B_seq.data[..., None, :]
    T._count(b_bar.size)
    out = Tensor(T._finite(b_bar))
    dd, bd = delta.data, B_seq.data

    def pull(g):
        d_delta = np.einsum("...len,...ln->...le", g, bd)
        d_b = np.einsum("...len,...le->...ln", g, dd)
        return d_delta, d_b

    return T._record(out, (delta, B_seq), pull)


def selective_scan(u, A_bar, B_bar, C_seq):
    """Linear recurrence with per-token parameters.

    For each channel d and position i (state z starts at zero):
        z_i = A_bar_i * z_{i-1} + B_bar_i * u_i
        y_i[d] = sum_n C_i[n] * z_i[d, n]

    u (..., L, E); A_bar, B_bar (..., L, E, N); C_seq (..., L, N).
    The backward pass runs the recurrence in reverse over saved states.
    """
    L = u.data.shape[-2]
    if A_bar.data.shape[-3] != L or B_bar.data.shape[-3] != L or C_seq.data.shape[-2] != L:
        raise DimensionError("selective_scan: sequence lengths disagree")
    if A_bar.data.shape != B_bar.data.shape:
        raise DimensionError("selective_scan: A_bar and B_bar shapes differ")

    ud, ad, bd, cd = u.data, A_bar.data, B_bar.data, C_seq.data
    bu = bd * ud[..., None]  # (..., L, E, N)
    z_all = np.empty_like(bu)
    z_all[..., 0, :, :] = bu[..., 0, :, :]
    for i in range(1, L):
        np.multiply(ad[..., i, :, :], z_all[..., i - 1, :, :], out=z_all[..., i, :, :])
        z_all[..., i, :, :] += bu[..., i, :, :]
    y = np.einsum("...ln,...len->...le", cd, z_all)
    T._count(3 * bu.size)
    out = Tensor(T._finite(y))

    def pull(g):
        # Output taps: dC_i = sum_d g_i[d] z_i[d,:]; dz_i += g_i[d] C_i[n].
        d_c = np.einsum("...le,...len->...ln", g, z_all)
        d_bu = np.einsum("...le,...ln->...len", g, cd)
        # Reverse recurrence folded into d_bu: on exit d_bu[i] holds the
        # full dL/dz_i (which equals dL/dbu_i), via
        # gz_i = dz_out_i + A_bar_{i+1} * gz_{i+1}.
        carry = np.empty(d_bu.shape[:-3] + d_bu.shape[-2:], dtype=d_bu.dtype)
        prev = d_bu[..., L - 1, :, :]
        for i in range(L - 2, -1, -1):
            np.multiply(prev, ad[..., i + 1, :, :], out=carry)
            d_bu[..., i, :, :] += carry
            prev = d_bu[..., i, :, :]
        # dL/dA_bar_i = gz_i * z_{i-1}; z_{-1} = 0.
        d_a = np.empty_like(ad)
        d_a[..., 0, :, :] = 0.0
        np.multiply(d_bu[..., 1:, :, :], z_all[..., :-1, :, :], out=d_a[..., 1:, :, :])
        d_b = d_bu * ud[..., None]
        d_u = np.einsum("...len,...len->...le", d_bu, bd)
        return d_u, d_a, d_b, d_c

    return T._record(out, (u, A_bar, B_bar, C_seq), pull)


def scan_naive_oracle(u, A_bar, B_bar, C_seq):
    """Position-by-position transliteration of the recurrence, float64 only.

    Test oracle: explicit python loops over positions, channels and state
    entries, no vectorized recurrence. Accepts plain arrays.
    """
    u = np.asarray(u, dtype=np.float64)
    A_bar = np.asarray(A_bar, dtype=np.float64)
    B_bar = np.asarray(B_bar, dtype=np.float64)
    C_seq = np.asarray(C_seq, dtype=np.float64)
    L, E = u.shape
    N = C_seq.shape[1]
    z = [[0.0] * N for _ in range(E)]
    y = np.zeros((L, E))
    for i in range(L):
        for d in range(E):
            acc = 0.0
            for n in range(N):
                z[d][n] = A_bar[i, d, n] * z[d][n] + B_bar[i, d, n] * u[i, d]
                acc += C_seq[i, n] * z[d][n]
            y[i, d] = acc
    return y


def mamba_block_forward(h_prev, params: SsmBlockParams):
    """One block: pre-norm, gated selective recurrence, residual.

    h_prev is (L, D) or (B, L, D); output has the same shape.
    """
    shape = h_prev.data.shape
    d = shape[-1]
    e = params.delta_proj.data.shape[0]
    if params.in_proj.data.shape[0] != d:
        raise DimensionError(f"block width {params.in_proj.data.shape[0]} != input width {d}")

    x = T.layer_norm(h_prev, params.norm_gamma, params.norm_beta)
    flat = T.reshape(x, (-1, d))
    ug = T.matmul(flat, params.in_proj)              # (BL, 2E)
    u_flat = T.narrow(ug, -1, 0, e)
    g_flat = T.narrow(ug, -1, e, e)

    delta_flat = T.softplus(T.add(T.matmul(u_flat, params.delta_proj), params.delta_bias))
    b_flat = T.matmul(u_flat, params.b_proj)         # (BL, N)
    c_flat = T.matmul(u_flat, params.c_proj)

    seq = shape[:-1]
    n = params.A_log.data.shape[1]
    u = T.reshape(u_flat, seq + (e,))
    delta = T.reshape(delta_flat, seq + (e,))
    b_seq = T.reshape(b_flat, seq + (n,))
    c_seq = T.reshape(c_flat, seq + (n,))

    a_bar, b_bar = discretize(delta, params.A_log, b_seq)
    y = selective_scan(u, a_bar, b_bar, c_seq)

    gated = T.mul(T.reshape(y, (-1, e)), T.silu(g_flat))
    out = T.add(T.matmul(gated, params.out_proj), params.out_bias)
    return T.add(h_prev, T.reshape(out, shape))


def backbone_forward(h0, blocks):
    """Sequential composition of the blocks; returns H_K."""
    if len(blocks) < 1:
        raise DimensionError("backbone needs at least one block")
    h = h0
    for params in blocks:
        h = mamba_block_forward(h, params)
    return h
