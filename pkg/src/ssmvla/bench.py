"""Sequence-length scaling evidence: exact multiply counts plus wall-clock.

The backbone's forward cost is affine in the token count L; a causal
softmax-attention layer of the same width is quadratic. Multiply counts
are symbolic (machine-independent) and cross-checked against an
instrumented forward; wall-clock sweeps corroborate the trend but are
explicitly soft evidence.

Multiply-count convention (shared by the symbolic formulas here and the
per-op counters in the tensor module):
  matmul (m,k)@(k,n)        m*k*n
  elementwise mul / scale   output size
  exp / sigmoid / softplus  1 per element
  silu                      2 per element (sigmoid + product)
  layer_norm                3 per element (square, scale, gamma)
  discretize                3 per element of the (L, E, N) output pair
  selective scan            3 per element of the (L, E, N) state
  adds, slices, reshapes    0
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .backbone import BackboneConfig, backbone_forward, init_backbone


def count_flops_backbone(cfg: BackboneConfig, L):
    """Exact multiply count of one backbone forward on L tokens.

    Affine in L with zero intercept; see the module docstring for the
    counting convention.
    """
    d, e, n, k = cfg.d_model, cfg.d_inner, cfg.state_size, cfg.n_blocks
    per_token = (
        3 * d              # layer_norm
        + d * 2 * e        # in_proj
        + e * e + e        # delta projection + softplus
        + 2 * e * n        # B and C projections
        + 3 * e * n        # discretize (2 for A_bar, 1 for B_bar)
        + 3 * e * n        # scan: input tap, recurrence, output tap
        + 3 * e            # silu(gate) + gating product
        + e * d            # out_proj
    )
    return k * per_token * L


def count_flops_attention(cfg: BackboneConfig, L):
    """Exact multiply count of one single-head causal attention forward.

    Full-matrix convention (scores and the weighted sum are computed as
    dense L x L products, matching attention_reference_forward), so the
    quadratic term is L^2 * (2D + 1) plus linear projection terms.
    """
    d = cfg.d_model
    return L * L * (2 * d + 1) + 4 * L * d * d


@dataclass
class AttentionReference:
    """Forward-only single-head causal attention at width D, random weights.

    Exists purely to embody the quadratic scaling baseline; it is never
    trained and has no backward pass.
    """

    d_model: int
    seed: int = 0
    wq: np.ndarray = field(init=False)
    wk: np.ndarray = field(init=False)
    wv: np.ndarray = field(init=False)
    wo: np.ndarray = field(init=False)

    def __post_init__(self):
        rng = np.random.default_rng(self.seed)
        d = self.d_model
        self.wq, self.wk, self.wv, self.wo = (
            rng.normal(0.0, d ** -0.5, size=(d, d)).astype(np.float32) for _ in range(4))

    def forward(self, h0):
        """(L, D) -> (L, D); softmax rows are causal and sum to one."""
        x = np.asarray(h0, dtype=np.float32)
        L, d = x.shape
        q, k, v = x @ self.wq, x @ self.wk, x @ self.wv
        scores = (q @ k.T) / np.float32(np.sqrt(d))
        scores = np.where(np.tril(np.ones((L, L), dtype=bool)), scores, -np.inf)
        scores -= scores.max(axis=1, keepdims=True)
        w = np.exp(scores)
        w /= w.sum(axis=1, keepdims=True)
        return (w @ v) @ self.wo


def attention_reference_forward(h0, d_model=None, seed=0):
    d = h0.shape[1] if d_model is None else d_model
    return AttentionReference(d, seed).forward(h0)


@dataclass
class ScalingReport:
    lengths: list
    backbone_flops: list
    backbone_time: list
    attention_flops: list
    attention_time: list
    backbone_exponent: float
    attention_exponent: float

    def rows(self):
        return list(zip(self.lengths, self.backbone_flops, self.backbone_time,
                        self.attention_flops, self.attention_time))

    def as_dict(self):
        return {
            "rows": [
                {"L": l, "backbone_flops": bf, "backbone_time_s": bt,
                 "attention_flops": af, "attention_time_s": at}
                for l, bf, bt, af, at in self.rows()
            ],
            "backbone_exponent": self.backbone_exponent,
            "attention_exponent": self.attention_exponent,
        }


def fit_exponent(lengths, times):
    """Least-squares slope of log(time) against log(L)."""
    x = np.log(np.asarray(lengths, dtype=np.float64))
    y = np.log(np.asarray(times, dtype=np.float64))
    slope = np.polyfit(x, y, 1)[0]
    return float(slope)


def run_scaling_sweep(cfg: BackboneConfig, lengths, repeats=3, seed=0):
    """Median wall-clock per forward at each L for backbone and attention.

    FLOP columns are symbolic; timing is single-threaded and taken with
    NaN checks disabled so it measures arithmetic, not bookkeeping.
    """
    if list(lengths) != sorted(lengths):
        raise ValueError("lengths must be sorted ascending")
    if repeats < 3:
        raise ValueError("repeats must be >= 3")
    rng = np.random.default_rng(seed)
    blocks = init_backbone(cfg, rng)
    attn = AttentionReference(cfg.d_model, seed)

    b_times, a_times = [], []
    for L in lengths:
        h0 = T.constant(rng.normal(0.0, 1.0, size=(L, cfg.d_model)), dtype=cfg.dtype)
        with T.no_finite_checks():
            backbone_forward(h0, blocks)  # warm-up
            samples = []
            for _ in range(repeats):
                t0 = time.perf_counter()
                backbone_forward(h0, blocks)
                samples.append(time.perf_counter() - t0)
            b_times.append(float(np.median(samples)))
        attn.forward(h0.data)
        samples = []
        for _ in range(repeats):
            t0 = time.perf_counter()
            attn.forward(h0.data)
            samples.append(time.perf_counter() - t0)
        a_times.append(float(np.median(samples)))

    return ScalingReport(
        lengths=list(lengths),
        backbone_flops=[count_flops_backbone(cfg, L) for L in lengths],
        backbone_time=b_times,
        attention_flops=[count_flops_attention(cfg, L) for L in lengths],
        attention_time=a_times,
        backbone_exponent=fit_exponent(lengths, b_times),
        attention_exponent=fit_exponent(lengths, a_times),
    )
