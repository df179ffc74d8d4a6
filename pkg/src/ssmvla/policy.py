"""End-to-end policy: embed -> backbone -> linear head on the final token.

The head reads only the last-position embedding of the last block and
maps it to an H x d_a action chunk. The model works in normalized state
and action space; `predict_chunk` de-normalizes for execution and
`act_closed_loop` runs chunked rollouts against the toy world.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import backbone as bb
from . import embedder as emb
from . import tensor as T
from . import toyenv
from .tensor import Tensor


@dataclass
class PolicyConfig:
    d_model: int = 64
    n_blocks: int = 4
    expansion: int = 2
    state_size: int = 8
    image_size: int = 64
    patch_size: int = 16
    n_lang: int = 8
    horizon: int = 8
    action_dim: int = 4
    state_dim: int = 4
    vocab_size: int = 16
    precision: str = "float32"

    @property
    def dtype(self):
        return np.float64 if self.precision == "float64" else np.float32

    def embedder_config(self):
        return emb.EmbedderConfig(
            d_model=self.d_model, state_dim=self.state_dim,
            image_size=self.image_size, patch_size=self.patch_size,
            n_lang=self.n_lang, vocab_size=self.vocab_size, dtype=self.dtype)

    def backbone_config(self):
        return bb.BackboneConfig(
            d_model=self.d_model, n_blocks=self.n_blocks,
            expansion=self.expansion, state_size=self.state_size, dtype=self.dtype)

    @property
    def seq_len(self):
        return self.embedder_config().seq_len


@dataclass
class NormStats:
    """Per-dimension z-score statistics from the training split."""
    state_mean: np.ndarray
    state_std: np.ndarray
    action_mean: np.ndarray
    action_std: np.ndarray

    @classmethod
    def identity(cls, state_dim, action_dim):
        return cls(np.zeros(state_dim, np.float32), np.ones(state_dim, np.float32),
                   np.zeros(action_dim, np.float32), np.ones(action_dim, np.float32))

    @classmethod
    def from_episodes(cls, episodes, std_floor=1e-6):
        states = np.concatenate([ep.states for ep in episodes])
        actions = np.concatenate([ep.actions for ep in episodes])
        return cls(
            states.mean(0).astype(np.float32),
            np.maximum(states.std(0), std_floor).astype(np.float32),
            actions.mean(0).astype(np.float32),
            np.maximum(actions.std(0), std_floor).astype(np.float32),
        )

    def norm_state(self, s):
        return (s - self.state_mean) / self.state_std

    def norm_actions(self, a):
        return (a - self.action_mean) / self.action_std

    def denorm_actions(self, a):
        return a * self.action_std + self.action_mean

    def as_dict(self):
        return {k: [float(v) for v in getattr(self, k)]
                for k in ("state_mean", "state_std", "action_mean", "action_std")}

    @classmethod
    def from_dict(cls, d):
        return cls(**{k: np.array(d[k], dtype=np.float32) for k in
                      ("state_mean", "state_std", "action_mean", "action_std")})


@dataclass
class PolicyParams:
    embedder: emb.EmbedderParams
    blocks: list
    head_w: Tensor  # (D, H * d_a)
    head_b: Tensor  # (H * d_a,)
    cfg: PolicyConfig = field(repr=False, default=None)
    norm: NormStats = None

    def named(self):
        out = list(self.embedder.named("embedder"))
        for i, blk in enumerate(self.blocks):
            out.extend(blk.named(f"backbone.block{i}"))
        out.append(("head.w", self.head_w))
        out.append(("head.b", self.head_b))
        return out

    def tensors(self):
        return [t for _, t in self.named()]


def init_policy(cfg: PolicyConfig, rng: np.random.Generator, norm=None) -> PolicyParams:
    d, out_dim = cfg.d_model, cfg.horizon * cfg.action_dim
    return PolicyParams(
        embedder=emb.init_embedder(cfg.embedder_config(), rng),
        blocks=bb.init_backbone(cfg.backbone_config(), rng),
        head_w=T.parameter(rng.normal(0.0, d ** -0.5, size=(d, out_dim)), dtype=cfg.dtype),
        head_b=T.parameter(np.zeros(out_dim), dtype=cfg.dtype),
        cfg=cfg,
        norm=norm or NormStats.identity(cfg.state_dim, cfg.action_dim),
    )


def count_params(params: PolicyParams):
    return sum(t.data.size for t in params.tensors())


def _normalized(obs, norm):
    return emb.Observation(
        state=norm.norm_state(obs.state), state_prev=norm.norm_state(obs.state_prev),
        image=obs.image, instruction=obs.instruction)


def encode(obs_batch, params: PolicyParams, vocab):
    """Batch of raw Observations -> final block output (B, L, D)."""
    normed = [_normalized(o, params.norm) for o in obs_batch]
    tokens, _ = emb.assemble_sequence(normed, params.embedder, vocab)
    return bb.backbone_forward(tokens, params.blocks)


def head_from_tokens(h_k, params: PolicyParams):
    """Action chunk from the final-position embedding only: (B, L, D) -> (B, H, d_a)."""
    cfg = params.cfg
    b, l, d = h_k.data.shape
    last = T.reshape(T.narrow(h_k, -2, l - 1, 1), (b, d))
    flat = T.add(T.matmul(last, params.head_w), params.head_b)
    return T.reshape(flat, (b, cfg.horizon, cfg.action_dim))


def policy_forward(obs_batch, params: PolicyParams, vocab):
    """Normalized-space action chunks for a batch, (B, H, d_a)."""
    return head_from_tokens(encode(obs_batch, params, vocab), params)


def predict_chunk(obs, params: PolicyParams, vocab):
    """Single raw Observation -> de-normalized (H, d_a) chunk, no grad."""
    out = policy_forward([obs], params, vocab)
    return params.norm.denorm_actions(out.data[0].astype(np.float64))


@dataclass
class Rollout:
    success: bool
    steps: int
    actions: list
    chunk_times: list  # seconds per predicted chunk

    def __len__(self):
        return self.steps


def observe(scene, params: PolicyParams, prev_state=None):
    s = scene.state().astype(np.float32)
    return emb.Observation(
        state=s,
        state_prev=s if prev_state is None else prev_state,
        image=toyenv.observation_image(scene, params.cfg.image_size),
        instruction=toyenv.make_instruction(scene),
    )


def act_closed_loop(scene, params: PolicyParams, vocab, max_steps, execute_steps=None):
    """Chunked rollout: observe, predict a chunk, execute it open-loop,
    repeat until success or the step budget runs out.

    By default the full H-step chunk is executed before replanning;
    execute_steps < H gives receding-horizon execution.
    """
    h = params.cfg.horizon
    exec_h = h if execute_steps is None else min(execute_steps, h)
    actions, chunk_times = [], []
    steps = 0
    prev_state = None  # state one env step before the current observation
    while steps < max_steps:
        obs = observe(scene, params, prev_state)
        t0 = time.perf_counter()
        chunk = predict_chunk(obs, params, vocab)
        chunk_times.append(time.perf_counter() - t0)
        for a in chunk[:exec_h]:
            prev_state = scene.state().astype(np.float32)
            toyenv.step(scene, a)
            actions.append(a)
            steps += 1
            if toyenv.check_success(scene) or steps >= max_steps:
                break
        if toyenv.check_success(scene):
            break
    return Rollout(success=toyenv.check_success(scene), steps=steps,
                   actions=actions, chunk_times=chunk_times)
