"""Two-stage behavior cloning.

Stage 1 minimizes an L1 loss on the predicted action (velocity) chunk;
stage 2 adds a weighted L1 loss on the chunk's temporal differences
(acceleration). AdamW with decoupled weight decay, per-stage early
stopping with patience, and global best-checkpoint selection by
validation velocity loss. Checkpoints are a human-readable JSON manifest
plus a little-endian float32 blob that round-trips byte-exactly.
"""

from __future__ import annotations

import hashlib
import json
import time
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from . import embedder as emb
from .policy import NormStats, PolicyConfig, PolicyParams, init_policy, policy_forward
from .tensor import DimensionError, Tape, Tensor, backward

ADAM_EPS = 1e-8
CHECKPOINT_FORMAT = "ssmvla-checkpoint-v1"


class TrainingAborted(RuntimeError):
    """Training hit a non-finite loss or another unrecoverable state."""


@dataclass
class TrainConfig:
    batch_size: int = 8
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 1e-2
    stage1_steps: int = 5000
    stage2_steps: int = 5000
    lambda_acc: float = 1.0
    validate_every: int = 250
    patience: int = 10
    seed: int = 0
    val_subset: int = 256


@dataclass
class Dataset:
    train: list
    val: list
    vocab: emb.Vocabulary


def _as_batched(t):
    return T.reshape(t, (1,) + t.data.shape) if t.data.ndim == 2 else t


def loss_vel(y, y_hat, mask=None):
    """Mean over the horizon of per-step L1 norms, averaged over the batch.

    `mask` (B, H) marks valid steps; the per-sample mean then runs over
    valid steps only, matching the loss on the truncated chunk.
    """
    if y.data.shape != y_hat.data.shape:
        raise DimensionError(f"chunk shapes differ: {y.shape} vs {y_hat.shape}")
    y, y_hat = _as_batched(y), _as_batched(y_hat)
    b, h, _ = y.data.shape
    per_step = T.sum_last(T.abs_(T.sub(y, y_hat)))  # (B, H)
    if mask is None:
        weights = np.full((b, h), 1.0 / h, dtype=y.data.dtype)
    else:
        mask = np.asarray(mask, dtype=y.data.dtype).reshape(b, h)
        valid = np.maximum(mask.sum(axis=1, keepdims=True), 1.0)
        weights = mask / valid
    total = T.sum_all(T.mul(per_step, T.constant(weights, y.data.dtype)))
    return T.scale(total, 1.0 / b)


def loss_acc(y, y_hat, mask=None):
    """L1 on temporal differences of the chunk, tau = 2..H.

    Requires H >= 2. Invariant to adding one constant vector to every
    step of y_hat (the difference operator annihilates constants).
    """
    if y.data.shape != y_hat.data.shape:
        raise DimensionError(f"chunk shapes differ: {y.shape} vs {y_hat.shape}")
    y, y_hat = _as_batched(y), _as_batched(y_hat)
    b, h, _ = y.data.shape
    if h < 2:
        raise DimensionError("acceleration loss undefined for horizon < 2")
    dy = T.sub(T.narrow(y, -2, 1, h - 1), T.narrow(y, -2, 0, h - 1))
    dy_hat = T.sub(T.narrow(y_hat, -2, 1, h - 1), T.narrow(y_hat, -2, 0, h - 1))
    per_step = T.sum_last(T.abs_(T.sub(dy, dy_hat)))  # (B, H-1)
    if mask is None:
        weights = np.full((b, h - 1), 1.0 / (h - 1), dtype=y.data.dtype)
    else:
        mask = np.asarray(mask, dtype=y.data.dtype).reshape(b, h)
        pair = mask[:, 1:] * mask[:, :-1]
        valid = np.maximum(pair.sum(axis=1, keepdims=True), 1.0)
        weights = pair / valid
    total = T.sum_all(T.mul(per_step, T.constant(weights, y.data.dtype)))
    return T.scale(total, 1.0 / b)


def total_loss(stage, y, y_hat, lambda_acc, mask=None):
    """Stage 1: velocity only. Stage 2: velocity + lambda * acceleration."""
    if stage not in (1, 2):
        raise ValueError(f"stage must be 1 or 2, got {stage}")
    vel = loss_vel(y, y_hat, mask)
    if stage == 1:
        return vel
    return T.add(vel, T.scale(loss_acc(y, y_hat, mask), lambda_acc))


@dataclass
class TrainState:
    step: int = 0
    stage: int = 1
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    best_val: float = float("inf")
    since_improvement: int = 0
    rng: np.random.Generator = None

    @classmethod
    def for_params(cls, params: PolicyParams, rng=None):
        state = cls(rng=rng)
        for name, p in params.named():
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        return state


def adamw_step(params: PolicyParams, grads, state: TrainState, cfg: TrainConfig):
    """Standard decoupled-weight-decay update with bias correction, in place."""
    state.step += 1
    t = state.step
    c1 = 1.0 - cfg.beta1 ** t
    c2 = 1.0 - cfg.beta2 ** t
    for name, p in params.named():
        g = grads[p].data
        if g.shape != p.data.shape:
            raise DimensionError(f"gradient shape {g.shape} != param shape {p.data.shape} ({name})")
        m, v = state.m[name], state.v[name]
        m *= cfg.beta1
        m += (1.0 - cfg.beta1) * g
        v *= cfg.beta2
        v += (1.0 - cfg.beta2) * (g * g)
        update = (m / c1) / (np.sqrt(v / c2) + ADAM_EPS)
        p.data -= cfg.lr * (update + cfg.weight_decay * p.data)
    return state


def episode_observation(ep, t):
    s = ep.states[t]
    return emb.Observation(
        state=s,
        state_prev=ep.states[t - 1] if t > 0 else s,
        image=ep.images[t].transpose(2, 0, 1).astype(np.float32) / 255.0,
        instruction=ep.instruction,
    )


def chunk_at(ep, t, horizon):
    """Reference chunk actions[t : t+H], zero-padded past the episode end,
    with a validity mask excluding the padded steps."""
    avail = ep.actions[t: t + horizon]
    chunk = np.zeros((horizon, ep.actions.shape[1]), dtype=np.float32)
    chunk[: len(avail)] = avail
    mask = np.zeros(horizon, dtype=np.float32)
    mask[: len(avail)] = 1.0
    return chunk, mask


def sample_batch(episodes, batch_size, horizon, rng):
    """Uniform (episode, timestep) samples -> (observations, chunks, masks)."""
    obs, chunks, masks = [], [], []
    for _ in range(batch_size):
        ep = episodes[int(rng.integers(len(episodes)))]
        t = int(rng.integers(len(ep)))
        chunk, mask = chunk_at(ep, t, horizon)
        obs.append(episode_observation(ep, t))
        chunks.append(chunk)
        masks.append(mask)
    return obs, np.stack(chunks), np.stack(masks)


def _val_pairs(val_episodes, subset, rng):
    pairs = [(i, t) for i, ep in enumerate(val_episodes) for t in range(len(ep))]
    if subset and subset < len(pairs):
        idx = rng.choice(len(pairs), size=subset, replace=False)
        pairs = [pairs[i] for i in sorted(idx)]
    return pairs


def evaluate_losses(params, vocab, episodes, pairs, batch_size=64):
    """Masked validation L_vel and L_acc over fixed (episode, t) pairs."""
    h = params.cfg.horizon
    vel_sum, acc_sum, n = 0.0, 0.0, 0
    for start in range(0, len(pairs), batch_size):
        block = pairs[start: start + batch_size]
        obs = [episode_observation(episodes[i], t) for i, t in block]
        raw = [chunk_at(episodes[i], t, h) for i, t in block]
        chunks = params.norm.norm_actions(np.stack([c for c, _ in raw]))
        masks = np.stack([m for _, m in raw])
        pred = policy_forward(obs, params, vocab)
        y = T.constant(chunks.astype(params.cfg.dtype), params.cfg.dtype)
        vel_sum += float(loss_vel(y, pred, masks).data) * len(block)
        acc_sum += float(loss_acc(y, pred, masks).data) * len(block)
        n += len(block)
    return vel_sum / n, acc_sum / n


@dataclass
class TrainResult:
    params: PolicyParams
    step: int
    stage: int
    val_loss: float
    log: list
    initial_val_vel: float
    wall_seconds: float


def train(dataset: Dataset, model_cfg: PolicyConfig, cfg: TrainConfig,
          progress=None) -> TrainResult:
    """Run stage 1 then stage 2 with per-stage early stopping.

    Validates every `validate_every` steps on a fixed subset of the
    validation split; the returned parameters are the global minimum-
    validation-L_vel snapshot. Normalization statistics come from the
    training split only.
    """
    if not dataset.train or not dataset.val:
        raise ValueError("train() needs non-empty train and validation splits")
    t_start = time.perf_counter()
    norm = NormStats.from_episodes(dataset.train)
    init_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0]))
    batch_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 1]))
    subset_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 2]))

    params = init_policy(model_cfg, init_rng, norm=norm)
    state = TrainState.for_params(params, rng=batch_rng)
    pairs = _val_pairs(dataset.val, cfg.val_subset, subset_rng)

    log = []
    best = {"val": float("inf"), "step": 0, "stage": 1,
            "snapshot": [p.data.copy() for p in params.tensors()]}

    def validate(stage, train_loss):
        vel, acc = evaluate_losses(params, dataset.vocab, dataset.val, pairs)
        log.append({"step": state.step, "stage": stage, "train_loss": train_loss,
                    "val_vel": vel, "val_acc": acc})
        if progress:
            progress(log[-1])
        if vel < best["val"]:
            best.update(val=vel, step=state.step, stage=stage,
                        snapshot=[p.data.copy() for p in params.tensors()])
        return vel

    initial_val = validate(1, float("nan"))

    for stage, budget in ((1, cfg.stage1_steps), (2, cfg.stage2_steps)):
        state.stage = stage
        stage_best = float("inf")
        state.since_improvement = 0
        for _ in range(budget):
            obs, chunks, masks = sample_batch(
                dataset.train, cfg.batch_size, model_cfg.horizon, state.rng)
            y = T.constant(norm.norm_actions(chunks).astype(model_cfg.dtype), model_cfg.dtype)
            try:
                with Tape() as tape:
                    pred = policy_forward(obs, params, dataset.vocab)
                    loss = total_loss(stage, y, pred, cfg.lambda_acc, masks)
                grads = backward(tape, loss, params=params.tensors())
            except T.NonFiniteError as e:
                raise TrainingAborted(
                    f"non-finite loss at step {state.step + 1} (stage {stage})") from e
            adamw_step(params, grads, state, cfg)

            if state.step % cfg.validate_every == 0:
                vel = validate(stage, float(loss.data))
                if vel < stage_best:
                    stage_best = vel
                    state.since_improvement = 0
                else:
                    state.since_improvement += 1
                    if state.since_improvement >= cfg.patience:
                        break

    for p, snap in zip(params.tensors(), best["snapshot"]):
        p.data = snap
    return TrainResult(
        params=params, step=best["step"], stage=best["stage"], val_loss=best["val"],
        log=log, initial_val_vel=initial_val,
        wall_seconds=time.perf_counter() - t_start)


def config_hash(config_echo):
    blob = json.dumps(config_echo, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def save_checkpoint(params: PolicyParams, meta, prefix):
    """Write <prefix>.json (manifest) and <prefix>.bin (little-endian f32 blob)."""
    registry, offset, parts = [], 0, []
    for name, p in params.named():
        raw = np.ascontiguousarray(p.data.astype("<f4"))
        nbytes = raw.nbytes
        registry.append({"name": name, "shape": list(p.data.shape),
                         "offset": offset, "nbytes": nbytes})
        parts.append(raw.tobytes())
        offset += nbytes
    manifest = {
        "format": CHECKPOINT_FORMAT,
        "tool_version": _tool_version(),
        "config": meta.get("config", {}),
        "config_hash": config_hash(meta.get("config", {})),
        "step": int(meta.get("step", 0)),
        "stage": int(meta.get("stage", 1)),
        "val_loss": float(meta.get("val_loss", float("nan"))),
        "normalization": params.norm.as_dict(),
        "registry": registry,
        "blob_nbytes": offset,
    }
    with open(f"{prefix}.json", "w") as f:
        json.dump(manifest, f, indent=1, sort_keys=True)
        f.write("\n")
    with open(f"{prefix}.bin", "wb") as f:
        f.write(b"".join(parts))
    return manifest


def load_checkpoint(prefix):
    """Rebuild (params, manifest) from a manifest/blob pair; rejects
    manifests whose registry does not tile the blob exactly."""
    with open(f"{prefix}.json") as f:
        manifest = json.load(f)
    if manifest.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"unrecognized checkpoint format in {prefix}.json")
    with open(f"{prefix}.bin", "rb") as f:
        blob = f.read()
    if len(blob) != manifest["blob_nbytes"]:
        raise ValueError(f"blob is {len(blob)} bytes, manifest says {manifest['blob_nbytes']}")
    expected = 0
    for entry in manifest["registry"]:
        if entry["offset"] != expected:
            raise ValueError(f"registry offsets not contiguous at {entry['name']}")
        expected += entry["nbytes"]
    if expected != len(blob):
        raise ValueError("registry does not cover the blob exactly")

    model_cfg = PolicyConfig(**manifest["config"]["model"])
    params = init_policy(model_cfg, np.random.default_rng(0),
                         norm=NormStats.from_dict(manifest["normalization"]))
    named = params.named()
    if [n for n, _ in named] != [e["name"] for e in manifest["registry"]]:
        raise ValueError("checkpoint registry does not match this model configuration")
    for (name, p), entry in zip(named, manifest["registry"]):
        raw = np.frombuffer(
            blob, dtype="<f4", count=entry["nbytes"] // 4, offset=entry["offset"])
        if list(p.data.shape) != entry["shape"]:
            raise ValueError(f"shape mismatch for {name}")
        p.data = raw.reshape(entry["shape"]).astype(model_cfg.dtype)
    return params, manifest


def _tool_version():
    from . import __version__
    return __version__
