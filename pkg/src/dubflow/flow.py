"""Conditional flow matching: velocity network, losses, training and checkpoints."""

from __future__ import annotations

import hashlib
import json
import logging
import math
import struct
import time
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import numerics as nx
from ._io import atomic_write_bytes, atomic_write_text
from .conditioning import ConditionBundle, ConditionEncoder, apply_dropout, collate_contexts, positional_encoding
from .corpus import FEATURE_DIM, DubbingClip
from .errors import (
    CheckpointVersionMismatch,
    EmptyBatch,
    IoFailure,
    NonFinite,
    ParseError,
    ShapeMismatch,
)
from .numerics import Linear, MLP, Module, Tensor

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"VDXC0001"
CHECKPOINT_VERSION = 1


# ---------------------------------------------------------------- probability path


def ot_path_sample(x0: np.ndarray, x1: np.ndarray, tau) -> tuple[np.ndarray, np.ndarray]:
    """Point and target velocity on the straight path from noise ``x0`` to data ``x1``.

    ``tau`` is a scalar or an array broadcastable against ``x0``.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    x1 = np.asarray(x1, dtype=np.float64)
    if x0.shape != x1.shape:
        raise ShapeMismatch(f"x0 {x0.shape} vs x1 {x1.shape}")
    tau = np.asarray(tau, dtype=np.float64)
    if np.any(tau < 0.0) or np.any(tau > 1.0):
        raise ValueError("tau must lie in [0, 1]")
    return (1.0 - tau) * x0 + tau * x1, x1 - x0


# ---------------------------------------------------------------- networks


def timestep_embedding(tau: np.ndarray, d: int) -> np.ndarray:
    tau = np.asarray(tau, dtype=np.float64).reshape(-1, 1)
    freqs = np.exp(-math.log(10000.0) * np.arange(d // 2) / (d // 2))
    arg = 1000.0 * tau * freqs
    return np.concatenate([np.sin(arg), np.cos(arg)], axis=1)


def attention_bias(mask: np.ndarray | None) -> np.ndarray | None:
    """Additive ``(B, 1, 1, S)`` bias that removes invalid keys from the softmax."""
    if mask is None:
        return None
    return np.where(np.asarray(mask) > 0, 0.0, nx.MASK_VALUE)[:, None, None, :]


class Attention(Module):
    def __init__(self, d: int, heads: int, rng: np.random.Generator):
        if d % heads:
            raise ValueError("width must be divisible by the head count")
        self.heads = heads
        self.q = Linear(d, d, rng)
        self.k = Linear(d, d, rng)
        self.v = Linear(d, d, rng)
        self.o = Linear(d, d, rng)

    def _split(self, t: Tensor) -> Tensor:
        B, n, d = t.shape
        return nx.transpose(nx.reshape(t, (B, n, self.heads, d // self.heads)), (0, 2, 1, 3))

    def __call__(self, x: Tensor, ctx: Tensor, bias: np.ndarray | None) -> Tensor:
        B, T, d = x.shape
        dh = d // self.heads
        q = self._split(nx.mul(self.q(x), 1.0 / math.sqrt(dh)))
        k = nx.transpose(self._split(self.k(ctx)), (0, 1, 3, 2))
        v = self._split(self.v(ctx))
        out = nx.matmul(nx.softmax(nx.matmul(q, k), bias=bias), v)
        out = nx.reshape(nx.transpose(out, (0, 2, 1, 3)), (B, T, d))
        return self.o(out)


def _modulate(h: Tensor, shift: Tensor, scale: Tensor) -> Tensor:
    return nx.add(nx.mul(h, nx.add(scale, 1.0)), shift)


class DiTBlock(Module):
    """Self-attention, cross-attention over conditions, and an MLP.

    Each sublayer's pre-norm is shifted and scaled from the time embedding.
    """

    def __init__(self, d: int, heads: int, rng: np.random.Generator):
        self.d = d
        self.self_attn = Attention(d, heads, rng)
        self.cross_attn = Attention(d, heads, rng)
        self.mlp = MLP(d, 4 * d, d, rng)
        self.ada = Linear(d, 6 * d, rng, scale=0.1)

    def __call__(self, x: Tensor, temb: Tensor, ctx: Tensor, self_bias, ctx_bias) -> Tensor:
        d = self.d
        mod = self.ada(temb)  # (B, 1, 6d)
        chunk = [nx.getitem(mod, (slice(None), slice(None), slice(i * d, (i + 1) * d)))
                 for i in range(6)]
        h = _modulate(nx.layer_norm(x), chunk[0], chunk[1])
        x = nx.add(x, self.self_attn(h, h, self_bias))
        h = _modulate(nx.layer_norm(x), chunk[2], chunk[3])
        x = nx.add(x, self.cross_attn(h, ctx, ctx_bias))
        h = _modulate(nx.layer_norm(x), chunk[4], chunk[5])
        return nx.add(x, self.mlp(h))


class VectorFieldNet(Module):
    """Transformer velocity field ``v(x_tau, tau | conditions)``."""

    def __init__(self, rng: np.random.Generator, d: int = 64, heads: int = 4, n_blocks: int = 2,
                 feature_dim: int = FEATURE_DIM):
        self.d = d
        self.feature_dim = feature_dim
        self.in_proj = Linear(feature_dim, d, rng)
        self.time_mlp = MLP(d, d, d, rng)
        self.blocks = [DiTBlock(d, heads, rng) for _ in range(n_blocks)]
        self.final_ada = Linear(d, 2 * d, rng, scale=0.1)
        self.out_proj = Linear(d, feature_dim, rng, scale=0.5)

    def __call__(
        self,
        x: Tensor,
        tau: np.ndarray,
        context: Tensor,
        frame_mask: np.ndarray | None = None,
        context_mask: np.ndarray | None = None,
    ) -> Tensor:
        x = nx.as_tensor(x)
        if x.ndim != 3 or x.shape[-1] != self.feature_dim:
            raise ShapeMismatch(f"expected (B, T, {self.feature_dim}) input, got {x.shape}")
        B, T, _ = x.shape
        if frame_mask is None:
            frame_mask = np.ones((B, T))
        lengths = frame_mask.sum(axis=1).astype(int)
        pe = np.zeros((B, T, self.d))
        for i, n in enumerate(lengths):
            pe[i, :n] = positional_encoding(int(n), self.d)
        temb = self.time_mlp(timestep_embedding(tau, self.d).reshape(B, 1, self.d))
        h = nx.add(nx.add(self.in_proj(x), pe), temb)
        ctx = nx.layer_norm(context)
        self_bias = attention_bias(frame_mask)
        ctx_bias = attention_bias(context_mask)
        for block in self.blocks:
            h = block(h, temb, ctx, self_bias, ctx_bias)
        mod = self.final_ada(temb)
        shift = nx.getitem(mod, (slice(None), slice(None), slice(0, self.d)))
        scale = nx.getitem(mod, (slice(None), slice(None), slice(self.d, 2 * self.d)))
        return self.out_proj(_modulate(nx.layer_norm(h), shift, scale))


class DurationNet(Module):
    """Log-duration from mean-pooled visual embedding and the conclusion rows."""

    def __init__(self, rng: np.random.Generator, d: int = 64, hidden: int = 64,
                 init_log_duration: float = math.log(100.0)):
        self.d = d
        self.mlp = MLP(5 * d, hidden, 1, rng)
        self.mlp.fc2.bias.data[:] = init_log_duration

    def features(self, bundle: ConditionBundle) -> Tensor:
        visual = nx.mean(bundle.visual, axis=0, keepdims=True)
        rows = bundle.conclusion
        if rows.shape[0] == 1:  # null stream: repeat the single row
            rows = nx.concat([rows] * 4, axis=0)
        return nx.concat([visual, nx.reshape(rows, (1, 4 * self.d))], axis=1)

    def __call__(self, bundles: Sequence[ConditionBundle]) -> Tensor:
        """Predicted log-durations, shape ``(B,)``."""
        feats = nx.concat([self.features(b) for b in bundles], axis=0)
        return nx.reshape(self.mlp(feats), (len(bundles),))


@dataclass
class ModelConfig:
    d_model: int = 64
    heads: int = 4
    n_blocks: int = 2
    feature_dim: int = FEATURE_DIM
    duration_hidden: int = 64


class DubbingModel(Module):
    """Condition encoder, velocity field and duration predictor, initialised from one seed."""

    def __init__(self, config: ModelConfig | None = None, seed: int = 0):
        self.config = config or ModelConfig()
        c = self.config
        rng = np.random.default_rng([seed, 17])
        self.encoder = ConditionEncoder(c.d_model, rng)
        self.net = VectorFieldNet(rng, c.d_model, c.heads, c.n_blocks, c.feature_dim)
        self.durnet = DurationNet(rng, c.d_model, c.duration_hidden)
        for name, p in self.named_parameters():
            p.name = name


# ---------------------------------------------------------------- losses


VelocityField = Callable[..., Tensor]


@dataclass
class PathBatch:
    """One sampled flow-matching minibatch (all arrays padded to the longest clip)."""

    x0: np.ndarray
    x1: np.ndarray
    tau: np.ndarray
    x_tau: np.ndarray
    u: np.ndarray
    mask: np.ndarray
    dropped: list[tuple[bool, bool, bool]]


def sample_path_batch(
    clips: Sequence[DubbingClip], rng: np.random.Generator, p_dropout: float,
    p_uncond: float = 0.05,
) -> PathBatch:
    """Draw, per clip and in this order: tau, the noise x0, three per-stream
    dropout uniforms and one joint uniform.

    Each stream is nulled independently with probability ``p_dropout``; the
    joint uniform nulls all three at once with probability ``p_uncond`` so the
    unconditional field used by guidance gets trained.
    """
    if not clips:
        raise EmptyBatch("batch has no clips")
    D = clips[0].target_features.shape[1]
    Tmax = max(c.duration_frames for c in clips)
    B = len(clips)
    x0 = np.zeros((B, Tmax, D))
    x1 = np.zeros((B, Tmax, D))
    mask = np.zeros((B, Tmax))
    tau = np.zeros(B)
    dropped = []
    for i, clip in enumerate(clips):
        T = clip.duration_frames
        tau[i] = rng.random()
        x0[i, :T] = rng.standard_normal((T, D))
        x1[i, :T] = clip.target_features
        mask[i, :T] = 1.0
        draws = rng.random(3)
        joint = rng.random()
        flags = tuple(bool(u < p_dropout) for u in draws)
        dropped.append((True, True, True) if joint < p_uncond else flags)
    x_tau, u = ot_path_sample(x0, x1, tau[:, None, None])
    return PathBatch(x0=x0, x1=x1, tau=tau, x_tau=x_tau, u=u, mask=mask, dropped=dropped)


def _drop(bundle: ConditionBundle, flags: tuple[bool, bool, bool]) -> ConditionBundle:
    return bundle.with_pattern(tuple(not f for f in flags))


def cfm_loss(
    net: VelocityField,
    bundles: Sequence[ConditionBundle],
    batch: PathBatch,
) -> Tensor:
    """Masked flow-matching regression of the network onto ``x1 - x0``.

    Squared error is summed over feature channels and averaged over valid
    frames of the batch.
    """
    if not bundles:
        raise EmptyBatch("batch has no clips")
    dropped = [_drop(b, f) for b, f in zip(bundles, batch.dropped)]
    context, context_mask = collate_contexts(dropped)
    v = net(Tensor(batch.x_tau), batch.tau, context, batch.mask, context_mask)
    return nx.mse(v, batch.u, batch.mask)


def duration_loss(log_pred: Tensor, durations) -> Tensor:
    """Mean over clips of ``(log_pred - log(duration))**2``."""
    durations = np.asarray(durations, dtype=np.float64).reshape(-1)
    if np.any(~(durations >= 1.0)):
        raise ValueError("durations must be >= 1 frame")
    target = np.log(durations)
    pred = nx.reshape(log_pred, (-1, 1))
    return nx.mse(pred, target.reshape(-1, 1))


@dataclass
class LossParts:
    total: Tensor
    cfm: Tensor
    dur: Tensor


def total_loss(
    model: DubbingModel,
    clips: Sequence[DubbingClip],
    rng: np.random.Generator,
    p_dropout: float = 0.05,
    w_dur: float = 1.0,
    force_null: bool = False,
    net: VelocityField | None = None,
    p_uncond: float = 0.05,
) -> LossParts:
    """Flow-matching loss plus ``w_dur`` times the duration loss.

    The duration predictor always sees the undropped conditions. With
    ``force_null`` every stream is replaced by its null embedding.
    """
    if not clips:
        raise EmptyBatch("batch has no clips")
    batch = sample_path_batch(clips, rng, p_dropout, p_uncond)
    if force_null:
        bundles = [model.encoder.null_bundle() for _ in clips]
    else:
        bundles = [model.encoder.bundle_clip(c) for c in clips]
    cfm = cfm_loss(net or model.net, bundles, batch)
    if w_dur == 0.0:
        dur = Tensor(0.0)
        return LossParts(total=cfm, cfm=cfm, dur=dur)
    dur = duration_loss(model.durnet(bundles), [c.duration_frames for c in clips])
    return LossParts(total=nx.add(cfm, nx.mul(dur, w_dur)), cfm=cfm, dur=dur)


# ---------------------------------------------------------------- training


@dataclass
class TrainConfig:
    batch_size: int = 8
    steps: int = 2000
    lr: float = 1e-3
    p_dropout: float = 0.05
    p_uncond: float = 0.05
    seed: int = 0
    w_dur: float = 1.0
    warmup_steps: int = 100
    force_null: bool = False
    # pretrain-then-tune schedule is not implemented; must stay False
    staged: bool = False
    d_model: int = 64
    heads: int = 4
    n_blocks: int = 2

    def validate(self) -> None:
        if self.batch_size < 1 or self.steps < 1 or self.lr <= 0:
            raise ValueError("batch_size, steps and lr must be positive")
        if not 0.0 <= self.p_dropout <= 1.0 or not 0.0 <= self.p_uncond <= 1.0:
            raise ValueError("p_dropout and p_uncond must lie in [0, 1]")
        if self.w_dur < 0:
            raise ValueError("w_dur must be non-negative")
        if self.staged:
            raise NotImplementedError("staged pretrain/tune schedule is not available")

    def model_config(self, feature_dim: int = FEATURE_DIM) -> ModelConfig:
        return ModelConfig(d_model=self.d_model, heads=self.heads, n_blocks=self.n_blocks,
                           feature_dim=feature_dim)


@dataclass
class Checkpoint:
    model: DubbingModel
    config: dict
    final_loss: dict
    rng_state: dict


def _lr_at(config: TrainConfig, step: int) -> float:
    if config.warmup_steps and step < config.warmup_steps:
        return config.lr * (step + 1) / config.warmup_steps
    progress = (step - config.warmup_steps) / max(config.steps - config.warmup_steps, 1)
    return config.lr * (0.1 + 0.9 * 0.5 * (1.0 + math.cos(math.pi * min(progress, 1.0))))


def train(
    config: TrainConfig,
    clips: Sequence[DubbingClip],
    log_path: str | Path | None = None,
    on_step: Callable[[int, dict], None] | None = None,
) -> Checkpoint:
    """Train on ``clips`` (the caller selects the split) and return a checkpoint."""
    config.validate()
    clips = list(clips)
    if not clips:
        raise EmptyBatch("training split is empty")
    feature_dim = clips[0].target_features.shape[1]
    model = DubbingModel(config.model_config(feature_dim), seed=config.seed)
    params = model.parameters()
    opt = nx.Adam(params, lr=config.lr)
    rng = np.random.default_rng([config.seed, 1])
    order = rng.permutation(len(clips))
    cursor = 0
    lines: list[str] = []
    record: dict = {}

    for step in range(config.steps):
        t0 = time.perf_counter()
        idx = []
        while len(idx) < config.batch_size:
            if cursor == len(order):
                order = rng.permutation(len(clips))
                cursor = 0
            idx.append(int(order[cursor]))
            cursor += 1
        batch = [clips[i] for i in idx]
        parts = total_loss(model, batch, rng, config.p_dropout, config.w_dur, config.force_null,
                           p_uncond=config.p_uncond)
        total = parts.total.item()
        if not math.isfinite(total):
            raise NonFinite(f"loss diverged at step {step}", step=step)
        opt.zero_grad()
        nx.backward(parts.total)
        opt.state.lr = _lr_at(config, step)
        opt.step()
        record = {
            "step": step,
            "cfm_loss": parts.cfm.item(),
            "dur_loss": parts.dur.item(),
            "wall_ms": round(1000.0 * (time.perf_counter() - t0), 3),
        }
        lines.append(json.dumps(record))
        if on_step is not None:
            on_step(step, record)
        if step % 100 == 0:
            log.info("step %d cfm %.4f dur %.4f", step, record["cfm_loss"], record["dur_loss"])

    if log_path is not None:
        atomic_write_text(log_path, "\n".join(lines) + "\n")
    return Checkpoint(
        model=model,
        config=asdict(config),
        final_loss={"cfm_loss": record["cfm_loss"], "dur_loss": record["dur_loss"]},
        rng_state=rng.bit_generator.state,
    )


# ---------------------------------------------------------------- checkpoint io


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    table = []
    blobs = []
    offset = 0
    for name, p in ckpt.model.named_parameters():
        raw = np.ascontiguousarray(p.data, dtype="<f8").tobytes()
        table.append({"name": name, "shape": list(p.shape), "offset": offset})
        blobs.append(raw)
        offset += len(raw)
    header = {
        "config": ckpt.config,
        "model_config": asdict(ckpt.model.config),
        "final_loss": ckpt.final_loss,
        "rng_state": ckpt.rng_state,
        "parameters": table,
    }
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    return CHECKPOINT_MAGIC + struct.pack("<II", CHECKPOINT_VERSION, len(hbytes)) + hbytes + b"".join(blobs)


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> str:
    """Write atomically; returns the sha256 of the file contents."""
    data = encode_checkpoint(ckpt)
    atomic_write_bytes(path, data)
    return hashlib.sha256(data).hexdigest()


def read_checkpoint_header(path: str | Path) -> tuple[int, dict]:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise IoFailure(f"cannot read checkpoint {path}: {exc}") from exc
    return _parse_header(data, str(path))[:2]


def _parse_header(data: bytes, source: str) -> tuple[int, dict, int]:
    if data[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise ParseError(f"{source}: not a VDXC0001 checkpoint")
    start = len(CHECKPOINT_MAGIC) + 8
    if len(data) < start:
        raise ParseError(f"{source}: truncated checkpoint header")
    version, hlen = struct.unpack_from("<II", data, len(CHECKPOINT_MAGIC))
    if len(data) < start + hlen:
        raise ParseError(f"{source}: truncated checkpoint header")
    try:
        header = json.loads(data[start : start + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ParseError(f"{source}: corrupt checkpoint header: {exc}") from exc
    return version, header, start + hlen


def load_checkpoint(path: str | Path) -> Checkpoint:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise IoFailure(f"cannot read checkpoint {path}: {exc}") from exc
    version, header, body = _parse_header(data, str(path))
    if version != CHECKPOINT_VERSION:
        raise CheckpointVersionMismatch(f"checkpoint version {version}, expected {CHECKPOINT_VERSION}")
    mc = header["model_config"]
    model = DubbingModel(ModelConfig(**{f.name: mc[f.name] for f in fields(ModelConfig)}), seed=0)
    params = dict(model.named_parameters())
    for entry in header["parameters"]:
        p = params.get(entry["name"])
        if p is None or list(p.shape) != entry["shape"]:
            raise ParseError(f"{path}: parameter {entry['name']} does not match the model")
        n = int(np.prod(entry["shape"]))
        start = body + entry["offset"]
        if len(data) < start + 8 * n:
            raise ParseError(f"{path}: parameter {entry['name']} is truncated")
        p.data[...] = np.frombuffer(data[start : start + 8 * n], dtype="<f8").reshape(entry["shape"])
    return Checkpoint(model=model, config=header["config"], final_loss=header["final_loss"],
                      rng_state=header["rng_state"])
