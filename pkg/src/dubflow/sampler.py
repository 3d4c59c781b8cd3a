"""Guided ODE sampling from a trained velocity field."""

from __future__ import annotations

import json
import logging
import math
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import numerics as nx
from ._io import atomic_write_text
from .conditioning import ConditionBundle, collate_contexts
from .corpus import ConditionSet, DubbingClip, write_payload
from .errors import NonFinite, ShapeMismatch
from .flow import Checkpoint, DubbingModel, VelocityField
from .numerics import Tensor

log = logging.getLogger(__name__)

MIN_FRAMES = 4
MAX_FRAMES = 4096

# stream keep-flags (visual, conclusion, script), in batch order
GUIDANCE_PATTERNS = (
    (False, False, False),
    (True, True, True),
    (False, True, True),
    (False, False, True),
)


@dataclass
class SampleConfig:
    lambda_v: float = 2.0
    lambda_c: float = 2.0
    lambda_t: float = 2.0
    steps: int = 32
    seed: int = 0
    scheme: str = "euler"

    @property
    def scales(self) -> tuple[float, float, float]:
        return (self.lambda_v, self.lambda_c, self.lambda_t)

    def validate(self) -> None:
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        for name, lam in zip(("lambda_v", "lambda_c", "lambda_t"), self.scales):
            if not math.isfinite(lam) or lam < 0:
                raise ValueError(f"{name} must be a finite non-negative number, got {lam}")
        if self.scheme not in ("euler", "midpoint"):
            raise ValueError(f"unknown integration scheme {self.scheme!r}")


def pattern_velocities(
    net: VelocityField, x: np.ndarray, tau: float, bundle: ConditionBundle
) -> np.ndarray:
    """Velocities under the four guidance patterns, one batched call: ``(4, T, D)``."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise ShapeMismatch(f"expected a (T, D) state, got {x.shape}")
    bundles = [bundle.with_pattern(p) for p in GUIDANCE_PATTERNS]
    with nx.no_grad():
        context, context_mask = collate_contexts(bundles)
        xb = np.broadcast_to(x, (4,) + x.shape).copy()
        out = net(Tensor(xb), np.full(4, float(tau)), context, np.ones(xb.shape[:2]), context_mask)
    v = out.data if isinstance(out, Tensor) else np.asarray(out)
    if v.shape != xb.shape:
        raise ShapeMismatch(f"velocity field returned {v.shape}, expected {xb.shape}")
    return v


def combine_guidance(v: np.ndarray, scales: Sequence[float]) -> np.ndarray:
    """Nested guidance from the four pattern velocities (uncond, full, -visual, script only)."""
    uncond, full, no_visual, script_only = v
    lam_v, lam_c, lam_t = scales
    return (
        uncond
        + lam_v * (full - no_visual)
        + lam_c * (no_visual - script_only)
        + lam_t * (script_only - uncond)
    )


def guided_velocity(
    net: VelocityField, x: np.ndarray, tau: float, bundle: ConditionBundle, scales: Sequence[float]
) -> np.ndarray:
    if any(bundle.is_null):
        raise ValueError("guided_velocity needs a fully populated bundle")
    return combine_guidance(pattern_velocities(net, x, tau, bundle), scales)


def integrate(
    net: VelocityField,
    bundle: ConditionBundle,
    n_frames: int,
    config: SampleConfig,
    feature_dim: int | None = None,
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    """Integrate the guided field from tau=0 (standard normal noise) to tau=1."""
    config.validate()
    if n_frames < 1:
        raise ValueError("n_frames must be >= 1")
    D = feature_dim if feature_dim is not None else getattr(net, "feature_dim")
    rng = rng if rng is not None else np.random.default_rng(config.seed)
    x = rng.standard_normal((n_frames, D))
    n = config.steps
    h = 1.0 / n
    scales = config.scales
    for k in range(n):
        tau = k / n
        # overflow is reported below as NonFinite rather than as numpy warnings
        with np.errstate(over="ignore", invalid="ignore"):
            v = guided_velocity(net, x, tau, bundle, scales)
            if config.scheme == "midpoint":
                v = guided_velocity(net, x + 0.5 * h * v, tau + 0.5 * h, bundle, scales)
            x = x + h * v
        if not np.all(np.isfinite(x)):
            raise NonFinite(f"sample diverged at step {k}", step=k)
    return x


def clip_seed(seed: int, clip_id: str) -> list[int]:
    return [int(seed), zlib.crc32(clip_id.encode("utf-8"))]


@dataclass
class GeneratedClip:
    id: str
    features: np.ndarray
    log_duration: float
    n_frames: int
    clamped: bool


def predict_frames(model: DubbingModel, bundle: ConditionBundle) -> tuple[float, int, bool]:
    with nx.no_grad():
        log_dur = float(model.durnet([bundle]).data[0])
    raw = math.exp(min(log_dur, 700.0))
    frames = int(round(raw))
    clamped = not MIN_FRAMES <= frames <= MAX_FRAMES
    if clamped:
        log.warning("predicted duration %.3g frames clamped to [%d, %d]", raw, MIN_FRAMES, MAX_FRAMES)
    return log_dur, min(max(frames, MIN_FRAMES), MAX_FRAMES), clamped


def generate(
    model: DubbingModel | Checkpoint,
    conditions: ConditionSet,
    script_tokens: Sequence[int],
    visual_track: np.ndarray,
    config: SampleConfig,
    clip_id: str = "clip",
    n_frames: int | None = None,
) -> GeneratedClip:
    """Predict a duration, then sample a feature sequence of that length.

    Noise is drawn from an rng seeded by ``(config.seed, crc32(clip_id))``.
    ``n_frames`` overrides the predicted length.
    """
    if isinstance(model, Checkpoint):
        model = model.model
    if len(script_tokens) == 0:
        raise ValueError("script must be nonempty")
    config.validate()
    bundle = model.encoder.bundle(visual_track, conditions, script_tokens)
    log_dur, frames, clamped = predict_frames(model, bundle)
    if n_frames is not None:
        frames = int(n_frames)
    rng = np.random.default_rng(clip_seed(config.seed, clip_id))
    with nx.no_grad():
        feats = integrate(model.net, bundle, frames, config, rng=rng)
    return GeneratedClip(id=clip_id, features=feats, log_duration=log_dur, n_frames=frames,
                         clamped=clamped)


def generate_clip(model: DubbingModel | Checkpoint, clip: DubbingClip, config: SampleConfig,
                  sample_id: str | None = None) -> GeneratedClip:
    out = generate(model, clip.conditions, clip.script_tokens, clip.visual_track, config,
                   clip_id=sample_id or clip.id)
    out.id = clip.id
    return out


def write_generated(out_dir: str | Path, gen: GeneratedClip, config: SampleConfig) -> None:
    """Persist one sample as a payload plus a JSON sidecar."""
    out_dir = Path(out_dir)
    write_payload(out_dir / f"{gen.id}.features.bin", gen.features)
    sidecar = {
        "id": gen.id,
        "lambda": [config.lambda_v, config.lambda_c, config.lambda_t],
        "steps": config.steps,
        "seed": config.seed,
        "scheme": config.scheme,
        "predicted_frames": gen.n_frames,
        "log_duration": gen.log_duration,
        "clamped": gen.clamped,
    }
    atomic_write_text(out_dir / f"{gen.id}.json", json.dumps(sidecar, sort_keys=True) + "\n")
