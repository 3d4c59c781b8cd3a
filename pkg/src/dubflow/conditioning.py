"""Condition encoders and classifier-free-guidance dropout.

Three streams condition the velocity network: the visual track, the scene
understanding conclusion (four attribute embeddings) and the script. A dropped
or absent stream is replaced by its own learned one-row null embedding.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import numerics as nx
from .corpus import (
    VISUAL_DIM,
    VOCAB_SIZE,
    Age,
    ConditionSet,
    DubbingClip,
    Emotion,
    Gender,
    SceneType,
)
from .errors import OutOfVocab, ShapeMismatch
from .numerics import Module, Tensor

STREAMS = ("visual", "conclusion", "script")
_ATTRIBUTE_ENUMS = (SceneType, Gender, Age, Emotion)
_ATTRIBUTE_OFFSETS = np.cumsum([0] + [len(e) for e in _ATTRIBUTE_ENUMS])[:-1]
N_ATTRIBUTE_ROWS = sum(len(e) for e in _ATTRIBUTE_ENUMS)


def positional_encoding(n: int, d: int) -> np.ndarray:
    """Sinusoidal position code of shape ``(n, d)``.

    The first half encodes the absolute index, the second half the fractional
    position ``(i + 0.5) / n`` within the sequence. The fractional half lets
    streams of different rates (script tokens, 25 fps video, 100 fps features)
    line up by relative position.
    """
    if d % 4:
        raise ValueError("model width must be a multiple of 4")
    half = d // 2
    pos = np.arange(n, dtype=np.float64)[:, None]
    freqs = 10000.0 ** (-np.arange(half // 2) * 2.0 / half)
    absolute = np.concatenate([np.sin(pos * freqs), np.cos(pos * freqs)], axis=1)
    frac = (pos + 0.5) / max(n, 1)
    k = np.arange(1, half // 2 + 1)
    relative = np.concatenate([np.sin(np.pi * k * frac), np.cos(np.pi * k * frac)], axis=1)
    return np.concatenate([absolute, relative], axis=1)


@dataclass(frozen=True)
class ConditionBundle:
    """Encoded condition streams for one clip.

    ``nulls`` holds the learned null embedding of each stream so dropout can be
    applied without access to the encoder.
    """

    visual: Tensor
    conclusion: Tensor
    script: Tensor
    nulls: tuple[Tensor, Tensor, Tensor]
    is_null: tuple[bool, bool, bool] = (False, False, False)

    def stream(self, name: str) -> Tensor:
        return getattr(self, name)

    def with_null(self, *names: str) -> "ConditionBundle":
        changes = {}
        flags = list(self.is_null)
        for name in names:
            i = STREAMS.index(name)
            changes[name] = self.nulls[i]
            flags[i] = True
        return replace(self, is_null=tuple(flags), **changes)

    def with_pattern(self, keep: tuple[bool, bool, bool]) -> "ConditionBundle":
        """Null every stream whose ``keep`` flag is False."""
        return self.with_null(*(s for s, k in zip(STREAMS, keep) if not k))

    def context(self) -> Tensor:
        """All stream rows concatenated, for cross-attention."""
        return nx.concat([self.visual, self.conclusion, self.script], axis=0)


def apply_dropout(bundle: ConditionBundle, p: float, rng: np.random.Generator) -> ConditionBundle:
    """Null each stream independently with probability ``p``.

    Always draws exactly three uniforms, in the order visual, conclusion,
    script, so the rng stream does not depend on the outcome.
    """
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"dropout probability must lie in [0, 1], got {p}")
    draws = rng.random(3)
    dropped = [name for name, u in zip(STREAMS, draws) if u < p]
    return bundle.with_null(*dropped) if dropped else bundle


def collate_contexts(bundles: list[ConditionBundle]) -> tuple[Tensor, np.ndarray]:
    """Pad per-clip contexts into ``(B, S, d)`` plus a ``(B, S)`` validity mask."""
    ctxs = [b.context() for b in bundles]
    S = max(c.shape[0] for c in ctxs)
    mask = np.zeros((len(ctxs), S))
    for i, c in enumerate(ctxs):
        mask[i, : c.shape[0]] = 1.0
    return nx.stack([nx.pad_rows(c, S) for c in ctxs], axis=0), mask


class ConditionEncoder(Module):
    def __init__(self, d: int, rng: np.random.Generator, visual_dim: int = VISUAL_DIM,
                 vocab_size: int = VOCAB_SIZE):
        self.d = d
        self.visual_dim = visual_dim
        self.vocab_size = vocab_size
        self.visual_proj = nx.Linear(visual_dim, d, rng)
        self.attribute_table = nx.parameter(rng.normal(0.0, 1.0, (N_ATTRIBUTE_ROWS, d)))
        self.token_table = nx.parameter(rng.normal(0.0, 1.0, (vocab_size, d)))
        self.null_visual = nx.parameter(rng.normal(0.0, 1.0, (1, d)))
        self.null_conclusion = nx.parameter(rng.normal(0.0, 1.0, (1, d)))
        self.null_script = nx.parameter(rng.normal(0.0, 1.0, (1, d)))

    @property
    def nulls(self) -> tuple[Tensor, Tensor, Tensor]:
        return (self.null_visual, self.null_conclusion, self.null_script)

    def encode_visual(self, visual_track: np.ndarray) -> Tensor:
        v = np.asarray(visual_track, dtype=np.float64)
        if v.ndim != 2 or v.shape[1] != self.visual_dim or v.shape[0] < 1:
            raise ShapeMismatch(f"visual track must be F x {self.visual_dim} with F >= 1, got {v.shape}")
        return nx.add(self.visual_proj(v), positional_encoding(v.shape[0], self.d))

    def encode_conditions(self, conditions: ConditionSet) -> Tensor:
        values = (conditions.scene_type, conditions.gender, conditions.age, conditions.emotion)
        rows = [int(off) + list(enum_cls).index(val)
                for off, enum_cls, val in zip(_ATTRIBUTE_OFFSETS, _ATTRIBUTE_ENUMS, values)]
        return nx.embedding(self.attribute_table, rows)

    def encode_script(self, tokens) -> Tensor:
        tokens = [int(t) for t in tokens]
        if not tokens:
            return self.null_script
        bad = [t for t in tokens if not 0 <= t < self.vocab_size]
        if bad:
            raise OutOfVocab(f"token ids {bad} outside vocabulary of {self.vocab_size}")
        return nx.add(nx.embedding(self.token_table, tokens),
                      positional_encoding(len(tokens), self.d))

    def bundle(self, visual_track: np.ndarray, conditions: ConditionSet, tokens) -> ConditionBundle:
        script = self.encode_script(tokens)
        return ConditionBundle(
            visual=self.encode_visual(visual_track),
            conclusion=self.encode_conditions(conditions),
            script=script,
            nulls=self.nulls,
            is_null=(False, False, script is self.null_script),
        )

    def bundle_clip(self, clip: DubbingClip) -> ConditionBundle:
        return self.bundle(clip.visual_track, clip.conditions, clip.script_tokens)

    def null_bundle(self) -> ConditionBundle:
        return ConditionBundle(
            visual=self.null_visual,
            conclusion=self.null_conclusion,
            script=self.null_script,
            nulls=self.nulls,
            is_null=(True, True, True),
        )
