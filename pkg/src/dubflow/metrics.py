"""Objective metrics: DTW mel-cepstral distortion, WER, embedding similarity, sync offset."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from ._io import atomic_write_text
from .corpus import (
    AGE_SLOPE,
    EMOTION_MEAN,
    FRAMES_PER_VISUAL,
    GENDER_SIGMA,
    Manifest,
    decode_tokens,
    oracle_classify,
    oracle_statistics,
    read_payload,
)
from .errors import DimMismatch, EmptyReference, MissingGeneration, TooShort, ZeroVector

MCD_CONST = 10.0 / math.log(10.0)
SYNC_MAX_LAG = 20

METRIC_FIELDS = ("mcd", "mcd_sl", "wer", "spk_sim", "emo_sim", "sync_offset", "sync_conf")


def _frame_costs(ref: np.ndarray, gen: np.ndarray) -> np.ndarray:
    ref = np.asarray(ref, dtype=np.float64)
    gen = np.asarray(gen, dtype=np.float64)
    if ref.ndim != 2 or gen.ndim != 2 or ref.shape[1] != gen.shape[1]:
        raise DimMismatch(f"cannot compare {ref.shape} with {gen.shape}")
    if ref.shape[0] < 1 or gen.shape[0] < 1:
        raise DimMismatch("sequences must have at least one frame")
    diff = ref[:, None, 1:] - gen[None, :, 1:]
    return MCD_CONST * np.sqrt(2.0 * (diff * diff).sum(axis=-1))


def dtw(cost: np.ndarray) -> tuple[float, int]:
    """Minimum-cost monotone path from (0, 0) to (n-1, m-1).

    Steps are (1,0), (0,1) and (1,1). Returns the path cost and its length in
    cells. Equal-cost predecessors resolve to the diagonal first, then (1,0).
    Rows are swept by anti-diagonal so each sweep is one numpy operation.
    """
    n, m = cost.shape
    acc = np.full((n, m), np.inf)
    length = np.zeros((n, m), dtype=np.int64)
    acc[0, 0] = cost[0, 0]
    length[0, 0] = 1
    for k in range(1, n + m - 1):
        i = np.arange(max(0, k - m + 1), min(n, k + 1))
        j = k - i
        cand = np.full((3, i.size), np.inf)
        lens = np.zeros((3, i.size), dtype=np.int64)
        ok = (i >= 1) & (j >= 1)
        cand[0, ok] = acc[i[ok] - 1, j[ok] - 1]
        lens[0, ok] = length[i[ok] - 1, j[ok] - 1]
        ok = i >= 1
        cand[1, ok] = acc[i[ok] - 1, j[ok]]
        lens[1, ok] = length[i[ok] - 1, j[ok]]
        ok = j >= 1
        cand[2, ok] = acc[i[ok], j[ok] - 1]
        lens[2, ok] = length[i[ok], j[ok] - 1]
        best = np.argmin(cand, axis=0)
        cols = np.arange(i.size)
        acc[i, j] = cost[i, j] + cand[best, cols]
        length[i, j] = lens[best, cols] + 1
    return float(acc[-1, -1]), int(length[-1, -1])


def mcd(ref: np.ndarray, gen: np.ndarray) -> float:
    """DTW-aligned mel-cepstral distortion, coefficient 0 excluded, per aligned frame pair."""
    total, steps = dtw(_frame_costs(ref, gen))
    return total / steps


def mcd_sl(ref: np.ndarray, gen: np.ndarray) -> float:
    """MCD scaled by the length ratio ``max(T1, T2) / min(T1, T2)``.

    Length-mismatch penalty; not a canonical published formula.
    """
    t1, t2 = np.asarray(ref).shape[0], np.asarray(gen).shape[0]
    return mcd(ref, gen) * max(t1, t2) / min(t1, t2)


def edit_distance(ref: Sequence, hyp: Sequence) -> int:
    prev = list(range(len(hyp) + 1))
    for i, r in enumerate(ref, start=1):
        cur = [i] + [0] * len(hyp)
        for j, h in enumerate(hyp, start=1):
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (r != h))
        prev = cur
    return prev[-1]


def wer(ref_tokens: Sequence, hyp_tokens: Sequence) -> float:
    if len(ref_tokens) == 0:
        raise EmptyReference("reference must contain at least one token")
    return edit_distance(list(ref_tokens), list(hyp_tokens)) / len(ref_tokens)


def embedding_sim(a, b) -> float:
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise DimMismatch(f"embedding sizes differ: {a.shape} vs {b.shape}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise ZeroVector("cosine similarity of a zero vector is undefined")
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def _affinity(value: float, protos: dict, width: float) -> np.ndarray:
    return np.array([math.exp(-0.5 * ((value - p) / width) ** 2) for p in protos.values()])


def speaker_embedding(features: np.ndarray) -> np.ndarray:
    """Soft gender and age prototype affinities from the oracle statistics."""
    s = oracle_statistics(features)
    emb = np.concatenate([_affinity(s["noise"], GENDER_SIGMA, 0.1), _affinity(s["slope"], AGE_SLOPE, 0.15)])
    return emb + 1e-12


def emotion_embedding(features: np.ndarray) -> np.ndarray:
    s = oracle_statistics(features)
    return _affinity(s["level"], EMOTION_MEAN, 0.3) + 1e-12


def _zncc(a: np.ndarray, b: np.ndarray) -> float:
    a = a - a.mean()
    b = b - b.mean()
    den = math.sqrt(float(a @ a) * float(b @ b))
    return float(a @ b) / den if den > 0.0 else 0.0


def sync_offset(speech_energy, lip_activity, max_lag: int = SYNC_MAX_LAG) -> tuple[int, float]:
    """Lag (feature frames) by which speech trails the lips, and a confidence.

    The lip track is upsampled by repetition to the feature rate. For each lag
    in ``[-max_lag, max_lag]`` the zero-normalised cross-correlation of the
    overlapping parts is computed; confidence is the best correlation minus
    the median over all lags. Ties prefer the smaller ``|lag|``, then the
    negative lag.
    """
    e = np.asarray(speech_energy, dtype=np.float64).ravel()
    lip = np.repeat(np.asarray(lip_activity, dtype=np.float64).ravel(), FRAMES_PER_VISUAL)
    n = min(e.size, lip.size)
    if n < 2 * max_lag + 1:
        raise TooShort(f"sync needs at least {2 * max_lag + 1} frames, got {n}")
    e, lip = e[:n], lip[:n]
    lags = np.arange(-max_lag, max_lag + 1)
    corr = np.array([
        _zncc(e[lag:], lip[: n - lag]) if lag >= 0 else _zncc(e[: n + lag], lip[-lag:])
        for lag in lags
    ])
    order = sorted(range(lags.size), key=lambda k: (-corr[k], abs(lags[k]), lags[k]))
    best = order[0]
    return int(lags[best]), float(corr[best] - np.median(corr))


@dataclass
class ClipMetrics:
    id: str
    mcd: float
    mcd_sl: float
    wer: float
    spk_sim: float
    emo_sim: float
    sync_offset: int | None
    sync_conf: float | None


@dataclass
class MetricsReport:
    clips: list[ClipMetrics]
    aggregate: dict = field(default_factory=dict)
    config_echo: dict = field(default_factory=dict)

    def recompute_aggregate(self) -> dict:
        agg: dict = {}
        for name in METRIC_FIELDS:
            vals = [getattr(c, name) for c in self.clips if getattr(c, name) is not None]
            agg[name] = float(np.mean(vals)) if vals else None
        agg["count"] = len(self.clips)
        return agg

    def to_json(self) -> str:
        payload = {
            "clips": [asdict(c) for c in self.clips],
            "aggregate": self.aggregate,
            "config_echo": self.config_echo,
        }
        return json.dumps(payload, indent=1) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "MetricsReport":
        d = json.loads(text)
        return cls(clips=[ClipMetrics(**c) for c in d["clips"]], aggregate=d["aggregate"],
                   config_echo=d.get("config_echo", {}))


def lip_track(visual_track: np.ndarray) -> np.ndarray:
    return np.asarray(visual_track)[:, 8:16].mean(axis=1)


def clip_metrics(clip_id: str, ref: np.ndarray, gen: np.ndarray, tokens: Sequence[int],
                 visual_track: np.ndarray, fallback_scene=None) -> ClipMetrics:
    try:
        scene = oracle_classify(gen).scene_type
    except TooShort:
        scene = fallback_scene
    hyp = decode_tokens(gen, scene) if scene is not None else []
    try:
        offset, conf = sync_offset(gen[:, 7], lip_track(visual_track))
    except TooShort:
        offset, conf = None, None
    try:
        spk = embedding_sim(speaker_embedding(ref), speaker_embedding(gen))
        emo = embedding_sim(emotion_embedding(ref), emotion_embedding(gen))
    except TooShort:
        spk, emo = 0.0, 0.0
    return ClipMetrics(
        id=clip_id,
        mcd=mcd(ref, gen),
        mcd_sl=mcd_sl(ref, gen),
        wer=wer([t % 8 for t in tokens], hyp),
        spk_sim=spk,
        emo_sim=emo,
        sync_offset=offset,
        sync_conf=conf,
    )


def evaluate(
    manifest: Manifest,
    generated_dir: str | Path,
    out_path: str | Path | None = None,
    split: str = "test",
    config_echo: dict | None = None,
) -> MetricsReport:
    """Score every clip of ``split`` against ``<generated_dir>/<id>.features.bin``."""
    generated_dir = Path(generated_dir)
    clips = manifest.split(split)
    missing = [c.id for c in clips if not (generated_dir / f"{c.id}.features.bin").exists()]
    if missing:
        raise MissingGeneration(missing)
    records = []
    for clip in clips:
        gen = read_payload(generated_dir / f"{clip.id}.features.bin")
        records.append(clip_metrics(clip.id, clip.target_features, gen, clip.script_tokens,
                                    clip.visual_track, clip.conditions.scene_type))
    report = MetricsReport(clips=records, config_echo=dict(config_echo or {}, split=split))
    report.aggregate = report.recompute_aggregate()
    if out_path is not None:
        atomic_write_text(out_path, report.to_json())
    return report
