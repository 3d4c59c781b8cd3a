import dataclasses
import json
import shutil

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dubflow import corpus as C
from dubflow.corpus import Age, ConditionSet, Emotion, Gender, SceneType
from dubflow.errors import MissingPayload, ParseError, TooShort


def _clip(cond: ConditionSet, tokens, seed=0):
    return C.synthesize_clip("c", cond, list(tokens), np.random.default_rng(seed))


# ---------------------------------------------------------------- generation rule


def test_dialogue_ten_tokens_shape():
    clip = _clip(ConditionSet(SceneType.DIALOGUE, Gender.MALE, Age.CHILD, Emotion.SAD), range(10))
    assert clip.target_features.shape == (120, 8)
    assert clip.visual_track.shape == (30, 16)
    assert clip.duration_frames == 120


@pytest.mark.parametrize("scene,rate", [(SceneType.DIALOGUE, 12), (SceneType.NARRATION, 16),
                                        (SceneType.MONOLOGUE, 20)])
def test_duration_rate_table(scene, rate):
    clip = _clip(ConditionSet(scene, Gender.FEMALE, Age.ADULT, Emotion.NEUTRAL), [1, 2, 3, 4, 5, 6, 7])
    assert clip.duration_frames == 7 * rate


def test_channels_follow_the_rule():
    cond = ConditionSet(SceneType.NARRATION, Gender.MALE, Age.SENIOR, Emotion.ANGRY)
    tokens = [3, 9, 17, 60, 8, 1]
    x = _clip(cond, tokens).target_features
    T = x.shape[0]
    t = np.arange(T)
    sine = 0.5 * np.sin(2 * np.pi * 3 * t / T)
    np.testing.assert_allclose(x[:, 0] - sine, 2.0, atol=1e-12)
    np.testing.assert_allclose(x[:, 5] - sine, 0.5 * (t - (T - 1) / 2) / 100, atol=1e-12)
    expected_blocks = np.repeat([(k % 8) / 8 for k in tokens], 16)
    np.testing.assert_array_equal(x[:, 6], expected_blocks)
    # gender noise: sample std near 0.6 after removing the sinusoid
    assert abs(np.std(x[:, 2:4] - sine[:, None]) - 0.6) < 0.15


def test_visual_track_encoding():
    cond = ConditionSet(SceneType.MONOLOGUE, Gender.FEMALE, Age.CHILD, Emotion.HAPPY)
    clip = _clip(cond, [5] * 6)
    v = clip.visual_track
    np.testing.assert_array_equal(v[:, 0:4], np.tile([0, 0, 1, 0], (v.shape[0], 1)))
    np.testing.assert_allclose(v[:, 4:8].mean(axis=0), [1, 0, 1, 0], atol=0.1)
    energy = clip.target_features[:, 7]
    np.testing.assert_allclose(v[:, 8], energy.reshape(-1, 4).mean(axis=1), atol=1e-14)
    np.testing.assert_array_equal(v[:, 8:16], np.repeat(v[:, 8:9], 8, axis=1))


def test_smooth_drift_unit_scale():
    g = C.smooth_drift(np.random.default_rng(0).standard_normal(200))
    assert g.shape == (200,)
    assert g.std() == pytest.approx(1.0, abs=1e-12)
    assert np.abs(np.diff(g)).max() < 0.5


def test_generation_is_deterministic(tmp_path):
    C.generate_corpus(8, 11, tmp_path / "a")
    C.generate_corpus(8, 11, tmp_path / "b")
    names = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    assert names
    for name in names:
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_different_seeds_differ():
    a = C.build_clips(3, 1)[0].target_features
    b = C.build_clips(3, 2)[0].target_features
    assert a.shape != b.shape or not np.array_equal(a, b)


def test_split_sizes_for_100():
    assert C.split_sizes(100) == {"train": 60, "val": 10, "test": 30}
    tags = [c.split for c in C.build_clips(100, 7)]
    assert (tags.count("train"), tags.count("val"), tags.count("test")) == (60, 10, 30)


@given(n=st.integers(min_value=10, max_value=5000))
def test_split_proportions_hold(n):
    sizes = C.split_sizes(n)
    assert sum(sizes.values()) == n
    for name, frac in C.SPLIT_FRACTIONS.items():
        assert abs(sizes[name] - frac * n) <= 1.0


@settings(max_examples=20)
@given(seed=st.integers(min_value=0, max_value=10**6))
def test_generated_corpus_validates(seed):
    manifest = C.Manifest(C.build_clips(12, seed))
    assert C.validate(manifest) == []


def test_build_clips_rejects_zero():
    with pytest.raises(ValueError):
        C.build_clips(0, 1)


# ---------------------------------------------------------------- payloads and manifest


def test_payload_roundtrip_and_layout(tmp_path):
    arr = np.arange(6.0).reshape(3, 2)
    C.write_payload(tmp_path / "x.bin", arr)
    raw = (tmp_path / "x.bin").read_bytes()
    assert raw[:8] == b"VDXF0001"
    assert raw[8:16] == (3).to_bytes(4, "little") + (2).to_bytes(4, "little")
    assert len(raw) == 16 + 6 * 8
    np.testing.assert_array_equal(C.read_payload(tmp_path / "x.bin"), arr)
    assert C.read_payload_header(tmp_path / "x.bin") == (b"VDXF0001", 3, 2)


def test_truncated_payload_is_a_parse_error():
    blob = C.encode_payload(np.ones((2, 2)))
    with pytest.raises(ParseError):
        C.decode_payload(blob[:-3])


def test_manifest_roundtrip(small_corpus):
    m = C.load_manifest(small_corpus / "manifest.jsonl")
    assert len(m) == 20
    assert C.validate(m) == []
    lines = (small_corpus / "manifest.jsonl").read_text().splitlines()
    assert list(json.loads(lines[0])) == list(C.MANIFEST_FIELDS)
    fresh = C.build_clips(20, 5)
    for a, b in zip(m.clips, fresh):
        assert a.id == b.id and a.conditions == b.conditions and a.split == b.split
        np.testing.assert_array_equal(a.target_features, b.target_features)


def test_manifest_parse_error_carries_line(tmp_path, small_corpus):
    shutil.copytree(small_corpus, tmp_path / "c")
    lines = (small_corpus / "manifest.jsonl").read_text().splitlines()
    bad = tmp_path / "c" / "manifest.jsonl"
    bad.write_text("\n".join([lines[0], "{not json", lines[1]]) + "\n")
    with pytest.raises(ParseError) as info:
        C.load_manifest(bad)
    assert info.value.line == 2


def test_manifest_missing_payload(tmp_path, small_corpus):
    lines = (small_corpus / "manifest.jsonl").read_text().splitlines()
    rec = json.loads(lines[0])
    rec["features_path"] = "payloads/nope.bin"
    (tmp_path / "manifest.jsonl").write_text(json.dumps(rec) + "\n")
    with pytest.raises(MissingPayload):
        C.load_manifest(tmp_path / "manifest.jsonl")


def test_duplicate_id_violation(small_clips):
    clips = [dataclasses.replace(c) for c in small_clips[:12]]
    clips[3] = dataclasses.replace(clips[3], id=clips[2].id)
    rules = {(v.clip_id, v.rule) for v in C.validate(C.Manifest(clips))}
    assert (clips[2].id, "duplicate-id") in rules


def test_frame_alignment_violation(small_clips):
    clips = [dataclasses.replace(c) for c in small_clips[:12]]
    clips[0] = dataclasses.replace(clips[0], visual_track=clips[0].visual_track[:-1])
    rules = [v.rule for v in C.validate(C.Manifest(clips)) if v.clip_id == clips[0].id]
    assert rules == ["frame-alignment"]


def test_duration_and_declared_violations(small_clips):
    clips = [dataclasses.replace(c) for c in small_clips[:12]]
    clips[1] = dataclasses.replace(clips[1], script_tokens=clips[1].script_tokens + [0])
    clips[2] = dataclasses.replace(clips[2], declared_duration=5)
    found = {(v.clip_id, v.rule) for v in C.validate(C.Manifest(clips))}
    assert (clips[1].id, "duration-rate") in found
    assert (clips[2].id, "duration-declared") in found


def test_split_proportion_violation(small_clips):
    clips = [dataclasses.replace(c, split="train") for c in small_clips[:12]]
    assert any(v.rule == "split-proportion" for v in C.validate(C.Manifest(clips)))


def test_vocab_and_nonfinite_violations(small_clips):
    clips = [dataclasses.replace(c) for c in small_clips[:12]]
    feats = clips[4].target_features.copy()
    feats[0, 0] = np.nan
    clips[4] = dataclasses.replace(clips[4], target_features=feats)
    toks = list(clips[5].script_tokens)
    toks[0] = 64
    clips[5] = dataclasses.replace(clips[5], script_tokens=toks)
    found = {(v.clip_id, v.rule) for v in C.validate(C.Manifest(clips))}
    assert (clips[4].id, "non-finite") in found
    assert (clips[5].id, "vocab") in found


# ---------------------------------------------------------------- conclusion template


def test_conclusion_template():
    cond = ConditionSet(SceneType.DIALOGUE, Gender.FEMALE, Age.ADULT, Emotion.HAPPY)
    assert cond.conclusion == "A Adult Female speaker in a Dialogue scene with Happy emotion."
    assert C.stub_conclusion(cond) == C.stub_conclusion(cond)


def test_conclusion_is_injective():
    texts = {c.conclusion for c in C.all_condition_sets()}
    assert len(texts) == 72


# ---------------------------------------------------------------- oracle


def test_oracle_exhaustive_over_conditions():
    for cond in C.all_condition_sets():
        for seed in range(10):
            rng = np.random.default_rng([seed, 99])
            tokens = [int(k) for k in rng.integers(0, 64, size=6 + seed % 5)]
            clip = C.synthesize_clip("c", cond, tokens, rng)
            assert C.oracle_classify(clip.target_features) == cond


def test_oracle_accuracy_on_1000_clean_clips():
    clips = C.build_clips(1000, 21)
    hits = sum(C.oracle_classify(c.target_features) == c.conditions for c in clips)
    assert hits == 1000


def test_oracle_accuracy_with_noise():
    clips = C.build_clips(1000, 22)
    rng = np.random.default_rng(0)
    hits = sum(
        C.oracle_classify(c.target_features + 0.05 * rng.standard_normal(c.target_features.shape))
        == c.conditions
        for c in clips
    )
    assert hits / 1000 >= 0.99


def test_oracle_zero_input_degenerate_answer():
    assert C.oracle_classify(np.zeros((40, 8))) == ConditionSet(
        SceneType.DIALOGUE, Gender.FEMALE, Age.ADULT, Emotion.NEUTRAL)


def test_oracle_too_short():
    with pytest.raises(TooShort):
        C.oracle_classify(np.zeros((19, 8)))


def test_decode_tokens_reads_block_classes():
    cond = ConditionSet(SceneType.NARRATION, Gender.MALE, Age.ADULT, Emotion.SAD)
    tokens = [0, 7, 15, 22, 63, 8, 31]
    x = _clip(cond, tokens).target_features
    assert C.decode_tokens(x, SceneType.NARRATION) == [t % 8 for t in tokens]
