import numpy as np
import pytest
from dataclasses import replace

from iamsb import synth
from iamsb.intervals import iou_1d
from iamsb.synth import (ClipRecord, SynthConfig, SynthError, detect_events,
                         generate_clip, read_dataset, signature_vector,
                         write_dataset)


BASE = SynthConfig(clips=4, len_a=64, len_v=64, channels=32, seed=7)


def test_determinism_bit_identical():
    a = generate_clip(BASE, 3)
    b = generate_clip(BASE, 3)
    assert (a.feat_a == b.feat_a).all()
    assert (a.feat_v == b.feat_v).all()
    assert a.events == b.events
    c = generate_clip(BASE, 4)
    assert not (a.feat_a == c.feat_a).all()


def test_label_geometry_invariant():
    for clip_seed in range(40):
        rec = generate_clip(replace(BASE, regime="mixed"), clip_seed)
        occupied = {"a": [], "v": []}
        for s, d, flag in rec.events:
            assert 0.0 <= s and s + d <= 1.0 + 1e-6 and d > 0
            mods = {0: ["a"], 1: ["v"], 2: ["a", "v"]}[flag]
            for m in mods:
                for (s2, d2) in occupied[m]:
                    assert s + d <= s2 or s2 + d2 <= s, "overlap within modality"
                occupied[m].append((s, d))


def test_signature_vector_fixed_and_unit():
    v1 = signature_vector(32, "a")
    v2 = signature_vector(32, "a")
    assert (v1 == v2).all()
    assert np.linalg.norm(v1) == pytest.approx(1.0)
    assert (v1[:synth.POS_CHANNELS] == 0).all()
    assert not (signature_vector(32, "v") == v1).all()


def test_null_signature_statistics():
    # strength 0: forged and clean token projections share their distribution
    cfg = replace(BASE, strength=0.0, regime="mixed", clips=0)
    sig = signature_vector(cfg.channels, "a")
    forged, clean = [], []
    for clip_seed in range(300):
        rec = generate_clip(cfg, clip_seed)
        proj = rec.feat_a.astype(np.float64) @ sig
        mask = synth._token_mask(cfg.len_a, rec.events_for("a"))
        forged.extend(proj[mask])
        clean.extend(proj[~mask])
    forged, clean = np.array(forged), np.array(clean)
    se = np.sqrt(forged.var() / len(forged) + clean.var() / len(clean))
    z = abs(forged.mean() - clean.mean()) / se
    assert z < 2.58  # two-sample mean test, alpha = 0.01


def test_visual_only_regime_leaves_audio_clean():
    cfg = replace(BASE, regime="visual")
    sig = signature_vector(cfg.channels, "a")
    projections = []
    for clip_seed in range(300):
        rec = generate_clip(cfg, clip_seed)
        projections.extend(rec.feat_a.astype(np.float64) @ sig)
    projections = np.array(projections)
    bound = 3.0 * projections.std() / np.sqrt(len(projections))
    assert abs(projections.mean()) <= bound


def test_forged_tokens_carry_signature():
    cfg = replace(BASE, regime="audio")
    sig = signature_vector(cfg.channels, "a")
    rec = generate_clip(cfg, 1)
    proj = rec.feat_a.astype(np.float64) @ sig
    mask = synth._token_mask(cfg.len_a, rec.events_for("a"))
    assert mask.any()
    assert proj[mask].mean() > cfg.strength * 0.7
    assert abs(proj[~mask].mean()) < cfg.strength * 0.3


def test_config_validation():
    with pytest.raises(SynthError, match="synth-config"):
        replace(BASE, dur_min=0.6, dur_max=1.2).validate()
    with pytest.raises(SynthError, match="synth-config"):
        replace(BASE, events_max=4, dur_max=0.3).validate()
    with pytest.raises(SynthError, match="synth-config"):
        replace(BASE, len_a=4).validate()
    with pytest.raises(SynthError, match="synth-config"):
        replace(BASE, regime="weird").validate()
    with pytest.raises(SynthError, match="synth-config"):
        replace(BASE, dt_v=1.0).validate()


def test_planted_interval_recoverability_at_twice_noise():
    """An oracle matched filter on the signature projection recovers planted
    intervals with mean IoU >= 0.9 when strength is 2x the noise level."""
    cfg = replace(BASE, strength=1.0, noise=0.5, regime="mixed", events_min=1,
                  events_max=2)
    scores = []
    for clip_seed in range(120):
        rec = generate_clip(cfg, clip_seed)
        found = detect_events(rec, cfg)
        for m in "av":
            for (s, d) in rec.events_for(m):
                best = max((iou_1d((e.start, e.start + e.dur), (s, s + d))
                            for e in found[m]), default=0.0)
                scores.append(best)
    assert len(scores) > 100
    assert float(np.mean(scores)) >= 0.9


def test_detector_upper_bound_at_default_strength():
    cfg = replace(BASE, regime="mixed")
    scores = []
    for clip_seed in range(60):
        rec = generate_clip(cfg, clip_seed)
        found = detect_events(rec, cfg)
        for m in "av":
            for (s, d) in rec.events_for(m):
                best = max((iou_1d((e.start, e.start + e.dur), (s, s + d))
                            for e in found[m]), default=0.0)
                scores.append(best)
    assert float(np.mean(scores)) >= 0.95


# ---------------------------------------------------------------------------
# dataset container


def test_dataset_roundtrip(tmp_path):
    records = [generate_clip(BASE, i) for i in range(10)]
    path = tmp_path / "data.bin"
    write_dataset(records, str(path))
    back = read_dataset(str(path))
    assert len(back) == 10
    for orig, rec in zip(records, back):
        assert rec.clip_id == orig.clip_id
        assert (rec.feat_a == orig.feat_a).all()
        assert (rec.feat_v == orig.feat_v).all()
        assert rec.events == orig.events


def test_dataset_bad_magic(tmp_path):
    path = tmp_path / "data.bin"
    write_dataset([generate_clip(BASE, 0)], str(path))
    blob = bytearray(path.read_bytes())
    blob[:4] = b"NOPE"
    path.write_bytes(bytes(blob))
    with pytest.raises(SynthError, match="dataset-format"):
        read_dataset(str(path))


def test_dataset_truncated(tmp_path):
    path = tmp_path / "data.bin"
    write_dataset([generate_clip(BASE, 0)], str(path))
    blob = path.read_bytes()
    path.write_bytes(blob[:len(blob) // 2])
    with pytest.raises(SynthError, match="dataset-truncated"):
        read_dataset(str(path))


def test_dataset_empty_roundtrip(tmp_path):
    path = tmp_path / "data.bin"
    write_dataset([], str(path))
    assert read_dataset(str(path)) == []


def test_event_values_are_float32_exact(tmp_path):
    records = [generate_clip(BASE, i) for i in range(5)]
    path = tmp_path / "data.bin"
    write_dataset(records, str(path))
    for orig, rec in zip(records, read_dataset(str(path))):
        for (s, d, f), (s2, d2, f2) in zip(orig.events, rec.events):
            assert s == s2 and d == d2 and f == f2
