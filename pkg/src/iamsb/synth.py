"""Synthetic audio/visual token streams with planted forgery intervals.

Each clip carries two feature matrices built from (i) a handful of clean
positional channels, (ii) a per-modality smooth random walk, and (iii) a
sinusoid mixture shared by both modalities so that clean audio and visual
tracks are correlated.  Inside a forged interval the shared component is
swapped for an independent draw (breaking the cross-modal correlation) and a
fixed per-modality signature vector scaled by ``strength`` is added.  The
walk and the sinusoid mixtures are projected orthogonal to the signature, so
the signature-direction projection of clean tokens is pure observation noise.

A matched-filter detector over that projection doubles as an upper-bound
oracle: it certifies the planted task is solvable before any training.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace

import numpy as np

from .intervals import EventCandidate

POS_CHANNELS = 5

FLAG_AUDIO = 0
FLAG_VISUAL = 1
FLAG_BOTH = 2

REGIMES = ("audio", "visual", "both", "mixed")


class SynthError(ValueError):
    pass


@dataclass
class SynthConfig:
    clips: int = 512
    len_a: int = 64
    len_v: int = 64
    channels: int = 32
    dt_a: float = 1.0 / 16.0
    dt_v: float = 1.0 / 16.0
    regime: str = "mixed"
    events_min: int = 1
    events_max: int = 2
    dur_min: float = 0.1
    dur_max: float = 0.3
    strength: float = 2.0
    noise: float = 0.5
    walk_step: float = 0.15
    coupling: float = 1.0
    seed: int = 0

    def validate(self) -> None:
        if self.len_a < 8 or self.len_v < 8:
            raise SynthError("synth-config: token lengths must be >= 8")
        if self.channels < POS_CHANNELS + 1:
            raise SynthError(f"synth-config: need more than {POS_CHANNELS} channels")
        if not (0.0 < self.dur_min <= self.dur_max <= 1.0):
            raise SynthError("synth-config: duration range must sit inside (0, 1]")
        if self.events_min < 0 or self.events_max < self.events_min:
            raise SynthError("synth-config: bad events-per-clip range")
        if self.events_max * (self.dur_max + 0.05) > 1.0:
            raise SynthError("synth-config: intervals cannot fit without overlap")
        if self.regime not in REGIMES:
            raise SynthError(f"synth-config: unknown regime {self.regime!r}")
        if self.strength < 0 or self.noise < 0:
            raise SynthError("synth-config: strength and noise must be >= 0")
        if abs(self.len_a * self.dt_a - self.len_v * self.dt_v) > 1e-9:
            raise SynthError("synth-config: modality timelines must span the same duration")


@dataclass
class ClipRecord:
    clip_id: int
    feat_a: np.ndarray  # L_a x C float32
    feat_v: np.ndarray  # L_v x C float32
    events: list[tuple[float, float, int]] = field(default_factory=list)  # (s, dur, flag)

    def events_for(self, modality: str) -> list[tuple[float, float]]:
        want = FLAG_AUDIO if modality == "a" else FLAG_VISUAL
        return [(s, d) for s, d, f in self.events if f in (want, FLAG_BOTH)]

    def all_events(self) -> list[tuple[float, float]]:
        return [(s, d) for s, d, _ in self.events]


def signature_vector(channels: int, modality: str) -> np.ndarray:
    """Fixed unit signature direction for one modality.

    Lives in the non-positional channel subspace so positional channels stay
    clean; derived from a constant seed so detectors can reconstruct it.
    """
    rng = np.random.default_rng(0x51A6 + (0 if modality == "a" else 1))
    v = rng.normal(size=channels - POS_CHANNELS)
    full = np.zeros(channels)
    full[POS_CHANNELS:] = v / np.linalg.norm(v)
    return full


def _positional(t: np.ndarray) -> np.ndarray:
    return np.stack([
        t,
        np.sin(2.0 * np.pi * t),
        np.cos(2.0 * np.pi * t),
        np.sin(4.0 * np.pi * t),
        np.cos(4.0 * np.pi * t),
    ], axis=1)


def _sinusoid_mixture(rng: np.random.Generator, n_ch: int, n_comp: int = 3):
    freq = rng.uniform(0.5, 2.5, size=n_comp)
    phase = rng.uniform(0.0, 2.0 * np.pi, size=(n_comp, n_ch))
    amp = rng.normal(0.0, 0.6 / np.sqrt(n_comp), size=(n_comp, n_ch))

    def evaluate(t: np.ndarray) -> np.ndarray:
        arg = 2.0 * np.pi * freq[:, None, None] * t[None, :, None] + phase[:, None, :]
        return (amp[:, None, :] * np.sin(arg)).sum(axis=0)

    return evaluate


def _orthogonal_to(x: np.ndarray, unit: np.ndarray) -> np.ndarray:
    return x - np.outer(x @ unit, unit)


def _token_mask(length: int, intervals: list[tuple[float, float]]) -> np.ndarray:
    """Tokens whose [i/L, (i+1)/L) span overlaps any interval."""
    lo = np.arange(length) / length
    hi = (np.arange(length) + 1) / length
    mask = np.zeros(length, dtype=bool)
    for s, d in intervals:
        mask |= (lo < s + d) & (hi > s)
    return mask


def _sample_events(rng: np.random.Generator, cfg: SynthConfig) -> list[tuple[float, float, int]]:
    n = int(rng.integers(cfg.events_min, cfg.events_max + 1))
    margin = 4.0 / max(cfg.len_a, cfg.len_v)
    events: list[tuple[float, float, int]] = []
    for _ in range(n):
        if cfg.regime == "audio":
            flag = FLAG_AUDIO
        elif cfg.regime == "visual":
            flag = FLAG_VISUAL
        elif cfg.regime == "both":
            flag = FLAG_BOTH
        else:
            flag = int(rng.integers(0, 3))
        grid = {FLAG_AUDIO: cfg.len_a, FLAG_VISUAL: cfg.len_v,
                FLAG_BOTH: min(cfg.len_a, cfg.len_v)}[flag]
        placed = False
        for _ in range(200):
            frac = rng.uniform(cfg.dur_min, cfg.dur_max)
            n_tok = max(1, int(round(frac * grid)))
            start_tok = int(rng.integers(0, grid - n_tok + 1))
            s = start_tok / grid
            d = n_tok / grid
            if all(s + d + margin <= es or es + ed + margin <= s for es, ed, _ in events):
                events.append((float(np.float32(s)), float(np.float32(d)), flag))
                placed = True
                break
        if not placed:
            raise SynthError("synth-config: could not place non-overlapping intervals")
    events.sort()
    return events


def generate_clip(cfg: SynthConfig, clip_seed: int) -> ClipRecord:
    """Deterministic per (cfg.seed, clip_seed) clip synthesis."""
    cfg.validate()
    rng = np.random.default_rng(np.random.SeedSequence(cfg.seed, spawn_key=(clip_seed,)))
    events = _sample_events(rng, cfg)
    shared = _sinusoid_mixture(rng, cfg.channels - POS_CHANNELS)
    alt = _sinusoid_mixture(rng, cfg.channels - POS_CHANNELS)

    feats = {}
    for modality, length in (("a", cfg.len_a), ("v", cfg.len_v)):
        t = (np.arange(length) + 0.5) / length
        sig = signature_vector(cfg.channels, modality)[POS_CHANNELS:]
        steps = rng.normal(0.0, cfg.walk_step, size=(length, cfg.channels - POS_CHANNELS))
        walk = _orthogonal_to(np.cumsum(steps, axis=0), sig)
        shared_vals = _orthogonal_to(cfg.coupling * shared(t), sig)
        alt_vals = _orthogonal_to(cfg.coupling * alt(t), sig)
        flag = FLAG_AUDIO if modality == "a" else FLAG_VISUAL
        mask = _token_mask(length, [(s, d) for s, d, f in events if f in (flag, FLAG_BOTH)])
        signal = walk + np.where(mask[:, None], alt_vals, shared_vals)
        signal += cfg.strength * mask[:, None] * sig[None, :]
        signal += rng.normal(0.0, cfg.noise, size=signal.shape)
        feats[modality] = np.concatenate([_positional(t), signal], axis=1).astype(np.float32)

    return ClipRecord(clip_id=clip_seed, feat_a=feats["a"], feat_v=feats["v"], events=events)


def generate_dataset(cfg: SynthConfig, start_id: int = 0) -> list[ClipRecord]:
    cfg.validate()
    return [generate_clip(cfg, start_id + i) for i in range(cfg.clips)]


def eval_split(cfg: SynthConfig, clips: int, offset: int = 1_000_000) -> list[SynthConfig]:
    return replace(cfg, clips=clips), offset


# ---------------------------------------------------------------------------
# matched-filter oracle detector


def _best_subarray(scores: np.ndarray, dead: np.ndarray) -> tuple[float, int, int]:
    best_sum, best_lo, best_hi = -np.inf, -1, -1
    run_sum, run_lo = 0.0, 0
    for i in range(len(scores)):
        if dead[i]:
            run_sum, run_lo = 0.0, i + 1
            continue
        if run_sum <= 0.0:
            run_sum, run_lo = scores[i], i
        else:
            run_sum += scores[i]
        if run_sum > best_sum:
            best_sum, best_lo, best_hi = run_sum, run_lo, i
    return best_sum, best_lo, best_hi


def _split_window(scores: np.ndarray, lo: int, hi: int, valley: float,
                  max_tokens: int) -> list[tuple[int, int]]:
    """Split [lo, hi] at its deepest interior valley while one deeper than
    ``valley`` exists (two nearby runs can out-sum their bridging gap), or
    unconditionally while the window exceeds the maximum event length."""
    if hi - lo < 2:
        return [(lo, hi)]
    worst_sum, w_lo, w_hi = 0.0, -1, -1
    run_sum, run_lo = 0.0, lo + 1
    for i in range(lo + 1, hi):
        if run_sum >= 0.0:
            run_sum, run_lo = scores[i], i
        else:
            run_sum += scores[i]
        if run_sum < worst_sum:
            worst_sum, w_lo, w_hi = run_sum, run_lo, i
    must_split = (hi - lo + 1) > max_tokens and w_lo >= 0
    if worst_sum > -valley and not must_split:
        return [(lo, hi)]
    return (_split_window(scores, lo, w_lo - 1, valley, max_tokens)
            + _split_window(scores, w_hi + 1, hi, valley, max_tokens))


def detect_events(record: ClipRecord, cfg: SynthConfig,
                  max_events: int = 8) -> dict[str, list[EventCandidate]]:
    """Threshold the signature-vector projection to recover planted runs.

    Iterated maximum-sum subarray of (projection - strength/2): inside a
    planted run each token contributes about +strength/2, outside about
    -strength/2, so the best subarray is the maximum-likelihood token run.
    A found window is split at interior valleys (nearby events can out-sum
    their bridging gap); runs are kept while their evidence exceeds 2x the
    noise level, with confidence growing in the evidence margin.
    """
    out: dict[str, list[EventCandidate]] = {}
    floor = 2.0 * cfg.noise + 1e-9
    for modality, feat in (("a", record.feat_a), ("v", record.feat_v)):
        sig = signature_vector(cfg.channels, modality)
        proj = feat.astype(np.float64) @ sig
        scores = proj - cfg.strength / 2.0
        length = len(scores)
        found: list[EventCandidate] = []
        dead = np.zeros(length, dtype=bool)
        max_tokens = max(2, int(round(cfg.dur_max * length)) + 1)
        while len(found) < max_events:
            best_sum, best_lo, best_hi = _best_subarray(scores, dead)
            if best_sum < floor:
                break
            for lo, hi in _split_window(scores, best_lo, best_hi, floor, max_tokens):
                piece = scores[lo:hi + 1].sum()
                if piece < floor or len(found) >= max_events:
                    continue
                conf = 1.0 - np.exp(-piece / floor)
                found.append(EventCandidate(lo / length, (hi - lo + 1) / length,
                                            float(conf), modality))
            dead[best_lo:best_hi + 1] = True
        out[modality] = sorted(found, key=lambda e: -e.conf)
    return out


# ---------------------------------------------------------------------------
# dataset container: magic "IAMS", version 1


_DATA_MAGIC = b"IAMS"
_DATA_VERSION = 1


def write_dataset(records: list[ClipRecord], path: str) -> None:
    with open(path, "wb") as fh:
        fh.write(_DATA_MAGIC)
        fh.write(struct.pack("<II", _DATA_VERSION, len(records)))
        for rec in records:
            la, ca = rec.feat_a.shape
            lv, cv = rec.feat_v.shape
            if ca != cv:
                raise SynthError("synth-config: modality channel widths differ")
            fh.write(struct.pack("<IIII", rec.clip_id, la, lv, ca))
            fh.write(rec.feat_a.astype("<f4").tobytes(order="C"))
            fh.write(rec.feat_v.astype("<f4").tobytes(order="C"))
            fh.write(struct.pack("<H", len(rec.events)))
            for s, d, flag in rec.events:
                fh.write(struct.pack("<ffB", s, d, flag))


def read_dataset(path: str) -> list[ClipRecord]:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != _DATA_MAGIC:
        raise SynthError("dataset-format: bad magic")
    if len(blob) < 12:
        raise SynthError("dataset-truncated: missing header")
    version, count = struct.unpack_from("<II", blob, 4)
    if version != _DATA_VERSION:
        raise SynthError(f"dataset-format: unsupported version {version}")
    off = 12
    records = []
    try:
        for _ in range(count):
            clip_id, la, lv, ch = struct.unpack_from("<IIII", blob, off)
            off += 16
            na, nv = la * ch, lv * ch
            feat_a = np.frombuffer(blob, dtype="<f4", count=na, offset=off)
            off += 4 * na
            feat_v = np.frombuffer(blob, dtype="<f4", count=nv, offset=off)
            off += 4 * nv
            (n_ev,) = struct.unpack_from("<H", blob, off)
            off += 2
            events = []
            for _ in range(n_ev):
                s, d, flag = struct.unpack_from("<ffB", blob, off)
                off += 9
                events.append((float(s), float(d), int(flag)))
            records.append(ClipRecord(clip_id, feat_a.reshape(la, ch).copy(),
                                      feat_v.reshape(lv, ch).copy(), events))
    except (struct.error, ValueError) as e:
        raise SynthError("dataset-truncated: unexpected end of file") from e
    if off != len(blob):
        raise SynthError("dataset-truncated: trailing bytes")
    return records
