"""Synthetic emotion-like corpus, WAV ingestion, and speaker-disjoint splits.

The synthetic corpus is a stand-in for a real emotional-speech dataset at
desk scale: each class is a parametric signal family (fundamental frequency
band, amplitude-modulation rate, second-harmonic weight, noise level), and
each synthetic "speaker" applies a fixed pitch offset so speaker-disjoint
splitting is meaningful.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt
from .errors import (
    ConfigError,
    DataError,
    ManifestError,
    WavEncodingError,
    WavFormatError,
)

DEFAULT_CLASS_NAMES = ["anger", "disgust", "fear", "guilt", "happiness", "sadness", "surprise"]


@dataclass
class LabeledClip:
    samples: np.ndarray  # 1-D float32 in [-1, 1]
    sample_rate: int
    label: int
    speaker_id: str


# -- synthetic corpus --------------------------------------------------------


# Classes are ordered pitch-band pairs: the clip's first half carries one
# tone, the second half another. Order-swapped classes (low->mid vs
# mid->low) have identical long-term spectra, so time-order must be read
# out of the sequence; that is what separates deep models from shallow
# spectral readers on this corpus.
_BANDS = {"low": 36.0, "mid": 54.0, "high": 81.0}
_CLASS_PAIRS = [
    ("low", "mid"), ("mid", "low"),
    ("mid", "high"), ("high", "mid"),
    ("low", "high"), ("high", "low"),
    ("low", "low"),
]


def _class_params(c: int, overlap: float) -> dict:
    first, second = _CLASS_PAIRS[c % len(_CLASS_PAIRS)]
    return {
        "f0_first": _BANDS[first],
        "f0_second": _BANDS[second],
        "am_rate": 8.0 + 2.0 * c,
        "am_depth": 0.3,
        "harm2": 0.25,
        "noise": 0.06 + 0.015 * c,
        "jitter": 0.03 * overlap,
    }


def synth_corpus(
    seed: int,
    n_per_class: int,
    classes: int = 7,
    length: int = 128,
    sample_rate: int = 500,
    speakers: int = 28,
    overlap: float = 1.0,
) -> list[LabeledClip]:
    """Generate a balanced corpus of ``classes * n_per_class`` clips.

    Clips cycle through a seeded speaker pool so every speaker covers every
    class; the same seed always yields a bit-identical corpus.
    """
    if n_per_class < 1:
        raise ConfigError("n_per_class must be >= 1")
    rng = np.random.default_rng(seed)
    speaker_pitch = 1.0 + rng.uniform(-0.08, 0.08, size=speakers)
    speaker_names = [f"spk{idx:03d}" for idx in range(speakers)]
    t = np.arange(length) / sample_rate
    clips: list[LabeledClip] = []
    half = length // 2
    for c in range(classes):
        p = _class_params(c, overlap)
        for i in range(n_per_class):
            spk = (c * n_per_class + i) % speakers
            mult = speaker_pitch[spk] * (1.0 + rng.normal(0.0, p["jitter"]))
            wave = np.empty(length)
            for seg, f_base in ((slice(0, half), p["f0_first"]), (slice(half, length), p["f0_second"])):
                f0 = f_base * mult
                phase = rng.uniform(0.0, 2 * np.pi)
                ts = t[seg]
                wave[seg] = np.sin(2 * np.pi * f0 * ts + phase) + p["harm2"] * np.sin(
                    4 * np.pi * f0 * ts + 2 * phase
                )
            am_phase = rng.uniform(0.0, 2 * np.pi)
            wave *= 1.0 + p["am_depth"] * np.sin(2 * np.pi * p["am_rate"] * t + am_phase)
            wave += rng.normal(0.0, p["noise"], size=length)
            wave = wave / max(1e-6, np.abs(wave).max()) * rng.uniform(0.5, 0.95)
            clips.append(
                LabeledClip(
                    samples=wave.astype(np.float32),
                    sample_rate=sample_rate,
                    label=c,
                    speaker_id=speaker_names[spk],
                )
            )
    return clips


def synth_pretext_corpus(
    seed: int,
    n_per_class: int,
    families: int = 12,
    length: int = 128,
    sample_rate: int = 500,
    speakers: int = 28,
) -> list[LabeledClip]:
    """A corpus of randomly drawn signal families for pretext pretraining.

    Family parameters (pitch, modulation rate, harmonic weight, noise) are
    sampled from the seed instead of the fixed class table, so a trunk
    pretrained here learns general acoustic features without ever seeing
    the target task's class boundaries.
    """
    rng = np.random.default_rng((seed, 0xFA))
    speaker_pitch = 1.0 + rng.uniform(-0.08, 0.08, size=speakers)
    t = np.arange(length) / sample_rate
    half = length // 2
    params = [
        {
            "f0a": float(np.exp(rng.uniform(np.log(28.0), np.log(110.0)))),
            "f0b": float(np.exp(rng.uniform(np.log(28.0), np.log(110.0)))),
            "am_rate": float(rng.uniform(5.0, 30.0)),
            "am_depth": float(rng.uniform(0.2, 0.6)),
            "harm2": float(rng.uniform(0.0, 0.6)),
            "noise": float(rng.uniform(0.05, 0.2)),
        }
        for _ in range(families)
    ]
    clips: list[LabeledClip] = []
    for c, p in enumerate(params):
        for i in range(n_per_class):
            spk = (c * n_per_class + i) % speakers
            mult = speaker_pitch[spk] * (1.0 + rng.normal(0.0, 0.03))
            wave = np.empty(length)
            for seg, f_base in ((slice(0, half), p["f0a"]), (slice(half, length), p["f0b"])):
                f0 = f_base * mult
                phase = rng.uniform(0.0, 2 * np.pi)
                ts = t[seg]
                wave[seg] = np.sin(2 * np.pi * f0 * ts + phase) + p["harm2"] * np.sin(
                    4 * np.pi * f0 * ts + 2 * phase
                )
            am_phase = rng.uniform(0.0, 2 * np.pi)
            wave *= 1.0 + p["am_depth"] * np.sin(2 * np.pi * p["am_rate"] * t + am_phase)
            wave += rng.normal(0.0, p["noise"], size=length)
            wave = wave / max(1e-6, np.abs(wave).max()) * rng.uniform(0.5, 0.95)
            clips.append(
                LabeledClip(
                    samples=wave.astype(np.float32),
                    sample_rate=sample_rate,
                    label=c,
                    speaker_id=f"pre{spk:03d}",
                )
            )
    return clips


def split_speaker_disjoint(
    corpus: list[LabeledClip], ratios: tuple[float, float, float], seed: int
) -> tuple[list[LabeledClip], list[LabeledClip], list[LabeledClip]]:
    """Partition clips into train/dev/test with disjoint speaker sets.

    Speakers are shuffled by the seed and dealt to partitions by target
    speaker counts, so the assignment is a pure function of (speakers, seed).
    """
    if abs(sum(ratios) - 1.0) > 1e-6:
        raise ConfigError(f"split ratios must sum to 1, got {ratios}")
    speakers = sorted({clip.speaker_id for clip in corpus})
    if len(speakers) < 3:
        raise DataError(f"need at least 3 speakers for a 3-way disjoint split, have {len(speakers)}")
    rng = np.random.default_rng(seed)
    order = [speakers[i] for i in rng.permutation(len(speakers))]
    counts = [int(round(r * len(speakers))) for r in ratios]
    counts = [max(1, c) for c in counts]
    while sum(counts) > len(speakers):
        counts[counts.index(max(counts))] -= 1
    counts[0] += len(speakers) - sum(counts)
    bounds = [counts[0], counts[0] + counts[1]]
    assignment = {}
    for i, spk in enumerate(order):
        assignment[spk] = 0 if i < bounds[0] else (1 if i < bounds[1] else 2)
    parts: tuple[list, list, list] = ([], [], [])
    for clip in corpus:
        parts[assignment[clip.speaker_id]].append(clip)
    return parts


# -- WAV input/output --------------------------------------------------------


def read_wav(path) -> tuple[np.ndarray, int]:
    """Parse a mono RIFF/WAVE file (PCM 16-bit or IEEE float 32-bit).

    Samples come back as float32 in [-1, 1]; no resampling or downmixing
    ever happens here.
    """
    raw = Path(path).read_bytes()
    if len(raw) < 12 or raw[0:4] != b"RIFF" or raw[8:12] != b"WAVE":
        raise WavFormatError(f"{path}: not a RIFF/WAVE file")
    pos = 12
    fmt = None
    data = None
    while pos + 8 <= len(raw):
        chunk_id = raw[pos : pos + 4]
        (chunk_len,) = struct.unpack("<I", raw[pos + 4 : pos + 8])
        body = raw[pos + 8 : pos + 8 + chunk_len]
        if chunk_id == b"fmt ":
            if len(body) < 16:
                raise WavFormatError(f"{path}: fmt chunk too short")
            fmt = struct.unpack("<HHIIHH", body[:16])
        elif chunk_id == b"data":
            data = body
        pos += 8 + chunk_len + (chunk_len & 1)
    if fmt is None or data is None:
        raise WavFormatError(f"{path}: missing fmt or data chunk")
    audio_format, channels, rate, _, _, bits = fmt
    if channels != 1:
        raise WavEncodingError(f"{path}: {channels} channels unsupported, need mono")
    if audio_format == 1 and bits == 16:
        samples = np.frombuffer(data, dtype="<i2").astype(np.float32) / 32768.0
    elif audio_format == 3 and bits == 32:
        samples = np.frombuffer(data, dtype="<f4").astype(np.float32)
    else:
        raise WavEncodingError(f"{path}: format {audio_format} at {bits} bits unsupported")
    return samples, rate


def write_wav(path, samples: np.ndarray, sample_rate: int, encoding: str = "pcm16") -> None:
    samples = np.asarray(samples, dtype=np.float32)
    if encoding == "pcm16":
        payload = np.clip(np.round(samples * 32768.0), -32768, 32767).astype("<i2").tobytes()
        audio_format, bits = 1, 16
    elif encoding == "float32":
        payload = samples.astype("<f4").tobytes()
        audio_format, bits = 3, 32
    else:
        raise ConfigError(f"unknown wav encoding {encoding!r}")
    block = bits // 8
    header = struct.pack(
        "<4sI4s4sIHHIIHH4sI",
        b"RIFF", 36 + len(payload), b"WAVE", b"fmt ", 16,
        audio_format, 1, sample_rate, sample_rate * block, block, bits,
        b"data", len(payload),
    )
    Path(path).write_bytes(header + payload)


# -- manifests ----------------------------------------------------------------


def write_manifest(path, rows: list[tuple[str, str, str]]) -> None:
    """Rows are (relative wav path, label name, speaker id), tab-separated."""
    lines = [f"{rel}\t{label}\t{speaker}" for rel, label, speaker in rows]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_manifest(path, class_names: list[str]) -> dict[str, tuple[int, str]]:
    label_index = {name: i for i, name in enumerate(class_names)}
    table: dict[str, tuple[int, str]] = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise ManifestError(f"{path}:{lineno}: expected 3 tab-separated fields, got {len(parts)}")
        rel, label_name, speaker = parts
        if label_name not in label_index:
            raise ManifestError(f"{path}:{lineno}: unknown label {label_name!r}; classes are {class_names}")
        table[rel] = (label_index[label_name], speaker)
    return table


def ingest_wav(path, manifest: dict[str, tuple[int, str]], base_dir=None) -> LabeledClip:
    """Read one WAV and attach label/speaker from its manifest row."""
    rel = str(Path(path).name if base_dir is None else Path(path).relative_to(base_dir))
    if rel not in manifest:
        raise ManifestError(f"no manifest row for {rel!r}")
    samples, rate = read_wav(path)
    label, speaker = manifest[rel]
    return LabeledClip(samples=samples, sample_rate=rate, label=label, speaker_id=speaker)


def load_wav_corpus(manifest_path, class_names: list[str]) -> list[LabeledClip]:
    manifest_path = Path(manifest_path)
    manifest = load_manifest(manifest_path, class_names)
    base = manifest_path.parent
    return [ingest_wav(base / rel, manifest, base_dir=base) for rel in manifest]


# -- corpus cache (same binary container as model checkpoints) ----------------


def save_corpus_cache(path, corpus: list[LabeledClip]) -> None:
    speakers = sorted({c.speaker_id for c in corpus})
    spk_index = {s: i for i, s in enumerate(speakers)}
    tensors: dict[str, np.ndarray] = {
        "meta.speaker_names": np.frombuffer("\n".join(speakers).encode("utf-8"), dtype=np.uint8).astype(np.float32),
        "meta.labels": np.array([c.label for c in corpus], dtype=np.float32),
        "meta.speakers": np.array([spk_index[c.speaker_id] for c in corpus], dtype=np.float32),
        "meta.rates": np.array([c.sample_rate for c in corpus], dtype=np.float32),
    }
    for i, clip in enumerate(corpus):
        tensors[f"clip.{i:06d}"] = clip.samples
    ckpt.write_tensor_file(path, tensors, ckpt.arch_hash({"corpus_cache": 1}))


def load_corpus_cache(path) -> list[LabeledClip]:
    _, architecture, table = ckpt.read_tensor_file(path)
    if architecture != ckpt.arch_hash({"corpus_cache": 1}):
        raise DataError(f"{path}: not a corpus cache")
    names = bytes(table["meta.speaker_names"].astype(np.uint8)).decode("utf-8").split("\n")
    labels = table["meta.labels"].astype(np.int64)
    spk = table["meta.speakers"].astype(np.int64)
    rates = table["meta.rates"].astype(np.int64)
    clips = []
    for i in range(len(labels)):
        clips.append(
            LabeledClip(
                samples=table[f"clip.{i:06d}"],
                sample_rate=int(rates[i]),
                label=int(labels[i]),
                speaker_id=names[spk[i]],
            )
        )
    return clips


# -- batching ------------------------------------------------------------------


def as_arrays(clips: list[LabeledClip], expected_rate: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Stack clips into (X, y); ragged clips are right-padded with zeros.

    Rejects clips whose sample rate disagrees with ``expected_rate`` (or
    with each other): the engine never resamples silently.
    """
    if not clips:
        raise DataError("empty clip list")
    rates = {c.sample_rate for c in clips}
    if expected_rate is not None:
        rates.add(expected_rate)
    if len(rates) != 1:
        raise DataError(f"sample-rate mismatch at model input: {sorted(rates)}")
    longest = max(len(c.samples) for c in clips)
    x = np.zeros((len(clips), longest), dtype=np.float32)
    for i, c in enumerate(clips):
        x[i, : len(c.samples)] = c.samples
    y = np.array([c.label for c in clips], dtype=np.int64)
    return x, y


def batches(clips: list[LabeledClip], batch_size: int, rng: np.random.Generator | None = None):
    """Yield clip batches; a generator shuffles the order, None keeps it."""
    if batch_size < 1:
        raise ConfigError("batch_size must be >= 1")
    order = np.arange(len(clips))
    if rng is not None:
        order = rng.permutation(len(clips))
    for start in range(0, len(clips), batch_size):
        yield [clips[i] for i in order[start : start + batch_size]]


# -- a deliberately-simple reference classifier --------------------------------


def spectral_centroid_baseline(train: list[LabeledClip], test: list[LabeledClip], bins: int = 24):
    """Nearest-centroid classifier on log-spaced magnitude-spectrum histograms.

    Exists to calibrate corpus difficulty: it should clearly beat chance on
    the default corpus without solving it.
    """

    def features(clip: LabeledClip) -> np.ndarray:
        mag = np.abs(np.fft.rfft(clip.samples))
        edges = np.unique(np.geomspace(1, len(mag) - 1, bins + 1).astype(int))
        hist = np.array([mag[a:b].sum() for a, b in zip(edges[:-1], edges[1:])])
        total = hist.sum()
        return hist / total if total > 0 else hist

    classes = sorted({c.label for c in train})
    centroids = {}
    for cls in classes:
        feats = np.stack([features(c) for c in train if c.label == cls])
        centroids[cls] = feats.mean(axis=0)
    preds = []
    for clip in test:
        f = features(clip)
        preds.append(min(classes, key=lambda cls: float(((f - centroids[cls]) ** 2).sum())))
    return np.array([c.label for c in test]), np.array(preds)
