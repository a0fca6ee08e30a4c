"""Dataset manifests, song-grouped splits, excerpt slicing, labels, feature cache.

Manifest format: one JSON object per line with ``id``, ``path``, ``labels``,
``song_id`` and optionally ``split`` and ``offset``. ``offset`` (seconds) marks
a frame-level example: its excerpt is centred on that instant instead of being
cropped from the whole recording.
"""
from __future__ import annotations

import json
import re
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .audio import Spectrogram

SPLITS = ("train", "val", "test", "unassigned")
CACHE_MAGIC = b"MELF"
CACHE_VERSION = 1
_HEADER = struct.Struct("<4s5I")


class ManifestError(ValueError):
    pass


class CacheFormatError(ValueError):
    pass


class CacheLengthError(CacheFormatError):
    pass


class CacheVersionError(CacheFormatError):
    pass


@dataclass
class ExampleRef:
    id: str
    audio_path: str
    labels: list[str]
    song_id: str
    split: str = "unassigned"
    offset: float | None = None

    def to_record(self) -> dict:
        rec = {"id": self.id, "path": self.audio_path, "labels": self.labels,
               "song_id": self.song_id, "split": self.split}
        if self.offset is not None:
            rec["offset"] = self.offset
        return rec


@dataclass
class LabelVocab:
    labels: list[str]
    task: str = "single_label"

    def __post_init__(self):
        if len(set(self.labels)) != len(self.labels):
            raise ValueError("duplicate labels in vocabulary")
        if self.task not in ("single_label", "multi_label"):
            raise ValueError(f"unknown task {self.task!r}")
        self._index = {name: i for i, name in enumerate(self.labels)}

    def __len__(self):
        return len(self.labels)

    def index(self, label: str) -> int:
        try:
            return self._index[label]
        except KeyError:
            raise KeyError(f"label {label!r} is not in the vocabulary") from None


def load_manifest(path, vocab_path=None, task="single_label"):
    """Parse an NDJSON manifest; returns (examples, vocab).

    The vocabulary follows first appearance in the manifest unless
    ``vocab_path`` names a file with one label per line.
    """
    examples: list[ExampleRef] = []
    seen: set[str] = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                ex = ExampleRef(
                    id=str(rec["id"]), audio_path=str(rec["path"]),
                    labels=[str(x) for x in rec["labels"]], song_id=str(rec["song_id"]),
                    split=rec.get("split", "unassigned"),
                    offset=None if rec.get("offset") is None else float(rec["offset"]))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as err:
                raise ManifestError(f"{path}:{lineno}: malformed record ({err})") from None
            if not isinstance(rec["labels"], list):
                raise ManifestError(f"{path}:{lineno}: labels must be a list")
            if ex.split not in SPLITS:
                raise ManifestError(f"{path}:{lineno}: unknown split {ex.split!r}")
            if ex.id in seen:
                raise ManifestError(f"{path}:{lineno}: duplicate id {ex.id!r}")
            if ex.split == "train" and not ex.labels:
                raise ManifestError(f"{path}:{lineno}: training example {ex.id!r} has no labels")
            seen.add(ex.id)
            examples.append(ex)

    if vocab_path is not None:
        labels = [ln.strip() for ln in Path(vocab_path).read_text().splitlines() if ln.strip()]
    else:
        labels = []
        for ex in examples:
            for lab in ex.labels:
                if lab not in labels:
                    labels.append(lab)
    return examples, LabelVocab(labels, task)


def write_manifest(path, examples) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for ex in examples:
            fh.write(json.dumps(ex.to_record(), sort_keys=True) + "\n")


def random_split(examples, fractions=(0.6, 0.2, 0.2), seed=0):
    """Assign train/val/test by song: shuffle song ids with ``seed``, cut contiguously."""
    if len(fractions) != 3 or abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError("fractions must be three values summing to 1")
    songs = sorted({ex.song_id for ex in examples})
    if len(songs) < 3:
        raise ValueError(f"need at least 3 songs to split, got {len(songs)}")
    order = np.random.default_rng(seed).permutation(len(songs))
    shuffled = [songs[i] for i in order]
    n_train = int(round(fractions[0] * len(songs)))
    n_val = int(round(fractions[1] * len(songs)))
    n_train = min(max(n_train, 1), len(songs) - 2)
    n_val = min(max(n_val, 1), len(songs) - n_train - 1)
    assign = {}
    for i, sid in enumerate(shuffled):
        assign[sid] = "train" if i < n_train else "val" if i < n_train + n_val else "test"
    return [ExampleRef(ex.id, ex.audio_path, ex.labels, ex.song_id, assign[ex.song_id], ex.offset)
            for ex in examples]


# --- excerpts ------------------------------------------------------------------

def _fit_length(values, target):
    """Symmetric zero padding up to ``target`` frames (extra frame goes last)."""
    short = target - values.shape[1]
    if short <= 0:
        return values
    lead = short // 2
    return np.pad(values, ((0, 0), (lead, short - lead)))


def slice_excerpt(spec, target_frames, policy="center", seed=None, center_frame=None):
    """Crop a spectrogram grid to ``target_frames`` columns.

    ``center`` takes the middle crop, ``random`` a uniformly placed one, and
    ``tile`` returns every consecutive non-overlapping window (the last one zero
    padded) as a list. ``center_frame`` centres a single window on that column,
    zero padding past either edge.
    """
    if target_frames < 1:
        raise ValueError("target_frames must be >= 1")
    values = spec.values if isinstance(spec, Spectrogram) else np.asarray(spec)
    wrap = (lambda v: Spectrogram(v, spec.sample_rate, spec.hop)) \
        if isinstance(spec, Spectrogram) else (lambda v: v)

    if center_frame is not None:
        start = int(center_frame) - target_frames // 2
        lo, hi = max(start, 0), min(start + target_frames, values.shape[1])
        out = np.zeros((values.shape[0], target_frames), dtype=values.dtype)
        if hi > lo:
            out[:, lo - start:hi - start] = values[:, lo:hi]
        return wrap(out)

    if policy == "tile":
        n = values.shape[1]
        if n <= target_frames:
            return [wrap(_fit_length(values, target_frames))]
        count = -(-n // target_frames)
        padded = np.pad(values, ((0, 0), (0, count * target_frames - n)))
        return [wrap(padded[:, i * target_frames:(i + 1) * target_frames]) for i in range(count)]

    values = _fit_length(values, target_frames)
    spare = values.shape[1] - target_frames
    if policy == "center":
        start = spare // 2
    elif policy == "random":
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        start = int(rng.integers(0, spare + 1))
    else:
        raise ValueError(f"unknown slicing policy {policy!r}")
    return wrap(values[:, start:start + target_frames])


def encode_labels(labels, vocab: LabelVocab) -> np.ndarray:
    target = np.zeros(len(vocab), dtype=np.float32)
    if vocab.task == "single_label" and len(labels) != 1:
        raise ValueError(f"single-label task needs exactly one label, got {list(labels)}")
    for lab in labels:
        target[vocab.index(lab)] = 1.0
    return target


# --- binary feature cache --------------------------------------------------------

def cache_filename(example_id: str) -> str:
    safe = re.sub(r"[^A-Za-z0-9._-]", "_", example_id)
    return f"{safe}.melf"


def cache_bytes(spec: Spectrogram) -> bytes:
    values = np.ascontiguousarray(spec.values, dtype="<f4")
    if not np.isfinite(values).all():
        raise ValueError("spectrogram contains non-finite values")
    m, n = values.shape
    return _HEADER.pack(CACHE_MAGIC, CACHE_VERSION, m, n, spec.sample_rate, spec.hop) + values.tobytes()


def cache_write(path, spec: Spectrogram) -> None:
    Path(path).write_bytes(cache_bytes(spec))


def cache_parse(raw: bytes, name="<bytes>") -> Spectrogram:
    if len(raw) < _HEADER.size:
        raise CacheLengthError(f"{name}: header truncated")
    magic, version, m, n, sr, hop = _HEADER.unpack_from(raw)
    if magic != CACHE_MAGIC:
        raise CacheFormatError(f"{name}: bad magic {magic!r}")
    if version != CACHE_VERSION:
        raise CacheVersionError(f"{name}: unsupported cache version {version}")
    expected = m * n * 4
    payload = raw[_HEADER.size:]
    if len(payload) != expected:
        raise CacheLengthError(f"{name}: payload has {len(payload)} bytes, expected {expected}")
    values = np.frombuffer(payload, dtype="<f4").reshape(m, n).astype(np.float32)
    return Spectrogram(values, sr, hop)


def cache_read(path) -> Spectrogram:
    return cache_parse(Path(path).read_bytes(), str(path))
