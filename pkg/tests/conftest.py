import sys

import numpy as np
import pytest

from tcnn import dataio
from tcnn.audio import Spectrogram
from tcnn.dataio import ExampleRef

# (n_mels, n_frames, sample_rate, hop) per project kind
KINDS = {"phoneme": (80, 40, 44100, 441), "irmas": (96, 140, 12000, 256),
         "mtt": (128, 200, 16000, 256)}


def make_project(root, kind, seed=0):
    """Manifest plus cache files whose labels are visible as bright mel bands."""
    rng = np.random.default_rng(seed)
    M, N, sr, hop = KINDS[kind]
    labels = [f"c{k}" for k in range(4 if kind != "mtt" else 5)]
    band = M // len(labels)
    cache = root / "cache"
    cache.mkdir(parents=True, exist_ok=True)
    examples = []
    n_songs = 6 if kind != "mtt" else 5
    for k, lab in enumerate(labels):
        for s in range(n_songs):
            split = "train" if s < n_songs - 2 else "val" if s == n_songs - 2 else "test"
            if kind == "mtt":
                active = sorted({lab, labels[(k + 1 + s) % len(labels)]} if s % 2 else {lab})
            elif kind == "irmas" and split == "test":
                active = sorted({lab, labels[(k + 1) % len(labels)]})
            else:
                active = [lab]
            sid = f"{lab}_s{s}"
            values = 0.3 * rng.standard_normal((M, N))
            for a in active:
                j = labels.index(a)
                values[j * band:j * band + band // 2] += 3.0
            ex = ExampleRef(sid, f"audio/{sid}.wav", active, sid, split)
            dataio.cache_write(cache / dataio.cache_filename(ex.id),
                               Spectrogram(values.astype(np.float32), sr, hop))
            examples.append(ex)
    manifest = root / "manifest.ndjson"
    dataio.write_manifest(manifest, examples)
    return manifest, cache


@pytest.fixture
def project(tmp_path):
    return lambda kind, seed=0: make_project(tmp_path / kind, kind, seed)


def pytest_terminal_summary(terminalreporter):
    mod = next((m for name, m in sys.modules.items() if name.endswith("test_acceptance")), None)
    lines = getattr(mod, "LINES", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
