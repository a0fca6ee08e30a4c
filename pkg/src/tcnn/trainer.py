"""Mini-batch SGD with best-on-validation selection, and checkpoint files.

Checkpoint layout: ``TCKP``, a little-endian u32 header length, a UTF-8 JSON
header (architecture, metadata, tensor directory with byte offsets and a CRC32
of the payload), then the concatenated little-endian tensor payloads.
"""
from __future__ import annotations

import json
import math
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import nn
from .archzoo import ArchSpec, param_count
from .audio import NormStats, fit_norm_stats
from .metrics import aggregate_song, auc_per_tag, prf_multilabel
from .model import Network

CKPT_MAGIC = b"TCKP"
CKPT_VERSION = 1
METRICS = ("accuracy", "f1_micro", "auc")
DEFAULT_METRIC = {"phoneme_single": "accuracy", "mlp_baseline": "accuracy",
                  "irmas_single": "f1_micro", "irmas_multi": "f1_micro",
                  "mtt_proposed": "auc", "mtt_small_rect": "auc"}


class CheckpointError(ValueError):
    pass


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 100
    sgd: nn.SgdConfig = field(default_factory=nn.SgdConfig)
    early_stop_patience: int = 10
    eval_metric: str = "accuracy"
    data_init: bool = True  # centre pooled features and start output biases at the prior
    init_batch: int = 64

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.early_stop_patience < 1:
            raise ValueError("early_stop_patience must be >= 1")
        if self.eval_metric not in METRICS:
            raise ValueError(f"eval_metric must be one of {METRICS}")


@dataclass
class Dataset:
    """Excerpts (K x M x N, not yet normalised) with training targets.

    ``truths`` are the evaluation labels (multi-hot for tagging and for the
    multi-instrument test set); they default to ``targets``.
    """
    X: np.ndarray
    targets: np.ndarray
    song_ids: list[str] | None = None
    truths: np.ndarray | None = None

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.float32)
        self.targets = np.asarray(self.targets, dtype=np.float32)
        if self.truths is None:
            self.truths = self.targets
        if len(self.X) != len(self.targets):
            raise ValueError("X and targets differ in length")

    def __len__(self):
        return len(self.X)


@dataclass
class Checkpoint:
    arch: ArchSpec
    norm_stats: NormStats
    tensors: dict[str, np.ndarray]
    meta: dict = field(default_factory=dict)

    def network(self) -> Network:
        net = Network(self.arch, seed=self.meta.get("seed", 0))
        net.load_tensors(self.tensors)
        return net


def normalize_batch(X, stats: NormStats) -> np.ndarray:
    mean = stats.mean.astype(np.float32)[:, None]
    std = stats.std.astype(np.float32)[:, None]
    return (np.asarray(X, dtype=np.float32) - mean) / std


def score_outputs(probs, truths, metric, song_ids=None) -> float:
    if metric == "accuracy":
        return float(np.mean(np.argmax(probs, axis=1) == np.argmax(truths, axis=1)))
    if song_ids is not None:
        _, probs = aggregate_song(probs, song_ids)
        _, truths = aggregate_song(truths, song_ids)
        truths = truths > 0.5
    if metric == "f1_micro":
        return prf_multilabel(probs, truths, 0.2).metrics["micro_f1"]
    return auc_per_tag(probs, truths).metrics["auc"]


def train(spec: ArchSpec, train_data: Dataset, val_data: Dataset, cfg: TrainConfig,
          norm_stats: NormStats | None = None,
          log: Callable[[dict], None] | None = None) -> Checkpoint:
    """Train from He initialisation and return the best-on-validation checkpoint.

    Ties in the validation score keep the earlier epoch. Training stops once
    ``early_stop_patience`` epochs pass without improvement.
    """
    if len(train_data) == 0 or len(val_data) == 0:
        raise ValueError("training and validation sets must be non-empty")
    seed = cfg.sgd.seed
    if norm_stats is None:
        norm_stats = fit_norm_stats(list(train_data.X))
    Xtr = normalize_batch(train_data.X, norm_stats)
    Xva = normalize_batch(val_data.X, norm_stats)

    net = Network(spec, seed=seed)
    if cfg.data_init:
        n = min(cfg.init_batch, len(Xtr))
        net.init_from_data(Xtr[:n], train_data.targets)
    params, grads, decay = net.trainable()
    shuffle = nn.make_rng(seed, nn.STREAM_SHUFFLE)
    bs = cfg.sgd.batch_size

    best_score, best_epoch, best_state = -math.inf, 0, None
    history = []
    for epoch in range(1, cfg.epochs + 1):
        order = shuffle.permutation(len(Xtr))
        total = 0.0
        for start in range(0, len(order), bs):
            idx = order[start:start + bs]
            net.zero_grad()
            logits = net.forward(Xtr[idx], train=True)
            loss, dlogits = net.loss(logits, train_data.targets[idx])
            if not np.isfinite(loss):
                raise TrainingDiverged(
                    f"non-finite loss {loss} at epoch {epoch}, batch {start // bs}; "
                    "lower the learning rate")
            net.backward(dlogits)
            nn.sgd_step(params, grads, cfg.sgd, decay)
            total += loss * len(idx)

        score = score_outputs(net.predict(Xva), val_data.truths, cfg.eval_metric,
                              val_data.song_ids)
        record = {"epoch": epoch, "loss": total / len(Xtr), cfg.eval_metric: score}
        history.append(record)
        if log is not None:
            log(record)
        if score > best_score:
            best_score, best_epoch = score, epoch
            best_state = {k: v.copy() for k, v in net.state_tensors()}
        elif epoch - best_epoch >= cfg.early_stop_patience:
            break

    meta = {"seed": seed, "epoch": best_epoch, "val_score": best_score,
            "eval_metric": cfg.eval_metric, "epochs_run": len(history),
            "history": history}
    return Checkpoint(spec, norm_stats, best_state, meta)


def predict(checkpoint: Checkpoint, excerpts, batch_size=64) -> np.ndarray:
    """Softmax probabilities or sigmoid activations for raw (unnormalised) excerpts."""
    X = np.asarray(excerpts, dtype=np.float32)
    if X.ndim == 2:
        X = X[None]
    if X.shape[1:] != tuple(checkpoint.arch.input_shape):
        raise nn.ShapeError(
            f"excerpt shape {X.shape[1:]} does not match architecture input "
            f"{tuple(checkpoint.arch.input_shape)}")
    return checkpoint.network().predict(normalize_batch(X, checkpoint.norm_stats), batch_size)


# --- serialisation ---------------------------------------------------------------

def checkpoint_bytes(ckpt: Checkpoint) -> bytes:
    blobs, directory = [], []
    offset = 0

    def add(name, arr, kind, dtype):
        nonlocal offset
        data = np.ascontiguousarray(arr, dtype=dtype).tobytes()
        directory.append({"name": name, "kind": kind, "dtype": np.dtype(dtype).str,
                          "shape": list(np.shape(arr)), "offset": offset, "nbytes": len(data)})
        blobs.append(data)
        offset += len(data)

    for name, arr in ckpt.tensors.items():
        add(name, arr, "param", "<f4")
    add("norm.mean", ckpt.norm_stats.mean, "norm", "<f8")
    add("norm.std", ckpt.norm_stats.std, "norm", "<f8")
    payload = b"".join(blobs)
    header = {"version": CKPT_VERSION, "arch": ckpt.arch.to_dict(), "meta": ckpt.meta,
              "tensors": directory, "payload_bytes": len(payload),
              "crc32": zlib.crc32(payload)}
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    return CKPT_MAGIC + struct.pack("<I", len(head)) + head + payload


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    Path(path).write_bytes(checkpoint_bytes(ckpt))


def parse_checkpoint(raw: bytes, name="<bytes>") -> Checkpoint:
    if raw[:4] != CKPT_MAGIC:
        raise CheckpointError(f"{name}: not a checkpoint (bad magic)")
    if len(raw) < 8:
        raise CheckpointError(f"{name}: truncated header")
    (hlen,) = struct.unpack_from("<I", raw, 4)
    try:
        header = json.loads(raw[8:8 + hlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError):
        raise CheckpointError(f"{name}: corrupted header") from None
    payload = raw[8 + hlen:]
    if len(payload) != header["payload_bytes"]:
        raise CheckpointError(
            f"{name}: payload has {len(payload)} bytes, header declares {header['payload_bytes']}")
    if zlib.crc32(payload) != header["crc32"]:
        raise CheckpointError(f"{name}: payload checksum mismatch")

    arch = ArchSpec.from_dict(header["arch"])
    tensors, norm = {}, {}
    for entry in header["tensors"]:
        chunk = payload[entry["offset"]:entry["offset"] + entry["nbytes"]]
        arr = np.frombuffer(chunk, dtype=entry["dtype"]).reshape(entry["shape"])
        if entry["kind"] == "param":
            tensors[entry["name"]] = arr.astype(np.float32)
        else:
            norm[entry["name"]] = arr.astype(np.float64)

    expected = dict(Network(arch).state_tensors())
    for tname, arr in tensors.items():
        if tname not in expected:
            raise CheckpointError(f"{name}: tensor {tname!r} is not part of {arch.arch_id}")
        if expected[tname].shape != arr.shape:
            raise CheckpointError(
                f"{name}: tensor {tname!r} has shape {arr.shape}, "
                f"architecture expects {expected[tname].shape}")
    for tname in expected:
        if tname not in tensors:
            raise CheckpointError(f"{name}: tensor {tname!r} missing")
    total = sum(a.size for a in tensors.values())
    if total != param_count(arch):
        raise CheckpointError(f"{name}: {total} scalars, architecture declares {param_count(arch)}")
    stats = NormStats(norm["norm.mean"], norm["norm.std"])
    return Checkpoint(arch, stats, tensors, header["meta"])


def load_checkpoint(path) -> Checkpoint:
    return parse_checkpoint(Path(path).read_bytes(), str(path))
