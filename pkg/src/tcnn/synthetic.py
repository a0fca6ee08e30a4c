"""Synthetic spectrogram datasets for desk-scale learning checks."""
from __future__ import annotations

import numpy as np


def tag_prototypes(n_tags, n_mels, rng, bumps=3, span=20):
    """Per-tag spectral envelopes: a compact cluster of Gaussian bumps.

    Each tag places ``bumps`` peaks inside a ``span``-bin band at a random
    position, so tags differ both in where they sit and in their local shape.
    """
    bins = np.arange(n_mels)[None, :]
    protos = np.zeros((n_tags, n_mels))
    start = rng.uniform(0, n_mels - span, size=(n_tags, 1))
    for _ in range(bumps):
        centers = start + rng.uniform(0, span, size=(n_tags, 1))
        widths = rng.uniform(1.0, 3.0, size=(n_tags, 1))
        protos += np.exp(-0.5 * ((bins - centers) / widths) ** 2)
    return protos


def tagging_set(n_examples, n_tags=50, shape=(128, 187), tag_prob=0.05, noise=0.3,
                seed=0, prototypes=None, gain_range=(0.5, 1.5)):
    """Multi-label spectrograms that are sums of active tag prototypes.

    Each active tag contributes its envelope with a random time-varying gain,
    so the tag is identifiable from the spectral shape alone. Returns
    ``(X, Y, prototypes)``; every example has at least one tag.
    """
    rng = np.random.default_rng(seed)
    M, N = shape
    if prototypes is None:
        prototypes = tag_prototypes(n_tags, M, np.random.default_rng(seed + 7919))
    Y = rng.random((n_examples, n_tags)) < tag_prob
    empty = ~Y.any(axis=1)
    Y[empty, rng.integers(0, n_tags, empty.sum())] = True
    X = np.empty((n_examples, M, N), dtype=np.float32)
    for i in range(n_examples):
        active = np.flatnonzero(Y[i])
        gains = rng.uniform(*gain_range, size=(len(active), N))
        X[i] = prototypes[active].T @ gains + noise * rng.standard_normal((M, N))
    return X, Y.astype(np.float32), prototypes


def memorization_set(n_examples=20, n_classes=4, shape=(80, 21), seed=0):
    """Pure-noise spectrograms with arbitrary class labels; only memorisable."""
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((n_examples,) + tuple(shape)).astype(np.float32)
    labels = np.arange(n_examples) % n_classes
    return X, np.eye(n_classes, dtype=np.float32)[labels]


def memorization_arch(n_classes=4, shape=(80, 21), filters=64):
    """Phoneme-style single-branch softmax net (50x1 filters, MP(2, full time))."""
    from .archzoo import ArchSpec, BranchSpec
    from .nn import FULL
    return ArchSpec("memorize", tuple(shape), [BranchSpec(filters, 50, 1, 2, FULL, pool_truncate=True)], "flatten",
                    [], {"activation": "softmax", "units": n_classes})
