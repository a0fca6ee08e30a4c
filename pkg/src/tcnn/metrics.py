"""Evaluation protocols: accuracy, per-song aggregation, multi-label P/R/F1, tag AUC."""
from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata


@dataclass
class EvalResult:
    task: str
    metrics: dict[str, float]
    per_label: list[dict] = field(default_factory=list)
    excluded: list[str] = field(default_factory=list)

    def to_dict(self):
        return {"task": self.task, "metrics": self.metrics, "per_label": self.per_label,
                "excluded": self.excluded}


def accuracy(predictions, truths) -> float:
    p = np.asarray(predictions)
    t = np.asarray(truths)
    if p.shape != t.shape:
        raise ValueError("predictions and truths differ in length")
    if p.size == 0:
        raise ValueError("accuracy of an empty set is undefined")
    return float(np.mean(p == t))


def aggregate_song(outputs, song_ids):
    """Mean output vector per song, in first-appearance order of song ids."""
    outputs = np.asarray(outputs, dtype=np.float64)
    groups: OrderedDict[str, list[int]] = OrderedDict()
    for i, sid in enumerate(song_ids):
        groups.setdefault(sid, []).append(i)
    songs = list(groups)
    means = np.stack([outputs[idx].mean(axis=0) for idx in groups.values()]) if songs \
        else np.zeros((0,) + outputs.shape[1:])
    return songs, means


def _safe_div(num, den):
    num = np.asarray(num, dtype=np.float64)
    den = np.asarray(den, dtype=np.float64)
    return np.divide(num, den, out=np.zeros_like(num), where=den > 0)


def _f1(p, r):
    return _safe_div(2 * p * r, p + r)


def prf_multilabel(scores, truths, threshold=0.2, labels=None) -> EvalResult:
    """Micro and macro precision/recall/F1 after thresholding; 0 where undefined."""
    if not 0 < threshold < 1:
        raise ValueError("threshold must lie in (0, 1)")
    pred = np.asarray(scores) >= threshold
    true = np.asarray(truths).astype(bool)
    tp = (pred & true).sum(axis=0)
    fp = (pred & ~true).sum(axis=0)
    fn = (~pred & true).sum(axis=0)

    micro_p = float(_safe_div(tp.sum(), tp.sum() + fp.sum()))
    micro_r = float(_safe_div(tp.sum(), tp.sum() + fn.sum()))
    per_p = _safe_div(tp, tp + fp)
    per_r = _safe_div(tp, tp + fn)
    per_f = _f1(per_p, per_r)
    metrics = {
        "micro_precision": micro_p,
        "micro_recall": micro_r,
        "micro_f1": float(_f1(micro_p, micro_r)),
        "macro_precision": float(per_p.mean()),
        "macro_recall": float(per_r.mean()),
        "macro_f1": float(per_f.mean()),
    }
    names = labels if labels is not None else [str(i) for i in range(true.shape[1])]
    per_label = [{"label": n, "precision": float(p), "recall": float(r), "f1": float(f),
                  "support": int(s)}
                 for n, p, r, f, s in zip(names, per_p, per_r, per_f, true.sum(axis=0))]
    return EvalResult("multi_label_prf", metrics, per_label)


def auc_binary(scores, truths) -> float:
    """ROC AUC through the Mann-Whitney rank statistic; ties count one half."""
    scores = np.asarray(scores, dtype=np.float64)
    truths = np.asarray(truths).astype(bool)
    n_pos = int(truths.sum())
    n_neg = truths.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC needs at least one positive and one negative")
    ranks = rankdata(scores)  # average ranks resolve ties
    return float((ranks[truths].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def auc_per_tag(scores, truths, labels=None) -> EvalResult:
    scores = np.asarray(scores, dtype=np.float64)
    truths = np.asarray(truths).astype(bool)
    names = labels if labels is not None else [str(i) for i in range(truths.shape[1])]
    per_tag, excluded = [], []
    for k, name in enumerate(names):
        col = truths[:, k]
        if col.all() or not col.any():
            excluded.append(name)
            continue
        per_tag.append({"label": name, "auc": auc_binary(scores[:, k], col),
                        "positives": int(col.sum())})
    if not per_tag:
        raise ValueError("no tag has both positive and negative examples")
    mean = float(np.mean([r["auc"] for r in per_tag]))
    return EvalResult("auc", {"auc": mean, "n_scored_tags": len(per_tag)}, per_tag, excluded)
