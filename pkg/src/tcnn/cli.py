"""Command-line entry point: ``tcnn <subcommand> ...``.

Exit codes: 0 success, 1 verification failure, 2 usage error, 3 I/O error.
Machine-readable output goes to stdout as JSON (or NDJSON for training logs);
human-readable tables go to stderr.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import archzoo, audio, dataio, metrics, nn, trainer
from .model import Network

EXIT_OK, EXIT_VERIFY, EXIT_USAGE, EXIT_IO = 0, 1, 2, 3

# smallest inputs that every pooling stage of each builder still accepts
GRADCHECK_INPUTS = {
    "phoneme_single": (80, 21),
    "irmas_single": (16, 16),
    "irmas_multi": (48, 64),
    "mtt_proposed": (128, 64),
    "mtt_small_rect": (128, 128),
    "mlp_baseline": (80, 21),
}


class UsageError(Exception):
    pass


def _emit(obj, stream=None):
    stream = stream or sys.stdout
    stream.write(json.dumps(obj, sort_keys=True) + "\n")
    stream.flush()


# --- featurize -------------------------------------------------------------------

def _featurize_one(job):
    ex_id, path, profile, cache_dir = job
    try:
        spec = audio.featurize(path, profile)
        out = Path(cache_dir) / dataio.cache_filename(ex_id)
        dataio.cache_write(out, spec)
        return ex_id, str(out), None
    except (OSError, ValueError) as err:
        return ex_id, None, f"{type(err).__name__}: {err}"


def cmd_featurize(args) -> int:
    examples, _ = dataio.load_manifest(args.manifest)
    cache_dir = Path(args.cache_dir)
    cache_dir.mkdir(parents=True, exist_ok=True)
    base = Path(args.manifest).parent
    jobs = [(ex.id, str(base / ex.audio_path), args.profile, str(cache_dir)) for ex in examples]
    if args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            results = list(pool.map(_featurize_one, jobs))
    else:
        results = [_featurize_one(j) for j in jobs]
    failures = [{"id": i, "error": e} for i, _, e in results if e]
    _emit({"profile": args.profile, "n_examples": len(jobs),
           "written": len(jobs) - len(failures), "failures": failures})
    return EXIT_VERIFY if failures and args.strict else EXIT_OK


# --- describe --------------------------------------------------------------------

def format_card(card) -> str:
    lines = [f"{card['arch_id']} (widen x{card['widen_factor']}), "
             f"input {card['input_shape'][0]}x{card['input_shape'][1]}"]
    for row in card["layers"]:
        shape = "x".join(str(s) for s in row["shape"])
        lines.append(f"  {row['layer']:<14} {row['type']:<8} {shape:<16} {row['params']:>10,}")
    lines.append(f"  total parameters: {card['param_count']:,}")
    if card.get("reference_params"):
        lines.append(f"  table value: {card['reference_params']:,} "
                     f"(deviation {100 * card['deviation']:+.2f}%)")
    if card.get("note"):
        lines.append(f"  note: {card['note']}")
    return "\n".join(lines) + "\n"


def cmd_describe(args) -> int:
    spec = archzoo.build(args.arch, args.widen)
    card = archzoo.describe(spec)
    card["table"] = format_card(card)
    sys.stderr.write(card["table"])
    _emit(card)
    return EXIT_VERIFY if card.get("within_tolerance") is False else EXIT_OK


# --- shared data preparation -------------------------------------------------------

def _load_config(args) -> dict:
    cfg = {}
    if getattr(args, "config", None):
        try:
            cfg = json.loads(Path(args.config).read_text())
        except json.JSONDecodeError as err:
            raise UsageError(f"config {args.config}: {err}") from None
    for key in ("arch", "widen", "epochs", "learning_rate", "weight_decay", "batch_size",
                "patience", "eval_metric", "seed", "train_policy", "data_init"):
        val = getattr(args, key, None)
        if val is not None:
            cfg[key] = val
    if "seed" not in cfg:
        cfg["seed"] = int(os.environ.get("TCNN_SEED", "0"))
    return cfg


def _windows(spec, ex, target, policy):
    if ex.offset is not None:
        center = int(round(ex.offset * spec.sample_rate / spec.hop))
        return [dataio.slice_excerpt(spec.values, target, center_frame=center)]
    if policy == "tile":
        return dataio.slice_excerpt(spec.values, target, "tile")
    return [dataio.slice_excerpt(spec.values, target, "center")]


def _read_features(examples, cache_dir, n_mels):
    feats = {}
    for ex in examples:
        spec = dataio.cache_read(Path(cache_dir) / dataio.cache_filename(ex.id))
        if spec.n_mels != n_mels:
            raise UsageError(f"{ex.id}: cached features have {spec.n_mels} mel bins, "
                             f"architecture expects {n_mels}")
        feats[ex.id] = spec
    return feats


def _build_dataset(examples, feats, vocab, arch, policy, single_targets):
    M, N = arch.input_shape
    multi = dataio.LabelVocab(vocab.labels, "multi_label")
    single = dataio.LabelVocab(vocab.labels, "single_label")
    X, T, truths, songs = [], [], [], []
    for ex in examples:
        truth = dataio.encode_labels(ex.labels, multi)
        target = dataio.encode_labels(ex.labels, single) if single_targets else truth
        for w in _windows(feats[ex.id], ex, N, policy):
            X.append(w)
            T.append(target)
            truths.append(truth)
            songs.append(ex.song_id)
    n_out = len(vocab)
    return trainer.Dataset(np.stack(X) if X else np.zeros((0, M, N)),
                           np.stack(T) if T else np.zeros((0, n_out)),
                           songs, np.stack(truths) if truths else np.zeros((0, n_out)))


# --- train -----------------------------------------------------------------------

def cmd_train(args) -> int:
    cfg = _load_config(args)
    for key in ("arch",):
        if key not in cfg:
            raise UsageError(f"--{key} is required (flag or config file)")
    epochs = int(cfg.get("epochs", 100))
    if epochs < 1:
        raise UsageError("--epochs must be >= 1")
    seed = int(cfg["seed"])
    metric = cfg.get("eval_metric", trainer.DEFAULT_METRIC[cfg["arch"]])

    examples, vocab = dataio.load_manifest(args.manifest)
    if any(ex.split == "unassigned" for ex in examples):
        examples = dataio.random_split(examples, seed=seed)
    kwargs = {"n_tags" if cfg["arch"].startswith("mtt") else "n_classes": len(vocab)}
    arch = archzoo.build(cfg["arch"], int(cfg.get("widen", 1)), **kwargs)

    feats = _read_features(examples, args.cache_dir, arch.input_shape[0])
    single = arch.loss_kind == "softmax"
    train_ex = [ex for ex in examples if ex.split == "train"]
    val_ex = [ex for ex in examples if ex.split == "val"]
    if not train_ex or not val_ex:
        raise UsageError("manifest needs non-empty train and val splits")
    policy = cfg.get("train_policy", "center")
    train_set = _build_dataset(train_ex, feats, vocab, arch, policy, single)
    val_set = _build_dataset(val_ex, feats, vocab, arch,
                             "center" if metric == "accuracy" else "tile", single)
    if metric == "accuracy":
        val_set.song_ids = None
    stats = audio.fit_norm_stats([feats[ex.id] for ex in train_ex])

    tcfg = trainer.TrainConfig(
        epochs=epochs,
        sgd=nn.SgdConfig(float(cfg.get("learning_rate", 0.01)),
                         float(cfg.get("weight_decay", 1e-4)),
                         int(cfg.get("batch_size", 32)), seed),
        early_stop_patience=int(cfg.get("patience", 10)),
        eval_metric=metric,
        data_init=bool(cfg.get("data_init", True)))
    ckpt = trainer.train(arch, train_set, val_set, tcfg, stats,
                         log=lambda rec: _emit(dict(rec, event="epoch")))
    ckpt.meta["labels"] = vocab.labels
    ckpt.meta["split_seed"] = seed
    trainer.save_checkpoint(args.out, ckpt)
    _emit({"event": "done", "checkpoint": str(args.out), "epoch": ckpt.meta["epoch"],
           "val_score": ckpt.meta["val_score"], "eval_metric": metric})
    return EXIT_OK


# --- evaluate --------------------------------------------------------------------

def evaluate_checkpoint(ckpt, examples, feats) -> metrics.EvalResult:
    labels = ckpt.meta.get("labels")
    if labels is None:
        raise UsageError("checkpoint carries no label vocabulary")
    vocab = dataio.LabelVocab(labels, "multi_label")
    metric = ckpt.meta.get("eval_metric", trainer.DEFAULT_METRIC[ckpt.arch.arch_id])
    policy = "center" if metric == "accuracy" else "tile"
    data = _build_dataset(examples, feats, vocab, ckpt.arch, policy, single_targets=False)
    probs = trainer.predict(ckpt, data.X)
    if metric == "accuracy":
        acc = metrics.accuracy(probs.argmax(axis=1), data.truths.argmax(axis=1))
        return metrics.EvalResult("accuracy", {"accuracy": acc})
    songs, song_probs = metrics.aggregate_song(probs, data.song_ids)
    _, song_truths = metrics.aggregate_song(data.truths, data.song_ids)
    if metric == "f1_micro":
        return metrics.prf_multilabel(song_probs, song_truths > 0.5, 0.2, labels)
    return metrics.auc_per_tag(song_probs, song_truths > 0.5, labels)


def cmd_evaluate(args) -> int:
    ckpt = trainer.load_checkpoint(args.checkpoint)
    examples, _ = dataio.load_manifest(args.manifest)
    chosen = [ex for ex in examples if ex.split == args.split]
    if not chosen:
        split_seed = ckpt.meta.get("split_seed")
        if split_seed is not None and any(ex.split == "unassigned" for ex in examples):
            chosen = [ex for ex in dataio.random_split(examples, seed=split_seed)
                      if ex.split == args.split]
    if not chosen:
        raise UsageError(f"no examples in split {args.split!r}")
    feats = _read_features(chosen, args.cache_dir, ckpt.arch.input_shape[0])
    result = evaluate_checkpoint(ckpt, chosen, feats)
    out = result.to_dict()
    out["split"] = args.split
    out["n_examples"] = len(chosen)
    _emit(out)
    return EXIT_OK


# --- gradcheck -------------------------------------------------------------------

def gradcheck_arch(arch_id, tolerance=1e-4, samples=6, seed=0, widen=1):
    kwargs = {"input_shape": GRADCHECK_INPUTS[arch_id]}
    spec = archzoo.build(arch_id, widen, **kwargs)
    net = Network(spec, seed=seed, dtype=np.float64)
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((2,) + tuple(spec.input_shape))
    K = spec.n_outputs
    if spec.loss_kind == "softmax":
        y = np.eye(K)[rng.integers(0, K, 2)]
    else:
        y = (rng.random((2, K)) < 0.3).astype(np.float64)
    return nn.gradcheck(net, x, y, tolerance=tolerance, max_per_tensor=samples, seed=seed)


def cmd_gradcheck(args) -> int:
    arch_ids = archzoo.ARCH_IDS if args.arch == "all" else [args.arch]
    ok = True
    for arch_id in arch_ids:
        report = gradcheck_arch(arch_id, args.tolerance, args.samples, args.seed)
        ok &= report.passed
        for row in report.rows:
            sys.stderr.write(f"{arch_id:<16} {row.layer:<12} {row.n_checked:>5} "
                             f"{row.max_rel_error:.3e} {row.n_kinks:>3} {'ok' if row.passed else 'FAIL'}\n")
        _emit(dict(report.to_dict(), arch=arch_id,
                   input_shape=list(GRADCHECK_INPUTS[arch_id])))
    return EXIT_OK if ok else EXIT_VERIFY


# --- export-filters ----------------------------------------------------------------

def pgm_bytes(img: np.ndarray) -> bytes:
    """Binary greyscale PGM of a 2-D array, min-max scaled to 0..255."""
    img = np.asarray(img, dtype=np.float64)
    lo, hi = img.min(), img.max()
    if hi > lo:
        scaled = np.round(255 * (img - lo) / (hi - lo))
    else:
        scaled = np.full(img.shape, 128.0)
    h, w = img.shape
    return f"P5\n{w} {h}\n255\n".encode() + scaled.astype(np.uint8).tobytes()


def export_filters(ckpt, layer, out_dir) -> list[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    names = sorted(k[:-2] for k in ckpt.tensors if k.endswith(".W") and ".conv" in k)
    if layer == "first":
        chosen = [n for n in names if n.startswith("b")]
    elif layer in names:
        chosen = [layer]
    else:
        raise UsageError(f"layer {layer!r} has no filters; choose from {names + ['first']}")
    written = []
    for name in chosen:
        W = ckpt.tensors[name + ".W"]
        stem = name.replace(".", "_")
        for f in range(W.shape[0]):
            for c in range(W.shape[1]):
                suffix = f"_c{c:03d}" if W.shape[1] > 1 else ""
                path = out_dir / f"{stem}_f{f:03d}{suffix}.pgm"
                # low mel bins at the bottom, as in a spectrogram plot
                path.write_bytes(pgm_bytes(W[f, c][::-1]))
                written.append(path)
    return written


def cmd_export_filters(args) -> int:
    ckpt = trainer.load_checkpoint(args.checkpoint)
    written = export_filters(ckpt, args.layer, args.out_dir)
    _emit({"layer": args.layer, "n_files": len(written), "out_dir": str(args.out_dir)})
    return EXIT_OK


# --- parser ----------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="tcnn", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    f = sub.add_parser("featurize", help="compute log-mel cache files for a manifest")
    f.add_argument("--manifest", required=True)
    f.add_argument("--profile", required=True, choices=sorted(audio.PROFILES))
    f.add_argument("--cache-dir", required=True)
    f.add_argument("--jobs", type=int, default=1)
    f.add_argument("--strict", action="store_true", help="exit 1 if any file fails")
    f.set_defaults(func=cmd_featurize)

    d = sub.add_parser("describe", help="architecture card with parameter count")
    d.add_argument("--arch", required=True, choices=archzoo.ARCH_IDS)
    d.add_argument("--widen", type=int, default=1, choices=(1, 2, 4))
    d.set_defaults(func=cmd_describe)

    t = sub.add_parser("train", help="train a model on cached features")
    t.add_argument("--manifest", required=True)
    t.add_argument("--cache-dir", required=True)
    t.add_argument("--arch", choices=archzoo.ARCH_IDS)
    t.add_argument("--widen", type=int, choices=(1, 2, 4))
    t.add_argument("--config")
    t.add_argument("--seed", type=int)
    t.add_argument("--out", required=True)
    t.add_argument("--epochs", type=int)
    t.add_argument("--learning-rate", dest="learning_rate", type=float)
    t.add_argument("--weight-decay", dest="weight_decay", type=float)
    t.add_argument("--batch-size", dest="batch_size", type=int)
    t.add_argument("--patience", type=int)
    t.add_argument("--eval-metric", dest="eval_metric", choices=trainer.METRICS)
    t.add_argument("--train-policy", dest="train_policy", choices=("center", "tile"))
    t.add_argument("--no-data-init", dest="data_init", action="store_const", const=False,
                   help="keep zero biases instead of centring them on a training batch")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("evaluate", help="score a checkpoint on a manifest split")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--manifest", required=True)
    e.add_argument("--cache-dir", required=True)
    e.add_argument("--split", default="test", choices=("train", "val", "test"))
    e.set_defaults(func=cmd_evaluate)

    g = sub.add_parser("gradcheck", help="finite-difference check of every builder")
    g.add_argument("--arch", default="all", choices=archzoo.ARCH_IDS + ("all",))
    g.add_argument("--tolerance", type=float, default=1e-4)
    g.add_argument("--samples", type=int, default=6, help="entries checked per tensor")
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(func=cmd_gradcheck)

    x = sub.add_parser("export-filters", help="write conv filters as PGM images")
    x.add_argument("--checkpoint", required=True)
    x.add_argument("--layer", default="first")
    x.add_argument("--out-dir", required=True)
    x.set_defaults(func=cmd_export_filters)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as err:
        sys.stderr.write(f"tcnn: usage error: {err}\n")
        return EXIT_USAGE
    except (OSError, dataio.CacheFormatError, trainer.CheckpointError,
            dataio.ManifestError, audio.AudioError) as err:
        sys.stderr.write(f"tcnn: {err}\n")
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
