"""Instantiate an ArchSpec as a trainable network of engine layers."""
from __future__ import annotations

import numpy as np

from . import nn
from .archzoo import ArchSpec, propagate_shapes


class Network:
    """Parallel first-layer branches, a merge, a trunk, and a dense output.

    Parameters are created in float32 by default; pass ``dtype=np.float64`` for
    gradient checking. Initialisation and dropout draw from independent streams
    of ``seed``.
    """

    def __init__(self, spec: ArchSpec, seed: int = 0, dtype=np.float32):
        propagate_shapes(spec)  # fail early on a malformed spec
        self.spec = spec
        self.dtype = np.dtype(dtype)
        init = nn.make_rng(seed, nn.STREAM_INIT)
        self.rng = nn.make_rng(seed, nn.STREAM_DROPOUT)

        self.branches: list[list[tuple[str, nn.Layer]]] = []
        for bi, b in enumerate(spec.branches):
            conv = nn.Conv2D(1, b.n_filters, b.filter_m, b.filter_n, b.padding, dtype, init)
            conv.need_input_grad = False
            layers = [(f"b{bi}.conv", conv)]
            if b.batch_norm:
                layers.append((f"b{bi}.bn", nn.BatchNorm(b.n_filters, dtype=dtype)))
            # ELU is strictly increasing, so pooling first is exact and cheaper
            layers.append((f"b{bi}.pool", nn.MaxPool2D(b.pool_m, b.pool_n, b.pool_truncate)))
            layers.append((f"b{bi}.elu", nn.ELU()))
            if b.dropout:
                layers.append((f"b{bi}.dropout", nn.Dropout(b.dropout, self.rng)))
            self.branches.append(layers)
        # branches sharing a filter height run their first conv as one GEMM
        groups: dict[tuple, list[int]] = {}
        for bi, b in enumerate(spec.branches):
            groups.setdefault((b.filter_m, b.padding), []).append(bi)
        self.conv_groups = list(groups.values())

        rows = {r["layer"]: r for r in propagate_shapes(spec)}
        shape = rows["merge"]["shape"] if spec.branches else (1,) + tuple(spec.input_shape)
        self.trunk: list[tuple[str, nn.Layer]] = []
        for li, d in enumerate(spec.trunk):
            kind = d["type"]
            name = f"t{li}.{kind}"
            if kind == "conv":
                layer = nn.Conv2D(shape[0], d["filters"], d["m"], d["n"], d["padding"], dtype, init)
            elif kind == "bn":
                layer = nn.BatchNorm(shape[0], dtype=dtype)
            elif kind == "elu":
                layer = nn.ELU()
            elif kind == "pool":
                layer = nn.MaxPool2D(d["m"], d["n"], d.get("truncate", False))
            elif kind == "dropout":
                layer = nn.Dropout(d["p"], self.rng)
            elif kind == "flatten":
                layer = nn.Flatten()
            elif kind == "dense":
                layer = nn.Dense(shape[0], d["units"], dtype, init)
            else:
                raise ValueError(f"unknown layer type {kind!r}")
            if not self.trunk and not spec.branches and isinstance(layer, nn.Conv2D):
                layer.need_input_grad = False
            self.trunk.append((name, layer))
            shape = rows[name]["shape"]
        self.output = nn.Dense(shape[0], spec.n_outputs, dtype, init)

    # -- structure ---------------------------------------------------------------
    def named_layers(self):
        out = [pair for branch in self.branches for pair in branch]
        out += self.trunk
        out.append(("out", self.output))
        return out

    def zero_grad(self):
        for _, layer in self.named_layers():
            layer.zero_grad()

    def state_tensors(self):
        """Ordered (name, array, is_param) for every serialisable scalar block."""
        tensors = []
        for name, layer in self.named_layers():
            for k, v in layer.params.items():
                tensors.append((f"{name}.{k}", v))
            for k, v in layer.buffers.items():
                tensors.append((f"{name}.{k}", v))
        return tensors

    def load_tensors(self, named: dict[str, np.ndarray]):
        own = dict(self.state_tensors())
        missing = set(own) - set(named)
        extra = set(named) - set(own)
        if missing or extra:
            raise ValueError(f"tensor mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for name, arr in named.items():
            if own[name].shape != arr.shape:
                raise ValueError(f"tensor {name}: shape {arr.shape}, expected {own[name].shape}")
            own[name][...] = arr

    def trainable(self):
        """Parallel lists (params, grads, decay flags)."""
        ps, gs, ds = [], [], []
        for _, layer in self.named_layers():
            for k, v in layer.params.items():
                ps.append(v)
                gs.append(layer.grads[k])
                ds.append(k in layer.decay)
        return ps, gs, ds

    def init_from_data(self, x, targets=None):
        """Data-dependent bias initialisation on a sample batch of normalised inputs.

        Every conv or dense layer before the output gets its bias shifted so
        that its output, taken after the max-pool that follows it, has zero
        mean per channel on ``x``. A bias shift commutes with max-pooling, so
        the centring is exact. Layers followed by batch norm are skipped since
        it cancels any bias. Without batch norm,
        max-pooling over many positions otherwise leaves large positive
        offsets that condition SGD badly. With ``targets``, output biases
        start at the label log prior. Weights are untouched.
        """
        x = self._as_input(x)
        # branches are independent of each other, so one pass centres them all
        stages = [[t for branch in self.branches for t in self._centre_targets(branch)]]
        stages += [[t] for t in self._centre_targets(self.trunk)]
        for stage in stages:
            if not stage:
                continue
            seen = []
            for _, tap in stage:
                tap.forward = _recording(tap.forward, seen, tap)
            try:
                self.forward(x, train=False)
            finally:
                for _, tap in stage:
                    del tap.forward
            outputs = {id(tap): out for tap, out in seen}
            for layer, tap in stage:
                out = outputs[id(tap)]
                axes = (0, 2, 3) if out.ndim == 4 else (0,)
                layer.params["b"] -= out.mean(axis=axes).astype(layer.params["b"].dtype)
        if targets is not None:
            prior = np.clip(np.asarray(targets, dtype=np.float64).mean(axis=0), 1e-3, 1 - 1e-3)
            if self.spec.loss_kind == "softmax":
                bias = np.log(prior) - np.log(prior).mean()
            else:
                bias = np.log(prior / (1 - prior))
            self.output.params["b"][...] = bias

    @staticmethod
    def _centre_targets(seq):
        """(layer, observed layer) pairs; a following pool is observed instead."""
        pairs = []
        for i, (_, layer) in enumerate(seq):
            if not isinstance(layer, (nn.Conv2D, nn.Dense)):
                continue
            nxt = seq[i + 1][1] if i + 1 < len(seq) else None
            if isinstance(nxt, nn.BatchNorm):
                continue
            pairs.append((layer, nxt if isinstance(nxt, nn.MaxPool2D) else layer))
        return pairs

    # -- computation -------------------------------------------------------------
    def _as_input(self, x):
        x = np.asarray(x, dtype=self.dtype)
        if x.ndim == 3:
            x = x[:, None]
        if x.shape[1:] != (1,) + tuple(self.spec.input_shape):
            raise nn.ShapeError(
                f"input {x.shape[1:]} does not match architecture input {self.spec.input_shape}")
        return x

    def forward(self, x, train=False):
        x = self._as_input(x)
        if self.branches:
            cache = {}
            outs = [None] * len(self.branches)
            for group in self.conv_groups:
                convs = [self.branches[bi][0][1] for bi in group]
                for bi, h in zip(group, nn.conv_forward(convs, x, cache)):
                    outs[bi] = h
            for bi, branch in enumerate(self.branches):
                h = outs[bi]
                for _, layer in branch[1:]:
                    h = layer.forward(h, train)
                outs[bi] = h
            self._branch_shapes = [o.shape for o in outs]
            if self.spec.merge == "flatten":
                h = np.concatenate([o.reshape(len(o), -1) for o in outs], axis=1)
            else:
                h = np.concatenate(outs, axis=1)
        else:
            h = x
        for _, layer in self.trunk:
            h = layer.forward(h, train)
        return self.output.forward(h, train)

    def backward(self, dlogits):
        d = self.output.backward(dlogits)
        for _, layer in reversed(self.trunk):
            d = layer.backward(d)
            if d is None:
                return None
        if not self.branches:
            return d
        offset = 0
        heads = []
        for branch, shape in zip(self.branches, self._branch_shapes):
            if self.spec.merge == "flatten":
                size = int(np.prod(shape[1:]))
                db = d[:, offset:offset + size].reshape(shape)
                offset += size
            else:
                db = d[:, offset:offset + shape[1]]
                offset += shape[1]
            for _, layer in reversed(branch[1:]):
                db = layer.backward(db)
            heads.append(db)
        for group in self.conv_groups:
            nn.conv_backward([self.branches[bi][0][1] for bi in group], [heads[bi] for bi in group])
        return None

    def loss(self, logits, targets):
        if self.spec.loss_kind == "softmax":
            return nn.softmax_xent(logits, targets)
        return nn.sigmoid_bce(logits, targets)

    def predict(self, x, batch_size=64):
        """Inference-mode probabilities (softmax or sigmoid per architecture)."""
        x = np.asarray(x)
        outs = []
        for i in range(0, len(x), batch_size):
            logits = self.forward(x[i:i + batch_size], train=False)
            if self.spec.loss_kind == "softmax":
                outs.append(nn.softmax(logits.astype(np.float64)))
            else:
                outs.append(nn.sigmoid(logits.astype(np.float64)))
        n = self.spec.n_outputs
        return np.concatenate(outs) if outs else np.zeros((0, n))

    def n_scalars(self) -> int:
        return sum(a.size for _, a in self.state_tensors())


def _recording(fn, sink, owner):
    def wrapped(*args, **kwargs):
        out = fn(*args, **kwargs)
        sink.append((owner, out))
        return out
    return wrapped
