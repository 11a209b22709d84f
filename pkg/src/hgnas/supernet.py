"""Weight-sharing supernet over the position-based design space.

Every position owns a lazily created weight bank per candidate function.  In
supernet mode all feature tensors have the common hidden width ``H``:

* the raw input is zero-padded to ``H``;
* sample and aggregate carry an alignment linear map back to ``H``;
* combine(w) maps ``H -> w`` (LeakyReLU 0.2) and folds channel ``c`` onto
  channel ``c % H`` (zero-padding when ``w < H``; no parameters).

Training samples one path per step and back-propagates through it only.
"""
from __future__ import annotations

import logging
import math
import zlib
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import kernel as K
from .dataset import DatasetSplit
from .design_space import (
    Aggregate,
    Combine,
    Connect,
    FunctionSet,
    Genotype,
    Op,
    Sample,
    SpaceConfig,
    SpaceError,
    func_key,
    layer_widths,
    message_width,
    random_genotype,
)
from .serialize import load_arrays, save_arrays

log = logging.getLogger(__name__)

COMBINE_SLOPE = 0.2


class TrainingDiverged(RuntimeError):
    pass


# --- graph construction -----------------------------------------------------


def knn_edges(x: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    """k nearest neighbours (self excluded) within each cloud of ``x`` (B, M, d).

    Returns flat ``(src, dst)`` index arrays: ``src`` is a neighbour of ``dst``.
    Ties resolve to the lower point index.
    """
    b, m, _ = x.shape
    if not 1 <= k < m:
        raise SpaceError(f"k={k} needs 1 <= k < points per cloud ({m})")
    sq = (x**2).sum(-1)
    d = sq[:, :, None] + sq[:, None, :] - 2.0 * np.einsum("bid,bjd->bij", x, x)
    idx = np.arange(m)
    d[:, idx, idx] = np.inf
    nbr = np.argsort(d, axis=-1, kind="stable")[:, :, :k]
    offset = (np.arange(b) * m)[:, None, None]
    src = (nbr + offset).reshape(-1)
    dst = np.broadcast_to(idx[None, :, None] + offset, nbr.shape).reshape(-1)
    return src, dst


def random_edges(b: int, m: int, k: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """``k`` distinct random neighbours (self excluded) per point."""
    if not 1 <= k < m:
        raise SpaceError(f"k={k} needs 1 <= k < points per cloud ({m})")
    keys = rng.random((b, m, m))
    idx = np.arange(m)
    keys[:, idx, idx] = np.inf
    nbr = np.argsort(keys, axis=-1)[:, :, :k]
    offset = (np.arange(b) * m)[:, None, None]
    src = (nbr + offset).reshape(-1)
    dst = np.broadcast_to(idx[None, :, None] + offset, nbr.shape).reshape(-1)
    return src, dst


def build_messages(x: K.Tensor, src: np.ndarray, dst: np.ndarray, message: str) -> K.Tensor:
    xs = K.gather(x, src)
    xt = K.gather(x, dst)
    if message == "source_pos":
        return xs
    if message == "target_pos":
        return xt
    rel = K.sub(xs, xt)
    if message == "rel_pos":
        return rel
    if message == "distance":
        return K.row_norm(rel)
    if message == "source_rel":
        return K.concat([xs, rel])
    if message == "target_rel":
        return K.concat([xt, rel])
    if message == "full":
        return K.concat([xs, xt, rel])
    raise SpaceError(f"unknown message type {message!r}")


def aggregate(x: K.Tensor, src: np.ndarray, dst: np.ndarray, message: str, reducer: str) -> K.Tensor:
    """Reduce per-edge messages onto their target nodes.

    Every message type except ``distance`` is assembled from the reduction of
    the source features alone: the target part is constant within a segment,
    so max/min/mean of it is ``x_i`` (sum: ``count * x_i``) and the relative
    part is the source reduction minus that.  Equal to reducing the literal
    concatenated messages of :func:`build_messages`, including the
    first-index tie rule, at a fraction of the memory.
    """
    n = x.shape[0]
    if message == "distance":
        return K.segment_reduce(build_messages(x, src, dst, message), dst, n, reducer)
    counts = np.bincount(dst, minlength=n).astype(np.float64)
    red = K.segment_reduce(K.gather(x, src), dst, n, reducer)
    if message == "source_pos":
        return red
    tgt = K.row_scale(x, counts if reducer == "sum" else (counts > 0))
    if message == "target_pos":
        return tgt
    rel = K.sub(red, tgt)
    if message == "rel_pos":
        return rel
    if message == "source_rel":
        return K.concat([red, rel])
    if message == "target_rel":
        return K.concat([tgt, rel])
    return K.concat([red, tgt, rel])


# --- state ------------------------------------------------------------------


def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    lim = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-lim, lim, size=(fan_in, fan_out))


@dataclass
class EvalReport:
    acc_val: float
    acc_train: float
    loss_curve: list[float] = field(default_factory=list)


class Supernet:
    """Shared weight banks for every candidate operation at every position."""

    def __init__(self, space: SpaceConfig, hidden: int = 32, seed: int = 0):
        if space.input_dim > hidden:
            raise SpaceError("input_dim must not exceed the hidden width")
        self.space = space
        self.hidden = hidden
        self.seed = seed
        self.params: dict[str, np.ndarray] = {}
        self.loss_history: list[float] = []
        self._init("head/W", (hidden, space.num_classes))
        self._init("head/b", (1, space.num_classes))

    # parameters ------------------------------------------------------------

    def _init(self, name: str, shape: tuple[int, int], kind: str = "glorot") -> np.ndarray:
        if name not in self.params:
            rng = np.random.default_rng([self.seed, zlib.crc32(name.encode())])
            if name.endswith("/b"):
                value = np.zeros(shape)
            elif kind == "eye":
                value = np.eye(*shape)
            else:
                value = _glorot(rng, *shape)
            self.params[name] = value
        return self.params[name]

    def bank(self, index: int, func) -> list[str]:
        """Parameter names used by ``func`` at ``index`` (created on first use)."""
        h = self.hidden
        prefix = f"p{index}/{func_key(func)}"
        if isinstance(func, Sample):
            shapes = [((h, h), "eye"), ((1, h), "")]
        elif isinstance(func, Aggregate):
            shapes = [((message_width(func.message, h), h), "glorot"), ((1, h), "")]
        elif isinstance(func, Combine):
            shapes = [((h, func.width), "glorot"), ((1, func.width), "")]
        else:
            return []
        names = [f"{prefix}/W", f"{prefix}/b"]
        for n, (shape, kind) in zip(names, shapes):
            self._init(n, shape, kind)
        return names

    def path_params(self, g: Genotype) -> list[str]:
        names = []
        for i, p in enumerate(g.positions):
            names += self.bank(i, p.func)
        return names + ["head/W", "head/b"]

    def path_param_count(self, g: Genotype) -> int:
        return sum(self.params[n].size for n in self.path_params(g))

    def bank_bytes(self, index: int, func) -> bytes:
        return b"".join(self.params[n].tobytes() for n in self.bank(index, func))

    def copy(self) -> "Supernet":
        other = Supernet.__new__(Supernet)
        other.space, other.hidden, other.seed = self.space, self.hidden, self.seed
        other.params = {k: v.copy() for k, v in self.params.items()}
        other.loss_history = list(self.loss_history)
        return other

    # forward ---------------------------------------------------------------

    def check(self, g: Genotype):
        if len(g) != self.space.num_positions:
            raise SpaceError(f"genotype has {len(g)} positions, supernet has {self.space.num_positions}")
        if g.input_dim != self.space.input_dim or g.num_classes != self.space.num_classes:
            raise SpaceError("genotype input/output dimensions do not match the supernet")

    def forward(
        self,
        g: Genotype,
        points: np.ndarray,
        tape: K.Tape | None = None,
        seed: int = 0,
        weights: dict[str, K.Tensor] | None = None,
        trace: list | None = None,
    ) -> K.Tensor:
        """Logits of the sub-network ``g`` for clouds ``points`` (B, M, input_dim)."""
        self.check(g)
        tape = K.Tape(enabled=False) if tape is None else tape
        weights = {} if weights is None else weights

        def w(name):
            if name not in weights:
                weights[name] = tape.leaf(self.params[name]) if tape.enabled else tape.const(self.params[name])
            return weights[name]

        points = np.asarray(points, dtype=np.float64)
        b, m, _ = points.shape
        n = b * m
        h = self.hidden
        rng = np.random.default_rng(seed)
        x = K.fold_cols(tape.const(points.reshape(n, -1)), h)
        prev_in = x
        edges = None
        for i, pos in enumerate(g.positions):
            f = pos.func
            names = self.bank(i, f)
            x_in = x
            if isinstance(f, Connect):
                if f.mode == "skip":
                    x = K.add(x, prev_in)
            elif isinstance(f, Sample):
                if f.mode == "knn":
                    edges = knn_edges(x.value.reshape(b, m, h), f.k)
                else:
                    edges = random_edges(b, m, f.k, rng)
                x = K.linear(x, w(names[0]), w(names[1]))
            elif isinstance(f, Aggregate):
                if edges is None:
                    k = min(self.space.default_k, m - 1)
                    edges = knn_edges(points, k)
                red = aggregate(x, edges[0], edges[1], f.message, f.aggregator)
                x = K.linear(red, w(names[0]), w(names[1]))
            elif isinstance(f, Combine):
                y = K.leaky_relu(K.linear(x, w(names[0]), w(names[1])), COMBINE_SLOPE)
                x = K.fold_cols(y, h)
            if trace is not None:
                trace.append(x.shape[1])
            prev_in = x_in
        pooled = K.segment_reduce(x, np.repeat(np.arange(b), m), b, "max")
        return K.linear(pooled, w("head/W"), w("head/b"))

    def loss_and_grads(self, g: Genotype, points, labels, seed: int = 0) -> tuple[float, dict[str, np.ndarray]]:
        tape = K.Tape()
        weights: dict[str, K.Tensor] = {}
        logits = self.forward(g, points, tape, seed, weights)
        loss = K.softmax_cross_entropy(logits, labels)
        tape.backward(loss)
        grads = {k: t.grad for k, t in weights.items() if t.grad is not None}
        return float(loss.value[0, 0]), grads

    def predict(self, g: Genotype, points: np.ndarray, seed: int = 0, batch: int = 64) -> np.ndarray:
        out = []
        for lo in range(0, len(points), batch):
            out.append(self.forward(g, points[lo : lo + batch], seed=seed + lo).value)
        return np.concatenate(out) if out else np.zeros((0, self.space.num_classes))

    def accuracy(self, g: Genotype, points: np.ndarray, labels: np.ndarray, seed: int = 0) -> float:
        if len(points) == 0:
            return 0.0
        return float((self.predict(g, points, seed).argmax(axis=1) == labels).mean())

    # persistence -------------------------------------------------------------

    def save(self, stem) -> None:
        header = {
            "format": "hgnas-supernet",
            "hidden": self.hidden,
            "seed": self.seed,
            "space": self.space.to_dict(),
            "loss_history": self.loss_history,
        }
        save_arrays(stem, header, self.params)

    @classmethod
    def load(cls, stem) -> "Supernet":
        meta, arrays = load_arrays(stem)
        net = cls(SpaceConfig.from_dict(meta["space"]), meta["hidden"], meta["seed"])
        net.params = arrays
        net.loss_history = list(meta.get("loss_history", []))
        return net


# --- training / evaluation --------------------------------------------------


def path_sampler(space: SpaceConfig, function_set: FunctionSet | None = None) -> Callable[[np.random.Generator], Genotype]:
    """Uniform single-path sampler, optionally with functions fixed per half."""
    if function_set is None:
        return lambda rng: random_genotype(space, rng)

    def draw(rng):
        idx = rng.integers(len(space.ops), size=space.num_positions)
        return function_set.apply([space.ops[i] for i in idx], space)

    return draw


def train_supernet(
    net: Supernet,
    data: DatasetSplit,
    epochs: int,
    seed: int = 0,
    lr: float = 0.05,
    momentum: float = 0.9,
    batch_size: int = 32,
    sampler: Callable[[np.random.Generator], Genotype] | None = None,
    fixed: Genotype | None = None,
) -> Supernet:
    """Single-path one-shot training; updates ``net`` in place and returns it.

    Each step draws a path from ``sampler`` (uniform over the space by default)
    unless ``fixed`` pins one genotype.
    """
    if not data.train:
        raise ValueError("training split is empty")
    if epochs <= 0:
        return net
    sampler = sampler or path_sampler(net.space)
    rng = np.random.default_rng(seed)
    opt = K.SGD(lr=lr, momentum=momentum, clip=5.0)
    x, y = data.arrays("train")
    for epoch in range(epochs):
        order = rng.permutation(len(x))
        total = 0.0
        for lo in range(0, len(x), batch_size):
            idx = order[lo : lo + batch_size]
            g = fixed if fixed is not None else sampler(rng)
            loss, grads = net.loss_and_grads(g, x[idx], y[idx], seed=int(rng.integers(2**31)))
            if not np.isfinite(loss):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}, path {g}")
            opt.step(net.params, grads)
            total += loss * len(idx)
        net.loss_history.append(total / len(x))
        log.debug("epoch %d loss %.4f", epoch, net.loss_history[-1])
    return net


def eval_genotype(net: Supernet, g: Genotype, data: DatasetSplit, seed: int = 0, train: bool = True) -> EvalReport:
    """Accuracy of ``g`` with inherited weights; no retraining."""
    xv, yv = data.arrays("val")
    acc_val = net.accuracy(g, xv, yv, seed)
    acc_train = net.accuracy(g, *data.arrays("train"), seed) if train else float("nan")
    return EvalReport(acc_val, acc_train, list(net.loss_history))


# --- finalized networks -----------------------------------------------------


@dataclass
class FinalizedNetwork:
    """A standalone network: alignment maps gone, combines at their declared width."""

    genotype: Genotype
    layers: list[dict]
    weights: dict[str, np.ndarray]
    default_k: int

    @property
    def param_count(self) -> int:
        return sum(a.size for a in self.weights.values())

    def forward(self, points: np.ndarray, seed: int = 0) -> np.ndarray:
        points = np.asarray(points, dtype=np.float64)
        b, m, _ = points.shape
        n = b * m
        rng = np.random.default_rng(seed)
        x = K.Tensor(points.reshape(n, -1))
        prev_in = x
        edges = None
        for i, (layer, pos) in enumerate(zip(self.layers, self.genotype.positions)):
            f = pos.func
            x_in = x
            if isinstance(f, Connect) and f.mode == "skip":
                d = max(x.shape[1], prev_in.shape[1])
                x = K.add(K.fold_cols(x, d), K.fold_cols(prev_in, d))
            elif isinstance(f, Sample):
                d = x.shape[1]
                edges = knn_edges(x.value.reshape(b, m, d), f.k) if f.mode == "knn" else random_edges(b, m, f.k, rng)
            elif isinstance(f, Aggregate):
                if edges is None:
                    edges = knn_edges(points, min(self.default_k, m - 1))
                x = aggregate(x, edges[0], edges[1], f.message, f.aggregator)
            elif isinstance(f, Combine):
                W, bias = self.weights[f"l{i}/W"], self.weights[f"l{i}/b"]
                x = K.leaky_relu(K.linear(x, K.Tensor(W), K.Tensor(bias)), COMBINE_SLOPE)
            prev_in = x_in
        pooled = K.segment_reduce(x, np.repeat(np.arange(b), m), b, "max")
        return pooled.value @ self.weights["head/W"] + self.weights["head/b"]

    def save(self, stem):
        header = {
            "format": "hgnas-finalized",
            "genotype": self.genotype.to_dict(),
            "layers": self.layers,
            "default_k": self.default_k,
        }
        save_arrays(stem, header, self.weights)

    @classmethod
    def load(cls, stem) -> "FinalizedNetwork":
        meta, arrays = load_arrays(stem)
        return cls(Genotype.from_dict(meta["genotype"]), meta["layers"], arrays, meta["default_k"])


def _rows_mod(w: np.ndarray, d_in: int, hidden: int) -> np.ndarray:
    # input channel c of the standalone layer saw supernet channel c % hidden
    return w[np.arange(d_in) % hidden]


def finalize(g: Genotype, net: Supernet) -> FinalizedNetwork:
    """Drop alignment maps and emit standalone weights at deployed widths.

    Combine and head weights are inherited from the supernet banks, row ``c``
    taken from bank row ``c % H``.  This is exact for paths of connects and
    combines no wider than ``H``; elsewhere it is an initialization for
    standalone retraining.
    """
    net.check(g)
    h = net.hidden
    widths = layer_widths(g)
    layers, weights = [], {}
    for i, (pos, (d_in, d_out)) in enumerate(zip(g.positions, widths)):
        layer = {"index": i, "op": pos.op.value, "func": pos.func.to_dict(), "in_width": d_in, "out_width": d_out}
        if isinstance(pos.func, Combine):
            names = net.bank(i, pos.func)
            weights[f"l{i}/W"] = _rows_mod(net.params[names[0]], d_in, h)
            weights[f"l{i}/b"] = net.params[names[1]].copy()
        layers.append(layer)
    d_last = widths[-1][1] if widths else g.input_dim
    weights["head/W"] = _rows_mod(net.params["head/W"], d_last, h)
    weights["head/b"] = net.params["head/b"].copy()
    return FinalizedNetwork(g, layers, weights, net.space.default_k)
