"""GNN latency predictor over architecture graphs.

A genotype becomes a chain ``input -> op_1 -> ... -> op_n -> output`` plus a
global node wired both ways to every other node.  Three sum-aggregation graph
convolutions (self-loops, no degree normalization), a mean readout and an MLP
regress ``s >= 0``; the latency is ``tau * expm1(s)``, so targets live in log
space and an all-zero model predicts 0 ms.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import scipy.sparse as sp

from . import kernel as K
from .design_space import (
    MESSAGES,
    Aggregate,
    Combine,
    Connect,
    Genotype,
    Sample,
    SpaceConfig,
    canonical_form,
    random_function_set,
    layer_widths,
)
from .device_model import DeviceProfile, InputSpec, Work, cost_positions, position_work
from .serialize import load_arrays, save_arrays

log = logging.getLogger(__name__)

KINDS = ("input", "output", "global", "connect", "aggregate", "combine", "sample")
FUNCTIONS = ("identity", "skip", "sum", "min", "max", "mean", "knn", "random", "mlp")
DATA_DIM = 16
DEVICE_DIM = 5
FEATURE_MODES = ("extended", "strict")
READOUTS = ("mean", "global")
TAU_MS = 1e-3
MAX_WIDTH = 256
MAX_K = 32
# message one-hot, log output width, log input width, neighbour count,
# log multiply-adds, log regular and irregular element moves
EXT_DIM = len(MESSAGES) + 6


def feature_dim(mode: str = "extended") -> int:
    ext = EXT_DIM if mode == "extended" else 0
    return len(KINDS) + len(FUNCTIONS) + ext + DATA_DIM + DEVICE_DIM


def data_properties(spec: InputSpec, g: Genotype, canon: Genotype) -> np.ndarray:
    m = spec.points
    v = np.zeros(DATA_DIM)
    # logs: latency terms are products of these quantities
    v[:10] = [
        math.log(m / 1024.0),
        2.0 * math.log(m / 1024.0),
        m / 1024.0,
        spec.default_k / m,
        math.log(spec.default_k),
        math.log(spec.feature_dim),
        math.log(spec.batch),
        spec.batch / 8.0,
        # identities vanish from the graph but still cost a dispatch each
        len(cost_positions(g)) / 12.0,
        len(canon) / 12.0,
    ]
    # whole-network work: log latency is near a soft maximum of these over device rates
    total = Work()
    for pw in position_work(cost_positions(g), spec):
        total = total + pw.work + (pw.default_knn or Work())
    v[10:13] = np.log1p(np.array([total.compute, total.regular, total.irregular]) / 1e3)
    v[13] = math.log(len(cost_positions(g)) + 1.0)
    return v


@dataclass
class ArchGraph:
    kinds: list[str]
    features: np.ndarray
    src: np.ndarray
    dst: np.ndarray
    mode: str = "extended"

    @property
    def num_nodes(self) -> int:
        return len(self.kinds)

    def adjacency(self) -> sp.csr_matrix:
        """``A + I`` with row = receiver, so ``A @ h`` sums in-neighbours and self."""
        n = self.num_nodes
        rows = np.concatenate([self.dst, np.arange(n)])
        cols = np.concatenate([self.src, np.arange(n)])
        return sp.csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(n, n))

    def permute(self, perm: Sequence[int]) -> "ArchGraph":
        """Same graph with node ``perm[j]`` stored at index ``j``."""
        perm = np.asarray(perm)
        inv = np.empty_like(perm)
        inv[perm] = np.arange(len(perm))
        return ArchGraph(
            [self.kinds[i] for i in perm], self.features[perm], inv[self.src], inv[self.dst], self.mode
        )

    def edge_set(self) -> set[tuple[int, int]]:
        return set(zip(self.src.tolist(), self.dst.tolist()))


def _function_name(f) -> str:
    if isinstance(f, Connect):
        return "identity" if f.mode == "identity" else "skip"
    if isinstance(f, Aggregate):
        return f.aggregator
    if isinstance(f, Sample):
        return f.mode
    return "mlp"


def encode(g: Genotype, spec: InputSpec, profile: DeviceProfile, mode: str = "extended") -> ArchGraph:
    if mode not in FEATURE_MODES:
        raise ValueError(f"feature mode must be one of {FEATURE_MODES}")
    canon = canonical_form(g)
    ops = list(canon.positions)
    n = len(ops) + 3
    nk, nf = len(KINDS), len(FUNCTIONS)
    ext = mode == "extended"
    gl0 = nk + nf + (EXT_DIM if ext else 0)
    x = np.zeros((n, feature_dim(mode)))
    kinds = ["input"] + [p.op.value for p in ops] + ["output", "global"]
    for i, kind in enumerate(kinds):
        x[i, KINDS.index(kind)] = 1.0
    widths = layer_widths(Genotype(tuple(ops), spec.feature_dim, g.num_classes))
    work = [pw.work + pw.default_knn if pw.default_knn else pw.work for pw in position_work(ops, spec)]
    k = None
    for i, (p, (d_in, d_out)) in enumerate(zip(ops, widths), start=1):
        f = p.func
        x[i, nk + FUNCTIONS.index(_function_name(f))] = 1.0
        if isinstance(f, Sample):
            k = f.k
        elif isinstance(f, Aggregate) and k is None:
            k = spec.default_k
        if ext:
            if isinstance(f, Aggregate):
                x[i, nk + nf + MESSAGES.index(f.message)] = 1.0
            # deployed widths (natural log); log k of the edge list in use
            x[i, nk + nf + len(MESSAGES)] = math.log(d_out)
            x[i, nk + nf + len(MESSAGES) + 1] = math.log(d_in)
            if isinstance(f, (Sample, Aggregate)):
                x[i, nk + nf + len(MESSAGES) + 2] = math.log(k)
            w = work[i - 1]
            x[i, nk + nf + len(MESSAGES) + 3 : gl0] = np.log1p(np.array([w.compute, w.regular, w.irregular]) / 1e3)
    x[n - 1, gl0 : gl0 + DATA_DIM] = data_properties(spec, g, canon)
    x[n - 1, gl0 + DATA_DIM :] = profile.descriptor()

    src = list(range(n - 2))
    dst = list(range(1, n - 1))
    # dataflow shortcuts: edge list producer -> consumer, skip source -> skip
    last_sample = None
    for i, p in enumerate(ops, start=1):
        f = p.func
        if isinstance(f, Sample):
            last_sample = i
        elif isinstance(f, Aggregate) and last_sample is not None and last_sample != i - 1:
            src.append(last_sample)
            dst.append(i)
        elif isinstance(f, Connect) and f.mode == "skip" and i >= 3:
            src.append(i - 2)
            dst.append(i)
    gnode = n - 1
    others = list(range(n - 1))
    src += others + [gnode] * len(others)
    dst += [gnode] * len(others) + others
    return ArchGraph(kinds, x, np.asarray(src, dtype=np.intp), np.asarray(dst, dtype=np.intp), mode)


@dataclass
class Batch:
    adj: sp.csr_matrix
    pool: sp.csr_matrix
    features: np.ndarray

    @classmethod
    def of(cls, graphs: Sequence[ArchGraph], readout: str = "mean") -> "Batch":
        blocks = [gr.adjacency() for gr in graphs]
        sizes = [gr.num_nodes for gr in graphs]
        starts = np.concatenate([[0], np.cumsum(sizes)])
        rows, cols, vals = [], [], []
        for j, (gr, lo, size) in enumerate(zip(graphs, starts, sizes)):
            if readout == "mean":
                rows += [j] * size
                cols += range(lo, lo + size)
                vals += [1.0 / size] * size
            else:
                rows.append(j)
                cols.append(lo + gr.kinds.index("global"))
                vals.append(1.0)
        pool = sp.csr_matrix((vals, (rows, cols)), shape=(len(graphs), int(starts[-1])))
        return cls(sp.block_diag(blocks, format="csr"), pool, np.vstack([gr.features for gr in graphs]))


@dataclass
class PredictorModel:
    params: dict[str, np.ndarray]
    mode: str = "extended"
    readout: str = "mean"
    gcn_widths: tuple[int, ...] = (256, 512, 512)
    mlp_widths: tuple[int, ...] = (256, 128)
    meta: dict = field(default_factory=dict)
    # fixed input standardization (features - shift) / scale, set from training data
    shift: np.ndarray | None = None
    scale: np.ndarray | None = None

    @classmethod
    def init(
        cls,
        seed: int = 0,
        mode: str = "extended",
        readout: str = "mean",
        gcn_widths=(256, 512, 512),
        mlp_widths=(256, 128),
        out_bias: float = 0.0,
    ) -> "PredictorModel":
        if readout not in READOUTS:
            raise ValueError(f"readout must be one of {READOUTS}")
        if len(gcn_widths) != 3:
            raise ValueError("the predictor has exactly three graph-convolution layers")
        rng = np.random.default_rng(seed)
        params = {}
        dims = [feature_dim(mode), *gcn_widths]
        for i, (a, b) in enumerate(zip(dims[:-1], dims[1:])):
            params[f"gcn{i}/W"] = _he(rng, a, b)
            params[f"gcn{i}/b"] = np.zeros((1, b))
        dims = [gcn_widths[-1], *mlp_widths, 1]
        for i, (a, b) in enumerate(zip(dims[:-1], dims[1:])):
            params[f"mlp{i}/W"] = _he(rng, a, b)
            params[f"mlp{i}/b"] = np.zeros((1, b))
        last = len(dims) - 2
        # start from a constant prediction of exp(out_bias)
        params[f"mlp{last}/W"][:] = 0.0
        params[f"mlp{last}/b"][:] = out_bias
        return cls(params, mode, readout, tuple(gcn_widths), tuple(mlp_widths))

    @property
    def in_dim(self) -> int:
        return self.params["gcn0/W"].shape[0]

    def zero(self) -> "PredictorModel":
        return PredictorModel({k: np.zeros_like(v) for k, v in self.params.items()}, self.mode,
                              self.readout, self.gcn_widths, self.mlp_widths, {}, self.shift, self.scale)

    def standardize(self, features: np.ndarray):
        """Fit the input standardization to a stack of node features."""
        self.shift = features.mean(axis=0)
        sd = features.std(axis=0)
        self.scale = np.where(sd > 1e-12, sd, 1.0)

    def _inputs(self, features: np.ndarray) -> np.ndarray:
        if self.shift is None:
            return features
        return (features - self.shift) / self.scale

    def forward(self, batch: Batch, tape: K.Tape | None = None, weights=None) -> K.Tensor:
        """Log-space score ``s`` per graph, shape (graphs, 1)."""
        if batch.features.shape[1] != self.in_dim:
            raise ValueError(f"feature width {batch.features.shape[1]} does not match model input {self.in_dim}")
        tape = K.Tape(enabled=False) if tape is None else tape
        w = weights if weights is not None else {k: tape.const(v) for k, v in self.params.items()}
        h = tape.const(self._inputs(batch.features))
        for i in range(len(self.gcn_widths)):
            h = K.leaky_relu(K.linear(K.spmm(batch.adj, h), w[f"gcn{i}/W"], w[f"gcn{i}/b"]))
        h = K.spmm(batch.pool, h)
        last = len(self.mlp_widths)
        for i in range(last + 1):
            h = K.linear(h, w[f"mlp{i}/W"], w[f"mlp{i}/b"])
            h = K.leaky_relu(h) if i < last else K.relu(h)
        return h

    def predict_graphs(self, graphs: Sequence[ArchGraph], chunk: int = 512) -> np.ndarray:
        out = []
        for lo in range(0, len(graphs), chunk):
            s = self.forward(Batch.of(graphs[lo : lo + chunk], self.readout)).value[:, 0]
            out.append(TAU_MS * np.expm1(s))
        return np.concatenate(out) if out else np.zeros(0)

    def loss_and_grads(self, batch: Batch, labels: np.ndarray, loss: str = "mape"):
        tape = K.Tape()
        w = {k: tape.leaf(v) for k, v in self.params.items()}
        s = self.forward(batch, tape, w)
        if loss == "mape":
            loss = K.mape(K.scale(K.expm1(s), TAU_MS), labels)
        else:
            t = np.log1p(np.asarray(labels) / TAU_MS).reshape(-1, 1)
            loss = K.mape(s, t)
        tape.backward(loss)
        return float(loss.value[0, 0]), {k: (t.grad if t.grad is not None else np.zeros_like(t.value)) for k, t in w.items()}

    def save(self, stem):
        header = {
            "kind": "latency_predictor",
            "feature_mode": self.mode,
            "readout": self.readout,
            "gcn_widths": list(self.gcn_widths),
            "mlp_widths": list(self.mlp_widths),
            "tau_ms": TAU_MS,
            "training": self.meta,
        }
        arrays = dict(self.params)
        if self.shift is not None:
            arrays["norm/shift"], arrays["norm/scale"] = self.shift, self.scale
        return save_arrays(stem, header, arrays)

    @classmethod
    def load(cls, stem) -> "PredictorModel":
        meta, arrays = load_arrays(stem)
        if meta.get("kind") != "latency_predictor":
            raise ValueError("not a latency predictor checkpoint")
        shift, scale = arrays.pop("norm/shift", None), arrays.pop("norm/scale", None)
        return cls(arrays, meta["feature_mode"], meta["readout"], tuple(meta["gcn_widths"]),
                   tuple(meta["mlp_widths"]), meta.get("training", {}), shift, scale)


def _he(rng, fan_in, fan_out):
    return rng.normal(0.0, math.sqrt(2.0 / fan_in), size=(fan_in, fan_out))


def predict(model: PredictorModel, ag: ArchGraph) -> float:
    return float(model.predict_graphs([ag])[0])


# --- training ---------------------------------------------------------------


@dataclass(frozen=True)
class LatencySample:
    genotype: Genotype
    profile: DeviceProfile
    ms: float
    spec: InputSpec = InputSpec()


def encode_samples(samples: Sequence[LatencySample], mode: str = "extended") -> list[ArchGraph]:
    cache: dict = {}
    out = []
    for s in samples:
        key = (s.genotype, s.profile, s.spec)
        if key not in cache:
            cache[key] = encode(s.genotype, s.spec, s.profile, mode)
        out.append(cache[key])
    return out


def train_predictor(
    samples: Sequence[LatencySample],
    epochs: int = 250,
    seed: int = 0,
    lr: float = 1e-3,
    batch_size: int = 16,
    holdout: float = 0.1,
    mode: str = "extended",
    readout: str = "mean",
    gcn_widths=(256, 512, 512),
    mlp_widths=(256, 128),
    loss: str = "log",
    weight_decay: float = 0.0,
    standardize: bool = False,
) -> PredictorModel:
    """Adam on relative error; returns the best-holdout snapshot.

    ``loss="log"`` scores ``s`` against ``log1p(ms / tau)``, ``loss="mape"`` scores
    ``tau * expm1(s)`` against the milliseconds directly.

    ``holdout`` of the samples is kept aside (seeded) to pick the snapshot.
    """
    if not samples:
        raise ValueError("no training samples")
    labels = np.array([s.ms for s in samples], dtype=np.float64)
    if not np.all(np.isfinite(labels)) or np.any(labels <= 0):
        raise ValueError("latency labels must be finite and > 0")
    rng = np.random.default_rng(seed)
    graphs = encode_samples(samples, mode)
    order = rng.permutation(len(samples))
    n_hold = int(round(holdout * len(samples))) if len(samples) >= 10 else 0
    hold, fit = order[:n_hold], order[n_hold:]
    # start the output near the typical target so the MAPE gradient is informative
    bias = float(np.median(np.log1p(labels[fit] / TAU_MS)))
    model = PredictorModel.init(seed, mode, readout, gcn_widths, mlp_widths, out_bias=bias)
    if standardize:
        model.standardize(np.vstack([graphs[i].features for i in fit]))
    opt = K.Adam(lr=lr, clip=10.0, weight_decay=weight_decay)
    hold_batch = Batch.of([graphs[i] for i in hold], readout) if n_hold else None
    best = (math.inf, {k: v.copy() for k, v in model.params.items()}, 0)
    history = []
    for epoch in range(epochs):
        # cosine decay to zero over the run
        opt.lr = 0.5 * lr * (1.0 + math.cos(math.pi * epoch / epochs))
        perm = fit[rng.permutation(len(fit))]
        total = 0.0
        for lo in range(0, len(perm), batch_size):
            idx = perm[lo : lo + batch_size]
            loss, grads = model.loss_and_grads(Batch.of([graphs[i] for i in idx], readout), labels[idx], loss)
            if not math.isfinite(loss):
                raise PredictorDiverged(f"predictor loss became non-finite at epoch {epoch}")
            opt.step(model.params, grads)
            total += loss * len(idx)
        score = total / len(perm)
        if hold_batch is not None:
            pred = TAU_MS * np.expm1(model.forward(hold_batch).value[:, 0])
            score = float(np.mean(np.abs(pred - labels[hold]) / labels[hold]))
        history.append(score)
        if score < best[0]:
            best = (score, {k: v.copy() for k, v in model.params.items()}, epoch)
        log.debug("predictor epoch %d score %.4f", epoch, score)
    model.params = best[1]
    model.meta = {"epochs": epochs, "seed": seed, "lr": lr, "best_epoch": best[2],
                  "best_holdout_mape": best[0], "samples": len(samples), "history": history}
    return model


class PredictorDiverged(RuntimeError):
    pass


# --- evaluation -------------------------------------------------------------


@dataclass
class PredictorReport:
    mape: float
    within_bound: float
    ranking: float
    n: int
    bound: float = 0.10

    def to_dict(self):
        return {"mape": self.mape, "within_bound": self.within_bound, "bound": self.bound,
                "ranking_accuracy": self.ranking, "n": self.n}


def ranking_accuracy(pred: np.ndarray, true: np.ndarray) -> float:
    """Share of label-distinct pairs whose predicted order matches."""
    pred, true = np.asarray(pred, float), np.asarray(true, float)
    i, j = np.triu_indices(len(true), 1)
    dt = np.sign(true[i] - true[j])
    keep = dt != 0
    if not keep.any():
        return 1.0
    return float(np.mean(np.sign(pred[i] - pred[j])[keep] == dt[keep]))


def report_from_predictions(pred, true, bound: float = 0.10) -> PredictorReport:
    pred, true = np.asarray(pred, float), np.asarray(true, float)
    if len(true) == 0:
        raise ValueError("empty evaluation set")
    rel = np.abs(pred - true) / true
    return PredictorReport(float(rel.mean()), float(np.mean(rel <= bound)), ranking_accuracy(pred, true), len(true), bound)


def evaluate_predictor(
    model: PredictorModel, samples: Sequence[LatencySample], resample_seed: int | None = None, bound: float = 0.10
) -> PredictorReport:
    """MAPE, share within ``bound`` and pairwise ranking accuracy.

    With ``resample_seed`` the set is bootstrap-resampled first.
    """
    if not samples:
        raise ValueError("empty evaluation set")
    samples = list(samples)
    if resample_seed is not None:
        idx = np.random.default_rng(resample_seed).integers(0, len(samples), len(samples))
        samples = [samples[i] for i in idx]
    pred = model.predict_graphs(encode_samples(samples, model.mode))
    return report_from_predictions(pred, [s.ms for s in samples], bound)


def sample_architectures(space: SpaceConfig, n: int, seed: int = 0) -> list[Genotype]:
    """Genotypes as the two-stage search proposes them: a random function-set
    pair applied to a uniformly random operation sequence."""
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        fs = random_function_set(space, rng)
        ops = [space.ops[i] for i in rng.integers(len(space.ops), size=space.num_positions)]
        out.append(fs.apply(ops, space))
    return out


def labeled_samples(
    genotypes: Sequence[Genotype],
    profiles: Sequence[DeviceProfile],
    spec: InputSpec = InputSpec(),
    noise: float = 0.0,
    seed: int = 0,
) -> list[LatencySample]:
    """Round-robin the genotypes over ``profiles`` and label them with the oracle."""
    from .device_model import label_batch

    out: list[LatencySample] = []
    for j, p in enumerate(profiles):
        gs = list(genotypes[j :: len(profiles)])
        for g, ms in label_batch(gs, spec, p, noise, seed + j):
            out.append(LatencySample(g, p, ms, spec))
    return out
