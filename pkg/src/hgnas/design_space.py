"""Fine-grained operation/function design space.

A genotype is an ordered sequence of positions; each position holds one
operation (connect, aggregate, combine, sample) together with the function
attributes of that operation.
"""
from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterator, Mapping, Sequence, Union

import numpy as np


class Op(str, Enum):
    CONNECT = "connect"
    AGGREGATE = "aggregate"
    COMBINE = "combine"
    SAMPLE = "sample"


OPS: tuple[Op, ...] = (Op.CONNECT, Op.AGGREGATE, Op.COMBINE, Op.SAMPLE)

CONNECT_MODES = ("skip", "identity")
AGGREGATORS = ("sum", "min", "max", "mean")
MESSAGES = (
    "source_pos",
    "target_pos",
    "rel_pos",
    "distance",
    "source_rel",
    "target_rel",
    "full",
)
WIDTHS = (8, 16, 32, 64, 128, 256)
SAMPLE_MODES = ("knn", "random")
DEFAULT_K = 16


class SpaceError(ValueError):
    """Invalid configuration, genotype or serialized form."""


@dataclass(frozen=True, order=True)
class Connect:
    mode: str

    op = Op.CONNECT

    def __post_init__(self):
        if self.mode not in CONNECT_MODES:
            raise SpaceError(f"unknown connect mode {self.mode!r}")

    def to_dict(self):
        return {"mode": self.mode}


@dataclass(frozen=True, order=True)
class Aggregate:
    aggregator: str
    message: str

    op = Op.AGGREGATE

    def __post_init__(self):
        if self.aggregator not in AGGREGATORS:
            raise SpaceError(f"unknown aggregator {self.aggregator!r}")
        if self.message not in MESSAGES:
            raise SpaceError(f"unknown message type {self.message!r}")

    def to_dict(self):
        return {"aggregator": self.aggregator, "message": self.message}


@dataclass(frozen=True, order=True)
class Combine:
    width: int

    op = Op.COMBINE

    def __post_init__(self):
        # the searchable widths are a SpaceConfig matter; any positive width is a valid layer
        if int(self.width) != self.width or self.width < 1:
            raise SpaceError(f"combine width must be a positive integer, got {self.width!r}")

    def to_dict(self):
        return {"width": self.width}


@dataclass(frozen=True, order=True)
class Sample:
    mode: str
    k: int = DEFAULT_K

    op = Op.SAMPLE

    def __post_init__(self):
        if self.mode not in SAMPLE_MODES:
            raise SpaceError(f"unknown sample mode {self.mode!r}")
        if int(self.k) != self.k or self.k < 1:
            raise SpaceError(f"neighbor count must be a positive integer, got {self.k!r}")

    def to_dict(self):
        return {"mode": self.mode, "k": self.k}


Func = Union[Connect, Aggregate, Combine, Sample]
_FUNC_TYPES = {Op.CONNECT: Connect, Op.AGGREGATE: Aggregate, Op.COMBINE: Combine, Op.SAMPLE: Sample}

IDENTITY = Connect("identity")
SKIP = Connect("skip")


def func_key(func: Func) -> str:
    """Short stable string naming a function, e.g. ``aggregate/max/full``."""
    if isinstance(func, Connect):
        return f"connect/{func.mode}"
    if isinstance(func, Aggregate):
        return f"aggregate/{func.aggregator}/{func.message}"
    if isinstance(func, Combine):
        return f"combine/{func.width}"
    return f"sample/{func.mode}/{func.k}"


def func_from_dict(op: Op | str, d: Mapping) -> Func:
    op = Op(op)
    cls = _FUNC_TYPES[op]
    try:
        return cls(**d)
    except TypeError as exc:
        raise SpaceError(f"bad {op.value} function {dict(d)!r}: {exc}") from None


@dataclass(frozen=True)
class Position:
    """One slot of a genotype: an operation and its function."""

    func: Func

    @property
    def op(self) -> Op:
        return self.func.op

    def to_dict(self):
        return {"op": self.op.value, "func": self.func.to_dict()}

    @classmethod
    def from_dict(cls, d: Mapping) -> "Position":
        if not isinstance(d, Mapping) or "op" not in d or "func" not in d:
            raise SpaceError(f"position must have 'op' and 'func': {d!r}")
        try:
            op = Op(d["op"])
        except ValueError:
            raise SpaceError(f"unknown operation {d['op']!r}") from None
        return cls(func_from_dict(op, d["func"]))

    def __str__(self):
        return func_key(self.func)


def _sort_key(p: Position):
    return (OPS.index(p.op), func_key(p.func))


@dataclass(frozen=True)
class Genotype:
    """An architecture: ordered positions plus input/output dimensions."""

    positions: tuple[Position, ...]
    input_dim: int = 3
    num_classes: int = 4

    def __post_init__(self):
        object.__setattr__(self, "positions", tuple(self.positions))
        for p in self.positions:
            if not isinstance(p, Position):
                raise SpaceError(f"not a Position: {p!r}")
        if self.input_dim < 1 or self.num_classes < 2:
            raise SpaceError("input_dim must be >= 1 and num_classes >= 2")

    def __len__(self):
        return len(self.positions)

    @property
    def ops(self) -> tuple[Op, ...]:
        return tuple(p.op for p in self.positions)

    def count(self, op: Op, mode: str | None = None) -> int:
        return sum(
            1
            for p in self.positions
            if p.op is op and (mode is None or getattr(p.func, "mode", None) == mode)
        )

    def sort_key(self):
        return tuple(_sort_key(p) for p in self.positions)

    def to_dict(self):
        return {
            "positions": [p.to_dict() for p in self.positions],
            "input_dim": self.input_dim,
            "num_classes": self.num_classes,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_dict(cls, d: Mapping) -> "Genotype":
        if not isinstance(d, Mapping) or "positions" not in d:
            raise SpaceError("genotype must be an object with a 'positions' list")
        return cls(
            tuple(Position.from_dict(p) for p in d["positions"]),
            input_dim=int(d.get("input_dim", 3)),
            num_classes=int(d.get("num_classes", 4)),
        )

    @classmethod
    def from_json(cls, text: str) -> "Genotype":
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise SpaceError(f"genotype is not valid JSON: {exc}") from None
        return cls.from_dict(data)

    def __str__(self):
        return "[" + ", ".join(str(p) for p in self.positions) + "]"


def genotype(funcs: Sequence[Func], input_dim: int = 3, num_classes: int = 4) -> Genotype:
    """Shorthand: build a genotype from a list of function objects."""
    return Genotype(tuple(Position(f) for f in funcs), input_dim, num_classes)


@dataclass(frozen=True)
class SpaceConfig:
    """Which operations and functions may appear, and how many positions."""

    num_positions: int = 12
    ops: tuple[Op, ...] = OPS
    connect_modes: tuple[str, ...] = CONNECT_MODES
    aggregators: tuple[str, ...] = AGGREGATORS
    messages: tuple[str, ...] = MESSAGES
    widths: tuple[int, ...] = WIDTHS
    sample_modes: tuple[str, ...] = SAMPLE_MODES
    ks: tuple[int, ...] = (DEFAULT_K,)
    input_dim: int = 3
    num_classes: int = 4

    def __post_init__(self):
        for name in ("ops", "connect_modes", "aggregators", "messages", "widths", "sample_modes", "ks"):
            value = tuple(getattr(self, name))
            if not value:
                raise SpaceError(f"allowed set {name!r} is empty")
            if len(set(value)) != len(value):
                raise SpaceError(f"allowed set {name!r} has duplicates")
            object.__setattr__(self, name, value)
        object.__setattr__(self, "ops", tuple(Op(o) for o in self.ops))
        if self.num_positions < 1:
            raise SpaceError("num_positions must be >= 1")
        # constructing every function validates the allowed values
        self.assignments()

    @property
    def default_k(self) -> int:
        return self.ks[0]

    def functions(self, op: Op) -> tuple[Func, ...]:
        op = Op(op)
        if op is Op.CONNECT:
            return tuple(Connect(m) for m in self.connect_modes)
        if op is Op.AGGREGATE:
            return tuple(Aggregate(a, m) for a in self.aggregators for m in self.messages)
        if op is Op.COMBINE:
            return tuple(Combine(w) for w in self.widths)
        return tuple(Sample(m, k) for m in self.sample_modes for k in self.ks)

    def assignments(self) -> tuple[Position, ...]:
        """Every valid single-position assignment, in a fixed order."""
        return tuple(Position(f) for op in self.ops for f in self.functions(op))

    @property
    def upper_size(self) -> int:
        return (self.num_positions + 1) // 2

    def half_of(self, index: int) -> str:
        return "upper" if index < self.upper_size else "lower"

    def contains(self, g: Genotype) -> bool:
        allowed = set(self.assignments())
        return len(g) == self.num_positions and all(p in allowed for p in g.positions)

    def to_dict(self):
        return {
            "num_positions": self.num_positions,
            "ops": [o.value for o in self.ops],
            "connect_modes": list(self.connect_modes),
            "aggregators": list(self.aggregators),
            "messages": list(self.messages),
            "widths": list(self.widths),
            "sample_modes": list(self.sample_modes),
            "ks": list(self.ks),
            "input_dim": self.input_dim,
            "num_classes": self.num_classes,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "SpaceConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise SpaceError(f"unknown space config keys: {sorted(unknown)}")
        kw = {k: (tuple(v) if isinstance(v, list) else v) for k, v in d.items()}
        return cls(**kw)


@dataclass(frozen=True)
class FunctionSet:
    """Functions shared by every position of the upper and of the lower half."""

    upper: Mapping[Op, Func]
    lower: Mapping[Op, Func]

    def __post_init__(self):
        for name in ("upper", "lower"):
            m = dict(getattr(self, name))
            for op in OPS:
                if op not in m:
                    raise SpaceError(f"function set half {name!r} lacks {op.value}")
                if m[op].op is not op:
                    raise SpaceError(f"function {m[op]!r} filed under {op.value}")
            object.__setattr__(self, name, m)

    def __hash__(self):
        return hash(self.key())

    def __eq__(self, other):
        return isinstance(other, FunctionSet) and self.key() == other.key()

    def key(self) -> tuple[str, ...]:
        return tuple(func_key(self.upper[o]) for o in OPS) + tuple(func_key(self.lower[o]) for o in OPS)

    def genes(self) -> list[Func]:
        return [self.upper[o] for o in OPS] + [self.lower[o] for o in OPS]

    @classmethod
    def from_genes(cls, genes: Sequence[Func]) -> "FunctionSet":
        return cls(dict(zip(OPS, genes[:4])), dict(zip(OPS, genes[4:])))

    def apply(self, ops: Sequence[Op], config: SpaceConfig) -> Genotype:
        """Instantiate an operation sequence with this function set."""
        if len(ops) != config.num_positions:
            raise SpaceError(f"expected {config.num_positions} operations, got {len(ops)}")
        positions = []
        for i, op in enumerate(ops):
            half = self.upper if config.half_of(i) == "upper" else self.lower
            positions.append(Position(half[Op(op)]))
        return Genotype(tuple(positions), config.input_dim, config.num_classes)

    def to_dict(self):
        return {
            half: {o.value: getattr(self, half)[o].to_dict() for o in OPS}
            for half in ("upper", "lower")
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "FunctionSet":
        return cls(
            {Op(k): func_from_dict(k, v) for k, v in d["upper"].items()},
            {Op(k): func_from_dict(k, v) for k, v in d["lower"].items()},
        )


# --- counting ---------------------------------------------------------------


def _surjections(n: int, m: int) -> int:
    """Sequences of length n over m symbols that use every symbol."""
    return sum((-1) ** j * math.comb(m, j) * (m - j) ** n for j in range(m + 1))


def _half_size(n: int, counts: Sequence[int]) -> int:
    # distinct assignments of n positions when each op's function is shared
    if n == 0:
        return 1
    total = 0
    for r in range(1, len(counts) + 1):
        for subset in itertools.combinations(counts, r):
            total += _surjections(n, r) * math.prod(subset)
    return total


def space_size(config: SpaceConfig, shared_halves: bool = False) -> int:
    """Exact number of distinct genotypes in the space.

    With ``shared_halves`` every position of a half must use the same function
    for a given operation, so only genotypes expressible by some function set
    are counted.
    """
    counts = [len(config.functions(op)) for op in config.ops]
    n = config.num_positions
    if not shared_halves:
        return sum(counts) ** n
    return _half_size(config.upper_size, counts) * _half_size(n - config.upper_size, counts)


def function_set_count(config: SpaceConfig) -> int:
    """Number of distinct function sets for one half."""
    return math.prod(len(config.functions(op)) for op in OPS)


def search_candidates(config: SpaceConfig) -> int:
    """(operation sequence, function-set pair) tuples explored by the two-stage search."""
    fs = function_set_count(config)
    return len(config.ops) ** config.num_positions * fs * fs


def enumerate_space(config: SpaceConfig, shared_halves: bool = False) -> Iterator[Genotype]:
    """Yield every distinct genotype (brute force; for small spaces only)."""
    if not shared_halves:
        for combo in itertools.product(config.assignments(), repeat=config.num_positions):
            yield Genotype(combo, config.input_dim, config.num_classes)
        return
    seen = set()
    for fs in all_function_sets(config):
        for ops in itertools.product(config.ops, repeat=config.num_positions):
            g = fs.apply(ops, config)
            if g not in seen:
                seen.add(g)
                yield g


def all_function_sets(config: SpaceConfig) -> Iterator[FunctionSet]:
    per_op = [config.functions(op) for op in OPS]
    halves = list(itertools.product(*per_op))
    for up, lo in itertools.product(halves, repeat=2):
        yield FunctionSet.from_genes(list(up) + list(lo))


# --- sampling and variation -------------------------------------------------


def _rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def random_position(config: SpaceConfig, rng: np.random.Generator) -> Position:
    choices = config.assignments()
    return choices[int(rng.integers(len(choices)))]


def random_genotype(config: SpaceConfig, seed=None) -> Genotype:
    """Uniform sample over all valid per-position assignments."""
    rng = _rng(seed)
    choices = config.assignments()
    idx = rng.integers(len(choices), size=config.num_positions)
    return Genotype(tuple(choices[i] for i in idx), config.input_dim, config.num_classes)


def random_function_set(config: SpaceConfig, seed=None) -> FunctionSet:
    rng = _rng(seed)
    genes = []
    for _ in range(2):
        for op in OPS:
            fs = config.functions(op)
            genes.append(fs[int(rng.integers(len(fs)))])
    return FunctionSet.from_genes(genes)


def mutate(g: Genotype, rate: float, rng, config: SpaceConfig) -> Genotype:
    """Resample each position independently with probability ``rate``."""
    if not 0.0 <= rate <= 1.0:
        raise SpaceError(f"mutation rate must lie in [0, 1], got {rate}")
    rng = _rng(rng)
    choices = config.assignments()
    positions = list(g.positions)
    hits = rng.random(len(positions)) < rate
    for i in np.flatnonzero(hits):
        positions[i] = choices[int(rng.integers(len(choices)))]
    return Genotype(tuple(positions), g.input_dim, g.num_classes)


def crossover(a: Genotype, b: Genotype, rng=None, cut: int | None = None) -> Genotype:
    """Single-point crossover: prefix of ``a`` up to ``cut``, suffix of ``b``."""
    if len(a) != len(b) or a.input_dim != b.input_dim or a.num_classes != b.num_classes:
        raise SpaceError("crossover parents come from different configurations")
    if cut is None:
        cut = int(_rng(rng).integers(len(a) + 1))
    if not 0 <= cut <= len(a):
        raise SpaceError(f"cut {cut} outside [0, {len(a)}]")
    return Genotype(a.positions[:cut] + b.positions[cut:], a.input_dim, a.num_classes)


# --- structure --------------------------------------------------------------


def merge_samples(positions: Sequence[Position]) -> list[Position]:
    out: list[Position] = []
    for p in positions:
        if p.op is Op.SAMPLE and out and out[-1] == p:
            continue
        out.append(p)
    return out


def canonical_form(g: Genotype) -> Genotype:
    """Drop identity connects, then merge adjacent duplicate samples."""
    kept = [p for p in g.positions if p.func != IDENTITY]
    return Genotype(tuple(merge_samples(kept)), g.input_dim, g.num_classes)


DGCNN_WIDTHS = (64, 64, 128, 256)


def dgcnn_like_preset(config: SpaceConfig) -> Genotype:
    """Four EdgeConv-style blocks: KNN sample, max/full aggregate, combine."""
    n = config.num_positions
    if n < 12:
        raise SpaceError(f"the DGCNN-like preset needs at least 12 positions, got {n}")
    funcs: list[Func] = []
    for w in DGCNN_WIDTHS:
        funcs += [Sample("knn", config.default_k), Aggregate("max", "full"), Combine(w)]
    funcs += [IDENTITY] * (n - 12)
    return genotype(funcs, config.input_dim, config.num_classes)


def layer_widths(g: Genotype) -> list[tuple[int, int]]:
    """(input width, output width) of each position in the deployed network.

    Aggregates emit their message width, combines their declared width, and a
    skip connection zero-pads the narrower operand.
    """
    widths = []
    prev_in = d = g.input_dim
    for p in g.positions:
        d_in = d
        f = p.func
        if isinstance(f, Aggregate):
            d = message_width(f.message, d)
        elif isinstance(f, Combine):
            d = f.width
        elif f == SKIP:
            d = max(d, prev_in)
        widths.append((d_in, d))
        prev_in = d_in
    return widths


def message_width(message: str, d: int) -> int:
    return {
        "source_pos": d,
        "target_pos": d,
        "rel_pos": d,
        "distance": 1,
        "source_rel": 2 * d,
        "target_rel": 2 * d,
        "full": 3 * d,
    }[message]
