"""Graphviz DOT export of genotypes and a small parser for the subset we emit."""
from __future__ import annotations

import re
from dataclasses import dataclass, field

from .design_space import Aggregate, Connect, Genotype, Sample, canonical_form, func_key


def _quote(s: str) -> str:
    # backslash sequences such as \n are DOT label escapes and pass through
    return '"' + s.replace('"', '\\"') + '"'


def export_dot(g: Genotype, name: str = "genotype") -> str:
    """One node per canonical position, dataflow edges in order.

    Dashed edges run from the sample that built an edge list to each later
    aggregate using it, and from a skip source to the skip; a sample standing
    for merged duplicates is annotated with the merge count.
    """
    canon = canonical_form(g)
    # count how many raw samples each canonical sample absorbed
    kept = [p for p in g.positions if not (isinstance(p.func, Connect) and p.func.mode == "identity")]
    merged = []
    for p in kept:
        if isinstance(p.func, Sample) and merged and merged[-1][0] == p:
            merged[-1][1] += 1
        else:
            merged.append([p, 1])
    lines = [f"digraph {_quote(name)} {{", "  rankdir=LR;", '  input [label="input", shape=box];']
    for i, (p, count) in enumerate(merged):
        label = func_key(p.func).replace("/", "\\n", 1)
        if count > 1:
            label += f"\\n(merged x{count})"
        lines.append(f"  p{i} [label={_quote(label)}];")
    lines.append('  output [label="output", shape=box];')
    names = ["input"] + [f"p{i}" for i in range(len(canon))] + ["output"]
    for a, b in zip(names, names[1:]):
        lines.append(f"  {a} -> {b};")
    last_sample = None
    for i, p in enumerate(canon.positions):
        f = p.func
        if isinstance(f, Sample):
            last_sample = i
        elif isinstance(f, Aggregate) and last_sample is not None and last_sample != i - 1:
            lines.append(f'  p{last_sample} -> p{i} [style=dashed, label="edges"];')
        elif isinstance(f, Connect) and f.mode == "skip" and i >= 1:
            src = "input" if i == 1 else f"p{i - 2}"
            lines.append(f'  {src} -> p{i} [style=dashed, label="skip"];')
    lines.append("}")
    return "\n".join(lines) + "\n"


class DotError(ValueError):
    pass


@dataclass
class DotGraph:
    name: str
    directed: bool
    nodes: dict[str, dict[str, str]] = field(default_factory=dict)
    edges: list[tuple[str, str, dict[str, str]]] = field(default_factory=list)
    graph_attrs: dict[str, str] = field(default_factory=dict)


_TOKEN = re.compile(
    r'\s*(?:(?P<str>"(?:[^"\\]|\\.)*")|(?P<arrow>->|--)|(?P<id>[A-Za-z_][A-Za-z_0-9]*|-?(?:\.\d+|\d+(?:\.\d*)?))'
    r"|(?P<punct>[{}\[\];,=])|(?P<comment>//[^\n]*|/\*.*?\*/|#[^\n]*))",
    re.S,
)


def _tokens(text: str):
    pos = 0
    out = []
    while pos < len(text):
        if text[pos:].strip() == "":
            break
        m = _TOKEN.match(text, pos)
        if not m or m.end() == pos:
            raise DotError(f"unexpected character at offset {pos}: {text[pos]!r}")
        pos = m.end()
        if m.group("comment"):
            continue
        kind = m.lastgroup
        val = m.group(kind)
        if kind == "str":
            val = re.sub(r'\\(["\\])', r"\1", val[1:-1])
            kind = "id"
        out.append((kind, val))
    return out


def parse_dot(text: str) -> DotGraph:
    """Parse a single (di)graph of node, edge and attribute statements.

    Subgraphs, ports and HTML labels are not supported.
    """
    toks = _tokens(text)
    i = 0

    def peek(k=0):
        return toks[i + k] if i + k < len(toks) else (None, None)

    def take(kind=None, val=None):
        nonlocal i
        t = peek()
        if t[0] is None or (kind and t[0] != kind) or (val is not None and t[1] != val):
            raise DotError(f"expected {val or kind}, got {t[1]!r} at token {i}")
        i += 1
        return t[1]

    def attrs():
        out = {}
        while peek() == ("punct", "["):
            take()
            while peek() != ("punct", "]"):
                k = take("id")
                take("punct", "=")
                out[k] = take("id")
                if peek()[1] in (",", ";"):
                    take()
            take("punct", "]")
        return out

    if peek() == ("id", "strict"):
        take()
    head = take("id")
    if head not in ("digraph", "graph"):
        raise DotError(f"expected graph or digraph, got {head!r}")
    directed = head == "digraph"
    name = take("id") if peek()[0] == "id" else ""
    g = DotGraph(name, directed)
    take("punct", "{")
    while peek() != ("punct", "}"):
        if peek()[0] is None:
            raise DotError("unterminated graph body")
        if peek() == ("punct", ";"):
            take()
            continue
        first = take("id")
        if first in ("graph", "node", "edge") and peek() == ("punct", "["):
            a = attrs()
            if first == "graph":
                g.graph_attrs.update(a)
        elif peek() == ("punct", "="):
            take()
            g.graph_attrs[first] = take("id")
        elif peek()[0] == "arrow":
            chain = [first]
            while peek()[0] == "arrow":
                op = take("arrow")
                if (op == "->") != directed:
                    raise DotError(f"edge operator {op!r} in a {'di' if directed else ''}graph")
                chain.append(take("id"))
            a = attrs()
            for n in chain:
                g.nodes.setdefault(n, {})
            for u, v in zip(chain, chain[1:]):
                g.edges.append((u, v, dict(a)))
        else:
            g.nodes.setdefault(first, {}).update(attrs())
        if peek() == ("punct", ";"):
            take()
    take("punct", "}")
    if i != len(toks):
        raise DotError("trailing tokens after graph body")
    return g
