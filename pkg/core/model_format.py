"""
Text model format (v1).

    spnmodel v1 vars=<n>
    var <index> <name> discrete <arity>        (optional schema lines)
    var <index> <name> continuous
    leaf <id> cat <var> <p0> ... <pk-1>
    leaf <id> gauss <var> <mean> <variance>
    prod <id> <child_id> ...
    sum <id> (<child_id>:<weight>) ...
    root <id>

One node per line, children before parents, root last. Probabilities and
weights are written in linear space with 17 significant digits. Lines starting
with `#` are comments.
"""

from __future__ import annotations

import math
import re
from pathlib import Path
from urllib.parse import quote, unquote

from data import ColumnMeta
from spn_core import (
    CategoricalDist,
    GaussianDist,
    LeafNode,
    ProductNode,
    Spn,
    SpnBuilder,
    SpnNode,
    SumNode,
    ValidationReport,
    validate,
)

HEADER_RE = re.compile(r"^spnmodel v1 vars=(\d+)$")
SUM_CHILD_RE = re.compile(r"^\((-?\d+):([^()\s]+)\)$")
TOKEN_RE = re.compile(r"\S+")


class ModelParseError(ValueError):
    def __init__(self, message: str, line: int, position: int = 1):
        self.line = line
        self.position = position
        super().__init__(f"line {line}, position {position}: {message}")


class ModelValidationError(ValueError):
    def __init__(self, report: ValidationReport):
        self.report = report
        details = "; ".join(str(v) for v in report.violations)
        super().__init__(f"decoded model is invalid: {details}")


def _real(value: float) -> str:
    return f"{value:.17g}"


def serialize(spn: Spn) -> str:
    """Canonical text form: reachable nodes renumbered in post-order."""
    lines = [f"spnmodel v1 vars={spn.n_vars}"]
    for index, column in enumerate(spn.schema):
        if column.is_discrete:
            lines.append(f"var {index} {quote(column.name, safe='')} discrete {column.arity}")
        else:
            lines.append(f"var {index} {quote(column.name, safe='')} continuous")

    ids: dict[int, int] = {}
    for node_id in spn.order:
        new_id = len(ids)
        ids[node_id] = new_id
        node = spn.nodes[node_id]
        if isinstance(node, LeafNode):
            dist = node.dist
            if isinstance(dist, CategoricalDist):
                probs = " ".join(_real(math.exp(lp)) for lp in dist.log_probs)
                lines.append(f"leaf {new_id} cat {node.var} {probs}")
            else:
                lines.append(f"leaf {new_id} gauss {node.var} {_real(dist.mean)} {_real(dist.variance)}")
        elif isinstance(node, ProductNode):
            lines.append(f"prod {new_id} " + " ".join(str(ids[c]) for c in node.children))
        else:
            pairs = " ".join(
                f"({ids[c]}:{_real(math.exp(lw))})" for c, lw in zip(node.children, node.log_weights)
            )
            lines.append(f"sum {new_id} {pairs}")
    lines.append(f"root {ids[spn.root]}")
    return "\n".join(lines) + "\n"


class _Parser:
    def __init__(self, text: str):
        self.text = text
        self.n_vars = -1
        self.declared: dict[int, ColumnMeta] = {}
        self.builder_nodes: list[SpnNode] = []
        self.ids: dict[int, int] = {}
        self.root: int | None = None

    def fail(self, message: str, line_no: int, tokens: list[re.Match[str]], index: int = 0) -> ModelParseError:
        position = tokens[index].start() + 1 if index < len(tokens) else 1
        return ModelParseError(message, line_no, position)

    def number(self, tokens: list[re.Match[str]], index: int, line_no: int) -> float:
        if index >= len(tokens):
            raise self.fail("missing value", line_no, tokens, len(tokens) - 1)
        try:
            value = float(tokens[index].group())
        except ValueError:
            raise self.fail(f"not a number: {tokens[index].group()!r}", line_no, tokens, index) from None
        if math.isnan(value):
            raise self.fail("NaN is not allowed", line_no, tokens, index)
        return value

    def integer(self, tokens: list[re.Match[str]], index: int, line_no: int) -> int:
        if index >= len(tokens):
            raise self.fail("missing integer", line_no, tokens, len(tokens) - 1)
        try:
            return int(tokens[index].group())
        except ValueError:
            raise self.fail(f"not an integer: {tokens[index].group()!r}", line_no, tokens, index) from None

    def child(self, file_id: int, line_no: int, tokens: list[re.Match[str]], index: int) -> int:
        if file_id not in self.ids:
            raise self.fail(f"child {file_id} is not defined before use", line_no, tokens, index)
        return self.ids[file_id]

    def define(self, file_id: int, node: SpnNode, line_no: int, tokens: list[re.Match[str]]) -> None:
        if file_id in self.ids:
            raise self.fail(f"node id {file_id} defined twice", line_no, tokens, 1)
        self.ids[file_id] = len(self.builder_nodes)
        self.builder_nodes.append(node)

    def parse_line(self, line_no: int, line: str) -> None:
        tokens = list(TOKEN_RE.finditer(line))
        keyword = tokens[0].group()
        if self.root is not None:
            raise self.fail("content after the root line", line_no, tokens)
        if keyword == "var":
            index = self.integer(tokens, 1, line_no)
            if not 0 <= index < self.n_vars:
                raise self.fail(f"variable {index} outside 0..{self.n_vars - 1}", line_no, tokens, 1)
            if len(tokens) < 4:
                raise self.fail("expected: var <index> <name> <kind> [arity]", line_no, tokens)
            name = unquote(tokens[2].group())
            kind = tokens[3].group()
            if kind == "discrete":
                arity = self.integer(tokens, 4, line_no)
                if arity < 2:
                    raise self.fail("arity must be >= 2", line_no, tokens, 4)
                self.declared[index] = ColumnMeta.discrete(name, arity)
            elif kind == "continuous":
                self.declared[index] = ColumnMeta.continuous(name)
            else:
                raise self.fail(f"unknown variable kind {kind!r}", line_no, tokens, 3)
        elif keyword == "leaf":
            file_id = self.integer(tokens, 1, line_no)
            if len(tokens) < 3:
                raise self.fail("missing leaf family", line_no, tokens)
            family = tokens[2].group()
            var = self.integer(tokens, 3, line_no)
            if family == "cat":
                probs = [self.number(tokens, i, line_no) for i in range(4, len(tokens))]
                if not probs:
                    raise self.fail("categorical leaf without probabilities", line_no, tokens)
                for i, p in enumerate(probs):
                    if p < 0:
                        raise self.fail("negative probability", line_no, tokens, 4 + i)
                log_probs = tuple(math.log(p) if p > 0 else -math.inf for p in probs)
                self.define(file_id, LeafNode(var=var, dist=CategoricalDist(log_probs=log_probs)), line_no, tokens)
            elif family == "gauss":
                if len(tokens) != 6:
                    raise self.fail("expected: leaf <id> gauss <var> <mean> <variance>", line_no, tokens)
                mean = self.number(tokens, 4, line_no)
                variance = self.number(tokens, 5, line_no)
                self.define(file_id, LeafNode(var=var, dist=GaussianDist(mean=mean, variance=variance)), line_no, tokens)
            else:
                raise self.fail(f"unknown leaf family {family!r}", line_no, tokens, 2)
        elif keyword == "prod":
            file_id = self.integer(tokens, 1, line_no)
            children = [
                self.child(self.integer(tokens, i, line_no), line_no, tokens, i) for i in range(2, len(tokens))
            ]
            self.define(file_id, ProductNode(children=tuple(children)), line_no, tokens)
        elif keyword == "sum":
            file_id = self.integer(tokens, 1, line_no)
            children: list[int] = []
            log_weights: list[float] = []
            for i in range(2, len(tokens)):
                match = SUM_CHILD_RE.match(tokens[i].group())
                if match is None:
                    raise self.fail("expected (<child_id>:<weight>)", line_no, tokens, i)
                children.append(self.child(int(match.group(1)), line_no, tokens, i))
                try:
                    weight = float(match.group(2))
                except ValueError:
                    raise self.fail(f"not a number: {match.group(2)!r}", line_no, tokens, i) from None
                if not weight >= 0:
                    raise self.fail("weights must be non-negative", line_no, tokens, i)
                log_weights.append(math.log(weight) if weight > 0 else -math.inf)
            self.define(file_id, SumNode(children=tuple(children), log_weights=tuple(log_weights)), line_no, tokens)
        elif keyword == "root":
            if len(tokens) != 2:
                raise self.fail("expected: root <id>", line_no, tokens)
            self.root = self.child(self.integer(tokens, 1, line_no), line_no, tokens, 1)
        else:
            raise self.fail(f"unknown record {keyword!r}", line_no, tokens)

    def schema(self) -> list[ColumnMeta]:
        inferred: dict[int, ColumnMeta] = {}
        for node in self.builder_nodes:
            if not isinstance(node, LeafNode) or not 0 <= node.var < self.n_vars:
                continue
            if isinstance(node.dist, CategoricalDist):
                arity = max(node.dist.arity, 2)
                previous = inferred.get(node.var)
                if previous is None or (previous.is_discrete and (previous.arity or 0) < arity):
                    inferred[node.var] = ColumnMeta.discrete(f"x{node.var}", arity)
            elif node.var not in inferred:
                inferred[node.var] = ColumnMeta.continuous(f"x{node.var}")
        columns = []
        for index in range(self.n_vars):
            column = self.declared.get(index) or inferred.get(index) or ColumnMeta.discrete(f"x{index}", 2)
            columns.append(column)
        return columns

    def parse(self) -> Spn:
        last_line = 0
        for line_no, raw in enumerate(self.text.splitlines(), 1):
            line = raw.strip()
            last_line = line_no
            if not line or line.startswith("#"):
                continue
            if self.n_vars < 0:
                match = HEADER_RE.match(line)
                if match is None:
                    raise ModelParseError("expected header 'spnmodel v1 vars=<n>'", line_no, 1)
                self.n_vars = int(match.group(1))
                continue
            self.parse_line(line_no, line)
        if self.n_vars < 0:
            raise ModelParseError("empty model text", max(last_line, 1), 1)
        if self.root is None:
            raise ModelParseError("missing root line (truncated model?)", last_line + 1, 1)
        builder = SpnBuilder(self.schema())
        for node in self.builder_nodes:
            builder.add_node(node)
        return builder.build(self.root)


def deserialize(text: str, check: bool = True) -> Spn:
    """Parse a v1 model; with `check`, reject structures that fail validation."""
    spn = _Parser(text).parse()
    if check:
        report = validate(spn)
        if not report.is_valid:
            raise ModelValidationError(report)
    return spn


def save_model(spn: Spn, path: str | Path) -> None:
    Path(path).write_text(serialize(spn), encoding="utf-8")


def load_model(path: str | Path, check: bool = True) -> Spn:
    return deserialize(Path(path).read_text(encoding="utf-8"), check=check)
