"""
Parser and serializer for the `<curves>` sketch language.

An LLM response may contain any prose, but it must hold exactly one
`<curves>...</curves>` block whose content is a nested list literal:
a list of curves, each a list of 4 points, each a list of 3 decimal numbers.
Only brackets, commas, whitespace and numeric literals are accepted inside
the block; nothing is ever evaluated. The grammar is in grammar/curves.ebnf.

Every input yields either a ParsedDocument or exactly one ParseError.

Usage:
    from scripts.sketch_text import ParserLimits, parse, serialize

    doc = parse(llm_text, ParserLimits(strict=True))
    text = serialize(doc.sketch)
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Optional

from scripts.curves import (
    DEFAULT_DEGENERACY_EPSILON,
    BezierCurve,
    Point3,
    Sketch,
    is_degenerate,
)

OPEN_TAG = '<curves>'
CLOSE_TAG = '</curves>'

DEFAULT_BOUND = 0.8
DEFAULT_MAX_CURVES = 512
DEFAULT_PRECISION = 4

_NUMBER = re.compile(r'[+-]?(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?')
_ALLOWED = frozenset('0123456789abcdefghijklmnopqrstuvwxyzABCDEFGHIJKLMNOPQRSTUVWXYZ_.+-[],')
_WORD = re.compile(r'[A-Za-z0-9_.+\-]+')


class ParseErrorKind(str, Enum):
    MISSING_DELIMITER = 'MissingDelimiter'
    MULTIPLE_DELIMITERS = 'MultipleDelimiters'
    BRACKET_MISMATCH = 'BracketMismatch'
    ARITY_ERROR = 'ArityError'
    NON_NUMERIC_TOKEN = 'NonNumericToken'
    OUT_OF_RANGE = 'OutOfRange'
    EMPTY_SKETCH = 'EmptySketch'
    FORBIDDEN_CONTENT = 'ForbiddenContent'


class WarningKind(str, Enum):
    DEGENERATE_CURVE = 'DegenerateCurve'
    EXCESSIVE_CURVE_COUNT = 'ExcessiveCurveCount'
    NEAR_BOUNDARY = 'NearBoundary'
    CURVE_BUDGET_MISMATCH = 'CurveBudgetMismatch'


class ParseError(Exception):
    """Rejection of a sketch response.

    Attributes:
        kind: ParseErrorKind
        position: UTF-8 byte offset into the full source text
        detail: Human-readable explanation
    """

    def __init__(self, kind: ParseErrorKind, position: int, detail: str):
        self.kind = kind
        self.position = position
        self.detail = detail
        super().__init__(f"{kind.value} at byte {position}: {detail}")

    def as_dict(self) -> dict:
        return {'kind': self.kind.value, 'position': self.position, 'detail': self.detail}


@dataclass(frozen=True)
class SketchWarning:
    kind: WarningKind
    curve_index: int

    def as_dict(self) -> dict:
        return {'kind': self.kind.value, 'curve_index': self.curve_index}


@dataclass(frozen=True)
class ParserLimits:
    """Validation knobs.

    strict=True rejects out-of-range coordinates (final inference);
    strict=False clamps them and warns (rollouts keep failures as negatives).
    """

    bound: float = DEFAULT_BOUND
    strict: bool = False
    max_curves: int = DEFAULT_MAX_CURVES
    degeneracy_epsilon: float = DEFAULT_DEGENERACY_EPSILON
    expected_curves: Optional[int] = None


@dataclass(frozen=True)
class ParsedDocument:
    sketch: Sketch
    raw_span: tuple[int, int]
    warnings: tuple[SketchWarning, ...] = field(default_factory=tuple)


# --------------------------------------------------------------------------- #
# Block location and bracket balance
# --------------------------------------------------------------------------- #

def _byte_offset(source: str, index: int) -> int:
    return len(source[:index].encode('utf-8', errors='surrogatepass'))


def _locate_block(source: str) -> tuple[int, int]:
    """Return (content_start, content_end) character indices of the single block."""
    opens = [m.start() for m in re.finditer(re.escape(OPEN_TAG), source)]
    closes = [m.start() for m in re.finditer(re.escape(CLOSE_TAG), source)]

    if not opens and not closes:
        raise ParseError(ParseErrorKind.MISSING_DELIMITER, 0,
                         f"no {OPEN_TAG}...{CLOSE_TAG} block found")
    if len(opens) > 1 or len(closes) > 1:
        extra = opens[1] if len(opens) > 1 else closes[1]
        raise ParseError(ParseErrorKind.MULTIPLE_DELIMITERS, _byte_offset(source, extra),
                         f"found {len(opens)} opening and {len(closes)} closing tags, expected one block")
    if not opens:
        raise ParseError(ParseErrorKind.MISSING_DELIMITER, _byte_offset(source, closes[0]),
                         f"{CLOSE_TAG} without a preceding {OPEN_TAG}")
    if not closes:
        raise ParseError(ParseErrorKind.MISSING_DELIMITER, _byte_offset(source, opens[0]),
                         f"{OPEN_TAG} is never closed")
    if closes[0] < opens[0]:
        raise ParseError(ParseErrorKind.MISSING_DELIMITER, _byte_offset(source, closes[0]),
                         f"{CLOSE_TAG} appears before {OPEN_TAG}")

    return opens[0] + len(OPEN_TAG), closes[0]


def _check_brackets(source: str, start: int, end: int) -> None:
    pending = []
    for i in range(start, end):
        ch = source[i]
        if ch == '[':
            pending.append(i)
        elif ch == ']':
            if not pending:
                raise ParseError(ParseErrorKind.BRACKET_MISMATCH, _byte_offset(source, i),
                                 "closing bracket without a matching opening bracket")
            pending.pop()
    if pending:
        raise ParseError(ParseErrorKind.BRACKET_MISMATCH, _byte_offset(source, pending[-1]),
                         f"{len(pending)} unclosed bracket(s)")


# --------------------------------------------------------------------------- #
# Tokenizing and list structure
# --------------------------------------------------------------------------- #

class _Node:
    __slots__ = ('items', 'pos')

    def __init__(self, pos: int):
        self.items: list = []
        self.pos = pos


class _Number:
    __slots__ = ('value', 'pos')

    def __init__(self, value: float, pos: int):
        self.value = value
        self.pos = pos


def _tokenize(source: str, start: int, end: int) -> list[tuple[str, object, int]]:
    for i in range(start, end):
        ch = source[i]
        if ch not in _ALLOWED and not ch.isspace():
            raise ParseError(ParseErrorKind.FORBIDDEN_CONTENT, _byte_offset(source, i),
                             f"character {ch!r} is not allowed inside the block "
                             "(only numbers, brackets and commas)")

    tokens = []
    i = start
    while i < end:
        ch = source[i]
        if ch.isspace():
            i += 1
        elif ch in '[],':
            tokens.append((ch, None, i))
            i += 1
        else:
            word = _WORD.match(source, i, end).group(0)
            if not _NUMBER.fullmatch(word):
                raise ParseError(ParseErrorKind.NON_NUMERIC_TOKEN, _byte_offset(source, i),
                                 f"{word!r} is not a decimal number")
            value = float(word)
            if not math.isfinite(value):
                raise ParseError(ParseErrorKind.NON_NUMERIC_TOKEN, _byte_offset(source, i),
                                 f"{word!r} is not a finite number")
            tokens.append(('num', value, i))
            i += len(word)
    return tokens


def _build_tree(source: str, tokens: list) -> Optional[_Node]:
    """Assemble nested lists without recursion; brackets are already balanced."""
    root = None
    stack: list[_Node] = []
    prev = None  # 'open' | 'comma' | 'value'

    for kind, value, pos in tokens:
        if root is not None and not stack:
            raise ParseError(ParseErrorKind.FORBIDDEN_CONTENT, _byte_offset(source, pos),
                             "unexpected content after the sketch list")
        if kind == '[':
            if prev == 'value':
                raise ParseError(ParseErrorKind.FORBIDDEN_CONTENT, _byte_offset(source, pos),
                                 "missing comma between list items")
            node = _Node(pos)
            if stack:
                stack[-1].items.append(node)
            else:
                root = node
            stack.append(node)
            prev = 'open'
        elif kind == ']':
            stack.pop()
            prev = 'value'
        elif kind == ',':
            if not stack or prev != 'value':
                raise ParseError(ParseErrorKind.FORBIDDEN_CONTENT, _byte_offset(source, pos),
                                 "misplaced comma")
            prev = 'comma'
        else:
            if not stack:
                raise ParseError(ParseErrorKind.FORBIDDEN_CONTENT, _byte_offset(source, pos),
                                 "expected a list of curves, got a bare number")
            if prev == 'value':
                raise ParseError(ParseErrorKind.FORBIDDEN_CONTENT, _byte_offset(source, pos),
                                 "missing comma between numbers")
            stack[-1].items.append(_Number(value, pos))
            prev = 'value'
    return root


# --------------------------------------------------------------------------- #
# Public API
# --------------------------------------------------------------------------- #

def parse(source: str, limits: ParserLimits = ParserLimits()) -> ParsedDocument:
    """Parse a full LLM response into a sketch.

    Raises:
        ParseError: With exactly one kind and a byte position
    """
    start, end = _locate_block(source)
    _check_brackets(source, start, end)
    tokens = _tokenize(source, start, end)
    root = _build_tree(source, tokens)

    if root is None or not root.items:
        pos = root.pos if root is not None else start
        raise ParseError(ParseErrorKind.EMPTY_SKETCH, _byte_offset(source, pos),
                         "the block contains no curves")

    curves = []
    warnings = []
    for index, curve_node in enumerate(root.items):
        if not isinstance(curve_node, _Node) or len(curve_node.items) != 4:
            got = 'a number' if isinstance(curve_node, _Number) else f"{len(curve_node.items)} items"
            raise ParseError(ParseErrorKind.ARITY_ERROR, _byte_offset(source, curve_node.pos),
                             f"curve {index} must be a list of 4 points, got {got}")

        points = []
        clamped = False
        for point_node in curve_node.items:
            if (not isinstance(point_node, _Node) or len(point_node.items) != 3
                    or not all(isinstance(c, _Number) for c in point_node.items)):
                raise ParseError(ParseErrorKind.ARITY_ERROR, _byte_offset(source, point_node.pos),
                                 f"every point of curve {index} must be a list of 3 numbers")
            for coord in point_node.items:
                if abs(coord.value) > limits.bound:
                    if limits.strict:
                        raise ParseError(ParseErrorKind.OUT_OF_RANGE, _byte_offset(source, coord.pos),
                                         f"{coord.value} is outside [-{limits.bound}, {limits.bound}]")
                    clamped = True
            point = Point3(*(c.value for c in point_node.items))
            points.append(point.clamped(limits.bound) if clamped else point)

        curve = BezierCurve(*points)
        if clamped:
            warnings.append(SketchWarning(WarningKind.NEAR_BOUNDARY, index))
        if is_degenerate(curve, limits.degeneracy_epsilon):
            warnings.append(SketchWarning(WarningKind.DEGENERATE_CURVE, index))
        curves.append(curve)

    if len(curves) > limits.max_curves:
        warnings.append(SketchWarning(WarningKind.EXCESSIVE_CURVE_COUNT, limits.max_curves))
    if limits.expected_curves is not None and len(curves) != limits.expected_curves:
        warnings.append(SketchWarning(WarningKind.CURVE_BUDGET_MISMATCH, len(curves) - 1))

    return ParsedDocument(
        sketch=Sketch(tuple(curves)),
        raw_span=(_byte_offset(source, start), _byte_offset(source, end)),
        warnings=tuple(warnings),
    )


def serialize(sketch: Sketch, precision: int = DEFAULT_PRECISION) -> str:
    """Canonical delimiter-wrapped form, no whitespace, fixed decimals."""
    def num(v: float) -> str:
        return f"{v:.{precision}f}"

    body = ','.join(
        '[' + ','.join(f"[{num(p.x)},{num(p.y)},{num(p.z)}]" for p in curve.points) + ']'
        for curve in sketch.curves
    )
    return f"{OPEN_TAG}[{body}]{CLOSE_TAG}"


def has_balanced_block(source: str) -> bool:
    """True iff the source holds a single block with balanced brackets."""
    try:
        start, end = _locate_block(source)
        _check_brackets(source, start, end)
    except ParseError:
        return False
    return True


def bracket_match_rate(sources: Iterable[str]) -> float:
    """Fraction of sources with one delimiter block and balanced brackets.

    Raises:
        ValueError: If sources is empty
    """
    sources = list(sources)
    if not sources:
        raise ValueError("bracket_match_rate needs at least one source")
    return sum(has_balanced_block(s) for s in sources) / len(sources)
