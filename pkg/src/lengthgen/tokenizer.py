"""Sixteen-token character vocabulary and the padded, reversed-answer line format.

A line for operands of width W and answer width W_c looks like::

    BOS a_W ... a_1 op b_W ... b_1 = c_1 ... c_Wc ; EOS

Operands are written most-significant first and zero padded; the answer is
written least-significant first. In text files BOS/EOS are implicit and each
line holds one example, e.g. ``1234+5678=21960;``.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .numtheory import TaskKind, max_result, num_digits

SYMBOLS = ("0", "1", "2", "3", "4", "5", "6", "7", "8", "9", "+", "*", "=", ";", "<bos>", "<eos>")
VOCAB_SIZE = len(SYMBOLS)
ID = {s: i for i, s in enumerate(SYMBOLS)}
PLUS, TIMES, EQUALS, SEMI, BOS, EOS = (ID[s] for s in ("+", "*", "=", ";", "<bos>", "<eos>"))
DIGIT_IDS = tuple(range(10))


class MalformedAnswer(ValueError):
    """Generated answer field could not be parsed."""


class ParseError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} at offset {offset}")
        self.offset = offset


@dataclass(frozen=True)
class ExamplePair:
    a: int
    b: int
    result: int


@dataclass(frozen=True)
class LineLayout:
    operand_width: int
    answer_width: int
    op_symbol: str = "+"

    def __post_init__(self):
        if self.operand_width < 1 or self.answer_width < 1:
            raise ValueError("field widths must be positive")
        if self.op_symbol not in ("+", "*"):
            raise ValueError(f"operator must be '+' or '*', got {self.op_symbol!r}")

    @classmethod
    def for_task(cls, task: TaskKind, operand_width: int) -> "LineLayout":
        """Smallest answer width that holds every result for operands below 10**W."""
        return cls(operand_width, num_digits(max_result(task, operand_width)), task.symbol)

    @property
    def seq_len(self) -> int:
        return 2 * self.operand_width + self.answer_width + 5

    @property
    def prompt_len(self) -> int:
        """Index just past '='; generation conditions on tokens[:prompt_len]."""
        return 2 * self.operand_width + 3

    @property
    def answer_slice(self) -> slice:
        return slice(self.prompt_len, self.prompt_len + self.answer_width)

    def covers(self, task: TaskKind) -> bool:
        return task.symbol == self.op_symbol and num_digits(max_result(task, self.operand_width)) <= self.answer_width

    def to_dict(self) -> dict:
        return {"operand_width": self.operand_width, "answer_width": self.answer_width, "op_symbol": self.op_symbol}


@dataclass(frozen=True)
class EncodedExample:
    tokens: tuple[int, ...]
    prompt_len: int


def _digits_msb_first(value: int, width: int, field: str) -> list[int]:
    if value < 0 or value >= 10**width:
        raise OverflowError(f"{field} {value} does not fit in {width} digits")
    return [(value // 10**i) % 10 for i in reversed(range(width))]


def encode(pair: ExamplePair, layout: LineLayout) -> EncodedExample:
    w, wc = layout.operand_width, layout.answer_width
    answer = _digits_msb_first(pair.result, wc, "result")[::-1]
    tokens = (
        [BOS]
        + _digits_msb_first(pair.a, w, "operand a")
        + [ID[layout.op_symbol]]
        + _digits_msb_first(pair.b, w, "operand b")
        + [EQUALS]
        + answer
        + [SEMI, EOS]
    )
    return EncodedExample(tuple(tokens), layout.prompt_len)


def encode_batch(a: np.ndarray, b: np.ndarray, result: np.ndarray, layout: LineLayout) -> np.ndarray:
    """Vectorised :func:`encode`; returns a (N, seq_len) uint8 array."""
    a = np.asarray(a, dtype=np.int64)
    b = np.asarray(b, dtype=np.int64)
    result = np.asarray(result, dtype=np.int64)
    w, wc = layout.operand_width, layout.answer_width
    for name, arr, width in (("operand a", a, w), ("operand b", b, w), ("result", result, wc)):
        if arr.size and (arr.min() < 0 or arr.max() >= 10**width):
            raise OverflowError(f"{name} does not fit in {width} digits")
    out = np.empty((len(a), layout.seq_len), dtype=np.uint8)
    out[:, 0] = BOS
    pw = 10 ** np.arange(w - 1, -1, -1, dtype=np.int64)
    out[:, 1 : 1 + w] = (a[:, None] // pw) % 10
    out[:, 1 + w] = ID[layout.op_symbol]
    out[:, 2 + w : 2 + 2 * w] = (b[:, None] // pw) % 10
    out[:, 2 + 2 * w] = EQUALS
    pc = 10 ** np.arange(wc, dtype=np.int64)
    out[:, layout.answer_slice] = (result[:, None] // pc) % 10
    out[:, -2] = SEMI
    out[:, -1] = EOS
    return out


def decode_answer(tokens: Sequence[int], layout: LineLayout | None = None) -> int:
    """Parse a reversed answer field.

    ``tokens`` may be a whole line (the field starts after the first '=') or
    just the generated continuation. Digits are read until ';'; a shorter
    answer than the layout width is accepted as-is.
    """
    toks = [int(t) for t in tokens]
    start = toks.index(EQUALS) + 1 if EQUALS in toks else 0
    limit = len(toks) if layout is None else min(len(toks), start + layout.answer_width + 1)
    digits = []
    for pos in range(start, limit):
        t = toks[pos]
        if t == SEMI:
            if not digits:
                raise MalformedAnswer("empty answer")
            return sum(d * 10**i for i, d in enumerate(digits))
        if t > 9:
            raise MalformedAnswer(f"non-digit token {SYMBOLS[t]!r} in answer at position {pos}")
        digits.append(t)
    raise MalformedAnswer("answer not terminated by ';'")


def decode_fields(tokens: np.ndarray, layout: LineLayout) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Vectorised inverse of :func:`encode_batch`: (a, b, result) int64 columns."""
    tokens = np.asarray(tokens).astype(np.int64)
    w, wc = layout.operand_width, layout.answer_width
    pw = 10 ** np.arange(w - 1, -1, -1, dtype=np.int64)
    a = tokens[:, 1 : 1 + w] @ pw
    b = tokens[:, 2 + w : 2 + 2 * w] @ pw
    result = tokens[:, layout.answer_slice] @ (10 ** np.arange(wc, dtype=np.int64))
    return a, b, result


def answer_digits(result: np.ndarray, layout: LineLayout) -> np.ndarray:
    """(N, W_c) array of reference digits c_1..c_Wc (least significant first)."""
    pc = 10 ** np.arange(layout.answer_width, dtype=np.int64)
    return (np.asarray(result, dtype=np.int64)[:, None] // pc) % 10


# --- text form -----------------------------------------------------------------


def render_tokens(tokens: Iterable[int]) -> str:
    return "".join(SYMBOLS[t] for t in tokens if t not in (BOS, EOS))


def render_text(pair: ExamplePair, layout: LineLayout) -> str:
    return render_tokens(encode(pair, layout).tokens)


def parse_tokens(line: str) -> list[int]:
    """Inverse of :func:`render_tokens` for one file line (BOS/EOS restored)."""
    line = line.rstrip("\n")
    w = line.find("+") if "+" in line else line.find("*")
    if w < 1:
        raise ParseError("missing operator", max(w, 0))
    eq = line.find("=")
    if eq != 2 * w + 1:
        raise ParseError("operand fields differ in width or '=' misplaced", eq if eq >= 0 else len(line))
    if not line.endswith(";") or line.count(";") != 1:
        raise ParseError("line must end with a single ';'", len(line))
    tokens = [BOS]
    for i, ch in enumerate(line):
        expected_digit = i not in (w, eq, len(line) - 1)
        if expected_digit and not ch.isdigit():
            raise ParseError(f"unexpected character {ch!r}", i)
        if ch not in ID:
            raise ParseError(f"unknown symbol {ch!r}", i)
        tokens.append(ID[ch])
    if eq == len(line) - 2:
        raise ParseError("empty answer field", eq + 1)
    tokens.append(EOS)
    return tokens


def parse_text(line: str) -> tuple[ExamplePair, LineLayout]:
    tokens = parse_tokens(line)
    body = line.rstrip("\n")
    op = "+" if "+" in body else "*"
    w = body.find(op)
    wc = len(body) - 2 * w - 3
    layout = LineLayout(w, wc, op)
    a = int(body[:w])
    b = int(body[w + 1 : 2 * w + 1])
    result = decode_answer(tokens, layout)
    return ExamplePair(a, b, result), layout


def write_lines(path: Path, tokens: np.ndarray) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for row in tokens:
            fh.write(render_tokens(row))
            fh.write("\n")


def read_lines(path: Path) -> tuple[np.ndarray, LineLayout]:
    rows, layout = [], None
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                toks = parse_tokens(line)
                _, this = parse_text(line)
            except ParseError as exc:
                raise ParseError(f"{path}:{lineno}: {exc}", exc.offset) from None
            if layout is None:
                layout = this
            elif this != layout:
                raise ParseError(f"{path}:{lineno}: layout {this} differs from {layout}", 0)
            rows.append(toks)
    if layout is None:
        raise ValueError(f"{path} holds no examples")
    return np.asarray(rows, dtype=np.uint8), layout


# --- binary cache: magic, u32 header length, JSON header, u8 ids ------------------

_CACHE_MAGIC = b"LGTOK\x01"


def save_token_cache(path: Path, tokens: np.ndarray, layout: LineLayout) -> None:
    header = json.dumps({"layout": layout.to_dict(), "shape": list(tokens.shape)}).encode()
    with open(path, "wb") as fh:
        fh.write(_CACHE_MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        fh.write(np.ascontiguousarray(tokens, dtype=np.uint8).tobytes())


def load_token_cache(path: Path) -> tuple[np.ndarray, LineLayout]:
    with open(path, "rb") as fh:
        if fh.read(len(_CACHE_MAGIC)) != _CACHE_MAGIC:
            raise ValueError(f"{path} is not a token cache")
        (size,) = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(size))
        data = np.frombuffer(fh.read(), dtype=np.uint8)
    return data.reshape(header["shape"]).copy(), LineLayout(**header["layout"])
