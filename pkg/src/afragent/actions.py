"""GUI action algebra: typed actions, token serialization, parsing, history text.

Actions are the decoder's output language. Coordinates are normalized to [0, 1]
and quantized to 100 bins per axis, so a Click serializes to exactly three
tokens ("click b37 b81") and the worst-case round-trip error is half a bin
width (1/200). Parsing is strict: any malformed sequence raises ParseError
carrying the index of the offending token, and the evaluator treats a
ParseError as an automatic mismatch rather than a crash.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence, Union

DIRECTIONS = ("up", "down", "left", "right")
NUM_BINS = 100

BOS = "<bos>"
EOS = "<eos>"
SEP = "<sep>"

# characters allowed inside serialized type-text; "_" marks a space
TEXT_CHARS = tuple("abcdefghijklmnopqrstuvwxyz0123456789_")
_TEXT_CHAR_SET = set(TEXT_CHARS)


class ParseError(ValueError):
    """Token sequence is not a well-formed action; token_index points at the fault."""

    def __init__(self, token_index: int, message: str):
        super().__init__(f"token {token_index}: {message}")
        self.token_index = token_index


@dataclass(frozen=True)
class Click:
    x: float
    y: float

    def __post_init__(self):
        for name, v in (("x", self.x), ("y", self.y)):
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"Click.{name} must be in [0, 1], got {v}")


@dataclass(frozen=True)
class TypeText:
    text: str

    def __post_init__(self):
        if not self.text:
            raise ValueError("TypeText.text must be non-empty")


@dataclass(frozen=True)
class Scroll:
    direction: str

    def __post_init__(self):
        if self.direction not in DIRECTIONS:
            raise ValueError(f"Scroll direction must be one of {DIRECTIONS}, got {self.direction!r}")


@dataclass(frozen=True)
class Swipe:
    direction: str

    def __post_init__(self):
        if self.direction not in DIRECTIONS:
            raise ValueError(f"Swipe direction must be one of {DIRECTIONS}, got {self.direction!r}")


@dataclass(frozen=True)
class PressBack:
    pass


@dataclass(frozen=True)
class PressHome:
    pass


@dataclass(frozen=True)
class PressEnter:
    pass


@dataclass(frozen=True)
class TaskComplete:
    pass


Action = Union[Click, TypeText, Scroll, Swipe, PressBack, PressHome, PressEnter, TaskComplete]

_KEYWORDS = (
    "click",
    "type",
    "scroll",
    "swipe",
    "press_back",
    "press_home",
    "press_enter",
    "task_complete",
)


def bin_index(x: float) -> int:
    """Quantize a normalized coordinate to one of 100 bins; 1.0 folds into bin 99."""
    if not 0.0 <= x <= 1.0:
        raise ValueError(f"coordinate must be in [0, 1], got {x}")
    return min(NUM_BINS - 1, int(x * NUM_BINS))


def bin_center(b: int) -> float:
    if not 0 <= b < NUM_BINS:
        raise ValueError(f"bin must be in [0, {NUM_BINS}), got {b}")
    return (b + 0.5) / NUM_BINS


def bin_token(b: int) -> str:
    return f"b{b:02d}"


class ActionVocab:
    """Fixed, densely numbered token table for the action decoder."""

    def __init__(self):
        self.tokens: list[str] = [BOS, EOS, SEP]
        self.tokens += list(_KEYWORDS)
        self.tokens += list(DIRECTIONS)
        self.tokens += [bin_token(b) for b in range(NUM_BINS)]
        self.tokens += list(TEXT_CHARS)
        self.id: dict[str, int] = {t: i for i, t in enumerate(self.tokens)}

    @property
    def size(self) -> int:
        return len(self.tokens)

    def id_of(self, token: str) -> int:
        try:
            return self.id[token]
        except KeyError:
            raise ValueError(f"token {token!r} not in action vocabulary") from None

    def token_of(self, idx: int) -> str:
        if not 0 <= idx < len(self.tokens):
            raise ValueError(f"token id {idx} out of range for vocabulary of {len(self.tokens)}")
        return self.tokens[idx]


def serialize(action: Action) -> list[str]:
    """Action to token list, always terminated by the EOS token."""
    if isinstance(action, Click):
        body = ["click", bin_token(bin_index(action.x)), bin_token(bin_index(action.y))]
    elif isinstance(action, TypeText):
        body = ["type"]
        for ch in action.text.lower():
            ch = "_" if ch == " " else ch
            if ch not in _TEXT_CHAR_SET:
                raise ValueError(f"cannot serialize character {ch!r} in type text")
            body.append(ch)
    elif isinstance(action, Scroll):
        body = ["scroll", action.direction]
    elif isinstance(action, Swipe):
        body = ["swipe", action.direction]
    elif isinstance(action, PressBack):
        body = ["press_back"]
    elif isinstance(action, PressHome):
        body = ["press_home"]
    elif isinstance(action, PressEnter):
        body = ["press_enter"]
    elif isinstance(action, TaskComplete):
        body = ["task_complete"]
    else:
        raise TypeError(f"not an action: {type(action).__name__}")
    return body + [EOS]


def to_string(action: Action) -> str:
    """Canonical text form: serialized tokens space-joined, EOS dropped."""
    return " ".join(serialize(action)[:-1])


def _expect_bin(tokens: Sequence[str], i: int) -> int:
    if i >= len(tokens):
        raise ParseError(i, "expected a coordinate bin, sequence ended")
    t = tokens[i]
    if len(t) == 3 and t[0] == "b" and t[1:].isdigit():
        return int(t[1:])
    raise ParseError(i, f"expected a coordinate bin like b07, got {t!r}")


def parse(tokens: Sequence[str]) -> Action:
    """Strict inverse of serialize; tolerates one trailing EOS token."""
    tokens = list(tokens)
    if tokens and tokens[-1] == EOS:
        tokens = tokens[:-1]
    if not tokens:
        raise ParseError(0, "empty action sequence")

    head = tokens[0]
    if head == "click":
        bx = _expect_bin(tokens, 1)
        by = _expect_bin(tokens, 2)
        action: Action = Click(bin_center(bx), bin_center(by))
        tail = 3
    elif head == "type":
        if len(tokens) < 2:
            raise ParseError(1, "type needs at least one text token")
        chars = []
        for i, t in enumerate(tokens[1:], start=1):
            if t not in _TEXT_CHAR_SET:
                raise ParseError(i, f"expected a text character token, got {t!r}")
            chars.append(" " if t == "_" else t)
        action = TypeText("".join(chars))
        tail = len(tokens)
    elif head in ("scroll", "swipe"):
        if len(tokens) < 2:
            raise ParseError(1, f"{head} needs a direction")
        if tokens[1] not in DIRECTIONS:
            raise ParseError(1, f"expected a direction, got {tokens[1]!r}")
        action = Scroll(tokens[1]) if head == "scroll" else Swipe(tokens[1])
        tail = 2
    elif head == "press_back":
        action, tail = PressBack(), 1
    elif head == "press_home":
        action, tail = PressHome(), 1
    elif head == "press_enter":
        action, tail = PressEnter(), 1
    elif head == "task_complete":
        action, tail = TaskComplete(), 1
    else:
        raise ParseError(0, f"unknown action keyword {head!r}")

    if tail < len(tokens):
        raise ParseError(tail, f"unexpected trailing token {tokens[tail]!r}")
    return action


def parse_string(text: str) -> Action:
    return parse(text.split())


def verbalize_history(history: Sequence[Action]) -> str:
    """Render past actions for the text stream; empty history has a fixed phrase.

    Steps are numbered relative to the window the caller already truncated,
    so the phrasing stays stationary no matter how long the episode runs.
    """
    if not history:
        return "no previous actions"
    parts = [f"step {i}: {to_string(a)}" for i, a in enumerate(history, start=1)]
    return "; ".join(parts)
