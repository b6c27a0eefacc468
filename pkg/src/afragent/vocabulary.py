"""Fixed word vocabulary shared by the text tokenizer and the episode generator.

Keeping one canonical word list means every goal template, every verbalized
history line, and every widget label tokenizes to known pieces; arbitrary user
text still works through the character fallback.
"""

from __future__ import annotations

from . import actions

COLORS = ("red", "green", "blue", "yellow", "purple", "orange", "cyan", "pink")

WIDGET_KINDS = ("button", "textfield", "icon", "list")

FIELD_LABELS = (
    "search", "name", "mail", "city", "note", "query", "user", "code",
    "tags", "date", "time", "addr", "zip", "phone", "team", "memo",
)

TYPE_WORDS = (
    "hello", "world", "coffee", "pizza", "music", "cloud", "river", "stone",
    "apple", "mango", "tiger", "robin", "pearl", "amber", "delta", "koala",
    "lemon", "ocean", "piano", "sugar",
)

_GLUE_WORDS = (
    "the", "a", "in", "and", "then", "field", "step", "no", "previous", "actions",
    "click", "type", "scroll", "swipe", "press_back", "press_home", "press_enter",
    "task_complete", "up", "down", "left", "right", "press", "enter", "back", "home",
)

_CHAR_PIECES = tuple("abcdefghijklmnopqrstuvwxyz0123456789_")
_PUNCT_PIECES = (";", ":", ",", ".", "!", "?")
UNK = "<unk>"


def word_list() -> list[str]:
    """Canonical ordered word vocabulary, coordinate-bin tokens included."""
    out: list[str] = []
    seen: set[str] = set()
    for group in (_GLUE_WORDS, COLORS, WIDGET_KINDS, FIELD_LABELS, TYPE_WORDS):
        for w in group:
            if w not in seen:
                seen.add(w)
                out.append(w)
    for b in range(actions.NUM_BINS):
        out.append(actions.bin_token(b))
    return out


class TextTokenizer:
    """Lowercase word-piece tokenizer with character fallback.

    Splitting: whitespace first, then punctuation peeled into its own pieces.
    A word not in the vocabulary decomposes into per-character pieces; a
    character outside the piece set maps to the UNK id, so encode is total.
    """

    def __init__(self, words: list[str] | None = None):
        words = word_list() if words is None else list(words)
        pieces: list[str] = [UNK]
        seen = {UNK}
        for w in words:
            if w and w not in seen:
                seen.add(w)
                pieces.append(w)
        for ch in _CHAR_PIECES + _PUNCT_PIECES:
            if ch not in seen:
                seen.add(ch)
                pieces.append(ch)
        self.pieces = pieces
        self.piece_id = {p: i for i, p in enumerate(pieces)}
        self.unk_id = self.piece_id[UNK]

    @classmethod
    def from_file(cls, path: str) -> "TextTokenizer":
        with open(path, "r", encoding="utf-8") as f:
            words = [line.strip() for line in f if line.strip()]
        return cls(words)

    @property
    def size(self) -> int:
        return len(self.pieces)

    def _split(self, text: str) -> list[str]:
        parts: list[str] = []
        for raw in text.lower().split():
            word = ""
            for ch in raw:
                if ch in _PUNCT_PIECES:
                    if word:
                        parts.append(word)
                        word = ""
                    parts.append(ch)
                else:
                    word += ch
            if word:
                parts.append(word)
        return parts

    def encode(self, text: str) -> list[int]:
        ids: list[int] = []
        for part in self._split(text):
            pid = self.piece_id.get(part)
            if pid is not None:
                ids.append(pid)
                continue
            for ch in part:
                ids.append(self.piece_id.get(ch, self.unk_id))
        return ids

    def decode_pieces(self, ids: list[int]) -> list[str]:
        return [self.pieces[i] for i in ids]
