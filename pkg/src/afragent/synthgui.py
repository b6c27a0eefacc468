"""Synthetic GUI episodes: widget scenes, deterministic rendering, JSONL I/O.

Scenes are lists of frozen widgets with rects snapped to the low-res pixel
grid, so rendering is bit-exact at the base resolution and at the vertically
taller high-res capture (whose height is an integer multiple of the base).
Each episode is a goal sentence plus gold steps; state transitions (highlight
on click, text appearing on type, content shifting on scroll, home screen on
press_home) are pure functions of the widget list, and every episode ends
with a task_complete step.

Subsets: "click" single-tap goals (a tunable share of them on small targets),
"type" text entry into a labeled field, "scroll" one scroll or swipe, "multi"
two-to-four step compositions that exercise the press_* variants.
"""

from __future__ import annotations

import base64
import json
import random
from dataclasses import dataclass, replace

import numpy as np

from . import actions as act
from .vision import Screen, screen_from_array
from .vocabulary import COLORS, FIELD_LABELS, TYPE_WORDS

COLOR_RGB = {
    "red": (220, 40, 40),
    "green": (40, 180, 70),
    "blue": (50, 90, 220),
    "yellow": (230, 200, 40),
    "purple": (160, 60, 200),
    "orange": (240, 140, 30),
    "cyan": (40, 200, 210),
    "pink": (240, 120, 180),
    "gray": (88, 92, 98),
    "slate": (64, 72, 86),
    "stone": (112, 110, 104),
}

# Distractor-only tones; goal text never names them, so the described widget
# is always the one vivid patch on screen.
NEUTRAL_COLORS = ("gray", "slate", "stone")

BG_APP = (24, 26, 30)
BG_HOME = (10, 36, 52)

CLICKABLE_KINDS = ("button", "icon", "list")

JSONL_FORMAT = "afr-episodes"
JSONL_VERSION = 1

# 3x5 pixel glyphs; '#' marks a lit pixel
FONT_3X5 = {
    "a": (".#.", "#.#", "###", "#.#", "#.#"),
    "b": ("##.", "#.#", "##.", "#.#", "##."),
    "c": (".##", "#..", "#..", "#..", ".##"),
    "d": ("##.", "#.#", "#.#", "#.#", "##."),
    "e": ("###", "#..", "###", "#..", "###"),
    "f": ("###", "#..", "###", "#..", "#.."),
    "g": (".##", "#..", "#.#", "#.#", ".##"),
    "h": ("#.#", "#.#", "###", "#.#", "#.#"),
    "i": ("###", ".#.", ".#.", ".#.", "###"),
    "j": ("..#", "..#", "..#", "#.#", ".#."),
    "k": ("#.#", "##.", "#..", "##.", "#.#"),
    "l": ("#..", "#..", "#..", "#..", "###"),
    "m": ("#.#", "###", "###", "#.#", "#.#"),
    "n": ("##.", "#.#", "#.#", "#.#", "#.#"),
    "o": (".#.", "#.#", "#.#", "#.#", ".#."),
    "p": ("##.", "#.#", "##.", "#..", "#.."),
    "q": (".#.", "#.#", "#.#", "#.#", ".##"),
    "r": ("##.", "#.#", "##.", "#.#", "#.#"),
    "s": (".##", "#..", ".#.", "..#", "##."),
    "t": ("###", ".#.", ".#.", ".#.", ".#."),
    "u": ("#.#", "#.#", "#.#", "#.#", "###"),
    "v": ("#.#", "#.#", "#.#", "#.#", ".#."),
    "w": ("#.#", "#.#", "###", "###", "#.#"),
    "x": ("#.#", "#.#", ".#.", "#.#", "#.#"),
    "y": ("#.#", "#.#", ".#.", ".#.", ".#."),
    "z": ("###", "..#", ".#.", "#..", "###"),
    "0": ("###", "#.#", "#.#", "#.#", "###"),
    "1": (".#.", "##.", ".#.", ".#.", "###"),
    "2": ("##.", "..#", ".#.", "#..", "###"),
    "3": ("###", "..#", ".#.", "..#", "###"),
    "4": ("#.#", "#.#", "###", "..#", "..#"),
    "5": ("###", "#..", "##.", "..#", "##."),
    "6": (".##", "#..", "###", "#.#", "###"),
    "7": ("###", "..#", ".#.", ".#.", ".#."),
    "8": ("###", "#.#", "###", "#.#", "###"),
    "9": ("###", "#.#", "###", "..#", "##."),
}


@dataclass(frozen=True)
class Widget:
    kind: str  # button | textfield | icon | list
    rect: tuple[float, float, float, float]  # normalized (x0, y0, x1, y1)
    color: str
    label: str = ""
    typed: str = ""
    highlighted: bool = False
    submitted: bool = False

    def center(self) -> tuple[float, float]:
        x0, y0, x1, y1 = self.rect
        return ((x0 + x1) / 2.0, (y0 + y1) / 2.0)


@dataclass(frozen=True)
class EpisodeStep:
    screen: Screen
    action: act.Action
    rect: tuple[float, float, float, float] | None = None  # click-target box
    screen_high: Screen | None = None


@dataclass
class Episode:
    episode_id: str
    subset: str
    goal: str
    steps: list[EpisodeStep]


@dataclass
class GeneratorConfig:
    """Knobs for dataset generation; defaults give the standard desk-scale mix."""

    seed: int = 0
    screen_w: int = 64
    screen_h: int = 64
    crops: int = 4                 # high-res height = crops * screen_h
    include_high_res: bool = True
    episodes_per_subset: int = 25
    subsets: tuple[str, ...] = ("click", "type", "scroll", "multi")
    min_widgets: int = 3
    max_widgets: int = 6
    small_target_share: float = 0.35  # fraction of click goals on tiny widgets
    anchor_cells: int = 8             # target centers snap to this grid; 0 = free

    def validate(self) -> None:
        if self.screen_w < 32 or self.screen_h < 32:
            raise ValueError(f"screen {self.screen_w}x{self.screen_h} too small for widget layout")
        if self.crops <= 0:
            raise ValueError(f"crops must be positive, got {self.crops}")
        if self.episodes_per_subset <= 0:
            raise ValueError("episodes_per_subset must be positive")
        if not 2 <= self.min_widgets <= self.max_widgets:
            raise ValueError(f"bad widget count range [{self.min_widgets}, {self.max_widgets}]")
        unknown = set(self.subsets) - {"click", "type", "scroll", "multi"}
        if unknown:
            raise ValueError(f"unknown subsets: {sorted(unknown)}")
        if not 0.0 <= self.small_target_share <= 1.0:
            raise ValueError("small_target_share must be in [0, 1]")
        if self.anchor_cells < 0:
            raise ValueError("anchor_cells must be non-negative")
        if self.anchor_cells and (
            self.screen_w % self.anchor_cells or self.screen_h % self.anchor_cells
        ):
            raise ValueError(
                f"anchor grid {self.anchor_cells} must divide screen "
                f"{self.screen_w}x{self.screen_h}"
            )


# ---------------------------------------------------------------------------
# rendering
# ---------------------------------------------------------------------------


def _luminance(rgb: tuple[int, int, int]) -> float:
    r, g, b = rgb
    return 0.299 * r + 0.587 * g + 0.114 * b


def _draw_text(arr: np.ndarray, text: str, x: int, y: int, x_clip: int, y_clip: int, color) -> None:
    for ch in text:
        glyph = FONT_3X5.get(ch)
        if glyph is not None:
            if x + 3 > x_clip:
                break
            for rr in range(5):
                if y + rr >= y_clip:
                    break
                row = glyph[rr]
                for cc in range(3):
                    if row[cc] == "#":
                        arr[y + rr, x + cc] = color
        x += 4


def render(
    widgets: list[Widget], screen_w: int, screen_h: int, home: bool = False
) -> Screen:
    """Rasterize a widget list; pure function of its arguments."""
    bg = BG_HOME if home else BG_APP
    arr = np.empty((screen_h, screen_w, 3), dtype=np.uint8)
    arr[...] = bg
    for w in widgets:
        x0 = round(w.rect[0] * screen_w)
        y0 = round(w.rect[1] * screen_h)
        x1 = round(w.rect[2] * screen_w)
        y1 = round(w.rect[3] * screen_h)
        fill = COLOR_RGB[w.color]
        if w.highlighted:
            fill = tuple(min(255, c + 70) for c in fill)
        arr[y0:y1, x0:x1] = fill
        border = (255, 255, 255) if w.submitted else tuple(c // 2 for c in fill)
        arr[y0, x0:x1] = border
        arr[y1 - 1, x0:x1] = border
        arr[y0:y1, x0] = border
        arr[y0:y1, x1 - 1] = border
        text_color = (240, 240, 240) if _luminance(fill) < 140 else (10, 10, 10)
        lines = [w.label] if w.label else []
        if w.typed:
            lines.append(w.typed)
        ty = y0 + 2
        for line in lines:
            if ty + 5 > y1 - 1:
                break
            _draw_text(arr, line, x0 + 2, ty, x1 - 1, y1 - 1, text_color)
            ty += 7
    return screen_from_array(arr)


def _capture(widgets: list[Widget], cfg: GeneratorConfig, home: bool = False):
    low = render(widgets, cfg.screen_w, cfg.screen_h, home)
    high = None
    if cfg.include_high_res:
        high = render(widgets, cfg.screen_w, cfg.screen_h * cfg.crops, home)
    return low, high


# ---------------------------------------------------------------------------
# scene construction
# ---------------------------------------------------------------------------


def _px_rect(x0: int, y0: int, w: int, h: int, sw: int, sh: int):
    return (x0 / sw, y0 / sh, (x0 + w) / sw, (y0 + h) / sh)


def _overlaps(r1, r2, margin=0.02) -> bool:
    return not (
        r1[2] + margin <= r2[0]
        or r2[2] + margin <= r1[0]
        or r1[3] + margin <= r2[1]
        or r2[3] + margin <= r1[1]
    )


def _small_side_px(cfg: GeneratorConfig) -> int:
    # small targets fit a 0.1-normalized box on both axes
    return max(3, int(0.1 * min(cfg.screen_w, cfg.screen_h)))


def _place(rng: random.Random, cfg: GeneratorConfig, taken: list, w_px: int, h_px: int):
    """Find a non-overlapping spot; returns a normalized rect or None."""
    for _ in range(200):
        x0 = rng.randint(1, cfg.screen_w - 1 - w_px)
        y0 = rng.randint(1, cfg.screen_h - 1 - h_px)
        rect = _px_rect(x0, y0, w_px, h_px, cfg.screen_w, cfg.screen_h)
        if not any(_overlaps(rect, t) for t in taken):
            taken.append(rect)
            return rect
    return None


def _place_anchored(rng: random.Random, cfg: GeneratorConfig, taken: list, w_px: int, h_px: int):
    """Center the widget on a random anchor-grid cell, clamped to the canvas.

    Tap-style benchmarks grade clicks at a coarse radius, so sub-cell target
    placement adds label entropy no metric can see; snapping target centers
    to a small grid keeps positions diverse at the resolution that is
    actually scored.
    """
    px, py = cfg.screen_w // cfg.anchor_cells, cfg.screen_h // cfg.anchor_cells
    for _ in range(200):
        cx = rng.randrange(cfg.anchor_cells) * px + px // 2
        cy = rng.randrange(cfg.anchor_cells) * py + py // 2
        x0 = max(1, min(cfg.screen_w - 1 - w_px, cx - w_px // 2))
        y0 = max(1, min(cfg.screen_h - 1 - h_px, cy - h_px // 2))
        rect = _px_rect(x0, y0, w_px, h_px, cfg.screen_w, cfg.screen_h)
        if not any(_overlaps(rect, t) for t in taken):
            taken.append(rect)
            return rect
    return None


def _widget_size(rng: random.Random, cfg: GeneratorConfig, kind: str, small: bool):
    if small:
        s = _small_side_px(cfg)
        return rng.randint(3, s), rng.randint(3, s)
    if kind == "textfield":
        return rng.randint(26, min(40, cfg.screen_w - 4)), rng.randint(9, 12)
    return rng.randint(7, 18), rng.randint(7, 14)


def _build_scene(
    rng: random.Random,
    cfg: GeneratorConfig,
    target_kind: str,
    small_target: bool = False,
    target_label: str | None = None,
):
    """Widgets plus the target; only the target gets a vivid palette color.

    Distractors are drawn in neutral tones, so the widget a goal sentence
    describes is also the visually salient one. That keeps target grounding
    a pixel problem instead of a language-reference problem, which is the
    capability this stack is sized to learn from scratch.
    """
    taken: list = []
    target_color = rng.choice(COLORS)
    tw, th = _widget_size(rng, cfg, target_kind, small_target)
    place = _place_anchored if cfg.anchor_cells else _place
    rect = place(rng, cfg, taken, tw, th)
    if rect is None:
        raise RuntimeError("could not place target widget")
    label = target_label if target_label is not None else ""
    if target_kind == "textfield" and not label:
        label = rng.choice(FIELD_LABELS)
    target = Widget(kind=target_kind, rect=rect, color=target_color, label=label)

    widgets = [target]
    used_field_labels = {label} if target_kind == "textfield" else set()
    n_extra = rng.randint(cfg.min_widgets, cfg.max_widgets) - 1
    for _ in range(n_extra):
        kind = rng.choice(("button", "textfield", "icon", "list"))
        color = rng.choice(NEUTRAL_COLORS)
        w_px, h_px = _widget_size(rng, cfg, kind, False)
        r = _place(rng, cfg, taken, w_px, h_px)
        if r is None:
            continue
        wlabel = ""
        if kind == "textfield":
            free = [x for x in FIELD_LABELS if x not in used_field_labels]
            if not free:
                continue
            wlabel = rng.choice(free)
            used_field_labels.add(wlabel)
        elif rng.random() < 0.5:
            wlabel = rng.choice(FIELD_LABELS)
        widgets.append(Widget(kind=kind, rect=r, color=color, label=wlabel))

    rng.shuffle(widgets)
    return widgets, widgets.index(target)


def _highlight(widgets: list[Widget], idx: int) -> list[Widget]:
    return [replace(w, highlighted=True) if i == idx else w for i, w in enumerate(widgets)]


def _with_typed(widgets: list[Widget], idx: int, text: str) -> list[Widget]:
    return [replace(w, typed=text) if i == idx else w for i, w in enumerate(widgets)]


def _with_submitted(widgets: list[Widget], idx: int) -> list[Widget]:
    return [replace(w, submitted=True) if i == idx else w for i, w in enumerate(widgets)]


def _shift_widgets(
    widgets: list[Widget], direction: str, cfg: GeneratorConfig
) -> list[Widget]:
    """Content moves opposite the scroll direction by 1/8 of the screen."""
    step_x = max(1, cfg.screen_w // 8)
    step_y = max(1, cfg.screen_h // 8)
    dx, dy = {
        "down": (0, -step_y),
        "up": (0, step_y),
        "right": (-step_x, 0),
        "left": (step_x, 0),
    }[direction]
    out = []
    for w in widgets:
        x0 = round(w.rect[0] * cfg.screen_w) + dx
        y0 = round(w.rect[1] * cfg.screen_h) + dy
        x1 = round(w.rect[2] * cfg.screen_w) + dx
        y1 = round(w.rect[3] * cfg.screen_h) + dy
        if x0 >= 1 and y0 >= 1 and x1 <= cfg.screen_w - 1 and y1 <= cfg.screen_h - 1:
            out.append(
                replace(w, rect=(x0 / cfg.screen_w, y0 / cfg.screen_h,
                                 x1 / cfg.screen_w, y1 / cfg.screen_h))
            )
        else:
            out.append(w)
    return out


# ---------------------------------------------------------------------------
# episode templates
# ---------------------------------------------------------------------------


def _gen_click(rng: random.Random, cfg: GeneratorConfig, eid: str) -> Episode:
    small = rng.random() < cfg.small_target_share
    kind = rng.choice(CLICKABLE_KINDS)
    widgets, ti = _build_scene(rng, cfg, kind, small_target=small)
    target = widgets[ti]
    goal = f"click the {target.color} {target.kind}"
    steps = []
    low, high = _capture(widgets, cfg)
    cx, cy = target.center()
    steps.append(EpisodeStep(low, act.Click(cx, cy), rect=target.rect, screen_high=high))
    low2, high2 = _capture(_highlight(widgets, ti), cfg)
    steps.append(EpisodeStep(low2, act.TaskComplete(), screen_high=high2))
    return Episode(eid, "click", goal, steps)


def _gen_type(rng: random.Random, cfg: GeneratorConfig, eid: str) -> Episode:
    widgets, ti = _build_scene(rng, cfg, "textfield")
    target = widgets[ti]
    word = rng.choice(TYPE_WORDS)
    goal = f"type {word} in the {target.label} field"
    low, high = _capture(widgets, cfg)
    steps = [EpisodeStep(low, act.TypeText(word), screen_high=high)]
    low2, high2 = _capture(_with_typed(widgets, ti, word), cfg)
    steps.append(EpisodeStep(low2, act.TaskComplete(), screen_high=high2))
    return Episode(eid, "type", goal, steps)


def _gen_scroll(rng: random.Random, cfg: GeneratorConfig, eid: str) -> Episode:
    widgets, _ = _build_scene(rng, cfg, "list")
    direction = rng.choice(act.DIRECTIONS)
    swipe = rng.random() < 0.5
    verb = "swipe" if swipe else "scroll"
    goal = f"{verb} {direction}"
    action: act.Action = act.Swipe(direction) if swipe else act.Scroll(direction)
    low, high = _capture(widgets, cfg)
    steps = [EpisodeStep(low, action, screen_high=high)]
    low2, high2 = _capture(_shift_widgets(widgets, direction, cfg), cfg)
    steps.append(EpisodeStep(low2, act.TaskComplete(), screen_high=high2))
    return Episode(eid, "scroll", goal, steps)


def _gen_multi(rng: random.Random, cfg: GeneratorConfig, eid: str) -> Episode:
    template = rng.choice(("scroll_click", "click_back", "type_enter", "home_click"))
    steps: list[EpisodeStep] = []

    if template == "scroll_click":
        kind = rng.choice(CLICKABLE_KINDS)
        widgets, ti = _build_scene(rng, cfg, kind)
        direction = rng.choice(act.DIRECTIONS)
        swipe = rng.random() < 0.5
        verb = "swipe" if swipe else "scroll"
        target = widgets[ti]
        goal = f"{verb} {direction} then click the {target.color} {target.kind}"
        low, high = _capture(widgets, cfg)
        first: act.Action = act.Swipe(direction) if swipe else act.Scroll(direction)
        steps.append(EpisodeStep(low, first, screen_high=high))
        shifted = _shift_widgets(widgets, direction, cfg)
        starget = shifted[ti]
        low2, high2 = _capture(shifted, cfg)
        steps.append(
            EpisodeStep(low2, act.Click(*starget.center()), rect=starget.rect, screen_high=high2)
        )
        low3, high3 = _capture(_highlight(shifted, ti), cfg)
        steps.append(EpisodeStep(low3, act.TaskComplete(), screen_high=high3))

    elif template == "click_back":
        kind = rng.choice(CLICKABLE_KINDS)
        widgets, ti = _build_scene(rng, cfg, kind)
        target = widgets[ti]
        goal = f"click the {target.color} {target.kind} then press back"
        low, high = _capture(widgets, cfg)
        steps.append(EpisodeStep(low, act.Click(*target.center()), rect=target.rect, screen_high=high))
        low2, high2 = _capture(_highlight(widgets, ti), cfg)
        steps.append(EpisodeStep(low2, act.PressBack(), screen_high=high2))
        low3, high3 = _capture(widgets, cfg)  # back reverts the highlight
        steps.append(EpisodeStep(low3, act.TaskComplete(), screen_high=high3))

    elif template == "type_enter":
        widgets, ti = _build_scene(rng, cfg, "textfield")
        target = widgets[ti]
        word = rng.choice(TYPE_WORDS)
        goal = f"type {word} in the {target.label} field and press enter"
        low, high = _capture(widgets, cfg)
        steps.append(EpisodeStep(low, act.TypeText(word), screen_high=high))
        typed = _with_typed(widgets, ti, word)
        low2, high2 = _capture(typed, cfg)
        steps.append(EpisodeStep(low2, act.PressEnter(), screen_high=high2))
        low3, high3 = _capture(_with_submitted(typed, ti), cfg)
        steps.append(EpisodeStep(low3, act.TaskComplete(), screen_high=high3))

    else:  # home_click
        app_widgets, _ = _build_scene(rng, cfg, rng.choice(CLICKABLE_KINDS))
        kind = rng.choice(("icon", "button"))
        home_widgets, ti = _build_scene(rng, cfg, kind)
        target = home_widgets[ti]
        goal = f"press home then click the {target.color} {target.kind}"
        low, high = _capture(app_widgets, cfg)
        steps.append(EpisodeStep(low, act.PressHome(), screen_high=high))
        low2, high2 = _capture(home_widgets, cfg, home=True)
        steps.append(
            EpisodeStep(low2, act.Click(*target.center()), rect=target.rect, screen_high=high2)
        )
        low3, high3 = _capture(_highlight(home_widgets, ti), cfg, home=True)
        steps.append(EpisodeStep(low3, act.TaskComplete(), screen_high=high3))

    return Episode(eid, "multi", goal, steps)


_TEMPLATES = {
    "click": _gen_click,
    "type": _gen_type,
    "scroll": _gen_scroll,
    "multi": _gen_multi,
}


def generate_dataset(cfg: GeneratorConfig) -> list[Episode]:
    """Deterministic in cfg: same config, same episode list, bit for bit."""
    cfg.validate()
    rng = random.Random(cfg.seed)
    episodes: list[Episode] = []
    for subset in cfg.subsets:
        gen = _TEMPLATES[subset]
        for i in range(cfg.episodes_per_subset):
            episodes.append(gen(rng, cfg, f"{subset}-{i:05d}"))
    return episodes


# ---------------------------------------------------------------------------
# JSONL serialization
# ---------------------------------------------------------------------------


def _screen_to_json(s: Screen) -> dict:
    return {
        "w": s.width_px,
        "h": s.height_px,
        "rgb_b64": base64.b64encode(s.pixels).decode("ascii"),
    }


def _screen_from_json(d: dict, where: str) -> Screen:
    try:
        return Screen(int(d["w"]), int(d["h"]), base64.b64decode(d["rgb_b64"]))
    except (KeyError, TypeError, ValueError) as e:
        raise ValueError(f"{where}: bad screen record ({e})") from None


def write_jsonl(path: str, episodes: list[Episode]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write(json.dumps({"format": JSONL_FORMAT, "v": JSONL_VERSION}, separators=(",", ":")))
        f.write("\n")
        for ep in episodes:
            steps = []
            for st in ep.steps:
                rec = {"screen": _screen_to_json(st.screen)}
                if st.screen_high is not None:
                    rec["screen_high"] = _screen_to_json(st.screen_high)
                rec["action"] = act.to_string(st.action)
                rec["rect"] = list(st.rect) if st.rect is not None else None
                steps.append(rec)
            line = {"id": ep.episode_id, "subset": ep.subset, "goal": ep.goal, "steps": steps}
            f.write(json.dumps(line, separators=(",", ":")))
            f.write("\n")


def read_jsonl(path: str) -> list[Episode]:
    """Parse an episode file; errors name the 1-based line they came from."""
    episodes: list[Episode] = []
    with open(path, "r", encoding="utf-8") as f:
        for ln, raw in enumerate(f, start=1):
            raw = raw.strip()
            if not raw:
                continue
            try:
                data = json.loads(raw)
            except json.JSONDecodeError as e:
                raise ValueError(f"line {ln}: invalid JSON ({e.msg})") from None
            if ln == 1:
                if data.get("format") != JSONL_FORMAT:
                    raise ValueError(
                        f"line 1: expected header format {JSONL_FORMAT!r}, got {data.get('format')!r}"
                    )
                if data.get("v") != JSONL_VERSION:
                    raise ValueError(f"line 1: unsupported version {data.get('v')!r}")
                continue
            try:
                steps = []
                for si, st in enumerate(data["steps"]):
                    action = act.parse_string(st["action"])
                    rect = tuple(st["rect"]) if st.get("rect") is not None else None
                    high = None
                    if "screen_high" in st:
                        high = _screen_from_json(st["screen_high"], f"line {ln} step {si}")
                    steps.append(
                        EpisodeStep(
                            screen=_screen_from_json(st["screen"], f"line {ln} step {si}"),
                            action=action,
                            rect=rect,
                            screen_high=high,
                        )
                    )
                episodes.append(Episode(data["id"], data["subset"], data["goal"], steps))
            except (KeyError, TypeError, act.ParseError) as e:
                raise ValueError(f"line {ln}: malformed episode ({e})") from None
    if not episodes and not path_has_header(path):
        raise ValueError("line 1: missing header line")
    return episodes


def path_has_header(path: str) -> bool:
    with open(path, "r", encoding="utf-8") as f:
        first = f.readline().strip()
    if not first:
        return False
    try:
        data = json.loads(first)
    except json.JSONDecodeError:
        return False
    return data.get("format") == JSONL_FORMAT
