"""Action matching and metric aggregation for GUI episodes.

A predicted step is compared to its gold step with rules that mirror how GUI
interactions actually succeed or fail: a click lands if it is near the gold
point or anywhere inside the target widget; scrolls and swipes only need the
right axis; typed text is compared after normalization with containment
allowed; every other action must match exactly by variant. A parse failure is
a mismatch, never a crash, so evaluation is total over model output.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Sequence

from .actions import (
    Action,
    Click,
    ParseError,
    PressBack,
    PressEnter,
    PressHome,
    Scroll,
    Swipe,
    TaskComplete,
    TypeText,
)

Rect = tuple[float, float, float, float]  # (x0, y0, x1, y1), normalized

# every match_step outcome carries one of these reasons
REASONS = (
    "parse_error",
    "variant_mismatch",
    "click_within_radius",
    "click_inside_rect",
    "click_outside",
    "scroll_axis_match",
    "scroll_axis_mismatch",
    "text_match",
    "text_mismatch",
    "variant_match",
)


@dataclass(frozen=True)
class MatchConfig:
    """Tolerances for step matching; click_radius is in normalized units."""

    click_radius: float = 0.14


@dataclass(frozen=True)
class MatchResult:
    matched: bool
    reason: str


def normalize_text(s: str) -> str:
    """Lowercase, trim, collapse runs of whitespace to single spaces."""
    return " ".join(s.lower().split())


def scroll_axis(direction: str) -> str:
    return "vertical" if direction in ("up", "down") else "horizontal"


def point_in_rect(x: float, y: float, rect: Rect) -> bool:
    x0, y0, x1, y1 = rect
    return x0 <= x <= x1 and y0 <= y <= y1


def match_step(
    pred: Action | ParseError,
    gold: Action,
    cfg: MatchConfig = MatchConfig(),
    gold_rect: Rect | None = None,
) -> MatchResult:
    """Compare one predicted action against the gold action for that step."""
    if isinstance(pred, ParseError):
        return MatchResult(False, "parse_error")

    if isinstance(gold, Click):
        if not isinstance(pred, Click):
            return MatchResult(False, "variant_mismatch")
        dist = math.hypot(pred.x - gold.x, pred.y - gold.y)
        if dist <= cfg.click_radius:
            return MatchResult(True, "click_within_radius")
        if gold_rect is not None and point_in_rect(pred.x, pred.y, gold_rect):
            return MatchResult(True, "click_inside_rect")
        return MatchResult(False, "click_outside")

    if isinstance(gold, Scroll):
        if not isinstance(pred, Scroll):
            return MatchResult(False, "variant_mismatch")
        if scroll_axis(pred.direction) == scroll_axis(gold.direction):
            return MatchResult(True, "scroll_axis_match")
        return MatchResult(False, "scroll_axis_mismatch")

    if isinstance(gold, Swipe):
        if not isinstance(pred, Swipe):
            return MatchResult(False, "variant_mismatch")
        if scroll_axis(pred.direction) == scroll_axis(gold.direction):
            return MatchResult(True, "scroll_axis_match")
        return MatchResult(False, "scroll_axis_mismatch")

    if isinstance(gold, TypeText):
        if not isinstance(pred, TypeText):
            return MatchResult(False, "variant_mismatch")
        p, g = normalize_text(pred.text), normalize_text(gold.text)
        if p == g or (g and g in p) or (p and p in g):
            return MatchResult(True, "text_match")
        return MatchResult(False, "text_mismatch")

    if isinstance(gold, (PressBack, PressHome, PressEnter, TaskComplete)):
        if type(pred) is type(gold):
            return MatchResult(True, "variant_match")
        return MatchResult(False, "variant_mismatch")

    raise TypeError(f"not a gold action: {type(gold).__name__}")


@dataclass
class EpisodeScore:
    results: list[MatchResult]
    matched_steps: int
    total_steps: int
    success: bool  # every step matched

    @property
    def step_accuracy(self) -> float:
        return self.matched_steps / self.total_steps if self.total_steps else 0.0


def score_episode(
    preds: Sequence[Action | ParseError],
    golds: Sequence[Action],
    rects: Sequence[Rect | None] | None = None,
    cfg: MatchConfig = MatchConfig(),
) -> EpisodeScore:
    """Score a whole episode; a missing prediction counts as a mismatch."""
    if rects is None:
        rects = [None] * len(golds)
    if len(rects) != len(golds):
        raise ValueError(f"rects length {len(rects)} does not match golds length {len(golds)}")
    results: list[MatchResult] = []
    for i, gold in enumerate(golds):
        if i < len(preds):
            results.append(match_step(preds[i], gold, cfg, rects[i]))
        else:
            results.append(MatchResult(False, "variant_mismatch"))
    matched = sum(r.matched for r in results)
    return EpisodeScore(results, matched, len(golds), matched == len(golds))


def text_f1(pred: str, gold: str) -> float:
    """Token-multiset F1 over normalized text; both empty scores 1, one empty 0."""
    pt = normalize_text(pred).split()
    gt = normalize_text(gold).split()
    if not pt and not gt:
        return 1.0
    if not pt or not gt:
        return 0.0
    counts: dict[str, int] = {}
    for t in gt:
        counts[t] = counts.get(t, 0) + 1
    tp = 0
    for t in pt:
        if counts.get(t, 0) > 0:
            counts[t] -= 1
            tp += 1
    if tp == 0:
        return 0.0
    precision = tp / len(pt)
    recall = tp / len(gt)
    return 2 * precision * recall / (precision + recall)


# a click step counts as "small" when its target rect fits in this box
SMALL_CLICK_MAX_SIDE = 0.1


def _action_kind(a: Action) -> str:
    return {
        Click: "click",
        TypeText: "type_text",
        Scroll: "scroll",
        Swipe: "swipe",
        PressBack: "press_back",
        PressHome: "press_home",
        PressEnter: "press_enter",
        TaskComplete: "task_complete",
    }[type(a)]


@dataclass
class EpisodeRecord:
    """One evaluated episode: predictions aligned to gold steps."""

    episode_id: str
    subset: str
    preds: list  # Action | ParseError
    golds: list[Action]
    rects: list  # Rect | None


@dataclass
class Report:
    groups: dict[str, dict[str, float]]
    overall: dict[str, float]
    warnings: list[str] = field(default_factory=list)

    def to_text(self) -> str:
        lines = []
        for group in sorted(self.groups):
            for name in sorted(self.groups[group]):
                lines.append(f"{group}.{name}\t{self.groups[group][name]:.6f}")
        for name in sorted(self.overall):
            lines.append(f"overall.{name}\t{self.overall[name]:.6f}")
        for w in self.warnings:
            lines.append(f"warning\t{w}")
        return "\n".join(lines) + "\n"

    def to_json(self) -> str:
        return json.dumps(
            {"groups": self.groups, "overall": self.overall, "warnings": self.warnings},
            indent=2,
            sort_keys=True,
        )


def aggregate(records: Sequence[EpisodeRecord], cfg: MatchConfig = MatchConfig()) -> Report:
    """Group metrics by subset tag; overall rows are unweighted means over groups.

    Records with a falsy subset land in "untagged". Groups that end up empty
    are dropped with a warning rather than reported as zeros.
    """
    by_group: dict[str, list[EpisodeRecord]] = {}
    for rec in records:
        by_group.setdefault(rec.subset or "untagged", []).append(rec)

    groups: dict[str, dict[str, float]] = {}
    warnings: list[str] = []
    small_hits = 0
    small_total = 0
    kind_hits: dict[str, int] = {}
    kind_total: dict[str, int] = {}

    for name in sorted(by_group):
        recs = by_group[name]
        steps = 0
        hits = 0
        successes = 0
        em_hits = 0
        f1_sum = 0.0
        text_steps = 0
        for rec in recs:
            score = score_episode(rec.preds, rec.golds, rec.rects, cfg)
            steps += score.total_steps
            hits += score.matched_steps
            successes += int(score.success)
            for i, gold in enumerate(rec.golds):
                kind = _action_kind(gold)
                kind_total[kind] = kind_total.get(kind, 0) + 1
                kind_hits[kind] = kind_hits.get(kind, 0) + int(score.results[i].matched)
                if isinstance(gold, Click) and rec.rects[i] is not None:
                    x0, y0, x1, y1 = rec.rects[i]
                    if (x1 - x0) <= SMALL_CLICK_MAX_SIDE and (y1 - y0) <= SMALL_CLICK_MAX_SIDE:
                        small_total += 1
                        small_hits += int(score.results[i].matched)
                if isinstance(gold, TypeText):
                    text_steps += 1
                    pred = rec.preds[i] if i < len(rec.preds) else None
                    if isinstance(pred, TypeText):
                        f1_sum += text_f1(pred.text, gold.text)
                        if normalize_text(pred.text) == normalize_text(gold.text):
                            em_hits += 1
        if steps == 0:
            warnings.append(f"dropped group with no steps: {name}")
            continue
        row = {
            "step_accuracy": hits / steps,
            "episode_success": successes / len(recs),
            "episodes": float(len(recs)),
        }
        if text_steps:
            row["text_em"] = em_hits / text_steps
            row["text_f1"] = f1_sum / text_steps
        groups[name] = row

    overall: dict[str, float] = {}
    if groups:
        overall["step_accuracy"] = sum(g["step_accuracy"] for g in groups.values()) / len(groups)
        overall["episode_success"] = sum(g["episode_success"] for g in groups.values()) / len(groups)
    for kind in sorted(kind_total):
        overall[f"acc_{kind}"] = kind_hits[kind] / kind_total[kind]
    if small_total:
        overall["small_click_accuracy"] = small_hits / small_total
        overall["small_click_steps"] = float(small_total)
    return Report(groups, overall, warnings)
