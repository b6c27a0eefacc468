"""Step-matching rules, text F1, and report aggregation."""

import json
import math

import pytest

from afragent import evalkit as ek
from afragent.actions import (
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


def test_click_radius_boundary_is_matched():
    gold = Click(0.5, 0.5)
    on_boundary = Click(0.5 + 0.14, 0.5)
    r = ek.match_step(on_boundary, gold)
    assert r.matched and r.reason == "click_within_radius"
    just_outside = Click(0.5 + 0.1400001, 0.5)
    assert not ek.match_step(just_outside, gold).matched


def test_click_diagonal_just_over_radius():
    # hypot(0.1, 0.1) = 0.1414... > 0.14, so this only matches via the rect rule
    gold = Click(0.3, 0.3)
    pred = Click(0.2, 0.2)
    assert math.hypot(0.1, 0.1) > 0.14
    assert not ek.match_step(pred, gold).matched
    r = ek.match_step(pred, gold, gold_rect=(0.1, 0.1, 0.9, 0.9))
    assert r.matched and r.reason == "click_inside_rect"


def test_click_rect_edges_inclusive():
    gold = Click(0.5, 0.5)
    rect = (0.1, 0.1, 0.2, 0.2)
    assert ek.match_step(Click(0.1, 0.2), gold, gold_rect=rect).matched
    assert not ek.match_step(Click(0.0999, 0.15), gold, gold_rect=rect).matched


def test_scroll_axis_rules():
    assert ek.match_step(Scroll("up"), Scroll("down")).matched
    assert ek.match_step(Scroll("left"), Scroll("right")).matched
    assert not ek.match_step(Scroll("up"), Scroll("left")).matched
    assert ek.match_step(Swipe("down"), Swipe("up")).matched
    # scroll and swipe are different variants even on the same axis
    r = ek.match_step(Swipe("up"), Scroll("up"))
    assert not r.matched and r.reason == "variant_mismatch"


def test_type_text_normalization_and_containment():
    assert ek.match_step(TypeText("  New   Blush "), TypeText("new blush")).matched
    assert ek.match_step(TypeText("blush"), TypeText("new blush")).matched
    assert ek.match_step(TypeText("new blush please"), TypeText("new blush")).matched
    assert not ek.match_step(TypeText("rouge"), TypeText("new blush")).matched
    assert not ek.match_step(Click(0.5, 0.5), TypeText("x")).matched


def test_press_variants_exact():
    assert ek.match_step(PressBack(), PressBack()).matched
    assert ek.match_step(TaskComplete(), TaskComplete()).matched
    assert not ek.match_step(PressBack(), PressHome()).matched
    assert not ek.match_step(PressEnter(), TaskComplete()).matched


def test_parse_error_is_a_mismatch():
    r = ek.match_step(ParseError(0, "bad"), Click(0.5, 0.5))
    assert not r.matched and r.reason == "parse_error"


def test_match_total_over_all_gold_variants():
    preds = [Click(0.5, 0.5), TypeText("x"), Scroll("up"), Swipe("up"),
             PressBack(), PressHome(), PressEnter(), TaskComplete()]
    golds = preds
    for g in golds:
        for p in preds:
            r = ek.match_step(p, g)
            assert r.reason in ek.REASONS


def test_text_f1_examples():
    assert ek.text_f1("", "") == 1.0
    assert ek.text_f1("x", "") == 0.0
    assert ek.text_f1("", "x") == 0.0
    assert abs(ek.text_f1("new blush", "blush") - 2 / 3) < 1e-12
    assert ek.text_f1("a b", "b a") == 1.0
    assert ek.text_f1("q", "z") == 0.0


def test_score_episode_missing_preds_count_as_miss():
    golds = [Click(0.5, 0.5), TaskComplete()]
    score = ek.score_episode([Click(0.5, 0.5)], golds)
    assert score.matched_steps == 1 and not score.success
    full = ek.score_episode([Click(0.5, 0.5), TaskComplete()], golds)
    assert full.success and full.step_accuracy == 1.0


def test_aggregate_unweighted_overall_and_untagged():
    rec_a = ek.EpisodeRecord("a", "click", [Click(0.5, 0.5)], [Click(0.5, 0.5)], [None])
    rec_b = ek.EpisodeRecord(
        "b", "type",
        [TypeText("hello"), TypeText("x")],
        [TypeText("hello"), TypeText("zzz")],
        [None, None],
    )
    rec_c = ek.EpisodeRecord("c", "", [PressBack()], [PressBack()], [None])
    rep = ek.aggregate([rec_a, rec_b, rec_c])
    assert set(rep.groups) == {"click", "type", "untagged"}
    assert rep.groups["click"]["step_accuracy"] == 1.0
    assert rep.groups["type"]["step_accuracy"] == 0.5
    assert rep.groups["type"]["text_em"] == 0.5
    # unweighted mean over the three groups
    assert abs(rep.overall["step_accuracy"] - (1.0 + 0.5 + 1.0) / 3) < 1e-12
    assert rep.overall["acc_press_back"] == 1.0


def test_aggregate_drops_stepless_group_with_warning():
    empty = ek.EpisodeRecord("e", "weird", [], [], [])
    ok = ek.EpisodeRecord("a", "click", [Click(0.5, 0.5)], [Click(0.5, 0.5)], [None])
    rep = ek.aggregate([empty, ok])
    assert "weird" not in rep.groups
    assert any("weird" in w for w in rep.warnings)
    assert rep.overall["step_accuracy"] == 1.0


def test_small_click_metric():
    small = ek.EpisodeRecord(
        "s", "click", [Click(0.95, 0.95)], [Click(0.5, 0.5)], [(0.45, 0.45, 0.52, 0.52)]
    )
    rep = ek.aggregate([small])
    assert rep.overall["small_click_steps"] == 1.0
    assert rep.overall["small_click_accuracy"] == 0.0


def test_report_serialization():
    rec = ek.EpisodeRecord("a", "click", [Click(0.5, 0.5)], [Click(0.5, 0.5)], [None])
    rep = ek.aggregate([rec])
    text = rep.to_text()
    assert "click.step_accuracy\t1.000000" in text
    data = json.loads(rep.to_json())
    assert data["groups"]["click"]["step_accuracy"] == 1.0


def test_rects_length_validated():
    with pytest.raises(ValueError):
        ek.score_episode([PressBack()], [PressBack()], rects=[None, None])
