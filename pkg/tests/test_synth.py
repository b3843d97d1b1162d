import math

import numpy as np
import pytest

from rulemap.config import RunConfig
from rulemap.errors import BadScenario
from rulemap.io import clip_to_json, dumps
from rulemap.map_model import validate_clip
from rulemap.models import visible_segments
from rulemap.pipeline import plan_segments
from rulemap.synth import SCENARIOS, generate, parse_scenario, suite


def test_parse_scenario_forms():
    assert parse_scenario("curve(radius=80)") == ("curve", {"radius": 80.0})
    assert parse_scenario("curve:60") == ("curve", {"radius": 60.0})
    assert parse_scenario("merge") == ("merge", {})
    for bad in ("highway", "curve(radius=10)", "straight(radius=50)", "curve(radius=abc)"):
        with pytest.raises(BadScenario):
            parse_scenario(bad)


@pytest.mark.parametrize("name", SCENARIOS)
def test_every_scenario_validates(name):
    for clip in generate(name, 3, 5):
        assert [f for f in validate_clip(clip) if f.severity == "error"] == []


def test_deterministic_bytes():
    a = dumps(clip_to_json(generate("straight", 1, 7)[0]))
    b = dumps(clip_to_json(generate("straight", 1, 7)[0]))
    assert a == b


def _circle_fit(pts):
    # algebraic fit: x^2 + y^2 + D x + E y + F = 0
    A = np.column_stack([pts[:, 0], pts[:, 1], np.ones(len(pts))])
    rhs = -(pts ** 2).sum(axis=1)
    (D, E, F), *_ = np.linalg.lstsq(A, rhs, rcond=None)
    c = np.array([-D / 2, -E / 2])
    return c, math.sqrt(c @ c - F)


def test_curve_chord_deviation():
    clip = generate("curve(radius=50)", 1, 0)[0]
    for lane in clip.ground_truth.lanes:
        pts = lane.xy - lane.xy[0]
        center, r = _circle_fit(pts)
        assert np.abs(np.linalg.norm(pts - center, axis=1) - r).max() < 1e-4
        chords = np.linalg.norm(np.diff(pts, axis=0), axis=1)
        sagitta = r - np.sqrt(r * r - (chords / 2) ** 2)
        assert sagitta.max() <= 0.05


def test_multi_sign_rules_distinct():
    for clip in generate("multi_sign", 4, 0):
        rules = clip.ground_truth.rules
        assert len(rules) >= 2
        assert len({r.kv_set for r in rules}) == len(rules)
        assert len({r.sign_position for r in rules}) == len(rules)


def test_occlusion_sign_seen_once_rules_extend():
    cfg = RunConfig()
    for clip in generate("occlusion", 5, 0):
        plan = plan_segments(clip.trajectory, cfg.frame_template())
        (rule,) = clip.ground_truth.rules
        seen = visible_segments(rule.sign_position, plan.frames, 1)
        assert seen == [0]
        assert len(plan) - 1 - seen[0] >= 3


def test_suite_size():
    clips = suite(9, 0)
    assert len(clips) == 54
    assert len({c.clip_id for c in clips}) == 54
