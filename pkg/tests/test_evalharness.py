import json
import math

import pytest

from texloc.core import Pose2, compose, pose_error
from texloc.evalharness import (EvalReport, FrameRecord, Suite, SuiteConfig, SuccessCriterion, coherence_check,
                                judge_against_truth, run_sweep, verify_pose)
from texloc.locate import FailureReason, LocalizationResult
from texloc.features import extract
from texloc.synth import Degradation, generate_texture, sample_query


@pytest.mark.parametrize("text, expect", [
    ("30px:1.5deg", (30.0, 1.5)),
    (" 12.5 px : 0.25 deg ", (12.5, 0.25)),
    ("1e1px:2deg", (10.0, 2.0)),
])
def test_criterion_parse(text, expect):
    c = SuccessCriterion.parse(text)
    assert (c.max_translation, c.max_rotation) == expect
    assert SuccessCriterion.parse(str(c)) == c


@pytest.mark.parametrize("text", ["30:1.5", "30px", "px:deg", "-3px:1deg"])
def test_criterion_parse_rejects(text):
    with pytest.raises(ValueError):
        SuccessCriterion.parse(text)


def test_criterion_accepts():
    c = SuccessCriterion()
    assert not c.accepts(40.0, 0.1)
    assert c.accepts(5.0, 0.5)
    assert not c.accepts(5.0, 2.0)
    assert c.accepts(30.0, 1.5)


def test_judge_against_truth():
    truth = Pose2(0.1, 100.0, 200.0)
    near = LocalizationResult(True, Pose2(0.1 + math.radians(0.5), 103.0, 204.0))
    far = LocalizationResult(True, Pose2(0.1, 140.0, 200.0))
    failed = LocalizationResult(False, failure=FailureReason.WEAK_PEAK)
    v = judge_against_truth(near, truth)
    assert v.success and v.translation_error == pytest.approx(5.0)
    assert v.rotation_error == pytest.approx(0.5)
    assert judge_against_truth(far, truth).reason == "pose_mismatch"
    assert judge_against_truth(failed, truth).reason == "localization_failed"


def _line(n, step=10.0):
    return [Pose2(0.0, i * step, 0.0) for i in range(n)]


def test_coherence_constant_velocity():
    assert coherence_check(_line(10)) == [False] * 10


def test_coherence_teleport():
    p = _line(10)
    p[5] = Pose2(0.0, 5000.0, 3000.0)
    flags = coherence_check(p)
    assert flags[5] and sum(flags) == 1


def test_coherence_end_frames():
    p = _line(8)
    p[0] = Pose2(0.0, -900.0, 0.0)
    p[-1] = Pose2(0.0, 70.0, 800.0)
    flags = coherence_check(p)
    assert flags[0] and flags[-1] and sum(flags) == 2


def test_coherence_skips_failures():
    p = _line(6)
    p[2] = None
    p[3] = LocalizationResult(False)
    assert coherence_check(p) == [False] * 6


@pytest.mark.parametrize("poses", [[], [Pose2(0, 0, 0)], [Pose2(0, 0, 0), Pose2(0, 1e4, 0)]])
def test_coherence_short_sequences(poses):
    assert coherence_check(poses) == [False] * len(poses)


def test_coherence_stationary_sequence_uses_floor():
    p = [Pose2(0.0, 0.3 * (i % 2), 0.0) for i in range(6)]
    assert coherence_check(p) == [False] * 6


def test_run_sweep_rejects_unknown_axis():
    with pytest.raises(ValueError, match="axis"):
        run_sweep("lighting", [1], SuiteConfig())


def test_report_aggregates():
    rec = [FrameRecord(0, 8, True, "ok", None, 1.0, 0.1, 12, 20, 5.0),
           FrameRecord(1, 8, False, "localization_failed", "weak_peak", math.nan, math.nan, 0, 3, 4.0),
           FrameRecord(0, 16, True, "ok", None, 3.0, 0.2, 15, 22, 6.0)]
    rep = EvalReport("k", [8, 16], SuccessCriterion(), rec)
    assert rep.success_rates == {8: 0.5, 16: 1.0}
    assert rep.failure_histogram(8) == {"weak_peak": 1}
    assert rep.mean_translation_error() == pytest.approx(2.0)
    assert rep.timing_percentiles(16)["p50"] == pytest.approx(6.0)
    lines = rep.to_tsv().strip().split("\n")
    assert len(lines) == 4 and lines[0].startswith("axis\tindex")
    assert "nan" in lines[2]


# -- a small synthetic suite -------------------------------------------------

@pytest.fixture(scope="module")
def suite():
    return Suite(SuiteConfig(texture_seed=3, rows=2, cols=3, n_queries=8, jitter=10.0, jitter_deg=2.0))


def test_suite_truth_frame_matches_stitch(suite):
    for im, p in zip(suite.map_images, suite.truth_poses):
        et, er = pose_error(im.pose, compose(suite.align, p))
        assert et < 1.0 and er < 0.1


def test_suite_run_and_report(suite, tmp_path):
    rep = run_sweep("k", [16], suite)
    assert rep.success_rate(16) == 1.0
    assert rep.mean_translation_error(16) < 2.0
    rep.save(tmp_path / "r.json", tmp_path / "r.tsv")
    data = json.loads((tmp_path / "r.json").read_text())
    assert data["success_rate"] == {"16": 1.0} and len(data["frames"]) == 8
    assert (tmp_path / "r.tsv").read_text().count("\n") == 9


def test_suite_report_is_deterministic(suite):
    a = run_sweep("occlusion", [0.25], suite).to_json(include_timings=False)
    suite._queries.clear()
    b = run_sweep("occlusion", [0.25], suite).to_json(include_timings=False)
    assert a == b


def test_verify_pose_agrees_with_truth(suite):
    db = suite.database()
    loc = suite.localizer(db)
    feats = suite.query_features()
    n = 0
    for fs, truth in zip(feats, suite.truths()):
        res = loc.localize_features(fs)
        v = verify_pose(db, res, fs, suite.map_features())
        assert v.success and v.correspondences >= 10
        et, er = pose_error(v.reference, truth)
        assert et < 2.0 and er < 0.1
        n += 1
    assert n == 8


def test_verify_pose_rejects_wrong_pose(suite):
    db = suite.database()
    fs = suite.query_features()[0]
    res = suite.localizer(db).localize_features(fs)
    shifted = LocalizationResult(True, Pose2(res.pose.theta, res.pose.tx + 200.0, res.pose.ty))
    v = verify_pose(db, shifted, fs, suite.map_features())
    assert not v.success and v.reason in ("pose_mismatch", "few_correspondences")


def test_verify_pose_on_unrelated_query(suite):
    other = generate_texture(77, 1400, 1100)
    fs = extract(sample_query(other, Pose2(0.0, 40.0, 40.0)).image)
    fake = LocalizationResult(True, suite.map_images[2].pose)
    v = verify_pose(suite.database(), fake, fs, suite.map_features())
    assert not v.success and v.reason == "few_correspondences"


def test_heavy_degradation_lowers_success(suite):
    rep = run_sweep("occlusion", [0.0, 0.9], suite)
    assert rep.success_rate(0.0) >= rep.success_rate(0.9)
    assert Degradation(0.9) in {k[0] for k in suite._queries}


def test_random_selection_beats_response_under_dust():
    # Dust specks have strong DoG responses but appear afresh in every capture.
    s = Suite(SuiteConfig(texture_seed=4, rows=2, cols=3, n_queries=20, dust=200.0, per_image=30))
    rep = run_sweep("selection", ["random", "response"], s)
    assert rep.success_rate("random") >= rep.success_rate("response")
    assert rep.success_rate("random") >= 0.9
