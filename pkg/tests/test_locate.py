import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from texloc.core import Pose2, apply, compose, pose_error
from texloc.features import extract
from texloc.locate import (EmptyGridError, FailureReason, FeatureMatch, LocalizeConfig, Localizer, Matches,
                           RansacFailure, accumulate, find_peak, location_votes, null_peak_quantile,
                           origin_votes, ransac_pose, second_peak, vote_origin)
from texloc.mapdb import MapImage, build_database
from texloc.rigid import fit_rigid
from texloc.synth import generate_texture, random_inside_pose, sample_query, zigzag_poses

angles = st.floats(-math.pi + 1e-6, math.pi, allow_nan=False)
coords = st.floats(-2000, 2000, allow_nan=False)
poses = st.builds(Pose2, angles, coords, coords)


def _matrix(p: Pose2) -> np.ndarray:
    c, s = math.cos(p.theta), math.sin(p.theta)
    return np.array([[c, -s, p.tx], [s, c, p.ty], [0, 0, 1.0]])


def _votes_matches(query_xy, db_xy, theta=0.0):
    n = len(query_xy)
    q = np.column_stack([np.zeros(n), query_xy])
    d = np.column_stack([np.full(n, theta), db_xy])
    return Matches(np.arange(n), q, np.arange(n), d, np.zeros(n))


# -- voting ---------------------------------------------------------------

def test_vote_origin_example():
    m = FeatureMatch(query_pose=Pose2(0.0, 30.0, 40.0), db_pose=Pose2(0.0, 100.0, 0.0))
    v = vote_origin(m)
    assert (v.tx, v.ty) == pytest.approx((70.0, -40.0))
    assert v.theta == pytest.approx(0.0)


@given(poses, poses)
def test_vote_origin_matches_matrix_oracle(q, d):
    expect = _matrix(d) @ np.linalg.inv(_matrix(q))
    v = vote_origin(FeatureMatch(q, d))
    assert np.allclose(_matrix(v), expect, atol=1e-6)


@given(poses, poses, poses)
def test_vote_origin_moves_with_the_query_frame(q, d, g):
    # Expressing both features relative to a shifted image frame moves the vote by the same shift.
    v1 = vote_origin(FeatureMatch(q, d))
    v2 = vote_origin(FeatureMatch(compose(g.inverse(), q), d))
    assert pose_error(v2, compose(v1, g))[0] < 1e-6


def test_origin_votes_vectorised_agree():
    rng = np.random.default_rng(0)
    q = np.column_stack([rng.uniform(-3, 3, 50), rng.uniform(0, 1000, (50, 2))])
    d = np.column_stack([rng.uniform(-3, 3, 50), rng.uniform(0, 1000, (50, 2))])
    ms = Matches(np.arange(50), q, np.arange(50), d, np.zeros(50))
    v = origin_votes(ms)
    for i in range(50):
        one = vote_origin(ms[i])
        assert np.allclose(v[i, 1:], one.t, atol=1e-9)
    assert np.array_equal(location_votes(ms), d)


def test_feature_match_rejects_negative_distance():
    with pytest.raises(ValueError):
        FeatureMatch(Pose2.identity(), Pose2.identity(), distance=-1.0)


# -- accumulation and peaks -----------------------------------------------

def test_accumulate_empty():
    g = accumulate(np.zeros((0, 3)), (0, 0, 500, 500))
    assert g.counts.sum() == 0 and g.total == 0
    with pytest.raises(EmptyGridError):
        find_peak(g)


def test_accumulate_identical_votes():
    g = accumulate(np.tile([0.0, 120.0, 260.0], (10, 1)), (0, 0, 500, 500), 50)
    assert g.counts[5, 2] == 10 and g.counts.sum() == 10
    (r, c), cand = find_peak(g)
    assert (r, c) == (5, 2) and len(cand) == 10


def test_accumulate_sink():
    votes = np.array([[0, -10, 10], [0, 10, 10], [0, 600, 10], [0, 10, 499.9]])
    g = accumulate(votes, (0, 0, 500, 500), 50)
    assert g.sink == 2 and g.counts.sum() == 2 and g.total == 4


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.floats(-100, 700), st.floats(-100, 700)), max_size=60),
       st.sampled_from([25.0, 50.0, 80.0]))
def test_accumulate_conserves_votes(pts, cell):
    v = np.array(pts, float).reshape(-1, 2)
    g = accumulate(v, (0, 0, 600, 600), cell)
    assert g.counts.sum() + g.sink == len(v)


def test_null_band_for_uniform_votes():
    # 2000 votes over 10k cells: the largest cell rarely exceeds a handful.
    q = null_peak_quantile(2000, 10_000, 0.99, trials=500)
    assert q <= 6


def test_find_peak_single_vote():
    g = accumulate(np.array([[0.0, 260.0, 130.0]]), (0, 0, 500, 500), 50)
    assert find_peak(g)[0] == (2, 5)


def test_find_peak_planted_cluster():
    rng = np.random.default_rng(3)
    noise = np.column_stack([np.zeros(500), rng.uniform(0, 5000, (500, 2))])
    planted = np.tile([0.0, 2525.0, 1275.0], (8, 1))
    g = accumulate(np.vstack([noise, planted]), (0, 0, 5000, 5000), 50)
    (r, c), cand = find_peak(g)
    assert (r, c) == (25, 50)
    assert set(range(500, 508)) <= set(cand.tolist())


def test_find_peak_cluster_straddling_cells():
    # Votes split across the corner of four cells are still gathered by the 3x3 block.
    votes = np.array([[0, 249, 249], [0, 251, 249], [0, 249, 251], [0, 251, 251], [0, 250.5, 250.5]], float)
    g = accumulate(votes, (0, 0, 1000, 1000), 50)
    _, cand = find_peak(g)
    assert len(cand) == 5


def test_find_peak_ties_lowest_row_then_col():
    votes = np.array([[0, 425, 75], [0, 425, 75], [0, 75, 425], [0, 75, 425], [0, 275, 75], [0, 275, 75]], float)
    g = accumulate(votes, (0, 0, 500, 500), 50)
    assert find_peak(g)[0] == (1, 5)


def test_second_peak_ignores_overlapping_blocks():
    votes = [[0, 25, 25]] * 6 + [[0, 75, 25]] * 3 + [[0, 425, 425]] * 2
    g = accumulate(np.array(votes, float), (0, 0, 500, 500), 50)
    peak, _ = find_peak(g)
    assert second_peak(g, peak) == 2


# -- RANSAC ----------------------------------------------------------------

def _synthetic_candidates(n_in, n_out, truth, rng, noise=0.0):
    q = rng.uniform(0, 1280, (n_in + n_out, 2))
    d = apply(truth, q)
    d[:n_in] += rng.normal(0, noise, (n_in, 2)) if noise else 0
    d[n_in:] = rng.uniform(d[:n_in].min(0) - 100, d[:n_in].max(0) + 100, (n_out, 2))
    return _votes_matches(q, d)


def test_ransac_noiseless_exact():
    truth = Pose2(0.6, 812.0, -40.0)
    cand = _synthetic_candidates(10, 0, truth, np.random.default_rng(0))
    pose, inl = ransac_pose(cand)
    assert inl.all()
    assert pose_error(pose, truth)[0] < 1e-6 and pose_error(pose, truth)[1] < 1e-6


def test_ransac_with_outliers():
    truth = Pose2(-2.0, 300.0, 900.0)
    good = 0
    for seed in range(100):
        rng = np.random.default_rng(seed)
        cand = _synthetic_candidates(5, 15, truth, rng)
        pose, _ = ransac_pose(cand, rng=rng)
        et, er = pose_error(pose, truth)
        good += et < 1.0 and er < 0.1
    assert good >= 99


def test_ransac_needs_two_candidates():
    cand = _votes_matches(np.zeros((1, 2)), np.ones((1, 2)))
    with pytest.raises(ValueError):
        ransac_pose(cand)


def test_ransac_reports_too_few_inliers():
    rng = np.random.default_rng(1)
    cand = _votes_matches(rng.uniform(0, 1000, (8, 2)), rng.uniform(0, 1000, (8, 2)))
    with pytest.raises(RansacFailure):
        ransac_pose(cand, min_inliers=5)


def test_localize_config_validation():
    with pytest.raises(ValueError):
        LocalizeConfig(cell_size=0)
    with pytest.raises(ValueError):
        LocalizeConfig(min_inliers=1)


# -- end to end ------------------------------------------------------------

@pytest.fixture(scope="module")
def small_map(texture):
    ims, sets = [], []
    for i, p in enumerate(zigzag_poses(2, 2)):
        img = sample_query(texture, p).image
        ims.append(MapImage(i, p, 1280, 960))
        sets.append(extract(img))
    db = build_database(ims, sets, k=16, features_per_image=200, seed=0)
    return db, Localizer(db)


@pytest.fixture(scope="module")
def located(texture, small_map):
    _, loc = small_map
    truth = random_inside_pose(np.random.default_rng(11), (0, 0, 2047, 1535))
    return truth, loc.localize(sample_query(texture, truth).image)


def test_localize_recovers_pose(located):
    truth, res = located
    assert res.success and res.failure is None
    et, er = pose_error(res.pose, truth)
    assert et < 2.0 and er < 0.1


def test_localize_result_invariants(located):
    _, res = located
    assert res.peak_votes >= res.n_inliers >= 5
    assert res.peak_votes >= res.peak_cell_votes
    assert res.total_matches >= res.peak_votes
    assert res.second_peak_votes < res.peak_votes
    assert res.timings["total"] == pytest.approx(sum(v for k, v in res.timings.items() if k != "total"))


def test_localize_pose_is_least_squares_over_inliers(located):
    _, res = located
    ls = fit_rigid(res.inliers.query_pose[:, 1:], res.inliers.db_pose[:, 1:])
    assert pose_error(ls, res.pose)[0] < 1e-6


def test_localize_is_deterministic(texture, small_map):
    db, _ = small_map
    img = sample_query(texture, random_inside_pose(np.random.default_rng(4), (0, 0, 2047, 1535))).image
    a, b = Localizer(db).localize(img), Localizer(db).localize(img)
    assert a.success and b.success
    assert a.pose.as_array().tolist() == b.pose.as_array().tolist()
    assert a.n_inliers == b.n_inliers


def test_localize_absent_texture_is_weak_peak(small_map):
    _, loc = small_map
    other = generate_texture(99, 1400, 1100, "scratchy")
    res = loc.localize(sample_query(other, Pose2(0.0, 50.0, 50.0)).image)
    assert not res.success
    assert res.failure is FailureReason.WEAK_PEAK


def test_localize_blank_image_has_no_features(small_map):
    _, loc = small_map
    res = loc.localize(np.full((960, 1280), 0.5, np.float32))
    assert not res.success and res.failure is FailureReason.NO_FEATURES
    assert res.n_features == 0


def test_result_json(located):
    _, res = located
    out = json.loads(json.dumps(res.to_json(0.16)))
    assert out["schema_version"] == 1 and out["success"]
    assert out["pose_mm"]["tx"] == pytest.approx(res.pose.tx * 0.16)
    assert out["pose"]["theta"] == pytest.approx(math.degrees(res.pose.theta))
    assert out["inliers"] == res.n_inliers
