import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hptune.geometry import closing_speed
from hptune.perception import (
    KalmanConfig,
    ObstacleTrack,
    SensorConfig,
    Tracker,
    estimate_velocity,
    fit_center,
    init_track,
    kf_predict,
    kf_update,
    predict_horizon,
    scan,
)

NOISELESS = SensorConfig(doppler_noise_std=0.0, range_noise_std=0.0)


def test_sensor_config_validation():
    with pytest.raises(ValueError):
        SensorConfig(angular_resolution=0.0)
    with pytest.raises(ValueError):
        SensorConfig(doppler_noise_std=-1.0)


def test_scan_head_on_approach_reads_minus_one():
    obs = [(10.0, 0.0, math.pi, -1.0, 0.0, 4.0, 2.0)]
    pts = scan((0, 0, 0), (0, 0), obs, NOISELESS)
    assert len(pts) > 0
    np.testing.assert_allclose(pts.doppler, np.sum(pts.ray_dirs * [-1.0, 0.0], axis=1), atol=1e-12)
    central = np.abs(pts.ray_dirs[:, 1]) < 1e-12
    np.testing.assert_allclose(pts.doppler[central], -1.0, atol=1e-12)
    assert np.all(pts.obstacle_ids == 0)
    np.testing.assert_allclose(np.linalg.norm(pts.ray_dirs, axis=1), 1.0, atol=1e-9)


def test_scan_hits_lie_on_near_face():
    obs = [(10.0, 0.0, 0.0, 0.0, 0.0, 4.0, 2.0)]
    pts = scan((0, 0, 0), (0, 0), obs, NOISELESS)
    np.testing.assert_allclose(pts.hits[:, 0], 8.0, atol=1e-9)
    assert np.all(np.abs(pts.hits[:, 1]) <= 1.0 + 1e-9)


def test_scan_tangential_motion_reads_zero():
    # A single ray along +x sees a target at (10, 0) moving along y.
    cfg = SensorConfig(angular_resolution=2 * math.pi, doppler_noise_std=0.0, range_noise_std=0.0)
    pts = scan((0, 0, 0), (0, 0), [(10.0, 0.0, 0.0, 0.0, 3.0, 4.0, 2.0)], cfg)
    assert len(pts) == 1
    assert pts.doppler[0] == pytest.approx(0.0, abs=1e-12)


def test_scan_out_of_range_and_empty():
    assert len(scan((0, 0, 0), (0, 0), [(80.0, 0, 0, 0, 0, 4, 2)], NOISELESS)) == 0
    assert len(scan((0, 0, 0), (0, 0), [], NOISELESS)) == 0


def test_scan_nearest_obstacle_occludes():
    obs = [(10.0, 0.0, 0.0, 0, 0, 4, 2), (20.0, 0.0, 0.0, 0, 0, 4, 2)]
    pts = scan((0, 0, 0), (0, 0), obs, NOISELESS)
    ahead = pts.for_obstacle(1)
    assert np.all(np.abs(ahead.ray_dirs[:, 1] / ahead.ray_dirs[:, 0]) > 1.0 / 8.0 - 1e-9)


def test_scan_deterministic_with_seed():
    obs = [(10.0, 2.0, 0.3, 1, 2, 4, 2)]
    a = scan((0, 0, 0), (1, 0), obs, SensorConfig(), np.random.default_rng(5))
    b = scan((0, 0, 0), (1, 0), obs, SensorConfig(), np.random.default_rng(5))
    np.testing.assert_array_equal(a.doppler, b.doppler)
    np.testing.assert_array_equal(a.hits, b.hits)


def _rays(angles):
    return np.stack([np.cos(angles), np.sin(angles)], axis=1)


@given(
    vx=st.floats(-10, 10), vy=st.floats(-10, 10),
    ex=st.floats(-8, 8), ey=st.floats(-8, 8),
    a0=st.floats(-math.pi, math.pi), spread=st.floats(0.05, 1.5),
)
def test_estimate_velocity_exact_on_noiseless(vx, vy, ex, ey, a0, spread):
    r = _rays(a0 + np.linspace(0.0, spread, 12))
    v, e = np.array([vx, vy]), np.array([ex, ey])
    d = (v - e) @ r.T
    np.testing.assert_allclose(estimate_velocity(r, d, e), v, atol=1e-6)


def test_estimate_velocity_example():
    r = _rays(np.array([0.1, 0.5, 0.9]))
    v = np.array([3.0, -1.0])
    np.testing.assert_allclose(estimate_velocity(r, r @ v, (0, 0)), v, atol=1e-6)


def test_estimate_velocity_rank_one():
    r = np.tile([[math.cos(0.4), math.sin(0.4)]], (5, 1))
    ego = np.array([1.0, 2.0])
    v = np.array([3.0, -1.0])
    out = estimate_velocity(r, (v - ego) @ r.T, ego)
    rad = r[0]
    assert (out - ego) @ rad == pytest.approx((v - ego) @ rad)
    assert (out - ego) @ np.array([-rad[1], rad[0]]) == pytest.approx(0.0, abs=1e-12)


def test_estimate_velocity_static_and_empty():
    r = _rays(np.array([0.0, 1.0]))
    np.testing.assert_array_equal(estimate_velocity(r, [0.0, 0.0], (0, 0)), [0.0, 0.0])
    with pytest.raises(ValueError):
        estimate_velocity(np.zeros((0, 2)), [], (0, 0))


def test_doppler_sign_consistent_with_closing_speed():
    ego = (0.0, 0.0, 0.0)
    obs = [(12.0, 1.0, math.pi, -2.0, 0.5, 4.0, 2.0)]
    pts = scan(ego, (1.0, 0.0), obs, NOISELESS)
    assert np.median(pts.doppler) < 0
    v_hat = estimate_velocity(pts.ray_dirs, pts.doppler, (1.0, 0.0))
    np.testing.assert_allclose(v_hat, [-2.0, 0.5], atol=1e-6)
    assert closing_speed((0, 0), (1.0, 0.0), (12.0, 1.0), v_hat) > 0


@pytest.mark.parametrize("heading", [0.0, 0.7, -2.0])
def test_fit_center_recovers_true_center(heading):
    c = np.array([9.0, -3.0])
    obs = [(c[0], c[1], heading, 0, 0, 4.0, 2.0)]
    pts = scan((0, 0, 0), (0, 0), obs, NOISELESS)
    # faces are sampled once per ray; the far end of a face is off by at most one ray gap
    gap = np.linalg.norm(c) * NOISELESS.angular_resolution
    np.testing.assert_allclose(fit_center(pts.hits, (0, 0), heading, 4.0, 2.0), c, atol=gap)
    fine = SensorConfig(angular_resolution=1e-5, doppler_noise_std=0.0, range_noise_std=0.0)
    pts = scan((0, 0, 0), (0, 0), obs, fine)
    np.testing.assert_allclose(fit_center(pts.hits, (0, 0), heading, 4.0, 2.0), c, atol=1e-3)


def _cv_run(v, p0=(0.0, 0.0), n=10, dt=0.12, track=None):
    v = np.asarray(v, dtype=float)
    p = np.asarray(p0, dtype=float)
    tr = init_track(p, v) if track is None else track
    for _ in range(n):
        p = p + v * dt
        tr = kf_update(tr, p, v, dt)
    return tr, p


def test_kf_converges_on_noiseless_cv():
    tr, p = _cv_run([5.0, -2.0])
    assert np.linalg.norm(tr.velocity - [5.0, -2.0]) < 1e-3
    # also from a wrong initial velocity
    wrong = init_track((0.0, 0.0), (0.0, 0.0))
    tr, p = _cv_run([5.0, -2.0], track=wrong)
    assert np.linalg.norm(tr.velocity - [5.0, -2.0]) < 1e-3
    assert np.linalg.norm(tr.position - p) < 1e-2


def test_kf_zero_innovation():
    tr = init_track((1.0, 2.0), (3.0, 4.0))
    pred = kf_predict(tr, 0.1)
    out = kf_update(tr, pred.position, pred.velocity, 0.1)
    np.testing.assert_allclose(out.state, pred.state, atol=1e-12)
    assert np.trace(out.covariance) <= np.trace(pred.covariance)


def test_kf_rejects_nonpositive_dt():
    tr = init_track((0, 0), (1, 0))
    with pytest.raises(ValueError):
        kf_update(tr, (0, 0), (1, 0), 0.0)
    with pytest.raises(ValueError):
        kf_predict(tr, -1.0)


def test_kf_covariance_psd_under_fuzzing():
    rng = np.random.default_rng(11)
    cfg = KalmanConfig()
    tr = init_track((0, 0), (0, 0))
    for _ in range(10_000):
        dt = 10 ** rng.uniform(-6, 0.5)
        if rng.random() < 0.2:
            tr = kf_predict(tr, dt, cfg)
        else:
            scale = 10 ** rng.uniform(-3, 4)
            tr = kf_update(tr, rng.normal(0, scale, 2), rng.normal(0, scale, 2), dt, cfg)
        P = tr.covariance
        assert np.max(np.abs(P - P.T)) <= 1e-9
        assert np.linalg.eigvalsh(P).min() >= -1e-9


def test_predict_horizon_examples():
    tr = ObstacleTrack(np.array([0.0, 0.0, 5.0, 0.0]), np.eye(4), last_heading=1.0)
    pred = predict_horizon(tr, 15, 0.12)
    assert pred.poses.shape == (14, 3)
    np.testing.assert_allclose(pred.poses[-1, :2], [8.4, 0.0], atol=1e-12)
    np.testing.assert_allclose(pred.velocities, np.tile([5.0, 0.0], (14, 1)))
    assert np.all(pred.poses[:, 2] == 0.0)

    still = ObstacleTrack(np.array([2.0, 3.0, 0.0, 0.0]), np.eye(4), last_heading=1.0)
    pred = predict_horizon(still, 5, 0.12)
    np.testing.assert_array_equal(pred.poses, np.tile([2.0, 3.0, 1.0], (4, 1)))

    tiny = predict_horizon(tr, 15, 1e-9)
    np.testing.assert_allclose(tiny.poses[:, :2], 0.0, atol=1e-7)
    with pytest.raises(ValueError):
        predict_horizon(tr, 1, 0.12)


def test_tracker_end_to_end_noiseless():
    trk = Tracker(sensor=NOISELESS)
    dt = 0.12
    x, y, th = 15.0, 4.0, math.pi + 0.3
    v = 5.0 * np.array([math.cos(th), math.sin(th)])
    for _ in range(10):
        obs = [(x, y, th, v[0], v[1], 4.0, 2.0)]
        trk.observe(scan((0, 0, 0), (0, 0), obs, NOISELESS), (0, 0, 0), (0, 0), dt)
        x, y = x + v[0] * dt, y + v[1] * dt
    tr = trk.tracks[0]
    # box-center measurements carry ray-spacing quantisation (about 0.1 m here)
    np.testing.assert_allclose(tr.velocity, v, atol=0.05)
    np.testing.assert_allclose(tr.position, [x - v[0] * dt, y - v[1] * dt], atol=0.1)
    assert len(trk.predictions(15, dt)) == 1


def test_tracker_coasts_unseen():
    trk = Tracker(sensor=NOISELESS)
    obs = [(10.0, 0.0, 0.0, 1.0, 0.0, 4.0, 2.0)]
    trk.observe(scan((0, 0, 0), (0, 0), obs, NOISELESS), (0, 0, 0), (0, 0), 0.1)
    empty = scan((0, 0, 0), (0, 0), [], NOISELESS)
    trk.observe(empty, (0, 0, 0), (0, 0), 0.1)
    assert trk.tracks[0].missed == 1
    assert trk.tracks[0].position[0] == pytest.approx(10.1)
