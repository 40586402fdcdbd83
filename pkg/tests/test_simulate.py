import math

import numpy as np
import pytest

from seld3d import simulate as sim
from seld3d.core import read_metadata
from seld3d.metrics import compute_scores, score_segments
from seld3d.tensorio import read_wav

N = 120000


def test_foa_axis_source():
    src = np.random.default_rng(0).standard_normal(N)
    foa = sim.encode_foa(src, sim.Trajectory.static(0.0, 0.0, 1.0, 50))
    w, y, z, x = foa
    np.testing.assert_allclose(x, w)
    assert not y.any() and np.abs(z).max() < 1e-12


@pytest.mark.parametrize("dist", [0.5, 1.0, 2.0, 4.0])
def test_inverse_distance_gain_and_rms(dist):
    cfg = sim.SceneConfig(seed=3, n_events=1, event_frames=(50, 50), distance_range=(dist, dist),
                          snr_db=200.0)
    audio, events = sim.synth_scene(cfg, formats=("foa",))
    w = audio["foa"][0].astype(float)
    assert events[0].distance == dist
    assert math.sqrt(np.mean(w ** 2)) == pytest.approx(sim.SOURCE_RMS / dist, rel=0.01)


def test_woodworth_itd_at_side():
    itd = sim.woodworth_itd(math.pi / 2)
    assert itd == pytest.approx(0.0875 / 343 * (math.pi / 2 + 1))
    assert itd * 1e6 == pytest.approx(655.9, abs=0.5)
    assert sim.woodworth_itd(0.0) == 0
    assert sim.woodworth_itd(-0.3) == -sim.woodworth_itd(0.3)


def test_frontal_source_gives_identical_ears():
    src = np.random.default_rng(1).standard_normal(N)
    left, right = sim.render_binaural(src, sim.Trajectory.static(0.0, 10.0, 2.0, 50))
    np.testing.assert_array_equal(left, right)


def test_left_source_leads_on_left_ear():
    src = np.random.default_rng(2).standard_normal(N)
    left, right = sim.render_binaural(src, sim.Trajectory.static(90.0, 0.0, 1.0, 50))
    xc = np.correlate(right[1000:3000], left[1000:3000], mode="full")
    lag = int(np.argmax(xc)) - 1999
    assert lag == round(sim.woodworth_itd(math.pi / 2) * 24000)
    assert np.std(left) > np.std(right)


def test_synth_is_deterministic():
    cfg = sim.SceneConfig(seed=11, moving_fraction=0.5)
    a1, e1 = sim.synth_scene(cfg)
    a2, e2 = sim.synth_scene(cfg)
    assert e1 == e2
    for k in a1:
        assert a1[k].tobytes() == a2[k].tobytes()


def test_no_events_is_noise_only():
    audio, events = sim.synth_scene(sim.SceneConfig(seed=4, n_events=0, snr_db=20.0))
    assert events == []
    rms = math.sqrt(np.mean(audio["foa"][0].astype(float) ** 2))
    assert rms == pytest.approx(sim.SOURCE_RMS * 0.1, rel=0.02)


def test_polyphony_and_track_limits():
    for seed in range(1000):
        cfg = sim.SceneConfig(seed=seed, n_events=6, event_frames=(5, 20))
        placed = sim.plan_scene(cfg, np.random.default_rng(seed))
        active = np.zeros(50, int)
        for p in placed:
            active[p.traj.start:p.traj.start + p.traj.n_frames] += 1
        assert active.max() <= 3
        keys = [e.key for e in sim.scene_events(placed)]
        assert len(keys) == len(set(keys))


def test_moving_source_stays_in_range():
    cfg = sim.SceneConfig(seed=5, n_events=3, moving_fraction=1.0, max_speed=90.0)
    _, events = sim.synth_scene(cfg, formats=("foa",))
    assert all(-180 <= e.azimuth < 180 for e in events)
    assert len({e.azimuth for e in events}) > 3


def test_ground_truth_self_score_is_perfect():
    for seed in range(25):
        _, events = sim.synth_scene(sim.SceneConfig(seed=seed, n_events=5), formats=())
        if not events:
            continue
        s = compute_scores(score_segments(events, events, 50))
        assert (s.ER, s.F1, s.DOA_error, s.recall, s.dist_error) == (0, 100, 0, 100, 0)


def test_config_validation():
    with pytest.raises(sim.ConfigError):
        sim.SceneConfig(max_polyphony=4).validate()
    with pytest.raises(sim.ConfigError):
        sim.SceneConfig(distance_range=(0, 1)).validate()
    with pytest.raises(sim.BadTrajectory):
        sim.Trajectory.static(0, 0, -1.0, 5)


def test_synth_dataset_writes_and_resumes(tmp_path):
    cfg = sim.SceneConfig(seed=9, n_events=2)
    rows = sim.synth_dataset(cfg, 3, tmp_path)
    assert (tmp_path / "manifest.csv").read_text().splitlines()[0] == "clip_id,seed,path_wav,path_csv"
    man = sim.read_manifest(tmp_path)
    assert [r[0] for r in man] == ["clip_0000", "clip_0001", "clip_0002"]
    sr, audio = read_wav(man[1][2])
    assert sr == 24000 and audio.shape == (4, N)
    expected, events = sim.synth_scene(sim.SceneConfig(seed=man[1][1], n_events=2), formats=("foa",))
    np.testing.assert_array_equal(audio, expected["foa"])
    assert read_metadata(man[1][3]) == events
    stamp = man[0][2].stat().st_mtime_ns
    assert sim.synth_dataset(cfg, 4, tmp_path)[:3] == rows
    assert man[0][2].stat().st_mtime_ns == stamp
    assert len(sim.read_manifest(tmp_path)) == 4
