import numpy as np
import pytest

from seld3d import simulate as sim
from seld3d.augment import foa_rotations, rotate_rows, rotate_targets, rotation_moments
from seld3d.core import sph_to_unit, unit_to_sph
from seld3d.features import foa_features

N = 120000


def test_sixteen_distinct_orthogonal_maps():
    mats = foa_rotations()
    assert len({tuple(m.ravel()) for m in mats}) == 16
    np.testing.assert_array_equal(mats[0], np.eye(3))
    for m in mats:
        np.testing.assert_allclose(m @ m.T, np.eye(3))


@pytest.mark.parametrize("index", [1, 5, 10, 15])
def test_rotated_features_match_rotated_source(index):
    m = foa_rotations()[index]
    src = np.random.default_rng(index).standard_normal(N)
    az, el = 37.0, 21.0
    az2, el2 = unit_to_sph(m @ sph_to_unit(az, el))
    a = foa_features(sim.encode_foa(src, sim.Trajectory.static(az, el, 1.0, 50))).data
    b = foa_features(sim.encode_foa(src, sim.Trajectory.static(az2, el2, 1.0, 50))).data
    rows = a.transpose(1, 0, 2).reshape(250, -1)
    rot = rotate_rows(rows, m, 64).reshape(250, 7, 64).transpose(1, 0, 2)
    np.testing.assert_allclose(rot[4:], b[4:], atol=1e-4)
    # log-mel of near-silent bins is noisy in relative terms; compare strong bins
    strong = b[:4] > np.log(1e-3)
    np.testing.assert_allclose(rot[:4][strong], b[:4][strong], atol=1e-3)


def test_rotate_targets_both_layouts():
    m = foa_rotations()[3]
    t = np.zeros((2, 3, 13, 4), np.float32)
    t[0, :, 4] = (*sph_to_unit(10, 5), 2.0)
    r = rotate_targets(t, m)
    np.testing.assert_allclose(r[0, 0, 4, :3], m @ sph_to_unit(10, 5), atol=1e-6)
    assert r[0, 0, 4, 3] == 2.0
    acc = np.moveaxis(t[..., :3], -1, 2)[:, 0]  # (B, 3, C)
    racc, _ = rotate_targets((acc, np.zeros((2, 13))), m)
    np.testing.assert_allclose(racc[0, :, 4], m @ sph_to_unit(10, 5), atol=1e-6)


def test_rotation_moments_pool_all_orientations():
    rng = np.random.default_rng(0)
    X = rng.standard_normal((40, 7 * 8)).astype(np.float32) + np.arange(56)
    mean, std = rotation_moments(X, 8)
    pooled = np.concatenate([rotate_rows(X, m, 8) for m in foa_rotations()]).astype(np.float64)
    np.testing.assert_allclose(mean, pooled.mean(axis=0), atol=1e-9)
    np.testing.assert_allclose(std, pooled.std(axis=0), rtol=1e-6)
