import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from vadecomp.imaging import (
    CROP_GRID,
    SIM_GRID,
    GridMismatch,
    GridSpec,
    VoxelImage,
    apply_crosstalk,
    calibrate,
    crop,
    poisson_smear,
    shift_image,
    voxelize,
)
from vadecomp.physics import ParticleKinematics, TrackDeposit, simulate_track


def deposit(points, light):
    points = np.asarray(points, dtype=float).reshape(-1, 3)
    light = np.asarray(light, dtype=float)
    return TrackDeposit(points, np.ones(len(light)), light, light)


def test_grid_validation():
    with pytest.raises(ValueError):
        GridSpec(8, 10.0)
    with pytest.raises(ValueError):
        GridSpec(7, 0.0)
    assert SIM_GRID.half_extent == 45.0
    assert np.allclose(CROP_GRID.centers()[3, 3, 3], 0.0)


def test_grid_mismatch():
    a = VoxelImage(SIM_GRID, np.zeros((9, 9, 9)))
    b = VoxelImage(CROP_GRID, np.zeros((7, 7, 7)))
    with pytest.raises(GridMismatch):
        a + b


def test_soft_center_takes_all():
    img = voxelize(deposit([[10.0, -20.0, 0.0]], [2.0]), SIM_GRID, "soft")
    assert img.pe[5, 2, 4] == 2.0
    assert img.total == 2.0


def test_soft_halfway_splits_evenly():
    img = voxelize(deposit([[5.0, 0.0, 0.0]], [1.0]), SIM_GRID, "soft")
    assert img.pe[4, 4, 4] == pytest.approx(0.5)
    assert img.pe[5, 4, 4] == pytest.approx(0.5)


def test_hard_low_energy_proton_single_voxel():
    p = ParticleKinematics("proton", 5.0, 37.0, 121.0, (10.0, 0.0, -10.0))
    img = voxelize(simulate_track(p), SIM_GRID, "hard")
    assert np.count_nonzero(img.pe) == 1
    assert img.pe[5, 4, 3] > 0


def test_unknown_mode():
    with pytest.raises(ValueError):
        voxelize(deposit([[0, 0, 0]], [1.0]), SIM_GRID, "fuzzy")


def test_out_of_grid_light_dropped():
    img = voxelize(deposit([[100.0, 0.0, 0.0]], [1.0]), SIM_GRID, "soft")
    assert img.total == 0.0


def test_crosstalk_interior_example():
    pe = np.zeros((9, 9, 9))
    pe[4, 4, 4] = 100.0
    out = apply_crosstalk(VoxelImage(SIM_GRID, pe), 0.03).pe
    assert out[4, 4, 4] == pytest.approx(82.0)
    for d in [(1, 0, 0), (0, 1, 0), (0, 0, 1)]:
        for s in (1, -1):
            i = tuple(4 + s * x for x in d)
            assert out[i] == pytest.approx(3.0)
    assert out.sum() == pytest.approx(100.0, rel=1e-12)


def test_crosstalk_corner_example():
    pe = np.zeros((9, 9, 9))
    pe[0, 0, 0] = 100.0
    out = apply_crosstalk(VoxelImage(SIM_GRID, pe), 0.03).pe
    assert out[0, 0, 0] == pytest.approx(82.0)
    assert out[1, 0, 0] == out[0, 1, 0] == out[0, 0, 1] == pytest.approx(3.0)
    assert out.sum() == pytest.approx(91.0)


def test_crosstalk_zero_and_range():
    z = VoxelImage(SIM_GRID, np.zeros((9, 9, 9)))
    assert apply_crosstalk(z, 0.03).total == 0.0
    with pytest.raises(ValueError):
        apply_crosstalk(z, 1 / 6)


@given(arrays(np.float64, (7, 7, 7), elements=st.floats(0.0, 1e3)), st.floats(0.0, 0.16))
def test_crosstalk_conserves_interior(inner, frac):
    pe = np.zeros((9, 9, 9))
    pe[1:-1, 1:-1, 1:-1] = inner
    out = apply_crosstalk(VoxelImage(SIM_GRID, pe), frac).pe
    assert out.sum() == pytest.approx(pe.sum(), rel=1e-12, abs=1e-9)


@given(st.floats(0.0, 180.0), st.floats(0.0, 360.0), st.floats(0.5, 60.0),
       arrays(np.float64, 3, elements=st.floats(-10.0, 10.0)))
def test_soft_hard_sums_agree(theta, phi, ke, start):
    td = simulate_track(ParticleKinematics("proton", ke, theta, phi, start))
    soft = voxelize(td, GridSpec(11, 10.0), "soft").total
    hard = voxelize(td, GridSpec(11, 10.0), "hard").total
    assert soft == pytest.approx(hard, rel=1e-12)


@given(st.floats(-3.0, 3.0), st.floats(0.0, 90.0), st.floats(0.0, 360.0))
def test_voxelize_crosstalk_linear(a, theta, phi):
    t1 = simulate_track(ParticleKinematics("proton", 30.0, theta, phi))
    t2 = simulate_track(ParticleKinematics("deuterium", 20.0, phi / 2, theta))
    combo = TrackDeposit.concat(t1.scaled(a), t2)
    lhs = apply_crosstalk(voxelize(combo, SIM_GRID), 0.03).pe
    rhs = a * apply_crosstalk(voxelize(t1, SIM_GRID), 0.03).pe + apply_crosstalk(voxelize(t2, SIM_GRID), 0.03).pe
    assert np.allclose(lhs, rhs, atol=1e-12)


def test_calibrate_examples():
    pe = np.zeros((7, 7, 7))
    pe[3, 3, 3] = 0.5
    out = calibrate(VoxelImage(CROP_GRID, pe))
    assert out.pe[3, 3, 3] == pytest.approx(50.0)
    smeared = calibrate(VoxelImage(CROP_GRID, pe), smear=11)
    assert np.count_nonzero(smeared.pe) <= 1
    assert smeared.pe[0, 0, 0] == 0.0


def test_poisson_deterministic():
    pe = np.full((7, 7, 7), 40.0)
    a = poisson_smear(pe, 99)
    assert np.array_equal(a, poisson_smear(pe, 99))
    assert not np.array_equal(a, poisson_smear(pe, 100))
    assert np.all(a == np.round(a))


def test_poisson_mean_monte_carlo():
    draws = [poisson_smear(np.array([100.0]), s)[0] for s in range(10_000)]
    assert abs(np.mean(draws) - 100.0) <= 0.3


def test_shift_and_crop():
    pe = np.arange(9.0**3).reshape(9, 9, 9)
    assert np.array_equal(shift_image(pe, (0, 0, 0)), pe)
    s = shift_image(pe, (1, 0, -1))
    assert s[1, 4, 3] == pe[0, 4, 4]
    assert s[0].sum() == 0.0
    assert crop(pe, 1).shape == (7, 7, 7)
    assert np.array_equal(crop(pe, 1), pe[1:-1, 1:-1, 1:-1])
