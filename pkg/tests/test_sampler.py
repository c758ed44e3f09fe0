import numpy as np
import pytest
from scipy import stats

from sspfit.errors import InapplicableVoxel
from sspfit.partition import VoxelGrid, build_voxel_grid, partition_space, read_raw_grid
from sspfit.pointcloud import KnnIndex, PointCloud
from sspfit.sampler import (
    LossTracker,
    SampleBudget,
    draw_voxels,
    sample_batch,
    sample_free_space,
    sample_on_surface,
    sample_outside,
    sampling_probabilities,
)


def sphere_cloud(n=2000, r=0.5, seed=0):
    p = np.random.default_rng(seed).normal(size=(n, 3))
    p /= np.linalg.norm(p, axis=1, keepdims=True)
    return PointCloud(r * p, p.copy())


@pytest.fixture(scope="module")
def setup():
    pc = sphere_cloud()
    grid = partition_space(build_voxel_grid(pc, 12))
    return pc, grid, KnnIndex(pc)


def test_update_example(setup):
    _, grid, _ = setup
    t = LossTracker(grid)
    v = t.voxels["dist_on"][0]
    t.values["dist_on"][0] = 0.5
    t.update("dist_on", v, 1.0)
    assert t.get("dist_on", v) == pytest.approx(0.55, abs=1e-15)


def test_update_fixed_point(setup):
    t = LossTracker(setup[1])
    v = t.voxels["signed"][3]
    t.update("signed", v, 1.0)
    assert t.get("signed", v) == 1.0


def test_geometric_convergence(setup):
    t = LossTracker(setup[1], init=0.0)
    v = t.voxels["dist_free"][0]
    for _ in range(50):
        t.update("dist_free", v, 1.0)
    assert abs(t.get("dist_free", v) - (1 - 0.9 ** 50)) < 1e-9


def test_unvisited_voxels_keep_init(setup):
    t = LossTracker(setup[1])
    ids = t.voxels["dist_on"]
    t.update_batch("dist_on", [ids[0], ids[0], ids[1]], [0.0, 2.0, 3.0])
    assert t.get("dist_on", ids[0]) == pytest.approx(0.9 + 0.1 * 1.0)
    assert t.get("dist_on", ids[1]) == pytest.approx(0.9 + 0.3)
    assert np.all(t.values["dist_on"][2:] == 1.0)


def test_inapplicable_voxel(setup):
    t = LossTracker(setup[1])
    with pytest.raises(InapplicableVoxel):
        t.update("signed", t.voxels["dist_on"][0], 1.0)
    with pytest.raises(InapplicableVoxel):
        t.update("dist_on", t.voxels["signed"][0], 1.0)


def test_tracker_stays_finite_nonnegative(setup):
    t = LossTracker(setup[1])
    rng = np.random.default_rng(0)
    ids = t.voxels["dist_free"]
    for _ in range(200):
        pick = rng.choice(ids, 30)
        t.update_batch("dist_free", pick, rng.exponential(5.0, 30) * rng.integers(0, 2, 30))
    v = t.values["dist_free"]
    assert np.all(np.isfinite(v)) and np.all(v >= 0)


@pytest.mark.parametrize("tracked,expected", [
    ([1, 3], [0.25, 0.75]),
    ([2, 2, 2, 2], [0.25] * 4),
    ([0, 0, 0], [1 / 3] * 3),
])
def test_probability_examples(tracked, expected):
    p = sampling_probabilities(tracked)
    np.testing.assert_allclose(p, expected, rtol=0, atol=1e-15)
    assert abs(p.sum() - 1) < 1e-12


def test_frequencies_and_chi_squared():
    rng = np.random.default_rng(42)
    p = sampling_probabilities([1.0, 3.0])
    draws = draw_voxels(p, 100_000, rng)
    freq = np.bincount(draws, minlength=2) / len(draws)
    np.testing.assert_allclose(freq, [0.25, 0.75], atol=0.01)
    counts = np.bincount(draws, minlength=2)
    assert stats.chisquare(counts, p * len(draws)).pvalue > 0.01


def test_chi_squared_many_bins():
    rng = np.random.default_rng(7)
    tracked = rng.uniform(0.1, 5, 40)
    p = sampling_probabilities(tracked)
    counts = np.bincount(draw_voxels(p, 200_000, rng), minlength=40)
    assert stats.chisquare(counts, p * counts.sum()).pvalue > 0.01


def test_outside_frequencies_follow_tracker():
    """With no uniform share, outside voxels are drawn in proportion to tracked loss."""
    occ = np.zeros((2, 2), bool)
    g = VoxelGrid(2, 2, occ, known=np.ones((2, 2), bool))
    t = LossTracker(g)
    t.values["signed"][:] = [1.0, 3.0, 0.0, 0.0]
    _, vox = sample_outside(g, t, 100_000, np.random.default_rng(1), adaptive_fraction=1.0)
    freq = np.bincount(vox, minlength=4) / len(vox)
    np.testing.assert_allclose(freq, [0.25, 0.75, 0, 0], atol=0.01)


def test_budget_composition_100_iterations(setup):
    pc, grid, index = setup
    t = LossTracker(grid)
    budget = SampleBudget(301, 127, 409)
    rng = np.random.default_rng(3)
    for _ in range(100):
        b = sample_batch(grid, t, index, budget, rng)
        assert b.counts() == (301, 127, 409)
        t.update_batch("dist_on", b.on_voxel, rng.random(301))
        t.update_batch("signed", b.out_voxel, rng.random(409))


def test_default_budget_values():
    b = SampleBudget()
    assert (b.on_surface, b.free_uncertain, b.outside) == (12743, 5461, 16384)
    assert SampleBudget.scaled(1 / 8).outside == 2048


def test_deterministic(setup):
    pc, grid, index = setup
    budget = SampleBudget(50, 40, 30)
    a = sample_batch(grid, LossTracker(grid), index, budget, np.random.default_rng(9))
    b = sample_batch(grid, LossTracker(grid), index, budget, np.random.default_rng(9))
    for k in ("on_points", "free_points", "free_dist", "out_points", "on_voxel"):
        assert np.array_equal(getattr(a, k), getattr(b, k))


def test_points_inside_owning_voxels(setup):
    pc, grid, index = setup
    b = sample_batch(grid, LossTracker(grid), index, SampleBudget(200, 500, 500), np.random.default_rng(4))
    for pts, vox in ((b.free_points, b.free_voxel), (b.out_points, b.out_voxel)):
        lo = grid.lo + grid.edge * grid.unflat(vox)
        assert np.all(pts >= lo) and np.all(pts <= lo + grid.edge)
    assert np.all(grid.known.ravel()[b.out_voxel])
    assert np.all(grid.uncertain.ravel()[b.free_voxel])
    # on-surface samples are cloud points
    d, _ = index.nearest(b.on_points)
    assert np.all(d == 0)


def test_free_targets_match_brute_force(setup):
    pc, grid, index = setup
    pts, dist, normals, _ = sample_free_space(grid, LossTracker(grid), index, 100, np.random.default_rng(5))
    full = np.linalg.norm(pts[:, None] - pc.points[None], axis=2)
    np.testing.assert_allclose(dist, full.min(1), rtol=0, atol=1e-15)
    np.testing.assert_array_equal(normals, pc.normals[full.argmin(1)])


def test_single_voxel_concentration():
    pts = np.array([[0.05, 0.05, 0.05], [0.06, 0.07, 0.05], [0.08, 0.02, 0.09]])
    pc = PointCloud(pts)
    grid = partition_space(build_voxel_grid(pc, 10))
    t = LossTracker(grid)
    assert len(t.voxels["dist_on"]) == 1
    on, _, owner, _ = sample_on_surface(grid, t, KnnIndex(pc), 20, np.random.default_rng(0), k=2)
    assert len(on) == 20 and np.all(owner == t.voxels["dist_on"][0])

    occ = np.zeros((4, 4, 4), bool)
    g = VoxelGrid(4, 3, occ, known=np.ones_like(occ))
    g.known[1, 2, 3] = False
    t = LossTracker(g)
    _, _, _, vox = sample_free_space(g, t, KnnIndex(pc), 50, np.random.default_rng(0))
    assert np.all(vox == g.flat(np.array([[1, 2, 3]]))[0])


def test_zero_jitter_returns_center_nearest(setup):
    pc, grid, index = setup
    t = LossTracker(grid)
    _, _, owner, idx = sample_on_surface(grid, t, index, 200, np.random.default_rng(6), jitter_sigma=0.0, k=1)
    _, expected = index.nearest(grid.centers(grid.unflat(owner)))
    np.testing.assert_array_equal(idx, expected)


def test_empty_known_gives_empty_outside():
    occ = np.zeros((3, 3, 3), bool)
    g = VoxelGrid(3, 3, occ, known=np.zeros_like(occ))
    pts, vox = sample_outside(g, LossTracker(g), 100, np.random.default_rng(0))
    assert pts.shape == (0, 3) and len(vox) == 0


def test_tracker_dump(tmp_path, setup):
    t = LossTracker(setup[1])
    t.dump(tmp_path / "m.raw", "signed")
    back = read_raw_grid(tmp_path / "m.raw")
    np.testing.assert_array_equal(back, t.dense("signed"))
