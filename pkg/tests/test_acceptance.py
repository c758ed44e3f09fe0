"""Acceptance suite: one PASS/FAIL line per criterion, at the stated tolerances.

Criteria 6, 7 and 9 are full fits (a few minutes on one CPU core); they are
marked ``slow`` but still run by default. Deselect with ``-m "not slow"``.
"""

import time

import numpy as np
import pytest
import torch

from sspfit.cli import run_demo2d
from sspfit.extract import marching_cubes
from sspfit.field import NetworkConfig, PeState, evaluate, init_geometric, input_gradient, pe_mask, positional_encoding
from sspfit.losses import LossWeights, loss_parameter_gradients, total_loss
from sspfit.metrics import chamfer_l1, evaluate_points, f_score, normal_consistency, sample_mesh_surface
from sspfit.partition import VoxelGrid, partition_space
from sspfit.pointcloud import KnnIndex, PointCloud, normalize_to_cube
from sspfit.sampler import LossTracker, SampleBudget, draw_voxels, sample_batch, sampling_probabilities
from sspfit.trainer import Trainer, TrainConfig

import oracles
from test_losses import _fd_param_grad, _flat, _random_batch, _tiny_net


@pytest.fixture
def verdict(capsys):
    def emit(n, ok, detail, t0):
        with capsys.disabled():
            print(f"\nCRITERION {n}: {'PASS' if ok else 'FAIL'} ({detail}; {time.time() - t0:.1f}s)")
        assert ok, detail
    return emit


def test_criterion_01_gradient_exactness(verdict):
    t0 = time.time()
    rng = np.random.default_rng(100)
    worst_in = 0.0
    for trial in range(100):
        net = init_geometric(NetworkConfig.test(3, seed=trial))
        gen = torch.Generator().manual_seed(trial)
        with torch.no_grad():
            for p in net.parameters():
                p.add_(0.3 * torch.randn(p.shape, generator=gen, dtype=p.dtype) / max(1, p.shape[-1]) ** 0.5)
        pe = PeState(iteration=int(rng.integers(0, 3000)))
        q = rng.uniform(-1, 1, 3)
        g = input_gradient(net, q, pe)
        fd = oracles.central_difference_gradient(lambda x: evaluate(net, x, pe), q, 1e-5)
        worst_in = max(worst_in, np.linalg.norm(g - fd) / max(np.linalg.norm(fd), 1e-12))
    worst_param = 0.0
    for seed, w in enumerate([LossWeights(0, 0, 0, 0, 1, 0), LossWeights(0, 0, 1, 0, 0, 0),
                              LossWeights(0, 0, 0, 1, 0, 0), LossWeights.clean(), LossWeights.noisy()]):
        net, batch = _tiny_net(seed), _random_batch(seed=seed + 10)
        mask = PeState(iteration=1500).mask_tensor()
        grads, _ = loss_parameter_gradients(net, batch, mask, w, 0.1)
        fd = _fd_param_grad(net, batch, mask, w, 0.1)
        worst_param = max(worst_param, np.linalg.norm(_flat(grads) - fd) / np.linalg.norm(fd))
    verdict(1, worst_in < 1e-4 and worst_param < 1e-3,
            f"input-grad rel err {worst_in:.2e} < 1e-4, param-grad rel err {worst_param:.2e} < 1e-3", t0)


def test_criterion_02_partition_oracle(verdict):
    t0 = time.time()
    rng = np.random.default_rng(200)
    mismatches = 0
    for _ in range(100):
        n = int(rng.integers(2, 17))
        dim = int(rng.choice([2, 3]))
        occ = rng.random((n,) * dim) < rng.uniform(0.0, 0.15)
        g = partition_space(VoxelGrid(n, dim, occ.copy()))
        mismatches += not np.array_equal(g.known, oracles.known_by_components(occ))
    shell = np.zeros((12, 12, 12), bool)
    shell[3:9, 3:9, 3:9] = True
    shell[4:8, 4:8, 4:8] = False
    g = partition_space(VoxelGrid(12, 3, shell))
    interior_uncertain = not g.known[4:8, 4:8, 4:8].any()
    verdict(2, mismatches == 0 and interior_uncertain,
            f"{100 - mismatches}/100 random grids match oracle, hollow interior uncertain={interior_uncertain}", t0)


def test_criterion_03_loss_unit_suite(verdict):
    t0 = time.time()
    import test_losses as tl
    checks = [tl.test_on_surface_distance, tl.test_unoriented_derivative_examples,
              tl.test_free_unsigned_distance_examples, tl.test_eikonal_examples,
              tl.test_signed_outside_examples, tl.test_total_loss_examples]
    ones = dict.fromkeys(["dist_on", "dist_free", "grad_on", "grad_free", "eik", "signed"], 1.0)
    failed = []
    for fn in checks:
        try:
            fn()
        except AssertionError:
            failed.append(fn.__name__)
    clean, noisy = total_loss(ones, LossWeights.clean()), total_loss(ones, LossWeights.noisy())
    verdict(3, not failed and clean == 73.0 and noisy == 71.0,
            f"{len(checks) - len(failed)}/{len(checks)} example groups exact, totals {clean:g}/{noisy:g}", t0)


def test_criterion_04_sampler_statistics(verdict):
    t0 = time.time()
    occ = np.zeros((4, 4, 4), bool)
    g = VoxelGrid(4, 3, occ, known=np.ones_like(occ))
    t = LossTracker(g, init=0.0)
    v = t.voxels["signed"][0]
    for _ in range(50):
        t.update("signed", v, 1.0)
    conv_err = abs(t.get("signed", v) - (1 - 0.9 ** 50))
    draws = draw_voxels(sampling_probabilities([1.0, 3.0]), 100_000, np.random.default_rng(400))
    freq = np.bincount(draws, minlength=2) / len(draws)
    freq_err = np.abs(freq - [0.25, 0.75]).max()

    p = np.random.default_rng(401).normal(size=(3000, 3))
    p /= np.linalg.norm(p, axis=1, keepdims=True)
    pc = PointCloud(0.5 * p, p)
    from sspfit.partition import build_voxel_grid
    grid = partition_space(build_voxel_grid(pc, 16))
    tracker, index = LossTracker(grid), KnnIndex(pc)
    budget = SampleBudget.scaled(1 / 8)
    rng = np.random.default_rng(402)
    exact = 0
    for _ in range(100):
        b = sample_batch(grid, tracker, index, budget, rng)
        exact += b.counts() == (budget.on_surface, budget.free_uncertain, budget.outside)
        tracker.update_batch("signed", b.out_voxel, rng.random(len(b.out_voxel)))
    verdict(4, conv_err < 1e-9 and freq_err < 0.01 and exact == 100,
            f"1-0.9^50 err {conv_err:.1e}, freq {freq.round(4).tolist()}, budget exact {exact}/100", t0)


def test_criterion_05_pe_schedule(verdict):
    t0 = time.time()
    expected = {0: [1, 1, 1, 1, 0, 0], 999: [1, 1, 1, 1, 0, 0], 1000: [1, 1, 1, 1, 1, 0],
                2000: [1] * 6, 3000: [1] * 6}
    ok_masks = all(pe_mask(n, 3, 6, 1000).tolist() == m for n, m in expected.items())
    enc = positional_encoding(np.random.default_rng(500).normal(size=(100, 3)), pe_mask(0)).reshape(100, 6, 2, 3)
    zero = bool(np.all(enc[:, 4:] == 0.0))
    verdict(5, ok_masks and zero, f"masks match at n=0/999/1000/2000/3000: {ok_masks}, masked bands zero: {zero}", t0)


@pytest.mark.slow
def test_criterion_06_end_to_end_2d(verdict):
    t0 = time.time()
    rep, _, _ = run_demo2d("circle", "semi-signed", None, n_points=500, iterations=2000, seed=0, profile="test")
    err = rep["max_radial_error"]
    g = rep["known_guarantee"]
    verdict(6, err < 0.02 and g["fraction_above_minus_eps"] == 1.0,
            f"max radial error {err:.4f} < 0.02, f > -eps at {100 * g['fraction_above_minus_eps']:.0f}% "
            f"of {g['known_voxels']} Known centers", t0)


@pytest.mark.slow
def test_criterion_07_end_to_end_3d(verdict):
    t0 = time.time()
    rng = np.random.default_rng(700)
    d = rng.normal(size=(10_000, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    pc, tf = normalize_to_cube(PointCloud(0.5 * d, d))
    result = Trainer(pc, TrainConfig.profile("test", 3, seed=0, iterations=3000)).run()
    mesh = marching_cubes(result.field, 128, result.pe)
    # analytic sphere in the normalized frame
    center, radius = tf.apply(np.zeros((1, 3)))[0], 0.5 * tf.scale
    n = 200_000
    gt_dir = rng.normal(size=(n, 3))
    gt_dir /= np.linalg.norm(gt_dir, axis=1, keepdims=True)
    pred, pred_n = sample_mesh_surface(mesh.vertices, mesh.faces, n, rng)
    rep = evaluate_points(pred, pred_n, center + radius * gt_dir, gt_dir, tau=0.01)
    verdict(7, rep.cd_l1 < 0.01 and rep.nc > 0.99 and rep.f_score > 0.99,
            f"CD-L1 {rep.cd_l1:.5f} < 0.01, NC {rep.nc:.5f} > 0.99, F(1%) {rep.f_score:.5f} > 0.99", t0)


def test_criterion_08_nearest_point_gradient(verdict):
    t0 = time.time()
    r = 0.6
    q = np.random.default_rng(800).uniform(-1, 1, (1000, 3))
    x = torch.as_tensor(q).requires_grad_(True)
    (g,) = torch.autograd.grad((torch.linalg.norm(x, dim=1) - r).sum(), x)
    g = g.numpy()
    p_near = r * q / np.linalg.norm(q, axis=1, keepdims=True)
    u = (q - p_near) / np.linalg.norm(q - p_near, axis=1, keepdims=True)
    gd = g / np.linalg.norm(g, axis=1, keepdims=True)
    err = np.minimum(np.linalg.norm(gd - u, axis=1), np.linalg.norm(gd + u, axis=1)).max()
    verdict(8, err < 1e-6, f"max direction error {err:.1e} < 1e-6 over 1000 points", t0)


@pytest.mark.slow
def test_criterion_09_ablation_switches(verdict):
    t0 = time.time()
    rep, result, _ = run_demo2d("circle", "semi-signed", None, n_points=500, iterations=2000,
                                seed=0, profile="test", disable=("signed",))
    status = rep["known_guarantee"]["status"]
    # every switch reaches the trainer
    p = np.random.default_rng(900).normal(size=(300, 2))
    p /= np.linalg.norm(p, axis=1, keepdims=True)
    tr = Trainer(PointCloud(0.8 * p, p), TrainConfig.profile("test", 2, iterations=1,
                                                            disable=("signed", "lrs", "pe", "deriv-free")))
    wired = (not tr.grid.known.any() and tr.weights.signed == 0 and tr.adaptive_fraction == 0
             and not tr.pe.mask.any() and tr.weights.grad_free == 0)
    verdict(9, status == "unchecked" and wired and np.all(np.isfinite(result.field.flat_parameters())),
            f"run completed, guarantee status '{status}', SS/DS/LRS/PE switches wired: {wired}", t0)


def test_criterion_10_metric_oracles(verdict):
    t0 = time.time()
    rng = np.random.default_rng(1000)
    a, b = rng.uniform(-1, 1, (200, 3)), rng.uniform(-1, 1, (200, 3))
    na = rng.normal(size=(200, 3))
    nb = rng.normal(size=(200, 3))
    na /= np.linalg.norm(na, axis=1, keepdims=True)
    nb /= np.linalg.norm(nb, axis=1, keepdims=True)
    oracle_err = max(
        abs(chamfer_l1(a, b) - oracles.chamfer_l1(a, b)),
        abs(normal_consistency(a, na, b, nb) - oracles.normal_consistency(a, na, b, nb)),
        abs(f_score(a, b, 0.1) - oracles.f_score(a, b, 0.1)),
    )
    from scipy.spatial.transform import Rotation
    R = Rotation.random(random_state=1001).as_matrix()
    t = rng.normal(size=3)
    r0 = evaluate_points(a, na, b, nb, 0.1)
    r1 = evaluate_points(a @ R.T + t, na @ R.T, b @ R.T + t, nb @ R.T, 0.1)
    rigid_err = max(abs(r0.cd_l1 - r1.cd_l1), abs(r0.nc - r1.nc), abs(r0.f_score - r1.f_score))
    verdict(10, oracle_err < 1e-12 and rigid_err < 1e-9,
            f"oracle diff {oracle_err:.1e} < 1e-12, rigid-motion diff {rigid_err:.1e} < 1e-9", t0)
