"""Acceptance suite: one test per release criterion, each at its stated
tolerance.  The terminal summary prints a PASS/FAIL line per criterion."""

import time

import numpy as np
import pytest

from lanekit.attention import (
    masked_attention,
    memory_mask,
    neighbor_line_mask,
    same_line_mask,
    sparsity_ratio,
)
from lanekit.autolabel import (
    CameraModel,
    LineTracker,
    build_surface,
    emit_frame_labels,
    lift_detections,
)
from lanekit.cli import main
from lanekit.losses import (
    EmaTracker,
    GtLane,
    focal_classification_loss,
    regression_loss,
    regression_loss_grad,
    spatial_regularization,
    temporal_consistency_loss,
    visibility_loss,
)
from lanekit.metrics import MatchConfig, match_lanes, vis_iou
from lanekit.splines import (
    CurveConfig,
    arg_for_y,
    basis_matrix,
    build_basis,
    control_points_from_columns,
    evaluate_curve,
    evaluate_segment,
)
from lanekit.synth import SceneSpec, gen_scene, render_2d
from lanekit.temporal import EgoPose, propagate_points


def random_rotation(rng):
    q, _ = np.linalg.qr(rng.normal(size=(3, 3)))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


def segment_reference(control, s):
    """Per-segment oracle with reflected boundary support values."""
    control = np.asarray(control, dtype=float)
    m = control.shape[0]
    out = np.empty(control.shape[1])
    for col in range(control.shape[1]):
        p = control[:, col]
        padded = np.concatenate([[2 * p[0] - p[1]], p, [2 * p[-1] - p[-2]]])
        t = s * (m - 1)
        k = min(int(np.floor(t)), m - 2)
        out[col] = evaluate_segment(t - k, padded[k:k + 4])
    return out


def test_criterion_01_spline_correctness():
    start = time.monotonic()
    cfg = CurveConfig(m=20, y_start=0.0, y_end=100.0, samples=100)
    rng = np.random.default_rng(101)

    # interpolation at every knot, exactly
    knot_basis = build_basis(cfg, cfg.knots)
    assert np.array_equal(knot_basis.matrix, np.eye(cfg.m))

    # partition of unity
    dense = build_basis(cfg, np.linspace(0.0, 1.0, 1001))
    assert np.abs(dense.matrix.sum(axis=1) - 1.0).max() <= 1e-12

    # local support: a bumped control point moves only samples whose basis
    # column is active, all within 4 segments
    control = control_points_from_columns(
        cfg, x=rng.uniform(-5, 5, cfg.m), z=rng.uniform(-1, 1, cfg.m), v=np.ones(cfg.m))
    base = evaluate_curve(control, dense)
    for j in (0, 7, 19):
        bumped = control.copy()
        bumped[j, 0] += 1.0
        moved = np.abs(evaluate_curve(bumped, dense)[:, 0] - base[:, 0]) > 0
        assert np.array_equal(moved, np.abs(dense.matrix[:, j]) > 0)
        touched = dense.sample_args[moved]
        assert touched.min() >= cfg.knots[max(j - 2, 0)] - 1e-12
        assert touched.max() <= cfg.knots[min(j + 2, cfg.m - 1)] + 1e-12

    # matrix form vs per-segment oracle, 1000 random draws
    worst = 0.0
    for _ in range(1000):
        control = control_points_from_columns(
            cfg, x=rng.uniform(-20, 20, cfg.m), z=rng.uniform(-5, 5, cfg.m),
            v=rng.uniform(0, 1, cfg.m))
        s = float(rng.uniform(0.0, 1.0))
        sampled = evaluate_curve(control, basis_matrix(cfg.m, [s]))[0]
        worst = max(worst, np.abs(sampled - segment_reference(control, s)).max())
    assert worst < 1e-10

    assert time.monotonic() - start < 5.0


def test_criterion_02_midpoint_basis_weights():
    basis = basis_matrix(6, [(2 + 0.5) / 5])
    nonzero = basis.matrix[0][basis.matrix[0] != 0.0]
    np.testing.assert_array_equal(nonzero, [-0.0625, 0.5625, 0.5625, -0.0625])


def test_criterion_03_regression_gradient_check():
    cfg = CurveConfig(m=6, y_start=0.0, y_end=100.0, samples=50)
    rng = np.random.default_rng(103)
    step = 1e-5
    worst = 0.0
    for _ in range(100):
        control = control_points_from_columns(
            cfg, x=rng.uniform(-5, 5, cfg.m), z=rng.uniform(-1, 1, cfg.m),
            v=rng.uniform(0, 1, cfg.m))
        y = np.sort(rng.uniform(0.0, 100.0, 9))
        gt_points = np.column_stack([
            rng.uniform(-5, 5, 9), y, rng.uniform(-1, 1, 9),
            (rng.uniform(0, 1, 9) > 0.3).astype(float)])
        gt = GtLane(points=gt_points, category=0)
        matching = [(0, 0)]
        analytic = regression_loss_grad(control[None], [gt], matching, cfg)
        for col, out_col in ((0, 0), (2, 1)):
            for j in range(cfg.m):
                plus, minus = control.copy(), control.copy()
                plus[j, col] += step
                minus[j, col] -= step
                fd = (regression_loss(plus[None], [gt], matching, cfg)
                      - regression_loss(minus[None], [gt], matching, cfg)) / (2 * step)
                worst = max(worst, abs(analytic[0, j, out_col] - fd) / max(abs(fd), 1.0))
    assert worst < 1e-5


def test_criterion_04_loss_sanity_suite():
    cfg = CurveConfig(m=6, y_start=0.0, y_end=100.0, samples=50)
    control = control_points_from_columns(
        cfg, x=np.zeros(cfg.m), z=np.zeros(cfg.m), v=np.ones(cfg.m))
    y = np.linspace(0.0, 100.0, 11)
    sampled = basis_matrix(cfg.m, arg_for_y(y, cfg)).matrix @ control
    gt_points = sampled.copy()
    gt_points[:, 1] = y
    gt = GtLane(points=gt_points, category=1)
    matching = [(0, 0)]

    # zero losses on prediction == target
    assert regression_loss(control[None], [gt], matching, cfg) == 0.0
    assert visibility_loss(control[None], [gt], matching, cfg) <= 11 * -np.log(1 - 1e-7) + 1e-12
    assert focal_classification_loss(np.array([[0.0, 1.0, 0.0]]), [1], gamma=2.0) \
        == pytest.approx(0.0, abs=1e-12)
    parallel, smooth, curv = spatial_regularization(
        np.stack([control, control_points_from_columns(
            cfg, x=np.full(cfg.m, 3.5), z=np.zeros(cfg.m), v=np.ones(cfg.m))]), cfg)
    assert parallel == pytest.approx(0.0, abs=1e-12)
    assert smooth == pytest.approx(0.0, abs=1e-12)
    assert curv == pytest.approx(0.0, abs=1e-12)

    # hand-computed values
    assert focal_classification_loss(np.array([[0.5, 0.5]]), [0], gamma=2.0) \
        == pytest.approx(0.25 * np.log(2), abs=1e-9)
    vis_control = control_points_from_columns(
        cfg, x=np.zeros(cfg.m), z=np.zeros(cfg.m), v=np.full(cfg.m, 0.9))
    single = GtLane(points=np.array([[0.0, 50.0, 0.0, 1.0]]), category=0)
    assert visibility_loss(vis_control[None], [single], [(0, 0)], cfg) \
        == pytest.approx(-np.log(0.9), abs=1e-9)


def test_criterion_05_propagation_properties():
    rng = np.random.default_rng(105)
    worst_comp, worst_dist, worst_round = 0.0, 0.0, 0.0
    for _ in range(1000):
        poses = [EgoPose.from_parts(random_rotation(rng), rng.uniform(-50, 50, 3))
                 for _ in range(3)]
        pts = rng.uniform(-20, 20, (6, 4))

        same = propagate_points(pts, poses[0], poses[0])
        assert np.abs(same - pts).max() < 1e-10

        chained = propagate_points(propagate_points(pts, poses[0], poses[1]), poses[1], poses[2])
        direct = propagate_points(pts, poses[0], poses[2])
        worst_comp = max(worst_comp, np.abs(chained - direct).max())

        moved = propagate_points(pts, poses[0], poses[1])
        d0 = np.linalg.norm(pts[:, None, :3] - pts[None, :, :3], axis=2)
        d1 = np.linalg.norm(moved[:, None, :3] - moved[None, :, :3], axis=2)
        worst_dist = max(worst_dist, np.abs(d0 - d1).max())

        back = propagate_points(moved, poses[1], poses[0])
        worst_round = max(worst_round, np.abs(back - pts).max())

        assert np.array_equal(moved[:, 3], pts[:, 3])
    assert worst_comp < 1e-10
    assert worst_dist < 1e-9
    assert worst_round < 1e-10


def _reference_lane_grid(n, m):
    y = np.linspace(3.0, 103.0, m)
    pts = np.zeros((n, m, 4))
    for i in range(n):
        pts[i, :, 0] = 3.5 * (i - (n - 1) / 2.0)
        pts[i, :, 1] = y
        pts[i, :, 3] = 1.0
    return pts


def test_criterion_06_mask_structure_and_sparsity():
    n, m = 40, 20
    pts = _reference_lane_grid(n, m)
    same = same_line_mask(n, m)
    neighbor = neighbor_line_mask(pts)
    assert (same.sum(axis=1) == m).all()
    assert (neighbor.sum(axis=1) == 2 * (n - 1)).all()
    assert not (same & neighbor).any()
    assert sparsity_ratio(same, neighbor) == pytest.approx(0.1225, abs=1e-15)

    rng = np.random.default_rng(106)
    memory_points = rng.uniform(-70, 170, (3 * 10 * m, 4))
    mem = memory_mask(pts.reshape(-1, 4), memory_points, k_nearest=10)
    assert (mem.sum(axis=1) == 10).all()
    few = memory_mask(pts.reshape(-1, 4), memory_points[:4], k_nearest=10)
    assert (few.sum(axis=1) == 4).all()
    assert sparsity_ratio(same, neighbor, mem) <= 0.15


def test_criterion_07_masked_attention_reference():
    rng = np.random.default_rng(107)
    worst = 0.0
    for _ in range(5):
        q = rng.normal(size=(64, 16))
        k = rng.normal(size=(64, 16))
        v = rng.normal(size=(64, 16))
        mask = rng.uniform(size=(64, 64)) > 0.5
        got = masked_attention(q, k, v, mask)

        scale = np.sqrt(16)
        scores = q @ k.T / scale
        scores[~mask] = -np.inf
        ref = np.zeros_like(got)
        for r in range(64):
            row = scores[r]
            if not np.isfinite(row).any():
                continue
            e = np.exp(row - row[np.isfinite(row)].max())
            e[~np.isfinite(row)] = 0.0
            ref[r] = (e / e.sum()) @ v
        worst = max(worst, np.abs(got - ref).max())

        for r in range(64):
            if not mask[r].any():
                assert np.array_equal(got[r], np.zeros(16))
                continue
            sub = v[mask[r]]
            assert (got[r] >= sub.min(axis=0) - 1e-12).all()
            assert (got[r] <= sub.max(axis=0) + 1e-12).all()
    assert worst < 1e-9


def _metric_lane(x_offset, y_lo=0.0, y_hi=100.0, n=101):
    y = np.linspace(y_lo, y_hi, n)
    return np.column_stack([np.full_like(y, x_offset), y, np.zeros_like(y), np.ones_like(y)])


def test_criterion_08_metric_properties():
    from lanekit.metrics import EvalAccumulator

    lanes = [_metric_lane(-3.5), _metric_lane(0.0), _metric_lane(3.5)]
    acc = EvalAccumulator()
    acc.add_frame(lanes, lanes)
    report = acc.report()
    assert report["f1"] == 1.0
    assert report["vis_iou"] == 1.0
    assert report["chamfer"]["f1"] == 1.0
    assert report["chamfer"]["mean_cd"] == 0.0
    for entry in report["errors"].values():
        if entry is not None:
            assert entry["x_error"] == 0.0 and entry["z_error"] == 0.0

    rng = np.random.default_rng(108)
    preds = [_metric_lane(x + rng.uniform(-1.2, 1.2)) for x in (-3.5, 0.0, 3.5)]
    gts = [_metric_lane(x) for x in (-3.5, 0.0, 3.5)]
    tp_by_threshold = [match_lanes(preds, gts, MatchConfig(point_threshold=t)).tp
                       for t in (0.5, 1.0, 1.5, 2.0)]
    assert all(a <= b for a, b in zip(tp_by_threshold, tp_by_threshold[1:]))

    cfg = MatchConfig(y_min=0.0, y_max=100.0, y_step=10.0)
    match = match_lanes([_metric_lane(0.0, 0.0, 60.0)], [_metric_lane(0.0, 40.0, 100.0)], cfg)
    assert vis_iou(match) == pytest.approx(3 / 11, abs=1e-15)


def test_criterion_09_autolabel_end_to_end():
    start = time.monotonic()
    spec = SceneSpec(num_lanes=4, lane_spacing=3.5, curvature=(0.0, 0.0, 5e-4),
                     elevation=(0.0, 0.05), frames=200, speed=10.0, frame_interval=0.1,
                     seed=109, lane_length=470.0)
    world = gen_scene(spec)
    cam = CameraModel.level_camera()
    surf = build_surface(world.trajectory)

    def run(noise_sigma):
        tracker = LineTracker(surf, lead=280.0)
        per_frame_ids = []
        for f in range(spec.frames):
            pose = world.trajectory.poses[f]
            detections = render_2d(world, f, cam, pixel_noise_sigma=noise_sigma, max_depth=40.0)
            lines = lift_detections(detections, cam, pose, surf, near_range=25.0)
            per_frame_ids.append(tracker.step(lines))
        return tracker, per_frame_ids

    def label_errors(tracker):
        errors = []
        for f in range(0, spec.frames, 10):
            pose = world.trajectory.poses[f]
            labels = emit_frame_labels(tracker, pose, max_range=250.0)
            gt_by_id = {i: pts for i, _, pts in world.lanes_in_frame(f, 0.0, 250.0)}
            assert labels
            for _, _, pts in labels:
                best, best_err = None, np.inf
                for lane_id, g in gt_by_id.items():
                    gx = np.interp(pts[:, 1], g[:, 1], g[:, 0])
                    err = float(np.mean(np.abs(pts[:, 0] - gx)))
                    if err < best_err:
                        best, best_err = lane_id, err
                g = gt_by_id[best]
                inside = (pts[:, 1] >= g[:, 1].min()) & (pts[:, 1] <= g[:, 1].max())
                p = pts[inside]
                gx = np.interp(p[:, 1], g[:, 1], g[:, 0])
                gz = np.interp(p[:, 1], g[:, 1], g[:, 2])
                errors.extend(np.sqrt((p[:, 0] - gx) ** 2 + (p[:, 2] - gz) ** 2).tolist())
        return float(np.mean(errors))

    tracker, per_frame_ids = run(0.0)
    assert len(tracker.tracks) == spec.num_lanes
    assert all(ids == per_frame_ids[0] for ids in per_frame_ids)  # 100 % id stability
    assert label_errors(tracker) < 0.05

    noisy_tracker, noisy_ids = run(1.0)
    assert all(ids == noisy_ids[0] for ids in noisy_ids)
    assert label_errors(noisy_tracker) < 0.15

    assert time.monotonic() - start < 60.0


def test_criterion_10_temporal_consistency_demo():
    grid = np.linspace(0.0, 100.0, 51)
    frames, occl_start, occl_len = 100, 40, 30
    rng = np.random.default_rng(110)
    offsets = np.array([-3.5, 0.0, 3.5])

    def run(perturb):
        tracker = EmaTracker(grid, alpha=0.5)
        total = 0.0
        for f in range(frames):
            pose = EgoPose.from_parts(np.eye(3), [0.0, 1.0 * f, 0.0])
            x = np.tile(offsets[:, None], (1, grid.size))
            if perturb and occl_start <= f < occl_start + occl_len:
                x = x + rng.normal(0.0, 0.3, size=x.shape)
            z = np.zeros_like(x)
            v = np.ones_like(x)
            total += tracker.step(x, z, v, pose)
        return total

    clean = run(False)
    perturbed = run(True)
    assert clean == pytest.approx(0.0, abs=1e-9)  # frame-consistent stream
    assert perturbed > clean  # occlusion-window drift strictly increases the loss


def test_criterion_11_cli_determinism(tmp_path):
    def synth(prefix):
        assert main(["synth", str(tmp_path / prefix), "--frames", "40", "--num-lanes", "2",
                     "--seed", "5", "--lane-length", "150", "--pixel-noise", "0.5"]) == 0
        return [tmp_path / (prefix + s) for s in
                (".gt.jsonl", ".detections.jsonl", ".trajectory.json", ".camera.json")]

    files_a, files_b = synth("a"), synth("b")
    for fa, fb in zip(files_a, files_b):
        assert fa.read_bytes() == fb.read_bytes()

    for run_id in ("x", "y"):
        assert main(["autolabel",
                     "--trajectory", str(tmp_path / "a.trajectory.json"),
                     "--camera", str(tmp_path / "a.camera.json"),
                     "--detections", str(tmp_path / "a.detections.jsonl"),
                     "--out", str(tmp_path / f"labels_{run_id}.jsonl"),
                     "--label-range", "120"]) == 0
    assert (tmp_path / "labels_x.jsonl").read_bytes() == (tmp_path / "labels_y.jsonl").read_bytes()

    for run_id in ("x", "y"):
        assert main(["eval", "--pred", str(tmp_path / "a.gt.jsonl"),
                     "--gt", str(tmp_path / "a.gt.jsonl"),
                     "--out", str(tmp_path / f"report_{run_id}.json")]) == 0
    assert (tmp_path / "report_x.json").read_bytes() == (tmp_path / "report_y.json").read_bytes()

    for run_id in ("x", "y"):
        assert main(["spline", "--input", str(tmp_path / "a.gt.jsonl"),
                     "--out", str(tmp_path / f"fitted_{run_id}.jsonl"),
                     "--control-points", "10", "--y-start", "0", "--y-end", "100"]) == 0
    assert (tmp_path / "fitted_x.jsonl").read_bytes() == (tmp_path / "fitted_y.jsonl").read_bytes()

    for run_id in ("x", "y"):
        assert main(["masks", "--lanes", "10", "--points", "8", "--history", "2",
                     "--keep", "4", "--seed", "3",
                     "--out", str(tmp_path / f"masks_{run_id}.json")]) == 0
    assert (tmp_path / "masks_x.json").read_bytes() == (tmp_path / "masks_y.json").read_bytes()

    for run_id in ("x", "y"):
        assert main(["temporal-demo", "--frames", "20", "--perturb", "0.2", "--seed", "4",
                     "--out", str(tmp_path / f"demo_{run_id}.json")]) == 0
    assert (tmp_path / "demo_x.json").read_bytes() == (tmp_path / "demo_y.json").read_bytes()
