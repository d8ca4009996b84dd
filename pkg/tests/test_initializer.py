import numpy as np
import pytest

from splatloc.errors import (
    AnchorInvalidError,
    InitializationFailedError,
    InvalidArgumentError,
    SearchFailedError,
    WeakMatchError,
)
from splatloc.geometry import (
    CameraPose,
    Intrinsics,
    Rotation,
    back_project,
    pixel_ray_direction,
    project,
    so3_exp,
)
from splatloc.initializer import (
    AnchorPoint,
    NccMatcherBackend,
    OracleNoiseBackend,
    Query,
    ReferenceView,
    SearchConfig,
    compute_anchor,
    discrete_gradient,
    estimate_relative_pose,
    make_backend,
    ncc_correspondence,
    photometric_search,
    propagate_rotation,
    run_phase2,
    select_candidate,
)
from splatloc.renderer import render, render_depth_at
from splatloc.retrieval import DatabaseEntry, Match, Source
from splatloc.scene import GaussianScene, Layout, SceneRecipe, synthesize_scene

K = Intrinsics.from_fov(64, 64, 60.0)
FAST = SearchConfig(render_scale=0.5)


@pytest.fixture(scope="module")
def room():
    return synthesize_scene(SceneRecipe(primitive_count=3000, seed=0, trajectory_length=30))


def ref_view(scene, pose, image_id=0):
    v = render(scene, pose, K)
    return ReferenceView(v.rgb, v, pose, image_id)


def match(pose, image_id, source=Source.REAL):
    return Match(DatabaseEntry(np.zeros(3), pose, source, image_id), 1.0)


def nearby(pose, deg=4.0, shift=(0.05, 0.0, 0.02)):
    return CameraPose.from_center(so3_exp([0.0, np.radians(deg), 0.0]) @ pose.rotation,
                                  pose.center + np.asarray(shift))


def test_oracle_noiseless_is_exact(room):
    scene, traj = room
    q_pose = traj[5]
    r_pose = nearby(q_pose)
    q = Query(render(scene, q_pose, K).rgb, K, 0, q_pose)
    est = estimate_relative_pose(q, ref_view(scene, r_pose), OracleNoiseBackend(), scene)
    want = q_pose.rotation @ r_pose.rotation.inverse()
    assert np.abs(est.delta_rotation.matrix() - want.matrix()).max() < 1e-12
    r, c = est.correspondence
    # reprojection: the surface point seen at the query center projects to r in the reference
    X = back_project(c, render_depth_at(scene, q_pose, K, c), q_pose, K)
    assert np.linalg.norm(project(X, r_pose, K)[0] - r) < 0.5


def test_oracle_noise_angle_is_seeded(room):
    scene, traj = room
    r_pose = nearby(traj[5])
    q = Query(render(scene, traj[5], K).rgb, K, 3, traj[5])
    ref = ref_view(scene, r_pose, 7)
    b = OracleNoiseBackend(sigma_rot_deg=1.0, seed=2)
    e1 = b.estimate(q, ref, scene)
    e2 = b.estimate(q, ref, scene)
    assert np.array_equal(e1.delta_rotation.quat, e2.delta_rotation.quat)
    true = traj[5].rotation @ r_pose.rotation.inverse()
    err = np.degrees((e1.delta_rotation @ true.inverse()).angle())
    assert 0.0 < err < 5.0


def test_oracle_needs_ground_truth(room):
    scene, traj = room
    with pytest.raises(InvalidArgumentError):
        OracleNoiseBackend().estimate(Query(np.zeros((64, 64, 3)), K), ref_view(scene, traj[0]),
                                      scene)


def test_ncc_self_match(room):
    scene, traj = room
    img = render(scene, traj[3], K).rgb
    r, q, peak = ncc_correspondence(img, img)
    # the integer peak is exact; the parabolic refinement may move it a few hundredths
    assert np.allclose(q, K.center_pixel) and np.abs(r - q).max() < 0.1 and peak > 0.999
    est = NccMatcherBackend().estimate(Query(img, K, 0, traj[3]), ref_view(scene, traj[3]), scene)
    assert est.delta_rotation.angle() < 1e-12


def test_ncc_on_rotated_pair_lands_near_projected_match(room):
    scene, traj = room
    q_pose = traj[8]
    r_pose = CameraPose.from_center(so3_exp([0.0, np.radians(5.0), 0.0]) @ q_pose.rotation,
                                    q_pose.center)
    q_img = render(scene, q_pose, K).rgb
    r_img = render(scene, r_pose, K).rgb
    r, q, _ = ncc_correspondence(q_img, r_img)
    X = back_project(q, render_depth_at(scene, q_pose, K, q), q_pose, K)
    assert np.linalg.norm(project(X, r_pose, K)[0] - r) < 3.0


def test_ncc_rejects_flat_and_weak():
    flat = np.full((64, 64, 3), 0.5)
    with pytest.raises(WeakMatchError):
        ncc_correspondence(flat, flat)
    rng = np.random.default_rng(0)
    with pytest.raises(WeakMatchError):
        ncc_correspondence(rng.random((64, 64, 3)), rng.random((64, 64, 3)), min_peak=0.99)


def test_make_backend():
    assert isinstance(make_backend("ncc_matcher"), NccMatcherBackend)
    with pytest.raises(InvalidArgumentError):
        make_backend("superglue")


def test_propagate_rotation_examples():
    rng = np.random.default_rng(1)
    r_ref, r_gt = so3_exp(rng.normal(size=3)), so3_exp(rng.normal(size=3))
    assert propagate_rotation(Rotation.identity(), r_ref) == r_ref
    out = propagate_rotation(r_gt @ r_ref.inverse(), r_ref)
    assert np.abs(out.matrix() - r_gt.matrix()).max() < 1e-9


def test_anchor_on_known_surface(room):
    scene, traj = room
    pose = traj[4]
    view = render(scene, pose, K)
    # a primitive center visible near the image middle stands in for a surface point
    r = np.array([30.0, 34.0])
    a = compute_anchor(r, view, pose, K)
    assert a.d_P == view.depth_at(r)
    assert np.allclose(project(a.P, pose, K)[0], r, atol=1e-9)
    d = np.linalg.norm(scene.means64 - a.P, axis=1).min()
    assert d < 0.01 * scene.diameter


def test_anchor_invalid_where_empty():
    scene = GaussianScene([[0.0, 0.0, 5.0]], np.log([[0.05] * 3]), [[1, 0, 0, 0]], [3.0],
                          np.zeros((1, 3, 1)))
    view = render(scene, CameraPose(), K)
    with pytest.raises(AnchorInvalidError):
        compute_anchor((2.0, 2.0), view, CameraPose(), K)


def test_discrete_gradient_and_hand_objective():
    losses = np.array([3.0, 1.0, 2.0])
    assert np.array_equal(discrete_gradient(losses), [2.0, 1.5, 1.0])
    cfg = SearchConfig(ns=2, alpha=0.8, beta=0.2, eps=1e-6)
    grad, obj, best = select_candidate(losses, cfg)
    hand = [0.8 * 3.0 + 0.2 / (2.0 + 1e-6), 0.8 * 1.0 + 0.2 / (1.5 + 1e-6),
            0.8 * 2.0 + 0.2 / (1.0 + 1e-6)]
    assert np.allclose(obj, hand, rtol=0, atol=1e-15) and best == 1


def test_beta_zero_is_plain_argmin_and_ties_go_low():
    rng = np.random.default_rng(2)
    for _ in range(20):
        losses = rng.random(31)
        assert select_candidate(losses, SearchConfig(beta=0.0, eps=123.0))[2] == int(np.argmin(losses))
    assert select_candidate([1.0, 0.5, 0.5, 1.0], SearchConfig(ns=3, beta=0.0))[2] == 1


def test_search_config_validation():
    for kw in ({"gamma_min": 2.0, "gamma_max": 1.0}, {"ns": 1}, {"alpha": -1.0},
               {"eps": 0.0}, {"render_scale": 0.0}, {"alpha": 0.0, "beta": 0.0}):
        with pytest.raises(InvalidArgumentError):
            SearchConfig(**kw)


def _search(scene, q_pose, r_pose, cfg):
    q_img = render(scene, q_pose, K).rgb
    query = Query(q_img, K, 0, q_pose)
    est = OracleNoiseBackend().estimate(query, ref_view(scene, r_pose), scene)
    r_q = propagate_rotation(est.delta_rotation, r_pose.rotation)
    anchor = compute_anchor(est.correspondence[0], render(scene, r_pose, K), r_pose, K)
    v = pixel_ray_direction(K.center_pixel, r_q, K)
    return anchor, r_q, v, photometric_search(scene, q_img, r_q, anchor, v, cfg, K)


def test_search_geometry_and_trace(room):
    scene, traj = room
    anchor, r_q, v, (pose, trace) = _search(scene, traj[10], traj[11], FAST)
    assert len(trace.candidates) == FAST.ns + 1
    objs = [c.objective for c in trace.candidates]
    assert trace.selected_index == int(np.argmin(objs))
    for c in trace.candidates:
        px, _ = project(anchor.P, CameraPose.from_center(r_q, c.center), K)
        assert np.linalg.norm(px - K.center_pixel) < 1e-4
    assert np.isclose(trace.step, (FAST.gamma_max - FAST.gamma_min) * anchor.d_P / FAST.ns)
    assert np.linalg.norm(pose.center - traj[10].center) <= trace.step


def test_search_scale_equivariance(room):
    scene, traj = room
    s = 2.5
    big = GaussianScene(scene.positions * s, scene.scale_log + np.log(s), scene.rotations,
                        scene.opacity_logit, scene.sh)
    scaled = [CameraPose.from_center(p.rotation, p.center * s) for p in traj]
    cfg = SearchConfig(beta=0.0, render_scale=0.5)
    _, _, _, (p1, t1) = _search(scene, traj[12], traj[13], cfg)
    _, _, _, (p2, t2) = _search(big, scaled[12], scaled[13], cfg)
    assert t1.selected_index == t2.selected_index
    assert np.allclose(p2.center, s * p1.center, atol=1e-6 * s)


def test_search_fails_on_empty_frustum():
    scene = GaussianScene([[0.0, 0.0, 5.0]], np.log([[0.05] * 3]), [[1, 0, 0, 0]], [3.0],
                          np.zeros((1, 3, 1)))
    # every candidate sits past the only primitive, looking away from it
    anchor = AnchorPoint(np.array([0.0, 0.0, 50.0]), 1.0)
    with pytest.raises(SearchFailedError):
        photometric_search(scene, np.zeros((64, 64, 3)), Rotation.identity(), anchor,
                           np.array([0.0, 0.0, 1.0]), FAST, K)


def test_phase2_single_exact_candidate(room):
    scene, traj = room
    q_pose = traj[14]
    q = Query(render(scene, q_pose, K).rgb, K, 0, q_pose)
    pose, diag = run_phase2(q, [match(q_pose, 0)], scene, FAST, OracleNoiseBackend())
    assert np.linalg.norm(pose.center - q_pose.center) <= diag.outcomes[0].trace.step


def test_phase2_skips_failing_candidate(room):
    scene, traj = room
    q_pose = traj[14]
    q = Query(render(scene, q_pose, K).rgb, K, 0, q_pose)
    away = CameraPose.from_center(so3_exp([0.0, np.pi, 0.0]) @ q_pose.rotation, q_pose.center)
    cands = [match(traj[13], 1), match(away, 2), match(traj[15], 3)]
    pose, diag = run_phase2(q, cands, scene, FAST, OracleNoiseBackend())
    assert diag.outcomes[1].error is not None and diag.outcomes[1].pose is None
    assert diag.chosen in (0, 2)
    assert diag.outcomes[diag.chosen].objective == min(diag.outcomes[i].objective for i in (0, 2))
    with pytest.raises(InitializationFailedError):
        run_phase2(q, [match(away, 2)], scene, FAST, OracleNoiseBackend())
    with pytest.raises(InvalidArgumentError):
        run_phase2(q, [], scene, FAST, OracleNoiseBackend())


def test_trace_csv(tmp_path, room):
    scene, traj = room
    _, _, _, (_, trace) = _search(scene, traj[10], traj[11], FAST)
    trace.write_csv(tmp_path / "t.csv")
    lines = (tmp_path / "t.csv").read_text().splitlines()
    assert lines[0] == "k,d_k,loss,grad,objective" and len(lines) == FAST.ns + 2
