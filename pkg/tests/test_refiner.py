import math

import numpy as np
import pytest

from splatloc import photometry
from splatloc.errors import DegenerateMaskError, InvalidArgumentError, NonFiniteLossError
from splatloc.geometry import CameraPose, Intrinsics, so3_exp
from splatloc.photometry import ReliabilityMask
from splatloc.refiner import AdamState, RefineConfig, adam_step, cosine_lr, refine_pose
from splatloc.renderer import render
from splatloc.scene import SceneRecipe, synthesize_scene

K = Intrinsics.from_fov(48, 48, 60.0)


@pytest.fixture(scope="module")
def room():
    return synthesize_scene(SceneRecipe(primitive_count=2500, seed=1, trajectory_length=20))


def scalar_adam(grads, lr, b1=0.9, b2=0.999, eps=1e-8):
    # written from the textbook update, plain floats
    m = v = 0.0
    out = []
    for t, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        out.append(-lr * (m / (1 - b1 ** t)) / (math.sqrt(v / (1 - b2 ** t)) + eps))
    return out


def test_cosine_lr_examples():
    cfg = RefineConfig(max_iters=200, lr_init=0.02)
    assert cosine_lr(0, cfg) == 0.02
    assert abs(cosine_lr(100, cfg) - 0.01) < 1e-15
    assert abs(cosine_lr(200, cfg)) < 1e-15
    assert cosine_lr(150, RefineConfig(lr_schedule="constant", lr_init=0.02)) == 0.02
    with pytest.raises(InvalidArgumentError):
        cosine_lr(201, cfg)


def test_adam_first_step_by_hand():
    update, state = adam_step(AdamState.zeros(1), [0.5], 0.1)
    assert abs(update[0] - (-0.1 * 0.5 / (0.5 + 1e-8))) < 1e-15 and state.t == 1


def test_adam_matches_reference_trace():
    seq = [0.3, -1.2, 0.05, 2.0, 0.0, -0.7, 1e-4, 3.3, -2.2, 0.9]
    want = scalar_adam(seq, 0.05)
    state = AdamState.zeros(1)
    for g, w in zip(seq, want):
        u, state = adam_step(state, [g], 0.05)
        assert abs(u[0] - w) < 1e-12


def test_adam_zero_gradient_is_inert():
    state = AdamState.zeros(6)
    for _ in range(10):
        u, state = adam_step(state, np.zeros(6), 0.1)
        assert not u.any()


def test_fixed_point_at_ground_truth(room):
    scene, traj = room
    T = traj[3]
    q = render(scene, T, K).rgb
    pose, trace = refine_pose(scene, q, T, K, RefineConfig(max_iters=30))
    assert trace.losses[0] < 1e-12
    assert np.degrees((pose.rotation @ T.rotation.inverse()).angle()) < np.degrees(1e-6)
    assert np.linalg.norm(pose.center - T.center) < 1e-6


def perturbed(T, deg, dist, seed):
    rng = np.random.default_rng(seed)
    a = rng.normal(size=3)
    d = rng.normal(size=3)
    R = so3_exp(np.radians(deg) * a / np.linalg.norm(a)) @ T.rotation
    return CameraPose.from_center(R, T.center + dist * d / np.linalg.norm(d))


def test_mask_computed_once_and_unit_quaternion(room, monkeypatch):
    scene, traj = room
    calls = []
    orig = photometry.mask_from_render
    monkeypatch.setattr(photometry, "mask_from_render",
                        lambda *a, **k: calls.append(1) or orig(*a, **k))
    T = traj[5]
    q = render(scene, T, K).rgb
    _, trace = refine_pose(scene, q, perturbed(T, 1.0, 0.01 * scene.diameter, 0), K,
                           RefineConfig(max_iters=25, convergence_eps=0.0))
    assert len(calls) == 1 and trace.mask_computations == 1
    assert trace.iterations_used == 25
    for p in trace.poses:
        assert abs(np.linalg.norm(p.rotation.quat) - 1.0) < 1e-6
    assert min(trace.losses) <= trace.losses[0]


def test_all_ones_mask_equals_disabled(room, monkeypatch):
    scene, traj = room
    T = traj[7]
    q = render(scene, T, K).rgb
    T0 = perturbed(T, 0.8, 0.005 * scene.diameter, 1)
    cfg = RefineConfig(max_iters=15, convergence_eps=0.0)
    _, off = refine_pose(scene, q, T0, K, RefineConfig(max_iters=15, convergence_eps=0.0,
                                                        mask_enabled=False))
    monkeypatch.setattr(photometry, "mask_from_render",
                        lambda img, *a, **k: ReliabilityMask.all_ones(img.shape[:2]))
    _, on = refine_pose(scene, q, T0, K, cfg)
    assert on.losses == off.losses
    assert all(a.translation.tobytes() == b.translation.tobytes() for a, b in zip(on.poses, off.poses))


def test_degenerate_mask_falls_back(room, monkeypatch):
    scene, traj = room
    T = traj[2]

    def boom(*a, **k):
        raise DegenerateMaskError("nothing kept")

    monkeypatch.setattr(photometry, "mask_from_render", boom)
    _, trace = refine_pose(scene, render(scene, T, K).rgb, T, K, RefineConfig(max_iters=3))
    assert trace.mask_fallback and trace.mask_computations == 0


def test_non_finite_loss_aborts(room):
    scene, traj = room
    q = np.full((48, 48, 3), np.nan)
    with pytest.raises(NonFiniteLossError):
        refine_pose(scene, q, traj[0], K, RefineConfig(max_iters=3, mask_enabled=False))


def test_determinism(room):
    scene, traj = room
    T = traj[9]
    q = render(scene, T, K).rgb
    T0 = perturbed(T, 1.0, 0.01 * scene.diameter, 2)
    a = refine_pose(scene, q, T0, K, RefineConfig(max_iters=10))[1]
    b = refine_pose(scene, q, T0, K, RefineConfig(max_iters=10))[1]
    assert a.losses == b.losses


def test_perturbed_start_converges(room):
    scene, traj = room
    hits = 0
    for s in range(6):
        T = traj[2 + 3 * s]
        q = render(scene, T, K).rgb
        pose, _ = refine_pose(scene, q, perturbed(T, 1.0, 0.01 * scene.diameter, 10 + s), K)
        rot = np.degrees((pose.rotation @ T.rotation.inverse()).angle())
        hits += rot < 0.1 and np.linalg.norm(pose.center - T.center) < 1e-3 * scene.diameter
    assert hits >= 5


def test_config_validation():
    for kw in ({"max_iters": 0}, {"lr_init": 0.0}, {"lr_schedule": "step"}, {"adam_beta1": 1.0},
               {"translation_mode": "se3"}, {"translation_scale": "meters"},
               {"translation_scale": -1.0}, {"render_scale": 1.5}, {"patience": 0}):
        with pytest.raises(InvalidArgumentError):
            RefineConfig(**kw)
