"""Independent reference implementations used as test oracles.

Nothing here imports the renderer; projection, covariance and compositing are
written out from the model definition, one Gaussian at a time, with no tiles.
"""

import numpy as np
from scipy.spatial.transform import Rotation as SciRot

SH_C0 = 0.28209479177387814


def quat_to_matrix(q_wxyz):
    w, x, y, z = q_wxyz
    return SciRot.from_quat([x, y, z, w]).as_matrix()   # scipy normalizes


def quintic(x):
    x = min(max(x, 0.0), 1.0)
    return 6 * x ** 5 - 15 * x ** 4 + 10 * x ** 3


def naive_render(scene, R, t, fx, fy, cx, cy, width, height, cutoff=1 / 255, t_floor=1e-4,
                 max_per_pixel=1024, background=(0.0, 0.0, 0.0), near=0.01, low_pass=0.3,
                 fade_begin=1.1, fade_end=1.3):
    """Front-to-back compositing of every Gaussian in front of the camera at every pixel.

    ``R`` (3x3) and ``t`` map world to camera.  Returns (rgb, alpha).
    """
    R = np.asarray(R, float)
    t = np.asarray(t, float)
    lim_x = 0.5 * width / fx
    lim_y = 0.5 * height / fy
    means = scene.positions.astype(float)
    splats = []
    for i in range(len(scene)):
        p = R @ means[i] + t
        if p[2] <= near:
            continue
        x, y, z = p
        fade = (quintic((fade_end - abs(x / z) / lim_x) / (fade_end - fade_begin))
                * quintic((fade_end - abs(y / z) / lim_y) / (fade_end - fade_begin))
                * quintic((z - near) / near))
        rot = quat_to_matrix(scene.rotations[i].astype(float))
        S = np.diag(np.exp(scene.scale_log[i].astype(float)))
        cov = R @ rot @ S @ S @ rot.T @ R.T
        J = np.array([[fx / z, 0.0, -fx * x / z ** 2],
                      [0.0, fy / z, -fy * y / z ** 2]])
        cov2 = J @ cov @ J.T + low_pass * np.eye(2)
        opacity = 1.0 / (1.0 + np.exp(-float(scene.opacity_logit[i]))) * fade
        color = np.maximum(0.5 + SH_C0 * scene.sh[i, :, 0].astype(float), 0.0)
        splats.append((z, i, np.array([fx * x / z + cx, fy * y / z + cy]), np.linalg.inv(cov2),
                       opacity, color))
    splats.sort(key=lambda s: (s[0], s[1]))
    ys, xs = np.mgrid[0:height, 0:width].astype(float)
    T = np.ones((height, width))
    rgb = np.zeros((height, width, 3))
    used = np.zeros((height, width), dtype=int)
    live = np.ones((height, width), dtype=bool)
    for _, _, m, Q, op, col in splats:
        dx = xs - m[0]
        dy = ys - m[1]
        power = -0.5 * (Q[0, 0] * dx * dx + Q[1, 1] * dy * dy) - Q[0, 1] * dx * dy
        raw = np.minimum(op * np.exp(np.minimum(power, 0.0)), 0.99)
        raw[power > 0] = 0.0
        u = (raw - cutoff) / cutoff
        s = np.where(u < 1.0, 6 * u ** 5 - 15 * u ** 4 + 10 * u ** 3, 1.0)
        a = np.where(raw < cutoff, 0.0, raw * s)
        hit = live & (a > 0)
        stop = hit & (T * (1 - a) < t_floor)
        live &= ~stop
        hit &= ~stop
        w = np.where(hit, a * T, 0.0)
        rgb += w[..., None] * col
        T = np.where(hit, T * (1 - a), T)
        used += hit
        live &= used < max_per_pixel
    rgb += T[..., None] * np.asarray(background, float)
    return rgb, 1.0 - T


def naive_render_pose(scene, pose, K, **kw):
    return naive_render(scene, pose.rotation.matrix(), pose.translation, K.fx, K.fy, K.cx, K.cy,
                        K.width, K.height, **kw)


def brute_force_topk(matrix, query, k):
    """Indices of the k largest cosine similarities, ties by lower index."""
    sims = matrix @ query
    idx = sorted(range(len(sims)), key=lambda i: (-sims[i], i))
    return idx[:k], sims


def laplacian_4(gray):
    """Discrete 4-neighbour Laplacian with edge replication, by explicit shifts."""
    p = np.pad(gray, 1, mode="edge")
    return p[:-2, 1:-1] + p[2:, 1:-1] + p[1:-1, :-2] + p[1:-1, 2:] - 4.0 * gray
