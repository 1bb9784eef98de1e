"""Independent reference implementations used only by the tests.

Plain Python loops, written without looking at the production kernels.
"""
import math

import numpy as np


def under_oracle(colors, alphas):
    """Sequential scalar front-to-back UNDER recurrence."""
    n_ch = len(colors[0]) if len(colors) else 0
    acc = [0.0] * n_ch
    trans = 1.0
    for c, a in zip(colors, alphas):
        for j in range(n_ch):
            acc[j] = acc[j] + a * trans * c[j]
        trans = (1.0 - a) * trans
    return acc, 1.0 - trans


def project_oracle(point, rotation, translation, focal, principal):
    x, y, z = (sum(rotation[r][k] * point[k] for k in range(3)) + translation[r] for r in range(3))
    return focal[0] * x / z + principal[0], focal[1] * y / z + principal[1], z


def rays_oracle(positions, camera, max_len, z_near=1e-4):
    """Dict pixel (row, col) -> nearest ``max_len`` point indices, by brute force."""
    buckets = {}
    for i, p in enumerate(positions):
        x, y, z = project_oracle(p, camera.rotation, camera.translation, camera.focal,
                                 camera.principal)
        if z <= z_near:
            continue
        col, row = math.floor(x), math.floor(y)
        if 0 <= col < camera.width and 0 <= row < camera.height:
            buckets.setdefault((row, col), []).append((z, i))
    return {k: [i for _, i in sorted(v)[:max_len]] for k, v in buckets.items()}


def zbuffer_oracle(positions, colors, camera, z_near=1e-4):
    """Hard z-buffer: each pixel takes the colour of its nearest point
    (lowest index on exact depth ties)."""
    h, w = camera.height, camera.width
    depth = np.full((h, w), np.inf)
    owner = np.full((h, w), -1)
    for i, p in enumerate(positions):
        x, y, z = project_oracle(p, camera.rotation, camera.translation, camera.focal,
                                 camera.principal)
        if z <= z_near:
            continue
        col, row = math.floor(x), math.floor(y)
        if 0 <= col < w and 0 <= row < h and z < depth[row, col]:
            depth[row, col] = z
            owner[row, col] = i
    feat = np.zeros((h, w, colors.shape[1]))
    alpha = np.zeros((h, w))
    hit = owner >= 0
    feat[hit] = colors[owner[hit]]
    alpha[hit] = 1.0
    return feat, alpha


def central_difference(f, x, h=1e-6):
    return (f(x + h) - f(x - h)) / (2 * h)
