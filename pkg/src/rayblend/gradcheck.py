"""Finite-difference verification of the analytic backward pass."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .compositor import overlay_raw
from .gradients import DescriptorGrad, backward_full, overlay_raw_backward
from .projection import project, pyramid_camera
from .raster import render_forward
from .scene import Camera, DescriptorSet, PointCloud, Scene

FD_STEP = 1e-5
REL_TOL = 1e-4
ABS_FLOOR = 1e-3  # below this magnitude the error is judged in absolute terms


@dataclass
class GradConfig:
    scenes: list[Scene]
    camera: Camera
    levels: int
    max_len: int
    alpha_scales: list[float]
    kind: str
    overlay: bool
    weights: list = field(default_factory=list)  # per level: (w_feat, q_feat, w_alpha, q_alpha)


@dataclass
class GradcheckReport:
    max_rel_error: float
    configs: int
    entries: int
    kinds: dict
    worst: str = ""
    coverage: dict = field(default_factory=dict)  # configs exhibiting each ray feature

    @property
    def passed(self) -> bool:
        return self.max_rel_error < REL_TOL


def _rel_error(analytic, numeric):
    return np.abs(analytic - numeric) / np.maximum(np.abs(numeric), ABS_FLOOR)


def random_config(rng: np.random.Generator, max_points: int = 20, max_canvas: int = 16,
                  max_len: int = 8) -> GradConfig:
    levels = int(rng.integers(0, 3))
    step = 2 ** levels
    sizes = [s for s in (4, 8, 12, 16) if s % step == 0 and s <= max_canvas] or [step]
    w, h = int(rng.choice(sizes)), int(rng.choice(sizes))
    cam = Camera(np.eye(3), np.zeros(3), (w * 0.8, h * 0.8), (w / 2, h / 2), (w, h))
    kind = str(rng.choice(["spread", "clustered", "behind", "saturated"]))
    overlay = bool(rng.random() < 0.25)
    dim = int(rng.integers(2, 9))
    scenes, scales = [], []
    for _ in range(2 if overlay else 1):
        n = int(rng.integers(1, max_points + 1))
        if kind == "clustered":
            # few pixels, many points: exercises truncation at max_len
            px = rng.integers(0, 2, size=(n, 2)) + np.array([w // 2, h // 2])
            xy = px + rng.uniform(0.05, 0.95, size=(n, 2))
        else:
            xy = rng.uniform(0, [w, h], size=(n, 2))
        z = rng.uniform(1.0, 3.0, size=n)
        if kind == "behind":
            z[rng.random(n) < 0.5] *= -1.0
        pos = np.column_stack([(xy[:, 0] - w / 2) / (w * 0.8) * z,
                               (xy[:, 1] - h / 2) / (h * 0.8) * z, z])
        vals = rng.uniform(-1.0, 1.0, size=(n, dim))
        raw = rng.uniform(0.05, 2.0, size=n) * np.where(rng.random(n) < 0.8, 1.0, -1.0)
        if kind == "saturated":
            raw[rng.random(n) < 0.6] = rng.uniform(3.0, 6.0)
        vals[:, -1] = raw
        mu = float(rng.uniform(0.3, 2.0))
        scenes.append(Scene(PointCloud(pos), DescriptorSet(vals), mu))
        scales.append(float(rng.uniform(0.1, 0.95)) if rng.random() < 0.5 else 1.0)
    weights = []
    for t in range(levels + 1):
        ht, wt = h >> t, w >> t
        weights.append((rng.normal(size=(ht, wt, dim - 1)), rng.normal(size=(ht, wt, dim - 1)),
                        rng.normal(size=(ht, wt)), rng.normal(size=(ht, wt))))
    return GradConfig(scenes, cam, levels, int(rng.integers(1, max_len + 1)), scales, kind,
                      overlay, weights)


def _images(cfg: GradConfig, retain: bool):
    fwds = [render_forward(s, cfg.camera, cfg.levels, cfg.max_len, alpha_scale=p, retain=retain)
            for s, p in zip(cfg.scenes, cfg.alpha_scales)]
    if cfg.overlay:
        return fwds, [overlay_raw(f, b) for f, b in zip(fwds[0].images, fwds[1].images)]
    return fwds, fwds[0].images


def _loss(cfg: GradConfig, images) -> float:
    total = 0.0
    for img, (wf, qf, wa, qa) in zip(images, cfg.weights):
        total += np.sum(wf * img.features + 0.5 * qf * img.features ** 2)
        total += np.sum(wa * img.alpha + 0.5 * qa * img.alpha ** 2)
    return float(total)


def analytic_grads(cfg: GradConfig, tamper: float = 0.0) -> list[DescriptorGrad]:
    fwds, images = _images(cfg, retain=True)
    upstream = [(wf + qf * img.features, wa + qa * img.alpha)
                for img, (wf, qf, wa, qa) in zip(images, cfg.weights)]
    if not cfg.overlay:
        return [backward_full(fwds[0], upstream, tamper)]
    front, back = [], []
    for f, b, (dc, da) in zip(fwds[0].images, fwds[1].images, upstream):
        gf, gb = overlay_raw_backward(f, b, dc, da)
        front.append(gf)
        back.append(gb)
    return [backward_full(fwds[0], front, tamper), backward_full(fwds[1], back, tamper)]


def numeric_grads(cfg: GradConfig, h: float = FD_STEP) -> list[DescriptorGrad]:
    out = []
    for scene in cfg.scenes:
        vals = scene.descriptors.values
        grad = np.zeros_like(vals)
        for idx in np.ndindex(vals.shape):
            orig = vals[idx]
            vals[idx] = orig + h
            up = _loss(cfg, _images(cfg, retain=False)[1])
            vals[idx] = orig - h
            down = _loss(cfg, _images(cfg, retain=False)[1])
            vals[idx] = orig
            grad[idx] = (up - down) / (2 * h)
        mu = scene.jitter_exponent
        scene.jitter_exponent = mu + h
        up = _loss(cfg, _images(cfg, retain=False)[1])
        scene.jitter_exponent = mu - h
        down = _loss(cfg, _images(cfg, retain=False)[1])
        scene.jitter_exponent = mu
        out.append(DescriptorGrad(grad, (up - down) / (2 * h)))
    return out


def config_features(cfg: GradConfig) -> set[str]:
    """Which of the hard cases a configuration actually exercises."""
    found = set()
    for scene, p in zip(cfg.scenes, cfg.alpha_scales):
        fwd = render_forward(scene, cfg.camera, cfg.levels, cfg.max_len, alpha_scale=p)
        for t, rays in enumerate(fwd.rays):
            if (rays.lengths == 0).any():
                found.add("empty_rays")
            visible = int(project(scene.cloud, pyramid_camera(cfg.camera, t)).valid.sum())
            if rays.lengths.sum() < visible:
                found.add("truncated_rays")
        if (fwd.alphas > np.tanh(3.0)).any():
            found.add("saturated_alphas")
        if p != 1.0:
            found.add("jitter")
    if cfg.overlay:
        found.add("overlay")
    return found


def check_config(cfg: GradConfig, tamper: float = 0.0) -> tuple[float, int]:
    worst, entries = 0.0, 0
    for a, f in zip(analytic_grads(cfg, tamper), numeric_grads(cfg)):
        err = _rel_error(a.values, f.values)
        mu_err = float(_rel_error(np.array(a.mu_grad), np.array(f.mu_grad)))
        worst = max(worst, float(err.max()), mu_err)
        entries += a.values.size + 1
    return worst, entries


def run_gradcheck(seed: int = 0, configs: int = 200, max_points: int = 20,
                  max_canvas: int = 16, max_len: int = 8, tamper: float = 0.0) -> GradcheckReport:
    rng = np.random.default_rng(seed)
    worst, entries, worst_desc = 0.0, 0, ""
    kinds: dict[str, int] = {}
    coverage = dict.fromkeys(("empty_rays", "truncated_rays", "saturated_alphas", "jitter",
                              "overlay"), 0)
    for k in range(configs):
        cfg = random_config(rng, max_points, max_canvas, max_len)
        err, n = check_config(cfg, tamper)
        entries += n
        label = cfg.kind + ("+overlay" if cfg.overlay else "")
        if any(p != 1.0 for p in cfg.alpha_scales):
            label += "+jitter"
        kinds[label] = kinds.get(label, 0) + 1
        for feature in config_features(cfg):
            coverage[feature] += 1
        if err >= worst:
            worst, worst_desc = err, f"config {k} ({label})"
    return GradcheckReport(worst, configs, entries, kinds, worst_desc, coverage)
