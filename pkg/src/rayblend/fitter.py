"""Gradient-based fitting of scene descriptors to multi-view target images."""
from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .compositor import overlay_raw, overlay_targets
from .gradients import backward_full, overlay_raw_backward
from .head import FUSION_THRESHOLD, HeadConfig
from .losses import compute_loss, l1, psnr
from .optim import make_optimizer
from .projection import pad_camera
from .raster import render_forward
from .scene import Camera, FitDataset, Scene, TargetKind


class ConfigError(ValueError):
    pass


class FitDivergence(RuntimeError):
    def __init__(self, message: str, report: FitReport, scene: Scene | None = None):
        super().__init__(message)
        self.report = report
        self.scene = scene


_CONFIG_DOCS = {
    "iterations": "optimisation steps",
    "learning_rate": "step size for descriptors",
    "head_learning_rate": "step size for head weights and the jitter exponent",
    "optimizer": "adam | sgd",
    "beta": "weight of the L1 alpha term for RGBA targets",
    "loss_rgb": "l1 | l2",
    "crop_size": "square crop side in pixels, 0 = whole image",
    "zoom_min": "lower bound of the random zoom factor",
    "zoom_max": "upper bound of the random zoom factor",
    "use_jitter": "rescale alphas by p**mu with a matching target rescale",
    "jitter_prob": "probability that a step is jittered",
    "use_overlay": "train pairs of scenes on overlaid samples",
    "max_ray_len": "points kept per ray",
    "pyramid_levels": "number of coarser raw images rendered besides level 0",
    "head_mode": "passthrough | linear",
    "fusion_threshold": "alpha above which a finer level overrides a coarser one",
    "seed": "random seed",
    "holdout": "comma-separated view ids excluded from training",
    "val_every": "render held-out views every this many steps, 0 = never",
    "background": "background image for RGB targets (path, relative to the config)",
}


@dataclass
class FitConfig:
    iterations: int = 1000
    learning_rate: float = 1e-2
    head_learning_rate: float = 1e-3
    optimizer: str = "adam"
    beta: float = 1.0
    loss_rgb: str = "l1"
    crop_size: int = 0
    zoom_min: float = 1.0
    zoom_max: float = 1.0
    use_jitter: bool = False
    jitter_prob: float = 0.5
    use_overlay: bool = False
    max_ray_len: int = 50
    pyramid_levels: int = 4
    head_mode: str = "passthrough"
    fusion_threshold: float = FUSION_THRESHOLD
    seed: int = 0
    holdout: str = ""
    val_every: int = 0
    background: str = ""

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.iterations < 0:
            raise ConfigError("iterations must be >= 0")
        if not (self.learning_rate > 0 and self.head_learning_rate > 0):
            raise ConfigError("learning rates must be > 0")
        if self.beta < 0:
            raise ConfigError("beta must be >= 0")
        if not 0 < self.zoom_min <= self.zoom_max:
            raise ConfigError("zoom range must satisfy 0 < zoom_min <= zoom_max")
        if self.crop_size < 0:
            raise ConfigError("crop_size must be >= 0")
        if self.loss_rgb not in ("l1", "l2"):
            raise ConfigError(f"loss_rgb must be l1 or l2, got {self.loss_rgb!r}")
        if self.optimizer not in ("adam", "sgd", "adaptive-moment", "plain-gradient"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        if self.head_mode not in ("passthrough", "linear"):
            raise ConfigError(f"unknown head mode {self.head_mode!r}")
        if self.max_ray_len < 1 or self.pyramid_levels < 0:
            raise ConfigError("max_ray_len must be >= 1 and pyramid_levels >= 0")
        if not 0 <= self.jitter_prob <= 1:
            raise ConfigError("jitter_prob must lie in [0, 1]")

    @property
    def holdout_ids(self) -> list[str]:
        return [v.strip() for v in self.holdout.split(",") if v.strip()]

    def make_head(self, dim: int) -> HeadConfig:
        if self.head_mode == "linear":
            head = HeadConfig.linear_identity(dim)
            head.threshold = self.fusion_threshold
            return head
        return HeadConfig("passthrough", threshold=self.fusion_threshold)

    def to_text(self) -> str:
        lines = ["# rayblend fit config v1"]
        for f in fields(self):
            value = getattr(self, f.name)
            if isinstance(value, bool):
                value = "true" if value else "false"
            lines.append(f"# {_CONFIG_DOCS[f.name]}")
            lines.append(f"{f.name} = {value}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str, **overrides) -> FitConfig:
        kinds = {f.name: f.type for f in fields(cls)}
        values = {}
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected 'key = value'")
            key, raw = (s.strip() for s in line.split("=", 1))
            if key not in kinds:
                raise ConfigError(f"line {lineno}: unknown key {key!r}")
            values[key] = _parse_value(kinds[key], raw, key)
        values.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**values)


def _parse_value(kind: str, raw: str, key: str):
    try:
        if kind == "bool":
            if raw.lower() not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return raw.lower() in ("true", "1", "yes")
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {kind}") from None
    return raw


@dataclass
class FitReport:
    losses: list[float] = field(default_factory=list)
    view_metrics: dict = field(default_factory=dict)
    timings: dict = field(default_factory=dict)
    mu: list[float] = field(default_factory=list)
    diverged: bool = False
    message: str = ""
    head: HeadConfig | None = field(default=None, repr=False)

    def add_time(self, phase: str, seconds: float):
        self.timings[phase] = self.timings.get(phase, 0.0) + seconds

    def to_json(self) -> str:
        d = asdict(self)
        d["head"] = self.head.to_dict() if self.head is not None else None
        d["iterations"] = len(self.losses)
        return json.dumps(d, indent=2)


# ---------------------------------------------------------------- views

def zoom_view(camera: Camera, image: np.ndarray, scale: float):
    """Scale intrinsics by ``scale`` and resample ``image`` to the new canvas
    with nearest-pixel-centre lookup."""
    w, h = camera.canvas
    nw, nh = max(1, int(round(w * scale))), max(1, int(round(h * scale)))
    rows = np.minimum(((np.arange(nh) + 0.5) / scale).astype(np.int64), h - 1)
    cols = np.minimum(((np.arange(nw) + 0.5) / scale).astype(np.int64), w - 1)
    fx, fy = camera.focal
    cx, cy = camera.principal
    cam = camera.with_intrinsics((fx * scale, fy * scale), (cx * scale, cy * scale), (nw, nh))
    return cam, image[rows][:, cols]


def crop_view(camera: Camera, image: np.ndarray, size: tuple[int, int], align: int,
              rng: np.random.Generator):
    """Random crop whose offsets are multiples of ``align`` so coarse pyramid
    pixels stay aligned with the uncropped render."""
    w, h = camera.canvas
    cw, ch = min(size[0], w), min(size[1], h)
    x0 = align * int(rng.integers(0, (w - cw) // align + 1))
    y0 = align * int(rng.integers(0, (h - ch) // align + 1))
    if (cw, ch) == (w, h):
        return camera, image
    cx, cy = camera.principal
    cam = camera.with_intrinsics(camera.focal, (cx - x0, cy - y0), (cw, ch))
    return cam, image[y0:y0 + ch, x0:x0 + cw]


def augment_view(camera, image, cfg: FitConfig, rng: np.random.Generator, crop=None):
    if cfg.zoom_max > cfg.zoom_min:
        scale = float(rng.uniform(cfg.zoom_min, cfg.zoom_max))
    else:
        scale = cfg.zoom_min
    if scale != 1.0:
        camera, image = zoom_view(camera, image, scale)
    if crop is None:
        side = cfg.crop_size or max(camera.canvas)
        crop = (side, side)
    return crop_view(camera, image, crop, 2 ** cfg.pyramid_levels, rng)


# ---------------------------------------------------------------- rendering

def render_image(scene: Scene, camera: Camera, head: HeadConfig, levels: int, max_len: int,
                 alpha_scale: float = 1.0, force_opaque: bool = False, retain: bool = False):
    """Render an RGBA image; canvases not divisible by ``2**levels`` are padded
    for rasterization and cropped back. Returns ``(rgba, forward, head_ctx)``."""
    padded = pad_camera(camera, levels)
    fwd = render_forward(scene, padded, levels, max_len, alpha_scale=alpha_scale,
                         force_opaque=force_opaque, retain=retain)
    rgba, ctx = head.forward(fwd.images)
    return rgba[:camera.height, :camera.width], fwd, ctx


def _pad_grad(d_rgba, shape):
    if d_rgba.shape[:2] == shape:
        return d_rgba
    out = np.zeros(shape + (4,))
    out[:d_rgba.shape[0], :d_rgba.shape[1]] = d_rgba
    return out


def evaluate(scene: Scene, head: HeadConfig, data: FitDataset, cfg: FitConfig,
             background=None) -> dict:
    metrics = {}
    for vid, (cam, target) in zip(data.view_ids, data.views):
        pred, _, _ = render_image(scene, cam, head, cfg.pyramid_levels, cfg.max_ray_len)
        if data.target_kind is TargetKind.RGB:
            pred = (1.0 - pred[..., 3:]) * background + pred[..., :3]
        metrics[vid] = {"l1": l1(pred, target), "psnr": psnr(pred, target)}
    return metrics


# ---------------------------------------------------------------- fitting

class _Trainer:
    def __init__(self, scenes: list[Scene], cfg: FitConfig, head: HeadConfig | None):
        self.cfg = cfg
        self.scenes = [s.copy() for s in scenes]
        dim = self.scenes[0].descriptors.dim
        self.head = head if head is not None else cfg.make_head(dim)
        self.params = dict(self.head.params())
        lrs = {k: cfg.head_learning_rate for k in self.params}
        for k, s in enumerate(self.scenes):
            self.params[f"desc{k}"] = s.descriptors.values
            self.params[f"mu{k}"] = np.array([s.jitter_exponent])
            lrs[f"desc{k}"] = cfg.learning_rate
            lrs[f"mu{k}"] = cfg.head_learning_rate
        self.opt = make_optimizer(cfg.optimizer, lrs)
        self.report = FitReport(head=self.head)
        self.rng = np.random.default_rng(cfg.seed)

    def sample(self, data: FitDataset, background, crop):
        cfg, rng = self.cfg, self.rng
        cam, target = data.views[int(rng.integers(len(data)))]
        if background is not None:
            target = np.concatenate([target, background], axis=-1)
        cam, target = augment_view(cam, target, cfg, rng, crop)
        bg = None
        if background is not None:
            target, bg = target[..., :-3], target[..., -3:]
        p = 1.0
        if cfg.use_jitter and rng.random() < cfg.jitter_prob:
            p = float(rng.uniform(0.0, 1.0))
            if data.target_kind is TargetKind.RGBA:
                target = target * p  # premultiplied: colour scales with alpha
            else:
                p = 1.0
        return cam, target, bg, p

    def render(self, k: int, cam: Camera, p: float):
        cfg = self.cfg
        return render_forward(self.scenes[k], pad_camera(cam, cfg.pyramid_levels),
                              cfg.pyramid_levels, cfg.max_ray_len, alpha_scale=p)

    def apply(self, grads: dict, loss: float, it: int):
        if not np.isfinite(loss) or not all(np.all(np.isfinite(g)) for g in grads.values()):
            self.report.diverged = True
            self.report.message = f"non-finite loss or gradient at iteration {it}"
            raise FitDivergence(self.report.message, self.report, self.scenes[0])
        t0 = time.perf_counter()
        self.opt.step(self.params, grads)
        for k, s in enumerate(self.scenes):
            mu = self.params[f"mu{k}"]
            np.maximum(mu, 0.0, out=mu)
            s.jitter_exponent = float(mu[0])
        self.report.add_time("update", time.perf_counter() - t0)
        self.report.losses.append(float(loss))
        self.report.mu = [s.jitter_exponent for s in self.scenes]


def _scene_grads(grads: dict, k: int, g) -> None:
    for name, value in ((f"desc{k}", g.values), (f"mu{k}", np.array([g.mu_grad]))):
        if name in grads:
            grads[name] = grads[name] + value
        else:
            grads[name] = value


def fit(scene: Scene, data: FitDataset, cfg: FitConfig, background=None,
        head: HeadConfig | None = None, progress=None, validation=None):
    """Fit ``scene``'s descriptors (and mu, and head weights in linear mode).

    ``background`` is required for RGB targets. ``progress`` is called with a
    dict after every step. ``validation`` is an optional ``(dataset, callback)``
    pair; the callback receives ``(iteration, scene, head)`` every
    ``cfg.val_every`` steps. Returns ``(fitted_scene, report)``; the fitted head
    is ``report.head``.
    """
    if data.target_kind is TargetKind.RGB and background is None:
        raise ConfigError("RGB targets need a background image")
    if background is not None:
        background = np.asarray(background, dtype=np.float64)
    tr = _Trainer([scene], cfg, head)
    crop = (cfg.crop_size, cfg.crop_size) if cfg.crop_size else None
    for it in range(cfg.iterations):
        t0 = time.perf_counter()
        cam, target, bg, p = tr.sample(data, background, crop)
        fwd = tr.render(0, cam, p)
        rgba, ctx = tr.head.forward(fwd.images)
        t1 = time.perf_counter()
        h, w = target.shape[:2]
        loss, d_rgba = compute_loss(rgba[:h, :w], target, cfg.loss_rgb, cfg.beta, bg)
        t2 = time.perf_counter()
        level_grads, grads = tr.head.backward(fwd.images, ctx, _pad_grad(d_rgba, rgba.shape[:2]))
        _scene_grads(grads, 0, backward_full(fwd, level_grads))
        t3 = time.perf_counter()
        tr.report.add_time("render", t1 - t0)
        tr.report.add_time("loss", t2 - t1)
        tr.report.add_time("backward", t3 - t2)
        tr.apply(grads, loss, it)
        if progress is not None:
            progress({"event": "step", "iteration": it, "loss": float(loss),
                      "mu": tr.scenes[0].jitter_exponent})
        if validation is not None and cfg.val_every and (it + 1) % cfg.val_every == 0:
            validation[1](it + 1, tr.scenes[0], tr.head)
    t0 = time.perf_counter()
    tr.report.view_metrics = evaluate(tr.scenes[0], tr.head, data, cfg, background)
    if validation is not None:
        held = evaluate(tr.scenes[0], tr.head, validation[0], cfg, background)
        tr.report.view_metrics.update({f"holdout:{k}": v for k, v in held.items()})
    tr.report.add_time("evaluate", time.perf_counter() - t0)
    return tr.scenes[0], tr.report


def fit_pair_with_overlay(scene_a: Scene, scene_b: Scene, data_a: FitDataset,
                          data_b: FitDataset, cfg: FitConfig, head: HeadConfig | None = None,
                          progress=None):
    """Fit two scenes on overlaid samples: each step picks a front and a back
    (scene, view) pair, overlays their raw pyramids and their targets, and
    back-propagates into whichever scenes took part."""
    if not cfg.use_overlay:
        raise ConfigError("fit_pair_with_overlay needs use_overlay = true")
    for d in (data_a, data_b):
        if d.target_kind is not TargetKind.RGBA:
            raise ConfigError("overlay fitting needs RGBA targets")
    if scene_a.descriptors.dim != scene_b.descriptors.dim:
        raise ConfigError("both scenes must share the descriptor dimension")
    tr = _Trainer([scene_a, scene_b], cfg, head)
    datasets = (data_a, data_b)
    side_w = min(c.width for d in datasets for c, _ in d.views)
    side_h = min(c.height for d in datasets for c, _ in d.views)
    if cfg.crop_size:
        side_w, side_h = min(side_w, cfg.crop_size), min(side_h, cfg.crop_size)
    for it in range(cfg.iterations):
        t0 = time.perf_counter()
        picks = [int(tr.rng.integers(2)), int(tr.rng.integers(2))]  # front, back
        samples = [tr.sample(datasets[k], None, (side_w, side_h)) for k in picks]
        fwds = [tr.render(k, cam, p) for k, (cam, _, _, p) in zip(picks, samples)]
        images = [overlay_raw(f, b) for f, b in zip(fwds[0].images, fwds[1].images)]
        rgba, ctx = tr.head.forward(images)
        target = overlay_targets(samples[0][1], samples[1][1])
        t1 = time.perf_counter()
        loss, d_rgba = compute_loss(rgba[:side_h, :side_w], target, cfg.loss_rgb, cfg.beta)
        t2 = time.perf_counter()
        level_grads, grads = tr.head.backward(images, ctx, _pad_grad(d_rgba, rgba.shape[:2]))
        front, back = [], []
        for f, b, (dc, da) in zip(fwds[0].images, fwds[1].images, level_grads):
            gf, gb = overlay_raw_backward(f, b, dc, da)
            front.append(gf)
            back.append(gb)
        _scene_grads(grads, picks[0], backward_full(fwds[0], front))
        _scene_grads(grads, picks[1], backward_full(fwds[1], back))
        t3 = time.perf_counter()
        tr.report.add_time("render", t1 - t0)
        tr.report.add_time("loss", t2 - t1)
        tr.report.add_time("backward", t3 - t2)
        tr.apply(grads, loss, it)
        if progress is not None:
            progress({"event": "step", "iteration": it, "loss": float(loss),
                      "front": picks[0], "back": picks[1]})
    return tr.scenes[0], tr.scenes[1], tr.report
