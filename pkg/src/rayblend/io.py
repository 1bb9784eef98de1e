"""Loading and saving of point clouds, cameras, descriptors, images, scenes
and composition manifests."""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .compositor import activate_alpha
from .scene import (DEFAULT_DESCRIPTOR_DIM, Camera, DescriptorSet, PointCloud, Scene,
                    SceneError)


class SceneIOError(ValueError):
    pass


class PlyHeaderError(SceneIOError):
    pass


class PlyLayoutError(SceneIOError):
    pass


class PlyTruncatedError(SceneIOError):
    pass


class CameraFormatError(SceneIOError):
    pass


class DescriptorFormatError(SceneIOError):
    pass


class ImageFormatError(SceneIOError):
    pass


class ManifestError(SceneIOError):
    pass


# ---------------------------------------------------------------- PLY

_PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}


@dataclass
class _PlyElement:
    name: str
    count: int
    props: list = field(default_factory=list)  # (name, dtype) or (name, count_dtype, item_dtype)

    @property
    def has_lists(self) -> bool:
        return any(len(p) == 3 for p in self.props)


def _parse_ply_header(data: bytes):
    if not data.startswith(b"ply"):
        raise PlyHeaderError("missing 'ply' magic line")
    end = data.find(b"end_header")
    if end < 0:
        raise PlyHeaderError("missing end_header")
    body_start = data.find(b"\n", end)
    body_start = len(data) if body_start < 0 else body_start + 1
    lines = data[:end].decode("ascii", errors="replace").splitlines()[1:]
    fmt, elements = None, []
    for line in lines:
        tok = line.split()
        if not tok or tok[0] in ("comment", "obj_info"):
            continue
        if tok[0] == "format":
            if len(tok) != 3:
                raise PlyHeaderError(f"bad format line: {line!r}")
            fmt = tok[1]
        elif tok[0] == "element":
            if len(tok) != 3 or not tok[2].isdigit():
                raise PlyHeaderError(f"bad element line: {line!r}")
            elements.append(_PlyElement(tok[1], int(tok[2])))
        elif tok[0] == "property":
            if not elements:
                raise PlyHeaderError("property declared before any element")
            if len(tok) == 5 and tok[1] == "list":
                if tok[2] not in _PLY_TYPES or tok[3] not in _PLY_TYPES:
                    raise PlyHeaderError(f"unknown list type in {line!r}")
                elements[-1].props.append((tok[4], _PLY_TYPES[tok[2]], _PLY_TYPES[tok[3]]))
            elif len(tok) == 3 and tok[1] in _PLY_TYPES:
                elements[-1].props.append((tok[2], _PLY_TYPES[tok[1]]))
            else:
                raise PlyHeaderError(f"bad property line: {line!r}")
        else:
            raise PlyHeaderError(f"unexpected header line: {line!r}")
    if fmt is None:
        raise PlyHeaderError("missing format line")
    if fmt not in ("ascii", "binary_little_endian"):
        raise PlyLayoutError(f"unsupported PLY format {fmt!r}")
    return fmt, elements, body_start


def _vertex_layout(elements):
    vertex = next((e for e in elements if e.name == "vertex"), None)
    if vertex is None:
        raise PlyLayoutError("no vertex element")
    if vertex.has_lists:
        raise PlyLayoutError("list properties on the vertex element are not supported")
    names = [p[0] for p in vertex.props]
    for axis in "xyz":
        if axis not in names:
            raise PlyLayoutError(f"vertex element lacks property {axis!r}")
    if vertex.count < 1:
        raise PlyLayoutError("vertex element is empty")
    return vertex, [names.index(a) for a in "xyz"]


def load_point_cloud(path) -> PointCloud:
    """Read x, y, z of every vertex from an ASCII or little-endian binary PLY.

    Other vertex properties (colours, normals) and other elements are ignored.
    """
    data = Path(path).read_bytes()
    fmt, elements, start = _parse_ply_header(data)
    vertex, cols = _vertex_layout(elements)
    if fmt == "ascii":
        tokens = data[start:].split()
        pos = 0
        for el in elements:
            if el is vertex:
                n = el.count * len(el.props)
                if pos + n > len(tokens):
                    raise PlyTruncatedError(
                        f"vertex data ends early: need {n} values, found {len(tokens) - pos}")
                try:
                    arr = np.array(tokens[pos:pos + n], dtype=np.float64)
                except ValueError as exc:
                    raise PlyTruncatedError(f"malformed vertex value: {exc}") from None
                return PointCloud(arr.reshape(el.count, -1)[:, cols])
            try:
                for _ in range(el.count):
                    for prop in el.props:
                        pos += 1 + (int(tokens[pos]) if len(prop) == 3 else 0)
            except (IndexError, ValueError):
                raise PlyTruncatedError(f"element {el.name!r} ends early") from None
    offset = start
    for el in elements:
        if el is vertex:
            dtype = np.dtype([(p[0], "<" + p[1]) for p in el.props])
            need = el.count * dtype.itemsize
            if offset + need > len(data):
                raise PlyTruncatedError(
                    f"vertex data ends early: need {need} bytes, found {len(data) - offset}")
            rec = np.frombuffer(data, dtype=dtype, count=el.count, offset=offset)
            return PointCloud(np.column_stack([rec[a].astype(np.float64) for a in "xyz"]))
        if not el.has_lists:
            offset += el.count * np.dtype([(p[0], "<" + p[1]) for p in el.props]).itemsize
            continue
        for _ in range(el.count):
            for prop in el.props:
                if len(prop) == 2:
                    offset += np.dtype(prop[1]).itemsize
                    continue
                cdt = np.dtype("<" + prop[1])
                if offset + cdt.itemsize > len(data):
                    raise PlyTruncatedError(f"element {el.name!r} ends early")
                n = int(np.frombuffer(data, cdt, 1, offset)[0])
                offset += cdt.itemsize + n * np.dtype(prop[2]).itemsize
    raise PlyLayoutError("no vertex element")  # unreachable: checked above


def save_point_cloud(cloud: PointCloud, path, binary: bool = False, colors=None) -> None:
    """Write vertex positions as doubles; optional uint8 colours for interop."""
    pos = cloud.positions
    props = ["property double x", "property double y", "property double z"]
    if colors is not None:
        colors = np.asarray(colors, dtype=np.uint8).reshape(len(pos), 3)
        props += ["property uchar red", "property uchar green", "property uchar blue"]
    fmt = "binary_little_endian" if binary else "ascii"
    header = "\n".join(["ply", f"format {fmt} 1.0", f"element vertex {len(pos)}", *props,
                        "end_header"]) + "\n"
    with open(path, "wb") as f:
        f.write(header.encode("ascii"))
        if binary:
            fields_ = [("x", "<f8"), ("y", "<f8"), ("z", "<f8")]
            if colors is not None:
                fields_ += [("red", "u1"), ("green", "u1"), ("blue", "u1")]
            rec = np.empty(len(pos), dtype=fields_)
            for k, a in enumerate("xyz"):
                rec[a] = pos[:, k]
            if colors is not None:
                for k, c in enumerate(("red", "green", "blue")):
                    rec[c] = colors[:, k]
            f.write(rec.tobytes())
        else:
            for k, p in enumerate(pos):
                row = " ".join(repr(float(v)) for v in p)
                if colors is not None:
                    row += " " + " ".join(str(int(c)) for c in colors[k])
                f.write((row + "\n").encode("ascii"))


# ---------------------------------------------------------------- cameras

_CAMERA_HEADER = "# rayblend cameras v1"


def save_cameras(cameras: list[Camera], path) -> None:
    """One record per line: id fx fy cx cy W H followed by [R|t] row-major."""
    lines = [_CAMERA_HEADER,
             "# view_id fx fy cx cy W H r00 r01 r02 t0 r10 r11 r12 t1 r20 r21 r22 t2",
             f"cameras {len(cameras)}"]
    for k, cam in enumerate(cameras):
        name = cam.name or f"{k:04d}"
        if any(ch.isspace() for ch in name):
            raise CameraFormatError(f"view id {name!r} contains whitespace")
        rt = np.column_stack([cam.rotation, cam.translation]).reshape(-1)
        nums = [*cam.focal, *cam.principal]
        lines.append(" ".join([name, *(repr(float(v)) for v in nums),
                               str(cam.width), str(cam.height),
                               *(repr(float(v)) for v in rt)]))
    Path(path).write_text("\n".join(lines) + "\n")


def load_cameras(path) -> list[Camera]:
    text = Path(path).read_text()
    declared, cams = None, []
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        tok = line.split()
        if tok[0] == "cameras" and len(tok) == 2 and declared is None and not cams:
            try:
                declared = int(tok[1])
            except ValueError:
                raise CameraFormatError(f"line {lineno}: bad camera count") from None
            continue
        if len(tok) != 19:
            raise CameraFormatError(f"line {lineno}: expected 19 fields, got {len(tok)}")
        name = tok[0]
        try:
            fx, fy, cx, cy = (float(v) for v in tok[1:5])
            w, h = int(tok[5]), int(tok[6])
            rt = np.array([float(v) for v in tok[7:]]).reshape(3, 4)
        except ValueError:
            raise CameraFormatError(f"view {name!r}: malformed number") from None
        try:
            cams.append(Camera(rt[:, :3], rt[:, 3], (fx, fy), (cx, cy), (w, h), name))
        except SceneError as exc:
            raise CameraFormatError(f"view {name!r}: {exc}") from None
    if declared is None:
        raise CameraFormatError("missing 'cameras <count>' line")
    if declared != len(cams):
        raise CameraFormatError(f"header declares {declared} cameras, file has {len(cams)}")
    return cams


# ---------------------------------------------------------------- descriptors

DESCRIPTOR_MAGIC = b"RBDESC\x00\x00"
DESCRIPTOR_VERSION = 1


def save_descriptors(desc: DescriptorSet, path) -> None:
    n, m = desc.values.shape
    with open(path, "wb") as f:
        f.write(DESCRIPTOR_MAGIC)
        f.write(struct.pack("<qqq", DESCRIPTOR_VERSION, n, m))
        f.write(desc.values.astype("<f4").tobytes())


def load_descriptors(path) -> DescriptorSet:
    data = Path(path).read_bytes()
    if len(data) < 32 or data[:8] != DESCRIPTOR_MAGIC:
        raise DescriptorFormatError(f"{path}: not a descriptor file (bad magic)")
    version, n, m = struct.unpack("<qqq", data[8:32])
    if version != DESCRIPTOR_VERSION:
        raise DescriptorFormatError(f"{path}: unsupported version {version}")
    if n < 1 or m < 2:
        raise DescriptorFormatError(f"{path}: invalid size {n}x{m}")
    if len(data) - 32 != n * m * 4:
        raise DescriptorFormatError(
            f"{path}: header says {n}x{m} floats, body holds {(len(data) - 32) / 4:g}")
    return DescriptorSet(np.frombuffer(data, "<f4", offset=32).reshape(n, m))


# ---------------------------------------------------------------- images

def load_image(path) -> np.ndarray:
    """Load an 8-bit PNG as float (H, W, 3) or (H, W, 4) in [0, 1]."""
    path = Path(path)
    with open(path, "rb") as f:
        head = f.read(26)
    if head[:8] != b"\x89PNG\r\n\x1a\n" or head[12:16] != b"IHDR":
        raise ImageFormatError(f"{path}: not a PNG file")
    depth, color_type = head[24], head[25]
    if depth != 8:
        raise ImageFormatError(f"{path}: unsupported bit depth {depth}")
    with Image.open(path) as img:
        has_alpha = color_type in (4, 6) or "transparency" in img.info
        arr = np.asarray(img.convert("RGBA" if has_alpha else "RGB"))
    return arr.astype(np.float64) / 255.0


def save_image(path, image: np.ndarray) -> None:
    arr = np.asarray(image, dtype=np.float64)
    if arr.ndim != 3 or arr.shape[-1] not in (3, 4):
        raise ImageFormatError(f"image must be (H, W, 3|4), got {arr.shape}")
    data = np.round(np.clip(arr, 0.0, 1.0) * 255.0).astype(np.uint8)
    Image.fromarray(data, "RGBA" if arr.shape[-1] == 4 else "RGB").save(path)


# ---------------------------------------------------------------- scenes

SCENE_FILE = "scene.json"


def save_scene(scene: Scene, directory) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    save_point_cloud(scene.cloud, directory / "points.ply", binary=True)
    save_descriptors(scene.descriptors, directory / "descriptors.bin")
    meta = {"format": "rayblend-scene", "version": 1, "label": scene.label,
            "jitter_exponent": scene.jitter_exponent, "cloud": "points.ply",
            "descriptors": "descriptors.bin"}
    (directory / SCENE_FILE).write_text(json.dumps(meta, indent=2) + "\n")
    return directory / SCENE_FILE


def load_scene(path, dim: int = DEFAULT_DESCRIPTOR_DIM, seed: int = 0) -> Scene:
    """Load a scene directory / ``scene.json``; a bare ``.ply`` gets fresh
    random descriptors."""
    path = Path(path)
    if path.is_dir():
        path = path / SCENE_FILE
    if not path.exists():
        raise SceneIOError(f"{path}: no such file")
    if path.suffix.lower() == ".ply":
        cloud = load_point_cloud(path)
        return Scene.initialize(cloud, dim, np.random.default_rng(seed), path.stem)
    try:
        meta = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise SceneIOError(f"{path}: invalid JSON ({exc})") from None
    if meta.get("format") != "rayblend-scene":
        raise SceneIOError(f"{path}: not a scene file")
    cloud = load_point_cloud(path.parent / meta["cloud"])
    if meta.get("descriptors"):
        desc = load_descriptors(path.parent / meta["descriptors"])
    else:
        desc = DescriptorSet.random(len(cloud), dim, np.random.default_rng(seed))
    try:
        return Scene(cloud, desc, float(meta.get("jitter_exponent", 1.0)),
                     meta.get("label", path.parent.name))
    except SceneError as exc:
        raise SceneIOError(f"{path}: {exc}") from None


# ---------------------------------------------------------------- composition

ALPHA_CLAMP = 1.0 - 1e-6
RIGID_TOL = 1e-5


@dataclass
class ManifestEntry:
    cloud: Path | None = None
    descriptors: Path | None = None
    scene: Path | None = None
    transform: np.ndarray = field(default_factory=lambda: np.eye(4))
    alpha_scale: float = 1.0
    mu: float | None = None
    label: str = ""


@dataclass
class SceneManifest:
    entries: list[ManifestEntry]
    dim: int = DEFAULT_DESCRIPTOR_DIM
    seed: int = 0


def check_rigid(matrix: np.ndarray, tol: float = RIGID_TOL) -> None:
    """Accept rotation + translation with an optional uniform scale."""
    matrix = np.asarray(matrix, dtype=np.float64)
    if matrix.shape != (4, 4) or not np.all(np.isfinite(matrix)):
        raise ManifestError("transform must be a finite 4x4 matrix")
    if np.max(np.abs(matrix[3] - [0, 0, 0, 1])) > tol:
        raise ManifestError("transform bottom row must be [0, 0, 0, 1]")
    lin = matrix[:3, :3]
    scale = np.cbrt(np.linalg.det(lin))
    if scale <= 0:
        raise ManifestError("transform must preserve orientation")
    rot = lin / scale
    if np.max(np.abs(rot.T @ rot - np.eye(3))) > tol:
        raise ManifestError("transform is not rigid (up to uniform scale)")


def load_manifest(path) -> SceneManifest:
    path = Path(path)
    try:
        meta = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ManifestError(f"{path}: {exc}") from None
    if meta.get("format") != "rayblend-manifest" or not meta.get("scenes"):
        raise ManifestError(f"{path}: not a manifest or no scenes listed")
    base = path.parent
    entries = []
    for k, raw in enumerate(meta["scenes"]):
        def resolve(key):
            if not raw.get(key):
                return None
            p = base / raw[key]
            if not p.exists():
                raise ManifestError(f"entry {k}: {key} path {p} does not exist")
            return p
        entry = ManifestEntry(resolve("cloud"), resolve("descriptors"), resolve("scene"),
                              np.array(raw.get("transform", np.eye(4)), dtype=np.float64),
                              float(raw.get("alpha_scale", 1.0)), raw.get("mu"),
                              raw.get("label", f"entry{k}"))
        if (entry.cloud is None) == (entry.scene is None):
            raise ManifestError(f"entry {k}: give exactly one of 'cloud' or 'scene'")
        if entry.alpha_scale < 0:
            raise ManifestError(f"entry {k}: alpha_scale must be >= 0")
        check_rigid(entry.transform)
        entries.append(entry)
    return SceneManifest(entries, int(meta.get("descriptor_dim", DEFAULT_DESCRIPTOR_DIM)),
                         int(meta.get("seed", 0)))


def scale_alphas(desc: DescriptorSet, factor: float) -> DescriptorSet:
    """Multiply every activated alpha by ``factor`` and store the result back
    in raw (pre-activation) form."""
    if factor == 1.0:
        return desc.copy()
    raw = desc.raw_alpha
    alpha = activate_alpha(raw) * factor
    out = desc.copy()
    out.values[:, -1] = np.where(raw > 0, np.arctanh(np.minimum(alpha, ALPHA_CLAMP)), raw)
    return out


def compose_scenes(manifest: SceneManifest | str | Path) -> Scene:
    if not isinstance(manifest, SceneManifest):
        manifest = load_manifest(manifest)
    clouds, descs, labels, mus = [], [], [], []
    for k, e in enumerate(manifest.entries):
        rng = np.random.default_rng(manifest.seed + k)
        if e.scene is not None:
            scene = load_scene(e.scene, manifest.dim, manifest.seed + k)
        else:
            cloud = load_point_cloud(e.cloud)
            desc = (load_descriptors(e.descriptors) if e.descriptors is not None
                    else DescriptorSet.random(len(cloud), manifest.dim, rng))
            if len(desc) != len(cloud):
                raise ManifestError(
                    f"entry {k}: {len(cloud)} points but {len(desc)} descriptors")
            scene = Scene(cloud, desc, 1.0, e.label)
        mu = scene.jitter_exponent if e.mu is None else float(e.mu)
        cloud = scene.cloud
        if not np.array_equal(e.transform, np.eye(4)):
            cloud = cloud.transformed(e.transform)
        clouds.append(cloud.positions)
        descs.append(scale_alphas(scene.descriptors, e.alpha_scale ** mu).values)
        labels.append(e.label or scene.label)
        mus.append(mu)
    dims = {d.shape[1] for d in descs}
    if len(dims) != 1:
        raise ManifestError(f"entries disagree on descriptor dimension: {sorted(dims)}")
    return Scene(PointCloud(np.concatenate(clouds)), DescriptorSet(np.concatenate(descs)),
                 mus[0], "+".join(labels))
