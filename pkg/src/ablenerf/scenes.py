"""Dataset ingestion and synthetic scenes with analytic ground truth.

Two sources of data:

  * Blender-NeRF layout: transforms_<split>.json with camera_angle_x
    and frames[].transform_matrix, one PNG per frame.  RGBA frames are
    composited onto a white background; optional "near"/"far" keys in
    the JSON override the 2/6 defaults of that dataset family.

  * Synthetic scenes: a plain-text file with one primitive per line
    (spheres and axis-aligned boxes carrying density, base colour and
    an optional view-dependent Phong-style lobe).  Ground-truth images
    come from dense quadrature of the classic volume-rendering
    integral, so every generated pixel has a known answer.

Scene file grammar (# starts a comment, keys may appear in any order):

    near 2.0
    far 6.0
    sphere center X Y Z radius R density S rgb R G B \
           [lobe_exp E lobe_rgb R G B light X Y Z]
    box center X Y Z half HX HY HZ density S rgb R G B [...]
"""

from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass, field

import numpy as np
from PIL import Image

from . import color, kernels, sampling
from .errors import ConfigError, ContractError, SceneFormatError

log = logging.getLogger("ablenerf.scenes")

DEFAULT_NEAR = 2.0
DEFAULT_FAR = 6.0


# ---------------------------------------------------------------------------
# dataset container


@dataclass
class SceneDataset:
    cameras: list
    images: list          # (H, W, 3) float arrays, sRGB in [0, 1]
    split: str
    near: float = DEFAULT_NEAR
    far: float = DEFAULT_FAR

    def __post_init__(self):
        if len(self.cameras) != len(self.images):
            raise ContractError(
                f"{len(self.images)} images vs {len(self.cameras)} cameras")
        shapes = {im.shape for im in self.images}
        if len(shapes) > 1:
            raise ContractError(f"mixed image dimensions: {sorted(shapes)}")


# ---------------------------------------------------------------------------
# blender-format loading


def _composite_white(arr):
    """uint8 RGB(A) -> float32 RGB in [0,1], alpha over white."""
    arr = arr.astype(np.float32) / 255.0
    if arr.ndim == 2:
        arr = np.stack([arr] * 3, axis=-1)
    if arr.shape[-1] == 4:
        alpha = arr[..., 3:4]
        arr = arr[..., :3] * alpha + (1.0 - alpha)
    return arr[..., :3]


def _downscale(img, factor):
    h, w = img.shape[:2]
    if h % factor or w % factor:
        raise ConfigError(
            f"downscale {factor} does not divide image size {h}x{w}")
    return img.reshape(h // factor, factor, w // factor, factor, 3).mean(axis=(1, 3))


def load_blender(dir_path, split, downscale=1):
    """Read a transforms_<split>.json dataset; images composited on white."""
    json_path = os.path.join(dir_path, f"transforms_{split}.json")
    if not os.path.exists(json_path):
        raise SceneFormatError(f"no such transforms file: {json_path}")
    try:
        with open(json_path) as f:
            meta = json.load(f)
    except json.JSONDecodeError as e:
        raise SceneFormatError(f"malformed JSON in {json_path}: {e}") from e
    if "camera_angle_x" not in meta or "frames" not in meta:
        raise SceneFormatError(
            f"{json_path} missing camera_angle_x or frames")

    cameras, images = [], []
    for i, frame in enumerate(meta["frames"]):
        if "transform_matrix" not in frame or "file_path" not in frame:
            raise SceneFormatError(
                f"{json_path}: frame {i} missing transform_matrix/file_path")
        rel = frame["file_path"]
        img_path = os.path.join(dir_path, rel)
        if not os.path.splitext(img_path)[1]:
            img_path += ".png"
        if not os.path.exists(img_path):
            raise SceneFormatError(
                f"frame {i} ({rel}): image file not found at {img_path}")
        img = _composite_white(np.asarray(Image.open(img_path)))
        if downscale > 1:
            img = _downscale(img, downscale)
        h, w = img.shape[:2]
        pose = np.asarray(frame["transform_matrix"], dtype=np.float64)
        if pose.shape != (4, 4):
            raise SceneFormatError(
                f"frame {i}: transform_matrix must be 4x4, got {pose.shape}")
        focal = sampling.focal_from_angle_x(w, float(meta["camera_angle_x"]))
        cameras.append(sampling.Camera(width=w, height=h, focal=focal, pose=pose))
        images.append(img.astype(np.float32))
    return SceneDataset(
        cameras=cameras, images=images, split=split,
        near=float(meta.get("near", DEFAULT_NEAR)),
        far=float(meta.get("far", DEFAULT_FAR)))


def camera_to_frame_json(camera, file_path):
    return {"file_path": file_path,
            "transform_matrix": camera.pose.tolist()}


def write_blender_dataset(out_dir, datasets, camera_angle_x):
    """Write splits in the Blender layout so tools stay format-agnostic."""
    from .evalviz import write_png
    os.makedirs(out_dir, exist_ok=True)
    for ds in datasets:
        frames = []
        img_dir = os.path.join(out_dir, ds.split)
        os.makedirs(img_dir, exist_ok=True)
        for i, (cam, img) in enumerate(zip(ds.cameras, ds.images)):
            rel = f"./{ds.split}/r_{i}"
            write_png(img, os.path.join(out_dir, rel[2:] + ".png"))
            frames.append(camera_to_frame_json(cam, rel))
        meta = {"camera_angle_x": float(camera_angle_x),
                "near": ds.near, "far": ds.far, "frames": frames}
        with open(os.path.join(out_dir, f"transforms_{ds.split}.json"), "w") as f:
            json.dump(meta, f, indent=1)


# ---------------------------------------------------------------------------
# synthetic scenes


@dataclass
class Primitive:
    kind: str                 # "sphere" | "box"
    center: np.ndarray
    extent: np.ndarray        # sphere: (r, r, r); box: half sizes
    density: float
    rgb: np.ndarray
    lobe_exp: float = 0.0
    lobe_rgb: np.ndarray = field(default_factory=lambda: np.zeros(3))
    light: np.ndarray = field(default_factory=lambda: np.zeros(3))


@dataclass
class SyntheticScene:
    primitives: list
    near: float = DEFAULT_NEAR
    far: float = DEFAULT_FAR

    def to_arrays(self):
        p = self.primitives
        return (
            np.array([0 if q.kind == "sphere" else 1 for q in p], dtype=np.int64),
            np.ascontiguousarray([q.center for q in p], dtype=np.float64),
            np.ascontiguousarray([q.extent for q in p], dtype=np.float64),
            np.array([q.density for q in p], dtype=np.float64),
            np.ascontiguousarray([q.rgb for q in p], dtype=np.float64),
            np.array([q.lobe_exp for q in p], dtype=np.float64),
            np.ascontiguousarray([q.lobe_rgb for q in p], dtype=np.float64),
            np.ascontiguousarray([q.light for q in p], dtype=np.float64),
        )


_KEY_ARITY = {"center": 3, "radius": 1, "half": 3, "density": 1,
              "rgb": 3, "lobe_exp": 1, "lobe_rgb": 3, "light": 3}


def _parse_record(tokens, lineno):
    kind = tokens[0]
    vals = {}
    i = 1
    while i < len(tokens):
        key = tokens[i]
        if key not in _KEY_ARITY:
            raise SceneFormatError(f"line {lineno}: unknown key {key!r}")
        n = _KEY_ARITY[key]
        raw = tokens[i + 1:i + 1 + n]
        if len(raw) < n:
            raise SceneFormatError(
                f"line {lineno}: key {key!r} needs {n} value(s)")
        try:
            vals[key] = [float(x) for x in raw]
        except ValueError as e:
            raise SceneFormatError(f"line {lineno}: bad number for {key!r}") from e
        i += 1 + n

    for req in ("center", "density", "rgb"):
        if req not in vals:
            raise SceneFormatError(f"line {lineno}: {kind} missing {req!r}")
    if vals["density"][0] < 0:
        raise SceneFormatError(f"line {lineno}: density must be >= 0")
    if any(not 0 <= c <= 1 for c in vals["rgb"]):
        raise SceneFormatError(f"line {lineno}: rgb must lie in [0,1]")
    if kind == "sphere":
        if "radius" not in vals or vals["radius"][0] <= 0:
            raise SceneFormatError(f"line {lineno}: sphere needs radius > 0")
        extent = np.full(3, vals["radius"][0])
    else:
        if "half" not in vals or any(h <= 0 for h in vals["half"]):
            raise SceneFormatError(f"line {lineno}: box needs half > 0 (x y z)")
        extent = np.array(vals["half"])
    lobe_exp = vals.get("lobe_exp", [0.0])[0]
    if lobe_exp > 0 and ("lobe_rgb" not in vals or "light" not in vals):
        raise SceneFormatError(
            f"line {lineno}: lobe_exp needs lobe_rgb and light")
    return Primitive(
        kind=kind, center=np.array(vals["center"]), extent=extent,
        density=vals["density"][0], rgb=np.array(vals["rgb"]),
        lobe_exp=lobe_exp,
        lobe_rgb=np.array(vals.get("lobe_rgb", [0.0, 0.0, 0.0])),
        light=np.array(vals.get("light", [0.0, 0.0, 0.0])))


def parse_scene(text):
    prims = []
    near, far = DEFAULT_NEAR, DEFAULT_FAR
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        tokens = line.split()
        head = tokens[0]
        if head in ("near", "far"):
            if len(tokens) != 2:
                raise SceneFormatError(f"line {lineno}: {head} takes one value")
            try:
                v = float(tokens[1])
            except ValueError as e:
                raise SceneFormatError(f"line {lineno}: bad {head} value") from e
            if head == "near":
                near = v
            else:
                far = v
        elif head in ("sphere", "box"):
            prims.append(_parse_record(tokens, lineno))
        else:
            raise SceneFormatError(f"line {lineno}: unknown record {head!r}")
    if not prims:
        raise SceneFormatError("scene has no primitives")
    if not 0 < near < far:
        raise SceneFormatError(f"need 0 < near < far, got {near}, {far}")
    return SyntheticScene(primitives=prims, near=near, far=far)


def load_scene(path):
    if not os.path.exists(path):
        raise SceneFormatError(f"no such scene file: {path}")
    with open(path) as f:
        return parse_scene(f.read())


# ---------------------------------------------------------------------------
# analytic ground truth by dense quadrature


def synth_gt_batch(scene, origins, dirs, n_quad):
    """sRGB ground truth for a batch of rays via n_quad-point quadrature."""
    origins = np.asarray(origins, dtype=np.float64)
    dirs = np.asarray(dirs, dtype=np.float64)
    b = origins.shape[0]
    arrays = scene.to_arrays()
    t_edges = np.linspace(scene.near, scene.far, n_quad + 1)
    t_mid = 0.5 * (t_edges[1:] + t_edges[:-1])
    dnorm = np.linalg.norm(dirs, axis=-1)
    unit = dirs / dnorm[:, None]
    points = origins[:, None, :] + t_mid[None, :, None] * dirs[:, None, :]
    view = np.broadcast_to(unit[:, None, :], points.shape)
    sigma, rgb = kernels.eval_scene(
        np.ascontiguousarray(points.reshape(-1, 3)),
        np.ascontiguousarray(view.reshape(-1, 3)), *arrays)
    # optical length is measured along the ray, so scale dt by |d|
    delta = np.broadcast_to(
        ((scene.far - scene.near) / n_quad) * dnorm[:, None], (b, n_quad))
    colour, _, resid = kernels.composite_rays(
        np.ascontiguousarray(sigma.reshape(b, n_quad)),
        np.ascontiguousarray(delta),
        np.ascontiguousarray(rgb.reshape(b, n_quad, 3)))
    linear = colour + resid[:, None]          # white background
    return color.linear_to_srgb(linear)


def synth_scene_gt(scene, ray, n_quad=1024):
    """Single-ray oracle colour; n_quad >= 512 keeps quadrature error small."""
    if n_quad < 512:
        raise ContractError(f"n_quad must be >= 512, got {n_quad}")
    return synth_gt_batch(scene, ray.origin[None, :], ray.direction[None, :],
                          n_quad)[0]


def render_scene_image(scene, camera, n_quad=1024, chunk_rows=8):
    """Ground-truth image for one camera, row-chunked to bound memory."""
    h, w = camera.height, camera.width
    img = np.empty((h, w, 3), dtype=np.float32)
    for r0 in range(0, h, chunk_rows):
        r1 = min(r0 + chunk_rows, h)
        rows, cols = np.mgrid[r0:r1, 0:w]
        o, d, _ = sampling.ray_bundle(camera, rows.reshape(-1), cols.reshape(-1))
        img[r0:r1] = synth_gt_batch(scene, o, d, n_quad).reshape(r1 - r0, w, 3)
    return img


# ---------------------------------------------------------------------------
# camera placement and dataset generation


def look_at_pose(eye, target=(0.0, 0.0, 0.0), up=(0.0, 0.0, 1.0)):
    """Camera-to-world matrix with -z aimed from eye toward target."""
    eye = np.asarray(eye, dtype=np.float64)
    z = eye - np.asarray(target, dtype=np.float64)
    z = z / np.linalg.norm(z)
    x = np.cross(np.asarray(up, dtype=np.float64), z)
    nx = np.linalg.norm(x)
    if nx < 1e-8:
        raise ContractError("view direction is parallel to the up vector")
    x = x / nx
    y = np.cross(z, x)
    pose = np.eye(4)
    pose[:3, 0], pose[:3, 1], pose[:3, 2], pose[:3, 3] = x, y, z, eye
    return pose


def _sphere_eye(rng, radius, elev_range=(0.2, 1.1)):
    az = rng.uniform(0.0, 2.0 * np.pi)
    el = rng.uniform(*elev_range)
    return radius * np.array([np.cos(el) * np.cos(az),
                              np.cos(el) * np.sin(az),
                              np.sin(el)])


def generate_synthetic_dataset(scene, n_views, resolution, seed,
                               camera_angle_x=0.6911112, cam_radius=4.0,
                               n_quad=1024, split="train", eyes=None):
    """Cameras on a sphere looking at the origin; GT-rendered images."""
    if n_views < 1:
        raise ConfigError(f"need at least one view, got {n_views}")
    rng = np.random.default_rng(seed)
    focal = sampling.focal_from_angle_x(resolution, camera_angle_x)
    if eyes is None:
        eyes = [_sphere_eye(rng, cam_radius) for _ in range(n_views)]
    cameras = [sampling.Camera(width=resolution, height=resolution,
                               focal=focal, pose=look_at_pose(eye))
               for eye in eyes]
    images = [render_scene_image(scene, cam, n_quad=n_quad) for cam in cameras]
    return SceneDataset(cameras=cameras, images=images, split=split,
                        near=scene.near, far=scene.far)


def generate_synthetic_splits(scene, n_train, n_test, resolution, seed,
                              camera_angle_x=0.6911112, cam_radius=4.0,
                              n_quad=1024, test_offset=0.12):
    """Train views plus held-out views displaced ~test_offset radians."""
    if n_train < 1 or n_test < 1:
        raise ConfigError("need at least one train and one test view")
    rng = np.random.default_rng(seed)
    train_eyes = [_sphere_eye(rng, cam_radius) for _ in range(n_train)]
    test_eyes = []
    for i in range(n_test):
        base = train_eyes[int(rng.integers(0, n_train))]
        nudge = rng.standard_normal(3)
        nudge -= nudge @ base * base / (base @ base)
        nudge *= test_offset * cam_radius / np.linalg.norm(nudge)
        eye = base + nudge
        test_eyes.append(eye * cam_radius / np.linalg.norm(eye))
    train = generate_synthetic_dataset(
        scene, n_train, resolution, seed, camera_angle_x, cam_radius,
        n_quad, split="train", eyes=train_eyes)
    test = generate_synthetic_dataset(
        scene, n_test, resolution, seed, camera_angle_x, cam_radius,
        n_quad, split="test", eyes=test_eyes)
    return train, test


# ---------------------------------------------------------------------------
# analytic depth oracle


def sphere_hit_depth(origins, dirs, center, radius):
    """Euclidean distance to the first ray-sphere hit; NaN where missed."""
    origins = np.asarray(origins, dtype=np.float64)
    dirs = np.asarray(dirs, dtype=np.float64)
    oc = origins - np.asarray(center, dtype=np.float64)
    a = (dirs * dirs).sum(-1)
    b = 2.0 * (dirs * oc).sum(-1)
    c = (oc * oc).sum(-1) - radius ** 2
    disc = b * b - 4.0 * a * c
    hit = disc >= 0
    t = np.full(origins.shape[:1], np.nan)
    sq = np.sqrt(np.where(hit, disc, 0.0))
    t_near = (-b - sq) / (2.0 * a)
    t = np.where(hit & (t_near > 0), t_near, t)
    return t * np.sqrt(a)
