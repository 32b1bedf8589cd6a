"""Procedural multi-view semantic scenes with exact ray-cast ground truth.

A scene is a handful of flat-shaded Lambertian primitives (axis-aligned
boxes, spheres, planes), each carrying a semantic class.  Ray casting gives
exact RGB / class / depth maps, which stand in for a real captured dataset
and serve as the oracle for rendering tests.

File formats are dependency-free and bit-exact: binary PPM (P6) for RGB,
binary PGM (P5) with class-id bytes for labels, line-oriented text for
scenes, cameras and the train/test manifest.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DataError
from .geometry import Camera

_EPS = 1e-6

# Base albedo per semantic class; individual primitives get a small jitter.
CLASS_PALETTE = np.array([
    [0.75, 0.73, 0.70],   # 0: background / room shell
    [0.80, 0.22, 0.18],   # 1
    [0.20, 0.70, 0.30],   # 2
    [0.20, 0.35, 0.85],   # 3
    [0.85, 0.75, 0.20],   # 4
    [0.75, 0.20, 0.70],   # 5
    [0.20, 0.70, 0.70],   # 6
    [0.85, 0.50, 0.15],   # 7
])


def class_albedo(class_id):
    base = CLASS_PALETTE[class_id % len(CLASS_PALETTE)]
    fade = 1.0 - 0.25 * (class_id // len(CLASS_PALETTE))
    return np.clip(base * max(fade, 0.3), 0.0, 1.0)


def albedo_texture(class_id, points):
    """Deterministic brightness modulation of a primitive's albedo.

    A smooth quasi-random function of the 3-D position (keyed by class id,
    nothing stored in scene files) that keeps surfaces view-consistently
    textured: without it, flat albedo makes depth along a ray ambiguous to
    any multi-view correspondence cue and densities never localize.
    """
    r = np.random.default_rng(np.random.SeedSequence((int(class_id), 0x7E47)))
    u = r.normal(size=3)
    u /= np.linalg.norm(u)
    v = r.normal(size=3)
    v /= np.linalg.norm(v)
    freq = 4.0 + 1.5 * (class_id % 3)
    phase = r.uniform(0.0, 2.0 * np.pi)
    pts = np.asarray(points)
    wave = np.sin(pts @ u * freq + phase) * np.cos(pts @ v * (0.83 * freq))
    return 1.0 + 0.22 * wave


@dataclass
class Primitive:
    kind: str                 # "plane" | "box" | "sphere"
    class_id: int
    albedo: np.ndarray        # (3,) in [0, 1]
    a: np.ndarray             # plane point / box center / sphere center
    b: np.ndarray             # plane normal / box half extents / (radius, 0, 0)

    def __post_init__(self):
        self.albedo = np.asarray(self.albedo, dtype=np.float64)
        self.a = np.asarray(self.a, dtype=np.float64)
        self.b = np.asarray(self.b, dtype=np.float64)


@dataclass
class SceneSpec:
    primitives: list
    class_count: int
    background_class: int = 0
    t_near: float = 0.2
    t_far: float = 9.0
    seed: int = 0
    template: str = "room"
    light_dir: np.ndarray = field(default_factory=lambda: np.array([0.3, -0.5, 0.8]))
    ambient: float = 0.35

    def __post_init__(self):
        self.light_dir = np.asarray(self.light_dir, dtype=np.float64)
        norm = np.linalg.norm(self.light_dir)
        if abs(norm - 1.0) > 1e-12:   # keep already-unit vectors bit-stable
            self.light_dir = self.light_dir / norm

    def present_classes(self):
        ids = {p.class_id for p in self.primitives}
        ids.add(self.background_class)
        return sorted(ids)


def generate_scene(template, class_count, seed, k_objects=None):
    """Deterministic procedural scene with >= 2 distinct classes.

    ``room``: a half-extent-2 open box (floor + 4 walls, class 0) containing
    boxes and spheres on the floor.  ``clutter``: free-floating primitives
    around the origin with an empty (class-0, black) background.  Object
    classes cycle 1..class_count-1 so every class appears when
    k_objects >= class_count - 1 (the default).
    """
    if class_count < 2:
        raise ConfigError("need at least 2 semantic classes")
    if template not in ("room", "clutter"):
        raise ConfigError(f"unknown scene template {template!r}")
    rng = np.random.default_rng(np.random.SeedSequence((seed, 0x5CE8E)))
    if k_objects is None:
        k_objects = (class_count - 1) + int(rng.integers(0, 2))
    # the camera rig and the object cluster share an anchor azimuth so the
    # objects sit across the room from the cameras (see scene_cameras)
    theta0 = camera_anchor(seed)
    shift = -0.5 * np.array([np.cos(theta0), np.sin(theta0)])

    prims = []
    s = 2.0
    if template == "room":
        shell = class_albedo(0) + rng.uniform(-0.03, 0.03, size=3)
        prims.append(Primitive("plane", 0, shell, [0, 0, 0], [0, 0, 1]))
        for sign in (-1.0, 1.0):
            prims.append(Primitive("plane", 0, shell * (1 - 0.04 * sign), [sign * s, 0, 0], [-sign, 0, 0]))
            prims.append(Primitive("plane", 0, shell * (1 + 0.03 * sign), [0, sign * s, 0], [0, -sign, 0]))

    centers = []
    for i in range(k_objects):
        class_id = 1 + i % (class_count - 1)
        albedo = np.clip(class_albedo(class_id) + rng.uniform(-0.04, 0.04, size=3), 0.02, 0.98)
        size = rng.uniform(0.34, 0.60)
        for _ in range(24):
            if template == "room":
                # objects cluster in a disc pushed away from the cameras
                rad = 0.78 * np.sqrt(rng.uniform())
                phi = rng.uniform(0.0, 2.0 * np.pi)
                pos = np.array([rad * np.cos(phi) + shift[0],
                                rad * np.sin(phi) + shift[1], size])
            else:
                pos = rng.uniform(-1.0, 1.0, size=3)
            if all(np.linalg.norm(pos[:2] - c[:2]) > 0.72 for c in centers):
                break
        centers.append(pos)
        if rng.uniform() < 0.5:
            half = np.array([size, size * rng.uniform(0.7, 1.3), size]) * 0.9
            half = np.minimum(half, size)
            pos2 = pos.copy()
            if template == "room":
                pos2[2] = half[2]
            prims.append(Primitive("box", class_id, albedo, pos2, half))
        else:
            prims.append(Primitive("sphere", class_id, albedo, pos, [size * 0.9, 0, 0]))

    light = rng.uniform([-0.6, -0.6, 0.5], [0.6, 0.6, 1.0])
    near, far = (0.3, 6.0) if template == "room" else (1.0, 7.0)
    return SceneSpec(prims, class_count, 0, near, far, seed, template, light)


# ---------------------------------------------------------------------------
# ray casting
# ---------------------------------------------------------------------------


def _intersect(prim, origins, dirs):
    """Nearest positive hit distance per ray, +inf where the primitive is missed."""
    if prim.kind == "sphere":
        r = prim.b[0]
        oc = origins - prim.a
        bq = np.sum(oc * dirs, axis=-1)
        cq = np.sum(oc * oc, axis=-1) - r * r
        disc = bq * bq - cq
        ok = disc >= 0.0
        root = np.sqrt(np.where(ok, disc, 0.0))
        t0 = -bq - root
        t1 = -bq + root
        t = np.where(t0 > _EPS, t0, np.where(t1 > _EPS, t1, np.inf))
        return np.where(ok, t, np.inf)
    if prim.kind == "box":
        lo, hi = prim.a - prim.b, prim.a + prim.b
        with np.errstate(divide="ignore", invalid="ignore"):
            t1 = (lo - origins) / dirs
            t2 = (hi - origins) / dirs
        tmin = np.nanmax(np.minimum(t1, t2), axis=-1)
        tmax = np.nanmin(np.maximum(t1, t2), axis=-1)
        hit = tmax >= np.maximum(tmin, _EPS)
        t = np.where(tmin > _EPS, tmin, tmax)
        return np.where(hit, t, np.inf)
    if prim.kind == "plane":
        denom = dirs @ prim.b
        offs = (prim.a - origins) @ prim.b
        with np.errstate(divide="ignore", invalid="ignore"):
            t = offs / denom
        return np.where((np.abs(denom) > 1e-12) & (t > _EPS), t, np.inf)
    raise DataError(f"unknown primitive kind {prim.kind!r}")


def _normal(prim, points):
    if prim.kind == "sphere":
        n = points - prim.a
        return n / np.linalg.norm(n, axis=-1, keepdims=True)
    if prim.kind == "box":
        rel = (points - prim.a) / prim.b
        axis = np.argmax(np.abs(rel), axis=-1)
        n = np.zeros_like(points)
        n[np.arange(len(points)), axis] = np.sign(rel[np.arange(len(points)), axis])
        return n
    return np.broadcast_to(prim.b / np.linalg.norm(prim.b), points.shape).copy()


def raycast(scene, origins, dirs):
    """Cast rays (P, 3) against the scene.

    Returns (t, class_id, rgb): nearest-hit distance (+inf on miss), the
    winning primitive's class (background on miss) and the flat-shaded
    Lambertian color (black on miss).
    """
    origins = np.asarray(origins, dtype=np.float64)
    dirs = np.asarray(dirs, dtype=np.float64)
    P = origins.shape[0]
    best_t = np.full(P, np.inf)
    best_i = np.full(P, -1, dtype=np.int64)
    for i, prim in enumerate(scene.primitives):
        t = _intersect(prim, origins, dirs)
        closer = t < best_t
        best_t = np.where(closer, t, best_t)
        best_i = np.where(closer, i, best_i)

    rgb = np.zeros((P, 3))
    cls = np.full(P, scene.background_class, dtype=np.int32)
    for i, prim in enumerate(scene.primitives):
        sel = best_i == i
        if not np.any(sel):
            continue
        pts = origins[sel] + best_t[sel, None] * dirs[sel]
        n = _normal(prim, pts)
        n = np.where((np.sum(n * dirs[sel], axis=-1) > 0.0)[:, None], -n, n)
        lambert = np.maximum(n @ scene.light_dir, 0.0)
        shade = scene.ambient + (1.0 - scene.ambient) * lambert
        tex = albedo_texture(prim.class_id, pts)
        rgb[sel] = np.clip(prim.albedo[None, :] * (shade * tex)[:, None], 0.0, 1.0)
        cls[sel] = prim.class_id
    return best_t, cls, rgb


def raycast_ground_truth(scene, cam, height, width):
    """Exact (rgb, sem, depth) maps for a camera, pixel centers at integers."""
    xs, ys = np.meshgrid(np.arange(width, dtype=np.float64),
                         np.arange(height, dtype=np.float64))
    homo = np.stack([xs, ys, np.ones_like(xs)], axis=-1).reshape(-1, 3)
    d_cam = np.linalg.solve(cam.K, homo.T).T
    d_world = d_cam @ cam.R
    d_world /= np.linalg.norm(d_world, axis=-1, keepdims=True)
    origins = np.broadcast_to(cam.center, d_world.shape)
    t, cls, rgb = raycast(scene, origins, d_world)
    return (rgb.reshape(height, width, 3),
            cls.reshape(height, width).astype(np.int32),
            t.reshape(height, width))


# ---------------------------------------------------------------------------
# cameras
# ---------------------------------------------------------------------------


def look_at_camera(eye, target, width, height, fov_deg=70.0, up=(0, 0, 1)):
    """Camera at ``eye`` looking at ``target``; x right, y down, z forward."""
    eye = np.asarray(eye, dtype=np.float64)
    fwd = np.asarray(target, dtype=np.float64) - eye
    fwd = fwd / np.linalg.norm(fwd)
    right = np.cross(fwd, np.asarray(up, dtype=np.float64))
    nr = np.linalg.norm(right)
    if nr < 1e-9:   # looking straight along up: pick any perpendicular
        right = np.cross(fwd, np.array([1.0, 0.0, 0.0]))
        nr = np.linalg.norm(right)
    right = right / nr
    down = np.cross(fwd, right)
    R = np.stack([right, down, fwd], axis=0)
    f = 0.5 * width / np.tan(np.deg2rad(fov_deg) / 2.0)
    K = np.array([[f, 0.0, (width - 1) / 2.0],
                  [0.0, f, (height - 1) / 2.0],
                  [0.0, 0.0, 1.0]])
    return Camera(K, R, -R @ eye, width, height)


def camera_anchor(seed):
    """Azimuth shared by the camera rig and the scene's object placement."""
    return float(np.random.default_rng(
        np.random.SeedSequence((seed, 0x7B0))).uniform(0.0, 2.0 * np.pi))


def eval_arc_slots(n_views):
    """Arc positions reserved for held-out views: evenly spaced interior
    slots, so every held-out view has training views on both sides."""
    n_eval = max(1, n_views // 4)
    slots = []
    for k in range(n_eval):
        s = int(round((k + 1) * n_views / (n_eval + 1)))
        while s in slots or s >= n_views:
            s -= 1
        slots.append(s)
    return sorted(slots)


def scene_cameras(scene, n_views, height, width, seed):
    """Inward-looking cameras on a jittered ~60 degree arc.

    Views are nearby but sparse so they overlap heavily: image-based color
    blending needs most query-visible surface to be visible in several
    source views, which a full ring of few cameras cannot provide.  The
    held-out views (the tail of the returned list, see holdout_split) are
    placed on interior arc slots flanked by training views.
    """
    rng = np.random.default_rng(np.random.SeedSequence((seed, 0xCA3)))
    theta0 = camera_anchor(seed)
    span = 0.55
    eval_slots = eval_arc_slots(n_views)
    order = [s for s in range(n_views) if s not in eval_slots] + eval_slots
    cams = []
    for v in range(n_views):
        slot = order[v]
        frac = slot / max(n_views - 1, 1) - 0.5
        theta = theta0 + span * frac + rng.uniform(-0.02, 0.02)
        if scene.template == "room":
            rho = rng.uniform(1.55, 1.75)
            eye = np.array([rho * np.cos(theta), rho * np.sin(theta), rng.uniform(1.35, 1.55)])
            target = np.array([0.0, 0.0, 0.35]) + rng.uniform(-0.06, 0.06, size=3)
        else:
            rho = rng.uniform(3.0, 3.6)
            eye = np.array([rho * np.cos(theta), rho * np.sin(theta), rng.uniform(0.8, 1.6)])
            target = rng.uniform(-0.1, 0.1, size=3)
        cams.append(look_at_camera(eye, target, width, height, fov_deg=78.0))
    return cams


def holdout_split(n_views):
    """Deterministic (train_ids, eval_ids) view split: last quarter held out."""
    n_eval = max(1, n_views // 4)
    return list(range(n_views - n_eval)), list(range(n_views - n_eval, n_views))


# ---------------------------------------------------------------------------
# image + text I/O
# ---------------------------------------------------------------------------


def write_ppm(path, rgb):
    """Binary P6 with maxval 255; values rounded from [0, 1] floats."""
    arr = np.clip(np.round(np.asarray(rgb) * 255.0), 0, 255).astype(np.uint8)
    h, w, _ = arr.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode())
        fh.write(arr.tobytes())


def read_ppm(path):
    with open(path, "rb") as fh:
        data = fh.read()
    magic, rest = data.split(b"\n", 1)
    if magic != b"P6":
        raise DataError(f"{path}: not a binary PPM")
    dims, rest = rest.split(b"\n", 1)
    _maxval, raw = rest.split(b"\n", 1)
    w, h = (int(x) for x in dims.split())
    arr = np.frombuffer(raw[:w * h * 3], dtype=np.uint8).reshape(h, w, 3)
    return arr.astype(np.float64) / 255.0


def write_pgm(path, labels):
    arr = np.asarray(labels).astype(np.uint8)
    h, w = arr.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode())
        fh.write(arr.tobytes())


def read_pgm(path):
    with open(path, "rb") as fh:
        data = fh.read()
    magic, rest = data.split(b"\n", 1)
    if magic != b"P5":
        raise DataError(f"{path}: not a binary PGM")
    dims, rest = rest.split(b"\n", 1)
    _maxval, raw = rest.split(b"\n", 1)
    w, h = (int(x) for x in dims.split())
    return np.frombuffer(raw[:w * h], dtype=np.uint8).reshape(h, w).astype(np.int32)


def scene_to_text(scene):
    lines = [
        "# semray scene v1",
        f"classes {scene.class_count}",
        f"background {scene.background_class}",
        f"near {scene.t_near!r}",
        f"far {scene.t_far!r}",
        f"seed {scene.seed}",
        f"template {scene.template}",
        f"ambient {scene.ambient!r}",
        "light " + " ".join(repr(float(v)) for v in scene.light_dir),
    ]
    for p in scene.primitives:
        vals = list(p.albedo) + list(p.a) + list(p.b[:1] if p.kind == "sphere" else p.b)
        lines.append(f"{p.kind} {p.class_id} " + " ".join(repr(float(v)) for v in vals))
    return "\n".join(lines) + "\n"


def scene_from_text(text):
    header = {}
    prims = []
    for line in text.splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        tok = line.split()
        if tok[0] in ("plane", "box", "sphere"):
            class_id = int(tok[1])
            vals = [float(v) for v in tok[2:]]
            albedo, a = vals[0:3], vals[3:6]
            b = [vals[6], 0.0, 0.0] if tok[0] == "sphere" else vals[6:9]
            prims.append(Primitive(tok[0], class_id, albedo, a, b))
        else:
            header[tok[0]] = tok[1:]
    try:
        return SceneSpec(
            prims,
            class_count=int(header["classes"][0]),
            background_class=int(header["background"][0]),
            t_near=float(header["near"][0]),
            t_far=float(header["far"][0]),
            seed=int(header["seed"][0]),
            template=header["template"][0],
            light_dir=[float(v) for v in header["light"]],
            ambient=float(header["ambient"][0]),
        )
    except KeyError as exc:
        raise DataError(f"scene file missing header field {exc}") from exc


def cameras_to_text(cams):
    lines = ["# semray cameras v1: idx K(9) R(9) t(3) width height"]
    for i, c in enumerate(cams):
        vals = list(c.K.reshape(-1)) + list(c.R.reshape(-1)) + list(c.t)
        lines.append(f"{i} " + " ".join(repr(float(v)) for v in vals)
                     + f" {c.width} {c.height}")
    return "\n".join(lines) + "\n"


def cameras_from_text(text):
    cams = []
    for line in text.splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        tok = line.split()
        vals = [float(v) for v in tok[1:22]]
        cams.append(Camera(np.array(vals[0:9]).reshape(3, 3),
                           np.array(vals[9:18]).reshape(3, 3),
                           np.array(vals[18:21]),
                           int(tok[22]), int(tok[23])))
    return cams


# ---------------------------------------------------------------------------
# dataset generation and loading
# ---------------------------------------------------------------------------


@dataclass
class SceneData:
    """One scene's views held in memory for training and evaluation.

    Depth maps are not persisted in the dataset files; they are exact and
    recomputable, so ``depth_map`` raycasts them on demand.
    """

    scene_id: str
    spec: SceneSpec
    cameras: list
    rgb: list          # per view (H, W, 3) float in [0, 1]
    sem: list          # per view (H, W) int32

    @property
    def n_views(self):
        return len(self.cameras)

    def depth_map(self, view):
        cam = self.cameras[view]
        _rgb, _sem, depth = raycast_ground_truth(self.spec, cam, cam.height, cam.width)
        return depth


@dataclass
class DatasetBundle:
    train: list
    test: list

    def scene(self, scene_id):
        for s in self.train + self.test:
            if s.scene_id == scene_id:
                return s
        raise DataError(f"unknown scene id {scene_id!r}")


def make_dataset(n_scenes, views_per_scene, height, width, seed, out_dir,
                 class_count=4, template="room", n_test=None):
    """Generate scenes, render all views, write everything under out_dir.

    Returns the manifest path.  Scene ids are disjoint between the train and
    test splits; the whole tree is a pure function of the arguments.
    """
    if n_test is None:
        n_test = max(1, n_scenes // 4) if n_scenes >= 2 else 0
    if n_test >= n_scenes and n_scenes > 1:
        raise ConfigError(f"n_test={n_test} must leave at least one training scene")
    os.makedirs(out_dir, exist_ok=True)
    manifest_lines = []
    for idx in range(n_scenes):
        scene_id = f"scene_{idx:04d}"
        scene_seed = seed * 1000 + idx
        scene = generate_scene(template, class_count, scene_seed)
        cams = scene_cameras(scene, views_per_scene, height, width, scene_seed)
        scene_dir = os.path.join(out_dir, scene_id)
        os.makedirs(scene_dir, exist_ok=True)
        try:
            with open(os.path.join(scene_dir, "scene.txt"), "w") as fh:
                fh.write(scene_to_text(scene))
            with open(os.path.join(scene_dir, "cameras.txt"), "w") as fh:
                fh.write(cameras_to_text(cams))
            for v, cam in enumerate(cams):
                rgb, sem, _depth = raycast_ground_truth(scene, cam, height, width)
                write_ppm(os.path.join(scene_dir, f"rgb_{v:03d}.ppm"), rgb)
                write_pgm(os.path.join(scene_dir, f"sem_{v:03d}.pgm"), sem)
        except OSError as exc:
            raise DataError(f"failed writing scene under {scene_dir}: {exc}") from exc
        split = "test" if idx >= n_scenes - n_test else "train"
        manifest_lines.append(f"{scene_id} {split} {scene_id}")
    manifest_path = os.path.join(out_dir, "manifest.txt")
    with open(manifest_path, "w") as fh:
        fh.write("\n".join(manifest_lines) + "\n")
    return manifest_path


def load_scene_dir(scene_dir, scene_id):
    try:
        with open(os.path.join(scene_dir, "scene.txt")) as fh:
            spec = scene_from_text(fh.read())
        with open(os.path.join(scene_dir, "cameras.txt")) as fh:
            cams = cameras_from_text(fh.read())
    except OSError as exc:
        raise DataError(f"cannot load scene {scene_id!r} from {scene_dir}: {exc}") from exc
    rgb, sem = [], []
    for v in range(len(cams)):
        rgb.append(read_ppm(os.path.join(scene_dir, f"rgb_{v:03d}.ppm")))
        sem.append(read_pgm(os.path.join(scene_dir, f"sem_{v:03d}.pgm")))
        if sem[-1].max() >= spec.class_count:
            raise DataError(f"label {sem[-1].max()} out of range in scene {scene_id!r}")
    return SceneData(scene_id, spec, cams, rgb, sem)


def load_dataset(manifest_path):
    root = os.path.dirname(os.path.abspath(manifest_path))
    train, test = [], []
    try:
        with open(manifest_path) as fh:
            lines = fh.read().splitlines()
    except OSError as exc:
        raise DataError(f"cannot read manifest {manifest_path}: {exc}") from exc
    for line in lines:
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        scene_id, split, rel = line.split()
        data = load_scene_dir(os.path.join(root, rel), scene_id)
        (train if split == "train" else test).append(data)
    if not train and not test:
        raise DataError(f"manifest {manifest_path} lists no scenes")
    return DatasetBundle(train, test)
