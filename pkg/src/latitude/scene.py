"""Procedural scene with analytic density and colour, ground-truth renderer, dataset I/O.

The oracle renderer intersects every ray with every primitive analytically,
splits the ray at the fixed march step and at every surface crossing, and
composites the resulting piecewise-constant medium exactly.  It shares no
code with the neural renderer.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import CameraIntrinsics, Pose, canonical_quat, look_at

DEFAULT_BOUNDS = ((-10.0, -10.0, 0.0), (10.0, 10.0, 8.0))


class DatasetError(Exception):
    pass


class MissingFile(DatasetError, FileNotFoundError):
    def __init__(self, path):
        super().__init__(f"missing file: {path}")
        self.path = str(path)


class ManifestError(DatasetError):
    pass


class PoseParseError(DatasetError):
    def __init__(self, path, lineno, msg):
        super().__init__(f"{path}:{lineno}: bad pose ({msg})")
        self.lineno = lineno


@dataclass
class Sphere:
    center: tuple
    radius: float
    rgb: tuple
    density: float
    kind: str = "sphere"


@dataclass
class Box:
    min: tuple
    max: tuple
    rgb: tuple
    density: float
    kind: str = "box"


@dataclass
class SyntheticScene:
    primitives: list
    background: tuple = (0.5, 0.5, 0.5)
    bounds: tuple = DEFAULT_BOUNDS
    tints: np.ndarray = field(default_factory=lambda: np.ones((1, 3)))

    def __post_init__(self):
        self.tints = np.asarray(self.tints, dtype=np.float64).reshape(-1, 3)
        if np.any(self.tints < 0.7) or np.any(self.tints > 1.3):
            raise ValueError("tints must lie in [0.7, 1.3]")
        lo, hi = np.asarray(self.bounds[0]), np.asarray(self.bounds[1])
        for p in self.primitives:
            if p.density <= 0:
                raise ValueError("primitive densities must be positive")
            if p.kind == "sphere":
                pmin = np.asarray(p.center) - p.radius
                pmax = np.asarray(p.center) + p.radius
            else:
                pmin, pmax = np.asarray(p.min), np.asarray(p.max)
            if np.any(pmin < lo - 1e-9) or np.any(pmax > hi + 1e-9):
                raise ValueError(f"primitive {p} leaves the scene bounds")

    @property
    def bounds_array(self):
        return np.asarray(self.bounds[0], float), np.asarray(self.bounds[1], float)

    @property
    def diameter(self) -> float:
        lo, hi = self.bounds_array
        return float(np.linalg.norm(hi - lo))

    def tint(self, index: int | None) -> np.ndarray:
        return np.ones(3) if index is None else self.tints[index]

    # ----------------------------------------------------------- analytic field

    def density_color(self, points: np.ndarray, tint_index: int | None = None):
        """Density and colour at ``(n, 3)`` points; overlaps mix by density."""
        points = np.asarray(points, dtype=np.float64)
        sigma = np.zeros(len(points))
        weighted = np.zeros((len(points), 3))
        for p in self.primitives:
            if p.kind == "sphere":
                inside = ((points - np.asarray(p.center)) ** 2).sum(-1) <= p.radius**2
            else:
                inside = np.all((points >= np.asarray(p.min)) & (points <= np.asarray(p.max)), axis=-1)
            sigma += inside * p.density
            weighted += (inside * p.density)[:, None] * np.asarray(p.rgb)
        color = np.where(sigma[:, None] > 0, weighted / np.maximum(sigma, 1e-300)[:, None], 0.0)
        return sigma, color * self.tint(tint_index)

    def occupied(self, points) -> np.ndarray:
        return self.density_color(points)[0] > 0

    def surface_crossings(self, origins, dirs) -> np.ndarray:
        """Entry/exit distances for every primitive, ``(n, 2 * n_primitives)``; NaN on miss."""
        out = []
        for p in self.primitives:
            if p.kind == "sphere":
                oc = origins - np.asarray(p.center)
                b = (oc * dirs).sum(-1)
                c = (oc**2).sum(-1) - p.radius**2
                disc = b * b - c
                root = np.sqrt(np.where(disc > 0, disc, np.nan))
                out += [-b - root, -b + root]
            else:
                t0, t1 = _slabs(origins, dirs, p.min, p.max)
                ok = t1 > t0
                out += [np.where(ok, t0, np.nan), np.where(ok, t1, np.nan)]
        return np.stack(out, axis=1) if out else np.zeros((len(origins), 0))

    # ------------------------------------------------------------ serialization

    def to_dict(self) -> dict:
        prims = []
        for p in self.primitives:
            d = dict(p.__dict__)
            prims.append({k: list(v) if isinstance(v, tuple) else v for k, v in d.items()})
        return dict(
            primitives=prims,
            background=list(self.background),
            bounds=[list(self.bounds[0]), list(self.bounds[1])],
            tints=self.tints.tolist(),
        )

    @classmethod
    def from_dict(cls, d: dict) -> SyntheticScene:
        prims = []
        for p in d["primitives"]:
            if p["kind"] == "sphere":
                prims.append(Sphere(tuple(p["center"]), p["radius"], tuple(p["rgb"]), p["density"]))
            elif p["kind"] == "box":
                prims.append(Box(tuple(p["min"]), tuple(p["max"]), tuple(p["rgb"]), p["density"]))
            else:
                raise ValueError(f"unknown primitive kind {p['kind']!r}")
        return cls(prims, tuple(d["background"]), (tuple(d["bounds"][0]), tuple(d["bounds"][1])), np.array(d["tints"]))


def _slabs(origins, dirs, bmin, bmax):
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
        a = (np.asarray(bmin) - origins) * inv
        b = (np.asarray(bmax) - origins) * inv
    t0 = np.nanmax(np.minimum(a, b), axis=-1)
    t1 = np.nanmin(np.maximum(a, b), axis=-1)
    return t0, t1


@dataclass
class SceneConfig:
    n_objects: int = 8
    ground_tiles: int = 2  # tiles per side
    density: float = 8.0
    tint_spread: float = 0.1
    background: tuple = (0.5, 0.5, 0.5)


def _random_color(rng):
    # saturated colours, kept below 0.75 so tinting stays within [0, 1]
    hue = rng.random()
    base = np.array([abs(hue * 6 - 3) - 1, 2 - abs(hue * 6 - 2), 2 - abs(hue * 6 - 4)])
    base = np.clip(base, 0, 1)
    return tuple(float(v) for v in 0.1 + 0.62 * base * rng.uniform(0.7, 1.0))


def make_scene(cfg: SceneConfig, n_images: int, rng: np.random.Generator) -> SyntheticScene:
    (x0, y0, z0), (x1, y1, z1) = DEFAULT_BOUNDS
    prims = []
    n = cfg.ground_tiles
    xs = np.linspace(x0, x1, n + 1)
    ys = np.linspace(y0, y1, n + 1)
    for i in range(n):
        for j in range(n):
            prims.append(Box((xs[i], ys[j], z0), (xs[i + 1], ys[j + 1], z0 + 0.5), _random_color(rng), cfg.density))
    placed = []
    while len(placed) < cfg.n_objects:
        c = rng.uniform(-6.5, 6.5, size=2)
        size = rng.uniform(1.0, 2.2)
        if any(np.linalg.norm(c - q) < size + s + 0.5 for q, s in placed):
            continue
        placed.append((c, size))
        if len(placed) % 2:
            h = rng.uniform(1.5, 5.0)
            prims.append(Box((c[0] - size, c[1] - size, 0.5), (c[0] + size, c[1] + size, 0.5 + h), _random_color(rng), cfg.density))
        else:
            prims.append(Sphere((float(c[0]), float(c[1]), 0.5 + size), size, _random_color(rng), cfg.density))
    tints = 1.0 + rng.uniform(-cfg.tint_spread, cfg.tint_spread, size=(n_images, 3))
    return SyntheticScene(prims, tuple(cfg.background), DEFAULT_BOUNDS, tints)


# -------------------------------------------------------------------- oracle


def oracle_render_rays(scene: SyntheticScene, origins, dirs, step_size: float = 0.05, tint_index=None):
    if step_size <= 0:
        raise ValueError("step_size must be positive")
    origins = np.asarray(origins, dtype=np.float64)
    dirs = np.asarray(dirs, dtype=np.float64)
    lo, hi = scene.bounds_array
    near, far = _slabs(origins, dirs, lo, hi)
    near = np.maximum(near, 0.0)
    hit = far > near
    far = np.where(hit, far, near)
    n = len(origins)
    span = float(np.max(far - near)) if n else 0.0
    m = int(math.ceil(span / step_size)) + 1
    grid = near[:, None] + step_size * np.arange(m)[None, :]
    cuts = scene.surface_crossings(origins, dirs)
    t = np.concatenate([grid, cuts, far[:, None]], axis=1)
    t = np.where(np.isnan(t), far[:, None], t)
    t = np.clip(t, near[:, None], far[:, None])
    t.sort(axis=1)
    color = np.zeros((n, 3))
    trans = np.ones(n)
    bg = np.asarray(scene.background, dtype=np.float64)
    for j in range(t.shape[1] - 1):
        a, b = t[:, j], t[:, j + 1]
        seg = b - a
        active = seg > 0
        if not np.any(active):
            continue
        mid = origins[active] + (0.5 * (a + b))[active, None] * dirs[active]
        sig, col = scene.density_color(mid, tint_index)
        alpha = 1.0 - np.exp(-sig * seg[active])
        color[active] += (trans[active] * alpha)[:, None] * col
        trans[active] *= 1.0 - alpha
    return color + trans[:, None] * bg


def oracle_composite(colors, sigmas, depths, far, background):
    """Front-to-back accumulation over ``(n, N)`` samples (independent of the renderer)."""
    colors = np.asarray(colors, dtype=np.float64)
    n, N = np.shape(sigmas)
    out = np.zeros((n, 3))
    trans = np.ones(n)
    for i in range(N):
        end = depths[:, i + 1] if i + 1 < N else far
        alpha = 1.0 - np.exp(-sigmas[:, i] * (end - depths[:, i]))
        out += (trans * alpha)[:, None] * colors[:, i]
        trans = trans * (1.0 - alpha)
    return out + trans[:, None] * np.asarray(background, dtype=np.float64)


def camera_rays(pose: Pose, K: CameraIntrinsics):
    vv, uu = np.mgrid[0:K.height, 0:K.width]
    cam = np.stack([(uu.ravel() + 0.5 - K.cx) / K.fx, (vv.ravel() + 0.5 - K.cy) / K.fy, np.ones(uu.size)], axis=1)
    dirs = cam @ pose.R.T
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    return np.broadcast_to(pose.translation, dirs.shape).copy(), dirs


def oracle_render(pose: Pose, K: CameraIntrinsics, scene: SyntheticScene, step_size: float = 0.05, tint_index=None):
    origins, dirs = camera_rays(pose, K)
    rgb = oracle_render_rays(scene, origins, dirs, step_size, tint_index)
    return rgb.reshape(K.height, K.width, 3)


# ---------------------------------------------------------------- trajectory


@dataclass
class TrajectoryConfig:
    radius: float = 8.0
    altitude: float = 13.0
    radius_wobble: float = 0.1
    target_height: float = 1.0
    yaw_jitter_deg: float = 3.0
    max_yaw_step_deg: float = 10.0


def yaw_of(pose: Pose) -> float:
    fwd = pose.R[:, 2]
    return math.atan2(fwd[1], fwd[0])


def generate_trajectory(scene: SyntheticScene, n_poses: int, rng: np.random.Generator, cfg: TrajectoryConfig = TrajectoryConfig()):
    """Closed loop at constant altitude, looking down towards the scene centre."""
    if n_poses < 1:
        raise ValueError("n_poses must be >= 1")
    lo, hi = scene.bounds_array
    center = 0.5 * (lo + hi)
    phase = rng.uniform(0, 2 * math.pi, size=2)
    poses = []
    for i in range(n_poses):
        th = 2 * math.pi * i / n_poses
        r = cfg.radius * (1 + cfg.radius_wobble * math.sin(2 * th + phase[0]))
        eye = np.array([center[0] + r * math.cos(th), center[1] + r * math.sin(th), cfg.altitude])
        target = np.array([center[0], center[1], cfg.target_height])
        pose = look_at(eye, target)
        # smooth yaw offset about the vertical through the camera
        yaw = math.radians(cfg.yaw_jitter_deg) * math.sin(3 * th + phase[1])
        c, s = math.cos(yaw), math.sin(yaw)
        Rz = np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]])
        p = Pose.from_matrix(Rz @ pose.R, eye)
        poses.append(Pose(canonical_quat(p.rotation), eye))
    yaws = np.unwrap([yaw_of(p) for p in poses])
    if n_poses > 1 and np.max(np.abs(np.diff(yaws))) > math.radians(cfg.max_yaw_step_deg):
        raise ValueError(f"{n_poses} poses are too few for a yaw step bound of {cfg.max_yaw_step_deg} deg")
    return poses


# ------------------------------------------------------------------- dataset


@dataclass
class Frame:
    file: str
    pose: Pose
    tint: int
    split: str


@dataclass
class Dataset:
    intrinsics: CameraIntrinsics
    frames: list
    root: Path | None = None
    images: list = field(default_factory=list)
    seed: int | None = None

    def split(self, name: str) -> list[int]:
        return [i for i, f in enumerate(self.frames) if f.split == name]

    def image(self, i: int) -> np.ndarray:
        return self.images[i]


def _frame_line(frame: Frame) -> str:
    pose = ", ".join(repr(float(v)) for v in frame.pose.to_vector())
    return json.dumps({"file": frame.file, "pose": "@@", "tint": frame.tint, "split": frame.split}).replace('"@@"', f"[{pose}]")


def write_dataset(path, dataset: Dataset, extra: dict | None = None) -> None:
    from .renderer import save_png

    path = Path(path)
    (path / "images").mkdir(parents=True, exist_ok=True)
    for frame, img in zip(dataset.frames, dataset.images):
        save_png(path / frame.file, img, seed=dataset.seed)
    header = {"intrinsics": dataset.intrinsics.to_dict(), "seed": dataset.seed}
    if extra:
        header.update(extra)
    lines = ["{"]
    for k, v in header.items():
        lines.append(f"  {json.dumps(k)}: {json.dumps(v)},")
    lines.append('  "frames": [')
    body = [f"    {_frame_line(f)}" for f in dataset.frames]
    lines.append(",\n".join(body))
    lines.append("  ]")
    lines.append("}")
    (path / "manifest.json").write_text("\n".join(lines) + "\n")


def read_dataset(path, load_images: bool = True) -> Dataset:
    from .renderer import load_png

    path = Path(path)
    manifest = path / "manifest.json"
    if not manifest.exists():
        raise MissingFile(manifest)
    text = manifest.read_text()
    try:
        data = json.loads(text)
    except json.JSONDecodeError as e:
        raise ManifestError(f"{manifest}:{e.lineno}: {e.msg}") from e
    for key in ("intrinsics", "frames"):
        if key not in data:
            raise ManifestError(f"{manifest}: missing key {key!r}")
    try:
        K = CameraIntrinsics(**data["intrinsics"])
    except (TypeError, ValueError) as e:
        raise ManifestError(f"{manifest}: bad intrinsics ({e})") from e
    pose_lines = [i + 1 for i, line in enumerate(text.splitlines()) if '"pose"' in line]
    frames = []
    for i, fr in enumerate(data["frames"]):
        lineno = pose_lines[i] if i < len(pose_lines) else 0
        try:
            vec = [float(v) for v in fr["pose"]]
            pose = Pose.from_vector(vec)
            if not np.all(np.isfinite(vec)):
                raise ValueError("non-finite value")
        except (TypeError, ValueError, KeyError) as e:
            raise PoseParseError(manifest, lineno, str(e)) from e
        if fr.get("split") not in ("train", "test"):
            raise ManifestError(f"{manifest}:{lineno}: split must be train or test")
        frames.append(Frame(fr["file"], pose, int(fr["tint"]), fr["split"]))
    for fr in frames:
        if not (path / fr.file).exists():
            raise MissingFile(path / fr.file)
    ds = Dataset(K, frames, path, [], data.get("seed"))
    if load_images:
        ds.images = [load_png(path / fr.file) for fr in frames]
    return ds


def save_scene(path, scene: SyntheticScene, seed: int | None = None) -> None:
    body = scene.to_dict()
    if seed is not None:
        body = {"seed": seed, **body}
    Path(path).write_text(json.dumps(body, indent=1))


def load_scene(path) -> SyntheticScene:
    path = Path(path)
    if not path.exists():
        raise MissingFile(path)
    return SyntheticScene.from_dict(json.loads(path.read_text()))


def flight_poses(scene: SyntheticScene, n_train: int, n_test: int, rng: np.random.Generator,
                 cfg: TrajectoryConfig = TrajectoryConfig()):
    """Training loop plus a test loop flown separately.

    The test poses are every k-th pose of a second loop with its own wobble and
    yaw phases, so they are not interleaved with the training views.
    """
    train = generate_trajectory(scene, n_train, rng, cfg)
    if n_test == 0:
        return train, []
    stride = max(1, n_train // n_test)
    second = generate_trajectory(scene, n_test * stride, rng, cfg)
    return train, second[stride // 2::stride][:n_test]


def render_dataset(scene: SyntheticScene, poses, K: CameraIntrinsics, test_every: int = 6, step_size: float = 0.1,
                   seed: int | None = None, splits=None) -> Dataset:
    """Oracle-render every pose with its own tint.

    ``splits`` gives each frame's split; by default every ``test_every``-th
    frame goes to the test split.
    """
    frames, images = [], []
    for i, pose in enumerate(poses):
        if splits is not None:
            split = splits[i]
        else:
            split = "test" if test_every and i % test_every == test_every - 1 else "train"
        frames.append(Frame(f"images/{i:04d}.png", pose, i, split))
        images.append(oracle_render(pose, K, scene, step_size, tint_index=i))
    return Dataset(K, frames, None, images, seed)
