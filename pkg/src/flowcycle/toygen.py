"""Procedural two-domain toy video corpus with exact semantics and flow.

Scenes are rigid shapes (circle / square / triangle) translating over a
static background while the camera pans.  The same scene distribution is
rendered in two styles:

* domain S: flat per-class colors;
* domain T: per-class colors modulated by an advected sinusoidal plaid,
  plus additive Gaussian noise and a multiplicative vignette.

Motion model: an object with velocity ``v`` and camera pan ``c`` (both
px/frame, camera velocity) has screen displacement ``v - c`` per frame;
background displacement is ``-c``.  Stored flow is backward (maps frame t
onto frame t-1), i.e. the negated displacement, so background pixels carry
exactly ``c`` and pixels of object k carry ``c - v_k``.

Class ids: 0 background, 1 circle, 2 square, 3 triangle.
"""

from __future__ import annotations

import json
import shutil
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import core
from .errors import DataError

NUM_CLASSES = 4
SHAPES = ("circle", "square", "triangle")
SHAPE_CLASS_ID = {"circle": 1, "square": 2, "triangle": 3}
MAX_DISPLACEMENT = 4.0
MANIFEST_NAME = "manifest.json"
FORMAT_VERSION = 1


@dataclass
class SceneObject:
    shape: str
    class_id: int
    size_px: float
    position_t0: tuple[float, float]  # (x, y) screen coords at t=0
    velocity: tuple[float, float]     # world velocity, px/frame

    def displacement(self, camera_pan: tuple[float, float]) -> np.ndarray:
        """Screen displacement per frame."""
        return np.array(self.velocity, dtype=np.float64) - np.asarray(camera_pan)


@dataclass
class SceneSpec:
    seed: int
    objects: list[SceneObject]
    camera_pan: tuple[float, float]   # camera velocity, px/frame
    length: int
    canvas: tuple[int, int]           # (H, W)

    def __post_init__(self) -> None:
        if not 1 <= len(self.objects) <= 6:
            raise ValueError("scene must contain 1..6 objects")
        if self.length < 3:
            raise ValueError("clip length must be >= 3")
        pan = np.asarray(self.camera_pan, dtype=np.float64)
        if np.linalg.norm(pan) > MAX_DISPLACEMENT:
            raise ValueError("camera pan exceeds displacement bound")
        for obj in self.objects:
            if np.linalg.norm(obj.displacement(self.camera_pan)) > MAX_DISPLACEMENT + 1e-9:
                raise ValueError("object displacement exceeds bound")
            if SHAPE_CLASS_ID.get(obj.shape) != obj.class_id:
                raise ValueError(f"class id {obj.class_id} does not match shape {obj.shape!r}")


@dataclass
class StylePalette:
    domain_tag: str
    base_colors: np.ndarray           # (4, 3) in [-1, 1]
    texture_amplitude: float = 0.0
    noise_sigma: float = 0.0
    vignette_strength: float = 0.0

    def __post_init__(self) -> None:
        self.base_colors = np.asarray(self.base_colors, dtype=np.float64)
        if self.base_colors.shape != (NUM_CLASSES, 3):
            raise ValueError("palette needs one RGB color per class")
        if np.abs(self.base_colors).max() > 1.0:
            raise ValueError("palette colors must lie in [-1, 1]")
        for i in range(NUM_CLASSES):
            for j in range(i + 1, NUM_CLASSES):
                d = np.linalg.norm(self.base_colors[i] - self.base_colors[j])
                if d < 0.5:
                    raise ValueError(
                        f"palette colors for classes {i} and {j} are too close ({d:.3f} < 0.5)"
                    )


def default_palette(domain_tag: str, texture_amplitude: float | None = None,
                    noise_sigma: float | None = None,
                    vignette_strength: float | None = None) -> StylePalette:
    if domain_tag == "S":
        return StylePalette(
            domain_tag="S",
            base_colors=np.array([
                [-0.70, -0.70, -0.70],
                [0.80, -0.20, -0.20],
                [-0.20, 0.70, -0.20],
                [-0.10, -0.10, 0.80],
            ]),
        )
    if domain_tag == "T":
        return StylePalette(
            domain_tag="T",
            base_colors=np.array([
                [-0.35, -0.25, 0.05],
                [0.60, 0.35, -0.35],
                [-0.45, 0.50, 0.55],
                [0.55, -0.45, 0.60],
            ]),
            texture_amplitude=0.30 if texture_amplitude is None else texture_amplitude,
            noise_sigma=0.02 if noise_sigma is None else noise_sigma,
            vignette_strength=0.15 if vignette_strength is None else vignette_strength,
        )
    raise ValueError(f"unknown domain tag {domain_tag!r}")


def sample_scene(seed: int, canvas: tuple[int, int] = (64, 128), length: int = 8) -> SceneSpec:
    """Deterministically draw a scene layout from ``seed``."""
    if length < 3:
        raise ValueError("clip length must be >= 3")
    h, w = canvas
    rng = np.random.default_rng(seed)
    pan = rng.uniform(-1.0, 1.0, size=2)
    camera_pan = (float(pan[0]), float(pan[1]))
    n_objects = int(rng.integers(1, 7))
    objects = []
    for _ in range(n_objects):
        shape = SHAPES[int(rng.integers(0, 3))]
        extent = min(h, w)
        size = float(rng.uniform(min(10.0, extent * 0.3), extent * 0.45))
        margin = size * 0.5 + 1.0
        pos = (float(rng.uniform(margin, w - margin)), float(rng.uniform(margin, h - margin)))
        vel = rng.uniform(-2.5, 2.5, size=2)
        disp = vel - np.asarray(camera_pan)
        norm = np.linalg.norm(disp)
        if norm > MAX_DISPLACEMENT:
            disp = disp * (MAX_DISPLACEMENT / norm) * 0.999
            vel = np.asarray(camera_pan) + disp
        objects.append(SceneObject(
            shape=shape,
            class_id=SHAPE_CLASS_ID[shape],
            size_px=size,
            position_t0=pos,
            velocity=(float(vel[0]), float(vel[1])),
        ))
    return SceneSpec(seed=seed, objects=objects, camera_pan=camera_pan,
                     length=length, canvas=(h, w))


def _object_position(scene: SceneSpec, k: int, t: int) -> np.ndarray:
    obj = scene.objects[k]
    disp = obj.displacement(scene.camera_pan)
    return np.asarray(obj.position_t0, dtype=np.float64) + t * disp


def _inside(obj: SceneObject, cx: float, cy: float, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    half = obj.size_px / 2.0
    dx = xs - cx
    dy = ys - cy
    if obj.shape == "circle":
        return dx * dx + dy * dy <= half * half
    if obj.shape == "square":
        return np.maximum(np.abs(dx), np.abs(dy)) <= half
    # upward triangle: apex at (cx, cy - half), base at cy + half
    rel = (dy + half) / obj.size_px  # 0 at apex row, 1 at base row
    return (rel >= 0.0) & (rel <= 1.0) & (np.abs(dx) <= half * rel)


def render_object_map(scene: SceneSpec, t: int) -> np.ndarray:
    """Topmost object index per pixel at frame t; -1 for background."""
    h, w = scene.canvas
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    out = np.full((h, w), -1, dtype=np.int64)
    for k, obj in enumerate(scene.objects):  # later objects draw on top
        cx, cy = _object_position(scene, k, t)
        out[_inside(obj, cx, cy, xs, ys)] = k
    return out


def semantic_map(scene: SceneSpec, t: int, object_map: np.ndarray | None = None) -> np.ndarray:
    if object_map is None:
        object_map = render_object_map(scene, t)
    class_of = np.array([0] + [o.class_id for o in scene.objects], dtype=np.int64)
    return class_of[object_map + 1]


def flow_between(scene: SceneSpec, t_dst: int, t_src: int,
                 object_map: np.ndarray | None = None) -> np.ndarray:
    """Backward flow on frame ``t_dst``'s grid sampling frame ``t_src``.

    ``f(p) = position_at_t_src(point at p) - p``; for the standard stored
    flows use ``t_src = t_dst - 1``, for temporally flipped clips
    ``t_src = t_dst + 1``.
    """
    if object_map is None:
        object_map = render_object_map(scene, t_dst)
    pan = np.asarray(scene.camera_pan, dtype=np.float64)
    disp = np.stack([-pan] + [o.displacement(scene.camera_pan) for o in scene.objects])
    per_pixel = disp[object_map + 1]  # (H, W, 2) displacement per frame
    return ((t_src - t_dst) * per_pixel).astype(np.float32)


def occlusion_free_mask(scene: SceneSpec, t: int,
                        object_maps: list[np.ndarray] | None = None) -> np.ndarray:
    """Pixels of frame ``t`` whose backward correspondence into frame
    ``t - 1`` lands strictly on the same object (all bilinear taps agree)
    and inside the canvas.
    """
    h, w = scene.canvas
    obj_cur = object_maps[t] if object_maps else render_object_map(scene, t)
    obj_prev = object_maps[t - 1] if object_maps else render_object_map(scene, t - 1)
    flow = flow_between(scene, t, t - 1, object_map=obj_cur)
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    qx = xs + flow[..., 0]
    qy = ys + flow[..., 1]
    ok = (qx >= 0) & (qx <= w - 1) & (qy >= 0) & (qy <= h - 1)
    x0 = np.clip(np.floor(qx).astype(np.int64), 0, w - 1)
    y0 = np.clip(np.floor(qy).astype(np.int64), 0, h - 1)
    # taps with zero bilinear weight (exact integer coordinate) are not checked
    x1 = np.clip(x0 + (qx > x0), 0, w - 1)
    y1 = np.clip(y0 + (qy > y0), 0, h - 1)
    for yy, xx in ((y0, x0), (y0, x1), (y1, x0), (y1, x1)):
        ok &= obj_prev[yy, xx] == obj_cur
    return ok


def _plaid(xs: np.ndarray, ys: np.ndarray, index: int) -> np.ndarray:
    """Two crossed sinusoids in [-1, 1]; orientation/wavelength vary by index."""
    ang = 0.35 + 0.9 * index
    l1 = 9.0 + 2.0 * ((index * 3) % 5)
    l2 = 13.0 + 2.0 * ((index * 5) % 4)
    k1 = 2.0 * np.pi / l1
    k2 = 2.0 * np.pi / l2
    u = np.cos(ang) * xs + np.sin(ang) * ys
    v = -np.sin(ang) * xs + np.cos(ang) * ys
    return 0.5 * (np.sin(k1 * u + 0.7 * index) + np.sin(k2 * v + 1.3 * index))


def render_clip(scene: SceneSpec, palette: StylePalette) -> core.VideoClip:
    """Render frames, semantic maps, and exact backward flow fields."""
    h, w = scene.canvas
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    pan = np.asarray(scene.camera_pan, dtype=np.float64)
    disp = np.stack([-pan] + [o.displacement(scene.camera_pan) for o in scene.objects])

    vignette = None
    if palette.vignette_strength > 0.0:
        ry = (ys - (h - 1) / 2.0) / ((h - 1) / 2.0)
        rx = (xs - (w - 1) / 2.0) / ((w - 1) / 2.0)
        vignette = 1.0 - palette.vignette_strength * (rx * rx + ry * ry) / 2.0

    frames: list[core.Frame] = []
    semantics: list[np.ndarray] = []
    flows: list[core.FlowField] = []
    object_maps = [render_object_map(scene, t) for t in range(scene.length)]
    for t in range(scene.length):
        obj_map = object_maps[t]
        sem = semantic_map(scene, t, obj_map)
        img = palette.base_colors[sem]
        if palette.texture_amplitude > 0.0:
            tex = np.empty((h, w), dtype=np.float64)
            # background material coordinates drift with -pan per frame
            region = obj_map == -1
            tex[region] = _plaid(xs[region] - t * disp[0, 0], ys[region] - t * disp[0, 1], 0)
            for k in range(len(scene.objects)):
                region = obj_map == k
                if not region.any():
                    continue
                mx = xs[region] - t * disp[k + 1, 0]
                my = ys[region] - t * disp[k + 1, 1]
                tex[region] = _plaid(mx, my, k + 1)
            img = img + palette.texture_amplitude * tex[..., None]
        if vignette is not None:
            img = (img + 1.0) * 0.5 * vignette[..., None] * 2.0 - 1.0
        if palette.noise_sigma > 0.0:
            noise_rng = np.random.default_rng([abs(int(scene.seed)), 9176, t])
            img = img + noise_rng.normal(0.0, palette.noise_sigma, size=img.shape)
        frames.append(core.Frame(np.clip(img, -1.0, 1.0).astype(np.float32)))
        semantics.append(sem)
        if t >= 1:
            flows.append(core.FlowField(flow_between(scene, t, t - 1, object_map=obj_map)))
    return core.VideoClip(frames=frames, semantics=semantics, flows=flows,
                          domain_tag=palette.domain_tag)


def scene_to_dict(scene: SceneSpec) -> dict:
    return {
        "format_version": FORMAT_VERSION,
        "seed": scene.seed,
        "canvas": list(scene.canvas),
        "length": scene.length,
        "camera_pan": list(scene.camera_pan),
        "objects": [
            {
                "shape": o.shape,
                "class_id": o.class_id,
                "size_px": o.size_px,
                "position_t0": list(o.position_t0),
                "velocity": list(o.velocity),
            }
            for o in scene.objects
        ],
    }


def scene_from_dict(d: dict) -> SceneSpec:
    return SceneSpec(
        seed=d["seed"],
        objects=[
            SceneObject(
                shape=o["shape"],
                class_id=o["class_id"],
                size_px=o["size_px"],
                position_t0=tuple(o["position_t0"]),
                velocity=tuple(o["velocity"]),
            )
            for o in d["objects"]
        ],
        camera_pan=tuple(d["camera_pan"]),
        length=d["length"],
        canvas=tuple(d["canvas"]),
    )


def palette_to_dict(p: StylePalette) -> dict:
    return {
        "domain_tag": p.domain_tag,
        "base_colors": p.base_colors.tolist(),
        "texture_amplitude": p.texture_amplitude,
        "noise_sigma": p.noise_sigma,
        "vignette_strength": p.vignette_strength,
    }


def palette_from_dict(d: dict) -> StylePalette:
    return StylePalette(
        domain_tag=d["domain_tag"],
        base_colors=np.asarray(d["base_colors"]),
        texture_amplitude=d["texture_amplitude"],
        noise_sigma=d["noise_sigma"],
        vignette_strength=d["vignette_strength"],
    )


@dataclass
class CorpusConfig:
    out_dir: str
    train_scenes_s: int = 200
    train_scenes_t: int = 200
    eval_scenes: int = 20
    canvas: tuple[int, int] = (64, 128)
    clip_length: int = 8
    generator_seed: int = 0
    overwrite: bool = False
    palette_s: StylePalette | None = None
    palette_t: StylePalette | None = None


@dataclass
class CorpusManifest:
    generator_seed: int
    canvas: tuple[int, int]
    clip_length: int
    train_s: list[str] = field(default_factory=list)
    train_t: list[str] = field(default_factory=list)
    eval_paired: list[dict] = field(default_factory=list)
    palette_s: StylePalette | None = None
    palette_t: StylePalette | None = None
    format_version: int = FORMAT_VERSION

    def train_seed_sets(self) -> tuple[set[int], set[int], set[int]]:
        s = {e["scene_seed"] for e in self.eval_paired}
        return set(self._seeds_of(self.train_s)), set(self._seeds_of(self.train_t)), s

    @staticmethod
    def _seeds_of(paths: list[str]) -> list[int]:
        return [int(Path(p).name.split("_")[1]) for p in paths]


def _write_scene_clip(scene: SceneSpec, palette: StylePalette, clip_dir: Path) -> None:
    clip = render_clip(scene, palette)
    core.save_clip(clip, clip_dir)
    with open(clip_dir / "scene.json", "w", encoding="utf-8") as f:
        json.dump(scene_to_dict(scene), f, sort_keys=True, indent=1)


def build_corpus(cfg: CorpusConfig) -> CorpusManifest:
    """Write a full corpus to disk; byte-deterministic given the seed."""
    out = Path(cfg.out_dir)
    manifest_path = out / MANIFEST_NAME
    if manifest_path.exists():
        if not cfg.overwrite:
            raise DataError(f"corpus already exists at {out} (use overwrite to replace)")
        for sub in ("train_s", "train_t", "eval"):
            shutil.rmtree(out / sub, ignore_errors=True)
        manifest_path.unlink()
    out.mkdir(parents=True, exist_ok=True)

    palette_s = cfg.palette_s or default_palette("S")
    palette_t = cfg.palette_t or default_palette("T")
    base = cfg.generator_seed * 1_000_003
    manifest = CorpusManifest(
        generator_seed=cfg.generator_seed,
        canvas=cfg.canvas,
        clip_length=cfg.clip_length,
        palette_s=palette_s,
        palette_t=palette_t,
    )

    idx = 0
    for _ in range(cfg.train_scenes_s):
        seed = base + idx
        scene = sample_scene(seed, cfg.canvas, cfg.clip_length)
        rel = f"train_s/scene_{seed}_s"
        _write_scene_clip(scene, palette_s, out / rel)
        manifest.train_s.append(rel)
        idx += 1
    for _ in range(cfg.train_scenes_t):
        seed = base + idx
        scene = sample_scene(seed, cfg.canvas, cfg.clip_length)
        rel = f"train_t/scene_{seed}_t"
        _write_scene_clip(scene, palette_t, out / rel)
        manifest.train_t.append(rel)
        idx += 1
    for _ in range(cfg.eval_scenes):
        seed = base + idx
        scene = sample_scene(seed, cfg.canvas, cfg.clip_length)
        rel_s = f"eval/scene_{seed}_s"
        rel_t = f"eval/scene_{seed}_t"
        _write_scene_clip(scene, palette_s, out / rel_s)
        _write_scene_clip(scene, palette_t, out / rel_t)
        manifest.eval_paired.append({"scene_seed": seed, "source": rel_s, "target": rel_t})
        idx += 1

    with open(manifest_path, "w", encoding="utf-8") as f:
        json.dump(
            {
                "format_version": manifest.format_version,
                "generator_seed": manifest.generator_seed,
                "canvas": list(manifest.canvas),
                "clip_length": manifest.clip_length,
                "train_s": manifest.train_s,
                "train_t": manifest.train_t,
                "eval_paired": manifest.eval_paired,
                "palette_s": palette_to_dict(palette_s),
                "palette_t": palette_to_dict(palette_t),
            },
            f,
            sort_keys=True,
            indent=1,
        )
    return manifest


def load_manifest(corpus_dir: str | Path) -> CorpusManifest:
    path = Path(corpus_dir) / MANIFEST_NAME
    if not path.exists():
        raise DataError(f"no corpus manifest at {path}")
    with open(path, encoding="utf-8") as f:
        d = json.load(f)
    return CorpusManifest(
        generator_seed=d["generator_seed"],
        canvas=tuple(d["canvas"]),
        clip_length=d["clip_length"],
        train_s=d["train_s"],
        train_t=d["train_t"],
        eval_paired=d["eval_paired"],
        palette_s=palette_from_dict(d["palette_s"]),
        palette_t=palette_from_dict(d["palette_t"]),
        format_version=d["format_version"],
    )


class Corpus:
    """Read access to a corpus directory, with a per-clip cache."""

    def __init__(self, corpus_dir: str | Path):
        self.root = Path(corpus_dir)
        self.manifest = load_manifest(corpus_dir)
        self._clips: dict[str, core.VideoClip] = {}
        self._scenes: dict[str, SceneSpec] = {}

    def clip(self, rel_path: str, domain_tag: str) -> core.VideoClip:
        if rel_path not in self._clips:
            self._clips[rel_path] = core.load_clip(self.root / rel_path, domain_tag)
        return self._clips[rel_path]

    def scene(self, rel_path: str) -> SceneSpec:
        if rel_path not in self._scenes:
            with open(self.root / rel_path / "scene.json", encoding="utf-8") as f:
                self._scenes[rel_path] = scene_from_dict(json.load(f))
        return self._scenes[rel_path]

    def train_clip(self, domain: str, index: int) -> tuple[core.VideoClip, SceneSpec]:
        paths = self.manifest.train_s if domain == "S" else self.manifest.train_t
        rel = paths[index]
        return self.clip(rel, domain), self.scene(rel)

    def num_train(self, domain: str) -> int:
        return len(self.manifest.train_s if domain == "S" else self.manifest.train_t)
