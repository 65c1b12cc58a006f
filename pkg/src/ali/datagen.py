"""Procedural multi-illumination scenes with closed-form Blinn-Phong relights.

Scenes are orthographic views (viewer at +z) of a floor plane, tilted slabs
and spheres. Each primitive carries one of five material categories, and each
category has its own albedo texture and specular parameters, so materials are
recognisable from appearance the way real materials are. Images are stored as
8-bit PNG next to a JSON manifest:

    <root>/manifest.json
    <root>/<scene_id>/<light_id>.png
    <root>/<scene_id>/material.png
"""

from __future__ import annotations

import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np
from PIL import Image

from .errors import ConfigurationError, ContractViolation
from .numerics import seed_stream

logger = logging.getLogger(__name__)

DIFFUSE, GLOSSY, SPECULAR, METALLIC, UNCERTAIN = range(5)
CATEGORY_NAMES = ("Diffuse", "Glossy", "Specular", "Metallic", "Uncertain")
VIEWER = np.array([0.0, 0.0, 1.0])
MANIFEST_VERSION = 1
SPLITS = ("train", "test", "zoo")


@dataclass
class MaterialRange:
    spec_strength: Tuple[float, float]
    shininess: Tuple[float, float]


def _default_materials() -> Dict[int, MaterialRange]:
    return {
        DIFFUSE: MaterialRange((0.0, 0.0), (1.0, 1.0)),
        GLOSSY: MaterialRange((0.15, 0.35), (8.0, 32.0)),
        SPECULAR: MaterialRange((0.5, 0.9), (64.0, 200.0)),
        METALLIC: MaterialRange((0.35, 0.7), (16.0, 64.0)),
        UNCERTAIN: MaterialRange((0.0, 0.5), (1.0, 100.0)),
    }


@dataclass
class SceneConfig:
    """Scene-generation settings. Primitive sizes are in pixels at 64x64 and
    scale with ``min(height, width) / 64``."""

    height: int = 64
    width: int = 64
    floor: bool = True
    n_spheres: Tuple[int, int] = (1, 3)
    n_boxes: Tuple[int, int] = (0, 2)
    sphere_radius: Tuple[float, float] = (7.0, 16.0)
    box_size: Tuple[float, float] = (10.0, 26.0)
    box_tilt: float = 0.6
    # floor, objects: sampling weights over the five categories
    floor_category_weights: Tuple[float, ...] = (0.4, 0.2, 0.1, 0.1, 0.2)
    object_category_weights: Tuple[float, ...] = (0.2, 0.2, 0.2, 0.2, 0.2)
    materials: Dict[int, MaterialRange] = field(default_factory=_default_materials)

    def validate(self) -> None:
        if self.height < 8 or self.width < 8:
            raise ConfigurationError(f"image size must be at least 8x8, got {self.height}x{self.width}")
        if not self.floor and self.n_spheres[1] <= 0 and self.n_boxes[1] <= 0:
            raise ConfigurationError("empty primitive set: no floor, spheres or boxes")
        for lo, hi in (self.n_spheres, self.n_boxes):
            if lo < 0 or hi < lo:
                raise ConfigurationError(f"bad primitive count range ({lo}, {hi})")
        for name in ("floor_category_weights", "object_category_weights"):
            w = np.asarray(getattr(self, name), dtype=float)
            if w.shape != (5,) or (w < 0).any() or w.sum() <= 0:
                raise ConfigurationError(f"{name} must be 5 non-negative weights")
        for cat, rng in self.materials.items():
            if cat in (SPECULAR, METALLIC) and rng.spec_strength[0] <= 0:
                raise ConfigurationError(f"{CATEGORY_NAMES[cat]} needs spec_strength > 0")
            if rng.shininess[0] < 1:
                raise ConfigurationError("shininess must be >= 1")

    @classmethod
    def from_dict(cls, d: dict) -> "SceneConfig":
        d = dict(d)
        if "materials" in d:
            d["materials"] = {
                int(k): v if isinstance(v, MaterialRange) else MaterialRange(tuple(v["spec_strength"]), tuple(v["shininess"]))
                for k, v in d["materials"].items()
            }
        for key in ("n_spheres", "n_boxes", "sphere_radius", "box_size",
                    "floor_category_weights", "object_category_weights"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["materials"] = {str(k): asdict(v) for k, v in self.materials.items()}
        return out


@dataclass
class SceneSpec:
    scene_id: str
    albedo: np.ndarray  # H x W x 3
    normals: np.ndarray  # H x W x 3, unit length
    spec_strength: np.ndarray  # H x W
    shininess: np.ndarray  # H x W
    material_map: np.ndarray  # H x W, uint8 in 0..4

    @property
    def shape(self) -> Tuple[int, int]:
        return self.material_map.shape

    def validate(self) -> None:
        H, W = self.material_map.shape
        if self.albedo.shape != (H, W, 3) or self.normals.shape != (H, W, 3):
            raise ContractViolation("albedo/normals do not share the material map's HxW")
        if self.spec_strength.shape != (H, W) or self.shininess.shape != (H, W):
            raise ContractViolation("spec_strength/shininess do not share the material map's HxW")
        if np.abs(np.linalg.norm(self.normals, axis=-1) - 1.0).max() > 1e-6:
            raise ContractViolation("normals are not unit length")
        if self.material_map.min() < 0 or self.material_map.max() > 4:
            raise ContractViolation("material_map values outside 0..4")
        hard = np.isin(self.material_map, (SPECULAR, METALLIC))
        if hard.any() and self.spec_strength[hard].min() <= 0:
            raise ContractViolation("Specular/Metallic pixels need spec_strength > 0")
        if self.albedo.min() < 0 or self.albedo.max() > 1:
            raise ContractViolation("albedo outside [0, 1]")
        if self.shininess.min() < 1:
            raise ContractViolation("shininess must be >= 1")


@dataclass
class LightSpec:
    light_id: str
    direction: np.ndarray  # unit vector toward the light
    intensity: float
    color: np.ndarray  # RGB in [0, 1]
    ambient: float

    def validate(self) -> None:
        d = np.asarray(self.direction, dtype=float)
        if d.shape != (3,) or abs(np.linalg.norm(d) - 1.0) > 1e-6:
            raise ContractViolation("light direction must be a unit 3-vector")
        for name in ("intensity", "ambient"):
            v = getattr(self, name)
            if not np.isfinite(v) or v < 0:
                raise ContractViolation(f"light {name} must be finite and non-negative")
        if self.ambient > 1:
            raise ContractViolation("ambient must lie in [0, 1]")
        c = np.asarray(self.color, dtype=float)
        if c.shape != (3,) or c.min() < 0 or c.max() > 1:
            raise ContractViolation("light color must be RGB in [0, 1]")

    def to_dict(self) -> dict:
        return {
            "light_id": self.light_id,
            "direction": [float(x) for x in self.direction],
            "intensity": float(self.intensity),
            "color": [float(x) for x in self.color],
            "ambient": float(self.ambient),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "LightSpec":
        return cls(d["light_id"], np.asarray(d["direction"], dtype=float), float(d["intensity"]),
                   np.asarray(d["color"], dtype=float), float(d["ambient"]))


@dataclass
class MultiIllumSample:
    scene_id: str
    light_id: str
    image: np.ndarray  # H x W x 3 in [0, 1]


# ---------------------------------------------------------------------------
# scene synthesis


def _category_albedo(cat: int, rng: np.random.Generator, yy: np.ndarray, xx: np.ndarray, scale: float) -> np.ndarray:
    """Per-category albedo texture over the pixel grid ``(yy, xx)``."""
    H, W = yy.shape

    def saturated():
        hue = rng.uniform(0, 1)
        rgb = np.clip(np.abs(((hue * 6 + np.array([0.0, 4.0, 2.0])) % 6) - 3) - 1, 0, 1)
        return 0.25 + 0.6 * rgb

    if cat == DIFFUSE:
        base = saturated()
        period = rng.uniform(12, 20) * scale
        angle = rng.uniform(0, np.pi)
        phase = (np.cos(angle) * xx + np.sin(angle) * yy) / period
        stripe = (np.floor(phase) % 2)[..., None]
        return np.clip(base * (0.75 + 0.25 * stripe), 0, 1)
    if cat == GLOSSY:
        return np.broadcast_to(saturated(), (H, W, 3)).copy()
    if cat == SPECULAR:
        return np.broadcast_to(rng.uniform(0.05, 0.2) + rng.uniform(0, 0.05, 3), (H, W, 3)).copy()
    if cat == METALLIC:
        grey = rng.uniform(0.4, 0.65)
        return np.broadcast_to(grey * np.array([0.95, 0.97, 1.0]), (H, W, 3)).copy()
    a, b = saturated(), rng.uniform(0.1, 0.9, 3)
    period = rng.uniform(10, 16) * scale
    checker = ((np.floor(xx / period) + np.floor(yy / period)) % 2)[..., None]
    return a * checker + b * (1 - checker)


def synth_scene(seed: int, cfg: Optional[SceneConfig] = None, scene_id: Optional[str] = None) -> SceneSpec:
    """Generate one scene; deterministic in ``(seed, cfg)``."""
    cfg = cfg or SceneConfig()
    cfg.validate()
    rng = seed_stream(seed, "scene")
    H, W = cfg.height, cfg.width
    scale = min(H, W) / 64.0
    yy, xx = np.mgrid[0:H, 0:W].astype(np.float64) + 0.5

    albedo = np.full((H, W, 3), 0.5)
    normals = np.zeros((H, W, 3))
    normals[..., 2] = 1.0
    spec = np.zeros((H, W))
    shin = np.ones((H, W))
    mat = np.zeros((H, W), dtype=np.uint8)
    covered = np.zeros((H, W), dtype=bool)

    def paint(mask, cat, n=None):
        mr = cfg.materials[cat]
        albedo[mask] = _category_albedo(cat, rng, yy, xx, scale)[mask]
        spec[mask] = rng.uniform(*mr.spec_strength)
        shin[mask] = rng.uniform(*mr.shininess)
        mat[mask] = cat
        if n is not None:
            normals[mask] = n[mask]
        covered[mask] = True

    fw = np.asarray(cfg.floor_category_weights, float)
    ow = np.asarray(cfg.object_category_weights, float)
    if cfg.floor:
        paint(np.ones((H, W), dtype=bool), int(rng.choice(5, p=fw / fw.sum())))

    for _ in range(int(rng.integers(cfg.n_boxes[0], cfg.n_boxes[1] + 1))):
        bw, bh = rng.uniform(*cfg.box_size, size=2) * scale
        x0, y0 = rng.uniform(0, W - bw), rng.uniform(0, H - bh)
        mask = (xx >= x0) & (xx < x0 + bw) & (yy >= y0) & (yy < y0 + bh)
        tilt = rng.uniform(-cfg.box_tilt, cfg.box_tilt, size=2)
        n = np.array([tilt[0], tilt[1], 1.0])
        n = np.broadcast_to(n / np.linalg.norm(n), (H, W, 3))
        paint(mask, int(rng.choice(5, p=ow / ow.sum())), n)

    for _ in range(int(rng.integers(cfg.n_spheres[0], cfg.n_spheres[1] + 1))):
        r = rng.uniform(*cfg.sphere_radius) * scale
        cx, cy = rng.uniform(0, W), rng.uniform(0, H)
        u = (xx - cx) / r
        v = -(yy - cy) / r  # image rows grow downward, normal y points up
        rho2 = u * u + v * v
        mask = rho2 < 1.0
        n = np.stack([u, v, np.sqrt(np.clip(1.0 - rho2, 0, None))], axis=-1)
        n /= np.linalg.norm(n, axis=-1, keepdims=True).clip(1e-12)
        paint(mask, int(rng.choice(5, p=ow / ow.sum())), n)

    if not covered.all():
        # no floor: empty pixels become a dark diffuse backdrop
        empty = ~covered
        albedo[empty] = 0.05
        mat[empty] = DIFFUSE

    scene = SceneSpec(
        scene_id=scene_id if scene_id is not None else f"scene-{seed}",
        albedo=albedo,
        normals=normals / np.linalg.norm(normals, axis=-1, keepdims=True),
        spec_strength=spec,
        shininess=shin,
        material_map=mat,
    )
    scene.validate()
    return scene


# ---------------------------------------------------------------------------
# rendering


def shade(scene: SceneSpec, light: LightSpec) -> np.ndarray:
    """Blinn-Phong radiance before clamping, float64 H x W x 3."""
    if scene.albedo.shape[:2] != scene.normals.shape[:2]:
        raise ContractViolation("scene arrays disagree in shape")
    d = np.asarray(light.direction, dtype=np.float64)
    color = np.asarray(light.color, dtype=np.float64)
    h = d + VIEWER
    hn = np.linalg.norm(h)
    h = h / hn if hn > 1e-12 else np.zeros(3)
    n = scene.normals
    ndl = np.clip(n @ d, 0.0, None)[..., None]
    ndh = np.clip(n @ h, 0.0, None)
    diffuse = scene.albedo * color * (light.ambient + light.intensity * ndl)
    specular = (scene.spec_strength * ndh ** scene.shininess)[..., None] * color * light.intensity
    return diffuse + specular


def render(scene: SceneSpec, light: LightSpec) -> MultiIllumSample:
    scene.validate()
    light.validate()
    return MultiIllumSample(scene.scene_id, light.light_id, np.clip(shade(scene, light), 0.0, 1.0))


def make_lights(n_lights: int, seed: int) -> List[LightSpec]:
    """A shared light rig: azimuths spread around the scene, elevations
    30-75 degrees, mild color tints."""
    rng = seed_stream(seed, "lights")
    az0 = rng.uniform(0, 2 * np.pi)
    lights = []
    for k in range(n_lights):
        az = az0 + 2 * np.pi * k / n_lights + rng.uniform(-0.2, 0.2)
        el = np.deg2rad(rng.uniform(30, 75))
        d = np.array([np.cos(el) * np.cos(az), np.cos(el) * np.sin(az), np.sin(el)])
        tint = rng.uniform(0.0, 0.3, 3)
        lights.append(LightSpec(
            light_id=f"L{k:02d}",
            direction=d / np.linalg.norm(d),
            intensity=float(rng.uniform(0.6, 1.1)),
            color=1.0 - tint + tint.min(),
            ambient=float(rng.uniform(0.05, 0.25)),
        ))
    return lights


# ---------------------------------------------------------------------------
# manifest + files


@dataclass
class SceneEntry:
    scene_id: str
    light_ids: List[str]
    images: Dict[str, str]  # light_id -> path relative to root
    material: str


@dataclass
class DatasetManifest:
    root: str
    seed: int
    split: str
    scenes: List[SceneEntry]
    lights: List[LightSpec]
    height: int = 64
    width: int = 64
    version: int = MANIFEST_VERSION

    def light(self, light_id: str) -> LightSpec:
        for l in self.lights:
            if l.light_id == light_id:
                return l
        raise KeyError(light_id)

    @property
    def light_ids(self) -> List[str]:
        return [l.light_id for l in self.lights]

    def samples(self) -> Iterator[Tuple[str, str]]:
        for s in self.scenes:
            for lid in s.light_ids:
                yield s.scene_id, lid

    def __len__(self) -> int:
        return sum(len(s.light_ids) for s in self.scenes)

    def scene(self, scene_id: str) -> SceneEntry:
        for s in self.scenes:
            if s.scene_id == scene_id:
                return s
        raise KeyError(scene_id)

    def image_path(self, scene_id: str, light_id: str) -> Path:
        return Path(self.root) / self.scene(scene_id).images[light_id]

    def load_image(self, scene_id: str, light_id: str) -> np.ndarray:
        return load_png(self.image_path(scene_id, light_id))

    def load_material(self, scene_id: str) -> np.ndarray:
        return np.asarray(Image.open(Path(self.root) / self.scene(scene_id).material), dtype=np.uint8)

    def subset(self, scene_ids: Sequence[str]) -> "DatasetManifest":
        keep = set(scene_ids)
        return DatasetManifest(self.root, self.seed, self.split, [s for s in self.scenes if s.scene_id in keep],
                               list(self.lights), self.height, self.width, self.version)

    def validate(self, check_files: bool = True) -> None:
        seen = set()
        for s in self.scenes:
            if len(s.light_ids) < 2:
                raise ContractViolation(f"scene {s.scene_id} lists fewer than 2 lightings")
            for lid in s.light_ids:
                if (s.scene_id, lid) in seen:
                    raise ContractViolation(f"duplicate sample ({s.scene_id}, {lid})")
                seen.add((s.scene_id, lid))
                if lid not in s.images:
                    raise ContractViolation(f"scene {s.scene_id} has no image for {lid}")
            if check_files:
                for rel in list(s.images.values()) + [s.material]:
                    if not (Path(self.root) / rel).is_file():
                        raise ContractViolation(f"missing file {rel}")
        known = set(self.light_ids)
        for s in self.scenes:
            if not set(s.light_ids) <= known:
                raise ContractViolation(f"scene {s.scene_id} references unknown lights")

    def to_dict(self) -> dict:
        return {
            "version": self.version,
            "seed": self.seed,
            "split": self.split,
            "height": self.height,
            "width": self.width,
            "lights": [l.to_dict() for l in self.lights],
            "scenes": [asdict(s) for s in self.scenes],
        }

    def save(self) -> Path:
        path = Path(self.root) / "manifest.json"
        path.write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n")
        return path

    @classmethod
    def load(cls, root) -> "DatasetManifest":
        root = Path(root)
        if root.is_file():
            root = root.parent
        d = json.loads((root / "manifest.json").read_text())
        return cls(
            root=str(root),
            seed=int(d["seed"]),
            split=d["split"],
            scenes=[SceneEntry(**s) for s in d["scenes"]],
            lights=[LightSpec.from_dict(l) for l in d["lights"]],
            height=int(d.get("height", 64)),
            width=int(d.get("width", 64)),
            version=int(d["version"]),
        )

    def __eq__(self, other) -> bool:
        return isinstance(other, DatasetManifest) and self.root == other.root and self.to_dict() == other.to_dict()


def to_uint8(image: np.ndarray) -> np.ndarray:
    return np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)


def save_png(path, image: np.ndarray) -> None:
    arr = image if image.dtype == np.uint8 else to_uint8(image)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(arr).save(path, format="PNG", optimize=False)


def load_png(path) -> np.ndarray:
    return np.asarray(Image.open(path).convert("RGB"), dtype=np.float32) / 255.0


def make_dataset(n_scenes: int, n_lights: int, seed: int, out_dir, cfg: Optional[SceneConfig] = None,
                 split: str = "train", jobs: int = 1) -> DatasetManifest:
    """Render ``n_scenes`` scenes under a shared rig of ``n_lights`` lights.

    The rig depends on ``seed`` only, so train/test/zoo splits generated with
    the same seed share light ids; scene ids carry the split name and never
    collide across splits.
    """
    if n_scenes < 1 or n_lights < 2:
        raise ConfigurationError("need n_scenes >= 1 and n_lights >= 2")
    if split not in SPLITS:
        raise ConfigurationError(f"split must be one of {SPLITS}")
    cfg = cfg or SceneConfig()
    cfg.validate()
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create dataset directory {out}: {exc}") from exc
    if not os.access(out, os.W_OK):
        raise OSError(f"dataset directory {out} is not writable")
    lights = make_lights(n_lights, seed)
    split_offset = SPLITS.index(split)

    def build(idx: int) -> SceneEntry:
        scene_id = f"{split}-{idx:04d}"
        scene_seed = int(seed_stream(seed, "scene-seed", split_offset, idx).integers(0, 2**62))
        scene = synth_scene(scene_seed, cfg, scene_id)
        sdir = out / scene_id
        sdir.mkdir(exist_ok=True)
        images = {}
        for light in lights:
            rel = f"{scene_id}/{light.light_id}.png"
            save_png(out / rel, render(scene, light).image)
            images[light.light_id] = rel
        Image.fromarray(scene.material_map.astype(np.uint8)).save(sdir / "material.png", format="PNG")
        return SceneEntry(scene_id, [l.light_id for l in lights], images, f"{scene_id}/material.png")

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            entries = list(pool.map(build, range(n_scenes)))
    else:
        entries = [build(i) for i in range(n_scenes)]
    manifest = DatasetManifest(str(out), int(seed), split, entries, lights, cfg.height, cfg.width)
    manifest.validate()
    manifest.save()
    logger.info("wrote %d images for %d scenes to %s", len(manifest), n_scenes, out)
    return manifest


def load_arrays(manifest: DatasetManifest) -> Tuple[np.ndarray, np.ndarray]:
    """Stack a manifest into ``images[S, Lt, H, W, 3]`` (float32) and
    ``materials[S, H, W]`` (uint8). All scenes must list the same lights."""
    lids = manifest.scenes[0].light_ids
    imgs = np.stack([np.stack([manifest.load_image(s.scene_id, lid) for lid in lids]) for s in manifest.scenes])
    mats = np.stack([manifest.load_material(s.scene_id) for s in manifest.scenes])
    return imgs, mats


def dominant_category(material_map: np.ndarray) -> int:
    return int(np.bincount(material_map.reshape(-1), minlength=5).argmax())
