"""Procedural desk-scale splat corpus with ground-truth multi-view renders.

Assets are surface-sampled primitive shapes (sphere / box / torus /
two-cluster scene) turned into flattened surface splats with
palette-driven colors. Every asset is fully determined by its recipe's
seed. build_dataset renders the views, applies a save/reload/rerender
PSNR self-consistency gate and writes a JSON manifest.
"""

from __future__ import annotations

import dataclasses
import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, ParseError
from .render import Camera, RenderTarget, look_at_camera, render_views, save_png
from .splat_io import load_native, save_native
from .splats import SplatSet
from .evalbench import psnr

MANIFEST_VERSION = 1
PSNR_GATE_DB = 30.0

FAMILIES = ("sphere", "box", "torus", "two_cluster")

PALETTES = {
    "warm": [(0.86, 0.32, 0.18), (0.93, 0.62, 0.20), (0.82, 0.18, 0.34)],
    "cool": [(0.18, 0.38, 0.80), (0.16, 0.66, 0.72), (0.38, 0.28, 0.72)],
    "earth": [(0.42, 0.30, 0.18), (0.55, 0.48, 0.28), (0.30, 0.42, 0.22)],
    "neon": [(0.95, 0.15, 0.75), (0.15, 0.92, 0.85), (0.85, 0.95, 0.15)],
    "mono": [(0.25, 0.25, 0.28), (0.62, 0.62, 0.66), (0.45, 0.45, 0.50)],
}


@dataclass(frozen=True)
class AssetRecipe:
    name: str
    family: str = "sphere"
    palette: str = "warm"
    n_splats: int = 2048
    jitter: float = 0.01
    seed: int = 0

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ConfigError(f"unknown family {self.family!r}; choose from {FAMILIES}")
        if self.palette not in PALETTES:
            raise ConfigError(f"unknown palette {self.palette!r}; choose from {tuple(PALETTES)}")

    @property
    def caption(self) -> str:
        return f"{self.family} {self.palette}"


@dataclass
class CameraRigSpec:
    n_views: int = 12
    radius: float = 2.8
    resolution: int = 64
    fov_deg: float = 50.0
    elevation_deg: float = 20.0


@dataclass
class AssetEntry:
    asset_id: str
    recipe: AssetRecipe
    caption: str
    splat_path: str
    render_paths: list[str]
    psnr_db: float
    split: str


@dataclass
class DatasetManifest:
    version: int
    created_at: str
    root: str
    rig: CameraRigSpec
    assets: list[AssetEntry]

    def split(self, which: str) -> list[AssetEntry]:
        return [a for a in self.assets if a.split == which]

    def entry(self, asset_id: str) -> AssetEntry:
        for a in self.assets:
            if a.asset_id == asset_id:
                return a
        raise KeyError(f"asset {asset_id!r} not in manifest")


# -- surface sampling -------------------------------------------------------------


def _normal_to_quat(normals: np.ndarray) -> np.ndarray:
    """Quaternions rotating the local +z axis onto each surface normal."""
    z = np.array([0.0, 0.0, 1.0])
    n = normals / np.linalg.norm(normals, axis=1, keepdims=True)
    d = n @ z
    axis = np.cross(np.broadcast_to(z, n.shape), n)
    axis_norm = np.linalg.norm(axis, axis=1, keepdims=True)
    q = np.zeros((n.shape[0], 4))
    ok = axis_norm[:, 0] > 1e-8
    half = 0.5 * np.arccos(np.clip(d[ok], -1.0, 1.0))
    q[ok, 0] = np.cos(half)
    q[ok, 1:] = axis[ok] / axis_norm[ok] * np.sin(half)[:, None]
    q[~ok & (d > 0), 0] = 1.0
    flip = ~ok & (d <= 0)
    q[flip, 1] = 1.0  # 180 degrees about x
    return q


def _sample_surface(family: str, n: int, rng: np.random.Generator):
    """Returns (points, normals, area) for one shape family."""
    if family == "sphere":
        r = 0.9
        v = rng.normal(size=(n, 3))
        nrm = v / np.linalg.norm(v, axis=1, keepdims=True)
        return nrm * r, nrm, 4 * np.pi * r * r
    if family == "box":
        half = np.array([0.72, 0.55, 0.85])
        areas = 4 * np.array([half[1] * half[2], half[0] * half[2], half[0] * half[1]])
        areas = np.repeat(areas, 2)
        face = rng.choice(6, size=n, p=areas / areas.sum())
        uv = rng.uniform(-1, 1, size=(n, 2))
        pts = np.zeros((n, 3))
        nrm = np.zeros((n, 3))
        for f in range(6):
            m = face == f
            ax = f // 2
            sign = 1.0 if f % 2 == 0 else -1.0
            others = [a for a in range(3) if a != ax]
            pts[m, ax] = sign * half[ax]
            pts[m, others[0]] = uv[m, 0] * half[others[0]]
            pts[m, others[1]] = uv[m, 1] * half[others[1]]
            nrm[m, ax] = sign
        return pts, nrm, 2 * float(areas.sum())
    if family == "torus":
        major, minor = 0.65, 0.28
        theta = rng.uniform(0, 2 * np.pi, size=n)
        # rejection-free minor angle with density correction
        phi = rng.uniform(0, 2 * np.pi, size=n)
        accept = rng.uniform(size=n) < (major + minor * np.cos(phi)) / (major + minor)
        while not accept.all():
            bad = ~accept
            phi[bad] = rng.uniform(0, 2 * np.pi, size=bad.sum())
            accept[bad] = rng.uniform(size=bad.sum()) < (major + minor * np.cos(phi[bad])) / (major + minor)
        ring = np.stack([np.cos(theta), np.zeros(n), np.sin(theta)], axis=1)
        nrm = (np.stack([np.cos(theta) * np.cos(phi), np.sin(phi), np.sin(theta) * np.cos(phi)], axis=1))
        pts = ring * major + nrm * minor
        return pts, nrm, 4 * np.pi**2 * major * minor
    if family == "two_cluster":
        r = 0.42
        centers = np.array([[-0.75, 0.0, 0.0], [0.75, 0.1, 0.05]])
        n_a = n // 2
        counts = [n_a, n - n_a]
        pts, nrm = [], []
        for c, cnt in zip(centers, counts):
            v = rng.normal(size=(cnt, 3))
            d = v / np.linalg.norm(v, axis=1, keepdims=True)
            pts.append(c + d * r)
            nrm.append(d)
        return np.concatenate(pts), np.concatenate(nrm), 2 * 4 * np.pi * r * r
    raise ConfigError(f"unknown family {family!r}")


def _palette_colors(recipe: AssetRecipe, pts: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    anchors = np.array(PALETTES[recipe.palette])
    if recipe.family == "two_cluster":
        side = (pts[:, 0] > 0).astype(int)
        base = anchors[side % len(anchors)]
    else:
        # blend along a latitude-like coordinate for smooth banding
        tpos = (pts[:, 1] - pts[:, 1].min()) / (np.ptp(pts[:, 1]) + 1e-9)
        t = tpos * (len(anchors) - 1)
        lo = np.clip(np.floor(t).astype(int), 0, len(anchors) - 2)
        frac = (t - lo)[:, None]
        base = anchors[lo] * (1 - frac) + anchors[lo + 1] * frac
    base = base + rng.normal(0, 0.02, size=base.shape)
    return np.clip(base, 0.0, 1.0)


def gen_asset(recipe: AssetRecipe) -> SplatSet:
    """Deterministic surface-splat asset from a recipe."""
    p_min = 32
    if recipe.n_splats < p_min:
        raise ConfigError(f"n_splats {recipe.n_splats} below grouping minimum {p_min}")
    rng = np.random.default_rng(recipe.seed)
    n = recipe.n_splats
    pts, normals, area = _sample_surface(recipe.family, n, rng)
    pts = pts + rng.normal(0, recipe.jitter, size=pts.shape)

    quat = _normal_to_quat(normals)
    spacing = np.sqrt(area / n)
    tangential = spacing * 1.3
    sigma = np.stack([
        tangential * np.exp(rng.normal(0, 0.12, n)),
        tangential * np.exp(rng.normal(0, 0.12, n)),
        tangential * 0.15 * np.ones(n),
    ], axis=1)
    log_scale = np.log(sigma)
    colors = _palette_colors(recipe, pts, rng)
    opacity = np.clip(0.9 + rng.normal(0, 0.03, n), 0.5, 0.98)
    return SplatSet.from_attributes(pts, quat, log_scale, colors, opacity, asset_id=recipe.name)


def gen_camera_rig(n_views: int, radius: float = 2.8, resolution: int = 64,
                   fov_deg: float = 50.0, elevation_deg: float = 20.0) -> list[Camera]:
    """Deterministic look-at orbit with two alternating elevation rings."""
    if n_views < 1:
        raise ConfigError("need at least one view")
    cams = []
    for i in range(n_views):
        az = 2 * np.pi * i / n_views
        el = 0.0 if n_views == 1 else np.radians(elevation_deg) * (1 if i % 2 == 0 else -1)
        pos = radius * np.array([np.sin(az) * np.cos(el), np.sin(el), np.cos(az) * np.cos(el)])
        cams.append(look_at_camera(pos, (0.0, 0.0, 0.0), fov_deg=fov_deg,
                                   width=resolution, height=resolution))
    return cams


def rig_cameras(rig: CameraRigSpec) -> list[Camera]:
    return gen_camera_rig(rig.n_views, rig.radius, rig.resolution, rig.fov_deg, rig.elevation_deg)


def default_recipes(n_train: int = 8, n_test: int = 2, n_splats: int = 2048,
                    seed: int = 1000) -> tuple[list[AssetRecipe], list[AssetRecipe]]:
    """The desk corpus: a deterministic mix of families and palettes."""
    fams = ["sphere", "box", "torus", "two_cluster"]
    pals = list(PALETTES)
    train, test = [], []
    for i in range(n_train):
        train.append(AssetRecipe(name=f"train_{i:02d}", family=fams[i % len(fams)],
                                 palette=pals[i % len(pals)], n_splats=n_splats, seed=seed + i))
    for j in range(n_test):
        test.append(AssetRecipe(name=f"test_{j:02d}", family=fams[(j + 1) % len(fams)],
                                palette=pals[(j + 2) % len(pals)], n_splats=n_splats,
                                seed=seed + 100 + j))
    return train, test


def build_dataset(recipes: dict[str, list[AssetRecipe]], rig: CameraRigSpec, out_dir,
                  background=(1.0, 1.0, 1.0)) -> DatasetManifest:
    """Generate, render, gate and persist the corpus; returns the manifest.

    `recipes` maps split name ("train"/"test") to recipe lists. Assets
    failing the save/reload/rerender PSNR gate are excluded.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cams = rig_cameras(rig)
    entries: list[AssetEntry] = []
    for split, rs in recipes.items():
        for recipe in rs:
            asset = gen_asset(recipe)
            views = render_views(asset, cams, background)
            splat_path = out / "assets" / f"{recipe.name}.splat"
            save_native(asset, splat_path)
            reloaded = load_native(splat_path)
            re_views = render_views(reloaded, cams, background)
            gate = psnr([v.pixels for v in views], [v.pixels for v in re_views])
            if gate < PSNR_GATE_DB:
                continue
            render_dir = out / "renders" / recipe.name
            render_dir.mkdir(parents=True, exist_ok=True)
            paths = []
            for vi, view in enumerate(views):
                p = render_dir / f"view_{vi:03d}.png"
                save_png(view.pixels, p)
                paths.append(str(p.relative_to(out)))
            entries.append(AssetEntry(
                asset_id=recipe.name, recipe=recipe, caption=recipe.caption,
                splat_path=str(splat_path.relative_to(out)), render_paths=paths,
                psnr_db=float(gate), split=split))
    manifest = DatasetManifest(version=MANIFEST_VERSION,
                               created_at=time.strftime("%Y-%m-%dT%H:%M:%S"),
                               root=str(out), rig=rig, assets=entries)
    save_manifest(manifest, out / "manifest.json")
    return manifest


def save_manifest(m: DatasetManifest, path) -> None:
    doc = {
        "version": m.version,
        "created_at": m.created_at,
        "root": m.root,
        "rig": dataclasses.asdict(m.rig),
        "assets": [
            {
                "asset_id": a.asset_id,
                "recipe": dataclasses.asdict(a.recipe),
                "caption": a.caption,
                "splat_path": a.splat_path,
                "render_paths": a.render_paths,
                "psnr_db": a.psnr_db,
                "split": a.split,
            }
            for a in m.assets
        ],
    }
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True))


def load_manifest(path) -> DatasetManifest:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise ParseError(f"{path}: invalid manifest JSON ({e})") from None
    if doc.get("version") != MANIFEST_VERSION:
        raise ParseError(f"{path}: unsupported manifest version {doc.get('version')}")
    assets = [AssetEntry(asset_id=a["asset_id"], recipe=AssetRecipe(**a["recipe"]),
                         caption=a["caption"], splat_path=a["splat_path"],
                         render_paths=a["render_paths"], psnr_db=a["psnr_db"], split=a["split"])
              for a in doc["assets"]]
    return DatasetManifest(version=doc["version"], created_at=doc["created_at"],
                           root=doc["root"], rig=CameraRigSpec(**doc["rig"]), assets=assets)


def load_asset_from_manifest(m: DatasetManifest, asset_id: str) -> SplatSet:
    entry = m.entry(asset_id)
    return load_native(Path(m.root) / entry.splat_path)


def load_gt_views(m: DatasetManifest, asset_id: str) -> list[np.ndarray]:
    from .render import load_png

    entry = m.entry(asset_id)
    return [load_png(Path(m.root) / p) for p in entry.render_paths]
