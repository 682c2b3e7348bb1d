"""Synthetic orthomosaic scenes with planted star-shaped objects.

Scenes imitate the parts of an aerial mosaic this pipeline cares about: a
textured background (coarse value noise, bilinearly upsampled), a smooth
multiplicative illumination gradient, and bright star polygons planted at
known centers with a minimum separation.  Background tops out well below
where object brightness starts, so a plain threshold detector can find
every object; the planted truth is saved alongside in pixel and world
coordinates for oracle replay and counting evaluation.

All randomness flows from one seeded generator, so a config reproduces
its scene bit for bit.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from matplotlib.path import Path as MplPath

from .errors import ConfigError, DataError
from .georaster import GeoTransform, format_worldfile, pixel_to_world, write_raster

WORLD_X0 = 600000.0
WORLD_Y0 = 9950000.0

BG_RANGE = (40.0, 110.0)
STAR_FILL_RANGE = (170.0, 230.0)
STAR_TEXTURE = 10.0
GRADIENT_RANGE = (0.9, 1.1)
NOISE_CELL = 64
ARM_RANGE = (6, 14)
INNER_RATIO_RANGE = (0.45, 0.7)
PLACEMENT_TRIES_PER_OBJECT = 200


class InfeasiblePlacement(ConfigError):
    """The requested object count cannot be placed at the given spacing."""


@dataclass(frozen=True)
class SceneConfig:
    """Parameters for one synthetic scene.

    Attributes:
        width: raster width in pixels.
        height: raster height in pixels.
        gsd: ground sample distance in meters per pixel.
        n_objects: how many stars to plant.
        seed: generator seed.
        radius_min: smallest outer star radius in pixels.
        radius_max: largest outer star radius in pixels.
        min_gap: minimum center-to-center distance in pixels.
        world_x0: world x of the top-left pixel center.
        world_y0: world y of the top-left pixel center.
    """

    width: int
    height: int
    gsd: float = 0.06
    n_objects: int = 0
    seed: int = 0
    radius_min: float = 10.0
    radius_max: float = 18.0
    min_gap: float = 40.0
    world_x0: float = WORLD_X0
    world_y0: float = WORLD_Y0

    def __post_init__(self) -> None:
        if self.width < 1 or self.height < 1:
            raise ConfigError(f"scene size must be positive, got {self.width}x{self.height}")
        if self.gsd <= 0.0:
            raise ConfigError(f"gsd must be positive, got {self.gsd}")
        if self.n_objects < 0:
            raise ConfigError(f"object count must be >= 0, got {self.n_objects}")
        if not 2.0 <= self.radius_min <= self.radius_max:
            raise ConfigError(
                f"bad radius range [{self.radius_min}, {self.radius_max}]"
            )
        if self.min_gap < 0.0:
            raise ConfigError(f"min_gap must be >= 0, got {self.min_gap}")

    def transform(self) -> GeoTransform:
        return GeoTransform(
            a=self.gsd, d=0.0, b=0.0, e=-self.gsd, c=self.world_x0, f=self.world_y0
        )


@dataclass(frozen=True)
class SceneTruth:
    """Planted object centers in pixel and world coordinates."""

    centers_px: np.ndarray  # (n, 2) continuous pixel coords
    radii_px: np.ndarray  # (n,)
    centers_world: np.ndarray  # (n, 2)

    def boxes(self) -> np.ndarray:
        """Axis-aligned truth boxes, center plus/minus radius."""
        c = self.centers_px
        r = self.radii_px[:, None]
        return np.concatenate([c - r, c + r], axis=1)


def _value_noise(rng: np.random.Generator, h: int, w: int, cell: int) -> np.ndarray:
    """Coarse uniform grid bilinearly upsampled to (h, w), values in [0, 1]."""
    gh = h // cell + 2
    gw = w // cell + 2
    grid = rng.uniform(0.0, 1.0, size=(gh, gw)).astype(np.float32)
    ys = np.arange(h, dtype=np.float32) / cell
    xs = np.arange(w, dtype=np.float32) / cell
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]
    g00 = grid[np.ix_(y0, x0)]
    g01 = grid[np.ix_(y0, x0 + 1)]
    g10 = grid[np.ix_(y0 + 1, x0)]
    g11 = grid[np.ix_(y0 + 1, x0 + 1)]
    return (
        g00 * (1 - fy) * (1 - fx)
        + g01 * (1 - fy) * fx
        + g10 * fy * (1 - fx)
        + g11 * fy * fx
    )


def _star_vertices(
    rng: np.random.Generator, cx: float, cy: float, radius: float
) -> np.ndarray:
    arms = int(rng.integers(ARM_RANGE[0], ARM_RANGE[1] + 1))
    inner = radius * float(rng.uniform(*INNER_RATIO_RANGE))
    rot = float(rng.uniform(0.0, 2.0 * np.pi))
    angles = rot + np.arange(2 * arms) * (np.pi / arms)
    radii = np.where(np.arange(2 * arms) % 2 == 0, radius, inner)
    return np.stack(
        [cx + radii * np.cos(angles), cy + radii * np.sin(angles)], axis=1
    )


def _paint_star(
    img: np.ndarray,
    rng: np.random.Generator,
    cx: float,
    cy: float,
    radius: float,
) -> None:
    h, w = img.shape
    verts = _star_vertices(rng, cx, cy, radius)
    fill = float(rng.uniform(*STAR_FILL_RANGE))
    x0 = max(0, int(np.floor(cx - radius)))
    y0 = max(0, int(np.floor(cy - radius)))
    x1 = min(w, int(np.ceil(cx + radius)) + 1)
    y1 = min(h, int(np.ceil(cy + radius)) + 1)
    if x1 <= x0 or y1 <= y0:
        return
    xs = np.arange(x0, x1, dtype=np.float64) + 0.5
    ys = np.arange(y0, y1, dtype=np.float64) + 0.5
    gx, gy = np.meshgrid(xs, ys)
    inside = (
        MplPath(verts)
        .contains_points(np.stack([gx.ravel(), gy.ravel()], axis=1))
        .reshape(gy.shape)
    )
    if not inside.any():
        return
    texture = rng.uniform(-STAR_TEXTURE, STAR_TEXTURE, size=int(inside.sum()))
    patch = img[y0:y1, x0:x1]
    patch[inside] = fill + texture.astype(np.float32)


def _place_centers(
    rng: np.random.Generator, cfg: SceneConfig
) -> tuple[np.ndarray, np.ndarray]:
    radii = rng.uniform(cfg.radius_min, cfg.radius_max, size=cfg.n_objects)
    margin = cfg.radius_max + 2.0
    if cfg.n_objects and (
        cfg.width <= 2 * margin or cfg.height <= 2 * margin
    ):
        raise InfeasiblePlacement(
            f"scene {cfg.width}x{cfg.height} too small for radius {cfg.radius_max}"
        )
    centers = np.zeros((cfg.n_objects, 2), dtype=np.float64)
    placed = 0
    tries = PLACEMENT_TRIES_PER_OBJECT * max(1, cfg.n_objects)
    for _ in range(tries):
        if placed == cfg.n_objects:
            break
        cx = float(rng.uniform(margin, cfg.width - margin))
        cy = float(rng.uniform(margin, cfg.height - margin))
        if placed:
            gaps = np.hypot(
                centers[:placed, 0] - cx, centers[:placed, 1] - cy
            )
            if float(gaps.min()) < cfg.min_gap:
                continue
        centers[placed] = (cx, cy)
        placed += 1
    if placed < cfg.n_objects:
        raise InfeasiblePlacement(
            f"placed only {placed} of {cfg.n_objects} objects at gap {cfg.min_gap}"
        )
    return centers, radii


def plan_truth(cfg: SceneConfig) -> SceneTruth:
    """Place objects without rendering; identical layout to ``generate``."""
    rng = np.random.default_rng([cfg.seed, 2])
    centers, radii = _place_centers(rng, cfg)
    transform = cfg.transform()
    world = np.array(
        [pixel_to_world(transform, cx - 0.5, cy - 0.5) for cx, cy in centers],
        dtype=np.float64,
    ).reshape(-1, 2)
    return SceneTruth(centers_px=centers, radii_px=radii, centers_world=world)


def generate(cfg: SceneConfig) -> tuple[np.ndarray, SceneTruth]:
    """Render a scene and its planted truth.

    Rendering, placement, painting and lighting each draw from their own
    seed stream, so the planted layout matches ``plan_truth`` exactly.

    Returns:
        ``(pixels, truth)`` where pixels is ``(h, w, 3)`` uint8 with equal
        channels, so the luminance of a pixel is its stored value.
    """
    truth = plan_truth(cfg)
    centers, radii = truth.centers_px, truth.radii_px
    rng_bg = np.random.default_rng([cfg.seed, 1])
    lo, hi = BG_RANGE
    img = lo + (hi - lo) * _value_noise(rng_bg, cfg.height, cfg.width, NOISE_CELL)
    rng = np.random.default_rng([cfg.seed, 3])
    for i in range(cfg.n_objects):
        _paint_star(img, rng, centers[i, 0], centers[i, 1], float(radii[i]))
    # smooth multiplicative illumination along a random direction
    rng = np.random.default_rng([cfg.seed, 4])
    theta = float(rng.uniform(0.0, 2.0 * np.pi))
    gx = np.cos(theta)
    gy = np.sin(theta)
    xs = np.arange(cfg.width, dtype=np.float32) / max(1, cfg.width - 1 or 1)
    ys = np.arange(cfg.height, dtype=np.float32) / max(1, cfg.height - 1 or 1)
    proj = gx * xs[None, :] + gy * ys[:, None]
    span = proj.max() - proj.min()
    t = (proj - proj.min()) / (span if span > 0 else 1.0)
    g_lo, g_hi = GRADIENT_RANGE
    img = img * (g_lo + (g_hi - g_lo) * t)
    pixels = np.clip(np.rint(img), 0, 255).astype(np.uint8)
    pixels = np.repeat(pixels[:, :, None], 3, axis=2)
    return pixels, truth


TRUTH_COLUMNS = ("px", "py", "radius_px", "x", "y")


def write_truth_csv(path: str | Path, truth: SceneTruth) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(TRUTH_COLUMNS)
        for i in range(truth.centers_px.shape[0]):
            writer.writerow(
                [
                    f"{truth.centers_px[i, 0]:.10g}",
                    f"{truth.centers_px[i, 1]:.10g}",
                    f"{truth.radii_px[i]:.10g}",
                    f"{truth.centers_world[i, 0]:.10g}",
                    f"{truth.centers_world[i, 1]:.10g}",
                ]
            )


def read_truth_csv(path: str | Path) -> SceneTruth:
    """Read a planted-truth table back into arrays."""
    try:
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            if reader.fieldnames is None or not set(TRUTH_COLUMNS) <= set(
                reader.fieldnames
            ):
                raise DataError(
                    f"{path}: expected columns {','.join(TRUTH_COLUMNS)}"
                )
            px, rad, wxy = [], [], []
            for row in reader:
                try:
                    px.append((float(row["px"]), float(row["py"])))
                    rad.append(float(row["radius_px"]))
                    wxy.append((float(row["x"]), float(row["y"])))
                except (TypeError, ValueError) as exc:
                    raise DataError(f"{path}: bad row {row!r}") from exc
    except OSError as exc:
        raise DataError(f"cannot read truth file {path}: {exc}") from exc
    return SceneTruth(
        centers_px=np.asarray(px, dtype=np.float64).reshape(-1, 2),
        radii_px=np.asarray(rad, dtype=np.float64),
        centers_world=np.asarray(wxy, dtype=np.float64).reshape(-1, 2),
    )


def write_truth_geojson(path: str | Path, truth: SceneTruth) -> None:
    feats = []
    for i in range(truth.centers_world.shape[0]):
        feats.append(
            {
                "type": "Feature",
                "geometry": {
                    "type": "Point",
                    "coordinates": [
                        float(truth.centers_world[i, 0]),
                        float(truth.centers_world[i, 1]),
                    ],
                },
                "properties": {"radius_px": float(truth.radii_px[i])},
            }
        )
    with open(path, "w") as fh:
        json.dump({"type": "FeatureCollection", "features": feats}, fh)
        fh.write("\n")


def write_scene(out_dir: str | Path, name: str, cfg: SceneConfig) -> dict:
    """Generate and save a scene: image, worldfile, truth, and manifest.

    Returns:
        The manifest dict that was written to ``<name>_scene.json``.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    pixels, truth = generate(cfg)
    image_path = out / f"{name}.png"
    write_raster(image_path, pixels)
    with open(out / f"{name}.pgw", "w") as fh:
        fh.write(format_worldfile(cfg.transform()))
    write_truth_csv(out / f"{name}_truth.csv", truth)
    write_truth_geojson(out / f"{name}_truth.geojson", truth)
    manifest = {
        "image": image_path.name,
        "worldfile": f"{name}.pgw",
        "truth_csv": f"{name}_truth.csv",
        "truth_geojson": f"{name}_truth.geojson",
        "width": cfg.width,
        "height": cfg.height,
        "gsd": cfg.gsd,
        "objects": cfg.n_objects,
        "seed": cfg.seed,
        "radius_min": cfg.radius_min,
        "radius_max": cfg.radius_max,
        "min_gap": cfg.min_gap,
        "world_x0": cfg.world_x0,
        "world_y0": cfg.world_y0,
    }
    with open(out / f"{name}_scene.json", "w") as fh:
        json.dump(manifest, fh, indent=2)
        fh.write("\n")
    return manifest
