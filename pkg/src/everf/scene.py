"""Analytic synthetic scenes with exact ground truth.

Scenes are unions of constant-density spheres and boxes inside an
axis-aligned bounding box.  Ground-truth images are rendered with the very
same discretized rendering equation the model uses, only at much finer
quadrature, so reconstruction error isolates the learning stack rather
than geometry modeling.

Aleatoric factors are injected as per-view Gaussian pixel noise inside a
mask; epistemic factors as view-coverage gaps (restricting the camera arc)
or as transient rectangles that differ between training views.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
import yaml

from .render import compute_weights


@dataclass
class Primitive:
    shape: str            # "sphere" | "box"
    center: np.ndarray    # (3,)
    size: np.ndarray      # sphere: (1,) radius; box: (3,) half-extents
    density: float
    albedo: np.ndarray    # (3,) in [0,1]

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=np.float64)
        self.size = np.atleast_1d(np.asarray(self.size, dtype=np.float64))
        self.albedo = np.asarray(self.albedo, dtype=np.float64)
        if self.shape not in ("sphere", "box"):
            raise ValueError(f"unknown primitive shape {self.shape!r}")
        if self.shape == "box" and self.size.shape != (3,):
            raise ValueError("box size must give three half-extents")
        if self.density < 0:
            raise ValueError("density must be >= 0")
        if np.any(self.albedo < 0) or np.any(self.albedo > 1):
            raise ValueError("albedo must lie in [0,1]^3")

    def inside(self, points: np.ndarray) -> np.ndarray:
        if self.shape == "sphere":
            d2 = np.sum((points - self.center) ** 2, axis=-1)
            return d2 <= self.size[0] ** 2
        return np.all(np.abs(points - self.center) <= self.size, axis=-1)


@dataclass
class SceneSpec:
    primitives: list
    background: np.ndarray                  # (3,)
    bounds_min: np.ndarray                  # (3,)
    bounds_max: np.ndarray                  # (3,)

    def __post_init__(self):
        self.background = np.asarray(self.background, dtype=np.float64)
        self.bounds_min = np.asarray(self.bounds_min, dtype=np.float64)
        self.bounds_max = np.asarray(self.bounds_max, dtype=np.float64)
        for p in self.primitives:
            ext = p.size[0] if p.shape == "sphere" else p.size
            if (np.any(p.center - ext < self.bounds_min)
                    or np.any(p.center + ext > self.bounds_max)):
                raise ValueError("primitive extends outside scene bounds")

    @property
    def center(self) -> np.ndarray:
        return 0.5 * (self.bounds_min + self.bounds_max)

    @property
    def bound_radius(self) -> float:
        return 0.5 * float(np.linalg.norm(self.bounds_max - self.bounds_min))

    def density_albedo(self, points: np.ndarray):
        """Analytic density and emission color at (n, 3) points."""
        points = np.asarray(points, dtype=np.float64)
        dens = np.zeros(points.shape[:-1])
        color_num = np.zeros(points.shape[:-1] + (3,))
        for p in self.primitives:
            mask = p.inside(points)
            dens += p.density * mask
            color_num += (p.density * mask)[..., None] * p.albedo
        with np.errstate(invalid="ignore"):
            color = np.where(dens[..., None] > 0, color_num / np.maximum(dens, 1e-300)[..., None], 0.0)
        return dens, color


@dataclass
class Camera:
    rotation: np.ndarray     # (3,3) camera-to-world
    position: np.ndarray     # (3,)
    focal: float             # pixels
    width: int
    height: int
    near: float
    far: float

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64)
        self.position = np.asarray(self.position, dtype=np.float64)
        if np.max(np.abs(self.rotation @ self.rotation.T - np.eye(3))) > 1e-9:
            raise ValueError("rotation must be orthonormal")
        if self.focal <= 0:
            raise ValueError("focal length must be positive")

    @classmethod
    def look_at(cls, position, target, focal, width, height, near, far,
                up=(0.0, 0.0, 1.0)) -> "Camera":
        position = np.asarray(position, dtype=np.float64)
        forward = np.asarray(target, dtype=np.float64) - position
        forward = forward / np.linalg.norm(forward)
        right = np.cross(forward, np.asarray(up, dtype=np.float64))
        right = right / np.linalg.norm(right)
        true_up = np.cross(right, forward)
        # Columns are the camera axes in world coordinates; the camera looks
        # along its -z axis.
        rot = np.stack([right, true_up, -forward], axis=1)
        return cls(rot, position, focal, width, height, near, far)

    def rays(self):
        """World-space (origins, unit directions), one per pixel, row-major."""
        j, i = np.meshgrid(np.arange(self.height), np.arange(self.width),
                           indexing="ij")
        x = (i + 0.5 - 0.5 * self.width) / self.focal
        y = -(j + 0.5 - 0.5 * self.height) / self.focal
        dirs_cam = np.stack([x, y, -np.ones_like(x)], axis=-1).reshape(-1, 3)
        dirs = dirs_cam @ self.rotation.T
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        origins = np.broadcast_to(self.position, dirs.shape).copy()
        return origins, dirs


@dataclass
class RingSpec:
    """Camera arc: positions on a circle at fixed elevation, looking at
    the scene center."""

    radius: float = 3.0
    elevation_deg: float = 25.0
    azimuth_start_deg: float = 0.0
    azimuth_end_deg: float = 360.0
    fov_deg: float = 40.0
    width: int = 64
    height: int = 64
    jitter_deg: float = 0.0


@dataclass
class ViewSet:
    cameras: list
    images: np.ndarray            # (v, h, w, 3) in [0,1]
    noise_mask: np.ndarray        # (v, h, w) bool
    transient_mask: np.ndarray    # (v, h, w) bool

    def __post_init__(self):
        v = len(self.cameras)
        h, w = self.cameras[0].height, self.cameras[0].width
        if self.images.shape != (v, h, w, 3):
            raise ValueError("image stack does not match camera intrinsics")
        if self.noise_mask.shape != (v, h, w) or self.transient_mask.shape != (v, h, w):
            raise ValueError("masks must match image dimensions")

    def copy(self) -> "ViewSet":
        return ViewSet(list(self.cameras), self.images.copy(),
                       self.noise_mask.copy(), self.transient_mask.copy())

    def subset(self, indices) -> "ViewSet":
        idx = np.asarray(indices)
        return ViewSet([self.cameras[i] for i in idx], self.images[idx],
                       self.noise_mask[idx], self.transient_mask[idx])

    def __len__(self):
        return len(self.cameras)


def default_scene() -> SceneSpec:
    """Two spheres and a box over a mid-gray background in [-1,1]^3."""
    return SceneSpec(
        primitives=[
            Primitive("sphere", (-0.35, -0.10, 0.00), (0.45,), 12.0, (0.85, 0.25, 0.20)),
            Primitive("sphere", (0.40, 0.28, -0.08), (0.30,), 12.0, (0.20, 0.40, 0.85)),
            Primitive("box", (0.05, -0.42, 0.32), (0.28, 0.22, 0.26), 10.0, (0.80, 0.75, 0.20)),
        ],
        background=(0.5, 0.5, 0.5),
        bounds_min=(-1.0, -1.0, -1.0),
        bounds_max=(1.0, 1.0, 1.0),
    )


# ---------------------------------------------------------------------------
# ground-truth rendering
# ---------------------------------------------------------------------------


def ground_truth_rays(scene: SceneSpec, origins, dirs, near, far,
                      n_quad: int = 256) -> np.ndarray:
    """Render rays against the analytic scene at fine midpoint quadrature."""
    if n_quad < 256:
        raise ValueError("ground truth requires n_quad >= 256")
    origins = np.asarray(origins, dtype=np.float64)
    dirs = np.asarray(dirs, dtype=np.float64)
    step = (far - near) / n_quad
    t = near + (np.arange(n_quad) + 0.5) * step
    out = np.empty((origins.shape[0], 3))
    # Chunk to keep the (rays, n_quad, 3) point tensor small.
    chunk = max(1, 2_000_000 // n_quad)
    for lo in range(0, origins.shape[0], chunk):
        hi = min(origins.shape[0], lo + chunk)
        pts = origins[lo:hi, None, :] + t[None, :, None] * dirs[lo:hi, None, :]
        dens, color = scene.density_albedo(pts)
        w = compute_weights(dens, step)
        acc = w.sum(axis=1)
        out[lo:hi] = np.einsum("rn,rnc->rc", w, color) + (1.0 - acc)[:, None] * scene.background
    return out


def ground_truth_pixel(scene: SceneSpec, ray, n_quad: int = 256) -> np.ndarray:
    """Single-ray ground truth; rays that miss everything return background."""
    return ground_truth_rays(scene, ray.origin[None, :], ray.direction[None, :],
                             ray.t_near, ray.t_far, n_quad)[0]


def ground_truth_image(scene: SceneSpec, camera: Camera, n_quad: int = 256) -> np.ndarray:
    origins, dirs = camera.rays()
    rgb = ground_truth_rays(scene, origins, dirs, camera.near, camera.far, n_quad)
    return rgb.reshape(camera.height, camera.width, 3)


def ring_cameras(scene: SceneSpec, ring: RingSpec, n_views: int,
                 rng: np.random.Generator | None = None) -> list:
    """Cameras spaced along the arc, looking at the scene center."""
    if n_views < 1:
        raise ValueError("need at least one view")
    span = ring.azimuth_end_deg - ring.azimuth_start_deg
    full_circle = abs(abs(span) - 360.0) < 1e-9
    az = np.linspace(ring.azimuth_start_deg, ring.azimuth_end_deg, n_views,
                     endpoint=not full_circle)
    if ring.jitter_deg > 0 and rng is not None:
        az = az + rng.uniform(-ring.jitter_deg, ring.jitter_deg, size=n_views)
    elev = math.radians(ring.elevation_deg)
    focal = 0.5 * ring.width / math.tan(math.radians(ring.fov_deg) / 2.0)
    center = scene.center
    r_b = scene.bound_radius * 1.02
    cams = []
    for a in np.radians(az):
        pos = center + ring.radius * np.array([
            math.cos(elev) * math.cos(a),
            math.cos(elev) * math.sin(a),
            math.sin(elev),
        ])
        dist = float(np.linalg.norm(pos - center))
        cams.append(Camera.look_at(pos, center, focal, ring.width, ring.height,
                                   near=max(1e-3, dist - r_b), far=dist + r_b))
    return cams


def generate_views(scene: SceneSpec, ring: RingSpec, n_views: int,
                   rng: np.random.Generator | None = None,
                   n_quad: int = 256) -> ViewSet:
    """Clean renderings from cameras on the requested arc."""
    cams = ring_cameras(scene, ring, n_views, rng)
    images = np.stack([ground_truth_image(scene, c, n_quad) for c in cams])
    blank = np.zeros((n_views, ring.height, ring.width), dtype=bool)
    return ViewSet(cams, images, blank, blank.copy())


# ---------------------------------------------------------------------------
# perturbation injection
# ---------------------------------------------------------------------------


def left_half_mask(height: int, width: int) -> np.ndarray:
    m = np.zeros((height, width), dtype=bool)
    m[:, : width // 2] = True
    return m


def inject_aleatoric(views: ViewSet, region: np.ndarray, sigma: float,
                     rng: np.random.Generator) -> ViewSet:
    """Add iid Gaussian pixel noise inside ``region`` to every view."""
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    out = views.copy()
    if sigma == 0:
        return out
    region = np.asarray(region, dtype=bool)
    noise = rng.normal(0.0, sigma, size=out.images.shape)
    out.images = np.clip(out.images + noise * region[None, :, :, None], 0.0, 1.0)
    out.noise_mask |= region[None, :, :]
    return out


def inject_transients(views: ViewSet, count: int, rng: np.random.Generator,
                      min_frac: float = 0.10, max_frac: float = 0.28) -> ViewSet:
    """Paint random solid rectangles into each view (different per view).

    Pixels already carrying injected noise are skipped so the two masks
    stay disjoint by construction.
    """
    out = views.copy()
    if count == 0:
        return out
    v, h, w, _ = out.images.shape
    for vi in range(v):
        for _ in range(count):
            rh = int(rng.uniform(min_frac, max_frac) * h)
            rw = int(rng.uniform(min_frac, max_frac) * w)
            y0 = int(rng.integers(0, h - rh))
            x0 = int(rng.integers(0, w - rw))
            color = rng.uniform(0.0, 1.0, size=3)
            rect = np.zeros((h, w), dtype=bool)
            rect[y0:y0 + rh, x0:x0 + rw] = True
            rect &= ~out.noise_mask[vi]
            out.images[vi][rect] = color
            out.transient_mask[vi] |= rect
    return out


# ---------------------------------------------------------------------------
# scene spec files
# ---------------------------------------------------------------------------

_SCENE_KEYS = {"background", "bounds_min", "bounds_max", "primitives"}
_PRIM_KEYS = {"shape", "center", "size", "density", "albedo"}


def load_scene(path) -> SceneSpec:
    """Parse a YAML scene file (see README for the schema)."""
    with open(path) as f:
        raw = yaml.safe_load(f)
    unknown = set(raw) - _SCENE_KEYS
    if unknown:
        raise ValueError(f"unknown scene keys: {sorted(unknown)}")
    prims = []
    for entry in raw.get("primitives", []):
        bad = set(entry) - _PRIM_KEYS
        if bad:
            raise ValueError(f"unknown primitive keys: {sorted(bad)}")
        prims.append(Primitive(entry["shape"], entry["center"], entry["size"],
                               float(entry["density"]), entry["albedo"]))
    return SceneSpec(prims, raw["background"], raw["bounds_min"], raw["bounds_max"])


def save_scene(scene: SceneSpec, path) -> None:
    doc = {
        "background": [float(x) for x in scene.background],
        "bounds_min": [float(x) for x in scene.bounds_min],
        "bounds_max": [float(x) for x in scene.bounds_max],
        "primitives": [
            {
                "shape": p.shape,
                "center": [float(x) for x in p.center],
                "size": [float(x) for x in p.size],
                "density": float(p.density),
                "albedo": [float(x) for x in p.albedo],
            }
            for p in scene.primitives
        ],
    }
    with open(path, "w") as f:
        yaml.safe_dump(doc, f, sort_keys=False)
