"""Cloth simulation and rendering for ground-truth correspondences.

A cloth is a grid of particles in metres.  ``step`` advances it with
position-based Verlet integration and then projects nearest-neighbour
distance constraints back to the rest length, which keeps deformations
(nearly) isometric.  ``render`` rasterises the textured cloth through a
pinhole camera with a Z-buffer and records, per pixel, which triangle is
visible and with which barycentric coordinates.  That record is what lets
``transfer_point`` follow a pixel onto another deformation state.

World frame: the resting cloth lies in the plane z = 0 with x to the right
and y downward; the default camera sits on the -z axis looking at it.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from .errors import InputError, NumericError
from .geometry import Keypoint

__all__ = [
    "ParticleGrid",
    "Camera",
    "Light",
    "Scene",
    "RenderOutput",
    "SimConfig",
    "PairSample",
    "WindField",
    "init_cloth",
    "step",
    "simulate",
    "render",
    "transfer_point",
    "transfer_points",
    "procedural_texture",
    "load_texture",
    "generate_pair",
    "generate_sweep",
    "neighbor_deviation",
]


# ---------------------------------------------------------------- particles


@dataclass
class ParticleGrid:
    positions: np.ndarray
    prev_positions: np.ndarray
    mass: float
    rest_length: float
    pinned: np.ndarray
    time: float = 0.0

    @property
    def rows(self) -> int:
        return self.positions.shape[0]

    @property
    def cols(self) -> int:
        return self.positions.shape[1]

    def copy(self) -> "ParticleGrid":
        return ParticleGrid(
            self.positions.copy(), self.prev_positions.copy(), self.mass,
            self.rest_length, self.pinned.copy(), self.time,
        )


def init_cloth(rows: int, cols: int, spacing: float, mass: float = 0.02,
               pin_top_row: bool = True) -> ParticleGrid:
    """Planar cloth at rest, centred on the origin in the z = 0 plane."""
    if rows < 2 or cols < 2:
        raise InputError("cloth needs at least 2x2 particles")
    if spacing <= 0 or mass <= 0:
        raise InputError("spacing and mass must be positive")
    xs = (np.arange(cols) - (cols - 1) / 2.0) * spacing
    ys = (np.arange(rows) - (rows - 1) / 2.0) * spacing
    gx, gy = np.meshgrid(xs, ys)
    pos = np.stack([gx, gy, np.zeros_like(gx)], axis=-1)
    pinned = np.zeros((rows, cols), bool)
    if pin_top_row:
        pinned[0] = True
    return ParticleGrid(pos, pos.copy(), float(mass), float(spacing), pinned)


def neighbor_deviation(grid: ParticleGrid) -> float:
    """Max relative deviation of horizontal/vertical neighbour distances from rest."""
    p = grid.positions
    dh = np.linalg.norm(p[:, 1:] - p[:, :-1], axis=-1)
    dv = np.linalg.norm(p[1:] - p[:-1], axis=-1)
    dev = max(np.abs(dh - grid.rest_length).max(), np.abs(dv - grid.rest_length).max())
    return float(dev / grid.rest_length)


def _constraint_groups(grid: ParticleGrid, shear: bool):
    """Projection groups in sweep order with per-side correction shares.

    Horizontal links are split into even/odd columns, vertical links are swept
    row by row from the top; inside a group no particle appears twice, so a
    group projects like a sequential sweep over its links.
    """
    w = np.where(grid.pinned, 0.0, 1.0 / grid.mass)[..., None]
    R, C = grid.rows, grid.cols
    L = grid.rest_length
    idx = []
    for start in (0, 1):
        idx.append(((slice(None), slice(start, C - 1, 2)), (slice(None), slice(start + 1, C, 2)), L))
    for r in range(R - 1):
        idx.append(((r,), (r + 1,), L))
    if shear:
        diag = L * np.sqrt(2.0)
        for start in (0, 1):
            idx.append(((slice(start, R - 1, 2), slice(0, C - 1)), (slice(start + 1, R, 2), slice(1, C)), diag))
            idx.append(((slice(start, R - 1, 2), slice(1, C)), (slice(start + 1, R, 2), slice(0, C - 1)), diag))
    groups = []
    for a, b, rest in idx:
        wa, wb = w[a], w[b]
        tot = wa + wb
        safe = np.where(tot > 0, tot, 1.0)
        groups.append((a, b, rest, wa / safe, wb / safe))
    return groups


def _project(p: np.ndarray, groups) -> None:
    for a, b, rest, ca, cb in groups:
        d = p[b] - p[a]
        dist = np.sqrt(np.einsum("...k,...k->...", d, d))[..., None]
        d *= 1.0 - rest / np.maximum(dist, 1e-12)
        p[a] += ca * d
        p[b] -= cb * d


def step(grid: ParticleGrid, gravity=(0.0, 9.81, 0.0), wind=None, dt: float = 1 / 240,
         solver_iterations: int = 30, damping: float = 0.99, shear: bool = False) -> ParticleGrid:
    """One Verlet step followed by Gauss-Seidel distance projection.

    ``wind`` is ``None``, a force array ``(rows, cols, 3)`` in newtons, or a
    callable ``wind(time) -> array`` giving the force on every particle.
    Pinned particles are put back after every projection round.
    """
    if dt <= 0:
        raise InputError("dt must be positive")
    if solver_iterations < 1:
        raise InputError("solver_iterations must be >= 1")
    force = np.zeros_like(grid.positions)
    if wind is not None:
        f = wind(grid.time) if callable(wind) else wind
        force = force + np.broadcast_to(np.asarray(f, dtype=np.float64), force.shape)
    acc = np.asarray(gravity, dtype=np.float64) + force / grid.mass
    if not np.isfinite(acc).all():
        raise NumericError("non-finite force")

    pos, prev = grid.positions, grid.prev_positions
    new = pos + damping * (pos - prev) + acc * (dt * dt)
    pin = grid.pinned
    anchor = pos[pin].copy()
    new[pin] = anchor
    groups = _constraint_groups(grid, shear)
    for _ in range(solver_iterations):
        _project(new, groups)
        new[pin] = anchor
    if not np.isfinite(new).all():
        raise NumericError("simulation diverged")
    return ParticleGrid(new, pos.copy(), grid.mass, grid.rest_length, pin.copy(), grid.time + dt)


class WindField:
    """Spatially smooth random force field, resampled every ``resample_every`` steps.

    Each sample is a random global direction plus Gaussian-smoothed per-particle
    noise, scaled so the mean force magnitude is ``strength`` newtons.
    """

    def __init__(self, rows: int, cols: int, strength: float, seed: int, dt: float,
                 resample_every: int = 20, smooth: float = 3.0):
        self.rows, self.cols = rows, cols
        self.strength = strength
        self.rng = np.random.default_rng(seed)
        self.period = resample_every * dt
        self.smooth = smooth
        self._samples: list[np.ndarray] = []

    def _sample(self) -> np.ndarray:
        direction = self.rng.standard_normal(3)
        direction[2] *= 2.0  # favour out-of-plane gusts
        direction /= np.linalg.norm(direction) + 1e-12
        noise = self.rng.standard_normal((self.rows, self.cols, 3))
        noise = ndimage.gaussian_filter(noise, sigma=(self.smooth, self.smooth, 0), mode="nearest")
        noise /= noise.std() + 1e-12
        field = direction + 0.7 * noise
        mean = np.linalg.norm(field, axis=-1).mean()
        return field * (self.strength / mean)

    def __call__(self, time: float) -> np.ndarray:
        k = int(np.floor(time / self.period + 1e-9))
        while len(self._samples) <= k:
            self._samples.append(self._sample())
        return self._samples[k]


def simulate(grid: ParticleGrid, steps: int, wind=None, **kw) -> ParticleGrid:
    for _ in range(steps):
        grid = step(grid, wind=wind, **kw)
    return grid


# ---------------------------------------------------------------- camera & scene


@dataclass
class Camera:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, 1.5]))

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64)
        self.translation = np.asarray(self.translation, dtype=np.float64)
        if self.fx <= 0 or self.fy <= 0 or self.width < 1 or self.height < 1:
            raise InputError("degenerate camera intrinsics")
        if self.rotation.shape != (3, 3) or not np.allclose(self.rotation @ self.rotation.T, np.eye(3), atol=1e-9):
            raise InputError("camera rotation must be orthonormal")

    @classmethod
    def facing(cls, width: int, height: int, focal: float, distance: float,
               roll: float = 0.0, offset=(0.0, 0.0)) -> "Camera":
        """Camera on the -z axis looking at the origin, rolled about its axis."""
        c, s = np.cos(roll), np.sin(roll)
        R = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
        t = np.array([-offset[0], -offset[1], distance], dtype=np.float64)
        return cls(focal, focal, (width - 1) / 2.0, (height - 1) / 2.0, width, height, R, t)

    def to_camera(self, X: np.ndarray) -> np.ndarray:
        return X @ self.rotation.T + self.translation

    def project(self, X: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Pixel coordinates ``(..., 2)`` and depths ``(...)`` of world points."""
        Xc = self.to_camera(np.asarray(X, dtype=np.float64))
        z = Xc[..., 2]
        safe = np.where(np.abs(z) > 1e-12, z, 1e-12)
        u = self.fx * Xc[..., 0] / safe + self.cx
        v = self.fy * Xc[..., 1] / safe + self.cy
        return np.stack([u, v], axis=-1), z

    @property
    def centre(self) -> np.ndarray:
        return -self.rotation.T @ self.translation

    def to_dict(self) -> dict:
        return {
            "fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
            "width": self.width, "height": self.height,
            "rotation": self.rotation.tolist(), "translation": self.translation.tolist(),
        }


@dataclass
class Light:
    """Directional light (``vector`` points from the surface to the light) or point light."""

    vector: np.ndarray
    color: np.ndarray = field(default_factory=lambda: np.ones(3))
    intensity: float = 1.0
    directional: bool = True

    def __post_init__(self):
        self.vector = np.asarray(self.vector, dtype=np.float64)
        self.color = np.asarray(self.color, dtype=np.float64)


@dataclass
class Scene:
    cloth: ParticleGrid
    texture: np.ndarray
    camera: Camera
    lights: list[Light]
    noise_sigma: float = 0.0
    background: np.ndarray = field(default_factory=lambda: np.zeros(3))
    ambient: float = 0.0

    def __post_init__(self):
        if not self.lights:
            raise InputError("scene needs at least one light")


@dataclass
class RenderOutput:
    image: np.ndarray         # (H, W, 3) float32 in [0, 1]
    depth: np.ndarray         # (H, W) metres along the optical axis, +inf where empty
    face: np.ndarray          # (H, W) triangle id, -1 where empty
    bary: np.ndarray          # (H, W, 3) perspective-correct barycentrics
    camera: Camera


def triangle_vertices(rows: int, cols: int) -> np.ndarray:
    """Flat particle indices ``(T, 3)`` of the two triangles of every cell.

    Triangle ``2*(r*(cols-1)+c)`` is (r,c),(r,c+1),(r+1,c); the next one is
    (r+1,c+1),(r+1,c),(r,c+1).
    """
    r, c = np.meshgrid(np.arange(rows - 1), np.arange(cols - 1), indexing="ij")
    i00 = (r * cols + c).ravel()
    i01, i10, i11 = i00 + 1, i00 + cols, i00 + cols + 1
    t0 = np.stack([i00, i01, i10], axis=-1)
    t1 = np.stack([i11, i10, i01], axis=-1)
    return np.stack([t0, t1], axis=1).reshape(-1, 3)


def _vertex_normals(pos: np.ndarray) -> np.ndarray:
    du = np.gradient(pos, axis=1)
    dv = np.gradient(pos, axis=0)
    n = np.cross(du, dv)
    return n / (np.linalg.norm(n, axis=-1, keepdims=True) + 1e-12)


def _texture_lookup(texture: np.ndarray, uv: np.ndarray) -> np.ndarray:
    Ht, Wt = texture.shape[:2]
    x = np.clip(uv[:, 0] * (Wt - 1), 0, Wt - 1)
    y = np.clip(uv[:, 1] * (Ht - 1), 0, Ht - 1)
    x0 = np.minimum(np.floor(x).astype(int), Wt - 2)
    y0 = np.minimum(np.floor(y).astype(int), Ht - 2)
    fx, fy = (x - x0)[:, None], (y - y0)[:, None]
    return (texture[y0, x0] * (1 - fx) * (1 - fy) + texture[y0, x0 + 1] * fx * (1 - fy)
            + texture[y0 + 1, x0] * (1 - fx) * fy + texture[y0 + 1, x0 + 1] * fx * fy)


def _rasterize(uv: np.ndarray, z: np.ndarray, tris: np.ndarray, width: int, height: int):
    depth = np.full((height, width), np.inf)
    face = np.full((height, width), -1, np.int32)
    bary = np.zeros((height, width, 3))
    P = uv[tris]          # (T, 3, 2)
    Z = z[tris]           # (T, 3)
    lo = np.floor(P.min(axis=1)).astype(int)
    hi = np.ceil(P.max(axis=1)).astype(int)
    for t in range(len(tris)):
        if (Z[t] <= 1e-6).any():
            continue
        x0, y0 = max(lo[t, 0], 0), max(lo[t, 1], 0)
        x1, y1 = min(hi[t, 0], width - 1), min(hi[t, 1], height - 1)
        if x0 > x1 or y0 > y1:
            continue
        (ax, ay), (bx, by), (cx, cy) = P[t]
        area = (bx - ax) * (cy - ay) - (by - ay) * (cx - ax)
        if abs(area) < 1e-12:
            continue
        xs = np.arange(x0, x1 + 1, dtype=np.float64)
        ys = np.arange(y0, y1 + 1, dtype=np.float64)[:, None]
        l0 = ((bx - xs) * (cy - ys) - (by - ys) * (cx - xs)) / area
        l1 = ((cx - xs) * (ay - ys) - (cy - ys) * (ax - xs)) / area
        l2 = 1.0 - l0 - l1
        inside = (l0 >= -1e-9) & (l1 >= -1e-9) & (l2 >= -1e-9)
        if not inside.any():
            continue
        iz = l0 / Z[t, 0] + l1 / Z[t, 1] + l2 / Z[t, 2]
        d = 1.0 / iz
        win = depth[y0:y1 + 1, x0:x1 + 1]
        upd = inside & (d < win)
        if not upd.any():
            continue
        win[upd] = d[upd]
        face[y0:y1 + 1, x0:x1 + 1][upd] = t
        b = np.stack([l0 / Z[t, 0], l1 / Z[t, 1], l2 / Z[t, 2]], axis=-1) * d[..., None]
        bary[y0:y1 + 1, x0:x1 + 1][upd] = b[upd]
    return depth, face, bary


def render(scene: Scene, seed: int = 0) -> RenderOutput:
    """Rasterise the textured cloth with Lambertian shading and sensor noise."""
    cam = scene.camera
    cloth = scene.cloth
    R, C = cloth.rows, cloth.cols
    pos = cloth.positions.reshape(-1, 3)
    uv_px, z = cam.project(pos)
    if not (np.isfinite(uv_px).all() and np.isfinite(z).all()):
        raise InputError("camera projection is not finite")
    tris = triangle_vertices(R, C)
    depth, face, bary = _rasterize(uv_px, z, tris, cam.width, cam.height)

    image = np.empty((cam.height, cam.width, 3))
    image[:] = scene.background
    covered = face >= 0
    if covered.any():
        f = face[covered]
        b = bary[covered]
        vid = tris[f]
        gr, gc = np.divmod(np.arange(R * C), C)
        tex_uv = np.stack([gc / (C - 1), gr / (R - 1)], axis=-1)
        uv = (tex_uv[vid] * b[..., None]).sum(axis=1)
        X = (pos[vid] * b[..., None]).sum(axis=1)
        normals = _vertex_normals(cloth.positions).reshape(-1, 3)
        n = (normals[vid] * b[..., None]).sum(axis=1)
        n /= np.linalg.norm(n, axis=-1, keepdims=True) + 1e-12
        view = cam.centre - X
        n *= np.sign((n * view).sum(-1, keepdims=True) + 1e-12)
        shade = np.full((len(f), 3), scene.ambient)
        for light in scene.lights:
            if light.directional:
                L = np.broadcast_to(light.vector / np.linalg.norm(light.vector), X.shape)
            else:
                L = light.vector - X
                L = L / (np.linalg.norm(L, axis=-1, keepdims=True) + 1e-12)
            lam = np.maximum((n * L).sum(-1), 0.0)
            shade += lam[:, None] * light.color * light.intensity
        image[covered] = _texture_lookup(scene.texture, uv) * shade
    if scene.noise_sigma > 0:
        rng = np.random.default_rng(seed)
        image = image + rng.normal(0.0, scene.noise_sigma, image.shape)
    image = np.clip(image, 0.0, 1.0).astype(np.float32)
    return RenderOutput(image, depth, face, bary, cam)


# ---------------------------------------------------------------- transfer


def _exact_bary(out: RenderOutput, grid: ParticleGrid, faces: np.ndarray, pix: np.ndarray) -> np.ndarray:
    tris = triangle_vertices(grid.rows, grid.cols)
    uv, z = out.camera.project(grid.positions.reshape(-1, 3))
    P = uv[tris[faces]]
    Z = z[tris[faces]]
    a, b, c = P[:, 0], P[:, 1], P[:, 2]
    x, y = pix[:, 0], pix[:, 1]
    area = (b[:, 0] - a[:, 0]) * (c[:, 1] - a[:, 1]) - (b[:, 1] - a[:, 1]) * (c[:, 0] - a[:, 0])
    l0 = ((b[:, 0] - x) * (c[:, 1] - y) - (b[:, 1] - y) * (c[:, 0] - x)) / area
    l1 = ((c[:, 0] - x) * (a[:, 1] - y) - (c[:, 1] - y) * (a[:, 0] - x)) / area
    l2 = 1.0 - l0 - l1
    w = np.stack([l0 / Z[:, 0], l1 / Z[:, 1], l2 / Z[:, 2]], axis=-1)
    return w / w.sum(axis=-1, keepdims=True)


def transfer_points(out_a: RenderOutput, grid_a: ParticleGrid, grid_b: ParticleGrid,
                    camera_b: Camera, pixels, out_b: RenderOutput | None = None,
                    depth_tol: float = 1e-3) -> np.ndarray:
    """Vectorised :func:`transfer_point`; rows without a transfer are NaN."""
    pix = np.asarray(pixels, dtype=np.float64).reshape(-1, 2)
    res = np.full_like(pix, np.nan)
    H, W = out_a.face.shape
    xi = np.rint(pix[:, 0]).astype(int)
    yi = np.rint(pix[:, 1]).astype(int)
    inside = (xi >= 0) & (xi < W) & (yi >= 0) & (yi < H)
    idx = np.flatnonzero(inside)
    faces = out_a.face[yi[idx], xi[idx]]
    keep = faces >= 0
    idx, faces = idx[keep], faces[keep]
    if not len(idx):
        return res
    bary = _exact_bary(out_a, grid_a, faces, pix[idx])
    tris = triangle_vertices(grid_b.rows, grid_b.cols)
    Xb = (grid_b.positions.reshape(-1, 3)[tris[faces]] * bary[..., None]).sum(axis=1)
    uv, z = camera_b.project(Xb)
    ok = (z > 1e-6) & (uv[:, 0] >= -0.5) & (uv[:, 0] < camera_b.width - 0.5) \
        & (uv[:, 1] >= -0.5) & (uv[:, 1] < camera_b.height - 0.5)
    if out_b is not None:
        ub = np.clip(np.rint(uv[:, 0]).astype(int), 0, camera_b.width - 1)
        vb = np.clip(np.rint(uv[:, 1]).astype(int), 0, camera_b.height - 1)
        ok &= z <= out_b.depth[vb, ub] + depth_tol
    res[idx[ok]] = uv[ok]
    return res


def transfer_point(out_a: RenderOutput, grid_a: ParticleGrid, grid_b: ParticleGrid,
                   camera_b: Camera, pixel, out_b: RenderOutput | None = None,
                   depth_tol: float = 1e-3):
    """Follow the surface point under ``pixel`` in view A to its pixel in view B.

    Returns ``None`` when the pixel is off the cloth, the point projects
    outside image B, or (when ``out_b`` is given) it is hidden there.
    """
    res = transfer_points(out_a, grid_a, grid_b, camera_b, [pixel], out_b, depth_tol)[0]
    if np.isnan(res).any():
        return None
    return float(res[0]), float(res[1])


# ---------------------------------------------------------------- textures


def procedural_texture(seed: int, size: int = 512) -> np.ndarray:
    """Colourful multi-scale texture with random shapes, ``(size, size, 3)`` in [0, 1]."""
    rng = np.random.default_rng(seed)
    tex = np.full((size, size, 3), 0.5)
    for sigma, amp in ((size / 16, 0.12), (size / 48, 0.1), (size / 128, 0.08), (1.5, 0.04)):
        n = ndimage.gaussian_filter(rng.standard_normal((size, size, 3)), sigma=(sigma, sigma, 0), mode="wrap")
        tex += amp * n / (n.std() + 1e-12)
    yy, xx = np.mgrid[0:size, 0:size]
    for _ in range(int(0.0006 * size * size)):
        cx, cy = rng.uniform(0, size, 2)
        r = rng.uniform(size / 120, size / 25)
        color = rng.uniform(0, 1, 3)
        if rng.random() < 0.5:
            mask = (xx - cx) ** 2 + (yy - cy) ** 2 < r * r
        else:
            ang = rng.uniform(0, np.pi)
            u = (xx - cx) * np.cos(ang) + (yy - cy) * np.sin(ang)
            v = -(xx - cx) * np.sin(ang) + (yy - cy) * np.cos(ang)
            mask = (np.abs(u) < r) & (np.abs(v) < r * rng.uniform(0.2, 1.0))
        tex[mask] = 0.3 * tex[mask] + 0.7 * color
    return np.clip(tex, 0, 1)


def load_texture(path) -> np.ndarray:
    from PIL import Image, UnidentifiedImageError

    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    except (OSError, UnidentifiedImageError) as exc:
        raise InputError(f"cannot read texture {path}: {exc}") from None


# ---------------------------------------------------------------- pairs


@dataclass
class SimConfig:
    """Scene generation settings (desk-scale defaults)."""

    width: int = 640
    height: int = 480
    cloth_rows: int = 25
    cloth_cols: int = 25
    cloth_extent: float = 1.0
    mass: float = 0.02
    pin_top_row: bool = True
    texture_path: str | None = None
    texture_size: int = 512
    focal_scale: float = 1.1       # focal length in units of image width
    camera_distance: float = 1.7
    camera_roll_deg: float = 0.0   # max |roll| of view B relative to view A
    camera_shift: float = 0.0      # max lateral shift of view B, metres
    gravity: tuple[float, float, float] = (0.0, 9.81, 0.0)
    wind_strength: float = 0.15
    wind_resample: int = 20
    dt: float = 1.0 / 240.0
    solver_iterations: int = 30
    damping: float = 0.99
    warmup_steps: int = 120
    steps_between: int = 60
    n_lights: tuple[int, int] = (1, 3)
    intensity_range: tuple[float, float] = (0.5, 1.5)
    hue_jitter: float = 0.1
    ambient: float = 0.1
    noise_sigma: float = 0.01
    max_keypoints: int = 2048
    threshold_px: float = 3.0
    pairs: int = 200

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, raw: dict) -> "SimConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(raw) - known
        if unknown:
            raise InputError(f"unknown simulation config keys: {sorted(unknown)}")
        raw = dict(raw)
        for key in ("gravity", "n_lights", "intensity_range"):
            if key in raw:
                raw[key] = tuple(raw[key])
        return cls(**raw)

    @classmethod
    def from_file(cls, path) -> "SimConfig":
        try:
            raw = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise InputError(f"cannot read simulation config {path}: {exc}") from None
        return cls.from_dict(raw)


@dataclass
class PairSample:
    image_a: np.ndarray
    image_b: np.ndarray
    keypoints_a: list[Keypoint]
    keypoints_b: list[Keypoint]
    correspondences: list[tuple[int, int, float]]
    manifest: dict
    render_a: RenderOutput | None = None
    render_b: RenderOutput | None = None
    grid_a: ParticleGrid | None = None
    grid_b: ParticleGrid | None = None


def _random_lights(rng: np.random.Generator, cfg: SimConfig) -> list[Light]:
    lo, hi = cfg.n_lights
    lights = []
    for _ in range(int(rng.integers(lo, hi + 1))):
        hue = 1.0 + rng.uniform(-cfg.hue_jitter, cfg.hue_jitter, 3)
        color = np.clip(hue, 0, None)
        intensity = rng.uniform(*cfg.intensity_range)
        n = len(lights) + 1
        if rng.random() < 0.5:
            vec = np.array([rng.uniform(-0.6, 0.6), rng.uniform(-0.6, 0.6), -1.0])
            lights.append(Light(vec, color, 0.75 * intensity / n, True))
        else:
            pos = np.array([rng.uniform(-1.0, 1.0), rng.uniform(-1.0, 1.0), -rng.uniform(0.8, 2.0)])
            lights.append(Light(pos, color, 0.75 * intensity / n, False))
    return lights


def _texture(cfg: SimConfig, seed: int) -> np.ndarray:
    if cfg.texture_path:
        return load_texture(cfg.texture_path)
    return procedural_texture(seed, cfg.texture_size)


def _camera(cfg: SimConfig, roll=0.0, offset=(0.0, 0.0), distance=None) -> Camera:
    return Camera.facing(cfg.width, cfg.height, cfg.focal_scale * cfg.width,
                         cfg.camera_distance if distance is None else distance, roll, offset)


def match_ground_truth(pred_b: np.ndarray, kps_b: Sequence[Keypoint], threshold: float) -> list[tuple[int, int, float]]:
    """Greedy one-to-one pairing of transferred A keypoints with B keypoints.

    Candidates within ``threshold`` pixels are accepted in ascending distance
    order (ties by A index, then B index).
    """
    if not len(kps_b):
        return []
    pts_b = np.array([[k.x, k.y] for k in kps_b])
    tree = cKDTree(pts_b)
    cand = []
    for ia, p in enumerate(pred_b):
        if np.isnan(p).any():
            continue
        for ib in tree.query_ball_point(p, threshold):
            d = float(np.hypot(*(pts_b[ib] - p)))
            if d <= threshold:
                cand.append((d, ia, ib))
    cand.sort()
    used_a, used_b, out = set(), set(), []
    for d, ia, ib in cand:
        if ia in used_a or ib in used_b:
            continue
        used_a.add(ia)
        used_b.add(ib)
        out.append((ia, ib, d))
    out.sort(key=lambda t: t[0])
    return out


def _detect(image: np.ndarray, cfg: SimConfig) -> list[Keypoint]:
    from .network import to_gray
    from .pipeline.detect import detect_keypoints

    return detect_keypoints(to_gray(image), cfg.max_keypoints)


def generate_pair(config: SimConfig | None = None, seed: int = 0, detect: bool = True) -> PairSample:
    """Two deformation states of one textured cloth with independent lighting.

    Keypoints are detected independently in both renders and paired through
    the simulation state (transfer + occlusion test + greedy 3 px matching).
    """
    cfg = config or SimConfig()
    rng = np.random.default_rng(seed)
    texture = _texture(cfg, int(rng.integers(2**31)))
    cloth = init_cloth(cfg.cloth_rows, cfg.cloth_cols, cfg.cloth_extent / (cfg.cloth_cols - 1),
                       cfg.mass, cfg.pin_top_row)
    wind_seed = int(rng.integers(2**31))
    wind = WindField(cfg.cloth_rows, cfg.cloth_cols, cfg.wind_strength, wind_seed, cfg.dt, cfg.wind_resample)
    sim_kw = dict(gravity=cfg.gravity, dt=cfg.dt, solver_iterations=cfg.solver_iterations, damping=cfg.damping)
    grid_a = simulate(cloth, cfg.warmup_steps, wind=wind, **sim_kw)
    grid_b = simulate(grid_a, cfg.steps_between, wind=wind, **sim_kw)

    cam_a = _camera(cfg)
    roll = np.deg2rad(rng.uniform(-cfg.camera_roll_deg, cfg.camera_roll_deg))
    shift = rng.uniform(-cfg.camera_shift, cfg.camera_shift, 2)
    cam_b = _camera(cfg, roll, shift)
    bg = rng.uniform(0.0, 0.3, 3)
    scene_a = Scene(grid_a, texture, cam_a, _random_lights(rng, cfg), cfg.noise_sigma, bg, cfg.ambient)
    scene_b = Scene(grid_b, texture, cam_b, _random_lights(rng, cfg), cfg.noise_sigma, bg, cfg.ambient)
    noise_a, noise_b = (int(s) for s in rng.integers(2**31, size=2))
    out_a = render(scene_a, noise_a)
    out_b = render(scene_b, noise_b)

    kps_a = _detect(out_a.image, cfg) if detect else []
    kps_b = _detect(out_b.image, cfg) if detect else []
    pts_a = np.array([[k.x, k.y] for k in kps_a]).reshape(-1, 2)
    pred = transfer_points(out_a, grid_a, grid_b, cam_b, pts_a, out_b)
    corrs = match_ground_truth(pred, kps_b, cfg.threshold_px)
    manifest = {
        "seed": seed,
        "sim_config": cfg.to_dict(),
        "wind_model": f"smoothed per-particle random force resampled every {cfg.wind_resample} steps",
        "wind_seed": wind_seed,
        "noise_seeds": [noise_a, noise_b],
        "camera_a": cam_a.to_dict(),
        "camera_b": cam_b.to_dict(),
    }
    return PairSample(out_a.image, out_b.image, kps_a, kps_b, corrs, manifest, out_a, out_b, grid_a, grid_b)


def generate_sweep(config: SimConfig | None = None, seed: int = 0, sweep: str = "rotation",
                   values: Sequence[float] | None = None) -> list[PairSample]:
    """Reference view against views with growing in-plane roll or distance.

    ``rotation`` values are roll angles in degrees (default 0..180 step 10);
    ``scale`` values multiply the camera distance.  The cloth state and
    lighting stay fixed so only the camera changes along the sweep.
    """
    cfg = config or SimConfig()
    if sweep not in ("rotation", "scale"):
        raise InputError(f"unknown sweep {sweep!r}")
    if values is None:
        values = list(range(0, 190, 10)) if sweep == "rotation" else [1.0, 1.15, 1.3, 1.45, 1.6, 1.75, 1.9]
    rng = np.random.default_rng(seed)
    texture = _texture(cfg, int(rng.integers(2**31)))
    cloth = init_cloth(cfg.cloth_rows, cfg.cloth_cols, cfg.cloth_extent / (cfg.cloth_cols - 1),
                       cfg.mass, cfg.pin_top_row)
    wind = WindField(cfg.cloth_rows, cfg.cloth_cols, cfg.wind_strength, int(rng.integers(2**31)), cfg.dt,
                     cfg.wind_resample)
    grid = simulate(cloth, cfg.warmup_steps, wind=wind, gravity=cfg.gravity, dt=cfg.dt,
                    solver_iterations=cfg.solver_iterations, damping=cfg.damping)
    lights = _random_lights(rng, cfg)
    bg = rng.uniform(0.0, 0.3, 3)
    cams = []
    for v in values:
        if sweep == "rotation":
            cams.append(_camera(cfg, roll=np.deg2rad(v)))
        else:
            cams.append(_camera(cfg, distance=cfg.camera_distance * v))
    renders = [render(Scene(grid, texture, c, lights, cfg.noise_sigma, bg, cfg.ambient), seed) for c in cams]
    kps = [_detect(r.image, cfg) for r in renders]
    ref = renders[0]
    pts = np.array([[k.x, k.y] for k in kps[0]]).reshape(-1, 2)
    out = []
    for v, r, k in zip(values, renders, kps):
        pred = transfer_points(ref, grid, grid, r.camera, pts, r)
        corrs = match_ground_truth(pred, k, cfg.threshold_px)
        manifest = {"seed": seed, "sim_config": cfg.to_dict(), "sweep": sweep, "value": v}
        out.append(PairSample(ref.image, r.image, kps[0], k, corrs, manifest, ref, r, grid, grid))
    return out
