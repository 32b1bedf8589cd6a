"""Pinhole cameras, query rays, and epipolar reprojection into source views.

Conventions: world->camera extrinsics (R, t) with camera looking along +z,
pixel coordinates (x, y) with x along width and pixel centers at integer
coordinates.  A reprojected sample is usable for bilinear lookups iff
0 <= x < width-1, 0 <= y < height-1 and its camera-frame depth is positive;
everything else is masked, never projected through the divide.

All functions here are pure numpy (float64): camera geometry carries no
gradients, only the features sampled at reprojected coordinates do.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, GeometryError

_OOB_SENTINEL = -1.0  # finite placeholder coordinate for masked samples


@dataclass
class Camera:
    """Calibrated view: intrinsics K, world->camera rotation R, translation t."""

    K: np.ndarray
    R: np.ndarray
    t: np.ndarray
    width: int
    height: int

    def __post_init__(self):
        self.K = np.asarray(self.K, dtype=np.float64).reshape(3, 3)
        self.R = np.asarray(self.R, dtype=np.float64).reshape(3, 3)
        self.t = np.asarray(self.t, dtype=np.float64).reshape(3)
        if not np.allclose(self.R @ self.R.T, np.eye(3), atol=1e-9):
            raise GeometryError("camera rotation is not orthonormal")
        if not np.isclose(np.linalg.det(self.R), 1.0, atol=1e-9):
            raise GeometryError("camera rotation must have det +1")
        if not (np.allclose(self.K[1, 0], 0) and np.allclose(self.K[2, :2], 0)
                and np.isclose(self.K[2, 2], 1.0)):
            raise GeometryError("calibration matrix must be upper triangular with K[2,2]=1")
        if self.K[0, 0] <= 0 or self.K[1, 1] <= 0:
            raise GeometryError("focal lengths must be positive")

    @property
    def center(self):
        """Camera center in world coordinates."""
        return -self.R.T @ self.t

    @property
    def optical_axis(self):
        """Unit viewing direction (+z of the camera frame) in world coords."""
        return self.R.T @ np.array([0.0, 0.0, 1.0])


@dataclass
class Ray:
    """World-space ray o + z*d with unit d and N ascending sample depths."""

    origin: np.ndarray
    direction: np.ndarray
    t_near: float
    t_far: float
    z: np.ndarray

    def __post_init__(self):
        self.origin = np.asarray(self.origin, dtype=np.float64).reshape(3)
        self.direction = np.asarray(self.direction, dtype=np.float64).reshape(3)
        self.z = np.asarray(self.z, dtype=np.float64)
        if not np.isclose(np.linalg.norm(self.direction), 1.0, atol=1e-12):
            raise GeometryError("ray direction must be unit norm")
        if not self.t_near < self.t_far:
            raise GeometryError("t_near must be below t_far")
        if self.z.size and np.any(np.diff(self.z) <= 0):
            raise GeometryError("sample depths must be strictly ascending")

    def points(self):
        """Sample positions, shape (N, 3)."""
        return self.origin[None, :] + self.z[:, None] * self.direction[None, :]


@dataclass
class Reprojection:
    """A query ray warped into one source view."""

    view_index: int
    pixel_coords: np.ndarray        # (N, 2) fractional (x, y)
    in_bounds_mask: np.ndarray      # (N,) bool
    view_dir_delta: np.ndarray      # (N, 4): d_query - d_source, dot product
    depth: np.ndarray = field(default=None)  # (N,) camera-frame z, diagnostic


def ray_from_pixel(cam, px, t_near, t_far, n_samples, stratified=False, rng=None,
                   jitter_pixel=None):
    """Cast a ray through a pixel with stratified or midpoint depth samples.

    ``px`` is an (x, y) position that must lie on the image.  Stratified
    sampling draws one depth uniformly per equal-width bin (and, unless
    ``jitter_pixel`` is overridden, also jitters the ray inside the pixel);
    otherwise depths are the N bin midpoints through the pixel center.
    """
    px = np.asarray(px, dtype=np.float64).reshape(2)
    if not (0.0 <= px[0] <= cam.width - 1 and 0.0 <= px[1] <= cam.height - 1):
        raise GeometryError(f"pixel {px} outside {cam.width}x{cam.height} image")
    if t_near <= 0.0:
        raise GeometryError("t_near must be positive")
    if jitter_pixel is None:
        jitter_pixel = stratified
    if (stratified or jitter_pixel) and rng is None:
        raise ConfigError("stratified sampling needs an rng")
    target = px + rng.uniform(-0.5, 0.5, size=2) if jitter_pixel else px

    d_cam = np.linalg.solve(cam.K, np.array([target[0], target[1], 1.0]))
    d_world = cam.R.T @ d_cam
    d_world /= np.linalg.norm(d_world)

    edges = np.linspace(t_near, t_far, n_samples + 1)
    if stratified:
        u = rng.uniform(0.0, 1.0, size=n_samples)
    else:
        u = np.full(n_samples, 0.5)
    z = edges[:-1] + u * (edges[1:] - edges[:-1])
    return Ray(cam.center, d_world, t_near, t_far, z)


def parameterize_ray(p_i, p_j):
    """Origin and unit direction of the ray through two distinct points."""
    p_i = np.asarray(p_i, dtype=np.float64).reshape(3)
    p_j = np.asarray(p_j, dtype=np.float64).reshape(3)
    diff = p_j - p_i
    norm = np.linalg.norm(diff)
    if norm == 0.0:
        raise GeometryError("cannot parameterize a ray through coincident points")
    return p_i, diff / norm


def project_points(cam, points):
    """Project world points (..., 3) to pixel coords, masking degenerate ones.

    Returns (coords (..., 2), mask (...,), cam_depth (...,)).  Points behind
    the camera or landing outside the bilinear-valid region are masked and
    get a finite sentinel coordinate.
    """
    pts = np.asarray(points, dtype=np.float64)
    u = pts @ cam.R.T + cam.t
    depth = u[..., 2]
    safe = np.where(depth > 0.0, depth, 1.0)
    xn = u[..., 0] / safe
    yn = u[..., 1] / safe
    x = cam.K[0, 0] * xn + cam.K[0, 1] * yn + cam.K[0, 2]
    y = cam.K[1, 1] * yn + cam.K[1, 2]
    mask = ((depth > 0.0)
            & (x >= 0.0) & (x < cam.width - 1)
            & (y >= 0.0) & (y < cam.height - 1))
    coords = np.stack([np.where(mask, x, _OOB_SENTINEL),
                       np.where(mask, y, _OOB_SENTINEL)], axis=-1)
    return coords, mask, depth


def warp_ray(ray, cam, view_index=0):
    """Reproject a query ray's samples into a source view (the plane ray)."""
    pts = ray.points()
    coords, mask, depth = project_points(cam, pts)
    to_sample = pts - cam.center[None, :]
    d_src = to_sample / np.linalg.norm(to_sample, axis=-1, keepdims=True)
    delta = np.concatenate(
        [ray.direction[None, :] - d_src, (d_src @ ray.direction)[:, None]], axis=-1)
    return Reprojection(view_index, coords, mask, delta, depth)


def pose_distance(cam_a, cam_b):
    """Camera-center distance with a small view-angle tie-break term."""
    d = np.linalg.norm(cam_a.center - cam_b.center)
    cos = np.clip(cam_a.optical_axis @ cam_b.optical_axis, -1.0, 1.0)
    return d + 1e-3 * np.arccos(cos)


def select_source_views(poses, query, m, rng=None, density_range=(1, 3), exclude=()):
    """Pick m distinct source views near the query pose.

    A density factor k is drawn per call from ``density_range`` (inclusive);
    the m views are sampled without replacement from the k*m nearest
    candidates, which simulates varying view density during training.  With
    k=1 (or rng None) this is exactly the m nearest views.
    """
    candidates = [i for i in range(len(poses)) if i not in set(exclude)]
    if len(candidates) < m:
        raise ConfigError(f"need at least {m} candidate views, have {len(candidates)}")
    order = sorted(candidates, key=lambda i: pose_distance(poses[i], query))
    if rng is None:
        k = 1
    else:
        lo, hi = density_range
        k = int(rng.integers(lo, hi + 1))
    pool = order[:max(m, min(k * m, len(order)))]
    if len(pool) == m or rng is None:
        return pool[:m]
    picked = rng.choice(len(pool), size=m, replace=False)
    return [pool[i] for i in sorted(picked)]
