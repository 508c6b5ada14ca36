"""Point-level geometric analysis: sampling, neighbourhoods, normals, curvature
and the geometric-variation score used to pick which tokens to mask."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree


class DegenerateInputError(ValueError):
    pass


@dataclass
class PointCloud:
    points: np.ndarray
    labels: np.ndarray | None = None
    category: str | None = None

    def __post_init__(self):
        self.points = np.ascontiguousarray(self.points, dtype=np.float64).reshape(-1, 3)
        if len(self.points) < 1:
            raise ValueError("a point cloud needs at least one point")
        if not np.all(np.isfinite(self.points)):
            raise ValueError("point coordinates must be finite")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=bool).reshape(-1)
            if len(self.labels) != len(self.points):
                raise ValueError(f"{len(self.labels)} labels for {len(self.points)} points")

    def __len__(self) -> int:
        return len(self.points)


@dataclass
class GeometryProfile:
    center_indices: np.ndarray
    radius: float
    neighborhoods: list[np.ndarray]
    normals: np.ndarray
    curvatures: np.ndarray
    var_norm: np.ndarray
    var_curv: np.ndarray
    var_geom: np.ndarray
    eigenvalues: np.ndarray
    centroids: np.ndarray
    alpha: float = 1.0
    beta: float = 10.0
    eta: float = 7.0
    extra: dict = field(default_factory=dict)


def _points(cloud) -> np.ndarray:
    return cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=np.float64)


def farthest_point_sample(cloud, m: int, start: int | None = None) -> np.ndarray:
    """Greedy farthest point sampling.

    Starts from the point nearest the centroid unless ``start`` is given.
    Distances are compared squared; ties go to the lowest index.
    """
    pts = _points(cloud)
    n = len(pts)
    if not 1 <= m <= n:
        raise ValueError(f"cannot sample {m} centers from {n} points")
    if start is None:
        start = int(np.argmin(((pts - pts.mean(axis=0)) ** 2).sum(axis=1)))
    chosen = np.empty(m, dtype=np.int64)
    chosen[0] = start
    dist = ((pts - pts[start]) ** 2).sum(axis=1)
    dist[start] = -1.0
    for i in range(1, m):
        nxt = int(np.argmax(dist))
        chosen[i] = nxt
        np.minimum(dist, ((pts - pts[nxt]) ** 2).sum(axis=1), out=dist)
        dist[chosen[: i + 1]] = -1.0
    return chosen


def adaptive_radius(centers: np.ndarray, eta: float) -> float:
    """``eta`` times the mean distance from each center to its nearest other center."""
    centers = np.asarray(centers, dtype=np.float64)
    if len(centers) < 2:
        raise DegenerateInputError("adaptive radius needs at least two centers")
    if eta <= 0:
        raise ValueError("eta must be positive")
    d, _ = cKDTree(centers).query(centers, k=2)
    return float(eta * d[:, 1].mean())


def radius_neighborhoods(centers: np.ndarray, r: float) -> list[np.ndarray]:
    """Indices of all centers within distance ``r`` of each center (self included).

    Candidates come from a uniform hash grid with cell size ``r``; the final
    test is an exact distance comparison.
    """
    centers = np.asarray(centers, dtype=np.float64)
    if r < 0:
        raise ValueError("radius must be non-negative")
    m = len(centers)
    if r == 0:
        buckets: dict[tuple, list[int]] = {}
        for i, p in enumerate(centers):
            buckets.setdefault(tuple(p), []).append(i)
        return [np.asarray(buckets[tuple(p)], dtype=np.int64) for p in centers]

    # slightly inflated cell so rounding in the division cannot skip a neighbour cell
    cells = np.floor(centers / (r * (1.0 + 1e-9))).astype(np.int64)
    grid: dict[tuple, list[int]] = {}
    for i, c in enumerate(map(tuple, cells)):
        grid.setdefault(c, []).append(i)
    grid_arr = {k: np.asarray(v, dtype=np.int64) for k, v in grid.items()}
    offsets = [(a, b, c) for a in (-1, 0, 1) for b in (-1, 0, 1) for c in (-1, 0, 1)]

    out = []
    for i in range(m):
        cx, cy, cz = cells[i]
        cand = [grid_arr[k] for k in ((cx + a, cy + b, cz + c) for a, b, c in offsets) if k in grid_arr]
        cand = np.sort(np.concatenate(cand))
        d = np.sqrt(((centers[cand] - centers[i]) ** 2).sum(axis=1))
        out.append(cand[d <= r])
    return out


def local_covariance(points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Biased (1/|N|) covariance and centroid of a neighbourhood."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if len(points) == 0:
        raise ValueError("empty neighbourhood")
    mu = points.mean(axis=0)
    d = points - mu
    cov = d.T @ d / len(points)
    return 0.5 * (cov + cov.T), mu


_AXIS_PREFERENCE = np.eye(3)[[2, 1, 0]]  # +z, then +y, then +x


def normal_and_curvature(cov: np.ndarray, tie_tol: float = 1e-12):
    """Smallest-eigenvalue eigenvector, surface variation and sorted eigenvalues.

    The normal is oriented so its largest-magnitude component is positive.
    When the smallest eigenvalue is repeated, the normal is the unit vector of
    that eigenspace closest to +z (then +y, then +x).
    """
    cov = np.asarray(cov, dtype=np.float64)
    if cov.shape != (3, 3):
        raise ValueError(f"covariance must be 3x3, got {cov.shape}")
    scale = max(float(np.abs(cov).max()), 1e-300)
    if np.abs(cov - cov.T).max() > 1e-12 * scale:
        raise ValueError("covariance matrix is not symmetric")
    lam, vec = np.linalg.eigh(cov)
    lam = np.clip(lam, 0.0, None)
    trace = lam.sum()

    normal = vec[:, 0]
    tol = tie_tol * max(trace, 1e-300)
    tied = np.abs(lam - lam[0]) <= tol
    if tied.sum() > 1:
        basis = vec[:, tied]
        for axis in _AXIS_PREFERENCE:
            proj = basis @ (basis.T @ axis)
            norm = np.linalg.norm(proj)
            if norm > 1e-8:
                normal = proj / norm
                break
    normal = normal / np.linalg.norm(normal)
    if normal[np.argmax(np.abs(normal))] < 0:
        normal = -normal
    curvature = 0.0 if trace == 0 else min(float(lam[0] / trace), 1.0 / 3.0)
    return normal, curvature, lam


def _axis_angle(n: np.ndarray, others: np.ndarray) -> np.ndarray:
    # angle between lines (not directions), in [0, pi/2]; atan2 form stays accurate near 0
    dot = np.abs(others @ n)
    cross = np.linalg.norm(np.cross(others, n), axis=1)
    return np.arctan2(cross, dot)


def geometric_variation(normals: np.ndarray, curvatures: np.ndarray, neighborhoods,
                        alpha: float = 1.0, beta: float = 10.0):
    """Mean neighbour normal-angle and curvature differences, and their weighted sum."""
    normals = np.asarray(normals, dtype=np.float64)
    curvatures = np.asarray(curvatures, dtype=np.float64)
    m = len(normals)
    var_norm = np.zeros(m)
    var_curv = np.zeros(m)
    for i, nb in enumerate(neighborhoods):
        nb = np.asarray(nb)
        ang = _axis_angle(normals[i], normals[nb])
        ang[nb == i] = 0.0
        var_norm[i] = ang.mean()
        var_curv[i] = np.abs(curvatures[i] - curvatures[nb]).mean()
    return var_norm, var_curv, alpha * var_norm + beta * var_curv


def geometry_profile(cloud, m: int, eta: float = 7.0, alpha: float = 1.0, beta: float = 10.0,
                     center_indices: np.ndarray | None = None) -> GeometryProfile:
    """Run the full center-level analysis on a cloud."""
    pts = _points(cloud)
    idx = farthest_point_sample(pts, m) if center_indices is None else np.asarray(center_indices)
    centers = pts[idx]
    r = adaptive_radius(centers, eta)
    nbs = radius_neighborhoods(centers, r)
    normals = np.empty((len(idx), 3))
    curv = np.empty(len(idx))
    lams = np.empty((len(idx), 3))
    mus = np.empty((len(idx), 3))
    for i, nb in enumerate(nbs):
        cov, mus[i] = local_covariance(centers[nb])
        normals[i], curv[i], lams[i] = normal_and_curvature(cov)
    vn, vc, vg = geometric_variation(normals, curv, nbs, alpha, beta)
    return GeometryProfile(idx, r, nbs, normals, curv, vn, vc, vg, lams, mus, alpha, beta, eta)
