"""Input domains, their coverings and geometric sanity checks.

Two domain families are supported:

* :class:`CubeDomain` -- the unit cube ``[0, 1]^d`` with the Euclidean metric.
* :class:`ManifoldSpec` -- a compact manifold embedded in ``[0, 1]^D``: a circle,
  a 2-sphere, a flat torus in R^4, or an arbitrary point cloud.  Built-ins
  carry analytic reach, volume and geodesics; point clouds use a k-NN graph.

Coverings are finite center sets with a radius such that every domain point
lies within the radius (Euclidean, ambient) of some center.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import dijkstra
from scipy.spatial import cKDTree
from scipy.special import gamma as gamma_fn
from scipy.stats import qmc

_CEIL_SLACK = 1e-12  # keeps ceil(3.0000000000000004) at 3
_GAP_SLACK = 1e-12

MANIFOLD_KINDS = ("circle", "sphere", "flat_torus", "point_cloud")


class DomainError(ValueError):
    """Invalid domain, covering radius or off-domain point."""


def _ceil(x: float) -> int:
    return max(1, int(math.ceil(x - _CEIL_SLACK)))


def _sobol(dim: int, n: int, seed) -> np.ndarray:
    m = max(0, int(math.ceil(math.log2(max(n, 1)))))
    return qmc.Sobol(d=dim, scramble=True, seed=seed).random_base2(m)[:n]


# --------------------------------------------------------------------------
# Cube
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class CubeDomain:
    dim: int
    kind: str = field(default="cube", init=False)

    def __post_init__(self):
        if self.dim < 1:
            raise DomainError("cube dimension must be >= 1")

    @property
    def ambient_dim(self) -> int:
        return self.dim

    @property
    def intrinsic_dim(self) -> int:
        return self.dim

    def contains(self, points, tol: float = 1e-12) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
        return np.all((pts >= -tol) & (pts <= 1.0 + tol), axis=1)

    def validate(self, points, tol: float = 1e-12) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
        if pts.shape[1] != self.dim:
            raise DomainError(f"expected points of dimension {self.dim}, got {pts.shape[1]}")
        if not np.all(self.contains(pts, tol)):
            raise DomainError("point outside the unit cube")
        return pts

    def distance(self, x, y) -> np.ndarray:
        x = np.atleast_2d(x)
        y = np.atleast_2d(y)
        return np.linalg.norm(x - y, axis=-1)

    def sample(self, n: int, seed=0, method: str = "sobol") -> np.ndarray:
        """Points of the cube.

        ``grid`` gives a tensor grid including the boundary (about ``n``
        points), ``sobol`` a scrambled Sobol set, ``random`` iid uniforms.
        """
        if method == "grid":
            m = max(2, int(round(n ** (1.0 / self.dim))))
            axes = [np.linspace(0.0, 1.0, m)] * self.dim
            mesh = np.meshgrid(*axes, indexing="ij")
            return np.stack([g.ravel() for g in mesh], axis=1)
        if method == "sobol":
            return _sobol(self.dim, n, seed)
        if method == "random":
            return np.random.default_rng(seed).uniform(size=(n, self.dim))
        raise DomainError(f"unknown sampling method {method!r}")

    def to_dict(self) -> dict:
        return {"kind": "cube", "dim": self.dim}


# --------------------------------------------------------------------------
# Manifolds
# --------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class ManifoldSpec:
    """An embedded manifold.

    For the built-ins ``radius`` is the circle/sphere radius or the radius of
    each circle factor of the flat torus, and ``center`` the ambient offset.
    ``cloud`` is only set for ``point_cloud``.
    """

    kind: str
    ambient_dim: int
    intrinsic_dim: int
    reach: float
    volume: float
    radius: float = 0.5
    center: tuple = ()
    cloud: np.ndarray | None = None
    knn: int = 10

    def __post_init__(self):
        if self.kind not in MANIFOLD_KINDS:
            raise DomainError(f"unknown manifold kind {self.kind!r}")
        if not self.reach > 0:
            raise DomainError("reach must be positive")
        if self.kind != "point_cloud" and not self.intrinsic_dim < self.ambient_dim:
            raise DomainError("intrinsic dimension must be below the ambient dimension")
        if self.kind == "point_cloud":
            if self.cloud is None or len(self.cloud) == 0:
                raise DomainError("point cloud is empty")

    # -- construction helpers ------------------------------------------------

    @classmethod
    def circle(cls, radius: float = 0.5, center=None) -> "ManifoldSpec":
        c = (0.5, 0.5) if center is None else tuple(float(v) for v in center)
        return cls("circle", 2, 1, reach=radius, volume=2 * math.pi * radius,
                   radius=radius, center=c)

    @classmethod
    def sphere(cls, radius: float = 0.5, center=None) -> "ManifoldSpec":
        c = (0.5, 0.5, 0.5) if center is None else tuple(float(v) for v in center)
        return cls("sphere", 3, 2, reach=radius, volume=4 * math.pi * radius**2,
                   radius=radius, center=c)

    @classmethod
    def flat_torus(cls, radius: float = 0.5, center=None) -> "ManifoldSpec":
        # S^1(a) x S^1(a) in R^4; the embedding is an isometry of the flat torus.
        c = (0.5,) * 4 if center is None else tuple(float(v) for v in center)
        return cls("flat_torus", 4, 2, reach=radius, volume=(2 * math.pi * radius) ** 2,
                   radius=radius, center=c)

    @classmethod
    def point_cloud(cls, points, intrinsic_dim: int, reach: float, knn: int = 10,
                    volume: float | None = None) -> "ManifoldSpec":
        pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
        if pts.size == 0:
            raise DomainError("point cloud is empty")
        vol = estimate_volume(pts, intrinsic_dim, k=knn) if volume is None else float(volume)
        pts.setflags(write=False)
        return cls("point_cloud", pts.shape[1], intrinsic_dim, reach=reach, volume=vol,
                   radius=float("nan"), center=(), cloud=pts, knn=knn)

    @property
    def _c(self) -> np.ndarray:
        return np.asarray(self.center, dtype=np.float64)

    # -- parametrisation -----------------------------------------------------

    def embed(self, params) -> np.ndarray:
        """Map intrinsic parameters to ambient points.

        circle: angle ``phi``; sphere: ``(polar, azimuth)``; torus: ``(u, v)``.
        """
        p = np.asarray(params, dtype=np.float64)
        r = self.radius
        if self.kind == "circle":
            p = p.reshape(-1)
            return self._c + r * np.stack([np.cos(p), np.sin(p)], axis=1)
        p = np.atleast_2d(p)
        if self.kind == "sphere":
            th, ph = p[:, 0], p[:, 1]
            return self._c + r * np.stack(
                [np.sin(th) * np.cos(ph), np.sin(th) * np.sin(ph), np.cos(th)], axis=1)
        if self.kind == "flat_torus":
            u, v = p[:, 0], p[:, 1]
            return self._c + r * np.stack([np.cos(u), np.sin(u), np.cos(v), np.sin(v)], axis=1)
        raise DomainError("point clouds have no parametrisation")

    def angles(self, points) -> np.ndarray:
        x = np.atleast_2d(np.asarray(points, dtype=np.float64)) - self._c
        if self.kind == "circle":
            return np.arctan2(x[:, 1], x[:, 0])
        if self.kind == "flat_torus":
            return np.stack([np.arctan2(x[:, 1], x[:, 0]), np.arctan2(x[:, 3], x[:, 2])], axis=1)
        raise DomainError(f"no angle chart for {self.kind}")

    # -- membership ----------------------------------------------------------

    def off_manifold_distance(self, points) -> np.ndarray:
        x = np.atleast_2d(np.asarray(points, dtype=np.float64))
        if x.shape[1] != self.ambient_dim:
            raise DomainError(f"expected ambient dimension {self.ambient_dim}, got {x.shape[1]}")
        if self.kind in ("circle", "sphere"):
            return np.abs(np.linalg.norm(x - self._c, axis=1) - self.radius)
        if self.kind == "flat_torus":
            y = x - self._c
            a = np.abs(np.linalg.norm(y[:, :2], axis=1) - self.radius)
            b = np.abs(np.linalg.norm(y[:, 2:], axis=1) - self.radius)
            return np.hypot(a, b)
        dist, _ = self._tree.query(x)
        return dist

    def contains(self, points, tol: float = 1e-9) -> np.ndarray:
        return self.off_manifold_distance(points) <= tol

    def validate(self, points, tol: float = 1e-9) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
        if not np.all(self.contains(pts, tol)):
            raise DomainError(f"point off the {self.kind} beyond tolerance {tol}")
        return pts

    def fits_unit_cube(self, tol: float = 1e-12) -> bool:
        pts = self.sample(4096, seed=0, method="grid")
        return bool(np.all((pts >= -tol) & (pts <= 1 + tol)))

    # -- geodesics -----------------------------------------------------------

    def geodesic(self, x, y) -> np.ndarray:
        """Intrinsic distance between matching rows of ``x`` and ``y``."""
        x = self.validate(x)
        y = self.validate(y)
        if self.kind == "circle":
            u, v = x - self._c, y - self._c
            cross = u[:, 0] * v[:, 1] - u[:, 1] * v[:, 0]
            dot = np.sum(u * v, axis=1)
            return self.radius * np.abs(np.arctan2(cross, dot))
        if self.kind == "sphere":
            u, v = x - self._c, y - self._c
            cross = np.linalg.norm(np.cross(u, v), axis=1)
            dot = np.sum(u * v, axis=1)
            return self.radius * np.arctan2(cross, dot)
        if self.kind == "flat_torus":
            d = self.angles(x) - self.angles(y)
            d = np.abs((d + np.pi) % (2 * np.pi) - np.pi)
            return self.radius * np.hypot(d[:, 0], d[:, 1])
        _, ix = self._tree.query(x)
        _, iy = self._tree.query(y)
        out = np.empty(len(ix))
        for k, (i, j) in enumerate(zip(ix, iy)):
            out[k] = self._graph_distances(int(i))[j]
        return out

    @cached_property
    def _tree(self) -> cKDTree:
        return cKDTree(self.cloud)

    @cached_property
    def _knn_graph(self) -> csr_matrix:
        n = len(self.cloud)
        k = min(self.knn + 1, n)
        dist, idx = self._tree.query(self.cloud, k=k)
        rows = np.repeat(np.arange(n), k - 1)
        g = csr_matrix((dist[:, 1:].ravel(), (rows, idx[:, 1:].ravel())), shape=(n, n))
        return g.maximum(g.T)

    def _graph_distances(self, source: int) -> np.ndarray:
        cache = self.__dict__.setdefault("_sp_cache", {})
        if source not in cache:
            cache[source] = dijkstra(self._knn_graph, directed=False, indices=source)
        return cache[source]

    # -- sampling --------------------------------------------------------------

    def sample(self, n: int, seed=0, method: str = "sobol") -> np.ndarray:
        """Points on the manifold (``grid``, ``sobol`` or ``random``)."""
        if self.kind == "point_cloud":
            if method == "random":
                idx = np.random.default_rng(seed).integers(0, len(self.cloud), size=n)
                return self.cloud[idx]
            if n >= len(self.cloud):
                return np.array(self.cloud)
            idx = np.linspace(0, len(self.cloud) - 1, n).round().astype(int)
            return self.cloud[idx]
        if self.kind == "circle":
            if method == "grid":
                t = np.linspace(0.0, 2 * np.pi, n, endpoint=False)
            elif method == "sobol":
                t = 2 * np.pi * _sobol(1, n, seed)[:, 0]
            elif method == "random":
                t = np.random.default_rng(seed).uniform(0, 2 * np.pi, size=n)
            else:
                raise DomainError(f"unknown sampling method {method!r}")
            return self.embed(t)
        if method == "grid":
            if self.kind == "sphere":
                # Fibonacci lattice: deterministic and area-uniform.
                i = np.arange(n) + 0.5
                th = np.arccos(1 - 2 * i / n)
                ph = np.pi * (1 + 5**0.5) * i
                return self.embed(np.stack([th, ph], axis=1))
            m = max(2, int(round(math.sqrt(n))))
            g = np.linspace(0, 2 * np.pi, m, endpoint=False)
            uu, vv = np.meshgrid(g, g, indexing="ij")
            return self.embed(np.stack([uu.ravel(), vv.ravel()], axis=1))
        if method == "sobol":
            u = _sobol(2, n, seed)
        elif method == "random":
            u = np.random.default_rng(seed).uniform(size=(n, 2))
        else:
            raise DomainError(f"unknown sampling method {method!r}")
        if self.kind == "sphere":
            th = np.arccos(np.clip(1 - 2 * u[:, 0], -1.0, 1.0))
            return self.embed(np.stack([th, 2 * np.pi * u[:, 1]], axis=1))
        return self.embed(2 * np.pi * u)

    def distance(self, x, y) -> np.ndarray:
        return self.geodesic(x, y)

    def to_dict(self) -> dict:
        d = {"kind": self.kind, "ambient_dim": self.ambient_dim,
             "intrinsic_dim": self.intrinsic_dim, "reach": self.reach, "volume": self.volume}
        if self.kind != "point_cloud":
            d.update(radius=self.radius, center=list(self.center))
        return d


def estimate_volume(points, intrinsic_dim: int, k: int = 10) -> float:
    """k-NN volume estimate of a uniformly sampled ``intrinsic_dim`` manifold.

    Each sample owns roughly a d-ball reaching its k-th neighbour divided by k.
    Only used for reporting covering constants.
    """
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    n = len(pts)
    if n <= k:
        raise DomainError(f"need more than k={k} points to estimate a volume")
    dist, _ = cKDTree(pts).query(pts, k=k + 1)
    rk = dist[:, -1]
    d = intrinsic_dim
    unit_ball = math.pi ** (d / 2) / gamma_fn(d / 2 + 1)
    return float(n * unit_ball * np.mean(rk**d) / k)


# --------------------------------------------------------------------------
# Coverings
# --------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class Covering:
    centers: np.ndarray
    radius: float
    kind: str

    def __post_init__(self):
        c = np.atleast_2d(np.asarray(self.centers, dtype=np.float64))
        c.setflags(write=False)
        object.__setattr__(self, "centers", c)

    @property
    def count(self) -> int:
        return len(self.centers)

    @property
    def dim(self) -> int:
        return self.centers.shape[1]

    def to_dict(self) -> dict:
        return {"kind": self.kind, "radius": self.radius, "count": self.count,
                "centers": self.centers.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "Covering":
        cov = cls(np.asarray(d["centers"], dtype=np.float64), float(d["radius"]), d["kind"])
        if "count" in d and int(d["count"]) != cov.count:
            raise DomainError("covering count does not match its centers")
        return cov

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, s: str) -> "Covering":
        return cls.from_dict(json.loads(s))


def grid_covering(dim: int, radius: float) -> Covering:
    """Midpoints of a uniform grid whose cells have circumradius <= ``radius``.

    The per-axis cell count is ``ceil(sqrt(d) / (2 r))``; cells are then
    shrunk to tile ``[0, 1]`` exactly.
    """
    if dim < 1:
        raise DomainError("dimension must be >= 1")
    if not radius > 0:
        raise DomainError("covering radius must be positive")
    if radius > math.sqrt(dim) / 2 + _CEIL_SLACK:
        raise DomainError(f"radius {radius} exceeds sqrt(d)/2 = {math.sqrt(dim) / 2}")
    n = _ceil(math.sqrt(dim) / (2 * radius))
    mids = (np.arange(n) + 0.5) / n
    mesh = np.meshgrid(*([mids] * dim), indexing="ij")
    centers = np.stack([m.ravel() for m in mesh], axis=1)
    return Covering(centers, float(radius), "cube")


def _dedupe(points: np.ndarray, tol: float = 1e-12) -> np.ndarray:
    keep: list[int] = []
    tree = cKDTree(points)
    dropped = np.zeros(len(points), dtype=bool)
    for i in range(len(points)):
        if dropped[i]:
            continue
        keep.append(i)
        for j in tree.query_ball_point(points[i], tol):
            if j != i:
                dropped[j] = True
    return points[keep]


def manifold_covering(spec: ManifoldSpec, radius: float, strict: bool = True) -> Covering:
    """Closed Euclidean ``radius``-covering of a manifold by on-manifold centers.

    ``strict`` enforces ``radius <= reach / 2``, the regime where geodesic and
    ambient distances are comparable.
    """
    if not radius > 0:
        raise DomainError("covering radius must be positive")
    if strict and radius > spec.reach / 2 * (1 + _CEIL_SLACK):
        raise DomainError(f"radius {radius} exceeds reach/2 = {spec.reach / 2}")
    R = spec.radius
    if spec.kind == "circle":
        if radius >= 2 * R:
            n = 1
        else:
            n = _ceil(math.pi / (2 * math.asin(radius / (2 * R))))
        centers = spec.embed(2 * np.pi * np.arange(n) / n)
    elif spec.kind == "sphere":
        psi = math.pi if radius >= 2 * R else 2 * math.asin(radius / (2 * R))
        n_lat = _ceil(math.pi / psi)
        dth = math.pi / n_lat
        params = [(0.0, 0.0)]
        if n_lat > 1:
            params.append((math.pi, 0.0))
        for i in range(1, n_lat - 1):
            lo, hi = i * dth, (i + 1) * dth
            s_max = 1.0 if lo <= math.pi / 2 <= hi else max(math.sin(lo), math.sin(hi))
            n_lon = _ceil(2 * math.pi * s_max / psi)
            th = (i + 0.5) * dth
            params.extend((th, (k + 0.5) * 2 * math.pi / n_lon) for k in range(n_lon))
        centers = spec.embed(np.array(params))
    elif spec.kind == "flat_torus":
        # Flat cell half-diagonal a*pi*sqrt(2)/n bounds the geodesic, hence the chord.
        n = _ceil(math.sqrt(2) * math.pi * R / radius)
        g = 2 * np.pi * np.arange(n) / n
        uu, vv = np.meshgrid(g, g, indexing="ij")
        centers = spec.embed(np.stack([uu.ravel(), vv.ravel()], axis=1))
    else:
        centers = _farthest_point_net(spec.cloud, radius)
    return Covering(_dedupe(centers), float(radius), spec.kind)


def _farthest_point_net(points: np.ndarray, radius: float) -> np.ndarray:
    chosen = [0]
    gap = np.linalg.norm(points - points[0], axis=1)
    while gap.max() > radius:
        i = int(np.argmax(gap))
        chosen.append(i)
        gap = np.minimum(gap, np.linalg.norm(points - points[i], axis=1))
    return points[chosen]


def covering_for(domain, radius: float, strict: bool = True) -> Covering:
    if isinstance(domain, CubeDomain):
        return grid_covering(domain.dim, min(radius, math.sqrt(domain.dim) / 2))
    return manifold_covering(domain, radius, strict=strict)


@dataclass(frozen=True)
class CoveringReport:
    max_gap: float
    ok: bool
    n_samples: int


def verify_covering(covering: Covering, domain, n_samples: int = 10_000, seed=0) -> CoveringReport:
    """Scan quasi-random domain points and record the worst nearest-center gap."""
    if n_samples < 1:
        raise DomainError("n_samples must be >= 1")
    pts = domain.sample(n_samples, seed=seed, method="sobol")
    if isinstance(domain, CubeDomain):
        # Sobol never hits the corners, which are the worst case for grids.
        corners = np.array(np.meshgrid(*([[0.0, 1.0]] * domain.dim), indexing="ij"))
        pts = np.vstack([pts, corners.reshape(domain.dim, -1).T])
    if covering.count == 0:
        return CoveringReport(float("inf"), False, len(pts))
    gap, _ = cKDTree(covering.centers).query(pts)
    max_gap = float(gap.max())
    return CoveringReport(max_gap, max_gap <= covering.radius * (1 + _GAP_SLACK), len(pts))


# --------------------------------------------------------------------------
# Metric equivalence
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class MetricReport:
    n_pairs: int
    violations: int
    max_ratio: float
    ok: bool


def sample_close_pairs(spec: ManifoldSpec, n_pairs: int, max_chord: float, seed=0):
    """Pairs of manifold points with ``||x - y|| <= max_chord``."""
    rng = np.random.default_rng(seed)
    xs, ys = [], []
    need = n_pairs
    while need > 0:
        m = max(2 * need, 64)
        x = spec.sample(m, seed=rng, method="random")
        if spec.kind == "circle":
            step = rng.uniform(-1, 1, m) * 2 * math.asin(min(1.0, max_chord / (2 * spec.radius)))
            y = spec.embed(spec.angles(x) + step)
        elif spec.kind == "flat_torus":
            step = rng.uniform(-1, 1, (m, 2)) * max_chord / spec.radius
            y = spec.embed(spec.angles(x) + step)
        elif spec.kind == "sphere":
            # Rotate towards a random tangent direction by a bounded angle.
            u = (x - spec._c) / spec.radius
            t = rng.normal(size=(m, 3))
            t -= np.sum(t * u, axis=1, keepdims=True) * u
            t /= np.linalg.norm(t, axis=1, keepdims=True)
            ang = rng.uniform(0, 1, (m, 1)) * 2 * math.asin(min(1.0, max_chord / (2 * spec.radius)))
            y = spec._c + spec.radius * (np.cos(ang) * u + np.sin(ang) * t)
        else:
            y = spec.sample(m, seed=rng, method="random")
        ok = np.linalg.norm(x - y, axis=1) <= max_chord
        xs.append(x[ok][:need])
        ys.append(y[ok][:need])
        need -= int(min(ok.sum(), need))
    return np.vstack(xs), np.vstack(ys)


def check_metric_equivalence(spec: ManifoldSpec, n_pairs: int = 1000, seed=0,
                             slack: float = 1e-9) -> MetricReport:
    """Check ``d_M(x, y) <= 2 ||x - y||`` on pairs with ``||x - y|| <= reach / 2``."""
    if spec.kind == "point_cloud":
        raise DomainError("metric equivalence is only checked on built-in manifolds")
    x, y = sample_close_pairs(spec, n_pairs, spec.reach / 2, seed)
    chord = np.linalg.norm(x - y, axis=1)
    geo = spec.geodesic(x, y)
    viol = int(np.sum(geo > 2 * chord + slack))
    nz = chord > 0
    ratio = float(np.max(geo[nz] / chord[nz])) if np.any(nz) else 1.0
    return MetricReport(len(chord), viol, ratio, viol == 0)


def domain_from_dict(d: dict):
    if d["kind"] == "cube":
        return CubeDomain(int(d["dim"]))
    factory = {"circle": ManifoldSpec.circle, "sphere": ManifoldSpec.sphere,
               "flat_torus": ManifoldSpec.flat_torus}.get(d["kind"])
    if factory is None:
        raise DomainError(f"cannot rebuild domain of kind {d['kind']!r}")
    return factory(radius=d.get("radius", 0.5), center=d.get("center"))
