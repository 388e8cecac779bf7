"""Built-in targets with analytically certified Hölder data, plus table targets."""

from __future__ import annotations

import json
import math

import numpy as np
from scipy.interpolate import griddata

from .domain import CubeDomain, ManifoldSpec
from .softpou import AdmissibilityError, HolderTarget

BUILTIN_TARGETS = ("sin1d", "quad2d", "circle_angle", "sphere_zonal", "linear1d")


def sin1d() -> HolderTarget:
    """``sin(2 pi x) / (2 pi)`` on ``[0, 1]``: slope at most 1."""
    return HolderTarget(lambda x: np.sin(2 * np.pi * x[:, 0]) / (2 * np.pi),
                        alpha=1.0, holder_const=1.0, sup_bound=1 / (2 * np.pi),
                        domain=CubeDomain(1), name="sin1d")


def quad2d(dim: int = 2) -> HolderTarget:
    """``||x - 0.5||^2 / d``; the gradient norm is at most ``1/sqrt(d)``."""
    return HolderTarget(lambda x: np.sum((x - 0.5) ** 2, axis=1) / dim,
                        alpha=1.0, holder_const=1 / math.sqrt(dim), sup_bound=0.25,
                        domain=CubeDomain(dim), name="quad2d")


def linear1d(slope: float = 0.3) -> HolderTarget:
    """``slope * x`` on ``[0, 1]``; small enough to give four centers at eps=0.35."""
    return HolderTarget(lambda x: slope * x[:, 0], alpha=1.0, holder_const=abs(slope),
                        sup_bound=max(abs(slope), 1e-8), domain=CubeDomain(1), name="linear1d")


def circle_angle(spec: ManifoldSpec | None = None, marked_angle: float = 0.0) -> HolderTarget:
    """Geodesic distance to a marked point, divided by pi.

    Distances are 1-Lipschitz in the geodesic metric, so ``C_H = 1/pi``; the
    maximum ``pi R / pi = R`` is attained at the antipode.
    """
    spec = ManifoldSpec.circle() if spec is None else spec
    p = spec.embed(np.array([marked_angle]))

    def g(x):
        return spec.geodesic(x, np.repeat(p, len(x), axis=0)) / np.pi

    return HolderTarget(g, alpha=1.0, holder_const=1 / np.pi, sup_bound=spec.radius,
                        domain=spec, name="circle_angle")


def sphere_zonal(spec: ManifoldSpec | None = None) -> HolderTarget:
    """First coordinate relative to the sphere center.

    Chord length never exceeds geodesic length, hence ``C_H = 1`` and
    ``B = R``.
    """
    spec = ManifoldSpec.sphere() if spec is None else spec
    c0 = spec.center[0]
    return HolderTarget(lambda x: x[:, 0] - c0, alpha=1.0, holder_const=1.0,
                        sup_bound=spec.radius, domain=spec, name="sphere_zonal")


def builtin(name: str, dim: int | None = None) -> HolderTarget:
    if name == "sin1d":
        return sin1d()
    if name == "quad2d":
        return quad2d(2 if dim is None else dim)
    if name == "linear1d":
        return linear1d()
    if name == "circle_angle":
        return circle_angle()
    if name == "sphere_zonal":
        return sphere_zonal()
    raise AdmissibilityError(f"unknown target {name!r}; built-ins are {BUILTIN_TARGETS}")


def table_target(points, values, alpha: float, holder_const: float, sup_bound: float,
                 domain: CubeDomain | None = None, name: str = "custom-table",
                 check: bool = True) -> HolderTarget:
    """Interpolated lookup table on a cube with user-declared Hölder data.

    1-D tables use piecewise-linear interpolation; higher dimensions use
    linear interpolation inside the convex hull and nearest-neighbour outside.
    The certificate is spot-checked unless ``check`` is false.
    """
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    if pts.shape[0] == 1 and pts.shape[1] > 1 and np.ndim(points) == 1:
        pts = pts.T
    vals = np.asarray(values, dtype=np.float64).reshape(-1)
    if len(vals) != len(pts):
        raise AdmissibilityError("table points and values differ in length")
    dom = CubeDomain(pts.shape[1]) if domain is None else domain
    if dom.dim == 1:
        order = np.argsort(pts[:, 0])
        xs, ys = pts[order, 0], vals[order]

        def g(x):
            return np.interp(x[:, 0], xs, ys)
    else:
        def g(x):
            out = griddata(pts, vals, x, method="linear")
            miss = np.isnan(out)
            if np.any(miss):
                out[miss] = griddata(pts, vals, x[miss], method="nearest")
            return out

    target = HolderTarget(g, alpha=alpha, holder_const=holder_const, sup_bound=sup_bound,
                          domain=dom, name=name)
    if check:
        target.spot_check()
    return target


def load_table(path: str) -> HolderTarget:
    """Read ``{"points", "values", "alpha", "holder_const", "sup_bound"}`` JSON."""
    with open(path) as fh:
        spec = json.load(fh)
    try:
        return table_target(spec["points"], spec["values"], float(spec["alpha"]),
                            float(spec["holder_const"]), float(spec["sup_bound"]),
                            name=spec.get("name", "custom-table"))
    except KeyError as exc:
        raise AdmissibilityError(f"table file is missing field {exc}") from None
