"""Reference softmax partition-of-unity estimator.

The estimator is ``g_hat(x) = sum_i beta_i(x) g(c_i)`` with weights
``beta(x) = softmax(M_g (r^2 - ||x - c_i||^2))``.  Expanding the square, the
``||x||^2`` term is common to every logit and drops out, leaving the affine
logits ``2 M_g <x, c_i> - M_g ||c_i||^2`` that dot-product attention can
produce.  Both forms are available; the affine one is the default.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .domain import (
    CubeDomain,
    Covering,
    DomainError,
    ManifoldSpec,
    covering_for,
    sample_close_pairs,
)
from .numeric_core import NumericError, stable_softmax

MODES = ("theoretical", "calibrated")
INV_E = 1.0 / math.e


class AdmissibilityError(ValueError):
    """A configuration falls outside the range where the guarantees apply."""


@dataclass(frozen=True, eq=False)
class HolderTarget:
    """A target function with caller-certified Hölder data.

    ``evaluator`` maps an ``(n, dim)`` array to ``n`` values.  ``dist`` is
    Euclidean on cubes and geodesic on manifolds.
    """

    evaluator: Callable[[np.ndarray], np.ndarray]
    alpha: float
    holder_const: float
    sup_bound: float
    domain: CubeDomain | ManifoldSpec
    name: str = "custom"

    def __post_init__(self):
        if not 0 < self.alpha <= 1:
            raise AdmissibilityError(f"Hölder exponent must lie in (0, 1], got {self.alpha}")
        if self.holder_const < 0:
            raise AdmissibilityError("Hölder constant must be nonnegative")
        if not self.sup_bound > 0:
            raise AdmissibilityError("sup bound B must be positive")

    @property
    def intrinsic_dim(self) -> int:
        return self.domain.intrinsic_dim

    @property
    def ambient_dim(self) -> int:
        return self.domain.ambient_dim

    @property
    def on_manifold(self) -> bool:
        return isinstance(self.domain, ManifoldSpec)

    def __call__(self, x) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(x, dtype=np.float64))
        return np.asarray(self.evaluator(pts), dtype=np.float64).reshape(len(pts))

    def spot_check(self, n_pairs: int = 500, seed=0, slack: float = 1e-9) -> float:
        """Largest ``|g(x)-g(y)| - C_H dist^alpha`` over random pairs and of
        ``|g| - B`` over random points.  Raises when either exceeds ``slack``."""
        rng = np.random.default_rng(seed)
        dom = self.domain
        if isinstance(dom, CubeDomain):
            x = dom.sample(n_pairs, seed=rng, method="random")
            # Mix far pairs with close ones; close pairs stress small alpha.
            near = np.clip(x + rng.normal(scale=0.02, size=x.shape), 0.0, 1.0)
            far = dom.sample(n_pairs, seed=rng, method="random")
            y = np.where(rng.uniform(size=(n_pairs, 1)) < 0.5, near, far)
            dist = np.linalg.norm(x - y, axis=1)
        elif dom.kind == "point_cloud":
            x = dom.sample(n_pairs, seed=rng, method="random")
            y = dom.sample(n_pairs, seed=rng, method="random")
            dist = dom.geodesic(x, y)
        else:
            x, y = sample_close_pairs(dom, n_pairs, 2 * dom.radius, seed=rng)
            dist = dom.geodesic(x, y)
        gx, gy = self(x), self(y)
        excess = float(np.max(np.abs(gx - gy) - self.holder_const * dist**self.alpha))
        over = float(np.max(np.abs(np.concatenate([gx, gy]))) - self.sup_bound)
        worst = max(excess, over)
        if excess > slack:
            raise AdmissibilityError(
                f"target {self.name!r} violates its Hölder certificate by {excess:.3g}")
        if over > slack:
            raise AdmissibilityError(f"target {self.name!r} exceeds its sup bound by {over:.3g}")
        return worst


@dataclass(frozen=True)
class PouConfig:
    epsilon: float
    mode: str = "theoretical"

    def __post_init__(self):
        if self.mode not in MODES:
            raise AdmissibilityError(f"mode must be one of {MODES}, got {self.mode!r}")

    def check(self, target: HolderTarget) -> None:
        check_accuracy(self.epsilon, target)


def check_accuracy(eps: float, target: HolderTarget) -> None:
    """Raise unless ``eps`` lies in the admissible accuracy range."""
    if not (isinstance(eps, (int, float)) and math.isfinite(eps)) or not 0 < eps <= INV_E:
        raise AdmissibilityError(
            f"accuracy precondition violated: epsilon={eps} must lie in (0, 1/e]")
    if target.on_manifold:
        cap = 8 * target.holder_const * (target.domain.reach / 4) ** target.alpha
        if target.holder_const > 0 and eps > cap:
            raise AdmissibilityError(
                f"manifold accuracy precondition violated: epsilon={eps} exceeds "
                f"8 C_H (reach/4)^alpha = {cap:.6g}")


# --------------------------------------------------------------------------
# Closed-form radius, count bound and scaling
# --------------------------------------------------------------------------


def covering_radius(eps: float, target: HolderTarget) -> float:
    """``(eps / (k C_H))^(1/alpha)`` with ``k = 4`` on cubes and 8 on manifolds."""
    k = 8.0 if target.on_manifold else 4.0
    if target.holder_const == 0:
        return math.inf
    return (eps / (k * target.holder_const)) ** (1.0 / target.alpha)


def manifold_covering_constant(spec: ManifoldSpec) -> float:
    """``3^d Vol d^(d/2)``, the covering-number constant of the manifold."""
    d = spec.intrinsic_dim
    return 3.0**d * spec.volume * d ** (d / 2)


def count_bound(eps: float, target: HolderTarget) -> float:
    """Upper bound on the number of centers at accuracy ``eps``."""
    a, ch, d = target.alpha, target.holder_const, target.intrinsic_dim
    if target.on_manifold:
        return manifold_covering_constant(target.domain) * (8 * ch) ** (d / a) * eps ** (-d / a)
    return (math.sqrt(d) * (4 * ch) ** (1 / a)) ** d * eps ** (-d / a)


def theoretical_scaling(eps: float, target: HolderTarget, covering_const: float | None = None) -> float:
    """Closed-form ``M_g`` guaranteeing ``sup |g_hat - g| <= eps``.

    The log term is clamped at zero: the bracket is only an upper bound on
    ``log(4 B C_g / eps) / log(1/eps)`` when that term is nonnegative.
    ``covering_const`` overrides the manifold covering constant.
    """
    check_accuracy(eps, target)
    a, ch, d, B = target.alpha, target.holder_const, target.intrinsic_dim, target.sup_bound
    if ch == 0:
        return 1.0  # every center carries the same value; any scale is exact
    if target.on_manifold:
        cm = manifold_covering_constant(target.domain) if covering_const is None else covering_const
        pref = (8 * ch) ** (2 / a) / 3
        log_term = math.log(4 * B * cm * (8 * ch) ** (d / a))
    else:
        pref = (4 * ch) ** (2 / a) / 3
        log_term = math.log(4 * B * (math.sqrt(d) * (4 * ch) ** (1 / a)) ** d)
    bracket = max(log_term, 0.0) + (d + a) / a
    return pref * bracket * eps ** (-2 / a) * math.log(1 / eps)


# --------------------------------------------------------------------------
# Approximator
# --------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class PouApproximator:
    covering: Covering
    values: np.ndarray
    scaling: float
    domain: CubeDomain | ManifoldSpec | None = None
    info: dict = field(default_factory=dict)

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=np.float64).reshape(-1)
        if len(vals) != self.covering.count:
            raise NumericError(
                f"{len(vals)} values for {self.covering.count} centers")
        if not (math.isfinite(self.scaling) and self.scaling > 0):
            raise NumericError(f"scaling M_g must be positive and finite, got {self.scaling}")
        vals.setflags(write=False)
        object.__setattr__(self, "values", vals)

    @property
    def centers(self) -> np.ndarray:
        return self.covering.centers

    def _points(self, x) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(x, dtype=np.float64))
        if pts.shape[1] != self.covering.dim:
            raise DomainError(f"expected points of dimension {self.covering.dim}, got {pts.shape[1]}")
        if self.domain is not None:
            self.domain.validate(pts)
        return pts

    def logits(self, x) -> np.ndarray:
        """Affine logits ``2 M_g <x, c_i> - M_g ||c_i||^2``, shape ``(n, C)``."""
        pts = self._points(x)
        c = self.centers
        return 2 * self.scaling * (pts @ c.T) - self.scaling * np.sum(c * c, axis=1)

    def distance_logits(self, x) -> np.ndarray:
        pts = self._points(x)
        sq = np.sum((pts[:, None, :] - self.centers[None, :, :]) ** 2, axis=2)
        return self.scaling * (self.covering.radius**2 - sq)

    def weights(self, x, form: str = "affine") -> np.ndarray:
        if form == "affine":
            return stable_softmax(self.logits(x), axis=1)
        if form == "distance":
            return stable_softmax(self.distance_logits(x), axis=1)
        raise ValueError(f"unknown weight form {form!r}")

    def __call__(self, x) -> np.ndarray:
        return self.weights(x) @ self.values

    def to_dict(self) -> dict:
        return {"covering": self.covering.to_dict(), "values": self.values.tolist(),
                "M_g": self.scaling}

    @classmethod
    def from_dict(cls, d: dict, domain=None) -> "PouApproximator":
        return cls(Covering.from_dict(d["covering"]), np.asarray(d["values"]), float(d["M_g"]),
                   domain=domain)

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, s: str, domain=None) -> "PouApproximator":
        return cls.from_dict(json.loads(s), domain=domain)


def pou_weights(approx: PouApproximator, x, check: bool = False) -> np.ndarray:
    """Weights at one point.  With ``check`` both logit forms are computed and
    must agree to 1e-10 relative."""
    w = approx.weights(x)[0]
    if check:
        w_dist = approx.weights(x, form="distance")[0]
        if not np.allclose(w, w_dist, rtol=1e-10, atol=1e-300):
            raise NumericError("affine and distance weight forms disagree")
    return w


def pou_eval(approx: PouApproximator, x) -> float:
    return float(approx(x)[0])


# --------------------------------------------------------------------------
# Error scans and construction
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class ScanResult:
    sup_error: float
    n_samples: int
    argmax: np.ndarray


def scan_points(domain, n: int = 10_000, seed=0) -> np.ndarray:
    """Dense grid for intrinsic dimension <= 2, Sobol points otherwise."""
    if n < 100:
        raise ValueError("scans need at least 100 points")
    method = "grid" if domain.intrinsic_dim <= 2 else "sobol"
    if getattr(domain, "kind", "") == "point_cloud":
        method = "grid"
    return domain.sample(n, seed=seed, method=method)


def sup_error(evaluator, target: HolderTarget, n: int = 10_000, seed=0,
              points: np.ndarray | None = None, chunk: int = 2048) -> ScanResult:
    """Sampled maximum of ``|evaluator(x) - g(x)|`` (not an exact supremum)."""
    pts = scan_points(target.domain, n, seed) if points is None else np.atleast_2d(points)
    errs = np.empty(len(pts))
    for s in range(0, len(pts), chunk):
        block = pts[s:s + chunk]
        errs[s:s + chunk] = np.abs(np.asarray(evaluator(block)).reshape(-1) - target(block))
    i = int(np.argmax(errs))
    return ScanResult(float(errs[i]), len(pts), pts[i])


def _pou_from_covering(target, covering, scaling, info) -> PouApproximator:
    if covering.count == 1:
        # A lone center is padded with a copy so the positional grid has P >= 2.
        covering = Covering(np.vstack([covering.centers] * 2), covering.radius, covering.kind)
    values = target(covering.centers)
    return PouApproximator(covering, values, scaling, domain=target.domain, info=info)


def build_pou(target: HolderTarget, cfg: PouConfig, strict: bool = True,
              calib_points: int = 4096, calib_margin: float = 0.9) -> PouApproximator:
    """Covering + center values + scaling at accuracy ``cfg.epsilon``.

    Calibrated mode bisects ``M_g`` for a scanned error of at most
    ``calib_margin * eps`` and never exceeds the closed-form value.
    """
    cfg.check(target)
    eps = cfg.epsilon
    r = covering_radius(eps, target)
    dom = target.domain
    if math.isinf(r):
        r = math.sqrt(dom.ambient_dim) / 2 if isinstance(dom, CubeDomain) else dom.reach / 2
    covering = covering_for(dom, r, strict=strict)
    bound = count_bound(eps, target)
    cm = None
    if isinstance(dom, ManifoldSpec) and target.holder_const > 0:
        # The scaling proof needs count <= C r^-d; widen C if the net is larger.
        cm = max(manifold_covering_constant(dom), covering.count * r**dom.intrinsic_dim)
    m_theory = theoretical_scaling(eps, target, covering_const=cm)
    info = {"epsilon": eps, "mode": cfg.mode, "radius": r, "count_bound": bound,
            "theoretical_scaling": m_theory}
    approx = _pou_from_covering(target, covering, m_theory, info)
    if cfg.mode == "theoretical":
        return approx
    pts = scan_points(dom, calib_points, seed=0)
    goal = calib_margin * eps
    m_cal = calibrate_scaling(lambda m: sup_error(
        _pou_from_covering(target, approx.covering, m, info), target, points=pts).sup_error,
        goal, m_theory)
    return _pou_from_covering(target, approx.covering, m_cal, dict(info, calibrated_scaling=m_cal))


def calibrate_scaling(err_fn, goal: float, cap: float, rel_tol: float = 1e-3,
                      floor: float = 1e-9) -> float:
    """Smallest scale with ``err_fn(m) <= goal``, capped at ``cap``.

    Brackets by doubling (or halving down to ``floor * cap``), then bisects.
    """
    m = min(1.0, cap)
    if err_fn(m) > goal:
        while True:
            if m >= cap:
                return cap
            m = min(2 * m, cap)
            if err_fn(m) <= goal:
                break
        lo, hi = m / 2, m
    else:
        hi = m
        while True:
            lo = hi / 2
            if lo < floor * cap:
                return hi
            if err_fn(lo) > goal:
                break
            hi = lo
    while hi - lo > rel_tol * hi:
        mid = 0.5 * (lo + hi)
        if err_fn(mid) <= goal:
            hi = mid
        else:
            lo = mid
    return hi
