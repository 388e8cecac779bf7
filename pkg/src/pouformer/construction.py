"""Explicit weights that make a two-block Transformer evaluate a softmax POU.

Layout of the embedding (``D = d + 4`` rows, 0-based):

    rows 0..d-1   input coordinates (token 1 only)
    row  d        token-1 indicator
    row  d+1      zero slot, later holds the attention-derived indicator
    rows d+2,d+3  sin(theta_j), cos(theta_j) with theta_j = 2 pi j / P

Block 1 attention has ``P + 2`` heads.  Head ``h <= P`` rotates the positional
query by ``theta_1 - theta_h`` so that token ``h`` attends mostly to token 1
and reads the affine feature ``T_h(x) = 2 M_g <c_h, x> - M_g ||c_h||^2`` and the
value ``g(c_h)``.  The last two heads carry the indicator and the positional
rows.  Block 1 FFN thresholds the indicator back to exact 0/1 and rescales the
positional rows.  Block 2 attention uses the indicator as query and ``T`` as
key, so token 1 computes ``softmax(T) . g(c)``, which the readout returns.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .domain import ManifoldSpec
from .numeric_core import log_sum_exp
from .softpou import (
    AdmissibilityError,
    HolderTarget,
    PouApproximator,
    PouConfig,
    build_pou,
    manifold_covering_constant,
)
from .transformer import Block, Head, TransformerParams

B_FLOOR = 1e-8


class ConstructionError(ValueError):
    """The synthesised network would violate one of its own preconditions."""


# --------------------------------------------------------------------------
# Positional-attention scalars
# --------------------------------------------------------------------------


def angles(P: int) -> np.ndarray:
    """``theta_j = 2 pi j / P`` for ``j = 1..P``."""
    return 2 * np.pi * np.arange(1, P + 1) / P


def spectral_gap(P: int) -> float:
    if P < 2:
        raise ConstructionError(f"need at least two tokens, got P={P}")
    return 1.0 - math.cos(2 * math.pi / P)


def _log_partition(M: float, P: int) -> float:
    return log_sum_exp(M * np.cos(angles(P)))


def eta(M: float, P: int) -> float:
    """Peak positional attention weight ``e^M / sum_l e^(M cos theta_l)``."""
    if P < 2:
        raise ConstructionError(f"need at least two tokens, got P={P}")
    return math.exp(M - _log_partition(M, P))


def lambda_coef(M: float, P: int) -> float:
    """Attention-weighted mean of ``cos theta``, the scale the PE head applies."""
    if P < 2:
        raise ConstructionError(f"need at least two tokens, got P={P}")
    th = angles(P)
    logw = M * np.cos(th) - _log_partition(M, P)
    return float(np.sum(np.exp(logw) * np.cos(th)))


def choose_attention_scale(eps: float, P: int, B: float, M_g: float, d: int) -> float:
    """``M = log(2 (P-1) B (1 + 6 M_g d) / eps) / c``, making the leakage bound ``eps/2``."""
    if P < 2:
        raise ConstructionError(f"need at least two tokens, got P={P}")
    if not eps > 0 or not B > 0 or not M_g > 0 or d < 1:
        raise ConstructionError("attention scale needs eps, B, M_g > 0 and d >= 1")
    return math.log(2 * (P - 1) * B * (1 + 6 * M_g * d) / eps) / spectral_gap(P)


def leakage_bound(P: int, B: float, M_g: float, d: int, M: float) -> float:
    """``(P-1) B (1 + 6 M_g d) e^(-c M)``: worst gap between network and POU."""
    return (P - 1) * B * (1 + 6 * M_g * d) * math.exp(-spectral_gap(P) * M)


# --------------------------------------------------------------------------
# Stage synthesis
# --------------------------------------------------------------------------


def _rotation(t: float) -> np.ndarray:
    c, s = math.cos(t), math.sin(t)
    return np.array([[c, s], [-s, c]])


def synth_preprocessing(input_dim: int, P: int):
    """``(W_E, b_E, PE)`` producing ``[x; 1; 0; sin; cos]`` in token 1."""
    d, D = input_dim, input_dim + 4
    W_E = np.zeros((D, d))
    W_E[:d, :d] = np.eye(d)
    b_E = np.zeros(D)
    b_E[d] = 1.0
    PE = np.zeros((D, P))
    th = angles(P)
    PE[d + 2] = np.sin(th)
    PE[d + 3] = np.cos(th)
    return W_E, b_E, PE


def synth_mha_affine(centers, values, M_g: float, M: float) -> tuple[list[Head], np.ndarray]:
    """Heads and output projection of block 1."""
    centers = np.atleast_2d(np.asarray(centers, dtype=np.float64))
    values = np.asarray(values, dtype=np.float64)
    P, d = centers.shape
    D = d + 4
    et = eta(M, P)
    if not et > 0:
        raise ConstructionError("peak attention weight underflowed to zero")
    th = angles(P)
    K = np.zeros((2, D))
    K[:, d + 2:] = M * np.eye(2)
    heads = []
    for h in range(P):
        Q = np.zeros((2, D))
        Q[:, d + 2:] = _rotation(th[0] - th[h])
        V = np.zeros((2, D))
        V[0, :d] = 2 * M_g * centers[h] / et
        V[0, d] = -M_g * float(centers[h] @ centers[h]) / et
        V[1, d] = values[h] / et
        heads.append(Head(Q, K.copy(), V))
    Q_pos = np.zeros((2, D))
    Q_pos[:, d + 2:] = np.eye(2)
    V_ind = np.zeros((2, D))
    V_ind[0, d] = 1.0
    V_pe = np.zeros((2, D))
    V_pe[:, d + 2:] = np.eye(2)
    heads.append(Head(Q_pos.copy(), K.copy(), V_ind))
    heads.append(Head(Q_pos.copy(), K.copy(), V_pe))

    W_O = np.zeros((D, 2 * (P + 2)))
    W_O[0, 0:2 * P:2] = 1.0
    W_O[1, 1:2 * P:2] = 1.0
    W_O[d + 1, 2 * P] = 1.0
    W_O[d + 2, 2 * P + 2] = 1.0
    W_O[d + 3, 2 * P + 3] = 1.0
    return heads, W_O


def restoration_precondition(M: float, P: int) -> float:
    """``(P+1) e^(-c M)``; the thresholding FFN needs this below one."""
    return (P + 1) * math.exp(-spectral_gap(P) * M)


def synth_ffn_restore(M: float, P: int, input_dim: int):
    """``(W1, b1, W2, b2)`` that snaps the indicator to 0/1 and undoes the PE scale."""
    pre = restoration_precondition(M, P)
    if not pre < 1:
        raise ConstructionError(
            f"indicator restoration precondition violated: (P+1) e^(-cM) = {pre:.6g} >= 1")
    d, D = input_dim, input_dim + 4
    leak = math.exp(-spectral_gap(P) * M)
    W1 = np.vstack([np.eye(D), -np.eye(D)])
    b1 = np.zeros(2 * D)
    b1[d + 1] = -2 * leak
    lam = np.ones(D)
    lam[d + 1] = 1.0 / (eta(M, P) - 2 * leak)
    lam[d + 2:] = 1.0 / lambda_coef(M, P)
    W2 = np.hstack([np.diag(lam), -np.diag(lam)])
    return W1, b1, W2, np.zeros(D)


def synth_mha_pou(input_dim: int) -> tuple[list[Head], np.ndarray]:
    """Single head: query = indicator row, key = T row, value = g row."""
    d, D = input_dim, input_dim + 4
    Q = np.zeros((1, D))
    Q[0, d + 1] = 1.0
    K = np.zeros((1, D))
    K[0, 0] = 1.0
    V = np.zeros((1, D))
    V[0, 1] = 1.0
    W_O = np.zeros((D, 1))
    W_O[0, 0] = 1.0
    return [Head(Q, K, V)], W_O


def synth_ffn_identity(D: int):
    """``z = relu(z) - relu(-z)`` written as a two-layer ReLU map."""
    I = np.eye(D)
    return np.vstack([I, -I]), np.zeros(2 * D), np.hstack([I, -I]), np.zeros(D)


def synth_network(centers, values, M_g: float, M: float) -> TransformerParams:
    """All stages for given centers/values/scales."""
    centers = np.atleast_2d(np.asarray(centers, dtype=np.float64))
    P, d = centers.shape
    D = d + 4
    W_E, b_E, PE = synth_preprocessing(d, P)
    heads1, W_O1 = synth_mha_affine(centers, values, M_g, M)
    block1 = Block(heads1, W_O1, *synth_ffn_restore(M, P, d))
    heads2, W_O2 = synth_mha_pou(d)
    block2 = Block(heads2, W_O2, *synth_ffn_identity(D))
    c = np.zeros(D * P)
    c[0] = 1.0
    return TransformerParams(W_E, b_E, PE, [block1, block2], c)


def closed_form_param_count(d: int, P: int) -> int:
    return 10 * P * (d + 4) + 9 * d * d + 95 * d + 236


# --------------------------------------------------------------------------
# Constants and bounds
# --------------------------------------------------------------------------


@dataclass
class Constants:
    C_P: float
    C_M: float
    C_N: float
    C_log: float
    C_mag: float
    C_B: float
    C_mag_tilde: float


def theory_constants(target: HolderTarget, eps: float | None = None, P: int | None = None,
                     M: float | None = None, covering_const: float | None = None) -> Constants:
    """Constants of the parameter-count and magnitude bounds.

    ``d`` below is the intrinsic dimension and ``dbar`` the width-defining
    ambient dimension (equal on cubes).  The first entry of ``C_mag_tilde``
    bounds the FFN restoration weight and needs ``e B > 1``; otherwise the
    instance value ``1 / (1 - 2 P e^(-cM))`` is used when ``P`` and ``M`` are
    supplied.
    """
    a, ch = target.alpha, target.holder_const
    B = max(target.sup_bound, B_FLOOR)
    d, dbar = target.intrinsic_dim, target.ambient_dim
    if target.on_manifold:
        cm = manifold_covering_constant(target.domain) if covering_const is None else covering_const
        C_P = cm * (16 * ch) ** (d / a)
        C_M = (16 * ch) ** (2 / a) / 3 * (max(math.log(4 * B * C_P), 0.0) + (d + a) / a)
        log_lead = 2.0
    else:
        C_P = d ** (d / 2) * (8 * ch) ** (d / a)
        C_M = (8 * ch) ** (2 / a) / 3 * (
            max(math.log(4 * B * d ** (d / 2) * (4 * ch) ** (d / a)), 0.0) + (d + a) / a)
        log_lead = 4.0
    C_N = 10 * (dbar + 4) * C_P + 9 * dbar**2 + 95 * dbar + 236
    C_log = abs(math.log(log_lead * C_P * B * (1 + 6 * dbar * C_M))) + (d + 2 + a) / a + 2
    C_mag = C_P**2 * C_log / 8
    C_B = max(3 * dbar * C_M, B, 1.0)
    if math.e * B > 1:
        first = 1 / (1 - 1 / (math.e * B))
    elif P is not None and M is not None:
        first = 1 / (1 - 2 * P * math.exp(-spectral_gap(P) * M))
    else:
        first = 0.0
    C_tilde = max(first, C_mag, 2 * (1 + 1 / (2 * math.e * B)) * C_B)
    return Constants(C_P, C_M, C_N, C_log, C_mag, C_B, C_tilde)


@dataclass
class ConstructionMeta:
    epsilon: float
    P: int
    M_g: float
    M: float
    c: float
    eta: float
    lam: float
    input_dim: int
    intrinsic_dim: int
    alpha: float
    sup_bound: float
    mode: str
    B_T: float
    B_R: float
    impl_error_bound: float
    count_bound: float
    param_count_bound: float
    magnitude_bound: float
    constants: Constants
    notes: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "epsilon": self.epsilon, "P": self.P, "M_g": self.M_g, "M": self.M, "c": self.c,
            "eta": self.eta, "lambda": self.lam, "input_dim": self.input_dim,
            "intrinsic_dim": self.intrinsic_dim, "alpha": self.alpha,
            "sup_bound": self.sup_bound, "mode": self.mode,
            "bounds": {"B_T": self.B_T, "B_R": self.B_R,
                       "impl_error": self.impl_error_bound,
                       "P": self.count_bound, "N_total": self.param_count_bound,
                       "M_max": self.magnitude_bound},
            "constants": asdict(self.constants),
            "notes": self.notes,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_dict(cls, d: dict) -> "ConstructionMeta":
        b = d["bounds"]
        return cls(d["epsilon"], int(d["P"]), d["M_g"], d["M"], d["c"], d["eta"], d["lambda"],
                   int(d["input_dim"]), int(d["intrinsic_dim"]), d["alpha"], d["sup_bound"],
                   d["mode"], b["B_T"], b["B_R"], b["impl_error"], b["P"], b["N_total"],
                   b["M_max"], Constants(**d["constants"]), d.get("notes", {}))


def implementation_error_bound(meta: ConstructionMeta) -> float:
    return leakage_bound(meta.P, max(meta.sup_bound, B_FLOOR), meta.M_g, meta.input_dim, meta.M)


def magnitude_bounds(meta: ConstructionMeta) -> dict:
    return {"M_max_bound": meta.magnitude_bound, "N_total_bound": meta.param_count_bound,
            "P_bound": meta.count_bound, "M_g_bound": meta.constants.C_M * meta.epsilon ** (
                -2 / meta.alpha) * math.log(2 / meta.epsilon),
            "constants": asdict(meta.constants)}


# --------------------------------------------------------------------------
# End-to-end assembly
# --------------------------------------------------------------------------


@dataclass
class Construction:
    params: TransformerParams
    meta: ConstructionMeta
    pou: PouApproximator


def check_network_accuracy(eps: float, target: HolderTarget) -> None:
    """Admissible range for the network: ``eps <= 1/e`` and, on manifolds,
    ``eps <= 16 C_H (reach/4)^alpha``."""
    if not (isinstance(eps, (int, float)) and math.isfinite(eps)) or not 0 < eps <= 1 / math.e:
        raise AdmissibilityError(
            f"accuracy precondition violated: epsilon={eps} must lie in (0, 1/e]")
    if target.on_manifold and target.holder_const > 0:
        cap = 16 * target.holder_const * (target.domain.reach / 4) ** target.alpha
        if eps > cap:
            raise AdmissibilityError(
                f"manifold accuracy precondition violated: epsilon={eps} exceeds "
                f"16 C_H (reach/4)^alpha = {cap:.6g}")


def assemble(target: HolderTarget, cfg: PouConfig, strict: bool = True) -> Construction:
    """Network approximating ``target`` to ``cfg.epsilon``.

    The POU is built at ``eps/2`` and the attention scale is chosen so that
    the network-vs-POU gap is at most ``eps/2``.
    """
    eps = cfg.epsilon
    check_network_accuracy(eps, target)
    pou = build_pou(target, PouConfig(eps / 2, cfg.mode), strict=strict)
    P = pou.covering.count
    dbar = target.ambient_dim
    B = max(target.sup_bound, B_FLOOR)
    M = choose_attention_scale(eps, P, B, pou.scaling, dbar)
    params = synth_network(pou.centers, pou.values, pou.scaling, M)
    cm = None
    if isinstance(target.domain, ManifoldSpec):
        r = pou.info["radius"]
        cm = max(manifold_covering_constant(target.domain), P * r ** target.intrinsic_dim)
    consts = theory_constants(target, eps, P, M, covering_const=cm)
    d, a = target.intrinsic_dim, target.alpha
    meta = ConstructionMeta(
        epsilon=eps, P=P, M_g=pou.scaling, M=M, c=spectral_gap(P), eta=eta(M, P),
        lam=lambda_coef(M, P), input_dim=dbar, intrinsic_dim=d, alpha=a, sup_bound=B,
        mode=cfg.mode, B_T=3 * pou.scaling * dbar, B_R=B,
        impl_error_bound=leakage_bound(P, B, pou.scaling, dbar, M),
        count_bound=consts.C_P * eps ** (-d / a),
        param_count_bound=consts.C_N * eps ** (-d / a),
        magnitude_bound=consts.C_mag_tilde * eps ** (-2 * d / a) * math.log(1 / eps),
        constants=consts,
        notes={"target": target.name, "domain": target.domain.to_dict(),
               "radius": pou.info["radius"]},
    )
    return Construction(params, meta, pou)


def construction_shape_ok(params: TransformerParams, d: int, P: int) -> bool:
    """Architecture of the two-block construction for input dimension ``d``."""
    D = d + 4
    if (params.L, params.D, params.P, params.d) != (2, D, P, d):
        return False
    b1, b2 = params.blocks
    return (b1.n_heads == P + 2 and b1.d_k == 2 and b1.d_v == 2 and b1.d_ff == 2 * D
            and b2.n_heads == 1 and b2.d_k == 1 and b2.d_v == 1 and b2.d_ff == 2 * D)
