"""Numerical checks of the construction and rate experiments.

Check functions return plain booleans or small report records; the
``verify_construction`` driver bundles them into one table.
"""

from __future__ import annotations

import csv
import io
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import stats

from .construction import (
    Construction,
    angles,
    closed_form_param_count,
    construction_shape_ok,
    implementation_error_bound,
    spectral_gap,
)
from .domain import CubeDomain, ManifoldSpec, check_metric_equivalence, covering_for, verify_covering
from .numeric_core import NumericError, stable_softmax
from .softpou import (
    HolderTarget,
    PouApproximator,
    PouConfig,
    build_pou,
    check_accuracy,
    covering_radius,
    manifold_covering_constant,
    sup_error,
    theoretical_scaling,
)
from .transformer import ActivationTrace, TransformerParams, count_params, forward, forward_batch, max_magnitude

LIPSCHITZ_LEAD = 612128
COVERING_LEAD = 1224256


# --------------------------------------------------------------------------
# Scalar identities
# --------------------------------------------------------------------------


def softmax_l1_gap(theta, theta_prime) -> tuple[float, float]:
    """``(||softmax(t) - softmax(t')||_1, 2 ||t - t'||_inf)``."""
    a = np.asarray(theta, dtype=np.float64)
    b = np.asarray(theta_prime, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise NumericError(f"softmax arguments differ in shape: {a.shape} vs {b.shape}")
    lhs = float(np.sum(np.abs(stable_softmax(a) - stable_softmax(b))))
    return lhs, 2.0 * float(np.max(np.abs(a - b)))


def check_softmax_lipschitz(theta, theta_prime, slack: float = 1e-12) -> bool:
    lhs, rhs = softmax_l1_gap(theta, theta_prime)
    return lhs <= rhs + slack


def sine_sum_residual(M: float, P: int) -> float:
    """``|sum_k e^(M cos t_k) sin t_k| / sum_k e^(M cos t_k)`` over the uniform grid.

    Terms for ``t`` and ``2 pi - t`` are added together before the outer sum,
    so their cancellation is not swamped by large neighbours.
    """
    if P < 2 or M < 0:
        raise NumericError("sine sum needs P >= 2 and M >= 0")
    th = angles(P)
    w = np.exp(M * (np.cos(th) - 1.0))  # scaled by e^-M
    terms = w * np.sin(th)
    # theta_P = 2 pi pairs with itself; theta_i pairs with theta_{P-i}.
    total = terms[P - 1]
    for i in range((P - 1) // 2):
        total += terms[i] + terms[P - 2 - i]
    if (P - 1) % 2:
        total += terms[(P - 1) // 2]
    return abs(total) / float(np.sum(w))


def check_sine_sum(M: float, P: int, tol: float = 1e-10) -> bool:
    return sine_sum_residual(M, P) <= tol


def covering_number_bound(N_total: float, P: float, D: float, M_max: float, eta: float) -> float:
    """``N_total * log(1224256 P^4 D^22 M_max^26 / eta)``, in log space."""
    for name, v in (("N_total", N_total), ("P", P), ("D", D), ("M_max", M_max), ("eta", eta)):
        if not v > 0:
            raise NumericError(f"{name} must be positive, got {v}")
    return N_total * (math.log(COVERING_LEAD) + 4 * math.log(P) + 22 * math.log(D)
                      + 26 * math.log(M_max) - math.log(eta))


def log_param_lipschitz(P: int, D: int, M_max: float) -> float:
    """``log(612128 P^4 D^22 M_max^25)``."""
    return math.log(LIPSCHITZ_LEAD) + 4 * math.log(P) + 22 * math.log(D) + 25 * math.log(M_max)


# --------------------------------------------------------------------------
# Trace-level checks for constructed networks
# --------------------------------------------------------------------------


def _dims(trace: ActivationTrace) -> tuple[int, int]:
    D, P = trace.Z0.shape
    return D - 4, P


def check_preprocessing(trace: ActivationTrace, x) -> bool:
    """Token 1 is ``[x; 1; 0; sin t_1; cos t_1]``; the rest hold only the PE."""
    d, P = _dims(trace)
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (d,):
        raise NumericError("trace does not match the input dimension")
    th = angles(P)
    want = np.zeros((d + 4, P))
    want[:d, 0] = x
    want[d, 0] = 1.0
    want[d + 2] = np.sin(th)
    want[d + 3] = np.cos(th)
    return bool(np.array_equal(trace.Z0, want))


def attention_identities(trace: ActivationTrace, M: float, eta_val: float, lam: float) -> dict:
    """Peak weight, leakage and PE scale after the first attention block."""
    d, P = _dims(trace)
    Z1 = trace.blocks[0].mha_out
    ind = Z1[d + 1]
    leak = math.exp(-spectral_gap(P) * M)
    th = angles(P)
    pe = np.vstack([np.sin(th), np.cos(th)])
    pe_err = float(np.max(np.abs(Z1[d + 2:] - lam * pe)))
    return {
        "peak_error": abs(ind[0] - eta_val),
        "max_leak": float(np.max(ind[1:])) if P > 1 else 0.0,
        "leak_bound": leak,
        "pe_rel_error": pe_err / abs(lam),
    }


def check_restoration(trace: ActivationTrace, P: int | None = None, tol: float = 1e-12) -> bool:
    """Indicator row equals ``delta_{j,1}`` and PE rows the unit sinusoids."""
    d, P_tr = _dims(trace)
    if P is not None and P != P_tr:
        raise NumericError(f"trace has {P_tr} tokens, expected {P}")
    if len(trace.blocks) < 1 or trace.blocks[0].ffn_out.shape != trace.Z0.shape:
        raise NumericError("trace is not from a constructed network")
    Z = trace.blocks[0].ffn_out
    th = angles(P_tr)
    delta = np.zeros(P_tr)
    delta[0] = 1.0
    return bool(np.max(np.abs(Z[d + 1] - delta)) <= tol
                and np.max(np.abs(Z[d + 2] - np.sin(th))) <= tol
                and np.max(np.abs(Z[d + 3] - np.cos(th))) <= tol)


def readout_recompute_error(trace: ActivationTrace) -> float:
    """Gap between the output and ``softmax(T~) . g~`` read from block 1."""
    Z = trace.blocks[0].ffn_out
    beta = stable_softmax(Z[0])
    return abs(trace.output - float(beta @ Z[1]))


def affine_feature_errors(trace: ActivationTrace, M_g: float, M: float, centers, values,
                          x, B: float) -> dict:
    """Observed feature errors against their leakage bounds."""
    d, P = _dims(trace)
    centers = np.atleast_2d(centers)
    x = np.asarray(x, dtype=np.float64)
    T = 2 * M_g * centers @ x - M_g * np.sum(centers**2, axis=1)
    Z = trace.blocks[0].mha_out
    leak = math.exp(-spectral_gap(P) * M)
    t_err = float(np.max(np.abs(Z[0] - T)))
    r_err = float(np.max(np.abs(Z[1] - np.asarray(values))))
    t_bound = 3 * (P - 1) * M_g * d * leak
    r_bound = (P - 1) * B * leak
    return {"T_error": t_err, "T_bound": t_bound, "R_error": r_err, "R_bound": r_bound,
            "ratio": max(t_err / t_bound if t_bound > 0 else math.inf * (t_err > 0),
                         r_err / r_bound if r_bound > 0 else math.inf * (r_err > 0))}


def check_affine_features(trace, meta, centers, values, x) -> bool:
    e = affine_feature_errors(trace, meta.M_g, meta.M, centers, values, x, meta.sup_bound)
    return e["T_error"] <= e["T_bound"] and e["R_error"] <= e["R_bound"]


# --------------------------------------------------------------------------
# Parameter-perturbation probe
# --------------------------------------------------------------------------


@dataclass
class LipschitzProbeReport:
    trials: int
    delta: float
    max_change: float
    log_bound: float
    changes: list[float]
    passed: bool

    @property
    def bound(self) -> float:
        return math.exp(self.log_bound) if self.log_bound < 700 else math.inf


def probe_inputs(domain, n: int = 256, seed: int = 0) -> np.ndarray:
    return domain.sample(n, seed=seed, method="sobol")


def param_lipschitz_probe(params: TransformerParams, delta: float, trials: int = 50,
                          seed: int = 0, inputs: np.ndarray | None = None) -> LipschitzProbeReport:
    """Perturb every entry by ``uniform(-delta, delta)`` (clamped to the
    original magnitude bound) and record the largest output change on a fixed
    input scan.  Trial ``t`` uses the same direction for every ``delta``."""
    if delta < 0:
        raise NumericError("delta must be nonnegative")
    M_max = max_magnitude(params)
    X = probe_inputs(CubeDomain(params.d), 256, seed) if inputs is None else inputs
    base = forward_batch(params, X)
    log_b = log_param_lipschitz(params.P, params.D, max(M_max, 1.0))
    streams = np.random.SeedSequence(seed).spawn(trials)
    changes = []
    for ss in streams:
        rng = np.random.default_rng(ss)

        def perturb(_, a, rng=rng):
            u = rng.uniform(-1.0, 1.0, size=np.shape(a))
            return np.clip(a + delta * u, -M_max, M_max)

        pert = params.map_tensors(perturb)
        changes.append(float(np.max(np.abs(forward_batch(pert, X) - base))))
    mx = max(changes) if changes else 0.0
    ok = all(c == 0 or math.log(c) <= log_b + math.log(delta) for c in changes) if delta > 0 \
        else all(c == 0 for c in changes)
    return LipschitzProbeReport(trials, delta, mx, log_b + (math.log(delta) if delta > 0 else -math.inf),
                                changes, ok)


def loglog_slope(xs, ys) -> tuple[float, float, float]:
    """Least-squares ``(slope, intercept, r2)`` of ``log y`` on ``log x``."""
    lx = np.log(np.asarray(xs, dtype=np.float64))
    ly = np.log(np.asarray(ys, dtype=np.float64))
    fit = stats.linregress(lx, ly)
    return float(fit.slope), float(fit.intercept), float(fit.rvalue**2)


# --------------------------------------------------------------------------
# Rate experiments
# --------------------------------------------------------------------------


@dataclass
class RateReport:
    x_name: str
    measured_name: str
    xs: list[float]
    measured: list[float]
    expected: list[float]
    bound: list[float]
    row_pass: list[bool]
    slope: float
    intercept: float
    r2: float
    expected_slope: float
    tolerance: float
    passed: bool
    label: str = ""
    extras: dict = field(default_factory=dict)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        extra_keys = list(self.extras)
        w.writerow([self.x_name, self.measured_name, "expected", "bound", "pass"] + extra_keys)
        for i, x in enumerate(self.xs):
            row = [repr(float(x)), repr(float(self.measured[i])), repr(float(self.expected[i])),
                   repr(float(self.bound[i])), str(bool(self.row_pass[i])).lower()]
            row += [repr(float(self.extras[k][i])) for k in extra_keys]
            w.writerow(row)
        return buf.getvalue()

    def summary(self) -> dict:
        d = asdict(self)
        d.pop("extras")
        return d

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2)


def _map(fn, items, threads: int | None):
    if threads is not None and threads <= 1:
        return [fn(i) for i in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def rate_sweep(target: HolderTarget, eps_list, mode: str = "theoretical", tolerance: float | None = None,
               n_scan: int = 10_000, threads: int | None = None, strict: bool = True) -> RateReport:
    """Center count versus accuracy; the fitted exponent should be ``d / alpha``.

    ``N_total`` is the parameter count of the network that reaches the same
    accuracy (whose POU runs at ``eps/2``).
    """
    eps_list = [float(e) for e in eps_list]
    if len(eps_list) < 4:
        raise ValueError("a rate sweep needs at least four accuracies")
    if any(b >= a for a, b in zip(eps_list, eps_list[1:])):
        raise ValueError("accuracies must be strictly decreasing")
    for e in eps_list:
        check_accuracy(e, target)
    d, a = target.intrinsic_dim, target.alpha
    tol = (0.15 if isinstance(target.domain, CubeDomain) else 0.2) if tolerance is None else tolerance

    def one(eps):
        pou = build_pou(target, PouConfig(eps, mode), strict=strict)
        err = sup_error(pou, target, n=n_scan).sup_error
        P_net = covering_for(target.domain, covering_radius(eps / 2, target), strict=strict).count
        n_total = closed_form_param_count(target.ambient_dim, max(P_net, 2))
        return pou.covering.count, err, pou.info["count_bound"], n_total

    rows = _map(one, eps_list, threads)
    counts = [r[0] for r in rows]
    errs = [r[1] for r in rows]
    slope, icpt, r2 = loglog_slope([1 / e for e in eps_list], counts)
    expected_slope = d / a
    anchor = counts[0] * eps_list[0] ** expected_slope
    row_pass = [r[1] <= e and r[0] <= r[2] for r, e in zip(rows, eps_list)]
    passed = abs(slope - expected_slope) <= tol * expected_slope and r2 >= 0.95 and all(row_pass)
    return RateReport(
        "epsilon", "centers", eps_list, counts,
        [anchor * e ** (-expected_slope) for e in eps_list], [r[2] for r in rows], row_pass,
        slope, icpt, r2, expected_slope, tol, passed, label=f"{target.name} {mode}",
        extras={"sup_error": errs, "n_total": [r[3] for r in rows]})


def local_mean_values(centers, X, y, radius: float) -> np.ndarray:
    """Mean response within ``radius`` of each center, nearest sample if none."""
    from scipy.spatial import cKDTree

    tree = cKDTree(X)
    out = np.empty(len(centers))
    for i, c in enumerate(centers):
        idx = tree.query_ball_point(c, radius)
        if idx:
            out[i] = float(np.mean(y[idx]))
        else:
            out[i] = float(y[tree.query(c)[1]])
    return out


def proxy_mse(target: HolderTarget, n: int, noise_sd: float, ss, n_eval: int = 10_000) -> dict:
    """One run of the local-average plug-in estimator with ``n`` samples."""
    rng = np.random.default_rng(ss)
    dom = target.domain
    d, a = target.intrinsic_dim, target.alpha
    X = dom.sample(n, seed=rng, method="random")
    y = target(X) + noise_sd * rng.standard_normal(n)
    eps = n ** (-a / (2 * a + d))
    cap = 1 / math.e
    if isinstance(dom, ManifoldSpec) and target.holder_const > 0:
        cap = min(cap, 8 * target.holder_const * (dom.reach / 4) ** a)
    eps = min(eps, cap)
    r = covering_radius(eps, target)
    cov = covering_for(dom, r)
    cm = None
    if isinstance(dom, ManifoldSpec):
        cm = max(manifold_covering_constant(dom), cov.count * r**d)
    M_g = theoretical_scaling(eps, target, covering_const=cm)
    vals = np.clip(local_mean_values(cov.centers, X, y, r), -target.sup_bound, target.sup_bound)
    est = PouApproximator(cov, vals, M_g)
    Xe = dom.sample(n_eval, seed=rng, method="random")
    pred = np.clip(est(Xe), -target.sup_bound, target.sup_bound)
    return {"n": n, "mse": float(np.mean((pred - target(Xe)) ** 2)), "eps": eps,
            "centers": cov.count}


def generalization_proxy(target: HolderTarget, noise_sd: float, n_list, seed: int = 0,
                         tolerance: float = 0.25, n_eval: int = 10_000, replicates: int = 16,
                         threads: int | None = None) -> RateReport:
    """Expected MSE of the local-average proxy against ``n``; exponent ``-2a/(2a+d)``.

    The expectation over training sets is estimated by averaging
    ``replicates`` independent draws per ``n``.  This is a plug-in surrogate
    inside the same POU skeleton, not an empirical-risk minimiser.
    """
    n_list = [int(n) for n in n_list]
    if len(n_list) < 4 or any(n < 50 for n in n_list) or len(set(n_list)) != len(n_list):
        raise ValueError("need at least four distinct sample sizes, each >= 50")
    d, a = target.intrinsic_dim, target.alpha
    if replicates < 1:
        raise ValueError("replicates must be >= 1")
    streams = np.random.SeedSequence(seed).spawn(len(n_list))

    def one(i):
        runs = [proxy_mse(target, n_list[i], noise_sd, ss, n_eval)
                for ss in streams[i].spawn(replicates)]
        return dict(runs[0], mse=float(np.mean([r["mse"] for r in runs])))

    rows = _map(one, range(len(n_list)), threads)
    mses = [r["mse"] for r in rows]
    slope, icpt, r2 = loglog_slope(n_list, mses)
    expected_slope = -2 * a / (2 * a + d)
    anchor = mses[0] * n_list[0] ** (-expected_slope)
    passed = abs(slope - expected_slope) <= tolerance * abs(expected_slope)
    return RateReport(
        "n", "mse", [float(n) for n in n_list], mses,
        [anchor * n**expected_slope for n in n_list], [r["eps"] ** 2 for r in rows],
        [math.isfinite(m) for m in mses], slope, icpt, r2, expected_slope, tolerance, passed,
        label=f"{target.name} proxy", extras={"epsilon": [r["eps"] for r in rows],
                                             "centers": [r["centers"] for r in rows]})


# --------------------------------------------------------------------------
# Full verification table
# --------------------------------------------------------------------------


@dataclass
class CheckResult:
    name: str
    passed: bool
    measured: float
    bound: float
    detail: str = ""


def verify_construction(con: Construction, target: HolderTarget | None = None, n_points: int = 200,
                        seed: int = 0, n_scan: int = 10_000, probe_trials: int = 5,
                        check_half_eps: bool = True) -> list[CheckResult]:
    """Run every identity and bound on a constructed network."""
    params, meta, pou = con.params, con.meta, con.pou
    dom = pou.domain if target is None else target.domain
    d, P = params.d, params.P
    res: list[CheckResult] = []

    def add(name, ok, measured, bound, detail=""):
        res.append(CheckResult(name, bool(ok), float(measured), float(bound), detail))

    add("architecture", construction_shape_ok(params, d, P), params.L, 2,
        f"D={params.D} P={P} heads={[b.n_heads for b in params.blocks]}")
    n = count_params(params)
    add("parameter_count", n == closed_form_param_count(d, P), n, closed_form_param_count(d, P))

    pts = dom.sample(n_points, seed=seed, method="random")
    worst = {"pre": True, "peak": 0.0, "leak": 0.0, "pe": 0.0, "restore": True, "readout": 0.0,
             "feat_ratio": 0.0, "lip": 0.0}
    traces = []
    for x in pts:
        out, tr = forward(params, x, trace_attention=True)
        traces.append(tr)
        worst["pre"] &= check_preprocessing(tr, x)
        ai = attention_identities(tr, meta.M, meta.eta, meta.lam)
        worst["peak"] = max(worst["peak"], ai["peak_error"])
        worst["leak"] = max(worst["leak"], ai["max_leak"])
        worst["pe"] = max(worst["pe"], ai["pe_rel_error"])
        worst["restore"] &= check_restoration(tr, P)
        worst["readout"] = max(worst["readout"], readout_recompute_error(tr))
        fe = affine_feature_errors(tr, meta.M_g, meta.M, pou.centers, pou.values, x, meta.sup_bound)
        worst["feat_ratio"] = max(worst["feat_ratio"], fe["ratio"])
    leak = math.exp(-meta.c * meta.M)
    add("preprocessing_exact", worst["pre"], 0.0 if worst["pre"] else 1.0, 0.0)
    add("peak_attention", worst["peak"] <= 1e-12, worst["peak"], 1e-12)
    add("indicator_leakage", worst["leak"] <= leak, worst["leak"], leak)
    add("pe_scale", worst["pe"] <= 1e-10, worst["pe"], 1e-10)
    add("restoration", worst["restore"], 0.0 if worst["restore"] else 1.0, 0.0)
    add("readout_recompute", worst["readout"] <= 1e-12, worst["readout"], 1e-12)
    add("affine_features", worst["feat_ratio"] <= 1.0, worst["feat_ratio"], 1.0,
        "max observed/bound ratio")

    # Score columns of the second attention block at two inputs.
    for t1, t2 in zip(traces[:-1:2], traces[1::2]):
        a, b = t1.blocks[0].ffn_out[0], t2.blocks[0].ffn_out[0]
        lhs, rhs = softmax_l1_gap(a, b)
        worst["lip"] = max(worst["lip"], lhs - rhs)
    add("softmax_lipschitz", worst["lip"] <= 1e-12, worst["lip"], 1e-12, "max lhs - rhs")

    y_net = forward_batch(params, pts)
    gap = float(np.max(np.abs(y_net - pou(pts))))
    bound = implementation_error_bound(meta)
    add("implementation_error", gap <= bound, gap, bound)
    if check_half_eps:
        rel = abs(bound - meta.epsilon / 2) / (meta.epsilon / 2)
        add("impl_bound_is_half_eps", rel <= 1e-10, rel, 1e-10, "relative deviation")
    add("sine_sum", check_sine_sum(meta.M, P), sine_sum_residual(meta.M, P), 1e-10)

    if target is not None:
        scan_net = sup_error(lambda X: forward_batch(params, X), target, n=n_scan)
        add("network_sup_error", scan_net.sup_error <= meta.epsilon, scan_net.sup_error,
            meta.epsilon, f"{scan_net.n_samples} scan points")
        scan_pou = sup_error(pou, target, n=n_scan)
        add("pou_sup_error", scan_pou.sup_error <= meta.epsilon / 2, scan_pou.sup_error,
            meta.epsilon / 2, f"{scan_pou.n_samples} scan points")

    if meta.mode == "theoretical":
        mm = max_magnitude(params)
        add("magnitude_bound", mm <= meta.magnitude_bound, mm, meta.magnitude_bound)
        add("count_bound", P <= meta.count_bound, P, meta.count_bound)
        add("param_count_bound", n <= meta.param_count_bound, n, meta.param_count_bound)

    probe = param_lipschitz_probe(params, 1e-7, trials=probe_trials, seed=seed,
                                  inputs=probe_inputs(dom, 256, seed))
    add("param_lipschitz_probe", probe.passed, probe.max_change, probe.log_bound,
        "bound column is the log of the bound")

    if isinstance(dom, ManifoldSpec) and dom.kind != "point_cloud":
        me = check_metric_equivalence(dom, 1000, seed=seed)
        add("metric_equivalence", me.ok, me.violations, 0, f"max ratio {me.max_ratio:.4f}")
    cov = verify_covering(pou.covering, dom, 10_000, seed=seed)
    add("covering", cov.ok, cov.max_gap, pou.covering.radius)
    return res


def format_checks(results: list[CheckResult]) -> str:
    w = max(len(r.name) for r in results)
    lines = [f"{'check':<{w}}  {'status':<6}  {'measured':>12}  {'bound':>12}  detail"]
    for r in results:
        lines.append(f"{r.name:<{w}}  {'PASS' if r.passed else 'FAIL':<6}  "
                     f"{r.measured:>12.5g}  {r.bound:>12.5g}  {r.detail}")
    return "\n".join(lines)
