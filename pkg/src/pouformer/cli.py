"""Command-line driver.

Exit codes: 0 when every check of the run passed, 1 when a check failed,
2 when the configuration is invalid.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import math
import os
import sys
from pathlib import Path

import numpy as np

from .analysis import (
    format_checks,
    generalization_proxy,
    rate_sweep,
    verify_construction,
)
from .construction import (
    Construction,
    ConstructionError,
    ConstructionMeta,
    assemble,
    check_network_accuracy,
)
from .domain import CubeDomain, DomainError, ManifoldSpec, domain_from_dict
from .numeric_core import NumericError
from .softpou import AdmissibilityError, PouApproximator, PouConfig
from .targets import BUILTIN_TARGETS, builtin, load_table
from .transformer import TransformerParams, count_params, forward, max_magnitude

THREADS_ENV = "POUFORMER_THREADS"
DEFAULTS = {
    "target": None, "domain": None, "dim": None, "eps": 0.2, "eps_list": None, "n_list": None,
    "mode": "theoretical", "seed": 0, "out": ".", "trace_attention": False, "threads": None,
    "params": None, "noise_sd": 0.1, "table": None, "max_tokens": 512,
}
DEFAULT_TARGET = {"manifold-approx": "circle_angle", "generalize": "sin1d"}
MANIFOLD_DOMAINS = ("circle", "sphere", "flat_torus")


class ConfigError(ValueError):
    pass


def _float_list(s: str) -> list[float]:
    return [float(v) for v in s.replace(",", " ").split()]


def _int_list(s: str) -> list[int]:
    return [int(float(v)) for v in s.replace(",", " ").split()]


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON file with option values; flags take precedence")
    common.add_argument("--target", help=f"built-in target {BUILTIN_TARGETS} or custom-table")
    common.add_argument("--table", help="JSON lookup table for --target custom-table")
    common.add_argument("--domain", help="cube, circle, sphere or flat_torus (checked against the target)")
    common.add_argument("--dim", type=int, help="cube dimension for quad2d")
    common.add_argument("--eps", type=float, help="target accuracy (default 0.2)")
    common.add_argument("--eps-list", type=_float_list, help="decreasing accuracies for rates")
    common.add_argument("--n-list", type=_int_list, help="sample sizes for generalize")
    common.add_argument("--mode", choices=["theoretical", "calibrated"])
    common.add_argument("--seed", type=int)
    common.add_argument("--out", help="output directory (default .)")
    common.add_argument("--trace-attention", action="store_true", default=None,
                        help="also write trace.json with attention matrices at one input")
    common.add_argument("--threads", type=int, help=f"worker threads (else ${THREADS_ENV})")
    common.add_argument("--params", help="params.json to verify or inspect")
    common.add_argument("--noise-sd", type=float, help="response noise for generalize (default 0.1)")
    common.add_argument("--max-tokens", type=int,
                        help="refuse to evaluate networks with more tokens (default 512)")

    p = argparse.ArgumentParser(prog="pouformer", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("approx", parents=[common], help="build, check and export a network")
    sub.add_parser("manifold-approx", parents=[common], help="approx on a manifold target")
    sub.add_parser("verify", parents=[common], help="run the identity suite on a network")
    sub.add_parser("rates", parents=[common], help="center count versus accuracy sweep")
    sub.add_parser("generalize", parents=[common], help="proxy MSE versus sample size sweep")
    sub.add_parser("dump-params", parents=[common], help="export params without running checks")
    return p


def resolve(args: argparse.Namespace) -> dict:
    """Merge defaults < config file < flags."""
    cfg = dict(DEFAULTS)
    if args.config:
        try:
            with open(args.config) as fh:
                file_cfg = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config file: {exc}") from None
        unknown = set(k.replace("-", "_") for k in file_cfg) - set(DEFAULTS)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        cfg.update({k.replace("-", "_"): v for k, v in file_cfg.items()})
    for key in DEFAULTS:
        val = getattr(args, key, None)
        if val is not None:
            cfg[key] = val
    if cfg["threads"] is None and os.environ.get(THREADS_ENV):
        cfg["threads"] = int(os.environ[THREADS_ENV])
    if cfg["target"] is None:
        cfg["target"] = DEFAULT_TARGET.get(args.command, "sin1d")
    cfg["command"] = args.command
    return cfg


def make_target(cfg: dict):
    name = cfg["target"]
    if name == "custom-table":
        if not cfg["table"]:
            raise ConfigError("--target custom-table needs --table")
        target = load_table(cfg["table"])
    else:
        target = builtin(name, cfg["dim"])
    dom = target.domain
    kind = "cube" if isinstance(dom, CubeDomain) else dom.kind
    if cfg["domain"] is not None and cfg["domain"] != kind:
        raise ConfigError(f"target {name!r} lives on a {kind}, not on a {cfg['domain']}")
    if cfg["command"] == "manifold-approx" and kind == "cube":
        raise ConfigError("manifold-approx needs a manifold target")
    if cfg["dim"] is not None and isinstance(dom, CubeDomain) and dom.dim != cfg["dim"]:
        raise ConfigError(f"target {name!r} has dimension {dom.dim}, not {cfg['dim']}")
    target.spot_check(seed=cfg["seed"])
    return target


def _out_dir(cfg: dict) -> Path:
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    return out


def _checks_csv(results) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["check", "measured", "bound", "pass"])
    for r in results:
        w.writerow([r.name, repr(r.measured), repr(r.bound), str(r.passed).lower()])
    return buf.getvalue()


def _meta_payload(con: Construction) -> dict:
    d = con.meta.to_dict()
    d["pou"] = con.pou.to_dict()
    return d


def _write_trace(path: Path, con: Construction, seed: int) -> None:
    x = con.pou.domain.sample(1, seed=seed, method="random")[0]
    out, tr = forward(con.params, x, trace_attention=True)
    payload = {"x": x.tolist(), "output": out, "Z0": tr.Z0.tolist(),
               "blocks": [{"mha_out": b.mha_out.tolist(), "ffn_out": b.ffn_out.tolist(),
                           "attention": [A.tolist() for A in b.attention]} for b in tr.blocks]}
    path.write_text(json.dumps(payload))


def _build(cfg: dict):
    target = make_target(cfg)
    check_network_accuracy(cfg["eps"], target)
    con = assemble(target, PouConfig(cfg["eps"], cfg["mode"]))
    return target, con


def cmd_approx(cfg: dict) -> int:
    target, con = _build(cfg)
    if con.meta.P > cfg["max_tokens"]:
        raise ConfigError(f"network has P={con.meta.P} tokens, above --max-tokens "
                          f"{cfg['max_tokens']}; use dump-params to export it unevaluated")
    results = verify_construction(con, target, seed=cfg["seed"],
                                  check_half_eps=True)
    out = _out_dir(cfg)
    (out / "params.json").write_text(con.params.to_json())
    (out / "meta.json").write_text(json.dumps(_meta_payload(con), indent=2))
    (out / "report.csv").write_text(_checks_csv(results))
    if cfg["trace_attention"]:
        _write_trace(out / "trace.json", con, cfg["seed"])
    print(f"target={target.name} eps={cfg['eps']} mode={cfg['mode']} P={con.meta.P} "
          f"params={count_params(con.params)} M_max={max_magnitude(con.params):.6g}")
    print(format_checks(results))
    return 0 if all(r.passed for r in results) else 1


def load_construction(params_path: str) -> tuple[Construction, object]:
    p = Path(params_path)
    try:
        params = TransformerParams.from_json(p.read_text())
        meta_path = p.with_name("meta.json")
        raw = json.loads(meta_path.read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read network files: {exc}") from None
    meta = ConstructionMeta.from_dict(raw)
    dom = domain_from_dict(raw["notes"]["domain"])
    pou = PouApproximator.from_dict(raw["pou"], domain=dom)
    target = None
    name = raw["notes"].get("target")
    if name in BUILTIN_TARGETS:
        target = builtin(name, dom.dim if isinstance(dom, CubeDomain) else None)
    return Construction(params, meta, pou), target


def cmd_verify(cfg: dict) -> int:
    if cfg["params"]:
        con, target = load_construction(cfg["params"])
    else:
        target, con = _build(cfg)
    results = verify_construction(con, target, seed=cfg["seed"])
    print(format_checks(results))
    failed = [r.name for r in results if not r.passed]
    if failed:
        print("failed checks: " + ", ".join(failed))
    return 0 if not failed else 1


def cmd_rates(cfg: dict) -> int:
    target = make_target(cfg)
    eps_list = cfg["eps_list"]
    if not eps_list:
        eps_list = ([0.35, 0.25, 0.18, 0.12, 0.08] if isinstance(target.domain, CubeDomain)
                    else [0.3, 0.2, 0.14, 0.1, 0.07])
    rep = rate_sweep(target, eps_list, mode=cfg["mode"], threads=cfg["threads"])
    out = _out_dir(cfg)
    (out / "rate.csv").write_text(rep.to_csv())
    (out / "rate.json").write_text(rep.to_json())
    print(rep.to_csv(), end="")
    print(f"slope={rep.slope:.4f} expected={rep.expected_slope:.4f} "
          f"tol=±{100 * rep.tolerance:.0f}% r2={rep.r2:.4f} -> {'PASS' if rep.passed else 'FAIL'}")
    return 0 if rep.passed else 1


def cmd_generalize(cfg: dict) -> int:
    target = make_target(cfg)
    n_list = cfg["n_list"] or [200, 800, 3200, 12800]
    rep = generalization_proxy(target, cfg["noise_sd"], n_list, seed=cfg["seed"],
                               threads=cfg["threads"])
    out = _out_dir(cfg)
    (out / "rate.csv").write_text(rep.to_csv())
    (out / "rate.json").write_text(rep.to_json())
    print(rep.to_csv(), end="")
    print(f"proxy slope={rep.slope:.4f} expected={rep.expected_slope:.4f} "
          f"tol=±{100 * rep.tolerance:.0f}% -> {'PASS' if rep.passed else 'FAIL'}")
    return 0 if rep.passed else 1


def cmd_dump_params(cfg: dict) -> int:
    if cfg["params"]:
        params = TransformerParams.from_json(Path(cfg["params"]).read_text())
        print(json.dumps({"d": params.d, "D": params.D, "P": params.P, "L": params.L,
                          "heads": [b.n_heads for b in params.blocks],
                          "param_count": count_params(params),
                          "max_magnitude": max_magnitude(params)}))
        return 0
    _, con = _build(cfg)
    out = _out_dir(cfg)
    (out / "params.json").write_text(con.params.to_json())
    (out / "meta.json").write_text(json.dumps(_meta_payload(con), indent=2))
    print(f"wrote {out / 'params.json'} (P={con.meta.P}, params={count_params(con.params)})")
    return 0


COMMANDS = {"approx": cmd_approx, "manifold-approx": cmd_approx, "verify": cmd_verify,
            "rates": cmd_rates, "generalize": cmd_generalize, "dump-params": cmd_dump_params}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = resolve(args)
        eps = cfg["eps"]
        if not isinstance(eps, (int, float)) or not math.isfinite(eps):
            raise ConfigError(f"epsilon must be a finite number, got {eps!r}")
        return COMMANDS[args.command](cfg)
    except ConstructionError as exc:
        print(f"check failed: {exc}", file=sys.stderr)
        return 1
    except (ConfigError, AdmissibilityError, DomainError, NumericError, ValueError, KeyError) as exc:
        print(f"invalid configuration: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
