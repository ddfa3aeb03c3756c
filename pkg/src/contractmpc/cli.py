"""Command-line front end: tighten -> certify -> terminal -> run -> report.

Named presets carry the two benchmark scenarios end to end; a JSON config
can override any piece.  stdout is machine-parsable key=value lines
followed by nothing else; human-oriented detail goes to stderr.

Exit codes: 0 success; 2 invalid configuration; 3 tightened constraints
empty at the first step; 4 no qualifying horizon; 5 infeasible initial
state.
"""

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .boxes import Box, Ellipsoid
from .contraction import (GridSpec, build_certificate, certificate_to_dict,
                          load_certificate, save_certificate, _rcis_from_dict, _rcis_to_dict)
from .controller import ControllerConfig, stage_cost_bound
from .plants import plant_from_config
from .presets import PRESET_NAMES, get_preset
from .sim import run_batch, save_report, write_trace_csv
from .terminal import (TerminalIngredients, bisect_beta, linearize,
                       pre_schur_max_eig, robust_invariance_report, verify_lmi)
from .tightening import (compute_tightening, max_feasible_horizon,
                         tightened_state_box, write_tightening_csv)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_EMPTY = 3
EXIT_NO_HORIZON = 4
EXIT_INFEASIBLE = 5


def _kv(key, value):
    print(f"{key}={value}")


def _note(msg):
    print(msg, file=sys.stderr)


def _load_config(path):
    with open(path) as fh:
        return json.load(fh)


class Scenario:
    """Preset fields merged with config-file overrides."""

    def __init__(self, args):
        cfg = _load_config(args.config) if args.config else {}
        name = cfg.get("preset", args.preset)
        if name is None and "plant" not in cfg:
            raise ValueError("either --preset or a config with a plant section is required")
        p = get_preset(name) if name else None
        self.name = name or cfg["plant"].get("dynamics", "custom")
        self.model = plant_from_config(cfg["plant"]) if "plant" in cfg else p.model
        self.n_max = int(cfg.get("n_max", p.n_max if p else self.model.n * 5))
        self.decimals = int(cfg.get("decimals", p.table_decimals if p else 4))
        self.P_gamma = np.asarray(cfg["P_gamma"], float) if "P_gamma" in cfg \
            else (p.P_gamma if p else None)
        self.rcis = _rcis_from_dict(cfg["rcis"]) if "rcis" in cfg else (p.rcis if p else None)
        self.pins = cfg.get("pins", dict(p.pins) if p else {})
        seed = args.seed if args.seed is not None else int(cfg.get("seed", 0))
        self.seed = seed
        g = cfg.get("grid")
        if g:
            self.grid = GridSpec(tuple(g["points_per_axis"]) if isinstance(g["points_per_axis"], list)
                                 else int(g["points_per_axis"]), seed=int(g.get("seed", seed)))
        elif p:
            prof = p.grid_smoke if getattr(args, "grid", "full") == "smoke" else p.grid_full
            self.grid = GridSpec(prof.points_per_axis, seed=seed)
        else:
            self.grid = None
        c = cfg.get("controller", {})
        self.Q = np.asarray(c["Q"], float) if "Q" in c else (p.Q if p else np.eye(self.model.n))
        self.R = np.asarray(c["R"], float) if "R" in c else (p.R if p else np.eye(self.model.m))
        self.xi = c.get("xi", p.xi if p else "auto")
        self.nu = float(c.get("nu", p.nu if p else 0.99))
        self.eps = float(c.get("eps", p.eps if p else 1e-8))
        self.formulation = getattr(args, "formulation", None) or c.get("formulation", "two_stage")
        self.certificate_path = getattr(args, "certificate", None) or c.get("certificate")
        r = cfg.get("run", {})
        self.x0 = np.asarray(r.get("x0", p.x0 if p else self.model.x_ref), float)
        self.steps = int(r.get("steps", p.steps if p else 30))
        self.runs = int(r.get("runs", p.n_runs if p else 100))
        self.base_seed = int(r.get("base_seed", seed))
        t = cfg.get("terminal", p.terminal if p else None)
        self.terminal = None
        if t is not None:
            self.terminal = {"P": np.asarray(t["P"], float), "K": np.asarray(t["K"], float),
                             "kappa": float(t["kappa"])}
        self.reference_certificate = p.reference_certificate if p else None


def _out_dir(args):
    d = Path(args.out_dir)
    d.mkdir(parents=True, exist_ok=True)
    return d


def cmd_tighten(args):
    sc = Scenario(args)
    seq = compute_tightening(sc.model, sc.n_max)
    if tightened_state_box(sc.model, seq, 1).is_empty:
        _note("tightened state set is already empty at the first step; "
              "the disturbance is too large for these constraints")
        return EXIT_EMPTY
    out = _out_dir(args) / f"{sc.name}_tightening.csv"
    write_tightening_csv(out, seq, sc.decimals)
    _kv("plant", sc.name)
    _kv("rows", seq.N_max + 1)
    _kv("decimals", sc.decimals)
    _kv("max_feasible_horizon", max_feasible_horizon(sc.model, seq))
    _kv("table", out)
    _note(f"wrote per-step bound sequences for {sc.name} to {out}")
    return EXIT_OK


def cmd_certify(args):
    sc = Scenario(args)
    seq = compute_tightening(sc.model, sc.n_max)
    try:
        cert = build_certificate(sc.model, sc.P_gamma, sc.rcis, seq,
                                 grid=sc.grid, pins=sc.pins)
    except ValueError as e:
        if "certificate unavailable" in str(e):
            _note(str(e))
            return EXIT_NO_HORIZON
        raise
    out = _out_dir(args) / f"{sc.name}_certificate.json"
    save_certificate(out, cert)
    _kv("plant", sc.name)
    _kv("omega", cert.omega)
    _kv("gamma_max", cert.gamma_max_val)
    _kv("bound", cert.omega_bound)
    for j in sorted(cert.gamma_table):
        _kv(f"gamma_{j}", cert.gamma_table[j])
    _kv("N_p", cert.N_p)
    _kv("gamma", cert.gamma)
    for k, v in sorted(cert.computed.items()):
        _kv(f"computed_{k}", v)
    _kv("certificate", out)
    _note(f"horizon {cert.N_p} certified with contraction factor {cert.gamma:.4f} "
          f"(bound {cert.omega_bound:.4f})")
    return EXIT_OK


def cmd_terminal(args):
    sc = Scenario(args)
    if sc.terminal is None:
        raise ValueError(f"scenario {sc.name!r} carries no terminal ingredients")
    A, B = linearize(sc.model)
    ing = TerminalIngredients(P=sc.terminal["P"], K=sc.terminal["K"],
                              kappa=sc.terminal["kappa"], A=A, B=B)
    lmi = verify_lmi(ing, sc.Q, sc.R)
    pre = pre_schur_max_eig(ing, sc.Q, sc.R)
    beta = bisect_beta(sc.model, ing, sc.Q, sc.R, seed=sc.seed)
    ing = TerminalIngredients(P=ing.P, K=ing.K, kappa=ing.kappa, A=A, B=B, beta=beta)
    region = Ellipsoid(center=sc.model.x_ref, shape=ing.P, level=beta)
    rep = robust_invariance_report(sc.model, region, samples=args.samples, seed=sc.seed)
    out = _out_dir(args) / f"{sc.name}_terminal.json"
    payload = {
        "A": A.tolist(), "B": B.tolist(),
        "kappa": ing.kappa,
        "lmi_min_eig": lmi,
        "pre_schur_max_eig": pre,
        "beta": beta,
        "invariance": {"ok": rep.ok, "max_residual": rep.max_residual,
                       "vertex_audit_margin": rep.vertex_audit_margin,
                       "samples": rep.n_samples},
        "adapted": {"P_gamma": ing.P.tolist(), "rcis": _rcis_to_dict(region)},
    }
    with open(out, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
    _kv("plant", sc.name)
    _kv("lmi_min_eig", lmi)
    _kv("pre_schur_max_eig", pre)
    _kv("beta", beta)
    _kv("invariance_ok", rep.ok)
    _kv("invariance_max_residual", rep.max_residual)
    _kv("report", out)
    _note(f"terminal region level {beta:.4f}; sampled invariance "
          f"{'holds' if rep.ok else 'FAILED'}")
    return EXIT_OK


def cmd_run(args):
    sc = Scenario(args)
    if sc.certificate_path:
        cert = load_certificate(sc.certificate_path)
    elif sc.reference_certificate is not None:
        cert = sc.reference_certificate
    else:
        raise ValueError("no certificate: pass --certificate or use a preset")
    seq = compute_tightening(sc.model, sc.n_max)
    l_bar = stage_cost_bound(sc.Q, sc.R, sc.model.state_box, sc.model.input_box,
                             sc.model.x_ref, sc.model.u_ref)
    cfg = ControllerConfig(model=sc.model, Q=sc.Q, R=sc.R, l_bar=l_bar, xi=sc.xi,
                           nu=sc.nu, eps=sc.eps, cert=cert, seq=seq,
                           formulation=sc.formulation)
    runs = args.runs if args.runs is not None else sc.runs
    steps = args.steps if args.steps is not None else sc.steps
    report = run_batch(sc.model, cfg, sc.x0, steps, runs, sc.base_seed)
    if runs and steps and all(tr.fault and tr.fault_step == 0 for tr in report.traces):
        _note("the initial state admits no feasible solution")
        return EXIT_INFEASIBLE
    out = _out_dir(args)
    for tr in report.traces:
        write_trace_csv(out / f"{sc.name}_trace_{tr.run_id:03d}.csv", tr)
    rpath = out / f"{sc.name}_report.json"
    save_report(rpath, report)
    _kv("plant", sc.name)
    _kv("runs", runs)
    _kv("steps", steps)
    _kv("violations", report.violations)
    _kv("faults", report.faults)
    _kv("mean_steps_to_sublevel", report.mean_steps_to_sublevel)
    _kv("report", rpath)
    _note(f"{runs} runs x {steps} steps: {report.violations} violations, "
          f"{report.faults} faults")
    return EXIT_OK


def cmd_report(args):
    path = Path(args.out_dir) / args.report_name if not Path(args.report_name).is_absolute() \
        else Path(args.report_name)
    with open(path) as fh:
        rep = json.load(fh)
    for key in ("n_runs", "steps", "base_seed", "omega", "violations", "faults",
                "mean_steps_to_sublevel"):
        _kv(key, rep[key])
    fg = rep.get("final_gamma", [])
    if fg:
        _kv("final_gamma_max", max(fg))
        _kv("runs_final_gamma_below_omega", sum(g <= rep["omega"] for g in fg))
    fd = rep.get("final_dist_inf", [])
    if fd:
        _kv("final_dist_inf_max", max(fd))
    return EXIT_OK


def _add_common(sp):
    sp.add_argument("--preset", choices=PRESET_NAMES, help="named benchmark scenario")
    sp.add_argument("--config", help="JSON config path (overrides preset fields)")
    sp.add_argument("--seed", type=int, default=None, help="seed override")
    sp.add_argument("--threads", type=int, default=None,
                    help="cap native thread pools (best effort)")
    sp.add_argument("--out-dir", default=".", help="artifact directory")


def _apply_threads(n):
    if n is None:
        return
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ[var] = str(n)
    try:
        import threadpoolctl

        threadpoolctl.threadpool_limits(n)
    except Exception:
        pass


def build_parser():
    ap = argparse.ArgumentParser(prog="contractmpc",
                                 description="constraint tightening, contraction "
                                             "certification, and robust MPC runs")
    ap.add_argument("--version", action="version", version=__version__)
    sub = ap.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("tighten", help="emit the per-step bound sequences as CSV")
    _add_common(sp)

    sp = sub.add_parser("certify", help="build and save a contraction certificate")
    _add_common(sp)
    sp.add_argument("--grid", choices=("full", "smoke"), default="full",
                    help="certification grid profile")

    sp = sub.add_parser("terminal", help="verify terminal ingredients and size the region")
    _add_common(sp)
    sp.add_argument("--samples", type=int, default=1000,
                    help="invariance check sample count")

    sp = sub.add_parser("run", help="closed-loop Monte-Carlo batch")
    _add_common(sp)
    sp.add_argument("--runs", type=int, default=None)
    sp.add_argument("--steps", type=int, default=None)
    sp.add_argument("--certificate", help="certificate JSON (default: scenario reference)")
    sp.add_argument("--formulation", choices=("two_stage", "enumerated"), default=None)

    sp = sub.add_parser("report", help="summarize a saved batch report")
    _add_common(sp)
    sp.add_argument("--report-name", default="report.json",
                    help="report file (relative to --out-dir)")
    return ap


def main(argv=None):
    args = build_parser().parse_args(argv)
    _apply_threads(getattr(args, "threads", None))
    handler = {
        "tighten": cmd_tighten,
        "certify": cmd_certify,
        "terminal": cmd_terminal,
        "run": cmd_run,
        "report": cmd_report,
    }[args.command]
    try:
        return handler(args)
    except (ValueError, OSError, KeyError, json.JSONDecodeError) as e:
        _note(f"error: {e}")
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
