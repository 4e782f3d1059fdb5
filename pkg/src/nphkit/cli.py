"""Command-line surface: analyze, design, simulate, boundaries.

Reports are JSON plus plot-data CSVs, written with sorted keys and
shortest-round-trip floats so a rerun with the same inputs and seed is
byte-identical. Wall-clock timing goes only into the manifest. Exit
codes: 0 ok, 1 bad input, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
import time
from pathlib import Path

import numpy as np
from scipy.special import ndtr

from . import __version__
from .data import SurvivalDataset, build_risk_table, km_estimate, km_median, \
    load_csv
from .design import DesignInput, design_trial
from .estimands import (cox_hr, default_tau, gt_test, milestone_difference,
                        net_benefit, piecewise_hr, rmst, rmtl)
from .groupseq import (GSPlan, futility_check, observed_boundaries,
                       plan_boundaries)
from .ranktests import (DEFAULT_COMBO, MODIFIED_COMBO, WeightSpec, as_combo,
                        maxcombo_test, wlr_test)
from .simulation import (CutoffRule, EnrollmentModel, PiecewiseHazard,
                         TrialScenario, get_scenario, list_scenarios,
                         operating_characteristics)


# --- plumbing ---------------------------------------------------------------

def _write_json(path: Path, obj) -> None:
    # allow_nan=False enforces the no-silent-sentinel invariant
    path.write_text(json.dumps(obj, sort_keys=True, indent=1,
                               allow_nan=False) + "\n", encoding="utf-8")


def _write_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow(["" if v is None else repr(float(v))
                             if isinstance(v, float) else v for v in row])


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _manifest(out: Path, command: str, resolved: dict, seed, t0: float) -> None:
    _write_json(out / "manifest.json", {
        "command": command,
        "config": resolved,
        "seed": seed,
        "timing_seconds": round(time.time() - t0, 3),
        "tool": "nphkit",
        "version": __version__,
    })


def _parse_weights(text: str):
    if text == "default":
        return DEFAULT_COMBO
    if text == "modified":
        return MODIFIED_COMBO
    try:
        pairs = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ValueError(f"--weights must be 'default', 'modified', or a "
                         f"JSON list of [rho, gamma] pairs: {exc}") from exc
    return as_combo(pairs)


def _parse_floats(text: str, flag: str):
    try:
        return [float(x) for x in text.split(",") if x.strip() != ""]
    except ValueError as exc:
        raise ValueError(f"{flag} expects comma-separated numbers") from exc


def _load_config(path: str) -> dict:
    p = Path(path)
    if not p.exists():
        raise ValueError(f"config file not found: {path}")
    try:
        cfg = json.loads(p.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ValueError(f"config {path} is not valid JSON: {exc}") from exc
    if not isinstance(cfg, dict):
        raise ValueError(f"config {path} must hold a JSON object")
    return cfg


def _hazard_from(cfg, where: str) -> PiecewiseHazard:
    if not isinstance(cfg, dict) or "rates" not in cfg:
        raise ValueError(f"{where} needs 'cutpoints' and 'rates'")
    return PiecewiseHazard(cfg.get("cutpoints", []), cfg["rates"])


def _enrollment_from(cfg, where: str) -> EnrollmentModel:
    if not isinstance(cfg, dict) or "kind" not in cfg:
        raise ValueError(f"{where} needs an enrollment 'kind'")
    return EnrollmentModel(cfg["kind"], float(cfg.get("duration", 0.0)))


def _cutoff_from(cfg, where: str) -> CutoffRule:
    if not isinstance(cfg, dict) or "kind" not in cfg:
        raise ValueError(f"{where} needs a cutoff 'kind'")
    return CutoffRule(cfg["kind"],
                      calendar=float(cfg["calendar"]) if "calendar" in cfg else 0.0,
                      events=int(cfg["events"]) if "events" in cfg else 0)


def _scenario_from(cfg: dict, where: str) -> TrialScenario:
    for key in ("n_per_arm", "enrollment", "control_hazard",
                "treatment_hazard", "cutoff"):
        if key not in cfg:
            raise ValueError(f"{where} is missing '{key}'")
    return TrialScenario(
        str(cfg.get("label", "custom")),
        int(cfg["n_per_arm"]),
        _enrollment_from(cfg["enrollment"], f"{where}.enrollment"),
        _hazard_from(cfg["control_hazard"], f"{where}.control_hazard"),
        _hazard_from(cfg["treatment_hazard"], f"{where}.treatment_hazard"),
        float(cfg.get("dropout_rate", 0.0)),
        _cutoff_from(cfg["cutoff"], f"{where}.cutoff"))


def _estimate_dict(est) -> dict:
    out = {"estimate": est.estimate, "ci_lower": est.ci_lower,
           "ci_upper": est.ci_upper, "scale": est.scale}
    if est.p_value is not None:
        out["p"] = est.p_value
    return out


def _guard(fn, *args, **kw):
    try:
        return fn(*args, **kw), None
    except ValueError as exc:
        return None, {"inestimable": True, "reason": str(exc)}


def _two_sided(p: float) -> float:
    return min(1.0, 2.0 * min(p, 1.0 - p))


def _loglog_ci(surv, var, z=1.959963984540054):
    # complementary log-log interval, clamped at the curve's {0,1} ends
    lo = np.empty_like(surv)
    hi = np.empty_like(surv)
    interior = (surv > 0.0) & (surv < 1.0) & (var > 0.0)
    s = surv[interior]
    se_cll = np.sqrt(var[interior]) / (s * np.abs(np.log(s)))
    lo[interior] = s ** np.exp(z * se_cll)
    hi[interior] = s ** np.exp(-z * se_cll)
    lo[~interior] = surv[~interior]
    hi[~interior] = surv[~interior]
    return lo, hi


# --- analyze ----------------------------------------------------------------

def cmd_analyze(args) -> int:
    t0 = time.time()
    weights = _parse_weights(args.weights)
    milestones = _parse_floats(args.milestones, "--milestones") \
        if args.milestones else []
    cutpoints = _parse_floats(args.cutpoints, "--cutpoints") \
        if args.cutpoints else []
    data = load_csv(args.data)
    out = _out_dir(args)
    convert = _two_sided if args.two_sided else (lambda p: p)

    table = build_risk_table(data)
    km = km_estimate(data, "pooled")
    lr = wlr_test(table, km, WeightSpec(0, 0))
    combo = maxcombo_test(data, weights, compute_ci=True)
    tests = {
        "logrank": {"z": lr.Z, "p": convert(lr.p)},
        "components": [
            {"weight": c.weight.label(), "rho": c.weight.rho,
             "gamma": c.weight.gamma, "z": c.Z, "p": convert(c.p)}
            for c in combo.components],
        "maxcombo": {"z_min": combo.z_min,
                     "selected": combo.selected.label(),
                     "p_adjusted": convert(combo.p_adjusted),
                     "p_error": combo.p_error},
        "p_convention": "two_sided" if args.two_sided else "one_sided_lower",
    }

    diag, diag_flag = _guard(gt_test, data)
    if diag is None:
        ph_block = diag_flag
        ph_reasonable = None
    else:
        ph_reasonable = bool(diag.gt_p_value > 0.05)
        ph_block = {"gt_statistic": diag.gt_statistic,
                    "gt_p": diag.gt_p_value,
                    "ph_reasonable": ph_reasonable}

    tau = args.tau if args.tau is not None else default_tau(data)
    effects: dict = {}
    cox, flag = _guard(cox_hr, data)
    effects["cox_hr"] = _estimate_dict(cox) if cox else flag
    if combo.whr_ci is not None:
        est, lo, hi = combo.whr_ci
        effects["weighted_hr"] = {"estimate": est, "ci_lower": lo,
                                  "ci_upper": hi,
                                  "weight": combo.selected.label(),
                                  "scale": "ratio"}
    else:
        effects["weighted_hr"] = {"inestimable": True,
                                  "reason": "simultaneous interval unavailable"}
    rm, flag = _guard(rmst, data, tau)
    if rm:
        effects["rmst"] = {"tau": rm.tau,
                           "control": _estimate_dict(rm.control),
                           "treatment": _estimate_dict(rm.treatment),
                           "difference": _estimate_dict(rm.difference)}
    else:
        effects["rmst"] = flag
    rl, flag = _guard(rmtl, data, tau)
    effects["rmtl"] = _estimate_dict(rl) if rl else flag
    ms_list = []
    for t_star in milestones:
        est, flag = _guard(milestone_difference, data, t_star)
        entry = _estimate_dict(est) if est else dict(flag)
        entry["time"] = t_star
        ms_list.append(entry)
    effects["milestones"] = ms_list
    pw_rows = []
    pw_list = []
    if cutpoints:
        intervals, flag = _guard(piecewise_hr, data, cutpoints)
        if intervals is None:
            pw_list = flag
        else:
            for iv in intervals:
                entry = {"start": iv.lower_time,
                         "end": None if np.isinf(iv.upper_time)
                         else iv.upper_time,
                         "events_treatment": iv.events_treatment,
                         "events_control": iv.events_control}
                if iv.estimate is None:
                    entry["inestimable"] = True
                    pw_rows.append((iv.lower_time,
                                    None if np.isinf(iv.upper_time)
                                    else iv.upper_time, None, None, None))
                else:
                    entry.update(_estimate_dict(iv.estimate))
                    pw_rows.append((iv.lower_time,
                                    None if np.isinf(iv.upper_time)
                                    else iv.upper_time, iv.estimate.estimate,
                                    iv.estimate.ci_lower,
                                    iv.estimate.ci_upper))
                pw_list.append(entry)
    effects["piecewise_hr"] = pw_list
    nb, flag = _guard(net_benefit, data, args.margin, seed=args.seed)
    effects["net_benefit"] = _estimate_dict(nb) if nb else flag
    effects["km_median"] = {
        "control": km_median(km_estimate(data, "control")),
        "treatment": km_median(km_estimate(data, "treatment"))}

    # every estimand is always computed; the diagnostic only picks the
    # recommended reporting subset
    if ph_reasonable is None or ph_reasonable:
        recommended = ["cox_hr", "rmst", "km_median"]
    else:
        recommended = ["weighted_hr", "rmst", "rmtl", "milestones",
                       "piecewise_hr", "net_benefit", "km_median"]

    report = {"tests": tests, "ph_diagnostic": ph_block, "effects": effects,
              "recommended_effects": recommended,
              "n": len(data), "n_events": data.n_events}
    _write_json(out / "analysis.json", report)

    km_rows = []
    for arm_name in ("control", "treatment"):
        curve = km_estimate(data, arm_name)
        lo, hi = _loglog_ci(curve.surv, curve.var)
        for i in range(len(curve.time)):
            km_rows.append((arm_name, float(curve.time[i]),
                            float(curve.surv[i]), float(lo[i]),
                            float(hi[i])))
    _write_csv(out / "km_curves.csv",
               ["arm", "time", "survival", "ci_lower", "ci_upper"], km_rows)
    if diag is not None:
        keep = np.isfinite(diag.scaled_residuals)
        _write_csv(out / "schoenfeld.csv", ["time", "scaled_residual"],
                   [(float(t), float(r)) for t, r in
                    zip(diag.times[keep], diag.scaled_residuals[keep])])
    if pw_rows:
        _write_csv(out / "piecewise_hr.csv",
                   ["start", "end", "hazard_ratio", "ci_lower", "ci_upper"],
                   pw_rows)

    _manifest(out, "analyze", {
        "data": str(args.data), "weights": args.weights,
        "milestones": milestones, "cutpoints": cutpoints,
        "tau": tau, "margin": args.margin,
        "two_sided": args.two_sided}, args.seed, t0)
    return 0


# --- design -----------------------------------------------------------------

def _bundled(name: str) -> Path:
    return Path(__file__).parent / "bundled" / name


def cmd_design(args) -> int:
    t0 = time.time()
    cfg_path = args.config if args.config else str(_bundled("design_delayed.json"))
    cfg = _load_config(cfg_path)
    for key in ("enrollment", "control_hazard", "treatment_hazard",
                "alpha", "power", "durations"):
        if key not in cfg:
            raise ValueError(f"design config is missing '{key}'")
    d = DesignInput(
        enrollment=_enrollment_from(cfg["enrollment"], "enrollment"),
        control_hazard=_hazard_from(cfg["control_hazard"], "control_hazard"),
        treatment_hazard=_hazard_from(cfg["treatment_hazard"],
                                      "treatment_hazard"),
        dropout_rate=float(cfg.get("dropout_rate", 0.0)),
        alpha=float(cfg["alpha"]), power=float(cfg["power"]),
        combo=as_combo(cfg.get("combo", DEFAULT_COMBO)),
        durations=tuple(cfg["durations"]))
    replicates = args.replicates if args.replicates is not None \
        else int(cfg.get("replicates", 2000))
    if replicates < 100:
        raise ValueError("--replicates must be at least 100")
    alternatives = None
    if "alternatives" in cfg:
        alternatives = {
            str(k): _hazard_from(v, f"alternatives.{k}")
            for k, v in cfg["alternatives"].items()}
    kw = {}
    if "chosen_duration" in cfg:
        kw["chosen_duration"] = float(cfg["chosen_duration"])
    if "final_min_followup" in cfg:
        kw["final_min_followup"] = float(cfg["final_min_followup"])
    if "corr_n" in cfg:
        kw["corr_n"] = int(cfg["corr_n"])
    res = design_trial(d, alternatives=alternatives, replicates=replicates,
                       seed=args.seed, n_jobs=args.jobs, **kw)

    out = _out_dir(args)
    report = {
        "chosen_duration": res.chosen_duration,
        "null_correlation": [[float(v) for v in row]
                             for row in res.corr.values],
        "z_cutoff": res.z_cutoff,
        "nominal_level": res.nominal_level,
        "duration_grid": {repr(float(k)): {lbl: {"events": ev, "n": n}
                                           for lbl, (ev, n) in v.items()}
                          for k, v in res.duration_grid.items()},
        "component_table": {lbl: {"events": ev, "n": n}
                            for lbl, (ev, n) in res.component_table.items()},
        "selected": res.selected.label(),
        "initial": {"events": res.initial_events, "n": res.initial_n},
        "final": {"events": res.final_events, "n": res.final_n},
        "final_cutoff": {"kind": res.final_cutoff.kind,
                         "calendar": res.final_cutoff.calendar,
                         "events": res.final_cutoff.events},
        "confirmation": {k: _oc_dict(v, d.combo)
                         for k, v in res.confirmation.items()},
        "logrank_comparison": {"events": res.logrank_comparison[0],
                               "n": res.logrank_comparison[1]},
        "iterations": res.iterations,
    }
    _write_json(out / "design.json", report)
    _write_csv(out / "duration_grid.csv",
               ["duration", "weight", "events", "n"],
               [(dur, lbl, ev, n)
                for dur, comps in sorted(res.duration_grid.items())
                for lbl, (ev, n) in comps.items()])
    _manifest(out, "design", {"config": str(cfg_path),
                              "replicates": replicates,
                              "jobs": args.jobs}, args.seed, t0)
    return 0


def _oc_dict(oc, weights) -> dict:
    return {
        "label": oc.label,
        "replicates": oc.replicates,
        "completed": oc.completed,
        "errors": oc.errors,
        "rejections": oc.rejections,
        "rejection_rate": oc.rejection_rate,
        "mc_se": oc.mc_se,
        "selection_freq": {w.label(): float(f)
                           for w, f in zip(weights, oc.selection_freq)},
        "mean_events": oc.mean_events,
        "mean_calendar_time": oc.mean_calendar_time,
    }


# --- simulate ---------------------------------------------------------------

def cmd_simulate(args) -> int:
    t0 = time.time()
    if bool(args.scenario) == bool(args.config):
        raise ValueError("give exactly one of --scenario or --config")
    if args.scenario:
        scenario = get_scenario(args.scenario)
        source = args.scenario
    else:
        scenario = _scenario_from(_load_config(args.config), "scenario config")
        source = str(args.config)
    weights = _parse_weights(args.weights)
    if args.level is not None and args.boundary is not None:
        raise ValueError("give at most one of --level or --boundary")
    oc = operating_characteristics(
        scenario, weights, args.replicates, args.seed,
        boundary=args.boundary,
        level=args.level if args.level is not None else 0.025,
        n_jobs=args.jobs)

    out = _out_dir(args)
    report = _oc_dict(oc, weights)
    report["scenario"] = {
        "label": scenario.label,
        "n_per_arm": scenario.n_per_arm,
        "dropout_rate": scenario.dropout_rate,
        "cutoff": {"kind": scenario.cutoff.kind,
                   "calendar": scenario.cutoff.calendar,
                   "events": scenario.cutoff.events}}
    report["decision"] = {"boundary": args.boundary,
                          "level": args.level if args.level is not None
                          else 0.025}
    _write_json(out / "oc.json", report)
    _write_csv(out / "oc_summary.csv",
               ["scenario", "weight", "selection_freq", "rejection_rate",
                "mc_se", "completed"],
               [(scenario.label, w.label(), float(f), oc.rejection_rate,
                 oc.mc_se, oc.completed)
                for w, f in zip(weights, oc.selection_freq)])
    _manifest(out, "simulate", {
        "source": source, "weights": args.weights,
        "replicates": args.replicates, "level": args.level,
        "boundary": args.boundary, "jobs": args.jobs}, args.seed, t0)
    return 0


# --- boundaries ---------------------------------------------------------------

def cmd_boundaries(args) -> int:
    t0 = time.time()
    cfg = _load_config(args.config)
    if "information_fraction" not in cfg:
        raise ValueError("plan config is missing 'information_fraction'")
    plan = GSPlan(
        information_fraction=float(cfg["information_fraction"]),
        alpha=float(cfg.get("alpha", 0.025)),
        spending=str(cfg.get("spending", "obrien_fleming")),
        combo=as_combo(cfg.get("combo", DEFAULT_COMBO)),
        futility_hr=cfg.get("futility_hr", 1.5))
    out = _out_dir(args)

    futility = None
    if args.interim or args.final:
        if not (args.interim and args.final):
            raise ValueError("observed mode needs both --interim and --final")
        interim = load_csv(args.interim)
        final = load_csv(args.final)
        bounds = observed_boundaries(
            plan, interim, final,
            planned_final_events=int(cfg.get("planned_final_events", 0)))
        mode = "observed"
        if plan.futility_hr is not None:
            futility = futility_check(interim, plan.futility_hr).value
    else:
        if "planning" not in cfg:
            raise ValueError("planning mode needs a 'planning' block "
                             "(or pass --interim/--final for observed mode)")
        pcfg = cfg["planning"]
        if "scenario" not in pcfg or "final_events" not in pcfg:
            raise ValueError("'planning' needs 'scenario' and 'final_events'")
        scenario = _scenario_from(pcfg["scenario"], "planning.scenario")
        bounds = plan_boundaries(plan, scenario,
                                 int(pcfg["final_events"]), seed=args.seed,
                                 n_scale=int(pcfg.get("n_scale", 10)))
        mode = "planning"

    report = {
        "mode": mode,
        "alpha": plan.alpha,
        "information_fraction": plan.information_fraction,
        "interim_z": bounds.interim_z,
        "interim_nominal_p": bounds.interim_nominal,
        "final_z": bounds.final_z,
        "final_nominal_p": float(ndtr(bounds.final_z)),
        "correlation": [[float(v) for v in row]
                        for row in bounds.corr.values],
        "battery": [w.label() for w in plan.combo],
    }
    if futility is not None:
        report["futility_recommendation"] = futility
    _write_json(out / "boundaries.json", report)
    _manifest(out, "boundaries", {
        "config": str(args.config), "interim": args.interim,
        "final": args.final}, args.seed, t0)
    return 0


# --- parser -----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="nphkit",
        description="Weighted log-rank combination testing, trial design, "
                    "simulation, and group-sequential boundaries.")
    sub = parser.add_subparsers(dest="subcommand")

    def common(p):
        p.add_argument("--out", default="nphkit_out",
                       help="output directory (default: ./nphkit_out)")
        p.add_argument("--seed", type=int, default=0,
                       help="master seed (default 0)")

    p = sub.add_parser("analyze", help="three-step analysis of a dataset")
    p.add_argument("--data", required=True,
                   help="CSV with columns time,event,arm")
    p.add_argument("--weights", default="default",
                   help="'default', 'modified', or JSON [rho,gamma] pairs")
    p.add_argument("--milestones", default="",
                   help="comma-separated milestone times")
    p.add_argument("--cutpoints", default="",
                   help="comma-separated piecewise-HR cutpoints")
    p.add_argument("--tau", type=float, default=None,
                   help="restriction time (default: min of arm maxima)")
    p.add_argument("--margin", type=float, default=0.0,
                   help="net-benefit margin (default 0)")
    p.add_argument("--two-sided", action="store_true",
                   help="report two-sided p-values")
    common(p)
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("design", help="run the sample-size workflow")
    p.add_argument("--config", default=None,
                   help="design config JSON (default: bundled example)")
    p.add_argument("--replicates", type=int, default=None,
                   help="confirmation replicates (overrides config)")
    p.add_argument("--jobs", type=int, default=1,
                   help="parallel worker processes")
    common(p)
    p.set_defaults(func=cmd_design)

    p = sub.add_parser("simulate", help="operating characteristics by MC")
    p.add_argument("--scenario", default=None,
                   help=f"named scenario, one of: {', '.join(list_scenarios())}")
    p.add_argument("--config", default=None, help="scenario config JSON")
    p.add_argument("--weights", default="default")
    p.add_argument("--replicates", type=int, default=1000)
    p.add_argument("--level", type=float, default=None,
                   help="one-sided adjusted level (default 0.025)")
    p.add_argument("--boundary", type=float, default=None,
                   help="fixed z boundary for min-Z rejection")
    p.add_argument("--jobs", type=int, default=1)
    common(p)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("boundaries", help="two-look boundary solve")
    p.add_argument("--config", required=True, help="plan config JSON")
    p.add_argument("--interim", default=None,
                   help="interim snapshot CSV (observed mode)")
    p.add_argument("--final", default=None,
                   help="final snapshot CSV (observed mode)")
    common(p)
    p.set_defaults(func=cmd_boundaries)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse exits 2 on flag errors, 0 on --help
        return 0 if exc.code in (0, None) else 1
    if not getattr(args, "func", None):
        parser.print_help()
        return 1
    try:
        return args.func(args)
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # pragma: no cover - defensive
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
