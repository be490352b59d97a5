"""Command-line front end.

Every subcommand accepts ``--config FILE`` holding flat ``key = value`` lines
(keys are long option names, ``#`` starts a comment) or a manifest JSON written
by an earlier run; explicit flags override the file.  Each run writes
``<output>.manifest.json`` with the resolved options, seeds and package
version, so ``--config <manifest>`` repeats the run.

Exit codes: 0 success, 1 usage error, 2 data or estimation error.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys

from . import __version__
from .crossfit import crossfit_v_mr
from .errors import SurvivorDTRError
from .estimators import v_aipw, v_ipw, v_mr, v_q_plugin
from .nuisance import ScenarioSpec, fit_suite
from .policy import DEConfig, LinearPolicy, learn
from .sensitivity import sensitivity_grid
from .simulation import (PRESET_SETTINGS, SimConfig, correct_bases, default_eval_policy, marginal_rates,
                         run_ope_experiment, run_opl_experiment, simulate, write_records, write_summaries)
from .trajectory import read_csv, write_csv

log = logging.getLogger("survivor_dtr")

ESTIMATORS = ("mr", "q_plugin", "ipw", "aipw")
NUISANCES = ("e1", "c1", "p1", "e2", "c2", "p2", "mu2", "m_p2", "m_mu2")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _floats(text):
    try:
        return [float(v) for v in str(text).split(",") if v.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from exc


def _ints(text):
    try:
        return [int(v) for v in str(text).split(",") if v.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from exc


def _names(text):
    return [v.strip() for v in str(text).split(",") if v.strip()]


def _clip(text):
    if str(text).lower() in ("", "none", "off"):
        return None
    return float(text)


# --------------------------------------------------------------------------
# parser
# --------------------------------------------------------------------------

def _common(p, *, data=True, policy=True, scenario=True):
    p.add_argument("--config", help="key = value file or manifest JSON")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="output path")
    p.add_argument("--verbose", action="store_true")
    if data:
        p.add_argument("--data", help="input CSV")
    if policy:
        p.add_argument("--policy", help="policy JSON (default: the built-in evaluation policy)")
    if scenario:
        p.add_argument("--scenario", default="M1", help="M1..M6")
        p.add_argument("--flags", default="", help="per-nuisance overrides, e.g. mu2=intercept_only,p2=correct")
        p.add_argument("--preset", default=None,
                       help="use the exact model bases of a simulation preset (dgp1, dgp2)")
        p.add_argument("--eps", type=float, default=0.01, help="positivity trimming")
        p.add_argument("--clip", type=_clip, default=None, help="outcome clip bound")


def _de(p):
    p.add_argument("--pop-factor", type=int, default=15)
    p.add_argument("--de-f", type=float, default=0.8)
    p.add_argument("--de-cr", type=float, default=0.9)
    p.add_argument("--max-gen", type=int, default=200)
    p.add_argument("--stall-gen", type=int, default=30)


def build_parser():
    parser = _Parser(prog="survivor-dtr", description="Always-survivor value estimation for two-stage regimes.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    subs = {}

    p = subs["simulate"] = sub.add_parser("simulate", help="draw a dataset from a simulation preset")
    _common(p, data=False, policy=False, scenario=False)
    p.add_argument("--preset", default="dgp1", choices=sorted(PRESET_SETTINGS))
    p.add_argument("--n", type=int, default=2000)
    p.add_argument("--replication", type=int, default=0)

    p = subs["evaluate"] = sub.add_parser("evaluate", help="estimate the value of a fixed policy")
    _common(p)
    p.add_argument("--estimator", default="mr", help="comma list from mr,q_plugin,ipw,aipw or 'all'")
    p.add_argument("--bootstrap", type=int, default=200, help="bootstrap draws for q_plugin and ipw")

    p = subs["crossfit"] = sub.add_parser("crossfit", help="cross-fitted multiply robust estimate")
    _common(p)
    p.add_argument("--folds", type=int, default=5)
    p.add_argument("--stratified-folds", action="store_true")

    p = subs["learn"] = sub.add_parser("learn", help="learn a linear two-stage policy")
    _common(p, policy=False)
    p.add_argument("--objective", default="mr", choices=["mr", "aipw"])
    p.add_argument("--feature-map-2", default="x1,a1,x2")
    _de(p)

    p = subs["sensitivity"] = sub.add_parser("sensitivity", help="sensitivity grid over (rho, lambda)")
    _common(p)
    p.add_argument("--rho-grid", type=_floats, default=[0.8, 1.0, 1.25])
    p.add_argument("--lambda-grid", type=_floats, default=[-0.2, 0.0])
    p.add_argument("--bootstrap", type=int, default=0)

    p = subs["experiment"] = sub.add_parser("experiment", help="repeated simulation experiments")
    _common(p, data=False, policy=True, scenario=False)
    p.add_argument("kind", choices=["ope", "opl"])
    p.add_argument("--preset", default="dgp1", choices=sorted(PRESET_SETTINGS))
    p.add_argument("--reps", type=int, default=500)
    p.add_argument("--n", type=_ints, default=[2000])
    p.add_argument("--scenarios", type=_names, default=["M1", "M2", "M3", "M4", "M5", "M6"])
    p.add_argument("--estimators", type=_names, default=["mr"])
    p.add_argument("--objectives", type=_names, default=["mr", "aipw"])
    p.add_argument("--truth-m", type=int, default=1_000_000)
    p.add_argument("--star-m", type=int, default=100_000)
    p.add_argument("--pcd-m", type=int, default=100_000)
    p.add_argument("--bootstrap", type=int, default=0)
    p.add_argument("--threads", type=int, default=os.cpu_count() or 1)
    _de(p)

    p = subs["validate"] = sub.add_parser("validate", help="parse and check a dataset")
    _common(p, policy=False, scenario=False)
    return parser, subs


# --------------------------------------------------------------------------
# config files and manifests
# --------------------------------------------------------------------------

def read_config(path):
    """Flat ``key = value`` text or a manifest JSON; returns ``{dest: raw value}``."""
    with open(path) as fh:
        text = fh.read()
    if text.lstrip().startswith("{"):
        obj = json.loads(text)
        return dict(obj.get("config", obj))
    out = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key.replace("-", "_")] = value
    return out


def _apply_config(subparser, values):
    known = {a.dest: a for a in subparser._actions}
    defaults = {}
    for key, raw in values.items():
        if key in ("command", "config", "kind"):
            continue
        if key not in known:
            raise UsageError(f"unknown configuration key {key!r}")
        action = known[key]
        if isinstance(raw, str) and action.type is not None:
            raw = action.type(raw)
        elif isinstance(raw, str) and isinstance(action, argparse._StoreTrueAction):
            raw = raw.lower() in ("1", "true", "yes", "on")
        defaults[key] = raw
    subparser.set_defaults(**defaults)


def parse(argv):
    parser, subs = build_parser()
    args = parser.parse_args(argv)
    if args.command is None:
        parser.print_usage(sys.stderr)
        raise UsageError("a subcommand is required")
    if args.config:
        values = read_config(args.config)
        if "command" in values and values["command"] != args.command:
            raise UsageError(f"manifest is for {values['command']!r}, not {args.command!r}")
        _apply_config(subs[args.command], values)
        args = parser.parse_args(argv)
    return args


def _manifest_path(out):
    if out is None:
        return None
    if os.path.isdir(out) or out.endswith(os.sep):
        return os.path.join(out, "manifest.json")
    return out + ".manifest.json"


def write_manifest(args, outputs, extra=None):
    path = _manifest_path(args.out)
    if path is None:
        return None
    config = {k: v for k, v in vars(args).items() if k not in ("config", "verbose")}
    manifest = {"command": args.command, "config": config, "seed": args.seed, "version": __version__,
                "outputs": list(outputs)}
    if extra:
        manifest.update(extra)
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    return path


# --------------------------------------------------------------------------
# helpers
# --------------------------------------------------------------------------

def _spec(args, d):
    flags = dict(ScenarioSpec.preset(args.scenario).flags)
    for item in _names(args.flags):
        if "=" not in item:
            raise UsageError(f"bad --flags entry {item!r}")
        name, flag = (s.strip() for s in item.split("=", 1))
        if name not in NUISANCES:
            raise UsageError(f"unknown nuisance {name!r}")
        flags[name] = flag
    bases = None
    if args.preset:
        if args.preset not in PRESET_SETTINGS:
            raise UsageError(f"unknown preset {args.preset!r}")
        if d.p1 != 1 or d.p2 != 1:
            raise UsageError("preset bases need one covariate per stage")
        bases = correct_bases(SimConfig.from_preset(args.preset))
    return ScenarioSpec(args.scenario, flags, bases)


def _policy(args):
    return LinearPolicy.from_json(args.policy) if args.policy else default_eval_policy()


def _load(args):
    if not args.data:
        raise UsageError("--data is required")
    return read_csv(args.data)


def _emit(obj, out):
    text = json.dumps(obj, indent=2, sort_keys=True)
    if out:
        os.makedirs(os.path.dirname(os.path.abspath(out)), exist_ok=True)
        with open(out, "w") as fh:
            fh.write(text + "\n")
    print(text)


def _de_config(args):
    cfg = DEConfig(pop_factor=args.pop_factor, F=args.de_f, CR=args.de_cr, max_gen=args.max_gen,
                   stall_gen=args.stall_gen, seed=args.seed)
    cfg.validate()
    return cfg


# --------------------------------------------------------------------------
# subcommands
# --------------------------------------------------------------------------

def cmd_simulate(args):
    if not args.out:
        raise UsageError("--out is required")
    cfg = SimConfig.from_preset(args.preset, n=args.n, seed=args.seed)
    d = simulate(cfg, args.replication)
    write_csv(d, args.out)
    rates = marginal_rates(d)
    print(json.dumps(rates, sort_keys=True))
    write_manifest(args, [args.out], {"sim_config": cfg.to_dict()})


def cmd_evaluate(args):
    d = _load(args)
    policy = _policy(args)
    spec = _spec(args, d)
    names = list(ESTIMATORS) if args.estimator == "all" else _names(args.estimator)
    bad = [e for e in names if e not in ESTIMATORS]
    if bad:
        raise UsageError(f"unknown estimator(s) {bad}; choose from {ESTIMATORS}")
    reports = {}
    if set(names) - {"aipw"}:
        suite = fit_suite(d, spec, policy, eps=args.eps, clip=args.clip)
        for name in names:
            if name == "mr":
                reports[name] = v_mr(d, policy, suite)
            elif name == "q_plugin":
                reports[name] = v_q_plugin(d, policy, suite, B=args.bootstrap, seed=args.seed)
            elif name == "ipw":
                reports[name] = v_ipw(d, policy, suite, B=args.bootstrap, seed=args.seed)
    if "aipw" in names:
        dac = fit_suite(d, spec, policy, eps=args.eps, clip=args.clip, death_as_censoring=True)
        reports["aipw"] = v_aipw(d, policy, dac)
    out = {k: reports[k].to_dict() for k in names}
    _emit(out[names[0]] if len(names) == 1 else out, args.out)
    write_manifest(args, [args.out] if args.out else [])


def cmd_crossfit(args):
    d = _load(args)
    rep = crossfit_v_mr(d, _policy(args), _spec(args, d), J=args.folds, seed=args.seed,
                        stratified=args.stratified_folds, eps=args.eps, clip=args.clip)
    _emit(rep.to_dict(), args.out)
    write_manifest(args, [args.out] if args.out else [])


def cmd_learn(args):
    d = _load(args)
    res = learn(d, _spec(args, d), args.objective, _de_config(args), feature_map_2=tuple(_names(args.feature_map_2)),
                eps=args.eps, clip=args.clip)
    outputs = []
    if args.out:
        res.policy.to_json(args.out)
        outputs.append(args.out)
        report_path = args.out + ".report.json"
        with open(report_path, "w") as fh:
            json.dump(res.value_report.to_dict(), fh, indent=2, sort_keys=True)
        outputs.append(report_path)
    print(json.dumps({"policy": res.policy.to_dict(), "report": res.value_report.to_dict(),
                      "evaluations": res.evaluations}, indent=2, sort_keys=True))
    write_manifest(args, outputs)


def cmd_sensitivity(args):
    d = _load(args)
    policy = _policy(args)
    spec = _spec(args, d)
    suite = fit_suite(d, spec, policy, eps=args.eps, clip=args.clip, all_m_p2=True)
    grid = sensitivity_grid(d, policy, suite, args.rho_grid, args.lambda_grid, spec=spec, B=args.bootstrap,
                            seed=args.seed)
    if args.out:
        grid.to_csv(args.out)
    print(json.dumps({"baseline": grid.baseline, "max_relative_deviation": grid.max_relative_deviation,
                      "rows": grid.rows}, indent=2))
    write_manifest(args, [args.out] if args.out else [])


def cmd_experiment(args):
    if not args.out:
        raise UsageError("--out (a directory) is required")
    os.makedirs(args.out, exist_ok=True)
    cfg = SimConfig.from_preset(args.preset, seed=args.seed)
    if args.kind == "ope":
        bad = [s for s in args.scenarios if s not in ScenarioSpec.PRESETS]
        if bad:
            raise UsageError(f"unknown scenario(s) {bad}")
        summaries = run_ope_experiment(cfg, args.scenarios, args.n, args.reps, _policy(args), seed=args.seed,
                                       estimators=args.estimators, truth_m=args.truth_m,
                                       bootstrap=args.bootstrap, workers=args.threads)
    else:
        star = LinearPolicy.from_json(args.policy) if args.policy else None
        summaries = run_opl_experiment(cfg, args.n, args.reps, args.objectives, seed=args.seed,
                                       de_config=_de_config(args), policy_star=star, star_m=args.star_m,
                                       truth_m=args.truth_m, pcd_m=args.pcd_m, workers=args.threads)
    records = os.path.join(args.out, f"{args.kind}_records.csv")
    write_records(summaries, records)
    paths = write_summaries(summaries, args.out, prefix=args.kind)
    table = [{k: v for k, v in s.to_dict().items() if k != "records"} for s in summaries]
    print(json.dumps(table, indent=2, sort_keys=True))
    write_manifest(args, [records] + paths)


def cmd_validate(args):
    d = _load(args)
    summary = {"rows": d.n, "p1": d.p1, "p2": d.p2, **marginal_rates(d)}
    _emit(summary, args.out)
    write_manifest(args, [args.out] if args.out else [])


COMMANDS = {
    "simulate": cmd_simulate,
    "evaluate": cmd_evaluate,
    "crossfit": cmd_crossfit,
    "learn": cmd_learn,
    "sensitivity": cmd_sensitivity,
    "experiment": cmd_experiment,
    "validate": cmd_validate,
}


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = parse(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except (SurvivorDTRError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
