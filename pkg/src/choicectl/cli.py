"""Command-line interface: ``choicectl {check,synth,simulate,demo,oracle}``.

Exit codes: 0 success, 1 usage or parse error, 2 domain verdict (incompatible
targets, uncontrollable agent), 3 numeric failure.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from . import __version__
from .approach import CORE_MODES, DEFAULT_PENALTY, ApproachLaw, predict_terminal_sum
from .documents import (
    DocumentError,
    dump_json,
    dump_scenario,
    load_scenario,
    trajectory_csv,
    write_atomic,
)
from .errors import ChoiceCtlError, CompatibilityError, ConfigurationError, ControllabilityError, NumericError
from .feedback import HORIZON_EPS, FeedbackLaw, HybridController
from .model import (
    LinearSystem,
    Scenario,
    TargetTensor,
    compatibility_residual,
    default_tolerance,
    generator_set,
    independent_constraint_count,
)
from .openloop import synthesize
from .oracle import arbitration_report, kkt_solve, penalized_solve, stationarity_check
from .sim import DEFAULT_STEPS, NoiseConfig, run_ensemble, terminal_refined_grid, uniform_grid

EXIT_OK, EXIT_USAGE, EXIT_DOMAIN, EXIT_NUMERIC = 0, 1, 2, 3

KKT_PARAM_TOL = 1e-8
KKT_OBJECTIVE_TOL = 1e-10
STATIONARITY_TOL = 1e-7
APPROACH_PARAM_TOL = 1e-8

DEMO_SEEDS = tuple(range(50))


def _fmt(v) -> str:
    return format(float(v), ".17g")


def _vec(v) -> str:
    return "[" + ", ".join(_fmt(x) for x in np.ravel(v)) + "]"


def _tuple_name(choices) -> str:
    return "_".join(str(c) for c in choices)


# ------------------------------------------------------------------ law construction

def _penalty(scenario: Scenario) -> float:
    return scenario.penalty_weight if scenario.penalty_weight is not None else DEFAULT_PENALTY


def build_family(scenario: Scenario, controller: str, steps: int, core_mode: str = "product"):
    """Return ``(family, grid)``: a per-tuple controller factory and the simulation time grid."""
    if controller == "open_loop":
        law = synthesize(scenario)
        return law.controller, uniform_grid(scenario.t0, scenario.T, steps)
    if controller == "feedback_hybrid":
        law = FeedbackLaw.from_scenario(scenario)

        def family(choices):
            return HybridController(scenario, choices, law)

        if scenario.switch_time is None:
            family(next(iter(scenario.targets.tuples())))  # raises the configuration error
        return family, uniform_grid(scenario.t0, scenario.T, steps)
    if controller == "approach":
        law = ApproachLaw.from_scenario(scenario, f=_penalty(scenario), core_mode=core_mode)
        return law.controller, terminal_refined_grid(scenario.t0, scenario.T, steps, stiffness=law.f)
    raise DocumentError(f"unknown controller {controller!r}")


def law_document(doc, core_mode="product") -> dict:
    scenario = doc.scenario
    provenance = {
        "scenario_sha256": doc.source_sha256,
        "controller": doc.controller,
        "package_version": __version__,
    }
    out = {"version": 1, "kind": doc.controller, "provenance": provenance,
           "horizon": {"t0": scenario.t0, "T": scenario.T}}
    if doc.controller in ("open_loop", "feedback_hybrid"):
        try:
            law = synthesize(scenario)
        except CompatibilityError as exc:
            raise CompatibilityError(f"{exc}; hint: use controller: approach", residual=exc.residual) from None
        provenance["pivot"] = law.pivot
        out["parameters"] = [p.tolist() for p in law.params]
        out["average_cost"] = law.average_cost()
        if doc.controller == "feedback_hybrid":
            if scenario.switch_time is None:
                raise ConfigurationError("feedback_hybrid needs horizon.switch_time")
            out["horizon"]["switch_time"] = scenario.switch_time
            provenance["horizon_eps"] = HORIZON_EPS
        return out
    law = ApproachLaw.from_scenario(scenario, f=_penalty(scenario), core_mode=core_mode)
    provenance.update({"core_mode": law.core_mode, "offset_mode": law.offset_mode,
                       "gramian_method": law.gramian_method,
                       "penalty_from_document": scenario.penalty_weight is not None})
    P, Q = law.parameters(scenario.t0, scenario.x0)
    out["penalty_f"] = law.f
    out["parameters_at_t0"] = [P.tolist(), Q.tolist()]
    out["predicted_terminal_sum"] = predict_terminal_sum(scenario, law.f, law.core_mode).tolist()
    return out


# ------------------------------------------------------------------ commands

def cmd_check(args) -> int:
    doc = load_scenario(args.scenario)
    H = doc.scenario.targets
    tol = args.tolerance if args.tolerance is not None else default_tolerance(H)
    residual = compatibility_residual(H)
    ok = residual <= tol
    print(f"{'compatible' if ok else 'incompatible'}, residual {_fmt(residual)}")
    print(f"tolerance {_fmt(tol)}")
    g = generator_set(H)
    print(f"generator entries ({g.size}):")
    print(f"  {_tuple_name((0,) * H.L)}: {_vec(g.base)}")
    for agent in range(H.L):
        for choice in range(1, H.dims[agent]):
            idx = [0] * H.L
            idx[agent] = choice
            print(f"  {_tuple_name(idx)}: {_vec(g.entry(agent, choice))}")
    print(f"independent constraints: {independent_constraint_count(H.dims)} of {int(np.prod(H.dims))}")
    return EXIT_OK if ok else EXIT_DOMAIN


def cmd_synth(args) -> int:
    doc = load_scenario(args.scenario)
    text = dump_json(law_document(doc, args.mode))
    if args.out:
        write_atomic(args.out, text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def _with_seed(scenario: Scenario, seed):
    if seed is None:
        return scenario
    if scenario.noise is None:
        raise DocumentError("--seed given but the scenario has no noise block")
    return scenario.replace(noise=NoiseConfig(scenario.noise.sigma, scenario.noise.hold_interval,
                                              seed, scenario.noise.mask))


def simulate_to_dir(doc, scenario, out_dir, steps, core_mode="product", label=None) -> dict:
    family, grid = build_family(scenario, doc.controller, steps, core_mode)
    noise = scenario.noise
    try:
        report = run_ensemble(scenario, family, noise, grid=grid)
    except NumericError as exc:
        raise NumericError(f"simulation failed: {exc}") from None
    dims = scenario.system.input_dims
    prefix = "" if label is None else f"{label}_"
    rows = []
    for choices in scenario.targets.tuples():
        tr = report.trajectories[choices]
        write_atomic(os.path.join(out_dir, f"{prefix}trajectory_{_tuple_name(choices)}.csv"),
                     trajectory_csv(tr, dims))
        rows.append({
            "choices": list(choices),
            "terminal_state": tr.terminal_state.tolist(),
            "terminal_error": tr.terminal_error.tolist(),
            "cost": tr.measured_cost_contribution,
            "noise_seed": tr.noise_seed,
        })
    summary = {
        "version": 1,
        "controller": doc.controller,
        "scenario_sha256": doc.source_sha256,
        "grid_points": int(grid.size),
        "average_cost": report.average_cost,
        "max_terminal_error": report.max_terminal_error,
        "tuples": rows,
    }
    if noise is not None:
        summary["noise"] = {"sigma": noise.sigma, "hold_interval": noise.hold_interval, "seed": noise.seed}
    if doc.controller == "approach":
        summary["penalty_f"] = _penalty(scenario)
        summary["core_mode"] = core_mode
    return summary


def cmd_simulate(args) -> int:
    doc = load_scenario(args.scenario)
    scenario = _with_seed(doc.scenario, args.seed)
    out_dir = args.out or "choicectl_out"
    summary = simulate_to_dir(doc, scenario, out_dir, args.steps, args.mode)
    write_atomic(os.path.join(out_dir, "summary.json"), dump_json(summary))
    print(f"average cost {_fmt(summary['average_cost'])}")
    for row in summary["tuples"]:
        print(f"  {_tuple_name(row['choices'])}: terminal error {_vec(row['terminal_error'])}")
    print(f"wrote {len(summary['tuples'])} trajectories to {out_dir}")
    return EXIT_OK


def cmd_oracle(args) -> int:
    doc = load_scenario(args.scenario)
    scenario = doc.scenario
    H = scenario.targets
    tol = args.tolerance if args.tolerance is not None else default_tolerance(H)
    residual = compatibility_residual(H)
    ok = True
    if residual <= tol:
        law = synthesize(scenario)
        kkt = kkt_solve(scenario)
        z = law.stacked()
        dparams = float(np.max(np.abs(z - kkt.z)) / max(1.0, float(np.max(np.abs(kkt.z)))))
        cost = law.average_cost()
        dobj = abs(cost - kkt.objective) / max(1.0, abs(kkt.objective))
        stat = stationarity_check(law, scenario)
        for name, value, limit in (("params", dparams, KKT_PARAM_TOL), ("objective", dobj, KKT_OBJECTIVE_TOL)):
            flag = value < limit
            ok &= flag
            print(f"synthesis vs kkt: delta {name} = {value:.3e} ({'<' if flag else '>='} {limit:g})")
        flag = stat < STATIONARITY_TOL
        ok &= flag
        print(f"stationarity violation = {stat:.3e} ({'<' if flag else '>='} {STATIONARITY_TOL:g})")
        print(f"average cost = {_fmt(cost)}")
    else:
        print(f"synthesis: not applicable, targets incompatible (residual {_fmt(residual)})")
        if doc.controller != "approach":
            print("hint: use controller: approach")
            return EXIT_DOMAIN
    if scenario.system.L == 2:
        f = _penalty(scenario)
        best = penalized_solve(scenario, f)
        law = ApproachLaw.from_scenario(scenario, f=f, core_mode=args.mode)
        P, Q = law.parameters(scenario.t0, scenario.x0)
        scale = max(1.0, max(float(np.max(np.abs(p))) for p in best.params))
        dev = max(float(np.max(np.abs(P - best.params[0]))), float(np.max(np.abs(Q - best.params[1])))) / scale
        flag = dev < APPROACH_PARAM_TOL
        ok &= flag
        print(f"penalized law ({args.mode}) vs oracle at t0: delta params = {dev:.3e} "
              f"({'<' if flag else '>='} {APPROACH_PARAM_TOL:g})")
        print(arbitration_report(scenario, f)[1])
    return EXIT_OK if ok else EXIT_NUMERIC


# ------------------------------------------------------------------ demos

_DI_A = [[0.0, 1.0], [0.0, 0.0]]
_DI_B = ([[0.0], [1.0]], [[0.0], [-1.0]])


def rendezvous_scenario(e0, h, noise=None) -> Scenario:
    """Relative position/velocity of two double integrators; each agent accelerates itself."""
    system = LinearSystem(np.array(_DI_A), tuple(np.array(B) for B in _DI_B))
    targets = TargetTensor.from_flat((2, 2), [[h, 0.0], [0.0, 0.0], [0.0, 0.0], [-h, 0.0]])
    return Scenario(system, 0.0, 1.0, np.array([e0, 0.0]), targets, switch_time=0.6, noise=noise)


DEMOS = {
    "rendezvous_fig2": lambda: rendezvous_scenario(10.0, 5.0),
    "rendezvous_noisy": lambda: rendezvous_scenario(
        5.0, 10.0, NoiseConfig(sigma=0.5, hold_interval=0.01, seed=0, mask=(0.0, 1.0))),
}


def _ensemble_metrics(scenario, family, noise, grid):
    rep = run_ensemble(scenario, family, noise, grid=grid)
    return rep, rep.mean_terminal_error(), rep.average_cost


def noisy_comparison(scenario: Scenario, seeds=DEMO_SEEDS, steps=DEFAULT_STEPS):
    """Open loop versus hybrid under identical noise, one ensemble per seed.

    Returns a list of ``(seed, ol_error, ol_cost, hybrid_error, hybrid_cost)``.
    """
    grid = uniform_grid(scenario.t0, scenario.T, steps)
    ol = synthesize(scenario)
    fb = FeedbackLaw.from_scenario(scenario)
    base = scenario.noise
    rows = []
    for seed in seeds:
        noise = NoiseConfig(base.sigma, base.hold_interval, seed, base.mask)
        _, e_ol, c_ol = _ensemble_metrics(scenario, ol.controller, noise, grid)
        _, e_hy, c_hy = _ensemble_metrics(
            scenario, lambda c: HybridController(scenario, c, fb), noise, grid)
        rows.append((seed, e_ol, c_ol, e_hy, c_hy))
    return rows


def cmd_demo(args) -> int:
    if args.name not in DEMOS:
        print(f"unknown demo {args.name!r}; available: {', '.join(sorted(DEMOS))}", file=sys.stderr)
        return EXIT_USAGE
    out_dir = args.out or args.name
    scenario = DEMOS[args.name]()
    write_atomic(os.path.join(out_dir, "scenario.json"), dump_scenario(scenario, "open_loop"))
    doc = load_scenario(os.path.join(out_dir, "scenario.json"))
    write_atomic(os.path.join(out_dir, "law.json"), dump_json(law_document(doc)))
    if scenario.noise is None:
        summary = {"version": 1, "demo": args.name, "modes": {}}
        for mode in ("open_loop", "feedback_hybrid"):
            mdoc = type(doc)(scenario, mode, doc.source_sha256)
            s = simulate_to_dir(mdoc, scenario, out_dir, args.steps, label=mode)
            summary["modes"][mode] = {"average_cost": s["average_cost"],
                                      "max_terminal_error": s["max_terminal_error"],
                                      "tuples": s["tuples"]}
            print(f"{mode}: average cost {_fmt(s['average_cost'])}, "
                  f"max terminal error {s['max_terminal_error']:.3e}")
            for row in s["tuples"]:
                print(f"  {_tuple_name(row['choices'])}: e(T) = {_fmt(row['terminal_state'][0])}")
    else:
        seeds = tuple(range(args.seeds)) if args.seed is None else tuple(args.seed + k for k in range(args.seeds))
        rows = noisy_comparison(scenario, seeds, args.steps)
        table = np.array([r[1:] for r in rows])
        med = np.median(table, axis=0)
        lines = ["seed,open_loop_terminal_error,open_loop_cost,hybrid_terminal_error,hybrid_cost"]
        lines += [",".join([str(r[0])] + [_fmt(v) for v in r[1:]]) for r in rows]
        write_atomic(os.path.join(out_dir, "seeds.csv"), "\n".join(lines) + "\n")
        summary = {
            "version": 1,
            "demo": args.name,
            "seeds": list(seeds),
            "noise": {"sigma": scenario.noise.sigma, "hold_interval": scenario.noise.hold_interval,
                      "mask": list(scenario.noise.mask)},
            "median": {"open_loop": {"terminal_error": med[0], "cost": med[1]},
                       "feedback_hybrid": {"terminal_error": med[2], "cost": med[3]}},
            "hybrid_lower_terminal_error": bool(med[2] < med[0]),
            "hybrid_lower_cost": bool(med[3] < med[1]),
        }
        print(f"{len(seeds)} seeds, sigma {_fmt(scenario.noise.sigma)}, hold {_fmt(scenario.noise.hold_interval)}")
        print(f"median terminal error: open loop {med[0]:.6g}, hybrid {med[2]:.6g}")
        print(f"median measured cost:  open loop {med[1]:.6g}, hybrid {med[3]:.6g}")
    write_atomic(os.path.join(out_dir, "summary.json"), dump_json(summary))
    print(f"wrote {out_dir}")
    return EXIT_OK


# ------------------------------------------------------------------ entry point

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--steps", type=int, default=DEFAULT_STEPS, help="RK4 steps per horizon (default %(default)s)")
    common.add_argument("--seed", type=int, default=None, help="override the noise seed")
    common.add_argument("--tolerance", type=float, default=None, help="compatibility tolerance")
    common.add_argument("--mode", choices=CORE_MODES, default="product",
                        help="terminal-core reading for the penalized law (default %(default)s)")
    common.add_argument("--out", default=None, help="output file (synth) or directory")

    parser = argparse.ArgumentParser(prog="choicectl", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("check", parents=[common], help="compatibility verdict for a scenario's targets")
    p.add_argument("scenario")
    p.set_defaults(func=cmd_check)
    p = sub.add_parser("synth", parents=[common], help="write the law document for a scenario")
    p.add_argument("scenario")
    p.set_defaults(func=cmd_synth)
    p = sub.add_parser("simulate", parents=[common], help="simulate every choice tuple, write CSVs and a summary")
    p.add_argument("scenario")
    p.set_defaults(func=cmd_simulate)
    p = sub.add_parser("demo", parents=[common], help="run a canned rendezvous demo")
    p.add_argument("name", help=", ".join(sorted(DEMOS)))
    p.add_argument("--seeds", type=int, default=len(DEMO_SEEDS), help="number of noise seeds (noisy demo)")
    p.set_defaults(func=cmd_demo)
    p = sub.add_parser("oracle", parents=[common], help="cross-check the synthesis against the oracles")
    p.add_argument("scenario")
    p.set_defaults(func=cmd_oracle)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    if args.steps < 1:
        print("error: --steps must be positive", file=sys.stderr)
        return EXIT_USAGE
    try:
        return args.func(args)
    except (CompatibilityError, ControllabilityError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DOMAIN
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ChoiceCtlError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
