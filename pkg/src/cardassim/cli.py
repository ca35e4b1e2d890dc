"""Command line entry point: ``cardassim <command> ...``.

Exit codes: 0 success, 2 configuration or usage error, 3 numerical failure,
4 comparison verdict "B not dominant".
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import yaml

from .errors import CardAssimError, ConfigurationError, UsageError
from .harness import (
    build_basis,
    compare_runs,
    comparison_text,
    diagnose,
    load_run_scenario,
    read_table,
    run_scenario,
    write_diagnostics,
    write_pod,
    write_table,
    write_truth,
)
from .scenario import NoiseModel, TwinScenario, add_noise, load_scenario, simulate_truth

EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL, EXIT_NOT_DOMINANT = 0, 2, 3, 4


def _save_scenario(scn: TwinScenario, out: Path) -> None:
    (out / "scenario.yaml").write_text(yaml.safe_dump(scn.to_dict(), sort_keys=False))


def cmd_simulate(args) -> int:
    scn = load_scenario(args.scenario)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_truth(out, simulate_truth(scn))
    _save_scenario(scn, out)
    print(f"wrote {out / 'truth.csv'} and {out / 'observations_clean.csv'}")
    return EXIT_OK


def cmd_noise(args) -> int:
    src = Path(args.inp)
    clean = read_table(src / "observations_clean.csv")
    cfg = src / "scenario.yaml"
    scn = load_scenario(cfg) if cfg.is_file() else TwinScenario.from_dict({})
    nm = NoiseModel.from_scenario(scn, seed=args.seed)
    out = Path(args.out) if args.out else src
    out.mkdir(parents=True, exist_ok=True)
    write_table(out / "observations.csv", add_noise(clean, nm))
    print(f"wrote {out / 'observations.csv'} (seed {nm.seed})")
    return EXIT_OK


def cmd_pod(args) -> int:
    scn = load_scenario(args.scenario)
    if args.rank is not None and args.rank < 1:
        raise ConfigurationError("rank must be at least 1", key="pod.rank")
    rank = args.rank if args.rank is not None else int(scn.config["pod"]["rank"]) or None
    if rank is None:
        raise ConfigurationError("scenario requests no POD modes; pass --rank", key="pod.rank")
    basis = build_basis(scn, rank)
    side = write_pod(Path(args.out), basis)
    print(f"rank {basis.rank}, orthonormality error {basis.orthonormality_error():.2e}; "
          f"singular values in {side}")
    return EXIT_OK


def cmd_estimate(args) -> int:
    scn = load_scenario(args.scenario)
    over = {}
    if args.filter:
        over["kind"] = args.filter
    if args.obs:
        over["obs"] = args.obs
    sections = {"filter": over} if over else {}
    if args.seed is not None:
        sections["seed"] = args.seed
    if sections:
        scn = scn.with_overrides(**sections)
    table = read_table(Path(args.data) / "observations.csv") if args.data else None
    report = run_scenario(scn, Path(args.out), table)
    print(report["summary"], end="")
    return EXIT_OK


def cmd_diagnose(args) -> int:
    run = Path(args.run)
    scn = load_run_scenario(run)
    want_g = args.gramian or not args.sensitivity
    want_s = args.sensitivity or not args.gramian
    diag = diagnose(scn)
    write_diagnostics(run, diag, gramian=want_g, sensitivity=want_s)
    if want_g:
        print(f"lambda_min (ecg) = {diag['lambda_min_ecg']:.6g}")
        if "lambda_min_both" in diag:
            print(f"lambda_min (ecg+mech) = {diag['lambda_min_both']:.6g}")
    if want_s:
        for j, n in enumerate(scn.param_names):
            wm = diag["width_m"][j] if diag["width_m"] is not None else float("nan")
            print(f"{n}: electrical support {diag['width_e'][j]:.1f} ms, mechanical support {wm:.1f} ms")
    return EXIT_OK


def cmd_compare(args) -> int:
    cmp = compare_runs(Path(args.a), Path(args.b))
    print(comparison_text(cmp), end="")
    if args.json:
        rows = {"rows": cmp["rows"], "b_dominant": cmp["b_dominant"]}
        Path(args.json).write_text(json.dumps(rows, indent=2) + "\n")
    return EXIT_OK if cmp["b_dominant"] else EXIT_NOT_DOMINANT


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cardassim", description="Cardiac twin experiments and estimation.")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="truth run and clean observations")
    s.add_argument("--scenario", required=True, help="YAML file or built-in scenario name")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("noise", help="add Gaussian noise to observations_clean.csv")
    s.add_argument("--in", dest="inp", required=True)
    s.add_argument("--seed", type=int, default=None)
    s.add_argument("--out", default=None, help="defaults to the input directory")
    s.set_defaults(func=cmd_noise)

    s = sub.add_parser("pod", help="POD basis of the scenario snapshots")
    s.add_argument("--scenario", required=True)
    s.add_argument("--out", required=True, help="CSV file for the modes")
    s.add_argument("--rank", type=int, default=None)
    s.set_defaults(func=cmd_pod)

    s = sub.add_parser("estimate", help="run a filter and write the artifact directory")
    s.add_argument("--scenario", required=True)
    s.add_argument("--filter", choices=("ukf", "ekf", "roukf", "roekf", "pod-roukf", "coupled"))
    s.add_argument("--obs", choices=("ecg", "mech", "both"))
    s.add_argument("--seed", type=int, default=None, help="noise seed override")
    s.add_argument("--data", default=None, help="directory holding observations.csv")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_estimate)

    s = sub.add_parser("diagnose", help="observability Gramian and sensitivities of a run's scenario")
    s.add_argument("--run", required=True)
    s.add_argument("--gramian", action="store_true")
    s.add_argument("--sensitivity", action="store_true")
    s.set_defaults(func=cmd_diagnose)

    s = sub.add_parser("compare", help="compare final errors of two runs")
    s.add_argument("--a", required=True)
    s.add_argument("--b", required=True)
    s.add_argument("--json", default=None)
    s.set_defaults(func=cmd_compare)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except CardAssimError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except (OSError, yaml.YAMLError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
