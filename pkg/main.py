import argparse
import json
import logging
import os
import sys

from dotenv import load_dotenv

from controller import DEFAULT_WINDOW, OBJECTIVES, SOLVERS, StepError
from devices import InfeasibleProfileError
from feeder import FeederError
from milp import ModelError
from oracle import EnumerationLimitError
from powerflow import ConvergenceError
from profiles import ProfileError
from runner import Scenario, cmd_run, cmd_sweep_price_b, cmd_validate_pf, cmd_voltvar_table
from solver import InfeasibleError, SolverLimitError, UnboundedError
from utils import setup_logging

log = logging.getLogger("cvr_mpc")

EXIT_OK = 0
EXIT_INFEASIBLE = 1
EXIT_INPUT = 2
EXIT_LIMIT = 3


def exit_code_for(exc):
    if isinstance(exc, StepError):
        return exc.exit_code
    if isinstance(exc, (InfeasibleError, UnboundedError)):
        return EXIT_INFEASIBLE
    if isinstance(exc, (SolverLimitError, ConvergenceError, EnumerationLimitError)):
        return EXIT_LIMIT
    if isinstance(exc, (FeederError, ProfileError, InfeasibleProfileError, ModelError, FileNotFoundError, ValueError)):
        return EXIT_INPUT
    return EXIT_INFEASIBLE


def report_error(exc, out_dir=None):
    """Prints the error JSON to stderr and mirrors it to <out>/error.json."""
    code = exit_code_for(exc)
    payload = {"error": str(exc), "type": type(exc).__name__, "exit_code": code}
    if isinstance(exc, StepError):
        payload.update({"step": exc.step, "status": exc.status, "model_dump": exc.dump_path})
    if isinstance(exc, ConvergenceError):
        payload["trace"] = exc.trace[-10:]
    print(json.dumps(payload), file=sys.stderr)
    if out_dir:
        try:
            os.makedirs(out_dir, exist_ok=True)
            with open(os.path.join(out_dir, "error.json"), "w", encoding="utf-8") as f:
                json.dump(payload, f, indent=2)
        except OSError:
            pass
    return code


def _float_list(text):
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


def _step_list(text):
    """'5' / '0,4,8' / '10:20' (half-open)."""
    try:
        if ":" in text:
            lo, hi = text.split(":", 1)
            return list(range(int(lo), int(hi)))
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad step selection {text!r}")


def build_parser():
    parser = argparse.ArgumentParser(prog="cvr-mpc", description="Model-predictive Volt-VAr / CVR controller")
    parser.add_argument("--log-level", default=None, help="overrides CVR_MPC_LOG_LEVEL")
    sub = parser.add_subparsers(dest="command", required=True)

    def scenario_args(p):
        p.add_argument("--feeder", required=True)
        p.add_argument("--profiles", required=True)
        p.add_argument("--objective", choices=OBJECTIVES, default="energy")
        p.add_argument("--window", type=int, default=DEFAULT_WINDOW)
        p.add_argument("--price-b", type=float, default=0.0, help="depreciation price, cents/kWh")
        p.add_argument("--solver", choices=SOLVERS, default="builtin")
        p.add_argument("--taps", type=int, default=None, help="tap positions per regulator (default: 9 builtin, all export)")
        p.add_argument("--out", default="out")

    run = sub.add_parser("run", help="full-day receding-horizon run")
    scenario_args(run)
    run.add_argument("--oracle", action="store_true", help="certify the first window by enumeration")
    run.add_argument("--terminal-soc", action="store_true")
    run.add_argument("--noise", type=float, default=0.0, help="relative load forecast error (std dev)")

    sweep = sub.add_parser("sweep-price-b", help="depreciation price sweep")
    scenario_args(sweep)
    sweep.add_argument("--values", type=_float_list, default=[0.0, 20.0, 60.0])
    sweep.add_argument("--terminal-soc", action="store_true")

    pf = sub.add_parser("validate-pf", help="linear vs nonlinear power flow error")
    pf.add_argument("--feeder", required=True)
    pf.add_argument("--profiles", required=True)
    pf.add_argument("--steps", type=_step_list, default=None)
    pf.add_argument("--load-scale", type=float, default=1.0)
    pf.add_argument("--out", default="out")

    vv = sub.add_parser("voltvar-table", help="min/max loading Volt-VAr settings")
    scenario_args(vv)
    return parser


def _scenario(args):
    return Scenario(
        feeder=args.feeder,
        profiles=args.profiles,
        objective=args.objective,
        window=args.window,
        price_b=args.price_b,
        solver=args.solver,
        out_dir=args.out,
        oracle=getattr(args, "oracle", False),
        terminal_soc=getattr(args, "terminal_soc", False),
        noise=getattr(args, "noise", 0.0),
        tap_positions=args.taps,
    )


def cli(argv=None):
    load_dotenv()
    args = build_parser().parse_args(argv)
    setup_logging(args.log_level)

    try:
        if args.command == "run":
            result = cmd_run(_scenario(args))
            print(json.dumps({"status": result["status"], "summary": result["summary_json"]}))
        elif args.command == "sweep-price-b":
            result = cmd_sweep_price_b(_scenario(args), args.values)
            print(json.dumps({"status": result["status"], "sweep": result["sweep_csv"],
                              "monotone": result["monotone"]}))
        elif args.command == "validate-pf":
            result = cmd_validate_pf(args.feeder, args.profiles, args.out, steps=args.steps,
                                     load_scale=args.load_scale)
            print(json.dumps({"status": result["status"], "report": result["validate_csv"],
                              "max_error_pu": result["max_error"]}))
        else:
            result = cmd_voltvar_table(_scenario(args))
            print(json.dumps({"status": result["status"], "table": result["voltvar_csv"],
                              "identical": result["identical"]}))
    except Exception as e:
        log.error("❌ %s: %s", type(e).__name__, e)
        return report_error(e, getattr(args, "out", None))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(cli())
