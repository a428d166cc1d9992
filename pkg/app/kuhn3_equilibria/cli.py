from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import Any, Sequence

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator
from tqdm import tqdm

from kuhn3_equilibria.branch_io import export_branch_csv, load_branch_csv
from kuhn3_equilibria.continuation import Branch, ContinuationConfig, trace_branch
from kuhn3_equilibria.equilibrium_system import verify_equilibrium
from kuhn3_equilibria.errors import InvalidGameSpec, SolverError
from kuhn3_equilibria.figures import emit_expectation_plot, emit_range_frames
from kuhn3_equilibria.game_model import SKP_CARDS, GameSpec, build_terms, embed_free
from kuhn3_equilibria.settings import Settings, configure_logging
from kuhn3_equilibria.skp_oracle import compare_embedding


logger = logging.getLogger("kuhn3_equilibria.cli")

EXIT_OK = 0
EXIT_VERIFY_FAILED = 1
EXIT_USAGE = 2
EXIT_FAILURE = 3

BRANCH_FILE = "branch.csv"

# argparse dest -> RunConfig field
_FLAG_FIELDS: dict[str, str] = {
    "cards": "n_cards",
    "pot_max": "pot_max",
    "epsilon": "epsilon",
    "seed": "seed",
    "out": "out",
    "skp": "skp",
    "delta_init": "delta_init",
    "delta_max": "delta_max",
    "ancestor_rule": "ancestor_rule",
    "dominance_fixing": "dominance_fixing",
    "step_budget": "step_budget",
    "tol_zero": "tol_zero",
    "exploit_tol": "exploit_tol",
    "skp_tol": "skp_tolerance",
}


class RunConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    n_cards: int = Field(4, ge=4, description="Deck size N; the game needs N > 3")
    pot_max: float = Field(10.0, gt=0.0, description="Stop once P exceeds this value moving upward")
    epsilon: float = Field(1e-6, gt=0.0, lt=1.0, description="Regularization parameter")
    seed: int = Field(0, ge=0, description="Seed for the bootstrap restarts")
    out: str | None = Field(None, description="Output directory (trace) or file (plot)")
    skp: bool = Field(False, description="Trace the simplified four-card game")
    delta_init: float = Field(1e-3, gt=0.0)
    delta_max: float = Field(0.1, gt=0.0)
    ancestor_rule: bool = Field(True, description="Use the passive-ancestor gradient for subgames that cannot be reached")
    dominance_fixing: bool = Field(True, description="Pin dominated entries")
    step_budget: int | None = Field(None, ge=1, description="Defaults to KUHN3_STEP_BUDGET")
    tol_zero: float = Field(1e-3, gt=0.0, lt=0.5)
    exploit_tol: float = Field(1e-3, gt=0.0)
    skp_tolerance: float = Field(1e-3, gt=0.0)

    @model_validator(mode="after")
    def _check_steps(self) -> "RunConfig":
        if self.delta_init > self.delta_max:
            raise ValueError(f"delta_init ({self.delta_init}) must not exceed delta_max ({self.delta_max})")
        return self

    def game_spec(self) -> GameSpec:
        if self.skp:
            return GameSpec(n_cards=self.n_cards, variant="skp", dominance_fixing=self.dominance_fixing)
        return GameSpec(n_cards=self.n_cards, dominance_fixing=self.dominance_fixing)

    def continuation_config(self, settings: Settings) -> ContinuationConfig:
        return ContinuationConfig(
            epsilon_target=self.epsilon,
            epsilon_start=max(ContinuationConfig.epsilon_start, self.epsilon),
            delta_init=self.delta_init,
            delta_max=self.delta_max,
            p_stop=self.pot_max,
            step_budget=self.step_budget or settings.step_budget,
            rng_seed=self.seed,
            ancestor_rule=self.ancestor_rule,
        )


def _positive_int(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"expected an integer >= 1, got {text}")
    return value


def _positive_float(text: str) -> float:
    value = float(text)
    if not value > 0.0:
        raise argparse.ArgumentTypeError(f"expected a positive number, got {text}")
    return value


def _add_trace_arguments(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--cards", type=int, default=None, help="deck size N (>= 4)")
    parser.add_argument("--pot-max", type=float, default=None, help="stop once P exceeds this value")
    parser.add_argument("--epsilon", type=float, default=None, help="regularization parameter")
    parser.add_argument("--seed", type=int, default=None, help="bootstrap seed")
    parser.add_argument("--skp", action="store_true", default=None, help="simplified four-card game")
    parser.add_argument("--delta-init", type=float, default=None)
    parser.add_argument("--delta-max", type=float, default=None)
    parser.add_argument("--no-ancestor-rule", dest="ancestor_rule", action="store_false", default=None)
    parser.add_argument("--no-dominance", dest="dominance_fixing", action="store_false", default=None)
    parser.add_argument("--step-budget", type=int, default=None)
    parser.add_argument("--config", type=Path, default=None, help="JSON file with RunConfig fields; flags win")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="kuhn3", description="Equilibrium branches of three-player Kuhn poker.")
    parser.add_argument(
        "--log-level",
        default=None,
        type=str.upper,
        choices=("DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL"),
        help="defaults to KUHN3_LOG_LEVEL",
    )
    commands = parser.add_subparsers(dest="command", required=True)

    trace = commands.add_parser("trace", help="trace a branch and write branch.csv")
    _add_trace_arguments(trace)
    trace.add_argument("--out", type=str, default=None, help="output directory")

    verify = commands.add_parser("verify", help="check every point of a branch file")
    verify.add_argument("--in", dest="input", type=Path, required=True)
    verify.add_argument("--epsilon", type=float, default=None, help="defaults to the value in the metadata")
    verify.add_argument("--tol-zero", type=float, default=None)
    verify.add_argument("--exploit-tol", type=float, default=None)
    verify.add_argument("--config", type=Path, default=None)

    verify_skp = commands.add_parser("verify-skp", help="compare a four-card branch with the closed forms")
    verify_skp.add_argument("--in", dest="input", type=Path, default=None, help="branch file; traces one when absent")
    verify_skp.add_argument("--skp-tol", type=float, default=None)
    _add_trace_arguments(verify_skp)
    verify_skp.add_argument("--out", type=str, default=None, help="also write the traced branch here")

    plot = commands.add_parser("plot", help="expectation curves as SVG")
    plot.add_argument("--in", dest="input", type=Path, required=True)
    plot.add_argument("--out", type=Path, required=True)
    plot.add_argument("--log-p", action="store_true")

    frames = commands.add_parser("frames", help="range frames as CSV files")
    frames.add_argument("--in", dest="input", type=Path, required=True)
    frames.add_argument("--out", type=Path, required=True)
    frames.add_argument("--stride", type=_positive_int, default=1)
    frames.add_argument("--arc-step", type=_positive_float, default=None)
    return parser


def load_run_config(args: argparse.Namespace) -> RunConfig:
    """File values first, then every flag that was given."""
    values: dict[str, Any] = {}
    config_path: Path | None = getattr(args, "config", None)
    if config_path is not None:
        values = RunConfig.model_validate_json(config_path.read_text(encoding="utf-8")).model_dump(exclude_unset=True)
    for dest, field_name in _FLAG_FIELDS.items():
        value = getattr(args, dest, None)
        if value is not None:
            values[field_name] = value
    return RunConfig.model_validate(values)


def _trace(run: RunConfig, settings: Settings, out_dir: Path | None) -> Branch:
    branch = trace_branch(run.game_spec(), run.continuation_config(settings))
    last = branch.points[-1]
    logger.info(
        "trace done points=%d termination=%s P_end=%.6f E=(%.6g, %.6g, %.6g)",
        len(branch),
        branch.termination,
        last.pot,
        *last.expectations,
    )
    if out_dir is not None:
        path = export_branch_csv(branch, out_dir / BRANCH_FILE)
        print(f"{path} points={len(branch)} termination={branch.termination} P_end={last.pot:.6f}")
    return branch


def _cmd_trace(args: argparse.Namespace, settings: Settings) -> int:
    run = load_run_config(args)
    out_dir = Path(run.out) if run.out else settings.output_dir
    _trace(run, settings, out_dir)
    return EXIT_OK


def _cmd_verify(args: argparse.Namespace, settings: Settings) -> int:
    run = load_run_config(args)
    branch = load_branch_csv(args.input)
    terms = build_terms(branch.game_spec)
    epsilon = args.epsilon if args.epsilon is not None else branch.epsilon

    failed = 0
    for step, point in enumerate(tqdm(branch.points, desc="verify", disable=not settings.show_progress)):
        x = embed_free(terms, point.x_free)
        report = verify_equilibrium(
            terms,
            x,
            point.pot,
            tol_zero=run.tol_zero,
            epsilon=epsilon,
            exploit_tol=run.exploit_tol,
            ancestor_rule=branch.config.ancestor_rule,
        )
        if not report.passed:
            failed += 1
        print(
            f"step={step} P={point.pot:.6f} status={'pass' if report.passed else 'FAIL'} "
            f"violations={len(report.violations)} max_violation={report.max_violation:.2e} "
            f"exploitability={float(report.exploitability.max()):.2e}"
        )
    print(f"checked={len(branch)} failed={failed}")
    logger.info("verified %s points=%d failed=%d", args.input, len(branch), failed)
    return EXIT_VERIFY_FAILED if failed else EXIT_OK


def _cmd_verify_skp(args: argparse.Namespace, settings: Settings) -> int:
    run = load_run_config(args)
    if args.input is not None:
        branch = load_branch_csv(args.input)
    else:
        if run.n_cards != SKP_CARDS:
            raise InvalidGameSpec(f"verify-skp traces the {SKP_CARDS}-card game, got --cards {run.n_cards}")
        run = run.model_copy(update={"skp": True})
        branch = _trace(run, settings, Path(run.out) if run.out else None)

    comparison = compare_embedding(branch, tolerance=run.skp_tolerance)
    for check in comparison.points:
        print(
            f"step={check.step} P={check.pot:.6f} status={'pass' if check.passed else 'FAIL'} "
            f"b3={check.b3_error:.2e} d2={check.d2_error:.2e} bounds={check.bound_excess:.2e} "
            f"limit={check.limit_error:.2e} zeros={check.zero_max:.2e}"
        )
    print(f"checked={comparison.n_checked} passed={comparison.passed}")
    if comparison.n_checked == 0:
        logger.warning("no branch point with 2 <= P <= 3 to compare")
    return EXIT_OK if comparison.passed else EXIT_VERIFY_FAILED


def _cmd_plot(args: argparse.Namespace, settings: Settings) -> int:
    emit_expectation_plot(load_branch_csv(args.input), args.out, log_p=args.log_p)
    return EXIT_OK


def _cmd_frames(args: argparse.Namespace, settings: Settings) -> int:
    written = emit_range_frames(
        load_branch_csv(args.input),
        args.out,
        stride=args.stride,
        arc_step=args.arc_step,
        show_progress=settings.show_progress,
    )
    print(f"{args.out} frames={len(written)}")
    return EXIT_OK


_COMMANDS = {
    "trace": _cmd_trace,
    "verify": _cmd_verify,
    "verify-skp": _cmd_verify_skp,
    "plot": _cmd_plot,
    "frames": _cmd_frames,
}


def run_cli(argv: Sequence[str] | None = None) -> int:
    settings = Settings.load()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    configure_logging(args.log_level or settings.log_level)

    try:
        return _COMMANDS[args.command](args, settings)
    except ValidationError as exc:
        print(f"invalid configuration:\n{exc}", file=sys.stderr)
        return EXIT_USAGE
    except InvalidGameSpec as exc:
        logger.error("%s", exc)
        return EXIT_USAGE
    except SolverError as exc:
        logger.error("solver failed: %s", exc)
        return EXIT_FAILURE
    except OSError as exc:
        logger.error("I/O failed: %s", exc)
        return EXIT_FAILURE
    except ValueError as exc:
        logger.error("%s failed: %s", args.command, exc)
        return EXIT_FAILURE
    except Exception:
        logger.exception("unexpected failure in %s", args.command)
        return EXIT_FAILURE
