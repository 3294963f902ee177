"""Command-line entry point for the CroPA workbench."""
import argparse
import logging
import sys
from pathlib import Path
from typing import List, Optional

from pydantic import ValidationError

from config import settings
from src.exceptions import WorkbenchError
from src.experiment_runner import ExperimentRunner, apply_overrides, load_manifest, render_reports
from src.models import AttackMethod, AttackMode, ProjectionMethod, SweepAxis
from src.run_store import RunStore

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3
EXIT_IO = 4

# Verbs that accept the attack-grid overrides
GRID_VERBS = ("attack", "eval", "sweep")


def setup_logging(level: Optional[str] = None) -> None:
    settings.ensure_directories()
    logging.basicConfig(
        level=level or settings.log_level,
        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s',
        handlers=[
            logging.FileHandler(settings.log_file),
            logging.StreamHandler()
        ]
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cropa",
        description="Cross-prompt adversarial attack workbench"
    )
    parser.add_argument("--store", type=Path, default=None, help="store root (default: CROPA_STORE_ROOT)")
    parser.add_argument("--log-level", default=None)
    parser.add_argument("--workers", type=int, default=None)
    parser.add_argument("--no-progress", action="store_true")
    verbs = parser.add_subparsers(dest="verb", required=True)

    # Attack-grid overrides shared by attack, eval and sweep
    grid = argparse.ArgumentParser(add_help=False)
    grid.add_argument("--methods", nargs="+", choices=[m.value for m in AttackMethod])
    grid.add_argument("--seeds", nargs="+", type=int)
    grid.add_argument("--epsilon", help="accepts fractions such as 16/255")
    grid.add_argument("--alpha1")
    grid.add_argument("--alpha2")
    grid.add_argument("--iterations", type=int)
    grid.add_argument("--update-interval", type=int)
    grid.add_argument("--num-prompts", type=int)
    grid.add_argument("--target-text")
    grid.add_argument("--mode", choices=[m.value for m in AttackMode])
    grid.add_argument("--shots-at-train", type=int)

    attack = verbs.add_parser("attack", parents=[grid], help="run the attack grid of a manifest")
    attack.add_argument("--manifest", type=Path, required=True)

    evaluate = verbs.add_parser("eval", parents=[grid], help="evaluate stored runs")
    evaluate.add_argument("--manifest", type=Path, required=True)
    evaluate.add_argument("--runs", nargs="+", help="run ids (default: every run of the manifest)")
    evaluate.add_argument("--clean", action="store_true", help="evaluate the clean images instead of runs")

    sweep = verbs.add_parser("sweep", parents=[grid], help="run the grid along one hyperparameter axis")
    sweep.add_argument("--manifest", type=Path, required=True)
    sweep.add_argument("--axis", required=True, choices=[a.value for a in SweepAxis])
    sweep.add_argument("--values", nargs="+", help="axis values (default: the manifest's)")

    analyze = verbs.add_parser("analyze", help="embedding coverage, decoding and trace artifacts")
    analyze.add_argument("--manifest", type=Path, required=True)
    analyze.add_argument("--run", required=True)
    analyze.add_argument("--what", nargs="+", default=["projection", "decoding", "trace"],
                         choices=["projection", "decoding", "trace"])
    analyze.add_argument("--projection", default=ProjectionMethod.PCA.value,
                         choices=[p.value for p in ProjectionMethod])
    analyze.add_argument("--out", type=Path)

    report = verbs.add_parser("report", help="render stored reports as a table")
    report.add_argument("files", nargs="*", type=Path)
    report.add_argument("--out", type=Path)
    report.add_argument("--verify", action="store_true", help="drop dangling run-index entries first")
    return parser


def _runner(args, store: RunStore):
    manifest = load_manifest(args.manifest)
    if args.verb in GRID_VERBS:
        manifest = apply_overrides(manifest, {
            "methods": args.methods,
            "seeds": args.seeds,
            "epsilon": args.epsilon,
            "alpha1": args.alpha1,
            "alpha2": args.alpha2,
            "iterations": args.iterations,
            "update_interval": args.update_interval,
            "num_prompts": args.num_prompts,
            "target_text": args.target_text,
            "mode": args.mode,
            "shots_at_train": args.shots_at_train,
        })
    return ExperimentRunner(
        manifest, store=store, workers=args.workers, progress=not args.no_progress and settings.show_progress
    )


def run_cli(args: argparse.Namespace) -> int:
    store = RunStore(args.store)

    if args.verb == "report":
        if args.verify:
            print(f"Removed {store.verify()} dangling index entries")
        files = args.files or sorted(store.reports_dir.glob("*.json"))
        if not files:
            return EXIT_OK
        table = render_reports(files)
        print(table.to_string())
        if args.out:
            table.to_csv(args.out)
        return EXIT_OK

    runner = _runner(args, store)
    if args.verb == "attack":
        run_ids = runner.cmd_attack()
        print(runner.attack_summary(run_ids).to_string(index=False))
    elif args.verb == "eval":
        if args.clean:
            outcome = runner.cmd_eval(None)
        else:
            run_ids = args.runs or [r.run_id for r in store.list_runs(runner.digest)]
            if not run_ids:
                print("No runs to evaluate", file=sys.stderr)
                return EXIT_RUNTIME
            outcome = runner.cmd_eval(run_ids)
        if outcome.table is not None:
            print(outcome.table.to_string())
    elif args.verb == "sweep":
        result, paths = runner.cmd_sweep(SweepAxis(args.axis), args.values)
        print(f"{len(result.cells)} sweep cells written to {paths[0].parent}")
    elif args.verb == "analyze":
        paths = runner.cmd_analyze(
            args.run, args.what, args.out, ProjectionMethod(args.projection)
        )
        for name, path in sorted(paths.items()):
            print(f"{name}: {path}")
    return EXIT_OK


def main(argv: Optional[List[str]] = None) -> int:
    """Run the CLI and map failures to exit codes."""
    args = build_parser().parse_args(argv)
    setup_logging(args.log_level)

    try:
        return run_cli(args)
    except WorkbenchError as e:
        logger.error(str(e))
        return e.exit_code
    except ValidationError as e:
        logger.error(f"Invalid configuration: {e}")
        return EXIT_CONFIG
    except OSError as e:
        logger.error(f"I/O error: {e}", exc_info=True)
        return EXIT_IO
    except Exception as e:
        logger.error(f"Unexpected error: {e}", exc_info=True)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
