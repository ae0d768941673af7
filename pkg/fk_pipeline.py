"""
Feynman-Kac Laboratory Pipeline
Runs one experiment (or the acceptance suite) from a key=value config,
writes results.csv + metadata.json, and optionally an Excel workbook
"""
import logging
import sys
import argparse
from pathlib import Path
from typing import List, Optional

# Load environment variables from .env file
from dotenv import load_dotenv
load_dotenv()

# Add parent to path for imports
sys.path.insert(0, str(Path(__file__).parent))

from fklab import settings
from fklab.acceptance import AcceptanceReport
from fklab.config import EXPERIMENTS, TIERS, ExperimentConfig, apply_overrides, load_config
from fklab.errors import FKLabError
from fklab.experiments import run_experiment
from fklab.records import RunRecord
from fklab.report import RunWorkbook

EXIT_OK = 0
EXIT_INVALID = 1
EXIT_ACCEPTANCE_FAILED = 2

SUBCOMMANDS = [e for e in EXPERIMENTS if e != "acceptance"] + ["accept"]


class FKPipeline:
    """
    One experiment run end to end

    Workflow:
    1. Resolve the config (file, then flags, then --set overrides)
    2. Run the experiment and write its RunRecord
    3. Optionally export an Excel workbook
    """

    def __init__(self, config: ExperimentConfig, xlsx_path: Optional[str] = None):
        self.config = config
        self.xlsx_path = xlsx_path
        self.record: Optional[RunRecord] = None

    def execute(self) -> RunRecord:
        print("\n" + "=" * 60)
        print(f"STEP 1: {self.config.experiment.upper()}")
        print("=" * 60)

        self.record = run_experiment(self.config)

        print("\nRun Summary:")
        print(f"  Rows:        {len(self.record.results)}")
        print(f"  Wall time:   {self.record.wall_time:.1f} s")
        for key, value in self.record.summary.items():
            if key != "items":
                print(f"  {key}: {value}")
        for name, path in self.record.files.items():
            print(f"  {name}: {path}")
        return self.record

    def generate_excel(self) -> Optional[str]:
        print("\n" + "=" * 60)
        print("STEP 2: EXCEL GENERATION")
        print("=" * 60)

        if self.record is None:
            print("No run record. Run execute() first.")
            return None

        workbook = RunWorkbook(title=f"Feynman-Kac run: {self.config.experiment}")
        if self.config.experiment == "acceptance":
            workbook.add_acceptance(AcceptanceReport.from_dict(self.record.summary))
        else:
            workbook.add_run(self.record)
        output = workbook.save(self.xlsx_path)
        print(f"  Workbook saved to: {output}")
        return output

    def acceptance_failures(self) -> List[str]:
        if self.record is None or self.config.experiment != "acceptance":
            return []
        return list(self.record.summary.get("failed", []))

    def geometry_problems(self) -> List[str]:
        if self.record is None or self.config.experiment != "geometry":
            return []
        return list(self.record.summary.get("problems", []))

    def run(self) -> RunRecord:
        print("=" * 60)
        print("FEYNMAN-KAC LABORATORY")
        print("=" * 60)
        print(f"Experiment:   {self.config.experiment}")
        print(f"Boundary:     {self.config.boundary_file or self.config.kind}")
        print(f"Seed:         {self.config.seed}")
        print(f"Workers:      {self.config.workers}")
        print(f"Output:       {self.config.output}")

        record = self.execute()
        if self.xlsx_path:
            self.generate_excel()

        print("\n" + "=" * 60)
        print("✓ RUN COMPLETE!")
        print("=" * 60)
        return record


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        description="Monte Carlo experiments on Feynman-Kac kernels across fractal boundaries"
    )
    subparsers = parser.add_subparsers(dest="command", required=True)
    for name in SUBCOMMANDS:
        sub = subparsers.add_parser(name, help=f"run the {name} experiment")
        sub.add_argument("--config", "-c", default=None, help="key=value config file")
        sub.add_argument("--seed", "-s", type=int, default=None, help="master seed")
        sub.add_argument("--out", "-o", default=None, help="output directory")
        sub.add_argument("--workers", "-w", type=int, default=None,
                         help="worker processes (or set FKLAB_WORKERS)")
        sub.add_argument("--set", dest="overrides", action="append", default=[],
                         metavar="KEY=VALUE", help="override one config key (repeatable)")
        sub.add_argument("--xlsx", "-x", default=None, help="also write an Excel workbook")
        sub.add_argument("--dump-paths", type=int, default=None,
                         help="write this many sample paths as CSV for debugging")
        if name == "accept":
            sub.add_argument("--tier", "-t", choices=TIERS, default="fast",
                             help="acceptance tier")
        if name == "geometry":
            sub.add_argument("--verify", default=None, metavar="CSV",
                             help="re-import a boundary CSV and check its invariants")
    return parser


def resolve_config(args: argparse.Namespace) -> ExperimentConfig:
    """Defaults, then the config file, then flags, then --set overrides."""
    base = load_config(args.config) if args.config else ExperimentConfig()
    experiment = "acceptance" if args.command == "accept" else args.command
    flags = [f"experiment={experiment}"]
    if args.seed is not None:
        flags.append(f"seed={args.seed}")
    if args.out is not None:
        flags.append(f"output={args.out}")
    if args.workers is not None:
        flags.append(f"workers={args.workers}")
    if args.dump_paths is not None:
        flags.append(f"dump_paths={args.dump_paths}")
    if getattr(args, "tier", None):
        flags.append(f"tier={args.tier}")
    if getattr(args, "verify", None):
        flags += ["geometry_mode=verify", f"boundary_file={args.verify}"]
    return apply_overrides(base, flags + list(args.overrides))


def main(argv: Optional[List[str]] = None) -> int:
    """CLI interface for the pipeline"""
    logging.basicConfig(level=settings.LOG_LEVEL, format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)

    try:
        pipeline = FKPipeline(resolve_config(args), xlsx_path=args.xlsx)
        pipeline.run()
    except FKLabError as e:
        print(f"\n❌ Error: {e}")
        return EXIT_INVALID

    problems = pipeline.geometry_problems()
    if problems:
        print("\n❌ Boundary verification failed:")
        for problem in problems:
            print(f"  - {problem}")
        return EXIT_INVALID

    failed = pipeline.acceptance_failures()
    if failed:
        print(f"\n❌ {len(failed)} acceptance item(s) failed: {', '.join(failed)}")
        return EXIT_ACCEPTANCE_FAILED
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
