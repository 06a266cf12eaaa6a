# Copyright 2025 Gowtham Rao <rao@ohdsi.org>
#
# Licensed under the Apache License, Version 2.0 (the "License");
# you may not use this file except in compliance with the License.
# You may obtain a copy of the License at
#
#     http://www.apache.org/licenses/LICENSE-2.0
#
# Unless required by applicable law or agreed to in writing, software
# distributed under the License is distributed on an "AS IS" BASIS,
# WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
# See the License for the specific language governing permissions and
# limitations under the License.
"""Command-line entry point: train, eval, attack-cache, report and selftest.

Exit status is 0 on success, 1 on a runtime failure and 2 on a usage error.
"""

import argparse
import logging
import sys
from pathlib import Path
from typing import Any

import torch
from pydantic import ValidationError

from .config import Settings
from .data import load_datasets, subset
from .exceptions import DDeRError

logger = logging.getLogger(__name__)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="Flat DDER_KEY=value config file.")
    common.add_argument("--seed", type=int, help="Override the configured seed.")
    common.add_argument("--out", type=Path, help="Run directory (checkpoints, results, reports).")
    common.add_argument("--mode", choices=["transfer", "adaptive"], help="Evaluation attack target.")
    common.add_argument("--variant", choices=["a", "b", "c", "d", "e"], help="Ablation variant, (e) being the full method.")
    common.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])

    parser = argparse.ArgumentParser(prog="py-dder", description="Continual adversarial training with dual-level defense routing.")
    commands = parser.add_subparsers(dest="command", required=True)
    commands.add_parser("train", parents=[common], help="Run every stage of the attack sequence.")
    commands.add_parser("eval", parents=[common], help="Evaluate stage checkpoints and compute forgetting.")
    commands.add_parser("attack-cache", parents=[common], help="Pre-generate cached stage datasets from saved checkpoints.")
    commands.add_parser("report", parents=[common], help="Re-emit report files from a saved matrix.")
    commands.add_parser("selftest", parents=[common], help="Run the in-process property checks.")
    return parser


def load_settings(args: argparse.Namespace) -> Settings:
    overrides: dict[str, Any] = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.out is not None:
        overrides["out_dir"] = args.out
    if args.mode is not None:
        overrides["eval_mode"] = args.mode
    if args.variant is not None:
        overrides["variant"] = args.variant
    return Settings.from_file(args.config, **overrides)


def _train(settings: Settings) -> int:
    from .pipeline import run_sequence

    _, results = run_sequence(settings, settings.out_dir)
    for result in results:
        print(f"stage {result.stage} ({result.attack}): final loss {result.train_loss[-1] if result.train_loss else float('nan'):.4f}")
    print(f"Checkpoints written to {settings.out_dir / 'checkpoints'}")
    return 0


def _eval(settings: Settings) -> int:
    from .harness.checkpoint import load_checkpoint, stage_checkpoint_path
    from .harness.evaluation import evaluate_matrix, forgetting_report
    from .harness.report import emit_report, parameter_summary, write_matrix_csv, write_matrix_json

    _, test = load_datasets(settings)
    stages = range(len(settings.attack_sequence))
    checkpoints = {stage: stage_checkpoint_path(settings.out_dir, stage) for stage in stages}
    matrix = evaluate_matrix(checkpoints, test, settings.attack_sequence, settings.eval_mode, device=settings.device)
    out = settings.out_dir / "report" / settings.eval_mode
    if len(matrix.rows) < 2:
        logger.warning("Fewer than two stages evaluated; writing the matrix without forgetting metrics")
        write_matrix_csv(matrix, out / "matrix.csv")
        write_matrix_json(matrix, out / "matrix.json")
        return 0
    report = forgetting_report(matrix)
    final = load_checkpoint(checkpoints[matrix.rows[-1]])
    embedding = None
    if settings.plots:
        images, labels = test.tensors
        with torch.no_grad():
            embedding = (final.backbone.encode(images[:1000]), labels[:1000])
    emit_report(matrix, report, out, summary=parameter_summary(final), plots=settings.plots, embedding=embedding)
    for label in matrix.columns:
        print(f"{label}: final {report.final_accuracy[label]:.4f}, forgetting {report.forgetting[label]:.4f}")
    print(f"Report written to {out}")
    return 0


def _attack_cache(settings: Settings) -> int:
    from .harness.checkpoint import load_checkpoint, stage_checkpoint_path
    from .pipeline import stage_dataset

    train, _ = load_datasets(settings)
    generated = 0
    for stage in range(1, len(settings.attack_sequence)):
        path = stage_checkpoint_path(settings.out_dir, stage - 1)
        if not path.exists():
            logger.warning("No checkpoint for stage %d; stage %d dataset not generated", stage - 1, stage)
            continue
        state = load_checkpoint(path)
        state.settings = settings
        stage_dataset(state, stage, subset(train, settings.stage_size(stage)))
        generated += 1
    print(f"Generated {generated} stage datasets in {settings.cache_dir}")
    return 0


def _report(settings: Settings) -> int:
    from .harness.evaluation import forgetting_report
    from .harness.report import emit_report, read_matrix_json

    out = settings.out_dir / "report" / settings.eval_mode
    matrix = read_matrix_json(out / "matrix.json")
    emit_report(matrix, forgetting_report(matrix), out, plots=settings.plots)
    print(f"Report re-emitted to {out}")
    return 0


def _selftest(settings: Settings) -> int:
    from .selftest import run_selftest

    results = run_selftest(settings.seed)
    for result in results:
        print(f"[{'PASS' if result.passed else 'FAIL'}] {result.name}: {result.detail}")
    return 0 if all(result.passed for result in results) else 1


COMMANDS = {
    "train": _train,
    "eval": _eval,
    "attack-cache": _attack_cache,
    "report": _report,
    "selftest": _selftest,
}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=args.log_level, format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        settings = load_settings(args)
        return COMMANDS[args.command](settings)
    except (DDeRError, ValidationError, OSError) as exc:
        logger.error("%s failed: %s", args.command, exc)
        return 1


if __name__ == "__main__":
    sys.exit(main())
