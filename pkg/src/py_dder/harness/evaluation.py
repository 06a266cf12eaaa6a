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
"""Robustness matrix over (stage checkpoint, attack) pairs and the forgetting metrics derived from it."""

import logging
from collections.abc import Mapping, Sequence
from pathlib import Path
from typing import Literal

import torch
from torch.utils.data import DataLoader, TensorDataset

from ..attacks.gradient import build_attack
from ..exceptions import DataError
from ..models import AttackSpec, ForgettingReport, RobustnessMatrix
from ..pipeline import CATState, composite_classifier, infer
from .checkpoint import load_checkpoint

logger = logging.getLogger(__name__)

EvalMode = Literal["transfer", "adaptive"]


def unique_columns(specs: Sequence[AttackSpec]) -> list[AttackSpec]:
    """Specs in sequence order with repeated column labels dropped."""
    seen: set[str] = set()
    columns = []
    for spec in specs:
        if spec.label not in seen:
            seen.add(spec.label)
            columns.append(spec)
    return columns


def introducing_stages(specs: Sequence[AttackSpec]) -> dict[str, int]:
    """First sequence position of every column label."""
    first: dict[str, int] = {}
    for stage, spec in enumerate(specs):
        first.setdefault(spec.label, stage)
    return first


def _attacked_inputs(
    state: CATState,
    test_data: TensorDataset,
    spec: AttackSpec,
    mode: EvalMode,
    batch_size: int,
) -> torch.Tensor:
    target = state.backbone if mode == "transfer" else composite_classifier(state)
    attack = build_attack(spec)
    generator = torch.Generator().manual_seed(spec.seed)
    parts = []
    for images, labels in DataLoader(test_data, batch_size=batch_size, shuffle=False):
        images, labels = images.to(state.device), labels.to(state.device)
        parts.append(attack(target, images, labels, generator).cpu())
    return torch.cat(parts) if parts else test_data.tensors[0][:0]


@torch.no_grad()
def _correct(state: CATState, images: torch.Tensor, labels: torch.Tensor, batch_size: int) -> torch.Tensor:
    hits = []
    for start in range(0, images.shape[0], batch_size):
        batch = images[start : start + batch_size].to(state.device)
        hits.append(infer(state, batch).cpu() == labels[start : start + batch_size])
    return torch.cat(hits) if hits else torch.zeros(0, dtype=torch.bool)


def evaluate_state(
    state: CATState,
    test_data: TensorDataset,
    specs: Sequence[AttackSpec],
    mode: EvalMode = "transfer",
    batch_size: int = 256,
    cache: dict[str, torch.Tensor] | None = None,
) -> dict[str, torch.Tensor]:
    """Per-sample correctness of one state under each attack, routed by the sentinel.

    In transfer mode the attacks target the frozen backbone and head, which
    every stage shares, so `cache` may carry perturbed inputs across states.
    """
    labels = test_data.tensors[1]
    correctness = {}
    for spec in unique_columns(specs):
        key = f"{spec.label}@{state.backbone.param_hash()}"
        if mode == "transfer" and cache is not None and key in cache:
            adversarial = cache[key]
        else:
            adversarial = _attacked_inputs(state, test_data, spec, mode, batch_size)
            if mode == "transfer" and cache is not None:
                cache[key] = adversarial
        correctness[spec.label] = _correct(state, adversarial, labels, batch_size)
    return correctness


def evaluate_matrix(
    checkpoints: Mapping[int, str | Path | None],
    test_data: TensorDataset,
    specs: Sequence[AttackSpec],
    mode: EvalMode = "transfer",
    batch_size: int = 256,
    device: torch.device | str = "cpu",
) -> RobustnessMatrix:
    """Accuracy after each stage (rows) under each attack (columns).

    Missing checkpoints are skipped with a warning.
    """
    columns = unique_columns(specs)
    rows: list[int] = []
    values: list[list[float]] = []
    counts: list[list[int]] = []
    final_correct: dict[str, list[bool]] = {}
    cache: dict[str, torch.Tensor] = {}
    total = len(test_data)
    for stage in sorted(checkpoints):
        path = checkpoints[stage]
        if path is None or not Path(path).exists():
            logger.warning("No checkpoint for stage %d; row skipped", stage)
            continue
        state = load_checkpoint(path, device=device)
        correctness = evaluate_state(state, test_data, columns, mode, batch_size, cache)
        rows.append(stage)
        values.append([float(correctness[c.label].sum()) / max(total, 1) for c in columns])
        counts.append([total] * len(columns))
        final_correct = {label: hits.tolist() for label, hits in correctness.items()}
        logger.info("Stage %d row: %s", stage, ", ".join(f"{c.label}={v:.4f}" for c, v in zip(columns, values[-1], strict=True)))
    return RobustnessMatrix(
        rows=rows,
        columns=[c.label for c in columns],
        values=values,
        counts=counts,
        mode=mode,
        final_correct=final_correct,
        introduced=introducing_stages(specs),
    )


def union_accuracy(correct: Mapping[str, Sequence[bool]], columns: Sequence[str]) -> float:
    """Fraction of samples correct under every listed column at once."""
    if not columns:
        msg = "Union accuracy needs at least one column"
        raise DataError(msg)
    stacked = torch.tensor([list(correct[c]) for c in columns], dtype=torch.bool)
    if stacked.shape[1] == 0:
        return 0.0
    return float(stacked.all(dim=0).sum()) / stacked.shape[1]


def forgetting_report(matrix: RobustnessMatrix) -> ForgettingReport:
    """Final accuracy, forgetting and union accuracy per attack column.

    A column's forgetting is its best accuracy from the stage that
    introduced it onward minus its final accuracy. Union accuracy covers the
    non-clean columns.
    """
    if len(matrix.rows) < 2:
        msg = "Forgetting needs a matrix with at least two rows"
        raise DataError(msg)
    final_row = matrix.rows[-1]
    final = {label: matrix.values[-1][j] for j, label in enumerate(matrix.columns)}
    forgetting = {}
    for j, label in enumerate(matrix.columns):
        start = matrix.introduced_at(label)
        history = [row[j] for stage, row in zip(matrix.rows, matrix.values, strict=True) if stage >= start]
        forgetting[label] = max(history, default=final[label]) - final[label]
    past = [label for label in matrix.columns if matrix.introduced_at(label) < final_row]
    union_columns = [label for label in matrix.columns if label != "clean" and label in matrix.final_correct]
    union = union_accuracy(matrix.final_correct, union_columns) if union_columns else None
    return ForgettingReport(
        final_accuracy=final,
        forgetting=forgetting,
        average_accuracy=sum(final.values()) / len(final),
        average_forgetting=sum(forgetting[label] for label in past) / len(past) if past else 0.0,
        union_accuracy=union,
        union_columns=union_columns,
        mode=matrix.mode,
    )


def past_attack_accuracy(matrix: RobustnessMatrix) -> float:
    """Mean final accuracy over the attack columns introduced before the last stage."""
    final_row = matrix.rows[-1]
    past = [
        matrix.values[-1][j]
        for j, label in enumerate(matrix.columns)
        if label != "clean" and matrix.introduced_at(label) < final_row
    ]
    return sum(past) / len(past) if past else 0.0
