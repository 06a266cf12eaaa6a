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
"""Defines the Pydantic data models for the application."""

from datetime import datetime
from typing import Any, Literal

from pydantic import BaseModel, ConfigDict, Field, model_validator

AttackName = Literal["clean", "fgsm", "bim", "pgd"]
Norm = Literal["linf", "l2"]
TensorDType = Literal["float32", "float64", "int64"]


class AttackSpec(BaseModel):
    """One stage of the attack sequence.

    For `clean` every perturbation field is ignored. FGSM is a single step of
    size `epsilon`; BIM and PGD iterate `steps` times with step size `alpha`.
    """

    model_config = ConfigDict(frozen=True)

    name: AttackName
    norm: Norm = "linf"
    epsilon: float = Field(default=0.0, ge=0.0)
    alpha: float = Field(default=0.0, ge=0.0)
    steps: int = Field(default=1, ge=0)
    random_start: bool = False
    seed: int = 0

    @model_validator(mode="after")
    def _check_budget(self) -> "AttackSpec":
        if self.name == "clean":
            return self
        if self.norm == "linf" and self.epsilon > 1.0:
            msg = f"L-inf budget must lie in [0, 1], got {self.epsilon}"
            raise ValueError(msg)
        if self.name in ("bim", "pgd"):
            if self.steps < 1:
                msg = f"{self.name} needs at least one step"
                raise ValueError(msg)
            if self.alpha <= 0.0:
                msg = f"{self.name} needs a positive step size"
                raise ValueError(msg)
        return self

    @property
    def label(self) -> str:
        """Column label used in matrices and reports, e.g. `pgd:linf`."""
        if self.name == "clean":
            return "clean"
        return f"{self.name}:{self.norm}"


class Provenance(BaseModel):
    """Where a cached adversarial dataset came from."""

    spec: AttackSpec
    stage: int
    model_digest: str
    seed: int
    num_samples: int
    image_shape: list[int]
    blob_sha256: str
    created_at_utc: datetime


class StageResult(BaseModel):
    """Summary of one completed stage of continual adversarial training."""

    stage: int
    attack: str
    variant: str
    train_loss: list[float] = Field(default_factory=list)
    asn_loss: list[float] = Field(default_factory=list)
    clean_accuracy: float | None = None
    stats_id: str | None = None
    snapshot_id: str | None = None
    router_id: str | None = None
    fused: bool = False
    wall_time: float = 0.0
    param_delta: int = 0


class TensorEntry(BaseModel):
    """Location of one named tensor inside a checkpoint blob."""

    name: str
    shape: list[int]
    dtype: TensorDType
    offset: int = Field(ge=0)
    length: int = Field(ge=0)


class CheckpointManifest(BaseModel):
    """Header of a checkpoint file: tensor table, digest and config echo."""

    format_version: int
    tensors: list[TensorEntry]
    digest: str
    config: dict[str, Any]
    seeds: dict[str, int]
    metadata: dict[str, Any] = Field(default_factory=dict)

    @model_validator(mode="after")
    def _check_table(self) -> "CheckpointManifest":
        names = [entry.name for entry in self.tensors]
        if len(set(names)) != len(names):
            msg = "Duplicate tensor names in checkpoint manifest"
            raise ValueError(msg)
        end = 0
        for entry in sorted(self.tensors, key=lambda e: e.offset):
            if entry.offset < end:
                msg = f"Tensor {entry.name} overlaps its predecessor"
                raise ValueError(msg)
            end = entry.offset + entry.length
        return self


class RobustnessMatrix(BaseModel):
    """Accuracy of the model after each stage (rows) under each attack (columns)."""

    rows: list[int]
    columns: list[str]
    values: list[list[float]]
    counts: list[list[int]]
    mode: str = "transfer"
    # Per-sample correctness of the last row, keyed by column. Feeds union accuracy.
    final_correct: dict[str, list[bool]] = Field(default_factory=dict)
    # Stage that first trained against each column. Missing labels fall back to the column index.
    introduced: dict[str, int] = Field(default_factory=dict)

    @model_validator(mode="after")
    def _check_grid(self) -> "RobustnessMatrix":
        if len(self.values) != len(self.rows) or len(self.counts) != len(self.rows):
            msg = "Matrix needs one value row and one count row per stage"
            raise ValueError(msg)
        for row, count_row in zip(self.values, self.counts, strict=True):
            if len(row) != len(self.columns) or len(count_row) != len(self.columns):
                msg = "Matrix rows must match the column count"
                raise ValueError(msg)
            if any(not 0.0 <= value <= 1.0 for value in row):
                msg = "Accuracies must lie in [0, 1]"
                raise ValueError(msg)
        if not set(self.introduced) <= set(self.columns):
            msg = "Introducing stages must refer to matrix columns"
            raise ValueError(msg)
        return self

    def column(self, label: str) -> list[float]:
        """Return the accuracy history of one attack column."""
        index = self.columns.index(label)
        return [row[index] for row in self.values]

    def introduced_at(self, label: str) -> int:
        """Stage whose training first targeted the column `label`."""
        return self.introduced.get(label, self.columns.index(label))


class ForgettingReport(BaseModel):
    """Continual-learning summary derived from a robustness matrix."""

    final_accuracy: dict[str, float]
    forgetting: dict[str, float]
    average_accuracy: float
    average_forgetting: float
    union_accuracy: float | None = None
    union_columns: list[str] = Field(default_factory=list)
    mode: str = "transfer"

    @model_validator(mode="after")
    def _check_bounds(self) -> "ForgettingReport":
        if any(value < -1e-9 for value in self.forgetting.values()):
            msg = "Forgetting is measured against a history that includes the final row"
            raise ValueError(msg)
        if self.union_accuracy is not None and self.union_columns:
            floor = min(self.final_accuracy[c] for c in self.union_columns)
            if self.union_accuracy > floor + 1e-12:
                msg = "Union accuracy cannot exceed any per-attack accuracy"
                raise ValueError(msg)
        return self


class ParameterSummary(BaseModel):
    """Learnable-parameter and storage counts of a trained state."""

    stages: int
    insertion_points: int
    experts: int
    routers: int
    asn_context: int
    asn_type: int
    pst_scalars: int
    snapshot_scalars: int
    backbone_frozen: int
    learnable_total: int
    stored_total: int
    bytes_float32: int


class CheckResult(BaseModel):
    """Outcome of one self-test property check."""

    name: str
    passed: bool
    detail: str = ""
