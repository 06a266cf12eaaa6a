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
"""Report files: matrix CSV, metrics JSON, parameter summary, optional heatmap and embedding dump."""

import csv
import io
import logging
from collections.abc import Callable
from pathlib import Path

import numpy as np
import torch

from ..models import ForgettingReport, ParameterSummary, RobustnessMatrix
from ..pipeline import CATState
from ..utils import AtomicWriter

logger = logging.getLogger(__name__)

MATRIX_CSV = "matrix.csv"
MATRIX_JSON = "matrix.json"
METRICS_JSON = "metrics.json"
PARAMETERS_JSON = "parameters.json"
HEATMAP_PNG = "heatmap.png"
EMBEDDING_CSV = "embedding.csv"

# features (N, d) -> coordinates (N, 2)
Projection = Callable[[np.ndarray], np.ndarray]


def write_matrix_csv(matrix: RobustnessMatrix, path: str | Path) -> Path:
    """One header row (`stage` plus column labels) and one row per stage."""
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(["stage", *matrix.columns])
    for stage, row in zip(matrix.rows, matrix.values, strict=True):
        writer.writerow([stage, *(repr(value) for value in row)])
    with AtomicWriter(path, "w") as handle:
        handle.write(buffer.getvalue())
    return Path(path)


def read_matrix_csv(path: str | Path) -> tuple[list[int], list[str], list[list[float]]]:
    with Path(path).open(newline="") as handle:
        reader = csv.reader(handle)
        header = next(reader)
        rows, values = [], []
        for record in reader:
            rows.append(int(record[0]))
            values.append([float(value) for value in record[1:]])
    return rows, header[1:], values


def write_metrics(report: ForgettingReport, path: str | Path) -> Path:
    with AtomicWriter(path, "w") as handle:
        handle.write(report.model_dump_json(indent=2))
    return Path(path)


def read_metrics(path: str | Path) -> ForgettingReport:
    return ForgettingReport.model_validate_json(Path(path).read_text())


def write_matrix_json(matrix: RobustnessMatrix, path: str | Path) -> Path:
    with AtomicWriter(path, "w") as handle:
        handle.write(matrix.model_dump_json())
    return Path(path)


def read_matrix_json(path: str | Path) -> RobustnessMatrix:
    return RobustnessMatrix.model_validate_json(Path(path).read_text())


def parameter_summary(state: CATState) -> ParameterSummary:
    """Learnable and stored scalar counts of a state."""
    settings = state.settings
    model = state.model
    experts = model.bank.factor_count()
    routers = sum(tensor.numel() for stage in model.routers.stages for _, tensor in model.routers.named_stage_tensors(stage))
    asn_context = sum(p.numel() for p in state.prompts.ctx.values())
    asn_type = sum(p.numel() for p in state.prompts.types.values())
    pst_scalars = sum(t.numel() for stats in state.stats.values() for t in stats.state().values())
    snapshot_scalars = sum(
        t.numel() for snapshot in state.snapshots.values() for name, t in snapshot.named_tensors() if not name.endswith("indices")
    )
    learnable = experts + routers + asn_context + (asn_type if settings.asn_learnable_type else 0)
    stored = experts + routers + asn_context + asn_type + pst_scalars + snapshot_scalars
    return ParameterSummary(
        stages=state.stages_done,
        insertion_points=len(model.bank.points),
        experts=experts,
        routers=routers,
        asn_context=asn_context,
        asn_type=asn_type,
        pst_scalars=pst_scalars,
        snapshot_scalars=snapshot_scalars,
        backbone_frozen=sum(p.numel() for p in state.backbone.parameters()),
        learnable_total=learnable,
        stored_total=stored,
        bytes_float32=4 * stored,
    )


def write_parameters(summary: ParameterSummary, path: str | Path) -> Path:
    with AtomicWriter(path, "w") as handle:
        handle.write(summary.model_dump_json(indent=2))
    return Path(path)


def pca_projection(features: np.ndarray) -> np.ndarray:
    """Project onto the two leading principal components."""
    centered = features - features.mean(axis=0, keepdims=True)
    if centered.shape[0] < 2:
        return np.zeros((centered.shape[0], 2))
    _, _, vt = np.linalg.svd(centered, full_matrices=False)
    coords = centered @ vt[:2].T
    if coords.shape[1] < 2:
        coords = np.pad(coords, ((0, 0), (0, 2 - coords.shape[1])))
    return coords


def dump_embedding(
    features: torch.Tensor,
    labels: torch.Tensor,
    path: str | Path,
    projection: Projection = pca_projection,
) -> Path:
    """Write 2-d coordinates of features with their labels as `x,y,label` rows."""
    coords = projection(features.detach().cpu().double().numpy())
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(["x", "y", "label"])
    for (x, y), label in zip(coords.tolist(), labels.tolist(), strict=True):
        writer.writerow([repr(float(x)), repr(float(y)), int(label)])
    with AtomicWriter(path, "w") as handle:
        handle.write(buffer.getvalue())
    return Path(path)


def plot_heatmap(matrix: RobustnessMatrix, path: str | Path) -> Path:
    """Stage-by-attack accuracy heatmap; needs the `plot` extra."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    values = np.array(matrix.values, dtype=float)
    fig, ax = plt.subplots(figsize=(1.2 * len(matrix.columns) + 2, 0.8 * len(matrix.rows) + 1.5))
    image = ax.imshow(values, vmin=0.0, vmax=1.0, cmap="viridis", aspect="auto")
    ax.set_xticks(range(len(matrix.columns)), labels=matrix.columns)
    ax.set_yticks(range(len(matrix.rows)), labels=[f"stage {r}" for r in matrix.rows])
    for i in range(values.shape[0]):
        for j in range(values.shape[1]):
            ax.text(j, i, f"{values[i, j]:.2f}", ha="center", va="center", color="w" if values[i, j] < 0.5 else "k")
    ax.set_title(f"Robust accuracy ({matrix.mode})")
    fig.colorbar(image, ax=ax)
    fig.tight_layout()
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)


def emit_report(
    matrix: RobustnessMatrix,
    report: ForgettingReport,
    out_dir: str | Path,
    summary: ParameterSummary | None = None,
    plots: bool = False,
    embedding: tuple[torch.Tensor, torch.Tensor] | None = None,
    projection: Projection = pca_projection,
) -> list[Path]:
    """Write every report file into `out_dir` and return their paths."""
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        logger.error("Cannot create report directory %s: %s", out, exc)
        raise
    written = [
        write_matrix_csv(matrix, out / MATRIX_CSV),
        write_matrix_json(matrix, out / MATRIX_JSON),
        write_metrics(report, out / METRICS_JSON),
    ]
    if summary is not None:
        written.append(write_parameters(summary, out / PARAMETERS_JSON))
    if embedding is not None:
        written.append(dump_embedding(*embedding, out / EMBEDDING_CSV, projection=projection))
    if plots:
        try:
            written.append(plot_heatmap(matrix, out / HEATMAP_PNG))
        except ImportError:
            logger.warning("matplotlib is not installed; heatmap skipped (install the 'plot' extra)")
    logger.info("Wrote %d report files to %s", len(written), out)
    return written
