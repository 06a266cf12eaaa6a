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
"""Exception hierarchy for the package."""


class DDeRError(Exception):
    """Base class for every error raised by py_dder."""


class ConfigurationError(DDeRError):
    """An invalid combination of settings (e.g. top_k larger than n_experts)."""


class DataError(DDeRError):
    """A dataset violates the pixel-range or label-range contract."""


class ShapeError(DDeRError, ValueError):
    """A tensor does not have the geometry the model was built for."""


class StageOrderError(DDeRError):
    """A stage was run, registered or added out of sequence."""


class ProvenanceError(DDeRError):
    """A stage dataset was generated for a different attack spec."""


class StatsError(DDeRError):
    """Feature statistics were used before they were ready, or after finalize."""


class CoverageError(DDeRError):
    """Pseudo features do not cover every past stage."""


class AttackError(DDeRError):
    """An attack produced non-finite gradients or was misconfigured."""


class CheckpointError(DDeRError):
    """A checkpoint failed its digest or version checks."""


class CleanAccuracyError(DDeRError):
    """Clean pretraining finished below the configured accuracy floor."""


class StageFailedError(DDeRError):
    """A stage of the sequence failed; the last good checkpoint is retained."""

    def __init__(self, stage: int, last_checkpoint: str | None) -> None:
        """Record the failing stage and the last checkpoint that was written."""
        self.stage = stage
        self.last_checkpoint = last_checkpoint
        super().__init__(
            f"Stage {stage} failed; last good checkpoint: {last_checkpoint}",
        )
