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
"""Per-stage feature statistics and Gaussian pseudo-feature sampling.

Only a mean and a (co)variance per stage are kept; features of past stages
are resampled as `mean + L @ z` with `L` the Cholesky factor of the
covariance and `z` standard normal.
"""

import logging
from collections.abc import Mapping
from typing import Literal, NamedTuple

import torch

from .exceptions import CoverageError, ShapeError, StatsError

logger = logging.getLogger(__name__)

StatsMode = Literal["diagonal", "full"]

JITTER = 1e-6
MAX_DOUBLINGS = 6


class PseudoBatch(NamedTuple):
    """Sampled features (N, d) and the stage label of each row (N,)."""

    features: torch.Tensor
    labels: torch.Tensor


class TaskFeatureStats:
    """Streaming mean and population (co)variance of one stage's features.

    Moments are kept in float64. The default update is exact (Chan/Welford
    batch merge); with `ema=True` the mean and the squared deviation from it
    are exponential moving averages with `momentum`.
    """

    def __init__(self, stage: int, dim: int, mode: StatsMode = "diagonal", ema: bool = False, momentum: float = 0.9) -> None:
        if mode not in ("diagonal", "full"):
            msg = f"Unknown statistics mode {mode!r}"
            raise StatsError(msg)
        self.stage = stage
        self.dim = dim
        self.mode = mode
        self.ema = ema
        self.momentum = momentum
        self.count = 0
        self.mean = torch.zeros(dim, dtype=torch.float64)
        # Sum of squared deviations (exact mode) or the running second moment (EMA mode).
        shape = (dim,) if mode == "diagonal" else (dim, dim)
        self._m2 = torch.zeros(shape, dtype=torch.float64)
        self.finalized = False
        self.factor: torch.Tensor | None = None
        self._final_var: torch.Tensor | None = None

    @property
    def var(self) -> torch.Tensor:
        """Population variance (diagonal mode) or covariance matrix (full mode)."""
        if self._final_var is not None:
            return self._final_var
        if self.ema:
            return self._m2.clone()
        return self._m2 / max(self.count, 1)

    def update(self, features: torch.Tensor) -> "TaskFeatureStats":
        if self.finalized:
            msg = f"Statistics of stage {self.stage} are finalized"
            raise StatsError(msg)
        features = features.detach().to("cpu", torch.float64).reshape(-1, features.shape[-1])
        if features.shape[-1] != self.dim:
            msg = f"Expected features of dimension {self.dim}, got {features.shape[-1]}"
            raise ShapeError(msg)
        batch = features.shape[0]
        if batch == 0:
            return self
        batch_mean = features.mean(dim=0)
        if self.ema:
            self._update_ema(features, batch_mean)
            self.count += batch
            return self
        centered = features - batch_mean
        if self.mode == "diagonal":
            batch_m2 = (centered * centered).sum(dim=0)
        else:
            batch_m2 = centered.T @ centered
        total = self.count + batch
        delta = batch_mean - self.mean
        self.mean = self.mean + delta * (batch / total)
        correction = self.count * batch / total
        if self.mode == "diagonal":
            self._m2 = self._m2 + batch_m2 + delta * delta * correction
        else:
            self._m2 = self._m2 + batch_m2 + torch.outer(delta, delta) * correction
        self.count = total
        return self

    def _update_ema(self, features: torch.Tensor, batch_mean: torch.Tensor) -> None:
        if self.count == 0:
            self.mean = batch_mean
        else:
            self.mean = self.momentum * self.mean + (1 - self.momentum) * batch_mean
        deviation = features - self.mean
        if self.mode == "diagonal":
            batch_m2 = (deviation * deviation).mean(dim=0)
        else:
            batch_m2 = deviation.T @ deviation / features.shape[0]
        if self.count == 0:
            self._m2 = batch_m2
        else:
            self._m2 = self.momentum * self._m2 + (1 - self.momentum) * batch_m2

    def state(self) -> dict[str, torch.Tensor]:
        """Tensors persisted for this stage; nothing here grows with the sample count."""
        key = "var" if self.mode == "diagonal" else "cov"
        return {f"pst.{self.stage}.mean": self.mean, f"pst.{self.stage}.{key}": self.var}

    def metadata(self) -> dict[str, object]:
        return {"count": self.count, "mode": self.mode, "ema": self.ema, "finalized": self.finalized}

    @classmethod
    def restore(cls, stage: int, mean: torch.Tensor, var: torch.Tensor, metadata: Mapping[str, object]) -> "TaskFeatureStats":
        """Rebuild a record from its persisted tensors and metadata."""
        mode = str(metadata["mode"])
        stats = cls(stage, mean.shape[0], mode=mode, ema=bool(metadata.get("ema", False)))  # type: ignore[arg-type]
        stats.mean = mean.to(torch.float64).clone()
        stats.count = int(metadata["count"])  # type: ignore[call-overload]
        var = var.to(torch.float64).clone()
        stats._m2 = var.clone() if stats.ema else var * stats.count
        if metadata.get("finalized"):
            stats._final_var = var
            finalize(stats)
        return stats


def update_stats(stats: TaskFeatureStats, features: torch.Tensor) -> TaskFeatureStats:
    return stats.update(features)


def finalize(stats: TaskFeatureStats) -> TaskFeatureStats:
    """Freeze a record and compute its sampling factor.

    Diagonal mode takes the elementwise square root of the variance. Full mode
    tries a plain Cholesky factorization, then adds a diagonal jitter of 1e-6,
    doubling it up to six times.
    """
    needed = 2 if stats.mode == "diagonal" else stats.dim + 1
    if stats.count < needed:
        msg = f"Stage {stats.stage} has {stats.count} observations; {needed} are needed to finalize"
        raise StatsError(msg)
    stats._final_var = stats.var.clone()
    if stats.mode == "diagonal":
        stats.factor = stats.var.clamp_min(0.0).sqrt()
    else:
        stats.factor = _jittered_cholesky(stats.var, stats.stage)
    stats.finalized = True
    return stats


def _jittered_cholesky(cov: torch.Tensor, stage: int) -> torch.Tensor:
    cov = 0.5 * (cov + cov.T)
    factor, info = torch.linalg.cholesky_ex(cov)
    if int(info) == 0:
        return factor
    eye = torch.eye(cov.shape[0], dtype=cov.dtype)
    jitter = JITTER
    for _ in range(MAX_DOUBLINGS + 1):
        factor, info = torch.linalg.cholesky_ex(cov + jitter * eye)
        if int(info) == 0:
            logger.warning("Stage %d covariance needed a jitter of %.1e", stage, jitter)
            return factor
        jitter *= 2
    msg = f"Covariance of stage {stage} is not positive definite even with jitter {jitter / 2:.1e}"
    raise StatsError(msg)


def sample_features(
    stats: TaskFeatureStats,
    count: int,
    generator: torch.Generator | None = None,
    z: torch.Tensor | None = None,
) -> PseudoBatch:
    """Draw `count` pseudo features of a finalized stage; `z` overrides the normal draws."""
    if not stats.finalized or stats.factor is None:
        msg = f"Statistics of stage {stats.stage} must be finalized before sampling"
        raise StatsError(msg)
    if z is None:
        z = torch.randn(count, stats.dim, generator=generator, dtype=torch.float64)
    z = z.to(torch.float64).reshape(-1, stats.dim)
    if stats.mode == "diagonal":
        features = stats.mean + z * stats.factor
    else:
        features = stats.mean + z @ stats.factor.T
    labels = torch.full((features.shape[0],), stats.stage, dtype=torch.long)
    return PseudoBatch(features, labels)


def pseudo_batch(
    all_stats: Mapping[int, TaskFeatureStats],
    stage: int,
    per_stage_count: int,
    generator: torch.Generator | None = None,
) -> PseudoBatch:
    """Balanced pseudo features for every stage before `stage`, in stage order."""
    parts = []
    for past in range(stage):
        stats = all_stats.get(past)
        if stats is None or not stats.finalized:
            msg = f"No finalized statistics for past stage {past}"
            raise CoverageError(msg)
        parts.append(sample_features(stats, per_stage_count, generator))
    if not parts:
        dim = next(iter(all_stats.values())).dim if all_stats else 0
        return PseudoBatch(torch.zeros(0, dim, dtype=torch.float64), torch.zeros(0, dtype=torch.long))
    return PseudoBatch(torch.cat([p.features for p in parts]), torch.cat([p.labels for p in parts]))


def gaussian_log_likelihood(stats: TaskFeatureStats, features: torch.Tensor, floor: float = 1e-6) -> torch.Tensor:
    """Diagonal-Gaussian log-likelihood of features under a stage's statistics.

    Used to choose routers when no sentinel network is trained.
    """
    features = features.detach().to("cpu", torch.float64)
    var = stats.var if stats.mode == "diagonal" else torch.diagonal(stats.var)
    var = var.clamp_min(floor)
    return -0.5 * (((features - stats.mean) ** 2) / var + var.log()).sum(dim=-1)
