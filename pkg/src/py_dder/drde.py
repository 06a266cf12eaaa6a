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
"""Dynamic routing of defensive experts: a shared low-rank expert bank behind per-stage routers."""

import logging
import math
from dataclasses import dataclass

import torch
from torch import nn

from .backbone import Backbone
from .exceptions import ConfigurationError, ShapeError, StageOrderError, StatsError
from .utils import digest_tensors

logger = logging.getLogger(__name__)


class ExpertBank(nn.Module):
    """`n` low-rank experts per insertion point, shared by every stage.

    Expert `i` at a point maps `x` to `scaling * (x @ down[i]) @ up[i]`, with
    `down[i]` of shape (d_in, rank) and `up[i]` of shape (rank, d_out). The up
    factors start at exactly zero, so a fresh bank contributes nothing.
    """

    def __init__(self, point_dims: dict[str, tuple[int, int]], n: int, rank: int = 4, scaling: float | None = None) -> None:
        super().__init__()
        if n < 1 or rank < 1:
            msg = f"Expert bank needs n >= 1 and rank >= 1, got n={n}, rank={rank}"
            raise ConfigurationError(msg)
        self.n = n
        self.rank = rank
        self.scaling = 1.0 / rank if scaling is None else scaling
        if self.scaling <= 0:
            msg = "Expert scaling must be positive"
            raise ConfigurationError(msg)
        self.points = tuple(point_dims)
        self.down = nn.ParameterDict()
        self.up = nn.ParameterDict()
        for point, (d_in, d_out) in point_dims.items():
            bound = 1.0 / math.sqrt(d_in)
            self.down[point] = nn.Parameter(torch.empty(n, d_in, rank).uniform_(-bound, bound))
            self.up[point] = nn.Parameter(torch.zeros(n, rank, d_out))

    def expert_output(self, point: str, index: int, x: torch.Tensor) -> torch.Tensor:
        return self.scaling * ((x @ self.down[point][index]) @ self.up[point][index])

    def named_factors(self) -> list[tuple[str, torch.Tensor]]:
        """Per-expert factor tensors under their checkpoint names."""
        named = []
        for point in self.points:
            for index in range(self.n):
                named.append((f"expert.{point}.{index}.down", self.down[point][index]))
                named.append((f"expert.{point}.{index}.up", self.up[point][index]))
        return named

    def factor_count(self) -> int:
        return sum(p.numel() for p in self.parameters())


def aggregate_experts(x: torch.Tensor, bank: ExpertBank, point: str, weights: torch.Tensor) -> torch.Tensor:
    """Gated sum of expert outputs, `sum_i w_i * expert_i(x)`.

    Experts whose weight is zero for every row of the batch are skipped.
    """
    d_in = bank.down[point].shape[1]
    if x.shape[-1] != d_in:
        msg = f"Insertion point {point} expects inputs of dimension {d_in}, got {x.shape[-1]}"
        raise ShapeError(msg)
    if weights.shape != (x.shape[0], bank.n):
        msg = f"Expected gating weights of shape {(x.shape[0], bank.n)}, got {tuple(weights.shape)}"
        raise ShapeError(msg)
    delta = x.new_zeros(x.shape[0], bank.up[point].shape[-1])
    active = (weights > 0).any(dim=0).tolist()
    for index, is_active in enumerate(active):
        if is_active:
            delta = delta + weights[:, index : index + 1] * bank.expert_output(point, index, x)
    return delta


def topk_softmax(logits: torch.Tensor, k: int) -> torch.Tensor:
    """Softmax over the k largest logits, every other entry set to -inf.

    Ties at the selection boundary go to the lowest expert index.
    """
    n = logits.shape[-1]
    if not 1 <= k <= n:
        msg = f"Gating needs 1 <= k <= n, got k={k}, n={n}"
        raise ConfigurationError(msg)
    order = torch.sort(logits, dim=-1, descending=True, stable=True).indices[..., :k]
    masked = torch.full_like(logits, float("-inf")).scatter(-1, order, logits.gather(-1, order))
    return torch.softmax(masked, dim=-1)


def gate(router: nn.Linear, features: torch.Tensor, k: int) -> torch.Tensor:
    """Gating weights of one router: exactly k positive entries summing to one."""
    if features.shape[-1] != router.in_features:
        msg = f"Router expects features of dimension {router.in_features}, got {features.shape[-1]}"
        raise ShapeError(msg)
    return topk_softmax(router(features), k)


class ExpertActivity:
    """Running mean of the gating weight each expert receives during a stage."""

    def __init__(self, n: int) -> None:
        self.n = n
        self.mean = torch.zeros(n, dtype=torch.float64)
        self.count = 0

    def update(self, weights: torch.Tensor) -> "ExpertActivity":
        """Fold one weight vector, or a batch of them, into the exact streaming mean."""
        weights = weights.detach().to("cpu", torch.float64).reshape(-1, self.n)
        if weights.shape[0] == 0:
            return self
        total = self.count + weights.shape[0]
        self.mean = self.mean + (weights.sum(dim=0) - weights.shape[0] * self.mean) / total
        self.count = total
        return self


def record_activity(activity: ExpertActivity, weights: torch.Tensor) -> ExpertActivity:
    if weights.shape[-1] != activity.n:
        msg = f"Activity tracks {activity.n} experts, got weights for {weights.shape[-1]}"
        raise ShapeError(msg)
    return activity.update(weights)


@dataclass(frozen=True)
class FusionSnapshot:
    """Copies of the most active experts' factors at the end of a stage."""

    stage: int
    indices: tuple[int, ...]
    down: dict[str, torch.Tensor]  # point -> (len(indices), d_in, rank)
    up: dict[str, torch.Tensor]  # point -> (len(indices), rank, d_out)

    def named_tensors(self) -> list[tuple[str, torch.Tensor]]:
        named = [(f"deu.{self.stage}.indices", torch.tensor(self.indices, dtype=torch.int64))]
        for point in self.down:
            named.append((f"deu.{self.stage}.{point}.down", self.down[point]))
            named.append((f"deu.{self.stage}.{point}.up", self.up[point]))
        return named

    def digest(self) -> str:
        return digest_tensors(self.named_tensors())


def snapshot_active(bank: ExpertBank, activity: ExpertActivity, k: int, stage: int = 0) -> FusionSnapshot:
    """Deep-copy the factors of the k most active experts (ties to the lowest index)."""
    if activity.count == 0:
        msg = "Cannot snapshot experts before any gating weights were recorded"
        raise StatsError(msg)
    if not 1 <= k <= bank.n:
        msg = f"Snapshot size must lie in [1, {bank.n}], got {k}"
        raise ConfigurationError(msg)
    ranked = torch.sort(activity.mean, descending=True, stable=True).indices[:k]
    indices = tuple(sorted(int(i) for i in ranked))
    select = torch.tensor(indices, dtype=torch.long)
    with torch.no_grad():
        down = {p: bank.down[p].detach()[select.to(bank.down[p].device)].clone() for p in bank.points}
        up = {p: bank.up[p].detach()[select.to(bank.up[p].device)].clone() for p in bank.points}
    logger.debug("Stage %d snapshot of experts %s", stage, indices)
    return FusionSnapshot(stage=stage, indices=indices, down=down, up=up)


def fuse_experts(snapshot: FusionSnapshot, bank: ExpertBank, rho: float) -> ExpertBank:
    """Blend snapshotted factors back into the bank: `rho * stored + (1 - rho) * current`."""
    if not 0.0 <= rho <= 1.0:
        msg = f"rho must lie in [0, 1], got {rho}"
        raise ConfigurationError(msg)
    if any(not 0 <= i < bank.n for i in snapshot.indices) or set(snapshot.down) != set(bank.points):
        msg = f"Snapshot of stage {snapshot.stage} does not match the expert bank"
        raise ShapeError(msg)
    select = list(snapshot.indices)
    with torch.no_grad():
        for point in bank.points:
            for factors, stored in ((bank.down[point], snapshot.down[point]), (bank.up[point], snapshot.up[point])):
                if stored.shape[1:] != factors.shape[1:]:
                    msg = f"Snapshot factor shape {tuple(stored.shape)} does not fit point {point}"
                    raise ShapeError(msg)
                current = factors[select]
                # lerp is exact at rho in {0, 1} and when stored == current.
                factors[select] = torch.lerp(current, stored.to(current), rho)
    return bank


class RouterBank(nn.Module):
    """One affine router per stage and insertion point, mapping features to expert logits."""

    def __init__(self, point_dims: dict[str, tuple[int, int]], n: int, bias: bool = True) -> None:
        super().__init__()
        self.point_dims = dict(point_dims)
        self.n = n
        self.bias = bias
        self.routers = nn.ModuleDict({point: nn.ModuleDict() for point in point_dims})

    @property
    def stages(self) -> list[int]:
        first = next(iter(self.routers.values()))
        return sorted(int(key) for key in first)

    def has(self, stage: int) -> bool:
        return str(stage) in next(iter(self.routers.values()))

    def get(self, point: str, stage: int) -> nn.Linear:
        if not self.has(stage):
            msg = f"No router registered for stage {stage}"
            raise StageOrderError(msg)
        return self.routers[point][str(stage)]

    def add(self, stage: int) -> dict[str, nn.Linear]:
        if self.has(stage):
            msg = f"A router for stage {stage} already exists"
            raise StageOrderError(msg)
        added = {}
        for point, (d_in, _) in self.point_dims.items():
            router = nn.Linear(d_in, self.n, bias=self.bias)
            nn.init.normal_(router.weight, std=0.01)
            if router.bias is not None:
                nn.init.zeros_(router.bias)
            self.routers[point][str(stage)] = router
            added[point] = router
        return added

    def params_per_stage(self) -> int:
        """Parameters a new stage adds: d_in * n (+ n with bias) per insertion point."""
        return sum(d_in * self.n + (self.n if self.bias else 0) for d_in, _ in self.point_dims.values())

    def named_stage_tensors(self, stage: int) -> list[tuple[str, torch.Tensor]]:
        named = []
        for point in self.point_dims:
            router = self.get(point, stage)
            named.append((f"router.{point}.{stage}.weight", router.weight))
            if router.bias is not None:
                named.append((f"router.{point}.{stage}.bias", router.bias))
        return named

    def stage_hash(self, stage: int) -> str:
        return digest_tensors(self.named_stage_tensors(stage))


class DefenseModel(nn.Module):
    """Frozen backbone whose insertion points are adapted by routed expert banks.

    `forward(x, stages)` routes every sample through the router of its stage
    id; the stage ids come from the oracle during training and from the
    sentinel network at inference.
    """

    def __init__(self, backbone: Backbone, n: int, k: int, rank: int = 4, router_bias: bool = True) -> None:
        super().__init__()
        if not 1 <= k <= n:
            msg = f"top_k must lie in [1, n], got k={k}, n={n}"
            raise ConfigurationError(msg)
        self.backbone = backbone
        self.k = k
        dims = backbone.point_dims()
        self.bank = ExpertBank(dims, n, rank)
        self.routers = RouterBank(dims, n, bias=router_bias)

    def gating_weights(self, point: str, activation: torch.Tensor, stages: torch.Tensor) -> torch.Tensor:
        weights = activation.new_zeros(activation.shape[0], self.bank.n)
        for stage in torch.unique(stages).tolist():
            rows = (stages == stage).unsqueeze(-1)
            weights = torch.where(rows, gate(self.routers.get(point, stage), activation, self.k), weights)
        return weights

    def forward(
        self,
        x: torch.Tensor,
        stages: torch.Tensor | int,
        activity: ExpertActivity | None = None,
    ) -> torch.Tensor:
        if isinstance(stages, int):
            stages = torch.full((x.shape[0],), stages, dtype=torch.long, device=x.device)

        def adapter(point: str, activation: torch.Tensor) -> torch.Tensor:
            weights = self.gating_weights(point, activation, stages)
            if activity is not None:
                record_activity(activity, weights)
            return aggregate_experts(activation, self.bank, point, weights)

        return self.backbone.classify(self.backbone.trunk_features(x), adapter)

    def stage_fn(self, stage: int):
        """Callable `images -> logits` routed through a single stage's router."""
        return lambda images: self(images, stage)


def add_router(model: DefenseModel, stage: int) -> dict[str, nn.Linear]:
    """Register a fresh router for `stage` at every insertion point; others are untouched."""
    added = model.routers.add(stage)
    device = next(model.backbone.parameters()).device
    for router in added.values():
        router.to(device)
    logger.info("Added router %d (+%d parameters)", stage, model.routers.params_per_stage())
    return added
