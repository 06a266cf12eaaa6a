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
"""Adversarial sentinel network: prompt-learned stage text features that pick a router per input.

A stage prompt is `M` learnable context vectors followed by a fixed class
anchor for the stage. A frozen, seeded text-feature map turns each prompt
into a unit vector; an image feature is assigned to the stage whose text
feature has the highest cosine similarity.
"""

import logging
import math
from collections.abc import Callable
from typing import NamedTuple

import torch
import torch.nn.functional as F
from pydantic import BaseModel, Field
from torch import nn

from .config import Settings
from .exceptions import CoverageError, DataError, ShapeError, StageOrderError
from .pst import PseudoBatch
from .utils import module_digest

logger = logging.getLogger(__name__)


class ASNConfig(BaseModel):
    """Training knobs of the sentinel network."""

    temperature: float = Field(default=0.07, gt=0.0)
    epochs: int = Field(default=20, ge=0)
    lr: float = Field(default=1e-3, gt=0.0)
    batch_size: int = Field(default=64, ge=1)
    pseudo_per_stage: int = Field(default=256, ge=0)
    freeze_past: bool = False
    heldout_fraction: float = Field(default=0.1, ge=0.0, lt=1.0)
    seed: int = 0

    @classmethod
    def from_settings(cls, settings: Settings) -> "ASNConfig":
        return cls(
            temperature=settings.asn_temperature,
            epochs=settings.asn_epochs,
            lr=settings.asn_lr,
            batch_size=settings.batch_size,
            pseudo_per_stage=settings.pseudo_per_stage,
            freeze_past=settings.asn_freeze_past,
            seed=settings.seed,
        )


class TextFeatureMap(nn.Module):
    """Frozen two-layer map from a prompt sequence to a unit text feature.

    Each token gets a fixed positional offset, passes a GELU layer, and the
    tokens are mean pooled before the output projection. All weights are
    buffers drawn from `seed`, so they never receive gradients.
    """

    def __init__(self, embed_dim: int, out_dim: int, length: int, hidden: int = 256, seed: int = 1234) -> None:
        super().__init__()
        self.embed_dim = embed_dim
        self.length = length
        self.seed = seed
        generator = torch.Generator().manual_seed(seed)
        self.register_buffer("position", 0.02 * torch.randn(length, embed_dim, generator=generator))
        self.register_buffer("w1", torch.randn(embed_dim, hidden, generator=generator) / math.sqrt(embed_dim))
        self.register_buffer("b1", 0.02 * torch.randn(hidden, generator=generator))
        self.register_buffer("w2", torch.randn(hidden, out_dim, generator=generator) / math.sqrt(hidden))

    def forward(self, prompt: torch.Tensor) -> torch.Tensor:
        if prompt.shape[-2:] != (self.length, self.embed_dim):
            msg = f"Expected prompts of shape {(self.length, self.embed_dim)}, got {tuple(prompt.shape[-2:])}"
            raise ShapeError(msg)
        hidden = F.gelu((prompt + self.position) @ self.w1 + self.b1)
        return F.normalize(hidden.mean(dim=-2) @ self.w2, dim=-1)

    def param_hash(self) -> str:
        return module_digest(self)


class PromptState(nn.Module):
    """Context vectors and per-stage class anchors.

    In the default per-stage mode every stage owns its context; with
    `shared=True` a single context is reused by all stages.
    """

    def __init__(self, context_length: int = 16, embed_dim: int = 512, shared: bool = False, learnable_type: bool = False) -> None:
        super().__init__()
        self.context_length = context_length
        self.embed_dim = embed_dim
        self.shared = shared
        self.learnable_type = learnable_type
        self.ctx = nn.ParameterDict()
        self.types = nn.ParameterDict()

    @property
    def stages(self) -> list[int]:
        return sorted(int(key) for key in self.types)

    def register_stage(self, stage: int, seed: int = 0) -> None:
        """Add the class anchor (and, per-stage, the context) of the next stage."""
        if stage != len(self.types):
            msg = f"Stage {stage} registered out of order; {len(self.types)} stages exist"
            raise StageOrderError(msg)
        generator = torch.Generator().manual_seed(seed + stage)
        anchor = torch.randn(self.embed_dim, generator=generator)
        context = 0.02 * torch.randn(self.context_length, self.embed_dim, generator=generator)
        device = next(self.parameters()).device if len(self.types) else torch.device("cpu")
        self.types[str(stage)] = nn.Parameter(anchor.to(device), requires_grad=self.learnable_type)
        key = "shared" if self.shared else str(stage)
        if key not in self.ctx:
            self.ctx[key] = nn.Parameter(context.to(device))

    def context(self, stage: int) -> nn.Parameter:
        return self.ctx["shared" if self.shared else str(stage)]

    def named_stage_tensors(self) -> list[tuple[str, torch.Tensor]]:
        named = []
        for stage in self.stages:
            if not self.shared:
                named.append((f"asn.ctx.{stage}", self.ctx[str(stage)]))
            named.append((f"asn.type.{stage}", self.types[str(stage)]))
        if self.shared and "shared" in self.ctx:
            named.append(("asn.ctx.shared", self.ctx["shared"]))
        return named


def build_prompt(prompts: PromptState, stage: int) -> torch.Tensor:
    """Prompt sequence `[V]_1 ... [V]_M [TYPE_t]` of shape (M + 1, embed_dim)."""
    if str(stage) not in prompts.types:
        msg = f"Stage {stage} has no prompt registered"
        raise StageOrderError(msg)
    anchor = prompts.types[str(stage)].unsqueeze(0)
    return torch.cat([prompts.context(stage), anchor], dim=0)


def text_features(text_map: TextFeatureMap, prompt: torch.Tensor) -> torch.Tensor:
    return text_map(prompt)


def all_text_features(prompts: PromptState, text_map: TextFeatureMap) -> torch.Tensor:
    """Stacked unit text features, one row per registered stage."""
    return text_map(torch.stack([build_prompt(prompts, stage) for stage in prompts.stages]))


def asn_logits(image_features: torch.Tensor, stage_features: torch.Tensor, temperature: float = 0.07) -> torch.Tensor:
    """Cosine similarity between image and stage text features divided by the temperature."""
    if stage_features.ndim != 2 or stage_features.shape[0] == 0:
        msg = "At least one stage text feature is required"
        raise StageOrderError(msg)
    norms = image_features.norm(dim=-1, keepdim=True)
    if bool((norms == 0).any()):
        msg = "Image feature has zero norm"
        raise DataError(msg)
    cosine = (image_features / norms) @ F.normalize(stage_features, dim=-1).T
    return cosine / temperature


def select_router(logits: torch.Tensor) -> torch.Tensor:
    """Index of the largest logit (the first one on ties)."""
    return logits.argmax(dim=-1)


def heldout_rows(labels: torch.Tensor, fraction: float, generator: torch.Generator) -> torch.Tensor:
    """Row indices holding out `fraction` of every label, at least one row per label when `fraction > 0`."""
    picks = []
    for label in torch.unique(labels).tolist():
        rows = (labels == label).nonzero().flatten()
        take = max(int(rows.shape[0] * fraction), 1) if fraction > 0 else 0
        picks.append(rows[torch.randperm(rows.shape[0], generator=generator)[:take].to(rows.device)])
    return torch.cat(picks) if picks else labels.new_zeros(0, dtype=torch.long)


class ASNFit(NamedTuple):
    """Loss curves of one sentinel training run."""

    train_loss: list[float]
    heldout_loss: list[float]


def train_asn(
    prompts: PromptState,
    text_map: TextFeatureMap,
    real_features: torch.Tensor,
    stage: int,
    pseudo: Callable[[], PseudoBatch] | None,
    config: ASNConfig,
    require_replay: bool = True,
) -> ASNFit:
    """Fit context vectors so each feature's logits pick its own stage.

    `real_features` all belong to `stage`. `pseudo` returns resampled features
    of every earlier stage and is called once per epoch; it may be None only
    when `require_replay` is False (current-stage-only training).
    """
    stages = prompts.stages
    if stage not in stages:
        msg = f"Stage {stage} must be registered before its sentinel training"
        raise StageOrderError(msg)
    if len(stages) == 1:
        logger.info("Single registered stage; sentinel training skipped")
        return ASNFit([], [])
    if pseudo is None and require_replay and stage > 0:
        msg = f"Stage {stage} sentinel training needs pseudo features for stages 0..{stage - 1}"
        raise CoverageError(msg)

    device = prompts.types[str(stage)].device
    dtype = prompts.types[str(stage)].dtype
    generator = torch.Generator().manual_seed(config.seed + 7919 * stage)

    def check_coverage(batch: PseudoBatch) -> PseudoBatch:
        if require_replay and set(batch.labels.tolist()) != set(range(stage)):
            msg = f"Pseudo features must cover every stage before {stage}"
            raise CoverageError(msg)
        return batch

    real = real_features.detach().to(device, dtype)
    real = real[real.norm(dim=-1) > 0]
    order = torch.randperm(real.shape[0], generator=generator).to(device)
    cut = real.shape[0] - int(real.shape[0] * config.heldout_fraction)
    real_train, real_held = real[order[:cut]], real[order[cut:]]

    held_parts = [real_held]
    held_labels = [torch.full((real_held.shape[0],), stage, dtype=torch.long, device=device)]
    if pseudo is not None:
        held = check_coverage(pseudo())
        rows = heldout_rows(held.labels, config.heldout_fraction, generator)
        held_parts.append(held.features[rows].to(device, dtype))
        held_labels.append(held.labels[rows].to(device))
    held_features, held_targets = torch.cat(held_parts), torch.cat(held_labels)

    if config.freeze_past and not prompts.shared:
        trainable = [prompts.context(stage)]
    else:
        trainable = list(prompts.ctx.values())
    if prompts.learnable_type:
        trainable += list(prompts.types.values())
    optimizer = torch.optim.Adam(trainable, lr=config.lr)

    def heldout() -> float:
        if held_features.shape[0] == 0:
            return float("nan")
        with torch.no_grad():
            logits = asn_logits(held_features, all_text_features(prompts, text_map), config.temperature)
            return F.cross_entropy(logits, held_targets).item()

    fit = ASNFit([], [heldout()])
    for epoch in range(config.epochs):
        features, targets = [real_train], [torch.full((real_train.shape[0],), stage, dtype=torch.long, device=device)]
        if pseudo is not None:
            batch = check_coverage(pseudo())
            features.append(batch.features.to(device, dtype))
            targets.append(batch.labels.to(device))
        epoch_features, epoch_targets = torch.cat(features), torch.cat(targets)
        permutation = torch.randperm(epoch_features.shape[0], generator=generator).to(device)
        running = 0.0
        for start in range(0, permutation.shape[0], config.batch_size):
            rows = permutation[start : start + config.batch_size]
            optimizer.zero_grad(set_to_none=True)
            logits = asn_logits(epoch_features[rows], all_text_features(prompts, text_map), config.temperature)
            loss = F.cross_entropy(logits, epoch_targets[rows])
            loss.backward()
            optimizer.step()
            running += loss.item() * rows.shape[0]
        fit.train_loss.append(running / max(permutation.shape[0], 1))
        fit.heldout_loss.append(heldout())
        logger.debug("ASN stage %d epoch %d: loss=%.4f heldout=%.4f", stage, epoch + 1, fit.train_loss[-1], fit.heldout_loss[-1])

    if config.epochs and held_features.shape[0] and not fit.heldout_loss[-1] < fit.heldout_loss[0]:
        logger.error(
            "Sentinel held-out loss did not decrease at stage %d (%.4f -> %.4f)",
            stage, fit.heldout_loss[0], fit.heldout_loss[-1],
        )
    return fit
