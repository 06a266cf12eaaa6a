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
"""Manages the application's configuration using Pydantic."""

from fractions import Fraction
from pathlib import Path
from typing import Annotated, Any, Literal

from pydantic import computed_field, field_validator, model_validator
from pydantic_settings import BaseSettings, NoDecode, SettingsConfigDict

from .models import AttackSpec

Variant = Literal["a", "b", "c", "d", "e"]


class Settings(BaseSettings):
    """Manages configuration for continual adversarial training runs.

    Reads settings from environment variables with the prefix 'DDER_', or from
    a flat key-value config file in the same format (`DDER_TOP_K=2`). List
    values are comma separated and float values accept fractions (`8/255`).
    """

    model_config = SettingsConfigDict(env_prefix="DDER_", extra="ignore")

    seed: int = 0
    device: str = "cpu"

    # Data
    data_path: Path | None = None
    num_classes: int = 10
    image_size: int = 32
    channels: int = 3
    train_size: int = 4000
    test_size: int = 1000
    augment_flip: bool = False
    augment_crop: bool = False

    # Backbone
    encoder: Literal["conv", "transformer"] = "conv"
    feature_dim: int = 128
    pretrain_epochs: int = 30
    min_clean_accuracy: float = 0.2

    # Experts and routers
    n_experts: int = 8
    top_k: int = 2
    rank: int = 4
    router_bias: bool = True
    rho: float = 0.5
    fuse_at: Literal["end", "start", "off"] = "end"
    train_experts: bool = True
    epochs: int = 30
    batch_size: int = 64
    lr: float = 1e-3
    lr_schedule: Literal["constant", "cosine"] = "constant"

    # Sentinel network
    context_length: int = 16
    embed_dim: int = 512
    text_hidden: int = 256
    text_map_seed: int = 1234
    asn_temperature: float = 0.07
    asn_epochs: int = 20
    asn_lr: float = 1e-3
    asn_shared_context: bool = False
    asn_learnable_type: bool = False
    asn_freeze_past: bool = False
    pseudo_per_stage: int = 256

    # Feature statistics
    pst_mode: Literal["diagonal", "full"] = "diagonal"
    pst_ema: bool = False
    pst_momentum: float = 0.9

    # Attacks
    sequence: Annotated[list[str], NoDecode] = ["clean", "fgsm", "pgd"]
    stage_sizes: Annotated[list[int], NoDecode] = []
    epsilon: float = 8 / 255
    alpha: float = 2 / 255
    steps: int = 20
    epsilon_l2: float = 0.5
    alpha_l2: float = 0.1
    random_start: bool = True
    attack_mode: Literal["cached", "online"] = "cached"
    cache_dir: Path = Path(".dder_cache")

    # Runs and reports
    out_dir: Path = Path("runs")
    variant: Variant = "e"
    eval_mode: Literal["transfer", "adaptive"] = "transfer"
    plots: bool = False

    @field_validator("sequence", mode="before")
    @classmethod
    def _split_sequence(cls, value: Any) -> Any:
        if isinstance(value, str):
            return [token.strip().lower() for token in value.split(",") if token.strip()]
        return value

    @field_validator("stage_sizes", mode="before")
    @classmethod
    def _split_sizes(cls, value: Any) -> Any:
        if isinstance(value, str):
            return [int(token) for token in value.split(",") if token.strip()]
        return value

    @field_validator("epsilon", "alpha", "epsilon_l2", "alpha_l2", "lr", "asn_lr", mode="before")
    @classmethod
    def _parse_fraction(cls, value: Any) -> Any:
        if isinstance(value, str) and "/" in value:
            return float(Fraction(value.strip()))
        return value

    @model_validator(mode="after")
    def _check_consistency(self) -> "Settings":
        if not 1 <= self.top_k <= self.n_experts:
            msg = f"top_k must lie in [1, n_experts]; got k={self.top_k}, n={self.n_experts}"
            raise ValueError(msg)
        if not 0.0 <= self.rho <= 1.0:
            msg = f"rho must lie in [0, 1], got {self.rho}"
            raise ValueError(msg)
        if self.asn_temperature <= 0.0:
            msg = "asn_temperature must be positive"
            raise ValueError(msg)
        if not self.sequence or self.sequence[0] != "clean":
            msg = "The attack sequence must start with the clean stage"
            raise ValueError(msg)
        if self.stage_sizes and len(self.stage_sizes) != len(self.sequence):
            msg = "stage_sizes needs one entry per stage"
            raise ValueError(msg)
        if any(size < 1 for size in self.stage_sizes):
            msg = "stage sizes must be at least 1"
            raise ValueError(msg)
        # Parse eagerly so a bad token fails at load time.
        _ = self.attack_sequence
        return self

    @computed_field
    @property
    def attack_sequence(self) -> list[AttackSpec]:
        """Parse the `name[:norm]` tokens of `sequence` into attack specs."""
        return [self._parse_token(token, index) for index, token in enumerate(self.sequence)]

    def _parse_token(self, token: str, index: int) -> AttackSpec:
        name, _, norm = token.partition(":")
        norm = norm or "linf"
        if name not in ("clean", "fgsm", "bim", "pgd") or norm not in ("linf", "l2"):
            msg = f"Unknown attack token {token!r}"
            raise ValueError(msg)
        seed = self.seed + index
        if name == "clean":
            return AttackSpec(name="clean", seed=seed)
        epsilon = self.epsilon if norm == "linf" else self.epsilon_l2
        alpha = self.alpha if norm == "linf" else self.alpha_l2
        if name == "fgsm":
            return AttackSpec(name="fgsm", norm=norm, epsilon=epsilon, alpha=epsilon, seed=seed)
        return AttackSpec(
            name=name,
            norm=norm,
            epsilon=epsilon,
            alpha=alpha,
            steps=self.steps,
            random_start=self.random_start and name == "pgd",
            seed=seed,
        )

    # Ablation switches. Variant (a) is the plain baseline, (e) the full method.
    @property
    def effective_n_experts(self) -> int:
        """Expert count after the ablation variant is applied."""
        return 1 if self.variant == "a" else self.n_experts

    @property
    def effective_top_k(self) -> int:
        """Gating k after the ablation variant is applied."""
        return 1 if self.variant == "a" else self.top_k

    @property
    def per_stage_routers(self) -> bool:
        """Whether each stage grows its own router."""
        return self.variant in ("c", "d", "e")

    @property
    def use_asn(self) -> bool:
        """Whether the sentinel network selects routers at inference."""
        return self.variant in ("d", "e")

    @property
    def use_pst(self) -> bool:
        """Whether past-stage feature statistics feed router selection."""
        return self.variant in ("c", "e")

    @property
    def fusion_enabled(self) -> bool:
        """Whether expert snapshots are fused back into the bank."""
        return self.variant != "a" and self.fuse_at != "off"

    def stage_size(self, stage: int) -> int | None:
        """Configured training-set size for a stage, None meaning all samples."""
        return self.stage_sizes[stage] if self.stage_sizes else None

    @classmethod
    def from_file(cls, path: str | Path | None, **overrides: Any) -> "Settings":
        """Load settings from a config file; keyword overrides win over the file."""
        if path is None:
            return cls(**overrides)
        return cls(_env_file=str(path), **overrides)  # type: ignore[call-arg]

    def echo(self) -> dict[str, Any]:
        """JSON-compatible copy of the configuration for checkpoints and reports."""
        return self.model_dump(mode="json", exclude={"attack_sequence"})


# Instantiate the settings so it can be imported directly
settings = Settings()
