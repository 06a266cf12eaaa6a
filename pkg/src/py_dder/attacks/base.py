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
"""Defines the abstract base class for adversarial attacks."""

import abc
from collections.abc import Callable

import torch

from ..models import AttackSpec

# images -> logits
Classifier = Callable[[torch.Tensor], torch.Tensor]


class Attack(abc.ABC):
    """Abstract Base Class for all attacks.

    This class defines the interface every attack must implement, so new
    threat models (black-box, transfer, corruption) plug into dataset
    generation and evaluation without touching them.
    """

    def __init__(self, spec: AttackSpec) -> None:
        """Keep the attack spec that parameterizes this attack."""
        self.spec = spec

    @abc.abstractmethod
    def perturb(
        self,
        model: Classifier,
        images: torch.Tensor,
        labels: torch.Tensor,
        generator: torch.Generator | None = None,
    ) -> torch.Tensor:
        """Return adversarial versions of `images`.

        Args:
            model: Callable mapping a batch of images to class logits. It is
                   only read, never updated.
            images: Clean inputs shaped (batch, channels, height, width) in [0, 1].
            labels: True class ids; the attack maximizes cross-entropy on them.
            generator: Source of randomness for random starts.

        """
        raise NotImplementedError

    def __call__(
        self,
        model: Classifier,
        images: torch.Tensor,
        labels: torch.Tensor,
        generator: torch.Generator | None = None,
    ) -> torch.Tensor:
        return self.perturb(model, images, labels, generator)


class NoAttack(Attack):
    """The clean stage: inputs pass through unchanged."""

    def perturb(
        self,
        model: Classifier,
        images: torch.Tensor,
        labels: torch.Tensor,
        generator: torch.Generator | None = None,
    ) -> torch.Tensor:
        return images.detach().clone()
