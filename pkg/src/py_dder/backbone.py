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
"""Small image encoder and classification head that is trained on clean data, then frozen."""

import logging
from collections.abc import Callable

import torch
import torch.nn.functional as F
from torch import nn
from torch.utils.data import DataLoader, TensorDataset

from .config import Settings
from .data import augment
from .exceptions import CleanAccuracyError, ShapeError, StageOrderError
from .utils import module_digest

logger = logging.getLogger(__name__)

# (point, activation entering the point) -> additive delta on the point's output
Adapter = Callable[[str, torch.Tensor], torch.Tensor]


class ConvTrunk(nn.Module):
    """Four 3x3 conv layers, two max-pools and a global average pool."""

    def __init__(self, channels: int, width: int) -> None:
        super().__init__()
        self.layers = nn.Sequential(
            nn.Conv2d(channels, 32, 3, padding=1), nn.ReLU(),
            nn.Conv2d(32, 64, 3, padding=1), nn.ReLU(), nn.MaxPool2d(2),
            nn.Conv2d(64, 64, 3, padding=1), nn.ReLU(), nn.MaxPool2d(2),
            nn.Conv2d(64, width, 3, padding=1), nn.ReLU(),
            nn.AdaptiveAvgPool2d(1), nn.Flatten(),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.layers(x)


class TransformerTrunk(nn.Module):
    """Patch embedding followed by four pre-norm transformer blocks, mean pooled."""

    def __init__(self, channels: int, image_size: int, width: int, patch: int = 4, heads: int = 4) -> None:
        super().__init__()
        if image_size % patch:
            msg = f"image_size {image_size} is not divisible by the patch size {patch}"
            raise ShapeError(msg)
        self.embed = nn.Conv2d(channels, width, patch, stride=patch)
        self.position = nn.Parameter(torch.zeros(1, (image_size // patch) ** 2, width))
        nn.init.normal_(self.position, std=0.02)
        layer = nn.TransformerEncoderLayer(
            width, heads, dim_feedforward=2 * width, dropout=0.0, batch_first=True, norm_first=True,
        )
        self.blocks = nn.TransformerEncoder(layer, num_layers=4, enable_nested_tensor=False)
        self.norm = nn.LayerNorm(width)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        tokens = self.embed(x).flatten(2).transpose(1, 2) + self.position
        return self.norm(self.blocks(tokens)).mean(dim=1)


class Backbone(nn.Module):
    """Encoder trunk, two adaptable linear layers and a linear head.

    The linear layers `fc1` and `fc2` are the insertion points where expert
    banks add their deltas. `classify` composes those deltas into the frozen
    path; with no adapter (or zero deltas) it reproduces the frozen logits
    exactly.
    """

    insertion_points: tuple[str, ...] = ("fc1", "fc2")

    def __init__(
        self,
        channels: int = 3,
        image_size: int = 32,
        num_classes: int = 10,
        feature_dim: int = 128,
        encoder: str = "conv",
    ) -> None:
        super().__init__()
        self.input_shape = (channels, image_size, image_size)
        self.num_classes = num_classes
        self.feature_dim = feature_dim
        if encoder == "conv":
            self.trunk: nn.Module = ConvTrunk(channels, feature_dim)
        elif encoder == "transformer":
            self.trunk = TransformerTrunk(channels, image_size, feature_dim)
        else:
            msg = f"Unknown encoder {encoder!r}"
            raise ValueError(msg)
        self.fc1 = nn.Linear(feature_dim, feature_dim)
        self.fc2 = nn.Linear(feature_dim, feature_dim)
        self.head = nn.Linear(feature_dim, num_classes)
        self.frozen = False
        self.clean_accuracy: float | None = None

    @classmethod
    def from_settings(cls, settings: Settings) -> "Backbone":
        return cls(
            channels=settings.channels,
            image_size=settings.image_size,
            num_classes=settings.num_classes,
            feature_dim=settings.feature_dim,
            encoder=settings.encoder,
        )

    def point_dims(self) -> dict[str, tuple[int, int]]:
        """(in_features, out_features) of every insertion point, in order."""
        return {
            point: (getattr(self, point).in_features, getattr(self, point).out_features)
            for point in self.insertion_points
        }

    def trunk_features(self, x: torch.Tensor) -> torch.Tensor:
        """Pooled trunk output that enters the first insertion point."""
        if tuple(x.shape[1:]) != self.input_shape:
            msg = f"Expected input geometry {self.input_shape}, got {tuple(x.shape[1:])}"
            raise ShapeError(msg)
        return self.trunk(x)

    def classify(self, features: torch.Tensor, adapter: Adapter | None = None) -> torch.Tensor:
        """Class logits from trunk features, adding `adapter` deltas at each insertion point."""
        if features.shape[-1] != self.feature_dim:
            msg = f"Expected features of dimension {self.feature_dim}, got {features.shape[-1]}"
            raise ShapeError(msg)
        activation = features
        for point in self.insertion_points:
            out = getattr(self, point)(activation)
            if adapter is not None:
                out = out + adapter(point, activation)
            activation = F.relu(out)
        return self.head(activation)

    def encode(self, x: torch.Tensor) -> torch.Tensor:
        """Frozen-path feature vector of dimension `feature_dim` (router/sentinel input)."""
        activation = self.trunk_features(x)
        for point in self.insertion_points:
            activation = F.relu(getattr(self, point)(activation))
        return activation

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.classify(self.trunk_features(x))

    def freeze(self) -> "Backbone":
        """Make every parameter immutable and switch to evaluation mode."""
        for parameter in self.parameters():
            parameter.requires_grad_(False)
        self.frozen = True
        return self.eval()

    def train(self, mode: bool = True) -> "Backbone":
        # A frozen backbone stays in evaluation mode.
        return super().train(mode and not self.frozen)

    def param_hash(self) -> str:
        return module_digest(self)


@torch.no_grad()
def accuracy(
    predict: Callable[[torch.Tensor], torch.Tensor],
    dataset: TensorDataset,
    batch_size: int = 256,
    device: torch.device | str = "cpu",
) -> float:
    """Fraction of samples whose predicted class matches the label."""
    loader = DataLoader(dataset, batch_size=batch_size, shuffle=False)
    correct = 0
    for images, labels in loader:
        logits = predict(images.to(device))
        correct += int((logits.argmax(dim=-1).cpu() == labels).sum())
    return correct / max(len(dataset), 1)


def pretrain_clean(
    backbone: Backbone,
    data: TensorDataset,
    settings: Settings,
    test: TensorDataset | None = None,
) -> Backbone:
    """Stage-0 training of the encoder and head on clean data.

    Records the clean accuracy on `test` (or on `data` when no test split is
    given) and raises CleanAccuracyError below `settings.min_clean_accuracy`.
    The caller freezes the backbone afterwards.
    """
    if backbone.frozen:
        msg = "Clean pretraining needs an unfrozen backbone"
        raise StageOrderError(msg)
    if len(data) == 0:
        msg = "Clean pretraining needs a nonempty dataset"
        raise CleanAccuracyError(msg)
    device = next(backbone.parameters()).device
    generator = torch.Generator().manual_seed(settings.seed)
    loader = DataLoader(data, batch_size=settings.batch_size, shuffle=True, generator=generator)
    optimizer = torch.optim.Adam(backbone.parameters(), lr=settings.lr)

    backbone.train()
    for epoch in range(settings.pretrain_epochs):
        running = 0.0
        for images, labels in loader:
            images = augment(images, settings.augment_flip, settings.augment_crop, generator)
            optimizer.zero_grad(set_to_none=True)
            loss = F.cross_entropy(backbone(images.to(device)), labels.to(device))
            loss.backward()
            optimizer.step()
            running += loss.item() * len(labels)
        logger.debug("Pretrain epoch %d/%d: loss=%.4f", epoch + 1, settings.pretrain_epochs, running / len(data))
    backbone.eval()

    backbone.clean_accuracy = accuracy(backbone, test if test is not None else data, device=device)
    logger.info("Clean backbone accuracy: %.4f", backbone.clean_accuracy)
    if backbone.clean_accuracy < settings.min_clean_accuracy:
        msg = (
            f"Clean accuracy {backbone.clean_accuracy:.4f} is below the floor "
            f"{settings.min_clean_accuracy:.4f}; check the data pipeline"
        )
        raise CleanAccuracyError(msg)
    return backbone
