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
"""Image datasets: packed `.npz` files, a synthetic desk dataset and augmentation."""

import logging
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch.utils.data import TensorDataset

from .config import Settings
from .exceptions import DataError

logger = logging.getLogger(__name__)


def validate_images(images: torch.Tensor, labels: torch.Tensor, num_classes: int) -> None:
    """Check the ImageBatch contract: NCHW pixels in [0, 1], labels in range."""
    if images.ndim != 4:
        msg = f"Expected images shaped (batch, channels, height, width), got {tuple(images.shape)}"
        raise DataError(msg)
    if labels.shape != (images.shape[0],):
        msg = "Expected one label per image"
        raise DataError(msg)
    if images.numel() and (images.min() < 0.0 or images.max() > 1.0):
        msg = "Pixel values must lie in [0, 1]"
        raise DataError(msg)
    if labels.numel() and (labels.min() < 0 or labels.max() >= num_classes):
        msg = f"Labels must be class ids in [0, {num_classes})"
        raise DataError(msg)


def _read_npz(path: Path) -> tuple[torch.Tensor, torch.Tensor]:
    with np.load(path) as packed:
        images = torch.from_numpy(packed["images"].astype(np.float32))
        labels = torch.from_numpy(packed["labels"].astype(np.int64))
    return images, labels


def load_packed(path: str | Path, num_classes: int, test_fraction: float = 0.2, seed: int = 0) -> tuple[TensorDataset, TensorDataset]:
    """Load train/test splits from a packed file or a directory.

    A directory must hold `train.npz` and `test.npz`; a single `.npz` file is
    split into train and test with a seeded permutation. Every file stores a
    float32 `images` array (N, C, H, W) in [0, 1] and an integer `labels`
    array (N,).
    """
    path = Path(path)
    if path.is_dir():
        splits = [_read_npz(path / "train.npz"), _read_npz(path / "test.npz")]
    else:
        images, labels = _read_npz(path)
        order = torch.randperm(len(labels), generator=torch.Generator().manual_seed(seed))
        cut = len(labels) - int(round(len(labels) * test_fraction))
        splits = [
            (images[order[:cut]], labels[order[:cut]]),
            (images[order[cut:]], labels[order[cut:]]),
        ]
    for images, labels in splits:
        validate_images(images, labels, num_classes)
    logger.info("Loaded %d train / %d test images from %s", len(splits[0][1]), len(splits[1][1]), path)
    return TensorDataset(*splits[0]), TensorDataset(*splits[1])


def synthetic_dataset(
    num_classes: int,
    size: int,
    image_size: int = 32,
    channels: int = 3,
    seed: int = 0,
    sample_seed: int | None = None,
    noise: float = 0.15,
) -> TensorDataset:
    """Class-template images with Gaussian pixel noise, clipped to [0, 1].

    Templates depend only on `seed`, so train and test splits built with the
    same seed and different `sample_seed`s share their classes.
    """
    template_gen = torch.Generator().manual_seed(seed)
    coarse = torch.rand(num_classes, channels, 4, 4, generator=template_gen)
    templates = F.interpolate(coarse, size=(image_size, image_size), mode="bilinear", align_corners=False)
    templates = 0.15 + 0.7 * templates

    sample_gen = torch.Generator().manual_seed(seed + 1 if sample_seed is None else sample_seed)
    labels = torch.arange(size) % num_classes
    labels = labels[torch.randperm(size, generator=sample_gen)]
    jitter = noise * torch.randn(size, channels, image_size, image_size, generator=sample_gen)
    images = (templates[labels] + jitter).clamp(0.0, 1.0)
    return TensorDataset(images, labels)


def load_datasets(settings: Settings) -> tuple[TensorDataset, TensorDataset]:
    """Train and test splits for a run: the configured file, else the desk dataset."""
    if settings.data_path is not None:
        return load_packed(settings.data_path, settings.num_classes, seed=settings.seed)
    train = synthetic_dataset(
        settings.num_classes, settings.train_size, settings.image_size, settings.channels,
        seed=settings.seed, sample_seed=settings.seed + 101,
    )
    test = synthetic_dataset(
        settings.num_classes, settings.test_size, settings.image_size, settings.channels,
        seed=settings.seed, sample_seed=settings.seed + 202,
    )
    return train, test


def subset(dataset: TensorDataset, size: int | None) -> TensorDataset:
    """First `size` samples of a dataset (all of them when size is None)."""
    if size is None or size >= len(dataset):
        return dataset
    return TensorDataset(*(tensor[:size] for tensor in dataset.tensors))


def augment(
    images: torch.Tensor,
    flip: bool,
    crop: bool,
    generator: torch.Generator,
    padding: int = 4,
) -> torch.Tensor:
    """Random horizontal flip and padded random crop, per sample."""
    if flip:
        mask = torch.rand(images.shape[0], generator=generator) < 0.5
        images = torch.where(mask[:, None, None, None], images.flip(-1), images)
    if crop:
        height, width = images.shape[-2:]
        padded = F.pad(images, (padding,) * 4, mode="reflect")
        offsets = torch.randint(0, 2 * padding + 1, (images.shape[0], 2), generator=generator)
        images = torch.stack([
            padded[i, :, top:top + height, left:left + width]
            for i, (top, left) in enumerate(offsets.tolist())
        ])
    return images
