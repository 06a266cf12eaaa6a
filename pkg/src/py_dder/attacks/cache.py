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
"""Pre-generated adversarial datasets for each training stage, cached on disk.

A cache entry is two files per (stage, spec) pair: a binary blob of
little-endian float32 images followed by int64 labels, and a JSON provenance
manifest. Both are written atomically.
"""

import hashlib
import json
import logging
from datetime import datetime, timezone
from pathlib import Path

import numpy as np
import torch
from pydantic import ValidationError
from torch import nn
from torch.utils.data import DataLoader, TensorDataset

from ..exceptions import AttackError, ProvenanceError
from ..models import AttackSpec, Provenance
from ..utils import AtomicWriter, digest_tensors, module_digest, tensor_bytes
from .base import Classifier
from .gradient import build_attack, perturbation_norm

logger = logging.getLogger(__name__)
UTC = timezone.utc

# Float32 slack on top of the budget when checking generated samples.
BUDGET_TOLERANCE = 1e-6


class AdversarialDataset(TensorDataset):
    """Perturbed images with their original labels and a provenance record."""

    def __init__(self, images: torch.Tensor, labels: torch.Tensor, provenance: Provenance) -> None:
        super().__init__(images, labels)
        self.provenance = provenance

    @property
    def images(self) -> torch.Tensor:
        return self.tensors[0]

    @property
    def labels(self) -> torch.Tensor:
        return self.tensors[1]


def cache_key(spec: AttackSpec, model_digest: str, stage: int, data_digest: str) -> str:
    """Identity of a cache entry: the attack spec (seed included), the attacked model and the clean data."""
    payload = json.dumps(
        {"spec": spec.model_dump(mode="json"), "model": model_digest, "stage": stage, "data": data_digest},
        sort_keys=True,
    )
    return hashlib.sha256(payload.encode()).hexdigest()


def check_budget(clean: torch.Tensor, adversarial: torch.Tensor, spec: AttackSpec) -> None:
    """Raise AttackError when a sample leaves [0, 1] or its epsilon-ball."""
    if adversarial.numel() == 0:
        return
    if adversarial.min() < 0.0 or adversarial.max() > 1.0:
        msg = f"{spec.label} produced pixels outside [0, 1]"
        raise AttackError(msg)
    if spec.name == "clean":
        return
    worst = float(perturbation_norm(clean.double(), adversarial.double(), spec.norm).max())
    if worst > spec.epsilon + BUDGET_TOLERANCE:
        msg = f"{spec.label} exceeded its budget: {worst:.3e} > {spec.epsilon:.3e}"
        raise AttackError(msg)


def check_provenance(dataset: AdversarialDataset, spec: AttackSpec, stage: int) -> None:
    """Ensure a dataset was generated for this stage's spec."""
    if dataset.provenance.spec != spec or dataset.provenance.stage != stage:
        msg = (
            f"Dataset was generated for stage {dataset.provenance.stage} ({dataset.provenance.spec.label}), "
            f"not stage {stage} ({spec.label})"
        )
        raise ProvenanceError(msg)


def _perturb_all(
    model: Classifier,
    clean: TensorDataset,
    spec: AttackSpec,
    batch_size: int,
    device: torch.device | str,
) -> torch.Tensor:
    attack = build_attack(spec)
    generator = torch.Generator().manual_seed(spec.seed)
    was_training = isinstance(model, nn.Module) and model.training
    if isinstance(model, nn.Module):
        model.eval()
    try:
        parts = []
        for images, labels in DataLoader(clean, batch_size=batch_size, shuffle=False):
            adversarial = attack(model, images.to(device), labels.to(device), generator)
            parts.append(adversarial.detach().cpu())
    finally:
        if was_training:
            model.train()  # type: ignore[union-attr]
    if not parts:
        return clean.tensors[0][:0].clone()
    return torch.cat(parts)


def _write_entry(blob_path: Path, manifest_path: Path, images: torch.Tensor, labels: torch.Tensor, provenance: Provenance) -> None:
    with AtomicWriter(blob_path, "wb") as handle:
        handle.write(tensor_bytes(images.to(torch.float32)))
        handle.write(tensor_bytes(labels.to(torch.int64)))
    with AtomicWriter(manifest_path, "w") as handle:
        handle.write(provenance.model_dump_json(indent=2))


def _read_entry(blob_path: Path, manifest_path: Path) -> AdversarialDataset | None:
    """Load a cache entry, or return None (with a warning) when it is stale or damaged."""
    try:
        provenance = Provenance.model_validate_json(manifest_path.read_text())
        blob = blob_path.read_bytes()
    except (OSError, ValidationError) as exc:
        logger.warning("Unreadable attack cache entry %s (%s); regenerating", manifest_path, exc)
        return None
    if hashlib.sha256(blob).hexdigest() != provenance.blob_sha256:
        logger.warning("Attack cache digest mismatch for %s; regenerating", blob_path)
        return None
    shape = [provenance.num_samples, *provenance.image_shape]
    image_bytes = int(np.prod(shape)) * 4
    if len(blob) != image_bytes + provenance.num_samples * 8:
        logger.warning("Attack cache blob %s has the wrong size; regenerating", blob_path)
        return None
    images = np.frombuffer(blob, dtype="<f4", count=int(np.prod(shape))).reshape(shape)
    labels = np.frombuffer(blob, dtype="<i8", offset=image_bytes, count=provenance.num_samples)
    return AdversarialDataset(
        torch.from_numpy(images.astype(np.float32)),
        torch.from_numpy(labels.astype(np.int64)),
        provenance,
    )


def generate_stage_dataset(
    model: Classifier,
    clean_data: TensorDataset,
    spec: AttackSpec,
    cache_dir: str | Path | None = None,
    stage: int = 0,
    model_digest: str | None = None,
    batch_size: int = 256,
    device: torch.device | str = "cpu",
) -> AdversarialDataset:
    """Build (or load from cache) the adversarial version of `clean_data` for one stage.

    Args:
        model: Snapshot to attack; it is not modified.
        clean_data: Clean images and labels.
        spec: Attack to apply. `clean` copies the data through.
        cache_dir: Directory for cache entries; None disables caching.
        stage: Stage id recorded in the provenance.
        model_digest: Identity of the snapshot. Defaults to the module digest;
                      plain callables without one are never cached.
        batch_size: Attack batch size.
        device: Device the attack runs on.

    """
    images, labels = clean_data.tensors[0], clean_data.tensors[1]
    if model_digest is None:
        model_digest = module_digest(model) if isinstance(model, nn.Module) else ""
    data_digest = digest_tensors([("images", images), ("labels", labels)])
    key = cache_key(spec, model_digest, stage, data_digest)

    blob_path = manifest_path = None
    if cache_dir is not None and model_digest:
        stem = f"stage{stage:02d}-{spec.name}-{spec.norm}-{key[:16]}"
        blob_path = Path(cache_dir) / f"{stem}.bin"
        manifest_path = Path(cache_dir) / f"{stem}.json"
        if manifest_path.exists():
            cached = _read_entry(blob_path, manifest_path)
            if cached is not None:
                logger.info("Loaded stage %d %s dataset from cache (%d samples)", stage, spec.label, len(cached))
                return cached

    adversarial = _perturb_all(model, clean_data, spec, batch_size, device)
    check_budget(images, adversarial, spec)
    labels = labels.clone()
    blob = tensor_bytes(adversarial.to(torch.float32)) + tensor_bytes(labels.to(torch.int64))
    provenance = Provenance(
        spec=spec,
        stage=stage,
        model_digest=model_digest,
        seed=spec.seed,
        num_samples=len(labels),
        image_shape=list(images.shape[1:]),
        blob_sha256=hashlib.sha256(blob).hexdigest(),
        created_at_utc=datetime.now(UTC),
    )
    if blob_path is not None and manifest_path is not None:
        _write_entry(blob_path, manifest_path, adversarial, labels, provenance)
        logger.info("Cached stage %d %s dataset at %s", stage, spec.label, blob_path)
    return AdversarialDataset(adversarial, labels, provenance)
