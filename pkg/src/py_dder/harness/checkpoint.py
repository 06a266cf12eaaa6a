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
"""Single-file checkpoints: a JSON manifest followed by a blob of little-endian tensors.

File layout::

    b"DDERCKPT" | manifest length (u64, little endian) | manifest JSON | blob

The manifest lists every tensor by name, shape, dtype, offset and length
inside the blob, carries the SHA-256 of the blob, the config echo and the
seeds. Tensors are stored in sorted name order.
"""

import hashlib
import json
import logging
import re
import struct
from pathlib import Path

import numpy as np
import torch
from pydantic import ValidationError

from ..config import Settings
from ..drde import FusionSnapshot
from ..exceptions import CheckpointError
from ..models import CheckpointManifest, TensorEntry
from ..pipeline import CATState
from ..pst import TaskFeatureStats
from ..utils import AtomicWriter, tensor_bytes

logger = logging.getLogger(__name__)

MAGIC = b"DDERCKPT"
FORMAT_VERSION = 1

_DTYPE_NAMES = {torch.float32: "float32", torch.float64: "float64", torch.int64: "int64"}
_NUMPY = {"float32": "<f4", "float64": "<f8", "int64": "<i8"}
_TORCH = {"float32": torch.float32, "float64": torch.float64, "int64": torch.int64}


def stage_checkpoint_path(out_dir: str | Path, stage: int) -> Path:
    return Path(out_dir) / "checkpoints" / f"stage_{stage:02d}.ckpt"


def checkpoint_tensors(state: CATState) -> dict[str, torch.Tensor]:
    """Every persisted tensor of a state under its checkpoint name."""
    tensors: dict[str, torch.Tensor] = {}
    for name, tensor in state.backbone.state_dict().items():
        tensors[f"backbone.{name}"] = tensor
    tensors.update(state.model.bank.named_factors())
    for stage in state.model.routers.stages:
        tensors.update(state.model.routers.named_stage_tensors(stage))
    tensors.update(state.prompts.named_stage_tensors())
    for name, tensor in state.text_map.state_dict().items():
        tensors[f"asn.map.{name}"] = tensor
    for stage in sorted(state.stats):
        tensors.update(state.stats[stage].state())
    for stage in sorted(state.snapshots):
        tensors.update(state.snapshots[stage].named_tensors())
    return {name: tensor.detach().cpu() for name, tensor in tensors.items()}


def _metadata(state: CATState) -> dict:
    return {
        "stages_done": state.stages_done,
        "frozen": state.backbone.frozen,
        "clean_accuracy": state.backbone.clean_accuracy,
        "pst": {str(stage): stats.metadata() for stage, stats in sorted(state.stats.items())},
    }


def save_checkpoint(state: CATState, path: str | Path) -> CheckpointManifest:
    """Write a state atomically and return its manifest."""
    tensors = checkpoint_tensors(state)
    entries: list[TensorEntry] = []
    chunks: list[bytes] = []
    offset = 0
    for name in sorted(tensors):
        tensor = tensors[name]
        if tensor.dtype not in _DTYPE_NAMES:
            msg = f"Tensor {name} has unsupported dtype {tensor.dtype}"
            raise CheckpointError(msg)
        data = tensor_bytes(tensor)
        entries.append(
            TensorEntry(name=name, shape=list(tensor.shape), dtype=_DTYPE_NAMES[tensor.dtype], offset=offset, length=len(data)),
        )
        chunks.append(data)
        offset += len(data)
    blob = b"".join(chunks)
    settings = state.settings
    manifest = CheckpointManifest(
        format_version=FORMAT_VERSION,
        tensors=entries,
        digest=hashlib.sha256(blob).hexdigest(),
        config=settings.echo(),
        seeds={"seed": settings.seed, "text_map_seed": settings.text_map_seed},
        metadata=_metadata(state),
    )
    header = json.dumps(manifest.model_dump(mode="json"), sort_keys=True, separators=(",", ":")).encode()
    with AtomicWriter(path, "wb") as handle:
        handle.write(MAGIC)
        handle.write(struct.pack("<Q", len(header)))
        handle.write(header)
        handle.write(blob)
    logger.info("Saved checkpoint %s (%d tensors, %d bytes)", path, len(entries), len(blob))
    return manifest


def read_checkpoint(path: str | Path) -> tuple[CheckpointManifest, dict[str, torch.Tensor]]:
    """Parse and verify a checkpoint file into its manifest and named tensors."""
    raw = Path(path).read_bytes()
    prefix = len(MAGIC) + 8
    if len(raw) < prefix or raw[: len(MAGIC)] != MAGIC:
        msg = f"{path} is not a checkpoint file"
        raise CheckpointError(msg)
    (length,) = struct.unpack("<Q", raw[len(MAGIC) : prefix])
    try:
        manifest = CheckpointManifest.model_validate_json(raw[prefix : prefix + length])
    except ValidationError as exc:
        msg = f"Invalid checkpoint manifest in {path}"
        raise CheckpointError(msg) from exc
    if manifest.format_version != FORMAT_VERSION:
        msg = f"Checkpoint format version {manifest.format_version} is not supported (expected {FORMAT_VERSION})"
        raise CheckpointError(msg)
    blob = raw[prefix + length :]
    if hashlib.sha256(blob).hexdigest() != manifest.digest:
        msg = f"Checkpoint digest mismatch in {path}"
        raise CheckpointError(msg)

    tensors = {}
    for entry in manifest.tensors:
        if entry.offset + entry.length > len(blob):
            msg = f"Tensor {entry.name} extends past the end of the blob"
            raise CheckpointError(msg)
        array = np.frombuffer(blob, dtype=_NUMPY[entry.dtype], count=int(np.prod(entry.shape, dtype=np.int64)), offset=entry.offset)
        tensors[entry.name] = torch.from_numpy(array.copy()).reshape(entry.shape).to(_TORCH[entry.dtype])
    return manifest, tensors


def _stages(tensors: dict[str, torch.Tensor], pattern: str) -> list[int]:
    regex = re.compile(pattern)
    return sorted({int(match.group(1)) for name in tensors if (match := regex.fullmatch(name))})


def load_checkpoint(path: str | Path, device: torch.device | str = "cpu") -> CATState:
    """Rebuild a state from a checkpoint; tensors come back bit for bit."""
    manifest, tensors = read_checkpoint(path)
    settings = Settings(**manifest.config)
    state = CATState.create(settings)
    metadata = manifest.metadata

    with torch.no_grad():
        backbone_state = {name.removeprefix("backbone."): t for name, t in tensors.items() if name.startswith("backbone.")}
        state.backbone.load_state_dict(backbone_state)
        if metadata.get("frozen"):
            state.backbone.freeze()
        state.backbone.clean_accuracy = metadata.get("clean_accuracy")

        bank = state.model.bank
        for point in bank.points:
            for index in range(bank.n):
                bank.down[point][index].copy_(tensors[f"expert.{point}.{index}.down"])
                bank.up[point][index].copy_(tensors[f"expert.{point}.{index}.up"])

        point = next(iter(bank.points))
        for stage in _stages(tensors, rf"router\.{point}\.(\d+)\.weight"):
            for router_point, router in state.model.routers.add(stage).items():
                router.weight.copy_(tensors[f"router.{router_point}.{stage}.weight"])
                if router.bias is not None:
                    router.bias.copy_(tensors[f"router.{router_point}.{stage}.bias"])

        for stage in _stages(tensors, r"asn\.type\.(\d+)"):
            state.prompts.register_stage(stage, seed=settings.seed)
            state.prompts.types[str(stage)].copy_(tensors[f"asn.type.{stage}"])
        for key in state.prompts.ctx:
            state.prompts.ctx[key].copy_(tensors[f"asn.ctx.{key}"])
        state.text_map.load_state_dict({
            name.removeprefix("asn.map."): t for name, t in tensors.items() if name.startswith("asn.map.")
        })

    for stage_key, stats_meta in metadata.get("pst", {}).items():
        stage = int(stage_key)
        spread = tensors.get(f"pst.{stage}.var", tensors.get(f"pst.{stage}.cov"))
        if spread is None:
            msg = f"Checkpoint lacks the spread tensor of stage {stage}"
            raise CheckpointError(msg)
        state.stats[stage] = TaskFeatureStats.restore(stage, tensors[f"pst.{stage}.mean"], spread, stats_meta)

    for stage in _stages(tensors, r"deu\.(\d+)\.indices"):
        indices = tuple(int(i) for i in tensors[f"deu.{stage}.indices"].tolist())
        state.snapshots[stage] = FusionSnapshot(
            stage=stage,
            indices=indices,
            down={p: tensors[f"deu.{stage}.{p}.down"] for p in bank.points},
            up={p: tensors[f"deu.{stage}.{p}.up"] for p in bank.points},
        )

    state.stages_done = int(metadata.get("stages_done", 0))
    logger.info("Loaded checkpoint %s (%d stages)", path, state.stages_done)
    return state.to(device)
