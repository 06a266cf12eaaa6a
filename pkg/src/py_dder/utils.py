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
"""Utility functions for the application."""

import hashlib
import logging
import os
import random
import tempfile
import types
from collections.abc import Iterable, Mapping
from pathlib import Path
from typing import IO

import numpy as np
import torch

logger = logging.getLogger(__name__)

_NUMPY_DTYPES = {
    torch.float32: np.dtype("<f4"),
    torch.float64: np.dtype("<f8"),
    torch.int64: np.dtype("<i8"),
}


def seed_everything(seed: int) -> None:
    """Seed python, numpy and torch, and ask torch for deterministic kernels."""
    random.seed(seed)
    np.random.seed(seed)
    torch.manual_seed(seed)
    torch.use_deterministic_algorithms(True, warn_only=True)


def tensor_bytes(tensor: torch.Tensor) -> bytes:
    """Little-endian bytes of a tensor in row-major order."""
    array = tensor.detach().cpu().contiguous().numpy()
    return array.astype(_NUMPY_DTYPES[tensor.dtype], copy=False).tobytes()


def digest_tensors(named: Iterable[tuple[str, torch.Tensor]]) -> str:
    """SHA-256 over names, shapes and bytes of tensors, in the order given."""
    sha = hashlib.sha256()
    for name, tensor in named:
        sha.update(name.encode())
        sha.update(str(tuple(tensor.shape)).encode())
        sha.update(tensor_bytes(tensor))
    return sha.hexdigest()


def module_digest(module: torch.nn.Module) -> str:
    """Digest of every parameter and buffer of a module, sorted by name."""
    state = module.state_dict()
    return digest_tensors((name, state[name]) for name in sorted(state))


def mapping_digest(tensors: Mapping[str, torch.Tensor]) -> str:
    """Digest of a name → tensor mapping, sorted by name."""
    return digest_tensors((name, tensors[name]) for name in sorted(tensors))


class AtomicWriter:
    """Write a file through a temporary sibling and rename it into place.

    Used as a context manager: the rename happens when the block exits cleanly,
    and the temporary file is removed if the block raises.
    """

    def __init__(self, path: str | Path, mode: str = "wb") -> None:
        """Remember the destination; nothing touches the disk until entry."""
        self.path = Path(path)
        self.mode = mode
        self.handle: IO | None = None
        self._tmp_name: str | None = None

    def __enter__(self) -> IO:
        """Open the temporary file next to the destination."""
        self.path.parent.mkdir(parents=True, exist_ok=True)
        fd, self._tmp_name = tempfile.mkstemp(
            dir=self.path.parent, prefix=f".{self.path.name}.", suffix=".tmp",
        )
        self.handle = os.fdopen(fd, self.mode)
        return self.handle

    def __exit__(
        self,
        exc_type: type[BaseException] | None,
        exc_val: BaseException | None,
        exc_tb: types.TracebackType | None,
    ) -> None:
        """Commit the file on success or discard it on error."""
        if not self.handle or not self._tmp_name:
            return
        try:
            self.handle.close()
            if exc_type:
                os.unlink(self._tmp_name)
            else:
                os.replace(self._tmp_name, self.path)
        finally:
            self.handle = None
            self._tmp_name = None


def resolve_device(name: str) -> torch.device:
    """Map a configured device name to a torch device, falling back to CPU."""
    if name.startswith("cuda") and not torch.cuda.is_available():
        logger.warning("CUDA is not available; running on the CPU")
        return torch.device("cpu")
    return torch.device(name)
