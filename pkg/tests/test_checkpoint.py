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

import json
import struct

import pytest
import torch

from py_dder.exceptions import CheckpointError
from py_dder.harness.checkpoint import (
    MAGIC,
    checkpoint_tensors,
    load_checkpoint,
    read_checkpoint,
    save_checkpoint,
    stage_checkpoint_path,
)
from py_dder.pipeline import infer


def test_stage_checkpoint_path(tmp_path):
    """
    Tests the per-stage checkpoint naming.
    """
    assert stage_checkpoint_path(tmp_path, 3) == tmp_path / "checkpoints" / "stage_03.ckpt"


def test_file_layout(trained_run):
    """
    Tests the magic bytes, the header length and the sorted tensor table.
    """
    settings, _, _ = trained_run
    raw = stage_checkpoint_path(settings.out_dir, 2).read_bytes()
    assert raw[:8] == MAGIC
    (length,) = struct.unpack("<Q", raw[8:16])
    header = json.loads(raw[16 : 16 + length])
    names = [entry["name"] for entry in header["tensors"]]
    assert names == sorted(names)
    assert header["format_version"] == 1
    assert header["metadata"]["stages_done"] == 3
    assert any(name.startswith("router.fc1.2.") for name in names)
    assert any(name.startswith("pst.2.") for name in names)
    assert "asn.type.2" in names and "asn.ctx.2" in names
    assert "deu.2.indices" in names


def test_round_trip_is_bit_exact(trained_run, tmp_path):
    """
    Tests that every tensor survives save and load unchanged.
    """
    _, state, _ = trained_run
    path = tmp_path / "state.ckpt"
    save_checkpoint(state, path)
    restored = load_checkpoint(path)
    before, after = checkpoint_tensors(state), checkpoint_tensors(restored)
    assert sorted(before) == sorted(after)
    for name in before:
        assert torch.equal(before[name], after[name]), name
    assert restored.stages_done == state.stages_done
    assert restored.backbone.frozen
    assert restored.backbone.clean_accuracy == state.backbone.clean_accuracy


def test_save_load_save_is_byte_identical(trained_run, tmp_path):
    """
    Tests that a reloaded state writes the same file again.
    """
    settings, _, _ = trained_run
    original = stage_checkpoint_path(settings.out_dir, 2)
    copy = tmp_path / "copy.ckpt"
    save_checkpoint(load_checkpoint(original), copy)
    assert copy.read_bytes() == original.read_bytes()


def test_restored_state_predicts_identically(trained_run, tiny_data):
    """
    Tests that predictions with and without oracle routing survive a reload.
    """
    settings, state, _ = trained_run
    restored = load_checkpoint(stage_checkpoint_path(settings.out_dir, 2))
    images = tiny_data[1].tensors[0]
    assert torch.equal(infer(restored, images), infer(state, images))
    assert torch.equal(infer(restored, images, oracle=1), infer(state, images, oracle=1))


def test_restored_statistics_can_sample(trained_run):
    """
    Tests that restored feature statistics are finalized and usable.
    """
    settings, state, _ = trained_run
    restored = load_checkpoint(stage_checkpoint_path(settings.out_dir, 2))
    for stage, stats in state.stats.items():
        assert restored.stats[stage].finalized
        assert torch.equal(restored.stats[stage].factor, stats.factor)


def test_corrupted_blob_is_rejected(trained_run, tmp_path):
    """
    Tests that a flipped blob byte fails the digest check.
    """
    settings, _, _ = trained_run
    raw = bytearray(stage_checkpoint_path(settings.out_dir, 0).read_bytes())
    raw[-1] ^= 0x01
    path = tmp_path / "bad.ckpt"
    path.write_bytes(bytes(raw))
    with pytest.raises(CheckpointError, match="digest"):
        read_checkpoint(path)


def test_foreign_file_is_rejected(tmp_path):
    """
    Tests that a file without the magic prefix is refused.
    """
    path = tmp_path / "other.ckpt"
    path.write_bytes(b"not a checkpoint at all")
    with pytest.raises(CheckpointError):
        read_checkpoint(path)


def test_unknown_format_version_is_rejected(trained_run, tmp_path):
    """
    Tests the format version check.
    """
    settings, _, _ = trained_run
    raw = stage_checkpoint_path(settings.out_dir, 0).read_bytes()
    (length,) = struct.unpack("<Q", raw[8:16])
    header = json.loads(raw[16 : 16 + length])
    header["format_version"] = 99
    encoded = json.dumps(header).encode()
    path = tmp_path / "future.ckpt"
    path.write_bytes(MAGIC + struct.pack("<Q", len(encoded)) + encoded + raw[16 + length :])
    with pytest.raises(CheckpointError, match="version"):
        read_checkpoint(path)
