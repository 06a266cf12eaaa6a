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

"""Desk-scale experiments. Slow; run with `pytest -m integration`."""
import pytest

from py_dder.config import Settings
from py_dder.data import load_datasets
from py_dder.harness.checkpoint import stage_checkpoint_path
from py_dder.harness.evaluation import evaluate_matrix, past_attack_accuracy
from py_dder.pipeline import run_sequence

pytestmark = pytest.mark.integration


def _desk_settings(tmp_path, variant: str) -> Settings:
    return Settings(
        seed=0,
        num_classes=10,
        image_size=32,
        train_size=5000,
        test_size=1000,
        pretrain_epochs=15,
        epochs=10,
        asn_epochs=10,
        sequence=["clean", "fgsm", "pgd"],
        steps=20,
        variant=variant,
        cache_dir=tmp_path / "cache",
        out_dir=tmp_path / variant,
    )


def _matrix(settings: Settings):
    run_sequence(settings)
    _, test = load_datasets(settings)
    checkpoints = {stage: stage_checkpoint_path(settings.out_dir, stage) for stage in range(3)}
    return evaluate_matrix(checkpoints, test, settings.attack_sequence, "transfer")


def test_routing_limits_forgetting_of_earlier_attacks(tmp_path):
    """
    Tests that the baseline forgets FGSM robustness after PGD training and the full method forgets less.
    """
    baseline = _matrix(_desk_settings(tmp_path, "a")).column("fgsm:linf")
    full = _matrix(_desk_settings(tmp_path, "e")).column("fgsm:linf")
    baseline_drop = baseline[1] - baseline[2]
    full_drop = full[1] - full[2]
    assert baseline_drop >= 0.10
    assert full_drop <= baseline_drop - 0.10


def test_full_method_beats_shared_router_on_past_attacks(tmp_path):
    """
    Tests that every ablation runs and the full method keeps past attacks at least as well as one shared router.
    """
    scores = {variant: past_attack_accuracy(_matrix(_desk_settings(tmp_path, variant))) for variant in "bcde"}
    assert scores["e"] >= scores["b"]
