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

"""Shared fixtures: tiny configurations that train in seconds on a CPU."""
import os

import pytest
import torch

from py_dder.config import Settings
from py_dder.data import load_datasets


@pytest.fixture(autouse=True)
def clean_environment(monkeypatch):
    """Keeps DDER_* variables of the calling shell out of the tests."""
    for key in list(os.environ):
        if key.startswith("DDER_"):
            monkeypatch.delenv(key)


def make_tiny_settings(tmp_path, **overrides) -> Settings:
    """A 3-stage run on 8x8 images with small models everywhere."""
    values = dict(
        seed=0,
        num_classes=3,
        image_size=8,
        channels=3,
        train_size=48,
        test_size=24,
        feature_dim=16,
        pretrain_epochs=3,
        min_clean_accuracy=0.0,
        n_experts=4,
        top_k=2,
        rank=2,
        epochs=2,
        batch_size=16,
        context_length=2,
        embed_dim=8,
        text_hidden=8,
        asn_epochs=2,
        pseudo_per_stage=8,
        sequence=["clean", "fgsm", "pgd"],
        steps=2,
        cache_dir=tmp_path / "cache",
        out_dir=tmp_path / "runs",
    )
    values.update(overrides)
    return Settings(**values)


@pytest.fixture
def tiny_settings(tmp_path) -> Settings:
    """Provides the tiny default configuration."""
    return make_tiny_settings(tmp_path)


@pytest.fixture
def tiny_data(tiny_settings):
    """Provides the synthetic train and test splits of the tiny configuration."""
    return load_datasets(tiny_settings)


@pytest.fixture
def generator() -> torch.Generator:
    """A seeded torch generator."""
    return torch.Generator().manual_seed(1234)


@pytest.fixture
def settings_factory(tmp_path):
    """Builds tiny configurations with per-test overrides."""
    return lambda **overrides: make_tiny_settings(tmp_path, **overrides)


@pytest.fixture(scope="session")
def trained_run(tmp_path_factory):
    """A finished tiny run of the full method, shared by tests that only read it."""
    from py_dder.pipeline import run_sequence

    with pytest.MonkeyPatch.context() as patch:
        for key in list(os.environ):
            if key.startswith("DDER_"):
                patch.delenv(key)
        settings = make_tiny_settings(tmp_path_factory.mktemp("trained"))
        state, results = run_sequence(settings)
    return settings, state, results
