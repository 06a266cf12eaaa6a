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

import pytest
import torch
import torch.nn.functional as F

from py_dder.asn import (
    ASNConfig,
    PromptState,
    TextFeatureMap,
    all_text_features,
    asn_logits,
    build_prompt,
    heldout_rows,
    select_router,
    train_asn,
)
from py_dder.exceptions import CoverageError, DataError, ShapeError, StageOrderError
from py_dder.pst import PseudoBatch, TaskFeatureStats, finalize, pseudo_batch, sample_features

DIM = 8


@pytest.fixture
def text_map() -> TextFeatureMap:
    """A frozen text map for prompts of two context vectors plus the anchor."""
    return TextFeatureMap(embed_dim=8, out_dim=DIM, length=3, hidden=16, seed=7)


def _prompts(stages: int, **kwargs) -> PromptState:
    prompts = PromptState(context_length=2, embed_dim=8, **kwargs)
    for stage in range(stages):
        prompts.register_stage(stage, seed=3)
    return prompts


def _cluster(center: int, count: int, generator: torch.Generator) -> torch.Tensor:
    features = torch.randn(count, DIM, generator=generator)
    features[:, center] += 4.25
    return features


def test_text_map_is_frozen_and_seeded(text_map):
    """
    Tests that the text map has no trainable parameters and depends only on its seed.
    """
    assert list(text_map.parameters()) == []
    twin = TextFeatureMap(embed_dim=8, out_dim=DIM, length=3, hidden=16, seed=7)
    assert twin.param_hash() == text_map.param_hash()
    assert TextFeatureMap(embed_dim=8, out_dim=DIM, length=3, hidden=16, seed=8).param_hash() != text_map.param_hash()


def test_text_features_are_unit_vectors(text_map):
    """
    Tests that each stage text feature has unit norm.
    """
    features = all_text_features(_prompts(3), text_map)
    assert features.shape == (3, DIM)
    assert torch.allclose(features.norm(dim=-1), torch.ones(3), atol=1e-6)


def test_text_map_rejects_wrong_prompt_shape(text_map):
    """
    Tests the prompt geometry check.
    """
    with pytest.raises(ShapeError):
        text_map(torch.zeros(4, 8))


def test_prompt_layout():
    """
    Tests that a prompt is the stage context followed by the stage anchor.
    """
    prompts = _prompts(2)
    prompt = build_prompt(prompts, 1)
    assert prompt.shape == (3, 8)
    assert torch.equal(prompt[:2], prompts.ctx["1"])
    assert torch.equal(prompt[2], prompts.types["1"])
    assert not prompts.types["1"].requires_grad
    with pytest.raises(StageOrderError):
        build_prompt(prompts, 2)


def test_register_stage_in_order_only():
    """
    Tests that stages are registered consecutively from zero.
    """
    prompts = _prompts(1)
    with pytest.raises(StageOrderError):
        prompts.register_stage(2)


def test_shared_context_is_reused():
    """
    Tests that shared mode keeps a single context for every stage.
    """
    prompts = _prompts(3, shared=True)
    assert list(prompts.ctx) == ["shared"]
    assert [name for name, _ in prompts.named_stage_tensors()] == ["asn.type.0", "asn.type.1", "asn.type.2", "asn.ctx.shared"]


def test_logits_are_scaled_cosines():
    """
    Tests that logits equal cosine similarity over the temperature.
    """
    image = torch.tensor([[3.0, 0.0]])
    stages = torch.tensor([[1.0, 0.0], [0.0, 2.0]])
    assert torch.allclose(asn_logits(image, stages, 0.5), torch.tensor([[2.0, 0.0]]))


def test_logits_reject_zero_norm_features():
    """
    Tests that a zero image feature is rejected.
    """
    with pytest.raises(DataError):
        asn_logits(torch.zeros(1, 2), torch.eye(2))
    with pytest.raises(StageOrderError):
        asn_logits(torch.ones(1, 2), torch.zeros(0, 2))


def test_select_router_takes_first_maximum():
    """
    Tests argmax selection with ties going to the lowest stage.
    """
    assert select_router(torch.tensor([[0.1, 0.7, 0.7], [0.9, 0.0, 0.9]])).tolist() == [1, 0]


def test_single_stage_training_is_skipped(text_map, generator):
    """
    Tests that a lone stage needs no sentinel training.
    """
    prompts = _prompts(1)
    before = prompts.ctx["0"].detach().clone()
    fit = train_asn(prompts, text_map, _cluster(0, 10, generator), 0, None, ASNConfig(epochs=3))
    assert fit.train_loss == []
    assert torch.equal(prompts.ctx["0"], before)


def test_training_needs_replay_of_past_stages(text_map, generator):
    """
    Tests that later stages need pseudo features covering every earlier stage.
    """
    prompts = _prompts(3)
    real = _cluster(2, 10, generator)
    with pytest.raises(CoverageError):
        train_asn(prompts, text_map, real, 2, None, ASNConfig(epochs=1))
    partial = PseudoBatch(torch.zeros(4, DIM) + 1.0, torch.zeros(4, dtype=torch.long))
    with pytest.raises(CoverageError):
        train_asn(prompts, text_map, real, 2, lambda: partial, ASNConfig(epochs=1))


def test_training_requires_registered_stage(text_map, generator):
    """
    Tests that a stage must have its prompt before training.
    """
    with pytest.raises(StageOrderError):
        train_asn(_prompts(1), text_map, _cluster(0, 4, generator), 1, None, ASNConfig(epochs=1), require_replay=False)


def test_sentinel_separates_stages_from_pseudo_replay(text_map, generator):
    """
    Tests that replayed Gaussian features teach the sentinel to tell two stages apart.
    """
    prompts = _prompts(2)
    past = finalize(TaskFeatureStats(0, DIM).update(_cluster(0, 200, generator)))
    real = _cluster(1, 60, generator)
    config = ASNConfig(epochs=50, lr=1e-2, batch_size=16, heldout_fraction=0.2, seed=1)

    fit = train_asn(prompts, text_map, real, 1, lambda: sample_features(past, 60, generator), config)

    assert fit.heldout_loss[-1] < fit.heldout_loss[0]
    queries = torch.cat([_cluster(0, 50, generator), _cluster(1, 50, generator)])
    truth = torch.cat([torch.zeros(50, dtype=torch.long), torch.ones(50, dtype=torch.long)])
    with torch.no_grad():
        chosen = select_router(asn_logits(queries, all_text_features(prompts, text_map), config.temperature))
    assert (chosen == truth).float().mean() >= 0.95


def test_heldout_rows_sample_every_label(generator):
    """
    Tests that the held-out split takes the same share of each label.
    """
    labels = torch.cat([torch.full((40,), stage, dtype=torch.long) for stage in range(4)])
    rows = heldout_rows(labels, 0.1, generator)
    assert torch.bincount(labels[rows]).tolist() == [4, 4, 4, 4]
    assert len(set(rows.tolist())) == rows.shape[0]
    assert heldout_rows(labels[:3], 0.1, generator).shape == (1,)
    assert heldout_rows(labels, 0.0, generator).shape == (0,)


def test_heldout_loss_covers_every_past_stage(text_map, generator, monkeypatch):
    """
    Tests that the held-out loss at stage 2 is measured on every stage label.
    """
    prompts = _prompts(3)
    stats = {
        stage: finalize(TaskFeatureStats(stage, DIM).update(_cluster(stage, 100, generator)))
        for stage in range(2)
    }
    seen = []
    cross_entropy = F.cross_entropy

    def spy(logits, targets, *args, **kwargs):
        if not torch.is_grad_enabled():
            seen.append(targets.clone())
        return cross_entropy(logits, targets, *args, **kwargs)

    monkeypatch.setattr(F, "cross_entropy", spy)
    train_asn(
        prompts, text_map, _cluster(2, 40, generator), 2,
        lambda: pseudo_batch(stats, 2, 64, generator), ASNConfig(epochs=1, seed=2),
    )

    assert seen
    assert sorted(set(seen[0].tolist())) == [0, 1, 2]


def test_freeze_past_keeps_earlier_contexts(text_map, generator):
    """
    Tests that only the current stage's context moves when past contexts are frozen.
    """
    prompts = _prompts(2)
    before = prompts.ctx["0"].detach().clone()
    past = PseudoBatch(_cluster(0, 8, generator), torch.zeros(8, dtype=torch.long))
    train_asn(prompts, text_map, _cluster(1, 8, generator), 1, lambda: past, ASNConfig(epochs=2, freeze_past=True))
    assert torch.equal(prompts.ctx["0"], before)


def test_context_gradient_matches_central_differences(generator):
    """
    Tests the analytic context-vector gradient in double precision.
    """
    text_map = TextFeatureMap(embed_dim=8, out_dim=DIM, length=3, hidden=16, seed=7).double()
    prompts = _prompts(2).double()
    features = _cluster(1, 6, generator).double()
    targets = torch.tensor([0, 1, 1, 0, 1, 1])

    def loss() -> torch.Tensor:
        return F.cross_entropy(asn_logits(features, all_text_features(prompts, text_map), 0.5), targets)

    context = prompts.ctx["1"]
    (analytic,) = torch.autograd.grad(loss(), context)
    numeric = torch.zeros_like(analytic)
    h = 1e-6
    with torch.no_grad():
        for index in range(context.numel()):
            original = context.view(-1)[index].item()
            context.view(-1)[index] = original + h
            up = loss().item()
            context.view(-1)[index] = original - h
            down = loss().item()
            context.view(-1)[index] = original
            numeric.view(-1)[index] = (up - down) / (2 * h)
    relative = (analytic - numeric).norm() / numeric.norm()
    assert float(relative) < 1e-4


def test_selection_ignores_feature_scale(text_map, generator):
    """
    Tests that positive rescaling of image features never changes the chosen stage.
    """
    stage_features = all_text_features(_prompts(3), text_map).detach()
    features = torch.randn(16, DIM, generator=generator)
    baseline = select_router(asn_logits(features, stage_features))
    scales = torch.rand(1000, generator=generator) * 100 + 1e-3
    for scale in scales.tolist():
        assert torch.equal(select_router(asn_logits(features * scale, stage_features)), baseline)
