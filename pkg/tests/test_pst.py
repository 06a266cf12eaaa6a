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

import logging

import pytest
import torch

from py_dder.exceptions import CoverageError, ShapeError, StatsError
from py_dder.pst import TaskFeatureStats, finalize, gaussian_log_likelihood, pseudo_batch, sample_features


def _streamed(data: torch.Tensor, mode: str = "diagonal", chunk: int = 13) -> TaskFeatureStats:
    stats = TaskFeatureStats(0, data.shape[1], mode=mode)
    for part in data.split(chunk):
        stats.update(part)
    return stats


@pytest.mark.parametrize("mode", ["diagonal", "full"])
def test_streaming_moments_match_one_shot(generator, mode):
    """
    Tests that chunked updates reproduce the population mean and (co)variance.
    """
    data = torch.randn(300, 5, generator=generator, dtype=torch.float64) * 2.0 + 0.7
    stats = _streamed(data, mode)
    assert stats.count == 300
    assert torch.allclose(stats.mean, data.mean(dim=0), atol=1e-10, rtol=0)
    centered = data - data.mean(dim=0)
    expected = (centered**2).mean(dim=0) if mode == "diagonal" else centered.T @ centered / 300
    assert torch.allclose(stats.var, expected, atol=1e-10, rtol=0)


def test_state_size_does_not_grow_with_samples(generator):
    """
    Tests that persisted statistics are O(d) in diagonal mode.
    """
    stats = _streamed(torch.randn(1000, 4, generator=generator))
    assert {name: tuple(t.shape) for name, t in stats.state().items()} == {"pst.0.mean": (4,), "pst.0.var": (4,)}


def test_update_rejects_wrong_dimension():
    """
    Tests the feature-dimension check.
    """
    with pytest.raises(ShapeError):
        TaskFeatureStats(0, 4).update(torch.zeros(2, 5))


def test_ema_mode_follows_recent_batches():
    """
    Tests that EMA statistics move toward the latest batches.
    """
    stats = TaskFeatureStats(0, 2, ema=True, momentum=0.5)
    stats.update(torch.zeros(4, 2))
    stats.update(torch.full((4, 2), 2.0))
    assert torch.equal(stats.mean, torch.tensor([1.0, 1.0], dtype=torch.float64))
    assert stats.count == 8


def test_finalize_requires_enough_observations():
    """
    Tests the minimum sample counts of both modes.
    """
    with pytest.raises(StatsError):
        finalize(TaskFeatureStats(0, 3).update(torch.zeros(1, 3)))
    with pytest.raises(StatsError):
        finalize(TaskFeatureStats(0, 3, mode="full").update(torch.rand(3, 3)))


def test_finalized_stats_reject_updates(generator):
    """
    Tests that a finalized record is immutable.
    """
    stats = finalize(_streamed(torch.randn(10, 3, generator=generator)))
    with pytest.raises(StatsError):
        stats.update(torch.zeros(1, 3))


def test_sampling_requires_finalize(generator):
    """
    Tests that an open record cannot be sampled.
    """
    with pytest.raises(StatsError):
        sample_features(_streamed(torch.randn(10, 3, generator=generator)), 4)


@pytest.mark.parametrize("mode", ["diagonal", "full"])
def test_zero_draw_returns_the_mean(generator, mode):
    """
    Tests that z = 0 yields the stored mean exactly.
    """
    stats = finalize(_streamed(torch.randn(50, 3, generator=generator, dtype=torch.float64), mode))
    batch = sample_features(stats, 2, z=torch.zeros(2, 3))
    assert torch.equal(batch.features, stats.mean.expand(2, 3))
    assert batch.labels.tolist() == [0, 0]


def test_full_samples_recover_covariance(generator):
    """
    Tests that full-mode samples reproduce the stored covariance.
    """
    mix = torch.tensor([[1.0, 0.0, 0.0], [0.8, 0.6, 0.0], [0.0, 0.5, 1.0]], dtype=torch.float64)
    data = torch.randn(5000, 3, generator=generator, dtype=torch.float64) @ mix.T
    stats = finalize(_streamed(data, "full", chunk=500))
    samples = sample_features(stats, 50000, generator).features
    assert torch.allclose(torch.cov(samples.T, correction=0), stats.var, atol=0.05)


def test_singular_covariance_gets_jitter(caplog):
    """
    Tests that a rank-deficient covariance is factorized with a logged jitter.
    """
    alternating = (torch.arange(20) % 2).to(torch.float64)
    data = torch.stack([alternating, alternating], dim=1)
    with caplog.at_level(logging.WARNING):
        stats = finalize(_streamed(data, "full", chunk=20))
    assert stats.factor is not None and torch.isfinite(stats.factor).all()
    assert "jitter" in caplog.text


def test_pseudo_batch_is_balanced_and_ordered(generator):
    """
    Tests that pseudo features cover every past stage in stage order.
    """
    records = {}
    for stage in range(3):
        stats = TaskFeatureStats(stage, 2)
        stats.update(torch.randn(20, 2, generator=generator) + 5 * stage)
        records[stage] = finalize(stats)
    batch = pseudo_batch(records, 2, 4, generator)
    assert batch.labels.tolist() == [0, 0, 0, 0, 1, 1, 1, 1]
    assert batch.features.shape == (8, 2)
    assert pseudo_batch(records, 0, 4).features.shape == (0, 2)


def test_pseudo_batch_needs_every_past_stage(generator):
    """
    Tests that a missing past stage raises CoverageError.
    """
    stats = finalize(TaskFeatureStats(1, 2).update(torch.randn(5, 2, generator=generator)))
    with pytest.raises(CoverageError):
        pseudo_batch({1: stats}, 2, 3)


def test_restore_reproduces_finalized_stats(generator):
    """
    Tests that restoring persisted tensors rebuilds an identical sampler.
    """
    stats = finalize(_streamed(torch.randn(40, 3, generator=generator), "full"))
    state = stats.state()
    restored = TaskFeatureStats.restore(0, state["pst.0.mean"], state["pst.0.cov"], stats.metadata())
    assert restored.finalized and restored.count == 40
    assert torch.equal(restored.var, stats.var)
    assert torch.equal(restored.factor, stats.factor)


def test_log_likelihood_prefers_the_matching_stage(generator):
    """
    Tests that features score highest under the statistics of their own stage.
    """
    near = finalize(TaskFeatureStats(0, 2).update(torch.randn(50, 2, generator=generator)))
    far = finalize(TaskFeatureStats(1, 2).update(torch.randn(50, 2, generator=generator) + 6.0))
    queries = torch.randn(10, 2, generator=generator)
    assert (gaussian_log_likelihood(near, queries) > gaussian_log_likelihood(far, queries)).all()


def test_diagonal_samples_match_moments(generator):
    """
    Tests Monte Carlo mean and per-dimension variance of diagonal sampling.
    """
    data = torch.randn(2000, 4, generator=generator, dtype=torch.float64) * torch.tensor([0.5, 1.0, 2.0, 3.0]) + 10.0
    stats = finalize(_streamed(data, chunk=250))
    samples = sample_features(stats, 100_000, generator).features
    tolerance = 0.02 * (1 + float(stats.mean.abs().max()))
    assert float((samples.mean(dim=0) - stats.mean).abs().max()) <= tolerance
    ratio = samples.var(dim=0, correction=0) / stats.var
    assert float((ratio - 1).abs().max()) <= 0.05
