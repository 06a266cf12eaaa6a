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
"""In-process property checks that can run on a fresh install without data or a GPU."""

import logging
import tempfile
from collections.abc import Callable
from pathlib import Path

import torch
import torch.nn.functional as F
from torch import nn

from .attacks.gradient import BIM, PGD, fgsm
from .backbone import Backbone
from .config import Settings
from .drde import DefenseModel, ExpertActivity, ExpertBank, add_router, fuse_experts, gate, snapshot_active, topk_softmax
from .models import AttackSpec, CheckResult
from .pst import TaskFeatureStats, finalize, sample_features

logger = logging.getLogger(__name__)


def _require(condition: bool, message: str) -> None:
    if not condition:
        raise AssertionError(message)


def _check_gating(generator: torch.Generator) -> str:
    n, k, d = 8, 2, 16
    router = nn.Linear(d, n)
    for _ in range(1000):
        with torch.no_grad():
            router.weight.copy_(torch.randn(n, d, generator=generator))
            router.bias.copy_(torch.randn(n, generator=generator))
        weights = gate(router, torch.randn(1, d, generator=generator), k)
        _require(int((weights > 0).sum()) == k, "wrong number of positive weights")
        _require(abs(float(weights.sum()) - 1.0) <= 1e-6, "weights do not sum to one")
    tied = torch.softmax(torch.tensor([[1.0, float("-inf"), float("-inf")]]), dim=-1)
    _require(torch.equal(topk_softmax(torch.tensor([[0.5, 0.5, 0.1]]), 1), tied), "tie not broken by lowest index")
    return "1000 random draws, k positive weights summing to one"


def _check_zero_init(generator: torch.Generator) -> str:
    torch.manual_seed(0)
    backbone = Backbone(channels=3, image_size=8, num_classes=5, feature_dim=16).freeze()
    model = DefenseModel(backbone, n=4, k=2)
    add_router(model, 0)
    inputs = torch.rand(100, 3, 8, 8, generator=generator)
    with torch.no_grad():
        diff = (model(inputs, 0) - backbone(inputs)).abs().max().item()
    _require(diff <= 1e-6, f"fresh experts moved logits by {diff}")
    return "fresh expert bank leaves logits unchanged"


def _check_fusion(generator: torch.Generator) -> str:
    bank = ExpertBank({"fc": (4, 4)}, n=2, rank=2)
    with torch.no_grad():
        bank.up["fc"].fill_(3.0)
        bank.down["fc"].fill_(3.0)
    activity = ExpertActivity(2).update(torch.tensor([1.0, 0.0]))
    snapshot = snapshot_active(bank, activity, 1)
    with torch.no_grad():
        bank.up["fc"].fill_(1.0)
        bank.down["fc"].fill_(1.0)
    fuse_experts(snapshot, bank, 0.5)
    _require(bool((bank.up["fc"][0] == 2.0).all()), "midpoint fusion is not exact")
    _require(bool((bank.up["fc"][1] == 1.0).all()), "an expert outside the snapshot changed")
    fuse_experts(snapshot, bank, 1.0)
    _require(torch.equal(bank.up["fc"][0], snapshot.up["fc"][0]), "rho=1 did not restore the snapshot")
    before = bank.up["fc"].detach().clone()
    fuse_experts(snapshot, bank, 0.3)
    _require(torch.equal(bank.up["fc"], before), "fusing identical factors is not idempotent")
    return "midpoint, endpoint and idempotence are exact"


def _check_pst(generator: torch.Generator) -> str:
    data = torch.randn(500, 6, generator=generator, dtype=torch.float64) * 3.0 + 1.5
    stats = TaskFeatureStats(0, 6)
    for chunk in data.split(37):
        stats.update(chunk)
    _require(torch.allclose(stats.mean, data.mean(dim=0), atol=1e-10, rtol=0), "streaming mean drifted")
    _require(torch.allclose(stats.var, data.var(dim=0, correction=0), atol=1e-10, rtol=0), "streaming variance drifted")
    finalize(stats)
    fixed = sample_features(stats, 1, z=torch.zeros(1, 6)).features[0]
    _require(torch.equal(fixed, stats.mean), "z=0 does not return the mean")
    _require(all(t.shape[0] == 6 for t in stats.state().values()), "statistics keep per-sample arrays")
    return "streaming moments match one-shot moments"


def _check_attacks(generator: torch.Generator) -> str:
    linear = nn.Linear(2, 2).double()
    with torch.no_grad():
        linear.weight.copy_(torch.tensor([[1.0, -2.0], [-0.5, 1.5]], dtype=torch.float64))
        linear.bias.zero_()
    x = torch.tensor([[0.5, 0.5]], dtype=torch.float64)
    y = torch.tensor([0])
    epsilon = 0.1
    achieved = F.cross_entropy(linear(fgsm(linear, x, y, epsilon)), y).item()
    best = max(
        F.cross_entropy(linear(x + epsilon * torch.tensor([[sx, sy]], dtype=torch.float64)), y).item()
        for sx in (-1.0, 1.0)
        for sy in (-1.0, 1.0)
    )
    _require(abs(achieved - best) <= 1e-6, "FGSM misses the best sign pattern")

    spec = AttackSpec(name="pgd", epsilon=8 / 255, alpha=2 / 255, steps=5, random_start=False)
    images = torch.rand(8, 2, generator=generator, dtype=torch.float64)
    labels = torch.randint(0, 2, (8,), generator=generator)
    pgd_out = PGD(spec).perturb(linear, images, labels)
    bim_out = BIM(spec.model_copy(update={"name": "bim"})).perturb(linear, images, labels)
    _require(torch.equal(pgd_out, bim_out), "BIM differs from PGD without random start")
    _require(float((pgd_out - images).abs().max()) <= spec.epsilon + 1e-9, "PGD left its budget")
    return "FGSM sign oracle, BIM == PGD, budget respected"


def _check_checkpoint(generator: torch.Generator) -> str:
    from .harness.checkpoint import load_checkpoint, save_checkpoint
    from .pipeline import CATState

    settings = Settings(
        image_size=8, feature_dim=16, num_classes=4, n_experts=4, top_k=2,
        context_length=2, embed_dim=8, text_hidden=8,
    )
    torch.manual_seed(0)
    state = CATState.create(settings)
    state.backbone.freeze()
    add_router(state.model, 0)
    state.prompts.register_stage(0)
    with tempfile.TemporaryDirectory() as tmp:
        first, second = Path(tmp) / "a.ckpt", Path(tmp) / "b.ckpt"
        save_checkpoint(state, first)
        save_checkpoint(load_checkpoint(first), second)
        _require(first.read_bytes() == second.read_bytes(), "save-load-save is not byte identical")
    return "save-load-save round trip is byte identical"


CHECKS: dict[str, Callable[[torch.Generator], str]] = {
    "gating": _check_gating,
    "zero_init": _check_zero_init,
    "fusion": _check_fusion,
    "pst": _check_pst,
    "attacks": _check_attacks,
    "checkpoint": _check_checkpoint,
}


def run_selftest(seed: int = 0) -> list[CheckResult]:
    """Run every property check and return one result per check."""
    results = []
    for name, check in CHECKS.items():
        generator = torch.Generator().manual_seed(seed)
        try:
            detail = check(generator)
            results.append(CheckResult(name=name, passed=True, detail=detail))
        except Exception as exc:  # noqa: BLE001
            logger.error("Self-test %s failed: %s", name, exc)
            results.append(CheckResult(name=name, passed=False, detail=str(exc)))
    return results
