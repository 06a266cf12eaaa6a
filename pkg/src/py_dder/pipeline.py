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
"""Continual adversarial training loop: one stage per attack in the sequence."""

import logging
import time
from collections.abc import Callable
from pathlib import Path

import torch
import torch.nn.functional as F
from torch.utils.data import DataLoader, TensorDataset

from .asn import ASNConfig, PromptState, TextFeatureMap, all_text_features, asn_logits, select_router, train_asn
from .attacks.base import Classifier
from .attacks.cache import AdversarialDataset, check_provenance, generate_stage_dataset
from .attacks.gradient import build_attack
from .backbone import Backbone, pretrain_clean
from .config import Settings
from .data import load_datasets, subset
from .drde import DefenseModel, ExpertActivity, FusionSnapshot, add_router, fuse_experts, snapshot_active
from .exceptions import DDeRError, StageFailedError, StageOrderError
from .models import AttackSpec, StageResult
from .pst import TaskFeatureStats, finalize, gaussian_log_likelihood, pseudo_batch
from .utils import AtomicWriter, mapping_digest, module_digest, resolve_device, seed_everything

logger = logging.getLogger(__name__)

RESULTS_FILE = "stage_results.jsonl"


class CATState:
    """Everything a continual adversarial training run learns or keeps.

    The defense model (frozen backbone, expert bank, routers), the sentinel
    prompts and their frozen text map, one statistics record per stage and
    the expert snapshots used for fusion.
    """

    def __init__(
        self,
        settings: Settings,
        model: DefenseModel,
        prompts: PromptState,
        text_map: TextFeatureMap,
    ) -> None:
        """Assemble a state from already built components."""
        self.settings = settings
        self.model = model
        self.prompts = prompts
        self.text_map = text_map
        self.stats: dict[int, TaskFeatureStats] = {}
        self.snapshots: dict[int, FusionSnapshot] = {}
        self.results: list[StageResult] = []
        self.stages_done = 0

    @classmethod
    def create(cls, settings: Settings) -> "CATState":
        """Fresh state for a run: untrained backbone, zero-initialized experts, no routers."""
        backbone = Backbone.from_settings(settings)
        model = DefenseModel(
            backbone,
            n=settings.effective_n_experts,
            k=settings.effective_top_k,
            rank=settings.rank,
            router_bias=settings.router_bias,
        )
        prompts = PromptState(
            settings.context_length,
            settings.embed_dim,
            shared=settings.asn_shared_context,
            learnable_type=settings.asn_learnable_type,
        )
        text_map = TextFeatureMap(
            settings.embed_dim,
            backbone.feature_dim,
            settings.context_length + 1,
            hidden=settings.text_hidden,
            seed=settings.text_map_seed,
        )
        return cls(settings, model, prompts, text_map)

    @property
    def backbone(self) -> Backbone:
        return self.model.backbone

    @property
    def device(self) -> torch.device:
        return next(self.model.backbone.parameters()).device

    def to(self, device: torch.device | str) -> "CATState":
        self.model.to(device)
        self.prompts.to(device)
        self.text_map.to(device)
        return self

    def router_for(self, stage: int) -> int:
        """Router that serves `stage`: its own, or the shared router 0."""
        return stage if self.settings.per_stage_routers else 0

    def digest(self) -> str:
        return module_digest(self.model)


def _stage_spec(state: CATState, stage: int) -> AttackSpec:
    sequence = state.settings.attack_sequence
    if not 0 <= stage < len(sequence):
        msg = f"Stage {stage} is outside the attack sequence of length {len(sequence)}"
        raise StageOrderError(msg)
    return sequence[stage]


def _train_routed(
    state: CATState,
    router: int,
    stage: int,
    dataset: TensorDataset,
    activity: ExpertActivity,
) -> list[float]:
    """Fit router `router` (and, if enabled, the expert bank) by cross-entropy on stage data."""
    settings = state.settings
    model = state.model
    device = state.device
    parameters = [tensor for _, tensor in model.routers.named_stage_tensors(router)]
    if settings.train_experts:
        parameters += list(model.bank.parameters())
    optimizer = torch.optim.Adam(parameters, lr=settings.lr)
    scheduler = None
    if settings.lr_schedule == "cosine" and settings.epochs > 0:
        scheduler = torch.optim.lr_scheduler.CosineAnnealingLR(optimizer, T_max=settings.epochs)

    generator = torch.Generator().manual_seed(settings.seed + 1009 * stage)
    loader = DataLoader(dataset, batch_size=settings.batch_size, shuffle=True, generator=generator)
    online = None
    if settings.attack_mode == "online":
        online = build_attack(_stage_spec(state, stage))

    curve = []
    for epoch in range(settings.epochs):
        running = 0.0
        for images, labels in loader:
            images, labels = images.to(device), labels.to(device)
            if online is not None:
                images = online(model.stage_fn(router), images, labels, generator)
            optimizer.zero_grad(set_to_none=True)
            loss = F.cross_entropy(model(images, router, activity=activity), labels)
            loss.backward()
            optimizer.step()
            running += loss.item() * labels.shape[0]
        if scheduler is not None:
            scheduler.step()
        curve.append(running / max(len(dataset), 1))
        logger.debug("Stage %d epoch %d/%d: loss=%.4f", stage, epoch + 1, settings.epochs, curve[-1])
    return curve


@torch.no_grad()
def _stage_features(state: CATState, dataset: TensorDataset) -> torch.Tensor:
    """Frozen-path features of every stage input, in dataset order."""
    loader = DataLoader(dataset, batch_size=256, shuffle=False)
    parts = [state.backbone.encode(images.to(state.device)).cpu() for images, _ in loader]
    if not parts:
        return torch.zeros(0, state.backbone.feature_dim)
    return torch.cat(parts)


def _pseudo_sampler(state: CATState, stage: int) -> Callable:
    generator = torch.Generator().manual_seed(state.settings.seed + 4099 * stage)

    def sample():
        return pseudo_batch(state.stats, stage, state.settings.pseudo_per_stage, generator)

    return sample


def run_stage(
    state: CATState,
    stage: int,
    dataset: TensorDataset,
    test: TensorDataset | None = None,
) -> StageResult:
    """Run one stage of continual adversarial training.

    In order: stage 0 pretrains and freezes the backbone; a router is added;
    router and experts are trained on `dataset` with oracle routing while
    expert activity is recorded; the previous stage's snapshot is fused in
    (stage 2 onward); the most active experts are snapshotted; the stage
    feature statistics are collected and finalized; the sentinel network is
    trained on real and pseudo features.

    Args:
        state: Run state; `state.stages_done` must equal `stage`.
        stage: Index into the attack sequence.
        dataset: Stage training data. In cached mode an AdversarialDataset whose
                 provenance matches the stage spec; in online mode clean data.
        test: Optional clean split used to record the stage-0 clean accuracy.

    """
    settings = state.settings
    if stage != state.stages_done:
        msg = f"Stage {stage} requested, but {state.stages_done} stages are complete"
        raise StageOrderError(msg)
    spec = _stage_spec(state, stage)
    if isinstance(dataset, AdversarialDataset) and settings.attack_mode == "cached":
        check_provenance(dataset, spec, stage)
    started = time.perf_counter()

    if stage == 0:
        if not state.backbone.frozen:
            pretrain_clean(state.backbone, dataset, settings, test)
            state.backbone.freeze()
    elif not state.backbone.frozen:
        msg = "The backbone must be frozen after stage 0"
        raise StageOrderError(msg)

    router = state.router_for(stage)
    param_delta = 0
    if not state.model.routers.has(router):
        torch.manual_seed(settings.seed + 7 * stage)
        add_router(state.model, router)
        param_delta = state.model.routers.params_per_stage()

    fuse = settings.fusion_enabled and stage >= 2 and (stage - 1) in state.snapshots
    fused = False
    if fuse and settings.fuse_at == "start":
        fuse_experts(state.snapshots[stage - 1], state.model.bank, settings.rho)
        fused = True

    activity = ExpertActivity(state.model.bank.n)
    curve = _train_routed(state, router, stage, dataset, activity)

    if fuse and settings.fuse_at == "end":
        fuse_experts(state.snapshots[stage - 1], state.model.bank, settings.rho)
        fused = True

    snapshot_id = None
    if settings.fusion_enabled:
        if activity.count:
            snapshot = snapshot_active(state.model.bank, activity, state.model.k, stage)
            state.snapshots[stage] = snapshot
            snapshot_id = snapshot.digest()
        else:
            logger.warning("No expert activity recorded at stage %d; snapshot skipped", stage)

    features = _stage_features(state, dataset) if settings.use_pst or settings.use_asn else None
    stats_id = None
    if settings.use_pst and features is not None:
        stats = TaskFeatureStats(
            stage, state.backbone.feature_dim, settings.pst_mode, settings.pst_ema, settings.pst_momentum,
        )
        for chunk in features.split(settings.batch_size):
            stats.update(chunk)
        state.stats[stage] = finalize(stats)
        stats_id = mapping_digest(stats.state())

    asn_loss: list[float] = []
    if settings.use_asn and features is not None:
        state.prompts.register_stage(stage, seed=settings.seed)
        fit = train_asn(
            state.prompts,
            state.text_map,
            features,
            stage,
            _pseudo_sampler(state, stage) if settings.use_pst and stage > 0 else None,
            ASNConfig.from_settings(settings),
            require_replay=settings.use_pst,
        )
        asn_loss = fit.train_loss

    result = StageResult(
        stage=stage,
        attack=spec.label,
        variant=settings.variant,
        train_loss=curve,
        asn_loss=asn_loss,
        clean_accuracy=state.backbone.clean_accuracy if stage == 0 else None,
        stats_id=stats_id,
        snapshot_id=snapshot_id,
        router_id=state.model.routers.stage_hash(router),
        fused=fused,
        wall_time=time.perf_counter() - started,
        param_delta=param_delta,
    )
    state.results.append(result)
    state.stages_done += 1
    logger.info("%s", result.model_dump_json())
    return result


def stage_dataset(state: CATState, stage: int, clean: TensorDataset) -> TensorDataset:
    """Training data of a stage, generated against the stage-entry composite.

    Stage 0 and online mode use the clean data. Otherwise the attack targets
    the current model routed through the router that served the previous stage.
    """
    settings = state.settings
    spec = _stage_spec(state, stage)
    if stage > 0 and settings.attack_mode == "online":
        return clean
    if stage == 0 or spec.name == "clean":
        return generate_stage_dataset(state.backbone, clean, spec, None, stage=stage, model_digest="clean")
    router = state.router_for(stage - 1)
    return generate_stage_dataset(
        state.model.stage_fn(router),
        clean,
        spec,
        settings.cache_dir,
        stage=stage,
        model_digest=f"{state.digest()}:{router}",
        batch_size=256,
        device=state.device,
    )


def _write_results(path: Path, results: list[StageResult]) -> None:
    # One line per stage of this run; a rerun into the same directory starts over.
    with AtomicWriter(path, "w") as handle:
        handle.write("".join(result.model_dump_json() + "\n" for result in results))


def run_sequence(
    settings: Settings,
    out_dir: str | Path | None = None,
    train: TensorDataset | None = None,
    test: TensorDataset | None = None,
) -> tuple[CATState, list[StageResult]]:
    """Train every stage of the attack sequence in order.

    A checkpoint is written after each stage under `out_dir/checkpoints`
    and `out_dir/stage_results.jsonl` holds one StageResult line per
    finished stage. A failing stage raises StageFailedError naming the last
    good checkpoint.
    """
    from .harness.checkpoint import save_checkpoint, stage_checkpoint_path

    seed_everything(settings.seed)
    if train is None or test is None:
        train, test = load_datasets(settings)
    out = Path(out_dir if out_dir is not None else settings.out_dir)
    state = CATState.create(settings).to(resolve_device(settings.device))
    logger.info(
        "Starting variant %s over %s", settings.variant, ", ".join(spec.label for spec in settings.attack_sequence),
    )

    last_checkpoint: str | None = None
    for stage in range(len(settings.attack_sequence)):
        try:
            clean = subset(train, settings.stage_size(stage))
            result = run_stage(state, stage, stage_dataset(state, stage, clean), test if stage == 0 else None)
            path = stage_checkpoint_path(out, stage)
            save_checkpoint(state, path)
        except (DDeRError, RuntimeError, ValueError) as exc:
            logger.error("Stage %d failed: %s", stage, exc)
            raise StageFailedError(stage, last_checkpoint) from exc
        last_checkpoint = str(path)
        _write_results(out / RESULTS_FILE, state.results)
    return state, state.results


@torch.no_grad()
def select_stages(state: CATState, images: torch.Tensor) -> torch.Tensor:
    """Router chosen for every input without oracle labels.

    The sentinel network decides when it is enabled; otherwise the stage
    whose feature statistics give the highest likelihood; with a single
    router everything goes to router 0. Zero-norm features go to router 0.
    """
    settings = state.settings
    count = images.shape[0]
    routers = state.model.routers.stages
    if len(routers) <= 1 or not settings.per_stage_routers:
        return torch.full((count,), routers[0] if routers else 0, dtype=torch.long, device=images.device)
    features = state.backbone.encode(images)
    selected = torch.zeros(count, dtype=torch.long, device=images.device)
    valid = features.norm(dim=-1) > 0
    if not bool(valid.any()):
        return selected
    if settings.use_asn and state.prompts.stages:
        stage_features = all_text_features(state.prompts, state.text_map)
        logits = asn_logits(features[valid], stage_features, settings.asn_temperature)
        choice = torch.tensor(state.prompts.stages, device=images.device)[select_router(logits)]
    elif state.stats:
        stages = sorted(state.stats)
        scores = torch.stack([gaussian_log_likelihood(state.stats[s], features[valid]) for s in stages], dim=-1)
        choice = torch.tensor(stages, device=images.device)[scores.argmax(dim=-1).to(images.device)]
    else:
        choice = torch.full((int(valid.sum()),), routers[-1], dtype=torch.long, device=images.device)
    selected[valid] = choice
    return selected


def routed_logits(state: CATState, images: torch.Tensor, oracle: torch.Tensor | int | None = None) -> torch.Tensor:
    """Composite logits, routed by `oracle` stage ids when given, else by `select_stages`."""
    if oracle is None:
        stages = select_stages(state, images)
    elif isinstance(oracle, int):
        stages = torch.full((images.shape[0],), state.router_for(oracle), dtype=torch.long, device=images.device)
    else:
        stages = oracle.to(images.device)
    return state.model(images, stages)


@torch.no_grad()
def infer(state: CATState, images: torch.Tensor, oracle: torch.Tensor | int | None = None) -> torch.Tensor:
    """Class predictions with sentinel routing; `oracle` forces the stage ids (test hook)."""
    if state.stages_done < 1:
        msg = "Inference needs at least one completed stage"
        raise StageOrderError(msg)
    return routed_logits(state, images, oracle).argmax(dim=-1)


def composite_classifier(state: CATState) -> Classifier:
    """Differentiable composite for adaptive attacks: routing is picked without gradient, then held fixed."""

    def classify(images: torch.Tensor) -> torch.Tensor:
        stages = select_stages(state, images.detach())
        return state.model(images, stages)

    return classify
