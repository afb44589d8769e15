"""Generator training loop: optimize the perturbation generator against the
combined objective over a recorded trajectory, a frozen hacker proxy, and the
frozen embedding space, then emit the protected dataset."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from .data import Dataset, PerturbationBudget, clamp_to_budget
from .embedspace import EmbeddingSpace
from .losses import (
    LossWeights,
    feature_distance_loss,
    gradient_matching_loss,
    total_loss,
    undistill_loss,
)
from .nets import (
    GeneratorSpec,
    NetworkSpec,
    batch_to_tensor,
    build_generator,
    build_network,
    load_params_into,
    tensor_to_batch,
)
from .seeding import fingerprint_module, numpy_stream
from .trajectory import Trajectory, TrainRecipe, batch_indices


class GenerationAborted(RuntimeError):
    def __init__(self, step: int, components: dict):
        super().__init__(
            f"non-finite total loss at step {step}: "
            + ", ".join(f"{k}={v}" for k, v in components.items())
        )
        self.step = step
        self.components = components


@dataclass
class UGEConfig:
    """Everything the generation run depends on, in one audited record."""

    budget: PerturbationBudget
    weights: LossWeights
    generator: GeneratorSpec
    generator_recipe: TrainRecipe  # learning rate / epochs / batch size / seed
    authorized: list  # [(NetworkSpec, Trajectory), ...]
    hacker_proxy: NetworkSpec
    embedding: EmbeddingSpace
    master_seed: int = 0
    snapshots_per_step: int = 1
    min_snapshot_epoch: int = 0  # sample checkpoints at or after this epoch
    gm_mode: str = "per-group"
    optimizer: str = "adam"

    def __post_init__(self):
        if not self.authorized:
            raise ValueError("at least one authorized network is required")
        for spec, traj in self.authorized:
            if self.hacker_proxy.seed == spec.seed:
                raise ValueError(
                    "hacker proxy seed must differ from every authorized seed "
                    f"(both are {spec.seed})"
                )
            if not any(s.epoch >= self.min_snapshot_epoch for s in traj.snapshots):
                raise ValueError(
                    f"no trajectory snapshot at epoch >= {self.min_snapshot_epoch}"
                )
        if self.snapshots_per_step < 1:
            raise ValueError("snapshots_per_step must be >= 1")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown generator optimizer {self.optimizer!r}")


@dataclass
class AuthorizedContext:
    spec: NetworkSpec
    trajectory: Trajectory
    skeleton: torch.nn.Module  # architecture carrier for checkpoint gradients
    trained: torch.nn.Module  # final-snapshot network for the undistill term


@dataclass
class GeneratorState:
    generator: torch.nn.Module
    optimizer: torch.optim.Optimizer
    authorized: list
    hacker: torch.nn.Module
    space: EmbeddingSpace
    weights: LossWeights
    budget: PerturbationBudget
    snapshot_rng: np.random.Generator
    gm_mode: str
    snapshots_per_step: int
    min_snapshot_epoch: int
    dtype: torch.dtype
    step: int = 0
    frozen_fingerprints: dict = field(default_factory=dict)


def init_generation(config: UGEConfig, in_channels: int, dtype: torch.dtype = torch.float32) -> GeneratorState:
    contexts = []
    for spec, traj in config.authorized:
        skeleton = build_network(spec, dtype=dtype)
        trained = build_network(spec, dtype=dtype)
        load_params_into(trained, traj.final.params)
        for module in (skeleton, trained):
            module.eval()
            for p in module.parameters():
                p.requires_grad_(False)
        contexts.append(AuthorizedContext(spec, traj, skeleton, trained))
    hacker = build_network(config.hacker_proxy, dtype=dtype)
    hacker.eval()
    for p in hacker.parameters():
        p.requires_grad_(False)
    generator = build_generator(
        config.generator, config.budget, in_channels=in_channels, dtype=dtype
    )
    recipe = config.generator_recipe
    if config.optimizer == "adam":
        opt = torch.optim.Adam(generator.parameters(), lr=recipe.learning_rate)
    else:
        opt = torch.optim.SGD(
            generator.parameters(), lr=recipe.learning_rate, momentum=recipe.momentum
        )
    state = GeneratorState(
        generator=generator,
        optimizer=opt,
        authorized=contexts,
        hacker=hacker,
        space=config.embedding,
        weights=config.weights,
        budget=config.budget,
        snapshot_rng=numpy_stream(config.master_seed, "generation", "snapshots"),
        gm_mode=config.gm_mode,
        snapshots_per_step=config.snapshots_per_step,
        min_snapshot_epoch=config.min_snapshot_epoch,
        dtype=dtype,
    )
    state.frozen_fingerprints = frozen_fingerprints(state)
    return state


def frozen_fingerprints(state: GeneratorState) -> dict:
    prints = {"hacker": fingerprint_module(state.hacker), "encoder": state.space.fingerprint()}
    for i, ctx in enumerate(state.authorized):
        prints[f"authorized{i}/trajectory"] = ctx.trajectory.fingerprint()
        prints[f"authorized{i}/trained"] = fingerprint_module(ctx.trained)
    return prints


def generation_step(state: GeneratorState, x: torch.Tensor, y: torch.Tensor) -> dict:
    """One generator update on a batch. Returns the loss components as floats;
    every frozen participant is untouched."""
    w = state.weights
    state.generator.train()
    x_u = state.generator(x)
    zero = x_u.sum() * 0.0  # keeps disabled terms on the graph's dtype/device

    gm = zero
    if w.lambda_gm > 0:
        per_net = []
        for ctx in state.authorized:
            eligible = [
                s for s in ctx.trajectory.snapshots if s.epoch >= state.min_snapshot_epoch
            ]
            draws = []
            for _ in range(state.snapshots_per_step):
                snap = eligible[int(state.snapshot_rng.integers(len(eligible)))]
                draws.append(
                    gradient_matching_loss(
                        ctx.skeleton, snap.params, x, x_u, y, mode=state.gm_mode
                    )
                )
            per_net.append(sum(draws) / len(draws))
        gm = sum(per_net) / len(per_net)

    fd = zero
    if w.lambda_fd > 0:
        fd = feature_distance_loss(state.space, x, x_u, y, w.alpha)

    ud = zero
    if w.lambda_ud > 0:
        per_net = [
            undistill_loss(ctx.trained, state.hacker, x_u, y, w.omega, w.kd_temperature)
            for ctx in state.authorized
        ]
        ud = sum(per_net) / len(per_net)

    total = total_loss({"gm": gm, "fd": fd, "ud": ud}, w)
    components = {
        "gm": float(gm.detach()),
        "fd": float(fd.detach()),
        "ud": float(ud.detach()),
    }
    if not np.isfinite(float(total.detach())):
        raise GenerationAborted(state.step, components)
    if total.grad_fn is not None:
        state.optimizer.zero_grad()
        total.backward()
        state.optimizer.step()
    state.step += 1
    components["total"] = (
        w.lambda_gm * components["gm"]
        + w.lambda_fd * components["fd"]
        + w.lambda_ud * components["ud"]
    )
    return components


def _check_disjoint_from_space(space: EmbeddingSpace, protect: Dataset) -> None:
    """The embedding split's provenance must not intersect the protected rows."""
    prov = space.provenance
    if prov.get("train_data_hash") == protect.content_hash():
        raise ValueError("protected split and embedding split must be disjoint")
    src = prov.get("source_id")
    idx = prov.get("source_indices")
    if src and idx is not None and src == protect.source_id and protect.source_indices is not None:
        shared = np.intersect1d(np.asarray(idx, dtype=np.int64), protect.source_indices)
        if shared.size:
            raise ValueError(
                f"protected split shares {shared.size} rows with the embedding split"
            )


def apply_generator(
    generator: torch.nn.Module,
    images: np.ndarray,
    budget: PerturbationBudget,
    dtype: torch.dtype = torch.float32,
    batch_size: int = 256,
) -> np.ndarray:
    """Run the generator over a full image array and project the result onto
    the budget box exactly in the float32 storage representation."""
    generator.eval()
    outputs = []
    with torch.no_grad():
        for start in range(0, len(images), batch_size):
            x = batch_to_tensor(images[start : start + batch_size], dtype)
            outputs.append(tensor_to_batch(generator(x), dtype=np.float32))
    raw = np.concatenate(outputs, axis=0)
    return clamp_to_budget(raw, images.astype(np.float32), budget)


def run_generation(config: UGEConfig, protect: Dataset, dtype: torch.dtype = torch.float32):
    """Train the generator for the configured epochs over the protected split
    and return (protected dataset, generator state, per-step loss log)."""
    _check_disjoint_from_space(config.embedding, protect)
    state = init_generation(config, in_channels=protect.image_shape[2], dtype=dtype)
    before = dict(state.frozen_fingerprints)
    batch_rng = numpy_stream(config.master_seed, "generation", "batches")
    recipe = config.generator_recipe
    log = []
    for epoch in range(recipe.epochs):
        for idx in batch_indices(protect.n, recipe.batch_size, batch_rng):
            x = batch_to_tensor(protect.images[idx], dtype)
            y = torch.from_numpy(protect.labels[idx])
            components = generation_step(state, x, y)
            components.update({"step": state.step - 1, "epoch": epoch})
            log.append(components)
    protected_images = apply_generator(state.generator, protect.images, config.budget, dtype)
    after = frozen_fingerprints(state)
    if after != before:
        changed = [k for k in before if before[k] != after.get(k)]
        raise RuntimeError(f"frozen participants changed during generation: {changed}")
    d_u = Dataset(
        images=protected_images,
        labels=protect.labels.copy(),
        class_names=protect.class_names,
        split_tag="uge",
        source_id=protect.source_id,
        source_indices=None if protect.source_indices is None else protect.source_indices.copy(),
    )
    return d_u, state, log
