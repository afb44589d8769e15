"""Record the authorized network's SGD trajectory on clean data and sample
checkpoints from it during generation."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .data import Dataset
from .nets import ParameterView, batch_to_tensor, evaluate_accuracy, load_param_view, save_param_view
from .seeding import numpy_stream

LR_SCHEDULES = ("constant", "cosine", "step")


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch: int, detail: str = ""):
        super().__init__(f"training diverged at epoch {epoch}: non-finite loss {detail}")
        self.epoch = epoch


@dataclass(frozen=True)
class TrainRecipe:
    learning_rate: float
    epochs: int
    batch_size: int = 64
    momentum: float = 0.9
    weight_decay: float = 0.0
    lr_schedule: str = "cosine"
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.lr_schedule not in LR_SCHEDULES:
            raise ValueError(f"unknown lr_schedule {self.lr_schedule!r}")

    def lr_at(self, epoch: int) -> float:
        if self.lr_schedule == "constant" or self.epochs <= 1:
            return self.learning_rate
        if self.lr_schedule == "cosine":
            return self.learning_rate * 0.5 * (1.0 + math.cos(math.pi * epoch / self.epochs))
        # step: divide by 10 at 50% and 75% of the budget
        factor = 1.0
        if epoch >= 0.75 * self.epochs:
            factor = 0.01
        elif epoch >= 0.5 * self.epochs:
            factor = 0.1
        return self.learning_rate * factor


@dataclass
class TrajectorySnapshot:
    epoch: int
    params: ParameterView


@dataclass
class Trajectory:
    snapshots: list
    recipe: TrainRecipe
    clean_test_acc: float

    def __post_init__(self):
        epochs = [s.epoch for s in self.snapshots]
        if not epochs or epochs[0] != 0 or any(b <= a for a, b in zip(epochs, epochs[1:])):
            raise ValueError("snapshot epochs must strictly increase starting at 0")

    def __len__(self) -> int:
        return len(self.snapshots)

    @property
    def final(self) -> TrajectorySnapshot:
        return self.snapshots[-1]

    def fingerprint(self) -> str:
        from .seeding import fingerprint_arrays

        return fingerprint_arrays(
            v for snap in self.snapshots for v in snap.params.vectors
        )


def batch_indices(n: int, batch_size: int, rng: np.random.Generator):
    """Seed-determined shuffled batches; the final partial batch is kept."""
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start : start + batch_size]


def record_trajectory(
    net: nn.Module,
    train: Dataset,
    test: Dataset,
    recipe: TrainRecipe,
    keep_every: int = 1,
    dtype: torch.dtype = torch.float32,
) -> Trajectory:
    """Train ``net`` in place by SGD on ``train`` and record parameter
    snapshots: the initialization (epoch 0), every ``keep_every`` epochs, and
    the final epoch. Fully determined by the recipe seed."""
    if keep_every < 1:
        raise ValueError("keep_every must be >= 1")
    rng = numpy_stream(recipe.seed, "trajectory-batches")
    snapshots = [TrajectorySnapshot(0, ParameterView.from_network(net))]
    opt = torch.optim.SGD(
        net.parameters(),
        lr=recipe.learning_rate,
        momentum=recipe.momentum,
        weight_decay=recipe.weight_decay,
    )
    for epoch in range(recipe.epochs):
        lr = recipe.lr_at(epoch)
        for group in opt.param_groups:
            group["lr"] = lr
        net.train()
        for idx in batch_indices(train.n, recipe.batch_size, rng):
            x = batch_to_tensor(train.images[idx], dtype)
            y = torch.from_numpy(train.labels[idx])
            loss = F.cross_entropy(net(x), y)
            if not torch.isfinite(loss):
                raise TrainingDiverged(epoch)
            opt.zero_grad()
            loss.backward()
            opt.step()
        done = epoch + 1
        if done % keep_every == 0 or done == recipe.epochs:
            snapshots.append(TrajectorySnapshot(done, ParameterView.from_network(net)))
    acc = evaluate_accuracy(net, test, dtype=dtype)
    return Trajectory(snapshots=snapshots, recipe=recipe, clean_test_acc=acc)


def sample_snapshot(traj: Trajectory, rng: np.random.Generator) -> TrajectorySnapshot:
    """Uniform draw over the stored snapshots, reproducible from the stream."""
    if not traj.snapshots:
        raise ValueError("empty trajectory")
    return traj.snapshots[int(rng.integers(len(traj.snapshots)))]


# ---------------------------------------------------------------------------
# Persistence: traj/<epoch>.snap + traj/meta.json


def save_trajectory(traj: Trajectory, out_dir, extra_meta: dict | None = None) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for snap in traj.snapshots:
        save_param_view(snap.params, out_dir / f"{snap.epoch}.snap", meta={"epoch": snap.epoch})
    meta = {
        "epochs": [s.epoch for s in traj.snapshots],
        "clean_test_acc": traj.clean_test_acc,
        "recipe": {
            "learning_rate": traj.recipe.learning_rate,
            "epochs": traj.recipe.epochs,
            "batch_size": traj.recipe.batch_size,
            "momentum": traj.recipe.momentum,
            "weight_decay": traj.recipe.weight_decay,
            "lr_schedule": traj.recipe.lr_schedule,
            "seed": traj.recipe.seed,
        },
    }
    if extra_meta:
        meta.update(extra_meta)
    (out_dir / "meta.json").write_text(json.dumps(meta, sort_keys=True, indent=2) + "\n")


def load_trajectory(src_dir) -> Trajectory:
    src_dir = Path(src_dir)
    meta = json.loads((src_dir / "meta.json").read_text())
    snapshots = []
    for epoch in meta["epochs"]:
        view, _ = load_param_view(src_dir / f"{epoch}.snap")
        snapshots.append(TrajectorySnapshot(epoch, view))
    recipe = TrainRecipe(**meta["recipe"])
    return Trajectory(snapshots=snapshots, recipe=recipe, clean_test_acc=meta["clean_test_acc"])
