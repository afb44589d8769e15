"""Quantify learnability and unlearnability: train networks on clean or
protected data under the normal and distillation schemes, run the ablation
grid, the noise-radius sweep, multi-authorized and federated scenarios, and
emit machine-readable reports plus plots."""
from __future__ import annotations

import csv
import json
import time
from dataclasses import dataclass, field, replace

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .data import Dataset, PerturbationBudget
from .embedspace import EmbeddingSpace
from .genengine import UGEConfig, run_generation
from .losses import LossWeights, kd_divergence
from .nets import (
    GeneratorSpec,
    NetworkSpec,
    batch_to_tensor,
    build_network,
    evaluate_accuracy,
)
from .seeding import canonical_json, numpy_stream, substream_seed
from .trajectory import (
    Trajectory,
    TrainRecipe,
    TrainingDiverged,
    batch_indices,
    record_trajectory,
)

METHODS = ("original", "unlearn", "undistill", "uges_no_ud", "uges")


# ---------------------------------------------------------------------------
# Trainers


def _fit(
    net: nn.Module,
    train: Dataset,
    recipe: TrainRecipe,
    objective,
    dtype: torch.dtype,
    audit_log: list | None,
) -> nn.Module:
    rng = numpy_stream(recipe.seed, "fit-batches")
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
            loss, terms, labels_used = objective(net, x, y)
            if not torch.isfinite(loss):
                raise TrainingDiverged(epoch)
            if audit_log is not None:
                audit_log.append({"objective_terms": terms, "labels_in_objective": labels_used})
            opt.zero_grad()
            loss.backward()
            opt.step()
    net.eval()
    return net


def train_normal(
    spec: NetworkSpec,
    train: Dataset,
    test: Dataset,
    recipe: TrainRecipe,
    dtype: torch.dtype = torch.float32,
    audit_log: list | None = None,
):
    """Plain cross-entropy training from the spec's seeded init; returns
    (network, test accuracy)."""

    def objective(net, x, y):
        return F.cross_entropy(net(x), y), ("cross_entropy",), True

    net = build_network(spec, dtype=dtype)
    net = _fit(net, train, recipe, objective, dtype, audit_log)
    return net, evaluate_accuracy(net, test, dtype=dtype)


def train_distill(
    student_spec: NetworkSpec,
    teacher: nn.Module,
    train_images: Dataset,
    test: Dataset,
    recipe: TrainRecipe,
    temperature: float,
    use_labels: bool = False,
    dtype: torch.dtype = torch.float32,
    audit_log: list | None = None,
):
    """Distill the frozen teacher's soft outputs into a fresh student on the
    given images; labels never enter the objective unless use_labels is set."""
    teacher.eval()
    for p in teacher.parameters():
        p.requires_grad_(False)

    def objective(net, x, y):
        with torch.no_grad():
            t_logits = teacher(x)
        loss = kd_divergence(t_logits, net(x), temperature)
        if use_labels:
            return loss + F.cross_entropy(net(x), y), ("kd_divergence", "cross_entropy"), True
        return loss, ("kd_divergence",), False

    student = build_network(student_spec, dtype=dtype)
    student = _fit(student, train_images, recipe, objective, dtype, audit_log)
    return student, evaluate_accuracy(student, test, dtype=dtype)


# ---------------------------------------------------------------------------
# Report container


@dataclass
class EvaluationReport:
    rows: list = field(default_factory=list)
    metadata: dict = field(default_factory=dict)

    def add_row(self, method, scheme, network_spec: NetworkSpec, seed, test_accuracy,
                baseline: str | None = None):
        self.rows.append(
            {
                "method": method,
                "scheme": scheme,
                "network": network_spec.label(),
                "network_spec": {
                    "family": network_spec.family,
                    "num_classes": network_spec.num_classes,
                    "width_scale": network_spec.width_scale,
                    "seed": network_spec.seed,
                    "in_shape": list(network_spec.in_shape),
                },
                "seed": int(seed),
                "test_accuracy": float(test_accuracy),
                "baseline": baseline,
                "delta_vs_clean": 0.0,
            }
        )

    def row_key(self, row) -> str:
        return f"{row['method']}/{row['scheme']}/{row['network']}"

    def finalize(self) -> "EvaluationReport":
        """Sort rows canonically and recompute every delta from its baseline."""
        self.rows.sort(key=self.row_key)
        by_key = {self.row_key(r): r for r in self.rows}
        for row in self.rows:
            base = by_key.get(row["baseline"]) if row["baseline"] else row
            row["delta_vs_clean"] = row["test_accuracy"] - base["test_accuracy"]
        return self

    def get(self, method, scheme, network_label):
        for row in self.rows:
            if (row["method"], row["scheme"], row["network"]) == (method, scheme, network_label):
                return row
        raise KeyError(f"no row {method}/{scheme}/{network_label}")


def cell_seed(master_seed: int, method: str, scheme: str, network_label: str) -> int:
    """Per-evaluation-cell training seed; isolated so changing one network's
    identity cannot perturb any other cell."""
    return substream_seed(master_seed, "eval", method, scheme, network_label)


# ---------------------------------------------------------------------------
# Scenario context


@dataclass
class EvalContext:
    """Shared prerequisites for the evaluation scenarios."""

    protect: Dataset
    test: Dataset
    authorized: list  # [(NetworkSpec, Trajectory)]
    space: EmbeddingSpace
    budget: PerturbationBudget
    weights: LossWeights
    generator_spec: GeneratorSpec
    generator_recipe: TrainRecipe
    hacker_proxy: NetworkSpec
    eval_networks: list  # hacker NetworkSpecs trained during evaluation
    eval_recipe: TrainRecipe
    master_seed: int
    trajectory_recipe: TrainRecipe | None = None
    trajectory_keep_every: int = 1
    gm_mode: str = "per-group"
    snapshots_per_step: int = 1
    min_snapshot_epoch: int = 0
    optimizer: str = "adam"
    dtype: torch.dtype = torch.float32

    def uge_config(self, weights: LossWeights | None = None,
                   budget: PerturbationBudget | None = None,
                   authorized: list | None = None) -> UGEConfig:
        return UGEConfig(
            budget=budget or self.budget,
            weights=weights or self.weights,
            generator=self.generator_spec,
            generator_recipe=self.generator_recipe,
            authorized=authorized or self.authorized,
            hacker_proxy=self.hacker_proxy,
            embedding=self.space,
            master_seed=self.master_seed,
            snapshots_per_step=self.snapshots_per_step,
            min_snapshot_epoch=self.min_snapshot_epoch,
            gm_mode=self.gm_mode,
            optimizer=self.optimizer,
        )


METHOD_WEIGHTS = {
    "original": None,
    "unlearn": dict(lambda_gm=0.0, lambda_ud=0.0),
    "undistill": dict(lambda_gm=0.0, lambda_fd=0.0),
    "uges_no_ud": dict(lambda_ud=0.0),
    "uges": dict(),
}


def variant_dataset(ctx: EvalContext, method: str) -> Dataset:
    """The training set a given ablation method sees: clean data for
    "original", otherwise a generation rerun with the matching terms zeroed."""
    if method not in METHOD_WEIGHTS:
        raise ValueError(f"unknown ablation method {method!r}")
    if method == "original":
        return ctx.protect
    weights = replace(ctx.weights, **METHOD_WEIGHTS[method])
    d_u, _, _ = run_generation(ctx.uge_config(weights=weights), ctx.protect, dtype=ctx.dtype)
    return d_u


def _recipe_with_seed(recipe: TrainRecipe, seed: int) -> TrainRecipe:
    return replace(recipe, seed=seed)


# ---------------------------------------------------------------------------
# Scenarios


def run_ablation(ctx: EvalContext, methods=METHODS) -> EvaluationReport:
    """One row per (method, scheme, network): authorized under normal
    training, every evaluation network under normal training and under
    distillation from the authorized network trained on the same data."""
    report = EvaluationReport(metadata={"scenario": "ablation", "methods": list(methods)})
    auth_spec = ctx.authorized[0][0]
    start = time.time()
    for method in methods:
        data = variant_dataset(ctx, method)
        seed = cell_seed(ctx.master_seed, method, "normal", auth_spec.label())
        teacher, auth_acc = train_normal(
            auth_spec, data, ctx.test, _recipe_with_seed(ctx.eval_recipe, seed), dtype=ctx.dtype
        )
        report.add_row(method, "normal", auth_spec, seed, auth_acc,
                       baseline=f"original/normal/{auth_spec.label()}")
        for spec in ctx.eval_networks:
            seed = cell_seed(ctx.master_seed, method, "normal", spec.label())
            _, acc = train_normal(
                spec, data, ctx.test, _recipe_with_seed(ctx.eval_recipe, seed), dtype=ctx.dtype
            )
            report.add_row(method, "normal", spec, seed, acc,
                           baseline=f"original/normal/{spec.label()}")
        for spec in ctx.eval_networks:
            seed = cell_seed(ctx.master_seed, method, "distill", spec.label())
            _, acc = train_distill(
                spec, teacher, data, ctx.test,
                _recipe_with_seed(ctx.eval_recipe, seed), ctx.weights.kd_temperature,
                dtype=ctx.dtype,
            )
            report.add_row(method, "distill", spec, seed, acc,
                           baseline=f"original/normal/{spec.label()}")
    report.metadata["runtime_seconds"] = time.time() - start
    return report.finalize()


def run_rho_sweep(ctx: EvalContext, rho_list, plot_path=None):
    """(rho, authorized accuracy, hacker accuracy) per radius; prerequisites
    (trajectory, embedding space) are shared across the sweep."""
    if not rho_list:
        raise ValueError("rho_list must be nonempty")
    for rho in rho_list:
        if not 0.0 <= rho <= 1.0:
            raise ValueError(f"rho {rho} outside [0, 1]")
    auth_spec = ctx.authorized[0][0]
    hacker_spec = ctx.eval_networks[0] if ctx.eval_networks else None
    records = []
    for rho in rho_list:
        d_u, _, _ = run_generation(
            ctx.uge_config(budget=PerturbationBudget(rho)), ctx.protect, dtype=ctx.dtype
        )
        seed = cell_seed(ctx.master_seed, f"rho={rho}", "normal", auth_spec.label())
        _, auth_acc = train_normal(
            auth_spec, d_u, ctx.test, _recipe_with_seed(ctx.eval_recipe, seed), dtype=ctx.dtype
        )
        hacker_acc = None
        if hacker_spec is not None:
            seed = cell_seed(ctx.master_seed, f"rho={rho}", "normal", hacker_spec.label())
            _, hacker_acc = train_normal(
                hacker_spec, d_u, ctx.test, _recipe_with_seed(ctx.eval_recipe, seed),
                dtype=ctx.dtype,
            )
        records.append(
            {"rho": float(rho), "authorized_accuracy": auth_acc, "hacker_accuracy": hacker_acc}
        )
    if plot_path is not None:
        _plot_rho_sweep(records, plot_path)
    return records


def run_multi_authorized(ctx: EvalContext) -> EvaluationReport:
    """Generation against all K authorized networks at once; per-network
    accuracy rows plus hacker rows under normal training and per-teacher
    distillation (Distill-k). K=1 reproduces the single-network path."""
    k_total = len(ctx.authorized)
    report = EvaluationReport(
        metadata={"scenario": "multi-authorized", "num_authorized": k_total}
    )
    d_u, _, _ = run_generation(ctx.uge_config(), ctx.protect, dtype=ctx.dtype)
    teachers = []
    for spec, _ in ctx.authorized:
        for method, data in (("original", ctx.protect), ("uges", d_u)):
            seed = cell_seed(ctx.master_seed, method, "normal", spec.label())
            net, acc = train_normal(
                spec, data, ctx.test, _recipe_with_seed(ctx.eval_recipe, seed), dtype=ctx.dtype
            )
            report.add_row(method, "normal", spec, seed, acc,
                           baseline=f"original/normal/{spec.label()}")
            if method == "uges":
                teachers.append(net)
    for spec in ctx.eval_networks:
        for method, data in (("original", ctx.protect), ("uges", d_u)):
            seed = cell_seed(ctx.master_seed, method, "normal", spec.label())
            _, acc = train_normal(
                spec, data, ctx.test, _recipe_with_seed(ctx.eval_recipe, seed), dtype=ctx.dtype
            )
            report.add_row(method, "normal", spec, seed, acc,
                           baseline=f"original/normal/{spec.label()}")
        for k, teacher in enumerate(teachers):
            scheme = "distill" if k_total == 1 else f"distill-{k + 1}"
            seed = cell_seed(ctx.master_seed, "uges", scheme, spec.label())
            _, acc = train_distill(
                spec, teacher, d_u, ctx.test,
                _recipe_with_seed(ctx.eval_recipe, seed), ctx.weights.kd_temperature,
                dtype=ctx.dtype,
            )
            report.add_row("uges", scheme, spec, seed, acc,
                           baseline=f"original/normal/{spec.label()}")
    return report.finalize()


# ---------------------------------------------------------------------------
# Federated scenario with a data-access audit


class AuditedArray(np.ndarray):
    """ndarray that logs every indexed read with the audit's current phase."""

    _audit = None
    _shard = None

    def __getitem__(self, idx):
        if self._audit is not None:
            self._audit.record(self._shard)
        out = super().__getitem__(idx)
        return np.asarray(out) if isinstance(out, AuditedArray) else out


class DataAccessAudit:
    """Phase-tagged log of shard reads; any read of a foreign shard during a
    per-server phase is a locality violation."""

    def __init__(self):
        self.events = []
        self.phase = "setup"

    def begin_phase(self, phase: str):
        self.phase = phase

    def record(self, shard: str):
        self.events.append({"phase": self.phase, "shard": shard})

    def wrap(self, dataset: Dataset, shard: str) -> Dataset:
        images = dataset.images.view(AuditedArray)
        images._audit = self
        images._shard = shard
        labels = dataset.labels.view(AuditedArray)
        labels._audit = self
        labels._shard = shard
        wrapped = Dataset.__new__(Dataset)
        for name, value in vars(dataset).items():
            object.__setattr__(wrapped, name, value)
        object.__setattr__(wrapped, "images", images)
        object.__setattr__(wrapped, "labels", labels)
        return wrapped

    def reads(self, phase: str, shard: str) -> int:
        return sum(1 for e in self.events if e["phase"] == phase and e["shard"] == shard)

    def violations(self) -> list:
        bad = []
        for e in self.events:
            if e["phase"].startswith("server") and not e["phase"].startswith(f"server{e['shard']}"):
                bad.append(e)
        return bad


def run_federated_scenario(ctx: EvalContext, class_partition):
    """Two virtual servers each protect a disjoint class shard without seeing
    the other's data; the shared authorized network then trains on the union.

    Returns (EvaluationReport, DataAccessAudit).
    """
    shard_classes = [set(int(c) for c in part) for part in class_partition]
    if len(shard_classes) != 2 or shard_classes[0] & shard_classes[1]:
        raise ValueError("class partition must be two disjoint class sets")
    if shard_classes[0] | shard_classes[1] != set(range(ctx.protect.num_classes)):
        raise ValueError("class partition must cover every class")
    if ctx.trajectory_recipe is None:
        raise ValueError("federated scenario needs a trajectory recipe")
    audit = DataAccessAudit()
    auth_spec = ctx.authorized[0][0]
    shards, protected_parts = [], []
    for k, classes in enumerate(shard_classes, start=1):
        mask = np.isin(ctx.protect.labels, sorted(classes))
        shard = ctx.protect.subset(np.nonzero(mask)[0], split_tag=f"shard{k}")
        shards.append(audit.wrap(shard, shard=str(k)))
    for k, shard in enumerate(shards, start=1):
        audit.begin_phase(f"server{k}-generation")
        net = build_network(auth_spec, dtype=ctx.dtype)
        traj = record_trajectory(
            net, shard, shard, ctx.trajectory_recipe,
            keep_every=ctx.trajectory_keep_every, dtype=ctx.dtype,
        )
        config = ctx.uge_config(authorized=[(auth_spec, traj)])
        d_u_k, _, _ = run_generation(config, shard, dtype=ctx.dtype)
        protected_parts.append(d_u_k)
        if audit.violations():
            raise RuntimeError(f"shard locality violated: {audit.violations()[:3]}")
    audit.begin_phase("global")
    union = Dataset(
        images=np.concatenate([p.images for p in protected_parts]),
        labels=np.concatenate([p.labels for p in protected_parts]),
        class_names=ctx.protect.class_names,
        split_tag="uge-union",
    )
    report = EvaluationReport(
        metadata={"scenario": "federated",
                  "class_partition": [sorted(c) for c in shard_classes]}
    )
    seed = cell_seed(ctx.master_seed, "original", "joint", auth_spec.label())
    _, joint_acc = train_normal(
        auth_spec, ctx.protect, ctx.test,
        _recipe_with_seed(ctx.eval_recipe, seed), dtype=ctx.dtype,
    )
    report.add_row("original", "joint", auth_spec, seed, joint_acc,
                   baseline=f"original/joint/{auth_spec.label()}")
    seed = cell_seed(ctx.master_seed, "uges", "federated-global", auth_spec.label())
    global_net, global_acc = train_normal(
        auth_spec, union, ctx.test, _recipe_with_seed(ctx.eval_recipe, seed), dtype=ctx.dtype
    )
    report.add_row("uges", "federated-global", auth_spec, seed, global_acc,
                   baseline=f"original/joint/{auth_spec.label()}")
    for k, (classes, d_u_k) in enumerate(zip(shard_classes, protected_parts), start=1):
        test_mask = np.isin(ctx.test.labels, sorted(classes))
        local_test = ctx.test.subset(np.nonzero(test_mask)[0], split_tag=f"test-shard{k}")
        seed = cell_seed(ctx.master_seed, "uges", f"federated-server{k}", auth_spec.label())
        _, acc = train_normal(
            auth_spec, d_u_k, local_test, _recipe_with_seed(ctx.eval_recipe, seed),
            dtype=ctx.dtype,
        )
        report.add_row("uges", f"federated-server{k}", auth_spec, seed, acc,
                       baseline=f"original/joint/{auth_spec.label()}")
    for spec in ctx.eval_networks:
        seed = cell_seed(ctx.master_seed, "original", "normal", spec.label())
        _, clean_acc = train_normal(
            spec, ctx.protect, ctx.test, _recipe_with_seed(ctx.eval_recipe, seed),
            dtype=ctx.dtype,
        )
        report.add_row("original", "normal", spec, seed, clean_acc,
                       baseline=f"original/normal/{spec.label()}")
        seed = cell_seed(ctx.master_seed, "uges", "normal", spec.label())
        _, union_acc = train_normal(
            spec, union, ctx.test, _recipe_with_seed(ctx.eval_recipe, seed), dtype=ctx.dtype
        )
        report.add_row("uges", "normal", spec, seed, union_acc,
                       baseline=f"original/normal/{spec.label()}")
        seed = cell_seed(ctx.master_seed, "uges", "distill", spec.label())
        _, distill_acc = train_distill(
            spec, global_net, union, ctx.test,
            _recipe_with_seed(ctx.eval_recipe, seed), ctx.weights.kd_temperature,
            dtype=ctx.dtype,
        )
        report.add_row("uges", "distill", spec, seed, distill_acc,
                       baseline=f"original/normal/{spec.label()}")
    return report.finalize(), audit


# ---------------------------------------------------------------------------
# Emission


def emit_report(report: EvaluationReport, out_dir, rho_records=None) -> list:
    """Write report.json (canonical), report.csv, and static plots.

    Wall-clock runtimes are split into timings.json so that identical-config
    reruns emit byte-identical report.json.
    """
    from pathlib import Path

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    report.finalize()
    by_key = {report.row_key(r): r for r in report.rows}
    for row in report.rows:
        base = by_key.get(row["baseline"]) if row["baseline"] else row
        if abs(row["delta_vs_clean"] - (row["test_accuracy"] - base["test_accuracy"])) > 1e-9:
            raise ValueError(f"stored delta inconsistent for {report.row_key(row)}")
    metadata = dict(report.metadata)
    timings = {k: metadata.pop(k) for k in list(metadata) if k.startswith("runtime")}
    payload = {"metadata": metadata, "rows": report.rows}
    if rho_records is not None:
        payload["rho_sweep"] = rho_records
    written = []
    json_path = out_dir / "report.json"
    json_path.write_text(canonical_json(payload) + "\n")
    written.append(json_path)
    if timings:
        (out_dir / "timings.json").write_text(canonical_json(timings) + "\n")
    csv_path = out_dir / "report.csv"
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["method", "scheme", "network", "seed", "test_accuracy", "delta_vs_clean"])
        for row in report.rows:
            writer.writerow(
                [row["method"], row["scheme"], row["network"], row["seed"],
                 repr(row["test_accuracy"]), repr(row["delta_vs_clean"])]
            )
    written.append(csv_path)
    if report.rows:
        bar_path = out_dir / "accuracy_bars.png"
        _plot_accuracy_bars(report, bar_path)
        written.append(bar_path)
    if rho_records:
        line_path = out_dir / "rho_sweep.png"
        _plot_rho_sweep(rho_records, line_path)
        written.append(line_path)
    return written


def _agg() -> "object":
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


_PNG_META = {"Software": None}  # keep emitted plots byte-stable


def _plot_accuracy_bars(report: EvaluationReport, path) -> None:
    plt = _agg()
    cells = sorted({(r["method"], r["scheme"]) for r in report.rows})
    networks = sorted({r["network"] for r in report.rows})
    fig, ax = plt.subplots(figsize=(max(6, 1.6 * len(cells)), 4))
    width = 0.8 / max(len(networks), 1)
    for j, net_label in enumerate(networks):
        xs, ys = [], []
        for i, (method, scheme) in enumerate(cells):
            for r in report.rows:
                if (r["method"], r["scheme"], r["network"]) == (method, scheme, net_label):
                    xs.append(i + j * width)
                    ys.append(100.0 * r["test_accuracy"])
        ax.bar(xs, ys, width=width, label=net_label)
    ax.set_xticks([i + 0.4 for i in range(len(cells))])
    ax.set_xticklabels([f"{m}\n{s}" for m, s in cells], fontsize=7)
    ax.set_ylabel("test accuracy (%)")
    ax.legend(fontsize=6)
    fig.tight_layout()
    fig.savefig(path, dpi=120, metadata=_PNG_META)
    plt.close(fig)


def _plot_rho_sweep(records, path) -> None:
    plt = _agg()
    rhos = [r["rho"] for r in records]
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot(rhos, [100.0 * r["authorized_accuracy"] for r in records], marker="o",
            label="authorized")
    if all(r["hacker_accuracy"] is not None for r in records):
        ax.plot(rhos, [100.0 * r["hacker_accuracy"] for r in records], marker="s",
                label="hacker")
    ax.set_xlabel("noise radius")
    ax.set_ylabel("test accuracy (%)")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120, metadata=_PNG_META)
    plt.close(fig)
