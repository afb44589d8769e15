"""Shared image/class embedding space in which unlearnability is induced.

A small classifier CNN is fit on a split disjoint from the protected data;
image embeddings are its L2-normalized penultimate activations and the
per-class embeddings are the normalized classifier weight rows. The space is
frozen after fitting so it plays the role of a fixed public encoder.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .data import Dataset, SplitSpec, datasets_overlap, split_dataset
from .nets import (
    ParameterView,
    batch_to_tensor,
    init_parameters,
    load_param_view,
    save_param_view,
    _conv_block,
    _width,
)
from .seeding import fingerprint_module, numpy_stream
from .trajectory import TrainRecipe, TrainingDiverged, batch_indices

NORM_EPS = 1e-12


class EncoderNet(nn.Module):
    """Conv trunk, a linear projection to the embedding, and a class head."""

    def __init__(self, in_channels: int, num_classes: int, dim: int, width_scale: float = 1.0):
        super().__init__()
        c1, c2, c3 = (_width(c, width_scale) for c in (16, 32, 64))
        self.trunk = nn.Sequential(
            _conv_block(in_channels, c1),
            _conv_block(c1, c2, stride=2),
            _conv_block(c2, c3, stride=2),
        )
        self.project = nn.Linear(c3, dim)
        self.classify = nn.Linear(dim, num_classes)

    def embed_raw(self, x):
        z = self.trunk(x).mean(dim=(2, 3))
        return torch.tanh(self.project(z))

    def forward(self, x):
        return self.classify(self.embed_raw(x))


@dataclass
class EmbeddingSpace:
    encoder: nn.Module
    class_matrix: torch.Tensor  # K x d, unit rows
    dim: int
    in_shape: tuple
    width_scale: float
    provenance: dict

    def __post_init__(self):
        self.encoder.eval()
        for p in self.encoder.parameters():
            p.requires_grad_(False)
        norms = self.class_matrix.norm(dim=1)
        if not torch.allclose(norms, torch.ones_like(norms), atol=1e-6):
            raise ValueError("class matrix rows must be unit norm")

    @property
    def num_classes(self) -> int:
        return self.class_matrix.shape[0]

    def fingerprint(self) -> str:
        return fingerprint_module(self.encoder)


def fit_embedding_space(
    embed_split: Dataset,
    d: int,
    recipe: TrainRecipe,
    width_scale: float = 1.0,
    disjoint_from: Dataset | None = None,
    dtype: torch.dtype = torch.float32,
) -> EmbeddingSpace:
    """Train the surrogate encoder on ``embed_split`` and freeze it.

    A held-out fraction of the split is kept aside to report the encoder's own
    accuracy; the class matrix is the normalized final-layer weight rows.
    """
    if d < 2:
        raise ValueError("embedding dimension must be >= 2")
    if disjoint_from is not None and datasets_overlap(embed_split, disjoint_from):
        raise ValueError("embedding split overlaps the protected split")
    inner = split_dataset(
        embed_split,
        SplitSpec(fractions={"fit": 0.85, "heldout": 0.15}, seed=recipe.seed, stratified=True),
    )
    fit_ds, heldout = inner["fit"], inner["heldout"]
    h, w, c = embed_split.image_shape
    net = EncoderNet(c, embed_split.num_classes, d, width_scale).to(dtype)
    init_parameters(net, recipe.seed)
    rng = numpy_stream(recipe.seed, "embed-batches")
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
        for idx in batch_indices(fit_ds.n, recipe.batch_size, rng):
            x = batch_to_tensor(fit_ds.images[idx], dtype)
            y = torch.from_numpy(fit_ds.labels[idx])
            loss = F.cross_entropy(net(x), y)
            if not torch.isfinite(loss):
                raise TrainingDiverged(epoch)
            opt.zero_grad()
            loss.backward()
            opt.step()
    net.eval()
    from .nets import evaluate_accuracy

    heldout_acc = evaluate_accuracy(net, heldout, dtype=dtype)
    weight = net.classify.weight.detach().clone()
    class_matrix = weight / (weight.norm(dim=1, keepdim=True) + NORM_EPS)
    return EmbeddingSpace(
        encoder=net,
        class_matrix=class_matrix,
        dim=d,
        in_shape=(h, w, c),
        width_scale=width_scale,
        provenance={
            "train_data_hash": embed_split.content_hash(),
            "source_id": embed_split.source_id,
            "source_indices": (
                None
                if embed_split.source_indices is None
                else [int(i) for i in embed_split.source_indices]
            ),
            "seed": recipe.seed,
            "held_out_accuracy": heldout_acc,
        },
    )


def image_embed(space: EmbeddingSpace, x: torch.Tensor) -> torch.Tensor:
    """L2-normalized image embeddings; differentiable with respect to ``x``."""
    raw = space.encoder.embed_raw(x)
    norms = raw.norm(dim=1, keepdim=True)
    if bool((norms == 0).any()):
        bad = int(torch.nonzero(norms.reshape(-1) == 0)[0])
        raise ValueError(f"zero-norm raw embedding for sample {bad}")
    return raw / (norms + NORM_EPS)


def image_embed_array(space: EmbeddingSpace, images: np.ndarray, dtype=torch.float32) -> torch.Tensor:
    return image_embed(space, batch_to_tensor(images, dtype))


def class_embed(space: EmbeddingSpace, y: int) -> torch.Tensor:
    if not 0 <= int(y) < space.num_classes:
        raise ValueError(f"label {y} out of range [0, {space.num_classes})")
    return space.class_matrix[int(y)]


def least_similar_class(space: EmbeddingSpace, f_i: torch.Tensor, y: int):
    """The class c* != y whose embedding has minimal cosine similarity to
    ``f_i``; ties break toward the smaller class index. Returns (c*, row)."""
    if space.num_classes < 2:
        raise ValueError("need at least two classes")
    sims = space.class_matrix.to(f_i.dtype) @ f_i
    sims[int(y)] = torch.inf
    c_star = int(torch.argmin(sims))  # argmin returns the first minimal index
    return c_star, space.class_matrix[c_star]


def least_similar_rows(space: EmbeddingSpace, f_batch: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    """Batched least-similar class labels from clean embeddings."""
    sims = f_batch @ space.class_matrix.to(f_batch.dtype).T  # B x K
    sims = sims.clone()
    sims[torch.arange(len(y)), y] = torch.inf
    return sims.argmin(dim=1)


# ---------------------------------------------------------------------------
# Persistence: space/encoder.snap + space/classes.mat + space/meta.json


def save_embedding_space(space: EmbeddingSpace, out_dir) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    view = ParameterView.from_network(space.encoder)
    save_param_view(view, out_dir / "encoder.snap", meta={"kind": "embedding-encoder"})
    mat = space.class_matrix.detach().cpu().numpy().astype("<f8")
    (out_dir / "classes.mat").write_bytes(np.ascontiguousarray(mat).tobytes())
    meta = {
        "dim": space.dim,
        "num_classes": space.num_classes,
        "in_shape": list(space.in_shape),
        "width_scale": space.width_scale,
        "provenance": space.provenance,
    }
    (out_dir / "meta.json").write_text(json.dumps(meta, sort_keys=True, indent=2) + "\n")


def load_embedding_space(src_dir, dtype: torch.dtype = torch.float32) -> EmbeddingSpace:
    src_dir = Path(src_dir)
    meta = json.loads((src_dir / "meta.json").read_text())
    h, w, c = meta["in_shape"]
    net = EncoderNet(c, meta["num_classes"], meta["dim"], meta["width_scale"]).to(dtype)
    view, _ = load_param_view(src_dir / "encoder.snap")
    from .nets import load_params_into

    load_params_into(net, view)
    raw = np.frombuffer((src_dir / "classes.mat").read_bytes(), dtype="<f8")
    mat = torch.from_numpy(raw.reshape(meta["num_classes"], meta["dim"]).copy()).to(dtype)
    return EmbeddingSpace(
        encoder=net,
        class_matrix=mat,
        dim=meta["dim"],
        in_shape=tuple(meta["in_shape"]),
        width_scale=meta["width_scale"],
        provenance=meta["provenance"],
    )
