"""Dataset representation, ingestion, splitting, the perturbation clamp, and
bit-exact publication (export/import) of protected datasets.

Images are float arrays of shape N x H x W x C with values in [0, 1]; labels
are integers in [0, K). Published datasets are 8-bit lossless PNGs plus a
labels.csv and a manifest.json.
"""
from __future__ import annotations

import csv
import io
import json
import pickle
import tarfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .seeding import canonical_json, fingerprint_arrays, numpy_stream

MANIFEST_NAME = "manifest.json"
LABELS_NAME = "labels.csv"
IMAGES_DIR = "images"


@dataclass(frozen=True)
class PerturbationBudget:
    """Elementwise L-inf radius of the protective noise, on the [0,1] pixel scale."""

    rho: float

    def __post_init__(self):
        if not np.isfinite(self.rho) or not (0.0 <= self.rho <= 1.0):
            raise ValueError(f"rho must lie in [0, 1], got {self.rho!r}")


@dataclass(frozen=True)
class SplitSpec:
    fractions: dict
    seed: int
    stratified: bool = True

    def __post_init__(self):
        if not self.fractions:
            raise ValueError("fractions must name at least one split")
        total = 0.0
        for name, frac in self.fractions.items():
            if not (0.0 < frac <= 1.0):
                raise ValueError(f"fraction for split {name!r} must be in (0, 1], got {frac}")
            total += frac
        if total > 1.0 + 1e-9:
            raise ValueError(f"fractions sum to {total}, must be <= 1")


@dataclass
class Dataset:
    """An immutable labeled image collection.

    source_id / source_indices record which rows of which parent collection a
    split was drawn from, so downstream stages can enforce disjointness.
    """

    images: np.ndarray
    labels: np.ndarray
    class_names: tuple
    split_tag: str = "full"
    source_id: str = ""
    source_indices: np.ndarray | None = None
    _content_hash: str | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        imgs = np.asarray(self.images)
        if imgs.ndim != 4:
            raise ValueError(f"images must have shape N x H x W x C, got {imgs.shape}")
        if not np.issubdtype(imgs.dtype, np.floating):
            raise ValueError(f"images must be a float array, got dtype {imgs.dtype}")
        if imgs.shape[0] < 1:
            raise ValueError("dataset must contain at least one sample")
        if not np.all(np.isfinite(imgs)):
            bad = int(np.argwhere(~np.isfinite(imgs).all(axis=(1, 2, 3)))[0][0])
            raise ValueError(f"non-finite pixel values in record {bad}")
        if imgs.min() < 0.0 or imgs.max() > 1.0:
            bad = int(np.argwhere(((imgs < 0) | (imgs > 1)).any(axis=(1, 2, 3)))[0][0])
            raise ValueError(f"pixel values outside [0, 1] in record {bad}")
        labels = np.asarray(self.labels, dtype=np.int64)
        if labels.shape != (imgs.shape[0],):
            raise ValueError(f"labels shape {labels.shape} does not match {imgs.shape[0]} images")
        k = len(self.class_names)
        if k < 2:
            raise ValueError("at least two classes are required")
        if labels.min() < 0 or labels.max() >= k:
            bad = int(np.argwhere((labels < 0) | (labels >= k))[0][0])
            raise ValueError(f"label {labels[bad]} out of range [0, {k}) in record {bad}")
        object.__setattr__(self, "images", imgs)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "class_names", tuple(str(c) for c in self.class_names))
        imgs.setflags(write=False)
        labels.setflags(write=False)

    @property
    def n(self) -> int:
        return self.images.shape[0]

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    @property
    def image_shape(self) -> tuple:
        return tuple(self.images.shape[1:])

    def content_hash(self) -> str:
        if self._content_hash is None:
            object.__setattr__(
                self, "_content_hash", fingerprint_arrays([self.images, self.labels])
            )
        return self._content_hash

    def subset(self, indices: np.ndarray, split_tag: str) -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64)
        src = self.source_indices[idx] if self.source_indices is not None else idx
        return Dataset(
            images=self.images[idx].copy(),
            labels=self.labels[idx].copy(),
            class_names=self.class_names,
            split_tag=split_tag,
            source_id=self.source_id or self.content_hash(),
            source_indices=src,
        )


def datasets_overlap(a: Dataset, b: Dataset) -> bool:
    """True when a and b demonstrably share rows of the same parent collection."""
    if a.source_id and a.source_id == b.source_id:
        if a.source_indices is not None and b.source_indices is not None:
            return bool(np.intersect1d(a.source_indices, b.source_indices).size)
    return False


# ---------------------------------------------------------------------------
# Loading


def make_blobs(
    num_classes: int = 4,
    num_samples: int = 2000,
    image_size: int = 16,
    channels: int = 3,
    seed: int = 0,
    noise: float = 0.04,
    nuisance: float = 0.22,
) -> Dataset:
    """Render per-class Gaussian blobs into small images.

    Each class owns a blob center on a circle and a channel color; on top of
    the class signal every sample carries smooth random nuisance fields and
    pixel noise, so classifiers must actually select features (a flat corpus
    would make conditional learnability trivially impossible). Pixels are
    snapped to the 8-bit grid so the corpus behaves like real image data
    under export.
    """
    if num_classes < 2:
        raise ValueError("num_classes must be >= 2")
    rng = numpy_stream(seed, "blobs")
    h = w = int(image_size)
    angles = 2.0 * np.pi * np.arange(num_classes) / num_classes
    centers = np.stack(
        [
            h / 2.0 + 0.30 * h * np.sin(angles),
            w / 2.0 + 0.30 * w * np.cos(angles),
        ],
        axis=1,
    )
    color_phases = 2.0 * np.pi * np.arange(num_classes) / num_classes
    colors = 0.5 + 0.5 * np.cos(
        color_phases[:, None] + 2.0 * np.pi * np.arange(channels)[None, :] / max(channels, 1)
    )  # K x C, distinct per class
    sigma = 0.16 * h
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    labels = rng.integers(0, num_classes, size=num_samples)
    images = np.empty((num_samples, h, w, channels), dtype=np.float64)
    jitter = rng.uniform(-1.0, 1.0, size=(num_samples, 2))
    amps = rng.uniform(0.55, 0.75, size=num_samples)
    freq_u = rng.uniform(0.5, 1.5, size=(num_samples, channels, 2))
    phase = rng.uniform(0, 2 * np.pi, size=(num_samples, channels, 2))
    pix_noise = rng.normal(0.0, noise, size=images.shape)
    for i in range(num_samples):
        cy, cx = centers[labels[i]] + jitter[i]
        bump = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2.0 * sigma**2))
        img = 0.45 + amps[i] * bump[..., None] * colors[labels[i]][None, None, :]
        for c in range(channels):
            field = np.cos(
                2 * np.pi * freq_u[i, c, 0] * yy / h + phase[i, c, 0]
            ) * np.cos(2 * np.pi * freq_u[i, c, 1] * xx / w + phase[i, c, 1])
            img[..., c] += nuisance * field
        images[i] = img
    images = np.clip(images + pix_noise, 0.0, 1.0)
    images = np.rint(images * 255.0) / 255.0  # snap to the publishable grid
    names = tuple(f"blob{c}" for c in range(num_classes))
    return Dataset(
        images=images.astype(np.float32),
        labels=labels,
        class_names=names,
        split_tag="full",
    )


def _cifar_batch(raw: bytes, path: str):
    try:
        record = pickle.loads(raw, encoding="bytes")
        data = np.asarray(record[b"data"], dtype=np.uint8)
        labels = record.get(b"labels", record.get(b"fine_labels"))
    except Exception as exc:  # noqa: BLE001 - report the offending file
        raise ValueError(f"corrupt dataset batch {path!r}: {exc}") from exc
    if labels is None:
        raise ValueError(f"corrupt dataset batch {path!r}: no label field")
    return data, np.asarray(labels, dtype=np.int64)


def _read_cifar_members(read, names, split: str, path: str):
    if "data_batch_1" in names:  # CIFAR-10 layout
        files = [f"data_batch_{i}" for i in range(1, 6)] if split == "train" else ["test_batch"]
        class_names = _CIFAR10_CLASSES
    elif "train" in names:  # CIFAR-100 layout
        files = ["train"] if split == "train" else ["test"]
        class_names = tuple(f"class{i}" for i in range(100))
    else:
        raise FileNotFoundError(f"{path!r} does not look like a CIFAR-10/100 archive")
    data_parts, label_parts = [], []
    for name in files:
        raw = read(name)
        d, l = _cifar_batch(raw, name)
        data_parts.append(d)
        label_parts.append(l)
    data = np.concatenate(data_parts, axis=0)
    labels = np.concatenate(label_parts, axis=0)
    n = data.shape[0]
    images = data.reshape(n, 3, 32, 32).transpose(0, 2, 3, 1)
    images = (images.astype(np.float64) / 255.0).astype(np.float32)
    return images, labels, class_names


_CIFAR10_CLASSES = (
    "airplane", "automobile", "bird", "cat", "deer",
    "dog", "frog", "horse", "ship", "truck",
)


def load_cifar(source: Path, split: str = "train") -> Dataset:
    """Load a CIFAR-10/100 pickled-batch directory or .tar.gz archive."""
    source = Path(source)
    if source.is_dir():
        inner = [p for p in source.iterdir() if p.is_dir() and (p / "data_batch_1").exists()]
        root = inner[0] if inner and not (source / "data_batch_1").exists() else source
        names = {p.name for p in root.iterdir()}
        images, labels, class_names = _read_cifar_members(
            lambda name: (root / name).read_bytes(), names, split, str(source)
        )
    elif source.is_file() and source.name.endswith((".tar.gz", ".tgz", ".tar")):
        with tarfile.open(source) as tar:
            members = {Path(m.name).name: m for m in tar.getmembers() if m.isfile()}
            images, labels, class_names = _read_cifar_members(
                lambda name: tar.extractfile(members[name]).read(),
                set(members),
                split,
                str(source),
            )
    else:
        raise FileNotFoundError(f"unreadable dataset source: {source!r}")
    return Dataset(images=images, labels=labels, class_names=class_names, split_tag=split)


def load_dataset(source, **synthetic_kwargs) -> Dataset:
    """Load a dataset from a CIFAR directory/archive path or a builtin name.

    ``load_dataset("blobs", num_classes=4, ...)`` builds the synthetic corpus;
    any path is treated as a CIFAR-10/100 archive (pass split="test" for the
    held-out batch).
    """
    if isinstance(source, str) and source == "blobs":
        return make_blobs(**synthetic_kwargs)
    split = synthetic_kwargs.pop("split", "train")
    if synthetic_kwargs:
        raise TypeError(f"unexpected arguments for archive loading: {sorted(synthetic_kwargs)}")
    return load_cifar(Path(source), split=split)


# ---------------------------------------------------------------------------
# Splitting


def split_dataset(d: Dataset, spec: SplitSpec) -> dict:
    """Deterministically split ``d`` into disjoint named subsets.

    Stratified mode preserves per-class proportions within one sample while
    still hitting the exact global sizes; the same (dataset, spec) always
    yields the same index sets.
    """
    names = list(spec.fractions)
    fracs = [spec.fractions[nm] for nm in names]
    rng = numpy_stream(spec.seed, "split")
    targets = _allocate(d.n, fracs)
    order = rng.permutation(d.n)
    if spec.stratified:
        by_class = [order[d.labels[order] == c] for c in range(d.num_classes)]
        counts = _stratified_counts([len(ix) for ix in by_class], fracs, targets)
        assignments = {nm: [] for nm in names}
        for c, idx_c in enumerate(by_class):
            start = 0
            for s, nm in enumerate(names):
                assignments[nm].append(idx_c[start : start + counts[c][s]])
                start += counts[c][s]
        index_sets = {
            nm: np.sort(np.concatenate(parts)) for nm, parts in assignments.items()
        }
    else:
        index_sets = {}
        start = 0
        for nm, cnt in zip(names, targets):
            index_sets[nm] = np.sort(order[start : start + cnt])
            start += cnt
    out = {}
    for nm in names:
        idx = np.asarray(index_sets[nm], dtype=np.int64)
        if idx.size == 0:
            raise ValueError(f"split {nm!r} is empty after rounding")
        out[nm] = d.subset(idx, split_tag=nm)
    return out


def _allocate(n: int, fractions):
    """Largest-remainder allocation of n items over the fractions."""
    exact = [n * f for f in fractions]
    counts = [int(np.floor(e)) for e in exact]
    want = int(np.rint(sum(exact)))
    by_remainder = sorted(
        range(len(fractions)), key=lambda i: (-(exact[i] - counts[i]), i)
    )
    for j in by_remainder:
        if sum(counts) >= want:
            break
        counts[j] += 1
    return counts


def _stratified_counts(class_sizes, fractions, targets):
    """Per-(class, split) counts: floor quotas plus a largest-remainder fill
    constrained to the exact global split sizes."""
    counts = [[int(np.floor(n_c * f)) for f in fractions] for n_c in class_sizes]
    unassigned = [n_c - sum(row) for n_c, row in zip(class_sizes, counts)]
    deficits = [t - sum(row[s] for row in counts) for s, t in enumerate(targets)]
    cells = [
        (n_c * f - np.floor(n_c * f), c, s)
        for c, n_c in enumerate(class_sizes)
        for s, f in enumerate(fractions)
    ]
    cells.sort(key=lambda t: (-t[0], t[1], t[2]))
    for _ in range(2):  # second pass is a safety valve for skewed classes
        for _, c, s in cells:
            if deficits[s] > 0 and unassigned[c] > 0:
                counts[c][s] += 1
                deficits[s] -= 1
                unassigned[c] -= 1
        if not any(deficits):
            break
    return counts


# ---------------------------------------------------------------------------
# Budget clamp


def clamp_to_budget(raw: np.ndarray, x: np.ndarray, budget: PerturbationBudget) -> np.ndarray:
    """Project ``raw`` into the L-inf ball of radius rho around ``x``, then [0, 1].

    The returned array o satisfies max|o - x| <= rho under the same float
    subtraction a caller would perform (a nextafter nudge absorbs the rounding
    of x + rho), o is within [0, 1], and entries already satisfying both are
    returned unchanged. Idempotent.
    """
    raw = np.asarray(raw)
    x = np.asarray(x)
    if raw.shape != x.shape:
        raise ValueError(f"shape mismatch: raw {raw.shape} vs reference {x.shape}")
    rho = np.float64(budget.rho)
    out = np.clip(raw, x - raw.dtype.type(budget.rho), x + raw.dtype.type(budget.rho))
    np.clip(out, 0.0, 1.0, out=out)
    # Float rounding of x +/- rho can leave the recomputed deviation a few
    # ulps above rho; nudge offending entries toward x until the float64
    # check (the one every downstream verification performs) holds.
    for _ in range(8):
        over = np.abs(out.astype(np.float64) - x.astype(np.float64)) > rho
        if not over.any():
            break
        out[over] = np.nextafter(out[over], x[over].astype(out.dtype))
    return out


# ---------------------------------------------------------------------------
# Publication (export / import)


def quantize_images(images: np.ndarray) -> np.ndarray:
    """Round-to-nearest 8-bit quantization of [0,1] pixels."""
    return np.rint(np.asarray(images, dtype=np.float64) * 255.0).astype(np.uint8)


def dequantize_images(quantized: np.ndarray) -> np.ndarray:
    return (quantized.astype(np.float64) / 255.0).astype(np.float32)


def export_uge_dataset(
    d_u: Dataset,
    x_reference: Dataset,
    out_dir,
    budget: PerturbationBudget,
    extra_manifest: dict | None = None,
) -> dict:
    """Publish ``d_u`` as 8-bit lossless PNGs + labels.csv + manifest.json.

    Fails hard if any sample violates the budget relative to ``x_reference``
    before quantization. Returns the manifest dict.
    """
    if d_u.n != x_reference.n or d_u.image_shape != x_reference.image_shape:
        raise ValueError("protected dataset and reference are not aligned")
    deviation = np.abs(
        d_u.images.astype(np.float64) - x_reference.images.astype(np.float64)
    ).max()
    if deviation > budget.rho:
        raise ValueError(
            f"budget violated before quantization: max deviation {deviation} > rho {budget.rho}"
        )
    out_dir = Path(out_dir)
    img_dir = out_dir / IMAGES_DIR
    img_dir.mkdir(parents=True, exist_ok=True)
    quant = quantize_images(d_u.images)
    for i in range(d_u.n):
        arr = quant[i]
        if arr.shape[-1] == 1:
            img = Image.fromarray(arr[..., 0], mode="L")
        elif arr.shape[-1] == 3:
            img = Image.fromarray(arr, mode="RGB")
        else:
            raise ValueError(f"unsupported channel count {arr.shape[-1]}")
        img.save(img_dir / f"{i:06d}.png", format="PNG")
    with open(out_dir / LABELS_NAME, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["index", "label"])
        for i, lbl in enumerate(d_u.labels):
            writer.writerow([i, int(lbl)])
    manifest = {
        "format": "uge-dataset-v1",
        "count": int(d_u.n),
        "image_shape": list(d_u.image_shape),
        "class_names": list(d_u.class_names),
        "rho": float(budget.rho),
        "max_pre_quantization_deviation": float(deviation),
        "split_tag": d_u.split_tag,
    }
    if extra_manifest:
        manifest.update(extra_manifest)
    (out_dir / MANIFEST_NAME).write_text(canonical_json(manifest) + "\n")
    return manifest


def import_uge_dataset(src_dir) -> Dataset:
    """Re-load a published dataset; ordering follows labels.csv."""
    src_dir = Path(src_dir)
    manifest_path = src_dir / MANIFEST_NAME
    if not manifest_path.exists():
        raise FileNotFoundError(f"missing manifest: {manifest_path}")
    manifest = json.loads(manifest_path.read_text())
    with open(src_dir / LABELS_NAME, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header != ["index", "label"]:
            raise ValueError(f"unexpected labels.csv header: {header}")
        rows = [(int(ix), int(lbl)) for ix, lbl in reader]
    if len(rows) != manifest["count"]:
        raise ValueError(
            f"labels.csv has {len(rows)} rows but manifest declares {manifest['count']}"
        )
    h, w, c = manifest["image_shape"]
    images = np.empty((len(rows), h, w, c), dtype=np.uint8)
    labels = np.empty(len(rows), dtype=np.int64)
    for pos, (idx, lbl) in enumerate(rows):
        path = src_dir / IMAGES_DIR / f"{idx:06d}.png"
        if not path.exists():
            raise FileNotFoundError(f"missing image file for index {idx}: {path}")
        arr = np.asarray(Image.open(path))
        if arr.ndim == 2:
            arr = arr[..., None]
        images[pos] = arr
        labels[pos] = lbl
    return Dataset(
        images=dequantize_images(images),
        labels=labels,
        class_names=tuple(manifest["class_names"]),
        split_tag=manifest.get("split_tag", "imported"),
    )


def png_bytes(image_u8: np.ndarray) -> bytes:
    """Independent in-memory PNG encode, used by round-trip oracles."""
    buf = io.BytesIO()
    mode = "L" if image_u8.shape[-1] == 1 else "RGB"
    arr = image_u8[..., 0] if mode == "L" else image_u8
    Image.fromarray(arr, mode=mode).save(buf, format="PNG")
    return buf.getvalue()
