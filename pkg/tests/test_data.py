import pickle
import tarfile

import numpy as np
import pytest

from ugeforge.data import (
    Dataset,
    PerturbationBudget,
    SplitSpec,
    clamp_to_budget,
    dequantize_images,
    export_uge_dataset,
    import_uge_dataset,
    load_dataset,
    make_blobs,
    png_bytes,
    quantize_images,
    split_dataset,
)


def test_dataset_invariants_enforced():
    good = np.zeros((3, 4, 4, 1), dtype=np.float32)
    labels = np.array([0, 1, 0])
    Dataset(good, labels, ("a", "b"))
    with pytest.raises(ValueError, match="out of range"):
        Dataset(good, np.array([0, 2, 0]), ("a", "b"))
    with pytest.raises(ValueError, match=r"outside \[0, 1\]"):
        Dataset(good + 2.0, labels, ("a", "b"))
    bad = good.copy()
    bad[1, 0, 0, 0] = np.nan
    with pytest.raises(ValueError, match="record 1"):
        Dataset(bad, labels, ("a", "b"))
    with pytest.raises(ValueError, match="two classes"):
        Dataset(good, np.zeros(3, dtype=np.int64), ("only",))


def test_blobs_deterministic_and_valid():
    a = make_blobs(num_classes=4, num_samples=200, image_size=16, seed=5)
    b = make_blobs(num_classes=4, num_samples=200, image_size=16, seed=5)
    assert np.array_equal(a.images, b.images)
    assert np.array_equal(a.labels, b.labels)
    c = make_blobs(num_classes=4, num_samples=200, image_size=16, seed=6)
    assert not np.array_equal(a.images, c.images)
    assert a.images.shape == (200, 16, 16, 1)
    assert set(np.unique(a.labels)) <= set(range(4))


def test_blobs_linearly_separable_by_least_squares_probe():
    # independent oracle: closed-form ridge regression on raw pixels
    train = make_blobs(num_classes=4, num_samples=1500, image_size=16, seed=21)
    test = make_blobs(num_classes=4, num_samples=500, image_size=16, seed=22)
    X = train.images.reshape(train.n, -1).astype(np.float64)
    X = np.hstack([X, np.ones((train.n, 1))])
    Y = np.eye(4)[train.labels]
    W = np.linalg.solve(X.T @ X + 1e-3 * np.eye(X.shape[1]), X.T @ Y)
    Xt = test.images.reshape(test.n, -1).astype(np.float64)
    Xt = np.hstack([Xt, np.ones((test.n, 1))])
    acc = float((np.argmax(Xt @ W, axis=1) == test.labels).mean())
    assert acc >= 0.95


def test_split_sizes_exact():
    d = make_blobs(num_classes=4, num_samples=1000, image_size=8, seed=1)
    spec = SplitSpec(fractions={"protect": 0.5, "embed": 0.3, "test": 0.2}, seed=9)
    parts = split_dataset(d, spec)
    assert {k: v.n for k, v in parts.items()} == {"protect": 500, "embed": 300, "test": 200}


def test_split_disjoint_and_deterministic():
    d = make_blobs(num_classes=4, num_samples=400, image_size=8, seed=2)
    spec = SplitSpec(fractions={"a": 0.6, "b": 0.4}, seed=4)
    p1 = split_dataset(d, spec)
    p2 = split_dataset(d, spec)
    for name in ("a", "b"):
        assert np.array_equal(p1[name].source_indices, p2[name].source_indices)
        assert np.array_equal(p1[name].images, p2[name].images)
    # exhaustive disjointness check over the index sets
    inter = np.intersect1d(p1["a"].source_indices, p1["b"].source_indices)
    assert inter.size == 0
    assert len(p1["a"].source_indices) + len(p1["b"].source_indices) == d.n


def test_split_stratified_balance():
    labels = np.tile(np.arange(10), 50)  # balanced 10-class set, 500 samples
    images = np.zeros((500, 4, 4, 1), dtype=np.float32)
    d = Dataset(images, labels, tuple(str(i) for i in range(10)))
    parts = split_dataset(d, SplitSpec(fractions={"x": 0.7, "y": 0.3}, seed=0))
    for name, frac in (("x", 0.7), ("y", 0.3)):
        counts = np.bincount(parts[name].labels, minlength=10)
        assert counts.max() - counts.min() <= 1
        assert abs(counts.mean() - 50 * frac) <= 1


def test_split_empty_split_rejected():
    d = make_blobs(num_classes=2, num_samples=10, image_size=8, seed=0)
    with pytest.raises(ValueError, match="empty"):
        split_dataset(d, SplitSpec(fractions={"a": 0.99, "b": 0.01}, seed=0))


def test_clamp_saturates_at_budget():
    x = np.full((2, 3, 3, 1), 0.5, dtype=np.float64)
    raw = np.full_like(x, 0.9)
    out = clamp_to_budget(raw, x, PerturbationBudget(0.04))
    assert np.allclose(out, 0.54)


def test_clamp_identity_and_idempotence():
    rng = np.random.default_rng(0)
    x = rng.uniform(0, 1, size=(4, 8, 8, 3))
    assert np.array_equal(clamp_to_budget(x.copy(), x, PerturbationBudget(0.1)), x)
    raw = rng.uniform(0, 1, size=x.shape)
    once = clamp_to_budget(raw, x, PerturbationBudget(0.04))
    twice = clamp_to_budget(once, x, PerturbationBudget(0.04))
    assert np.array_equal(once, twice)


def test_clamp_brute_force_budget_scan():
    # elementwise oracle over 10^6 entries: every output obeys both bounds
    rng = np.random.default_rng(42)
    x = rng.uniform(0, 1, size=(1000, 1000)).astype(np.float64)
    raw = rng.uniform(0, 1, size=x.shape)
    out = clamp_to_budget(raw, x, PerturbationBudget(0.04))
    assert float(np.abs(out - x).max()) <= 0.04
    assert out.min() >= 0.0 and out.max() <= 1.0
    inside = (np.abs(raw - x) <= 0.04) & (raw >= 0) & (raw <= 1)
    assert np.array_equal(out[inside], raw[inside])


def test_clamp_shape_mismatch():
    with pytest.raises(ValueError, match="shape mismatch"):
        clamp_to_budget(np.zeros((2, 2)), np.zeros((3, 2)), PerturbationBudget(0.1))


def test_export_import_round_trip(tmp_path, blobs_splits):
    protect = blobs_splits["protect"]
    rng = np.random.default_rng(8)
    budget = PerturbationBudget(0.04)
    raw = (protect.images + rng.uniform(-0.1, 0.1, protect.images.shape)).astype(np.float32)
    protected = clamp_to_budget(raw, protect.images, budget)
    d_u = Dataset(protected, protect.labels, protect.class_names, "uge")
    export_uge_dataset(d_u, protect, tmp_path, budget)
    back = import_uge_dataset(tmp_path)
    assert np.array_equal(back.labels, d_u.labels)
    # quantization bound: within 1/510 of the pre-quantization pixels
    assert float(np.abs(back.images.astype(np.float64) - d_u.images).max()) <= 1.0 / 510 + 1e-12
    # reproduces the quantized pixels exactly
    assert np.array_equal(back.images, dequantize_images(quantize_images(d_u.images)))
    # budget after round trip, against the clean reference
    dev = np.abs(back.images.astype(np.float64) - protect.images.astype(np.float64))
    assert float(dev.max()) <= budget.rho + 1.0 / 255 + 1e-12


def test_export_identity_dataset(tmp_path, blobs_splits):
    protect = blobs_splits["protect"]
    export_uge_dataset(protect, protect, tmp_path, PerturbationBudget(0.0))
    back = import_uge_dataset(tmp_path)
    # blobs are already on the 8-bit grid, so the round trip is lossless
    assert float(np.abs(back.images - protect.images).max()) == 0.0


def test_export_budget_violation_fails(tmp_path, blobs_splits):
    protect = blobs_splits["protect"]
    shifted = np.clip(protect.images + 0.2, 0, 1).astype(np.float32)
    d_u = Dataset(shifted, protect.labels, protect.class_names, "uge")
    with pytest.raises(ValueError, match="budget violated"):
        export_uge_dataset(d_u, protect, tmp_path, PerturbationBudget(0.04))


def test_import_missing_manifest(tmp_path):
    with pytest.raises(FileNotFoundError, match="manifest"):
        import_uge_dataset(tmp_path)


def test_import_count_mismatch(tmp_path, blobs_splits):
    protect = blobs_splits["test"]
    export_uge_dataset(protect, protect, tmp_path, PerturbationBudget(0.0))
    labels = (tmp_path / "labels.csv").read_text().splitlines()
    (tmp_path / "labels.csv").write_text("\n".join(labels[:-1]) + "\n")
    with pytest.raises(ValueError, match="declares"):
        import_uge_dataset(tmp_path)


def test_import_pixels_match_independent_decode(tmp_path, blobs_splits):
    protect = blobs_splits["test"]
    export_uge_dataset(protect, protect, tmp_path, PerturbationBudget(0.0))
    back = import_uge_dataset(tmp_path)
    # second decoder: re-encode the quantized source and compare raw PNG bytes
    quant = quantize_images(protect.images)
    for idx in (0, protect.n - 1):
        on_disk = (tmp_path / "images" / f"{idx:06d}.png").read_bytes()
        assert on_disk == png_bytes(quant[idx])
    assert np.array_equal(back.images, dequantize_images(quant))


def test_export_deterministic_bytes(tmp_path, blobs_splits):
    protect = blobs_splits["test"]
    d1, d2 = tmp_path / "one", tmp_path / "two"
    export_uge_dataset(protect, protect, d1, PerturbationBudget(0.0))
    export_uge_dataset(protect, protect, d2, PerturbationBudget(0.0))
    for rel in ["manifest.json", "labels.csv", "images/000000.png"]:
        assert (d1 / rel).read_bytes() == (d2 / rel).read_bytes()


def _write_fake_cifar10(root, n_per_batch=20):
    rng = np.random.default_rng(0)
    root.mkdir(parents=True, exist_ok=True)
    for name in [f"data_batch_{i}" for i in range(1, 6)] + ["test_batch"]:
        batch = {
            b"data": rng.integers(0, 256, size=(n_per_batch, 3072), dtype=np.uint8),
            b"labels": rng.integers(0, 10, size=n_per_batch).tolist(),
        }
        (root / name).write_bytes(pickle.dumps(batch))


def test_cifar_directory_loading(tmp_path):
    _write_fake_cifar10(tmp_path / "cifar-10-batches-py")
    d = load_dataset(tmp_path / "cifar-10-batches-py")
    assert d.images.shape == (100, 32, 32, 3)
    assert d.num_classes == 10
    t = load_dataset(tmp_path / "cifar-10-batches-py", split="test")
    assert t.n == 20
    again = load_dataset(tmp_path / "cifar-10-batches-py")
    assert np.array_equal(d.images, again.images)


def test_cifar_tarball_loading(tmp_path):
    _write_fake_cifar10(tmp_path / "cifar-10-batches-py")
    archive = tmp_path / "cifar-10-python.tar.gz"
    with tarfile.open(archive, "w:gz") as tar:
        tar.add(tmp_path / "cifar-10-batches-py", arcname="cifar-10-batches-py")
    d = load_dataset(archive)
    assert d.images.shape == (100, 32, 32, 3)
    assert d.images.min() >= 0.0 and d.images.max() <= 1.0


def test_load_dataset_errors(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_dataset(tmp_path / "nope")
    (tmp_path / "corrupt").mkdir()
    (tmp_path / "corrupt" / "data_batch_1").write_bytes(b"not a pickle")
    with pytest.raises(ValueError, match="corrupt dataset batch"):
        load_dataset(tmp_path / "corrupt")
