import gzip

import numpy as np
import pytest

from flipguard.data import (
    SYNTHETIC_KINDS,
    DataError,
    Dataset,
    DatasetSplit,
    load_dataset,
    make_synthetic,
    read_csv,
    read_idx,
    save_csv,
    write_idx,
)
from flipguard.models import ModelSpec
from flipguard.updates import UpdateSpec, train


@pytest.mark.parametrize("kind", SYNTHETIC_KINDS)
def test_synthetic_deterministic_and_valid(kind):
    a = make_synthetic(kind, 400, seed=5)
    b = make_synthetic(kind, 400, seed=5)
    for p, q in zip((a.train, a.val, a.test), (b.train, b.val, b.test)):
        assert p.x.tobytes() == q.x.tobytes() and p.y.tobytes() == q.y.tobytes()
    assert (len(a.train), len(a.val), len(a.test)) == (280, 60, 60)
    a.validate()
    assert a.provenance.startswith(f"synthetic:{kind}:")
    assert make_synthetic(kind, 400, seed=6).train.digest() != a.train.digest()


def test_synthetic_errors():
    with pytest.raises(DataError):
        make_synthetic("spirals", 400)
    with pytest.raises(DataError):
        make_synthetic("gaussians", 30, classes=4)


def test_class_balance():
    s = make_synthetic("rings+gaussians", 3000, seed=0)
    for part in (s.train, s.val, s.test):
        counts = np.bincount(part.y, minlength=4)
        expect = len(part) / 4
        assert np.all(np.abs(counts - expect) <= 0.2 * expect)


def test_nonrobust_features():
    s = make_synthetic("rings+gaussians", 600, seed=0, nonrobust_dims=3)
    assert s.train.dim == 5 and "nonrobust=3" in s.provenance
    base = make_synthetic("rings+gaussians", 600, seed=0)
    np.testing.assert_array_equal(s.train.x[:, :2], base.train.x)


def test_linear_model_on_separated_gaussians():
    s = make_synthetic("gaussians", 1000, classes=2, margin=4.0, seed=3)
    spec = UpdateSpec("standard", model_spec=ModelSpec(2, (), 2), epochs=40, learning_rate=0.5)
    model = train(s.train, spec).model
    assert np.mean(model.predict(s.test.x) != s.test.y) <= 0.05


def test_csv_hand_parse(tmp_path):
    path = tmp_path / "d.csv"
    path.write_text("label,a,b\n0,0.0,1.0\n2,0.25,0.5\n1,1,0.125\n")
    d = read_csv(path)
    np.testing.assert_array_equal(d.x, [[0.0, 1.0], [0.25, 0.5], [1.0, 0.125]])
    np.testing.assert_array_equal(d.y, [0, 2, 1])


def test_csv_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    d = Dataset(rng.uniform(0, 1, (30, 3)), rng.integers(0, 3, 30))
    save_csv(d, tmp_path / "a.csv")
    back = read_csv(tmp_path / "a.csv")
    assert back.x.tobytes() == d.x.tobytes() and back.y.tobytes() == d.y.tobytes()


@pytest.mark.parametrize(
    "body,match",
    [("0,0.5\n1,abc\n", ":3:"), ("0,0.5\n1,0.5,0.2\n", ":3:"), ("0,1.5\n", "outside"), ("-1,0.5\n", "negative")],
)
def test_csv_errors(tmp_path, body, match):
    path = tmp_path / "bad.csv"
    path.write_text("label,a\n" + body)
    with pytest.raises(DataError, match=match):
        read_csv(path)


def test_idx_scaling_and_gzip(tmp_path):
    images = np.zeros((40, 2, 2), dtype=np.uint8)
    images[:, 0, 0] = 255
    images[:, 1, 1] = np.arange(40)
    labels = (np.arange(40) % 4).astype(np.uint8)
    write_idx(images, tmp_path / "img.idx")
    (tmp_path / "lab.idx.gz").write_bytes(gzip.compress(_idx_bytes(labels, tmp_path)))
    s = load_dataset(tmp_path / "img.idx", "idx", labels_path=tmp_path / "lab.idx.gz")
    all_x = np.vstack([s.train.x, s.val.x, s.test.x])
    assert np.all(all_x[:, 0] == 1.0)
    assert all_x.shape == (40, 4)
    np.testing.assert_array_equal(read_idx(tmp_path / "img.idx"), images)


def _idx_bytes(arr, tmp_path):
    write_idx(arr, tmp_path / "tmp.idx")
    return (tmp_path / "tmp.idx").read_bytes()


def test_idx_errors(tmp_path):
    (tmp_path / "bad.idx").write_bytes(b"\x01\x00\x08\x01")
    with pytest.raises(DataError, match="magic"):
        read_idx(tmp_path / "bad.idx")
    write_idx(np.zeros((3, 2), dtype=np.uint8), tmp_path / "short.idx")
    raw = (tmp_path / "short.idx").read_bytes()
    (tmp_path / "short.idx").write_bytes(raw[:-1])
    with pytest.raises(DataError, match="payload"):
        read_idx(tmp_path / "short.idx")
    with pytest.raises(DataError):
        load_dataset(tmp_path / "short.idx", "idx")
    with pytest.raises(DataError):
        load_dataset(tmp_path / "short.idx", "parquet")


def test_companion_split_file(tmp_path):
    rng = np.random.default_rng(1)
    d = Dataset(rng.uniform(0, 1, (12, 2)), np.arange(12) % 2)
    save_csv(d, tmp_path / "d.csv")
    names = ["train"] * 8 + ["val", "val", "test", "test"]
    (tmp_path / "split.txt").write_text("\n".join(names) + "\n")
    s = load_dataset(tmp_path / "d.csv", "csv", split_path=tmp_path / "split.txt")
    assert (len(s.train), len(s.val), len(s.test)) == (8, 2, 2)
    (tmp_path / "split.txt").write_text("\n".join(names[:-1]) + "\n")
    with pytest.raises(DataError, match="entries"):
        load_dataset(tmp_path / "d.csv", "csv", split_path=tmp_path / "split.txt")


def test_split_validation_detects_leak():
    x = np.random.default_rng(2).uniform(0, 1, (10, 2))
    y = np.arange(10) % 2
    leaky = DatasetSplit(Dataset(x[:6], y[:6]), Dataset(x[4:8], y[4:8]), Dataset(x[8:], y[8:]))
    with pytest.raises(DataError, match="share"):
        leaky.validate()
    one_class = DatasetSplit(Dataset(x[:6], y[:6]), Dataset(x[6:8], [0, 0]), Dataset(x[8:], y[8:]))
    with pytest.raises(DataError, match="fewer than 2"):
        one_class.validate()
