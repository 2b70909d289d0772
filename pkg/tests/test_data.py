import io

import numpy as np
import pytest
import torch
from PIL import Image

from privreplace.data import (
    AttributeSchema,
    DataFormatError,
    Split,
    SyntheticDataConfig,
    canonical_attribute,
    generate_synthetic,
    load_celeba,
    load_image,
    parse_attribute_file,
    parse_partition_file,
    read_points,
    resize_image,
    stratified_indices,
    subsample,
    write_points,
)

from fake_celeba import make_fake_celeba


@pytest.fixture(scope="module")
def big_synthetic():
    return generate_synthetic(SyntheticDataConfig(n_train=200_000, n_test=10, seed=0))


def test_class_means(big_synthetic):
    x, s = big_synthetic.train.x.double(), big_synthetic.train.s
    assert torch.allclose(x[s == 0].mean(0), torch.tensor([-1.0, 1.0], dtype=torch.float64), atol=0.02)
    assert torch.allclose(x[s == 1].mean(0), torch.tensor([1.0, -1.0], dtype=torch.float64), atol=0.02)


def test_class_variances(big_synthetic):
    x, s = big_synthetic.train.x.double(), big_synthetic.train.s
    for cls in (0, 1):
        var = x[s == cls].var(0)
        assert torch.all((var >= 0.66) & (var <= 0.74)), var


def test_labels_are_balanced(big_synthetic):
    assert abs(big_synthetic.train.s.double().mean().item() - 0.5) < 0.01


def test_empty_train_split():
    ds = generate_synthetic(SyntheticDataConfig(n_train=0, n_test=5))
    assert len(ds.train) == 0 and ds.train.x.shape == (0, 2)
    assert len(ds.test) == 5


def test_synthetic_is_seeded():
    a = generate_synthetic(SyntheticDataConfig(n_train=50, n_test=20, seed=1))
    b = generate_synthetic(SyntheticDataConfig(n_train=50, n_test=20, seed=1))
    c = generate_synthetic(SyntheticDataConfig(n_train=80, n_test=20, seed=1))
    assert torch.equal(a.train.x, b.train.x)
    assert torch.equal(a.test.x, c.test.x)  # test split independent of train size


def test_bad_covariance():
    with pytest.raises(ValueError):
        SyntheticDataConfig(cov1=((1.0, 2.0), (2.0, 1.0)))


def test_points_round_trip(tmp_path):
    ds = generate_synthetic(SyntheticDataConfig(n_train=300, n_test=0, seed=2))
    p = tmp_path / "train.prvf"
    write_points(p, ds.train.x, ds.train.s)
    first = p.read_bytes()
    back = read_points(p)
    assert torch.equal(back.x, ds.train.x) and torch.equal(back.s, ds.train.s)
    write_points(p, back.x, back.s)
    assert p.read_bytes() == first


def test_points_corrupt(tmp_path):
    p = tmp_path / "bad.prvf"
    p.write_bytes(b"XXXX" + bytes(12))
    with pytest.raises(DataFormatError, match="magic"):
        read_points(p)
    ds = generate_synthetic(SyntheticDataConfig(n_train=10, n_test=0))
    write_points(p, ds.train.x, ds.train.s)
    p.write_bytes(p.read_bytes()[:-4])
    with pytest.raises(DataFormatError):
        read_points(p)


def test_parse_attribute_example():
    names, rows = parse_attribute_file(io.StringIO("2\nSmiling Male\nimg1.jpg 1 -1\nimg2.jpg -1 -1\n"))
    assert names == ["Smiling", "Male"]
    assert rows["img1.jpg"].tolist() == [1, 0]
    assert rows["img2.jpg"].tolist() == [0, 0]


def test_parse_attribute_column_mismatch():
    header = " ".join(f"A{i}" for i in range(40))
    row = "x.jpg " + " ".join(["1"] * 39)
    with pytest.raises(DataFormatError, match="column count mismatch"):
        parse_attribute_file(io.StringIO(f"1\n{header}\n{row}\n"))


@pytest.mark.parametrize("text", [
    "2\nA\na.jpg 1\n",
    "1\nA\na.jpg 0\n",
    "2\nA\na.jpg 1\na.jpg -1\n",
    "x\nA\n",
])
def test_parse_attribute_errors(text):
    with pytest.raises(DataFormatError):
        parse_attribute_file(io.StringIO(text))


def test_parse_partition():
    parts = parse_partition_file(io.StringIO("a.jpg 0\nb.jpg 2\n\n"))
    assert parts == {"a.jpg": 0, "b.jpg": 2}
    with pytest.raises(DataFormatError):
        parse_partition_file(io.StringIO("a.jpg 3\n"))


def test_resize_source_shape():
    rng = np.random.default_rng(0)
    arr = rng.random((3, 218, 178)).astype(np.float32)
    out = resize_image(arr, 64)
    assert out.shape == (3, 64, 64)
    assert out.min() >= 0 and out.max() <= 1
    assert resize_image(arr, 128).shape == (3, 128, 128)


def test_resize_black_image():
    assert not resize_image(np.zeros((3, 218, 178), np.float32), 64).any()


def test_resize_identity_at_native_size():
    arr = np.random.default_rng(1).random((3, 32, 32)).astype(np.float32)
    assert np.array_equal(resize_image(arr, 32), arr)


def test_load_image_and_decode_error(tmp_path):
    p = tmp_path / "im.png"
    Image.new("RGB", (178, 218), (255, 0, 0)).save(p)
    arr = load_image(p, 32)
    assert arr.shape == (3, 32, 32)
    assert np.allclose(arr[0], 1.0) and np.allclose(arr[1:], 0.0)
    bad = tmp_path / "bad.jpg"
    bad.write_bytes(b"not an image")
    with pytest.raises(DataFormatError):
        load_image(bad, 32)


def test_stratified_full_split_is_permutation():
    s = np.array([0, 1, 1, 0, 1])
    assert sorted(stratified_indices(s, 5, 0).tolist()) == list(range(5))


def test_stratified_balance_and_determinism():
    s = np.array([0, 1] * 500)
    idx = stratified_indices(s, 100, 3)
    assert abs(int(s[idx].sum()) - 50) <= 1
    assert np.array_equal(idx, stratified_indices(s, 100, 3))
    with pytest.raises(ValueError):
        stratified_indices(s, 2000, 0)


def test_subsample_only_touches_named_splits():
    ds = generate_synthetic(SyntheticDataConfig(n_train=400, n_test=50))
    sub = subsample(ds, 100, 0)
    assert len(sub.train) == 100 and len(sub.test) == 50


def test_split_take_and_retarget():
    sp = Split(torch.arange(8.0).reshape(4, 2), torch.tensor([0, 1, 0, 1]),
               {"Male": torch.tensor([1, 1, 0, 0])}, ("a", "b", "c", "d"))
    t = sp.take([3, 0])
    assert t.names == ("d", "a") and t.s.tolist() == [1, 0]
    assert sp.with_sensitive("Male").s.tolist() == [1, 1, 0, 0]
    assert sp[1].s == 1 and sp[1].u == {"Male": 1}
    with pytest.raises(KeyError):
        sp.with_sensitive("Young")


def test_attribute_names():
    assert canonical_attribute("smiling") == "Smiling"
    assert canonical_attribute("gender") == "Male"
    schema = AttributeSchema.for_experiment("smiling")
    assert schema.sensitive_name == "Smiling" and len(schema.utility_names) == 6
    with pytest.raises(KeyError):
        schema.check_vocabulary(["Smiling"])
    with pytest.raises(ValueError):
        AttributeSchema("Male", ("Male",))


def test_load_celeba_layout(tmp_path):
    root = make_fake_celeba(str(tmp_path), n_train=30, n_val=4, n_test=10, seed=1)
    ds = load_celeba(root, "smiling", 32, n_train=20, n_validation=0, n_test=None)
    assert ds.train.x.shape == (20, 3, 32, 32)
    assert len(ds.validation) == 0 and len(ds.test) == 10
    assert torch.equal(ds.train.s, ds.train.u["Smiling"])
    assert 0.0 <= ds.train.x.min() and ds.train.x.max() <= 1.0
    assert set(ds.train.u) >= set(AttributeSchema.for_experiment("Smiling").utility_names)
    with pytest.raises(KeyError):
        load_celeba(root, "Bald", 32)
