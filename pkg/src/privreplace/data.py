"""Synthetic 2D Gaussian data and CelebA-format image ingestion."""

from __future__ import annotations

import os
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import IO, Iterable, Mapping, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from .core import LabeledExample

# CelebA names for the attributes used in the experiments
ATTRIBUTE_ALIASES = {
    "smiling": "Smiling",
    "gender": "Male",
    "lipstick": "Wearing_Lipstick",
    "age": "Young",
    "young": "Young",
    "high_cheekbones": "High_Cheekbones",
    "mouth_slightly_open": "Mouth_Slightly_Open",
    "heavy_makeup": "Heavy_Makeup",
}
EXPERIMENT_ATTRIBUTES = (
    "Male", "Wearing_Lipstick", "Young", "High_Cheekbones",
    "Mouth_Slightly_Open", "Heavy_Makeup", "Smiling",
)

CELEBA_ATTR_FILE = "list_attr_celeba.txt"
CELEBA_PARTITION_FILE = "list_eval_partition.txt"
CELEBA_IMAGE_DIR = "img_align_celeba"


class DataFormatError(ValueError):
    pass


def canonical_attribute(name: str) -> str:
    return ATTRIBUTE_ALIASES.get(name.lower(), name)


@dataclass(frozen=True)
class AttributeSchema:
    sensitive_name: str
    utility_names: tuple[str, ...] = ()

    def __post_init__(self):
        if self.sensitive_name in self.utility_names:
            raise ValueError("sensitive attribute cannot also be a utility attribute")

    def check_vocabulary(self, names: Iterable[str]) -> None:
        vocab = set(names)
        missing = [n for n in (self.sensitive_name, *self.utility_names) if n not in vocab]
        if missing:
            raise KeyError(f"attributes not in annotation file: {missing}")

    @classmethod
    def for_experiment(cls, sensitive: str) -> "AttributeSchema":
        """Sensitive attribute plus the other six experiment attributes as utilities."""
        sens = canonical_attribute(sensitive)
        return cls(sens, tuple(a for a in EXPERIMENT_ATTRIBUTES if a != sens))


@dataclass(frozen=True)
class Split:
    """One split held as stacked tensors: x (N, ...), s (N,), u name -> (N,)."""

    x: torch.Tensor
    s: torch.Tensor
    u: Mapping[str, torch.Tensor] = field(default_factory=dict)
    names: Optional[tuple[str, ...]] = None

    def __len__(self):
        return len(self.s)

    def __getitem__(self, i: int) -> LabeledExample:
        return LabeledExample(
            self.x[i].numpy(), int(self.s[i]), {k: int(v[i]) for k, v in self.u.items()}
        )

    def take(self, idx) -> "Split":
        idx = torch.as_tensor(idx, dtype=torch.long)
        names = None if self.names is None else tuple(self.names[i] for i in idx.tolist())
        return Split(self.x[idx], self.s[idx], {k: v[idx] for k, v in self.u.items()}, names)

    def with_sensitive(self, name: str) -> "Split":
        """Re-target the split so attribute ``name`` plays the role of s."""
        if name not in self.u:
            raise KeyError(f"attribute {name!r} not annotated")
        return Split(self.x, self.u[name], self.u, self.names)

    @classmethod
    def empty(cls, shape: Sequence[int]) -> "Split":
        return cls(torch.zeros((0, *shape)), torch.zeros(0, dtype=torch.long))


@dataclass(frozen=True)
class SplitDataset:
    train: Split
    validation: Split
    test: Split
    image_size: Optional[int] = None


@dataclass(frozen=True)
class SyntheticDataConfig:
    mu1: tuple[float, float] = (-1.0, 1.0)
    mu2: tuple[float, float] = (1.0, -1.0)
    cov1: tuple[tuple[float, float], tuple[float, float]] = ((0.7, 0.0), (0.0, 0.7))
    cov2: tuple[tuple[float, float], tuple[float, float]] = ((0.7, 0.0), (0.0, 0.7))
    n_train: int = 400_000
    n_test: int = 2_560
    seed: int = 0

    def __post_init__(self):
        for cov in (self.cov1, self.cov2):
            c = np.asarray(cov, dtype=float)
            if c.shape != (2, 2) or not np.allclose(c, c.T):
                raise ValueError("covariance must be a symmetric 2x2 matrix")
            if np.linalg.eigvalsh(c).min() <= 0:
                raise ValueError("covariance must be positive definite")
        if self.n_train < 0 or self.n_test < 0:
            raise ValueError("sizes must be nonnegative")


def _draw_gaussian_pair(cfg: SyntheticDataConfig, n: int, rng: np.random.Generator) -> Split:
    s = rng.integers(0, 2, size=n)
    x = np.empty((n, 2))
    for label, (mu, cov) in enumerate(((cfg.mu1, cfg.cov1), (cfg.mu2, cfg.cov2))):
        mask = s == label
        x[mask] = rng.multivariate_normal(mu, cov, size=int(mask.sum()))
    return Split(torch.from_numpy(x).float(), torch.from_numpy(s).long())


def generate_synthetic(cfg: SyntheticDataConfig = SyntheticDataConfig()) -> SplitDataset:
    """Two-Gaussian dataset; s=0 from N(mu1, cov1), s=1 from N(mu2, cov2), fair-coin labels.

    Train and test use separate child streams of ``cfg.seed`` so changing one
    size never changes the other split.
    """
    train_rng, test_rng = (np.random.default_rng(s) for s in np.random.SeedSequence(cfg.seed).spawn(2))
    train = _draw_gaussian_pair(cfg, cfg.n_train, train_rng)
    test = _draw_gaussian_pair(cfg, cfg.n_test, test_rng)
    return SplitDataset(train, Split.empty((2,)), test, None)


# -- binary cache ----------------------------------------------------------

CACHE_MAGIC = b"PRVF"
CACHE_VERSION = 1
_CACHE_HEADER = struct.Struct("<4sIII")


def write_points(path, x: torch.Tensor, s: torch.Tensor) -> None:
    """Write (x, s) records as little-endian float32: header then n*(dim+1) floats."""
    x = np.asarray(x, dtype="<f4").reshape(len(s), -1)
    rec = np.concatenate([x, np.asarray(s, dtype="<f4").reshape(-1, 1)], axis=1)
    with open(path, "wb") as fh:
        fh.write(_CACHE_HEADER.pack(CACHE_MAGIC, CACHE_VERSION, rec.shape[0], x.shape[1]))
        fh.write(rec.astype("<f4").tobytes())


def read_points(path) -> Split:
    with open(path, "rb") as fh:
        head = fh.read(_CACHE_HEADER.size)
        if len(head) != _CACHE_HEADER.size:
            raise DataFormatError("truncated header")
        magic, version, n, dim = _CACHE_HEADER.unpack(head)
        if magic != CACHE_MAGIC:
            raise DataFormatError(f"bad magic {magic!r}")
        if version != CACHE_VERSION:
            raise DataFormatError(f"unsupported version {version}")
        body = np.frombuffer(fh.read(), dtype="<f4")
    if body.size != n * (dim + 1):
        raise DataFormatError(f"expected {n * (dim + 1)} floats, found {body.size}")
    rec = body.reshape(n, dim + 1)
    return Split(torch.from_numpy(rec[:, :dim].copy()), torch.from_numpy(rec[:, dim].astype(np.int64)))


# -- CelebA ------------------------------------------------------------------

def parse_attribute_file(stream: IO[str]) -> tuple[list[str], dict[str, np.ndarray]]:
    """Parse ``list_attr_celeba.txt``; +1/-1 annotations become 1/0."""
    lines = [ln for ln in (raw.strip() for raw in stream) if ln]
    if len(lines) < 2:
        raise DataFormatError("attribute file needs a count line and a header line")
    try:
        count = int(lines[0])
    except ValueError:
        raise DataFormatError(f"first line must be the image count, got {lines[0]!r}") from None
    names = lines[1].split()
    rows: dict[str, np.ndarray] = {}
    for lineno, line in enumerate(lines[2:], start=3):
        tokens = line.split()
        fname, values = tokens[0], tokens[1:]
        if len(values) != len(names):
            raise DataFormatError(
                f"line {lineno}: column count mismatch ({len(values)} values for {len(names)} attributes)"
            )
        if fname in rows:
            raise DataFormatError(f"line {lineno}: duplicate filename {fname}")
        try:
            ints = [int(v) for v in values]
        except ValueError:
            raise DataFormatError(f"line {lineno}: non-integer token") from None
        if any(v not in (-1, 1) for v in ints):
            raise DataFormatError(f"line {lineno}: tokens must be -1 or 1")
        rows[fname] = (np.asarray(ints, dtype=np.int64) + 1) // 2
    if len(rows) != count:
        raise DataFormatError(f"declared {count} rows, found {len(rows)}")
    return names, rows


def parse_partition_file(stream: IO[str]) -> dict[str, int]:
    parts: dict[str, int] = {}
    for lineno, line in enumerate(stream, start=1):
        tokens = line.split()
        if not tokens:
            continue
        if len(tokens) != 2 or tokens[1] not in ("0", "1", "2"):
            raise DataFormatError(f"line {lineno}: expected '<filename> <0|1|2>'")
        if tokens[0] in parts:
            raise DataFormatError(f"line {lineno}: duplicate filename {tokens[0]}")
        parts[tokens[0]] = int(tokens[1])
    return parts


def resize_image(arr: np.ndarray, size: int) -> np.ndarray:
    """Center-crop a CHW array to square, then bilinear resize (no antialiasing)."""
    _, h, w = arr.shape
    side = min(h, w)
    top, left = (h - side) // 2, (w - side) // 2
    arr = arr[:, top:top + side, left:left + side]
    if side == size:
        return np.ascontiguousarray(arr)
    t = torch.from_numpy(np.ascontiguousarray(arr))[None]
    out = F.interpolate(t, size=(size, size), mode="bilinear", align_corners=False, antialias=False)
    return out[0].clamp_(0.0, 1.0).numpy()


def load_image(path, size: int) -> np.ndarray:
    try:
        with Image.open(path) as im:
            rgb = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    except (OSError, ValueError) as e:
        raise DataFormatError(f"cannot decode image {path}: {e}") from e
    return resize_image(rgb.transpose(2, 0, 1), size)


def load_images(directory, size: int, names: Optional[Iterable[str]] = None, workers: int = 4) -> dict[str, np.ndarray]:
    """Load images as 3 x size x size float32 arrays in [0, 1], keyed by filename."""
    if size not in (32, 64, 128):
        raise ValueError(f"size must be 32, 64 or 128, got {size}")
    if names is None:
        names = sorted(os.listdir(directory))
    names = list(names)
    with ThreadPoolExecutor(max_workers=workers) as pool:
        arrays = list(pool.map(lambda n: load_image(os.path.join(directory, n), size), names))
    return dict(zip(names, arrays))


def stratified_indices(s: np.ndarray, n: int, seed: int) -> np.ndarray:
    """Pick ``n`` indices preserving the class mix of ``s`` (within one example)."""
    s = np.asarray(s)
    if n > len(s):
        raise ValueError(f"cannot draw {n} examples from a split of {len(s)}")
    rng = np.random.default_rng(seed)
    classes, counts = np.unique(s, return_counts=True)
    quota = np.floor(counts * n / len(s)).astype(int)
    # largest remainders get the leftover slots
    rem = counts * n / len(s) - quota
    for k in np.argsort(-rem, kind="stable")[: n - quota.sum()]:
        quota[k] += 1
    picked = [rng.choice(np.flatnonzero(s == c), size=q, replace=False) for c, q in zip(classes, quota)]
    return np.sort(np.concatenate(picked)) if picked else np.zeros(0, dtype=np.int64)


def subsample(ds: SplitDataset, n: int, seed: int, splits: Sequence[str] = ("train",)) -> SplitDataset:
    parts = {}
    for name in ("train", "validation", "test"):
        split = getattr(ds, name)
        if name in splits:
            split = split.take(stratified_indices(split.s.numpy(), n, seed))
        parts[name] = split
    return SplitDataset(parts["train"], parts["validation"], parts["test"], ds.image_size)


def load_celeba(
    root,
    sensitive: str,
    image_size: int = 64,
    n_train: Optional[int] = None,
    n_validation: Optional[int] = None,
    n_test: Optional[int] = None,
    seed: int = 0,
    image_dir: Optional[str] = None,
) -> SplitDataset:
    """Read a CelebA-layout directory into a SplitDataset.

    Subsampling (stratified on the sensitive attribute) happens on labels
    before any image is decoded. All 40 attributes are kept in ``u``.
    """
    sensitive = canonical_attribute(sensitive)
    with open(os.path.join(root, CELEBA_ATTR_FILE)) as fh:
        names, rows = parse_attribute_file(fh)
    if sensitive not in names:
        raise KeyError(f"sensitive attribute {sensitive!r} not in annotation file")
    with open(os.path.join(root, CELEBA_PARTITION_FILE)) as fh:
        partition = parse_partition_file(fh)
    img_dir = image_dir or os.path.join(root, CELEBA_IMAGE_DIR)
    col = names.index(sensitive)
    limits = (n_train, n_validation, n_test)
    splits = []
    for split_id, limit in enumerate(limits):
        files = sorted(f for f, p in partition.items() if p == split_id)
        missing = [f for f in files if f not in rows]
        if missing:
            raise DataFormatError(f"{len(missing)} partition entries lack annotations, e.g. {missing[0]}")
        labels = np.stack([rows[f] for f in files]) if files else np.zeros((0, len(names)), dtype=np.int64)
        if limit is not None:
            keep = stratified_indices(labels[:, col], limit, seed + split_id)
            files = [files[i] for i in keep]
            labels = labels[keep]
        images = load_images(img_dir, image_size, files)
        x = torch.from_numpy(np.stack([images[f] for f in files])) if files else torch.zeros((0, 3, image_size, image_size))
        u = {name: torch.from_numpy(labels[:, j].copy()) for j, name in enumerate(names)}
        splits.append(Split(x, u[sensitive], u, tuple(files)))
    return SplitDataset(*splits, image_size=image_size)
