"""Dataset ingestion, synthetic domain shifts, task construction and batch streams.

Images are float32 ``(N, h, w, c)`` arrays in [0, 1]; labels are int64.
IDX files (optionally gzip-compressed) are the only on-disk input format.
"""

from __future__ import annotations

import gzip
import hashlib
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Optional

import numpy as np

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801
DATA_DIR_ENV = "ADAMATCH_DATA_DIR"

UDA, SSL, SSDA = "UDA", "SSL", "SSDA"
TASK_KINDS = (UDA, SSL, SSDA)


class DataError(Exception):
    """Base class for ingestion and task-construction failures."""


class MagicMismatch(DataError):
    pass


class TruncatedPayload(DataError):
    pass


class CountMismatch(DataError):
    pass


class MissingDataFiles(DataError):
    pass


@dataclass(frozen=True)
class Dataset:
    images: np.ndarray
    labels: np.ndarray
    name: str = "dataset"
    k: int = 10

    def __post_init__(self):
        if self.images.ndim != 4:
            raise DataError(f"{self.name}: images must be (N, h, w, c), got {self.images.shape}")
        if len(self.labels) != len(self.images):
            raise CountMismatch(
                f"{self.name}: {len(self.images)} images but {len(self.labels)} labels")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.k):
            raise DataError(f"{self.name}: labels outside [0, {self.k})")

    def __len__(self):
        return len(self.labels)

    @property
    def side(self) -> int:
        return self.images.shape[1]

    @property
    def channels(self) -> int:
        return self.images.shape[3]

    def subset(self, idx, name=None) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.images[idx], self.labels[idx], name or self.name, self.k)

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.k)


# ---------------------------------------------------------------- IDX format

def _open(path):
    path = str(path)
    return gzip.open(path, "rb") if path.endswith(".gz") else open(path, "rb")


def read_idx(path, expected_magic: int) -> np.ndarray:
    """Parse one unsigned-byte IDX file into a uint8 array."""
    with _open(path) as fh:
        raw = fh.read()
    if len(raw) < 4:
        raise TruncatedPayload(f"{path}: file too short for an IDX header")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic != expected_magic:
        raise MagicMismatch(f"{path}: magic {magic:#010x}, expected {expected_magic:#010x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise TruncatedPayload(f"{path}: truncated IDX header")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    size = int(np.prod(dims))
    if len(raw) - header < size:
        raise TruncatedPayload(f"{path}: payload has {len(raw) - header} bytes, expected {size}")
    return np.frombuffer(raw, dtype=np.uint8, count=size, offset=header).reshape(dims)


def write_idx(path, array: np.ndarray) -> None:
    """Write a uint8 array as IDX; gzip when ``path`` ends in .gz (mtime pinned to 0)."""
    array = np.ascontiguousarray(array, dtype=np.uint8)
    magic = 0x00000800 | array.ndim
    payload = struct.pack(">I", magic) + struct.pack(f">{array.ndim}I", *array.shape) + array.tobytes()
    path = str(path)
    if path.endswith(".gz"):
        with open(path, "wb") as raw, gzip.GzipFile(fileobj=raw, mode="wb", mtime=0) as fh:
            fh.write(payload)
    else:
        with open(path, "wb") as fh:
            fh.write(payload)


def load_idx(images_path, labels_path, name="idx", k: Optional[int] = None) -> Dataset:
    images = read_idx(images_path, IMAGES_MAGIC)
    labels = read_idx(labels_path, LABELS_MAGIC)
    if len(images) != len(labels):
        raise CountMismatch(f"{name}: {len(images)} images but {len(labels)} labels")
    x = (images.astype(np.float32) / 255.0)[..., None]
    y = labels.astype(np.int64)
    return Dataset(x, y, name, int(k if k is not None else y.max() + 1))


# ------------------------------------------------------------ domain registry

@dataclass(frozen=True)
class DomainFiles:
    train: tuple  # (images file, labels file)
    test: Optional[tuple] = None
    md5: dict = field(default_factory=dict)
    note: str = ""


DOMAINS = {
    "mnist": DomainFiles(
        ("train-images-idx3-ubyte.gz", "train-labels-idx1-ubyte.gz"),
        ("t10k-images-idx3-ubyte.gz", "t10k-labels-idx1-ubyte.gz"),
        md5={
            "train-images-idx3-ubyte.gz": "f68b3c2dcbeaaa9fbdd348bbdeb94873",
            "train-labels-idx1-ubyte.gz": "d53e105ee54ea40749a09fcbcd1e9432",
            "t10k-images-idx3-ubyte.gz": "9fb629c4189551a2d022fa330f9573f3",
            "t10k-labels-idx1-ubyte.gz": "ec29112dd5afa0611ce80d1b7f02629c",
        },
        note="canonical LeCun MNIST files",
    ),
    "usps": DomainFiles(
        ("usps-train-images-idx3-ubyte.gz", "usps-train-labels-idx1-ubyte.gz"),
        ("usps-test-images-idx3-ubyte.gz", "usps-test-labels-idx1-ubyte.gz"),
        note="16x16 USPS converted to IDX",
    ),
    "mnist5k": DomainFiles(
        ("mnist5k-train-images-idx3-ubyte.gz", "mnist5k-train-labels-idx1-ubyte.gz"),
        note="5000-image MNIST subset; write with `adamatch prepare-data`",
    ),
    "digits": DomainFiles(
        ("digits-train-images-idx3-ubyte.gz", "digits-train-labels-idx1-ubyte.gz"),
        ("digits-test-images-idx3-ubyte.gz", "digits-test-labels-idx1-ubyte.gz"),
        note="8x8 UCI handwritten digits; write with `adamatch prepare-data`",
    ),
}


def resolve_data_dir(data_dir=None) -> Path:
    if data_dir:
        return Path(data_dir)
    env = os.environ.get(DATA_DIR_ENV)
    if env:
        return Path(env)
    raise MissingDataFiles(f"no data directory given (use --data-dir or set {DATA_DIR_ENV})")


def md5sum(path) -> str:
    h = hashlib.md5()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def _find(root: Path, fname: str) -> Optional[Path]:
    for cand in (fname, fname[:-3] if fname.endswith(".gz") else fname + ".gz"):
        if (root / cand).exists():
            return root / cand
    return None


def load_domain(name: str, data_dir=None, split: str = "train") -> Dataset:
    """Load one split of a registered domain from the data directory."""
    if name not in DOMAINS:
        raise DataError(f"unknown domain {name!r}; known: {sorted(DOMAINS)}")
    spec = DOMAINS[name]
    files = spec.train if split == "train" else spec.test
    if files is None:
        raise DataError(f"domain {name!r} has no {split!r} split")
    root = resolve_data_dir(data_dir)
    found = [_find(root, f) for f in files]
    if any(p is None for p in found):
        lines = [f"  {f}" + (f"  md5={spec.md5[f]}" if f in spec.md5 else "") for f in files]
        raise MissingDataFiles(
            f"missing files for domain {name!r} ({spec.note}) in {root}:\n" + "\n".join(lines))
    return load_idx(found[0], found[1], name=f"{name}-{split}", k=10)


def prepare_bundled(data_dir) -> list:
    """Write the 'mnist5k' and 'digits' domains as IDX files from locally installed packages.

    No network access: the MNIST subset ships with mlxtend, the 8x8 UCI digits
    with scikit-learn. Returns the written paths.
    """
    import importlib.util

    root = Path(data_dir)
    root.mkdir(parents=True, exist_ok=True)
    written = []

    spec = importlib.util.find_spec("mlxtend")
    if spec is None:
        raise MissingDataFiles("mlxtend is not installed; it carries the bundled MNIST subset")
    csv = Path(spec.origin).parent / "data" / "data" / "mnist_5k.csv.gz"
    table = np.loadtxt(csv, delimiter=",", dtype=np.int64)
    imgs, labels = table[:, :-1].reshape(-1, 28, 28), table[:, -1]
    for fname, arr in zip(DOMAINS["mnist5k"].train, (imgs, labels)):
        write_idx(root / fname, arr)
        written.append(root / fname)

    from sklearn.datasets import load_digits

    digits = load_digits()
    imgs = np.round(digits.images * (255.0 / 16.0)).astype(np.uint8)
    labels = digits.target.astype(np.int64)
    train_idx, test_idx = stratified_split(labels, 0.3, seed=0)
    for split, idx in (("train", train_idx), ("test", test_idx)):
        files = getattr(DOMAINS["digits"], split)
        for fname, arr in zip(files, (imgs[idx], labels[idx])):
            write_idx(root / fname, arr)
            written.append(root / fname)
    return written


# --------------------------------------------------------------- domain shift

@dataclass(frozen=True)
class Invert:
    pass


@dataclass(frozen=True)
class Colorize:
    seed: int = 0


@dataclass(frozen=True)
class GaussianNoise:
    sigma: float
    seed: int = 0


@dataclass(frozen=True)
class PadResize:
    """Bring images to ``target_side``: zero-pad when the gap is at most 4 pixels
    and even (28 -> 32 MNIST style), otherwise bicubic resize."""
    target_side: int = 32


@dataclass(frozen=True)
class ToRGB:
    pass


def _bicubic(images: np.ndarray, side: int) -> np.ndarray:
    from PIL import Image

    out = np.empty((len(images), side, side, images.shape[3]), dtype=np.float32)
    for i, img in enumerate(images):
        for ch in range(img.shape[2]):
            pil = Image.fromarray(img[:, :, ch].astype(np.float32), mode="F")
            out[i, :, :, ch] = np.asarray(pil.resize((side, side), Image.BICUBIC))
    return np.clip(out, 0.0, 1.0)


def shift_domain(ds: Dataset, spec) -> Dataset:
    """Apply one deterministic domain transform; labels are untouched."""
    x = ds.images
    if isinstance(spec, Invert):
        out = 1.0 - x
    elif isinstance(spec, ToRGB):
        out = np.repeat(x, 3, axis=3) if x.shape[3] == 1 else x.copy()
    elif isinstance(spec, Colorize):
        rng = np.random.default_rng(spec.seed)
        gray = x.mean(axis=3, keepdims=True)
        fg = rng.uniform(0.0, 1.0, size=(len(x), 1, 1, 3))
        bg = rng.uniform(0.0, 1.0, size=(len(x), 1, 1, 3))
        # keep digit/background contrast from vanishing
        flip = np.abs(fg - bg).sum(axis=3, keepdims=True) < 0.6
        bg = np.where(flip, 1.0 - fg, bg)
        out = gray * fg + (1.0 - gray) * bg
    elif isinstance(spec, GaussianNoise):
        if spec.sigma < 0:
            raise ValueError("noise sigma must be >= 0")
        if spec.sigma == 0:
            out = x.copy()
        else:
            rng = np.random.default_rng(spec.seed)
            out = np.clip(x + rng.normal(0.0, spec.sigma, size=x.shape), 0.0, 1.0)
    elif isinstance(spec, PadResize):
        h = x.shape[1]
        gap = spec.target_side - h
        if gap < 0:
            raise ValueError(f"target side {spec.target_side} smaller than image side {h}")
        if gap == 0:
            out = x.copy()
        elif gap <= 4 and gap % 2 == 0:
            p = gap // 2
            out = np.pad(x, ((0, 0), (p, p), (p, p), (0, 0)))
        else:
            out = _bicubic(x, spec.target_side)
    else:
        raise ValueError(f"unsupported domain shift {spec!r}")
    return Dataset(np.ascontiguousarray(out, dtype=np.float32), ds.labels, ds.name, ds.k)


def parse_shift(text: str):
    """'invert', 'rgb', 'colorize:3', 'noise:0.1', 'pad:32' -> shift spec."""
    name, _, arg = text.strip().partition(":")
    name = name.lower()
    if name == "invert":
        return Invert()
    if name == "rgb":
        return ToRGB()
    if name == "colorize":
        return Colorize(int(arg or 0))
    if name == "noise":
        return GaussianNoise(float(arg))
    if name in ("pad", "resize", "padresize"):
        return PadResize(int(arg or 32))
    raise ValueError(f"unsupported domain shift {text!r}")


# ---------------------------------------------------------- splits & sampling

def stratified_split(labels: np.ndarray, test_fraction: float, seed: int):
    """Per-class random split; returns sorted (train_idx, test_idx)."""
    rng = np.random.default_rng(seed)
    train, test = [], []
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        idx = idx[rng.permutation(len(idx))]
        n_test = int(round(test_fraction * len(idx)))
        test.append(idx[:n_test])
        train.append(idx[n_test:])
    return np.sort(np.concatenate(train)), np.sort(np.concatenate(test))


def balanced_indices(labels: np.ndarray, k: int, per_class: int, seed: int) -> np.ndarray:
    """Exactly ``per_class`` indices of every class, drawn with ``seed``."""
    rng = np.random.default_rng(seed)
    picked = []
    for c in range(k):
        idx = np.flatnonzero(labels == c)
        if len(idx) < per_class:
            raise DataError(f"class {c} has {len(idx)} examples, need {per_class}")
        picked.append(np.sort(rng.choice(idx, size=per_class, replace=False)))
    return np.concatenate(picked)


def skew_classes(ds: Dataset, imbalance: float, seed: int) -> Dataset:
    """Subsample so class c keeps a fraction imbalance**(-c/(k-1)) of its examples.

    ``imbalance`` is the ratio between the most and least frequent class.
    """
    if imbalance < 1:
        raise ValueError("imbalance must be >= 1")
    rng = np.random.default_rng(seed)
    keep = []
    for c in range(ds.k):
        idx = np.flatnonzero(ds.labels == c)
        frac = imbalance ** (-c / (ds.k - 1))
        n = max(1, int(round(frac * len(idx))))
        keep.append(np.sort(rng.choice(idx, size=n, replace=False)))
    return ds.subset(np.sort(np.concatenate(keep)), name=f"{ds.name}-skew{imbalance:g}")


# ----------------------------------------------------------------------- tasks

@dataclass
class TaskSpec:
    kind: str
    source_labeled: Dataset
    target_unlabeled: Dataset
    target_test: Dataset
    target_labeled: Optional[Dataset] = None
    n_target_labels_per_class: Optional[int] = None
    seed: int = 0
    # indices into the original target train split, kept for audits
    target_labeled_idx: Optional[np.ndarray] = None

    @property
    def k(self) -> int:
        return self.source_labeled.k


def build_task(source: Dataset, target: Dataset, kind: str, n_target_labels: Optional[int] = None,
               seed: int = 0, target_test: Optional[Dataset] = None) -> TaskSpec:
    """Materialize a UDA / SSL / SSDA experiment.

    ``target`` is the target train split; ``target_test`` its held-out test
    split (never used for training). For SSL, ``source`` is ignored apart
    from the class count check: labeled and unlabeled data both come from
    ``target``.
    """
    if kind not in TASK_KINDS:
        raise DataError(f"unknown task kind {kind!r}")
    if source.k != target.k:
        raise DataError(f"class count mismatch: {source.k} vs {target.k}")
    if target_test is None:
        raise DataError("target_test split is required")
    if target_test.k != target.k:
        raise DataError("target test split has a different class count")
    if kind == UDA:
        return TaskSpec(UDA, source, target, target_test, seed=seed)
    if n_target_labels is None or n_target_labels < 1:
        raise DataError(f"{kind} needs a positive n_target_labels")
    idx = balanced_indices(target.labels, target.k, n_target_labels, seed)
    rest = np.setdiff1d(np.arange(len(target)), idx)
    labeled = target.subset(idx, name=f"{target.name}-labeled")
    if kind == SSL:
        return TaskSpec(SSL, labeled, target.subset(rest), target_test, None,
                        n_target_labels, seed, idx)
    return TaskSpec(SSDA, source, target.subset(rest), target_test, labeled,
                    n_target_labels, seed, idx)


# --------------------------------------------------------------------- batches

@dataclass
class BatchPair:
    x_sl: np.ndarray
    y_sl: np.ndarray  # int labels, length n_SL
    x_tu: np.ndarray
    k: int = 10

    @property
    def y_onehot(self) -> np.ndarray:
        return np.eye(self.k, dtype=np.float32)[self.y_sl]

    @property
    def n_sl(self) -> int:
        return len(self.x_sl)

    @property
    def n_tu(self) -> int:
        return len(self.x_tu)


class _Cycler:
    """Endless index stream over ``n`` items, reshuffled every epoch."""

    def __init__(self, n: int, rng: np.random.Generator):
        if n < 1:
            raise DataError("cannot stream an empty dataset")
        self.n, self.rng = n, rng
        self.order = rng.permutation(n)
        self.pos = 0

    def take(self, m: int) -> np.ndarray:
        out = []
        while m > 0:
            if self.pos == self.n:
                self.order = self.rng.permutation(self.n)
                self.pos = 0
            step = min(m, self.n - self.pos)
            out.append(self.order[self.pos:self.pos + step])
            self.pos += step
            m -= step
        return np.concatenate(out)


def batch_stream(task: TaskSpec, n_sl: int, uratio: int, rng: np.random.Generator) -> Iterator[BatchPair]:
    """Endless stream of labeled/unlabeled minibatches.

    For SSDA the labeled batch is half source rows followed by half
    target-labeled rows, so ``n_sl`` must be even.
    """
    if n_sl < 1 or uratio < 1:
        raise DataError("n_sl and uratio must be >= 1")
    src = task.source_labeled
    tgt = task.target_unlabeled
    src_cycle = _Cycler(len(src), rng)
    tu_cycle = _Cycler(len(tgt), rng)
    tl = task.target_labeled if task.kind == SSDA else None
    if tl is not None:
        if n_sl % 2:
            raise DataError("SSDA needs an even labeled batch size")
        tl_cycle = _Cycler(len(tl), rng)
    while True:
        if tl is None:
            i = src_cycle.take(n_sl)
            x_sl, y_sl = src.images[i], src.labels[i]
        else:
            i, j = src_cycle.take(n_sl // 2), tl_cycle.take(n_sl // 2)
            x_sl = np.concatenate([src.images[i], tl.images[j]])
            y_sl = np.concatenate([src.labels[i], tl.labels[j]])
        u = tu_cycle.take(n_sl * uratio)
        yield BatchPair(x_sl, y_sl, tgt.images[u], src.k)
