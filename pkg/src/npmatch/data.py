"""Datasets: builtin toy generators, CSV and IDX readers, SSL splits."""

import csv
import dataclasses
import struct
from dataclasses import dataclass

import numpy as np

UNLABELED = -1
LABELED_SPLIT, UNLABELED_SPLIT, TEST_SPLIT = 0, 1, 2
SPLIT_NAMES = {"labeled": LABELED_SPLIT, "unlabeled": UNLABELED_SPLIT, "test": TEST_SPLIT}


class DataError(ValueError):
    """Malformed or inconsistent dataset input."""


@dataclass
class Dataset:
    kind: str  # "vector" or "image"
    x: np.ndarray
    y: np.ndarray  # class ids, UNLABELED where unknown
    n_classes: int
    split: np.ndarray = None  # per-sample split tag, set by split_ssl
    stats: dict = None  # normalisation applied to x

    def __post_init__(self):
        self.y = np.asarray(self.y, dtype=np.int64)
        if self.n_classes < 2:
            raise DataError("need at least two classes")
        if len(self.x) != len(self.y):
            raise DataError(f"{len(self.x)} samples but {len(self.y)} labels")
        bad = (self.y < UNLABELED) | (self.y >= self.n_classes)
        if np.any(bad):
            i = int(np.flatnonzero(bad)[0])
            raise DataError(f"label {self.y[i]} at sample {i} outside [0, {self.n_classes})")

    def __len__(self):
        return len(self.y)

    @property
    def input_dim(self):
        return self.x.shape[1] if self.kind == "vector" else self.x.shape[-1]

    @property
    def image_channels(self):
        return 1 if self.kind == "vector" else self.x.shape[1]

    def part(self, name):
        """(x, y) for split ``name`` in {"labeled", "unlabeled", "test"}."""
        if self.split is None:
            raise DataError("dataset has no split; call split_ssl first")
        mask = self.split == SPLIT_NAMES[name]
        return self.x[mask], self.y[mask]

    def fill_value(self):
        """Per-dataset mean input value (used by cutout)."""
        return float(self.x.mean()) if len(self.x) else 0.0


# -------------------------------------------------------------- builtins


def make_two_moons(n, noise, seed):
    rng = np.random.default_rng(seed)
    n_outer = n // 2
    n_inner = n - n_outer
    t_out = np.linspace(0.0, np.pi, n_outer)
    t_in = np.linspace(0.0, np.pi, n_inner)
    x = np.concatenate([
        np.stack([np.cos(t_out), np.sin(t_out)], axis=1),
        np.stack([1.0 - np.cos(t_in), 0.5 - np.sin(t_in)], axis=1),
    ])
    y = np.concatenate([np.zeros(n_outer, np.int64), np.ones(n_inner, np.int64)])
    x = x + noise * rng.standard_normal(x.shape)
    perm = rng.permutation(n)
    return x[perm], y[perm]


def make_blobs(n, n_classes, seed, dim=2, spread=3.0, std=1.0):
    """Isotropic Gaussian clusters with seeded random centres."""
    rng = np.random.default_rng(seed)
    centres = rng.uniform(-spread, spread, size=(n_classes, dim))
    y = np.arange(n) % n_classes
    x = centres[y] + std * rng.standard_normal((n, dim))
    perm = rng.permutation(n)
    return x[perm], y[perm].astype(np.int64)


# ----------------------------------------------------------------- files


def read_csv(path):
    """Header row required; a ``label`` column holds class ids (-1 = unlabeled)."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        header = [h.strip() for h in header]
        if "label" not in header:
            raise DataError(f"{path}: line 1: no 'label' column in header")
        li = header.index("label")
        xs, ys = [], []
        for row in reader:
            line = reader.line_num
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise DataError(f"{path}: line {line}: expected {len(header)} fields, got {len(row)}")
            try:
                ys.append(int(row[li]))
                xs.append([float(c) for j, c in enumerate(row) if j != li])
            except ValueError as exc:
                raise DataError(f"{path}: line {line}: {exc}") from None
    x = np.asarray(xs, dtype=np.float64).reshape(len(xs), len(header) - 1)
    return x, np.asarray(ys, dtype=np.int64)


_IDX_TYPES = {0x08: ">u1", 0x09: ">i1", 0x0B: ">i2", 0x0C: ">i4", 0x0D: ">f4", 0x0E: ">f8"}


def read_idx(path, expect_ndim=None):
    """Array from an IDX file (the MNIST container format)."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 4:
        raise DataError(f"{path}: byte 0: truncated header")
    if raw[0] != 0 or raw[1] != 0:
        raise DataError(f"{path}: byte 0: bad magic {raw[:4].hex()}")
    code, ndim = raw[2], raw[3]
    if code not in _IDX_TYPES:
        raise DataError(f"{path}: byte 2: unknown type code 0x{code:02x}")
    if expect_ndim is not None and ndim != expect_ndim:
        raise DataError(
            f"{path}: byte 3: magic 0x{int.from_bytes(raw[:4], 'big'):08x} "
            f"has {ndim} dims, expected {expect_ndim}")
    header_end = 4 + 4 * ndim
    if len(raw) < header_end:
        raise DataError(f"{path}: byte 4: truncated dimension header")
    dims = struct.unpack(f">{ndim}I", raw[4:header_end])
    dtype = np.dtype(_IDX_TYPES[code])
    need = int(np.prod(dims)) * dtype.itemsize
    if len(raw) - header_end != need:
        raise DataError(
            f"{path}: byte {header_end}: payload has {len(raw) - header_end} bytes, expected {need}")
    return np.frombuffer(raw, dtype=dtype, offset=header_end).reshape(dims)


def write_idx(path, array):
    array = np.asarray(array)
    code = {np.dtype(v).newbyteorder("="): k for k, v in _IDX_TYPES.items()}
    key = array.dtype.newbyteorder("=")
    if key not in code:
        raise DataError(f"unsupported dtype {array.dtype}")
    with open(path, "wb") as fh:
        fh.write(bytes([0, 0, code[key], array.ndim]))
        fh.write(struct.pack(f">{array.ndim}I", *array.shape))
        fh.write(array.astype(_IDX_TYPES[code[key]]).tobytes())


def read_index_list(path):
    with open(path, encoding="utf-8") as fh:
        out = []
        for n, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                out.append(int(line))
            except ValueError:
                raise DataError(f"{path}: line {n}: not an integer: {line!r}") from None
    return np.asarray(out, dtype=np.int64)


# ----------------------------------------------------------- entry points


def normalise(kind, x, stats=None):
    """Standardise vectors per feature; scale images into [0, 1]."""
    if kind == "vector":
        if stats is None:
            mean = x.mean(axis=0)
            std = x.std(axis=0)
            std = np.where(std > 0, std, 1.0)
            stats = {"mean": mean, "std": std}
        return (x - stats["mean"]) / stats["std"], stats
    if stats is None:
        stats = {"scale": np.array([255.0 if x.max(initial=0) > 1.0 else 1.0])}
    return x / stats["scale"][0], stats


def load_dataset(source, n=1500, noise=0.1, n_classes=4, seed=7, normalize=True,
                 stats=None):
    """Build a Dataset from a builtin name or a file source.

    ``source`` is ``"two-moons"``, ``"blobs"``, a path ending in ``.csv``, or
    ``"idx:IMAGES,LABELS[,UNLABELED_INDEX_LIST]"``. ``stats`` reuses an
    earlier normalisation (e.g. from a checkpoint).
    """
    if source == "two-moons":
        x, y = make_two_moons(n, noise, seed)
        kind, C = "vector", 2
    elif source == "blobs":
        x, y = make_blobs(n, n_classes, seed)
        kind, C = "vector", n_classes
    elif source.startswith("idx:"):
        paths = source[4:].split(",")
        if len(paths) not in (2, 3):
            raise DataError("idx source needs IMAGES,LABELS[,UNLABELED]")
        images = read_idx(paths[0], expect_ndim=3).astype(np.float64)
        labels = read_idx(paths[1], expect_ndim=1).astype(np.int64)
        if len(images) != len(labels):
            raise DataError(f"{len(images)} images but {len(labels)} labels")
        if len(paths) == 3:
            labels = labels.copy()
            labels[read_index_list(paths[2])] = UNLABELED
        x, y = images[:, None, :, :], labels
        kind = "image"
        known = y[y >= 0]
        C = max(int(known.max()) + 1 if known.size else 0, n_classes if len(paths) == 3 else 0, 2)
    elif source.endswith(".csv"):
        x, y = read_csv(source)
        kind = "vector"
        known = y[y >= 0]
        C = max(int(known.max()) + 1 if known.size else 2, 2)
    else:
        raise DataError(f"unknown data source {source!r}")
    if normalize:
        x, stats = normalise(kind, x, stats)
    return Dataset(kind, x, y, C, stats=stats)


def split_ssl(dataset, labels_per_class, test_fraction, seed):
    """Tag samples as labeled / unlabeled / test.

    A seeded ``test_fraction`` of the ground-truth samples becomes the test
    set; ``labels_per_class`` samples of each class are drawn from the rest;
    everything else (including samples without labels) is unlabeled.
    """
    if labels_per_class < 1:
        raise DataError("need at least one label per class")
    rng = np.random.default_rng(seed)
    known = np.flatnonzero(dataset.y >= 0)
    n_test = int(round(test_fraction * len(known)))
    test = rng.choice(known, size=n_test, replace=False) if n_test else np.zeros(0, np.int64)
    split = np.full(len(dataset), UNLABELED_SPLIT, dtype=np.int8)
    split[test] = TEST_SPLIT
    pool = known[split[known] != TEST_SPLIT]
    for c in range(dataset.n_classes):
        members = pool[dataset.y[pool] == c]
        if len(members) < labels_per_class:
            raise DataError(
                f"class {c} has {len(members)} training samples, "
                f"fewer than labels_per_class={labels_per_class}")
        split[rng.choice(members, size=labels_per_class, replace=False)] = LABELED_SPLIT
    return dataclasses.replace(dataset, split=split)


def dataset_from_config(cfg):
    ds = load_dataset(cfg.dataset, n=cfg.n_samples, noise=cfg.noise,
                      n_classes=cfg.n_classes, seed=cfg.data_seed)
    return split_ssl(ds, cfg.labels_per_class, cfg.test_fraction, cfg.seed)
