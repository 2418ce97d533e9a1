"""Sequence datasets, adversarial target schedules, and input pools.

Everything downstream consumes one shape: a SequenceDataset holding float64
sequences (N, L, n) in a known value range, plus per-sequence class labels or
per-step regression targets. Sources: IDX image files sliced into column
sequences, long-format CSV files, and two self-contained synthetic
generators (digit glyphs rendered onto a 28x28 grid, and phase-shifted
sinusoids for regression).
"""

from __future__ import annotations

import csv
import math
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DataError

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


class IdxMagicError(DataError):
    """IDX file starts with the wrong magic number."""


class IdxTruncatedError(DataError):
    """IDX file ends before the header-declared payload."""


class IdxCountMismatchError(DataError):
    """Image and label files disagree on the number of items."""


# ---------------------------------------------------------------------------
# containers


@dataclass
class DatasetMeta:
    name: str
    n: int  # features per step
    length: int  # steps per sequence
    task: str  # "classification" | "regression"
    n_classes: int | None
    value_range: tuple = (0.0, 1.0)
    classes: tuple | None = None  # original class ids before relabeling


@dataclass
class SequenceDataset:
    sequences: np.ndarray  # (N, L, n) float64
    labels: np.ndarray | None  # (N,) int for classification, (N, L) float for regression
    meta: DatasetMeta

    def __post_init__(self):
        self.sequences = np.asarray(self.sequences, dtype=np.float64)
        if self.sequences.ndim != 3:
            raise DataError(f"sequences must be (N, L, n), got shape {self.sequences.shape}")

    def __len__(self) -> int:
        return len(self.sequences)

    def subset(self, idx) -> "SequenceDataset":
        labels = None if self.labels is None else self.labels[idx]
        return SequenceDataset(self.sequences[idx], labels, self.meta)


def split_dataset(data: SequenceDataset, train_fraction: float, seed=None):
    """Deterministic train/test split; shuffles only when a seed is given."""
    if not 0.0 < train_fraction < 1.0:
        raise ConfigError(f"train_fraction must be in (0, 1), got {train_fraction}")
    count = len(data)
    order = np.arange(count) if seed is None else np.random.default_rng(seed).permutation(count)
    cut = int(math.ceil(train_fraction * count))
    return data.subset(order[:cut]), data.subset(order[cut:])


# ---------------------------------------------------------------------------
# IDX image files


def _read_exact(fh, count, what, path):
    buf = fh.read(count)
    if len(buf) != count:
        raise IdxTruncatedError(f"{path}: truncated while reading {what} "
                                f"(wanted {count} bytes, got {len(buf)})")
    return buf


def load_idx(images_path, labels_path):
    """Read big-endian IDX image/label files.

    Returns (images (N, rows, cols) float64 in [0, 1], labels (N,) int64).
    """
    with open(images_path, "rb") as fh:
        magic, count, rows, cols = struct.unpack(">iiii", _read_exact(fh, 16, "image header", images_path))
        if magic != IDX_IMAGES_MAGIC:
            raise IdxMagicError(f"{images_path}: bad image magic 0x{magic:08x}, "
                                f"expected 0x{IDX_IMAGES_MAGIC:08x}")
        raw = _read_exact(fh, count * rows * cols, "image payload", images_path)
    images = np.frombuffer(raw, dtype=np.uint8).reshape(count, rows, cols)

    with open(labels_path, "rb") as fh:
        magic, n_labels = struct.unpack(">ii", _read_exact(fh, 8, "label header", labels_path))
        if magic != IDX_LABELS_MAGIC:
            raise IdxMagicError(f"{labels_path}: bad label magic 0x{magic:08x}, "
                                f"expected 0x{IDX_LABELS_MAGIC:08x}")
        raw = _read_exact(fh, n_labels, "label payload", labels_path)
    labels = np.frombuffer(raw, dtype=np.uint8).astype(np.int64)

    if count != n_labels:
        raise IdxCountMismatchError(
            f"{images_path} holds {count} images but {labels_path} holds {n_labels} labels")
    return images.astype(np.float64) / 255.0, labels


def write_idx(images, labels, images_path, labels_path):
    """Inverse of load_idx; images may be uint8 or floats in [0, 1]."""
    images = np.asarray(images)
    if images.dtype != np.uint8:
        images = np.round(np.clip(images, 0.0, 1.0) * 255.0).astype(np.uint8)
    labels = np.asarray(labels).astype(np.uint8)
    if images.ndim != 3 or len(images) != len(labels):
        raise DataError(f"write_idx: {images.shape} images vs {labels.shape} labels")
    count, rows, cols = images.shape
    with open(images_path, "wb") as fh:
        fh.write(struct.pack(">iiii", IDX_IMAGES_MAGIC, count, rows, cols))
        fh.write(images.tobytes())
    with open(labels_path, "wb") as fh:
        fh.write(struct.pack(">ii", IDX_LABELS_MAGIC, count))
        fh.write(labels.tobytes())


def to_column_sequences(images, labels, classes=None, name="columns"):
    """Slice square images into left-to-right column sequences.

    Step t of a sequence is image column t (all rows), so a (N, R, R) stack
    becomes sequences of length R with R features per step. An optional
    class filter keeps only those digits and relabels them 0..C'-1 in
    ascending original order.
    """
    images = np.asarray(images, dtype=np.float64)
    labels = np.asarray(labels)
    if images.ndim != 3:
        raise DataError(f"expected (N, rows, cols) images, got shape {images.shape}")
    if images.shape[1] != images.shape[2]:
        raise DataError(f"column slicing needs square images, got "
                        f"{images.shape[1]}x{images.shape[2]}")
    if classes is not None:
        classes = tuple(sorted(classes))
        keep = np.isin(labels, classes)
        images, labels = images[keep], labels[keep]
        remap = {orig: new for new, orig in enumerate(classes)}
        labels = np.array([remap[int(v)] for v in labels], dtype=np.int64)
        n_classes = len(classes)
    else:
        labels = labels.astype(np.int64)
        n_classes = int(labels.max()) + 1 if len(labels) else 0
    # (N, rows, cols) -> (N, cols, rows): step t carries column t
    sequences = images.transpose(0, 2, 1).copy()
    meta = DatasetMeta(name=name, n=images.shape[1], length=images.shape[2],
                       task="classification", n_classes=n_classes,
                       value_range=(0.0, 1.0), classes=classes)
    return SequenceDataset(sequences, labels, meta)


# ---------------------------------------------------------------------------
# synthetic digit glyphs


def _arc(center, radii, theta0, theta1, count=220):
    th = np.linspace(theta0, theta1, count)
    return np.stack([center[0] + radii[0] * np.cos(th),
                     center[1] + radii[1] * np.sin(th)], axis=1)


def _glyph_points(digit, rng):
    """Stroke point cloud for one digit in (x right, y down) coordinates."""
    jr = lambda lo, hi: float(rng.uniform(lo, hi))
    up_c = (14.0 + jr(-0.7, 0.7), 9.3 + jr(-0.7, 0.7))
    lo_c = (14.0 + jr(-0.7, 0.7), 18.5 + jr(-0.7, 0.7))
    up_r = (4.3 * jr(0.85, 1.15), 3.9 * jr(0.85, 1.15))
    lo_r = (5.0 * jr(0.85, 1.15), 4.5 * jr(0.85, 1.15))
    if digit == 8:
        parts = [_arc(up_c, up_r, 0.0, 2.0 * np.pi),
                 _arc(lo_c, lo_r, 0.0, 2.0 * np.pi)]
    elif digit == 3:
        # right-open double arc; jittered endpoints keep the left side clear
        a0 = np.deg2rad(-140.0 + jr(-10, 10))
        a1 = np.deg2rad(90.0 + jr(-8, 8))
        b0 = np.deg2rad(-90.0 + jr(-8, 8))
        b1 = np.deg2rad(140.0 + jr(-10, 10))
        parts = [_arc(up_c, up_r, a0, a1), _arc(lo_c, lo_r, b0, b1)]
    else:
        raise ConfigError(f"synth_digits: no glyph for digit {digit}")
    return np.concatenate(parts)


def _render(points, rng, size=28):
    """Splat a stroke point cloud onto the grid with jittered pose and width."""
    center = np.array([size / 2.0, size / 2.0])
    scale = rng.uniform(0.85, 1.1)
    rot = rng.uniform(-0.14, 0.14)
    shear = rng.uniform(-0.18, 0.18)
    shift = rng.uniform(-1.4, 1.4, size=2)
    rot_m = np.array([[np.cos(rot), -np.sin(rot)], [np.sin(rot), np.cos(rot)]])
    shear_m = np.array([[1.0, shear], [0.0, 1.0]])
    pts = (points - center) @ (scale * rot_m @ shear_m).T + center + shift

    sigma = rng.uniform(0.75, 1.15)
    ink = rng.uniform(0.82, 1.0)
    ys, xs = np.mgrid[0:size, 0:size]
    grid = np.stack([xs.ravel(), ys.ravel()], axis=1).astype(np.float64)
    d2 = ((grid[:, None, :] - pts[None, :, :]) ** 2).sum(axis=2).min(axis=1)
    img = ink * np.exp(-d2 / (2.0 * sigma * sigma))
    img[img < 0.02] = 0.0
    return img.reshape(size, size)


def synth_digits(count, classes=(3, 8), seed=0, size=28):
    """Render jittered digit glyphs, quantized to uint8 levels like scanned data.

    Returns (images (count, size, size) float64 in [0, 1], labels (count,)
    holding the original digit ids). Classes round-robin so the set is
    balanced.
    """
    if count < 1:
        raise ConfigError(f"synth_digits: count must be >= 1, got {count}")
    rng = np.random.default_rng(seed)
    images = np.empty((count, size, size))
    labels = np.empty(count, dtype=np.int64)
    for i in range(count):
        digit = classes[i % len(classes)]
        images[i] = _render(_glyph_points(digit, rng), rng, size)
        labels[i] = digit
    quantized = np.round(images * 255.0).astype(np.uint8)
    return quantized.astype(np.float64) / 255.0, labels


def digit_columns(count, classes=(3, 8), seed=0, name="digits"):
    """synth_digits piped through to_column_sequences, shuffled."""
    images, labels = synth_digits(count, classes=classes, seed=seed)
    order = np.random.default_rng(seed + 1).permutation(count)
    return to_column_sequences(images[order], labels[order], classes=classes, name=name)


# ---------------------------------------------------------------------------
# synthetic sine regression


def synth_sine(count, length=28, n=8, noise_sd=0.02, seed=0):
    """Phase-shifted sinusoid features; target y_t is the next step's feature mean.

    Features live in [0, 1]. The final step's target repeats the previous
    one (there is no next observation). A model that simply echoes the
    current feature mean is measurably worse than one that tracks phase.
    """
    if length < 2:
        raise ConfigError(f"synth_sine: length must be >= 2, got {length}")
    rng = np.random.default_rng(seed)
    t = np.arange(length)[None, :, None]  # (1, L, 1)
    freq = rng.uniform(1.0, 2.0, size=(count, 1, 1))
    phase0 = rng.uniform(0.0, 2.0 * np.pi, size=(count, 1, 1))
    # phases cluster inside one half-period so the feature mean keeps a
    # strong sinusoidal component (the regression target stays informative)
    feat_phase = (0.9 * np.pi * np.arange(n) / n)[None, None, :]
    feat_phase = feat_phase + rng.normal(0.0, 0.12, size=(count, 1, n))
    wave = np.sin(2.0 * np.pi * freq * t / length + phase0 + feat_phase)
    x = 0.5 + 0.38 * wave + rng.normal(0.0, noise_sd, size=(count, length, n))
    x = np.clip(x, 0.0, 1.0)
    y = np.empty((count, length))
    y[:, :-1] = x[:, 1:, :].mean(axis=2)
    y[:, -1] = y[:, -2]
    meta = DatasetMeta(name="synth_sine", n=n, length=length, task="regression",
                       n_classes=None, value_range=(0.0, 1.0))
    return SequenceDataset(x, y, meta)


# ---------------------------------------------------------------------------
# CSV loader


@dataclass
class CsvSchema:
    seq_id_col: str
    time_col: str
    feature_cols: list
    target_col: str | None = None
    task: str = "classification"
    train_fraction: float = 0.8


def _parse_float(value, path, row_no, col):
    try:
        return float(value)
    except (TypeError, ValueError):
        raise DataError(f"{path}: row {row_no}, column {col!r}: "
                        f"non-numeric value {value!r}") from None


def load_csv_sequences(path, schema: CsvSchema, name=None):
    """Long-format CSV -> SequenceDataset.

    Rows are grouped by seq_id_col and sorted by time_col. Features are
    min-max scaled to [0, 1] with statistics from the leading
    train_fraction of sequences only (sorted by id); a feature constant on
    that split maps to 0.5 everywhere. Test-split values outside the train
    range are clipped. Classification targets must be constant within a
    sequence; regression targets are kept per step, unscaled.
    """
    if schema.task == "regression" and schema.target_col is None:
        raise ConfigError("load_csv_sequences: task=regression requires target_col")
    if schema.task not in ("classification", "regression"):
        raise ConfigError(f"load_csv_sequences: unknown task {schema.task!r}")
    groups: dict = {}
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        needed = [schema.seq_id_col, schema.time_col, *schema.feature_cols]
        if schema.target_col is not None:
            needed.append(schema.target_col)
        missing = [c for c in needed if c not in header]
        if missing:
            raise DataError(f"{path}: missing columns {missing}; found {header}")
        for row_no, row in enumerate(reader, start=2):
            sid = row[schema.seq_id_col]
            tval = _parse_float(row[schema.time_col], path, row_no, schema.time_col)
            feats = [_parse_float(row[c], path, row_no, c) for c in schema.feature_cols]
            tgt = None
            if schema.target_col is not None:
                tgt = _parse_float(row[schema.target_col], path, row_no, schema.target_col)
            groups.setdefault(sid, []).append((tval, feats, tgt))

    if not groups:
        raise DataError(f"{path}: no data rows")

    def _id_key(s):
        try:
            return (0, float(s), "")
        except ValueError:
            return (1, 0.0, s)

    ids = sorted(groups, key=_id_key)
    lengths = {len(groups[g]) for g in ids}
    if len(lengths) != 1:
        raise DataError(f"{path}: ragged sequences, lengths {sorted(lengths)}")
    length = lengths.pop()
    if length < 1:
        raise DataError(f"{path}: empty sequences")

    n = len(schema.feature_cols)
    seqs = np.empty((len(ids), length, n))
    raw_targets = np.empty((len(ids), length))
    for i, sid in enumerate(ids):
        rows = sorted(groups[sid], key=lambda r: r[0])
        seqs[i] = np.array([r[1] for r in rows])
        if schema.target_col is not None:
            raw_targets[i] = np.array([r[2] for r in rows])

    n_train = max(1, int(math.ceil(schema.train_fraction * len(ids))))
    lo = seqs[:n_train].reshape(-1, n).min(axis=0)
    hi = seqs[:n_train].reshape(-1, n).max(axis=0)
    span = hi - lo
    flat = span == 0.0
    scaled = np.empty_like(seqs)
    safe = np.where(flat, 1.0, span)
    scaled = (seqs - lo) / safe
    scaled[..., flat] = 0.5
    scaled = np.clip(scaled, 0.0, 1.0)

    if schema.target_col is None:
        labels, n_classes = None, None
    elif schema.task == "classification":
        per_seq = raw_targets[:, 0]
        if not np.all(raw_targets == per_seq[:, None]):
            raise DataError(f"{path}: classification target varies within a sequence")
        labels = per_seq.astype(np.int64)
        if not np.all(per_seq == labels):
            raise DataError(f"{path}: classification targets must be integers")
        uniq = np.unique(labels)
        remap = {int(v): i for i, v in enumerate(uniq)}
        labels = np.array([remap[int(v)] for v in labels], dtype=np.int64)
        n_classes = len(uniq)
    else:
        labels, n_classes = raw_targets, None

    meta = DatasetMeta(name=name or str(path), n=n, length=length, task=schema.task,
                       n_classes=n_classes, value_range=(0.0, 1.0))
    return SequenceDataset(scaled, labels, meta)


# ---------------------------------------------------------------------------
# adversarial target schedules


@dataclass
class TargetSpec:
    pattern: str = "square_wave"  # square_wave | constant | custom
    frequency: int = 2
    value: object = None  # constant payload
    values: tuple | None = None  # square-wave payload pair (a, b)
    steps: object = None  # custom full schedule

    def __post_init__(self):
        if self.pattern not in ("square_wave", "constant", "custom"):
            raise ConfigError(f"unknown target pattern {self.pattern!r}")


def _square_wave_payloads(spec, task, reference):
    if spec.values is not None:
        if len(spec.values) != 2:
            raise ConfigError(f"square_wave values must be a pair, got {spec.values!r}")
        return spec.values
    if reference is None:
        raise ConfigError("square_wave payloads need either explicit values or "
                          "reference labels to derive them from")
    ref = np.asarray(reference)
    if task == "classification":
        # two most frequent classes; ties break toward the smaller id
        ids, counts = np.unique(ref, return_counts=True)
        if len(ids) < 2:
            raise ConfigError("square_wave needs at least two classes in the reference labels")
        order = np.lexsort((ids, -counts))
        return int(ids[order[0]]), int(ids[order[1]])
    lo, hi = np.percentile(ref, [10.0, 90.0])
    return float(lo), float(hi)


def make_targets(spec: TargetSpec, length, task, reference=None):
    """Build the per-step adversarial target schedule y^a of shape (length,).

    square_wave with frequency f lays down 2f contiguous blocks whose sizes
    differ by at most one (block k spans [ceil(L*k/2f), ceil(L*(k+1)/2f))),
    alternating the two payloads. Payloads default to the two most frequent
    reference classes (classification) or the 10th/90th percentile of the
    reference values (regression).
    """
    if length < 1:
        raise ConfigError(f"make_targets: length must be >= 1, got {length}")
    if spec.pattern == "custom":
        steps = np.asarray(spec.steps)
        if steps.shape != (length,):
            raise ConfigError(f"custom schedule must have shape ({length},), got {steps.shape}")
        return steps.astype(np.int64 if task == "classification" else np.float64)
    if spec.pattern == "constant":
        if spec.value is None:
            raise ConfigError("constant target pattern requires a value")
        fill = int(spec.value) if task == "classification" else float(spec.value)
        return np.full(length, fill, dtype=np.int64 if task == "classification" else np.float64)

    f = spec.frequency
    if not isinstance(f, (int, np.integer)) or f < 1:
        raise ConfigError(f"square_wave frequency must be an integer >= 1, got {f!r}")
    if 2 * f > length:
        raise ConfigError(f"square_wave frequency {f} needs at least {2 * f} steps, "
                          f"sequence has {length}")
    a, b = _square_wave_payloads(spec, task, reference)
    bounds = [math.ceil(length * k / (2 * f)) for k in range(2 * f + 1)]
    out = np.empty(length, dtype=np.int64 if task == "classification" else np.float64)
    for k in range(2 * f):
        out[bounds[k]:bounds[k + 1]] = a if k % 2 == 0 else b
    return out


# ---------------------------------------------------------------------------
# IID input pool


@dataclass
class IidPool:
    """Every observed input step, flattened; draws are uniform with replacement."""

    vectors: np.ndarray  # (M, n)
    seed: int = 0

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors, dtype=np.float64)
        if self.vectors.ndim != 2 or len(self.vectors) == 0:
            raise DataError(f"IID pool needs a non-empty (M, n) array, got {self.vectors.shape}")

    @property
    def n(self) -> int:
        return self.vectors.shape[1]

    def sample(self, shape, rng=None):
        """Draw vectors; shape is the leading index shape, output gains (n,)."""
        rng = rng if rng is not None else np.random.default_rng(self.seed)
        idx = rng.integers(0, len(self.vectors), size=shape)
        return self.vectors[idx]


def build_iid_pool(data: SequenceDataset, seed=0) -> IidPool:
    flat = data.sequences.reshape(-1, data.sequences.shape[-1])
    return IidPool(flat.copy(), seed=seed)
