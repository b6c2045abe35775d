"""Synthetic sequence-classification data: generation, file format, loading."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError

SCHEMA_VERSION = 1
SPLIT_NAMES = ("train", "val", "test")
DEFAULT_SIZES = {"train": 50000, "val": 1000, "test": 5000}

# stream tag separating the example sampler from the rule tables, so the
# labeling rule for a given seed never depends on how many examples are drawn
_SAMPLER_STREAM = 1


@dataclass(frozen=True)
class SyntheticTask:
    """Deterministic labeling task over random token sequences.

    Each token id owns a fixed random embedding; the label of a sequence is
    the class whose direction vector best aligns with the mean embedding.
    Sequences whose top-2 class scores are closer than ``margin`` are
    rejected during generation, so labels are unambiguous and a perfect
    classifier exists by construction.
    """

    seed: int = 0
    vocab: int = 100
    seq_len: int = 16
    num_classes: int = 4
    margin: float = 0.1
    gen_dim: int = 32

    def validate(self) -> None:
        if self.vocab < 2:
            raise ConfigError(f"vocab must be >= 2, got {self.vocab}")
        if self.seq_len < 1:
            raise ConfigError(f"seq_len must be >= 1, got {self.seq_len}")
        if self.num_classes < 2:
            raise ConfigError(
                f"num_classes must be >= 2, got {self.num_classes}")
        if not (0.0 <= self.margin < 10.0) or not np.isfinite(self.margin):
            raise ConfigError(f"margin must be in [0, 10), got {self.margin}")
        if self.gen_dim < 1:
            raise ConfigError(f"gen_dim must be >= 1, got {self.gen_dim}")

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "vocab": self.vocab,
            "seq_len": self.seq_len,
            "num_classes": self.num_classes,
            "margin": self.margin,
            "gen_dim": self.gen_dim,
        }


@dataclass
class Dataset:
    """One split held in memory: ``tokens`` is [n, T] int64, ``labels`` [n]."""

    tokens: np.ndarray
    labels: np.ndarray
    vocab: int
    num_classes: int
    split: str = ""
    seed: int = 0

    def __len__(self) -> int:
        return int(self.labels.shape[0])


def rule_tables(task: SyntheticTask) -> tuple[np.ndarray, np.ndarray]:
    """Return the (token embedding table, class direction matrix) pair.

    Both are fully determined by ``task.seed`` and the task dimensions.
    """
    task.validate()
    rng = np.random.default_rng(task.seed)
    embed = rng.standard_normal((task.vocab, task.gen_dim))
    directions = rng.standard_normal((task.num_classes, task.gen_dim))
    return embed, directions


def _mean_embed(embed: np.ndarray, tokens: np.ndarray) -> np.ndarray:
    # accumulate per position to avoid a [n, T, gen_dim] intermediate
    m = embed[tokens[:, 0]].copy()
    for t in range(1, tokens.shape[1]):
        m += embed[tokens[:, t]]
    m /= tokens.shape[1]
    return m


def scores_for(task: SyntheticTask, tokens: np.ndarray) -> np.ndarray:
    """Class scores [n, num_classes] for token rows under the labeling rule."""
    tokens = np.asarray(tokens)
    if tokens.ndim != 2 or tokens.shape[1] != task.seq_len:
        raise DataError(
            f"tokens must be [n, {task.seq_len}], got shape {tokens.shape}")
    embed, directions = rule_tables(task)
    return _mean_embed(embed, tokens) @ directions.T


def labels_for(task: SyntheticTask, tokens: np.ndarray) -> np.ndarray:
    """Recompute labels from the documented rule (argmax of class scores)."""
    return scores_for(task, tokens).argmax(axis=1)


def top2_gap(task: SyntheticTask, tokens: np.ndarray) -> np.ndarray:
    """Gap between the best and second-best class score per row."""
    scores = scores_for(task, tokens)
    top2 = np.partition(scores, -2, axis=1)
    return top2[:, -1] - top2[:, -2]


def _check_sizes(sizes) -> dict[str, int]:
    if sizes is None:
        return dict(DEFAULT_SIZES)
    if isinstance(sizes, dict):
        if set(sizes) != set(SPLIT_NAMES):
            raise ConfigError(
                f"sizes must have exactly the keys {SPLIT_NAMES}, "
                f"got {sorted(sizes)}")
        vals = {k: sizes[k] for k in SPLIT_NAMES}
    else:
        seq = tuple(sizes)
        if len(seq) != 3:
            raise ConfigError(
                f"sizes must be (train, val, test), got {len(seq)} entries")
        vals = dict(zip(SPLIT_NAMES, seq))
    for name, v in vals.items():
        if isinstance(v, bool) or not isinstance(v, (int, np.integer)) or v <= 0:
            raise ConfigError(
                f"split size {name!r} must be a positive integer, got {v!r}")
    return {k: int(v) for k, v in vals.items()}


def _sample(task, embed, directions, count, rng, seen):
    tokens = np.empty((count, task.seq_len), dtype=np.int64)
    labels = np.empty(count, dtype=np.int64)
    filled = 0
    stale_rounds = 0
    while filled < count:
        n = min(8192, max(256, 2 * (count - filled)))
        cand = rng.integers(0, task.vocab, size=(n, task.seq_len),
                            dtype=np.int64)
        scores = _mean_embed(embed, cand) @ directions.T
        top2 = np.partition(scores, -2, axis=1)
        clear = np.flatnonzero(top2[:, -1] - top2[:, -2] >= task.margin)
        added = 0
        for i in clear:
            key = cand[i].tobytes()
            if key in seen:
                continue
            seen.add(key)
            tokens[filled] = cand[i]
            labels[filled] = int(np.argmax(scores[i]))
            filled += 1
            added += 1
            if filled == count:
                break
        stale_rounds = 0 if added else stale_rounds + 1
        if stale_rounds >= 50:
            raise DataError(
                "cannot draw enough distinct examples clearing the margin "
                f"filter (vocab={task.vocab}, seq_len={task.seq_len}, "
                f"margin={task.margin}); loosen the margin or enlarge the "
                "token space")
    return tokens, labels


def generate_splits(task: SyntheticTask, sizes=None) -> dict[str, Dataset]:
    """Draw disjoint train/val/test splits, deterministic given the seed.

    A single dedup set spans all three splits, so no token sequence appears
    in more than one of them.
    """
    task.validate()
    counts = _check_sizes(sizes)
    embed, directions = rule_tables(task)
    rng = np.random.default_rng((task.seed, _SAMPLER_STREAM))
    seen: set[bytes] = set()
    out = {}
    for name in SPLIT_NAMES:
        toks, labs = _sample(task, embed, directions, counts[name], rng, seen)
        out[name] = Dataset(tokens=toks, labels=labs, vocab=task.vocab,
                            num_classes=task.num_classes, split=name,
                            seed=task.seed)
    return out


def write_dataset(ds: Dataset, path) -> None:
    """Write one split: a header line, then `tok tok ... tok<TAB>label` rows."""
    path = Path(path)
    header = (
        f"dataset schema={SCHEMA_VERSION} split={ds.split} vocab={ds.vocab} "
        f"seq_len={ds.tokens.shape[1]} num_classes={ds.num_classes} "
        f"count={len(ds)} seed={ds.seed}"
    )
    lines = [header]
    for row, lab in zip(ds.tokens, ds.labels):
        lines.append(" ".join(map(str, row)) + "\t" + str(lab))
    path.write_text("\n".join(lines) + "\n", encoding="ascii")


def _parse_header(path: Path, line: str) -> dict:
    fields = line.split()
    if not fields or fields[0] != "dataset":
        raise DataError(f"{path}: not a dataset file (bad header line)")
    meta: dict = {}
    for field in fields[1:]:
        key, eq, value = field.partition("=")
        if not eq or not key:
            raise DataError(f"{path}: malformed header field {field!r}")
        meta[key] = value
    if meta.get("schema") != str(SCHEMA_VERSION):
        raise DataError(
            f"{path}: unsupported schema {meta.get('schema')!r} "
            f"(expected {SCHEMA_VERSION})")
    for key in ("vocab", "seq_len", "num_classes", "count", "seed"):
        if key not in meta:
            raise DataError(f"{path}: header missing {key}")
        try:
            meta[key] = int(meta[key])
        except ValueError:
            raise DataError(
                f"{path}: header field {key}={meta[key]!r} is not an "
                "integer") from None
    if meta["count"] < 0 or meta["seq_len"] < 1:
        raise DataError(f"{path}: nonsensical header counts")
    return meta


def load_dataset(path) -> Dataset:
    """Read a split back; malformed content raises DataError.

    Missing or unreadable files surface the underlying OSError so callers
    can distinguish I/O failures from format problems.
    """
    path = Path(path)
    text = path.read_text(encoding="ascii")
    newline = text.find("\n")
    if newline < 0:
        raise DataError(f"{path}: missing dataset body")
    meta = _parse_header(path, text[:newline])
    flat = text[newline + 1:].split()
    per_row = meta["seq_len"] + 1
    expected = meta["count"] * per_row
    if len(flat) != expected:
        raise DataError(
            f"{path}: expected {expected} fields for {meta['count']} "
            f"examples, found {len(flat)}")
    try:
        arr = np.array(flat, dtype=np.int64)
    except ValueError as exc:
        raise DataError(f"{path}: non-integer field in body ({exc})") from None
    arr = arr.reshape(meta["count"], per_row)
    tokens = np.ascontiguousarray(arr[:, :-1])
    labels = arr[:, -1].copy()
    if tokens.size and (tokens.min() < 0 or tokens.max() >= meta["vocab"]):
        raise DataError(
            f"{path}: token id outside [0, {meta['vocab']})")
    if labels.size and (labels.min() < 0
                        or labels.max() >= meta["num_classes"]):
        raise DataError(
            f"{path}: label outside [0, {meta['num_classes']})")
    return Dataset(tokens=tokens, labels=labels, vocab=meta["vocab"],
                   num_classes=meta["num_classes"],
                   split=str(meta.get("split", "")), seed=meta["seed"])


def generate_dataset(task: SyntheticTask, out_dir, sizes=None
                     ) -> dict[str, Path]:
    """Generate all three splits and write them under ``out_dir``."""
    splits = generate_splits(task, sizes)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {}
    for name, ds in splits.items():
        target = out_dir / f"{name}.txt"
        write_dataset(ds, target)
        paths[name] = target
    return paths
