"""Deterministic synthetic classification tasks over short token sequences.

Every example is ``[marker, c_1, ..., c_L]`` where ``marker`` identifies the task
(an instruction stand-in) and ``c_i`` are content tokens. Two families:

``teacher``
    A frozen random bag-of-embeddings network shared by the family, with a
    task-specific random output layer; label = argmax of its logits.
``majority``
    Each task owns ``num_classes`` content tokens; the label is whichever of
    them occurs most often (generated with a strict winner).

Text format written by :func:`save_dataset`::

    # task=<id> family=<f> train=<n> val=<n> test=<n> seed=<s> classes=<c> marker=<m>
    <tok> <tok> ... <tok> <label>      (train rows, then val, then test)
"""

from __future__ import annotations

import functools
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError, InputError
from .numerics import Rng

FAMILIES = ("teacher", "majority")
CONTENT_VOCAB = 32
MARKER_BASE = 32
TEACHER_DIM = 16


@dataclass(frozen=True)
class TaskSpec:
    task_id: str
    family: str = "teacher"
    num_classes: int = 4
    marker: int = MARKER_BASE
    content_len: int = 11
    content_vocab: int = CONTENT_VOCAB
    n_train: int = 1024
    n_val: int = 128
    n_test: int = 256
    seed: int = 0
    family_seed: int = 0
    margin_quantile: float = 0.2

    def validate(self) -> None:
        if self.family not in FAMILIES:
            raise InputError(f"unknown task family {self.family!r}")
        if min(self.n_train, self.n_val, self.n_test) <= 0:
            raise InputError("split sizes must be positive")
        if self.num_classes < 2 or self.content_len < 1:
            raise InputError("need at least two classes and one content token")
        if self.family == "majority" and self.num_classes > self.content_vocab // 2:
            raise InputError("too many classes for the majority family's vocabulary")
        if not 0.0 <= self.margin_quantile < 1.0:
            raise InputError("margin_quantile must be in [0, 1)")


@dataclass
class Split:
    x: np.ndarray
    y: np.ndarray

    def __len__(self) -> int:
        return len(self.y)


@dataclass
class Dataset:
    spec: TaskSpec
    train: Split
    val: Split
    test: Split
    meta: dict = field(default_factory=dict)

    @property
    def task_id(self) -> str:
        return self.spec.task_id


# -- labelling functions --------------------------------------------------------


@functools.lru_cache(maxsize=256)
def _teacher(spec: TaskSpec):
    """Shared embedding, task head and the label bias that balances the classes.

    A random head can leave a class that never wins the argmax; such heads are
    redrawn (deterministically) until every class is reachable.
    """
    fam = Rng(spec.family_seed, "teacher-family")
    emb = fam.normal((spec.content_vocab, TEACHER_DIM))
    calib = _teacher_calib(spec)
    for attempt in range(20):
        key = ("teacher-head", spec.task_id) + ((attempt,) if attempt else ())
        out = Rng(spec.seed, *key).normal((TEACHER_DIM, spec.num_classes))
        logits = emb[calib].mean(axis=1) @ out
        bias = _balance_bias(spec, logits)
        biased = logits + bias
        labels = biased.argmax(axis=1)
        if spec.margin_quantile > 0:
            top2 = np.sort(biased, axis=1)[:, -2:]
            margin = top2[:, 1] - top2[:, 0]
            labels = labels[margin >= np.quantile(margin, spec.margin_quantile)]
        freq = np.bincount(labels, minlength=spec.num_classes) / len(labels)
        if freq.min() >= 0.5 / spec.num_classes:
            return emb, out, bias
    raise InputError(f"could not draw a balanced teacher head for {spec.task_id}")


def _teacher_calib(spec: TaskSpec) -> np.ndarray:
    return Rng(spec.seed, "teacher-calib", spec.task_id).integers(0, spec.content_vocab, size=(4096, spec.content_len))


def _class_tokens(spec: TaskSpec) -> np.ndarray:
    rng = Rng(spec.seed, "majority-tokens", spec.task_id)
    return np.sort(rng.choice(spec.content_vocab, spec.num_classes, replace=False))


def label_logits(spec: TaskSpec, content: np.ndarray, bias: np.ndarray | None = None) -> np.ndarray:
    """Scores whose argmax is the task label of each content row (marker excluded)."""
    if spec.family == "teacher":
        emb, out, _ = _teacher(spec)
        logits = emb[content].mean(axis=1) @ out
        return logits if bias is None else logits + bias
    toks = _class_tokens(spec)
    counts = (content[:, :, None] == toks[None, None, :]).sum(axis=1).astype(np.float64)
    # lower class index wins ties
    return counts - 1e-3 * np.arange(spec.num_classes)


def _balance_bias(spec: TaskSpec, logits: np.ndarray) -> np.ndarray:
    bias = np.zeros(spec.num_classes)
    target = 1.0 / spec.num_classes
    for _ in range(200):
        freq = np.bincount((logits + bias).argmax(axis=1), minlength=spec.num_classes) / len(logits)
        if np.all(np.abs(freq - target) < 0.1 * target):
            break
        bias -= 0.5 * np.log(np.maximum(freq, 1e-3) / target) * logits.std()
    return bias


def _teacher_pool(spec: TaskSpec, rng: Rng, n: int):
    content = rng.integers(0, spec.content_vocab, size=(n, spec.content_len))
    calib = _teacher_calib(spec)
    bias = _teacher(spec)[2]
    labels = label_logits(spec, content, bias).argmax(axis=1)
    if spec.margin_quantile > 0:
        # drop near-boundary examples; the cut is fixed per task, not per pool
        cut = np.quantile(_margins(spec, calib, bias), spec.margin_quantile)
        keep = _margins(spec, content, bias) >= cut
        content, labels = content[keep], labels[keep]
    return content, labels


def _margins(spec: TaskSpec, content: np.ndarray, bias: np.ndarray) -> np.ndarray:
    top2 = np.sort(label_logits(spec, content, bias), axis=1)[:, -2:]
    return top2[:, 1] - top2[:, 0]


def _majority_pool(spec: TaskSpec, rng: Rng, n: int):
    toks = _class_tokens(spec)
    others = np.setdiff1d(np.arange(spec.content_vocab), toks)
    labels = rng.integers(0, spec.num_classes, size=n)
    content = others[rng.integers(0, len(others), size=(n, spec.content_len))]
    hi = max(2, spec.content_len // 3)
    for r in range(n):
        win = rng.integers(2, hi + 1)
        slots = rng.permutation(spec.content_len)
        content[r, slots[:win]] = toks[labels[r]]
        used = win
        for c in range(spec.num_classes):
            if c == labels[r] or used >= spec.content_len:
                continue
            cnt = min(int(rng.integers(0, win)), spec.content_len - used)
            content[r, slots[used : used + cnt]] = toks[c]
            used += cnt
    return content, labels


def _balanced_take(labels: np.ndarray, n: int, num_classes: int) -> np.ndarray:
    """Row indices giving class counts as equal as possible, in pool order."""
    quota = np.full(num_classes, n // num_classes)
    quota[: n % num_classes] += 1
    taken = np.zeros(num_classes, dtype=int)
    picked = []
    for i, lab in enumerate(labels):
        if taken[lab] < quota[lab]:
            picked.append(i)
            taken[lab] += 1
            if len(picked) == n:
                break
    return np.asarray(picked, dtype=np.int64)


def generate_task(spec: TaskSpec) -> Dataset:
    spec.validate()
    n_total = spec.n_train + spec.n_val + spec.n_test
    rng = Rng(spec.seed, "task-data", spec.task_id)
    pool_fn = _teacher_pool if spec.family == "teacher" else _majority_pool
    xs, ys = [], []
    have = 0
    seen = set()
    for _ in range(50):
        content, labels = pool_fn(spec, rng, 4 * n_total)
        # drop duplicates so splits are disjoint
        keep = []
        for i, row in enumerate(content):
            key = row.tobytes()
            if key not in seen:
                seen.add(key)
                keep.append(i)
        xs.append(content[keep])
        ys.append(labels[keep])
        have += len(keep)
        pool_x, pool_y = np.concatenate(xs), np.concatenate(ys)
        idx = _balanced_take(pool_y, n_total, spec.num_classes)
        if len(idx) == n_total:
            break
    else:
        raise InputError(f"could not draw {n_total} balanced examples for {spec.task_id}")
    content, labels = pool_x[idx], pool_y[idx]
    order = Rng(spec.seed, "task-shuffle", spec.task_id).permutation(n_total)
    content, labels = content[order], labels[order]
    x = np.concatenate([np.full((n_total, 1), spec.marker), content], axis=1).astype(np.int64)
    y = labels.astype(np.int64)
    a, b = spec.n_train, spec.n_train + spec.n_val
    return Dataset(spec, Split(x[:a], y[:a]), Split(x[a:b], y[a:b]), Split(x[b:], y[b:]))


def build_suite(n_held_in: int = 8, n_held_out: int = 4, seed: int = 0, gate=None, max_attempts: int = 5, **spec_kwargs):
    """Held-in and held-out task lists with distinct markers and seeds.

    ``gate(dataset) -> bool`` optionally vets each held-in task; a rejected task
    is regenerated with a fresh seed, up to ``max_attempts`` times.
    """
    if n_held_in <= 0 or n_held_out <= 0:
        raise InputError("suite needs at least one held-in and one held-out task")
    if n_held_in + n_held_out > 32:
        raise InputError("at most 32 tasks fit in the marker vocabulary")
    rng = Rng(seed, "suite")
    seeds = rng.choice(2**31 - 1, n_held_in + n_held_out + n_held_in * max_attempts, replace=False)
    spare = list(seeds[n_held_in + n_held_out :])
    fam_seed = int(rng.integers(0, 2**31 - 1))

    def make(i, s, prefix):
        family = FAMILIES[i % 2] if prefix == "in" else FAMILIES[(i + 1) % 2]
        spec = TaskSpec(
            task_id=f"{prefix}{i:02d}",
            family=family,
            marker=MARKER_BASE + (i if prefix == "in" else n_held_in + i),
            seed=int(s),
            family_seed=fam_seed,
            **spec_kwargs,
        )
        return generate_task(spec)

    held_in = []
    for i in range(n_held_in):
        ds = make(i, seeds[i], "in")
        attempts = 1
        while gate is not None and not gate(ds) and attempts < max_attempts:
            ds = make(i, spare.pop(), "in")
            attempts += 1
        ds.meta["attempts"] = attempts
        held_in.append(ds)
    held_out = [make(i, seeds[n_held_in + i], "out") for i in range(n_held_out)]
    return held_in, held_out


# -- text serialization ------------------------------------------------------------


def save_dataset(ds: Dataset, path) -> None:
    s = ds.spec
    lines = [
        f"# task={s.task_id} family={s.family} train={len(ds.train)} val={len(ds.val)} "
        f"test={len(ds.test)} seed={s.seed} classes={s.num_classes} marker={s.marker}"
    ]
    for split in (ds.train, ds.val, ds.test):
        for row, lab in zip(split.x, split.y):
            lines.append(" ".join(map(str, row.tolist())) + f" {int(lab)}")
    Path(path).write_text("\n".join(lines) + "\n")


def load_dataset(path, spec: TaskSpec | None = None) -> Dataset:
    text = Path(path).read_text().splitlines()
    if not text or not text[0].startswith("# "):
        raise FormatError(f"{path}: missing header line")
    try:
        header = dict(item.split("=", 1) for item in text[0][2:].split())
        sizes = [int(header[k]) for k in ("train", "val", "test")]
        rows = np.array([[int(v) for v in line.split()] for line in text[1:] if line.strip()], dtype=np.int64)
    except (KeyError, ValueError) as exc:
        raise FormatError(f"{path}: malformed dataset file ({exc})") from exc
    if rows.shape[0] != sum(sizes):
        raise FormatError(f"{path}: expected {sum(sizes)} rows, found {rows.shape[0]}")
    if spec is None:
        spec = TaskSpec(
            task_id=header["task"],
            family=header["family"],
            num_classes=int(header["classes"]),
            marker=int(header["marker"]),
            content_len=rows.shape[1] - 2,
            n_train=sizes[0],
            n_val=sizes[1],
            n_test=sizes[2],
            seed=int(header["seed"]),
        )
    x, y = rows[:, :-1], rows[:, -1]
    a, b = sizes[0], sizes[0] + sizes[1]
    return Dataset(spec, Split(x[:a], y[:a]), Split(x[a:b], y[a:b]), Split(x[b:], y[b:]))


def pretraining_suite(held_in: list[Dataset], n_tasks: int, n_held_out: int, seed: int = 0, **spec_kwargs) -> list[Dataset]:
    """Extra tasks from the same families, with their own markers, for preparing a base model.

    Markers follow those of the held-in and held-out tasks, so nothing collides.
    """
    if not held_in:
        raise InputError("need the held-in suite to place pretraining markers")
    first = len(held_in) + n_held_out
    if first + n_tasks > 32:
        raise InputError(f"{n_tasks} pretraining tasks do not fit in the marker vocabulary")
    fam_seed = held_in[0].spec.family_seed
    seeds = Rng(seed, "pretrain-suite").choice(2**31 - 1, n_tasks, replace=False)
    return [
        generate_task(
            TaskSpec(
                task_id=f"pre{i:02d}",
                family=FAMILIES[i % 2],
                marker=MARKER_BASE + first + i,
                seed=int(seeds[i]),
                family_seed=fam_seed,
                **spec_kwargs,
            )
        )
        for i in range(n_tasks)
    ]
