"""Event-sequence data model, JSONL I/O, splits, batching, and masks."""

from __future__ import annotations

import json
import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import Rng

__all__ = [
    "EventSequence",
    "Dataset",
    "PaddedBatch",
    "LocalHistoryMask",
    "DataError",
    "load_jsonl",
    "save_jsonl",
    "split",
    "make_batch",
    "local_history_mask",
    "drop_events",
]

log = logging.getLogger(__name__)


class DataError(ValueError):
    """Malformed or inconsistent event-sequence data."""


@dataclass
class EventSequence:
    """One task: strictly increasing arrival times plus optional integer marks."""

    arrival_times: np.ndarray
    marks: np.ndarray | None = None
    id: str = ""
    t_end: float | None = None  # observation horizon, used by the survival term

    def __post_init__(self):
        t = np.asarray(self.arrival_times, dtype=np.float64)
        if t.ndim != 1 or t.size < 2:
            raise DataError(f"sequence {self.id!r}: needs at least 2 arrival times")
        if not np.all(np.isfinite(t)):
            raise DataError(f"sequence {self.id!r}: non-finite arrival times")
        if t[0] <= 0:
            raise DataError(f"sequence {self.id!r}: arrival times must be positive")
        if not np.all(np.diff(t) > 0):
            raise DataError(f"sequence {self.id!r}: arrival times not strictly increasing")
        self.arrival_times = t
        if self.marks is not None:
            m = np.asarray(self.marks, dtype=np.int64)
            if m.shape != t.shape:
                raise DataError(f"sequence {self.id!r}: marks length {m.size} != times length {t.size}")
            if m.min() < 0:
                raise DataError(f"sequence {self.id!r}: negative mark")
            self.marks = m
        if self.t_end is not None and self.t_end < t[-1]:
            raise DataError(f"sequence {self.id!r}: t_end before last event")

    def __len__(self) -> int:
        return self.arrival_times.size

    @property
    def inter_event_times(self) -> np.ndarray:
        """Gaps between consecutive events; the first entry is the time since origin."""
        return np.diff(self.arrival_times, prepend=0.0)


@dataclass
class Dataset:
    """A collection of event sequences sharing one mark vocabulary."""

    sequences: list[EventSequence]
    num_marks: int = 1
    name: str = ""

    def __post_init__(self):
        if self.num_marks < 1:
            raise DataError(f"num_marks must be >= 1, got {self.num_marks}")
        for s in self.sequences:
            if s.marks is not None and s.marks.max(initial=0) >= self.num_marks:
                raise DataError(f"sequence {s.id!r}: mark {int(s.marks.max())} >= num_marks {self.num_marks}")

    def __len__(self) -> int:
        return len(self.sequences)

    def subset(self, indices, name: str | None = None) -> "Dataset":
        seqs = [self.sequences[i] for i in indices]
        return Dataset(seqs, num_marks=self.num_marks, name=name or self.name)


# -- line-delimited JSON interchange ---------------------------------------------


def load_jsonl(path) -> Dataset:
    """Load a dataset from UTF-8 line-delimited JSON.

    Each line is one sequence record ``{"id": ..., "arrival_times": [...],
    "marks": [...]}``; an optional header line ``{"num_marks": int}`` may
    precede the records.  Validation failures name the offending line.
    """
    path = Path(path)
    sequences: list[EventSequence] = []
    num_marks = None
    with path.open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"{path}:{lineno}: invalid JSON ({exc})") from exc
            if not isinstance(rec, dict):
                raise DataError(f"{path}:{lineno}: expected an object")
            if "arrival_times" not in rec:
                if "num_marks" in rec and not sequences:
                    num_marks = int(rec["num_marks"])
                    continue
                raise DataError(f"{path}:{lineno}: missing arrival_times")
            try:
                seq = EventSequence(
                    arrival_times=rec["arrival_times"],
                    marks=rec.get("marks"),
                    id=str(rec.get("id", f"seq{len(sequences)}")),
                    t_end=rec.get("t_end"),
                )
            except DataError as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from exc
            sequences.append(seq)
    if not sequences:
        raise DataError(f"{path}: no sequences found")
    if num_marks is None:
        has_marks = [s for s in sequences if s.marks is not None]
        num_marks = 1 + max((int(s.marks.max()) for s in has_marks), default=0)
    return Dataset(sequences, num_marks=num_marks, name=path.stem)


def save_jsonl(dataset: Dataset, path) -> None:
    """Write a dataset in the line-delimited JSON interchange format."""
    path = Path(path)
    with path.open("w", encoding="utf-8") as fh:
        fh.write(json.dumps({"num_marks": dataset.num_marks}) + "\n")
        for seq in dataset.sequences:
            rec = {"id": seq.id, "arrival_times": [float(t) for t in seq.arrival_times]}
            if seq.marks is not None:
                rec["marks"] = [int(m) for m in seq.marks]
            if seq.t_end is not None:
                rec["t_end"] = float(seq.t_end)
            fh.write(json.dumps(rec) + "\n")


def split(dataset: Dataset, fractions=(0.6, 0.2, 0.2), seed: int = 0) -> tuple[Dataset, ...]:
    """Seed-deterministic partition of whole sequences into train/val/test."""
    fractions = tuple(float(f) for f in fractions)
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise DataError(f"fractions must sum to 1, got {fractions}")
    n = len(dataset)
    order = Rng(seed).permutation(n)
    edges = [0] + [int(round(c * n)) for c in np.cumsum(fractions)]
    edges[-1] = n
    parts = []
    part_names = ("train", "val", "test")
    for i in range(len(fractions)):
        idx = order[edges[i] : edges[i + 1]]
        if idx.size == 0:
            warnings.warn(f"split: {part_names[i] if i < 3 else i} partition is empty", stacklevel=2)
        parts.append(dataset.subset(idx, name=f"{dataset.name}/{part_names[i] if i < 3 else i}"))
    return tuple(parts)


# -- padded batches ----------------------------------------------------------------


@dataclass
class PaddedBatch:
    """Batched tensors of inter-event times, absolute times, marks, and validity."""

    inter_event_times: np.ndarray  # [B, L] float, first entry = time since origin
    absolute_times: np.ndarray  # [B, L] float
    marks: np.ndarray  # [B, L] int, 0 at padding
    valid_mask: np.ndarray  # [B, L] bool
    lengths: np.ndarray  # [B] int
    t_end: np.ndarray | None = None  # [B] float observation horizons where known

    @property
    def batch_size(self) -> int:
        return self.inter_event_times.shape[0]

    @property
    def max_len(self) -> int:
        return self.inter_event_times.shape[1]


def make_batch(sequences: list[EventSequence], l_max: int | None = None) -> PaddedBatch:
    """Pad a list of sequences into rectangular arrays.

    Padding entries are zero and masked out of every downstream loss.
    """
    if not sequences:
        raise DataError("make_batch: empty sequence list")
    lengths = np.array([len(s) for s in sequences], dtype=np.int64)
    if l_max is None:
        l_max = int(lengths.max())
    if lengths.max() > l_max:
        too_long = [s.id for s in sequences if len(s) > l_max][:3]
        raise DataError(f"make_batch: sequences longer than L_max={l_max}: {too_long}")
    b = len(sequences)
    dt = np.zeros((b, l_max))
    at = np.zeros((b, l_max))
    mk = np.zeros((b, l_max), dtype=np.int64)
    valid = np.zeros((b, l_max), dtype=bool)
    t_end = np.full(b, np.nan)
    for i, s in enumerate(sequences):
        n = len(s)
        at[i, :n] = s.arrival_times
        dt[i, :n] = s.inter_event_times
        if s.marks is not None:
            mk[i, :n] = s.marks
        valid[i, :n] = True
        if s.t_end is not None:
            t_end[i] = s.t_end
    return PaddedBatch(dt, at, mk, valid, lengths, t_end=t_end if np.any(np.isfinite(t_end)) else None)


@dataclass
class LocalHistoryMask:
    """Window-restricted causal attention pattern."""

    allowed: np.ndarray  # [L, L] bool
    window: int

    @property
    def size(self) -> int:
        return self.allowed.shape[0]


def local_history_mask(length: int, window: int) -> LocalHistoryMask:
    """allowed[i, j] is true iff j lies in the last ``window`` events up to i.

    Zero-based rows/columns; each row i allows columns max(0, i-window+1)..i,
    so the pattern is strictly causal and row i has min(i+1, window) entries.
    """
    if length < 1 or window < 1:
        raise DataError(f"local_history_mask: need length >= 1 and window >= 1, got ({length}, {window})")
    i = np.arange(length)[:, None]
    j = np.arange(length)[None, :]
    allowed = (j <= i) & (j >= i - window + 1)
    return LocalHistoryMask(allowed=allowed, window=window)


def drop_events(sequence: EventSequence, ratio: float, seed: int) -> tuple[EventSequence, np.ndarray]:
    """Independently drop each event with probability ``ratio``.

    Redraws until at least two events survive; returns the observed sequence
    and the (sorted) indices of the dropped events in the original sequence.
    """
    if not 0.0 <= ratio < 1.0:
        raise DataError(f"drop ratio must be in [0, 1), got {ratio}")
    n = len(sequence)
    if ratio == 0.0:
        return sequence, np.array([], dtype=np.int64)
    rng = Rng.keyed(seed, 0xD0)
    for _ in range(1000):
        dropped = rng.uniform(shape=n) < ratio
        if (~dropped).sum() >= 2:
            break
    else:
        raise DataError("drop_events: could not retain 2 events in 1000 redraws")
    keep = ~dropped
    observed = EventSequence(
        arrival_times=sequence.arrival_times[keep],
        marks=sequence.marks[keep] if sequence.marks is not None else None,
        id=f"{sequence.id}/drop{ratio}",
        t_end=sequence.t_end,
    )
    return observed, np.flatnonzero(dropped)
