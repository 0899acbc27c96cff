"""Corpus ingestion and the on-disk sparse co-occurrence store.

Counting follows the distance-weighted window rule: every ordered
in-vocabulary pair at positions s != t with |s - t| <= window contributes
1/|s - t| to X[token_s, token_t].  Out-of-vocabulary tokens occupy
positions (they stretch distances) but never form pairs, and pairs never
cross sentence boundaries.  The store is a single append-only file of
(row, col, weight) records sorted by (row, col), so each row occupies one
contiguous record range; a monotone cursor serves sequential training
sweeps and an offset index serves random access.
"""

from __future__ import annotations

import heapq
import os
import struct
import tempfile
from dataclasses import dataclass
from typing import Iterable, Iterator, Sequence

import numpy as np

from .model import SparseRow

MAGIC = b"TWVECOO1"
_HEADER = struct.Struct("<8sHHIQQQ")  # magic, version, flags, window, n, tokens, records
VERSION = 1
FLAG_LOG1P = 1
RECORD_DTYPE = np.dtype([("row", "<u4"), ("col", "<u4"), ("weight", "<f8")])


class StoreFormatError(ValueError):
    """Store file is malformed or used against its header contract."""


class StaleCursorError(RuntimeError):
    """Cursor fetch requested a row that was already consumed."""


# ---------------------------------------------------------------------------
# vocabulary


class Vocabulary:
    """Dense token ids 0..n-1 ordered by descending frequency, ties broken
    lexicographically."""

    def __init__(self, tokens: Sequence[str], counts: Sequence[int]):
        if len(tokens) != len(counts):
            raise ValueError("tokens and counts length mismatch")
        self.tokens = list(tokens)
        self.counts = list(int(c) for c in counts)
        self.token_to_id = {tok: i for i, tok in enumerate(self.tokens)}
        if len(self.token_to_id) != len(self.tokens):
            raise ValueError("duplicate tokens in vocabulary")

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self.token_to_id

    def id_of(self, token: str) -> int:
        return self.token_to_id[token]

    def save(self, path: str | os.PathLike) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for tok, cnt in zip(self.tokens, self.counts):
                fh.write(f"{tok}\t{cnt}\n")

    @classmethod
    def load(cls, path: str | os.PathLike) -> "Vocabulary":
        tokens, counts = [], []
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                line = line.rstrip("\n")
                if not line:
                    continue
                tok, cnt = line.split("\t")
                tokens.append(tok)
                counts.append(int(cnt))
        return cls(tokens, counts)


def read_corpus(path: str | os.PathLike) -> Iterator[list[str]]:
    """Yield whitespace-tokenized sentences, one per line of a UTF-8 file."""
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            tokens = line.split()
            if tokens:
                yield tokens


def build_vocab(sentences: Iterable[Sequence[str]], max_size: int | None = None,
                min_count: int = 1) -> Vocabulary:
    """Top ``max_size`` tokens with frequency >= ``min_count``."""
    freqs: dict[str, int] = {}
    total = 0
    for sent in sentences:
        for tok in sent:
            total += 1
            freqs[tok] = freqs.get(tok, 0) + 1
    if total == 0:
        raise ValueError("empty corpus")
    ranked = sorted(freqs.items(), key=lambda kv: (-kv[1], kv[0]))
    if min_count > 1:
        ranked = [kv for kv in ranked if kv[1] >= min_count]
    if max_size is not None:
        ranked = ranked[:max_size]
    return Vocabulary([t for t, _ in ranked], [c for _, c in ranked])


# ---------------------------------------------------------------------------
# store


class CooccurrenceStore:
    """Read handle over a sorted triplet file; see module docstring."""

    def __init__(self, path: str | os.PathLike):
        self.path = os.fspath(path)
        with open(self.path, "rb") as fh:
            header = fh.read(_HEADER.size)
        if len(header) != _HEADER.size:
            raise StoreFormatError(f"{self.path}: truncated header")
        magic, version, flags, window, n, tokens, records = _HEADER.unpack(header)
        if magic != MAGIC:
            raise StoreFormatError(f"{self.path}: bad magic {magic!r}")
        if version != VERSION:
            raise StoreFormatError(f"{self.path}: unsupported version {version}")
        self.n = int(n)
        self.window = int(window)
        self.total_tokens = int(tokens)
        self.n_records = int(records)
        self.log1p_applied = bool(flags & FLAG_LOG1P)
        expected = _HEADER.size + self.n_records * RECORD_DTYPE.itemsize
        if os.path.getsize(self.path) != expected:
            raise StoreFormatError(f"{self.path}: size does not match record count")
        self._offsets = self._build_offsets()

    def _build_offsets(self) -> np.ndarray:
        # per-row record counts -> cumulative start offsets (n + 1 entries)
        counts = np.zeros(self.n + 1, dtype=np.int64)
        with open(self.path, "rb") as fh:
            fh.seek(_HEADER.size)
            remaining = self.n_records
            while remaining:
                chunk = min(remaining, 1 << 20)
                recs = np.fromfile(fh, dtype=RECORD_DTYPE, count=chunk)
                if recs.size != chunk:
                    raise StoreFormatError(f"{self.path}: truncated records")
                counts[1:] += np.bincount(recs["row"], minlength=self.n)
                remaining -= chunk
        return np.cumsum(counts)

    def cursor(self) -> "RowCursor":
        """Independent sequential reader; many may be open concurrently."""
        return RowCursor(self)

    def fetch_row(self, i: int, cursor: "RowCursor") -> SparseRow:
        """Monotone cursor fetch; rows must be requested in non-decreasing order."""
        return cursor.fetch(i)

    def row(self, i: int) -> SparseRow:
        """Random access by row id (separate entry point from the cursor path)."""
        if not 0 <= i < self.n:
            raise IndexError(f"row {i} out of range")
        start, end = int(self._offsets[i]), int(self._offsets[i + 1])
        with open(self.path, "rb") as fh:
            fh.seek(_HEADER.size + start * RECORD_DTYPE.itemsize)
            recs = np.fromfile(fh, dtype=RECORD_DTYPE, count=end - start)
        return SparseRow(row_id=i, cols=recs["col"].astype(np.int64),
                         weights=recs["weight"].astype(float))

    def iter_rows(self) -> Iterator[SparseRow]:
        cur = self.cursor()
        for i in range(self.n):
            yield cur.fetch(i)

    def iter_records(self, chunk: int = 1 << 20) -> Iterator[np.ndarray]:
        with open(self.path, "rb") as fh:
            fh.seek(_HEADER.size)
            remaining = self.n_records
            while remaining:
                take = min(remaining, chunk)
                yield np.fromfile(fh, dtype=RECORD_DTYPE, count=take)
                remaining -= take

    @staticmethod
    def write(path: str | os.PathLike, n: int, window: int, total_tokens: int,
              records: Iterable[np.ndarray], n_records: int,
              log1p_applied: bool = False) -> "CooccurrenceStore":
        """Write a store from an iterable of sorted record-array chunks."""
        flags = FLAG_LOG1P if log1p_applied else 0
        written = 0
        last_key = (-1, -1)
        with open(path, "wb") as fh:
            fh.write(_HEADER.pack(MAGIC, VERSION, flags, window, n,
                                  total_tokens, n_records))
            for chunk in records:
                chunk = np.asarray(chunk, dtype=RECORD_DTYPE)
                if chunk.size == 0:
                    continue
                first = (int(chunk["row"][0]), int(chunk["col"][0]))
                if first <= last_key:
                    raise StoreFormatError("records not strictly sorted by (row, col)")
                keys = chunk["row"].astype(np.int64) * (1 << 32) + chunk["col"]
                if np.any(np.diff(keys) <= 0):
                    raise StoreFormatError("records not strictly sorted by (row, col)")
                if np.any(chunk["weight"] <= 0.0):
                    raise StoreFormatError("weights must be positive")
                if np.any(chunk["row"] >= n) or np.any(chunk["col"] >= n):
                    raise StoreFormatError("record index out of range")
                chunk.tofile(fh)
                written += chunk.size
                last_key = (int(chunk["row"][-1]), int(chunk["col"][-1]))
        if written != n_records:
            raise StoreFormatError(f"wrote {written} records, expected {n_records}")
        return CooccurrenceStore(path)


class RowCursor:
    """Forward-only reader over the record file, one contiguous row range at
    a time.  A full sweep touches each physical record exactly once."""

    def __init__(self, store: CooccurrenceStore):
        self.store = store
        self._fh = open(store.path, "rb")
        self._fh.seek(_HEADER.size)
        self._next_row = 0
        self._pos = 0  # record index of the read head
        self.records_read = 0

    def fetch(self, i: int) -> SparseRow:
        if not 0 <= i < self.store.n:
            raise IndexError(f"row {i} out of range")
        if i < self._next_row:
            raise StaleCursorError(
                f"cursor already consumed row {i}; rows must be fetched in "
                f"non-decreasing order (next available: {self._next_row})")
        start = int(self.store._offsets[i])
        end = int(self.store._offsets[i + 1])
        if start != self._pos:
            self._fh.seek(_HEADER.size + start * RECORD_DTYPE.itemsize)
        recs = np.fromfile(self._fh, dtype=RECORD_DTYPE, count=end - start)
        self._pos = end
        self._next_row = i + 1
        self.records_read += recs.size
        return SparseRow(row_id=i, cols=recs["col"].astype(np.int64),
                         weights=recs["weight"].astype(float))

    def close(self) -> None:
        self._fh.close()

    def __enter__(self) -> "RowCursor":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


# ---------------------------------------------------------------------------
# counting


def _flush_shard(acc: dict, tmp_dir: str) -> str:
    fd, path = tempfile.mkstemp(suffix=".shard", dir=tmp_dir)
    arr = np.empty(len(acc), dtype=RECORD_DTYPE)
    keys = sorted(acc.keys())
    for k, (r, c) in enumerate(keys):
        arr[k] = (r, c, acc[(r, c)])
    with os.fdopen(fd, "wb") as fh:
        arr.tofile(fh)
    return path


def _iter_shard(path: str) -> Iterator[tuple[int, int, float]]:
    with open(path, "rb") as fh:
        while True:
            recs = np.fromfile(fh, dtype=RECORD_DTYPE, count=1 << 16)
            if recs.size == 0:
                return
            for r in recs:
                yield int(r["row"]), int(r["col"]), float(r["weight"])


def _merge_shards(paths: list[str]) -> Iterator[tuple[int, int, float]]:
    # heapq.merge is stable, so partial sums combine in shard-creation order
    merged = heapq.merge(*[_iter_shard(p) for p in paths],
                         key=lambda t: (t[0], t[1]))
    current: tuple[int, int] | None = None
    weight = 0.0
    for r, c, w in merged:
        if (r, c) == current:
            weight += w
        else:
            if current is not None:
                yield current[0], current[1], weight
            current = (r, c)
            weight = w
    if current is not None:
        yield current[0], current[1], weight


def count_cooccurrences(sentences: Iterable[Sequence[str]], vocab: Vocabulary,
                        window: int, out_path: str | os.PathLike,
                        max_pending: int = 4_000_000,
                        tmp_dir: str | None = None) -> CooccurrenceStore:
    """Count distance-weighted co-occurrences into a sorted store file.

    The accumulator is flushed to sorted shard files whenever it exceeds
    ``max_pending`` distinct pairs, and the shards are merged with an
    external k-way merge, so corpora whose triplet sets exceed memory
    still count in bounded space.
    """
    if window < 1:
        raise ValueError("window must be >= 1")
    acc: dict[tuple[int, int], float] = {}
    shards: list[str] = []
    total_tokens = 0
    own_tmp = None
    if tmp_dir is None:
        own_tmp = tempfile.TemporaryDirectory(prefix="cooc-shards-")
        tmp_dir = own_tmp.name
    try:
        for sent in sentences:
            ids = [vocab.token_to_id.get(tok, -1) for tok in sent]
            total_tokens += len(ids)
            L = len(ids)
            for s in range(L):
                a = ids[s]
                if a < 0:
                    continue
                hi = min(L, s + window + 1)
                for t in range(s + 1, hi):
                    b = ids[t]
                    if b < 0:
                        continue
                    w = 1.0 / (t - s)
                    key = (a, b) if a <= b else (b, a)
                    # one update covers both ordered position pairs (s,t),(t,s)
                    if a == b:
                        acc[key] = acc.get(key, 0.0) + 2.0 * w
                    else:
                        acc[key] = acc.get(key, 0.0) + w
            if len(acc) > max_pending:
                shards.append(_flush_shard(acc, tmp_dir))
                acc.clear()

        if shards:
            if acc:
                shards.append(_flush_shard(acc, tmp_dir))
                acc.clear()
            upper = _merge_shards(shards)
            pairs = list(upper)
        else:
            pairs = [(r, c, w) for (r, c), w in sorted(acc.items())]

        # mirror the upper triangle so the store holds both (i,j) and (j,i)
        full = np.empty(sum(1 if r == c else 2 for r, c, _ in pairs),
                        dtype=RECORD_DTYPE)
        k = 0
        for r, c, w in pairs:
            full[k] = (r, c, w)
            k += 1
            if r != c:
                full[k] = (c, r, w)
                k += 1
        order = np.lexsort((full["col"], full["row"]))
        full = full[order]
        return CooccurrenceStore.write(out_path, n=len(vocab), window=window,
                                       total_tokens=total_tokens,
                                       records=[full], n_records=full.size)
    finally:
        for p in shards:
            if os.path.exists(p):
                os.unlink(p)
        if own_tmp is not None:
            own_tmp.cleanup()


def apply_log1p(store: CooccurrenceStore, out_path: str | os.PathLike) -> CooccurrenceStore:
    """Write a copy of the store with every weight x replaced by ln(x + 1).

    Zeros stay implicit (ln(0 + 1) = 0) so the triplet set is unchanged.
    A second application is rejected through the header flag.
    """
    if store.log1p_applied:
        raise StoreFormatError("store already carries the log1p transform")

    def transformed():
        for recs in store.iter_records():
            out = recs.copy()
            out["weight"] = np.log1p(out["weight"])
            yield out

    return CooccurrenceStore.write(out_path, n=store.n, window=store.window,
                                   total_tokens=store.total_tokens,
                                   records=transformed(),
                                   n_records=store.n_records,
                                   log1p_applied=True)


def check_symmetry(store: CooccurrenceStore) -> None:
    """Verify X[i, j] == X[j, i] exactly; raises StoreFormatError otherwise."""
    rows, cols, weights = [], [], []
    for recs in store.iter_records():
        rows.append(recs["row"].astype(np.int64))
        cols.append(recs["col"].astype(np.int64))
        weights.append(recs["weight"])
    r = np.concatenate(rows) if rows else np.empty(0, dtype=np.int64)
    c = np.concatenate(cols) if cols else np.empty(0, dtype=np.int64)
    w = np.concatenate(weights) if weights else np.empty(0)
    key = r * store.n + c
    tkey = c * store.n + r
    order = np.argsort(key, kind="stable")
    torder = np.argsort(tkey, kind="stable")
    if not (np.array_equal(key[order], tkey[torder])
            and np.array_equal(w[order], w[torder])):
        raise StoreFormatError("store is not symmetric")


# ---------------------------------------------------------------------------
# row statistics


@dataclass
class RowStats:
    """Per-row moments over all n cells, implicit zeros included.

    Variance uses denominator n.  Skewness is the standardized third
    moment, NaN for constant rows; it feeds the diagnostic histogram only.
    """

    mean: np.ndarray
    variance: np.ndarray
    n_positive: np.ndarray
    skewness: np.ndarray

    def __len__(self) -> int:
        return len(self.mean)


def compute_row_stats(store: CooccurrenceStore) -> RowStats:
    """Stream the store once and compute RowStats for every row."""
    n = store.n
    s1 = np.zeros(n)
    s2 = np.zeros(n)
    s3 = np.zeros(n)
    npos = np.zeros(n, dtype=np.int64)
    cur = store.cursor()
    for i in range(n):
        row = cur.fetch(i)
        w = row.weights
        s1[i] = w.sum()
        s2[i] = (w * w).sum()
        s3[i] = (w * w * w).sum()
        npos[i] = w.size
    cur.close()
    mean = s1 / n
    variance = s2 / n - mean * mean
    variance = np.maximum(variance, 0.0)
    m3 = s3 / n - 3.0 * mean * s2 / n + 2.0 * mean ** 3
    with np.errstate(divide="ignore", invalid="ignore"):
        skew = np.where(variance > 0.0, m3 / np.power(variance, 1.5), np.nan)
    return RowStats(mean=mean, variance=variance, n_positive=npos, skewness=skew)
