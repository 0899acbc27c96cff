"""Alternating training loop with out-of-core row access.

One outer iteration sweeps all indices, running ``n_epoch`` inner updates
per parameter block against the freshest opposite-side values, then
recomputes the score norms and overall loss at one consistent parameter
snapshot and tests the relative-change convergence criterion.  Rows are
fed through a producer thread and a capacity-1 hand-off queue so the next
row is fetched while the current one is being processed; the update order
is strictly sequential regardless of pipeline timing, so results are
deterministic for a fixed seed and configuration.
"""

from __future__ import annotations

import math
import os
import queue
import struct
import threading
import time
from dataclasses import dataclass, field

import numpy as np

from .model import (BlockEvaluator, DispersionAssignment, EmbeddingParams,
                    EvalCounters, SparseRow, _extended)
from .optimizer import (AdamState, ConvergenceConfig, FisherConfig,  # noqa: F401
                        PlateauScheduler, adam_step, fisher_step,
                        relative_loss_change)

HISTORY_CSV_HEADER = "iter,loss,u_beta_norm,u_betatilde_norm,rel_change,ridge_events,clamp_events,seconds"

OPTIMIZERS = ("fisher", "fisher_lr", "adam")

CKPT_MAGIC = b"TWVECKP1"
_CKPT_HEADER = struct.Struct("<8sHHQQQddQd")
CKPT_VERSION = 1


class TrainingDivergedError(RuntimeError):
    """Non-finite values appeared while updating the identified block."""


class PrefetchError(RuntimeError):
    """Producer-side failure surfaced at the consumer."""


@dataclass
class TrainConfig:
    n_epoch: int = 10
    num_chunks: int = 1
    optimizer: str = "fisher_lr"
    convergence: ConvergenceConfig = field(default_factory=ConvergenceConfig)
    symmetric: bool = True
    seed: int = 0
    init_range: float = 0.5
    # optimizer hyperparameters carried along for the chosen update rule
    lr: float = 0.5
    ridge: float = 1e-8
    adam_step_size: float = 1e-3
    adam_plateau: bool = True

    def __post_init__(self) -> None:
        if self.n_epoch < 1:
            raise ValueError("n_epoch must be >= 1")
        if self.num_chunks < 1:
            raise ValueError("num_chunks must be >= 1")
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"optimizer must be one of {OPTIMIZERS}")

    def fisher_config(self) -> FisherConfig:
        return FisherConfig(lr=self.lr, adjust=self.optimizer == "fisher_lr",
                            ridge=self.ridge)


@dataclass
class IterationRecord:
    iteration: int
    loss: float
    u_beta_norm: float
    u_betatilde_norm: float
    rel_change: float
    ridge_events: int
    clamp_events: int
    seconds: float

    def csv_line(self) -> str:
        return (f"{self.iteration},{self.loss!r},{self.u_beta_norm!r},"
                f"{self.u_betatilde_norm!r},{self.rel_change!r},"
                f"{self.ridge_events},{self.clamp_events},{self.seconds!r}")


@dataclass
class TrainingHistory:
    records: list[IterationRecord] = field(default_factory=list)
    converged: bool = False
    # per-epoch block losses for the first row of the first iteration
    first_row_epoch_losses: dict[str, list[float]] = field(default_factory=dict)

    @property
    def final_loss(self) -> float:
        return self.records[-1].loss

    def save(self, path: str | os.PathLike) -> None:
        with open(path, "w") as fh:
            fh.write(HISTORY_CSV_HEADER + "\n")
            for rec in self.records:
                fh.write(rec.csv_line() + "\n")


def init_params(n: int, d: int, seed: int, init_range: float = 0.5) -> EmbeddingParams:
    """i.i.d. Uniform(-init_range, init_range) parameters from a seeded generator."""
    if n < 1 or d < 1:
        raise ValueError("n and d must be >= 1")
    rng = np.random.default_rng(seed)
    return EmbeddingParams(
        W=rng.uniform(-init_range, init_range, size=(n, d)),
        b=rng.uniform(-init_range, init_range, size=n),
        Wt=rng.uniform(-init_range, init_range, size=(n, d)),
        bt=rng.uniform(-init_range, init_range, size=n),
    )


# ---------------------------------------------------------------------------
# prefetch pipeline


class RowPrefetcher:
    """Producer thread fetching rows ahead of a single consumer.

    The hand-off buffer holds at most one row: the producer blocks until
    the consumer has taken the previous one, so data retrieval only
    proceeds when the buffer is empty.  Rows are delivered strictly in
    the requested order; a producer failure is re-raised at the consumer
    as :class:`PrefetchError` naming the failing row.
    """

    capacity = 1

    def __init__(self, store, row_ids=None):
        self.store = store
        self.row_ids = list(range(store.n)) if row_ids is None else list(row_ids)
        self.max_buffered = 0
        self._queue: queue.Queue = queue.Queue(maxsize=self.capacity)
        self._stop = threading.Event()
        self._thread = threading.Thread(target=self._produce, daemon=True)
        self._thread.start()

    def _offer(self, item) -> bool:
        while not self._stop.is_set():
            try:
                self._queue.put(item, timeout=0.05)
            except queue.Full:
                continue
            self.max_buffered = max(self.max_buffered, self._queue.qsize())
            return True
        return False

    def _produce(self) -> None:
        cursor = self.store.cursor()
        try:
            for i in self.row_ids:
                try:
                    row = cursor.fetch(i)
                except Exception as exc:  # surfaced at the consumer
                    self._offer(("error", i, exc))
                    return
                if not self._offer(("row", i, row)):
                    return
            self._offer(("done", -1, None))
        finally:
            close = getattr(cursor, "close", None)
            if close is not None:
                close()

    def __iter__(self):
        try:
            while True:
                kind, i, payload = self._queue.get()
                if kind == "done":
                    return
                if kind == "error":
                    raise PrefetchError(f"failed to fetch row {i}") from payload
                yield payload
        finally:
            self._stop.set()

    def join(self, timeout: float = 5.0) -> None:
        self._thread.join(timeout)


def prefetch_rows(store, row_ids=None) -> RowPrefetcher:
    """Stream rows of ``store`` through the producer/consumer pipeline."""
    return RowPrefetcher(store, row_ids)


# ---------------------------------------------------------------------------
# block updates


def _check_finite(arrs, side: str, idx: int) -> None:
    for a in arrs:
        # a finite-entry overflowing sum is impossible at these magnitudes,
        # so a non-finite sum pins down non-finite entries in one pass
        if a is not None and not math.isfinite(float(a.sum())):
            raise TrainingDivergedError(
                f"non-finite values while updating {side} block {idx}")


def _update_half(side: str, idx: int, params: EmbeddingParams,
                 disp: DispersionAssignment, data: SparseRow, cfg: TrainConfig,
                 t: int, adam_state: AdamState | None,
                 counters: EvalCounters | None, freeze_bias: bool,
                 exts: tuple[np.ndarray, np.ndarray] | None = None):
    """n_epoch optimizer steps for one parameter block; returns the
    per-epoch losses (evaluated at each epoch's start) and the Adam state.

    ``exts`` optionally holds trainer-maintained extended matrices
    ([W | 1], [Wt | 1]); the updated block is written back to both the
    params and the extended copy.
    """
    d = params.d
    if side == "row":
        beta = np.append(params.W[idx], params.b[idx])
        other_ext = exts[1] if exts is not None else None
    else:
        beta = np.append(params.Wt[idx], params.bt[idx])
        other_ext = exts[0] if exts is not None else None
    is_adam = cfg.optimizer == "adam"
    ev = BlockEvaluator(params, disp, data, side=side, num_chunks=cfg.num_chunks,
                        counters=counters, unit_phi=is_adam, other_ext=other_ext)
    sl = slice(0, d) if freeze_bias else slice(0, d + 1)
    fcfg = None if is_adam else cfg.fisher_config()
    losses = []
    for _ in range(cfg.n_epoch):
        U, I, loss = ev.evaluate(beta, need_info=not is_adam)
        _check_finite((U, I), side, idx)
        if not math.isfinite(loss):
            raise TrainingDivergedError(f"non-finite loss at {side} block {idx}")
        losses.append(loss)
        if is_adam:
            grad = -U
            if freeze_bias:
                grad[d] = 0.0  # zero moments keep the bias pinned exactly
            beta, adam_state = adam_step(beta, grad, adam_state)
        else:
            beta[sl] = fisher_step(beta[sl], U[sl], I[sl, sl], t, fcfg,
                                   block_label=f"{side} {idx}", counters=counters)
        _check_finite((beta,), side, idx)
    if side == "row":
        params.W[idx] = beta[:d]
        params.b[idx] = beta[d]
        if exts is not None:
            exts[0][idx, :d] = beta[:d]
    else:
        params.Wt[idx] = beta[:d]
        params.bt[idx] = beta[d]
        if exts is not None:
            exts[1][idx, :d] = beta[:d]
    return losses, adam_state


@dataclass
class BlockDiagnostics:
    row_epoch_losses: list[float]
    col_epoch_losses: list[float]


def update_row_block(i: int, params: EmbeddingParams, disp: DispersionAssignment,
                     row: SparseRow, cfg: TrainConfig, t: int = 1,
                     adam_row: AdamState | None = None,
                     adam_col: AdamState | None = None,
                     counters: EvalCounters | None = None,
                     freeze_bias: bool = False,
                     exts: tuple[np.ndarray, np.ndarray] | None = None):
    """Run the inner epoch loops for beta_i (and betat_i in symmetric mode).

    The fetched row doubles as column i's data in symmetric mode, so each
    row of the store is loaded once per sweep.  Returns the diagnostics
    and the (possibly updated) Adam states.
    """
    row_losses, adam_row = _update_half("row", i, params, disp, row, cfg, t,
                                        adam_row, counters, freeze_bias, exts)
    col_losses: list[float] = []
    if cfg.symmetric:
        col_losses, adam_col = _update_half("col", i, params, disp, row, cfg, t,
                                            adam_col, counters, freeze_bias, exts)
    return BlockDiagnostics(row_losses, col_losses), adam_row, adam_col


# ---------------------------------------------------------------------------
# checkpoints


@dataclass
class Checkpoint:
    params: EmbeddingParams
    iteration: int
    prev_loss: float
    optimizer: str
    adam_row: list[AdamState] | None = None
    adam_col: list[AdamState] | None = None
    adam_step_size: float = math.nan
    plateau_best: float = math.inf
    plateau_bad: int = 0


def save_checkpoint(path: str | os.PathLike, ckpt: Checkpoint) -> None:
    """Binary checkpoint: versioned header then row-major float64 blocks."""
    p = ckpt.params
    opt_kind = OPTIMIZERS.index(ckpt.optimizer)
    tmp = os.fspath(path) + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(_CKPT_HEADER.pack(CKPT_MAGIC, CKPT_VERSION, opt_kind,
                                   p.n, p.d, ckpt.iteration, ckpt.prev_loss,
                                   ckpt.adam_step_size, ckpt.plateau_bad,
                                   ckpt.plateau_best))
        for arr in (p.W, p.b, p.Wt, p.bt):
            np.ascontiguousarray(arr, dtype="<f8").tofile(fh)
        if ckpt.optimizer == "adam":
            for states in (ckpt.adam_row, ckpt.adam_col):
                np.ascontiguousarray([s.m for s in states], dtype="<f8").tofile(fh)
                np.ascontiguousarray([s.v for s in states], dtype="<f8").tofile(fh)
                np.asarray([s.t for s in states], dtype="<u8").tofile(fh)
    os.replace(tmp, path)


def load_checkpoint(path: str | os.PathLike) -> Checkpoint:
    with open(path, "rb") as fh:
        header = fh.read(_CKPT_HEADER.size)
        if len(header) != _CKPT_HEADER.size:
            raise ValueError(f"{path}: truncated checkpoint header")
        magic, version, opt_kind, n, d, iteration, prev_loss, step, bad, best = \
            _CKPT_HEADER.unpack(header)
        if magic != CKPT_MAGIC:
            raise ValueError(f"{path}: not a checkpoint file")
        if version != CKPT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        n, d = int(n), int(d)

        def block(shape):
            count = int(np.prod(shape))
            arr = np.fromfile(fh, dtype="<f8", count=count)
            if arr.size != count:
                raise ValueError(f"{path}: truncated checkpoint data")
            return arr.reshape(shape)

        params = EmbeddingParams(W=block((n, d)), b=block((n,)),
                                 Wt=block((n, d)), bt=block((n,)))
        optimizer = OPTIMIZERS[opt_kind]
        adam_row = adam_col = None
        if optimizer == "adam":
            sides = []
            for _ in range(2):
                m = block((n, d + 1))
                v = block((n, d + 1))
                ts = np.fromfile(fh, dtype="<u8", count=n)
                sides.append([AdamState(m=m[i].copy(), v=v[i].copy(), t=int(ts[i]),
                                        step_size=step) for i in range(n)])
            adam_row, adam_col = sides
    return Checkpoint(params=params, iteration=int(iteration),
                      prev_loss=float(prev_loss), optimizer=optimizer,
                      adam_row=adam_row, adam_col=adam_col,
                      adam_step_size=float(step), plateau_best=float(best),
                      plateau_bad=int(bad))


# ---------------------------------------------------------------------------
# the outer loop


def _sweep_norms_and_loss(store, params, disp, cfg, counters, exts=None):
    """Score norms and overall loss at one frozen parameter snapshot."""
    sq_row = 0.0
    sq_col = 0.0
    loss = 0.0
    w_ext = exts[0] if exts is not None else None
    wt_ext = exts[1] if exts is not None else None
    for row in prefetch_rows(store):
        i = row.row_id
        ev_row = BlockEvaluator(params, disp, row, side="row",
                                num_chunks=cfg.num_chunks, counters=counters,
                                other_ext=wt_ext)
        U, _, row_loss = ev_row.evaluate(
            np.append(params.W[i], params.b[i]), need_info=False)
        ev_col = BlockEvaluator(params, disp, row, side="col",
                                num_chunks=cfg.num_chunks, counters=counters,
                                other_ext=w_ext)
        Ut, _, _ = ev_col.evaluate(
            np.append(params.Wt[i], params.bt[i]), need_info=False)
        sq_row += float(U @ U)
        sq_col += float(Ut @ Ut)
        loss += row_loss
    if not math.isfinite(loss):
        raise TrainingDivergedError("overall loss is non-finite")
    return math.sqrt(sq_row), math.sqrt(sq_col), loss


def train(store, params: EmbeddingParams, disp: DispersionAssignment,
          cfg: TrainConfig, *, history_path: str | os.PathLike | None = None,
          checkpoint_path: str | os.PathLike | None = None,
          resume: Checkpoint | None = None, freeze_bias: bool = False,
          progress=None, timer=time.perf_counter):
    """Alternate block updates over all indices until the relative loss
    change falls below epsilon or maxit iterations complete.

    ``params`` is updated in place and returned together with the history.
    When ``history_path`` is given the history file is flushed after every
    iteration, and ``checkpoint_path`` receives a restartable snapshot at
    the same cadence; pass a loaded checkpoint as ``resume`` to continue a
    run.  ``timer`` exists so tests can substitute a deterministic clock.
    """
    if store.n != params.n:
        raise ValueError(f"store has {store.n} rows but params have {params.n}")
    disp.validate()
    params.validate()
    conv = cfg.convergence
    counters = EvalCounters()
    history = TrainingHistory()

    adam_row = adam_col = None
    step_size = cfg.adam_step_size
    plateau = PlateauScheduler()
    if resume is not None:
        if resume.optimizer != cfg.optimizer:
            raise ValueError("checkpoint optimizer does not match the configuration")
        params.W[:] = resume.params.W
        params.b[:] = resume.params.b
        params.Wt[:] = resume.params.Wt
        params.bt[:] = resume.params.bt
        prev_loss = resume.prev_loss
        start_t = resume.iteration + 1
        adam_row, adam_col = resume.adam_row, resume.adam_col
        if cfg.optimizer == "adam":
            step_size = resume.adam_step_size
            plateau = PlateauScheduler(best=resume.plateau_best,
                                       bad_count=resume.plateau_bad)
    else:
        prev_loss = 1e20
        start_t = 1
    if cfg.optimizer == "adam" and adam_row is None:
        adam_row = [AdamState.zeros(params.d + 1, step_size) for _ in range(params.n)]
        adam_col = [AdamState.zeros(params.d + 1, step_size) for _ in range(params.n)]

    history_fh = None
    if history_path is not None:
        history_fh = open(history_path, "w")
        history_fh.write(HISTORY_CSV_HEADER + "\n")
        history_fh.flush()

    # extended [vectors | 1] matrices, kept in sync with params by the
    # block write-backs so evaluations never re-copy the opposite side
    exts = (_extended(params.W), _extended(params.Wt))

    try:
        t = start_t
        while True:
            counters.reset()
            tic = timer()
            if cfg.symmetric:
                for row in prefetch_rows(store):
                    i = row.row_id
                    diag, ar, ac = update_row_block(
                        i, params, disp, row, cfg, t,
                        adam_row[i] if adam_row else None,
                        adam_col[i] if adam_col else None,
                        counters, freeze_bias, exts)
                    if adam_row is not None:
                        adam_row[i], adam_col[i] = ar, ac
                    if t == 1 and i == 0:
                        history.first_row_epoch_losses = {
                            "row": diag.row_epoch_losses,
                            "col": diag.col_epoch_losses}
            else:
                # full row sweep before any column update; columns are
                # re-fetched (rows of the transpose; the store is symmetric)
                for row in prefetch_rows(store):
                    i = row.row_id
                    losses, ar = _update_half("row", i, params, disp, row, cfg, t,
                                              adam_row[i] if adam_row else None,
                                              counters, freeze_bias, exts)
                    if adam_row is not None:
                        adam_row[i] = ar
                    if t == 1 and i == 0:
                        history.first_row_epoch_losses["row"] = losses
                for col in prefetch_rows(store):
                    j = col.row_id
                    losses, ac = _update_half("col", j, params, disp, col, cfg, t,
                                              adam_col[j] if adam_col else None,
                                              counters, freeze_bias, exts)
                    if adam_col is not None:
                        adam_col[j] = ac
                    if t == 1 and j == 0:
                        history.first_row_epoch_losses["col"] = losses

            u_norm, ut_norm, loss = _sweep_norms_and_loss(store, params, disp,
                                                          cfg, counters, exts)
            rel = relative_loss_change(prev_loss, loss)
            record = IterationRecord(iteration=t, loss=loss, u_beta_norm=u_norm,
                                     u_betatilde_norm=ut_norm, rel_change=rel,
                                     ridge_events=counters.ridge_events,
                                     clamp_events=counters.clamp_events,
                                     seconds=timer() - tic)
            history.records.append(record)
            if history_fh is not None:
                history_fh.write(record.csv_line() + "\n")
                history_fh.flush()
            if checkpoint_path is not None:
                save_checkpoint(checkpoint_path, Checkpoint(
                    params=params, iteration=t, prev_loss=loss,
                    optimizer=cfg.optimizer, adam_row=adam_row, adam_col=adam_col,
                    adam_step_size=step_size, plateau_best=plateau.best,
                    plateau_bad=plateau.bad_count))
            if progress is not None:
                progress(record)

            if cfg.optimizer == "adam" and cfg.adam_plateau:
                new_step = plateau.step(loss, step_size)
                if new_step != step_size:
                    step_size = new_step
                    for st in adam_row:
                        st.step_size = step_size
                    for st in adam_col:
                        st.step_size = step_size

            if rel < conv.epsilon:
                history.converged = True
                break
            if t >= conv.maxit:
                break
            prev_loss = loss
            t += 1
    finally:
        if history_fh is not None:
            history_fh.close()
    return params, history
