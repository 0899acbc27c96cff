"""Synthetic data generation and the optimizer comparison harness.

Ground truth uses unit-norm vectors with no bias terms: mu_ij =
exp(w_i . w_j), power components drawn Uniform(0.5, 1) per index so every
composed p_ij lands in (1, 2), and per-index dispersion components drawn
from a small palette.  Each unordered pair receives one compound
Poisson-Gamma draw, stored symmetrically.
"""

from __future__ import annotations

import math
import os
import time
from dataclasses import dataclass

import numpy as np

from .cooccur import RECORD_DTYPE, CooccurrenceStore
from .model import DispersionAssignment, EmbeddingParams, EvalCounters
from .optimizer import ConvergenceConfig
from .trainer import (TrainConfig, TrainingHistory, _sweep_norms_and_loss,
                      init_params, train)
from .tweedie import sample_cpg_many

# Default per-index dispersion components, exp(delta/2) for a palette of
# moment-fit intercepts spanning the range seen on small news corpora.
DEFAULT_PHI_COMPONENTS = tuple(
    math.exp(0.5 * delta)
    for delta in (-1.009, -0.202, -0.127, 0.077, 0.776, -1.133)
)

TRAJECTORY_CSV_HEADER = "arm,iter,loss,u_beta_norm,u_betatilde_norm"
EPOCH_CSV_HEADER = "arm,row,epoch,loss"


@dataclass
class SimSpec:
    n: int
    d: int
    seed: int = 0
    vector_source: str = "random-unit"  # or "file"
    vectors_path: str | None = None
    phi_values: tuple[float, ...] = DEFAULT_PHI_COMPONENTS
    symmetric: bool = True

    def __post_init__(self) -> None:
        if self.n < 1 or self.d < 1:
            raise ValueError("n and d must be >= 1")
        if self.vector_source not in ("random-unit", "file"):
            raise ValueError("vector_source must be 'random-unit' or 'file'")
        if self.vector_source == "file" and not self.vectors_path:
            raise ValueError("vector_source 'file' needs vectors_path")
        if not self.symmetric:
            raise ValueError("only symmetric generation is supported")
        if not self.phi_values or any(v <= 0.0 for v in self.phi_values):
            raise ValueError("phi_values must be positive")


def _load_unit_vectors(path: str, n: int, d: int) -> np.ndarray:
    rows = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            parts = line.split()
            if not parts:
                continue
            try:
                float(parts[0])
            except ValueError:
                parts = parts[1:]  # leading token label
            rows.append([float(v) for v in parts])
            if len(rows) == n:
                break
    if len(rows) < n:
        raise ValueError(f"{path}: needs at least {n} vector rows")
    mat = np.asarray(rows, dtype=float)
    if mat.shape[1] != d:
        raise ValueError(f"{path}: vectors have dimension {mat.shape[1]}, expected {d}")
    norms = np.linalg.norm(mat, axis=1)
    if np.any(norms == 0.0):
        raise ValueError(f"{path}: zero-norm vector row")
    return mat / norms[:, None]


def generate(spec: SimSpec, store_path: str | os.PathLike):
    """Draw one synthetic symmetric count matrix.

    Returns (store, ground-truth EmbeddingParams with zero biases,
    DispersionAssignment of the generating components).  A fixed seed
    reproduces the store file byte for byte.
    """
    rng = np.random.default_rng(spec.seed)
    if spec.vector_source == "file":
        W = _load_unit_vectors(spec.vectors_path, spec.n, spec.d)
    else:
        g = rng.standard_normal((spec.n, spec.d))
        W = g / np.linalg.norm(g, axis=1)[:, None]
    p_comp = rng.uniform(0.5, 1.0, size=spec.n)
    phi_comp = rng.choice(np.asarray(spec.phi_values, dtype=float), size=spec.n)

    rows, cols, vals = [], [], []
    for i in range(spec.n):
        js = np.arange(i, spec.n)
        mu = np.exp(W[js] @ W[i])
        p = p_comp[i] + p_comp[js]
        phi = phi_comp[i] * phi_comp[js]
        y = sample_cpg_many(mu, phi, p, rng)
        nz = np.nonzero(y)[0]
        if nz.size == 0:
            continue
        jn = js[nz]
        yn = y[nz]
        rows.append(np.full(jn.size, i, dtype=np.int64))
        cols.append(jn)
        vals.append(yn)
        off = jn != i
        rows.append(jn[off])
        cols.append(np.full(int(off.sum()), i, dtype=np.int64))
        vals.append(yn[off])
    r = np.concatenate(rows) if rows else np.empty(0, dtype=np.int64)
    c = np.concatenate(cols) if cols else np.empty(0, dtype=np.int64)
    v = np.concatenate(vals) if vals else np.empty(0)
    order = np.lexsort((c, r))
    recs = np.empty(r.size, dtype=RECORD_DTYPE)
    recs["row"] = r[order]
    recs["col"] = c[order]
    recs["weight"] = v[order]
    store = CooccurrenceStore.write(store_path, n=spec.n, window=0,
                                    total_tokens=0, records=[recs],
                                    n_records=recs.size)
    truth = EmbeddingParams(W=W.copy(), b=np.zeros(spec.n),
                            Wt=W.copy(), bt=np.zeros(spec.n))
    disp = DispersionAssignment(p_row=p_comp.copy(), p_col=p_comp.copy(),
                                phi_row=phi_comp.copy(), phi_col=phi_comp.copy())
    return store, truth, disp


@dataclass
class ArmResult:
    name: str
    history: TrainingHistory | None = None
    error: Exception | None = None


def compare_optimizers(store, disp: DispersionAssignment, d: int, *,
                       seed: int = 0, arms=("fisher", "fisher_lr", "adam"),
                       convergence: ConvergenceConfig | None = None,
                       n_epoch: int = 10, num_chunks: int = 1, lr: float = 0.5,
                       adam_step_size: float = 1e-3, init_range: float = 0.5,
                       freeze_bias: bool = False,
                       out_dir: str | os.PathLike | None = None,
                       progress=None, timer=time.perf_counter) -> dict[str, ArmResult]:
    """Run each update rule from identical initial values on the same data.

    Vectors are initialized Uniform(-init_range, init_range); biases start
    at zero (the generator's truth has none) but stay free unless
    ``freeze_bias`` is set.  Per arm, a trajectory CSV (iteration 0 holds
    the shared initial loss and score norms) and a per-epoch CSV of the
    first row's first-iteration block losses are written to ``out_dir``.
    Trainer errors are captured per arm without aborting the others.
    """
    convergence = convergence or ConvergenceConfig()
    base = init_params(store.n, d, seed, init_range)
    base.b[:] = 0.0
    base.bt[:] = 0.0
    neutral_cfg = TrainConfig(optimizer="fisher", num_chunks=num_chunks)
    u0, ut0, loss0 = _sweep_norms_and_loss(store, base, disp, neutral_cfg,
                                           EvalCounters())

    results: dict[str, ArmResult] = {}
    for arm in arms:
        cfg = TrainConfig(n_epoch=n_epoch, num_chunks=num_chunks, optimizer=arm,
                          convergence=convergence, seed=seed,
                          init_range=init_range, lr=lr,
                          adam_step_size=adam_step_size)
        params = base.copy()
        result = ArmResult(name=arm)
        try:
            _, history = train(store, params, disp, cfg, freeze_bias=freeze_bias,
                               progress=progress, timer=timer)
            result.history = history
        except Exception as exc:
            result.error = exc
        results[arm] = result
        if out_dir is not None:
            os.makedirs(out_dir, exist_ok=True)
            traj = os.path.join(out_dir, f"trajectory_{arm}.csv")
            with open(traj, "w") as fh:
                fh.write(TRAJECTORY_CSV_HEADER + "\n")
                fh.write(f"{arm},0,{loss0!r},{u0!r},{ut0!r}\n")
                if result.history is not None:
                    for rec in result.history.records:
                        fh.write(f"{arm},{rec.iteration},{rec.loss!r},"
                                 f"{rec.u_beta_norm!r},{rec.u_betatilde_norm!r}\n")
            if result.history is not None and result.history.first_row_epoch_losses:
                epochs = os.path.join(out_dir, f"epochs_{arm}.csv")
                with open(epochs, "w") as fh:
                    fh.write(EPOCH_CSV_HEADER + "\n")
                    trace = result.history.first_row_epoch_losses.get("row", [])
                    for e, val in enumerate(trace, start=1):
                        fh.write(f"{arm},0,{e},{val!r}\n")
    return results
