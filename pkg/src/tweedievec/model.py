"""Alternating Tweedie regression surface over a sparse count matrix.

The mean model is log mu_ij = w_i . wt_j + b_i + bt_j with cell-level
power p_ij = p_row[i] + p_col[j] and dispersion phi_ij = phi_row[i] *
phi_col[j].  A row's score vector and information matrix sum over ALL n
columns: stored entries contribute the positive-part terms, everything
else contributes the zero-part terms.  The n x n zero cells are never
materialized; each evaluation streams the full column range of one row in
``num_chunks`` ordered partitions, with the stored entries folded into
dense per-column constants (see ``_Chunk``).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg.blas import dsyrk as _dsyrk

# exp(eta) is clamped at this point to avoid overflow; clamp events are
# counted and surfaced in training diagnostics rather than silently absorbed.
ETA_MAX = 30.0


@dataclass
class EvalCounters:
    """Mutable tally of numerical interventions during an iteration."""

    clamp_events: int = 0
    ridge_events: int = 0

    def reset(self) -> None:
        self.clamp_events = 0
        self.ridge_events = 0


@dataclass
class SparseRow:
    """Stored entries of one row: column indices (strictly increasing) and
    positive weights; all other cells of the row are implicit zeros."""

    row_id: int
    cols: np.ndarray
    weights: np.ndarray

    def __post_init__(self) -> None:
        self.cols = np.asarray(self.cols, dtype=np.int64)
        self.weights = np.asarray(self.weights, dtype=float)
        if self.cols.shape != self.weights.shape:
            raise ValueError("cols and weights must have matching length")
        if self.cols.size:
            if np.any(np.diff(self.cols) <= 0):
                raise ValueError("cols must be strictly increasing")
            if np.any(self.weights <= 0.0):
                raise ValueError("stored weights must be positive")

    @property
    def nnz(self) -> int:
        return int(self.cols.size)


@dataclass
class EmbeddingParams:
    """Row vectors/biases (W, b) and column vectors/biases (Wt, bt)."""

    W: np.ndarray
    b: np.ndarray
    Wt: np.ndarray
    bt: np.ndarray

    def __post_init__(self) -> None:
        self.W = np.ascontiguousarray(self.W, dtype=float)
        self.b = np.ascontiguousarray(self.b, dtype=float)
        self.Wt = np.ascontiguousarray(self.Wt, dtype=float)
        self.bt = np.ascontiguousarray(self.bt, dtype=float)
        if self.W.ndim != 2 or self.Wt.shape != self.W.shape:
            raise ValueError("W and Wt must be matrices of identical shape")
        n = self.W.shape[0]
        if self.b.shape != (n,) or self.bt.shape != (n,):
            raise ValueError("b and bt must be vectors of length n")

    @property
    def n(self) -> int:
        return self.W.shape[0]

    @property
    def d(self) -> int:
        return self.W.shape[1]

    def copy(self) -> "EmbeddingParams":
        return EmbeddingParams(self.W.copy(), self.b.copy(),
                               self.Wt.copy(), self.bt.copy())

    def validate(self) -> None:
        for name in ("W", "b", "Wt", "bt"):
            if not np.isfinite(getattr(self, name)).all():
                raise ValueError(f"non-finite entries in {name}")


@dataclass
class DispersionAssignment:
    """Per-index components composing p_ij = p_row[i] + p_col[j] and
    phi_ij = phi_row[i] * phi_col[j]."""

    p_row: np.ndarray
    p_col: np.ndarray
    phi_row: np.ndarray
    phi_col: np.ndarray

    def __post_init__(self) -> None:
        self.p_row = np.asarray(self.p_row, dtype=float)
        self.p_col = np.asarray(self.p_col, dtype=float)
        self.phi_row = np.asarray(self.phi_row, dtype=float)
        self.phi_col = np.asarray(self.phi_col, dtype=float)

    @classmethod
    def constant(cls, n: int, p: float = 1.5, phi: float = 1.0) -> "DispersionAssignment":
        """Uniform assignment: every cell gets power p and dispersion phi."""
        half_p = np.full(n, p / 2.0)
        half_phi = np.full(n, np.sqrt(phi))
        return cls(half_p.copy(), half_p.copy(), half_phi.copy(), half_phi.copy())

    def validate(self) -> None:
        if np.any(self.phi_row <= 0.0) or np.any(self.phi_col <= 0.0):
            raise ValueError("dispersion components must be positive")
        lo = self.p_row.min() + self.p_col.min()
        hi = self.p_row.max() + self.p_col.max()
        if not (1.0 < lo and hi < 2.0):
            raise ValueError(f"composed powers must lie in (1, 2); range [{lo}, {hi}]")


def linear_predictor(params: EmbeddingParams, i: int, j: int) -> float:
    """eta_ij = w_i . wt_j + b_i + bt_j."""
    return float(params.W[i] @ params.Wt[j] + params.b[i] + params.bt[j])


def _extended(mat: np.ndarray) -> np.ndarray:
    # [vectors | 1] so that the bias rides along as the last coefficient
    out = np.empty((mat.shape[0], mat.shape[1] + 1))
    out[:, :-1] = mat
    out[:, -1] = 1.0
    return out


class _Chunk:
    """One contiguous column range of the evaluation plan.

    The stored entries are folded into dense per-column constants so the
    positive- and zero-part terms share one branch-free formula: with
    y = 0 on the unstored cells,

        score coef  =  y/phi * mu**(1-p)  -  mu**(2-p)/phi
        info  coef  =  mu**(2-p)/phi * (1 at stored cells, (2-p) else)
        cell  loss  =  mu**(2-p)/(2-p)  -  y * mu**(1-p)/(1-p)

    reproduce both cases of the two-part likelihood exactly.  Scratch
    buffers are owned per chunk, so evaluations allocate almost nothing.
    """

    __slots__ = ("ext", "bias", "two_m_p", "one_m_p", "inv_two_m_p",
                 "inv_phi", "y_iphi", "w1mp", "blend",
                 "eta", "mu2p", "mu1p", "base", "coef", "B")

    def __init__(self, ctx: "_BlockContext", lo: int, hi: int,
                 sel: np.ndarray, y: np.ndarray):
        m = hi - lo
        dp1 = ctx.other_ext.shape[1]
        idx = (sel - lo).astype(np.intp)
        self.ext = ctx.other_ext[lo:hi]
        self.bias = ctx.other_bias[lo:hi]
        self.two_m_p = ctx.two_m_p[lo:hi]
        self.one_m_p = ctx.one_m_p[lo:hi]
        self.inv_two_m_p = ctx.inv_two_m_p[lo:hi]
        self.inv_phi = ctx.inv_phi[lo:hi]
        self.y_iphi = np.zeros(m)
        self.y_iphi[idx] = y * ctx.inv_phi[sel]
        self.w1mp = np.zeros(m)
        self.w1mp[idx] = y / ctx.one_m_p[sel]  # y / (1 - p) for the loss
        self.blend = self.two_m_p.copy()       # info coef multiplier
        self.blend[idx] = 1.0
        self.eta = np.empty(m)
        self.mu2p = np.empty(m)
        self.mu1p = np.empty(m)
        self.base = np.empty(m)
        self.coef = np.empty(m)
        self.B = np.empty((m, dp1))


class _BlockContext:
    """Frozen inputs for evaluating one parameter block against all columns.

    Everything that does not depend on beta is precomputed here, including
    the chunk plan: contiguous column ranges in index order with the
    stored-entry positions and their per-entry constants resolved.  The
    scratch buffers make evaluations allocation-light but not re-entrant;
    one context serves one consumer at a time.
    """

    def __init__(self, other_ext: np.ndarray, other_bias: np.ndarray,
                 p_vec: np.ndarray, inv_phi: np.ndarray, cols: np.ndarray,
                 weights: np.ndarray, num_chunks: int):
        if num_chunks < 1:
            raise ValueError("num_chunks must be >= 1")
        self.other_ext = other_ext
        self.other_bias = other_bias
        self.two_m_p = 2.0 - p_vec
        self.one_m_p = 1.0 - p_vec
        self.inv_two_m_p = 1.0 / self.two_m_p
        self.cols = cols
        self.weights = weights
        self.num_chunks = num_chunks
        self._set_inv_phi(inv_phi)

    def _set_inv_phi(self, inv_phi: np.ndarray) -> None:
        self.inv_phi = inv_phi
        self.zero_info = self.two_m_p * inv_phi  # zero-part info coef / mu**(2-p)
        n = self.other_ext.shape[0]
        edges = np.linspace(0, n, num=min(self.num_chunks, n) + 1, dtype=np.int64)
        self.chunks = []
        pos = 0
        for k in range(len(edges) - 1):
            lo, hi = int(edges[k]), int(edges[k + 1])
            end = pos + int(np.searchsorted(self.cols[pos:], hi, side="left"))
            self.chunks.append(_Chunk(self, lo, hi, self.cols[pos:end],
                                      self.weights[pos:end]))
            pos = end

    def replace_inv_phi(self, inv_phi: np.ndarray) -> None:
        """Swap the dispersion reciprocals (used for unit-phi gradients)."""
        self._set_inv_phi(inv_phi)


def _row_context(params: EmbeddingParams, disp: DispersionAssignment,
                 row: SparseRow, num_chunks: int = 1,
                 other_ext: np.ndarray | None = None) -> _BlockContext:
    i = row.row_id
    return _BlockContext(
        other_ext=_extended(params.Wt) if other_ext is None else other_ext,
        other_bias=params.bt,
        p_vec=disp.p_row[i] + disp.p_col,
        inv_phi=1.0 / (disp.phi_row[i] * disp.phi_col),
        cols=row.cols,
        weights=row.weights,
        num_chunks=num_chunks,
    )


def _col_context(params: EmbeddingParams, disp: DispersionAssignment,
                 col: SparseRow, num_chunks: int = 1,
                 other_ext: np.ndarray | None = None) -> _BlockContext:
    j = col.row_id
    return _BlockContext(
        other_ext=_extended(params.W) if other_ext is None else other_ext,
        other_bias=params.b,
        p_vec=disp.p_row + disp.p_col[j],
        inv_phi=1.0 / (disp.phi_row * disp.phi_col[j]),
        cols=col.cols,
        weights=col.weights,
        num_chunks=num_chunks,
    )


def _eval_block(beta: np.ndarray, ctx: _BlockContext,
                counters: EvalCounters | None, need_score: bool,
                need_info: bool, phi_weighted_loss: bool = False):
    """Score, information and loss of one block against all n columns.

    Returns (U, I, loss); U or I is None when not requested.  Partial sums
    are accumulated per chunk in a fixed column-index order so results are
    reproducible for any num_chunks.
    """
    dp1 = ctx.other_ext.shape[1]
    U = np.zeros(dp1) if need_score else None
    I_u = np.zeros((dp1, dp1), order="F") if need_info else None
    loss = 0.0
    # overflow on a diverging trajectory surfaces through the trainer's
    # finite checks, not as warnings here
    with np.errstate(over="ignore", invalid="ignore"):
        for ch in ctx.chunks:
            eta = np.dot(ch.ext, beta, out=ch.eta)
            eta += ch.bias
            if eta.max() > ETA_MAX:
                if counters is not None:
                    counters.clamp_events += int((eta > ETA_MAX).sum())
                np.minimum(eta, ETA_MAX, out=eta)
            mu2p = np.multiply(ch.two_m_p, eta, out=ch.mu2p)
            np.exp(mu2p, out=mu2p)                    # mu ** (2 - p)
            mu1p = np.multiply(ch.one_m_p, eta, out=ch.mu1p)
            # mu ** (1 - p) explodes as eta -> -inf; cells with y = 0
            # multiply it by zero, so cap the exponent to keep 0 * exp
            # finite (a stored cell at such eta still produces a huge,
            # divergence-size value)
            np.minimum(mu1p, 700.0, out=mu1p)
            np.exp(mu1p, out=mu1p)

            if phi_weighted_loss:
                loss += float(mu2p @ (ch.inv_two_m_p * ch.inv_phi)) \
                    - float(mu1p @ (ch.w1mp * ch.inv_phi))
            else:
                loss += float(mu2p @ ch.inv_two_m_p) - float(mu1p @ ch.w1mp)

            if need_score or need_info:
                base = np.multiply(mu2p, ch.inv_phi, out=ch.base)
                if need_score:
                    coef = np.multiply(ch.y_iphi, mu1p, out=ch.coef)
                    coef -= base
                    U += coef @ ch.ext
                if need_info:
                    coef2 = np.multiply(base, ch.blend, out=ch.coef)
                    np.sqrt(coef2, out=coef2)
                    # both coefficient branches are > 0, so the sqrt is exact
                    B = np.multiply(ch.ext, coef2[:, None], out=ch.B)
                    # accumulate the upper triangle of B^T B in place
                    I_u = _dsyrk(1.0, B.T, beta=1.0, c=I_u, trans=0, lower=0,
                                 overwrite_c=1)
    if I_u is None:
        I = None
    else:
        I = I_u + I_u.T
        I.flat[:: dp1 + 1] -= I_u.diagonal()
    return U, I, loss


class BlockEvaluator:
    """Reusable evaluator for one parameter block against frozen opposites.

    Builds the block context once and serves repeated (U, I, loss)
    evaluations at fresh beta values, as the inner epoch loop needs.  With
    ``unit_phi=True`` the dispersions are replaced by ones, which turns
    -U into the gradient of the phi-free loss.  ``other_ext`` can supply
    a caller-maintained [vectors | 1] matrix of the opposite side to skip
    the per-call copy.
    """

    def __init__(self, params: EmbeddingParams, disp: DispersionAssignment,
                 data: SparseRow, side: str = "row", num_chunks: int = 1,
                 counters: EvalCounters | None = None, unit_phi: bool = False,
                 other_ext: np.ndarray | None = None):
        if side == "row":
            self.ctx = _row_context(params, disp, data, num_chunks, other_ext)
        elif side == "col":
            self.ctx = _col_context(params, disp, data, num_chunks, other_ext)
        else:
            raise ValueError("side must be 'row' or 'col'")
        if unit_phi:
            self.ctx.replace_inv_phi(np.ones_like(self.ctx.inv_phi))
        self.counters = counters

    def evaluate(self, beta: np.ndarray, need_score: bool = True,
                 need_info: bool = True):
        return _eval_block(beta, self.ctx, self.counters, need_score, need_info)


def row_score(params: EmbeddingParams, disp: DispersionAssignment, row: SparseRow,
              num_chunks: int = 1, counters: EvalCounters | None = None) -> np.ndarray:
    """Score vector (U_w, U_b) of the log-likelihood for row block beta_i."""
    ctx = _row_context(params, disp, row, num_chunks)
    beta = np.append(params.W[row.row_id], params.b[row.row_id])
    U, _, _ = _eval_block(beta, ctx, counters, True, False)
    return U


def row_information(params: EmbeddingParams, disp: DispersionAssignment, row: SparseRow,
                    num_chunks: int = 1, counters: EvalCounters | None = None) -> np.ndarray:
    """Fisher information matrix for row block beta_i (symmetric PSD)."""
    ctx = _row_context(params, disp, row, num_chunks)
    beta = np.append(params.W[row.row_id], params.b[row.row_id])
    _, I, _ = _eval_block(beta, ctx, counters, False, True)
    return I


def col_score(params: EmbeddingParams, disp: DispersionAssignment, col: SparseRow,
              num_chunks: int = 1, counters: EvalCounters | None = None) -> np.ndarray:
    """Score vector for column block betat_j; col holds column j's entries."""
    ctx = _col_context(params, disp, col, num_chunks)
    beta = np.append(params.Wt[col.row_id], params.bt[col.row_id])
    U, _, _ = _eval_block(beta, ctx, counters, True, False)
    return U


def col_information(params: EmbeddingParams, disp: DispersionAssignment, col: SparseRow,
                    num_chunks: int = 1, counters: EvalCounters | None = None) -> np.ndarray:
    """Fisher information matrix for column block betat_j."""
    ctx = _col_context(params, disp, col, num_chunks)
    beta = np.append(params.Wt[col.row_id], params.bt[col.row_id])
    _, I, _ = _eval_block(beta, ctx, counters, False, True)
    return I


def row_score_information(params: EmbeddingParams, disp: DispersionAssignment,
                          row: SparseRow, num_chunks: int = 1,
                          counters: EvalCounters | None = None):
    """One-pass (U, I, loss) for row block beta_i; the training hot path."""
    ctx = _row_context(params, disp, row, num_chunks)
    beta = np.append(params.W[row.row_id], params.b[row.row_id])
    return _eval_block(beta, ctx, counters, True, True)


def col_score_information(params: EmbeddingParams, disp: DispersionAssignment,
                          col: SparseRow, num_chunks: int = 1,
                          counters: EvalCounters | None = None):
    """One-pass (U, I, loss) for column block betat_j."""
    ctx = _col_context(params, disp, col, num_chunks)
    beta = np.append(params.Wt[col.row_id], params.bt[col.row_id])
    return _eval_block(beta, ctx, counters, True, True)


def row_loss(params: EmbeddingParams, disp: DispersionAssignment, row: SparseRow,
             num_chunks: int = 1, counters: EvalCounters | None = None,
             phi_weighted: bool = False) -> float:
    """Loss contribution of one full row, -sum_j (y_ij theta_ij - kappa_ij)."""
    ctx = _row_context(params, disp, row, num_chunks)
    beta = np.append(params.W[row.row_id], params.b[row.row_id])
    _, _, loss = _eval_block(beta, ctx, counters, False, False,
                             phi_weighted_loss=phi_weighted)
    return loss


def total_loss(params: EmbeddingParams, disp: DispersionAssignment, rows,
               num_chunks: int = 1, counters: EvalCounters | None = None,
               phi_weighted: bool = False) -> float:
    """Overall loss over all cells, accumulated row-wise.

    The dispersion components enter only through the powers; the training
    loss carries no 1/phi weight.  Set ``phi_weighted=True`` for the
    diagnostic likelihood-weighted variant.
    """
    total = 0.0
    for row in rows:
        total += row_loss(params, disp, row, num_chunks, counters,
                          phi_weighted=phi_weighted)
    return total


def row_loss_gradient(params: EmbeddingParams, disp: DispersionAssignment, row: SparseRow,
                      num_chunks: int = 1, counters: EvalCounters | None = None) -> np.ndarray:
    """Gradient of the (phi-free) loss w.r.t. beta_i; equals -row_score at phi == 1."""
    ctx = _row_context(params, disp, row, num_chunks)
    ctx.replace_inv_phi(np.ones_like(ctx.inv_phi))
    beta = np.append(params.W[row.row_id], params.b[row.row_id])
    U, _, _ = _eval_block(beta, ctx, counters, True, False)
    return -U


def col_loss_gradient(params: EmbeddingParams, disp: DispersionAssignment, col: SparseRow,
                      num_chunks: int = 1, counters: EvalCounters | None = None) -> np.ndarray:
    """Gradient of the (phi-free) loss w.r.t. betat_j."""
    ctx = _col_context(params, disp, col, num_chunks)
    ctx.replace_inv_phi(np.ones_like(ctx.inv_phi))
    beta = np.append(params.Wt[col.row_id], params.bt[col.row_id])
    U, _, _ = _eval_block(beta, ctx, counters, True, False)
    return -U
