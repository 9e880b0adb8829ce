"""Closed-form output reconstruction for the contracting projections.

After slicing, a layer's output projection no longer sees the removed
transitional channels. Recovery refits the surviving rows of the projection
so the layer output over the calibration tokens matches the unpruned output
as closely as possible:

    W' = argmin_W  ||X W - Y||_F^2 + lam * ||W - W_sliced||_F^2

where ``X`` are the surviving transitional activations and
``Y = X_full @ W_full`` the original layer outputs. Solved via normal
equations, ``(X^T X + lam I) W = X^T Y + lam W_sliced``.

Everything needed is derivable from the full Gram matrix ``G = X_full^T
X_full`` and the original weights, so the schedule runner accumulates Gram
matrices streaming over calibration batches and never materializes
activations. Solves run in float64 regardless of the model dtype; normal
equations square the condition number and float32 would shed half the
available digits.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import RecoveryError

# Eigenvalue floor (relative to the largest) below which an unregularized
# system is reported as rank-deficient instead of silently amplifying noise.
_RANK_RTOL = 1e-10


@dataclass
class RecoveryInfo:
    mse_before: float
    mse_after: float
    lam: float
    cond: float


def _solve_from_gram(
    gram_keep: np.ndarray,    # [D', D'] = X^T X
    cross: np.ndarray,        # [D', H]  = X^T Y
    y_sq: float,              # tr(Y^T Y)
    w_sliced: np.ndarray,     # [D', H]
    lam: float,
    n_rows: int,
) -> tuple[np.ndarray, RecoveryInfo]:
    if lam < 0:
        raise RecoveryError(f"ridge weight must be non-negative, got {lam}")
    d = gram_keep.shape[0]
    denom = float(n_rows * w_sliced.shape[1])

    def objective(w: np.ndarray) -> float:
        fit = float(np.einsum("ij,ik,kj->", w, gram_keep, w) - 2.0 * np.sum(w * cross) + y_sq)
        return max(fit, 0.0) / denom  # clamp float cancellation noise at the optimum

    mse_before = objective(w_sliced)
    if mse_before == 0.0:
        # W_sliced already reproduces Y exactly; both objective terms are zero
        # there, so it is a global minimizer and no solve is needed.
        return w_sliced.copy(), RecoveryInfo(mse_before, mse_before, lam, 1.0)

    eigvals = np.linalg.eigvalsh(gram_keep)
    top = float(eigvals[-1])
    bottom = float(eigvals[0])
    if lam == 0.0 and (top <= 0.0 or bottom <= top * _RANK_RTOL):
        raise RecoveryError(
            "normal equations are rank-deficient; pass a positive ridge weight (lam) to regularize"
        )
    system = gram_keep + lam * np.eye(d)
    cond = (top + lam) / max(bottom + lam, np.finfo(np.float64).tiny)
    w_new = np.linalg.solve(system, cross + lam * w_sliced)
    mse_after = objective(w_new)
    return w_new, RecoveryInfo(mse_before, mse_after, lam, cond)


def least_squares_recovery(
    full_acts: np.ndarray,
    pruned_acts: np.ndarray,
    w_out: np.ndarray,
    lam: float = 0.0,
    keep: np.ndarray | None = None,
) -> tuple[np.ndarray, RecoveryInfo]:
    """Refit a contracting projection from explicit activation matrices.

    ``full_acts [T, D] @ w_out [D, H]`` defines the targets; ``pruned_acts
    [T, D']`` are the surviving transitional activations over the same
    tokens, i.e. an ordered column subset of ``full_acts`` selected by
    ``keep`` (inferred by column matching when omitted). Returns the
    adjusted ``[D', H]`` weights (same dtype as w_out) and diagnostics.
    """
    x = np.asarray(pruned_acts, dtype=np.float64)
    full = np.asarray(full_acts, dtype=np.float64)
    w_full = np.asarray(w_out, dtype=np.float64)
    if x.ndim != 2 or full.ndim != 2 or x.shape[0] != full.shape[0]:
        raise RecoveryError("activation matrices must be [T, D] with matching T")
    if x.shape[1] > full.shape[1]:
        raise RecoveryError("pruned activations are wider than the full activations")
    if keep is None:
        keep = _infer_keep(full, x)
    keep = np.asarray(keep, dtype=np.int64)
    if keep.size != x.shape[1]:
        raise RecoveryError(f"keep-set has {keep.size} entries for {x.shape[1]} surviving columns")

    y = full @ w_full
    gram = x.T @ x
    cross = x.T @ y
    y_sq = float(np.sum(y * y))
    w_new, info = _solve_from_gram(gram, cross, y_sq, w_full[keep, :], lam, x.shape[0])
    return w_new.astype(w_out.dtype), info


def _infer_keep(full: np.ndarray, x: np.ndarray) -> np.ndarray:
    if x.shape[1] == full.shape[1] and np.array_equal(x, full):
        return np.arange(full.shape[1])
    kept = []
    j = 0
    for i in range(full.shape[1]):
        if j < x.shape[1] and np.array_equal(full[:, i], x[:, j]):
            kept.append(i)
            j += 1
    if j != x.shape[1]:
        raise RecoveryError("pruned activations are not an ordered column subset of the full activations")
    return np.asarray(kept, dtype=np.int64)


def recover_from_gram(
    gram_full: np.ndarray,
    w_full: np.ndarray,
    keep: np.ndarray,
    lam: float,
    n_rows: int,
) -> tuple[np.ndarray, RecoveryInfo]:
    """Gram-matrix route used by the schedule runner.

    With ``G = X_full^T X_full``: ``X^T X = G[keep][:, keep]``,
    ``X^T Y = G[keep, :] @ W_full`` and ``tr(Y^T Y) = tr(W^T G W)``.
    """
    keep = np.asarray(keep, dtype=np.int64)
    g = np.asarray(gram_full, dtype=np.float64)
    w = np.asarray(w_full, dtype=np.float64)
    gram_keep = g[np.ix_(keep, keep)]
    cross = g[keep, :] @ w
    y_sq = float(np.einsum("ij,ik,kj->", w, g, w))
    w_new, info = _solve_from_gram(gram_keep, cross, y_sq, w[keep, :], lam, n_rows)
    return w_new.astype(w_full.dtype), info


def trace_scaled_lambda(gram_keep: np.ndarray, rel: float) -> float:
    """Ridge weight proportional to the mean diagonal of the kept Gram block."""
    d = gram_keep.shape[0]
    return float(rel) * float(np.trace(gram_keep)) / max(d, 1)
