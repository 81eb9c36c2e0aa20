"""Permutation-free objectives.

Both losses compare a model output with a target whose speaker order is
arbitrary, so the loss is taken under the best of all S! row assignments.
The search works on a precomputed S x S pairwise cost matrix; gradients flow
only through the chosen assignment.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from . import tensor as tt
from .tensor import DimensionError, Tensor

MAX_SPEAKERS = 8


class TooManySpeakersError(ValueError):
    pass


@dataclass
class PermutationResult:
    loss: Tensor
    best_perm: tuple  # row i of the target is matched with row best_perm[i] of the output

    @property
    def loss_value(self) -> float:
        return float(self.loss.data)


def best_permutation(cost: np.ndarray) -> tuple:
    """Assignment minimizing ``sum_i cost[i, perm[i]]``.

    Exhaustive over all permutations in lexicographic order; the first
    minimum wins ties.  A non-finite cost keeps the identity so NaN losses
    propagate to the caller.
    """
    cost = np.asarray(cost)
    s = cost.shape[0]
    if cost.shape != (s, s):
        raise DimensionError(f"cost matrix must be square, got {cost.shape}")
    if s > MAX_SPEAKERS:
        raise TooManySpeakersError(f"{s} speakers exceeds the exhaustive-search bound {MAX_SPEAKERS}")
    rows = np.arange(s)
    best, best_cost = tuple(range(s)), np.inf
    for perm in itertools.permutations(range(s)):
        total = cost[rows, perm].sum()
        if total < best_cost:
            best, best_cost = perm, total
    return best


def _bce_numpy(p: np.ndarray, y: np.ndarray) -> np.ndarray:
    pc = np.clip(p, tt.BCE_EPS, 1 - tt.BCE_EPS)
    return -(y * np.log(pc) + (1 - y) * np.log1p(-pc))


def bce_cost_matrix(y_pred: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """``cost[i, j] = sum_t BCE(labels[i, t], y_pred[j, t])``."""
    return _bce_numpy(y_pred[None, :, :], labels[:, None, :]).sum(axis=-1)


def mse_cost_matrix(z_student: np.ndarray, z_teacher: np.ndarray) -> np.ndarray:
    """``cost[i, j] = sum_t (z_teacher[i, t] - z_student[j, t])^2``."""
    diff = z_teacher[:, None, :] - z_student[None, :, :]
    return (diff * diff).sum(axis=-1)


def _check_pair(a_shape, b_shape):
    if a_shape != b_shape:
        raise DimensionError(f"shapes {a_shape} and {b_shape} differ")
    if a_shape[-2] > MAX_SPEAKERS:
        raise TooManySpeakersError(
            f"{a_shape[-2]} speakers exceeds the exhaustive-search bound {MAX_SPEAKERS}")


def _aligned_targets(targets: np.ndarray, perms: list) -> np.ndarray:
    # the target row i goes to output row perm[i]
    out = np.empty_like(targets)
    for b, perm in enumerate(perms):
        out[b, list(perm)] = targets[b]
    return out


def bce_pit(y_pred: Tensor, labels) -> PermutationResult:
    """``(1 / TS) min_P BCE(labels, P y_pred)`` for ``[S, T]`` inputs.

    Batched ``[B, S, T]`` inputs give the mean over the batch, and
    ``best_perm`` becomes a list with one assignment per sample.
    """
    batched, y, lab = _as_batch(y_pred, labels)
    perms = [best_permutation(bce_cost_matrix(y.data[b], lab[b])) for b in range(lab.shape[0])]
    aligned = _aligned_targets(lab, perms)
    loss = tt.scale(tt.tsum(tt.bce_elementwise(y, aligned)), 1.0 / lab.size)
    return PermutationResult(loss, perms if batched else perms[0])


def kd_pit(z_teacher, z_student: Tensor) -> PermutationResult:
    """``(1 / TS) min_P ||z_teacher - P z_student||_F^2``.

    The teacher logits are constants; only ``z_student`` receives gradient.
    """
    teacher = np.asarray(z_teacher.data if isinstance(z_teacher, Tensor) else z_teacher)
    batched, zs, zt = _as_batch(z_student, teacher)
    perms = [best_permutation(mse_cost_matrix(zs.data[b], zt[b])) for b in range(zt.shape[0])]
    aligned = _aligned_targets(zt, perms)
    diff = tt.subtract(zs, Tensor(aligned.astype(zs.data.dtype)))
    loss = tt.scale(tt.frobenius_sq(diff), 1.0 / zt.size)
    return PermutationResult(loss, perms if batched else perms[0])


def _as_batch(pred: Tensor, target):
    pred = pred if isinstance(pred, Tensor) else Tensor(pred)
    target = np.asarray(target, dtype=pred.data.dtype)
    _check_pair(pred.shape, target.shape)
    if pred.ndim == 2:
        return False, tt.reshape(pred, (1, *pred.shape)), target[None]
    if pred.ndim != 3:
        raise DimensionError(f"expected [S, T] or [B, S, T], got {pred.shape}")
    return True, pred, target
