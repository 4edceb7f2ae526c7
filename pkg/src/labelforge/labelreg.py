"""Training-label strategies: one-hot, smoothing, learnable smoothing, online
smoothing, and teacher-derived targets, with the gradients that train them.

The learnable variant keeps, for every class y, a row of K-1 logits whose
softmax says how the smoothing mass alpha is shared among the non-target
classes. The target for a sample of class y is then

    target[y] = 1 - alpha
    target[i] = alpha * softmax(row_y)[slot(i)]      for i != y

where slot(i) maps the non-target classes of y to 0..K-2 in increasing class
order. The ground-truth entry never depends on the learned row, so the
argmax of every target stays at y for alpha < 0.5.

Training uses a symmetric pair of cross-entropies with disjoint gradient
routes: the forward direction H(target, prediction) updates only the
network, and the reverse direction H(prediction, target) updates only the
logit table. Both directions' gradients (and the un-gated ones needed by the
loss ablations) live here in closed form; each is verified against central
finite differences in the test suite.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass

import numpy as np

from .numerics import softmax_rows

LOG_CLAMP = 1e-12


def nontarget_indices(num_classes: int) -> np.ndarray:
    """(K, K-1) table: row y lists all classes except y, in increasing order."""
    k = num_classes
    idx = np.empty((k, k - 1), dtype=np.int64)
    for y in range(k):
        idx[y, :y] = np.arange(y)
        idx[y, y:] = np.arange(y + 1, k)
    return idx


@dataclass
class CMatrix:
    """K x (K-1) learnable logits; softmax per row shares alpha across
    the non-target classes of that row's class."""

    logits: np.ndarray
    alpha: float

    def __post_init__(self):
        logits = np.asarray(self.logits, dtype=np.float64)
        if logits.ndim != 2 or logits.shape[1] != logits.shape[0] - 1:
            raise ValueError(
                f"logits must have shape (K, K-1), got {logits.shape}"
            )
        if logits.shape[0] < 2:
            raise ValueError("need at least 2 classes")
        if not 0.0 <= self.alpha < 1.0:
            raise ValueError(f"alpha must be in [0, 1), got {self.alpha}")
        self.logits = logits

    @classmethod
    def zeros(cls, num_classes: int, alpha: float) -> "CMatrix":
        return cls(np.zeros((num_classes, num_classes - 1)), alpha)

    @property
    def num_classes(self) -> int:
        return self.logits.shape[0]

    def row_probs(self, y: int) -> np.ndarray:
        return softmax_rows(self.logits[y : y + 1])[0]

    def all_row_probs(self) -> np.ndarray:
        return softmax_rows(self.logits)

    def expanded_probs(self) -> np.ndarray:
        """K x K view with the per-row softmax scattered around an exact-0
        diagonal."""
        k = self.num_classes
        expanded = np.zeros((k, k), dtype=np.float64)
        probs = self.all_row_probs()
        idx = nontarget_indices(k)
        for y in range(k):
            expanded[y, idx[y]] = probs[y]
        return expanded

    def copy(self) -> "CMatrix":
        return CMatrix(self.logits.copy(), self.alpha)


def onehot_target(y: int, num_classes: int) -> np.ndarray:
    if not 0 <= y < num_classes:
        raise ValueError(f"label {y} out of range for {num_classes} classes")
    target = np.zeros(num_classes, dtype=np.float64)
    target[y] = 1.0
    return target


def ls_target(y: int, num_classes: int, alpha: float) -> np.ndarray:
    """Classic smoothing: (1-alpha) on the one-hot plus alpha spread
    uniformly over all K classes (the target class included). alpha may be
    1.0 here (fully uniform target); training configs are stricter."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must be in [0, 1], got {alpha}")
    if not 0 <= y < num_classes:
        raise ValueError(f"label {y} out of range for {num_classes} classes")
    target = np.full(num_classes, alpha / num_classes, dtype=np.float64)
    target[y] = 1.0 - alpha + alpha / num_classes
    return target


def lspp_target(c: CMatrix, y: int) -> np.ndarray:
    """Learnable smoothing target: exactly (1-alpha) at y, alpha shared over
    the other classes by the row-y softmax."""
    k = c.num_classes
    if not 0 <= y < k:
        raise ValueError(f"label {y} out of range for {k} classes")
    target = np.zeros(k, dtype=np.float64)
    target[np.arange(k) != y] = c.alpha * c.row_probs(y)
    target[y] = 1.0 - c.alpha
    return target


def target_table(c: CMatrix) -> np.ndarray:
    """All K class targets at once; row y equals lspp_target(c, y)."""
    k = c.num_classes
    table = np.zeros((k, k), dtype=np.float64)
    probs = c.all_row_probs()
    idx = nontarget_indices(k)
    for y in range(k):
        table[y, idx[y]] = c.alpha * probs[y]
    table[np.arange(k), np.arange(k)] = 1.0 - c.alpha
    return table


def network_logit_grad(target: np.ndarray, probs: np.ndarray) -> np.ndarray:
    """d/d(logits) of the forward cross-entropy with the target held fixed:
    simply probs - target, per sample."""
    target = np.asarray(target, dtype=np.float64)
    probs = np.asarray(probs, dtype=np.float64)
    if target.shape != probs.shape:
        raise ValueError(f"shape mismatch: {target.shape} vs {probs.shape}")
    return probs - target


def reverse_cross_entropy(c: CMatrix, y: int, probs: np.ndarray) -> float:
    """Scalar H(prediction, target) = -sum_i probs_i * log(target_i), with
    target entries clamped below at LOG_CLAMP before the log."""
    target = np.maximum(lspp_target(c, y), LOG_CLAMP)
    return float(-np.dot(probs, np.log(target)))


def c_logit_grad(c: CMatrix, y: int, probs: np.ndarray) -> np.ndarray:
    """Closed-form gradient of the reverse cross-entropy w.r.t. row-y logits.

    With p = softmax(row_y) and S = sum of predicted probability off the
    target class, g_j = -(probs_j - p_j * S) for each non-target slot j.
    The smoothing weight alpha cancels: it only shifts the log additively.
    """
    probs = np.asarray(probs, dtype=np.float64)
    k = c.num_classes
    if probs.shape != (k,):
        raise ValueError(f"probs shape {probs.shape} does not match K={k}")
    p = c.row_probs(y)
    off_target = probs[nontarget_indices(k)[y]]
    mass = off_target.sum()
    return -(off_target - p * mass)


def c_logit_grad_forward(c: CMatrix, y: int, log_probs: np.ndarray) -> np.ndarray:
    """Gradient of the forward cross-entropy w.r.t. row-y logits, i.e. what
    the table would receive if its gradient were NOT gated off.

    g_j = -alpha * p_j * (log_probs_j - sum_i p_i * log_probs_i) over the
    non-target slots. Descent on this concentrates the row on the class the
    network already scores highest, collapsing the row's entropy; the loss
    ablations exercise it.
    """
    log_probs = np.asarray(log_probs, dtype=np.float64)
    k = c.num_classes
    if log_probs.shape != (k,):
        raise ValueError(f"log_probs shape {log_probs.shape} does not match K={k}")
    p = c.row_probs(y)
    off_target = log_probs[nontarget_indices(k)[y]]
    return -c.alpha * p * (off_target - np.dot(p, off_target))


def network_logit_grad_reverse(c: CMatrix, y: int, probs: np.ndarray) -> np.ndarray:
    """Gradient of the reverse cross-entropy w.r.t. the network logits
    (needed only when that direction is not gated off the network).

    d/dz_j = -probs_j * (log t_j - sum_i probs_i log t_i), t clamped.
    """
    probs = np.asarray(probs, dtype=np.float64)
    log_t = np.log(np.maximum(lspp_target(c, y), LOG_CLAMP))
    return -probs * (log_t - np.dot(probs, log_t))


@dataclass
class OlsState:
    """Running per-class sums of predicted distributions plus counts."""

    sums: np.ndarray
    counts: np.ndarray

    @classmethod
    def zeros(cls, num_classes: int) -> "OlsState":
        return cls(
            np.zeros((num_classes, num_classes), dtype=np.float64),
            np.zeros(num_classes, dtype=np.int64),
        )

    def class_means(self) -> np.ndarray:
        """Mean prediction per class; rows with zero count stay all-zero."""
        means = np.zeros_like(self.sums)
        seen = self.counts > 0
        means[seen] = self.sums[seen] / self.counts[seen, None]
        return means


def ols_accumulate(state: OlsState, probs: np.ndarray, y: int) -> OlsState:
    probs = np.asarray(probs, dtype=np.float64)
    state.sums[y] += probs
    state.counts[y] += 1
    return state


def ols_target(class_means: np.ndarray, y: int, mix: float) -> tuple[np.ndarray, bool]:
    """One-hot pulled toward the class's mean prediction by `mix`.

    Computed as onehot + mix * (mean - onehot), which is exact when the mean
    itself is one-hot (the collapse case) for every mix. A class whose mean
    row is all-zero (never observed) falls back to plain one-hot; the second
    return value flags that fallback. Rows are renormalized only when their
    sum drifts from 1 by more than 1e-9.
    """
    if not 0.0 <= mix <= 1.0:
        raise ValueError(f"mix must be in [0, 1], got {mix}")
    class_means = np.asarray(class_means, dtype=np.float64)
    k = class_means.shape[0]
    onehot = onehot_target(y, k)
    row = class_means[y]
    if row.sum() == 0.0:
        return onehot, True
    target = onehot + mix * (row - onehot)
    total = target.sum()
    if abs(total - 1.0) > 1e-9:
        target = target / total
    return target, False


def teacher_target(teacher_probs: np.ndarray) -> np.ndarray:
    """Pass a teacher's predicted distribution through unchanged."""
    probs = np.asarray(teacher_probs, dtype=np.float64)
    total = float(probs.sum())
    if probs.ndim != 1 or abs(total - 1.0) > 1e-9 or (probs < 0).any():
        raise ValueError("teacher output is not a probability distribution")
    return probs


def proxy_teacher_target(teacher_c: CMatrix, y: int) -> np.ndarray:
    """Class-level distillation target built from a teacher's frozen logit
    table; identical construction to lspp_target, no teacher forward pass."""
    return lspp_target(teacher_c, y)


def export_cmatrix(c: CMatrix, csv_path, metadata: dict | None = None) -> None:
    """Write the expanded K x K probabilities as CSV (header = class
    indices, exact 0.0 diagonal) plus a JSON sidecar with alpha and K."""
    expanded = c.expanded_probs()
    k = c.num_classes
    with open(csv_path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow([str(i) for i in range(k)])
        for row in expanded:
            writer.writerow([repr(float(v)) for v in row])
    sidecar = {
        "alpha": c.alpha,
        "num_classes": k,
        "metadata": metadata or {},
    }
    with open(_sidecar_path(csv_path), "w") as f:
        json.dump(sidecar, f, indent=2, sort_keys=True)
        f.write("\n")


def _sidecar_path(csv_path):
    text = str(csv_path)
    return (text[: -len(".csv")] if text.endswith(".csv") else text) + ".json"


def load_cmatrix(csv_path) -> CMatrix:
    """Rebuild a CMatrix from its CSV export and JSON sidecar.

    Logits are recovered as log of the off-diagonal probabilities (softmax
    is shift-invariant, so any representative works); zero probabilities are
    clamped to keep the logits finite.
    """
    with open(_sidecar_path(csv_path)) as f:
        sidecar = json.load(f)
    with open(csv_path, newline="") as f:
        rows = list(csv.reader(f))
    k = int(sidecar["num_classes"])
    if len(rows) != k + 1:
        raise ValueError(f"{csv_path}: expected {k + 1} rows, found {len(rows)}")
    expanded = np.asarray([[float(v) for v in row] for row in rows[1:]])
    idx = nontarget_indices(k)
    logits = np.empty((k, k - 1), dtype=np.float64)
    for y in range(k):
        logits[y] = np.log(np.maximum(expanded[y, idx[y]], 1e-300))
    return CMatrix(logits, float(sidecar["alpha"]))
