"""Moving semantic transfer: per-class EMA feature centroids of both domains.

Each training step computes per-class batch centroids (true labels on the
source side, pseudo-labels on the target side), folds them into global
exponential-moving-average centroids, and penalizes the summed squared
distance between the two banks.  Classes absent from a batch keep their
previous centroid.  Centroids start at zero, so the first updates shrink
toward zero.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc, encoders

DEFAULT_ZETA = 0.7


class TransferError(Exception):
    pass


@dataclass
class CentroidBank:
    """Per-class EMA centroids for the source and target domains."""

    num_classes: int
    width: int
    zeta: float = DEFAULT_ZETA
    source: np.ndarray = field(init=False)
    target: np.ndarray = field(init=False)

    def __post_init__(self):
        if not 0.0 <= self.zeta <= 1.0:
            raise TransferError(f"zeta must be in [0, 1], got {self.zeta}")
        self.source = np.zeros((self.num_classes, self.width))
        self.target = np.zeros((self.num_classes, self.width))


def batch_centroids(features: np.ndarray, labels: np.ndarray,
                    num_classes: int) -> tuple[np.ndarray, np.ndarray]:
    """Per-class feature means plus a presence mask.

    Rows of absent classes are left at zero and flagged false in the mask.
    """
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels)
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= num_classes:
        raise TransferError(f"labels must lie in [0, {num_classes})")
    cents = np.zeros((num_classes, features.shape[1]))
    mask = np.zeros(num_classes, dtype=bool)
    for k in range(num_classes):
        rows = features[labels == k]
        if len(rows):
            cents[k] = rows.mean(axis=0)
            mask[k] = True
    return cents, mask


def ema_update(bank_matrix: np.ndarray, batch_cents: np.ndarray,
               mask: np.ndarray, zeta: float) -> np.ndarray:
    """zeta * old + (1 - zeta) * batch for present classes; others unchanged."""
    if bank_matrix.shape != batch_cents.shape:
        raise TransferError(
            f"shape mismatch: {bank_matrix.shape} vs {batch_cents.shape}")
    out = bank_matrix.copy()
    out[mask] = zeta * bank_matrix[mask] + (1.0 - zeta) * batch_cents[mask]
    return out


def pseudo_label(cls_params: dc.ParamStore, enc_params: dc.ParamStore,
                 cfg: encoders.EncoderConfig, target_batch) -> np.ndarray:
    """Argmax class of the frozen source model; ties go to the lowest index."""
    tape = dc.Tape()
    feats = encoders.encode(tape, enc_params, cfg, target_batch, train=False)
    probs = encoders.classify(tape, cls_params, feats)
    return probs.data.argmax(axis=1)


def sm_loss(bank: CentroidBank) -> float:
    """Sum over classes of the squared distance between domain centroids."""
    diff = bank.source - bank.target
    return float((diff * diff).sum())


def sm_loss_graph(tape: dc.Tape, bank: CentroidBank,
                  target_features: dc.Tensor, pseudo_labels: np.ndarray,
                  source_features: np.ndarray,
                  source_labels: np.ndarray) -> dc.Tensor:
    """Differentiable transfer loss for one step, through the target features.

    The source bank update and the target bank's EMA history are constants;
    gradient reaches the target extractor only via the current batch's
    pseudo-labeled centroid contributions.  The bank itself is not mutated;
    call :func:`apply_bank_update` with the same inputs after the step.
    """
    K = bank.num_classes
    src_cents, src_mask = batch_centroids(source_features, source_labels, K)
    new_source = ema_update(bank.source, src_cents, src_mask, bank.zeta)

    labels = np.asarray(pseudo_labels)
    n = target_features.data.shape[0]
    # averaging matrix: row k holds 1/count_k at the batch rows labeled k
    avg = np.zeros((K, n))
    tgt_mask = np.zeros(K, dtype=bool)
    for k in range(K):
        idx = np.where(labels == k)[0]
        if len(idx):
            avg[k, idx] = 1.0 / len(idx)
            tgt_mask[k] = True
    batch_tgt = dc.matmul(dc.constant(tape, avg), target_features)  # (K, W)
    keep = tgt_mask.astype(np.float64)[:, None]
    old = dc.constant(tape, bank.target)
    blended = dc.add(
        dc.mul(old, dc.constant(tape, 1.0 - (1.0 - bank.zeta) * keep)),
        dc.mul(batch_tgt, dc.constant(tape, (1.0 - bank.zeta) * keep)))
    diff = dc.sub(dc.constant(tape, new_source), blended)
    return dc.sum_(dc.mul(diff, diff))


def apply_bank_update(bank: CentroidBank, target_features: np.ndarray,
                      pseudo_labels: np.ndarray, source_features: np.ndarray,
                      source_labels: np.ndarray) -> None:
    """Commit one step's EMA updates to both banks (detached values)."""
    K = bank.num_classes
    src_cents, src_mask = batch_centroids(source_features, source_labels, K)
    bank.source = ema_update(bank.source, src_cents, src_mask, bank.zeta)
    tgt_cents, tgt_mask = batch_centroids(np.asarray(target_features),
                                          pseudo_labels, K)
    bank.target = ema_update(bank.target, tgt_cents, tgt_mask, bank.zeta)
