"""Task losses as differentiable scalars (``1 x 1`` variables)."""
from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Variable
from .exceptions import ContractError, ShapeError

__all__ = [
    "masked_cross_entropy",
    "multitask_cross_entropy",
    "regularized_mse",
    "weighted_bce_with_logits",
    "kl_standard_normal",
    "elbo_loss",
    "reconstruction_weights",
]


def _reduce(total, count, reduction):
    if reduction == "sum":
        return total
    if reduction == "mean":
        return ad.scale(total, 1.0 / count)
    raise ContractError(f"reduction must be 'mean' or 'sum', got {reduction!r}")


def masked_cross_entropy(logits, labels, mask, reduction="mean"):
    """Softmax cross-entropy over the rows selected by ``mask``."""
    logits = ad._wrap(logits)
    labels = np.asarray(labels, dtype=np.int64).ravel()
    mask = np.asarray(mask, dtype=bool).ravel()
    if labels.shape != (logits.shape[0],) or mask.shape != labels.shape:
        raise ShapeError("labels and mask need one entry per logits row")
    rows = np.flatnonzero(mask)
    if rows.size == 0:
        raise ContractError("masked_cross_entropy: empty label mask")
    if np.any(labels[rows] < 0) or np.any(labels[rows] >= logits.shape[1]):
        raise ContractError("masked rows must carry a valid class id")
    picked = ad.gather(ad.log_softmax_rows(logits), rows, labels[rows])
    return _reduce(ad.scale(ad.sum(picked), -1.0), rows.size, reduction)


def _binary_ce_cells(logits, targets, mask):
    """``-[y log s(z) + (1-y) log(1-s(z))]`` summed over observed cells."""
    z = logits.value
    y = np.where(mask, targets, 0.0)
    m = mask.astype(np.float64)
    # log(1+exp(-|z|)) + max(z,0) - y z
    val = (m * (np.maximum(z, 0.0) - y * z + np.log1p(np.exp(-np.abs(z))))).sum()
    s = 1.0 / (1.0 + np.exp(-z))
    return ad.custom_op(np.array([[val]]), (logits,), lambda g: (g[0, 0] * m * (s - y),))


def multitask_cross_entropy(logits, labels, mask, reduction="mean"):
    """Cross-entropy summed over ``k`` tasks, skipping missing cells.

    ``logits`` is either a ``q x k`` variable of binary logits (one per
    task) with ``labels`` in ``{0, 1}``, or a list of ``k`` per-task
    ``q x F_t`` softmax logits with integer ``labels``. Missing cells
    (``mask`` false) contribute nothing to value or gradient. ``mean``
    divides by the number of observed cells.
    """
    labels = np.asarray(labels, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    if labels.ndim == 1:
        labels, mask = labels.reshape(-1, 1), mask.reshape(-1, 1)
    if labels.shape != mask.shape:
        raise ShapeError("labels and mask must have the same shape")
    count = int(mask.sum())
    if count == 0:
        raise ContractError("multitask_cross_entropy: every cell is missing")
    if isinstance(logits, (list, tuple)):
        if len(logits) != labels.shape[1]:
            raise ShapeError(f"{len(logits)} task heads for {labels.shape[1]} label columns")
        total = None
        for t, head in enumerate(logits):
            if not mask[:, t].any():
                continue
            term = masked_cross_entropy(head, np.where(mask[:, t], labels[:, t], 0), mask[:, t], "sum")
            total = term if total is None else ad.add(total, term)
    else:
        logits = ad._wrap(logits)
        if logits.shape != labels.shape:
            raise ShapeError(f"logits {logits.shape} vs labels {labels.shape}")
        total = _binary_ce_cells(logits, labels, mask)
    return _reduce(total, count, reduction)


def regularized_mse(pred, target, mask, params=(), lam=5e-4, p=2, reduction="sum"):
    """Squared error over observed entries plus ``lam * ||params||_p``.

    ``p = 2`` penalizes the sum of squares, ``p = 1`` the sum of absolute
    values. ``reduction`` applies to the error term only.
    """
    if p not in (1, 2):
        raise ContractError(f"p must be 1 or 2, got {p}")
    if lam < 0:
        raise ContractError("lam must be nonnegative")
    pred = ad._wrap(pred)
    target = np.asarray(target, dtype=np.float64).reshape(pred.shape)
    mask = np.asarray(mask, dtype=bool).reshape(pred.shape)
    count = int(mask.sum())
    m = mask.astype(np.float64)
    resid = ad.elementwise_mul(ad.sub(pred, np.where(mask, target, 0.0)), m)
    err = _reduce(ad.sum(ad.elementwise_mul(resid, resid)), max(count, 1), reduction)
    if lam == 0 or not params:
        return err
    reg = None
    for theta in params:
        term = ad.sum(ad.elementwise_mul(theta, theta)) if p == 2 else ad.sum(ad.abs(theta))
        reg = term if reg is None else ad.add(reg, term)
    return ad.add(err, ad.scale(reg, lam))


def reconstruction_weights(adjacency):
    """Class-balance constants for adjacency reconstruction.

    ``pos_weight = #zeros / #ones`` and ``norm = N^2 / (2 #zeros)``.
    """
    a = np.asarray(adjacency)
    n2 = a.size
    ones = float(np.count_nonzero(a))
    zeros = n2 - ones
    if ones == 0 or zeros == 0:
        return 1.0, 1.0
    return zeros / ones, n2 / (2.0 * zeros)


def weighted_bce_with_logits(logits, targets, pos_weight=1.0):
    """Mean over all cells of ``-[w y log s(z) + (1-y) log(1-s(z))]``."""
    logits = ad._wrap(logits)
    z = logits.value
    y = np.asarray(targets, dtype=np.float64)
    if y.shape != z.shape:
        raise ShapeError(f"targets {y.shape} vs logits {z.shape}")
    log_s = np.minimum(z, 0.0) - np.log1p(np.exp(-np.abs(z)))  # log sigmoid(z)
    log_1ms = log_s - z  # log(1 - sigmoid(z))
    n = z.size
    val = -(pos_weight * y * log_s + (1.0 - y) * log_1ms).sum() / n
    s = np.exp(log_s)
    coef = 1.0 / n

    def back(g):
        return (g[0, 0] * coef * (pos_weight * y * (s - 1.0) + (1.0 - y) * s),)

    return ad.custom_op(np.array([[val]]), (logits,), back)


def kl_standard_normal(mu, log_sigma):
    """``KL(N(mu, sigma^2) || N(0, I))`` summed over all rows and dimensions."""
    mu, log_sigma = ad._wrap(mu), ad._wrap(log_sigma)
    one_plus = ad.add(ad.scale(log_sigma, 2.0), 1.0)
    inner = ad.sub(ad.sub(one_plus, ad.elementwise_mul(mu, mu)), ad.exp(ad.scale(log_sigma, 2.0)))
    return ad.scale(ad.sum(inner), -0.5)


def elbo_loss(adj_pred, target, enc, pos_weight=None, norm=None, from_logits=False):
    """Negated evidence lower bound for adjacency reconstruction.

    ``norm * weighted_bce(adj_pred, target) + mean_i(KL_i) / N`` where
    ``KL_i`` is row ``i``'s divergence from the prior. ``adj_pred`` holds
    probabilities, or logits when ``from_logits`` is set (the numerically
    safe path used in training).
    """
    target = np.asarray(target, dtype=np.float64)
    if pos_weight is None or norm is None:
        pw, nm = reconstruction_weights(target)
        pos_weight = pw if pos_weight is None else pos_weight
        norm = nm if norm is None else norm
    adj_pred = ad._wrap(adj_pred)
    if from_logits:
        recon = weighted_bce_with_logits(adj_pred, target, pos_weight)
    else:
        eps = 1e-12
        log_p = ad.log(adj_pred, floor=eps)
        log_q = ad.log(ad.add(ad.scale(adj_pred, -1.0), 1.0), floor=eps)
        cell = ad.add(ad.elementwise_mul(log_p, pos_weight * target),
                      ad.elementwise_mul(log_q, 1.0 - target))
        recon = ad.scale(ad.sum(cell), -1.0 / target.size)
    n = enc.mu.shape[0]
    # row-averaged KL, then / N so it stays on the scale of the per-cell reconstruction term
    kl = ad.scale(kl_standard_normal(enc.mu, enc.log_sigma), 1.0 / (n * n))
    return ad.add(ad.scale(recon, norm), kl)
