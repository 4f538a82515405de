"""Segmentation losses with analytic gradients.

Label grids hold 0 = unlabeled, 1 = static/immovable, 2 = moving/movable;
unlabeled cells are excluded from every reduction. Gradients exist for
verification by finite differences, not for training.
"""

import warnings

import numpy as np


class LossError(ValueError):
    pass


def _check_pair(tensor, labels, what):
    tensor = np.asarray(tensor, dtype=np.float64)
    labels = np.asarray(labels)
    if tensor.ndim != 3:
        raise LossError(f"{what}: expected (C, H, W) values")
    if labels.shape != tensor.shape[1:]:
        raise LossError(
            f"{what}: labels {labels.shape} do not match values {tensor.shape[1:]}")
    if labels.min() < 0 or labels.max() >= tensor.shape[0]:
        raise LossError(f"{what}: labels outside [0, {tensor.shape[0] - 1}]")
    return tensor, labels.astype(np.int64)


def _log_softmax(logits):
    z = logits - logits.max(axis=0, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=0, keepdims=True))


def softmax_probs(logits):
    return np.exp(_log_softmax(np.asarray(logits, dtype=np.float64)))


def cross_entropy(logits, labels):
    """Mean of -log p(true class) over labeled cells.

    Returns 0 (with a warning) when no cell is labeled.
    """
    logits, labels = _check_pair(logits, labels, "cross_entropy")
    mask = labels > 0
    if not mask.any():
        warnings.warn("cross_entropy: no labeled cells, loss defined as 0",
                      stacklevel=2)
        return 0.0
    logp = _log_softmax(logits)
    rows, cols = np.nonzero(mask)
    return float(-logp[labels[rows, cols], rows, cols].mean())


def cross_entropy_sum(logits, labels):
    """Sum-reduced variant, matching the plain per-sample summation."""
    logits, labels = _check_pair(logits, labels, "cross_entropy")
    mask = labels > 0
    if not mask.any():
        return 0.0
    logp = _log_softmax(logits)
    rows, cols = np.nonzero(mask)
    return float(-logp[labels[rows, cols], rows, cols].sum())


def cross_entropy_grad(logits, labels):
    """d(mean CE)/d(logits): (softmax - onehot) / n_labeled on labeled cells."""
    logits, labels = _check_pair(logits, labels, "cross_entropy_grad")
    mask = labels > 0
    grad = np.zeros_like(logits)
    if not mask.any():
        return grad
    probs = softmax_probs(logits)
    rows, cols = np.nonzero(mask)
    grad[:, rows, cols] = probs[:, rows, cols]
    grad[labels[rows, cols], rows, cols] -= 1.0
    grad[:, rows, cols] /= rows.size
    return grad


def _jaccard_weights(fg_sorted):
    """Successive differences of the sorted-error Jaccard sequence."""
    gts = fg_sorted.sum()
    inter = gts - np.cumsum(fg_sorted)
    union = gts + np.cumsum(1.0 - fg_sorted)
    jacc = 1.0 - inter / union
    if jacc.size > 1:
        jacc[1:] = jacc[1:] - jacc[:-1]
    return jacc


def _present_classes(probs_flat, labels_flat, n_classes):
    """Classes in the labels or dominant somewhere in the prediction."""
    argmax = probs_flat.argmax(axis=0)
    return [c for c in range(n_classes)
            if (labels_flat == c).any() or (argmax == c).any()]


def lovasz_softmax(probs, labels, check_normalized=True):
    """Lovasz extension of the Jaccard loss, averaged over present classes.

    probs must be channel-normalized per pixel (checked to 1e-4 unless
    disabled for gradient probing). Per class: errors are 1 - p on the
    class's cells and p elsewhere, sorted descending (stable), then weighted
    by the Jaccard-difference sequence of the sorted ground-truth indicator.
    """
    probs, labels = _check_pair(probs, labels, "lovasz_softmax")
    if check_normalized:
        sums = probs.sum(axis=0)
        if np.abs(sums - 1.0).max() > 1e-4:
            raise LossError("lovasz_softmax: probs are not channel-normalized")
    mask = labels > 0
    if not mask.any():
        warnings.warn("lovasz_softmax: no labeled cells, loss defined as 0",
                      stacklevel=2)
        return 0.0
    rows, cols = np.nonzero(mask)
    pf = probs[:, rows, cols]
    lf = labels[rows, cols]
    losses = []
    for c in _present_classes(pf, lf, probs.shape[0]):
        fg = (lf == c).astype(np.float64)
        errors = np.where(fg > 0.5, 1.0 - pf[c], pf[c])
        order = np.argsort(-errors, kind="stable")
        losses.append(float(errors[order] @ _jaccard_weights(fg[order])))
    return float(np.mean(losses)) if losses else 0.0


def lovasz_grad_probs(probs, labels):
    """d lovasz / d probs, constant sort permutation (valid away from ties)."""
    probs, labels = _check_pair(probs, labels, "lovasz_grad_probs")
    grad = np.zeros_like(probs)
    mask = labels > 0
    if not mask.any():
        return grad
    rows, cols = np.nonzero(mask)
    pf = probs[:, rows, cols]
    lf = labels[rows, cols]
    present = _present_classes(pf, lf, probs.shape[0])
    for c in present:
        fg = (lf == c).astype(np.float64)
        errors = np.where(fg > 0.5, 1.0 - pf[c], pf[c])
        order = np.argsort(-errors, kind="stable")
        weights = _jaccard_weights(fg[order])
        g = np.empty_like(errors)
        # d errors / d p is -1 on the class's own cells, +1 elsewhere
        g[order] = weights * np.where(fg[order] > 0.5, -1.0, 1.0)
        grad[c, rows, cols] += g / len(present)
    return grad


def total_loss(moving_logits, movable_logits, moving_labels, movable_labels):
    """Sum of the two head losses, each cross-entropy + Lovasz.

    Returns (total, breakdown); the breakdown components sum exactly to the
    total and report the sum-reduced CE alongside the mean.
    """
    parts = {}
    for head, logits, labels in (("moving", moving_logits, moving_labels),
                                 ("movable", movable_logits, movable_labels)):
        ce = cross_entropy(logits, labels)
        ls = lovasz_softmax(softmax_probs(logits), labels)
        parts[f"{head}_ce"] = ce
        parts[f"{head}_ce_sum"] = cross_entropy_sum(logits, labels)
        parts[f"{head}_ls"] = ls
        parts[head] = ce + ls
    total = parts["moving"] + parts["movable"]
    parts["total"] = total
    return total, parts
