"""Task losses: class-balanced BCE, masked L2 and multi-class cross-entropy.

Each loss is a single tape primitive with an analytic gradient. They accept
one image (channel-major) or a batch; batched balanced BCE sums per-image
terms so each image keeps its own class-balance weight.
"""

from __future__ import annotations

import numpy as np

from . import tensor as tt

__all__ = ["balanced_bce", "l2_loss", "ce_loss", "PROB_CLAMP"]

PROB_CLAMP = 1e-12  # keeps log() finite; documented loss floor ~2.8e-11/px


def balanced_bce(pred_prob, target, hed_beta=False):
    """Class-balanced binary cross-entropy on probabilities.

    loss = -[beta * sum_pos log p + (1 - beta) * sum_neg log(1 - p)] with
    beta = |pos| / (|pos| + |neg|), summed over batch images. Probabilities
    are clamped to [1e-12, 1 - 1e-12]. ``hed_beta`` swaps the two weights,
    i.e. weights the positive term by the negative-class fraction.
    """
    t = np.asarray(target, dtype=np.float64)
    if not np.all((t == 0.0) | (t == 1.0)):
        raise ValueError("balanced_bce target must be binary")
    p = pred_prob.data
    if p.shape != t.shape:
        raise ValueError(f"shape mismatch: pred {p.shape} vs target {t.shape}")

    batched = p.ndim == 4
    p_imgs = p if batched else p[None]
    t_imgs = t if batched else t[None]

    pc = np.clip(p_imgs, PROB_CLAMP, 1.0 - PROB_CLAMP)
    active = (p_imgs > PROB_CLAMP) & (p_imgs < 1.0 - PROB_CLAMP)

    total = 0.0
    grad = np.zeros_like(p_imgs)
    for i in range(p_imgs.shape[0]):
        ti, pi = t_imgs[i], pc[i]
        n_pos = float(ti.sum())
        beta = n_pos / ti.size
        w_pos, w_neg = (1.0 - beta, beta) if hed_beta else (beta, 1.0 - beta)
        total -= w_pos * float((ti * np.log(pi)).sum())
        total -= w_neg * float(((1.0 - ti) * np.log1p(-pi)).sum())
        grad[i] = (-w_pos * ti / pi + w_neg * (1.0 - ti) / (1.0 - pi)) * active[i]
    if not batched:
        grad = grad[0]

    def bwd(g):
        tt._accum(pred_prob, float(g) * grad)

    return tt._node(np.asarray(total), bwd)


def l2_loss(pred, target, mask=None):
    """Mean squared error over valid pixels (mask nonzero, or all pixels)."""
    t = np.asarray(target, dtype=np.float64)
    p = pred.data
    if p.shape != t.shape:
        raise ValueError(f"shape mismatch: pred {p.shape} vs target {t.shape}")
    if mask is None:
        m = np.ones_like(t)
    else:
        m = (np.asarray(mask) != 0).astype(np.float64)
        if m.shape != t.shape:
            raise ValueError(f"mask shape {m.shape} does not match target {t.shape}")
    n = m.sum()
    if n == 0:
        raise ValueError("l2_loss needs at least one valid pixel")
    diff = (p - t) * m
    value = float((diff * diff).sum()) / n

    def bwd(g):
        tt._accum(pred, float(g) * 2.0 * diff / n)

    return tt._node(np.asarray(value), bwd)


def ce_loss(logits, labels, ignore_label=-1):
    """Mean negative log-softmax of the true class over non-ignored pixels.

    logits: (K, H, W) or (B, K, H, W); labels: integer (H, W) or (B, H, W)
    with values in [0, K) or equal to ``ignore_label``.
    """
    lab = np.asarray(labels)
    x = logits.data
    batched = x.ndim == 4
    xb = x if batched else x[None]
    lb = lab if batched else lab[None]
    k = xb.shape[1]
    valid = lb != ignore_label
    if np.any((lb[valid] < 0) | (lb[valid] >= k)):
        raise ValueError(f"labels must lie in [0, {k}) or equal {ignore_label}")
    n = int(valid.sum())
    if n == 0:
        raise ValueError("ce_loss needs at least one non-ignored pixel")

    shifted = xb - xb.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_sm = shifted - log_z

    safe = np.where(valid, lb, 0)
    picked = np.take_along_axis(log_sm, safe[:, None], axis=1)[:, 0]
    value = -float(picked[valid].sum()) / n

    softmax = np.exp(log_sm)
    onehot = np.zeros_like(xb)
    np.put_along_axis(onehot, safe[:, None], 1.0, axis=1)
    grad = (softmax - onehot) * valid[:, None] / n
    if not batched:
        grad = grad[0]

    def bwd(g):
        tt._accum(logits, float(g) * grad)

    return tt._node(np.asarray(value), bwd)


def softmax_probs(logits):
    """Numerically stable per-pixel softmax over the channel axis (numpy only)."""
    x = np.asarray(logits, dtype=np.float64)
    axis = 0 if x.ndim == 3 else 1
    shifted = x - x.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)
