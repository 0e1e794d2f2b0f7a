"""Evaluation metrics for the three prediction tasks.

The boundary F-measure is a simplified tolerance-matched stand-in for the
full benchmark machinery: Canny-style thinning, greedy one-to-one matching
within a pixel radius, and a shared threshold sweep. It is meant for
desk-scale comparisons, not benchmark parity.
"""

from __future__ import annotations

import numpy as np

__all__ = ["depth_metrics", "seg_metrics", "f_measure", "nms_thin", "default_tolerance_radius"]

_DEPTH_FLOOR = 1e-12  # predictions are clamped here for ratio/log metrics


def depth_metrics(pred, target, mask=None):
    """Depth-regression errors and threshold accuracies over valid pixels.

    Returns rel, sq_rel, rmse, rmse_log, log10, sc_inv and delta accuracies
    for thresholds 1.25, 1.25^2, 1.25^3 (as fractions in [0, 1]). Ground
    truth must be positive on valid pixels; predictions are clamped to a
    tiny positive floor before ratios and logs.
    """
    d_pred = np.asarray(pred, dtype=np.float64).ravel()
    d_true = np.asarray(target, dtype=np.float64).ravel()
    if mask is not None:
        m = np.asarray(mask).ravel() != 0
        d_pred, d_true = d_pred[m], d_true[m]
    if d_true.size == 0:
        raise ValueError("no valid pixels to evaluate")
    if np.any(d_true <= 0):
        raise ValueError("ground-truth depth must be positive on valid pixels")
    d_pred = np.maximum(d_pred, _DEPTH_FLOOR)

    diff = d_pred - d_true
    log_diff = np.log(d_pred) - np.log(d_true)
    ratio = np.maximum(d_pred / d_true, d_true / d_pred)
    out = {
        "rel": float(np.mean(np.abs(diff) / d_true)),
        "sq_rel": float(np.mean(diff**2 / d_true)),
        "rmse": float(np.sqrt(np.mean(diff**2))),
        "rmse_log": float(np.sqrt(np.mean(log_diff**2))),
        "log10": float(np.mean(np.abs(np.log10(d_pred) - np.log10(d_true)))),
        "sc_inv": float(np.sqrt(max(0.0, np.mean(log_diff**2) - np.mean(log_diff) ** 2))),
    }
    for i, t in enumerate((1.25, 1.25**2, 1.25**3), start=1):
        out[f"delta{i}"] = float(np.mean(ratio < t))
    return out


def seg_metrics(pred_labels, target, num_classes, ignore_label=-1):
    """Pixel accuracy and mean IoU from the confusion matrix.

    The background class participates like any other; classes absent from
    both prediction and ground truth are left out of the IoU mean.
    """
    p = np.asarray(pred_labels).ravel()
    t = np.asarray(target).ravel()
    valid = t != ignore_label
    p, t = p[valid], t[valid]
    if t.size == 0:
        raise ValueError("no valid pixels to evaluate")
    if np.any((p < 0) | (p >= num_classes)) or np.any((t < 0) | (t >= num_classes)):
        raise ValueError(f"labels must lie in [0, {num_classes})")
    conf = np.bincount(t * num_classes + p, minlength=num_classes**2).reshape(num_classes, num_classes)
    tp = np.diag(conf).astype(np.float64)
    union = conf.sum(axis=0) + conf.sum(axis=1) - tp
    present = union > 0
    iou = np.zeros(num_classes)
    iou[present] = tp[present] / union[present]
    return {
        "pixacc": float(tp.sum() / conf.sum()),
        "miou": float(iou[present].mean()) if present.any() else 0.0,
        "per_class_iou": iou,
    }


def default_tolerance_radius(shape):
    h, w = shape[-2:]
    return int(round(0.0075 * float(np.hypot(h, w))))


def nms_thin(prob):
    """Suppress pixels that are not local maxima across the boundary.

    The gradient direction (central differences) is quantized to four bins
    and each pixel is compared against its two neighbours along that
    direction; plateaus (zero gradient) are kept. Out-of-image neighbours
    count as zero.
    """
    p = np.asarray(prob, dtype=np.float64)
    if p.ndim == 3:
        p = p[0]
    gy, gx = np.gradient(p)
    mag = np.hypot(gx, gy)
    theta = np.mod(np.arctan2(gy, gx), np.pi)

    padded = np.pad(p, 1)

    def shifted(dy, dx):
        return padded[1 + dy : 1 + dy + p.shape[0], 1 + dx : 1 + dx + p.shape[1]]

    # direction bin -> the two neighbours along the gradient
    bins = [
        ((0, 1), (0, -1)),  # ~0 deg: horizontal gradient
        ((-1, 1), (1, -1)),  # ~45 deg
        ((-1, 0), (1, 0)),  # ~90 deg: vertical gradient
        ((-1, -1), (1, 1)),  # ~135 deg
    ]
    bin_idx = np.floor((theta + np.pi / 8) / (np.pi / 4)).astype(int) % 4
    keep = np.zeros_like(p, dtype=bool)
    for b, (n1, n2) in enumerate(bins):
        sel = bin_idx == b
        keep |= sel & (p >= shifted(*n1)) & (p >= shifted(*n2))
    keep |= mag == 0.0
    return p * keep


def _greedy_match(pred_bin, gt_bin, radius):
    """One-to-one greedy matching of positives within a Euclidean radius.

    Predictions are scanned in row-major order; each grabs its nearest
    unmatched ground-truth positive (ties to the smaller linear index).
    Returns the number of matched pairs.
    """
    if radius <= 0:
        return int(np.count_nonzero(pred_bin & gt_bin))
    py, px = np.nonzero(pred_bin)
    gy, gx = np.nonzero(gt_bin)
    if py.size == 0 or gy.size == 0:
        return 0
    d2 = (py[:, None] - gy[None, :]) ** 2 + (px[:, None] - gx[None, :]) ** 2
    r2 = float(radius) ** 2
    taken = np.zeros(gy.size, dtype=bool)
    matched = 0
    for i in range(py.size):
        row = np.where(taken, np.inf, d2[i])
        j = int(np.argmin(row))
        if row[j] <= r2:
            taken[j] = True
            matched += 1
    return matched


def _fvalue(matched, n_pred, n_gt):
    if n_gt == 0 and n_pred == 0:
        return 1.0
    if n_gt == 0 or n_pred == 0:
        return 0.0
    precision = matched / n_pred
    recall = matched / n_gt
    if precision + recall == 0:
        return 0.0
    return 2.0 * precision * recall / (precision + recall)


def f_measure(preds, gts, thresholds=None, radius=None, nms=True):
    """Tolerance-matched boundary F-measures over one image or a dataset.

    Returns ODS-lite (best F at a dataset-shared threshold), OIS-lite (mean
    of per-image best F) and AP-lite (area under the swept precision-recall
    polyline), plus the ODS threshold and the raw curve. The tolerance
    radius defaults to round(0.0075 * image diagonal). An empty ground
    truth met by a non-empty prediction scores F = 0.
    """
    if not isinstance(preds, (list, tuple)):
        preds, gts = [preds], [gts]
    preds = [np.asarray(p, dtype=np.float64) for p in preds]
    preds = [p[0] if p.ndim == 3 else p for p in preds]
    gts = [np.asarray(g) for g in gts]
    gts = [(g[0] if g.ndim == 3 else g) > 0.5 for g in gts]
    if thresholds is None:
        thresholds = np.linspace(0.05, 0.95, 19)
    if nms:
        preds = [nms_thin(p) for p in preds]

    per_image_best = np.zeros(len(preds))
    agg_matched = np.zeros(len(thresholds))
    agg_pred = np.zeros(len(thresholds))
    agg_gt = np.zeros(len(thresholds))
    for i, (p, g) in enumerate(zip(preds, gts)):
        r = default_tolerance_radius(p.shape) if radius is None else radius
        n_gt = int(g.sum())
        best = 0.0
        for ti, t in enumerate(thresholds):
            pb = p > t
            matched = _greedy_match(pb, g, r)
            agg_matched[ti] += matched
            agg_pred[ti] += int(pb.sum())
            agg_gt[ti] += n_gt
            best = max(best, _fvalue(matched, int(pb.sum()), n_gt))
        per_image_best[i] = best

    curve = []
    ods, ods_t = 0.0, float(thresholds[0])
    for ti, t in enumerate(thresholds):
        f = _fvalue(agg_matched[ti], agg_pred[ti], agg_gt[ti])
        prec = agg_matched[ti] / agg_pred[ti] if agg_pred[ti] > 0 else 1.0
        rec = agg_matched[ti] / agg_gt[ti] if agg_gt[ti] > 0 else 1.0
        curve.append((float(t), float(prec), float(rec), float(f)))
        if f > ods:
            ods, ods_t = f, float(t)

    by_recall = sorted((r, p) for _, p, r, _ in curve)
    ap = 0.0
    for (r0, p0), (r1, p1) in zip(by_recall[:-1], by_recall[1:]):
        ap += (r1 - r0) * 0.5 * (p0 + p1)
    return {
        "ods": float(ods),
        "ois": float(per_image_best.mean()),
        "ap": float(ap),
        "ods_threshold": ods_t,
        "curve": curve,
    }
