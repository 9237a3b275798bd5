"""Independent brute-force oracles for the test suite.

Everything here is written directly from the defining formulas with plain
Python loops — no vectorization, no reuse of package code — so agreement with
the package implementations is meaningful evidence, not tautology.
"""

import math

import numpy as np

PROB_EPS = 1e-7


def clamp(x: float) -> float:
    return min(max(x, PROB_EPS), 1.0 - PROB_EPS)


def swc_loss_oracle(ps: np.ndarray, pt: np.ndarray, s: int, tau: float) -> float:
    """Gated weighted consistency loss on one (C, D, H, W) instance pair."""
    c_count, dd, hh, ww = ps.shape
    region_losses = []
    for od in range(0, dd, s):
        for oh in range(0, hh, s):
            for ow in range(0, ww, s):
                conf_sum = 0.0
                n_vox = 0
                for d in range(od, od + s):
                    for h in range(oh, oh + s):
                        for w in range(ow, ow + s):
                            m = pt[0, d, h, w]
                            for c in range(1, c_count):
                                if pt[c, d, h, w] > m:
                                    m = pt[c, d, h, w]
                            conf_sum += m
                            n_vox += 1
                if conf_sum / n_vox < tau:
                    continue
                acc = 0.0
                for d in range(od, od + s):
                    for h in range(oh, oh + s):
                        for w in range(ow, ow + s):
                            ci = pt[0, d, h, w]
                            for c in range(1, c_count):
                                if pt[c, d, h, w] > ci:
                                    ci = pt[c, d, h, w]
                            ce = 0.0
                            for c in range(c_count):
                                ce -= pt[c, d, h, w] * math.log(clamp(ps[c, d, h, w]))
                            acc += ci * ce
                region_losses.append(acc / n_vox)
    if not region_losses:
        return 0.0
    return sum(region_losses) / len(region_losses)


def supervised_ce_oracle(ps: np.ndarray, y: np.ndarray) -> float:
    """Mean -log p[label] over voxels; ps is (C, D, H, W), y is (D, H, W)."""
    total = 0.0
    n = 0
    dd, hh, ww = y.shape
    for d in range(dd):
        for h in range(hh):
            for w in range(ww):
                total -= math.log(clamp(ps[int(y[d, h, w]), d, h, w]))
                n += 1
    return total / n


def region_confidence_oracle(pt: np.ndarray, origin, s: int) -> float:
    od, oh, ow = origin
    c_count = pt.shape[0]
    acc = 0.0
    for d in range(od, od + s):
        for h in range(oh, oh + s):
            for w in range(ow, ow + s):
                acc += max(pt[c, d, h, w] for c in range(c_count))
    return acc / (s * s * s)


def ema_closed_form(theta0: np.ndarray, theta_s: np.ndarray, gamma: float, k: int) -> np.ndarray:
    return gamma**k * theta0 + (1.0 - gamma**k) * theta_s


def confusion_oracle(pred: np.ndarray, gt: np.ndarray, c_count: int):
    """Per-class (TP, FP, FN, TN) by direct per-voxel counting."""
    counts = [[0, 0, 0, 0] for _ in range(c_count)]
    for p, g in zip(pred.ravel().tolist(), gt.ravel().tolist()):
        for c in range(c_count):
            if g == c and p == c:
                counts[c][0] += 1
            elif p == c and g != c:
                counts[c][1] += 1
            elif g == c and p != c:
                counts[c][2] += 1
            else:
                counts[c][3] += 1
    return counts


def metrics_oracle(pred: np.ndarray, gt: np.ndarray, c_count: int) -> dict:
    """IoU/Dice/Recall per class plus foreground means and all-voxel accuracy,
    in percent, straight from the count ratios (0/0 -> 1)."""
    counts = confusion_oracle(pred, gt, c_count)

    def ratio(num, den):
        return 1.0 if den == 0 else num / den

    iou = [ratio(tp, tp + fp + fn) for tp, fp, fn, _ in counts]
    dice = [ratio(2 * tp, 2 * tp + fp + fn) for tp, fp, fn, _ in counts]
    recall = [ratio(tp, tp + fn) for tp, fp, fn, _ in counts]
    total = pred.size
    acc = sum(c[0] for c in counts) / total
    fg = range(1, c_count)
    return {
        "iou": [x * 100.0 for x in iou],
        "dice": [x * 100.0 for x in dice],
        "recall": [x * 100.0 for x in recall],
        "mean_iou": float(np.mean([iou[c] for c in fg])) * 100.0,
        "mean_dice": float(np.mean([dice[c] for c in fg])) * 100.0,
        "mean_recall": float(np.mean([recall[c] for c in fg])) * 100.0,
        "accuracy": acc * 100.0,
    }


def wasserstein_mc_oracle(
    p: np.ndarray, q: np.ndarray, centers: np.ndarray, n_draws: int, seed: int
) -> float:
    """Sorted-quantile Monte Carlo estimate of W1 between histograms on shared
    bin centers: draw atoms from each, sort both, average |difference|."""
    rng = np.random.default_rng(seed)
    xs = np.sort(rng.choice(centers, size=n_draws, p=p))
    ys = np.sort(rng.choice(centers, size=n_draws, p=q))
    return float(np.mean(np.abs(xs - ys)))


def histogram_oracle(data: np.ndarray, bins: int, lo: float, hi: float) -> np.ndarray:
    """Per-voxel counting by linear scan over explicit bin edges.

    Bin k covers [edges[k], edges[k+1]), the last bin is closed, out-of-range
    values clip to the edge bins — the textbook uniform-histogram definition.
    """
    edges = np.linspace(lo, hi, bins + 1)
    counts = [0] * bins
    for x in data.ravel().tolist():
        x = min(max(x, lo), hi)
        k = bins - 1
        for j in range(bins):
            if edges[j] <= x < edges[j + 1]:
                k = j
                break
        counts[k] += 1
    return np.array(counts, dtype=np.float64) / data.size


def kde_oracle(samples, bandwidth: float, eval_points) -> list:
    out = []
    norm = 1.0 / (bandwidth * math.sqrt(2.0 * math.pi))
    for x in eval_points:
        acc = 0.0
        for xi in samples:
            acc += math.exp(-0.5 * ((x - xi) / bandwidth) ** 2)
        out.append(norm * acc / len(samples))
    return out


def profile_oracle(data: np.ndarray, axis: int) -> list:
    """Mirror of middle_slice_profile by explicit index loops."""
    dims = data.shape
    others = [a for a in (0, 1, 2) if a != axis]
    mid = dims[others[0]] // 2
    out = []
    for k in range(dims[axis]):
        acc = 0.0
        for j in range(dims[others[1]]):
            index = [0, 0, 0]
            index[axis] = k
            index[others[0]] = mid
            index[others[1]] = j
            acc += float(data[tuple(index)])
        out.append(acc / dims[others[1]])
    return out


def silhouette_oracle(features: np.ndarray, labels) -> float:
    """Mean silhouette via explicit pairwise euclidean distances; 0/0 -> 0."""
    n = len(labels)
    scores = []
    for i in range(n):
        same_d, other_d = [], {}
        for j in range(n):
            if i == j:
                continue
            dist = math.dist(features[i].tolist(), features[j].tolist())
            if labels[j] == labels[i]:
                same_d.append(dist)
            else:
                other_d.setdefault(labels[j], []).append(dist)
        a = sum(same_d) / len(same_d)
        b = min(sum(v) / len(v) for v in other_d.values())
        denom = max(a, b)
        scores.append(0.0 if denom == 0 else (b - a) / denom)
    return sum(scores) / n


def random_prob_field(rng: np.random.Generator, c: int, dims, peaked: float = 1.0) -> np.ndarray:
    """Random (C, D, H, W) probability field; larger `peaked` concentrates mass."""
    logits = rng.normal(0.0, peaked, size=(c, *dims))
    e = np.exp(logits - logits.max(axis=0, keepdims=True))
    return e / e.sum(axis=0, keepdims=True)
