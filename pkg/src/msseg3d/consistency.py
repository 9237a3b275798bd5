"""Consistency objectives between student and teacher probability fields.

The gated loss partitions each volume into non-overlapping cubic regions,
scores each region by the mean teacher confidence (max class probability per
voxel), discards regions below a threshold, and averages a confidence-weighted
soft cross-entropy over the survivors. Gating depends only on the teacher, so
student values inside discarded regions can never influence the loss.
"""

from __future__ import annotations

import torch

PROB_EPS = 1e-7


def _check_fields(ps: torch.Tensor, pt: torch.Tensor, region_size: int | None = None) -> None:
    if ps.shape != pt.shape:
        raise ValueError(f"student/teacher shapes differ: {tuple(ps.shape)} vs {tuple(pt.shape)}")
    if ps.ndim != 5:
        raise ValueError(f"expected (B, C, D, H, W) probability fields, got {tuple(ps.shape)}")
    if region_size is not None:
        if region_size < 1:
            raise ValueError("region_size must be >= 1")
        bad = [d for d in ps.shape[2:] if d % region_size]
        if bad:
            raise ValueError(
                f"spatial dims {tuple(ps.shape[2:])} not divisible by region_size={region_size}"
            )


def tile_regions(dims: tuple[int, int, int], region_size: int) -> list[tuple[int, int, int]]:
    """Origins of the non-overlapping cubic regions tiling a (D, H, W) grid.

    Every voxel belongs to exactly one region. Dims not divisible by
    region_size are rejected; crop or pad upstream instead.
    """
    if region_size < 1:
        raise ValueError("region_size must be >= 1")
    bad = [d for d in dims if d % region_size]
    if bad:
        raise ValueError(
            f"dims {tuple(dims)} not divisible by region_size={region_size}; "
            f"crop or pad the volume upstream"
        )
    s = region_size
    return [
        (d, h, w)
        for d in range(0, dims[0], s)
        for h in range(0, dims[1], s)
        for w in range(0, dims[2], s)
    ]


def region_report(pt: torch.Tensor, region_size: int, confidence_threshold: float) -> list[dict]:
    """Per-region diagnostics for one sample's teacher field (C, D, H, W):
    origin, confidence, retained flag. JSON-serializable; drives the gating
    debug dump.
    """
    if pt.ndim != 4:
        raise ValueError(f"expected a single (C, D, H, W) field, got {tuple(pt.shape)}")
    conf = region_confidence(pt.unsqueeze(0), region_size)[0]
    origins = tile_regions(tuple(pt.shape[1:]), region_size)
    s = region_size
    return [
        {
            "origin": list(o),
            "confidence": float(conf[o[0] // s, o[1] // s, o[2] // s]),
            "retained": bool(conf[o[0] // s, o[1] // s, o[2] // s] >= confidence_threshold),
        }
        for o in origins
    ]


def soft_cross_entropy(ps: torch.Tensor, pt: torch.Tensor) -> torch.Tensor:
    """Per-voxel -sum_c pt_c * log(ps_c), shape (B, D, H, W).

    Student probabilities are clamped to [PROB_EPS, 1 - PROB_EPS] before the
    log, so identical one-hot fields score ~1e-7 rather than exactly zero.
    The teacher is the target: it is detached, so no gradient reaches it.
    """
    _check_fields(ps, pt)
    pt = pt.detach()
    return -(pt * torch.log(ps.clamp(PROB_EPS, 1.0 - PROB_EPS))).sum(dim=1)


def _region_mean(voxelwise: torch.Tensor, s: int) -> torch.Tensor:
    """Blockwise mean over s^3 cubes: (B, D, H, W) -> (B, D/s, H/s, W/s)."""
    b, d, h, w = voxelwise.shape
    blocks = voxelwise.reshape(b, d // s, s, h // s, s, w // s, s)
    return blocks.mean(dim=(2, 4, 6))


def region_confidence(pt: torch.Tensor, region_size: int) -> torch.Tensor:
    """Mean over each region of the teacher's per-voxel max class probability."""
    _check_fields(pt, pt, region_size)
    return _region_mean(pt.max(dim=1).values, region_size)


def gated_consistency_loss(
    ps: torch.Tensor,
    pt: torch.Tensor,
    region_size: int = 4,
    confidence_threshold: float = 0.9,
    return_details: bool = False,
):
    """Region-gated, confidence-weighted consistency loss.

    Regions with mean teacher confidence below confidence_threshold are
    dropped; each surviving region contributes the mean over its voxels of
    (per-voxel teacher confidence) * soft_cross_entropy, and the loss is the
    mean over surviving regions pooled across the batch. An empty surviving
    set yields exactly 0 with zero gradient. Gating and weighting depend only
    on the (detached) teacher, so gradients never flow to it.
    """
    _check_fields(ps, pt, region_size)
    pt = pt.detach()
    confidence = pt.max(dim=1).values                        # (B, D, H, W)
    region_conf = _region_mean(confidence, region_size)      # (B, nD, nH, nW)
    retained = region_conf >= confidence_threshold
    if retained.any():
        region_loss = _region_mean(confidence * soft_cross_entropy(ps, pt), region_size)
        loss = region_loss[retained].mean()
    else:
        loss = ps.sum() * 0.0  # stays on the graph; value and gradient are exactly 0
    if return_details:
        return loss, {"region_confidence": region_conf, "retained": retained}
    return loss


def mse_consistency_loss(ps: torch.Tensor, pt: torch.Tensor) -> torch.Tensor:
    """Plain unweighted consistency: mean squared error over all voxels and classes."""
    _check_fields(ps, pt)
    return ((ps - pt.detach()) ** 2).mean()


def supervised_loss(probs: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Mean voxelwise cross-entropy of predicted probabilities against labels."""
    if probs.ndim != 5 or labels.ndim != 4 or probs.shape[0] != labels.shape[0]:
        raise ValueError(
            f"expected probs (B, C, D, H, W) and labels (B, D, H, W), "
            f"got {tuple(probs.shape)} and {tuple(labels.shape)}"
        )
    if probs.shape[2:] != labels.shape[1:]:
        raise ValueError("probs and labels disagree on spatial dims")
    if labels.numel() and (labels.min() < 0 or labels.max() >= probs.shape[1]):
        raise ValueError(
            f"labels must lie in [0, {probs.shape[1]}), got "
            f"[{int(labels.min())}, {int(labels.max())}]"
        )
    log_p = torch.log(probs.clamp(PROB_EPS, 1.0 - PROB_EPS))
    picked = log_p.gather(1, labels.long().unsqueeze(1)).squeeze(1)
    return -picked.mean()
