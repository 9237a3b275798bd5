"""Distribution distances between sources and the {main, mixed, other} split.

Each sample is summarized by a normalized intensity histogram on a range
shared across the whole cohort. Unlabeled data is ranked by 1D Wasserstein
distance to the pooled labeled (main) reference: the closest fraction becomes
the "mixed" branch, the remainder the "other" branch.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .volumes import Volume

DEFAULT_BINS = 256
_SUM_TOL = 1e-9


def intensity_histogram(
    data: np.ndarray, bins: int = DEFAULT_BINS, value_range: tuple[float, float] | None = None
) -> np.ndarray:
    """Normalized intensity histogram (sums to 1) over value_range.

    value_range defaults to the data's own min/max; pass a shared range when
    histograms will be compared. Out-of-range voxels are clipped into the
    edge bins so every histogram stays a probability vector.
    """
    if bins < 1:
        raise ValueError("bins must be >= 1")
    flat = np.asarray(data, dtype=np.float64).ravel()
    if flat.size == 0:
        raise ValueError("cannot histogram an empty volume")
    if value_range is None:
        value_range = (float(flat.min()), float(flat.max()))
    lo, hi = value_range
    if not (np.isfinite(lo) and np.isfinite(hi)) or hi < lo:
        raise ValueError(f"invalid value_range {value_range}")
    if hi == lo:  # constant volume: everything lands in one bin
        hi = lo + 1.0
    counts, _ = np.histogram(np.clip(flat, lo, hi), bins=bins, range=(lo, hi))
    return counts.astype(np.float64) / flat.size


def wasserstein_1d(p: np.ndarray, q: np.ndarray, bin_width: float = 1.0) -> float:
    """1D Wasserstein-1 distance between histograms on a shared uniform grid.

    W1 = bin_width * sum_k |CDF_p(k) - CDF_q(k)|. Exact for distributions
    supported on the bin centers.
    """
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape or p.ndim != 1:
        raise ValueError(f"histograms must be 1D and same length, got {p.shape} vs {q.shape}")
    if bin_width <= 0:
        raise ValueError("bin_width must be > 0")
    for name, h in (("p", p), ("q", q)):
        if (h < 0).any():
            raise ValueError(f"histogram {name} has negative mass")
        if abs(h.sum() - 1.0) > _SUM_TOL * max(1, h.size):
            raise ValueError(f"histogram {name} sums to {h.sum():.12f}, expected 1")
    return float(np.abs(np.cumsum(p) - np.cumsum(q)).sum() * bin_width)


@dataclass(frozen=True)
class PartitionResult:
    """The three-subset split, with the full distance ranking for provenance.

    main holds every labeled id; mixed/other partition the unlabeled ids.
    In the default per-sample mode every mixed distance is <= every other
    distance; per-source mode assigns whole sources and may relax that.
    """

    main_ids: tuple[str, ...]
    mixed_ids: tuple[str, ...]
    other_ids: tuple[str, ...]
    sample_distances: dict[str, float]
    source_distances: dict[str, float]
    value_range: tuple[float, float]
    bins: int
    mixed_fraction: float
    per_source: bool

    def branch_of(self, sample_id: str) -> str:
        if sample_id in self.mixed_ids:
            return "mixed"
        if sample_id in self.other_ids:
            return "other"
        if sample_id in self.main_ids:
            return "main"
        raise KeyError(f"unknown sample_id {sample_id!r}")

    def as_dict(self) -> dict:
        return {
            "main": list(self.main_ids),
            "mixed": list(self.mixed_ids),
            "other": list(self.other_ids),
            "distances": dict(self.sample_distances),
            "source_distances": dict(self.source_distances),
            "value_range": list(self.value_range),
            "bins": self.bins,
            "mixed_fraction": self.mixed_fraction,
            "per_source": self.per_source,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PartitionResult":
        return cls(
            main_ids=tuple(d["main"]),
            mixed_ids=tuple(d["mixed"]),
            other_ids=tuple(d["other"]),
            sample_distances=dict(d["distances"]),
            source_distances=dict(d.get("source_distances", {})),
            value_range=tuple(d.get("value_range", (0.0, 1.0))),
            bins=int(d.get("bins", DEFAULT_BINS)),
            mixed_fraction=float(d.get("mixed_fraction", 0.5)),
            per_source=bool(d.get("per_source", False)),
        )


def _pooled_histogram(volumes: list[Volume], bins: int, value_range) -> np.ndarray:
    """Histogram of all voxels of all volumes pooled together."""
    hists = [intensity_histogram(v.data, bins, value_range) for v in volumes]
    sizes = np.array([v.data.size for v in volumes], dtype=np.float64)
    return (np.stack(hists, axis=0) * sizes[:, None]).sum(axis=0) / sizes.sum()


def partition_sources(
    labeled: list[Volume],
    unlabeled: list[Volume],
    mixed_fraction: float = 0.5,
    bins: int = DEFAULT_BINS,
    per_source: bool = False,
) -> PartitionResult:
    """Split unlabeled volumes into mixed (near main) and other (far) branches.

    The reference is the pooled histogram of all labeled volumes; all
    histograms share one global intensity range so distances are comparable.
    ceil(mixed_fraction * len(unlabeled)) samples go to the mixed branch:
    the closest samples when per_source is False, else whole sources in
    ascending pooled-distance order until the quota is reached. Distance
    ties break lexicographically by sample_id (or source_id), so the split
    is deterministic.
    """
    if not labeled:
        raise ValueError("need at least one labeled volume as distance reference")
    if not unlabeled:
        raise ValueError("need at least one unlabeled volume to partition")
    if not 0.0 <= mixed_fraction <= 1.0:
        raise ValueError(f"mixed_fraction must be in [0, 1], got {mixed_fraction}")
    ids = [v.sample_id for v in unlabeled]
    all_ids = [v.sample_id for v in labeled] + ids
    if len(set(all_ids)) != len(all_ids):
        raise ValueError("sample_ids must be unique across labeled and unlabeled volumes")

    everything = labeled + unlabeled
    value_range = (
        float(min(v.data.min() for v in everything)),
        float(max(v.data.max() for v in everything)),
    )
    bin_width = (value_range[1] - value_range[0]) / bins if value_range[1] > value_range[0] else 1.0 / bins
    reference = _pooled_histogram(labeled, bins, value_range)

    sample_distances = {
        v.sample_id: wasserstein_1d(
            intensity_histogram(v.data, bins, value_range), reference, bin_width
        )
        for v in unlabeled
    }
    by_source: dict[str, list[Volume]] = {}
    for v in unlabeled:
        by_source.setdefault(v.source_id, []).append(v)
    source_distances = {
        sid: wasserstein_1d(_pooled_histogram(vols, bins, value_range), reference, bin_width)
        for sid, vols in by_source.items()
    }

    quota = math.ceil(mixed_fraction * len(unlabeled))
    if per_source:
        mixed: list[str] = []
        for sid in sorted(by_source, key=lambda s: (source_distances[s], s)):
            if len(mixed) >= quota:
                break
            mixed.extend(sorted(v.sample_id for v in by_source[sid]))
        mixed_set = set(mixed)
    else:
        ranked = sorted(ids, key=lambda i: (sample_distances[i], i))
        mixed_set = set(ranked[:quota])

    return PartitionResult(
        main_ids=tuple(sorted(v.sample_id for v in labeled)),
        mixed_ids=tuple(sorted(mixed_set)),
        other_ids=tuple(sorted(set(ids) - mixed_set)),
        sample_distances=sample_distances,
        source_distances=source_distances,
        value_range=value_range,
        bins=bins,
        mixed_fraction=mixed_fraction,
        per_source=per_source,
    )
