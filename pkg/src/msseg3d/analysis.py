"""Source-gap diagnostics: intensity KDE curves, middle-slice profiles, 2D
feature embeddings, and a silhouette-based source-separability score.

The separability score is the quantitative proxy for "sources become less
distinguishable after training": lower silhouette = smaller gap.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.spatial.distance import cdist

from .volumes import Volume


def kde_curve(samples, bandwidth: float, eval_points) -> np.ndarray:
    """Gaussian kernel density estimate at each evaluation point.

    f(x) = mean_i N(x; samples[i], bandwidth^2). A single sample evaluated at
    itself gives the kernel peak 1/(bandwidth*sqrt(2*pi)).
    """
    samples = np.asarray(samples, dtype=np.float64).ravel()
    eval_points = np.asarray(eval_points, dtype=np.float64).ravel()
    if samples.size == 0:
        raise ValueError("kde_curve needs at least one sample")
    if bandwidth <= 0:
        raise ValueError("bandwidth must be > 0")
    z = (eval_points[:, None] - samples[None, :]) / bandwidth
    dens = np.exp(-0.5 * z**2).mean(axis=1) / (bandwidth * math.sqrt(2.0 * math.pi))
    return dens


def middle_slice_profile(volume: Volume | np.ndarray, axis: int = 0) -> np.ndarray:
    """1D intensity profile along `axis` of the volume's central slice.

    The central slice fixes the first non-chosen axis at its middle index;
    the profile value at position k is the mean over the remaining axis of
    that slice's intensities. Length equals the volume's extent along `axis`.
    """
    data = volume.data if isinstance(volume, Volume) else np.asarray(volume)
    if data.ndim != 3:
        raise ValueError(f"expected a 3D volume, got shape {data.shape}")
    if axis not in (0, 1, 2):
        raise ValueError(f"axis must be 0, 1, or 2, got {axis}")
    others = [a for a in (0, 1, 2) if a != axis]
    sliced = np.take(data, data.shape[others[0]] // 2, axis=others[0])
    remaining = [a for a in (0, 1, 2) if a != others[0]]
    return sliced.mean(axis=1 - remaining.index(axis)).astype(np.float64)


def _deterministic_pca(x: np.ndarray) -> np.ndarray:
    centered = x - x.mean(axis=0)
    _, _, vt = np.linalg.svd(centered, full_matrices=False)
    comps = vt[:2]
    if comps.shape[0] < 2:  # 1-dimensional inputs: pad the second coordinate
        comps = np.vstack([comps, np.zeros((2 - comps.shape[0], x.shape[1]))])
    # fix SVD sign ambiguity: orient each axis by its largest-magnitude loading
    for row in comps:
        pivot = np.argmax(np.abs(row))
        if row[pivot] < 0:
            row *= -1
    return centered @ comps.T


def embed_features(features, method: str = "pca", seed: int = 0) -> np.ndarray:
    """Project feature vectors to 2D points, one per input, deterministically.

    method='pca' is exact and seed-free; method='tsne' uses a fixed
    random_state and a perplexity adapted to the sample count.
    """
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError(f"features must be a 2D array of equal-length vectors, got {x.shape}")
    if x.shape[0] < 2:
        raise ValueError("need at least 2 feature vectors")
    if method == "pca":
        return _deterministic_pca(x)
    if method == "tsne":
        from sklearn.manifold import TSNE

        perplexity = min(30.0, max(1.0, (x.shape[0] - 1) / 3.0))
        tsne = TSNE(
            n_components=2, random_state=seed, perplexity=perplexity, init="pca",
        )
        return tsne.fit_transform(x).astype(np.float64)
    raise ValueError(f"unknown embedding method {method!r}")


def source_separability(features, source_labels) -> float:
    """Mean silhouette coefficient of the features under source labels.

    In [-1, 1]; lower means the sources are harder to tell apart. The
    degenerate 0/0 case (all relevant distances zero, e.g. identical
    features) is defined as 0 per sample.
    """
    x = np.asarray(features, dtype=np.float64)
    labels = np.asarray(source_labels)
    if x.ndim != 2 or x.shape[0] != labels.shape[0]:
        raise ValueError("features and source_labels must align on the first axis")
    uniques, counts = np.unique(labels, return_counts=True)
    if uniques.size < 2 or counts.min() < 2:
        raise ValueError("source_separability needs >= 2 sources with >= 2 samples each")
    dists = cdist(x, x)
    scores = np.zeros(x.shape[0])
    for i in range(x.shape[0]):
        same = labels == labels[i]
        a = dists[i, same].sum() / (same.sum() - 1)  # excludes self (distance 0)
        b = min(dists[i, labels == u].mean() for u in uniques if u != labels[i])
        denom = max(a, b)
        scores[i] = 0.0 if denom == 0.0 else (b - a) / denom
    return float(scores.mean())


def dataset_report(volumes: list[Volume], bandwidth: float, points: int = 200) -> dict:
    """Per-source KDE curves and middle-slice profiles for a volume set."""
    if not volumes:
        raise ValueError("no volumes to analyze")
    by_source: dict[str, list[Volume]] = {}
    for v in volumes:
        by_source.setdefault(v.source_id or "unknown", []).append(v)
    lo = min(float(v.data.min()) for v in volumes)
    hi = max(float(v.data.max()) for v in volumes)
    grid = np.linspace(lo, hi, points)
    report: dict = {"eval_points": grid.tolist(), "sources": {}}
    for sid in sorted(by_source):
        vols = by_source[sid]
        pooled = np.concatenate([v.data.ravel() for v in vols])
        # subsample deterministically; full voxel sets make KDE quadratic cost
        stride = max(1, pooled.size // 20000)
        report["sources"][sid] = {
            "n_volumes": len(vols),
            "kde": kde_curve(pooled[::stride], bandwidth, grid).tolist(),
            "profile": np.mean(
                [middle_slice_profile(v, axis=0) for v in vols], axis=0
            ).tolist(),
        }
    return report


def write_figures(report: dict, embedding: dict | None, out_dir) -> list[str]:
    """Render the JSON report into PNG figures; returns the file names."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    from pathlib import Path

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []

    grid = report["eval_points"]
    fig, ax = plt.subplots(figsize=(6, 4))
    for sid, info in sorted(report["sources"].items()):
        ax.plot(grid, info["kde"], label=sid)
    ax.set_xlabel("intensity")
    ax.set_ylabel("density")
    ax.legend()
    fig.savefig(out_dir / "kde_curves.png", dpi=110)
    plt.close(fig)
    written.append("kde_curves.png")

    fig, ax = plt.subplots(figsize=(6, 4))
    for sid, info in sorted(report["sources"].items()):
        ax.plot(info["profile"], label=sid)
    ax.set_xlabel("axis position")
    ax.set_ylabel("mean slice intensity")
    ax.legend()
    fig.savefig(out_dir / "slice_profiles.png", dpi=110)
    plt.close(fig)
    written.append("slice_profiles.png")

    if embedding is not None:
        fig, axes = plt.subplots(1, len(embedding), figsize=(5 * len(embedding), 4))
        axes = np.atleast_1d(axes)
        for ax, (title, emb) in zip(axes, sorted(embedding.items())):
            points = np.asarray(emb["points"])
            labels = np.asarray(emb["source_labels"])
            for sid in sorted(set(labels)):
                sel = labels == sid
                ax.scatter(points[sel, 0], points[sel, 1], label=sid, s=18)
            ax.set_title(f"{title} (silhouette {emb['silhouette']:.3f})")
            ax.legend()
        fig.savefig(out_dir / "feature_embedding.png", dpi=110)
        plt.close(fig)
        written.append("feature_embedding.png")
    return written
