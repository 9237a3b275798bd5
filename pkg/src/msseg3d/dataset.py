"""Cohort assembly, dataset directory layout, and deterministic batching.

A cohort is built per DataConfig: every source contributes n_train training
samples plus test_per_source held-out test samples. Training samples keep
labels only for labeled sources; test samples are always labeled because they
exist to be scored. On disk a dataset is train/ and test/ directories of MS3T
files plus a manifest.json listing every sample.

Batching is stateless: the batches of (epoch, step) are a pure function of
the seed and pool sizes, so resuming from a checkpoint replays the exact
schedule an uninterrupted run would have used.
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import DataConfig
from .volumes import Volume, generate_source, load_volume, save_volume


@dataclass
class Cohort:
    labeled: list[Volume]
    unlabeled: list[Volume]
    test: list[Volume]

    def by_id(self) -> dict[str, Volume]:
        return {v.sample_id: v for v in self.labeled + self.unlabeled + self.test}


def _strip_labels(v: Volume) -> Volume:
    return dataclasses.replace(v, labels=None, class_count=0)


def build_cohort(data: DataConfig) -> Cohort:
    """Generate the full multi-source cohort in memory."""
    if not data.sources:
        raise ValueError("data config lists no sources")
    labeled: list[Volume] = []
    unlabeled: list[Volume] = []
    test: list[Volume] = []
    for source in data.sources:
        total = source.n_train + data.test_per_source
        if total == 0:
            continue
        volumes = generate_source(data.phantom_spec(source), total, labeled=True)
        train, held_out = volumes[: source.n_train], volumes[source.n_train:]
        if source.labeled:
            labeled.extend(train)
        else:
            unlabeled.extend(_strip_labels(v) for v in train)
        test.extend(held_out)
    return Cohort(labeled=labeled, unlabeled=unlabeled, test=test)


def write_dataset(data: DataConfig, out_dir: str | Path) -> dict:
    """Materialize the cohort under out_dir and return the manifest."""
    out_dir = Path(out_dir)
    cohort = build_cohort(data)
    entries = {"train": [], "test": []}
    for split, volumes in (("train", cohort.labeled + cohort.unlabeled), ("test", cohort.test)):
        split_dir = out_dir / split
        split_dir.mkdir(parents=True, exist_ok=True)
        for v in sorted(volumes, key=lambda v: v.sample_id):
            rel = f"{split}/{v.sample_id}.ms3t"
            save_volume(v, out_dir / rel)
            entries[split].append(
                {
                    "sample_id": v.sample_id,
                    "source_id": v.source_id,
                    "labeled": v.labels is not None,
                    "path": rel,
                }
            )
    manifest = {
        "format": "msseg3d-dataset",
        "volume_dims": list(data.volume_dims),
        "class_count": data.class_count,
        "seed": data.seed,
        "sources": [
            {
                "source_id": s.source_id,
                "n_train": s.n_train,
                "labeled": s.labeled,
                "transform": dataclasses.asdict(s.transform),
            }
            for s in data.sources
        ],
        "train": entries["train"],
        "test": entries["test"],
    }
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return manifest


def load_manifest(dataset_dir: str | Path) -> dict:
    path = Path(dataset_dir) / "manifest.json"
    if not path.exists():
        raise FileNotFoundError(f"no manifest.json in {dataset_dir}")
    return json.loads(path.read_text())


def load_dataset(dataset_dir: str | Path) -> Cohort:
    """Load a materialized dataset back into a Cohort."""
    dataset_dir = Path(dataset_dir)
    manifest = load_manifest(dataset_dir)
    labeled, unlabeled, test = [], [], []
    for entry in manifest["train"]:
        v = load_volume(dataset_dir / entry["path"])
        (labeled if entry["labeled"] else unlabeled).append(v)
    for entry in manifest["test"]:
        test.append(load_volume(dataset_dir / entry["path"]))
    return Cohort(labeled=labeled, unlabeled=unlabeled, test=test)


def _stream_rng(seed: int, tag: str, epoch: int) -> np.random.Generator:
    # string tags keep the labeled/mixed/other streams statistically independent
    material = (seed, epoch) + tuple(ord(c) for c in tag)
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(material)))


class BatchSchedule:
    """Pure-function batch plan over the three pools.

    One epoch is ceil(n_labeled / batch_size) steps. The labeled pool is
    shuffled once per epoch and consumed in order; unlabeled pools are
    resampled by concatenating fresh permutations until the epoch's demand is
    met, so every step sees full-size mixed/other batches.
    """

    def __init__(self, seed: int, n_labeled: int, n_mixed: int, n_other: int, batch_size: int):
        if n_labeled < 1:
            raise ValueError("training requires at least one labeled sample")
        if batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        self.seed = seed
        self.sizes = {"labeled": n_labeled, "mixed": n_mixed, "other": n_other}
        self.batch_size = batch_size
        self.steps_per_epoch = math.ceil(n_labeled / batch_size)
        self._cache: dict[tuple[str, int], np.ndarray] = {}

    def _epoch_stream(self, tag: str, epoch: int) -> np.ndarray:
        key = (tag, epoch)
        if key not in self._cache:
            n = self.sizes[tag]
            rng = _stream_rng(self.seed, tag, epoch)
            if tag == "labeled":
                stream = rng.permutation(n)
            else:
                need = self.steps_per_epoch * self.batch_size
                reps = [rng.permutation(n) for _ in range(math.ceil(need / n))]
                stream = np.concatenate(reps)[:need]
            self._cache = {k: v for k, v in self._cache.items() if k[1] == epoch}
            self._cache[key] = stream
        return self._cache[key]

    def batches(self, global_step: int) -> dict[str, np.ndarray]:
        """Index batches for the three pools at a global step."""
        epoch, t = divmod(global_step, self.steps_per_epoch)
        lo, hi = t * self.batch_size, (t + 1) * self.batch_size
        out = {"labeled": self._epoch_stream("labeled", epoch)[lo:hi]}
        for tag in ("mixed", "other"):
            out[tag] = (
                self._epoch_stream(tag, epoch)[lo:hi]
                if self.sizes[tag] > 0
                else np.empty(0, dtype=np.int64)
            )
        return out
