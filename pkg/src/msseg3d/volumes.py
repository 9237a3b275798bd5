"""Volume container, the MS3T on-disk format, and the synthetic phantom generator.

A Volume is a 3D float32 intensity grid with an optional integer label grid
and source/sample identity. Phantom volumes contain non-overlapping
ellipsoidal "teeth" on a flat background; per-source acquisition differences
are modelled by a four-parameter intensity transform (offset, scale, noise,
blur), which makes inter-source distribution distances controllable.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

MAGIC = b"MS3T"
FORMAT_VERSION = 1
_FLAG_LABELS = 0x1
_HEADER = struct.Struct("<4sHHIIIH")  # magic, version, flags, D, H, W, class_count

BACKGROUND_INTENSITY = 0.2
TOOTH_PEAK_INTENSITY = 1.0
_PLACEMENT_ATTEMPTS = 200


class VolumeFormatError(Exception):
    """Base class for MS3T serialization errors."""


class BadMagicError(VolumeFormatError):
    pass


class UnsupportedVersionError(VolumeFormatError):
    pass


class TruncatedPayloadError(VolumeFormatError):
    pass


class ShapeMismatchError(VolumeFormatError):
    pass


class PlacementError(RuntimeError):
    """Raised when the requested teeth cannot be placed without overlap."""


@dataclass
class Volume:
    """One 3D sample: intensities, optional voxel labels, and identity.

    data is (D, H, W) float32; labels, when present, is (D, H, W) uint16 with
    values in [0, class_count). meta carries generator provenance and is
    preserved by save/load round-trips.
    """

    data: np.ndarray
    source_id: str = ""
    sample_id: str = ""
    labels: np.ndarray | None = None
    class_count: int = 0
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    meta: dict = field(default_factory=dict)

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(self.data.shape)

    def validate(self) -> None:
        if self.data.ndim != 3:
            raise ValueError(f"data must be 3D, got shape {self.data.shape}")
        if not np.isfinite(self.data).all():
            raise ValueError("data contains NaN or infinity")
        if self.labels is not None:
            if self.labels.shape != self.data.shape:
                raise ValueError(
                    f"label shape {self.labels.shape} != data shape {self.data.shape}"
                )
            if self.class_count < 2:
                raise ValueError("labeled volume needs class_count >= 2")
            if self.labels.min() < 0 or self.labels.max() >= self.class_count:
                raise ValueError(
                    f"labels must lie in [0, {self.class_count}), "
                    f"got range [{self.labels.min()}, {self.labels.max()}]"
                )


@dataclass(frozen=True)
class SourceTransform:
    """Per-source intensity transform: out = blur(data * scale + offset) + noise."""

    intensity_offset: float = 0.0
    intensity_scale: float = 1.0
    noise_stddev: float = 0.0
    blur_radius: float = 0.0

    def __post_init__(self):
        if self.intensity_scale <= 0:
            raise ValueError("intensity_scale must be > 0")
        if self.noise_stddev < 0:
            raise ValueError("noise_stddev must be >= 0")
        if self.blur_radius < 0:
            raise ValueError("blur_radius must be >= 0")


@dataclass(frozen=True)
class PhantomSpec:
    """Recipe for one synthetic source. Identical spec + seed => identical bytes."""

    source_id: str = "source"
    num_teeth: int = 3
    class_count: int = 2
    volume_dims: tuple[int, int, int] = (32, 32, 32)
    transform: SourceTransform = field(default_factory=SourceTransform)
    rng_seed: int = 0

    def __post_init__(self):
        if self.num_teeth < 1:
            raise ValueError("num_teeth must be >= 1")
        if self.class_count < 2:
            raise ValueError("class_count must be >= 2 (background + teeth)")
        if len(self.volume_dims) != 3 or any(d < 4 for d in self.volume_dims):
            raise ValueError(f"volume_dims must be 3 axes of >= 4 voxels, got {self.volume_dims}")


def _place_teeth(spec: PhantomSpec, rng: np.random.Generator) -> list[dict]:
    """Sample non-overlapping axis-aligned ellipsoids (center, radii, class)."""
    dims = np.asarray(spec.volume_dims, dtype=float)
    placed: list[dict] = []
    for k in range(spec.num_teeth):
        for _ in range(_PLACEMENT_ATTEMPTS):
            radii = rng.uniform(0.10, 0.16, size=3) * dims
            lo = radii + 1.0
            hi = dims - radii - 1.0
            if np.any(hi <= lo):
                continue
            center = rng.uniform(lo, hi)
            # conservative overlap test via bounding spheres
            r = float(radii.max())
            ok = all(
                np.linalg.norm(center - p["center"]) > 1.05 * (r + max(p["radii"]))
                for p in placed
            )
            if ok:
                placed.append(
                    {
                        "center": center.tolist(),
                        "radii": radii.tolist(),
                        "class_id": 1 + k % (spec.class_count - 1),
                    }
                )
                break
        else:
            raise PlacementError(
                f"could not place tooth {k + 1}/{spec.num_teeth} without overlap in "
                f"volume_dims={spec.volume_dims} (source_id={spec.source_id!r}); "
                f"reduce num_teeth or enlarge the volume"
            )
    return placed


def _render_sample(spec: PhantomSpec, rng: np.random.Generator, labeled: bool):
    """Render one phantom: base geometry, then the per-source transform."""
    dims = spec.volume_dims
    data = np.full(dims, BACKGROUND_INTENSITY, dtype=np.float64)
    labels = np.zeros(dims, dtype=np.uint16) if labeled else None
    teeth = _place_teeth(spec, rng)

    amplitude = TOOTH_PEAK_INTENSITY - BACKGROUND_INTENSITY
    for tooth in teeth:
        center = np.asarray(tooth["center"])
        radii = np.asarray(tooth["radii"])
        lo = np.maximum(np.floor(center - radii).astype(int), 0)
        hi = np.minimum(np.ceil(center + radii).astype(int) + 1, dims)
        grids = np.ogrid[lo[0]:hi[0], lo[1]:hi[1], lo[2]:hi[2]]
        rho2 = sum(((g - c) / r) ** 2 for g, c, r in zip(grids, center, radii))
        inside = rho2 <= 1.0
        box = data[lo[0]:hi[0], lo[1]:hi[1], lo[2]:hi[2]]
        box[inside] += amplitude * (1.0 - rho2[inside])
        if labels is not None:
            labels[lo[0]:hi[0], lo[1]:hi[1], lo[2]:hi[2]][inside] = tooth["class_id"]

    t = spec.transform
    data = data * t.intensity_scale + t.intensity_offset
    if t.blur_radius > 0:
        data = gaussian_filter(data, sigma=t.blur_radius, mode="nearest")
    if t.noise_stddev > 0:
        data = data + rng.normal(0.0, t.noise_stddev, size=dims)
    return data.astype(np.float32), labels, teeth


def generate_source(spec: PhantomSpec, n_samples: int, labeled: bool) -> list[Volume]:
    """Generate n_samples phantom volumes for one source.

    Each sample uses an independent RNG stream derived from
    (spec.rng_seed, sample index), so inserting or removing samples does not
    perturb the others and repeated calls are byte-identical.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    spec_dict = asdict(spec)
    spec_dict["volume_dims"] = list(spec.volume_dims)  # JSON-canonical for sidecar round-trips
    volumes = []
    for k in range(n_samples):
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence((spec.rng_seed, k))))
        data, labels, teeth = _render_sample(spec, rng, labeled)
        volumes.append(
            Volume(
                data=data,
                labels=labels,
                class_count=spec.class_count if labeled else 0,
                source_id=spec.source_id,
                sample_id=f"{spec.source_id}-{k:03d}",
                meta={
                    "generator": {
                        "spec": spec_dict,
                        "sample_index": k,
                        "teeth": teeth,
                    }
                },
            )
        )
    return volumes


def _sidecar_path(path: Path) -> Path:
    return path.with_suffix(".meta.json")


def save_volume(volume: Volume, path: str | Path) -> None:
    """Write a volume as MS3T binary plus a `<name>.meta.json` sidecar.

    Layout: magic "MS3T", version u16, flags u16 (bit0 = labels present),
    D/H/W u32, class_count u16, raw little-endian float32 data, then raw
    little-endian u16 labels when present. Round-trips are bit-exact.
    """
    path = Path(path)
    volume.validate()
    d, h, w = volume.data.shape
    flags = _FLAG_LABELS if volume.labels is not None else 0
    blob = _HEADER.pack(MAGIC, FORMAT_VERSION, flags, d, h, w, volume.class_count)
    blob += np.ascontiguousarray(volume.data, dtype="<f4").tobytes()
    if volume.labels is not None:
        if volume.labels.shape != volume.data.shape:
            raise ShapeMismatchError(
                f"label shape {volume.labels.shape} != data shape {volume.data.shape}"
            )
        blob += np.ascontiguousarray(volume.labels, dtype="<u2").tobytes()
    path.write_bytes(blob)
    sidecar = {
        "source_id": volume.source_id,
        "sample_id": volume.sample_id,
        "spacing": list(volume.spacing),
        "meta": volume.meta,
    }
    _sidecar_path(path).write_text(json.dumps(sidecar, sort_keys=True, indent=1))


def load_volume(path: str | Path) -> Volume:
    """Read an MS3T volume; the inverse of save_volume."""
    path = Path(path)
    blob = path.read_bytes()
    if len(blob) < 4 or blob[:4] != MAGIC:
        raise BadMagicError(f"{path}: not an MS3T file (magic {blob[:4]!r})")
    if len(blob) < _HEADER.size:
        raise TruncatedPayloadError(f"{path}: header truncated at {len(blob)} bytes")
    _, version, flags, d, h, w, class_count = _HEADER.unpack_from(blob)
    if version != FORMAT_VERSION:
        raise UnsupportedVersionError(f"{path}: version {version}, expected {FORMAT_VERSION}")
    n = d * h * w
    has_labels = bool(flags & _FLAG_LABELS)
    expected = _HEADER.size + 4 * n + (2 * n if has_labels else 0)
    if len(blob) < expected:
        raise TruncatedPayloadError(
            f"{path}: payload is {len(blob)} bytes, header declares {expected}"
        )
    if len(blob) > expected:
        raise ShapeMismatchError(
            f"{path}: {len(blob) - expected} trailing bytes beyond declared {d}x{h}x{w} payload"
        )
    offset = _HEADER.size
    data = np.frombuffer(blob, dtype="<f4", count=n, offset=offset).reshape(d, h, w).copy()
    labels = None
    if has_labels:
        offset += 4 * n
        labels = np.frombuffer(blob, dtype="<u2", count=n, offset=offset).reshape(d, h, w).copy()

    source_id, sample_id, spacing, meta = "", "", (1.0, 1.0, 1.0), {}
    sidecar = _sidecar_path(path)
    if sidecar.exists():
        info = json.loads(sidecar.read_text())
        source_id = info.get("source_id", "")
        sample_id = info.get("sample_id", "")
        spacing = tuple(info.get("spacing", [1.0, 1.0, 1.0]))
        meta = info.get("meta", {})
    return Volume(
        data=data,
        labels=labels,
        class_count=class_count,
        source_id=source_id,
        sample_id=sample_id,
        spacing=spacing,
        meta=meta,
    )
