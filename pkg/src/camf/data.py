"""Subjects, manifests, FC construction and synthetic datasets with planted signal."""

from __future__ import annotations

import json
import logging
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from camf.backbones import DESK_FMRI, DESK_GRID, DESK_ROI_COUNT, DESK_SMRI, BackboneConfig
from camf.errors import ConfigError, DataError, MissingFileError, NonFiniteError, ShapeMismatchError
from camf.io import read_fc, read_nifti, write_fc, write_nifti

log = logging.getLogger(__name__)

HC, SZ = 0, 1
SYNTH_MODES = ("fc_only", "volume_only", "cross_modal")
MANIFEST_VERSION = 1


class ZeroVarianceWarning(UserWarning):
    pass


@dataclass
class SubjectSample:
    subject_id: str
    fc: np.ndarray
    volume: np.ndarray
    label: int

    def __eq__(self, other):
        if not isinstance(other, SubjectSample):
            return NotImplemented
        return (
            self.subject_id == other.subject_id
            and self.label == other.label
            and np.array_equal(self.fc, other.fc)
            and np.array_equal(self.volume, other.volume)
        )


@dataclass
class ManifestEntry:
    subject_id: str
    label: int
    fc_path: str
    volume_path: str


@dataclass
class DatasetManifest:
    entries: list[ManifestEntry]
    grid_shape: tuple[int, int, int]
    roi_count: int
    seed: int | None = None
    metadata: dict = field(default_factory=dict)
    atlas_path: str | None = None
    root: Path | None = field(default=None, compare=False)

    def resolve(self, rel: str) -> Path:
        p = Path(rel)
        return p if p.is_absolute() or self.root is None else self.root / p

    def validate(self, check_files: bool = True) -> None:
        ids = [e.subject_id for e in self.entries]
        dupes = sorted({i for i in ids if ids.count(i) > 1})
        if dupes:
            raise DataError(f"duplicate subject ids: {dupes}")
        for e in self.entries:
            if e.label not in (HC, SZ):
                raise DataError(f"label must be 0 (HC) or 1 (SZ), got {e.label}", e.subject_id)
            if check_files:
                for rel in (e.fc_path, e.volume_path):
                    if not self.resolve(rel).is_file():
                        raise MissingFileError(f"missing file {rel}", e.subject_id)

    def to_json(self) -> str:
        doc = {
            "version": MANIFEST_VERSION,
            "grid_shape": list(self.grid_shape),
            "roi_count": self.roi_count,
            "seed": self.seed,
            "atlas": self.atlas_path,
            "entries": [
                {
                    "subject_id": e.subject_id,
                    "label": e.label,
                    "fc_path": e.fc_path,
                    "volume_path": e.volume_path,
                }
                for e in self.entries
            ],
            "metadata": self.metadata,
        }
        return json.dumps(doc, indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str, root: Path | None = None) -> "DatasetManifest":
        try:
            doc = json.loads(text)
            entries = [
                ManifestEntry(str(e["subject_id"]), int(e["label"]), e["fc_path"], e["volume_path"])
                for e in doc["entries"]
            ]
            grid = tuple(int(s) for s in doc["grid_shape"])
            roi = int(doc["roi_count"])
        except (KeyError, TypeError, ValueError) as exc:
            raise DataError(f"malformed manifest: {exc}") from exc
        if len(grid) != 3:
            raise DataError(f"grid_shape must have 3 entries, got {grid}")
        return cls(entries, grid, roi, doc.get("seed"), doc.get("metadata", {}), doc.get("atlas"), root)

    @classmethod
    def read(cls, path) -> "DatasetManifest":
        path = Path(path)
        if not path.is_file():
            raise MissingFileError(f"manifest not found: {path}")
        return cls.from_json(path.read_text(), root=path.parent)


@dataclass
class AtlasParcellation:
    labels: np.ndarray  # int grid, 0 = background
    region_names: list[str]

    def validate(self, grid_shape=None) -> None:
        k = len(self.region_names)
        bad = (self.labels < 0) | (self.labels > k)
        if bad.any():
            raise DataError(f"atlas labels outside [0, {k}]: {np.unique(self.labels[bad]).tolist()}")
        if grid_shape is not None and tuple(self.labels.shape) != tuple(grid_shape):
            raise ShapeMismatchError(f"atlas grid {self.labels.shape} != volume grid {tuple(grid_shape)}")

    def save(self, path) -> Path:
        path = Path(path)
        write_nifti(path, self.labels, dtype=np.int16)
        path.with_name(path.name + ".json").write_text(
            json.dumps({"region_names": self.region_names}, indent=2) + "\n"
        )
        return path

    @classmethod
    def load(cls, path) -> "AtlasParcellation":
        path = Path(path)
        labels = read_nifti(path, dtype=np.int64)
        side = path.with_name(path.name + ".json")
        if side.is_file():
            names = json.loads(side.read_text())["region_names"]
        else:
            names = [f"region_{k}" for k in range(1, int(labels.max()) + 1)]
        atlas = cls(labels, list(names))
        atlas.validate()
        return atlas


def compute_fc(timeseries) -> np.ndarray:
    """Pearson correlation between ROI columns of a ``T x R`` time-series matrix.

    Zero-variance ROIs get correlation 0 with every other ROI and 1 on the
    diagonal; a ``ZeroVarianceWarning`` lists them.
    """
    ts = np.asarray(timeseries, dtype=np.float64)
    if ts.ndim != 2 or ts.shape[0] < 2 or ts.shape[1] < 2:
        raise ShapeMismatchError(f"time series must be T x R with T, R >= 2, got {ts.shape}")
    if not np.isfinite(ts).all():
        raise NonFiniteError("time series contains non-finite values")
    centered = ts - ts.mean(axis=0)
    norms = np.sqrt((centered**2).sum(axis=0))
    # relative threshold: columns that are constant up to rounding
    scale = np.abs(ts).max(axis=0)
    dead = norms <= 1e-12 * np.maximum(scale, 1.0) * np.sqrt(ts.shape[0])
    if dead.any():
        warnings.warn(
            f"zero-variance ROIs {np.flatnonzero(dead).tolist()} get correlation 0",
            ZeroVarianceWarning,
            stacklevel=2,
        )
    safe = np.where(dead, 1.0, norms)
    z = np.where(dead, 0.0, centered / safe)
    fc = z.T @ z
    fc = np.clip((fc + fc.T) / 2.0, -1.0, 1.0)
    np.fill_diagonal(fc, 1.0)
    return fc


def zscore_fc(fc: np.ndarray) -> np.ndarray:
    """Standardize the off-diagonal entries of one FC matrix (diagonal set to 0)."""
    fc = np.asarray(fc, dtype=np.float64)
    mask = ~np.eye(fc.shape[0], dtype=bool)
    vals = fc[mask]
    sd = vals.std()
    out = np.zeros_like(fc)
    out[mask] = (vals - vals.mean()) / (sd if sd > 0 else 1.0)
    return out.astype(np.float32)


def check_sample(sample: SubjectSample, roi_count: int, grid_shape) -> None:
    sid = sample.subject_id
    if sample.fc.shape != (roi_count, roi_count):
        raise ShapeMismatchError(f"FC shape {sample.fc.shape} != ({roi_count}, {roi_count})", sid)
    if tuple(sample.volume.shape) != tuple(grid_shape):
        raise ShapeMismatchError(f"volume shape {sample.volume.shape} != {tuple(grid_shape)}", sid)
    if not np.isfinite(sample.fc).all():
        raise NonFiniteError("FC contains non-finite values", sid)
    if not np.isfinite(sample.volume).all():
        raise NonFiniteError("volume contains non-finite values", sid)


def load_dataset(manifest_path, workers: int = 1) -> list[SubjectSample]:
    """Load every subject of a manifest, in manifest order."""
    manifest = DatasetManifest.read(manifest_path)
    manifest.validate()

    def load(entry: ManifestEntry) -> SubjectSample:
        try:
            fc = read_fc(manifest.resolve(entry.fc_path))
            vol = read_nifti(manifest.resolve(entry.volume_path))
        except DataError as exc:
            raise type(exc)(str(exc), entry.subject_id) from exc
        sample = SubjectSample(entry.subject_id, fc, vol, entry.label)
        check_sample(sample, manifest.roi_count, manifest.grid_shape)
        return sample

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(load, manifest.entries))
    return [load(e) for e in manifest.entries]


# --------------------------------------------------------------------------
# synthetic data


@dataclass
class SynthConfig:
    n_subjects: int = 200
    grid_shape: tuple[int, int, int] = DESK_GRID
    roi_count: int = DESK_ROI_COUNT
    sz_fraction: float = 0.5
    mode: str = "cross_modal"
    noise: float = 0.5
    seed: int = 0
    timepoints: int = 200
    block_size: int = 8
    sz_factor_bias: float = 0.7
    regions_per_axis: tuple[int, int, int] = (2, 2, 2)
    fmri_backbone: BackboneConfig = DESK_FMRI
    smri_backbone: BackboneConfig = DESK_SMRI

    def validate(self) -> None:
        if self.mode not in SYNTH_MODES:
            raise ConfigError(f"unknown synthetic mode {self.mode!r}; choose from {SYNTH_MODES}")
        if self.n_subjects < 2:
            raise ConfigError("need at least 2 subjects")
        if not 0.0 < self.sz_fraction < 1.0:
            raise ConfigError("sz_fraction must lie in (0, 1)")
        if self.noise < 0:
            raise ConfigError("noise must be nonnegative")
        if len(self.grid_shape) != 3:
            raise ConfigError(f"grid_shape must be 3D, got {self.grid_shape}")
        if not self.smri_backbone.accepts(self.grid_shape):
            raise ConfigError(
                f"grid {tuple(self.grid_shape)} is smaller than the 3D backbone minimum "
                f"{self.smri_backbone.min_input()} per axis"
            )
        if not self.fmri_backbone.accepts((self.roi_count, self.roi_count)):
            raise ConfigError(
                f"roi_count {self.roi_count} is smaller than the 2D backbone minimum "
                f"{self.fmri_backbone.min_input()}"
            )
        if not 2 <= self.block_size <= self.roi_count:
            raise ConfigError("block_size must lie in [2, roi_count]")
        if not 0.5 <= self.sz_factor_bias < 1.0:
            raise ConfigError("sz_factor_bias must lie in [0.5, 1)")
        if self.timepoints < 2:
            raise ConfigError("timepoints must be >= 2")
        if any(self.grid_shape[a] < 2 * self.regions_per_axis[a] for a in range(3)):
            raise ConfigError("grid too small for the requested atlas partition")


@dataclass
class SyntheticDataset:
    samples: list[SubjectSample]
    atlas: AtlasParcellation
    metadata: dict


def _brain_mask(grid) -> np.ndarray:
    axes = [(np.arange(s) - (s - 1) / 2.0) / (s / 2.0) for s in grid]
    x, y, z = np.meshgrid(*axes, indexing="ij")
    return x**2 + y**2 + z**2 <= 1.0


def _box_atlas(grid, per_axis) -> AtlasParcellation:
    brain = _brain_mask(grid)
    idx = [np.minimum(np.arange(s) * k // s, k - 1) for s, k in zip(grid, per_axis)]
    ix, iy, iz = np.meshgrid(*idx, indexing="ij")
    kx, ky, kz = per_axis
    labels = (ix * ky * kz + iy * kz + iz + 1) * brain
    names = [
        f"box_x{a}_y{b}_z{c}" for a in range(kx) for b in range(ky) for c in range(kz)
    ]
    return AtlasParcellation(labels.astype(np.int64), names)


def _region_center(grid, per_axis, region_id) -> np.ndarray:
    r = region_id - 1
    kx, ky, kz = per_axis
    cell = (r // (ky * kz), (r // kz) % ky, r % kz)
    return np.array([(c + 0.5) * s / k - 0.5 for c, s, k in zip(cell, grid, per_axis)])


def _latent_factors(rng, cfg: SynthConfig, labels):
    """Clean +-1 factors (u for FC, w for volume)."""
    n = len(labels)
    sign = np.where(labels == SZ, 1.0, -1.0)
    if cfg.mode == "fc_only":
        u = sign
        w = rng.choice([-1.0, 1.0], size=n)
    elif cfg.mode == "volume_only":
        u = rng.choice([-1.0, 1.0], size=n)
        w = sign
    else:
        # label = [u * w > 0]. SZ subjects have u = w, with both positive w.p.
        # sz_factor_bias; HC subjects have u = -w, signs equiprobable. At bias
        # 0.5 each factor alone is independent of the label.
        pos = np.where(labels == SZ, cfg.sz_factor_bias, 0.5)
        u = np.where(rng.random(n) < pos, 1.0, -1.0)
        w = u * sign
    return u, w


def synthesize(cfg: SynthConfig) -> SyntheticDataset:
    """Build a dataset in memory. Pure function of ``cfg``."""
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    n, R, grid = cfg.n_subjects, cfg.roi_count, tuple(cfg.grid_shape)

    n_sz = int(round(n * cfg.sz_fraction))
    n_sz = min(max(n_sz, 1), n - 1)
    labels = rng.permutation(np.array([SZ] * n_sz + [HC] * (n - n_sz)))
    u, w = _latent_factors(rng, cfg, labels)

    start = int(rng.integers(0, R - cfg.block_size + 1))
    block = np.arange(start, start + cfg.block_size)

    atlas = _box_atlas(grid, cfg.regions_per_axis)
    n_regions = len(atlas.region_names)
    blob_region = int(rng.integers(1, n_regions + 1))
    center = _region_center(grid, cfg.regions_per_axis, blob_region)
    box = np.array(grid) / np.array(cfg.regions_per_axis)
    radius = float(max(1.5, box.min() / 4.0))
    coords = np.stack(np.meshgrid(*[np.arange(s) for s in grid], indexing="ij"), axis=-1)
    blob = (((coords - center) ** 2).sum(-1) <= radius**2) & (atlas.labels == blob_region)
    brain = atlas.labels > 0
    template = 0.5 * brain

    samples = []
    factors = {}
    for i in range(n):
        sid = f"sub-{i:04d}"
        u_obs = u[i] + cfg.noise * rng.standard_normal()
        w_obs = w[i] + cfg.noise * rng.standard_normal()

        strength = float(np.clip(0.4 + 0.25 * u_obs, 0.02, 0.95))
        ts = rng.standard_normal((cfg.timepoints, R))
        shared = rng.standard_normal(cfg.timepoints)
        ts[:, block] = np.sqrt(strength) * shared[:, None] + np.sqrt(1 - strength) * ts[:, block]
        fc = compute_fc(ts).astype(np.float32)

        amp = 1.0 + 0.5 * w_obs
        vol = template + amp * blob
        if cfg.noise > 0:
            vol = vol + cfg.noise * rng.standard_normal(grid) * brain
        samples.append(SubjectSample(sid, fc, vol.astype(np.float32), int(labels[i])))
        factors[sid] = [float(u[i]), float(w[i])]

    metadata = {
        "mode": cfg.mode,
        "noise": cfg.noise,
        "fc_block": block.tolist(),
        "blob_region": blob_region,
        "blob_region_name": atlas.region_names[blob_region - 1],
        "blob_center": center.tolist(),
        "blob_radius": radius,
        "blob_voxels": int(blob.sum()),
        "factors": factors,
        "label_rule": {
            "fc_only": "label = [u > 0]",
            "volume_only": "label = [w > 0]",
            "cross_modal": "label = [u * w > 0]",
        }[cfg.mode],
    }
    return SyntheticDataset(samples, atlas, metadata)


def write_dataset(ds: SyntheticDataset, out_dir, seed=None) -> Path:
    """Write samples, atlas and manifest under ``out_dir``; returns the manifest path."""
    out = Path(out_dir)
    (out / "fc").mkdir(parents=True, exist_ok=True)
    (out / "volumes").mkdir(parents=True, exist_ok=True)
    entries = []
    for s in ds.samples:
        fc_rel = f"fc/{s.subject_id}.fc"
        vol_rel = f"volumes/{s.subject_id}.nii"
        write_fc(out / fc_rel, s.fc)
        write_nifti(out / vol_rel, s.volume)
        entries.append(ManifestEntry(s.subject_id, s.label, fc_rel, vol_rel))
    ds.atlas.save(out / "atlas.nii")
    first = ds.samples[0]
    manifest = DatasetManifest(
        entries,
        tuple(first.volume.shape),
        first.fc.shape[0],
        seed,
        ds.metadata,
        "atlas.nii",
        out,
    )
    path = out / "manifest.json"
    path.write_text(manifest.to_json())
    return path


def generate_synthetic(cfg: SynthConfig, out_dir) -> tuple[DatasetManifest, AtlasParcellation]:
    ds = synthesize(cfg)
    path = write_dataset(ds, out_dir, seed=cfg.seed)
    log.info("wrote %d subjects to %s", len(ds.samples), path)
    return DatasetManifest.read(path), ds.atlas
