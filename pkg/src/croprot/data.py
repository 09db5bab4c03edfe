"""Pixel-set dataset format, synthetic multi-year generator, spatial folds.

The generator produces multi-year parcels whose labels follow a Markov
rotation kernel with three behaviours (permanent, cyclic, near-uniform)
and whose pixel values follow per-class double-logistic phenology curves
plus a per-year global shift and i.i.d. noise.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, asdict

import numpy as np

from .errors import ConfigError, ContractError, DataFormatError

MAGIC = b"RCDS"
FORMAT_VERSION = 1


@dataclass
class PixelSetSample:
    """One parcel-year time series: pixels is (C, N_p, T) float32."""

    parcel_id: int
    year_index: int  # 1-based
    pixels: np.ndarray
    days: np.ndarray  # (T,) day-of-year, strictly increasing
    label: int

    def validate(self):
        if self.pixels.ndim != 3:
            raise ContractError("pixels must be (C, N_p, T)")
        c, n_p, t = self.pixels.shape
        if n_p < 1:
            raise ContractError("parcel with no pixels")
        days = np.asarray(self.days)
        if days.shape != (t,):
            raise ContractError("days length must match T")
        if np.any(days < 1) or np.any(days > 366):
            raise ContractError("days must lie in [1, 366]")
        if np.any(np.diff(days) <= 0):
            raise ContractError("days must be strictly increasing")

    @property
    def n_pixels(self):
        return self.pixels.shape[1]


@dataclass
class MultiYearParcel:
    parcel_id: int
    centroid: tuple  # (x, y) in meters
    samples: list  # one PixelSetSample per year, year_index 1..I

    @property
    def labels(self):
        return [s.label for s in self.samples]


@dataclass
class Dataset:
    parcels: list
    num_classes: int
    manifest: dict | None = None

    @property
    def num_years(self):
        return len(self.parcels[0].samples) if self.parcels else 0

    @property
    def num_channels(self):
        return self.parcels[0].samples[0].pixels.shape[0] if self.parcels else 0


@dataclass
class FoldAssignment:
    k: int
    folds: dict  # parcel_id -> fold index
    block_size: float

    def members(self, fold):
        return [pid for pid, f in self.folds.items() if f == fold]


# ---------------------------------------------------------------------------
# synthetic generation


@dataclass
class SyntheticConfig:
    num_classes: int = 8
    num_years: int = 3
    channels: int = 4
    timesteps: int = 12
    parcels: int = 500
    pixels_min: int = 4
    pixels_max: int = 16
    noise_std: float = 0.1
    year_shift: float = 0.15
    area_size: float = 10000.0  # side of the square region, meters
    permanent_classes: tuple = (0, 1)
    permanent_stay: float = 0.97
    cycles: tuple = ((2, 3, 4),)
    cycle_follow: float = 0.9
    other_within: float = 0.95
    curve_groups: tuple = ()  # groups of classes sharing a phenology curve
    seed: int = 0

    def validate(self):
        if self.num_classes < 2:
            raise ConfigError("need at least 2 classes")
        if self.timesteps < 4:
            raise ConfigError("need at least 4 timesteps")
        for p in (self.permanent_stay, self.cycle_follow, self.other_within):
            if not 0.0 <= p <= 1.0:
                raise ConfigError(f"probability {p} outside [0, 1]")
        cyclic = [c for cycle in self.cycles for c in cycle]
        if len(set(cyclic)) != len(cyclic):
            raise ConfigError("classes may appear in one cycle only")
        special = set(self.permanent_classes) | set(cyclic)
        if set(self.permanent_classes) & set(cyclic):
            raise ConfigError("permanent and cyclic classes overlap")
        for c in special:
            if not 0 <= c < self.num_classes:
                raise ConfigError(f"class index {c} out of range")

    def transition_matrix(self):
        """First-order rotation kernel as an (L, L) row-stochastic matrix."""
        self.validate()
        L = self.num_classes
        cyclic_next = {}
        for cycle in self.cycles:
            for j, c in enumerate(cycle):
                cyclic_next[c] = cycle[(j + 1) % len(cycle)]
        other = [
            c
            for c in range(L)
            if c not in self.permanent_classes and c not in cyclic_next
        ]
        m = np.zeros((L, L))
        for a in range(L):
            if a in self.permanent_classes:
                rest = (1.0 - self.permanent_stay) / (L - 1)
                m[a, :] = rest
                m[a, a] = self.permanent_stay
            elif a in cyclic_next:
                rest = (1.0 - self.cycle_follow) / (L - 1)
                m[a, :] = rest
                m[a, cyclic_next[a]] = self.cycle_follow
            else:
                m[a, :] = (1.0 - self.other_within) / L
                if other:
                    m[a, other] += self.other_within / len(other)
                else:
                    m[a, :] += self.other_within / L
        return m

    def phenology_curves(self):
        """(L, C, 6) double-logistic parameters: base, amplitude, start,
        end, rise slope, fall slope.  Classes in a shared curve group reuse
        the first member's parameters."""
        rng = np.random.default_rng(np.random.SeedSequence([self.seed, 0xC0FFEE]))
        L, C = self.num_classes, self.channels
        params = np.empty((L, C, 6))
        params[:, :, 0] = rng.uniform(0.1, 0.4, (L, C))
        params[:, :, 1] = rng.uniform(0.5, 1.5, (L, C))
        params[:, :, 2] = rng.uniform(60, 180, (L, C))
        params[:, :, 3] = params[:, :, 2] + rng.uniform(60, 150, (L, C))
        params[:, :, 4] = rng.uniform(0.05, 0.2, (L, C))
        params[:, :, 5] = rng.uniform(0.05, 0.2, (L, C))
        for group in self.curve_groups:
            for c in group[1:]:
                params[c] = params[group[0]]
        return params


def double_logistic(params, days):
    """Evaluate curves for one class: params (C, 6), days (T,) -> (C, T)."""
    days = np.asarray(days, dtype=np.float64)[None, :]
    base = params[:, 0:1]
    amp = params[:, 1:2]
    start = params[:, 2:3]
    end = params[:, 3:4]
    s1 = params[:, 4:5]
    s2 = params[:, 5:6]
    rise = 1.0 / (1.0 + np.exp(-s1 * (days - start)))
    fall = 1.0 / (1.0 + np.exp(-s2 * (days - end)))
    return base + amp * (rise - fall)


def _acquisition_days(timesteps, rng):
    days = np.linspace(15, 350, timesteps) + rng.uniform(-4, 4, timesteps)
    days = np.round(days).astype(np.int64)
    for i in range(1, timesteps):
        days[i] = max(days[i], days[i - 1] + 1)
    return np.clip(days, 1, 366)


def generate_synthetic(config: SyntheticConfig):
    """Deterministic synthetic dataset following the configured rotation
    kernel and phenology curves."""
    config.validate()
    rng = np.random.default_rng(np.random.PCG64(config.seed))
    kernel = config.transition_matrix()
    curves = config.phenology_curves()
    L, I, C = config.num_classes, config.num_years, config.channels
    # per-year global covariate shift, one offset per channel
    shift = config.year_shift * rng.uniform(-1, 1, (I, C))
    parcels = []
    for pid in range(config.parcels):
        centroid = tuple(rng.uniform(0, config.area_size, 2))
        labels = [int(rng.integers(L))]
        for _ in range(1, I):
            labels.append(int(rng.choice(L, p=kernel[labels[-1]])))
        samples = []
        for i in range(I):
            n_p = int(rng.integers(config.pixels_min, config.pixels_max + 1))
            days = _acquisition_days(config.timesteps, rng)
            clean = double_logistic(curves[labels[i]], days)  # (C, T)
            pix = clean[:, None, :] + shift[i][:, None, None]
            pix = pix + rng.normal(0, config.noise_std, (C, n_p, len(days)))
            samples.append(
                PixelSetSample(
                    parcel_id=pid,
                    year_index=i + 1,
                    pixels=pix.astype(np.float32),
                    days=days,
                    label=labels[i],
                )
            )
        parcels.append(MultiYearParcel(pid, centroid, samples))
    return parcels


def sample_pixels(sample: PixelSetSample, s: int, rng) -> np.ndarray:
    """Draw S pixel columns, shared across all dates; with replacement only
    when the parcel has fewer than S pixels.  Returns (C, S, T)."""
    if s < 1:
        raise ContractError("need at least one sampled pixel")
    n_p = sample.n_pixels
    if n_p >= s:
        idx = rng.choice(n_p, size=s, replace=False)
    else:
        idx = rng.choice(n_p, size=s, replace=True)
    return sample.pixels[:, idx, :]


# ---------------------------------------------------------------------------
# spatially separated folds


def _splitmix64(x):
    x = (x + 0x9E3779B97F4A7C15) & 0xFFFFFFFFFFFFFFFF
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & 0xFFFFFFFFFFFFFFFF
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & 0xFFFFFFFFFFFFFFFF
    return x ^ (x >> 31)


def make_folds(parcels, k, block_size, salt=0):
    """Partition parcels into k folds by centroid grid block; a block is
    never split across folds."""
    if k < 2:
        raise ContractError("need k >= 2 folds")
    blocks = {}
    for p in parcels:
        bx = int(np.floor(p.centroid[0] / block_size))
        by = int(np.floor(p.centroid[1] / block_size))
        blocks.setdefault((bx, by), []).append(p.parcel_id)
    if len(blocks) < k:
        raise ConfigError(
            f"only {len(blocks)} spatial blocks for {k} folds; "
            "decrease block_size"
        )
    hashed = sorted(
        blocks,
        key=lambda b: (_splitmix64((b[0] & 0xFFFFFFFF) << 32 | (b[1] & 0xFFFFFFFF) ^ salt), b),
    )
    folds = {}
    for rank, block in enumerate(hashed):
        for pid in blocks[block]:
            folds[pid] = rank % k
    return FoldAssignment(k=k, folds=folds, block_size=float(block_size))


# ---------------------------------------------------------------------------
# on-disk format (little-endian binary + JSON sidecar manifest)


def save_dataset(path, parcels, num_classes, manifest=None):
    path = str(path)
    num_years = len(parcels[0].samples) if parcels else 0
    channels = parcels[0].samples[0].pixels.shape[0] if parcels else 0
    if len(parcels) > 0xFFFFFFFF or num_years > 0xFF:
        raise DataFormatError("dataset dimensions overflow the header fields")
    if channels > 0xFFFF or num_classes > 0xFFFF:
        raise DataFormatError("dataset dimensions overflow the header fields")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IIBHH", FORMAT_VERSION, len(parcels), num_years, channels, num_classes))
        for p in parcels:
            fh.write(struct.pack("<Qdd", p.parcel_id, p.centroid[0], p.centroid[1]))
            for s in p.samples:
                s.validate()
                c, n_p, t = s.pixels.shape
                if t > 0xFFFF or n_p > 0xFFFFFFFF or s.label > 0xFFFF:
                    raise DataFormatError("sample dimensions overflow the format")
                fh.write(struct.pack("<H", t))
                fh.write(np.asarray(s.days, dtype="<u2").tobytes())
                fh.write(struct.pack("<I", n_p))
                fh.write(np.ascontiguousarray(s.pixels, dtype="<f4").tobytes())
                fh.write(struct.pack("<H", s.label))
    sidecar = {
        "class_names": [f"class_{i:02d}" for i in range(num_classes)],
        "year_labels": [f"year_{i}" for i in range(1, num_years + 1)],
    }
    if manifest:
        sidecar.update(manifest)
    with open(path + ".json", "w") as fh:
        json.dump(sidecar, fh, indent=2, sort_keys=True)
        fh.write("\n")


class _Reader:
    def __init__(self, fh):
        self.fh = fh
        self.offset = 0

    def read(self, n, what):
        buf = self.fh.read(n)
        self.offset += len(buf)
        if len(buf) != n:
            raise DataFormatError(
                f"truncated file while reading {what} at offset {self.offset}"
            )
        return buf

    def unpack(self, fmt, what):
        return struct.unpack(fmt, self.read(struct.calcsize(fmt), what))


def load_dataset(path):
    path = str(path)
    with open(path, "rb") as fh:
        r = _Reader(fh)
        magic = r.read(4, "magic")
        if magic != MAGIC:
            raise DataFormatError(
                f"bad magic {magic!r} at offset 0; expected {MAGIC!r}"
            )
        version, n_parcels, num_years, channels, num_classes = r.unpack(
            "<IIBHH", "header"
        )
        if version != FORMAT_VERSION:
            raise DataFormatError(f"unsupported format version {version}")
        parcels = []
        for _ in range(n_parcels):
            pid, cx, cy = r.unpack("<Qdd", "parcel header")
            samples = []
            for i in range(num_years):
                (t,) = r.unpack("<H", "timestep count")
                days = np.frombuffer(r.read(2 * t, "days"), dtype="<u2").astype(
                    np.int64
                )
                (n_p,) = r.unpack("<I", "pixel count")
                if n_p < 1:
                    raise DataFormatError(
                        f"degenerate parcel {pid} with no pixels "
                        f"at offset {r.offset}"
                    )
                raw = r.read(4 * channels * n_p * t, "pixels")
                pix = np.frombuffer(raw, dtype="<f4").reshape(channels, n_p, t)
                (label,) = r.unpack("<H", "label")
                sample = PixelSetSample(
                    parcel_id=pid,
                    year_index=i + 1,
                    pixels=pix.copy(),
                    days=days,
                    label=int(label),
                )
                sample.validate()
                samples.append(sample)
            parcels.append(MultiYearParcel(int(pid), (cx, cy), samples))
    manifest = None
    try:
        with open(path + ".json") as fh:
            manifest = json.load(fh)
    except FileNotFoundError:
        pass
    return Dataset(parcels=parcels, num_classes=int(num_classes), manifest=manifest)


def config_to_manifest(config: SyntheticConfig):
    echo = asdict(config)
    echo["cycles"] = [list(c) for c in config.cycles]
    echo["permanent_classes"] = list(config.permanent_classes)
    echo["curve_groups"] = [list(g) for g in config.curve_groups]
    return {"generator": echo}
