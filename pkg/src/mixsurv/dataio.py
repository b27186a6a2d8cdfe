"""Cohort manifests, PSF1 patch-feature files and a synthetic cohort generator."""

from __future__ import annotations

import csv
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"PSF1"
HEADER = struct.Struct("<4sIII")
FLAG_COORDS = 1
MAX_ELEMENTS = 2**31 - 1
MANIFEST_HEADER = ["slide_id", "feature_file", "time_months", "censor"]


class FormatError(ValueError):
    """A PSF1 file or manifest is malformed."""


@dataclass
class PatchBag:
    slide_id: str
    features: np.ndarray
    coords: np.ndarray
    time: float
    censor: int

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.coords = np.asarray(self.coords, dtype=np.float64)
        if self.features.ndim != 2 or self.features.shape[0] < 1 or self.features.shape[1] < 1:
            raise ValueError(f"{self.slide_id}: features must be n x d with n, d >= 1, got {self.features.shape}")
        if self.coords.shape != (self.features.shape[0], 2):
            raise ValueError(f"{self.slide_id}: coords shape {self.coords.shape} does not match n={self.features.shape[0]}")
        if not self.time > 0:
            raise ValueError(f"{self.slide_id}: time must be positive, got {self.time}")
        if self.censor not in (0, 1):
            raise ValueError(f"{self.slide_id}: censor must be 0 or 1, got {self.censor}")

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def d(self) -> int:
        return self.features.shape[1]


@dataclass(frozen=True)
class ManifestEntry:
    slide_id: str
    feature_file: Path
    time: float
    censor: int
    fold: int | None = None


@dataclass
class CohortManifest:
    entries: list[ManifestEntry]

    def __post_init__(self):
        seen = set()
        for e in self.entries:
            if e.slide_id in seen:
                raise FormatError(f"duplicate slide_id {e.slide_id!r}")
            seen.add(e.slide_id)

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    @property
    def times(self) -> np.ndarray:
        return np.array([e.time for e in self.entries])

    @property
    def events(self) -> np.ndarray:
        return np.array([e.censor for e in self.entries], dtype=int)

    def subset(self, idx) -> CohortManifest:
        return CohortManifest([self.entries[i] for i in idx])

    def load_bag(self, entry: ManifestEntry) -> PatchBag:
        feats, coords = read_patch_features(entry.feature_file)
        return PatchBag(entry.slide_id, feats, coords, entry.time, entry.censor)

    def load_bags(self) -> list[PatchBag]:
        return [self.load_bag(e) for e in self.entries]


# ---------------------------------------------------------------------------
# manifest CSV


def read_manifest(path) -> CohortManifest:
    """Parse and validate a manifest CSV; feature paths resolve relative to it."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"manifest not found: {path}")
    base = path.parent
    entries = []
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header[:4]] != MANIFEST_HEADER:
            raise FormatError(f"{path}: header must start with {','.join(MANIFEST_HEADER)}")
        has_fold = len(header) == 5 and header[4].strip() == "fold"
        width = 5 if has_fold else 4
        if len(header) != width:
            raise FormatError(f"{path}: unexpected header columns {header}")
        for rowno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != width:
                raise FormatError(f"{path}:{rowno}: expected {width} columns, got {len(row)}")
            sid, ffile, t, c = (x.strip() for x in row[:4])
            try:
                time = float(t)
            except ValueError:
                raise FormatError(f"{path}:{rowno}: time {t!r} is not a number") from None
            if not (time > 0 and np.isfinite(time)):
                raise FormatError(f"{path}:{rowno}: time must be positive, got {t}")
            if c not in ("0", "1"):
                raise FormatError(f"{path}:{rowno}: censor must be 0 or 1, got {c!r}")
            fold = int(row[4]) if has_fold and row[4].strip() else None
            fpath = Path(ffile)
            if not fpath.is_absolute():
                fpath = base / fpath
            entries.append(ManifestEntry(sid, fpath, time, int(c), fold))
    manifest = CohortManifest(entries)
    for e in manifest:
        if not e.feature_file.is_file():
            raise FileNotFoundError(f"feature file for {e.slide_id} not found: {e.feature_file}")
    return manifest


def write_manifest(path, manifest: CohortManifest) -> None:
    path = Path(path)
    base = path.parent.resolve()
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(MANIFEST_HEADER)
        for e in manifest:
            fpath = Path(e.feature_file)
            try:
                fpath = fpath.resolve().relative_to(base)
            except ValueError:
                pass
            w.writerow([e.slide_id, fpath.as_posix(), repr(float(e.time)), e.censor])


# ---------------------------------------------------------------------------
# PSF1 binary


def write_patch_features(path, features, coords) -> None:
    features = np.asarray(features)
    coords = np.asarray(coords)
    if features.ndim != 2 or features.shape[0] < 1 or features.shape[1] < 1:
        raise ValueError(f"features must be n x d with n, d >= 1, got {features.shape}")
    n, d = features.shape
    if coords.shape != (n, 2):
        raise ValueError(f"coords shape {coords.shape} does not match n={n}")
    f32 = np.ascontiguousarray(features, dtype="<f4")
    c32 = np.ascontiguousarray(coords, dtype="<f4")
    if not (np.isfinite(f32).all() and np.isfinite(c32).all()):
        raise ValueError("features/coords must be finite")
    with open(path, "wb") as fh:
        fh.write(HEADER.pack(MAGIC, n, d, FLAG_COORDS))
        fh.write(f32.tobytes())
        fh.write(c32.tobytes())


def read_patch_features(path) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(features n x d, coords n x 2)`` as float32 arrays."""
    raw = Path(path).read_bytes()
    if len(raw) < HEADER.size:
        raise FormatError(f"{path}: truncated header ({len(raw)} bytes)")
    magic, n, d, flags = HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if not flags & FLAG_COORDS:
        raise FormatError(f"{path}: coords flag not set")
    if n < 1 or d < 1:
        raise FormatError(f"{path}: empty bag (n={n}, d={d})")
    if n * d > MAX_ELEMENTS or n * (d + 2) * 4 > MAX_ELEMENTS:
        raise FormatError(f"{path}: n*d overflow (n={n}, d={d})")
    want = HEADER.size + 4 * n * (d + 2)
    if len(raw) != want:
        raise FormatError(f"{path}: payload length {len(raw) - HEADER.size} bytes, expected {want - HEADER.size} for n={n}, d={d}")
    feats = np.frombuffer(raw, dtype="<f4", count=n * d, offset=HEADER.size).reshape(n, d)
    coords = np.frombuffer(raw, dtype="<f4", count=n * 2, offset=HEADER.size + 4 * n * d).reshape(n, 2)
    if not (np.isfinite(feats).all() and np.isfinite(coords).all()):
        raise FormatError(f"{path}: NaN or infinite values in payload")
    return feats.astype(np.float32), coords.astype(np.float32)


# ---------------------------------------------------------------------------
# synthetic cohorts


@dataclass
class SyntheticSpec:
    n_slides: int = 300
    patches_per_slide: tuple[int, int] = (32, 96)
    d: int = 32
    n_phenotypes: int = 2
    alphas: tuple[float, ...] = (5.0, 50.0)
    betas: tuple[float, ...] = (3.0, 3.0)
    censoring: float = 0.2
    seed: int = 0
    dominant_fraction: float = 0.7
    feature_noise: float = 0.3
    blob_spread: float = 6.0

    def __post_init__(self):
        if not 0.0 <= self.censoring < 1.0:
            raise ValueError(f"censoring fraction must be in [0, 1), got {self.censoring}")
        if len(self.alphas) != self.n_phenotypes or len(self.betas) != self.n_phenotypes:
            raise ValueError("need one (alpha, beta) pair per phenotype")
        if min(self.alphas) <= 0 or min(self.betas) <= 0:
            raise ValueError("alpha and beta must be positive")
        lo, hi = self.patches_per_slide
        if not 1 <= lo <= hi:
            raise ValueError(f"bad patches_per_slide range {self.patches_per_slide}")


@dataclass
class SyntheticCohort:
    manifest: CohortManifest
    phenotypes: dict[str, int] = field(default_factory=dict)
    centroids: np.ndarray | None = None


def sample_loglogistic(rng: np.random.Generator, alpha: float, beta: float, size=None):
    u = rng.uniform(size=size)
    # u == 0 has probability ~2^-53; nudge to keep t > 0
    u = np.clip(u, 1e-300, 1.0 - 1e-16)
    return alpha * (u / (1.0 - u)) ** (1.0 / beta)


def _place_blobs(rng, labels: np.ndarray, n_ph: int, spread: float) -> np.ndarray:
    centers = rng.uniform(15.0, 85.0, size=(n_ph, 2))
    coords = centers[labels] + rng.normal(0.0, spread, size=(labels.size, 2))
    return np.clip(coords, 0.0, 100.0)


def generate_synthetic_cohort(spec: SyntheticSpec, out_dir) -> SyntheticCohort:
    """Write PSF1 bags plus ``manifest.csv`` and ``phenotypes.csv`` under ``out_dir``.

    Each slide draws a dominant phenotype that owns ``dominant_fraction`` of
    its patches; the rest come from the other phenotypes.  Features are the
    phenotype centroid plus isotropic noise and every phenotype occupies one
    spatial blob on a 100 x 100 grid.  The event time is drawn from the
    dominant phenotype's log-logistic law and censored uniformly below it
    with probability ``spec.censoring``.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if not os.access(out, os.W_OK):
        raise PermissionError(f"cannot write to {out}")
    rng = np.random.default_rng(spec.seed)
    centroids = rng.normal(0.0, 1.0, size=(spec.n_phenotypes, spec.d))
    width = len(str(spec.n_slides - 1))
    entries, truth = [], {}
    lo, hi = spec.patches_per_slide
    for s in range(spec.n_slides):
        sid = f"slide_{s:0{width}d}"
        dom = int(rng.integers(spec.n_phenotypes))
        n = int(rng.integers(lo, hi + 1))
        labels = np.full(n, dom)
        if spec.n_phenotypes > 1:
            others = [p for p in range(spec.n_phenotypes) if p != dom]
            minority = rng.random(n) >= spec.dominant_fraction
            labels[minority] = rng.choice(others, size=int(minority.sum()))
        feats = centroids[labels] + rng.normal(0.0, spec.feature_noise, size=(n, spec.d))
        coords = _place_blobs(rng, labels, spec.n_phenotypes, spec.blob_spread)
        t = float(sample_loglogistic(rng, spec.alphas[dom], spec.betas[dom]))
        c = 1
        if rng.random() < spec.censoring:
            t = float(rng.uniform(0.0, t)) or t * 1e-6
            c = 0
        fname = f"{sid}.psf"
        write_patch_features(out / fname, feats, coords)
        entries.append(ManifestEntry(sid, out / fname, t, c))
        truth[sid] = dom
    manifest = CohortManifest(entries)
    write_manifest(out / "manifest.csv", manifest)
    with (out / "phenotypes.csv").open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["slide_id", "phenotype"])
        for sid, ph in truth.items():
            w.writerow([sid, ph])
    return SyntheticCohort(manifest, truth, centroids)


# ---------------------------------------------------------------------------
# cross-validation folds


def fold_indices(n: int, k: int = 5, seed: int = 0) -> list[np.ndarray]:
    """Held-out index sets of a seeded k-fold partition of ``range(n)``."""
    if k < 2:
        raise ValueError(f"k must be >= 2 (k={k} leaves no held-out data)")
    if k > n:
        raise ValueError(f"k={k} exceeds number of slides ({n})")
    order = np.random.default_rng(seed).permutation(n)
    return [np.sort(f) for f in np.array_split(order, k)]


def kfold_split(manifest: CohortManifest, k: int = 5, seed: int = 0) -> list[tuple[CohortManifest, CohortManifest]]:
    n = len(manifest)
    out = []
    for test in fold_indices(n, k, seed):
        train = np.setdiff1d(np.arange(n), test)
        out.append((manifest.subset(train.tolist()), manifest.subset(test.tolist())))
    return out
