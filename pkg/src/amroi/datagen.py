"""Seeded synthetic chest-image corpus with landmarks and lumbar BMD labels.

The real clinical images are private, so the generator plants a BMD signal
in bone textures at the 14 anatomical ROI sites. Each site sees its own noisy
reading of a per-patient latent density factor and may be occluded, so the
best estimate comes from fusing many ROIs. A global brightness offset and a
textured central "cardiac" shadow act as confounders uncorrelated with BMD.

On-disk formats
---------------
image (``.amr``)
    ``b"AMR1"``, u32 width, u32 height, f32 spacing, then width*height f32
    pixels row-major from the top-left corner; all little-endian.
landmarks (``.lm``)
    16 UTF-8 lines ``name<TAB>x<TAB>y`` in :data:`LANDMARK_NAMES` order.
manifest (``manifest.tsv``)
    tab-separated, header :data:`MANIFEST_HEADER`, reals with 6 decimals.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

VERTEBRAE = ("L1", "L2", "L3", "L4")

LANDMARK_NAMES = (
    [f"clavicle_left_{i}" for i in range(3)]
    + [f"clavicle_right_{i}" for i in range(3)]
    + [f"ribcage_left_{i}" for i in range(4)]
    + [f"ribcage_right_{i}" for i in range(4)]
    + ["c7", "t12"]
)

MANIFEST_HEADER = (
    "patient_id", "image", "landmarks",
    "bmd_l1", "bmd_l2", "bmd_l3", "bmd_l4",
    "t_l1", "t_l2", "t_l3", "t_l4",
    "sex", "age",
)

IMAGE_MAGIC = b"AMR1"
_IMAGE_HEADER = struct.Struct("<4sIIf")

# Nominal landmark layout as fractions of the image extent. Clavicle points run
# left to right (x increasing); ribcage points run top to bottom.
_NOMINAL = np.array([
    (0.16, 0.22), (0.28, 0.19), (0.42, 0.21),
    (0.58, 0.21), (0.72, 0.19), (0.84, 0.22),
    (0.14, 0.34), (0.12, 0.46), (0.13, 0.58), (0.17, 0.70),
    (0.86, 0.34), (0.88, 0.46), (0.87, 0.58), (0.83, 0.70),
    (0.50, 0.10),
    (0.50, 0.74),
])

# 14 texture sites, in ROI modality order (whole image excluded)
SITE_NAMES = (
    "clav_L_0", "clav_L_1", "clav_R_0", "clav_R_1",
    "rib_L_0", "rib_L_1", "rib_L_2", "rib_L_3",
    "rib_R_0", "rib_R_1", "rib_R_2", "rib_R_3",
    "cervical", "lumbar",
)


class FormatError(ValueError):
    """A dataset file does not conform to its format."""


class ValidationError(ValueError):
    """Decoded values violate a domain invariant."""


# -- domain types -----------------------------------------------------------------


@dataclass
class Image2D:
    pixels: np.ndarray  # (height, width) float32 in [0, 1]
    spacing: float = 1.0

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.float32)
        if self.pixels.ndim != 2:
            raise ValidationError(f"image must be 2-D, got shape {self.pixels.shape}")

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]


@dataclass
class LandmarkSet:
    points: np.ndarray  # (16, 2) as (x, y) pixel coordinates

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        if self.points.shape != (16, 2):
            raise ValidationError(f"expected 16 (x, y) landmarks, got {self.points.shape}")

    def __getitem__(self, name: str) -> np.ndarray:
        return self.points[LANDMARK_NAMES.index(name)]

    @property
    def clavicle_left(self) -> np.ndarray:
        return self.points[0:3]

    @property
    def clavicle_right(self) -> np.ndarray:
        return self.points[3:6]

    @property
    def ribcage_left(self) -> np.ndarray:
        return self.points[6:10]

    @property
    def ribcage_right(self) -> np.ndarray:
        return self.points[10:14]

    @property
    def c7(self) -> np.ndarray:
        return self.points[14]

    @property
    def t12(self) -> np.ndarray:
        return self.points[15]

    def validate(self, width: int, height: int, source: str = "landmarks") -> None:
        x, y = self.points[:, 0], self.points[:, 1]
        bad = np.flatnonzero((x < 0) | (x > width - 1) | (y < 0) | (y > height - 1)
                             | ~np.isfinite(x) | ~np.isfinite(y))
        if bad.size:
            i = int(bad[0])
            raise ValidationError(
                f"{source}: landmark {LANDMARK_NAMES[i]} at ({x[i]:.3f}, {y[i]:.3f}) "
                f"outside {width}x{height} image")
        for left, right, group in ((self.clavicle_left, self.clavicle_right, "clavicle"),
                                   (self.ribcage_left, self.ribcage_right, "ribcage")):
            if left[:, 0].max() >= right[:, 0].min():
                raise ValidationError(f"{source}: {group} left points not left of right points")


@dataclass
class PatientRecord:
    patient_id: str
    image: str
    landmarks: str
    bmd: tuple[float, float, float, float]
    t_score: tuple[float, float, float, float]
    sex: str
    age: int

    def target(self, vertebra: str) -> float:
        return self.bmd[VERTEBRAE.index(vertebra)]


def _ci_mixture(centers, halfwidths, props):
    """Mean and SD of a 3-class mixture given 95% CI centres/half-widths."""
    centers, props = np.asarray(centers), np.asarray(props)
    sds = np.asarray(halfwidths) / 1.96
    mean = float(props @ centers)
    var = float(props @ (sds**2) + props @ (centers - mean) ** 2)
    return mean, math.sqrt(var)


def _cohort_defaults():
    # (normal, osteopenia, osteoporosis) 95% CI centres and half-widths per vertebra;
    # class proportions are given for L1 and L4 only, L2/L3 interpolate linearly.
    centers = [(1.0, 0.81, 0.65), (1.07, 0.85, 0.68), (1.14, 0.9, 0.74), (1.13, 0.88, 0.72)]
    halves = [(0.17, 0.08, 0.1), (0.21, 0.08, 0.1), (0.23, 0.08, 0.11), (0.25, 0.08, 0.12)]
    p1, p4 = np.array([0.51, 0.38, 0.11]), np.array([0.70, 0.23, 0.07])
    props = [p1 + (p4 - p1) * f for f in (0.0, 1 / 3, 2 / 3, 1.0)]
    means, sds, mu_ref, sd_ref = [], [], [], []
    from statistics import NormalDist
    for c, h, p in zip(centers, halves, props):
        m, s = _ci_mixture(c, h, p)
        # reference chosen so the Gaussian marginal reproduces the class shares
        x_porosis = m + s * NormalDist().inv_cdf(p[2])
        x_penia = m + s * NormalDist().inv_cdf(p[1] + p[2])
        sigma = (x_penia - x_porosis) / 1.5
        means.append(round(m, 4))
        sds.append(round(s, 4))
        sd_ref.append(round(sigma, 4))
        mu_ref.append(round(x_penia + sigma, 4))
    return tuple(means), tuple(sds), tuple(mu_ref), tuple(sd_ref)


_MEANS, _SDS, _MU_REF, _SD_REF = _cohort_defaults()


@dataclass
class GenConfig:
    n_patients: int = 2000
    image_size: int = 64
    seed: int = 42
    spacing: float = 6.5
    bmd_mean: tuple[float, ...] = _MEANS
    bmd_sd: tuple[float, ...] = _SDS
    ref_mu: tuple[float, ...] = _MU_REF
    ref_sigma: tuple[float, ...] = _SD_REF
    latent_corr: tuple[float, ...] = (0.97, 0.97, 0.965, 0.96)
    signal: float = 0.45
    reading_noise: float = 0.5
    occlusion: float = 0.15
    confounder: float = 0.12
    distractor: float = 1.0
    noise_sd: float = 0.025
    body_scale: float = 1.0
    layout_jitter: float = 0.03

    def validate(self) -> None:
        if self.n_patients < 0:
            raise ValueError("n_patients must be >= 0")
        if self.image_size < 16:
            raise ValueError("image_size must be >= 16")
        for name in ("bmd_mean", "bmd_sd", "ref_mu", "ref_sigma", "latent_corr"):
            if len(getattr(self, name)) != 4:
                raise ValueError(f"{name} needs one value per vertebra")
        if min(self.ref_sigma) <= 0 or min(self.bmd_sd) <= 0:
            raise ValueError("standard deviations must be positive")
        if not all(0 <= r <= 1 for r in self.latent_corr):
            raise ValueError("latent_corr entries must lie in [0, 1]")
        if not 0 <= self.occlusion <= 1:
            raise ValueError("occlusion must be a probability")
        if not 0 < self.body_scale <= 1.2:
            raise ValueError("body_scale must lie in (0, 1.2]")


def t_score(bmd: float, mu_ref: float, sigma_ref: float) -> float:
    return (bmd - mu_ref) / sigma_ref


# -- rendering ------------------------------------------------------------------


@dataclass
class PatientTruth:
    """Generator internals kept for diagnostics and upper-bound oracles."""

    latent: float
    site_latent: np.ndarray = field(repr=False)
    occluded: np.ndarray = field(repr=False)


def _sample_landmarks(rng: np.random.Generator, cfg: GenConfig) -> np.ndarray:
    n = cfg.image_size - 1
    scale = cfg.body_scale * (1.0 + rng.uniform(-0.06, 0.06))
    shift = rng.uniform(-cfg.layout_jitter, cfg.layout_jitter, size=2) * n
    pts = (0.5 + (_NOMINAL - 0.5) * scale) * n + shift
    pts += rng.normal(0.0, 0.006 * n, size=pts.shape)
    return np.clip(pts, 0.0, n)


def _segment_mask(xx, yy, p0, p1, half_width):
    d = p1 - p0
    t = np.clip(((xx - p0[0]) * d[0] + (yy - p0[1]) * d[1]) / max(d @ d, 1e-9), 0.0, 1.0)
    px, py = p0[0] + t * d[0], p0[1] + t * d[1]
    return np.hypot(xx - px, yy - py) <= half_width


def _site_masks(pts: np.ndarray, size: int) -> list[np.ndarray]:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    bw = 0.04 * size
    masks = []
    for group in (pts[0:3], pts[3:6]):
        mid = group[1]
        masks.append(_segment_mask(xx, yy, group[0], mid, bw))
        masks.append(_segment_mask(xx, yy, mid, group[2], bw))
    for side, group in ((-1, pts[6:10]), (1, pts[10:14])):
        for p in group:
            # short rib segment pointing inward from the ribcage edge
            a = p + np.array([side * 0.015, -0.01]) * size
            b = p - np.array([side * 0.09, -0.025]) * size
            masks.append(_segment_mask(xx, yy, a, b, bw))
    for p in (pts[14], pts[15]):
        h = 0.045 * size
        masks.append((np.abs(xx - p[0]) <= h) & (np.abs(yy - p[1]) <= h * 0.8))
    return masks


def _stripes(rng, size, period):
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    phi = rng.uniform(0, np.pi)
    phase = rng.uniform(0, 2 * np.pi)
    return np.sin(2 * np.pi * (xx * np.cos(phi) + yy * np.sin(phi)) / period + phase)


def render_patient(rng: np.random.Generator, cfg: GenConfig, latent: float):
    """Draw one image and landmark set whose bone textures encode ``latent``."""
    size = cfg.image_size
    pts = _sample_landmarks(rng, cfg)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) / (size - 1)

    cx = pts[14, 0] / (size - 1)
    body = np.exp(-(((xx - cx) / 0.42) ** 2 + ((yy - 0.5) / 0.55) ** 2))
    lungs = sum(np.exp(-(((xx - lx) / 0.13) ** 2 + ((yy - 0.45) / 0.22) ** 2))
                for lx in (cx - 0.2, cx + 0.2))
    img = 0.25 + 0.3 * body - 0.12 * lungs

    # textured central shadow, amplitude independent of BMD
    heart = np.exp(-(((xx - cx - 0.05) / 0.13) ** 2 + ((yy - 0.5) / 0.11) ** 2))
    amp = cfg.distractor * rng.uniform(0.0, 0.14)
    img += 0.1 * heart + amp * heart * _stripes(rng, size, rng.uniform(2.2, 3.6))

    masks = _site_masks(pts, size)
    n_sites = len(masks)
    site_latent = latent + cfg.reading_noise * rng.standard_normal(n_sites)
    occluded = rng.random(n_sites) < cfg.occlusion
    for mask, u, occ in zip(masks, site_latent, occluded):
        level = 0.08 * (1.0 + cfg.signal * np.tanh(u))
        tex = 0.07 * np.exp(cfg.signal * u) * _stripes(rng, size, 2.6)
        img = np.where(mask, img + level + tex, img)
        if occ:
            ys, xs = np.nonzero(mask)
            c = np.array([xs.mean(), ys.mean()])
            blob = np.hypot(xx * (size - 1) - c[0], yy * (size - 1) - c[1]) <= 0.08 * size
            img = np.where(blob, rng.uniform(0.35, 0.6), img)

    img += rng.uniform(-cfg.confounder, cfg.confounder)
    img += rng.normal(0.0, cfg.noise_sd, size=img.shape)
    img = np.clip(img, 0.0, 1.0).astype(np.float32)
    return (Image2D(img, cfg.spacing), LandmarkSet(pts),
            PatientTruth(latent, site_latent, occluded))


def sample_patient(cfg: GenConfig, index: int):
    """Generate patient ``index`` from its own RNG stream.

    Returns ``(image, landmarks, record_fields, truth)``.
    """
    rng = np.random.default_rng(np.random.SeedSequence(cfg.seed, spawn_key=(index,)))
    latent = float(rng.standard_normal())
    eps = rng.standard_normal(4)
    sex = "F" if rng.random() < 0.5 else "M"
    age = int(rng.integers(40, 91))
    bmd, tsc = [], []
    for v in range(4):
        rho = cfg.latent_corr[v]
        z = rho * latent + math.sqrt(max(0.0, 1.0 - rho * rho)) * eps[v]
        b = round(max(0.2, cfg.bmd_mean[v] + cfg.bmd_sd[v] * z), 6)
        bmd.append(b)
        tsc.append(round(t_score(b, cfg.ref_mu[v], cfg.ref_sigma[v]), 6))
    image, lm, truth = render_patient(rng, cfg, latent)
    return image, lm, dict(bmd=tuple(bmd), t_score=tuple(tsc), sex=sex, age=age), truth


# -- writers / readers -----------------------------------------------------------


def write_image(path: Path | str, image: Image2D) -> None:
    h, w = image.pixels.shape
    with open(path, "wb") as fh:
        fh.write(_IMAGE_HEADER.pack(IMAGE_MAGIC, w, h, image.spacing))
        fh.write(image.pixels.astype("<f4", copy=False).tobytes(order="C"))


def load_image(path: Path | str) -> Image2D:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise FormatError(f"{path}: cannot read image ({exc})") from exc
    if len(raw) < _IMAGE_HEADER.size:
        raise FormatError(f"{path}: truncated header ({len(raw)} bytes, offset 0)")
    magic, w, h, spacing = _IMAGE_HEADER.unpack_from(raw)
    if magic != IMAGE_MAGIC:
        raise FormatError(f"{path}: wrong magic {magic!r} at offset 0")
    need = _IMAGE_HEADER.size + 4 * w * h
    if len(raw) != need:
        raise FormatError(
            f"{path}: expected {need} bytes for {w}x{h} pixels, found {len(raw)} "
            f"(offset {min(len(raw), need)})")
    pixels = np.frombuffer(raw, dtype="<f4", offset=_IMAGE_HEADER.size).reshape(h, w)
    return Image2D(pixels.astype(np.float32), float(spacing))


def write_landmarks(path: Path | str, lm: LandmarkSet) -> None:
    lines = [f"{name}\t{x!r}\t{y!r}" for name, (x, y) in
             zip(LANDMARK_NAMES, lm.points.tolist())]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_landmarks(path: Path | str, bounds: tuple[int, int] | None = None) -> LandmarkSet:
    """Read a landmark file; ``bounds=(width, height)`` also validates placement."""
    path = Path(path)
    try:
        lines = path.read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise FormatError(f"{path}: cannot read landmarks ({exc})") from exc
    if len(lines) != 16:
        raise FormatError(f"{path}: expected 16 lines, found {len(lines)}")
    pts = np.empty((16, 2))
    for i, (line, name) in enumerate(zip(lines, LANDMARK_NAMES), start=1):
        parts = line.split("\t")
        if len(parts) != 3 or parts[0] != name:
            raise FormatError(f"{path}:{i}: expected '{name}<TAB>x<TAB>y', got {line!r}")
        try:
            pts[i - 1] = float(parts[1]), float(parts[2])
        except ValueError as exc:
            raise FormatError(f"{path}:{i}: non-numeric coordinate in {line!r}") from exc
    lm = LandmarkSet(pts)
    if bounds is not None:
        lm.validate(*bounds, source=str(path))
    return lm


def _fmt(x: float) -> str:
    return f"{x:.6f}"


def write_manifest(path: Path | str, records: Iterable[PatientRecord]) -> None:
    rows = ["\t".join(MANIFEST_HEADER)]
    for r in records:
        rows.append("\t".join(
            [r.patient_id, r.image, r.landmarks]
            + [_fmt(b) for b in r.bmd] + [_fmt(t) for t in r.t_score]
            + [r.sex, str(r.age)]))
    Path(path).write_text("\n".join(rows) + "\n", encoding="utf-8")


def load_manifest(path: Path | str) -> list[PatientRecord]:
    path = Path(path)
    try:
        lines = path.read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise FormatError(f"{path}: cannot read manifest ({exc})") from exc
    if not lines or tuple(lines[0].split("\t")) != MANIFEST_HEADER:
        raise FormatError(f"{path}:1: malformed header")
    records = []
    for i, line in enumerate(lines[1:], start=2):
        if not line:
            continue
        f = line.split("\t")
        if len(f) != len(MANIFEST_HEADER):
            raise FormatError(f"{path}:{i}: expected {len(MANIFEST_HEADER)} fields, got {len(f)}")
        try:
            bmd = tuple(float(v) for v in f[3:7])
            tsc = tuple(float(v) for v in f[7:11])
            age = int(f[12])
        except ValueError as exc:
            raise FormatError(f"{path}:{i}: bad numeric field ({exc})") from exc
        if min(bmd) <= 0:
            raise ValidationError(f"{path}:{i}: non-positive BMD")
        records.append(PatientRecord(f[0], f[1], f[2], bmd, tsc, f[11], age))
    return records


def generate_corpus(cfg: GenConfig, out_dir: Path | str) -> list[PatientRecord]:
    """Write images, landmarks, ``manifest.tsv`` and ``latent.tsv`` under ``out_dir``."""
    cfg.validate()
    out = Path(out_dir)
    out.mkdir(exist_ok=True)
    (out / "images").mkdir(exist_ok=True)
    (out / "landmarks").mkdir(exist_ok=True)
    records, truth_rows = [], ["patient_id\tlatent\t" + "\t".join(
        [f"u_{s}" for s in SITE_NAMES] + [f"occ_{s}" for s in SITE_NAMES])]
    for i in range(cfg.n_patients):
        pid = f"P{i:05d}"
        image, lm, fields_, truth = sample_patient(cfg, i)
        img_rel, lm_rel = f"images/{pid}.amr", f"landmarks/{pid}.lm"
        write_image(out / img_rel, image)
        write_landmarks(out / lm_rel, lm)
        records.append(PatientRecord(pid, img_rel, lm_rel, **fields_))
        truth_rows.append("\t".join(
            [pid, _fmt(truth.latent)] + [_fmt(u) for u in truth.site_latent]
            + [str(int(o)) for o in truth.occluded]))
    write_manifest(out / "manifest.tsv", records)
    (out / "latent.tsv").write_text("\n".join(truth_rows) + "\n", encoding="utf-8")
    return records


def load_latents(path: Path | str) -> dict[str, tuple[float, np.ndarray, np.ndarray]]:
    """Read ``latent.tsv``: patient_id -> (latent, site latents, occlusion flags)."""
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    n = len(SITE_NAMES)
    out = {}
    for line in lines[1:]:
        f = line.split("\t")
        out[f[0]] = (float(f[1]), np.array(f[2:2 + n], dtype=float),
                     np.array(f[2 + n:2 + 2 * n], dtype=int).astype(bool))
    return out


def load_patient(root: Path | str, rec: PatientRecord) -> tuple[Image2D, LandmarkSet]:
    root = Path(root)
    img = load_image(root / rec.image)
    lm = load_landmarks(root / rec.landmarks, bounds=(img.width, img.height))
    return img, lm


# -- splitting --------------------------------------------------------------------


def _group_ids(records: Sequence[PatientRecord]) -> dict[str, list[int]]:
    groups: dict[str, list[int]] = {}
    for i, r in enumerate(records):
        groups.setdefault(r.patient_id, []).append(i)
    return groups


def split_folds(records: Sequence[PatientRecord], k: int = 4, seed: int = 0) -> list[int]:
    """Assign each record a fold in ``range(k)``, grouping rows by patient id.

    Patients are shuffled under ``seed`` and dealt greedily to the currently
    smallest fold, so fold sizes differ by at most one when every patient
    has a single row.
    """
    if k < 2:
        raise ValueError("k must be >= 2")
    if not records:
        raise ValueError("no records to split")
    groups = _group_ids(records)
    if len(groups) < k:
        raise ValueError(f"{len(groups)} patients cannot fill {k} folds")
    ids = sorted(groups)
    order = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(7,))).permutation(len(ids))
    sizes = [0] * k
    assign = [0] * len(records)
    for j in order:
        members = groups[ids[j]]
        f = min(range(k), key=lambda q: sizes[q])
        sizes[f] += len(members)
        for m in members:
            assign[m] = f
    return assign


def holdout_split(records: Sequence[PatientRecord], fraction: float, seed: int = 0):
    """Split rows into (development, test) index lists without sharing patients."""
    if not 0 <= fraction < 1:
        raise ValueError("test fraction must lie in [0, 1)")
    groups = _group_ids(records)
    ids = sorted(groups)
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(11,)))
    perm = rng.permutation(len(ids))
    n_test = int(round(fraction * len(ids)))
    test_ids = {ids[j] for j in perm[:n_test]}
    dev = [i for i, r in enumerate(records) if r.patient_id not in test_ids]
    test = [i for i, r in enumerate(records) if r.patient_id in test_ids]
    return dev, test

