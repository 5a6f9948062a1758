"""Synthetic thorax phantoms with analytically known lung volume, plus label-noise models.

A phantom is a body ellipsoid containing two lung ellipsoids, an optional heart
ellipsoid carved out of the lungs, and a horizontal diaphragm cut.  Lung membership
is exact set geometry, so the reference volume is the voxel count times the voxel
volume with no interpolation anywhere.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, replace
from multiprocessing import Pool
from pathlib import Path

import numpy as np

from . import drr
from .volgrid import Mask3D, Volume3D, volume_from_mask, write_rvol


class PhantomGeometryError(ValueError):
    pass


@dataclass(frozen=True)
class PhantomParams:
    """Sampling distribution for one phantom family.

    Ranges are uniform; set lo == hi for a deterministic geometry.  The two lungs
    share a base draw per axis and deviate by at most `lung_asymmetry` of the range,
    keeping left/right sizes correlated.  All lengths in millimeters.
    """

    dims: tuple[int, int, int] = (256, 208, 288)
    spacing: tuple[float, float, float] = (1.25, 1.25, 1.25)
    body_semiaxes: tuple[float, float, float] = (178.0, 138.0, 218.0)
    lung_a_range: tuple[float, float] = (36.0, 76.0)
    lung_b_range: tuple[float, float] = (54.0, 112.0)
    lung_c_range: tuple[float, float] = (82.0, 170.0)
    lung_asymmetry: float = 0.08
    # lateral lung-center offset as a multiple of the lung's own x semi-axis
    lung_gap_factor: float = 1.02
    lung_center_dz: float = 6.0
    heart_enabled: bool = True
    heart_center_offset: tuple[float, float] = (14.0, -8.0)
    heart_depth_factor: float = 0.40
    heart_scale: tuple[float, float, float] = (0.62, 0.52, 0.45)
    heart_jitter: float = 0.10
    diaphragm_frac_range: tuple[float, float] = (0.60, 0.92)
    intensity_air: float = -1000.0
    intensity_body: float = 0.0
    intensity_lung: float = -800.0
    intensity_heart: float = 40.0
    noise_sigma: float = 20.0

    def validate(self) -> None:
        if any(d < 2 for d in self.dims):
            raise ValueError(f"grid dims too small: {self.dims}")
        if any(s <= 0 or not math.isfinite(s) for s in self.spacing):
            raise ValueError(f"invalid spacing: {self.spacing}")
        if any(a <= 0 for a in self.body_semiaxes):
            raise ValueError("body semi-axes must be positive")
        for lo, hi in (self.lung_a_range, self.lung_b_range, self.lung_c_range):
            if lo <= 0 or hi < lo:
                raise ValueError("lung semi-axis ranges must be positive with lo <= hi")
        for level in (self.intensity_air, self.intensity_body,
                      self.intensity_lung, self.intensity_heart):
            if not math.isfinite(level):
                raise ValueError("intensity levels must be finite")
        if self.noise_sigma < 0:
            raise ValueError("noise sigma must be >= 0")

    @property
    def physical_extent(self) -> tuple[float, float, float]:
        return tuple(n * s for n, s in zip(self.dims, self.spacing))


@dataclass(frozen=True)
class Ellipsoid:
    center: tuple[float, float, float]
    semiaxes: tuple[float, float, float]


@dataclass(frozen=True)
class PhantomGeometry:
    """Concrete geometry drawn from PhantomParams for one case."""

    body: Ellipsoid
    lungs: tuple[Ellipsoid, ...]
    heart: Ellipsoid | None
    diaphragm_z: float


def _uniform(rng: np.random.Generator, lo: float, hi: float) -> float:
    if hi == lo:
        return float(lo)
    return float(rng.uniform(lo, hi))


def draw_geometry(params: PhantomParams, rng: np.random.Generator) -> PhantomGeometry:
    params.validate()
    ex, ey, ez = params.physical_extent
    cx, cy, cz = ex / 2.0, ey / 2.0, ez / 2.0

    ranges = (params.lung_a_range, params.lung_b_range, params.lung_c_range)
    base_u = rng.uniform(0.0, 1.0, size=3)
    lungs = []
    for side in (-1.0, +1.0):
        axes = []
        for (lo, hi), u in zip(ranges, base_u):
            uu = u if hi == lo else float(np.clip(u + rng.uniform(-1, 1) * params.lung_asymmetry, 0.0, 1.0))
            axes.append(lo + uu * (hi - lo))
        a, b, c = axes
        center = (cx + side * params.lung_gap_factor * a, cy, cz + params.lung_center_dz)
        lungs.append(Ellipsoid(center=center, semiaxes=(a, b, c)))

    mean_axes = tuple((lungs[0].semiaxes[i] + lungs[1].semiaxes[i]) / 2.0 for i in range(3))
    lung_z = cz + params.lung_center_dz

    heart = None
    if params.heart_enabled:
        j = 1.0 + _uniform(rng, -params.heart_jitter, params.heart_jitter)
        semi = tuple(s * m * j for s, m in zip(params.heart_scale, mean_axes))
        hx, hy = params.heart_center_offset
        center = (cx + hx, cy + hy, lung_z - params.heart_depth_factor * mean_axes[2])
        heart = Ellipsoid(center=center, semiaxes=semi)

    t = _uniform(rng, *params.diaphragm_frac_range)
    diaphragm_z = lung_z - t * mean_axes[2]

    geom = PhantomGeometry(
        body=Ellipsoid(center=(cx, cy, cz), semiaxes=params.body_semiaxes),
        lungs=tuple(lungs),
        heart=heart,
        diaphragm_z=diaphragm_z,
    )
    _check_lungs_in_grid(geom, params)
    return geom


def _check_lungs_in_grid(geom: PhantomGeometry, params: PhantomParams) -> None:
    extent = params.physical_extent
    for lung in geom.lungs:
        for c, s, e in zip(lung.center, lung.semiaxes, extent):
            if c - s < 0.0 or c + s > e:
                raise PhantomGeometryError(
                    f"lung ellipsoid (center {lung.center}, semiaxes {lung.semiaxes}) "
                    f"extends outside the {extent} mm grid"
                )


def _inside_field(ell: Ellipsoid, coords: tuple[np.ndarray, np.ndarray, np.ndarray]) -> np.ndarray:
    qx = ((coords[0] - ell.center[0]) / ell.semiaxes[0]) ** 2
    qy = ((coords[1] - ell.center[1]) / ell.semiaxes[1]) ** 2
    qz = ((coords[2] - ell.center[2]) / ell.semiaxes[2]) ** 2
    return (qx[:, None, None] + qy[None, :, None] + qz[None, None, :]) < 1.0


def generate(params: PhantomParams, seed: int) -> tuple[Volume3D, Mask3D, float]:
    """Voxelize one phantom.  Identical (params, seed) yield bit-identical outputs."""
    rng = np.random.default_rng(seed)
    geom = draw_geometry(params, rng)

    nx, ny, nz = params.dims
    sx, sy, sz = params.spacing
    coords = tuple(
        ((np.arange(n, dtype=np.float32) + 0.5) * s).astype(np.float32)
        for n, s in zip(params.dims, params.spacing)
    )

    in_body = _inside_field(geom.body, coords)
    in_lungs = _inside_field(geom.lungs[0], coords)
    for lung in geom.lungs[1:]:
        in_lungs |= _inside_field(lung, coords)
    above_cut = coords[2] > geom.diaphragm_z
    lung_mask = in_lungs & above_cut[None, None, :]
    if geom.heart is not None:
        in_heart = _inside_field(geom.heart, coords)
        lung_mask &= ~in_heart
    else:
        in_heart = None

    if bool((lung_mask & ~in_body).any()):
        raise PhantomGeometryError("lung voxels fall outside the body ellipsoid")

    values = np.full(params.dims, params.intensity_air, dtype=np.float32)
    values[in_body] = params.intensity_body
    values[lung_mask] = params.intensity_lung
    if in_heart is not None:
        values[in_heart] = params.intensity_heart
    if params.noise_sigma > 0:
        values += params.noise_sigma * rng.standard_normal(size=params.dims, dtype=np.float32)

    mask = Mask3D(data=lung_mask.astype(np.uint8), spacing=params.spacing)
    vol = Volume3D(data=values, spacing=params.spacing)
    return vol, mask, volume_from_mask(mask)


# ---------------------------------------------------------------------------
# Label-noise models
# ---------------------------------------------------------------------------

NOISE_KINDS = ("exact", "mult", "add", "bias")


@dataclass(frozen=True)
class LabelNoiseModel:
    """Perturbation applied to the true volume to form the training label.

    mult: label = true * (1 + N(0, sigma_rel))
    add:  label = true + N(0, sigma_ml / 1000) liters
    bias: label = true + delta_ml / 1000 liters
    """

    kind: str = "exact"
    value: float = 0.0

    def __post_init__(self):
        if self.kind not in NOISE_KINDS:
            raise ValueError(f"noise kind must be one of {NOISE_KINDS}, got {self.kind!r}")
        if self.kind in ("mult", "add") and self.value < 0:
            raise ValueError("noise sigma must be >= 0")

    def apply(self, true_liters: float, rng: np.random.Generator) -> float:
        if self.kind == "exact":
            return true_liters
        if self.kind == "mult":
            return true_liters * (1.0 + self.value * rng.standard_normal())
        if self.kind == "add":
            return true_liters + (self.value / 1000.0) * rng.standard_normal()
        return true_liters + self.value / 1000.0  # bias, value in ml

    @classmethod
    def parse(cls, spec: str) -> "LabelNoiseModel":
        """Parse 'exact' | 'mult:SIGMA' | 'add:SIGMA_ML' | 'bias:DELTA_ML'."""
        if spec == "exact":
            return cls("exact", 0.0)
        kind, sep, value = spec.partition(":")
        if not sep or kind not in NOISE_KINDS:
            raise ValueError(f"invalid noise spec {spec!r}")
        return cls(kind, float(value))

    def __str__(self) -> str:
        if self.kind == "exact":
            return "exact"
        return f"{self.kind}:{self.value:g}"


# ---------------------------------------------------------------------------
# Dataset construction
# ---------------------------------------------------------------------------

MANIFEST_HEADER = ["case_id", "frontal_path", "lateral_path", "label_liters", "true_tlv_liters", "split"]
SPLITS = ("train", "val", "test")


@dataclass(frozen=True)
class CaseRecord:
    case_id: str
    frontal_path: str
    lateral_path: str
    label_liters: float
    true_tlv_liters: float
    split: str


def auto_image_spacing(params: PhantomParams, size: int) -> float:
    """Smallest half-millimeter spacing >= 1 mm whose projection fits the canvas."""
    longest = max(params.physical_extent)
    spacing = max(1.0, math.ceil(2.0 * longest / size) / 2.0)
    return spacing


def case_seed(master_seed: int, index: int) -> int:
    return int(np.random.SeedSequence((master_seed, index)).generate_state(1)[0])


def _label_rng(master_seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence((master_seed, index, 7)))


def _build_case(args) -> CaseRecord:
    (index, split, params, noise, master_seed, out_dir,
     image_size, image_spacing, save_volumes, write_previews) = args
    cid = f"case_{index:05d}"
    vol, mask, true_tlv = generate(params, case_seed(master_seed, index))
    frontal, lateral = drr.simulate_pair(vol, target_spacing_mm=image_spacing, size=image_size)
    label = noise.apply(true_tlv, _label_rng(master_seed, index))

    out = Path(out_dir)
    fpath, lpath = f"{cid}_frontal.rimg", f"{cid}_lateral.rimg"
    drr.write_rimg(out / fpath, frontal)
    drr.write_rimg(out / lpath, lateral)
    if write_previews:
        drr.write_pgm_preview(out / f"{cid}_frontal.pgm", frontal)
        drr.write_pgm_preview(out / f"{cid}_lateral.pgm", lateral)
    if save_volumes:
        write_rvol(out / f"{cid}.rvol", vol)
        write_rvol(out / f"{cid}_mask.rvol", mask)
    return CaseRecord(cid, fpath, lpath, label, true_tlv, split)


def make_dataset(
    n: int,
    params: PhantomParams,
    noise: LabelNoiseModel,
    seed: int,
    out_dir,
    split_counts: tuple[int, int, int] | None = None,
    image_size: int = 128,
    image_spacing: float | None = None,
    save_volumes: bool = False,
    write_previews: bool = False,
    jobs: int = 1,
) -> list[CaseRecord]:
    """Generate n phantoms, simulate projection pairs, and write a manifest.

    Case seeds derive from (seed, index), so any subset of cases is reproducible
    independently of n and of the worker count.
    """
    if n <= 0:
        raise ValueError("n must be positive")
    params.validate()
    if split_counts is None:
        split_counts = (n, 0, 0)
    if sum(split_counts) != n or any(c < 0 for c in split_counts):
        raise ValueError(f"split counts {split_counts} must be non-negative and sum to {n}")
    if image_spacing is None:
        image_spacing = auto_image_spacing(params, image_size)

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    splits = []
    for name, count in zip(SPLITS, split_counts):
        splits.extend([name] * count)
    work = [
        (i, splits[i], params, noise, seed, str(out),
         image_size, image_spacing, save_volumes, write_previews)
        for i in range(n)
    ]
    if jobs > 1:
        with Pool(processes=jobs) as pool:
            records = pool.map(_build_case, work, chunksize=1)
    else:
        records = [_build_case(w) for w in work]

    write_manifest(out / "manifest.csv", records)
    return records


def write_manifest(path, records: list[CaseRecord]) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(MANIFEST_HEADER)
        for r in records:
            writer.writerow([
                r.case_id, r.frontal_path, r.lateral_path,
                f"{r.label_liters:.6f}", f"{r.true_tlv_liters:.6f}", r.split,
            ])


def relabel(records: list[CaseRecord], noise: LabelNoiseModel, seed: int) -> list[CaseRecord]:
    """New records whose labels are re-drawn from the noise model on the true TLV."""
    out = []
    for i, r in enumerate(records):
        rng = _label_rng(seed, i)
        out.append(replace(r, label_liters=noise.apply(r.true_tlv_liters, rng)))
    return out


def read_manifest(path) -> list[CaseRecord]:
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header != MANIFEST_HEADER:
            raise ValueError(f"bad manifest header in {path}: {header}")
        records = []
        for row in reader:
            if len(row) != len(MANIFEST_HEADER):
                raise ValueError(f"bad manifest row in {path}: {row}")
            if row[5] not in SPLITS:
                raise ValueError(f"unknown split {row[5]!r} in {path}")
            records.append(CaseRecord(row[0], row[1], row[2], float(row[3]), float(row[4]), row[5]))
    return records


def single_ellipsoid_params(
    semiaxes: tuple[float, float, float],
    spacing: float = 1.0,
    margin_mm: float = 10.0,
) -> PhantomParams:
    """Parameters for one centered ellipsoid lung with no cut, heart, or noise.

    Both lung draws collapse onto the same centered ellipsoid, so the mask is a
    single ellipsoid with closed-form volume; used by the volumetry oracles.
    """
    a, b, c = semiaxes
    dims = tuple(int(math.ceil(2 * (s + margin_mm) / spacing)) for s in semiaxes)
    return PhantomParams(
        dims=dims,
        spacing=(spacing, spacing, spacing),
        body_semiaxes=(a + margin_mm / 2, b + margin_mm / 2, c + margin_mm / 2),
        lung_a_range=(a, a),
        lung_b_range=(b, b),
        lung_c_range=(c, c),
        lung_asymmetry=0.0,
        lung_gap_factor=0.0,
        lung_center_dz=0.0,
        heart_enabled=False,
        diaphragm_frac_range=(1.2, 1.2),
        noise_sigma=0.0,
    )


def small_test_params(**overrides) -> PhantomParams:
    """Scaled-down phantom family for fast functional tests (64 px canvas at 6 mm)."""
    base = PhantomParams(
        dims=(88, 72, 96),
        spacing=(2.5, 2.5, 2.5),
        body_semiaxes=(122.0, 95.0, 150.0),
        lung_a_range=(25.0, 52.0),
        lung_b_range=(37.0, 77.0),
        lung_c_range=(56.0, 112.0),
        lung_center_dz=4.0,
    )
    return replace(base, **overrides)
