"""
Procedural CT phantoms, a parallel-beam projector and FBP, polychromatic metal
artifact simulation, metal-trace extraction and LI sinogram inpainting.

All functions are pure: randomness only comes from the explicit seeds.
"""
import math
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Literal, Optional, Tuple

import numpy as np
from scipy import ndimage
from pydantic import BaseModel, ConfigDict, model_validator

from config import SPECTRA
from errors import InvalidArgument, UnrecoverableView

logger = logging.getLogger(__name__)

HU_MIN = -1024.0
HU_MAX = 3072.0
HU_RANGE = HU_MAX - HU_MIN

AIR, SOFT, BONE, METAL = 0, 1, 2, 3
MATERIALS = ("air", "soft", "bone", "metal")
MATERIAL_HU = {"air": -1000.0, "soft": 40.0, "bone": 1000.0}
METAL_HU_RANGE = (3000.0, 8000.0)

RAY_STEP = 0.5  # pixels between bilinear samples along a ray
_MAX_SAMPLES_PER_CHUNK = 2_000_000


class ScanGeometry(BaseModel):
    """Parallel-beam scan geometry; lengths in mm, angles in radians"""
    model_config = ConfigDict(frozen=True)

    n_angles: int = 180
    n_detectors: int = 192
    detector_spacing: float = 1.0
    image_size: int = 128
    pixel_spacing: float = 1.0
    angle_start: float = 0.0
    angle_stop: float = math.pi

    @model_validator(mode="after")
    def _check(self):
        if self.n_angles < 1:
            raise ValueError("n_angles must be >= 1")
        if self.n_detectors < self.image_size:
            raise ValueError("n_detectors must be >= image_size")
        if self.angle_stop <= self.angle_start:
            raise ValueError("angle samples must be strictly increasing")
        diagonal = self.image_size * math.sqrt(2) * self.pixel_spacing
        if self.n_detectors * self.detector_spacing < 0.99 * diagonal:
            raise ValueError(
                f"detector row ({self.n_detectors * self.detector_spacing:.1f} mm) "
                f"does not cover the image diagonal ({diagonal:.1f} mm)"
            )
        return self

    @property
    def angles(self) -> np.ndarray:
        return np.linspace(self.angle_start, self.angle_stop, self.n_angles, endpoint=False)

    @property
    def detector_positions(self) -> np.ndarray:
        return (np.arange(self.n_detectors) - (self.n_detectors - 1) / 2) * self.detector_spacing

    @property
    def shape(self) -> Tuple[int, int]:
        return (self.n_angles, self.n_detectors)


@dataclass
class MetalInsert:
    shape: Literal["ellipse", "rod"]
    center: Tuple[int, int]  # (row, col)
    axes: Tuple[float, float]  # semi-axes in pixels
    angle: float
    hu: float


@dataclass
class Phantom:
    hu_image: np.ndarray
    metal_mask: np.ndarray
    roi_mask: np.ndarray
    material_map: np.ndarray
    inserts: List[MetalInsert] = field(default_factory=list)
    profile: str = "torso-like"
    seed: int = 0

    @property
    def size(self) -> int:
        return self.hu_image.shape[0]


@dataclass
class Sinogram:
    data: np.ndarray
    geometry: ScanGeometry

    def __post_init__(self):
        if self.data.shape != self.geometry.shape:
            raise InvalidArgument(f"sinogram shape {self.data.shape} does not match geometry {self.geometry.shape}")
        if not np.all(np.isfinite(self.data)):
            raise InvalidArgument("sinogram contains non-finite values")


@dataclass
class TraceMask:
    mask: np.ndarray

    @property
    def empty(self) -> bool:
        return not self.mask.any()


@dataclass
class ArtifactPair:
    artifact_image: np.ndarray
    clean_image: np.ndarray
    metal_mask: np.ndarray
    roi_mask: np.ndarray
    domain_tag: Literal["simulated", "clinical"] = "simulated"
    li_image: Optional[np.ndarray] = None


class SpectrumModel(BaseModel):
    """Binned polychromatic spectrum with per-material attenuation (1/mm)"""
    model_config = ConfigDict(frozen=True)

    spectrum_id: str = "custom"
    energies: List[float]
    weights: List[float]
    material_mu: Dict[str, List[float]]
    photon_count: float
    reference: int = 1

    @model_validator(mode="after")
    def _check(self):
        w = np.asarray(self.weights)
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-9:
            raise ValueError("spectrum weights must be nonnegative and sum to 1")
        if len(self.weights) != len(self.energies):
            raise ValueError("one weight per energy bin is required")
        if not 0 <= self.reference < len(self.energies):
            raise ValueError("reference bin out of range")
        if self.photon_count <= 0:
            raise ValueError("photon_count must be positive")
        for name, mu in self.material_mu.items():
            if np.any(np.asarray(mu) < 0):
                raise ValueError(f"negative attenuation for {name}")
        if "metal" in self.material_mu and "bone" in self.material_mu:
            metal, bone = np.asarray(self.material_mu["metal"]), np.asarray(self.material_mu["bone"])
            if metal.shape == bone.shape and not np.all(metal > bone):
                raise ValueError("metal attenuation must exceed bone in every bin")
        return self

    def check_materials(self):
        for name in ("water",) + MATERIALS:
            mu = self.material_mu.get(name)
            if mu is None:
                raise InvalidArgument(f"spectrum {self.spectrum_id} has no attenuation for {name}")
            if len(mu) != len(self.energies):
                raise InvalidArgument(f"spectrum {self.spectrum_id}: {name} has {len(mu)} bins, expected {len(self.energies)}")

    def mu(self, material: str) -> np.ndarray:
        return np.asarray(self.material_mu[material], dtype=np.float64)

    @property
    def water_reference(self) -> float:
        return float(self.material_mu["water"][self.reference])


def build_spectrum(spectrum_id: str, photon_count: float) -> SpectrumModel:
    if spectrum_id not in SPECTRA:
        raise InvalidArgument(f"unknown spectrum id {spectrum_id!r}")
    table = SPECTRA[spectrum_id]
    water = np.asarray(table["material_mu"]["water"], dtype=np.float64)
    material_mu = {
        "water": water.tolist(),
        "air": np.zeros_like(water).tolist(),
        "soft": (water * (1 + MATERIAL_HU["soft"] / 1000)).tolist(),
        "bone": (water * (1 + MATERIAL_HU["bone"] / 1000)).tolist(),
        "metal": list(table["material_mu"]["metal"]),
    }
    return SpectrumModel(
        spectrum_id=spectrum_id,
        energies=table["energies"],
        weights=table["weights"],
        material_mu=material_mu,
        photon_count=photon_count,
        reference=table["reference"],
    )


def hu_normalize(image: np.ndarray) -> np.ndarray:
    image = np.asarray(image, dtype=np.float64)
    if not np.all(np.isfinite(image)):
        raise InvalidArgument("HU image contains non-finite values")
    return (np.clip(image, HU_MIN, HU_MAX) - HU_MIN) / HU_RANGE


def hu_denormalize(image: np.ndarray) -> np.ndarray:
    return np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0) * HU_RANGE + HU_MIN


# ---------------------------------------------------------------------------
# Phantoms
# ---------------------------------------------------------------------------

def _ellipse(yy, xx, cy, cx, a, b, angle=0.0) -> np.ndarray:
    dy, dx = yy - cy, xx - cx
    c, s = math.cos(angle), math.sin(angle)
    u = (dx * c + dy * s) / a
    v = (-dx * s + dy * c) / b
    return u * u + v * v <= 1.0


def _rod(yy, xx, cy, cx, half_length, half_width, angle) -> np.ndarray:
    dy, dx = yy - cy, xx - cx
    c, s = math.cos(angle), math.sin(angle)
    u = dx * c + dy * s
    v = -dx * s + dy * c
    return (np.abs(u) <= half_length) & (np.abs(v) <= half_width)


def make_phantom(
    seed: int,
    profile: Literal["torso-like", "dental-like"] = "torso-like",
    size: int = 128,
    n_metal: Optional[int] = None,
    metal_family: Literal["ellipse", "rod"] = "ellipse",
    smooth: float = 1.0,
) -> Phantom:
    """
    Random anatomy-like phantom in HU. Tissue is blurred by `smooth` pixels
    (partial volume); metal inserts stay sharp and are logged in `inserts`.
    """
    if size < 32:
        raise InvalidArgument(f"phantom size must be >= 32, got {size}")
    if profile not in ("torso-like", "dental-like"):
        raise InvalidArgument(f"unknown phantom profile {profile!r}")

    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    c = (size - 1) / 2
    r = size / 2  # pixels per unit of normalized coordinates

    hu = np.full((size, size), MATERIAL_HU["air"])
    material = np.full((size, size), AIR, dtype=np.uint8)
    anchors: List[Tuple[float, float]] = []

    if profile == "torso-like":
        a, b = rng.uniform(0.80, 0.90) * r, rng.uniform(0.58, 0.68) * r
        body = _ellipse(yy, xx, c, c, a, b)
        hu[body] = rng.uniform(20, 60)
        material[body] = SOFT
        for _ in range(rng.integers(2, 5)):
            oy, ox = c + rng.uniform(-0.4, 0.4) * b, c + rng.uniform(-0.5, 0.5) * a
            organ = _ellipse(yy, xx, oy, ox, rng.uniform(0.08, 0.2) * r, rng.uniform(0.06, 0.15) * r,
                             rng.uniform(0, math.pi)) & body
            hu[organ] = rng.uniform(-100, 80)
        spine_y = c + 0.55 * b
        spine = _ellipse(yy, xx, spine_y, c, 0.10 * r, 0.09 * r) & body
        hu[spine] = rng.uniform(700, 1200)
        material[spine] = BONE
        anchors.append((spine_y, c))
        for side in (-1, 1):
            hy, hx = c + rng.uniform(-0.1, 0.2) * b, c + side * 0.6 * a
            hip = _ellipse(yy, xx, hy, hx, rng.uniform(0.07, 0.11) * r, rng.uniform(0.09, 0.14) * r) & body
            hu[hip] = rng.uniform(500, 1000)
            material[hip] = BONE
            anchors.append((hy, hx))
    else:
        a, b = rng.uniform(0.68, 0.78) * r, rng.uniform(0.76, 0.86) * r
        body = _ellipse(yy, xx, c, c, a, b)
        hu[body] = rng.uniform(20, 60)
        material[body] = SOFT
        airway = _ellipse(yy, xx, c - 0.1 * b, c, 0.08 * r, 0.12 * r) & body
        hu[airway] = -900.0
        material[airway] = AIR
        ry, rx = yy - (c - 0.15 * b), xx - c
        rad = np.hypot(ry, rx)
        r_in, r_out = 0.42 * min(a, b), 0.56 * min(a, b)
        mandible = (rad >= r_in) & (rad <= r_out) & (ry >= -0.1 * r) & body
        hu[mandible] = rng.uniform(1200, 1800)
        material[mandible] = BONE
        n_teeth = int(rng.integers(8, 13))
        r_mid = 0.5 * (r_in + r_out)
        for theta in np.linspace(0.15 * math.pi, 0.85 * math.pi, n_teeth):
            ty, tx = (c - 0.15 * b) + r_mid * math.sin(theta), c + r_mid * math.cos(theta)
            tooth = _ellipse(yy, xx, ty, tx, 0.045 * r, 0.035 * r, theta) & body
            hu[tooth] = rng.uniform(1800, 2200)
            material[tooth] = BONE
            anchors.append((ty, tx))

    if smooth > 0:
        hu = ndimage.gaussian_filter(hu, smooth)

    n_metal = int(rng.integers(1, 5)) if n_metal is None else n_metal
    if not 0 <= n_metal <= 4:
        raise InvalidArgument(f"n_metal must be in [0, 4], got {n_metal}")

    metal = np.zeros((size, size), dtype=bool)
    inserts: List[MetalInsert] = []
    body_idx = np.argwhere(ndimage.binary_erosion(body, iterations=max(2, size // 16)))
    for i in range(n_metal):
        if profile == "dental-like" and i < len(anchors):
            cy, cx = anchors[int(rng.integers(0, len(anchors)))]
        elif rng.uniform() < 0.5 and anchors:
            cy, cx = anchors[int(rng.integers(0, len(anchors)))]
        else:
            cy, cx = body_idx[int(rng.integers(0, len(body_idx)))]
        center = (int(round(cy)), int(round(cx)))
        angle = float(rng.uniform(0, math.pi))
        if metal_family == "ellipse":
            axes = (max(1.0, rng.uniform(0.03, 0.08) * r), max(1.0, rng.uniform(0.03, 0.08) * r))
            shape = _ellipse(yy, xx, center[0], center[1], axes[0], axes[1], angle)
        else:
            axes = (max(2.0, rng.uniform(0.10, 0.22) * r), max(0.75, rng.uniform(0.015, 0.03) * r))
            shape = _rod(yy, xx, center[0], center[1], axes[0], axes[1], angle)
        shape &= body
        value = float(rng.uniform(*METAL_HU_RANGE))
        hu[shape] = value
        metal |= shape
        inserts.append(MetalInsert(metal_family, center, axes, angle, value))

    material[metal] = METAL
    hu = np.maximum(hu, HU_MIN)
    roi = body & ~metal
    return Phantom(hu, metal, roi, material, inserts, profile, seed)


# ---------------------------------------------------------------------------
# Projection and reconstruction
# ---------------------------------------------------------------------------

def _check_image(image: np.ndarray, geometry: ScanGeometry) -> np.ndarray:
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 2 or image.shape[0] != image.shape[1]:
        raise InvalidArgument(f"image must be square 2-D, got shape {image.shape}")
    if not np.all(np.isfinite(image)):
        raise InvalidArgument("image contains non-finite values")
    if image.shape[0] != geometry.image_size:
        raise InvalidArgument(f"image size {image.shape[0]} does not match geometry {geometry.image_size}")
    return image


def forward_project(image: np.ndarray, geometry: ScanGeometry) -> Sinogram:
    """
    Ray-driven projector. Each ray is sampled every RAY_STEP pixels with
    bilinear interpolation (zero outside the grid) and summed times the step
    length in mm, so the result is linear in the image.
    """
    image = _check_image(image, geometry)
    n, ps = geometry.image_size, geometry.pixel_spacing
    center = (n - 1) / 2
    s = geometry.detector_positions
    half = n * ps * math.sqrt(2) / 2 + ps
    step = RAY_STEP * ps
    t = -half + step * np.arange(int(math.ceil(2 * half / step)) + 1)

    angles = geometry.angles
    data = np.empty(geometry.shape)
    per_view = s.size * t.size
    chunk = max(1, _MAX_SAMPLES_PER_CHUNK // per_view)
    for start in range(0, angles.size, chunk):
        theta = angles[start:start + chunk]
        cos, sin = np.cos(theta)[:, None, None], np.sin(theta)[:, None, None]
        x = s[None, :, None] * cos - t[None, None, :] * sin
        y = s[None, :, None] * sin + t[None, None, :] * cos
        coords = np.stack([(y / ps + center).ravel(), (x / ps + center).ravel()])
        samples = ndimage.map_coordinates(image, coords, order=1, mode="constant", cval=0.0)
        data[start:start + theta.size] = samples.reshape(theta.size, s.size, t.size).sum(-1) * step
    return Sinogram(data, geometry)


def _ramp_filter(n_pad: int) -> np.ndarray:
    # Spatial-domain Ram-Lak kernel for unit spacing, taken to the frequency domain.
    n = np.concatenate((np.arange(1, n_pad // 2 + 1, 2), np.arange(n_pad // 2 - 1, 0, -2)))
    kernel = np.zeros(n_pad)
    kernel[0] = 0.25
    kernel[1::2] = -1 / (np.pi * n) ** 2
    return np.real(np.fft.fft(kernel))


def fbp_reconstruct(sino: Sinogram) -> np.ndarray:
    """Ram-Lak filtered backprojection onto the geometry's image grid (1/mm)"""
    g = sino.geometry
    data = np.asarray(sino.data, dtype=np.float64)
    if data.shape != g.shape:
        raise InvalidArgument(f"sinogram shape {data.shape} does not match geometry {g.shape}")
    if not np.all(np.isfinite(data)):
        raise InvalidArgument("sinogram contains non-finite values")

    n_pad = max(64, int(2 ** math.ceil(math.log2(2 * g.n_detectors))))
    padded = np.zeros((g.n_angles, n_pad))
    padded[:, :g.n_detectors] = data
    filtered = np.real(np.fft.ifft(np.fft.fft(padded, axis=1) * _ramp_filter(n_pad), axis=1))
    filtered = filtered[:, :g.n_detectors] / g.detector_spacing

    n, ps = g.image_size, g.pixel_spacing
    coord = (np.arange(n) - (n - 1) / 2) * ps
    y, x = np.meshgrid(coord, coord, indexing="ij")
    s = g.detector_positions
    image = np.zeros((n, n))
    for projection, theta in zip(filtered, g.angles):
        image += np.interp(x * math.cos(theta) + y * math.sin(theta), s, projection, left=0.0, right=0.0)
    return image * (math.pi / g.n_angles)


def metal_trace(metal_mask: np.ndarray, geometry: ScanGeometry) -> TraceMask:
    mask = np.asarray(metal_mask)
    if mask.shape != (geometry.image_size, geometry.image_size):
        raise InvalidArgument(f"metal mask shape {mask.shape} does not match geometry")
    return TraceMask(forward_project(mask.astype(np.float64), geometry).data > 0)


def li_interpolate(sino: Sinogram, trace: TraceMask) -> Sinogram:
    """
    Replace every traced run of each view by linear interpolation between its
    nearest untraced neighbors; runs at a detector edge take the single
    neighbor's value.
    """
    if trace.mask.shape != sino.data.shape:
        raise InvalidArgument(f"trace shape {trace.mask.shape} does not match sinogram {sino.data.shape}")
    data = sino.data.copy()
    index = np.arange(data.shape[1])
    for view in np.flatnonzero(trace.mask.any(axis=1)):
        traced = trace.mask[view]
        if traced.all():
            raise UnrecoverableView(f"view {view} is entirely inside the metal trace")
        kept = ~traced
        data[view, traced] = np.interp(index[traced], index[kept], data[view, kept])
    return Sinogram(data, sino.geometry)


# ---------------------------------------------------------------------------
# Metal artifact simulation
# ---------------------------------------------------------------------------

def water_precorrection(spectrum: SpectrumModel, n_points: int = 4096):
    """
    Lookup table mapping polychromatic water attenuation -log(I/I0) to the
    monochromatic line integral at the reference energy.
    """
    water = spectrum.mu("water")
    weights = np.asarray(spectrum.weights)
    l_max = (math.log(spectrum.photon_count) + 5.0) / water.min()
    lengths = np.linspace(0.0, l_max, n_points)
    poly = -np.log(np.exp(-np.outer(lengths, water)) @ weights)
    return poly, lengths * spectrum.water_reference


def _mu_to_hu(mu: np.ndarray, spectrum: SpectrumModel) -> np.ndarray:
    return 1000.0 * (mu / spectrum.water_reference - 1.0)


def _material_projections(phantom: Phantom, spectrum: SpectrumModel, geometry: ScanGeometry):
    hu, metal = phantom.hu_image, phantom.metal_mask
    metal_ref = spectrum.mu("metal")[spectrum.reference]
    water_equiv = np.where(metal, 0.0, np.clip(1.0 + hu / 1000.0, 0.0, None))
    metal_scale = np.where(metal, spectrum.water_reference * (1.0 + hu / 1000.0) / metal_ref, 0.0)
    p_water = forward_project(water_equiv, geometry).data
    p_metal = forward_project(metal_scale, geometry).data
    p_fill = forward_project(metal.astype(np.float64), geometry).data
    return p_water, p_metal, p_fill


def _check_consistent(phantom: Phantom, spectrum: SpectrumModel, geometry: ScanGeometry):
    if phantom.size != geometry.image_size:
        raise InvalidArgument(f"phantom size {phantom.size} does not match geometry {geometry.image_size}")
    spectrum.check_materials()


def simulate_metal_artifact(
    phantom: Phantom,
    spectrum: SpectrumModel,
    geometry: ScanGeometry,
    noise_seed: int,
    domain_tag: Literal["simulated", "clinical"] = "simulated",
) -> ArtifactPair:
    """
    Polychromatic Poisson scan of the phantom reconstructed with water
    precorrection and FBP (artifact image), against FBP of the noise-free
    monochromatic scan with metal replaced by water (clean image). Metal HU
    are re-inserted into both. The LI reconstruction of the same scan is
    attached as `li_image`.
    """
    _check_consistent(phantom, spectrum, geometry)
    p_water, p_metal, p_fill = _material_projections(phantom, spectrum, geometry)

    water, metal_mu = spectrum.mu("water"), spectrum.mu("metal")
    line = water[:, None, None] * p_water[None] + metal_mu[:, None, None] * p_metal[None]
    weights = np.asarray(spectrum.weights)[:, None, None]
    expected = spectrum.photon_count * np.sum(weights * np.exp(-line), axis=0)

    rng = np.random.default_rng(noise_seed)
    counts = np.maximum(rng.poisson(expected).astype(np.float64), 1.0)
    poly = -np.log(counts / spectrum.photon_count)
    table_poly, table_mono = water_precorrection(spectrum)
    measured = Sinogram(np.interp(poly, table_poly, table_mono), geometry)

    metal = phantom.metal_mask
    metal_hu = phantom.hu_image[metal]

    artifact_hu = _mu_to_hu(fbp_reconstruct(measured), spectrum)
    clean_mono = Sinogram(spectrum.water_reference * (p_water + p_fill), geometry)
    clean_hu = _mu_to_hu(fbp_reconstruct(clean_mono), spectrum)
    li_hu = _mu_to_hu(fbp_reconstruct(li_interpolate(measured, TraceMask(p_fill > 0))), spectrum)
    for image in (artifact_hu, clean_hu, li_hu):
        image[metal] = metal_hu

    return ArtifactPair(
        artifact_image=hu_normalize(artifact_hu),
        clean_image=hu_normalize(clean_hu),
        metal_mask=metal.copy(),
        roi_mask=phantom.roi_mask.copy(),
        domain_tag=domain_tag,
        li_image=hu_normalize(li_hu),
    )


def quantum_noise_floor(
    phantom: Phantom,
    spectrum: SpectrumModel,
    geometry: ScanGeometry,
    seeds,
) -> float:
    """
    Mean roi RMSE (normalized units) that Poisson noise alone causes in a
    monochromatic scan at the spectrum's photon count.
    """
    _check_consistent(phantom, spectrum, geometry)
    p_water, _, p_fill = _material_projections(phantom, spectrum, geometry)
    mono = spectrum.water_reference * (p_water + p_fill)
    reference = hu_normalize(_mu_to_hu(fbp_reconstruct(Sinogram(mono, geometry)), spectrum))
    roi = phantom.roi_mask

    errors = []
    for seed in seeds:
        rng = np.random.default_rng(seed)
        counts = np.maximum(rng.poisson(spectrum.photon_count * np.exp(-mono)).astype(np.float64), 1.0)
        noisy = Sinogram(-np.log(counts / spectrum.photon_count), geometry)
        image = hu_normalize(_mu_to_hu(fbp_reconstruct(noisy), spectrum))
        errors.append(math.sqrt(np.mean((image[roi] - reference[roi]) ** 2)))
    return float(np.mean(errors))


def domain_geometry(image_size: int, n_angles: int, pixel_spacing: float,
                    n_detectors: int, detector_spacing: float) -> ScanGeometry:
    try:
        return ScanGeometry(
            n_angles=n_angles, n_detectors=n_detectors, detector_spacing=detector_spacing,
            image_size=image_size, pixel_spacing=pixel_spacing,
        )
    except ValueError as e:
        raise InvalidArgument(str(e)) from e
