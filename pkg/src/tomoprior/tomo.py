"""Parallel-beam acquisition model on the normalized [-1,1]^2 frame.

The forward projector integrates bilinearly interpolated image values
along rays with a fixed midpoint step; the backprojector scatters the
exact same sampling weights, so the pair is an adjoint up to float
round-off. All numerics here run in float64.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DataMismatchError


@dataclass
class ImageGrid:
    """Square pixel grid of attenuation values spanning [-1,1]^2."""

    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise ValueError("ImageGrid expects a 2-D array")
        h, w = self.values.shape
        if h < 8 or w < 8:
            raise ValueError(f"ImageGrid too small: {h}x{w}")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("ImageGrid values must be finite")

    @property
    def shape(self):
        return self.values.shape

    @property
    def pixel_size(self):
        return 2.0 / max(self.values.shape)


@dataclass
class ScanGeometry:
    """View angles (degrees), detector layout and ray sampling step."""

    angles: np.ndarray
    detector_bins: int
    detector_spacing: float
    ray_step: float

    def __post_init__(self):
        self.angles = np.asarray(self.angles, dtype=np.float64)
        if self.angles.size == 0:
            raise ValueError("geometry has an empty angle set")
        if np.any(self.angles < 0) or np.any(self.angles >= 360):
            raise ValueError("angles must lie in [0, 360)")
        if np.any(np.diff(self.angles) <= 0):
            raise ValueError("angles must be strictly increasing")
        if self.detector_bins < 8:
            raise ValueError("detector_bins must be >= 8")
        if self.detector_spacing <= 0 or self.ray_step <= 0:
            raise ValueError("detector_spacing and ray_step must be positive")

    @property
    def n_views(self):
        return len(self.angles)

    def bin_centers(self):
        b = self.detector_bins
        return (np.arange(b) - (b - 1) / 2.0) * self.detector_spacing

    def fingerprint(self):
        return (self.angles.tobytes(), self.detector_bins, self.detector_spacing, self.ray_step)


@dataclass
class Sinogram:
    values: np.ndarray
    geometry: ScanGeometry

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        expect = (self.geometry.n_views, self.geometry.detector_bins)
        if self.values.shape != expect:
            raise DataMismatchError(f"sinogram shape {self.values.shape} != geometry {expect}")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("sinogram values must be finite")


@dataclass
class Ray:
    """Line p(s) = origin + s*direction, clipped to the image square."""

    origin: np.ndarray
    direction: np.ndarray
    entry: float
    exit: float

    def __post_init__(self):
        self.origin = np.asarray(self.origin, dtype=np.float64)
        self.direction = np.asarray(self.direction, dtype=np.float64)
        if abs(np.linalg.norm(self.direction) - 1.0) > 1e-9:
            raise ValueError("ray direction must be a unit vector")
        if self.exit < self.entry:
            raise ValueError("ray exit parameter before entry")


def make_geometry(mode, base_views=180, detector_bins=64, *, range_deg=None, view_count=None,
                  detector_spacing=None, ray_step=None) -> ScanGeometry:
    """Build a scan geometry for one of the acquisition modes.

    mode: "full" (base_views uniform over [0,180)), "limited_angle"
    (uniform over [0,range_deg) at the full-scan angular density) or
    "sparse_view" (view_count uniform over [0,180)).
    """
    if mode == "full":
        angles = np.arange(base_views) * (180.0 / base_views)
    elif mode == "limited_angle":
        if range_deg is None or not (0 < range_deg <= 180):
            raise ValueError("limited_angle needs range_deg in (0,180]")
        n = max(1, int(round(base_views * range_deg / 180.0)))
        angles = np.arange(n) * (range_deg / n)
    elif mode == "sparse_view":
        if view_count is None or view_count < 1:
            raise ValueError("sparse_view needs view_count >= 1")
        angles = np.arange(view_count) * (180.0 / view_count)
    else:
        raise ValueError(f"unknown geometry mode {mode!r}")
    spacing = detector_spacing if detector_spacing is not None else 2.0 / detector_bins
    step = ray_step if ray_step is not None else 0.5 * spacing
    return ScanGeometry(angles=angles, detector_bins=detector_bins,
                        detector_spacing=spacing, ray_step=step)


# ---- ray construction ---------------------------------------------------


def _angle_vectors(theta_deg):
    t = math.radians(theta_deg)
    normal = np.array([math.cos(t), math.sin(t)])
    direction = np.array([-math.sin(t), math.cos(t)])
    return normal, direction


def _clip_span(origins, direction, lo=-1.0, hi=1.0):
    """Entry/exit parameters of p(s)=o+s*d against the [lo,hi]^2 square."""
    n = origins.shape[0]
    entry = np.full(n, -np.inf)
    exit_ = np.full(n, np.inf)
    for axis in range(2):
        o = origins[:, axis]
        d = direction[axis]
        if abs(d) < 1e-12:
            bad = (o < lo) | (o > hi)
            entry[bad] = np.inf
            exit_[bad] = -np.inf
        else:
            t0 = (lo - o) / d
            t1 = (hi - o) / d
            lo_t = np.minimum(t0, t1)
            hi_t = np.maximum(t0, t1)
            entry = np.maximum(entry, lo_t)
            exit_ = np.minimum(exit_, hi_t)
    exit_ = np.maximum(exit_, entry)  # empty intersection -> zero-length span
    return entry, exit_


def geometry_rays(geom: ScanGeometry) -> list[Ray]:
    """All measured rays, angle-major / bin-minor, matching sinogram layout."""
    rays = []
    rho = geom.bin_centers()
    for theta in geom.angles:
        normal, direction = _angle_vectors(theta)
        origins = rho[:, None] * normal[None, :]
        entry, exit_ = _clip_span(origins, direction)
        for i in range(geom.detector_bins):
            rays.append(Ray(origins[i], direction.copy(), float(entry[i]), float(exit_[i])))
    return rays


def ray_midpoints(origins, direction, entry, exit_, dp):
    """Midpoint sample positions along rays, padded to the longest ray.

    Returns (points (R, K, 2), mask (R, K), counts (R,)).
    """
    nsamp = np.ceil((exit_ - entry) / dp - 1e-9).astype(np.int64)
    nsamp = np.maximum(nsamp, 0)
    kmax = int(nsamp.max()) if nsamp.size else 0
    if kmax == 0:
        return np.zeros((len(entry), 0, 2)), np.zeros((len(entry), 0), dtype=bool), nsamp
    k = np.arange(kmax)
    s = entry[:, None] + (k[None, :] + 0.5) * dp
    mask = k[None, :] < nsamp[:, None]
    pts = origins[:, None, :] + s[:, :, None] * direction[None, None, :]
    return pts, mask, nsamp


# ---- bilinear sampling ---------------------------------------------------


def bilinear_weights(points, shape):
    """Bilinear footprint of each point on an HxW grid spanning [-1,1]^2.

    Returns (flat_idx (4, M), weights (4, M)); zero weights outside the
    support.
    """
    h, w = shape
    px = 2.0 / max(h, w)
    fx = (points[..., 0] + 1.0) / px - 0.5
    fy = (points[..., 1] + 1.0) / px - 0.5
    x0 = np.floor(fx).astype(np.int64)
    y0 = np.floor(fy).astype(np.int64)
    wx = fx - x0
    wy = fy - y0

    idx = np.empty((4,) + points.shape[:-1], dtype=np.int64)
    wgt = np.empty((4,) + points.shape[:-1], dtype=np.float64)
    for c, (dy, dx) in enumerate(((0, 0), (0, 1), (1, 0), (1, 1))):
        yy = y0 + dy
        xx = x0 + dx
        valid = (yy >= 0) & (yy < h) & (xx >= 0) & (xx < w)
        wgt[c] = ((wy if dy else 1 - wy) * (wx if dx else 1 - wx)) * valid
        idx[c] = np.clip(yy, 0, h - 1) * w + np.clip(xx, 0, w - 1)
    return idx.reshape(4, -1), wgt.reshape(4, -1)


def bilinear_sample(values, points):
    """Sample an HxW grid at (..., 2) points; zero outside the support."""
    idx, wgt = bilinear_weights(points, values.shape)
    flat = values.reshape(-1)
    out = (flat[idx] * wgt).sum(axis=0)
    return out.reshape(points.shape[:-1])


def pixel_centers(shape):
    """(H*W, 2) array of pixel-center coordinates, row-major."""
    h, w = shape
    px = 2.0 / max(h, w)
    xs = -1.0 + (np.arange(w) + 0.5) * px
    ys = -1.0 + (np.arange(h) + 0.5) * px
    gx, gy = np.meshgrid(xs, ys)
    return np.stack([gx.reshape(-1), gy.reshape(-1)], axis=1)


# ---- projector / adjoint -------------------------------------------------


def project_grid(image: ImageGrid, geom: ScanGeometry) -> Sinogram:
    """Forward projection: midpoint Riemann sums of bilinear lookups."""
    values = image.values
    rho = geom.bin_centers()
    dp = geom.ray_step
    sino = np.zeros((geom.n_views, geom.detector_bins))
    for ai, theta in enumerate(geom.angles):
        normal, direction = _angle_vectors(theta)
        origins = rho[:, None] * normal[None, :]
        entry, exit_ = _clip_span(origins, direction)
        pts, mask, _ = ray_midpoints(origins, direction, entry, exit_, dp)
        if pts.shape[1] == 0:
            continue
        vals = bilinear_sample(values, pts) * mask
        sino[ai] = vals.sum(axis=1) * dp
    return Sinogram(sino, geom)


def backproject(sino: Sinogram) -> ImageGrid:
    """Exact adjoint of project_grid for the same geometry and grid shape.

    The grid shape is detector_bins x detector_bins (the shape the
    projector was matched against); pass ``shape`` via
    ``backproject_to`` for other grids.
    """
    return backproject_to(sino, (sino.geometry.detector_bins, sino.geometry.detector_bins))


def backproject_to(sino: Sinogram, shape) -> ImageGrid:
    geom = sino.geometry
    rho = geom.bin_centers()
    dp = geom.ray_step
    h, w = shape
    acc = np.zeros(h * w)
    for ai, theta in enumerate(geom.angles):
        normal, direction = _angle_vectors(theta)
        origins = rho[:, None] * normal[None, :]
        entry, exit_ = _clip_span(origins, direction)
        pts, mask, _ = ray_midpoints(origins, direction, entry, exit_, dp)
        if pts.shape[1] == 0:
            continue
        idx, wgt = bilinear_weights(pts, (h, w))
        contrib = (sino.values[ai][:, None] * mask * dp).reshape(-1)
        for c in range(4):
            acc += np.bincount(idx[c], weights=wgt[c] * contrib, minlength=h * w)
    return ImageGrid(acc.reshape(h, w))


# ---- filtered back projection ---------------------------------------------


def _next_pow2(n):
    return 1 << (int(n) - 1).bit_length()


def _ramp_filter_response(nfft, spacing):
    """Frequency response of the band-limited spatial ramp kernel.

    Sampling |f| directly biases DC and cups the reconstruction; the DFT of
    the discretized kernel is the standard fix.
    """
    f = np.zeros(nfft)
    f[0] = 0.25
    odd = np.arange(1, nfft // 2, 2)
    f[odd] = -1.0 / (np.pi * odd) ** 2
    f[-odd] = -1.0 / (np.pi * odd) ** 2
    return np.real(np.fft.rfft(f)) / spacing


def fbp(sino: Sinogram, filter_name="ram_lak", shape=None, upsample=4) -> ImageGrid:
    """Ramp-filtered (or plain) normalized pixel-driven backprojection.

    Filtering happens in the frequency domain on rows zero-padded to the
    next power of two; filtered rows are band-limit upsampled before the
    linear detector interpolation to keep interpolation error small.
    """
    geom = sino.geometry
    if geom.n_views < 2:
        raise ValueError("fbp needs at least 2 views")
    if filter_name not in ("ram_lak", "none"):
        raise ValueError(f"unknown fbp filter {filter_name!r}")
    if shape is None:
        shape = (geom.detector_bins, geom.detector_bins)
    b = geom.detector_bins
    rows = sino.values
    rho = geom.bin_centers()
    if filter_name == "ram_lak":
        nfft = _next_pow2(2 * b)
        ramp = _ramp_filter_response(nfft, geom.detector_spacing)
        padded = np.zeros((geom.n_views, nfft))
        padded[:, :b] = rows
        spec = np.fft.rfft(padded, axis=1) * ramp[None, :]
        if upsample > 1:
            nup = nfft * upsample
            spec_up = np.zeros((geom.n_views, nup // 2 + 1), dtype=complex)
            spec_up[:, : spec.shape[1]] = spec
            rows = np.fft.irfft(spec_up, n=nup, axis=1)[:, : b * upsample] * upsample
            rho = rho[0] + np.arange(b * upsample) * (geom.detector_spacing / upsample)
        else:
            rows = np.fft.irfft(spec, n=nfft, axis=1)[:, :b]

    h, w = shape
    centers = pixel_centers(shape)
    acc = np.zeros(h * w)
    for ai, theta in enumerate(geom.angles):
        t = math.radians(theta)
        r = centers[:, 0] * math.cos(t) + centers[:, 1] * math.sin(t)
        acc += np.interp(r, rho, rows[ai], left=0.0, right=0.0)
    acc *= math.pi / geom.n_views
    return ImageGrid(acc.reshape(h, w))


# ---- function-space ray integration ---------------------------------------


def integrate_rays(field, rays, dp):
    """Midpoint Riemann sums of a coordinate->intensity field along rays.

    ``field`` maps an (M,2) array to (M,) intensities.
    """
    if dp <= 0:
        raise ValueError("dp must be positive")
    if not rays:
        return np.zeros(0)
    origins = np.stack([r.origin for r in rays])
    entry = np.array([r.entry for r in rays])
    exit_ = np.array([r.exit for r in rays])
    out = np.zeros(len(rays))
    # group rays by direction so shared-direction bundles vectorize
    dirs = np.stack([r.direction for r in rays])
    order = np.lexsort((dirs[:, 1], dirs[:, 0]))
    start = 0
    while start < len(rays):
        stop = start
        while stop < len(rays) and np.array_equal(dirs[order[stop]], dirs[order[start]]):
            stop += 1
        sel = order[start:stop]
        pts, mask, _ = ray_midpoints(origins[sel], dirs[sel[0]], entry[sel], exit_[sel], dp)
        if pts.shape[1]:
            vals = np.asarray(field(pts.reshape(-1, 2))).reshape(pts.shape[:2])
            if not np.all(np.isfinite(vals)):
                raise ValueError("field returned non-finite values")
            out[sel] = (vals * mask).sum(axis=1) * dp
        start = stop
    return out


# ---- noise models ----------------------------------------------------------


def add_poisson_noise(sino: Sinogram, b, r, seed) -> Sinogram:
    """Photon-count noise: Y ~ Poisson(b*exp(-y) + r), y' = -ln(max(Y,1)/b)."""
    if b <= 0:
        raise ValueError("incident photon count b must be positive")
    if r < 0:
        raise ValueError("background mean r must be nonnegative")
    if np.any(sino.values < -1e-12):
        raise ValueError("poisson model needs nonnegative sinogram values")
    rng = np.random.default_rng(seed)
    lam = b * np.exp(-np.maximum(sino.values, 0.0)) + r
    counts = rng.poisson(lam).astype(np.float64)
    noisy = -np.log(np.maximum(counts, 1.0) / b)
    return Sinogram(noisy, sino.geometry)


def add_gaussian_noise(sino: Sinogram, variance, seed) -> Sinogram:
    if variance < 0:
        raise ValueError("variance must be nonnegative")
    if variance == 0:
        return Sinogram(sino.values.copy(), sino.geometry)
    rng = np.random.default_rng(seed)
    noisy = sino.values + rng.normal(0.0, math.sqrt(variance), size=sino.values.shape)
    return Sinogram(noisy, sino.geometry)


# ---- coverage --------------------------------------------------------------


def coverage_mask(geom: ScanGeometry, shape, mode="all") -> np.ndarray:
    """Boolean HxW mask of pixels seen by measured rays.

    mode="all": pixel lies on a measured ray of every view (fully
    constrained region); mode="any": at least one view sees it. For a
    limited-angle scan the "all" complement is the unmeasured corner
    wedge along the bisector of the scanned range.
    """
    centers = pixel_centers(shape)
    half_span = (geom.detector_bins / 2.0) * geom.detector_spacing
    seen = np.ones(centers.shape[0], dtype=bool) if mode == "all" else np.zeros(centers.shape[0], dtype=bool)
    for theta in geom.angles:
        t = math.radians(theta)
        r = centers[:, 0] * math.cos(t) + centers[:, 1] * math.sin(t)
        if mode == "all":
            seen &= np.abs(r) <= half_span
        else:
            seen |= np.abs(r) <= half_span
    return seen.reshape(shape)
