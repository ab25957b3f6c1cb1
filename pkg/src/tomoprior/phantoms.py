"""Synthetic ellipse phantoms: canonical test objects and a training corpus."""

from __future__ import annotations

import hashlib
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import DataMismatchError
from .rawio import read_manifest, tpraw_bytes, write_manifest, write_tpraw
from .tomo import ImageGrid

GENERATOR_VERSION = "ellipse-v1"


@dataclass
class Ellipse:
    cx: float
    cy: float
    a: float
    b: float
    rot_deg: float
    value: float


@dataclass
class EllipsePhantomSpec:
    ellipses: list[Ellipse] = field(default_factory=list)
    clamp: tuple[float, float] = (0.0, 1.0)


def render_phantom(spec: EllipsePhantomSpec, size: int, supersample: int = 4) -> ImageGrid:
    """Rasterize additive ellipses; supersampled so edges are anti-aliased."""
    if size < 32:
        raise ValueError("phantom size must be >= 32")
    n = size * supersample
    px = 2.0 / n
    xs = -1.0 + (np.arange(n) + 0.5) * px
    gx, gy = np.meshgrid(xs, xs)
    img = np.zeros((n, n))
    for e in spec.ellipses:
        t = np.radians(e.rot_deg)
        dx = gx - e.cx
        dy = gy - e.cy
        u = dx * np.cos(t) + dy * np.sin(t)
        v = -dx * np.sin(t) + dy * np.cos(t)
        img[(u / e.a) ** 2 + (v / e.b) ** 2 <= 1.0] += e.value
    if supersample > 1:
        img = img.reshape(size, supersample, size, supersample).mean(axis=(1, 3))
    return ImageGrid(np.clip(img, *spec.clamp))


# Toft's 10-ellipse head phantom: (value, a, b, cx, cy, rot_deg)
_SHEPP_LOGAN = [
    (1.00, 0.6900, 0.9200, 0.00, 0.0000, 0.0),
    (-0.80, 0.6624, 0.8740, 0.00, -0.0184, 0.0),
    (-0.20, 0.1100, 0.3100, 0.22, 0.0000, -18.0),
    (-0.20, 0.1600, 0.4100, -0.22, 0.0000, 18.0),
    (0.10, 0.2100, 0.2500, 0.00, 0.3500, 0.0),
    (0.10, 0.0460, 0.0460, 0.00, 0.1000, 0.0),
    (0.10, 0.0460, 0.0460, 0.00, -0.1000, 0.0),
    (0.10, 0.0460, 0.0230, -0.08, -0.6050, 0.0),
    (0.10, 0.0230, 0.0230, 0.00, -0.6050, 0.0),
    (0.10, 0.0230, 0.0460, 0.06, -0.6050, 0.0),
]


def shepp_logan(size: int) -> ImageGrid:
    """10-ellipse Shepp-Logan head phantom on [0,1]."""
    spec = EllipsePhantomSpec(
        [Ellipse(cx, cy, a, b, rot, val) for val, a, b, cx, cy, rot in _SHEPP_LOGAN]
    )
    return render_phantom(spec, size)


def random_phantom_spec(rng: np.random.Generator, count_range=(4, 10)) -> EllipsePhantomSpec:
    """Nested-ellipse phantom: body outline, optional rim, internal blobs.

    Every ellipse is shrunk if needed so it stays inside the unit disk.
    """
    lo, hi = count_range
    count = int(rng.integers(lo, hi + 1))
    ellipses = []

    cx, cy = rng.uniform(-0.08, 0.08, size=2)
    a = rng.uniform(0.55, 0.82)
    b = rng.uniform(0.55, 0.82)
    rot = rng.uniform(0.0, 180.0)
    body_val = rng.uniform(0.45, 0.95)
    a, b = _fit_in_disk(cx, cy, a, b)
    ellipses.append(Ellipse(cx, cy, a, b, rot, body_val))
    inner_a, inner_b = a, b

    remaining = count - 1
    if remaining > 0 and rng.random() < 0.6:
        shrink = rng.uniform(0.86, 0.95)
        rim_drop = -body_val * rng.uniform(0.35, 0.75)
        inner_a, inner_b = a * shrink, b * shrink
        ellipses.append(Ellipse(cx, cy, inner_a, inner_b, rot, rim_drop))
        remaining -= 1

    inner_r = 0.8 * min(inner_a, inner_b)
    for _ in range(remaining):
        radius = rng.uniform(0.0, inner_r)
        phi = rng.uniform(0.0, 2 * np.pi)
        ex = cx + radius * np.cos(phi)
        ey = cy + radius * np.sin(phi)
        ea = rng.uniform(0.03, 0.30)
        eb = rng.uniform(0.03, 0.30)
        erot = rng.uniform(0.0, 180.0)
        sign = 1.0 if rng.random() < 0.55 else -1.0
        val = sign * rng.uniform(0.08, 0.40)
        ea, eb = _fit_in_disk(ex, ey, ea, eb)
        ellipses.append(Ellipse(ex, ey, ea, eb, erot, val))
    return EllipsePhantomSpec(ellipses)


def _fit_in_disk(cx, cy, a, b, margin=0.98):
    room = margin - float(np.hypot(cx, cy))
    biggest = max(a, b)
    if biggest > room:
        scale = max(room, 1e-3) / biggest
        return a * scale, b * scale
    return a, b


def gen_ellipse_phantom(seed, size, count_range=(4, 10)) -> ImageGrid:
    """Deterministic random phantom; values clamped to [0,1]."""
    rng = np.random.default_rng([int(seed), 0x70A17])
    return render_phantom(random_phantom_spec(rng, count_range), size)


# ---- dataset persistence ----------------------------------------------------


def _phantom_filename(i):
    return f"phantom_{i:05d}.tpraw"


def build_dataset(count, size, seed, outdir, count_range=(4, 10)):
    """Write `count` phantom TPRAW files plus a manifest; returns manifest path."""
    if count < 1:
        raise ValueError("count must be >= 1")
    os.makedirs(outdir, exist_ok=True)
    digest = hashlib.sha256()
    for i in range(count):
        img = gen_ellipse_phantom(seed + i, size, count_range)
        payload = tpraw_bytes(img.values)
        digest.update(payload)
        with open(os.path.join(outdir, _phantom_filename(i)), "wb") as f:
            f.write(payload)
    manifest = {
        "format": "tomoprior-dataset-v1",
        "generator": GENERATOR_VERSION,
        "seed": seed,
        "count": count,
        "size": size,
        "count_min": count_range[0],
        "count_max": count_range[1],
        "sha256": digest.hexdigest(),
    }
    path = os.path.join(outdir, "manifest.txt")
    write_manifest(path, manifest)
    return path


def verify_dataset(outdir):
    """Regenerate from the manifest seed and compare hashes; raises on mismatch."""
    manifest = read_manifest(os.path.join(outdir, "manifest.txt"))
    if manifest.get("generator") != GENERATOR_VERSION:
        raise DataMismatchError(f"unknown generator {manifest.get('generator')!r}")
    seed = int(manifest["seed"])
    count = int(manifest["count"])
    size = int(manifest["size"])
    count_range = (int(manifest["count_min"]), int(manifest["count_max"]))
    digest = hashlib.sha256()
    for i in range(count):
        img = gen_ellipse_phantom(seed + i, size, count_range)
        payload = tpraw_bytes(img.values)
        digest.update(payload)
        with open(os.path.join(outdir, _phantom_filename(i)), "rb") as f:
            if f.read() != payload:
                raise DataMismatchError(f"{_phantom_filename(i)} does not match manifest seed")
    if digest.hexdigest() != manifest["sha256"]:
        raise DataMismatchError("dataset hash does not match manifest")
    return manifest


def load_dataset(outdir):
    """Load all phantoms listed by the manifest into an (N,H,W) float32 stack."""
    from .rawio import read_tpraw

    manifest = read_manifest(os.path.join(outdir, "manifest.txt"))
    count = int(manifest["count"])
    size = int(manifest["size"])
    stack = np.empty((count, size, size), dtype=np.float32)
    for i in range(count):
        stack[i] = read_tpraw(os.path.join(outdir, _phantom_filename(i)))
    return stack, manifest
