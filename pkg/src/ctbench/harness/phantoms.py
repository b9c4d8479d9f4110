"""Synthetic test phantoms built from additive constant-density ellipses.

Every phantom is specified as an ellipse list in a unit field of view
(coordinates and semi-axes in [-1, 1], angles in degrees) and then scaled to
physical grid units, so the same list feeds both the rasterizer and the
closed-form sinogram.  ``seed`` produces a deterministically jittered variant
of the base layout — the tuning harness uses those as holdout images.
"""
from __future__ import annotations

import numpy as np

from ..grids import ImageGrid
from ..operators import Ellipse

__all__ = [
    "PHANTOM_KINDS",
    "phantom_ellipses",
    "rasterize_ellipses",
    "generate_phantom",
]

PHANTOM_KINDS = ("shepplogan", "disks", "text")

# Classical head-phantom parameter table: (value, a, b, x0, y0, phi_degrees)
# in unit coordinates.
_SHEPP_LOGAN = (
    (2.00, 0.6900, 0.9200, 0.00, 0.0000, 0.0),
    (-0.98, 0.6624, 0.8740, 0.00, -0.0184, 0.0),
    (-0.02, 0.1100, 0.3100, 0.22, 0.0000, -18.0),
    (-0.02, 0.1600, 0.4100, -0.22, 0.0000, 18.0),
    (0.01, 0.2100, 0.2500, 0.00, 0.3500, 0.0),
    (0.01, 0.0460, 0.0460, 0.00, 0.1000, 0.0),
    (0.01, 0.0460, 0.0460, 0.00, -0.1000, 0.0),
    (0.01, 0.0460, 0.0230, -0.08, -0.6050, 0.0),
    (0.01, 0.0230, 0.0230, 0.00, -0.6060, 0.0),
    (0.01, 0.0230, 0.0460, 0.06, -0.6050, 0.0),
)

_DISKS = (
    (1.00, 0.28, 0.28, -0.32, -0.18, 0.0),
    (0.70, 0.18, 0.18, 0.38, 0.12, 0.0),
    (0.40, 0.12, 0.12, 0.02, 0.45, 0.0),
)


def _parse_text_spec(text: str) -> list[tuple[float, ...]]:
    rows = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.replace(",", " ").split()
        if len(parts) != 6:
            raise ValueError(
                f"ellipse spec line {lineno} needs 6 numbers "
                "(value a b x0 y0 phi_deg)"
            )
        rows.append(tuple(float(p) for p in parts))
    if not rows:
        raise ValueError("ellipse spec is empty")
    return rows


def _jitter(rows, seed: int):
    rng = np.random.default_rng(np.random.Philox(key=seed))
    out = []
    for value, a, b, x0, y0, phi in rows:
        scale = 1.0 + 0.06 * rng.uniform(-1.0, 1.0, size=3)
        out.append(
            (
                value * scale[0],
                min(a * scale[1], 0.98),
                min(b * scale[2], 0.98),
                float(np.clip(x0 + 0.03 * rng.uniform(-1, 1), -0.95, 0.95)),
                float(np.clip(y0 + 0.03 * rng.uniform(-1, 1), -0.95, 0.95)),
                phi + 4.0 * rng.uniform(-1, 1),
            )
        )
    return out


def phantom_ellipses(
    kind: str,
    size: int,
    pixel_size: float = 1.0,
    seed: int | None = None,
    spec_text: str | None = None,
) -> list[Ellipse]:
    """Ellipse list for ``kind`` scaled from unit coordinates to grid units."""
    if kind == "shepplogan":
        rows = list(_SHEPP_LOGAN)
    elif kind == "disks":
        rows = list(_DISKS)
    elif kind == "text":
        if spec_text is None:
            raise ValueError("kind 'text' needs spec_text")
        rows = _parse_text_spec(spec_text)
    else:
        raise ValueError(f"unknown phantom kind {kind!r}; expected {PHANTOM_KINDS}")
    if seed is not None:
        rows = _jitter(rows, seed)
    half_width = 0.5 * size * pixel_size
    return [
        Ellipse(
            value=value,
            a=a * half_width,
            b=b * half_width,
            x0=x0 * half_width,
            y0=y0 * half_width,
            phi=np.deg2rad(phi),
        )
        for value, a, b, x0, y0, phi in rows
    ]


def rasterize_ellipses(
    ellipses,
    size: int,
    pixel_size: float = 1.0,
    supersample: int = 4,
) -> ImageGrid:
    """Average ``supersample**2`` point samples per pixel (antialiased edges)."""
    if supersample < 1:
        raise ValueError("supersample must be >= 1")
    fine = size * supersample
    half = (fine - 1) / 2.0
    coords = (np.arange(fine) - half) * (pixel_size / supersample)
    xs = coords[None, :]
    ys = coords[:, None]
    acc = np.zeros((fine, fine))
    for e in ellipses:
        dx = xs - e.x0
        dy = ys - e.y0
        c, s = np.cos(e.phi), np.sin(e.phi)
        u = (dx * c + dy * s) / e.a
        v = (-dx * s + dy * c) / e.b
        acc += np.where(u * u + v * v <= 1.0, e.value, 0.0)
    values = acc.reshape(size, supersample, size, supersample).mean(axis=(1, 3))
    return ImageGrid(values, pixel_size)


def generate_phantom(
    kind: str,
    size: int,
    pixel_size: float = 1.0,
    seed: int | None = None,
    spec_text: str | None = None,
    supersample: int = 4,
) -> ImageGrid:
    """Rasterize one of the built-in phantom families at ``size`` pixels.

    Net density is clamped at zero: attenuation cannot be negative, and a
    seeded jitter may otherwise push a subtractive ellipse slightly outside
    its parent.  Use :func:`rasterize_ellipses` for the raw signed field.
    """
    if size < 16:
        raise ValueError("phantom size must be >= 16")
    ellipses = phantom_ellipses(kind, size, pixel_size, seed, spec_text)
    image = rasterize_ellipses(ellipses, size, pixel_size, supersample)
    return ImageGrid(np.maximum(image.values, 0.0), pixel_size)
