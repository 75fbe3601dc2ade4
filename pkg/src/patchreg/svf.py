"""Stationary-velocity-field machinery.

Velocity fields are turned into displacement fields by scaling and
squaring; displacements drive a differentiable bilinear warp. The same
warp kernel powers field composition, and fields can be resampled
between grids with the value rescaling that keeps units consistent.

Conventions, fixed project wide:

* a field is a ``[2, h, w]`` array; channel 0 is x displacement
  (columns), channel 1 is y displacement (rows); origin top left;
* values are in pixels of the field's own grid;
* all sampling clamps coordinates to the image edge, so tests exclude
  the affected border.
"""

from __future__ import annotations

import struct

import numpy as np

from .gradcore import (
    ContractError,
    DimensionError,
    Tensor,
    _node,
    add,
    as_tensor,
    cmul,
    neg,
    reshape,
)
from .filters import gaussian_blur


class FieldKindError(ValueError):
    """A velocity was required where a displacement was given, or vice versa."""


VELOCITY = "velocity"
DISPLACEMENT = "displacement"
_KINDS = (VELOCITY, DISPLACEMENT)


class VectorField:
    """A 2-channel vector field on an h-by-w grid, velocity or displacement."""

    __slots__ = ("data", "kind")

    def __init__(self, data, kind: str):
        if kind not in _KINDS:
            raise FieldKindError(f"unknown field kind '{kind}'")
        t = as_tensor(data)
        if t.ndim != 3 or t.shape[0] != 2:
            raise DimensionError(f"vector field must be [2, h, w], got {t.shape}")
        self.data = t
        self.kind = kind

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]

    @property
    def array(self) -> np.ndarray:
        """The raw [2, h, w] values (detached view)."""
        return self.data.data

    def __repr__(self) -> str:
        return f"VectorField({self.kind}, {self.height}x{self.width})"


_GRID_CACHE: dict[tuple[int, int, str], np.ndarray] = {}


def identity_grid(h: int, w: int, dtype=np.float64) -> np.ndarray:
    """Identity coordinate grid: channel 0 holds column index j, channel 1 row index i."""
    key = (h, w, np.dtype(dtype).str)
    grid = _GRID_CACHE.get(key)
    if grid is None:
        gy, gx = np.meshgrid(np.arange(h, dtype=dtype), np.arange(w, dtype=dtype), indexing="ij")
        grid = np.stack([gx, gy])
        grid.setflags(write=False)
        _GRID_CACHE[key] = grid
    return grid


def sample_bilinear(img: np.ndarray, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Bilinear sample of ``img`` ([h,w] or [c,h,w]) at absolute coords,
    clamp-to-edge. Pure numpy, no gradient tracking."""
    squeeze = img.ndim == 2
    if squeeze:
        img = img[None]
    c, h, w = img.shape
    xc = np.clip(x, 0.0, w - 1.0)
    yc = np.clip(y, 0.0, h - 1.0)
    x0 = np.clip(np.floor(xc).astype(np.intp), 0, max(w - 2, 0))
    y0 = np.clip(np.floor(yc).astype(np.intp), 0, max(h - 2, 0))
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = xc - x0
    fy = yc - y0
    out = (1 - fy) * ((1 - fx) * img[:, y0, x0] + fx * img[:, y0, x1]) + fy * (
        (1 - fx) * img[:, y1, x0] + fx * img[:, y1, x1]
    )
    return out[0] if squeeze else out


def _warp_node(img: Tensor, disp: Tensor) -> Tensor:
    """Differentiable clamp-to-edge bilinear warp.

    ``img`` is [c, h, w]; ``disp`` is [2, H, W] of pixel offsets added to
    the identity grid of (H, W). Output is [c, H, W]. Gradients flow to
    both the image (scatter) and the displacement (image-gradient chain);
    where a coordinate is clamped its displacement gradient is zero.
    """
    c, h, w = img.shape
    _, hh, ww = disp.shape
    grid = identity_grid(hh, ww, dtype=img.dtype)
    x = grid[0] + disp.data[0]
    y = grid[1] + disp.data[1]
    xc = np.clip(x, 0.0, w - 1.0)
    yc = np.clip(y, 0.0, h - 1.0)
    active_x = ((x > 0.0) & (x < w - 1.0)).astype(img.dtype)
    active_y = ((y > 0.0) & (y < h - 1.0)).astype(img.dtype)
    x0 = np.clip(np.floor(xc).astype(np.intp), 0, max(w - 2, 0))
    y0 = np.clip(np.floor(yc).astype(np.intp), 0, max(h - 2, 0))
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = (xc - x0).astype(img.dtype)
    fy = (yc - y0).astype(img.dtype)
    i00 = img.data[:, y0, x0]
    i10 = img.data[:, y0, x1]
    i01 = img.data[:, y1, x0]
    i11 = img.data[:, y1, x1]
    w00 = (1 - fy) * (1 - fx)
    w10 = (1 - fy) * fx
    w01 = fy * (1 - fx)
    w11 = fy * fx
    data = w00 * i00 + w10 * i10 + w01 * i01 + w11 * i11

    def backward_fn(g):
        gi = np.zeros_like(img.data)
        for ch in range(c):
            gch = g[ch]
            np.add.at(gi[ch], (y0, x0), w00 * gch)
            np.add.at(gi[ch], (y0, x1), w10 * gch)
            np.add.at(gi[ch], (y1, x0), w01 * gch)
            np.add.at(gi[ch], (y1, x1), w11 * gch)
        ddx = ((1 - fy) * (i10 - i00) + fy * (i11 - i01)) * g
        ddy = ((1 - fx) * (i01 - i00) + fx * (i11 - i10)) * g
        gd = np.stack([ddx.sum(axis=0) * active_x, ddy.sum(axis=0) * active_y])
        return gi, gd.astype(disp.dtype)

    return _node(data, (img, disp), backward_fn)


def warp_image(img, disp: VectorField) -> Tensor:
    """Deform an image (or [c,h,w] stack) by a displacement field.

    ``out(i, j) = img(i + dy(i,j), j + dx(i,j))`` with bilinear
    interpolation and clamp-to-edge; differentiable in both inputs.
    """
    if disp.kind != DISPLACEMENT:
        raise FieldKindError(f"warp_image needs a displacement field, got {disp.kind}")
    t = as_tensor(img)
    squeeze = t.ndim == 2
    if squeeze:
        t3 = reshape(t, (1,) + t.shape)
    elif t.ndim == 3:
        t3 = t
    else:
        raise DimensionError(f"warp_image expects [h,w] or [c,h,w], got {t.shape}")
    if t3.shape[1:] != (disp.height, disp.width):
        raise DimensionError(
            f"image {t3.shape[1:]} and displacement {(disp.height, disp.width)} sizes differ"
        )
    out = _warp_node(t3, disp.data)
    if squeeze:
        out = reshape(out, out.shape[1:])
    return out


def compose_displacements(outer: VectorField, inner: VectorField) -> VectorField:
    """Displacement of the composed map ``(Id + outer) o (Id + inner)``.

    Returned field w satisfies Id + w = (Id + outer)(Id + inner), i.e.
    ``w = inner + outer sampled at (Id + inner)``.
    """
    if outer.kind != DISPLACEMENT or inner.kind != DISPLACEMENT:
        raise FieldKindError("compose_displacements needs two displacement fields")
    if (outer.height, outer.width) != (inner.height, inner.width):
        raise DimensionError(
            f"cannot compose {outer.height}x{outer.width} with {inner.height}x{inner.width}"
        )
    sampled = _warp_node(outer.data, inner.data)
    return VectorField(add(inner.data, sampled), DISPLACEMENT)


def integrate_svf(v: VectorField, steps: int = 7) -> VectorField:
    """Exponentiate a stationary velocity field by scaling and squaring.

    The velocity is divided by 2**steps and the resulting small
    displacement is composed with itself ``steps`` times. With enough
    steps the result is folding free (positive Jacobian determinant) for
    smooth bounded velocities. Differentiable.
    """
    if v.kind != VELOCITY:
        raise FieldKindError(f"integrate_svf needs a velocity field, got {v.kind}")
    if steps < 1:
        raise ContractError("integration needs at least one squaring step")
    u = VectorField(cmul(v.data, 1.0 / (2.0**steps)), DISPLACEMENT)
    for _ in range(steps):
        u = compose_displacements(u, u)
    return u


def _resize_node(x: Tensor, new_h: int, new_w: int) -> Tensor:
    """Corner-aligned bilinear resize of [c, h, w], differentiable."""
    c, h, w = x.shape
    sy = (h - 1) / (new_h - 1) if new_h > 1 else 0.0
    sx = (w - 1) / (new_w - 1) if new_w > 1 else 0.0
    ys = np.arange(new_h, dtype=x.dtype) * sy
    xs = np.arange(new_w, dtype=x.dtype) * sx
    yy = np.repeat(ys[:, None], new_w, axis=1)
    xx = np.repeat(xs[None, :], new_h, axis=0)
    x0 = np.clip(np.floor(xx).astype(np.intp), 0, max(w - 2, 0))
    y0 = np.clip(np.floor(yy).astype(np.intp), 0, max(h - 2, 0))
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = (xx - x0).astype(x.dtype)
    fy = (yy - y0).astype(x.dtype)
    w00 = (1 - fy) * (1 - fx)
    w10 = (1 - fy) * fx
    w01 = fy * (1 - fx)
    w11 = fy * fx
    data = (
        w00 * x.data[:, y0, x0]
        + w10 * x.data[:, y0, x1]
        + w01 * x.data[:, y1, x0]
        + w11 * x.data[:, y1, x1]
    )

    def backward_fn(g):
        gx = np.zeros_like(x.data)
        for ch in range(c):
            gch = g[ch]
            np.add.at(gx[ch], (y0, x0), w00 * gch)
            np.add.at(gx[ch], (y0, x1), w10 * gch)
            np.add.at(gx[ch], (y1, x0), w01 * gch)
            np.add.at(gx[ch], (y1, x1), w11 * gch)
        return (gx,)

    return _node(data, (x,), backward_fn)


def resample_field(f: VectorField, new_h: int, new_w: int) -> VectorField:
    """Resample a field to a new grid and convert its values to the new
    grid's pixel units (x channel scaled by new_w/old_w, y by new_h/old_h)."""
    if new_h < 1 or new_w < 1:
        raise ContractError("target size must be at least 1x1")
    resized = _resize_node(f.data, new_h, new_w)
    scale = np.array([new_w / f.width, new_h / f.height], dtype=f.data.dtype).reshape(2, 1, 1)
    return VectorField(cmul(resized, scale), f.kind)


def jacobian_determinant(disp: VectorField) -> np.ndarray:
    """Per-pixel Jacobian determinant of the map Id + displacement.

    Central differences in the interior, one-sided at the borders.
    Evaluation only; not differentiable.
    """
    if disp.kind != DISPLACEMENT:
        raise FieldKindError(f"jacobian_determinant needs a displacement, got {disp.kind}")
    if disp.height < 3 or disp.width < 3:
        raise DimensionError("field must be at least 3x3 for difference stencils")
    u = disp.array.astype(np.float64)
    dux_dy, dux_dx = np.gradient(u[0])
    duy_dy, duy_dx = np.gradient(u[1])
    return (1.0 + dux_dx) * (1.0 + duy_dy) - dux_dy * duy_dx


def mean_interior_magnitude(field: VectorField, margin: int = 1) -> float:
    """Mean vector magnitude over the interior, excluding ``margin`` border pixels."""
    u = field.array
    core = u[:, margin : u.shape[1] - margin, margin : u.shape[2] - margin]
    return float(np.sqrt(core[0] ** 2 + core[1] ** 2).mean())


def negate_field(f: VectorField) -> VectorField:
    return VectorField(neg(f.data), f.kind)


def random_smooth_velocity(
    seed: int, h: int, w: int, max_magnitude: float, sigma: float | None = None
) -> VectorField:
    """Gaussian-smoothed random velocity scaled to a peak vector magnitude.

    Deterministic per seed; the workhorse behind synthetic deformations
    and the statistical field properties in the test suite.
    """
    if sigma is None:
        sigma = max(h, w) / 8.0
    rng = np.random.default_rng(seed)
    raw = rng.normal(0.0, 1.0, size=(2, h, w))
    smooth = gaussian_blur(raw, sigma)
    mag = np.sqrt(smooth[0] ** 2 + smooth[1] ** 2).max()
    if mag > 0 and max_magnitude > 0:
        smooth = smooth * (max_magnitude / mag)
    else:
        smooth = np.zeros_like(smooth)
    return VectorField(smooth, VELOCITY)


# ---------------------------------------------------------------------------
# flat binary serialization ("PRGF": magic, u32 h, u32 w, u32 dtype code)

_MAGIC = b"PRGF"
_DTYPE_CODES = {0: "<f4", 1: "<f8"}
_CODE_FOR = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}


def write_field(f: VectorField, path) -> None:
    """Write a displacement field: 16-byte header then row-major x channel
    followed by y channel, little endian."""
    arr = f.array
    code = _CODE_FOR[arr.dtype]
    with open(path, "wb") as fh:
        fh.write(struct.pack("<4sIII", _MAGIC, f.height, f.width, code))
        fh.write(np.ascontiguousarray(arr[0], dtype=_DTYPE_CODES[code]).tobytes())
        fh.write(np.ascontiguousarray(arr[1], dtype=_DTYPE_CODES[code]).tobytes())


def read_field(path) -> VectorField:
    with open(path, "rb") as fh:
        header = fh.read(16)
        if len(header) != 16:
            raise ValueError(f"{path}: truncated field header")
        magic, h, w, code = struct.unpack("<4sIII", header)
        if magic != _MAGIC:
            raise ValueError(f"{path}: bad magic {magic!r}")
        if code not in _DTYPE_CODES:
            raise ValueError(f"{path}: unknown dtype code {code}")
        dt = np.dtype(_DTYPE_CODES[code])
        payload = fh.read()
    expect = 2 * h * w * dt.itemsize
    if len(payload) != expect:
        raise ValueError(f"{path}: expected {expect} payload bytes, got {len(payload)}")
    flat = np.frombuffer(payload, dtype=dt)
    arr = flat.reshape(2, h, w).astype(dt.type)
    if not np.isfinite(arr).all():
        raise ValueError(f"{path}: field contains non-finite values")
    return VectorField(arr, DISPLACEMENT)
