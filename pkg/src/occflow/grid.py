"""Dense voxel grids for SDF, flow, occupancy and feature volumes.

Values are stored row-major over (i, j, k) with the channel axis last, so
x-index ``i`` varies slowest. Voxel ``(i, j, k)`` has its center at
``origin + (index + 0.5) * voxel_size``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

# synthetic scenes: 12.8 x 12.8 x 6.4 m at 0.2 m
SYNTH_EXTENT = (12.8, 12.8, 6.4)
SYNTH_VOXEL = 0.2
# driving scenes: 51.2 x 51.2 x 6.4 m in front of the ego car, 0.4 m voxels
DRIVING_EXTENT = (51.2, 51.2, 6.4)
DRIVING_VOXEL = 0.4


@dataclass(frozen=True)
class GridSpec:
    origin: np.ndarray
    voxel_size: np.ndarray
    dims: tuple

    def __post_init__(self):
        origin = np.asarray(self.origin, dtype=np.float64).reshape(3)
        voxel = np.broadcast_to(np.asarray(self.voxel_size, dtype=np.float64), (3,)).copy()
        dims = tuple(int(d) for d in self.dims)
        if len(dims) != 3 or min(dims) < 2:
            raise ValueError(f"grid dims must be three integers >= 2, got {self.dims}")
        if np.any(voxel <= 0):
            raise ValueError(f"voxel sizes must be positive, got {voxel}")
        object.__setattr__(self, "origin", origin)
        object.__setattr__(self, "voxel_size", voxel)
        object.__setattr__(self, "dims", dims)

    @classmethod
    def from_extent(cls, origin, extent, voxel):
        extent = np.asarray(extent, dtype=np.float64)
        voxel = np.broadcast_to(np.asarray(voxel, dtype=np.float64), (3,))
        dims = tuple(int(round(e / v)) for e, v in zip(extent, voxel))
        return cls(origin, voxel, dims)

    @property
    def shape(self):
        return self.dims

    @property
    def num_voxels(self):
        return int(np.prod(self.dims))

    @property
    def lower(self):
        return self.origin.copy()

    @property
    def upper(self):
        return self.origin + np.asarray(self.dims) * self.voxel_size

    def centers(self):
        """Voxel centers, shape (H, W, Z, 3)."""
        axes = [self.origin[a] + (np.arange(self.dims[a]) + 0.5) * self.voxel_size[a] for a in range(3)]
        return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)

    def to_index(self, points):
        """Continuous index coordinates; integer values sit on voxel centers."""
        return (np.asarray(points, dtype=np.float64) - self.origin) / self.voxel_size - 0.5

    def __eq__(self, other):
        if not isinstance(other, GridSpec):
            return NotImplemented
        return (
            self.dims == other.dims
            and np.array_equal(self.origin, other.origin)
            and np.array_equal(self.voxel_size, other.voxel_size)
        )

    def __hash__(self):
        return hash((self.dims, tuple(self.origin), tuple(self.voxel_size)))


def _check_finite(values, what):
    if not np.all(np.isfinite(values)):
        raise ValueError(f"{what} contains non-finite values")


@dataclass
class ScalarField:
    spec: GridSpec
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.shape != self.spec.dims:
            raise ValueError(f"scalar field shape {self.values.shape} != grid dims {self.spec.dims}")
        _check_finite(self.values, "scalar field")

    @classmethod
    def from_function(cls, spec, fn):
        return cls(spec, fn(spec.centers()))

    def copy(self):
        return ScalarField(self.spec, self.values.copy())


@dataclass
class VectorField:
    """Horizontal flow per voxel, meters per frame interval."""

    spec: GridSpec
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.shape != self.spec.dims + (2,):
            raise ValueError(f"flow field shape {self.values.shape} != {self.spec.dims + (2,)}")
        _check_finite(self.values, "flow field")

    @classmethod
    def zeros(cls, spec):
        return cls(spec, np.zeros(spec.dims + (2,)))

    def lifted(self):
        """Flow as 3-vectors with a zero vertical component."""
        return np.concatenate([self.values, np.zeros(self.spec.dims + (1,))], axis=-1)

    def copy(self):
        return VectorField(self.spec, self.values.copy())


@dataclass
class FeatureVolume:
    spec: GridSpec
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 4 or self.values.shape[:3] != self.spec.dims:
            raise ValueError(f"feature volume shape {self.values.shape} does not match {self.spec.dims}")
        _check_finite(self.values, "feature volume")

    @property
    def channels(self):
        return self.values.shape[-1]


@dataclass
class OccupancyGrid:
    spec: GridSpec
    probabilities: np.ndarray
    binary: np.ndarray = field(default=None)

    def __post_init__(self):
        self.probabilities = np.asarray(self.probabilities, dtype=np.float64)
        if self.binary is None:
            self.binary = self.probabilities >= 0.5
        self.binary = np.asarray(self.binary, dtype=bool)
        if self.probabilities.shape != self.spec.dims or self.binary.shape != self.spec.dims:
            raise ValueError("occupancy arrays must match grid dims")

    @classmethod
    def from_binary(cls, spec, binary):
        binary = np.asarray(binary, dtype=bool)
        return cls(spec, binary.astype(np.float64), binary)


def _values_2d(field_):
    values = field_.values
    return values.reshape(field_.spec.num_voxels, -1)


def trilinear_stencil(spec, points):
    """Flat voxel indices and weights of the 8-corner stencil at ``points``.

    Points outside the hull of voxel centers are clamped onto it. Returns
    ``(idx, wts)``, both shaped ``points.shape[:-1] + (8,)``.
    """
    q = spec.to_index(points)
    dims = np.asarray(spec.dims)
    q = np.clip(q, 0.0, dims - 1.0)
    i0 = np.minimum(np.floor(q).astype(np.int64), dims - 2)
    frac = q - i0
    H, W, Z = spec.dims
    base = (i0[..., 0] * W + i0[..., 1]) * Z + i0[..., 2]
    fx, fy, fz = frac[..., 0], frac[..., 1], frac[..., 2]
    gx, gy, gz = 1.0 - fx, 1.0 - fy, 1.0 - fz
    sx, sy = W * Z, Z
    idx = np.stack(
        [
            base,
            base + 1,
            base + sy,
            base + sy + 1,
            base + sx,
            base + sx + 1,
            base + sx + sy,
            base + sx + sy + 1,
        ],
        axis=-1,
    )
    wts = np.stack(
        [
            gx * gy * gz,
            gx * gy * fz,
            gx * fy * gz,
            gx * fy * fz,
            fx * gy * gz,
            fx * gy * fz,
            fx * fy * gz,
            fx * fy * fz,
        ],
        axis=-1,
    )
    return idx, wts


def gather(values_2d, idx, wts):
    """Apply a stencil to flattened values (V, C) -> (..., C)."""
    from ._kernels import gather_values

    values_2d = np.ascontiguousarray(values_2d, dtype=np.float64)
    lead = idx.shape[:-1]
    out = gather_values(values_2d, np.ascontiguousarray(idx).reshape(-1, 8),
                        np.ascontiguousarray(wts, dtype=np.float64).reshape(-1, 8))
    return out.reshape(lead + (values_2d.shape[1],))


def scatter(grad_out, idx, wts, num_voxels):
    """Adjoint of :func:`gather`: accumulate (..., C) onto (V, C)."""
    from ._kernels import scatter_add

    grad_out = np.ascontiguousarray(grad_out, dtype=np.float64)
    channels = grad_out.shape[-1]
    return scatter_add(grad_out.reshape(-1, channels), np.ascontiguousarray(idx).reshape(-1, 8),
                       np.ascontiguousarray(wts, dtype=np.float64).reshape(-1, 8), num_voxels)


def sample_trilinear(field_, points):
    """Trilinear sample of any grid field at ego-frame points.

    Returns ``points.shape[:-1]`` for scalar fields and
    ``points.shape[:-1] + (C,)`` otherwise. Out-of-range points read the
    clamped boundary value.
    """
    points = np.asarray(points, dtype=np.float64)
    idx, wts = trilinear_stencil(field_.spec, points)
    out = gather(_values_2d(field_), idx, wts)
    if isinstance(field_, ScalarField):
        return out[..., 0]
    return out


def _diff(values, axis, h):
    """First derivative: central inside, one-sided at both ends."""
    out = np.empty_like(values)
    n = values.shape[axis]
    take = lambda a, b: np.take(values, np.arange(a, b), axis=axis)
    inner = (take(2, n) - take(0, n - 2)) / (2.0 * h)
    lo = (take(1, 2) - take(0, 1)) / h
    hi = (take(n - 1, n) - take(n - 2, n - 1)) / h
    np.copyto(out, np.concatenate([lo, inner, hi], axis=axis))
    return out


def _diff_adjoint(grad, axis, h):
    """Transpose of :func:`_diff`."""
    g = np.moveaxis(grad, axis, 0)
    n = g.shape[0]
    out = np.zeros_like(g)
    out[0] -= g[0] / h
    out[1] += g[0] / h
    out[n - 1] += g[n - 1] / h
    out[n - 2] -= g[n - 1] / h
    inner = g[1 : n - 1] / (2.0 * h)
    out[2:n] += inner
    out[0 : n - 2] -= inner
    return np.moveaxis(out, 0, axis)


def sdf_gradient(sdf):
    """Finite-difference gradient field of an SDF grid, 3 channels."""
    h = sdf.spec.voxel_size
    grads = [_diff(sdf.values, a, h[a]) for a in range(3)]
    return FeatureVolume(sdf.spec, np.stack(grads, axis=-1))


def sdf_gradient_adjoint(grad_field, spec):
    """Pull a gradient w.r.t. the (H, W, Z, 3) gradient field back onto the SDF."""
    h = spec.voxel_size
    return sum(_diff_adjoint(grad_field[..., a], a, h[a]) for a in range(3))


SECOND_DIFF_CHANNELS = ("xx", "yy", "zz", "xy", "xz", "yz")


def sdf_second_differences(sdf):
    """Six second-difference channels; the one-voxel boundary ring is zero."""
    s = sdf.values
    if min(s.shape) < 3:
        raise ValueError("second differences need at least 3 voxels per axis")
    hx, hy, hz = sdf.spec.voxel_size
    out = np.zeros(s.shape + (6,))
    c = s[1:-1, 1:-1, 1:-1]
    I = (slice(1, -1),) * 3

    def sh(dx, dy, dz):
        H, W, Z = s.shape
        return s[1 + dx : H - 1 + dx, 1 + dy : W - 1 + dy, 1 + dz : Z - 1 + dz]

    out[I + (0,)] = (sh(1, 0, 0) - 2 * c + sh(-1, 0, 0)) / hx**2
    out[I + (1,)] = (sh(0, 1, 0) - 2 * c + sh(0, -1, 0)) / hy**2
    out[I + (2,)] = (sh(0, 0, 1) - 2 * c + sh(0, 0, -1)) / hz**2
    out[I + (3,)] = (sh(1, 1, 0) - sh(1, -1, 0) - sh(-1, 1, 0) + sh(-1, -1, 0)) / (4 * hx * hy)
    out[I + (4,)] = (sh(1, 0, 1) - sh(1, 0, -1) - sh(-1, 0, 1) + sh(-1, 0, -1)) / (4 * hx * hz)
    out[I + (5,)] = (sh(0, 1, 1) - sh(0, 1, -1) - sh(0, -1, 1) + sh(0, -1, -1)) / (4 * hy * hz)
    return FeatureVolume(sdf.spec, out)


def sdf_second_differences_adjoint(grad, spec):
    """Transpose of :func:`sdf_second_differences` (interior channels only)."""
    hx, hy, hz = spec.voxel_size
    H, W, Z = spec.dims
    out = np.zeros(spec.dims)
    g = grad[1:-1, 1:-1, 1:-1]

    def acc(dx, dy, dz, v):
        out[1 + dx : H - 1 + dx, 1 + dy : W - 1 + dy, 1 + dz : Z - 1 + dz] += v

    gxx = g[..., 0] / hx**2
    acc(1, 0, 0, gxx); acc(-1, 0, 0, gxx); acc(0, 0, 0, -2 * gxx)
    gyy = g[..., 1] / hy**2
    acc(0, 1, 0, gyy); acc(0, -1, 0, gyy); acc(0, 0, 0, -2 * gyy)
    gzz = g[..., 2] / hz**2
    acc(0, 0, 1, gzz); acc(0, 0, -1, gzz); acc(0, 0, 0, -2 * gzz)
    gxy = g[..., 3] / (4 * hx * hy)
    acc(1, 1, 0, gxy); acc(1, -1, 0, -gxy); acc(-1, 1, 0, -gxy); acc(-1, -1, 0, gxy)
    gxz = g[..., 4] / (4 * hx * hz)
    acc(1, 0, 1, gxz); acc(1, 0, -1, -gxz); acc(-1, 0, 1, -gxz); acc(-1, 0, -1, gxz)
    gyz = g[..., 5] / (4 * hy * hz)
    acc(0, 1, 1, gyz); acc(0, 1, -1, -gyz); acc(0, -1, 1, -gyz); acc(0, -1, -1, gyz)
    return out


def sdf_to_occupancy(sdf, sharpness):
    """Logistic occupancy ``sigmoid(-sharpness * sdf)``, binarized at 0.5."""
    if sharpness <= 0:
        raise ValueError("occupancy sharpness must be positive")
    prob = 0.5 * (1.0 + np.tanh(-0.5 * sharpness * sdf.values))
    return OccupancyGrid(sdf.spec, prob)
