"""Piecewise constant random diffusion coefficients on an ``eps_x x eps_x x eps_t`` cell grid."""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import InvalidArgumentError

MAGIC = b"STLODCOEF"
VERSION = 1
_HEADER = struct.Struct("<9sIQddBd3I")

_GOLDEN = 0x9E3779B97F4A7C15
_MASK = (1 << 64) - 1


def splitmix64(seed: int, count: int) -> np.ndarray:
    """``count`` consecutive outputs of the splitmix64 generator, as uint64."""
    with np.errstate(over="ignore"):
        k = np.arange(1, count + 1, dtype=np.uint64)
        z = np.uint64(seed & _MASK) + k * np.uint64(_GOLDEN)
        z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
        return z ^ (z >> np.uint64(31))


def uniform_from_bits(bits: np.ndarray) -> np.ndarray:
    """Map uint64 words to doubles in [0, 1) using the top 53 bits."""
    return (bits >> np.uint64(11)).astype(np.float64) * 2.0**-53


def _ratio(a: float, b: float, what: str, tol: float = 1e-9) -> int:
    q = a / b
    n = int(round(q))
    if n < 1 or abs(q - n) > tol * max(1.0, q):
        raise InvalidArgumentError(f"{what} must be a positive integer, got {q!r}")
    return n


@dataclass(frozen=True, eq=False)
class Coefficient:
    eps_x: float
    eps_t: float
    values: np.ndarray  # (cells_x, cells_y, slabs_t)
    time_periodic: bool = False
    period: float = 0.0
    seed: int = 0

    @property
    def alpha(self) -> float:
        return float(self.values.min())

    @property
    def beta(self) -> float:
        return float(self.values.max())

    def bounds(self) -> tuple[float, float]:
        return self.alpha, self.beta

    @property
    def cells_per_side(self) -> int:
        return self.values.shape[0]

    @property
    def n_slabs(self) -> int:
        return self.values.shape[2]

    @property
    def slab_width(self) -> float:
        """Time span over which one stored slab is held (``eps_t`` unless the period is shorter)."""
        if self.time_periodic and self.n_slabs == 1:
            return self.period
        return self.eps_t

    def _slab_index(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        if np.any(t < -1e-14):
            raise InvalidArgumentError("coefficient queried at negative time")
        if self.time_periodic:
            t = np.mod(t, self.period)
            # guard against t mod period landing on period itself
            s = np.floor(t / self.slab_width + 1e-12).astype(np.int64)
            return np.mod(s, self.n_slabs)
        s = np.floor(t / self.eps_t + 1e-12).astype(np.int64)
        if np.any(s > self.n_slabs) or np.any((s == self.n_slabs) & (t > self.n_slabs * self.eps_t + 1e-12)):
            raise InvalidArgumentError("coefficient queried beyond its time horizon")
        return np.minimum(s, self.n_slabs - 1)

    def _cell_index(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if np.any(x < -1e-14) or np.any(x > 1 + 1e-14):
            raise InvalidArgumentError("coefficient queried outside the unit square")
        c = np.floor(x * self.cells_per_side).astype(np.int64)
        return np.clip(c, 0, self.cells_per_side - 1)

    def values_at(self, points: np.ndarray, t) -> np.ndarray:
        """Cell values for an array of points at one time (or broadcastable times)."""
        points = np.atleast_2d(points)
        ix = self._cell_index(points[:, 0])
        iy = self._cell_index(points[:, 1])
        return self.values[ix, iy, self._slab_index(t)]

    def slab_of_step(self, step: int, fine_step: float) -> int:
        """Stored slab used on fine time step ``step`` (1-based)."""
        return int(self._slab_index((step - 0.5) * fine_step))


def value_on(coeff: Coefficient, element_centroid, fine_interval_midpoint: float) -> float:
    return float(coeff.values_at(np.asarray(element_centroid, dtype=float)[None, :], fine_interval_midpoint)[0])


def constant_coefficient(value: float, eps_x: float = 1.0, eps_t: float = 1.0) -> Coefficient:
    if not value > 0:
        raise InvalidArgumentError(f"coefficient value must be positive, got {value}")
    n = _ratio(1.0, eps_x, "1/eps_x")
    return Coefficient(eps_x, eps_t, np.full((n, n, 1), float(value)), True, eps_t, 0)


def generate_random(
    seed: int,
    eps_x: float,
    eps_t: float,
    low: float,
    high: float,
    periodic: bool = True,
    period: float | None = None,
    t_final: float | None = None,
) -> Coefficient:
    """I.i.d. uniform cell values in ``[low, high)``.

    Values are drawn from one splitmix64 stream and stored in C order over
    ``(cell_x, cell_y, slab_t)``, i.e. x varies slowest and t fastest.
    A periodic coefficient whose period is shorter than ``eps_t`` has a single slab.
    """
    if not (0 < low < high):
        raise InvalidArgumentError(f"need 0 < low < high, got low={low}, high={high}")
    if not (eps_x > 0 and eps_t > 0):
        raise InvalidArgumentError("eps_x and eps_t must be positive")
    nx = _ratio(1.0, eps_x, "1/eps_x")
    if periodic:
        if period is None or not period > 0:
            raise InvalidArgumentError("a periodic coefficient needs a positive period")
        if period >= eps_t * (1 - 1e-12):
            nt = _ratio(period, eps_t, "period/eps_t")
        else:
            _ratio(eps_t, period, "eps_t/period")
            nt = 1
    else:
        if t_final is None or not t_final > 0:
            raise InvalidArgumentError("a non-periodic coefficient needs a positive t_final")
        nt = int(np.ceil(t_final / eps_t - 1e-9))
        period = 0.0
    u = uniform_from_bits(splitmix64(int(seed), nx * nx * nt))
    values = (low + (high - low) * u).reshape(nx, nx, nt)
    return Coefficient(float(eps_x), float(eps_t), values, bool(periodic), float(period), int(seed) & _MASK)


def element_values(coeff: Coefficient, mesh, t: float) -> np.ndarray:
    """Coefficient value on each element of ``mesh`` at time ``t`` (centroid lookup)."""
    return coeff.values_at(mesh.centroids, t)


def check_compatible(coeff: Coefficient, fine_mesh, tgrid) -> None:
    """Raise unless the coefficient is constant on every fine element and fine time step."""
    _ratio(coeff.eps_x, fine_mesh.spacing, "eps_x/h")
    if coeff.time_periodic and coeff.n_slabs == 1:
        _ratio(coeff.period, tgrid.fine_step, "period/tau")
    else:
        _ratio(coeff.eps_t, tgrid.fine_step, "eps_t/tau")
        if coeff.time_periodic:
            _ratio(coeff.period, tgrid.fine_step, "period/tau")
        elif coeff.n_slabs * coeff.eps_t < tgrid.t_final * (1 - 1e-12):
            raise InvalidArgumentError("coefficient time horizon is shorter than the final time")


def save(coeff: Coefficient, path) -> None:
    header = _HEADER.pack(
        MAGIC, VERSION, coeff.seed & _MASK, coeff.eps_x, coeff.eps_t,
        int(coeff.time_periodic), coeff.period, *coeff.values.shape,
    )
    with open(Path(path), "wb") as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(coeff.values, dtype="<f8").tobytes())


def load(path) -> Coefficient:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise InvalidArgumentError(f"{path}: truncated coefficient file")
    magic, version, seed, ex, et, periodic, period, d0, d1, d2 = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise InvalidArgumentError(f"{path}: not a coefficient file")
    if version != VERSION:
        raise InvalidArgumentError(f"{path}: unsupported coefficient file version {version}")
    n = d0 * d1 * d2
    body = raw[_HEADER.size:]
    if len(body) != 8 * n:
        raise InvalidArgumentError(f"{path}: expected {n} values, found {len(body) // 8}")
    values = np.frombuffer(body, dtype="<f8").astype(np.float64).reshape(d0, d1, d2)
    return Coefficient(ex, et, values, bool(periodic), period, seed)
