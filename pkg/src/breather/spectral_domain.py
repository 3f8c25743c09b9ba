"""
Space-time discretisation for time-periodic fields.

Space is a periodic box [-L, L)^N sampled on n points per axis; its FFT-dual
lattice is (pi/L) Z^N.  Time is represented modally: a field is the finite
sum

    V(t, x) = sum_{k in I_s, |k| <= K} exp(i 2 pi k t / T) v_k(x)

where the admissible index set I_s depends on the time-symmetry class s:

    s = 1   no symmetry            I_1 = Z
    s = 2   even in time           I_2 = Z       (v_k real, v_k = v_-k)
    s = 3   odd in time            I_3 = Z \\ {0} (v_k imaginary, v_k = -v_-k)
    s = 4   pi-periodic            I_4 = 2Z
    s = 5   pi-antiperiodic        I_5 = 2Z + 1

All classes also carry the reality constraint v_k = conj(v_-k).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Sequence

import numpy as np
import scipy.fft
from numpy.typing import NDArray

TWO_PI = 2.0 * math.pi
SYMMETRY_CLASSES = (1, 2, 3, 4, 5)


class AliasingError(ValueError):
    """Too few time samples to resolve the requested mode cutoff."""


class SymmetryError(ValueError):
    """A field violates the reality/symmetry constraints of its class."""


def _check_sym(s: int) -> int:
    if s not in SYMMETRY_CLASSES:
        raise ValueError(f"symmetry class must be one of {SYMMETRY_CLASSES}, got {s!r}")
    return int(s)


def in_mode_set(s: int, k: int) -> bool:
    s = _check_sym(s)
    if s in (1, 2):
        return True
    if s == 3:
        return k != 0
    if s == 4:
        return k % 2 == 0
    return k % 2 == 1


def mode_set(s: int, K: int) -> list[int]:
    """Return ``I_s ∩ [-K, K]`` in ascending order."""
    if K < 0:
        raise ValueError("mode cutoff K must be nonnegative")
    return [k for k in range(-K, K + 1) if in_mode_set(s, k)]


def collocation_samples(s: int, K: int) -> int:
    """Number of uniform time samples whose class-s sample space equals the mode space.

    With this many samples the pointwise nonlinear maps and the modal
    representation are in exact one-to-one correspondence, so no aliasing is
    discarded when samples are re-analysed.
    """
    modes = mode_set(s, K)
    if not modes:
        raise ValueError(f"mode set of class {s} with K={K} is empty")
    kmax = max(abs(k) for k in modes)
    if s in (1, 2):
        return 2 * kmax + 1
    # the Nyquist index kmax + 1 is excluded by the symmetry for s = 3, 4, 5
    return 2 * kmax + 2


def oversampled_samples(K: int) -> int:
    """Default sampling density for norms of band-limited fields."""
    return max(64, 8 * (K + 1))


def sample_times(M: int, period: float = TWO_PI) -> NDArray[np.float64]:
    return period * np.arange(M) / M


# ---------------------------------------------------------------------------
# spatial grid
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SpaceGrid:
    """Periodic box [-L, L)^N with n points per axis.

    ``workers`` bounds FFT threading and does not take part in equality.
    """

    N: int
    L: float
    n: int
    workers: int = field(default=1, compare=False)

    def __post_init__(self):
        if self.N < 1:
            raise ValueError("dimension N must be >= 1")
        if self.L <= 0:
            raise ValueError("box half-width L must be positive")
        if self.n < 2 or self.n & (self.n - 1):
            raise ValueError(f"points per dimension must be a power of two, got {self.n}")

    @property
    def h(self) -> float:
        return 2.0 * self.L / self.n

    @property
    def cell_volume(self) -> float:
        return self.h**self.N

    @property
    def shape(self) -> tuple[int, ...]:
        return (self.n,) * self.N

    @property
    def axes(self) -> tuple[int, ...]:
        """Spatial axes of an array whose trailing dimensions are the grid."""
        return tuple(range(-self.N, 0))

    @cached_property
    def x1d(self) -> NDArray[np.float64]:
        return -self.L + self.h * np.arange(self.n)

    @cached_property
    def xi1d(self) -> NDArray[np.float64]:
        return TWO_PI * np.fft.fftfreq(self.n, d=self.h)

    def coords(self) -> list[NDArray[np.float64]]:
        return np.meshgrid(*([self.x1d] * self.N), indexing="ij")

    @cached_property
    def radius(self) -> NDArray[np.float64]:
        r2 = np.zeros(self.shape)
        for c in np.meshgrid(*([self.x1d] * self.N), indexing="ij", sparse=True):
            r2 = r2 + c**2
        return np.sqrt(r2)

    @cached_property
    def xi_sq(self) -> NDArray[np.float64]:
        """|xi|^2 on the FFT lattice (unshifted ordering)."""
        out = np.zeros(self.shape)
        for c in np.meshgrid(*([self.xi1d] * self.N), indexing="ij", sparse=True):
            out = out + c**2
        return out

    def fft(self, f: NDArray) -> NDArray[np.complex128]:
        return scipy.fft.fftn(f, axes=self.axes, workers=self.workers)

    def ifft(self, F: NDArray) -> NDArray[np.complex128]:
        return scipy.fft.ifftn(F, axes=self.axes, workers=self.workers)

    def integrate(self, f: NDArray) -> NDArray | float:
        """Uniform-cell quadrature over the trailing spatial axes."""
        return np.sum(f, axis=self.axes) * self.cell_volume

    def inner(self, f: NDArray, g: NDArray) -> float:
        return float(np.real(np.sum(f * g)) * self.cell_volume)

    def lp_norm(self, f: NDArray, p: float) -> float:
        return float((np.sum(np.abs(f) ** p) * self.cell_volume) ** (1.0 / p))


# ---------------------------------------------------------------------------
# time fields
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class TimeField:
    """Truncated time-Fourier family ``{v_k}`` of complex spatial fields.

    ``modes[i]`` holds v_k for ``k = self.mode_list[i]``.  The array is made
    read-only on construction; operations always return new fields.
    """

    grid: SpaceGrid
    sym: int
    K: int
    modes: NDArray[np.complex128]
    period: float = TWO_PI

    def __post_init__(self):
        _check_sym(self.sym)
        arr = np.array(self.modes, dtype=np.complex128)
        expected = (len(mode_set(self.sym, self.K)), *self.grid.shape)
        if arr.shape != expected:
            raise ValueError(f"mode array has shape {arr.shape}, expected {expected}")
        arr.flags.writeable = False
        object.__setattr__(self, "modes", arr)

    @classmethod
    def zeros(cls, grid: SpaceGrid, sym: int, K: int, period: float = TWO_PI) -> "TimeField":
        return cls(grid, sym, K, np.zeros((len(mode_set(sym, K)), *grid.shape), complex), period)

    @classmethod
    def from_modes(
        cls, grid: SpaceGrid, sym: int, K: int, modes: dict[int, NDArray], period: float = TWO_PI
    ) -> "TimeField":
        """Build a field from a partial ``{k: v_k}`` map; missing modes are zero.

        Keys outside the mode set are rejected rather than silently dropped.
        """
        ks = mode_set(sym, K)
        arr = np.zeros((len(ks), *grid.shape), complex)
        index = {k: i for i, k in enumerate(ks)}
        for k, v in modes.items():
            if k not in index:
                raise ValueError(f"mode {k} is not in I_{sym} ∩ [-{K}, {K}]")
            arr[index[k]] = v
        return cls(grid, sym, K, arr, period)

    @property
    def mode_list(self) -> list[int]:
        return mode_set(self.sym, self.K)

    def mode(self, k: int) -> NDArray[np.complex128]:
        ks = self.mode_list
        if k not in ks:
            return np.zeros(self.grid.shape, complex)
        return self.modes[ks.index(k)]

    def frequencies(self) -> NDArray[np.float64]:
        return TWO_PI * np.asarray(self.mode_list, float) / self.period

    def replace(self, modes: NDArray) -> "TimeField":
        return TimeField(self.grid, self.sym, self.K, modes, self.period)

    def __add__(self, other: "TimeField") -> "TimeField":
        self._check_compatible(other)
        return self.replace(self.modes + other.modes)

    def __sub__(self, other: "TimeField") -> "TimeField":
        self._check_compatible(other)
        return self.replace(self.modes - other.modes)

    def __mul__(self, c: float) -> "TimeField":
        return self.replace(self.modes * c)

    __rmul__ = __mul__

    def __neg__(self) -> "TimeField":
        return self.replace(-self.modes)

    def _check_compatible(self, other: "TimeField"):
        if (other.grid, other.sym, other.K, other.period) != (self.grid, self.sym, self.K, self.period):
            raise ValueError("incompatible time fields")

    def pairing(self, other: "TimeField") -> float:
        """Space-time L^2 pairing ``∫_T ∫ V W dx dt`` evaluated modally."""
        self._check_compatible(other)
        return float(self.period * self.grid.cell_volume * np.real(np.vdot(other.modes, self.modes)))

    def l2_norm(self) -> float:
        return math.sqrt(max(self.pairing(self), 0.0))

    def sample(self, M: int | None = None) -> NDArray[np.float64]:
        """Real samples on ``M`` uniform times (default: collocation count)."""
        if M is None:
            M = collocation_samples(self.sym, self.K)
        return synthesize(self, sample_times(M, self.period))

    def energy_spectrum(self) -> dict[int, float]:
        """Spatial L^2 norm of every stored mode."""
        return {k: float(np.sqrt(np.sum(np.abs(v) ** 2) * self.grid.cell_volume))
                for k, v in zip(self.mode_list, self.modes)}


def _time_matrix(ks: Sequence[int], times: NDArray, period: float) -> NDArray[np.complex128]:
    return np.exp(1j * TWO_PI / period * np.outer(times, np.asarray(ks, float)))


def synthesize(field: TimeField, times: Sequence[float] | NDArray, tol: float = 1e-12) -> NDArray[np.float64]:
    """Evaluate ``sum_k exp(i w_k t) v_k(x)`` at the given times.

    The imaginary part must vanish up to ``tol`` relative to the signal,
    otherwise the field violates its reality constraint.
    """
    times = np.atleast_1d(np.asarray(times, float))
    E = _time_matrix(field.mode_list, times, field.period)
    flat = field.modes.reshape(len(field.mode_list), -1)
    out = (E @ flat).reshape(len(times), *field.grid.shape)
    scale = np.max(np.abs(out.real)) if out.size else 0.0
    imag = np.max(np.abs(out.imag)) if out.size else 0.0
    if imag > tol * max(scale, 1e-300) and imag > 1e-300:
        raise SymmetryError(f"synthesized signal is not real: max |Im| = {imag:.3e} (max |Re| = {scale:.3e})")
    return np.ascontiguousarray(out.real)


def symmetrize_samples(samples: NDArray, sym: int) -> NDArray:
    """Impose the time reflection of classes 2 and 3 exactly on uniform samples.

    For the odd class this makes the samples at ``t = 0`` and ``t = T/2``
    exactly zero.  Roundoff there would otherwise be amplified by the
    non-Lipschitz map ``|x|^{p'-2} x``.
    """
    sym = _check_sym(sym)
    if sym not in (2, 3):
        return samples
    reflected = np.roll(samples[::-1], 1, axis=0)  # index j -> (-j) mod M
    return 0.5 * (samples + reflected) if sym == 2 else 0.5 * (samples - reflected)


def analyze(
    samples: NDArray,
    sym: int,
    K: int,
    grid: SpaceGrid,
    period: float = TWO_PI,
) -> TimeField:
    """Discrete time-Fourier analysis of uniform samples, projected onto class ``sym``.

    ``samples`` has shape ``(M, *grid.shape)`` on times ``j T / M``.
    """
    samples = np.asarray(samples)
    M = samples.shape[0]
    kmax = max((abs(k) for k in mode_set(sym, K)), default=0)
    if M < 2 * kmax + 1:
        raise AliasingError(f"{M} time samples cannot resolve modes up to |k| = {kmax} (need >= {2 * kmax + 1})")
    if samples.shape[1:] != grid.shape:
        raise ValueError(f"sample array has spatial shape {samples.shape[1:]}, grid is {grid.shape}")
    coeffs = scipy.fft.fft(samples, axis=0, workers=grid.workers) / M
    full = np.stack([coeffs[k % M] for k in range(-K, K + 1)])
    return project_symmetry(TimeField(grid, 1, K, full, period), sym)


def project_symmetry(field: TimeField, sym: int) -> TimeField:
    """Orthogonal projection onto the real fields of symmetry class ``sym``.

    Works across classes: modes are gathered from ``field`` by index and the
    result only stores ``I_sym ∩ [-K, K]``.
    """
    sym = _check_sym(sym)
    K = field.K
    get = field.mode
    out = []
    for k in mode_set(sym, K):
        vk, vmk = get(k), get(-k)
        if sym == 2:
            # even in time and real: (v_k + v_-k)/2 then reality
            a = 0.5 * (vk + vmk)
            vk_new = 0.5 * (a + np.conj(a))
        elif sym == 3:
            a = 0.5 * (vk - vmk)
            vk_new = 0.5 * (a - np.conj(a))
        else:
            vk_new = 0.5 * (vk + np.conj(vmk))
        out.append(vk_new)
    arr = np.stack(out) if out else np.zeros((0, *field.grid.shape), complex)
    return TimeField(field.grid, sym, K, arr, field.period)


def time_norm(samples: NDArray, p: float, period: float = TWO_PI) -> NDArray[np.float64]:
    """Pointwise ``||W(., x)||_{L^p(T)}`` from uniform samples along axis 0."""
    M = samples.shape[0]
    return (np.sum(np.abs(samples) ** p, axis=0) * (period / M)) ** (1.0 / p)


def mixed_norm(
    W: TimeField | NDArray,
    q: float,
    p: float,
    grid: SpaceGrid | None = None,
    period: float = TWO_PI,
    M: int | None = None,
) -> float:
    """Quadrature value of ``||W||_{L^q(R^N, L^p(T))}``.

    ``W`` is either a TimeField (sampled on ``M`` points, default
    ``max(64, 8(K+1))``) or an array of uniform samples ``(M, *grid.shape)``.
    """
    if not (1 < p < math.inf and 1 < q < math.inf):
        raise ValueError("mixed-norm exponents must lie in (1, inf)")
    if isinstance(W, TimeField):
        grid, period = W.grid, W.period
        samples = W.sample(M if M is not None else oversampled_samples(W.K))
    else:
        if grid is None:
            raise ValueError("a SpaceGrid is required for raw samples")
        samples = np.asarray(W)
    inner = time_norm(samples, p, period)
    return float((np.sum(inner**q) * grid.cell_volume) ** (1.0 / q))


def spacetime_lp(samples: NDArray, grid: SpaceGrid, p: float, period: float = TWO_PI) -> float:
    """``∫_T ∫ |W|^p`` (no root) by uniform quadrature."""
    M = samples.shape[0]
    return float(np.sum(np.abs(samples) ** p) * (period / M) * grid.cell_volume)


# ---------------------------------------------------------------------------
# snapshot files
# ---------------------------------------------------------------------------

SNAPSHOT_MAGIC = "BRTHR1"


class SnapshotError(ValueError):
    """Malformed or inconsistent field snapshot."""


def write_snapshot(path, field: TimeField) -> None:
    """Write a field as a text header followed by raw little-endian complex data.

    Header lines: magic, N, L, n, s, T, K, comma-separated mode list.  The
    payload is one ``(re, im)`` float64 array per mode, in header order.
    """
    g = field.grid
    header = [
        SNAPSHOT_MAGIC,
        f"N {g.N}",
        f"L {g.L!r}",
        f"n {g.n}",
        f"s {field.sym}",
        f"T {field.period!r}",
        f"K {field.K}",
        "modes " + ",".join(str(k) for k in field.mode_list),
    ]
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        fh.write(np.ascontiguousarray(field.modes, dtype="<c16").tobytes())


def read_snapshot(path, workers: int = 1) -> TimeField:
    with open(path, "rb") as fh:
        lines = [fh.readline() for _ in range(8)]
        payload = fh.read()
    try:
        text = [ln.decode("ascii").rstrip("\n") for ln in lines]
    except UnicodeDecodeError as exc:
        raise SnapshotError(f"{path}: header is not ASCII") from exc
    if text[0] != SNAPSHOT_MAGIC:
        raise SnapshotError(f"{path}: bad magic {text[0]!r}, expected {SNAPSHOT_MAGIC!r}")
    keys = ["N", "L", "n", "s", "T", "K", "modes"]
    values = {}
    for key, line in zip(keys, text[1:]):
        name, _, value = line.partition(" ")
        if name != key:
            raise SnapshotError(f"{path}: expected header field {key!r}, found {line!r}")
        values[key] = value
    try:
        grid = SpaceGrid(int(values["N"]), float(values["L"]), int(values["n"]), workers=workers)
        sym, period, K = int(values["s"]), float(values["T"]), int(values["K"])
        ks = [int(k) for k in values["modes"].split(",")] if values["modes"] else []
    except ValueError as exc:
        raise SnapshotError(f"{path}: {exc}") from exc
    if sym not in SYMMETRY_CLASSES or ks != mode_set(sym, K):
        raise SnapshotError(f"{path}: mode list {ks} does not match class {sym} with K={K}")
    count = len(ks) * int(np.prod(grid.shape))
    if len(payload) != 16 * count:
        raise SnapshotError(f"{path}: payload has {len(payload)} bytes, expected {16 * count}")
    data = np.frombuffer(payload, dtype="<c16").astype(np.complex128).reshape(len(ks), *grid.shape)
    return TimeField(grid, sym, K, data, period)


def write_real_snapshot(path, grid: SpaceGrid, values: NDArray) -> None:
    """Store a single real spatial array (e.g. a potential) as a K = 0 field."""
    values = np.asarray(values, float)
    write_snapshot(path, TimeField(grid, 1, 0, values[None].astype(complex)))


def read_real_snapshot(path, workers: int = 1) -> tuple[SpaceGrid, NDArray[np.float64]]:
    field = read_snapshot(path, workers)
    if field.mode_list != [0]:
        raise SnapshotError(f"{path}: expected a single real array, found modes {field.mode_list}")
    if np.any(field.modes.imag != 0):
        raise SnapshotError(f"{path}: real array has nonzero imaginary part")
    return field.grid, field.modes[0].real.copy()
