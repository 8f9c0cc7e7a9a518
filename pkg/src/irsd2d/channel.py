"""Geometry, path loss and small-scale fading for IRS-assisted D2D links.

Channel arrays are indexed ``[tx, rx]`` (and ``[tx, rx, element]`` for the
per-element reflective channels), so ``direct[m, n]`` is the link from
transmitter ``m`` to receiver ``n``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

TWO_PI = 2.0 * np.pi


class DomainError(ValueError):
    """Raised when a channel quantity is requested outside its domain."""


@dataclass(frozen=True)
class Position3:
    x: float
    y: float
    z: float = 0.0

    def __post_init__(self):
        if not all(math.isfinite(v) for v in (self.x, self.y, self.z)):
            raise DomainError(f"non-finite coordinate in {self!r}")

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z], dtype=float)


@dataclass(frozen=True)
class PathLossParams:
    """Large-scale and fading parameters shared by every link.

    ``beta0`` is the linear power gain at the 1 m reference distance,
    ``kappa0``/``kappa1`` are the direct/LoS and NLoS exponents,
    ``rician_beta1`` is the Rician K-factor of the reflective links and
    ``nakagami_m`` the severity of the direct-link fading.
    """

    beta0: float = 1e-3
    kappa0: float = 2.5
    kappa1: float = 3.6
    rician_beta1: float = 4.0
    nakagami_m: float = 2.0

    def __post_init__(self):
        if not self.beta0 > 0:
            raise DomainError(f"beta0 must be positive, got {self.beta0}")
        if not (self.kappa0 > 0 and self.kappa1 > 0):
            raise DomainError("path-loss exponents must be positive")
        if not self.rician_beta1 >= 0:
            raise DomainError(f"rician_beta1 must be >= 0, got {self.rician_beta1}")
        if not self.nakagami_m >= 0.5:
            raise DomainError(f"nakagami_m must be >= 0.5, got {self.nakagami_m}")

    @property
    def los_weight(self) -> float:
        return math.sqrt(self.rician_beta1 / (1.0 + self.rician_beta1))

    @property
    def nlos_weight(self) -> float:
        return math.sqrt(1.0 / (1.0 + self.rician_beta1))


@dataclass(frozen=True)
class PhaseShiftVector:
    """IRS reflection phases; amplitudes are fixed to one."""

    theta: np.ndarray
    eta: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        theta = np.asarray(self.theta, dtype=float).reshape(-1)
        if np.any(theta < 0) or np.any(theta > TWO_PI) or not np.all(np.isfinite(theta)):
            raise DomainError("phase shifts must lie in [0, 2*pi]")
        object.__setattr__(self, "theta", theta)
        object.__setattr__(self, "eta", np.ones_like(theta))

    @property
    def coefficients(self) -> np.ndarray:
        return self.eta * np.exp(1j * self.theta)


@dataclass
class ChannelRealization:
    direct: np.ndarray  # (N, N) complex
    reflective: np.ndarray  # (N, N, K) complex
    valid_for_step: int = 0

    @property
    def n_pairs(self) -> int:
        return self.direct.shape[0]

    @property
    def n_elements(self) -> int:
        return self.reflective.shape[2]


def distance(a: Position3 | np.ndarray, b: Position3 | np.ndarray) -> float | np.ndarray:
    """Euclidean distance; also broadcasts over ``(..., 3)`` arrays."""
    a = a.as_array() if isinstance(a, Position3) else np.asarray(a, dtype=float)
    b = b.as_array() if isinstance(b, Position3) else np.asarray(b, dtype=float)
    d = np.sqrt(np.sum((a - b) ** 2, axis=-1))
    return float(d) if np.ndim(d) == 0 else d


def _check_positive(*distances):
    for d in distances:
        d = np.asarray(d, dtype=float)
        if np.any(~(d > 0)):
            raise DomainError("distances must be positive")


def nakagami_fading(m: float, rng: np.random.Generator, size=None) -> np.ndarray:
    """Unit-power complex fading with Nakagami-m amplitude and uniform phase."""
    power = rng.gamma(shape=m, scale=1.0 / m, size=size)
    phase = rng.uniform(0.0, TWO_PI, size=size)
    return np.sqrt(power) * np.exp(1j * phase)


def complex_gaussian(rng: np.random.Generator, size=None) -> np.ndarray:
    """Samples of CN(0, 1)."""
    return (rng.standard_normal(size) + 1j * rng.standard_normal(size)) / math.sqrt(2.0)


def sample_direct_channel(d, params: PathLossParams, rng: np.random.Generator | None = None,
                          fading: bool = True, phase=None):
    """Direct Tx->Rx coefficient ``h_hat * sqrt(beta0 * d**-kappa0)``.

    With ``fading=False`` the small-scale term is fixed to 1, which leaves
    only the deterministic path loss.  ``phase`` pins the phase of ``h_hat``
    (e.g. to a geometry-bound value); by default it is uniform.
    """
    _check_positive(d)
    d = np.asarray(d, dtype=float)
    amplitude = np.sqrt(params.beta0 * d ** (-params.kappa0))
    if fading:
        if rng is None:
            raise ValueError("an rng is required when fading is enabled")
        h_hat = nakagami_fading(params.nakagami_m, rng, size=d.shape)
        if phase is not None:
            h_hat = np.abs(h_hat) * np.exp(1j * np.broadcast_to(phase, d.shape))
        amplitude = amplitude * h_hat
    else:
        amplitude = amplitude.astype(complex)
    return complex(amplitude) if amplitude.ndim == 0 else amplitude


def sample_reflective_channel(d_tx_irs, d_irs_rx, params: PathLossParams, rng: np.random.Generator,
                              n_elements: int | None = None, los_phase=None) -> np.ndarray:
    """Rician per-element channel through the IRS.

    Returns an array of shape ``broadcast(d_tx_irs, d_irs_rx).shape + (K,)``
    when ``n_elements`` is given, otherwise of the broadcast shape.  Each
    entry draws its own LoS phase and NLoS fading; a fixed LoS phase array
    may be supplied through ``los_phase`` (it then replaces the draw).
    """
    _check_positive(d_tx_irs, d_irs_rx)
    product = np.asarray(d_tx_irs, dtype=float) * np.asarray(d_irs_rx, dtype=float)
    shape = product.shape if n_elements is None else product.shape + (n_elements,)
    if n_elements is not None:
        product = product[..., None]
    if los_phase is None:
        los_phase = rng.uniform(0.0, TWO_PI, size=shape)
    else:
        los_phase = np.broadcast_to(np.asarray(los_phase, dtype=float), shape)
    h_los = np.sqrt(params.beta0 * product ** (-params.kappa0)) * np.exp(-1j * los_phase)
    h_nlos = np.sqrt(params.beta0 * product ** (-params.kappa1)) * complex_gaussian(rng, size=shape)
    return params.los_weight * h_los + params.nlos_weight * h_nlos


def effective_channel(direct, reflective_elements, phi: PhaseShiftVector | np.ndarray):
    """``direct + sum_k reflective[..., k] * eta_k * exp(j theta_k)``.

    Works elementwise over leading axes, so passing the ``(N, N)`` direct
    matrix with the ``(N, N, K)`` reflective tensor yields all effective
    gains at once.
    """
    coeffs = phi.coefficients if isinstance(phi, PhaseShiftVector) else np.exp(1j * np.asarray(phi, dtype=float))
    coeffs = np.asarray(coeffs).reshape(-1)
    reflective_elements = np.asarray(reflective_elements)
    if reflective_elements.shape[-1] != coeffs.shape[0]:
        raise ValueError(
            f"dimension mismatch: {reflective_elements.shape[-1]} elements vs {coeffs.shape[0]} phases"
        )
    return direct + reflective_elements @ coeffs


def optimal_single_element_phase(direct: complex, element: complex) -> float:
    """Phase that co-phases one reflective element with the direct path."""
    return float(np.mod(np.angle(direct) - np.angle(element), TWO_PI))
