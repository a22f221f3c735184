"""Rotationally symmetric 2D Gaussian spot model with implicit amplitudes.

The image model is ``h_i = alpha * f_i + beta``, where ``f_i`` is a
unit-peak Gaussian profile sampled at integer pixel centers.  Only the
three shape parameters (center x, center y, sigma) are free: for any
shape, the signal amplitude ``alpha`` and the uniform background ``beta``
have a closed-form least-squares solution.  This module evaluates the
profile, the implicit amplitudes, the squared error and its exact
gradient with respect to the shape parameters.

Numeric conventions: per-pixel values and per-pixel products are float32,
reductions over pixels accumulate in float64.  The stop-condition
statistics of the solver depend on the single-precision evaluation noise,
so the dtype handling here is deliberate -- keep it when editing.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

#: Hard upper limit on pixels per spot; keeps every fit register-sized.
MAX_PIXELS = 1024

#: Relative guard on the 2x2 denominator N*FF - F^2 (see ``alpha_beta``).
DENOM_GUARD = 1e-12


class SingularProfile(ValueError):
    """The profile is numerically constant; amplitudes are not identifiable."""


@lru_cache(maxsize=128)
def _grid_coords(width: int, height: int) -> tuple[np.ndarray, np.ndarray]:
    x = np.tile(np.arange(width, dtype=np.float32), height)
    y = np.repeat(np.arange(height, dtype=np.float32), width)
    x.setflags(write=False)
    y.setflags(write=False)
    return x, y


@dataclass(frozen=True)
class PixelGrid:
    """Rectangular pixel raster; pixel i sits at integer coordinates
    (i mod width, i div width), origin at the top-left pixel center."""

    width: int
    height: int

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise ValueError(f"degenerate grid {self.width}x{self.height}")
        if self.width * self.height > MAX_PIXELS:
            raise ValueError(
                f"grid {self.width}x{self.height} exceeds {MAX_PIXELS} pixels"
            )

    @property
    def n(self) -> int:
        return self.width * self.height

    @property
    def coords(self) -> tuple[np.ndarray, np.ndarray]:
        """Per-pixel (x, y) coordinate arrays, float32, row-major."""
        return _grid_coords(self.width, self.height)


@dataclass(frozen=True)
class SpotImage:
    """One region of interest: a grid plus row-major float32 intensities."""

    grid: PixelGrid
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float32).ravel()
        if v.size != self.grid.n:
            raise ValueError(
                f"expected {self.grid.n} pixel values, got {v.size}"
            )
        object.__setattr__(self, "values", v)

    @classmethod
    def from_array(cls, array) -> "SpotImage":
        a = np.asarray(array)
        if a.ndim != 2:
            raise ValueError("expected a 2D array")
        return cls(PixelGrid(a.shape[1], a.shape[0]), a)

    def as_2d(self) -> np.ndarray:
        return self.values.reshape(self.grid.height, self.grid.width)


def _f32(value) -> float:
    return float(np.float32(value))


@dataclass(frozen=True)
class ShapeParams:
    """Reduced parameter vector: center (x, y) and standard deviation, in
    pixels.  Values are quantized to float32 on construction."""

    x: float
    y: float
    sigma: float

    def __post_init__(self):
        object.__setattr__(self, "x", _f32(self.x))
        object.__setattr__(self, "y", _f32(self.y))
        object.__setattr__(self, "sigma", _f32(self.sigma))

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.sigma], dtype=np.float32)


@dataclass(frozen=True)
class Amplitudes:
    """Implicitly estimated signal amplitude and per-pixel background."""

    alpha: float
    beta: float

    def __post_init__(self):
        object.__setattr__(self, "alpha", _f32(self.alpha))
        object.__setattr__(self, "beta", _f32(self.beta))


@dataclass(frozen=True)
class ProfileSums:
    """Pixel sums shared by the amplitude solve and the gradient:
    F = sum f, G = sum g, FF = sum f^2, FG = sum f*g, denom = N*FF - F^2."""

    n: int
    f_sum: float
    g_sum: float
    ff_sum: float
    fg_sum: float
    denom: float


@dataclass(frozen=True)
class GradientSums:
    """Per shape parameter j: dF_j = sum df/dp_j, dFF_j = 2*sum f*df/dp_j,
    dFG_j = sum g*df/dp_j, gamma_j = N*dFF_j - 2*F*dF_j."""

    df: np.ndarray
    dff: np.ndarray
    dfg: np.ndarray
    gamma: np.ndarray


def _scaled_offsets(p: ShapeParams, grid: PixelGrid):
    """Pixel offsets from the center divided by sigma, plus 1/sigma.

    Sigma is inverted exactly once per evaluation; everything downstream
    is multiplications.  The arithmetic is valid for any sigma != 0 (the
    explicit 5-parameter baseline runs it with sign-free sigma).
    """
    x, y = grid.coords
    inv_sigma = np.float32(1.0) / np.float32(p.sigma)
    u = (x - np.float32(p.x)) * inv_sigma
    v = (y - np.float32(p.y)) * inv_sigma
    return u, v, inv_sigma


def profile(p: ShapeParams, grid: PixelGrid) -> np.ndarray:
    """Unit-peak Gaussian profile f_i = exp(-((x_i-x)^2+(y_i-y)^2)/(2 sigma^2)).

    Requires sigma > 0 (callers guard via the parameter limiter).  Values
    lie in (0, 1]; pixels very far from the center may underflow to 0.0
    in float32.
    """
    u, v, _ = _scaled_offsets(p, grid)
    q = u * u + v * v
    return np.exp(np.float32(-0.5) * q)


def profile_and_gradient(p: ShapeParams, grid: PixelGrid):
    """Profile plus its partial derivatives, sharing one exponential per
    pixel.

    Returns ``(f, fgrad)`` where ``fgrad[:, j]`` holds df_i/dp_j for
    p = (x, y, sigma):

        df/dx = (x_i - x)/sigma^2 * f
        df/dy = (y_i - y)/sigma^2 * f
        df/dsigma = ((x_i - x)^2 + (y_i - y)^2)/sigma^3 * f
    """
    u, v, inv_sigma = _scaled_offsets(p, grid)
    q = u * u + v * v
    f = np.exp(np.float32(-0.5) * q)
    fs = f * inv_sigma
    fgrad = np.empty((f.size, 3), dtype=np.float32)
    fgrad[:, 0] = u * fs
    fgrad[:, 1] = v * fs
    fgrad[:, 2] = q * fs
    return f, fgrad


def profile_gradient(p: ShapeParams, grid: PixelGrid) -> np.ndarray:
    """Partial derivatives of the profile; see ``profile_and_gradient``."""
    return profile_and_gradient(p, grid)[1]


def alpha_beta(f: np.ndarray, image: SpotImage) -> tuple[Amplitudes, ProfileSums]:
    """Closed-form least-squares amplitudes for a fixed profile.

    Solves ``argmin_{alpha,beta} sum (alpha*f_i + beta - g_i)^2`` through
    the 2x2 normal equations:

        alpha = (N*FG - F*G) / (N*FF - F^2)
        beta  = (G*FF - F*FG) / (N*FF - F^2)

    Raises ``SingularProfile`` when the denominator is not safely positive
    (relative guard ``denom <= DENOM_GUARD * N * FF``), which happens only
    for numerically constant profiles.
    """
    g = image.values
    n = f.size
    f_sum = float(f.sum(dtype=np.float64))
    g_sum = float(g.sum(dtype=np.float64))
    ff_sum = float((f * f).sum(dtype=np.float64))
    fg_sum = float((f * g).sum(dtype=np.float64))
    denom = n * ff_sum - f_sum * f_sum
    sums = ProfileSums(n, f_sum, g_sum, ff_sum, fg_sum, denom)
    if denom <= DENOM_GUARD * n * ff_sum:
        raise SingularProfile(
            f"constant profile: N*FF - F^2 = {denom:g} with N*FF = {n * ff_sum:g}"
        )
    alpha = (n * fg_sum - f_sum * g_sum) / denom
    beta = (g_sum * ff_sum - f_sum * fg_sum) / denom
    return Amplitudes(alpha, beta), sums


def model_values(f: np.ndarray, amps: Amplitudes) -> np.ndarray:
    """Model image h_i = alpha*f_i + beta, evaluated in float32."""
    return np.float32(amps.alpha) * f + np.float32(amps.beta)


def residuals(image: SpotImage, f: np.ndarray, amps: Amplitudes) -> np.ndarray:
    """Per-pixel residuals r_i = g_i - (alpha*f_i + beta)."""
    return image.values - model_values(f, amps)


def chi_squared(image: SpotImage, f: np.ndarray, amps: Amplitudes) -> float:
    """Squared error sum((g_i - h_i)^2); float32 addends, float64 sum."""
    r = residuals(image, f, amps)
    return _f32((r * r).sum(dtype=np.float64))


def gradient_sums(
    f: np.ndarray, fgrad: np.ndarray, image: SpotImage, sums: ProfileSums
) -> GradientSums:
    """Pixel sums of the profile partials needed for the amplitude gradients."""
    g = image.values
    df = np.empty(3)
    dff = np.empty(3)
    dfg = np.empty(3)
    for j in range(3):
        col = fgrad[:, j]
        df[j] = col.sum(dtype=np.float64)
        dff[j] = 2.0 * (f * col).sum(dtype=np.float64)
        dfg[j] = (g * col).sum(dtype=np.float64)
    gamma = sums.n * dff - 2.0 * sums.f_sum * df
    return GradientSums(df=df, dff=dff, dfg=dfg, gamma=gamma)


def coefficient_gradients(
    sums: ProfileSums, gsums: GradientSums, amps: Amplitudes
) -> tuple[np.ndarray, np.ndarray]:
    """Derivatives of the implicit amplitudes with respect to the shape:

        dalpha/dp_j = (N*dFG_j - G*dF_j - alpha*gamma_j) / denom
        dbeta/dp_j  = (G*dFF_j - FG*dF_j - F*dFG_j - beta*gamma_j) / denom
    """
    if sums.denom <= DENOM_GUARD * sums.n * sums.ff_sum:
        raise SingularProfile("constant profile: amplitude gradients undefined")
    d = sums.denom
    dalpha = (sums.n * gsums.dfg - sums.g_sum * gsums.df - amps.alpha * gsums.gamma) / d
    dbeta = (
        sums.g_sum * gsums.dff
        - sums.fg_sum * gsums.df
        - sums.f_sum * gsums.dfg
        - amps.beta * gsums.gamma
    ) / d
    return dalpha, dbeta


def chi_gradient(
    image: SpotImage,
    f: np.ndarray,
    fgrad: np.ndarray,
    amps: Amplitudes,
    coeff_grads: tuple[np.ndarray, np.ndarray],
) -> tuple[np.ndarray, np.ndarray]:
    """Gradient of the squared error and the per-pixel model derivatives.

    The model derivative d_ij = dalpha_j*f_i + alpha*df_i/dp_j + dbeta_j
    feeds the normal matrix of the solver; the summed gradient is
    grad_j = 2*sum (h_i - g_i)*d_ij.  Because the residuals are orthogonal
    to f and to the constant at the implicit optimum, grad also equals
    -2*alpha*sum r_i*df_i/dp_j up to round-off.
    """
    dalpha, dbeta = coeff_grads
    r = residuals(image, f, amps)
    a32 = np.float32(amps.alpha)
    dmat = np.empty_like(fgrad)
    for j in range(3):
        dmat[:, j] = np.float32(dalpha[j]) * f + a32 * fgrad[:, j] + np.float32(dbeta[j])
    grad = np.empty(3)
    for j in range(3):
        grad[j] = -2.0 * (r * dmat[:, j]).sum(dtype=np.float64)
    return grad, dmat
