"""Dual-domain training loss: smooth-L1 in time plus magnitude-spectrum MSE.

The spectral term compares one-sided DFT magnitudes over K = N//2 + 1 bins
(real signals carry no extra information in the mirrored half; counting it
would only double every interior bin). Arbitrary segment lengths are
supported directly; padding a segment to a power of two would change the bin
grid and is deliberately not done. Both terms carry exact analytic gradients.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import ShapeMismatch, Tensor, accumulate_grad, add, apply_op, mul

__all__ = ["LossConfig", "LossReport", "smooth_l1", "dft", "spectral_loss", "total_loss"]


@dataclass
class LossConfig:
    beta: float = 1.0
    w_time: float = 1.0
    w_spectral: float = 0.1

    def validate(self) -> None:
        if self.beta <= 0:
            raise ValueError(f"beta must be positive, got {self.beta}")
        if self.w_time < 0 or self.w_spectral < 0 or self.w_time + self.w_spectral == 0:
            raise ValueError("loss weights must be non-negative and not both zero")


@dataclass
class LossReport:
    time_loss: float
    spectral_loss: float
    total: float


def smooth_l1(y_hat: Tensor, y: Tensor, beta: float = 1.0) -> Tensor:
    """Mean of the C1 piecewise loss: 0.5 e^2/beta inside |e| < beta, |e| - beta/2 outside."""
    if beta <= 0:
        raise ValueError(f"beta must be positive, got {beta}")
    if y_hat.shape != y.shape:
        raise ShapeMismatch("smooth_l1", y_hat.shape, y.shape)
    e = y_hat.data - y.data
    inner = np.abs(e) < beta
    vals = np.where(inner, 0.5 * e * e / beta, np.abs(e) - 0.5 * beta)
    out_data = np.array([vals.mean()])
    n = e.size

    def backward(g, y_hat=y_hat, y=y, e=e, inner=inner):
        de = np.where(inner, e / beta, np.sign(e)) * (g[0] / n)
        accumulate_grad(y_hat, de)
        accumulate_grad(y, -de)

    return apply_op(out_data, (y_hat, y), backward)


def dft(x: np.ndarray, onesided: bool = False) -> np.ndarray:
    """Discrete Fourier transform of a real signal along the last axis.

    Any length is supported (segment lengths here are not powers of two).
    """
    x = np.asarray(x, dtype=np.float64)
    return np.fft.rfft(x, axis=-1) if onesided else np.fft.fft(x, axis=-1)


def _halved_duplicate_bins(n: int) -> np.ndarray:
    """Weights that undo the doubling irfft applies to conjugate-paired bins."""
    k = n // 2 + 1
    w = np.full(k, 0.5)
    w[0] = 1.0
    if n % 2 == 0:
        w[-1] = 1.0
    return w


def _magnitude_adjoint(spectrum: np.ndarray, coeff: np.ndarray, n: int) -> np.ndarray:
    """Map per-bin magnitude-gradient coefficients back to the time domain.

    `coeff` holds dL/d|X_k| on one-sided bins; zero-magnitude bins contribute
    nothing (the magnitude has no derivative at the origin, and the stable
    subgradient there is zero).
    """
    mag = np.abs(spectrum)
    safe = mag >= 1e-12
    unit = np.zeros_like(spectrum)
    np.divide(spectrum, mag, out=unit, where=safe)
    g = coeff * unit * _halved_duplicate_bins(n)
    # irfft reconstructs sum over the implied conjugate-symmetric spectrum / n
    return np.fft.irfft(g, n=n, axis=-1) * n


def spectral_loss(y_hat: Tensor, y: Tensor) -> Tensor:
    """Mean over segments of the one-sided magnitude-spectrum squared error."""
    if y_hat.shape != y.shape:
        raise ShapeMismatch("spectral_loss", y_hat.shape, y.shape)
    n = y_hat.shape[-1]
    k = n // 2 + 1
    rows_hat = y_hat.data.reshape(-1, n)
    rows_ref = y.data.reshape(-1, n)
    m = rows_hat.shape[0]

    spec_hat = np.fft.rfft(rows_hat, axis=-1)
    spec_ref = np.fft.rfft(rows_ref, axis=-1)
    mag_hat = np.abs(spec_hat)
    mag_ref = np.abs(spec_ref)
    per_segment = ((mag_ref - mag_hat) ** 2).sum(axis=-1) / k
    out_data = np.array([per_segment.mean()])

    def backward(g, y_hat=y_hat, y=y, spec_hat=spec_hat, spec_ref=spec_ref,
                 mag_hat=mag_hat, mag_ref=mag_ref):
        scale = g[0] / m
        coeff_hat = (2.0 / k) * (mag_hat - mag_ref) * scale
        accumulate_grad(y_hat, _magnitude_adjoint(spec_hat, coeff_hat, n).reshape(y_hat.shape))
        if y.requires_grad:
            coeff_ref = (2.0 / k) * (mag_ref - mag_hat) * scale
            accumulate_grad(y, _magnitude_adjoint(spec_ref, coeff_ref, n).reshape(y.shape))

    return apply_op(out_data, (y_hat, y), backward)


def total_loss(y_hat: Tensor, y: Tensor, config: LossConfig) -> tuple[Tensor, LossReport]:
    """Weighted sum of both domains; the report carries detached components."""
    config.validate()
    time_term = smooth_l1(y_hat, y, config.beta)
    spectral_term = spectral_loss(y_hat, y)
    total = add(mul(time_term, config.w_time), mul(spectral_term, config.w_spectral))
    report = LossReport(
        time_loss=time_term.item(),
        spectral_loss=spectral_term.item(),
        total=total.item(),
    )
    return total, report
