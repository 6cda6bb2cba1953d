# Copyright (C) 2024 The Software Heritage developers
# See the AUTHORS file at the top-level directory of this distribution
# License: GNU Affero General Public License version 3, or any later version
# See top-level LICENSE file for more information

"""Real-valued DFT along the sequence axis and the frequency band split.

Spectra use the orthonormal real DFT: a length ``n`` signal has ``n // 2 + 1``
bins, bin 0 is the DC component and, for even ``n``, the last bin is the
Nyquist component. The ``c`` lowest bins form the low band, the remaining
ones the high band. Both band maps are orthogonal projections, so
``lfc(x) + hfc(x) == x`` and each map is its own adjoint.

>>> [round(v, 9) for v in lfc([1.0, 2.0, 3.0, 4.0], FrequencySplit(1)).tolist()]
[2.5, 2.5, 2.5, 2.5]
"""

from enum import Enum
import functools
import numbers
from typing import Sequence, Tuple, Union

import attr
import torch
from torch import nn

from swh.bsarec.error import InvalidArgument, UndefinedRatio

TensorLike = Union[torch.Tensor, Sequence[float]]


def _as_tensor(x: TensorLike) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x
    return torch.as_tensor(x, dtype=torch.float64)


@attr.s(frozen=True, slots=True)
class FrequencySplit:
    """Cutoff between the low band (bins ``0..c-1``) and the high band"""

    c = attr.ib(type=int)

    @c.validator
    def _check_c(self, attribute, value):
        if (
            not isinstance(value, numbers.Integral)
            or isinstance(value, bool)
            or value < 1
        ):
            raise InvalidArgument(f"cutoff must be a positive integer, got c={value}")

    def check(self, n: int) -> None:
        if self.c > n // 2:
            raise InvalidArgument(
                f"cutoff c={self.c} out of range for sequence length n={n} "
                f"(1 <= c <= {n // 2})"
            )


@attr.s(frozen=True, slots=True)
class RealSpectrum:
    """Complex amplitudes of the real-DFT bins of a length ``n`` signal,
    bins laid along axis ``dim``"""

    values = attr.ib(type=torch.Tensor)
    n = attr.ib(type=int)
    dim = attr.ib(type=int, default=-1)

    def band(self, split: FrequencySplit, low: bool) -> "RealSpectrum":
        split.check(self.n)
        bins = self.values.shape[self.dim]
        keep = torch.arange(bins, device=self.values.device) < split.c
        if not low:
            keep = ~keep
        shape = [1] * self.values.dim()
        shape[self.dim] = bins
        mask = keep.reshape(shape).to(self.values.dtype)
        return attr.evolve(self, values=self.values * mask)


@attr.s(frozen=True, slots=True)
class FourierPlan:
    """Transform of fixed length ``n``.

    Besides the FFT-backed forward and inverse transforms, a plan builds the
    dense ``n x n`` band projections, which are needed when the filter has
    to be restricted to past positions.
    """

    n = attr.ib(type=int)

    @n.validator
    def _check_n(self, attribute, value):
        if value < 1:
            raise InvalidArgument(f"sequence length must be >= 1, got n={value}")

    @property
    def bins(self) -> int:
        return self.n // 2 + 1

    def _check_length(self, x: torch.Tensor, dim: int) -> None:
        if x.shape[dim] != self.n:
            raise InvalidArgument(
                f"plan built for n={self.n}, got a signal of length {x.shape[dim]}"
            )

    def forward(self, x: TensorLike, dim: int = -1) -> RealSpectrum:
        x = _as_tensor(x)
        self._check_length(x, dim)
        return RealSpectrum(
            values=torch.fft.rfft(x, n=self.n, dim=dim, norm="ortho"),
            n=self.n,
            dim=dim,
        )

    def inverse(self, spectrum: RealSpectrum) -> torch.Tensor:
        if spectrum.n != self.n:
            raise InvalidArgument(
                f"plan built for n={self.n}, got a spectrum of length {spectrum.n}"
            )
        return torch.fft.irfft(
            spectrum.values, n=self.n, dim=spectrum.dim, norm="ortho"
        )

    def band_pass(
        self, x: TensorLike, split: FrequencySplit, low: bool, dim: int = -1
    ) -> torch.Tensor:
        return self.inverse(self.forward(x, dim).band(split, low))

    def projections(
        self, split: FrequencySplit, dtype: torch.dtype = torch.float64
    ) -> Tuple[torch.Tensor, torch.Tensor]:
        """Dense (low, high) band projection matrices, acting on column vectors"""
        split.check(self.n)
        eye = torch.eye(self.n, dtype=dtype)
        low = self.band_pass(eye, split, low=True, dim=0)
        return low, eye - low


@functools.lru_cache(maxsize=64)
def get_plan(n: int) -> FourierPlan:
    return FourierPlan(n)


def lfc(x: TensorLike, split: FrequencySplit, dim: int = -1) -> torch.Tensor:
    """Low-frequency components of ``x`` along ``dim``: every bin >= c zeroed"""
    x = _as_tensor(x)
    return get_plan(x.shape[dim]).band_pass(x, split, low=True, dim=dim)


def hfc(x: TensorLike, split: FrequencySplit, dim: int = -1) -> torch.Tensor:
    """High-frequency components of ``x`` along ``dim``: every bin < c zeroed"""
    x = _as_tensor(x)
    return get_plan(x.shape[dim]).band_pass(x, split, low=False, dim=dim)


def apply_inductive_bias(
    X: TensorLike,
    split: FrequencySplit,
    beta: Union[torch.Tensor, float],
    causal: bool = False,
) -> torch.Tensor:
    """Rescaled filter ``lfc(X) + beta * hfc(X)`` along the sequence axis.

    ``X`` is ``[..., N, D]``; ``beta`` is a scalar (or a one element tensor)
    or a vector of ``D`` values, one per feature column. With ``causal``,
    each position only mixes itself and earlier positions: the lower
    triangular parts of the dense band projections are applied instead.
    """
    X = _as_tensor(X)
    if not isinstance(beta, torch.Tensor):
        beta = torch.tensor(beta, dtype=X.dtype)
    if beta.numel() not in (1, X.shape[-1]):
        raise InvalidArgument(
            f"rescaler has {beta.numel()} entries, expected 1 or D={X.shape[-1]}"
        )
    beta = beta.reshape(-1) if beta.numel() > 1 else beta.reshape(())
    if causal:
        low_proj, high_proj = get_plan(X.shape[-2]).projections(split, dtype=X.dtype)
        low_proj = torch.tril(low_proj).to(X.device)
        high_proj = torch.tril(high_proj).to(X.device)
        return torch.matmul(low_proj, X) + beta * torch.matmul(high_proj, X)
    plan = get_plan(X.shape[-2])
    spectrum = plan.forward(X, dim=-2)
    low = plan.inverse(spectrum.band(split, low=True))
    high = plan.inverse(spectrum.band(split, low=False))
    return low + beta * high


def hfc_lfc_ratio(x: TensorLike, split: FrequencySplit) -> float:
    """``||hfc(x)|| / ||lfc(x)||``; a low-pass filter drives it to zero under
    iteration"""
    x = _as_tensor(x)
    low = float(torch.linalg.vector_norm(lfc(x, split)))
    # threshold scales with ||x||
    if low == 0.0 or low <= torch.finfo(x.dtype).eps * float(
        torch.linalg.vector_norm(x)
    ):
        raise UndefinedRatio(
            f"no low-frequency energy below bin c={split.c} for n={x.shape[-1]}"
        )
    return float(torch.linalg.vector_norm(hfc(x, split))) / low


class BetaMode(Enum):
    """Shape of the high-frequency rescaler"""

    SCALAR = "scalar"
    VECTOR = "vector"


class FrequencyRescaler(nn.Module):
    """Trainable rescaler of the high band, initialized to the identity filter"""

    def __init__(self, mode: BetaMode, hidden_size: int):
        super().__init__()
        self.mode = BetaMode(mode)
        size = 1 if self.mode is BetaMode.SCALAR else hidden_size
        self.beta = nn.Parameter(torch.ones(size))

    def forward(
        self, X: torch.Tensor, split: FrequencySplit, causal: bool = False
    ) -> torch.Tensor:
        return apply_inductive_bias(X, split, self.beta, causal=causal)
