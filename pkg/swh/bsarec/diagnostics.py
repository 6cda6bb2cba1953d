# Copyright (C) 2024 The Software Heritage developers
# See the AUTHORS file at the top-level directory of this distribution
# License: GNU Affero General Public License version 3, or any later version
# See top-level LICENSE file for more information

"""Spectral and oversmoothing diagnostics of attention.

The response of an attention matrix at real-DFT bin ``k`` is the fraction of
a bin-``k`` sinusoid that stays in bin ``k`` after one application: with
``B_k`` the orthonormal real basis of the bin (one column for DC and
Nyquist, a cosine/sine pair otherwise),
``r_k = ||B_k^T A B_k||_F / ||B_k||_F``. Curves are normalized by ``r_0``,
which is 1 for any row-stochastic matrix.
"""

import csv
import json
import logging
import os
from typing import Dict, Iterable, List, Optional, Sequence, Union

import attr
import torch

from swh.bsarec.error import InvalidArgument, UndefinedRatio
from swh.bsarec.model import BSARec, ModelConfig
from swh.bsarec.spectral import FrequencySplit, get_plan, hfc_lfc_ratio

logger = logging.getLogger(__name__)

PathLike = Union[str, os.PathLike]


def check_row_stochastic(A: torch.Tensor, tolerance: float = 1e-6) -> None:
    if A.dim() != 2 or A.shape[0] != A.shape[1]:
        raise InvalidArgument(f"expected a square matrix, got {tuple(A.shape)}")
    if (A < -tolerance).any():
        raise InvalidArgument("matrix has negative entries")
    worst = float((A.sum(-1) - 1).abs().max())
    if worst > tolerance:
        raise InvalidArgument(f"rows do not sum to 1 (max deviation {worst:.3g})")


def bin_basis(n: int, k: int, dtype: torch.dtype = torch.float64) -> torch.Tensor:
    """Orthonormal real basis ``[n, m]`` of real-DFT bin ``k``"""
    plan = get_plan(n)
    if not 0 <= k < plan.bins:
        raise InvalidArgument(f"bin {k} out of range for n={n}")
    complex_dtype = torch.complex128 if dtype == torch.float64 else torch.complex64
    units = [1.0 + 0j] if k == 0 or 2 * k == n else [1.0 + 0j, 1j]
    columns = []
    for unit in units:
        spectrum = torch.zeros(plan.bins, dtype=complex_dtype)
        spectrum[k] = unit
        column = torch.fft.irfft(spectrum, n=n, norm="ortho").to(dtype)
        columns.append(column / torch.linalg.vector_norm(column))
    return torch.stack(columns, dim=-1)


def spectral_response(
    A: torch.Tensor, normalize: bool = True, check: bool = True
) -> torch.Tensor:
    """Gain of ``A`` at every real-DFT bin"""
    A = torch.as_tensor(A, dtype=torch.float64)
    if check:
        check_row_stochastic(A)
    n = A.shape[0]
    responses = []
    for k in range(get_plan(n).bins):
        basis = bin_basis(n, k, dtype=A.dtype)
        kept = basis.t() @ A @ basis
        responses.append(
            torch.linalg.matrix_norm(kept) / torch.linalg.matrix_norm(basis)
        )
    response = torch.stack(responses)
    if normalize:
        response = response / response[0]
    return response


def lowpass_decay(
    A: torch.Tensor, x: torch.Tensor, split: FrequencySplit, t_max: int
) -> List[Optional[float]]:
    """``hfc_lfc_ratio(A^t x)`` for ``t = 1..t_max``; None where the low band
    carries no energy"""
    A = torch.as_tensor(A, dtype=torch.float64)
    check_row_stochastic(A)
    y = torch.as_tensor(x, dtype=A.dtype)
    ratios: List[Optional[float]] = []
    undefined = 0
    for _ in range(t_max):
        y = A @ y
        try:
            ratios.append(hfc_lfc_ratio(y, split))
        except UndefinedRatio:
            ratios.append(None)
            undefined += 1
    if undefined:
        logger.warning("HFC/LFC ratio undefined at %d of %d steps", undefined, t_max)
    return ratios


def random_softmax_attention(
    n: int, d: int = 8, generator: Optional[torch.Generator] = None
) -> torch.Tensor:
    """``softmax(Q K^T / sqrt(d))`` with standard normal ``Q``, ``K``"""
    Q = torch.randn(n, d, generator=generator, dtype=torch.float64)
    K = torch.randn(n, d, generator=generator, dtype=torch.float64)
    return torch.softmax(Q @ K.t() / d ** 0.5, dim=-1)


def singular_spectrum(X: torch.Tensor) -> torch.Tensor:
    """Singular values in descending order, divided by the largest"""
    values = torch.linalg.svdvals(torch.as_tensor(X, dtype=torch.float64))
    if float(values[0]) == 0.0:
        return values
    return values / values[0]


def mean_cosine_similarity(X: torch.Tensor) -> float:
    """Mean cosine similarity over every pair of distinct rows"""
    X = torch.as_tensor(X, dtype=torch.float64)
    rows = X.shape[0]
    if rows < 2:
        raise InvalidArgument("cosine similarity needs at least two rows")
    unit = X / torch.linalg.vector_norm(X, dim=-1, keepdim=True)
    similarity = unit @ unit.t()
    off_diagonal = similarity.sum() - similarity.diagonal().sum()
    return float(off_diagonal / (rows * (rows - 1)))


@attr.s
class OversmoothingProfile:
    labels = attr.ib(type=List[str], factory=list)
    singular_values = attr.ib(type=List[torch.Tensor], factory=list)
    cosine = attr.ib(type=List[float], factory=list)
    skipped = attr.ib(type=int, default=0)


def oversmoothing_profile(
    matrices: Sequence[torch.Tensor],
    masks: Optional[Sequence[Optional[torch.Tensor]]] = None,
    labels: Optional[Sequence[str]] = None,
) -> OversmoothingProfile:
    """Normalized singular spectrum and mean pairwise row cosine similarity of
    each matrix, restricted to the rows selected by its mask (non-padding
    positions). Matrices with fewer than two selected nonzero rows are
    skipped."""
    if not matrices:
        raise InvalidArgument("no matrix to profile")
    profile = OversmoothingProfile()
    for index, X in enumerate(matrices):
        X = torch.as_tensor(X, dtype=torch.float64)
        if masks is not None and masks[index] is not None:
            X = X[masks[index]]
        X = X[torch.linalg.vector_norm(X, dim=-1) > 0]
        if X.shape[0] < 2:
            profile.skipped += 1
            continue
        profile.labels.append(labels[index] if labels is not None else str(index))
        profile.singular_values.append(singular_spectrum(X))
        profile.cosine.append(mean_cosine_similarity(X))
    if profile.skipped:
        logger.warning("Skipped %d all-padding matrices", profile.skipped)
    return profile


def iterate_profile(
    A: torch.Tensor, X: torch.Tensor, steps: Iterable[int]
) -> OversmoothingProfile:
    """Profile of ``A^t X`` for each ``t`` in ``steps``"""
    A = torch.as_tensor(A, dtype=torch.float64)
    X = torch.as_tensor(X, dtype=torch.float64)
    steps = list(steps)
    iterates = [torch.linalg.matrix_power(A, t) @ X for t in steps]
    return oversmoothing_profile(iterates, labels=[str(t) for t in steps])


@attr.s(frozen=True, slots=True)
class BetaSummary:
    layer = attr.ib(type=int)
    mode = attr.ib(type=str)
    mean = attr.ib(type=float)
    min = attr.ib(type=float)
    max = attr.ib(type=float)
    values = attr.ib(type=List[float])


def beta_report(model: BSARec) -> List[BetaSummary]:
    report = []
    for layer, block in enumerate(model.blocks, start=1):
        rescaler = block.attention.rescaler
        beta = rescaler.beta.detach().to(torch.float64)
        report.append(
            BetaSummary(
                layer=layer,
                mode=rescaler.mode.value,
                mean=float(beta.mean()),
                min=float(beta.min()),
                max=float(beta.max()),
                values=beta.tolist(),
            )
        )
    return report


def attention_responses(model: BSARec, sequences: torch.Tensor) -> List[torch.Tensor]:
    """Per layer, the spectral response averaged over sequences and heads"""
    with torch.no_grad():
        _, trace = model(sequences, train_mode=False)
    curves = []
    for attention in trace.attentions:
        flat = attention.reshape(-1, *attention.shape[-2:])
        curves.append(
            torch.stack([spectral_response(A, check=False) for A in flat]).mean(0)
        )
    return curves


def layer_profile(model: BSARec, sequences: torch.Tensor) -> OversmoothingProfile:
    """Mean oversmoothing profile of the layer outputs ``X^1..X^L`` over
    ``sequences``, padding rows excluded"""
    sequences = torch.as_tensor(sequences, dtype=torch.long)
    with torch.no_grad():
        _, trace = model(sequences, train_mode=False)
    masks = sequences > 0
    profile = OversmoothingProfile()
    for layer, output in enumerate(trace.layer_outputs, start=1):
        per_sequence = oversmoothing_profile(list(output), masks=list(masks))
        profile.skipped += per_sequence.skipped
        if not per_sequence.cosine:
            continue
        shortest = min(len(s) for s in per_sequence.singular_values)
        profile.labels.append(str(layer))
        profile.singular_values.append(
            torch.stack([s[:shortest] for s in per_sequence.singular_values]).mean(0)
        )
        profile.cosine.append(
            sum(per_sequence.cosine) / len(per_sequence.cosine)
        )
    return profile


def depth_sweep(
    base: ModelConfig,
    depths: Iterable[int],
    num_sequences: int = 32,
    seed: int = 0,
    pure_attention: bool = True,
) -> OversmoothingProfile:
    """Profile of the final output of freshly initialized encoders of each
    depth, fed with random full-length sequences"""
    generator = torch.Generator().manual_seed(seed)
    sequences = torch.randint(
        1,
        base.num_items + 1,
        (num_sequences, base.max_len),
        generator=generator,
    )
    profile = OversmoothingProfile()
    for depth in depths:
        config = attr.evolve(
            base, num_layers=depth, alpha=0.0 if pure_attention else base.alpha
        )
        torch.manual_seed(seed)
        model = BSARec(config).double().eval()
        with torch.no_grad():
            _, trace = model(sequences)
        assert trace.output is not None
        outputs = oversmoothing_profile(list(trace.output))
        profile.labels.append(str(depth))
        profile.singular_values.append(torch.stack(outputs.singular_values).mean(0))
        profile.cosine.append(sum(outputs.cosine) / len(outputs.cosine))
    return profile


@attr.s
class DiagnosticsReport:
    responses = attr.ib(type=Dict[str, torch.Tensor], factory=dict)
    decay = attr.ib(type=Dict[str, List[Optional[float]]], factory=dict)
    profiles = attr.ib(type=Dict[str, OversmoothingProfile], factory=dict)
    betas = attr.ib(type=List[BetaSummary], factory=list)

    def write(self, directory: PathLike) -> List[str]:
        """Write one CSV per curve (and ``beta.json``) into ``directory``"""
        os.makedirs(directory, exist_ok=True)
        written = []

        def dump(name: str, header: Sequence[str], rows: Iterable[Sequence]) -> None:
            path = os.path.join(directory, name)
            with open(path, "w", newline="") as f:
                writer = csv.writer(f)
                writer.writerow(header)
                writer.writerows(rows)
            written.append(path)

        for name, curve in sorted(self.responses.items()):
            dump(
                f"response_{name}.csv",
                ("bin", "response"),
                ((k, repr(float(r))) for k, r in enumerate(curve)),
            )
        for name, ratios in sorted(self.decay.items()):
            dump(
                f"decay_{name}.csv",
                ("t", "ratio"),
                ((t, "" if r is None else repr(r)) for t, r in enumerate(ratios, 1)),
            )
        for name, profile in sorted(self.profiles.items()):
            dump(
                f"cosine_{name}.csv",
                ("layer", "cosine"),
                zip(profile.labels, (repr(c) for c in profile.cosine)),
            )
            for label, values in zip(profile.labels, profile.singular_values):
                dump(
                    f"singular_values_{name}_{label}.csv",
                    ("index", "singular_value"),
                    ((i, repr(float(v))) for i, v in enumerate(values)),
                )
        if self.betas:
            path = os.path.join(directory, "beta.json")
            with open(path, "w") as f:
                json.dump([attr.asdict(b) for b in self.betas], f, indent=2)
                f.write("\n")
            written.append(path)
        return written
