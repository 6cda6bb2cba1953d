# Copyright (C) 2024 The Software Heritage developers
# See the AUTHORS file at the top-level directory of this distribution
# License: GNU Affero General Public License version 3, or any later version
# See top-level LICENSE file for more information

from typing import Iterable, List


class BsaRecError(Exception):
    """Base class of every error raised by swh.bsarec"""

    pass


class InvalidArgument(BsaRecError, ValueError):
    """
    Raise this when an argument is outside of its domain
    For example: a frequency cutoff c=3 for a sequence of length n=4
    """

    pass


class UndefinedRatio(BsaRecError, ArithmeticError):
    """
    Raise this when the HFC/LFC energy ratio is requested for a signal
    with no low-frequency energy
    For example: x=[1, -1, 1, -1] with c=1
    """

    pass


class ParseError(BsaRecError):
    """
    Raise this when a dataset line cannot be parsed
    For example: a line holding a user token and no item
    """

    def __init__(self, message: str, lineno: int):
        super().__init__(f"line {lineno}: {message}")
        self.lineno = lineno


class InvalidInput(BsaRecError):
    """
    Raise this when an input file is well formed but unusable
    For example: an empty interaction file
    """

    pass


class EmptyDataset(BsaRecError):
    """
    Raise this when filtering removed every interaction
    """

    pass


class InvalidState(BsaRecError):
    """
    Raise this when an operation is called on an object in the wrong state
    For example: backward on a trace recorded without gradient tracking
    """

    pass


class NumericFailure(BsaRecError, ArithmeticError):
    """
    Raise this when a tensor stops being finite
    For example: a NaN gradient for blocks.0.ffn.dense1.weight
    """

    def __init__(self, message: str, parameter: str):
        super().__init__(f"{parameter}: {message}")
        self.parameter = parameter


class EmptyEvaluation(BsaRecError):
    """
    Raise this when metrics are requested over no user at all
    """

    pass


class ConfigError(BsaRecError):
    """
    Raise this when a run configuration fails validation. Every problem
    found is listed, not only the first one.
    """

    def __init__(self, problems: Iterable[str]):
        self.problems: List[str] = list(problems)
        super().__init__("; ".join(self.problems))


class CheckpointMismatch(BsaRecError):
    """
    Raise this when a checkpoint does not fit the model it is loaded into
    For example: item_embeddings.weight stored as 3647x64, expected 3700x64
    """

    def __init__(self, differences: Iterable[str]):
        self.differences: List[str] = list(differences)
        super().__init__("; ".join(self.differences))
