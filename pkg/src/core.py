# GroupWeightOpt
# Copyright (C) 2024  GroupWeightOpt contributors

# This program is free software: you can redistribute it and/or modify
# it under the terms of the GNU Affero General Public License as
# published by the Free Software Foundation, either version 3 of the
# License, or (at your option) any later version.

# This program is distributed in the hope that it will be useful,
# but WITHOUT ANY WARRANTY; without even the implied warranty of
# MERCHANTABILITY or FITNESS FOR A PARTICULAR PURPOSE.  See the
# GNU Affero General Public License for more details.

# You should have received a copy of the GNU Affero General Public License
# along with this program.  If not, see <https://www.gnu.org/licenses/>.

from enum import Enum
from typing import Optional


class Method(Enum):
    GW_ERM = "gw-erm"
    SUBG = "subg"
    DFR = "dfr"
    GDRO = "gdro"
    JTT = "jtt"


class PenaltyKind(Enum):
    NONE = "none"
    RIDGE = "ridge"
    SMOOTHED_L1 = "smoothed-l1"
    # Exact L1 is only available for baseline fits (not twice differentiable).
    L1 = "l1"


class Sweep(Enum):
    FRACTION = "fraction"
    PENALTY = "penalty"


class WeightingError(Exception):
    """Base class of all errors raised by GroupWeightOpt."""


class ValidationError(WeightingError, ValueError):
    """Invalid input. The CLI exits with code 1."""

    exit_code = 1
    category = "validation"


class NumericalError(WeightingError, ArithmeticError):
    """A numerical routine failed on valid input. The CLI exits with code 2."""

    exit_code = 2
    category = "numerical"


class SupportViolation(ValidationError):
    pass


class DegenerateWeights(ValidationError):
    pass


class SizeError(ValidationError):
    pass


class DomainError(ValidationError):
    pass


class EmptyGroup(ValidationError):
    pass


class GroupCoverage(ValidationError):
    pass


class EmptyInferredGroup(ValidationError):
    pass


class AllGroupsEmpty(ValidationError):
    pass


class NotDifferentiable(ValidationError):
    pass


class SchemaError(ValidationError):
    pass


class _LineError(ValidationError):
    def __init__(self, message: str, line: Optional[int] = None) -> None:
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class ParseError(_LineError):
    pass


class DataValueError(_LineError):
    pass


class SingularDesign(NumericalError):
    pass


class SeparableData(NumericalError):
    pass


class NotConverged(NumericalError):
    pass


class IllConditioned(NumericalError):
    pass


class StalenessError(NumericalError):
    pass
