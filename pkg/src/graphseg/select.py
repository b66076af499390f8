"""Information criteria over a penalty path and the choice of penalty."""

import logging
import math
from enum import Enum
from typing import TYPE_CHECKING, NamedTuple, Union

import numpy as np

from graphseg.errors import SelectionError, ValidationError

if TYPE_CHECKING:
    from graphseg.segment import PathFit

logger = logging.getLogger(__name__)


class Criterion(str, Enum):
    AIC = "aic"
    BIC = "bic"
    GCV = "gcv"


class CriteriaValues(NamedTuple):
    aic: float
    bic: float
    gcv: float
    gcv_defined: bool


def criteria(cost2: float, e: float, p: int) -> CriteriaValues:
    """
    AIC, BIC and GCV from the doubled cost and the effective dimension.

    GCV is +inf (and flagged undefined) once e reaches p, e.g. at lambda = 0.
    """
    if p < 1:
        raise ValidationError(f"need at least one observation, got p={p}")
    if not (math.isfinite(cost2) and cost2 >= 0):
        raise ValidationError(f"doubled cost must be finite and >= 0, got {cost2}")
    if not (math.isfinite(e) and 0 < e <= p + 1e-6):
        raise ValidationError(f"effective dimension {e} outside (0, {p}]")
    e = min(e, float(p))
    aic = cost2 + 2.0 * e
    bic = cost2 + math.log(p) * e
    if p - e <= 1e-9 * p:
        return CriteriaValues(aic, bic, math.inf, False)
    gcv = cost2 / (p * (1.0 - e / p) ** 2)
    return CriteriaValues(aic, bic, gcv, True)


def select_lambda(path: "PathFit", criterion: Union[Criterion, str]) -> int:
    """Index of the minimizing penalty; ties go to the larger penalty."""
    criterion = Criterion(criterion)
    values = path.criterion_values(criterion)
    finite = np.isfinite(values)
    if not finite.any():
        raise SelectionError(f"{criterion.value} degenerate on this path")
    best = values[finite].min()
    index = int(np.flatnonzero(finite & (values == best))[-1])
    logger.debug(f"{criterion.value}: selected index {index} (value {best:.6g})")
    return index
