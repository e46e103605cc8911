#!/usr/bin/env python3

"""
Field-level validation for RunConfig values.

Every validator takes the dotted field name (`section.key`) and the raw value
parsed from the config file, and returns the value converted to its canonical
type. Failures raise ValidationError with a message starting with the field name.
"""

import logging
from typing import Any, List, Optional, Sequence

logger = logging.getLogger(__name__)


class ValidationError(Exception):
    """Raised when input validation fails"""

    pass


def _is_int(value: Any) -> bool:
    # bool is a subclass of int but never a valid count
    return isinstance(value, int) and not isinstance(value, bool)


def validate_int(field: str, value: Any, minimum: Optional[int] = None) -> int:
    """
    Validate an integer field.

    Args:
        field: Dotted field name used in error messages
        value: Raw value
        minimum: Smallest accepted value, if any

    Returns:
        The integer value

    Raises:
        ValidationError: If value is not an integer or is below minimum
    """
    if not _is_int(value):
        raise ValidationError(f"{field}: expected an integer, got {value!r}")
    if minimum is not None and value < minimum:
        raise ValidationError(f"{field}: must be at least {minimum}, got {value}")
    logger.debug(f"Validated {field}={value}")
    return value


def validate_positive_int(field: str, value: Any) -> int:
    return validate_int(field, value, minimum=1)


def validate_non_negative_int(field: str, value: Any) -> int:
    return validate_int(field, value, minimum=0)


def validate_float(
    field: str,
    value: Any,
    minimum: Optional[float] = None,
    maximum: Optional[float] = None,
    exclusive_minimum: bool = False,
) -> float:
    """
    Validate a real-valued field; integers are accepted and converted.

    Raises:
        ValidationError: If value is not a number or lies outside the range
    """
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ValidationError(f"{field}: expected a number, got {value!r}")
    number = float(value)
    if number != number or number in (float("inf"), float("-inf")):
        raise ValidationError(f"{field}: must be finite, got {value!r}")
    if minimum is not None:
        if exclusive_minimum and number <= minimum:
            raise ValidationError(f"{field}: must be greater than {minimum}, got {number}")
        if not exclusive_minimum and number < minimum:
            raise ValidationError(f"{field}: must be at least {minimum}, got {number}")
    if maximum is not None and number > maximum:
        raise ValidationError(f"{field}: must be at most {maximum}, got {number}")
    logger.debug(f"Validated {field}={number}")
    return number


def validate_positive_float(field: str, value: Any) -> float:
    return validate_float(field, value, minimum=0.0, exclusive_minimum=True)


def validate_non_negative_float(field: str, value: Any) -> float:
    return validate_float(field, value, minimum=0.0)


def validate_keep_rate(field: str, value: Any) -> float:
    """Keep rates lie in (0, 1]."""
    return validate_float(field, value, minimum=0.0, maximum=1.0, exclusive_minimum=True)


def validate_unit_fraction(field: str, value: Any) -> float:
    """Values in [0, 1), e.g. Adam betas."""
    number = validate_float(field, value, minimum=0.0)
    if number >= 1.0:
        raise ValidationError(f"{field}: must be below 1, got {number}")
    return number


def validate_bool(field: str, value: Any) -> bool:
    if not isinstance(value, bool):
        raise ValidationError(f"{field}: expected true or false, got {value!r}")
    return value


def validate_choice(field: str, value: Any, choices: Sequence[str]) -> str:
    if not isinstance(value, str) or value not in choices:
        raise ValidationError(f"{field}: expected one of {', '.join(choices)}, got {value!r}")
    logger.debug(f"Validated {field}={value}")
    return value


def validate_int_list(field: str, value: Any, minimum: Optional[int] = None) -> List[int]:
    if not isinstance(value, list):
        raise ValidationError(f"{field}: expected a list of integers, got {value!r}")
    return [validate_int(f"{field}[{i}]", item, minimum) for i, item in enumerate(value)]


def validate_choice_list(field: str, value: Any, choices: Sequence[str]) -> List[str]:
    if not isinstance(value, list) or not value:
        raise ValidationError(f"{field}: expected a non-empty list, got {value!r}")
    items = [validate_choice(f"{field}[{i}]", item, choices) for i, item in enumerate(value)]
    if len(set(items)) != len(items):
        raise ValidationError(f"{field}: duplicate entries in {items}")
    return items


def validate_path(field: str, value: Any) -> str:
    """
    Validate a filesystem path field.

    Raises:
        ValidationError: If the path is empty or contains NUL / newline characters
    """
    if not isinstance(value, str) or not value.strip():
        raise ValidationError(f"{field}: expected a non-empty path, got {value!r}")
    for bad in ("\x00", "\n", "\r"):
        if bad in value:
            raise ValidationError(f"{field}: path contains a control character: {value!r}")
    logger.debug(f"Validated {field}={value}")
    return value
