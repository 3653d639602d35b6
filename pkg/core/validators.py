"""
Input validation utilities for scenario files
"""
from typing import Iterable, Optional, Sequence, Tuple

import numpy as np


def validate_float(value, field_name: str, min_value: Optional[float] = None,
                   allow_none: bool = False, strict: bool = False) -> Tuple[bool, Optional[str], Optional[float]]:
    """
    Validate a float input
    Returns: (is_valid, error_message, parsed_value)
    """
    if value is None or value == '':
        if allow_none:
            return True, None, None
        return False, f"{field_name} es obligatorio", None
    if isinstance(value, bool):
        return False, f"{field_name} debe ser un número válido", None

    try:
        parsed = float(value)
    except (ValueError, TypeError):
        return False, f"{field_name} debe ser un número válido", None
    if not np.isfinite(parsed):
        return False, f"{field_name} debe ser finito", None
    if min_value is not None:
        if strict and parsed <= min_value:
            return False, f"{field_name} debe ser mayor que {min_value}", None
        if parsed < min_value:
            return False, f"{field_name} debe ser al menos {min_value}", None
    return True, None, parsed


def validate_positive_int(value, field_name: str) -> Tuple[bool, Optional[str], Optional[int]]:
    """
    Validate counts and dimensions (dims positive)
    """
    if isinstance(value, bool) or value is None:
        return False, f"{field_name} debe ser un entero", None
    try:
        parsed = int(value)
    except (ValueError, TypeError):
        return False, f"{field_name} debe ser un entero", None
    if parsed != value:
        return False, f"{field_name} debe ser un entero", None
    if parsed < 1:
        return False, f"dims positive: {field_name}={parsed}", None
    return True, None, parsed


def validate_vector(value, field_name: str,
                    length: Optional[int] = None) -> Tuple[bool, Optional[str], Optional[np.ndarray]]:
    """
    Validate a bracketed list of `length` finite numbers (any length when None)
    """
    if length is not None:
        return validate_matrix(value, field_name, (length,))
    try:
        parsed = np.asarray(value, dtype=float)
    except (ValueError, TypeError):
        return False, f"{field_name} debe ser un arreglo numérico", None
    if parsed.ndim != 1:
        return False, f"{field_name} debe ser una lista de números", None
    if not np.all(np.isfinite(parsed)):
        return False, f"{field_name} debe ser finito", None
    return True, None, parsed


def validate_matrix(value, field_name: str, shape: Sequence[int]) -> Tuple[bool, Optional[str], Optional[np.ndarray]]:
    """
    Validate a nested list against an exact shape
    """
    try:
        parsed = np.asarray(value, dtype=float)
    except (ValueError, TypeError):
        return False, f"{field_name} debe ser un arreglo numérico", None
    if parsed.shape != tuple(shape):
        return False, f"{field_name} debe tener forma {tuple(shape)}, tiene {parsed.shape}", None
    if not np.all(np.isfinite(parsed)):
        return False, f"{field_name} debe ser finito", None
    return True, None, parsed


def validate_choice(value, field_name: str, valid: Iterable[str]) -> Tuple[bool, Optional[str], Optional[str]]:
    """
    Validate an identifier against a registry
    """
    valid = sorted(valid)
    if value not in valid:
        return False, f"{field_name} '{value}' no existe; válidos: {', '.join(valid)}", None
    return True, None, value


def unknown_keys(section: dict, allowed: Iterable[str], where: str) -> list:
    """Error messages for keys outside the documented set."""
    allowed = set(allowed)
    return [f"clave desconocida '{key}' en {where}" for key in section if key not in allowed]
