from .validation import (
    DegenerateInputError,
    check_generator,
    check_labels,
    check_positive,
    check_same_shape,
    check_unit_rows,
    check_unit_vector,
)

__all__ = [
    "DegenerateInputError",
    "check_generator",
    "check_labels",
    "check_positive",
    "check_same_shape",
    "check_unit_rows",
    "check_unit_vector",
]
