"""Re-export of the twin-simulation helpers used across test modules."""

from cfcal.experiments import OPEN_LOOP, random_linear_case as random_case, twin_errors

__all__ = ["OPEN_LOOP", "random_case", "twin_errors"]
