"""Raw device readings -> normalized, one-hot encoded, windowed feature rows.

Feature layout is normative: all continuous features first, in sensor
registration order, then the one-hot blocks of the categorical sensors, in
registration order. F = (#continuous) + sum of category counts.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DomainError, SchemaError, UsageError

CONTINUOUS = "continuous"
CATEGORICAL = "categorical"


@dataclass(frozen=True)
class SensorSpec:
    """Schema of one sensor channel; min/max are calibrated static bounds."""

    sensor_id: str
    kind: str
    low: float = 0.0
    high: float = 1.0
    n_categories: int = 0

    def __post_init__(self):
        if self.kind == CONTINUOUS:
            if not self.low < self.high:
                raise SchemaError(
                    f"sensor '{self.sensor_id}': need low < high, "
                    f"got [{self.low}, {self.high}]"
                )
        elif self.kind == CATEGORICAL:
            if self.n_categories < 2:
                raise SchemaError(
                    f"sensor '{self.sensor_id}': need >= 2 categories, "
                    f"got {self.n_categories}"
                )
        else:
            raise SchemaError(f"sensor '{self.sensor_id}': unknown kind '{self.kind}'")

    @property
    def width(self) -> int:
        return 1 if self.kind == CONTINUOUS else self.n_categories


def feature_width(specs: list[SensorSpec]) -> int:
    return sum(s.width for s in specs)


@dataclass(frozen=True)
class Observation:
    """One reading per registered sensor, stamped with simulation seconds."""

    timestamp: float
    values: tuple

    def __post_init__(self):
        object.__setattr__(self, "values", tuple(self.values))


def normalize(x: float, spec: SensorSpec) -> float:
    """Min-max scale a continuous reading into [0,1], clamping outliers."""
    if spec.kind != CONTINUOUS:
        raise UsageError(f"normalize: sensor '{spec.sensor_id}' is not continuous")
    y = (float(x) - spec.low) / (spec.high - spec.low)
    return min(1.0, max(0.0, y))


def one_hot(index: int, spec: SensorSpec) -> np.ndarray:
    if spec.kind != CATEGORICAL:
        raise UsageError(f"one_hot: sensor '{spec.sensor_id}' is not categorical")
    index = int(index)
    if not 0 <= index < spec.n_categories:
        raise DomainError(
            f"one_hot: index {index} out of range for "
            f"'{spec.sensor_id}' with {spec.n_categories} categories"
        )
    v = np.zeros(spec.n_categories)
    v[index] = 1.0
    return v


def encode_observation(obs: Observation, specs: list[SensorSpec]) -> np.ndarray:
    if len(obs.values) != len(specs):
        raise SchemaError(
            f"encode_observation: {len(obs.values)} values for {len(specs)} sensors"
        )
    cont = [normalize(v, s) for v, s in zip(obs.values, specs) if s.kind == CONTINUOUS]
    cats = [one_hot(v, s) for v, s in zip(obs.values, specs) if s.kind == CATEGORICAL]
    parts = [np.asarray(cont, dtype=np.float64)] + cats
    return np.concatenate(parts) if parts else np.zeros(0)


@dataclass(frozen=True)
class ObservationWindow:
    """Last W encoded rows, oldest first; trailing rows are zero padding."""

    length: int
    width: int
    rows: np.ndarray = field(default=None)  # W x F, read-only
    n_valid: int = 0

    def __post_init__(self):
        if self.rows is None:
            object.__setattr__(self, "rows", np.zeros((self.length, self.width)))
        self.rows.flags.writeable = False

    def valid_mask(self) -> np.ndarray:
        """Boolean per row; True rows hold real observations."""
        m = np.zeros(self.length, dtype=bool)
        m[: self.n_valid] = True
        return m


def push_window(window: ObservationWindow, row: np.ndarray) -> ObservationWindow:
    """Append a row, evicting the oldest once the window is full."""
    row = np.asarray(row, dtype=np.float64)
    if row.shape != (window.width,):
        raise SchemaError(
            f"push_window: row shape {row.shape} vs feature width {window.width}"
        )
    rows = window.rows.copy()
    rows.flags.writeable = True
    if window.n_valid < window.length:
        rows[window.n_valid] = row
        n_valid = window.n_valid + 1
    else:
        rows[:-1] = rows[1:]
        rows[-1] = row
        n_valid = window.length
    return ObservationWindow(window.length, window.width, rows, n_valid)
