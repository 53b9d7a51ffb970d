"""Hardness proxy from a nodal temperature history.

A node is classified hard when it cools through the martensite-start
temperature with a trailing-window average cooling rate at or above a
critical rate. The rule is a stand-in; any callable with the signature of
:func:`cooling_rate_rule` can replace it.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .container import write_csv

HARD, SOFT, UNDETERMINED = 1, 0, -1


@dataclass(frozen=True)
class PropertyParams:
    m_s: float = 443.0  # K
    critical_rate: float = 27.0  # K/s
    hard_value: float = 470.0  # HV
    soft_value: float = 180.0  # HV
    window: float = 0.5  # s

    def __post_init__(self):
        if self.m_s <= 0:
            raise ValueError("m_s must be positive")
        if self.window <= 0:
            raise ValueError("window must be positive")
        if self.soft_value > self.hard_value:
            raise ValueError("soft value exceeds hard value")


@dataclass
class PropertyMap:
    values: np.ndarray
    flags: np.ndarray
    crossing_time: np.ndarray
    cooling_rate: np.ndarray
    params: PropertyParams

    def agreement(self, other: "PropertyMap"):
        """Fraction of nodes with the same classification flag."""
        return float(np.mean(self.flags == other.flags))


def cooling_rate_rule(history, t, params: PropertyParams):
    """Return ``(flags, crossing time, cooling rate)`` per node.

    The crossing is the first instant ``k`` with ``T[k-1] >= m_s > T[k]``.
    The cooling rate averages over the window ending at that instant,
    starting from the last instant at least ``window`` earlier (or the first
    instant, if the crossing comes sooner).
    """
    T = np.asarray(history, dtype=float)
    t = np.asarray(t, dtype=float)
    if T.ndim != 2 or len(T) != len(t):
        raise ValueError("history must be (instants, nodes) matching t")
    if len(t) < 2 or t[-1] - t[0] < params.window:
        raise ValueError(f"history spans {t[-1] - t[0] if len(t) else 0.0:.3g} s, shorter than the "
                         f"{params.window} s window")
    crossed = (T[:-1] >= params.m_s) & (T[1:] < params.m_s)
    any_cross = crossed.any(axis=0)
    k = np.argmax(crossed, axis=0) + 1
    n = T.shape[1]
    t_cross = np.where(any_cross, t[k], np.nan)
    j = np.searchsorted(t, t[k] - params.window, side="right") - 1
    j = np.clip(j, 0, None)
    j = np.minimum(j, k - 1)
    cols = np.arange(n)
    rate = (T[j, cols] - T[k, cols]) / (t[k] - t[j])
    rate = np.where(any_cross, rate, np.nan)
    flags = np.full(n, UNDETERMINED)
    flags[any_cross] = np.where(rate[any_cross] >= params.critical_rate, HARD, SOFT)
    return flags, t_cross, rate


def estimate_properties(history, t, params: PropertyParams = PropertyParams(), rule=cooling_rate_rule) -> PropertyMap:
    """Map a lifted temperature history ``(instants, nodes)`` to nodal properties."""
    flags, t_cross, rate = rule(history, t, params)
    values = np.where(flags == HARD, params.hard_value, params.soft_value)
    return PropertyMap(values, flags, t_cross, rate, params)


def export_property_csv(path, pmap: PropertyMap, coordinates):
    """One row per node: id, deformed coordinates, property value and flag."""
    coordinates = np.asarray(coordinates, dtype=float)
    rows = [
        (i, *coordinates[i], float(pmap.values[i]), int(pmap.flags[i]))
        for i in range(len(pmap.values))
    ]
    write_csv(
        path,
        ["node", "x [m]", "y [m]", "z [m]", "hardness [HV]", "flag"],
        rows,
        comments=[f"flag: {HARD} hard, {SOFT} soft, {UNDETERMINED} undetermined (soft value)"],
    )
