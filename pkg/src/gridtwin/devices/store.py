"""Key-value datapoint store shared by a gateway's protocol sides."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Hashable, Literal


class StoreError(ValueError):
    pass


@dataclass(frozen=True)
class Datapoint:
    value: float
    t_us: int
    quality: int
    direction: Literal["monitor", "control"]
    binding: str  # measurement point id or "<asset>.setpoint"


class DatapointStore:
    def __init__(self):
        self._points: dict[Hashable, Datapoint] = {}

    def define(self, key: Hashable, direction: str, binding: str, value: float = 0.0, quality: int = 0) -> None:
        if key in self._points:
            raise StoreError(f"datapoint {key} defined twice")
        if direction not in ("monitor", "control"):
            raise StoreError(f"direction {direction!r}")
        if direction == "control" and not binding.endswith(".setpoint"):
            raise StoreError(f"control datapoint {key} must bind to an asset setpoint")
        if direction == "monitor" and binding.endswith(".setpoint"):
            raise StoreError(f"monitor datapoint {key} must bind to a measurement point")
        self._points[key] = Datapoint(value, -1, quality, direction, binding)

    def update(self, key: Hashable, value: float, t_us: int, quality: int = 0) -> Datapoint:
        old = self._points.get(key)
        if old is None:
            raise StoreError(f"unknown datapoint {key}")
        if t_us < old.t_us:
            raise StoreError(f"timestamp for {key} went backwards")
        new = Datapoint(float(value), t_us, quality, old.direction, old.binding)
        self._points[key] = new
        return new

    def __getitem__(self, key: Hashable) -> Datapoint:
        return self._points[key]

    def __contains__(self, key) -> bool:
        return key in self._points

    def keys(self, direction: str | None = None) -> list:
        return [k for k, p in self._points.items() if direction is None or p.direction == direction]

    def bindings(self) -> dict[str, Hashable]:
        return {p.binding: k for k, p in self._points.items()}
