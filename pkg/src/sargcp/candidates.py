"""Shared candidate type produced by all detection paths.

A candidate is a hypothesized identical scatterer: one approximate 3D
position plus the pixel it should occupy in every acquisition where it is
visible. Detection-specific quality metrics ride along as a plain mapping
so downstream stages can log and filter without knowing the source.
"""

from __future__ import annotations

from dataclasses import dataclass
from types import MappingProxyType
from typing import Mapping

from .errors import ValidationError
from .geodesy import Ecef
from .geometry import PixelCoord

SOURCES = ("fusion", "optical", "road", "manual")

FLAG_PARTIAL = "partial"  # visible in only a subset of the acquisitions


@dataclass(frozen=True)
class PsCandidate:
    candidate_id: str
    source: str
    position: Ecef  # approximate, prior to stereo positioning
    pixels: Mapping[str, PixelCoord]  # acquisition id -> expected location
    quality: Mapping[str, float]
    flags: tuple[str, ...] = ()

    def __post_init__(self):
        if not self.candidate_id:
            raise ValidationError("candidate_id must be non-empty")
        if self.source not in SOURCES:
            raise ValidationError(f"unknown candidate source {self.source!r}")
        if not self.pixels:
            raise ValidationError(
                f"candidate {self.candidate_id} has no pixel locations")
        object.__setattr__(self, "pixels", MappingProxyType(dict(self.pixels)))
        object.__setattr__(self, "quality",
                           MappingProxyType(dict(self.quality)))
        object.__setattr__(self, "flags", tuple(self.flags))

    def is_partial(self) -> bool:
        return FLAG_PARTIAL in self.flags
