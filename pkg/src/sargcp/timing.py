"""Radar timing corrections: term model, providers, and the config format.

Observed annotation timings differ from the vacuum zero-Doppler timings by a
sum of named terms. Range (two-way seconds): instrument timing and drift
(delta_sd, delta_o, delta_f), ionosphere delta_i, troposphere delta_t, and
solid-earth/geodynamic displacement delta_g. Azimuth (seconds): delta_sd,
delta_o, delta_f, delta_g; the atmospheric path terms have no azimuth
counterpart. Correction subtracts the assembled terms; applying them is the
exact additive inverse, which is what makes the synthetic scenes honest.

Real correction services are out of scope; every provider here is synthetic
(constants, drifts, zenith-delay mapping, seeded noise, displacement via
radar-coding differences), but the assembly, bookkeeping, and file format
are the production interfaces.
"""

from __future__ import annotations

import configparser
import io
import math
from dataclasses import dataclass
from types import MappingProxyType
from typing import Mapping

import numpy as np

from .errors import ParseError, ValidationError
from .geodesy import SPEED_OF_LIGHT, Ecef, enu_basis
from .geometry import AcquisitionGeometry, RadarTiming, radar_code

RANGE_TERMS = ("delta_sd", "delta_o", "delta_f", "delta_i", "delta_t", "delta_g")
AZIMUTH_TERMS = ("delta_sd", "delta_o", "delta_f", "delta_g")

# sanity bounds: no single term may exceed 10 m equivalent length
_NOMINAL_SPEED = 7600.0  # m/s, used only for the azimuth bound
_MAX_TERM_M = 10.0


def _term_key(group: str, term: str) -> str:
    return f"{group}.{term}"


@dataclass(frozen=True)
class CorrectionSet:
    """One acquisition's named timing perturbations, in seconds.

    range_s holds two-way range-time terms, azimuth_s azimuth-time terms.
    Missing terms are zero with provenance "zero"; unknown term names are
    rejected so typos cannot silently drop a correction.
    """

    range_s: Mapping[str, float]
    azimuth_s: Mapping[str, float]
    provenance: Mapping[str, str]

    def __post_init__(self):
        rg = {t: 0.0 for t in RANGE_TERMS}
        az = {t: 0.0 for t in AZIMUTH_TERMS}
        prov = dict(self.provenance)
        for term, value in dict(self.range_s).items():
            if term not in rg:
                raise ValidationError(f"unknown range term {term!r}")
            rg[term] = float(value)
        for term, value in dict(self.azimuth_s).items():
            if term not in az:
                raise ValidationError(f"unknown azimuth term {term!r}")
            az[term] = float(value)
        for term, value in rg.items():
            if not math.isfinite(value):
                raise ValidationError(f"range term {term} is not finite")
            if abs(value) * SPEED_OF_LIGHT / 2.0 >= _MAX_TERM_M:
                raise ValidationError(
                    f"range term {term} = {value} s exceeds {_MAX_TERM_M} m equivalent")
        for term, value in az.items():
            if not math.isfinite(value):
                raise ValidationError(f"azimuth term {term} is not finite")
            if abs(value) * _NOMINAL_SPEED >= _MAX_TERM_M:
                raise ValidationError(
                    f"azimuth term {term} = {value} s exceeds {_MAX_TERM_M} m equivalent")
        for key in (_term_key("range", t) for t in RANGE_TERMS):
            prov.setdefault(key, "zero")
        for key in (_term_key("azimuth", t) for t in AZIMUTH_TERMS):
            prov.setdefault(key, "zero")
        object.__setattr__(self, "range_s", MappingProxyType(rg))
        object.__setattr__(self, "azimuth_s", MappingProxyType(az))
        object.__setattr__(self, "provenance", MappingProxyType(prov))

    @property
    def total_range_s(self) -> float:
        return float(sum(self.range_s.values()))

    @property
    def total_azimuth_s(self) -> float:
        return float(sum(self.azimuth_s.values()))

    def range_lengths_m(self) -> dict[str, float]:
        """One-way length equivalents of the range terms."""
        return {t: v * SPEED_OF_LIGHT / 2.0 for t, v in self.range_s.items()}


def apply_timing_errors(timing: RadarTiming, corrections: CorrectionSet) -> RadarTiming:
    """Perturb clean timings with the given terms (simulation direction)."""
    return RadarTiming(
        timing.t_az + corrections.total_azimuth_s,
        timing.tau_rg + corrections.total_range_s,
    )


def correct_timing(timing: RadarTiming, corrections: CorrectionSet) -> RadarTiming:
    """Remove the given terms from observed timings (processing direction)."""
    return RadarTiming(
        timing.t_az - corrections.total_azimuth_s,
        timing.tau_rg - corrections.total_range_s,
    )


# ---------------------------------------------------------------------------
# Providers
# ---------------------------------------------------------------------------

class CorrectionProvider:
    """Yields one or more named terms for (geometry, approximate target, epoch).

    `terms` lists the keys this provider fills, like "range.delta_t".
    evaluate() must be deterministic for fixed inputs and configuration.
    """

    name = "base"
    terms: tuple[str, ...] = ()

    def evaluate(self, geom: AcquisitionGeometry, target: Ecef,
                 epoch: float) -> dict[str, float]:
        raise NotImplementedError

    def to_config(self) -> dict[str, str]:
        raise NotImplementedError


def _check_term_key(key: str) -> str:
    group, _, term = key.partition(".")
    ok = (group == "range" and term in RANGE_TERMS) or \
         (group == "azimuth" and term in AZIMUTH_TERMS)
    if not ok:
        raise ValidationError(f"unknown correction term key {key!r}")
    return key


class ConstantTerm(CorrectionProvider):
    """A fixed offset in seconds, e.g. an instrument timing constant."""

    name = "constant"

    def __init__(self, term: str, seconds: float):
        self.terms = (_check_term_key(term),)
        self.seconds = float(seconds)

    def evaluate(self, geom, target, epoch):
        return {self.terms[0]: self.seconds}

    def to_config(self):
        return {"provider": self.name, "term": self.terms[0],
                "seconds": repr(self.seconds)}


class LinearDriftTerm(CorrectionProvider):
    """Offset plus rate around a reference epoch (oscillator drift style)."""

    name = "linear_drift"

    def __init__(self, term: str, offset_s: float, rate_s_per_epoch: float,
                 epoch_ref: float = 0.0):
        self.terms = (_check_term_key(term),)
        self.offset_s = float(offset_s)
        self.rate_s_per_epoch = float(rate_s_per_epoch)
        self.epoch_ref = float(epoch_ref)

    def evaluate(self, geom, target, epoch):
        value = self.offset_s + self.rate_s_per_epoch * (epoch - self.epoch_ref)
        return {self.terms[0]: value}

    def to_config(self):
        return {"provider": self.name, "term": self.terms[0],
                "offset_s": repr(self.offset_s),
                "rate_s_per_epoch": repr(self.rate_s_per_epoch),
                "epoch_ref": repr(self.epoch_ref)}


class ZenithDelayTerm(CorrectionProvider):
    """Zenith path delay mapped to slant by 1/cos(incidence), two-way.

    The atmospheric terms are range-only, so only range.delta_t and
    range.delta_i accept this provider.
    """

    name = "zenith_delay"

    def __init__(self, term: str, zenith_delay_m: float):
        key = _check_term_key(term)
        if key not in ("range.delta_t", "range.delta_i"):
            raise ValidationError(
                f"zenith delay maps only to atmospheric range terms, not {term!r}")
        self.terms = (key,)
        self.zenith_delay_m = float(zenith_delay_m)

    def evaluate(self, geom, target, epoch):
        slant = self.zenith_delay_m / math.cos(math.radians(geom.incidence_deg))
        return {self.terms[0]: 2.0 * slant / SPEED_OF_LIGHT}

    def to_config(self):
        return {"provider": self.name, "term": self.terms[0],
                "zenith_delay_m": repr(self.zenith_delay_m)}


class SeededNoiseTerm(CorrectionProvider):
    """White Gaussian term, deterministic per (seed, epoch, target).

    The draw is keyed on the exact bit patterns of the inputs, so repeated
    evaluation returns the same value while different targets or epochs
    decorrelate.
    """

    name = "seeded_noise"

    def __init__(self, term: str, sigma_s: float, seed: int = 0):
        self.terms = (_check_term_key(term),)
        self.sigma_s = float(sigma_s)
        self.seed = int(seed)

    def evaluate(self, geom, target, epoch):
        key = np.array([epoch, target.x, target.y, target.z], dtype=np.float64)
        entropy = [self.seed] + [int(b) for b in key.view(np.uint64)]
        rng = np.random.default_rng(np.random.SeedSequence(entropy))
        return {self.terms[0]: float(rng.normal(0.0, self.sigma_s))}

    def to_config(self):
        return {"provider": self.name, "term": self.terms[0],
                "sigma_s": repr(self.sigma_s), "seed": str(self.seed)}


class DisplacementTerm(CorrectionProvider):
    """Geodynamic 3-D displacement, converted by radar-coding differences.

    A target displaced by `enu_m` produces different zero-Doppler timings;
    the difference is exactly the delta_g pair, so this provider fills both
    the range and the azimuth entry from one physical displacement.
    """

    name = "displacement"
    terms = ("range.delta_g", "azimuth.delta_g")

    def __init__(self, east_m: float, north_m: float, up_m: float):
        self.enu_m = (float(east_m), float(north_m), float(up_m))

    def evaluate(self, geom, target, epoch):
        base = radar_code(geom, target)
        shift = enu_basis(target).T @ np.asarray(self.enu_m)
        moved = Ecef(target.x + shift[0], target.y + shift[1], target.z + shift[2])
        displaced = radar_code(geom, moved)
        return {
            "range.delta_g": displaced.tau_rg - base.tau_rg,
            "azimuth.delta_g": displaced.t_az - base.t_az,
        }

    def to_config(self):
        return {"provider": self.name,
                "east_m": repr(self.enu_m[0]),
                "north_m": repr(self.enu_m[1]),
                "up_m": repr(self.enu_m[2])}


def assemble_corrections(geom: AcquisitionGeometry, target: Ecef, epoch: float,
                         providers) -> CorrectionSet:
    """Evaluate all providers into one CorrectionSet.

    Two providers feeding the same term is a configuration error; terms
    without a provider stay zero with provenance "zero".
    """
    rg: dict[str, float] = {}
    az: dict[str, float] = {}
    prov: dict[str, str] = {}
    for provider in providers:
        values = provider.evaluate(geom, target, epoch)
        for key, value in values.items():
            if key in prov:
                raise ValidationError(
                    f"term {key} assigned by both {prov[key]!r} and {provider.name!r}")
            prov[key] = provider.name
            group, _, term = key.partition(".")
            (rg if group == "range" else az)[term] = value
    return CorrectionSet(rg, az, prov)


# ---------------------------------------------------------------------------
# Configuration file format
# ---------------------------------------------------------------------------

_PROVIDER_KINDS = {
    "constant": (ConstantTerm, ("term", "seconds")),
    "linear_drift": (LinearDriftTerm,
                     ("term", "offset_s", "rate_s_per_epoch", "epoch_ref")),
    "zenith_delay": (ZenithDelayTerm, ("term", "zenith_delay_m")),
    "seeded_noise": (SeededNoiseTerm, ("term", "sigma_s", "seed")),
    "displacement": (DisplacementTerm, ("east_m", "north_m", "up_m")),
}


def write_correction_config(path, providers) -> None:
    """Serialize providers to the documented INI-style key/value format."""
    cp = configparser.ConfigParser()
    cp["format"] = {"version": "1"}
    for i, provider in enumerate(providers):
        cp[f"correction_{i}"] = provider.to_config()
    with open(path, "w", encoding="utf-8") as fh:
        cp.write(fh)


def read_correction_config(path) -> list[CorrectionProvider]:
    """Parse a correction config; any malformed input raises ParseError."""
    try:
        raw = open(path, "rb").read()
    except OSError as exc:
        raise ParseError(str(exc), path=str(path)) from None
    try:
        text = raw.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise ParseError(f"not valid UTF-8: {exc}", path=str(path)) from None
    cp = configparser.ConfigParser()
    try:
        cp.read_file(io.StringIO(text), source=str(path))
    except configparser.Error as exc:
        line = getattr(exc, "lineno", None)
        raise ParseError(f"bad config syntax: {exc}", path=str(path),
                         line=line) from None
    if not cp.has_section("format") or cp.get("format", "version", fallback=None) != "1":
        raise ParseError("missing or unsupported [format] version", path=str(path))
    providers: list[CorrectionProvider] = []
    for section in cp.sections():
        if section == "format":
            continue
        opts = dict(cp[section])
        kind = opts.pop("provider", None)
        if kind not in _PROVIDER_KINDS:
            raise ParseError(f"[{section}] unknown provider {kind!r}", path=str(path))
        cls, fields = _PROVIDER_KINDS[kind]
        kwargs = {}
        for name in fields:
            if name not in opts:
                if name in ("epoch_ref", "seed"):
                    continue  # optional
                raise ParseError(f"[{section}] missing key {name!r}", path=str(path))
            value = opts.pop(name)
            if name == "term":
                kwargs[name] = value
            elif name == "seed":
                try:
                    kwargs[name] = int(value)
                except ValueError:
                    raise ParseError(f"[{section}] bad integer {value!r}",
                                     path=str(path)) from None
            else:
                try:
                    kwargs[name] = float(value)
                except ValueError:
                    raise ParseError(f"[{section}] bad number {value!r}",
                                     path=str(path)) from None
        if opts:
            raise ParseError(f"[{section}] unknown keys {sorted(opts)}", path=str(path))
        try:
            providers.append(cls(**kwargs))
        except ValidationError as exc:
            raise ParseError(f"[{section}] {exc}", path=str(path)) from None
    return providers
