"""Severity tables: map (corruption kind, level 1..5) to engine parameters.

Each corruption has one or more scalar parameters defined by their values
at level 1 and level 5.  Intermediate levels are even interpolations
between the two endpoints.  The shipped endpoint values are engineering
defaults chosen so level 5 is visibly severe while the tissue stays
recognizable; every value can be overridden from a TOML config file
without touching code.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

# Canonical corruption identifiers, grouped by the engine that owns them.
STAIN_KINDS = (
    "under-stained-he",
    "over-stained-he",
    "under-stained-h",
    "over-stained-h",
    "under-stained-e",
    "over-stained-e",
    "residual-wax",
    "residual-xylene",
    "residual-alkali",
    "thick-and-thin",
)
DEFORMATION_KINDS = ("crack", "venetian", "fold")
COVERAGE_KINDS = ("stain-deposit", "bubble", "knife-line")
OPTICAL_KINDS = (
    "cold-color",
    "warm-color",
    "overexposure",
    "underexposure",
    "defocus",
)

KINDS = STAIN_KINDS + COVERAGE_KINDS + DEFORMATION_KINDS + OPTICAL_KINDS

SEVERITIES = (1, 2, 3, 4, 5)


class UnknownKindError(ValueError):
    """Raised for a corruption identifier outside the canonical list."""

    def __init__(self, kind):
        super().__init__(
            f"unknown corruption kind {kind!r}; valid kinds: {', '.join(KINDS)}"
        )
        self.kind = kind


@dataclass(frozen=True)
class ParamRange:
    """Endpoint pair for one scalar parameter of a corruption.

    ``direction`` states how the value must move from level 1 to level 5
    for the corruption to become more severe: "up" (level5 > level1) or
    "down" (level5 < level1).
    """

    level1: float
    level5: float
    direction: str = "up"

    def at(self, severity: int) -> float:
        _check_severity(severity)
        # Convex form keeps the endpoints exact in float arithmetic.
        return ((5 - severity) * self.level1 + (severity - 1) * self.level5) / 4.0


@dataclass(frozen=True)
class OpticsParams:
    """Scanner optics used by the defocus PSF model."""

    wavelengths_nm: tuple[float, float, float] = (640.0, 540.0, 460.0)
    numerical_aperture: float = 0.75
    refractive_index: float = 1.0
    pixel_pitch_um: float = 0.5

    def __post_init__(self):
        if not 0 < self.numerical_aperture < self.refractive_index + 1e-12:
            raise ValueError("numerical aperture must be in (0, refractive_index)")
        for lam in self.wavelengths_nm:
            if not 380.0 <= lam <= 780.0:
                raise ValueError(f"wavelength {lam} nm outside visible range")


@dataclass(frozen=True)
class SeverityTable:
    """Per-kind parameter endpoints plus fixed (non-leveled) parameters."""

    ranges: dict[str, dict[str, ParamRange]]
    fixed: dict[str, dict[str, float]]
    optics: OpticsParams = field(default_factory=OpticsParams)


@dataclass(frozen=True)
class CorruptionSpec:
    """One fully determined corruption application."""

    kind: str
    severity: int
    seed: int

    def __post_init__(self):
        if self.kind not in KINDS:
            raise UnknownKindError(self.kind)
        _check_severity(self.severity)
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must be an unsigned 64-bit integer")


def _check_severity(severity):
    if severity not in SEVERITIES:
        raise ValueError(f"severity must be in 1..5, got {severity!r}")


_UNDER_ALPHA = ParamRange(0.85, 0.30, "down")
_OVER_ALPHA = ParamRange(1.2, 2.2, "up")
# Residual blobs keep a fixed under-stain strength (the level-3 value of
# the under-stain range) and grow in covered area instead.
_RESIDUAL_ALPHA = _UNDER_ALPHA.at(3)
_RESIDUAL_COVERAGE = ParamRange(0.1, 0.5, "up")


DEFAULT_TABLE = SeverityTable(
    ranges={
        "under-stained-he": {"alpha": _UNDER_ALPHA},
        "over-stained-he": {"alpha": _OVER_ALPHA},
        "under-stained-h": {"alpha": _UNDER_ALPHA},
        "over-stained-h": {"alpha": _OVER_ALPHA},
        "under-stained-e": {"alpha": _UNDER_ALPHA},
        "over-stained-e": {"alpha": _OVER_ALPHA},
        "residual-wax": {"coverage": _RESIDUAL_COVERAGE},
        "residual-xylene": {"coverage": _RESIDUAL_COVERAGE},
        "residual-alkali": {"coverage": _RESIDUAL_COVERAGE},
        "thick-and-thin": {
            "band_width_px": ParamRange(32.0, 160.0, "up"),
            "alpha_low": _UNDER_ALPHA,
            "alpha_high": _OVER_ALPHA,
        },
        "stain-deposit": {"density": ParamRange(0.2, 1.2, "up")},
        "bubble": {"density": ParamRange(0.08, 0.5, "up")},
        "knife-line": {"count": ParamRange(2.0, 12.0, "up")},
        "crack": {"gap_width": ParamRange(0.015, 0.06, "up")},
        "venetian": {
            "area_fraction": ParamRange(0.15, 0.6, "up"),
            "amplitude": ParamRange(0.004, 0.012, "up"),
        },
        "fold": {"band_width": ParamRange(0.04, 0.16, "up")},
        "cold-color": {
            "red_gain": ParamRange(0.95, 0.75, "down"),
            "blue_gain": ParamRange(1.05, 1.25, "up"),
        },
        "warm-color": {
            "red_gain": ParamRange(1.05, 1.25, "up"),
            "blue_gain": ParamRange(0.95, 0.75, "down"),
        },
        "overexposure": {"gain": ParamRange(1.25, 2.5, "up")},
        "underexposure": {"gain": ParamRange(0.8, 0.33, "down")},
        "defocus": {"defocus_um": ParamRange(0.5, 4.0, "up")},
    },
    fixed={
        "residual-wax": {"alpha": _RESIDUAL_ALPHA},
        "residual-xylene": {"alpha": _RESIDUAL_ALPHA},
        "residual-alkali": {"alpha": _RESIDUAL_ALPHA},
        "venetian": {"period": 0.05},
    },
)


def params_for(kind, severity, seed, table: SeverityTable | None = None) -> dict:
    """Resolve the scalar parameters for one corruption application.

    Returns a flat dict of parameter name to value; randomized structure
    (masks, orientations, placements) is derived later by the engines
    from ``seed`` alone.
    """
    table = table or DEFAULT_TABLE
    if kind not in KINDS:
        raise UnknownKindError(kind)
    _check_severity(severity)
    params = {name: rng.at(severity) for name, rng in table.ranges[kind].items()}
    params.update(table.fixed.get(kind, {}))
    params["seed"] = int(seed)
    return params


# Sanity bounds per parameter name used by validate_table.
_SANITY = {
    "alpha": (0.0, 10.0),
    "alpha_low": (0.0, 10.0),
    "alpha_high": (0.0, 10.0),
    "coverage": (0.0, 1.0),
    "band_width_px": (1.0, 4096.0),
    "density": (0.0, 100.0),
    "count": (0.0, 1000.0),
    "gap_width": (0.0, 0.5),
    "area_fraction": (0.0, 1.0),
    "amplitude": (0.0, 0.1),
    "band_width": (0.0, 0.5),
    "red_gain": (0.0, 5.0),
    "blue_gain": (0.0, 5.0),
    "gain": (0.0, 10.0),
    "defocus_um": (0.0, 100.0),
}


def validate_table(table: SeverityTable) -> list[str]:
    """Check a severity table; returns human-readable violations (empty = valid)."""
    violations = []
    for kind in KINDS:
        if kind not in table.ranges:
            violations.append(f"missing corruption kind: {kind}")
    for kind, params in table.ranges.items():
        if kind not in KINDS:
            violations.append(f"unknown corruption kind: {kind}")
            continue
        for name, rng in params.items():
            for value, label in ((rng.level1, "level1"), (rng.level5, "level5")):
                if not _isfinite(value):
                    violations.append(f"{kind}.{name}.{label} is not finite")
            lo, hi = _SANITY.get(name, (float("-inf"), float("inf")))
            for value, label in ((rng.level1, "level1"), (rng.level5, "level5")):
                if _isfinite(value) and not lo <= value <= hi:
                    violations.append(
                        f"{kind}.{name}.{label}={value} outside sane range [{lo}, {hi}]"
                    )
            if rng.direction == "up" and not rng.level5 > rng.level1:
                violations.append(
                    f"{kind}.{name}: level5 must exceed level1 (severity increases it)"
                )
            if rng.direction == "down" and not rng.level5 < rng.level1:
                violations.append(
                    f"{kind}.{name}: level5 must be below level1 (severity decreases it)"
                )
    return violations


def _isfinite(x):
    return x == x and abs(x) != float("inf")


def load_table(path) -> SeverityTable:
    """Load a TOML severity config, overriding built-in defaults per key.

    Schema: one section per corruption kind; each parameter is a subtable
    with ``level1`` and ``level5`` keys (and optional ``direction``), or a
    bare number for fixed parameters.  An optional ``[optics]`` section
    overrides wavelengths/NA/refractive index/pixel pitch.
    """
    with open(path, "rb") as fh:
        data = tomllib.load(fh)

    ranges = {k: dict(v) for k, v in DEFAULT_TABLE.ranges.items()}
    fixed = {k: dict(v) for k, v in DEFAULT_TABLE.fixed.items()}
    optics = DEFAULT_TABLE.optics

    for section, entries in data.items():
        if section == "optics":
            kwargs = {}
            if "wavelengths_nm" in entries:
                kwargs["wavelengths_nm"] = tuple(entries["wavelengths_nm"])
            for key in ("numerical_aperture", "refractive_index", "pixel_pitch_um"):
                if key in entries:
                    kwargs[key] = float(entries[key])
            optics = replace(optics, **kwargs)
            continue
        if section not in KINDS:
            raise UnknownKindError(section)
        for name, value in entries.items():
            if isinstance(value, dict):
                base = ranges[section].get(name)
                direction = value.get(
                    "direction", base.direction if base else "up"
                )
                ranges[section][name] = ParamRange(
                    float(value["level1"]), float(value["level5"]), direction
                )
            else:
                fixed.setdefault(section, {})[name] = float(value)

    return SeverityTable(ranges=ranges, fixed=fixed, optics=optics)


def dump_default_config() -> str:
    """Render the built-in defaults as a TOML document (the schema reference)."""
    lines = ["# omnice severity configuration (built-in defaults)", ""]
    for kind in KINDS:
        lines.append(f'["{kind}"]')
        for name, rng in DEFAULT_TABLE.ranges[kind].items():
            lines.append(
                f"{name} = {{ level1 = {rng.level1}, level5 = {rng.level5}, "
                f'direction = "{rng.direction}" }}'
            )
        for name, value in DEFAULT_TABLE.fixed.get(kind, {}).items():
            lines.append(f"{name} = {value}")
        lines.append("")
    optics = DEFAULT_TABLE.optics
    lines.append("[optics]")
    lines.append(f"wavelengths_nm = {list(optics.wavelengths_nm)}")
    lines.append(f"numerical_aperture = {optics.numerical_aperture}")
    lines.append(f"refractive_index = {optics.refractive_index}")
    lines.append(f"pixel_pitch_um = {optics.pixel_pitch_um}")
    lines.append("")
    return "\n".join(lines)
