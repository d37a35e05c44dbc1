"""Severity tables, parameter interpolation and config loading."""

import dataclasses

import pytest

from omnice.severity import (
    DEFAULT_TABLE,
    KINDS,
    SEVERITIES,
    CorruptionSpec,
    OpticsParams,
    ParamRange,
    SeverityTable,
    UnknownKindError,
    dump_default_config,
    load_table,
    params_for,
    validate_table,
)


class TestKinds:
    def test_twenty_one_kinds(self):
        assert len(KINDS) == 21
        assert len(set(KINDS)) == 21

    def test_contains_defocus(self):
        assert "defocus" in KINDS

    def test_severity_levels(self):
        assert SEVERITIES == (1, 2, 3, 4, 5)


class TestParamRange:
    def test_midpoint(self):
        assert ParamRange(1.2, 2.2).at(3) == pytest.approx(1.7)

    def test_endpoints_exact(self):
        rng = ParamRange(0.85, 0.30, "down")
        assert rng.at(1) == 0.85
        assert rng.at(5) == 0.30

    def test_bad_severity(self):
        with pytest.raises(ValueError):
            ParamRange(0.0, 1.0).at(6)


class TestParamsFor:
    def test_even_interpolation(self):
        p1 = params_for("under-stained-he", 1, 0)["alpha"]
        p5 = params_for("under-stained-he", 5, 0)["alpha"]
        for s in SEVERITIES:
            expected = p1 + (s - 1) / 4.0 * (p5 - p1)
            assert params_for("under-stained-he", s, 0)["alpha"] == pytest.approx(
                expected
            )

    def test_repeatable(self):
        assert params_for("crack", 3, 99) == params_for("crack", 3, 99)

    def test_seed_included(self):
        assert params_for("fold", 2, 1234)["seed"] == 1234

    def test_unknown_kind_lists_valid_ones(self):
        with pytest.raises(UnknownKindError, match="defocus"):
            params_for("solarize", 1, 0)

    @pytest.mark.parametrize("kind", KINDS)
    def test_every_kind_resolves(self, kind):
        for s in SEVERITIES:
            params = params_for(kind, s, 0)
            assert "seed" in params and len(params) > 1


class TestCorruptionSpec:
    def test_valid(self):
        CorruptionSpec("bubble", 3, 42)

    def test_unknown_kind(self):
        with pytest.raises(UnknownKindError):
            CorruptionSpec("nope", 1, 0)

    def test_bad_severity(self):
        with pytest.raises(ValueError):
            CorruptionSpec("bubble", 0, 0)

    def test_bad_seed(self):
        with pytest.raises(ValueError):
            CorruptionSpec("bubble", 1, -1)


class TestValidateTable:
    def test_default_table_is_clean(self):
        assert validate_table(DEFAULT_TABLE) == []

    def test_missing_kind_reported(self):
        ranges = {k: v for k, v in DEFAULT_TABLE.ranges.items() if k != "defocus"}
        table = SeverityTable(ranges=ranges, fixed=DEFAULT_TABLE.fixed)
        violations = validate_table(table)
        assert len(violations) == 1
        assert "defocus" in violations[0]

    def test_direction_violation(self):
        # Underexposure gain must decrease with severity.
        ranges = dict(DEFAULT_TABLE.ranges)
        ranges["underexposure"] = {"gain": ParamRange(0.8, 1.2, "down")}
        table = SeverityTable(ranges=ranges, fixed=DEFAULT_TABLE.fixed)
        violations = validate_table(table)
        assert any("underexposure.gain" in v for v in violations)

    def test_non_finite_reported(self):
        ranges = dict(DEFAULT_TABLE.ranges)
        ranges["defocus"] = {"defocus_um": ParamRange(0.5, float("nan"))}
        assert any(
            "not finite" in v
            for v in validate_table(
                SeverityTable(ranges=ranges, fixed=DEFAULT_TABLE.fixed)
            )
        )


class TestOpticsParams:
    def test_aperture_must_stay_below_index(self):
        with pytest.raises(ValueError):
            OpticsParams(numerical_aperture=1.4, refractive_index=1.0)

    def test_wavelengths_must_be_visible(self):
        with pytest.raises(ValueError):
            OpticsParams(wavelengths_nm=(900.0, 540.0, 460.0))


class TestConfigIO:
    def test_load_override(self, tmp_path):
        cfg = tmp_path / "severity.toml"
        cfg.write_text(
            '["defocus"]\n'
            "defocus_um = { level1 = 1.0, level5 = 8.0 }\n"
            "\n[optics]\n"
            "numerical_aperture = 0.5\n"
        )
        table = load_table(cfg)
        assert table.ranges["defocus"]["defocus_um"].at(5) == 8.0
        assert table.optics.numerical_aperture == 0.5
        # Untouched entries keep their defaults.
        assert table.ranges["crack"] == DEFAULT_TABLE.ranges["crack"]

    def test_load_rejects_unknown_section(self, tmp_path):
        cfg = tmp_path / "severity.toml"
        cfg.write_text('["sepia"]\nalpha = 1.0\n')
        with pytest.raises(UnknownKindError):
            load_table(cfg)

    def test_dump_reload_roundtrip(self, tmp_path):
        cfg = tmp_path / "defaults.toml"
        cfg.write_text(dump_default_config())
        table = load_table(cfg)
        assert validate_table(table) == []
        for kind in KINDS:
            for name, rng in DEFAULT_TABLE.ranges[kind].items():
                assert table.ranges[kind][name] == rng
        assert table.optics == DEFAULT_TABLE.optics

    def test_tables_are_frozen(self):
        with pytest.raises(dataclasses.FrozenInstanceError):
            DEFAULT_TABLE.optics.numerical_aperture = 0.9
