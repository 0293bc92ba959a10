"""Tests for config-file parsing, value coercion and seed derivation."""

import pytest

import config
from config import ConfigError


DEFAULTS = {"n": 16, "lr": 3e-4, "share_du": False, "sizes": (16, 32), "levels": None, "kind": "multipole"}


def test_flags_override_file():
    """defaults ← file ← flags, with None flags meaning "not given"."""
    resolved = config.resolve(DEFAULTS, {"n": "32", "lr": "0.01"}, {"n": 64, "lr": None})
    assert resolved["n"] == 64
    assert resolved["lr"] == 0.01
    assert resolved["kind"] == "multipole"


def test_unknown_key_is_an_error():
    """Typos fail loudly instead of being ignored."""
    with pytest.raises(ConfigError, match="unknown config key"):
        config.resolve(DEFAULTS, {"depht": "4"})


@pytest.mark.parametrize("key,text,expected", [
    ("share_du", "yes", True),
    ("share_du", "off", False),
    ("sizes", "16, 32,64", (16, 32, 64)),
    ("levels", "3", 3),
    ("levels", "auto", None),
    ("kind", "dense", "dense"),
])
def test_coercion_follows_default_type(key, text, expected):
    """String values take the type of the default."""
    assert config.resolve(DEFAULTS, {key: text})[key] == expected


def test_bad_values_rejected():
    """Unparseable numbers and booleans are configuration errors."""
    with pytest.raises(ConfigError, match="invalid value for n"):
        config.resolve(DEFAULTS, {"n": "sixteen"})
    with pytest.raises(ConfigError):
        config.resolve(DEFAULTS, {"share_du": "maybe"})


def test_none_only_for_automatic_keys():
    """'none' resolves to None where the default is None and is an error elsewhere."""
    assert config.resolve(DEFAULTS, {"levels": "none"})["levels"] is None
    for key in ("n", "lr", "share_du", "sizes", "kind"):
        with pytest.raises(ConfigError, match=f"{key} has no automatic value"):
            config.resolve(DEFAULTS, {key: "none"})


def test_load_config_file(tmp_path):
    """key=value lines, '#' comments, and dashes folded to underscores."""
    path = tmp_path / "run.cfg"
    path.write_text("# training\nshare-du = true\n\nn=8   # small grid\n")
    assert config.load_config_file(path) == {"share_du": "true", "n": "8"}


def test_malformed_config_line(tmp_path):
    """A line without '=' names its file and line number."""
    path = tmp_path / "bad.cfg"
    path.write_text("n=8\nlevels\n")
    with pytest.raises(ConfigError, match="bad.cfg:2"):
        config.load_config_file(path)


def test_sub_seed_is_stable_and_distinct():
    """Same inputs give the same seed; names and indices separate streams."""
    assert config.sub_seed(0, "data", 7) == config.sub_seed(0, "data", 7)
    seeds = {config.sub_seed(0, "data", i) for i in range(100)}
    assert len(seeds) == 100
    assert config.sub_seed(0, "data", 1) != config.sub_seed(0, "shuffle", 1)
    assert config.sub_seed(0, "data", 1) != config.sub_seed(1, "data", 1)
    assert 0 <= config.sub_seed(123, "x") < 2 ** 64


def test_write_resolved(tmp_path):
    """The effective config is echoed sorted, in the same syntax the loader reads."""
    path = config.write_resolved(tmp_path / "out", DEFAULTS)
    lines = path.read_text().splitlines()
    assert path.name == config.RESOLVED_CONFIG_NAME
    assert lines == sorted(lines)
    assert "levels=none" in lines and "sizes=16,32" in lines and "share_du=false" in lines
    assert config.resolve(DEFAULTS, config.load_config_file(path)) == DEFAULTS
