"""Tests for environment configuration."""
import pytest

from app.config import Config


def test_defaults_are_valid():
    """The built-in defaults pass validation."""
    assert Config.validate()


@pytest.mark.parametrize(
    "name, value",
    [("THRESHOLD", 0.0), ("THRESHOLD", 1.0), ("LAMBDA", -1.0), ("DIAGONAL_FLOOR", 0.0), ("FUSION_RULE", "max"),
     ("LOG_LEVEL", "LOUD")],
)
def test_out_of_range_values(monkeypatch, name, value):
    """Out-of-range settings raise ValueError."""
    monkeypatch.setattr(Config, name, value)
    with pytest.raises(ValueError):
        Config.validate()
