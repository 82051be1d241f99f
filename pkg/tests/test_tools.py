"""Tests for utility tools."""
import pytest

from app.errors import ParseError
from app.tools import (
    format_float,
    normalize_key,
    normalize_text,
    parse_key_value_file,
    read_lines,
    read_matrix_csv,
    write_matrix_csv,
    write_text,
)


def test_normalize_text():
    """Test text normalization."""
    text = "  This   is   a   test  \n\n  with   multiple   spaces  "
    normalized = normalize_text(text)
    assert "  " not in normalized
    assert normalized.startswith("This")
    assert normalized.endswith("spaces")


def test_normalize_text_empty():
    """Test normalization of empty text."""
    assert normalize_text("") == ""
    assert normalize_text("   ") == ""


def test_format_float_round_trips():
    """Seventeen significant digits read back to the same double."""
    for value in (0.1, 1.0 / 3.0, 2.0 ** -40, 123456.789):
        assert float(format_float(value)) == value


def test_write_text_creates_directories(tmp_path):
    """Parents are created and lines end with a bare newline."""
    path = write_text(str(tmp_path / "a" / "b" / "out.txt"), "x\ny\n")
    assert (tmp_path / "a" / "b" / "out.txt").read_bytes() == b"x\ny\n"
    assert read_lines(path) == ["x", "y"]


def test_read_lines_missing(tmp_path):
    """Missing files raise FileNotFoundError."""
    with pytest.raises(FileNotFoundError):
        read_lines(str(tmp_path / "missing.txt"))


def test_parse_key_value_file(tmp_path):
    """Comments and blanks are skipped; dashes in keys become underscores."""
    path = tmp_path / "cfg.txt"
    path.write_text("# comment\n\nbatch-size = 16\nlambda=2.5\n")
    assert parse_key_value_file(str(path)) == {"batch_size": "16", "lambda": "2.5"}
    assert normalize_key(" hidden-dim ") == "hidden_dim"


def test_parse_key_value_file_bad_line(tmp_path):
    """A line without '=' is a parse error naming the line."""
    path = tmp_path / "cfg.txt"
    path.write_text("seed = 1\nnonsense\n")
    with pytest.raises(ParseError) as err:
        parse_key_value_file(str(path))
    assert err.value.line == 2


def test_matrix_csv_round_trip(tmp_path):
    """Kind, names and rows come back as written."""
    path = write_matrix_csv(str(tmp_path / "m.csv"), "counts", ["a", "b"], [["1", "2"], ["3", "4"]])
    assert read_matrix_csv(path) == ("counts", ["a", "b"], [["1", "2"], ["3", "4"]])


def test_matrix_csv_wrong_row_count(tmp_path):
    """A square matrix needs one row per name."""
    path = tmp_path / "m.csv"
    path.write_text("# kind=counts\na,b\n1,2\n")
    with pytest.raises(ParseError):
        read_matrix_csv(str(path))
