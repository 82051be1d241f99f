"""Utility tools for reading and writing the plain-text artifacts."""
import csv
import io
import os
from typing import Dict, Iterable, List, Sequence, Tuple

from app.config import Config
from app.errors import ParseError


def normalize_text(text: str) -> str:
    """Normalize text by stripping and collapsing whitespace."""
    if not text:
        return ""
    return " ".join(text.split())


def format_float(value: float) -> str:
    """Decimal text that reads back to the same double."""
    return Config.FLOAT_FORMAT % value


def write_text(path: str, text: str) -> str:
    """
    Write ``text`` with ``\\n`` line endings, creating parent directories.

    Args:
        path: Destination file
        text: Full file content

    Returns:
        The path written
    """
    parent = os.path.dirname(path)
    if parent:
        os.makedirs(parent, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)
    return path


def read_lines(path: str) -> List[str]:
    """Read a text artifact as a list of lines without terminators."""
    if not os.path.isfile(path):
        raise FileNotFoundError(f"no such file: {path}")
    with open(path, "r", encoding="utf-8") as fh:
        return fh.read().splitlines()


def parse_key_value_file(path: str) -> Dict[str, str]:
    """
    Parse a flat ``key = value`` file.

    Blank lines and lines starting with ``#`` are ignored. Keys are
    normalized so ``batch-size`` and ``batch_size`` are the same key.

    Args:
        path: Config file path

    Returns:
        Mapping of normalized key to raw string value
    """
    values: Dict[str, str] = {}
    for number, raw in enumerate(read_lines(path), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ParseError(f"expected 'key = value', got '{normalize_text(raw)}'", path, number)
        key, value = line.split("=", 1)
        key = normalize_key(key)
        if not key:
            raise ParseError("empty key", path, number)
        values[key] = value.strip()
    return values


def normalize_key(key: str) -> str:
    return key.strip().replace("-", "_")


def write_matrix_csv(path: str, kind: str, names: Sequence[str], rows: Iterable[Sequence[str]]) -> str:
    """Write a ``# kind=...`` comment, a header of class names, then the rows."""
    buf = io.StringIO()
    buf.write(f"# kind={kind}\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(list(names))
    for row in rows:
        writer.writerow(list(row))
    return write_text(path, buf.getvalue())


def read_matrix_csv(path: str) -> Tuple[str, List[str], List[List[str]]]:
    """
    Read a matrix CSV written by :func:`write_matrix_csv`.

    Returns:
        ``(kind, names, rows)`` with rows still as strings
    """
    lines = read_lines(path)
    if not lines or not lines[0].startswith("# kind="):
        raise ParseError("missing '# kind=' header", path, 1)
    kind = lines[0][len("# kind="):].strip()
    reader = csv.reader(lines[1:])
    try:
        names = next(reader)
    except StopIteration:
        raise ParseError("missing class-name header row", path, 2)
    rows = []
    for offset, row in enumerate(reader, start=3):
        if len(row) != len(names):
            raise ParseError(f"expected {len(names)} values, got {len(row)}", path, offset)
        rows.append(row)
    if len(rows) != len(names):
        raise ParseError(f"expected {len(names)} rows, got {len(rows)}", path, len(lines))
    return kind, names, rows
