"""
CSV read/write utilities for solver artifacts
Numbers are written with 17 significant digits so every float survives a roundtrip exactly
"""

import csv
from contextlib import contextmanager
from pathlib import Path
from typing import Any, Dict, Iterable, List, Sequence, Union

from models.exceptions import StorageError

PathLike = Union[str, Path]


def format_number(value: Any) -> str:
    """Render ints as-is and floats with 17 significant digits"""
    if isinstance(value, bool):
        return str(int(value))
    if isinstance(value, int):
        return str(value)
    return f"{float(value):.17g}"


@contextmanager
def open_csv_writer(path: PathLike, columns: Sequence[str]):
    """
    Context manager yielding a csv writer with the header already written

    Args:
        path (PathLike): Output file; parent directories are created
        columns (Sequence[str]): Header row

    Yields:
        csv.writer: Writer for data rows

    Example:
        with open_csv_writer("out/contraction.csv", ["s", "rho_q"]) as writer:
            writer.writerow(["0", "2"])
    """
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="", encoding="utf-8") as handle:
            writer = csv.writer(handle, lineterminator="\n")
            writer.writerow(list(columns))
            yield writer
    except StorageError:
        raise
    except OSError as e:
        raise StorageError(f"Failed to write {path}: {e}")


def write_rows(path: PathLike, columns: Sequence[str], rows: Iterable[Sequence[Any]]) -> int:
    """
    Write numeric rows under a header

    Returns:
        int: Number of data rows written

    Raises:
        StorageError: If a row has the wrong width or the file cannot be written
    """
    count = 0
    with open_csv_writer(path, columns) as writer:
        for row in rows:
            if len(row) != len(columns):
                raise StorageError(f"Row {count} of {path} has {len(row)} fields, expected {len(columns)}")
            writer.writerow([format_number(value) for value in row])
            count += 1
    return count


def read_rows(path: PathLike) -> List[Dict[str, float]]:
    """
    Read a numeric CSV written by write_rows

    Returns:
        List[Dict[str, float]]: One dictionary per data row, keyed by column name
    """
    path = Path(path)
    try:
        with open(path, newline="", encoding="utf-8") as handle:
            reader = csv.DictReader(handle)
            return [{key: float(value) for key, value in row.items()} for row in reader]
    except OSError as e:
        raise StorageError(f"Failed to read {path}: {e}")
    except ValueError as e:
        raise StorageError(f"Malformed number in {path}: {e}")


def read_header(path: PathLike) -> List[str]:
    """Column names of a CSV file"""
    path = Path(path)
    try:
        with open(path, newline="", encoding="utf-8") as handle:
            return next(csv.reader(handle), [])
    except OSError as e:
        raise StorageError(f"Failed to read {path}: {e}")
