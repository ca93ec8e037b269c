"""
Binary replay format for Brownian increments
Layout: four little-endian int64 header fields (M, K, d, seed) followed by M·K·d little-endian float64
"""

from pathlib import Path
from typing import Tuple, Union

import numpy as np
from numpy.typing import NDArray

from models.exceptions import StorageError

HEADER_FIELDS = 4


def write_brownian_dump(path: Union[str, Path], increments: NDArray[np.float64], seed: int) -> None:
    path = Path(path)
    M, K, d = increments.shape
    header = np.array([M, K, d, seed], dtype="<i8")
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "wb") as handle:
            handle.write(header.tobytes())
            handle.write(np.ascontiguousarray(increments, dtype="<f8").tobytes())
    except OSError as e:
        raise StorageError(f"Failed to write {path}: {e}")


def read_brownian_dump(path: Union[str, Path]) -> Tuple[NDArray[np.float64], int]:
    """
    Returns:
        Tuple[NDArray, int]: (increments of shape (M, K, d), seed)
    """
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as e:
        raise StorageError(f"Failed to read {path}: {e}")
    header_bytes = HEADER_FIELDS * 8
    if len(raw) < header_bytes:
        raise StorageError(f"Truncated header in {path}")
    M, K, d, seed = (int(v) for v in np.frombuffer(raw[:header_bytes], dtype="<i8"))
    body = np.frombuffer(raw[header_bytes:], dtype="<f8")
    if body.size != M * K * d:
        raise StorageError(f"{path} holds {body.size} values, header announces {M * K * d}")
    return body.reshape(M, K, d).astype(np.float64), seed
