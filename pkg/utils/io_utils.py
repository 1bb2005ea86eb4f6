"""
File output helpers: every result file is written to a temp sibling and renamed into place.
"""

import hashlib
import json
import os
import tempfile
from pathlib import Path


def atomic_write_text(path, text):
    """
    Write text to `path` atomically.

    Args:
        path (str | Path): Destination file
        text (str): Full file contents

    Returns:
        Path: The written path

    Raises:
        OSError: If the directory cannot be created or written
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, 'w', newline='') as f:
            f.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def atomic_write_json(path, data):
    return atomic_write_text(path, json.dumps(data, indent=2, sort_keys=True, default=_json_default) + "\n")


def atomic_write_frame(path, frame):
    """Write a pandas DataFrame as CSV: header row, '.' decimals, LF line endings."""
    text = frame.to_csv(index=False, lineterminator="\n", float_format="%.17g", na_rep="")
    return atomic_write_text(path, text)


def sha256_text(text):
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def _json_default(value):
    # numpy scalars and arrays
    if hasattr(value, "tolist"):
        return value.tolist()
    if isinstance(value, Path):
        return str(value)
    raise TypeError(f"Object of type {type(value).__name__} is not JSON serializable")
