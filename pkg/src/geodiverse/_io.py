from __future__ import annotations

import hashlib
import os
from pathlib import Path

from .errors import PersistenceError


def atomic_write_bytes(path, data: bytes) -> None:
    """Write via a ``.partial`` sibling and rename, so interrupted runs never look complete."""
    path = Path(path)
    tmp = path.with_name(path.name + ".partial")
    try:
        with open(tmp, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except OSError as exc:
        raise PersistenceError(str(exc), path=path) from exc


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()
