"""File plumbing shared by the trainer, the report builder and the command line."""

from __future__ import annotations

import contextlib
import csv
import io
import os
from pathlib import Path

from .errors import UsageError


def atomic_write(path, data) -> None:
    """Write via a temporary sibling and rename, so readers never see partial files."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    if isinstance(data, str):
        tmp.write_text(data)
    else:
        tmp.write_bytes(data)
    tmp.replace(path)


def csv_text(columns, rows, config_hash="", seed=0) -> str:
    """CSV with a leading ``# config_hash=... seed=...`` provenance line."""
    buf = io.StringIO()
    buf.write(f"# config_hash={config_hash} seed={seed}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for row in rows:
        w.writerow(["" if v is None else (repr(float(v)) if isinstance(v, float) else v) for v in row])
    return buf.getvalue()


def read_csv(path):
    """Return ``(meta, rows)``: provenance fields from ``#`` lines and dict rows."""
    meta, lines = {}, []
    for line in Path(path).read_text().splitlines():
        if line.startswith("#"):
            for tok in line[1:].split():
                key, _, val = tok.partition("=")
                meta[key] = val
        elif line:
            lines.append(line)
    return meta, list(csv.DictReader(lines))


@contextlib.contextmanager
def run_lock(directory):
    """Sentinel file guarding a run directory against concurrent writers."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    sentinel = directory / ".lock"
    try:
        fd = os.open(sentinel, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise UsageError(f"run directory {str(directory)!r} is locked by another writer") from None
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield directory
    finally:
        sentinel.unlink(missing_ok=True)
