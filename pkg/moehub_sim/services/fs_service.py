"""Filesystem helpers for the output directory"""

from __future__ import annotations

from pathlib import Path
from typing import Iterable, Iterator

# Suffixes of files an experiment writes.
OUTPUT_SUFFIXES: frozenset[str] = frozenset({
    ".json",
    ".csv",
    ".dat",
    ".ndjson",
})


class OutputDirError(OSError):
    """The output directory cannot be created or written."""


def ensure_output_dir(folder: str | Path) -> Path:
    """Create ``folder`` if needed and make sure files can be written into it."""
    base = Path(folder).expanduser()
    try:
        base.mkdir(parents=True, exist_ok=True)
        marker = base / ".write_check"
        marker.write_text("", encoding="utf-8")
        marker.unlink()
    except OSError as exc:
        raise OutputDirError(f"output directory {base} is not writable: {exc.strerror or exc}") from exc
    return base


def iter_output_files(folder: str | Path) -> Iterator[Path]:
    """Report, table, plot and trace files directly inside ``folder``; unreadable entries are skipped."""
    base = Path(folder).expanduser()
    if not base.is_dir():
        raise OutputDirError(f"not a directory: {base}")
    for entry in base.iterdir():
        try:
            if entry.is_file() and entry.suffix.lower() in OUTPUT_SUFFIXES:
                yield entry
        except OSError:
            continue


def stale_outputs(folder: str | Path, produced: Iterable[Path]) -> list[Path]:
    """Output files in ``folder`` that the current run did not produce, sorted."""
    fresh = {Path(p).resolve() for p in produced}
    return sorted(p for p in iter_output_files(folder) if p.resolve() not in fresh)
