"""Plain-text output formats: CSV with ``#`` comment headers and ASCII PGM (P2)."""

from __future__ import annotations

import csv
import io
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np


def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, np.integer):
        return str(int(v))
    return str(v)


def write_csv(path, columns: Sequence[str], rows: Iterable[Sequence], comments: Sequence[str] = ()) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    buf = io.StringIO()
    for c in comments:
        buf.write(f"# {c}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for row in rows:
        w.writerow([_fmt(v) for v in row])
    path.write_text(buf.getvalue())
    return path


def read_csv(path) -> tuple[list[str], list[list[str]], list[str]]:
    """(columns, rows as strings, comment lines without the leading '# ')."""
    comments, body = [], []
    for line in Path(path).read_text().splitlines():
        if line.startswith("#"):
            comments.append(line[1:].strip())
        elif line:
            body.append(line)
    rows = list(csv.reader(body))
    if not rows:
        raise ValueError(f"{path}: no header row")
    return rows[0], rows[1:], comments


def write_pgm(path, image: np.ndarray, comments: Sequence[str] = (), maxval: int = 255) -> Path:
    """Grayscale image with values in [0, 1] as ASCII PGM."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 2:
        raise ValueError(f"PGM needs a 2-D image, got shape {img.shape}")
    q = np.rint(np.clip(img, 0.0, 1.0) * maxval).astype(int)
    lines = ["P2"] + [f"# {c}" for c in comments]
    lines.append(f"{img.shape[1]} {img.shape[0]}")
    lines.append(str(maxval))
    lines += [" ".join(str(v) for v in row) for row in q]
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("\n".join(lines) + "\n")
    return path


def read_pgm(path) -> tuple[np.ndarray, int, list[str]]:
    """(integer pixel grid, maxval, comments)."""
    comments, tokens = [], []
    for line in Path(path).read_text().splitlines():
        if line.startswith("#"):
            comments.append(line[1:].strip())
            continue
        tokens += line.split()
    if not tokens or tokens[0] != "P2":
        raise ValueError(f"{path}: not an ASCII PGM")
    w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    px = np.array([int(v) for v in tokens[4:]], dtype=int)
    if px.size != w * h:
        raise ValueError(f"{path}: expected {w * h} pixels, found {px.size}")
    return px.reshape(h, w), maxval, comments
