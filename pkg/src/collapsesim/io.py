"""CSV tables and deterministic SVG line charts."""

from __future__ import annotations

import csv
import io
import os
import tempfile
from pathlib import Path
from typing import Sequence
from xml.sax.saxutils import escape

import numpy as np

from .model import ValidationError


def format_value(value) -> str:
    """Shortest round-trip text for floats, plain text otherwise."""
    if isinstance(value, (bool, np.bool_)):
        return "1" if value else "0"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return str(value)


def csv_text(header: Sequence[str], rows) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        if len(row) != len(header):
            raise ValueError("row length does not match header")
        writer.writerow([format_value(v) for v in row])
    return buf.getvalue()


def atomic_write(path, data: str | bytes) -> None:
    """Write via a temporary file in the target directory, then rename."""
    path = Path(path)
    mode = "wb" if isinstance(data, bytes) else "w"
    fd, tmp = tempfile.mkstemp(dir=path.parent if str(path.parent) else ".", prefix=".tmp-", suffix=path.suffix)
    try:
        with os.fdopen(fd, mode, **({} if mode == "wb" else {"encoding": "utf-8", "newline": ""})) as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def read_csv(path) -> tuple[list[str], np.ndarray]:
    """Read a numeric CSV written by this package.  Raises ValidationError if malformed."""
    try:
        text = Path(path).read_text(encoding="utf-8")
    except UnicodeDecodeError:
        raise ValidationError(f"{path} is not UTF-8 text") from None
    rows = list(csv.reader(io.StringIO(text)))
    if not rows or not rows[0]:
        raise ValidationError(f"{path} has no header")
    header = rows[0]
    body = [r for r in rows[1:] if r]
    if not body:
        raise ValidationError(f"{path} has no data rows")
    try:
        data = np.array([[float(x) for x in r] for r in body])
    except ValueError:
        raise ValidationError(f"{path} contains non-numeric values") from None
    if data.ndim != 2 or data.shape[1] != len(header):
        raise ValidationError(f"{path} has ragged rows")
    return header, data


# --------------------------------------------------------------------------
# SVG

_COLOURS = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#e377c2", "#17becf")
WIDTH, HEIGHT = 640, 400
MARGIN = 60


def _fmt(x: float) -> str:
    return f"{x:.6g}"


def svg_line_chart(x: np.ndarray, ys: dict[str, np.ndarray], x_label: str, log_x: bool = False,
                   title: str = "") -> str:
    """Self-contained SVG with one polyline per entry of ``ys``.  Non-finite points are dropped."""
    if not ys:
        raise ValidationError("nothing to plot")
    x = np.asarray(x, float)
    if log_x:
        if np.any(x <= 0):
            raise ValidationError("log x axis needs positive values")
        x = np.log10(x)
    y_all = np.concatenate([np.asarray(v, float) for v in ys.values()])
    y_all = y_all[np.isfinite(y_all)]
    y_lo, y_hi = (float(y_all.min()), float(y_all.max())) if len(y_all) else (0.0, 1.0)
    if y_hi == y_lo:
        y_lo, y_hi = y_lo - 0.5 * (abs(y_lo) or 1.0), y_hi + 0.5 * (abs(y_hi) or 1.0)
    x_lo, x_hi = float(np.nanmin(x)), float(np.nanmax(x))
    if x_hi == x_lo:
        x_lo, x_hi = x_lo - 0.5, x_hi + 0.5

    def px(v):
        return MARGIN + (v - x_lo) / (x_hi - x_lo) * (WIDTH - 2 * MARGIN)

    def py(v):
        return HEIGHT - MARGIN - (v - y_lo) / (y_hi - y_lo) * (HEIGHT - 2 * MARGIN)

    out = [
        '<?xml version="1.0" encoding="UTF-8"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">',
        f'<rect x="0" y="0" width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
        f'<path d="M{MARGIN},{MARGIN} V{HEIGHT - MARGIN} H{WIDTH - MARGIN}" stroke="black" fill="none"/>',
        f'<text x="{WIDTH / 2}" y="{HEIGHT - 15}" text-anchor="middle" font-size="12">'
        f'{escape(("log10 " if log_x else "") + x_label)}</text>',
        f'<text x="{MARGIN}" y="{HEIGHT - MARGIN + 15}" font-size="10">{_fmt(x_lo)}</text>',
        f'<text x="{WIDTH - MARGIN}" y="{HEIGHT - MARGIN + 15}" text-anchor="end" font-size="10">{_fmt(x_hi)}</text>',
        f'<text x="{MARGIN - 5}" y="{HEIGHT - MARGIN}" text-anchor="end" font-size="10">{_fmt(y_lo)}</text>',
        f'<text x="{MARGIN - 5}" y="{MARGIN + 4}" text-anchor="end" font-size="10">{_fmt(y_hi)}</text>',
    ]
    if title:
        out.append(f'<text x="{WIDTH / 2}" y="25" text-anchor="middle" font-size="14">{escape(title)}</text>')
    for i, (name, y) in enumerate(ys.items()):
        colour = _COLOURS[i % len(_COLOURS)]
        y = np.asarray(y, float)
        keep = np.isfinite(y) & np.isfinite(x)
        pts = " ".join(f"{px(a):.2f},{py(b):.2f}" for a, b in zip(x[keep], y[keep]))
        out.append(f'<polyline fill="none" stroke="{colour}" stroke-width="1.5" points="{pts}"/>')
        out.append(f'<text x="{WIDTH - MARGIN + 5}" y="{MARGIN + 14 * i}" font-size="10" fill="{colour}">'
                   f'{escape(name)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"

