"""CSV/SVG/PGM emitters.  SVG is written by hand so reports stay diffable."""

import math
from html import escape
from pathlib import Path

import numpy as np

from .errors import TensorFileError

CELL = 56
MARGIN = 110


def _write(path, text: str) -> Path:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
    except OSError as exc:
        raise TensorFileError(f"{path}: cannot write ({exc.strerror})") from exc
    return path


def diverging_color(v: float) -> str:
    """Blue (-1) through white (0) to red (+1); NaN is grey."""
    if v is None or math.isnan(v):
        return "#cccccc"
    v = max(-1.0, min(1.0, float(v)))
    fade = round(255 * (1 - abs(v)))
    return f"#ff{fade:02x}{fade:02x}" if v >= 0 else f"#{fade:02x}{fade:02x}ff"


def annotation(v: float) -> str:
    if v is None or math.isnan(v):
        return "n/a"
    return f"{v:.2f}"


def heatmap_svg(values, row_names, col_names, title="", highlights=None) -> str:
    """Annotated grid.  ``highlights`` maps (row, col) to a stroke colour."""
    values = np.asarray(values, dtype=float)
    highlights = highlights or {}
    nr, nc = values.shape
    width, height = MARGIN + nc * CELL + 10, MARGIN + nr * CELL + 10
    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'font-family="sans-serif" font-size="11">',
        f'<text x="{width / 2:.1f}" y="16" text-anchor="middle" font-size="13">{escape(title)}</text>',
    ]
    for j, name in enumerate(col_names):
        x = MARGIN + j * CELL + CELL / 2
        out.append(f'<text x="{x:.1f}" y="{MARGIN - 8}" text-anchor="start" '
                   f'transform="rotate(-45 {x:.1f} {MARGIN - 8})">{escape(name)}</text>')
    for i, name in enumerate(row_names):
        y = MARGIN + i * CELL + CELL / 2 + 4
        out.append(f'<text x="{MARGIN - 6}" y="{y:.1f}" text-anchor="end">{escape(name)}</text>')
        for j in range(nc):
            v = values[i, j]
            x0, y0 = MARGIN + j * CELL, MARGIN + i * CELL
            stroke = highlights.get((i, j))
            border = f' stroke="{stroke}" stroke-width="3"' if stroke else ' stroke="#ffffff"'
            out.append(f'<rect x="{x0}" y="{y0}" width="{CELL}" height="{CELL}" '
                       f'fill="{diverging_color(v)}"{border}/>')
            out.append(f'<text x="{x0 + CELL / 2:.1f}" y="{y0 + CELL / 2 + 4:.1f}" '
                       f'text-anchor="middle">{annotation(v)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def matrix_svg(matrix, title="relative change", flags=()) -> str:
    marks = {}
    for f in flags:
        i, j = matrix.base_names.index(f.base), matrix.downstream_names.index(f.downstream)
        marks[(i, j)] = "#d62728" if f.kind == "introduced_by_classifier" else "#2ca02c"
    return heatmap_svg(matrix.mean, matrix.base_names, matrix.downstream_names, title, marks)


def correlation_csv(table) -> str:
    lines = [",".join([""] + list(table.names))]
    for name, row in zip(table.names, table.values):
        lines.append(",".join([name] + [f"{v:.9g}" for v in row]))
    return "\n".join(lines) + "\n"


def write_matrix(matrix, directory, stem="matrix", title="relative change", flags=()) -> None:
    directory = Path(directory)
    _write(directory / f"{stem}.csv", matrix.to_csv())
    _write(directory / f"{stem}.svg", matrix_svg(matrix, title, flags))


def line_plot_svg(x, series: dict, title="", xlabel="", ylabel="", width=480, height=300) -> str:
    palette = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f"]
    x = np.asarray(x, dtype=float)
    ys = [np.asarray(v, dtype=float) for v in series.values()]
    left, top, right, bottom = 50, 30, 130, 40
    pw, ph = width - left - right, height - top - bottom
    finite = np.concatenate([y[np.isfinite(y)] for y in ys]) if ys else np.zeros(1)
    lo, hi = min(0.0, finite.min(initial=0.0)), max(1.0, finite.max(initial=1.0))
    xlo, xhi = (x.min(), x.max()) if len(x) and x.max() > x.min() else (0.0, 1.0)

    def px(v):
        return left + (v - xlo) / (xhi - xlo) * pw

    def py(v):
        return top + (hi - v) / (hi - lo) * ph

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'font-family="sans-serif" font-size="11">',
        f'<text x="{left + pw / 2:.1f}" y="16" text-anchor="middle" font-size="13">{escape(title)}</text>',
        f'<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="#000000"/>',
        f'<text x="{left + pw / 2:.1f}" y="{height - 8}" text-anchor="middle">{escape(xlabel)}</text>',
        f'<text x="12" y="{top + ph / 2:.1f}" text-anchor="middle" '
        f'transform="rotate(-90 12 {top + ph / 2:.1f})">{escape(ylabel)}</text>',
    ]
    for tick in (lo, (lo + hi) / 2, hi):
        out.append(f'<text x="{left - 4}" y="{py(tick) + 4:.1f}" text-anchor="end">{tick:.2f}</text>')
    for tick in (xlo, xhi):
        out.append(f'<text x="{px(tick):.1f}" y="{top + ph + 14}" text-anchor="middle">{tick:.3g}</text>')
    for k, (name, y) in enumerate(zip(series, ys)):
        colour = palette[k % len(palette)]
        pts = " ".join(f"{px(a):.2f},{py(b):.2f}" for a, b in zip(x, y) if np.isfinite(b))
        out.append(f'<polyline points="{pts}" fill="none" stroke="{colour}" stroke-width="2"/>')
        ly = top + 12 + 16 * k
        out.append(f'<line x1="{left + pw + 8}" y1="{ly}" x2="{left + pw + 24}" y2="{ly}" '
                   f'stroke="{colour}" stroke-width="2"/>')
        out.append(f'<text x="{left + pw + 28}" y="{ly + 4}">{escape(name)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def sweep_svg(trace) -> str:
    series = {f"base:{trace.base_name}": trace.base}
    series.update({f"ds:{k}": v for k, v in trace.downstream.items()})
    return line_plot_svg(trace.lambdas, series, title=f"sweep of {trace.base_name}",
                         xlabel="lambda", ylabel="prediction")


def _to_bytes(image) -> np.ndarray:
    arr = np.asarray(image, dtype=float)
    side = int(round(math.sqrt(arr.size)))
    if arr.ndim != 2:
        arr = arr.reshape(side, side)
    return np.round(np.clip(arr, 0.0, 1.0) * 255).astype(np.uint8)


def pgm_bytes(image) -> bytes:
    """Binary (P5) 8-bit greyscale."""
    arr = _to_bytes(image)
    return f"P5\n{arr.shape[1]} {arr.shape[0]}\n255\n".encode("ascii") + arr.tobytes()


def write_pgm(path, image) -> Path:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(pgm_bytes(image))
    except OSError as exc:
        raise TensorFileError(f"{path}: cannot write ({exc.strerror})") from exc
    return path


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    parts = raw.split(maxsplit=4)
    if parts[0] != b"P5":
        raise TensorFileError(f"{path}: not a binary PGM")
    w, h = int(parts[1]), int(parts[2])
    return np.frombuffer(parts[4][: w * h], dtype=np.uint8).reshape(h, w) / 255.0


def montage_svg(rows, labels=(), scale=4) -> str:
    """Grid of greyscale images, one list of images per row, drawn as pixel rects."""
    rows = [[_to_bytes(img) for img in row] for row in rows]
    side = rows[0][0].shape[0] if rows and rows[0] else 0
    gap, label_w = 6, 90
    ncol = max((len(r) for r in rows), default=0)
    width = label_w + ncol * (side * scale + gap)
    height = len(rows) * (side * scale + gap) + gap
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
           f'font-family="sans-serif" font-size="11" shape-rendering="crispEdges">']
    for r, row in enumerate(rows):
        y0 = gap + r * (side * scale + gap)
        if r < len(labels):
            out.append(f'<text x="4" y="{y0 + side * scale / 2:.1f}">{escape(str(labels[r]))}</text>')
        for c, img in enumerate(row):
            x0 = label_w + c * (side * scale + gap)
            out.append(f'<g transform="translate({x0} {y0}) scale({scale})">')
            for i in range(img.shape[0]):
                for j in range(img.shape[1]):
                    v = int(img[i, j])
                    out.append(f'<rect x="{j}" y="{i}" width="1" height="1" fill="#{v:02x}{v:02x}{v:02x}"/>')
            out.append("</g>")
    out.append("</svg>")
    return "\n".join(out) + "\n"


def write_text(path, text: str) -> Path:
    return _write(path, text)
