"""CSV tables and standalone SVG charts for saliency bundles."""
from __future__ import annotations

from pathlib import Path
from xml.sax.saxutils import escape

import numpy as np

from .errors import IoFailure
from .io import LABEL_NAMES


def _fmt(v):
    return f"{float(v):.6f}"


def _check_unit(name, arr):
    arr = np.asarray(arr, dtype=np.float64)
    if arr.size and (arr.min() < 0.0 or arr.max() > 1.0 or not np.all(np.isfinite(arr))):
        raise ValueError(f"{name} saliency must lie in [0, 1]")
    return arr


def feature_ranking_csv(names, values):
    values = np.asarray(values, dtype=np.float64)
    order = sorted(range(len(names)), key=lambda i: (-values[i], i))
    lines = ["rank,feature,saliency"]
    lines += [f"{r + 1},{names[i]},{_fmt(values[i])}" for r, i in enumerate(order)]
    return "\n".join(lines) + "\n"


def channel_csv(names, values):
    lines = ["channel,saliency"] + [f"{n},{_fmt(v)}" for n, v in zip(names, values)]
    return "\n".join(lines) + "\n"


def edge_csv(names, matrix):
    lines = ["channel_i,channel_j,saliency"]
    n = len(names)
    for i in range(n):
        for j in range(i + 1, n):
            lines.append(f"{names[i]},{names[j]},{_fmt(matrix[i, j])}")
    return "\n".join(lines) + "\n"


def matrix_csv(names, matrix):
    """Square matrix with a header row; row = receiving channel."""
    lines = ["receiver," + ",".join(names)]
    for name, row in zip(names, matrix):
        lines.append(name + "," + ",".join(_fmt(v) for v in row))
    return "\n".join(lines) + "\n"


# -- SVG -------------------------------------------------------------------------

def _sequential(t):
    t = min(max(t, 0.0), 1.0)
    r = round(255 - 222 * t)
    g = round(255 - 153 * t)
    b = round(255 - 75 * t)
    return f"#{r:02x}{g:02x}{b:02x}"


def _diverging(t):
    """t in [-1, 1]: blue for negative, red for positive, white at 0."""
    t = min(max(t, -1.0), 1.0)
    a = abs(t)
    if t >= 0:
        return f"#ff{round(255 - 200 * a):02x}{round(255 - 200 * a):02x}"
    return f"#{round(255 - 200 * a):02x}{round(255 - 200 * a):02x}ff"


def _svg(width, height, body, title):
    return (f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
            f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">\n'
            f'<rect width="{width}" height="{height}" fill="#ffffff"/>\n'
            f'<text x="{width / 2:.1f}" y="16" text-anchor="middle" font-size="13">'
            f'{escape(title)}</text>\n' + "".join(body) + "</svg>\n")


def bar_chart_svg(labels, values, title):
    """Horizontal bars, values in [0, 1]."""
    row, left, bar_w = 18, 110, 300
    height = 30 + row * len(labels) + 10
    body = []
    for k, (lab, v) in enumerate(zip(labels, values)):
        y = 28 + k * row
        w = bar_w * float(v)
        body.append(f'<text x="{left - 6}" y="{y + 12}" text-anchor="end">{escape(str(lab))}</text>\n')
        body.append(f'<rect x="{left}" y="{y + 2}" width="{w:.2f}" height="{row - 5}" '
                    f'fill="#2166ac"/>\n')
        body.append(f'<text x="{left + w + 4:.2f}" y="{y + 12}">{float(v):.3f}</text>\n')
    return _svg(left + bar_w + 60, height, body, title)


def heatmap_svg(labels, matrix, title, diverging=False, limit=None):
    """Square heatmap; ``limit`` sets the symmetric colour range for diverging maps."""
    matrix = np.asarray(matrix, dtype=np.float64)
    n = len(labels)
    cell, left, top = 18, 40, 60
    size = left + cell * n + 20
    if diverging:
        limit = float(np.max(np.abs(matrix))) if limit is None else float(limit)
        limit = limit if limit > 0 else 1.0
    body = []
    for k, lab in enumerate(labels):
        body.append(f'<text x="{left - 4}" y="{top + k * cell + 13}" text-anchor="end">'
                    f'{escape(lab)}</text>\n')
        x = left + k * cell + 12
        body.append(f'<text x="{x}" y="{top - 4}" transform="rotate(-90 {x} {top - 4})">'
                    f'{escape(lab)}</text>\n')
    for i in range(n):
        for j in range(n):
            v = matrix[i, j]
            colour = _diverging(v / limit) if diverging else _sequential(v)
            body.append(f'<rect x="{left + j * cell}" y="{top + i * cell}" width="{cell}" '
                        f'height="{cell}" fill="{colour}"><title>{escape(labels[i])}-'
                        f'{escape(labels[j])}: {v:.4f}</title></rect>\n')
    note = f"colour range +/-{limit:.4f}" if diverging else "colour range 0..1"
    body.append(f'<text x="{left}" y="{top + n * cell + 14}">{note}</text>\n')
    return _svg(size, top + n * cell + 24, body, title)


# -- writer ----------------------------------------------------------------------

def _write(out_dir, name, text):
    try:
        (out_dir / name).write_text(text)
    except OSError as exc:
        raise IoFailure(f"cannot write {out_dir / name}: {exc}") from exc


def write_report(bundle, metrics, out_dir):
    """Write every table and chart of ``bundle`` (and ``metrics``) to ``out_dir``.

    Returns the sorted list of written file names.
    """
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise IoFailure(f"cannot create {out_dir}: {exc}") from exc
    feats, chans = list(bundle.feature_names), list(bundle.channel_names)
    written = []

    def emit(name, text):
        _write(out_dir, name, text)
        written.append(name)

    summary = ["groups: " + ", ".join(LABEL_NAMES[g] for g in sorted(bundle.features))]
    for grp in bundle.missing_groups:
        summary.append(f"{LABEL_NAMES[grp]} group omitted: no graphs carry this label")
    for grp in sorted(bundle.features):
        tag = LABEL_NAMES[grp]
        m_f = _check_unit("feature", bundle.features[grp])
        m_v = _check_unit("channel", bundle.nodes[grp])
        m_e = _check_unit("edge", bundle.edges[grp])
        emit(f"features_{tag}.csv", feature_ranking_csv(feats, m_f))
        emit(f"channels_{tag}.csv", channel_csv(chans, m_v))
        emit(f"edges_{tag}.csv", edge_csv(chans, m_e))
        emit(f"features_{tag}.svg", bar_chart_svg(feats, m_f, f"Feature saliency ({tag})"))
        emit(f"channels_{tag}.svg", bar_chart_svg(chans, m_v, f"Channel saliency ({tag})"))
        emit(f"edges_{tag}.svg", heatmap_svg(chans, m_e, f"Edge saliency ({tag})"))
    for layer in sorted(bundle.attention):
        for grp in sorted(bundle.attention[layer]):
            tag = LABEL_NAMES[grp]
            mat = bundle.attention[layer][grp]
            emit(f"attention_layer{layer}_{tag}.csv", matrix_csv(chans, mat))
            emit(f"attention_layer{layer}_{tag}.svg",
                 heatmap_svg(chans, mat, f"Mean attention, layer {layer} ({tag})"))
        if layer in bundle.attention_diff:
            diff = bundle.attention_diff[layer]
            emit(f"attention_diff_layer{layer}.csv", matrix_csv(chans, diff))
            emit(f"attention_diff_layer{layer}.svg",
                 heatmap_svg(chans, diff, f"Attention difference HC - MDD, layer {layer}",
                             diverging=True))
    if metrics is not None:
        emit("metrics.csv", metrics.to_csv())
    if np.isfinite(bundle.faithful_fraction):
        summary.append(f"faithful mask fraction: {bundle.faithful_fraction:.4f}")
        summary.append(f"near-binary violation fraction: {bundle.near_binary_fraction:.4f}")
    emit("summary.txt", "\n".join(summary) + "\n")
    return sorted(written)
