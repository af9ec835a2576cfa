"""Attention-trace export: averaged word/utterance importance as JSON and an SVG heatmap.

Importance of a word (utterance) is the arithmetic mean of its attention weight
over all decode steps of one response. The SVG has one row per utterance: the
leftmost cell is shaded red by utterance importance, the remaining cells blue by
word importance.
"""

from __future__ import annotations

import json
from xml.sax.saxutils import escape

from hran.model import AttentionTrace

CELL_W, CELL_H, LABEL_W, PAD = 64, 28, 40, 10


def trace_document(trace: AttentionTrace, context: list, response: list, mode: str, run: dict) -> dict:
    if not trace.steps:
        raise ValueError("cannot export an empty attention trace")
    doc = trace.to_dict()
    doc.update({"context": context, "response": response, "mode": mode, "run": run})
    return doc


def dumps_document(doc: dict) -> str:
    return json.dumps(doc, ensure_ascii=False, sort_keys=True, indent=1) + "\n"


def _shade(base: tuple, weight: float) -> str:
    w = min(max(weight, 0.0), 1.0)
    r, g, b = (round(255 - (255 - c) * w) for c in base)
    return f"#{r:02x}{g:02x}{b:02x}"


_BLUE = (33, 102, 172)
_RED = (178, 24, 43)


def render_svg(doc: dict) -> str:
    context = doc["context"]
    words = doc["word_importance"]
    utts = doc["utterance_importance"]
    ncols = max(len(u) for u in context)
    width = 2 * PAD + LABEL_W + CELL_W * (ncols + 1)
    height = 2 * PAD + CELL_H * (len(context) + 1)
    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="12">'
    ]
    for i, (utt, w_row, u_w) in enumerate(zip(context, words, utts)):
        y = PAD + i * CELL_H
        out.append(f'<text x="{PAD}" y="{y + 18}">u{i + 1}</text>')
        x = PAD + LABEL_W
        out.append(
            f'<rect x="{x}" y="{y}" width="{CELL_W}" height="{CELL_H}" fill="{_shade(_RED, u_w)}" '
            f'stroke="#ffffff"><title>u{i + 1}: {u_w:.6f}</title></rect>'
        )
        for j, (tok, w) in enumerate(zip(utt, w_row)):
            cx = x + CELL_W * (j + 1)
            out.append(
                f'<rect x="{cx}" y="{y}" width="{CELL_W}" height="{CELL_H}" fill="{_shade(_BLUE, w)}" '
                f'stroke="#ffffff"><title>{escape(tok)}: {w:.6f}</title></rect>'
            )
            colour = "#ffffff" if w > 0.5 else "#000000"
            out.append(f'<text x="{cx + 4}" y="{y + 18}" fill="{colour}">{escape(tok)}</text>')
    y = PAD + len(context) * CELL_H
    out.append(f'<text x="{PAD}" y="{y + 18}">{escape(" ".join(doc["response"]))}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"
