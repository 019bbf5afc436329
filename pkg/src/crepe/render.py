"""SVG overlays of predicted spans: one polygon per quad, colour keyed by field."""
from __future__ import annotations

import base64
import io
from xml.sax.saxutils import quoteattr

import numpy as np
from PIL import Image

from .synthgen import stable_hash

PALETTE = ("#e6194b", "#3cb44b", "#4363d8", "#f58231", "#911eb4", "#42d4f4",
           "#f032e6", "#9a6324", "#808000", "#000075")


def field_color(name: str | None) -> str:
    if not name:
        return "#7f7f7f"
    return PALETTE[stable_hash(name) % len(PALETTE)]


def _png_data_uri(image: np.ndarray) -> str:
    buf = io.BytesIO()
    Image.fromarray(np.asarray(image, dtype=np.uint8)).save(buf, format="PNG")
    return "data:image/png;base64," + base64.b64encode(buf.getvalue()).decode("ascii")


def render_svg(result: dict, image: np.ndarray | None = None, width: int = 96, height: int = 96,
               scale: int = 4) -> str:
    """Overlay every span with a quad as a ``<polygon>``; its bbox, if any, as a dashed ``<rect>``."""
    if image is not None:
        height, width = image.shape[:2]
    W, H = width * scale, height * scale
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">']
    if image is not None:
        out.append(f'<image x="0" y="0" width="{W}" height="{H}" href="{_png_data_uri(image)}"'
                   ' style="image-rendering:pixelated"/>')
    for span in result.get("spans", []):
        key = span.get("field") if "text" in span else span.get("category")
        color = field_color(key)
        label = quoteattr(span.get("text", span.get("category", "")) + (f" [{key}]" if key else ""))
        q = span.get("quad")
        if q is not None:
            pts = " ".join(f"{q[2 * i] * W:.2f},{q[2 * i + 1] * H:.2f}" for i in range(4))
            out.append(f'<polygon points="{pts}" fill="{color}" fill-opacity="0.25" stroke="{color}"'
                       f' stroke-width="1"><title>{label[1:-1]}</title></polygon>')
        b = span.get("bbox")
        if b is not None:
            out.append(f'<rect x="{b[0] * W:.2f}" y="{b[1] * H:.2f}" width="{(b[2] - b[0]) * W:.2f}"'
                       f' height="{(b[3] - b[1]) * H:.2f}" fill="none" stroke="{color}"'
                       ' stroke-dasharray="3,2" stroke-width="1"/>')
    out.append("</svg>")
    return "\n".join(out) + "\n"
