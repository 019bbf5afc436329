"""Deterministic synthetic document generator.

Every generator is a pure function of ``(seed, cfg)``: it renders text with the
built-in bitmap font into a grayscale raster and records, per word, the
normalized quadrilateral that contains every inked pixel of that word.
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image

from .font import GLYPH_H, GLYPH_W, text_bitmap
from .token_schema import (Branch, Leaf, ROOT, Vocabulary, leaf_segments, tree_from_json,
                           tree_to_json)

ADVANCE = GLYPH_W + 1
BOX_PAD = 1  # pixels between glyph ink and the word quad

LETTERS = "abcdefghijklmnopqrstuvwxyz"
DIGITS = "0123456789"
PUNCT = ".,:;-/()%$#&*"


def stable_hash(name: str) -> int:
    return int.from_bytes(hashlib.sha256(name.encode()).digest()[:8], "little") >> 1


def derive_seed(root: int, component: str) -> int:
    """Per-component seed: root seed XOR a stable hash of the component name."""
    return (int(root) ^ stable_hash(component)) & ((1 << 63) - 1)


@dataclass(frozen=True)
class GenConfig:
    width: int = 96
    height: int = 96
    margin: int = 3
    line_pitch: int = 10
    min_lines: int = 3
    max_lines: int = 10
    min_words: int = 1
    max_words: int = 5
    min_word_len: int = 2
    max_word_len: int = 6
    max_rotation: float = 3.0  # degrees
    rotation_prob: float = 0.5
    noise: float = 0.01
    min_items: int = 2
    max_items: int = 6
    min_objects: int = 1
    max_objects: int = 3
    min_scene_words: int = 1
    max_scene_words: int = 4

    def __post_init__(self):
        if self.width < 64 or self.height < 64:
            raise ValueError(f"image size must be at least 64x64, got {self.width}x{self.height}")
        if not 0 <= self.max_rotation <= 10:
            raise ValueError("max_rotation must lie in [0, 10] degrees")


@dataclass
class Word:
    text: str
    quad: tuple[float, ...] | None
    field: str | None = None


@dataclass(eq=False)
class SynthDoc:
    image: np.ndarray
    words: list[Word]
    task: str
    parse: Branch | None = None
    instances: list[Branch] | None = None
    layout: list[tuple[str, tuple[float, float, float, float]]] | None = None
    label: str | None = None
    regions: list[tuple[float, float, float, float]] | None = None  # pasted document areas (multi)
    # per-word (row, col) arrays of inked pixels; not serialized
    pixels: list[np.ndarray] | None = field(default=None, compare=False, repr=False)

    def __eq__(self, other) -> bool:
        if not isinstance(other, SynthDoc):
            return NotImplemented
        return (self.image.shape == other.image.shape and np.array_equal(self.image, other.image)
                and (self.words, self.task, self.parse, self.instances, self.layout, self.label, self.regions)
                == (other.words, other.task, other.parse, other.instances, other.layout, other.label,
                    other.regions))

    @property
    def height(self) -> int:
        return self.image.shape[0]

    @property
    def width(self) -> int:
        return self.image.shape[1]


def quad_envelope(quad: Sequence[float]) -> tuple[float, float, float, float]:
    xs, ys = quad[0::2], quad[1::2]
    return (min(xs), min(ys), max(xs), max(ys))


def bbox_to_quad(b: Sequence[float]) -> tuple[float, ...]:
    x0, y0, x1, y1 = b
    return (x0, y0, x1, y0, x1, y1, x0, y1)


# --------------------------------------------------------------------------
# rendering
# --------------------------------------------------------------------------

class _Page:
    def __init__(self, cfg: GenConfig, background: int = 255):
        self.cfg = cfg
        self.img = np.full((cfg.height, cfg.width), background, dtype=np.uint8)
        self.ink = np.zeros_like(self.img, dtype=bool)
        self.words: list[Word] = []
        self.pixels: list[np.ndarray] = []

    def line_quads(self, texts, x, y, angle):
        """Quads (pixel units) of words laid out from (x, y), rotated about the line center."""
        boxes = []
        cur = x
        for t in texts:
            w = len(t) * ADVANCE - 1
            boxes.append((cur - BOX_PAD, y - BOX_PAD, cur + w + BOX_PAD, y + GLYPH_H + BOX_PAD))
            cur += w + ADVANCE
        cx = (boxes[0][0] + boxes[-1][2]) / 2
        cy = y + GLYPH_H / 2
        c, s = math.cos(angle), math.sin(angle)
        quads = []
        for x0, y0, x1, y1 in boxes:
            pts = []
            for px, py in ((x0, y0), (x1, y0), (x1, y1), (x0, y1)):
                dx, dy = px - cx, py - cy
                pts += [cx + c * dx - s * dy, cy + s * dx + c * dy]
            quads.append(pts)
        return quads, (cx, cy)

    def fits(self, quads) -> bool:
        W, H = self.cfg.width, self.cfg.height
        return all(0 <= v <= W for q in quads for v in q[0::2]) and \
            all(0 <= v <= H for q in quads for v in q[1::2])

    def draw_line(self, items: Sequence[tuple[str, str | None]], x: int, y: int,
                  angle_deg: float = 0.0, ink: int = 0) -> bool:
        """Render words left to right; falls back to no rotation if a quad would leave the page."""
        texts = [t for t, _ in items]
        angle = math.radians(angle_deg)
        quads, center = self.line_quads(texts, x, y, angle)
        if not self.fits(quads):
            angle = 0.0
            quads, center = self.line_quads(texts, x, y, 0.0)
            if not self.fits(quads):
                return False
        cx, cy = center
        c, s = math.cos(angle), math.sin(angle)
        cur = x
        for (text, fld), quad in zip(items, quads):
            bmp = text_bitmap(text)
            xs, ys = quad[0::2], quad[1::2]
            c0, c1 = max(int(math.floor(min(xs))), 0), min(int(math.ceil(max(xs))), self.cfg.width)
            r0, r1 = max(int(math.floor(min(ys))), 0), min(int(math.ceil(max(ys))), self.cfg.height)
            rr, cc = np.mgrid[r0:r1, c0:c1]
            dx, dy = cc + 0.5 - cx, rr + 0.5 - cy
            qx, qy = cx + c * dx + s * dy, cy - s * dx + c * dy
            sx = np.floor(qx - cur).astype(int)
            sy = np.floor(qy - y).astype(int)
            ok = (sx >= 0) & (sx < bmp.shape[1]) & (sy >= 0) & (sy < GLYPH_H)
            lit = np.zeros_like(ok)
            lit[ok] = bmp[sy[ok], sx[ok]]
            pix = np.stack([rr[lit], cc[lit]], axis=1)
            self.img[pix[:, 0], pix[:, 1]] = ink
            self.ink[pix[:, 0], pix[:, 1]] = True
            W, H = self.cfg.width, self.cfg.height
            norm = tuple(min(max(v / (W if i % 2 == 0 else H), 0.0), 1.0) for i, v in enumerate(quad))
            self.words.append(Word(text, norm, fld))
            self.pixels.append(pix)
            cur += len(text) * ADVANCE - 1 + ADVANCE
        return True

    def speckle(self, rng: np.random.Generator):
        if self.cfg.noise <= 0:
            return
        mask = (rng.random(self.img.shape) < self.cfg.noise) & ~self.ink
        self.img[mask] = rng.integers(150, 230, size=int(mask.sum()), dtype=np.uint8)

    def doc(self, task: str, **kw) -> SynthDoc:
        return SynthDoc(self.img, self.words, task, pixels=self.pixels, **kw)


def random_word(rng: np.random.Generator, lo: int, hi: int) -> str:
    n = int(rng.integers(lo, hi + 1))
    kind = rng.random()
    if kind < 0.7:
        return "".join(rng.choice(list(LETTERS), n))
    if kind < 0.9:
        s = list(rng.choice(list(DIGITS), n))
        if n >= 3 and rng.random() < 0.5:
            s[int(rng.integers(1, n - 1))] = str(rng.choice(list(".:/-")))
        return "".join(s)
    s = list(rng.choice(list(LETTERS), max(n - 1, 1)))
    p = str(rng.choice(list(PUNCT)))
    return "".join(s + [p]) if rng.random() < 0.5 else "".join([p] + s)


def _angle(rng: np.random.Generator, cfg: GenConfig) -> float:
    if cfg.max_rotation > 0 and rng.random() < cfg.rotation_prob:
        return float(rng.uniform(-cfg.max_rotation, cfg.max_rotation))
    return 0.0


def _fit_words(words: list[str], x: int, cfg: GenConfig) -> list[str]:
    limit = cfg.width - cfg.margin - BOX_PAD
    out, cur = [], x
    for w in words:
        width = len(w) * ADVANCE - 1
        if cur + width > limit:
            break
        out.append(w)
        cur += width + ADVANCE
    if not out and words:
        room = max((limit - x + 1) // ADVANCE, 1)
        out = [words[0][:room]]
    return out


def _line_rows(cfg: GenConfig) -> int:
    return (cfg.height - 2 * cfg.margin - 2 * BOX_PAD + (cfg.line_pitch - GLYPH_H)) // cfg.line_pitch


def _line_y(cfg: GenConfig, i: int) -> int:
    return cfg.margin + BOX_PAD + i * cfg.line_pitch


# --------------------------------------------------------------------------
# generators
# --------------------------------------------------------------------------

def gen_ocr_doc(seed: int, cfg: GenConfig = GenConfig()) -> SynthDoc:
    """Lines of random words in raster order, each line optionally rotated."""
    rng = np.random.default_rng(seed)
    page = _Page(cfg)
    n_lines = int(rng.integers(cfg.min_lines, cfg.max_lines + 1))
    n_lines = min(n_lines, _line_rows(cfg))
    for li in range(n_lines):
        y = _line_y(cfg, li)
        n = int(rng.integers(cfg.min_words, cfg.max_words + 1))
        words = [random_word(rng, cfg.min_word_len, cfg.max_word_len) for _ in range(n)]
        x = cfg.margin + BOX_PAD + int(rng.integers(0, 8))
        words = _fit_words(words, x, cfg)
        page.draw_line([(w, None) for w in words], x, y, _angle(rng, cfg))
    page.speckle(rng)
    return page.doc("ocr", parse=Branch(ROOT, [Leaf([w.text for w in page.words])]) if page.words else Branch(ROOT))


def _price(cents: int) -> str:
    return f"{cents // 100}.{cents % 100:02d}"


def gen_parse_doc(seed: int, cfg: GenConfig = GenConfig(), vocab: Vocabulary | None = None) -> SynthDoc:
    """Pseudo-receipt: store name, (item, price) lines, total; plus distractor words."""
    if vocab is not None:
        missing = {"store", "item", "name", "price", "total"} - set(vocab.fields)
        if missing:
            raise ValueError(f"schema lacks receipt fields {sorted(missing)}")
    rng = np.random.default_rng(seed)
    page = _Page(cfg)
    rows = _line_rows(cfg)
    header = rng.random() < 0.7
    n_items = int(rng.integers(cfg.min_items, cfg.max_items + 1))
    if header and n_items + 3 > rows:
        header = False
    n_items = max(min(n_items, rows - 2), 1)

    lines: list[list[tuple[str, str | None]]] = []
    if header:
        hdr = [str(rng.choice(["receipt", "tel", "no", "date", "order"]))]
        if rng.random() < 0.6:
            hdr.append(random_word(rng, 3, 5))
        lines.append([(w, None) for w in hdr])
    store = ["".join(rng.choice(list(LETTERS), int(rng.integers(3, 8))))]
    if rng.random() < 0.3:
        store.append(str(rng.choice(["cafe", "mart", "shop"])))
    lines.append([(w, "store") for w in store])

    items = []
    total = 0
    for _ in range(n_items):
        cents = int(rng.integers(50, 2000))
        total += cents
        qty = [f"{int(rng.integers(2, 9))}x"] if rng.random() < 0.3 else []
        budget = 14 - len(_price(cents)) - (len(qty[0]) + 1 if qty else 0)
        n1 = int(rng.integers(3, min(7, budget) + 1))
        name = ["".join(rng.choice(list(LETTERS), n1))]
        if budget - n1 - 1 >= 3 and rng.random() < 0.3:
            name.append("".join(rng.choice(list(LETTERS), int(rng.integers(2, min(4, budget - n1 - 1) + 1)))))
        items.append((name, _price(cents)))
        lines.append([(q, None) for q in qty] + [(w, "item/name") for w in name] + [(_price(cents), "item/price")])
    lines.append([("total", None), (_price(total), "total")])

    for li, line in enumerate(lines):
        x = cfg.margin + BOX_PAD + int(rng.integers(0, 4))
        ok = page.draw_line(line, x, _line_y(cfg, li), _angle(rng, cfg))
        assert ok, "receipt line does not fit"
    page.speckle(rng)
    tree = Branch(ROOT, [Branch("store", [Leaf(store)])]
                  + [Branch("item", [Branch("name", [Leaf(n)]), Branch("price", [Leaf([p])])]) for n, p in items]
                  + [Branch("total", [Leaf([_price(total)])])])
    return page.doc("parse", parse=tree)


@dataclass(frozen=True)
class CanvasConfig:
    width: int = 96
    height: int = 96
    grid: int = 2
    jitter: bool = True
    min_scale: float = 0.8  # relative to the grid cell


def paste_transform(quad: Sequence[float], scale_x: float, scale_y: float,
                    off_x: float, off_y: float) -> tuple[float, ...]:
    return tuple(scale_x * v + off_x if i % 2 == 0 else scale_y * v + off_y for i, v in enumerate(quad))


def compose_multidoc(docs: Sequence[SynthDoc], seed: int, canvas: CanvasConfig = CanvasConfig()) -> SynthDoc:
    """Paste up to four documents into disjoint cells of a grid canvas."""
    if not 1 <= len(docs) <= canvas.grid * canvas.grid or len(docs) > 4:
        raise ValueError(f"compose_multidoc takes 1-4 documents (and at most grid^2), got {len(docs)}")
    rng = np.random.default_rng(seed)
    W, H = canvas.width, canvas.height
    img = np.full((H, W), 255, dtype=np.uint8)
    cells = sorted(rng.choice(canvas.grid * canvas.grid, size=len(docs), replace=False).tolist())
    cw, ch = W // canvas.grid, H // canvas.grid
    words: list[Word] = []
    instances: list[Branch] = []
    regions = []
    for doc, cell in zip(docs, cells):
        r, c = divmod(cell, canvas.grid)
        f = float(rng.uniform(canvas.min_scale, 1.0)) if canvas.jitter else 1.0
        nw = max(int(round(cw * f)), 1)
        nh = max(int(round(ch * f)), 1)
        ox = c * cw + (int(rng.integers(0, cw - nw + 1)) if canvas.jitter else 0)
        oy = r * ch + (int(rng.integers(0, ch - nh + 1)) if canvas.jitter else 0)
        if (nw, nh) == (doc.width, doc.height):
            small = doc.image
        else:
            small = np.asarray(Image.fromarray(doc.image).resize((nw, nh), Image.BOX))
        img[oy:oy + nh, ox:ox + nw] = small
        regions.append((ox / W, oy / H, (ox + nw) / W, (oy + nh) / H))
        sx, sy, tx, ty = nw / W, nh / H, ox / W, oy / H
        for w in doc.words:
            q = paste_transform(w.quad, sx, sy, tx, ty) if w.quad is not None else None
            words.append(Word(w.text, q, w.field))
        instances.append(doc.parse if doc.parse is not None else Branch(ROOT))
    return SynthDoc(img, words, "multi", instances=instances, regions=regions)


def _blocks_disjoint(a, b) -> bool:
    return a[2] <= b[0] or b[2] <= a[0] or a[3] <= b[1] or b[3] <= a[1]


def gen_layout_doc(seed: int, cfg: GenConfig = GenConfig(), vocab: Vocabulary | None = None) -> SynthDoc:
    """Vertical stack of title / text / table / figure blocks with category boxes."""
    rng = np.random.default_rng(seed)
    page = _Page(cfg)
    W, H = cfg.width, cfg.height
    layout = []
    y = cfg.margin
    kinds = ["title"] + [str(k) for k in rng.choice(["text", "table", "figure"], int(rng.integers(1, 4)))]
    if rng.random() < 0.3:
        kinds = kinds[1:]
    for kind in kinds:
        x0 = cfg.margin + int(rng.integers(0, 6))
        if kind in ("title", "text"):
            n_lines = 1 if kind == "title" else int(rng.integers(2, 4))
            h = n_lines * cfg.line_pitch
            if y + h > H - cfg.margin:
                break
            right = x0
            for li in range(n_lines):
                k = int(rng.integers(1, 3 if kind == "title" else 4))
                ws = _fit_words([random_word(rng, 2, 6) for _ in range(k)], x0 + BOX_PAD, cfg)
                page.draw_line([(w, None) for w in ws], x0 + BOX_PAD, y + BOX_PAD + li * cfg.line_pitch)
                right = max(right, x0 + BOX_PAD + sum(len(w) * ADVANCE for w in ws) - 1 + BOX_PAD)
            box = (x0, y, right, y + h - (cfg.line_pitch - GLYPH_H - 2 * BOX_PAD))
        elif kind == "table":
            rows_, cols = int(rng.integers(2, 4)), int(rng.integers(2, 4))
            cell_w, cell_h = 4 * ADVANCE + 2, GLYPH_H + 4
            tw, th = cols * cell_w + 1, rows_ * cell_h + 1
            if y + th > H - cfg.margin or x0 + tw > W - cfg.margin:
                break
            for r in range(rows_ + 1):
                page.img[y + r * cell_h, x0:x0 + tw] = 0
                page.ink[y + r * cell_h, x0:x0 + tw] = True
            for c in range(cols + 1):
                page.img[y:y + th, x0 + c * cell_w] = 0
                page.ink[y:y + th, x0 + c * cell_w] = True
            for r in range(rows_):
                for c in range(cols):
                    t = "".join(rng.choice(list(DIGITS), int(rng.integers(1, 5))))
                    page.draw_line([(t, None)], x0 + c * cell_w + 2, y + r * cell_h + 2)
            box = (x0, y, x0 + tw, y + th)
        else:
            fw, fh = int(rng.integers(30, W - 2 * cfg.margin - 6)), int(rng.integers(12, 25))
            if y + fh > H - cfg.margin:
                break
            patch = rng.integers(60, 200, size=(fh, fw), dtype=np.uint8)
            patch[::3, :] = 40
            page.img[y:y + fh, x0:x0 + fw] = patch
            page.ink[y:y + fh, x0:x0 + fw] = True
            box = (x0, y, x0 + fw, y + fh)
        layout.append((kind, (box[0] / W, box[1] / H, box[2] / W, box[3] / H)))
        y = box[3] + 3
    page.speckle(rng)
    return page.doc("layout", layout=layout)


CLASS_LABELS = ("letter", "invoice", "form", "receipt")


def gen_class_doc(seed: int, cfg: GenConfig = GenConfig(), vocab: Vocabulary | None = None) -> SynthDoc:
    """One of four visual templates, labeled with its document type."""
    rng = np.random.default_rng(seed)
    labels = vocab.class_labels if vocab is not None else CLASS_LABELS
    label = str(labels[int(rng.integers(0, len(labels)))])
    page = _Page(cfg)
    W, H = cfg.width, cfg.height
    m = cfg.margin
    style = CLASS_LABELS.index(label) if label in CLASS_LABELS else int(rng.integers(0, 4))

    def text_lines(x, y0, n, maxw=4):
        for li in range(n):
            ws = _fit_words([random_word(rng, 2, 6) for _ in range(int(rng.integers(1, maxw + 1)))], x, cfg)
            page.draw_line([(w, None) for w in ws], x, y0 + li * cfg.line_pitch)

    if style == 0:  # letter
        text_lines(m + 1, m + 1, int(rng.integers(4, 7)))
        page.draw_line([("".join(rng.choice(list(LETTERS), 5)), None)], W - m - 32, H - m - 9)
    elif style == 1:  # invoice
        page.img[m:m + 10, m:W - m] = 0
        page.ink[m:m + 10, m:W - m] = True
        for r in range(4):
            yy = m + 16 + r * 12
            page.img[yy, m:W - m] = 0
            page.ink[yy, m:W - m] = True
            if r < 3:
                page.draw_line([("".join(rng.choice(list(DIGITS), 4)), None)], m + 4, yy + 3)
    elif style == 2:  # form
        for r in range(int(rng.integers(3, 5))):
            yy = m + r * 20
            page.draw_line([("".join(rng.choice(list(LETTERS), 3)), None)], m + 1, yy + 5)
            page.img[yy:yy + 16, 30] = 0
            page.img[yy:yy + 16, W - m - 1] = 0
            page.img[yy, 30:W - m] = 0
            page.img[yy + 15, 30:W - m] = 0
            page.ink[yy:yy + 16, 30:W - m] = True
    else:  # receipt
        x = W // 2 - 20
        for li in range(int(rng.integers(4, 8))):
            yy = m + 1 + li * cfg.line_pitch
            ws = _fit_words([random_word(rng, 2, 4)], x, cfg)
            page.draw_line([(w, None) for w in ws], x, yy)
            if li % 2 == 1:
                page.img[yy + 8, x:x + 40:2] = 0
    page.speckle(rng)
    return page.doc("class", label=label)


SCENE_CATEGORIES = ("circle", "square", "triangle")


def gen_scene_doc(seed: int, cfg: GenConfig = GenConfig(), vocab: Vocabulary | None = None) -> SynthDoc:
    """Filled shapes and free-floating words on a textured background."""
    rng = np.random.default_rng(seed)
    W, H = cfg.width, cfg.height
    page = _Page(cfg)
    yy, xx = np.mgrid[0:H, 0:W]
    page.img[:] = (235 - 20 * yy / H).astype(np.uint8)
    n_obj = int(rng.integers(cfg.min_objects, cfg.max_objects + 1)) if cfg.max_objects > 0 else 0
    occupied: list[tuple[int, int, int, int]] = []
    objects = []
    for _ in range(n_obj):
        for _try in range(50):
            size = int(rng.integers(16, 29))
            x0 = int(rng.integers(1, W - size - 1))
            y0 = int(rng.integers(1, H - size - 1))
            cand = (x0 - 2, y0 - 2, x0 + size + 2, y0 + size + 2)
            if all(_blocks_disjoint(cand, o) for o in occupied):
                break
        else:
            continue
        cat = str(rng.choice(SCENE_CATEGORIES))
        gray = int(rng.integers(60, 160))
        if cat == "square":
            mask = (xx >= x0) & (xx < x0 + size) & (yy >= y0) & (yy < y0 + size)
        elif cat == "circle":
            r = size / 2
            mask = (xx + 0.5 - x0 - r) ** 2 + (yy + 0.5 - y0 - r) ** 2 <= r * r
        else:
            rel_y = (yy + 0.5 - y0) / size
            half = rel_y * size / 2
            mid = x0 + size / 2
            mask = (rel_y >= 0) & (rel_y <= 1) & (np.abs(xx + 0.5 - mid) <= half)
        page.img[mask] = gray
        page.ink[mask] = True
        rows, cols = np.nonzero(mask)
        box = (float(cols.min() / W), float(rows.min() / H), float((cols.max() + 1) / W), float((rows.max() + 1) / H))
        objects.append((cat, box))
        occupied.append((x0 - 1, y0 - 1, x0 + size + 1, y0 + size + 1))
    n_words = int(rng.integers(cfg.min_scene_words, cfg.max_scene_words + 1)) if cfg.max_scene_words > 0 else 0
    placed = []
    for _ in range(n_words):
        text = random_word(rng, 2, 5)
        w = len(text) * ADVANCE - 1
        for _try in range(50):
            x0 = int(rng.integers(2, W - w - 2))
            y0 = int(rng.integers(2, H - GLYPH_H - 2))
            cand = (x0 - 2, y0 - 2, x0 + w + 2, y0 + GLYPH_H + 2)
            if all(_blocks_disjoint(cand, o) for o in occupied):
                occupied.append(cand)
                placed.append((y0, x0, text))
                break
    for y0, x0, text in sorted(placed):
        page.draw_line([(text, None)], x0, y0)
    page.speckle(rng)
    objects.sort(key=lambda o: (o[1][1], o[1][0], o[0]))
    tree = Branch(ROOT, [Leaf([w.text for w in page.words])]) if page.words else Branch(ROOT)
    return page.doc("scene", layout=objects, parse=tree)


GENERATORS = {
    "ocr": lambda seed, cfg, vocab=None: gen_ocr_doc(seed, cfg),
    "parse": gen_parse_doc,
    "layout": gen_layout_doc,
    "class": gen_class_doc,
    "scene": gen_scene_doc,
}


def generate(task: str, seed: int, cfg: GenConfig = GenConfig(), vocab: Vocabulary | None = None,
             n_multi: int | None = None, canvas: CanvasConfig | None = None) -> SynthDoc:
    """Generate one document of ``task``; ``multi`` composes 1-4 receipts."""
    if task == "multi":
        rng = np.random.default_rng(derive_seed(seed, "multi/count"))
        k = n_multi or int(rng.integers(1, 5))
        parts = [gen_parse_doc(derive_seed(seed, f"multi/doc/{i}"), cfg, vocab) for i in range(k)]
        canvas = canvas or CanvasConfig(cfg.width, cfg.height)
        return compose_multidoc(parts, derive_seed(seed, "multi/canvas"), canvas)
    try:
        gen = GENERATORS[task]
    except KeyError:
        raise ValueError(f"unknown task {task!r}") from None
    return gen(seed, cfg, vocab)


# --------------------------------------------------------------------------
# corpus files
# --------------------------------------------------------------------------

def write_ppm(path: Path, image: np.ndarray) -> None:
    h, w = image.shape
    rgb = np.repeat(image[:, :, None], 3, axis=2)
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(rgb.astype(np.uint8).tobytes())


def read_ppm(path: Path) -> np.ndarray:
    """Read a binary P6 image and return its first channel as grayscale."""
    data = Path(path).read_bytes()
    fields: list[bytes] = []
    pos = 0
    while len(fields) < 4:
        while data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        end = pos
        while not data[end:end + 1].isspace():
            end += 1
        fields.append(data[pos:end])
        pos = end
    if fields[0] != b"P6":
        raise ValueError(f"{path}: not a binary PPM")
    w, h, maxval = int(fields[1]), int(fields[2]), int(fields[3])
    if maxval != 255:
        raise ValueError(f"{path}: unsupported maxval {maxval}")
    pix = np.frombuffer(data[pos + 1:pos + 1 + w * h * 3], dtype=np.uint8)
    return pix.reshape(h, w, 3)[:, :, 0].copy()


def doc_record(doc: SynthDoc, doc_id: str, weak: bool = False) -> dict:
    rec = {
        "id": doc_id,
        "image": f"{doc_id}.ppm",
        "width": doc.width,
        "height": doc.height,
        "task": doc.task,
        "words": [{"text": w.text,
                   "quad": None if (weak or w.quad is None) else [round(float(v), 6) for v in w.quad],
                   "field": w.field} for w in doc.words] if doc.words is not None else None,
        "parse": None,
        "layout": None,
        "label": doc.label,
    }
    if doc.task == "multi" and doc.instances is not None:
        rec["parse"] = [tree_to_json(t) for t in doc.instances]
    elif doc.parse is not None:
        rec["parse"] = tree_to_json(doc.parse)
    if doc.layout is not None:
        rec["layout"] = [{"category": c, "bbox": [round(float(v), 6) for v in b]} for c, b in doc.layout]
    return rec


def doc_from_record(rec: dict, image: np.ndarray) -> SynthDoc:
    words = [Word(w["text"], tuple(w["quad"]) if w.get("quad") is not None else None, w.get("field"))
             for w in (rec.get("words") or [])]
    doc = SynthDoc(image, words, rec["task"], label=rec.get("label"))
    if rec.get("parse") is not None:
        if rec["task"] == "multi":
            doc.instances = [tree_from_json(t) for t in rec["parse"]]
        else:
            doc.parse = tree_from_json(rec["parse"])
    if rec.get("layout") is not None:
        doc.layout = [(e["category"], tuple(e["bbox"])) for e in rec["layout"]]
    return doc


def write_corpus(docs: Sequence[tuple[str, SynthDoc]], out_dir: str | Path, split: str = "train",
                 weak: bool = False) -> Path:
    """Write ``<split>.jsonl`` plus one PPM per document; returns the index path."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    index = out_dir / f"{split}.jsonl"
    with open(index, "w") as f:
        for doc_id, doc in docs:
            write_ppm(out_dir / f"{doc_id}.ppm", doc.image)
            rec = doc_record(doc, doc_id, weak=weak and doc.task in ("parse", "multi"))
            f.write(json.dumps(rec, sort_keys=True) + "\n")
    return index


def read_corpus(index: str | Path) -> list[tuple[str, SynthDoc]]:
    index = Path(index)
    out = []
    for line in index.read_text().splitlines():
        if not line.strip():
            continue
        rec = json.loads(line)
        img = read_ppm(index.parent / rec["image"])
        out.append((rec["id"], doc_from_record(rec, img)))
    return out


def key_words(doc: SynthDoc) -> list[Word]:
    return [w for w in doc.words if w.field is not None]


def check_annotation(doc: SynthDoc) -> bool:
    """Parse leaf segments form a sub-multiset of the rendered word texts."""
    from collections import Counter
    trees = doc.instances if doc.instances is not None else ([doc.parse] if doc.parse is not None else [])
    need = Counter(s for t in trees for _, s in leaf_segments(t))
    have = Counter(w.text for w in doc.words)
    return not (need - have)


def with_overrides(cfg: GenConfig, **kw) -> GenConfig:
    return replace(cfg, **kw)
