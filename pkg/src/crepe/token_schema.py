"""Vocabulary and conversions between structured annotations and token ids.

Text segments are tokenized one character per token. Structure is carried by
special tokens: ``<field:NAME>``/``</field:NAME>`` around each field,
``<ocr>``/``</ocr>`` around each text segment, ``<layout>``/``</layout>`` and
``<obj>``/``</obj>`` around layout elements and scene objects, and
``<instance>``/``</instance>`` around each document of a multi-document image.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterable, Sequence, Union

CHARSET = "abcdefghijklmnopqrstuvwxyz0123456789 .,:;-/()%$#&*"

PAD = "<pad>"
UNK = "<unk>"
BOS = "<s>"
EOS = "</s>"
TASK_TOKENS = {
    "ocr": "<s_ocr>",
    "parse": "<s_parse>",
    "multi": "<s_parse>",
    "layout": "<s_layout>",
    "class": "<s_class>",
    "scene": "<s_scene>",
}
OCR_OPEN, OCR_CLOSE = "<ocr>", "</ocr>"
LAYOUT_OPEN, LAYOUT_CLOSE = "<layout>", "</layout>"
OBJ_OPEN, OBJ_CLOSE = "<obj>", "</obj>"
INST_OPEN, INST_CLOSE = "<instance>", "</instance>"

TASKS = ("ocr", "parse", "multi", "layout", "class", "scene")
ROOT = ""


class SchemaError(ValueError):
    """Unknown field, category or task for the loaded schema."""


class CharsetError(SchemaError):
    """Text contains a character outside the glyph charset."""


@dataclass(frozen=True)
class Leaf:
    segments: tuple[str, ...] = ()

    def __init__(self, segments: Iterable[str] = ()):
        object.__setattr__(self, "segments", tuple(segments))


@dataclass(frozen=True)
class Branch:
    name: str
    children: tuple["Node", ...] = ()

    def __init__(self, name: str, children: Iterable["Node"] = ()):
        object.__setattr__(self, "name", name)
        object.__setattr__(self, "children", tuple(children))


Node = Union[Leaf, Branch]


def as_root(node: Node | Sequence[Node]) -> Branch:
    """Wrap a node (or a list of top-level nodes) in the unnamed root branch."""
    if isinstance(node, Branch) and node.name == ROOT:
        return node
    if isinstance(node, (Leaf, Branch)):
        return Branch(ROOT, [node])
    return Branch(ROOT, node)


def fold_text(text: str) -> str:
    return text.lower()


def filter_charset(text: str) -> str:
    return "".join(c for c in fold_text(text) if c in CHARSET)


class Vocabulary:
    """Bijection between tokens and integer ids. ``<pad>`` is always id 0."""

    def __init__(self, fields: Sequence[str], categories: Sequence[str],
                 triggers: dict[str, Sequence[str]] | None = None,
                 layout_categories: Sequence[str] = (), class_labels: Sequence[str] = (),
                 scene_categories: Sequence[str] = ()):
        self.fields = tuple(fields)
        self.categories = tuple(categories)
        self.layout_categories = tuple(layout_categories) or self.categories
        self.class_labels = tuple(class_labels) or self.categories
        self.scene_categories = tuple(scene_categories) or self.categories
        specials = [PAD, UNK, BOS, EOS]
        for tok in TASK_TOKENS.values():
            if tok not in specials:
                specials.append(tok)
        specials += [OCR_OPEN, OCR_CLOSE, LAYOUT_OPEN, LAYOUT_CLOSE, OBJ_OPEN, OBJ_CLOSE,
                     INST_OPEN, INST_CLOSE]
        for name in self.fields:
            specials += [f"<field:{name}>", f"</field:{name}>"]
        specials += [f"<cat:{name}>" for name in self.categories]
        if len(set(specials)) != len(specials):
            raise SchemaError("duplicate special token in schema")
        self.special_tokens = tuple(specials)
        self.char_tokens = tuple(CHARSET)
        self.tokens = self.special_tokens + self.char_tokens
        self._ids = {tok: i for i, tok in enumerate(self.tokens)}
        triggers = triggers or {t: [OCR_CLOSE] for t in TASKS}
        self.triggers: dict[str, frozenset[str]] = {}
        for task, toks in triggers.items():
            toks = frozenset(toks)
            if not toks or not toks <= set(self.special_tokens):
                raise SchemaError(f"bad trigger set for task {task!r}: {sorted(toks)}")
            self.triggers[task] = toks

    @classmethod
    def from_schema(cls, schema: dict) -> "Vocabulary":
        return cls(schema["fields"], schema["categories"], schema.get("triggers"),
                   schema.get("layout_categories", ()), schema.get("class_labels", ()),
                   schema.get("scene_categories", ()))

    @classmethod
    def load(cls, path: str | Path | None = None) -> "Vocabulary":
        if path is None:
            text = resources.files("crepe").joinpath("default_schema.json").read_text()
        else:
            text = Path(path).read_text()
        return cls.from_schema(json.loads(text))

    def to_schema(self) -> dict:
        return {
            "fields": list(self.fields),
            "categories": list(self.categories),
            "layout_categories": list(self.layout_categories),
            "class_labels": list(self.class_labels),
            "scene_categories": list(self.scene_categories),
            "triggers": {k: sorted(v) for k, v in self.triggers.items()},
        }

    def __len__(self) -> int:
        return len(self.tokens)

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self.tokens == other.tokens \
            and self.triggers == other.triggers

    def id_of(self, token: str) -> int:
        try:
            return self._ids[token]
        except KeyError:
            raise SchemaError(f"unknown token {token!r}") from None

    def token_of(self, idx: int) -> str:
        if not 0 <= idx < len(self.tokens):
            raise SchemaError(f"token id {idx} out of range")
        return self.tokens[idx]

    @property
    def pad_id(self) -> int:
        return 0

    @property
    def eos_id(self) -> int:
        return self._ids[EOS]

    def task_id(self, task: str) -> int:
        if task not in TASK_TOKENS:
            raise SchemaError(f"unknown task {task!r}")
        return self._ids[TASK_TOKENS[task]]

    def trigger_ids(self, task: str) -> frozenset[int]:
        if task not in self.triggers:
            raise SchemaError(f"no trigger set for task {task!r}")
        return frozenset(self._ids[t] for t in self.triggers[task])

    def field_open(self, name: str) -> int:
        if name not in self.fields:
            raise SchemaError(f"unknown field {name!r}")
        return self._ids[f"<field:{name}>"]

    def field_close(self, name: str) -> int:
        if name not in self.fields:
            raise SchemaError(f"unknown field {name!r}")
        return self._ids[f"</field:{name}>"]

    def category(self, name: str) -> int:
        if name not in self.categories:
            raise SchemaError(f"unknown category {name!r}")
        return self._ids[f"<cat:{name}>"]

    def encode_text(self, text: str) -> list[int]:
        out = []
        for ch in fold_text(text):
            if ch not in CHARSET:
                raise CharsetError(f"character {ch!r} outside charset in {text!r}")
            out.append(self._ids[ch])
        return out

    def render(self, ids: Iterable[int]) -> str:
        """Human-readable token string, characters joined, specials spaced."""
        parts: list[str] = []
        buf = ""
        for i in ids:
            tok = self.token_of(int(i))
            if len(tok) == 1:
                buf += tok
            else:
                if buf:
                    parts.append(buf)
                    buf = ""
                parts.append(tok)
        if buf:
            parts.append(buf)
        return " ".join(parts)


# --------------------------------------------------------------------------
# validation and serialization
# --------------------------------------------------------------------------

def validate_tree(tree: Branch, vocab: Vocabulary) -> None:
    """Raise SchemaError unless ``tree`` is in canonical form.

    Canonical: no two adjacent leaves, no branch without children, empty leaves
    only as the sole child of a named branch, non-empty segments of charset text.
    """
    def visit(node: Branch, is_root: bool):
        if not is_root:
            vocab.field_open(node.name)
            if not node.children:
                raise SchemaError(f"field {node.name!r} has no children; use Leaf([])")
        prev_leaf = False
        for child in node.children:
            if isinstance(child, Leaf):
                if prev_leaf:
                    raise SchemaError("adjacent leaves are not representable")
                if not child.segments and (is_root or len(node.children) > 1):
                    raise SchemaError("empty leaf must be the only child of a field")
                for seg in child.segments:
                    if not seg or " " in seg:
                        raise SchemaError(f"bad segment {seg!r}")
                    vocab.encode_text(seg)
                prev_leaf = True
            elif isinstance(child, Branch):
                if child.name == ROOT:
                    raise SchemaError("nested root branch")
                visit(child, False)
                prev_leaf = False
            else:
                raise SchemaError(f"not a tree node: {child!r}")

    visit(as_root(tree), True)


def _emit(node: Node, vocab: Vocabulary, out: list[int]) -> None:
    if isinstance(node, Leaf):
        for seg in node.segments:
            out.append(vocab.id_of(OCR_OPEN))
            out.extend(vocab.encode_text(seg))
            out.append(vocab.id_of(OCR_CLOSE))
        return
    named = node.name != ROOT
    if named:
        out.append(vocab.field_open(node.name))
    for child in node.children:
        _emit(child, vocab, out)
    if named:
        out.append(vocab.field_close(node.name))


def serialize_tree(tree: Node | Sequence[Node], vocab: Vocabulary) -> list[int]:
    root = as_root(tree)
    validate_tree(root, vocab)
    out: list[int] = []
    _emit(root, vocab, out)
    return out


def serialize_words(words: Sequence[str], vocab: Vocabulary) -> list[int]:
    """OCR-task target: every word as its own ``<ocr>`` span, in the given order."""
    if not words:
        return []
    return serialize_tree(Branch(ROOT, [Leaf(words)]), vocab)


def reading_order(elements: Sequence[tuple[str, Sequence[float]]]) -> list[tuple[str, tuple]]:
    """Sort (category, box) pairs top-to-bottom then left-to-right by box top-left."""
    return sorted(((c, tuple(b)) for c, b in elements), key=lambda e: (e[1][1], e[1][0], e[0]))


def serialize_layout(elements: Sequence[tuple[str, Sequence[float]]], vocab: Vocabulary) -> list[int]:
    out: list[int] = []
    for cat, _ in reading_order(elements):
        out += [vocab.id_of(LAYOUT_OPEN), vocab.category(cat), vocab.id_of(LAYOUT_CLOSE)]
    return out


def serialize_scene(objects: Sequence[tuple[str, Sequence[float]]],
                    words: Sequence[tuple[str, Sequence[float]]], vocab: Vocabulary) -> list[int]:
    out: list[int] = []
    for cat, _ in objects:
        out += [vocab.id_of(OBJ_OPEN), vocab.category(cat), vocab.id_of(OBJ_CLOSE)]
    for text, _ in words:
        text = filter_charset(text).replace(" ", "")
        if text:
            out += [vocab.id_of(OCR_OPEN), *vocab.encode_text(text), vocab.id_of(OCR_CLOSE)]
    return out


def serialize_class(label: str, vocab: Vocabulary) -> list[int]:
    return [vocab.category(label)]


def wrap_instances(seqs: Sequence[Sequence[int]], vocab: Vocabulary) -> list[int]:
    o, c = vocab.id_of(INST_OPEN), vocab.id_of(INST_CLOSE)
    out: list[int] = []
    for s in seqs:
        out.append(o)
        out.extend(s)
        out.append(c)
    return out


def unwrap_instances(seq: Sequence[int], vocab: Vocabulary) -> tuple[list[list[int]], list[int], list[str]]:
    """Split a wrapped sequence into per-instance sequences.

    Returns (instances, offsets, diagnostics) where ``offsets[k]`` is the index
    in ``seq`` of the first token of instance k. Tokens outside any instance are
    dropped; an unterminated instance is closed at the end of the sequence.
    """
    o, c = vocab.id_of(INST_OPEN), vocab.id_of(INST_CLOSE)
    instances: list[list[int]] = []
    offsets: list[int] = []
    diags: list[str] = []
    cur: list[int] | None = None
    for i, t in enumerate(seq):
        if t == o:
            if cur is not None:
                diags.append(f"{i}: nested <instance>, closing previous")
                instances.append(cur)
            cur = []
            offsets.append(i + 1)
        elif t == c:
            if cur is None:
                diags.append(f"{i}: stray </instance> dropped")
            else:
                instances.append(cur)
                cur = None
        elif cur is None:
            diags.append(f"{i}: token outside instance dropped")
        else:
            cur.append(t)
    if cur is not None:
        diags.append("unterminated <instance> closed at end")
        instances.append(cur)
    return instances, offsets, diags


# --------------------------------------------------------------------------
# deserialization
# --------------------------------------------------------------------------

@dataclass
class Span:
    """One closed, coordinate-bearing element of a decoded sequence."""

    position: int  # index of its trigger token
    text: str = ""
    path: str = ""
    category: str | None = None
    kind: str = "ocr"  # ocr | layout | obj
    instance: int | None = None


@dataclass
class Decoded:
    tree: Branch = field(default_factory=lambda: Branch(ROOT))
    trigger_positions: list[int] = field(default_factory=list)
    spans: list[Span] = field(default_factory=list)
    diagnostics: list[str] = field(default_factory=list)
    instances: list[Branch] | None = None
    elements: list[tuple[str, int]] | None = None  # (category, trigger position)
    label: str | None = None


def _classify(tok: str):
    if tok.startswith("<field:"):
        return "open", tok[7:-1]
    if tok.startswith("</field:"):
        return "close", tok[8:-1]
    if tok.startswith("<cat:"):
        return "cat", tok[5:-1]
    if len(tok) == 1:
        return "char", tok
    return "special", tok


class _TreeBuilder:
    def __init__(self):
        self.stack: list[tuple[str, list]] = [(ROOT, [])]

    def path(self) -> str:
        return "/".join(name for name, _ in self.stack[1:])

    def add_segment(self, seg: str):
        children = self.stack[-1][1]
        if children and isinstance(children[-1], list):
            children[-1].append(seg)
        else:
            children.append([seg])

    def open(self, name: str):
        self.stack.append((name, []))

    def close_top(self):
        name, children = self.stack.pop()
        self.stack[-1][1].append(_make_branch(name, children))

    def finish(self) -> Branch:
        while len(self.stack) > 1:
            self.close_top()
        return Branch(ROOT, [_to_node(c) for c in self.stack[0][1]])


def _to_node(c) -> Node:
    return Leaf(c) if isinstance(c, list) else c


def _make_branch(name: str, children: list) -> Branch:
    if not children:
        return Branch(name, [Leaf()])
    return Branch(name, [_to_node(c) for c in children])


def deserialize_sequence(seq: Sequence[int], vocab: Vocabulary, task: str = "parse",
                         offset: int = 0) -> Decoded:
    """Best-effort inverse of :func:`serialize_tree`; never raises on token ids.

    Unmatched close tags are dropped, unmatched open tags are closed when their
    enclosing scope ends. Every recovery leaves a message in ``diagnostics``.
    ``offset`` shifts reported positions (used for instance sub-sequences).
    """
    triggers = vocab.triggers.get(task, frozenset([OCR_CLOSE]))
    out = Decoded()
    builder = _TreeBuilder()
    span_chars: list[str] | None = None
    span_start = 0

    def abandon_span(i: int, why: str):
        nonlocal span_chars
        if span_chars is not None:
            out.diagnostics.append(f"{i + offset}: unterminated <ocr> span dropped ({why})")
            span_chars = None

    for i, raw in enumerate(seq):
        pos = i + offset
        try:
            tok = vocab.token_of(int(raw))
        except SchemaError:
            out.diagnostics.append(f"{pos}: invalid id {raw} dropped")
            continue
        if tok in triggers:
            out.trigger_positions.append(pos)
        kind, val = _classify(tok)
        if tok == OCR_OPEN:
            abandon_span(i, "new <ocr>")
            span_chars, span_start = [], i
        elif tok == OCR_CLOSE:
            if span_chars is None:
                out.diagnostics.append(f"{pos}: stray </ocr> dropped")
            elif not span_chars:
                out.diagnostics.append(f"{pos}: empty <ocr> span dropped")
                span_chars = None
            else:
                text = "".join(span_chars)
                builder.add_segment(text)
                out.spans.append(Span(pos, text=text, path=builder.path()))
                span_chars = None
        elif kind == "char":
            if span_chars is None:
                out.diagnostics.append(f"{pos}: character outside <ocr> dropped")
            elif val == " ":
                out.diagnostics.append(f"{pos}: space inside segment dropped")
            else:
                span_chars.append(val)
        elif kind == "open":
            abandon_span(i, "field tag")
            builder.open(val)
        elif kind == "close":
            abandon_span(i, "field tag")
            names = [name for name, _ in builder.stack[1:]]
            if val not in names:
                out.diagnostics.append(f"{pos}: unmatched </field:{val}> dropped")
                continue
            while builder.stack[-1][0] != val:
                out.diagnostics.append(f"{pos}: <field:{builder.stack[-1][0]}> implicitly closed")
                builder.close_top()
            builder.close_top()
        elif tok == EOS:
            abandon_span(i, "end of sequence")
            break
        elif tok == PAD:
            continue
        else:
            abandon_span(i, tok)
            out.diagnostics.append(f"{pos}: unexpected token {tok} dropped")
    abandon_span(len(seq), "end of sequence")
    if len(builder.stack) > 1:
        out.diagnostics.append(f"{len(builder.stack) - 1} unclosed field(s) closed at end")
    out.tree = builder.finish()
    return out


def _decode_elements(seq: Sequence[int], vocab: Vocabulary, task: str) -> Decoded:
    """Layout (``<layout><cat></layout>``) and scene (objects, then words) grammars."""
    triggers = vocab.triggers[task]
    out = Decoded(elements=[])
    open_tok, close_tok = (LAYOUT_OPEN, LAYOUT_CLOSE) if task == "layout" else (OBJ_OPEN, OBJ_CLOSE)
    kind_name = "layout" if task == "layout" else "obj"
    state = None  # None | "elem" | ("cat", name) | "ocr"
    chars: list[str] = []
    words: list[str] = []
    for i, raw in enumerate(seq):
        try:
            tok = vocab.token_of(int(raw))
        except SchemaError:
            out.diagnostics.append(f"{i}: invalid id {raw} dropped")
            continue
        if tok in triggers:
            out.trigger_positions.append(i)
        kind, val = _classify(tok)
        if tok == EOS:
            break
        if tok == PAD:
            continue
        if tok == open_tok:
            if state is not None:
                out.diagnostics.append(f"{i}: unterminated element dropped")
            state = "elem"
        elif kind == "cat" and state == "elem":
            state = ("cat", val)
        elif tok == close_tok:
            if isinstance(state, tuple):
                out.elements.append((state[1], i))
                out.spans.append(Span(i, category=state[1], kind=kind_name))
            else:
                out.diagnostics.append(f"{i}: stray {close_tok} dropped")
            state = None
        elif task == "scene" and tok == OCR_OPEN:
            if state is not None:
                out.diagnostics.append(f"{i}: unterminated element dropped")
            state, chars = "ocr", []
        elif task == "scene" and tok == OCR_CLOSE:
            if state == "ocr" and chars:
                text = "".join(chars)
                words.append(text)
                out.spans.append(Span(i, text=text, kind="ocr"))
            else:
                out.diagnostics.append(f"{i}: stray </ocr> dropped")
            state = None
        elif kind == "char" and state == "ocr" and val != " ":
            chars.append(val)
        else:
            out.diagnostics.append(f"{i}: unexpected token {tok} dropped")
    if state is not None:
        out.diagnostics.append("unterminated element at end dropped")
    if words:
        out.tree = Branch(ROOT, [Leaf(words)])
    return out


def decode_task(seq: Sequence[int], vocab: Vocabulary, task: str) -> Decoded:
    """Deserialize a decoded sequence according to the grammar of ``task``."""
    seq = list(seq)
    if task in ("ocr", "parse"):
        return deserialize_sequence(seq, vocab, task)
    if task == "multi":
        out = Decoded(instances=[])
        if vocab.eos_id in seq:
            seq = seq[:seq.index(vocab.eos_id)]
        trig = vocab.trigger_ids("multi")
        out.trigger_positions = [i for i, t in enumerate(seq) if t in trig]
        parts, offsets, diags = unwrap_instances(seq, vocab)
        out.diagnostics += diags
        for k, (part, off) in enumerate(zip(parts, offsets)):
            d = deserialize_sequence(part, vocab, "multi", offset=off)
            out.instances.append(d.tree)
            out.diagnostics += d.diagnostics
            for s in d.spans:
                s.instance = k
                out.spans.append(s)
        return out
    if task in ("layout", "scene"):
        return _decode_elements(seq, vocab, task)
    if task == "class":
        out = Decoded()
        for i, t in enumerate(seq):
            if not 0 <= t < len(vocab):
                continue
            kind, val = _classify(vocab.tokens[t])
            if kind == "cat" and out.label is None:
                out.label = val
            elif vocab.tokens[t] == EOS:
                break
            elif vocab.tokens[t] != PAD:
                out.diagnostics.append(f"{i}: unexpected token {vocab.tokens[t]} dropped")
            if vocab.tokens[t] in vocab.triggers["class"]:
                out.trigger_positions.append(i)
        return out
    raise SchemaError(f"unknown task {task!r}")


# --------------------------------------------------------------------------
# JSON encoding of trees
# --------------------------------------------------------------------------

def tree_to_json(node: Node):
    """Ordered JSON form: root -> list, branch -> {"field", "children"}, leaf -> {"text"}."""
    if isinstance(node, Leaf):
        return {"text": list(node.segments)}
    if node.name == ROOT:
        return [tree_to_json(c) for c in node.children]
    return {"field": node.name, "children": [tree_to_json(c) for c in node.children]}


def tree_from_json(obj) -> Node:
    if isinstance(obj, list):
        return Branch(ROOT, [tree_from_json(c) for c in obj])
    if "text" in obj:
        return Leaf(obj["text"])
    return Branch(obj["field"], [tree_from_json(c) for c in obj["children"]])


def leaf_segments(tree: Node) -> list[tuple[str, str]]:
    """(field path, segment) for every segment, depth first."""
    out: list[tuple[str, str]] = []

    def visit(node: Node, path: tuple[str, ...]):
        if isinstance(node, Leaf):
            out.extend(("/".join(path), s) for s in node.segments)
        else:
            sub = path if node.name == ROOT else path + (node.name,)
            for c in node.children:
                visit(c, sub)

    visit(tree, ())
    return out
