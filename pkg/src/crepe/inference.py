"""Greedy decoding, batched coordinate prediction, and result assembly."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import torch

from . import token_schema as ts
from .model import CrepeConfig, coord_bbox, coord_quad, decode_teacher_forced, encode, image_tensor

Tensor = torch.Tensor


class AlignmentError(RuntimeError):
    """Coordinates and trigger tokens disagree in number (a bug, never user input)."""


@dataclass
class DecodeResult:
    tokens: list[int]  # emitted tokens, without the task token and without </s>
    trigger_steps: list[int]  # indices into ``tokens`` whose token is a trigger
    states: list[Tensor]  # coordinate-branch state recorded at each trigger step
    truncated: bool


def greedy_decode(images, task: str, params: dict, cfg: CrepeConfig,
                  vocab: ts.Vocabulary) -> list[DecodeResult]:
    """Argmax decoding from the task token for a batch of images (or one image).

    Every step recomputes the decoder over the full prefix. The coordinate
    state of the step that emits a trigger token is kept for that trigger.
    """
    x = images if isinstance(images, Tensor) else image_tensor(images, next(iter(params.values())).dtype)
    if x.dim() == 2:
        x = x.unsqueeze(0)
    B = x.shape[0]
    triggers = vocab.trigger_ids(task)
    eos = vocab.eos_id
    results = [DecodeResult([], [], [], True) for _ in range(B)]
    with torch.no_grad():
        memory = encode(x, params, cfg)
        seqs = torch.full((B, 1), vocab.task_id(task), dtype=torch.long)
        live = list(range(B))
        while live and seqs.shape[1] <= cfg.max_seq_len:
            out = decode_teacher_forced(memory[live], seqs[live], params, cfg)
            nxt = out.logits[:, -1].argmax(-1)
            step = seqs.shape[1] - 1
            column = torch.full((B,), vocab.pad_id, dtype=torch.long)
            still = []
            for j, b in enumerate(live):
                tok = int(nxt[j])
                column[b] = tok
                r = results[b]
                if tok == eos:
                    r.truncated = False
                    continue
                r.tokens.append(tok)
                if tok in triggers:
                    r.trigger_steps.append(step)
                    r.states.append(out.coord_states[j, -1].clone())
                still.append(b)
            seqs = torch.cat([seqs, column.unsqueeze(1)], dim=1)
            live = still
    return results


def predict_coordinates(states: Sequence[Tensor], params: dict) -> list[tuple[list[float], list[float]]]:
    """One batched FFN pass over all states; returns (quad, bbox) per state in input order."""
    if not states:
        return []
    with torch.no_grad():
        s = torch.stack(list(states))
        quads, boxes = coord_quad(s, params), coord_bbox(s, params)
    return [(q.tolist(), b.tolist()) for q, b in zip(quads, boxes)]


@dataclass
class StructuredResult:
    task: str
    tree: ts.Branch
    coords: list[tuple[int, list[float], list[float]]]  # (trigger index, quad, bbox)
    raw_tokens: list[int]
    diagnostics: list[str] = field(default_factory=list)
    spans: list[dict] = field(default_factory=list)
    instances: list[ts.Branch] | None = None
    label: str | None = None
    truncated: bool = False

    def parse_json(self):
        if self.task == "multi":
            return [ts.tree_to_json(t) for t in self.instances or []]
        if self.task == "class":
            return self.label
        return ts.tree_to_json(self.tree)

    def to_json(self, doc_id: str) -> dict:
        return {"id": doc_id, "task": self.task, "parse": self.parse_json(), "spans": self.spans,
                "truncated": self.truncated, "diagnostics": list(self.diagnostics)}


def assemble(tokens: Sequence[int], coords: Sequence[tuple], vocab: ts.Vocabulary, task: str,
             truncated: bool = False) -> StructuredResult:
    """Deserialize ``tokens`` and attach coordinates to spans in emission order.

    ``coords`` holds one (quad, bbox) per trigger token in ``tokens``. On a
    truncated sequence a dangling ``<ocr>`` span is closed so its text
    survives; it gets no coordinates because no trigger was emitted.
    """
    tokens = list(tokens)
    seq = tokens
    closed_dangling = False
    if truncated and task in ("ocr", "parse", "multi", "scene"):
        close = vocab.id_of(ts.OCR_CLOSE)
        opens = [i for i, t in enumerate(tokens) if t == vocab.id_of(ts.OCR_OPEN)]
        if opens and close not in tokens[opens[-1]:] and len(tokens) > opens[-1] + 1:
            seq = tokens + [close]
            closed_dangling = True
    dec = ts.decode_task(seq, vocab, task)
    positions = [p for p in dec.trigger_positions if p < len(tokens)]
    if len(positions) != len(coords):
        raise AlignmentError(f"{len(coords)} coordinates for {len(positions)} trigger tokens")
    by_pos = {p: (i, c) for i, (p, c) in enumerate(zip(positions, coords))}
    diags = list(dec.diagnostics)
    if truncated:
        diags.append("truncated at max_seq_len")
    if closed_dangling:
        diags.append(f"{len(tokens)}: dangling <ocr> span auto-closed without coordinates")
    spans = []
    for s in dec.spans:
        entry: dict = {}
        if s.category is not None:
            entry["category"] = s.category
        else:
            entry["text"] = s.text
            entry["field"] = s.path
        if s.instance is not None:
            entry["instance"] = s.instance
        hit = by_pos.get(s.position)
        entry["quad"], entry["bbox"] = (hit[1][0], hit[1][1]) if hit else (None, None)
        spans.append(entry)
    return StructuredResult(
        task=task, tree=dec.tree,
        coords=[(i, list(c[0]), list(c[1])) for i, c in enumerate(coords)],
        raw_tokens=tokens, diagnostics=diags, spans=spans,
        instances=dec.instances, label=dec.label, truncated=truncated)


def run(images, task: str, params: dict, cfg: CrepeConfig, vocab: ts.Vocabulary) -> list[StructuredResult]:
    """Decode a batch of images end to end."""
    out = []
    for r in greedy_decode(images, task, params, cfg, vocab):
        coords = predict_coordinates(r.states, params)
        out.append(assemble(r.tokens, coords, vocab, task, truncated=r.truncated))
    return out
