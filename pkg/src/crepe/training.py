"""Losses, trigger-masked supervision, mixed batches and the training loops."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterator, Sequence

import numpy as np
import torch

from . import nnkernel as K
from .model import (CrepeConfig, ForwardOutput, coord_bbox, coord_quad, decode_teacher_forced,
                    encode, image_tensor, init_params, load_checkpoint, read_tensor_file,
                    save_checkpoint, write_tensor_file)
from .synthgen import SynthDoc, bbox_to_quad, derive_seed, quad_envelope
from .token_schema import (Vocabulary, leaf_segments, reading_order, serialize_class,
                           serialize_layout, serialize_scene, serialize_tree, serialize_words,
                           wrap_instances)

log = logging.getLogger(__name__)
Tensor = torch.Tensor


class StreamExhausted(RuntimeError):
    pass


@dataclass
class TrainingSample:
    image: np.ndarray
    task: str
    target_seq: list[int]  # without task token, without </s>
    coord_targets: list[tuple[float, ...]] | None
    trigger_mask: list[int]
    has_coords: bool
    doc_id: str = ""

    def __post_init__(self):
        if self.has_coords and (self.coord_targets is None
                                or len(self.coord_targets) != sum(self.trigger_mask)):
            raise ValueError("coordinate targets must align one-to-one with trigger positions")


def _match_words(doc: SynthDoc, segments: Sequence[tuple[str, str]]) -> list[tuple[float, ...] | None]:
    """Quad of each (field path, text) leaf, taking words in order and never reusing one."""
    used = [False] * len(doc.words)
    out = []
    for path, text in segments:
        for i, w in enumerate(doc.words):
            if not used[i] and w.text == text and w.field == path:
                used[i] = True
                out.append(w.quad)
                break
        else:
            out.append(None)
    return out


def target_for(doc: SynthDoc, vocab: Vocabulary, task: str | None = None) -> tuple[list[int], list[tuple | None]]:
    """Target token ids and per-trigger quads (None where unknown) for a document."""
    task = task or doc.task
    if task == "ocr":
        seq = serialize_words([w.text for w in doc.words], vocab)
        quads = [w.quad for w in doc.words]
    elif task == "parse":
        seq = serialize_tree(doc.parse, vocab)
        quads = _match_words(doc, leaf_segments(doc.parse))
    elif task == "multi":
        seqs, segs = [], []
        for k, tree in enumerate(doc.instances):
            seqs.append(serialize_tree(tree, vocab))
            segs += leaf_segments(tree)
        seq = wrap_instances(seqs, vocab)
        quads = _match_words(doc, segs)
    elif task == "layout":
        elems = reading_order(doc.layout)
        seq = serialize_layout(elems, vocab)
        quads = [bbox_to_quad(b) for _, b in elems]
    elif task == "scene":
        objs = reading_order(doc.layout or [])
        words = [(w.text, w.quad) for w in doc.words]
        seq = serialize_scene(objs, words, vocab)
        quads = [bbox_to_quad(b) for _, b in objs] + [q for _, q in words]
    elif task == "class":
        seq = serialize_class(doc.label, vocab)
        quads = []
    else:
        raise ValueError(f"unknown task {task!r}")
    return seq, quads


def make_sample(doc: SynthDoc, vocab: Vocabulary, task: str | None = None, weak: bool = False,
                doc_id: str = "") -> TrainingSample:
    task = task or doc.task
    seq, quads = target_for(doc, vocab, task)
    trig = vocab.trigger_ids(task)
    mask = [int(t in trig) for t in seq]
    has = not weak and all(q is not None for q in quads)
    if has and len(quads) != sum(mask):
        raise ValueError(f"{doc_id}: {len(quads)} coordinates for {sum(mask)} triggers")
    return TrainingSample(doc.image, task, seq, [tuple(q) for q in quads] if has else None,
                          mask, has, doc_id)


# --------------------------------------------------------------------------
# batches
# --------------------------------------------------------------------------

@dataclass
class Batch:
    images: Tensor  # (B, H, W)
    inputs: Tensor  # (B, T) task token + target
    targets: Tensor  # (B, T) target + </s>, padded
    ignore: Tensor  # (B, T) bool
    trig_b: Tensor  # (n,) batch index of supervised triggers
    trig_t: Tensor  # (n,) position of supervised triggers
    quad_gt: Tensor  # (n, 8)
    bbox_gt: Tensor  # (n, 4)
    samples: list[TrainingSample] = field(repr=False, default_factory=list)


def collate(samples: Sequence[TrainingSample], vocab: Vocabulary, mask_trigger_ce: bool = True,
            dtype: torch.dtype = torch.float32) -> Batch:
    """Pad to the longest sequence; pads and (on coordinate-free samples) trigger targets are ignored."""
    T = max(len(s.target_seq) + 1 for s in samples)
    B = len(samples)
    inputs = torch.full((B, T), vocab.pad_id, dtype=torch.long)
    targets = torch.full((B, T), vocab.pad_id, dtype=torch.long)
    ignore = torch.ones((B, T), dtype=torch.bool)
    tb, tt, quads = [], [], []
    for b, s in enumerate(samples):
        n = len(s.target_seq)
        inputs[b, :n + 1] = torch.tensor([vocab.task_id(s.task)] + s.target_seq)
        targets[b, :n + 1] = torch.tensor(s.target_seq + [vocab.eos_id])
        ignore[b, :n + 1] = False
        if mask_trigger_ce and not s.has_coords:
            for t, m in enumerate(s.trigger_mask):
                if m:
                    ignore[b, t] = True
        if s.has_coords:
            k = 0
            for t, m in enumerate(s.trigger_mask):
                if m:
                    tb.append(b)
                    tt.append(t)
                    quads.append(s.coord_targets[k])
                    k += 1
    quad_gt = torch.tensor(quads, dtype=dtype).reshape(-1, 8)
    bbox_gt = torch.tensor([quad_envelope(q) for q in quads], dtype=dtype).reshape(-1, 4)
    images = image_tensor(np.stack([s.image for s in samples]), dtype)
    return Batch(images, inputs, targets, ignore, torch.tensor(tb, dtype=torch.long),
                 torch.tensor(tt, dtype=torch.long), quad_gt, bbox_gt, list(samples))


class SampleStream:
    """Endless reshuffled pass over a fixed sample list; the shuffle of epoch e is seeded by (seed, name, e)."""

    def __init__(self, samples: Sequence[TrainingSample], seed: int, name: str, position: int = 0):
        self.samples = list(samples)
        self.seed = seed
        self.name = name
        self.position = 0
        self._order: list[int] = []
        self._epoch = -1
        for _ in range(position):
            next(self)

    def __iter__(self) -> Iterator[TrainingSample]:
        return self

    def __next__(self) -> TrainingSample:
        if not self.samples:
            raise StreamExhausted(f"stream {self.name!r} is empty")
        n = len(self.samples)
        epoch, k = divmod(self.position, n)
        if epoch != self._epoch:
            rng = np.random.default_rng(derive_seed(self.seed, f"{self.name}/epoch/{epoch}"))
            self._order = rng.permutation(n).tolist()
            self._epoch = epoch
        self.position += 1
        return self.samples[self._order[k]]


def build_mixed_batch(parse_stream: Iterator[TrainingSample], ocr_stream: Iterator[TrainingSample],
                      ratio: tuple[int, int]) -> list[TrainingSample]:
    """``ratio[0]`` parsing samples interleaved among ``ratio[1]`` OCR samples."""
    n_parse, n_ocr = ratio
    if n_parse < 0 or n_ocr < 0 or n_parse + n_ocr == 0:
        raise ValueError(f"bad ratio {ratio}")
    try:
        parse = [next(parse_stream) for _ in range(n_parse)]
        ocr = [next(ocr_stream) for _ in range(n_ocr)]
    except StopIteration:
        raise StreamExhausted("sample stream ran dry") from None
    total = n_parse + n_ocr
    slots = {int(round((i + 0.5) * total / n_parse - 0.5)) for i in range(n_parse)} if n_parse else set()
    batch, pi, oi = [], iter(parse), iter(ocr)
    for pos in range(total):
        batch.append(next(pi) if pos in slots else next(oi))
    return batch


# --------------------------------------------------------------------------
# losses
# --------------------------------------------------------------------------

def diou_loss(pred: Tensor, gt: Tensor) -> Tensor:
    """Per-pair Distance-IoU loss for canonical boxes ``(..., 4)``.

    1 - IoU + |c_pred - c_gt|^2 / diag(enclosing)^2. A zero-area union counts
    as IoU 1 only for identical boxes; a zero enclosing diagonal drops the
    distance term.
    """
    px0, py0, px1, py1 = pred.unbind(-1)
    gx0, gy0, gx1, gy1 = gt.unbind(-1)
    iw = (torch.minimum(px1, gx1) - torch.maximum(px0, gx0)).clamp(min=0)
    ih = (torch.minimum(py1, gy1) - torch.maximum(py0, gy0)).clamp(min=0)
    inter = iw * ih
    union = (px1 - px0) * (py1 - py0) + (gx1 - gx0) * (gy1 - gy0) - inter
    same = (pred == gt).all(-1)
    safe_union = torch.where(union > 0, union, torch.ones_like(union))
    iou = torch.where(union > 0, inter / safe_union, same.to(pred.dtype))
    rho2 = ((px0 + px1 - gx0 - gx1) / 2) ** 2 + ((py0 + py1 - gy0 - gy1) / 2) ** 2
    cw = torch.maximum(px1, gx1) - torch.minimum(px0, gx0)
    ch = torch.maximum(py1, gy1) - torch.minimum(py0, gy0)
    c2 = cw ** 2 + ch ** 2
    dist = torch.where(c2 > 0, rho2 / torch.where(c2 > 0, c2, torch.ones_like(c2)), torch.zeros_like(c2))
    return 1 - iou + dist


@dataclass
class CoordLoss:
    l1_quad: Tensor
    l1_bbox: Tensor
    diou: Tensor

    @property
    def l1(self) -> Tensor:
        return self.l1_quad + self.l1_bbox


def coordinate_loss(out: ForwardOutput, batch: Batch) -> CoordLoss:
    """L1 on both branches and DIoU on the box branch, averaged over supervised triggers only."""
    if batch.trig_b.numel() == 0:
        zero = torch.zeros((), dtype=out.coord_states.dtype)
        return CoordLoss(zero, zero, zero)
    states = out.coord_states[batch.trig_b, batch.trig_t]
    quad = coord_quad(states, out.params)
    bbox = coord_bbox(states, out.params)
    return CoordLoss((quad - batch.quad_gt).abs().mean(), (bbox - batch.bbox_gt).abs().mean(),
                     diou_loss(bbox, batch.bbox_gt).mean())


def sequence_loss(out: ForwardOutput, batch: Batch) -> Tensor:
    V = out.logits.shape[-1]
    return K.cross_entropy(out.logits.reshape(-1, V), batch.targets.reshape(-1), batch.ignore.reshape(-1))


@dataclass
class LossWeights:
    seq: float = 1.0
    l1: float = 1.0
    diou: float = 1.0


@dataclass
class LossReport:
    seq_loss: float
    l1_loss: float
    diou_loss: float
    total: float
    weights: LossWeights = field(default_factory=LossWeights)


def forward_loss(params: dict, batch: Batch, cfg: CrepeConfig,
                 weights: LossWeights = LossWeights()) -> tuple[Tensor, LossReport, ForwardOutput]:
    memory = encode(batch.images, params, cfg)
    out = decode_teacher_forced(memory, batch.inputs, params, cfg)
    seq = sequence_loss(out, batch)
    c = coordinate_loss(out, batch)
    total = weights.seq * seq + weights.l1 * c.l1 + weights.diou * c.diou
    report = LossReport(float(seq.detach()), float(c.l1.detach()), float(c.diou.detach()), float(total.detach()), weights)
    return total, report, out


# --------------------------------------------------------------------------
# loops
# --------------------------------------------------------------------------

@dataclass
class TrainConfig:
    """Desk-scale defaults. Full-scale reference: lr 3e-5, batch 4, 100k iterations."""

    task: str = "ocr"
    steps: int = 200
    lr: float = 3e-4
    batch: int = 8
    seed: int = 0
    ratio: tuple[int, int] = (1, 4)  # (parse, ocr) per mixed batch
    weak: bool = False
    mask_trigger_ce: bool = True
    lambda_seq: float = 1.0
    lambda_l1: float = 1.0
    lambda_diou: float = 1.0
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    checkpoint_every: int = 0
    out_dir: str | None = None
    corpus: str | None = None
    ocr_corpus: str | None = None
    init_checkpoint: str | None = None

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        for k in ("ratio", "betas"):
            if k in known:
                known[k] = tuple(known[k])
        return cls(**known)

    @property
    def weights(self) -> LossWeights:
        return LossWeights(self.lambda_seq, self.lambda_l1, self.lambda_diou)


@dataclass
class TrainState:
    params: dict[str, Tensor]
    adam: K.AdamState
    step: int = 0
    streams: dict[str, SampleStream] = field(default_factory=dict)


def save_train_state(prefix: str | Path, state: TrainState, cfg: CrepeConfig, vocab: Vocabulary) -> None:
    """Model checkpoint at ``prefix.crpe``; optimizer moments and stream cursors at ``prefix.opt``."""
    prefix = str(prefix)
    save_checkpoint(prefix + ".crpe", state.params, cfg, vocab)
    tensors = {}
    for name in state.params:
        if name in state.adam.m:
            tensors["m/" + name] = state.adam.m[name]
            tensors["v/" + name] = state.adam.v[name]
    meta = {"step": state.step, "adam_step": state.adam.step,
            "streams": {k: s.position for k, s in state.streams.items()}}
    write_tensor_file(prefix + ".opt", tensors, meta, {})


def load_train_state(prefix: str | Path) -> tuple[TrainState, CrepeConfig, Vocabulary, dict]:
    prefix = str(prefix)
    params, cfg, vocab = load_checkpoint(prefix + ".crpe")
    tensors, meta, _ = read_tensor_file(prefix + ".opt")
    adam = K.AdamState(step=meta["adam_step"])
    for key, t in tensors.items():
        kind, name = key.split("/", 1)
        (adam.m if kind == "m" else adam.v)[name] = t
    return TrainState(params, adam, meta["step"]), cfg, vocab, meta["streams"]


LogFn = Callable[[dict], None]


def train_loop(state: TrainState, next_batch: Callable[[], list[TrainingSample]], vocab: Vocabulary,
               mcfg: CrepeConfig, tcfg: TrainConfig, log_fn: LogFn | None = None,
               ckpt_prefix: str | None = None) -> TrainState:
    """Teacher-forced Adam steps until ``tcfg.steps``; one log record per step."""
    names = list(state.params)
    while state.step < tcfg.steps:
        samples = next_batch()
        batch = collate(samples, vocab, tcfg.mask_trigger_ce)
        total, report, _ = forward_loss(state.params, batch, mcfg, tcfg.weights)
        if not math.isfinite(report.total):
            if ckpt_prefix:
                save_train_state(f"{ckpt_prefix}_nan_step{state.step}", state, mcfg, vocab)
            raise K.TrainingError(f"non-finite loss at step {state.step}: {report}")
        grads = torch.autograd.grad(total, [state.params[n] for n in names], allow_unused=True)
        K.adam_step(state.params, dict(zip(names, grads)), state.adam, tcfg.lr, tcfg.betas, tcfg.eps)
        state.step += 1
        if log_fn is not None:
            log_fn({"step": state.step, "seq_loss": report.seq_loss, "l1": report.l1_loss,
                    "diou": report.diou_loss, "total": report.total})
        if ckpt_prefix and tcfg.checkpoint_every and state.step % tcfg.checkpoint_every == 0:
            save_train_state(f"{ckpt_prefix}_step{state.step}", state, mcfg, vocab)
    return state


def new_state(mcfg: CrepeConfig, seed: int, params: dict | None = None) -> TrainState:
    if params is None:
        params = init_params(mcfg, derive_seed(seed, "model/init"))
    return TrainState(params, K.AdamState())


def pretrain_ocr(samples: Sequence[TrainingSample], vocab: Vocabulary, mcfg: CrepeConfig,
                 tcfg: TrainConfig, state: TrainState | None = None, log_fn: LogFn | None = None,
                 ckpt_prefix: str | None = None) -> TrainState:
    """Pure OCR batches under the ``<s_ocr>`` task token."""
    if any(s.task != "ocr" for s in samples):
        raise ValueError("pretraining corpus must contain only OCR samples")
    state = state or new_state(mcfg, tcfg.seed)
    stream = state.streams.get("ocr") or SampleStream(samples, tcfg.seed, "ocr")
    state.streams["ocr"] = stream
    return train_loop(state, lambda: [next(stream) for _ in range(tcfg.batch)], vocab, mcfg, tcfg,
                      log_fn, ckpt_prefix)


def finetune(samples: Sequence[TrainingSample], vocab: Vocabulary, mcfg: CrepeConfig, tcfg: TrainConfig,
             ocr_samples: Sequence[TrainingSample] = (), state: TrainState | None = None,
             log_fn: LogFn | None = None, ckpt_prefix: str | None = None) -> TrainState:
    """Supervised finetuning, or with ``tcfg.weak`` mixed parse/OCR batches at ``tcfg.ratio``.

    Mixed batches repeat the ratio as many whole times as fit in ``tcfg.batch`` (at least once).
    """
    state = state or new_state(mcfg, tcfg.seed)
    main = state.streams.get("main") or SampleStream(samples, tcfg.seed, "main")
    state.streams["main"] = main
    if tcfg.weak:
        ocr = state.streams.get("ocr") or SampleStream(ocr_samples, tcfg.seed, "ocr")
        state.streams["ocr"] = ocr
        if tcfg.ratio[1] > 0 and not ocr.samples:
            raise StreamExhausted("weak finetuning needs OCR samples for the configured ratio")
        k = max(1, tcfg.batch // sum(tcfg.ratio))
        ratio = (tcfg.ratio[0] * k, tcfg.ratio[1] * k)
        next_batch = lambda: build_mixed_batch(main, ocr, ratio)  # noqa: E731
    else:
        next_batch = lambda: [next(main) for _ in range(tcfg.batch)]  # noqa: E731
    return train_loop(state, next_batch, vocab, mcfg, tcfg, log_fn, ckpt_prefix)


def jsonl_logger(path: str | Path) -> LogFn:
    f = open(path, "a")

    def write(rec: dict):
        f.write(json.dumps(rec) + "\n")
        f.flush()

    return write
