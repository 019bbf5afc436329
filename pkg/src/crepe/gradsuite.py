"""Finite-difference gradient suites for every kernel op and a full model forward pass."""
from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np
import torch

from . import nnkernel as K
from .model import CrepeConfig, init_params
from .synthgen import derive_seed
from .token_schema import Vocabulary
from .training import LossWeights, TrainingSample, collate, diou_loss, forward_loss

F64 = torch.float64
TOLERANCE = 1e-4


@dataclass
class SuiteResult:
    name: str
    max_rel_error: float
    where: str
    seconds: float

    @property
    def ok(self) -> bool:
        return self.max_rel_error <= TOLERANCE


def _leaf(gen: torch.Generator, *shape, lo: float = -1.0, hi: float = 1.0, away: float = 0.0) -> torch.Tensor:
    """Uniform f64 leaf tensor; ``away`` keeps entries at least that far from zero (for kinks)."""
    x = torch.rand(*shape, generator=gen, dtype=F64) * (hi - lo) + lo
    if away:
        x = torch.where(x.abs() < away, torch.sign(x + 1e-12) * away, x)
    return x.requires_grad_(True)


def _weights(gen: torch.Generator, out: torch.Tensor) -> torch.Tensor:
    # a fixed random projection turns any output into a scalar with non-trivial upstream gradient
    return torch.randn(out.shape, generator=gen, dtype=F64)


def op_cases(seed: int = 0) -> dict[str, tuple[Callable[..., torch.Tensor], dict[str, torch.Tensor]]]:
    g = torch.Generator().manual_seed(seed)
    ids = torch.tensor([[0, 3, 1], [2, 2, 4]])
    tgt = torch.tensor([1, 0, 3, 2, 4])
    ign = torch.tensor([0, 1, 0, 0, 1])
    mask = torch.tensor([[1, 0, 1, 1], [1, 1, 0, 1], [0, 1, 1, 1]], dtype=torch.bool)
    box_lo = torch.rand(6, 2, generator=g, dtype=F64) * 0.5
    gt_lo = torch.rand(6, 2, generator=g, dtype=F64) * 0.5
    cases = {
        "matmul": (lambda a, b: K.matmul(a, b), {"a": _leaf(g, 2, 3, 4), "b": _leaf(g, 4, 5)}),
        "matmul_batched": (lambda a, b: K.matmul(a, b), {"a": _leaf(g, 2, 3, 4), "b": _leaf(g, 2, 4, 2)}),
        "add": (lambda a, b: K.add(a, b), {"a": _leaf(g, 3, 4), "b": _leaf(g, 4)}),
        "mul": (lambda a, b: K.mul(a, b), {"a": _leaf(g, 3, 4), "b": _leaf(g, 3, 4)}),
        "relu": (lambda x: K.relu(x), {"x": _leaf(g, 4, 5, away=0.05)}),
        "gelu": (lambda x: K.gelu(x), {"x": _leaf(g, 4, 5, lo=-3, hi=3)}),
        "sigmoid": (lambda x: K.sigmoid(x), {"x": _leaf(g, 4, 5, lo=-4, hi=4)}),
        "rowwise_sigmoid": (lambda x: K.rowwise_sigmoid(x), {"x": _leaf(g, 4, 5, lo=-4, hi=4)}),
        "softmax": (lambda x: K.softmax(x), {"x": _leaf(g, 3, 6, lo=-2, hi=2)}),
        "layer_norm": (lambda x, gm, bt: K.layer_norm(x, gm, bt),
                       {"x": _leaf(g, 3, 6), "gm": _leaf(g, 6), "bt": _leaf(g, 6)}),
        "embedding_lookup": (lambda t: K.embedding_lookup(t, ids), {"t": _leaf(g, 5, 3)}),
        "concat": (lambda a, b: K.concat([a, b], axis=1), {"a": _leaf(g, 2, 3), "b": _leaf(g, 2, 2)}),
        "slice": (lambda x: K.slice(x, 1, 1, 4), {"x": _leaf(g, 3, 5)}),
        "transpose": (lambda x: K.transpose(x, 0, 2), {"x": _leaf(g, 2, 3, 4)}),
        "reshape": (lambda x: K.reshape(x, (4, 6)), {"x": _leaf(g, 2, 3, 4)}),
        "linear": (lambda x, w, b: K.linear(x, w, b), {"x": _leaf(g, 3, 4), "w": _leaf(g, 4, 2), "b": _leaf(g, 2)}),
        "rowwise_linear": (lambda x, w, b: K.rowwise_linear(x, w, b),
                           {"x": _leaf(g, 3, 4), "w": _leaf(g, 4, 2), "b": _leaf(g, 2)}),
        "attention_masked": (lambda q, k, v: K.scaled_dot_attention(q, k, v, mask),
                             {"q": _leaf(g, 2, 3, 4), "k": _leaf(g, 2, 4, 4), "v": _leaf(g, 2, 4, 4)}),
        "attention_causal": (lambda q, k, v: K.scaled_dot_attention(q, k, v, causal=True),
                             {"q": _leaf(g, 2, 4, 4), "k": _leaf(g, 2, 4, 4), "v": _leaf(g, 2, 4, 4)}),
        "cross_entropy": (lambda z: K.cross_entropy(z, tgt, ign), {"z": _leaf(g, 5, 6, lo=-2, hi=2)}),
        "diou_loss": (lambda lo, sz: diou_loss(torch.cat([lo, lo + sz], -1),
                                               torch.cat([gt_lo, gt_lo + 0.3], -1)).sum(),
                      {"lo": box_lo.clone().requires_grad_(True),
                       "sz": (torch.rand(6, 2, generator=g, dtype=F64) * 0.4 + 0.1).requires_grad_(True)}),
    }
    out = {}
    for name, (fn, inputs) in cases.items():
        with torch.no_grad():
            w = _weights(g, fn(**inputs))
        out[name] = (lambda fn=fn, inputs=inputs, w=w: (fn(**inputs) * w).sum(), inputs)
    return out


def tiny_model_case(seed: int = 0, vocab: Vocabulary | None = None):
    """Two-sample batch (one coordinate-supervised, one not) on a small f64 model."""
    vocab = vocab or Vocabulary.load()
    cfg = CrepeConfig(image_size=16, patch_size=8, d_model=8, n_heads=2, encoder_layers=1,
                      shared_decoder_layers=1, head_decoder_layers=1, ffn_dim=16, max_seq_len=16,
                      vocab_size=len(vocab), coord_hidden=8)
    params = init_params(cfg, derive_seed(seed, "gradcheck/model"), dtype=F64)
    rng = np.random.default_rng(derive_seed(seed, "gradcheck/data"))
    seq = [vocab.id_of("<ocr>")] + vocab.encode_text("ab") + [vocab.id_of("</ocr>")]
    trig = [int(t in vocab.trigger_ids("ocr")) for t in seq]
    samples = [
        TrainingSample(rng.integers(0, 256, (16, 16), dtype=np.uint8), "ocr", seq,
                       [(0.2, 0.2, 0.6, 0.25, 0.58, 0.5, 0.18, 0.45)], trig, True, "a"),
        TrainingSample(rng.integers(0, 256, (16, 16), dtype=np.uint8), "parse", seq + seq,
                       None, trig + trig, False, "b"),
    ]
    batch = collate(samples, vocab, mask_trigger_ce=True, dtype=F64)
    for p in params.values():
        p.requires_grad_(True)
    return (lambda: forward_loss(params, batch, cfg, LossWeights())[0]), params


def run_suites(seed: int = 0, samples_per_tensor: int = 3, h: float = 1e-4,
               only: str | None = None) -> list[SuiteResult]:
    results = []
    suites = dict(op_cases(seed))
    suites["model_forward"] = tiny_model_case(seed)
    for name, (fn, inputs) in suites.items():
        if only and only not in name:
            continue
        t0 = time.perf_counter()
        spt = samples_per_tensor if name == "model_forward" else None
        err, where = K.check_gradients(fn, inputs, h=h, samples_per_tensor=spt, seed=seed)
        results.append(SuiteResult(name, err, where, time.perf_counter() - t0))
    return results
