"""Patch-transformer encoder and a four-layer decoder split into two heads.

The decoder runs three shared blocks, then forks: the sequence branch adds one
block and a vocabulary projection, the coordinate branch adds one block whose
states feed two 3-layer FFNs (box: 4 outputs, quadrilateral: 8 outputs).
"""
from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np
import torch

from . import nnkernel as K
from .token_schema import Vocabulary

Tensor = torch.Tensor
MAGIC = b"CRPE"
FORMAT_VERSION = 1
COORD_EPS = 1e-6  # keeps sigmoid outputs strictly inside (0, 1) in f32

SEQ_PREFIX = "seq."
COORD_PREFIXES = ("coord.", "bbox.", "quad.")


class TruncationError(ValueError):
    pass


@dataclass
class CrepeConfig:
    image_size: int = 96
    patch_size: int = 8
    d_model: int = 64
    n_heads: int = 4
    encoder_layers: int = 2
    shared_decoder_layers: int = 3
    head_decoder_layers: int = 1
    ffn_dim: int = 256
    max_seq_len: int = 384
    vocab_size: int = 0
    coord_hidden: int = 64

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        if self.image_size % self.patch_size:
            raise ValueError("image_size must be divisible by patch_size")

    @property
    def n_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2


# --------------------------------------------------------------------------
# parameters
# --------------------------------------------------------------------------

def _block_shapes(prefix: str, cfg: CrepeConfig, cross: bool) -> Iterator[tuple[str, tuple]]:
    d, f = cfg.d_model, cfg.ffn_dim
    attns = ["self", "cross"] if cross else ["self"]
    for i, a in enumerate(attns):
        yield f"{prefix}.ln{i}.g", (d,)
        yield f"{prefix}.ln{i}.b", (d,)
        for m in ("q", "k", "v", "o"):
            yield f"{prefix}.{a}.w{m}", (d, d)
            yield f"{prefix}.{a}.b{m}", (d,)
    yield f"{prefix}.lnf.g", (d,)
    yield f"{prefix}.lnf.b", (d,)
    yield f"{prefix}.ffn.w1", (d, f)
    yield f"{prefix}.ffn.b1", (f,)
    yield f"{prefix}.ffn.w2", (f, d)
    yield f"{prefix}.ffn.b2", (d,)


def param_shapes(cfg: CrepeConfig) -> list[tuple[str, tuple]]:
    d, p, h = cfg.d_model, cfg.patch_size, cfg.coord_hidden
    shapes = [("enc.patch.w", (p * p, d)), ("enc.patch.b", (d,)), ("enc.pos", (cfg.n_patches, d))]
    for i in range(cfg.encoder_layers):
        shapes += _block_shapes(f"enc.{i}", cfg, cross=False)
    shapes += [("enc.ln.g", (d,)), ("enc.ln.b", (d,)),
               ("dec.tok", (cfg.vocab_size, d)), ("dec.pos", (cfg.max_seq_len, d))]
    for i in range(cfg.shared_decoder_layers):
        shapes += _block_shapes(f"dec.{i}", cfg, cross=True)
    for head in ("seq", "coord"):
        for i in range(cfg.head_decoder_layers):
            shapes += _block_shapes(f"{head}.{i}", cfg, cross=True)
        shapes += [(f"{head}.ln.g", (d,)), (f"{head}.ln.b", (d,))]
    shapes += [("seq.out.w", (d, cfg.vocab_size)), ("seq.out.b", (cfg.vocab_size,))]
    for branch, n_out in (("bbox", 4), ("quad", 8)):
        shapes += [(f"{branch}.0.w", (d, h)), (f"{branch}.0.b", (h,)),
                   (f"{branch}.1.w", (h, h)), (f"{branch}.1.b", (h,)),
                   (f"{branch}.2.w", (h, n_out)), (f"{branch}.2.b", (n_out,))]
    return shapes


def sincos_table(positions: np.ndarray, dim: int) -> np.ndarray:
    """Interleaved sine/cosine features of integer positions (odd ``dim`` drops the last cosine)."""
    n = (dim + 1) // 2
    ang = positions[:, None] / (10000.0 ** (np.arange(n) * 2.0 / max(dim, 1)))[None, :]
    out = np.empty((len(positions), 2 * n))
    out[:, 0::2], out[:, 1::2] = np.sin(ang), np.cos(ang)
    return out[:, :dim]


def position_init(cfg: CrepeConfig) -> tuple[np.ndarray, np.ndarray]:
    """Starting values for the learned encoder (row/column halves) and decoder position tables."""
    g = cfg.image_size // cfg.patch_size
    rows, cols = np.divmod(np.arange(g * g), g)
    half = cfg.d_model // 2
    enc = np.concatenate([sincos_table(rows, half), sincos_table(cols, cfg.d_model - half)], axis=1)
    dec = sincos_table(np.arange(cfg.max_seq_len), cfg.d_model)
    return enc, dec


def init_params(cfg: CrepeConfig, seed: int = 0, dtype: torch.dtype = torch.float32) -> dict[str, Tensor]:
    if cfg.vocab_size <= 0:
        raise ValueError("CrepeConfig.vocab_size must be set from the vocabulary")
    gen = torch.Generator().manual_seed(seed)
    enc_pos, dec_pos = position_init(cfg)
    params = {}
    for name, shape in param_shapes(cfg):
        leaf = name.rsplit(".", 1)[-1]
        if name == "enc.pos":
            t = torch.tensor(enc_pos, dtype=dtype)
        elif name == "dec.pos":
            t = torch.tensor(dec_pos, dtype=dtype)
        elif leaf == "g":
            t = torch.ones(shape, dtype=dtype)
        elif len(shape) == 1:
            t = torch.zeros(shape, dtype=dtype)
        elif name == "dec.tok":
            t = torch.randn(shape, generator=gen, dtype=dtype) * 0.02
        else:
            t = torch.randn(shape, generator=gen, dtype=dtype) / np.sqrt(shape[0])
        params[name] = t.requires_grad_(True)
    return params


def is_seq_param(name: str) -> bool:
    return name.startswith(SEQ_PREFIX)


def is_coord_param(name: str) -> bool:
    return name.startswith(COORD_PREFIXES)


# --------------------------------------------------------------------------
# forward
# --------------------------------------------------------------------------

def _attention(x: Tensor, kv: Tensor, P: dict, prefix: str, n_heads: int, causal: bool) -> Tensor:
    B, T, d = x.shape
    S = kv.shape[1]
    hd = d // n_heads

    def heads(t, n):
        return K.transpose(K.reshape(t, (B, n, n_heads, hd)), 1, 2)

    q = heads(K.linear(x, P[prefix + ".wq"], P[prefix + ".bq"]), T)
    k = heads(K.linear(kv, P[prefix + ".wk"], P[prefix + ".bk"]), S)
    v = heads(K.linear(kv, P[prefix + ".wv"], P[prefix + ".bv"]), S)
    o = K.scaled_dot_attention(q, k, v, causal=causal)
    o = K.reshape(K.transpose(o, 1, 2), (B, T, d))
    return K.linear(o, P[prefix + ".wo"], P[prefix + ".bo"])


def _ffn(x: Tensor, P: dict, prefix: str) -> Tensor:
    h = K.gelu(K.linear(x, P[prefix + ".w1"], P[prefix + ".b1"]))
    return K.linear(h, P[prefix + ".w2"], P[prefix + ".b2"])


def _block(x: Tensor, P: dict, prefix: str, cfg: CrepeConfig, memory: Tensor | None = None,
           causal: bool = False) -> Tensor:
    h = K.layer_norm(x, P[prefix + ".ln0.g"], P[prefix + ".ln0.b"])
    x = K.add(x, _attention(h, h, P, prefix + ".self", cfg.n_heads, causal))
    if memory is not None:
        h = K.layer_norm(x, P[prefix + ".ln1.g"], P[prefix + ".ln1.b"])
        x = K.add(x, _attention(h, memory, P, prefix + ".cross", cfg.n_heads, False))
    h = K.layer_norm(x, P[prefix + ".lnf.g"], P[prefix + ".lnf.b"])
    return K.add(x, _ffn(h, P, prefix + ".ffn"))


def patchify(images: Tensor, cfg: CrepeConfig) -> Tensor:
    B, H, W = images.shape
    if H != cfg.image_size or W != cfg.image_size:
        raise K.DimensionError(f"encode: image {H}x{W} does not match image_size {cfg.image_size}")
    p, g = cfg.patch_size, cfg.image_size // cfg.patch_size
    x = K.reshape(images, (B, g, p, g, p)).permute(0, 1, 3, 2, 4)
    return K.reshape(x, (B, g * g, p * p))


def encode(images: Tensor, params: dict, cfg: CrepeConfig) -> Tensor:
    """Encoder memory ``(B, n_patches, d_model)``; a single 2-D image gives ``(n_patches, d_model)``."""
    single = images.dim() == 2
    if single:
        images = images.unsqueeze(0)
    x = K.linear(patchify(images, cfg), params["enc.patch.w"], params["enc.patch.b"])
    x = K.add(x, params["enc.pos"])
    for i in range(cfg.encoder_layers):
        x = _block(x, params, f"enc.{i}", cfg)
    x = K.layer_norm(x, params["enc.ln.g"], params["enc.ln.b"])
    return x[0] if single else x


@dataclass
class ForwardOutput:
    logits: Tensor  # (B, T, vocab)
    coord_states: Tensor  # (B, T, d_model)
    params: dict = field(repr=False, default_factory=dict)

    def bbox_pred(self, b: Tensor, t: Tensor) -> Tensor:
        return coord_bbox(self.coord_states[b, t], self.params)

    def quad_pred(self, b: Tensor, t: Tensor) -> Tensor:
        return coord_quad(self.coord_states[b, t], self.params)


def decode_trunk(memory: Tensor, tokens: Tensor, params: dict, cfg: CrepeConfig) -> Tensor:
    B, T = tokens.shape
    if T > cfg.max_seq_len:
        raise TruncationError(f"sequence length {T} exceeds max_seq_len {cfg.max_seq_len}")
    x = K.embedding_lookup(params["dec.tok"], tokens)
    x = K.add(x, K.slice(params["dec.pos"], 0, 0, T))
    for i in range(cfg.shared_decoder_layers):
        x = _block(x, params, f"dec.{i}", cfg, memory, causal=True)
    return x


def _head(x: Tensor, memory: Tensor, params: dict, cfg: CrepeConfig, head: str) -> Tensor:
    for i in range(cfg.head_decoder_layers):
        x = _block(x, params, f"{head}.{i}", cfg, memory, causal=True)
    return K.layer_norm(x, params[f"{head}.ln.g"], params[f"{head}.ln.b"])


def decode_teacher_forced(memory: Tensor, tokens: Tensor, params: dict, cfg: CrepeConfig) -> ForwardOutput:
    """Run the decoder over full input sequences ``(B, T)`` (or a single 1-D sequence)."""
    single = tokens.dim() == 1
    if single:
        tokens, memory = tokens.unsqueeze(0), memory.unsqueeze(0)
    trunk = decode_trunk(memory, tokens, params, cfg)
    seq_h = _head(trunk, memory, params, cfg, "seq")
    logits = K.linear(seq_h, params["seq.out.w"], params["seq.out.b"])
    coord_states = _head(trunk, memory, params, cfg, "coord")
    if single:
        logits, coord_states = logits[0], coord_states[0]
    return ForwardOutput(logits, coord_states, params)


def _coord_ffn(states: Tensor, params: dict, branch: str) -> Tensor:
    h = K.relu(K.rowwise_linear(states, params[f"{branch}.0.w"], params[f"{branch}.0.b"]))
    h = K.relu(K.rowwise_linear(h, params[f"{branch}.1.w"], params[f"{branch}.1.b"]))
    out = K.rowwise_sigmoid(K.rowwise_linear(h, params[f"{branch}.2.w"], params[f"{branch}.2.b"]))
    return COORD_EPS + (1 - 2 * COORD_EPS) * out


def coord_bbox(states: Tensor, params: dict) -> Tensor:
    """Boxes ``(..., 4)`` as (x_min, y_min, x_max, y_max), sorted per axis."""
    raw = _coord_ffn(states, params, "bbox")
    x0, y0, x1, y1 = raw.unbind(-1)
    return torch.stack([torch.minimum(x0, x1), torch.minimum(y0, y1),
                        torch.maximum(x0, x1), torch.maximum(y0, y1)], dim=-1)


def coord_quad(states: Tensor, params: dict) -> Tensor:
    return _coord_ffn(states, params, "quad")


def image_tensor(images, dtype=torch.float32) -> Tensor:
    """uint8 raster(s) to a float tensor scaled to [0, 1]."""
    arr = np.asarray(images)
    return torch.from_numpy(arr.astype(np.float64) / 255.0).to(dtype)


# --------------------------------------------------------------------------
# checkpoint files
# --------------------------------------------------------------------------

def write_tensor_file(path: str | Path, tensors: dict[str, Tensor], config: dict, vocab: dict) -> None:
    """CRPE container: header, named f32 tensors, then config and vocabulary JSON (u32-length prefixed)."""
    buf = bytearray()
    buf += MAGIC
    buf += struct.pack("<II", FORMAT_VERSION, len(tensors))
    for name, t in tensors.items():
        raw = name.encode("utf-8")
        arr = t.detach().to(torch.float32).contiguous().numpy()
        buf += struct.pack("<H", len(raw)) + raw
        buf += struct.pack("<B", arr.ndim)
        buf += struct.pack(f"<{arr.ndim}I", *arr.shape)
        buf += arr.astype("<f4").tobytes()
    for blob in (config, vocab):
        data = json.dumps(blob, sort_keys=True).encode("utf-8")
        buf += struct.pack("<I", len(data)) + data
    Path(path).write_bytes(bytes(buf))


def read_tensor_file(path: str | Path) -> tuple[dict[str, Tensor], dict, dict]:
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise ValueError(f"{path}: not a CRPE checkpoint")
    version, count = struct.unpack_from("<II", data, 4)
    if version != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported format version {version}")
    pos = 12
    tensors = {}
    for _ in range(count):
        (n,) = struct.unpack_from("<H", data, pos)
        pos += 2
        name = data[pos:pos + n].decode("utf-8")
        pos += n
        (rank,) = struct.unpack_from("<B", data, pos)
        pos += 1
        dims = struct.unpack_from(f"<{rank}I", data, pos)
        pos += 4 * rank
        size = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(data, dtype="<f4", count=size, offset=pos).reshape(dims)
        pos += 4 * size
        tensors[name] = torch.from_numpy(arr.astype(np.float32))
    blobs = []
    for _ in range(2):
        (n,) = struct.unpack_from("<I", data, pos)
        pos += 4
        blobs.append(json.loads(data[pos:pos + n].decode("utf-8")))
        pos += n
    return tensors, blobs[0], blobs[1]


def save_checkpoint(path: str | Path, params: dict, cfg: CrepeConfig, vocab: Vocabulary) -> None:
    listing = {"schema": vocab.to_schema(), "tokens": list(vocab.tokens)}
    write_tensor_file(path, params, asdict(cfg), listing)


def load_checkpoint(path: str | Path) -> tuple[dict[str, Tensor], CrepeConfig, Vocabulary]:
    tensors, config, listing = read_tensor_file(path)
    cfg = CrepeConfig(**config)
    vocab = Vocabulary.from_schema(listing["schema"])
    if list(vocab.tokens) != listing["tokens"]:
        raise ValueError(f"{path}: vocabulary listing does not match its schema")
    expected = dict(param_shapes(cfg))
    if set(expected) != set(tensors):
        raise ValueError(f"{path}: parameter names do not match the config")
    for name, t in tensors.items():
        if tuple(t.shape) != expected[name]:
            raise ValueError(f"{path}: {name} has shape {tuple(t.shape)}, expected {expected[name]}")
        t.requires_grad_(True)
    params = {name: tensors[name] for name, _ in param_shapes(cfg)}
    return params, cfg, vocab
