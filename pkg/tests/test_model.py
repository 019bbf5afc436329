import struct

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from crepe import model as M
from crepe import nnkernel as K
from crepe.token_schema import Vocabulary

V = Vocabulary.load()
CFG = M.CrepeConfig(vocab_size=len(V))
SMALL = M.CrepeConfig(image_size=16, patch_size=8, d_model=8, n_heads=2, encoder_layers=1,
                      shared_decoder_layers=3, head_decoder_layers=1, ffn_dim=16, max_seq_len=12,
                      vocab_size=len(V), coord_hidden=8)


@pytest.fixture(scope="module")
def params():
    return M.init_params(CFG, seed=0)


def test_config_invariants():
    with pytest.raises(ValueError):
        M.CrepeConfig(d_model=30, n_heads=4)
    with pytest.raises(ValueError):
        M.CrepeConfig(image_size=100, patch_size=8)
    assert CFG.n_patches == 144


def test_param_inventory(params):
    names = set(params)
    assert dict(M.param_shapes(CFG)).keys() == names
    for i in range(3):
        assert f"dec.{i}.self.wq" in names and f"dec.{i}.cross.wq" in names
    assert "dec.3.self.wq" not in names
    assert params["seq.out.w"].shape == (64, len(V))
    assert params["bbox.2.w"].shape == (64, 4) and params["quad.2.w"].shape == (64, 8)
    assert "seq.0.cross.wq" in names and "coord.0.cross.wq" in names
    for name, shape in M.param_shapes(CFG):
        assert tuple(params[name].shape) == tuple(shape)


def test_init_is_seeded():
    a, b, c = M.init_params(SMALL, 1), M.init_params(SMALL, 1), M.init_params(SMALL, 2)
    assert all(torch.equal(a[k], b[k]) for k in a)
    assert not all(torch.equal(a[k], c[k]) for k in a)


def test_encode_shape_and_determinism(params):
    img = torch.zeros(96, 96)
    m1 = M.encode(img, params, CFG)
    assert m1.shape == (144, 64)
    assert torch.equal(m1, M.encode(img, params, CFG))


def test_encode_rejects_wrong_size(params):
    with pytest.raises(K.DimensionError):
        M.encode(torch.zeros(64, 64), params, CFG)


def test_encode_patch_embedding_gradient():
    p = M.init_params(SMALL, 0, dtype=torch.float64)
    img = torch.rand(16, 16, dtype=torch.float64, generator=torch.Generator().manual_seed(0))
    w = p["enc.patch.w"].requires_grad_(True)
    err, where = K.check_gradients(lambda: M.encode(img, p, SMALL).sum(), {"enc.patch.w": w},
                                   samples_per_tensor=10)
    assert err <= 1e-4, where


def test_decode_shapes_and_ranges(params):
    mem = M.encode(torch.rand(96, 96), params, CFG)
    toks = torch.tensor([V.task_id("ocr"), V.id_of("<ocr>"), V.id_of("a"), V.id_of("</ocr>")])
    out = M.decode_teacher_forced(mem, toks, params, CFG)
    assert out.logits.shape == (4, len(V)) and out.coord_states.shape == (4, 64)
    box = M.coord_bbox(out.coord_states, params)
    quad = M.coord_quad(out.coord_states, params)
    assert ((box > 0) & (box < 1)).all() and ((quad > 0) & (quad < 1)).all()


def test_overlong_sequence_is_truncation_error():
    p = M.init_params(SMALL, 0)
    mem = M.encode(torch.zeros(16, 16), p, SMALL)
    with pytest.raises(M.TruncationError):
        M.decode_teacher_forced(mem, torch.zeros(SMALL.max_seq_len + 1, dtype=torch.long), p, SMALL)


def test_sequence_head_params_do_not_touch_coord_states():
    p = M.init_params(SMALL, 0)
    mem = M.encode(torch.rand(16, 16), p, SMALL)
    toks = torch.tensor([3, 10, 11, 12, 13])
    before = M.decode_teacher_forced(mem, toks, p, SMALL)
    q = {k: (v + 0.5 if M.is_seq_param(k) else v) for k, v in p.items()}
    after = M.decode_teacher_forced(mem, toks, q, SMALL)
    assert torch.equal(before.coord_states, after.coord_states)
    assert not torch.equal(before.logits, after.logits)
    r = {k: (v + 0.5 if M.is_coord_param(k) else v) for k, v in p.items()}
    assert torch.equal(before.logits, M.decode_teacher_forced(mem, toks, r, SMALL).logits)


def test_head_isolation_gradients():
    p = M.init_params(SMALL, 0)
    for v in p.values():
        v.requires_grad_(True)
    mem = M.encode(torch.rand(16, 16), p, SMALL)
    out = M.decode_teacher_forced(mem, torch.tensor([3, 10, 11, 12]), p, SMALL)
    names = list(p)
    gl = dict(zip(names, torch.autograd.grad(out.logits.sum(), [p[n] for n in names], allow_unused=True,
                                             retain_graph=True)))
    gc = dict(zip(names, torch.autograd.grad(M.coord_bbox(out.coord_states, p).sum(), [p[n] for n in names],
                                             allow_unused=True)))
    for n in names:
        if M.is_coord_param(n):
            assert gl[n] is None or (gl[n] == 0).all()
        if M.is_seq_param(n):
            assert gc[n] is None or (gc[n] == 0).all()
    assert (gl["dec.0.self.wq"] != 0).any() and (gc["dec.0.self.wq"] != 0).any()


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_bbox_is_canonical_for_random_weights(seed):
    p = M.init_params(SMALL, seed)
    g = torch.Generator().manual_seed(seed)
    for k in p:
        if k.startswith("bbox."):
            p[k] = torch.randn(p[k].shape, generator=g) * 3
    states = torch.randn(20, SMALL.d_model, generator=g) * 5
    b = M.coord_bbox(states, p)
    assert (b[:, 0] <= b[:, 2]).all() and (b[:, 1] <= b[:, 3]).all()
    assert ((b > 0) & (b < 1)).all()
    assert torch.equal(b, M.coord_bbox(states, p))


def test_coord_outputs_strictly_inside_unit_interval_when_saturated():
    p = M.init_params(SMALL, 0)
    p["quad.2.b"] = torch.full((8,), 1e4)
    p["bbox.2.b"] = torch.full((4,), -1e4)
    s = torch.randn(3, SMALL.d_model)
    assert (M.coord_quad(s, p) < 1).all() and (M.coord_bbox(s, p) > 0).all()


def test_coordinate_heads_are_bitwise_batch_invariant():
    p = M.init_params(CFG, 1)
    with torch.no_grad():
        for k in p:
            if k.startswith(("bbox", "quad")):
                p[k].mul_(3)
    s = torch.randn(200, CFG.d_model, generator=torch.Generator().manual_seed(1))
    with torch.no_grad():
        boxes, quads = M.coord_bbox(s, p), M.coord_quad(s, p)
        for i in range(len(s)):
            assert torch.equal(boxes[i], M.coord_bbox(s[i:i + 1], p)[0])
            assert torch.equal(quads[i], M.coord_quad(s[i:i + 1], p)[0])


def test_batched_decode_matches_single():
    p = M.init_params(SMALL, 0)
    imgs = torch.rand(2, 16, 16)
    toks = torch.tensor([[3, 10, 11], [3, 12, 13]])
    mem = M.encode(imgs, p, SMALL)
    out = M.decode_teacher_forced(mem, toks, p, SMALL)
    one = M.decode_teacher_forced(M.encode(imgs[1], p, SMALL), toks[1], p, SMALL)
    torch.testing.assert_close(out.logits[1], one.logits, rtol=1e-5, atol=1e-6)


# checkpoint files --------------------------------------------------------------------

def test_checkpoint_round_trip_is_bit_exact(tmp_path):
    p = M.init_params(SMALL, 3)
    path = tmp_path / "m.crpe"
    M.save_checkpoint(path, p, SMALL, V)
    q, cfg, vocab = M.load_checkpoint(path)
    assert cfg == SMALL and vocab == V
    assert list(q) == list(p)
    assert all(torch.equal(p[k], q[k]) for k in p)
    M.save_checkpoint(tmp_path / "again.crpe", q, cfg, vocab)
    assert path.read_bytes() == (tmp_path / "again.crpe").read_bytes()


def test_checkpoint_layout(tmp_path):
    t = {"a.b": torch.arange(6, dtype=torch.float32).reshape(2, 3)}
    path = tmp_path / "t.crpe"
    M.write_tensor_file(path, t, {"k": 1}, {"v": 2})
    raw = path.read_bytes()
    assert raw[:4] == b"CRPE"
    assert struct.unpack_from("<II", raw, 4) == (1, 1)
    assert struct.unpack_from("<H", raw, 12) == (3,)
    assert raw[14:17] == b"a.b"
    assert raw[17] == 2
    assert struct.unpack_from("<II", raw, 18) == (2, 3)
    assert np.frombuffer(raw[26:50], dtype="<f4").tolist() == list(range(6))
    tensors, cfg, vocab = M.read_tensor_file(path)
    assert cfg == {"k": 1} and vocab == {"v": 2}


def test_checkpoint_rejects_bad_magic_and_shapes(tmp_path):
    bad = tmp_path / "bad.crpe"
    bad.write_bytes(b"NOPE" + bytes(20))
    with pytest.raises(ValueError):
        M.load_checkpoint(bad)
    p = M.init_params(SMALL, 0)
    p["seq.out.b"] = torch.zeros(3)
    M.write_tensor_file(tmp_path / "shape.crpe", p, M.asdict(SMALL), {"schema": V.to_schema(),
                                                                     "tokens": list(V.tokens)})
    with pytest.raises(ValueError):
        M.load_checkpoint(tmp_path / "shape.crpe")
