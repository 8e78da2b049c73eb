import numpy as np
import pytest

from gaitkit import errors
from gaitkit.core import Modality
from gaitkit.model import GaitNet, OmniGaitConfig

SIL = Modality.RGB_SILHOUETTE
DEP = Modality.DEPTH
EVT = Modality.EVENT


def tiny_config(**kw):
    base = dict(modalities=(SIL, DEP, EVT), base_channels=8, parts=4,
                num_classes=5, variant="omni", seed=0, frames=4,
                input_size=16)
    base.update(kw)
    return OmniGaitConfig(**base)


def tiny_net(**kw):
    return GaitNet(tiny_config(**kw))


def _inputs(cfg, b=2, rng=None):
    rng = rng or np.random.default_rng(0)
    return {m: rng.random((b, cfg.frames, m.channels, cfg.input_size,
                           cfg.input_size)).astype(np.float32)
            for m in cfg.modalities}


def test_config_validation():
    with pytest.raises(errors.UnsupportedModality):
        OmniGaitConfig(modalities=(Modality.LIDAR_POINTS,))
    with pytest.raises(errors.WrongVariant):
        OmniGaitConfig(modalities=(SIL, DEP, EVT), variant="two_stream")
    with pytest.raises(errors.WrongVariant):
        OmniGaitConfig(modalities=(SIL,), variant="bogus")
    with pytest.raises(errors.IndivisibleHeight):
        OmniGaitConfig(modalities=(SIL,), parts=5)
    cfg = OmniGaitConfig(modalities=(SIL, DEP))
    assert cfg.c1 == 128 and cfg.c2 == 512 and cfg.c3 == 256
    assert OmniGaitConfig.from_dict(cfg.to_dict()) == cfg


def test_dimension_chain_small_scale():
    net = tiny_net()
    cfg = net.config
    x = np.random.default_rng(1).random((cfg.frames, 1, 16, 16)).astype(np.float32)
    f = net.encode(SIL, x)
    assert f.shape == (1, 4, 8, 16, 16)
    out = net.shared_forward([f])[0]
    assert out.shape == (1, 4, 32, 4, 4)
    pooled = net.temporal_pool(out)
    assert pooled.shape == (1, 32, 4, 4)
    parts = net.hpp(pooled)
    assert parts.shape == (1, 32, 4)
    feat = net.forward_single(SIL, x)
    assert feat.parts.shape == (16, 4)  # (C3, P)
    assert feat.pre_bnneck.shape == (16, 4)
    assert np.isfinite(feat.parts).all()


def test_encode_rejects_bad_inputs():
    net = tiny_net()
    with pytest.raises(errors.UnsupportedModality):
        net.encode(Modality.LIDAR_POINTS, np.zeros((4, 3, 16, 16), np.float32))
    with pytest.raises(errors.UnsupportedModality):
        net.encode(Modality.RGB, np.zeros((4, 3, 16, 16), np.float32))
    with pytest.raises(errors.ShapeMismatch):
        net.encode(SIL, np.zeros((4, 3, 16, 16), np.float32))
    with pytest.raises(errors.ShapeMismatch):
        net.encode(SIL, np.zeros((5, 1, 16, 16), np.float32))


def test_zero_input_finite_and_encoders_independent():
    net = tiny_net()
    z3 = np.zeros((4, 3, 16, 16), np.float32)
    assert np.isfinite(net.encode(DEP, z3)).all()
    assert np.isfinite(net.forward_single(DEP, z3).parts).all()
    r3 = np.random.default_rng(2).random((4, 3, 16, 16)).astype(np.float32)
    assert not np.allclose(net.encode(DEP, r3), net.encode(EVT, r3))


def test_batched_matches_unbatched_eval():
    net = tiny_net()
    rng = np.random.default_rng(3)
    xb = rng.random((3, 4, 1, 16, 16)).astype(np.float32)
    batched = net.forward_single(SIL, xb)
    for i in range(3):
        single = net.forward_single(SIL, xb[i])
        np.testing.assert_allclose(batched.parts[i], single.parts, atol=1e-5)


def test_gate_weights_normalized():
    net = tiny_net()
    rng = np.random.default_rng(5)
    for _ in range(20):
        fij = rng.normal(size=(2, 4, 8, 16, 16)).astype(np.float32)
        w = net.gate_weights(fij)
        assert w.shape == (2, 2)
        np.testing.assert_allclose(w.sum(axis=1), 1.0, atol=1e-6)
        assert (w > 0).all() and (w < 1).all()


def test_gate_forced_values():
    net = tiny_net()
    fm = net.fusion
    fm.g2_w.data[:] = 0
    fm.g2_b.data[:] = 0  # equal logits
    fij = np.random.default_rng(0).normal(size=(4, 8, 16, 16)).astype(np.float32)
    np.testing.assert_allclose(net.gate_weights(fij), [0.5, 0.5])
    fm.g2_b.data[:] = [np.log(3.0), 0.0]
    w = net.gate_weights(fij)
    np.testing.assert_allclose(w, [0.75, 0.25], atol=1e-6)


@pytest.mark.parametrize("alpha", [0.0, 0.5, 1.0])
def test_forced_gate_linearity_bitwise(alpha):
    net = tiny_net()
    fm = net.fusion
    fm.mix_weight.data[:] = 0
    fm.g2_w.data[:] = 0
    if alpha == 0.5:
        fm.g2_b.data[:] = [0.0, 0.0]
    elif alpha == 0.0:
        fm.g2_b.data[:] = [-1e4, 0.0]
    else:
        fm.g2_b.data[:] = [0.0, -1e4]
    rng = np.random.default_rng(7)
    fi = rng.normal(size=(1, 4, 8, 16, 16)).astype(np.float32)
    fj = rng.normal(size=(1, 4, 8, 16, 16)).astype(np.float32)
    out = net.fuse(fi, fj)
    a32 = np.float32(alpha)
    expected = a32 * fi + np.float32(1.0 - alpha) * fj
    assert (out == expected).all()  # bitwise at float32


def test_fuse_shape_and_shared_parameters():
    net = tiny_net()
    rng = np.random.default_rng(11)
    fi = rng.normal(size=(2, 4, 8, 16, 16)).astype(np.float32)
    fj = rng.normal(size=(2, 4, 8, 16, 16)).astype(np.float32)
    out = net.fuse(fi, fj)
    assert out.shape == fi.shape
    with pytest.raises(errors.ShapeMismatch):
        net.fuse(fi, fj[:, :, :4])
    # one fusion parameter set serves every pair: the module is a singleton
    assert net.fusion is net.fusion


def test_shared_forward_order_equivariance_eval():
    net = tiny_net()
    rng = np.random.default_rng(13)
    feats = [rng.normal(size=(2, 4, 8, 16, 16)).astype(np.float32)
             for _ in range(3)]
    outs = net.shared_forward(list(feats))
    outs_perm = net.shared_forward([feats[2], feats[0], feats[1]])
    np.testing.assert_allclose(outs_perm[1], outs[0], atol=1e-6)
    np.testing.assert_allclose(outs_perm[0], outs[2], atol=1e-6)
    with pytest.raises(errors.EmptyInput):
        net.shared_forward([])


def test_mixed_batch_normalization_statistics():
    net = tiny_net()
    rng = np.random.default_rng(17)
    # distribution-shifted modality features
    fa = rng.normal(0.0, 1.0, size=(2, 4, 8, 16, 16)).astype(np.float32)
    fb = rng.normal(3.0, 0.5, size=(2, 4, 8, 16, 16)).astype(np.float32)
    net.shared_forward([fa, fb], training=True)
    bn = net.backbone.stage1.bn1
    got_mean, got_var = bn.last_batch_stats
    conv_w = net.backbone.stage1.conv1.weight.data
    from gaitkit.kernels import conv2d_forward
    joint = np.concatenate([fa, fb]).reshape(-1, 8, 16, 16)
    pre_bn = conv2d_forward(joint, conv_w, 1, 1)
    np.testing.assert_allclose(got_mean, pre_bn.mean(axis=(0, 2, 3)), atol=1e-6)
    np.testing.assert_allclose(got_var, pre_bn.var(axis=(0, 2, 3)), atol=1e-6)
    # single-modality stats differ on shifted inputs
    net2 = tiny_net()
    net2.shared_forward([fa], training=True)
    solo_mean, _ = net2.backbone.stage1.bn1.last_batch_stats
    assert np.abs(solo_mean - got_mean).max() > 1e-3


def test_eval_mode_is_pure():
    net = tiny_net()
    cfg = net.config
    before = {k: v.copy() for k, v in net.state().items()}
    x = np.random.default_rng(19).random(
        (2, 4, 1, 16, 16)).astype(np.float32)
    net.forward_single(SIL, x)
    net.forward_pair(SIL, x, DEP, np.repeat(x, 3, axis=2))
    after = net.state()
    assert set(before) == set(after)
    for k in before:
        np.testing.assert_array_equal(before[k], after[k], err_msg=k)


def test_forward_single_touches_only_its_encoder(monkeypatch):
    net = tiny_net()
    x = np.random.default_rng(23).random((4, 1, 16, 16)).astype(np.float32)

    def bomb(*a, **k):
        raise AssertionError("foreign encoder accessed")

    for m, enc in net.encoders.items():
        if m is not SIL:
            monkeypatch.setattr(enc, "forward", bomb)
    net.forward_single(SIL, x)


def test_forward_pair_contracts():
    net = tiny_net()
    rng = np.random.default_rng(29)
    xs = rng.random((4, 1, 16, 16)).astype(np.float32)
    xd = rng.random((4, 3, 16, 16)).astype(np.float32)
    f = net.forward_pair(SIL, xs, DEP, xd)
    assert f.parts.shape == (16, 4)
    g = net.forward_pair(DEP, xd, SIL, xs)
    assert not np.allclose(f.parts, g.parts)  # concat order matters
    dead = net.forward_pair(SIL, xs, DEP, np.zeros_like(xd))
    assert np.isfinite(dead.parts).all()
    with pytest.raises(errors.SameModalityPair):
        net.forward_pair(SIL, xs, SIL, xs.copy())


def test_forward_training_and_backbone_counter():
    net = tiny_net()
    cfg = net.config
    ins = _inputs(cfg, b=3)
    before = net.backbone_batches
    out = net.forward_training(ins, anchor=SIL)
    assert net.backbone_batches == before + 1
    names = set(out)
    assert names == {"rgb_silhouette", "depth", "event",
                     "rgb_silhouette+depth", "rgb_silhouette+event"}
    for pre, post, logits in out.values():
        assert pre.shape == (3, 16, 4)
        assert post.shape == (3, 16, 4)
        assert logits.shape == (3, 5, 4)
        assert np.isfinite(pre).all() and np.isfinite(logits).all()
    # pre and post differ in training mode
    pre, post, _ = out["depth"]
    assert not np.allclose(pre, post)


def test_training_gradients_end_to_end_fd():
    cfg = tiny_config(modalities=(SIL, DEP), base_channels=4, parts=4,
                      num_classes=3, frames=2, input_size=16)
    net = GaitNet(cfg, dtype=np.float64)
    rng = np.random.default_rng(31)
    ins = {m: rng.random((2, 2, m.channels, 16, 16)) for m in cfg.modalities}
    proj_pre = {}
    proj_log = {}

    def run(inputs):
        out = net.forward_training(inputs, anchor=SIL)
        total = 0.0
        for name, (pre, post, logits) in out.items():
            if name not in proj_pre:
                proj_pre[name] = rng.normal(size=pre.shape)
                proj_log[name] = rng.normal(size=logits.shape)
            total += (pre * proj_pre[name]).sum() + (logits * proj_log[name]).sum()
        return float(total), out

    _, out = run(ins)
    net.zero_grad()
    net.backward_training({n: proj_pre[n] for n in out},
                          {n: proj_log[n] for n in out})
    params = net.named_params()
    eps = 1e-6
    for pname in ("encoder.rgb_silhouette.conv.weight",
                  "backbone.stage2.conv1.weight",
                  "fusion.mix_weight", "fusion.g1_w",
                  "head.fc.weight", "head.classifier.weight",
                  "backbone.stage1.bn1.gamma"):
        p = params[pname]
        i = tuple(np.random.default_rng(hash(pname) % 2**31).integers(0, s)
                  for s in p.data.shape)
        orig = p.data[i]
        p.data[i] = orig + eps
        up, _ = run(ins)
        p.data[i] = orig - eps
        dn, _ = run(ins)
        p.data[i] = orig
        fd = (up - dn) / (2 * eps)
        assert p.grad[i] == pytest.approx(fd, rel=2e-4, abs=1e-6), pname


def test_two_stream_variant():
    cfg = tiny_config(modalities=(SIL, DEP), variant="two_stream")
    net = GaitNet(cfg)
    rng = np.random.default_rng(37)
    x1 = rng.random((4, 1, 16, 16)).astype(np.float32)
    x2 = rng.random((4, 3, 16, 16)).astype(np.float32)
    f1, f2 = net.two_stream_forward(SIL, x1, DEP, x2)
    assert f1.parts.shape == (16, 4) and f2.parts.shape == (16, 4)
    # identical inputs through both streams -> different outputs
    x_same = rng.random((4, 1, 16, 16)).astype(np.float32)
    cfg2 = tiny_config(modalities=(SIL, Modality.IR_SILHOUETTE),
                       variant="two_stream")
    net2 = GaitNet(cfg2)
    g1, g2 = net2.two_stream_forward(SIL, x_same, Modality.IR_SILHOUETTE,
                                     x_same.copy())
    assert not np.allclose(g1.parts, g2.parts)
    # stages 2+ are the same objects for both streams
    assert net2.backbone is net2.backbone
    before = net2.backbone_batches
    net2.two_stream_forward(SIL, x_same, Modality.IR_SILHOUETTE, x_same.copy())
    assert net2.backbone_batches == before + 1  # one joint batch
    with pytest.raises(errors.WrongVariant):
        net.forward_pair(SIL, x1, DEP, x2)
    with pytest.raises(errors.WrongVariant):
        tiny_net().two_stream_forward(SIL, x1, DEP, x2)


def test_state_roundtrip_and_mismatch():
    net = tiny_net()
    state = {k: v.copy() for k, v in net.state().items()}
    net2 = tiny_net(seed=99)
    net2.load_state(state)
    for k, v in net2.state().items():
        np.testing.assert_array_equal(v, state[k])
    bad = dict(state)
    bad.pop(sorted(bad)[0])
    with pytest.raises(errors.CorruptCheckpoint):
        net2.load_state(bad)
