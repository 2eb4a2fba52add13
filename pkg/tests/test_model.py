import numpy as np
import pytest

from stno.autograd import (
    ContractError, Tensor, bilinear_resize, bilinear_warp, grad_check,
)
from stno.checkpoint import CheckpointError, load_checkpoint, load_tensors, save_checkpoint
from stno.model import (
    STNO, FeaturePyramid, ModelConfig, ensemble_weights, upsample_flow,
)
from stno.train import OptimizerState, total_loss

TINY = ModelConfig(channels=[4, 4, 4], residual_blocks=1, iterations=1, mlp_ratio=2, decoder_hidden=8)
SMALL = ModelConfig(channels=[8, 12, 16], residual_blocks=1, iterations=2, decoder_hidden=16)


def frames(rng, n=1, h=16, w=16, dtype=np.float32):
    return [Tensor(rng.random((n, 3, h, w)).astype(dtype)) for _ in range(2)]


def randomize_motion(model, rng, amp=0.05):
    for lvl in model.levels:
        for blk in lvl.blocks:
            last = blk.motion_mlp.layers[-1]
            last.weight.data = (rng.standard_normal(last.weight.shape) * amp).astype(last.weight.dtype)
            last.bias.data = (rng.standard_normal(2) * amp).astype(last.bias.dtype)


# ---------------------------------------------------------------- config


def test_config_invariants():
    with pytest.raises(ContractError):
        ModelConfig(pyramid_levels=2)
    with pytest.raises(ContractError):
        ModelConfig(iterations=0)
    with pytest.raises(ContractError):
        ModelConfig(channels=[8, 8])
    assert ModelConfig().channels == [32, 48, 64]


# ---------------------------------------------------------------- encoder


def test_pyramid_shapes():
    m = STNO(ModelConfig())
    pyr = m.input_projection(Tensor(np.random.default_rng(0).random((3, 64, 64)).astype(np.float32)))
    assert [lvl.shape for lvl in pyr.levels] == [(1, 32, 64, 64), (1, 48, 32, 32), (1, 64, 16, 16)]


def test_input_projection_rejects_unpadded():
    m = STNO(SMALL)
    with pytest.raises(ContractError):
        m.input_projection(Tensor(np.zeros((1, 3, 18, 16), np.float32)))


def test_input_projection_deterministic():
    x = Tensor(np.random.default_rng(1).random((2, 3, 16, 16)).astype(np.float32))
    a = STNO(SMALL, seed=3).input_projection(x)
    b = STNO(SMALL, seed=3).input_projection(x)
    for la, lb in zip(a.levels, b.levels):
        assert np.array_equal(la.data, lb.data)


def test_zero_input_zero_features():
    m = STNO(SMALL)
    for p in m.encoder.parameters():
        if p.ndim == 1:
            p.data[:] = 0
    pyr = m.input_projection(Tensor(np.zeros((1, 3, 16, 16), np.float32)))
    assert all(not lvl.data.any() for lvl in pyr.levels)


# ---------------------------------------------------------------- kernel integration


def test_zero_motion_at_init():
    rng = np.random.default_rng(0)
    m = STNO(SMALL)
    x0, x1 = frames(rng, n=2, h=32, w=32)
    p0, p1 = m.input_projection(x0), m.input_projection(x1)
    fts, flowsets = m.kernel_integration(p0, p1, [0.25, 0.5])
    for per_t in flowsets:
        for j, fs in enumerate(per_t):
            for f in fs.as_list():
                assert f.shape == (2, 2, 32 >> j, 32 >> j)
                assert not f.data.any()
    for ft in fts:
        assert [lvl.shape[-1] for lvl in ft.levels] == [32, 16, 8]


def test_time_outside_unit_interval():
    m = STNO(TINY)
    p = m.input_projection(Tensor(np.zeros((1, 3, 8, 8), np.float32)))
    with pytest.raises(ContractError):
        m.kernel_integration(p, p, 1.5)


def test_t_zero_gives_zero_flow_t0():
    rng = np.random.default_rng(2)
    m = STNO(SMALL)
    randomize_motion(m, rng, 0.5)
    x0, x1 = frames(rng)
    _, flowsets = m.kernel_integration(m.input_projection(x0), m.input_projection(x1), 0.0)
    for fs in flowsets[0]:
        assert np.abs(fs.flow01.data).max() > 0
        assert not fs.flow_t0.data.any()
        assert np.array_equal(fs.flow_t1.data, fs.flow01.data)


def test_step_symmetric_degenerate():
    rng = np.random.default_rng(3)
    m = STNO(SMALL)
    g = Tensor(rng.random((1, 8, 8, 8)).astype(np.float32))
    zero = Tensor(np.zeros((1, 2, 8, 8), np.float32))
    params = m.levels[0].blocks[0]
    te01, te10, f01, f10, ft = m.coarse_to_fine_step(g, g, zero, zero, [0.3], [None], params)
    assert not f01.data.any() and not f10.data.any()
    np.testing.assert_array_equal(te01.data, te10.data)
    np.testing.assert_allclose(ft[0].data, te01.data, rtol=1e-6, atol=1e-6)


def test_flow_update_is_residual():
    rng = np.random.default_rng(4)
    m = STNO(SMALL)
    randomize_motion(m, rng)
    g0 = Tensor(rng.random((1, 8, 8, 8)).astype(np.float32))
    g1 = Tensor(rng.random((1, 8, 8, 8)).astype(np.float32))
    prior = Tensor(rng.normal(0, 1, (1, 2, 8, 8)).astype(np.float32))
    zero = Tensor(np.zeros((1, 2, 8, 8), np.float32))
    params = m.levels[0].blocks[0]
    _, _, f01, _, _ = m.coarse_to_fine_step(g0, g1, prior, zero, [0.5], [None], params)
    # with the prior's warp applied up front, the update is the same delta
    g1w = bilinear_warp(g1, prior)
    _, _, d01, _, _ = m.coarse_to_fine_step(g0, g1w, zero, zero, [0.5], [None], params)
    np.testing.assert_allclose(f01.data - prior.data, d01.data, atol=1e-5)


def test_flow_upsample_units():
    f = Tensor(np.ones((1, 2, 4, 6), np.float32))
    up = upsample_flow(f, (8, 12))
    assert up.shape == (1, 2, 8, 12)
    np.testing.assert_allclose(up.data, 2.0)


def test_flow_upsample_commutes_with_warp():
    # coarse coordinate ramp warped by a smooth flow, then upsampled, equals
    # the fine ramp warped by the upsampled flow (fine = 2 * coarse + 0.5)
    hc = wc = 16
    yy, xx = np.mgrid[0:hc, 0:wc].astype(np.float64)
    fc = np.stack([0.8 * np.sin(xx / 5.0) + 0.3, 0.6 * np.cos(yy / 6.0)])[None]
    ramp_c = np.stack([xx, yy])[None]
    warped_c = bilinear_warp(Tensor(ramp_c), Tensor(fc)).data
    via_coarse = 2 * bilinear_resize(Tensor(warped_c), size=(32, 32)).data + 0.5
    yf, xf = np.mgrid[0:32, 0:32].astype(np.float64)
    ramp_f = np.stack([xf, yf])[None]
    via_fine = bilinear_warp(Tensor(ramp_f), upsample_flow(Tensor(fc), (32, 32))).data
    inner = (slice(None), slice(None), slice(4, -4), slice(4, -4))
    assert np.abs(via_coarse[inner] - via_fine[inner]).max() < 0.1


# ---------------------------------------------------------------- propagation


def test_propagation_needs_two_frames():
    m = STNO(TINY)
    x = Tensor(np.zeros((1, 4, 8, 8), np.float32))
    with pytest.raises(ContractError):
        m.propagate_bidirectional([x], [])


def test_propagation_frame_local_with_zero_flows():
    rng = np.random.default_rng(5)
    m = STNO(TINY).astype(np.float64)
    feats = [Tensor(rng.random((1, 4, 8, 8))) for _ in range(3)]
    zero = Tensor(np.zeros((1, 2, 8, 8)))
    steps = [(zero, zero, 0.0, 0.5), (zero, zero, 0.5, 1.0)]
    base = m.propagate_bidirectional(feats, steps)
    assert len(base.backward) == len(base.forward) == len(base.fused) == 3
    # the first frame's forward state sees nothing but itself
    alone = m.propagation.branch("forward", feats[0], Tensor(np.zeros((1, 4, 8, 8))),
                                 Tensor(np.zeros((1, 4, 8, 8))))
    np.testing.assert_array_equal(base.forward[0].data, alone.data)


def test_propagation_time_reversal_symmetry():
    rng = np.random.default_rng(6)
    m = STNO(TINY).astype(np.float64)
    prop = m.propagation
    prop.tie_branches()
    c = 4
    w = prop.fuse.weight.data
    w[:, 2 * c:] = w[:, c:2 * c]
    feats = [Tensor(rng.random((1, c, 8, 8))) for _ in range(4)]
    f01 = Tensor(rng.normal(0, 1.0, (1, 2, 8, 8)))
    f10 = Tensor(rng.normal(0, 1.0, (1, 2, 8, 8)))
    g01 = Tensor(rng.normal(0, 1.0, (1, 2, 8, 8)))
    g10 = Tensor(rng.normal(0, 1.0, (1, 2, 8, 8)))
    steps = [(f01, f10, 0.0, 0.4), (f01, f10, 0.4, 1.0), (g01, g10, 0.0, 1.0)]
    fwd = m.propagate_bidirectional(feats, steps)
    rev_steps = [(b, a, 1 - tb, 1 - ta) for a, b, ta, tb in reversed(steps)]
    rev = m.propagate_bidirectional(feats[::-1], rev_steps)
    for r_fwd, r_rev in zip(fwd.fused, rev.fused[::-1]):
        np.testing.assert_allclose(r_fwd.data, r_rev.data, rtol=0, atol=1e-5)


# ---------------------------------------------------------------- decoder


@pytest.mark.parametrize("h,w,oh,ow", [(8, 8, 32, 32), (5, 7, 13, 20), (16, 16, 40, 40), (1, 3, 2, 9)])
def test_ensemble_partition_of_unity(h, w, oh, ow):
    wts = ensemble_weights(h, w, oh, ow)
    assert wts.min() >= 0
    np.testing.assert_allclose(wts.sum(axis=0), 1.0, atol=1e-6)


def test_ensemble_weight_at_feature_centre():
    wts = ensemble_weights(6, 6, 6, 6)
    np.testing.assert_allclose(wts.max(axis=0), 1.0)
    assert np.all(np.sort(wts, axis=0)[:3] == 0)
    # with an odd scale, every third output pixel sits on a feature centre
    wts = ensemble_weights(4, 4, 12, 12)
    np.testing.assert_allclose(wts[:, 4, 4].max(), 1.0)


def test_spatial_modulate_shapes_and_errors():
    rng = np.random.default_rng(7)
    m = STNO(SMALL)
    r = Tensor(rng.random((2, 8, 8, 8)).astype(np.float32))
    assert m.spatial_modulate(r, 32, 32).shape == (2, 3, 32, 32)
    assert m.spatial_modulate(r, 20, 20).shape == (2, 3, 20, 20)
    with pytest.raises(ContractError):
        m.spatial_modulate(r, 6, 8)


def test_spatial_modulate_query_subset():
    rng = np.random.default_rng(8)
    m = STNO(SMALL).astype(np.float64)
    r = Tensor(rng.random((2, 8, 8, 8)))
    full = m.spatial_modulate(r, 24, 24).data
    q = np.sort(rng.choice(24 * 24, 50, replace=False))
    sub = m.spatial_modulate(r, 24, 24, queries=q).data
    np.testing.assert_allclose(sub, full.reshape(2, 3, -1)[:, :, q], rtol=1e-12)


def test_spatial_modulate_blends_constant_predictions():
    # if every feature vector is identical the blend returns that one prediction
    m = STNO(SMALL).astype(np.float64)
    r = Tensor(np.ones((1, 8, 6, 6)))
    m.decoder.fc1.weight.data[8:] = 0
    out = m.spatial_modulate(r, 15, 15).data
    np.testing.assert_allclose(out, out[:, :, :1, :1] * np.ones_like(out), atol=1e-12)
    assert np.all((out > 0) & (out < 1))


# ---------------------------------------------------------------- forward


def test_forward_interpolation_shapes():
    rng = np.random.default_rng(9)
    res = STNO(SMALL).forward(frames(rng, h=32, w=32), [0.5], 4)
    assert [f.shape for f in res.frames] == [(1, 3, 128, 128)] * 3
    assert res.interpolated == [False, True, False]
    assert len(res.flows) == 1 and len(res.flows[0]) == 1 and len(res.flows[0][0]) == 3


def test_forward_pure_vsr_path():
    rng = np.random.default_rng(10)
    res = STNO(SMALL).forward(frames(rng, h=16, w=16), [], 1.0)
    assert [f.shape for f in res.frames] == [(1, 3, 16, 16)] * 2
    assert res.interpolated == [False, False]


def test_forward_multi_frame_multi_time():
    rng = np.random.default_rng(11)
    xs = [Tensor(rng.random((3, 16, 16)).astype(np.float32)) for _ in range(3)]
    res = STNO(SMALL).forward(xs, [0.25, 0.75], 2.0)
    assert len(res.frames) == 3 + 2 * 2
    assert res.interpolated == [False, True, True, False, True, True, False]


@pytest.mark.parametrize("h,w,s", [(16, 16, 2.5), (20, 28, 3), (18, 22, 2), (16, 24, 4)])
def test_forward_arbitrary_sizes(h, w, s):
    rng = np.random.default_rng(12)
    res = STNO(TINY).forward(frames(rng, h=h, w=w), [0.5], s)
    assert res.frames[1].shape == (1, 3, int(s * h), int(s * w))


def test_forward_rejects_bad_arguments():
    rng = np.random.default_rng(13)
    m = STNO(TINY)
    x0, x1 = frames(rng, h=8, w=8)
    with pytest.raises(ContractError):
        m.forward([x0], [0.5], 2)
    with pytest.raises(ContractError):
        m.forward([x0, x1], [0.5], 9)
    with pytest.raises(ContractError):
        m.forward([x0, x1], [0.5], 0.5)


def test_forward_deterministic():
    rng = np.random.default_rng(14)
    xs = frames(rng)
    a = STNO(SMALL, seed=1).forward(xs, [0.5], 2.5)
    b = STNO(SMALL, seed=1).forward(xs, [0.5], 2.5)
    for fa, fb in zip(a.frames, b.frames):
        assert np.array_equal(fa.data, fb.data)


def end_to_end_loss(model, rng):
    x0, x1 = frames(rng, h=8, w=8, dtype=np.float64)
    hr = [rng.random((1, 3, 16, 16)) for _ in range(3)]
    gt = rng.normal(0, 1.0, (1, 8, 32, 32))
    mask = (rng.random((1, 4, 32, 32)) > 0.2).astype(np.float64)

    def loss(*_):
        res = model.forward([x0, x1], [0.5], 2.0)
        return total_loss(res.frames, hr, res.flows[0][0], gt, mask, alpha=0.5)

    return loss


@pytest.mark.parametrize("group", ["encoder", "levels", "propagation", "decoder"])
def test_end_to_end_gradient(group):
    rng = np.random.default_rng(15)
    model = STNO(TINY, seed=2).astype(np.float64)
    randomize_motion(model, rng, 0.3)
    params = [p for name, p in model.named_parameters() if name.startswith(group)]
    rep = grad_check(end_to_end_loss(model, rng), params, tol=1e-3, h=1e-5, max_elements=3,
                     rng=np.random.default_rng(0))
    assert rep.passed, (group, rep.max_rel_err, rep.worst)


# ---------------------------------------------------------------- checkpoint


def test_checkpoint_round_trip(tmp_path):
    m = STNO(SMALL, seed=5)
    opt = OptimizerState({"encoder.head.bias": np.arange(8, dtype=np.float32)},
                         {"encoder.head.bias": np.ones(8, np.float32)}, 7)
    path = tmp_path / "c.bin"
    save_checkpoint(path, m, step=42, optimizer=opt)
    opt2 = OptimizerState()
    m2, header = load_checkpoint(path, opt2)
    assert header["step"] == 42 and m2.config == SMALL
    for (ka, a), (kb, b) in zip(m.state_dict().items(), m2.state_dict().items()):
        assert ka == kb and np.array_equal(a, b)
    assert opt2.step == 7 and np.array_equal(opt2.m["encoder.head.bias"], opt.m["encoder.head.bias"])


def test_checkpoint_layout(tmp_path):
    path = tmp_path / "c.bin"
    save_checkpoint(path, STNO(TINY))
    raw = path.read_bytes()
    assert raw[:8] == b"STNOCKPT"
    assert int.from_bytes(raw[8:12], "little") == 1
    header, tensors = load_tensors(path)
    assert header["config"]["channels"] == [4, 4, 4]
    assert list(tensors) == header["tensors"]


def test_checkpoint_corruption(tmp_path):
    path = tmp_path / "c.bin"
    save_checkpoint(path, STNO(TINY))
    raw = path.read_bytes()
    (tmp_path / "cut.bin").write_bytes(raw[:-10])
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "cut.bin")
    (tmp_path / "bad.bin").write_bytes(b"NOTACKPT" + raw[8:])
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "bad.bin")


def test_feature_pyramid_container():
    p = FeaturePyramid([Tensor(np.zeros((1, 1, 4, 4)))] * 3)
    assert len(p) == 3 and p[2].shape == (1, 1, 4, 4)
