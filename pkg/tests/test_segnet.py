import numpy as np
import pytest

from bsrnet import gradcore as gc
from bsrnet import segnet as sn

SPEC = sn.ArchSpec(mos_classes=5, scs_classes=9)
TINY = sn.ArchSpec(mos_classes=3, scs_classes=4, levels=2, base_channels=2)


def image(seed=0, size=32, n=None):
    rng = np.random.default_rng(seed)
    shape = (1, size, size) if n is None else (n, 1, size, size)
    return rng.uniform(0, 1, shape)


def randomized(spec, seed):
    """Parameters with nonzero biases so no ReLU sits exactly on its kink."""
    p = sn.init_params(spec, seed)
    rng = np.random.default_rng(seed + 1000)
    for k, v in p.arrays.items():
        if k.endswith(".b"):
            v[:] = rng.normal(0, 0.3, v.shape)
    return p


def test_init_deterministic():
    a, b = sn.init_params(SPEC, 3), sn.init_params(SPEC, 3)
    assert a.arrays.keys() == b.arrays.keys()
    for k in a.arrays:
        assert a.arrays[k].tobytes() == b.arrays[k].tobytes()


def test_init_biases_zero():
    p = sn.init_params(SPEC, 0)
    assert all(not v.any() for k, v in p.arrays.items() if k.endswith(".b"))


def test_init_variance_he():
    # enc.1.conv1 has 16 input channels and a 3x3 kernel: 32 x 144 = 4608 draws
    w = np.concatenate([sn.init_params(SPEC, s).arrays["enc.1.conv1.w"].ravel() for s in range(3)])
    assert w.size >= 10_000
    target = 2.0 / (16 * 9)
    assert abs(w.var() - target) <= 0.2 * target


def test_decoder_shapes_match_except_output():
    p = sn.init_params(SPEC, 0)
    mos = {k[4:]: v.shape for k, v in p.decoder_mos.items()}
    scs = {k[4:]: v.shape for k, v in p.decoder_scs.items()}
    assert mos.keys() == scs.keys()
    diff = [k for k in mos if mos[k] != scs[k]]
    assert sorted(diff) == ["out.b", "out.w"]


def test_scs_head_does_not_shift_shared_init():
    a = sn.init_params(sn.ArchSpec(5), 0)
    b = sn.init_params(SPEC, 0)
    for k, v in a.arrays.items():
        np.testing.assert_array_equal(v, b.arrays[k])


def test_output_shapes_and_normalisation():
    preds = sn.forward(sn.init_params(SPEC, 0), image())
    assert preds.mos.shape == (5, 32, 32)
    assert preds.scs.shape == (9, 32, 32)
    np.testing.assert_allclose(preds.mos.sum(0), 1.0, atol=1e-9)
    np.testing.assert_allclose(preds.scs.sum(0), 1.0, atol=1e-9)


def test_forward_deterministic():
    p = sn.init_params(SPEC, 1)
    pert = sn.Perturbation(0.1, 0.2, seed=5)
    a = sn.forward(p, image(), perturb=pert)
    b = sn.forward(p, image(), perturb=pert)
    assert a.mos.tobytes() == b.mos.tobytes() and a.scs.tobytes() == b.scs.tobytes()


def test_zero_sigma_is_identity():
    p = sn.init_params(SPEC, 1)
    a = sn.forward(p, image())
    b = sn.forward(p, image(), perturb=sn.Perturbation(0.0, 0.2, seed=9))
    np.testing.assert_array_equal(a.mos, b.mos)
    np.testing.assert_array_equal(a.scs, b.scs)


def test_perturbation_continuity():
    p = sn.init_params(SPEC, 1)
    clean = sn.forward(p, image(), heads="mos").mos
    deltas = [np.abs(sn.forward(p, image(), heads="mos", perturb=sn.Perturbation(s, 1.0, 4)).mos - clean).max()
              for s in (0.1, 0.01, 0.001)]
    assert deltas[0] > deltas[1] > deltas[2]


def test_noise_is_clipped():
    z = sn.Perturbation(5.0, 0.2, seed=0).sample((1000,))
    assert z.min() >= -0.2 and z.max() <= 0.2


def test_indivisible_input_rejected():
    with pytest.raises(gc.ShapeError):
        sn.forward(sn.init_params(SPEC, 0), np.zeros((1, 30, 30)))


def test_missing_scs_head_rejected():
    with pytest.raises(ValueError):
        sn.forward(sn.init_params(sn.ArchSpec(5), 0), image(), heads="scs")


def test_batched_matches_single():
    p = sn.init_params(SPEC, 2)
    x = image(n=3)
    batch = sn.forward(p, x)
    for i in range(3):
        single = sn.forward(p, x[i])
        np.testing.assert_allclose(batch.mos[i], single.mos, atol=1e-12)
        np.testing.assert_allclose(batch.scs[i], single.scs, atol=1e-12)


def test_shared_encoder_equals_separate_passes():
    p = sn.init_params(SPEC, 2)
    both = sn.forward(p, image())
    np.testing.assert_array_equal(both.mos, sn.forward(p, image(), heads="mos").mos)
    np.testing.assert_array_equal(both.scs, sn.forward(p, image(), heads="scs").scs)


def test_features_shape_and_determinism():
    p = sn.init_params(sn.ArchSpec(5), 0)
    f = sn.extract_features(p, image())
    assert f.shape == (32 * 32, 16)
    np.testing.assert_array_equal(f, sn.extract_features(p, image()))


def test_features_feed_output_layer():
    p = randomized(sn.ArchSpec(5), 0)
    f = sn.extract_features(p, image())
    logits = f @ p.arrays["mos.out.w"][:, :, 0, 0].T + p.arrays["mos.out.b"]
    probs = np.exp(logits - logits.max(1, keepdims=True))
    probs /= probs.sum(1, keepdims=True)
    mos = sn.forward(p, image(), heads="mos").mos
    np.testing.assert_allclose(probs.T.reshape(mos.shape), mos, atol=1e-12)


# --- gradients -------------------------------------------------------------------

@pytest.mark.parametrize("seed", range(3))
def test_network_gradient_finite_differences(seed):
    p = randomized(TINY, seed)
    rng = np.random.default_rng(seed)
    x = rng.uniform(0, 1, (2, 1, 8, 8))
    rm, rs = rng.standard_normal((2, 3, 8, 8)), rng.standard_normal((2, 4, 8, 8))

    def loss():
        pr = sn.forward(p, x)
        return float((pr.mos * rm).sum() + (pr.scs * rs).sum())

    _, cache = sn.forward_train(p, x)
    grads = sn.backward(p, cache, rm, rs)
    h = 1e-6  # small stencil: fewer ReLU switches inside it in a deep composition
    base = loss()
    checked = kinks = 0
    for name, arr in p.arrays.items():
        flat = arr.reshape(-1)
        idx = rng.choice(flat.size, size=min(3, flat.size), replace=False)
        for i in idx:
            old = flat[i]
            flat[i] = old + h
            up = loss()
            flat[i] = old - h
            down = loss()
            flat[i] = old
            fwd, bwd = (up - base) / h, (base - down) / h
            if abs(fwd - bwd) > 1e-2 * max(abs(fwd), abs(bwd), 1e-3):
                kinks += 1  # a ReLU switches inside the stencil; the derivative is one-sided here
                continue
            num = (up - down) / (2 * h)
            ana = grads[name].reshape(-1)[i]
            assert abs(num - ana) <= 1e-3 * max(abs(num), abs(ana), 1e-6), (name, i, num, ana)
            checked += 1
    assert kinks <= checked // 10


def test_unused_head_gets_no_gradient():
    p = randomized(TINY, 0)
    _, cache = sn.forward_train(p, image(size=8))
    g = sn.backward(p, cache, dmos=np.ones((3, 8, 8)))
    assert all(not v.any() for k, v in g.items() if k.startswith("scs."))


# --- EMA -------------------------------------------------------------------------

def _const(spec, value):
    p = sn.init_params(spec, 0)
    for v in p.arrays.values():
        v[...] = value
    return p


def test_ema_arithmetic():
    t = sn.TeacherState(_const(TINY, 0.0), decay=0.99)
    sn.ema_update(t, _const(TINY, 1.0))
    for v in t.params.arrays.values():
        np.testing.assert_allclose(v, 0.01, rtol=0, atol=1e-15)


def test_ema_decay_one_freezes():
    t = sn.TeacherState(_const(TINY, 0.3), decay=1.0)
    sn.ema_update(t, _const(TINY, 7.0))
    assert all((v == 0.3).all() for v in t.params.arrays.values())


def test_ema_fixed_point():
    s = randomized(TINY, 4)
    t = sn.make_teacher(s, decay=0.37)
    sn.ema_update(t, s)
    for k, v in t.params.arrays.items():
        np.testing.assert_allclose(v, s.arrays[k], rtol=1e-15, atol=0)


def test_ema_random_elementwise():
    t = sn.make_teacher(randomized(TINY, 1))
    before = t.params.copy()
    s = randomized(TINY, 2)
    sn.ema_update(t, s)
    for k, v in t.params.arrays.items():
        np.testing.assert_allclose(v, 0.99 * before.arrays[k] + 0.01 * s.arrays[k], rtol=0, atol=1e-12)


def test_ema_shape_mismatch():
    t = sn.make_teacher(sn.init_params(TINY, 0))
    with pytest.raises(gc.ShapeError):
        sn.ema_update(t, sn.init_params(sn.ArchSpec(3, 5, levels=2, base_channels=2), 0))


def test_extend_with_scs_keeps_backbone():
    bb = randomized(sn.ArchSpec(3, levels=2, base_channels=2), 0)
    ext = sn.extend_with_scs(bb, 6, seed=1)
    assert ext.has_scs and ext.spec.scs_classes == 6
    for k, v in bb.arrays.items():
        np.testing.assert_array_equal(ext.arrays[k], v)


# --- checkpoints -------------------------------------------------------------------

def test_checkpoint_round_trip(tmp_path):
    s = randomized(TINY, 0)
    t = sn.make_teacher(randomized(TINY, 1))
    path = tmp_path / "m.ckpt"
    sn.save_checkpoint(path, sn.pack_models(s, t))
    s2, t2 = sn.unpack_models(sn.load_checkpoint(path))
    assert s2.spec == TINY
    for k in s.arrays:
        assert s.arrays[k].tobytes() == s2.arrays[k].tobytes()
        assert t.params.arrays[k].tobytes() == t2.arrays[k].tobytes()


def test_checkpoint_bad_magic_names_file(tmp_path):
    path = tmp_path / "m.ckpt"
    sn.save_checkpoint(path, sn.pack_models(sn.init_params(TINY, 0)))
    path.write_bytes(b"XXXX" + path.read_bytes()[4:])
    with pytest.raises(sn.CheckpointError, match="m.ckpt"):
        sn.load_checkpoint(path)


def test_checkpoint_truncated(tmp_path):
    path = tmp_path / "m.ckpt"
    sn.save_checkpoint(path, sn.pack_models(sn.init_params(TINY, 0)))
    path.write_bytes(path.read_bytes()[:-5])
    with pytest.raises(sn.CheckpointError, match="truncated"):
        sn.load_checkpoint(path)


def test_checkpoint_future_version(tmp_path):
    path = tmp_path / "m.ckpt"
    sn.save_checkpoint(path, {"student.x": np.zeros(2)})
    raw = bytearray(path.read_bytes())
    raw[4:8] = (99).to_bytes(4, "little")
    path.write_bytes(bytes(raw))
    with pytest.raises(sn.CheckpointError, match="version 99"):
        sn.load_checkpoint(path)


def test_checkpoint_missing(tmp_path):
    with pytest.raises(FileNotFoundError):
        sn.load_checkpoint(tmp_path / "nope.ckpt")


@pytest.mark.parametrize("cut", [0, 3, 9, 17, 40, 200])
def test_checkpoint_any_truncation_is_named_error(tmp_path, cut):
    path = tmp_path / "m.ckpt"
    sn.save_checkpoint(path, sn.pack_models(sn.init_params(TINY, 0)))
    path.write_bytes(path.read_bytes()[:cut])
    with pytest.raises(sn.CheckpointError):
        sn.load_checkpoint(path)
