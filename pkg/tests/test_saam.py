import numpy as np
import pytest

from helpers import binary_mask, check_op, store_of
from sdaanet import functional as F
from sdaanet.params import ParamStore
from sdaanet.saam import (
    bin_channels,
    build_conditioned_feature,
    init_saam,
    pixel_cross_entropy,
    pyramid_extract,
    saam_forward,
)
from sdaanet.sdpm import masked_gap
from sdaanet.tensor import Tensor

SEEDS = range(20)


def t(a):
    return Tensor(np.asarray(a, dtype=np.float64))


def saam_store(d, seed, bins=(1, 2, 3, 6)):
    store = ParamStore(np.float64)
    init_saam(store, d, np.random.default_rng(seed), bins)
    return store


def test_conditioned_feature_layout():
    rng = np.random.default_rng(0)
    f, p = rng.standard_normal((2, 3, 4, 5)), rng.standard_normal((2, 3))
    out = build_conditioned_feature(t(f), t(p)).data
    assert out.shape == (2, 6, 4, 5)
    np.testing.assert_array_equal(out[:, :3], f)
    for n in range(2):
        for c in range(3):
            assert (out[n, 3 + c] == p[n, c]).all()
    with pytest.raises(ValueError):
        build_conditioned_feature(t(f), t(p[:, :2]))


def test_pyramid_output_shape_and_param_names():
    store = saam_store(8, 0)
    assert sorted(store.names()) == sorted(
        [f"saam.ppm.bin{b}.{k}" for b in (1, 2, 3, 6) for k in ("weight", "bias")]
        + [f"saam.{m}.{k}" for m in ("ppm.merge", "head_support", "head_query") for k in ("weight", "bias")]
    )
    out = pyramid_extract(t(np.random.default_rng(0).standard_normal((2, 16, 5, 7))), store)
    assert out.shape == (2, 8, 5, 7)


def test_pyramid_small_map_clamps_bins():
    store = saam_store(8, 1)
    out = pyramid_extract(t(np.ones((1, 16, 2, 3))), store)
    assert out.shape == (1, 8, 2, 3) and np.isfinite(out.data).all()


def test_pyramid_constant_input_constant_interior():
    store = saam_store(4, 2)
    x = np.broadcast_to(np.arange(8.0).reshape(1, 8, 1, 1), (1, 8, 6, 6)).copy()
    out = pyramid_extract(t(x), store).data
    # only the zero-padded border of the 3x3 merge conv can differ
    inner = out[:, :, 1:-1, 1:-1]
    np.testing.assert_allclose(inner, inner[:, :, :1, :1] * np.ones_like(inner), atol=1e-12)


def test_pyramid_single_bin_composition():
    store = saam_store(4, 3, bins=(1,))
    x = np.random.default_rng(3).standard_normal((1, 8, 4, 4))
    out = pyramid_extract(t(x), store, bins=(1,)).data
    wb, bb = store["saam.ppm.bin1.weight"].data, store["saam.ppm.bin1.bias"].data
    pooled = x.mean(axis=(2, 3))  # (1, 8)
    proj = pooled @ wb[:, :, 0, 0].T + bb  # (1, 1)
    up = np.broadcast_to(proj[:, :, None, None], (1, proj.shape[1], 4, 4))
    merged = np.concatenate([x, up], axis=1)
    wm, bm = store["saam.ppm.merge.weight"].data, store["saam.ppm.merge.bias"].data
    padded = np.pad(merged, ((0, 0), (0, 0), (1, 1), (1, 1)))
    ref = np.zeros((1, 4, 4, 4))
    for i in range(4):
        for j in range(4):
            ref[:, :, i, j] = np.einsum("nchw,ochw->no", padded[:, :, i : i + 3, j : j + 3], wm) + bm
    np.testing.assert_allclose(out, np.maximum(ref, 0), atol=1e-5)


def test_cross_entropy_examples():
    assert pixel_cross_entropy(t(np.zeros((2, 2, 3, 3))), np.ones((2, 1, 3, 3))).item() == pytest.approx(np.log(2.0), abs=1e-12)
    loss = pixel_cross_entropy(t([[[[1.0]], [[0.0]]]]), np.ones((1, 1, 1, 1))).item()
    assert loss == pytest.approx(np.log(1 + np.e) - 0.0, abs=1e-6)
    assert loss == pytest.approx(1.3133, abs=1e-4)
    sure = np.zeros((1, 2, 2, 2))
    sure[:, 1] = 60.0
    assert pixel_cross_entropy(t(sure), np.ones((1, 1, 2, 2))).item() < 1e-20
    with pytest.raises(ValueError):
        pixel_cross_entropy(t(np.zeros((1, 2, 3, 3))), np.ones((1, 1, 2, 2)))


@pytest.mark.parametrize("seed", SEEDS)
def test_gradcheck_cross_entropy(seed):
    rng = np.random.default_rng(seed)
    target = binary_mask(rng, 2, 3, 3)
    assert check_op(lambda z: pixel_cross_entropy(z, target), [rng.standard_normal((2, 2, 3, 3)) * 2], seed) < 1e-3


def forward_inputs(seed, k=1, n=2, d=4, h=4, w=4):
    rng = np.random.default_rng(seed)
    feats = [rng.uniform(0, 1, (n, d, h, w)) for _ in range(k)]
    masks = [binary_mask(rng, n, h, w) for _ in range(k)]
    return feats, masks, rng.uniform(0, 1, (n, d, h, w))


def test_saam_output_contract():
    feats, masks, q = forward_inputs(0, k=2)
    out = saam_forward([t(f) for f in feats], masks, t(q), saam_store(4, 0))
    assert out.query_attention.shape == (2, 1, 4, 4)
    assert ((out.query_attention.data >= 0) & (out.query_attention.data <= 1)).all()
    assert len(out.support_logits) == 2 and out.support_logits[0].shape == (2, 2, 4, 4)
    assert out.support_ce_loss.item() >= 0


def test_duplicated_support_keeps_loss():
    feats, masks, q = forward_inputs(1, k=1)
    store = saam_store(4, 1)
    one = saam_forward([t(feats[0])], masks, t(q), store).support_ce_loss.item()
    three = saam_forward([t(feats[0])] * 3, masks * 3, t(q), store).support_ce_loss.item()
    assert three == pytest.approx(one, abs=1e-6)


def test_support_and_query_share_extractor():
    feats, masks, _ = forward_inputs(2, k=1)
    store = saam_store(4, 2)
    out = saam_forward([t(feats[0])], masks, t(feats[0]), store)
    proto = masked_gap(t(feats[0]), masks[0])
    pyr = pyramid_extract(build_conditioned_feature(t(feats[0]), proto), store).data
    # query attention is computed from the same pyramid output the support head sees
    zq = np.einsum("nchw,oc->nohw", pyr, store["saam.head_query.weight"].data[:, :, 0, 0]) + store["saam.head_query.bias"].data[None, :, None, None]
    np.testing.assert_allclose(out.query_attention.data, 1 / (1 + np.exp(-zq)), atol=1e-12)


def test_mask_mismatch_raises():
    feats, masks, q = forward_inputs(3)
    with pytest.raises(ValueError):
        saam_forward([t(feats[0])], [np.ones((2, 1, 2, 2))], t(q), saam_store(4, 3))


def test_bin_channels():
    assert bin_channels(64, (1, 2, 3, 6)) == 16 and bin_channels(2, (1, 2, 3, 6)) == 1


SAAM_NAMES = tuple(saam_store(2, 0).names())


def _clear_of_kinks(feats, masks, q, store, margin=1e-2):
    """True when no merge-conv pre-activation sits within ``margin`` of zero
    and at least a quarter of them are active."""
    from sdaanet.tensor import concat

    k = len(feats)
    proto = masked_gap(t(feats[0]), masks[0])
    for f, m in zip(feats[1:], masks[1:]):
        proto = proto + masked_gap(t(f), m)
    proto = proto * (1.0 / k)
    x = concat([build_conditioned_feature(t(f), proto) for f in [*feats, q]], axis=0)
    h, w = x.shape[2:]
    branches = [x]
    for b in (1, 2, 3, 6):
        size = min(b, h, w)
        proj = F.conv2d(F.adaptive_avg_pool(x, size, size), store[f"saam.ppm.bin{b}.weight"], store[f"saam.ppm.bin{b}.bias"])
        branches.append(F.bilinear_resize(proj, h, w))
    pre = F.conv2d(concat(branches, axis=1), store["saam.ppm.merge.weight"], store["saam.ppm.merge.bias"], padding=1).data
    return np.abs(pre).min() > margin and (pre > 0).mean() >= 0.25


@pytest.mark.parametrize("seed", SEEDS)
def test_gradcheck_saam(seed):
    # draw until the ReLU in the merge conv is clear of its kink by more than eps
    for trial in range(50):
        sub = seed * 1000 + trial
        feats, masks, q = forward_inputs(sub, k=1 + seed % 2, n=1, d=2, h=3, w=3)
        base = saam_store(2, sub)
        if _clear_of_kinks(feats, masks, q, base):
            break
    k = len(feats)

    def op(*arrs):
        fs, fq, ws = arrs[:k], arrs[k], arrs[k + 1 :]
        out = saam_forward(list(fs), masks, fq, store_of(dict(zip(SAAM_NAMES, ws))))
        return out.query_attention.sum() + out.support_ce_loss * 3.0

    arrs = [*feats, q] + [base[n].data for n in SAAM_NAMES]
    assert check_op(op, arrs, seed) < 1e-3


def test_support_ce_overfits_monotonically():
    # frozen real episode, small trainable encoder feeding SAAM, plain gradient descent
    from sdaanet.data import downsample_mask, make_episode
    from sdaanet.model import ModelConfig, encode, init_params

    store = init_params(ModelConfig(widths=(8, 16, 16, 16), feat_dim=16, use_sdpm=False), 0)
    ep = make_episode(0, 1, 5)
    images = Tensor(np.concatenate([ep.support[0].image, ep.query.image]))
    mask = downsample_mask(ep.support[0].mask, 8, 8)
    losses = []
    for _ in range(200):
        store.zero_grad()
        feats = encode(images, store)
        loss = saam_forward([feats[:1]], [mask], feats[1:], store).support_ce_loss
        loss.backward()
        losses.append(loss.item())
        for _, p in store.items():
            p.data -= 0.05 * p.grad
    assert all(b < a for a, b in zip(losses, losses[1:]))
    assert losses[-1] < 0.1 * losses[0]
