import numpy as np
import pytest

from oracles import central_diff, rel_err
from ucl import tensorgrad as tg
from ucl.encoders import (
    TextEncoderConfig,
    VisualEncoderConfig,
    encode_feature_map,
    encode_images,
    encode_texts,
    init_parameters,
    patchify,
)
from ucl.errors import ConfigError, ShapeError, VocabularyError
from ucl.tensorgrad import Tape, Tensor

VCFG = VisualEncoderConfig()
TCFG = TextEncoderConfig(vocab_size=59)
SMALL_V = VisualEncoderConfig(image_size=8, patch_size=4, width=8, depth=1, heads=2, out_dim=6)
SMALL_T = TextEncoderConfig(vocab_size=9, max_len=5, width=8, depth=1, heads=2, out_dim=6)


@pytest.fixture(scope="module")
def pair():
    return init_parameters(VCFG, TCFG, seed=0)


def jittered_small(seed=0, pooling="mean"):
    t = TextEncoderConfig(**{**SMALL_T.__dict__, "pooling": pooling})
    p = init_parameters(SMALL_V, t, seed)
    rng = np.random.default_rng(seed + 100)
    for x in p.params.values():
        x.data = x.data + rng.normal(0, 0.3, size=x.shape)
    return p


def closed_form_count(v: VisualEncoderConfig, t: TextEncoderConfig) -> int:
    def block(w):
        return 2 * w + 3 * w * w + w * w + w + 2 * w + (w * 4 * w + 4 * w) + (4 * w * w + w)

    visual = 3 * v.patch_size ** 2 * v.width + v.width + v.num_patches * v.width
    visual += v.depth * block(v.width) + 2 * v.width + v.width * v.out_dim
    text = t.vocab_size * t.width + t.max_len * t.width + t.depth * block(t.width) + 2 * t.width + t.width * t.out_dim
    return visual + text


def test_parameter_count_matches_formula(pair):
    assert pair.num_parameters() == closed_form_count(VCFG, TCFG) == 226816


def test_init_deterministic_and_seed_sensitive(pair):
    again = init_parameters(VCFG, TCFG, seed=0)
    assert all(np.array_equal(pair[n].data, again[n].data) for n in pair.params)
    other = init_parameters(VCFG, TCFG, seed=1)
    assert any(not np.array_equal(pair[n].data, other[n].data) for n in pair.params)


def test_init_statistics(pair):
    assert np.all(pair["visual.block0.ln1.g"].data == 1.0)
    assert np.all(pair["visual.block0.attn.out.b"].data == 0.0)
    assert abs(np.std(pair["text.tok"].data) - 0.02) < 0.002


def test_invalid_configs():
    with pytest.raises(ConfigError):
        VisualEncoderConfig(image_size=30, patch_size=8).validate()
    with pytest.raises(ConfigError):
        VisualEncoderConfig(width=30, heads=4).validate()
    with pytest.raises(ConfigError):
        init_parameters(VCFG, TextEncoderConfig(vocab_size=10, out_dim=32), 0)


def test_patchify_order():
    img = np.arange(3 * 4 * 4, dtype=float).reshape(1, 3, 4, 4)
    p = patchify(img, 2)
    assert p.shape == (1, 4, 12)
    # second patch is the top-right 2x2 block of every channel
    assert p[0, 1].tolist() == [img[0, c, y, x] for c in range(3) for y in (0, 1) for x in (2, 3)]


def test_encode_images_shapes(pair, rng):
    assert encode_images(pair, np.zeros((0, 3, 32, 32))).shape == (0, 64)
    out = encode_images(pair, rng.uniform(size=(2, 3, 32, 32)))
    assert out.shape == (2, 64) and np.isfinite(out.data).all()
    with pytest.raises(ShapeError):
        encode_images(pair, np.zeros((1, 3, 16, 16)))


def test_duplicated_images_give_identical_rows(pair, rng):
    img = rng.uniform(size=(1, 3, 32, 32))
    out = encode_images(pair, np.concatenate([img, img])).data
    assert np.array_equal(out[0], out[1])


def test_feature_map_mean_equals_pooled(pair, rng):
    imgs = rng.uniform(size=(3, 3, 32, 32))
    fmap = encode_feature_map(pair, imgs).data
    assert fmap.shape == (3, 16, 64)
    assert np.max(np.abs(fmap.mean(axis=1) - encode_images(pair, imgs).data)) < 1e-10


def test_constant_image_rows_identical_without_positions(pair):
    img = np.full((1, 3, 32, 32), 0.4)
    fmap = encode_feature_map(pair, img).data[0]
    assert np.ptp(fmap, axis=0).max() > 0  # positions make rows differ
    saved = pair["visual.pos"].data
    try:
        pair["visual.pos"].data = np.zeros_like(saved)
        flat = encode_feature_map(pair, img).data[0]
    finally:
        pair["visual.pos"].data = saved
    assert np.allclose(flat, flat[0], rtol=0, atol=1e-14)


def _tokens(rng, lengths, max_len, vocab):
    ids = np.zeros((len(lengths), max_len), dtype=np.int64)
    mask = np.zeros_like(ids, dtype=bool)
    for i, n in enumerate(lengths):
        ids[i, :n] = rng.integers(3, vocab, size=n)
        mask[i, :n] = True
    return ids, mask


def test_encode_texts_padding_has_no_influence(pair, rng):
    ids, mask = _tokens(rng, [4, 9, 2], 32, 59)
    base = encode_texts(pair, ids, mask).data
    noisy = np.where(mask, ids, rng.integers(0, 59, size=ids.shape))
    assert np.array_equal(encode_texts(pair, noisy, mask).data, base)


def test_encode_texts_identical_rows(pair, rng):
    ids, mask = _tokens(rng, [5], 32, 59)
    out = encode_texts(pair, np.repeat(ids, 2, axis=0), np.repeat(mask, 2, axis=0)).data
    assert np.array_equal(out[0], out[1])


def test_encode_texts_errors(pair):
    ids = np.zeros((1, 32), dtype=np.int64)
    mask = np.zeros((1, 32), dtype=bool)
    mask[0, 0] = True
    with pytest.raises(VocabularyError):
        encode_texts(pair, np.where(mask, 59, 0), mask)
    with pytest.raises(ShapeError):
        encode_texts(pair, ids[:, :10], mask[:, :10])
    bad = mask.copy()
    bad[0, 3] = True
    with pytest.raises(ShapeError):
        encode_texts(pair, ids, bad)
    assert encode_texts(pair, ids[:0], mask[:0]).shape == (0, 64)


def test_shared_space_width(pair, rng):
    ids, mask = _tokens(rng, [3], 32, 59)
    assert encode_texts(pair, ids, mask).shape[1] == encode_images(pair, rng.uniform(size=(1, 3, 32, 32))).shape[1]


def test_outputs_finite_under_random_inputs(pair, rng):
    for _ in range(10):  # 1000 random images and 1000 random token rows in total
        imgs = rng.uniform(-3, 3, size=(100, 3, 32, 32))
        assert np.isfinite(encode_images(pair, imgs).data).all()
        ids, mask = _tokens(rng, rng.integers(1, 33, size=100), 32, 59)
        assert np.isfinite(encode_texts(pair, ids, mask).data).all()


def _param_grads(f, params):
    for p in params:
        p.grad = None
    with Tape() as tape:
        loss = f()
    tape.backward(loss)
    return [np.zeros_like(p.data) if p.grad is None else p.grad for p in params]


def test_encode_images_gradient_vs_finite_differences():
    p = jittered_small()
    imgs = np.random.default_rng(5).uniform(size=(2, 3, 8, 8))
    names = [n for n in p.params if n.startswith("visual.")]
    params = [p[n] for n in names]

    def f():
        return tg.sum(encode_images(p, imgs))

    analytic = _param_grads(f, params)
    numeric = central_diff(lambda: f().item(), [x.data for x in params])
    for n, a, b in zip(names, analytic, numeric):
        assert rel_err(a, b) < 1e-5, n


@pytest.mark.parametrize("pooling", ["mean", "first"])
def test_encode_texts_gradient_through_mask(pooling):
    p = jittered_small(pooling=pooling)
    ids, mask = _tokens(np.random.default_rng(6), [2, 5, 3], 5, 9)
    names = [n for n in p.params if n.startswith("text.")]
    params = [p[n] for n in names]
    probe = Tensor(np.random.default_rng(7).normal(size=(3, 6)))

    def f():
        return tg.sum(tg.mul(encode_texts(p, ids, mask), probe))

    analytic = _param_grads(f, params)
    numeric = central_diff(lambda: f().item(), [x.data for x in params])
    for n, a, b in zip(names, analytic, numeric):
        assert rel_err(a, b) < 1e-5, n
