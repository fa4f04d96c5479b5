import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ucl.errors import ConfigError
from ucl.synthdata import (
    BACKGROUNDS,
    COLORS,
    DISTRACTORS,
    DUPLICATE_NAME,
    SHAPES,
    SIZES,
    DataConfig,
    SceneSpec,
    build_splits,
    caption_scene,
    combo_id,
    combo_of,
    mixed_batches,
    render_scene,
    scene_mask,
    write_ppm,
)
from ucl.textbank import Vocabulary

SMALL = DataConfig(train_per_class=5, eval_per_class=2, align_pairs=40, eval_align_pairs=16, seed=3)


@pytest.fixture(scope="module")
def small_splits():
    return build_splits(SMALL)


@pytest.fixture(scope="module")
def vocab(small_splits):
    return Vocabulary.build(small_splits[0].captions, max_len=32)


specs = st.builds(
    SceneSpec,
    shape=st.sampled_from(SHAPES),
    color=st.sampled_from(COLORS),
    size=st.sampled_from(SIZES),
    cell=st.integers(0, 8),
    background=st.sampled_from(BACKGROUNDS),
    noise_seed=st.integers(0, 2**31 - 1),
)


def test_render_deterministic():
    spec = SceneSpec("triangle", "green", "large", 4, "gray", 11)
    a, b = render_scene(spec), render_scene(spec)
    assert a.shape == (3, 32, 32) and np.array_equal(a, b)


@given(specs)
def test_render_range_and_mask_nonempty(spec):
    img = render_scene(spec, 24)
    assert img.min() >= 0.0 and img.max() <= 1.0
    assert scene_mask(spec, 24).any()


def test_red_and_blue_differ_only_on_the_shape():
    red = SceneSpec("square", "red", "large", 2, "dark", 5)
    blue = SceneSpec("square", "blue", "large", 2, "dark", 5)
    a, b = render_scene(red), render_scene(blue)
    mask = scene_mask(red, 32)
    diff = np.any(a != b, axis=0)
    assert diff.any() and not diff[~mask].any()
    # red dominates channel 0 on the shape, blue channel 2
    assert a[0][mask].mean() > a[2][mask].mean()
    assert b[2][mask].mean() > b[0][mask].mean()


@pytest.mark.parametrize("shape", SHAPES)
def test_large_shapes_cover_more_pixels(shape):
    small = SceneSpec(shape, "yellow", "small", 4, "dark", 0)
    large = SceneSpec(shape, "yellow", "large", 4, "dark", 0)
    assert scene_mask(large, 32).sum() > scene_mask(small, 32).sum()
    # a bright shape on a dark background: more coverage raises the mean pixel
    assert render_scene(large).mean() > render_scene(small).mean()


def test_invalid_spec():
    with pytest.raises(ConfigError):
        SceneSpec("hexagon", "red", "large", 0, "dark", 0)
    with pytest.raises(ConfigError):
        SceneSpec("square", "red", "large", 9, "dark", 0)


def test_combo_ids_roundtrip():
    assert [combo_id(*combo_of(i)) for i in range(16)] == list(range(16))
    assert combo_of(combo_id("blue", "cross")) == ("blue", "cross")


@given(specs, st.integers(0, 2**32 - 1))
def test_caption_names_color_and_shape(spec, seed):
    words = caption_scene(spec, np.random.default_rng(seed)).replace(",", "").split()
    assert spec.color in words and spec.shape in words


def test_distractor_rate_monte_carlo():
    rng = np.random.default_rng(0)
    spec = SceneSpec("cross", "blue", "small", 0, "light", 1)
    hits = sum(any(w in DISTRACTORS for w in caption_scene(spec, rng, 0.2).replace(",", "").split()) for _ in range(10_000))
    assert abs(hits / 10_000 - 0.2) <= 0.02


def test_default_split_sizes():
    train, ev = build_splits(DataConfig(align_pairs=10, eval_align_pairs=4))
    assert len(train.cls_specs) == 600
    assert len(train.catalogue) == 12 and len(ev.catalogue) == 16
    assert len(ev.cls_specs) == 16 * 20
    assert len(train.held_out_class_ids) == 4


def test_no_held_out_leakage_in_train(small_splits):
    train, ev = small_splits
    held = set(train.held_out_class_ids)
    assert not {s.class_id for s in train.cls_specs} & held
    assert not {s.class_id for s in train.align_specs} & held
    assert not {train.class_ids[i] for i in train.cls_labels} & held
    held_names = {" ".join(combo_of(c)) for c in held}
    for cap in train.captions:
        words = cap.replace(",", "").split()
        pairs = {f"{c} {s}" for c in words if c in COLORS for s in words if s in SHAPES}
        assert not pairs & held_names, cap
    assert {s.class_id for s in ev.cls_specs} == set(range(16))


def test_labels_match_specs(small_splits):
    train, ev = small_splits
    assert all(train.class_ids[l] == s.class_id for s, l in zip(train.cls_specs, train.cls_labels))
    assert all(ev.class_ids[l] == s.class_id for s, l in zip(ev.cls_specs, ev.cls_labels))


def test_eval_retrieval_pairs_are_content_distinct(small_splits):
    ev = small_splits[1]
    assert len({s.content for s in ev.align_specs}) == len(ev.align_specs) == 16


def test_duplicate_injection():
    train, ev = build_splits(DataConfig(train_per_class=1, eval_per_class=1, align_pairs=4, eval_align_pairs=4, duplicate_names=True))
    for split in (train, ev):
        jacks = [e for e in split.catalogue if e.name == DUPLICATE_NAME]
        assert len(jacks) == 2 and jacks[0].description != jacks[1].description
        names = [e.name for e in split.catalogue]
        assert len(set(names)) == len(names) - 1
        (c0, s0), (c1, s1) = (combo_of(split.class_ids[e.index]) for e in jacks)
        assert c0 != c1 and s0 != s1


def test_build_splits_deterministic():
    a, b = build_splits(SMALL), build_splits(SMALL)
    assert a[0].cls_specs == b[0].cls_specs and a[0].captions == b[0].captions
    assert a[1].align_specs == b[1].align_specs


def test_invalid_data_configs():
    everything = tuple((c, s) for c in COLORS for s in SHAPES)
    with pytest.raises(ConfigError):
        build_splits(DataConfig(held_out=everything))
    with pytest.raises(ConfigError):
        build_splits(DataConfig(held_out=(("purple", "square"),)))
    with pytest.raises(ConfigError):
        build_splits(DataConfig(distractor_rate=1.5))


def test_with_alignment(small_splits):
    ev = small_splits[1]
    swapped = ev.with_alignment(ev.align_specs[:3], ev.captions[:3])
    assert len(swapped.align_specs) == 3 and swapped.cls_specs is ev.cls_specs
    with pytest.raises(ConfigError):
        ev.with_alignment(ev.align_specs[:3], ev.captions[:2])


# ---------------------------------------------------------------------------
# sampler


def _take(stream, n):
    return [next(stream) for _ in range(n)]


@pytest.mark.parametrize("size,ratio,counts", [(8, (1, 1), (4, 4)), (6, (1, 2), (2, 4)), (8, (1, 0), (8, 0)), (4, (0, 1), (0, 4))])
def test_sampler_side_counts(small_splits, vocab, size, ratio, counts):
    for batch in _take(mixed_batches(small_splits[0], size, ratio, 0, vocab), 5):
        assert (batch.n_cls, batch.n_align) == counts
        assert len(batch.cls_images) == counts[0] and len(batch.align_images) == counts[1]


def test_sampler_rejects_bad_ratios(small_splits, vocab):
    for size, ratio in [(8, (1, 2)), (8, (0, 0)), (8, (-1, 1))]:
        with pytest.raises(ConfigError):
            next(mixed_batches(small_splits[0], size, ratio, 0, vocab))


def test_sampler_deterministic(small_splits, vocab):
    ids = lambda seed: [(b.cls_record_ids.tolist(), b.align_record_ids.tolist())  # noqa: E731
                        for b in _take(mixed_batches(small_splits[0], 8, (1, 1), seed, vocab), 12)]
    assert ids(4) == ids(4)
    assert ids(4) != ids(5)


def test_sampler_epochs_cover_each_record_once(small_splits, vocab):
    train = small_splits[0]
    n_cls, n_align = len(train.cls_specs), len(train.align_specs)  # 60 and 40
    batches = _take(mixed_batches(train, 8, (1, 1), 1, vocab), 30)
    cls_ids = np.concatenate([b.cls_record_ids for b in batches])
    align_ids = np.concatenate([b.align_record_ids for b in batches])
    assert sorted(cls_ids[:n_cls]) == list(range(n_cls))
    for e in range(len(align_ids) // n_align):
        assert sorted(align_ids[e * n_align:(e + 1) * n_align]) == list(range(n_align))


def test_sampler_batches_carry_matching_data(small_splits, vocab):
    train = small_splits[0]
    ids_all, mask_all = train.caption_tokens(vocab)
    for b in _take(mixed_batches(train, 8, (1, 1), 2, vocab), 3):
        assert np.array_equal(b.cls_labels, train.cls_labels[b.cls_record_ids])
        assert np.array_equal(b.cls_images, train.cls_images[b.cls_record_ids])
        assert np.array_equal(b.align_ids, ids_all[b.align_record_ids])
        assert np.array_equal(b.align_mask, mask_all[b.align_record_ids])
        held = set(train.held_out_class_ids)
        assert not {train.class_ids[l] for l in b.cls_labels} & held


def test_write_ppm(tmp_path):
    img = render_scene(SceneSpec("circle", "red", "large", 4, "light", 2), 8)
    path = tmp_path / "x.ppm"
    write_ppm(path, img)
    raw = path.read_bytes()
    header = b"P6\n8 8\n255\n"
    assert raw.startswith(header) and len(raw) == len(header) + 8 * 8 * 3
    pixels = np.frombuffer(raw[len(header):], dtype=np.uint8).reshape(8, 8, 3)
    assert np.array_equal(pixels, np.round(img * 255).astype(np.uint8).transpose(1, 2, 0))
