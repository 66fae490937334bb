from dataclasses import replace

import numpy as np
import pytest

from cmr.config import tiny_config
from cmr.encoders import InputError, encode_text, encode_visual, pad_tokens
from cmr.model import init_params
from cmr.tensor import ShapeError


@pytest.fixture
def setup():
    cfg = tiny_config("nlvr")
    return cfg, init_params(cfg, seed=0).leaves(requires_grad=False)


def _text(cfg, P, seqs):
    ids, mask = pad_tokens(seqs, cfg)
    return encode_text(ids, mask, P, cfg)


def test_text_shapes_and_mask(setup):
    cfg, P = setup
    es = _text(cfg, P, [[1, 2], [3, 4, 5, 6]])
    assert es.representations.shape == (2, cfg.d, cfg.n_text)
    np.testing.assert_array_equal(es.mask, [[1, 1, 0, 0], [1, 1, 1, 1]])
    assert es.modality == "text" and es.name == "text"


def test_empty_text_gives_all_false_mask(setup):
    cfg, P = setup
    es = _text(cfg, P, [[]])
    assert not es.mask.any()
    assert np.all(np.isfinite(es.representations.data))


def test_text_is_deterministic(setup):
    cfg, P = setup
    a = _text(cfg, P, [[1, 2, 3]]).representations.data
    b = _text(cfg, P, [[1, 2, 3]]).representations.data
    assert a.tobytes() == b.tobytes()


def test_padding_content_does_not_leak(setup):
    cfg, P = setup
    mask = np.array([[True, True, False, False]])
    a = encode_text(np.array([[1, 2, 0, 0]]), mask, P, cfg).representations.data
    b = encode_text(np.array([[1, 2, 9, 7]]), mask, P, cfg).representations.data
    np.testing.assert_allclose(a[..., :2], b[..., :2], atol=1e-12)
    assert not np.allclose(a[..., 2:], b[..., 2:])


def test_over_length_text_truncates(setup):
    cfg, P = setup
    ids, mask = pad_tokens([[1, 2, 3, 4, 5, 6, 7]], cfg)
    assert ids.shape == (1, cfg.n_text) and mask.all()
    np.testing.assert_array_equal(ids[0], [1, 2, 3, 4])


def test_unknown_token_rejected(setup):
    cfg, P = setup
    with pytest.raises(InputError):
        pad_tokens([[cfg.vocab_size]], cfg)
    with pytest.raises(InputError):
        encode_text(np.full((1, cfg.n_text), -1), np.ones((1, cfg.n_text), bool), P, cfg)


def test_text_contextualisation(setup):
    cfg, P = setup
    a = _text(cfg, P, [[1, 2, 3, 4]]).representations.data
    b = _text(cfg, P, [[1, 2, 3, 8]]).representations.data
    assert np.abs(a[..., 0] - b[..., 0]).max() > 1e-6


def test_visual_segment_distinguishes_images(setup, rng):
    cfg, P = setup
    feats = rng.standard_normal((1, cfg.n_visual, cfg.d_raw_v))
    one = encode_visual(feats, 1, P, cfg)
    two = encode_visual(feats, 2, P, cfg)
    assert one.name == "img1" and two.name == "img2"
    assert not np.allclose(one.representations.data, two.representations.data)


def test_visual_zero_features_are_finite(setup):
    cfg, P = setup
    es = encode_visual(np.zeros((cfg.n_visual, cfg.d_raw_v)), 1, P, cfg)
    assert es.representations.shape == (1, cfg.d, cfg.n_visual)
    assert np.all(np.isfinite(es.representations.data)) and es.mask.all()


def test_visual_deterministic(setup, rng):
    cfg, P = setup
    feats = rng.standard_normal((2, cfg.n_visual, cfg.d_raw_v))
    a = encode_visual(feats, 1, P, cfg).representations.data
    b = encode_visual(feats, 1, P, cfg).representations.data
    assert a.tobytes() == b.tobytes()


def test_visual_wrong_width(setup):
    cfg, P = setup
    with pytest.raises(ShapeError, match="ROI features"):
        encode_visual(np.zeros((cfg.n_visual, cfg.d_raw_v + 1)), 1, P, cfg)
    with pytest.raises(InputError):
        encode_visual(np.zeros((cfg.n_visual, cfg.d_raw_v)), 3, P, cfg)


def test_visual_contextualisation(setup, rng):
    cfg, P = setup
    feats = rng.standard_normal((1, cfg.n_visual, cfg.d_raw_v))
    other = feats.copy()
    other[0, 3] = 0.0
    a = encode_visual(feats, 1, P, cfg).representations.data
    b = encode_visual(other, 1, P, cfg).representations.data
    assert np.abs(a[..., 0] - b[..., 0]).max() > 1e-6


def test_frozen_tables_depend_only_on_frozen_seed():
    cfg = tiny_config("nlvr")
    a, b = init_params(cfg, seed=0), init_params(cfg, seed=9)
    for name in a.frozen_names():
        assert a[name].tobytes() == b[name].tobytes()
    assert set(a.frozen_names()) == {"frozen.segment", "frozen.text_position", "frozen.text_token"}
    assert not np.array_equal(a["text.proj.W"], b["text.proj.W"])
    c = init_params(replace(cfg, frozen_seed=1), seed=0)
    assert not np.array_equal(a["frozen.text_token"], c["frozen.text_token"])


def test_no_smod_has_no_single_modality_layers():
    cfg = replace(tiny_config("nlvr"), variant="no_smod")
    names = init_params(cfg).names()
    assert not any(n.startswith(("text.layers", "visual.layers")) for n in names)
    assert "text.proj.W" in names and "visual.proj.W" in names
