from dataclasses import replace

import numpy as np
import pytest

from cmr import tensor as T
from cmr.config import ConfigError, ModelConfig, tiny_config
from cmr.gradcheck import model_grad_check
from cmr.model import block_layout, forward, init_params, loss, make_batch, predict_labels, predict_scores
from cmr.tensor import Tensor, grad_check

from conftest import random_examples


def run(cfg, n=2, seed=0):
    P = init_params(cfg, seed=seed).leaves(False)
    return forward(make_batch(random_examples(cfg, n, seed=seed), cfg), P, cfg)


def test_nlvr_phi_has_six_blocks():
    res = run(tiny_config("nlvr"))
    assert res.phi.shape == (2, 48)
    assert res.block_labels == [
        "entity:text-img1", "entity:text-img2", "entity:img1-img2",
        "relational:text-img1", "relational:text-img2", "relational:img1-img2",
    ]
    assert res.logits.shape == (2,)


def test_vqa_phi_has_two_blocks():
    cfg = tiny_config("vqa")
    res = run(cfg)
    assert res.phi.shape == (2, 16)
    assert res.block_labels == ["entity:text-img1", "relational:text-img1"]
    assert res.logits.shape == (2, cfg.n_classes)


@pytest.mark.parametrize("variant,n_blocks", [("full", 6), ("no_entity", 3), ("no_rel", 3), ("no_xmod", 6), ("no_smod", 6)])
def test_variant_block_counts(variant, n_blocks):
    cfg = replace(tiny_config("nlvr"), variant=variant)
    assert len(block_layout(cfg)) == n_blocks
    assert run(cfg).phi.shape == (2, n_blocks * cfg.d)


def test_variant_parameter_sets():
    base = set(init_params(tiny_config("nlvr")).names())
    no_rel = set(init_params(replace(tiny_config("nlvr"), variant="no_rel")).names())
    no_ent = set(init_params(replace(tiny_config("nlvr"), variant="no_entity")).names())
    no_x = set(init_params(replace(tiny_config("nlvr"), variant="no_xmod")).names())
    assert not any(n.startswith(("relation.", "relational_cnn.")) for n in no_rel)
    assert not any(n.startswith("entity_cnn.") for n in no_ent)
    assert not any(n.startswith("cross.") for n in no_x)
    assert no_x < base


def test_head_has_three_hidden_layers():
    store = init_params(tiny_config("nlvr"))
    heads = sorted({n.rsplit(".", 1)[0] for n in store.names() if n.startswith("head.")})
    assert heads == ["head.mlp.0", "head.mlp.1", "head.mlp.2", "head.mlp.3"]


def test_forward_is_deterministic():
    cfg = tiny_config("nlvr")
    assert run(cfg).logits.data.tobytes() == run(cfg).logits.data.tobytes()


def test_unknown_variant_and_task():
    with pytest.raises(ConfigError):
        replace(tiny_config(), variant="no_head").validate()
    with pytest.raises(ConfigError):
        replace(tiny_config(), task="retrieval").validate()


def test_top_k_bounded_by_candidates():
    with pytest.raises(ConfigError, match="top_k"):
        replace(tiny_config(), top_k=7).validate()


def test_losses_at_reference_points():
    nlvr, vqa = tiny_config("nlvr"), replace(tiny_config("vqa"), n_classes=4)
    for y in (0, 1):
        assert loss(Tensor([0.0]), [y], nlvr).item() == pytest.approx(np.log(2), abs=1e-12)
    assert loss(Tensor(np.zeros((2, 4))), [0, 3], vqa).item() == pytest.approx(np.log(4), abs=1e-12)
    assert np.log(4) == pytest.approx(1.3863, abs=1e-4)


def test_loss_rejects_bad_labels():
    with pytest.raises(ValueError):
        loss(Tensor([0.0]), [2], tiny_config("nlvr"))
    with pytest.raises(ValueError):
        loss(Tensor(np.zeros((1, 3))), [3], tiny_config("vqa"))


def test_loss_gradients_tight(rng):
    z = Tensor(rng.standard_normal(5), requires_grad=True)
    assert grad_check(lambda a: loss(a, [0, 1, 1, 0, 1], tiny_config("nlvr")), [z], tol=1e-6).passed
    z = Tensor(rng.standard_normal((4, 3)), requires_grad=True)
    assert grad_check(lambda a: loss(a, [0, 2, 1, 1], tiny_config("vqa")), [z], tol=1e-6).passed


def test_predictions(rng):
    nlvr, vqa = tiny_config("nlvr"), tiny_config("vqa")
    logits = np.array([-2.0, 0.5, 800.0])
    probs = predict_scores(logits, nlvr)
    np.testing.assert_allclose(probs.sum(axis=1), 1.0)
    np.testing.assert_array_equal(predict_labels(logits, nlvr), [0, 1, 1])
    z = rng.standard_normal((4, 3))
    np.testing.assert_array_equal(predict_labels(z, vqa), z.argmax(axis=1))
    np.testing.assert_array_equal(predict_scores(z, vqa).argmax(axis=1), z.argmax(axis=1))


def test_wrong_image_count():
    cfg = tiny_config("nlvr")
    batch = make_batch(random_examples(tiny_config("vqa"), 1), tiny_config("vqa"))
    with pytest.raises(ValueError, match="expects 2 images"):
        forward(batch, init_params(cfg).leaves(False), cfg)


def test_padding_tokens_do_not_change_logits():
    cfg = tiny_config("nlvr")
    P = init_params(cfg, seed=1).leaves(False)
    exs = random_examples(cfg, 1, n_tokens=2)
    batch = make_batch(exs, cfg)
    a = forward(batch, P, cfg).logits.data
    batch.tokens[:, 2:] = 7
    b = forward(batch, P, cfg).logits.data
    np.testing.assert_allclose(a, b, atol=1e-12)


def test_batch_rows_are_independent():
    cfg = tiny_config("vqa")
    P = init_params(cfg, seed=1).leaves(False)
    exs = random_examples(cfg, 3, seed=8)
    together = forward(make_batch(exs, cfg), P, cfg).logits.data
    alone = np.concatenate([forward(make_batch([e], cfg), P, cfg).logits.data for e in exs])
    np.testing.assert_allclose(together, alone, atol=1e-12)


@pytest.mark.parametrize("task", ["nlvr", "vqa"])
def test_tiny_model_gradient(task):
    check = model_grad_check(task=task, seed=1)
    assert check.report.passed, f"{check.report} worst={check.worst_parameter}"
    assert check.n_params == init_params(tiny_config(task)).n_trainable()


def test_reference_scale_config_defaults():
    cfg = ModelConfig()
    assert (cfg.n_text, cfg.n_visual, cfg.top_k) == (20, 36, 10)
    assert (cfg.n_visual_layers, cfg.n_cross_layers, cfg.n_text_layers) == (5, 5, 2)
