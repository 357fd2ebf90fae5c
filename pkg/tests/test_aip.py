import numpy as np
import pytest

from mgipt import aip, bench
from mgipt.aip import AipConfig, augment, consistency, dice_loss_masks, grow_prompt, tune_instance_prompt
from mgipt.net import NumericError, forward
from mgipt.prompt import PromptGrid, apply_prompt, to_nchw


def test_grow_from_single_cell():
    p = PromptGrid(np.full((1, 1, 3), 1.7))
    g = grow_prompt(p)
    assert g.shape == (3, 3, 3)
    assert np.all(g.values[1, 1] == 1.7) and np.all(g.frozen[1, 1])
    ring = np.ones((3, 3), bool)
    ring[1, 1] = False
    assert np.all(g.values[ring] == 1.0) and not g.frozen[ring].any()


def test_growth_twice_mask_counts():
    g = grow_prompt(grow_prompt(PromptGrid.ones(1, 1, 3)))
    assert g.shape == (5, 5, 3)
    per_channel_trainable = (~g.frozen).sum(axis=(0, 1))
    assert per_channel_trainable.tolist() == [16, 16, 16]
    assert g.frozen[1:4, 1:4].all() and not g.frozen[0].any() and not g.frozen[-1].any()
    # cells contributed by the two rings: 8 (frozen) + 16 (trainable)
    ring_cells = np.ones((5, 5), bool)
    ring_cells[2, 2] = False
    assert ring_cells.sum() == 24


def test_grown_prompt_acts_like_its_parent():
    rng = np.random.default_rng(0)
    x = rng.uniform(size=(16, 16, 3))
    p = PromptGrid(rng.uniform(0.5, 1.5, (3, 3, 3)))
    np.testing.assert_allclose(apply_prompt(grow_prompt(p), x), apply_prompt(p, x), atol=1e-12)


def test_grow_rejects_even_or_rectangular():
    with pytest.raises(ValueError):
        grow_prompt(PromptGrid.ones(2, 2, 3))
    with pytest.raises(ValueError):
        grow_prompt(PromptGrid.ones(3, 5, 3))


def test_dice_loss_hand_values():
    fg = np.ones((2, 4, 4), bool)
    bg = np.zeros((2, 4, 4), bool)
    assert dice_loss_masks(fg, bg) == pytest.approx(1 - 1 / 17, abs=1e-12)
    left = np.zeros((2, 4, 4), bool)
    left[:, :, :2] = True
    assert dice_loss_masks(left, ~left) == pytest.approx(1 - 1 / 17, abs=1e-12)
    assert dice_loss_masks(left, left) == 0.0
    assert dice_loss_masks(bg, bg) == 0.0


def test_consistency_thresholds_sigmoid():
    z = np.random.default_rng(1).normal(size=(2, 8, 8))
    assert consistency(z, z) == 0.0
    assert consistency(z, z + 1e-9 * np.sign(z)) == 0.0
    assert consistency(np.full((2, 4, 4), 3.0), np.full((2, 4, 4), -3.0)) == pytest.approx(1 - 1 / 17)


def test_augment_cases():
    rng = np.random.default_rng(4)
    x = rng.uniform(size=(8, 8, 3))
    assert np.array_equal(augment(x, 1.0, 1.0), x)
    flat = augment(x, 1.1, 0.0)
    np.testing.assert_allclose(flat, min(1.1 * x.mean(), 1.0))
    m = x.mean()
    ref = np.empty_like(x)
    for idx in np.ndindex(x.shape):
        v = 0.8 * (x[idx] - m) + m + 0.2 * m
        ref[idx] = min(max(v, 0.0), 1.0)
    np.testing.assert_allclose(augment(x, 1.2, 0.8), ref, atol=1e-15)
    with pytest.raises(ValueError):
        augment(x, 0.0, 1.0)


def test_config_validation():
    for kw in ({"epochs_per_scale": 0}, {"max_scale_steps": 0}, {"patience": 0}):
        with pytest.raises(ValueError):
            AipConfig(**kw)


def test_single_scale_budget(source_net):
    x = bench.generate_domain("D", 1, seed=3).images[0]
    res = tune_instance_prompt(x, source_net, AipConfig(max_scale_steps=1))
    assert len(res.consistency_trace) == 1 and res.steps_taken == 1
    assert res.best_scale == 1 and res.best_prompt.shape == (1, 1, 3)
    assert not np.allclose(res.best_prompt.values, 1.0)


@pytest.mark.parametrize("patience", [1, 2])
def test_constant_image_stops_after_patience(source_net, patience):
    # only the DC bin is non-zero, so rings added after the first scale change nothing
    x = np.full((64, 64, 3), 0.4)
    res = tune_instance_prompt(x, source_net, AipConfig(patience=patience))
    assert len(set(res.consistency_trace)) == 1
    assert res.steps_taken == patience + 1
    assert res.best_scale == 1


def test_bookkeeping_and_frozen_stability(source_net, monkeypatch):
    snapshots = []
    real = aip.measure_consistency

    def spy(prompt, *args):
        snapshots.append(prompt.copy())
        return real(prompt, *args)

    monkeypatch.setattr(aip, "measure_consistency", spy)
    x = bench.generate_domain("E", 1, seed=8).images[0]
    res = tune_instance_prompt(x, source_net, AipConfig(patience=6))
    assert res.steps_taken == 6 and len(snapshots) == 6
    for before, after in zip(snapshots, snapshots[1:]):
        assert np.array_equal(after.values[1:-1, 1:-1], before.values)
    k = (res.best_scale - 1) // 2
    assert min(res.consistency_trace) == res.consistency_trace[k]
    assert np.array_equal(res.best_prompt.values, snapshots[k].values)


@pytest.mark.parametrize("fail_at", [0, 2])
def test_numeric_abort_is_fail_safe(source_net, monkeypatch, fail_at):
    real = aip.align_loss_and_grad
    cfg = AipConfig(patience=6)

    def flaky(prompt, *args):
        if prompt.size == 2 * fail_at + 1:
            raise NumericError("injected")
        return real(prompt, *args)

    monkeypatch.setattr(aip, "align_loss_and_grad", flaky)
    x = bench.generate_domain("C", 1, seed=2).images[0]
    res = tune_instance_prompt(x, source_net, cfg)
    assert res.aborted
    assert len(res.consistency_trace) <= fail_at
    if fail_at == 0:
        assert np.array_equal(res.best_prompt.values, np.ones((1, 1, 3)))
    logits = forward(source_net, to_nchw(apply_prompt(res.best_prompt, x)), 0.8)[0]
    assert np.all(np.isfinite(logits))


def test_best_scale_varies_across_samples(source_net):
    images = np.concatenate([bench.generate_domain(d, 13, seed=21).images for d in "BCDE"])[:50]
    scales = {tune_instance_prompt(img, source_net).best_scale for img in images}
    assert len(scales) >= 2
