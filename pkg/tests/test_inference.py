import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from costagg.backbone import resize_image
from costagg.errors import ConfigError
from costagg.inference import (SlidingWindowConfig, _reflect_pad, coverage_count, predict_full,
                               predict_scores, sliding_window_scores, window_positions)
from costagg.training import SYNTHETIC_CLASSES, _SYNTH_COLORS
from costagg.upsample import argmax_labels

NAMES = ["grass", "road", "building"]


@pytest.mark.parametrize("args,want", [((512, 224, 112), [0, 112, 224, 288]),
                                       ((224, 224, 112), [0]),
                                       ((448, 224, 224), [0, 224])])
def test_window_positions(args, want):
    assert window_positions(*args) == want


def test_window_larger_than_extent():
    with pytest.raises(ConfigError):
        window_positions(100, 224, 112)


def test_config_validation():
    with pytest.raises(ConfigError):
        SlidingWindowConfig(512, 224, 0)
    with pytest.raises(ConfigError):
        SlidingWindowConfig(512, 224, 300)
    with pytest.raises(ConfigError):
        SlidingWindowConfig(128, 224, 112)


def test_default_coverage_counts():
    c = coverage_count(512, 512, 224, 112)
    assert c[0, 0] == c[0, -1] == c[-1, 0] == c[-1, -1] == 1
    assert c[256, 256] == 4 and c[300, 300] == 9
    assert c.max() == 9 and c.min() >= 1


@settings(max_examples=40, deadline=None)
@given(extent=st.integers(1, 300), data=st.data())
def test_coverage_at_least_one(extent, data):
    window = data.draw(st.integers(1, extent))
    stride = data.draw(st.integers(1, window))
    pos = window_positions(extent, window, stride)
    assert pos == sorted(set(pos)) and pos[0] == 0 and pos[-1] == extent - window
    assert coverage_count(extent, 3, window, stride)[:, 0].min() >= 1 if window <= 3 else True
    covered = np.zeros(extent, dtype=int)
    for p in pos:
        covered[p:p + window] += 1
    assert covered.min() >= 1


def test_no_overlap_equals_tile_concatenation(small_model):
    torch.manual_seed(0)
    img = torch.rand(1, 3, 64, 64)
    emb = small_model.embed_classes(NAMES)
    cfg = SlidingWindowConfig(64, 32, 32)
    got = predict_scores(img, small_model, cfg=cfg, embeddings=emb)
    with torch.no_grad():
        rows = [torch.cat([small_model(img[:, :, y:y + 32, x:x + 32], embeddings=emb) for x in (0, 32)], dim=3)
                for y in (0, 32)]
    assert torch.equal(got, torch.cat(rows, dim=2))


def test_window_equals_eval_resolution_is_single_pass(small_model):
    torch.manual_seed(1)
    img = torch.rand(3, 50, 70)
    cfg = SlidingWindowConfig(64, 64, 32)
    got = predict_full(img, small_model, NAMES, cfg)
    with torch.no_grad():
        scores = small_model(resize_image(img[None], (64, 64)), NAMES)
    lab = argmax_labels(scores)[None].float()
    want = torch.nn.functional.interpolate(lab, size=(50, 70), mode="nearest")[0, 0].long()
    assert got.shape == (50, 70)
    assert torch.equal(got, want)


def test_merge_independent_of_window_order(small_model):
    torch.manual_seed(2)
    img = torch.rand(1, 3, 64, 64)
    emb = small_model.embed_classes(NAMES)
    merged, count = sliding_window_scores(img, small_model, emb, 32, 16)
    acc = torch.zeros_like(merged)
    cnt = torch.zeros(64, 64)
    pos = [(y, x) for y in window_positions(64, 32, 16) for x in window_positions(64, 32, 16)]
    with torch.no_grad():
        for y, x in reversed(pos):
            acc[:, :, y:y + 32, x:x + 32] += small_model(img[:, :, y:y + 32, x:x + 32], embeddings=emb)
            cnt[y:y + 32, x:x + 32] += 1
    assert torch.equal(cnt, count)
    assert (acc / cnt - merged).abs().max() < 1e-6


def test_undersized_image_is_padded_and_cropped(small_model):
    torch.manual_seed(3)
    img = torch.rand(1, 3, 20, 24)
    cfg = SlidingWindowConfig(None, 32, 16)
    scores = predict_scores(img, small_model, NAMES, cfg)
    assert scores.shape == (1, 3, 20, 24)
    canvas, (top, left) = _reflect_pad(img, 32, 32)
    assert (top, left) == (6, 4)
    assert torch.equal(canvas[:, :, 6:26, 4:28], img)
    with torch.no_grad():
        want = small_model(canvas, NAMES)[:, :, 6:26, 4:28]
    assert torch.equal(scores, want)
    assert predict_full(img, small_model, NAMES, cfg).shape == (20, 24)


def test_uniform_image_gives_uniform_mask(trained_desk):
    model, _, _ = trained_desk
    cfg = SlidingWindowConfig(128, 64, 32)
    for cls, rgb in enumerate(_SYNTH_COLORS):
        img = torch.tensor(rgb, dtype=torch.float32)[:, None, None].expand(3, 96, 80).contiguous()
        mask = predict_full(img, model, SYNTHETIC_CLASSES, cfg)
        assert bool((mask == cls).all())
