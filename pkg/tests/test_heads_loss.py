import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from groundnlq.config import AssignmentConfig, DecodeConfig
from groundnlq.data import Moment
from groundnlq.decode_eval import decode_predictions
from groundnlq.heads_loss import (
    PAD_LOGIT,
    GroundingHeads,
    HeadOutputs,
    assign_labels,
    diou_interval_loss,
    diou_loss,
    focal_loss,
    head_forward,
    stack_targets,
    total_loss,
)
from groundnlq.pyramid import Pyramid, level_lengths

ACFG = AssignmentConfig()


def _assign_oracle(T, snippet, moment, cfg):
    """Per-location loop over the assignment rule."""
    s, e = moment.start_sec / snippet, moment.end_sec / snippet
    c = (s + e) / 2
    out = []
    n = T
    for level in range(7):
        stride = 2**level
        lo, hi = cfg.regression_ranges[level]
        row = []
        for i in range(n):
            t = (i + 0.5) * stride
            d = max(t - s, e - t)
            near = abs(t - c) <= cfg.center_sampling_radius * stride or (e - s) < 2 * cfg.center_sampling_radius * stride
            row.append(s <= t <= e and lo < d <= hi and near)
        out.append(row)
        n = max(1, math.ceil(n / 2))
    return out


def _pyramid(T, d=16, B=1, seed=0):
    g = torch.Generator().manual_seed(seed)
    feats = [torch.randn(B, n, d, generator=g) for n in level_lengths(T)]
    return Pyramid(feats, [torch.ones(B, n, dtype=torch.bool) for n in level_lengths(T)])


class TestHeads:
    def test_shapes(self):
        out = head_forward(_pyramid(64), GroundingHeads(16))
        assert [x.shape[1] for x in out.logits] == [64, 32, 16, 8, 4, 2, 1]
        assert all(x.shape[1:] == (n, 2) for x, n in zip(out.distances, [64, 32, 16, 8, 4, 2, 1]))

    def test_softplus_non_negative(self):
        heads = GroundingHeads(16)
        with torch.no_grad():
            heads.reg_head.conv2.bias.fill_(-30.0)
        out = heads(_pyramid(64))
        assert all(bool((d >= 0).all()) for d in out.distances)

    def test_shared_across_levels(self):
        heads = GroundingHeads(16)
        x = torch.randn(1, 8, 16)
        p = Pyramid([x, x.clone()], [torch.ones(1, 8, dtype=torch.bool)] * 2)
        out = heads(p)
        assert torch.equal(out.logits[0], out.logits[1])
        assert torch.equal(out.distances[0], out.distances[1])

    def test_prior_bias(self):
        out = GroundingHeads(16, prior_prob=0.01).cls_head.conv2.bias
        assert torch.sigmoid(out).item() == pytest.approx(0.01)

    def test_padded_logits(self):
        p = _pyramid(8)
        p.masks[0] = torch.tensor([[True] * 5 + [False] * 3])
        out = GroundingHeads(16)(p)
        assert torch.all(out.logits[0][0, 5:] == PAD_LOGIT)
        assert torch.all(out.distances[0][0, 5:] == 0)


class TestAssign:
    def test_level3_foreground(self):
        lt = assign_labels(64, 1.0, Moment(16, 48), ACFG)
        assert lt.flags[3][3]
        assert tuple(lt.targets[3][3]) == (1.5, 2.5)

    def test_level0_background(self):
        lt = assign_labels(64, 1.0, Moment(16, 48), ACFG)
        assert not lt.flags[0][28]

    def test_whole_video_deepest_level(self):
        lt = assign_labels(256, 1.0, Moment(0, 256), ACFG)
        levels = [l for l, f in enumerate(lt.flags) if f.any()]
        assert levels == [6]
        assert lt.flags[6].sum() == 4

    @settings(max_examples=200, deadline=None)
    @given(T=st.integers(1, 300), a=st.floats(0, 1), w=st.floats(0.001, 1), snippet=st.sampled_from([0.53, 1.0]))
    def test_matches_loop_oracle(self, T, a, w, snippet):
        dur = T * snippet
        s = a * dur * 0.999
        m = Moment(s, min(dur, s + max(w * dur, 1e-3)))
        lt = assign_labels(T, snippet, m, ACFG)
        ref = _assign_oracle(T, snippet, m, ACFG)
        if any(any(r) for r in ref):
            assert [f.tolist() for f in lt.flags] == ref
        else:
            assert lt.num_foreground == 1 and lt.flags[0].any()
        for f, tg in zip(lt.flags, lt.targets):
            # inclusive ends allow one zero side on a boundary location, never both
            assert np.all(tg[f] >= 0) and np.all(tg[f].max(axis=1) > 0) and np.all(tg[~f] == 0)

    @settings(max_examples=300, deadline=None)
    @given(T=st.integers(4, 512), a=st.floats(0, 1), w=st.floats(0, 1))
    def test_every_moment_gets_a_positive(self, T, a, w):
        s = a * (T - 1e-3)
        lt = assign_labels(T, 1.0, Moment(s, s + 1e-3 + w * (T - s - 1e-3)), ACFG)
        assert lt.num_foreground >= 1

    def test_sub_snippet_moment_falls_back(self):
        lt = assign_labels(20, 1.0, Moment(4.2, 4.4), ACFG)
        assert lt.num_foreground == 1 and lt.flags[0][4]
        assert np.all(lt.targets[0][4] >= 1e-3)


class TestFocal:
    def test_confident_foreground_vanishes(self):
        loss = focal_loss(torch.tensor([30.0]), torch.tensor([True]), torch.tensor([True]))
        assert loss.item() < 1e-20

    def test_closed_form(self):
        loss = focal_loss(torch.tensor([0.0], dtype=torch.float64), torch.tensor([True]), torch.tensor([True]))
        assert loss.item() == pytest.approx(0.25 * 0.5**2 * -math.log(0.5), abs=1e-15)
        assert loss.item() == pytest.approx(0.04332, abs=1e-5)

    def test_no_foreground_guard(self):
        loss = focal_loss(torch.zeros(5), torch.zeros(5, dtype=torch.bool), torch.ones(5, dtype=torch.bool))
        assert math.isfinite(loss.item())
        assert loss.item() == pytest.approx(5 * 0.75 * 0.5**2 * math.log(2), rel=1e-6)

    def test_masked_positions_ignored(self):
        a = focal_loss(torch.tensor([0.0, 50.0]), torch.tensor([True, False]), torch.tensor([True, False]))
        b = focal_loss(torch.tensor([0.0]), torch.tensor([True]), torch.tensor([True]))
        assert a.item() == b.item()


class TestDIoU:
    def test_identity(self):
        x = torch.tensor([[1.0, 3.0]])
        assert diou_interval_loss(x, x).item() == 0.0

    def test_overlap_example(self):
        got = diou_interval_loss(torch.tensor([0.0, 4.0], dtype=torch.float64), torch.tensor([2.0, 6.0], dtype=torch.float64))
        assert got.item() == pytest.approx(1 - 1 / 3 + (2 / 6) ** 2, abs=1e-15)
        assert got.item() == pytest.approx(0.7778, abs=1e-4)

    def test_disjoint_above_one(self):
        assert diou_interval_loss(torch.tensor([0.0, 1.0]), torch.tensor([3.0, 5.0])).item() > 1

    def test_distance_frame(self):
        # distances (l, r) around a shared location behave like intervals [-l, r]
        pred = torch.tensor([[1.0, 3.0]], dtype=torch.float64)
        tgt = torch.tensor([[1.0, 3.0]], dtype=torch.float64)
        assert diou_loss(pred, tgt, torch.tensor([True])).item() == 0.0
        shifted = diou_loss(torch.tensor([[0.0, 4.0]], dtype=torch.float64), torch.tensor([[-2.0, 6.0]], dtype=torch.float64),
                            torch.tensor([True]))
        assert shifted.item() == pytest.approx(7 / 9, abs=1e-15)


def _perfect_outputs(T, moment, snippet=1.0, dtype=torch.float64):
    lt = assign_labels(T, snippet, moment, ACFG)
    tg = stack_targets([lt], level_lengths(T), dtype)
    logits = [torch.where(f, 1e4, -1e4).to(dtype) for f in tg.flags]
    masks = [torch.ones_like(f) for f in tg.flags]
    return HeadOutputs(logits, [t.clone() for t in tg.targets], masks), tg


class TestTotal:
    def test_perfect_is_zero(self):
        out, tg = _perfect_outputs(64, Moment(16, 48))
        total, parts = total_loss(out, tg, ACFG)
        assert total.item() == 0.0 and parts["loss_cls"] == 0.0 and parts["loss_reg"] == 0.0

    @settings(max_examples=30, deadline=None)
    @given(seed=st.integers(0, 2**31), a=st.integers(0, 50), w=st.integers(1, 14))
    def test_non_negative(self, seed, a, w):
        out, tg = _perfect_outputs(64, Moment(a, a + w))
        g = torch.Generator().manual_seed(seed)
        out.logits = [torch.randn(l.shape, generator=g, dtype=torch.float64) * 5 for l in out.logits]
        out.distances = [torch.rand(d.shape, generator=g, dtype=torch.float64) * 10 for d in out.distances]
        total, parts = total_loss(out, tg, ACFG)
        assert total.item() > 0 and parts["loss_cls"] > 0 and parts["loss_reg"] >= 0

    def test_zero_reg_weight_is_focal(self):
        torch.manual_seed(0)
        out, tg = _perfect_outputs(64, Moment(16, 48))
        out.logits = [torch.randn_like(l) for l in out.logits]
        out.distances = [torch.rand_like(d) for d in out.distances]
        total, parts = total_loss(out, tg, AssignmentConfig(reg_loss_weight=0.0))
        flags = torch.cat(tg.flags, 1)
        focal = focal_loss(torch.cat(out.logits, 1), flags, torch.ones_like(flags))
        assert total.item() == focal.item()
        assert parts["loss_reg"] > 0

    def test_logit_gradient_finite_differences(self):
        torch.manual_seed(0)
        out, tg = _perfect_outputs(32, Moment(5, 21))
        logits = [torch.randn_like(l).float().requires_grad_() for l in out.logits]
        dists = [(torch.rand_like(d) + 0.5).float() for d in out.distances]
        tg32 = type(tg)(tg.flags, [t.float() for t in tg.targets])

        def f(ls):
            return total_loss(HeadOutputs(ls, dists, out.masks), tg32, ACFG)[0]

        f(logits).backward()
        g = torch.cat([l.grad for l in logits], 1)
        sizes = [l.shape[1] for l in logits]
        gen = torch.Generator().manual_seed(0)
        h = 1e-3
        # directional derivatives keep the slope well above float32 rounding
        # of the loss; the random half of each direction probes every logit
        for _ in range(10):
            v = torch.randn(g.shape, generator=gen)
            v = v / v.norm() + g / g.norm()
            v = v / v.norm()
            parts = torch.split(v, sizes, 1)
            with torch.no_grad():
                plus = [l + h * p for l, p in zip(logits, parts)]
                minus = [l - h * p for l, p in zip(logits, parts)]
                fd = (f(plus).item() - f(minus).item()) / (2 * h)
            an = float((g * v).sum())
            assert abs(fd - an) <= 1e-3 * abs(an)


class TestRoundTrip:
    @settings(max_examples=100, deadline=None)
    @given(T=st.integers(8, 400), a=st.floats(0, 1), w=st.floats(0, 1), snippet=st.sampled_from([0.53, 1.0]))
    def test_decode_of_targets(self, T, a, w, snippet):
        dur = T * snippet
        s = a * (dur - snippet)
        m = Moment(s, min(dur, s + snippet + w * (dur - s - snippet)))
        out, _ = _perfect_outputs(T, m, snippet)
        cands = decode_predictions(out, snippet, dur, DecodeConfig())
        assert cands
        for c in cands:
            assert abs(c.start_sec - m.start_sec) <= snippet + 1e-9
            assert abs(c.end_sec - m.end_sec) <= snippet + 1e-9
