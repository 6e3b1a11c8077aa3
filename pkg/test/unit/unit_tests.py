"""
Unit Tests for the STDD toolkit

Unit tests verify individual components in isolation: tensor primitives,
attention, persistence, masking, channel mixing, prompt parsing, alignment
and configuration.

EXPORT:
- test_case decorator function to identify test cases
- All test cases are labeled with (unique identifier, description)
- unique identifier = 'TC-UNIT-xxx'
"""
import json
import math
import os
import tempfile
import unittest
from unittest import mock

import numpy as np

from stdd import encoder as encoder_module
from stdd import nn
from stdd import tensor as tn
from stdd import weights_io
from stdd.alignment import (LossConfig, TextBank, ce_loss, distill_loss, overall_score, prediction_report,
                            score, score_t2v, score_v2t, score_video_class, total_loss, zero_shot_predict)
from stdd.askg import (ActionSubgraph, ConceptNode, RelationTriple, compose_stage1_prompt,
                       compose_stage2_prompt, parse_stage1_response, parse_stage2_response,
                       validate_graph)
from stdd.config import RunConfig
from stdd.encoder import EncoderConfig, EncoderWeights, VideoEncoder, pad_and_fuse, patch_embed
from stdd.errors import (ConfigurationError, ContractError, DimensionError, InvariantError, NaNPropagationError,
                         ParseError, ReportIOError, ValidationError)
from stdd.mcm import ChannelPlan, MixSpec, Segment, mix, multiscale_attend, plan_channels
from stdd.prompt_bank import HashingTextEmbedder, PromptBank, make_prompt, triples_to_prompts
from stdd.video import read_frame_file, temporal_view_indices, write_frame_file
from stdd.wsm import MASK_STRATEGIES, TokenGrid, WindowSpec, apply_mask, build_mask_schedule, visible_count

from test import oracles


def test_case(test_id, description):
    """
    Decorator to add test metadata for Excel export.

    Args:
        test_id: Unique identifier like 'TC-UNIT-001'
        description: Human-readable description of what the test verifies
    """
    def decorator(func):
        func.test_id = test_id
        func.test_description = description
        return func
    return decorator


def random_attention(rng, width, heads):
    arrays = {}
    for proj in "qkvo":
        arrays[f"{proj}_weight"] = tn.Tensor(rng.standard_normal((width, width)) / math.sqrt(width))
        arrays[f"{proj}_bias"] = tn.Tensor(rng.standard_normal(width) * 0.1)
    return nn.AttentionWeights(heads=heads, **arrays)


def attention_arrays(w):
    return (w.q_weight.data, w.q_bias.data, w.k_weight.data, w.k_bias.data,
            w.v_weight.data, w.v_bias.data, w.o_weight.data, w.o_bias.data)


def grad_of(fn, x):
    """Analytic gradient of scalar fn at array x through the tape."""
    leaf = tn.Tensor(x, requires_grad=True)
    with tn.Tape():
        loss = fn(leaf)
    return tn.backward(loss)[leaf].data


class TestSTDDUnit(unittest.TestCase):
    """
    Unit tests for individual STDD components.
    Tests single functions and classes in isolation.
    """

    # HELPER FUNCTIONS
    def setUp(self):
        """Fresh seeded generator for every test."""
        self.rng = np.random.default_rng(1234)
        self.tmp = tempfile.TemporaryDirectory()

    def tearDown(self):
        self.tmp.cleanup()

    # TEST CASES
    @test_case('TC-UNIT-001', 'Verify backward of sum(x) and sum(x*x)')
    def test_backward_basic(self):
        """
        Test tensor.backward on the two simplest losses:
        - sum(x) has gradient ones
        - sum(x*x) has gradient 2x
        """
        x = self.rng.standard_normal((3, 4))
        np.testing.assert_array_equal(grad_of(lambda t: tn.sum(t), x), np.ones_like(x))
        np.testing.assert_allclose(grad_of(lambda t: tn.sum(tn.mul(t, t)), x), 2 * x, rtol=0, atol=1e-15)

    @test_case('TC-UNIT-002', 'Verify backward contract errors and inference mode')
    def test_backward_contract(self):
        """
        Test backward preconditions:
        - non-scalar loss raises ContractError
        - a loss computed outside any tape raises ContractError
        - frozen leaves are absent from the gradient map
        """
        x = tn.Tensor(np.ones(3), requires_grad=True)
        with tn.Tape():
            y = tn.mul(x, 2.0)
        with self.assertRaises(ContractError):
            tn.backward(y)
        with self.assertRaises(ContractError):
            tn.backward(tn.sum(x))
        frozen = tn.Tensor(np.ones(3))
        with tn.Tape():
            loss = tn.sum(tn.mul(x, frozen))
        grads = tn.backward(loss)
        self.assertIn(x, grads)
        self.assertNotIn(frozen, grads)

    @test_case('TC-UNIT-003', 'Verify primitive gradients against central differences')
    def test_primitive_gradients(self):
        """
        Test every differentiable primitive on random inputs:
        - weighted sum of the op output is the scalar loss
        - analytic and numeric gradients agree to 1e-4 relative error
        """
        rng = self.rng
        other = rng.standard_normal((3, 4))
        right = rng.standard_normal((4, 2))
        ops = {
            "add": lambda t: tn.add(t, other),
            "sub": lambda t: tn.sub(other, t),
            "mul": lambda t: tn.mul(t, other),
            "div": lambda t: tn.div(other, tn.add(tn.mul(t, t), 1.0)),
            "power": lambda t: tn.power(tn.add(tn.mul(t, t), 1.0), -0.5),
            "exp": tn.exp,
            "log": lambda t: tn.log(tn.add(tn.mul(t, t), 0.5)),
            "tanh": tn.tanh,
            "gelu": tn.gelu,
            "matmul": lambda t: tn.matmul(t, right),
            "transpose": lambda t: tn.transpose(t),
            "reshape": lambda t: tn.reshape(t, (4, 3)),
            "mean": lambda t: tn.mean(t, axis=0),
            "max_along": lambda t: tn.max_along(t, axis=-1),
            "softmax_rows": tn.softmax_rows,
            "log_softmax_rows": tn.log_softmax_rows,
            "l2_normalize": tn.l2_normalize,
            "concat": lambda t: tn.concat([t, tn.mul(t, t)], axis=-1),
            "stack": lambda t: tn.stack([t, tn.exp(t)], axis=0),
            "take": lambda t: tn.take(t, (slice(None), slice(1, 3))),
            "gather_rows": lambda t: tn.gather_rows(t, np.array([2, 0])),
            "scatter_rows": lambda t: tn.scatter_rows(t, np.array([1]), tn.take(t, (slice(0, 1),))),
        }
        x = rng.standard_normal((3, 4))
        for name, op in ops.items():
            weights = rng.standard_normal(op(tn.Tensor(x)).shape)
            loss = lambda t: tn.sum(tn.mul(op(t), weights))
            analytic = grad_of(loss, x)
            numeric = oracles.central_difference(lambda a: loss(tn.Tensor(a)).item(), x)
            self.assertLess(oracles.max_relative_error(analytic, numeric), 1e-4, name)

    @test_case('TC-UNIT-004', 'Verify softmax row sums and NaN detection')
    def test_softmax_rows(self):
        """
        Test softmax_rows:
        - rows sum to 1 within 1e-12 and lie in [0, 1]
        - NaN input raises NaNPropagationError
        """
        out = tn.softmax_rows(tn.Tensor(self.rng.standard_normal((2, 4)) * 10)).data
        np.testing.assert_allclose(out.sum(axis=-1), 1.0, rtol=0, atol=1e-12)
        self.assertTrue(((out >= 0) & (out <= 1)).all())
        with self.assertRaises(NaNPropagationError):
            tn.softmax_rows(tn.Tensor([[0.0, float("nan")]]))

    @test_case('TC-UNIT-005', 'Verify layer normalization examples')
    def test_layer_norm(self):
        """
        Test layer_norm:
        - constant row maps to zero
        - [1, 3] with eps 0 maps to [-1, 1]
        - random rows have mean 0 and variance 1
        """
        one, zero = tn.Tensor(np.ones(2)), tn.Tensor(np.zeros(2))
        np.testing.assert_array_equal(nn.layer_norm(tn.Tensor([5.0, 5.0]), one, zero).data, [0.0, 0.0])
        np.testing.assert_allclose(nn.layer_norm(tn.Tensor([1.0, 3.0]), one, zero, eps=0.0).data, [-1.0, 1.0])
        x = tn.Tensor(self.rng.standard_normal((3, 8)))
        out = nn.layer_norm(x, tn.Tensor(np.ones(8)), tn.Tensor(np.zeros(8)), eps=1e-12).data
        np.testing.assert_allclose(out.mean(axis=-1), 0.0, atol=1e-6)
        np.testing.assert_allclose(out.var(axis=-1), 1.0, atol=1e-6)

    @test_case('TC-UNIT-006', 'Verify multi-head attention against the naive loop oracle')
    def test_mhsa_oracle(self):
        """
        Test mhsa:
        - one token gives out_proj(value_proj(x))
        - two identical tokens give identical rows
        - three tokens match the naive three-loop oracle for 1 and 2 heads
        - permuting input rows permutes output rows
        """
        w = random_attention(self.rng, 4, 1)
        x1 = self.rng.standard_normal((1, 4))
        expected = (x1 @ w.v_weight.data + w.v_bias.data) @ w.o_weight.data + w.o_bias.data
        np.testing.assert_allclose(nn.mhsa(tn.Tensor(x1), w).data, expected, atol=1e-12)
        twin = np.repeat(x1, 2, axis=0)
        out = nn.mhsa(tn.Tensor(twin), w).data
        np.testing.assert_allclose(out[0], out[1], atol=1e-14)
        for heads in (1, 2):
            w = random_attention(self.rng, 4, heads)
            x = self.rng.standard_normal((3, 4))
            want = oracles.naive_attention(x, *attention_arrays(w), heads)
            np.testing.assert_allclose(nn.mhsa(tn.Tensor(x), w).data, want, rtol=0, atol=1e-10)
        perm = np.array([2, 0, 1])
        out = nn.mhsa(tn.Tensor(x), w).data
        np.testing.assert_allclose(nn.mhsa(tn.Tensor(x[perm]), w).data, out[perm], atol=1e-12)

    @test_case('TC-UNIT-007', 'Verify head divisibility error and pair counting')
    def test_mhsa_counter(self):
        """
        Test mhsa configuration and counting:
        - width not divisible by heads raises ConfigurationError naming 'heads'
        - a [2, 3, 5, D] input charges 5*5*6 pairs regardless of heads
        - nested counters both see the increment
        """
        w = random_attention(self.rng, 6, 4)
        with self.assertRaises(ConfigurationError) as ctx:
            nn.mhsa(tn.Tensor(np.zeros((2, 6))), w)
        self.assertEqual(ctx.exception.key, "heads")
        for heads in (1, 2, 3):
            w = random_attention(self.rng, 6, heads)
            with nn.PairCounter() as outer:
                with nn.PairCounter() as inner:
                    nn.mhsa(tn.Tensor(self.rng.standard_normal((2, 3, 5, 6))), w)
            self.assertEqual(inner.count, 150)
            self.assertEqual(outer.count, 150)
            self.assertEqual(outer.calls, 1)

    @test_case('TC-UNIT-008', 'Verify binary weight file round trip and corruption errors')
    def test_weights_io(self):
        """
        Test save_arrays / load_arrays:
        - names, order, shapes and float32 values survive
        - bad magic, truncation and trailing bytes raise ReportIOError
        """
        path = os.path.join(self.tmp.name, "w.bin")
        arrays = {"a": self.rng.standard_normal((2, 3)), "scalar": np.array(1.5), "b.c": np.arange(4.0)}
        weights_io.save_arrays(path, arrays)
        loaded = weights_io.load_arrays(path)
        self.assertEqual(list(loaded), ["a", "scalar", "b.c"])
        for name, value in arrays.items():
            np.testing.assert_array_equal(loaded[name], value.astype(np.float32))
        with open(path, "rb") as handle:
            blob = handle.read()
        self.assertEqual(blob[:4], b"STDD")
        for bad in (b"XXXX" + blob[4:], blob[:-3], blob + b"\0"):
            with open(path, "wb") as handle:
                handle.write(bad)
            with self.assertRaises(ReportIOError):
                weights_io.load_arrays(path)
        with self.assertRaises(ReportIOError):
            weights_io.load_arrays(os.path.join(self.tmp.name, "missing.bin"))

    @test_case('TC-UNIT-009', 'Verify the default window-shift schedule on a 2x2 grid')
    def test_mask_schedule_small(self):
        """
        Test build_mask_schedule with window 2x2, r=0.5, T=4:
        - retained sets are {0,1}, {1,2}, {2,3}, {3,0}
        - period is 4 and the JSON dump carries the maps
        - r=1 keeps every cell with period 1
        """
        schedule = build_mask_schedule(TokenGrid(2, 2), WindowSpec(2, 2, 0.5), 4)
        sets = [set(np.flatnonzero(m).tolist()) for m in schedule.maps]
        self.assertEqual(sets, [{0, 1}, {1, 2}, {2, 3}, {3, 0}])
        self.assertEqual(schedule.period, 4)
        doc = json.loads(schedule.to_json())
        self.assertEqual(doc["period"], 4)
        self.assertEqual(doc["maps"][0], [1, 1, 0, 0])
        full = build_mask_schedule(TokenGrid(2, 2), WindowSpec(2, 2, 1.0), 3)
        self.assertTrue(full.maps.all())
        self.assertEqual(full.period, 1)

    @test_case('TC-UNIT-010', 'Verify schedule balance, periodicity and repeated windows')
    def test_mask_schedule_balance(self):
        """
        Test schedule invariants over window shapes and ratios:
        - every frame keeps N' = r*N cells
        - each cell is kept r*period times in any period consecutive frames
        - maps repeat with the period and every window shares one pattern
        - consecutive frames overlap in r*w1*w2 - 1 cells per window
        """
        grid = TokenGrid(4, 4)
        for w1 in (1, 2, 4):
            for w2 in (1, 2, 4):
                for ratio in (0.25, 0.5, 0.75):
                    win = WindowSpec(w1, w2, ratio)
                    keep = ratio * w1 * w2
                    if keep != int(keep) or keep == 0:
                        continue
                    frames = 2 * win.cells
                    s = build_mask_schedule(grid, win, frames)
                    n_prime = visible_count(grid, win)
                    self.assertEqual(n_prime, int(ratio * grid.n))
                    self.assertTrue((s.maps.sum(axis=1) == n_prime).all())
                    for start in range(frames - s.period + 1):
                        counts = s.maps[start:start + s.period].sum(axis=0)
                        self.assertTrue((counts == keep * s.period / win.cells).all())
                    for t in range(frames - s.period):
                        np.testing.assert_array_equal(s.maps[t], s.maps[t + s.period])
                    cells = s.maps.reshape(frames, 4 // w1, w1, 4 // w2, w2).transpose(0, 1, 3, 2, 4)
                    cells = cells.reshape(frames, -1, win.cells)
                    self.assertTrue((cells == cells[:, :1]).all())
                    if keep < win.cells:
                        overlap = (cells[:-1] & cells[1:]).sum(axis=-1)
                        self.assertTrue((overlap == keep - 1).all())

    @test_case('TC-UNIT-011', 'Verify window validation errors and visible counts')
    def test_window_validation(self):
        """
        Test WindowSpec / visible_count:
        - N=196 with 2x2 windows and r=0.5 keeps 98
        - fractional keep count raises ConfigurationError naming mask_ratio
        - non-tiling window raises ConfigurationError naming window_h
        - window-wise and ratio-wise counts that disagree raise InvariantError
        - TokenGrid.from_frame rejects sizes not divisible by the patch
        """
        self.assertEqual(visible_count(TokenGrid(14, 14), WindowSpec(2, 2, 0.5)), 98)
        self.assertEqual(visible_count(TokenGrid(2, 2), WindowSpec(2, 2, 0.5)), 2)
        self.assertEqual(visible_count(TokenGrid(2, 2), WindowSpec(2, 2, 1.0)), 4)
        with self.assertRaises(ConfigurationError) as ctx:
            WindowSpec(2, 2, 0.3).keep_per_window
        self.assertEqual(ctx.exception.key, "mask_ratio")
        with self.assertRaises(ConfigurationError) as ctx:
            WindowSpec(3, 2, 0.5).validate(TokenGrid(4, 4))
        self.assertEqual(ctx.exception.key, "window_h")
        with mock.patch.object(WindowSpec, "validate", return_value=3):
            with self.assertRaises(InvariantError):
                visible_count(TokenGrid(4, 4), WindowSpec(2, 2, 0.5))
        with self.assertRaises(ConfigurationError):
            TokenGrid.from_frame(30, 32, 8)

    @test_case('TC-UNIT-012', 'Verify every mask strategy keeps N prime cells per frame')
    def test_mask_strategies(self):
        """
        Test the alternative strategies:
        - all five strategies keep exactly N' cells per frame
        - seeded strategies are reproducible
        - unknown strategy raises ConfigurationError
        """
        grid, win = TokenGrid(4, 4), WindowSpec(2, 2, 0.5)
        for strategy in MASK_STRATEGIES:
            a = build_mask_schedule(grid, win, 8, strategy=strategy, seed=3)
            b = build_mask_schedule(grid, win, 8, strategy=strategy, seed=3)
            self.assertTrue((a.maps.sum(axis=1) == 8).all(), strategy)
            np.testing.assert_array_equal(a.maps, b.maps)
            self.assertEqual(a.visible_index.shape, (8, 8))
        with self.assertRaises(ConfigurationError):
            build_mask_schedule(grid, win, 8, strategy="checkerboard")

    @test_case('TC-UNIT-013', 'Verify apply_mask selects retained rows after CLS')
    def test_apply_mask(self):
        """
        Test apply_mask:
        - map {0,1} of N=4 returns token rows 1 and 2 bitwise
        - full map returns all patch rows, never CLS
        - row-count mismatch raises DimensionError
        """
        z = tn.Tensor(self.rng.standard_normal((5, 3)))
        rows, kept = apply_mask(z, [True, True, False, False])
        np.testing.assert_array_equal(kept, [0, 1])
        np.testing.assert_array_equal(rows.data, z.data[[1, 2]])
        rows, _ = apply_mask(z, [True] * 4)
        np.testing.assert_array_equal(rows.data, z.data[1:])
        with self.assertRaises(DimensionError):
            apply_mask(z, [True, False])

    @test_case('TC-UNIT-014', 'Verify channel plans against hand-derived JSON goldens')
    def test_channel_plan_goldens(self):
        """
        Test plan_channels:
        - D=8, gamma 1/4, delta 1 separate and D=16, gamma 1/4, delta 2 continual match written goldens
        - every valid (D, gamma, delta, mode) in {8,16,64} x {1/8,1/4} x {1,2} matches the segment rule
        - continual at delta 1 equals separate
        """
        goldens = {
            (8, 0.25, 1, "separate"):
                '[{"offset": -1, "start": 0, "end": 2}, {"offset": 1, "start": 2, "end": 4}, '
                '{"offset": 0, "start": 4, "end": 8}]',
            (16, 0.25, 2, "continual"):
                '[{"offset": -2, "start": 0, "end": 2}, {"offset": -1, "start": 2, "end": 4}, '
                '{"offset": 1, "start": 4, "end": 6}, {"offset": 2, "start": 6, "end": 8}, '
                '{"offset": 0, "start": 8, "end": 16}]',
            (64, 0.125, 2, "separate"):
                '[{"offset": -2, "start": 0, "end": 8}, {"offset": 2, "start": 8, "end": 16}, '
                '{"offset": 0, "start": 16, "end": 64}]',
            (8, 0.125, 1, "continual"):
                '[{"offset": -1, "start": 0, "end": 1}, {"offset": 1, "start": 1, "end": 2}, '
                '{"offset": 0, "start": 2, "end": 8}]',
        }
        for (width, gamma, delta, mode), text in goldens.items():
            self.assertEqual(plan_channels(width, delta, MixSpec((delta,), gamma, mode)).to_json(), text)
        for width in (8, 16, 64):
            for gamma in (0.125, 0.25):
                d = int(gamma * width)
                for delta in (1, 2):
                    separate = plan_channels(width, delta, MixSpec((delta,), gamma, "separate"))
                    self.assertEqual([(s.offset, s.start, s.end) for s in separate.segments],
                                     [(-delta, 0, d), (delta, d, 2 * d), (0, 2 * d, width)])
                    if d % delta:
                        with self.assertRaises(ConfigurationError):
                            plan_channels(width, delta, MixSpec((delta,), gamma, "continual"))
                        continue
                    continual = plan_channels(width, delta, MixSpec((delta,), gamma, "continual"))
                    offsets = [s.offset for s in continual.segments]
                    self.assertEqual(offsets, list(range(-delta, 0)) + list(range(1, delta + 1)) + [0])
                    self.assertEqual(sum(s.width for s in continual.segments), width)
                    if delta == 1:
                        self.assertEqual(continual.to_json(), separate.to_json())

    @test_case('TC-UNIT-015', 'Verify channel plan and mix spec validation')
    def test_plan_validation(self):
        """
        Test MixSpec / ChannelPlan errors:
        - gamma outside (0, 0.5) or fractional gamma*D raises ConfigurationError naming gamma
        - gaps or a missing self segment raise ConfigurationError naming channel_plan
        - plan totality over D in {8,16,32,64}, delta in {1,2,3}
        """
        for gamma in (0.0, 0.5, 0.3):
            with self.assertRaises(ConfigurationError) as ctx:
                MixSpec((1,), gamma).validate(8)
            self.assertEqual(ctx.exception.key, "gamma")
        with self.assertRaises(ConfigurationError) as ctx:
            ChannelPlan((Segment(-1, 0, 2), Segment(0, 3, 8)), 8, 1)
        self.assertEqual(ctx.exception.key, "channel_plan")
        with self.assertRaises(ConfigurationError):
            ChannelPlan((Segment(0, 0, 4), Segment(1, 4, 8)), 8, 1)
        ok, _ = plan_channels(8, 1, MixSpec((1,), 0.25)).is_valid()
        self.assertTrue(ok)
        for width in (8, 16, 32, 64):
            for delta in (1, 2, 3):
                plan = plan_channels(width, delta, MixSpec((delta,), 0.125, "separate"))
                self.assertEqual(sum(s.width for s in plan.segments), width)

    @test_case('TC-UNIT-016', 'Verify channel mixing semantics')
    def test_mix(self):
        """
        Test mix:
        - time-constant tokens with self-fill are unchanged, for both modes and scales
        - T=3, delta 1 separate, zero-fill: frame 0 past channels are zero, frame 1 reads frame 0
        - mix is linear and matches the loop oracle
        - plan width mismatch raises DimensionError
        """
        frame = self.rng.standard_normal((1, 3, 8))
        constant = tn.Tensor(np.repeat(frame, 4, axis=0))
        for mode in ("separate", "continual"):
            for delta in (1, 2):
                plan = plan_channels(8, delta, MixSpec((delta,), 0.25, mode))
                np.testing.assert_array_equal(mix(constant, delta, plan, "self-fill").data, constant.data)
        x = self.rng.standard_normal((3, 2, 8))
        plan = plan_channels(8, 1, MixSpec((1,), 0.25, "separate"))
        out = mix(tn.Tensor(x), 1, plan, "zero-fill").data
        np.testing.assert_array_equal(out[0, :, 0:2], 0.0)
        np.testing.assert_array_equal(out[1, :, 0:2], x[0, :, 0:2])
        np.testing.assert_array_equal(out[1, :, 2:4], x[2, :, 2:4])
        np.testing.assert_array_equal(out[2, :, 2:4], 0.0)
        np.testing.assert_array_equal(out[:, :, 4:], x[:, :, 4:])
        y = self.rng.standard_normal((3, 2, 8))
        lhs = mix(tn.Tensor(2.0 * x - 3.0 * y), 1, plan).data
        rhs = 2.0 * mix(tn.Tensor(x), 1, plan).data - 3.0 * mix(tn.Tensor(y), 1, plan).data
        np.testing.assert_allclose(lhs, rhs, atol=1e-14)
        z = self.rng.standard_normal((5, 2, 16))
        plan = plan_channels(16, 2, MixSpec((2,), 0.25, "continual"))
        for boundary in ("zero-fill", "self-fill"):
            want = oracles.mix_loops(z, oracles.continual_offsets(16, 0.25, 2), boundary)
            np.testing.assert_array_equal(mix(tn.Tensor(z), 2, plan, boundary).data, want)
        with self.assertRaises(DimensionError):
            mix(tn.Tensor(np.zeros((3, 2, 16))), 1, plan_channels(8, 1, MixSpec((1,), 0.25)))

    @test_case('TC-UNIT-017', 'Verify the multi-scale average on time-constant tokens')
    def test_multiscale_attend(self):
        """
        Test multiscale_attend:
        - identical frames with self-fill give each frame's plain attention output
        - one scale equals that scale's output
        """
        w = random_attention(self.rng, 8, 2)
        gain, bias = tn.Tensor(np.ones(8)), tn.Tensor(np.zeros(8))
        frame = self.rng.standard_normal((3, 8))
        tokens = tn.Tensor(np.repeat(frame[None], 4, axis=0))
        spec = MixSpec((1, 2), 0.25, "continual", "self-fill")
        out = multiscale_attend(tokens, spec, w, gain, bias).data
        ln = oracles.naive_layer_norm(frame, np.ones(8), np.zeros(8))
        want = oracles.naive_attention(ln, *attention_arrays(w), 2) + frame
        for t in range(4):
            np.testing.assert_allclose(out[t], want, atol=1e-10)
        x = tn.Tensor(self.rng.standard_normal((3, 3, 8)))
        single = multiscale_attend(x, MixSpec((2,), 0.25), w, gain, bias).data
        mixed = mix(x, 2, plan_channels(8, 2, MixSpec((2,), 0.25)))
        want = nn.mhsa(nn.layer_norm(mixed, gain, bias), w).data + mixed.data
        np.testing.assert_allclose(single, want, atol=1e-12)

    @test_case('TC-UNIT-018', 'Verify padding attended rows back into the frame')
    def test_pad_and_fuse(self):
        """
        Test pad_and_fuse:
        - map {0,1} of N=4 gives [cls, bar0, bar1, z3, z4]
        - an empty map returns z' unchanged
        - fusing z' with its own masked rows restores z'
        """
        z1 = tn.Tensor(self.rng.standard_normal((5, 2)))
        bar = tn.Tensor(self.rng.standard_normal((2, 2)))
        out = pad_and_fuse(z1, bar, [True, True, False, False]).data
        np.testing.assert_array_equal(out, np.stack([z1.data[0], bar.data[0], bar.data[1], z1.data[3], z1.data[4]]))
        empty = pad_and_fuse(z1, tn.Tensor(np.zeros((0, 2))), [False] * 4)
        np.testing.assert_array_equal(empty.data, z1.data)
        rows, _ = apply_mask(z1, [False, True, False, True])
        np.testing.assert_array_equal(pad_and_fuse(z1, rows, [False, True, False, True]).data, z1.data)
        with self.assertRaises(DimensionError):
            pad_and_fuse(z1, bar, [True, False, False, False])

    @test_case('TC-UNIT-019', 'Verify patch embedding shapes and frame invariance')
    def test_patch_embed(self):
        """
        Test patch_embed:
        - 32x32 frames with P=16 give 4 patch tokens plus CLS
        - identical frames give identical token rows
        - a zero video with zero weights leaves patch rows zero and CLS rows equal to the CLS embedding
        - wrong frame size raises DimensionError
        """
        cfg = EncoderConfig(frames=2, height=32, width=32, patch=16, dim=8, layers=0, heads=2)
        weights = EncoderWeights.initialize(cfg)
        frame = self.rng.uniform(size=(32, 32, 3))
        z = patch_embed(np.stack([frame, frame]), weights, cfg).data
        self.assertEqual(z.shape, (2, 5, 8))
        np.testing.assert_array_equal(z[0], z[1])
        params = {n: tn.Tensor(np.zeros(weights[n].shape)) for n in weights.names}
        params["cls_token"] = weights["cls_token"]
        zero = patch_embed(np.zeros((2, 32, 32, 3)), EncoderWeights(params, 2), cfg).data
        np.testing.assert_array_equal(zero[:, 1:], 0.0)
        np.testing.assert_array_equal(zero[:, 0], np.broadcast_to(weights["cls_token"].data, (2, 8)))
        with self.assertRaises(DimensionError):
            patch_embed(np.zeros((2, 16, 32, 3)), weights, cfg)

    @test_case('TC-UNIT-020', 'Verify stca and spatial-only encoders share one parameter set')
    def test_parameter_parity(self):
        """
        Test EncoderWeights:
        - stca and spatial_only configs produce identical names and counts
        - a saved weight file loads back under the same config and is rejected under another
        """
        cfg = EncoderConfig(frames=4, height=16, width=16, patch=8, dim=16, layers=2, heads=2)
        stca = EncoderWeights.initialize(cfg)
        spatial = EncoderWeights.initialize(cfg.with_variant("spatial_only"))
        self.assertEqual(stca.names, spatial.names)
        self.assertEqual(stca.parameter_count(), spatial.parameter_count())
        self.assertEqual(stca.layers, 2)
        path = os.path.join(self.tmp.name, "enc.bin")
        stca.save(path)
        loaded = EncoderWeights.load(path, cfg)
        np.testing.assert_allclose(loaded["blocks.1.attn.q.weight"].data, stca["blocks.1.attn.q.weight"].data,
                                   atol=1e-7)
        with self.assertRaises(ConfigurationError):
            EncoderWeights.load(path, EncoderConfig(frames=4, height=16, width=16, patch=8, dim=8, layers=2, heads=2))

    @test_case('TC-UNIT-021', 'Verify the stage-1 prompt text and K range')
    def test_stage1_prompt(self):
        """
        Test compose_stage1_prompt:
        - abseiling with K=7 asks for the Top 7 most relevant objects
        - archery with K=5 substitutes the action
        - empty action and K outside [5, 10] raise ValidationError
        """
        text = compose_stage1_prompt("abseiling", 7).render()
        self.assertIn("Return the object entity list containing Top 7 most relevant objects", text)
        self.assertIn("Find the proper predicate names that", text)
        self.assertIn("YAML format output is preferred", text)
        prompt = compose_stage1_prompt("Archery", 5)
        self.assertIn("involved in action: archery", prompt.instruction)
        self.assertEqual(prompt.input_text, "archery")
        self.assertEqual([m["role"] for m in prompt.to_messages()], ["system", "user", "assistant", "user"])
        for action, k in (("", 7), ("archery", 4), ("archery", 11)):
            with self.assertRaises(ValidationError):
                compose_stage1_prompt(action, k)

    @test_case('TC-UNIT-022', 'Verify stage-1 parsing of entity lists and triples')
    def test_parse_stage1(self):
        """
        Test parse_stage1_response:
        - prose is tolerated; names are normalized and duplicates merged
        - <bow, used to shoot, arrow> is spatial and <archery, starts with, x> temporal
        - unknown endpoint with a listed partner becomes an attribute, with a warning
        - self-relations and unanchored triples are dropped with warnings
        - text without triples warns; text without entities raises ParseError
        """
        text = ("Sure, here it is.\nobjects:\n  1. Bow\n  2. arrow\n  3. bow\nsub_actions:\n  - gripping the bow\n"
                "triples:\n  - <bow, used to shoot, arrow>\n  - <archery, starts with, gripping the bow>\n"
                "  - <quiver, holds, arrow>\n  - <bow, is, bow>\n  - <sky, over, cloud>\n")
        with self.assertLogs("stdd.askg", level="WARNING") as logs:
            result = parse_stage1_response(text, "Archery")
        admitted = [line for line in logs.output if "as an attribute concept" in line]
        self.assertEqual(len(admitted), 1, logs.output)
        self.assertIn("line 11: admitting 'quiver'", admitted[0])
        objects, sub_actions, triples = result
        self.assertEqual([n.name for n in objects], ["bow", "arrow"])
        self.assertEqual([n.name for n in sub_actions], ["gripping the bow"])
        kinds = {t.key: t.kind for t in triples}
        self.assertEqual(kinds[("bow", "used to shoot", "arrow")], "spatial")
        self.assertEqual(kinds[("archery", "starts with", "gripping the bow")], "temporal")
        self.assertEqual(kinds[("quiver", "holds", "arrow")], "spatial")
        self.assertEqual([n.name for n in result.attributes], ["quiver"])
        self.assertEqual(len(triples), 3)
        self.assertEqual(len(result.warnings), 2)
        bare = parse_stage1_response("objects:\n  1. rope\n", "climbing")
        self.assertEqual(bare.triples, [])
        self.assertIn("response contains no relation triples", bare.warnings)
        with self.assertRaises(ParseError) as ctx:
            parse_stage1_response("I cannot help with that.", "archery")
        self.assertTrue(ctx.exception.diagnostics)

    @test_case('TC-UNIT-023', 'Verify stage-2 prompt and clause parsing')
    def test_stage2(self):
        """
        Test compose_stage2_prompt / parse_stage2_response:
        - the prompt says "This is an example of abseiling" and requests each object and triple
        - one-triple subgraph gives one triple request
        - clauses are keyed by normalized triple; unknown items are dropped
        - empty triples raise ValidationError
        """
        graph = ActionSubgraph("abseiling", [ConceptNode("rope", "object")], [],
                               [RelationTriple("rope", "anchored to", "cliff")],
                               [ConceptNode("cliff", "attribute")])
        prompt = compose_stage2_prompt(graph)
        self.assertIn("This is an example of abseiling", prompt.instruction)
        self.assertEqual(prompt.requests, ["rope", "<rope, anchored to, cliff>"])
        reply = ("objects:\n  - rope: This is a video of abseiling, which uses a rope.\n  - tree: no.\n"
                 "triples:\n  - <Rope, anchored to, cliff>: This is a video of abseiling, where a rope is anchored.\n"
                 "  - <a, b, c>: ignored\n")
        clauses = parse_stage2_response(reply, graph)
        self.assertEqual(clauses.objects, {"rope": "This is a video of abseiling, which uses a rope."})
        self.assertEqual(list(clauses.triples), [("rope", "anchored to", "cliff")])
        with self.assertRaises(ValidationError):
            compose_stage2_prompt(ActionSubgraph("abseiling", [ConceptNode("rope", "object")]))

    @test_case('TC-UNIT-024', 'Verify graph validation violations')
    def test_validate_graph(self):
        """
        Test validate_graph:
        - a triple naming unlisted 'helmet' gives one unresolved-endpoint violation
        - three objects under the standard prompt give a k_range violation
        - a triple marked spatial with a sub-action endpoint gives kind_mismatch
        """
        objects = [ConceptNode(n, "object") for n in ("rope", "harness", "carabiner", "anchor", "gloves")]
        graph = ActionSubgraph("abseiling", objects, [ConceptNode("descending", "sub_action")],
                               [RelationTriple("rope", "clipped to", "harness")])
        self.assertTrue(validate_graph(graph).is_valid)
        graph.triples.append(RelationTriple("helmet", "worn with", "harness"))
        report = validate_graph(graph)
        self.assertEqual([v["code"] for v in report.violations], ["unresolved_endpoint"])
        small = ActionSubgraph("abseiling", objects[:3])
        self.assertEqual([v["code"] for v in validate_graph(small).violations], ["k_range"])
        self.assertTrue(validate_graph(small, standard_prompt=False).is_valid)
        wrong = ActionSubgraph("abseiling", objects, [ConceptNode("descending", "sub_action")],
                               [RelationTriple("rope", "used for", "descending", "spatial")])
        self.assertEqual([v["code"] for v in validate_graph(wrong).violations], ["kind_mismatch"])

    @test_case('TC-UNIT-025', 'Verify prompt templating and fallback banks')
    def test_prompt_bank(self):
        """
        Test make_prompt / triples_to_prompts:
        - a clause already carrying the template is not prefixed twice and spaces collapse
        - a missing clause falls back to "where head predicate tail."
        - a graph without triples yields only "This is a video of archery."
        """
        self.assertEqual(make_prompt("clean and jerk", "This is a video of clean and jerk,  which uses chalk."),
                         "This is a video of clean and jerk, which uses chalk.")
        self.assertEqual(make_prompt("archery", "where a bow is used"), "This is a video of archery, where a bow is used.")
        graph = ActionSubgraph("archery", [ConceptNode("bow", "object")], [ConceptNode("aiming", "sub_action")],
                               [RelationTriple("bow", "used to shoot", "arrow", "spatial"),
                                RelationTriple("archery", "starts with", "aiming", "temporal")])
        bank = triples_to_prompts(graph)
        self.assertEqual(bank.spatial, ["This is a video of archery, where bow used to shoot arrow."])
        self.assertEqual(bank.temporal, ["This is a video of archery, where archery starts with aiming."])
        self.assertEqual(bank.combined, bank.spatial + bank.temporal)
        empty = triples_to_prompts(ActionSubgraph("archery", [ConceptNode("bow", "object")]))
        self.assertEqual(empty.combined, ["This is a video of archery."])
        self.assertEqual(PromptBank.from_dict(bank.to_dict()), bank)

    @test_case('TC-UNIT-026', 'Verify the hashing text embedder')
    def test_hashing_embedder(self):
        """
        Test HashingTextEmbedder:
        - unit norm, deterministic, case-insensitive
        - different texts give different vectors
        - wordless text raises ValidationError
        """
        emb = HashingTextEmbedder(16, seed=2)
        a = emb.embed("This is a video of archery.")
        self.assertAlmostEqual(float(np.linalg.norm(a)), 1.0, places=12)
        np.testing.assert_array_equal(a, HashingTextEmbedder(16, seed=2).embed("this is a VIDEO of archery"))
        self.assertGreater(np.abs(a - emb.embed("This is a video of surfing.")).max(), 1e-3)
        with self.assertRaises(ValidationError):
            emb.embed("...")

    @test_case('TC-UNIT-027', 'Verify alignment scores against the brute-force loops')
    def test_alignment_scores(self):
        """
        Test score_v2t / score_t2v / overall_score:
        - random banks with uneven prompt counts match the loop oracle within 1e-12
        - padded prompt rows never win
        - video-level baseline score is the cosine of pooled vectors
        """
        rows = [self.rng.standard_normal((n, 6)) for n in (1, 4, 2)]
        bank = TextBank.from_prototypes(rows, ["a", "b", "c"])
        z = self.rng.standard_normal((2, 5, 6))
        z /= np.linalg.norm(z, axis=-1, keepdims=True)
        scores = score(z, bank, 100.0)
        prompts = [bank.embeddings.data[k, :bank.counts[k]] for k in range(3)]
        for b in range(2):
            want = oracles.brute_force_overall(z[b], prompts, 100.0)
            np.testing.assert_allclose(scores.overall.data[b], want, rtol=0, atol=1e-10)
        np.testing.assert_allclose(overall_score(score_v2t(z, bank), score_t2v(z, bank)).data,
                                   scores.overall.data, atol=1e-12)
        # all-negative similarities: the zero padding rows must not be selected
        u = z[0, 0]
        neg_bank = TextBank.from_prototypes([-u[None], np.stack([-u, -u])])
        self.assertAlmostEqual(float(score_v2t(np.stack([u, u, u]), neg_bank, 1.0).data[0, 0]), -1.0, places=12)
        base = score_video_class(z[0], bank, 1.0).data[0]
        video = z[0].mean(axis=0) / np.linalg.norm(z[0].mean(axis=0))
        pooled = prompts[1].mean(axis=0) / np.linalg.norm(prompts[1].mean(axis=0))
        self.assertAlmostEqual(float(base[1]), float(video @ pooled), places=12)

    @test_case('TC-UNIT-028', 'Verify losses and zero-shot aggregation')
    def test_losses(self):
        """
        Test ce_loss / distill_loss / total_loss / zero_shot_predict:
        - uniform scores give ln K; random scores match log-sum-exp
        - out-of-range labels raise ValidationError
        - distillation is zero for equal features and ignores the frozen side's gradient
        - lambda 0 gives exactly the CE value
        - prediction averages views, breaks ties to the lowest index, rejects no views
        """
        for k in (2, 5):
            self.assertAlmostEqual(ce_loss(tn.Tensor(np.zeros((3, k))), [0, 1, 1]).item(), math.log(k), places=12)
        s = self.rng.standard_normal((4, 3)) * 5
        labels = [0, 2, 1, 2]
        self.assertAlmostEqual(ce_loss(tn.Tensor(s), labels).item(), oracles.log_sum_exp_ce(s, labels), places=12)
        with self.assertRaises(ValidationError):
            ce_loss(tn.Tensor(s), [0, 3, 1, 2])
        z = self.rng.standard_normal((2, 3, 4))
        self.assertEqual(distill_loss(tn.Tensor(z), z).item(), 0.0)
        frozen = tn.Tensor(self.rng.standard_normal((2, 3, 4)), requires_grad=True)
        tuned = tn.Tensor(z, requires_grad=True)
        with tn.Tape():
            loss = distill_loss(tuned, frozen)
        grads = tn.backward(loss)
        self.assertIn(tuned, grads)
        self.assertNotIn(frozen, grads)
        ce = ce_loss(tn.Tensor(s), labels).item()
        self.assertEqual(total_loss(tn.Tensor(s), labels, z, frozen, LossConfig(0.0)).item(), ce)
        with self.assertRaises(ValidationError):
            LossConfig(lambda_distill=-1.0)
        predicted, agg = zero_shot_predict([np.array([1.0, 3.0]), np.array([3.0, 1.0])])
        self.assertEqual(predicted, 0)
        np.testing.assert_array_equal(agg, [2.0, 2.0])
        self.assertEqual(zero_shot_predict([np.array([0.0, 1.0, 0.5])])[0], 1)
        with self.assertRaises(ValidationError):
            zero_shot_predict([])
        report = prediction_report("v1", [np.array([0.1, 0.9])], ["a", "b"])
        self.assertEqual(report["predicted_label"], "b")

    @test_case('TC-UNIT-029', 'Verify run configuration parsing and validation')
    def test_run_config(self):
        """
        Test RunConfig:
        - defaults match the standard setup
        - file values and --set overrides are coerced to field types
        - unknown keys and fractional keep counts raise ConfigurationError with the key
        - is_valid returns messages instead of raising
        """
        config = RunConfig()
        self.assertEqual((config.frames, config.window_h, config.mask_ratio, config.scales),
                         (8, 2, 0.5, (1, 2)))
        self.assertEqual((config.temporal_views, config.spatial_views), (3, 1))
        path = os.path.join(self.tmp.name, "run.cfg")
        with open(path, "w", encoding="utf-8") as handle:
            handle.write("# toy\nframes = 4\nscales = 1, 2, 3\ngamma=0.25  # wider\n\nvariant = factorized\n")
        config = RunConfig.from_file(path, ["mask_ratio=0.25", "channels=16"])
        self.assertEqual((config.frames, config.scales, config.gamma), (4, (1, 2, 3), 0.25))
        self.assertEqual((config.variant, config.mask_ratio, config.channels), ("factorized", 0.25, 16))
        with self.assertRaises(ConfigurationError) as ctx:
            RunConfig().apply_overrides(["colour=red"])
        self.assertEqual(ctx.exception.key, "colour")
        with self.assertRaises(ConfigurationError) as ctx:
            RunConfig().apply_overrides(["frames=eight"])
        self.assertEqual(ctx.exception.key, "frames")
        bad = RunConfig().apply_overrides(["mask_ratio=0.3"])
        ok, messages = bad.is_valid()
        self.assertFalse(ok)
        self.assertTrue(any("mask_ratio" in m for m in messages))
        with self.assertRaises(ConfigurationError) as ctx:
            bad.validate()
        self.assertEqual(ctx.exception.key, "mask_ratio")
        self.assertEqual(RunConfig.from_file(self._write(config.to_text())).to_text(), config.to_text())

    def _write(self, text):
        path = os.path.join(self.tmp.name, "round.cfg")
        with open(path, "w", encoding="utf-8") as handle:
            handle.write(text)
        return path

    @test_case('TC-UNIT-030', 'Verify frame files and temporal view sampling')
    def test_video_io(self):
        """
        Test frame files / temporal_view_indices:
        - a written frame reads back to within 1/255
        - views are in range, ordered, deterministic and differ in phase
        - a one-frame video repeats that frame
        """
        frame = self.rng.uniform(size=(4, 6, 3))
        path = os.path.join(self.tmp.name, "f.rgb")
        write_frame_file(path, frame)
        back = read_frame_file(path)
        self.assertEqual(back.shape, (4, 6, 3))
        self.assertLessEqual(np.abs(back - frame).max(), 1 / 255 + 1e-12)
        views = temporal_view_indices(32, 8, 3, seed=1)
        self.assertEqual(len(views), 3)
        for idx in views:
            self.assertEqual(len(idx), 8)
            self.assertTrue((np.diff(idx) > 0).all())
            self.assertTrue(((idx >= 0) & (idx < 32)).all())
        self.assertFalse(np.array_equal(views[0], views[1]))
        again = temporal_view_indices(32, 8, 3, seed=1)
        for a, b in zip(views, again):
            np.testing.assert_array_equal(a, b)
        for idx in temporal_view_indices(1, 8, 3):
            np.testing.assert_array_equal(idx, 0)

    @test_case('TC-UNIT-031', 'Verify stca without its window-shifted path equals spatial-only attention')
    def test_variant_collapse(self):
        """
        Test VideoEncoder(dynamic=False):
        - every layer's tokens equal the spatial_only variant on the same weights, random clip
        - the full stca encoder differs, so the switch really removes the dynamic path
        """
        config = EncoderConfig(frames=4, height=16, width=16, patch=4, dim=16, layers=2, heads=2,
                               window=WindowSpec(2, 2, 0.5), mix=MixSpec((1, 2), 0.25, "continual", "zero-fill"))
        video = self.rng.uniform(size=(4, 16, 16, 3))
        weights = EncoderWeights.initialize(config)
        static = VideoEncoder(config, weights, dynamic=False).tokens(video)
        spatial = VideoEncoder(config.with_variant("spatial_only"), weights).tokens(video)
        self.assertEqual(len(static), config.layers + 1)
        for a, b in zip(static, spatial):
            np.testing.assert_allclose(a.data, b.data, rtol=0, atol=1e-12)
        full = VideoEncoder(config, weights).tokens(video)
        self.assertGreater(np.abs(full[-1].data - spatial[-1].data).max(), 1e-6)

    @test_case('TC-UNIT-032', 'Verify clip-wide padding and its use inside the stca block')
    def test_pad_and_fuse_clip(self):
        """
        Test pad_and_fuse with [T, N] maps:
        - a batched clip fuses exactly like frame-by-frame calls
        - maps with unequal retained counts, or a frame count mismatch, raise DimensionError
        - block_forward fuses through pad_and_fuse once per stca layer and never without the dynamic path
        """
        maps = np.array([[True, True, False, False], [False, True, True, False], [False, False, True, True]])
        z1 = tn.Tensor(self.rng.standard_normal((2, 3, 5, 2)))
        bar = tn.Tensor(self.rng.standard_normal((2, 3, 2, 2)))
        out = pad_and_fuse(z1, bar, maps).data
        for b in range(2):
            for t in range(3):
                frame = pad_and_fuse(tn.Tensor(z1.data[b, t]), tn.Tensor(bar.data[b, t]), maps[t]).data
                np.testing.assert_array_equal(out[b, t], frame)
        uneven = maps.copy()
        uneven[0, 2] = True
        with self.assertRaises(DimensionError):
            pad_and_fuse(z1, bar, uneven)
        with self.assertRaises(DimensionError):
            pad_and_fuse(z1, bar, maps[:2])
        config = EncoderConfig(frames=2, height=8, width=8, patch=4, dim=8, layers=2, heads=2,
                               window=WindowSpec(2, 2, 0.5), mix=MixSpec((1,), 0.25, "continual", "zero-fill"))
        weights = EncoderWeights.initialize(config)
        video = self.rng.uniform(size=(2, 8, 8, 3))
        with mock.patch.object(encoder_module, "pad_and_fuse", wraps=pad_and_fuse) as spy:
            VideoEncoder(config, weights).tokens(video)
            self.assertEqual(spy.call_count, config.layers)
            spy.reset_mock()
            VideoEncoder(config, weights, dynamic=False).tokens(video)
            spy.assert_not_called()


if __name__ == '__main__':
    unittest.main()
