"""Tests for the max-channel perturbation attribution and colored export."""

import re

import numpy as np
import pytest

from wedgenet.attention import (
    COLOR_RGB,
    dump_scores,
    export_attention,
    max_attention,
)
from wedgenet.errors import ConfigError, InputError
from wedgenet.network import ForwardTrace, ModelParams, NetworkConfig, forward
from wedgenet.pointcloud import PointCloud, read_ply, write_ply


def small_config(**overrides):
    base = dict(
        n_points=64,
        k=4,
        pool=8,
        c1=8,
        c2=8,
        embed=16,
        fc_hidden=8,
        groups=4,
        dropout=0.0,
    )
    base.update(overrides)
    return NetworkConfig(**base)


def make_trace(seed=0, param_seed=0, **overrides):
    config = small_config(**overrides)
    rng = np.random.default_rng(seed)
    pts = rng.normal(size=(config.n_points, 3)).astype(np.float32)
    cloud = PointCloud(points=pts, source_id="t")
    params = ModelParams.initialize(config, seed=param_seed)
    trace = forward(params, cloud, config, mode="eval", seed=seed)
    return params, trace, cloud


class TestMaxAttention:
    def test_zero_head_weights_all_blue(self):
        params, trace, _ = make_trace()
        params.arrays["fc1.weight"][:] = 0.0
        params.arrays["fc2.weight"][:] = 0.0
        amap = max_attention(params, trace, target_class=0)
        assert np.array_equal(amap.score, np.zeros(64))
        assert (amap.color == "blue").all()
        assert amap.cutoff == 0.0

    def test_nonzero_scores_at_most_embed(self):
        params, trace, _ = make_trace(seed=3)
        amap = max_attention(params, trace, target_class=1)
        nonzero = np.nonzero(amap.score)[0]
        assert len(nonzero) <= trace.config.embed
        assert set(nonzero).issubset(set(trace.max_argpoint.tolist()))

    def test_non_winners_score_exactly_zero(self):
        params, trace, _ = make_trace(seed=4)
        amap = max_attention(params, trace, target_class=0)
        losers = np.setdiff1d(np.arange(64), trace.max_argpoint)
        assert np.array_equal(amap.score[losers], np.zeros(losers.size))

    def test_color_partition_follows_cutoff(self):
        params, trace, _ = make_trace(seed=5)
        amap = max_attention(params, trace, target_class=1, cutoff_fraction=0.05)
        green = amap.score > amap.cutoff
        red = amap.score < -amap.cutoff
        assert np.array_equal(amap.color == "green", green)
        assert np.array_equal(amap.color == "red", red)
        assert np.array_equal(amap.color == "blue", ~(green | red))

    def test_linear_head_matches_analytic_derivative(self):
        params, trace, _ = make_trace(seed=6, leaky_slope=1.0)
        # shrink the head so the finite-difference curvature error is tiny
        params.arrays["fc1.weight"] *= 0.3
        params.arrays["fc2.weight"] *= 0.3
        target = 1
        amap = max_attention(params, trace, target, epsilon=1e-6)

        a = trace.avg_vector.astype(np.float64)
        m = trace.max_vector.astype(np.float64)
        affine = params.arrays["fc1.weight"].astype(np.float64) @ params.arrays[
            "fc2.weight"
        ].astype(np.float64)
        logits = np.concatenate([a, m]) @ affine
        z = np.exp(logits - logits.max())
        p = z / z.sum()
        expected = np.zeros(64)
        for d in range(m.size):
            row = affine[a.size + d]
            grad = p[target] * (row[target] - p @ row)
            expected[trace.max_argpoint[d]] += grad
        assert np.abs(amap.score - expected).max() < 1e-6

    def test_epsilon_halving_keeps_colors_in_logit_mode(self):
        params, trace, _ = make_trace(seed=7, leaky_slope=1.0)
        a = max_attention(params, trace, 0, epsilon=1e-3, use_logit=True)
        b = max_attention(params, trace, 0, epsilon=5e-4, use_logit=True)
        assert np.array_equal(a.color, b.color)
        assert np.allclose(a.score, b.score, rtol=1e-9)

    def test_zero_cutoff_leaves_no_nonzero_point_blue(self):
        params, trace, _ = make_trace(seed=8)
        amap = max_attention(params, trace, 1, cutoff_fraction=0.0)
        nonzero = amap.score != 0
        assert not np.any(amap.color[nonzero] == "blue")

    def test_probability_head_matches_forward(self):
        from wedgenet.attention import _head_value

        params, trace, _ = make_trace(seed=9)
        m = trace.max_vector.astype(np.float64).reshape(1, -1)
        a = trace.avg_vector.astype(np.float64)
        for target in (0, 1):
            base = _head_value(params, trace.config, a, m, target, use_logit=False)
            assert base[0] == pytest.approx(trace.probabilities[target], abs=1e-6)

    def test_requires_max_pool(self):
        params, trace, _ = make_trace(max_pool=False)
        with pytest.raises(ConfigError, match="max-pool"):
            max_attention(params, trace, 0)

    def test_requires_config_on_trace(self):
        params, trace, _ = make_trace()
        bare = ForwardTrace(
            logits=trace.logits,
            probabilities=trace.probabilities,
            avg_vector=trace.avg_vector,
            max_vector=trace.max_vector,
            max_argpoint=trace.max_argpoint,
            graphs=trace.graphs,
            config=None,
        )
        with pytest.raises(ConfigError):
            max_attention(params, bare, 0)

    def test_rejects_bad_arguments(self):
        params, trace, _ = make_trace()
        with pytest.raises(InputError):
            max_attention(params, trace, 0, epsilon=0.0)
        with pytest.raises(InputError):
            max_attention(params, trace, 0, epsilon=-1e-3)
        with pytest.raises(InputError):
            max_attention(params, trace, 0, cutoff_fraction=-0.1)
        with pytest.raises(InputError):
            max_attention(params, trace, 5)

    def test_default_epsilon_scales_with_features(self):
        params, trace, _ = make_trace(seed=10)
        amap = max_attention(params, trace, 0)
        m = trace.max_vector.astype(np.float64)
        assert amap.epsilon == max(0.1 * float(m.std()), 1e-3)
        assert amap.epsilon >= 1e-3

    def test_deterministic(self):
        params, trace, _ = make_trace(seed=11)
        a = max_attention(params, trace, 1)
        b = max_attention(params, trace, 1)
        assert np.array_equal(a.score, b.score)
        assert np.array_equal(a.color, b.color)


class TestExport:
    def test_colors_round_trip_through_ply(self, tmp_path):
        params, trace, cloud = make_trace(seed=12)
        amap = max_attention(params, trace, 1)
        colored = export_attention(cloud, amap)
        path = tmp_path / "attention.ply"
        write_ply(path, colored)
        back = read_ply(path)
        assert np.array_equal(back.colors, colored.colors)
        for name, rgb in COLOR_RGB.items():
            mask = amap.color == name
            assert np.array_equal(
                colored.colors[mask],
                np.tile(np.array(rgb, np.uint8), (mask.sum(), 1)),
            )

    def test_all_blue_map_exports_all_blue(self):
        params, trace, cloud = make_trace(seed=13)
        params.arrays["fc1.weight"][:] = 0.0
        amap = max_attention(params, trace, 0)
        colored = export_attention(cloud, amap)
        assert np.array_equal(
            colored.colors, np.tile(np.array([0, 0, 255], np.uint8), (cloud.n, 1))
        )

    def test_rejects_size_mismatch(self):
        params, trace, _ = make_trace(seed=14)
        amap = max_attention(params, trace, 0)
        small = PointCloud(
            points=np.zeros((10, 3), np.float32), source_id="small"
        )
        with pytest.raises(InputError, match="points"):
            export_attention(small, amap)


class TestDump:
    def test_format_and_length(self):
        params, trace, _ = make_trace(seed=15)
        amap = max_attention(params, trace, 1)
        text = dump_scores(amap)
        lines = text.splitlines()
        assert len(lines) == 64
        assert lines[0].startswith("0\t")
        for line in lines:
            assert re.fullmatch(r"\d+\t-?[0-9.e+-]+\t(green|red|blue)", line)

    def test_deterministic(self):
        params, trace, _ = make_trace(seed=16)
        a = dump_scores(max_attention(params, trace, 0))
        b = dump_scores(max_attention(params, trace, 0))
        assert a == b
