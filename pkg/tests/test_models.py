import logging

import numpy as np
import pytest

from adaqat import tensor as T
from adaqat.models import ConfigError, ModelSpec, Precision, build_model, kaiming_normal
from adaqat.tensor import Tensor


def rng(seed=0):
    return np.random.default_rng(seed)


class TestPinning:
    def test_mlp_has_nothing_to_search(self, caplog):
        with caplog.at_level(logging.WARNING, logger="adaqat.models"):
            m = build_model(ModelSpec(arch="mlp", widths=[128]), (1, 28, 28), 10, rng())
        assert len(m.weight_layers) == 2
        assert all(l.pinned for l in m.weight_layers)
        assert m.searchable_layers == []
        assert "no searchable layers" in caplog.text

    def test_cnn_small_middle_layers_searchable(self):
        m = build_model(ModelSpec(arch="cnn-small", channels=[4, 8, 8], strides=[1, 2, 1]), (1, 12, 12), 10, rng())
        pins = [l.pinned for l in m.weight_layers]
        assert pins == [True, False, False, True]

    def test_resnet_first_last_pinned(self):
        m = build_model(ModelSpec(), (3, 32, 32), 10, rng())
        pins = [l.pinned for l in m.weight_layers]
        assert pins[0] and pins[-1] and not any(pins[1:-1])
        spec = m.cost_spec()
        assert spec.layers[0].pinned_bits == (8, 8) and spec.layers[-1].pinned_bits == (8, 8)
        assert len(spec.searchable) == len(pins) - 2

    def test_pinned_layers_ignore_searched_bits(self):
        m = build_model(ModelSpec(arch="mlp", widths=[16, 16]), (1, 4, 4), 3, rng())
        x = Tensor(rng(1).standard_normal((5, 1, 4, 4)))
        first = m.weight_layers[0]
        with T.no_grad():
            # only fc2 and the activation before it are searchable
            a = first(x, type("C", (), {"precision": Precision(2, 2, 8)})()).data
            b = first(x, type("C", (), {"precision": Precision(7, 7, 8)})()).data
        np.testing.assert_array_equal(a, b)


class TestForward:
    @pytest.mark.parametrize("arch,shape", [("mlp", (1, 8, 8)), ("cnn-small", (1, 8, 8)), ("resnet-thin", (3, 8, 8))])
    def test_logit_shape(self, arch, shape):
        m = build_model(ModelSpec(arch=arch, channels=[4, 8], strides=[1, 2]), shape, 7, rng())
        with T.no_grad():
            out = m(Tensor(rng().standard_normal((3,) + shape)), m.precision(4, 4))
        assert out.shape == (3, 7)

    def test_precision_none_matches_32_bit(self):
        spec = ModelSpec(arch="cnn-small", channels=[4, 8], strides=[1, 2], pinned_bits=32)
        m = build_model(spec, (1, 8, 8), 5, rng())
        x = Tensor(rng(2).standard_normal((4, 1, 8, 8)))
        with T.no_grad():
            a = m(x, None, training=False).data
            b = m(x, m.precision(32, 32), training=False).data
        np.testing.assert_array_equal(a, b)

    def test_lower_bits_change_output(self):
        m = build_model(ModelSpec(channels=[4, 8], strides=[1, 2]), (3, 8, 8), 5, rng())
        x = Tensor(rng(2).standard_normal((4, 3, 8, 8)))
        with T.no_grad():
            a = m(x, m.precision(2, 2), training=False).data
            b = m(x, m.precision(8, 8), training=False).data
        assert not np.array_equal(a, b)

    def test_all_parameters_receive_gradients(self):
        m = build_model(ModelSpec(channels=[4, 8], strides=[1, 2], alpha_init=1.0), (3, 8, 8), 5, rng())
        T.reset_tape()
        x = Tensor(rng(3).standard_normal((6, 3, 8, 8)) * 3)
        T.cross_entropy_loss(m(x, m.precision(3, 3)), np.arange(6) % 5).backward()
        missing = [n for n, p in m.named_parameters() if p.grad is None]
        assert missing == []
        T.reset_tape()


class TestInit:
    def test_kaiming_variance(self):
        w = kaiming_normal((10_000,), 100, rng(5))
        assert abs(w.var() - 2 / 100) / (2 / 100) < 0.2

    def test_seeded(self):
        a = build_model(ModelSpec(), (3, 8, 8), 10, rng(4)).state_arrays()
        b = build_model(ModelSpec(), (3, 8, 8), 10, rng(4)).state_arrays()
        assert a.keys() == b.keys()
        assert all(np.array_equal(a[k], b[k]) for k in a)


class TestState:
    def test_roundtrip(self):
        src = build_model(ModelSpec(channels=[4], strides=[1]), (3, 8, 8), 4, rng(1))
        dst = build_model(ModelSpec(channels=[4], strides=[1]), (3, 8, 8), 4, rng(2))
        dst.load_state_arrays(src.state_arrays())
        s, d = src.state_arrays(), dst.state_arrays()
        assert all(np.array_equal(s[k], d[k]) for k in s)

    def test_strict_missing(self):
        m = build_model(ModelSpec(channels=[4], strides=[1]), (3, 8, 8), 4, rng())
        with pytest.raises(KeyError):
            m.load_state_arrays({})

    def test_shape_mismatch(self):
        m = build_model(ModelSpec(channels=[4], strides=[1]), (3, 8, 8), 4, rng())
        arrays = dict(m.state_arrays())
        arrays["fc.bias"] = np.zeros(9, np.float32)
        with pytest.raises(ValueError):
            m.load_state_arrays(arrays)


class TestSpecValidation:
    def test_unknown_arch(self):
        with pytest.raises(ConfigError):
            ModelSpec(arch="vgg")

    def test_channels_strides_mismatch(self):
        with pytest.raises(ConfigError):
            ModelSpec(channels=[4, 8], strides=[1])

    def test_pinned_bits_range(self):
        with pytest.raises(ConfigError):
            ModelSpec(pinned_bits=0)
