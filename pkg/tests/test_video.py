import numpy as np
import pytest

from asst import autograd as ag
from asst.autograd import Tensor, grad_check, grad_check_params
from asst.config import ConfigError
from asst.language import LanguageSubnet
from asst.video import FeatureSequence, VideoSubnet, min_squeeze_layers, squeeze_lengths


def subnet(feed="none", **kw):
    kw.setdefault("rng", np.random.default_rng(3))
    return VideoSubnet(d_v=kw.pop("d_v", 4), d_lang=kw.pop("d_lang", 4), attention_feed=feed, **kw)


def test_squeeze_length_examples():
    assert squeeze_lengths(64, 6) == [32, 16, 8, 4, 2, 1]
    assert squeeze_lengths(1, 3) == [1, 1, 1]
    assert squeeze_lengths(5, 3) == [3, 2, 1]
    assert min_squeeze_layers(64) == 6 and min_squeeze_layers(65) == 7 and min_squeeze_layers(1) == 0


def test_feature_sequence_validation():
    fs = FeatureSequence(np.zeros((8, 2)), 4.0)
    assert fs.frame_rate == 2.0 and fs.m == 8
    with pytest.raises(ValueError):
        FeatureSequence(np.zeros((0, 2)), 1.0)
    with pytest.raises(ValueError):
        FeatureSequence(np.zeros((3, 2)), 0.0)


class TestDilationStack:
    def test_receptive_field_is_31(self):
        net = subnet().eval()
        m, t = 64, 32
        base = np.zeros((1, m, 4))
        imp = base.copy()
        imp[0, t] = 1.0
        diff = np.abs(net.dilation_stack(Tensor(imp), None).data
                      - net.dilation_stack(Tensor(base), None).data).sum(-1)[0]
        support = np.flatnonzero(diff > 0)
        assert support.min() == t - 15 and support.max() == t + 15

    def test_zero_convs_leave_input_projection(self, rng):
        net = subnet()
        for conv in net.dilated:
            conv.weight.data[...] = 0.0
            conv.bias.data[...] = 0.0
        x = Tensor(rng.normal(size=(2, 10, 4)))
        np.testing.assert_array_equal(net.dilation_stack(x, None).data, net.in_proj(x).data)

    def test_single_frame(self, rng):
        out = subnet().eval()(Tensor(rng.normal(size=(1, 1, 4))))
        assert out.shape == (1, 1, 32) and np.all(np.isfinite(out.data))


class TestPyramid:
    @pytest.mark.parametrize("m", [1, 2, 5, 17, 64])
    def test_output_length_matches_input(self, m, rng):
        net = subnet(c_dil=8, c_se=6).eval()
        assert net(Tensor(rng.normal(size=(1, m, 4)))).shape == (1, m, 6)

    def test_squeeze_map_lengths(self, rng):
        net = subnet(c_dil=8, c_se=6).eval()
        h = net.dilation_stack(Tensor(rng.normal(size=(1, 64, 4))), None)
        assert [mp.shape[-2] for mp in net.squeeze_phase(h, None)] == [32, 16, 8, 4, 2, 1]

    def test_zero_laterals_give_constant_output(self, rng):
        net = subnet(c_dil=8, c_se=6).eval()
        for lat in net.lateral:
            lat.weight.data[...] = 0.0
            lat.bias.data[...] = 0.0
        out = net(Tensor(rng.normal(size=(1, 64, 4)))).data[0]
        # interpolating equal neighbours can round in the last bit
        np.testing.assert_allclose(out, np.broadcast_to(out[0], out.shape), rtol=1e-14, atol=1e-15)

    def test_global_context_reaches_every_frame(self, rng):
        net = subnet(c_dil=8, c_se=6).eval()
        x = rng.normal(size=(1, 64, 4))
        y = x.copy()
        y[0, 0] += 1.0
        diff = np.abs(net(Tensor(x)).data - net(Tensor(y)).data).sum(-1)[0]
        assert np.all(diff > 0)

    def test_lateral_only_output_is_local(self, rng):
        net = subnet(c_dil=8, c_se=6, squeeze_expand=False).eval()
        x = rng.normal(size=(1, 64, 4))
        y = x.copy()
        y[0, 50:] += rng.normal(size=(14, 4))
        a, b = net(Tensor(x)).data[0], net(Tensor(y)).data[0]
        np.testing.assert_array_equal(a[:35], b[:35])
        assert not np.allclose(a[35:], b[35:])

    def test_too_few_squeeze_layers(self, rng):
        net = subnet(c_dil=8, c_se=6, n_squeeze=3, n_expand=3)
        with pytest.raises(ConfigError, match="at least 6"):
            net(Tensor(rng.normal(size=(1, 64, 4))))

    def test_bad_configuration(self):
        with pytest.raises(ConfigError):
            subnet(n_dilation=0)
        with pytest.raises(ConfigError):
            subnet(n_squeeze=2, n_expand=3)
        with pytest.raises(ConfigError):
            subnet(feed="sometimes")


class TestLanguageFeeds:
    def lang(self, tokens):
        sub = LanguageSubnet(6, 3, 4, rng=np.random.default_rng(1))
        return sub(np.asarray(tokens))

    def test_none_feed_ignores_query(self, rng):
        net = subnet("none").eval()
        x = Tensor(rng.normal(size=(1, 16, 4)))
        a = net(x, self.lang([[0, 1]])).data
        b = net(x, self.lang([[4, 5]])).data
        np.testing.assert_array_equal(a, b)

    @pytest.mark.parametrize("feed", ["first_dilation", "last_dilation", "final_rep", "all"])
    def test_fed_query_matters(self, feed, rng):
        net = subnet(feed).eval()
        x = Tensor(rng.normal(size=(1, 16, 4)))
        a = net(x, self.lang([[0, 1]])).data
        b = net(x, self.lang([[4, 5]])).data
        assert not np.allclose(a, b)

    @pytest.mark.parametrize("feed,count", [("none", 0), ("first_dilation", 1), ("last_dilation", 1),
                                            ("final_rep", 1), ("all", 10)])
    def test_recorded_layers(self, feed, count, rng):
        net = subnet(feed).eval()
        rec = []
        net(Tensor(rng.normal(size=(1, 64, 4))), self.lang([[0, 1, 2]]), record=rec)
        assert len(rec) == count
        assert all(a.shape[-2] == 3 for a in rec)


def test_full_subnet_gradient():
    # B=4 keeps every train-mode batch norm away from two-sample degeneracy
    net = VideoSubnet(4, 3, c_dil=4, c_se=4, n_squeeze=3, n_expand=3, attention_feed="all",
                      rng=np.random.default_rng(5))
    lang = Tensor(np.random.default_rng(6).normal(size=(4, 3, 3)))
    x = np.random.default_rng(7).normal(size=(4, 5, 4))
    w = Tensor(np.random.default_rng(8).normal(size=(4, 5, 4)))
    assert grad_check(lambda t: ag.sum_(ag.mul(net(t, lang), w)), x) < 1e-4
    xt = Tensor(x)
    assert grad_check_params(lambda: ag.sum_(ag.mul(net(xt, lang), w)), net.parameters()) < 1e-4
