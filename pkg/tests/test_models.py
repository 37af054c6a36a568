import numpy as np
import pytest

from downscale_lab import autodiff as ad
from downscale_lab.autodiff import ComplexPair, Tensor
from downscale_lab.errors import (
    BadMagic,
    ConfigError,
    FingerprintMismatch,
    ModeTruncationTooLarge,
    ShapeMismatch,
    Truncated,
)
from gradcheck_util import split_grad_check

from downscale_lab.models import (
    EdsrConfig,
    FnoConfig,
    ModelParams,
    config_from_dict,
    edsr_forward,
    edsr_param_count,
    fno_forward,
    init_params,
    load_params,
    param_shapes,
    predict,
    save_params,
    zero_params,
)

TOL = 1e-6
ABS_TOL = 1e-9


def hand_count_edsr(width, depth, stages):
    """Parameter count by walking the layer list (weights + biases of 3x3 convs)."""
    layers = [(1, width)]
    layers += [(width, width)] * (2 * depth)
    layers += [(width, r * r * width) for r in stages]
    layers += [(width, 1)]
    return sum(cin * cout * 9 + cout for cin, cout in layers)


def truncation_oracle(x, m1, m2):
    """Explicit-sum DFT of the retained block, resynthesized as a real field.

    Rows [0, m1) U [H-m1, H), columns [0, m2) of the half spectrum; each column
    k2 stands for itself and its mirror, so it is weighted 2 except column 0
    (and the Nyquist column for even W), and the real part is taken.
    """
    h, w = x.shape
    n1, n2 = np.arange(h)[:, None], np.arange(w)[None, :]
    out = np.zeros((h, w))
    for k1 in list(range(m1)) + list(range(h - m1, h)):
        for k2 in range(m2):
            phase = 2 * np.pi * (k1 * n1 / h + k2 * n2 / w)
            coef = np.sum(x * np.exp(-1j * phase))
            weight = 1.0 if k2 == 0 or 2 * k2 == w else 2.0
            out += weight * (coef * np.exp(1j * phase)).real
    return out / (h * w)


def identity_fno(hidden, m1, m2, h, w):
    cfg = FnoConfig(layers=1, hidden=hidden, modes1=m1, modes2=m2, projection=hidden,
                    activation="identity", global_skip=False)
    p = zero_params(cfg)
    p["lift.w"].data[0, 0, 0, 0] = 1.0
    p["proj1.w"].data[0, 0, 0, 0] = 1.0
    p["proj2.w"].data[0, 0, 0, 0] = 1.0
    for part in ("low", "high"):
        p[f"spec0.{part}.re"].data[0, 0] = 1.0
    return cfg, p


class TestConfigs:
    def test_stage_factorization(self):
        assert EdsrConfig(width=4, depth=1, scale=4).stages == (2, 2)
        assert EdsrConfig(width=4, depth=1, scale=10).stages == (2, 5)
        assert EdsrConfig(width=4, depth=1, scale=10, stages=(5, 2)).stages == (5, 2)

    def test_bad_stages(self):
        with pytest.raises(ConfigError):
            EdsrConfig(width=4, depth=1, scale=4, stages=(2, 3))
        with pytest.raises(ConfigError):
            EdsrConfig(width=0, depth=1, scale=2)

    def test_round_trip_dict(self):
        for cfg in (EdsrConfig(width=8, depth=2, scale=10), FnoConfig(layers=2, hidden=8, modes1=3, modes2=4)):
            assert config_from_dict(cfg.to_dict()) == cfg

    def test_fno_mode_check(self):
        cfg = FnoConfig(layers=1, hidden=2, modes1=5, modes2=3, projection=2)
        with pytest.raises(ModeTruncationTooLarge):
            fno_forward(cfg, init_params(cfg, 0), np.zeros((1, 1, 8, 8)))


class TestEdsr:
    def test_param_count_closed_form(self):
        cfg = EdsrConfig(width=16, depth=4, scale=4)
        p = init_params(cfg, 0)
        assert p.count() == edsr_param_count(16, 4, [2, 2]) == hand_count_edsr(16, 4, [2, 2]) == 37425

    @pytest.mark.parametrize("width,depth,stages", [(4, 1, [2]), (8, 3, [2, 5]), (5, 2, [3])])
    def test_param_count_general(self, width, depth, stages):
        cfg = EdsrConfig(width=width, depth=depth, scale=int(np.prod(stages)), stages=tuple(stages))
        assert init_params(cfg, 0).count() == hand_count_edsr(width, depth, stages)

    def test_zero_params_give_tail_bias(self):
        cfg = EdsrConfig(width=4, depth=2, scale=4)
        p = zero_params(cfg)
        p["tail.b"].data[:] = 1.25
        out = edsr_forward(cfg, p, np.random.default_rng(0).normal(size=(2, 1, 3, 5)))
        assert out.shape == (2, 1, 12, 20)
        assert np.all(out.data == 1.25)

    def test_skip_topology(self):
        # residual scaling 0 and a zero tail weight: output is the tail bias whatever the rest is
        cfg = EdsrConfig(width=4, depth=2, scale=2, residual_scaling=0.0)
        p = init_params(cfg, 3)
        p["tail.w"].data[:] = 0.0
        out = edsr_forward(cfg, p, np.random.default_rng(1).normal(size=(1, 1, 4, 4)))
        np.testing.assert_array_equal(out.data, np.full((1, 1, 8, 8), p["tail.b"].data[0]))

    def test_shape_contract(self):
        cfg = EdsrConfig(width=3, depth=1, scale=10)
        out = edsr_forward(cfg, init_params(cfg, 0), np.zeros((1, 1, 2, 3)))
        assert out.shape == (1, 1, 20, 30)

    def test_bad_input(self):
        cfg = EdsrConfig(width=3, depth=1, scale=2)
        with pytest.raises(ShapeMismatch):
            edsr_forward(cfg, init_params(cfg, 0), np.zeros((1, 2, 4, 4)))

    def test_fingerprint_checked(self):
        a, b = EdsrConfig(width=3, depth=1, scale=2), EdsrConfig(width=3, depth=2, scale=2)
        with pytest.raises(FingerprintMismatch):
            edsr_forward(b, init_params(a, 0), np.zeros((1, 1, 4, 4)))

    @pytest.mark.parametrize("seed", range(20))
    def test_grad_check_slice(self, seed):
        cfg = EdsrConfig(width=4, depth=1, scale=2)
        rng = np.random.default_rng(seed)
        base = init_params(cfg, seed)
        names = base.names()
        flat = np.concatenate([base[n].data.ravel() for n in names])
        sizes = [base[n].size for n in names]

        def unflatten(t):
            # one Tensor holding every parameter, split back out with differentiable slicing
            out, start = {}, 0
            for n, sz in zip(names, sizes):
                out[n] = _slice(t, start, sz, base[n].shape)
                start += sz
            return ModelParams(cfg, out)

        while True:
            x = rng.normal(size=(2, 1, 3, 4))
            f = lambda t: ad.mean(edsr_forward(cfg, unflatten(t), x))  # noqa: E731
            with ad.record_relu_margin() as rec:
                f(Tensor(flat))
            if rec.margin > 1e-4:
                break
        idx = rng.choice(flat.size, size=200, replace=False)
        rel, absolute, n_rel = split_grad_check(f, flat, indices=idx)
        assert rel < TOL and absolute < ABS_TOL
        assert n_rel >= 100


def _slice(t, start, size, shape):
    def backward_fn(g):
        full = np.zeros_like(t.data)
        full[start : start + size] = g.ravel()
        return (full,)

    return ad._make(t.data[start : start + size].reshape(shape), (t,), backward_fn, "slice")


class TestFno:
    @pytest.mark.parametrize("h,w,m1,m2", [(8, 8, 2, 3), (12, 10, 3, 2), (9, 7, 4, 4), (16, 16, 8, 9)])
    def test_identity_config_is_low_pass(self, h, w, m1, m2):
        cfg, p = identity_fno(3, m1, m2, h, w)
        x = np.random.default_rng(0).normal(size=(h, w))
        out = fno_forward(cfg, p, x[None, None]).data[0, 0]
        np.testing.assert_allclose(out, truncation_oracle(x, m1, m2), atol=1e-12)

    def test_constant_input_dc(self):
        cfg, p = identity_fno(2, 2, 2, 8, 8)
        out = fno_forward(cfg, p, np.full((1, 1, 8, 8), 3.5)).data
        np.testing.assert_allclose(out, 3.5, atol=1e-13)

    def test_shape_preserved(self):
        cfg = FnoConfig(layers=2, hidden=4, modes1=2, modes2=2, projection=6)
        out = fno_forward(cfg, init_params(cfg, 0), np.zeros((3, 1, 8, 6)))
        assert out.shape == (3, 1, 8, 6)

    def test_fused_matches_primitives(self):
        rng = np.random.default_rng(4)
        z = Tensor(rng.normal(size=(2, 3, 10, 9)))
        low = ComplexPair(Tensor(rng.normal(size=(3, 4, 3, 4))), Tensor(rng.normal(size=(3, 4, 3, 4))))
        high = ComplexPair(Tensor(rng.normal(size=(3, 4, 3, 4))), Tensor(rng.normal(size=(3, 4, 3, 4))))
        spec = ad.rfft2(z)
        ref = ad.irfft2(ad.spectral_mix(spec, low, "low") + ad.spectral_mix(spec, high, "high"), 10, 9)
        np.testing.assert_allclose(ad.spectral_conv(z, low, high).data, ref.data, atol=1e-12)

    @pytest.mark.parametrize("seed", range(20))
    def test_fused_grad_check(self, seed):
        rng = np.random.default_rng(seed)
        c, o, m1, m2 = rng.integers(1, 4, size=4)
        h, w = 2 * m1 + int(rng.integers(0, 3)), 2 * m2 - 1 + int(rng.integers(0, 3))
        arrays = [rng.normal(size=(2, c, h, w))] + [rng.normal(size=(c, o, m1, m2)) for _ in range(4)]
        proj = rng.normal(size=(2, o, h, w))
        for k in range(5):
            def f(t, k=k):
                a = [Tensor(v) for v in arrays]
                a[k] = t
                return ad.weighted_sum(ad.spectral_conv(a[0], ComplexPair(a[1], a[2]), ComplexPair(a[3], a[4])), proj)

            assert ad.grad_check(f, arrays[k]) < TOL

    @pytest.mark.parametrize("seed", range(20))
    def test_grad_check_spectral_weights(self, seed):
        cfg = FnoConfig(layers=1, hidden=2, modes1=2, modes2=2, projection=3)
        p = init_params(cfg, seed)
        rng = np.random.default_rng(seed)
        x = rng.normal(size=(2, 1, 6, 6))
        # a random projection (not the mean) so every mode carries an O(1) gradient
        proj = rng.normal(size=(2, 1, 6, 6))
        for name in ("spec0.low.re", "spec0.low.im", "spec0.high.re", "spec0.high.im"):
            def f(t, name=name):
                q = ModelParams(cfg, dict(p.tensors))
                q.tensors[name] = t
                return ad.weighted_sum(fno_forward(cfg, q, x), proj)

            rel, absolute, _ = split_grad_check(f, p[name].data)
            assert rel < TOL and absolute < ABS_TOL

    @pytest.mark.parametrize("seed", range(5))
    def test_grad_check_all_params(self, seed):
        cfg = FnoConfig(layers=1, hidden=2, modes1=2, modes2=2, projection=3)
        p = init_params(cfg, seed)
        rng = np.random.default_rng(100 + seed)
        x = rng.normal(size=(1, 1, 6, 6))
        proj = rng.normal(size=(1, 1, 6, 6))
        for name in p.names():
            def f(t, name=name):
                q = ModelParams(cfg, dict(p.tensors))
                q.tensors[name] = t
                return ad.weighted_sum(fno_forward(cfg, q, x), proj)

            rel, absolute, _ = split_grad_check(f, p[name].data)
            assert rel < TOL and absolute < ABS_TOL, name


class TestInit:
    def test_determinism(self):
        cfg = EdsrConfig(width=4, depth=1, scale=2)
        assert init_params(cfg, 7).equals(init_params(cfg, 7))
        assert not init_params(cfg, 7).equals(init_params(cfg, 8))

    def test_uniform_variance(self):
        # 100 x 120 x 3 x 3 = 108000 draws from U(-b, b), variance b^2 / 3
        cfg = EdsrConfig(width=120, depth=1, scale=1, stages=())
        w = init_params(cfg, 0)["body0.conv1.w"].data
        bound = 1 / np.sqrt(120 * 9)
        assert w.size >= 1e5
        assert abs(w.var() / (bound**2 / 3) - 1) < 0.05
        assert np.all(np.abs(w) <= bound)

    def test_spectral_scale(self):
        cfg = FnoConfig(layers=1, hidden=8, modes1=4, modes2=4, projection=4)
        s = init_params(cfg, 0)["spec0.low.re"].data
        assert s.min() >= 0 and s.max() <= 1 / 64

    def test_names_ordered(self):
        cfg = FnoConfig(layers=2, hidden=2, modes1=1, modes2=1, projection=2)
        assert init_params(cfg, 0).names() == list(param_shapes(cfg))


class TestParamFiles:
    @pytest.mark.parametrize("seed", range(10))
    def test_round_trip(self, tmp_path, seed):
        cfg = [EdsrConfig(width=3, depth=1, scale=2), FnoConfig(layers=1, hidden=2, modes1=2, modes2=2, projection=2)][seed % 2]
        p = init_params(cfg, seed)
        save_params(p, tmp_path / "p.prm")
        assert load_params(tmp_path / "p.prm", cfg).equals(p)

    def test_fingerprint_mismatch(self, tmp_path):
        p = init_params(EdsrConfig(width=3, depth=1, scale=2), 0)
        save_params(p, tmp_path / "p.prm")
        with pytest.raises(FingerprintMismatch):
            load_params(tmp_path / "p.prm", EdsrConfig(width=3, depth=1, scale=2, residual_scaling=0.2))

    def test_truncated(self, tmp_path):
        cfg = EdsrConfig(width=3, depth=1, scale=2)
        save_params(init_params(cfg, 0), tmp_path / "p.prm")
        raw = (tmp_path / "p.prm").read_bytes()
        for cut in (6, 20, len(raw) - 1):
            (tmp_path / "t.prm").write_bytes(raw[:cut])
            with pytest.raises(Truncated):
                load_params(tmp_path / "t.prm", cfg)

    def test_bad_magic(self, tmp_path):
        (tmp_path / "x.prm").write_bytes(b"PRM2" + bytes(20))
        with pytest.raises(BadMagic):
            load_params(tmp_path / "x.prm", EdsrConfig(width=3, depth=1, scale=2))

    def test_layout(self, tmp_path):
        cfg = EdsrConfig(width=1, depth=1, scale=2)
        p = init_params(cfg, 0)
        save_params(p, tmp_path / "p.prm")
        raw = (tmp_path / "p.prm").read_bytes()
        assert raw[:4] == b"PRM1"
        assert int.from_bytes(raw[4:12], "little") == p.fingerprint
        assert int.from_bytes(raw[12:16], "little") == len(p.names())
        nlen = int.from_bytes(raw[16:20], "little")
        assert raw[20 : 20 + nlen] == b"head.w"


class TestPredict:
    def test_batched_equals_single(self):
        cfg = EdsrConfig(width=3, depth=1, scale=2)
        p = init_params(cfg, 0)
        x = np.random.default_rng(0).normal(size=(5, 4, 4))
        np.testing.assert_array_equal(predict(cfg, p, x, batch_size=2), predict(cfg, p, x, batch_size=5))

    def test_fno_prerefine_shape(self):
        cfg = FnoConfig(layers=1, hidden=2, modes1=2, modes2=2, projection=2, scale=4)
        out = predict(cfg, init_params(cfg, 0), np.zeros((2, 4, 4)))
        assert out.shape == (2, 16, 16)
