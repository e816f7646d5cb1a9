import numpy as np
import pytest

from fenet.errors import ConfigError, FormatError, InvalidInputError
from fenet.model import (
    BranchConfig,
    FENet,
    FENetConfig,
    filter_frequency,
    hard_labels,
    read_checkpoint,
    write_checkpoint,
)
from fenet.nn import BN_EPS
from fenet.train import LossWeights

from gradcheck import model_gradcheck
from oracles import conv_direct, conv_direct_multi, rel_error


def _zero_branch_convs(model):
    for name in model.params:
        if name.startswith(("branch", "shared")) and ".conv" in name:
            model.params[name][...] = 0.0


def _randomise_bn(model, rng):
    for name in model.buffers:
        if name.endswith("running_mean"):
            model.buffers[name][...] = rng.normal(0, 0.3, model.buffers[name].shape)
        else:
            model.buffers[name][...] = rng.uniform(0.5, 2.0, model.buffers[name].shape)
    for name in model.params:
        if name.endswith(".gamma"):
            model.params[name][...] = rng.uniform(0.5, 1.5, model.params[name].shape)
        elif name.endswith(".beta"):
            model.params[name][...] = rng.normal(0, 0.3, model.params[name].shape)


def _bn_relu_oracle(z, model, prefix):
    mean = model.buffers[f"{prefix}.running_mean"]
    var = model.buffers[f"{prefix}.running_var"]
    gamma = model.params[f"{prefix}.gamma"]
    beta = model.params[f"{prefix}.beta"]
    out = np.empty_like(z)
    for c in range(z.shape[0]):
        for n in range(z.shape[1]):
            v = gamma[c] * (z[c, n] - mean[c]) / np.sqrt(var[c] + BN_EPS) + beta[c]
            out[c, n] = max(v, 0.0)
    return out


def _branch_oracle(model, x, r):
    p = model.params
    d1 = model.config.d1_values[r]
    k1 = p[f"branch{r}.conv1.weight"].ravel()
    ks = p["shared.conv.weight"].ravel()
    h = conv_direct(x, k1, d1, p[f"branch{r}.conv1.bias"][0])
    h = _bn_relu_oracle(h[None], model, f"branch{r}.bn1")[0]
    h = conv_direct(h, ks, 2, p["shared.conv.bias"][0])
    h = _bn_relu_oracle(h[None], model, f"branch{r}.bn2")[0]
    h = conv_direct(h, ks, 4, p["shared.conv.bias"][0])
    h = _bn_relu_oracle(h[None], model, f"branch{r}.bn3")[0]
    return x + conv_direct(h, ks, 8, p["shared.conv.bias"][0])


class TestConfig:
    def test_branch_defaults(self):
        assert BranchConfig().dilations == (3, 2, 4, 8)

    @pytest.mark.parametrize("d", [(2, 2, 4, 8), (3, 2, 4, 16), (3, 2, 4)])
    def test_bad_dilations(self, d):
        with pytest.raises(ConfigError):
            BranchConfig(d)

    def test_bad_width(self):
        with pytest.raises(ConfigError):
            BranchConfig(width=4)

    def test_extractor_wider_than_branches(self):
        with pytest.raises(ConfigError):
            FENetConfig(n_extract=5)

    def test_no_branches(self):
        with pytest.raises(InvalidInputError):
            FENetConfig(d1_values=())


class TestFrequency:
    def test_period_five_seconds(self):
        assert filter_frequency(5, 1.0) == pytest.approx(0.2)

    def test_d1_lower_bound_is_twenty_breaths_per_minute(self):
        assert filter_frequency(3, 1.0) * 60 == pytest.approx(20.0)

    def test_unit_dilation(self):
        assert filter_frequency(1, 4.0) == 4.0

    def test_branch_frequencies(self):
        assert BranchConfig((6, 2, 4, 8)).frequencies == pytest.approx((1 / 6, 0.5, 0.25, 0.125))


class TestBranch:
    def test_zero_convs_give_identity(self, rng):
        model = FENet(seed=1)
        _zero_branch_convs(model)
        _randomise_bn(model, rng)
        x = rng.uniform(0.4, 1.6, 60)
        for r in range(4):
            np.testing.assert_array_equal(model.branch_forward(x, r), x)
        np.testing.assert_array_equal(model.multi_branch(x), np.tile(x, (4, 1)))

    @pytest.mark.parametrize("d1", [3, 4, 5, 6])
    def test_length(self, rng, d1):
        model = FENet(FENetConfig(d1_values=(d1,)))
        assert model.branch_forward(rng.uniform(0.5, 1.5, 60), 0).shape == (60,)

    def test_matches_straight_line_oracle(self, rng):
        for seed in range(5):
            model = FENet(seed=seed)
            for name, v in model.params.items():
                if ".conv" in name:
                    v[...] = rng.normal(0, 0.7, v.shape)
            _randomise_bn(model, rng)
            x = rng.uniform(0.4, 1.6, 60)
            for r in range(4):
                np.testing.assert_allclose(model.branch_forward(x, r), _branch_oracle(model, x, r),
                                           rtol=0, atol=1e-12)

    def test_wrong_length(self):
        with pytest.raises(InvalidInputError):
            FENet().branch_forward(np.ones(59), 0)

    def test_rows_are_branches(self, rng):
        model = FENet(seed=3)
        x = rng.uniform(0.5, 1.5, 60)
        H = model.multi_branch(x)
        assert H.shape == (4, 60)
        for r in range(4):
            np.testing.assert_array_equal(H[r], model.branch_forward(x, r))

    def test_shared_kernel_touches_every_branch(self, rng):
        model = FENet(seed=4)
        x = rng.uniform(0.5, 1.5, 60)
        before = model.multi_branch(x)
        model.params["shared.conv.weight"][0, 0, 1] += 0.3
        after = model.multi_branch(x)
        assert all(not np.allclose(before[r], after[r]) for r in range(4))

    def test_bottom_kernel_touches_only_its_branch(self, rng):
        x = rng.uniform(0.5, 1.5, 60)
        for r in range(4):
            model = FENet(seed=4)
            before = model.multi_branch(x)
            model.params[f"branch{r}.conv1.weight"][0, 0, 0] += 0.3
            after = model.multi_branch(x)
            for q in range(4):
                assert np.array_equal(before[q], after[q]) == (q != r)

    def test_upper_kernel_stored_once(self):
        names = FENet().param_names()
        assert sum("shared" in n and n.endswith("weight") for n in names) == 1
        assert not any(n.startswith("branch") and ".conv2" in n for n in names)


class TestExtractor:
    def test_shape_with_one_kernel(self, rng):
        model = FENet()
        assert model.extract_features(rng.standard_normal((4, 60))).shape == (1, 60)

    def test_zero_kernels(self, rng):
        model = FENet()
        model.params["extract.conv.weight"][...] = 0.0
        model.params["extract.conv.bias"][...] = 0.0
        out = model.extract_features(rng.standard_normal((4, 60)))
        # BN of a constant zero map with zero running mean and zero shift stays 0
        np.testing.assert_array_equal(out, 0.0)

    @pytest.mark.parametrize("l", [1, 2, 4])
    def test_channel_mix_oracle(self, rng, l):
        model = FENet(FENetConfig(n_extract=l, width=5), seed=2)
        _randomise_bn(model, rng)
        H = rng.standard_normal((4, 60))
        z = conv_direct_multi(H, model.params["extract.conv.weight"], model.params["extract.conv.bias"], 1)
        expected = _bn_relu_oracle(z, model, "extract.bn")
        np.testing.assert_allclose(model.extract_features(H), expected, rtol=0, atol=1e-12)

    def test_branch_permutation(self, rng):
        base = FENet(FENetConfig(n_extract=2), seed=5)
        _randomise_bn(base, rng)
        perm = [2, 0, 3, 1]
        cfg = FENetConfig(d1_values=tuple(base.config.d1_values[p] for p in perm), n_extract=2)
        params = {k: v.copy() for k, v in base.params.items()}
        buffers = {k: v.copy() for k, v in base.buffers.items()}
        for new, old in enumerate(perm):
            for store, out in ((base.params, params), (base.buffers, buffers)):
                for key in store:
                    if key.startswith(f"branch{old}."):
                        out[f"branch{new}." + key.split(".", 1)[1]] = store[key].copy()
        params["extract.conv.weight"] = base.params["extract.conv.weight"][:, perm, :].copy()
        permuted = FENet(cfg, params=params, buffers=buffers)
        x = rng.uniform(0.5, 1.5, 60)
        H = base.multi_branch(x)
        Hp = permuted.multi_branch(x)
        np.testing.assert_array_equal(Hp, H[perm])
        np.testing.assert_allclose(permuted.extract_features(Hp), base.extract_features(H), rtol=0, atol=1e-12)


class TestHeads:
    @pytest.mark.parametrize("m,heads", [(0, 1), (1, 3), (2, 5), (3, 7), (4, 9)])
    def test_head_count(self, rng, m, heads):
        model = FENet(FENetConfig(m=m))
        probs = model.predict_proba(rng.uniform(0.5, 1.5, (5, 60)))
        assert probs.shape == (5, heads, 2)
        np.testing.assert_allclose(probs.sum(axis=-1), 1.0, rtol=0, atol=1e-12)
        assert model.predict(rng.uniform(0.5, 1.5, 60)).shape == (heads,)

    def test_classify_m_mismatch(self):
        model = FENet()
        with pytest.raises(ConfigError):
            model.classify(np.zeros((1, 60)), m=4)
        with pytest.raises(ConfigError):
            model.predict(np.ones(60), m=2)

    def test_equal_logits_give_half(self):
        model = FENet()
        for h in range(3):
            model.params[f"head{h}.weight"][...] = 0.0
            model.params[f"head{h}.bias"][...] = 0.0
        probs = model.classify(np.ones((1, 60)))
        np.testing.assert_array_equal(probs, np.full((3, 2), 0.5))
        assert model.predict(np.ones(60)).tolist() == [0, 0, 0]

    def test_hard_labels(self):
        assert hard_labels([[0.5, 0.5], [0.1, 0.9], [0.9, 0.1]]).tolist() == [0, 1, 0]

    def test_views_agree_with_forward(self, rng):
        model = FENet(seed=6)
        x = rng.uniform(0.5, 1.5, 60)
        staged = model.classify(model.extract_features(model.multi_branch(x)))
        np.testing.assert_allclose(staged, model.predict_proba(x), rtol=0, atol=1e-12)

    def test_batch_rows_independent_at_inference(self, rng):
        model = FENet(seed=6)
        X = rng.uniform(0.5, 1.5, (6, 60))
        together = model.predict_proba(X)
        alone = np.stack([model.predict_proba(x) for x in X])
        np.testing.assert_allclose(together, alone, rtol=0, atol=1e-12)


class TestGradient:
    @pytest.mark.parametrize("cfg", [FENetConfig(), FENetConfig(m=2, n_extract=2, width=5)])
    def test_end_to_end(self, rng, cfg):
        model = FENet(cfg, seed=8)
        X = rng.uniform(0.5, 1.5, (4, 60))
        Y = rng.integers(0, 2, (4, cfg.n_heads))
        a, n, names, skipped = model_gradcheck(model, X, Y, LossWeights.from_center(0.7, cfg.m), rng,
                                               per_tensor=4)
        assert set(names) == set(model.param_names())
        assert rel_error(a, n) < 1e-5

    def test_backward_leaves_no_parameter_out(self, rng):
        model = FENet(seed=2)
        _, logits, cache = model.forward(rng.uniform(0.5, 1.5, (4, 60)), train=True, rng=rng)
        grads = model.backward(cache, rng.standard_normal(logits.shape))
        assert set(grads) == set(model.params)
        # conv biases that feed a batch norm are cancelled by its mean subtraction
        feeds_bn = {k for k in grads if k.endswith("conv.bias") or k.endswith("conv1.bias")}
        feeds_bn.discard("shared.conv.bias")
        for k, g in grads.items():
            if k in feeds_bn:
                assert np.abs(g).max() < 1e-10
            else:
                assert np.any(g != 0), k


class TestCheckpoint:
    def test_round_trip_bit_exact(self, tmp_path, rng):
        model = FENet(FENetConfig(m=2, n_extract=3, width=7), seed=9)
        _randomise_bn(model, rng)
        path = tmp_path / "m.ckpt"
        write_checkpoint(model, path)
        back = read_checkpoint(path)
        assert back.config == model.config
        for store, other in ((model.params, back.params), (model.buffers, back.buffers)):
            assert set(store) == set(other)
            for k in store:
                assert store[k].tobytes() == other[k].tobytes()
        write_checkpoint(back, tmp_path / "again.ckpt")
        assert path.read_text() == (tmp_path / "again.ckpt").read_text()

    def test_header_and_order(self, tmp_path):
        model = FENet()
        write_checkpoint(model, tmp_path / "m.ckpt")
        lines = (tmp_path / "m.ckpt").read_text().splitlines()
        assert lines[0] == "fenet-ckpt v1"
        start = next(i for i, ln in enumerate(lines) if ln.startswith("blocks ")) + 1
        names = [ln.split()[0] for ln in lines[start:]]
        assert names[: len(model.param_names())] == model.param_names()

    def test_bad_magic(self, tmp_path):
        (tmp_path / "x").write_text("something else\n")
        with pytest.raises(FormatError):
            read_checkpoint(tmp_path / "x")

    def test_truncated(self, tmp_path):
        write_checkpoint(FENet(), tmp_path / "m.ckpt")
        text = (tmp_path / "m.ckpt").read_text().splitlines()
        (tmp_path / "t.ckpt").write_text("\n".join(text[:-3]) + "\n")
        with pytest.raises(FormatError):
            read_checkpoint(tmp_path / "t.ckpt")

    def test_value_count_mismatch(self, tmp_path):
        write_checkpoint(FENet(), tmp_path / "m.ckpt")
        text = (tmp_path / "m.ckpt").read_text().splitlines()
        i = next(k for k, ln in enumerate(text) if ln.startswith("shared.conv.weight"))
        text[i] = text[i] + " 1.0"
        (tmp_path / "b.ckpt").write_text("\n".join(text) + "\n")
        with pytest.raises(FormatError, match=f"line {i + 1}"):
            read_checkpoint(tmp_path / "b.ckpt")
