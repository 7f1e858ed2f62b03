"""Mixing-layer tests: initialization values, generator membership, the
stream update rule, and gradient correctness."""

import math

import numpy as np
import pytest

import hclab.autodiff as ad
import hclab.hyperconn as hc
import hclab.manifold as mf
from hclab.autodiff import DimensionError, Tensor


def rng(seed):
    return np.random.default_rng(seed)


# independent scalar oracles
SIG_ON = 1.0 / (1.0 + math.exp(-1.0))  # 0.7310585786300049
SIG_OFF = 1.0 / (1.0 + math.exp(1.0))  # 0.2689414213699951
TANH4 = math.tanh(4.0)


def randomized_params(variant, n, c, seed, weight_scale=0.5):
    """Init params with randomized weight matrices (biases kept at init)."""
    r = rng(seed)
    p = hc.init_params(variant, n, c)
    for name, t in p.tensors().items():
        if name.startswith("w_"):
            t.data[...] = r.normal(0.0, weight_scale, t.shape)
    return p


def random_streams(n, c, t_len, seed, scale=1.0):
    return Tensor(rng(seed).normal(0.0, scale, (t_len, n, c)))


# ---------------------------------------------------------------------------
# initialization


def test_init_rejects_bad_config():
    with pytest.raises(ValueError):
        hc.init_params("nope", 4, 8)
    with pytest.raises(ValueError):
        hc.init_params("rc", 4, 8)  # rc is single-stream
    with pytest.raises(ValueError):
        hc.init_params("shc", 1, 8)
    with pytest.raises(mf.CapacityError):
        hc.init_params("mhc_lite", 9, 4)


def test_init_shared_bias_pattern():
    p = hc.init_params("shc", 4, 8)
    assert np.array_equal(p.b_pre.data, [1.0, -1.0, -1.0, -1.0])
    assert np.array_equal(p.b_post.data, [1.0, -1.0, -1.0, -1.0])
    assert p.alpha_pre.item() == 0.01 and p.alpha_post.item() == 0.01
    assert np.array_equal(p.gain.data, np.ones(32))
    assert (p.w_pre.data == 0).all() and (p.w_post.data == 0).all()


def test_init_variant_specific_values():
    p_hc = hc.init_params("hc", 4, 8)
    assert np.array_equal(p_hc.b_res.data, np.eye(4))

    p_mhc = hc.init_params("mhc", 4, 8)
    assert np.array_equal(np.diag(p_mhc.b_res.data), np.zeros(4))
    off = p_mhc.b_res.data[~np.eye(4, dtype=bool)]
    assert np.array_equal(off, np.full(12, -8.0))

    p_lite = hc.init_params("mhc_lite", 4, 8)
    assert p_lite.b_res.shape == (24,)
    assert p_lite.b_res.data[0] == 0.0
    assert np.array_equal(p_lite.b_res.data[1:], np.full(23, -8.0))

    p_shc = hc.init_params("shc", 4, 8)
    assert p_shc.w_u.shape == (32, 3) and p_shc.w_s.shape == (32, 3)
    assert np.array_equal(p_shc.b_s.data, np.full(3, 4.0))
    assert (p_shc.b_u.data == 0).all() and (p_shc.b_v.data == 0).all()
    for s in (p_shc.tau_u, p_shc.tau_v, p_shc.tau_s):
        assert s.item() == 0.01
    assert p_shc.gamma_u.item() == 1.0 and p_shc.gamma_v.item() == 1.0

    p_rc = hc.init_params("rc", 1, 8)
    assert p_rc.tensors() == {}


def test_init_parameter_inventory_matches_closed_form():
    # shared: 2(nC*n + n) + 2 + nC ; shc adds 2(nC*k + k) + nC(n-1) + (n-1) + 5
    for n, c in ((2, 4), (4, 8), (6, 2)):
        nc = n * c
        k = (n - 1) * (n - 2) // 2
        shared = 2 * (nc * n + n) + 2 + nc
        got = sum(t.size for t in hc.init_params("shc", n, c).tensors().values())
        assert got == shared + 2 * (nc * k + k) + nc * (n - 1) + (n - 1) + 5
        got = sum(t.size for t in hc.init_params("mhc", n, c).tensors().values())
        assert got == shared + nc * n * n + n * n + 1


# ---------------------------------------------------------------------------
# shared generator


def test_gen_shared_init_gate_values():
    p = hc.init_params("shc", 4, 8)
    x_flat = Tensor(rng(0).normal(0, 1, (5, 32)))
    x_norm, h_pre, h_post = hc.gen_shared(x_flat, p)
    assert h_pre.shape == (5, 1, 4) and h_post.shape == (5, 1, 4)
    # zero weights: gates are exactly the sigmoid of the bias pattern
    assert np.abs(h_pre.data[:, 0, 0] - SIG_ON).max() < 1e-12
    assert np.abs(h_pre.data[:, 0, 1:] - SIG_OFF).max() < 1e-12
    assert np.abs(h_post.data[:, 0, 0] - 2 * SIG_ON).max() < 1e-12
    assert np.abs(h_post.data[:, 0, 1:] - 2 * SIG_OFF).max() < 1e-12


def test_gen_shared_gate_ranges():
    p = randomized_params("mhc", 4, 8, seed=1, weight_scale=0.5)
    p.alpha_pre.data[()] = 0.2
    p.alpha_post.data[()] = 0.2
    x_flat = Tensor(rng(2).normal(0, 1, (64, 32)))
    _, h_pre, h_post = hc.gen_shared(x_flat, p)
    assert (h_pre.data > 0).all() and (h_pre.data < 1).all()
    assert (h_post.data > 0).all() and (h_post.data < 2).all()


def test_gen_shared_alpha_zero_decouples_input():
    p = randomized_params("shc", 4, 8, seed=3)
    p.alpha_pre.data[()] = 0.0
    p.alpha_post.data[()] = 0.0
    _, pre_a, post_a = hc.gen_shared(Tensor(rng(4).normal(0, 1, (6, 32))), p)
    _, pre_b, post_b = hc.gen_shared(Tensor(rng(5).normal(0, 9, (6, 32))), p)
    assert np.array_equal(pre_a.data, pre_b.data)
    assert np.array_equal(post_a.data, post_b.data)


def test_gen_shared_guards():
    p = hc.init_params("shc", 4, 8)
    with pytest.raises(DimensionError):
        hc.gen_shared(Tensor(np.zeros((5, 31))), p)
    with pytest.raises(ValueError):
        hc.gen_shared(Tensor(np.zeros((5, 8))), hc.init_params("rc", 1, 8))


# ---------------------------------------------------------------------------
# residual-mixing generators


def test_gen_res_hc_init_is_identity():
    p = hc.init_params("hc", 4, 8)
    x_norm = Tensor(rng(6).normal(0, 1, (5, 32)))
    h = hc.gen_res_hc(x_norm, p)
    assert h.shape == (5, 4, 4)
    assert np.abs(h.data - np.eye(4)).max() < 1e-15


def test_gen_res_hc_alpha_zero_returns_bias():
    p = hc.init_params("hc", 3, 4)
    b = rng(7).normal(0, 1, (3, 3))
    p.b_res.data[...] = b
    p.w_res.data[...] = rng(8).normal(0, 1, p.w_res.shape)
    p.alpha_res.data[()] = 0.0
    h = hc.gen_res_hc(Tensor(rng(9).normal(0, 1, (4, 12))), p)
    assert np.abs(h.data - b).max() < 1e-15


def test_gen_res_hc_is_unconstrained():
    p = hc.init_params("hc", 4, 8)
    p.b_res.data[...] = 3.0 * np.eye(4)  # spectral norm 3: off the sphere
    h = hc.gen_res_hc(Tensor(np.zeros((2, 32))), p)
    assert not mf.membership(h.data[0], "sphere", 1e-9).ok


def test_gen_res_mhc_init_near_identity():
    p = hc.init_params("mhc", 4, 8)
    h = hc.gen_res_mhc(Tensor(rng(10).normal(0, 1, (5, 32))), p)
    assert np.abs(np.diagonal(h.data, axis1=1, axis2=2) - 0.998994).max() < 1e-5
    assert (h.data >= 0).all()
    assert np.abs(h.data.sum(axis=1) - 1.0).max() < 1e-14  # columns exact


def test_gen_res_mhc_constant_logits_give_uniform():
    p = hc.init_params("mhc", 4, 8)
    p.b_res.data[...] = 0.0
    h = hc.gen_res_mhc(Tensor(np.zeros((3, 32))), p)
    assert np.abs(h.data - 0.25).max() < 1e-15


def test_gen_res_mhclite_init_concentrates_on_identity():
    # softmax oracle: one zero logit against 23 logits at -8
    c_id = 1.0 / (1.0 + 23.0 * math.exp(-8.0))
    c_other = math.exp(-8.0) / (1.0 + 23.0 * math.exp(-8.0))
    # 5 non-identity permutations fix any given diagonal position
    diag_expected = c_id + 5.0 * c_other
    p = hc.init_params("mhc_lite", 4, 8)
    h = hc.gen_res_mhclite(Tensor(rng(11).normal(0, 1, (5, 32))), p)
    diag = np.diagonal(h.data, axis1=1, axis2=2)
    assert np.abs(diag - diag_expected).max() < 1e-12
    assert diag.min() > 0.992
    for t in range(5):
        assert mf.membership(h.data[t], "birkhoff", 1e-13).ok


def test_gen_res_mhclite_uniform_coeffs_give_uniform():
    p = hc.init_params("mhc_lite", 3, 4)
    p.b_res.data[...] = 0.0
    h = hc.gen_res_mhclite(Tensor(np.zeros((2, 12))), p)
    assert np.abs(h.data - 1.0 / 3.0).max() < 1e-14


def test_gen_res_mhclite_membership_on_random_inputs():
    p = randomized_params("mhc_lite", 4, 8, seed=12, weight_scale=3.0)
    p.alpha_res.data[()] = 1.0
    h = hc.gen_res_mhclite(Tensor(rng(13).normal(0, 2, (16, 32))), p)
    for t in range(16):
        assert mf.membership(h.data[t], "birkhoff", 1e-13).ok


def test_gen_res_shc_init_closed_form():
    p = hc.init_params("shc", 4, 8)
    h = hc.gen_res_shc(Tensor(rng(14).normal(0, 1, (5, 32))), p)
    expected = np.full((4, 4), 0.25) + TANH4 * (np.eye(4) - 0.25)
    assert np.abs(h.data - expected).max() < 1e-12
    dev = np.abs(h.data - np.eye(4)).max()
    assert abs(dev - (1.0 - TANH4) * 0.75) < 1e-12
    assert dev < 5.1e-4


def test_gen_res_shc_zero_spectrum_gives_uniform():
    p = hc.init_params("shc", 4, 8)
    p.b_s.data[...] = 0.0
    h = hc.gen_res_shc(Tensor(rng(15).normal(0, 1, (3, 32))), p)
    assert np.abs(h.data - 0.25).max() < 1e-14


@pytest.mark.parametrize("n,c", [(2, 4), (3, 4), (4, 8), (6, 3)])
def test_gen_res_shc_membership_on_random_inputs(n, c):
    p = randomized_params("shc", n, c, seed=16 + n, weight_scale=2.0)
    p.tau_u.data[()] = 0.7
    p.tau_v.data[()] = 0.9
    p.tau_s.data[()] = 1.1
    h = hc.gen_res_shc(Tensor(rng(17 + n).normal(0, 2, (12, n * c))), p)
    for t in range(12):
        m = h.data[t]
        assert mf.membership(m, "sphere", 1e-9).ok
        assert np.abs(m.sum(axis=0) - 1.0).max() < 1e-12
        assert np.abs(m.sum(axis=1) - 1.0).max() < 1e-12


def test_gen_res_wrong_variant_rejected():
    p = hc.init_params("hc", 4, 8)
    x = Tensor(np.zeros((2, 32)))
    with pytest.raises(ValueError):
        hc.gen_res_mhc(x, p)
    with pytest.raises(ValueError):
        hc.gen_res_mhclite(x, p)
    with pytest.raises(ValueError):
        hc.gen_res_shc(x, p)


# ---------------------------------------------------------------------------
# bundles and the update rule


def test_generate_bundle_rc_fixed_maps():
    x = random_streams(1, 8, 6, seed=18)
    b = hc.generate_bundle(x, hc.init_params("rc", 1, 8))
    assert np.array_equal(b.h_pre.data, np.ones((6, 1, 1)))
    assert np.array_equal(b.h_post.data, np.ones((6, 1, 1)))
    assert np.array_equal(b.h_res.data, np.ones((6, 1, 1)))


def test_generate_bundle_shape_guard():
    with pytest.raises(DimensionError):
        hc.generate_bundle(random_streams(3, 8, 6, seed=19), hc.init_params("shc", 4, 8))


def test_hyper_step_dead_branch_is_identity():
    t_len, n, c = 5, 4, 8
    x = random_streams(n, c, t_len, seed=20)
    bundle = hc.MixBundle(
        h_pre=Tensor(np.full((t_len, 1, n), 0.25)),
        h_post=Tensor(np.zeros((t_len, 1, n))),
        h_res=Tensor(np.broadcast_to(np.eye(n), (t_len, n, n)).copy()),
    )
    out = hc.hyper_step(x, ad.tanh, bundle)
    assert np.abs(out.data - x.data).max() < 1e-15


def test_hyper_step_single_stream_is_plain_residual():
    t_len, c = 7, 5
    xv = rng(21).normal(0, 1, (t_len, c))
    x = Tensor(xv.reshape(t_len, 1, c))
    ones = Tensor(np.ones((t_len, 1, 1)))
    out = hc.hyper_step(x, ad.tanh, hc.MixBundle(h_pre=ones, h_post=ones, h_res=ones))
    assert np.abs(out.data.reshape(t_len, c) - (xv + np.tanh(xv))).max() < 1e-15


def test_hyper_step_uniform_mix_averages_streams():
    t_len, n, c = 4, 4, 6
    x = random_streams(n, c, t_len, seed=22)
    bundle = hc.MixBundle(
        h_pre=Tensor(np.full((t_len, 1, n), 0.25)),
        h_post=Tensor(np.ones((t_len, 1, n))),
        h_res=Tensor(np.full((t_len, n, n), 0.25)),
    )
    out = hc.hyper_step(x, lambda z: ad.scale(z, 0.0), bundle)
    mean = x.data.mean(axis=1, keepdims=True)
    assert np.abs(out.data - mean).max() < 1e-14


def test_hyper_step_guards():
    x = random_streams(4, 8, 5, seed=23)
    b = hc.generate_bundle(x, hc.init_params("shc", 4, 8))
    with pytest.raises(DimensionError):
        hc.hyper_step(Tensor(np.zeros((5, 8))), ad.tanh, b)
    with pytest.raises(DimensionError):
        hc.hyper_step(x, lambda z: ad.reshape(z, (8, 5)), b)
    with pytest.raises(DimensionError):
        hc.hyper_step(random_streams(3, 8, 5, seed=24), ad.tanh, b)


def test_expand_collapse_roundtrip():
    xv = rng(25).normal(0, 1, (6, 5))
    x = Tensor(xv)
    assert np.abs(hc.collapse_streams(hc.expand_streams(x, 4)).data - xv).max() < 1e-15


def test_collapse_of_opposite_streams_is_zero():
    v = rng(26).normal(0, 1, (3, 4))
    x = Tensor(np.stack([v, -v], axis=1))
    assert np.abs(hc.collapse_streams(x).data).max() < 1e-16


def test_expand_replicates():
    out = hc.expand_streams(Tensor(np.array([[1.0, 2.0]])), 3)
    assert out.shape == (1, 3, 2)
    assert np.array_equal(out.data, np.array([[[1.0, 2.0]] * 3]))


# ---------------------------------------------------------------------------
# invariants


@pytest.mark.parametrize("variant,bound", [("hc", 1e-12), ("mhc", 1.1e-2), ("mhc_lite", 1.1e-2), ("shc", 5.1e-4)])
def test_identity_at_init(variant, bound):
    """A fresh layer must act like the plain residual: the carried part
    deviates from X by at most the variant's init bound."""
    n, c, t_len = 4, 8, 6
    p = hc.init_params(variant, n, c)
    x = hc.expand_streams(Tensor(rng(27).normal(0, 1, (t_len, c))), n)
    bundle = hc.generate_bundle(x, p)
    out = hc.hyper_step(x, ad.tanh, bundle)
    branch = ad.matmul(
        ad.permute(bundle.h_post, (0, 2, 1)),
        ad.reshape(ad.tanh(ad.reshape(ad.matmul(bundle.h_pre, x), (t_len, c))), (t_len, 1, c)),
    )
    dev = np.abs(out.data - (x.data + branch.data)).max()
    assert dev <= bound * np.abs(x.data).max()
    # per-entry deviation of the mixing matrix itself
    assert np.abs(bundle.h_res.data - np.eye(n)).max() <= bound


def test_identity_at_init_rc_exact():
    x = random_streams(1, 8, 6, seed=28)
    bundle = hc.generate_bundle(x, hc.init_params("rc", 1, 8))
    out = hc.hyper_step(x, ad.tanh, bundle)
    expected = x.data + np.tanh(x.data)
    assert np.abs(out.data - expected).max() < 1e-15


@pytest.mark.parametrize("variant", ["mhc", "mhc_lite", "shc"])
def test_mean_preservation_with_dead_branch(variant):
    n, c, t_len = 4, 8, 16
    p = randomized_params(variant, n, c, seed=29, weight_scale=1.5)
    x = random_streams(n, c, t_len, seed=30, scale=2.0)
    bundle = hc.generate_bundle(x, p)
    out = hc.hyper_step(x, lambda z: ad.scale(z, 0.0), bundle)
    assert np.abs(out.data.mean(axis=1) - x.data.mean(axis=1)).max() < 1e-11


def test_grad_check_through_shc_hyper_step():
    n, c, t_len = 4, 8, 3
    p = randomized_params("shc", n, c, seed=31, weight_scale=0.8)
    x0 = rng(32).normal(0, 1, (t_len, n, c))

    def f(xt):
        xs = ad.reshape(xt, (t_len, n, c))
        bundle = hc.generate_bundle(xs, p)
        return ad.mean_all(hc.hyper_step(xs, ad.tanh, bundle))

    assert ad.grad_check(f, Tensor(x0.copy(), requires_grad=True)) < 1e-4


def test_grad_check_shc_weights():
    n, c, t_len = 4, 8, 3
    p = randomized_params("shc", n, c, seed=33, weight_scale=0.8)
    # keep tanh away from saturation so finite differences stay conditioned
    p.b_s.data[...] = 0.5
    p.tau_s.data[()] = 0.5
    p.tau_u.data[()] = 0.5
    x = random_streams(n, c, t_len, seed=34)

    # a plain mean over streams is blind to h_res (exact unit column sums),
    # so weight the entries to give every parameter a live gradient path
    wts = Tensor(rng(35).normal(0, 1, (t_len, n, c)))

    def loss_with(name):
        original = getattr(p, name)

        def f(probe):
            setattr(p, name, probe)
            try:
                bundle = hc.generate_bundle(x, p)
                return ad.mean_all(ad.mul(hc.hyper_step(x, ad.tanh, bundle), wts))
            finally:
                setattr(p, name, original)

        return f

    # directional derivative: one well-conditioned scalar per parameter
    eps = 1e-5
    for i, name in enumerate(("w_s", "w_u", "b_s", "gamma_u", "tau_s")):
        t = getattr(p, name)
        f = loss_with(name)
        d = rng(100 + i).normal(0, 1, t.shape) if t.ndim else np.asarray(rng(100 + i).normal())
        probe = Tensor(t.data.copy(), requires_grad=True)
        f(probe).backward()
        tape_dd = float((probe.grad * d).sum())
        fd = (f(Tensor(t.data + eps * d)).item() - f(Tensor(t.data - eps * d)).item()) / (2 * eps)
        assert abs(tape_dd - fd) / max(abs(fd), 1e-10) < 1e-6, name


# ---------------------------------------------------------------------------
# debug mode


def test_debug_validation_accepts_valid_and_rejects_invalid(monkeypatch):
    monkeypatch.setenv("HCLAB_DEBUG", "1")
    x = random_streams(4, 8, 4, seed=35)
    hc.generate_bundle(x, randomized_params("shc", 4, 8, seed=36))
    hc.generate_bundle(x, randomized_params("mhc_lite", 4, 8, seed=37))
    hc.generate_bundle(x, randomized_params("mhc", 4, 8, seed=38))
    bad = (2.0 * np.full((4, 4), 0.25) - np.eye(4))[None]  # sphere, not polytope
    with pytest.raises(AssertionError):
        hc._debug_validate("mhc_lite", bad)
    with pytest.raises(AssertionError):
        hc._debug_validate("mhc", 1.5 * np.full((1, 4, 4), 0.25))
    with pytest.raises(AssertionError):
        hc._debug_validate("shc", (np.eye(4) * 2.0)[None])
