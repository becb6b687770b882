import io
import math
from fractions import Fraction

import numpy as np
import pytest

from mnde import model as M
from mnde import spline as sp
from mnde import tensor as T
from mnde.errors import ConfigError, DataError, ShapeError

RNG = np.random.default_rng(20240814)


def toy_cfg(**overrides):
    base = dict(n=3, l=6, l_prime=6, c=4, c_prime=2, d=1, heads=2, loops=1,
                r=Fraction(1, 3), r_prime=Fraction(1, 3), step=Fraction(1))
    base.update(overrides)
    return M.ModelConfig(**base)


def toy_params(variant="MNDE", seed=11, **overrides):
    cfg = toy_cfg(**overrides)
    return M.ModelParams.init(cfg, variant, seed)


def toy_window(cfg, seed=5, batch=None):
    # smooth z-scored-looking signals; jagged random knots can push the
    # quadratic spatio-temporal field into finite-time blowup at coarse steps
    rng = np.random.default_rng(seed)
    shape = (cfg.n, cfg.l) if batch is None else (batch, cfg.n, cfg.l)
    t = np.arange(cfg.l) / cfg.l
    phase = rng.uniform(0.0, 2.0 * np.pi, size=shape[:-1])[..., None]
    return 0.4 * np.sin(2.0 * np.pi * t + phase) + 0.02 * rng.standard_normal(shape)


def test_config_validation():
    with pytest.raises(ConfigError):
        toy_cfg(d=2)  # violates d < l/3
    with pytest.raises(ConfigError):
        toy_cfg(heads=4)  # heads must divide c_prime=2
    with pytest.raises(ConfigError):
        toy_cfg(step=Fraction(2, 3))  # does not divide l-1 = 5
    with pytest.raises(ConfigError):
        toy_cfg(r=Fraction(5, 7))
    with pytest.raises(ConfigError):
        M.ModelConfig(n=0)


def test_init_shapes_and_distributions():
    cfg = toy_cfg()
    mp = M.ModelParams.init(cfg, "MNDE", seed=3)
    m = cfg.value_samples
    assert mp["cnde.embed.T.W"].value.shape == (m, cfg.c)
    assert mp["cnde.embed.E.W"].value.shape == (2 * m, cfg.c_prime)
    assert mp["cnde.loop0.S.A"].value.shape == (cfg.n, cfg.n)
    assert mp["attn.head1.v.W"].value.shape == (cfg.deriv_samples, cfg.l_prime // cfg.heads)
    assert mp["out.e_d.2.W"].value.shape == (cfg.c_prime, cfg.l_prime)
    # adjacency starts near the identity, biases at zero
    assert np.max(np.abs(mp["cnde.loop0.S.A"].value - np.eye(cfg.n))) <= 0.01
    assert np.array_equal(mp["cnde.loop0.T.b1"].value, np.zeros((1, cfg.c)))
    lim = math.sqrt(6.0 / (m + cfg.c))
    w = mp["cnde.embed.T.W"].value
    assert np.max(np.abs(w)) <= lim and np.std(w) > 0


def test_init_is_seed_deterministic():
    a = M.ModelParams.init(toy_cfg(), "MNDE", seed=7)
    b = M.ModelParams.init(toy_cfg(), "MNDE", seed=7)
    c = M.ModelParams.init(toy_cfg(), "MNDE", seed=8)
    for name in a.params:
        assert np.array_equal(a[name].value, b[name].value)
    assert any(not np.array_equal(a[name].value, c[name].value) for name in a.params)


def test_variant_parameter_subsets():
    assert "cnde.loop1.T.W1" not in M.ModelParams.init(toy_cfg(), "CNDE1_ST", 0).params
    st3 = M.ModelParams.init(toy_cfg(loops=3, step=Fraction(1, 2), d=1), "CNDE3_ST", 0)
    assert "cnde.loop2.T.W1" in st3.params
    assert "cnde.embed.E.W" not in st3.params
    assert "dnde.embed.T.W" not in st3.params
    assert "attn.head0.q.W" not in st3.params
    full = M.ModelParams.init(toy_cfg(), "MNDE", 0)
    assert "dnde.loop0.E.A" in full.params and "attn.head0.q.W" in full.params
    with pytest.raises(ConfigError):
        M.ModelParams.init(toy_cfg(), "NOPE", 0)


def _scalar_params(prefix, values):
    return {f"{prefix}.{k}": T.Tensor(np.full((1, 1), v)) for k, v in values.items()}


def test_temporal_field_scalar_oracle():
    vals = dict(W1=2.0, b1=0.1, W2=-1.0, b2=0.2, W3=0.5, b3=-0.3)
    P = _scalar_params("m.T", vals)
    h = 0.7
    f = M.temporal_field(P, "m.T")
    out = f(T.Tensor([[[h]]]), 0.0)
    z = math.tanh(2.0 * h + 0.1)
    z = math.tanh(-1.0 * z + 0.2)
    expected = 0.5 * z - 0.3 + h
    assert abs(out.data[0, 0, 0] - expected) < 1e-12


def test_spatial_field_hand_oracle():
    P = {
        "m.S.A": T.Tensor([[1.0, 0.5], [0.25, 1.0]]),
        "m.S.W": T.Tensor([[2.0]]),
        "m.S.b": T.Tensor([[0.1]]),
        "m.S.Fg.W": T.Tensor([[1.5]]),
        "m.S.Fg.b": T.Tensor([[0.0]]),
        "m.S.Fs.W": T.Tensor([[-0.5]]),
        "m.S.Fs.b": T.Tensor([[0.2]]),
    }
    h = np.array([[[0.4], [-0.8]]])
    out = M.spatial_field(P, "m.S")(T.Tensor(h), 0.0).data
    mixed = np.array([[1.0, 0.5], [0.25, 1.0]]) @ h[0]
    gcn = np.maximum(mixed * 2.0 + 0.1, 0.0) * 1.5
    skip = h[0] * -0.5 + 0.2
    assert np.max(np.abs(out[0] - (gcn + skip))) < 1e-12


def test_edge_field_contracts_source_axis():
    n, ce = 3, 2
    A = RNG.standard_normal((n, n))
    h = RNG.standard_normal((2, n, n, ce))
    P = {
        "m.E.A": T.Tensor(A),
        "m.E.W": T.Tensor(np.eye(ce)),
        "m.E.b": T.Tensor(np.zeros((1, ce))),
        "m.E.Fg.W": T.Tensor(np.eye(ce)),
        "m.E.Fg.b": T.Tensor(np.zeros((1, ce))),
        "m.E.Fs.W": T.Tensor(np.zeros((ce, ce))),
        "m.E.Fs.b": T.Tensor(np.zeros((1, ce))),
    }
    out = M.edge_field(P, "m.E")(T.Tensor(h), 0.0).data
    expected = np.maximum(np.einsum("is,bsjc->bijc", A, h), 0.0)
    assert np.max(np.abs(out - expected)) < 1e-12


def test_graph_mix_matches_einsum():
    A = RNG.standard_normal((4, 4))
    h3 = RNG.standard_normal((2, 4, 5))
    h4 = RNG.standard_normal((2, 4, 4, 3))
    out3 = M._graph_mix(T.Tensor(A), T.Tensor(h3)).data
    out4 = M._graph_mix(T.Tensor(A), T.Tensor(h4)).data
    assert np.max(np.abs(out3 - np.einsum("is,bsc->bic", A, h3))) < 1e-12
    assert np.max(np.abs(out4 - np.einsum("is,bsjc->bijc", A, h4))) < 1e-12


def test_embed_initial_pairs_ordered():
    cfg = toy_cfg(n=2)
    mp = M.ModelParams.init(cfg, "MNDE", seed=2)
    P = mp.constants()
    m = cfg.value_samples
    samples = RNG.standard_normal((1, 2, m))
    _, _, h_e = M.embed_initial(samples, P, "cnde", edges=True)
    W = mp["cnde.embed.E.W"].value
    b = mp["cnde.embed.E.b"].value
    for i in range(2):
        for j in range(2):
            pair = np.concatenate([samples[0, i], samples[0, j]])
            assert np.max(np.abs(h_e.data[0, i, j] - (pair @ W + b[0]))) < 1e-12


def test_differentiation_matches_loop_oracle():
    cfg = toy_cfg(n=4)
    mp = M.ModelParams.init(cfg, "MNDE", seed=9)
    P = mp.constants()
    derivs = RNG.standard_normal((4, cfg.deriv_samples))
    out = M.differentiation_forward(derivs, P, cfg).data[0]
    ck = cfg.c_prime // cfg.heads
    pieces = []
    for j in range(cfg.heads):
        q = derivs @ mp[f"attn.head{j}.q.W"].value + mp[f"attn.head{j}.q.b"].value
        k = derivs @ mp[f"attn.head{j}.k.W"].value + mp[f"attn.head{j}.k.b"].value
        v = derivs @ mp[f"attn.head{j}.v.W"].value + mp[f"attn.head{j}.v.b"].value
        scores = math.sqrt(ck) * (q @ k.T)
        e = np.exp(scores - scores.max(axis=1, keepdims=True))
        w = e / e.sum(axis=1, keepdims=True)
        pieces.append(w @ v)
    assert np.max(np.abs(out - np.concatenate(pieces, axis=1))) < 1e-12


def test_differentiation_is_permutation_covariant():
    cfg = toy_cfg(n=5)
    P = M.ModelParams.init(cfg, "MNDE", seed=4).constants()
    derivs = RNG.standard_normal((5, cfg.deriv_samples))
    perm = np.array([3, 0, 4, 1, 2])
    base = M.differentiation_forward(derivs, P, cfg).data[0]
    permuted = M.differentiation_forward(derivs[perm], P, cfg).data[0]
    assert np.max(np.abs(permuted - base[perm])) < 1e-12


def test_differentiation_checks_sample_count():
    cfg = toy_cfg()
    P = M.ModelParams.init(cfg, "MNDE", seed=0).constants()
    with pytest.raises(ShapeError):
        M.differentiation_forward(np.zeros((cfg.n, 7)), P, cfg)


def test_aggregate_two_view_scalar_example():
    out = M.aggregate([T.Tensor([[[2.0]]]), T.Tensor([[[4.0]]])], k=2)
    assert abs(out.data[0, 0, 0] - 3.0) < 1e-12


def test_aggregate_zero_views_give_zero():
    zeros = [T.Tensor(np.zeros((1, 3, 1))) for _ in range(5)]
    assert np.array_equal(M.aggregate(zeros, k=5).data, np.zeros((1, 3, 1)))


def test_aggregate_is_symmetric_under_view_exchange():
    views = [T.Tensor(RNG.standard_normal((1, 2, 4))) for _ in range(3)]
    a = M.aggregate(views, k=3).data
    b = M.aggregate([views[1], views[0], views[2]], k=3).data
    assert np.max(np.abs(a - b)) < 1e-12


def test_aggregate_validates_inputs():
    with pytest.raises(ShapeError):
        M.aggregate([T.Tensor(np.zeros((1, 2, 3)))] * 4, k=5)
    with pytest.raises(ShapeError):
        M.aggregate([T.Tensor(np.zeros((1, 2, 3))), T.Tensor(np.zeros((1, 2, 4)))], k=2)
    with pytest.raises(ShapeError):
        M.aggregate([T.Tensor(np.zeros((1, 2, 3)))], k=1)


def test_aggregate_gradcheck():
    base = RNG.uniform(-1, 1, size=(1, 2, 3))

    def f(x):
        views = [x, T.Tensor(base + 0.5), T.Tensor(base - 0.25)]
        return T.reduce_sum(M.aggregate(views, k=3) * T.Tensor(np.sin(np.arange(6.0)).reshape(1, 2, 3)))

    assert T.gradcheck(f, base) < 1e-6


@pytest.mark.parametrize("variant", M.VARIANTS)
def test_forward_shapes_for_all_variants(variant):
    cfg = toy_cfg()
    mp = M.ModelParams.init(cfg, variant, seed=1)
    out = M.variant_forward(toy_window(cfg), mp)
    assert out.shape == (cfg.n, cfg.l_prime)
    assert np.all(np.isfinite(out))


def test_batched_forward_matches_per_window():
    cfg = toy_cfg()
    mp = M.ModelParams.init(cfg, "MNDE", seed=6)
    windows = toy_window(cfg, seed=31, batch=3)
    batched = M.forward_views(mp.constants(), cfg, "MNDE", windows).data
    for i in range(3):
        single = M.variant_forward(windows[i], mp)
        assert np.max(np.abs(batched[i] - single)) < 1e-12


def test_constant_window_freezes_controlled_states():
    cfg = toy_cfg()
    mp = M.ModelParams.init(cfg, "MNDE", seed=12)
    window = np.full((cfg.n, cfg.l), 2.5)
    path = sp.fit_natural_cubic(window)
    h_t, h_st, h_e = M.cnde_forward(path, mp, cfg)
    values = sp.dense_sample(sp.ControlPath(path.coeffs[None], cfg.l), cfg.r)[0]
    h_t0, h_st0, _ = M.embed_initial(values, mp.constants(), "cnde", edges=True)
    assert np.max(np.abs(h_t.data - h_t0.data[0])) < 1e-12
    assert np.max(np.abs(h_st.data - h_st0.data[0])) < 1e-12
    assert h_e.shape == (cfg.n, cfg.n, cfg.c_prime)


def test_cnde_dnde_output_shapes():
    cfg = toy_cfg()
    mp = M.ModelParams.init(cfg, "MNDE", seed=13)
    path = sp.fit_natural_cubic(toy_window(cfg))
    for fn in (M.cnde_forward, M.dnde_forward):
        h_t, h_st, h_e = fn(path, mp, cfg)
        assert h_t.shape == (cfg.n, cfg.c)
        assert h_st.shape == (cfg.n, cfg.c)
        assert h_e.shape == (cfg.n, cfg.n, cfg.c_prime)


def test_zeroed_parameters_forecast_zero():
    cfg = toy_cfg()
    mp = M.ModelParams.init(cfg, "MNDE", seed=14)
    for p in mp:
        p.value[:] = 0.0
    out = M.mnde_forward(toy_window(cfg), mp)
    assert np.array_equal(out, np.zeros((cfg.n, cfg.l_prime)))


def test_temporal_branch_does_not_affect_output():
    cfg = toy_cfg()
    mp = M.ModelParams.init(cfg, "MNDE", seed=15)
    win = toy_window(cfg)
    a = M.forward_views(mp.constants(), cfg, "MNDE", win, include_temporal=False).data
    b = M.forward_views(mp.constants(), cfg, "MNDE", win, include_temporal=True).data
    assert np.array_equal(a, b)


def test_forward_accepts_missing_entries():
    cfg = toy_cfg()
    mp = M.ModelParams.init(cfg, "MNDE", seed=16)
    win = toy_window(cfg)
    win[0, 2] = np.nan
    win[2, 4] = np.nan
    out = M.mnde_forward(win, mp)
    assert np.all(np.isfinite(out))


def test_forward_window_shape_validated():
    cfg = toy_cfg()
    mp = M.ModelParams.init(cfg, "MNDE", seed=17)
    with pytest.raises(ShapeError):
        M.mnde_forward(np.zeros((cfg.n + 1, cfg.l)), mp)
    with pytest.raises(ShapeError):
        M.mnde_forward(np.zeros((cfg.n, cfg.l + 1)), mp)


@pytest.mark.parametrize("name", [
    "cnde.loop0.S.A",
    "cnde.embed.ST.W",
    "dnde.loop0.E.W",
    "attn.head0.q.W",
    "out.st_c.2.b",
])
def test_end_to_end_gradcheck_selected_parameters(name):
    cfg = toy_cfg(n=2)
    mp = M.ModelParams.init(cfg, "MNDE", seed=18)
    win = toy_window(cfg, seed=44)
    base = mp.constants()
    mix = np.sin(np.arange(cfg.n * cfg.l_prime)).reshape(1, cfg.n, cfg.l_prime)

    def f(x):
        P = dict(base)
        P[name] = x
        out = M.forward_views(P, cfg, "MNDE", win)
        return T.reduce_sum(out * T.Tensor(mix))

    assert T.gradcheck(f, mp[name].value, h=1e-6) < 1e-5


def test_checkpoint_roundtrip_and_determinism():
    cfg = toy_cfg()
    mp = M.ModelParams.init(cfg, "MNDE", seed=19)
    buf1, buf2 = io.BytesIO(), io.BytesIO()
    M.save_checkpoint(buf1, mp, 12.5, 3.25)
    M.save_checkpoint(buf2, mp, 12.5, 3.25)
    assert buf1.getvalue() == buf2.getvalue()
    buf1.seek(0)
    loaded, mean, std = M.load_checkpoint(buf1)
    assert (mean, std) == (12.5, 3.25)
    assert loaded.variant == "MNDE" and loaded.cfg == cfg
    for name in mp.params:
        assert np.array_equal(loaded[name].value, mp[name].value)


def test_checkpoint_rejects_garbage():
    with pytest.raises(DataError):
        M.load_checkpoint(io.BytesIO(b"not a checkpoint at all"))


def test_params_copy_is_deep():
    mp = toy_params(seed=21)
    clone = mp.copy()
    clone["cnde.embed.T.W"].value[:] = 0.0
    assert not np.array_equal(mp["cnde.embed.T.W"].value, clone["cnde.embed.T.W"].value)
