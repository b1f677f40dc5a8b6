import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from bitta import net
from bitta import tensor as T
from bitta.net import NetworkConfig
from bitta.priors import PriorConfig, prior_loss, prior_loss_grad, scl, tcl
from bitta.stmap import shifted_pair
from bitta.synth import StreamParams, generate_stream

SMALL = NetworkConfig(input_shape=(32, 8, 3), stem_channels=3, channels=(4, 4, 4, 4))


def _scl_brute(maps, delta):
    total = 0.0
    for f in maps:
        f = f.reshape(f.shape[0], f.shape[1], -1)
        for j in range(f.shape[1] - delta):
            for i in range(f.shape[0]):
                for c in range(f.shape[2]):
                    total += abs(f[i, j, c] - f[i, j + delta, c])
    return total


def test_tcl_cases():
    x = T.Tensor([1.0, 5.0, -3.0])
    assert tcl(x, x, 8.0).item() == 0.0
    assert tcl(T.Tensor([10.0, 0.0]), T.Tensor([0.0, 0.0]), 8.0).item() == 2.0
    with pytest.raises(T.ShapeError):
        tcl(T.Tensor([1.0]), T.Tensor([1.0, 2.0]), 8.0)


def test_tcl_inactive_hinge_has_zero_gradient():
    with T.record() as rec:
        a = T.Tensor([1.0, 2.0, 3.0], requires_grad=True)
        b = T.Tensor([4.0, -1.0, 0.5], requires_grad=True)
        loss = tcl(a, b, 8.0)
        ga, gb = T.grad(loss, [a, b], rec)
    assert loss.item() == 0.0
    assert not ga.any() and not gb.any()


@settings(max_examples=50, deadline=None)
@given(
    a=arrays(np.float64, 7, elements=st.floats(-200, 200)),
    b=arrays(np.float64, 7, elements=st.floats(-200, 200)),
    xi=st.floats(0, 20),
)
def test_tcl_symmetric(a, b, xi):
    assert tcl(T.Tensor(a), T.Tensor(b), xi).item() == tcl(T.Tensor(b), T.Tensor(a), xi).item()
    assert tcl(T.Tensor(a), T.Tensor(a), xi).item() == 0.0


def test_scl_worked_case():
    f = np.array([[1.0, 2.0, 4.0], [1.0, 2.0, 4.0]])  # 2 x 3, columns (1,1), (2,2), (4,4)
    assert scl([T.Tensor(f)], 1).item() == 6.0


def test_scl_constant_and_empty():
    f = np.tile(np.arange(5.0)[:, None, None], (1, 4, 3))
    assert scl([T.Tensor(f)], 1).item() == 0.0
    g = np.random.default_rng(0).normal(size=(4, 3, 2))
    assert scl([T.Tensor(g)], 3).item() == 0.0
    assert scl([], 1).item() == 0.0


@pytest.mark.parametrize("seed", range(20))
def test_scl_matches_brute_force_and_reversal(seed):
    rng = np.random.default_rng(seed)
    maps = [rng.normal(size=(4, 6)), rng.normal(size=(3, 5, 2))]
    for delta in (1, 2, 3):
        val = scl([T.Tensor(m) for m in maps], delta).item()
        assert val == pytest.approx(_scl_brute(maps, delta), rel=1e-12)
        flipped = scl([T.Tensor(m[:, ::-1].copy()) for m in maps], delta).item()
        assert flipped == pytest.approx(val, rel=1e-12)


@pytest.fixture(scope="module")
def pair():
    m, d = generate_stream(StreamParams(duration_frames=300, regions=10, noise_sigma=0.1), 1)
    return shifted_pair(d, 120, 32, 8, 59, np.random.default_rng(0), m.hr_trace)


def test_zero_weights_zero_loss(pair):
    params = net.as_tensors(net.init_params(SMALL, 0))
    cfg = PriorConfig(lambda_s=0.0, lambda_t=0.0)
    with T.record() as rec:
        lp, _ = prior_loss(params, pair, cfg, SMALL)
        grads = T.grad(lp, list(params.values()), rec)
    assert lp.item() == 0.0
    assert all(not g.any() for g in grads)


def test_identical_windows_and_flat_features_give_zero(pair):
    # 1x1 kernels keep a spatially constant input spatially constant at every depth
    cfg = NetworkConfig(input_shape=(32, 8, 3), stem_channels=3, channels=(4, 4, 4, 4), kernel=1)
    m, d = generate_stream(StreamParams(duration_frames=200, regions=1), 2)
    data = np.repeat(d, 8, axis=1)
    a, b, delta = shifted_pair(data, 80, 32, 8, 59, np.random.default_rng(0), delta=0)
    loss, g, diag = prior_loss_grad((a, b), PriorConfig(), cfg)(net.flatten(net.init_params(cfg, 4)))
    assert diag["L_s"] == 0.0 and diag["L_t"] == 0.0
    assert loss == 0.0 and not g.any()


def test_prior_loss_defaults():
    cfg = PriorConfig()
    assert (cfg.lambda_s, cfg.lambda_t, cfg.xi_t, cfg.delta_max) == (0.001, 0.01, 8.0, 59)


def test_prior_loss_nonnegative_and_grad_zero_at_zero(pair):
    for seed in range(5):
        w = net.flatten(net.init_params(SMALL, seed))
        loss, g, _ = prior_loss_grad(pair, PriorConfig(xi_t=0.0), SMALL)(w)
        assert loss >= 0
    zero = np.zeros(SMALL.n_params())
    loss, g, _ = prior_loss_grad(pair, PriorConfig(), SMALL)(zero)
    assert loss == 0.0 and not g.any()


@pytest.mark.parametrize("seed", range(5))
def test_prior_loss_gradient_finite_differences(pair, seed):
    cfg = PriorConfig(lambda_s=0.5, lambda_t=1.0, xi_t=0.0)
    lg = prior_loss_grad(pair, cfg, SMALL)
    w0 = net.flatten(net.init_params(SMALL, seed))
    rng = np.random.default_rng(seed)

    def loss_fn(ps):
        loss, g, _ = lg(ps[0])
        return loss, [g]

    _, g, _ = lg(w0)
    idx = [(0, int(j)) for j in np.argsort(-np.abs(g))[:20]]
    dirs = [[rng.normal(size=w0.size)] for _ in range(5)]
    assert T.finite_diff_check(loss_fn, [w0], 1e-6, indices=idx, directions=dirs) < 1e-4
