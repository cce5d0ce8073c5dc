import math

import numpy as np
import pytest
import torch
import torch.nn.functional as F
from hypothesis import given, settings, strategies as st

from skillguide.approx import (ExpertClassifier, GmmPolicy, LinearProjection, Mlp, QFunction,
                               SkillDiscriminator, classifier_prob, discriminator_log_probs, encode,
                               gumbel_softmax, mixture_log_prob, mlp_forward, one_hot,
                               policy_log_prob, policy_sample, read_projection, write_projection)
from skillguide.core import ArtifactError, Standardizer, ValidationError


def zero_(module):
    with torch.no_grad():
        for p in module.parameters():
            p.zero_()
    return module


def numpy_forward(net: Mlp, x):
    """Independent forward pass with plain numpy matrix arithmetic."""
    layers = net.linear_layers()
    h = np.asarray(x, dtype=np.float64)
    for i, lin in enumerate(layers):
        h = h @ lin.weight.detach().double().numpy().T + lin.bias.detach().double().numpy()
        if i < len(layers) - 1:
            h = np.maximum(h, 0.0)
    return h


def single_component_policy(action_dim, mean=0.0, log_std=0.0, components=1):
    """Affine-only policy whose outputs are pinned by the final bias."""
    pol = zero_(GmmPolicy(2, action_dim, 1, components=components, hidden=()).double())
    c, a = components, action_dim
    with torch.no_grad():
        bias = pol.body.linear_layers()[-1].bias
        bias[c:c + c * a] = mean
        bias[c + c * a:] = log_std
    return pol


# ---------------------------------------------------------------------------
# mlp


def test_default_architecture():
    net = Mlp(5, 3)
    widths = [(l.in_features, l.out_features) for l in net.linear_layers()]
    assert widths == [(5, 300), (300, 300), (300, 3)]


def test_zero_weights_give_bias():
    net = zero_(Mlp(3, 2, hidden=(4,)))
    with torch.no_grad():
        net.linear_layers()[-1].bias.copy_(torch.tensor([1.5, -2.0]))
    assert torch.equal(mlp_forward(net, [0.3, 0.2, 0.1]), torch.tensor([1.5, -2.0]))


def test_identity_layer():
    net = Mlp(3, 3, hidden=())
    with torch.no_grad():
        net.linear_layers()[0].weight.copy_(torch.eye(3))
        net.linear_layers()[0].bias.zero_()
    x = torch.tensor([0.3, -1.0, 2.0])
    assert torch.equal(net(x), x)


def test_random_net_matches_numpy_oracle():
    torch.manual_seed(0)
    net = Mlp(7, 4, hidden=(300, 300))
    x = np.random.default_rng(0).normal(size=(16, 7))
    out = mlp_forward(net, x.astype(np.float32)).detach().double().numpy()
    assert np.max(np.abs(out - numpy_forward(net, x.astype(np.float32)))) < 1e-6


def test_mlp_dimension_mismatch():
    with pytest.raises(ValidationError):
        Mlp(3, 2)(torch.zeros(4))


# ---------------------------------------------------------------------------
# projection


def test_encode_selection_and_arithmetic():
    proj = LinearProjection(np.array([[1.0, 0.0]]), Standardizer.identity(2))
    assert encode(proj, [0.3, 0.9]).tolist() == [0.3]
    proj = LinearProjection(np.array([[0.5, 0.5]]), Standardizer.identity(2))
    assert encode(proj, [2.0, 4.0]).tolist() == [3.0]


def test_encode_null_space():
    proj = LinearProjection(np.array([[0.6, -0.8, 0.0]]), Standardizer.identity(3))
    null = proj.null_space()
    assert null.shape == (3, 2)
    s = np.array([0.1, 0.2, 0.3])
    for n in null.T:
        assert np.allclose(encode(proj, s + 3.7 * n), encode(proj, s), atol=1e-12)


def test_encode_dimension_mismatch():
    proj = LinearProjection(np.ones((1, 2)), Standardizer.identity(2))
    with pytest.raises(ValidationError):
        encode(proj, [1.0, 2.0, 3.0])


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(-10, 10), st.floats(-10, 10))
def test_encode_is_linear(seed, a, b):
    rng = np.random.default_rng(seed)
    proj = LinearProjection(rng.normal(size=(2, 5)), Standardizer.identity(5))
    s1, s2 = rng.normal(size=5), rng.normal(size=5)
    lhs = encode(proj, a * s1 + b * s2)
    rhs = a * encode(proj, s1) + b * encode(proj, s2)
    assert np.all(np.abs(lhs - rhs) < 1e-9 * max(1.0, np.abs(rhs).max()))


def test_projection_roundtrip_bit_exact(tmp_path):
    rng = np.random.default_rng(3)
    proj = LinearProjection(rng.normal(size=(2, 4)) * 1e-3,
                            Standardizer(rng.normal(size=4), rng.uniform(0.1, 2, size=4)))
    write_projection(proj, tmp_path / "p.txt")
    back = read_projection(tmp_path / "p.txt")
    assert np.array_equal(back.chi, proj.chi)
    assert np.array_equal(back.standardizer.mean, proj.standardizer.mean)
    assert np.array_equal(back.standardizer.std, proj.standardizer.std)
    assert (tmp_path / "p.txt").read_text().splitlines()[0] == "2 4"


@pytest.mark.parametrize("text", ["", "2 3\n1 2 3\n", "1 2\n1 2 3\n0 0\n1 1\n", "x y\n"])
def test_projection_malformed(tmp_path, text):
    (tmp_path / "p.txt").write_text(text)
    with pytest.raises(ArtifactError):
        read_projection(tmp_path / "p.txt")


def test_projection_missing_file(tmp_path):
    with pytest.raises(ArtifactError):
        read_projection(tmp_path / "absent.txt")


# ---------------------------------------------------------------------------
# policy


def test_policy_head_shapes():
    pol = GmmPolicy(3, 2, 5)
    logits, means, log_stds = pol(torch.zeros(7, 3), torch.zeros(7, dtype=torch.long))
    assert logits.shape == (7, 4) and means.shape == (7, 4, 2) and log_stds.shape == (7, 4, 2)


def test_log_std_clamped():
    pol = single_component_policy(1, log_std=50.0)
    _, _, ls = pol(torch.zeros(1, 2, dtype=torch.float64), [0])
    assert ls.item() == 2.0
    pol = single_component_policy(1, log_std=-50.0)
    _, _, ls = pol(torch.zeros(1, 2, dtype=torch.float64), [0])
    assert ls.item() == -20.0


def test_tiny_std_action_near_zero():
    pol = single_component_policy(2, mean=0.0, log_std=-20.0)
    for mode in GmmPolicy.MODES:
        a = policy_sample(pol, [0.5, 0.5], 0, mode, torch.Generator().manual_seed(0))
        assert torch.all(a.abs() < 1e-6)


def test_deterministic_twice_identical():
    torch.manual_seed(1)
    pol = GmmPolicy(2, 2, 3)
    a1 = pol.act([0.4, 0.6], 2, "deterministic")
    a2 = pol.act([0.4, 0.6], 2, "deterministic")
    assert np.array_equal(a1, a2)


def test_deterministic_uses_most_probable_component():
    pol = single_component_policy(1, components=2)
    with torch.no_grad():
        bias = pol.body.linear_layers()[-1].bias
        bias[:2] = torch.tensor([0.0, 1.0], dtype=torch.float64)
        bias[2:4] = torch.tensor([-0.5, 0.7], dtype=torch.float64)
    a = policy_sample(pol, [0.0, 0.0], 0, "deterministic")
    assert a.item() == pytest.approx(math.tanh(0.7), abs=1e-12)


def test_saturated_mean_stochastic():
    pol = single_component_policy(2, mean=10.0, log_std=0.0)
    a = policy_sample(pol, np.zeros((1000, 2)), 0, "stochastic", torch.Generator().manual_seed(0))
    assert torch.all(a > 0.999) and torch.all(a < 1.0)


def test_unknown_mode():
    with pytest.raises(ValueError):
        policy_sample(GmmPolicy(2, 2, 1), [0.0, 0.0], 0, "greedy")


def test_invalid_skill():
    with pytest.raises(ValidationError):
        policy_sample(GmmPolicy(2, 2, 3), [0.0, 0.0], 3)
    with pytest.raises(ValidationError):
        one_hot([-1], 3)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1), st.sampled_from(GmmPolicy.MODES), st.floats(0.0, 30.0))
def test_actions_strictly_inside_box(seed, mode, scale):
    torch.manual_seed(seed)
    pol = GmmPolicy(2, 2, 2, hidden=(16,))
    states = torch.randn(64, 2, generator=torch.Generator().manual_seed(seed)) * scale
    a, _ = pol.sample(states, torch.zeros(64, dtype=torch.long), mode, torch.Generator().manual_seed(seed))
    assert torch.all(a.abs() < 1.0)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(1e-3, 1e3))
def test_deterministic_invariant_to_logit_rescaling(seed, c):
    torch.manual_seed(seed)
    pol = GmmPolicy(2, 2, 1, hidden=()).double()
    states = torch.rand(32, 2, dtype=torch.float64, generator=torch.Generator().manual_seed(seed))
    skills = torch.zeros(32, dtype=torch.long)
    base, _ = pol.sample(states, skills, "deterministic")
    with torch.no_grad():
        lin = pol.body.linear_layers()[-1]
        lin.weight[:4] *= c
        lin.bias[:4] *= c
    scaled, _ = pol.sample(states, skills, "deterministic")
    assert torch.equal(base, scaled)


# ---------------------------------------------------------------------------
# log-density


def test_log_prob_standard_normal():
    pol = single_component_policy(1)
    assert policy_log_prob(pol, [0.0, 0.0], 0, [0.0]).item() == pytest.approx(-0.5 * math.log(2 * math.pi), abs=1e-12)
    assert policy_log_prob(pol, [0.0, 0.0], 0, [0.0]).item() == pytest.approx(-0.91894, abs=1e-5)
    pol2 = single_component_policy(2)
    assert policy_log_prob(pol2, [0.0, 0.0], 0, [0.0, 0.0]).item() == pytest.approx(-1.83788, abs=1e-5)


def test_log_prob_tanh_correction_matches_naive():
    u = torch.tensor([[0.3, -1.2]], dtype=torch.float64)
    pol = single_component_policy(2)
    lp = policy_log_prob(pol, [0.0, 0.0], 0, u[0]).item()
    naive = (-0.5 * u**2 - 0.5 * math.log(2 * math.pi)).sum() - torch.log(1 - torch.tanh(u) ** 2).sum()
    assert lp == pytest.approx(naive.item(), abs=1e-12)


def test_log_prob_finite_at_saturation():
    pol = single_component_policy(1, mean=30.0)
    assert math.isfinite(policy_log_prob(pol, [0.0, 0.0], 0, [30.0]).item())


@pytest.mark.parametrize("seed", range(5))
def test_squashed_mixture_integrates_to_one(seed):
    g = torch.Generator().manual_seed(seed)
    logits = torch.randn(1, 4, generator=g, dtype=torch.float64)
    means = torch.rand(1, 4, 1, generator=g, dtype=torch.float64) * 4 - 2
    log_stds = torch.rand(1, 4, 1, generator=g, dtype=torch.float64) * 1.5 - 1.0
    # integrate the density of a = tanh(u) over (-1, 1) by substituting da = sech^2(u) du
    u = torch.linspace(-40, 40, 400_001, dtype=torch.float64)
    log_pa = mixture_log_prob(logits.expand(len(u), 4), means.expand(len(u), 4, 1),
                              log_stds.expand(len(u), 4, 1), u[:, None])
    integrand = torch.exp(log_pa) / torch.cosh(u) ** 2
    mass = torch.trapezoid(integrand, u).item()
    assert abs(mass - 1.0) < 1e-3


# ---------------------------------------------------------------------------
# gumbel-softmax


def test_gumbel_dominant_logit():
    out = gumbel_softmax(torch.tensor([20.0, -20.0], dtype=torch.float64), 0.1,
                         torch.Generator().manual_seed(0))
    assert abs(out[0].item() - 1) < 1e-4 and abs(out[1].item()) < 1e-4


def test_gumbel_high_temperature_uniform():
    out = gumbel_softmax(torch.tensor([1.0, -2.0, 0.5], dtype=torch.float64), 1e6,
                         torch.Generator().manual_seed(0))
    assert torch.all((out - 1 / 3).abs() < 1e-3)


def test_gumbel_rejects_nonpositive_temperature():
    for t in (0.0, -1.0):
        with pytest.raises(ValueError):
            gumbel_softmax(torch.zeros(2), t)


def test_gumbel_equal_logits_mean_uniform():
    n, k = 100_000, 4
    out = gumbel_softmax(torch.zeros(n, k, dtype=torch.float64), 1.0, torch.Generator().manual_seed(0))
    mean = out.mean(0)
    sem = out.std(0) / math.sqrt(n)
    assert torch.all((mean - 1 / k).abs() < 5 * sem)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(0.05, 20.0))
def test_gumbel_on_simplex_and_differentiable(seed, temperature):
    logits = torch.randn(8, 5, generator=torch.Generator().manual_seed(seed), dtype=torch.float64)
    logits.requires_grad_(True)
    out = gumbel_softmax(logits, temperature, torch.Generator().manual_seed(seed))
    assert torch.all(out >= 0) and torch.allclose(out.sum(-1), torch.ones(8, dtype=torch.float64))
    (out[:, 0] * torch.arange(8)).sum().backward()
    assert torch.isfinite(logits.grad).all()


def test_gumbel_hard_is_one_hot_with_soft_gradient():
    logits = torch.tensor([[0.3, 0.1, -0.2]], dtype=torch.float64, requires_grad=True)
    out = gumbel_softmax(logits, 1.0, torch.Generator().manual_seed(2), hard=True)
    assert sorted(out[0].tolist()) == [0.0, 0.0, 1.0]
    out[0, 0].backward()
    assert logits.grad.abs().sum() > 0


def test_reparameterized_gradient_matches_tanh_derivative():
    """d E[a] / d mu_0 for a two-component mixture with equal weights is
    0.5 * E[sech^2(mu_0 + sigma * eps)]; gradients flow to the component mean."""
    n, mu, log_std = 100_000, 0.4, -3.0
    pol = single_component_policy(1, mean=mu, log_std=log_std, components=2)
    bias = pol.body.linear_layers()[-1].bias
    states = torch.zeros(n, 2, dtype=torch.float64)
    action, u = pol.sample(states, torch.zeros(n, dtype=torch.long), "reparameterized",
                           torch.Generator().manual_seed(0))
    action.sum().backward()
    estimate = bias.grad[2].item() / n
    sigma = math.exp(log_std)
    eps = torch.linspace(-8, 8, 20_001, dtype=torch.float64)
    pdf = torch.exp(-0.5 * eps**2) / math.sqrt(2 * math.pi)
    sech2 = 1 / torch.cosh(mu + sigma * eps) ** 2
    exact = 0.5 * torch.trapezoid(pdf * sech2, eps).item()
    # per-sample term is Bernoulli(0.5) * sech^2(u); its variance bounds the error
    second = 0.5 * torch.trapezoid(pdf * sech2**2, eps).item()
    mc_sigma = math.sqrt(max(second - exact**2, 0.0) / n)
    assert abs(estimate - exact) < 3 * mc_sigma
    assert exact == pytest.approx(0.5 * (1 - math.tanh(mu) ** 2), rel=1e-2)


# ---------------------------------------------------------------------------
# discriminator and classifier


def test_zero_discriminator_uniform():
    disc = zero_(SkillDiscriminator(3, 50))
    out = discriminator_log_probs(disc, np.random.default_rng(0).normal(size=(4, 3)))
    assert torch.allclose(out, torch.full((4, 50), math.log(1 / 50)), atol=1e-6)
    assert out[0, 0].item() == pytest.approx(-3.912, abs=1e-3)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_discriminator_normalized(seed):
    torch.manual_seed(seed)
    disc = SkillDiscriminator(2, 7, hidden=(32, 32))
    e = torch.randn(16, 2, generator=torch.Generator().manual_seed(seed)) * 10
    assert torch.allclose(disc(e).exp().sum(-1), torch.ones(16), atol=1e-6)
    assert torch.allclose(torch.logsumexp(disc(e), -1), torch.zeros(16), atol=1e-6)


def test_discriminator_dimension_mismatch():
    with pytest.raises(ValidationError):
        discriminator_log_probs(SkillDiscriminator(2, 3), np.zeros((1, 3)))


def test_discriminator_overfits_toy():
    torch.manual_seed(0)
    disc = SkillDiscriminator(1, 2)
    e = torch.tensor([[-1.0], [1.0]])
    z = torch.tensor([0, 1])
    opt = torch.optim.Adam(disc.parameters(), lr=3e-4)
    for _ in range(500):
        loss = F.nll_loss(disc(e), z)
        opt.zero_grad()
        loss.backward()
        opt.step()
    probs = disc(e).exp()
    assert probs[0, 0] > 0.99 and probs[1, 1] > 0.99


def test_classifier_zero_and_saturated():
    clf = zero_(ExpertClassifier(2))
    assert classifier_prob(clf, [[0.3, -0.1]]).item() == 0.5
    with torch.no_grad():
        clf.body.linear_layers()[-1].bias.fill_(20.0)
    assert classifier_prob(clf, [[0.3, -0.1]]).item() > 0.999


def test_classifier_matches_oracle():
    torch.manual_seed(4)
    clf = ExpertClassifier(3)
    x = np.random.default_rng(4).normal(size=(20, 3)).astype(np.float32)
    logit = numpy_forward(clf.body, x)[:, 0]
    oracle = 1 / (1 + np.exp(-logit))
    assert np.max(np.abs(classifier_prob(clf, x).detach().double().numpy() - oracle)) < 1e-6


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_classifier_strictly_inside_unit_interval(seed):
    torch.manual_seed(seed)
    clf = ExpertClassifier(2, hidden=(16,)).double()
    p = clf(torch.randn(32, 2, dtype=torch.float64))
    assert torch.all(p > 0) and torch.all(p < 1)


def test_q_function_output_shape():
    q = QFunction(2, 2, 3)
    out = q(torch.zeros(5, 2), torch.tensor([0, 1, 2, 0, 1]), torch.zeros(5, 2))
    assert out.shape == (5,)


# ---------------------------------------------------------------------------
# gradient checks against central finite differences


def _fd_check(module, loss_fn, seed, points=10, h=1e-5):
    """Compare autograd with central differences at ``points`` random parameter entries."""
    rng = np.random.default_rng(seed)
    params = [p for p in module.parameters()]
    module.zero_grad()
    loss_fn().backward()
    for _ in range(points):
        p = params[rng.integers(len(params))]
        idx = tuple(int(rng.integers(s)) for s in p.shape)
        analytic = p.grad[idx].item()
        with torch.no_grad():
            orig = p[idx].item()
            p[idx] = orig + h
            up = loss_fn().item()
            p[idx] = orig - h
            down = loss_fn().item()
            p[idx] = orig
        numeric = (up - down) / (2 * h)
        denom = max(abs(analytic) + abs(numeric), 1e-6)
        assert abs(analytic - numeric) / denom < 1e-4, (idx, analytic, numeric)


@pytest.mark.parametrize("seed", range(3))
def test_gradcheck_policy_log_prob(seed):
    torch.manual_seed(seed)
    pol = GmmPolicy(3, 2, 4, hidden=(16, 16)).double()
    states = torch.randn(8, 3, dtype=torch.float64)
    skills = torch.arange(8) % 4
    u = torch.randn(8, 2, dtype=torch.float64)
    _fd_check(pol, lambda: pol.log_prob(states, skills, u).sum(), seed)


@pytest.mark.parametrize("seed", range(3))
def test_gradcheck_discriminator_cross_entropy(seed):
    torch.manual_seed(seed)
    disc = SkillDiscriminator(2, 5, hidden=(16, 16)).double()
    e = torch.randn(10, 2, dtype=torch.float64)
    z = torch.arange(10) % 5
    _fd_check(disc, lambda: F.nll_loss(disc(e), z), seed)


@pytest.mark.parametrize("seed", range(3))
def test_gradcheck_classifier_log_likelihood(seed):
    torch.manual_seed(seed)
    clf = ExpertClassifier(2, hidden=(16, 16)).double()
    e = torch.randn(10, 2, dtype=torch.float64)
    x = (torch.arange(10) % 2).double()
    _fd_check(clf, lambda: -(x * torch.log(clf(e)) + (1 - x) * torch.log(1 - clf(e))).mean(), seed)
