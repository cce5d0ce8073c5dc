"""Function approximators: MLPs, the tanh-squashed GMM policy, Q-functions,
skill discriminator, expert classifier and the linear state projection."""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .core import ArtifactError, Standardizer, ValidationError

LOG_STD_MIN = -20.0
LOG_STD_MAX = 2.0
# tanh saturates to exactly +-1 in float32; keep actions strictly inside the box
ACTION_EPS = 1e-6
LN2 = math.log(2.0)


class Mlp(nn.Module):
    """Fully connected ReLU network. ``hidden=()`` gives a single affine layer."""

    def __init__(self, in_dim: int, out_dim: int, hidden: Sequence[int] = (300, 300)):
        super().__init__()
        self.in_dim = in_dim
        self.out_dim = out_dim
        layers = []
        d = in_dim
        for width in hidden:
            layers += [nn.Linear(d, width), nn.ReLU()]
            d = width
        layers.append(nn.Linear(d, out_dim))
        self.net = nn.Sequential(*layers)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-1] != self.in_dim:
            raise ValidationError(f"expected input of width {self.in_dim}, got {x.shape[-1]}")
        return self.net(x)

    def linear_layers(self) -> list:
        return [m for m in self.net if isinstance(m, nn.Linear)]


def mlp_forward(net: Mlp, x) -> torch.Tensor:
    dtype = next(net.parameters()).dtype
    return net(torch.as_tensor(np.asarray(x), dtype=dtype))


def one_hot(skills, num_skills: int, dtype=torch.float32) -> torch.Tensor:
    skills = torch.as_tensor(skills, dtype=torch.long)
    if skills.numel() and (skills.min() < 0 or skills.max() >= num_skills):
        raise ValidationError(f"skill index outside [0, {num_skills})")
    return F.one_hot(skills, num_skills).to(dtype)


def log1m_tanh_sq(u: torch.Tensor) -> torch.Tensor:
    """``log(1 - tanh(u)^2)`` without cancellation for large ``|u|``."""
    return 2.0 * (LN2 - u - F.softplus(-2.0 * u))


def gumbel_softmax(logits: torch.Tensor, temperature: float = 1.0,
                   generator: Optional[torch.Generator] = None, hard: bool = False) -> torch.Tensor:
    """Gumbel-Softmax sample on the simplex, differentiable in ``logits``.

    With ``hard=True`` the forward value is the one-hot argmax (an exact categorical
    draw) while gradients are those of the soft sample (straight-through).
    """
    if not temperature > 0:
        raise ValueError(f"temperature must be > 0, got {temperature}")
    tiny = torch.finfo(logits.dtype).tiny
    u = torch.rand(logits.shape, generator=generator, dtype=logits.dtype)
    g = -torch.log(-torch.log(u.clamp(min=tiny, max=1.0 - 1e-7)))
    soft = F.softmax((logits + g) / temperature, dim=-1)
    if not hard:
        return soft
    hard_sample = F.one_hot(soft.argmax(-1), soft.shape[-1]).to(soft.dtype)
    return hard_sample + soft - soft.detach()


def mixture_log_prob(logits: torch.Tensor, means: torch.Tensor, log_stds: torch.Tensor,
                     u: torch.Tensor) -> torch.Tensor:
    """Log-density of ``a = tanh(u)`` under a tanh-squashed diagonal Gaussian mixture.

    Shapes: logits (B, C), means/log_stds (B, C, A), u (B, A). Returns (B,).
    """
    log_w = F.log_softmax(logits, dim=-1)
    z = (u.unsqueeze(-2) - means) * torch.exp(-log_stds)
    comp = (-0.5 * z**2 - log_stds - 0.5 * math.log(2 * math.pi)).sum(-1)
    log_pu = torch.logsumexp(log_w + comp, dim=-1)
    return log_pu - log1m_tanh_sq(u).sum(-1)


class GmmPolicy(nn.Module):
    """Skill-conditioned policy ``tanh(GMM(s, z))``; the skill enters as a one-hot vector."""

    MODES = ("stochastic", "deterministic", "reparameterized")

    def __init__(self, state_dim: int, action_dim: int, num_skills: int,
                 components: int = 4, hidden: Sequence[int] = (300, 300)):
        super().__init__()
        self.state_dim = state_dim
        self.action_dim = action_dim
        self.num_skills = num_skills
        self.components = components
        self.body = Mlp(state_dim + num_skills, components * (1 + 2 * action_dim), hidden)

    @property
    def dtype(self):
        return self.body.net[0].weight.dtype

    def forward(self, states: torch.Tensor, skills) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        x = torch.cat([states, one_hot(skills, self.num_skills, states.dtype)], dim=-1)
        out = self.body(x)
        c, a = self.components, self.action_dim
        logits = out[..., :c]
        means = out[..., c:c + c * a].reshape(*out.shape[:-1], c, a)
        log_stds = out[..., c + c * a:].reshape(*out.shape[:-1], c, a)
        return logits, means, log_stds.clamp(LOG_STD_MIN, LOG_STD_MAX)

    def sample(self, states: torch.Tensor, skills, mode: str = "stochastic",
               generator: Optional[torch.Generator] = None,
               temperature: float = 1.0) -> tuple[torch.Tensor, torch.Tensor]:
        """Return ``(action, u)`` with ``action = tanh(u)`` clamped strictly inside (-1, 1)."""
        if mode not in self.MODES:
            raise ValueError(f"unknown sampling mode {mode!r}; expected one of {self.MODES}")
        logits, means, log_stds = self(states, skills)
        idx_shape = (*logits.shape[:-1], 1, self.action_dim)
        if mode == "deterministic":
            k = logits.argmax(-1)
            u = means.gather(-2, k[..., None, None].expand(idx_shape)).squeeze(-2)
        elif mode == "stochastic":
            probs = F.softmax(logits, -1).reshape(-1, self.components)
            k = torch.multinomial(probs, 1, generator=generator).reshape(logits.shape[:-1])
            mu = means.gather(-2, k[..., None, None].expand(idx_shape)).squeeze(-2)
            ls = log_stds.gather(-2, k[..., None, None].expand(idx_shape)).squeeze(-2)
            eps = torch.randn(mu.shape, generator=generator, dtype=mu.dtype)
            u = mu + torch.exp(ls) * eps
        else:
            # a soft blend of components lands between modes, where the mixture
            # density (and so the entropy estimate) is meaningless; select hard
            w = gumbel_softmax(logits, temperature, generator, hard=True)
            eps = torch.randn(means.shape, generator=generator, dtype=means.dtype)
            u = (w.unsqueeze(-1) * (means + torch.exp(log_stds) * eps)).sum(-2)
        action = torch.tanh(u).clamp(-1.0 + ACTION_EPS, 1.0 - ACTION_EPS)
        return action, u

    def log_prob(self, states: torch.Tensor, skills, u: torch.Tensor) -> torch.Tensor:
        logits, means, log_stds = self(states, skills)
        return mixture_log_prob(logits, means, log_stds, u)

    @torch.no_grad()
    def act(self, state, skill: int, mode: str = "stochastic",
            generator: Optional[torch.Generator] = None) -> np.ndarray:
        s = torch.as_tensor(np.asarray(state), dtype=self.dtype).unsqueeze(0)
        action, _ = self.sample(s, torch.tensor([skill]), mode, generator)
        return action[0].double().numpy()


def policy_sample(policy: GmmPolicy, state, skill, mode: str = "stochastic",
                  generator: Optional[torch.Generator] = None) -> torch.Tensor:
    states = torch.as_tensor(state, dtype=policy.dtype)
    single = states.ndim == 1
    if single:
        states = states.unsqueeze(0)
    skills = torch.as_tensor(skill).reshape(-1).expand(states.shape[0])
    action, _ = policy.sample(states, skills, mode, generator)
    return action[0] if single else action


def policy_log_prob(policy: GmmPolicy, state, skill, u) -> torch.Tensor:
    states = torch.as_tensor(state, dtype=policy.dtype)
    u = torch.as_tensor(u, dtype=policy.dtype)
    single = states.ndim == 1
    if single:
        states, u = states.unsqueeze(0), u.unsqueeze(0)
    skills = torch.as_tensor(skill).reshape(-1).expand(states.shape[0])
    lp = policy.log_prob(states, skills, u)
    return lp[0] if single else lp


class QFunction(nn.Module):
    """``Q(s, z, a)`` with the skill as a one-hot input."""

    def __init__(self, state_dim: int, action_dim: int, num_skills: int,
                 hidden: Sequence[int] = (300, 300)):
        super().__init__()
        self.num_skills = num_skills
        self.body = Mlp(state_dim + num_skills + action_dim, 1, hidden)

    def forward(self, states: torch.Tensor, skills, actions: torch.Tensor) -> torch.Tensor:
        x = torch.cat([states, one_hot(skills, self.num_skills, states.dtype), actions], dim=-1)
        return self.body(x).squeeze(-1)


class SkillDiscriminator(nn.Module):
    """``q(z | e)``: embedding (or raw state in baseline mode) to skill log-probabilities."""

    def __init__(self, input_dim: int, num_skills: int, hidden: Sequence[int] = (300, 300)):
        super().__init__()
        self.num_skills = num_skills
        self.body = Mlp(input_dim, num_skills, hidden)

    def forward(self, e: torch.Tensor) -> torch.Tensor:
        return F.log_softmax(self.body(e), dim=-1)


def discriminator_log_probs(disc: SkillDiscriminator, e) -> torch.Tensor:
    return disc(torch.as_tensor(np.asarray(e), dtype=disc.body.net[0].weight.dtype))


class ExpertClassifier(nn.Module):
    """Binary classifier ``h(x = 1 | e)``; the last layer emits a logit."""

    def __init__(self, input_dim: int, hidden: Sequence[int] = (300, 300)):
        super().__init__()
        self.body = Mlp(input_dim, 1, hidden)

    def logit(self, e: torch.Tensor) -> torch.Tensor:
        return self.body(e).squeeze(-1)

    def forward(self, e: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.logit(e))


def classifier_prob(clf: ExpertClassifier, e) -> torch.Tensor:
    return clf(torch.as_tensor(np.asarray(e), dtype=clf.body.net[0].weight.dtype))


# ---------------------------------------------------------------------------
# linear projection


@dataclass
class LinearProjection:
    """``e = chi @ standardize(s)``, computed in float64 with no nonlinearity."""

    chi: np.ndarray
    standardizer: Standardizer

    def __post_init__(self):
        self.chi = np.atleast_2d(np.asarray(self.chi, dtype=np.float64))
        if self.standardizer.dim != self.chi.shape[1]:
            raise ValidationError("standardizer width must match the projection's state_dim")

    @property
    def embedding_dim(self) -> int:
        return self.chi.shape[0]

    @property
    def state_dim(self) -> int:
        return self.chi.shape[1]

    @classmethod
    def identity(cls, state_dim: int) -> "LinearProjection":
        """Baseline mode: no projection, no standardization."""
        return cls(np.eye(state_dim), Standardizer.identity(state_dim))

    def encode(self, standardized) -> np.ndarray:
        s = np.asarray(standardized, dtype=np.float64)
        if s.shape[-1] != self.state_dim:
            raise ValidationError(f"expected states of width {self.state_dim}, got {s.shape[-1]}")
        return s @ self.chi.T

    def embed(self, states) -> np.ndarray:
        """Standardize raw states, then project."""
        return self.encode(self.standardizer.transform(states))

    def null_space(self) -> np.ndarray:
        """Orthonormal basis (columns) of the null space of ``chi``."""
        _, sv, vt = np.linalg.svd(self.chi)
        rank = int(np.sum(sv > sv.max(initial=0.0) * max(self.chi.shape) * np.finfo(float).eps))
        return vt[rank:].T


def encode(proj: LinearProjection, state) -> np.ndarray:
    return proj.encode(state)


def write_projection(proj: LinearProjection, path) -> None:
    """Text format: ``"E S"`` header, E rows of chi, then the mean row and the std row."""
    rows = [f"{proj.embedding_dim} {proj.state_dim}"]
    for row in (*proj.chi, proj.standardizer.mean, proj.standardizer.std):
        rows.append(" ".join(repr(float(v)) for v in row))
    Path(path).write_text("\n".join(rows) + "\n")


def read_projection(path) -> LinearProjection:
    path = Path(path)
    if not path.is_file():
        raise ArtifactError(f"projection file not found: {path}")
    lines = [ln for ln in path.read_text().splitlines() if ln.strip()]
    try:
        e_dim, s_dim = (int(tok) for tok in lines[0].split())
        rows = [[float(tok) for tok in ln.split()] for ln in lines[1:]]
    except (ValueError, IndexError):
        raise ArtifactError(f"malformed projection file {path}") from None
    if e_dim < 1 or s_dim < 1 or len(rows) != e_dim + 2:
        raise ArtifactError(
            f"{path}: header says {e_dim}x{s_dim} (+2 standardizer rows) but found {len(rows)} rows")
    if any(len(r) != s_dim for r in rows):
        raise ArtifactError(f"{path}: every row must have {s_dim} values")
    arr = np.array(rows)
    if np.any(arr[-1] <= 0):
        raise ArtifactError(f"{path}: standardizer std must be positive")
    return LinearProjection(arr[:e_dim], Standardizer(arr[e_dim], arr[e_dim + 1]))
