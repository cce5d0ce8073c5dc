"""Configuration, seeding, transitions, replay storage and state standardization."""
from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Iterator, Optional

import numpy as np


class ValidationError(ValueError):
    """Input with the wrong shape or out of its allowed range."""


class ConfigError(ValueError):
    pass


class ArtifactError(IOError):
    """Missing, corrupt or malformed file artifact."""


class NumericalError(FloatingPointError):
    pass


# ---------------------------------------------------------------------------
# config


@dataclass
class Config:
    name: str = "pointmaze"
    env: str = "pointmaze"
    seed: int = 0
    num_skills: int = 10
    embedding_dim: int = 1
    state_dim: int = 2
    action_dim: int = 2
    use_projection: bool = True
    standardize: bool = True
    alpha: float = 0.1
    gamma: float = 0.99
    tau: float = 0.005
    buffer_capacity: int = 1_000_000
    batch_size: int = 256
    hidden_width: int = 300
    epochs: int = 100
    env_steps_per_epoch: int = 1000
    train_steps_per_epoch: int = 500
    lr_policy: float = 3e-4
    lr_q: float = 3e-4
    lr_disc: float = 3e-4
    lr_encoder: float = 1e-3
    gmm_components: int = 4
    gumbel_temperature: float = 1.0
    horizon: int = 100
    shared_init_noise: bool = False
    # reference policy
    ref_steps: int = 100_000
    ref_eval_episodes: int = 5
    # early stop for reference training; the point-maze optimum is about 87
    ref_target_return: Optional[float] = 80.0
    # pretraining data and encoder fit
    n_traj: int = 10
    expert_mode: str = "deterministic"
    encoder_max_steps: int = 20_000
    encoder_patience: int = 50
    encoder_tol: float = 1e-5
    # evaluation
    eval_rollouts: int = 5
    eval_axis: int = 0
    eval_every: int = 1
    checkpoint_every: int = 10

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        for name in ("num_skills", "embedding_dim", "state_dim", "action_dim", "buffer_capacity",
                     "batch_size", "hidden_width", "gmm_components", "horizon"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        for name in ("epochs", "env_steps_per_epoch", "train_steps_per_epoch", "ref_steps", "n_traj"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0, got {getattr(self, name)}")
        if not self.alpha > 0:
            raise ConfigError(f"alpha must be > 0, got {self.alpha}")
        if not 0 < self.gamma <= 1:
            raise ConfigError(f"gamma must be in (0, 1], got {self.gamma}")
        if not 0 < self.tau <= 1:
            raise ConfigError(f"tau must be in (0, 1], got {self.tau}")
        if not self.gumbel_temperature > 0:
            raise ConfigError("gumbel_temperature must be > 0")
        for name in ("lr_policy", "lr_q", "lr_disc", "lr_encoder"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be > 0")
        if self.use_projection and self.embedding_dim >= self.state_dim:
            raise ConfigError(
                f"embedding_dim ({self.embedding_dim}) must be strictly smaller than "
                f"state_dim ({self.state_dim}) when the projection is enabled")
        if self.expert_mode not in ("stochastic", "deterministic"):
            raise ConfigError(f"expert_mode must be stochastic or deterministic, got {self.expert_mode!r}")

    def replace(self, **changes) -> "Config":
        return dataclasses.replace(self, **changes)

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            value = getattr(self, f.name)
            lines.append(f"{f.name} = {'none' if value is None else value}")
        return "\n".join(lines) + "\n"

    def digest(self) -> str:
        return hashlib.sha256(self.to_text().encode()).hexdigest()[:16]

    @classmethod
    def from_text(cls, text: str, **overrides) -> "Config":
        values = parse_config_text(text)
        values.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**values)

    @classmethod
    def load(cls, path, **overrides) -> "Config":
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        return cls.from_text(path.read_text(), **overrides)

    def save(self, path) -> None:
        Path(path).write_text(self.to_text())


def _coerce(name: str, raw: str, kind):
    kind = str(kind)
    if raw.lower() == "none":
        if "Optional" not in kind:
            raise ConfigError(f"{name} may not be none")
        return None
    try:
        if "bool" in kind:
            if raw.lower() in ("1", "true", "yes", "on"):
                return True
            if raw.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if "int" in kind:
            as_float = float(raw)
            if as_float != int(as_float):
                raise ValueError(raw)
            return int(as_float)
        if "float" in kind:
            return float(raw)
    except ValueError:
        raise ConfigError(f"bad value for {name}: {raw!r}") from None
    return raw


def parse_config_text(text: str) -> dict:
    """Parse the flat ``key = value`` format; ``#`` starts a comment."""
    known = {f.name: f.type for f in fields(Config)}
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, raw = (part.strip() for part in line.split("=", 1))
        if key not in known:
            raise ConfigError(f"line {lineno}: unknown config key {key!r}")
        values[key] = _coerce(key, raw, known[key])
    return values


# ---------------------------------------------------------------------------
# seeding


def derive_seed(root_seed: int, component: str) -> int:
    """Stable per-component seed: first 8 bytes of sha256("<root>/<component>")."""
    digest = hashlib.sha256(f"{int(root_seed)}/{component}".encode()).digest()
    return int.from_bytes(digest[:8], "little") & (2**63 - 1)


def make_rng(root_seed: int, component: str) -> np.random.Generator:
    return np.random.default_rng(derive_seed(root_seed, component))


# ---------------------------------------------------------------------------
# transitions and replay


@dataclass
class Transition:
    state: np.ndarray
    skill: int
    action: np.ndarray
    next_state: np.ndarray
    extrinsic_reward: float = 0.0
    done: bool = False

    def validate(self, state_dim: int, action_dim: int, num_skills: int) -> None:
        state = np.asarray(self.state)
        next_state = np.asarray(self.next_state)
        action = np.asarray(self.action)
        if state.shape != (state_dim,) or next_state.shape != (state_dim,):
            raise ValidationError(
                f"state shapes {state.shape}/{next_state.shape} do not match state_dim={state_dim}")
        if action.shape != (action_dim,):
            raise ValidationError(f"action shape {action.shape} does not match action_dim={action_dim}")
        if not 0 <= int(self.skill) < num_skills:
            raise ValidationError(f"skill {self.skill} outside [0, {num_skills})")
        if not np.all(np.abs(action) < 1.0):
            raise ValidationError("action components must lie strictly inside (-1, 1)")


@dataclass
class Batch:
    states: np.ndarray
    skills: np.ndarray
    actions: np.ndarray
    next_states: np.ndarray
    rewards: np.ndarray
    dones: np.ndarray

    def __len__(self) -> int:
        return len(self.skills)

    def __getitem__(self, i) -> Transition:
        return Transition(self.states[i], int(self.skills[i]), self.actions[i],
                          self.next_states[i], float(self.rewards[i]), bool(self.dones[i]))


class ReplayBuffer:
    """FIFO ring of transitions stored column-wise."""

    def __init__(self, capacity: int, state_dim: int, action_dim: int, num_skills: int):
        if capacity < 1:
            raise ValidationError("capacity must be >= 1")
        self.capacity = int(capacity)
        self.state_dim = state_dim
        self.action_dim = action_dim
        self.num_skills = num_skills
        self.states = np.zeros((capacity, state_dim))
        self.next_states = np.zeros((capacity, state_dim))
        self.actions = np.zeros((capacity, action_dim))
        self.skills = np.zeros(capacity, dtype=np.int64)
        self.rewards = np.zeros(capacity)
        self.dones = np.zeros(capacity, dtype=bool)
        self.cursor = 0
        self.size = 0

    def __len__(self) -> int:
        return self.size

    def add(self, t: Transition) -> None:
        t.validate(self.state_dim, self.action_dim, self.num_skills)
        i = self.cursor
        self.states[i] = t.state
        self.next_states[i] = t.next_state
        self.actions[i] = t.action
        self.skills[i] = t.skill
        self.rewards[i] = t.extrinsic_reward
        self.dones[i] = t.done
        self.cursor = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def _order(self) -> np.ndarray:
        if self.size < self.capacity:
            return np.arange(self.size)
        return (np.arange(self.capacity) + self.cursor) % self.capacity

    def __iter__(self) -> Iterator[Transition]:
        """Oldest first."""
        batch = self._gather(self._order())
        for i in range(len(batch)):
            yield batch[i]

    def _gather(self, idx: np.ndarray) -> Batch:
        return Batch(self.states[idx], self.skills[idx], self.actions[idx],
                     self.next_states[idx], self.rewards[idx], self.dones[idx])

    def sample(self, n: int, rng: np.random.Generator) -> Batch:
        """Uniform sampling with replacement."""
        if self.size == 0:
            raise ValidationError("cannot sample from an empty replay buffer")
        return self._gather(rng.integers(0, self.size, size=n))

    def state_dict(self) -> dict:
        order = self._order()
        return {
            "capacity": np.array(self.capacity),
            "states": self.states[order], "next_states": self.next_states[order],
            "actions": self.actions[order], "skills": self.skills[order],
            "rewards": self.rewards[order], "dones": self.dones[order],
        }

    def save(self, path) -> None:
        np.savez_compressed(path, **self.state_dict())

    @classmethod
    def load(cls, path, num_skills: int) -> "ReplayBuffer":
        data = np.load(path)
        states = data["states"]
        buf = cls(int(data["capacity"]), states.shape[1], data["actions"].shape[1], num_skills)
        n = len(states)
        buf.states[:n] = states
        buf.next_states[:n] = data["next_states"]
        buf.actions[:n] = data["actions"]
        buf.skills[:n] = data["skills"]
        buf.rewards[:n] = data["rewards"]
        buf.dones[:n] = data["dones"]
        buf.size = n
        buf.cursor = n % buf.capacity
        return buf


def buffer_add(buffer: ReplayBuffer, t: Transition) -> ReplayBuffer:
    buffer.add(t)
    return buffer


def buffer_sample(buffer: ReplayBuffer, n: int, rng: np.random.Generator) -> Batch:
    return buffer.sample(n, rng)


# ---------------------------------------------------------------------------
# labeled states and standardization


@dataclass
class Standardizer:
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def identity(cls, dim: int) -> "Standardizer":
        return cls(np.zeros(dim), np.ones(dim))

    @property
    def dim(self) -> int:
        return len(self.mean)

    def transform(self, states) -> np.ndarray:
        states = np.asarray(states, dtype=np.float64)
        if states.shape[-1] != self.dim:
            raise ValidationError(f"expected {self.dim} features, got {states.shape[-1]}")
        return (states - self.mean) / self.std

    def inverse(self, z) -> np.ndarray:
        return np.asarray(z, dtype=np.float64) * self.std + self.mean


def fit_standardizer(states) -> Standardizer:
    """Per-feature mean and population std; zero-variance features get std 1.

    Accepts a raw ``(n, d)`` array or a :class:`LabeledStateDataset` (labels pooled).
    """
    states = np.asarray(getattr(states, "states", states), dtype=np.float64)
    if states.ndim != 2 or len(states) == 0:
        raise ValidationError("need a nonempty (n, d) array of states")
    mean = states.mean(axis=0)
    std = states.std(axis=0)
    std = np.where(std > 0, std, 1.0)
    return Standardizer(mean, std)


@dataclass
class LabeledState:
    state: np.ndarray
    label: int

    def __post_init__(self):
        if self.label not in (0, 1):
            raise ValidationError(f"label must be 0 or 1, got {self.label}")


@dataclass
class LabeledStateDataset:
    """States labeled 1 (visited by the reference policy) or 0 (random policy)."""

    states: np.ndarray
    labels: np.ndarray
    standardizer: Standardizer = field(default=None)

    def __post_init__(self):
        self.states = np.asarray(self.states, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.uint8)
        if self.states.ndim != 2 or len(self.states) != len(self.labels):
            raise ValidationError("states must be (n, d) with one label per row")
        if np.any(self.labels > 1):
            raise ValidationError("labels must be 0 or 1")
        if self.standardizer is None and len(self.states):
            self.standardizer = fit_standardizer(self.states)

    def __len__(self) -> int:
        return len(self.labels)

    def __iter__(self) -> Iterator[LabeledState]:
        for s, x in zip(self.states, self.labels):
            yield LabeledState(s, int(x))

    @property
    def state_dim(self) -> int:
        return self.states.shape[1]

    def standardized(self) -> np.ndarray:
        return self.standardizer.transform(self.states)

    @classmethod
    def from_samples(cls, samples) -> "LabeledStateDataset":
        samples = list(samples)
        return cls(np.stack([s.state for s in samples]), np.array([s.label for s in samples]))
