"""Soft actor-critic with twin Q-functions, polyak targets and a reparameterized GMM policy."""
from __future__ import annotations

import copy
import logging
import math
from pathlib import Path
from typing import Callable, Iterable, Optional

import numpy as np
import torch

from .approx import GmmPolicy, QFunction
from .core import (ArtifactError, Batch, Config, NumericalError, ReplayBuffer, Transition,
                   derive_seed, make_rng)
from .env import Env, env_reset, env_step

log = logging.getLogger(__name__)


def td_target(reward, done, min_next_q, next_log_prob, gamma: float, alpha: float):
    """``r + gamma * (1 - done) * (min_i Q'_i(s', a') - alpha * log pi(a'|s'))``."""
    return reward + gamma * (1.0 - done) * (min_next_q - alpha * next_log_prob)


@torch.no_grad()
def polyak_update(main_params: Iterable[torch.Tensor], target_params: Iterable[torch.Tensor],
                  tau: float) -> list:
    """In place ``target <- tau * main + (1 - tau) * target``; returns the target list."""
    main_params, target_params = list(main_params), list(target_params)
    if len(main_params) != len(target_params) or any(
            m.shape != t.shape for m, t in zip(main_params, target_params)):
        raise ValueError("main and target parameter shapes differ")
    torch._foreach_mul_(target_params, 1.0 - tau)
    torch._foreach_add_(target_params, main_params, alpha=tau)
    return target_params


def _check_finite(name: str, value: torch.Tensor, step: int) -> float:
    v = float(value.detach())
    if not math.isfinite(v):
        raise NumericalError(f"{name} became non-finite ({v}) at update {step}")
    return v


class SacTrainer:
    """Policy, twin Q-functions, their target clones and optimizers."""

    def __init__(self, state_dim: int, action_dim: int, num_skills: int, config: Config,
                 seed: Optional[int] = None):
        self.config = config
        self.seed = config.seed if seed is None else seed
        self.state_dim, self.action_dim, self.num_skills = state_dim, action_dim, num_skills
        hidden = (config.hidden_width,) * 2
        with torch.random.fork_rng():
            torch.manual_seed(derive_seed(self.seed, "sac-init"))
            self.policy = GmmPolicy(state_dim, action_dim, num_skills, config.gmm_components, hidden)
            self.q1 = QFunction(state_dim, action_dim, num_skills, hidden)
            self.q2 = QFunction(state_dim, action_dim, num_skills, hidden)
        self.q1_target = copy.deepcopy(self.q1)
        self.q2_target = copy.deepcopy(self.q2)
        for p in (*self.q1_target.parameters(), *self.q2_target.parameters()):
            p.requires_grad_(False)
        self.q_params = [*self.q1.parameters(), *self.q2.parameters()]
        self.target_params = [*self.q1_target.parameters(), *self.q2_target.parameters()]
        self.policy_opt = torch.optim.Adam(self.policy.parameters(), lr=config.lr_policy)
        self.q_opt = torch.optim.Adam(self.q_params, lr=config.lr_q)
        self.generator = torch.Generator().manual_seed(derive_seed(self.seed, "sac-sampling"))
        self.updates = 0

    @property
    def dtype(self):
        return self.policy.dtype

    def to_double(self) -> "SacTrainer":
        for net in self.networks().values():
            net.double()
        return self

    def networks(self) -> dict:
        return {"policy": self.policy, "q1": self.q1, "q2": self.q2,
                "q1_target": self.q1_target, "q2_target": self.q2_target}

    def tensors(self, batch: Batch) -> dict:
        dt = self.dtype
        return {
            "states": torch.as_tensor(batch.states, dtype=dt),
            "skills": torch.as_tensor(batch.skills, dtype=torch.long),
            "actions": torch.as_tensor(batch.actions, dtype=dt),
            "next_states": torch.as_tensor(batch.next_states, dtype=dt),
            "dones": torch.as_tensor(batch.dones, dtype=dt),
        }

    def _as_reward(self, reward) -> torch.Tensor:
        return torch.as_tensor(np.asarray(reward), dtype=self.dtype)

    def act(self, state, skill: int, mode: str = "stochastic") -> np.ndarray:
        return self.policy.act(state, skill, mode, self.generator)

    @torch.no_grad()
    def compute_td_target(self, batch: Batch, reward) -> torch.Tensor:
        t = batch if isinstance(batch, dict) else self.tensors(batch)
        next_a, next_u = self.policy.sample(t["next_states"], t["skills"], "reparameterized",
                                            self.generator, self.config.gumbel_temperature)
        next_logp = self.policy.log_prob(t["next_states"], t["skills"], next_u)
        min_q = torch.min(self.q1_target(t["next_states"], t["skills"], next_a),
                          self.q2_target(t["next_states"], t["skills"], next_a))
        return td_target(self._as_reward(reward), t["dones"], min_q, next_logp,
                         self.config.gamma, self.config.alpha)

    def q_update(self, batch: Batch, reward) -> tuple[float, float]:
        t = batch if isinstance(batch, dict) else self.tensors(batch)
        target = self.compute_td_target(t, reward)
        l1 = ((self.q1(t["states"], t["skills"], t["actions"]) - target) ** 2).mean()
        l2 = ((self.q2(t["states"], t["skills"], t["actions"]) - target) ** 2).mean()
        self.q_opt.zero_grad(set_to_none=True)
        (l1 + l2).backward()
        self.q_opt.step()
        return _check_finite("q1_loss", l1, self.updates), _check_finite("q2_loss", l2, self.updates)

    def policy_update(self, batch: Batch) -> float:
        """Ascend ``min(Q1, Q2)(s, a) - alpha * log pi(a|s)`` with ``a`` reparameterized."""
        t = batch if isinstance(batch, dict) else self.tensors(batch)
        a, u = self.policy.sample(t["states"], t["skills"], "reparameterized",
                                  self.generator, self.config.gumbel_temperature)
        logp = self.policy.log_prob(t["states"], t["skills"], u)
        min_q = torch.min(self.q1(t["states"], t["skills"], a), self.q2(t["states"], t["skills"], a))
        loss = (self.config.alpha * logp - min_q).mean()
        self.policy_opt.zero_grad(set_to_none=True)
        loss.backward(inputs=list(self.policy.parameters()))
        self.policy_opt.step()
        return _check_finite("policy_loss", loss, self.updates)

    def update_targets(self) -> None:
        polyak_update(self.q_params, self.target_params, self.config.tau)

    def update(self, batch: Batch, reward) -> dict:
        """One train step: Q update, policy update, target polyak step."""
        t = self.tensors(batch)
        q1_loss, q2_loss = self.q_update(t, reward)
        policy_loss = self.policy_update(t)
        self.update_targets()
        self.updates += 1
        return {"q1_loss": q1_loss, "q2_loss": q2_loss, "policy_loss": policy_loss}

    # -- persistence -------------------------------------------------------

    def state_dict(self) -> dict:
        state = {name: net.state_dict() for name, net in self.networks().items()}
        state["policy_opt"] = self.policy_opt.state_dict()
        state["q_opt"] = self.q_opt.state_dict()
        state["generator"] = self.generator.get_state()
        state["updates"] = self.updates
        return state

    def load_state_dict(self, state: dict) -> None:
        for name, net in self.networks().items():
            net.load_state_dict(state[name])
        self.policy_opt.load_state_dict(state["policy_opt"])
        self.q_opt.load_state_dict(state["q_opt"])
        self.generator.set_state(state["generator"])
        self.updates = state["updates"]


def q_update(trainer: SacTrainer, batch: Batch, reward) -> tuple[float, float]:
    return trainer.q_update(batch, reward)


def policy_update(trainer: SacTrainer, batch: Batch) -> float:
    return trainer.policy_update(batch)


def compute_td_target(trainer: SacTrainer, batch: Batch, reward) -> torch.Tensor:
    return trainer.compute_td_target(batch, reward)


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(directory, blobs: dict, config: Config, step: int, extra: Optional[dict] = None) -> Path:
    """Write one ``<name>.pt`` per blob plus ``manifest.txt`` and ``config.txt``."""
    from .manifest import write_manifest

    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for name, blob in blobs.items():
        torch.save(blob, directory / f"{name}.pt")
    config.save(directory / "config.txt")
    fields = {"step": step, "blobs": ",".join(sorted(blobs))}
    fields.update(extra or {})
    write_manifest(directory / "manifest.txt", config, fields)
    return directory


def load_checkpoint(directory) -> tuple[dict, Config, dict]:
    from .manifest import read_manifest

    directory = Path(directory)
    manifest_path = directory / "manifest.txt"
    if not manifest_path.is_file():
        raise ArtifactError(f"no checkpoint manifest in {directory}")
    manifest = read_manifest(manifest_path)
    try:
        config = Config.load(directory / "config.txt")
        blobs = {name: torch.load(directory / f"{name}.pt", weights_only=False)
                 for name in manifest["blobs"].split(",") if name}
    except ArtifactError:
        raise
    except Exception as exc:
        raise ArtifactError(f"corrupted checkpoint {directory}: {exc}") from exc
    if manifest.get("config_hash") != config.digest():
        raise ArtifactError(f"checkpoint {directory}: config hash does not match manifest")
    return blobs, config, manifest


# ---------------------------------------------------------------------------
# reference policy


def rollout_return(env: Env, act: Callable[[np.ndarray], np.ndarray], rng: np.random.Generator,
                   horizon: Optional[int] = None) -> tuple[float, np.ndarray]:
    """Run one episode; returns (extrinsic return, final state)."""
    state = env_reset(env, rng)
    total = 0.0
    for _ in range(horizon or env.spec.max_episode_steps):
        res = env_step(env, act(state))
        total += res.extrinsic_reward
        state = res.next_state
        if res.done:
            break
    return total, state


def train_reference_policy(env: Env, config: Config, seed: Optional[int] = None,
                           on_epoch: Optional[Callable[[dict], None]] = None):
    """Train a single-skill SAC agent on the extrinsic reward.

    Runs until ``config.ref_steps`` environment steps or until the deterministic
    evaluation return reaches ``config.ref_target_return``. Returns the trainer and
    the per-epoch history.
    """
    seed = config.seed if seed is None else seed
    spec = env.spec
    trainer = SacTrainer(spec.state_dim, spec.action_dim, 1, config, seed)
    buffer = ReplayBuffer(min(config.buffer_capacity, max(config.ref_steps, 1)),
                          spec.state_dim, spec.action_dim, 1)
    env_rng = make_rng(seed, "ref-env")
    eval_rng = make_rng(seed, "ref-eval")
    batch_rng = make_rng(seed, "ref-batch")
    ratio = config.train_steps_per_epoch / max(config.env_steps_per_epoch, 1)
    history = []
    steps = epoch = 0
    state = env_reset(env, env_rng)
    while steps < config.ref_steps:
        epoch += 1
        n_env = min(config.env_steps_per_epoch, config.ref_steps - steps)
        for _ in range(n_env):
            action = trainer.act(state, 0, "stochastic")
            res = env_step(env, action)
            buffer.add(Transition(state, 0, action, res.next_state, res.extrinsic_reward,
                                  res.done and not res.timeout))
            state = env_reset(env, env_rng) if res.done else res.next_state
        steps += n_env
        losses = []
        if len(buffer) >= config.batch_size:
            for _ in range(int(round(n_env * ratio))):
                batch = buffer.sample(config.batch_size, batch_rng)
                losses.append(trainer.update(batch, batch.rewards))
        returns = [rollout_return(env, lambda s: trainer.act(s, 0, "deterministic"), eval_rng)[0]
                   for _ in range(config.ref_eval_episodes)]
        state = env_reset(env, env_rng)
        row = {"epoch": epoch, "env_steps": steps, "eval_return": float(np.mean(returns))}
        for key in ("q1_loss", "q2_loss", "policy_loss"):
            row[key] = float(np.mean([l[key] for l in losses])) if losses else float("nan")
        history.append(row)
        log.info("ref epoch %d steps %d eval_return %.3f", epoch, steps, row["eval_return"])
        if on_epoch:
            on_epoch(row)
        if config.ref_target_return is not None and row["eval_return"] >= config.ref_target_return:
            break
    return trainer, history
