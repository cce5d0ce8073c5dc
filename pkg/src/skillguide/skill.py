"""DIAYN-style skill discovery with a fixed linear state projection in front of the discriminator."""
from __future__ import annotations

import csv
import logging
import math
from pathlib import Path
from typing import Optional

import numpy as np
import torch
import torch.nn.functional as F

from .approx import LinearProjection, SkillDiscriminator, read_projection, write_projection
from .core import (ArtifactError, Config, NumericalError, ReplayBuffer, Transition, ValidationError,
                   derive_seed, make_rng)
from .env import Env, env_reset, env_step
from .sac import SacTrainer, load_checkpoint, save_checkpoint

log = logging.getLogger(__name__)

METRIC_COLUMNS = ("epoch", "env_steps", "q1_loss", "q2_loss", "policy_loss",
                  "disc_loss", "disc_acc", "mean_intrinsic_reward")


class SkillPrior:
    """Fixed uniform categorical prior over ``K`` skills."""

    def __init__(self, num_skills: int):
        if num_skills < 1:
            raise ValidationError("need at least one skill")
        self.num_skills = num_skills

    def sample(self, rng: np.random.Generator) -> int:
        return int(rng.integers(self.num_skills))

    def log_prob(self, skill=None) -> float:
        return -math.log(self.num_skills)


def sample_skill(prior: SkillPrior, rng: np.random.Generator) -> int:
    return prior.sample(rng)


def _disc_dtype(disc: SkillDiscriminator):
    return disc.body.net[0].weight.dtype


def embed_tensor(proj: LinearProjection, states, dtype) -> torch.Tensor:
    """Project in float64, then round once to the discriminator's dtype."""
    return torch.as_tensor(proj.embed(states), dtype=dtype)


@torch.no_grad()
def intrinsic_reward(disc: SkillDiscriminator, proj: LinearProjection, next_states, skills,
                     prior: SkillPrior) -> np.ndarray:
    """``log q(z | chi @ standardize(s')) - log p(z)``; scalar in, scalar out."""
    next_states = np.asarray(next_states, dtype=np.float64)
    single = next_states.ndim == 1
    e = embed_tensor(proj, np.atleast_2d(next_states), _disc_dtype(disc))
    z = torch.as_tensor(np.atleast_1d(skills), dtype=torch.long)
    logq = disc(e).gather(-1, z[:, None]).squeeze(-1).double().numpy()
    reward = logq - prior.log_prob()
    return reward[0] if single else reward


def discriminator_update(disc: SkillDiscriminator, optimizer: torch.optim.Optimizer,
                         embeddings, skills) -> float:
    """One maximum-likelihood step; returns the mean NLL before the step."""
    e = torch.as_tensor(embeddings, dtype=_disc_dtype(disc))
    z = torch.as_tensor(skills, dtype=torch.long)
    loss = F.nll_loss(disc(e), z)
    optimizer.zero_grad(set_to_none=True)
    loss.backward()
    optimizer.step()
    return float(loss.detach())


def mi_lower_bound_check(posterior, variational, state_marginal) -> tuple[float, float]:
    """Exact ``E_p[log p(z|s)]`` and ``E_p[log q(z|s)]`` on a finite problem.

    ``posterior`` and ``variational`` are (num_states, num_skills) row-stochastic tables,
    ``state_marginal`` the state distribution; expectations run over ``p(s) p(z|s)``.
    """
    p = np.asarray(posterior, dtype=np.float64)
    q = np.asarray(variational, dtype=np.float64)
    ps = np.asarray(state_marginal, dtype=np.float64)
    if p.shape != q.shape or p.ndim != 2 or ps.shape != (p.shape[0],):
        raise ValidationError("tables must be (S, K) with a length-S state marginal")
    for name, table in (("posterior", p), ("variational", q)):
        if np.any(table < 0) or not np.allclose(table.sum(axis=1), 1.0, atol=1e-12, rtol=0):
            raise ValidationError(f"{name} rows must be probability distributions")
    if np.any(ps < 0) or not np.isclose(ps.sum(), 1.0, atol=1e-12, rtol=0):
        raise ValidationError("state marginal must be a probability distribution")
    joint = ps[:, None] * p
    mask = joint > 0
    with np.errstate(divide="ignore"):
        exact = float(np.sum(joint[mask] * np.log(p[mask])))
        bound = float(np.sum(joint[mask] * np.log(q[mask])))
    return exact, bound


class MetricsWriter:
    """Append-only CSV with a fixed header."""

    def __init__(self, path, columns=METRIC_COLUMNS):
        self.path = Path(path)
        self.columns = tuple(columns)
        if not self.path.exists() or self.path.stat().st_size == 0:
            with self.path.open("w", newline="") as fh:
                csv.writer(fh).writerow(self.columns)

    def write(self, row: dict) -> None:
        with self.path.open("a", newline="") as fh:
            csv.writer(fh).writerow([_fmt(row[c]) for c in self.columns])


def _fmt(v):
    return repr(v) if isinstance(v, float) else v


class SkillDiscovery:
    """Runs the epoch loop: collect with per-episode skills, then train Q, policy and discriminator."""

    def __init__(self, env: Env, config: Config, projection: Optional[LinearProjection] = None,
                 seed: Optional[int] = None):
        spec = env.spec
        self.env = env
        self.config = config
        self.seed = config.seed if seed is None else seed
        if projection is None:
            projection = LinearProjection.identity(spec.state_dim)
        if projection.state_dim != spec.state_dim:
            raise ValidationError(
                f"projection expects {projection.state_dim} state features, env has {spec.state_dim}")
        self.projection = projection
        k = config.num_skills
        self.prior = SkillPrior(k)
        self.trainer = SacTrainer(spec.state_dim, spec.action_dim, k, config, self.seed)
        with torch.random.fork_rng():
            torch.manual_seed(derive_seed(self.seed, "disc-init"))
            self.disc = SkillDiscriminator(projection.embedding_dim, k, (config.hidden_width,) * 2)
        self.disc_opt = torch.optim.Adam(self.disc.parameters(), lr=config.lr_disc)
        self.buffer = ReplayBuffer(config.buffer_capacity, spec.state_dim, spec.action_dim, k)
        self.env_rng = make_rng(self.seed, "skill-env")
        self.skill_rng = make_rng(self.seed, "skill-prior")
        self.batch_rng = make_rng(self.seed, "skill-batch")
        self.eval_rng = make_rng(self.seed, "skill-eval")
        self.epoch = 0
        self.env_steps = 0
        self.episodes = 0
        self._state = None
        self._skill = None

    # -- collection ----------------------------------------------------------

    def collect(self, n_steps: int) -> None:
        for _ in range(n_steps):
            if self._state is None:
                self._skill = self.prior.sample(self.skill_rng)
                self._state = env_reset(self.env, self.env_rng)
                self.episodes += 1
            action = self.trainer.act(self._state, self._skill, "stochastic")
            res = env_step(self.env, action)
            self.buffer.add(Transition(self._state, self._skill, action, res.next_state,
                                       res.extrinsic_reward, res.done and not res.timeout))
            self._state = None if res.done else res.next_state
            self.env_steps += 1

    # -- training ------------------------------------------------------------

    def train_step(self) -> dict:
        batch = self.buffer.sample(self.config.batch_size, self.batch_rng)
        e = embed_tensor(self.projection, batch.next_states, _disc_dtype(self.disc))
        z = torch.as_tensor(batch.skills, dtype=torch.long)
        # one discriminator forward serves both the reward and its own MLE step:
        # its parameters do not change until the final update below
        logq_all = self.disc(e)
        logq = logq_all.gather(-1, z[:, None]).squeeze(-1)
        reward = logq.detach() - self.prior.log_prob()
        out = self.trainer.update(batch, reward)
        disc_loss = -logq.mean()
        self.disc_opt.zero_grad(set_to_none=True)
        disc_loss.backward()
        self.disc_opt.step()
        out["disc_loss"] = float(disc_loss.detach())
        if not math.isfinite(out["disc_loss"]):
            raise NumericalError(f"discriminator loss became non-finite at epoch {self.epoch}")
        out["disc_acc"] = float((logq_all.detach().argmax(-1) == z).double().mean())
        out["mean_intrinsic_reward"] = float(reward.mean())
        return out

    def run_epoch(self) -> dict:
        cfg = self.config
        self.collect(cfg.env_steps_per_epoch)
        rows = []
        if len(self.buffer) >= min(cfg.batch_size, self.buffer.capacity):
            rows = [self.train_step() for _ in range(cfg.train_steps_per_epoch)]
        self.epoch += 1
        metrics = {"epoch": self.epoch, "env_steps": self.env_steps}
        for key in METRIC_COLUMNS[2:]:
            metrics[key] = float(np.mean([r[key] for r in rows])) if rows else float("nan")
        log.info("skill epoch %d steps %d disc_acc %.3f reward %.3f", self.epoch, self.env_steps,
                 metrics["disc_acc"], metrics["mean_intrinsic_reward"])
        return metrics

    # -- evaluation helpers -----------------------------------------------------

    def rollout(self, skill: int, mode: str = "deterministic",
                rng: Optional[np.random.Generator] = None) -> tuple[np.ndarray, float]:
        """One episode; returns (states incl. the initial one, extrinsic return)."""
        rng = self.eval_rng if rng is None else rng
        state = env_reset(self.env, rng)
        states, total = [state], 0.0
        for _ in range(self.env.spec.max_episode_steps):
            res = env_step(self.env, self.trainer.act(state, skill, mode))
            states.append(res.next_state)
            total += res.extrinsic_reward
            state = res.next_state
            if res.done:
                break
        # the shared env was used mid-episode; restart collection cleanly
        self._state = None
        return np.array(states), total

    @torch.no_grad()
    def heldout_accuracy(self, rollouts_per_skill: int = 5, mode: str = "stochastic",
                         rng: Optional[np.random.Generator] = None) -> tuple[float, np.ndarray]:
        """Discriminator accuracy on states from fresh rollouts never stored in the buffer.

        Also returns the per-skill mean final embedding, shape (K, |E|).
        """
        rng = make_rng(self.seed, f"heldout-{self.epoch}") if rng is None else rng
        correct = total = 0
        finals = []
        for z in range(self.config.num_skills):
            ends = []
            for _ in range(rollouts_per_skill):
                states, _ = self.rollout(z, mode, rng)
                e = embed_tensor(self.projection, states[1:], _disc_dtype(self.disc))
                correct += int((self.disc(e).argmax(-1) == z).sum())
                total += len(e)
                ends.append(self.projection.embed(states[-1]))
            finals.append(np.mean(ends, axis=0))
        return correct / total, np.array(finals)

    def skill_returns(self) -> list[float]:
        """One deterministic rollout per skill, extrinsic return."""
        return [self.rollout(z, "deterministic")[1] for z in range(self.config.num_skills)]

    # -- persistence -----------------------------------------------------------

    def save(self, directory) -> Path:
        directory = Path(directory)
        blobs = {
            "trainer": self.trainer.state_dict(),
            "disc": self.disc.state_dict(),
            "disc_opt": self.disc_opt.state_dict(),
            "loop": {"epoch": self.epoch, "env_steps": self.env_steps, "episodes": self.episodes,
                     "rngs": {name: getattr(self, name).bit_generator.state
                              for name in ("env_rng", "skill_rng", "batch_rng", "eval_rng")}},
        }
        save_checkpoint(directory, blobs, self.config, self.env_steps,
                        {"epoch": self.epoch, "num_skills": self.config.num_skills,
                         "embedding_dim": self.projection.embedding_dim})
        write_projection(self.projection, directory / "projection.txt")
        self.buffer.save(directory / "buffer.npz")
        return directory

    @classmethod
    def load(cls, directory, env: Env, with_buffer: bool = True) -> "SkillDiscovery":
        directory = Path(directory)
        blobs, config, _ = load_checkpoint(directory)
        if "trainer" not in blobs or "disc" not in blobs:
            raise ArtifactError(f"{directory} is not a skill-discovery checkpoint")
        obj = cls(env, config, read_projection(directory / "projection.txt"))
        obj.trainer.load_state_dict(blobs["trainer"])
        obj.disc.load_state_dict(blobs["disc"])
        obj.disc_opt.load_state_dict(blobs["disc_opt"])
        loop = blobs["loop"]
        obj.epoch, obj.env_steps, obj.episodes = loop["epoch"], loop["env_steps"], loop["episodes"]
        for name, state in loop["rngs"].items():
            getattr(obj, name).bit_generator.state = state
        if with_buffer and (directory / "buffer.npz").is_file():
            obj.buffer = ReplayBuffer.load(directory / "buffer.npz", config.num_skills)
        return obj


def run_skill_epoch(run: SkillDiscovery) -> dict:
    return run.run_epoch()
