"""Skill evaluation and plot-ready CSV reports."""
from __future__ import annotations

import copy
import csv
import math
from collections import defaultdict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping, Optional, Sequence

import numpy as np

from .approx import GmmPolicy, LinearProjection
from .core import ValidationError, make_rng
from .env import Env, env_reset, env_step

QUANTILE_COLUMNS = ("min", "25%", "50%", "75%", "max")


@dataclass
class Trajectory:
    states: np.ndarray
    actions: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))
    rewards: np.ndarray = field(default_factory=lambda: np.zeros(0))
    skill: int = 0

    def __len__(self) -> int:
        return len(self.states)

    @property
    def extrinsic_return(self) -> float:
        return float(np.sum(self.rewards))


def deterministic_rollout(policy: GmmPolicy, env: Env, skill: int, horizon: int,
                          rng: np.random.Generator, mode: str = "deterministic",
                          generator=None) -> Trajectory:
    """Roll out ``skill`` for at most ``horizon`` steps, stopping early on a terminal."""
    state = env_reset(env, rng)
    states, actions, rewards = [state], [], []
    for _ in range(horizon):
        action = policy.act(state, skill, mode, generator)
        res = env_step(env, action)
        actions.append(action)
        rewards.append(res.extrinsic_reward)
        states.append(res.next_state)
        state = res.next_state
        if res.done:
            break
    a_dim = env.spec.action_dim
    return Trajectory(np.array(states), np.array(actions).reshape(-1, a_dim), np.array(rewards), skill)


def displacement(traj, axis_index: int) -> float:
    """Final minus initial coordinate along ``axis_index``."""
    states = np.asarray(getattr(traj, "states", traj))
    if not 0 <= axis_index < states.shape[-1]:
        raise ValidationError(f"axis {axis_index} outside [0, {states.shape[-1]})")
    return float(states[-1, axis_index] - states[0, axis_index])


def _interpolated(sorted_values: np.ndarray, p: float) -> float:
    h = (len(sorted_values) - 1) * p
    lo = math.floor(h)
    hi = min(lo + 1, len(sorted_values) - 1)
    frac = h - lo
    return float(sorted_values[lo] + frac * (sorted_values[hi] - sorted_values[lo]))


def displacement_stats(values) -> dict:
    """Five-number summary; quantiles interpolate linearly between order statistics
    at position ``(n - 1) * p``."""
    x = np.sort(np.asarray(values, dtype=np.float64).ravel())
    if x.size == 0:
        raise ValidationError("cannot summarize an empty vector")
    return {"min": float(x[0]), "q25": _interpolated(x, 0.25), "median": _interpolated(x, 0.5),
            "q75": _interpolated(x, 0.75), "max": float(x[-1])}


def feature_importance(proj: LinearProjection) -> dict:
    """Per-feature weights (S, E) and the L2 magnitude of each column of chi, normalized to sum 1."""
    weights = proj.chi.T.copy()
    magnitude = np.sqrt(np.sum(proj.chi**2, axis=0))
    total = magnitude.sum()
    importance = magnitude / total if total > 0 else magnitude
    return {"weights": weights, "importance": importance}


# ---------------------------------------------------------------------------
# CSV writers


def write_feature_importance(proj: LinearProjection, path) -> None:
    fi = feature_importance(proj)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["feature", "importance"] + [f"w{i}" for i in range(proj.embedding_dim)])
        for j, (imp, row) in enumerate(zip(fi["importance"], fi["weights"])):
            w.writerow([j, repr(float(imp))] + [repr(float(v)) for v in row])


def visitation_export(trajectories: Mapping[int, Sequence[Trajectory]], proj: LinearProjection,
                      path) -> int:
    """One row per visited state (initial state excluded):
    skill, rollout, step, state components, projected components. Returns the row count."""
    s_dim, e_dim = proj.state_dim, proj.embedding_dim
    header = (["skill", "rollout", "step"] + [f"s{i}" for i in range(s_dim)]
              + [f"e{i}" for i in range(e_dim)])
    rows = 0
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for skill in sorted(trajectories):
            for r, traj in enumerate(trajectories[skill]):
                visited = np.asarray(traj.states)[1:]
                emb = proj.embed(visited) if len(visited) else np.zeros((0, e_dim))
                for step, (s, e) in enumerate(zip(visited, emb), 1):
                    w.writerow([skill, r, step] + [repr(float(v)) for v in s] + [repr(float(v)) for v in e])
                    rows += 1
    return rows


def write_displacements(rows: Iterable[dict], path) -> None:
    rows = list(rows)
    cols = ("skill", "seed", "rollout", "displacement", "projected_displacement")
    if rows and "variant" in rows[0]:
        cols = ("variant",) + cols
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(cols)
        for row in rows:
            w.writerow([row[c] if not isinstance(row[c], float) else repr(row[c]) for c in cols])


def summary_table(per_seed: Mapping[str, Sequence[Sequence[float]]]) -> list[dict]:
    """Five-number summary per variant: mean and std (population) across seeds.

    ``per_seed[variant]`` holds one displacement vector per seed.
    """
    keys = ("min", "q25", "median", "q75", "max")
    table = []
    for variant, seeds in per_seed.items():
        if not len(seeds):
            raise ValidationError(f"variant {variant!r} has no seeds")
        stats = np.array([[displacement_stats(v)[k] for k in keys] for v in seeds])
        row = {"variant": variant}
        for col, mean, std in zip(QUANTILE_COLUMNS, stats.mean(0), stats.std(0)):
            row[col] = (float(mean), float(std))
        table.append(row)
    return table


def write_summary(table: Sequence[dict], path, decimals: int = 3) -> None:
    """Columns ``variant, min, 25%, 50%, 75%, max``; cells read ``mean ± std``."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("variant",) + QUANTILE_COLUMNS)
        for row in table:
            w.writerow([row["variant"]] + [f"{row[c][0]:.{decimals}f} ± {row[c][1]:.{decimals}f}"
                                           for c in QUANTILE_COLUMNS])


def parse_summary(path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    out = []
    for row in rows:
        parsed = {"variant": row["variant"]}
        for c in QUANTILE_COLUMNS:
            mean, std = row[c].split("±")
            parsed[c] = (float(mean), float(std))
        out.append(parsed)
    return out


# ---------------------------------------------------------------------------
# return curves


def return_curves(records: Iterable[tuple]) -> list[dict]:
    """Per-epoch max/mean/min over skills, then mean and std across seeds.

    ``records`` yields ``(seed, epoch, skill, return)``.
    """
    by_run = defaultdict(lambda: defaultdict(dict))
    for seed, epoch, skill, ret in records:
        by_run[int(epoch)][seed][int(skill)] = float(ret)
    counts = {len(skills) for per_seed in by_run.values() for skills in per_seed.values()}
    if len(counts) > 1:
        raise ValidationError(f"inconsistent skill counts across epochs/seeds: {sorted(counts)}")
    rows = []
    for epoch in sorted(by_run):
        per_seed = by_run[epoch]
        stats = np.array([[max(v.values()), np.mean(list(v.values())), min(v.values())]
                          for v in per_seed.values()])
        row = {"epoch": epoch, "n_seeds": len(per_seed)}
        for i, name in enumerate(("max", "mean", "min")):
            row[name] = float(stats[:, i].mean())
            row[f"{name}_std"] = float(stats[:, i].std())
        rows.append(row)
    return rows


CURVE_COLUMNS = ("epoch", "n_seeds", "max", "max_std", "mean", "mean_std", "min", "min_std")


def write_return_curves(rows: Sequence[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CURVE_COLUMNS)
        for row in rows:
            w.writerow([row[c] for c in CURVE_COLUMNS])


def read_eval_returns(paths_by_seed: Mapping[int, Path]) -> list[tuple]:
    """Load per-run ``eval_returns.csv`` files (epoch, skill, return)."""
    records = []
    for seed, path in paths_by_seed.items():
        with open(path, newline="") as fh:
            for row in csv.DictReader(fh):
                records.append((seed, int(row["epoch"]), int(row["skill"]), float(row["return"])))
    return records


# ---------------------------------------------------------------------------
# batch evaluation


def evaluate_skills(policy: GmmPolicy, make_env: Callable[[], Env], num_skills: int, rollouts: int,
                    horizon: int, seed: int, mode: str = "deterministic",
                    workers: int = 1) -> dict[int, list[Trajectory]]:
    """Roll out every skill ``rollouts`` times. Each (skill, rollout) pair has its own
    derived seed, so results do not depend on ``workers``."""
    import torch

    def run(skill: int) -> list[Trajectory]:
        env = make_env()
        snapshot = copy.deepcopy(policy)
        out = []
        for r in range(rollouts):
            gen = torch.Generator().manual_seed(int(make_rng(seed, f"eval-gen-{skill}-{r}").integers(2**62)))
            out.append(deterministic_rollout(snapshot, env, skill, horizon,
                                             make_rng(seed, f"eval-{skill}-{r}"), mode, gen))
        return out

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            results = list(pool.map(run, range(num_skills)))
    else:
        results = [run(z) for z in range(num_skills)]
    return dict(enumerate(results))
