"""Expert-guided projection fitting: collect labeled states, train the encoder jointly
with a throwaway binary classifier, and move datasets/projections to and from disk."""
from __future__ import annotations

import csv
import logging
import math
import struct
from pathlib import Path
from typing import Callable, Optional

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .approx import ExpertClassifier, LinearProjection, read_projection, write_projection
from .core import (ArtifactError, Config, ConfigError, LabeledStateDataset, NumericalError,
                   Standardizer, ValidationError, derive_seed, fit_standardizer)
from .env import Env, env_reset, env_step

log = logging.getLogger(__name__)

DATASET_MAGIC = b"LSDS"
DATASET_VERSION = 1


def _rollout_states(env: Env, act: Callable, horizon: int, rng: np.random.Generator) -> list:
    state = env_reset(env, rng)
    visited = []
    for _ in range(horizon):
        res = env_step(env, act(state))
        visited.append(res.next_state)
        state = res.next_state
        if res.done:
            break
    return visited


def uniform_random_policy(env: Env, rng: np.random.Generator) -> Callable:
    low = np.asarray(env.spec.action_low, dtype=np.float64)
    high = np.asarray(env.spec.action_high, dtype=np.float64)
    return lambda state: rng.uniform(low, high)


def collect_labeled_states(env: Env, expert: Callable[[np.ndarray], np.ndarray], n_traj: int,
                           horizon: int, rng: np.random.Generator,
                           standardize: bool = True) -> LabeledStateDataset:
    """``n_traj`` expert rollouts (label 1) and ``n_traj`` uniform-action rollouts (label 0).

    Every state reached after an action is kept; the initial state is not.
    """
    if horizon > env.spec.max_episode_steps:
        raise ValidationError(f"horizon {horizon} exceeds the env limit {env.spec.max_episode_steps}")
    probe = np.asarray(expert(env_reset(env, np.random.default_rng(0))))
    if probe.shape != (env.spec.action_dim,):
        raise ValidationError(f"expert emits actions of shape {probe.shape}, env expects "
                              f"({env.spec.action_dim},)")
    random_policy = uniform_random_policy(env, rng)
    states, labels = [], []
    for label, act in ((1, expert), (0, random_policy)):
        for _ in range(n_traj):
            visited = _rollout_states(env, act, horizon, rng)
            states += visited
            labels += [label] * len(visited)
    states = np.array(states).reshape(-1, env.spec.state_dim)
    std = fit_standardizer(states) if standardize and len(states) else Standardizer.identity(env.spec.state_dim)
    return LabeledStateDataset(states, np.array(labels, dtype=np.uint8), std)


def stratified_split(labels: np.ndarray, holdout: float, rng: np.random.Generator):
    train, test = [], []
    for value in (0, 1):
        idx = rng.permutation(np.flatnonzero(labels == value))
        n_test = int(round(len(idx) * holdout))
        test.append(idx[:n_test])
        train.append(idx[n_test:])
    return np.sort(np.concatenate(train)), np.sort(np.concatenate(test))


class ProjectedClassifier(nn.Module):
    """``h(chi s)``: bias-free linear encoder followed by an MLP classifier."""

    def __init__(self, state_dim: int, embedding_dim: int, hidden=(300, 300)):
        super().__init__()
        self.encoder = nn.Linear(state_dim, embedding_dim, bias=False)
        self.classifier = ExpertClassifier(embedding_dim, hidden)

    def forward(self, s: torch.Tensor) -> torch.Tensor:
        return self.classifier.logit(self.encoder(s))


@torch.no_grad()
def _init_along_mean_difference(encoder: nn.Linear, x: torch.Tensor, y: torch.Tensor) -> None:
    """Point the first projection row along the expert-minus-random mean, keeping its norm.

    From a random direction the joint fit can settle on a poor axis; the training
    class means give a cheap, data-only starting direction.
    """
    if not (y > 0.5).any() or not (y < 0.5).any():
        return
    d = x[y > 0.5].mean(0) - x[y < 0.5].mean(0)
    if float(d.norm()) > 0:
        encoder.weight[0] = d / d.norm() * encoder.weight[0].norm()


def pretrain_encoder(dataset: LabeledStateDataset, embedding_dim: int, config: Config,
                     seed: Optional[int] = None, holdout: float = 0.2):
    """Fit the projection by maximizing the expert/random log-likelihood.

    Full-batch Adam until the training loss improves by less than ``encoder_tol``
    over ``encoder_patience`` steps (capped at ``encoder_max_steps``). The classifier
    is dropped afterwards. Returns ``(projection, heldout_accuracy, loss_history)``.
    """
    seed = config.seed if seed is None else seed
    s_dim = dataset.state_dim
    if embedding_dim >= s_dim:
        raise ConfigError(f"embedding_dim ({embedding_dim}) must be < state_dim ({s_dim})")
    if embedding_dim < 1:
        raise ConfigError("embedding_dim must be >= 1")
    rng = np.random.default_rng(derive_seed(seed, "encoder-split"))
    train_idx, test_idx = stratified_split(dataset.labels, holdout, rng)
    x = torch.as_tensor(dataset.standardized(), dtype=torch.float32)
    y = torch.as_tensor(dataset.labels, dtype=torch.float32)
    with torch.random.fork_rng():
        torch.manual_seed(derive_seed(seed, "encoder-init"))
        model = ProjectedClassifier(s_dim, embedding_dim, (config.hidden_width,) * 2)
    x_train, y_train = x[train_idx], y[train_idx]
    _init_along_mean_difference(model.encoder, x_train, y_train)
    opt = torch.optim.Adam(model.parameters(), lr=config.lr_encoder)
    history = []
    for step in range(config.encoder_max_steps):
        loss = F.binary_cross_entropy_with_logits(model(x_train), y_train)
        value = float(loss.detach())
        if not math.isfinite(value):
            raise NumericalError(f"encoder loss became non-finite at step {step}")
        history.append(value)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        p = config.encoder_patience
        if step >= p and history[-p - 1] - history[-1] < config.encoder_tol:
            break
    with torch.no_grad():
        pred = model(x[test_idx]) > 0
        accuracy = float((pred == (y[test_idx] > 0.5)).double().mean()) if len(test_idx) else float("nan")
    chi = model.encoder.weight.detach().double().numpy().copy()
    log.info("encoder fit: %d steps, final loss %.4f, held-out accuracy %.3f",
             len(history), history[-1] if history else float("nan"), accuracy)
    return LinearProjection(chi, dataset.standardizer), accuracy, history


def export_projection(proj: LinearProjection, path) -> None:
    write_projection(proj, path)


def import_projection(path) -> LinearProjection:
    return read_projection(path)


# ---------------------------------------------------------------------------
# dataset files


def write_dataset(dataset: LabeledStateDataset, path) -> None:
    """Binary layout: magic ``LSDS``, u8 version, u32 state_dim, u64 count, then per
    sample ``state_dim`` float64 LE values and one u8 label."""
    n, d = dataset.states.shape
    rec = np.dtype([("s", "<f8", (d,)), ("x", "u1")])
    records = np.empty(n, dtype=rec)
    records["s"] = dataset.states
    records["x"] = dataset.labels
    with open(path, "wb") as fh:
        fh.write(DATASET_MAGIC + struct.pack("<BIQ", DATASET_VERSION, d, n))
        fh.write(records.tobytes())


def read_dataset(path, standardize: bool = True) -> LabeledStateDataset:
    path = Path(path)
    if not path.is_file():
        raise ArtifactError(f"dataset file not found: {path}")
    data = path.read_bytes()
    header = len(DATASET_MAGIC) + struct.calcsize("<BIQ")
    if len(data) < header or data[:4] != DATASET_MAGIC:
        raise ArtifactError(f"{path}: not a labeled-state dataset (bad magic)")
    version, d, n = struct.unpack_from("<BIQ", data, 4)
    if version != DATASET_VERSION:
        raise ArtifactError(f"{path}: unsupported dataset version {version}")
    rec = np.dtype([("s", "<f8", (d,)), ("x", "u1")])
    if len(data) - header != n * rec.itemsize:
        raise ArtifactError(f"{path}: expected {n} records of {rec.itemsize} bytes")
    records = np.frombuffer(data, dtype=rec, offset=header, count=n)
    states = records["s"].astype(np.float64).reshape(n, d)
    std = fit_standardizer(states) if standardize and n else Standardizer.identity(d)
    try:
        return LabeledStateDataset(states, records["x"].copy(), std)
    except ValidationError as exc:
        raise ArtifactError(f"{path}: {exc}") from None


def write_dataset_csv(dataset: LabeledStateDataset, path) -> None:
    d = dataset.state_dim
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"s{i}" for i in range(d)] + ["label"])
        for s, x in zip(dataset.states, dataset.labels):
            w.writerow([repr(float(v)) for v in s] + [int(x)])


def read_dataset_csv(path, standardize: bool = True) -> LabeledStateDataset:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0][-1] != "label":
        raise ArtifactError(f"{path}: missing header with a trailing 'label' column")
    body = np.array(rows[1:], dtype=np.float64).reshape(len(rows) - 1, len(rows[0]))
    states = body[:, :-1]
    d = states.shape[1]
    std = fit_standardizer(states) if standardize and len(states) else Standardizer.identity(d)
    return LabeledStateDataset(states, body[:, -1].astype(np.uint8), std)


def load_dataset(path, standardize: bool = True) -> LabeledStateDataset:
    if str(path).endswith(".csv"):
        return read_dataset_csv(path, standardize)
    return read_dataset(path, standardize)


def save_dataset(dataset: LabeledStateDataset, path) -> None:
    if str(path).endswith(".csv"):
        write_dataset_csv(dataset, path)
    else:
        write_dataset(dataset, path)
