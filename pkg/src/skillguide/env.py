"""Environment contract, the 2-D point maze, and a socket adapter for external simulators.

Adapter wire format
-------------------
Every message is framed as ``uint32 LE payload length`` followed by the payload.
A payload starts with the 4-byte magic ``b"SKEV"``, a version byte (currently 1)
and a message-type byte, then a type-specific body. All floats are float64 LE.

=========  ====  ==========================================================
type       code  body
=========  ====  ==========================================================
SPEC_REQ   0x01  (empty)
SPEC       0x02  u32 state_dim, u32 action_dim, u32 max_episode_steps,
                 action_dim floats low, action_dim floats high
RESET      0x03  u64 seed
STATE      0x04  state_dim floats
STEP       0x05  action_dim floats
RESULT     0x06  state_dim floats, f64 reward, u8 done flags
CLOSE      0x07  (empty)
ERROR      0x7F  utf-8 message
=========  ====  ==========================================================

The ``done`` byte is a bit field: bit 0 set means the episode is over, bit 1 set
means it ended because the time limit was reached rather than a true terminal.
"""
from __future__ import annotations

import socket
import struct
from dataclasses import dataclass
from typing import Optional, Protocol, runtime_checkable

import numpy as np

from .core import ArtifactError, ValidationError

MAGIC = b"SKEV"
VERSION = 1
MSG_SPEC_REQ, MSG_SPEC, MSG_RESET, MSG_STATE = 0x01, 0x02, 0x03, 0x04
MSG_STEP, MSG_RESULT, MSG_CLOSE, MSG_ERROR = 0x05, 0x06, 0x07, 0x7F
DONE_BIT, TIMEOUT_BIT = 0x01, 0x02


@dataclass(frozen=True)
class EnvSpec:
    state_dim: int
    action_dim: int
    action_low: tuple
    action_high: tuple
    max_episode_steps: int

    def __post_init__(self):
        if self.state_dim < 1 or self.action_dim < 1 or self.max_episode_steps < 1:
            raise ValidationError("environment dimensions and horizon must be positive")
        if len(self.action_low) != self.action_dim or len(self.action_high) != self.action_dim:
            raise ValidationError("action bounds must have action_dim entries")
        if not all(lo < hi for lo, hi in zip(self.action_low, self.action_high)):
            raise ValidationError("action_low must be < action_high componentwise")


@dataclass
class StepResult:
    next_state: np.ndarray
    extrinsic_reward: float
    done: bool
    # episode ended by the time limit, not a true terminal; bootstrapping stays on
    timeout: bool = False


@runtime_checkable
class Env(Protocol):
    spec: EnvSpec

    def reset(self, rng: np.random.Generator) -> np.ndarray: ...

    def step(self, action) -> StepResult: ...


class EpisodeOver(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# point maze

WALL_LOW = 1 / 7
WALL_HIGH = 6 / 7
MAX_DISPLACEMENT = 1 / 70
KERNEL_CENTER = np.array([9 / 14, 3 / 14])
KERNEL_WIDTH = 1 / 14


@dataclass
class PointMazeState:
    x: float
    y: float

    def __array__(self, dtype=None, copy=None):
        return np.array([self.x, self.y], dtype=dtype)


def pointmaze_reset(rng: np.random.Generator, shared_noise: bool = False) -> PointMazeState:
    """Drop the agent at ``(7 + eps) / 14`` per axis, ``eps ~ U(-1, 1)``."""
    eps = rng.uniform(-1.0, 1.0, size=2)
    if shared_noise:
        eps[1] = eps[0]
    return PointMazeState(*((7.0 + eps) / 14.0))


def kernel_reward(position) -> float:
    d2 = float(np.sum((np.asarray(position, dtype=np.float64) - KERNEL_CENTER) ** 2))
    return float(np.exp(-d2 / (2 * KERNEL_WIDTH**2)))


def pointmaze_step(state: PointMazeState, action) -> tuple[PointMazeState, float]:
    """Pure transition: move by ``action / 70`` and clip to the walls."""
    action = np.asarray(action, dtype=np.float64)
    if action.shape != (2,):
        raise ValidationError(f"point maze actions are 2-vectors, got shape {action.shape}")
    if not np.all(np.isfinite(action)) or np.any(np.abs(action) > 1.0):
        raise ValidationError(f"action {action} outside [-1, 1]^2")
    pos = np.clip(np.asarray(state) + action * MAX_DISPLACEMENT, WALL_LOW, WALL_HIGH)
    return PointMazeState(float(pos[0]), float(pos[1])), kernel_reward(pos)


class PointMaze:
    """Open square plane with walls at 1/7 and 6/7, rewarded near (9/14, 3/14)."""

    def __init__(self, horizon: int = 100, shared_init_noise: bool = False):
        self.spec = EnvSpec(2, 2, (-1.0, -1.0), (1.0, 1.0), horizon)
        self.shared_init_noise = shared_init_noise
        self._state: Optional[PointMazeState] = None
        self._t = 0

    def reset(self, rng: np.random.Generator) -> np.ndarray:
        self._state = pointmaze_reset(rng, self.shared_init_noise)
        self._t = 0
        return np.asarray(self._state)

    def step(self, action) -> StepResult:
        if self._state is None or self._t >= self.spec.max_episode_steps:
            raise EpisodeOver("episode finished; call reset() first")
        self._state, reward = pointmaze_step(self._state, action)
        self._t += 1
        done = self._t >= self.spec.max_episode_steps
        return StepResult(np.asarray(self._state), reward, done, timeout=done)


# ---------------------------------------------------------------------------
# socket adapter


def _pack(msg_type: int, body: bytes = b"") -> bytes:
    payload = MAGIC + bytes([VERSION, msg_type]) + body
    return struct.pack("<I", len(payload)) + payload


def _recv_exact(sock: socket.socket, n: int) -> bytes:
    chunks = []
    while n:
        chunk = sock.recv(n)
        if not chunk:
            raise ConnectionError("peer closed the connection")
        chunks.append(chunk)
        n -= len(chunk)
    return b"".join(chunks)


def send_message(sock: socket.socket, msg_type: int, body: bytes = b"") -> None:
    sock.sendall(_pack(msg_type, body))


def recv_message(sock: socket.socket) -> tuple[int, bytes]:
    (length,) = struct.unpack("<I", _recv_exact(sock, 4))
    payload = _recv_exact(sock, length)
    if length < 6 or payload[:4] != MAGIC:
        raise ArtifactError("bad magic in adapter message")
    if payload[4] != VERSION:
        raise ArtifactError(f"unsupported adapter protocol version {payload[4]}")
    return payload[5], payload[6:]


def _floats(values) -> bytes:
    return np.asarray(values, dtype="<f8").tobytes()


def encode_spec(spec: EnvSpec) -> bytes:
    return (struct.pack("<III", spec.state_dim, spec.action_dim, spec.max_episode_steps)
            + _floats(spec.action_low) + _floats(spec.action_high))


def decode_spec(body: bytes) -> EnvSpec:
    s, a, h = struct.unpack_from("<III", body)
    bounds = np.frombuffer(body[12:], dtype="<f8")
    if len(bounds) != 2 * a:
        raise ArtifactError("SPEC message has wrong bounds length")
    return EnvSpec(s, a, tuple(bounds[:a]), tuple(bounds[a:]), h)


class SocketEnv:
    """Client side of the adapter: drives an external simulator over a connected socket."""

    def __init__(self, sock: socket.socket, expected: Optional[EnvSpec] = None):
        self.sock = sock
        send_message(sock, MSG_SPEC_REQ)
        kind, body = self._expect(MSG_SPEC)
        self.spec = decode_spec(body)
        self._t = 0
        self._finished = True
        if expected is not None and (expected.state_dim != self.spec.state_dim
                                     or expected.action_dim != self.spec.action_dim):
            raise ValidationError(
                f"adapter reports state_dim={self.spec.state_dim}, action_dim={self.spec.action_dim}; "
                f"expected {expected.state_dim}, {expected.action_dim}")

    @classmethod
    def connect(cls, address: str, expected: Optional[EnvSpec] = None) -> "SocketEnv":
        """``address`` is ``unix:/path`` or ``tcp:host:port``."""
        kind, _, rest = address.partition(":")
        if kind == "unix":
            sock = socket.socket(socket.AF_UNIX, socket.SOCK_STREAM)
            sock.connect(rest)
        elif kind == "tcp":
            host, _, port = rest.rpartition(":")
            sock = socket.create_connection((host, int(port)))
        else:
            raise ValidationError(f"unknown adapter address {address!r}")
        return cls(sock, expected)

    def _expect(self, msg_type: int) -> tuple[int, bytes]:
        kind, body = recv_message(self.sock)
        if kind == MSG_ERROR:
            raise RuntimeError(f"adapter error: {body.decode(errors='replace')}")
        if kind != msg_type:
            raise ArtifactError(f"expected message type {msg_type:#x}, got {kind:#x}")
        return kind, body

    def reset(self, rng: np.random.Generator) -> np.ndarray:
        send_message(self.sock, MSG_RESET, struct.pack("<Q", int(rng.integers(0, 2**63))))
        _, body = self._expect(MSG_STATE)
        state = np.frombuffer(body, dtype="<f8").astype(np.float64)
        if state.shape != (self.spec.state_dim,):
            raise ArtifactError("STATE message has wrong length")
        self._t = 0
        self._finished = False
        return state

    def step(self, action) -> StepResult:
        if self._finished:
            raise EpisodeOver("episode finished; call reset() first")
        action = np.asarray(action, dtype=np.float64)
        if action.shape != (self.spec.action_dim,):
            raise ValidationError(f"action shape {action.shape} != ({self.spec.action_dim},)")
        send_message(self.sock, MSG_STEP, _floats(action))
        _, body = self._expect(MSG_RESULT)
        n = self.spec.state_dim
        if len(body) != 8 * n + 9:
            raise ArtifactError("RESULT message has wrong length")
        state = np.frombuffer(body[: 8 * n], dtype="<f8").astype(np.float64)
        (reward,) = struct.unpack_from("<d", body, 8 * n)
        flags = body[-1]
        self._t += 1
        done, timeout = bool(flags & DONE_BIT), bool(flags & TIMEOUT_BIT)
        if self._t >= self.spec.max_episode_steps and not done:
            done = timeout = True
        self._finished = done
        return StepResult(state, reward, done, timeout)

    def close(self) -> None:
        try:
            send_message(self.sock, MSG_CLOSE)
        finally:
            self.sock.close()


def serve_env(env: Env, sock: socket.socket) -> None:
    """Server side: answer adapter requests with ``env`` until CLOSE or disconnect."""
    try:
        while True:
            try:
                kind, body = recv_message(sock)
            except ConnectionError:
                return
            try:
                if kind == MSG_SPEC_REQ:
                    send_message(sock, MSG_SPEC, encode_spec(env.spec))
                elif kind == MSG_RESET:
                    (seed,) = struct.unpack("<Q", body)
                    state = env.reset(np.random.default_rng(seed))
                    send_message(sock, MSG_STATE, _floats(state))
                elif kind == MSG_STEP:
                    res = env.step(np.frombuffer(body, dtype="<f8"))
                    flags = (DONE_BIT if res.done else 0) | (TIMEOUT_BIT if res.timeout else 0)
                    send_message(sock, MSG_RESULT,
                                 _floats(res.next_state) + struct.pack("<dB", res.extrinsic_reward, flags))
                elif kind == MSG_CLOSE:
                    return
                else:
                    send_message(sock, MSG_ERROR, f"unknown message type {kind:#x}".encode())
            except (ValidationError, EpisodeOver) as exc:
                send_message(sock, MSG_ERROR, str(exc).encode())
    finally:
        sock.close()


def make_env(name: str, horizon: int = 100, shared_init_noise: bool = False,
             expected: Optional[EnvSpec] = None) -> Env:
    if name == "pointmaze":
        return PointMaze(horizon, shared_init_noise)
    if name.startswith(("unix:", "tcp:")):
        return SocketEnv.connect(name, expected)
    raise ValidationError(f"unknown environment {name!r}")


def env_reset(env: Env, rng: np.random.Generator) -> np.ndarray:
    state = np.asarray(env.reset(rng), dtype=np.float64)
    if state.shape != (env.spec.state_dim,):
        raise ValidationError(f"reset returned shape {state.shape}, expected ({env.spec.state_dim},)")
    return state


def env_step(env: Env, action) -> StepResult:
    action = np.asarray(action, dtype=np.float64)
    if action.shape != (env.spec.action_dim,):
        raise ValidationError(f"action shape {action.shape}, expected ({env.spec.action_dim},)")
    result = env.step(action)
    if np.shape(result.next_state) != (env.spec.state_dim,):
        raise ValidationError("environment returned a state of the wrong length")
    return result
