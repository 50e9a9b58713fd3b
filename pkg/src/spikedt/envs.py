"""In-process classic-control environments plus scripted data policies.

Physics follows the canonical published task definitions (gravity 9.8,
half-pole length 0.5, and so on) so episode returns land on the familiar
scales. Every environment is deterministic given (seed, action sequence)
and refuses to step once an episode is done.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np


@dataclass(frozen=True)
class EnvSpec:
    name: str
    state_dim: int
    action_kind: str  # "discrete" | "continuous"
    n_actions: int = 0
    action_low: float = 0.0
    action_high: float = 0.0
    max_steps: int = 0
    reward_range: tuple[float, float] = (-np.inf, np.inf)
    # return-to-go used to condition greedy rollouts
    target_return: float = 0.0

    @property
    def action_dim(self) -> int:
        return self.n_actions if self.action_kind == "discrete" else 1


ENV_SPECS: dict[str, EnvSpec] = {
    "cartpole": EnvSpec(
        "cartpole", 4, "discrete", n_actions=2, max_steps=500,
        reward_range=(0.0, 1.0), target_return=500.0,
    ),
    "mountaincar": EnvSpec(
        "mountaincar", 2, "discrete", n_actions=3, max_steps=200,
        reward_range=(-1.0, 0.0), target_return=-100.0,
    ),
    "acrobot": EnvSpec(
        "acrobot", 6, "discrete", n_actions=3, max_steps=500,
        reward_range=(-1.0, 0.0), target_return=-70.0,
    ),
    "pendulum": EnvSpec(
        "pendulum", 3, "continuous", action_low=-2.0, action_high=2.0,
        max_steps=200, reward_range=(-16.3, 0.0), target_return=-130.0,
    ),
}


@dataclass
class Transition:
    state: np.ndarray
    action: object
    reward: float
    next_state: np.ndarray
    done: bool


class Env:
    """Minimal stepping interface shared by the four tasks."""

    spec: EnvSpec

    def __init__(self):
        self._steps = 0
        self._done = True
        self._state: np.ndarray | None = None

    def reset(self, seed: int) -> np.ndarray:
        self._rng = np.random.default_rng(seed)
        self._steps = 0
        self._done = False
        self._state = self._sample_initial()
        return self.observe()

    def step(self, action) -> Transition:
        if self._done:
            raise RuntimeError("episode is done; reset before stepping again")
        self._check_action(action)
        before = self.observe()
        reward, terminated = self._advance(action)
        self._steps += 1
        self._done = terminated or self._steps >= self.spec.max_steps
        return Transition(before, action, reward, self.observe(), self._done)

    def observe(self) -> np.ndarray:
        return self._state.copy()

    def _check_action(self, action) -> None:
        spec = self.spec
        if spec.action_kind == "discrete":
            if not (0 <= int(action) < spec.n_actions):
                raise ValueError(f"invalid action {action!r} for {spec.name}")
        else:
            if not np.all(np.isfinite(np.asarray(action, dtype=np.float64))):
                raise ValueError("non-finite continuous action")

    def _sample_initial(self) -> np.ndarray:
        raise NotImplementedError

    def _advance(self, action) -> tuple[float, bool]:
        raise NotImplementedError


class CartPole(Env):
    spec = ENV_SPECS["cartpole"]

    GRAVITY = 9.8
    MASS_CART = 1.0
    MASS_POLE = 0.1
    HALF_LENGTH = 0.5
    FORCE_MAG = 10.0
    TAU = 0.02
    X_LIMIT = 2.4
    THETA_LIMIT = 12 * 2 * math.pi / 360

    def _sample_initial(self) -> np.ndarray:
        return self._rng.uniform(-0.05, 0.05, size=4)

    def _advance(self, action) -> tuple[float, bool]:
        x, x_dot, theta, theta_dot = self._state
        force = self.FORCE_MAG if int(action) == 1 else -self.FORCE_MAG
        total_mass = self.MASS_CART + self.MASS_POLE
        pole_ml = self.MASS_POLE * self.HALF_LENGTH
        cos_t, sin_t = math.cos(theta), math.sin(theta)
        temp = (force + pole_ml * theta_dot**2 * sin_t) / total_mass
        theta_acc = (self.GRAVITY * sin_t - cos_t * temp) / (
            self.HALF_LENGTH * (4.0 / 3.0 - self.MASS_POLE * cos_t**2 / total_mass)
        )
        x_acc = temp - pole_ml * theta_acc * cos_t / total_mass
        x += self.TAU * x_dot
        x_dot += self.TAU * x_acc
        theta += self.TAU * theta_dot
        theta_dot += self.TAU * theta_acc
        self._state = np.array([x, x_dot, theta, theta_dot])
        terminated = abs(x) > self.X_LIMIT or abs(theta) > self.THETA_LIMIT
        return 1.0, terminated


class MountainCar(Env):
    spec = ENV_SPECS["mountaincar"]

    MIN_POS = -1.2
    MAX_POS = 0.6
    MAX_SPEED = 0.07
    GOAL_POS = 0.5
    FORCE = 0.001
    GRAVITY = 0.0025

    def _sample_initial(self) -> np.ndarray:
        return np.array([self._rng.uniform(-0.6, -0.4), 0.0])

    def _advance(self, action) -> tuple[float, bool]:
        pos, vel = self._state
        vel += (int(action) - 1) * self.FORCE + math.cos(3 * pos) * (-self.GRAVITY)
        vel = min(max(vel, -self.MAX_SPEED), self.MAX_SPEED)
        pos += vel
        pos = min(max(pos, self.MIN_POS), self.MAX_POS)
        if pos == self.MIN_POS and vel < 0:
            vel = 0.0
        self._state = np.array([pos, vel])
        terminated = pos >= self.GOAL_POS and vel >= 0.0
        return -1.0, terminated


class Acrobot(Env):
    """Two-link underactuated swing-up; torque on the elbow joint."""

    spec = ENV_SPECS["acrobot"]

    DT = 0.2
    LINK_LENGTH_1 = 1.0
    LINK_MASS_1 = 1.0
    LINK_MASS_2 = 1.0
    LINK_COM_1 = 0.5
    LINK_COM_2 = 0.5
    LINK_MOI = 1.0
    GRAVITY = 9.8
    MAX_VEL_1 = 4 * math.pi
    MAX_VEL_2 = 9 * math.pi

    def _sample_initial(self) -> np.ndarray:
        self._internal = self._rng.uniform(-0.1, 0.1, size=4)
        return self._observation()

    def _observation(self) -> np.ndarray:
        t1, t2, td1, td2 = self._internal
        return np.array(
            [math.cos(t1), math.sin(t1), math.cos(t2), math.sin(t2), td1, td2]
        )

    def _dynamics(self, state: np.ndarray, torque: float) -> np.ndarray:
        m1, m2 = self.LINK_MASS_1, self.LINK_MASS_2
        l1 = self.LINK_LENGTH_1
        lc1, lc2 = self.LINK_COM_1, self.LINK_COM_2
        i1 = i2 = self.LINK_MOI
        g = self.GRAVITY
        t1, t2, td1, td2 = state
        d1 = (
            m1 * lc1**2
            + m2 * (l1**2 + lc2**2 + 2 * l1 * lc2 * math.cos(t2))
            + i1
            + i2
        )
        d2 = m2 * (lc2**2 + l1 * lc2 * math.cos(t2)) + i2
        phi2 = m2 * lc2 * g * math.cos(t1 + t2 - math.pi / 2)
        phi1 = (
            -m2 * l1 * lc2 * td2**2 * math.sin(t2)
            - 2 * m2 * l1 * lc2 * td2 * td1 * math.sin(t2)
            + (m1 * lc1 + m2 * l1) * g * math.cos(t1 - math.pi / 2)
            + phi2
        )
        tdd2 = (
            torque + d2 / d1 * phi1 - m2 * l1 * lc2 * td1**2 * math.sin(t2) - phi2
        ) / (m2 * lc2**2 + i2 - d2**2 / d1)
        tdd1 = -(d2 * tdd2 + phi1) / d1
        return np.array([td1, td2, tdd1, tdd2])

    def _advance(self, action) -> tuple[float, bool]:
        torque = float(int(action) - 1)
        y = self._internal
        dt = self.DT
        k1 = self._dynamics(y, torque)
        k2 = self._dynamics(y + dt / 2 * k1, torque)
        k3 = self._dynamics(y + dt / 2 * k2, torque)
        k4 = self._dynamics(y + dt * k3, torque)
        y = y + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
        t1 = _wrap_pi(y[0])
        t2 = _wrap_pi(y[1])
        td1 = min(max(y[2], -self.MAX_VEL_1), self.MAX_VEL_1)
        td2 = min(max(y[3], -self.MAX_VEL_2), self.MAX_VEL_2)
        self._internal = np.array([t1, t2, td1, td2])
        self._state = self._observation()
        terminated = -math.cos(t1) - math.cos(t2 + t1) > 1.0
        return (0.0 if terminated else -1.0), terminated


class Pendulum(Env):
    """Torque-controlled inverted pendulum; angle 0 is upright."""

    spec = ENV_SPECS["pendulum"]

    MAX_SPEED = 8.0
    MAX_TORQUE = 2.0
    DT = 0.05
    GRAVITY = 10.0
    MASS = 1.0
    LENGTH = 1.0

    def _sample_initial(self) -> np.ndarray:
        self._theta = self._rng.uniform(-math.pi, math.pi)
        self._theta_dot = self._rng.uniform(-1.0, 1.0)
        return self._observation()

    def _observation(self) -> np.ndarray:
        return np.array([math.cos(self._theta), math.sin(self._theta), self._theta_dot])

    def _advance(self, action) -> tuple[float, bool]:
        u = float(np.clip(np.asarray(action, dtype=np.float64).reshape(-1)[0],
                          -self.MAX_TORQUE, self.MAX_TORQUE))
        th, thd = self._theta, self._theta_dot
        cost = _wrap_pi(th) ** 2 + 0.1 * thd**2 + 0.001 * u**2
        g, m, length, dt = self.GRAVITY, self.MASS, self.LENGTH, self.DT
        thd = thd + (3 * g / (2 * length) * math.sin(th) + 3.0 / (m * length**2) * u) * dt
        thd = min(max(thd, -self.MAX_SPEED), self.MAX_SPEED)
        th = th + thd * dt
        self._theta, self._theta_dot = th, thd
        self._state = self._observation()
        return -cost, False


def _wrap_pi(x: float) -> float:
    """Wrap an angle into [-pi, pi)."""
    return ((x + math.pi) % (2 * math.pi)) - math.pi


_ENV_CLASSES = {
    "cartpole": CartPole,
    "mountaincar": MountainCar,
    "acrobot": Acrobot,
    "pendulum": Pendulum,
}


def make_env(name: str) -> Env:
    try:
        return _ENV_CLASSES[name]()
    except KeyError:
        raise ValueError(f"unknown environment {name!r}") from None


Policy = Callable[[np.ndarray, np.random.Generator], object]


def random_policy(spec: EnvSpec) -> Policy:
    if spec.action_kind == "discrete":
        return lambda state, rng: int(rng.integers(spec.n_actions))
    low, high = spec.action_low, spec.action_high
    return lambda state, rng: float(rng.uniform(low, high))


def expert_policy(name: str) -> Policy:
    """Scripted heuristic controller approximating near-optimal play."""
    if name == "cartpole":
        return _cartpole_expert
    if name == "mountaincar":
        return _mountaincar_expert
    if name == "acrobot":
        return _acrobot_expert
    if name == "pendulum":
        return _pendulum_expert
    raise ValueError(f"no expert policy for {name!r}")


def _cartpole_expert(state: np.ndarray, rng: np.random.Generator) -> int:
    # push toward the side the pole is falling to
    _, _, theta, theta_dot = state
    return 1 if theta + 0.5 * theta_dot > 0 else 0


def _mountaincar_expert(state: np.ndarray, rng: np.random.Generator) -> int:
    # accelerate along the current direction of motion to pump energy
    _, velocity = state
    return 2 if velocity >= 0 else 0


def _acrobot_expert(state: np.ndarray, rng: np.random.Generator) -> int:
    # elbow torque against the first link's swing pumps it toward the goal
    td1 = state[4]
    if td1 > 0:
        return 0
    if td1 < 0:
        return 2
    return 1


def _pendulum_expert(state: np.ndarray, rng: np.random.Generator) -> float:
    # energy shaping far from upright, PD regulation close to it
    cos_t, sin_t, thd = state
    theta = math.atan2(sin_t, cos_t)
    g, m, length = Pendulum.GRAVITY, Pendulum.MASS, Pendulum.LENGTH
    inertia = m * length**2 / 3.0
    energy = 0.5 * inertia * thd**2 + m * g * (length / 2.0) * (cos_t - 1.0)
    if abs(theta) < 0.35 and abs(thd) < 2.5:
        u = -12.0 * theta - 2.2 * thd
    else:
        u = 1.8 * (-energy) * (thd if abs(thd) > 1e-3 else math.copysign(1.0, sin_t))
    return float(np.clip(u, -Pendulum.MAX_TORQUE, Pendulum.MAX_TORQUE))
