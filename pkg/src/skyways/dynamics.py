"""Quadrotor rigid-body dynamics with first-order motor lag.

X-configuration, FLU body frame (x forward, y left, z up), ENU world frame.
Rotor layout viewed from above, with spin directions:

        1 (ccw)   0 (cw)        y (left)
             \\   /               |
              \\ /                |
              / \\                +---- x (forward)
             /   \\
        2 (cw)    3 (ccw)

Per-rotor thrust and reaction torque are quadratic in effective motor
speed; per-motor health factors scale effective speed, so a failed or
broken rotor simply stops producing thrust and torque.

Integration is semi-implicit Euler: motors, then angular rate, attitude,
velocity, position, each consuming the freshly updated quantity. The
scheme is first order; the test suite pins its convergence rate.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import quat
from .world import LocalPoint, ValidationError

GRAVITY_DEFAULT = 9.81


class NumericError(ValueError):
    """Non-finite value fed into the dynamics."""


@dataclass(frozen=True)
class UavParams:
    """Editable physical parameters of one vehicle."""

    mass: float = 1.2
    gravity: float = GRAVITY_DEFAULT
    inertia: tuple = ((0.012, 0.0, 0.0), (0.0, 0.012, 0.0), (0.0, 0.0, 0.021))
    thrust_coeff: float = 1.2e-5
    torque_coeff: float = 1.9e-7
    motor_tau: float = 0.05
    drag_coeff: float = 0.30
    damp_coeff: float = 0.003
    arm_length: float = 0.25
    rotor_count: int = 4
    max_motor_speed: float = 950.0
    body_radius: float = 0.5

    def __post_init__(self):
        for name in ("mass", "gravity", "thrust_coeff", "torque_coeff", "motor_tau",
                     "arm_length", "max_motor_speed", "body_radius"):
            if getattr(self, name) <= 0:
                raise ValidationError(f"{name} must be strictly positive")
        for name in ("drag_coeff", "damp_coeff"):  # zero = undamped, allowed
            if getattr(self, name) < 0:
                raise ValidationError(f"{name} must be non-negative")
        if self.rotor_count != 4:
            raise ValidationError("only 4-rotor X configurations are modeled")
        j = np.asarray(self.inertia, dtype=float)
        if j.shape != (3, 3) or not np.allclose(j, j.T):
            raise ValidationError("inertia must be a symmetric 3x3 matrix")
        if np.any(np.linalg.eigvalsh(j) <= 0):
            raise ValidationError("inertia must be positive definite")

    @property
    def inertia_matrix(self) -> np.ndarray:
        return np.asarray(self.inertia, dtype=float)

    @property
    def hover_speed(self) -> float:
        """Motor speed at which total thrust balances weight (all healthy)."""
        return math.sqrt(self.mass * self.gravity / (4.0 * self.thrust_coeff))


@dataclass
class UavState:
    """Full kinematic/dynamic state of one vehicle."""

    position: LocalPoint
    velocity: np.ndarray
    attitude: np.ndarray  # unit quaternion, body -> world
    angular_rate: np.ndarray  # body frame, rad/s
    motor_speed: np.ndarray  # rad/s, one per rotor
    health: np.ndarray  # per-motor efficiency in [0, 1]

    def __post_init__(self):
        self.velocity = np.asarray(self.velocity, dtype=float)
        self.attitude = np.asarray(self.attitude, dtype=float)
        self.angular_rate = np.asarray(self.angular_rate, dtype=float)
        self.motor_speed = np.asarray(self.motor_speed, dtype=float)
        self.health = np.asarray(self.health, dtype=float)
        if self.attitude.shape != (4,):
            raise ValidationError("attitude must be a quaternion 4-vector")
        if np.any(self.health < 0.0) or np.any(self.health > 1.0):
            raise ValidationError("health factors must lie in [0, 1]")
        if np.any(self.motor_speed < 0.0):
            raise ValidationError("motor speeds must be non-negative")

    @staticmethod
    def at_rest(position: LocalPoint, health=(1.0, 1.0, 1.0, 1.0)) -> "UavState":
        return UavState(
            position=position,
            velocity=np.zeros(3),
            attitude=quat.identity(),
            angular_rate=np.zeros(3),
            motor_speed=np.zeros(4),
            health=np.asarray(health, dtype=float),
        )


# rotor x/y offsets in units of arm_length/sqrt(2), and yaw torque signs
_ROTOR_X = np.array([1.0, -1.0, -1.0, 1.0])
_ROTOR_Y = np.array([1.0, 1.0, -1.0, -1.0])
_YAW_SIGN = np.array([1.0, -1.0, 1.0, -1.0])


class FleetDynamics:
    """Vectorized dynamics for N vehicles stepped in lockstep.

    A single shared code path serves both the one-vehicle API and the
    engine's whole-fleet stepping, so per-vehicle results are identical in
    either mode.
    """

    def __init__(self, params_list: list[UavParams]):
        n = len(params_list)
        self.n = n
        self.mass = np.array([p.mass for p in params_list])
        self.gravity = np.array([p.gravity for p in params_list])
        self.inertia = np.stack([p.inertia_matrix for p in params_list])
        self.inv_inertia = np.linalg.inv(self.inertia)
        self.kf = np.array([p.thrust_coeff for p in params_list])
        self.km = np.array([p.torque_coeff for p in params_list])
        self.tau = np.array([p.motor_tau for p in params_list])
        self.cd = np.array([p.drag_coeff for p in params_list])
        self.cw = np.array([p.damp_coeff for p in params_list])
        self.arm = np.array([p.arm_length for p in params_list])
        self.max_motor = np.array([p.max_motor_speed for p in params_list])

    def step(self, pos, vel, att, rate, motor, health, cmd, wind, dt):
        """One substep for the whole fleet; mutates the state arrays in place."""
        # motor lag, then effective speed through health
        motor += (cmd - motor) * (dt / self.tau)[:, None]
        np.clip(motor, 0.0, self.max_motor[:, None], out=motor)
        eff = health * motor
        eff2 = eff * eff

        thrust = self.kf[:, None] * eff2
        total_thrust = thrust.sum(axis=1)
        rotor_torque = self.km[:, None] * eff2

        d = (self.arm / math.sqrt(2.0))[:, None]
        tau_x = (thrust * (_ROTOR_Y * d)).sum(axis=1)
        tau_y = (thrust * (-_ROTOR_X * d)).sum(axis=1)
        tau_z = (rotor_torque * _YAW_SIGN).sum(axis=1)
        torque = np.stack([tau_x, tau_y, tau_z], axis=1)
        torque -= self.cw[:, None] * rate

        # world-frame force: body-z thrust, linear drag vs airspeed, weight
        body_z = quat.rotate(att, np.broadcast_to(np.array([0.0, 0.0, 1.0]), (self.n, 3)))
        force = body_z * total_thrust[:, None]
        force -= self.cd[:, None] * (vel - wind)
        force[:, 2] -= self.mass * self.gravity

        # rigid-body angular update (Euler's equation), then attitude
        j_rate = np.einsum("nij,nj->ni", self.inertia, rate)
        ang_acc = np.einsum("nij,nj->ni", self.inv_inertia, torque - np.cross(rate, j_rate))
        rate += ang_acc * dt
        datt = quat.from_rotation_vector(rate * dt)
        att[:] = quat.normalize(quat.multiply(att, datt))

        vel += force * (dt / self.mass)[:, None]
        pos += vel * dt


def step_dynamics(state: UavState, params: UavParams, motor_cmd: np.ndarray,
                  wind: np.ndarray, dt: float) -> UavState:
    """One dynamics substep for a single vehicle.

    dt must lie in (0, 0.01]; commands are clamped to the motor envelope by
    the caller's contract and validated here.
    """
    if not 0.0 < dt <= 0.01:
        raise ValidationError(f"dt out of range: {dt}")
    cmd = np.asarray(motor_cmd, dtype=float)
    wind = np.asarray(wind, dtype=float)
    inputs = np.concatenate([state.velocity, state.attitude, state.angular_rate,
                             state.motor_speed, state.health, cmd, wind,
                             state.position.as_array()])
    if not np.all(np.isfinite(inputs)):
        raise NumericError("non-finite value in dynamics input")
    if np.any(cmd < 0) or np.any(cmd > params.max_motor_speed):
        raise ValidationError("motor command outside [0, max_motor_speed]")

    fleet = FleetDynamics([params])
    pos = state.position.as_array()[None, :].copy()
    vel = state.velocity[None, :].copy()
    att = state.attitude[None, :].copy()
    rate = state.angular_rate[None, :].copy()
    motor = state.motor_speed[None, :].copy()
    fleet.step(pos, vel, att, rate, motor, state.health[None, :], cmd[None, :],
               wind[None, :], dt)
    return UavState(
        position=LocalPoint.from_array(pos[0]),
        velocity=vel[0],
        attitude=att[0],
        angular_rate=rate[0],
        motor_speed=motor[0],
        health=state.health.copy(),
    )
