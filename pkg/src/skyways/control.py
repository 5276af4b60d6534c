"""Cascaded flight controller: position -> velocity -> attitude -> rates -> motors.

Pure P cascades with saturation at every stage; the hover feed-forward term
makes level hover an exact equilibrium. Gains are deliberately soft so the
default vehicle is stable with the 1/240 s physics step and 50 ms motor lag.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum

import numpy as np

from . import quat
from .dynamics import FleetDynamics, UavParams, UavState, _ROTOR_X, _ROTOR_Y, _YAW_SIGN
from .world import LocalPoint, ValidationError


class SetpointMode(Enum):
    POSITION_HOLD = "position-hold"
    VELOCITY = "velocity"
    WAYPOINT = "waypoint"


@dataclass(frozen=True)
class ControlSetpoint:
    """Target for the cascade. ``target`` is a point for the position modes
    and a world-frame velocity for VELOCITY mode; ``hold_up`` keeps an
    altitude while flying a horizontal velocity."""

    mode: SetpointMode
    target: tuple[float, float, float]
    yaw: float = 0.0
    hold_up: float | None = None
    speed_limit: float | None = None

    def __post_init__(self):
        if not all(math.isfinite(v) for v in self.target):
            raise ValidationError("setpoint target must be finite")

    @staticmethod
    def hold(p: LocalPoint, yaw: float = 0.0) -> "ControlSetpoint":
        return ControlSetpoint(SetpointMode.POSITION_HOLD, (p.east, p.north, p.up), yaw)

    @staticmethod
    def waypoint(p: LocalPoint, yaw: float = 0.0,
                 speed_limit: float | None = None) -> "ControlSetpoint":
        return ControlSetpoint(SetpointMode.WAYPOINT, (p.east, p.north, p.up), yaw,
                               speed_limit=speed_limit)

    @staticmethod
    def velocity(v, yaw: float = 0.0, hold_up: float | None = None) -> "ControlSetpoint":
        return ControlSetpoint(SetpointMode.VELOCITY, (float(v[0]), float(v[1]), float(v[2])),
                               yaw, hold_up=hold_up)


@dataclass(frozen=True)
class ControlGains:
    kp_pos: float = 1.0  # 1/s
    kp_vel: float = 2.0  # 1/s
    kp_att: float = 8.0  # 1/s
    kp_rate: float = 20.0  # 1/s, torque = J * kp_rate * rate error
    v_max: float = 12.0  # m/s
    vz_max: float = 4.0  # m/s, climb/descend cap
    tilt_max: float = math.radians(30.0)
    rate_max: float = 8.0  # rad/s


class FleetController:
    """Vectorized controller over N vehicles (single shared code path)."""

    def __init__(self, params_list: list[UavParams], gains_list: list[ControlGains]):
        self.n = len(params_list)
        self.mass = np.array([p.mass for p in params_list])
        self.gravity = np.array([p.gravity for p in params_list])
        self.inertia = np.stack([p.inertia_matrix for p in params_list])
        self.kf = np.array([p.thrust_coeff for p in params_list])
        self.km = np.array([p.torque_coeff for p in params_list])
        self.arm = np.array([p.arm_length for p in params_list])
        self.max_motor = np.array([p.max_motor_speed for p in params_list])
        self.kp_pos = np.array([g.kp_pos for g in gains_list])
        self.kp_vel = np.array([g.kp_vel for g in gains_list])
        self.kp_att = np.array([g.kp_att for g in gains_list])
        self.kp_rate = np.array([g.kp_rate for g in gains_list])
        self.v_max = np.array([g.v_max for g in gains_list])
        self.vz_max = np.array([g.vz_max for g in gains_list])
        self.tan_tilt = np.array([math.tan(g.tilt_max) for g in gains_list])
        self.rate_max = np.array([g.rate_max for g in gains_list])

    def motor_commands(self, pos, vel, att, rate, mode, target, yaw_sp, hold_up,
                       speed_limit) -> np.ndarray:
        """Motor speed commands (n, 4) from batched state and setpoints.

        mode: int array (0 = position/waypoint, 1 = velocity); hold_up is
        nan when unused; speed_limit is inf when uncapped.
        """
        n = self.n
        is_vel = mode == 1

        vel_cmd = np.where(is_vel[:, None], target,
                           self.kp_pos[:, None] * (target - pos))
        hold = is_vel & np.isfinite(hold_up)
        vel_cmd[:, 2] = np.where(hold, self.kp_pos * (hold_up - pos[:, 2]), vel_cmd[:, 2])

        cap = np.minimum(self.v_max, speed_limit)
        hnorm = np.linalg.norm(vel_cmd[:, :2], axis=1)
        scale = np.where(hnorm > cap, cap / np.maximum(hnorm, 1e-12), 1.0)
        vel_cmd[:, :2] *= scale[:, None]
        np.clip(vel_cmd[:, 2], -self.vz_max, self.vz_max, out=vel_cmd[:, 2])

        acc_cmd = self.kp_vel[:, None] * (vel_cmd - vel)
        force = self.mass[:, None] * acc_cmd
        force[:, 2] += self.mass * self.gravity
        # keep the thrust vector inside the tilt cone and pointing up
        fz = np.maximum(force[:, 2], 0.25 * self.mass * self.gravity)
        fh = np.linalg.norm(force[:, :2], axis=1)
        hcap = self.tan_tilt * fz
        hscale = np.where(fh > hcap, hcap / np.maximum(fh, 1e-12), 1.0)
        force[:, :2] *= hscale[:, None]
        force[:, 2] = fz

        thrust = np.linalg.norm(force, axis=1)
        z_des = force / thrust[:, None]
        x_c = np.stack([np.cos(yaw_sp), np.sin(yaw_sp), np.zeros(n)], axis=1)
        y_des = np.cross(z_des, x_c)
        y_norm = np.linalg.norm(y_des, axis=1, keepdims=True)
        y_des = y_des / np.maximum(y_norm, 1e-9)
        x_des = np.cross(y_des, z_des)
        r_des = np.stack([x_des, y_des, z_des], axis=2)  # columns are the axes
        q_des = quat.from_matrix(r_des)

        q_err = quat.multiply(quat.conjugate(att), q_des)
        sign = np.where(q_err[:, :1] >= 0.0, 1.0, -1.0)
        rate_cmd = 2.0 * self.kp_att[:, None] * sign * q_err[:, 1:]
        rnorm = np.linalg.norm(rate_cmd, axis=1)
        rscale = np.where(rnorm > self.rate_max, self.rate_max / np.maximum(rnorm, 1e-12), 1.0)
        rate_cmd *= rscale[:, None]

        torque = np.einsum("nij,nj->ni", self.inertia,
                           self.kp_rate[:, None] * (rate_cmd - rate))

        # invert the X mixer for per-rotor thrusts
        inv4d = 1.0 / (4.0 * self.arm / math.sqrt(2.0))
        per_rotor = (thrust[:, None] / 4.0
                     + torque[:, 0:1] * inv4d[:, None] * _ROTOR_Y[None, :]
                     - torque[:, 1:2] * inv4d[:, None] * _ROTOR_X[None, :]
                     + torque[:, 2:3] * (self.kf / (4.0 * self.km))[:, None] * _YAW_SIGN[None, :])
        per_rotor = np.maximum(per_rotor, 0.0)
        cmd = np.sqrt(per_rotor / self.kf[:, None])
        np.clip(cmd, 0.0, self.max_motor[:, None], out=cmd)
        return cmd


def _setpoint_arrays(setpoint: ControlSetpoint):
    mode = np.array([1 if setpoint.mode == SetpointMode.VELOCITY else 0])
    target = np.array([setpoint.target], dtype=float)
    yaw = np.array([setpoint.yaw], dtype=float)
    hold = np.array([math.nan if setpoint.hold_up is None else setpoint.hold_up])
    limit = np.array([math.inf if setpoint.speed_limit is None else setpoint.speed_limit])
    return mode, target, yaw, hold, limit


def run_controller(state: UavState, setpoint: ControlSetpoint, params: UavParams,
                   gains: ControlGains | None = None) -> np.ndarray:
    """Motor speed commands for one vehicle; saturates rather than fails."""
    gains = gains or ControlGains()
    ctl = FleetController([params], [gains])
    mode, target, yaw, hold, limit = _setpoint_arrays(setpoint)
    cmd = ctl.motor_commands(
        state.position.as_array()[None, :], state.velocity[None, :],
        state.attitude[None, :], state.angular_rate[None, :],
        mode, target, yaw, hold, limit)
    return cmd[0]


def track_route(state: UavState, route: list[LocalPoint], index: int,
                acceptance_radius: float = 2.0) -> tuple[ControlSetpoint, int]:
    """Waypoint setpoint for the current route point, advancing the progress
    index whenever the vehicle is inside the acceptance radius. The final
    point is held as a position setpoint."""
    if not route:
        raise ValidationError("route must be non-empty")
    index = max(0, min(index, len(route) - 1))
    pos = state.position
    while index < len(route) - 1 and pos.distance_to(route[index]) <= acceptance_radius:
        index += 1
    wp = route[index]
    yaw = math.atan2(wp.north - pos.north, wp.east - pos.east) \
        if (wp.east, wp.north) != (pos.east, pos.north) else 0.0
    if index == len(route) - 1 and pos.distance_to(wp) <= acceptance_radius:
        return ControlSetpoint.hold(wp, yaw), index
    return ControlSetpoint.waypoint(wp, yaw), index
