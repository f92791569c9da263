"""Torque-controlled pendulum rendered as 16x16 grayscale image sequences.

Conventions: phi = 0 means hanging straight down, wrapped to (-pi, pi];
actions are torque in N*m. Velocity is invisible per frame (render depends
only on phi), so it must be inferred from sequences.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

IMG = 16
DIM_X = IMG * IMG
ROD_LEN = 6.0

DEFAULTS = dict(mass=1.0, length=1.0, gravity=9.81, friction=0.25,
                dt=0.05, u_max=5.0, v_max=8.0)


def wrap_angle(phi: float) -> float:
    """Wrap to (-pi, pi]."""
    w = -((-phi + np.pi) % (2.0 * np.pi) - np.pi)
    return w


@dataclass
class PendulumState:
    phi: float
    phi_dot: float


def step(state: PendulumState, u: float, dt: float = DEFAULTS["dt"],
         mass: float = DEFAULTS["mass"], length: float = DEFAULTS["length"],
         gravity: float = DEFAULTS["gravity"],
         friction: float = DEFAULTS["friction"]) -> PendulumState:
    """Semi-implicit Euler on phi_ddot = (u - b*phi_dot - m g l sin phi)/(m l^2)."""
    acc = (u - friction * state.phi_dot
           - mass * gravity * length * np.sin(state.phi)) / (mass * length ** 2)
    phi_dot = state.phi_dot + dt * acc
    phi = wrap_angle(state.phi + dt * phi_dot)
    return PendulumState(phi, phi_dot)


_PX = np.arange(IMG, dtype=np.float64)
_GRID_X, _GRID_Y = np.meshgrid(_PX, _PX, indexing="xy")  # x = column, y = row


def render(phi: float) -> np.ndarray:
    """Anti-aliased rod of length 6 px from the image center at angle phi.

    Returns 256 floats in [0, 1]. Pure function of phi only.
    """
    cx = cy = (IMG - 1) / 2.0
    # y grows downward in image coordinates; phi=0 points down
    ex = cx + ROD_LEN * np.sin(phi)
    ey = cy + ROD_LEN * np.cos(phi)
    # distance from every pixel center to the segment (cx,cy)-(ex,ey)
    dx, dy = ex - cx, ey - cy
    seg_len2 = dx * dx + dy * dy
    t = ((_GRID_X - cx) * dx + (_GRID_Y - cy) * dy) / seg_len2
    t = np.clip(t, 0.0, 1.0)
    px = cx + t * dx
    py = cy + t * dy
    dist = np.hypot(_GRID_X - px, _GRID_Y - py)
    frame = np.clip(1.6 - 1.6 * dist, 0.0, 1.0)
    return frame.reshape(-1)


def simulate_sequence(phi0: float, phi_dot0: float, actions: np.ndarray,
                      constants: dict | None = None):
    """Roll out T steps; returns (frames T x 256, truth T x 2).

    Frame t shows the state *before* action t is applied.
    """
    c = dict(DEFAULTS)
    if constants:
        c.update(constants)
    state = PendulumState(wrap_angle(phi0), phi_dot0)
    T = len(actions)
    frames = np.empty((T, DIM_X))
    truth = np.empty((T, 2))
    for t in range(T):
        frames[t] = render(state.phi)
        truth[t] = (state.phi, state.phi_dot)
        state = step(state, float(actions[t]), dt=c["dt"], mass=c["mass"],
                     length=c["length"], gravity=c["gravity"], friction=c["friction"])
    return frames, truth


# -- dataset file format --------------------------------------------------------
# A JSON header line {version, n_seq, T, dim_x, dim_u, constants, seed}
# terminated by newline, then little-endian float64 payloads in order
# [frames, actions, truth], each sequence-major then time-major.

@dataclass
class Dataset:
    frames: np.ndarray   # (n_seq, T, 256)
    actions: np.ndarray  # (n_seq, T, 1)
    truth: np.ndarray    # (n_seq, T, 2)
    header: dict

    @property
    def n_seq(self) -> int:
        return self.frames.shape[0]

    @property
    def T(self) -> int:
        return self.frames.shape[1]


def generate_dataset(n_seq: int, T: int, seed: int, path: str | None = None,
                     constants: dict | None = None) -> Dataset:
    """Generate sequences with random initial state and i.i.d. random torque.

    phi0 ~ U(-pi, pi], phi_dot0 ~ U(-8, 8), u_t ~ U(-u_max, u_max). Each
    sequence uses an RNG stream derived from (seed, index), so results do not
    depend on generation order.
    """
    if n_seq < 1 or T < 1:
        raise ValueError(f"n_seq and T must be >= 1, got n_seq={n_seq}, T={T}")
    c = dict(DEFAULTS)
    if constants:
        c.update(constants)
    frames = np.empty((n_seq, T, DIM_X))
    actions = np.empty((n_seq, T, 1))
    truth = np.empty((n_seq, T, 2))
    for i in range(n_seq):
        rng = np.random.default_rng(np.random.SeedSequence([seed, i]))
        phi0 = -rng.uniform(-np.pi, np.pi)  # (-pi, pi]
        phi_dot0 = rng.uniform(-c["v_max"], c["v_max"])
        u = rng.uniform(-c["u_max"], c["u_max"], size=T)
        frames[i], truth[i] = simulate_sequence(phi0, phi_dot0, u, c)
        actions[i, :, 0] = u
    header = {"version": 1, "n_seq": n_seq, "T": T, "dim_x": DIM_X, "dim_u": 1,
              "constants": c, "seed": seed}
    ds = Dataset(frames, actions, truth, header)
    if path is not None:
        save_dataset(ds, path)
    return ds


def save_dataset(ds: Dataset, path: str):
    with open(path, "wb") as f:
        f.write(json.dumps(ds.header, sort_keys=True).encode() + b"\n")
        f.write(ds.frames.astype("<f8").tobytes())
        f.write(ds.actions.astype("<f8").tobytes())
        f.write(ds.truth.astype("<f8").tobytes())


def load_dataset(path: str) -> Dataset:
    with open(path, "rb") as f:
        header = json.loads(f.readline().decode())
        n, T = header["n_seq"], header["T"]
        dim_x, dim_u = header["dim_x"], header["dim_u"]

        def read(shape):
            count = int(np.prod(shape))
            return np.frombuffer(f.read(count * 8), dtype="<f8").reshape(shape).copy()

        frames = read((n, T, dim_x))
        actions = read((n, T, dim_u))
        truth = read((n, T, 2))
    return Dataset(frames, actions, truth, header)
