"""Network geometry, sub-region grid, channel draws and target kinematics."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from typing import Any, Mapping

import numpy as np

C_LIGHT = 3e8


def dbm_to_watt(p_dbm):
    return 10.0 ** ((np.asarray(p_dbm, dtype=float) - 30.0) / 10.0)


def watt_to_dbm(p_w, floor=-200.0):
    p_w = np.asarray(p_w, dtype=float)
    with np.errstate(divide="ignore"):
        out = 10.0 * np.log10(p_w) + 30.0
    return np.maximum(out, floor)


class ConfigError(ValueError):
    """Invalid scenario configuration. ``key`` names the offending field."""

    def __init__(self, msg, key=None):
        super().__init__(msg)
        self.key = key


class GeometryError(ValueError):
    """Coincident points where a distance must be positive."""


@dataclass(frozen=True)
class ScenarioConfig:
    """Fully realized scenario. Powers are linear watts, positions meters."""

    area: tuple[float, float]
    grid: tuple[float, float]
    B: int
    K: int
    Q: int
    N_tx: int
    N_bs: int
    bs_positions: np.ndarray      # (B, 2)
    user_positions: np.ndarray    # (K, 2)
    target_positions: np.ndarray  # (Q, 2)
    target_velocities: np.ndarray  # (Q, 2)
    kappa: float = 2.0
    xi: float = 2.3
    wavelength: float = C_LIGHT / 5.89e9
    M: int = 64
    delta_f: float = 156.25e3
    L: int = 50
    T_cp: float = 1.6e-6
    N0_dbm_hz: float = -174.0
    rcs: np.ndarray = None        # (Q,)
    p_max: np.ndarray = None      # (B,) watts
    op_cost: np.ndarray = None    # (B,)
    w_c: np.ndarray = None        # (K,)
    w_r: np.ndarray = None        # (Q,)
    alpha: tuple[float, float, float] = (0.3, 0.3, 0.4)
    c_min: np.ndarray = None      # (K,) bits/s/Hz
    eps_d_max: np.ndarray = None  # (Q,) m^2
    eps_v_max: np.ndarray = None  # (Q,) (m/s)^2
    i_max: np.ndarray = None      # (X, Y) watts
    seed: int = 0

    @property
    def T_o(self):
        return 1.0 / self.delta_f

    @property
    def T(self):
        return self.T_o + self.T_cp

    @property
    def X(self):
        return int(math.ceil(self.area[0] / self.grid[0] - 1e-12))

    @property
    def Y(self):
        return int(math.ceil(self.area[1] / self.grid[1] - 1e-12))

    @property
    def sigma(self):
        """Per-subcarrier noise variance (W)."""
        return float(self.delta_f * dbm_to_watt(self.N0_dbm_hz))

    @property
    def o_min(self):
        return float(np.log(np.min(self.op_cost)))

    @property
    def o_max(self):
        return float(np.log(np.sum(self.op_cost)))

    def region_center(self, x, y):
        """Center of 1-based sub-region (x, y)."""
        return np.array([(x - 0.5) * self.grid[0], (y - 0.5) * self.grid[1]])

    def validate(self):
        if not (1 <= self.N_bs <= self.B):
            raise ConfigError(f"N_bs must be in [1, B], got {self.N_bs}", "N_bs")
        for name in ("K", "Q", "N_tx", "M", "L"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1", name)
        if self.Q > self.N_tx:
            raise ConfigError("zero-forcing needs Q <= N_tx", "Q")
        shapes = {"bs_positions": (self.B, 2), "user_positions": (self.K, 2),
                  "target_positions": (self.Q, 2), "target_velocities": (self.Q, 2),
                  "rcs": (self.Q,), "p_max": (self.B,), "op_cost": (self.B,),
                  "w_c": (self.K,), "w_r": (self.Q,), "c_min": (self.K,),
                  "eps_d_max": (self.Q,), "eps_v_max": (self.Q,), "i_max": (self.X, self.Y)}
        for name, shape in shapes.items():
            val = getattr(self, name)
            if val is None or np.shape(val) != shape:
                raise ConfigError(f"{name} must have shape {shape}", name)
        for name in ("rcs", "p_max", "w_c", "w_r", "c_min", "eps_d_max", "eps_v_max", "i_max"):
            if np.any(np.asarray(getattr(self, name)) <= 0):
                raise ConfigError(f"{name} must be strictly positive", name)
        if np.any(self.op_cost < 1):
            raise ConfigError("operation costs must be >= 1", "op_cost")
        if min(self.alpha) <= 0:
            raise ConfigError("alpha weights must be strictly positive", "alpha")
        for name in ("bs_positions", "user_positions", "target_positions"):
            pos = getattr(self, name)
            if np.any(pos < 0) or np.any(pos[:, 0] > self.area[0]) or np.any(pos[:, 1] > self.area[1]):
                raise ConfigError(f"{name} outside the area", name)
        cells = [region_index(p, self.grid) for p in self.target_positions]
        if len(set(cells)) != len(cells):
            raise ConfigError("targets must occupy distinct sub-regions", "target_positions")
        return self

    def with_power(self, p_dbm):
        return replace(self, p_max=np.full(self.B, float(dbm_to_watt(p_dbm))))


def split_mask(X, Y, i_max_dbm=-23.01, drop_db=10.0):
    """Default mask: full level on the two diagonal quadrant blocks, lower elsewhere."""
    hx, hy = math.ceil(X / 2), math.ceil(Y / 2)
    mask = np.full((X, Y), i_max_dbm - drop_db)
    for x in range(1, X + 1):
        for y in range(1, Y + 1):
            if (x <= hx and y <= hy) or (x >= hx and y >= hy):
                mask[x - 1, y - 1] = i_max_dbm
    return dbm_to_watt(mask)


def region_index(pos, grid):
    """1-based (x, y) sub-region of a point, ceiling convention with 0 -> 1."""
    ix = max(1, int(math.ceil(pos[0] / grid[0] - 1e-12)))
    iy = max(1, int(math.ceil(pos[1] / grid[1] - 1e-12)))
    return ix, iy


DEFAULTS: dict[str, Any] = {
    "area": [1400.0, 1400.0],
    "grid": [200.0, 200.0],
    "B": 4, "K": 2, "Q": 2, "N_tx": 4, "N_bs": 3,
    "kappa": 2.0, "xi": 2.3, "carrier_hz": 5.89e9,
    "M": 64, "delta_f_hz": 156.25e3, "L": 50, "T_cp_s": 1.6e-6,
    "N0_dbm_hz": -174.0, "rcs": 1.0,
    "p_max_dbm": 15.0,
    "op_cost_range": [1.0, 4.0],
    "alpha": [0.3, 0.3, 0.4],
    "c_min": 1.5, "eps_d_max": 15.0, "eps_v_max": 1.5,
    "i_max_dbm": -23.01, "mask_drop_db": 10.0,
    "speed_range": [30.0, 50.0],
}

KNOWN_KEYS = set(DEFAULTS) | {
    "bs_positions", "user_positions", "target_positions", "target_velocities",
    "op_cost", "w_c", "w_r", "mask_dbm", "seed",
}


def _vec(val, n, key):
    arr = np.asarray(val, dtype=float)
    if arr.ndim == 0:
        return np.full(n, float(arr))
    if arr.shape != (n,):
        raise ConfigError(f"{key} must be a scalar or a list of length {n}", key)
    return arr


def _positions(val, n, key):
    arr = np.asarray(val, dtype=float)
    if arr.shape != (n, 2):
        raise ConfigError(f"{key} must be a list of {n} [x, y] pairs", key)
    return arr


def build_config(spec: Mapping[str, Any], rng: np.random.Generator | None = None,
                 overrides: Mapping[str, Any] | None = None) -> ScenarioConfig:
    """Realize a scenario dict (file units: dBm, meters, Hz, s) into a ScenarioConfig.

    Positions, velocities and costs missing from ``spec`` are drawn from ``rng``.
    """
    d = dict(DEFAULTS)
    d.update(spec)
    if overrides:
        d.update(overrides)
    unknown = set(spec) - KNOWN_KEYS
    if unknown:
        key = sorted(unknown)[0]
        raise ConfigError(f"unknown key '{key}'", key)
    if rng is None:
        rng = np.random.default_rng(int(d.get("seed", 0)))
    try:
        B, K, Q, N, N_bs = (int(d[k]) for k in ("B", "K", "Q", "N_tx", "N_bs"))
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"counts must be integers: {exc}", "B") from None
    for key in ("B", "K", "Q", "N_tx", "N_bs", "M", "L"):
        if float(d[key]) != int(d[key]) or int(d[key]) < 1:
            raise ConfigError(f"{key} must be a positive integer", key)
    area = tuple(float(v) for v in d["area"])
    grid = tuple(float(v) for v in d["grid"])
    if len(area) != 2 or len(grid) != 2 or min(area) <= 0 or min(grid) <= 0:
        raise ConfigError("area and grid must be two positive lengths", "area")
    X = int(math.ceil(area[0] / grid[0] - 1e-12))
    Y = int(math.ceil(area[1] / grid[1] - 1e-12))

    def uniform_points(n):
        return np.column_stack([rng.uniform(0, area[0], n), rng.uniform(0, area[1], n)])

    bs = _positions(d["bs_positions"], B, "bs_positions") if "bs_positions" in d else uniform_points(B)
    users = _positions(d["user_positions"], K, "user_positions") if "user_positions" in d else uniform_points(K)
    if "target_positions" in d:
        targets = _positions(d["target_positions"], Q, "target_positions")
    else:
        if Q > X * Y:
            raise ConfigError("more targets than sub-regions", "Q")
        for _ in range(10000):
            targets = uniform_points(Q)
            if len({region_index(p, grid) for p in targets}) == Q:
                break
    if "target_velocities" in d:
        vel = _positions(d["target_velocities"], Q, "target_velocities")
    else:
        lo, hi = d["speed_range"]
        vel = rng.uniform(lo, hi, (Q, 2)) * rng.choice([-1.0, 1.0], (Q, 2))
    if "op_cost" in d:
        cost = _vec(d["op_cost"], B, "op_cost")
    else:
        lo, hi = d["op_cost_range"]
        cost = rng.uniform(lo, hi, B)
    if "mask_dbm" in d:
        mask = np.asarray(d["mask_dbm"], dtype=float)
        if mask.shape != (X, Y):
            raise ConfigError(f"mask_dbm must be a {X}x{Y} grid", "mask_dbm")
        i_max = dbm_to_watt(mask)
    else:
        i_max = split_mask(X, Y, float(d["i_max_dbm"]), float(d["mask_drop_db"]))
    alpha = tuple(float(v) for v in d["alpha"])
    if len(alpha) != 3:
        raise ConfigError("alpha must have three entries", "alpha")
    delta_f = float(d["delta_f_hz"])
    if delta_f <= 0 or float(d["carrier_hz"]) <= 0:
        raise ConfigError("frequencies must be positive", "delta_f_hz")

    cfg = ScenarioConfig(
        area=area, grid=grid, B=B, K=K, Q=Q, N_tx=N, N_bs=N_bs,
        bs_positions=bs, user_positions=users, target_positions=targets,
        target_velocities=vel, kappa=float(d["kappa"]), xi=float(d["xi"]),
        wavelength=C_LIGHT / float(d["carrier_hz"]), M=int(d["M"]), delta_f=delta_f,
        L=int(d["L"]), T_cp=float(d["T_cp_s"]), N0_dbm_hz=float(d["N0_dbm_hz"]),
        rcs=_vec(d["rcs"], Q, "rcs"), p_max=_vec(dbm_to_watt(d["p_max_dbm"]), B, "p_max_dbm"),
        op_cost=cost,
        w_c=_vec(d["w_c"], K, "w_c") if "w_c" in d else np.full(K, 1.0 / K),
        w_r=_vec(d["w_r"], Q, "w_r") if "w_r" in d else np.full(Q, 1.0 / Q),
        alpha=alpha, c_min=_vec(d["c_min"], K, "c_min"),
        eps_d_max=_vec(d["eps_d_max"], Q, "eps_d_max"),
        eps_v_max=_vec(d["eps_v_max"], Q, "eps_v_max"),
        i_max=i_max, seed=int(d.get("seed", 0)),
    )
    return cfg.validate()


def load_scenario_text(path):
    """Read a scenario JSON file. Raises ConfigError with a line number on failure."""
    with open(path, encoding="utf-8") as fh:
        text = fh.read()
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}:{exc.lineno}: {exc.msg}") from None
    if not isinstance(data, dict):
        raise ConfigError(f"{path}:1: top level must be an object")
    return data, text


def key_line(text, key):
    """1-based line of the first occurrence of a JSON key, or 1."""
    if key is None:
        return 1
    needle = f'"{key}"'
    for i, line in enumerate(text.splitlines(), start=1):
        if needle in line:
            return i
    return 1


# ---------------------------------------------------------------- channels

def steering_vector(d_from, d_to, n_tx, kappa, xi):
    """LoS component of the Rician channel from ``d_from`` toward ``d_to``."""
    d_from = np.asarray(d_from, dtype=float)
    d_to = np.asarray(d_to, dtype=float)
    diff = d_from - d_to
    r = float(np.hypot(diff[0], diff[1]))
    if r <= 0:
        raise GeometryError("coincident points")
    if diff[0] == 0.0:
        theta = math.copysign(math.pi / 2, diff[1])
    else:
        theta = math.atan(diff[1] / diff[0])
    amp = math.sqrt(kappa / ((kappa + 1.0) * r ** xi))
    n = np.arange(n_tx)
    return amp * np.exp(-1j * math.pi * n * math.sin(theta))


def nlos_variance(d_from, d_to, kappa, xi):
    r = float(np.linalg.norm(np.asarray(d_from, float) - np.asarray(d_to, float)))
    if r <= 0:
        raise GeometryError("coincident points")
    return r ** (-xi) / (kappa + 1.0)


@dataclass(frozen=True)
class ChannelSet:
    gc: np.ndarray       # (B, K, N) communication channels
    gr: np.ndarray       # (B, Q, N) LoS sensing channels
    gl: np.ndarray       # (B, X, Y, N) LoS toward sub-region centers
    kbar: np.ndarray     # (B, X, Y) NLoS per-antenna variance
    S: tuple = field(default=())
    S_rc: frozenset = field(default=frozenset())
    S_o: tuple = field(default=())


def region_sets(cfg):
    S = tuple((x, y) for x in range(1, cfg.X + 1) for y in range(1, cfg.Y + 1))
    pts = list(cfg.user_positions) + list(cfg.target_positions)
    S_rc = frozenset(region_index(p, cfg.grid) for p in pts)
    S_o = tuple(s for s in S if s not in S_rc)
    return S, S_rc, S_o


def sample_channels(cfg: ScenarioConfig, rng: np.random.Generator) -> ChannelSet:
    B, K, Q, N = cfg.B, cfg.K, cfg.Q, cfg.N_tx
    gc = np.empty((B, K, N), complex)
    gr = np.empty((B, Q, N), complex)
    gl = np.empty((B, cfg.X, cfg.Y, N), complex)
    kbar = np.empty((B, cfg.X, cfg.Y))
    for b in range(B):
        db = cfg.bs_positions[b]
        for k in range(K):
            los = steering_vector(db, cfg.user_positions[k], N, cfg.kappa, cfg.xi)
            var = nlos_variance(db, cfg.user_positions[k], cfg.kappa, cfg.xi)
            nlos = np.sqrt(var / 2) * (rng.standard_normal(N) + 1j * rng.standard_normal(N))
            gc[b, k] = los + nlos
        for q in range(Q):
            gr[b, q] = steering_vector(db, cfg.target_positions[q], N, cfg.kappa, cfg.xi)
        for x in range(cfg.X):
            for y in range(cfg.Y):
                c = cfg.region_center(x + 1, y + 1)
                gl[b, x, y] = steering_vector(db, c, N, cfg.kappa, cfg.xi)
                kbar[b, x, y] = nlos_variance(db, c, cfg.kappa, cfg.xi)
    S, S_rc, S_o = region_sets(cfg)
    return ChannelSet(gc=gc, gr=gr, gl=gl, kbar=kbar, S=S, S_rc=S_rc, S_o=S_o)


def delay_doppler(d_b, d_b2, d_q, v_q, wavelength):
    """Round-trip delay (s) and Doppler (Hz) for transmitter b, receiver b'."""
    d_b, d_b2, d_q, v_q = (np.asarray(v, dtype=float) for v in (d_b, d_b2, d_q, v_q))
    e1 = d_b - d_q
    e2 = d_b2 - d_q
    r1, r2 = np.linalg.norm(e1), np.linalg.norm(e2)
    if r1 <= 0 or r2 <= 0:
        raise GeometryError("target colocated with a BS")
    tau = (r1 + r2) / C_LIGHT
    f = (v_q @ e1) / (wavelength * r1) + (v_q @ e2) / (wavelength * r2)
    return float(tau), float(f)
