"""Two-node (air + mass) RC building model and the urban time loop.

Each building is one zone::

    C_m   dT_m/dt  = H_em (T_in - T_m) + gains_mass
    C_air dT_in/dt = (H_env + H_inf)(T_out - T_in) + H_em (T_m - T_in) + Q_heat + gains_air

stepped with backward Euler. The heater supplies whatever holds the setpoint,
clamped to [0, max power]. Solar gains enter through wall glazing, with the
direct part cut by the face's shading mask; optional inter-building longwave
exchange uses view factors and the previous step's air temperatures.
"""
from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from datetime import datetime
from importlib import resources

import numba
import numpy as np

from citybem.geo_ingest import WeatherSeries
from citybem.meshgen import BuildingModel, FaceTag, Scene, TriMesh, building_mesh
from citybem.radiation import ShadingMask, ViewFactorMatrix, clip_front, crossed_strings_2d
from citybem.solar import SkyGrid, sky_view_factor, sun_position

MODEL_VARIANT = "2R2C-backward-euler"
WINDOW_RATIO = 0.15
H_RAD = 5.0
RHO_CP_AIR = 1200.0  # J/(m3 K)


class ThermalError(ValueError):
    pass


def load_archetypes() -> dict[str, dict]:
    text = resources.files("citybem").joinpath("data/archetypes.json").read_text()
    table = json.loads(text)
    table.pop("_units", None)
    return table


ARCHETYPES = load_archetypes()


@dataclass
class ZoneParams:
    a_env: float
    a_win: float
    u_env: float
    u_win: float
    capacitance: float
    g: float
    setpoint: float
    max_power: float
    h_inf: float
    h_em: float = math.inf       # W/K air-mass coupling; inf collapses to one node
    air_fraction: float = 0.05   # share of capacitance on the air node
    solar_to_air: float = 0.5

    def __post_init__(self):
        for name in ("a_env", "capacitance", "max_power", "h_em"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        for name in ("a_win", "u_env", "u_win", "h_inf"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if not 0 <= self.g <= 1 or not 0 < self.air_fraction <= 1:
            raise ValueError("g must be in [0, 1] and air_fraction in (0, 1]")

    @property
    def h_env(self) -> float:
        return self.u_env * (self.a_env - self.a_win) + self.u_win * self.a_win

    @property
    def h_total(self) -> float:
        return self.h_env + self.h_inf

    @property
    def c_air(self) -> float:
        return self.capacitance * self.air_fraction

    @property
    def c_mass(self) -> float:
        return self.capacitance * (1.0 - self.air_fraction)


@dataclass
class ZoneState:
    t_in: float
    t_m: float
    q_heat: float = 0.0


def mesh_areas(mesh: TriMesh) -> tuple[float, float, float]:
    """(wall area, roof area, enclosed volume)."""
    areas = mesh.areas()
    return (float(areas[mesh.tags == FaceTag.WALL].sum()),
            float(areas[mesh.tags == FaceTag.ROOF].sum()), mesh.volume())


def derive_params(b: BuildingModel | TriMesh, archetype: str = "old") -> ZoneParams:
    try:
        row = ARCHETYPES[archetype]
    except KeyError:
        raise ThermalError(f"unknown archetype {archetype!r}; known: {sorted(ARCHETYPES)}") from None
    mesh = building_mesh(b) if isinstance(b, BuildingModel) else b
    wall, roof, volume = mesh_areas(mesh)
    return ZoneParams(
        a_env=wall + roof,
        a_win=WINDOW_RATIO * wall,
        u_env=row["u_env"], u_win=row["u_win"], g=row["g"],
        capacitance=row["c_vol"] * volume,
        setpoint=row["setpoint"],
        max_power=row["power_vol"] * volume,
        h_inf=RHO_CP_AIR / 3600.0 * row["ach"] * volume,
        h_em=row["h_em_vol"] * volume,
        air_fraction=row["air_fraction"],
    )


@numba.njit(cache=True, nogil=True)
def _implicit_step(t_in, t_m, c_air, c_m, h_em, h_out, t_out, g_air, g_mass, setpoint,
                   q_max, dt):
    if math.isinf(h_em):
        c = (c_air + c_m) / dt
        a = c + h_out
        r = c * t_in + h_out * t_out + g_air + g_mass
        free = r / a
        q = 0.0
        if free < setpoint:
            q = min((setpoint - free) * a, q_max)
        t_new = (r + q) / a
        return t_new, t_new, q
    a11 = c_air / dt + h_out + h_em
    a22 = c_m / dt + h_em
    r1 = c_air / dt * t_in + h_out * t_out + g_air
    r2 = c_m / dt * t_m + g_mass
    det = a11 * a22 - h_em * h_em
    free = (r1 * a22 + h_em * r2) / det
    q = 0.0
    if free < setpoint:
        q = min((setpoint - free) * det / a22, q_max)
    ta = (((r1 + q) * a22 + h_em * r2) / det) if q > 0.0 else free
    if q > 0.0 and q < q_max:
        ta = setpoint
    tm = (r2 + h_em * ta) / a22
    return ta, tm, q


def step_zone(state: ZoneState, params: ZoneParams, t_out: float, solar_gain: float, dt: float,
              air_gain: float = 0.0) -> ZoneState:
    """Advance one zone by ``dt`` seconds (backward Euler)."""
    if not dt > 0:
        raise ValueError("dt must be positive")
    g_air = params.solar_to_air * solar_gain + air_gain
    g_mass = (1.0 - params.solar_to_air) * solar_gain
    ta, tm, q = _implicit_step(state.t_in, state.t_m, params.c_air, params.c_mass, params.h_em,
                               params.h_total, t_out, g_air, g_mass, params.setpoint,
                               params.max_power, dt)
    return ZoneState(ta, tm, q)


# --- urban time loop -------------------------------------------------------

@dataclass
class SimConfig:
    lat: float = 48.58
    lon: float = 7.75
    h_r: float = H_RAD
    initial_temp: float | None = None  # None: start at each zone's setpoint
    workers: int = 1
    seed: int = 0


@dataclass
class SimResult:
    ids: list[str]
    timestamps: list[datetime]
    t_in: np.ndarray      # (n_buildings, n_steps)
    t_mass: np.ndarray
    q_heat: np.ndarray    # W
    solar_gain: np.ndarray
    exchange: np.ndarray  # longwave gain from other buildings, W
    dt: float
    variant: str = MODEL_VARIANT
    seed: int = 0
    metadata: dict = field(default_factory=dict)

    @property
    def energy_kwh(self) -> np.ndarray:
        return self.q_heat.sum(axis=1) * self.dt / 3.6e6

    @property
    def total_kwh(self) -> float:
        return float(self.energy_kwh.sum())

    def row(self, bid: str) -> int:
        return self.ids.index(bid)


@dataclass
class _Zones:
    """Flat per-building arrays for the kernels."""
    c_air: np.ndarray
    c_m: np.ndarray
    h_em: np.ndarray
    h_out: np.ndarray
    setpoint: np.ndarray
    q_max: np.ndarray
    solar_to_air: np.ndarray

    @classmethod
    def from_params(cls, params: list[ZoneParams]) -> _Zones:
        def col(fn):
            return np.array([fn(p) for p in params], dtype=float)
        return cls(col(lambda p: p.c_air), col(lambda p: p.c_mass), col(lambda p: p.h_em),
                   col(lambda p: p.h_total), col(lambda p: p.setpoint), col(lambda p: p.max_power),
                   col(lambda p: p.solar_to_air))


@numba.njit(cache=True, nogil=True)
def _solar_gain_kernel(face_bldg, normals, gain_area, blocked, sky_view, sun_vec, sun_bin, dni,
                       dhi, out):
    """out[b, s] += irradiance(face, s) * glazing area * g for every face of building b."""
    n_faces = face_bldg.shape[0]
    n_steps = sun_vec.shape[0]
    for f in range(n_faces):
        b = face_bldg[f]
        for s in range(n_steps):
            irr = dhi[s] * sky_view[f]
            k = sun_bin[s]
            if k >= 0:
                c = normals[f, 0] * sun_vec[s, 0] + normals[f, 1] * sun_vec[s, 1] + \
                    normals[f, 2] * sun_vec[s, 2]
                if c > 0.0:
                    irr += dni[s] * c * (1.0 - blocked[f, k])
            out[b, s] += irr * gain_area[f]


@numba.njit(cache=True, nogil=True)
def _run_zones(c_air, c_m, h_em, h_out, setpoint, q_max, solar_to_air, t_out, gains, dt, t0,
               out_t, out_tm, out_q):
    n_b, n_s = gains.shape
    for b in range(n_b):
        ta = t0[b]
        tm = t0[b]
        for s in range(n_s):
            g = gains[b, s]
            ta, tm, q = _implicit_step(ta, tm, c_air[b], c_m[b], h_em[b], h_out[b], t_out[s],
                                       solar_to_air[b] * g, (1.0 - solar_to_air[b]) * g,
                                       setpoint[b], q_max[b], dt)
            out_t[b, s] = ta
            out_tm[b, s] = tm
            out_q[b, s] = q


@numba.njit(cache=True, nogil=True)
def _step_all(c_air, c_m, h_em, h_out, setpoint, q_max, solar_to_air, t_out, gains, extra, dt,
              ta, tm, out_q):
    for b in range(ta.shape[0]):
        g = gains[b]
        ta[b], tm[b], out_q[b] = _implicit_step(
            ta[b], tm[b], c_air[b], c_m[b], h_em[b], h_out[b], t_out,
            solar_to_air[b] * g + extra[b], (1.0 - solar_to_air[b]) * g, setpoint[b], q_max[b], dt)


def sun_track(weather: WeatherSeries, lat: float, lon: float, grid: SkyGrid):
    """Per-step sun vector and flat sky-bin index (-1 below the horizon)."""
    from citybem.solar import grid_bin
    vecs = np.zeros((len(weather), 3))
    bins = np.full(len(weather), -1, dtype=np.int64)
    for s, ts in enumerate(weather.timestamps):
        sun = sun_position(lat, lon, ts)
        vecs[s] = sun.vector()
        b = grid_bin(grid, sun)
        if b is not None:
            bins[s] = b[0] * grid.n_alt + b[1]
    return vecs, bins


def exchange_conductance(vf: ViewFactorMatrix, ids: list[str], h_r: float = H_RAD) -> np.ndarray:
    """Symmetric W/K matrix between buildings, h_r * (A_i F_ij + A_j F_ji) / 2."""
    pos = {str(b): k for k, b in enumerate(ids)}
    n = len(ids)
    G = np.zeros((n, n))
    af = vf.areas[:, None] * vf.F
    sym = 0.5 * (af + af.T)
    for a, ia in enumerate(vf.ids):
        for b, ib in enumerate(vf.ids):
            if a != b and str(ia) in pos and str(ib) in pos:
                G[pos[str(ia)], pos[str(ib)]] = h_r * sym[a, b]
    return G


def longwave_exchange(G: np.ndarray, t: np.ndarray) -> np.ndarray:
    """Net gain per building; flows Q_ij = G_ij (T_j - T_i) are exactly antisymmetric."""
    return G @ t - G.sum(axis=1) * t


def simulate(scene: Scene, params: dict[str, ZoneParams], weather: WeatherSeries,
             masks: dict[int, ShadingMask], vf: ViewFactorMatrix | None = None,
             config: SimConfig | None = None, parts: list[list[str]] | None = None) -> SimResult:
    """Run all buildings of ``scene`` through the weather series.

    ``parts`` groups building ids into execution lanes (one per partition
    part); without coupling each lane runs its whole time loop on its own
    thread. Results do not depend on the grouping.
    """
    config = config or SimConfig()
    ids = list(scene.index)
    missing = [b for b in ids if b not in params]
    if missing:
        raise ThermalError(f"no zone parameters for buildings {missing}")
    pos = {b: k for k, b in enumerate(ids)}
    n_b, n_s = len(ids), len(weather)
    dt = weather.step_s

    face_bldg, normals, gain_area, blocked, sky_view = [], [], [], [], []
    grid = None
    for b in ids:
        p = params[b]
        for f in scene.building_faces(b):
            if int(f) not in masks:
                raise ThermalError(f"missing shading mask for face {int(f)} of building {b}")
            m = masks[int(f)]
            if grid is None:
                grid = m.grid
            elif m.grid != grid:
                raise ThermalError("shading masks use different sky grids")
            is_wall = scene.face_tag[f] == FaceTag.WALL
            face_bldg.append(pos[b])
            normals.append(scene.face_normal[f])
            gain_area.append(WINDOW_RATIO * scene.face_area[f] * p.g if is_wall else 0.0)
            blocked.append(m.blocked.ravel())
            sky_view.append(sky_view_factor(scene.face_normal[f], m.blocked, m.grid))
    grid = grid or SkyGrid()
    face_bldg = np.array(face_bldg, dtype=np.int64)
    normals = np.array(normals, dtype=float).reshape(-1, 3)
    gain_area = np.array(gain_area, dtype=float)
    blocked = np.array(blocked, dtype=float).reshape(len(face_bldg), grid.n_bins)
    sky_view = np.array(sky_view, dtype=float)
    sun_vec, sun_bin = sun_track(weather, config.lat, config.lon, grid)

    zones = _Zones.from_params([params[b] for b in ids])
    t0 = zones.setpoint.copy() if config.initial_temp is None else np.full(n_b, config.initial_temp)
    t_out = np.ascontiguousarray(weather.t_out)
    out_t = np.zeros((n_b, n_s))
    out_tm = np.zeros((n_b, n_s))
    out_q = np.zeros((n_b, n_s))
    solar = np.zeros((n_b, n_s))
    exchange = np.zeros((n_b, n_s))

    if parts is None:
        k = max(1, config.workers)
        parts = [ids[i::k] for i in range(k)]
    lanes = [np.array(sorted(pos[b] for b in part), dtype=np.int64) for part in parts if part]

    def gains_for(lane):
        sel = np.isin(face_bldg, lane)
        local = np.searchsorted(lane, face_bldg[sel])
        out = np.zeros((len(lane), n_s))
        _solar_gain_kernel(local, normals[sel], gain_area[sel], blocked[sel], sky_view[sel],
                           sun_vec, sun_bin, weather.dni, weather.dhi, out)
        return out

    def zone_args(lane):
        return (zones.c_air[lane], zones.c_m[lane], zones.h_em[lane], zones.h_out[lane],
                zones.setpoint[lane], zones.q_max[lane], zones.solar_to_air[lane])

    def run_lane(lane):
        g = gains_for(lane)
        ta = np.zeros((len(lane), n_s))
        tm = np.zeros((len(lane), n_s))
        q = np.zeros((len(lane), n_s))
        _run_zones(*zone_args(lane), t_out, g, dt, t0[lane], ta, tm, q)
        return lane, g, ta, tm, q

    workers = max(1, config.workers)
    if vf is None:
        if workers > 1 and len(lanes) > 1:
            with ThreadPoolExecutor(workers) as pool:
                results = list(pool.map(run_lane, lanes))
        else:
            results = [run_lane(lane) for lane in lanes]
        for lane, g, ta, tm, q in results:
            solar[lane], out_t[lane], out_tm[lane], out_q[lane] = g, ta, tm, q
    else:
        G = exchange_conductance(vf, ids, config.h_r)
        for lane in lanes:
            solar[lane] = gains_for(lane)
        ta = t0.copy()
        tm = t0.copy()
        q = np.zeros(n_b)
        for s in range(n_s):
            # Jacobi: exchange from the previous step's air temperatures
            ex = longwave_exchange(G, ta)
            exchange[:, s] = ex
            for lane in lanes:
                a, m_, qq = ta[lane], tm[lane], q[lane]
                _step_all(*zone_args(lane), t_out[s], solar[lane, s], ex[lane], dt, a, m_, qq)
                ta[lane], tm[lane], q[lane] = a, m_, qq
            out_t[:, s], out_tm[:, s], out_q[:, s] = ta, tm, q

    return SimResult(ids, list(weather.timestamps), out_t, out_tm, out_q, solar, exchange, dt,
                     MODEL_VARIANT, config.seed,
                     {"lat": config.lat, "lon": config.lon, "h_r": config.h_r,
                      "coupled": vf is not None, "initial": t0.tolist()})


def energy_balance(result: SimResult, params: dict[str, ZoneParams], t_out: np.ndarray) -> np.ndarray:
    """Per building: (heat in - losses + solar + exchange) - change in stored heat, in J.

    Losses use end-of-step temperatures, matching the implicit scheme.
    """
    out = np.zeros(len(result.ids))
    t0 = np.asarray(result.metadata["initial"])
    for k, b in enumerate(result.ids):
        p = params[b]
        loss = p.h_total * (result.t_in[k] - t_out)
        flow = (result.q_heat[k] - loss + result.solar_gain[k] + result.exchange[k]).sum() * result.dt
        stored = p.c_air * (result.t_in[k, -1] - t0[k]) + p.c_mass * (result.t_mass[k, -1] - t0[k])
        out[k] = flow - stored
    return out


# --- 2D steady surface network --------------------------------------------

class SingularSystemError(ThermalError):
    pass


def solve_surface_network(lengths, F, h_r: float, fixed, g_bound=None, t_bound=None,
                          tol: float = 1e-10) -> np.ndarray:
    """Steady temperatures of a linearized radiative surface network.

    Free surface i (``fixed[i]`` is nan) balances
    ``sum_j h_r F_ij (T_j - T_i) + g_bound[i] (t_bound[i] - T_i) = 0``
    (per unit length); fixed surfaces keep their given temperature.
    """
    lengths = np.asarray(lengths, dtype=float)
    F = np.asarray(F, dtype=float)
    fixed = np.asarray(fixed, dtype=float)
    n = len(lengths)
    g_bound = np.zeros(n) if g_bound is None else np.asarray(g_bound, dtype=float)
    t_bound = np.zeros(n) if t_bound is None else np.asarray(t_bound, dtype=float)
    free = np.flatnonzero(np.isnan(fixed))
    T = np.where(np.isnan(fixed), 0.0, fixed)
    if len(free) == 0:
        return T
    K = h_r * F
    A = np.diag(K.sum(axis=1) + g_bound) - K
    b = g_bound * t_bound
    fx = np.flatnonzero(~np.isnan(fixed))
    Aff = A[np.ix_(free, free)]
    rhs = b[free] - A[np.ix_(free, fx)] @ T[fx]
    if np.linalg.matrix_rank(Aff) < len(free):
        raise SingularSystemError("surface network has a floating subsystem with no boundary")
    x = np.linalg.solve(Aff, rhs)
    for _ in range(3):
        r = rhs - Aff @ x
        if np.abs(r).max() < tol * max(1.0, np.abs(rhs).max()):
            break
        x += np.linalg.solve(Aff, r)
    T[free] = x
    return T


@dataclass
class Benchmark2D:
    segments: list[tuple[tuple[float, float], tuple[float, float]]]
    lengths: np.ndarray
    kind: list[str]           # 'wall', 'roof' or 'ground'
    block: list[int]          # owning block, -1 for ground
    F: np.ndarray
    temperatures: np.ndarray
    boundary_flux: np.ndarray  # W per unit depth entering each segment from fixed boundaries
    exchange_flux: np.ndarray  # W per unit depth entering each segment from other segments


def _seg_normal(seg):
    (x0, y0), (x1, y1) = seg
    d = np.array([x1 - x0, y1 - y0], dtype=float)
    # outward normal on the right of the direction of travel
    return np.array([d[1], -d[0]]) / np.hypot(*d)


def view_factor_matrix_2d(segments) -> np.ndarray:
    """One-sided view factors between oriented 2D segments (front = right-hand side)."""
    n = len(segments)
    F = np.zeros((n, n))
    L = np.array([math.dist(*s) for s in segments])
    for i in range(n):
        ni = _seg_normal(segments[i])
        for j in range(i + 1, n):
            nj = _seg_normal(segments[j])
            rj = clip_front(segments[j], np.asarray(segments[i][0], float), ni)
            ri = clip_front(segments[i], np.asarray(segments[j][0], float), nj)
            if rj is None or ri is None:
                continue
            if math.dist(*ri) < 1e-12 or math.dist(*rj) < 1e-12:
                continue
            blockers = [segments[k] for k in range(n) if k not in (i, j)]
            f = crossed_strings_2d(ri, rj, blockers)
            # L_i F_ij = L_j F_ji exactly, both equal the clipped string balance
            exch = f * math.dist(*ri)
            F[i, j] = exch / L[i]
            F[j, i] = exch / L[j]
    return F


def solve_2d_benchmark(blocks, t_interior, t_air: float, t_sky: float, t_ground: float,
                       u_wall: float = 1.0, h_conv: float = 10.0, h_r: float = H_RAD,
                       ground_margin: float = 5.0) -> Benchmark2D:
    """Steady surface temperatures around rectangular blocks standing on the ground.

    ``blocks`` are (x0, x1, height) rectangles on y = 0, left to right and
    non-overlapping. Block walls and roofs are free surfaces coupled to their
    interior (``u_wall``), the outdoor air (``h_conv``), the sky (the view
    not taken by other segments) and each other by linearized radiation.
    Ground strips between and beside the blocks are held at ``t_ground``.
    """
    blocks = sorted(blocks)
    segs, kind, owner = [], [], []
    xs = [blocks[0][0] - ground_margin]
    for k, (x0, x1, h) in enumerate(blocks):
        if x0 < xs[-1] or x1 <= x0 or h <= 0:
            raise ThermalError(f"invalid or overlapping block {blocks[k]}")
        # counter-clockwise outline: the right-hand normal points out of the block
        segs += [((x1, 0.0), (x1, h)), ((x1, h), (x0, h)), ((x0, h), (x0, 0.0))]
        kind += ["wall", "roof", "wall"]
        owner += [k, k, k]
        xs += [x0, x1]
    xs.append(blocks[-1][1] + ground_margin)
    for a, b in zip(xs[0::2], xs[1::2]):
        if b - a > 1e-12:
            # ground runs right to left so its right-hand normal points up
            segs.append(((b, 0.0), (a, 0.0)))
            kind.append("ground")
            owner.append(-1)
    t_interior = np.broadcast_to(np.asarray(t_interior, dtype=float), (len(blocks),))
    F = view_factor_matrix_2d(segs)
    L = np.array([math.dist(*s) for s in segs])
    n = len(segs)
    fixed = np.array([t_ground if k == "ground" else np.nan for k in kind])
    g = np.zeros(n)
    tb = np.zeros(n)
    for i in range(n):
        if kind[i] == "ground":
            continue
        f_sky = max(0.0, 1.0 - F[i].sum())
        g[i] = u_wall + h_conv + h_r * f_sky
        tb[i] = (u_wall * t_interior[owner[i]] + h_conv * t_air + h_r * f_sky * t_sky) / g[i]
    T = solve_surface_network(L, F, h_r, fixed, g, tb)
    K = h_r * F * L[:, None]
    exchange = (K * (T[None, :] - T[:, None])).sum(axis=1)
    boundary = L * g * (tb - T)
    boundary[np.isnan(fixed) == False] = -exchange[np.isnan(fixed) == False]  # noqa: E712
    return Benchmark2D(segs, L, kind, owner, F, T, boundary, exchange)
