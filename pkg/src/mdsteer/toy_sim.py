"""Go-style bead chain in 2-D with overdamped Langevin dynamics.

Stands in for an MD engine: a designed serpentine fold defines native contacts,
a Lennard-Jones well rewards each of them, and everything else is soft-core
repulsion.  Units are reduced throughout.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numba
import numpy as np

from .config import ChainFrame, ContactMap, RunConfig
from .errors import NoConvergence, NonFiniteError


@dataclass(frozen=True)
class SimParams:
    bond_k: float = 100.0
    bond_len: float = 1.0
    native_pairs: tuple[tuple[int, int, float], ...] = ()
    eps_nat: float = 1.0
    rep_eps: float = 1.0
    rep_sigma: float = 1.0
    gamma: float = 1.0
    temperature: float = 0.35
    dt: float = 0.002
    steps_per_segment: int = 2000
    report_interval: int = 100
    row_length: int = 7

    def __post_init__(self):
        for name in ("bond_k", "bond_len", "rep_eps", "rep_sigma", "gamma", "dt"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.temperature < 0 or self.eps_nat < 0:
            raise ValueError("temperature and eps_nat must be non-negative")
        if not self.dt * self.bond_k / self.gamma < 0.25:
            raise ValueError("unstable step: dt * bond_k / gamma must be < 0.25")
        for i, j, d in self.native_pairs:
            if abs(i - j) < 3 or d <= 0:
                raise ValueError(f"native pair {(i, j, d)} needs |i-j| >= 3 and d > 0")


@dataclass(frozen=True, eq=False)
class NativeReference:
    positions: np.ndarray
    rmsd_band: tuple[float, float] = (0.0, 0.0)
    centered: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        pos = np.array(self.positions, dtype=np.float64)
        pos.flags.writeable = False
        object.__setattr__(self, "positions", pos)
        c = pos - pos.mean(axis=0)
        c.flags.writeable = False
        object.__setattr__(self, "centered", c)


@dataclass(frozen=True, eq=False)
class SegmentEntry:
    frame: ChainFrame
    contacts: ContactMap
    rmsd: float


TrajectorySegment = list  # list[SegmentEntry]


# ---------------------------------------------------------------------------
# geometry


def serpentine(beads: int, row_length: int = 7, spacing: float = 1.0) -> np.ndarray:
    """Boustrophedon layout: rows of ``row_length`` beads, alternating direction."""
    pos = np.zeros((beads, 2))
    for i in range(beads):
        row, col = divmod(i, row_length)
        if row % 2:
            col = row_length - 1 - col
        pos[i] = (col * spacing, row * spacing)
    return pos


def extended_chain(beads: int, spacing: float = 1.0, angle: float = 0.35) -> np.ndarray:
    """Zig-zag extended chain along x with alternating bond angle ``angle`` (radians)."""
    pos = np.zeros((beads, 2))
    for i in range(1, beads):
        a = angle if i % 2 else -angle
        pos[i] = pos[i - 1] + spacing * np.array([np.cos(a), np.sin(a)])
    return pos


def native_pairs_from(positions: np.ndarray, cutoff: float) -> tuple[tuple[int, int, float], ...]:
    n = len(positions)
    pairs = []
    for i in range(n):
        for j in range(i + 3, n):
            d = float(np.linalg.norm(positions[i] - positions[j]))
            if d < cutoff:
                pairs.append((i, j, d))
    return tuple(pairs)


# ---------------------------------------------------------------------------
# energy and forces


class _PairTables:
    """Dense per-pair coefficient matrices for one (params, B) combination."""

    def __init__(self, params: SimParams, beads: int):
        self.beads = beads
        nat = np.zeros((beads, beads), dtype=bool)
        d2 = np.ones((beads, beads))
        for i, j, d in params.native_pairs:
            if j >= beads or i >= beads:
                raise ValueError(f"native pair {(i, j)} outside a {beads}-bead chain")
            nat[i, j] = nat[j, i] = True
            d2[i, j] = d2[j, i] = d * d
        sep = np.abs(np.subtract.outer(np.arange(beads), np.arange(beads)))
        self.nat = nat
        self.rep = (sep >= 2) & ~nat
        self.nat_d6 = np.where(nat, d2**3, 0.0)
        self.nat_d12 = self.nat_d6**2
        self.rep_s12 = np.where(self.rep, params.rep_sigma**12, 0.0)
        self.pair_mask = nat | self.rep


_TABLE_CACHE: dict[tuple[int, int], _PairTables] = {}


def _tables(params: SimParams, beads: int) -> _PairTables:
    key = (id(params), beads)
    tab = _TABLE_CACHE.get(key)
    if tab is None or tab.beads != beads:
        tab = _PairTables(params, beads)
        if len(_TABLE_CACHE) > 64:
            _TABLE_CACHE.clear()
        _TABLE_CACHE[key] = tab
        # keep params alive so id() stays unique while cached
        tab.params = params
    return tab


def _inv_r2(pos: np.ndarray, tab: _PairTables) -> tuple[np.ndarray, np.ndarray]:
    diff = pos[:, None, :] - pos[None, :, :]
    r2 = np.einsum("ijk,ijk->ij", diff, diff)
    if np.any(r2[tab.pair_mask] == 0.0):
        raise NonFiniteError("coincident beads in a divergent pair term")
    np.fill_diagonal(r2, 1.0)
    return diff, 1.0 / r2


def _positions(frame) -> np.ndarray:
    return frame.positions if isinstance(frame, ChainFrame) else np.asarray(frame, dtype=np.float64)


def potential_energy(frame, params: SimParams) -> float:
    pos = _positions(frame)
    tab = _tables(params, len(pos))
    bonds = np.linalg.norm(np.diff(pos, axis=0), axis=1)
    e_bond = params.bond_k * np.sum((bonds - params.bond_len) ** 2)
    _, inv = _inv_r2(pos, tab)
    inv3 = inv**3
    e_nat = params.eps_nat * np.sum(tab.nat_d12 * inv3**2 - 2.0 * tab.nat_d6 * inv3)
    e_rep = params.rep_eps * np.sum(tab.rep_s12 * inv3**2)
    # pair matrices count each pair twice
    e = float(e_bond + 0.5 * (e_nat + e_rep))
    if not np.isfinite(e):
        raise NonFiniteError("potential energy is not finite")
    return e


def _force(pos: np.ndarray, params: SimParams, tab: _PairTables) -> np.ndarray:
    diff, inv = _inv_r2(pos, tab)
    inv3 = inv**3
    inv6 = inv3 * inv3
    coef = 12.0 * inv * (
        params.eps_nat * (tab.nat_d12 * inv6 - tab.nat_d6 * inv3) + params.rep_eps * tab.rep_s12 * inv6
    )
    f = np.einsum("ij,ijk->ik", coef, diff)
    b = np.diff(pos, axis=0)
    blen = np.sqrt(np.einsum("ij,ij->i", b, b))
    fb = (2.0 * params.bond_k * (blen - params.bond_len) / blen)[:, None] * b
    f[:-1] += fb
    f[1:] -= fb
    return f


def force(frame, params: SimParams) -> np.ndarray:
    """Analytic negative gradient of :func:`potential_energy`, shape (B, 2)."""
    pos = _positions(frame)
    f = _force(pos, params, _tables(params, len(pos)))
    if not np.all(np.isfinite(f)):
        raise NonFiniteError("force is not finite")
    return f


# ---------------------------------------------------------------------------
# dynamics


def sim_rng(seed: int, sim_id: int, lineage_id: int, segment_index: int) -> np.random.Generator:
    """Counter-based stream keyed by (seed, sim, lineage, segment); independent of scheduling."""
    ss = np.random.SeedSequence([seed, sim_id, lineage_id, segment_index])
    return np.random.Generator(np.random.Philox(ss))


def step_langevin(frame: ChainFrame, params: SimParams, rng: np.random.Generator) -> ChainFrame:
    pos = frame.positions
    f = _force(pos, params, _tables(params, len(pos)))
    noise = rng.standard_normal(pos.shape)
    new = pos + (params.dt / params.gamma) * f + np.sqrt(2.0 * params.temperature * params.dt / params.gamma) * noise
    if not np.all(np.isfinite(new)):
        raise NonFiniteError(f"sim {frame.sim_id} diverged at step {frame.step + 1}")
    return ChainFrame(frame.sim_id, frame.segment_index, frame.step + 1, new, frame.lineage_id)


@numba.njit(cache=True)
def _integrate_kernel(pos, noise, mob, amp, bond_k, bond_len, eps_nat, rep_eps, nat_d6, nat_d12, rep_s12):
    n, b = noise.shape[0], pos.shape[0]
    f = np.empty_like(pos)
    for t in range(n):
        f[:] = 0.0
        for i in range(b):
            xi, yi = pos[i, 0], pos[i, 1]
            for j in range(i + 2, b):
                dx, dy = xi - pos[j, 0], yi - pos[j, 1]
                inv = 1.0 / (dx * dx + dy * dy)
                inv3 = inv * inv * inv
                inv6 = inv3 * inv3
                c = 12.0 * inv * (eps_nat * (nat_d12[i, j] * inv6 - nat_d6[i, j] * inv3) + rep_eps * rep_s12[i, j] * inv6)
                f[i, 0] += c * dx
                f[i, 1] += c * dy
                f[j, 0] -= c * dx
                f[j, 1] -= c * dy
        for i in range(b - 1):
            dx, dy = pos[i + 1, 0] - pos[i, 0], pos[i + 1, 1] - pos[i, 1]
            r = np.sqrt(dx * dx + dy * dy)
            c = 2.0 * bond_k * (r - bond_len) / r
            f[i, 0] += c * dx
            f[i, 1] += c * dy
            f[i + 1, 0] -= c * dx
            f[i + 1, 1] -= c * dy
        for i in range(b):
            pos[i, 0] += mob * f[i, 0] + amp * noise[t, i, 0]
            pos[i, 1] += mob * f[i, 1] + amp * noise[t, i, 1]
    return pos


def _integrate(pos: np.ndarray, n: int, params: SimParams, rng: np.random.Generator) -> np.ndarray:
    """``n`` Euler-Maruyama steps; same update as :func:`step_langevin`, compiled."""
    tab = _tables(params, len(pos))
    mob = params.dt / params.gamma
    amp = np.sqrt(2.0 * params.temperature * params.dt / params.gamma)
    noise = rng.standard_normal((n,) + pos.shape)
    return _integrate_kernel(
        np.array(pos, dtype=np.float64), noise, mob, amp, params.bond_k, params.bond_len,
        params.eps_nat, params.rep_eps, tab.nat_d6, tab.nat_d12, tab.rep_s12,
    )


def run_segment(
    start: ChainFrame,
    params: SimParams,
    rng: np.random.Generator,
    ref: NativeReference,
    cutoff: float,
    segment_index: int | None = None,
) -> TrajectorySegment:
    """Advance ``steps_per_segment`` steps, reporting every ``report_interval`` steps."""
    seg = start.segment_index if segment_index is None else segment_index
    entries = []
    pos = start.positions
    step = start.step
    for _ in range(params.steps_per_segment // params.report_interval):
        pos = _integrate(pos, params.report_interval, params, rng)
        if not np.all(np.isfinite(pos)):
            raise NonFiniteError(f"sim {start.sim_id} diverged in segment {seg}")
        step += params.report_interval
        fr = ChainFrame(start.sim_id, seg, step, pos, start.lineage_id)
        entries.append(SegmentEntry(fr, contact_map(fr, cutoff), rmsd_aligned(fr, ref)))
    return entries


# ---------------------------------------------------------------------------
# features


def contact_map(frame, cutoff: float) -> ContactMap:
    if not cutoff > 0:
        raise ValueError("cutoff must be positive")
    pos = _positions(frame)
    diff = pos[:, None, :] - pos[None, :, :]
    bits = np.einsum("ijk,ijk->ij", diff, diff) < cutoff * cutoff
    np.fill_diagonal(bits, True)
    return ContactMap(bits)


def rmsd_aligned(frame, ref) -> float:
    """RMSD after optimal 2-D rotation and translation (closed-form angle)."""
    p = _positions(frame)
    q = ref.centered if isinstance(ref, NativeReference) else _positions(ref) - _positions(ref).mean(axis=0)
    if p.shape != q.shape:
        raise ValueError(f"shape mismatch {p.shape} vs {q.shape}")
    p = p - p.mean(axis=0)
    # rotate p by theta to best match q
    cross = np.sum(p[:, 0] * q[:, 1] - p[:, 1] * q[:, 0])
    dot = np.sum(p[:, 0] * q[:, 0] + p[:, 1] * q[:, 1])
    theta = np.arctan2(cross, dot)
    c, s = np.cos(theta), np.sin(theta)
    rot = np.column_stack([c * p[:, 0] - s * p[:, 1], s * p[:, 0] + c * p[:, 1]])
    msd = np.sum((rot - q) ** 2) / len(p)
    return float(np.sqrt(max(msd, 0.0)))


# ---------------------------------------------------------------------------
# native state


def _descend(pos: np.ndarray, params: SimParams, tol: float, max_iter: int) -> np.ndarray:
    """Gradient descent with Barzilai-Borwein step lengths and an energy safeguard."""
    tab = _tables(params, len(pos))
    x = pos.copy()
    g = -_force(x, params, tab)
    step = 1e-3
    e = potential_energy(x, params)
    for _ in range(max_iter):
        if np.max(np.abs(g)) < tol:
            return x
        while True:
            x_new = x - step * g
            try:
                e_new = potential_energy(x_new, params)
            except NonFiniteError:
                e_new = np.inf
            if e_new <= e + 1e-12 * max(1.0, abs(e)) or step < 1e-14:
                break
            step *= 0.5
        g_new = -_force(x_new, params, tab)
        s, y = (x_new - x).ravel(), (g_new - g).ravel()
        sy = float(s @ y)
        step = float(s @ s) / sy if sy > 0 else 1e-3
        step = min(step, 1.0)
        x, g, e = x_new, g_new, e_new
    raise NoConvergence(f"gradient max-norm {np.max(np.abs(g)):.3g} after {max_iter} iterations")


def make_native(params: SimParams, seed: int, beads: int | None = None,
                tol: float = 1e-8, max_iter: int = 200_000, band_samples: int = 40) -> NativeReference:
    """Relax the serpentine start under ``params`` and measure its thermal RMSD band.

    ``beads`` defaults to one past the largest native-pair index.
    """
    if beads is None:
        beads = 1 + max((j for _, j, _ in params.native_pairs), default=1)
    start = serpentine(beads, params.row_length, params.bond_len)
    native = _descend(start, params, tol, max_iter)
    ref = NativeReference(native)
    if band_samples <= 0 or params.temperature == 0:
        return ref
    rng = sim_rng(seed, 2**31, 0, 0)  # label outside the sim-id range
    pos = native
    vals = []
    for _ in range(band_samples):
        pos = _integrate(pos, params.report_interval, params, rng)
        vals.append(rmsd_aligned(pos, ref))
    return NativeReference(native, (float(np.mean(vals)), float(np.std(vals))))


def params_from_config(config: RunConfig) -> SimParams:
    s = config.sim
    design = serpentine(config.beads, s.row_length, s.bond_len)
    return SimParams(
        bond_k=s.bond_k, bond_len=s.bond_len,
        native_pairs=native_pairs_from(design, s.native_cutoff),
        eps_nat=s.eps_nat, rep_eps=s.rep_eps, rep_sigma=s.rep_sigma, gamma=s.gamma,
        temperature=s.temperature, dt=s.dt,
        steps_per_segment=s.steps_per_segment, report_interval=s.report_interval,
        row_length=s.row_length,
    )


_SYSTEM_CACHE: dict = {}


def build_system(config: RunConfig) -> tuple[SimParams, NativeReference]:
    """Simulation parameters and native reference for a run (cached per sim settings)."""
    key = (config.beads, config.sim)
    if key not in _SYSTEM_CACHE:
        params = params_from_config(config)
        _SYSTEM_CACHE[key] = (params, make_native(params, seed=0, beads=config.beads))
    return _SYSTEM_CACHE[key]


def initial_frame(config: RunConfig, sim_id: int, native: NativeReference) -> ChainFrame:
    if config.initial_state.value == "NATIVE" or (config.initial_state.value == "MIXED" and sim_id % 2 == 0):
        pos = native.positions
    else:
        pos = extended_chain(config.beads, config.sim.bond_len)
    return ChainFrame(sim_id, 0, 0, pos, sim_id)
