import numpy as np
import pytest

from mdsteer import toy_sim
from mdsteer.config import ChainFrame, validate_config
from mdsteer.errors import NonFiniteError
from mdsteer.toy_sim import (NativeReference, SimParams, contact_map, force, make_native, potential_energy,
                             rmsd_aligned, run_segment, serpentine, sim_rng, step_langevin)


@pytest.fixture(scope="module")
def system():
    return toy_sim.build_system(validate_config({}))


def random_chain(rng, beads, min_sep=0.85):
    """Random self-avoiding walk with unit-ish bonds, no pair closer than ``min_sep``."""
    while True:
        pos = np.zeros((beads, 2))
        ok = True
        for i in range(1, beads):
            for _ in range(100):
                a = rng.uniform(0, 2 * np.pi)
                cand = pos[i - 1] + rng.uniform(0.9, 1.1) * np.array([np.cos(a), np.sin(a)])
                if i < 2 or np.min(np.linalg.norm(pos[:i - 1] - cand, axis=1)) > min_sep:
                    pos[i] = cand
                    break
            else:
                ok = False
                break
        if ok:
            return pos


def energy_oracle(pos, p: SimParams):
    """Term-by-term pairwise sum written independently of the module's matrix form."""
    n = len(pos)
    nat = {(i, j): d for i, j, d in p.native_pairs}
    e = 0.0
    for i in range(n - 1):
        e += p.bond_k * (np.hypot(*(pos[i] - pos[i + 1])) - p.bond_len) ** 2
    for i in range(n):
        for j in range(i + 2, n):
            r = np.hypot(*(pos[i] - pos[j]))
            if (i, j) in nat:
                d = nat[(i, j)]
                e += p.eps_nat * ((d / r) ** 12 - 2 * (d / r) ** 6)
            else:
                e += p.rep_eps * (p.rep_sigma / r) ** 12
    return e


def rotate(pos, deg, shift=(0.0, 0.0)):
    t = np.deg2rad(deg)
    m = np.array([[np.cos(t), -np.sin(t)], [np.sin(t), np.cos(t)]])
    return pos @ m.T + np.asarray(shift)


# --- make_native ------------------------------------------------------------

def test_native_two_beads_rest_length():
    p = SimParams(temperature=0.0)
    ref = make_native(p, seed=0, beads=2)
    assert np.linalg.norm(ref.positions[1] - ref.positions[0]) == pytest.approx(1.0, abs=1e-9)
    assert potential_energy(ref.positions, p) == pytest.approx(0.0, abs=1e-12)


def test_native_four_beads_descends():
    p = SimParams(native_pairs=((0, 3, 1.2),), temperature=0.0)
    ref = make_native(p, seed=0, beads=4)
    assert potential_energy(ref.positions, p) <= potential_energy(serpentine(4, p.row_length), p)


def test_native_default_deterministic(system):
    params, native = system
    again = make_native(params, seed=0, beads=28)
    assert np.all(np.isfinite(native.positions))
    assert np.array_equal(native.positions, again.positions)
    assert native.rmsd_band == again.rmsd_band
    assert rmsd_aligned(native.positions, native) == 0.0
    assert len(params.native_pairs) > 0
    assert all(abs(i - j) >= 3 for i, j, _ in params.native_pairs)


# --- energy -------------------------------------------------------------------

def test_energy_bond_at_rest():
    assert potential_energy(np.array([[0.0, 0.0], [1.0, 0.0]]), SimParams()) == 0.0


def test_energy_native_pair_at_minimum():
    p = SimParams(native_pairs=((0, 3, 1.3),), rep_eps=1e-300)
    pos = np.array([[0.0, 0.0], [1.0, 0.0], [2.0, 0.0], [3.0, 0.0]])
    pos[3] = pos[0] + [0.0, 1.3]  # bonds deliberately stretched; isolate the native term
    total = potential_energy(pos, p)
    bonds = p.bond_k * sum((np.hypot(*(pos[i] - pos[i + 1])) - 1) ** 2 for i in range(3))
    assert total - bonds == pytest.approx(-p.eps_nat, abs=1e-12)


def test_energy_matches_oracle():
    rng = np.random.default_rng(3)
    p = SimParams(native_pairs=((0, 3, 1.1), (1, 4, 1.4)))
    for _ in range(20):
        pos = random_chain(rng, 5)
        assert potential_energy(pos, p) == pytest.approx(energy_oracle(pos, p), rel=1e-12, abs=1e-12)


def test_energy_matches_oracle_full_system(system):
    params, _ = system
    rng = np.random.default_rng(4)
    pos = random_chain(rng, 28)
    assert potential_energy(pos, params) == pytest.approx(energy_oracle(pos, params), rel=1e-11)


def test_energy_coincident_beads_nonfinite():
    pos = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 0.0]])
    with pytest.raises(NonFiniteError):
        potential_energy(pos, SimParams())
    with pytest.raises(NonFiniteError):
        force(pos, SimParams())


def test_energy_rigid_invariance(system):
    params, native = system
    rng = np.random.default_rng(5)
    for _ in range(10):
        pos = random_chain(rng, 28)
        moved = rotate(pos, rng.uniform(0, 360), rng.normal(size=2) * 10)
        assert abs(potential_energy(moved, params) - potential_energy(pos, params)) < 1e-9


# --- force ----------------------------------------------------------------------

def test_force_vanishes_at_native(system):
    params, native = system
    assert np.max(np.abs(force(native.positions, params))) < 1e-7


def test_force_harmonic_bond():
    p = SimParams()
    f = force(np.array([[0.0, 0.0], [2.0, 0.0]]), p)
    assert np.allclose(np.abs(f[:, 0]), 2 * p.bond_k * p.bond_len)
    assert f[0, 0] > 0 and f[1, 0] < 0  # pulled towards each other


def _fd_force(pos, p, h=1e-6):
    g = np.zeros_like(pos)
    for idx in np.ndindex(pos.shape):
        a, b = pos.copy(), pos.copy()
        a[idx] += h
        b[idx] -= h
        g[idx] = -(potential_energy(a, p) - potential_energy(b, p)) / (2 * h)
    return g


def test_force_matches_finite_differences(system):
    params, _ = system
    rng = np.random.default_rng(6)
    worst = 0.0
    for _ in range(100):
        pos = random_chain(rng, 28)
        an = force(pos, params)
        fd = _fd_force(pos, params)
        worst = max(worst, np.linalg.norm(an - fd) / np.linalg.norm(an))
    assert worst < 1e-6


# --- dynamics ---------------------------------------------------------------------

def test_zero_temperature_native_fixed(system):
    params, native = system
    cold = SimParams(**{**params.__dict__, "temperature": 0.0})
    fr = ChainFrame(0, 0, 0, native.positions, 0)
    out = step_langevin(fr, cold, sim_rng(0, 0, 0, 0))
    # the native state is relaxed until every force component is below 1e-8
    assert np.max(np.abs(out.positions - fr.positions)) <= cold.dt / cold.gamma * 1e-8
    assert out.step == 1


def test_zero_temperature_energy_nonincreasing(system):
    params, _ = system
    cold = SimParams(**{**params.__dict__, "temperature": 0.0})
    rng = np.random.default_rng(7)
    fr = ChainFrame(0, 0, 0, random_chain(rng, 28, min_sep=0.95), 0)
    e = potential_energy(fr, cold)
    for _ in range(100):
        fr = step_langevin(fr, cold, rng)
        e_new = potential_energy(fr, cold)
        assert e_new <= e + 1e-12
        e = e_new


def test_langevin_deterministic(system):
    params, native = system

    def traj():
        fr = ChainFrame(0, 0, 0, native.positions, 0)
        rng = sim_rng(11, 0, 0, 0)
        for _ in range(1000):
            fr = step_langevin(fr, params, rng)
        return fr.positions

    assert np.array_equal(traj(), traj())


def test_compiled_integrator_matches_reference_steps(system):
    params, native = system
    fr = ChainFrame(0, 0, 0, native.positions, 0)
    ref_rng = sim_rng(1, 2, 3, 4)
    slow = fr
    for _ in range(50):
        slow = step_langevin(slow, params, ref_rng)
    fast = toy_sim._integrate(fr.positions, 50, params, sim_rng(1, 2, 3, 4))
    assert np.max(np.abs(fast - slow.positions)) < 1e-12


def test_run_segment_counts_and_steps(system):
    _, native = system
    p = SimParams(**{**toy_sim.build_system(validate_config({}))[0].__dict__,
                     "steps_per_segment": 100, "report_interval": 10})
    fr = ChainFrame(3, 5, 40, native.positions, 7)
    seg = run_segment(fr, p, sim_rng(0, 3, 7, 5), native, 2.1)
    assert len(seg) == 10
    assert [e.frame.step for e in seg] == list(range(50, 141, 10))
    for e in seg:
        assert e.frame.sim_id == 3 and e.frame.lineage_id == 7 and e.frame.segment_index == 5
        assert e.contacts == contact_map(e.frame, 2.1)
        assert e.rmsd == rmsd_aligned(e.frame, native)


def test_run_segment_cold_vs_hot(system):
    params, native = system
    base = {**params.__dict__, "steps_per_segment": 400, "report_interval": 40}
    cold = SimParams(**{**base, "temperature": 0.05})
    hot = SimParams(**{**base, "temperature": 1.5})
    fr = ChainFrame(0, 0, 0, native.positions, 0)
    rc = [e.rmsd for e in run_segment(fr, cold, sim_rng(9, 0, 0, 0), native, 2.1)]
    rh = [e.rmsd for e in run_segment(fr, hot, sim_rng(9, 0, 0, 0), native, 2.1)]
    assert max(rc) < min(rh)


def test_run_segment_reproducible(system):
    params, native = system
    fr = ChainFrame(0, 0, 0, toy_sim.extended_chain(28), 0)
    a = run_segment(fr, params, sim_rng(2, 0, 0, 0), native, 2.1)
    b = run_segment(fr, params, sim_rng(2, 0, 0, 0), native, 2.1)
    assert all(x.frame == y.frame and x.rmsd == y.rmsd for x, y in zip(a, b))


# --- features -----------------------------------------------------------------------

def test_contact_map_coincident():
    assert contact_map(np.zeros((6, 2)), 0.5).bits.all()


def test_contact_map_straight_chain_band():
    pos = np.column_stack([np.arange(10.0), np.zeros(10)])
    bits = contact_map(pos, 1.5).bits
    i, j = np.indices(bits.shape)
    assert np.array_equal(bits, np.abs(i - j) <= 1)


def test_contact_map_matches_oracle_and_rigid_invariance():
    rng = np.random.default_rng(8)
    for _ in range(20):
        pos = random_chain(rng, 28)
        cut = rng.uniform(1.0, 4.0)
        oracle = np.array([[np.hypot(*(pos[a] - pos[b])) < cut or a == b for b in range(28)] for a in range(28)])
        got = contact_map(pos, cut)
        assert np.array_equal(got.bits, oracle)
        assert np.array_equal(got.bits, got.bits.T)
        # angle/shift chosen so no pair distance sits within rounding of the cutoff
        assert contact_map(rotate(pos, 90.0, (3.0, -4.0)), cut) == got


def test_rmsd_identity_and_rigid_motion(system):
    _, native = system
    assert rmsd_aligned(native.positions, native) == 0.0
    moved = rotate(native.positions, 37.0, (5.0, -2.0))
    assert rmsd_aligned(moved, native) < 1e-9


def test_rmsd_matches_grid_search():
    rng = np.random.default_rng(9)
    angles = np.linspace(-np.pi, np.pi, 1_000_001)
    c, s = np.cos(angles), np.sin(angles)
    for _ in range(3):
        p = rng.normal(size=(12, 2))
        q = rng.normal(size=(12, 2))
        pc, qc = p - p.mean(0), q - q.mean(0)
        # squared deviation for every angle without materialising rotated copies
        sxx = np.sum(pc * qc)
        cross = np.sum(pc[:, 0] * qc[:, 1] - pc[:, 1] * qc[:, 0])
        msd = (np.sum(pc**2) + np.sum(qc**2) - 2 * (c * sxx + s * cross)) / len(p)
        grid = np.sqrt(np.maximum(msd.min(), 0))
        assert abs(rmsd_aligned(p, NativeReference(q)) - grid) < 1e-6


def test_rmsd_pseudometric():
    rng = np.random.default_rng(10)
    for _ in range(100):
        a, b, c = (rng.normal(size=(8, 2)) for _ in range(3))
        ab = rmsd_aligned(a, NativeReference(b))
        assert ab == pytest.approx(rmsd_aligned(b, NativeReference(a)), abs=1e-12)
        ac = rmsd_aligned(a, NativeReference(c))
        cb = rmsd_aligned(c, NativeReference(b))
        assert ab <= ac + cb + 1e-9
        assert rmsd_aligned(rotate(a, rng.uniform(0, 360), rng.normal(size=2)), NativeReference(a)) < 1e-9


def test_unstable_step_rejected():
    with pytest.raises(ValueError):
        SimParams(dt=0.003, bond_k=100.0)
    with pytest.raises(ValueError):
        SimParams(native_pairs=((0, 2, 1.0),))


def test_mixed_initial_states(system):
    _, native = system
    cfg = validate_config({"initial_state": "MIXED"})
    f0 = toy_sim.initial_frame(cfg, 0, native)
    f1 = toy_sim.initial_frame(cfg, 1, native)
    assert np.array_equal(f0.positions, native.positions)
    assert not np.array_equal(f1.positions, native.positions)
    assert (f0.lineage_id, f1.lineage_id) == (0, 1)
