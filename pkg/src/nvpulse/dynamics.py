"""State/unitary propagation under piecewise-constant controls, dephasing,
and the register protocols (repeated-gate benchmark, entangling sequence,
SWAP storage).
"""

from __future__ import annotations

import io
import weakref
from dataclasses import dataclass, field

import numpy as np
import scipy.optimize

from . import _kernels
from .spinsys import ELECTRON, TWO_PI, electron_op, nv_op
from .tensor import REGISTER_DIMS, basis_ket, embed, kron_all, partial_trace


@dataclass(frozen=True, eq=False)
class SubstepPolicy:
    """Subdivision rule for time-dependent slices.

    ``max_phase``: largest phase advance (rad) of the fastest retained
    rotating term per substep.  ``max_step_norm`` caps ||H||*dt so the
    fixed-order Taylor exponential stays at machine precision.
    """

    max_phase: float = 0.1
    max_step_norm: float = 0.25


DEFAULT_POLICY = SubstepPolicy()


@dataclass(frozen=True, eq=False)
class PulseSequence:
    """Piecewise-constant controls: per slice a duration plus (Omega_k, phi_k)
    for every channel.  Omega is stored in rad/s."""

    durations: np.ndarray
    omega: np.ndarray
    phi: np.ndarray

    def __post_init__(self):
        d = np.atleast_1d(np.asarray(self.durations, dtype=float))
        om = np.atleast_2d(np.asarray(self.omega, dtype=float))
        ph = np.atleast_2d(np.asarray(self.phi, dtype=float))
        if d.ndim != 1 or om.shape != ph.shape or om.shape[0] != d.shape[0]:
            raise ValueError("durations (n,), omega and phi (n, K) shapes must agree")
        if d.size and np.any(d <= 0):
            raise ValueError("slice durations must be positive")
        if not (np.all(np.isfinite(d)) and np.all(np.isfinite(om))
                and np.all(np.isfinite(ph))):
            raise ValueError("controls must be finite")
        object.__setattr__(self, "durations", d)
        object.__setattr__(self, "omega", om)
        object.__setattr__(self, "phi", ph)

    @property
    def n_slices(self):
        return self.durations.shape[0]

    @property
    def n_channels(self):
        return self.omega.shape[1]

    @property
    def total_duration(self):
        return float(self.durations.sum())

    @property
    def iq(self):
        """Complex control variables z = Omega * exp(i phi), (n, K), rad/s."""
        return self.omega * np.exp(1j * self.phi)

    @classmethod
    def from_iq(cls, durations, iq):
        iq = np.atleast_2d(np.asarray(iq, dtype=complex))
        return cls(durations=durations, omega=np.abs(iq), phi=np.angle(iq))

    @classmethod
    def zero(cls, n_channels, duration):
        return cls(durations=np.array([duration]),
                   omega=np.zeros((1, n_channels)), phi=np.zeros((1, n_channels)))

    @classmethod
    def rectangular(cls, n_channels, channel, rabi_hz, duration=None, phase=0.0):
        """Single rectangular slice on one channel; default duration is a pi
        pulse (1 / (2 * rabi))."""
        if duration is None:
            duration = 1.0 / (2.0 * rabi_hz)
        om = np.zeros((1, n_channels))
        ph = np.zeros((1, n_channels))
        om[0, channel] = TWO_PI * rabi_hz
        ph[0, channel] = phase
        return cls(durations=np.array([duration]), omega=om, phi=ph)


def check_amplitudes(seq, channels):
    """Enforce |Omega_k| <= 2pi*max_rabi per channel."""
    for k, ch in enumerate(channels):
        cap = TWO_PI * ch.max_rabi
        worst = np.abs(seq.omega[:, k]).max() if seq.n_slices else 0.0
        if worst > cap * (1 + 1e-12):
            raise ValueError(
                f"channel {k} ({ch.label or ch.carrier}): |Omega| = "
                f"{worst / TWO_PI:.6g} Hz exceeds max_rabi {ch.max_rabi:.6g} Hz"
            )


# ---------------------------------------------------------------------------
# Term tables and propagation
# ---------------------------------------------------------------------------

@dataclass(eq=False)
class _TermTable:
    static: np.ndarray
    rows: np.ndarray
    cols: np.ndarray
    vals: np.ndarray
    ptr: np.ndarray
    freqs: np.ndarray
    chans: np.ndarray
    max_freq: float
    static_norm1: float
    term_norm1: np.ndarray

    @property
    def n_terms(self):
        return self.freqs.shape[0]


_TABLE_CACHE = weakref.WeakKeyDictionary()


def term_table(frame):
    """COO representation of the frame's rotating terms (cached per frame)."""
    tab = _TABLE_CACHE.get(frame)
    if tab is not None:
        return tab
    rows, cols, vals, ptr = [], [], [], [0]
    freqs, chans, norm1 = [], [], []
    for t in frame.terms:
        op = np.asarray(t.operator, dtype=complex)
        r, c = np.nonzero(np.abs(op) > 1e-14 * max(np.abs(op).max(), 1e-300))
        rows.append(r)
        cols.append(c)
        vals.append(op[r, c])
        ptr.append(ptr[-1] + r.size)
        freqs.append(t.frequency)
        chans.append(t.channel)
        norm1.append(np.linalg.norm(op, 1))
    n = frame.dim
    static = np.ascontiguousarray(frame.residual_static, dtype=np.complex128)
    tab = _TermTable(
        static=static,
        rows=np.concatenate(rows).astype(np.int64) if rows else np.zeros(0, np.int64),
        cols=np.concatenate(cols).astype(np.int64) if cols else np.zeros(0, np.int64),
        vals=np.concatenate(vals).astype(np.complex128) if vals else np.zeros(0, np.complex128),
        ptr=np.asarray(ptr, dtype=np.int64),
        freqs=np.asarray(freqs, dtype=np.float64),
        chans=np.asarray(chans, dtype=np.int64),
        max_freq=float(np.max(np.abs(freqs))) if freqs else 0.0,
        static_norm1=float(np.linalg.norm(static, 1)),
        term_norm1=np.asarray(norm1, dtype=float),
    )
    _TABLE_CACHE[frame] = tab
    return tab


def slice_coefficients(table, z_row):
    """Per-term complex coefficients for one slice: z/2 for control terms,
    1 for drift terms."""
    coefs = np.ones(table.n_terms, dtype=np.complex128)
    ctrl = table.chans >= 0
    coefs[ctrl] = 0.5 * z_row[table.chans[ctrl]]
    return coefs


def slice_plan(table, coefs, duration, policy):
    """(nsub, dt, order) for one slice under the substep policy."""
    bound = table.static_norm1 + 2.0 * float(np.abs(coefs) @ table.term_norm1)
    nsub = 1
    if table.max_freq > 0:
        nsub = max(nsub, int(np.ceil(table.max_freq * duration / policy.max_phase)))
    if bound > 0:
        nsub = max(nsub, int(np.ceil(bound * duration / policy.max_step_norm)))
    dt = duration / nsub
    order = _kernels.taylor_order(bound * dt)
    return nsub, dt, order


def _expm_static(h, duration):
    w, v = np.linalg.eigh(h)
    return (v * np.exp(-1j * w * duration)) @ v.conj().T


def _slice_is_static(table, coefs):
    active = np.abs(coefs) > 0
    active[table.chans >= 0] &= np.abs(coefs[table.chans >= 0]) > 0
    rotating = (np.abs(table.freqs) > 0) & (np.abs(coefs) > 0)
    return not np.any(rotating)


def _static_slice_h(table, coefs):
    h = table.static.copy()
    for m in range(table.n_terms):
        if np.abs(coefs[m]) == 0:
            continue
        sl = slice(table.ptr[m], table.ptr[m + 1])
        np.add.at(h, (table.rows[sl], table.cols[sl]), coefs[m] * table.vals[sl])
        np.add.at(h, (table.cols[sl], table.rows[sl]),
                  np.conj(coefs[m] * table.vals[sl]))
    return h


def propagate(frame, seq, policy=None, t0=0.0):
    """Total propagator of a pulse sequence in the given rotating frame.

    Slices whose active terms are all static are exponentiated exactly; any
    slice with active rotating terms is subdivided per the policy and uses
    the midpoint-sampled Hamiltonian exponential per substep.
    """
    policy = policy or DEFAULT_POLICY
    if seq.n_channels != frame.n_channels:
        raise ValueError(
            f"sequence has {seq.n_channels} channels, frame has {frame.n_channels}"
        )
    check_amplitudes(seq, frame.channels)
    table = term_table(frame)
    n = frame.dim
    u = np.eye(n, dtype=np.complex128)
    z = seq.iq
    t = t0
    for s in range(seq.n_slices):
        dur = seq.durations[s]
        coefs = slice_coefficients(table, z[s])
        if _slice_is_static(table, coefs):
            u = _expm_static(_static_slice_h(table, coefs), dur) @ u
        else:
            nsub, dt, order = slice_plan(table, coefs, dur, policy)
            steps = _kernels.step_unitaries(
                table.static, table.rows, table.cols, table.vals, table.ptr,
                table.freqs, coefs, t, dt, nsub, order)
            u = _kernels.chain(steps, u)
        t += dur
    return u


def forward_slices(frame, seq, policy, t0=0.0):
    """Forward pass keeping per-slice substep propagators (for gradients).

    Returns (u_total, slices) where each slices[s] is a dict with the step
    stack, plan, and the cumulative propagator before the slice.
    """
    policy = policy or DEFAULT_POLICY
    table = term_table(frame)
    n = frame.dim
    u = np.eye(n, dtype=np.complex128)
    z = seq.iq
    t = t0
    slices = []
    for s in range(seq.n_slices):
        dur = seq.durations[s]
        coefs = slice_coefficients(table, z[s])
        nsub, dt, order = slice_plan(table, coefs, dur, policy)
        steps = _kernels.step_unitaries(
            table.static, table.rows, table.cols, table.vals, table.ptr,
            table.freqs, coefs, t, dt, nsub, order)
        slices.append({
            "coefs": coefs, "t_start": t, "dt": dt, "nsub": nsub,
            "order": order, "steps": steps, "f_in": u,
        })
        u = _kernels.chain(steps, u)
        t += dur
    return u, slices


# ---------------------------------------------------------------------------
# States and noise
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class DensityMatrix:
    """Density matrix with explicit tensor factor dimensions."""

    matrix: np.ndarray
    dims: tuple

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=complex)
        d = int(np.prod(self.dims))
        if m.shape != (d, d):
            raise ValueError(f"matrix shape {m.shape} does not match dims {self.dims}")
        if np.linalg.norm(m - m.conj().T) > 1e-9 * max(1.0, np.linalg.norm(m)):
            raise ValueError("density matrix must be Hermitian")
        if abs(np.trace(m).real - 1.0) > 1e-9:
            raise ValueError("density matrix must have unit trace")
        if np.linalg.eigvalsh(m).min() < -1e-9:
            raise ValueError("density matrix must be positive semidefinite")
        object.__setattr__(self, "matrix", m)
        object.__setattr__(self, "dims", tuple(self.dims))

    def partial_trace(self, keep):
        keep = sorted(keep)
        return DensityMatrix(
            matrix=partial_trace(self.matrix, self.dims, keep),
            dims=tuple(self.dims[i] for i in keep),
        )

    def expect(self, op):
        return float(np.real(np.trace(op @ self.matrix)))

    def purity(self):
        return float(np.real(np.trace(self.matrix @ self.matrix)))


@dataclass(frozen=True, eq=False)
class NoiseModel:
    """Electron dephasing times (s) and initialization polarization per NV.

    t2_dq is the double-quantum coherence time; single-quantum coherences
    decay at (|dm|/2)^2 / t2_dq.  t2_star is stored as a diagnostic only.
    """

    t2_dq: tuple = (150e-6, 514e-6)
    t2_star: tuple = (27.8e-6, 22.6e-6)
    init_polarization: tuple = (0.97, 0.97)

    def __post_init__(self):
        if any(t <= 0 for t in self.t2_dq) or any(t <= 0 for t in self.t2_star):
            raise ValueError("dephasing times must be positive")
        if any(not 0.0 <= p <= 1.0 for p in self.init_polarization):
            raise ValueError("polarization must lie in [0, 1]")


def _ms_labels(dims):
    """m_S value of each basis index for every spin-1 factor."""
    ms = {3: np.array([1.0, 0.0, -1.0]), 2: np.array([0.0, 0.0])}
    labels = []
    for ax, d in enumerate(dims):
        if d == 3:
            pattern = ms[3]
            before = int(np.prod(dims[:ax])) if ax else 1
            after = int(np.prod(dims[ax + 1:])) if ax + 1 < len(dims) else 1
            labels.append(np.tile(np.repeat(pattern, after), before))
    return labels


def dephasing_rates(dims, t2_list):
    """Pairwise decay-rate matrix: sum_i (|dm_i|/2)^2 / T2_i."""
    labels = _ms_labels(dims)
    if len(labels) != len(t2_list):
        raise ValueError("need one T2 per electron (dim-3) factor")
    d = int(np.prod(dims))
    rate = np.zeros((d, d))
    for lab, t2 in zip(labels, t2_list):
        dm = np.abs(lab[:, None] - lab[None, :])
        rate += (dm / 2.0) ** 2 / t2
    return rate


def apply_dephasing(rho, noise, t, dims=REGISTER_DIMS):
    """Electron pure dephasing for time ``t``: off-diagonals damp as
    exp(-(|dm|/2)^2 t / T2) per NV; populations and nuclear coherences are
    untouched.  Trace and positivity preserving (Sz-Lindblad semigroup)."""
    if t < 0:
        raise ValueError("time must be non-negative")
    wrapped = isinstance(rho, DensityMatrix)
    mat = rho.matrix if wrapped else np.asarray(rho, dtype=complex)
    if t == 0.0:
        return rho
    if wrapped:
        dims = rho.dims
    rate = dephasing_rates(dims, noise.t2_dq[: len(_ms_labels(dims))])
    out = mat * np.exp(-rate * t)
    return DensityMatrix(matrix=out, dims=dims) if wrapped else out


def initial_state(noise=None):
    """Register state for initialization polarization p per NV: electron
    p|0><0| + (1-p)/2 (|+><+| + |-><-|), nuclear spins maximally mixed."""
    pols = noise.init_polarization if noise is not None else (1.0, 1.0)
    factors = []
    for p in pols:
        mat_e = np.diag([(1 - p) / 2.0, p, (1 - p) / 2.0]).astype(complex)
        factors.extend([mat_e, np.eye(2, dtype=complex) / 2.0])
    return DensityMatrix(matrix=kron_all(*factors), dims=REGISTER_DIMS)


def evolve(rho, u):
    mat = rho.matrix if isinstance(rho, DensityMatrix) else rho
    out = u @ mat @ u.conj().T
    if isinstance(rho, DensityMatrix):
        return DensityMatrix(matrix=(out + out.conj().T) / 2, dims=rho.dims)
    return out


def free_propagator(frame, duration, t0=0.0, policy=None):
    """Propagator of the undriven frame over ``duration``."""
    seq = PulseSequence.zero(frame.n_channels, duration)
    return propagate(frame, seq, policy=policy, t0=t0)


# ---------------------------------------------------------------------------
# Repeated-gate benchmark
# ---------------------------------------------------------------------------

@dataclass(eq=False)
class BenchmarkResult:
    counts: np.ndarray
    fidelity_nv1: np.ndarray
    fidelity_nv2: np.ndarray
    fit_nv1: tuple
    fit_nv2: tuple

    @property
    def per_gate_fidelity(self):
        return self.fit_nv1[1]

    @property
    def spectator_fidelity(self):
        return self.fit_nv2[1]


def _fit_decay(counts, fid):
    """Fit F(n) = A f^n + B; returns (A, f, B)."""
    counts = np.asarray(counts, dtype=float)
    fid = np.asarray(fid, dtype=float)
    if np.ptp(fid) < 1e-12:
        return (0.0, 1.0, float(fid.mean()))

    def model(n, a, f, b):
        return a * f ** n + b

    p0 = (max(fid[0] - fid[-1], 1e-3), 0.97, min(fid[-1], fid[0]))
    try:
        popt, _ = scipy.optimize.curve_fit(
            model, counts, fid, p0=p0,
            bounds=([-1.0, 0.0, -1.0], [1.5, 1.0, 1.5]), maxfev=20000)
    except RuntimeError:
        return (0.0, float("nan"), float(fid.mean()))
    return tuple(float(x) for x in popt)


def repeated_gate_benchmark(frame, gate_seq, noise=None, repetitions=17,
                            tau_free=1e-6, policy=None,
                            dephase_during_pulse=True, rho0=None):
    """Apply (gate, free evolution) blocks repeatedly; record the NV1 |+>
    population and NV2 |0> population after every odd gate count and fit
    F(n) = A f^n + B for each."""
    rho = rho0 if rho0 is not None else initial_state(noise)
    proj_plus_a = electron_op(np.diag([1.0, 0.0, 0.0]), "a")
    proj_zero_b = electron_op(np.diag([0.0, 1.0, 0.0]), "b")
    t_gate = gate_seq.total_duration
    counts, f1, f2 = [], [], []
    t = 0.0
    for n in range(1, 2 * repetitions + 2):
        u = propagate(frame, gate_seq, policy=policy, t0=t)
        rho = evolve(rho, u)
        t += t_gate
        if noise is not None and dephase_during_pulse:
            rho = apply_dephasing(rho, noise, t_gate)
        if n % 2 == 1:
            counts.append(n)
            f1.append(rho.expect(proj_plus_a))
            f2.append(rho.expect(proj_zero_b))
        u_free = free_propagator(frame, tau_free, t0=t, policy=policy)
        rho = evolve(rho, u_free)
        t += tau_free
        if noise is not None:
            rho = apply_dephasing(rho, noise, tau_free)
    counts = np.asarray(counts)
    f1 = np.asarray(f1)
    f2 = np.asarray(f2)
    return BenchmarkResult(
        counts=counts, fidelity_nv1=f1, fidelity_nv2=f2,
        fit_nv1=_fit_decay(counts, f1), fit_nv2=_fit_decay(counts, f2),
    )


def benchmark_table(result):
    out = io.StringIO()
    out.write("n,f_nv1,f_nv2\n")
    for n, a, b in zip(result.counts, result.fidelity_nv1, result.fidelity_nv2):
        out.write(f"{n},{a:.17g},{b:.17g}\n")
    return out.getvalue()


# ---------------------------------------------------------------------------
# Entangling protocol
# ---------------------------------------------------------------------------

# Local gates of the entangling sequence, electron basis (+, 0, -).
U1_LOCAL = np.array([[1j, 1, 0], [0, 0, np.sqrt(2)], [-1j, 1, 0]]) / np.sqrt(2)
U2_LOCAL = np.array([[0, 0, 1], [0, 1, 0], [1, 0, 0]], dtype=complex)
U3_LOCAL = np.array([[-1, 0, 1], [0, np.sqrt(2), 0], [1, 0, 1]]) / np.sqrt(2)


def phi_dq_state():
    """|Phi_dq> = (|++> + i|-->)/sqrt(2) on the electron qutrit pair."""
    kp = basis_ket(3, 0)
    km = basis_ket(3, 2)
    return (np.kron(kp, kp) + 1j * np.kron(km, km)) / np.sqrt(2)


def both_electrons(u3):
    """U (x) U on the two electron qutrits, embedded in the register."""
    return embed(np.kron(u3, u3), REGISTER_DIMS, [0, 2])


def dipolar_hamiltonian(model):
    sz_a = electron_op(ELECTRON.sz, "a")
    sz_b = electron_op(ELECTRON.sz, "b")
    return TWO_PI * model.dipolar_coupling * (sz_a @ sz_b)


def manifold_detuning_operator(frame, which="a"):
    """Static detuning generator: the manifold-diagonal part of Sz of one NV,
    i.e. sum_a P_a Sz P_a in the frame decomposition."""
    sz = electron_op(ELECTRON.sz, which)
    out = np.zeros_like(sz)
    for p in frame.decomposition.projectors:
        out += p @ sz @ p
    return (out + out.conj().T) / 2


@dataclass(eq=False)
class EntangleResult:
    rho: DensityMatrix
    rho_electrons: DensityMatrix
    fidelity: float
    tau: float


def entangling_protocol(frame, model, noise=None, tau=None, local_gates="ideal",
                        free_evolution="full", detuning_nv1=0.0, policy=None,
                        rho0=None):
    """U1xU1 -> tau/2 -> U2xU2 (Hahn echo) -> tau/2 -> U3xU3 from the
    initialized register state; returns the electron-pair reduced state and
    its overlap with |Phi_dq>.

    ``free_evolution`` selects the Hamiltonian of the free windows: "full"
    uses the complete static rotating-frame residual (hyperfine and nuclear
    phases included, demonstrably removed by the echo), "dipolar" only the
    secular dipole-dipole term.  ``detuning_nv1`` (rad/s) adds an artificial
    quasi-static detuning on NV1 that the echo must cancel.
    """
    if tau is None:
        tau = 1.0 / (8.0 * model.dipolar_coupling)
    if tau <= 0:
        raise ValueError("tau must be positive")
    if free_evolution == "full":
        h_free = frame.residual_static.copy()
    elif free_evolution == "dipolar":
        h_free = dipolar_hamiltonian(model)
    else:
        raise ValueError("free_evolution must be 'full' or 'dipolar'")
    if detuning_nv1:
        h_free = h_free + detuning_nv1 * manifold_detuning_operator(frame, "a")

    if local_gates == "ideal":
        gates = [both_electrons(u) for u in (U1_LOCAL, U2_LOCAL, U3_LOCAL)]
    else:
        gates = list(local_gates)

    rho = rho0 if rho0 is not None else initial_state(noise)
    u_half = _expm_static(h_free, tau / 2.0)

    def apply_gate(rho, gate, t0):
        if isinstance(gate, PulseSequence):
            u = propagate(frame, gate, policy=policy, t0=t0)
            rho = evolve(rho, u)
            if noise is not None:
                rho = apply_dephasing(rho, noise, gate.total_duration)
            return rho, t0 + gate.total_duration
        return evolve(rho, np.asarray(gate)), t0

    t = 0.0
    rho, t = apply_gate(rho, gates[0], t)
    for gate in gates[1:]:
        rho = evolve(rho, u_half)
        if noise is not None:
            rho = apply_dephasing(rho, noise, tau / 2.0)
        t += tau / 2.0
        rho, t = apply_gate(rho, gate, t)

    rho_e = rho.partial_trace([0, 2])
    phi = phi_dq_state()
    fid = float(np.real(phi.conj() @ rho_e.matrix @ phi))
    return EntangleResult(rho=rho, rho_electrons=rho_e, fidelity=fid, tau=tau)


# ---------------------------------------------------------------------------
# SWAP storage protocol
# ---------------------------------------------------------------------------

def swap_matrix():
    """Partial SWAP on one NV (e (x) n, basis +^, +v, 0^, 0v, -^, -v):
    exchanges |+up> and |-down>, fixes the rest.  Self-inverse."""
    s = np.eye(6, dtype=complex)
    s[0, 0] = 0.0
    s[5, 5] = 0.0
    s[0, 5] = 1.0
    s[5, 0] = 1.0
    return s


PARK_LOCAL = np.array([[1, 0, 0], [0, 0, 1], [0, 1, 0]], dtype=complex)


@dataclass(eq=False)
class SwapResult:
    times: np.ndarray
    efficiency: np.ndarray
    phase: np.ndarray
    ix: np.ndarray
    coherence_before: complex


def swap_protocol(frame, model, storage_times, noise=None, swap="ideal",
                  target_nv="b", park=True, policy=None):
    """Store an electron qubit coherence in the nuclear spin and retrieve it.

    Prepares (|+> + |->)/sqrt(2) (x) |up> on the target NV (other NV in |0>,
    its nucleus mixed), applies the partial SWAP, parks the electron in the
    m_S=0 level during storage (so the nuclear coherence precesses at the
    m_S=0 Larmor frequency and no electron coherence is exposed to
    dephasing), un-parks, swaps back, and reads the |+><-| coherence.

    Returns storage efficiency |c|/|c0|, phase, and the Re(c)/|c0| component
    per storage time.
    """
    axes = {"a": [0, 1], "b": [2, 3]}[target_nv]
    e_axis = axes[0]
    other = "b" if target_nv == "a" else "a"

    psi_e = (basis_ket(3, 0) + basis_ket(3, 2)) / np.sqrt(2)
    rho_e = np.outer(psi_e, psi_e.conj())
    rho_n = np.diag([1.0, 0.0]).astype(complex)
    rho_e_other = np.diag([0.0, 1.0, 0.0]).astype(complex)
    rho_n_other = np.eye(2, dtype=complex) / 2.0
    if target_nv == "a":
        mats = [rho_e, rho_n, rho_e_other, rho_n_other]
    else:
        mats = [rho_e_other, rho_n_other, rho_e, rho_n]
    rho0 = DensityMatrix(matrix=kron_all(*mats), dims=REGISTER_DIMS)

    if isinstance(swap, PulseSequence):
        t_swap = swap.total_duration

        def swap_op(t0):
            return propagate(frame, swap, policy=policy, t0=t0)
    else:
        t_swap = 0.0

        def swap_op(t0):
            return nv_op(swap_matrix(), target_nv)

    park_op = electron_op(PARK_LOCAL, target_nv)
    h_free = frame.residual_static

    def coherence(rho):
        red = rho.partial_trace([e_axis]).matrix
        return complex(red[0, 2])

    c0 = coherence(rho0)
    times = np.asarray(storage_times, dtype=float)
    eff = np.empty_like(times)
    phase = np.empty_like(times)
    ix = np.empty_like(times)
    for i, t_store in enumerate(times):
        t = 0.0
        rho = evolve(rho0, swap_op(t))
        t += t_swap
        if noise is not None and t_swap > 0:
            rho = apply_dephasing(rho, noise, t_swap)
        if park:
            rho = evolve(rho, park_op)
        rho = evolve(rho, _expm_static(h_free, t_store))
        if noise is not None:
            rho = apply_dephasing(rho, noise, t_store)
        t += t_store
        if park:
            rho = evolve(rho, park_op)
        rho = evolve(rho, swap_op(t))
        if noise is not None and t_swap > 0:
            rho = apply_dephasing(rho, noise, t_swap)
        c = coherence(rho)
        eff[i] = abs(c) / abs(c0)
        phase[i] = np.angle(c) - np.angle(c0)
        ix[i] = c.real / abs(c0)
    return SwapResult(times=times, efficiency=eff, phase=phase, ix=ix,
                      coherence_before=c0)


def storage_table(result):
    out = io.StringIO()
    out.write("t,eff,phase\n")
    for t, e, p in zip(result.times, result.efficiency, result.phase):
        out.write(f"{t:.17g},{e:.17g},{p:.17g}\n")
    return out.getvalue()


def fit_oscillation(times, values):
    """Fit values(t) = A cos(w t + p0) + B; returns (A, w, p0, B).

    The initial frequency guess comes from the FFT peak.
    """
    times = np.asarray(times, dtype=float)
    values = np.asarray(values, dtype=float)
    dt = times[1] - times[0]
    spec = np.fft.rfft(values - values.mean())
    freqs = np.fft.rfftfreq(len(values), dt)
    w0 = TWO_PI * freqs[np.argmax(np.abs(spec[1:])) + 1]

    def model(t, a, w, p, b):
        return a * np.cos(w * t + p) + b

    p0 = (0.5 * np.ptp(values), w0, 0.0, values.mean())
    popt, _ = scipy.optimize.curve_fit(model, times, values, p0=p0, maxfev=20000)
    return tuple(float(x) for x in popt)
