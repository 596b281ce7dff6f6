"""Rotating-frame construction with slow/fast term retention.

The interaction picture is defined by U0(t) = exp(+i H0 t); at t = 0 it
coincides with the lab frame.  Every Hamiltonian piece is expanded over the
spectral projectors of H0.  A component of carrier k rotating at
nu = w_k + (w_a - w_b) enters the frame Hamiltonian as

    Omega_k/2 * O * exp(i(nu t + phi_k)) + h.c.

and is kept when s * Omega_max * ||O||_F > |nu| (always for nu = 0).  Fast
components (w_a - w_b >= 0family, i.e. nu >= w_k) must all fail this test;
otherwise the requested maximum Rabi amplitude is rejected.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field

import numpy as np

from .spinsys import TWO_PI, build_control_operator
from .tensor import is_hermitian

DEFAULT_CUTOFF = 300.0
DEFAULT_DEGENERACY_TOL = TWO_PI * 1e3  # rad/s; far below every electron gap


class OmegaMaxError(ValueError):
    """A fast rotating mode survived the retention cutoff."""


@dataclass(frozen=True, eq=False)
class SpectralDecomposition:
    """Eigenfrequencies (ascending, degeneracy-grouped) and their projectors."""

    frequencies: np.ndarray
    projectors: np.ndarray

    @property
    def dim(self):
        return self.projectors.shape[-1]

    def evolution(self, t):
        """U0(t) = exp(+i H0 t)."""
        u = np.zeros((self.dim, self.dim), dtype=complex)
        for w, p in zip(self.frequencies, self.projectors):
            u += np.exp(1j * w * t) * p
        return u


def spectral_decompose(h0, degeneracy_tol=DEFAULT_DEGENERACY_TOL):
    """Group the spectrum of a Hermitian H0 into degenerate clusters.

    Eigenvalues whose consecutive gaps are <= ``degeneracy_tol`` share one
    projector; the returned frequencies are the cluster means, ascending.
    """
    h0 = np.asarray(h0, dtype=complex)
    if not is_hermitian(h0, 1e-10):
        raise ValueError("frame Hamiltonian must be Hermitian")
    w, v = np.linalg.eigh(h0)
    groups = []
    start = 0
    for i in range(1, len(w) + 1):
        if i == len(w) or w[i] - w[i - 1] > degeneracy_tol:
            groups.append((start, i))
            start = i
    freqs = np.array([w[a:b].mean() for a, b in groups])
    projs = np.empty((len(groups), h0.shape[0], h0.shape[0]), dtype=complex)
    for g, (a, b) in enumerate(groups):
        vec = v[:, a:b]
        p = vec @ vec.conj().T
        projs[g] = (p + p.conj().T) / 2
    return SpectralDecomposition(frequencies=freqs, projectors=projs)


def transform_operator(a, dec, norm_tol=1e-13):
    """Projector expansion of ``a``: list of (w_a - w_b, P_a A P_b).

    Summing the returned components reconstructs ``a`` exactly (components
    below ``norm_tol``*||a|| are dropped).
    """
    a = np.asarray(a, dtype=complex)
    if a.shape != (dec.dim, dec.dim):
        raise ValueError("operator dimension does not match the decomposition")
    scale = max(np.linalg.norm(a), 1.0)
    comps = []
    for i, wi in enumerate(dec.frequencies):
        pa = dec.projectors[i] @ a
        for j, wj in enumerate(dec.frequencies):
            comp = pa @ dec.projectors[j]
            if np.linalg.norm(comp) > norm_tol * scale:
                comps.append((wi - wj, comp))
    return comps


@dataclass(frozen=True, eq=False)
class RotatingTerm:
    """One retained rotating component.

    The physical Hamiltonian contribution is
    Omega_k(t)/2 * (operator * e^{i(frequency*t + phi_k)} + h.c.) for control
    terms, and operator * e^{i frequency t} + h.c. for drift terms
    (channel = -1).  A zero-frequency drift component lives in
    ``RotatingFrame.residual_static`` instead.
    """

    frequency: float
    operator: np.ndarray
    channel: int


@dataclass(frozen=True, eq=False)
class TermRecord:
    """Audit entry for the frame dump: one frequency group of one channel."""

    channel: int
    frequency: float
    norm: float
    retained: bool


@dataclass(frozen=True, eq=False)
class RotatingFrame:
    """Retained rotating-frame Hamiltonian of a driven register."""

    h0: np.ndarray
    decomposition: SpectralDecomposition
    residual_static: np.ndarray
    terms: tuple
    cutoff: float
    channels: tuple
    control_ops: tuple
    audit: tuple = field(default=(), repr=False)

    @property
    def dim(self):
        return self.residual_static.shape[0]

    @property
    def n_channels(self):
        return len(self.channels)

    def max_rotation(self):
        """Largest retained |frequency| (rad/s); 0 for a static frame."""
        if not self.terms:
            return 0.0
        return max(abs(t.frequency) for t in self.terms)

    def static_only(self):
        """Frame with every non-static term dropped (phase-1 optimizer model)."""
        kept = tuple(t for t in self.terms if t.frequency == 0.0)
        return RotatingFrame(
            h0=self.h0,
            decomposition=self.decomposition,
            residual_static=self.residual_static,
            terms=kept,
            cutoff=self.cutoff,
            channels=self.channels,
            control_ops=self.control_ops,
            audit=self.audit,
        )

    def observable_drift(self, obs, t):
        """||U0(t) O U0(t)^dag - O||_F, the frame-induced observable wobble."""
        u0 = self.decomposition.evolution(t)
        return float(np.linalg.norm(u0 @ obs @ u0.conj().T - obs))


def _group_components(entries, tol):
    """Group (frequency, operator) entries whose frequencies agree within tol."""
    entries = sorted(entries, key=lambda e: e[0])
    groups = []
    for freq, op in entries:
        if groups and freq - groups[-1][0][-1] <= tol:
            groups[-1][0].append(freq)
            groups[-1][1].append(op)
        else:
            groups.append(([freq], [op]))
    out = []
    for freqs, ops in groups:
        out.append((float(np.mean(freqs)), sum(ops)))
    return out


def build_rotating_frame(
    h_static,
    h0,
    channels,
    control_ops,
    cutoff=DEFAULT_CUTOFF,
    degeneracy_tol=DEFAULT_DEGENERACY_TOL,
    global_max_rabi=False,
):
    """Construct the retained rotating frame for ``h_static`` driven through
    ``channels`` (control operators already built for the same register).

    The drift H - H0 keeps its static components in ``residual_static``; its
    rotating components pass the amplitude-to-frequency test
    cutoff * ||comp||_F > |w| with their own norm as the amplitude.  Control
    components use cutoff * Omega_max * ||comp||_F > |nu|, with Omega_max per
    channel (or the global maximum when ``global_max_rabi``).
    """
    if cutoff <= 0:
        raise ValueError("cutoff must be positive")
    h_static = np.asarray(h_static, dtype=complex)
    dec = spectral_decompose(h0, degeneracy_tol)
    n = dec.dim

    audit = []
    terms = []

    # Drift: static part plus any slow rotating remnants.
    residual = np.zeros((n, n), dtype=complex)
    drift_entries = transform_operator(h_static - h0, dec)
    for freq, op in _group_components(drift_entries, degeneracy_tol):
        norm = float(np.linalg.norm(op))
        if abs(freq) <= degeneracy_tol:
            residual += op
            audit.append(TermRecord(-1, freq, norm, True))
            continue
        if freq < 0:
            continue  # represented by the +freq partner's h.c.
        retained = cutoff * norm > abs(freq)
        audit.append(TermRecord(-1, freq, norm, retained))
        if retained:
            terms.append(RotatingTerm(frequency=freq, operator=op, channel=-1))
    residual = (residual + residual.conj().T) / 2

    if global_max_rabi and channels:
        omega_caps = [TWO_PI * max(ch.max_rabi for ch in channels)] * len(channels)
    else:
        omega_caps = [TWO_PI * ch.max_rabi for ch in channels]

    for k, (ch, cop) in enumerate(zip(channels, control_ops)):
        w_k = TWO_PI * ch.carrier
        entries = [(delta + w_k, op) for delta, op in transform_operator(cop.matrix, dec)]
        for nu, op in _group_components(entries, degeneracy_tol):
            norm = float(np.linalg.norm(op))
            if norm < 1e-12:
                continue
            resonant = abs(nu) <= degeneracy_tol
            retained = resonant or (cutoff * omega_caps[k] * norm > abs(nu))
            fast = nu >= w_k - degeneracy_tol
            audit.append(TermRecord(k, nu, norm, retained and not fast))
            if retained and fast:
                raise OmegaMaxError(
                    f"channel {k} ({ch.label or ch.carrier:.6g} Hz): fast mode at "
                    f"{nu / TWO_PI:.6g} Hz survives the cutoff; reduce max_rabi "
                    f"below {abs(nu) / (cutoff * norm) / TWO_PI:.4g} Hz"
                )
            if retained:
                nu = 0.0 if resonant else nu
                terms.append(RotatingTerm(frequency=nu, operator=op, channel=k))

    return RotatingFrame(
        h0=np.asarray(h0, dtype=complex),
        decomposition=dec,
        residual_static=residual,
        terms=tuple(terms),
        cutoff=cutoff,
        channels=tuple(channels),
        control_ops=tuple(control_ops),
        audit=tuple(audit),
    )


def register_frame(model, channels, **kwargs):
    """Rotating frame of a RegisterModel: H0 = electron Zeeman + zero-field."""
    from .spinsys import build_frame_h0, build_register

    ops = tuple(build_control_operator(ch, model) for ch in channels)
    return build_rotating_frame(
        build_register(model), build_frame_h0(model), channels, ops, **kwargs
    )


def lab_frame(h_static, channels, control_ops):
    """Trivial frame (H0 = 0): exact lab-frame dynamics, no term dropped.

    Each carrier contributes a single term at its carrier frequency, which
    reproduces Omega_k C_k cos(w_k t + phi_k) exactly.
    """
    h_static = np.asarray(h_static, dtype=complex)
    n = h_static.shape[0]
    dec = SpectralDecomposition(
        frequencies=np.zeros(1), projectors=np.eye(n, dtype=complex)[None, :, :]
    )
    terms = []
    for k, (ch, cop) in enumerate(zip(channels, control_ops)):
        terms.append(
            RotatingTerm(frequency=TWO_PI * ch.carrier, operator=cop.matrix, channel=k)
        )
    return RotatingFrame(
        h0=np.zeros((n, n), dtype=complex),
        decomposition=dec,
        residual_static=h_static,
        terms=tuple(terms),
        cutoff=np.inf,
        channels=tuple(channels),
        control_ops=tuple(control_ops),
        audit=(),
    )


def frame_hamiltonian_at(frame, controls, t):
    """Frame Hamiltonian at time ``t`` for per-channel controls.

    ``controls`` is a pair of arrays (omega, phi), one entry per channel,
    omega in rad/s.
    """
    omega, phi = controls
    omega = np.asarray(omega, dtype=float)
    phi = np.asarray(phi, dtype=float)
    if omega.shape != (frame.n_channels,) or phi.shape != (frame.n_channels,):
        raise ValueError("controls must provide one (omega, phi) per channel")
    h = frame.residual_static.astype(complex).copy()
    for term in frame.terms:
        if term.channel < 0:
            c = np.exp(1j * term.frequency * t)
        else:
            c = 0.5 * omega[term.channel] * np.exp(
                1j * (term.frequency * t + phi[term.channel])
            )
        h += c * term.operator + np.conj(c) * term.operator.conj().T
    return h


def dump_terms(frame):
    """Plain-text audit table of all frequency groups (retained or not)."""
    out = io.StringIO()
    out.write(f"# rotating-frame terms, cutoff s = {frame.cutoff:g}\n")
    out.write("# channel  frequency_hz           frob_norm       retained\n")
    for rec in sorted(frame.audit, key=lambda r: (r.channel, r.frequency)):
        label = "drift" if rec.channel < 0 else str(rec.channel)
        out.write(
            f"{label:>7}  {rec.frequency / TWO_PI:+.9e}  {rec.norm:.8e}  "
            f"{'yes' if rec.retained else 'no'}\n"
        )
    return out.getvalue()
