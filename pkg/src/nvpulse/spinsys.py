"""Spin operators, single-NV and two-NV register Hamiltonians, control operators.

Conventions
-----------
* All Hamiltonians are stored in angular frequency units (rad/s); every
  user-facing parameter is in Hz (or mT for fields) and is multiplied by 2*pi
  at construction time.
* Spin matrices are dimensionless, quantized along each NV's own symmetry
  axis, with basis ordering m = +s ... -s (electron: +1, 0, -1).
* Gyromagnetic ratios are signed, in Hz/T.  gamma_e < 0 for the electron and
  gamma_n < 0 for 15N.
* Register factor order is e_A, n_A, e_B, n_B (dims 3*2*3*2 = 36).
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field, replace

import numpy as np

from .tensor import REGISTER_DIMS, embed, is_hermitian

TWO_PI = 2.0 * np.pi

# Free-electron value; the NV g-factor deviates by <0.1%.
GAMMA_E_HZ_PER_T = -2.802495e10
# 15N nuclear gyromagnetic ratio.
GAMMA_N15_HZ_PER_T = -4.3156e6

ZERO_FIELD_SPLITTING_HZ = 2.87e9
HYPERFINE_XX_HZ = 3.65e6
HYPERFINE_ZZ_HZ = 3.03e6
DIPOLAR_HZ = 4.93e3
B0_MAGNITUDE_T = 3.41e-3
# Polar angles of the static field to the two NV axes (units of pi).
THETA_A_PI = 0.133
THETA_B_PI = 0.695

AXIS_A = np.array([1.0, 1.0, 1.0]) / np.sqrt(3.0)
AXIS_B = np.array([-1.0, 1.0, -1.0]) / np.sqrt(3.0)


@dataclass(frozen=True, eq=False)
class SpinOperators:
    """Dimensionless angular-momentum matrices for a single spin."""

    spin: float
    sx: np.ndarray
    sy: np.ndarray
    sz: np.ndarray

    @property
    def dim(self):
        return int(round(2 * self.spin + 1))

    def along(self, direction):
        """Spin component along a 3-vector (not necessarily unit)."""
        d = np.asarray(direction, dtype=float)
        return d[0] * self.sx + d[1] * self.sy + d[2] * self.sz


def spin_operators(spin):
    """Spin matrices for spin 1/2 or 1, basis ordered m = +s ... -s."""
    if spin not in (0.5, 1.0, 1):
        raise ValueError(f"unsupported spin magnitude {spin}; expected 1/2 or 1")
    spin = float(spin)
    dim = int(round(2 * spin + 1))
    m = spin - np.arange(dim)
    sz = np.diag(m).astype(complex)
    sp = np.zeros((dim, dim), dtype=complex)
    for k in range(1, dim):
        sp[k - 1, k] = np.sqrt(spin * (spin + 1) - m[k] * (m[k] + 1))
    sx = (sp + sp.conj().T) / 2
    sy = (sp - sp.conj().T) / 2j
    return SpinOperators(spin=spin, sx=sx, sy=sy, sz=sz)


ELECTRON = spin_operators(1.0)
NUCLEUS = spin_operators(0.5)


def _orthonormal_frame(axis):
    """Rows (x, y, z) of an NV-frame basis with z along ``axis``.

    The transverse axes are a gauge choice; the axially symmetric Hamiltonian
    does not depend on it.
    """
    z = np.asarray(axis, dtype=float)
    ref = np.array([1.0, 0.0, 0.0]) if abs(z[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    x = ref - z * (ref @ z)
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    return np.vstack([x, y, z])


@dataclass(frozen=True, eq=False)
class NvParams:
    """Physical parameters of one 15NV center.

    ``axis`` is the symmetry axis in the shared crystal frame and must be a
    unit vector.  The hyperfine tensor is diagonal in the NV frame with
    Axx = Ayy (axially symmetric).
    """

    axis: np.ndarray
    zero_field_splitting: float = ZERO_FIELD_SPLITTING_HZ
    hyperfine_xx: float = HYPERFINE_XX_HZ
    hyperfine_zz: float = HYPERFINE_ZZ_HZ
    gyro_e: float = GAMMA_E_HZ_PER_T
    gyro_n: float = GAMMA_N15_HZ_PER_T

    def __post_init__(self):
        axis = np.asarray(self.axis, dtype=float)
        if abs(np.linalg.norm(axis) - 1.0) > 1e-12:
            raise ValueError("NV axis must be a unit vector (within 1e-12)")
        object.__setattr__(self, "axis", axis)

    def frame(self):
        return _orthonormal_frame(self.axis)

    def field_in_frame(self, b0):
        b0 = np.asarray(b0, dtype=float)
        if not np.all(np.isfinite(b0)):
            raise ValueError("static field must be finite")
        return self.frame() @ b0

    def electron_larmor(self, b0):
        """|omega_e|/2pi in Hz for the given field (T)."""
        return abs(self.gyro_e) * np.linalg.norm(b0)

    def nuclear_larmor(self, b0):
        """Bare |omega_N|/2pi in Hz for the given field (T)."""
        return abs(self.gyro_n) * np.linalg.norm(b0)

    def ms0_larmor(self, b0):
        """Effective m_S=0 nuclear precession frequency omega_L/2pi (Hz).

        Obtained by diagonalizing the full 6x6 Hamiltonian and taking the gap
        of the m_S=0 doublet; the electron admixture enhancement is therefore
        contained in the spectrum rather than entered by hand.
        """
        freqs, ms = single_nv_levels(self, b0)
        sel = np.abs(ms) < 0.5
        pair = np.sort(freqs[sel])
        return float(pair[1] - pair[0])

    def enhancement(self, b0):
        """Enhancement factor eta defined through
        omega_L = |gamma_n| sqrt(B_par^2 + eta*B_perp^2)."""
        b = self.field_in_frame(b0)
        b_par, b_perp2 = b[2], b[0] ** 2 + b[1] ** 2
        if b_perp2 == 0.0:
            return 1.0
        wl = self.ms0_larmor(b0) / abs(self.gyro_n)
        return float((wl ** 2 - b_par ** 2) / b_perp2)


def build_single_nv(params, b0):
    """Single-NV Hamiltonian (6x6, rad/s) in the NV frame of ``params.axis``.

    H/hbar = 2pi*D*Sz^2 + w_e u0.S + w_N u0.I + 2pi sum_k A_kk S_k I_k with
    w_i = -2pi*gamma_i*|B0| and u0 the field direction in the NV frame.
    """
    b = params.field_in_frame(b0)
    svec = [embed(op, (3, 2), [0]) for op in (ELECTRON.sx, ELECTRON.sy, ELECTRON.sz)]
    ivec = [embed(op, (3, 2), [1]) for op in (NUCLEUS.sx, NUCLEUS.sy, NUCLEUS.sz)]
    h = TWO_PI * params.zero_field_splitting * (svec[2] @ svec[2])
    for k in range(3):
        h = h - TWO_PI * params.gyro_e * b[k] * svec[k]
        h = h - TWO_PI * params.gyro_n * b[k] * ivec[k]
    a_diag = (params.hyperfine_xx, params.hyperfine_xx, params.hyperfine_zz)
    for k in range(3):
        h = h + TWO_PI * a_diag[k] * (svec[k] @ ivec[k])
    return (h + h.conj().T) / 2


def single_nv_levels(params, b0):
    """Eigenfrequencies (Hz) of the 6x6 Hamiltonian with their <Sz> labels."""
    h = build_single_nv(params, b0)
    w, v = np.linalg.eigh(h)
    sz = embed(ELECTRON.sz, (3, 2), [0])
    ms = np.real(np.einsum("ij,jk,ki->i", v.conj().T, sz, v))
    return w / TWO_PI, ms


def odmr_hyperfine_splitting(params, b0, manifold=-1):
    """Gap (Hz) of the hyperfine doublet inside the m_S=``manifold`` manifold."""
    freqs, ms = single_nv_levels(params, b0)
    sel = np.abs(ms - manifold) < 0.5
    pair = np.sort(freqs[sel])
    return float(pair[1] - pair[0])


@dataclass(frozen=True, eq=False)
class RegisterModel:
    """Two coupled NV centers in a common static field.

    The dipolar interaction is reduced to its secular part
    2pi*nu_dip*Sz_A*Sz_B; the separation is informational only.
    """

    nv_a: NvParams
    nv_b: NvParams
    static_field: np.ndarray
    dipolar_coupling: float = DIPOLAR_HZ
    separation: float = 25e-9

    def __post_init__(self):
        b0 = np.asarray(self.static_field, dtype=float)
        if not np.all(np.isfinite(b0)):
            raise ValueError("static field must be finite")
        object.__setattr__(self, "static_field", b0)

    @property
    def dims(self):
        return REGISTER_DIMS

    @property
    def dim(self):
        return 36

    def nv(self, which):
        return {"a": self.nv_a, "b": self.nv_b}[which]


def _nv_axes(which):
    return {"a": [0, 1], "b": [2, 3]}[which]


def electron_op(op3, which):
    """Embed a 3x3 electron operator of NV ``which`` into the register."""
    ax = _nv_axes(which)[0]
    return embed(op3, REGISTER_DIMS, [ax])


def nv_op(op6, which):
    """Embed a 6x6 single-NV operator of NV ``which`` into the register."""
    return embed(op6, REGISTER_DIMS, _nv_axes(which))


def build_register(model):
    """Full 36x36 register Hamiltonian (rad/s):
    H_A + H_B + 2pi*nu_dip*(Sz_A Sz_B)."""
    h = nv_op(build_single_nv(model.nv_a, model.static_field), "a")
    h = h + nv_op(build_single_nv(model.nv_b, model.static_field), "b")
    h = h + TWO_PI * model.dipolar_coupling * (
        electron_op(ELECTRON.sz, "a") @ electron_op(ELECTRON.sz, "b")
    )
    return (h + h.conj().T) / 2


def build_frame_h0(model):
    """Electron Zeeman plus zero-field splitting terms of both NVs (36x36,
    rad/s); this is the rotating-frame generator used for pulse synthesis."""
    h0 = np.zeros((36, 36), dtype=complex)
    for which in ("a", "b"):
        params = model.nv(which)
        b = params.field_in_frame(model.static_field)
        h3 = TWO_PI * params.zero_field_splitting * (ELECTRON.sz @ ELECTRON.sz)
        h3 = h3 - TWO_PI * params.gyro_e * (
            b[0] * ELECTRON.sx + b[1] * ELECTRON.sy + b[2] * ELECTRON.sz
        )
        h0 = h0 + electron_op(h3, which)
    return (h0 + h0.conj().T) / 2


def transition_frequencies(model, which):
    """Hyperfine-pair center frequencies (Hz) of the 0->+ and 0->- electron
    transitions of one NV, computed from the full single-NV spectrum."""
    freqs, ms = single_nv_levels(model.nv(which), model.static_field)
    centers = {m: np.mean(freqs[np.abs(ms - m) < 0.5]) for m in (-1, 0, 1)}
    return {"+": float(centers[1] - centers[0]), "-": float(centers[-1] - centers[0])}


@dataclass(frozen=True, eq=False)
class ControlChannel:
    """One microwave carrier.

    ``max_rabi`` is the calibrated maximum driving Rabi frequency (Hz).
    ``norm_nv`` names the NV whose axis defines the |u_perp| normalization of
    the control operator (the NV the carrier addresses).
    """

    carrier: float
    polarization: np.ndarray
    max_rabi: float
    phase_reference: float = 0.0
    label: str = ""
    norm_nv: str = "a"

    def __post_init__(self):
        if self.carrier < 0:
            raise ValueError("carrier frequency must be >= 0")
        u = np.asarray(self.polarization, dtype=float)
        if abs(np.linalg.norm(u) - 1.0) > 1e-9:
            raise ValueError("polarization must be a unit vector")
        object.__setattr__(self, "polarization", u)
        if self.max_rabi <= 0:
            raise ValueError("max_rabi must be positive")


@dataclass(frozen=True, eq=False)
class ControlOperator:
    """Hermitian control operator C_k with its field-to-Rabi scale.

    The drive Hamiltonian is H_k(t) = Omega_k(t) * C_k * cos(w_k t + phi_k)
    with Omega_k = -2pi*gamma_e*B_k*|u_perp|/sqrt(2)  (rad/s).
    """

    matrix: np.ndarray
    rabi_per_tesla: float


def perpendicular_norm(channel, params):
    """|u_perp|: the component of the polarization perpendicular to the NV axis."""
    u = channel.polarization
    z = params.axis
    u_perp = u - z * (u @ z)
    return float(np.linalg.norm(u_perp))


def build_control_operator(channel, model):
    """Control operator for one carrier over the whole register.

    C_k = sqrt(2)/|u_perp| * sum_NV u_k . (S_NV + (gamma_n/gamma_e) I_NV),
    each NV term expressed in its own frame.  The normalization uses the NV
    named by ``channel.norm_nv`` so that the resonant electron matrix elements
    <0|C|+-> of that NV have unit magnitude.
    """
    ref = model.nv(channel.norm_nv)
    u_perp = perpendicular_norm(channel, ref)
    if u_perp < 1e-12:
        raise ValueError(
            "polarization is parallel to the NV axis; |u_perp| = 0 leaves the "
            "Rabi normalization undefined"
        )
    c = np.zeros((36, 36), dtype=complex)
    for which in ("a", "b"):
        params = model.nv(which)
        u_frame = params.frame() @ channel.polarization
        ratio = params.gyro_n / params.gyro_e
        op6 = ELECTRON_IN_6["s"].along(u_frame) + ratio * ELECTRON_IN_6["i"].along(u_frame)
        c = c + nv_op(op6, which)
    c = np.sqrt(2.0) / u_perp * c
    c = (c + c.conj().T) / 2
    rabi_per_tesla = -model.nv(channel.norm_nv).gyro_e * u_perp / np.sqrt(2.0)
    return ControlOperator(matrix=c, rabi_per_tesla=rabi_per_tesla)


class _EmbeddedSpin:
    def __init__(self, ops, axes):
        self.sx = embed(ops.sx, (3, 2), axes)
        self.sy = embed(ops.sy, (3, 2), axes)
        self.sz = embed(ops.sz, (3, 2), axes)

    def along(self, direction):
        d = np.asarray(direction, dtype=float)
        return d[0] * self.sx + d[1] * self.sy + d[2] * self.sz


ELECTRON_IN_6 = {"s": _EmbeddedSpin(ELECTRON, [0]), "i": _EmbeddedSpin(NUCLEUS, [1])}


def rabi_probability(omega, delta, t):
    """Spin-flip probability Omega^2/(Omega^2+Delta^2) sin^2(sqrt(...)*t/2).

    ``omega`` and ``delta`` are angular frequencies (rad/s).
    """
    t = np.asarray(t, dtype=float)
    if np.any(t < 0):
        raise ValueError("time must be non-negative")
    w2 = omega ** 2 + delta ** 2
    if w2 == 0.0:
        return np.zeros_like(t) if t.ndim else 0.0
    p = (omega ** 2 / w2) * np.sin(np.sqrt(w2) * t / 2.0) ** 2
    return p if t.ndim else float(p)


def field_direction_from_angles(theta_a_pi=THETA_A_PI, theta_b_pi=THETA_B_PI):
    """Unit field direction reproducing the given polar angles to both NV axes.

    Only the two polar angles are physical (the axially symmetric Hamiltonians
    are gauge invariant under rotations about each NV axis); of the two
    solutions the one with the larger x component is returned.
    """
    ca = np.cos(theta_a_pi * np.pi)
    cb = np.cos(theta_b_pi * np.pi)
    # axes (1,1,1)/sqrt3 and (-1,1,-1)/sqrt3: b.nA = ca, b.nB = cb
    by = (ca + cb) * np.sqrt(3.0) / 2.0
    s = ca * np.sqrt(3.0) - by  # bx + bz
    prod = (s ** 2 - (1.0 - by ** 2)) / 2.0
    disc = s ** 2 - 4.0 * prod
    if disc < 0:
        raise ValueError("no field direction satisfies the requested angles")
    bx = (s + np.sqrt(disc)) / 2.0
    return np.array([bx, by, s - bx])


def default_register():
    """The reference two-NV register with its four microwave channels.

    Geometry, couplings and coherence parameters follow the measured pair:
    axes [111] and [-11-1], |B0| = 3.41 mT at 0.133pi / 0.695pi to the axes,
    nu_dip = 4.93 kHz.  Carriers sit at the hyperfine-pair centers of each
    0->+ / 0->- transition.  max_rabi = 1 MHz keeps every fast rotating-frame
    mode below the s = 300 retention cutoff.
    """
    nv_a = NvParams(axis=AXIS_A)
    nv_b = NvParams(axis=AXIS_B)
    b0 = B0_MAGNITUDE_T * field_direction_from_angles()
    model = RegisterModel(nv_a=nv_a, nv_b=nv_b, static_field=b0)
    pol = np.array([0.0, 0.0, 1.0])
    channels = []
    for which in ("a", "b"):
        trans = transition_frequencies(model, which)
        for sign in ("+", "-"):
            channels.append(
                ControlChannel(
                    carrier=trans[sign],
                    polarization=pol,
                    max_rabi=1.0e6,
                    label=f"{which}{sign}",
                    norm_nv=which,
                )
            )
    return model, channels


# ---------------------------------------------------------------------------
# Register description file (TOML): frequencies in Hz, fields in mT, vectors
# only (no angles).
# ---------------------------------------------------------------------------

def _fmt(x):
    return repr(float(x))


def _fmt_vec(v):
    return "[" + ", ".join(_fmt(x) for x in v) + "]"


def save_register(model, channels, path):
    out = io.StringIO()
    for name, nv in (("nv_a", model.nv_a), ("nv_b", model.nv_b)):
        out.write(f"[{name}]\n")
        out.write(f"axis = {_fmt_vec(nv.axis)}\n")
        out.write(f"zero_field_splitting_hz = {_fmt(nv.zero_field_splitting)}\n")
        out.write(f"hyperfine_xx_hz = {_fmt(nv.hyperfine_xx)}\n")
        out.write(f"hyperfine_zz_hz = {_fmt(nv.hyperfine_zz)}\n")
        out.write(f"gyro_e_hz_per_t = {_fmt(nv.gyro_e)}\n")
        out.write(f"gyro_n_hz_per_t = {_fmt(nv.gyro_n)}\n\n")
    out.write("[field]\n")
    out.write(f"b0_mt = {_fmt_vec(model.static_field * 1e3)}\n\n")
    out.write("[coupling]\n")
    out.write(f"nu_dip_hz = {_fmt(model.dipolar_coupling)}\n")
    out.write(f"separation_m = {_fmt(model.separation)}\n\n")
    for ch in channels:
        out.write("[[channels]]\n")
        out.write(f'label = "{ch.label}"\n')
        out.write(f"carrier_hz = {_fmt(ch.carrier)}\n")
        out.write(f"polarization = {_fmt_vec(ch.polarization)}\n")
        out.write(f"max_rabi_hz = {_fmt(ch.max_rabi)}\n")
        out.write(f"phase_reference_rad = {_fmt(ch.phase_reference)}\n")
        out.write(f'norm_nv = "{ch.norm_nv}"\n\n')
    with open(path, "w") as fh:
        fh.write(out.getvalue())


def load_register(path):
    """Load a register description file; returns (RegisterModel, channels)."""
    try:
        import tomllib as toml
    except ModuleNotFoundError:
        import tomli as toml
    with open(path, "rb") as fh:
        data = toml.load(fh)

    def _nv(section):
        axis = np.asarray(section["axis"], dtype=float)
        axis = axis / np.linalg.norm(axis)
        return NvParams(
            axis=axis,
            zero_field_splitting=float(section["zero_field_splitting_hz"]),
            hyperfine_xx=float(section["hyperfine_xx_hz"]),
            hyperfine_zz=float(section["hyperfine_zz_hz"]),
            gyro_e=float(section["gyro_e_hz_per_t"]),
            gyro_n=float(section["gyro_n_hz_per_t"]),
        )

    try:
        model = RegisterModel(
            nv_a=_nv(data["nv_a"]),
            nv_b=_nv(data["nv_b"]),
            static_field=np.asarray(data["field"]["b0_mt"], dtype=float) * 1e-3,
            dipolar_coupling=float(data["coupling"]["nu_dip_hz"]),
            separation=float(data["coupling"].get("separation_m", 25e-9)),
        )
        channels = []
        for ch in data.get("channels", []):
            pol = np.asarray(ch["polarization"], dtype=float)
            pol = pol / np.linalg.norm(pol)
            channels.append(
                ControlChannel(
                    carrier=float(ch["carrier_hz"]),
                    polarization=pol,
                    max_rabi=float(ch["max_rabi_hz"]),
                    phase_reference=float(ch.get("phase_reference_rad", 0.0)),
                    label=str(ch.get("label", "")),
                    norm_nv=str(ch.get("norm_nv", "a")),
                )
            )
    except KeyError as exc:
        raise ValueError(f"register file {path}: missing field {exc}") from exc
    return model, channels
