"""Quasi-periodic Helmholtz lattice sums on the unit cubic lattice.

Central objects are the free-space kernel

    G_k(x) = -exp(ik|x|) / (4 pi |x|),

the quasi-periodic kernel defined by the mode series

    G(alpha, k; x) = sum_n exp(i q_n . x) / (k^2 - |q_n|^2),   q_n = 2 pi n + alpha,

and the family of absolutely-convergent auxiliary sums

    F_m(x) = sum_n exp(i q_n . x) / |q_n|^(2m),   m >= 1,

in terms of which  G(alpha, 0) = -F_1  and the coefficient of k^(2l) in the
small-k expansion of G(alpha, k) is -F_(l+1).

Every production evaluation uses an exponentially convergent split of F_m
(or of G directly, for general k) into a Gaussian-filtered mode sum plus an
image sum of radial profiles built from upper incomplete gamma functions of
half-integer order.  The raw truncated mode series converges only like a
low power of the cutoff and is kept as the literal reference definition; an
independently derived window-extrapolation oracle (`spectral_sum_extrapolated`)
supplies high-accuracy reference values for tests.

Units: lattice constant 1, cell Y = [-1/2, 1/2]^3.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import erf, erfc, erfi, gamma as gamma_fn, wofz

from .errors import ResonanceError

SQRT_PI = math.sqrt(math.pi)

# Relative margin below which a mode denominator k^2 - |q|^2 counts as resonant.
RESONANCE_RTOL = 1e-10


# ---------------------------------------------------------------------------
# Bloch vectors and kernel specification


def wrap_bloch(alpha) -> np.ndarray:
    """Wrap quasi-momentum components to the canonical interval (-pi, pi].

    The corner (pi, pi, pi) is a fixed point; components at -pi map to +pi so
    equivalent corners compare equal after wrapping.
    """
    a = np.asarray(alpha, dtype=float)
    return np.pi - np.mod(np.pi - a, 2.0 * np.pi)


@dataclass(frozen=True)
class BlochVector:
    """Validated quasi-momentum in the first Brillouin zone of the unit lattice."""

    components: tuple[float, float, float]

    def __post_init__(self):
        arr = np.asarray(self.components, dtype=float)
        if arr.shape != (3,) or not np.all(np.isfinite(arr)):
            raise ValueError(f"quasi-momentum must be 3 finite components, got {self.components}")
        object.__setattr__(self, "components", tuple(float(v) for v in arr))

    @classmethod
    def wrapped(cls, alpha) -> "BlochVector":
        return cls(tuple(wrap_bloch(alpha)))

    def as_array(self) -> np.ndarray:
        return np.asarray(self.components, dtype=float)

    @property
    def norm(self) -> float:
        return float(np.linalg.norm(self.components))


@dataclass(frozen=True)
class KernelSpec:
    """Quasi-momentum, wavenumber, and summation controls for one kernel.

    eta is the Ewald-type split parameter (Gaussian filter exp(-|q|^2/(4 eta^2))
    on the mode side); mode_cutoff / image_cutoff bound the filtered mode sum
    and the image sum; spectral_cutoff bounds the raw reference series.
    """

    alpha: tuple[float, float, float]
    k: float = 0.0
    eta: float = SQRT_PI
    mode_cutoff: int = 8
    image_cutoff: int = 3
    spectral_cutoff: int = 60

    def __post_init__(self):
        arr = np.asarray(self.alpha, dtype=float)
        if arr.shape != (3,) or not np.all(np.isfinite(arr)):
            raise ValueError(f"alpha must be 3 finite components, got {self.alpha}")
        object.__setattr__(self, "alpha", tuple(float(v) for v in arr))
        if self.eta <= 0:
            raise ValueError("eta must be positive")

    @property
    def t0(self) -> float:
        """Split parameter in heat-kernel form, t0 = 1/(4 eta^2)."""
        return 1.0 / (4.0 * self.eta**2)

    def alpha_array(self) -> np.ndarray:
        return np.asarray(self.alpha, dtype=float)

    def with_k(self, k: float) -> "KernelSpec":
        return KernelSpec(self.alpha, float(k), self.eta, self.mode_cutoff,
                          self.image_cutoff, self.spectral_cutoff)


def corner_alpha() -> np.ndarray:
    """The quasi-momentum (pi, pi, pi) at which the band edge sits."""
    return np.array([np.pi, np.pi, np.pi])


# ---------------------------------------------------------------------------
# integer windows and mode data


def integer_window(N: int) -> np.ndarray:
    """All integer vectors with max-norm <= N, shape ((2N+1)^3, 3)."""
    r = np.arange(-N, N + 1)
    return np.stack(np.meshgrid(r, r, r, indexing="ij"), axis=-1).reshape(-1, 3).astype(float)


def mode_vectors(alpha: np.ndarray, N: int) -> np.ndarray:
    return 2.0 * np.pi * integer_window(N) + alpha


def _reduce_cell(x: np.ndarray, alpha: np.ndarray):
    """Translate points to the central cell; returns (reduced points, phases).

    Uses the quasi-periodicity G(x) = e^{i alpha.n} G(x - n) so image windows
    centred at the origin stay adequate for arbitrary evaluation points.
    """
    n = np.round(x)
    return x - n, np.exp(1j * (n @ alpha))


def check_resonance(alpha: np.ndarray, k: float, N: int) -> None:
    """Raise ResonanceError if k^2 sits on a mode denominator within tolerance."""
    q = mode_vectors(alpha, N)
    q2 = np.einsum("ij,ij->i", q, q)
    gap = np.abs(k**2 - q2)
    tol = RESONANCE_RTOL * max(1.0, k**2)
    bad = np.argmin(gap)
    if gap[bad] <= tol:
        n = (q[bad] - alpha) / (2.0 * np.pi)
        raise ResonanceError(
            f"k^2 = {k**2:.12g} resonates with mode |2 pi n + alpha|^2 = {q2[bad]:.12g} "
            f"at n = {n.round().astype(int).tolist()}",
            n=n.round().astype(int),
        )


# ---------------------------------------------------------------------------
# free-space kernel


def eval_free_green(x, k: float = 0.0) -> np.ndarray:
    """Free-space Helmholtz kernel -exp(ik r)/(4 pi r), vectorized over rows."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    r = np.linalg.norm(x, axis=1)
    if np.any(r == 0.0):
        raise ValueError("free-space kernel evaluated at the singular point x = 0")
    return -np.exp(1j * k * r) / (4.0 * np.pi * r)


# ---------------------------------------------------------------------------
# half-integer incomplete gamma machinery (shared with operator assembly)


def gamma_upper_half(s2: int, z: np.ndarray) -> np.ndarray:
    """Upper incomplete Gamma(s2/2, z) for odd integer s2 (possibly negative).

    Built on erfc for s2 = 1 with the standard two-way recurrence; stable for
    the z >= 0 arguments arising from image distances.
    """
    if s2 % 2 == 0:
        raise ValueError("only half-integer orders are supported")
    z = np.asarray(z, dtype=float)
    if s2 == 1:
        return SQRT_PI * erfc(np.sqrt(z))
    if s2 > 1:
        s = (s2 - 2) / 2.0
        return s * gamma_upper_half(s2 - 2, z) + z**s * np.exp(-z)
    s = s2 / 2.0
    return (gamma_upper_half(s2 + 2, z) - z**s * np.exp(-z)) / s


def _lower_series(two_a: int, z: np.ndarray, terms: int = 40) -> np.ndarray:
    """B(z; a) = sum_i (-z)^i / (i! (a + i)) for half-integer a = two_a/2."""
    z = np.asarray(z, dtype=float)
    out = np.zeros_like(z)
    term = np.ones_like(z)
    for i in range(terms):
        out = out + term / (two_a / 2.0 + i)
        term = term * (-z) / (i + 1.0)
    return out


def lower_regularized(two_a: int, z: np.ndarray) -> np.ndarray:
    """B(z; a) = z^-a gamma(a, z), evaluated stably for z >= 0, a = two_a/2 half-integer."""
    z = np.asarray(z, dtype=float)
    small = z <= 4.0
    out = np.empty_like(z)
    if np.any(small):
        out[small] = _lower_series(two_a, z[small])
    if np.any(~small):
        zb = z[~small]
        a = two_a / 2.0
        out[~small] = zb ** (-a) * (gamma_fn(a) - gamma_upper_half(two_a, zb))
    return out


# ---------------------------------------------------------------------------
# F_m split pieces.  F_m(x) = sum_n c_m(q_n) e^{i q_n.x} + sum_j e^{i alpha.j} P_m(|x-j|)


def mode_coefficients(m: int, q2: np.ndarray, t0: float) -> np.ndarray:
    """Gaussian-filtered mode weights c_m(q) = e^{-q^2 t0} E_m(q^2 t0) / q^(2m).

    E_m is the order-(m-1) truncated exponential series, i.e. the regularized
    upper incomplete gamma Gamma(m, q^2 t0)/Gamma(m).
    """
    y = q2 * t0
    poly = np.zeros_like(y)
    term = np.ones_like(y)
    for i in range(m):
        poly = poly + term
        term = term * y / (i + 1.0)
    return np.exp(-y) * poly / q2**m


def _profile_prefactor(m: int) -> float:
    return 1.0 / ((4.0 * np.pi) ** 1.5 * gamma_fn(m))


def cone_coefficient(m: int) -> float:
    """Coefficient of r^(2m-3) in the short-range singular part of P_m."""
    return gamma_fn(1.5 - m) * 0.5 ** (2 * m - 3) * _profile_prefactor(m)


def image_profile(m: int, r: np.ndarray, t0: float) -> np.ndarray:
    """Radial image profile P_m(r), r > 0."""
    r = np.asarray(r, dtype=float)
    z = r**2 / (4.0 * t0)
    phi = (r**2 / 4.0) ** (m - 1.5) * gamma_upper_half(3 - 2 * m, z)
    return _profile_prefactor(m) * phi


def image_profile_deriv(m: int, r: np.ndarray, t0: float) -> np.ndarray:
    """d/dr of P_m, r > 0."""
    r = np.asarray(r, dtype=float)
    z = r**2 / (4.0 * t0)
    dphi = (m - 1.5) * (r / 2.0) * (r**2 / 4.0) ** (m - 2.5) * gamma_upper_half(3 - 2 * m, z)
    dphi = dphi - (2.0 / r) * t0 ** (m - 1.5) * np.exp(-z)
    return _profile_prefactor(m) * dphi


def image_profile_deriv2(m: int, r: np.ndarray, t0: float) -> np.ndarray:
    """Second radial derivative of P_m, r > 0."""
    r = np.asarray(r, dtype=float)
    z = r**2 / (4.0 * t0)
    d2 = (m - 1.5) * (m - 2.0) * (r**2 / 4.0) ** (m - 2.5) * gamma_upper_half(3 - 2 * m, z)
    d2 = d2 + np.exp(-z) * (t0 ** (m - 2.5) - 4.0 * (m - 2.0) * t0 ** (m - 1.5) / r**2)
    return _profile_prefactor(m) * d2


def smooth_profile0(m: int, r: np.ndarray, t0: float) -> np.ndarray:
    """P_m(r) minus its cone part c_m r^(2m-3): entire and even in r, valid at r = 0.

    Follows from Gamma(a, z) = Gamma(a) - z^a B(z; a): the Gamma(a) piece is the
    cone, the lower piece gives -t0^(m-3/2) B(z; 3/2-m) after cancelling powers.
    """
    r = np.asarray(r, dtype=float)
    z = r**2 / (4.0 * t0)
    c = t0 ** (m - 1.5) * _profile_prefactor(m)
    return -c * lower_regularized(3 - 2 * m, z)


def smooth_profile0_deriv_over_r(m: int, r: np.ndarray, t0: float) -> np.ndarray:
    """(d/dr of the cone-subtracted P_m) / r, even and finite at r = 0."""
    r = np.asarray(r, dtype=float)
    z = r**2 / (4.0 * t0)
    c = t0 ** (m - 1.5) * _profile_prefactor(m)
    return c / (2.0 * t0) * lower_regularized(5 - 2 * m, z)


def smooth_profile0_deriv2(m: int, r: np.ndarray, t0: float) -> np.ndarray:
    """Second derivative of the cone-subtracted P_m, finite at r = 0."""
    r = np.asarray(r, dtype=float)
    z = r**2 / (4.0 * t0)
    c = t0 ** (m - 1.5) * _profile_prefactor(m)
    return c * (lower_regularized(5 - 2 * m, z) / (2.0 * t0)
                - (z / t0) * lower_regularized(7 - 2 * m, z))


def eval_Fm(x, alpha, m: int, t0: float = 1.0 / 64.0, mode_cutoff: int = 8,
            image_cutoff: int = 2, subtract_cone: bool = False) -> np.ndarray:
    """Auxiliary lattice sum F_m at points x (P, 3) via the exponential split.

    With subtract_cone=True the short-range cone c_m r^(2m-3) of the central
    image is removed, extending the evaluation smoothly to x = 0 (m >= 2 only;
    for m = 1 the cone is the Coulomb singularity itself and the subtracted
    value is the regularized kernel).
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    alpha = np.asarray(alpha, dtype=float)
    x, cell_ph = _reduce_cell(x, alpha)
    q = mode_vectors(alpha, mode_cutoff)
    q2 = np.einsum("ij,ij->i", q, q)
    c = mode_coefficients(m, q2, t0)
    out = np.exp(1j * (x @ q.T)) @ c

    images = integer_window(image_cutoff)
    phases = np.exp(1j * (images @ alpha))
    for j, ph in zip(images, phases):
        d = x - j
        r = np.linalg.norm(d, axis=1)
        central = np.all(j == 0.0)
        if central and subtract_cone:
            out = out + ph * smooth_profile0(m, r, t0)
        else:
            if np.any(r < 1e-13):
                raise ValueError("F_m evaluated at a lattice point without cone subtraction")
            out = out + ph * image_profile(m, r, t0)
    return cell_ph * out


def eval_Fm_grad(x, alpha, m: int, t0: float = 1.0 / 64.0, mode_cutoff: int = 8,
                 image_cutoff: int = 2, subtract_cone: bool = False) -> np.ndarray:
    """Gradient of F_m (cone-subtracted gradient if requested), shape (P, 3)."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    alpha = np.asarray(alpha, dtype=float)
    x, cell_ph = _reduce_cell(x, alpha)
    q = mode_vectors(alpha, mode_cutoff)
    q2 = np.einsum("ij,ij->i", q, q)
    c = mode_coefficients(m, q2, t0)
    ph_modes = np.exp(1j * (x @ q.T))
    out = 1j * (ph_modes * c) @ q

    images = integer_window(image_cutoff)
    phases = np.exp(1j * (images @ alpha))
    for j, ph in zip(images, phases):
        d = x - j
        r = np.linalg.norm(d, axis=1)
        central = np.all(j == 0.0)
        if central and subtract_cone:
            out = out + ph * smooth_profile0_deriv_over_r(m, r, t0)[:, None] * d
        else:
            out = out + ph * (image_profile_deriv(m, r, t0) / r)[:, None] * d
    return cell_ph[:, None] * out


def eval_Fm_hess(x, alpha, m: int, t0: float = 1.0 / 64.0, mode_cutoff: int = 8,
                 image_cutoff: int = 2, subtract_cone: bool = False) -> np.ndarray:
    """Hessian of F_m, shape (P, 3, 3); subtract_cone removes the central cone."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    alpha = np.asarray(alpha, dtype=float)
    x, cell_ph = _reduce_cell(x, alpha)
    q = mode_vectors(alpha, mode_cutoff)
    q2 = np.einsum("ij,ij->i", q, q)
    c = mode_coefficients(m, q2, t0)
    ph_modes = np.exp(1j * (x @ q.T))
    out = -np.einsum("pn,na,nb->pab", ph_modes * c, q, q)

    images = integer_window(image_cutoff)
    phases = np.exp(1j * (images @ alpha))
    eye = np.eye(3)
    for j, ph in zip(images, phases):
        d = x - j
        r = np.linalg.norm(d, axis=1)
        central = np.all(j == 0.0)
        if central and subtract_cone:
            s = smooth_profile0_deriv_over_r(m, r, t0)
            d2 = smooth_profile0_deriv2(m, r, t0)
            rdir = np.where(r[:, None] > 0, d / np.where(r[:, None] > 0, r[:, None], 1.0), 0.0)
            proj = np.einsum("pa,pb->pab", rdir, rdir)
            out = out + ph * (d2[:, None, None] * proj + s[:, None, None] * (eye[None] - proj))
            # at r = 0 the smooth Hessian is isotropic: s * I
            at0 = r < 1e-13
            if np.any(at0):
                out[at0] = out[at0] - ph * (d2[at0, None, None] * proj[at0]
                                            + s[at0, None, None] * (eye[None] - proj[at0]))
                out[at0] = out[at0] + ph * s[at0, None, None] * eye[None]
        else:
            p1 = image_profile_deriv(m, r, t0)
            p2 = image_profile_deriv2(m, r, t0)
            rdir = d / r[:, None]
            proj = np.einsum("pa,pb->pab", rdir, rdir)
            out = out + ph * (p2[:, None, None] * proj + (p1 / r)[:, None, None] * (eye[None] - proj))
    return cell_ph[:, None, None] * out


# ---------------------------------------------------------------------------
# quasi-periodic kernel: production (Ewald-type) and reference (raw series)


def _helmholtz_image_profile(r: np.ndarray, k: float, t0: float) -> np.ndarray:
    """Radial image term of the split Helmholtz kernel.

    g_k(r) = -(1/(8 pi r)) [e^{ikr} erfc(r/(2 sqrt t0) + i k sqrt t0)
                            + e^{-ikr} erfc(r/(2 sqrt t0) - i k sqrt t0)].
    """
    r = np.asarray(r, dtype=float)
    u = r / (2.0 * math.sqrt(t0))
    cplus = u + 1j * k * math.sqrt(t0)
    cminus = u - 1j * k * math.sqrt(t0)
    # erfc(z) = exp(-z^2) wofz(iz); both iz arguments lie in the upper half-plane
    ec_p = np.exp(-cplus**2) * wofz(1j * cplus)
    ec_m = np.exp(-cminus**2) * wofz(1j * cminus)
    return -(np.exp(1j * k * r) * ec_p + np.exp(-1j * k * r) * ec_m) / (8.0 * np.pi * r)


def _helmholtz_reg_center(r: np.ndarray, k: float, t0: float) -> np.ndarray:
    """Central image term minus the free kernel, finite as r -> 0."""
    r = np.asarray(r, dtype=float)
    out = np.empty(r.shape, dtype=complex)
    at0 = r < 1e-13
    eta = 1.0 / (2.0 * math.sqrt(t0))
    if np.any(at0):
        # limit r->0: ik (1 + erf(i k sqrt t0))/(4 pi) + eta e^{k^2 t0} / (2 pi^{3/2})
        val = (1j * k * (1.0 + 1j * erfi(k * math.sqrt(t0))) / (4.0 * np.pi)
               + eta * math.exp(k**2 * t0) / (2.0 * np.pi**1.5))
        out[at0] = val
    rest = ~at0
    if np.any(rest):
        rr = r[rest]
        u = rr / (2.0 * math.sqrt(t0))
        cplus = u + 1j * k * math.sqrt(t0)
        cminus = u - 1j * k * math.sqrt(t0)
        e_p = erf_complex(cplus)
        e_m = erf_complex(cminus)
        w = -2j * np.sin(k * rr) - (np.exp(1j * k * rr) * e_p + np.exp(-1j * k * rr) * e_m)
        out[rest] = -w / (8.0 * np.pi * rr)
    return out


def erf_complex(z: np.ndarray) -> np.ndarray:
    """erf for complex argument via the Faddeeva function."""
    z = np.asarray(z, dtype=complex)
    return 1.0 - np.exp(-z**2) * wofz(1j * z)


def eval_quasi_green(x, spec: KernelSpec, mode: str = "ewald") -> np.ndarray:
    """Quasi-periodic kernel G(alpha, k; x) at points x (P, 3).

    mode "ewald": exponentially convergent split (production path).
    mode "spectral": literal truncated mode series with cutoff
    spec.spectral_cutoff; converges slowly and is kept only as the
    reference definition.
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    alpha = spec.alpha_array()
    k = spec.k
    if mode == "spectral":
        check_resonance(alpha, k, spec.spectral_cutoff)
        q = mode_vectors(alpha, spec.spectral_cutoff)
        q2 = np.einsum("ij,ij->i", q, q)
        out = np.zeros(x.shape[0], dtype=complex)
        # chunk the mode sum to bound memory at large cutoffs
        step = max(1, 10_000_000 // max(1, x.shape[0]))
        for lo in range(0, q.shape[0], step):
            qs = q[lo:lo + step]
            out += np.exp(1j * (x @ qs.T)) @ (1.0 / (k**2 - q2[lo:lo + step]))
        return out
    if mode != "ewald":
        raise ValueError(f"unknown mode {mode!r}")

    check_resonance(alpha, k, spec.mode_cutoff)
    x, cell_ph = _reduce_cell(x, alpha)
    t0 = spec.t0
    q = mode_vectors(alpha, spec.mode_cutoff)
    q2 = np.einsum("ij,ij->i", q, q)
    coef = np.exp((k**2 - q2) * t0) / (k**2 - q2)
    out = np.exp(1j * (x @ q.T)) @ coef

    images = integer_window(spec.image_cutoff)
    phases = np.exp(1j * (images @ alpha))
    for j, ph in zip(images, phases):
        d = x - j
        r = np.linalg.norm(d, axis=1)
        if np.any(r < 1e-13):
            raise ValueError("quasi-periodic kernel evaluated at a lattice point; "
                             "use eval_quasi_green_regularized")
        out = out + ph * _helmholtz_image_profile(r, k, t0)
    return cell_ph * out


def eval_quasi_green_regularized(x, spec: KernelSpec) -> np.ndarray:
    """Smooth lattice remainder of the quasi-periodic kernel, valid at x = 0.

    Subtracts the free kernel of the lattice image nearest to x (with its
    quasi-periodic phase); for x in the central cell this is G(alpha,k;x) - G_k(x).
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    alpha = spec.alpha_array()
    k = spec.k
    check_resonance(alpha, k, spec.mode_cutoff)
    x, cell_ph = _reduce_cell(x, alpha)
    t0 = spec.t0
    q = mode_vectors(alpha, spec.mode_cutoff)
    q2 = np.einsum("ij,ij->i", q, q)
    coef = np.exp((k**2 - q2) * t0) / (k**2 - q2)
    out = np.exp(1j * (x @ q.T)) @ coef

    images = integer_window(spec.image_cutoff)
    phases = np.exp(1j * (images @ alpha))
    for j, ph in zip(images, phases):
        d = x - j
        r = np.linalg.norm(d, axis=1)
        if np.all(j == 0.0):
            out = out + ph * _helmholtz_reg_center(r, k, t0)
        else:
            out = out + ph * _helmholtz_image_profile(r, k, t0)
    return cell_ph * out


# ---------------------------------------------------------------------------
# small-k expansion kernels


def eval_G_ell_sharp(x, alpha, ell: int, N: int = 60) -> np.ndarray:
    """Coefficient kernel of k^(2 ell): the truncated series -sum e^{iqx}/|q|^(2(ell+1)).

    Literal reference definition (cutoff N in max norm).  The production path
    for operators uses the split evaluation -eval_Fm(..., m=ell+1).
    """
    if ell < 1:
        raise ValueError("ell >= 1; the ell = 0 term is the k = 0 kernel itself")
    x = np.atleast_2d(np.asarray(x, dtype=float))
    alpha = np.asarray(alpha, dtype=float)
    q = mode_vectors(alpha, N)
    q2 = np.einsum("ij,ij->i", q, q)
    return -(np.exp(1j * (x @ q.T)) @ (1.0 / q2 ** (ell + 1)))


def eval_G1_tilde(x, alpha_tilde, N: int = 60) -> np.ndarray:
    """Second-order direction kernel of the corner expansion, truncated series.

    G1(x; at) = sum_n e^{i q.x} [ |at|^2/|q|^4 - 4 (q.at)^2/|q|^6 ],
    q = 2 pi n + (pi, pi, pi).  This is the even, real second-order coefficient
    of the phase-stripped kernel e^{-i eps at.x} G(alpha* + eps at, 0; x); the
    odd first-order coefficient is nonzero and purely imaginary and is exposed
    separately as eval_H1_tilde.
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    at = np.asarray(alpha_tilde, dtype=float)
    q = mode_vectors(corner_alpha(), N)
    q2 = np.einsum("ij,ij->i", q, q)
    qa = q @ at
    w = (at @ at) / q2**2 - 4.0 * qa**2 / q2**3
    return np.exp(1j * (x @ q.T)) @ w


def eval_G1_tilde_split(x, alpha_tilde, t0: float = 1.0 / 64.0, mode_cutoff: int = 8,
                        image_cutoff: int = 2, subtract_cone: bool = False) -> np.ndarray:
    """Production evaluation of G1 via F_2 and the Hessian of F_3.

    G1 = |at|^2 F_2 + 4 at.Hess(F_3).at; the central cone (at.x)^2/(8 pi |x|)
    can be subtracted to extend smoothly through x = 0.
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    at = np.asarray(alpha_tilde, dtype=float)
    a = corner_alpha()
    f2 = eval_Fm(x, a, 2, t0, mode_cutoff, image_cutoff, subtract_cone=subtract_cone)
    h3 = eval_Fm_hess(x, a, 3, t0, mode_cutoff, image_cutoff, subtract_cone=subtract_cone)
    # with subtract_cone the r-cones cancel between the two pieces
    # (c2 = -1/(8 pi), 12 c3 = +1/(8 pi)) and the removed part is exactly
    # the combined cone (at.x)^2/(8 pi |x|)
    return (at @ at) * f2 + 4.0 * np.einsum("a,pab,b->p", at, h3, at)


def eval_H1_tilde(x, alpha_tilde, t0: float = 1.0 / 64.0, mode_cutoff: int = 8,
                  image_cutoff: int = 2) -> np.ndarray:
    """First-order direction kernel 2 sum (q.at) e^{iqx}/|q|^4 = -2i at.grad F_2.

    Purely imaginary, odd in x, and smooth away from lattice points; the
    combination i (at.x) G(alpha*,0;x) + H1(x) is smooth through x = 0.
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    at = np.asarray(alpha_tilde, dtype=float)
    g = eval_Fm_grad(x, corner_alpha(), 2, t0, mode_cutoff, image_cutoff)
    return -2j * (g @ at)


# ---------------------------------------------------------------------------
# window-extrapolation oracle (independent high-accuracy reference)


def _neville_to_zero(sigmas, values):
    v = [np.asarray(val, dtype=complex) for val in values]
    s = list(sigmas)
    n = len(v)
    for k in range(1, n):
        for i in range(n - k):
            v[i] = v[i] + (v[i] - v[i + 1]) * s[i] / (s[i + 1] - s[i])
    return v[0]


def _windowed_F1(x: np.ndarray, alpha: np.ndarray, sig0: float, nlev: int, N: int,
                 regularized: bool) -> np.ndarray:
    """F_1 by Gaussian-window extrapolation with analytic image subtraction.

    The window sum sum_n e^{iqx} e^{-sigma q^2}/q^2 equals the heat-smoothed
    F_1; subtracting the heat-smoothed Coulomb images erf(r/(2 sqrt s))/(4 pi r)
    leaves a function analytic in sigma at 0, which Neville extrapolation
    recovers; the exact images are then restored.
    """
    x, cell_ph = _reduce_cell(x, alpha)
    q = mode_vectors(alpha, N)
    q2 = np.einsum("ij,ij->i", q, q)
    ph = np.exp(1j * (x @ q.T))
    images = integer_window(1)
    iph = np.exp(1j * (images @ alpha))
    d = x[:, None, :] - images[None, :, :]
    rd = np.linalg.norm(d, axis=2)
    sigs = sig0 * 0.5 ** np.arange(nlev)
    vals = []
    for s in sigs:
        w = ph @ (np.exp(-s * q2) / q2)
        sm = np.where(rd < 1e-13,
                      1.0 / (4.0 * np.pi**1.5 * math.sqrt(s)),
                      erf(rd / (2.0 * math.sqrt(s))) / (4.0 * np.pi * np.where(rd < 1e-13, 1.0, rd)))
        vals.append(w - sm @ iph)
    rem = _neville_to_zero(sigs, vals)
    exact = np.where(rd < 1e-13, 0.0, 1.0 / (4.0 * np.pi * np.where(rd < 1e-13, 1.0, rd)))
    add = exact @ iph
    if regularized and np.any(np.linalg.norm(x, axis=1) < 1e-13):
        pass  # central 1/(4 pi r) intentionally omitted at x = 0 by the mask
    elif np.any(rd < 1e-13):
        raise ValueError("F_1 oracle at a lattice point requires regularized=True")
    return cell_ph * (rem + add)


def _windowed_Fm(x: np.ndarray, alpha: np.ndarray, m: int, sig0: float, nlev: int,
                 N: int) -> np.ndarray:
    q = mode_vectors(alpha, N)
    q2 = np.einsum("ij,ij->i", q, q)
    ph = np.exp(1j * (x @ q.T))
    sigs = sig0 * 0.5 ** np.arange(nlev)
    vals = [ph @ (np.exp(-s * q2) / q2**m) for s in sigs]
    return _neville_to_zero(sigs, vals)


def spectral_sum_extrapolated(x, spec: KernelSpec, regularized: bool = False,
                              sig0: float = 0.02, nlev: int = 6, N: int = 44) -> np.ndarray:
    """High-accuracy window-extrapolated value of G(alpha, k; x).

    Independent of the production split: uses only the defining mode series,
    a Gaussian window, the heat-smoothed Coulomb kernel, and Richardson
    extrapolation in the window width.  For k != 0 the kernel is summed as
    -sum_m k^(2m-2) F_m, valid for k below the smallest mode magnitude.
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    alpha = spec.alpha_array()
    k = spec.k
    out = -_windowed_F1(x, alpha, sig0, nlev, N, regularized)
    if k != 0.0:
        q = mode_vectors(alpha, spec.mode_cutoff)
        q2min = np.min(np.einsum("ij,ij->i", q, q))
        rho = k**2 / q2min
        if rho >= 0.9:
            raise ValueError("window oracle needs k^2 below the smallest mode; "
                             f"ratio {rho:.3f}")
        m = 2
        while rho ** (m - 1) > 1e-16 and m < 60:
            out = out - k ** (2 * (m - 1)) * _windowed_Fm(x, alpha, m, 0.005, nlev, max(N, 40))
            m += 1
    return out
