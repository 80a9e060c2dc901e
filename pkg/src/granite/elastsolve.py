"""Periodic linear elasticity by the basic Moulinec-Suquet fixed point.

The 2D grid is treated as a one-voxel-thick 3D periodic body (H x W x 1),
so every strain and stress keeps all six components.  Internally tensors are
stored in Mandel form (order 11, 22, 33, 23, 13, 12 with sqrt(2) on shears);
exported fields use Voigt order with engineering shear strains.
"""
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .kernels import batched_matvec6

SQ2 = np.sqrt(2.0)
_PAIRS = ((0, 0), (1, 1), (2, 2), (1, 2), (0, 2), (0, 1))
_W = np.array([1.0, 1.0, 1.0, SQ2, SQ2, SQ2])


class NonConverged(RuntimeError):
    def __init__(self, iterations, residual):
        super().__init__(f"no convergence after {iterations} iterations (residual {residual:.3e})")
        self.iterations = iterations
        self.residual = residual


@dataclass(frozen=True)
class CubicConstants:
    c1111: float = 1.0
    c1122: float = 0.7209
    c2323: float = 0.4477

    def __post_init__(self):
        if not (self.c1111 > self.c1122 and self.c2323 > 0 and self.c1111 + 2 * self.c1122 > 0):
            raise ValueError(f"cubic constants not positive definite: {self}")

    def voigt(self):
        C = np.zeros((6, 6))
        C[:3, :3] = self.c1122
        C[[0, 1, 2], [0, 1, 2]] = self.c1111
        C[[3, 4, 5], [3, 4, 5]] = self.c2323
        return C


def default_strain(e33=1e-4):
    E = np.zeros((3, 3))
    E[2, 2] = e33
    return E


# --- tensor conversions -------------------------------------------------------

def voigt_to_tensor(Cv):
    """6x6 Voigt stiffness to a (3, 3, 3, 3) tensor."""
    C = np.zeros((3, 3, 3, 3))
    for I, (i, j) in enumerate(_PAIRS):
        for J, (k, l) in enumerate(_PAIRS):
            v = Cv[I, J]
            for a, b in ((i, j), (j, i)):
                for c, d in ((k, l), (l, k)):
                    C[a, b, c, d] = v
    return C


def tensor_to_voigt(C):
    idx = np.array(_PAIRS)
    return C[idx[:, 0][:, None], idx[:, 1][:, None], idx[:, 0][None, :], idx[:, 1][None, :]]


def voigt_to_mandel(Cv):
    return Cv * _W[:, None] * _W[None, :]


def mandel_to_voigt(Cm):
    return Cm / (_W[:, None] * _W[None, :])


def sym_to_mandel(e):
    """(..., 3, 3) symmetric tensors to (..., 6) Mandel vectors."""
    return np.stack([e[..., i, j] * w for (i, j), w in zip(_PAIRS, _W)], axis=-1)


def mandel_to_sym(m):
    out = np.empty(m.shape[:-1] + (3, 3), dtype=m.dtype)
    for k, ((i, j), w) in enumerate(zip(_PAIRS, _W)):
        out[..., i, j] = m[..., k] / w
        out[..., j, i] = m[..., k] / w
    return out


def bunge_rotation(phi1, Phi, phi2):
    """Crystal-to-sample rotation ``Rz(phi1) @ Rx(Phi) @ Rz(phi2)``; broadcasts."""
    c1, s1 = np.cos(phi1), np.sin(phi1)
    c, s = np.cos(Phi), np.sin(Phi)
    c2, s2 = np.cos(phi2), np.sin(phi2)
    R = np.empty(np.broadcast(c1, c, c2).shape + (3, 3))
    R[..., 0, 0] = c1 * c2 - s1 * c * s2
    R[..., 0, 1] = -c1 * s2 - s1 * c * c2
    R[..., 0, 2] = s1 * s
    R[..., 1, 0] = s1 * c2 + c1 * c * s2
    R[..., 1, 1] = -s1 * s2 + c1 * c * c2
    R[..., 1, 2] = -c1 * s
    R[..., 2, 0] = s * s2
    R[..., 2, 1] = s * c2
    R[..., 2, 2] = c
    return R


def rotate_stiffness(C, R):
    """``C'_ijkl = R_ip R_jq R_kr R_ls C_pqrs`` for (..., 3, 3) rotations."""
    return np.einsum("...ip,...jq,...kr,...ls,pqrs->...ijkl", R, R, R, R, C, optimize=True)


@dataclass
class StiffnessField:
    voigt: np.ndarray      # (H, W, 6, 6)

    @property
    def shape(self):
        return self.voigt.shape[:2]

    def mandel(self):
        return voigt_to_mandel(self.voigt)


def euler_rotations(euler):
    """Rotations for an (..., 3) array in channel order (Phi, Psi1, Psi2)."""
    e = np.asarray(euler, dtype=np.float64)
    return bunge_rotation(e[..., 1], e[..., 0], e[..., 2])


def build_stiffness(euler, constants=CubicConstants()):
    """Per-pixel rotated cubic stiffness from an (H, W, 3) Euler field.

    Accepts a :class:`~granite.microgen.Microstructure` as well.
    """
    euler = getattr(euler, "euler", euler)
    e = np.asarray(euler, dtype=np.float64)
    flat = e.reshape(-1, 3)
    uniq, inv = np.unique(flat, axis=0, return_inverse=True)
    C0 = voigt_to_tensor(constants.voigt())
    Cu = rotate_stiffness(C0, euler_rotations(uniq))
    Cv = np.stack([tensor_to_voigt(c) for c in Cu])
    return StiffnessField(voigt=Cv[inv.ravel()].reshape(e.shape[:2] + (6, 6)))


# --- reference medium and Green operator ----------------------------------------

_DEV = np.linalg.svd(np.eye(6) - np.outer([1, 1, 1, 0, 0, 0], [1, 1, 1, 0, 0, 0]) / 3.0)[0][:, :5]


def reference_medium(stiff):
    """Isotropic (lambda, mu) midway between the extreme bulk and shear moduli."""
    Cm = stiff.mandel().reshape(-1, 6, 6)
    uniq = np.unique(Cm.round(14), axis=0)
    bulk = uniq[:, :3, :3].sum(axis=(1, 2)) / 9.0
    shear = np.linalg.eigvalsh(np.einsum("ai,pab,bj->pij", _DEV, uniq, _DEV)) / 2.0
    mu = 0.5 * (shear.min() + shear.max())
    K = 0.5 * (bulk.min() + bulk.max())
    if not (mu > 0 and K > 0):
        raise ValueError(f"reference medium not positive definite (K={K}, mu={mu})")
    return K - 2.0 * mu / 3.0, mu


def frequencies(h, w, half=True):
    """Angular wave vectors, (h, w//2+1) each on the rfft half-grid.

    On even grids a Nyquist component is ambiguous in sign; wherever the
    other component is nonzero it is set to 0 so the Green operator stays
    Hermitian-consistent.  Pure single-axis Nyquist modes are kept.
    """
    k1 = 2 * np.pi * np.fft.fftfreq(h)
    k2 = 2 * np.pi * (np.fft.rfftfreq(w) if half else np.fft.fftfreq(w))
    x1, x2 = np.meshgrid(k1, k2, indexing="ij")
    ny1 = np.isclose(np.abs(x1), np.pi) if h % 2 == 0 else np.zeros_like(x1, dtype=bool)
    ny2 = np.isclose(np.abs(x2), np.pi) if w % 2 == 0 else np.zeros_like(x2, dtype=bool)
    x1m = np.where(ny1 & (x2 != 0), 0.0, x1)
    x2m = np.where(ny2 & (x1 != 0), 0.0, x2)
    return x1m, x2m


def _rfft_weights(h, w):
    wt = np.full(w // 2 + 1, 2.0)
    wt[0] = 1.0
    if w % 2 == 0:
        wt[-1] = 1.0
    return np.broadcast_to(wt, (h, w // 2 + 1))


def _div(sh, x1, x2):
    """xi . sigma_hat for Mandel spectra (h, w', 6) with xi3 = 0."""
    s11, s22 = sh[..., 0], sh[..., 1]
    s23, s13, s12 = sh[..., 3] / SQ2, sh[..., 4] / SQ2, sh[..., 5] / SQ2
    return (s11 * x1 + s12 * x2, s12 * x1 + s22 * x2, s13 * x1 + s23 * x2)


def apply_green(tau_hat, x1, x2, lam, mu):
    """Isotropic strain Green operator applied to a Mandel spectrum; zero mode -> 0."""
    q1, q2, q3 = _div(tau_hat, x1, x2)
    n2 = x1 * x1 + x2 * x2
    inv = np.divide(1.0, n2, out=np.zeros_like(n2), where=n2 > 0)
    nq = (x1 * q1 + x2 * q2) * inv * inv * (lam + mu) / (mu * (lam + 2 * mu))
    a = inv / (2.0 * mu)
    out = np.empty_like(tau_hat)
    out[..., 0] = a * 2 * x1 * q1 - nq * x1 * x1
    out[..., 1] = a * 2 * x2 * q2 - nq * x2 * x2
    out[..., 2] = 0.0
    out[..., 3] = SQ2 * a * x2 * q3                       # (xi3 q2 + xi2 q3)/2 terms
    out[..., 4] = SQ2 * a * x1 * q3
    out[..., 5] = SQ2 * (a * (x1 * q2 + x2 * q1) - nq * x1 * x2)
    return out


# --- solver -----------------------------------------------------------------------

@dataclass
class SolveResult:
    strain: np.ndarray      # (H, W, 6) Voigt, engineering shears
    stress: np.ndarray      # (H, W, 6) Voigt
    von_mises: np.ndarray   # (H, W, 1)
    iterations: int
    residual: float

    def mandel_strain(self):
        return self.strain * np.array([1, 1, 1, 1 / SQ2, 1 / SQ2, 1 / SQ2])

    def mandel_stress(self):
        return self.stress * _W


def equilibrium_residual(sig_hat, x1, x2, wt, cell=None):
    """``sqrt(sum |xi . sigma_hat|^2) / |sigma_hat(0)|`` over the full spectrum.

    ``x1, x2`` are per-pixel angular frequencies; wave vectors are rescaled to
    a cell of unit length along x1 (``cell`` pixels, default the grid height),
    so the value does not shrink as the grid is refined.
    """
    cell = x1.shape[0] if cell is None else cell
    d = _div(sig_hat, x1, x2)
    num = sum((wt * np.abs(c) ** 2).sum() for c in d)
    den = np.sqrt((np.abs(sig_hat[0, 0]) ** 2).sum())
    r = np.sqrt(num) / den if den > 0 else np.sqrt(num)
    return float(cell * r)


def solve(stiff, E=None, tol=1e-6, max_iter=5000, reference=None):
    """Fixed-point solve ``eps = E - Gamma_ref * (sigma - C_ref : eps)``.

    Iterations are counted as stress evaluations, so a homogeneous body
    returns after one.  Raises :class:`NonConverged` past ``max_iter``.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    E = default_strain() if E is None else np.asarray(E, dtype=np.float64)
    if not np.allclose(E, E.T):
        raise ValueError("macroscopic strain must be symmetric")
    h, w = stiff.shape
    Cm = stiff.mandel().reshape(-1, 6, 6)
    lam, mu = reference_medium(stiff) if reference is None else reference
    Cref = 2 * mu * np.eye(6)
    Cref[:3, :3] += lam
    x1, x2 = frequencies(h, w)
    wt = _rfft_weights(h, w)
    Em = sym_to_mandel(E)

    eps = np.broadcast_to(Em, (h * w, 6)).copy()
    residual = np.inf
    for it in range(1, max_iter + 1):
        sig = batched_matvec6(Cm, eps)
        sig_hat = np.fft.rfftn(sig.reshape(h, w, 6), axes=(0, 1))
        residual = equilibrium_residual(sig_hat, x1, x2, wt)
        if residual <= tol:
            break
        tau_hat = sig_hat - np.fft.rfftn((eps @ Cref).reshape(h, w, 6), axes=(0, 1))
        eps_hat = -apply_green(tau_hat, x1, x2, lam, mu)
        eps_hat[0, 0] = Em * (h * w)
        eps = np.fft.irfftn(eps_hat, s=(h, w), axes=(0, 1)).reshape(-1, 6)
    else:
        raise NonConverged(max_iter, residual)

    strain = (eps / _W * np.array([1, 1, 1, 2, 2, 2])).reshape(h, w, 6)
    stress = (sig / _W).reshape(h, w, 6)
    return SolveResult(strain=strain, stress=stress, von_mises=von_mises(stress),
                       iterations=it, residual=residual)


def von_mises(sigma):
    """Equivalent stress from (..., 6) Voigt stresses; output keeps a trailing axis."""
    s = np.asarray(sigma, dtype=np.float64)
    p = s[..., :3].sum(axis=-1, keepdims=True) / 3.0
    d = s[..., :3] - p
    j2 = (d * d).sum(axis=-1) + 2.0 * (s[..., 3:] ** 2).sum(axis=-1)
    return np.sqrt(1.5 * j2)[..., None]


def solve_microstructure(ms, constants=CubicConstants(), E=None, tol=1e-6, max_iter=5000):
    return solve(build_stiffness(ms.euler, constants), E, tol, max_iter)


def append_log(path, record):
    with open(Path(path), "a") as fh:
        fh.write(json.dumps(record, sort_keys=True) + "\n")


def isotropic_voigt(lam, mu):
    C = np.zeros((6, 6))
    C[:3, :3] = lam
    C[[0, 1, 2], [0, 1, 2]] += 2 * mu
    C[[3, 4, 5], [3, 4, 5]] = mu
    return C
