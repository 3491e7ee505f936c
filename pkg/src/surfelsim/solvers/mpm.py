"""Material Point Method solver (APIC / MLS-MPM, quadratic B-splines).

Elastic bodies use a fixed-corotated energy, liquids a volume-only
penalty, granular media a St. Venant-Kirchhoff trial stress in Hencky
strain with a Drucker-Prager return map.  Particle/grid transfers are
numba kernels with sequential loops, so results are bit-reproducible
regardless of requested thread counts.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from numba import njit

from ..errors import InvertedElementError, OutOfDomainError

KIND_ELASTIC = 0
KIND_LIQUID = 1
KIND_GRANULAR = 2

_KIND_CODES = {"elastic": KIND_ELASTIC, "liquid": KIND_LIQUID, "granular": KIND_GRANULAR}


@dataclass
class MpmParticles:
    positions: np.ndarray
    velocities: np.ndarray
    masses: np.ndarray
    volumes: np.ndarray
    F: np.ndarray
    C: np.ndarray

    @classmethod
    def from_points(cls, positions, velocities, masses, volumes) -> "MpmParticles":
        n = len(positions)
        return cls(
            positions=np.array(positions, dtype=np.float64),
            velocities=np.array(velocities, dtype=np.float64),
            masses=np.array(masses, dtype=np.float64),
            volumes=np.array(volumes, dtype=np.float64),
            F=np.tile(np.eye(3), (n, 1, 1)),
            C=np.zeros((n, 3, 3)),
        )

    def copy(self) -> "MpmParticles":
        return MpmParticles(
            self.positions.copy(), self.velocities.copy(), self.masses.copy(),
            self.volumes.copy(), self.F.copy(), self.C.copy(),
        )

    def __len__(self):
        return self.positions.shape[0]


@dataclass
class MpmGrid:
    """Node buffers plus cached boundary samples for a static collider."""

    resolution: tuple
    origin: np.ndarray
    dx: float
    mass: np.ndarray = field(init=False)
    momentum: np.ndarray = field(init=False)

    def __post_init__(self):
        res = tuple(int(r) for r in self.resolution)
        if min(res) < 8:
            raise ValueError(f"grid resolution {res} below the minimum of 8")
        self.resolution = res
        self.origin = np.asarray(self.origin, dtype=np.float64)
        self.dx = float(self.dx)
        self.mass = np.zeros(res)
        self.momentum = np.zeros(res + (3,))
        self._bc_key = None
        self._bc_sd = None
        self._bc_normal = None
        self._active = None  # node box touched by the last transfer

    @classmethod
    def for_domain(cls, lo, hi, resolution=128) -> "MpmGrid":
        lo = np.asarray(lo, dtype=np.float64)
        hi = np.asarray(hi, dtype=np.float64)
        span = float(np.max(hi - lo))
        dx = span / (resolution - 5)  # leave margin nodes on every side
        origin = lo - 2.5 * dx
        return cls((resolution, resolution, resolution), origin, dx)

    def node_positions(self) -> np.ndarray:
        rx, ry, rz = self.resolution
        ii, jj, kk = np.meshgrid(np.arange(rx), np.arange(ry), np.arange(rz),
                                 indexing="ij")
        idx = np.stack([ii, jj, kk], axis=-1).reshape(-1, 3)
        return self.origin + idx * self.dx

    def clear(self):
        """Zero the buffers; only the previously touched box when known."""
        if self._active is None:
            self.mass.fill(0.0)
            self.momentum.fill(0.0)
        else:
            i0, i1, j0, j1, k0, k1 = self._active
            self.mass[i0:i1, j0:j1, k0:k1] = 0.0
            self.momentum[i0:i1, j0:j1, k0:k1] = 0.0
            self._active = None

    def boundary_samples(self, boundary):
        """Signed distance and normal at every node, cached per boundary."""
        if boundary is None:
            return None, None
        if self._bc_key is boundary:
            return self._bc_sd, self._bc_normal
        d, n = boundary.query(self.node_positions())
        self._bc_sd = d.reshape(self.resolution)
        self._bc_normal = n.reshape(self.resolution + (3,))
        self._bc_key = boundary
        return self._bc_sd, self._bc_normal


def lame_parameters(youngs: float, poisson: float):
    mu = youngs / (2.0 * (1.0 + poisson))
    lam = youngs * poisson / ((1.0 + poisson) * (1.0 - 2.0 * poisson))
    return mu, lam


def bulk_modulus(youngs: float, poisson: float) -> float:
    return youngs / (3.0 * (1.0 - 2.0 * poisson))


def sound_speed(material) -> float:
    """Elastic wave speed used for the explicit CFL bound."""
    if material.kind == "liquid":
        k = bulk_modulus(material.youngs_modulus, material.poisson)
        return math.sqrt(k / material.density)
    mu, lam = lame_parameters(material.youngs_modulus, material.poisson)
    return math.sqrt((lam + 2.0 * mu) / material.density)


def stable_substeps(material, dx: float, dt: float, safety: float = 0.5) -> int:
    """How many times dt must be split to satisfy the sound-speed CFL."""
    c = sound_speed(material)
    dt_max = safety * dx / c
    return max(1, int(math.ceil(dt / dt_max)))


# ---------------------------------------------------------------- kernels


@njit(cache=True)
def _sym_eig3(s_mat):
    """Eigen-decomposition of a symmetric 3x3 via cyclic Jacobi sweeps."""
    a = s_mat.copy()
    v = np.eye(3)
    for _ in range(12):
        off = a[0, 1] ** 2 + a[0, 2] ** 2 + a[1, 2] ** 2
        if off < 1e-30:
            break
        for p in range(2):
            for q in range(p + 1, 3):
                if abs(a[p, q]) < 1e-300:
                    continue
                theta = (a[q, q] - a[p, p]) / (2.0 * a[p, q])
                t = 1.0 / (abs(theta) + math.sqrt(theta * theta + 1.0))
                if theta < 0.0:
                    t = -t
                c = 1.0 / math.sqrt(t * t + 1.0)
                s = t * c
                for k in range(3):
                    akp = a[k, p]
                    akq = a[k, q]
                    a[k, p] = c * akp - s * akq
                    a[k, q] = s * akp + c * akq
                for k in range(3):
                    apk = a[p, k]
                    aqk = a[q, k]
                    a[p, k] = c * apk - s * aqk
                    a[q, k] = s * apk + c * aqk
                for k in range(3):
                    vkp = v[k, p]
                    vkq = v[k, q]
                    v[k, p] = c * vkp - s * vkq
                    v[k, q] = s * vkp + c * vkq
    vals = np.array([a[0, 0], a[1, 1], a[2, 2]])
    order = np.argsort(-vals)
    return vals[order], v[:, order]


@njit(cache=True)
def _svd3(f_mat):
    """Signed SVD: U and V are proper rotations, s[2] carries the sign.

    s[0] >= s[1] >= |s[2]| and s[2] < 0 exactly when det(F) < 0.
    """
    ata = np.empty((3, 3))
    for a in range(3):
        for b in range(3):
            acc = 0.0
            for r in range(3):
                acc += f_mat[r, a] * f_mat[r, b]
            ata[a, b] = acc
    vals, v = _sym_eig3(ata)
    if _det3(v) < 0.0:  # eigenvector signs are free, make V a rotation
        v[0, 2] = -v[0, 2]
        v[1, 2] = -v[1, 2]
        v[2, 2] = -v[2, 2]
    fv = np.empty((3, 3))  # columns F @ v_i
    for i in range(3):
        for r in range(3):
            fv[r, i] = (f_mat[r, 0] * v[0, i] + f_mat[r, 1] * v[1, i]
                        + f_mat[r, 2] * v[2, i])
    u = np.empty((3, 3))
    n0 = math.sqrt(fv[0, 0] ** 2 + fv[1, 0] ** 2 + fv[2, 0] ** 2)
    if n0 > 1e-30:
        for r in range(3):
            u[r, 0] = fv[r, 0] / n0
    else:
        u[0, 0] = 1.0
        u[1, 0] = 0.0
        u[2, 0] = 0.0
    d01 = u[0, 0] * fv[0, 1] + u[1, 0] * fv[1, 1] + u[2, 0] * fv[2, 1]
    t1 = np.empty(3)
    for r in range(3):
        t1[r] = fv[r, 1] - d01 * u[r, 0]
    n1 = math.sqrt(t1[0] ** 2 + t1[1] ** 2 + t1[2] ** 2)
    if n1 > 1e-30:
        for r in range(3):
            u[r, 1] = t1[r] / n1
    else:
        # any unit vector orthogonal to u0
        if abs(u[0, 0]) < 0.9:
            ax, ay, az = 1.0, 0.0, 0.0
        else:
            ax, ay, az = 0.0, 1.0, 0.0
        cx = u[1, 0] * az - u[2, 0] * ay
        cy = u[2, 0] * ax - u[0, 0] * az
        cz = u[0, 0] * ay - u[1, 0] * ax
        cn = math.sqrt(cx * cx + cy * cy + cz * cz)
        u[0, 1] = cx / cn
        u[1, 1] = cy / cn
        u[2, 1] = cz / cn
    # complete with the cross product so U is always a proper rotation
    u[0, 2] = u[1, 0] * u[2, 1] - u[2, 0] * u[1, 1]
    u[1, 2] = u[2, 0] * u[0, 1] - u[0, 0] * u[2, 1]
    u[2, 2] = u[0, 0] * u[1, 1] - u[1, 0] * u[0, 1]
    s = np.empty(3)
    for i in range(3):
        s[i] = (u[0, i] * fv[0, i] + u[1, i] * fv[1, i] + u[2, i] * fv[2, i])
    return u, s, v


@njit(cache=True)
def _u_diag_vt(u, diag, v):
    """U @ diag(d) @ V^T without temporaries."""
    out = np.empty((3, 3))
    for a in range(3):
        for b in range(3):
            out[a, b] = (u[a, 0] * diag[0] * v[b, 0]
                         + u[a, 1] * diag[1] * v[b, 1]
                         + u[a, 2] * diag[2] * v[b, 2])
    return out


@njit(cache=True)
def _polar3(f_mat):
    """Rotation factor of F via Newton iteration (needs det F > 0)."""
    x = f_mat.copy()
    for _ in range(24):
        det = _det3(x)
        if det <= 1e-30:
            # fall back to the SVD for badly conditioned input
            u, s, v = _svd3(f_mat)
            out = np.empty((3, 3))
            for a in range(3):
                for b in range(3):
                    out[a, b] = u[a, 0] * v[b, 0] + u[a, 1] * v[b, 1] + u[a, 2] * v[b, 2]
            return out
        inv_t = _inv_transpose3(x, det)
        diff = 0.0
        for a in range(3):
            for b in range(3):
                nxt = 0.5 * (x[a, b] + inv_t[a, b])
                diff += (nxt - x[a, b]) ** 2
                x[a, b] = nxt
        if diff < 1e-28:
            break
    return x


@njit(cache=True)
def _det3(m):
    return (
        m[0, 0] * (m[1, 1] * m[2, 2] - m[1, 2] * m[2, 1])
        - m[0, 1] * (m[1, 0] * m[2, 2] - m[1, 2] * m[2, 0])
        + m[0, 2] * (m[1, 0] * m[2, 1] - m[1, 1] * m[2, 0])
    )


@njit(cache=True)
def _inv_transpose3(m, det):
    out = np.empty((3, 3))
    out[0, 0] = (m[1, 1] * m[2, 2] - m[1, 2] * m[2, 1]) / det
    out[0, 1] = (m[1, 2] * m[2, 0] - m[1, 0] * m[2, 2]) / det
    out[0, 2] = (m[1, 0] * m[2, 1] - m[1, 1] * m[2, 0]) / det
    out[1, 0] = (m[0, 2] * m[2, 1] - m[0, 1] * m[2, 2]) / det
    out[1, 1] = (m[0, 0] * m[2, 2] - m[0, 2] * m[2, 0]) / det
    out[1, 2] = (m[0, 1] * m[2, 0] - m[0, 0] * m[2, 1]) / det
    out[2, 0] = (m[0, 1] * m[1, 2] - m[0, 2] * m[1, 1]) / det
    out[2, 1] = (m[0, 2] * m[1, 0] - m[0, 0] * m[1, 2]) / det
    out[2, 2] = (m[0, 0] * m[1, 1] - m[0, 1] * m[1, 0]) / det
    return out


@njit(cache=True)
def _stress_one(f_mat, kind, mu, lam, kappa):
    det = _det3(f_mat)
    if kind == KIND_LIQUID:
        # F is kept isotropic, so F^{-T} = J^{-1/3} I
        p = np.zeros((3, 3))
        coef = kappa * (det - 1.0) * det ** (2.0 / 3.0)
        p[0, 0] = coef
        p[1, 1] = coef
        p[2, 2] = coef
        return p
    if kind == KIND_ELASTIC:
        r = _polar3(f_mat)
        fit = _inv_transpose3(f_mat, det)
        return 2.0 * mu * (f_mat - r) + lam * (det - 1.0) * det * fit
    # granular: StVK in Hencky strain
    u, s, v = _svd3(f_mat)
    eps = np.empty(3)
    for i in range(3):
        eps[i] = math.log(max(s[i], 1e-12))
    tr = eps[0] + eps[1] + eps[2]
    center = np.empty(3)
    for i in range(3):
        center[i] = (2.0 * mu * eps[i] + lam * tr) / max(s[i], 1e-12)
    return _u_diag_vt(u, center, v)


@njit(cache=True)
def _stress_batch(f_all, kind, mu, lam, kappa, out):
    for i in range(f_all.shape[0]):
        out[i] = _stress_one(f_all[i], kind, mu, lam, kappa)


@njit(cache=True)
def _dp_project_one(f_mat, alpha, hardening_ratio):
    u, s, v = _svd3(f_mat)
    eps = np.empty(3)
    for i in range(3):
        eps[i] = math.log(max(s[i], 1e-12))
    tr = eps[0] + eps[1] + eps[2]
    ones = np.ones(3)
    if tr > 0.0:
        # volume gain: project all the way back to the undeformed state
        return _u_diag_vt(u, ones, v)
    mean = tr / 3.0
    dev = np.empty(3)
    for i in range(3):
        dev[i] = eps[i] - mean
    dev_norm = math.sqrt(dev[0] ** 2 + dev[1] ** 2 + dev[2] ** 2)
    if dev_norm < 1e-15:
        return f_mat.copy()
    amount = dev_norm + alpha * hardening_ratio * tr
    if amount <= 0.0:
        return f_mat.copy()
    scale = amount / dev_norm
    sigma = np.empty(3)
    for i in range(3):
        sigma[i] = math.exp(eps[i] - scale * dev[i])
    return _u_diag_vt(u, sigma, v)


@njit(cache=True)
def _dp_project_batch(f_all, alpha, hardening_ratio):
    for i in range(f_all.shape[0]):
        f_all[i] = _dp_project_one(f_all[i], alpha, hardening_ratio)


@njit(cache=True)
def _p2g(px, pv, pm, pvol, f_all, c_all, stress, grid_mass, grid_mom,
         ox, oy, oz, dx, dt):
    inv_dx = 1.0 / dx
    coef = -4.0 * inv_dx * inv_dx * dt
    for p in range(px.shape[0]):
        gx = (px[p, 0] - ox) * inv_dx
        gy = (px[p, 1] - oy) * inv_dx
        gz = (px[p, 2] - oz) * inv_dx
        bx = int(math.floor(gx - 0.5))
        by = int(math.floor(gy - 0.5))
        bz = int(math.floor(gz - 0.5))
        fx = gx - bx
        fy = gy - by
        fz = gz - bz
        wx = (0.5 * (1.5 - fx) ** 2, 0.75 - (fx - 1.0) ** 2, 0.5 * (fx - 0.5) ** 2)
        wy = (0.5 * (1.5 - fy) ** 2, 0.75 - (fy - 1.0) ** 2, 0.5 * (fy - 0.5) ** 2)
        wz = (0.5 * (1.5 - fz) ** 2, 0.75 - (fz - 1.0) ** 2, 0.5 * (fz - 0.5) ** 2)

        # fused MLS-MPM momentum: mass*C plus the stress force term
        affine = coef * pvol[p] * (stress[p] @ f_all[p].T) + pm[p] * c_all[p]
        for i in range(3):
            for j in range(3):
                for k in range(3):
                    w = wx[i] * wy[j] * wz[k]
                    dpos0 = (i - fx) * dx
                    dpos1 = (j - fy) * dx
                    dpos2 = (k - fz) * dx
                    ni = bx + i
                    nj = by + j
                    nk = bz + k
                    grid_mass[ni, nj, nk] += w * pm[p]
                    grid_mom[ni, nj, nk, 0] += w * (
                        pm[p] * pv[p, 0]
                        + affine[0, 0] * dpos0 + affine[0, 1] * dpos1 + affine[0, 2] * dpos2
                    )
                    grid_mom[ni, nj, nk, 1] += w * (
                        pm[p] * pv[p, 1]
                        + affine[1, 0] * dpos0 + affine[1, 1] * dpos1 + affine[1, 2] * dpos2
                    )
                    grid_mom[ni, nj, nk, 2] += w * (
                        pm[p] * pv[p, 2]
                        + affine[2, 0] * dpos0 + affine[2, 1] * dpos1 + affine[2, 2] * dpos2
                    )


@njit(cache=True)
def _grid_update(grid_mass, grid_mom, gx, gy, gz, dt, sd, normal, friction,
                 has_bc, i0, i1, j0, j1, k0, k1):
    rx, ry, rz = grid_mass.shape
    for i in range(i0, i1):
        for j in range(j0, j1):
            for k in range(k0, k1):
                m = grid_mass[i, j, k]
                if m <= 0.0:
                    continue
                vx = grid_mom[i, j, k, 0] / m + gx * dt
                vy = grid_mom[i, j, k, 1] / m + gy * dt
                vz = grid_mom[i, j, k, 2] / m + gz * dt
                if has_bc and sd[i, j, k] < 0.0:
                    nx = normal[i, j, k, 0]
                    ny = normal[i, j, k, 1]
                    nz = normal[i, j, k, 2]
                    vn = vx * nx + vy * ny + vz * nz
                    if vn < 0.0:
                        vx -= vn * nx
                        vy -= vn * ny
                        vz -= vn * nz
                        vt = math.sqrt(vx * vx + vy * vy + vz * vz)
                        if vt > 1e-12:
                            s = 1.0 + friction * vn / vt  # vn < 0
                            if s < 0.0:
                                s = 0.0
                            vx *= s
                            vy *= s
                            vz *= s
                # slip walls on the domain border
                if i < 2 and vx < 0.0:
                    vx = 0.0
                if i > rx - 3 and vx > 0.0:
                    vx = 0.0
                if j < 2 and vy < 0.0:
                    vy = 0.0
                if j > ry - 3 and vy > 0.0:
                    vy = 0.0
                if k < 2 and vz < 0.0:
                    vz = 0.0
                if k > rz - 3 and vz > 0.0:
                    vz = 0.0
                grid_mom[i, j, k, 0] = vx
                grid_mom[i, j, k, 1] = vy
                grid_mom[i, j, k, 2] = vz


@njit(cache=True)
def _g2p(px, pv, c_all, grid_mass, grid_vel, ox, oy, oz, dx, dt):
    inv_dx = 1.0 / dx
    four_inv_dx2 = 4.0 * inv_dx * inv_dx
    for p in range(px.shape[0]):
        gx = (px[p, 0] - ox) * inv_dx
        gy = (px[p, 1] - oy) * inv_dx
        gz = (px[p, 2] - oz) * inv_dx
        bx = int(math.floor(gx - 0.5))
        by = int(math.floor(gy - 0.5))
        bz = int(math.floor(gz - 0.5))
        fx = gx - bx
        fy = gy - by
        fz = gz - bz
        wx = (0.5 * (1.5 - fx) ** 2, 0.75 - (fx - 1.0) ** 2, 0.5 * (fx - 0.5) ** 2)
        wy = (0.5 * (1.5 - fy) ** 2, 0.75 - (fy - 1.0) ** 2, 0.5 * (fy - 0.5) ** 2)
        wz = (0.5 * (1.5 - fz) ** 2, 0.75 - (fz - 1.0) ** 2, 0.5 * (fz - 0.5) ** 2)
        nvx = 0.0
        nvy = 0.0
        nvz = 0.0
        cm = np.zeros((3, 3))
        for i in range(3):
            for j in range(3):
                for k in range(3):
                    ni = bx + i
                    nj = by + j
                    nk = bz + k
                    if grid_mass[ni, nj, nk] <= 0.0:
                        continue
                    w = wx[i] * wy[j] * wz[k]
                    dpos0 = (i - fx) * dx
                    dpos1 = (j - fy) * dx
                    dpos2 = (k - fz) * dx
                    gvx = grid_vel[ni, nj, nk, 0]
                    gvy = grid_vel[ni, nj, nk, 1]
                    gvz = grid_vel[ni, nj, nk, 2]
                    nvx += w * gvx
                    nvy += w * gvy
                    nvz += w * gvz
                    cm[0, 0] += w * gvx * dpos0
                    cm[0, 1] += w * gvx * dpos1
                    cm[0, 2] += w * gvx * dpos2
                    cm[1, 0] += w * gvy * dpos0
                    cm[1, 1] += w * gvy * dpos1
                    cm[1, 2] += w * gvy * dpos2
                    cm[2, 0] += w * gvz * dpos0
                    cm[2, 1] += w * gvz * dpos1
                    cm[2, 2] += w * gvz * dpos2
        pv[p, 0] = nvx
        pv[p, 1] = nvy
        pv[p, 2] = nvz
        for a in range(3):
            for b in range(3):
                c_all[p, a, b] = four_inv_dx2 * cm[a, b]
        px[p, 0] += nvx * dt
        px[p, 1] += nvy * dt
        px[p, 2] += nvz * dt


@njit(cache=True)
def _particle_bc(px, pv, sd, normal, ox, oy, oz, dx, friction):
    """Project penetrating particles out using the sampled boundary field."""
    inv_dx = 1.0 / dx
    rx, ry, rz = sd.shape
    for p in range(px.shape[0]):
        gx = (px[p, 0] - ox) * inv_dx
        gy = (px[p, 1] - oy) * inv_dx
        gz = (px[p, 2] - oz) * inv_dx
        i = int(math.floor(gx))
        j = int(math.floor(gy))
        k = int(math.floor(gz))
        if i < 0 or j < 0 or k < 0 or i > rx - 2 or j > ry - 2 or k > rz - 2:
            continue
        tx = gx - i
        ty = gy - j
        tz = gz - k
        d = 0.0
        nx = 0.0
        ny = 0.0
        nz = 0.0
        for a in range(2):
            wa = (1.0 - tx) if a == 0 else tx
            for b in range(2):
                wb = (1.0 - ty) if b == 0 else ty
                for c in range(2):
                    wc = (1.0 - tz) if c == 0 else tz
                    w = wa * wb * wc
                    d += w * sd[i + a, j + b, k + c]
                    nx += w * normal[i + a, j + b, k + c, 0]
                    ny += w * normal[i + a, j + b, k + c, 1]
                    nz += w * normal[i + a, j + b, k + c, 2]
        if d >= 0.0:
            continue
        nlen = math.sqrt(nx * nx + ny * ny + nz * nz)
        if nlen < 1e-12:
            continue
        nx /= nlen
        ny /= nlen
        nz /= nlen
        px[p, 0] -= d * nx
        px[p, 1] -= d * ny
        px[p, 2] -= d * nz
        vn = pv[p, 0] * nx + pv[p, 1] * ny + pv[p, 2] * nz
        if vn < 0.0:
            pv[p, 0] -= vn * nx
            pv[p, 1] -= vn * ny
            pv[p, 2] -= vn * nz
            vt = math.sqrt(pv[p, 0] ** 2 + pv[p, 1] ** 2 + pv[p, 2] ** 2)
            if vt > 1e-12:
                s = 1.0 + friction * vn / vt
                if s < 0.0:
                    s = 0.0
                pv[p, 0] *= s
                pv[p, 1] *= s
                pv[p, 2] *= s


@njit(cache=True)
def _update_f(f_all, c_all, dt, kind, alpha, hardening_ratio):
    """Returns the index of the first inverted element, or -1."""
    bad = -1
    for p in range(f_all.shape[0]):
        grad = np.eye(3) + dt * c_all[p]
        if kind == KIND_LIQUID:
            j_new = _det3(f_all[p]) * _det3(grad)
            if j_new <= 0.0:
                j_new = 1e-10
            side = j_new ** (1.0 / 3.0)
            f_all[p] = np.zeros((3, 3))
            f_all[p, 0, 0] = side
            f_all[p, 1, 1] = side
            f_all[p, 2, 2] = side
        else:
            f_new = grad @ f_all[p]
            if kind == KIND_GRANULAR:
                f_new = _dp_project_one(f_new, alpha, hardening_ratio)
            if _det3(f_new) <= 0.0 and bad < 0:
                bad = p
            f_all[p] = f_new
    return bad


# ------------------------------------------------------------- public API


def stress(material, f_mat: np.ndarray) -> np.ndarray:
    """First Piola-Kirchhoff stress of one deformation gradient."""
    f_mat = np.asarray(f_mat, dtype=np.float64)
    if _det3(f_mat) <= 0.0:
        raise InvertedElementError(
            f"deformation gradient has non-positive determinant {_det3(f_mat):.3e}"
        )
    kind = _KIND_CODES.get(material.kind)
    if kind is None:
        raise ValueError(f"material kind '{material.kind}' is not simulated by MPM")
    mu, lam = lame_parameters(material.youngs_modulus, material.poisson)
    kappa = bulk_modulus(material.youngs_modulus, material.poisson)
    return _stress_one(f_mat, kind, mu, lam, kappa)


def drucker_prager_alpha(theta_deg: float) -> float:
    s = math.sin(math.radians(theta_deg))
    return math.sqrt(2.0 / 3.0) * 2.0 * s / (3.0 - s)


def drucker_prager_project(f_elastic: np.ndarray, theta_deg: float,
                           poisson: float = 0.2) -> np.ndarray:
    """Return-map the elastic deformation onto the yield surface.

    The hardening ratio (3*lambda + 2*mu)/(2*mu) reduces to
    (1 + nu)/(1 - 2*nu), so only Poisson's ratio is needed.
    """
    alpha = drucker_prager_alpha(theta_deg)
    ratio = (1.0 + poisson) / (1.0 - 2.0 * poisson)
    return _dp_project_one(np.asarray(f_elastic, dtype=np.float64), alpha, ratio)


def yield_value(f_elastic: np.ndarray, theta_deg: float, poisson: float = 0.2) -> float:
    """Drucker-Prager yield function; <= 0 means admissible."""
    u, s, v = _svd3(np.asarray(f_elastic, dtype=np.float64))
    eps = np.log(np.maximum(np.abs(s), 1e-12))
    tr = eps.sum()
    dev = eps - tr / 3.0
    ratio = (1.0 + poisson) / (1.0 - 2.0 * poisson)
    return float(np.linalg.norm(dev) + drucker_prager_alpha(theta_deg) * ratio * tr)


def check_domain(particles: MpmParticles, grid: MpmGrid):
    g = (particles.positions - grid.origin) / grid.dx
    base = np.floor(g - 0.5).astype(int)
    lo_ok = (base >= 1).all(axis=1)
    hi_ok = (base <= np.array(grid.resolution) - 4).all(axis=1)
    ok = lo_ok & hi_ok
    if not ok.all():
        i = int(np.argmin(ok))
        raise OutOfDomainError(
            f"particle {i} at {particles.positions[i]} left the grid domain"
        )


def p2g(particles: MpmParticles, grid: MpmGrid, material, dt: float):
    """Scatter mass and momentum (with stress forces) onto the grid."""
    kind = _KIND_CODES[material.kind]
    mu, lam = lame_parameters(material.youngs_modulus, material.poisson)
    kappa = bulk_modulus(material.youngs_modulus, material.poisson)
    stress_all = np.empty_like(particles.F)
    _stress_batch(particles.F, kind, mu, lam, kappa, stress_all)
    grid.clear()
    base = np.floor((particles.positions - grid.origin) / grid.dx - 0.5).astype(int)
    lo = np.maximum(base.min(axis=0), 0)
    hi = np.minimum(base.max(axis=0) + 3, np.array(grid.resolution))
    grid._active = (int(lo[0]), int(hi[0]), int(lo[1]), int(hi[1]),
                    int(lo[2]), int(hi[2]))
    _p2g(
        particles.positions, particles.velocities, particles.masses,
        particles.volumes, particles.F, particles.C, stress_all,
        grid.mass, grid.momentum,
        grid.origin[0], grid.origin[1], grid.origin[2], grid.dx, dt,
    )


def mpm_step(particles: MpmParticles, grid: MpmGrid, material,
             external_accel=(0.0, 0.0, 0.0), boundary=None, dt: float = 1e-3,
             particle_forces=None, colliders=()) -> MpmParticles:
    """One explicit APIC cycle; returns the advanced particles.

    `external_accel` is applied uniformly on the grid; spatially varying
    forces (wind, point pulls) enter through `particle_forces` (N per
    particle), applied to particle velocities before the transfer.  When
    dt exceeds the sound-speed CFL bound for this material and grid the
    step is split internally into the required number of equal cycles.

    `boundary` is the static world boundary whose node field is cached on
    the grid; `colliders` are transient obstacles (other objects, frozen
    for this step) applied as velocity clamps on the nodes they overlap
    and on penetrating particles.  Colliders never move particles, so
    the transfer stays consistent and tracked volumes cannot drift.
    """
    n_sub = stable_substeps(material, grid.dx, dt)
    out = particles
    for _ in range(n_sub):
        out = _mpm_cycle(out, grid, material, external_accel, boundary,
                         dt / n_sub, particle_forces, colliders)
    return out


def _collider_box(grid, collider, box, margin):
    """Node index range of the collider's bounds clipped to the active box."""
    lo, hi = collider.aabb()
    a = np.floor((lo - margin - grid.origin) / grid.dx).astype(int)
    b = np.ceil((hi + margin - grid.origin) / grid.dx).astype(int) + 1
    i0, i1, j0, j1, k0, k1 = box
    a = np.maximum(a, (i0, j0, k0))
    b = np.minimum(b, (i1, j1, k1))
    if (a >= b).any():
        return None
    return a, b


def _clamp_against(velocities, d, normals, friction):
    """Remove inward normal velocity where d < 0, with Coulomb drag.

    Returns the indices (into d) that were modified and their new values.
    """
    vn = np.einsum("ij,ij->i", velocities, normals)
    hit = (d < 0.0) & (vn < 0.0)
    if not hit.any():
        return None, None
    v_t = velocities[hit] - vn[hit, None] * normals[hit]
    t_speed = np.linalg.norm(v_t, axis=1)
    safe = np.where(t_speed < 1e-12, 1.0, t_speed)
    scale = np.where(t_speed < 1e-12, 0.0,
                     np.maximum(0.0, 1.0 + friction * vn[hit] / safe))
    return np.where(hit)[0], v_t * scale[:, None]


def _collider_node_bc(grid, collider, friction, box):
    rng = _collider_box(grid, collider, box, 2.0 * grid.dx)
    if rng is None:
        return
    (a0, b0, c0), (a1, b1, c1) = rng
    mass = grid.mass[a0:a1, b0:b1, c0:c1]
    occupied = np.argwhere(mass > 0.0)
    if occupied.shape[0] == 0:
        return
    nodes = (occupied + (a0, b0, c0)) * grid.dx + grid.origin
    vel_view = grid.momentum[a0:a1, b0:b1, c0:c1]
    vel = vel_view[occupied[:, 0], occupied[:, 1], occupied[:, 2]]
    d, n = collider.query(nodes)
    idx, new_v = _clamp_against(vel, d, n, friction)
    if idx is None:
        return
    sel = occupied[idx]
    vel_view[sel[:, 0], sel[:, 1], sel[:, 2]] = new_v


def _collider_particle_bc(positions, velocities, collider, friction):
    lo, hi = collider.aabb()
    near = np.all((positions >= lo) & (positions <= hi), axis=1)
    if not near.any():
        return
    rows = np.where(near)[0]
    d, n = collider.query(positions[rows])
    idx, new_v = _clamp_against(velocities[rows], d, n, friction)
    if idx is not None:
        velocities[rows[idx]] = new_v


def _mpm_cycle(particles, grid, material, external_accel, boundary, dt,
               particle_forces, colliders=()):
    out = particles.copy()
    if particle_forces is not None:
        out.velocities = out.velocities + (
            np.asarray(particle_forces, dtype=np.float64)
            / out.masses[:, None] * dt
        )
    check_domain(out, grid)
    p2g(out, grid, material, dt)

    sd, normal = grid.boundary_samples(boundary)
    has_bc = boundary is not None
    if not has_bc:
        sd = np.zeros((1, 1, 1))
        normal = np.zeros((1, 1, 1, 3))
    ax, ay, az = (float(a) for a in external_accel)
    friction = getattr(material, "friction", 0.1)
    box = grid._active or (0, grid.resolution[0], 0, grid.resolution[1],
                           0, grid.resolution[2])
    _grid_update(grid.mass, grid.momentum, ax, ay, az, dt, sd, normal,
                 friction, has_bc, *box)
    # grid.momentum holds node velocities from here on.
    for collider in colliders:
        _collider_node_bc(grid, collider, friction, box)

    _g2p(out.positions, out.velocities, out.C, grid.mass, grid.momentum,
         grid.origin[0], grid.origin[1], grid.origin[2], grid.dx, dt)
    if has_bc:
        _particle_bc(out.positions, out.velocities, sd, normal,
                     grid.origin[0], grid.origin[1], grid.origin[2],
                     grid.dx, friction)
    for collider in colliders:
        _collider_particle_bc(out.positions, out.velocities, collider,
                              friction)

    kind = _KIND_CODES[material.kind]
    alpha = drucker_prager_alpha(material.friction_angle_deg)
    ratio = (1.0 + material.poisson) / (1.0 - 2.0 * material.poisson)
    bad = _update_f(out.F, out.C, dt, kind, alpha, ratio)
    if bad >= 0 and material.kind == "elastic":
        raise InvertedElementError(
            f"particle {bad} inverted (det F <= 0) during the deformation update"
        )
    return out
