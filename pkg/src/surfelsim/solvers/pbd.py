"""Position-based dynamics for cloth and smoke.

Cloth carries XPBD stretch constraints on mesh edges and dihedral
bending constraints between edge-adjacent triangles.  Smoke is a free
particle set with position-based fluid density constraints and XSPH
velocity smoothing; there is no buoyancy model, smoke momentum comes
entirely from initial conditions and external forces.

Constraint passes run sequentially in storage order (Gauss-Seidel) in
single-threaded numba kernels, so stepping is bit-deterministic.
Density constraints within one iteration are relaxed jointly from the
same density field (a Jacobi pass); iterations chain sequentially.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from numba import njit
from scipy.spatial import cKDTree

CONSTRAINT_KINDS = ("stretch", "bend", "density")


@dataclass(frozen=True)
class Constraint:
    kind: str
    indices: tuple
    rest: float
    compliance: float = 0.0
    kernel_radius: float = 0.0

    def __post_init__(self):
        if self.kind not in CONSTRAINT_KINDS:
            raise ValueError(f"unknown constraint kind '{self.kind}'")


@dataclass
class PbdState:
    positions: np.ndarray
    predicted_positions: np.ndarray
    velocities: np.ndarray
    inverse_masses: np.ndarray  # 0 marks a pinned particle
    constraints: list

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64)
        self.predicted_positions = np.asarray(self.predicted_positions,
                                              dtype=np.float64)
        self.velocities = np.asarray(self.velocities, dtype=np.float64)
        self.inverse_masses = np.asarray(self.inverse_masses, dtype=np.float64)
        self._packed = None

    def __len__(self):
        return self.positions.shape[0]

    def copy(self) -> "PbdState":
        out = PbdState(self.positions.copy(), self.predicted_positions.copy(),
                       self.velocities.copy(), self.inverse_masses.copy(),
                       list(self.constraints))
        out._packed = self._packed  # constraints are shared and immutable
        return out

    @classmethod
    def for_cloth(cls, positions, velocities, masses, edges, triangles,
                  material, pinned=()) -> "PbdState":
        positions = np.asarray(positions, dtype=np.float64)
        inv = 1.0 / np.asarray(masses, dtype=np.float64)
        inv[list(pinned)] = 0.0
        cons = cloth_constraints(positions, edges, triangles, material)
        return cls(positions, positions.copy(),
                   np.asarray(velocities, dtype=np.float64), inv, cons)

    @classmethod
    def for_smoke(cls, positions, velocities, spacing, h=None) -> "PbdState":
        positions = np.asarray(positions, dtype=np.float64)
        n = len(positions)
        if h is None:
            h = 2.0 * spacing
        rest = rest_number_density(spacing, h)
        cons = [Constraint("density", (i,), rest, kernel_radius=h)
                for i in range(n)]
        return cls(positions, positions.copy(),
                   np.asarray(velocities, dtype=np.float64), np.ones(n), cons)


def rest_number_density(spacing: float, h: float) -> float:
    """Poly6 number density of an infinite cubic lattice at `spacing`."""
    reach = int(math.ceil(h / spacing))
    total = 0.0
    for i in range(-reach, reach + 1):
        for j in range(-reach, reach + 1):
            for k in range(-reach, reach + 1):
                r2 = (i * i + j * j + k * k) * spacing * spacing
                if r2 < h * h:
                    total += (h * h - r2) ** 3
    return total * 315.0 / (64.0 * math.pi * h**9)


def bend_pairs(triangles) -> list:
    """(edge_a, edge_b, wing_a, wing_b) for every edge shared by two faces."""
    owners = {}
    for tri in triangles:
        a, b, c = (int(v) for v in tri)
        for i, j, w in ((a, b, c), (b, c, a), (a, c, b)):
            owners.setdefault((min(i, j), max(i, j)), []).append(w)
    pairs = []
    for (e0, e1), wings in sorted(owners.items()):
        if len(wings) == 2:
            pairs.append((e0, e1, wings[0], wings[1]))
    return pairs


def dihedral_angle(p0, p1, p2, p3) -> float:
    """Angle between the planes of triangles (p0,p1,p2) and (p0,p1,p3)."""
    e = p1 - p0
    n1 = np.cross(e, p2 - p0)
    n2 = np.cross(e, p3 - p0)
    l1, l2 = np.linalg.norm(n1), np.linalg.norm(n2)
    if l1 < 1e-12 or l2 < 1e-12:
        return math.pi
    d = float(np.clip(n1 @ n2 / (l1 * l2), -1.0, 1.0))
    return math.acos(d)


def cloth_constraints(positions, edges, triangles, material) -> list:
    cons = []
    seen = set()
    for i, j in np.asarray(edges, dtype=int):
        key = (min(i, j), max(i, j))
        if key in seen:
            continue
        seen.add(key)
        rest = float(np.linalg.norm(positions[key[0]] - positions[key[1]]))
        cons.append(Constraint("stretch", key, rest,
                               material.stretch_compliance))
    if triangles is not None and len(triangles):
        for e0, e1, w0, w1 in bend_pairs(triangles):
            rest = dihedral_angle(positions[e0], positions[e1],
                                  positions[w0], positions[w1])
            cons.append(Constraint("bend", (e0, e1, w0, w1), rest,
                                   material.bending_compliance))
    return cons


# ---------------------------------------------------------------- packing


@dataclass
class _Packed:
    stretch_idx: np.ndarray
    stretch_rest: np.ndarray
    stretch_comp: np.ndarray
    bend_idx: np.ndarray
    bend_rest: np.ndarray
    bend_comp: np.ndarray
    density_rest: float
    density_h: float
    has_density: bool


def _pack(constraints) -> _Packed:
    s_idx, s_rest, s_comp = [], [], []
    b_idx, b_rest, b_comp = [], [], []
    d_rest, d_h = [], []
    for c in constraints:
        if c.kind == "stretch":
            s_idx.append(c.indices)
            s_rest.append(c.rest)
            s_comp.append(c.compliance)
        elif c.kind == "bend":
            b_idx.append(c.indices)
            b_rest.append(c.rest)
            b_comp.append(c.compliance)
        else:
            d_rest.append(c.rest)
            d_h.append(c.kernel_radius)
    if d_h and (np.ptp(d_h) > 0 or np.ptp(d_rest) > 0):
        raise ValueError("density constraints must share one kernel radius "
                         "and rest density")
    return _Packed(
        np.array(s_idx, dtype=np.int64).reshape(-1, 2),
        np.array(s_rest), np.array(s_comp),
        np.array(b_idx, dtype=np.int64).reshape(-1, 4),
        np.array(b_rest), np.array(b_comp),
        float(d_rest[0]) if d_rest else 0.0,
        float(d_h[0]) if d_h else 0.0,
        bool(d_rest),
    )


# ---------------------------------------------------------------- kernels


@njit(cache=True)
def _stretch_pass(pred, inv_mass, idx, rest, comp, lam, dt):
    for c in range(idx.shape[0]):
        i = idx[c, 0]
        j = idx[c, 1]
        wi = inv_mass[i]
        wj = inv_mass[j]
        wsum = wi + wj
        if wsum == 0.0:
            continue
        dx = pred[i, 0] - pred[j, 0]
        dy = pred[i, 1] - pred[j, 1]
        dz = pred[i, 2] - pred[j, 2]
        dist = math.sqrt(dx * dx + dy * dy + dz * dz)
        if dist < 1e-12:
            continue
        cval = dist - rest[c]
        alpha = comp[c] / (dt * dt)
        dlam = (-cval - alpha * lam[c]) / (wsum + alpha)
        lam[c] += dlam
        nx = dx / dist
        ny = dy / dist
        nz = dz / dist
        pred[i, 0] += wi * dlam * nx
        pred[i, 1] += wi * dlam * ny
        pred[i, 2] += wi * dlam * nz
        pred[j, 0] -= wj * dlam * nx
        pred[j, 1] -= wj * dlam * ny
        pred[j, 2] -= wj * dlam * nz


@njit(cache=True)
def _cross(ax, ay, az, bx, by, bz):
    return ay * bz - az * by, az * bx - ax * bz, ax * by - ay * bx


@njit(cache=True)
def _bend_pass(pred, inv_mass, idx, rest, comp, lam, dt):
    for c in range(idx.shape[0]):
        i0 = idx[c, 0]
        i1 = idx[c, 1]
        i2 = idx[c, 2]
        i3 = idx[c, 3]
        w0 = inv_mass[i0]
        w1 = inv_mass[i1]
        w2 = inv_mass[i2]
        w3 = inv_mass[i3]
        if w0 + w1 + w2 + w3 == 0.0:
            continue
        # relative to p0
        p1x = pred[i1, 0] - pred[i0, 0]
        p1y = pred[i1, 1] - pred[i0, 1]
        p1z = pred[i1, 2] - pred[i0, 2]
        p2x = pred[i2, 0] - pred[i0, 0]
        p2y = pred[i2, 1] - pred[i0, 1]
        p2z = pred[i2, 2] - pred[i0, 2]
        p3x = pred[i3, 0] - pred[i0, 0]
        p3y = pred[i3, 1] - pred[i0, 1]
        p3z = pred[i3, 2] - pred[i0, 2]
        c1x, c1y, c1z = _cross(p1x, p1y, p1z, p2x, p2y, p2z)
        c2x, c2y, c2z = _cross(p1x, p1y, p1z, p3x, p3y, p3z)
        l1 = math.sqrt(c1x * c1x + c1y * c1y + c1z * c1z)
        l2 = math.sqrt(c2x * c2x + c2y * c2y + c2z * c2z)
        if l1 < 1e-12 or l2 < 1e-12:
            continue
        n1x, n1y, n1z = c1x / l1, c1y / l1, c1z / l1
        n2x, n2y, n2z = c2x / l2, c2y / l2, c2z / l2
        d = n1x * n2x + n1y * n2y + n1z * n2z
        if d > 1.0:
            d = 1.0
        if d < -1.0:
            d = -1.0
        sin_t = math.sqrt(max(1.0 - d * d, 0.0))
        if sin_t < 1e-6:
            continue
        cval = math.acos(d) - rest[c]
        # q_i = grad_i of d = n1.n2 (checked against finite differences)
        u1x = (n2x - d * n1x) / l1
        u1y = (n2y - d * n1y) / l1
        u1z = (n2z - d * n1z) / l1
        u2x = (n1x - d * n2x) / l2
        u2y = (n1y - d * n2y) / l2
        u2z = (n1z - d * n2z) / l2
        q2x, q2y, q2z = _cross(u1x, u1y, u1z, p1x, p1y, p1z)
        q3x, q3y, q3z = _cross(u2x, u2y, u2z, p1x, p1y, p1z)
        ax, ay, az = _cross(p2x, p2y, p2z, u1x, u1y, u1z)
        bx, by, bz = _cross(p3x, p3y, p3z, u2x, u2y, u2z)
        q1x = ax + bx
        q1y = ay + by
        q1z = az + bz
        q0x = -q1x - q2x - q3x
        q0y = -q1y - q2y - q3y
        q0z = -q1z - q2z - q3z
        # grad C_i = -q_i / sin(theta)
        denom = (w0 * (q0x * q0x + q0y * q0y + q0z * q0z)
                 + w1 * (q1x * q1x + q1y * q1y + q1z * q1z)
                 + w2 * (q2x * q2x + q2y * q2y + q2z * q2z)
                 + w3 * (q3x * q3x + q3y * q3y + q3z * q3z)) / (sin_t * sin_t)
        alpha = comp[c] / (dt * dt)
        if denom + alpha < 1e-30:
            continue
        dlam = (-cval - alpha * lam[c]) / (denom + alpha)
        lam[c] += dlam
        scale = -dlam / sin_t
        pred[i0, 0] += w0 * scale * q0x
        pred[i0, 1] += w0 * scale * q0y
        pred[i0, 2] += w0 * scale * q0z
        pred[i1, 0] += w1 * scale * q1x
        pred[i1, 1] += w1 * scale * q1y
        pred[i1, 2] += w1 * scale * q1z
        pred[i2, 0] += w2 * scale * q2x
        pred[i2, 1] += w2 * scale * q2y
        pred[i2, 2] += w2 * scale * q2z
        pred[i3, 0] += w3 * scale * q3x
        pred[i3, 1] += w3 * scale * q3y
        pred[i3, 2] += w3 * scale * q3z


@njit(cache=True)
def _density_pass(pred, inv_mass, pair_i, pair_j, rest, h, corrections):
    """One joint relaxation of all density constraints (clamped PBF)."""
    n = pred.shape[0]
    poly6 = 315.0 / (64.0 * math.pi * h**9)
    spiky = -45.0 / (math.pi * h**6)
    h2 = h * h
    dens = np.empty(n)
    self_w = poly6 * h2**3
    for i in range(n):
        dens[i] = self_w
    for p in range(pair_i.shape[0]):
        i = pair_i[p]
        j = pair_j[p]
        dx = pred[i, 0] - pred[j, 0]
        dy = pred[i, 1] - pred[j, 1]
        dz = pred[i, 2] - pred[j, 2]
        r2 = dx * dx + dy * dy + dz * dz
        if r2 < h2:
            w = poly6 * (h2 - r2) ** 3
            dens[i] += w
            dens[j] += w
    # lambda per particle; over-density only, so resting lattices are inert
    lam = np.empty(n)
    grad_i = np.zeros((n, 3))
    sum_g2 = np.zeros(n)
    for p in range(pair_i.shape[0]):
        i = pair_i[p]
        j = pair_j[p]
        dx = pred[i, 0] - pred[j, 0]
        dy = pred[i, 1] - pred[j, 1]
        dz = pred[i, 2] - pred[j, 2]
        r = math.sqrt(dx * dx + dy * dy + dz * dz)
        if r >= h or r < 1e-12:
            continue
        g = spiky * (h - r) ** 2 / (r * rest)
        gx = g * dx
        gy = g * dy
        gz = g * dz
        grad_i[i, 0] += gx
        grad_i[i, 1] += gy
        grad_i[i, 2] += gz
        grad_i[j, 0] -= gx
        grad_i[j, 1] -= gy
        grad_i[j, 2] -= gz
        g2 = gx * gx + gy * gy + gz * gz
        sum_g2[i] += g2
        sum_g2[j] += g2
    eps = 100.0
    for i in range(n):
        c = dens[i] / rest - 1.0
        if c < 0.0:
            c = 0.0
        gi2 = grad_i[i, 0] ** 2 + grad_i[i, 1] ** 2 + grad_i[i, 2] ** 2
        lam[i] = -c / (gi2 + sum_g2[i] + eps)
    corrections[:, :] = 0.0
    for p in range(pair_i.shape[0]):
        i = pair_i[p]
        j = pair_j[p]
        dx = pred[i, 0] - pred[j, 0]
        dy = pred[i, 1] - pred[j, 1]
        dz = pred[i, 2] - pred[j, 2]
        r = math.sqrt(dx * dx + dy * dy + dz * dz)
        if r >= h or r < 1e-12:
            continue
        g = spiky * (h - r) ** 2 / (r * rest)
        s = lam[i] + lam[j]
        corrections[i, 0] += s * g * dx
        corrections[i, 1] += s * g * dy
        corrections[i, 2] += s * g * dz
        corrections[j, 0] -= s * g * dx
        corrections[j, 1] -= s * g * dy
        corrections[j, 2] -= s * g * dz
    for i in range(n):
        if inv_mass[i] == 0.0:
            corrections[i, 0] = 0.0
            corrections[i, 1] = 0.0
            corrections[i, 2] = 0.0


@njit(cache=True)
def _xsph_pass(vel, pair_i, pair_j, pred, h, rest, factor):
    """Blend each velocity toward the kernel-weighted neighborhood mean."""
    n = vel.shape[0]
    poly6 = 315.0 / (64.0 * math.pi * h**9)
    h2 = h * h
    out = vel.copy()
    for p in range(pair_i.shape[0]):
        i = pair_i[p]
        j = pair_j[p]
        dx = pred[i, 0] - pred[j, 0]
        dy = pred[i, 1] - pred[j, 1]
        dz = pred[i, 2] - pred[j, 2]
        r2 = dx * dx + dy * dy + dz * dz
        if r2 >= h2:
            continue
        w = factor * poly6 * (h2 - r2) ** 3 / rest
        for a in range(3):
            diff = vel[j, a] - vel[i, a]
            out[i, a] += w * diff
            out[j, a] -= w * diff
    for i in range(n):
        for a in range(3):
            vel[i, a] = out[i, a]


# ------------------------------------------------------------- public API


def solve_stretch(p_i, p_j, rest_length, inv_masses, compliance, dt):
    """One XPBD relaxation of a distance constraint; returns (dp_i, dp_j)."""
    p_i = np.asarray(p_i, dtype=np.float64)
    p_j = np.asarray(p_j, dtype=np.float64)
    wi, wj = float(inv_masses[0]), float(inv_masses[1])
    diff = p_i - p_j
    dist = float(np.linalg.norm(diff))
    if dist < 1e-12 or wi + wj == 0.0:
        return np.zeros(3), np.zeros(3)
    c = dist - rest_length
    alpha = compliance / (dt * dt)
    dlam = -c / (wi + wj + alpha)
    n = diff / dist
    return wi * dlam * n, -wj * dlam * n


def solve_density(positions, neighbors, rest_density, h, inv_masses=None):
    """One joint PBF relaxation; returns per-particle position corrections.

    `neighbors` is an (m, 2) array of index pairs within distance h (each
    unordered pair once).  Only compression is corrected: density deficits
    near free surfaces produce no motion, so resting lattices stay put.
    """
    positions = np.asarray(positions, dtype=np.float64)
    pairs = np.asarray(neighbors, dtype=np.int64).reshape(-1, 2)
    if inv_masses is None:
        inv_masses = np.ones(len(positions))
    corrections = np.zeros_like(positions)
    _density_pass(positions, np.asarray(inv_masses, dtype=np.float64),
                  np.ascontiguousarray(pairs[:, 0]),
                  np.ascontiguousarray(pairs[:, 1]),
                  float(rest_density), float(h), corrections)
    return corrections


def density_residual(positions, neighbors, rest_density, h) -> float:
    """Max over-density constraint value C_i = max(rho_i/rho0 - 1, 0)."""
    positions = np.asarray(positions, dtype=np.float64)
    n = len(positions)
    dens = np.full(n, 315.0 / (64.0 * math.pi * h**9) * (h * h) ** 3)
    for i, j in np.asarray(neighbors, dtype=int).reshape(-1, 2):
        r2 = float(((positions[i] - positions[j]) ** 2).sum())
        if r2 < h * h:
            w = 315.0 / (64.0 * math.pi * h**9) * (h * h - r2) ** 3
            dens[i] += w
            dens[j] += w
    return float(np.maximum(dens / rest_density - 1.0, 0.0).max())


def find_neighbors(positions, h):
    """Unordered index pairs within distance h, sorted for determinism."""
    tree = cKDTree(np.asarray(positions, dtype=np.float64))
    pairs = tree.query_pairs(h, output_type="ndarray")
    if len(pairs) == 0:
        return np.zeros((0, 2), dtype=np.int64)
    order = np.lexsort((pairs[:, 1], pairs[:, 0]))
    return pairs[order].astype(np.int64)


def pbd_step(state: PbdState, external_accel=(0.0, 0.0, 0.0), boundary=None,
             dt: float = 1e-2, substeps: int = 10, iterations: int = 10,
             drag: float = 3.0, xsph: float = 0.0) -> PbdState:
    """Advance one frame step of dt split into `substeps` XPBD substeps.

    `drag` is a linear air-drag rate (1/s) on velocities; it damps global
    swing modes that constraint projection alone cannot dissipate.
    `xsph` blends velocities toward the local mean for smoke (the material
    viscosity is passed through here).
    """
    out = state.copy()
    if out._packed is None:
        out._packed = _pack(out.constraints)
    packed = out._packed
    accel = np.asarray(external_accel, dtype=np.float64)
    if accel.ndim == 1:
        accel = np.broadcast_to(accel, out.positions.shape)
    h_sub = dt / substeps
    moving = out.inverse_masses > 0.0

    for _ in range(substeps):
        out.velocities[moving] += accel[moving] * h_sub
        out.predicted_positions = out.positions + out.velocities * h_sub
        out.predicted_positions[~moving] = out.positions[~moving]

        s_lam = np.zeros(len(packed.stretch_rest))
        b_lam = np.zeros(len(packed.bend_rest))
        pairs = None
        if packed.has_density:
            pairs = find_neighbors(out.predicted_positions, packed.density_h)
        corrections = np.zeros_like(out.positions)
        for _ in range(iterations):
            if len(packed.stretch_rest):
                _stretch_pass(out.predicted_positions, out.inverse_masses,
                              packed.stretch_idx, packed.stretch_rest,
                              packed.stretch_comp, s_lam, h_sub)
            if len(packed.bend_rest):
                _bend_pass(out.predicted_positions, out.inverse_masses,
                           packed.bend_idx, packed.bend_rest,
                           packed.bend_comp, b_lam, h_sub)
            if packed.has_density:
                _density_pass(out.predicted_positions, out.inverse_masses,
                              np.ascontiguousarray(pairs[:, 0]),
                              np.ascontiguousarray(pairs[:, 1]),
                              packed.density_rest, packed.density_h,
                              corrections)
                out.predicted_positions += corrections

        if boundary is not None:
            d, n = boundary.query(out.predicted_positions)
            inside = (d < 0.0) & moving
            if inside.any():
                out.predicted_positions[inside] -= d[inside, None] * n[inside]

        out.velocities = (out.predicted_positions - out.positions) / h_sub
        out.positions = out.predicted_positions.copy()
        out.velocities *= max(0.0, 1.0 - drag * h_sub)
        if xsph > 0.0 and packed.has_density and pairs is not None:
            _xsph_pass(out.velocities, np.ascontiguousarray(pairs[:, 0]),
                       np.ascontiguousarray(pairs[:, 1]),
                       out.positions, packed.density_h, packed.density_rest,
                       float(xsph))
    return out
