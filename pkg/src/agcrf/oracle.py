"""Independent brute-force verifiers.

Everything here is written with plain loops or dense linear algebra and
deliberately shares no code with the vectorized modules it checks: naive
convolution/pooling, a direct dense solve of the fixed-gate mean update,
exhaustive enumeration over gate configurations on tiny instances, and a
central finite-difference gradient estimator.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "OracleError",
    "naive_conv2d",
    "naive_deconv2d",
    "naive_maxpool2d",
    "fd_gradient",
    "FixedGateInstance",
    "assemble_dense_system",
    "gaussian_solve",
    "solve_fixed_gate_mean",
    "naive_message",
    "naive_attention_presigmoid",
    "naive_energy",
    "GateEnumInstance",
    "enumerate_gates",
]


class OracleError(ValueError):
    pass


# -- naive reference ops ---------------------------------------------------


def naive_conv2d(x, kern, stride=1, pad=0):
    """Direct 6-nested-loop cross-correlation, (C_in,H,W) x (C_out,C_in,k,k)."""
    c_in, h, w = x.shape
    c_out, _, k, _ = kern.shape
    oh = (h + 2 * pad - k) // stride + 1
    ow = (w + 2 * pad - k) // stride + 1
    out = np.zeros((c_out, oh, ow))
    for co in range(c_out):
        for oy in range(oh):
            for ox in range(ow):
                acc = 0.0
                for ci in range(c_in):
                    for ky in range(k):
                        for kx in range(k):
                            iy = oy * stride + ky - pad
                            ix = ox * stride + kx - pad
                            if 0 <= iy < h and 0 <= ix < w:
                                acc += x[ci, iy, ix] * kern[co, ci, ky, kx]
                out[co, oy, ox] = acc
    return out


def naive_deconv2d(x, kern, stride=1, pad=0):
    """Scatter form of the transposed convolution; kern is (C_a,C_b,k,k)."""
    c_a, h, w = x.shape
    _, c_b, k, _ = kern.shape
    oh = (h - 1) * stride - 2 * pad + k
    ow = (w - 1) * stride - 2 * pad + k
    out = np.zeros((c_b, oh, ow))
    for ca in range(c_a):
        for iy in range(h):
            for ix in range(w):
                v = x[ca, iy, ix]
                for cb in range(c_b):
                    for ky in range(k):
                        for kx in range(k):
                            oy = iy * stride + ky - pad
                            ox = ix * stride + kx - pad
                            if 0 <= oy < oh and 0 <= ox < ow:
                                out[cb, oy, ox] += v * kern[ca, cb, ky, kx]
    return out


def naive_maxpool2d(x, k, stride):
    c, h, w = x.shape
    oh = (h - k) // stride + 1
    ow = (w - k) // stride + 1
    out = np.zeros((c, oh, ow))
    for ci in range(c):
        for oy in range(oh):
            for ox in range(ow):
                best = -math.inf
                for ky in range(k):
                    for kx in range(k):
                        best = max(best, x[ci, oy * stride + ky, ox * stride + kx])
                out[ci, oy, ox] = best
    return out


def fd_gradient(loss_fn, x, step=1e-5):
    """Central finite differences of a scalar function over a flat vector."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    for i in range(x.size):
        xp = x.copy()
        xm = x.copy()
        xp.flat[i] += step
        xm.flat[i] -= step
        g.flat[i] = (loss_fn(xp) - loss_fn(xm)) / (2.0 * step)
    return g


def fd_gradient_at(loss_fn, x, indices, step=1e-5):
    """fd_gradient restricted to a subset of coordinates."""
    x = np.asarray(x, dtype=np.float64)
    out = np.zeros(len(indices))
    for n, i in enumerate(indices):
        xp = x.copy()
        xm = x.copy()
        xp.flat[i] += step
        xm.flat[i] -= step
        out[n] = (loss_fn(xp) - loss_fn(xm)) / (2.0 * step)
    return out


# -- fixed-gate dense system -------------------------------------------------


@dataclass
class FixedGateInstance:
    """A frozen-gate mean update instance in plain numpy.

    f[s]:        (C_s, H, W) observed features
    a[s]:        (H, W) strictly positive unary weights
    coupling:    (e, r) -> (C_r, C_e, k, k) pairwise kernels, odd k, pad k//2
    alpha:       (e, r) -> (H, W) frozen gate expectations
    lin_rc:      optional (e, r) -> (1, C_r, k, k) receiver linear kernels,
                 only used when include_linear is set
    """

    f: list
    a: list
    coupling: dict
    alpha: dict
    lin_rc: dict = field(default_factory=dict)
    include_linear: bool = False

    @property
    def num_scales(self):
        return len(self.f)

    def unknowns(self):
        h, w = self.f[0].shape[1:]
        return sum(fs.shape[0] for fs in self.f) * h * w


def _scale_offsets(inst):
    h, w = inst.f[0].shape[1:]
    offs = [0]
    for fs in inst.f:
        offs.append(offs[-1] + fs.shape[0] * h * w)
    return offs, h, w


def _linear_message(inst, e, r):
    """Boundary-aware stencil sums of the receiver-side linear kernel."""
    c_r = inst.f[r].shape[0]
    h, w = inst.f[r].shape[1:]
    kern = inst.lin_rc[(e, r)]
    k = kern.shape[2]
    pad = k // 2
    msg = np.zeros((c_r, h, w))
    for c in range(c_r):
        for iy in range(h):
            for ix in range(w):
                acc = 0.0
                for ky in range(k):
                    for kx in range(k):
                        jy = iy + ky - pad
                        jx = ix + kx - pad
                        if 0 <= jy < h and 0 <= jx < w:
                            acc += kern[0, c, ky, kx]
                msg[c, iy, ix] = acc
    return msg


def assemble_dense_system(inst):
    """Rearrange the fixed-point condition h = f + (1/a) sum gated messages
    into (I - T) h = b, entry by entry. Index order is (scale, channel, y, x).
    """
    n = inst.unknowns()
    if n > 4096:
        raise OracleError(f"{n} unknowns exceeds the 4096 dense-system cap")
    offs, h, w = _scale_offsets(inst)
    a_mat = np.eye(n)
    b = np.zeros(n)
    for s, fs in enumerate(inst.f):
        b[offs[s] : offs[s + 1]] = fs.ravel()
    for (e, r), kern in inst.coupling.items():
        c_r, c_e, k, _ = kern.shape
        pad = k // 2
        alpha = inst.alpha[(e, r)]
        a_r = inst.a[r]
        for cr in range(c_r):
            for iy in range(h):
                for ix in range(w):
                    row = offs[r] + (cr * h + iy) * w + ix
                    scale_fac = alpha[iy, ix] / a_r[iy, ix]
                    for ce in range(c_e):
                        for ky in range(k):
                            for kx in range(k):
                                jy = iy + ky - pad
                                jx = ix + kx - pad
                                if 0 <= jy < h and 0 <= jx < w:
                                    col = offs[e] + (ce * h + jy) * w + jx
                                    a_mat[row, col] -= scale_fac * kern[cr, ce, ky, kx]
        if inst.include_linear and (e, r) in inst.lin_rc:
            msg = _linear_message(inst, e, r)
            b[offs[r] : offs[r + 1]] += (alpha / a_r * msg).ravel()
    return a_mat, b


def gaussian_solve(a_mat, b):
    """Gaussian elimination with partial pivoting (rows vectorized)."""
    a = np.array(a_mat, dtype=np.float64)
    x = np.array(b, dtype=np.float64)
    n = a.shape[0]
    scale = np.abs(a).max()
    if scale == 0:
        raise OracleError("singular system: zero matrix")
    for k in range(n):
        p = k + int(np.argmax(np.abs(a[k:, k])))
        if abs(a[p, k]) < 1e-13 * scale:
            raise OracleError(f"singular system: pivot ratio {abs(a[p, k]) / scale:.3e} at column {k}")
        if p != k:
            a[[k, p]] = a[[p, k]]
            x[[k, p]] = x[[p, k]]
        fac = a[k + 1 :, k] / a[k, k]
        a[k + 1 :, k:] -= fac[:, None] * a[k, k:]
        x[k + 1 :] -= fac * x[k]
    sol = np.zeros(n)
    for k in range(n - 1, -1, -1):
        sol[k] = (x[k] - a[k, k + 1 :] @ sol[k + 1 :]) / a[k, k]
    return sol


def solve_fixed_gate_mean(inst):
    """Exact latent means for frozen gates; returns per-scale (C,H,W) arrays."""
    a_mat, b = assemble_dense_system(inst)
    sol = gaussian_solve(a_mat, b)
    residual = np.abs(a_mat @ sol - b).max()
    if residual > 1e-9:
        raise OracleError(f"direct solve residual {residual:.3e} exceeds 1e-9")
    offs, h, w = _scale_offsets(inst)
    return [sol[offs[s] : offs[s + 1]].reshape(inst.f[s].shape) for s in range(inst.num_scales)]


# -- naive message / attention / energy --------------------------------------


def naive_message(h_e, kern):
    """Explicit double sum over channels and window taps of the pairwise term."""
    return naive_conv2d(h_e, kern, stride=1, pad=kern.shape[2] // 2)


def naive_attention_presigmoid(h_r, h_e, x_r, x_e, kern_l, kern_em, kern_rc, scalar):
    """Term-by-term gate pre-activation: quadratic coupling plus both linear terms."""
    quad = h_r * naive_conv2d(h_e, kern_l, pad=kern_l.shape[2] // 2)
    lin_e = naive_conv2d(x_e, kern_em, pad=kern_em.shape[2] // 2)
    lin_r = naive_conv2d(x_r, kern_rc, pad=kern_rc.shape[2] // 2)
    if scalar:
        return quad.sum(axis=0, keepdims=True) + lin_e + lin_r
    return quad + lin_e + lin_r


def naive_energy(h, f, a, coupling, lin_em, lin_rc, gates):
    """Scalar-loop evaluation of the gated energy.

    E = -sum_s sum_i (a/2)||h - f||^2
        + sum_(e,r) sum_i g_(e,r)^i sum_j [h_r(i)' L h_e(j) + l_em.h_e(j) + l_rc.h_r(j)]

    The constant corner entry of the augmented kernel block is dropped,
    matching the omission of a gate-side unary term.
    """
    total = 0.0
    for s in range(len(f)):
        c, hh, ww = f[s].shape
        for ci in range(c):
            for iy in range(hh):
                for ix in range(ww):
                    d = h[s][ci, iy, ix] - f[s][ci, iy, ix]
                    total -= 0.5 * a[s][iy, ix] * d * d
    for (e, r), kern in coupling.items():
        c_r, c_e, k, _ = kern.shape
        pad = k // 2
        hh, ww = f[r].shape[1:]
        for iy in range(hh):
            for ix in range(ww):
                g = gates[(e, r)][iy, ix]
                if g == 0:
                    continue
                acc = 0.0
                for ky in range(k):
                    for kx in range(k):
                        jy = iy + ky - pad
                        jx = ix + kx - pad
                        if not (0 <= jy < hh and 0 <= jx < ww):
                            continue
                        for cr in range(c_r):
                            for ce in range(c_e):
                                acc += h[r][cr, iy, ix] * kern[cr, ce, ky, kx] * h[e][ce, jy, jx]
                        if lin_em:
                            for ce in range(c_e):
                                acc += lin_em[(e, r)][0, ce, ky, kx] * h[e][ce, jy, jx]
                        if lin_rc:
                            for cr in range(c_r):
                                acc += lin_rc[(e, r)][0, cr, ky, kx] * h[r][cr, jy, jx]
                total += g * acc
    return total


# -- exhaustive gate enumeration ----------------------------------------------


@dataclass
class GateEnumInstance:
    """Tiny instance for exact posterior computation.

    Gate sites are all (pair, pixel) combinations; their count is capped at
    12 so at most 4096 configurations are integrated.
    """

    f: list
    a: list
    coupling: dict
    lin_em: dict = field(default_factory=dict)
    lin_rc: dict = field(default_factory=dict)


@dataclass
class GateEnumReport:
    sites: list
    config_log_evidence: np.ndarray
    config_prob: np.ndarray
    marginals: dict
    exact_mean: list
    normalization_residual: float


def _quadratic_parts(inst, gates):
    """S(h) = -0.5 h'Ah + b'h + c for one gate configuration."""
    offs, h, w = _scale_offsets(inst)
    n = offs[-1]
    a_diag = np.zeros(n)
    for s, fs in enumerate(inst.f):
        a_diag[offs[s] : offs[s + 1]] = np.broadcast_to(inst.a[s], fs.shape).ravel()
    a_mat = np.diag(a_diag)
    b = a_diag * np.concatenate([fs.ravel() for fs in inst.f])
    c = -0.5 * float(np.sum(a_diag * np.concatenate([fs.ravel() for fs in inst.f]) ** 2))
    for (e, r), kern in inst.coupling.items():
        c_r, c_e, k, _ = kern.shape
        pad = k // 2
        for iy in range(h):
            for ix in range(w):
                if gates[(e, r)][iy, ix] == 0:
                    continue
                for ky in range(k):
                    for kx in range(k):
                        jy = iy + ky - pad
                        jx = ix + kx - pad
                        if not (0 <= jy < h and 0 <= jx < w):
                            continue
                        for cr in range(c_r):
                            row = offs[r] + (cr * h + iy) * w + ix
                            for ce in range(c_e):
                                col = offs[e] + (ce * h + jy) * w + jx
                                # h' W h contributes W + W' to the quadratic form
                                a_mat[row, col] -= kern[cr, ce, ky, kx]
                                a_mat[col, row] -= kern[cr, ce, ky, kx]
                        if inst.lin_em:
                            for ce in range(c_e):
                                b[offs[e] + (ce * h + jy) * w + jx] += inst.lin_em[(e, r)][0, ce, ky, kx]
                        if inst.lin_rc:
                            for cr in range(c_r):
                                b[offs[r] + (cr * h + jy) * w + jx] += inst.lin_rc[(e, r)][0, cr, ky, kx]
    return a_mat, b, c


def _is_positive_definite(a_mat):
    diag = np.diag(a_mat)
    radius = np.abs(a_mat).sum(axis=1) - np.abs(diag)
    if np.all(diag - radius > 0):  # Gershgorin certificate
        return True
    return bool(np.linalg.eigvalsh(a_mat).min() > 1e-12)


def enumerate_gates(inst):
    """Exact gate posterior and feature means by integrating out h per config."""
    offs, h, w = _scale_offsets(inst)
    pairs = sorted(inst.coupling.keys())
    sites = [(pair, iy, ix) for pair in pairs for iy in range(h) for ix in range(w)]
    if len(sites) > 12:
        raise OracleError(f"{len(sites)} gate sites exceed the enumeration cap of 12")
    n_cfg = 1 << len(sites)
    n = offs[-1]

    log_evidence = np.zeros(n_cfg)
    means = np.zeros((n_cfg, n))
    for cfg in range(n_cfg):
        gates = {pair: np.zeros((h, w)) for pair in pairs}
        for bit, (pair, iy, ix) in enumerate(sites):
            if cfg >> bit & 1:
                gates[pair][iy, ix] = 1.0
        a_mat, b, c = _quadratic_parts(inst, gates)
        if not _is_positive_definite(a_mat):
            raise OracleError(
                f"configuration {cfg}: quadratic form is not negative-definite in h; instance rejected"
            )
        sign, logdet = np.linalg.slogdet(a_mat)
        mu = np.linalg.solve(a_mat, b)
        means[cfg] = mu
        log_evidence[cfg] = c + 0.5 * float(b @ mu) + 0.5 * (n * math.log(2 * math.pi) - logdet)

    log_norm = log_evidence.max()
    weights = np.exp(log_evidence - log_norm)
    total = math.fsum(weights)
    probs = weights / total
    residual = abs(math.fsum(probs) - 1.0)

    marginals = {}
    for bit, site in enumerate(sites):
        marginals[site] = math.fsum(probs[cfg] for cfg in range(n_cfg) if cfg >> bit & 1)

    exact = probs @ means
    exact_mean = [exact[offs[s] : offs[s + 1]].reshape(inst.f[s].shape) for s in range(len(inst.f))]
    return GateEnumReport(sites, log_evidence, probs, marginals, exact_mean, residual)
