"""Equivariant layer library.

Invariant node features h live in (n, n_h); equivariant features v in
(n, n_v, 3) and transform by right-multiplication with O(3) matrices.
Coordinates enter only through relative displacements and distances, so the
composed message-passing layer keeps h E(3)-invariant and v O(3)-equivariant
and translation-invariant.
"""

from __future__ import annotations

import math
from contextlib import contextmanager
from dataclasses import dataclass

import numpy as np

from .tensorcore import (Tensor, concat, const, exp, matmul, mul, reshape, rownorm,
                         segment_sum, sigmoid, softplus, take, tanh, tsum, vlin, where)

VN_NORM_GUARD = 1e-8

# When set to a list, vn_relu appends a copy of its projection mask.  The
# projection has a kink at <q, k> = 0; finite-difference checks compare the
# masks of the +eps/-eps evaluations and skip coordinates that flip one
# (i.e. whose central difference straddles the crease).
_kink_watch: list | None = None


class ParamStore:
    """Named float64 leaf tensors with deterministic creation order."""

    def __init__(self):
        self.params: dict[str, Tensor] = {}

    def add(self, name: str, array: np.ndarray) -> Tensor:
        if name in self.params:
            raise ValueError(f"duplicate parameter '{name}'")
        t = Tensor(np.asarray(array, dtype=np.float64), name=name)
        self.params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]


def _uinit(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = 1.0 / math.sqrt(max(fan_in, 1))
    return rng.uniform(-bound, bound, size=shape)


# ------------------------------------------------------------------
# building blocks
# ------------------------------------------------------------------

@contextmanager
def kink_masks(out: list):
    """Collect the projection mask of every vn_relu evaluation."""
    global _kink_watch
    prev = _kink_watch
    _kink_watch = out
    try:
        yield out
    finally:
        _kink_watch = prev


def vn_relu(v: Tensor, w: Tensor, u: Tensor) -> Tensor:
    """Vector-ReLU: project q-rows below the k-plane onto it.

    Rows with near-zero k-norm pass q through unchanged (routine for the
    all-zero v at encoder initialization)."""
    q = vlin(w, v)
    k = vlin(u, v)
    kn = rownorm(k)                       # (n, c)
    dot = tsum(mul(q, k), axis=-1)        # <q, k> per channel
    safe = kn.data >= VN_NORM_GUARD
    project = safe & (dot.data < 0.0)
    if _kink_watch is not None:
        _kink_watch.append(project.copy())
    denom = where(safe, mul(kn, kn), const(np.ones_like(kn.data)))
    coef = where(project, dot / denom, const(np.zeros_like(dot.data)))
    return q - reshape(coef, coef.data.shape + (1,)) * k


@dataclass
class VNMLP:
    """Stack of Vector-ReLU units; multiple inputs concatenate along channels."""

    layers: list[tuple[Tensor, Tensor]]

    def __call__(self, *vs: Tensor) -> Tensor:
        v = vs[0] if len(vs) == 1 else concat(vs, axis=1)
        for w, u in self.layers:
            v = vn_relu(v, w, u)
        return v


def build_vnmlp(store: ParamStore, prefix: str, dims: list[int],
                rng: np.random.Generator) -> VNMLP:
    layers = []
    for k in range(len(dims) - 1):
        w = store.add(f"{prefix}.w{k}", _uinit(rng, (dims[k + 1], dims[k]), dims[k]))
        u = store.add(f"{prefix}.u{k}", _uinit(rng, (dims[k + 1], dims[k]), dims[k]))
        layers.append((w, u))
    return VNMLP(layers)


@dataclass
class MLP:
    """Two-layer tanh MLP with linear output."""

    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor

    def __call__(self, x: Tensor) -> Tensor:
        return matmul(tanh(matmul(x, self.w1) + self.b1), self.w2) + self.b2


def build_mlp(store: ParamStore, prefix: str, d_in: int, d_hidden: int, d_out: int,
              rng: np.random.Generator) -> MLP:
    return MLP(
        w1=store.add(f"{prefix}.w1", _uinit(rng, (d_in, d_hidden), d_in)),
        b1=store.add(f"{prefix}.b1", np.zeros(d_hidden)),
        w2=store.add(f"{prefix}.w2", _uinit(rng, (d_hidden, d_out), d_hidden)),
        b2=store.add(f"{prefix}.b2", np.zeros(d_out)),
    )


@dataclass
class RBFKernel:
    """Gaussian radial basis at fixed means, softplus-positive sharpness,
    followed by a learnable affine map."""

    means: np.ndarray
    k_raw: Tensor
    w: Tensor
    b: Tensor

    def gaussians(self, d: Tensor) -> Tensor:
        diff = reshape(d, (d.data.shape[0], 1)) - const(self.means[None, :])
        sharp = softplus(self.k_raw)
        return exp(-(sharp * diff * diff))

    def __call__(self, d: Tensor) -> Tensor:
        return matmul(self.gaussians(d), self.w) + self.b


# softplus(x) = 1 at this raw value, so sharpness initializes to exactly 1.0
_K_RAW_INIT = math.log(math.e - 1.0)


def build_kernel(store: ParamStore, prefix: str, d_out: int, means: np.ndarray,
                 rng: np.random.Generator) -> RBFKernel:
    nk = len(means)
    return RBFKernel(
        means=np.asarray(means, dtype=np.float64),
        k_raw=store.add(f"{prefix}.k", np.array(_K_RAW_INIT)),
        w=store.add(f"{prefix}.w", _uinit(rng, (nk, d_out), nk)),
        b=store.add(f"{prefix}.b", np.zeros(d_out)),
    )


def rbf_kernel(d, means, sharpness: float = 1.0) -> np.ndarray:
    """Plain numpy form of the Gaussian basis (pre-affine), for oracles/tests."""
    d = np.asarray(d, dtype=np.float64)
    means = np.asarray(means, dtype=np.float64)
    return np.exp(-sharpness * (d[..., None] - means) ** 2)


@dataclass
class GRUCell:
    wxr: Tensor; whr: Tensor; br: Tensor
    wxz: Tensor; whz: Tensor; bz: Tensor
    wxn: Tensor; whn: Tensor; bn: Tensor

    def __call__(self, h: Tensor, x: Tensor) -> Tensor:
        r = sigmoid(matmul(x, self.wxr) + matmul(h, self.whr) + self.br)
        z = sigmoid(matmul(x, self.wxz) + matmul(h, self.whz) + self.bz)
        n = tanh(matmul(x, self.wxn) + mul(r, matmul(h, self.whn)) + self.bn)
        one = const(np.ones(()))
        return mul(one - z, n) + mul(z, h)


def build_gru(store: ParamStore, prefix: str, d: int, rng: np.random.Generator) -> GRUCell:
    def m(name):
        return store.add(f"{prefix}.{name}", _uinit(rng, (d, d), d))

    def b(name):
        return store.add(f"{prefix}.{name}", np.zeros(d))

    return GRUCell(m("wxr"), m("whr"), b("br"),
                   m("wxz"), m("whz"), b("bz"),
                   m("wxn"), m("whn"), b("bn"))


# ------------------------------------------------------------------
# one message-passing layer
# ------------------------------------------------------------------

@dataclass
class MFMPLayer:
    n_h: int
    n_v: int
    phi1: MLP
    phi2: MLP
    phi3: MLP
    vn1: VNMLP
    vn2: VNMLP
    vn3: VNMLP
    ker1: RBFKernel
    ker2: RBFKernel
    ker3: RBFKernel
    gru: GRUCell
    vn4: VNMLP

    def mix_features(self, h: Tensor, v: Tensor) -> tuple[Tensor, Tensor, Tensor]:
        h1 = self.phi1(concat([h, rownorm(self.vn1(v))], axis=1))
        h2 = self.phi2(concat([h, rownorm(self.vn2(v))], axis=1))
        gate = self.phi3(h)
        v1 = reshape(gate, gate.data.shape + (1,)) * self.vn3(v)
        return h1, h2, v1

    def messages(self, h1: Tensor, h2: Tensor, v1: Tensor, src: np.ndarray,
                 r_ij: np.ndarray, ablate_eqv: bool = False) -> tuple[Tensor, Tensor | None]:
        d = const(np.linalg.norm(r_ij, axis=-1))
        m_h = self.ker1(d) * take(h1, src)
        if ablate_eqv:
            return m_h, None
        e = len(src)
        k2 = self.ker2(d)
        k3h = self.ker3(d) * take(h2, src)
        m_v = (reshape(k2, (e, self.n_v, 1)) * take(v1, src)
               + reshape(k3h, (e, self.n_v, 1)) * const(r_ij[:, None, :]))
        return m_h, m_v

    def aggregate(self, h: Tensor, v: Tensor, sum_mh: Tensor,
                  sum_mv: Tensor | None) -> tuple[Tensor, Tensor]:
        h_new = self.gru(h, sum_mh)
        if sum_mv is None:
            return h_new, v
        return h_new, self.vn4(v, sum_mv)

    def __call__(self, h: Tensor, v: Tensor, coords: np.ndarray, src: np.ndarray,
                 dst: np.ndarray, ablate_eqv: bool = False) -> tuple[Tensor, Tensor]:
        """One full mix -> message -> aggregate pass over directed edges
        (messages flow src -> dst)."""
        n = h.data.shape[0]
        h1, h2, v1 = self.mix_features(h, v)
        r_ij = coords[dst] - coords[src]
        m_h, m_v = self.messages(h1, h2, v1, src, r_ij, ablate_eqv=ablate_eqv)
        sum_mh = segment_sum(m_h, dst, n)
        sum_mv = None if m_v is None else segment_sum(m_v, dst, n)
        return self.aggregate(h, v, sum_mh, sum_mv)


def build_mfmp_layer(store: ParamStore, prefix: str, n_h: int, n_v: int, hidden: int,
                     kernel_means: np.ndarray, rng: np.random.Generator) -> MFMPLayer:
    return MFMPLayer(
        n_h=n_h,
        n_v=n_v,
        phi1=build_mlp(store, f"{prefix}.phi1", n_h + n_v, hidden, n_h, rng),
        phi2=build_mlp(store, f"{prefix}.phi2", n_h + n_v, hidden, n_v, rng),
        phi3=build_mlp(store, f"{prefix}.phi3", n_h, hidden, n_v, rng),
        vn1=build_vnmlp(store, f"{prefix}.vn1", [n_v, n_v, n_v], rng),
        vn2=build_vnmlp(store, f"{prefix}.vn2", [n_v, n_v, n_v], rng),
        vn3=build_vnmlp(store, f"{prefix}.vn3", [n_v, n_v, n_v], rng),
        ker1=build_kernel(store, f"{prefix}.ker1", n_h, kernel_means, rng),
        ker2=build_kernel(store, f"{prefix}.ker2", n_v, kernel_means, rng),
        ker3=build_kernel(store, f"{prefix}.ker3", n_v, kernel_means, rng),
        gru=build_gru(store, f"{prefix}.gru", n_h, rng),
        vn4=build_vnmlp(store, f"{prefix}.vn4", [2 * n_v, n_v, n_v], rng),
    )


def build_mfmp_stack(store: ParamStore, prefix: str, n_layers: int, n_h: int, n_v: int,
                     hidden: int, kernel_means: np.ndarray,
                     rng: np.random.Generator) -> list[MFMPLayer]:
    return [build_mfmp_layer(store, f"{prefix}.layer{k}", n_h, n_v, hidden, kernel_means, rng)
            for k in range(n_layers)]


def run_stack(stack: list[MFMPLayer], h: Tensor, v: Tensor, coords: np.ndarray,
              edges: list[tuple[int, int]] | tuple, ablate_eqv: bool = False
              ) -> tuple[Tensor, Tensor]:
    """Run a stack over an undirected edge set (messages in both directions)."""
    if len(edges):
        pairs = np.asarray(edges, dtype=np.intp)
        src = np.concatenate([pairs[:, 0], pairs[:, 1]])
        dst = np.concatenate([pairs[:, 1], pairs[:, 0]])
    else:
        src = np.zeros(0, dtype=np.intp)
        dst = np.zeros(0, dtype=np.intp)
    for layer in stack:
        h, v = layer(h, v, coords, src, dst, ablate_eqv=ablate_eqv)
    return h, v


def random_orthogonal(rng: np.random.Generator, allow_reflection: bool = True) -> np.ndarray:
    """Haar-ish random O(3) matrix via QR; sign-fixed, optionally with det -1."""
    a = rng.standard_normal((3, 3))
    q, r = np.linalg.qr(a)
    q = q * np.sign(np.diag(r))
    if allow_reflection and rng.random() < 0.5:
        q = q @ np.diag([1.0, 1.0, -1.0])
    return q
