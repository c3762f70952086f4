"""Teacher/student networks, order parameters and the population loss.

The loss is assembled from interaction-kernel calls on the order parameters
(norms, student-teacher and student-student correlations) rather than by
integrating over inputs, so its cost does not depend on the input dimension
beyond a few matrix products.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .activations import ERF, ActivationKind
from .kernels import KernelSpec

FEASIBILITY_TOL = 1e-10
GRAD_FD_STEP = 1e-6
HESS_FD_STEP = 1e-5


class ZeroNormError(ValueError):
    """A student neuron has a zero incoming vector."""

    def __init__(self, index):
        super().__init__(f"student neuron {index} has zero norm; correlation undefined")
        self.index = index


class KindMismatchError(ValueError):
    pass


@dataclass
class TeacherNet:
    """Teacher ``f*(x) = sum_j b_j sigma(v_j . x)``; ``V`` holds ``v_j`` as columns."""

    V: np.ndarray
    b: np.ndarray
    kind: ActivationKind = ERF

    def __post_init__(self):
        self.V = np.atleast_2d(np.asarray(self.V, dtype=float))
        self.b = np.asarray(self.b, dtype=float).ravel()
        d, k = self.V.shape
        if d < k:
            raise ValueError(f"orthogonal teacher needs d >= k, got d={d}, k={k}")
        if self.b.shape != (k,):
            raise ValueError("need one outgoing weight per teacher neuron")
        gram = self.V.T @ self.V
        off = gram - np.diag(np.diag(gram))
        if np.max(np.abs(off), initial=0.0) > 1e-12:
            raise ValueError("teacher incoming vectors must be pairwise orthogonal")

    @property
    def d(self) -> int:
        return self.V.shape[0]

    @property
    def k(self) -> int:
        return self.V.shape[1]

    @property
    def norms(self) -> np.ndarray:
        return np.linalg.norm(self.V, axis=0)

    @property
    def unit_orthonormal(self) -> bool:
        return bool(np.allclose(self.norms, 1.0, atol=1e-12) and np.all(self.b == 1.0))

    def __call__(self, x):
        from .activations import sigma
        return sigma(self.kind, np.asarray(x) @ self.V) @ self.b


@dataclass
class StudentNet:
    """Student ``f(x) = sum_i a_i sigma(w_i . x)``; ``W`` is d x n."""

    W: np.ndarray
    a: np.ndarray
    kind: ActivationKind = ERF

    def __post_init__(self):
        self.W = np.asarray(self.W, dtype=float)
        if self.W.ndim == 1:
            self.W = self.W[:, None]
        self.a = np.asarray(self.a, dtype=float).ravel()
        if self.a.shape != (self.W.shape[1],):
            raise ValueError("need one outgoing weight per student neuron")

    @property
    def d(self) -> int:
        return self.W.shape[0]

    @property
    def n(self) -> int:
        return self.W.shape[1]

    @property
    def theta(self) -> np.ndarray:
        """Flat parameters laid out as ``(w_1, a_1, ..., w_n, a_n)``."""
        return np.hstack([self.W.T, self.a[:, None]]).ravel()

    @classmethod
    def from_theta(cls, theta, n: int, d: int, kind: ActivationKind = ERF) -> "StudentNet":
        blocks = np.asarray(theta, dtype=float).reshape(n, d + 1)
        return cls(blocks[:, :d].T.copy(), blocks[:, d].copy(), kind)

    def copy(self) -> "StudentNet":
        return StudentNet(self.W.copy(), self.a.copy(), self.kind)

    def __call__(self, x):
        from .activations import sigma
        return sigma(self.kind, np.asarray(x) @ self.W) @ self.a


@dataclass
class OrderParams:
    r: np.ndarray
    U: np.ndarray
    rho: np.ndarray
    degenerate: tuple = field(default_factory=tuple)


@dataclass
class ConstraintReport:
    """Residuals, positive where a constraint is violated."""

    norm_excess: np.ndarray      # ||u_i|| - 1
    negative_norm: np.ndarray    # -r_i
    pair_excess: np.ndarray      # |rho - u_i.u_i'| - sqrt(1-|u_i|^2) sqrt(1-|u_i'|^2), diag 0

    @property
    def max_violation(self) -> float:
        parts = [self.norm_excess, self.negative_norm, self.pair_excess.ravel()]
        return float(max(np.max(p, initial=-np.inf) for p in parts))

    def feasible(self, tol: float = FEASIBILITY_TOL) -> bool:
        return self.max_violation <= tol


def build_unit_orthonormal_teacher(k: int, d: int, kind: ActivationKind = ERF,
                                   seed: int | None = None) -> TeacherNet:
    """Unit-orthonormal teacher of width ``k`` in ``R^d``.

    ``seed=None`` uses the canonical basis ``v_j = e_j``; otherwise a random
    orthonormal frame drawn by QR of a Gaussian matrix.
    """
    if k < 1 or d < k:
        raise ValueError(f"need d >= k >= 1, got k={k}, d={d}")
    if seed is None:
        V = np.eye(d)[:, :k]
    else:
        rng = np.random.default_rng(seed)
        Q, R = np.linalg.qr(rng.standard_normal((d, k)))
        V = Q * np.sign(np.diag(R))
        # re-orthogonalise so |v_i . v_j| stays at round-off level
        V, _ = np.linalg.qr(V)
    return TeacherNet(V, np.ones(k), kind)


def _geometry(W, t):
    r = np.linalg.norm(W, axis=0)
    zero = r == 0
    Wn = np.divide(W, r, out=np.zeros_like(W), where=~zero)
    vn = t.norms
    Vn = t.V / vn
    rho = np.clip(Wn.T @ Wn, -1.0, 1.0)
    np.fill_diagonal(rho, 1.0)
    U = np.clip(Wn.T @ Vn, -1.0, 1.0)
    return r, zero, Wn, vn, Vn, U, rho


def to_order_params(s: StudentNet, t: TeacherNet) -> OrderParams:
    """Map a student into the teacher's frame.

    Zero-norm neurons have undefined correlations; they get zero rows and are
    listed in ``degenerate``.
    """
    r, zero, _, _, _, U, rho = _geometry(s.W, t)
    idx = tuple(int(i) for i in np.flatnonzero(zero))
    for i in idx:
        rho[i, :] = rho[:, i] = 0.0
        rho[i, i] = 1.0
    return OrderParams(r, U, rho, idx)


def _check_kinds(s, t, spec):
    if not (s.kind == t.kind == spec.kind):
        raise KindMismatchError(
            f"activation mismatch: student {s.kind}, teacher {t.kind}, kernel {spec.kind}")


def teacher_constant(t: TeacherNet, spec: KernelSpec) -> float:
    """``E[f*(x)^2]`` through the kernel."""
    vn = t.norms
    G = kernels.g(spec, vn[:, None], vn[None, :], np.eye(t.k))
    return float(t.b @ G @ t.b)


def loss_and_gradient(W, a, t: TeacherNet, spec: KernelSpec, need_grad: bool = True,
                      const: float | None = None):
    """Population loss at ``(W, a)`` and, optionally, ``(dL/dW, dL/da)``.

    Raw-array entry point shared by :func:`loss`, :func:`gradient` and the
    gradient-flow integrator.
    """
    r, zero, Wn, vn, Vn, U, rho = _geometry(W, t)
    if need_grad and np.any(zero):
        raise ZeroNormError(int(np.flatnonzero(zero)[0]))
    b = t.b
    n = r.size
    if need_grad:
        # one kernel call over [student | teacher] columns
        r2 = np.concatenate([r, vn])[None, :]
        G, D1, Du = kernels.g_and_partials(spec, r[:, None], r2, np.hstack([rho, U]))
        Gss, Gst = G[:, :n], G[:, n:]
        D1ss, D1st = D1[:, :n], D1[:, n:]
        Duss, Dust = Du[:, :n].copy(), Du[:, n:]
    else:
        Gss = kernels.g(spec, r[:, None], r[None, :], rho)
        Gst = kernels.g(spec, r[:, None], vn[None, :], U)
    if const is None:
        const = teacher_constant(t, spec)
    value = float(a @ Gss @ a - 2.0 * a @ Gst @ b + const)
    if not need_grad:
        return value, None, None

    grad_a = 2.0 * (Gss @ a - Gst @ b)
    np.fill_diagonal(Duss, 0.0)

    aa = np.outer(a, a)
    ab = np.outer(a, b)
    radial = 2.0 * np.sum(aa * D1ss, axis=1) - 2.0 * np.sum(ab * D1st, axis=1)
    Css = 2.0 * aa * Duss
    Cst = -2.0 * ab * Dust
    tangential = (Wn @ Css.T + Vn @ Cst.T
                  - Wn * (np.sum(Css * rho, axis=1) + np.sum(Cst * U, axis=1))) / r
    grad_W = Wn * radial + tangential
    return value, grad_W, grad_a


def loss(s: StudentNet, t: TeacherNet, spec: KernelSpec) -> float:
    _check_kinds(s, t, spec)
    return loss_and_gradient(s.W, s.a, t, spec, need_grad=False)[0]


def gradient(s: StudentNet, t: TeacherNet, spec: KernelSpec) -> np.ndarray:
    """Gradient of the loss in the flat ``theta`` layout."""
    _check_kinds(s, t, spec)
    _, gW, ga = loss_and_gradient(s.W, s.a, t, spec)
    return np.hstack([gW.T, ga[:, None]]).ravel()


def grad_norm(s: StudentNet, t: TeacherNet, spec: KernelSpec) -> float:
    """Sup-norm of the gradient."""
    return float(np.max(np.abs(gradient(s, t, spec))))


def fd_gradient(s: StudentNet, t: TeacherNet, spec: KernelSpec,
                step: float = GRAD_FD_STEP) -> np.ndarray:
    """Central finite-difference gradient of :func:`loss` (a test oracle)."""
    theta = s.theta
    out = np.empty_like(theta)
    for i in range(theta.size):
        h = step * (1.0 + abs(theta[i]))
        up, dn = theta.copy(), theta.copy()
        up[i] += h
        dn[i] -= h
        lp = loss(StudentNet.from_theta(up, s.n, s.d, s.kind), t, spec)
        lm = loss(StudentNet.from_theta(dn, s.n, s.d, s.kind), t, spec)
        out[i] = (lp - lm) / (2.0 * h)
    return out


def hessian(s: StudentNet, t: TeacherNet, spec: KernelSpec, symmetrize: bool = True,
            step: float = HESS_FD_STEP) -> np.ndarray:
    """Hessian by central differences of the analytic gradient."""
    _check_kinds(s, t, spec)
    theta = s.theta
    n, d = s.n, s.d
    const = teacher_constant(t, spec)

    def grad_at(th):
        st = StudentNet.from_theta(th, n, d, s.kind)
        _, gW, ga = loss_and_gradient(st.W, st.a, t, spec, const=const)
        return np.hstack([gW.T, ga[:, None]]).ravel()

    H = np.empty((theta.size, theta.size))
    for i in range(theta.size):
        h = step * (1.0 + abs(theta[i]))
        up, dn = theta.copy(), theta.copy()
        up[i] += h
        dn[i] -= h
        H[:, i] = (grad_at(up) - grad_at(dn)) / (2.0 * h)
    if symmetrize:
        H = 0.5 * (H + H.T)
    return H


def min_eigenvalue(H: np.ndarray) -> float:
    return float(np.linalg.eigvalsh(0.5 * (H + H.T))[0])


def constraint_residuals(p: OrderParams) -> ConstraintReport:
    unorm = np.linalg.norm(p.U, axis=1)
    slack = np.sqrt(np.clip(1.0 - unorm ** 2, 0.0, None))
    pair = np.abs(p.rho - p.U @ p.U.T) - np.outer(slack, slack)
    np.fill_diagonal(pair, 0.0)
    return ConstraintReport(unorm - 1.0, -np.asarray(p.r, dtype=float), pair)
