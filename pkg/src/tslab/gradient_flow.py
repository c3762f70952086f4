"""Gradient flow ``d theta / dt = -grad L`` on the population loss.

Integrated with a Dormand-Prince 5(4) pair. Steps that raise the loss are
rejected like steps that fail the error test, so the recorded loss sequence
is non-increasing.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import _compiled
from .critical_points import erf_one_neuron_loss
from .kernels import Analytic, KernelSpec
from .population_loss import (OrderParams, StudentNet, TeacherNet, ZeroNormError,
                              hessian, loss_and_gradient, teacher_constant, to_order_params)

OPT_CA = "OptCA"
PERTURBED_N_COPY = "PerturbedNCopy"
OTHER = "Other"

LOSS_SLACK = 1e-10

# Dormand-Prince 5(4) tableau
_C = np.array([0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0])
_A = [np.array(row) for row in [
    [],
    [1 / 5],
    [3 / 40, 9 / 40],
    [44 / 45, -56 / 15, 32 / 9],
    [19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729],
    [9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656],
    [35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84],
]]
_B5 = np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0.0])
_B4 = np.array([5179 / 57600, 0.0, 7571 / 16695, 393 / 640, -92097 / 339200, 187 / 2100, 1 / 40])
_E = _B5 - _B4


class NotConvergedError(ValueError):
    pass


@dataclass
class ClassifierThresholds:
    copy_corr: float = 1 - 1e-3
    avg_corr_tol: float = 1e-2
    off_corr_tol: float = 1e-2
    pnc_corr: float = 0.9
    loss_gap: float = 1e-4


@dataclass
class FlowConfig:
    init: str = "gaussian"           # "gaussian" or "glorot"
    std: float = 0.1
    seed: int = 0
    grad_tol: float = 5e-8
    rel_tol: float = 1e-8
    abs_tol: float = 1e-10
    max_steps: int = 100_000
    snapshot_stride: int = 100
    newton_polish: bool = False
    polish_threshold: float = 1e-5
    thresholds: ClassifierThresholds = field(default_factory=ClassifierThresholds)

    def __post_init__(self):
        if self.init not in ("gaussian", "glorot"):
            raise ValueError(f"unknown init scheme {self.init!r}")
        for name in ("std", "grad_tol", "rel_tol", "abs_tol"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.max_steps < 1:
            raise ValueError("max_steps must be >= 1")
        if isinstance(self.thresholds, dict):
            self.thresholds = ClassifierThresholds(**self.thresholds)


@dataclass
class Snapshot:
    time: float
    order: OrderParams
    loss: float


@dataclass
class FlowRecord:
    final_student: StudentNet
    final_loss: float
    final_grad_norm: float
    converged: bool
    steps: int
    time: float
    snapshots: list = field(default_factory=list)
    label: str | None = None
    status: str = ""
    degenerate: bool = False
    polished: bool = False
    evaluations: int = 0
    rejected: int = 0


def init_student(n: int, d: int, config: FlowConfig, kind=None) -> StudentNet:
    """Gaussian initialisation, ``W`` drawn before ``a`` from one seeded stream."""
    if n < 1 or d < 1:
        raise ValueError("n and d must be >= 1")
    rng = np.random.default_rng(config.seed)
    if config.init == "gaussian":
        std_w = std_a = config.std
    else:
        std_w = math.sqrt(2.0 / (d + n))
        std_a = math.sqrt(2.0 / (n + 1))
    W = rng.normal(0.0, std_w, size=(d, n))
    a = rng.normal(0.0, std_a, size=n)
    from .activations import ERF
    return StudentNet(W, a, ERF if kind is None else kind)


class _Field:
    """``-grad L`` on the flat parameter vector, with the loss as a by-product."""

    def __init__(self, n, d, teacher, spec, compiled=True):
        self.n, self.d = n, d
        self.teacher, self.spec = teacher, spec
        self.const = teacher_constant(teacher, spec)
        self.calls = 0
        self.compiled = (compiled and _compiled.AVAILABLE and spec.kind.name == "erf"
                         and isinstance(spec.method, Analytic))
        if self.compiled:
            vn = teacher.norms
            self._args = (np.ascontiguousarray(teacher.V / vn), vn.copy(), teacher.b.copy())

    def __call__(self, theta):
        self.calls += 1
        if self.compiled:
            value, grad, zero = _compiled.erf_field(theta, self.n, self.d, *self._args, self.const)
            if zero >= 0:
                raise ZeroNormError(int(zero))
            return value, -grad
        blocks = theta.reshape(self.n, self.d + 1)
        value, gW, ga = loss_and_gradient(blocks[:, :self.d].T, blocks[:, self.d],
                                          self.teacher, self.spec, const=self.const)
        return value, -np.hstack([gW.T, ga[:, None]]).ravel()


def _initial_step(fun, y, f0, rtol, atol):
    scale = atol + np.abs(y) * rtol
    d0 = np.sqrt(np.mean((y / scale) ** 2))
    d1 = np.sqrt(np.mean((f0 / scale) ** 2))
    h0 = 1e-6 if d0 < 1e-5 or d1 < 1e-5 else 0.01 * d0 / d1
    _, f1 = fun(y + h0 * f0)
    d2 = np.sqrt(np.mean(((f1 - f0) / scale) ** 2)) / h0
    if max(d1, d2) <= 1e-15:
        h1 = max(1e-6, h0 * 1e-3)
    else:
        h1 = (0.01 / max(d1, d2)) ** (1 / 5)
    return min(100 * h0, h1)


def _newton_polish(theta, field_, teacher, spec, kind, grad_tol, max_iter=20):
    n, d = field_.n, field_.d
    value, f = field_(theta)
    for _ in range(max_iter):
        if np.max(np.abs(f)) <= grad_tol:
            break
        H = hessian(StudentNet.from_theta(theta, n, d, kind), teacher, spec)
        mu = 0.0
        for _ in range(30):
            try:
                step = np.linalg.solve(H + mu * np.eye(H.shape[0]), f)
            except np.linalg.LinAlgError:
                step = None
            if step is not None:
                v_new, f_new = field_(theta + step)
                if np.max(np.abs(f_new)) < np.max(np.abs(f)) and v_new <= value + LOSS_SLACK:
                    theta, value, f = theta + step, v_new, f_new
                    break
            mu = max(2 * mu, 1e-8 * max(1.0, np.max(np.abs(H))))
        else:
            break
    return theta, value, f


def integrate(s0: StudentNet, teacher: TeacherNet, spec: KernelSpec,
              config: FlowConfig) -> FlowRecord:
    """Run gradient flow from ``s0`` until the gradient sup-norm drops below
    ``config.grad_tol`` or ``config.max_steps`` accepted steps are taken."""
    n, d, kind = s0.n, s0.d, s0.kind
    fun = _Field(n, d, teacher, spec)
    y = s0.theta.copy()
    t = 0.0
    steps = rejected = 0
    snapshots = []
    status = ""
    degenerate = polished = False

    def snap(theta, time, value):
        st = StudentNet.from_theta(theta, n, d, kind)
        snapshots.append(Snapshot(time, to_order_params(st, teacher), value))

    def record(theta, value, f, conv):
        return FlowRecord(StudentNet.from_theta(theta, n, d, kind), value,
                          float(np.max(np.abs(f))), conv, steps, t, snapshots,
                          status=status, degenerate=degenerate, polished=polished,
                          evaluations=fun.calls, rejected=rejected)

    try:
        value, f = fun(y)
    except ZeroNormError as exc:
        st = s0.copy()
        return FlowRecord(st, float("nan"), float("nan"), False, 0, 0.0, [],
                          status=str(exc), degenerate=True)
    stride = config.snapshot_stride
    if stride:
        snap(y, t, value)
    if np.max(np.abs(f)) <= config.grad_tol:
        status = "converged"
        return record(y, value, f, True)

    rtol, atol = config.rel_tol, config.abs_tol
    h = _initial_step(fun, y, f, rtol, atol)
    K = np.empty((7, y.size))
    K[0] = f
    try:
        while steps < config.max_steps:
            if h < 1e-14 * max(1.0, t):
                status = f"step size underflow at t={t:.6g}"
                break
            for i in range(1, 7):
                _, K[i] = fun(y + h * (_A[i] @ K[:i]))
            y_new = y + h * (_B5 @ K)
            # stage 7 sits at y_new (FSAL), so its gradient and loss are reused
            v_new, f_new = fun(y_new)
            K[6] = f_new
            scale = atol + rtol * np.maximum(np.abs(y), np.abs(y_new))
            err = np.sqrt(np.mean((h * (_E @ K) / scale) ** 2))
            if err > 1.0 or v_new > value + LOSS_SLACK:
                rejected += 1
                factor = 0.2 if err > 1.0 else 0.5
                h *= max(factor, 0.9 * err ** -0.25) if err > 1.0 else factor
                continue
            t += h
            steps += 1
            y, value, f = y_new, v_new, f_new
            K[0] = f_new
            if stride and steps % stride == 0:
                snap(y, t, value)
            gnorm = np.max(np.abs(f))
            if gnorm <= config.grad_tol:
                status = "converged"
                break
            if config.newton_polish and gnorm <= config.polish_threshold:
                y, value, f = _newton_polish(y, fun, teacher, spec, kind, config.grad_tol)
                polished = True
                if np.max(np.abs(f)) <= config.grad_tol:
                    status = "converged after newton polish"
                    break
                K[0] = f
            fac = 5.0 if err == 0 else min(5.0, max(0.2, 0.9 * err ** -0.2))
            h *= fac
        else:
            status = "max_steps reached"
    except ZeroNormError as exc:
        degenerate = True
        status = str(exc)
    if stride and (not snapshots or snapshots[-1].time != t):
        snap(y, t, value)
    conv = bool(np.max(np.abs(f)) <= config.grad_tol)
    return record(y, value, f, conv)


def _greedy_matching(A, count):
    """Pick ``count`` (row, col) pairs by decreasing ``A`` with distinct rows and cols."""
    order = np.dstack(np.unravel_index(np.argsort(-A, axis=None), A.shape))[0]
    rows, cols, pairs = set(), set(), []
    for i, j in order:
        if len(pairs) == count:
            break
        if i in rows or j in cols:
            continue
        rows.add(i)
        cols.add(j)
        pairs.append((int(i), int(j)))
    return pairs


def classify(rec: FlowRecord, teacher: TeacherNet, n: int, k: int,
             thresholds: ClassifierThresholds | None = None) -> str:
    """Label a converged run as ``OptCA``, ``PerturbedNCopy`` or ``Other``."""
    if not rec.converged:
        raise NotConvergedError("only converged records can be classified")
    th = ClassifierThresholds() if thresholds is None else thresholds
    A = np.abs(to_order_params(rec.final_student, teacher).U)

    if n < k:
        pairs = _greedy_matching(A, n - 1)
        copies_ok = len(pairs) == n - 1 and all(A[i, j] >= th.copy_corr for i, j in pairs)
        if copies_ok:
            avg = (set(range(n)) - {i for i, _ in pairs}).pop()
            matched = {j for _, j in pairs}
            rest = [j for j in range(k) if j not in matched]
            target = 1.0 / math.sqrt(len(rest))
            avg_ok = (np.all(np.abs(A[avg, rest] - target) <= th.avg_corr_tol)
                      and np.all(A[avg, list(matched)] <= th.off_corr_tol))
            gap = abs(rec.final_loss - erf_one_neuron_loss(k - n + 1))
            if avg_ok and gap <= th.loss_gap:
                return OPT_CA

    pairs = _greedy_matching(A, n)
    if len(pairs) == n and all(A[i, j] >= th.pnc_corr for i, j in pairs):
        return PERTURBED_N_COPY
    return OTHER
