"""One-neuron optima, copy-average (CA) constructions and their exact losses."""
from __future__ import annotations

import logging
import math
from collections import Counter
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import brentq

from . import kernels
from .activations import ERF, RELU, ActivationKind
from .kernels import ERF_ANALYTIC, RELU_ANALYTIC, KernelSpec, relu_h
from .population_loss import StudentNet, TeacherNet, grad_norm, loss

log = logging.getLogger(__name__)

ROOT_TOL = 1e-10
SCAN_POINTS = 200
SCAN_MIN = 1e-4


class NoBracketError(RuntimeError):
    """The fixed-point function has no sign change on the scanned interval."""


@dataclass
class CriticalPoint:
    student: StudentNet
    kind_label: str                       # "one-neuron", "copy-average" or "n-copy"
    loss_value: float
    grad_norm: float = float("nan")
    partition: tuple = ()
    signs: tuple = ()
    extra: dict = field(default_factory=dict)


# ---------------------------------------------------------------------------
# closed forms


def erf_one_neuron_loss(k) -> float:
    """Optimal loss of one erf neuron against a width-``k`` unit-orthonormal teacher."""
    k = np.asarray(k, dtype=float)
    out = (2.0 / math.pi) * (k * math.asin(0.5) - k * k * np.arcsin(1.0 / (2.0 * np.maximum(k, 0.5))))
    out = np.where(k == 0, 0.0, out)
    return float(out) if out.ndim == 0 else out


def relu_one_neuron_loss(k: int) -> float:
    h0, h1, hk = relu_h(0.0), relu_h(1.0), relu_h(1.0 / math.sqrt(k))
    return float(k * k * (h0 - hk * hk / h1) + k * (h1 - h0))


def relu_one_neuron_magnitude(k: int) -> float:
    """``||w*|| a*`` on the optimal hyperbola."""
    return float(k / relu_h(1.0) * relu_h(1.0 / math.sqrt(k)))


def soft_committee_loss_erf(k: int) -> float:
    """One erf neuron with its outgoing weight pinned to 1 (soft committee machine)."""
    if k < 1:
        raise ValueError("k must be >= 1")
    return k / 3.0 - (2.0 / math.pi) * k * k * math.asin(1.0 / (2.0 * k))


def _require_unit_teacher(teacher, kind):
    if teacher.kind != kind:
        raise ValueError(f"need a {kind} teacher, got {teacher.kind}")
    if not teacher.unit_orthonormal:
        raise ValueError("teacher must be unit-orthonormal")


def _average_direction(teacher, group):
    return teacher.V[:, list(group)].sum(axis=1) / math.sqrt(len(group))


def _certify(student, teacher, spec):
    return grad_norm(student, teacher, spec)


def one_neuron_erf(k: int, teacher: TeacherNet, spec: KernelSpec = ERF_ANALYTIC) -> CriticalPoint:
    """Closed-form optimum of one erf neuron: norm ``1/sqrt(2k-1)``, weight ``k``."""
    if k < 1:
        raise ValueError("k must be >= 1")
    _require_unit_teacher(teacher, ERF)
    if teacher.k != k:
        raise ValueError("teacher width does not match k")
    w = _average_direction(teacher, range(k)) / math.sqrt(2 * k - 1)
    s = StudentNet(w[:, None], np.array([float(k)]), ERF)
    cp = CriticalPoint(s, "one-neuron", erf_one_neuron_loss(k), partition=(k,), signs=(1,))
    cp.grad_norm = _certify(s, teacher, spec)
    return cp


def one_neuron_relu(k: int, teacher: TeacherNet, norm_choice="balanced") -> CriticalPoint:
    """Optimum of one ReLU neuron; any ``(c w, a / c)`` is equivalent.

    ``norm_choice="balanced"`` picks ``||w|| = a``; a positive number fixes ``||w||``.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    _require_unit_teacher(teacher, RELU)
    mag = relu_one_neuron_magnitude(k)
    norm = math.sqrt(mag) if norm_choice == "balanced" else float(norm_choice)
    if norm <= 0:
        raise ValueError("norm must be positive")
    w = _average_direction(teacher, range(k)) * norm
    s = StudentNet(w[:, None], np.array([mag / norm]), RELU)
    if teacher.k != k:
        raise ValueError("teacher width does not match k")
    cp = CriticalPoint(s, "one-neuron", relu_one_neuron_loss(k), partition=(k,), signs=(1,))
    cp.grad_norm = _certify(s, teacher, RELU_ANALYTIC)
    cp.extra["magnitude"] = mag
    return cp


# ---------------------------------------------------------------------------
# fixed-point route for activations without a closed form


def fixed_point_f(spec: KernelSpec, r, u):
    """``d/dr [ log g(r,r,1) / 2 - log g(r,1,u) ]`` from kernel partials.

    Cells where either interaction is non-positive come back as NaN.
    """
    r, u = np.broadcast_arrays(np.asarray(r, dtype=float), np.asarray(u, dtype=float))
    gdiag = kernels.g(spec, r, r, 1.0)
    gcross = kernels.g(spec, r, 1.0, u)
    ddiag = kernels.dg_dr_diag(spec, r)
    dcross = kernels.dg_dr1(spec, r, 1.0, u)
    bad = (gdiag <= 0) | (gcross <= 0)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = 0.5 * ddiag / gdiag - dcross / gcross
    out = np.where(bad, np.nan, out)
    return float(out) if out.ndim == 0 else out


def f_grid(spec: KernelSpec, r_grid, u_grid) -> np.ndarray:
    """``f`` on the product grid, shape ``(len(r_grid), len(u_grid))``."""
    r_grid = np.asarray(r_grid, dtype=float)
    u_grid = np.asarray(u_grid, dtype=float)
    R, U = np.meshgrid(r_grid, u_grid, indexing="ij")
    return fixed_point_f(spec, R, U)


def find_norm_root(spec: KernelSpec, u: float, r_max: float = 1.0,
                   points: int = SCAN_POINTS) -> float:
    """Root in ``r`` of the fixed-point function at correlation ``u``.

    Scans ``[1e-4, r_max]`` on a log grid and refines the first sign change
    with Brent's method. More than one sign change is logged, not resolved.
    """
    grid = np.geomspace(SCAN_MIN, r_max, points)
    vals = fixed_point_f(spec, grid, u)
    ok = np.isfinite(vals)
    sign = np.sign(vals)
    hits = [i for i in range(points - 1)
            if ok[i] and ok[i + 1] and sign[i] != sign[i + 1]]
    if not hits:
        raise NoBracketError(f"no sign change of f in r on [{SCAN_MIN}, {r_max}] at u={u:.6g}")
    if len(hits) > 1:
        log.warning("fixed-point function changes sign %d times at u=%.6g; using the first",
                    len(hits), u)
    i = hits[0]
    fn = lambda r: fixed_point_f(spec, r, u)
    root = brentq(fn, grid[i], grid[i + 1], xtol=1e-15, rtol=4 * np.finfo(float).eps, maxiter=200)
    if abs(fn(root)) > ROOT_TOL:
        # brentq stops on the bracket width; polish with a few secant steps
        a, b = grid[i], grid[i + 1]
        for _ in range(50):
            fa, fb = fn(a), fn(b)
            if fb == fa:
                break
            a, b = b, b - fb * (b - a) / (fb - fa)
            if abs(fn(b)) <= ROOT_TOL:
                root = b
                break
    return float(root)


def one_neuron_fixed_point(kind: ActivationKind, k: int, spec: KernelSpec | None = None,
                           teacher: TeacherNet | None = None, u: float | None = None,
                           certify: bool = True) -> CriticalPoint:
    """One-neuron critical point at equal correlations ``u = 1/sqrt(k)``.

    The norm solves the fixed-point equation; the outgoing weight then
    follows as ``a = k g(r,1,u) / g(r,r,1)``.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    spec = KernelSpec.default(kind) if spec is None else spec
    if spec.kind != kind:
        raise ValueError("kernel spec activation does not match")
    u = 1.0 / math.sqrt(k) if u is None else u
    r = find_norm_root(spec, u)
    a = k * kernels.g(spec, r, 1.0, u) / kernels.g(spec, r, r, 1.0)
    if teacher is None:
        teacher = _default_teacher(kind, k)
    direction = np.sign(u) * _average_direction(teacher, range(k))
    s = StudentNet((r * direction)[:, None], np.array([a]), kind)
    value = loss(s, teacher, spec)
    cp = CriticalPoint(s, "one-neuron", value, partition=(k,), signs=(1,),
                       extra={"r": r, "a": a, "u": u})
    if certify:
        cp.grad_norm = _certify(s, teacher, spec)
    return cp


def _default_teacher(kind, k):
    from .population_loss import build_unit_orthonormal_teacher
    return build_unit_orthonormal_teacher(k, k, kind)


# ---------------------------------------------------------------------------
# copy-average configurations (erf)


def _check_partition(partition, k):
    partition = tuple(int(l) for l in partition)
    if not partition or any(l < 1 for l in partition):
        raise ValueError("partition entries must be positive")
    if sum(partition) > k:
        raise ValueError(f"partition {partition} uses more than k={k} teacher neurons")
    return partition


def build_copy_average(teacher: TeacherNet, partition, signs=None, assignment=None,
                       spec: KernelSpec = ERF_ANALYTIC, certify: bool = True) -> CriticalPoint:
    """Concatenate one-neuron erf optima, neuron ``i`` averaging its own teacher group.

    The result is a critical point when the groups cover every teacher
    neuron. A teacher neuron left out of all groups contributes a gradient
    ``-2 a_i E[sigma'(w_i . x)] E[z sigma(z)] v_l`` on each ``w_i``, which
    does not vanish for erf; such points are still built (their loss is
    what ``ca_loss`` reports) but ``grad_norm`` will show it.

    ``assignment`` lists the teacher indices of each group; by default the
    groups are consecutive blocks. ``signs`` flips ``(w_i, a_i)`` jointly.
    """
    _require_unit_teacher(teacher, ERF)
    partition = _check_partition(partition, teacher.k)
    signs = (1,) * len(partition) if signs is None else tuple(int(s) for s in signs)
    if len(signs) != len(partition) or any(s not in (1, -1) for s in signs):
        raise ValueError("need one sign (+1/-1) per student neuron")
    if assignment is None:
        bounds = np.cumsum((0,) + partition)
        assignment = [list(range(bounds[i], bounds[i + 1])) for i in range(len(partition))]
    assignment = [list(g) for g in assignment]
    if [len(g) for g in assignment] != list(partition):
        raise ValueError("group sizes do not match the partition")
    flat = [j for g in assignment for j in g]
    if len(set(flat)) != len(flat):
        raise ValueError("teacher groups overlap")
    if any(j < 0 or j >= teacher.k for j in flat):
        raise ValueError("teacher index out of range")

    W = np.empty((teacher.d, len(partition)))
    a = np.empty(len(partition))
    for i, (group, sgn) in enumerate(zip(assignment, signs)):
        ell = len(group)
        W[:, i] = sgn * _average_direction(teacher, group) / math.sqrt(2 * ell - 1)
        a[i] = sgn * ell
    s = StudentNet(W, a, ERF)
    label = "n-copy" if all(l == 1 for l in partition) else "copy-average"
    cp = CriticalPoint(s, label, loss(s, teacher, spec), partition=partition, signs=signs,
                       extra={"assignment": assignment})
    if certify:
        cp.grad_norm = _certify(s, teacher, spec)
    return cp


def ca_loss(partition, k: int) -> float:
    """Exact loss of a CA point: one-neuron losses plus 1/3 per uncovered teacher neuron."""
    partition = _check_partition(partition, k)
    return float(sum(erf_one_neuron_loss(l) for l in partition) + (k - sum(partition)) / 3.0)


def conjectured_loss(n: int, k: int) -> float:
    """Loss of the best CA point, ``L*(k - n + 1)``; conjecturally the global optimum."""
    if not 1 <= n < k:
        raise ValueError(f"need 1 <= n < k, got n={n}, k={k}")
    return erf_one_neuron_loss(k - n + 1)


def optimal_ca(n: int, k: int, teacher: TeacherNet, spec: KernelSpec = ERF_ANALYTIC,
               certify: bool = True) -> CriticalPoint:
    """(n-1) copies and one neuron averaging the remaining ``k - n + 1`` teacher neurons."""
    if not 1 <= n < k:
        raise ValueError(f"need 1 <= n < k (n >= k reaches zero loss), got n={n}, k={k}")
    if teacher.k != k:
        raise ValueError("teacher width does not match k")
    partition = (1,) * (n - 1) + (k - n + 1,)
    return build_copy_average(teacher, partition, spec=spec, certify=certify)


def count_ca_points(partition, k: int) -> int:
    """Number of distinct CA points whose group sizes form ``partition``."""
    partition = _check_partition(partition, k)
    n = len(partition)
    perms = math.factorial(n)
    for c in Counter(partition).values():
        perms //= math.factorial(c)
    groups, left = 1, k
    for ell in partition:
        groups *= math.comb(left, ell)
        left -= ell
    return perms * groups


def enumerate_partitions(n: int, k: int):
    """All multisets ``l_1 >= ... >= l_n >= 1`` with ``sum <= k``."""
    def rec(remaining, slots, cap):
        if slots == 0:
            yield ()
            return
        for ell in range(min(cap, remaining - (slots - 1)), 0, -1):
            for rest in rec(remaining - ell, slots - 1, ell):
                yield (ell,) + rest
    for total in range(n, k + 1):
        for p in rec(total, n, total):
            if sum(p) == total:
                yield p

