"""Experiment harness: sweep configuration, execution, persistence and plot data.

Sweeps are described by a small INI-style file::

    [sweep]
    activation = erf
    n = 4
    k = 10-16
    d = k+1
    seeds = 0-19
    kernel = analytic
    output = runs/phase.jsonl
    workers = 1

    [flow]
    init = gaussian
    std = 0.1
    newton_polish = true

    [classifier]
    pnc_corr = 0.9

Integer lists accept ``2,4,8``, inclusive ranges ``10-16`` or a mix. Every
cell is written as one JSON line; a CSV summary per ``(n, k)`` sits next to
it with the ``.summary.csv`` suffix.
"""
from __future__ import annotations

import configparser
import csv
import json
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import critical_points as cp
from .activations import ERF, RELU, ActivationKind
from .gradient_flow import (OPT_CA, OTHER, PERTURBED_N_COPY, ClassifierThresholds, FlowConfig,
                            FlowRecord, classify, init_student, integrate)
from .kernels import KernelSpec
from .population_loss import build_unit_orthonormal_teacher, hessian, min_eigenvalue

log = logging.getLogger(__name__)

NOT_CONVERGED = "NotConverged"
DEGENERATE = "Degenerate"
LABELS = (OPT_CA, PERTURBED_N_COPY, OTHER, NOT_CONVERGED, DEGENERATE)
RECORD_TYPE = "phase_cell"
PLOT_KINDS = ("phase", "trajectory", "fgrid", "one_neuron", "hessian")


class ConfigError(ValueError):
    """Invalid sweep configuration."""


def parse_int_list(text: str) -> list[int]:
    """``"2,4,10-12"`` -> ``[2, 4, 10, 11, 12]``."""
    out = []
    for part in str(text).replace(" ", "").split(","):
        if not part:
            continue
        lo, sep, hi = part.partition("-")
        if sep and lo:
            lo, hi = int(lo), int(hi)
            if hi < lo:
                raise ConfigError(f"empty range {part!r}")
            out.extend(range(lo, hi + 1))
        else:
            out.append(int(part))
    return out


def _parse_bool(text):
    value = str(text).strip().lower()
    if value in ("1", "true", "yes", "on"):
        return True
    if value in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {text!r}")


@dataclass
class SweepConfig:
    activation: ActivationKind = ERF
    n_values: list = field(default_factory=lambda: [2])
    k_values: list = field(default_factory=lambda: [3])
    d_rule: str | int = "k+1"        # "k+1" or a fixed dimension
    seeds: list = field(default_factory=lambda: list(range(10)))
    flow: FlowConfig = field(default_factory=FlowConfig)
    kernel: KernelSpec | None = None
    output_path: str = "phase.jsonl"
    workers: int = 1

    def __post_init__(self):
        if self.kernel is None:
            self.kernel = KernelSpec.default(self.activation)
        self.validate()

    def dim(self, k: int) -> int:
        return k + 1 if self.d_rule == "k+1" else int(self.d_rule)

    def validate(self):
        if not self.seeds:
            raise ConfigError("seed list is empty")
        if not self.n_values or not self.k_values:
            raise ConfigError("n and k lists must be non-empty")
        if self.d_rule != "k+1" and not (isinstance(self.d_rule, int) and self.d_rule >= 1):
            raise ConfigError(f"d must be 'k+1' or a positive integer, got {self.d_rule!r}")
        for n in self.n_values:
            for k in self.k_values:
                if n < 1 or k < 1:
                    raise ConfigError("n and k must be positive")
                if self.dim(k) < k:
                    raise ConfigError(f"d={self.dim(k)} < k={k}")
        if self.kernel.kind != self.activation:
            raise ConfigError("kernel activation does not match the sweep activation")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")

    @property
    def summary_path(self) -> str:
        root, _ = os.path.splitext(self.output_path)
        return root + ".summary.csv"

    def cells(self):
        return [(n, k, s) for n in self.n_values for k in self.k_values for s in self.seeds]

    @classmethod
    def from_file(cls, path) -> "SweepConfig":
        parser = configparser.ConfigParser()
        if not parser.read(path):
            raise ConfigError(f"cannot read config file {path}")
        return cls.from_parser(parser)

    @classmethod
    def from_parser(cls, parser: configparser.ConfigParser) -> "SweepConfig":
        try:
            sw = parser["sweep"]
        except KeyError:
            raise ConfigError("config needs a [sweep] section") from None
        known = {"activation", "n", "k", "d", "seeds", "kernel", "output", "workers"}
        unknown = set(sw) - known
        if unknown:
            raise ConfigError(f"unknown [sweep] keys: {sorted(unknown)}")
        try:
            kind = ActivationKind.parse(sw.get("activation", "erf"))
            d_text = sw.get("d", "k+1").strip().lower()
            d_rule = "k+1" if d_text == "k+1" else int(d_text)
            kernel = KernelSpec.parse(kind, sw["kernel"]) if "kernel" in sw else None
            flow = flow_config_from_section(parser["flow"] if parser.has_section("flow") else {},
                                            parser["classifier"] if parser.has_section("classifier") else {})
            return cls(activation=kind,
                       n_values=parse_int_list(sw.get("n", "")),
                       k_values=parse_int_list(sw.get("k", "")),
                       d_rule=d_rule,
                       seeds=parse_int_list(sw.get("seeds", "")),
                       flow=flow, kernel=kernel,
                       output_path=sw.get("output", "phase.jsonl"),
                       workers=int(sw.get("workers", "1")))
        except ConfigError:
            raise
        except (ValueError, TypeError) as exc:
            raise ConfigError(str(exc)) from exc


def flow_config_from_section(section, classifier=None) -> FlowConfig:
    """Build a :class:`FlowConfig` from string-valued key/value pairs."""
    casts = {"init": str, "std": float, "seed": int, "grad_tol": float, "rel_tol": float,
             "abs_tol": float, "max_steps": int, "snapshot_stride": int,
             "newton_polish": _parse_bool, "polish_threshold": float}
    kwargs = {}
    for key, value in dict(section).items():
        if key not in casts:
            raise ConfigError(f"unknown [flow] key {key!r}")
        kwargs[key] = casts[key](value)
    if classifier:
        names = {f.name for f in fields(ClassifierThresholds)}
        th = {}
        for key, value in dict(classifier).items():
            if key not in names:
                raise ConfigError(f"unknown [classifier] key {key!r}")
            th[key] = float(value)
        kwargs["thresholds"] = ClassifierThresholds(**th)
    return FlowConfig(**kwargs)


# ---------------------------------------------------------------------------
# records


@dataclass
class PhaseCell:
    n: int
    k: int
    seed: int
    d: int
    activation: str
    final_loss: float
    theory_loss: float
    gap: float
    label: str
    steps: int
    converged: bool
    grad_norm: float
    polished: bool = False
    status: str = ""

    def to_json(self) -> str:
        return json.dumps({"type": RECORD_TYPE, **asdict(self)}, sort_keys=True)

    @classmethod
    def from_json(cls, line: str) -> "PhaseCell":
        obj = json.loads(line)
        if obj.pop("type", None) != RECORD_TYPE:
            raise ValueError("not a phase-cell record")
        return cls(**obj)


def read_records(path) -> list[PhaseCell]:
    with open(path, encoding="utf-8") as fh:
        return [PhaseCell.from_json(line) for line in fh if line.strip()]


def theory_loss(n: int, k: int) -> float:
    """Conjectured optimum; a wide enough student reaches zero loss."""
    return cp.conjectured_loss(n, k) if n < k else 0.0


def _run_cell(args) -> PhaseCell:
    cfg, n, k, seed = args
    d = cfg.dim(k)
    flow = FlowConfig(**{**asdict(cfg.flow), "seed": seed, "snapshot_stride": 0,
                         "thresholds": cfg.flow.thresholds})
    teacher = build_unit_orthonormal_teacher(k, d, cfg.activation)
    rec = integrate(init_student(n, d, flow, cfg.activation), teacher, cfg.kernel, flow)
    if rec.degenerate:
        label = DEGENERATE
    elif not rec.converged:
        label = NOT_CONVERGED
    else:
        label = classify(rec, teacher, n, k, flow.thresholds)
    theory = theory_loss(n, k)
    return PhaseCell(n, k, seed, d, str(cfg.activation), rec.final_loss, theory,
                     rec.final_loss - theory, label, rec.steps, rec.converged,
                     rec.final_grad_norm, rec.polished, rec.status)


def summarize(cells, workers: int = 1) -> list[dict]:
    rows = []
    keys = sorted({(c.n, c.k) for c in cells})
    for n, k in keys:
        group = [c for c in cells if (c.n, c.k) == (n, k)]
        row = {"n": n, "k": k, "seeds": len(group)}
        for label in LABELS:
            row[f"frac_{label}"] = sum(c.label == label for c in group) / len(group)
        gaps = [c.gap for c in group if c.converged]
        row["mean_gap"] = float(np.mean(gaps)) if gaps else float("nan")
        row["min_loss"] = min(c.final_loss for c in group)
        row["workers"] = workers
        rows.append(row)
    return rows


def write_table(path, rows, header_comment=None):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        if header_comment:
            fh.write(f"# {header_comment}\n")
        if not rows:
            return
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)


def run_phase_sweep(cfg: SweepConfig) -> list[PhaseCell]:
    """Flow, classify and persist every ``(n, k, seed)`` cell.

    Cells are computed by ``cfg.workers`` processes but written by this
    process alone, in cell order, one flushed line at a time, so a crash
    leaves a valid prefix of the record file.
    """
    cfg.validate()
    jobs = [(cfg, n, k, s) for n, k, s in cfg.cells()]
    Path(cfg.output_path).parent.mkdir(parents=True, exist_ok=True)
    cells = []
    with open(cfg.output_path, "w", encoding="utf-8") as out:
        if cfg.workers == 1:
            results = map(_run_cell, jobs)
            pool = None
        else:
            pool = ProcessPoolExecutor(max_workers=cfg.workers)
            results = pool.map(_run_cell, jobs)
        try:
            for cell in results:
                out.write(cell.to_json() + "\n")
                out.flush()
                cells.append(cell)
                log.info("n=%d k=%d seed=%d -> %s (loss %.6g)", cell.n, cell.k, cell.seed,
                         cell.label, cell.final_loss)
        finally:
            if pool is not None:
                pool.shutdown(cancel_futures=True)
    write_table(cfg.summary_path, summarize(cells, cfg.workers))
    return cells


# ---------------------------------------------------------------------------
# tables


def _one_neuron_row(kind: ActivationKind, k: int) -> dict:
    row = {"activation": str(kind), "k": k, "r": math.nan, "a": math.nan,
           "u": 1.0 / math.sqrt(k), "loss": math.nan, "grad_norm": math.nan,
           "method": "", "r_le_inv_sqrt_k": "", "a_ge_k": "", "error": ""}
    teacher = build_unit_orthonormal_teacher(k, k, kind)
    try:
        if kind == ERF:
            point = cp.one_neuron_erf(k, teacher)
            row["method"] = "closed-form"
        elif kind == RELU:
            point = cp.one_neuron_relu(k, teacher)
            row["method"] = "closed-form"
        else:
            point = cp.one_neuron_fixed_point(kind, k, teacher=teacher)
            row["method"] = "fixed-point"
    except cp.NoBracketError as exc:
        row["error"] = str(exc)
        return row
    s = point.student
    row.update(r=float(np.linalg.norm(s.W)), a=float(s.a[0]), loss=point.loss_value,
               grad_norm=point.grad_norm)
    if kind.name in ("softplus", "tanh", "sigmoid"):
        row["r_le_inv_sqrt_k"] = row["r"] <= 1.0 / math.sqrt(k)
        row["a_ge_k"] = row["a"] >= k
    return row


def run_one_neuron_table(kinds, k_range) -> list[dict]:
    """Optimal one-neuron structure ``(r*, a*, u*, loss)`` per activation and width."""
    return [_one_neuron_row(kind, int(k)) for kind in kinds for k in k_range]


def run_hessian_scan(n_values, offsets=None, ratios=None, d_extra: int = 1) -> list[dict]:
    """Minimum Hessian eigenvalue at the optimal CA point for ``k = n + h`` or ``k = c n``.

    The input dimension is ``k + d_extra``.
    """
    if (offsets is None) == (ratios is None):
        raise ValueError("give exactly one of offsets or ratios")
    rows = []
    for n in n_values:
        ks = [(f"k=n+{h}", n + h) for h in offsets] if offsets is not None else \
             [(f"k={c}n", c * n) for c in ratios]
        for series, k in ks:
            if not 1 <= n < k:
                raise ValueError(f"optimal CA needs 1 <= n < k, got n={n}, k={k}")
            teacher = build_unit_orthonormal_teacher(k, k + d_extra)
            point = cp.optimal_ca(n, k, teacher, certify=False)
            H = hessian(point.student, teacher, KernelSpec.default(ERF))
            rows.append({"series": series, "n": n, "k": k, "d": k + d_extra,
                         "min_eig": min_eigenvalue(H), "loss": point.loss_value})
    return rows


def ca_table(n: int, k: int) -> list[dict]:
    """Every CA partition for ``(n, k)`` with its loss and multiplicity."""
    rows = [{"partition": "-".join(map(str, p)), "loss": cp.ca_loss(p, k),
             "count": cp.count_ca_points(p, k)} for p in cp.enumerate_partitions(n, k)]
    best = min(r["loss"] for r in rows)
    for r in rows:
        r["optimal"] = r["loss"] == best
    return rows


# ---------------------------------------------------------------------------
# plot data


def _trajectory_rows(rec: FlowRecord):
    rows = []
    for snap in rec.snapshots:
        row = {"time": snap.time}
        n, k = snap.order.U.shape
        for i in range(n):
            for j in range(k):
                row[f"u_{i}_{j}"] = float(snap.order.U[i, j])
        for i in range(n):
            row[f"r_{i}"] = float(snap.order.r[i])
        row["loss"] = snap.loss
        rows.append(row)
    return rows


def emit_plot_data(records, kind: str, path) -> str:
    """Write plot-ready columnar data (CSV with a ``# schema`` first line).

    ``records`` depends on ``kind``: phase cells for ``phase``, a
    :class:`FlowRecord` for ``trajectory``, ``(r_grid, u_grid, F)`` for
    ``fgrid`` and row dicts for ``one_neuron`` and ``hessian``.
    """
    if kind not in PLOT_KINDS:
        raise ValueError(f"unknown plot kind {kind!r}; expected one of {PLOT_KINDS}")
    if kind == "phase":
        rows = [asdict(c) for c in records]
        comment = "schema: phase v1; one row per (n, k, seed) cell"
    elif kind == "trajectory":
        rows = _trajectory_rows(records)
        comment = "schema: trajectory v1; u_i_j = corr(student i, teacher j), r_i = norm"
    elif kind == "fgrid":
        r_grid, u_grid, F = records
        F = np.asarray(F)
        if F.shape != (len(r_grid), len(u_grid)):
            raise ValueError("fgrid matrix does not match its axes")
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="", encoding="utf-8") as fh:
            fh.write("# schema: fgrid v1; rows = r, columns = u, entries = f(r, u)\n")
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["r\\u"] + [repr(float(u)) for u in u_grid])
            for r, vals in zip(r_grid, F):
                w.writerow([repr(float(r))] + [repr(float(v)) for v in vals])
        return str(path)
    else:
        rows = list(records)
        comment = f"schema: {kind} v1"
    write_table(path, rows, comment)
    return str(path)


def read_plot_data(path):
    """Read back a file written by :func:`emit_plot_data` as ``(schema, rows)``."""
    with open(path, encoding="utf-8") as fh:
        schema = fh.readline().lstrip("# ").strip()
        rows = list(csv.reader(fh))
    return schema, rows
