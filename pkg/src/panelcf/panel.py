"""Canonical panel representation, parameter containers, and CSV round trip.

Long-format CSV contract: columns ``id,t,y,x1..x{dx},z1..z{dz}[,w1..w{dw}]``,
UTF-8, ``.`` decimal separator.  A schema map (JSON) can rename columns to
the roles ``{id, t, y, x, z, w}``.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np

from .errors import (BalanceError, DomainError, MissingDataError, SchemaError,
                     ShapeError)
from .numerics import TOL_PSD, check_symmetric

#: relative singular-value cutoff for the rank diagnostics
TOL_RANK = 1e-8


def _freeze(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a, dtype=float)
    a.flags.writeable = False
    return a


@dataclass(frozen=True)
class PanelDataset:
    """Balanced panel of N units observed for T periods.

    ``y`` is N x T binary, ``X`` is N x T x d_x (endogenous), ``Z`` is
    N x T x d_z (exogenous + instruments), ``W`` is N x T x d_w (structural
    exogenous, may be empty).  ``z_bar`` holds the unit time-means of Z.
    Immutable after construction; safe for concurrent reads.
    """

    unit_ids: np.ndarray
    y: np.ndarray
    X: np.ndarray
    Z: np.ndarray
    W: np.ndarray
    z_bar: np.ndarray = field(init=False)

    def __post_init__(self):
        y = np.ascontiguousarray(self.y, dtype=float)
        X = np.ascontiguousarray(self.X, dtype=float)
        Z = np.ascontiguousarray(self.Z, dtype=float)
        W = np.ascontiguousarray(self.W, dtype=float)
        if y.ndim != 2:
            raise ShapeError("y must be N x T", module="core_model")
        N, T = y.shape
        if T < 2:
            raise SchemaError("panel needs at least 2 periods", module="core_model")
        if X.shape[:2] != (N, T) or X.ndim != 3:
            raise ShapeError("X must be N x T x d_x", module="core_model")
        if Z.shape[:2] != (N, T) or Z.ndim != 3:
            raise ShapeError("Z must be N x T x d_z", module="core_model")
        if W.size and (W.shape[:2] != (N, T) or W.ndim != 3):
            raise ShapeError("W must be N x T x d_w", module="core_model")
        if W.size == 0:
            W = np.zeros((N, T, 0))
        for name, a in (("y", y), ("X", X), ("Z", Z), ("W", W)):
            if np.isnan(a).any():
                raise MissingDataError(f"missing cells in {name}; no imputation is performed",
                                       module="core_model")
        if not np.isin(y, (0.0, 1.0)).all():
            raise SchemaError("y must be binary 0/1", module="core_model")
        if Z.shape[2] < X.shape[2]:
            raise SchemaError(
                f"order condition violated: d_z={Z.shape[2]} < d_x={X.shape[2]}",
                module="core_model")
        ids = np.asarray(self.unit_ids)
        if ids.shape != (N,):
            raise ShapeError("unit_ids must have length N", module="core_model")
        object.__setattr__(self, "y", _freeze(y))
        object.__setattr__(self, "X", _freeze(X))
        object.__setattr__(self, "Z", _freeze(Z))
        object.__setattr__(self, "W", _freeze(W))
        object.__setattr__(self, "z_bar", _freeze(Z.mean(axis=1)))
        ids = ids.copy()
        ids.flags.writeable = False
        object.__setattr__(self, "unit_ids", ids)

    @property
    def n_units(self) -> int:
        return self.y.shape[0]

    @property
    def periods(self) -> int:
        return self.y.shape[1]

    @property
    def d_x(self) -> int:
        return self.X.shape[2]

    @property
    def d_z(self) -> int:
        return self.Z.shape[2]

    @property
    def d_w(self) -> int:
        return self.W.shape[2]

    @property
    def n_obs(self) -> int:
        return self.n_units * self.periods


@dataclass(frozen=True)
class ReducedFormParams:
    """First-stage parameters: slopes pi on z_t, Mundlak slopes pi_bar on z̄
    (plus an optional intercept in the unit-mean equation), and the SPD
    covariances of the idiosyncratic errors and of the residual effects."""

    pi: np.ndarray
    pi_bar: np.ndarray
    sigma_eps: np.ndarray
    lambda_alpha: np.ndarray
    intercept: np.ndarray | None = None  # d_x vector, part of E(alpha | Z)

    def __post_init__(self):
        pi = np.atleast_2d(np.asarray(self.pi, dtype=float))
        pi_bar = np.atleast_2d(np.asarray(self.pi_bar, dtype=float))
        if pi.shape != pi_bar.shape:
            raise ShapeError("pi and pi_bar must have the same shape", module="core_model")
        m = pi.shape[0]
        sig = check_symmetric(self.sigma_eps, "sigma_eps")
        lam = check_symmetric(self.lambda_alpha, "lambda_alpha")
        if sig.shape != (m, m) or lam.shape != (m, m):
            raise ShapeError("covariances must be d_x x d_x", module="core_model")
        for name, a in (("sigma_eps", sig), ("lambda_alpha", lam)):
            w = np.linalg.eigvalsh(a)
            if w.min() < TOL_PSD * (1.0 - 1e-12):
                raise DomainError(f"{name} must have eigenvalues >= {TOL_PSD}",
                                  module="core_model")
        c = self.intercept
        if c is not None:
            c = np.asarray(c, dtype=float).reshape(-1)
            if c.shape != (m,):
                raise ShapeError("intercept must be a d_x vector", module="core_model")
            c = _freeze(c)
        object.__setattr__(self, "pi", _freeze(pi))
        object.__setattr__(self, "pi_bar", _freeze(pi_bar))
        object.__setattr__(self, "sigma_eps", _freeze(sig))
        object.__setattr__(self, "lambda_alpha", _freeze(lam))
        object.__setattr__(self, "intercept", c)

    @property
    def d_x(self) -> int:
        return self.pi.shape[0]

    @property
    def d_z(self) -> int:
        return self.pi.shape[1]

    def alpha_mean(self, z_bar: np.ndarray) -> np.ndarray:
        """E(alpha | Z) = pi_bar z̄ (+ intercept); z_bar is N x d_z."""
        mean = z_bar @ self.pi_bar.T
        if self.intercept is not None:
            mean = mean + self.intercept
        return mean


@dataclass(frozen=True)
class SecondStageParams:
    """Second-stage coefficients, probit-scale normalized (sigma_eta = 1)."""

    phi: np.ndarray        # d_x + d_w, coefficients on (x, w)
    phi_alpha: np.ndarray  # d_x
    phi_eps: np.ndarray    # d_x
    rho_work: float | None = None

    def __post_init__(self):
        phi = np.asarray(self.phi, dtype=float).reshape(-1)
        pa = np.asarray(self.phi_alpha, dtype=float).reshape(-1)
        pe = np.asarray(self.phi_eps, dtype=float).reshape(-1)
        if pa.shape != pe.shape:
            raise ShapeError("phi_alpha and phi_eps must both be d_x vectors",
                             module="core_model")
        for name, a in (("phi", phi), ("phi_alpha", pa), ("phi_eps", pe)):
            if not np.isfinite(a).all():
                raise DomainError(f"{name} has non-finite entries", module="core_model")
        if self.rho_work is not None and not (-1.0 < self.rho_work < 1.0):
            raise DomainError("rho_work must lie in (-1, 1)", module="core_model")
        object.__setattr__(self, "phi", _freeze(phi))
        object.__setattr__(self, "phi_alpha", _freeze(pa))
        object.__setattr__(self, "phi_eps", _freeze(pe))

    @property
    def theta(self) -> np.ndarray:
        return np.concatenate([self.phi, self.phi_alpha, self.phi_eps])

    @classmethod
    def from_theta(cls, theta: np.ndarray, d_x: int, rho_work: float | None = None
                   ) -> "SecondStageParams":
        theta = np.asarray(theta, dtype=float).reshape(-1)
        return cls(phi=theta[: theta.size - 2 * d_x],
                   phi_alpha=theta[theta.size - 2 * d_x: theta.size - d_x],
                   phi_eps=theta[theta.size - d_x:],
                   rho_work=rho_work)


# ---------------------------------------------------------------------------
# CSV round trip
# ---------------------------------------------------------------------------

DEFAULT_SCHEMA = {"id": "id", "t": "t", "y": "y"}


def read_schema(path: str) -> dict:
    with open(path, "r", encoding="utf-8") as fh:
        schema = json.load(fh)
    if not isinstance(schema, dict):
        raise SchemaError("schema file must contain a JSON object", module="core_model")
    return schema


def _resolve_columns(header: list[str], schema: dict | None) -> dict:
    schema = dict(schema or {})
    roles = {
        "id": schema.get("id", "id"),
        "t": schema.get("t", "t"),
        "y": schema.get("y", "y"),
    }
    for key in ("x", "z", "w"):
        if key in schema:
            cols = schema[key]
            if isinstance(cols, str):
                cols = [cols]
            roles[key] = list(cols)
        else:
            roles[key] = sorted(
                (c for c in header if c.startswith(key) and c[len(key):].isdigit()),
                key=lambda c: int(c[len(key):]))
    missing = [c for c in (roles["id"], roles["t"], roles["y"], *roles["x"], *roles["z"], *roles["w"])
               if c not in header]
    if missing:
        raise SchemaError(f"columns not found in CSV: {missing}", module="core_model")
    if not roles["x"] or not roles["z"]:
        raise SchemaError("need at least one x column and one z column", module="core_model")
    return roles


def load_panel_csv(path: str, schema: dict | None = None, binary_y: bool = True):
    """Load a long-format panel CSV into a validated :class:`PanelDataset`.

    Rows are sorted by (unit, period).  Unbalanced panels raise
    :class:`BalanceError`; empty cells raise :class:`MissingDataError`.
    With ``binary_y=False`` a continuous outcome is returned alongside the
    dataset (the dataset itself then stores a zeroed y) for linear-model use.
    """
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise SchemaError("empty CSV", module="core_model")
        rows = list(reader)
    if not rows:
        raise SchemaError("CSV has a header but no data rows", module="core_model")
    roles = _resolve_columns(header, schema)
    idx = {c: header.index(c) for c in header}

    def cell(row, col):
        v = row[idx[col]].strip()
        if v == "":
            raise MissingDataError(f"missing value in column {col}", module="core_model")
        return v

    def fcell(row, col) -> float:
        v = cell(row, col)
        try:
            return float(v)
        except ValueError:
            raise SchemaError(f"non-numeric value {v!r} in column {col}", module="core_model")

    def id_key(uid: str):
        try:
            return (0, float(uid), "")
        except ValueError:
            return (1, 0.0, uid)

    parsed = []
    for row in rows:
        if len(row) != len(header):
            raise SchemaError("ragged CSV row", module="core_model")
        parsed.append((cell(row, roles["id"]), fcell(row, roles["t"]), row))
    order = sorted(range(len(parsed)),
                   key=lambda i: (id_key(parsed[i][0]), parsed[i][1]))

    units: list[str] = []
    counts: dict[str, int] = {}
    for i in order:
        uid = parsed[i][0]
        if uid not in counts:
            counts[uid] = 0
            units.append(uid)
        counts[uid] += 1
    T = max(counts.values())
    bad = {u: c for u, c in counts.items() if c != T}
    if bad:
        u, c = next(iter(bad.items()))
        raise BalanceError(f"unbalanced panel: unit {u!r} has {c} of {T} periods",
                           module="core_model")
    N = len(units)
    dx, dz, dw = len(roles["x"]), len(roles["z"]), len(roles["w"])
    y = np.empty((N, T))
    X = np.empty((N, T, dx))
    Z = np.empty((N, T, dz))
    W = np.empty((N, T, dw))
    for pos, i in enumerate(order):
        u, t = divmod(pos, T)
        row = parsed[i][2]
        y[u, t] = fcell(row, roles["y"])
        for j, c in enumerate(roles["x"]):
            X[u, t, j] = fcell(row, c)
        for j, c in enumerate(roles["z"]):
            Z[u, t, j] = fcell(row, c)
        for j, c in enumerate(roles["w"]):
            W[u, t, j] = fcell(row, c)
    if binary_y:
        return PanelDataset(unit_ids=np.array(units, dtype=object), y=y, X=X, Z=Z, W=W)
    data = PanelDataset(unit_ids=np.array(units, dtype=object),
                        y=np.zeros_like(y), X=X, Z=Z, W=W)
    return data, y


def fmt(x: float) -> str:
    """Format a float with 17 significant digits (exact double round trip)."""
    return format(float(x), ".17g")


def save_panel_csv(data: PanelDataset, path: str, y: np.ndarray | None = None) -> None:
    """Write a dataset back to the long-format CSV contract (bit round trip)."""
    y = data.y if y is None else np.asarray(y, dtype=float)
    header = (["id", "t", "y"]
              + [f"x{j + 1}" for j in range(data.d_x)]
              + [f"z{j + 1}" for j in range(data.d_z)]
              + [f"w{j + 1}" for j in range(data.d_w)])
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for i in range(data.n_units):
            for t in range(data.periods):
                row = [str(data.unit_ids[i]), str(t + 1), fmt(y[i, t])]
                row += [fmt(v) for v in data.X[i, t]]
                row += [fmt(v) for v in data.Z[i, t]]
                row += [fmt(v) for v in data.W[i, t]]
                writer.writerow(row)


# ---------------------------------------------------------------------------
# rank diagnostics
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RankCheck:
    name: str
    singular_values: np.ndarray
    required_rank: int
    passed: bool


@dataclass(frozen=True)
class RankDiagnostics:
    checks: tuple
    tol_rank: float

    @property
    def all_passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def __str__(self) -> str:
        lines = [f"rank diagnostics (tol_rank={self.tol_rank:g})"]
        for c in self.checks:
            status = "pass" if c.passed else "FAIL"
            sv = ", ".join(f"{v:.3e}" for v in c.singular_values)
            lines.append(f"  [{status}] {c.name}: sv = [{sv}]")
        return "\n".join(lines)


def _svd_check(name: str, mat: np.ndarray, required: int, tol: float) -> RankCheck:
    sv = np.linalg.svd(np.atleast_2d(mat), compute_uv=False)
    cutoff = tol * (sv[0] if sv.size else 0.0)
    rank = int((sv > cutoff).sum())
    return RankCheck(name=name, singular_values=sv, required_rank=required,
                     passed=rank >= required)


def validate_rank_conditions(data: PanelDataset, rf: ReducedFormParams,
                             tol_rank: float = TOL_RANK) -> RankDiagnostics:
    """Numeric check of the four identification rank conditions.

    Conditions: E(x_t x_t') full rank d_x; the stacked slope matrix
    (pi, pi_bar) has rank d_x; the moment of (z_t', z̄')' has full rank; and
    the second-stage design moment E(XX') has full rank.
    """
    from .control_functions import compute_control_functions
    from .second_stage import build_design

    nt = data.n_obs
    x_flat = data.X.reshape(nt, data.d_x)
    mx = x_flat.T @ x_flat / nt
    big_pi = np.hstack([rf.pi, rf.pi_bar])
    zz = np.concatenate([data.Z, np.repeat(data.z_bar[:, None, :], data.periods, axis=1)],
                        axis=2).reshape(nt, 2 * data.d_z)
    mz = zz.T @ zz / nt
    cf = compute_control_functions(data, rf)
    design = build_design(data, cf)
    mxx = design.T @ design / nt
    checks = (
        _svd_check("E(x_t x_t')", mx, data.d_x, tol_rank),
        _svd_check("Pi = (pi, pi_bar)", big_pi, data.d_x, tol_rank),
        _svd_check("E((z', zbar')'(z', zbar'))", mz, 2 * data.d_z, tol_rank),
        _svd_check("E(XX') second-stage design", mxx, design.shape[1], tol_rank),
    )
    return RankDiagnostics(checks=checks, tol_rank=tol_rank)
