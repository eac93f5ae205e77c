"""Price and returns containers, CSV ingestion and synthetic universes."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import DimensionError, ParseError, ValidationError

RETURN_KINDS = ("gross", "simple", "log")
GENERATORS = ("csv", "sine", "sawtooth", "chirp", "aaft")
SURROGATE_BASE_PRICE = 100.0


def _frozen(a, dtype=float):
    a = np.array(a, dtype=dtype, copy=True)
    a.setflags(write=False)
    return a


def business_days(n: int, start: str = "2000-01-03") -> np.ndarray:
    """`n` consecutive business days starting at `start`."""
    return np.busday_offset(np.datetime64(start, "D"), np.arange(n), roll="forward")


@dataclass(frozen=True)
class PortfolioVector:
    """Budget fractions per asset. Sums to one; non-negative unless shorts are allowed."""

    weights: np.ndarray
    short_allowed: bool = False

    def __post_init__(self):
        w = _frozen(self.weights)
        if w.ndim != 1 or w.size == 0:
            raise ValidationError(f"weights must be a non-empty vector, got shape {w.shape}")
        if not np.all(np.isfinite(w)):
            raise ValidationError("weights must be finite")
        if abs(w.sum() - 1.0) > 1e-9:
            raise ValidationError(f"weights sum to {w.sum():.12g}, expected 1")
        if not self.short_allowed and w.min() < -1e-10:
            raise ValidationError(f"negative weight {w.min():.3g} without short selling")
        object.__setattr__(self, "weights", w)

    @property
    def M(self) -> int:
        return self.weights.size

    @classmethod
    def uniform(cls, M: int) -> "PortfolioVector":
        return cls(np.full(M, 1.0 / M))

    @classmethod
    def basis(cls, M: int, j: int) -> "PortfolioVector":
        w = np.zeros(M)
        w[j] = 1.0
        return cls(w)

    @classmethod
    def from_raw(cls, w, short_allowed=False) -> "PortfolioVector":
        """Clean up round-off (tiny negatives, sum drift) before validating."""
        w = np.asarray(w, dtype=float).copy()
        if not short_allowed:
            w[w < 0] = np.where(w[w < 0] > -1e-9, 0.0, w[w < 0])
        return cls(w / w.sum(), short_allowed)


@dataclass(frozen=True)
class PriceFrame:
    """Aligned T x M price history with a strictly increasing date index."""

    timestamps: np.ndarray
    assets: tuple
    values: np.ndarray

    def __post_init__(self):
        ts = np.array(self.timestamps, dtype="datetime64[D]")
        ts.setflags(write=False)
        v = _frozen(self.values)
        assets = tuple(str(a) for a in self.assets)
        if v.ndim != 2:
            raise ValidationError("price values must be a T x M matrix")
        if v.shape[1] != len(assets):
            raise DimensionError(f"{v.shape[1]} price columns but {len(assets)} asset names")
        if v.shape[0] != ts.size:
            raise DimensionError(f"{v.shape[0]} price rows but {ts.size} timestamps")
        if not np.all(np.isfinite(v)) or (v.size and v.min() <= 0):
            raise ValidationError("all prices must be finite and strictly positive")
        if ts.size > 1 and not np.all(np.diff(ts) > np.timedelta64(0, "D")):
            raise ValidationError("timestamps must be strictly increasing")
        object.__setattr__(self, "timestamps", ts)
        object.__setattr__(self, "assets", assets)
        object.__setattr__(self, "values", v)

    @property
    def T(self) -> int:
        return self.values.shape[0]

    @property
    def M(self) -> int:
        return self.values.shape[1]

    def slice(self, start: int, stop: int) -> "PriceFrame":
        return PriceFrame(self.timestamps[start:stop], self.assets, self.values[start:stop])

    def select(self, columns: Sequence[int]) -> "PriceFrame":
        columns = list(columns)
        return PriceFrame(self.timestamps, [self.assets[c] for c in columns], self.values[:, columns])


@dataclass(frozen=True)
class ReturnsFrame:
    """(T-1) x M returns of one kind; row k is the change from price k to price k+1."""

    kind: str
    values: np.ndarray
    assets: tuple
    timestamps: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.kind not in RETURN_KINDS:
            raise ValidationError(f"unknown returns kind {self.kind!r}")
        v = _frozen(self.values)
        if v.ndim != 2 or v.shape[1] != len(self.assets):
            raise DimensionError("returns values must be (T-1) x M matching assets")
        if self.kind == "gross" and v.size and v.min() <= 0:
            raise ValidationError("gross returns must be positive")
        if self.kind == "simple" and v.size and v.min() <= -1:
            raise ValidationError("simple returns must exceed -1")
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "assets", tuple(str(a) for a in self.assets))
        if self.timestamps is not None:
            ts = np.array(self.timestamps, dtype="datetime64[D]")
            ts.setflags(write=False)
            object.__setattr__(self, "timestamps", ts)

    @property
    def T(self) -> int:
        return self.values.shape[0]

    @property
    def M(self) -> int:
        return self.values.shape[1]

    def gross(self) -> np.ndarray:
        if self.kind == "gross":
            return self.values
        if self.kind == "simple":
            return self.values + 1.0
        return np.exp(self.values)

    def as_kind(self, kind: str) -> "ReturnsFrame":
        if kind == self.kind:
            return self
        if kind not in RETURN_KINDS:
            raise ValidationError(f"unknown returns kind {kind!r}")
        if kind == "log":
            v = np.log1p(self.values) if self.kind == "simple" else np.log(self.values)
        elif kind == "simple":
            v = np.expm1(self.values) if self.kind == "log" else self.values - 1.0
        else:
            v = self.gross()
        return ReturnsFrame(kind, v, self.assets, self.timestamps)

    def window(self, start: int, stop: int) -> "ReturnsFrame":
        ts = None if self.timestamps is None else self.timestamps[start:stop]
        return ReturnsFrame(self.kind, self.values[start:stop], self.assets, ts)


def to_returns(frame: PriceFrame, kind: str = "simple") -> ReturnsFrame:
    """Per-step returns of `frame` (gross p_t/p_{t-1}, simple gross-1, log ln gross)."""
    if frame.T < 2:
        raise ValidationError("need at least two price rows for returns")
    p = frame.values
    gross = p[1:] / p[:-1]
    if kind == "gross":
        v = gross
    elif kind == "simple":
        v = np.diff(p, axis=0) / p[:-1]
    elif kind == "log":
        v = np.log(gross)
    else:
        raise ValidationError(f"unknown returns kind {kind!r}")
    return ReturnsFrame(kind, v, frame.assets, frame.timestamps[1:])


def prices_from_returns(returns: ReturnsFrame, base=SURROGATE_BASE_PRICE, timestamps=None) -> PriceFrame:
    """Compound returns onto a base price; the inverse of `to_returns` up to scale."""
    base = np.broadcast_to(np.asarray(base, dtype=float), (returns.M,))
    log_r = returns.as_kind("log").values
    cum = np.vstack([np.zeros((1, returns.M)), np.cumsum(log_r, axis=0)])
    if timestamps is None:
        timestamps = business_days(returns.T + 1)
    return PriceFrame(timestamps, returns.assets, base * np.exp(cum))


def portfolio_returns(returns: ReturnsFrame, weights_path) -> np.ndarray:
    """Per-step portfolio simple returns w_t . r_t."""
    R = returns.as_kind("simple").values
    W = np.array([w.weights if isinstance(w, PortfolioVector) else np.asarray(w, float)
                  for w in weights_path])
    if W.shape != R.shape:
        raise DimensionError(f"weights path shape {W.shape} does not match returns {R.shape}")
    return np.einsum("ti,ti->t", R, W)


# ---------------------------------------------------------------- universes

@dataclass
class UniverseSpec:
    """Recipe for a market universe; the seed fully determines synthetic output."""

    generator: str
    M: int = 2
    T: int = 500
    seed: int = 0
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.generator not in GENERATORS:
            raise ValidationError(f"unknown generator {self.generator!r}; expected one of {GENERATORS}")
        if self.generator != "csv" and (int(self.M) < 1 or int(self.T) < 2):
            raise ValidationError("universe needs M >= 1 and T >= 2")
        self.M, self.T, self.seed = int(self.M), int(self.T), int(self.seed)

    def to_dict(self) -> dict:
        return {"generator": self.generator, "M": self.M, "T": self.T,
                "seed": self.seed, "params": self.params}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "UniverseSpec":
        unknown = set(d) - {"generator", "M", "T", "seed", "params"}
        if unknown:
            raise ValidationError(f"unknown universe keys: {sorted(unknown)}")
        return cls(d["generator"], d.get("M", 2), d.get("T", 500), d.get("seed", 0), dict(d.get("params", {})))

    @classmethod
    def from_json(cls, text: str) -> "UniverseSpec":
        return cls.from_dict(json.loads(text))


def _per_asset(params, key, M, default_fn):
    if key in params:
        v = np.broadcast_to(np.asarray(params[key], dtype=float), (M,)).copy()
        return v
    return default_fn()


def _sawtooth(x):
    # rises linearly from -1 to 1 over each 2*pi period
    return 2.0 * (np.mod(x, 2 * np.pi) / (2 * np.pi)) - 1.0


def wave_parameters(spec: UniverseSpec) -> dict:
    """Resolve wave parameters; missing ones are drawn from the spec seed."""
    rng = np.random.default_rng(spec.seed)
    M, p = spec.M, spec.params
    # draw everything in a fixed order so explicit params don't shift the stream
    d_offset = np.full(M, 100.0)
    d_amp = rng.uniform(5.0, 30.0, M)
    d_omega = 2 * np.pi / rng.uniform(10.0, 60.0, M)
    d_phase = rng.uniform(0, 2 * np.pi, M)
    out = {
        "offset": _per_asset(p, "offset", M, lambda: d_offset),
        "amplitude": _per_asset(p, "amplitude", M, lambda: d_amp),
        "phase": _per_asset(p, "phase", M, lambda: d_phase),
    }
    if "period" in p:
        out["omega"] = 2 * np.pi / _per_asset(p, "period", M, None)
    else:
        out["omega"] = _per_asset(p, "omega", M, lambda: d_omega)
    # chirp: instantaneous frequency omega + rate * t; default doubles it over the series
    out["rate"] = _per_asset(p, "rate", M, lambda: out["omega"] / max(spec.T, 1))
    return out


def gen_waves(spec: UniverseSpec) -> PriceFrame:
    """Deterministic sine, sawtooth or chirp price series."""
    if spec.generator not in ("sine", "sawtooth", "chirp"):
        raise ValidationError(f"gen_waves cannot build {spec.generator!r}")
    q = wave_parameters(spec)
    if np.any(np.abs(q["amplitude"]) >= q["offset"]):
        raise ValidationError("amplitude must be below offset to keep prices positive")
    t = np.arange(spec.T, dtype=float)[:, None]
    A, off, w, ph = q["amplitude"], q["offset"], q["omega"], q["phase"]
    if spec.generator == "sine":
        values = off + A * np.sin(w * t + ph)
    elif spec.generator == "sawtooth":
        values = off + A * _sawtooth(w * t + ph)
    else:
        values = off + A * np.sin(ph + w * t + 0.5 * q["rate"] * t ** 2)
    if values.min() <= 0:
        raise ValidationError("generated prices are not strictly positive")
    assets = [f"{spec.generator.upper()}{i}" for i in range(spec.M)]
    return PriceFrame(business_days(spec.T), assets, values)


def phase_randomize(x: np.ndarray, rng: np.random.Generator):
    """Random-phase surrogate of each column of `x`.

    Returns the real surrogate and the largest imaginary part left by the
    inverse transform of the conjugate-symmetric spectrum.
    """
    x = np.asarray(x, dtype=float)
    T = x.shape[0]
    spectrum = np.fft.fft(x, axis=0)
    n_free = (T - 1) // 2  # bins 1..n_free pair with T-1..T-n_free
    phases = rng.uniform(0.0, 2 * np.pi, size=(n_free,) + x.shape[1:])
    rot = np.ones(x.shape, dtype=complex)
    rot[1:n_free + 1] = np.exp(1j * phases)
    rot[T - n_free:] = np.conj(rot[1:n_free + 1][::-1])
    # DC keeps its phase; for even T the Nyquist bin stays real (phase 0 or pi)
    out = np.fft.ifft(np.abs(spectrum) * np.exp(1j * np.angle(spectrum)) * rot, axis=0)
    return out.real, float(np.abs(out.imag).max(initial=0.0))


def aaft_surrogate(frame: ReturnsFrame, seed: int) -> ReturnsFrame:
    """Amplitude-spectrum preserving, phase-randomized surrogate (column-wise)."""
    if frame.T < 4:
        raise ValidationError("surrogates need at least 4 samples per column")
    rng = np.random.default_rng(seed)
    values, _ = phase_randomize(frame.values, rng)
    if frame.kind == "gross" and values.min() <= 0:
        raise ValidationError("surrogate produced non-positive gross returns; use log returns")
    if frame.kind == "simple" and values.min() <= -1:
        raise ValidationError("surrogate produced simple returns below -1; use log returns")
    return ReturnsFrame(frame.kind, values, frame.assets, frame.timestamps)


def aaft_prices(frame: ReturnsFrame, seed: int) -> PriceFrame:
    """Surrogate in log-returns space compounded onto a base price of 100."""
    sur = aaft_surrogate(frame.as_kind("log"), seed)
    return prices_from_returns(sur, SURROGATE_BASE_PRICE)


def _aaft_source(spec: UniverseSpec) -> ReturnsFrame:
    p = spec.params
    if "source" in p:
        return to_returns(load_csv(p["source"]), "log")
    # seeded Gaussian source with per-asset drift and volatility
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 1]))
    drift = _per_asset(p, "drift", spec.M, lambda: np.linspace(-0.0005, 0.001, spec.M))
    vol = _per_asset(p, "vol", spec.M, lambda: np.full(spec.M, 0.01))
    x = drift + vol * rng.standard_normal((spec.T - 1, spec.M))
    return ReturnsFrame("log", x, [f"SRC{i}" for i in range(spec.M)])


def generate_universe(spec: UniverseSpec) -> PriceFrame:
    """Build the PriceFrame described by `spec`."""
    if spec.generator == "csv":
        if "path" not in spec.params:
            raise ValidationError("csv universe needs params.path")
        return load_csv(spec.params["path"])
    if spec.generator == "aaft":
        src = _aaft_source(spec)
        pf = aaft_prices(src, spec.seed)
        return PriceFrame(pf.timestamps, [f"AAFT{i}" for i in range(src.M)], pf.values)
    return gen_waves(spec)


# ---------------------------------------------------------------- CSV

def load_csv(path, date_column: str = "date", columns: Optional[Sequence[str]] = None) -> PriceFrame:
    """Read a `date,TICK1,...` CSV with ISO dates.

    Rows with any missing price are dropped; rows are sorted by date.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"price file not found: {path}")
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError("empty file", line=1) from None
        header = [h.strip() for h in header]
        if date_column not in header:
            raise ParseError(f"missing date column {date_column!r}", line=1)
        di = header.index(date_column)
        names = [h for i, h in enumerate(header) if i != di] if columns is None else list(columns)
        if not names:
            raise ParseError("no price columns", line=1)
        try:
            idx = [header.index(n) for n in names]
        except ValueError as exc:
            raise ParseError(f"unknown column: {exc}", line=1) from None
        dates, rows = [], []
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise ParseError(f"expected {len(header)} fields, got {len(row)}", line=lineno)
            try:
                d = np.datetime64(row[di].strip(), "D")
            except ValueError:
                raise ParseError(f"bad date {row[di]!r}", line=lineno) from None
            cells = [row[i].strip() for i in idx]
            if any(c == "" or c.lower() in ("na", "nan", "null") for c in cells):
                continue
            try:
                vals = [float(c) for c in cells]
            except ValueError:
                raise ParseError(f"non-numeric price in {cells}", line=lineno) from None
            if any(not math.isfinite(v) or v <= 0 for v in vals):
                raise ValidationError(f"line {lineno}: non-positive or non-finite price {vals}")
            dates.append(d)
            rows.append(vals)
    if not rows:
        raise ParseError("no complete price rows")
    dates = np.array(dates, dtype="datetime64[D]")
    order = np.argsort(dates, kind="stable")
    values = np.array(rows, dtype=float).reshape(len(rows), len(names))[order]
    return PriceFrame(dates[order], names, values)


def write_csv(frame: PriceFrame, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["date", *frame.assets])
        for d, row in zip(frame.timestamps, frame.values):
            w.writerow([str(d), *(repr(float(v)) for v in row)])
