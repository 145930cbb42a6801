"""Histogram entropy estimators and fusion diagnostics.

All entropies are in bits.  Continuous activations are discretized with
equal-width bins over the observed range; every estimator takes the binning
explicitly so marginal, joint and mutual-information values share it and
H(a) + H(b) - I(a; b) == H(a, b) holds up to float error.
"""
from __future__ import annotations

import csv
import io
import itertools
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError, UsageError
from .fusion import FusionPair

MASS_TOL = 1e-12
KL_EPS = 1e-9


@dataclass(frozen=True)
class Binning:
    bins: int = 64
    lo: float | None = None
    hi: float | None = None

    def __post_init__(self):
        if self.bins < 1:
            raise ConfigError("binning needs at least one bin")

    def edges(self, values):
        values = np.asarray(values, dtype=np.float64)
        lo = float(values.min()) if self.lo is None else self.lo
        hi = float(values.max()) if self.hi is None else self.hi
        if hi <= lo:
            hi = lo + 1.0
        return np.linspace(lo, hi, self.bins + 1)


def discretize(values, edges):
    """Bin index per value; the last bin is closed on the right."""
    values = np.asarray(values, dtype=np.float64)
    idx = np.searchsorted(edges, values, side="right") - 1
    return np.clip(idx, 0, len(edges) - 2)


@dataclass
class HistogramDistribution:
    edges: np.ndarray
    masses: np.ndarray

    def __post_init__(self):
        self.edges = np.asarray(self.edges, dtype=np.float64)
        self.masses = np.asarray(self.masses, dtype=np.float64)
        if len(self.edges) != len(self.masses) + 1:
            raise DataError("histogram needs len(edges) == len(masses) + 1")
        if (self.masses < 0).any():
            raise DataError("negative histogram mass")
        if abs(self.masses.sum() - 1.0) > MASS_TOL:
            raise DataError(f"histogram masses sum to {self.masses.sum()!r}, not 1")

    @classmethod
    def from_values(cls, values, binning=Binning(), edges=None):
        values = np.asarray(values, dtype=np.float64).ravel()
        if values.size == 0:
            raise DataError("cannot histogram an empty sample")
        if edges is None:
            edges = binning.edges(values)
        counts = np.bincount(discretize(values, edges), minlength=len(edges) - 1)
        return cls(edges, counts / counts.sum())


def _entropy_masses(p):
    p = np.asarray(p, dtype=np.float64).ravel()
    p = p[p > 0]
    return float(-(p * np.log2(p)).sum())


def entropy(hist):
    """Shannon entropy in bits of a HistogramDistribution or mass vector."""
    if not isinstance(hist, HistogramDistribution):
        hist = HistogramDistribution(np.arange(len(hist) + 1), hist)
    return _entropy_masses(hist.masses)


# ---------------------------------------------------------------------------
# paired samples
# ---------------------------------------------------------------------------

def _codes(samples, binning):
    samples = np.asarray(samples)
    if binning is None:
        if samples.dtype.kind not in "iub":
            raise DataError("discrete samples must be integers; pass a binning for reals")
        return samples.astype(np.int64).ravel(), int(samples.max()) + 1 if samples.size else 1
    edges = binning.edges(samples)
    return discretize(samples.ravel(), edges), binning.bins


def joint_table(a_samples, b_samples, binning=None, weights=None):
    """Joint probability table of two paired samples."""
    a_samples, b_samples = np.asarray(a_samples), np.asarray(b_samples)
    if a_samples.shape[0] != b_samples.shape[0]:
        raise DataError(f"sample counts differ: {a_samples.shape[0]} vs {b_samples.shape[0]}")
    a, na = _codes(a_samples, binning)
    b, nb = _codes(b_samples, binning)
    if a.size != b.size:
        raise DataError("paired samples must be one value per sample")
    w = None if weights is None else np.asarray(weights, dtype=np.float64)
    table = np.bincount(a * nb + b, weights=w, minlength=na * nb).reshape(na, nb)
    return table / table.sum()


def table_entropies(p):
    """(H(a), H(b), H(a,b), I(a;b)) from a joint table; I from its definition."""
    p = np.asarray(p, dtype=np.float64)
    pa, pb = p.sum(axis=1), p.sum(axis=0)
    nz = p > 0
    mi = float((p[nz] * np.log2(p[nz] / np.outer(pa, pb)[nz])).sum())
    return _entropy_masses(pa), _entropy_masses(pb), _entropy_masses(p), mi


def joint_entropy(a_samples, b_samples, binning=None, weights=None):
    return table_entropies(joint_table(a_samples, b_samples, binning, weights))[2]


def mutual_information(a_samples, b_samples, binning=None, weights=None):
    return table_entropies(joint_table(a_samples, b_samples, binning, weights))[3]


def kl_divergence(p, q, smoothing=KL_EPS):
    """KL(p || q) in bits; q gets additive smoothing then renormalization."""
    if not np.array_equal(p.edges, q.edges):
        raise DataError("KL needs histograms over identical bin edges")
    qs = q.masses + smoothing
    qs = qs / qs.sum()
    nz = p.masses > 0
    return float((p.masses[nz] * np.log2(p.masses[nz] / qs[nz])).sum())


# ---------------------------------------------------------------------------
# multi-dimensional discrete variables
# ---------------------------------------------------------------------------

@dataclass
class DiscreteSampleSet:
    samples: np.ndarray
    alphabet: tuple = ()
    weights: np.ndarray | None = None

    def __post_init__(self):
        s = np.asarray(self.samples)
        if s.ndim == 1:
            s = s[:, None]
        if s.ndim != 2 or s.shape[0] < 1:
            raise DataError("need an (N >= 1, D) array of symbols")
        if s.dtype.kind not in "iub":
            raise DataError("symbols must be integers")
        s = s.astype(np.int64)
        if (s < 0).any():
            raise DataError("symbols must be non-negative")
        self.samples = s
        if not self.alphabet:
            self.alphabet = tuple(int(v) + 1 for v in s.max(axis=0))
        self.alphabet = tuple(int(a) for a in self.alphabet)
        if len(self.alphabet) != s.shape[1] or (s >= np.array(self.alphabet)).any():
            raise DataError("symbol outside its alphabet")
        if self.weights is not None:
            w = np.asarray(self.weights, dtype=np.float64)
            if w.shape != (s.shape[0],) or (w < 0).any() or w.sum() <= 0:
                raise DataError("weights must be non-negative, one per sample")
            self.weights = w / w.sum()

    @property
    def dims(self):
        return self.samples.shape[1]

    def entropy(self, cols=None):
        """Plug-in entropy of the projection onto ``cols`` (all dims by default)."""
        cols = list(range(self.dims)) if cols is None else list(cols)
        if not cols:
            return 0.0
        sub = self.samples[:, cols]
        radix = [self.alphabet[c] for c in cols]
        if math.prod(radix) < 2 ** 62:
            key = np.zeros(len(sub), dtype=np.int64)
            for j, r in enumerate(radix):
                key = key * r + sub[:, j]
            _, inv = np.unique(key, return_inverse=True)
        else:
            _, inv = np.unique(sub, axis=0, return_inverse=True)
        counts = np.bincount(inv.ravel(), weights=self.weights)
        return _entropy_masses(counts / counts.sum())


def han_curve(x: DiscreteSampleSet, exhaustive=True, max_subsets=64, seed=0, max_dims=12):
    """[(k, H̄^k / k)] where H̄^k averages H(X_T) over size-k subsets T.

    Exhaustive mode enumerates every subset and needs D <= ``max_dims``;
    sampling mode averages at most ``max_subsets`` random subsets per k.
    """
    d = x.dims
    if exhaustive and d > max_dims:
        raise UsageError(f"{d} dimensions is too many for exhaustive mode (max {max_dims})")
    rng = np.random.default_rng(seed)
    curve = []
    for k in range(1, d + 1):
        if exhaustive or math.comb(d, k) <= max_subsets:
            subsets = itertools.combinations(range(d), k)
        else:
            subsets = (sorted(rng.choice(d, k, replace=False)) for _ in range(max_subsets))
        values = [x.entropy(t) for t in subsets]
        curve.append((k, float(np.mean(values)) / k))
    return curve


def jensen_bound_check(a_samples, b_samples, fusion_fn, binning=None, weights=None):
    """Entropy of F(a, b) against H(a, b); the bound holds for deterministic F."""
    a, b = np.asarray(a_samples), np.asarray(b_samples)
    if a.shape[0] != b.shape[0]:
        raise DataError("sample counts differ")
    if binning is not None:
        a = discretize(a, binning.edges(a)).reshape(a.shape)
        b = discretize(b, binning.edges(b)).reshape(b.shape)
    a2 = a.reshape(len(a), -1)
    b2 = b.reshape(len(b), -1)
    pairs = np.hstack([a2, b2]).astype(np.int64)
    h_joint = DiscreteSampleSet(pairs, weights=weights).entropy()
    symbols = {}
    fused = np.array([symbols.setdefault(_hashable(fusion_fn(ra, rb)), len(symbols))
                      for ra, rb in zip(a, b)], dtype=np.int64)
    h_fused = DiscreteSampleSet(fused, weights=weights).entropy()
    return h_fused, h_joint, h_fused <= h_joint + 1e-9


def _hashable(value):
    if isinstance(value, np.ndarray):
        return tuple(value.ravel().tolist())
    if isinstance(value, (list, tuple)):
        return tuple(_hashable(v) for v in value)
    if isinstance(value, np.generic):
        return value.item()
    return value


# ---------------------------------------------------------------------------
# regimes of the per-dimension entropy comparison
# ---------------------------------------------------------------------------

@dataclass
class RegimeResult:
    regime: str
    a: int
    b: int
    n: int
    n_star: int
    optimal_per_dim: float   # H(f^{n*}) / n*
    fused_per_dim: float     # H(f^n) / n
    case: str                # "above" (fused > optimal), "equal" (within tolerance), "below"


def _fuse_to_width(basis, n):
    n_star = basis.shape[1]
    if n == n_star:
        return basis.copy()
    if n < n_star:
        m = n_star - n
        if m > n:
            raise ConfigError(f"cannot merge {n_star} columns into {n}")
        fused = basis[:, :n].copy()
        fused[:, :m] += basis[:, n:]
        return fused
    extra = [basis[:, j % n_star] for j in range(n - n_star)]
    return np.hstack([basis, np.stack(extra, axis=1)])


def fusion_regime_sim(regime, a=4, b=4, n=None, seed=0, samples=4000, alphabet=2,
                      shared=None, copy_prob=1.0, tolerance=0.05):
    """Compare H̄^{n*}/n* of the lossless fusion with H̄^n/n of a width-n fusion.

    ``independent``: f^b independent of f^a, so n* = a + b.
    ``dependent``: f^b copies dimensions of f^a, so n* = max(a, b).
    ``correlated``: the first ``shared`` dims of f^b copy f^a (each with
    probability ``copy_prob``), the rest are independent; n* = a + b - shared.
    The width-n fusion sums surplus columns pairwise when n < n* and repeats
    columns when n > n*.
    """
    rng = np.random.default_rng(seed)
    if b > a and regime == "dependent":
        a, b = b, a
    fa = rng.integers(0, alphabet, (samples, a))
    if regime == "independent":
        fb = rng.integers(0, alphabet, (samples, b))
        basis = np.hstack([fa, fb])
    elif regime == "dependent":
        basis = fa
    elif regime == "correlated":
        shared = b // 2 if shared is None else shared
        if not 0 <= shared <= min(a, b):
            raise ConfigError(f"shared={shared} outside [0, min(a, b)]")
        fb = rng.integers(0, alphabet, (samples, b))
        copy = rng.random((samples, shared)) < copy_prob
        fb[:, :shared] = np.where(copy, fa[:, :shared], fb[:, :shared])
        basis = np.hstack([fa, fb[:, shared:]])
    else:
        raise UsageError(f"unknown regime {regime!r}")
    n_star = basis.shape[1]
    n = n_star if n is None else int(n)
    fused = _fuse_to_width(basis, n)
    opt = DiscreteSampleSet(basis).entropy() / n_star
    got = DiscreteSampleSet(fused).entropy() / n
    if abs(got - opt) <= tolerance * opt:
        case = "equal"
    elif opt < got:
        case = "above"
    else:
        case = "below"
    return RegimeResult(regime, a, b, n, n_star, opt, got, case)


# ---------------------------------------------------------------------------
# network-feature diagnostics
# ---------------------------------------------------------------------------

def _array(x):
    return np.asarray(getattr(x, "data", x), dtype=np.float64)


def layer_values(feature, pooling="all"):
    """Scalars pooled into one 1-D sample: every activation, or per-channel means."""
    arr = _array(feature)
    if pooling == "all":
        return arr.ravel()
    if pooling == "channel":
        return arr.mean(axis=(2, 3)).ravel()
    raise UsageError(f"unknown pooling {pooling!r}")


def _location_map(feature, grid):
    """Channel-mean map average-pooled (or nearest-upsampled) onto ``grid``."""
    arr = _array(feature).mean(axis=1)
    b, h, w = arr.shape
    gh, gw = grid
    if h >= gh:
        f = h // gh
        arr = arr.reshape(b, gh, f, gw, w // gw).mean(axis=(2, 4))
    else:
        f = gh // h
        arr = np.repeat(np.repeat(arr, f, axis=1), f, axis=2)
    return arr.ravel()


def paired_locations(fa, fb):
    """One (a, b) sample per batch item and location of the coarser grid."""
    ha, hb = _array(fa).shape[2:], _array(fb).shape[2:]
    grid = ha if ha[0] <= hb[0] else hb
    return _location_map(fa, grid), _location_map(fb, grid)


def layer_kl(fa, fb, binning=Binning(), pooling="all"):
    va, vb = layer_values(fa, pooling), layer_values(fb, pooling)
    both = np.concatenate([va, vb])
    edges = binning.edges(both)
    return kl_divergence(HistogramDistribution.from_values(va, edges=edges),
                         HistogramDistribution.from_values(vb, edges=edges))


def _require_stages(trace):
    """Stage names present; CNN 1-4 and ViT 1-3 are required, ViT 4 is optional
    (a stagger model without GAB never computes it)."""
    if not trace:
        raise UsageError("empty trace")
    missing = [k for k in (*(f"cnn{i}" for i in range(1, 5)), *(f"vit{i}" for i in range(1, 4)))
               if k not in trace]
    if missing:
        raise UsageError(f"trace lacks stage features {missing}")
    cnn = [f"cnn{i}" for i in range(1, 5)]
    return cnn, [f"vit{j}" for j in range(1, 5) if f"vit{j}" in trace]


def select_stagger_pairs(trace, binning=Binning(), pooling="all", cnn_stages=(3, 4)):
    """For each CNN stage i, the ViT stage j < i with minimal KL(P_cnn || P_vit).

    Ties go to the lowest ViT index.
    """
    _require_stages(trace)
    pairs = []
    for i in cnn_stages:
        scores = [(layer_kl(trace[f"cnn{i}"], trace[f"vit{j}"], binning, pooling), j)
                  for j in range(1, i)]
        best = min(s for s, _ in scores)
        j = min(j for s, j in scores if s == best)
        pairs.append(FusionPair(i, j))
    return pairs


def export_histograms(trace, binning=Binning(), path=None, pooling="all"):
    """CSV rows (layer, bin_lo, bin_hi, mass) per traced layer."""
    if not trace:
        raise UsageError("empty trace")
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["layer", "bin_lo", "bin_hi", "mass"])
    for name in sorted(trace):
        hist = HistogramDistribution.from_values(layer_values(trace[name], pooling), binning)
        for lo, hi, m in zip(hist.edges[:-1], hist.edges[1:], hist.masses):
            w.writerow([name, f"{lo:.9g}", f"{hi:.9g}", f"{m:.9g}"])
    text = buf.getvalue()
    if path is not None:
        Path(path).write_text(text)
    return text


@dataclass
class PairRow:
    pair: str
    h_a: float
    h_b: float
    h_joint: float
    mi: float
    kl: float
    bins: int


@dataclass
class DiagnosticsReport:
    rows: list
    selected: list
    han: list
    bins: int
    fusion_mode: str = "stagger"
    meta: dict = field(default_factory=dict)

    HEADER = ("pair", "H_a", "H_b", "H_joint", "MI", "KL", "bins")

    def identity_residuals(self):
        return [abs(r.h_a + r.h_b - r.mi - r.h_joint) for r in self.rows]

    def check(self, tol=1e-9):
        if max(self.identity_residuals(), default=0.0) > tol:
            raise DataError("joint-entropy decomposition violated")
        vals = [v for _, v in self.han]
        if any(b > a + tol for a, b in zip(vals, vals[1:])):
            raise DataError("per-dimension average entropy increased with k")
        if any(not p.cnn_stage > p.vit_stage for p in self.selected):
            raise DataError("selected pair violates the stagger constraint")

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.HEADER)
        for r in self.rows:
            w.writerow([r.pair] + [repr(float(v)) for v in (r.h_a, r.h_b, r.h_joint, r.mi, r.kl)]
                       + [r.bins])
        return buf.getvalue()

    def han_csv(self):
        return "k,per_dim_entropy\n" + "".join(f"{k},{v!r}\n" for k, v in self.han)

    def pairs_csv(self):
        return "cnn_stage,vit_stage\n" + "".join(
            f"{p.cnn_stage},{p.vit_stage}\n" for p in self.selected)

    def write(self, out_dir):
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "diagnostics.csv").write_text(self.to_csv())
        (out / "han_curve.csv").write_text(self.han_csv())
        (out / "selected_pairs.csv").write_text(self.pairs_csv())


def read_report_csv(text):
    rows = list(csv.reader(io.StringIO(text)))
    if not rows or tuple(rows[0]) != DiagnosticsReport.HEADER:
        raise DataError("not a diagnostics CSV")
    return [PairRow(r[0], *map(float, r[1:6]), int(r[6])) for r in rows[1:]]


def diagnose_trace(trace, binning=Binning(), han_bins=4, pooling="all", fusion_mode="stagger"):
    """Entropy/MI/KL for every CNN x ViT stage pair, selected pairs, Han curve."""
    cnn_names, vit_names = _require_stages(trace)
    rows = []
    for a in cnn_names:
        for b in vit_names:
            fa, fb = trace[a], trace[b]
            sa, sb = paired_locations(fa, fb)
            h_a, h_b, h_ab, mi = table_entropies(joint_table(sa, sb, binning))
            rows.append(PairRow(f"{a}-{b}", h_a, h_b, h_ab, mi,
                                layer_kl(fa, fb, binning, pooling), binning.bins))
    grid = _array(trace["cnn3"]).shape[2:]
    dims = []
    for name in cnn_names + vit_names:
        v = _location_map(trace[name], grid)
        dims.append(discretize(v, Binning(han_bins).edges(v)))
    han = han_curve(DiscreteSampleSet(np.stack(dims, axis=1), alphabet=(han_bins,) * len(dims)))
    report = DiagnosticsReport(rows, select_stagger_pairs(trace, binning, pooling), han,
                               binning.bins, fusion_mode)
    return report
