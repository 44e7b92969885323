"""Exact sampling of d-dimensional fBm on a uniform grid.

The grid covers [0, T] with n cells and is extended to the right by the
largest mollification radius, so every path value needed by the regularized
integral sits on a grid node.  Each (path, coordinate) pair owns its own
counter-based Philox stream keyed by (seed, path index, coordinate), which
makes any slice of an ensemble reproducible on its own.
"""
import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .kernel import DomainError, eval_R

CHOLESKY = "CHOLESKY"
CIRCULANT = "CIRCULANT"
MAGIC = b"FBMISO-ENSEMBLE 1\n"


class FactorizationFailure(RuntimeError):
    pass


class EmbeddingFailure(RuntimeError):
    pass


@dataclass(frozen=True)
class GridSpec:
    """n cells of width dt = T/n on [0, T], plus eps_max/dt extension cells."""

    T: float
    n: int
    eps_max: float = 0.0

    def __post_init__(self):
        if self.n < 2**8 or self.n & (self.n - 1):
            raise DomainError(f"cells on [0, T] must be a power of two >= 256, got {self.n}")
        if self.eps_max < 0:
            raise DomainError("eps_max must be nonnegative")
        ext = self.eps_max / self.dt
        if abs(ext - round(ext)) > 1e-9 * max(1.0, ext):
            raise DomainError("eps_max must be an integer multiple of dt")

    @property
    def dt(self):
        return self.T / self.n

    @property
    def ext_cells(self):
        return int(round(self.eps_max / self.dt))

    @property
    def n_steps(self):
        return self.n + self.ext_cells

    @property
    def horizon(self):
        return self.n_steps * self.dt

    @property
    def times(self):
        return np.arange(self.n_steps + 1) * self.dt

    def cells(self, radius):
        """Radius as an integer number of cells; no interpolation is allowed."""
        k = radius / self.dt
        if radius <= 0 or abs(k - round(k)) > 1e-9 * max(1.0, k):
            raise DomainError(f"radius {radius} is not a positive multiple of dt = {self.dt}")
        return int(round(k))

    def index(self, t):
        k = t / self.dt
        if abs(k - round(k)) > 1e-9 * max(1.0, k) or not 0 <= round(k) <= self.n_steps:
            raise DomainError(f"time {t} is not a grid node")
        return int(round(k))


@dataclass
class PathEnsemble:
    params: object
    grid: GridSpec
    data: np.ndarray
    seed: int
    method: str
    first_path: int = 0

    @property
    def M(self):
        return self.data.shape[0]

    @property
    def d(self):
        return self.data.shape[1]

    def at(self, t):
        return self.data[:, :, self.grid.index(t)]


def _stream(seed, path, coord):
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=(int(path), int(coord)))
    return np.random.Generator(np.random.Philox(ss))


def _normals(seed, first, M, d, size):
    z = np.empty((M, d, size))
    for m in range(M):
        for c in range(d):
            z[m, c] = _stream(seed, first + m, c).standard_normal(size)
    return z


def fgn_autocovariance(k, H, dt=1.0):
    k = np.abs(np.asarray(k, dtype=float))
    a = 2 * H
    return 0.5 * (np.abs(k + 1) ** a + np.abs(k - 1) ** a - 2 * k**a) * dt**a


def circulant_eigenvalues(N, H, dt):
    c = fgn_autocovariance(np.arange(N + 1), H, dt)
    row = np.concatenate([c, c[-2:0:-1]])
    lam = np.fft.fft(row).real
    if lam.min() < -1e-10:
        raise EmbeddingFailure(f"negative embedding eigenvalue {lam.min():.3e}")
    return np.maximum(lam, 0.0)


def sample_circulant(grid, p, M, seed, first_path=0, batch=256):
    """Davies-Harte sampling of fGn increments, cumulated from B_0 = 0."""
    N = grid.n_steps
    lam = circulant_eigenvalues(N, p.H, grid.dt)
    m = lam.size
    scale = np.sqrt(lam / m)
    d = p.d
    out = np.zeros((M, d, N + 1))
    for a in range(0, M, batch):
        b = min(M, a + batch)
        z = _normals(seed, first_path + a, b - a, d, 2 * m)
        xi = z[..., :m] + 1j * z[..., m:]
        incr = np.fft.fft(scale * xi, axis=-1).real[..., :N]
        np.cumsum(incr, axis=-1, out=out[a:b, :, 1:])
    return PathEnsemble(p, grid, out, int(seed), CIRCULANT, first_path)


def cholesky_factor(grid, p):
    t = grid.times[1:]
    C = eval_R(t[:, None], t[None, :], p)
    try:
        return np.linalg.cholesky(C)
    except np.linalg.LinAlgError:
        pass
    try:
        return np.linalg.cholesky(C + 1e-12 * np.diag(np.diag(C)))
    except np.linalg.LinAlgError as exc:
        raise FactorizationFailure("covariance matrix is not numerically positive definite") from exc


def sample_cholesky(grid, p, M, seed, first_path=0, factor=None):
    if grid.n_steps > 2**12 + 2**10:
        raise DomainError("dense factorization is limited to about 2^12 grid points")
    L = cholesky_factor(grid, p) if factor is None else factor
    N = grid.n_steps
    z = _normals(seed, first_path, M, p.d, N)
    out = np.zeros((M, p.d, N + 1))
    out[:, :, 1:] = z @ L.T
    return PathEnsemble(p, grid, out, int(seed), CHOLESKY, first_path)


def sample(method, grid, p, M, seed, first_path=0):
    if method == CIRCULANT:
        return sample_circulant(grid, p, M, seed, first_path)
    if method == CHOLESKY:
        return sample_cholesky(grid, p, M, seed, first_path)
    raise DomainError(f"unknown sampling method {method}")


@dataclass
class ProbeResult:
    s: float
    t: float
    coord: tuple
    estimate: float
    expected: float
    z: float


@dataclass
class ValidationReport:
    probes: list = field(default_factory=list)
    ks_pvalue: float = None

    @property
    def flagged(self):
        return [r for r in self.probes if abs(r.z) > 4]

    @property
    def passed(self):
        return not self.flagged

    @property
    def max_abs_z(self):
        return max(abs(r.z) for r in self.probes)


def _zscore(x, expected):
    se = x.std(ddof=1) / math.sqrt(x.size)
    return float(x.mean()), float((x.mean() - expected) / se) if se > 0 else 0.0


def validate_ensemble(e, probe_pairs, cross=True):
    """z-scores of sample covariances against R at grid-node probe pairs."""
    rep = ValidationReport()
    p = e.params
    for s, t in probe_pairs:
        bs, bt = e.at(s), e.at(t)
        expected = float(eval_R(s, t, p))
        for c in range(e.d):
            est, z = _zscore(bs[:, c] * bt[:, c], expected)
            rep.probes.append(ProbeResult(s, t, (c, c), est, expected, z))
        if cross and e.d > 1:
            for c in range(e.d - 1):
                est, z = _zscore(bs[:, c] * bt[:, c + 1], 0.0)
                rep.probes.append(ProbeResult(s, t, (c, c + 1), est, 0.0, z))
    return rep


def ks_terminal(e1, e2, t=None):
    """Two-sample KS p-value for the first coordinate at time t (default T)."""
    t = e1.params.T if t is None else t
    return float(stats.ks_2samp(e1.at(t)[:, 0], e2.at(t)[:, 0]).pvalue)


def dump_ensemble(e, path):
    header = (f"H={e.params.H!r};T={e.params.T!r};T_ext={e.grid.horizon!r};d={e.d};"
              f"n={e.grid.n};n_steps={e.grid.n_steps};M={e.M};seed={e.seed};"
              f"first_path={e.first_path};method={e.method}\n")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(header.encode())
        fh.write(np.ascontiguousarray(e.data, dtype="<f8").tobytes())


def load_ensemble(path):
    from .kernel import ModelParams

    with open(path, "rb") as fh:
        if fh.readline() != MAGIC:
            raise ValueError("not an ensemble dump")
        tags = dict(kv.split("=", 1) for kv in fh.readline().decode().strip().split(";"))
        raw = fh.read()
    T, M, d = float(tags["T"]), int(tags["M"]), int(tags["d"])
    n, n_steps = int(tags["n"]), int(tags["n_steps"])
    grid = GridSpec(T, n, (n_steps - n) * T / n)
    p = ModelParams(float(tags["H"]), T, d)
    data = np.frombuffer(raw, dtype="<f8").reshape(M, d, n_steps + 1).copy()
    return PathEnsemble(p, grid, data, int(tags["seed"]), tags["method"], int(tags["first_path"]))


def export_paths_csv(e, path, paths=(0,)):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t"] + [f"path{m}_x{c}" for m in paths for c in range(e.d)])
        for k, t in enumerate(e.grid.times):
            w.writerow([repr(float(t))] + [repr(float(e.data[m, c, k])) for m in paths for c in range(e.d)])
