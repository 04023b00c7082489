"""Euler-Maruyama simulation of the particle systems on shared Brownian bundles.

Every simulator accepts states with a leading batch axis: a bundle of shape
``(R, N, K)`` runs ``R`` independent replications of an ``N``-particle
system at once, empirical means being taken over the particle axis only.
"""

from __future__ import annotations

import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field as dc_field

import numpy as np
from scipy.special import ndtri

from .errors import DimensionMismatch, Explosion, SpecError
from .model import quadratic, spec_to_dict

EXPLOSION = 1e9
_U53 = 2.0**-53


def seed_words(seed: int, *tags: int, count: int = 1) -> np.ndarray:
    """Derive ``count`` 64-bit seed words from ``(seed, *tags)``."""
    return np.random.SeedSequence([int(seed) & (2**64 - 1), *map(int, tags)]).generate_state(count, np.uint64)


def _path_normals(word: int, first: int, count: int, K: int) -> np.ndarray:
    out = np.empty((count, K))
    for j in range(count):
        # Philox is counter based: draw k on path i only depends on (word, i, k)
        raw = np.random.Philox(key=int(word) + ((first + j) << 64)).random_raw(K)
        out[j] = ndtri(((raw >> np.uint64(11)).astype(float) + 0.5) * _U53)
    return out


def standard_normals(words, N: int, K: int, threads: int = 1) -> np.ndarray:
    """Standard normals of shape ``(len(words), N, K)`` keyed by (word, path, step)."""
    words = np.atleast_1d(np.asarray(words, dtype=np.uint64))
    out = np.empty((words.size, N, K))
    jobs = [(r, lo, min(N, lo + 64)) for r in range(words.size) for lo in range(0, N, 64)]

    def run(job):
        r, lo, hi = job
        out[r, lo:hi] = _path_normals(words[r], lo, hi - lo, K)

    if threads <= 1:
        for job in jobs:
            run(job)
    else:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            list(ex.map(run, jobs))
    return out


@dataclass(frozen=True, eq=False)
class BrownianBundle:
    """Brownian increments ``(R, N, K)`` (or ``(N, K)``) on a uniform grid of [0, T]."""

    seed: int
    N: int
    K: int
    T: float
    increments: np.ndarray
    words: np.ndarray

    @classmethod
    def generate(cls, seed: int, N: int, K: int, T: float, reps: int | None = None, threads: int = 1):
        """Bundle for one system (``reps=None``) or ``reps`` replications.

        Replication ``r`` uses seed word derived from ``(seed, N, r)``, so
        bundles for different N are independent while staying reproducible.
        """
        if N < 1 or K < 1 or not T > 0:
            raise SpecError("bundle needs N >= 1, K >= 1, T > 0")
        if reps is None:
            words = np.array([int(seed) & (2**64 - 1)], dtype=np.uint64)
        else:
            words = np.concatenate([seed_words(seed, N, r) for r in range(reps)])
        inc = standard_normals(words, N, K, threads) * np.sqrt(T / K)
        if reps is None:
            inc = inc[0]
        return cls(int(seed), N, K, float(T), inc, words)

    @property
    def dt(self) -> float:
        return self.T / self.K

    @property
    def grid(self) -> np.ndarray:
        return np.linspace(0.0, self.T, self.K + 1)


@dataclass(frozen=True, eq=False)
class TrajectoryEnsemble:
    """Particle paths ``states[..., N, K+1]`` and applied controls (optional)."""

    grid: np.ndarray
    states: np.ndarray
    controls: np.ndarray | None = None
    provenance: dict = dc_field(default_factory=dict)

    @property
    def N(self) -> int:
        return self.states.shape[-2]

    def mean_var(self):
        """Per-node ensemble mean and variance over all paths."""
        flat = self.states.reshape(-1, self.states.shape[-1])
        return flat.mean(axis=0), flat.var(axis=0)

    def to_binary(self, path) -> None:
        """Little-endian float64 row-major ``paths x nodes`` plus a JSON sidecar."""
        flat = np.ascontiguousarray(self.states.reshape(-1, self.states.shape[-1]), dtype="<f8")
        with open(path, "wb") as fh:
            fh.write(flat.tobytes(order="C"))
        meta = dict(self.provenance)
        meta.update(shape=list(flat.shape), dtype="<f8", order="row-major paths x nodes",
                    grid=[float(t) for t in self.grid])
        with open(os.fspath(path) + ".json", "w") as fh:
            json.dump(meta, fh, sort_keys=True, indent=1)

    @staticmethod
    def read_binary(path) -> np.ndarray:
        with open(os.fspath(path) + ".json") as fh:
            meta = json.load(fh)
        return np.fromfile(path, dtype="<f8").reshape(meta["shape"])

    def to_csv(self, path) -> None:
        m, v = self.mean_var()
        with open(path, "w") as fh:
            fh.write("t,mean,var\n")
            for row in zip(self.grid, m, v):
                fh.write(",".join(repr(float(x)) for x in row) + "\n")


def _provenance(system, spec, bundle, **extra):
    out = {"system": system, "seed": bundle.seed, "N": bundle.N, "K": bundle.K}
    if spec is not None and hasattr(spec, "family"):
        out["spec"] = spec_to_dict(spec)
    out.update(extra)
    return out


def _run(x0, bundle, sigma, step):
    """Generic Euler-Maruyama loop; ``step(k, t, X)`` returns (drift, control)."""
    inc = bundle.increments
    K = inc.shape[-1]
    h = bundle.dt
    grid = bundle.grid
    X = np.empty(inc.shape[:-1] + (K + 1,))
    A = np.empty_like(X)
    X[..., 0] = x0
    for k in range(K):
        drift, ctrl = step(k, grid[k], X[..., k])
        A[..., k] = ctrl
        X[..., k + 1] = X[..., k] + h * drift + sigma * inc[..., k]
        if not np.all(np.abs(X[..., k + 1]) <= EXPLOSION):
            raise Explosion(f"state left [-{EXPLOSION:g}, {EXPLOSION:g}] at step {k + 1}")
    _, ctrl = step(K, grid[K], X[..., K])
    A[..., K] = ctrl
    return grid, X, A


def simulate_equilibrium(spec, nfield, bundle: BrownianBundle) -> TrajectoryEnsemble:
    """N-player system under the Nash feedback of ``nfield``."""
    if bundle.N != nfield.N:
        raise DimensionMismatch(f"bundle has N={bundle.N}, field has N={nfield.N}")
    q = quadratic(spec)
    A1, A2, A0 = nfield.feedback_coefficients(bundle.grid)

    def step(k, t, X):
        xbar = X.mean(axis=-1, keepdims=True)
        a = A1[k] * X + A2[k] * xbar + A0[k]
        return q.b(X, a, xbar, a.mean(axis=-1, keepdims=True)), a

    grid, X, A = _run(q.x0, bundle, q.sigma, step)
    return TrajectoryEnsemble(grid, X, A, _provenance("equilibrium", spec, bundle, field_N=nfield.N))


def simulate_auxiliary(spec, field, bundle: BrownianBundle) -> TrajectoryEnsemble:
    """Particles driven by the decoupled drift with empirical-mean interaction."""
    sys = field.system
    Bx, Bm, B0 = field.drift_coefficients(bundle.grid)
    kx, km, k0 = field.control_coefficients(bundle.grid)

    def step(k, t, X):
        xbar = X.mean(axis=-1, keepdims=True)
        return Bx[k] * X + Bm[k] * xbar + B0[k], kx[k] * X + km[k] * xbar + k0[k]

    grid, X, A = _run(sys.x0, bundle, sys.sigma, step)
    return TrajectoryEnsemble(grid, X, A, _provenance("auxiliary", spec, bundle))


def simulate_limit(spec, field, flow, bundle: BrownianBundle) -> TrajectoryEnsemble:
    """Independent copies of the McKean-Vlasov limit (law mean from ``flow``)."""
    sys = field.system
    Bx, Bm, B0 = field.drift_coefficients(bundle.grid)
    kx, km, k0 = field.control_coefficients(bundle.grid)
    m = flow.mean_at(bundle.grid)

    def step(k, t, X):
        return Bx[k] * X + Bm[k] * m[k] + B0[k], kx[k] * X + km[k] * m[k] + k0[k]

    grid, X, A = _run(sys.x0, bundle, sys.sigma, step)
    return TrajectoryEnsemble(grid, X, A, _provenance("limit", spec, bundle))


def simulate_controlled(spec, field, u, bundle: BrownianBundle) -> TrajectoryEnsemble:
    """McKean-Vlasov dynamics with extra drift ``sigma * u``.

    The law enters through the ensemble mean, so ``bundle.N`` plays the
    role of the internal Monte Carlo size.  ``u`` has shape ``(K,)`` (same
    for all paths) or ``(N, K)``.
    """
    sys = field.system
    u = np.asarray(u, dtype=float)
    if u.shape[-1] != bundle.K:
        raise DimensionMismatch(f"control has {u.shape[-1]} steps, bundle has {bundle.K}")
    Bx, Bm, B0 = field.drift_coefficients(bundle.grid)

    def step(k, t, X):
        xbar = X.mean(axis=-1, keepdims=True)
        uk = u[..., min(k, bundle.K - 1)]
        return Bx[k] * X + Bm[k] * xbar + B0[k] + sys.sigma * uk, np.broadcast_to(uk, X.shape)

    grid, X, A = _run(sys.x0, bundle, sys.sigma, step)
    return TrajectoryEnsemble(grid, X, A, _provenance("controlled", spec, bundle))


def chaos_experiment(spec, field, flow, Ns, reps: int, seed: int, K_sim: int = 200, threads: int = 1):
    """Mean ``W2^2(L^N(X_T), N(m_T, v_T))`` for the auxiliary system over ``Ns``.

    The Gaussian limit marginal comes from the mean and variance ODEs.
    Returns ``(Ns, mean W2^2, standard errors, fitted log-log slope)``.
    """
    from scipy.stats import linregress

    from .measure import w2_to_gaussian

    m_T, sd_T = float(flow.mX[-1]), float(np.sqrt(flow.varX[-1]))
    means, errs = [], []
    for N in Ns:
        bundle = BrownianBundle.generate(seed, N, K_sim, spec.T, reps=reps, threads=threads)
        XT = simulate_auxiliary(spec, field, bundle).states[..., -1]
        w = w2_to_gaussian(XT, m_T, sd_T) ** 2
        means.append(float(w.mean()))
        errs.append(float(w.std(ddof=1) / np.sqrt(reps)))
    slope = float(linregress(np.log(Ns), np.log(means)).slope)
    return np.asarray(Ns), np.asarray(means), np.asarray(errs), slope
