"""Benchmark objectives on the unit hypercube with optional evaluation noise.

Every problem evaluates batched unit-cube inputs through an affine map
to its native domain and returns an (n, p) array. Noisy variants draw
Gaussian noise from counter-based streams keyed on (design, replicate
index, seed), so replicated or parallel evaluation is reproducible in
any order.
"""

import hashlib
from dataclasses import dataclass, replace
from typing import Callable, Optional

import numpy as np


@dataclass
class Problem:
    name: str
    dim: int
    n_obj: int
    lower: np.ndarray
    upper: np.ndarray
    evaluate: Callable            # unit-cube (n, d) -> (n, p) noiseless truth
    noise_sd: Optional[Callable] = None   # unit-cube (n, d) -> (n, p) stds
    known_optimum: Optional[float] = None

    def to_native(self, x):
        return self.lower + np.atleast_2d(x) * (self.upper - self.lower)

    @property
    def noisy(self):
        return self.noise_sd is not None


def _branin_native(x1, x2):
    b = 5.1 / (4 * np.pi**2)
    c = 5 / np.pi
    t = 1 / (8 * np.pi)
    return (x2 - b * x1**2 + c * x1 - 6) ** 2 + 10 * (1 - t) * np.cos(x1) + 10


def make_branin():
    lower = np.array([-5.0, 0.0])
    upper = np.array([10.0, 15.0])

    def evaluate(x):
        z = lower + np.atleast_2d(x) * (upper - lower)
        return _branin_native(z[:, 0], z[:, 1])[:, None]

    return Problem("branin", 2, 1, lower, upper, evaluate,
                   known_optimum=0.397887)


_HARTMANN_ALPHA = np.array([1.0, 1.2, 3.0, 3.2])

_H3_A = np.array([[3.0, 10, 30], [0.1, 10, 35], [3.0, 10, 30], [0.1, 10, 35]])
_H3_P = 1e-4 * np.array([[3689, 1170, 2673], [4699, 4387, 7470],
                         [1091, 8732, 5547], [381, 5743, 8828]])

_H6_A = np.array([[10, 3, 17, 3.5, 1.7, 8], [0.05, 10, 17, 0.1, 8, 14],
                  [3, 3.5, 1.7, 10, 17, 8], [17, 8, 0.05, 10, 0.1, 14]])
_H6_P = 1e-4 * np.array([[1312, 1696, 5569, 124, 8283, 5886],
                         [2329, 4135, 8307, 3736, 1004, 9991],
                         [2348, 1451, 3522, 2883, 3047, 6650],
                         [4047, 8828, 8732, 5743, 1091, 381]])


def _make_hartmann(name, a, p, optimum):
    d = a.shape[1]
    lower, upper = np.zeros(d), np.ones(d)

    def evaluate(x):
        x = np.atleast_2d(x)
        inner = (a * (x[:, None, :] - p) ** 2).sum(axis=2)
        return -(np.exp(-inner) @ _HARTMANN_ALPHA)[:, None]

    return Problem(name, d, 1, lower, upper, evaluate, known_optimum=optimum)


def make_hartmann3():
    return _make_hartmann("hartmann3", _H3_A, _H3_P, -3.86278)


def make_hartmann6():
    return _make_hartmann("hartmann6", _H6_A, _H6_P, -3.32237)


def make_p1():
    """Bi-objective problem pairing rescaled Branin with a second valley."""
    lower, upper = np.zeros(2), np.ones(2)

    def evaluate(x):
        x = np.atleast_2d(x)
        b1 = 15 * x[:, 0] - 5
        b2 = 15 * x[:, 1]
        f1 = _branin_native(b1, b2)
        cos_term = (1 - 1 / (8 * np.pi)) * np.cos(b1) + 1
        f2 = (-np.sqrt((10.5 - b1) * (b1 + 5.5) * (b2 + 0.5))
              - (b2 - 5.1 * (b1 / (2 * np.pi)) ** 2 - 6) ** 2 / 30
              - cos_term / 3)
        return np.column_stack([f1, f2])

    return Problem("p1", 2, 2, lower, upper, evaluate)


def make_p2():
    """Bi-objective trigonometric problem on [-pi, pi]^2, minimized."""
    lower = np.array([-np.pi, -np.pi])
    upper = np.array([np.pi, np.pi])
    a1 = 0.5 * np.sin(1) - 2 * np.cos(1) + np.sin(2) - 1.5 * np.cos(2)
    a2 = 1.5 * np.sin(1) - np.cos(1) + 2 * np.sin(2) - 0.5 * np.cos(2)

    def evaluate(x):
        z = lower + np.atleast_2d(x) * (upper - lower)
        u, v = z[:, 0], z[:, 1]
        b1 = 0.5 * np.sin(u) - 2 * np.cos(u) + np.sin(v) - 1.5 * np.cos(v)
        b2 = 1.5 * np.sin(u) - np.cos(u) + 2 * np.sin(v) - 0.5 * np.cos(v)
        f1 = 1 + (a1 - b1) ** 2 + (a2 - b2) ** 2
        f2 = (u + 3) ** 2 + (v + 1) ** 2
        return np.column_stack([f1, f2])

    return Problem("p2", 2, 2, lower, upper, evaluate)


def repeat_problem(base, k):
    """Scale dimension by evaluating k independent copies and averaging.

    The mean combiner keeps the output scale and the optimum value of
    the base problem; the minimizer is the blockwise repetition of the
    base minimizer.
    """
    if k < 1:
        raise ValueError("repetition count must be >= 1")
    if base.noise_sd is not None:
        raise ValueError("repeat the noiseless problem, then attach noise")
    if k == 1:
        return base
    d = base.dim

    def evaluate(x):
        x = np.atleast_2d(x)
        acc = sum(base.evaluate(x[:, j * d:(j + 1) * d]) for j in range(k))
        return acc / k

    return Problem(
        name=f"{base.name}-rep{k}", dim=k * d, n_obj=base.n_obj,
        lower=np.tile(base.lower, k), upper=np.tile(base.upper, k),
        evaluate=evaluate, known_optimum=base.known_optimum)


def with_noise(base, sd_source, scale=1.0):
    """Heteroskedastic variant: noise std |first objective of sd_source|.

    The source is block-repeated when the base dimension is a multiple
    of its own. The same std applies to every objective of the base.
    """
    if sd_source.dim != base.dim:
        if base.dim % sd_source.dim:
            raise ValueError("noise source dimension incompatible with problem")
        sd_source = repeat_problem(sd_source, base.dim // sd_source.dim)
    source_eval = sd_source.evaluate
    n_obj = base.n_obj

    def noise_sd(x):
        sd = np.abs(source_eval(np.atleast_2d(x))[:, :1]) * scale
        return np.repeat(sd, n_obj, axis=1)

    return replace(base, name=f"{base.name}-noisy", noise_sd=noise_sd)


def _noise_rng(x, rep_index, seed):
    """Counter-based stream: a design/replicate pair always sees the same draw."""
    h = hashlib.blake2b(
        np.ascontiguousarray(np.asarray(x, dtype=np.float64)).tobytes(),
        digest_size=8)
    h.update(int(rep_index).to_bytes(8, "little"))
    counter = int.from_bytes(h.digest(), "little")
    return np.random.default_rng(
        np.random.SeedSequence([int(seed) & (2**63 - 1), counter]))


def observe_one(problem, x, rep_index, seed):
    """One (possibly noisy) observation of a single design, shape (p,)."""
    x = np.asarray(x, dtype=float)
    truth = problem.evaluate(x[None, :])[0]
    if problem.noise_sd is None:
        return truth
    sd = problem.noise_sd(x[None, :])[0]
    return truth + sd * _noise_rng(x, rep_index, seed).standard_normal(len(sd))


def observe(problem, x, rep_indices, seed):
    """Batched observe_one preserving row order."""
    x = np.atleast_2d(x)
    return np.array([observe_one(problem, x[i], rep_indices[i], seed)
                     for i in range(len(x))])


_REGISTRY = {
    "branin": make_branin,
    "hartmann3": make_hartmann3,
    "hartmann6": make_hartmann6,
    "p1": make_p1,
    "p2": make_p2,
}


def get_problem(problem_id):
    """Resolve ids like "branin", "branin-rep6", "p1-rep3"."""
    name, _, rep = problem_id.partition("-rep")
    if name not in _REGISTRY:
        raise KeyError(f"unknown problem {problem_id!r}; "
                       f"known: {sorted(_REGISTRY)}")
    problem = _REGISTRY[name]()
    if rep:
        try:
            k = int(rep)
        except ValueError:
            raise ValueError(f"bad repetition suffix in {problem_id!r}")
        problem = repeat_problem(problem, k)
    return problem
