"""Expected improvement and candidate search, minimization convention."""
import math

import numpy as np
from scipy.stats import norm, qmc

import config
from hpo.gp import GPSurrogate

LOCAL_STEP = 0.05
LOCAL_MIN_STEP = 1e-3
LOCAL_MAX_MOVES = 200


def expected_improvement(mean, variance, best: float) -> np.ndarray:
    """
    EI = (best - mu) * Phi(u) + sigma * phi(u), u = (best - mu) / sigma.

    Where sigma == 0 the improvement is deterministic: max(best - mu, 0).
    """
    mean = np.asarray(mean, dtype=float)
    sigma = np.sqrt(np.maximum(np.asarray(variance, dtype=float), 0.0))
    gain = best - mean
    safe = np.where(sigma > 0, sigma, 1.0)
    u = gain / safe
    ei = gain * norm.cdf(u) + sigma * norm.pdf(u)
    return np.where(sigma > 0, np.maximum(ei, 0.0), np.maximum(gain, 0.0))


def sobol_points(dims: int, count: int, rng: np.random.Generator, skip: int = 0) -> np.ndarray:
    """count scrambled Sobol points starting at index skip."""
    engine = qmc.Sobol(dims, scramble=True, seed=rng)
    m = max(1, math.ceil(math.log2(skip + count)))
    return engine.random_base2(m)[skip:skip + count]


def _acquisition(surrogate: GPSurrogate, U: np.ndarray, best: float) -> np.ndarray:
    mean, variance = surrogate.predict(U)
    return expected_improvement(mean, variance, best)


def _local_search(surrogate: GPSurrogate, start: np.ndarray, best: float) -> tuple:
    """Coordinate search: try +-step along every axis, take the best move, halve the step when stuck."""
    x = start.copy()
    value = _acquisition(surrogate, x, best)[0]
    step, moves = LOCAL_STEP, 0
    eye = np.eye(len(x))
    while step >= LOCAL_MIN_STEP and moves < LOCAL_MAX_MOVES:
        neighbours = np.clip(np.vstack([x + step * eye, x - step * eye]), 0.0, 1.0)
        scores = _acquisition(surrogate, neighbours, best)
        top = int(np.argmax(scores))
        if scores[top] > value:
            x, value = neighbours[top], scores[top]
            moves += 1
        else:
            step /= 2
    return x, value


def suggest_next(surrogate: GPSurrogate, space, rng: np.random.Generator, best: float = None,
                 n_observed: int = 0, n_candidates: int = config.HPO_CANDIDATES,
                 top_k: int = config.HPO_TOP_K) -> tuple:
    """
    Next point to evaluate, as (point in original space, unit coordinates).

    Without a surrogate the next point of a scrambled Sobol sequence is
    returned (n_observed selects it). Otherwise EI is maximized over
    quasi-random candidates and the top_k are refined by coordinate search.
    """
    dims = len(space)
    if surrogate is None:
        unit = sobol_points(dims, 1, rng, skip=n_observed)[0]
        return space.untransform_point(unit), unit

    if best is None:
        best = float(surrogate.y.min())
    candidates = sobol_points(dims, n_candidates, rng)
    candidates = np.vstack([candidates, surrogate.X])
    scores = _acquisition(surrogate, candidates, best)

    if np.max(scores) <= 0:
        # nothing is expected to improve; explore where the model is least certain
        _, variance = surrogate.predict(candidates)
        unit = candidates[int(np.argmax(variance))]
        return space.untransform_point(unit), unit

    starts = candidates[np.argsort(-scores, kind="stable")[:top_k]]
    refined = [_local_search(surrogate, start, best) for start in starts]
    unit, _ = max(refined, key=lambda pair: pair[1])
    return space.untransform_point(unit), unit
