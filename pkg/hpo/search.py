"""
Bayesian optimization loop: suggest -> train -> observe -> persist.

The objective is called as objective(point, seed) and returns a validation
error to minimize. Every proposal depends only on the committed ledger plus
the points still in flight (treated as observed at their posterior mean),
so a resumed search continues exactly where an uninterrupted one would.
"""
import logging
import math
import time
from concurrent.futures import FIRST_COMPLETED, ThreadPoolExecutor, wait

import numpy as np
from tqdm import tqdm

import config
from engine.rng import derive_seed, derive_stream
from hpo.acquisition import suggest_next
from hpo.gp import gp_fit
from hpo.ledger import FAILED, OK, Ledger
from hpo.space import Space

logger = logging.getLogger(__name__)


def propose(ledger: Ledger, pending: list, n_init: int = config.HPO_INITIAL_DESIGN, noise: bool = False) -> tuple:
    """(point, unit point) for trial number len(ledger) + len(pending)."""
    index = len(ledger) + len(pending)
    X, y = ledger.observations()
    if index < n_init or len(y) < 2:
        return suggest_next(None, ledger.space, derive_stream(ledger.seed, "initial-design"), n_observed=index)
    surrogate = gp_fit(X, y, seed=derive_seed(ledger.seed, "gp", index), noise=noise)
    if pending:
        surrogate = surrogate.with_fantasies(np.array([unit for _, unit in pending]))
    return suggest_next(surrogate, ledger.space, derive_stream(ledger.seed, "suggest", index), best=float(y.min()))


def _evaluate(objective, point: dict, seed: int) -> tuple:
    started = time.perf_counter()
    try:
        value = float(objective(point, seed))
        if not math.isfinite(value):
            raise FloatingPointError(f"objective returned {value}")
        status = OK
    except Exception as e:
        logger.error("Trial failed (%s): %s", type(e).__name__, e)
        value, status = None, FAILED
    return value, status, time.perf_counter() - started


def run_search(objective, space: Space, n_trials: int, ledger_path, seed: int = 0, parallelism: int = 1,
               n_init: int = config.HPO_INITIAL_DESIGN, noise: bool = False, progress: bool = True) -> dict:
    """Run (or resume) a search until the ledger holds n_trials; return the best trial."""
    ledger = Ledger.open(ledger_path, space, seed)
    if len(ledger) >= n_trials:
        logger.info("%s already holds %d trials; nothing to run", ledger.path, len(ledger))
        return ledger.best()

    bar = tqdm(total=n_trials, initial=len(ledger), disable=not progress, desc=space.name)
    with ThreadPoolExecutor(max_workers=max(1, parallelism)) as pool:
        in_flight = {}
        while len(ledger) < n_trials or in_flight:
            while len(in_flight) < parallelism and len(ledger) + len(in_flight) < n_trials:
                pending = list(in_flight.values())
                point, unit = propose(ledger, [(p, u) for p, u, _ in pending], n_init, noise)
                trial_seed = derive_seed(ledger.seed, "trial", len(ledger) + len(pending))
                future = pool.submit(_evaluate, objective, point, trial_seed)
                in_flight[future] = (point, unit, trial_seed)
            done, _ = wait(in_flight, return_when=FIRST_COMPLETED)
            # commit in submission order when several finish together
            for future in [f for f in in_flight if f in done]:
                point, unit, trial_seed = in_flight.pop(future)
                value, status, seconds = future.result()
                trial = ledger.record(point, unit, value, status, seconds, trial_seed)
                logger.info("Trial %d: %s %s", trial["index"], status,
                            "-" if trial["value"] is None else f"{trial['value']:.5f}")
                bar.update(1)
    bar.close()
    best = ledger.best()
    if best:
        logger.info("Best of %d trials: %.5f (trial %d)", len(ledger), best["value"], best["index"])
    return best


def random_search(objective, space: Space, n_trials: int, seed: int = 0) -> list:
    """Uniform random baseline; returns the observed values in order."""
    rng = derive_stream(seed, "random-search")
    values = []
    for index in range(n_trials):
        unit = rng.random(len(space))
        value, status, _ = _evaluate(objective, space.untransform_point(unit), derive_seed(seed, "trial", index))
        values.append(value if status == OK else math.inf)
    return values
