"""
Plateau learning-rate schedule.

The rate is halved when the validation error has not dropped for ten epochs,
never within eight epochs of a previous halving. Training stops after thirty
epochs without a drop, or when a halving is due although the rate has already
been reduced by more than a factor of 2000 in total.
"""
from dataclasses import dataclass, replace

import config

CONTINUE = "continue"
HALVE = "halve"
STOP = "stop"


@dataclass(frozen=True)
class LRScheduleState:
    current_lr: float
    best_val_err: float = float("inf")
    epochs_since_improvement: int = 0
    cooldown_remaining: int = 0
    cumulative_factor: int = 1

    @classmethod
    def start(cls, initial_lr: float) -> "LRScheduleState":
        if initial_lr <= 0:
            raise ValueError(f"initial learning rate must be positive, got {initial_lr}")
        return cls(current_lr=initial_lr)


@dataclass(frozen=True)
class LRSchedule:
    patience: int = config.PATIENCE_EPOCHS
    cooldown: int = config.COOLDOWN_EPOCHS
    stop_after: int = config.STOP_EPOCHS
    max_reduction: float = config.MAX_LR_REDUCTION

    def update(self, state: LRScheduleState, val_err: float) -> tuple:
        """Feed one epoch's validation error; return (action, new state)."""
        if val_err < 0:
            raise ValueError(f"validation error must be >= 0, got {val_err}")
        if val_err < state.best_val_err:
            # ties are not a drop
            since, best = 0, val_err
        else:
            since, best = state.epochs_since_improvement + 1, state.best_val_err
        state = replace(state, best_val_err=best, epochs_since_improvement=since)

        if since >= self.stop_after:
            return STOP, state
        if state.cooldown_remaining > 0:
            return CONTINUE, replace(state, cooldown_remaining=state.cooldown_remaining - 1)
        if since >= self.patience:
            if state.cumulative_factor > self.max_reduction:
                return STOP, state
            return HALVE, replace(state, current_lr=state.current_lr / 2, cooldown_remaining=self.cooldown,
                                  cumulative_factor=state.cumulative_factor * 2)
        return CONTINUE, state

    def replay(self, initial_lr: float, errors) -> list:
        """Action sequence for a whole error stream, stopping at the first STOP."""
        state = LRScheduleState.start(initial_lr)
        actions = []
        for err in errors:
            action, state = self.update(state, err)
            actions.append(action)
            if action == STOP:
                break
        return actions
