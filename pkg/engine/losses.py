"""Training losses. Each returns (scalar loss, gradient w.r.t. the logits)."""
import numpy as np

from engine.errors import ShapeError


def softmax_xent(logits: np.ndarray, labels: np.ndarray) -> tuple:
    """Mean negative log-likelihood of the labels under softmax(logits)."""
    if logits.ndim != 2:
        raise ShapeError(f"softmax_xent: logits must be (batch, classes), got {logits.shape}")
    labels = np.asarray(labels)
    if labels.shape != (logits.shape[0],):
        raise ShapeError(f"softmax_xent: {labels.shape[0] if labels.ndim else 0} labels for {logits.shape[0]} rows")
    n_classes = logits.shape[1]
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise ValueError(f"softmax_xent: labels must lie in [0, {n_classes})")
    batch = logits.shape[0]
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_probs = shifted - log_norm
    rows = np.arange(batch)
    loss = -float(log_probs[rows, labels].astype(np.float64).mean())
    grad = np.exp(log_probs)
    grad[rows, labels] -= 1
    return loss, (grad / batch).astype(logits.dtype)


def l2_logit_loss(pred_logits: np.ndarray, target_logits: np.ndarray) -> tuple:
    """(1/T) * sum_t ||g_t - z_t||^2, the logit regression objective."""
    if pred_logits.shape != target_logits.shape:
        raise ShapeError(f"l2_logit_loss: prediction {pred_logits.shape} vs target {target_logits.shape}")
    batch = pred_logits.shape[0]
    diff = pred_logits - target_logits.astype(pred_logits.dtype)
    loss = float(np.sum(diff.astype(np.float64) ** 2) / batch)
    return loss, (2.0 / batch) * diff


LOSSES = {"softmax_xent": softmax_xent, "l2_logit_loss": l2_logit_loss}
