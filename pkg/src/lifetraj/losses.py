"""Training objectives: cross-entropy, supervised contrastive, pseudo-label and their mix."""
from __future__ import annotations

import torch

EPS = 1e-12


def _positive_prob(y_pred: torch.Tensor) -> torch.Tensor:
    return y_pred[:, 1] if y_pred.dim() == 2 else y_pred


def ce_loss(y_pred: torch.Tensor, y_true: torch.Tensor) -> torch.Tensor:
    """Binary cross-entropy averaged over the batch.

    ``y_pred`` is either the positive-class probability per sample or an
    (N, 2) probability matrix.
    """
    p = _positive_prob(y_pred).clamp(EPS, 1.0 - EPS)
    y = y_true.to(p.dtype)
    return -(y * p.log() + (1.0 - y) * (1.0 - p).log()).mean()


def scl_loss(h: torch.Tensor, labels: torch.Tensor, tau: float) -> torch.Tensor:
    """Supervised contrastive loss, summed over anchors.

    For each anchor, the log-softmax of its similarities (excluding itself)
    is averaged over the other samples sharing its label. Anchors that are
    alone in their class contribute zero.
    """
    n = h.shape[0]
    if n < 2:
        raise ValueError("contrastive loss needs at least two samples")
    sim = h @ h.T / tau
    self_mask = torch.eye(n, dtype=torch.bool, device=h.device)
    log_denom = sim.masked_fill(self_mask, float("-inf")).logsumexp(dim=1, keepdim=True)
    log_prob = sim - log_denom
    same = (labels.view(-1, 1) == labels.view(1, -1)) & ~self_mask
    n_pos = same.sum(dim=1)
    per_anchor = (log_prob * same).sum(dim=1) / n_pos.clamp(min=1)
    return -(per_anchor * (n_pos > 0)).sum()


def supervised_loss(ce, scl, lam: float):
    return (1.0 - lam) * ce + lam * scl


def alpha_schedule(b: int, t: int, B: int, c1: float, c2: float, gamma: float) -> float:
    """Weight of the pseudo-label loss for batch ``b`` (1-based) of epoch ``t`` (0-based)."""
    if b <= c1 * B:
        return 0.0
    if b <= c2 * B:
        return (b / B) * (gamma / (t + 1))
    return 1.0


def pseudo_labels(probs: torch.Tensor) -> torch.Tensor:
    # argmax returns the first maximum, so exact ties go to class 0.
    return probs.detach().argmax(dim=1)


def pseudo_label_loss(probs: torch.Tensor) -> torch.Tensor:
    if probs.shape[0] == 0:
        raise ValueError("empty unlabeled batch")
    return ce_loss(probs, pseudo_labels(probs))


def total_loss(l_s, l_u, alpha: float):
    return l_s + alpha * l_u


def objective(
    y_pred: torch.Tensor,
    y_true: torch.Tensor,
    h_scl: torch.Tensor,
    *,
    lam: float,
    tau: float,
    alpha: float = 0.0,
    pseudo_pred: torch.Tensor | None = None,
    use_scl: bool = True,
    use_ssl: bool = True,
) -> dict:
    """Full objective with ablation switches; returns every term for logging.

    ``use_scl=False`` behaves as ``lam=0``; ``use_ssl=False`` forces ``alpha=0``.
    """
    zero = y_pred.new_zeros(())
    l_ce = ce_loss(y_pred, y_true)
    if use_scl and lam > 0:
        l_scl = scl_loss(h_scl, y_true, tau)
    else:
        lam, l_scl = 0.0, zero
    l_s = supervised_loss(l_ce, l_scl, lam)
    if use_ssl and pseudo_pred is not None:
        l_u = pseudo_label_loss(pseudo_pred)
    else:
        alpha, l_u = 0.0, zero
    return {
        "L_CE": l_ce,
        "L_SCL": l_scl,
        "L_S": l_s,
        "L_U": l_u,
        "alpha": float(alpha),
        "L": total_loss(l_s, l_u, alpha),
    }
