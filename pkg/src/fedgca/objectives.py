"""FedGCA local loss terms.

Shapes used throughout: per-view predictions are ``(V, n, C)`` with ``V = J + 1``
views and ``n`` images; normalized CAMs are ``(V, n, h, w)``. Anything coming
from the frozen global snapshot is detached, so it shapes the loss value but
never contributes gradient.
"""

from __future__ import annotations

from dataclasses import dataclass, fields

import torch

CE_FLOOR = 1e-12
PBAR_CLAMP = 1e-7


@dataclass
class PredictionSet:
    local: torch.Tensor
    global_: torch.Tensor | None = None

    def __post_init__(self):
        if self.local.ndim == 2:
            self.local = self.local.unsqueeze(0)
        if self.global_ is not None:
            if self.global_.ndim == 2:
                self.global_ = self.global_.unsqueeze(0)
            if self.global_.shape != self.local.shape:
                raise ValueError(
                    f"local predictions {tuple(self.local.shape)} and global {tuple(self.global_.shape)} differ in shape"
                )

    def mean(self) -> torch.Tensor:
        """Average over local views and (if present) the detached global views."""
        if self.global_ is None:
            return self.local.mean(dim=0)
        return torch.cat([self.local, self.global_.detach()]).mean(dim=0)


@dataclass
class LossBreakdown:
    ce: torch.Tensor | float = 0.0
    cp: torch.Tensor | float = 0.0
    cam: torch.Tensor | float = 0.0
    gc: torch.Tensor | float = 0.0
    oc: torch.Tensor | float = 0.0
    total: torch.Tensor | float = 0.0

    def as_floats(self) -> dict[str, float]:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            out[f.name] = v.item() if isinstance(v, torch.Tensor) else float(v)
        return out

    @classmethod
    def mean(cls, rows: list["LossBreakdown"]) -> "LossBreakdown":
        if not rows:
            return cls()
        dicts = [r.as_floats() for r in rows]
        return cls(**{k: sum(d[k] for d in dicts) / len(dicts) for k in dicts[0]})


def loss_ce(predictions: torch.Tensor, labels) -> torch.Tensor:
    """Mean ``-log p[label]`` over views and images; ``predictions`` is ``(V, n, C)`` or ``(n, C)``."""
    probs = predictions if predictions.ndim == 3 else predictions.unsqueeze(0)
    labels = torch.as_tensor(labels, dtype=torch.long)
    C = probs.shape[-1]
    if labels.numel() and (labels.min() < 0 or labels.max() >= C):
        raise ValueError(f"labels outside [0, {C})")
    idx = labels.view(1, -1, 1).expand(probs.shape[0], -1, 1)
    picked = probs.gather(-1, idx).squeeze(-1)
    return -torch.log(picked.clamp_min(CE_FLOOR)).mean()


def _kl(p: torch.Tensor, q: torch.Tensor) -> torch.Tensor:
    return (p * (torch.log(p) - torch.log(q))).sum(dim=-1)


def loss_cp(pred_set: PredictionSet, form: str = "bce") -> torch.Tensor:
    """Prediction consistency against the local/global mean prediction.

    ``bce`` applies ``-[p log pbar + (1 - p) log(1 - pbar)]`` per class, summed
    over classes and averaged over images and local views. ``kl`` uses
    ``KL(p || pbar)`` in its place.
    """
    p = pred_set.local
    pbar = pred_set.mean().clamp(PBAR_CLAMP, 1 - PBAR_CLAMP).unsqueeze(0)
    if form == "bce":
        per = -(p * torch.log(pbar) + (1 - p) * torch.log(1 - pbar)).sum(dim=-1)
    elif form == "kl":
        per = _kl(p.clamp_min(CE_FLOOR), pbar)
    else:
        raise ValueError(f"unknown cp_form {form!r}")
    return per.mean()


def loss_cam(local_cams: torch.Tensor, global_cams: torch.Tensor | None = None) -> torch.Tensor:
    """Sum over local views of ``KL(M_j || Mbar)``, averaged over images."""
    if local_cams.ndim == 3:
        local_cams = local_cams.unsqueeze(0)
    if global_cams is not None:
        if global_cams.ndim == 3:
            global_cams = global_cams.unsqueeze(0)
        if global_cams.shape[-2:] != local_cams.shape[-2:] or global_cams.shape[1] != local_cams.shape[1]:
            raise ValueError(
                f"CAM shapes differ: local {tuple(local_cams.shape)} vs global {tuple(global_cams.shape)}"
            )
        pool = torch.cat([local_cams, global_cams.detach()])
    else:
        pool = local_cams
    mbar = pool.mean(dim=0, keepdim=True)
    kl = _kl(local_cams.flatten(-2), mbar.flatten(-2))
    return kl.sum(dim=0).mean()


def loss_gc(
    pred_set: PredictionSet,
    local_cams: torch.Tensor | None,
    global_cams: torch.Tensor | None = None,
    form: str = "bce",
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Returns ``(gc, cp, cam)`` with ``gc = cp + cam``; CAM term is 0 when ``local_cams`` is None."""
    cp = loss_cp(pred_set, form)
    cam = loss_cam(local_cams, global_cams) if local_cams is not None else torch.zeros((), dtype=cp.dtype)
    return cp + cam, cp, cam


def loss_oc(w_i: torch.Tensor, w_global: torch.Tensor, lambda_i: torch.Tensor, alpha: float) -> torch.Tensor:
    """``-(1/alpha) <lambda_i, w_i> + 0.5 ||w_i - w_global||^2``."""
    if not (w_i.shape == w_global.shape == lambda_i.shape):
        raise ValueError(
            f"dimension mismatch: w_i {tuple(w_i.shape)}, w_global {tuple(w_global.shape)}, lambda {tuple(lambda_i.shape)}"
        )
    if alpha <= 0:
        raise ValueError("alpha must be positive for the class-consistency term")
    diff = w_i - w_global.detach()
    return -torch.dot(lambda_i.detach(), w_i) / alpha + 0.5 * torch.dot(diff, diff)


def loss_total(ce, oc=0.0, gc=0.0, alpha: float = 0.0, beta: float = 0.0, cp=0.0, cam=0.0) -> LossBreakdown:
    if alpha < 0 or beta < 0:
        raise ValueError(f"alpha and beta must be non-negative, got alpha={alpha}, beta={beta}")
    total = ce
    if alpha:
        total = total + alpha * oc
    if beta:
        total = total + beta * gc
    return LossBreakdown(ce=ce, cp=cp, cam=cam, gc=gc, oc=oc, total=total)
