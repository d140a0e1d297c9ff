"""Curriculum fine-tuning with agreement-gated sample selection.

Three modules train together on every batch:

- the linear probing module (LPM), a linear head on frozen features, trains
  on the whole batch;
- the intermediate adapter module (IAM) trains only on samples whose
  observed label matches the LPM's argmax prediction;
- the last adapter module (LAM) trains only on samples whose observed label
  matches the IAM's argmax prediction.

Only the LAM is used at inference. Selection uses no hyperparameter: there
is no noise-rate or keep-rate anywhere in this module.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .adapters import BlockAdapter, init_adapter
from .backbone import Backbone

ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8


def make_adam(params, lr: float) -> torch.optim.Adam:
    return torch.optim.Adam(list(params), lr=lr, betas=ADAM_BETAS, eps=ADAM_EPS, weight_decay=0.0)


def set_lr(optimizer: torch.optim.Optimizer, lr: float) -> None:
    for group in optimizer.param_groups:
        group["lr"] = lr


def init_head(token_dim: int, class_count: int, seed: int) -> nn.Linear:
    gen = torch.Generator().manual_seed(int(seed))
    head = nn.Linear(token_dim, class_count)
    bound = 1.0 / np.sqrt(token_dim)
    with torch.no_grad():
        head.weight.copy_((torch.rand(class_count, token_dim, generator=gen) * 2 - 1) * bound)
        head.bias.zero_()
    return head


class AdapterClassifier(nn.Module):
    """Adapter stack (optional) plus linear head over the frozen backbone's class token."""

    def __init__(self, adapter: BlockAdapter | None, head: nn.Linear):
        super().__init__()
        self.adapter = adapter
        self.head = head

    def logits(self, backbone: Backbone, images) -> torch.Tensor:
        return self.head(backbone.forward_features(images, self.adapter))


# --------------------------------------------------------------------------
# Selection and losses
# --------------------------------------------------------------------------


def agreement_mask(probabilities, observed_labels) -> torch.Tensor:
    """``argmax(p_i) == y_i`` per row; ties resolve to the lowest class index."""
    probabilities = torch.as_tensor(probabilities)
    observed_labels = torch.as_tensor(observed_labels)
    # torch.argmax does not document its tie order; take the first maximal column.
    is_max = probabilities == probabilities.max(dim=1, keepdim=True).values
    first = is_max.int().argmax(dim=1)
    return first == observed_labels


def masked_ce_loss(probabilities, observed_labels, mask, reduction: str = "sum", class_weights=None):
    """Cross-entropy over the rows where ``mask`` is true.

    Returns ``(loss, selected_count)``; an empty selection gives ``(0, 0)``.
    ``reduction="sum"`` adds per-row ``-log p[label]``; ``"mean"`` divides by
    the selected count.
    """
    probabilities = torch.as_tensor(probabilities)
    log_probs = torch.log(probabilities.clamp_min(torch.finfo(probabilities.dtype).tiny))
    return _masked_nll(log_probs, torch.as_tensor(observed_labels), torch.as_tensor(mask), reduction, class_weights)


def masked_ce_from_logits(logits, observed_labels, mask, reduction: str = "mean", class_weights=None):
    return _masked_nll(F.log_softmax(logits, dim=1), observed_labels, mask, reduction, class_weights)


def _masked_nll(log_probs, labels, mask, reduction, class_weights):
    if reduction not in ("sum", "mean"):
        raise ValueError(f"reduction must be 'sum' or 'mean', got {reduction!r}")
    mask = mask.bool()
    count = int(mask.sum())
    if count == 0:
        return log_probs.new_zeros(()), 0
    nll = -log_probs[mask].gather(1, labels[mask].long()[:, None])[:, 0]
    if class_weights is not None:
        nll = nll * torch.as_tensor(class_weights, dtype=nll.dtype)[labels[mask].long()]
    total = nll.sum()
    return (total / count if reduction == "mean" else total), count


# --------------------------------------------------------------------------
# State and step
# --------------------------------------------------------------------------


@dataclass
class BatchSelection:
    lpm_agree: torch.Tensor
    iam_agree: torch.Tensor


@dataclass
class Batch:
    """One training batch.

    ``features`` are the frozen, adapter-free class tokens for ``images``;
    ``images`` may be None only when no adapter module needs them.
    """

    images: torch.Tensor | None
    features: torch.Tensor
    labels: torch.Tensor
    index: np.ndarray | None = None


@dataclass
class CufitState:
    backbone: Backbone
    lpm: nn.Linear
    iam: AdapterClassifier
    lam: AdapterClassifier
    optimizers: dict[str, torch.optim.Optimizer]
    epoch: int = 0
    class_weights: torch.Tensor | None = None
    step_log: list = field(default_factory=list, repr=False)

    def modules(self) -> dict[str, nn.Module]:
        return {"lpm": self.lpm, "iam": self.iam, "lam": self.lam}

    def trainable_parameters(self) -> dict[str, list[nn.Parameter]]:
        return {name: list(m.parameters()) for name, m in self.modules().items()}

    def set_lr(self, lr: float) -> None:
        for opt in self.optimizers.values():
            set_lr(opt, lr)


def init_cufit(backbone: Backbone, variant, class_count: int, seed: int = 0, lr: float = 1e-3,
               class_weights=None) -> CufitState:
    """Fresh LPM head plus independently seeded IAM and LAM adapter modules."""
    c = backbone.config.token_dim
    lpm = init_head(c, class_count, seed * 10 + 1)
    iam = AdapterClassifier(init_adapter(variant, backbone.config, seed * 10 + 2), init_head(c, class_count, seed * 10 + 3))
    lam = AdapterClassifier(init_adapter(variant, backbone.config, seed * 10 + 4), init_head(c, class_count, seed * 10 + 5))
    optimizers = {name: make_adam(m.parameters(), lr) for name, m in (("lpm", lpm), ("iam", iam), ("lam", lam))}
    weights = None if class_weights is None else torch.as_tensor(class_weights, dtype=torch.float32)
    return CufitState(backbone, lpm, iam, lam, optimizers, class_weights=weights)


def predict(state: CufitState, module: str, inputs) -> torch.Tensor:
    """Softmax probabilities of one module.

    ``inputs`` are frozen features for ``"lpm"`` and images otherwise.
    """
    with torch.no_grad():
        if module == "lpm":
            logits = state.lpm(torch.as_tensor(inputs))
        else:
            logits = getattr(state, module).logits(state.backbone, inputs)
    return torch.softmax(logits, dim=1)


def cufit_step(state: CufitState, batch: Batch):
    """One simultaneous update of LPM, IAM and LAM.

    Agreement masks come from each selector's predictions before this step's
    update. A module whose mask is empty is not stepped.
    """
    labels = batch.labels
    lpm_logits = state.lpm(batch.features)
    iam_logits = state.iam.logits(state.backbone, batch.images)
    lam_logits = state.lam.logits(state.backbone, batch.images)

    lpm_agree = agreement_mask(lpm_logits.detach(), labels)
    iam_agree = agreement_mask(iam_logits.detach(), labels)
    all_rows = torch.ones_like(lpm_agree)

    w = state.class_weights
    losses = {
        "lpm": masked_ce_from_logits(lpm_logits, labels, all_rows, class_weights=w),
        "iam": masked_ce_from_logits(iam_logits, labels, lpm_agree, class_weights=w),
        "lam": masked_ce_from_logits(lam_logits, labels, iam_agree, class_weights=w),
    }
    for opt in state.optimizers.values():
        opt.zero_grad(set_to_none=True)
    selected = [loss for loss, count in losses.values() if count > 0]
    torch.stack(selected).sum().backward()
    for name, (loss, count) in losses.items():
        if count > 0:
            state.optimizers[name].step()
    return state, BatchSelection(lpm_agree, iam_agree), {k: (float(v.detach()), n) for k, (v, n) in losses.items()}


def infer(state: CufitState, inputs) -> torch.Tensor:
    """Predicted labels from the LAM alone."""
    return predict(state, "lam", inputs).argmax(dim=1)
