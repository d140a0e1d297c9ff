"""Comparison training paradigms.

Single-model paradigms train one parameter set with plain cross-entropy:
``FULL`` (backbone and head), ``LINEAR_PROBE`` (head only) and
``SINGLE_ADAPTER`` (adapter stack and head).

Two-network methods keep the ``keep_count`` smallest-loss samples of each
batch under a keep-rate schedule ``R(t) = 1 - tau * min(t / t_k, 1)``:

- Co-teaching: each network's small-loss set updates its peer.
- JoCor-style: one joint loss with symmetric-KL co-regularisation; both
  networks update on its small-loss set.
- CoDis-style: each network ranks by its own loss minus a
  Jensen-Shannon discrepancy bonus.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .adapters import init_adapter
from .backbone import Backbone
from .curriculum import AdapterClassifier, init_head, make_adam, masked_ce_from_logits

PARADIGMS = ("FULL", "LINEAR_PROBE", "SINGLE_ADAPTER")
TWIN_METHODS = ("COTEACHING", "JOCOR", "CODIS")
DEFAULT_LAMBDA = {"JOCOR": 0.3, "CODIS": 0.25}


class BaselineError(ValueError):
    pass


# --------------------------------------------------------------------------
# Losses
# --------------------------------------------------------------------------


def inverse_frequency_weights(labels, class_count: int) -> np.ndarray:
    """``n / (k * count_c)``; classes with no samples get weight 1."""
    counts = np.bincount(np.asarray(labels), minlength=class_count).astype(np.float64)
    weights = np.ones(class_count)
    present = counts > 0
    weights[present] = len(labels) / (class_count * counts[present])
    return weights


def weighted_ce(probabilities, labels, class_weights=None) -> torch.Tensor:
    """Mean of ``w[y_i] * -log p_i[y_i]``; default weights are inverse class frequency."""
    probabilities = torch.as_tensor(probabilities)
    labels = torch.as_tensor(labels).long()
    k = probabilities.shape[1]
    if class_weights is None:
        class_weights = inverse_frequency_weights(labels.numpy(), k)
    w = torch.as_tensor(class_weights, dtype=probabilities.dtype)
    if w.shape != (k,):
        raise BaselineError(f"class_weights must have length {k}, got {tuple(w.shape)}")
    if bool((w <= 0).any()):
        raise BaselineError(f"class weights must be positive, got {w.tolist()}")
    nll = -torch.log(probabilities.gather(1, labels[:, None])[:, 0])
    return (w[labels] * nll).mean()


def per_sample_ce(logits, labels, class_weights=None) -> torch.Tensor:
    ce = F.cross_entropy(logits, labels, reduction="none")
    if class_weights is not None:
        ce = ce * class_weights[labels]
    return ce


def kl_rows(p_log, q_log) -> torch.Tensor:
    """Row-wise ``KL(p || q)`` from log-probabilities."""
    return (p_log.exp() * (p_log - q_log)).sum(dim=1)


def js_rows(p_log, q_log) -> torch.Tensor:
    m_log = torch.logsumexp(torch.stack([p_log, q_log]), dim=0) - math.log(2.0)
    return 0.5 * kl_rows(p_log, m_log) + 0.5 * kl_rows(q_log, m_log)


def jocor_losses(logits_a, logits_b, labels, lam: float, class_weights=None) -> torch.Tensor:
    la, lb = F.log_softmax(logits_a, dim=1), F.log_softmax(logits_b, dim=1)
    ce = per_sample_ce(logits_a, labels, class_weights) + per_sample_ce(logits_b, labels, class_weights)
    return (1.0 - lam) * ce + lam * (kl_rows(la, lb) + kl_rows(lb, la))


def codis_scores(logits_a, logits_b, labels, lam: float, class_weights=None):
    la, lb = F.log_softmax(logits_a, dim=1), F.log_softmax(logits_b, dim=1)
    js = js_rows(la, lb)
    ce_a = per_sample_ce(logits_a, labels, class_weights)
    ce_b = per_sample_ce(logits_b, labels, class_weights)
    return ce_a - lam * js, ce_b - lam * js


# --------------------------------------------------------------------------
# Keep-rate schedule
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class KeepRateSchedule:
    tau: float
    warmup_epochs: int = 10

    def __post_init__(self):
        if not 0.0 <= self.tau < 1.0:
            raise BaselineError(f"tau must be in [0, 1), got {self.tau}")
        if self.warmup_epochs < 1:
            raise BaselineError(f"warmup_epochs must be >= 1, got {self.warmup_epochs}")

    def rate(self, epoch: int) -> float:
        return 1.0 - self.tau * min(epoch / self.warmup_epochs, 1.0)


def keep_count(schedule: KeepRateSchedule, epoch: int, batch_size: int) -> int:
    if batch_size < 1:
        raise BaselineError(f"batch_size must be >= 1, got {batch_size}")
    # The tolerance keeps e.g. 0.6 * 32 = 19.200000000000003 from rounding past an exact product.
    count = math.ceil(schedule.rate(epoch) * batch_size - 1e-9)
    return min(max(count, 1), batch_size)


def smallest(values: torch.Tensor, count: int) -> torch.Tensor:
    """Indices of the ``count`` smallest values; ties go to the lower index."""
    return torch.argsort(values.detach(), stable=True)[:count]


def index_mask(index: torch.Tensor, n: int) -> torch.Tensor:
    mask = torch.zeros(n, dtype=torch.bool)
    mask[index] = True
    return mask


# --------------------------------------------------------------------------
# Two-network state and steps
# --------------------------------------------------------------------------


@dataclass
class TwinState:
    backbone: Backbone
    net_a: AdapterClassifier
    net_b: AdapterClassifier
    opt_a: torch.optim.Optimizer
    opt_b: torch.optim.Optimizer
    method: str
    class_weights: torch.Tensor | None = None

    def modules(self):
        return {"a": self.net_a, "b": self.net_b}

    def set_lr(self, lr: float) -> None:
        for opt in (self.opt_a, self.opt_b):
            for group in opt.param_groups:
                group["lr"] = lr


def init_twin(backbone: Backbone, variant, class_count: int, method: str, seed: int = 0,
              lr: float = 1e-3, class_weights=None) -> TwinState:
    method = method.upper()
    if method not in TWIN_METHODS:
        raise BaselineError(f"unknown two-network method {method!r}")
    c = backbone.config.token_dim
    nets = []
    for offset in (11, 17):
        s = seed * 100 + offset
        nets.append(AdapterClassifier(init_adapter(variant, backbone.config, s), init_head(c, class_count, s + 1)))
    weights = None if class_weights is None else torch.as_tensor(class_weights, dtype=torch.float32)
    return TwinState(backbone, nets[0], nets[1], make_adam(nets[0].parameters(), lr),
                     make_adam(nets[1].parameters(), lr), method, weights)


def _mean_over(losses: torch.Tensor, index: torch.Tensor) -> torch.Tensor:
    return losses[index].mean()


def _apply(opt, loss):
    opt.zero_grad(set_to_none=True)
    loss.backward()
    opt.step()


def coteaching_step(twin: TwinState, images, labels, schedule: KeepRateSchedule, epoch: int):
    """Cross update: A's small-loss samples train B and vice versa.

    Returns ``(twin, selections)`` where ``selections[name]`` is the set used
    to update that network.
    """
    n = len(labels)
    keep = keep_count(schedule, epoch, n)
    ce_a = per_sample_ce(twin.net_a.logits(twin.backbone, images), labels, twin.class_weights)
    ce_b = per_sample_ce(twin.net_b.logits(twin.backbone, images), labels, twin.class_weights)
    pick_a, pick_b = smallest(ce_a, keep), smallest(ce_b, keep)
    twin.opt_a.zero_grad(set_to_none=True)
    twin.opt_b.zero_grad(set_to_none=True)
    (_mean_over(ce_a, pick_b) + _mean_over(ce_b, pick_a)).backward()
    twin.opt_a.step()
    twin.opt_b.step()
    return twin, {"a": index_mask(pick_b, n), "b": index_mask(pick_a, n)}


def jocor_step(twin: TwinState, images, labels, schedule: KeepRateSchedule, epoch: int, lam: float = 0.3):
    if not 0.0 <= lam < 1.0:
        raise BaselineError(f"lambda must be in [0, 1), got {lam}")
    n = len(labels)
    keep = keep_count(schedule, epoch, n)
    joint = jocor_losses(twin.net_a.logits(twin.backbone, images), twin.net_b.logits(twin.backbone, images),
                         labels, lam, twin.class_weights)
    pick = smallest(joint, keep)
    twin.opt_a.zero_grad(set_to_none=True)
    twin.opt_b.zero_grad(set_to_none=True)
    _mean_over(joint, pick).backward()
    twin.opt_a.step()
    twin.opt_b.step()
    mask = index_mask(pick, n)
    return twin, {"a": mask, "b": mask.clone()}


def codis_step(twin: TwinState, images, labels, schedule: KeepRateSchedule, epoch: int, lam: float = 0.25):
    if not 0.0 <= lam < 1.0:
        raise BaselineError(f"lambda must be in [0, 1), got {lam}")
    n = len(labels)
    keep = keep_count(schedule, epoch, n)
    logits_a = twin.net_a.logits(twin.backbone, images)
    logits_b = twin.net_b.logits(twin.backbone, images)
    score_a, score_b = codis_scores(logits_a, logits_b, labels, lam, twin.class_weights)
    pick_a, pick_b = smallest(score_a, keep), smallest(score_b, keep)
    ce_a = per_sample_ce(logits_a, labels, twin.class_weights)
    ce_b = per_sample_ce(logits_b, labels, twin.class_weights)
    twin.opt_a.zero_grad(set_to_none=True)
    twin.opt_b.zero_grad(set_to_none=True)
    (_mean_over(ce_a, pick_a) + _mean_over(ce_b, pick_b)).backward()
    twin.opt_a.step()
    twin.opt_b.step()
    return twin, {"a": index_mask(pick_a, n), "b": index_mask(pick_b, n)}


TWIN_STEPS = {"COTEACHING": coteaching_step, "JOCOR": jocor_step, "CODIS": codis_step}


# --------------------------------------------------------------------------
# Single-model paradigms
# --------------------------------------------------------------------------


@dataclass
class ParadigmModel:
    """One trainable parameter set over a backbone.

    For ``FULL`` the backbone is a private trainable copy; otherwise it is the
    shared frozen backbone.
    """

    kind: str
    backbone: Backbone
    net: AdapterClassifier
    optimizer: torch.optim.Optimizer
    class_weights: torch.Tensor | None = None

    def modules(self):
        mods = {"net": self.net}
        if self.kind == "FULL":
            mods["backbone"] = self.backbone
        return mods

    def logits(self, images=None, features=None) -> torch.Tensor:
        if self.kind == "LINEAR_PROBE" and features is not None:
            return self.net.head(features)
        return self.net.logits(self.backbone, images)

    def set_lr(self, lr: float) -> None:
        for group in self.optimizer.param_groups:
            group["lr"] = lr


def init_paradigm(kind: str, backbone: Backbone, class_count: int, variant=None, seed: int = 0,
                  lr: float = 1e-3, class_weights=None, feature_mode: bool = False) -> ParadigmModel:
    kind = kind.upper()
    if kind not in PARADIGMS:
        raise BaselineError(f"unknown paradigm {kind!r}")
    if kind == "FULL" and feature_mode:
        raise BaselineError("FULL training needs images; the dataset holds cached features")
    if kind == "SINGLE_ADAPTER" and feature_mode:
        raise BaselineError("SINGLE_ADAPTER needs images; the dataset holds cached features")
    c = backbone.config.token_dim
    head = init_head(c, class_count, seed * 100 + 31)
    adapter = init_adapter(variant, backbone.config, seed * 100 + 37) if kind == "SINGLE_ADAPTER" else None
    net = AdapterClassifier(adapter, head)
    params = list(net.parameters())
    if kind == "FULL":
        backbone = copy.deepcopy(backbone).unfreeze()
        params = list(backbone.parameters()) + params
    weights = None if class_weights is None else torch.as_tensor(class_weights, dtype=torch.float32)
    return ParadigmModel(kind, backbone, net, make_adam(params, lr), weights)


def paradigm_step(model: ParadigmModel, labels, images=None, features=None) -> float:
    logits = model.logits(images, features)
    loss, _ = masked_ce_from_logits(logits, labels, torch.ones(len(labels), dtype=torch.bool),
                                    class_weights=model.class_weights)
    _apply(model.optimizer, loss)
    return float(loss.detach())


def train_paradigm(kind: str, dataset, backbone: Backbone, variant=None, epochs: int = 10,
                   batch_size: int = 32, lr: float | None = None, seed: int = 0) -> ParadigmModel:
    """Plain cross-entropy training of one paradigm on ``dataset``'s observed labels."""
    from .datahub import batches

    if lr is None:
        lr = 1e-4 if kind.upper() == "FULL" else 1e-3
    model = init_paradigm(kind, backbone, dataset.class_count, variant, seed, lr,
                          feature_mode=not dataset.is_image)
    inputs = torch.from_numpy(np.array(dataset.inputs))
    labels = torch.from_numpy(np.array(dataset.observed_labels))
    for epoch in range(epochs):
        for index in batches(len(dataset), batch_size, seed, epoch):
            idx = torch.from_numpy(index)
            if dataset.is_image:
                paradigm_step(model, labels[idx], images=inputs[idx])
            else:
                paradigm_step(model, labels[idx], features=inputs[idx])
    return model
