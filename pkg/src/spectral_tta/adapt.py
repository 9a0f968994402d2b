"""Online adaptation of the spectral code.

The objective is mean prediction entropy over reliability-filtered samples,
optionally combined with a diversity term that rewards spread in the
expert-input alignments of the configured tail layers. Updates are Adam
steps taken at a sharpness-aware perturbed point; only masked-in singular
values outside the frozen tail ever change.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .model import AlignmentStats, SpectralViT
from .tensor import Tensor

MODES = ("entmin_dm", "entmin_only", "dm_only")


@dataclass
class AdaptConfig:
    lambda_dm: float = 50.0
    entropy_margin_factor: float = 0.4
    learning_rate: float = 3e-3
    sam_rho: float = 0.05
    adam_betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    mode: str = "entmin_dm"
    mask_strategy: str = "all"
    mask_r: float = 100.0

    def validate(self) -> None:
        if self.lambda_dm < 0:
            raise ValueError("lambda_dm must be non-negative")
        if self.entropy_margin_factor <= 0:
            raise ValueError("entropy_margin_factor must be positive")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.sam_rho < 0:
            raise ValueError("sam_rho must be non-negative")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")

    @property
    def uses_entmin(self) -> bool:
        return self.mode in ("entmin_dm", "entmin_only")

    @property
    def uses_dm(self) -> bool:
        return self.mode in ("entmin_dm", "dm_only") and self.lambda_dm > 0.0


@dataclass
class LossReport:
    entmin: float
    dm: float
    combined: float
    kept_samples: int
    batch_size: int
    layer_std_means: dict[str, float] = field(default_factory=dict)
    updated: bool = True
    logits: np.ndarray | None = None  # pre-update predictions of the batch


def sample_entropies(logits: Tensor) -> Tensor:
    """Per-sample prediction entropy H = -sum_c p_c log p_c, shape (B,)."""
    log_p = T.log_softmax(logits)
    p = T.exp(log_p)
    return T.neg(T.tensor_sum(T.mul(p, log_p), axis=-1))


def entropy_loss(
    logits: Tensor, num_classes: int, margin_factor: float
) -> tuple[Tensor, np.ndarray]:
    """Mean entropy over samples below the reliability threshold.

    Samples with H >= margin_factor * log(num_classes) are excluded and
    contribute exactly zero gradient. An empty kept set yields an exact-zero
    constant loss.
    """
    if logits.ndim != 2 or logits.shape[1] != num_classes:
        raise ValueError(f"expected logits of shape (B, {num_classes}), got {logits.shape}")
    entropies = sample_entropies(logits)
    threshold = margin_factor * math.log(num_classes)
    kept = entropies.data < threshold
    if not kept.any():
        return Tensor(0.0), kept
    loss = T.take(entropies, np.flatnonzero(kept)).mean()
    return loss, kept


def diversity_loss(stats: list[AlignmentStats]) -> Tensor:
    """Negative mean alignment spread, summed over the probed layers (<= 0)."""
    if not stats:
        raise ValueError("diversity loss needs at least one probed layer")
    total = T.neg(stats[0].std.mean())
    for s in stats[1:]:
        total = T.sub(total, s.std.mean())
    return total


class MaskedAdam:
    """Adam over (tensor, mask) pairs; masked-out entries are never touched."""

    def __init__(
        self,
        params: list[tuple[Tensor, np.ndarray]],
        lr: float,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
    ):
        self.params = params
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p, _ in params]
        self.v = [np.zeros_like(p.data) for p, _ in params]

    def step(self, grads: list[np.ndarray], lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        self.t += 1
        correct1 = 1.0 - self.beta1**self.t
        correct2 = 1.0 - self.beta2**self.t
        for (param, mask), m, v, g in zip(self.params, self.m, self.v, grads):
            gm = g[mask]
            m[mask] = self.beta1 * m[mask] + (1.0 - self.beta1) * gm
            v[mask] = self.beta2 * v[mask] + (1.0 - self.beta2) * gm * gm
            m_hat = m[mask] / correct1
            v_hat = v[mask] / correct2
            param.data[mask] = param.data[mask] - lr * m_hat / (np.sqrt(v_hat) + self.eps)


def make_optimizer(model: SpectralViT, config: AdaptConfig) -> MaskedAdam:
    params = [(sigma, mask) for _, sigma, mask in model.trainable_sigmas()]
    if not params:
        raise ValueError("model has no trainable singular values")
    return MaskedAdam(params, lr=config.learning_rate, betas=config.adam_betas, eps=config.adam_eps)


def combined_loss(
    model: SpectralViT,
    images: Tensor,
    config: AdaptConfig,
    capture_dm: bool = True,
) -> tuple[Tensor | None, LossReport]:
    """One forward pass assembling the configured objective.

    Returns (loss, report); loss is None when no term carries a gradient
    (all samples filtered and no diversity term).
    """
    dm_layers = model.dm_layer_ids() if capture_dm else ()
    out = model.forward(images, capture_alignment=dm_layers)
    batch = images.shape[0]

    ent_loss, kept = entropy_loss(
        out.logits, model.config.num_classes, config.entropy_margin_factor
    )
    dm_value = 0.0
    std_means = {}
    dm_term = None
    if dm_layers:
        dm_term = diversity_loss(out.alignment)
        dm_value = dm_term.item()
        std_means = {s.layer_id: float(s.std.data.mean()) for s in out.alignment}

    terms = []
    if config.uses_entmin and kept.any():
        terms.append(ent_loss)
    if config.uses_dm:
        terms.append(T.mul(dm_term, config.lambda_dm))
    loss = None
    if terms:
        loss = terms[0]
        for extra in terms[1:]:
            loss = T.add(loss, extra)

    ent_value = ent_loss.item()
    combined = 0.0
    if config.uses_entmin:
        combined += ent_value
    if config.uses_dm:
        combined += config.lambda_dm * dm_value
    report = LossReport(
        entmin=ent_value,
        dm=dm_value,
        combined=combined,
        kept_samples=int(kept.sum()),
        batch_size=batch,
        layer_std_means=std_means,
        logits=out.logits.data,
    )
    return loss, report


def _sigma_grads(model: SpectralViT, loss: Tensor) -> list[np.ndarray]:
    sigmas = [sigma for _, sigma, _ in model.trainable_sigmas()]
    for sigma in sigmas:
        sigma.grad = None
    T.backward(loss)
    grads = []
    for sigma in sigmas:
        grads.append(np.zeros_like(sigma.data) if sigma.grad is None else sigma.grad)
        sigma.grad = None
    return grads


def masked_grad_norm(grads: list[np.ndarray], masks: list[np.ndarray]) -> float:
    """L2 norm over the concatenation of all trainable (masked-in) gradients."""
    total = 0.0
    for g, mask in zip(grads, masks):
        gm = g[mask]
        total += float(gm @ gm)
    return math.sqrt(total)


def adapt_step(
    model: SpectralViT,
    images: Tensor,
    config: AdaptConfig,
    optimizer: MaskedAdam,
) -> LossReport:
    """One sharpness-aware update of the trainable singular values.

    Pass 1 evaluates the objective at the current point; the trainable sigmas
    are then perturbed by rho * g / ||g|| (norm over all trainable entries),
    pass 2 re-evaluates the objective there (the entropy filter is recomputed),
    the sigmas are restored, and one Adam step applies the perturbed-point
    gradient. With sam_rho = 0 this is plain Adam. Masked-out entries and all
    non-sigma parameters are bit-identical afterwards.
    """
    config.validate()
    trainables = model.trainable_sigmas()
    if not trainables:
        raise ValueError("model has no trainable singular values")
    masks = [mask for _, _, mask in trainables]
    capture_dm = bool(model.dm_layer_ids())

    loss, report = combined_loss(model, images, config, capture_dm=capture_dm)
    if loss is None:
        # all samples filtered with no diversity term: step is a no-op
        report.updated = False
        return report

    grads = _sigma_grads(model, loss)

    if config.sam_rho > 0.0:
        norm = masked_grad_norm(grads, masks)
        if norm > 0.0:
            saved = [sigma.data.copy() for _, sigma, _ in trainables]
            scale = config.sam_rho / norm
            for (_, sigma, mask), g in zip(trainables, grads):
                sigma.data[mask] = sigma.data[mask] + scale * g[mask]
            # the second pass only needs probes when the objective uses them
            perturbed_loss, _ = combined_loss(
                model, images, config, capture_dm=capture_dm and config.uses_dm
            )
            if perturbed_loss is not None:
                grads = _sigma_grads(model, perturbed_loss)
            for (_, sigma, _), original in zip(trainables, saved):
                sigma.data = original

    optimizer.step(grads)
    return report
