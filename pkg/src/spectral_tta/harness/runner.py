"""End-to-end experiment engine.

Pretrains the dense model on the synthetic source task, decomposes it, runs
adaptation scenarios over corruption streams, and serializes per-batch
metrics. Accuracy is always taken from the evaluation forward of a batch
before any parameter change from that batch (retrieval included).
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, fields

import numpy as np

from .. import spectral, tensor as T
from ..adapt import AdaptConfig, MaskedAdam, adapt_step, make_optimizer
from ..bank import DomainBank, descriptor_from_tokens
from ..model import SpectralViT, ViTConfig
from ..tensor import Tensor
from .corrupt import corrupt
from .data import SourceTask
from .streams import StreamSpec, iter_batches

METHODS = ("source", "entmin", "entmin_dm", "entmin_dm_retrieval")


# -- pretraining -----------------------------------------------------------------


def cross_entropy(logits: Tensor, labels: np.ndarray, smoothing: float = 0.0) -> Tensor:
    n, classes = logits.shape
    targets = np.full(logits.shape, smoothing / classes)
    targets[np.arange(n), labels] += 1.0 - smoothing
    return T.neg(T.tensor_sum(T.mul(T.log_softmax(logits), Tensor(targets)))) * (1.0 / n)


def evaluate(model: SpectralViT, images: np.ndarray, labels: np.ndarray, batch_size: int = 200) -> float:
    hits = 0
    with T.no_grad():
        for start in range(0, images.shape[0], batch_size):
            chunk = images[start : start + batch_size]
            logits = model.forward(Tensor(chunk)).logits.data
            hits += int((logits.argmax(axis=1) == labels[start : start + batch_size]).sum())
    return hits / images.shape[0]


@dataclass
class PretrainResult:
    model: SpectralViT
    epoch_losses: list[float]
    test_accuracy: float


def pretrain(
    config: ViTConfig,
    task: SourceTask,
    epochs: int = 8,
    lr: float = 1e-3,
    batch_size: int = 64,
    seed: int = 0,
    smoothing: float = 0.1,
    augment: bool = True,
) -> PretrainResult:
    """Cross-entropy training of all dense parameters with Adam + cosine decay.

    Label smoothing plus light noise/brightness jitter keep the source model
    from saturating its logits; test-time entropies then carry signal.
    """
    model = SpectralViT(config, seed=seed)
    model.set_all_trainable(True)
    params = list(model.named_parameters().values())
    optimizer = MaskedAdam(
        [(p, np.ones(p.shape, dtype=bool)) for p in params], lr=lr
    )
    shuffle_rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x7a1d]))
    n = task.train_images.shape[0]
    total_steps = max(1, epochs * math.ceil(n / batch_size))
    step = 0
    epoch_losses = []
    for _ in range(epochs):
        order = shuffle_rng.permutation(n)
        running = 0.0
        batches = 0
        for start in range(0, n, batch_size):
            idx = order[start : start + batch_size]
            batch_images = task.train_images[idx]
            if augment:
                sigma = shuffle_rng.uniform(0.0, 0.04)
                shift = shuffle_rng.uniform(-0.06, 0.06)
                batch_images = np.clip(
                    batch_images + sigma * shuffle_rng.standard_normal(batch_images.shape) + shift,
                    0.0, 1.0,
                )
            logits = model.forward(Tensor(batch_images)).logits
            loss = cross_entropy(logits, task.train_labels[idx], smoothing=smoothing)
            value = loss.item()
            if not math.isfinite(value):
                raise RuntimeError(f"pretraining diverged: loss {value} at step {step}")
            for p in params:
                p.grad = None
            T.backward(loss)
            grads = [np.zeros(p.shape) if p.grad is None else p.grad for p in params]
            for p in params:
                p.grad = None
            lr_t = lr * 0.5 * (1.0 + math.cos(math.pi * step / total_steps))
            optimizer.step(grads, lr=lr_t)
            running += value
            batches += 1
            step += 1
        epoch_losses.append(running / max(batches, 1))
    model.set_all_trainable(False)
    accuracy = evaluate(model, task.test_images, task.test_labels)
    return PretrainResult(model, epoch_losses, accuracy)


# -- metrics ---------------------------------------------------------------------


@dataclass
class MetricsRecord:
    scenario: str
    method: str
    domain: str
    batch_index: int
    accuracy: float
    kept_samples: int
    entmin: float
    dm: float
    combined: float
    mean_std: float
    bank_size: int
    shift_detected: int
    stored_index: int
    retrieved_index: int
    wall_time: float

    @classmethod
    def columns(cls) -> list[str]:
        return [f.name for f in fields(cls)]

    def row(self) -> list[str]:
        return [repr(getattr(self, name)) if isinstance(getattr(self, name), float)
                else str(getattr(self, name)) for name in self.columns()]


def records_to_csv(records: list[MetricsRecord]) -> str:
    lines = [",".join(MetricsRecord.columns())]
    for r in records:
        lines.append(",".join(r.row()))
    return "\n".join(lines) + "\n"


def records_from_csv(text: str) -> list[MetricsRecord]:
    lines = [ln for ln in text.strip().split("\n") if ln]
    header = lines[0].split(",")
    if header != MetricsRecord.columns():
        raise ValueError(f"unexpected metrics columns: {header}")
    out = []
    casts = {f.name: f.type for f in fields(MetricsRecord)}
    for line in lines[1:]:
        values = line.split(",")
        kwargs = {}
        for name, value in zip(header, values):
            kind = casts[name]
            if kind == "int":
                kwargs[name] = int(value)
            elif kind == "float":
                kwargs[name] = float(value)
            else:
                kwargs[name] = value
        out.append(MetricsRecord(**kwargs))
    return out


# -- scenario running ----------------------------------------------------------------


def source_descriptor(model: SpectralViT, task: SourceTask, batches: int = 4, batch_size: int = 64):
    """Descriptor of the source domain from a fixed slab of training images."""
    count = batches * batch_size
    with T.no_grad():
        tokens = model.embed_tokens(Tensor(task.train_images[:count]))
    return descriptor_from_tokens(tokens)


def _method_adapt_config(method: str, base: AdaptConfig) -> AdaptConfig:
    from dataclasses import replace

    if method == "entmin":
        return replace(base, mode="entmin_only")
    return replace(base, mode="entmin_dm")


@dataclass
class ScenarioResult:
    records: list[MetricsRecord]
    bank: DomainBank | None


def run_scenario(
    model: SpectralViT,
    task: SourceTask,
    stream: StreamSpec,
    method: str,
    adapt_config: AdaptConfig | None = None,
    bank_alpha: float = 0.8,
    bank_tau: float = 0.05,
    seed: int = 0,
) -> ScenarioResult:
    """Run one stream with one method.

    The model must carry the source (pre-adaptation) spectral code at entry;
    it is snapshotted, used for every within-run reset, and restored before
    returning, so sequential runs on one loaded model stay independent.
    """
    if method not in METHODS:
        raise ValueError(f"method must be one of {METHODS}, got {method!r}")
    if not model.decomposed:
        raise ValueError("run_scenario needs a decomposed checkpoint")
    adapt_config = adapt_config or AdaptConfig()
    adapt_config.validate()

    source_code = spectral.extract_code(model)
    use_bank = method == "entmin_dm_retrieval"
    adapting = method != "source"
    config = _method_adapt_config(method, adapt_config) if adapting else adapt_config

    def fresh_optimizer():
        return make_optimizer(model, config) if adapting else None

    def fresh_bank():
        if not use_bank:
            return None
        return DomainBank.initialize(
            source_descriptor(model, task, batch_size=stream.batch_size),
            source_code,
            alpha=bank_alpha,
            tau=bank_tau,
        )

    optimizer = fresh_optimizer()
    bank = fresh_bank()
    records: list[MetricsRecord] = []
    previous_tag = None

    try:
        for batch in iter_batches(stream, task.test_images, task.test_labels, seed):
            started = time.perf_counter()
            if stream.scenario == "tta" and previous_tag is not None and batch.tag != previous_tag:
                # independent per-corruption evaluation: reset to the source state
                spectral.load_code(model, source_code)
                optimizer = fresh_optimizer()
                bank = fresh_bank()
            previous_tag = batch.tag

            images = Tensor(batch.images)
            shift = stored = retrieved = -1
            bank_size = len(bank) if bank is not None else 0

            if method == "source":
                with T.no_grad():
                    logits = model.forward(images).logits.data
                accuracy = float((logits.argmax(axis=1) == batch.labels).mean())
                record = MetricsRecord(
                    scenario=stream.scenario, method=method, domain=batch.tag,
                    batch_index=batch.index, accuracy=accuracy, kept_samples=0,
                    entmin=0.0, dm=0.0, combined=0.0, mean_std=float("nan"),
                    bank_size=0, shift_detected=0, stored_index=-1, retrieved_index=-1,
                    wall_time=0.0,
                )
            else:
                if use_bank:
                    with T.no_grad():
                        eval_out = model.forward(images, capture_embedding=True)
                    pre_update_logits = eval_out.logits.data
                    obs = bank.observe(
                        descriptor_from_tokens(eval_out.embedded), model, label=batch.tag
                    )
                    shift = int(obs.shift)
                    stored = obs.stored_index if obs.stored_index is not None else -1
                    retrieved = obs.retrieved_index if obs.retrieved_index is not None else -1
                    bank_size = len(bank)
                    report = adapt_step(model, images, config, optimizer)
                else:
                    report = adapt_step(model, images, config, optimizer)
                    pre_update_logits = report.logits
                accuracy = float((pre_update_logits.argmax(axis=1) == batch.labels).mean())
                std_values = list(report.layer_std_means.values())
                record = MetricsRecord(
                    scenario=stream.scenario, method=method, domain=batch.tag,
                    batch_index=batch.index, accuracy=accuracy,
                    kept_samples=report.kept_samples, entmin=report.entmin,
                    dm=report.dm, combined=report.combined,
                    mean_std=float(np.mean(std_values)) if std_values else float("nan"),
                    bank_size=bank_size, shift_detected=shift if shift >= 0 else 0,
                    stored_index=stored, retrieved_index=retrieved, wall_time=0.0,
                )
            record.wall_time = time.perf_counter() - started
            records.append(record)
    finally:
        spectral.load_code(model, source_code)
    return ScenarioResult(records, bank)


# -- reporting ------------------------------------------------------------------------


def summarize(records: list[MetricsRecord]) -> str:
    """Per-domain and overall accuracy per (scenario, method), plus bank growth."""
    lines = []
    groups: dict[tuple[str, str], list[MetricsRecord]] = {}
    for r in records:
        groups.setdefault((r.scenario, r.method), []).append(r)
    for (scenario, method), rows in groups.items():
        lines.append(f"scenario={scenario} method={method}")
        domains: dict[str, list[float]] = {}
        for r in rows:
            domains.setdefault(r.domain, []).append(r.accuracy)
        domain_means = []
        for domain, accs in domains.items():
            mean = float(np.mean(accs))
            domain_means.append(mean)
            lines.append(f"  {domain}: accuracy {mean:.4f} over {len(accs)} batches")
        lines.append(f"  overall mean accuracy: {float(np.mean(domain_means)):.4f}")
        final_bank = rows[-1].bank_size
        if final_bank:
            lines.append(f"  final bank size: {final_bank}")
        shifts = sum(r.shift_detected for r in rows)
        if shifts:
            lines.append(f"  shifts detected: {shifts}")
    return "\n".join(lines) + "\n"


def write_report(records: list[MetricsRecord], out_dir: str) -> dict[str, str]:
    import os

    os.makedirs(out_dir, exist_ok=True)
    paths = {
        "metrics": os.path.join(out_dir, "metrics.csv"),
        "summary": os.path.join(out_dir, "summary.txt"),
    }
    with open(paths["metrics"], "w") as fh:
        fh.write(records_to_csv(records))
    with open(paths["summary"], "w") as fh:
        fh.write(summarize(records))
    return paths
