"""Domain-aware storage and retrieval of spectral codes.

Incoming batches are summarized by the channel-wise mean/variance of their
embedded patch tokens. An exponential moving average tracks the current
domain; when a fresh descriptor drifts beyond a threshold from the EMA, the
finished domain's (descriptor, code) pair is stored and the nearest stored
code is loaded as the new starting point.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import spectral
from .spectral import SpectralCode, _ByteReader
from .tensor import Tensor

VAR_FLOOR = 1e-8
_BANK_MAGIC = b"SPECTRALBANK 1\n"


class BankFormatError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte {offset})")
        self.offset = offset


@dataclass(frozen=True)
class DomainDescriptor:
    """Per-channel Gaussian summary (mean, population variance) of patch tokens."""

    mean: np.ndarray
    var: np.ndarray

    @property
    def channels(self) -> int:
        return self.mean.shape[0]

    def copy(self) -> "DomainDescriptor":
        return DomainDescriptor(self.mean.copy(), self.var.copy())


def descriptor_from_tokens(tokens) -> DomainDescriptor:
    """Channel-wise mean/variance over all of a batch's patch tokens.

    Accepts a (B, T, C) tensor or array; needs at least two token vectors.
    """
    data = tokens.data if isinstance(tokens, Tensor) else np.asarray(tokens)
    if data.ndim != 3:
        raise ValueError(f"expected tokens shaped (B, T, C), got {data.shape}")
    flat = data.reshape(-1, data.shape[-1])
    if flat.shape[0] < 2:
        raise ValueError("descriptor needs at least 2 token vectors")
    return DomainDescriptor(flat.mean(axis=0), flat.var(axis=0))


def descriptor_distance(a: DomainDescriptor, b: DomainDescriptor) -> float:
    """Symmetric KL between per-channel Gaussians, averaged over channels.

    KL(N(m1,s1) || N(m2,s2)) = 0.5 (s1/s2 + (m2-m1)^2/s2 - 1 + ln(s2/s1)),
    with variances floored at 1e-8 so constant channels stay finite.
    """
    if a.channels != b.channels:
        raise ValueError(f"channel mismatch: {a.channels} vs {b.channels}")
    s1 = np.maximum(a.var, VAR_FLOOR)
    s2 = np.maximum(b.var, VAR_FLOOR)
    dmean = (b.mean - a.mean) ** 2
    kl_ab = 0.5 * (s1 / s2 + dmean / s2 - 1.0 + np.log(s2 / s1))
    kl_ba = 0.5 * (s2 / s1 + dmean / s1 - 1.0 + np.log(s1 / s2))
    return float((kl_ab + kl_ba).mean())


@dataclass
class BankEntry:
    descriptor: DomainDescriptor
    code: SpectralCode
    label: str


@dataclass
class ObserveResult:
    shift: bool
    distance: float
    stored_index: int | None = None
    retrieved_index: int | None = None


@dataclass
class DomainBank:
    """Append-only store of (descriptor, spectral code) pairs with shift state."""

    entries: list[BankEntry]
    alpha: float = 0.8
    tau: float = 0.05
    ema: DomainDescriptor | None = None
    step: int = 0

    @classmethod
    def initialize(
        cls,
        source_descriptor: DomainDescriptor,
        source_code: SpectralCode,
        alpha: float = 0.8,
        tau: float = 0.05,
    ) -> "DomainBank":
        if not 0.0 <= alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")
        if tau <= 0.0:
            raise ValueError("tau must be positive")
        entry = BankEntry(source_descriptor.copy(), source_code, "source")
        return cls(entries=[entry], alpha=alpha, tau=tau)

    def __len__(self) -> int:
        return len(self.entries)

    def ema_update(self, current: DomainDescriptor) -> DomainDescriptor:
        """Blend the current descriptor into the running one; first call copies."""
        if self.ema is None:
            self.ema = current.copy()
        else:
            a = self.alpha
            self.ema = DomainDescriptor(
                a * self.ema.mean + (1.0 - a) * current.mean,
                a * self.ema.var + (1.0 - a) * current.var,
            )
        return self.ema

    def add_entry(self, descriptor: DomainDescriptor, code: SpectralCode, label: str) -> int:
        if self.entries and code.layer_table() != self.entries[0].code.layer_table():
            raise ValueError("code layer table does not match the bank's existing entries")
        self.entries.append(BankEntry(descriptor.copy(), code, label))
        return len(self.entries) - 1

    def nearest_entry(self, descriptor: DomainDescriptor) -> int:
        """Index of the stored entry closest to the descriptor, lowest index on ties."""
        distances = [descriptor_distance(descriptor, e.descriptor) for e in self.entries]
        return int(np.argmin(distances))

    def observe(self, current: DomainDescriptor, model, label: str = "") -> ObserveResult:
        """Shift detection for one batch descriptor.

        Within threshold: the EMA absorbs the descriptor. Beyond it: the
        stabilized EMA is stored with the model's current code, the nearest
        stored code is loaded into the model, and the EMA restarts from the
        current descriptor.
        """
        self.step += 1
        if self.ema is None:
            self.ema_update(current)
            return ObserveResult(shift=False, distance=0.0)

        dist = descriptor_distance(current, self.ema)
        if dist <= self.tau:
            self.ema_update(current)
            return ObserveResult(shift=False, distance=dist)

        stored = self.add_entry(
            self.ema, spectral.extract_code(model), label or f"shift-{self.step}"
        )
        retrieved = self.nearest_entry(current)
        spectral.load_code(model, self.entries[retrieved].code)
        self.ema = current.copy()
        return ObserveResult(
            shift=True, distance=dist, stored_index=stored, retrieved_index=retrieved
        )

    def distance_matrix(self) -> np.ndarray:
        k = len(self.entries)
        out = np.zeros((k, k))
        for i in range(k):
            for j in range(i + 1, k):
                d = descriptor_distance(self.entries[i].descriptor, self.entries[j].descriptor)
                out[i, j] = out[j, i] = d
        return out

    # -- persistence -------------------------------------------------------------

    def to_bytes(self) -> bytes:
        if not self.entries:
            raise ValueError("cannot persist an empty bank")
        channels = self.entries[0].descriptor.channels
        table = self.entries[0].code.layer_table()
        header = [
            _BANK_MAGIC,
            f"alpha {float(self.alpha).hex()}\n".encode(),
            f"tau {float(self.tau).hex()}\n".encode(),
            f"step {self.step}\n".encode(),
            f"channels {channels}\n".encode(),
            f"layers {len(table)}\n".encode(),
        ]
        for lid, rank in table:
            header.append(f"{lid} {rank}\n".encode())
        header.append(f"ema {int(self.ema is not None)}\n".encode())
        header.append(f"entries {len(self.entries)}\n".encode())
        for entry in self.entries:
            if any(ch.isspace() for ch in entry.label) or not entry.label:
                raise ValueError(f"entry label {entry.label!r} must be non-empty without whitespace")
            header.append(f"{entry.label}\n".encode())
        header.append(b"end\n")

        body = bytearray()
        if self.ema is not None:
            body += np.asarray(self.ema.mean, dtype="<f8").tobytes()
            body += np.asarray(self.ema.var, dtype="<f8").tobytes()
        for entry in self.entries:
            body += np.asarray(entry.descriptor.mean, dtype="<f8").tobytes()
            body += np.asarray(entry.descriptor.var, dtype="<f8").tobytes()
            for _, sig in entry.code.per_layer:
                body += np.asarray(sig, dtype="<f8").tobytes()
        return b"".join(header) + bytes(body)

    def save(self, path: str) -> None:
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    @classmethod
    def from_bytes(cls, raw: bytes) -> "DomainBank":
        reader = _ByteReader(raw)
        try:
            reader.expect(_BANK_MAGIC)
            alpha = float.fromhex(reader.line().split()[1])
            tau = float.fromhex(reader.line().split()[1])
            step = reader.int_field("step")
            channels = reader.int_field("channels")
            n_layers = reader.int_field("layers")
            table = [reader.id_rank_line() for _ in range(n_layers)]
            has_ema = reader.int_field("ema")
            n_entries = reader.int_field("entries")
            labels = [reader.line() for _ in range(n_entries)]
            reader.expect(b"end\n")

            ema = None
            if has_ema:
                ema = DomainDescriptor(reader.float64(channels), reader.float64(channels))
            entries = []
            for label in labels:
                desc = DomainDescriptor(reader.float64(channels), reader.float64(channels))
                per_layer = tuple((lid, reader.float64(rank)) for lid, rank in table)
                entries.append(BankEntry(desc, SpectralCode(per_layer), label))
            reader.done()
        except spectral.SpectralCodeFormatError as exc:
            raise BankFormatError(str(exc.args[0]).rsplit(" (at byte", 1)[0], exc.offset) from None
        except (IndexError, ValueError) as exc:
            raise BankFormatError(f"malformed header: {exc}", reader.pos) from None
        return cls(entries=entries, alpha=alpha, tau=tau, ema=ema, step=step)

    @classmethod
    def load(cls, path: str) -> "DomainBank":
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())
