"""Spectral factorization of linear layers.

A weight matrix is decomposed once, offline, into frozen orthonormal factors
and a trainable vector of singular values. Adaptation touches only the
singular values; the collection of those vectors across a model (its
"spectral code") is the unit stored and retrieved by the domain bank.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import Tensor

JACOBI_TOL = 1e-12
JACOBI_MAX_SWEEPS = 60

_CODE_MAGIC = b"SPECTRALCODE 1\n"


class ConvergenceError(RuntimeError):
    """Jacobi sweeps exhausted before the off-diagonal target was met."""

    def __init__(self, sweeps: int, residual: float):
        super().__init__(
            f"one-sided Jacobi did not converge in {sweeps} sweeps "
            f"(achieved off-diagonal residual {residual:.3e})"
        )
        self.sweeps = sweeps
        self.residual = residual


def _round_robin_rounds(n: int) -> list[tuple[np.ndarray, np.ndarray]]:
    """Tournament schedule: n-1 rounds of disjoint index pairs covering all (i, j)."""
    players: list[int | None] = list(range(n))
    if n % 2 == 1:
        players.append(None)
    m = len(players)
    rounds = []
    for _ in range(m - 1):
        left, right = [], []
        for i in range(m // 2):
            a, b = players[i], players[m - 1 - i]
            if a is not None and b is not None:
                left.append(a)
                right.append(b)
        rounds.append((np.array(left, dtype=np.intp), np.array(right, dtype=np.intp)))
        players = [players[0], players[-1]] + players[1:-1]
    return rounds


def jacobi_svd(
    w: np.ndarray,
    tol: float = JACOBI_TOL,
    max_sweeps: int = JACOBI_MAX_SWEEPS,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """One-sided Jacobi SVD: w = u @ diag(s) @ v.T with r = min(w.shape).

    Columns of the working matrix are rotated pairwise until every normalized
    off-diagonal inner product falls below `tol` (or the sweep cap trips).
    Singular values come out non-negative and sorted non-increasing; the sign
    of each column pair is fixed by forcing the largest-magnitude entry of
    u_i non-negative.
    """
    w = np.asarray(w, dtype=np.float64)
    if w.ndim != 2:
        raise ValueError(f"expected a matrix, got shape {w.shape}")
    if not np.isfinite(w).all():
        raise ValueError("matrix contains non-finite entries")
    m, n = w.shape
    if m < n:
        u, s, v = jacobi_svd(w.T, tol=tol, max_sweeps=max_sweeps)
        return v, s, u

    b = w.copy()
    v = np.eye(n)
    rounds = _round_robin_rounds(n)

    off_max = 0.0
    for _ in range(max_sweeps):
        off_max = 0.0
        for left, right in rounds:
            bi = b[:, left]
            bj = b[:, right]
            p = np.einsum("ki,ki->i", bi, bj)
            q = np.einsum("ki,ki->i", bi, bi)
            r = np.einsum("ki,ki->i", bj, bj)
            scale = np.sqrt(q * r)
            rel = np.divide(np.abs(p), scale, out=np.zeros_like(p), where=scale > 0.0)
            round_max = float(rel.max()) if rel.size else 0.0
            off_max = max(off_max, round_max)
            hot = rel > tol
            if not hot.any():
                continue
            ph, qh, rh = p[hot], q[hot], r[hot]
            tau = (rh - qh) / (2.0 * ph)
            t = np.where(tau >= 0.0, 1.0, -1.0) / (np.abs(tau) + np.sqrt(1.0 + tau * tau))
            c = 1.0 / np.sqrt(1.0 + t * t)
            s_ = c * t
            il, jl = left[hot], right[hot]
            bi_h, bj_h = b[:, il], b[:, jl]
            b[:, il] = c * bi_h - s_ * bj_h
            b[:, jl] = s_ * bi_h + c * bj_h
            vi_h, vj_h = v[:, il], v[:, jl]
            v[:, il] = c * vi_h - s_ * vj_h
            v[:, jl] = s_ * vi_h + c * vj_h
        if off_max <= tol:
            break
    else:
        raise ConvergenceError(max_sweeps, off_max)

    sigma = np.linalg.norm(b, axis=0)
    order = np.argsort(-sigma, kind="stable")
    sigma = sigma[order]
    b = b[:, order]
    v = v[:, order]

    u = np.zeros((m, n))
    tiny = np.finfo(np.float64).eps * max(m, n) * (sigma[0] if sigma.size else 0.0)
    for i in range(n):
        if sigma[i] > tiny:
            u[:, i] = b[:, i] / sigma[i]
        else:
            sigma[i] = 0.0
            u[:, i] = _complete_column(u[:, :i])

    # sign convention: largest-magnitude entry of each u_i is non-negative
    for i in range(n):
        k = int(np.argmax(np.abs(u[:, i])))
        if u[k, i] < 0.0:
            u[:, i] = -u[:, i]
            v[:, i] = -v[:, i]
    return u, sigma, v


def _complete_column(existing: np.ndarray) -> np.ndarray:
    """Deterministic unit vector orthogonal to the given orthonormal columns."""
    m = existing.shape[0]
    for k in range(m):
        cand = np.zeros(m)
        cand[k] = 1.0
        if existing.shape[1]:
            cand = cand - existing @ (existing.T @ cand)
        norm = np.linalg.norm(cand)
        if norm > 0.5:
            return cand / norm
    raise RuntimeError("failed to complete an orthonormal basis")


class SpectralLayer:
    """A linear layer factored as U diag(sigma) V^T with frozen U, V, bias.

    Only `sigma` carries gradients. `mask` marks which singular values an
    optimizer may touch; masked-out entries must stay bit-identical across
    adaptation steps.
    """

    def __init__(
        self,
        layer_id: str,
        u: np.ndarray,
        sigma: np.ndarray,
        v: np.ndarray,
        bias: np.ndarray,
        mask: np.ndarray | None = None,
    ):
        if any(ch.isspace() for ch in layer_id) or not layer_id:
            raise ValueError(f"layer id {layer_id!r} must be non-empty without whitespace")
        self.layer_id = layer_id
        self.u = Tensor(np.array(u, dtype=np.float64))
        self.sigma = Tensor(np.array(sigma, dtype=np.float64), requires_grad=True)
        self.v = Tensor(np.array(v, dtype=np.float64))
        self._vt = Tensor(self.v.data.T.copy())
        self._ut = Tensor(self.u.data.T.copy())
        self.bias = Tensor(np.array(bias, dtype=np.float64))
        self.mask = np.ones(self.rank, dtype=bool) if mask is None else np.array(mask, dtype=bool)
        if self.mask.shape != (self.rank,):
            raise ValueError(f"mask shape {self.mask.shape} does not match rank {self.rank}")

    @property
    def rank(self) -> int:
        return self.sigma.data.shape[0]

    @property
    def d_out(self) -> int:
        return self.u.data.shape[0]

    @property
    def d_in(self) -> int:
        return self.v.data.shape[0]

    def reconstruct(self) -> Tensor:
        """Effective weight U diag(sigma) V^T; gradient flows into sigma only."""
        return T.matmul(T.mul(self.u, self.sigma), self._vt)

    def project(self, x: Tensor) -> Tensor:
        """x @ V: per-expert input projections, shared by apply() and probes."""
        if x.shape[-1] != self.d_in:
            raise ValueError(
                f"layer {self.layer_id}: input last axis {x.shape[-1]} != d_in {self.d_in}"
            )
        return T.matmul(x, self.v)

    def finish(self, projection: Tensor) -> Tensor:
        return T.add(T.matmul(T.mul(projection, self.sigma), self._ut), self.bias)

    def apply(self, x: Tensor) -> Tensor:
        """(U diag(sigma) V^T) x + bias over the last axis of x."""
        return self.finish(self.project(x))

    def set_mask(self, strategy: str, r_pct: float) -> None:
        """Mark ceil(r_pct% of rank) entries trainable.

        `top` / `bottom` pick by singular-value magnitude as ordered at
        decomposition time (entries are stored sorted non-increasing, so
        positions are the ordering).
        """
        if strategy not in ("top", "bottom", "all"):
            raise ValueError(f"unknown mask strategy {strategy!r}")
        if strategy == "all":
            self.mask = np.ones(self.rank, dtype=bool)
            return
        if not 0.0 < r_pct <= 100.0:
            raise ValueError(f"mask percentage must be in (0, 100], got {r_pct}")
        k = math.ceil(r_pct / 100.0 * self.rank)
        mask = np.zeros(self.rank, dtype=bool)
        if strategy == "top":
            mask[:k] = True
        else:
            mask[self.rank - k:] = True
        self.mask = mask


def decompose(w: np.ndarray, bias: np.ndarray, layer_id: str = "layer") -> SpectralLayer:
    """Factor a dense weight matrix into a SpectralLayer."""
    w = np.asarray(w, dtype=np.float64)
    bias = np.asarray(bias, dtype=np.float64)
    if not np.isfinite(bias).all():
        raise ValueError("bias contains non-finite entries")
    if bias.shape != (w.shape[0],):
        raise ValueError(f"bias shape {bias.shape} does not match d_out {w.shape[0]}")
    u, s, v = jacobi_svd(w)
    return SpectralLayer(layer_id, u, s, v, bias)


@dataclass(frozen=True, eq=False)
class SpectralCode:
    """Ordered (layer id, singular values) snapshot across a model."""

    per_layer: tuple[tuple[str, np.ndarray], ...] = field(default_factory=tuple)

    def scalar_count(self) -> int:
        return sum(sig.size for _, sig in self.per_layer)

    def layer_table(self) -> tuple[tuple[str, int], ...]:
        return tuple((lid, sig.size) for lid, sig in self.per_layer)

    def to_bytes(self) -> bytes:
        header = [_CODE_MAGIC, f"layers {len(self.per_layer)}\n".encode()]
        payload = []
        for lid, sig in self.per_layer:
            header.append(f"{lid} {sig.size}\n".encode())
            payload.append(np.asarray(sig, dtype="<f8").tobytes())
        header.append(b"end\n")
        return b"".join(header) + b"".join(payload)

    @classmethod
    def from_bytes(cls, raw: bytes) -> "SpectralCode":
        reader = _ByteReader(raw)
        reader.expect(_CODE_MAGIC)
        n = reader.int_field("layers")
        table = []
        for _ in range(n):
            lid, rank = reader.id_rank_line()
            table.append((lid, rank))
        reader.expect(b"end\n")
        per_layer = []
        for lid, rank in table:
            per_layer.append((lid, reader.float64(rank)))
        reader.done()
        return cls(per_layer=tuple(per_layer))


def codes_identical(a: SpectralCode, b: SpectralCode) -> bool:
    return a.layer_table() == b.layer_table() and all(
        np.array_equal(sa, sb) for (_, sa), (_, sb) in zip(a.per_layer, b.per_layer)
    )


def extract_code(model) -> SpectralCode:
    """Deep-copy the singular values of every spectral layer in the model."""
    per_layer = tuple(
        (layer.layer_id, layer.sigma.data.copy()) for layer in model.spectral_layers()
    )
    ids = [lid for lid, _ in per_layer]
    if len(set(ids)) != len(ids):
        raise ValueError(f"duplicate spectral layer ids: {ids}")
    return SpectralCode(per_layer=per_layer)


def load_code(model, code: SpectralCode) -> None:
    """Overwrite the model's singular values from a code, id by id."""
    layers = model.spectral_layers()
    if len(layers) != len(code.per_layer):
        raise ValueError(
            f"code has {len(code.per_layer)} layers, model has {len(layers)}"
        )
    for layer, (lid, sig) in zip(layers, code.per_layer):
        if layer.layer_id != lid:
            raise ValueError(f"layer id mismatch: model {layer.layer_id!r} vs code {lid!r}")
        if layer.rank != sig.size:
            raise ValueError(
                f"layer {lid!r}: code rank {sig.size} does not match model rank {layer.rank}"
            )
        layer.sigma.data[...] = sig


class SpectralCodeFormatError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte {offset})")
        self.offset = offset


class _ByteReader:
    """Sequential parser that reports the byte offset of any malformation."""

    def __init__(self, raw: bytes):
        self.raw = raw
        self.pos = 0

    def fail(self, message: str):
        raise SpectralCodeFormatError(message, self.pos)

    def expect(self, token: bytes) -> None:
        if self.raw[self.pos : self.pos + len(token)] != token:
            self.fail(f"expected {token!r}")
        self.pos += len(token)

    def line(self) -> str:
        end = self.raw.find(b"\n", self.pos)
        if end < 0:
            self.fail("unterminated header line")
        text = self.raw[self.pos : end]
        self.pos = end + 1
        try:
            return text.decode("ascii")
        except UnicodeDecodeError:
            self.fail("non-ascii header line")

    def int_field(self, name: str) -> int:
        parts = self.line().split()
        if len(parts) != 2 or parts[0] != name or not parts[1].isdigit():
            self.fail(f"malformed {name} line")
        return int(parts[1])

    def id_rank_line(self) -> tuple[str, int]:
        parts = self.line().split()
        if len(parts) != 2 or not parts[1].isdigit():
            self.fail("malformed layer line")
        return parts[0], int(parts[1])

    def float64(self, count: int) -> np.ndarray:
        nbytes = count * 8
        if self.pos + nbytes > len(self.raw):
            self.fail(f"payload truncated, needed {nbytes} bytes")
        out = np.frombuffer(self.raw, dtype="<f8", count=count, offset=self.pos).copy()
        self.pos += nbytes
        return out

    def done(self) -> None:
        if self.pos != len(self.raw):
            self.fail(f"{len(self.raw) - self.pos} trailing bytes")
