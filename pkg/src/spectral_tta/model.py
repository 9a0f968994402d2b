"""A small vision transformer whose linear layers can be spectrally factored.

The model is built dense, trained on the source task, then `decompose()`
replaces the configured target layers with spectral factors. The pristine
dense weights stay in the model alongside the factors (they are part of the
deployed artifact and of the parameter inventory); the forward pass uses the
factored path once a layer is decomposed.
"""

from __future__ import annotations

import io
import math
from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np

from . import spectral, tensor as T
from .spectral import SpectralLayer
from .tensor import Tensor

SEPARATE_TARGETS = ("attn_q", "attn_k", "attn_v", "attn_proj", "mlp_fc1", "mlp_fc2")
FUSED_TARGETS = ("attn_qkv", "attn_proj", "mlp_fc1", "mlp_fc2")

_CKPT_MAGIC = b"SPECTRALVIT 1\n"


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ViTConfig:
    image_size: int = 32
    patch_size: int = 8
    channels: int = 3
    embed_dim: int = 64
    depth: int = 4
    heads: int = 4
    mlp_ratio: int = 4
    num_classes: int = 10
    spectral_targets: tuple[str, ...] = SEPARATE_TARGETS
    fused_qkv: bool = False
    frozen_tail_blocks: int = 1
    dm_tail_blocks: int = 1

    def validate(self) -> None:
        if self.image_size <= 0 or self.image_size % self.patch_size != 0:
            raise ConfigError("image_size: must be a positive multiple of patch_size")
        if self.embed_dim <= 0 or self.embed_dim % self.heads != 0:
            raise ConfigError("embed_dim: must be a positive multiple of heads")
        if self.channels <= 0:
            raise ConfigError("channels: must be positive")
        if self.depth < 1:
            raise ConfigError("depth: must be at least 1")
        if self.mlp_ratio < 1:
            raise ConfigError("mlp_ratio: must be at least 1")
        if self.num_classes < 2:
            raise ConfigError("num_classes: must be at least 2")
        if self.frozen_tail_blocks < 0 or self.frozen_tail_blocks + 1 > self.depth:
            raise ConfigError("frozen_tail_blocks: needs frozen_tail_blocks + 1 <= depth")
        if not 0 <= self.dm_tail_blocks <= self.depth:
            raise ConfigError("dm_tail_blocks: must be within [0, depth]")
        allowed = FUSED_TARGETS if self.fused_qkv else SEPARATE_TARGETS
        bad = [t for t in self.spectral_targets if t not in allowed]
        if bad:
            raise ConfigError(f"spectral_targets: unknown for this attention mode: {bad}")
        if len(set(self.spectral_targets)) != len(self.spectral_targets):
            raise ConfigError("spectral_targets: duplicates")

    @property
    def num_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    @property
    def tokens(self) -> int:
        return self.num_patches + 1

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.heads

    @property
    def mlp_hidden(self) -> int:
        return self.embed_dim * self.mlp_ratio

    @property
    def patch_dim(self) -> int:
        return self.channels * self.patch_size * self.patch_size


@dataclass
class AlignmentStats:
    """Per-expert mean and spread of normalized input alignments for one layer."""

    layer_id: str
    mean: Tensor  # (rank,)
    std: Tensor  # (rank,)
    count: int  # N = batch * tokens


@dataclass
class ForwardResult:
    logits: Tensor
    alignment: list[AlignmentStats] = field(default_factory=list)
    embedded: Tensor | None = None
    layer_inputs: dict[str, np.ndarray] = field(default_factory=dict)


class LinearSlot:
    """A linear layer that is dense until decomposed, spectral afterwards."""

    def __init__(self, name: str, weight: Tensor, bias: Tensor):
        self.name = name
        self.weight = weight
        self.bias = bias
        self.layer: SpectralLayer | None = None

    @property
    def decomposed(self) -> bool:
        return self.layer is not None

    def decompose(self) -> None:
        layer = spectral.decompose(self.weight.data, self.bias.data, self.name)
        layer.bias = self.bias  # shared; stored once
        self.layer = layer

    def attach_spectral(self, u: np.ndarray, sigma: np.ndarray, v: np.ndarray) -> None:
        layer = SpectralLayer(self.name, u, sigma, v, self.bias.data)
        layer.bias = self.bias
        self.layer = layer

    def apply(self, x: Tensor) -> Tensor:
        if self.layer is not None:
            return self.layer.apply(x)
        return T.add(T.matmul(x, T.transpose(self.weight, (1, 0))), self.bias)


def alignment_statistics(layer_id: str, x_flat: Tensor, projection: Tensor) -> AlignmentStats:
    """Mean/Std over tokens of a = (v_i . x_n) / max(||x_n||, 1e-6), per expert."""
    norms = T.clamp_min(T.l2_norm(x_flat, keepdims=True), T.NORM_EPS)
    a = T.div(projection, norms)
    mean = T.tensor_mean(a, axis=0)
    centered = T.sub(a, mean)
    std = T.sqrt(T.tensor_mean(T.mul(centered, centered), axis=0))
    return AlignmentStats(layer_id, mean, std, x_flat.shape[0])


def patchify(images: Tensor, patch_size: int) -> Tensor:
    """(B, C, H, W) -> (B, patches, C*p*p), row-major patch order."""
    b, c, h, w = images.shape
    hp, wp = h // patch_size, w // patch_size
    x = T.reshape(images, (b, c, hp, patch_size, wp, patch_size))
    x = T.transpose(x, (0, 2, 4, 1, 3, 5))
    return T.reshape(x, (b, hp * wp, c * patch_size * patch_size))


class SpectralViT:
    """Pre-norm ViT with a class token and learned position embeddings."""

    def __init__(self, config: ViTConfig, seed: int = 0):
        config.validate()
        self.config = config
        self._params: dict[str, Tensor] = {}
        rng = np.random.default_rng(seed)
        c = config

        self.patch_embed = self._linear(rng, "patch_embed", c.embed_dim, c.patch_dim)
        self.cls_token = self._param("cls_token", rng.normal(0.0, 0.02, (1, 1, c.embed_dim)))
        self.pos_embed = self._param("pos_embed", rng.normal(0.0, 0.02, (c.tokens, c.embed_dim)))

        self.blocks: list[dict] = []
        for i in range(c.depth):
            prefix = f"block{i}"
            block = {
                "ln1_gamma": self._param(f"{prefix}.ln1.gamma", np.ones(c.embed_dim)),
                "ln1_beta": self._param(f"{prefix}.ln1.beta", np.zeros(c.embed_dim)),
                "ln2_gamma": self._param(f"{prefix}.ln2.gamma", np.ones(c.embed_dim)),
                "ln2_beta": self._param(f"{prefix}.ln2.beta", np.zeros(c.embed_dim)),
            }
            if c.fused_qkv:
                block["attn_qkv"] = self._slot(rng, f"{prefix}.attn_qkv", 3 * c.embed_dim, c.embed_dim)
            else:
                for name in ("attn_q", "attn_k", "attn_v"):
                    block[name] = self._slot(rng, f"{prefix}.{name}", c.embed_dim, c.embed_dim)
            block["attn_proj"] = self._slot(rng, f"{prefix}.attn_proj", c.embed_dim, c.embed_dim)
            block["mlp_fc1"] = self._slot(rng, f"{prefix}.mlp_fc1", c.mlp_hidden, c.embed_dim)
            block["mlp_fc2"] = self._slot(rng, f"{prefix}.mlp_fc2", c.embed_dim, c.mlp_hidden)
            self.blocks.append(block)

        self.final_gamma = self._param("final_ln.gamma", np.ones(c.embed_dim))
        self.final_beta = self._param("final_ln.beta", np.zeros(c.embed_dim))
        self.head = self._linear(rng, "head", c.num_classes, c.embed_dim)
        self.decomposed = False

    # -- construction helpers -------------------------------------------------

    def _param(self, name: str, data: np.ndarray) -> Tensor:
        t = Tensor(np.asarray(data, dtype=np.float64), requires_grad=True)
        self._params[name] = t
        return t

    def _linear(self, rng, name: str, d_out: int, d_in: int) -> LinearSlot:
        limit = math.sqrt(6.0 / (d_in + d_out))
        w = self._param(f"{name}.weight", rng.uniform(-limit, limit, (d_out, d_in)))
        b = self._param(f"{name}.bias", np.zeros(d_out))
        return LinearSlot(name, w, b)

    def _slot(self, rng, name: str, d_out: int, d_in: int) -> LinearSlot:
        return self._linear(rng, name, d_out, d_in)

    # -- parameter bookkeeping --------------------------------------------------

    def named_parameters(self) -> dict[str, Tensor]:
        """Every scalar-carrying array in the model, in construction order."""
        out = dict(self._params)
        for block in self.blocks:
            for slot in self._block_slots(block):
                if slot.decomposed:
                    out[f"{slot.name}.u"] = slot.layer.u
                    out[f"{slot.name}.sigma"] = slot.layer.sigma
                    out[f"{slot.name}.v"] = slot.layer.v
        return out

    def total_parameter_count(self) -> int:
        return sum(t.size for t in self.named_parameters().values())

    def set_all_trainable(self, flag: bool) -> None:
        for t in self._params.values():
            t.requires_grad = flag

    def _block_slots(self, block: dict) -> list[LinearSlot]:
        names = (
            ("attn_qkv",) if self.config.fused_qkv else ("attn_q", "attn_k", "attn_v")
        ) + ("attn_proj", "mlp_fc1", "mlp_fc2")
        return [block[n] for n in names]

    def _target_slots(self) -> list[LinearSlot]:
        slots = []
        for block in self.blocks:
            for slot in self._block_slots(block):
                if slot.name.split(".", 1)[1] in self.config.spectral_targets:
                    slots.append(slot)
        return slots

    def spectral_layers(self) -> list[SpectralLayer]:
        return [slot.layer for slot in self._target_slots() if slot.decomposed]

    def decompose(self) -> None:
        """Factor every target layer once; freezes all dense parameters."""
        for slot in self._target_slots():
            if not slot.decomposed:
                slot.decompose()
        self.set_all_trainable(False)
        self.decomposed = True

    def trainable_sigmas(self) -> list[tuple[str, Tensor, np.ndarray]]:
        """(layer id, sigma, mask) for spectral layers outside the frozen tail."""
        cutoff = self.config.depth - self.config.frozen_tail_blocks
        out = []
        for layer in self.spectral_layers():
            if self._block_index(layer.layer_id) < cutoff:
                out.append((layer.layer_id, layer.sigma, layer.mask))
        return out

    def trainable_scalar_count(self) -> int:
        return sum(int(mask.sum()) for _, _, mask in self.trainable_sigmas())

    def dm_layer_ids(self) -> list[str]:
        """Spectral layers inside the last dm_tail_blocks blocks."""
        start = self.config.depth - self.config.dm_tail_blocks
        return [
            layer.layer_id
            for layer in self.spectral_layers()
            if self._block_index(layer.layer_id) >= start
        ]

    def set_masks(self, strategy: str, r_pct: float) -> None:
        for layer in self.spectral_layers():
            layer.set_mask(strategy, r_pct)

    @staticmethod
    def _block_index(layer_id: str) -> int:
        return int(layer_id.split(".", 1)[0].removeprefix("block"))

    # -- forward ------------------------------------------------------------------

    def embed_tokens(self, images: Tensor) -> Tensor:
        """Patch tokens right after patch + position embedding (class token excluded)."""
        c = self.config
        tok = self.patch_embed.apply(patchify(images, c.patch_size))
        return T.add(tok, T.narrow(self.pos_embed, 0, 1, c.num_patches))

    def forward(
        self,
        images: Tensor,
        capture_alignment: Sequence[str] = (),
        capture_embedding: bool = False,
        capture_layer_inputs: bool = False,
    ) -> ForwardResult:
        c = self.config
        if images.ndim != 4 or images.shape[1:] != (c.channels, c.image_size, c.image_size):
            raise ValueError(
                f"expected images of shape (B, {c.channels}, {c.image_size}, {c.image_size}),"
                f" got {images.shape}"
            )
        capture = tuple(capture_alignment)
        spectral_ids = {layer.layer_id for layer in self.spectral_layers()}
        unknown = [name for name in capture if name not in spectral_ids]
        if unknown:
            raise ValueError(f"capture set references non-spectral layers: {unknown}")

        result = ForwardResult(logits=None)
        keep_inputs = bool(capture_layer_inputs)
        b = images.shape[0]

        tok = self.patch_embed.apply(patchify(images, c.patch_size))
        cls = T.broadcast_to(self.cls_token, (b, 1, c.embed_dim))
        h = T.add(T.concat([cls, tok], axis=1), self.pos_embed)
        if capture_embedding:
            result.embedded = T.narrow(h, 1, 1, c.num_patches)

        for block in self.blocks:
            h = self._block_forward(block, h, capture, result, keep_inputs)

        h = T.layer_norm(h, self.final_gamma, self.final_beta)
        cls_out = T.reshape(T.narrow(h, 1, 0, 1), (b, c.embed_dim))
        result.logits = self.head.apply(cls_out)
        return result

    def _apply_slot(
        self, slot: LinearSlot, x: Tensor, capture, result: ForwardResult, keep_inputs: bool
    ) -> Tensor:
        if slot.decomposed and slot.name in capture:
            layer = slot.layer
            n = int(np.prod(x.shape[:-1]))
            x_flat = T.reshape(x, (n, x.shape[-1]))
            projection = layer.project(x_flat)
            result.alignment.append(alignment_statistics(slot.name, x_flat, projection))
            if keep_inputs:
                result.layer_inputs[slot.name] = x_flat.data.copy()
            y = layer.finish(projection)
            return T.reshape(y, x.shape[:-1] + (layer.d_out,))
        return slot.apply(x)

    def _block_forward(
        self, block: dict, h: Tensor, capture, result: ForwardResult, keep_inputs: bool = False
    ) -> Tensor:
        c = self.config
        b, t = h.shape[0], h.shape[1]
        normed = T.layer_norm(h, block["ln1_gamma"], block["ln1_beta"])
        if c.fused_qkv:
            qkv = self._apply_slot(block["attn_qkv"], normed, capture, result, keep_inputs)
            q = T.narrow(qkv, 2, 0, c.embed_dim)
            k = T.narrow(qkv, 2, c.embed_dim, c.embed_dim)
            v = T.narrow(qkv, 2, 2 * c.embed_dim, c.embed_dim)
        else:
            q = self._apply_slot(block["attn_q"], normed, capture, result, keep_inputs)
            k = self._apply_slot(block["attn_k"], normed, capture, result, keep_inputs)
            v = self._apply_slot(block["attn_v"], normed, capture, result, keep_inputs)

        def split(x):
            return T.transpose(T.reshape(x, (b, t, c.heads, c.head_dim)), (0, 2, 1, 3))

        qh, kh, vh = split(q), split(k), split(v)
        scores = T.mul(T.matmul(qh, T.transpose(kh, (0, 1, 3, 2))), 1.0 / math.sqrt(c.head_dim))
        ctx = T.matmul(T.softmax(scores), vh)
        merged = T.reshape(T.transpose(ctx, (0, 2, 1, 3)), (b, t, c.embed_dim))
        h = T.add(h, self._apply_slot(block["attn_proj"], merged, capture, result, keep_inputs))

        normed2 = T.layer_norm(h, block["ln2_gamma"], block["ln2_beta"])
        hidden = T.gelu(self._apply_slot(block["mlp_fc1"], normed2, capture, result, keep_inputs))
        return T.add(h, self._apply_slot(block["mlp_fc2"], hidden, capture, result, keep_inputs))

    # -- persistence ----------------------------------------------------------------

    def save(self, path: str) -> None:
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    def to_bytes(self) -> bytes:
        c = self.config
        head = io.BytesIO()
        head.write(_CKPT_MAGIC)
        head.write(b"config\n")
        for key in (
            "image_size patch_size channels embed_dim depth heads mlp_ratio num_classes "
            "frozen_tail_blocks dm_tail_blocks"
        ).split():
            head.write(f"{key} {getattr(c, key)}\n".encode())
        head.write(f"fused_qkv {int(c.fused_qkv)}\n".encode())
        head.write(f"spectral_targets {','.join(c.spectral_targets)}\n".encode())
        head.write(b"end-config\n")
        head.write(f"decomposed {int(self.decomposed)}\n".encode())
        params = self.named_parameters()
        head.write(f"tensors {len(params)}\n".encode())
        for name, t in params.items():
            dims = " ".join(str(d) for d in t.shape)
            head.write(f"{name} {t.ndim} {dims}\n".encode())
        head.write(b"end\n")
        body = b"".join(np.asarray(t.data, dtype="<f8").tobytes() for t in params.values())
        return head.getvalue() + body

    @classmethod
    def load(cls, path: str) -> "SpectralViT":
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())

    @classmethod
    def from_bytes(cls, raw: bytes) -> "SpectralViT":
        reader = spectral._ByteReader(raw)
        reader.expect(_CKPT_MAGIC)
        reader.expect(b"config\n")
        kv = {}
        while True:
            line = reader.line()
            if line == "end-config":
                break
            key, _, value = line.partition(" ")
            kv[key] = value
        try:
            config = ViTConfig(
                image_size=int(kv["image_size"]),
                patch_size=int(kv["patch_size"]),
                channels=int(kv["channels"]),
                embed_dim=int(kv["embed_dim"]),
                depth=int(kv["depth"]),
                heads=int(kv["heads"]),
                mlp_ratio=int(kv["mlp_ratio"]),
                num_classes=int(kv["num_classes"]),
                frozen_tail_blocks=int(kv["frozen_tail_blocks"]),
                dm_tail_blocks=int(kv["dm_tail_blocks"]),
                fused_qkv=bool(int(kv["fused_qkv"])),
                spectral_targets=tuple(t for t in kv["spectral_targets"].split(",") if t),
            )
        except (KeyError, ValueError) as exc:
            reader.fail(f"bad config section: {exc}")
        decomposed = reader.int_field("decomposed")
        count = reader.int_field("tensors")
        entries = []
        for _ in range(count):
            parts = reader.line().split()
            if len(parts) < 2:
                reader.fail("malformed tensor line")
            name, ndim = parts[0], int(parts[1])
            shape = tuple(int(d) for d in parts[2 : 2 + ndim])
            entries.append((name, shape))
        reader.expect(b"end\n")

        model = cls(config, seed=0)
        blobs = {}
        for name, shape in entries:
            flat = reader.float64(int(np.prod(shape)) if shape else 1)
            blobs[name] = flat.reshape(shape)
        reader.done()

        if decomposed:
            for slot in model._target_slots():
                for suffix in ("u", "sigma", "v"):
                    if f"{slot.name}.{suffix}" not in blobs:
                        raise ValueError(f"checkpoint marked decomposed but {slot.name}.{suffix} missing")
                slot.attach_spectral(
                    blobs.pop(f"{slot.name}.u"),
                    blobs.pop(f"{slot.name}.sigma"),
                    blobs.pop(f"{slot.name}.v"),
                )
            model.decomposed = True
            model.set_all_trainable(False)
        for name, t in model._params.items():
            if name not in blobs:
                raise ValueError(f"checkpoint missing tensor {name}")
            data = blobs.pop(name)
            if data.shape != t.shape:
                raise ValueError(f"tensor {name}: shape {data.shape} != expected {t.shape}")
            t.data = np.ascontiguousarray(data)
        # re-point spectral biases at the (possibly reassigned) slot bias tensors
        for slot in model._target_slots():
            if slot.decomposed:
                slot.layer.bias = slot.bias
        if blobs:
            raise ValueError(f"checkpoint has unknown tensors: {sorted(blobs)}")
        return model


def build(config: ViTConfig, seed: int) -> SpectralViT:
    return SpectralViT(config, seed=seed)
