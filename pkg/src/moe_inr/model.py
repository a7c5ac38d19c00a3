"""Mixture-of-experts INR: expert encoder, experts, manager encoder and manager head."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .nets import MLP, FourierFeatureMap, LayerSpec, block_specs, build_mlp, load_params, save_params, widths_specs

CONDITIONINGS = ("none", "max", "mean", "concatenate")
ACTIVATION_FAMILIES = ("sine", "softplus", "softplus_ff", "finer")


@dataclass(frozen=True)
class Block:
    """``width x layers``: in->width, ``layers`` x (width->width), width->out."""

    width: int = 128
    layers: int = 2

    @classmethod
    def parse(cls, value) -> "Block":
        if isinstance(value, Block):
            return value
        if isinstance(value, str):
            w, l = value.lower().split("x")
            return cls(int(w), int(l))
        if isinstance(value, dict):
            return cls(**value)
        w, l = value
        return cls(int(w), int(l))


@dataclass(frozen=True)
class MoeConfig:
    n_experts: int = 4
    in_dim: int = 2
    out_dim: int = 3
    encoder: Block = Block(128, 2)
    expert: Block = Block(128, 2)
    manager_encoder: Block = Block(128, 2)
    manager_head: Block = Block(128, 2)
    activation: str = "sine"
    conditioning: str = "concatenate"
    w0: float = 30.0
    first_w0: float | None = None
    ff_freqs: int = 128
    ff_sigma: float = 10.0
    finer_bias: float = 1.0

    def __post_init__(self):
        for name in ("encoder", "expert", "manager_encoder", "manager_head"):
            object.__setattr__(self, name, Block.parse(getattr(self, name)))
        self.validate()

    def validate(self) -> None:
        if self.n_experts < 1:
            raise ValueError("n_experts must be positive")
        if self.in_dim < 1 or self.out_dim < 1:
            raise ValueError("in_dim and out_dim must be positive")
        if self.conditioning not in CONDITIONINGS:
            raise ValueError(f"conditioning must be one of {CONDITIONINGS}")
        if self.activation not in ACTIVATION_FAMILIES:
            raise ValueError(f"activation must be one of {ACTIVATION_FAMILIES}")
        for b in (self.encoder, self.expert, self.manager_encoder, self.manager_head):
            if b.width < 1 or b.layers < 0:
                raise ValueError("block widths must be positive and layer counts non-negative")
        if self.conditioning in ("max", "mean") and self.encoder.width != self.manager_encoder.width:
            raise ValueError("max/mean conditioning needs equal encoder and manager-encoder widths")

    @property
    def head_in(self) -> int:
        if self.conditioning == "concatenate":
            return self.manager_encoder.width + self.encoder.width
        return self.manager_encoder.width

    def to_dict(self) -> dict:
        d = asdict(self)
        for name in ("encoder", "expert", "manager_encoder", "manager_head"):
            b = getattr(self, name)
            d[name] = f"{b.width}x{b.layers}"
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "MoeConfig":
        return cls(**d)

    # component layer specs -------------------------------------------------
    def _kw(self):
        return dict(activation=self.activation, w0=self.w0, finer_bias=self.finer_bias)

    def _coord_width(self) -> int:
        return 2 * self.ff_freqs if self.activation == "softplus_ff" else self.in_dim

    def encoder_specs(self) -> list[LayerSpec]:
        b = self.encoder
        return block_specs(self._coord_width(), b.width, b.layers, b.width, first=True,
                           linear_out=False, first_w0=self.first_w0, **self._kw())

    def expert_specs(self) -> list[LayerSpec]:
        b = self.expert
        return block_specs(self.encoder.width, b.width, b.layers, self.out_dim, first=False,
                           linear_out=True, **self._kw())

    def manager_encoder_specs(self) -> list[LayerSpec]:
        b = self.manager_encoder
        return block_specs(self._coord_width(), b.width, b.layers, b.width, first=True,
                           linear_out=False, first_w0=self.first_w0, **self._kw())

    def manager_head_specs(self) -> list[LayerSpec]:
        b = self.manager_head
        return block_specs(self.head_in, b.width, b.layers, self.n_experts, first=False,
                           linear_out=True, **self._kw())


def _count(specs: Sequence[LayerSpec]) -> int:
    return sum(s.n_params for s in specs)


def count_parameters(config: MoeConfig) -> int:
    """Exact trainable parameter count (fixed Fourier matrices excluded)."""
    return (_count(config.encoder_specs()) + config.n_experts * _count(config.expert_specs())
            + _count(config.manager_encoder_specs()) + _count(config.manager_head_specs()))


def component_counts(config: MoeConfig) -> dict[str, int]:
    return {
        "expert_encoder": _count(config.encoder_specs()),
        "experts": config.n_experts * _count(config.expert_specs()),
        "manager_encoder": _count(config.manager_encoder_specs()),
        "manager_head": _count(config.manager_head_specs()),
    }


class FixedRouter:
    """Constant routing from a coordinate -> label lookup (no trainable parameters)."""

    def __init__(self, lookup, n_experts: int):
        self.lookup = lookup
        self.n_experts = n_experts

    def probs(self, x: np.ndarray) -> np.ndarray:
        labels = self.lookup(np.asarray(x))
        return np.eye(self.n_experts)[labels].astype(ad.get_default_dtype())


class MoeModel:
    def __init__(self, config: MoeConfig, seed: int = 0):
        self.config = config
        self.seed = seed
        rng = np.random.default_rng(seed)
        ff_enc = ff_man = None
        if config.activation == "softplus_ff":
            ff_enc = FourierFeatureMap.sample(config.in_dim, config.ff_freqs, config.ff_sigma, seed=seed + 1)
            ff_man = FourierFeatureMap.sample(config.in_dim, config.ff_freqs, config.ff_sigma, seed=seed + 2)
        self.expert_encoder = build_mlp(config.encoder_specs(), rng, ff_enc)
        self.experts = [build_mlp(config.expert_specs(), rng) for _ in range(config.n_experts)]
        self.manager_encoder = build_mlp(config.manager_encoder_specs(), rng, ff_man)
        self.manager_head = build_mlp(config.manager_head_specs(), rng)
        self.router: FixedRouter | None = None

    # parameter groups -------------------------------------------------------
    def expert_encoder_params(self) -> list[Tensor]:
        return self.expert_encoder.parameters()

    def expert_params(self) -> list[Tensor]:
        return [p for e in self.experts for p in e.parameters()]

    def manager_params(self) -> list[Tensor]:
        return self.manager_encoder.parameters() + self.manager_head.parameters()

    def parameters(self) -> list[Tensor]:
        return self.expert_encoder_params() + self.expert_params() + self.manager_params()

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        out = []
        groups = [("expert_encoder", self.expert_encoder)]
        groups += [(f"expert{i}", e) for i, e in enumerate(self.experts)]
        groups += [("manager_encoder", self.manager_encoder), ("manager_head", self.manager_head)]
        for gname, mlp in groups:
            for li, layer in enumerate(mlp.layers):
                out.append((f"{gname}.{li}.weight", layer.weight))
                out.append((f"{gname}.{li}.bias", layer.bias))
        return out

    @property
    def n_params(self) -> int:
        return sum(p.size for p in self.parameters())

    # differentiable forward -------------------------------------------------
    def expert_latent(self, x) -> Tensor:
        return self.expert_encoder(x)

    def manager_input(self, x, latent: Tensor) -> Tensor:
        m = self.manager_encoder(x)
        cond = self.config.conditioning
        if cond == "none":
            return m
        if cond == "concatenate":
            return ad.concat([m, latent])
        if cond == "mean":
            return (m + latent) * 0.5
        # elementwise max(a, b) = (a + b + |a - b|) / 2
        return (m + latent + ad.absolute(m - latent)) * 0.5

    def manager_logits(self, x, latent: Tensor | None = None) -> Tensor:
        if latent is None:
            latent = self.expert_latent(x)
        return self.manager_head(self.manager_input(x, latent))

    def manager_probs(self, x, latent: Tensor | None = None) -> Tensor:
        if self.router is not None:
            return Tensor(self.router.probs(ad.as_tensor(x).value))
        return ad.softmax(self.manager_logits(x, latent))

    def experts_outputs(self, latent: Tensor) -> Tensor:
        return ad.stack_last([e(latent) for e in self.experts])

    def forward(self, x, detach_expert_path: bool = False, train_shared: bool = True) -> tuple[Tensor, Tensor]:
        """Training forward: (q of shape B x N, expert outputs B x N x out).

        ``detach_expert_path`` cuts the latent feeding the experts so gradients
        reach the expert encoder only through the manager. With
        ``train_shared=False`` encoder and manager run without recording.
        """
        if not train_shared:
            with ad.no_grad():
                latent = self.expert_latent(x)
                q = self.manager_probs(x, latent)
            return q, self.experts_outputs(latent)
        latent = self.expert_latent(x)
        q = self.manager_probs(x, latent)
        outs = self.experts_outputs(latent.detach() if detach_expert_path else latent)
        return q, outs

    # inference -------------------------------------------------------------
    def probs_array(self, x: np.ndarray, rowwise: bool = True) -> np.ndarray:
        if self.router is not None:
            return self.router.probs(x)
        latent = self.expert_encoder.forward_array(x, rowwise)
        m = self.manager_encoder.forward_array(x, rowwise)
        cond = self.config.conditioning
        if cond == "concatenate":
            h = np.concatenate([m, latent], axis=-1)
        elif cond == "mean":
            h = (m + latent) * 0.5
        elif cond == "max":
            h = (m + latent + np.abs(m - latent)) * 0.5
        else:
            h = m
        logits = self.manager_head.forward_array(h, rowwise)
        e = np.exp(logits - logits.max(axis=-1, keepdims=True))
        return e / e.sum(axis=-1, keepdims=True)

    def all_experts_array(self, x: np.ndarray, rowwise: bool = True) -> np.ndarray:
        latent = self.expert_encoder.forward_array(x, rowwise)
        return np.stack([e.forward_array(latent, rowwise) for e in self.experts], axis=1)

    def route_and_reconstruct(self, x, batch: int = 65536) -> tuple[np.ndarray, np.ndarray]:
        """Argmax routing; only the selected expert runs for each sample.

        Ties go to the lowest expert index (np.argmax semantics).
        """
        x = np.asarray(x.value if isinstance(x, Tensor) else x, dtype=ad.get_default_dtype())
        if x.ndim != 2 or x.shape[1] != self.config.in_dim:
            raise ad.ShapeError(f"expected (B, {self.config.in_dim}) coordinates, got {x.shape}")
        out = np.empty((x.shape[0], self.config.out_dim), dtype=x.dtype)
        idx = np.empty(x.shape[0], dtype=np.int64)
        for s in range(0, x.shape[0], batch):
            xs = x[s:s + batch]
            j = np.argmax(self.probs_array(xs), axis=-1)
            latent = self.expert_encoder.forward_array(xs, rowwise=True)
            o = out[s:s + batch]
            for e in np.unique(j):
                rows = np.nonzero(j == e)[0]
                o[rows] = self.experts[e].forward_array(latent[rows], rowwise=True)
            idx[s:s + batch] = j
        return out, idx

    # persistence -----------------------------------------------------------
    def save(self, path) -> None:
        save_params(path, self.named_parameters(),
                    {"kind": "moe", "config": self.config.to_dict(), "seed": self.seed})

    @classmethod
    def load(cls, path) -> "MoeModel":
        meta, arrays = load_params(path)
        model = cls(MoeConfig.from_dict(meta["config"]), seed=meta.get("seed", 0))
        for name, p in model.named_parameters():
            p.value[...] = arrays[name]
        return model


class PlainINR:
    """Single-MLP baseline that exposes the same train/eval surface as MoeModel.

    It behaves like a one-expert model with no manager: q is always [1].
    """

    def __init__(self, in_dim: int, out_dim: int, hidden_widths: Sequence[int], activation: str = "sine",
                 w0: float = 30.0, first_w0: float | None = None, ff_freqs: int = 128,
                 ff_sigma: float = 10.0, finer_bias: float = 1.0, seed: int = 0):
        self.hidden_widths = list(hidden_widths)
        self.activation = activation
        self.seed = seed
        self.spec_kwargs = dict(activation=activation, w0=w0, first_w0=first_w0, ff_freqs=ff_freqs,
                                ff_sigma=ff_sigma, finer_bias=finer_bias)
        ff = None
        coord = in_dim
        if activation == "softplus_ff":
            ff = FourierFeatureMap.sample(in_dim, ff_freqs, ff_sigma, seed=seed + 1)
            coord = ff.out_dim
        specs = widths_specs(coord, hidden_widths, out_dim, activation, w0, first_w0, finer_bias)
        self.net: MLP = build_mlp(specs, np.random.default_rng(seed), ff)
        self.in_dim = in_dim
        self.out_dim = out_dim
        self.router = None
        self.config = None

    n_experts = 1

    def parameters(self) -> list[Tensor]:
        return self.net.parameters()

    def expert_params(self) -> list[Tensor]:
        return self.parameters()

    def expert_encoder_params(self) -> list[Tensor]:
        return []

    def manager_params(self) -> list[Tensor]:
        return []

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        out = []
        for li, layer in enumerate(self.net.layers):
            out += [(f"net.{li}.weight", layer.weight), (f"net.{li}.bias", layer.bias)]
        return out

    @property
    def n_params(self) -> int:
        return self.net.n_params

    def forward(self, x, detach_expert_path: bool = False, train_shared: bool = True) -> tuple[Tensor, Tensor]:
        y = self.net(x)
        q = Tensor(np.ones((y.shape[0], 1)))
        return q, y.reshape(y.shape[0], 1, y.shape[1])

    def route_and_reconstruct(self, x, batch: int = 65536) -> tuple[np.ndarray, np.ndarray]:
        x = np.asarray(x.value if isinstance(x, Tensor) else x, dtype=ad.get_default_dtype())
        out = np.concatenate([self.net.forward_array(x[s:s + batch], rowwise=True)
                              for s in range(0, x.shape[0], batch)]) if len(x) else np.empty((0, self.out_dim))
        return out, np.zeros(x.shape[0], dtype=np.int64)

    def save(self, path) -> None:
        save_params(path, self.named_parameters(),
                    {"kind": "plain", "in_dim": self.in_dim, "out_dim": self.out_dim,
                     "hidden_widths": self.hidden_widths, "seed": self.seed, **self.spec_kwargs})

    @classmethod
    def load(cls, path) -> "PlainINR":
        meta, arrays = load_params(path)
        kw = {k: meta[k] for k in ("activation", "w0", "first_w0", "ff_freqs", "ff_sigma", "finer_bias")}
        model = cls(meta["in_dim"], meta["out_dim"], meta["hidden_widths"], seed=meta["seed"], **kw)
        for name, p in model.named_parameters():
            p.value[...] = arrays[name]
        return model


# named architectures --------------------------------------------------------

BASE_WIDTHS = [128] * 7          # depth of expert encoder + one expert
WIDER_WIDTHS = [128] * 4 + [512] * 3


def neural_experts_config(in_dim: int, out_dim: int, size: str = "default", **overrides) -> MoeConfig:
    """Named mixture-model configurations.

    ``default`` is 4 experts with every block 128x2; ``small`` keeps the same
    shape at a ~100k parameter budget for the image setting.
    """
    presets = {
        "default": dict(encoder=Block(128, 2), expert=Block(128, 2),
                        manager_encoder=Block(128, 2), manager_head=Block(128, 2)),
        "small": dict(encoder=Block(60, 2), expert=Block(64, 2),
                      manager_encoder=Block(60, 2), manager_head=Block(88, 2)),
        "sdf_small": dict(n_experts=8, encoder=Block(256, 2), expert=Block(32, 2),
                          manager_encoder=Block(64, 2), manager_head=Block(64, 2)),
        "sdf_large": dict(n_experts=8, encoder=Block(512, 2), expert=Block(64, 2),
                          manager_encoder=Block(128, 2), manager_head=Block(128, 2)),
    }
    if size not in presets:
        raise ValueError(f"unknown size {size!r}")
    kw = {"in_dim": in_dim, "out_dim": out_dim, **presets[size], **overrides}
    return MoeConfig(**kw)


def make_baseline(kind: str, in_dim: int, out_dim: int, seed: int = 0, **kw):
    """``base``/``wider`` plain MLPs; ``vanilla-moe``/``neural-experts`` MoE models."""
    if kind == "base":
        return PlainINR(in_dim, out_dim, kw.pop("hidden_widths", BASE_WIDTHS), seed=seed, **kw)
    if kind == "wider":
        return PlainINR(in_dim, out_dim, kw.pop("hidden_widths", WIDER_WIDTHS), seed=seed, **kw)
    if kind == "vanilla-moe":
        size = kw.pop("size", "default")
        return MoeModel(neural_experts_config(in_dim, out_dim, size, conditioning="none", **kw), seed)
    if kind == "neural-experts":
        size = kw.pop("size", "default")
        return MoeModel(neural_experts_config(in_dim, out_dim, size, **kw), seed)
    raise ValueError(f"unknown architecture {kind!r}")
