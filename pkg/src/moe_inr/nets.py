"""Coordinate MLPs: sine (SIREN), softplus, softplus with Fourier features, FINER."""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

ACTIVATIONS = ("sine", "softplus", "identity", "finer")
INITS = ("siren-first", "siren-hidden", "uniform-kaiming")


@dataclass(frozen=True)
class LayerSpec:
    in_width: int
    out_width: int
    activation: str = "sine"
    w0: float = 30.0
    init: str = "siren-hidden"
    bias_range: float | None = None  # FINER first layer: bias ~ U[-k, k]

    def __post_init__(self):
        if self.in_width <= 0 or self.out_width <= 0:
            raise ValueError("layer widths must be positive")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.init not in INITS:
            raise ValueError(f"unknown init {self.init!r}")
        if self.activation in ("sine", "finer") and self.w0 <= 0:
            raise ValueError("sine layers need w0 > 0")

    @property
    def n_params(self) -> int:
        return self.in_width * self.out_width + self.out_width


@dataclass
class FourierFeatureMap:
    """Fixed Gaussian frequency matrix; encodes x as [sin(2 pi xB), cos(2 pi xB)]."""

    B: np.ndarray
    sigma: float

    @classmethod
    def sample(cls, in_dim: int, n_freq: int = 128, sigma: float = 10.0, seed: int = 0) -> "FourierFeatureMap":
        rng = np.random.default_rng(seed)
        return cls(B=rng.normal(0.0, sigma, size=(in_dim, n_freq)), sigma=sigma)

    @property
    def out_dim(self) -> int:
        return 2 * self.B.shape[1]


def fourier_encode(ff: FourierFeatureMap, x) -> Tensor:
    x = ad.as_tensor(x)
    if x.shape[-1] != ff.B.shape[0]:
        raise ad.ShapeError(f"input dim {x.shape[-1]} != frequency rows {ff.B.shape[0]}")
    proj = (x @ Tensor(ff.B)) * (2.0 * math.pi)
    # cos t == sin(t + pi/2)
    return ad.concat([ad.sin(proj), ad.sin(proj + 0.5 * math.pi)])


def sine(z: Tensor, w0: float = 30.0) -> Tensor:
    return ad.sine(z, w0)


def finer_activation(z, w0: float = 1.0) -> Tensor:
    """sin(w0 * (|z| + 1) * z); the |z| subgradient at 0 is 0."""
    z = ad.as_tensor(z)
    return ad.sin(((ad.absolute(z) + 1.0) * z) * w0)


def _activate(spec: LayerSpec, z: Tensor) -> Tensor:
    if spec.activation == "sine":
        return sine(z, spec.w0)
    if spec.activation == "finer":
        return finer_activation(z, spec.w0)
    if spec.activation == "softplus":
        return ad.softplus(z)
    return z


def _activate_array(spec: LayerSpec, z: np.ndarray) -> np.ndarray:
    if spec.activation == "sine":
        return np.sin(z * spec.w0)
    if spec.activation == "finer":
        return np.sin(((np.abs(z) + 1.0) * z) * spec.w0)
    if spec.activation == "softplus":
        return np.logaddexp(0.0, z)
    return z


def init_bounds(spec: LayerSpec) -> tuple[float, float]:
    """(weight bound, bias bound) for uniform initialisation."""
    fan_in = spec.in_width
    if spec.init == "siren-first":
        w = 1.0 / fan_in
    elif spec.init == "siren-hidden":
        w = math.sqrt(6.0 / fan_in) / spec.w0
    else:
        w = 1.0 / math.sqrt(fan_in)
    b = spec.bias_range if spec.bias_range is not None else 1.0 / math.sqrt(fan_in)
    return w, b


def siren_init(spec: LayerSpec, first: bool, seed: int | np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Draw (weight, bias) for one layer.

    First sine layers get U[-1/fan_in, 1/fan_in]; later ones
    U[-sqrt(6/fan_in)/w0, +sqrt(6/fan_in)/w0]. ``first`` overrides ``spec.init``
    for sine/finer layers.
    """
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    if spec.activation in ("sine", "finer", "identity") and spec.init != "uniform-kaiming":
        spec = LayerSpec(**{**asdict(spec), "init": "siren-first" if first else "siren-hidden"})
    wb, bb = init_bounds(spec)
    dtype = ad.get_default_dtype()
    weight = rng.uniform(-wb, wb, size=(spec.in_width, spec.out_width)).astype(dtype)
    bias = rng.uniform(-bb, bb, size=(spec.out_width,)).astype(dtype)
    return weight, bias


class Layer:
    def __init__(self, spec: LayerSpec, weight: np.ndarray, bias: np.ndarray):
        if weight.shape != (spec.in_width, spec.out_width) or bias.shape != (spec.out_width,):
            raise ad.ShapeError("parameter shapes do not match layer spec")
        self.spec = spec
        self.weight = Tensor(weight, requires_grad=True)
        self.bias = Tensor(bias, requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return _activate(self.spec, ad.matmul(x, self.weight) + self.bias)

    def forward_array(self, x: np.ndarray, rowwise: bool = False) -> np.ndarray:
        w = self.weight.value
        # A row-at-a-time product gives results that do not depend on which
        # other rows share the batch.
        z = np.matmul(x[:, None, :], w)[:, 0, :] if rowwise else x @ w
        return _activate_array(self.spec, z + self.bias.value)

    def parameters(self) -> list[Tensor]:
        return [self.weight, self.bias]


def mlp_forward(layers: Sequence[Layer], x) -> Tensor:
    """Compose affine maps and activations; raises on width mismatch."""
    h = ad.as_tensor(x)
    for layer in layers:
        if h.shape[-1] != layer.spec.in_width:
            raise ad.ShapeError(f"width {h.shape[-1]} feeds a layer expecting {layer.spec.in_width}")
        h = layer(h)
    return h


class MLP:
    """Stack of layers with an optional fixed Fourier-feature input map."""

    def __init__(self, layers: Sequence[Layer], ff: FourierFeatureMap | None = None):
        self.layers = list(layers)
        self.ff = ff
        for a, b in zip(self.layers, self.layers[1:]):
            if a.spec.out_width != b.spec.in_width:
                raise ad.ShapeError("layer widths do not chain")
        if ff is not None and self.layers and ff.out_dim != self.layers[0].spec.in_width:
            raise ad.ShapeError("Fourier feature width does not match first layer")

    @property
    def in_dim(self) -> int:
        return self.ff.B.shape[0] if self.ff is not None else self.layers[0].spec.in_width

    @property
    def out_dim(self) -> int:
        return self.layers[-1].spec.out_width

    def __call__(self, x) -> Tensor:
        x = ad.as_tensor(x)
        if x.shape[-1] != self.in_dim:
            raise ad.ShapeError(f"input dim {x.shape[-1]} != {self.in_dim}")
        if self.ff is not None:
            x = fourier_encode(self.ff, x)
        return mlp_forward(self.layers, x)

    def forward_array(self, x: np.ndarray, rowwise: bool = False) -> np.ndarray:
        if self.ff is not None:
            proj = (x @ self.ff.B) * (2.0 * math.pi)
            x = np.concatenate([np.sin(proj), np.cos(proj)], axis=-1)
        for layer in self.layers:
            x = layer.forward_array(x, rowwise)
        return x

    def parameters(self) -> list[Tensor]:
        return [p for layer in self.layers for p in layer.parameters()]

    @property
    def n_params(self) -> int:
        return sum(layer.spec.n_params for layer in self.layers)


def block_specs(in_dim: int, width: int, hidden: int, out_dim: int, activation: str = "sine",
                w0: float = 30.0, first_w0: float | None = None, first: bool = True,
                linear_out: bool = True, finer_bias: float = 1.0) -> list[LayerSpec]:
    """Layer specs for a ``width x hidden`` block.

    A block is in->width, ``hidden`` x (width->width), width->out, so it holds
    ``hidden + 2`` affine maps. ``first`` marks the block as reading raw
    coordinates (first-layer init and ``first_w0``). With ``linear_out=False``
    the output map is activated too, as for encoders.
    """
    act = "sine" if activation in ("sine",) else activation
    if activation == "softplus_ff":
        act = "softplus"
    init = "uniform-kaiming" if act == "softplus" else "siren-hidden"
    widths = [in_dim] + [width] * (hidden + 1) + [out_dim]
    specs = []
    for i, (a, b) in enumerate(zip(widths, widths[1:])):
        last = i == len(widths) - 2
        layer_act = "identity" if (last and linear_out) else act
        layer_init = init
        layer_w0 = w0
        bias_range = None
        if i == 0 and first:
            if act != "softplus":
                layer_init = "siren-first"
            if first_w0 is not None:
                layer_w0 = first_w0
            if act == "finer":
                bias_range = finer_bias
        specs.append(LayerSpec(a, b, layer_act, layer_w0, layer_init, bias_range))
    return specs


def widths_specs(in_dim: int, hidden_widths: Sequence[int], out_dim: int, activation: str = "sine",
                 w0: float = 30.0, first_w0: float | None = None, finer_bias: float = 1.0) -> list[LayerSpec]:
    """Plain MLP specs from an explicit list of hidden widths (linear output)."""
    act = "softplus" if activation in ("softplus", "softplus_ff") else activation
    init = "uniform-kaiming" if act == "softplus" else "siren-hidden"
    widths = [in_dim, *hidden_widths, out_dim]
    specs = []
    for i, (a, b) in enumerate(zip(widths, widths[1:])):
        last = i == len(widths) - 2
        specs.append(LayerSpec(
            a, b, "identity" if last else act,
            first_w0 if (i == 0 and first_w0 is not None) else w0,
            "siren-first" if (i == 0 and act != "softplus") else init,
            finer_bias if (i == 0 and act == "finer") else None,
        ))
    return specs


def build_mlp(specs: Sequence[LayerSpec], rng: np.random.Generator,
              ff: FourierFeatureMap | None = None) -> MLP:
    layers = []
    for spec in specs:
        w, b = siren_init(spec, spec.init == "siren-first", rng)
        layers.append(Layer(spec, w, b))
    return MLP(layers, ff)


# -- parameter files ---------------------------------------------------------
# layout: u64 little-endian header length | UTF-8 JSON header | float64 LE data

def save_params(path, named: Sequence[tuple[str, Tensor]], header: dict | None = None) -> None:
    meta = dict(header or {})
    meta["tensors"] = [{"name": n, "shape": list(t.shape)} for n, t in named]
    blob = json.dumps(meta, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for _, t in named:
            fh.write(np.ascontiguousarray(t.value, dtype="<f8").tobytes())


def load_params(path) -> tuple[dict, dict[str, np.ndarray]]:
    data = Path(path).read_bytes()
    (n,) = struct.unpack_from("<Q", data, 0)
    meta = json.loads(data[8:8 + n].decode())
    offset = 8 + n
    arrays = {}
    for entry in meta["tensors"]:
        count = int(np.prod(entry["shape"], dtype=np.int64))
        arr = np.frombuffer(data, dtype="<f8", count=count, offset=offset)
        arrays[entry["name"]] = arr.reshape(entry["shape"]).astype(np.float64)
        offset += 8 * count
    if offset != len(data):
        raise ValueError("trailing bytes in parameter file")
    return meta, arrays


def layer_specs_json(specs: Sequence[LayerSpec]) -> list[dict]:
    return [asdict(s) for s in specs]
