"""Weight-tied graph-attention autoencoder.

Encoder (P -> F1 -> F2 -> P)::

    h1 = relu(GAT1(x));  h2 = relu(GAT2(h1));  z = h2 @ enc_fc_w.T + enc_fc_b

``z`` is trained to match the protein target directly. The decoder maps ``z``
back to the RNA input through two attention layers and a linear head::

    d1 = relu(DEC1(z));  d2 = relu(DEC2(d1));  x_hat = d2 @ dec_fc_w.T + dec_fc_b

With tying on, ``DEC1`` uses the very same weight arrays as ``GAT1`` and
``DEC2`` those of ``GAT2``, and both aggregate with the encoder's attention
coefficients in mirrored order (``DEC1`` with GAT2's alpha, ``DEC2`` with
GAT1's). Those coefficients are constants on the decoder path.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator, NamedTuple, Optional

import numpy as np

from .attention import (
    GatLayerParams,
    LayerActivation,
    Neighbors,
    gat_backward,
    gat_backward_fixed_alpha,
    gat_forward,
    gat_forward_with_fixed_alpha,
)
from .config import LossWeights
from .errors import ShapeMismatch

LAYER_TENSORS = ("w", "w_a", "a")


@dataclass
class ModelParams:
    enc_layer1: GatLayerParams
    enc_layer2: GatLayerParams
    enc_fc_w: np.ndarray  # (P, F2)
    enc_fc_b: np.ndarray  # (P,)
    dec_layer1: GatLayerParams
    dec_layer2: GatLayerParams
    dec_fc_w: np.ndarray  # (P, F2)
    dec_fc_b: np.ndarray  # (P,)
    tied: bool = True

    def __post_init__(self):
        if self.tied:
            # aliasing, not copying
            self.dec_layer1 = self.enc_layer1
            self.dec_layer2 = self.enc_layer2

    @property
    def dims(self) -> tuple[int, int, int]:
        return (self.enc_layer1.f_in, self.enc_layer1.f_out, self.enc_layer2.f_out)

    @property
    def heads(self) -> int:
        return self.enc_layer1.heads

    def named_tensors(self) -> Iterator[tuple[str, np.ndarray]]:
        """Every distinct tensor once; decoder layers are omitted when tied."""
        layers = [("enc_layer1", self.enc_layer1), ("enc_layer2", self.enc_layer2)]
        if not self.tied:
            layers += [("dec_layer1", self.dec_layer1), ("dec_layer2", self.dec_layer2)]
        for name, layer in layers[:2]:
            for t in LAYER_TENSORS:
                yield f"{name}.{t}", getattr(layer, t)
        yield "enc_fc_w", self.enc_fc_w
        yield "enc_fc_b", self.enc_fc_b
        for name, layer in layers[2:]:
            for t in LAYER_TENSORS:
                yield f"{name}.{t}", getattr(layer, t)
        yield "dec_fc_w", self.dec_fc_w
        yield "dec_fc_b", self.dec_fc_b

    @classmethod
    def from_named_tensors(cls, tensors: dict[str, np.ndarray], tied: bool) -> "ModelParams":
        def layer(prefix):
            return GatLayerParams(*(tensors[f"{prefix}.{t}"] for t in LAYER_TENSORS))

        enc1, enc2 = layer("enc_layer1"), layer("enc_layer2")
        dec1, dec2 = (enc1, enc2) if tied else (layer("dec_layer1"), layer("dec_layer2"))
        return cls(
            enc1, enc2, tensors["enc_fc_w"], tensors["enc_fc_b"],
            dec1, dec2, tensors["dec_fc_w"], tensors["dec_fc_b"], tied=tied,
        )

    def zeros_like(self) -> "ModelParams":
        return ModelParams.from_named_tensors(
            {name: np.zeros_like(t) for name, t in self.named_tensors()}, self.tied
        )

    def copy(self) -> "ModelParams":
        return ModelParams.from_named_tensors(
            {name: t.copy() for name, t in self.named_tensors()}, self.tied
        )


def _glorot(rng: np.random.Generator, shape, fan_in: int, fan_out: int) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)


def _init_layer(rng, heads: int, f_in: int, f_out: int) -> GatLayerParams:
    return GatLayerParams(
        w=_glorot(rng, (heads, f_out, f_in), f_in, f_out),
        w_a=_glorot(rng, (heads, f_out, 2 * f_in), 2 * f_in, f_out),
        a=_glorot(rng, (heads, f_out), f_out, 1),
    )


def init_params(dims: tuple[int, int, int], heads: int, seed: int, tied: bool = True) -> ModelParams:
    """Glorot-uniform weights, zero biases; ``dims = (P, F1, F2)``."""
    p, f1, f2 = dims
    if min(p, f1, f2, heads) < 1:
        raise ValueError(f"dims and heads must be positive, got {dims}, {heads}")
    rng = np.random.default_rng(seed)
    enc1 = _init_layer(rng, heads, p, f1)
    enc2 = _init_layer(rng, heads, f1, f2)
    enc_fc_w = _glorot(rng, (p, f2), f2, p)
    dec_fc_w = _glorot(rng, (p, f2), f2, p)
    if tied:
        dec1, dec2 = enc1, enc2
    else:
        dec1 = _init_layer(rng, heads, p, f1)
        dec2 = _init_layer(rng, heads, f1, f2)
    return ModelParams(
        enc1, enc2, enc_fc_w, np.zeros(p), dec1, dec2, dec_fc_w, np.zeros(p), tied=tied
    )


@dataclass
class EncoderTrace:
    act1: LayerActivation
    h1: np.ndarray
    act2: LayerActivation
    h2: np.ndarray
    z: np.ndarray


@dataclass
class DecoderTrace:
    act1: LayerActivation
    d1: np.ndarray
    act2: LayerActivation
    d2: np.ndarray
    x_hat: np.ndarray


@dataclass
class ForwardTrace:
    enc: EncoderTrace
    dec: DecoderTrace

    @property
    def z(self) -> np.ndarray:
        return self.enc.z

    @property
    def x_hat(self) -> np.ndarray:
        return self.dec.x_hat


def _relu(x):
    return np.maximum(x, 0.0)


def encode(params: ModelParams, x: np.ndarray, nbrs: Neighbors) -> tuple[np.ndarray, EncoderTrace]:
    if x.shape[1] != params.dims[0]:
        raise ShapeMismatch(f"x has {x.shape[1]} columns, model expects {params.dims[0]}")
    act1 = gat_forward(params.enc_layer1, x, nbrs)
    h1 = _relu(act1.output)
    act2 = gat_forward(params.enc_layer2, h1, nbrs)
    h2 = _relu(act2.output)
    z = h2 @ params.enc_fc_w.T + params.enc_fc_b
    return z, EncoderTrace(act1, h1, act2, h2, z)


def decode(params: ModelParams, z: np.ndarray, nbrs: Neighbors, enc_trace: EncoderTrace) -> DecoderTrace:
    if params.tied:
        act1 = gat_forward_with_fixed_alpha(params.dec_layer1, z, nbrs, enc_trace.act2.alpha)
        d1 = _relu(act1.output)
        act2 = gat_forward_with_fixed_alpha(params.dec_layer2, d1, nbrs, enc_trace.act1.alpha)
    else:
        act1 = gat_forward(params.dec_layer1, z, nbrs)
        d1 = _relu(act1.output)
        act2 = gat_forward(params.dec_layer2, d1, nbrs)
    d2 = _relu(act2.output)
    x_hat = d2 @ params.dec_fc_w.T + params.dec_fc_b
    return DecoderTrace(act1, d1, act2, d2, x_hat)


def forward(params: ModelParams, x: np.ndarray, nbrs: Neighbors) -> ForwardTrace:
    z, enc = encode(params, x, nbrs)
    return ForwardTrace(enc, decode(params, z, nbrs, enc))


class Losses(NamedTuple):
    total: float
    l_rna: float
    l_protein: float


def loss(x, y, x_hat, z, w: LossWeights) -> Losses:
    if x.shape != x_hat.shape or y.shape != z.shape:
        raise ShapeMismatch(
            f"loss shapes disagree: x {x.shape} vs x_hat {x_hat.shape}, y {y.shape} vs z {z.shape}"
        )
    l_rna = float(np.sum((x - x_hat) ** 2))
    l_protein = float(np.sum((y - z) ** 2))
    return Losses(w.beta1 * l_rna + w.beta2 * l_protein, l_rna, l_protein)


@dataclass
class DecoderGrads:
    layer1: GatLayerParams
    layer2: GatLayerParams
    fc_w: np.ndarray
    fc_b: np.ndarray
    grad_z: np.ndarray


@dataclass
class EncoderGrads:
    layer1: GatLayerParams
    layer2: GatLayerParams
    fc_w: np.ndarray
    fc_b: np.ndarray


def backward_decoder(
    params: ModelParams, z: np.ndarray, nbrs: Neighbors, trace: DecoderTrace, grad_x_hat: np.ndarray
) -> DecoderGrads:
    back = gat_backward_fixed_alpha if params.tied else gat_backward
    fc_w = grad_x_hat.T @ trace.d2
    fc_b = grad_x_hat.sum(axis=0)
    g_d2 = (grad_x_hat @ params.dec_fc_w) * (trace.act2.output > 0)
    g_layer2, g_d1 = back(params.dec_layer2, trace.d1, nbrs, trace.act2, g_d2)
    g_d1 = g_d1 * (trace.act1.output > 0)
    g_layer1, g_z = back(params.dec_layer1, z, nbrs, trace.act1, g_d1)
    return DecoderGrads(g_layer1, g_layer2, fc_w, fc_b, g_z)


def backward_encoder(
    params: ModelParams, x: np.ndarray, nbrs: Neighbors, trace: EncoderTrace, grad_z: np.ndarray
) -> EncoderGrads:
    fc_w = grad_z.T @ trace.h2
    fc_b = grad_z.sum(axis=0)
    g_h2 = (grad_z @ params.enc_fc_w) * (trace.act2.output > 0)
    g_layer2, g_h1 = gat_backward(params.enc_layer2, trace.h1, nbrs, trace.act2, g_h2)
    g_h1 = g_h1 * (trace.act1.output > 0)
    g_layer1, _ = gat_backward(params.enc_layer1, x, nbrs, trace.act1, g_h1)
    return EncoderGrads(g_layer1, g_layer2, fc_w, fc_b)


def _add_layers(a: GatLayerParams, b: GatLayerParams) -> GatLayerParams:
    return GatLayerParams(a.w + b.w, a.w_a + b.w_a, a.a + b.a)


def forward_backward(
    params: ModelParams,
    x: np.ndarray,
    y: np.ndarray,
    nbrs: Neighbors,
    w: LossWeights,
    trace: Optional[ForwardTrace] = None,
) -> tuple[Losses, ModelParams]:
    """Total loss and its gradient w.r.t. every tensor, in ModelParams layout.

    Tied layers receive the sum of their encoder and decoder contributions.
    """
    if trace is None:
        trace = forward(params, x, nbrs)
    z, x_hat = trace.z, trace.x_hat
    losses = loss(x, y, x_hat, z, w)

    grad_x_hat = 2.0 * w.beta1 * (x_hat - x)
    dec = backward_decoder(params, z, nbrs, trace.dec, grad_x_hat)
    grad_z = dec.grad_z + 2.0 * w.beta2 * (z - y)
    enc = backward_encoder(params, x, nbrs, trace.enc, grad_z)

    if params.tied:
        layer1 = _add_layers(enc.layer1, dec.layer1)
        layer2 = _add_layers(enc.layer2, dec.layer2)
        grads = ModelParams(layer1, layer2, enc.fc_w, enc.fc_b, layer1, layer2, dec.fc_w, dec.fc_b, tied=True)
    else:
        grads = ModelParams(
            enc.layer1, enc.layer2, enc.fc_w, enc.fc_b,
            dec.layer1, dec.layer2, dec.fc_w, dec.fc_b, tied=False,
        )
    return losses, grads
