"""Convolutional discriminator scoring 3-channel phase images.

A stack of strided valid convolutions with LeakyReLU activations, flattened
into a single dense unit with a sigmoid, mapping a window-sized field to a
realism score in (0, 1). Real cutouts enter as one-hot channels, generated
samples as soft channels, so the score stays differentiable with respect to
both the network weights and the input field.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .random_fields import rng_from_seed, derive_seed

WEIGHT_STD = 0.02


class DiscriminatorError(ValueError):
    pass


@dataclass
class DiscriminatorConfig:
    """Layer stack as (kernel, features, stride) triples plus the input size.

    The default mirrors a standard strided GAN discriminator: four blocks
    k4n64s2 / k4n128s2 / k4n256s2 / k4n512s2 on a 201x201x3 window, then a
    dense layer to a scalar.
    """

    input_extents: tuple[int, int, int] = (201, 201, 3)
    blocks: tuple = ((4, 64, 2), (4, 128, 2), (4, 256, 2), (4, 512, 2))
    leaky_alpha: float = 0.2

    def spatial_sizes(self) -> list[int]:
        """Spatial extent after each block: floor((n - k) / s) + 1."""
        sizes = [self.input_extents[0]]
        n = self.input_extents[0]
        for k, _, s in self.blocks:
            if k > n:
                raise DiscriminatorError(
                    f"kernel {k} larger than remaining extent {n}")
            if s < 1:
                raise DiscriminatorError(f"stride must be >= 1, got {s}")
            n = (n - k) // s + 1
            if n < 1:
                raise DiscriminatorError("spatial extent collapsed below 1")
            sizes.append(n)
        return sizes

    def flat_features(self) -> int:
        n = self.spatial_sizes()[-1]
        return n * n * self.blocks[-1][1]


@dataclass
class DiscriminatorParams:
    config: DiscriminatorConfig
    conv_weights: list = field(default_factory=list)   # (k, k, c_in, n) tensors
    conv_biases: list = field(default_factory=list)    # (n,) tensors
    dense_weight: Tensor | None = None                 # (flat,)
    dense_bias: Tensor | None = None                   # ()
    seed: int = 0

    def tensors(self) -> list[Tensor]:
        return [*self.conv_weights, *self.conv_biases, self.dense_weight, self.dense_bias]

    def detached(self) -> "DiscriminatorParams":
        """Copy with gradient tracking severed (constant weights)."""
        out = DiscriminatorParams(config=self.config, seed=self.seed)
        out.conv_weights = [ad.constant(w.data) for w in self.conv_weights]
        out.conv_biases = [ad.constant(b.data) for b in self.conv_biases]
        out.dense_weight = ad.constant(self.dense_weight.data)
        out.dense_bias = ad.constant(self.dense_bias.data)
        return out

    def state_arrays(self) -> dict:
        out = {}
        for i, (w, b) in enumerate(zip(self.conv_weights, self.conv_biases)):
            out[f"conv{i}_w"] = w.data
            out[f"conv{i}_b"] = b.data
        out["dense_w"] = self.dense_weight.data
        out["dense_b"] = self.dense_bias.data
        return out

    def load_state_arrays(self, arrays: dict) -> None:
        for i in range(len(self.conv_weights)):
            self.conv_weights[i].data[...] = arrays[f"conv{i}_w"]
            self.conv_biases[i].data[...] = arrays[f"conv{i}_b"]
        self.dense_weight.data[...] = arrays["dense_w"]
        self.dense_bias.data[...] = arrays["dense_b"]


def init_discriminator(config: DiscriminatorConfig, seed: int,
                       requires_grad: bool = True) -> DiscriminatorParams:
    """Weights i.i.d. N(0, 0.02^2), biases zero; deterministic per seed."""
    config.spatial_sizes()  # validates the stack
    params = DiscriminatorParams(config=config, seed=int(seed))
    c_in = config.input_extents[2]
    for i, (k, n, _) in enumerate(config.blocks):
        gen = rng_from_seed(derive_seed(seed, i))
        w = gen.standard_normal((k, k, c_in, n)) * WEIGHT_STD
        params.conv_weights.append(Tensor(w, requires_grad=requires_grad))
        params.conv_biases.append(Tensor(np.zeros(n), requires_grad=requires_grad))
        c_in = n
    gen = rng_from_seed(derive_seed(seed, len(config.blocks)))
    params.dense_weight = Tensor(gen.standard_normal(config.flat_features()) * WEIGHT_STD,
                                 requires_grad=requires_grad)
    params.dense_bias = Tensor(0.0, requires_grad=requires_grad)
    return params


def discriminate(params: DiscriminatorParams, fld) -> Tensor:
    """Score a window-sized HxWx3 field; strictly inside (0, 1)."""
    x = fld if isinstance(fld, Tensor) else ad.constant(fld)
    cfg = params.config
    if x.shape != tuple(cfg.input_extents):
        raise DiscriminatorError(
            f"field shape {x.shape} does not match configured input {cfg.input_extents}")
    for (k, n, s), w, b in zip(cfg.blocks, params.conv_weights, params.conv_biases):
        x = ad.conv2d_strided(x, w, s)
        x = ad.add(x, b)
        x = ad.leaky_relu(x, cfg.leaky_alpha)
    flat = ad.reshape(x, (x.size,))
    logit = ad.add(ad.sum_all(ad.mul(flat, params.dense_weight)), params.dense_bias)
    return ad.sigmoid(logit)
