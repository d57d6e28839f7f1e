"""Conditional DCGAN for minority-class oversampling.

The generator maps a latent vector concatenated with a learned label
embedding through a dense layer and two stride-2 transposed convolutions
to a tanh image in (-1, 1).  The discriminator projects the label to an
extra input channel and runs a stride-2 conv stack to a single logit.
Losses are the stable softplus forms of binary cross-entropy on logits,
with the non-saturating generator objective.

Images enter and leave this module on the (-1, 1) scale; helpers convert
to and from 8-bit images for the rest of the pipeline.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import imaging as im
from . import tensor as T
from .errors import ContractError, DimensionError, DivergenceError, NumericError
from .training import OptimizerState, adam_step, init_optimizer

__all__ = [
    "GanConfig",
    "GanParams",
    "init_gan",
    "named_generator_parameters",
    "named_discriminator_parameters",
    "named_gan_parameters",
    "generate",
    "discriminate",
    "gan_train_step",
    "train_gan",
    "to_unit_range",
    "to_image",
    "rebalance",
]


@dataclass(frozen=True)
class GanConfig:
    latent_dim: int = 128
    class_count: int = 4
    image_size: tuple = (32, 32)
    epochs: int = 50
    lr: float = 2e-4
    batch: int = 16
    base_channels: int = 32
    label_dim: int = 16

    def __post_init__(self):
        if self.latent_dim < 1:
            raise ContractError(f"latent_dim must be >= 1, got {self.latent_dim}")
        if self.class_count < 1:
            raise ContractError(f"class_count must be >= 1, got {self.class_count}")
        h, w = self.image_size
        if h % 4 or w % 4 or h < 4 or w < 4:
            raise ContractError(
                f"image size must be a positive multiple of 4, got {self.image_size}")

    @property
    def seed_hw(self) -> tuple:
        """Spatial extent of the generator's first feature map (H/4, W/4)."""
        return (self.image_size[0] // 4, self.image_size[1] // 4)


@dataclass
class GanParams:
    """Generator and discriminator tensors plus a trained-steps counter."""

    g_embed: T.Tensor        # (class_count, label_dim)
    g_fc_w: T.Tensor         # (latent+label_dim, 2*base*seed_h*seed_w)
    g_fc_b: T.Tensor
    g_deconv1: T.Tensor      # (2*base, base, 4, 4)
    g_deconv1_b: T.Tensor
    g_deconv2: T.Tensor      # (base, 3, 4, 4)
    g_deconv2_b: T.Tensor
    d_embed: T.Tensor        # (class_count, H*W) label projection channel
    d_conv1: T.Tensor        # (base, 4, 4, 4)
    d_conv1_b: T.Tensor
    d_conv2: T.Tensor        # (2*base, base, 4, 4)
    d_conv2_b: T.Tensor
    d_fc_w: T.Tensor         # (2*base*seed_h*seed_w, 1)
    d_fc_b: T.Tensor
    config: GanConfig = field(repr=False, default=None)
    trained_steps: int = 0


def init_gan(cfg: GanConfig, rng: np.random.Generator) -> GanParams:
    def normal(shape, std=0.02):
        return T.Tensor(rng.standard_normal(shape) * std, requires_grad=True)

    sh, sw = cfg.seed_hw
    base = cfg.base_channels
    h, w = cfg.image_size
    return GanParams(
        g_embed=normal((cfg.class_count, cfg.label_dim), 0.1),
        g_fc_w=normal((cfg.latent_dim + cfg.label_dim, 2 * base * sh * sw),
                      math.sqrt(2.0 / (cfg.latent_dim + cfg.label_dim))),
        g_fc_b=T.zeros(2 * base * sh * sw, requires_grad=True),
        g_deconv1=normal((2 * base, base, 4, 4)),
        g_deconv1_b=T.zeros(base, requires_grad=True),
        g_deconv2=normal((base, 3, 4, 4)),
        g_deconv2_b=T.zeros(3, requires_grad=True),
        d_embed=normal((cfg.class_count, h * w), 0.1),
        d_conv1=normal((base, 4, 4, 4)),
        d_conv1_b=T.zeros(base, requires_grad=True),
        d_conv2=normal((2 * base, base, 4, 4)),
        d_conv2_b=T.zeros(2 * base, requires_grad=True),
        d_fc_w=normal((2 * base * sh * sw, 1),
                      math.sqrt(1.0 / (2 * base * sh * sw))),
        d_fc_b=T.zeros(1, requires_grad=True),
        config=cfg)


def named_generator_parameters(params: GanParams) -> list:
    return [("gan.g_embed", params.g_embed), ("gan.g_fc_w", params.g_fc_w),
            ("gan.g_fc_b", params.g_fc_b), ("gan.g_deconv1", params.g_deconv1),
            ("gan.g_deconv1_b", params.g_deconv1_b),
            ("gan.g_deconv2", params.g_deconv2),
            ("gan.g_deconv2_b", params.g_deconv2_b)]


def named_discriminator_parameters(params: GanParams) -> list:
    return [("gan.d_embed", params.d_embed), ("gan.d_conv1", params.d_conv1),
            ("gan.d_conv1_b", params.d_conv1_b), ("gan.d_conv2", params.d_conv2),
            ("gan.d_conv2_b", params.d_conv2_b), ("gan.d_fc_w", params.d_fc_w),
            ("gan.d_fc_b", params.d_fc_b)]


def named_gan_parameters(params: GanParams) -> list:
    return named_generator_parameters(params) + named_discriminator_parameters(params)


def _check_labels(labels, class_count: int) -> np.ndarray:
    arr = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    if arr.min() < 0 or arr.max() >= class_count:
        raise ContractError(
            f"labels must lie in [0, {class_count}), got {arr.tolist()}")
    return arr


def _one_hot(labels: np.ndarray, class_count: int) -> T.Tensor:
    return T.const(np.eye(class_count)[labels])


def generate(z: T.Tensor, label, params: GanParams) -> T.Tensor:
    """Deterministic conditional generation; output in (-1, 1)."""
    cfg = params.config
    single = z.ndim == 1
    zb = T.reshape(z, (1,) + z.shape) if single else z
    if zb.shape[-1] != cfg.latent_dim:
        raise DimensionError(
            f"latent dim {zb.shape[-1]} != configured {cfg.latent_dim}")
    labels = _check_labels(label, cfg.class_count)
    if labels.size != zb.shape[0]:
        raise DimensionError(f"{zb.shape[0]} latents but {labels.size} labels")
    cond = T.matmul(_one_hot(labels, cfg.class_count), params.g_embed)
    h = T.concat([zb, cond], axis=1)
    h = T.relu(T.add_rowvec(T.matmul(h, params.g_fc_w), params.g_fc_b))
    sh, sw = cfg.seed_hw
    h = T.reshape(h, (zb.shape[0], 2 * cfg.base_channels, sh, sw))
    h = T.relu(T.conv_transpose2d(h, params.g_deconv1, stride=2, padding=1,
                                  bias=params.g_deconv1_b))
    img = T.tanh(T.conv_transpose2d(h, params.g_deconv2, stride=2, padding=1,
                                    bias=params.g_deconv2_b))
    return T.reshape(img, img.shape[1:]) if single else img


def _disc_logit(x: T.Tensor, label, params: GanParams) -> T.Tensor:
    cfg = params.config
    single = x.ndim == 3
    xb = T.reshape(x, (1,) + x.shape) if single else x
    h, w = cfg.image_size
    if xb.shape[1:] != (3, h, w):
        raise DimensionError(f"image {x.shape} does not match configured "
                             f"(3, {h}, {w})")
    labels = _check_labels(label, cfg.class_count)
    if labels.size != xb.shape[0]:
        raise DimensionError(f"{xb.shape[0]} images but {labels.size} labels")
    proj = T.matmul(_one_hot(labels, cfg.class_count), params.d_embed)
    proj = T.reshape(proj, (xb.shape[0], 1, h, w))
    stacked = T.concat([xb, proj], axis=1)
    f = T.leaky_relu(T.conv2d(stacked, params.d_conv1, stride=2, padding=1,
                              bias=params.d_conv1_b))
    f = T.leaky_relu(T.conv2d(f, params.d_conv2, stride=2, padding=1,
                              bias=params.d_conv2_b))
    flat = T.reshape(f, (xb.shape[0], f.size // xb.shape[0]))
    logit = T.add_rowvec(T.matmul(flat, params.d_fc_w), params.d_fc_b)
    out = T.reshape(logit, (xb.shape[0],))
    return T.reshape(out, ()) if single else out


def discriminate(x: T.Tensor, label, params: GanParams) -> T.Tensor:
    """Probability the sample is real, per the current discriminator."""
    return T.sigmoid(_disc_logit(x, label, params))


def _bce_real(logit: T.Tensor) -> T.Tensor:
    """Mean of -log sigmoid(logit) = softplus(-logit)."""
    return T.mean(T.softplus(T.neg(logit)))


def _bce_fake(logit: T.Tensor) -> T.Tensor:
    """Mean of -log(1 - sigmoid(logit)) = softplus(logit)."""
    return T.mean(T.softplus(logit))


def gan_train_step(real: T.Tensor, labels, params: GanParams,
                   d_state: OptimizerState, g_state: OptimizerState,
                   rng: np.random.Generator,
                   update_generator: bool = True) -> tuple:
    """One discriminator update then (optionally) one generator update.

    `real` is a non-empty (B, 3, H, W) batch on the (-1, 1) scale; latent
    draws come from `rng`.  Returns (d_loss, g_loss) as floats.
    """
    cfg = params.config
    if real.ndim != 4 or real.shape[0] < 1:
        raise ContractError(f"need a non-empty image batch, got {real.shape}")
    labels = _check_labels(labels, cfg.class_count)
    n = real.shape[0]
    z = T.const(rng.standard_normal((n, cfg.latent_dim)))
    d_params = [t for _, t in named_discriminator_parameters(params)]
    g_params = [t for _, t in named_generator_parameters(params)]

    try:
        fake = generate(z, labels, params)
        fake_const = T.const(fake.data.copy())
        with T.Tape() as tape:
            d_loss = T.add(_bce_real(_disc_logit(real, labels, params)),
                           _bce_fake(_disc_logit(fake_const, labels, params)))
            tape.backward(d_loss)
        adam_step(d_params, d_state)
        T.zero_grads(d_params + g_params)

        with T.Tape() as tape:
            g_loss = _bce_real(_disc_logit(generate(z, labels, params),
                                           labels, params))
            tape.backward(g_loss)
        if update_generator:
            adam_step(g_params, g_state)
        T.zero_grads(d_params + g_params)
    except NumericError as exc:
        raise DivergenceError("adversarial", detail=str(exc)) from exc

    d_val, g_val = float(d_loss.data), float(g_loss.data)
    if not (math.isfinite(d_val) and math.isfinite(g_val)):
        raise DivergenceError("adversarial",
                              detail=f"d={d_val}, g={g_val}")
    params.trained_steps += 1
    return d_val, g_val


def train_gan(images: np.ndarray, labels: np.ndarray, cfg: GanConfig,
              seed: int = 0, params: GanParams = None) -> tuple:
    """Full conditional-GAN training run; returns (params, loss history).

    `images` is (N, 3, H, W) on the (-1, 1) scale.  History holds one
    (epoch mean d_loss, epoch mean g_loss) pair per epoch; the whole run is
    reproducible from `seed`.
    """
    if images.ndim != 4 or images.shape[0] < 1:
        raise ContractError(f"need a non-empty image set, got {images.shape}")
    if params is None:
        params = init_gan(cfg, np.random.default_rng([seed, 0xC0FFEE]))
    d_state = init_optimizer([t for _, t in named_discriminator_parameters(params)],
                             cfg.lr)
    g_state = init_optimizer([t for _, t in named_generator_parameters(params)],
                             cfg.lr)
    history = []
    n = images.shape[0]
    for epoch in range(cfg.epochs):
        erng = np.random.default_rng([seed, epoch])
        order = erng.permutation(n)
        d_sum = g_sum = 0.0
        batches = 0
        for start in range(0, n, cfg.batch):
            sel = order[start:start + cfg.batch]
            d_loss, g_loss = gan_train_step(
                T.const(images[sel]), labels[sel], params, d_state, g_state,
                erng)
            d_sum += d_loss
            g_sum += g_loss
            batches += 1
        history.append((d_sum / batches, g_sum / batches))
    return params, history


def to_unit_range(img: im.ImageU8) -> np.ndarray:
    """8-bit image -> float32 (3, H, W) array scaled to (-1, 1)."""
    arr = img.as_array().astype(np.float32) / 127.5 - 1.0
    if img.channels == 1:
        arr = np.repeat(arr, 3, axis=2)
    return np.transpose(arr, (2, 0, 1))


def to_image(x: np.ndarray) -> im.ImageU8:
    """Float (3, H, W) array in (-1, 1) -> 8-bit image."""
    arr = np.clip(np.floor((np.transpose(x, (1, 2, 0)) + 1.0) * 127.5 + 0.5),
                  0, 255).astype(np.uint8)
    return im.ImageU8.from_array(arr)


def rebalance(samples: list, target_counts, params: GanParams,
              seed: int = 0, out_size: tuple = None) -> list:
    """Append generated minority-class samples until each class reaches its
    target count.

    `samples` holds (ImageU8, label) pairs (or (ImageU8, label, flag)
    triples); the result holds (ImageU8, label, synthetic) triples with the
    originals first, bit-identical and in order.  `target_counts` maps class
    -> minimum count (a single int applies to every class).
    """
    if params.trained_steps < 1:
        raise ContractError("rebalance requires a trained generator")
    cfg = params.config
    normalized = []
    counts = [0] * cfg.class_count
    for entry in samples:
        img, label = entry[0], int(entry[1])
        flag = bool(entry[2]) if len(entry) > 2 else False
        if not 0 <= label < cfg.class_count:
            raise ContractError(f"label {label} outside [0, {cfg.class_count})")
        normalized.append((img, label, flag))
        counts[label] += 1
    if isinstance(target_counts, int):
        targets = [target_counts] * cfg.class_count
    else:
        targets = [int(target_counts[k]) for k in range(cfg.class_count)]

    out = list(normalized)
    rng = np.random.default_rng([seed, 0xFA4E])
    for cls in range(cfg.class_count):
        need = max(0, targets[cls] - counts[cls])
        for _ in range(need):
            z = T.const(rng.standard_normal(cfg.latent_dim))
            img = to_image(generate(z, cls, params).data)
            if out_size is not None and (img.height, img.width) != tuple(out_size):
                img = im.resize_bilinear(img, out_size)
            out.append((img, cls, True))
    return out
