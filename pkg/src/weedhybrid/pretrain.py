"""Self-supervised contrastive pretraining of the CNN and ViT branches.

Two independently augmented views of each image form a positive pair; all
other views in the batch act as negatives.  Pooled CNN and ViT features
are concatenated, passed through a small projection head, L2-normalized,
and scored with the normalized-temperature cross-entropy (NT-Xent) loss.
Only the CNN and ViT parameters are updated; the graph branch keeps its
random initialization and the projection head is discarded afterward.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import backbone as bb
from . import imaging as im
from . import tensor as T
from .errors import ContractError, DivergenceError, NumericError
from .training import adam_step, init_optimizer

__all__ = [
    "ContrastiveConfig",
    "ViewParams",
    "draw_view_params",
    "apply_view_params",
    "make_views",
    "l2_normalize_rows",
    "nt_xent_loss",
    "ProjectionParams",
    "init_projection",
    "forward_embeddings",
    "pretrain",
]

IDENTITY_POLICY = ("identity",)
DEFAULT_OPS = ("identity",) + im.GEOMETRIC_OPS


@dataclass(frozen=True)
class ContrastiveConfig:
    temperature: float = 0.5
    projection_dim: int = 32
    batch_pairs: int = 8
    epochs: int = 20
    lr: float = 1e-3
    ops: tuple = DEFAULT_OPS
    gamma_range: tuple = (0.8, 1.25)

    def __post_init__(self):
        if not self.temperature > 0:
            raise ContractError(f"temperature must be > 0, got {self.temperature}")
        if self.projection_dim < 1:
            raise ContractError(
                f"projection_dim must be >= 1, got {self.projection_dim}")
        if self.batch_pairs < 1:
            raise ContractError(f"batch_pairs must be >= 1, got {self.batch_pairs}")
        lo, hi = self.gamma_range
        if not (0 < lo <= hi):
            raise ContractError(f"gamma_range must satisfy 0 < lo <= hi, "
                                f"got {self.gamma_range}")
        for op in self.ops:
            if op != "identity" and op not in im.GEOMETRIC_OPS:
                raise ContractError(f"unknown view op {op!r}")


@dataclass(frozen=True)
class ViewParams:
    """The exact augmentation applied to produce one view."""

    op: str
    gamma: float


def draw_view_params(cfg: ContrastiveConfig, rng: np.random.Generator) -> ViewParams:
    op = cfg.ops[int(rng.integers(len(cfg.ops)))]
    lo, hi = cfg.gamma_range
    gamma = lo if lo == hi else float(rng.uniform(lo, hi))
    return ViewParams(op=op, gamma=gamma)


def apply_view_params(img: im.ImageU8, vp: ViewParams) -> im.ImageU8:
    out = img if vp.op == "identity" else im.geometric_augment(img, vp.op)
    return im.gamma_correct(out, vp.gamma)


def make_views(img: im.ImageU8, rng: np.random.Generator,
               cfg: ContrastiveConfig = None) -> tuple:
    """Two independently augmented versions of the same image."""
    cfg = ContrastiveConfig() if cfg is None else cfg
    first = draw_view_params(cfg, rng)
    second = draw_view_params(cfg, rng)
    return apply_view_params(img, first), apply_view_params(img, second)


def l2_normalize_rows(z: T.Tensor) -> T.Tensor:
    """Scale each row of a (N, d) tensor to unit Euclidean norm."""
    sq = T.sum_(T.mul(z, z), axis=1)
    inv = T.pow_const(T.sqrt(T.clamp_min(sq, 1e-24)), -1.0)
    return T.scale_rows(z, inv)


def nt_xent_loss(z: T.Tensor, tau: float) -> T.Tensor:
    """NT-Xent over (2B, d) unit-norm rows where rows 2i and 2i+1 pair up.

    Mean over all 2B anchors of -log( exp(sim+/tau) / sum_{k != anchor}
    exp(sim_k/tau) ).  A single pair has no negatives and yields exactly 0.
    """
    if z.ndim != 2 or z.shape[0] < 2 or z.shape[0] % 2:
        raise ContractError(
            f"need an even number >= 2 of embedding rows, got shape {z.shape}")
    if not tau > 0:
        raise ContractError(f"temperature must be > 0, got {tau}")
    n = z.shape[0]
    logits = T.mul(T.matmul(z, T.transpose(z, (1, 0))), 1.0 / tau)
    mask = np.zeros((n, n))
    np.fill_diagonal(mask, -1e9)  # remove self-similarity from the softmax
    probs = T.softmax(T.add(logits, T.const(mask)), axis=1)
    partner = np.zeros((n, n))
    partner[np.arange(n), np.arange(n) ^ 1] = 1.0
    picked = T.sum_(T.mul(probs, T.const(partner)), axis=1)
    return T.mean(T.neg(T.log(T.clamp_min(picked, 1e-12))))


@dataclass
class ProjectionParams:
    """Throwaway head mapping pooled features to the contrastive space."""

    w1: T.Tensor
    b1: T.Tensor
    w2: T.Tensor
    b2: T.Tensor


def init_projection(in_dim: int, out_dim: int,
                    rng: np.random.Generator) -> ProjectionParams:
    def xavier(n_in, n_out):
        bound = math.sqrt(6.0 / (n_in + n_out))
        return T.Tensor(rng.uniform(-bound, bound, (n_in, n_out)),
                        requires_grad=True)

    return ProjectionParams(w1=xavier(in_dim, out_dim),
                            b1=T.zeros(out_dim, requires_grad=True),
                            w2=xavier(out_dim, out_dim),
                            b2=T.zeros(out_dim, requires_grad=True))


def _projection_tensors(proj: ProjectionParams) -> list:
    return [proj.w1, proj.b1, proj.w2, proj.b2]


def forward_embeddings(x: T.Tensor, params: bb.BackboneParams,
                       proj: ProjectionParams) -> T.Tensor:
    """Batch of images -> unit-norm rows in the contrastive space."""
    cnn_vec, _ = bb.cnn_forward(x, params)
    _, vit_vec = bb.vit_forward(x, params.vit, params.config)
    feats = T.concat([cnn_vec, vit_vec], axis=1)
    hidden = T.relu(T.add_rowvec(T.matmul(feats, proj.w1), proj.b1))
    out = T.add_rowvec(T.matmul(hidden, proj.w2), proj.b2)
    return l2_normalize_rows(out)


def _pretrained_tensors(params: bb.BackboneParams) -> list:
    """Only the CNN and ViT branches take gradient steps during pretraining."""
    return [(n, t) for n, t in bb.named_parameters(params)
            if n.startswith(("cnn.", "vit."))]


def pretrain(images: list, cfg: ContrastiveConfig,
             backbone_cfg: bb.BackboneConfig = None, seed: int = 0,
             params: bb.BackboneParams = None) -> tuple:
    """Contrastive pretraining loop; returns (backbone params, loss history).

    `images` is a sequence of ImageU8 already at the backbone's input size.
    History holds one mean NT-Xent value per epoch; the projection head is
    created internally and never returned.
    """
    if len(images) < 2:
        raise ContractError(f"pretraining needs >= 2 images, got {len(images)}")
    if params is None:
        backbone_cfg = backbone_cfg or bb.desk_config()
        params = bb.init_backbone(backbone_cfg,
                                  np.random.default_rng([seed, 0xB0]))
    bcfg = params.config
    for img in images:
        if (img.height, img.width) != tuple(bcfg.image_size):
            raise ContractError(
                f"image {(img.height, img.width)} does not match backbone "
                f"input {tuple(bcfg.image_size)}")
    proj = init_projection(bcfg.cnn_channels[-1] + bcfg.embed_dim,
                           cfg.projection_dim,
                           np.random.default_rng([seed, 0xA1]))
    trainable = [t for _, t in _pretrained_tensors(params)]
    trainable += _projection_tensors(proj)
    state = init_optimizer(trainable, cfg.lr)

    history = []
    n = len(images)
    for epoch in range(cfg.epochs):
        erng = np.random.default_rng([seed, epoch])
        order = erng.permutation(n)
        total = 0.0
        batches = 0
        for start in range(0, n, cfg.batch_pairs):
            sel = order[start:start + cfg.batch_pairs]
            views = []
            for idx in sel:
                v1, v2 = make_views(images[idx], erng, cfg)
                views.append(im.to_model_tensor(v1).data)
                views.append(im.to_model_tensor(v2).data)
            batch = T.const(np.stack(views))
            try:
                with T.Tape() as tape:
                    z = forward_embeddings(batch, params, proj)
                    loss = nt_xent_loss(z, cfg.temperature)
                    tape.backward(loss)
                adam_step(trainable, state)
            except NumericError as exc:
                raise DivergenceError("contrastive", detail=str(exc)) from exc
            T.zero_grads(trainable)
            val = float(loss.data)
            if not math.isfinite(val):
                raise DivergenceError("contrastive")
            total += val
            batches += 1
        history.append(total / batches)
    return params, history
