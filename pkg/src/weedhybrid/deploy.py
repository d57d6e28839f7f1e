"""Deployment artifacts: binary checkpoints, pruning, int8 quantization.

Checkpoint layout (all integers little-endian; see docs/checkpoint-format.md):

    offset 0   magic  b"HWDM"
    offset 4   format version, uint16 (currently 1)
    offset 6   flags, uint16 bitfield (pretrain-only / full / quantized / gan)
    offset 8   tensor count, uint32
    then per tensor:
        name length uint16, name bytes (utf-8, unique per file)
        kind uint8          0 = float32 payload, 1 = int8 quantized
        rank uint8, dims rank x uint32
        kind 1 only: scale float32, zero_point int8 (always 0)
        payload             float32[n] or int8[n], n = product of dims

Quantization is symmetric per-tensor: scale = max|x|/127 (1.0 for all-zero
tensors), zero point 0, codes rounded half away from zero and clamped to
[-127, 127], so every element reconstructs to within scale/2.
"""

from __future__ import annotations

import os
import struct
import tempfile
from dataclasses import dataclass

import numpy as np

from . import backbone as bb
from . import gan as gn
from . import heads as hd
from . import tensor as T
from .errors import ContractError, FormatError

__all__ = [
    "MAGIC",
    "VERSION",
    "FLAG_PRETRAIN",
    "FLAG_FULL",
    "FLAG_QUANTIZED",
    "FLAG_GAN",
    "QuantizedTensor",
    "quantize",
    "dequantize",
    "prune_magnitude",
    "save_checkpoint",
    "load_checkpoint",
    "write_checkpoint",
    "read_checkpoint",
    "encode_backbone_config",
    "decode_backbone_config",
    "model_entries",
    "model_from_entries",
    "save_model",
    "load_model",
    "gan_entries",
    "gan_from_entries",
    "save_gan",
    "load_gan",
    "quantize_entries",
    "quantized_forward",
]

MAGIC = b"HWDM"
VERSION = 1

FLAG_PRETRAIN = 1
FLAG_FULL = 2
FLAG_QUANTIZED = 4
FLAG_GAN = 8

_KIND_FLOAT32 = 0
_KIND_INT8 = 1


# ---------------------------------------------------------------------------
# Quantization and pruning


@dataclass(frozen=True)
class QuantizedTensor:
    """Symmetric int8 codes plus the per-tensor scale (zero point is 0)."""

    codes: np.ndarray  # int8
    scale: float

    @property
    def shape(self) -> tuple:
        return self.codes.shape


def quantize(values: np.ndarray) -> QuantizedTensor:
    """code = clamp(round_half_away(x / scale), -127, 127), scale = max|x|/127."""
    arr = np.asarray(values, dtype=np.float64)
    amax = float(np.abs(arr).max()) if arr.size else 0.0
    scale = amax / 127.0 if amax > 0 else 1.0
    q = arr / scale
    codes = np.where(q >= 0, np.floor(np.abs(q) + 0.5), -np.floor(np.abs(q) + 0.5))
    codes = np.clip(codes, -127, 127).astype(np.int8)
    return QuantizedTensor(codes=codes, scale=scale)


def dequantize(qt: QuantizedTensor) -> np.ndarray:
    return (qt.codes.astype(np.float64) * qt.scale).astype(np.float32)


def prune_magnitude(named_params: list, fraction: float) -> dict:
    """Zero the smallest-|w| fraction of each tensor in place; return keep masks.

    Ties are broken by flat index order (stable sort), so repeated pruning at
    growing fractions zeroes supersets.
    """
    if not 0.0 <= fraction < 1.0:
        raise ContractError(f"prune fraction must lie in [0, 1), got {fraction}")
    masks = {}
    for name, t in named_params:
        data = t.data if isinstance(t, T.Tensor) else t
        flat = data.reshape(-1)
        k = int(fraction * flat.size)
        mask = np.ones(flat.size, dtype=bool)
        if k > 0:
            order = np.argsort(np.abs(flat), kind="stable")
            drop = order[:k]
            flat[drop] = 0
            mask[drop] = False
        masks[name] = mask.reshape(data.shape)
    return masks


# ---------------------------------------------------------------------------
# Binary checkpoint encoding


def save_checkpoint(entries: dict, flags: int = FLAG_FULL) -> bytes:
    """Serialize named tensors (float32 arrays or QuantizedTensor) to bytes."""
    out = [MAGIC, struct.pack("<HH", VERSION, flags),
           struct.pack("<I", len(entries))]
    seen = set()
    for name, value in entries.items():
        if name in seen:
            raise ContractError(f"duplicate tensor name {name!r}")
        seen.add(name)
        encoded = name.encode("utf-8")
        if len(encoded) > 0xFFFF:
            raise ContractError(f"tensor name too long: {name!r}")
        out.append(struct.pack("<H", len(encoded)))
        out.append(encoded)
        if isinstance(value, QuantizedTensor):
            arr = value.codes
            if arr.dtype != np.int8:
                raise ContractError(f"{name}: quantized codes must be int8")
            out.append(struct.pack("<BB", _KIND_INT8, arr.ndim))
            out.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
            out.append(struct.pack("<fb", float(value.scale), 0))
            out.append(arr.tobytes())
        else:
            arr = np.ascontiguousarray(value, dtype="<f4")
            out.append(struct.pack("<BB", _KIND_FLOAT32, arr.ndim))
            out.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
            out.append(arr.tobytes())
    return b"".join(out)


def _take(data: bytes, offset: int, count: int, what: str) -> tuple:
    if offset + count > len(data):
        raise FormatError(f"truncated checkpoint at offset {offset}: "
                          f"needed {count} bytes for {what}")
    return data[offset:offset + count], offset + count


def load_checkpoint(data: bytes) -> tuple:
    """Decode bytes -> (entries dict, flags); inverse of save_checkpoint."""
    raw, offset = _take(data, 0, 4, "magic")
    if raw != MAGIC:
        raise FormatError(f"bad magic {raw!r} at offset 0 (expected {MAGIC!r})")
    raw, offset = _take(data, offset, 4, "version and flags")
    version, flags = struct.unpack("<HH", raw)
    if version != VERSION:
        raise FormatError(f"unsupported version {version} at offset 4")
    raw, offset = _take(data, offset, 4, "tensor count")
    (count,) = struct.unpack("<I", raw)
    entries = {}
    for index in range(count):
        raw, offset = _take(data, offset, 2, f"name length of tensor {index}")
        (name_len,) = struct.unpack("<H", raw)
        raw, offset = _take(data, offset, name_len, f"name of tensor {index}")
        name = raw.decode("utf-8")
        if name in entries:
            raise FormatError(f"duplicate tensor name {name!r} at offset "
                              f"{offset - name_len}")
        raw, offset = _take(data, offset, 2, f"kind/rank of {name}")
        kind, rank = struct.unpack("<BB", raw)
        raw, offset = _take(data, offset, 4 * rank, f"dims of {name}")
        dims = struct.unpack(f"<{rank}I", raw) if rank else ()
        n = int(np.prod(dims, dtype=np.int64)) if rank else 1
        if kind == _KIND_FLOAT32:
            raw, offset = _take(data, offset, 4 * n, f"payload of {name}")
            entries[name] = np.frombuffer(raw, dtype="<f4").reshape(dims).copy()
        elif kind == _KIND_INT8:
            raw, offset = _take(data, offset, 5, f"scale of {name}")
            scale, zero_point = struct.unpack("<fb", raw)
            if zero_point != 0:
                raise FormatError(f"nonzero zero point for {name} at offset "
                                  f"{offset - 1}")
            if not scale > 0:
                raise FormatError(f"non-positive scale for {name} at offset "
                                  f"{offset - 5}")
            raw, offset = _take(data, offset, n, f"codes of {name}")
            codes = np.frombuffer(raw, dtype=np.int8).reshape(dims).copy()
            entries[name] = QuantizedTensor(codes=codes, scale=float(scale))
        else:
            raise FormatError(f"unknown tensor kind {kind} for {name} at "
                              f"offset {offset - 2}")
    if offset != len(data):
        raise FormatError(f"{len(data) - offset} trailing bytes at offset {offset}")
    return entries, flags


def write_checkpoint(path: str, entries: dict, flags: int = FLAG_FULL) -> None:
    """Atomic file write: serialize to a temp file, then rename into place."""
    payload = save_checkpoint(entries, flags)
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".hwdm.tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def read_checkpoint(path: str) -> tuple:
    with open(path, "rb") as fh:
        return load_checkpoint(fh.read())


# ---------------------------------------------------------------------------
# Model bridging: parameter structures <-> named entries


def encode_backbone_config(cfg: bb.BackboneConfig) -> np.ndarray:
    vals = [cfg.image_size[0], cfg.image_size[1], cfg.patch_size,
            cfg.embed_dim, cfg.num_heads, cfg.vit_depth,
            cfg.attention_reduction, cfg.in_channels, cfg.fusion_dim,
            len(cfg.cnn_channels), *cfg.cnn_channels,
            len(cfg.gcn_dims), *cfg.gcn_dims]
    return np.asarray(vals, dtype=np.float32)


def decode_backbone_config(arr: np.ndarray) -> bb.BackboneConfig:
    vals = [int(v) for v in np.asarray(arr).reshape(-1)]
    try:
        (h, w, patch, embed, heads, depth, reduction, in_ch, fusion,
         n_cnn) = vals[:10]
        cnn = tuple(vals[10:10 + n_cnn])
        n_gcn = vals[10 + n_cnn]
        gcn = tuple(vals[11 + n_cnn:11 + n_cnn + n_gcn])
        if len(gcn) != n_gcn:
            raise IndexError
        return bb.BackboneConfig(image_size=(h, w), patch_size=patch,
                                 embed_dim=embed, num_heads=heads,
                                 cnn_channels=cnn, gcn_dims=gcn,
                                 fusion_dim=fusion, vit_depth=depth,
                                 attention_reduction=reduction,
                                 in_channels=in_ch)
    except (IndexError, ValueError, ContractError) as exc:
        raise FormatError(f"invalid backbone config entry: {exc}") from exc


def model_entries(params: bb.BackboneParams,
                  head_params: hd.HeadParams = None) -> dict:
    entries = {"meta.backbone": encode_backbone_config(params.config)}
    named = list(bb.named_parameters(params))
    if head_params is not None:
        named += hd.named_head_parameters(head_params)
    for name, t in named:
        entries[name] = t.data.astype(np.float32, copy=True)
    return entries


def _entry_array(name: str, value) -> np.ndarray:
    return dequantize(value) if isinstance(value, QuantizedTensor) else value


def model_from_entries(entries: dict) -> tuple:
    """Rebuild (BackboneParams, HeadParams or None) from checkpoint entries."""
    if "meta.backbone" not in entries:
        raise FormatError("checkpoint has no meta.backbone entry")
    cfg = decode_backbone_config(_entry_array("meta.backbone",
                                              entries["meta.backbone"]))
    rng = np.random.default_rng(0)
    params = bb.init_backbone(cfg, rng)
    has_heads = any(n.startswith("head.") for n in entries)
    head_params = hd.init_heads(cfg, rng) if has_heads else None
    named = dict(bb.named_parameters(params))
    if head_params is not None:
        named.update(hd.named_head_parameters(head_params))
    for name, t in named.items():
        if name not in entries:
            raise FormatError(f"checkpoint is missing tensor {name}")
        arr = _entry_array(name, entries[name])
        if tuple(arr.shape) != t.shape:
            raise FormatError(f"tensor {name} has shape {tuple(arr.shape)}, "
                              f"expected {t.shape}")
        t.data = arr.astype(np.float32, copy=True)
    return params, head_params


def save_model(path: str, params: bb.BackboneParams,
               head_params: hd.HeadParams = None,
               flags: int = None) -> None:
    if flags is None:
        flags = FLAG_FULL if head_params is not None else FLAG_PRETRAIN
    write_checkpoint(path, model_entries(params, head_params), flags)


def load_model(path: str) -> tuple:
    entries, flags = read_checkpoint(path)
    params, head_params = model_from_entries(entries)
    return params, head_params, flags


def gan_entries(params: gn.GanParams) -> dict:
    cfg = params.config
    meta = np.asarray([cfg.latent_dim, cfg.class_count, cfg.image_size[0],
                       cfg.image_size[1], cfg.base_channels, cfg.label_dim],
                      dtype=np.float32)
    entries = {"meta.gan": meta,
               "meta.gan_steps": np.asarray([params.trained_steps],
                                            dtype=np.float32)}
    for name, t in gn.named_gan_parameters(params):
        entries[name] = t.data.astype(np.float32, copy=True)
    return entries


def gan_from_entries(entries: dict) -> gn.GanParams:
    if "meta.gan" not in entries:
        raise FormatError("checkpoint has no meta.gan entry")
    vals = [int(v) for v in _entry_array("meta.gan", entries["meta.gan"])]
    try:
        latent, classes, h, w, base, label_dim = vals
        cfg = gn.GanConfig(latent_dim=latent, class_count=classes,
                           image_size=(h, w), base_channels=base,
                           label_dim=label_dim)
    except (ValueError, ContractError) as exc:
        raise FormatError(f"invalid gan config entry: {exc}") from exc
    params = gn.init_gan(cfg, np.random.default_rng(0))
    for name, t in gn.named_gan_parameters(params):
        if name not in entries:
            raise FormatError(f"checkpoint is missing tensor {name}")
        arr = _entry_array(name, entries[name])
        if tuple(arr.shape) != t.shape:
            raise FormatError(f"tensor {name} has shape {tuple(arr.shape)}, "
                              f"expected {t.shape}")
        t.data = arr.astype(np.float32, copy=True)
    if "meta.gan_steps" in entries:
        params.trained_steps = int(_entry_array(
            "meta.gan_steps", entries["meta.gan_steps"])[0])
    return params


def save_gan(path: str, params: gn.GanParams) -> None:
    write_checkpoint(path, gan_entries(params), flags=FLAG_GAN)


def load_gan(path: str) -> gn.GanParams:
    entries, flags = read_checkpoint(path)
    if not flags & FLAG_GAN:
        raise ContractError("checkpoint does not hold a GAN")
    return gan_from_entries(entries)


def quantize_entries(entries: dict) -> dict:
    """Quantize every non-meta tensor; meta entries stay exact float32."""
    out = {}
    for name, value in entries.items():
        if name.startswith("meta.") or isinstance(value, QuantizedTensor):
            out[name] = value
        else:
            out[name] = quantize(value)
    return out


def quantized_forward(source, image) -> hd.Prediction:
    """Run inference from a quantized checkpoint (weights int8 on disk,
    dequantized to float32 on use; no gradients are recorded).

    `source` is a checkpoint path or an (entries, flags) pair; `image` is a
    (3, H, W) model-scale array or tensor.
    """
    if isinstance(source, (str, os.PathLike)):
        entries, flags = read_checkpoint(source)
    else:
        entries, flags = source
    if not flags & FLAG_QUANTIZED:
        raise ContractError("checkpoint is not quantized")
    params, head_params = model_from_entries(entries)
    if head_params is None:
        raise ContractError("checkpoint has no head parameters")
    x = image if isinstance(image, T.Tensor) else T.const(np.asarray(image))
    features = bb.backbone_forward(x, params)
    return hd.predict(features, head_params)
