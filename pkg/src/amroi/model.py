"""The five network variants: shared conv extractor, transformer-encoder or
concatenation fusion, and local/global regressors.

Shapes inside a batch: modalities ``(B, M, S, S)`` -> features ``(B, M, D)``.
The fused QKV projection is a ``D x 3D`` matrix whose columns are laid out as
``[q | k | v]``, each block split into ``heads`` contiguous slices of width
``D / heads``.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import numerics as nx
from .numerics import Tensor

VARIANTS = ("Base", "MultiPatch", "AttMultiPatch", "MultiROI", "AttMultiROI")
PROPOSED = "AttMultiROI"
CKPT_MAGIC = b"AMRW"


class ModelError(ValueError):
    """Invalid model configuration or input."""


@dataclass(frozen=True)
class EncoderConfig:
    d_model: int = 32
    heads: int = 4
    layers: int = 2
    n_tokens: int = 15  # excluding the BMD token
    mlp_hidden: int = 64
    ln_eps: float = 1e-5

    def __post_init__(self):
        if self.d_model % self.heads:
            raise ModelError(f"D={self.d_model} is not divisible by {self.heads} heads")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.heads


@dataclass(frozen=True)
class ModelConfig:
    variant: str = PROPOSED
    crop_size: int = 64
    widths: tuple[int, ...] = (8, 16, 32)
    d_model: int = 32
    heads: int = 4
    layers: int = 2
    mlp_hidden: int = 64
    reg_hidden: int = 16
    patch_n: int = 3
    local_weight: float = 1.0
    conv_init: str = "he"  # "he" (normal, sqrt(2/fan_in)) or "uniform" (+-1/sqrt(fan_in))

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ModelError(f"unknown variant {self.variant!r}; choose from {VARIANTS}")
        if self.crop_size % (2 ** len(self.widths)):
            raise ModelError(f"crop size {self.crop_size} not divisible by 2^{len(self.widths)}")
        if self.d_model % self.heads:
            raise ModelError(f"D={self.d_model} is not divisible by {self.heads} heads")
        if self.conv_init not in ("he", "uniform"):
            raise ModelError(f"conv_init must be 'he' or 'uniform', got {self.conv_init!r}")

    @property
    def layout(self) -> str:
        if self.variant == "Base":
            return "whole"
        return "patch" if "Patch" in self.variant else "roi"

    @property
    def n_modalities(self) -> int:
        return {"whole": 1, "patch": self.patch_n ** 2, "roi": 15}[self.layout]

    @property
    def attentive(self) -> bool:
        return self.variant.startswith("Att")

    @property
    def has_locals(self) -> bool:
        return self.variant != "Base"

    def encoder(self) -> EncoderConfig:
        return EncoderConfig(self.d_model, self.heads, self.layers, self.n_modalities,
                             self.mlp_hidden)


# -- initialisation -----------------------------------------------------------------


def init_params(cfg: ModelConfig, seed: int = 0, dtype=np.float32) -> dict[str, Tensor]:
    """Conv kernels per ``cfg.conv_init``, Uniform(+-1/sqrt(fan_in)) dense weights,
    zero biases and positions, N(0, 0.02) BMD token."""
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(3,)))
    params: dict[str, np.ndarray] = {}

    def uniform(shape, fan_in):
        bound = 1.0 / math.sqrt(fan_in)
        return rng.uniform(-bound, bound, size=shape)

    def he(shape, fan_in):
        # keeps activation scale through the ReLU stack
        return rng.normal(0.0, math.sqrt(2.0 / fan_in), size=shape)

    conv_init = he if cfg.conv_init == "he" else uniform
    c_in = 1
    for bi, width in enumerate(cfg.widths):
        for ci in range(2):
            src = c_in if ci == 0 else width
            params[f"extractor.block{bi}.conv{ci}.weight"] = conv_init((width, src, 3, 3), src * 9)
            params[f"extractor.block{bi}.conv{ci}.bias"] = np.zeros(width)
        c_in = width
    D = cfg.d_model
    params["extractor.proj.weight"] = uniform((c_in, D), c_in)
    params["extractor.proj.bias"] = np.zeros(D)

    if cfg.attentive:
        enc = cfg.encoder()
        params["encoder.E_bmd"] = rng.normal(0.0, 0.02, size=D)
        params["encoder.E_pos"] = np.zeros((enc.n_tokens + 1, D))
        for li in range(enc.layers):
            p = f"encoder.layer{li}."
            params[p + "ln1.gamma"] = np.ones(D)
            params[p + "ln1.beta"] = np.zeros(D)
            params[p + "qkv.weight"] = uniform((D, 3 * D), D)
            params[p + "msa.weight"] = uniform((enc.heads * enc.head_dim, D), D)
            params[p + "ln2.gamma"] = np.ones(D)
            params[p + "ln2.beta"] = np.zeros(D)
            params[p + "mlp.fc1.weight"] = uniform((D, enc.mlp_hidden), D)
            params[p + "mlp.fc1.bias"] = np.zeros(enc.mlp_hidden)
            params[p + "mlp.fc2.weight"] = uniform((enc.mlp_hidden, D), enc.mlp_hidden)
            params[p + "mlp.fc2.bias"] = np.zeros(D)

    h = cfg.reg_hidden
    g_in = D * cfg.n_modalities if (cfg.has_locals and not cfg.attentive) else D
    params["global.fc1.weight"] = uniform((g_in, h), g_in)
    params["global.fc1.bias"] = np.zeros(h)
    params["global.fc2.weight"] = uniform((h, 1), h)
    params["global.fc2.bias"] = np.zeros(1)
    if cfg.has_locals:
        M = cfg.n_modalities
        params["local.fc1.weight"] = uniform((M, D, h), D)
        params["local.fc1.bias"] = np.zeros((M, 1, h))
        params["local.fc2.weight"] = uniform((M, h, 1), h)
        params["local.fc2.bias"] = np.zeros((M, 1, 1))
    return {k: Tensor(v.astype(dtype), requires_grad=True) for k, v in params.items()}


def no_decay_names(params) -> set[str]:
    """Parameters exempt from weight decay: biases, norms, BMD token, positions."""
    return {n for n in params
            if n.endswith((".bias", ".gamma", ".beta")) or n.endswith(("E_bmd", "E_pos"))}


# -- building blocks ---------------------------------------------------------------


def extract_features(x, params: dict[str, Tensor], widths, d_model: int) -> Tensor:
    """Shared extractor: ``(B, M, S, S)`` (or ``(M, S, S)``) -> ``(B, M, D)``."""
    single = False
    xt = x if isinstance(x, Tensor) else Tensor(np.asarray(x))
    if xt.ndim == 3:
        xt = xt.reshape((1,) + xt.shape)
        single = True
    if xt.ndim != 4 or xt.shape[-1] != xt.shape[-2]:
        raise ModelError(f"extractor expects square modalities (B, M, S, S), got {xt.shape}")
    B, M, S, _ = xt.shape
    if S % (2 ** len(widths)):
        raise ModelError(f"crop size {S} does not fit {len(widths)} pooling stages")
    h = xt.reshape(B * M, 1, S, S)
    for bi in range(len(widths)):
        for ci in range(2):
            p = f"extractor.block{bi}.conv{ci}."
            if p + "weight" not in params:
                raise ModelError(f"missing extractor parameter {p}weight")
            h = nx.relu(nx.conv2d(h, params[p + "weight"], params[p + "bias"], stride=1, pad=1))
        h = nx.max_pool2d(h, 2)
    f = nx.linear(nx.global_avg_pool(h), params["extractor.proj.weight"],
                  params["extractor.proj.bias"])
    f = f.reshape(B, M, d_model)
    return f.reshape(M, d_model) if single else f


def multi_head_attention(z: Tensor, w_qkv: Tensor, w_msa: Tensor, heads: int,
                         attn_out: list | None = None) -> Tensor:
    """``softmax(q k^T / sqrt(D_h)) v`` per head, heads concatenated, then ``U_msa``."""
    B, T, D = z.shape
    dh = D // heads
    qkv = nx.matmul(z, w_qkv).reshape(B, T, 3, heads, dh).transpose(2, 0, 3, 1, 4)
    q, k, v = qkv[0], qkv[1], qkv[2]
    scores = nx.matmul(q, k.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(dh))
    attn = nx.softmax_rows(scores)
    if attn_out is not None:
        attn_out.append(attn.data)
    sa = nx.matmul(attn, v).transpose(0, 2, 1, 3).reshape(B, T, heads * dh)
    return nx.matmul(sa, w_msa)


def encoder_forward(features: Tensor, params: dict[str, Tensor], cfg: EncoderConfig,
                    attn_out: list | None = None) -> tuple[Tensor, Tensor]:
    """Pre-norm transformer encoder over ``[E_bmd; f_1..f_N] + E_pos``.

    Returns ``(f_global, z_L)`` where ``f_global`` is the mean over all
    ``N + 1`` output rows. Accepts ``(N, D)`` or ``(B, N, D)`` features.
    """
    single = features.ndim == 2
    f = features.reshape((1,) + features.shape) if single else features
    B, N, D = f.shape
    if N != cfg.n_tokens or D != cfg.d_model:
        raise ModelError(f"encoder expects {cfg.n_tokens} tokens of width {cfg.d_model}, got {N}x{D}")
    if D % cfg.heads:
        raise nx.ConfigurationError(f"D={D} not divisible by {cfg.heads} heads")
    token = params["encoder.E_bmd"].reshape(1, 1, D) + Tensor(np.zeros((B, 1, D), f.dtype))
    z = nx.concat([token, f], axis=1) + params["encoder.E_pos"]
    for li in range(cfg.layers):
        p = f"encoder.layer{li}."
        h = nx.layer_norm(z, params[p + "ln1.gamma"], params[p + "ln1.beta"], cfg.ln_eps)
        z = z + multi_head_attention(h, params[p + "qkv.weight"], params[p + "msa.weight"],
                                     cfg.heads, attn_out)
        h = nx.layer_norm(z, params[p + "ln2.gamma"], params[p + "ln2.beta"], cfg.ln_eps)
        h = nx.gelu(nx.linear(h, params[p + "mlp.fc1.weight"], params[p + "mlp.fc1.bias"]))
        z = z + nx.linear(h, params[p + "mlp.fc2.weight"], params[p + "mlp.fc2.bias"])
    f_global = nx.mean_rows(z)
    if single:
        return f_global.reshape(D), z.reshape(N + 1, D)
    return f_global, z


def concat_fuse(features) -> Tensor:
    """Concatenate modality features in order: ``(B, M, D) -> (B, M*D)``."""
    if isinstance(features, (list, tuple)):
        if not features:
            raise ModelError("no features to fuse")
        return nx.concat(list(features), axis=-1)
    if features.ndim == 2:
        return features.reshape(-1)
    B, M, D = features.shape
    return features.reshape(B, M * D)


def _regress(x: Tensor, params, prefix: str) -> Tensor:
    h = nx.relu(nx.linear(x, params[prefix + "fc1.weight"], params[prefix + "fc1.bias"]))
    return nx.linear(h, params[prefix + "fc2.weight"], params[prefix + "fc2.bias"])


def local_regressors(features: Tensor, params) -> Tensor:
    """One regressor per modality, batched: ``(B, M, D) -> (B, M)``."""
    B, M, _ = features.shape
    out = _regress(features.transpose(1, 0, 2), params, "local.")  # (M, B, 1)
    return out.reshape(M, B).transpose(1, 0)


# -- model -------------------------------------------------------------------------


@dataclass
class Model:
    config: ModelConfig
    params: dict[str, Tensor] = field(default_factory=dict)
    target_mean: float = 0.0
    target_scale: float = 1.0

    @classmethod
    def create(cls, config: ModelConfig, seed: int = 0, dtype=np.float32) -> "Model":
        return cls(config, init_params(config, seed, dtype))

    @property
    def no_decay(self) -> set[str]:
        return no_decay_names(self.params)

    def forward(self, x, attn_out: list | None = None) -> tuple[Tensor, Tensor | None]:
        """Return ``(global_pred (B,), local_preds (B, M) or None)`` in model units."""
        cfg = self.config
        xt = np.asarray(x.data if hasattr(x, "names") else x)
        if xt.ndim == 3:
            xt = xt[None]
        if xt.shape[1] != cfg.n_modalities:
            raise ModelError(
                f"{cfg.variant} expects {cfg.n_modalities} modalities, got {xt.shape[1]}")
        dtype = self.params["extractor.proj.weight"].dtype
        f = extract_features(Tensor(xt.astype(dtype, copy=False)), self.params,
                             cfg.widths, cfg.d_model)
        B = f.shape[0]
        if not cfg.has_locals:
            g = _regress(f.reshape(B, cfg.d_model), self.params, "global.")
            return g.reshape(B), None
        if cfg.attentive:
            fused, _ = encoder_forward(f, self.params, cfg.encoder(), attn_out)
        else:
            fused = concat_fuse(f)
        g = _regress(fused, self.params, "global.").reshape(B)
        return g, local_regressors(f, self.params)

    def loss(self, x, target) -> Tensor:
        g, loc = self.forward(x)
        return joint_loss(g, loc, target, self.config.local_weight)

    def predict(self, x) -> np.ndarray:
        """Global prediction in target units; local regressors are not evaluated."""
        cfg = self.config
        with nx.no_grad():
            xt = np.asarray(x.data if hasattr(x, "names") else x)
            if xt.ndim == 3:
                xt = xt[None]
            dtype = self.params["extractor.proj.weight"].dtype
            f = extract_features(Tensor(xt.astype(dtype, copy=False)), self.params,
                                 cfg.widths, cfg.d_model)
            B = f.shape[0]
            if not cfg.has_locals:
                fused = f.reshape(B, cfg.d_model)
            elif cfg.attentive:
                fused, _ = encoder_forward(f, self.params, cfg.encoder())
            else:
                fused = concat_fuse(f)
            g = _regress(fused, self.params, "global.").data.reshape(B)
        return g.astype(np.float64) * self.target_scale + self.target_mean


def joint_loss(global_pred: Tensor, local_preds: Tensor | None, target,
               local_weight: float = 1.0) -> Tensor:
    """Batch mean of ``(g - t)^2 + w * mean_i (l_i - t)^2``; no local term when absent."""
    t = np.asarray(target, dtype=global_pred.dtype).reshape(global_pred.shape)
    d = global_pred - Tensor(t)
    total = (d * d).mean()
    if local_preds is not None and local_weight:
        dl = local_preds - Tensor(t[..., None])
        total = total + (dl * dl).mean() * local_weight
    return total


# -- checkpoints ---------------------------------------------------------------------


def save_checkpoint(path: Path | str, model: Model, meta: dict | None = None) -> None:
    """``AMRW`` | u32 header length | JSON header | f32 payloads in directory order."""
    directory, offset, blobs = [], 0, []
    for name, t in model.params.items():
        blob = np.ascontiguousarray(t.data, dtype="<f4").tobytes()
        directory.append({"name": name, "shape": list(t.shape), "offset": offset})
        offset += len(blob)
        blobs.append(blob)
    cfg = asdict(model.config)
    cfg["widths"] = list(cfg["widths"])
    header = {
        "variant": model.config.variant,
        "config": cfg,
        "target_mean": model.target_mean,
        "target_scale": model.target_scale,
        "tensors": directory,
        "meta": meta or {},
    }
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<I", len(hbytes)))
        fh.write(hbytes)
        for blob in blobs:
            fh.write(blob)


def load_checkpoint(path: Path | str, dtype=np.float32) -> tuple[Model, dict]:
    path = Path(path)
    raw = path.read_bytes()
    if raw[:4] != CKPT_MAGIC:
        raise ModelError(f"{path}: not a checkpoint (magic {raw[:4]!r})")
    (hlen,) = struct.unpack_from("<I", raw, 4)
    try:
        header = json.loads(raw[8:8 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ModelError(f"{path}: corrupt header") from exc
    cfgd = dict(header["config"])
    cfgd["widths"] = tuple(cfgd["widths"])
    cfg = ModelConfig(**cfgd)
    base = 8 + hlen
    params = {}
    for entry in header["tensors"]:
        n = int(np.prod(entry["shape"])) if entry["shape"] else 1
        start = base + entry["offset"]
        if start + 4 * n > len(raw):
            raise ModelError(f"{path}: truncated tensor {entry['name']}")
        arr = np.frombuffer(raw, dtype="<f4", count=n, offset=start).reshape(entry["shape"])
        params[entry["name"]] = Tensor(arr.astype(dtype), requires_grad=True)
    model = Model(cfg, params, header["target_mean"], header["target_scale"])
    return model, header.get("meta", {})
