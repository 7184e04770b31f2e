"""Desk-scale trainable network: conv backbone, projection head, score head.

The backbone is a plain stack of stride-2 3x3 conv+ReLU stages followed
by global average pooling and a linear map to the feature width. The
projection head is a two-hidden-layer MLP ending in a rectifier (its
output is non-negative by construction); the score head is a
two-hidden-layer MLP ending in a softmax over {normal, augmented}.

Everything is explicit numpy: forward caches what backward needs, and
backward returns parameter gradients plus the gradient at the last conv
stage's activations (used for saliency maps).
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from .errors import CheckpointError, ConfigError


@dataclass(frozen=True)
class ModelConfig:
    input_channels: int = 7
    conv_stages: tuple[tuple[int, int, int], ...] = (
        (16, 3, 2),
        (32, 3, 2),
        (64, 3, 2),
        (128, 3, 2),
    )  # (filters, kernel, stride) per stage
    h_dim: int = 128
    z_dim: int = 32
    s_dim: int = 2
    g_hidden: tuple[int, int] = (64, 64)
    k_hidden: tuple[int, int] = (32, 32)
    seed: int = 0
    dtype: str = "float32"

    def __post_init__(self) -> None:
        if not 1 <= self.input_channels <= 7:
            raise ConfigError("input_channels must be in 1..7")
        if self.s_dim != 2:
            raise ConfigError("score head is binary; s_dim must be 2")
        if not self.conv_stages:
            raise ConfigError("need at least one conv stage")
        for filters, kernel, stride in self.conv_stages:
            if filters < 1 or kernel < 1 or stride < 1:
                raise ConfigError("conv stage values must be positive")
            if kernel % 2 == 0:
                raise ConfigError("conv kernels must be odd (same padding)")
        if len(self.g_hidden) != 2 or len(self.k_hidden) != 2:
            raise ConfigError("projection and score heads use two hidden layers")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError("dtype must be float32 or float64")

    def np_dtype(self) -> np.dtype:
        return np.dtype(self.dtype)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ModelConfig":
        raw = json.loads(text)
        raw["conv_stages"] = tuple(tuple(s) for s in raw["conv_stages"])
        raw["g_hidden"] = tuple(raw["g_hidden"])
        raw["k_hidden"] = tuple(raw["k_hidden"])
        return cls(**raw)

    def hash(self) -> bytes:
        return hashlib.sha256(self.to_json().encode("utf-8")).digest()


@dataclass
class ModelState:
    config: ModelConfig
    params: dict[str, np.ndarray]
    opt_m: dict[str, np.ndarray]
    opt_v: dict[str, np.ndarray]
    step: int = 0


def _param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    shapes: dict[str, tuple[int, ...]] = {}
    c_in = cfg.input_channels
    for i, (filters, kernel, _) in enumerate(cfg.conv_stages):
        shapes[f"conv{i}_W"] = (kernel, kernel, c_in, filters)
        shapes[f"conv{i}_b"] = (filters,)
        c_in = filters
    shapes["dense_h_W"] = (c_in, cfg.h_dim)
    shapes["dense_h_b"] = (cfg.h_dim,)
    g_dims = (cfg.h_dim, *cfg.g_hidden, cfg.z_dim)
    for i in range(3):
        shapes[f"g{i}_W"] = (g_dims[i], g_dims[i + 1])
        shapes[f"g{i}_b"] = (g_dims[i + 1],)
    k_dims = (cfg.z_dim, *cfg.k_hidden, cfg.s_dim)
    for i in range(3):
        shapes[f"k{i}_W"] = (k_dims[i], k_dims[i + 1])
        shapes[f"k{i}_b"] = (k_dims[i + 1],)
    return shapes


def init_state(cfg: ModelConfig) -> ModelState:
    """He fan-in initialization, seed-controlled per parameter."""
    dtype = cfg.np_dtype()
    params: dict[str, np.ndarray] = {}
    for idx, (name, shape) in enumerate(sorted(_param_shapes(cfg).items())):
        rng = np.random.default_rng(
            np.random.SeedSequence(entropy=cfg.seed, spawn_key=(idx,))
        )
        if name.endswith("_b"):
            # Small positive bias keeps rectified units alive at init.
            params[name] = np.full(shape, 0.01, dtype=dtype)
        else:
            fan_in = int(np.prod(shape[:-1]))
            std = np.sqrt(2.0 / fan_in)
            params[name] = (rng.standard_normal(shape) * std).astype(dtype)
    opt_m = {k: np.zeros_like(v) for k, v in params.items()}
    opt_v = {k: np.zeros_like(v) for k, v in params.items()}
    return ModelState(cfg, params, opt_m, opt_v, step=0)


# Conv plumbing: im2col/col2im with an explicit loop over kernel offsets.


def _conv_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray, stride: int):
    batch, _, height, width = x.shape
    kernel = w.shape[0]
    pad = kernel // 2
    h_out = (height + 2 * pad - kernel) // stride + 1
    w_out = (width + 2 * pad - kernel) // stride + 1
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    c_in = x.shape[1]
    cols = np.empty((batch, h_out, w_out, kernel, kernel, c_in), dtype=x.dtype)
    for ki in range(kernel):
        for kj in range(kernel):
            patch = xp[:, :, ki : ki + stride * h_out : stride, kj : kj + stride * w_out : stride]
            cols[:, :, :, ki, kj, :] = patch.transpose(0, 2, 3, 1)
    flat = cols.reshape(batch * h_out * w_out, kernel * kernel * c_in)
    w_mat = w.reshape(kernel * kernel * c_in, -1)
    out = flat @ w_mat + b
    out = out.reshape(batch, h_out, w_out, -1).transpose(0, 3, 1, 2)
    return out, (flat, x.shape, stride, kernel)


def _conv_backward(d_out: np.ndarray, w: np.ndarray, cache) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    flat, x_shape, stride, kernel = cache
    batch, c_in, height, width = x_shape
    pad = kernel // 2
    _, c_out, h_out, w_out = d_out.shape
    d_flat = d_out.transpose(0, 2, 3, 1).reshape(-1, c_out)
    w_mat = w.reshape(kernel * kernel * c_in, c_out)
    d_w = (flat.T @ d_flat).reshape(w.shape)
    d_b = d_flat.sum(axis=0)
    d_cols = (d_flat @ w_mat.T).reshape(batch, h_out, w_out, kernel, kernel, c_in)
    d_xp = np.zeros((batch, c_in, height + 2 * pad, width + 2 * pad), dtype=d_out.dtype)
    for ki in range(kernel):
        for kj in range(kernel):
            d_xp[:, :, ki : ki + stride * h_out : stride, kj : kj + stride * w_out : stride] += (
                d_cols[:, :, :, ki, kj, :].transpose(0, 3, 1, 2)
            )
    d_x = d_xp[:, :, pad : pad + height, pad : pad + width]
    return d_x, d_w, d_b


def _softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


@dataclass
class ForwardPass:
    h: np.ndarray  # (B, h_dim)
    z: np.ndarray  # (B, z_dim) non-negative
    s: np.ndarray  # (B, 2) softmax rows
    last_conv: np.ndarray  # (B, C, h', w') activations of the final stage
    cache: dict = field(repr=False, default_factory=dict)


def forward(state: ModelState, x: np.ndarray) -> ForwardPass:
    """Run the network on a batch of (C, H, W) inputs."""
    cfg = state.config
    x = np.asarray(x, dtype=cfg.np_dtype())
    if x.ndim == 3:
        x = x[None]
    if x.ndim != 4 or x.shape[1] != cfg.input_channels:
        raise ConfigError(
            f"expected (B, {cfg.input_channels}, H, W) input, got {x.shape}"
        )
    p = state.params
    cache: dict = {"conv": []}
    act = x
    for i, (_, _, stride) in enumerate(cfg.conv_stages):
        out, conv_cache = _conv_forward(act, p[f"conv{i}_W"], p[f"conv{i}_b"], stride)
        mask = out > 0
        act = out * mask
        cache["conv"].append((conv_cache, mask))
    last_conv = act
    gap = act.mean(axis=(2, 3))
    cache["gap_in_shape"] = act.shape
    cache["gap"] = gap
    h = gap @ p["dense_h_W"] + p["dense_h_b"]
    cache["h"] = h

    def mlp(prefix: str, inp: np.ndarray, n_layers: int, rectify_last: bool):
        acts = [inp]
        masks = []
        cur = inp
        for li in range(n_layers):
            cur = cur @ p[f"{prefix}{li}_W"] + p[f"{prefix}{li}_b"]
            if li < n_layers - 1 or rectify_last:
                m = cur > 0
                cur = cur * m
                masks.append(m)
            acts.append(cur)
        return cur, acts, masks

    z, g_acts, g_masks = mlp("g", h, 3, rectify_last=True)
    cache["g_acts"], cache["g_masks"] = g_acts, g_masks
    logits, k_acts, k_masks = mlp("k", z, 3, rectify_last=False)
    cache["k_acts"], cache["k_masks"] = k_acts, k_masks
    s = _softmax(logits)
    cache["s"] = s
    return ForwardPass(h=h, z=z, s=s, last_conv=last_conv, cache=cache)


def backward(
    state: ModelState,
    fwd: ForwardPass,
    grad_z: np.ndarray | None,
    grad_s: np.ndarray | None,
    grad_logits: np.ndarray | None = None,
) -> tuple[dict[str, np.ndarray], np.ndarray]:
    """Backpropagate output gradients to every parameter.

    Upstream gradients are given w.r.t. the softmax output (grad_s) or,
    alternatively, w.r.t. the score-head logits (grad_logits) -- the
    latter avoids the vanishing softmax Jacobian on saturated examples.
    Returns (parameter gradients, gradient at the last conv activations).
    """
    cfg = state.config
    p = state.params
    cache = fwd.cache
    dtype = cfg.np_dtype()
    grads: dict[str, np.ndarray] = {}

    s = cache["s"]
    if grad_logits is not None:
        d_logits = np.asarray(grad_logits, dtype=dtype)
    else:
        if grad_s is None:
            grad_s = np.zeros_like(s)
        grad_s = np.asarray(grad_s, dtype=dtype)
        # Softmax Jacobian applied to the upstream gradient.
        d_logits = s * (grad_s - (grad_s * s).sum(axis=1, keepdims=True))

    def mlp_backward(prefix: str, acts, masks, d_out, rectified_last: bool):
        d_cur = d_out
        mask_idx = len(masks) - 1
        for li in reversed(range(3)):
            if li < 2 or rectified_last:
                d_cur = d_cur * masks[mask_idx]
                mask_idx -= 1
            grads[f"{prefix}{li}_W"] = acts[li].T @ d_cur
            grads[f"{prefix}{li}_b"] = d_cur.sum(axis=0)
            d_cur = d_cur @ p[f"{prefix}{li}_W"].T
        return d_cur

    d_z_from_k = mlp_backward("k", cache["k_acts"], cache["k_masks"], d_logits, False)
    d_z = d_z_from_k
    if grad_z is not None:
        d_z = d_z + np.asarray(grad_z, dtype=dtype)
    d_h = mlp_backward("g", cache["g_acts"], cache["g_masks"], d_z, True)

    grads["dense_h_W"] = cache["gap"].T @ d_h
    grads["dense_h_b"] = d_h.sum(axis=0)
    d_gap = d_h @ p["dense_h_W"].T
    b, c, hh, ww = cache["gap_in_shape"]
    d_act = np.broadcast_to(
        d_gap[:, :, None, None] / (hh * ww), (b, c, hh, ww)
    ).astype(dtype)
    d_last_conv = d_act
    for i in reversed(range(len(cfg.conv_stages))):
        conv_cache, mask = cache["conv"][i]
        d_act = d_act * mask
        d_act, d_w, d_b = _conv_backward(d_act, p[f"conv{i}_W"], conv_cache)
        grads[f"conv{i}_W"] = d_w
        grads[f"conv{i}_b"] = d_b
    return grads, d_last_conv


# Checkpoints: magic "SMCK", version, config hash + embedded config JSON,
# then parameter and optimizer-moment blobs, little-endian.

_CKPT_MAGIC = b"SMCK"
_CKPT_VERSION = 1
_DTYPE_CODES = {"float32": 4, "float64": 8}


def save_checkpoint(state: ModelState, path: str | Path) -> None:
    cfg = state.config
    cfg_json = cfg.to_json().encode("utf-8")
    entries: list[tuple[str, np.ndarray]] = []
    for name in sorted(state.params):
        entries.append((f"p:{name}", state.params[name]))
        entries.append((f"m:{name}", state.opt_m[name]))
        entries.append((f"v:{name}", state.opt_v[name]))
    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC)
        fh.write(struct.pack("<H", _CKPT_VERSION))
        fh.write(cfg.hash())
        fh.write(struct.pack("<I", len(cfg_json)))
        fh.write(cfg_json)
        fh.write(struct.pack("<BQI", _DTYPE_CODES[cfg.dtype], state.step, len(entries)))
        for name, arr in entries:
            nb = name.encode("ascii")
            fh.write(struct.pack("<H", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<B", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(np.ascontiguousarray(arr).tobytes())


def load_checkpoint(path: str | Path, config: ModelConfig | None = None) -> ModelState:
    """Restore a ModelState; verifies magic, version, and config hash."""
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
        if blob[:4] != _CKPT_MAGIC:
            raise CheckpointError(f"{path}: bad magic")
        (version,) = struct.unpack_from("<H", blob, 4)
        if version != _CKPT_VERSION:
            raise CheckpointError(f"{path}: unsupported version {version}")
        stored_hash = blob[6:38]
        (cfg_len,) = struct.unpack_from("<I", blob, 38)
        cfg_json = blob[42 : 42 + cfg_len].decode("utf-8")
        stored_cfg = ModelConfig.from_json(cfg_json)
        if stored_cfg.hash() != stored_hash:
            raise CheckpointError(f"{path}: config hash mismatch")
        if config is not None and config.hash() != stored_hash:
            raise CheckpointError(f"{path}: checkpoint belongs to a different config")
        pos = 42 + cfg_len
        dtype_code, step, n_entries = struct.unpack_from("<BQI", blob, pos)
        pos += 13
        if dtype_code != _DTYPE_CODES[stored_cfg.dtype]:
            raise CheckpointError(f"{path}: dtype mismatch")
        dtype = stored_cfg.np_dtype()
        arrays: dict[str, np.ndarray] = {}
        for _ in range(n_entries):
            (name_len,) = struct.unpack_from("<H", blob, pos)
            pos += 2
            name = blob[pos : pos + name_len].decode("ascii")
            pos += name_len
            (ndim,) = struct.unpack_from("<B", blob, pos)
            pos += 1
            shape = struct.unpack_from(f"<{ndim}I", blob, pos)
            pos += 4 * ndim
            count = int(np.prod(shape)) if ndim else 1
            nbytes = count * dtype.itemsize
            if pos + nbytes > len(blob):
                raise CheckpointError(f"{path}: truncated blob for {name}")
            arrays[name] = (
                np.frombuffer(blob[pos : pos + nbytes], dtype=dtype.newbyteorder("<"))
                .reshape(shape)
                .astype(dtype)
            )
            pos += nbytes
    except CheckpointError:
        raise
    except Exception as exc:
        raise CheckpointError(f"{path}: corrupt checkpoint ({exc})") from exc
    expected = _param_shapes(stored_cfg)
    params, opt_m, opt_v = {}, {}, {}
    for name, shape in expected.items():
        for prefix, target in (("p:", params), ("m:", opt_m), ("v:", opt_v)):
            key = prefix + name
            if key not in arrays:
                raise CheckpointError(f"{path}: missing array {key}")
            if arrays[key].shape != shape:
                raise CheckpointError(f"{path}: shape mismatch for {key}")
            target[name] = arrays[key]
    return ModelState(stored_cfg, params, opt_m, opt_v, step=step)
