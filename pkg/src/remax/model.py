"""A small mask transformer: patch encoder, cross-attention decoder stages, three heads.

Feature maps live on the patch grid, so ``HW`` below means
``(H / patch) * (W / patch)``. Each decoder stage computes attention keys from
``x_sem``; those keys are also the input of the auxiliary semantic head.
"""

from __future__ import annotations

import math
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping

import numpy as np

from .relax import RelaxConfig, SemanticMaskGT, StageOutput, remask
from .tensor import Tensor, add, matmul, reduce, scale, silu, softmax

SEMANTIC_PREFIX = "sem."

# multiply-adds spent in the semantic head; inference must leave this untouched
COUNTERS = {"semantic_head_macs": 0}


@dataclass
class ModelConfig:
    h: int = 32
    w: int = 32
    n_q: int = 8
    n_c: int = 6
    d_q: int = 32
    d_pix: int = 32
    d_sem: int = 32
    stages: int = 4
    patch: int = 4
    seed: int = 0

    @property
    def grid(self) -> tuple[int, int]:
        return self.h // self.patch, self.w // self.patch

    @property
    def hw(self) -> int:
        gh, gw = self.grid
        return gh * gw

    def validate(self) -> None:
        for name in ("h", "w", "n_q", "n_c", "d_q", "d_pix", "d_sem", "stages", "patch"):
            if getattr(self, name) < 1:
                raise ValueError(f"model.{name} must be positive")
        if self.h % self.patch or self.w % self.patch:
            raise ValueError("patch size must divide the image size")


def init_params(cfg: ModelConfig) -> dict[str, np.ndarray]:
    """Deterministic weights: N(0, 1/fan_in) matrices, zero biases, query std 0.02.

    The mask head starts at a tenth of that scale so initial mask logits sit
    near zero instead of being confidently wrong.
    """
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    params: dict[str, np.ndarray] = {}

    def dense(name: str, fan_in: int, fan_out: int, bias: bool = True) -> None:
        params[f"{name}.w"] = rng.normal(0.0, 1.0 / math.sqrt(fan_in), size=(fan_in, fan_out))
        if bias:
            params[f"{name}.b"] = np.zeros(fan_out)

    patch_dim = 3 * cfg.patch * cfg.patch
    dense("enc.embed", patch_dim, cfg.d_pix)
    for k in range(2):
        dense(f"enc.block{k}.fc1", cfg.d_pix, cfg.d_pix)
        dense(f"enc.block{k}.fc2", cfg.d_pix, cfg.d_pix)
    dense("enc.sem", cfg.d_pix, cfg.d_sem)
    params["query.embed"] = rng.normal(0.0, 0.02, size=(cfg.n_q, cfg.d_q))
    for s in range(cfg.stages):
        dense(f"stage{s}.q", cfg.d_q, cfg.d_sem, bias=False)
        dense(f"stage{s}.k", cfg.d_sem, cfg.d_sem, bias=False)
        dense(f"stage{s}.v", cfg.d_pix, cfg.d_q, bias=False)
        dense(f"stage{s}.ffn1", cfg.d_q, 2 * cfg.d_q)
        dense(f"stage{s}.ffn2", 2 * cfg.d_q, cfg.d_q)
    dense("head.mask", cfg.d_q, cfg.d_pix, bias=False)
    params["head.mask.w"] *= 0.1
    dense("head.cls", cfg.d_q, cfg.n_c + 1)
    dense("sem.hidden", cfg.d_sem, cfg.d_sem)
    dense("sem.ctx", cfg.d_sem, cfg.d_sem, bias=False)
    dense("sem.out", cfg.d_sem, cfg.n_c)
    return params


def is_semantic_head(name: str) -> bool:
    return name.startswith(SEMANTIC_PREFIX)


def as_tensors(params: Mapping[str, np.ndarray]) -> dict[str, Tensor]:
    return {k: v if isinstance(v, Tensor) else Tensor(v) for k, v in params.items()}


def _linear(x: Tensor, P: Mapping[str, Tensor], name: str) -> Tensor:
    y = matmul(x, P[f"{name}.w"])
    b = P.get(f"{name}.b")
    return y if b is None else add(y, b)


def patchify(image: np.ndarray, patch: int) -> np.ndarray:
    h, w, c = image.shape
    g = image.reshape(h // patch, patch, w // patch, patch, c).transpose(0, 2, 1, 3, 4)
    return g.reshape((h // patch) * (w // patch), patch * patch * c)


def encode(image: np.ndarray, P: Mapping[str, Tensor], cfg: ModelConfig) -> tuple[Tensor, Tensor]:
    """Patch embedding plus two residual per-pixel MLP blocks.

    Returns pixel features ``(HW, d_pix)`` and the semantic/key features
    ``x_sem`` ``(HW, d_sem)``.
    """
    image = np.asarray(image, dtype=np.float64)
    if image.shape != (cfg.h, cfg.w, 3):
        raise ValueError(f"expected image of shape {(cfg.h, cfg.w, 3)}, got {image.shape}")
    z = _linear(Tensor(patchify(image, cfg.patch)), P, "enc.embed")
    for k in range(2):
        z = add(z, _linear(silu(_linear(z, P, f"enc.block{k}.fc1")), P, f"enc.block{k}.fc2"))
    return z, _linear(z, P, "enc.sem")


def decoder_stage(queries: Tensor, pixel_feats: Tensor, x_sem: Tensor, P: Mapping[str, Tensor],
                  stage: int) -> tuple[Tensor, Tensor, Tensor]:
    """Cross-attention readout over pixels then a feed-forward block, both residual.

    Returns ``(queries, keys, attention)``; ``keys`` (HW, d_sem) feed the
    semantic head of this stage, ``attention`` rows sum to one.
    """
    pre = f"stage{stage}"
    keys = matmul(x_sem, P[f"{pre}.k.w"])
    q = matmul(queries, P[f"{pre}.q.w"])
    logits = scale(matmul(q, keys.T), 1.0 / math.sqrt(keys.shape[1]))
    attn = softmax(logits, axis=1)
    queries = add(queries, matmul(attn, matmul(pixel_feats, P[f"{pre}.v.w"])))
    ffn = _linear(silu(_linear(queries, P, f"{pre}.ffn1")), P, f"{pre}.ffn2")
    return add(queries, ffn), keys, attn


def semantic_head(x_sem: Tensor, P: Mapping[str, Tensor]) -> Tensor:
    """Per-pixel hidden layer with a global-average context term, then class logits."""
    hw, d = x_sem.shape
    d_h = P["sem.hidden.w"].shape[1]
    n_c = P["sem.out.w"].shape[1]
    COUNTERS["semantic_head_macs"] += hw * d * d_h + d * d_h + hw * d_h * n_c
    ctx = matmul(reduce("mean", x_sem, axis=0, keepdims=True), P["sem.ctx.w"])
    h = silu(add(_linear(x_sem, P, "sem.hidden"), ctx))
    return _linear(h, P, "sem.out")


def heads(queries: Tensor, pixel_feats: Tensor, x_sem: Tensor | None, P: Mapping[str, Tensor],
          train_mode: bool) -> StageOutput:
    kernels = matmul(queries, P["head.mask.w"])
    m_pan = scale(matmul(pixel_feats, kernels.T), 1.0 / math.sqrt(pixel_feats.shape[1]))
    p = _linear(queries, P, "head.cls")
    m_sem = semantic_head(x_sem, P) if train_mode and x_sem is not None else None
    return StageOutput(m_pan=m_pan, p=p, m_sem=m_sem, m_hat_pan=m_pan)


def forward(image: np.ndarray, params: Mapping[str, Tensor | np.ndarray], cfg: ModelConfig,
            relax: RelaxConfig | None = None, gt: SemanticMaskGT | None = None,
            train_mode: bool = True) -> list[StageOutput]:
    """Run all decoder stages.

    Training returns one output per stage with ReMask applied to the first
    ``relax.remask_stage_count`` stages. Inference returns only the final
    stage, with the semantic branch and the relaxation skipped entirely.
    """
    relax = relax or RelaxConfig(remask_stage_count=0)
    P = as_tensors(params)
    pix, x_sem = encode(image, P, cfg)
    queries = P["query.embed"]
    outputs: list[StageOutput] = []
    for s in range(cfg.stages):
        queries, keys, _ = decoder_stage(queries, pix, x_sem, P, s)
        if train_mode:
            out = heads(queries, pix, keys, P, train_mode=True)
            outputs.append(remask(out, relax, gt, stage_index=s))
    if not train_mode:
        outputs.append(heads(queries, pix, None, P, train_mode=False))
    return outputs


def forward_with_semantic_branch(image: np.ndarray, params: Mapping[str, Tensor | np.ndarray],
                                 cfg: ModelConfig, relax: RelaxConfig) -> StageOutput:
    """Final-stage output with the semantic gate kept at test time."""
    gated = RelaxConfig(**{**relax.__dict__, "remask_stage_count": cfg.stages, "gt_remask_mode": False})
    return forward(image, params, cfg, gated, train_mode=True)[-1]


# checkpoint file ------------------------------------------------------------------
#
# b"RMXCKPT1" | per parameter: u32 name_len, name (utf-8), u32 rank, u32 dims[rank],
# f64 little-endian payload | u32 CRC32 of everything before it

CKPT_MAGIC = b"RMXCKPT1"


class CheckpointError(Exception):
    pass


def save_checkpoint(path: str | Path, params: Mapping[str, np.ndarray]) -> None:
    chunks = [CKPT_MAGIC]
    for name, value in params.items():
        arr = np.ascontiguousarray(value.data if isinstance(value, Tensor) else value, dtype="<f8")
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw)) + raw)
        chunks.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        chunks.append(arr.tobytes())
    body = b"".join(chunks)
    Path(path).write_bytes(body + struct.pack("<I", zlib.crc32(body)))


def load_checkpoint(path: str | Path) -> dict[str, np.ndarray]:
    raw = Path(path).read_bytes()
    if len(raw) < len(CKPT_MAGIC) + 4 or raw[:len(CKPT_MAGIC)] != CKPT_MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic or truncated)")
    body, (crc,) = raw[:-4], struct.unpack("<I", raw[-4:])
    if zlib.crc32(body) != crc:
        raise CheckpointError("CRC mismatch")
    params: dict[str, np.ndarray] = {}
    pos = len(CKPT_MAGIC)
    try:
        while pos < len(body):
            (n,) = struct.unpack_from("<I", body, pos)
            pos += 4
            name = body[pos:pos + n].decode("utf-8")
            pos += n
            (rank,) = struct.unpack_from("<I", body, pos)
            pos += 4
            dims = struct.unpack_from(f"<{rank}I", body, pos)
            pos += 4 * rank
            count = int(np.prod(dims)) if rank else 1
            if pos + 8 * count > len(body):
                raise CheckpointError("checkpoint payload truncated")
            params[name] = np.frombuffer(body, dtype="<f8", count=count, offset=pos).reshape(dims).copy()
            pos += 8 * count
    except struct.error as exc:
        raise CheckpointError(f"malformed checkpoint: {exc}") from None
    return params
