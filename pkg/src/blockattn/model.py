"""Minimal decoder-only transformer used as teacher, student and segmenter backbone.

Everything runs in float64 on CPU. Rotary position encoding is applied to
queries and keys; values are never rotated, which is what lets a block's
keys be stored at local positions and shifted to any offset later.
"""
from __future__ import annotations

import hashlib
import io
import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from torch import nn

from blockattn.errors import CacheCorruptionError, CacheFormatError, ContractError, PositionRangeError
from blockattn.masks import AttentionMask, BlockPartition, build_block_mask, build_full_causal

DTYPE = torch.float64
KV_FORMAT_VERSION = 1
CHECKPOINT_MAGIC = b"BKVM"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    num_layers: int = 2
    num_heads: int = 2
    head_dim: int = 8
    vocab_size: int = 258
    max_seq_len: int = 512
    rope_base: float = 10000.0
    seed: int = 0
    hidden_dim: int = 0  # 0 means num_heads * head_dim
    mlp_ratio: int = 4

    def __post_init__(self) -> None:
        expected = self.num_heads * self.head_dim
        if self.hidden_dim == 0:
            object.__setattr__(self, "hidden_dim", expected)
        elif self.hidden_dim != expected:
            raise ContractError(f"hidden_dim {self.hidden_dim} != num_heads * head_dim = {expected}")
        if self.head_dim % 2:
            raise ContractError("rotary encoding needs an even head_dim")
        for name in ("num_layers", "num_heads", "head_dim", "vocab_size", "max_seq_len"):
            if getattr(self, name) < 1:
                raise ContractError(f"{name} must be positive")


@dataclass
class ForwardOutput:
    logits: torch.Tensor  # (n, vocab)
    kv_states: list[tuple[torch.Tensor, torch.Tensor]]  # per layer, (n, heads, head_dim) each
    hidden_states: torch.Tensor  # (n, hidden), after the final norm


@dataclass(frozen=True, eq=False)
class KVBlock:
    """Per-layer key/value states of one independently encoded block.

    Keys are rotated for local positions ``0..token_len-1`` only.
    """

    content_hash: str
    token_ids: tuple[int, ...]
    sink_count: int
    model_fingerprint: str
    keys: tuple[torch.Tensor, ...]
    values: tuple[torch.Tensor, ...]

    @property
    def token_len(self) -> int:
        return len(self.token_ids)

    @property
    def num_layers(self) -> int:
        return len(self.keys)

    def tensor_bytes(self) -> bytes:
        buf = io.BytesIO()
        for k, v in zip(self.keys, self.values):
            buf.write(k.numpy().astype("<f8").tobytes())
            buf.write(v.numpy().astype("<f8").tobytes())
        return buf.getvalue()

    def same_bytes(self, other: "KVBlock") -> bool:
        return (
            self.content_hash == other.content_hash
            and self.token_ids == other.token_ids
            and self.sink_count == other.sink_count
            and self.tensor_bytes() == other.tensor_bytes()
        )


@dataclass
class PositionedKV:
    """Keys re-rotated to a global offset, ready to be concatenated."""

    offset: int
    keys: list[torch.Tensor]
    values: list[torch.Tensor]

    @property
    def length(self) -> int:
        return self.keys[0].shape[0]


def block_hash(token_ids: Sequence[int], model_fingerprint: str, sink_count: int) -> str:
    h = hashlib.sha256()
    h.update(struct.pack("<II", KV_FORMAT_VERSION, sink_count))
    h.update(bytes.fromhex(model_fingerprint))
    h.update(np.asarray(token_ids, dtype="<i8").tobytes())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# rotary encoding


def rope_angles(positions: torch.Tensor, head_dim: int, base: float) -> tuple[torch.Tensor, torch.Tensor]:
    inv_freq = 1.0 / (base ** (torch.arange(0, head_dim, 2, dtype=DTYPE) / head_dim))
    freqs = positions.to(DTYPE)[:, None] * inv_freq[None, :]
    emb = torch.cat([freqs, freqs], dim=-1)
    return emb.cos(), emb.sin()


def _rotate_half(x: torch.Tensor) -> torch.Tensor:
    half = x.shape[-1] // 2
    return torch.cat([-x[..., half:], x[..., :half]], dim=-1)


def apply_rope(x: torch.Tensor, positions: torch.Tensor, base: float) -> torch.Tensor:
    """Rotate ``x`` of shape (..., n, heads, head_dim) by per-row positions (n,)."""
    cos, sin = rope_angles(positions, x.shape[-1], base)
    cos = cos[:, None, :]
    sin = sin[:, None, :]
    return x * cos + _rotate_half(x) * sin


def rotate_keys(keys: torch.Tensor, delta: int, base: float) -> torch.Tensor:
    """Shift every key of shape (n, heads, head_dim) by ``delta`` positions."""
    if delta == 0:
        return keys.clone()
    pos = torch.full((keys.shape[0],), delta, dtype=torch.long)
    return apply_rope(keys, pos, base)


# ---------------------------------------------------------------------------
# modules


class RMSNorm(nn.Module):
    def __init__(self, dim: int, eps: float = 1e-8):
        super().__init__()
        self.eps = eps
        self.weight = nn.Parameter(torch.ones(dim, dtype=DTYPE))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return x * torch.rsqrt(x.pow(2).mean(-1, keepdim=True) + self.eps) * self.weight


class Layer(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        h = cfg.hidden_dim
        self.cfg = cfg
        self.attn_norm = RMSNorm(h)
        self.wq = nn.Linear(h, h, bias=False, dtype=DTYPE)
        self.wk = nn.Linear(h, h, bias=False, dtype=DTYPE)
        self.wv = nn.Linear(h, h, bias=False, dtype=DTYPE)
        self.wo = nn.Linear(h, h, bias=False, dtype=DTYPE)
        self.mlp_norm = RMSNorm(h)
        self.w1 = nn.Linear(h, cfg.mlp_ratio * h, bias=False, dtype=DTYPE)
        self.w2 = nn.Linear(cfg.mlp_ratio * h, h, bias=False, dtype=DTYPE)

    def forward(self, x, positions, allowed, past_k=None, past_v=None):
        # x: (B, n, h); allowed: (B or 1, n, m) bool with m = past + n
        cfg = self.cfg
        B, n, _ = x.shape
        hx = self.attn_norm(x)
        q = self.wq(hx).view(B, n, cfg.num_heads, cfg.head_dim)
        k = self.wk(hx).view(B, n, cfg.num_heads, cfg.head_dim)
        v = self.wv(hx).view(B, n, cfg.num_heads, cfg.head_dim)
        q = apply_rope(q, positions, cfg.rope_base)
        k = apply_rope(k, positions, cfg.rope_base)
        k_all = k if past_k is None else torch.cat([past_k, k], dim=1)
        v_all = v if past_v is None else torch.cat([past_v, v], dim=1)
        scores = torch.einsum("bnhd,bmhd->bhnm", q, k_all) / math.sqrt(cfg.head_dim)
        blocked = ~allowed[:, None, :, :]
        scores = scores.masked_fill(blocked, float("-inf"))
        weights = torch.softmax(scores, dim=-1).masked_fill(blocked, 0.0)
        attn = torch.einsum("bhnm,bmhd->bnhd", weights, v_all).reshape(B, n, cfg.hidden_dim)
        x = x + self.wo(attn)
        x = x + self.w2(torch.relu(self.w1(self.mlp_norm(x))))
        return x, k, v


class ToyTransformer(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.tok_emb = nn.Embedding(cfg.vocab_size, cfg.hidden_dim, dtype=DTYPE)
        self.layers = nn.ModuleList(Layer(cfg) for _ in range(cfg.num_layers))
        self.final_norm = RMSNorm(cfg.hidden_dim)
        self.lm_head = nn.Linear(cfg.hidden_dim, cfg.vocab_size, bias=False, dtype=DTYPE)
        self.reset_parameters()

    @property
    def config(self) -> ModelConfig:
        return self.cfg

    def reset_parameters(self) -> None:
        gen = torch.Generator().manual_seed(self.cfg.seed)
        with torch.no_grad():
            for name, p in self.named_parameters():
                if name.endswith("norm.weight"):
                    p.fill_(1.0)
                else:
                    nn.init.trunc_normal_(p, mean=0.0, std=0.02, a=-0.04, b=0.04, generator=gen)

    def run(
        self,
        tokens: torch.Tensor,
        positions: torch.Tensor,
        allowed: torch.Tensor,
        past: Sequence[tuple[torch.Tensor, torch.Tensor]] | None = None,
        last_only: bool = False,
    ):
        """Batched core pass. ``tokens`` is (B, n); ``allowed`` is (n, m) or (B, n, m).

        Returns final hidden states (B, n, h), logits and per-layer (k, v) for
        the new tokens. ``last_only`` computes logits for the last position
        only, as a prefill does.
        """
        x = self.tok_emb(tokens)
        if allowed.dim() == 2:
            allowed = allowed[None]
        kvs = []
        for li, layer in enumerate(self.layers):
            pk, pv = (None, None) if past is None else past[li]
            x, k, v = layer(x, positions, allowed, pk, pv)
            kvs.append((k, v))
        hidden = self.final_norm(x)
        return hidden, self.lm_head(hidden[:, -1:] if last_only else hidden), kvs

    def forward(self, tokens, mask=None, positions=None) -> ForwardOutput:
        return forward(self, tokens, mask, positions)

    def fingerprint(self) -> str:
        return hashlib.sha256(checkpoint_bytes(self)).hexdigest()


# ---------------------------------------------------------------------------
# functional API


def _as_ids(tokens) -> torch.Tensor:
    if isinstance(tokens, torch.Tensor):
        return tokens.to(torch.long)
    return torch.as_tensor(np.asarray(tokens, dtype=np.int64))


def _check_positions(model: ToyTransformer, positions: torch.Tensor) -> None:
    if positions.numel() and (int(positions.max()) >= model.cfg.max_seq_len or int(positions.min()) < 0):
        raise PositionRangeError(
            f"positions span [{int(positions.min())}, {int(positions.max())}] but max_seq_len is {model.cfg.max_seq_len}"
        )


def _check_tokens(model: ToyTransformer, ids: torch.Tensor) -> None:
    if ids.numel() and (int(ids.max()) >= model.cfg.vocab_size or int(ids.min()) < 0):
        raise ContractError("token id outside the vocabulary")


def _mask_tensor(mask, n: int) -> torch.Tensor:
    if mask is None:
        return build_full_causal(n).as_tensor()
    if isinstance(mask, AttentionMask):
        t = mask.as_tensor()
    else:
        t = torch.as_tensor(mask, dtype=torch.bool)
    if t.shape[-2:] != (n, n):
        raise ContractError(f"mask shape {tuple(t.shape)} does not match sequence length {n}")
    if torch.triu(t, diagonal=1).any():
        raise ContractError("mask allows attention to future positions")
    return t


def forward(model: ToyTransformer, tokens, mask=None, positions=None) -> ForwardOutput:
    """Run the model on one sequence (or a batch when ``tokens`` is 2-D).

    ``mask`` is an AttentionMask or boolean (n, n) tensor; default full causal.
    ``positions`` defaults to ``0..n-1``.
    """
    ids = _as_ids(tokens)
    batched = ids.dim() == 2
    if not batched:
        ids = ids[None]
    n = ids.shape[1]
    if n == 0:
        raise ContractError("empty token sequence")
    pos = torch.arange(n) if positions is None else _as_ids(positions)
    if pos.shape != (n,):
        raise ContractError(f"need {n} positions, got {tuple(pos.shape)}")
    _check_positions(model, pos)
    _check_tokens(model, ids)
    allowed = _mask_tensor(mask, n)
    hidden, logits, kvs = model.run(ids, pos, allowed)
    if batched:
        return ForwardOutput(logits, kvs, hidden)
    return ForwardOutput(logits[0], [(k[0], v[0]) for k, v in kvs], hidden[0])


def encode_block(model: ToyTransformer, tokens, sink_count: int = 0, sink_token_id: int | None = None) -> KVBlock:
    """Encode one block in isolation at local positions.

    When ``sink_count`` > 0 the block is prefixed with that many copies of
    ``sink_token_id`` and the sinks become part of the stored block.
    """
    content = [int(t) for t in _as_ids(tokens).tolist()]
    if not content:
        raise ContractError("cannot encode an empty block")
    if sink_count:
        if sink_token_id is None:
            raise ContractError("sink_count > 0 needs a sink_token_id")
        content = [int(sink_token_id)] * sink_count + content
    fp = model.fingerprint()
    with torch.no_grad():
        out = forward(model, content)
    return KVBlock(
        content_hash=block_hash(content, fp, sink_count),
        token_ids=tuple(content),
        sink_count=sink_count,
        model_fingerprint=fp,
        keys=tuple(k.detach().clone() for k, _ in out.kv_states),
        values=tuple(v.detach().clone() for _, v in out.kv_states),
    )


def apply_position_offset(block: KVBlock, offset: int, max_seq_len: int | None = None, rope_base: float = 10000.0) -> PositionedKV:
    if offset < 0:
        raise PositionRangeError("offset must be non-negative")
    if max_seq_len is not None and offset + block.token_len > max_seq_len:
        raise PositionRangeError(f"offset {offset} + length {block.token_len} exceeds max_seq_len {max_seq_len}")
    return PositionedKV(
        offset=offset,
        keys=[rotate_keys(k, offset, rope_base) for k in block.keys],
        values=[v.clone() for v in block.values],
    )


def position_block(model: ToyTransformer, block: KVBlock, offset: int) -> PositionedKV:
    return apply_position_offset(block, offset, model.cfg.max_seq_len, model.cfg.rope_base)


def assemble_and_decode(model: ToyTransformer, cached: Sequence[KVBlock], query) -> ForwardOutput:
    """Run ``query`` against cached blocks placed back to back from position 0."""
    ids = _as_ids(query)
    q = ids.shape[0]
    if q == 0:
        raise ContractError("query must be non-empty")
    _check_tokens(model, ids)
    fp = None
    offset = 0
    placed: list[PositionedKV] = []
    for block in cached:
        if block.num_layers != model.cfg.num_layers:
            raise ContractError("cached block has a different layer count than the model")
        if fp is None:
            fp = model.fingerprint()
        if block.model_fingerprint != fp:
            raise ContractError("cached block was produced by a different model")
        placed.append(position_block(model, block, offset))
        offset += block.token_len
    if offset + q > model.cfg.max_seq_len:
        raise PositionRangeError(f"total length {offset + q} exceeds max_seq_len {model.cfg.max_seq_len}")
    past = None
    if placed:
        past = [
            (
                torch.cat([p.keys[li] for p in placed])[None],
                torch.cat([p.values[li] for p in placed])[None],
            )
            for li in range(model.cfg.num_layers)
        ]
    allowed = torch.ones((q, offset + q), dtype=torch.bool)
    allowed[:, offset:] = torch.tril(torch.ones((q, q), dtype=torch.bool))
    pos = torch.arange(offset, offset + q)
    hidden, logits, kvs = model.run(ids[None], pos, allowed, past)
    return ForwardOutput(logits[0], [(k[0], v[0]) for k, v in kvs], hidden[0])


def forward_blocks(model: ToyTransformer, tokens, partition: BlockPartition) -> ForwardOutput:
    """Monolithic block-attention forward over the full concatenation."""
    return forward(model, tokens, build_block_mask(partition))


def gradients(model: nn.Module, loss: torch.Tensor | float) -> dict[str, torch.Tensor]:
    named = [(n, p) for n, p in model.named_parameters() if p.requires_grad]
    if not isinstance(loss, torch.Tensor) or not loss.requires_grad:
        return {n: torch.zeros_like(p) for n, p in named}
    grads = torch.autograd.grad(loss, [p for _, p in named], allow_unused=True)
    return {n: (torch.zeros_like(p) if g is None else g) for (n, p), g in zip(named, grads)}


# ---------------------------------------------------------------------------
# checkpoints


def _write_tensors(buf, state: dict[str, torch.Tensor]) -> None:
    buf.write(struct.pack("<I", len(state)))
    for name, t in state.items():
        raw = name.encode("utf-8")
        arr = t.detach().cpu().numpy().astype("<f8")
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(arr.tobytes())


def checkpoint_bytes(module: nn.Module, kind: str = "lm", extra: dict | None = None) -> bytes:
    cfg = getattr(module, "cfg", None) or module.backbone.cfg  # segmenter wraps a backbone
    header = {"kind": kind, "model": asdict(cfg)}
    if extra:
        header.update(extra)
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<II", CHECKPOINT_VERSION, len(blob)))
    buf.write(blob)
    _write_tensors(buf, module.state_dict())
    return buf.getvalue()


def save_checkpoint(module: nn.Module, path: str | Path, kind: str = "lm", extra: dict | None = None) -> None:
    Path(path).write_bytes(checkpoint_bytes(module, kind, extra))


def read_checkpoint(data: bytes) -> tuple[dict, dict[str, torch.Tensor]]:
    """Parse checkpoint bytes into (header, state_dict)."""
    if data[:4] != CHECKPOINT_MAGIC:
        raise CacheFormatError("not a model checkpoint (bad magic)")
    try:
        version, blob_len = struct.unpack_from("<II", data, 4)
        if version != CHECKPOINT_VERSION:
            raise CacheFormatError(f"unsupported checkpoint version {version}")
        off = 12
        header = json.loads(data[off : off + blob_len].decode("utf-8"))
        off += blob_len
        (count,) = struct.unpack_from("<I", data, off)
        off += 4
        state: dict[str, torch.Tensor] = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", data, off)
            off += 2
            name = data[off : off + nlen].decode("utf-8")
            off += nlen
            (ndim,) = struct.unpack_from("<B", data, off)
            off += 1
            shape = struct.unpack_from(f"<{ndim}I", data, off)
            off += 4 * ndim
            size = int(np.prod(shape)) * 8
            if off + size > len(data):
                raise CacheCorruptionError("checkpoint truncated")
            arr = np.frombuffer(data, dtype="<f8", count=size // 8, offset=off).reshape(shape)
            state[name] = torch.from_numpy(arr.astype(np.float64))
            off += size
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CacheCorruptionError(f"checkpoint corrupted: {exc}") from exc
    if off != len(data):
        raise CacheCorruptionError("trailing bytes after checkpoint payload")
    return header, state


def load_model(path: str | Path) -> ToyTransformer:
    header, state = read_checkpoint(Path(path).read_bytes())
    if header.get("kind") != "lm":
        raise CacheFormatError(f"expected an lm checkpoint, found {header.get('kind')!r}")
    model = ToyTransformer(ModelConfig(**header["model"]))
    model.load_state_dict(state)
    return model


def clone_model(model: ToyTransformer) -> ToyTransformer:
    twin = ToyTransformer(model.cfg)
    twin.load_state_dict({k: v.detach().clone() for k, v in model.state_dict().items()})
    return twin


def greedy_next(model: ToyTransformer, tokens, mask=None) -> int:
    with torch.no_grad():
        out = forward(model, tokens, mask)
    return int(out.logits[-1].argmax())
