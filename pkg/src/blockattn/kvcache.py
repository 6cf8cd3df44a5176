"""Content-addressed store of encoded blocks with hit accounting and LRU eviction."""
from __future__ import annotations

import os
import struct
import tempfile
import threading
from collections import OrderedDict
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from blockattn.errors import CacheCorruptionError, CacheFormatError, ContractError, StaleCacheError
from blockattn.model import KVBlock, ToyTransformer, block_hash, encode_block

CACHE_MAGIC = b"BKVC"
CACHE_VERSION = 1

_HEADER = struct.Struct("<4sII4Q")
_ENTRY = struct.Struct("<32s32sIIIIIQQ")


@dataclass
class CacheStats:
    hits: int = 0
    misses: int = 0
    hit_tokens: int = 0
    miss_tokens: int = 0

    @property
    def hit_rate(self) -> float:
        total = self.hit_tokens + self.miss_tokens
        return self.hit_tokens / total if total else 0.0

    @property
    def total_tokens(self) -> int:
        return self.hit_tokens + self.miss_tokens

    def record(self, hit: bool, tokens: int) -> None:
        if hit:
            self.hits += 1
            self.hit_tokens += tokens
        else:
            self.misses += 1
            self.miss_tokens += tokens

    def merge(self, other: "CacheStats") -> "CacheStats":
        return CacheStats(
            self.hits + other.hits,
            self.misses + other.misses,
            self.hit_tokens + other.hit_tokens,
            self.miss_tokens + other.miss_tokens,
        )

    def as_dict(self) -> dict:
        return {
            "hits": self.hits,
            "misses": self.misses,
            "hit_tokens": self.hit_tokens,
            "miss_tokens": self.miss_tokens,
            "hit_rate": self.hit_rate,
        }


class KVStore:
    """Blocks keyed by content hash, kept in least-recently-used order.

    Encoding on a miss happens outside the lock; if two threads race on the
    same block, the first insert wins and the loser's encoding is dropped.
    """

    def __init__(self) -> None:
        self._entries: OrderedDict[str, KVBlock] = OrderedDict()
        self._lock = threading.RLock()
        self.stats = CacheStats()
        self.encode_calls = 0

    def __len__(self) -> int:
        return len(self._entries)

    def __contains__(self, content_hash: str) -> bool:
        return content_hash in self._entries

    def hashes(self) -> list[str]:
        """Hashes from least to most recently used."""
        with self._lock:
            return list(self._entries)

    @property
    def total_tokens(self) -> int:
        with self._lock:
            return sum(b.token_len for b in self._entries.values())

    def get(self, content_hash: str, model_fingerprint: str) -> KVBlock | None:
        """Look up a block without touching stats; refreshes its LRU slot."""
        with self._lock:
            block = self._entries.get(content_hash)
            if block is None:
                return None
            if block.model_fingerprint != model_fingerprint:
                raise StaleCacheError(
                    f"block {content_hash[:12]} was encoded by model {block.model_fingerprint[:12]}, "
                    f"not {model_fingerprint[:12]}"
                )
            self._entries.move_to_end(content_hash)
            return block

    def insert(self, block: KVBlock) -> KVBlock:
        """Insert ``block`` unless its hash is present; returns the stored block."""
        with self._lock:
            existing = self._entries.get(block.content_hash)
            if existing is not None:
                if not existing.same_bytes(block):
                    raise CacheCorruptionError(f"hash {block.content_hash[:12]} maps to two different blocks")
                self._entries.move_to_end(block.content_hash)
                return existing
            self._entries[block.content_hash] = block
            return block

    def get_or_encode(
        self,
        model: ToyTransformer,
        block_tokens,
        sink_count: int = 0,
        sink_token_id: int | None = None,
    ) -> tuple[KVBlock, bool]:
        ids = [int(t) for t in block_tokens]
        if not ids:
            raise ContractError("cannot cache an empty block")
        full_ids = ([int(sink_token_id)] * sink_count if sink_count else []) + ids
        fp = model.fingerprint()
        key = block_hash(full_ids, fp, sink_count)
        with self._lock:
            block = self.get(key, fp)
            if block is not None:
                self.stats.record(True, block.token_len)
                return block, True
        fresh = encode_block(model, ids, sink_count, sink_token_id)
        with self._lock:
            self.encode_calls += 1
            stored = self.insert(fresh)
            self.stats.record(False, stored.token_len)
        return stored, False

    def evict_lru(self, capacity_tokens: int) -> list[str]:
        if capacity_tokens < 0:
            raise ContractError("capacity must be non-negative")
        evicted = []
        with self._lock:
            total = sum(b.token_len for b in self._entries.values())
            while self._entries and total > capacity_tokens:
                key, block = self._entries.popitem(last=False)
                total -= block.token_len
                evicted.append(key)
        return evicted

    # -- persistence --------------------------------------------------------

    def to_bytes(self) -> bytes:
        with self._lock:
            entries = list(self._entries.values())
            stats = self.stats
            table = bytearray()
            data = bytearray()
            base = _HEADER.size + _ENTRY.size * len(entries)
            for b in entries:
                heads, head_dim = b.keys[0].shape[1:]
                payload = np.asarray(b.token_ids, dtype="<i8").tobytes() + b.tensor_bytes()
                table += _ENTRY.pack(
                    bytes.fromhex(b.content_hash),
                    bytes.fromhex(b.model_fingerprint),
                    b.token_len,
                    b.sink_count,
                    b.num_layers,
                    heads,
                    head_dim,
                    base + len(data),
                    len(payload),
                )
                data += payload
            header = _HEADER.pack(
                CACHE_MAGIC, CACHE_VERSION, len(entries), stats.hits, stats.misses, stats.hit_tokens, stats.miss_tokens
            )
        return bytes(header) + bytes(table) + bytes(data)

    def persist(self, path: str | Path) -> None:
        path = Path(path)
        blob = self.to_bytes()
        fd, tmp = tempfile.mkstemp(dir=path.parent or ".", prefix=path.name, suffix=".tmp")
        with os.fdopen(fd, "wb") as fh:
            fh.write(blob)
        os.replace(tmp, path)

    @classmethod
    def from_bytes(cls, raw: bytes) -> "KVStore":
        if len(raw) < _HEADER.size:
            if raw[:4] != CACHE_MAGIC[: len(raw[:4])]:
                raise CacheFormatError("not a KV cache file (bad magic)")
            raise CacheCorruptionError("cache file truncated in header")
        magic, version, count, hits, misses, hit_tokens, miss_tokens = _HEADER.unpack_from(raw, 0)
        if magic != CACHE_MAGIC:
            raise CacheFormatError("not a KV cache file (bad magic)")
        if version != CACHE_VERSION:
            raise CacheFormatError(f"unsupported cache format version {version}")
        if _HEADER.size + _ENTRY.size * count > len(raw):
            raise CacheCorruptionError("cache file truncated in entry table")
        blocks = []
        end_of_data = _HEADER.size + _ENTRY.size * count
        for idx in range(count):
            h, fp, tlen, sinks, layers, heads, head_dim, off, length = _ENTRY.unpack_from(
                raw, _HEADER.size + _ENTRY.size * idx
            )
            expected = 8 * tlen + layers * 2 * tlen * heads * head_dim * 8
            if length != expected or off + length > len(raw):
                raise CacheCorruptionError(f"entry {idx} is truncated or has an inconsistent size")
            ids = np.frombuffer(raw, dtype="<i8", count=tlen, offset=off).tolist()
            cursor = off + 8 * tlen
            keys, values = [], []
            n_el = tlen * heads * head_dim
            for _ in range(layers):
                for sink in (keys, values):
                    arr = np.frombuffer(raw, dtype="<f8", count=n_el, offset=cursor).reshape(tlen, heads, head_dim)
                    sink.append(torch.from_numpy(arr.astype(np.float64)))
                    cursor += n_el * 8
            content_hash, fingerprint = h.hex(), fp.hex()
            if block_hash(ids, fingerprint, sinks) != content_hash:
                raise CacheCorruptionError(f"entry {idx} content hash does not match its tokens")
            blocks.append(KVBlock(content_hash, tuple(ids), sinks, fingerprint, tuple(keys), tuple(values)))
            end_of_data = max(end_of_data, off + length)
        if end_of_data != len(raw):
            raise CacheCorruptionError("cache file has trailing bytes")
        store = cls()
        for b in blocks:
            store._entries[b.content_hash] = b
        store.stats = CacheStats(hits, misses, hit_tokens, miss_tokens)
        return store

    @classmethod
    def load(cls, path: str | Path) -> "KVStore":
        return cls.from_bytes(Path(path).read_bytes())


def get_or_encode(store: KVStore, model: ToyTransformer, block_tokens, **kw) -> tuple[KVBlock, bool]:
    return store.get_or_encode(model, block_tokens, **kw)


def persist(store: KVStore, path) -> None:
    store.persist(path)


def load(path) -> KVStore:
    return KVStore.load(path)


def evict_lru(store: KVStore, capacity_tokens: int) -> list[str]:
    return store.evict_lru(capacity_tokens)
