import threading

import pytest
import torch

from blockattn.errors import CacheCorruptionError, CacheFormatError, ContractError, StaleCacheError
from blockattn.kvcache import KVStore, evict_lru, get_or_encode, load, persist
from blockattn.model import ModelConfig, ToyTransformer, assemble_and_decode, encode_block


@pytest.fixture(scope="module")
def model():
    return ToyTransformer(ModelConfig(num_layers=2, num_heads=2, head_dim=4, vocab_size=40, max_seq_len=64, seed=5))


def test_second_lookup_hits_without_encoding(model):
    store = KVStore()
    a, hit_a = get_or_encode(store, model, [1, 2, 3])
    b, hit_b = get_or_encode(store, model, [1, 2, 3])
    assert (hit_a, hit_b) == (False, True)
    assert a is b
    assert store.encode_calls == 1
    assert store.stats.as_dict() == {"hits": 1, "misses": 1, "hit_tokens": 3, "miss_tokens": 3, "hit_rate": 0.5}


def test_sink_count_is_part_of_the_key(model):
    store = KVStore()
    plain, _ = store.get_or_encode(model, [4, 5])
    sunk, hit = store.get_or_encode(model, [4, 5], sink_count=2, sink_token_id=39)
    assert not hit and plain.content_hash != sunk.content_hash
    assert sunk.token_len == 4


def test_lru_eviction_order(model):
    store = KVStore()
    blocks = [store.get_or_encode(model, [i, i + 1])[0] for i in range(4)]
    store.get_or_encode(model, [0, 1])  # refresh the oldest
    evicted = evict_lru(store, capacity_tokens=4)
    assert evicted == [blocks[1].content_hash, blocks[2].content_hash]
    assert store.hashes() == [blocks[3].content_hash, blocks[0].content_hash]
    assert store.total_tokens == 4
    assert evict_lru(store, 0) == [blocks[3].content_hash, blocks[0].content_hash]
    with pytest.raises(ContractError):
        evict_lru(store, -1)


def test_persist_round_trip_is_byte_identical(tmp_path, model):
    store = KVStore()
    for toks in ([1, 2, 3], [7], [9, 9, 9, 9]):
        store.get_or_encode(model, toks)
    store.get_or_encode(model, [7])
    store.get_or_encode(model, [5, 6], sink_count=1, sink_token_id=39)
    path = tmp_path / "cache.bkvc"
    persist(store, path)
    again = load(path)
    assert again.to_bytes() == path.read_bytes()
    assert again.hashes() == store.hashes()
    assert again.stats == store.stats
    for h in store.hashes():
        assert again.get(h, model.fingerprint()).same_bytes(store.get(h, model.fingerprint()))


def test_loaded_blocks_decode_like_fresh_ones(tmp_path, model):
    store = KVStore()
    blocks = [store.get_or_encode(model, b)[0] for b in ([3, 4, 5], [6, 7])]
    store.persist(tmp_path / "c.bkvc")
    again = KVStore.load(tmp_path / "c.bkvc")
    reloaded = [again.get(b.content_hash, model.fingerprint()) for b in blocks]
    a = assemble_and_decode(model, blocks, [8, 9]).logits
    b = assemble_and_decode(model, reloaded, [8, 9]).logits
    assert torch.equal(a, b)


def test_stale_blocks_are_refused(model):
    store = KVStore()
    block, _ = store.get_or_encode(model, [1, 2])
    with pytest.raises(StaleCacheError):
        store.get(block.content_hash, "00" * 32)
    other = ToyTransformer(ModelConfig(num_layers=2, num_heads=2, head_dim=4, vocab_size=40, max_seq_len=64, seed=6))
    _, hit = store.get_or_encode(other, [1, 2])
    assert not hit  # a different model hashes to a different key


def test_hash_collision_with_different_bytes_is_detected(model):
    store = KVStore()
    real, _ = store.get_or_encode(model, [1, 2])
    forged = type(real)(
        real.content_hash, real.token_ids, real.sink_count, real.model_fingerprint,
        tuple(k + 1 for k in real.keys), real.values,
    )
    with pytest.raises(CacheCorruptionError):
        store.insert(forged)


def test_corrupted_files(tmp_path, model):
    store = KVStore()
    store.get_or_encode(model, [1, 2, 3])
    raw = store.to_bytes()
    with pytest.raises(CacheFormatError):
        KVStore.from_bytes(b"NOPE" + raw[4:])
    with pytest.raises(CacheFormatError):
        KVStore.from_bytes(raw[:4] + b"\x09\x00\x00\x00" + raw[8:])
    with pytest.raises(CacheCorruptionError):
        KVStore.from_bytes(raw[:-8])
    with pytest.raises(CacheCorruptionError):
        KVStore.from_bytes(raw[:20])
    with pytest.raises(CacheCorruptionError):
        KVStore.from_bytes(raw + b"\x00")
    # flip a bit in the first token id: the stored hash no longer matches
    payload_start = len(raw) - (8 * 3 + 2 * 2 * 3 * 2 * 4 * 8)
    tampered = bytearray(raw)
    tampered[payload_start] ^= 0x01
    with pytest.raises(CacheCorruptionError):
        KVStore.from_bytes(bytes(tampered))


def test_concurrent_lookups_encode_each_block_once_per_winner(model):
    store = KVStore()
    errors = []

    def worker(seed):
        try:
            for i in range(20):
                store.get_or_encode(model, [(seed + i) % 5, 1, 2])
        except Exception as exc:  # pragma: no cover - surfaced below
            errors.append(exc)

    threads = [threading.Thread(target=worker, args=(s,)) for s in range(6)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert not errors
    assert len(store) == 5
    assert store.stats.hits + store.stats.misses == 120
    # every miss inserted or lost a race for one of the five blocks
    assert store.stats.misses >= 5
    ref = encode_block(model, [0, 1, 2])
    assert store.get(ref.content_hash, model.fingerprint()).same_bytes(ref)
