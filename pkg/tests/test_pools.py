import json

import pytest

from anydoor.pools import TriggerTargetPool, load_pool


def test_packaged_pool_sizes():
    pool = load_pool()
    assert len(pool.triggers) >= 10 and len(pool.targets) >= 10
    assert b"SUDO" in pool.triggers


def test_placeholders_documented():
    from importlib import resources

    doc = json.loads(resources.files("anydoor").joinpath("data/pools.json").read_text())
    for entry in doc["targets"]:
        assert entry["source"] in ("original", "placeholder")
        if entry["source"] == "placeholder":
            assert isinstance(entry["table_row"], int)
            assert entry["length"] == len(entry["text"].encode())
    assert len(load_pool().placeholders) == sum(e["source"] == "placeholder" for e in doc["targets"])


def test_sample_pairs_without_replacement():
    pool = load_pool()
    pairs = pool.sample_pairs(10, seed=3)
    assert len({t for t, _ in pairs}) == 10 and len({a for _, a in pairs}) == 10
    assert pairs == pool.sample_pairs(10, seed=3)


def test_k_exceeding_pool_rejected():
    pool = TriggerTargetPool((b"a", b"b"), (b"x", b"y", b"z"))
    with pytest.raises(ValueError):
        pool.sample_pairs(3, 0)


def test_feasible_drops_long_targets():
    pool = TriggerTargetPool((b"a",), (b"short", b"x" * 80))
    assert pool.feasible(60).targets == (b"short",)


def test_empty_entries_rejected():
    with pytest.raises(ValueError):
        TriggerTargetPool((b"",), (b"x",))


def test_load_from_file(tmp_path):
    p = tmp_path / "pool.json"
    p.write_text(json.dumps({"triggers": ["t1", "t2"], "targets": ["a", {"text": "b", "source": "placeholder"}]}))
    pool = load_pool(p)
    assert pool.triggers == (b"t1", b"t2") and pool.targets == (b"a", b"b") and pool.placeholders == (b"b",)
