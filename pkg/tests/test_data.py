import numpy as np
import numpy.testing as npt
import pytest

from mvtcl import data as D
from mvtcl.errors import ContractViolation


def small_spec(**kw):
    base = dict(num_classes=3, subcats_per_class=2, views_per_object=2,
                view_dim=4, train_per_class=4, test_per_class=2, seed=0)
    base.update(kw)
    return D.DatasetSpec(**base)


# ---------------------------------------------------------------------------
# Generation

def test_generate_deterministic():
    a = D.generate(small_spec())
    b = D.generate(small_spec())
    assert len(a.train) == len(b.train)
    for x, y in zip(a.train + a.test, b.train + b.test):
        assert x.id == y.id and x.label == y.label
        assert np.array_equal(x.views, y.views)


def test_generate_seed_changes_data():
    a = D.generate(small_spec(seed=0))
    b = D.generate(small_spec(seed=1))
    assert any(not np.array_equal(x.views, y.views)
               for x, y in zip(a.train, b.train))


def test_generate_counts_and_invariants():
    spec = small_spec(domains=2)
    split = D.generate(spec)
    per_domain = spec.num_classes * (spec.train_per_class + spec.test_per_class)
    assert len(split.train) + len(split.test) == per_domain * 2
    for obj in split.train + split.test:
        assert 0 <= obj.label < spec.num_classes
        assert 0 <= obj.subcat < spec.subcats_per_class
        if obj.domain == 0:
            assert obj.views.shape == (spec.views_per_object, spec.view_dim)
        else:
            assert obj.views.shape == (1, spec.view_dim)
    # both domains share the full class set on both sides of the split
    for domain in (0, 1):
        for part in (split.train, split.test):
            classes = {o.label for o in part if o.domain == domain}
            assert classes == set(range(spec.num_classes))


def test_zero_noise_objects_equal_prototypes():
    spec = small_spec(subcats_per_class=1, views_per_object=1,
                      sigma_subcat=0.0, sigma_object=0.0, sigma_view=0.0)
    K, D_ = spec.num_classes, spec.view_dim
    rng = np.random.default_rng(0)
    protos = rng.normal(size=(K, 1, D_))
    identity = [np.eye(D_)]
    split = D.synthesize_objects(spec, protos, identity, np.eye(D_), rng)
    for obj in split.train + split.test:
        npt.assert_array_equal(obj.views[0], protos[obj.label, 0])


def test_within_class_tighter_than_between_class():
    spec = small_spec(num_classes=10, views_per_object=1, view_dim=16,
                      sigma_proto=1.0, sigma_subcat=0.0, sigma_object=0.1,
                      sigma_view=0.05, train_per_class=8, test_per_class=2)
    rng = np.random.default_rng(3)
    protos = rng.normal(0.0, spec.sigma_proto, size=(10, 1, 16))
    split = D.synthesize_objects(spec, protos, [np.eye(16)], np.eye(16), rng)
    objs = split.train + split.test
    feats = np.array([o.views[0] for o in objs])
    labels = np.array([o.label for o in objs])
    dists = np.linalg.norm(feats[:, None] - feats[None, :], axis=2)
    same = (labels[:, None] == labels[None, :]) & ~np.eye(len(objs), dtype=bool)
    diff = labels[:, None] != labels[None, :]
    assert dists[same].mean() < dists[diff].mean()


def test_spec_validation():
    with pytest.raises(ContractViolation):
        small_spec(num_classes=1)
    with pytest.raises(ContractViolation):
        small_spec(sigma_view=-0.1)
    with pytest.raises(ContractViolation):
        small_spec(domains=3)


# ---------------------------------------------------------------------------
# File round trip

def test_save_load_round_trip_exact(tmp_path):
    split = D.generate(small_spec(domains=2))
    path = tmp_path / "data.jsonl"
    D.save(split, path)
    loaded = D.load(path)
    assert loaded.spec == split.spec
    assert len(loaded.train) == len(split.train)
    assert len(loaded.test) == len(split.test)
    for a, b in zip(split.train + split.test, loaded.train + loaded.test):
        assert a.id == b.id and a.label == b.label
        assert a.subcat == b.subcat and a.domain == b.domain
        assert np.array_equal(a.views, b.views)  # bitwise round trip


def test_save_rejects_empty_split(tmp_path):
    with pytest.raises(ContractViolation):
        D.save(D.Split(train=[], test=[]), tmp_path / "x.jsonl")


def test_load_reports_malformed_line_number(tmp_path):
    split = D.generate(small_spec())
    path = tmp_path / "data.jsonl"
    D.save(split, path)
    lines = path.read_text().splitlines()
    lines[3] = "{not json"
    path.write_text("\n".join(lines) + "\n")
    with pytest.raises(ContractViolation, match=":4:"):
        D.load(path)


def test_load_rejects_out_of_range_class(tmp_path):
    split = D.generate(small_spec())
    path = tmp_path / "data.jsonl"
    D.save(split, path)
    lines = path.read_text().splitlines()
    import json
    rec = json.loads(lines[1])
    rec["class"] = 99
    lines[1] = json.dumps(rec)
    path.write_text("\n".join(lines) + "\n")
    with pytest.raises(ContractViolation, match="out of range"):
        D.load(path)


# ---------------------------------------------------------------------------
# Batching

def test_batches_chunk_sizes():
    objs = list(range(5))
    out = D.batches(objs, 2, seed=0, epoch=0)
    assert [len(b) for b in out] == [2, 2, 1]
    assert sorted(x for b in out for x in b) == objs


def test_batches_deterministic_per_seed_epoch():
    objs = list(range(30))
    a = D.batches(objs, 4, seed=7, epoch=3)
    b = D.batches(objs, 4, seed=7, epoch=3)
    assert a == b


def test_batches_differ_across_epochs():
    objs = list(range(120))
    a = [x for b in D.batches(objs, 8, seed=7, epoch=0) for x in b]
    b = [x for b in D.batches(objs, 8, seed=7, epoch=1) for x in b]
    assert a != b
