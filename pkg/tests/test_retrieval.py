import numpy as np
import pytest

from dpm import retrieval
from dpm.retrieval import FeatureBank, FeatureBankError, distance_matrix, evaluate, masked_distance

VARIANTS = ["P", "F", "Pn", "Fn"]


def bank(f, m=None, ids=None, cams=None):
    f = np.atleast_2d(np.asarray(f, dtype=np.float32))
    n = len(f)
    return FeatureBank(f, np.ones_like(f) if m is None else m, np.arange(n) if ids is None else ids,
                       np.zeros(n, np.int64) if cams is None else cams)


def naive_metrics(fq, mq, qids, qcams, fg, gids, gcams, normalise, max_rank):
    """Second implementation: explicit loops, running hit counter, no argsort sharing."""
    cmc_hits = [0] * max_rank
    aps = []
    for i in range(len(fq)):
        a = fq[i] / np.sqrt(sum(v * v for v in fq[i])) if normalise else fq[i]
        scored = []
        for j in range(len(fg)):
            if qids[i] == gids[j] and qcams[i] == gcams[j]:
                continue
            b = fg[j] / np.sqrt(sum(v * v for v in fg[j])) if normalise else fg[j]
            x, y = a * mq[i], b * mq[i]
            d = 1.0 - sum(x * y) / (np.sqrt(sum(x * x)) * np.sqrt(sum(y * y)))
            scored.append((d, j))
        scored.sort()
        hits, precisions, first = 0, [], None
        for rank, (_, j) in enumerate(scored, 1):
            if gids[j] == qids[i]:
                hits += 1
                precisions.append(hits / rank)
                first = rank if first is None else first
        if first is None:
            continue
        aps.append(sum(precisions) / len(precisions))
        for r in range(first - 1, max_rank):
            cmc_hits[r] += 1
    return np.array(cmc_hits) / len(aps), float(np.mean(aps)), len(fq) - len(aps)


def random_instance(rng, nq=10, ng=50, c=6, ids=5, cams=3):
    q = FeatureBank(rng.normal(size=(nq, c)), rng.uniform(0.05, 1, (nq, c)), rng.integers(0, ids, nq),
                    rng.integers(0, cams, nq))
    g = FeatureBank(rng.normal(size=(ng, c)), rng.uniform(0.05, 1, (ng, c)), rng.integers(0, ids, ng),
                    rng.integers(0, cams, ng))
    return q, g


# ---------------------------------------------------------------- distance

@pytest.mark.parametrize("variant", VARIANTS)
def test_unit_mask_is_plain_cosine(variant, rng):
    fq, fg = rng.normal(size=4), rng.normal(size=4)
    cos = fq @ fg / np.linalg.norm(fq) / np.linalg.norm(fg)
    assert masked_distance(fq, np.ones(4), fg, variant) == pytest.approx(1 - cos, abs=1e-12)


@pytest.mark.parametrize("variant", VARIANTS)
def test_self_match_is_zero(variant, rng):
    f = rng.normal(size=5)
    assert masked_distance(f, rng.uniform(0.1, 1, 5), f, variant) == pytest.approx(0.0, abs=1e-12)


def test_feature_variant_example():
    assert masked_distance([1, 0], [1, 0], [1, 1], "F") == pytest.approx(0.0, abs=1e-15)
    assert masked_distance([1, 0], [1, 1], [1, 1], "F") == pytest.approx(1 - 1 / np.sqrt(2), abs=1e-12)


def test_unknown_variant_rejected():
    with pytest.raises(ValueError, match="variant"):
        masked_distance([1.0], [1.0], [1.0], "X")


@pytest.mark.parametrize("variant", VARIANTS)
def test_distance_matrix_matches_pairwise(variant, rng):
    q, g = random_instance(rng, 4, 7)
    d = distance_matrix(q, g, variant)
    for i in range(4):
        for j in range(7):
            assert d[i, j] == pytest.approx(masked_distance(q.features[i], q.masks[i], g.features[j], variant),
                                            abs=1e-9)


def test_feature_side_normalisation_is_absorbed_by_cosine(rng):
    # a positive per-vector scale commutes with the mask, so both geometries give one distance
    q, g = random_instance(rng, 3, 4)
    np.testing.assert_allclose(distance_matrix(q, g, "F"), distance_matrix(q, g, "Fn"), atol=1e-12)


# ---------------------------------------------------------------- metrics

def test_perfect_retrieval():
    q = bank([[1.0, 0.0]], ids=[0], cams=[0])
    g = bank([[1.0, 0.0], [0.0, 1.0]], ids=[0, 1], cams=[1, 0])
    res = evaluate(q, g)
    assert res.cmc[0] == 1.0 and res.mAP == 1.0 and res.excluded_queries == 0


def test_hand_average_precision():
    q = bank([[1.0, 0.0]], ids=[0], cams=[0])
    g = bank([[1.0, 0.0], [0.8, 0.6], [0.0, 1.0]], ids=[0, 1, 0], cams=[1, 1, 1])
    res = evaluate(q, g)
    assert res.ranked[0].tolist() == [0, 1, 2]
    assert res.mAP == pytest.approx(5 / 6, abs=1e-15)


def test_same_camera_same_id_excluded():
    q = bank([[1.0, 0.0]], ids=[0], cams=[0])
    g = bank([[1.0, 0.0], [0.8, 0.6], [0.6, 0.8]], ids=[0, 1, 0], cams=[0, 1, 1])
    res = evaluate(q, g)
    assert res.ranked[0].tolist() == [1, 2]
    assert res.cmc[0] == 0.0 and res.cmc[1] == 1.0 and res.mAP == pytest.approx(0.5)
    off = evaluate(q, g, exclude_same_camera=False)
    assert off.ranked[0].tolist() == [0, 1, 2] and off.mAP == pytest.approx((1 + 2 / 3) / 2)


def test_query_without_match_excluded_and_counted():
    q = bank([[1.0, 0.0], [0.0, 1.0]], ids=[0, 5], cams=[0, 0])
    g = bank([[1.0, 0.0], [0.0, 1.0]], ids=[0, 1], cams=[1, 1])
    res = evaluate(q, g)
    assert res.excluded_queries == 1 and res.mAP == 1.0 and np.isnan(res.ap[1])
    assert res.to_json()["excluded_queries"] == 1


def test_ties_broken_by_gallery_index():
    q = bank([[1.0, 0.0]], ids=[0], cams=[0])
    g = bank([[2.0, 0.0], [1.0, 0.0], [3.0, 0.0]], ids=[1, 0, 1], cams=[1, 1, 1])
    assert evaluate(q, g).ranked[0].tolist() == [0, 1, 2]


@pytest.mark.parametrize("seed", range(50))
def test_metrics_match_naive_oracle(seed):
    rng = np.random.default_rng(seed)
    variant = VARIANTS[seed % 4]
    ng = int(rng.integers(10, 101))
    q, g = random_instance(rng, int(rng.integers(1, 12)), ng)
    res = evaluate(q, g, variant, max_rank=10)
    cmc, mAP, excl = naive_metrics(q.features.astype(np.float64), q.masks.astype(np.float64), q.ids, q.cams,
                                   g.features.astype(np.float64), g.ids, g.cams, variant in ("Pn", "Fn"), 10)
    assert res.excluded_queries == excl
    np.testing.assert_array_equal(res.cmc, cmc)
    assert res.mAP == pytest.approx(mAP, rel=1e-12, abs=1e-15)


@pytest.mark.parametrize("seed", range(5))
def test_ranking_invariances(seed):
    rng = np.random.default_rng(seed)
    q, g = random_instance(rng)
    base = evaluate(q, g, "F")
    scaled = evaluate(FeatureBank(q.features * 7.5, q.masks, q.ids, q.cams),
                      FeatureBank(g.features * 0.2, g.masks, g.ids, g.cams), "F")
    for a, b in zip(base.ranked, scaled.ranked):
        np.testing.assert_array_equal(a, b)
    np.testing.assert_array_equal(base.cmc, scaled.cmc)
    assert base.mAP == scaled.mAP
    d = distance_matrix(q, g, "F")
    for i in range(len(q)):
        np.testing.assert_array_equal(np.argsort(d[i], kind="stable"), np.argsort(np.exp(3 * d[i]), kind="stable"))
    assert np.all(np.diff(base.cmc) >= 0) and 0 <= base.mAP <= 1 and np.all((base.cmc >= 0) & (base.cmc <= 1))


def test_parallel_matches_serial(rng):
    q, g = random_instance(rng, 23, 40)
    a, b = evaluate(q, g, workers=1), evaluate(q, g, workers=4)
    assert a.mAP == b.mAP
    np.testing.assert_array_equal(a.cmc, b.cmc)
    for x, y in zip(a.ranked, b.ranked):
        np.testing.assert_array_equal(x, y)


def test_thread_cap_env(monkeypatch):
    monkeypatch.setenv("DPM_THREADS", "3")
    assert retrieval.thread_cap() == 3
    monkeypatch.setenv("DPM_THREADS", "0")
    assert retrieval.thread_cap() == 1
    monkeypatch.setenv("DPM_THREADS", "many")
    with pytest.raises(ValueError, match="DPM_THREADS"):
        retrieval.thread_cap()


# ---------------------------------------------------------------- bank file

def test_bank_validation():
    with pytest.raises(ValueError):
        FeatureBank(np.zeros((2, 3)), np.zeros((2, 4)), [0, 1], [0, 0])
    with pytest.raises(ValueError, match="non-finite"):
        FeatureBank(np.full((1, 2), np.nan), np.ones((1, 2)), [0], [0])


def test_bank_round_trip_and_layout(tmp_path, rng):
    q, _ = random_instance(rng, 5, 1)
    q.save(tmp_path / "q.fea")
    blob = (tmp_path / "q.fea").read_bytes()
    assert blob[:7] == b"DPMFEA1"
    assert np.frombuffer(blob[7:23], "<u8").tolist() == [5, 6]
    assert len(blob) == 23 + 5 * (16 + 2 * 4 * 6)
    back = FeatureBank.load(tmp_path / "q.fea")
    for name in ("features", "masks", "ids", "cams"):
        np.testing.assert_array_equal(getattr(back, name), getattr(q, name))


def test_bank_corruption(tmp_path, rng):
    q, _ = random_instance(rng, 2, 1)
    p = tmp_path / "q.fea"
    q.save(p)
    blob = p.read_bytes()
    for bad, msg in ((b"NOTAFEA" + blob[7:], "bad magic"), (blob[:-3], "truncated"), (blob + b"\0", "oversized"),
                     (blob[:12], "truncated")):
        p.write_bytes(bad)
        with pytest.raises(FeatureBankError, match=msg):
            FeatureBank.load(p)
