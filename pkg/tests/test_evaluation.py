import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from diffusion_fiqa.embedder import ExternalEmbedder, cosine_similarity, write_embedding_csv
from diffusion_fiqa.errors import ContractError, ParseError
from diffusion_fiqa.evaluation import (Pair, ProtocolConfig, compute_similarities, edc_curve, edc_for_pairs,
                                       evaluate, oracle_qualities, pair_qualities, pauc, read_pairs_csv,
                                       read_quality_csv, run_protocol, solve_threshold, synthetic_protocol,
                                       write_pairs_csv, write_quality_map)
from edc_oracle import edc_oracle, pauc_oracle, threshold_oracle


def random_instance(seed):
    """Up to 200 images and 2,000 pairs with tie-heavy or continuous qualities."""
    rng = np.random.default_rng(seed)
    n_img = int(rng.integers(4, 201))
    n_id = int(rng.integers(2, max(3, n_img // 2)))
    ids = rng.integers(0, n_id, n_img)
    emb = rng.standard_normal((n_id, 8))[ids] + rng.uniform(0.3, 2.0) * rng.standard_normal((n_img, 8))
    refs = [f"i{k}" for k in range(n_img)]
    a = rng.integers(0, n_img, int(rng.integers(2, 2001)))
    b = (a + rng.integers(1, n_img, a.size)) % n_img
    pairs = [Pair(refs[i], refs[j], bool(ids[i] == ids[j])) for i, j in zip(a, b)]
    q = rng.random(n_img)
    if rng.random() < 0.5:
        q = np.round(q * rng.integers(2, 10)) / 10  # heavy ties
    return pairs, dict(zip(refs, emb)), dict(zip(refs, q)), rng


# --- similarities ------------------------------------------------------------------------------

def test_similarity_closed_forms():
    table = {"a": np.array([1.0, 0.0]), "b": np.array([1.0, 0.0]), "c": np.array([0.0, 2.0])}
    mated, non = compute_similarities([Pair("a", "b", True), Pair("a", "c", False)], table)
    assert mated.tolist() == [1.0] and non.tolist() == [0.0]


def test_missing_reference_is_named():
    with pytest.raises(ContractError, match="'ghost'"):
        compute_similarities([Pair("a", "ghost", True)], {"a": np.ones(2)})
    with pytest.raises(ContractError, match="'ghost'"):
        compute_similarities([Pair("ghost", "a", True)], ExternalEmbedder({"a": np.ones(2)}))


def test_all_pairs_protocol_matches_pairwise_recomputation():
    proto = synthetic_protocol(n_identities=40, per_identity=5, seed=3)
    assert len(proto.refs) == 200
    mated, non = compute_similarities(proto.pairs, proto.embeddings, chunk=333)
    expect = [cosine_similarity(proto.embeddings[p.ref_a], proto.embeddings[p.ref_b]) for p in proto.pairs]
    flags = np.array([p.mated for p in proto.pairs])
    assert np.array_equal(mated, np.array(expect)[flags])
    assert np.array_equal(non, np.array(expect)[~flags])
    # and an arithmetic-independent check
    for p, s in zip(proto.pairs[:300], expect):
        u, v = proto.embeddings[p.ref_a], proto.embeddings[p.ref_b]
        ref = math.fsum(u * v) / math.sqrt(math.fsum(u * u) * math.fsum(v * v))
        assert abs(s - ref) < 1e-14


# --- threshold ---------------------------------------------------------------------------------

def test_threshold_examples():
    t = solve_threshold([0.1, 0.5, 0.9], 0.34)
    assert t.value == 0.9 and t.achieved_fmr == pytest.approx(1 / 3)
    t = solve_threshold([0.4] * 5, 0.5)
    assert t.value == np.nextafter(0.4, 1) and t.achieved_fmr == 0.0
    assert solve_threshold([0.1, 0.2, 0.3], 1e-3).achieved_fmr == 0.0


@pytest.mark.parametrize("target", [0.0, 1.0, 1.5, -0.1])
def test_threshold_rejects_targets(target):
    with pytest.raises(ContractError):
        solve_threshold([0.1, 0.2], target)


def test_threshold_rejects_empty():
    with pytest.raises(ContractError):
        solve_threshold([], 0.1)


@settings(max_examples=300)
@given(st.lists(st.integers(-5, 5).map(lambda k: k / 5), min_size=1, max_size=30), st.floats(0.001, 0.999))
def test_threshold_is_minimal_and_feasible(raw, target):
    scores = np.array(raw)
    t = solve_threshold(scores, target)
    assert t.value == threshold_oracle(scores, target)
    assert t.achieved_fmr == np.mean(scores >= t.value) <= target
    lower = scores[scores < t.value]
    if lower.size:  # dropping to the next distinct score breaks the target
        assert np.mean(scores >= lower.max()) > target


# --- EDC ---------------------------------------------------------------------------------------

def test_edc_hand_example():
    c = edc_curve([0.2, 0.9, 0.9, 0.9], [0.1, 0.5, 0.6, 0.7], threshold=0.5, discard_limit=0.3)
    assert c.discard.tolist() == [0.0, 0.25]
    assert c.fnmr.tolist() == [0.25, 0.0]
    assert c.value_at(0.1) == 0.25 and c.value_at(0.25) == 0.0


def test_edc_all_accepted_is_zero(rng):
    c = edc_curve(rng.uniform(0.6, 1.0, 50), rng.random(50), 0.5, 0.5)
    assert np.all(c.fnmr == 0)


def test_edc_tied_pairs_leave_together():
    c = edc_curve([0.1, 0.9, 0.1, 0.9], [0.2, 0.2, 0.5, 0.9], 0.5, 1.0)
    assert c.discard.tolist() == [0.0, 0.5, 0.75]
    assert c.fnmr.tolist() == [0.5, 0.5, 0.0]
    assert np.all(np.diff(c.surviving) < 0)


def test_edc_errors():
    with pytest.raises(ContractError):
        edc_curve([], [], 0.5)
    with pytest.raises(ContractError):
        edc_curve([0.1], [0.1, 0.2], 0.5)
    with pytest.raises(ContractError, match="'z'"):
        pair_qualities([Pair("a", "z", True)], {"a": 0.1})
    with pytest.raises(ContractError):
        edc_for_pairs([Pair("a", "b", False)], [0.3], {"a": 0.0, "b": 0.0}, 0.5)


def test_edc_and_pauc_match_brute_force_on_100_instances():
    for seed in range(100):
        pairs, table, q, rng = random_instance(seed)
        mated_pairs = [p for p in pairs if p.mated]
        if not mated_pairs or len(mated_pairs) == len(pairs):
            continue
        mated, non = compute_similarities(pairs, table)
        target = float(rng.choice([1e-3, 1e-2, 0.1]))
        tau = solve_threshold(non, target).value
        assert tau == threshold_oracle(non, target)
        limit = float(rng.choice([0.2, 0.3, 1.0]))
        pq = pair_qualities(mated_pairs, q)
        curve = edc_curve(mated, pq, tau, limit)
        expect = edc_oracle(list(mated), list(pq), tau, limit)
        assert curve.discard.tolist() == [x for x, _ in expect], seed
        assert curve.fnmr.tolist() == [y for _, y in expect], seed
        assert np.all(np.diff(curve.discard) > 0) and np.all(np.diff(curve.surviving) < 0)
        area = pauc(curve, min(limit, 0.3))
        assert area.raw_pauc == pytest.approx(float(pauc_oracle(expect, min(limit, 0.3))), abs=1e-15)


# --- pAUC --------------------------------------------------------------------------------------

def test_pauc_constant_rectangle():
    c = edc_curve([0.1, 0.9, 0.1, 0.9], [0.5, 0.5, 0.5, 0.5], 0.5, 0.3)
    r = pauc(c, 0.3)
    assert r.raw_pauc == pytest.approx(0.5 * 0.3) and r.normalized_pauc == pytest.approx(1.0)


def test_pauc_instant_drop_is_near_zero():
    scores = np.full(1000, 0.9)
    scores[0] = 0.1
    q = np.ones(1000)
    q[0] = 0.0
    r = pauc(edc_curve(scores, q, 0.5, 0.3), 0.3)
    assert r.normalized_pauc == pytest.approx(0.001 / 0.3)
    assert r.normalized_pauc < 0.01


def test_pauc_without_errors_is_flagged():
    r = pauc(edc_curve([0.9, 0.8], [0.1, 0.2], 0.5, 0.3), 0.3)
    assert r.raw_pauc == 0.0 and math.isnan(r.normalized_pauc) and not r.normalized_defined


def test_pauc_rejects_bad_limit():
    c = edc_curve([0.9, 0.1], [0.1, 0.2], 0.5)
    for bad in (0.0, 1.5):
        with pytest.raises(ContractError):
            pauc(c, bad)


# --- calibration on the synthetic protocol --------------------------------------------------------

def test_random_quality_null_and_oracle_quality():
    norm_random = []
    for seed in range(30):
        proto = synthetic_protocol(seed=seed)
        rng = np.random.default_rng(seed)
        _, rand = evaluate(proto, {r: rng.random() for r in proto.refs})
        _, non = compute_similarities(proto.pairs, proto.embeddings)
        _, best = evaluate(proto, oracle_qualities(proto, solve_threshold(non, 1e-3).value))
        assert best.normalized_pauc < rand.normalized_pauc
        norm_random.append(rand.normalized_pauc)
    assert 0.9 <= np.mean(norm_random) <= 1.1


# --- files and reports -------------------------------------------------------------------------

@pytest.fixture
def protocol_files(tmp_path):
    proto = synthetic_protocol(n_identities=20, per_identity=4, seed=5)
    write_embedding_csv(tmp_path / "emb.csv", proto.refs, [proto.embeddings[r] for r in proto.refs])
    write_pairs_csv(tmp_path / "pairs.csv", proto.pairs)
    rng = np.random.default_rng(0)
    write_quality_map(tmp_path / "random.csv", {r: rng.random() for r in proto.refs})
    _, non = compute_similarities(proto.pairs, proto.embeddings)
    write_quality_map(tmp_path / "oracle.csv", oracle_qualities(proto, solve_threshold(non, 1e-3).value))
    return tmp_path, proto


def test_pairs_round_trip(protocol_files):
    path, proto = protocol_files
    assert read_pairs_csv(path / "pairs.csv") == proto.pairs


def test_run_protocol_structure_and_determinism(protocol_files):
    path, _ = protocol_files
    cfg = ProtocolConfig(str(path / "emb.csv"), str(path / "pairs.csv"),
                         {"random": str(path / "random.csv"), "oracle": str(path / "oracle.csv")},
                         str(path / "out1"), plot=True)
    report = run_protocol(cfg)
    names = sorted(p.name for p in report.files)
    assert names == ["edc.svg", "edc_oracle.csv", "edc_random.csv", "pauc.csv"]
    rows = (path / "out1" / "pauc.csv").read_text().splitlines()
    assert rows[0] == "method,fmr,discard_limit,raw_pauc,normalized_pauc,fnmr_at_zero"
    assert len(rows) == 3
    assert (path / "out1" / "edc_random.csv").read_text().startswith("discard_fraction,fnmr\n0.0,")
    cfg.out_dir = str(path / "out2")
    run_protocol(cfg)
    for name in names:
        assert (path / "out1" / name).read_bytes() == (path / "out2" / name).read_bytes(), name


def test_parse_errors_carry_line_numbers(tmp_path):
    (tmp_path / "p.csv").write_text("ref_a,ref_b,label\na,b,mated\na,c,friends\n")
    with pytest.raises(ParseError, match="line 3"):
        read_pairs_csv(tmp_path / "p.csv")
    (tmp_path / "q.csv").write_text("path,quality\na,0.5\nb,nan\n")
    with pytest.raises(ParseError, match="line 3"):
        read_quality_csv(tmp_path / "q.csv")
    (tmp_path / "h.csv").write_text("a,b\n")
    with pytest.raises(ParseError, match="line 1"):
        read_quality_csv(tmp_path / "h.csv")
