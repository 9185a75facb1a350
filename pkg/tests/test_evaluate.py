import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from betae.evaluate import (RankingMetrics, auc_rank_statistic, auc_trapezoid, empty_answer_auc,
                            evaluate_split, filtered_ranks, metrics_from_ranks, query_distances,
                            query_entropies, rank_answer, read_rank_dump, uncertainty_correlation,
                            write_rank_dump)
from betae.model import BetaModel, ModelConfig
from betae.query import parse_query
from betae.sampler import QueryInstance


class TableModel:
    """Stand-in model whose distances come from a fixed table, one row per query."""

    def __init__(self, rows):
        self.rows = {q: np.asarray(r, dtype=np.float64) for q, r in rows.items()}
        self.num_entities = len(next(iter(self.rows.values())))
        self._order = list(self.rows)

    def embed_queries(self, queries, union_mode=None):
        return [np.array([[float(self._order.index(q))]]) for q in queries]

    def all_distances(self, flat):
        return np.stack([self.rows[self._order[int(i)]] for i in flat[:, 0]])


Q1 = parse_query("(p 0 (e 1))")
Q2 = parse_query("(p 1 (e 2))")
Q3 = parse_query("(p 0 (p 1 (e 3)))")


class TestRankAnswer:
    def test_unique_best(self):
        assert rank_answer(2, np.array([5.0, 4.0, 1.0, 3.0]), {2}) == 1.0

    def test_three_better(self):
        d = np.array([1.0, 2.0, 3.0, 9.0, 10.0])
        r = rank_answer(3, d, {3})
        assert r == 4.0 and 1.0 / r == 0.25

    def test_co_answer_does_not_depress(self):
        d = np.array([0.5, 1.0, 2.0, 3.0])
        assert rank_answer(1, d, {0, 1}) == 1.0
        assert rank_answer(1, d, {1}) == 2.0

    def test_ties_count_half(self):
        d = np.array([1.0, 1.0, 1.0, 0.0])
        assert rank_answer(0, d, {0}) == 3.0  # 1 better + 2 tied / 2
        assert rank_answer(0, np.zeros(5), {0}) == 3.0

    def test_contract(self):
        with pytest.raises(ValueError):
            rank_answer(0, np.zeros(3), {1})

    @settings(max_examples=200, deadline=None)
    @given(st.lists(st.integers(0, 5), min_size=6, max_size=30), st.data())
    def test_vectorised_agrees(self, raw, data):
        d = np.asarray(raw, dtype=np.float64)
        n = len(d)
        answers = set(data.draw(st.lists(st.integers(0, n - 1), min_size=1, max_size=n - 1)))
        targets = sorted(answers)
        np.testing.assert_array_equal(filtered_ranks(d, targets, answers),
                                      [rank_answer(v, d, answers) for v in targets])

    @settings(max_examples=200, deadline=None)
    @given(st.lists(st.floats(0, 10), min_size=5, max_size=30), st.data())
    def test_injecting_answers_never_changes_rank(self, raw, data):
        d = np.asarray(raw)
        n = len(d)
        v = data.draw(st.integers(0, n - 1))
        extra = set(data.draw(st.lists(st.integers(0, n - 1), max_size=n - 1))) - {v}
        if len(extra) == n - 1:
            extra.pop()
        base = rank_answer(v, d, {v})
        grown = rank_answer(v, d, {v} | extra)
        # answers are filtered out, so each injected answer can only remove competition
        better_removed = sum(d[u] < d[v] for u in extra) + 0.5 * sum(d[u] == d[v] for u in extra)
        assert grown == base - better_removed
        # injecting a new correct answer with a better score than v leaves v's rank unchanged
        d2 = np.append(d, -1.0)
        assert rank_answer(v, d2, {v, n} | extra) == grown


class TestEvaluateSplit:
    @pytest.fixture
    def setup(self):
        # entities 0..5; smaller distance = better
        model = TableModel({
            Q1: [0.1, 0.5, 0.2, 0.9, 0.8, 0.7],   # hard {2}: non-answers 1,3,4,5 all worse -> 1
            Q2: [0.3, 0.2, 0.1, 0.6, 0.4, 0.5],   # hard {3,4}, easy {2}: 3 -> 1+3=4, 4 -> 1+2=3
            Q3: [0.5, 0.5, 0.5, 0.5, 0.5, 0.5],   # hard {0}: all tied with 5 others -> 3.5
        })
        data = {
            "1p": [QueryInstance(Q1, "1p", frozenset({0}), frozenset({2})),
                   QueryInstance(Q2, "1p", frozenset({2}), frozenset({3, 4}))],
            "2p": [QueryInstance(Q3, "2p", frozenset(), frozenset({0}))],
        }
        return model, data

    def test_hand_computed(self, setup):
        model, data = setup
        m = evaluate_split(data, model)
        assert sorted(m.dump) == sorted([("1p:0", 2, 1.0), ("1p:1", 3, 4.0), ("1p:1", 4, 3.0),
                                         ("2p:0", 0, 3.5)])
        mrr_1p = (1.0 + (1 / 4 + 1 / 3) / 2) / 2
        assert m.per_structure["1p"]["mrr"] == pytest.approx(mrr_1p, abs=1e-15)
        assert m.per_structure["1p"]["hits@1"] == 0.5
        assert m.per_structure["1p"]["hits@3"] == pytest.approx(0.75)
        assert m.per_structure["1p"]["pairs"] == 3 and m.per_structure["1p"]["queries"] == 2
        assert m.per_structure["2p"]["mrr"] == pytest.approx(1 / 3.5)
        assert m.average(["1p", "2p"])["mrr"] == pytest.approx((mrr_1p + 1 / 3.5) / 2)
        assert m.average(["3in"]) is None

    def test_all_targets(self, setup):
        model, data = setup
        m = evaluate_split(data, model, targets="all")
        assert ("1p:0", 0, 1.0) in m.dump

    def test_dump_recomputes_exactly(self, setup, tmp_path):
        model, data = setup
        m = evaluate_split(data, model)
        path = tmp_path / "ranks.tsv"
        write_rank_dump(m, path)
        rows = read_rank_dump(path)
        assert rows == m.dump
        owner = {qid: qid.split(":")[0] for qid, _, _ in rows}
        assert metrics_from_ranks(rows, owner, m.ks) == m.per_structure

    def test_report_formats(self, setup):
        model, data = setup
        m = evaluate_split(data, model)
        table = m.table()
        assert table.splitlines()[0].split() == ["metric", "1p", "2p", "avg_epfo", "avg_neg"]
        assert "-" in table.splitlines()[1].split()[-1]
        recs = [json.loads(r) for r in m.records()]
        assert [r["structure"] for r in recs] == ["1p", "2p"]

    def test_absent_structures_omitted(self, setup):
        model, data = setup
        m = evaluate_split({"1p": data["1p"], "3i": []}, model)
        assert set(m.per_structure) == {"1p"}

    def test_union_takes_closest_disjunct(self):
        model = BetaModel(8, 2, ModelConfig(dim=4, hidden_dim=8), seed=0)
        a, b = parse_query("(p 0 (e 1))"), parse_query("(p 1 (e 2))")
        u = parse_query("(or (p 0 (e 1)) (p 1 (e 2)))")
        d = query_distances(model, [a, b, u], "dnf")
        np.testing.assert_array_equal(d[2], np.minimum(d[0], d[1]))


class TestMetricInvariants:
    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.lists(st.floats(1, 50).map(lambda r: math.floor(2 * r) / 2), min_size=1, max_size=5),
                    min_size=1, max_size=10))
    def test_hits_ordering(self, ranks_per_query):
        dump = [(f"q{i}", j, r) for i, rs in enumerate(ranks_per_query) for j, r in enumerate(rs)]
        m = metrics_from_ranks(dump, {f"q{i}": "1p" for i in range(len(ranks_per_query))})["1p"]
        assert 0 <= m["hits@1"] <= m["hits@3"] <= m["hits@10"] <= 1
        assert m["hits@1"] <= m["mrr"] <= 1

    def test_per_query_averaging(self):
        dump = [("a", 0, 1.0), ("b", 0, 2.0), ("b", 1, 4.0), ("b", 2, 4.0)]
        m = metrics_from_ranks(dump, {"a": "1p", "b": "1p"})["1p"]
        assert m["mrr"] == pytest.approx((1.0 + (0.5 + 0.25 + 0.25) / 3) / 2)


class TestAUC:
    def test_separated(self):
        assert auc_rank_statistic([5, 6, 7], [1, 2]) == 1.0
        assert auc_trapezoid([5, 6, 7], [1, 2]) == 1.0
        assert auc_rank_statistic([1, 2], [5, 6, 7]) == 0.0

    def test_all_tied(self):
        assert auc_rank_statistic([1, 1], [1, 1, 1]) == 0.5
        assert auc_trapezoid([1, 1], [1, 1, 1]) == 0.5

    def test_hand_table(self):
        # pairs: (3>1)(3>2)(3=3)(0<1)(0<2)(0<3) -> (2 + 0.5) / 6
        assert auc_rank_statistic([3, 0], [1, 2, 3]) == pytest.approx(2.5 / 6, abs=1e-15)

    @settings(max_examples=300, deadline=None)
    @given(st.lists(st.integers(0, 8), min_size=1, max_size=40), st.lists(st.integers(0, 8), min_size=1, max_size=40))
    def test_rank_statistic_equals_trapezoid(self, pos, neg):
        assert abs(auc_rank_statistic(pos, neg) - auc_trapezoid(pos, neg)) <= 1e-9

    def test_continuous_scores(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            pos, neg = rng.normal(0.5, 1, 200), rng.normal(0, 1, 150)
            assert abs(auc_rank_statistic(pos, neg) - auc_trapezoid(pos, neg)) <= 1e-9

    def test_empty_pool(self):
        with pytest.raises(ValueError):
            auc_rank_statistic([], [1.0])
        with pytest.raises(ValueError):
            auc_trapezoid([1.0], [])


class TestUncertainty:
    @pytest.fixture
    def model(self):
        return BetaModel(10, 2, ModelConfig(dim=4, hidden_dim=8), seed=1)

    def test_entropy_is_sum_over_dimensions(self, model):
        from betae import special
        q = parse_query("(p 0 (e 3))")
        emb, = model.embed_query(q, union_mode="dnf")
        np.testing.assert_allclose(query_entropies(model, [q])[0],
                                   np.sum(special.entropy(emb.alpha, emb.beta)), rtol=1e-14)

    def test_union_uses_de_morgan(self, model):
        u = parse_query("(or (p 0 (e 3)) (p 1 (e 4)))")
        emb = model.embed_query(u, union_mode="dm")
        from betae import special
        np.testing.assert_allclose(query_entropies(model, [u])[0],
                                   np.sum(special.entropy(emb.alpha, emb.beta)), rtol=1e-14)

    def test_constant_entropy_is_absent(self, model):
        q = parse_query("(p 0 (e 3))")
        insts = [QueryInstance(q, "1p", frozenset({i}), frozenset()) for i in range(5)]
        insts += [QueryInstance(q, "1p", frozenset(range(3)), frozenset())]
        rep = uncertainty_correlation({"1p": insts}, model)
        assert rep.per_structure["1p"]["srcc"] is None and rep.per_structure["1p"]["pcc"] is None

    def test_too_few_queries(self, model):
        insts = [QueryInstance(parse_query(f"(p 0 (e {i}))"), "1p", frozenset({i}), frozenset())
                 for i in range(2)]
        assert uncertainty_correlation({"1p": insts}, model).per_structure["1p"]["srcc"] is None

    def test_coefficients_in_range(self, model):
        insts = [QueryInstance(parse_query(f"(p {i % 2} (e {i}))"), "1p", frozenset(range(i + 1)), frozenset())
                 for i in range(8)]
        rep = uncertainty_correlation({"1p": insts}, model)
        for key in ("srcc", "pcc"):
            assert -1.0 <= rep.per_structure["1p"][key] <= 1.0
        assert rep.table().splitlines()[0].split() == ["metric", "1p"]
        assert json.loads(rep.records()[0])["queries"] == 8

    def test_empty_answer_auc(self, model):
        pos = {"1p": [parse_query(f"(p 0 (e {i}))") for i in range(4)]}
        neg = {"1p": [parse_query(f"(p 1 (e {i}))") for i in range(4)]}
        out = empty_answer_auc(pos, neg, model)
        assert set(out) == {"1p", "overall"}
        assert out["1p"] == out["overall"]
        hp, hn = query_entropies(model, pos["1p"]), query_entropies(model, neg["1p"])
        assert out["1p"] == auc_rank_statistic(hp, hn)
        with pytest.raises(ValueError):
            empty_answer_auc({"1p": pos["1p"]}, {}, model)
        with pytest.raises(ValueError):
            empty_answer_auc({}, {}, model)


def test_metrics_container_defaults():
    m = RankingMetrics({"1p": {"mrr": 0.5, "hits@1": 0.0, "queries": 1, "pairs": 1}}, (1,))
    assert m.dump == [] and m.average(["1p"]) == {"mrr": 0.5, "hits@1": 0.0}
