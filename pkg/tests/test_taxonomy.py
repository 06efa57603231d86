import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from csdet import taxonomy as tx


def two_leaf_tree():
    return tx.build_taxonomy([("cat", "animal"), ("dog", "animal")])


def forked_tree():
    return tx.build_taxonomy(
        [("cat", "animal"), ("dog", "animal"), ("car", "vehicle"),
         ("animal", "root"), ("vehicle", "root")]
    )


class TestBuild:
    def test_two_leaves(self):
        t = two_leaf_tree()
        assert t.root == "animal"
        assert t.leaf_order == ("cat", "dog")
        assert t.descendant_leaves["animal"] == frozenset({0, 1})
        assert t.descendant_leaves["cat"] == frozenset({0})

    def test_cycle(self):
        with pytest.raises(tx.CycleDetectedError):
            tx.build_taxonomy([("a", "b"), ("b", "a")])

    def test_cycle_off_root(self):
        with pytest.raises(tx.CycleDetectedError):
            tx.build_taxonomy([("a", "b"), ("c", "d"), ("d", "c")])

    def test_multiple_parents(self):
        with pytest.raises(tx.MultipleParentsError):
            tx.build_taxonomy([("cat", "animal"), ("cat", "pet")])

    def test_multiple_roots(self):
        with pytest.raises(tx.MultipleRootsError):
            tx.build_taxonomy([("a", "r1"), ("b", "r2")])

    def test_duplicate_edge(self):
        with pytest.raises(tx.DuplicateEdgeError):
            tx.build_taxonomy([("cat", "animal"), ("cat", "animal")])

    def test_empty(self):
        with pytest.raises(tx.TaxonomyError):
            tx.build_taxonomy([])

    def test_leaf_order_lexicographic(self):
        t = tx.build_taxonomy([("zebra", "animal"), ("ant", "animal"), ("moose", "animal")])
        assert t.leaf_order == ("ant", "moose", "zebra")


class TestLeafIndex:
    def test_index(self):
        t = two_leaf_tree()
        assert t.leaf_index("cat") == 0
        assert t.leaf_index("dog") == 1

    def test_not_a_leaf(self):
        with pytest.raises(tx.NotALeafError):
            two_leaf_tree().leaf_index("animal")

    def test_unknown(self):
        with pytest.raises(tx.UnknownCategoryError):
            two_leaf_tree().leaf_index("fish")


class TestLeafSoftmax:
    def test_symmetry(self):
        np.testing.assert_allclose(tx.leaf_softmax(np.zeros(2)), [0.5, 0.5], atol=1e-15)

    def test_hand_values(self):
        # exp(ln 2) = 2 against two exp(0) = 1 entries.
        out = tx.leaf_softmax(np.array([math.log(2.0), 0.0, 0.0]))
        np.testing.assert_allclose(out, [0.5, 0.25, 0.25], atol=1e-14)

    def test_overflow_safe(self):
        out = tx.leaf_softmax(np.array([1000.0, 0.0]))
        assert np.all(np.isfinite(out))
        assert out[0] == pytest.approx(1.0)
        assert out[1] == pytest.approx(0.0, abs=1e-300)

    def test_sums_to_one(self):
        out = tx.leaf_softmax(np.array([3.0, -2.0, 0.5, 9.0]))
        assert abs(out.sum() - 1.0) < 1e-12

    def test_rejects_nonfinite(self):
        with pytest.raises(ValueError):
            tx.leaf_softmax(np.array([1.0, np.inf]))

    @given(
        st.lists(st.floats(-50, 50), min_size=1, max_size=8),
        st.floats(-100, 100),
    )
    @settings(max_examples=60, deadline=None)
    def test_shift_invariance(self, scores, shift):
        s = np.array(scores)
        np.testing.assert_allclose(
            tx.leaf_softmax(s), tx.leaf_softmax(s + shift), atol=1e-12
        )


class TestAggregate:
    def test_root_sums_to_one(self):
        cp = tx.aggregate(two_leaf_tree(), np.array([0.5, 0.5]))
        assert cp["animal"] == pytest.approx(1.0)

    def test_hand_sums(self):
        t = forked_tree()
        # leaf_order is (car, cat, dog); animal = cat + dog, vehicle = car.
        assert t.leaf_order == ("car", "cat", "dog")
        cp = tx.aggregate(t, np.array([0.5, 0.2, 0.3]))
        assert cp["animal"] == pytest.approx(0.5)
        assert cp["vehicle"] == pytest.approx(0.5)
        assert cp["root"] == pytest.approx(1.0)

    def test_single_leaf(self):
        t = tx.build_taxonomy([("only", "root")])
        cp = tx.aggregate(t, np.array([1.0]))
        assert cp["only"] == 1.0
        assert cp["root"] == 1.0

    def test_length_mismatch(self):
        with pytest.raises(tx.LengthMismatchError):
            tx.aggregate(two_leaf_tree(), np.array([1.0]))

    def test_leaves_copied_verbatim(self):
        p = np.array([0.125, 0.875])
        cp = tx.aggregate(two_leaf_tree(), p)
        assert cp["cat"] == 0.125 and cp["dog"] == 0.875

    def test_invalid_distribution(self):
        with pytest.raises(ValueError):
            tx.aggregate(two_leaf_tree(), np.array([0.9, 0.9]))

    def test_linearity(self):
        t = forked_tree()
        rng = np.random.default_rng(3)
        p = rng.dirichlet(np.ones(3))
        q = rng.dirichlet(np.ones(3))
        for alpha in (0.0, 0.25, 0.9):
            mix = tx.aggregate(t, alpha * p + (1 - alpha) * q)
            pa = tx.aggregate(t, p)
            qa = tx.aggregate(t, q)
            for node in t.nodes:
                expect = alpha * pa[node] + (1 - alpha) * qa[node]
                assert mix[node] == pytest.approx(expect, abs=1e-12)


class TestMultiSoftmax:
    def test_two_children_symmetry(self):
        t = tx.build_taxonomy([("a", "root"), ("b", "root")])
        cp = tx.multisoftmax_baseline(t, {"a": 0.0, "b": 0.0})
        assert cp["a"] == pytest.approx(0.5)
        assert cp["b"] == pytest.approx(0.5)

    def test_chain_of_singletons(self):
        t = tx.build_taxonomy([("x", "root"), ("y", "x")])
        cp = tx.multisoftmax_baseline(t, {"x": -3.0, "y": 11.0})
        assert cp["x"] == pytest.approx(1.0)
        assert cp["y"] == pytest.approx(1.0)

    def test_uniform_product(self):
        t = tx.build_taxonomy(
            [("a", "g1"), ("b", "g1"), ("c", "g2"), ("g1", "root"), ("g2", "root")]
        )
        cp = tx.multisoftmax_baseline(t, {n: 0.0 for n in ("a", "b", "c", "g1", "g2")})
        assert cp["g1"] == pytest.approx(0.5)
        assert cp["a"] == pytest.approx(0.25)
        assert cp["c"] == pytest.approx(0.5)

    def test_missing_score(self):
        t = two_leaf_tree()
        with pytest.raises(tx.MissingScoreError):
            tx.multisoftmax_baseline(t, {"cat": 0.0})

    def test_tree_consistent(self):
        t = forked_tree()
        scores = {n: float(h) for h, n in enumerate(sorted(set(t.nodes) - {t.root}))}
        cp = tx.multisoftmax_baseline(t, scores)
        assert tx.tree_consistency_error(t, cp) < 1e-12


class TestFilterAncestors:
    def test_basic(self):
        t = two_leaf_tree()
        kept, count, filtered = tx.filter_ancestor_samples(["cat", "dog", "animal"], t)
        assert kept == [0, 1]
        assert count == 1
        assert filtered == {"animal"}

    def test_all_leaves(self):
        t = two_leaf_tree()
        kept, count, filtered = tx.filter_ancestor_samples(["dog", "cat", "cat"], t)
        assert kept == [0, 1, 2] and count == 0 and filtered == set()

    def test_unknown(self):
        with pytest.raises(tx.UnknownCategoryError):
            tx.filter_ancestor_samples(["fish"], two_leaf_tree())

    def test_partition_and_idempotence(self):
        t = forked_tree()
        labels = ["cat", "animal", "car", "vehicle", "dog", "root"]
        kept, count, _ = tx.filter_ancestor_samples(labels, t)
        assert len(kept) + count == len(labels)
        again, count2, _ = tx.filter_ancestor_samples([labels[i] for i in kept], t)
        assert count2 == 0 and len(again) == len(kept)


def random_tree(rng: np.random.Generator, n_nodes: int) -> tx.Taxonomy:
    """Random tree by attaching each new node to a random earlier one."""
    edges = [("n1", "n0")]
    for i in range(2, n_nodes):
        parent = int(rng.integers(0, i))
        edges.append((f"n{i}", f"n{parent}"))
    return tx.build_taxonomy(edges)


class TestTreeInvariants:
    def test_aggregate_of_softmax_consistency(self):
        rng = np.random.default_rng(20240811)
        for _ in range(200):
            t = random_tree(rng, int(rng.integers(2, 16)))
            scores = rng.normal(0, 5, size=t.num_leaves)
            cp = tx.aggregate(t, tx.leaf_softmax(scores))
            assert tx.tree_consistency_error(t, cp) < 1e-9

    def test_descendant_leaves_of_root_is_everything(self):
        rng = np.random.default_rng(99)
        for _ in range(20):
            t = random_tree(rng, int(rng.integers(2, 30)))
            assert t.descendant_leaves[t.root] == frozenset(range(t.num_leaves))


class TestEdgeFile:
    def test_round_trip(self, tmp_path):
        edges = [("cat", "animal"), ("dog", "animal")]
        path = tmp_path / "t.tsv"
        tx.write_edge_file(edges, path)
        assert tx.parse_edge_file(path) == edges

    def test_comments_and_blanks(self, tmp_path):
        path = tmp_path / "t.tsv"
        path.write_text("# header\n\ncat\tanimal\n\ndog\tanimal\n", encoding="utf-8")
        t = tx.load_taxonomy(path)
        assert t.leaf_order == ("cat", "dog")

    def test_malformed_line(self, tmp_path):
        path = tmp_path / "t.tsv"
        path.write_text("cat animal\n", encoding="utf-8")
        with pytest.raises(tx.TaxonomyError, match=":1"):
            tx.parse_edge_file(path)
