from __future__ import annotations

import unittest

import numpy as np

from privgemo.config import EngineConfig
from privgemo.embedder import HashingEmbedder, cosine, top_k
from privgemo.errors import NoAlignment
from privgemo.gateway import build_gateway
from privgemo.grounding import align_mentions, detect_subgraph, extract_mentions
from privgemo.kg_store import load_graph
from privgemo.scripted import FIXTURES_DIR
from privgemo.types import Question, TopicEntity, TopicEntitySet


class HashingEmbedderTest(unittest.TestCase):
    def test_vectors_are_normalised_and_stable(self) -> None:
        a = HashingEmbedder(dim=64)
        b = HashingEmbedder(dim=64)
        v = a.embed("Lou Seal")
        self.assertAlmostEqual(float(np.linalg.norm(v)), 1.0, places=9)
        self.assertTrue(np.array_equal(v, b.embed("  lou   seal ")))

    def test_similar_text_scores_higher(self) -> None:
        emb = HashingEmbedder()
        close = emb.similarity("San Francisco Giants", "San Francisco Giant")
        far = emb.similarity("San Francisco Giants", "Region Zealand")
        self.assertGreater(close, far)
        self.assertAlmostEqual(emb.similarity("Denmark", "Denmark"), 1.0, places=9)

    def test_empty_text_is_rejected(self) -> None:
        with self.assertRaises(ValueError):
            HashingEmbedder().embed("   ")

    def test_top_k_breaks_ties_by_index(self) -> None:
        scores = np.array([0.5, 0.9, 0.5, 0.1])
        self.assertEqual(top_k(scores, 3).tolist(), [1, 0, 2])
        self.assertEqual(top_k(np.zeros(0), 2).tolist(), [])
        self.assertEqual(cosine(np.zeros(4), np.ones(4)), 0.0)

    def test_top_k_ties_at_the_cut_go_to_the_lower_index(self) -> None:
        self.assertEqual(top_k(np.array([0, 0, 2, 2, 1]), 1).tolist(), [2])
        self.assertEqual(top_k(np.array([1.0, 3.0, 1.0, 1.0]), 2).tolist(), [1, 0])
        rng = np.random.default_rng(5)
        for _ in range(2000):
            n = int(rng.integers(1, 12))
            scores = rng.integers(0, 4, size=n).astype(float)
            k = int(rng.integers(1, n + 1))
            expected = sorted(range(n), key=lambda i: (-scores[i], i))[:k]
            self.assertEqual(top_k(scores, k).tolist(), expected, scores.tolist())


class GroundingTest(unittest.TestCase):
    def setUp(self) -> None:
        self.graph = load_graph(FIXTURES_DIR / "lejre.kg")
        self.embedder = HashingEmbedder()

    def test_extract_mentions_uses_local_channel(self) -> None:
        gateway = build_gateway(EngineConfig(), scenario={"mentions": ["Germany", "Lejre Municipality", "Germany"]})
        session = gateway.session()
        q = Question(id="q", text="Which country containing Lejre Municipality shares a border with Germany?")
        self.assertEqual(extract_mentions(q, session), ["Germany", "Lejre Municipality"])
        self.assertEqual(session.hand_calls, 1)
        self.assertEqual(session.brain_calls, 0)

    def test_exact_alignment_orders_by_score_then_id(self) -> None:
        topics = align_mentions(["Germany", "Lejre Municipality"], self.graph, self.embedder)
        labels = [self.graph.entity(t.entity_id).label for t in topics]
        self.assertEqual(labels, ["Lejre Municipality", "Germany"])
        self.assertTrue(all(t.score == 1.0 for t in topics))

    def test_fuzzy_alignment_and_floor(self) -> None:
        topics = align_mentions(["Region of Zealand", "qqqq xxxx"], self.graph, self.embedder)
        self.assertEqual(len(topics), 1)
        only = topics.entities[0]
        self.assertEqual(self.graph.entity(only.entity_id).label, "Region Zealand")
        self.assertLess(only.score, 1.0)
        with self.assertRaises(NoAlignment):
            align_mentions(["qqqq xxxx"], self.graph, self.embedder)

    def test_detect_subgraph_is_the_union_of_balls(self) -> None:
        lejre = self.graph.find_by_label("Lejre Municipality")[0]
        topics = TopicEntitySet((TopicEntity(lejre, "Lejre Municipality", 1.0),))
        one = detect_subgraph(self.graph, topics, 1)
        self.assertEqual(sorted(one.labels()), ["Denmark", "Lejre Municipality", "Region Zealand"])
        self.assertEqual(len(one.triple_ids), 3)
        two = detect_subgraph(self.graph, topics, 2)
        self.assertIn("Germany", two.labels())
        for triple in two.triples():
            self.assertIn(triple.head, two.entity_ids)
            self.assertIn(triple.tail, two.entity_ids)

    def test_detect_subgraph_validates_inputs(self) -> None:
        with self.assertRaises(ValueError):
            detect_subgraph(self.graph, TopicEntitySet(), 2)
        topics = TopicEntitySet((TopicEntity(0, "x", 1.0),))
        with self.assertRaises(ValueError):
            detect_subgraph(self.graph, topics, 0)


if __name__ == "__main__":
    unittest.main()
