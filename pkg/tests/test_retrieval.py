from __future__ import annotations

import random
import unittest

import networkx as nx

from privgemo.anonymizer import build_view
from privgemo.boundary import BoundaryGuard
from privgemo.config import EngineConfig, PrivacyPolicy
from privgemo.embedder import HashingEmbedder
from privgemo.gateway import build_gateway
from privgemo.grounding import align_mentions, detect_subgraph
from privgemo.kg_store import graph_from_triples, load_graph
from privgemo.retrieval import brain_select, fuzzy_select, tree_bibfs
from privgemo.scripted import FIXTURES_DIR
from privgemo.types import TopicEntity, TopicEntitySet

SECRET = bytes(32)


def _view(name: str, mentions: list[str]):
    graph = load_graph(FIXTURES_DIR / name)
    topics = align_mentions(mentions, graph, HashingEmbedder())
    sub = detect_subgraph(graph, topics, 3)
    return build_view(sub, topics, PrivacyPolicy(), secret=SECRET).view


def _edge_ids(view, path) -> tuple[int, ...]:
    return tuple(view.triples.index(t) for t in path.triples)


def _oracle(view, anchors, d: int) -> set[tuple[int, ...]]:
    """Simple paths by networkx: rooted length-d walks for one anchor, banded a1-a2 paths for two."""
    graph = view.to_graph()
    found: set[tuple[int, ...]] = set()
    if len(anchors) == 1:
        for target in graph.nodes:
            if target == anchors[0]:
                continue
            for edges in nx.all_simple_edge_paths(graph, anchors[0], target, cutoff=d):
                if len(edges) == d:
                    found.add(tuple(key for _, _, key in edges))
        return found
    m = len(anchors)
    for edges in nx.all_simple_edge_paths(graph, anchors[0], anchors[1], cutoff=m * d):
        if m * (d - 1) < len(edges) <= m * d:
            found.add(tuple(key for _, _, key in edges))
    return found


class TreeSearchTest(unittest.TestCase):
    def test_single_anchor_matches_networkx(self) -> None:
        view = _view("obama.kg", ["Barack Obama"])
        for d in (1, 2, 3):
            paths = tree_bibfs(view, view.anchors, d, None)
            self.assertEqual({_edge_ids(view, p) for p in paths}, _oracle(view, view.anchors, d), d)
            self.assertEqual(len(paths), len({_edge_ids(view, p) for p in paths}))

    def test_two_anchors_match_networkx_within_the_band(self) -> None:
        view = _view("lejre.kg", ["Germany", "Lejre Municipality"])
        for d in (1, 2, 3):
            paths = tree_bibfs(view, view.anchors, d, None)
            self.assertEqual({_edge_ids(view, p) for p in paths}, _oracle(view, view.anchors, d), d)
            for path in paths:
                self.assertEqual(path.nodes[0], view.anchors[0])
                self.assertEqual(path.nodes[-1], view.anchors[1])
        self.assertEqual(len(tree_bibfs(view, view.anchors, 1, None)), 1)

    def test_three_anchors_join_segments(self) -> None:
        view = _view("paris.kg", ["Paris", "Dublin", "Mayor"])
        self.assertEqual(tree_bibfs(view, view.anchors, 1, None), [])
        paths = tree_bibfs(view, view.anchors, 2, None)
        self.assertEqual(len(paths), 1)
        self.assertEqual(paths[0].length, 5)
        self.assertEqual(paths[0].covered_anchors, frozenset(view.anchors))

    def test_beam_caps_each_layer(self) -> None:
        view = _view("obama.kg", ["Barack Obama"])
        emb = HashingEmbedder()
        paths = tree_bibfs(view, view.anchors, 2, 1, q="nationality", embedder=emb)
        self.assertEqual(len(paths), 1)

    def test_invalid_inputs(self) -> None:
        view = _view("mascot.kg", ["Lou Seal"])
        with self.assertRaises(ValueError):
            tree_bibfs(view, view.anchors, 0, None)
        self.assertEqual(tree_bibfs(view, ["ent_00000000"], 1, None), [])

    def test_random_graphs_match_networkx(self) -> None:
        rng = random.Random(17)
        for trial in range(200):
            size = rng.randint(4, 8)
            triples = {
                (f"node{h:03d}", f"rel{rng.randrange(3)}", f"node{t:03d}")
                for h, t in (rng.sample(range(size), 2) for _ in range(rng.randint(3, 2 * size)))
            }
            graph = graph_from_triples(sorted(triples))
            m = 1 if trial % 2 else 2
            anchor_ids = rng.sample(range(len(graph.entities)), m)
            topics = TopicEntitySet(
                tuple(TopicEntity(eid, graph.entities[eid].label, 1.0) for eid in anchor_ids)
            )
            sub = detect_subgraph(graph, topics, len(graph.entities))
            view = build_view(sub, topics, PrivacyPolicy(sanitize=False), secret=SECRET).view
            for d in (1, 2, 3):
                paths = tree_bibfs(view, view.anchors, d, None)
                found = [_edge_ids(view, p) for p in paths]
                self.assertEqual(len(found), len(set(found)), (trial, d))
                self.assertEqual(set(found), _oracle(view, view.anchors, d), (trial, d))


class PathSelectionTest(unittest.TestCase):
    def setUp(self) -> None:
        self.view = _view("obama.kg", ["Barack Obama"])
        self.emb = HashingEmbedder()
        self.paths = tree_bibfs(self.view, self.view.anchors, 2, None)
        self.indicator = "TOPIC_1 -- people.person.spouse_s -- X -- people.person.nationality -- ANS"

    def test_fuzzy_select_matches_direct_scoring(self) -> None:
        memory = ["TOPIC_1 -- people.person.place_of_birth -- X -- location.location.containedby -- ANS"]
        scored = fuzzy_select(self.paths, self.indicator, memory, 0.6, 2, self.emb, self.view.anchors)
        self.assertEqual(len(scored), 2)
        expected = {}
        for path in self.paths:
            template = path.template(self.view.anchors)
            expected[path] = 0.6 * self.emb.similarity(template, self.indicator) + 0.4 * self.emb.similarity(
                template, memory[0]
            )
        best = sorted(expected.values(), reverse=True)[:2]
        self.assertAlmostEqual(scored[0][1], best[0], places=9)
        self.assertAlmostEqual(scored[1][1], best[1], places=9)

    def test_fuzzy_select_without_memory_uses_indicator_only(self) -> None:
        scored = fuzzy_select(self.paths, self.indicator, [], 1.0, 80, self.emb, self.view.anchors)
        self.assertEqual(len(scored), 3)
        scores = [s for _, s in scored]
        self.assertEqual(scores, sorted(scores, reverse=True))
        self.assertEqual(scored[0][0].template(self.view.anchors), self.indicator)
        self.assertAlmostEqual(scored[0][1], 1.0, places=9)
        with self.assertRaises(ValueError):
            fuzzy_select(self.paths, self.indicator, [], 1.5, 80, self.emb, self.view.anchors)

    def test_fuzzy_select_on_random_pools(self) -> None:
        rng = random.Random(29)
        pool = [p for d in (1, 2, 3) for p in tree_bibfs(self.view, self.view.anchors, d, None)]
        templates = [p.template(self.view.anchors) for p in pool]
        words = sorted({w for t in templates for w in t.split()})
        for _ in range(100):
            paths = rng.sample(pool, rng.randint(1, len(pool)))
            indicator = " ".join(rng.choices(words, k=rng.randint(3, 9)))
            memory = [" ".join(rng.choices(words, k=rng.randint(3, 9))) for _ in range(rng.randint(0, 3))]
            alpha = rng.choice([0.0, 0.25, 0.6, 1.0])
            w1 = rng.randint(1, 6)
            scored = fuzzy_select(paths, indicator, memory, alpha, w1, self.emb, self.view.anchors)
            self.assertEqual(len(scored), min(w1, len(paths)))

            def expected(path) -> float:
                template = path.template(self.view.anchors)
                best = max((self.emb.similarity(template, m) for m in memory), default=0.0)
                return alpha * self.emb.similarity(template, indicator) + (1.0 - alpha) * best

            for path, score in scored:
                self.assertAlmostEqual(score, expected(path), places=9)
            scores = [s for _, s in scored]
            self.assertTrue(all(a >= b - 1e-12 for a, b in zip(scores, scores[1:])), scores)
            chosen = {id(p) for p, _ in scored}
            for path in paths:
                if id(path) not in chosen:
                    self.assertLessEqual(expected(path), scores[-1] + 1e-9)

    def test_brain_select_without_remote_keeps_score_order(self) -> None:
        scored = [(p, 1.0 - i * 0.1) for i, p in enumerate(self.paths)]
        chosen = brain_select(scored, "q", "i", 2, None)
        self.assertEqual(chosen, [p for p, _ in scored[:2]])

    def test_brain_select_honours_ranking_and_fills_gaps(self) -> None:
        scored = [(p, 1.0 - i * 0.1) for i, p in enumerate(self.paths)]
        gateway = build_gateway(EngineConfig(), scenario={"rank": {"prefer": ["people.person.nationality"]}})
        session = gateway.session()
        session.arm(BoundaryGuard([]))
        chosen = brain_select(scored, "q", "i", 2, session)
        self.assertEqual(len(chosen), 2)
        self.assertIn("people.person.nationality", chosen[0].serialize())
        self.assertEqual(session.brain_calls, 1)

    def test_brain_select_falls_back_on_malformed_reply(self) -> None:
        scored = [(p, 1.0 - i * 0.1) for i, p in enumerate(self.paths)]
        gateway = build_gateway(EngineConfig(), scenario={"malformed": ["rank_paths"]})
        session = gateway.session()
        session.arm(BoundaryGuard([]))
        self.assertEqual(brain_select(scored, "q", "i", 2, session), [p for p, _ in scored[:2]])


if __name__ == "__main__":
    unittest.main()
