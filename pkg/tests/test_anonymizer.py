from __future__ import annotations

import random
import unittest

import networkx as nx

from privgemo.anonymizer import (
    TOKEN_PATTERN,
    anonymize_text,
    build_view,
    coarsen_literal,
    deanonymize_path,
    deanonymize_text,
    question_replacements,
)
from privgemo.config import PrivacyPolicy
from privgemo.embedder import HashingEmbedder
from privgemo.errors import BudgetInfeasible, MappingSealed
from privgemo.grounding import align_mentions, detect_subgraph
from privgemo.kg_store import graph_from_triples, load_graph
from privgemo.retrieval import tree_bibfs
from privgemo.scripted import FIXTURES_DIR
from privgemo.types import Literal, TopicEntity, TopicEntitySet

SECRET_A = bytes(range(32))
SECRET_B = bytes(range(32, 64))


def _session(name: str, mentions: list[str], policy: PrivacyPolicy | None = None, secret: bytes = SECRET_A):
    graph = load_graph(FIXTURES_DIR / name)
    topics = align_mentions(mentions, graph, HashingEmbedder())
    sub = detect_subgraph(graph, topics, 3)
    return graph, topics, build_view(sub, topics, policy or PrivacyPolicy(), secret=secret)


def _random_labels(rng: random.Random, count: int) -> list[str]:
    letters = "abcdefghijklmnopqrstuvwxyz"
    labels: list[str] = []
    while len(labels) < count:
        words = [
            "".join(rng.choice(letters) for _ in range(rng.randint(3, 8)))
            for _ in range(rng.randint(1, 3))
        ]
        label = " ".join(words)
        if label not in labels:
            labels.append(label)
    return labels


def _graph_session(
    triples: list[tuple[str, str, str]],
    anchors: list[str],
    policy: PrivacyPolicy,
    secret: bytes = SECRET_A,
):
    graph = graph_from_triples(triples)
    ids = {entity.label: entity.id for entity in graph.entities}
    topics = TopicEntitySet(tuple(TopicEntity(ids[label], label, 1.0) for label in anchors))
    sub = detect_subgraph(graph, topics, len(graph.entities))
    return graph, ids, topics, build_view(sub, topics, policy, secret=secret)


class AnonymizedViewTest(unittest.TestCase):
    def test_no_raw_label_reaches_the_serialized_view(self) -> None:
        graph, _, session = _session("paris.kg", ["Paris", "Dublin", "Mayor"])
        text = session.view.serialize()
        self.assertIsNone(session.guard.find(text))
        for label in session.entity_labels:
            self.assertNotIn(label, text)
        self.assertTrue(all(TOKEN_PATTERN.fullmatch(token) for token in session.view.entities))

    def test_tokens_are_stable_per_secret_and_unlinkable_across_sessions(self) -> None:
        _, _, first = _session("mascot.kg", ["Lou Seal"])
        _, _, again = _session("mascot.kg", ["Lou Seal"])
        _, _, other = _session("mascot.kg", ["Lou Seal"], secret=SECRET_B)
        self.assertEqual(set(first.view.entities), set(again.view.entities))
        self.assertFalse(set(first.view.entities) & set(other.view.entities))

    def test_structurally_identical_entities_become_one_supernode(self) -> None:
        graph, _, session = _session("mascot.kg", ["Lou Seal"])
        groups = session.view.supernodes
        self.assertEqual(len(groups), 1)
        members = next(iter(groups.values()))
        self.assertEqual(
            sorted(graph.entity(eid).label for eid in members),
            ["2010 World Series", "2012 World Series"],
        )
        self.assertEqual(session.view.raw_entity_count, 5)
        self.assertEqual(len(session.view.entities), 4)
        self.assertAlmostEqual(session.view.reduction_ratio, 0.2)

    def test_paths_deanonymize_to_raw_triples(self) -> None:
        graph, _, session = _session("mascot.kg", ["Lou Seal"])
        view = session.view
        paths = tree_bibfs(view, view.anchors, 2, None)
        self.assertEqual(len(paths), 2)
        expanded = [deanonymize_path(path, view, graph) for path in paths]
        self.assertEqual(sorted(len(chains) for chains in expanded), [1, 2])
        tails = {graph.render_triple(chain[-1])[2] for chains in expanded for chain in chains}
        self.assertEqual(tails, {"2014 World Series", "2012 World Series", "2010 World Series"})
        for chains in expanded:
            for chain in chains:
                self.assertEqual(graph.render_triple(chain[0])[0], "Lou Seal")

    def test_question_text_round_trip(self) -> None:
        graph, topics, session = _session("paris.kg", ["Paris", "Dublin", "Mayor"])
        question = "Which Mayor of Paris was born in Dublin?"
        anon = anonymize_text(question, question_replacements(session, topics))
        self.assertIsNone(session.guard.find(anon))
        self.assertEqual(len(TOKEN_PATTERN.findall(anon)), 3)
        self.assertEqual(deanonymize_text(anon, session.mapping, graph), question)

    def test_mapping_is_sealed_after_build_and_zeroized_on_close(self) -> None:
        _, _, session = _session("mascot.kg", ["Lou Seal"])
        with self.assertRaises(MappingSealed):
            session.mapping.mint_entity(999, "new entity")
        session.close()
        with self.assertRaises(MappingSealed):
            session.mapping._keyed("Lou Seal")

    def test_plaintext_ratio_keeps_labels(self) -> None:
        graph, _, session = _session("lejre.kg", ["Germany", "Lejre Municipality"], PrivacyPolicy(anonymization_ratio=0.0))
        self.assertIn("Denmark", session.view.entities)
        self.assertIn("Lejre Municipality", session.view.anchors)
        self.assertEqual(len(session.guard), 0)

    def test_privacy_mode_hides_relation_labels(self) -> None:
        _, _, session = _session("obama.kg", ["Barack Obama"], PrivacyPolicy(relation_mode="privacy"))
        self.assertTrue(all(t.relation.startswith("rel_") for t in session.view.triples))
        self.assertNotIn("people.person.spouse_s", session.view.serialize())

    def test_node_budget(self) -> None:
        _, _, pruned = _session("mascot.kg", ["Lou Seal"], PrivacyPolicy(node_budget=3))
        self.assertEqual(len(pruned.view.entities), 3)
        self.assertEqual(len(pruned.view.supernodes), 0)
        self.assertIn(pruned.view.anchors[0], pruned.view.entities)
        with self.assertRaises(BudgetInfeasible):
            _session("lejre.kg", ["Germany", "Lejre Municipality"], PrivacyPolicy(node_budget=1))

    def test_all_zero_secret_is_a_usable_key(self) -> None:
        _, _, session = _session("mascot.kg", ["Lou Seal"], secret=bytes(32))
        self.assertTrue(all(TOKEN_PATTERN.fullmatch(token) for token in session.view.entities))
        self.assertFalse(session.mapping.zeroized)
        session.close()
        self.assertTrue(session.mapping.zeroized)
        with self.assertRaises(MappingSealed):
            session.mapping._keyed("Lou Seal")


class RandomizedViewTest(unittest.TestCase):
    def test_random_labels_round_trip_through_question_text(self) -> None:
        rng = random.Random(3)
        checked = 0
        for _ in range(50):
            labels = _random_labels(rng, 20)
            hub = labels[0]
            triples = [(hub, f"rel{i}", leaf) for i, leaf in enumerate(labels[1:])]
            graph, _, topics, session = _graph_session(triples, [hub], PrivacyPolicy())
            self.assertEqual(len(session.view.supernodes), 0)
            text = " | ".join(rng.sample(labels, len(labels)))
            anon = anonymize_text(text, question_replacements(session, topics))
            self.assertIsNone(session.guard.find(anon))
            self.assertEqual(len(TOKEN_PATTERN.findall(anon)), len(labels))
            self.assertEqual(deanonymize_text(anon, session.mapping, graph), text)
            checked += len(labels)
        self.assertEqual(checked, 1000)

    def test_sessions_with_different_secrets_share_no_tokens(self) -> None:
        rng = random.Random(8)
        policy = PrivacyPolicy(relation_mode="privacy")

        def tokens(session) -> set[str]:
            return set(session.view.entities) | {t.relation for t in session.view.triples}

        for _ in range(100):
            labels = _random_labels(rng, 8)
            triples = [(labels[0], f"rel{i % 3}", leaf) for i, leaf in enumerate(labels[1:])]
            first_secret, second_secret = rng.randbytes(32), rng.randbytes(32)
            *_, first = _graph_session(triples, [labels[0]], policy, first_secret)
            *_, again = _graph_session(triples, [labels[0]], policy, first_secret)
            *_, second = _graph_session(triples, [labels[0]], policy, second_secret)
            self.assertEqual(tokens(first), tokens(again))
            self.assertFalse(tokens(first) & tokens(second))

    def test_star_leaves_collapse_into_one_supernode_per_relation(self) -> None:
        rng = random.Random(21)
        for _ in range(30):
            labels = _random_labels(rng, rng.randint(3, 13))
            hub, leaves = labels[0], labels[1:]
            roles = [rng.randrange(3) for _ in leaves]
            triples = [(hub, f"role{r}", leaf) for r, leaf in zip(roles, leaves)]
            _, ids, _, session = _graph_session(triples, [hub], PrivacyPolicy())
            by_role: dict[int, set[int]] = {}
            for r, leaf in zip(roles, leaves):
                by_role.setdefault(r, set()).add(ids[leaf])
            expected = sorted(sorted(m) for m in by_role.values() if len(m) >= 2)
            got = sorted(sorted(m) for m in session.view.supernodes.values())
            self.assertEqual(got, expected)
            singles = sum(1 for m in by_role.values() if len(m) == 1)
            self.assertEqual(len(session.view.entities), 1 + len(expected) + singles)
            self.assertEqual(session.view.raw_entity_count, len(labels))

    def test_node_budget_never_cuts_the_bridge_between_anchors(self) -> None:
        rng = random.Random(34)
        for _ in range(30):
            labels = _random_labels(rng, 14)
            left, bridge, right = labels[:3]
            triples = [(left, "west", bridge), (bridge, "east", right)]
            attached = [left, bridge, right]
            for n, label in enumerate(labels[3:]):
                triples.append((rng.choice(attached), f"attach{n}", label))
                attached.append(label)
            budget = rng.randint(3, len(labels))
            _, ids, _, session = _graph_session(triples, [left, right], PrivacyPolicy(node_budget=budget))
            view = session.view
            self.assertLessEqual(len(view.entities), budget)
            self.assertIsNotNone(view.token_for_raw(ids[bridge]))
            self.assertTrue(nx.has_path(view.to_graph(), view.anchors[0], view.anchors[1]))


class CoarsenLiteralTest(unittest.TestCase):
    def test_dates_follow_granularity(self) -> None:
        date = Literal("date", "1815-12-10")
        self.assertEqual(coarsen_literal(date, PrivacyPolicy()).raw, "1815")
        self.assertEqual(coarsen_literal(date, PrivacyPolicy(date_granularity="month")).raw, "1815-12")
        self.assertEqual(coarsen_literal(date, PrivacyPolicy(date_granularity="full")).raw, "1815-12-10")
        self.assertEqual(coarsen_literal(Literal("date", "1815"), PrivacyPolicy(date_granularity="full")).raw, "1815")

    def test_numbers_become_half_open_buckets(self) -> None:
        self.assertEqual(coarsen_literal(Literal("number", "17.5"), PrivacyPolicy()).raw, "[10,20)")
        self.assertEqual(coarsen_literal(Literal("number", "-3"), PrivacyPolicy()).raw, "[-10,0)")
        wide = PrivacyPolicy(number_bucket_width=100.0)
        self.assertEqual(coarsen_literal(Literal("number", "250"), wide).raw, "[200,300)")

    def test_strings_are_unchanged(self) -> None:
        lit = Literal("string", "blue")
        self.assertEqual(coarsen_literal(lit, PrivacyPolicy()), lit)


if __name__ == "__main__":
    unittest.main()
