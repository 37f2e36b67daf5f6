from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
import random
import unittest

import numpy as np

from privgemo.config import MemoryConfig, PrivacyPolicy
from privgemo.embedder import HashingEmbedder
from privgemo.errors import LeakageGuardError
from privgemo.memory import (
    ExperienceArtifacts,
    ExperienceMemory,
    ExperienceOutcome,
    ExperiencePool,
    ExperienceRecord,
    HighFreqBuffer,
    RetrievedExperience,
    buffer_score,
    default_transition,
    get_exp,
    init_policy,
    load_exemplars,
    next_step,
)
from privgemo.types import NodeState, Phase, TrajectoryStep

EMB = HashingEmbedder()
KEY = "TOPIC_1 -- ? -- ?answer"


def _record(
    record_id: str,
    question: str,
    *,
    sufficient: bool = True,
    trajectory: tuple[str, ...] = ("Topic@d=2",),
    hits: int = 0,
    tag: str = "utility:1.00",
    failures: tuple[str, ...] = (),
    q_vec: np.ndarray | None = None,
    i_vec: np.ndarray | None = None,
) -> ExperienceRecord:
    return ExperienceRecord(
        record_id=record_id,
        key_indicator=KEY,
        anon_indicator="TOPIC_1 -- rel -- ?x",
        split_questions=(),
        d_predict=2,
        trajectory=tuple(TrajectoryStep.parse(s) for s in trajectory),
        path_templates=(f"TOPIC_1 -- {record_id} -- ANS",),
        outcome=ExperienceOutcome(sufficient=sufficient, failure_notes=failures),
        q_embedding=np.array(EMB.embed(question)) if q_vec is None else q_vec,
        i_embedding=np.array(EMB.embed(KEY)) if i_vec is None else i_vec,
        policy_tag=tag,
        hit_count=hits,
    )


def _unit(rng: np.random.Generator) -> np.ndarray:
    vec = rng.standard_normal(EMB.dim)
    return vec / np.linalg.norm(vec)


def _tilted(base: np.ndarray, cos: float, rng: np.random.Generator) -> np.ndarray:
    """Unit vector at cosine `cos` to the unit vector `base`."""
    other = rng.standard_normal(base.shape[0])
    other -= other.dot(base) * base
    other /= np.linalg.norm(other)
    return cos * base + np.sqrt(1.0 - cos * cos) * other


def _artifacts(template: str = "TOPIC_1 -- sports.mascot.team -- ANS", *, sufficient: bool = True) -> ExperienceArtifacts:
    return ExperienceArtifacts(
        key_indicator=KEY,
        anon_indicator="TOPIC_1 -- mascot_team -- ?team",
        split_questions=("Which team has TOPIC_1 as its mascot?",),
        d_predict=1,
        trajectory=(TrajectoryStep(Phase.TOPIC, 1),),
        path_templates=(template,),
        outcome=ExperienceOutcome(sufficient=sufficient),
    )


class RetrievalTest(unittest.TestCase):
    def setUp(self) -> None:
        self.config = MemoryConfig(seed_exemplars=False)
        self.pool = ExperiencePool(EMB.dim)
        self.buffer = HighFreqBuffer(10)
        self.questions = {
            "a": "Which team has TOPIC_1 as its mascot?",
            "b": "Who is the spouse of TOPIC_1?",
            "c": "Which river flows through TOPIC_1?",
        }
        for rid, text in self.questions.items():
            self.pool.add(_record(rid, text))

    def test_scores_match_direct_hybrid_similarity(self) -> None:
        query = "Which team uses TOPIC_1 as a mascot?"
        records, _ = get_exp(self.pool, self.buffer, query, KEY, PrivacyPolicy(), 3, EMB, self.config)
        self.assertEqual(len(records), 3)
        for item in records:
            expected = 0.5 * EMB.similarity(query, self.questions[item.record.record_id]) + 0.5
            self.assertAlmostEqual(item.score, expected, places=9)
        self.assertEqual(records[0].record.record_id, "a")
        self.assertEqual([r.buffer_score for r in records], sorted((r.buffer_score for r in records), reverse=True))

    def test_hits_are_bumped_and_buffered(self) -> None:
        records, _ = get_exp(self.pool, self.buffer, self.questions["b"], KEY, PrivacyPolicy(), 1, EMB, self.config)
        self.assertEqual([r.record.record_id for r in records], ["b"])
        self.assertEqual(self.pool.get("b").hit_count, 1)
        self.assertEqual(self.pool.get("a").hit_count, 0)
        self.assertIn("b", self.buffer)

    def test_hit_bonus_breaks_similarity_ties(self) -> None:
        pool = ExperiencePool(EMB.dim)
        pool.add(_record("cold", "Which team has TOPIC_1 as its mascot?"))
        pool.add(_record("hot", "Which team has TOPIC_1 as its mascot?", hits=4))
        records, _ = get_exp(pool, HighFreqBuffer(), "Which team has TOPIC_1 as its mascot?", KEY, PrivacyPolicy(), 2, EMB, self.config)
        self.assertEqual([r.record.record_id for r in records], ["hot", "cold"])
        self.assertAlmostEqual(records[0].score, records[1].score, places=9)

    def test_incompatible_policies_are_never_returned(self) -> None:
        pool = ExperiencePool(EMB.dim)
        pool.add(_record("plain", self.questions["a"], tag="utility:0.00"))
        pool.add(_record("strict", self.questions["a"], tag="privacy:1.00"))
        records, hints = get_exp(pool, HighFreqBuffer(), self.questions["a"], KEY, PrivacyPolicy(), 5, EMB, self.config)
        self.assertEqual(records, [])
        self.assertFalse(hints.skip_brain)

    def test_hints_from_a_confident_success(self) -> None:
        pool = ExperiencePool(EMB.dim)
        pool.add(_record("good", self.questions["a"], trajectory=("Refine@d=2", "Predict@d=3")))
        _, hints = get_exp(pool, HighFreqBuffer(), self.questions["a"], KEY, PrivacyPolicy(), 5, EMB, self.config)
        self.assertTrue(hints.skip_brain)
        self.assertEqual((hints.init_mode, hints.init_depth), (Phase.REFINE, 2))

    def test_empty_pool(self) -> None:
        records, hints = get_exp(ExperiencePool(EMB.dim), HighFreqBuffer(), "q", KEY, PrivacyPolicy(), 5, EMB, self.config)
        self.assertEqual(records, [])
        self.assertFalse(hints.skip_brain)

    def _hot_pool(self) -> ExperiencePool:
        query = self.questions["a"]
        pool = ExperiencePool(EMB.dim)
        pool.add(_record("near1", query))
        pool.add(_record("near2", query))
        pool.add(_record("hot", query, hits=99, q_vec=_tilted(EMB.embed(query), 0.8, np.random.default_rng(7))))
        return pool

    def test_buffered_record_outside_the_nearest_set_is_returned(self) -> None:
        query = self.questions["a"]
        cold, _ = get_exp(self._hot_pool(), HighFreqBuffer(), query, KEY, PrivacyPolicy(), 2, EMB, self.config)
        self.assertEqual([r.record.record_id for r in cold], ["near1", "near2"])

        buffer = HighFreqBuffer()
        buffer.touch("hot", 0.9, 1)
        warm, _ = get_exp(self._hot_pool(), buffer, query, KEY, PrivacyPolicy(), 2, EMB, self.config)
        self.assertEqual([r.record.record_id for r in warm], ["hot", "near1"])
        self.assertAlmostEqual(warm[0].score, 0.9, places=6)
        self.assertAlmostEqual(warm[0].buffer_score, 0.7 * 0.9 + 0.3 * 0.99, places=6)

    def test_snapshot_scores_line_up_with_records(self) -> None:
        records, scores = self.pool.score_snapshot(EMB.embed(self.questions["c"]), EMB.embed(KEY), 0.5, 0.5)
        self.assertEqual(len(records), len(scores))
        self.assertEqual(records[int(np.argmax(scores))].record_id, "c")


class RetrievalOracleTest(unittest.TestCase):
    """get_exp against an exhaustive scan over every stored record."""

    @staticmethod
    def _exhaustive(
        pool: ExperiencePool,
        buffer: HighFreqBuffer,
        q_vec: np.ndarray,
        i_vec: np.ndarray,
        policy: PrivacyPolicy,
        w_exp: int,
        config: MemoryConfig,
    ) -> list[tuple[str, float]]:
        rows = []
        for idx, record in enumerate(pool.records_snapshot()):
            if not policy.compatible_with(record.policy_tag, config.ratio_tolerance):
                continue
            hybrid = config.lambda_q * float(np.dot(record.q_embedding, q_vec)) + config.lambda_i * float(
                np.dot(record.i_embedding, i_vec)
            )
            rank = config.lambda_sim * hybrid + config.lambda_hit * record.hit_count / (record.hit_count + 1.0)
            rows.append((idx, record.record_id, hybrid, rank))
        k = min(w_exp, len(rows))
        candidates = {row[0]: row for row in sorted(rows, key=lambda row: (-row[2], row[0]))[:k]}
        hot = set(buffer.ids())
        candidates.update({row[0]: row for row in rows if row[1] in hot})
        chosen = sorted(candidates.values(), key=lambda row: (-row[3], row[0]))[:k]
        return [(row[1], row[3]) for row in chosen]

    def test_random_pools_match_the_exhaustive_scan(self) -> None:
        rng = np.random.default_rng(20240601)
        config = MemoryConfig(seed_exemplars=False)
        policy = PrivacyPolicy()
        query = "Which team has TOPIC_1 as its mascot?"
        q_vec, i_vec = EMB.embed(query), EMB.embed(KEY)
        tags = ["utility:1.00", "utility:0.90", "utility:0.50", "privacy:1.00"]
        for trial in range(40):
            size = int(rng.integers(1, 501))
            pool = ExperiencePool(EMB.dim)
            for idx in range(size):
                pool.add(
                    _record(
                        f"r{idx}",
                        query,
                        hits=int(rng.integers(0, 20)),
                        tag=tags[int(rng.integers(0, len(tags)))],
                        q_vec=_unit(rng),
                        i_vec=_unit(rng),
                    )
                )
            buffer = HighFreqBuffer()
            for idx in rng.choice(size, size=min(size, 5), replace=False):
                buffer.touch(f"r{int(idx)}", 0.5, 1)
            w_exp = int(rng.integers(1, 11))
            expected = self._exhaustive(pool, buffer, q_vec, i_vec, policy, w_exp, config)
            got, _ = get_exp(pool, buffer, query, KEY, policy, w_exp, EMB, config)
            self.assertEqual([r.record.record_id for r in got], [rid for rid, _ in expected], trial)
            for item, (_, rank) in zip(got, expected):
                self.assertAlmostEqual(item.buffer_score, rank, places=9)

    def test_hits_only_ever_promote(self) -> None:
        rng = random.Random(11)
        config = MemoryConfig()
        for _ in range(1000):
            score = rng.uniform(-1.0, 1.0)
            hits = rng.randrange(0, 10_000)
            more = hits + rng.randrange(1, 5)
            self.assertGreaterEqual(buffer_score(score, more, config), buffer_score(score, hits, config))
            self.assertLessEqual(buffer_score(score, more, config), config.lambda_sim * score + config.lambda_hit)

        pool = ExperiencePool(EMB.dim)
        pool.add(_record("only", "Which team has TOPIC_1 as its mascot?"))
        record = pool.get("only")
        previous = -np.inf
        for tick in range(1, 200):
            pool.record_hits([record] * rng.randrange(0, 5), tick)
            out, _ = get_exp(pool, HighFreqBuffer(), "Which team has TOPIC_1 as its mascot?", KEY, PrivacyPolicy(), 1, EMB, config)
            self.assertGreaterEqual(out[0].buffer_score, previous)
            previous = out[0].buffer_score


class ConcurrencyTest(unittest.TestCase):
    def test_retrieval_and_write_back_interleave(self) -> None:
        memory = ExperienceMemory(MemoryConfig(), EMB)

        def write(n: int) -> object:
            return memory.write_back(f"question number {n}", _artifacts(f"TOPIC_1 -- rel{n} -- ANS"), PrivacyPolicy(), [])

        def read(n: int) -> object:
            return memory.retrieve(f"question number {n}", KEY, PrivacyPolicy())

        with ThreadPoolExecutor(max_workers=4) as executor:
            futures = [executor.submit(write if n % 2 else read, n) for n in range(200)]
            for future in futures:
                future.result()
        self.assertEqual(len(memory), 5 + 100)


class PolicyTest(unittest.TestCase):
    def _hit(self, record: ExperienceRecord, score: float = 0.95) -> RetrievedExperience:
        return RetrievedExperience(record=record, score=score, buffer_score=score)

    def test_init_policy_follows_a_useful_success(self) -> None:
        good = self._hit(_record("g", "q", trajectory=("Predict@d=3",)))
        self.assertEqual(init_policy([good], 2, 3), (Phase.PREDICT, 3))
        self.assertEqual(init_policy([good], 2, 2), (Phase.PREDICT, 2))
        self.assertEqual(init_policy([self._hit(good.record, 0.5)], 2, 3), (Phase.TOPIC, 2))
        self.assertEqual(init_policy([good], 2, 3, phases=(Phase.TOPIC, Phase.REFINE)), (Phase.TOPIC, 2))
        self.assertEqual(init_policy([], 5, 3), (Phase.TOPIC, 3))

    def test_default_transition(self) -> None:
        self.assertEqual(default_transition(Phase.TOPIC, 1, 3, 3), (Phase.TOPIC, 2))
        self.assertEqual(default_transition(Phase.TOPIC, 2, 2, 3), (Phase.REFINE, 3))
        self.assertEqual(default_transition(Phase.REFINE, 3, 2, 3), (Phase.PREDICT, 3))
        self.assertEqual(default_transition(Phase.PREDICT, 3, 2, 3), (Phase.TOPIC, 3))
        self.assertEqual(default_transition(Phase.TOPIC, 3, 3, 3, (Phase.TOPIC, Phase.PREDICT)), (Phase.PREDICT, 3))

    def test_next_step_replays_and_warns(self) -> None:
        node = NodeState(node_id=0, question="q", depth=1, mode=Phase.TOPIC)
        replay = self._hit(_record("r", "q", trajectory=("Topic@d=1", "Refine@d=2")))
        suggestion = next_step([replay], node, d_predict=1, d_max=3)
        self.assertEqual((suggestion.mode, suggestion.depth, suggestion.prune), (Phase.REFINE, 2, False))
        warning = self._hit(_record("w", "q", sufficient=False, failures=("Topic@d=1",)))
        flagged = next_step([warning, replay], node, d_predict=1, d_max=3)
        self.assertTrue(flagged.prune)
        fallback = next_step([], node, d_predict=1, d_max=3)
        self.assertEqual((fallback.mode, fallback.depth), (Phase.REFINE, 2))

    def test_failed_steps_of_a_stored_success_switch_mode(self) -> None:
        memory = ExperienceMemory(MemoryConfig(seed_exemplars=False), EMB)
        question = "Which team has TOPIC_1 as its mascot?"
        artifacts = ExperienceArtifacts(
            key_indicator=KEY,
            anon_indicator="TOPIC_1 -- mascot_team -- ?team",
            split_questions=(),
            d_predict=2,
            trajectory=(TrajectoryStep(Phase.TOPIC, 2),),
            path_templates=("TOPIC_1 -- sports.mascot.team -- ANS",),
            outcome=ExperienceOutcome(sufficient=True, failure_notes=("Topic@d=1",)),
        )
        self.assertIsNotNone(memory.write_back(question, artifacts, PrivacyPolicy(), []))
        records, hints = memory.retrieve(question, KEY, PrivacyPolicy())
        self.assertIn("Topic@d=1", hints.warnings)

        node = NodeState(node_id=0, question=question, depth=1, mode=Phase.TOPIC)
        suggestion = next_step(records, node, d_predict=2, d_max=3)
        self.assertEqual((suggestion.mode, suggestion.depth, suggestion.prune), (Phase.REFINE, 2, False))
        self.assertTrue(suggestion.reason.startswith("dead end"))
        self.assertEqual(next_step([], node, d_predict=2, d_max=3).mode, Phase.TOPIC)


class WriteBackTest(unittest.TestCase):
    def setUp(self) -> None:
        self.memory = ExperienceMemory(MemoryConfig(seed_exemplars=False), EMB)

    def test_only_sufficient_runs_are_stored(self) -> None:
        self.assertIsNone(self.memory.write_back("q", _artifacts(sufficient=False), PrivacyPolicy(), []))
        self.assertEqual(len(self.memory), 0)
        record = self.memory.write_back("Which team has TOPIC_1 as its mascot?", _artifacts(), PrivacyPolicy(), [])
        self.assertIsNotNone(record)
        self.assertEqual(len(self.memory), 1)
        self.assertEqual(record.policy_tag, "utility:1.00")

    def test_raw_labels_are_refused(self) -> None:
        leaky = _artifacts("Lou Seal -- sports.mascot.team -- ANS")
        with self.assertRaises(LeakageGuardError):
            self.memory.write_back("q", leaky, PrivacyPolicy(), ["Lou Seal", "San Francisco Giants"])
        self.assertEqual(len(self.memory), 0)

    def test_duplicates_merge(self) -> None:
        first = self.memory.write_back("Which team has TOPIC_1 as its mascot?", _artifacts(), PrivacyPolicy(), [])
        again = self.memory.write_back("Whose mascot is TOPIC_1?", _artifacts("TOPIC_1  --  sports.mascot.team -- ANS"), PrivacyPolicy(), [])
        self.assertEqual(first.record_id, again.record_id)
        self.assertEqual(len(self.memory), 1)
        self.assertEqual(again.hit_count, 1)
        other_policy = self.memory.write_back("q", _artifacts(), PrivacyPolicy(relation_mode="privacy"), [])
        self.assertNotEqual(other_policy.record_id, first.record_id)

    def test_pool_cap_drops_least_used(self) -> None:
        memory = ExperienceMemory(MemoryConfig(seed_exemplars=False, pool_cap=2), EMB)
        kept = memory.write_back("q one", _artifacts("TOPIC_1 -- r1 -- ANS"), PrivacyPolicy(), [])
        kept.hit_count = 3
        memory.write_back("q two", _artifacts("TOPIC_1 -- r2 -- ANS"), PrivacyPolicy(), [])
        memory.write_back("q three", _artifacts("TOPIC_1 -- r3 -- ANS"), PrivacyPolicy(), [])
        self.assertEqual(len(memory), 2)
        self.assertIsNotNone(memory.pool.get(kept.record_id))


class ExemplarTest(unittest.TestCase):
    def test_bundled_exemplars(self) -> None:
        records = load_exemplars(EMB)
        self.assertEqual(len(records), 5)
        self.assertEqual(sum(1 for r in records if r.outcome.sufficient), 4)
        self.assertTrue(all(r.policy_tag == "utility:1.00" for r in records))

    def test_cold_start_seeding(self) -> None:
        self.assertEqual(len(ExperienceMemory(MemoryConfig(), EMB)), 5)
        self.assertEqual(len(ExperienceMemory(MemoryConfig(seed_exemplars=False), EMB)), 0)


class HighFreqBufferTest(unittest.TestCase):
    def test_lowest_score_is_evicted(self) -> None:
        buffer = HighFreqBuffer(2)
        buffer.touch("a", 0.9, 1)
        buffer.touch("b", 0.2, 2)
        buffer.touch("c", 0.5, 3)
        self.assertEqual(sorted(buffer.ids()), ["a", "c"])
        with self.assertRaises(ValueError):
            HighFreqBuffer(0)


if __name__ == "__main__":
    unittest.main()
