from __future__ import annotations

import json
from pathlib import Path
import tempfile
import unittest

from privgemo.config import EngineConfig, load_config
from privgemo.errors import ConfigError


class EngineConfigDefaultsTest(unittest.TestCase):
    def test_reference_defaults(self) -> None:
        cfg = EngineConfig()
        self.assertEqual(cfg.search.d_max, 3)
        self.assertEqual(cfg.search.w1, 80)
        self.assertEqual(cfg.search.w_max, 3)
        self.assertEqual(cfg.search.alpha, 0.6)
        self.assertEqual(cfg.search.top_k, 5)
        self.assertEqual(cfg.search.similarity_floor, 0.35)
        self.assertEqual((cfg.memory.lambda_q, cfg.memory.lambda_i), (0.5, 0.5))
        self.assertEqual((cfg.memory.lambda_sim, cfg.memory.lambda_hit), (0.7, 0.3))
        self.assertEqual(cfg.memory.w_exp, 5)
        self.assertEqual(cfg.memory.buffer_capacity, 1000)
        self.assertEqual(cfg.memory.pool_cap, 10_000)
        self.assertEqual(cfg.controller.gate_threshold, 0.85)
        self.assertEqual(cfg.controller.max_brain_calls, 12)
        self.assertEqual(cfg.controller.phases, ("Topic", "Refine", "Predict"))
        self.assertEqual(cfg.privacy.anonymization_ratio, 1.0)
        self.assertEqual(cfg.privacy.relation_mode, "utility")
        self.assertEqual((cfg.embedder.dim, cfg.embedder.ngram), (256, 3))


class EngineConfigOverridesTest(unittest.TestCase):
    def test_dotted_overrides_are_coerced(self) -> None:
        cfg = EngineConfig().with_values(
            {
                "privacy.ratio": "0.5",
                "retrieval.w_max": "4",
                "controller.phases": "Topic,Predict",
                "memory.enabled": "false",
            }
        )
        self.assertEqual(cfg.privacy.anonymization_ratio, 0.5)
        self.assertEqual(cfg.search.w_max, 4)
        self.assertEqual(cfg.controller.phases, ("Topic", "Predict"))
        self.assertFalse(cfg.memory.enabled)

    def test_unknown_key_is_rejected(self) -> None:
        with self.assertRaises(ConfigError):
            EngineConfig().with_values({"search.nonexistent": 1})
        with self.assertRaises(ConfigError):
            EngineConfig().with_values({"bogus.d_max": 1})

    def test_out_of_range_value_is_rejected(self) -> None:
        with self.assertRaises(ConfigError):
            EngineConfig().with_values({"privacy.ratio": 1.5})
        with self.assertRaises(ConfigError):
            EngineConfig().with_values({"controller.phases": "Refine,Predict"})

    def test_config_file_then_overrides(self) -> None:
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / "engine.json"
            path.write_text(
                json.dumps({"privacy": {"ratio": 0.25}, "search": {"d_max": 2}}),
                encoding="utf-8",
            )
            cfg = load_config(path, {"search.d_max": "3"})
        self.assertEqual(cfg.privacy.anonymization_ratio, 0.25)
        self.assertEqual(cfg.search.d_max, 3)

    def test_missing_or_invalid_file_raises_config_error(self) -> None:
        with tempfile.TemporaryDirectory() as tmp:
            with self.assertRaises(ConfigError):
                load_config(Path(tmp) / "absent.json")
            bad = Path(tmp) / "bad.json"
            bad.write_text("{not json", encoding="utf-8")
            with self.assertRaises(ConfigError):
                load_config(bad)
            unknown = Path(tmp) / "unknown.json"
            unknown.write_text(json.dumps({"telemetry": {}}), encoding="utf-8")
            with self.assertRaises(ConfigError):
                load_config(unknown)

    def test_policy_fingerprint_compatibility(self) -> None:
        policy = EngineConfig().privacy
        self.assertEqual(policy.fingerprint(), "utility:1.00")
        self.assertTrue(policy.compatible_with("utility:0.85"))
        self.assertFalse(policy.compatible_with("utility:0.50"))
        self.assertFalse(policy.compatible_with("privacy:1.00"))


if __name__ == "__main__":
    unittest.main()
