from __future__ import annotations

from contextlib import redirect_stdout
import io
import json
import os
from pathlib import Path
import tempfile
import unittest

from privgemo.cli import EXIT_KEY, EXIT_OK, EXIT_USAGE, main
from privgemo.memory_store import MemoryStore, load_memory_key
from privgemo.scripted import FIXTURES_DIR

ENV_KEYS = ("PRIVGEMO_MEMORY_KEY", "PRIVGEMO_CONFIG", "PRIVGEMO_DATA_DIR", "PRIVGEMO_MEMORY_STORE")
MASCOT = "Lou Seal is the mascot for the team that last won the World Series when?"


class CliTest(unittest.TestCase):
    def setUp(self) -> None:
        self._tmp = tempfile.TemporaryDirectory()
        self.root = Path(self._tmp.name)
        self._prior_env = {name: os.environ.get(name) for name in ENV_KEYS}
        for name in ENV_KEYS:
            os.environ.pop(name, None)
        os.environ["PRIVGEMO_DATA_DIR"] = str(self.root / "data")

    def tearDown(self) -> None:
        for name, value in self._prior_env.items():
            if value is None:
                os.environ.pop(name, None)
            else:
                os.environ[name] = value
        self._tmp.cleanup()

    def _run(self, *argv: str) -> tuple[int, str]:
        buffer = io.StringIO()
        with redirect_stdout(buffer):
            code = main(list(argv))
        return code, buffer.getvalue()

    def test_ingest_reports_statistics(self) -> None:
        code, output = self._run("ingest", str(FIXTURES_DIR / "mascot.kg"), "--json")
        self.assertEqual(code, EXIT_OK)
        self.assertIn('"triples": 4', output)

    def test_usage_errors(self) -> None:
        self.assertEqual(self._run("ask", str(self.root / "missing.kg"), "who?", "--mock", "mascot")[0], EXIT_USAGE)
        self.assertEqual(self._run("--privacy.ratio", "2", "ingest", str(FIXTURES_DIR / "mascot.kg"))[0], EXIT_USAGE)
        self.assertEqual(self._run("--nosuch.key=1", "ingest", str(FIXTURES_DIR / "mascot.kg"))[0], EXIT_USAGE)
        self.assertEqual(self._run("ingest")[0], EXIT_USAGE)

    def test_memory_commands_need_a_key(self) -> None:
        self.assertEqual(self._run("memory", "inspect")[0], EXIT_KEY)
        wrong = self.root / "wrong.key"
        wrong.write_text("not a key\n", encoding="ascii")
        self.assertEqual(self._run("memory", "inspect", "--key", str(wrong))[0], EXIT_KEY)

    def test_ask_with_scripted_models(self) -> None:
        transcript = self.root / "runs" / "mascot.jsonl"
        code, output = self._run(
            "ask", str(FIXTURES_DIR / "mascot.kg"), MASCOT, "--mock", "mascot", "--json", "--transcript", str(transcript)
        )
        self.assertEqual(code, EXIT_OK)
        self.assertIn("2014 World Series", output)
        events = [json.loads(line) for line in transcript.read_text(encoding="utf-8").splitlines()]
        self.assertIn("brain_call", {event["kind"] for event in events})

    def test_ask_persists_experience_with_a_key(self) -> None:
        key = self.root / "keys" / "memory.key"
        store = self.root / "memory.sqlite"
        self.assertEqual(self._run("memory", "keygen", "--key", str(key))[0], EXIT_OK)
        self.assertEqual(len(load_memory_key(key)), 32)
        self.assertEqual(self._run("memory", "keygen", "--key", str(key))[0], EXIT_KEY)

        args = ("--store", str(store), "--key", str(key))
        code, _ = self._run("ask", str(FIXTURES_DIR / "mascot.kg"), MASCOT, "--mock", "mascot", *args)
        self.assertEqual(code, EXIT_OK)
        self.assertEqual(MemoryStore(store, load_memory_key(key)).count(), 6)

        code, output = self._run("memory", "inspect", *args)
        self.assertEqual(code, EXIT_OK)
        self.assertIn("records: 6", output)

        dump = self.root / "dump.jsonl"
        self.assertEqual(self._run("memory", "export", str(dump), *args)[0], EXIT_OK)
        self.assertEqual(len(dump.read_text(encoding="utf-8").splitlines()), 6)
        self.assertEqual(self._run("memory", "clear", *args)[0], EXIT_OK)
        self.assertEqual(MemoryStore(store, load_memory_key(key)).count(), 0)
        self.assertEqual(self._run("memory", "export", *args)[0], EXIT_USAGE)

    def test_eval_writes_report(self) -> None:
        report = self.root / "report.json"
        code, _ = self._run("eval", str(FIXTURES_DIR / "casebook.jsonl"), "--report", str(report))
        self.assertEqual(code, EXIT_OK)
        payload = json.loads(report.read_text(encoding="utf-8"))
        self.assertEqual(payload["questions"], 5)
        self.assertEqual(payload["hits_at_1"], 1.0)


if __name__ == "__main__":
    unittest.main()
