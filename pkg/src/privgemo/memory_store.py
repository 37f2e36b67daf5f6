"""SQLite-backed experience store: payloads sealed with AES-GCM, vectors in an .npz sidecar."""

from __future__ import annotations

from datetime import datetime, timezone
import hashlib
import json
import logging
import os
from pathlib import Path
import sqlite3
import threading
from typing import Any, Iterable

from Crypto.Cipher import AES
from Crypto.Random import get_random_bytes
import numpy as np

from .errors import MemoryKeyError
from .memory import ExperienceRecord

logger = logging.getLogger(__name__)

KEY_BYTES = 32


def _utc_now() -> str:
    return datetime.now(tz=timezone.utc).isoformat()


def load_memory_key(path: str | Path) -> bytes:
    """Read a 256-bit key stored either as 64 hex characters or as 32 raw bytes."""
    key_path = Path(path)
    try:
        data = key_path.read_bytes()
    except OSError as e:
        raise MemoryKeyError(f"cannot read memory key {key_path}: {e}") from e
    if len(data) == KEY_BYTES:
        return data
    text = data.decode("ascii", errors="ignore").strip()
    if len(text) == 2 * KEY_BYTES:
        try:
            return bytes.fromhex(text)
        except ValueError:
            pass
    raise MemoryKeyError(f"memory key {key_path} must hold 64 hex characters or 32 raw bytes")


def generate_memory_key(path: str | Path) -> Path:
    key_path = Path(path)
    if key_path.exists():
        raise MemoryKeyError(f"refusing to overwrite existing key {key_path}")
    key_path.parent.mkdir(parents=True, exist_ok=True)
    key_path.write_text(get_random_bytes(KEY_BYTES).hex() + "\n", encoding="ascii")
    os.chmod(key_path, 0o600)
    return key_path


def seal(key: bytes, record_id: str, plaintext: bytes) -> tuple[bytes, bytes, bytes]:
    cipher = AES.new(key, AES.MODE_GCM)
    cipher.update(record_id.encode("utf-8"))
    ciphertext, tag = cipher.encrypt_and_digest(plaintext)
    return cipher.nonce, tag, ciphertext


def unseal(key: bytes, record_id: str, nonce: bytes, tag: bytes, ciphertext: bytes) -> bytes:
    cipher = AES.new(key, AES.MODE_GCM, nonce=nonce)
    cipher.update(record_id.encode("utf-8"))
    try:
        return cipher.decrypt_and_verify(ciphertext, tag)
    except ValueError as e:
        raise MemoryKeyError(f"record {record_id} failed authentication; wrong key or tampered store") from e


class MemoryStore:
    """Append-only record table plus mutable hit statistics and tombstones."""

    def __init__(self, db_path: Path, key: bytes) -> None:
        if len(key) != KEY_BYTES:
            raise MemoryKeyError(f"memory key must be {KEY_BYTES} bytes")
        self.db_path = Path(db_path)
        self.vectors_path = self.db_path.with_suffix(".npz")
        self._key = key
        self._lock = threading.Lock()
        self._vectors: dict[str, tuple[np.ndarray, np.ndarray]] | None = None
        self.db_path.parent.mkdir(parents=True, exist_ok=True)
        self._init_db()

    def _connect(self) -> sqlite3.Connection:
        conn = sqlite3.connect(self.db_path, check_same_thread=False)
        conn.row_factory = sqlite3.Row
        return conn

    def _init_db(self) -> None:
        with self._connect() as conn:
            conn.executescript(
                """
                PRAGMA journal_mode=WAL;

                CREATE TABLE IF NOT EXISTS experience_records (
                    record_id TEXT PRIMARY KEY,
                    seq INTEGER NOT NULL,
                    created_at TEXT NOT NULL,
                    policy_tag TEXT NOT NULL,
                    nonce BLOB NOT NULL,
                    tag BLOB NOT NULL,
                    ciphertext BLOB NOT NULL,
                    checksum TEXT NOT NULL
                );

                CREATE INDEX IF NOT EXISTS idx_records_seq ON experience_records(seq);

                CREATE TABLE IF NOT EXISTS record_stats (
                    record_id TEXT PRIMARY KEY,
                    hit_count INTEGER NOT NULL,
                    last_access INTEGER NOT NULL,
                    updated_at TEXT NOT NULL
                );

                CREATE TABLE IF NOT EXISTS tombstones (
                    record_id TEXT PRIMARY KEY,
                    removed_at TEXT NOT NULL
                );
                """
            )

    def _load_vectors(self) -> dict[str, tuple[np.ndarray, np.ndarray]]:
        if self._vectors is None:
            self._vectors = {}
            if self.vectors_path.exists():
                with np.load(self.vectors_path, allow_pickle=False) as data:
                    for rid, q, i in zip(data["ids"], data["q"], data["i"]):
                        self._vectors[str(rid)] = (np.array(q), np.array(i))
        return self._vectors

    def _flush_vectors(self) -> None:
        vectors = self._load_vectors()
        ids = sorted(vectors)
        tmp = self.vectors_path.with_name(self.vectors_path.stem + ".tmp.npz")
        if ids:
            np.savez(
                tmp,
                ids=np.array(ids),
                q=np.vstack([vectors[rid][0] for rid in ids]),
                i=np.vstack([vectors[rid][1] for rid in ids]),
            )
        else:
            np.savez(tmp, ids=np.array([], dtype=str), q=np.zeros((0, 0)), i=np.zeros((0, 0)))
        os.replace(tmp, self.vectors_path)

    def append(self, record: ExperienceRecord) -> None:
        plaintext = json.dumps(record.payload(), ensure_ascii=False, sort_keys=True).encode("utf-8")
        nonce, tag, ciphertext = seal(self._key, record.record_id, plaintext)
        with self._lock, self._connect() as conn:
            row = conn.execute("SELECT COALESCE(MAX(seq), 0) + 1 AS next_seq FROM experience_records").fetchone()
            conn.execute(
                """
                INSERT INTO experience_records (record_id, seq, created_at, policy_tag, nonce, tag, ciphertext, checksum)
                VALUES (?, ?, ?, ?, ?, ?, ?, ?)
                """,
                (
                    record.record_id,
                    int(row["next_seq"]),
                    record.created_at,
                    record.policy_tag,
                    nonce,
                    tag,
                    ciphertext,
                    hashlib.sha256(ciphertext).hexdigest(),
                ),
            )
            conn.execute(
                "INSERT OR REPLACE INTO record_stats (record_id, hit_count, last_access, updated_at) VALUES (?, ?, ?, ?)",
                (record.record_id, record.hit_count, record.last_access, _utc_now()),
            )
            self._load_vectors()[record.record_id] = (record.q_embedding, record.i_embedding)
            self._flush_vectors()
        record.payload_sealed = True

    def update_stats(self, record: ExperienceRecord) -> None:
        with self._lock, self._connect() as conn:
            conn.execute(
                "INSERT OR REPLACE INTO record_stats (record_id, hit_count, last_access, updated_at) VALUES (?, ?, ?, ?)",
                (record.record_id, record.hit_count, record.last_access, _utc_now()),
            )

    def delete(self, record_ids: Iterable[str]) -> int:
        ids = list(record_ids)
        if not ids:
            return 0
        now = _utc_now()
        with self._lock, self._connect() as conn:
            conn.executemany(
                "INSERT OR REPLACE INTO tombstones (record_id, removed_at) VALUES (?, ?)",
                [(rid, now) for rid in ids],
            )
            conn.executemany("DELETE FROM record_stats WHERE record_id = ?", [(rid,) for rid in ids])
            vectors = self._load_vectors()
            for rid in ids:
                vectors.pop(rid, None)
            self._flush_vectors()
        return len(ids)

    def _live_rows(self, conn: sqlite3.Connection) -> list[sqlite3.Row]:
        return conn.execute(
            """
            SELECT r.*, COALESCE(s.hit_count, 0) AS hit_count, COALESCE(s.last_access, 0) AS last_access
            FROM experience_records r
            LEFT JOIN record_stats s ON s.record_id = r.record_id
            WHERE r.record_id NOT IN (SELECT record_id FROM tombstones)
            ORDER BY r.seq ASC
            """
        ).fetchall()

    def count(self) -> int:
        with self._connect() as conn:
            return len(self._live_rows(conn))

    def load_all(self) -> list[ExperienceRecord]:
        with self._lock, self._connect() as conn:
            rows = self._live_rows(conn)
            vectors = self._load_vectors()
        records: list[ExperienceRecord] = []
        for row in rows:
            rid = row["record_id"]
            if rid not in vectors:
                logger.warning("record %s has no stored vectors; skipping", rid)
                continue
            if hashlib.sha256(row["ciphertext"]).hexdigest() != row["checksum"]:
                raise MemoryKeyError(f"record {rid} checksum mismatch")
            payload = json.loads(unseal(self._key, rid, row["nonce"], row["tag"], row["ciphertext"]))
            q, i = vectors[rid]
            records.append(
                ExperienceRecord.from_payload(
                    payload,
                    record_id=rid,
                    q_embedding=q,
                    i_embedding=i,
                    policy_tag=row["policy_tag"],
                    hit_count=int(row["hit_count"]),
                    last_access=int(row["last_access"]),
                    created_at=row["created_at"],
                    payload_sealed=True,
                )
            )
        return records

    def summaries(self) -> list[dict[str, Any]]:
        """Metadata only; nothing here needs the key."""
        with self._connect() as conn:
            return [
                {
                    "record_id": row["record_id"],
                    "seq": row["seq"],
                    "created_at": row["created_at"],
                    "policy_tag": row["policy_tag"],
                    "hit_count": row["hit_count"],
                    "last_access": row["last_access"],
                    "bytes": len(row["ciphertext"]),
                }
                for row in self._live_rows(conn)
            ]

    def clear(self) -> int:
        with self._connect() as conn:
            ids = [row["record_id"] for row in self._live_rows(conn)]
        return self.delete(ids)

    def export_jsonl(self, path: str | Path) -> int:
        records = self.load_all()
        out = Path(path)
        out.parent.mkdir(parents=True, exist_ok=True)
        with out.open("w", encoding="utf-8") as handle:
            for record in records:
                row = {
                    "record_id": record.record_id,
                    "policy_tag": record.policy_tag,
                    "created_at": record.created_at,
                    "hit_count": record.hit_count,
                    "last_access": record.last_access,
                    "q_embedding": [float(x) for x in record.q_embedding],
                    "i_embedding": [float(x) for x in record.i_embedding],
                    "payload": record.payload(),
                }
                handle.write(json.dumps(row, ensure_ascii=False) + "\n")
        return len(records)

    def import_jsonl(self, path: str | Path) -> int:
        with self._connect() as conn:
            known = {row["record_id"] for row in conn.execute("SELECT record_id FROM experience_records")}
        imported = 0
        with Path(path).open("r", encoding="utf-8") as handle:
            for line_no, line in enumerate(handle, start=1):
                if not line.strip():
                    continue
                try:
                    row = json.loads(line)
                    record = ExperienceRecord.from_payload(
                        row["payload"],
                        record_id=str(row["record_id"]),
                        q_embedding=np.asarray(row["q_embedding"], dtype=np.float64),
                        i_embedding=np.asarray(row["i_embedding"], dtype=np.float64),
                        policy_tag=str(row["policy_tag"]),
                        hit_count=int(row.get("hit_count", 0)),
                        last_access=int(row.get("last_access", 0)),
                        created_at=row.get("created_at"),
                    )
                except (KeyError, TypeError, ValueError) as e:
                    raise ValueError(f"line {line_no}: invalid experience row: {e}") from e
                if record.record_id in known:
                    continue
                self.append(record)
                known.add(record.record_id)
                imported += 1
        return imported
