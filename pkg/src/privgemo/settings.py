"""Runtime settings read from the environment."""

from __future__ import annotations

from dataclasses import dataclass
import os
from pathlib import Path

BRAIN_KEY_ENV = "PRIVGEMO_BRAIN_KEY"
HAND_KEY_ENV = "PRIVGEMO_HAND_KEY"
MEMORY_KEY_ENV = "PRIVGEMO_MEMORY_KEY"


@dataclass(frozen=True)
class Settings:
    workspace_root: Path
    data_dir: Path
    memory_store: Path
    schema_dir: Path
    config_path: Path | None
    memory_key_path: Path | None
    log_level: str = "WARNING"

    @classmethod
    def load(cls) -> "Settings":
        workspace_root = Path(__file__).resolve().parents[2]
        data_dir = Path(os.environ.get("PRIVGEMO_DATA_DIR", str(Path.cwd() / "data"))).resolve()
        memory_store = Path(
            os.environ.get("PRIVGEMO_MEMORY_STORE", str(data_dir / "memory.sqlite"))
        ).resolve()
        schema_dir = Path(os.environ.get("PRIVGEMO_SCHEMA_DIR", str(workspace_root / "schemas"))).resolve()
        config_raw = os.environ.get("PRIVGEMO_CONFIG", "").strip()
        key_raw = os.environ.get(MEMORY_KEY_ENV, "").strip()
        log_level = os.environ.get("PRIVGEMO_LOG_LEVEL", "WARNING").strip().upper() or "WARNING"
        return cls(
            workspace_root=workspace_root,
            data_dir=data_dir,
            memory_store=memory_store,
            schema_dir=schema_dir,
            config_path=Path(config_raw).resolve() if config_raw else None,
            memory_key_path=Path(key_raw).expanduser().resolve() if key_raw else None,
            log_level=log_level,
        )

    def ensure_paths(self) -> None:
        self.data_dir.mkdir(parents=True, exist_ok=True)
        self.memory_store.parent.mkdir(parents=True, exist_ok=True)
