"""
MorphXAI training log.
Appends structured JSON lines (one record per step / validation / abort).
"""

import json
from pathlib import Path
from typing import Iterator, List, Optional, Union


class RunLogger:
    def __init__(self, log_path: Union[str, Path], max_log_lines: int = 0, enabled: bool = True):
        self.log_path = Path(log_path).expanduser()
        self.max_log_lines = max_log_lines
        self.enabled = enabled
        self.log_path.parent.mkdir(parents=True, exist_ok=True)

    def log(self, record: dict) -> None:
        if not self.enabled:
            return
        with self.log_path.open("a") as fh:
            fh.write(json.dumps(record, sort_keys=True) + "\n")
        if self.max_log_lines > 0:
            self._trim()

    def reset(self) -> None:
        """Start a fresh log (new, non-resumed run)."""
        self.log_path.unlink(missing_ok=True)

    def _trim(self) -> None:
        """Drop the oldest lines beyond max_log_lines."""
        try:
            lines = self.log_path.read_text().splitlines(keepends=True)
            if len(lines) > self.max_log_lines:
                self.log_path.write_text("".join(lines[-self.max_log_lines:]))
        except OSError:
            pass  # best effort

    def _records(self, lines: List[str]) -> Iterator[dict]:
        for raw in lines:
            if not raw.strip():
                continue
            try:
                yield json.loads(raw)
            except json.JSONDecodeError:
                continue

    def read(self, event: Optional[str] = None) -> List[dict]:
        """All parseable records, optionally filtered by event type."""
        return [r for r in self.tail(0) if event is None or r.get("event") == event]

    def tail(self, n: int = 20) -> List[dict]:
        """Last n parseable records (n <= 0: all)."""
        if not self.log_path.exists():
            return []
        lines = self.log_path.read_text().splitlines()
        return list(self._records(lines[-n:] if n > 0 else lines))
