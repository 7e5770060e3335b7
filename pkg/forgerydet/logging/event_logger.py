from __future__ import annotations

import json
import logging
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Dict, List, Optional

import numpy as np

logger = logging.getLogger(__name__)


def _jsonable(value: Any) -> Any:
  if isinstance(value, np.generic):
    return value.item()
  if isinstance(value, np.ndarray):
    return value.tolist()
  if isinstance(value, Path):
    return str(value)
  return str(value)


class EventLogger:
  """Append-only JSONL run journal under ``<out>/logs``.

  The journal is the only run artifact that carries wall-clock timestamps.
  """

  def __init__(self, base_dir: Path, enabled: bool = True) -> None:
    self.base_dir = Path(base_dir)
    self.enabled = enabled
    if enabled:
      self.base_dir.mkdir(parents=True, exist_ok=True)
    self.log_file = self.base_dir / 'events.log'

  def log_event(self, category: str, message: str, payload: Optional[Dict[str, Any]] = None) -> None:
    logger.debug('[%s] %s', category, message)
    if not self.enabled:
      return
    entry = {
      'timestamp': datetime.now(timezone.utc).isoformat(),
      'category': category,
      'message': message,
      'payload': payload or {}
    }
    with self.log_file.open('a', encoding='utf-8') as handle:
      handle.write(json.dumps(entry, default=_jsonable) + '\n')

  def log_error(self, message: str, payload: Optional[Dict[str, Any]] = None) -> None:
    self.log_event('error', message, payload)

  def recent(self, limit: int = 200, category: Optional[str] = None) -> List[Dict[str, Any]]:
    if not self.log_file.exists():
      return []
    entries = []
    for line in self.log_file.read_text(encoding='utf-8').splitlines():
      try:
        entry = json.loads(line)
      except json.JSONDecodeError:
        logger.warning('Malformed log line: %s', line)
        continue
      if category is None or entry.get('category') == category:
        entries.append(entry)
    return entries[-limit:]
