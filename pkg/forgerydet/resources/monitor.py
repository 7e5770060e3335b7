from __future__ import annotations

import logging
import os
from dataclasses import dataclass
from typing import Any, Dict, Optional

try:
  import psutil  # type: ignore
except ImportError:  # pragma: no cover - optional dependency
  psutil = None

logger = logging.getLogger(__name__)

_GIB = 1024 ** 3


@dataclass
class Thresholds:
  memory_percent: float = 90.0
  min_available_gb: float = 1.0


class ResourceMonitor:
  """Host snapshot taken at stage boundaries; the numbers go to the event log only."""

  def __init__(self, thresholds: Optional[Thresholds] = None) -> None:
    self.thresholds = thresholds or Thresholds()

  def snapshot(self) -> Dict[str, Any]:
    if psutil is None:
      return {
        'cpu_count': os.cpu_count(),
        'memory': None,
        'process_rss_gb': None,
        'flags': {'memory_high': False}
      }
    virtual_mem = psutil.virtual_memory()
    rss = psutil.Process().memory_info().rss
    available_gb = virtual_mem.available / _GIB
    return {
      'cpu_count': psutil.cpu_count(logical=True),
      'memory': {
        'percent': round(virtual_mem.percent, 1),
        'available_gb': round(available_gb, 2),
        'total_gb': round(virtual_mem.total / _GIB, 2)
      },
      'process_rss_gb': round(rss / _GIB, 3),
      'flags': {
        'memory_high': virtual_mem.percent >= self.thresholds.memory_percent
        or available_gb <= self.thresholds.min_available_gb
      }
    }

  def check(self, stage: str) -> Dict[str, Any]:
    payload = self.snapshot()
    if payload['flags']['memory_high']:
      logger.warning('Memory pressure before %s: %s', stage, payload['memory'])
    return payload
