from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Union


@dataclass
class StageRecord:
  """Reproducibility record written next to each stage checkpoint; carries no wall-clock data."""

  stage: str
  seed: int
  config: Dict[str, Any]
  loss_trace: List[float] = field(default_factory=list)
  initial_loss: Optional[float] = None
  final_loss: Optional[float] = None
  steps: int = 0
  train_samples: int = 0
  fingerprints: Dict[str, str] = field(default_factory=dict)

  def to_json(self) -> str:
    return json.dumps(asdict(self), indent=2, sort_keys=True) + '\n'

  def write(self, path: Union[str, Path]) -> Path:
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    target.write_text(self.to_json(), encoding='utf-8')
    return target

  @classmethod
  def read(cls, path: Union[str, Path]) -> 'StageRecord':
    return cls(**json.loads(Path(path).read_text(encoding='utf-8')))
