"""Training record handling and tracking."""
from datetime import datetime
from pathlib import Path
from typing import Any, Dict, Iterator, List, Optional
import json
import logging

import numpy as np

from .utils import Colors

logger = logging.getLogger(__name__)

METRICS_FILE = 'metrics.jsonl'


class MetricsLog:
    """Append-only line-delimited records of one run.

    Every record carries `kind` ('step', 'epoch', 'phase', 'schedule', 'comparison'
    or 'complexity'), the phase and, where applicable, the database.
    """

    def __init__(self, run_dir: Path):
        self.run_dir = Path(run_dir)
        self.path = self.run_dir / METRICS_FILE
        self.current_phase: Optional[str] = None

    def add_record(self, kind: str, **fields: Any) -> Dict[str, Any]:
        """Append a record and return it."""
        record = {'kind': kind, 'phase': fields.pop('phase', self.current_phase)}
        record.update(fields)
        record['timestamp'] = datetime.now().isoformat(timespec='seconds')
        self.run_dir.mkdir(parents=True, exist_ok=True)
        with open(self.path, 'a', encoding='utf-8') as f:
            f.write(json.dumps(record, sort_keys=True, default=_jsonable) + '\n')
        return record

    def step(self, step: int, database: str, loss: float, epoch: int) -> None:
        self.add_record('step', step=step, epoch=epoch, database=database, loss=float(loss))

    def epoch(self, epoch: int, train_loss: float, val: Dict[str, Dict[str, float]], selected: bool) -> None:
        self.add_record('epoch', epoch=epoch, train_loss=float(train_loss), val=val, selected=selected)

    def records(self, kind: Optional[str] = None, phase: Optional[str] = None) -> List[Dict[str, Any]]:
        return [r for r in self._iter() if (kind is None or r['kind'] == kind)
                and (phase is None or r.get('phase') == phase)]

    def _iter(self) -> Iterator[Dict[str, Any]]:
        if not self.path.exists():
            return
        with open(self.path, 'r', encoding='utf-8') as f:
            for line in f:
                line = line.strip()
                if line:
                    yield json.loads(line)

    def completed_phases(self) -> List[str]:
        return [r['phase'] for r in self.records('phase') if r.get('status') == 'completed']

    def phase_stats(self, phase: str) -> Dict[str, Any]:
        """Summary of a phase's logged steps and epochs."""
        steps = self.records('step', phase)
        epochs = self.records('epoch', phase)
        per_db: Dict[str, int] = {}
        for r in steps:
            per_db[r['database']] = per_db.get(r['database'], 0) + 1
        return {
            'steps': len(steps),
            'epochs': len({r['epoch'] for r in epochs}),
            'mean_loss': float(np.mean([r['loss'] for r in steps])) if steps else None,
            'draws_per_database': per_db,
        }

    def format_summary(self) -> str:
        """Coloured one-line-per-phase summary."""
        lines = []
        for r in self.records('phase'):
            if r.get('status') != 'completed':
                continue
            stats = self.phase_stats(r['phase'])
            loss = f"{stats['mean_loss']:.4f}" if stats['mean_loss'] is not None else 'n/a'
            lines.append(Colors.success(f"{r['phase']}: {stats['epochs']} epochs, "
                                        f"{stats['steps']} steps, mean loss {loss}, "
                                        f"best val SRCC {r.get('best_val_srcc', float('nan')):.4f}"))
        return '\n'.join(lines) if lines else Colors.warning("No completed phases yet.")


def _jsonable(value: Any) -> Any:
    if isinstance(value, (np.floating, np.integer)):
        return value.item()
    if isinstance(value, Path):
        return str(value)
    raise TypeError(f"Not JSON serializable: {type(value).__name__}")
