"""Tables and plots over completed run directories."""
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Union
import logging

import matplotlib
matplotlib.use('Agg')
import matplotlib.pyplot as plt  # noqa: E402
import pandas as pd  # noqa: E402

from .base import EvalReport  # noqa: E402
from .evaluation import COMPARISON_FILE, CROSS_EVAL_REPORT, EVAL_REPORT  # noqa: E402
from .operations import METRICS_FILE, MetricsLog  # noqa: E402
from .training import RUN_FILE  # noqa: E402
from .utils import Colors, read_json  # noqa: E402

logger = logging.getLogger(__name__)

RESULT_COLUMNS = ['run', 'kind', 'database', 'repeat', 'srcc', 'plcc', 'plcc_fitted', 'n']
FLOAT_FORMAT = '%.6f'


def _metric_logs(run_dir: Path) -> List[MetricsLog]:
    dirs = [run_dir] + sorted(p.parent for p in run_dir.glob(f'*/{METRICS_FILE}'))
    return [MetricsLog(d) for d in dirs if (d / METRICS_FILE).exists()]


def _run_label(run_dir: Path) -> str:
    run_file = run_dir / RUN_FILE
    if not run_file.exists():
        candidates = sorted(run_dir.glob(f'*/{RUN_FILE}'))
        run_file = candidates[0] if candidates else None
    if run_file is None:
        return run_dir.name
    meta = read_json(run_file)
    phases = meta.get('phases', [])
    label = meta.get('strategy', 'unqa')
    missing = [p for p in ('step1', 'step2', 'step3') if label != 'lrs' and p not in phases]
    if missing:
        label += ' w/o ' + '+'.join(missing)
    return f"{run_dir.name} ({label})"


def results_table(run_dir: Path) -> pd.DataFrame:
    """One row per (kind, database, repeat) plus a mean row per database."""
    rows = []
    for filename in (EVAL_REPORT, CROSS_EVAL_REPORT):
        path = run_dir / filename
        if not path.exists():
            continue
        report = EvalReport.from_dict(read_json(path))
        for row in report.rows:
            rows.append({'run': run_dir.name, 'kind': report.kind, **row.to_dict()})
        for name, means in report.means().items():
            rows.append({'run': run_dir.name, 'kind': report.kind, 'database': name, 'repeat': 'mean',
                         'srcc': means['srcc'], 'plcc': means['plcc'], 'plcc_fitted': means['plcc_fitted'],
                         'n': None})
    table = pd.DataFrame(rows, columns=RESULT_COLUMNS)
    table['repeat'] = table['repeat'].astype(str)
    return table


def comparison_table(tables: Dict[str, pd.DataFrame]) -> pd.DataFrame:
    """Databases as rows, one SRCC/PLCC column pair per run (mean rows only)."""
    frames = []
    for label, table in tables.items():
        means = table[table['repeat'] == 'mean'].set_index(['kind', 'database'])[['srcc', 'plcc']]
        means.columns = [f"{label} {c.upper()}" for c in means.columns]
        frames.append(means)
    return pd.concat(frames, axis=1).sort_index()


def ablation_table(tables: Dict[str, pd.DataFrame]) -> pd.DataFrame:
    """Training configurations as rows, databases as SRCC/PLCC column pairs."""
    rows = {}
    for label, table in tables.items():
        means = table[(table['repeat'] == 'mean') & (table['kind'] == 'test')]
        row = {}
        for record in means.sort_values('database').itertuples(index=False):
            row[(record.database, 'SRCC')] = record.srcc
            row[(record.database, 'PLCC')] = record.plcc
        rows[label] = row
    frame = pd.DataFrame.from_dict(rows, orient='index')
    if not frame.empty:
        frame.columns = pd.MultiIndex.from_tuples(frame.columns)
        frame = frame.sort_index(axis=1)
    return frame


def complexity_table(run_dirs: Sequence[Path]) -> pd.DataFrame:
    """Latest logged parameter count and per-sample scoring time of each run."""
    rows = []
    for run_dir in run_dirs:
        records = [r for log in _metric_logs(run_dir) for r in log.records('complexity')]
        if not records:
            continue
        latest = records[-1]
        row = {'run': _run_label(run_dir), 'parameters': latest['parameters']}
        for modality, seconds in sorted(latest['seconds_per_sample'].items()):
            row[f"ms_per_{modality}"] = 1000.0 * seconds
        rows.append(row)
    return pd.DataFrame(rows)


def plot_training_curves(logs: Sequence[MetricsLog], path: Path) -> Path:
    fig, ax = plt.subplots(figsize=(8, 4))
    for log in logs:
        for phase in dict.fromkeys(r['phase'] for r in log.records('step')):
            steps = log.records('step', phase)
            prefix = f"{log.run_dir.name}/" if len(logs) > 1 else ''
            ax.plot([r['step'] for r in steps], [r['loss'] for r in steps], label=f"{prefix}{phase}", lw=0.8)
    ax.set_xlabel('step')
    ax.set_ylabel('training loss')
    ax.legend(fontsize='small')
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return path


def plot_schedule_composition(log: MetricsLog, path: Path) -> Path:
    """Stacked draws per database for every logged epoch of the first phase."""
    records = log.records('schedule')
    first_phase = records[0]['phase'] if records else None
    records = [r for r in records if r['phase'] == first_phase]
    counts = pd.DataFrame([r['counts'] for r in records], index=[r['epoch'] for r in records]).fillna(0)
    fig, ax = plt.subplots(figsize=(8, 4))
    if not counts.empty:
        counts.sort_index(axis=1).plot.bar(stacked=True, ax=ax, width=0.9)
    ax.set_xlabel('epoch')
    ax.set_ylabel('draws')
    ax.set_title(f"schedule composition ({first_phase})")
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return path


def _write_table(table: pd.DataFrame, stem: Path, index: bool) -> List[Path]:
    csv_path = stem.with_suffix('.csv')
    txt_path = stem.with_suffix('.txt')
    table.to_csv(csv_path, index=index, float_format=FLOAT_FORMAT, lineterminator='\n')
    with open(txt_path, 'w', encoding='utf-8') as f:
        f.write(table.to_string(float_format=lambda v: f"{v:.4f}", index=index) + '\n')
    return [csv_path, txt_path]


def report(run_dirs: Sequence[Union[str, Path]], out_dir: Union[str, Path, None] = None) -> Dict[str, List[Path]]:
    """Render results, comparison, ablation, complexity and joint-vs-single tables plus plots."""
    run_dirs = [Path(d) for d in run_dirs]
    if not run_dirs:
        raise ValueError("report needs at least one run directory")
    out_dir = Path(out_dir) if out_dir is not None else run_dirs[0] / 'report'
    out_dir.mkdir(parents=True, exist_ok=True)
    outputs: Dict[str, List[Path]] = {'tables': [], 'plots': []}

    tables: Dict[str, pd.DataFrame] = {}
    for run_dir in run_dirs:
        logs = _metric_logs(run_dir)
        if not any(log.records() for log in logs):
            raise ValueError(f"Metrics log of {run_dir} is missing or empty")
        table = results_table(run_dir)
        if table.empty:
            logger.warning(f"{run_dir} has no evaluation report; tables will skip it")
        else:
            tables[_run_label(run_dir)] = table
        outputs['plots'].append(plot_training_curves(logs, out_dir / f"training_curves_{run_dir.name}.png"))
        scheduled = [log for log in logs if log.records('schedule')]
        if scheduled:
            outputs['plots'].append(plot_schedule_composition(scheduled[0], out_dir / f"schedule_{run_dir.name}.png"))

    if tables:
        combined = pd.concat(tables.values(), ignore_index=True)
        outputs['tables'] += _write_table(combined, out_dir / 'results', index=False)
        print(Colors.table(combined.to_string(index=False, float_format=lambda v: f"{v:.4f}")))
    if len(tables) > 1:
        outputs['tables'] += _write_table(comparison_table(tables), out_dir / 'comparison', index=True)
        outputs['tables'] += _write_table(ablation_table(tables), out_dir / 'ablation', index=True)

    complexity = complexity_table(run_dirs)
    if not complexity.empty:
        outputs['tables'] += _write_table(complexity, out_dir / 'complexity', index=False)

    comparisons = []
    for run_dir in run_dirs:
        path = run_dir / COMPARISON_FILE
        if path.exists():
            comparisons += [{'run': run_dir.name, **row} for row in read_json(path)['rows']]
    if comparisons:
        frame = pd.DataFrame(comparisons, columns=['run', 'database', 'seed', 'joint_srcc', 'single_srcc', 'passed'])
        outputs['tables'] += _write_table(frame, out_dir / 'joint_vs_single', index=False)

    logger.info(f"Report written to {out_dir}")
    return outputs
