import pandas as pd
import pytest

from core.base import EvalReport, EvalRow, MetricPair
from core.evaluation import COMPARISON_FILE, EVAL_REPORT
from core.operations import MetricsLog
from core.reporting import ablation_table, comparison_table, complexity_table, report, results_table
from core.training import RUN_FILE
from core.utils import write_json

DATABASES = ('db_audio', 'db_image')


def make_run(path, phases=('step1', 'step2', 'step3'), offset=0.0):
    log = MetricsLog(path)
    log.current_phase = phases[0]
    log.add_record('schedule', epoch=0, counts={'db_audio': 2, 'db_image': 3}, total=5)
    for step in range(5):
        log.step(step, DATABASES[step % 2], 1.0 / (step + 1), 0)
    write_json(path / RUN_FILE, {'strategy': 'unqa', 'phases': list(phases)})
    rows = [EvalRow(db, seed, MetricPair(srcc=0.5 + 0.1 * seed + offset, plcc=0.4 + offset, n=20))
            for seed in (0, 1) for db in DATABASES]
    write_json(path / EVAL_REPORT, EvalReport(rows=rows, config_hash='abc', checkpoint_id='x').to_dict())
    return path


def test_results_table_has_repeat_and_mean_rows(tmp_path):
    table = results_table(make_run(tmp_path / 'a'))
    assert len(table) == 6
    means = table[table['repeat'] == 'mean'].set_index('database')
    assert means.loc['db_image', 'srcc'] == pytest.approx(0.55)
    assert list(table[table['repeat'] != 'mean']['repeat']) == ['0', '0', '1', '1']


def test_comparison_and_ablation_tables(tmp_path):
    tables = {'full': results_table(make_run(tmp_path / 'a')),
              'ablated': results_table(make_run(tmp_path / 'b', offset=-0.2))}
    comparison = comparison_table(tables)
    assert list(comparison.columns) == ['full SRCC', 'full PLCC', 'ablated SRCC', 'ablated PLCC']
    assert comparison.loc[('test', 'db_audio'), 'ablated PLCC'] == pytest.approx(0.2)
    ablation = ablation_table(tables)
    assert sorted(ablation.index) == ['ablated', 'full']
    assert ablation.loc['full', ('db_image', 'SRCC')] == pytest.approx(0.55)


def test_report_writes_tables_and_plots(tmp_path):
    a = make_run(tmp_path / 'a')
    b = make_run(tmp_path / 'b', phases=('step2', 'step3'), offset=-0.1)
    write_json(a / COMPARISON_FILE, {'database': 'db_image', 'passes': 1, 'rows': [
        {'database': 'db_image', 'seed': 0, 'joint_srcc': 0.8, 'single_srcc': 0.7, 'passed': True}]})
    outputs = report([a, b], tmp_path / 'out')

    names = sorted(p.name for p in outputs['tables'])
    assert names == ['ablation.csv', 'ablation.txt', 'comparison.csv', 'comparison.txt',
                     'joint_vs_single.csv', 'joint_vs_single.txt', 'results.csv', 'results.txt']
    assert sorted(p.name for p in outputs['plots']) == ['schedule_a.png', 'schedule_b.png',
                                                        'training_curves_a.png', 'training_curves_b.png']
    assert all(p.stat().st_size > 0 for p in outputs['plots'])
    ablation = (tmp_path / 'out' / 'ablation.txt').read_text()
    assert 'b (unqa w/o step1)' in ablation
    results = pd.read_csv(tmp_path / 'out' / 'results.csv')
    assert len(results) == 12


def test_report_is_reproducible(tmp_path):
    run = make_run(tmp_path / 'a')
    report([run], tmp_path / 'first')
    report([run], tmp_path / 'second')
    assert (tmp_path / 'first' / 'results.csv').read_bytes() == (tmp_path / 'second' / 'results.csv').read_bytes()


def test_report_requires_a_metrics_log(tmp_path):
    (tmp_path / 'empty').mkdir()
    with pytest.raises(ValueError, match="missing or empty"):
        report([tmp_path / 'empty'])


def test_complexity_table_uses_the_latest_record(tmp_path):
    a = make_run(tmp_path / 'a')
    b = make_run(tmp_path / 'b', phases=('step2', 'step3'))
    log = MetricsLog(a)
    log.add_record('complexity', phase=None, parameters=100, seconds_per_sample={'image': 0.5})
    log.add_record('complexity', phase=None, parameters=120, seconds_per_sample={'image': 0.002, 'audio': 0.001})

    table = complexity_table([a, b])
    assert list(table['run']) == ['a (unqa)']
    assert table.loc[0, 'parameters'] == 120
    assert table.loc[0, 'ms_per_image'] == pytest.approx(2.0)
    assert table.loc[0, 'ms_per_audio'] == pytest.approx(1.0)

    outputs = report([a, b], tmp_path / 'out')
    assert {'complexity.csv', 'complexity.txt'} <= {p.name for p in outputs['tables']}
