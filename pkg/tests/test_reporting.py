"""
Tests for the summary and trace emitters
"""
import json

import numpy as np
import pandas as pd
import pytest

from core.conditions import ConditionReport
from core.reporting import (NumpyEncoder, build_summary, build_traces, format_summary_text, write_summary,
                            write_traces)

METADATA = {'family': 'lq', 'n': 4, 'm': 2, 'd': 2, 'paths': 64, 'steps': 4, 'seed': 1}


def _reports():
    return [
        ConditionReport('first_order_integral', 'pass', value=0.01, stderr=0.02, trace=np.arange(4.0),
                        notes=('nota',)),
        ConditionReport('maximum_principle_gap', 'violated', value=0.3, max=0.3, mean=0.1,
                        violation_measure=0.25, trace=np.ones(4)),
        ConditionReport('transposition_identity', 'inconclusive', value=float('nan')),
    ]


def test_numpy_encoder():
    """numpy scalars and arrays serialize as plain JSON"""
    text = json.dumps({'a': np.int64(3), 'b': np.float32(0.5), 'c': np.array([1, 2]), 'd': np.bool_(True)},
                      cls=NumpyEncoder)
    assert json.loads(text) == {'a': 3, 'b': 0.5, 'c': [1, 2], 'd': True}


def test_summary_counts_and_strict_json(tmp_path):
    """Verdicts are counted; NaN is written as text"""
    summary = build_summary(METADATA, _reports(), 2)
    assert summary['verdict_counts'] == {'pass': 1, 'violated': 1, 'inconclusive': 1}
    path = write_summary(summary, str(tmp_path / 'nested' / 'summary.json'))
    raw = open(path, encoding='utf-8').read()
    assert 'NaN' not in raw
    loaded = json.loads(raw)
    assert loaded['checks'][2]['value'] == 'nan'
    assert loaded['exit_status'] == 2


def test_summary_is_reproducible(tmp_path):
    """Same reports, same bytes"""
    a = write_summary(build_summary(METADATA, _reports(), 2), str(tmp_path / 'a.json'))
    b = write_summary(build_summary(METADATA, _reports(), 2), str(tmp_path / 'b.json'))
    assert open(a, 'rb').read() == open(b, 'rb').read()


def test_traces_frame(tmp_path):
    """One column per traced report, in order"""
    frame = build_traces(_reports(), np.linspace(0.0, 1.0, 5))
    assert list(frame.columns) == ['step', 'time', 'first_order_integral', 'maximum_principle_gap']
    assert frame['time'].tolist() == [0.0, 0.25, 0.5, 0.75]
    path = write_traces(frame, str(tmp_path / 'traces.csv'))
    back = pd.read_csv(path)
    assert np.allclose(back['first_order_integral'], [0.0, 1.0, 2.0, 3.0])


def test_trace_shape_mismatch():
    """A trace that does not match the grid is rejected"""
    bad = [ConditionReport('first_order_integral', 'pass', trace=np.zeros(3))]
    with pytest.raises(ValueError):
        build_traces(bad, np.linspace(0.0, 1.0, 5))


def test_text_summary():
    """Marks, values and the exit code appear in the text"""
    text = format_summary_text(build_summary(METADATA, _reports(), 2))
    assert '🟢 **first_order_integral**: pass' in text
    assert '🔴 **maximum_principle_gap**: violated' in text
    assert 'Nota: nota' in text
    assert 'Código de salida: 2' in text
    assert 'Sin comprobaciones' in format_summary_text(build_summary(METADATA, [], 0))


if __name__ == '__main__':
    pytest.main([__file__])
