"""
Report emitters: summary JSON, per-step residual traces (CSV) and a text summary
"""
import json
import os
from typing import Dict, List, Sequence
import logging

import numpy as np
import pandas as pd

from core.conditions import ConditionReport

logger = logging.getLogger(__name__)

TRACE_FLOAT_FORMAT = '%.12e'
VERDICT_MARKS = {'pass': '🟢', 'violated': '🔴', 'inconclusive': '🟡'}


class NumpyEncoder(json.JSONEncoder):
    """
    JSON encoder for numpy scalars and arrays
    """
    def default(self, obj):
        if isinstance(obj, np.integer):
            return int(obj)
        elif isinstance(obj, np.floating):
            return float(obj)
        elif isinstance(obj, np.bool_):
            return bool(obj)
        elif isinstance(obj, np.ndarray):
            return obj.tolist()
        return super().default(obj)


def _finite_or_text(value):
    """Non-finite floats become strings so the document stays strict JSON."""
    if isinstance(value, dict):
        return {k: _finite_or_text(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_finite_or_text(v) for v in value]
    if isinstance(value, (float, np.floating)) and not np.isfinite(value):
        return 'nan' if np.isnan(value) else ('inf' if value > 0 else '-inf')
    return value


def build_summary(metadata: Dict, reports: Sequence[ConditionReport], exit_status: int) -> Dict:
    """
    One record per check plus the run metadata. No timestamps: identical inputs
    give identical documents.
    """
    counts = {verdict: 0 for verdict in VERDICT_MARKS}
    for report in reports:
        counts[report.verdict] += 1
    return {
        'scenario': metadata,
        'checks': [report.to_record() for report in reports],
        'verdict_counts': counts,
        'exit_status': int(exit_status),
    }


def write_summary(summary: Dict, path: str) -> str:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, 'w', encoding='utf-8', newline='\n') as f:
        json.dump(_finite_or_text(summary), f, cls=NumpyEncoder, indent=2, sort_keys=True, ensure_ascii=False)
        f.write('\n')
    logger.info(f"Resumen guardado: {path}")
    return path


def build_traces(reports: Sequence[ConditionReport], times: np.ndarray) -> pd.DataFrame:
    """
    Columns: step, time, then one column per report that carries a per-step trace,
    named by the report id, in report order.
    """
    steps = len(times) - 1
    frame = pd.DataFrame({'step': np.arange(steps), 'time': np.asarray(times[:steps], dtype=float)})
    for report in reports:
        if report.trace is None:
            continue
        trace = np.asarray(report.trace, dtype=float)
        if trace.shape != (steps,):
            raise ValueError(f"trace of {report.condition_id} has shape {trace.shape}, expected ({steps},)")
        frame[report.condition_id] = trace
    return frame


def write_traces(frame: pd.DataFrame, path: str) -> str:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    frame.to_csv(path, index=False, float_format=TRACE_FLOAT_FORMAT, lineterminator='\n')
    logger.info(f"Trazas guardadas: {path} ({len(frame.columns) - 2} columnas de residuos)")
    return path


def _fmt(value) -> str:
    if value is None:
        return '-'
    if isinstance(value, str):
        return value
    return f"{value:.4e}"


def format_summary_text(summary: Dict) -> str:
    """
    Format the summary as readable text
    """
    meta = summary['scenario']
    text = "## Verificación de condiciones de optimalidad\n\n"
    text += (f"Familia: {meta.get('family')} | n={meta.get('n')}, m={meta.get('m')}, d={meta.get('d')} | "
             f"P={meta.get('paths')}, N={meta.get('steps')}, semilla={meta.get('seed')}\n\n")

    if not summary['checks']:
        text += "Sin comprobaciones solicitadas.\n\n"
    for i, record in enumerate(summary['checks'], 1):
        mark = VERDICT_MARKS.get(record['verdict'], '')
        text += f"{i}. {mark} **{record['id']}**: {record['verdict']}\n"
        if record['value'] is not None:
            text += f"   - Valor: {_fmt(record['value'])} ± {_fmt(record['stderr'])}\n"
        if record['violation_measure'] is not None:
            text += f"   - Máx: {_fmt(record['max'])}, medida de violación: {_fmt(record['violation_measure'])}\n"
        for note in record['notes']:
            text += f"   - Nota: {note}\n"
    text += f"\nCódigo de salida: {summary['exit_status']}\n"
    return text
