#!/usr/bin/env python3
"""
mmtranslate/services/reporting.py
Machine-readable run reports and their box-drawn table rendering
"""

import json
import os
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Sequence, Union

from services.errors import StorageError

REPORT_JSON = 'report.json'
REPORT_TEXT = 'report.txt'
FAILED_MARKER = 'FAILED'

REGIMES = (('binary', 'Binary'), ('seven_class', '7-class'))
SCORES = (('precision', 'Prec'), ('recall', 'Recall'), ('f1', 'F1'))


def report_document(result, config_hash: str) -> Dict[str, Any]:
    doc = result.to_dict()
    doc['config_hash'] = config_hash
    doc['status'] = 'ok'
    return doc


def _write_text(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + '.tmp')
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(tmp, 'w', encoding='utf-8', newline='\n') as f:
            f.write(text)
        os.replace(tmp, path)
    except OSError as e:
        raise StorageError(f"cannot write {path}: {e}")


def write_report(run_dir: Union[str, Path], doc: Mapping[str, Any]) -> Path:
    """report.json plus its rendered report.txt; a stale FAILED marker is removed"""
    run_dir = Path(run_dir)
    path = run_dir / REPORT_JSON
    _write_text(path, json.dumps(doc, indent=2, sort_keys=True) + '\n')
    _write_text(run_dir / REPORT_TEXT, render_report(doc) + '\n')
    marker = run_dir / FAILED_MARKER
    if marker.exists():
        marker.unlink()
    return path


def write_failure(run_dir: Union[str, Path], message: str) -> Path:
    marker = Path(run_dir) / FAILED_MARKER
    _write_text(marker, message.rstrip('\n') + '\n')
    return marker


def load_report(path: Union[str, Path]) -> Dict[str, Any]:
    path = Path(path)
    if path.is_dir():
        path = path / REPORT_JSON
    try:
        with open(path, 'r', encoding='utf-8') as f:
            return json.load(f)
    except OSError as e:
        raise StorageError(f"cannot read report {path}: {e}")
    except json.JSONDecodeError as e:
        raise StorageError(f"report {path} is not valid JSON: {e}")


def _fmt(value: Optional[float], width: int) -> str:
    text = '-' if value is None else f"{value:.4f}"
    return text.rjust(width)


def _box(title_row: str, rows: Sequence[str], width: int) -> str:
    top = f"╔{'═' * width}╗"
    sep = f"╠{'═' * width}╣"
    footer = f"╚{'═' * width}╝"
    body = [f"║{row.ljust(width)}║" for row in rows]
    return '\n'.join([top, f"║{title_row.ljust(width)}║", sep] + body + [footer])


def score_columns() -> List[str]:
    """Column names: both regimes x Prec/Recall/F1, then MAE"""
    cols = [f"{regime} {score}" for _, regime in REGIMES for _, score in SCORES]
    return cols + ['MAE']


def _score_cells(report: Mapping[str, Any], average: str = 'weighted') -> List[Optional[float]]:
    cells = [report[key][average][score] for key, _ in REGIMES for score, _ in SCORES]
    return cells + [report['mae']]


def _confusion_lines(label: str, confusion: Mapping[str, Any]) -> List[str]:
    classes = confusion['classes']
    lines = [f"   {label} confusion (rows predicted, columns actual):",
             '   ' + ' ' * 6 + ''.join(str(c).rjust(6) for c in classes)]
    for c, row in zip(classes, confusion['counts']):
        lines.append('   ' + str(c).rjust(6) + ''.join(str(n).rjust(6) for n in row))
    return lines


def render_report(doc: Mapping[str, Any]) -> str:
    spec = doc['spec']
    report = doc['report']
    cell = 9
    name_width = 16
    header = '  ' + 'Average'.ljust(name_width) + ''.join(c.rjust(cell + 2) for c in
                                                          ['Bin P', 'Bin R', 'Bin F1', '7c P', '7c R', '7c F1', 'MAE'])
    rows = []
    for average, label in (('weighted', 'weighted'), ('macro', 'unweighted')):
        values = _score_cells(report, average)
        if average == 'macro':
            values[-1] = None
        rows.append('  ' + label.ljust(name_width) + ''.join(_fmt(v, cell + 2) for v in values))
    width = max(len(header), len(rows[0])) + 2
    lines = [f"📊 {spec['id']}: {spec['source']}" + (f" → {spec['target']}" if spec.get('target') else ''),
             f"   translation stages: {doc['translation_stages']}, test segments: {report['segments']}",
             _box(header, rows, width)]

    for key, label in REGIMES:
        lines += _confusion_lines(label, report[key]['confusion'])
    for stage in doc.get('translation', []):
        extra = ''
        if 'token_accuracy' in stage:
            extra = f", beam {stage['beam_width']} token accuracy {stage['token_accuracy']:.4f}"
        if 'test_loss' in stage:
            lines.append(f"   {stage['stage']}: test loss {stage['test_loss']:.6f}{extra}")
    for note in report.get('notes', []):
        lines.append(f"   ⚠️  {note}")
    return '\n'.join(lines)


def summary_row(spec, doc: Optional[Mapping[str, Any]] = None, error: Optional[str] = None) -> Dict[str, Any]:
    row = {'id': spec.id, 'pipeline': spec.label, 'kind': spec.kind,
           'translation_stages': spec.translation_stages, 'status': 'ok' if doc else 'failed'}
    if doc:
        row['scores'] = dict(zip(score_columns(), _score_cells(doc['report'])))
    if error:
        row['error'] = error
    return row


def render_summary(rows: Sequence[Mapping[str, Any]]) -> str:
    id_width = max([len(r['id']) for r in rows] + [2])
    name_width = max([len(r['pipeline']) for r in rows] + [8])
    cell = 8
    columns = score_columns()
    short = ['Bin P', 'Bin R', 'Bin F1', '7c P', '7c R', '7c F1', 'MAE']
    header = (f"  {'ID'.ljust(id_width)}  {'Pipeline'.ljust(name_width)}  Stg"
              + ''.join(c.rjust(cell + 1) for c in short) + '  Status')
    body = []
    for r in rows:
        scores = r.get('scores') or {}
        cells = ''.join(_fmt(scores.get(c), cell + 1) for c in columns)
        status = '✅' if r['status'] == 'ok' else '❌'
        body.append(f"  {r['id'].ljust(id_width)}  {r['pipeline'].ljust(name_width)}  "
                    f"{str(r['translation_stages']).rjust(3)}{cells}  {status}")
    width = max(len(header), max((len(b) for b in body), default=0)) + 2
    failed = sum(1 for r in rows if r['status'] != 'ok')
    return _box(header, body, width) + f"\n\n📊 Total: {len(rows)} pipelines ({len(rows) - failed} ok, {failed} failed)"
