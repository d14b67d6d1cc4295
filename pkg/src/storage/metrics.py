"""Append-only JSON-lines metrics stream and the CSV accuracy report built from it."""
import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path

from src.errors import MetricsFormatError, NumericError

logger = logging.getLogger(__name__)

EVENTS = ('epoch', 'task_done', 'gate_done', 'eval')


@dataclass
class MetricsRecord:
    event: str
    task: int = -1
    epoch: int = -1
    loss: float = 0.0
    acc: float = 0.0
    trainable_params: int = 0
    bank_bytes: int = 0
    wall_ms: int = 0
    seed: int = 0
    routing_acc: float = None
    oracle_acc: float = None
    scope: str = None
    num_tasks: int = None
    after_task: int = None

    def to_dict(self):
        return {k: v for k, v in asdict(self).items() if v is not None}

    def to_json(self):
        try:
            return json.dumps(self.to_dict(), allow_nan=False)
        except ValueError:
            raise NumericError(f'non-finite value in {self.event} record for task {self.task}') from None

    @classmethod
    def from_dict(cls, data, line_no=0):
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise MetricsFormatError(f'unknown fields {sorted(unknown)}', line_no)
        if data.get('event') not in EVENTS:
            raise MetricsFormatError(f"unknown event {data.get('event')!r}", line_no)
        for key, value in data.items():
            if isinstance(value, float) and not math.isfinite(value):
                raise MetricsFormatError(f'{key} is not finite', line_no)
        return cls(**data)


class MetricsWriter:
    """Single writer appending one record per line."""

    def __init__(self, path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self.count = 0

    def write(self, record):
        line = record.to_json()
        with self.path.open('a', encoding='utf-8', newline='\n') as fh:
            fh.write(line + '\n')
        self.count += 1
        logger.debug('metrics %s', line)

    __call__ = write


def read_metrics(path):
    records = []
    with Path(path).open(encoding='utf-8') as fh:
        for line_no, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                data = json.loads(line)
            except json.JSONDecodeError as e:
                raise MetricsFormatError(f'invalid record: {e.msg}', line_no) from None
            if not isinstance(data, dict):
                raise MetricsFormatError('record is not an object', line_no)
            try:
                records.append(MetricsRecord.from_dict(data, line_no))
            except TypeError as e:
                raise MetricsFormatError(str(e), line_no) from None
    return records


# Accuracy-vs-granularity report

REPORT_COLUMNS = ('num_tasks', 'runs', 'overall_acc', 'routing_acc', 'oracle_acc', 'bank_bytes')


@dataclass
class ReportRow:
    num_tasks: int
    runs: int
    overall_acc: float
    routing_acc: float
    oracle_acc: float
    bank_bytes: int

    def to_dict(self):
        return asdict(self)


def summary_record(records):
    """The last overall eval record of a run."""
    overall = [r for r in records if r.event == 'eval' and r.scope == 'overall']
    return overall[-1] if overall else None


def build_report(runs):
    """One row per ``num_tasks`` setting, averaging runs that share it, sorted ascending."""
    grouped = {}
    for name, records in runs:
        summary = summary_record(records)
        if summary is None:
            raise MetricsFormatError(f'{name} has no overall eval record', 0)
        grouped.setdefault(summary.num_tasks, []).append(summary)
    rows = []
    for num_tasks in sorted(grouped):
        group = grouped[num_tasks]
        n = len(group)
        rows.append(ReportRow(
            num_tasks=num_tasks,
            runs=n,
            overall_acc=sum(r.acc for r in group) / n,
            routing_acc=sum(r.routing_acc for r in group) / n,
            oracle_acc=sum(r.oracle_acc for r in group) / n,
            bank_bytes=max(r.bank_bytes for r in group),
        ))
    return rows


def write_report_csv(path_or_file, rows):
    def _write(fh):
        writer = csv.DictWriter(fh, fieldnames=REPORT_COLUMNS, lineterminator='\n')
        writer.writeheader()
        for row in rows:
            writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.to_dict().items()})

    if hasattr(path_or_file, 'write'):
        _write(path_or_file)
    else:
        with Path(path_or_file).open('w', encoding='utf-8', newline='') as fh:
            _write(fh)


def read_report_csv(path):
    rows = []
    with Path(path).open(encoding='utf-8', newline='') as fh:
        for line_no, raw in enumerate(csv.DictReader(fh), 2):
            try:
                rows.append(ReportRow(
                    num_tasks=int(raw['num_tasks']),
                    runs=int(raw['runs']),
                    overall_acc=float(raw['overall_acc']),
                    routing_acc=float(raw['routing_acc']),
                    oracle_acc=float(raw['oracle_acc']),
                    bank_bytes=int(raw['bank_bytes']),
                ))
            except (KeyError, TypeError, ValueError) as e:
                raise MetricsFormatError(f'bad report row: {e}', line_no) from None
    return rows
