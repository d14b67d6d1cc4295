import io
import logging

import click

from src.commands.common import handle_errors
from src.storage.metrics import build_report, read_metrics, write_report_csv

logger = logging.getLogger(__name__)


@click.command('report')
@click.argument('metrics', nargs=-1, required=True, type=click.Path(exists=True, dir_okay=False))
@click.option('--out', type=click.Path(dir_okay=False), default=None, help='CSV destination (default: stdout)')
@handle_errors('Report')
def report_cmd(metrics, out):
    """Accuracy per task granularity from one or more metrics.jsonl files."""
    rows = build_report([(path, read_metrics(path)) for path in metrics])
    if out:
        write_report_csv(out, rows)
        logger.info('report with %d rows written to %s', len(rows), out)
    buffer = io.StringIO()
    write_report_csv(buffer, rows)
    click.echo(buffer.getvalue(), nl=False)
