import logging
import re
from pathlib import Path

import click

from src.commands.common import COMMAND_SETTINGS, handle_errors, load_task_sequence, run_lock
from src.config import RunConfig
from src.engine.router import evaluate, forgetting_profile
from src.errors import CheckpointFormatError
from src.storage.checkpoint import load_checkpoint
from src.storage.metrics import MetricsRecord, MetricsWriter

logger = logging.getLogger(__name__)

TASK_CHECKPOINT = re.compile(r'^task_(\d+)\.catf$')


def task_checkpoints(directory):
    """task id -> checkpoint path for every ``task_<k>.catf`` in ``directory``."""
    found = {}
    for path in Path(directory).glob('task_*.catf'):
        match = TASK_CHECKPOINT.match(path.name)
        if match:
            found[int(match.group(1))] = path
    return dict(sorted(found.items()))


def latest_checkpoint(out_dir):
    found = task_checkpoints(Path(out_dir) / 'checkpoints')
    if not found:
        raise CheckpointFormatError(f'no task checkpoints under {out_dir}/checkpoints')
    return found[max(found)]


def evaluation_records(config, checkpoint=None):
    """Per-task, overall and forgetting-profile eval records for one checkpoint."""
    checkpoint = Path(checkpoint) if checkpoint else latest_checkpoint(config.out_dir)
    model, run_config = load_checkpoint(checkpoint)
    seq = load_task_sequence(run_config)
    workers = config['eval.workers']
    seed = run_config['run.seed']
    bank_bytes = model.bank.bytes_per_task
    seen = [t for t in seq.tasks if t.task_id in model.heads.finalized]

    routed, oracle = evaluate(seen, model, workers)
    records = [
        MetricsRecord('eval', task=t.task_id, acc=routed.per_task_acc[t.task_id],
                      routing_acc=routed.per_task_routing[t.task_id], oracle_acc=oracle.per_task_acc[t.task_id],
                      scope='task', bank_bytes=bank_bytes, seed=seed)
        for t in seen
    ]
    records.append(MetricsRecord('eval', acc=routed.overall_acc, routing_acc=routed.routing_acc,
                                 oracle_acc=oracle.overall_acc, scope='overall', num_tasks=len(seq),
                                 bank_bytes=bank_bytes, seed=seed))

    for task, path in task_checkpoints(checkpoint.parent).items():
        if task > max(model.heads.finalized):
            continue
        snapshot = model if path.resolve() == checkpoint.resolve() else load_checkpoint(path)[0]
        for point in forgetting_profile(task, seq.tasks, snapshot, workers):
            records.append(MetricsRecord('eval', task=point.task, acc=point.acc, routing_acc=point.routing_acc,
                                         oracle_acc=point.oracle_acc, scope='forgetting', after_task=task,
                                         bank_bytes=bank_bytes, seed=seed))
    return records


def eval_out_dir(config, checkpoint=None):
    # an explicit checkpoint reports into its own run unless run.out_dir was given
    if checkpoint and 'run.out_dir' not in config.explicit:
        return Path(checkpoint).resolve().parent.parent
    return config.out_dir


@click.command('eval', context_settings=COMMAND_SETTINGS)
@click.option('--checkpoint', type=click.Path(dir_okay=False), default=None,
              help='defaults to the newest task checkpoint under run.out_dir; records go to its run directory')
@click.option('--config', 'config_file', type=click.Path(exists=True, dir_okay=False), default=None)
@click.pass_context
@handle_errors('Evaluation')
def eval_cmd(ctx, checkpoint, config_file):
    """Gated inference over every finalized task of a checkpoint."""
    config = RunConfig.resolve(config_file, ctx.args)
    records = evaluation_records(config, checkpoint)
    out_dir = eval_out_dir(config, checkpoint)
    with run_lock(out_dir):
        writer = MetricsWriter(out_dir / 'metrics.jsonl')
        for record in records:
            writer.write(record)
            click.echo(record.to_json())
