import json
import logging

import click

from src.commands.common import COMMAND_SETTINGS, execute_training, handle_errors, run_lock
from src.commands.eval import evaluation_records
from src.config import RunConfig
from src.errors import ConfigError
from src.storage.metrics import MetricsRecord, MetricsWriter

logger = logging.getLogger(__name__)

VARIANTS = {
    'full': {},
    'fixed_threshold': {'model.fixed_threshold': True},
    'identity': {'model.mixer_mode': 'identity'},
    'random': {'model.mixer_mode': 'random'},
    'ffn_frozen': {'model.ffn_trainable': False},
}


def variant_config(config, variant):
    if variant not in VARIANTS:
        raise ConfigError(f"unknown ablation variant {variant!r}; expected one of {', '.join(VARIANTS)}")
    overrides = dict(VARIANTS[variant])
    overrides['run.out_dir'] = str(config.out_dir / variant)
    return config.replace(overrides)


def run_ablation(config, variant):
    """Train and evaluate one variant; returns its summary records (overall, then task 0)."""
    config = variant_config(config, variant)
    logger.info('ablation %s into %s', variant, config.out_dir)
    execute_training(config)
    records = evaluation_records(config)
    overall = next(r for r in records if r.scope == 'overall')
    first = next(r for r in records if r.scope == 'task' and r.task == 0)
    summary = [
        MetricsRecord('eval', acc=overall.acc, routing_acc=overall.routing_acc, oracle_acc=overall.oracle_acc,
                      scope='ablation', num_tasks=overall.num_tasks, bank_bytes=overall.bank_bytes,
                      seed=overall.seed),
        MetricsRecord('eval', task=0, acc=first.acc, routing_acc=first.routing_acc, oracle_acc=first.oracle_acc,
                      scope='ablation', num_tasks=overall.num_tasks, bank_bytes=first.bank_bytes, seed=first.seed),
    ]
    with run_lock(config.out_dir):
        writer = MetricsWriter(config.out_dir / 'metrics.jsonl')
        for record in records + summary:
            writer.write(record)
    return summary


@click.command('ablate', context_settings=COMMAND_SETTINGS)
@click.argument('variant')
@click.option('--config', 'config_file', type=click.Path(exists=True, dir_okay=False), default=None)
@click.pass_context
@handle_errors('Ablation')
def ablate_cmd(ctx, variant, config_file):
    """Train and evaluate VARIANT: full, fixed_threshold, identity, random or ffn_frozen."""
    config = RunConfig.resolve(config_file, ctx.args)
    for record in run_ablation(config, variant):
        click.echo(json.dumps({'variant': variant, **record.to_dict()}))
