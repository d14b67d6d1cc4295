import json
import logging

import click

from src.commands.common import COMMAND_SETTINGS, execute_training, handle_errors
from src.config import RunConfig

logger = logging.getLogger(__name__)


@click.command('train', context_settings=COMMAND_SETTINGS)
@click.option('--config', 'config_file', type=click.Path(exists=True, dir_okay=False), default=None,
              help='key = value config file')
@click.pass_context
@handle_errors('Training')
def train_cmd(ctx, config_file):
    """Run every task of the protocol. Extra ``--key value`` flags override config keys."""
    config = RunConfig.resolve(config_file, ctx.args)
    model, seq = execute_training(config)
    click.echo(json.dumps({
        'out_dir': str(config.out_dir),
        'tasks': len(seq),
        'bank_bytes': model.bank.bytes_per_task,
        'model': model.to_dict(),
    }))
