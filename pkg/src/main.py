import logging
import os
import sys
# DON'T CHANGE THIS !!!
sys.path.insert(0, os.path.dirname(os.path.dirname(__file__)))

import click

from src.commands.ablate import ablate_cmd
from src.commands.eval import eval_cmd
from src.commands.report import report_cmd
from src.commands.train import train_cmd

LOG_FORMAT = '%(asctime)s %(levelname)s %(name)s: %(message)s'


@click.group()
@click.option('--log-level', envvar='CATF_LOG_LEVEL', default='INFO', show_default=True,
              type=click.Choice(['DEBUG', 'INFO', 'WARNING', 'ERROR'], case_sensitive=False))
def cli(log_level):
    """Class-incremental training and gated inference for a desk-scale spiking transformer."""
    logging.basicConfig(level=getattr(logging, log_level.upper()), format=LOG_FORMAT, force=True)


# Register commands
cli.add_command(train_cmd)
cli.add_command(eval_cmd)
cli.add_command(ablate_cmd)
cli.add_command(report_cmd)


if __name__ == '__main__':
    cli()
