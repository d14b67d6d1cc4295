import contextlib
import json
import logging
import os
import sys
from functools import wraps
from pathlib import Path

import click

from src.data.datasets import (
    events_to_frames,
    holdout_split,
    make_splits,
    synth_clusters,
    synth_events,
)
from src.data.idx import idx_load
from src.engine.protocol import run_protocol
from src.errors import CATFError, ConfigError
from src.models.catformer import CATFormer
from src.storage.checkpoint import save_checkpoint
from src.storage.metrics import MetricsWriter

logger = logging.getLogger(__name__)

COMMAND_SETTINGS = {'ignore_unknown_options': True, 'allow_extra_args': True}
LOCK_NAME = '.lock'


def handle_errors(action):
    """Report failures as a JSON error line on stderr and exit with the error's code."""
    def decorator(f):
        @wraps(f)
        def decorated(*args, **kwargs):
            try:
                return f(*args, **kwargs)
            except CATFError as e:
                click.echo(json.dumps({'error': f'{action} failed: {e}'}), err=True)
                sys.exit(e.exit_code)
            except (click.exceptions.Exit, click.Abort, click.ClickException):
                raise
            except Exception as e:
                logger.exception('%s failed', action)
                click.echo(json.dumps({'error': f'{action} failed: {e}'}), err=True)
                sys.exit(1)
        return decorated
    return decorator


@contextlib.contextmanager
def run_lock(out_dir):
    """Exclusive ownership of ``out_dir`` for one run."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    lock = out_dir / LOCK_NAME
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise ConfigError(f'{out_dir} is locked by another run (remove {lock} if it is stale)') from None
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield out_dir
    finally:
        lock.unlink(missing_ok=True)


def checkpoint_path(out_dir, task):
    return Path(out_dir) / 'checkpoints' / f'task_{task}.catf'


def load_task_sequence(config):
    """Training and test data for every task, as the config's data.source describes."""
    source = config['data.source']
    split = config.split_spec()
    held_out = config['data.test_per_class']
    if source == 'synth':
        dataset = synth_clusters(config.synthetic_spec())
        train, test = holdout_split(dataset, held_out, config['run.seed'])
    elif source == 'events':
        model = config.model_config()
        dataset = synth_events(split.total_classes, model.timesteps, config['data.event_channels'],
                               config['run.seed'], config['data.samples_per_class'] + held_out)
        train, test = holdout_split(events_to_frames(dataset, model.image_size), held_out, config['run.seed'])
    else:
        if not config['data.train_images'] or not config['data.train_labels']:
            raise ConfigError('data.source = idx needs data.train_images and data.train_labels')
        train = idx_load(config['data.train_images'], config['data.train_labels'])
        if config['data.test_images']:
            test = idx_load(config['data.test_images'], config['data.test_labels'])
        else:
            train, test = holdout_split(train, held_out, config['run.seed'])
        model = config.model_config()
        expected = (model.in_channels, model.image_size, model.image_size)
        if train.x.shape[1:] != expected:
            raise ConfigError(f'IDX images are {train.x.shape[1:]}, model expects {expected}')
    seq = make_splits(train, split, test)
    logger.info('%s data: %d tasks of %d classes, %d train / %d test samples',
                source, len(seq), seq.classes_per_task, len(train), len(test))
    return seq


def build_model(config, seq):
    return CATFormer(
        config.model_config(),
        seq.classes_per_task,
        seed=config['run.seed'],
        buffer_cap=config['train.buffer_cap'],
        fixed_threshold=config['model.fixed_threshold'],
    )


def execute_training(config):
    """Full protocol run into ``config.out_dir``; returns the trained model and its tasks."""
    out_dir = config.out_dir
    with run_lock(out_dir):
        (out_dir / 'config.resolved').write_text(config.to_text(), encoding='utf-8')
        metrics = out_dir / 'metrics.jsonl'
        metrics.unlink(missing_ok=True)
        writer = MetricsWriter(metrics)
        seq = load_task_sequence(config)
        model = build_model(config, seq)

        def on_task_done(task):
            save_checkpoint(checkpoint_path(out_dir, task), model, config)

        run_protocol(
            model,
            seq,
            config.train_config(),
            emit=writer,
            on_task_done=on_task_done,
            warm_start=config['model.warm_start'],
            workers=config['eval.workers'],
            corrupt_at_task=config['debug.corrupt_frozen_at_task'],
        )
    return model, seq
