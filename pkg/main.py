import sys
import logging
from functools import wraps
from typing import Iterable, List, Optional

import click
from pydantic import ValidationError

from config import config, load_experiment
from errors import RiseError
import pipeline


# Configure logging
logging.basicConfig(level=getattr(logging, config.LOG_LEVEL.upper(), logging.INFO),
                    format="%(asctime)s %(levelname)s %(name)s: %(message)s")
logger = logging.getLogger(__name__)

ABLATIONS = ("no_ema", "no_cqa", "no_cli_loss")


def handle_errors(func):
    """One line `error: <category>: <message>` on stderr; exit 2 for known failures, 1 otherwise"""
    @wraps(func)
    def wrapper(*args, **kwargs):
        try:
            return func(*args, **kwargs)
        except RiseError as e:
            logger.error(f"{type(e).__name__}: {e}")
            click.echo(f"error: {e.category}: {e}", err=True)
            sys.exit(2)
        except ValidationError as e:
            logger.error(f"Validation failed: {e}")
            click.echo(f"error: invalid-argument: {e.errors()[0]['msg']}", err=True)
            sys.exit(2)
        except Exception as e:
            logger.exception("Unexpected failure")
            click.echo(f"error: internal: {e}", err=True)
            sys.exit(1)
    return wrapper


def experiment_options(func):
    func = click.option("--force", is_flag=True, help="Overwrite outputs written by another config")(func)
    func = click.option("--set", "overrides", multiple=True, metavar="KEY=VALUE",
                        help="Override one config key, e.g. train.q_lower=9")(func)
    func = click.option("--config", "config_path", type=click.Path(dir_okay=False),
                        help="Experiment file (key=value, include= supported)")(func)
    return func


def ablation_options(func):
    func = click.option("--input-mode", type=click.Choice(["artifact", "li", "concat"]),
                        help="MAR network input")(func)
    func = click.option("--ablation", "ablations", multiple=True, type=click.Choice(ABLATIONS),
                        help="Ablation switch, may be repeated")(func)
    return func


def build_config(config_path: Optional[str], overrides: Iterable[str], extra: Iterable[str] = ()):
    cfg = load_experiment(config_path, list(overrides) + list(extra))
    logger.info(f"Loaded experiment config {config_path or '<defaults>'} -> {cfg.output_dir}")
    return cfg


def ablation_overrides(ablations: Iterable[str], input_mode: Optional[str]) -> List[str]:
    extra = [f"train.{flag}=true" for flag in ablations]
    if input_mode:
        extra.append(f"train.input_mode={input_mode}")
    return extra


@click.group()
def cli():
    """Quality-gated self-training for CT metal artifact reduction"""


@cli.command()
@experiment_options
@handle_errors
def simulate(config_path, overrides, force):
    """Synthesize the simulated, clinical and CQA datasets"""
    counts = pipeline.cmd_simulate(build_config(config_path, overrides), force)
    click.echo(" ".join(f"{k}={v}" for k, v in counts.items()))


@cli.command("train-cqa")
@experiment_options
@click.option("--no-dqaug", is_flag=True, help="Disable both DQAug steps")
@click.option("--resume", is_flag=True, help="Continue from the last CQA checkpoint")
@handle_errors
def train_cqa(config_path, overrides, force, no_dqaug, resume):
    """Train the quality assessor on oracle-annotated images"""
    extra = ["cqa_train.dqaug_moderate=false", "cqa_train.dqaug_mixup=false"] if no_dqaug else []
    log, aug_counts = pipeline.cmd_train_cqa(build_config(config_path, overrides, extra), force, resume)
    if log:
        click.echo(f"epoch={log[-1].epoch} srcc={log[-1].srcc:.4f} plcc={log[-1].plcc:.4f} aug={aug_counts}")


@cli.command("train-mar")
@experiment_options
@ablation_options
@click.option("--cqa-checkpoint", type=click.Path(dir_okay=False), help="CQA checkpoint to gate with")
@handle_errors
def train_mar(config_path, overrides, force, ablations, input_mode, cqa_checkpoint):
    """Warm start, then quality-gated self-training"""
    cfg = build_config(config_path, overrides, ablation_overrides(ablations, input_mode))
    run = pipeline.cmd_train_mar(cfg, force, cqa_checkpoint)
    click.echo(f"{run.run_dir} accepted={run.stats.accepted_series}")


@cli.command("eval")
@experiment_options
@ablation_options
@click.option("--checkpoint", type=click.Path(dir_okay=False), help="MAR checkpoint (default: the run's rise.pt)")
@click.option("--cqa-checkpoint", type=click.Path(dir_okay=False), help="CQA checkpoint for quality scores")
@handle_errors
def evaluate(config_path, overrides, force, ablations, input_mode, checkpoint, cqa_checkpoint):
    """Score a MAR checkpoint on the in-domain and out-of-domain test splits"""
    cfg = build_config(config_path, overrides, ablation_overrides(ablations, input_mode))
    pipeline.cmd_eval(cfg, checkpoint, force, cqa_checkpoint)


@cli.command("sweep-q")
@experiment_options
@click.option("--cqa-checkpoint", type=click.Path(dir_okay=False), help="CQA checkpoint to gate with")
@handle_errors
def sweep_q(config_path, overrides, force, cqa_checkpoint):
    """Train and evaluate once per quality range"""
    rows, _ = pipeline.cmd_sweep_q(build_config(config_path, overrides), force, cqa_checkpoint)
    for row in rows:
        click.echo(f"{row.q_range}: psnr_out={row.eval_psnr_out:.2f} accepted={row.final_accepted}")


if __name__ == "__main__":
    cli()
