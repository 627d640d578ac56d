# scorenorm/api/commands.py
import json
import logging
from pathlib import Path
from typing import Any, Dict, Optional

import click
import yaml
from click.core import ParameterSource
from pydantic import ValidationError

from scorenorm.errors import FormatError, ScoreNormError
from scorenorm.models.schemas import Method, RunConfig, Subcommand, TargetLayout
from scorenorm.workers.pipeline import pipeline_executor

logger = logging.getLogger(__name__)

EXPLICIT_SOURCES = (ParameterSource.COMMANDLINE, ParameterSource.ENVIRONMENT)


# ============== Config resolution ==============

def load_config_file(path: Optional[str]) -> Dict[str, Any]:
    """YAML mapping of RunConfig fields; a section named after a subcommand overrides the top level."""
    if path is None:
        return {}
    try:
        document = yaml.safe_load(Path(path).read_text(encoding="utf-8")) or {}
    except yaml.YAMLError as e:
        mark = getattr(e, "problem_mark", None)
        raise FormatError(f"invalid config file: {e}", path, mark.line + 1 if mark else None) from None
    if not isinstance(document, dict):
        raise FormatError("config file must hold a mapping", path)
    return document


def resolve_config(ctx: click.Context, subcommand: Subcommand, **values: Any) -> RunConfig:
    """Built-in defaults, then the config file, then flags given on the command line."""
    document = (ctx.obj or {}).get("file_config", {})
    sections = {s.value for s in Subcommand}
    merged = {k: v for k, v in document.items() if k not in sections}
    merged.update(document.get(subcommand.value) or {})

    for name, value in values.items():
        explicit = ctx.get_parameter_source(name) in EXPLICIT_SOURCES
        if explicit or (name not in merged and value is not None and value != ()):
            merged[name] = list(value) if isinstance(value, tuple) and name == "inputs" else value
    merged["subcommand"] = subcommand
    return RunConfig(**merged)


def run(ctx: click.Context, subcommand: Subcommand, **values: Any) -> Dict[str, Any]:
    """Resolve, execute, and turn library errors into exit codes (2 validation, 3 numerical)."""
    try:
        config = resolve_config(ctx, subcommand, **values)
        return pipeline_executor.execute(config)
    except ValidationError as e:
        click.echo(f"error: {e}", err=True)
        ctx.exit(2)
    except ScoreNormError as e:
        click.echo(f"error: {e.detail}", err=True)
        ctx.exit(e.exit_code)


def common_options(func):
    func = click.option("--seed", type=int, default=None, help="RNG seed.")(func)
    func = click.option("--out", type=click.Path(dir_okay=True), default=None, help="Output path.")(func)
    return func


# ============== Command group ==============

@click.group()
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False), default=None,
              help="YAML file of defaults; flags given on the command line win.")
@click.option("--verbose", "-v", is_flag=True, help="Log at DEBUG level.")
@click.pass_context
def cli(ctx: click.Context, config_path: Optional[str], verbose: bool):
    """Generative and classical score normalization for verification scores."""
    ctx.ensure_object(dict)
    if verbose:
        logging.getLogger().setLevel(logging.DEBUG)
    try:
        ctx.obj["file_config"] = load_config_file(config_path)
    except FormatError as e:
        click.echo(f"error: {e.detail}", err=True)
        ctx.exit(e.exit_code)


@cli.command()
@common_options
@click.option("--params", "params_path", type=click.Path(), default=None, help="YAML/JSON generating params.")
@click.option("--n-matrices", type=int, default=None)
@click.option("--rows", type=int, default=None)
@click.option("--cols", type=int, default=None)
@click.option("--layout", type=click.Choice([l.value for l in TargetLayout]), default=None)
@click.option("--block-size", type=int, default=None)
@click.option("--eval-trials", type=(int, int), default=None, help="Also write an eval set: NTAR NNON trials.")
@click.option("--cohort-size", type=(int, int), default=None, help="Eval cohort sizes N M.")
@click.pass_context
def simulate(ctx: click.Context, **values: Any):
    """Sample score matrices (and optionally an eval set) from LGSM params."""
    result = run(ctx, Subcommand.SIMULATE, **values)
    click.echo(f"wrote {result['matrices']} matrices to {result['out']}")
    if result["eval"]:
        click.echo(f"eval set: {result['eval']['cohort']}, {result['eval']['trials']}")


@cli.command()
@common_options
@click.argument("inputs", nargs=-1, type=click.Path())
@click.option("--dim", type=int, default=None, help="Hidden dimension d.")
@click.option("--tol", type=float, default=None)
@click.option("--max-iters", type=int, default=None)
@click.pass_context
def train(ctx: click.Context, **values: Any):
    """Fit LGSM params by EM on score-matrix files or simulate manifests."""
    result = run(ctx, Subcommand.TRAIN, **values)
    click.echo(f"{'class':<8}{'sigma2':>14}{'nu':>14}{'total':>14}")
    for row in result["table"]:
        click.echo(f"{row['class']:<8}{row['sigma2']:>14.6g}{row['nu']:>14.6g}{row['total']:>14.6g}")
    status = "converged" if result["converged"] else "NOT converged"
    click.echo(f"final objective {result['final_objective']:.10g} ({status}, {result['iterations']} iterations)")
    click.echo(f"model: {result['model']}")


@cli.command()
@common_options
@click.option("--method", type=click.Choice([m.value for m in Method]), default=None)
@click.option("--model", "model_path", type=click.Path(), default=None)
@click.option("--cohort", "cohort_path", type=click.Path(), default=None)
@click.option("--trials", "trials_path", type=click.Path(), default=None)
@click.option("--prior", type=float, default=None)
@click.option("--posterior", is_flag=True, help="Add the target posterior at --prior.")
@click.pass_context
def normalize(ctx: click.Context, **values: Any):
    """Normalize trial scores with a classical method or a trained LGSM."""
    result = run(ctx, Subcommand.NORMALIZE, **values)
    click.echo(f"{result['method']}: {result['trials'] - result['failed']}/{result['trials']} trials -> {result['out']}")


@cli.command(name="eval")
@common_options
@click.argument("inputs", nargs=-1)
@click.option("--prior", type=float, default=None)
@click.pass_context
def eval_command(ctx: click.Context, **values: Any):
    """Metrics per score file; inputs are PATH or NAME=PATH."""
    result = run(ctx, Subcommand.EVAL, **values)
    click.echo(f"{'method':<12}{'EER':>10}{'Cllr':>10}{'minCllr':>10}{'actDCF':>10}{'minDCF':>10}")
    for row in result["comparison"]:
        click.echo(
            f"{row['method']:<12}{row['eer']:>10.4f}{row['cllr']:>10.4f}{row['min_cllr']:>10.4f}"
            f"{row['act_dcf']:>10.4f}{row['min_dcf']:>10.4f}"
        )
    click.echo(f"report: {result['report']}")


@cli.command(name="inspect-model")
@click.argument("inputs", nargs=-1, type=click.Path())
@click.pass_context
def inspect_model(ctx: click.Context, **values: Any):
    """Print params, variance split and training metadata of model files."""
    result = run(ctx, Subcommand.INSPECT_MODEL, **values)
    click.echo(json.dumps(result["models"], indent=2))
