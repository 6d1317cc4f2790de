"""Command-line entry point: one subcommand per pipeline stage."""

from __future__ import annotations

import json
import logging
import sys
from functools import wraps

import click

from . import evalkit, pipeline
from .evalkit import K_GRID, LAMBDA_GRID
from .model import MODES
from .profiler import EmbeddingError

# exit codes
EXIT_CONFIG, EXIT_MISSING, EXIT_MISMATCH, EXIT_EMBEDDING, EXIT_OTHER = 2, 3, 4, 5, 1


def _fail(code: int, kind: str, message: str, **extra):
    click.echo(json.dumps({"error": kind, "message": message, **extra}, sort_keys=True), err=True)
    sys.exit(code)


def _guard(fn):
    @wraps(fn)
    def inner(*a, **kw):
        try:
            return fn(*a, **kw)
        except pipeline.MissingArtifactError as e:
            _fail(EXIT_MISSING, "missing_artifact", str(e), stage=e.stage, path=e.path)
        except pipeline.ConfigMismatchError as e:
            _fail(EXIT_MISMATCH, "config_mismatch", str(e))
        except EmbeddingError as e:
            _fail(EXIT_EMBEDDING, "embedding", str(e), user_id=e.user_id)
        except (pipeline.ConfigError, ValueError) as e:
            _fail(EXIT_CONFIG, "config", str(e))
    return inner


def common(fn):
    fn = click.option("--config", "config_path", type=click.Path(dir_okay=False), default=None,
                      help="YAML or JSON run config with flat keys.")(fn)
    fn = click.option("--seed", type=int, default=None, help="Root seed (overrides the config).")(fn)
    fn = click.option("--override", "overrides", multiple=True, metavar="KEY=VALUE",
                      help="Override one config key; repeatable.")(fn)
    fn = click.option("--offline/--online", default=None,
                      help="Force the stub encoder (--offline) or the embedding service (--online).")(fn)
    fn = click.option("--allow-mismatch", is_flag=True,
                      help="Proceed when upstream artifacts were built from a different config.")(fn)
    return fn


def _cfg(config_path, seed, overrides, offline) -> pipeline.RunConfig:
    ov = dict(pipeline.parse_override(o) for o in overrides)
    if seed is not None:
        ov["seed"] = seed
    if offline is not None:
        ov["offline"] = offline
    return pipeline.RunConfig.load(config_path, ov)


def _mode(cfg, mode):
    mode = mode or cfg["model_mode"]
    if mode not in MODES:
        raise pipeline.ConfigError(f"unknown mode {mode!r}; expected one of {list(MODES)}")
    return mode


mode_option = click.option("--mode", default=None, help=f"Model mode: {', '.join(MODES)}.")
plot_option = click.option("--plot-data", type=click.Path(dir_okay=False), default=None,
                           help="Write (x, y) series for plotting as line-delimited JSON.")


@click.group()
@click.option("-v", "--verbose", is_flag=True, help="Log progress to stderr.")
def main(verbose):
    """Semantic user grouping and dual-channel conversion modelling on a synthetic world."""
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(message)s")


@main.command()
def config():
    """Print every config key with its default."""
    click.echo(pipeline.describe_defaults())


@main.command()
@common
@_guard
def synth(config_path, seed, overrides, offline, allow_mismatch):
    """Generate the synthetic world."""
    click.echo(pipeline.run_synth(_cfg(config_path, seed, overrides, offline)))


@main.command()
@common
@_guard
def profile(config_path, seed, overrides, offline, allow_mismatch):
    """Write profile texts and semantic embeddings."""
    click.echo(pipeline.run_profile(_cfg(config_path, seed, overrides, offline), allow_mismatch))


@main.command()
@common
@_guard
def group(config_path, seed, overrides, offline, allow_mismatch):
    """Fit RQ-KMeans codebooks and assign group codes."""
    click.echo(pipeline.run_group(_cfg(config_path, seed, overrides, offline), allow_mismatch))


@main.command()
@common
@_guard
def priors(config_path, seed, overrides, offline, allow_mismatch):
    """Build group attribute priors and group sequences."""
    click.echo(pipeline.run_priors(_cfg(config_path, seed, overrides, offline), allow_mismatch))


@main.command()
@common
@mode_option
@_guard
def train(config_path, seed, overrides, offline, allow_mismatch, mode):
    """Train one model mode."""
    cfg = _cfg(config_path, seed, overrides, offline)
    click.echo(pipeline.run_train(cfg, _mode(cfg, mode), allow_mismatch))


@main.command(name="eval")
@common
@mode_option
@plot_option
@click.option("--json", "as_json", is_flag=True, help="Print the report as one JSON line.")
@_guard
def eval_(config_path, seed, overrides, offline, allow_mismatch, mode, plot_data, as_json):
    """Evaluate a trained mode and print its MetricReport."""
    cfg = _cfg(config_path, seed, overrides, offline)
    rep = pipeline.run_eval(cfg, _mode(cfg, mode), allow_mismatch)
    click.echo(rep.to_json() if as_json else rep.render())
    if plot_data:
        evalkit.write_jsonl(evalkit.level_series(rep), plot_data)


@main.command()
@common
@plot_option
@click.option("--rows", default=None, help="Comma-separated modes to run (default: every ablation row).")
@_guard
def ablate(config_path, seed, overrides, offline, allow_mismatch, plot_data, rows):
    """Train every ablation mode on shared data and print GAUC deltas vs the full model."""
    cfg = _cfg(config_path, seed, overrides, offline)
    exp = pipeline.Experiment.from_artifacts(cfg, allow_mismatch)
    table = exp.ablations(rows.split(",") if rows else None)
    d = pipeline.stage_dir(cfg, "ablate")
    d.mkdir(parents=True, exist_ok=True)
    evalkit.write_jsonl(table.records(), d / "ablation.jsonl")
    reports = [r for _, r in sorted(exp._models.items(), key=lambda kv: str(kv[0]))]
    evalkit.write_jsonl([rep.to_dict() for _, rep in reports], d / "reports.jsonl")
    (d / "ablation.txt").write_text(table.render() + "\n")
    pipeline.write_manifest(d, "ablate", cfg, {"embeddings.jsonl": pipeline.stage_dir(cfg, "profile") / "embeddings.jsonl"})
    click.echo(table.render())
    if plot_data:
        evalkit.write_jsonl([s for _, rep in reports for s in evalkit.level_series(rep)], plot_data)


@main.command()
@common
@plot_option
@click.option("--param", type=click.Choice(["k", "lambda", "both"]), default="both")
@_guard
def sweep(config_path, seed, overrides, offline, allow_mismatch, plot_data, param):
    """Sweep k over {4, 8, 16, 32} and lambda over {0, 0.001, 0.005, 0.02, 0.1}."""
    cfg = _cfg(config_path, seed, overrides, offline)
    exp = pipeline.Experiment.from_artifacts(cfg, allow_mismatch)
    results = []
    if param in ("k", "both"):
        results.append(exp.k_sweep(K_GRID))
    if param in ("lambda", "both"):
        results.append(exp.lambda_sweep(LAMBDA_GRID))
    d = pipeline.stage_dir(cfg, "sweep")
    d.mkdir(parents=True, exist_ok=True)
    evalkit.write_jsonl([r for s in results for r in s.records()], d / "sweep.jsonl")
    (d / "sweep.txt").write_text("\n\n".join(s.render() for s in results) + "\n")
    pipeline.write_manifest(d, "sweep", cfg, {"embeddings.jsonl": pipeline.stage_dir(cfg, "profile") / "embeddings.jsonl"})
    click.echo("\n\n".join(s.render() for s in results))
    if plot_data:
        evalkit.write_jsonl([p for s in results for p in evalkit.sweep_series(s)], plot_data)


@main.command()
@common
@mode_option
@_guard
def run(config_path, seed, overrides, offline, allow_mismatch, mode):
    """Run synth, profile, group, priors, train and eval in sequence."""
    cfg = _cfg(config_path, seed, overrides, offline)
    mode = _mode(cfg, mode)
    pipeline.run_synth(cfg)
    pipeline.run_profile(cfg, allow_mismatch)
    pipeline.run_group(cfg, allow_mismatch)
    pipeline.run_priors(cfg, allow_mismatch)
    if mode == "no_llm_emb":
        pipeline.run_train(cfg, "individual_only", allow_mismatch)
    pipeline.run_train(cfg, mode, allow_mismatch)
    click.echo(pipeline.run_eval(cfg, mode, allow_mismatch).render())


if __name__ == "__main__":
    main()
