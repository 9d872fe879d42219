"""Command-line entry point: ``vrb <command> [flags]``.

Every command prints one ``key=value`` summary line on success. Exit status
is 0 on success, 2 on usage errors and 1 on runtime errors. ``VRB_LOG``
(error, info or debug) sets log verbosity on standard error.
"""

from __future__ import annotations

import csv
import logging
import os
import sys
from pathlib import Path

import click

from .config import TrainConfig, dump_config, load_config, with_overrides
from .env import World, toy_world
from .env.corpus import generate_corpus, write_corpus
from .errors import ConfigurationError, VrbError
from .gradcheck import gradient_suite
from .numcore import rng_stream
from .trainer import (
    EVAL_STREAM_BASE,
    METRIC_COLUMNS,
    ablation_compare,
    ablation_csv,
    evaluate_policy,
    final_evaluation,
    load_checkpoint,
    load_expert_sessions,
    load_world,
    save_checkpoint,
    train,
)

LOG_LEVELS = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}
GRADCHECK_TOL = 1e-4


def summary(**items) -> None:
    click.echo(" ".join(f"{k}={v!r}" if isinstance(v, float) else f"{k}={v}" for k, v in items.items()))


def build_config(config_path, **flags) -> TrainConfig:
    """Defaults, then the config file, then explicit flags."""
    cfg = load_config(config_path) if config_path else TrainConfig()
    keys = {
        "seed": "seed", "iterations": "iterations", "sessions": "sessions_per_iteration",
        "phi": "vrb.phi", "ic": "vrb.i_c", "adaptive_phi": "vrb.adaptive_phi", "variant": "variant",
        "corpus": "env.corpus_path", "schema": "env.schema_path",
    }
    overrides = {keys[k]: v for k, v in flags.items() if v is not None}
    return with_overrides(cfg, overrides)


def world_for(schema) -> World:
    return World.load(schema) if schema else toy_world()


config_opt = click.option("--config", "config_path", type=click.Path(dir_okay=False), help="Dotted-key TOML file.")
seed_opt = click.option("--seed", type=click.IntRange(0, 2**64 - 1), help="Master seed.")
corpus_opt = click.option("--corpus", type=click.Path(dir_okay=False), help="Expert corpus file.")
schema_opt = click.option("--schema", type=click.Path(dir_okay=False), help="World JSON; built-in toy world if absent.")


def training_options(fn):
    for opt in reversed([
        config_opt, seed_opt, corpus_opt, schema_opt,
        click.option("--iterations", type=click.IntRange(0), help="Training iterations."),
        click.option("--sessions", type=click.IntRange(1), help="Rollout sessions per iteration."),
        click.option("--phi", type=click.FloatRange(0), help="Lagrange multiplier."),
        click.option("--ic", type=click.FloatRange(0, min_open=True), help="Information bound."),
        click.option("--adaptive-phi", type=bool, help="Dual ascent on the multiplier."),
        click.option("--variant", type=click.Choice(["vrb", "airl"]), help="Estimator objective."),
    ]):
        fn = opt(fn)
    return fn


@click.group(context_settings={"help_option_names": ["-h", "--help"]})
def cli():
    """Variational reward bottleneck: adversarial reward learning for dialog policies."""


@cli.command("gen-corpus")
@click.option("--out", required=True, type=click.Path(dir_okay=False), help="Corpus file to write.")
@config_opt
@seed_opt
@schema_opt
@click.option("--sessions", type=click.IntRange(1), help="Number of expert sessions.")
def gen_corpus(out, config_path, seed, schema, sessions):
    """Generate an expert corpus by expert self-play."""
    cfg = build_config(config_path, schema=schema)
    world = load_world(cfg)
    n = sessions or cfg.env.corpus_sessions
    s = cfg.env.corpus_seed if seed is None else seed
    corpus = generate_corpus(world, n, rng_stream(s, 0), cfg.env.goal, cfg.env.turn_cap)
    write_corpus(out, world, corpus)
    summary(command="gen-corpus", sessions=n, transitions=sum(len(x.turns) for x in corpus),
            schema_hash=world.schema_hash, out=out)


@cli.command("train")
@training_options
@click.option("--out", required=True, type=click.Path(file_okay=False), help="Output directory.")
def train_cmd(out, config_path, **flags):
    """Train a dialog policy and write report, evaluation and checkpoint files."""
    cfg = build_config(config_path, **flags)
    world = load_world(cfg)
    ck, report = train(cfg, world, load_expert_sessions(cfg, world))
    out_dir = Path(out)
    report.write(out_dir)
    save_checkpoint(ck, out_dir / "checkpoint.vrbc")
    (out_dir / "config.toml").write_text(dump_config(cfg), encoding="utf-8")
    m = final_evaluation(ck, world)
    summary(command="train", iterations=ck.iteration, seed=cfg.seed, variant=cfg.variant,
            **{c: getattr(m, c) for c in METRIC_COLUMNS}, out=out)


@cli.command("eval")
@click.argument("checkpoint", type=click.Path(dir_okay=False))
@seed_opt
@schema_opt
@click.option("--sessions", type=click.IntRange(1), help="Evaluation sessions.")
@click.option("--out", type=click.Path(file_okay=False), help="Directory for metrics.csv.")
def eval_cmd(checkpoint, seed, schema, sessions, out):
    """Score a checkpoint's greedy policy against the user simulator."""
    ck = load_checkpoint(checkpoint)
    world = world_for(schema) if schema else load_world(ck.config)
    n = sessions or ck.config.eval_sessions
    s = ck.config.seed if seed is None else seed
    m = evaluate_policy(ck, world, n, rng_stream(s, EVAL_STREAM_BASE - 1))
    if out:
        Path(out).mkdir(parents=True, exist_ok=True)
        with open(Path(out) / "metrics.csv", "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            row = m.as_dict()
            w.writerow(row)
            w.writerow([repr(v) if isinstance(v, float) else v for v in row.values()])
    summary(command="eval", sessions=m.session_count, **{c: getattr(m, c) for c in METRIC_COLUMNS})


@cli.command("ablate")
@training_options
@click.option("--seeds", type=click.IntRange(1), default=10, show_default=True, help="Number of seeds per variant.")
@click.option("--out", required=True, type=click.Path(file_okay=False), help="Output directory.")
def ablate(out, seeds, config_path, **flags):
    """Train both objectives over the same seeds and tabulate final metrics."""
    flags.pop("variant", None)
    cfg = build_config(config_path, **flags)
    world = load_world(cfg)
    seed_list = [cfg.seed + i for i in range(seeds)]
    table = ablation_compare(cfg, seed_list, world, load_expert_sessions(cfg, world))
    out_dir = Path(out)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "ablation.csv").write_text(ablation_csv(table), encoding="utf-8")
    with open(out_dir / "ablation_per_seed.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["variant", "seed", *METRIC_COLUMNS])
        for name, reports in table["per_seed"].items():
            for s, m in zip(seed_list, reports):
                w.writerow([name, s, *(repr(float(getattr(m, c))) for c in METRIC_COLUMNS)])
    rows = {r["variant"]: r for r in table["rows"]}
    summary(command="ablate", seeds=seeds, vrb_success=rows["vrb"]["success_rate"],
            airl_success=rows["airl"]["success_rate"], out=out)


@cli.command("gradcheck")
@seed_opt
def gradcheck(seed):
    """Compare analytic loss gradients with central finite differences."""
    results = gradient_suite(seed=seed or 0)
    worst = max(r.rel_error for r in results)
    summary(command="gradcheck", instances=len(results), max_rel_error=worst, tolerance=GRADCHECK_TOL)
    if not worst < GRADCHECK_TOL:
        raise click.exceptions.Exit(1)


@cli.command("report")
@click.argument("run_dir", type=click.Path(file_okay=False))
@click.option("--out", required=True, type=click.Path(file_okay=False), help="Directory for plot-data files.")
def report(run_dir, out):
    """Turn a run's CSV files into per-metric x/y series files."""
    out_dir = Path(out)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = 0
    for prefix, name in (("train", "report.csv"), ("eval", "eval.csv")):
        src = Path(run_dir) / name
        if not src.exists():
            raise FileNotFoundError(f"missing run file: {src}")
        with open(src, newline="", encoding="utf-8") as fh:
            rows = list(csv.DictReader(fh))
        columns = [c for c in (rows[0].keys() if rows else []) if c != "iteration"]
        for col in columns:
            lines = ["# iteration " + col] + [f"{r['iteration']} {r[col]}" for r in rows]
            (out_dir / f"{prefix}_{col}.dat").write_text("\n".join(lines) + "\n", encoding="utf-8")
            written += 1
    summary(command="report", series=written, out=out)


def _setup_logging() -> None:
    level = os.environ.get("VRB_LOG", "error").strip().lower()
    if level not in LOG_LEVELS:
        raise click.UsageError(f"VRB_LOG must be one of {', '.join(LOG_LEVELS)}, got {level!r}")
    logging.basicConfig(level=LOG_LEVELS[level], stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s",
                        force=True)


def main(argv=None) -> int:
    try:
        _setup_logging()
        rv = cli.main(args=argv, prog_name="vrb", standalone_mode=False)
    except click.UsageError as exc:
        exc.show()
        return 2
    except ConfigurationError as exc:
        click.echo(f"Error: {exc}", err=True)
        return 2
    except click.exceptions.Exit as exc:
        return exc.exit_code
    except click.exceptions.Abort:
        click.echo("Aborted.", err=True)
        return 1
    except (VrbError, OSError) as exc:
        click.echo(f"Error: {exc}", err=True)
        return 1
    return rv if isinstance(rv, int) else 0


if __name__ == "__main__":
    sys.exit(main())
