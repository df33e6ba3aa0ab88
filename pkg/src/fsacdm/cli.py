"""Command-line entry points: corpus, train, sample, eval, verify-bounds, gradcheck.

Exit codes: 0 success, 2 bad configuration or input, 3 numeric failure,
4 I/O or checkpoint failure.
"""

from __future__ import annotations

import functools
import os
import sys
from pathlib import Path

import click
import numpy as np

from . import bounds, gradsuite, metrics, training
from .checkpoint import CheckpointError, load_into_model
from .config import ConfigError, load_config
from .corpus import ParseError, generate, tokenize, write_corpus, write_pgm
from .encoders import VocabError
from .numerics import NumericsError, stream

EXIT_CONFIG = 2
EXIT_NUMERIC = 3
EXIT_IO = 4


def _guarded(fn):
    """Map library exceptions onto the documented exit codes."""

    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except ConfigError as exc:
            click.echo(f"config error: {exc}", err=True)
            sys.exit(EXIT_CONFIG)
        except (ParseError, VocabError, ValueError) as exc:
            click.echo(f"input error: {exc}", err=True)
            sys.exit(EXIT_CONFIG)
        except NumericsError as exc:
            click.echo(f"numeric failure: {exc}", err=True)
            sys.exit(EXIT_NUMERIC)
        except CheckpointError as exc:
            click.echo(f"checkpoint error: {exc}", err=True)
            sys.exit(EXIT_IO)
        except OSError as exc:
            click.echo(f"i/o error: {exc}", err=True)
            sys.exit(EXIT_IO)

    return wrapper


@click.group()
@click.option("--config", "config_path", type=click.Path(), default=None,
              help="JSON run configuration; defaults are used when omitted.")
@click.option("--seed", type=int, default=None, help="Override the config seed.")
@click.pass_context
def main(ctx, config_path, seed):
    """Markup-to-image diffusion toolkit."""
    ctx.obj = {"config_path": config_path, "seed": seed}


def _load_cfg(ctx, **overrides):
    if ctx.obj["seed"] is not None:
        overrides.setdefault("seed", ctx.obj["seed"])
    return load_config(ctx.obj["config_path"], environ=os.environ, **overrides)


@main.command("corpus")
@click.option("--out", "out_dir", type=click.Path(), default=None,
              help="Output directory (default: config corpus_dir).")
@click.option("--count", type=int, default=None, help="Documents to generate.")
@click.pass_context
@_guarded
def cmd_corpus(ctx, out_dir, count):
    """Generate the synthetic markup corpus with rendered ground truth."""
    overrides = {}
    if out_dir is not None:
        overrides["corpus_dir"] = out_dir
    if count is not None:
        overrides["corpus_count"] = count
    cfg = _load_cfg(ctx, **overrides)
    docs = generate(cfg.seed, cfg.corpus_count)
    write_corpus(cfg.corpus_dir, docs)
    click.echo(f"wrote {len(docs)} documents to {cfg.corpus_dir}")


@main.command("train")
@click.option("--out", "out_dir", type=click.Path(), default=None,
              help="Run directory (default: config run_dir).")
@click.option("--resume", type=click.Path(), default=None,
              help="Checkpoint to resume from.")
@click.option("--steps", type=int, default=None, help="Override step count.")
@click.option("--threads", type=int, default=None, help="Torch thread count.")
@click.pass_context
@_guarded
def cmd_train(ctx, out_dir, resume, steps, threads):
    """Train on the generated corpus, logging every loss component."""
    overrides = {}
    if out_dir is not None:
        overrides["run_dir"] = out_dir
    if steps is not None:
        overrides["steps"] = steps
    if threads is not None:
        overrides["threads"] = threads
    cfg = _load_cfg(ctx, **overrides)
    result = training.train(cfg, resume=resume)
    click.echo(f"ran {result.steps_run} steps; log {result.log_path}; "
               f"checkpoint {result.checkpoint_path}")
    click.echo(f"total: first={result.first_total!r} last={result.last_total!r}")


@main.command("sample")
@click.argument("markup_text")
@click.option("--checkpoint", "ckpt", type=click.Path(), required=True,
              help="Trained model checkpoint (.fsac).")
@click.option("--out", "out_path", type=click.Path(), default="sample.pgm",
              help="Output PGM path.")
@click.pass_context
@_guarded
def cmd_sample(ctx, markup_text, ckpt, out_path):
    """Generate an image for MARKUP_TEXT using a trained checkpoint."""
    cfg = _load_cfg(ctx)
    tokens = tokenize(markup_text)
    model = training.build_model(cfg)
    load_into_model(ckpt, model)
    out = training.sample_documents(model, cfg, [tuple(tokens)])
    write_pgm(out_path, out[0].numpy())
    click.echo(f"wrote {out_path}")


@main.command("eval")
@click.argument("generated_dir", type=click.Path())
@click.argument("reference_dir", type=click.Path())
@click.option("--out", "csv_path", type=click.Path(), default="metrics.csv",
              help="Per-image metric CSV path.")
@click.option("--allow-partial", is_flag=True,
              help="Skip files missing from either directory.")
@_guarded
def cmd_eval(generated_dir, reference_dir, csv_path, allow_partial):
    """Score generated images against references; writes a CSV."""
    rows, means = metrics.evaluate_set(generated_dir, reference_dir,
                                       csv_path=csv_path,
                                       allow_partial=allow_partial)
    click.echo(f"scored {len(rows)} pairs (skipped {means['skipped']})")
    for name in metrics.METRIC_NAMES:
        click.echo(f"mean {name}: {means[name]!r}")
    click.echo(f"csv: {csv_path}")


@main.command("verify-bounds")
@click.option("--samples", type=int, default=1_000_000,
              help="Monte Carlo draws per chain.")
@click.pass_context
@_guarded
def cmd_verify_bounds(ctx, samples):
    """Check ELBO <= exact <= CUBO on the reference chains; exit 3 on failure."""
    cfg = _load_cfg(ctx)
    failures = []
    for i, (name, chain, y0) in enumerate(bounds.standard_chains()):
        est = bounds.estimate_bounds(chain, y0, samples,
                                     stream(cfg.seed, "verify-bounds", i))
        ok = est.sandwich_holds()
        if name == "matched-T3":
            ok = ok and abs(est.elbo - est.exact) <= 1e-10
        click.echo(f"{name:16s} elbo={est.elbo:+.6f} exact={est.exact:+.6f} "
                   f"cubo={est.cubo:+.6f} (se {est.cubo_stderr:.2e}) "
                   f"{'ok' if ok else 'FAIL'}")
        if not ok:
            failures.append(name)

    chain = bounds.standard_chains()[0][1]
    rho = 0.9
    dec = bounds.joint_positive_decomposition(
        chain, 0.3, -0.2, rho, samples, stream(cfg.seed, "verify-mi"))
    expected = -0.5 * np.log1p(-rho * rho)
    ok = abs(dec.mi_term - expected) <= 3.0 * dec.mi_stderr
    click.echo(f"{'mi-rho0.9':16s} est={dec.mi_term:+.6f} "
               f"expect={expected:+.6f} (se {dec.mi_stderr:.2e}) "
               f"{'ok' if ok else 'FAIL'}")
    if not ok:
        failures.append("mi-rho0.9")
    if failures:
        raise NumericsError(f"bound checks failed: {', '.join(failures)}")
    click.echo("all bound checks passed")


@main.command("gradcheck")
@click.pass_context
@_guarded
def cmd_gradcheck(ctx):
    """Finite-difference check of every registered loss; exit 3 on failure."""
    cfg = _load_cfg(ctx)
    rows = gradsuite.run_registered(seed=cfg.seed)
    failures = []
    for name, report, threshold, ok in rows:
        click.echo(f"{name:16s} n={report.n_params:5d} "
                   f"max_rel_err={report.max_rel_err:.3e} "
                   f"threshold={threshold:g} {'ok' if ok else 'FAIL'}")
        if not ok:
            failures.append(name)
    if failures:
        raise NumericsError(f"gradient checks failed: {', '.join(failures)}")
    click.echo("all gradient checks passed")


if __name__ == "__main__":
    main()
