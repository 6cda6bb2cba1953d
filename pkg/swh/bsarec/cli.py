# Copyright (C) 2024 The Software Heritage developers
# See the AUTHORS file at the top-level directory of this distribution
# License: GNU Affero General Public License version 3, or any later version
# See top-level LICENSE file for more information

from contextlib import contextmanager
import json
import logging
import os
from typing import Dict, Iterator, List, Optional, Tuple

import click

from swh.core.cli import CONTEXT_SETTINGS
from swh.core.cli import swh as swh_cli_group

logger = logging.getLogger(__name__)

EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4


@contextmanager
def exit_codes(ctx: click.Context) -> Iterator[None]:
    """Turn domain errors into the command exit codes"""
    from swh.bsarec.error import (
        CheckpointMismatch,
        ConfigError,
        EmptyDataset,
        EmptyEvaluation,
        InvalidArgument,
        InvalidInput,
        InvalidState,
        NumericFailure,
        ParseError,
        UndefinedRatio,
    )

    try:
        yield
    except ConfigError as e:
        for problem in e.problems:
            click.echo(f"config error: {problem}", err=True)
        ctx.exit(EXIT_CONFIG)
    except (CheckpointMismatch, InvalidArgument) as e:
        click.echo(f"config error: {e}", err=True)
        ctx.exit(EXIT_CONFIG)
    except (
        ParseError,
        InvalidInput,
        InvalidState,
        EmptyDataset,
        EmptyEvaluation,
        OSError,
    ) as e:
        click.echo(f"data error: {e}", err=True)
        ctx.exit(EXIT_DATA)
    except (NumericFailure, UndefinedRatio) as e:
        click.echo(f"numeric failure: {e}", err=True)
        ctx.exit(EXIT_NUMERIC)


def parse_assignments(assignments: Tuple[str, ...]) -> Dict[str, str]:
    from swh.bsarec.error import ConfigError

    overrides, problems = {}, []
    for assignment in assignments:
        key, sep, value = assignment.partition("=")
        if not sep or not key.strip():
            problems.append(f"--set expects key=value, got {assignment!r}")
        else:
            overrides[key.strip()] = value.strip()
    if problems:
        raise ConfigError(problems)
    return overrides


def parse_range(text: str) -> List[int]:
    """``"1..8"`` -> [1, ..., 8]; ``"2,4"`` -> [2, 4]"""
    if ".." in text:
        low, _, high = text.partition("..")
        return list(range(int(low), int(high) + 1))
    return [int(part) for part in text.split(",")]


def write_text(path: str, text: str) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write(text)


@swh_cli_group.group(name="bsarec", context_settings=CONTEXT_SETTINGS)
@click.option(
    "--threads",
    default=1,
    show_default=True,
    type=click.IntRange(min=1),
    help="Number of CPU threads used by torch.",
)
@click.pass_context
def bsarec(ctx, threads):
    """BSARec sequential recommendation: train, evaluate and diagnose"""
    import torch

    torch.set_num_threads(threads)
    ctx.ensure_object(dict)
    ctx.obj["threads"] = threads


@bsarec.command(name="preprocess")
@click.argument("raw_path", type=click.Path(dir_okay=False))
@click.argument("out_path", type=click.Path(dir_okay=False, writable=True))
@click.option(
    "--core",
    "-k",
    default=5,
    show_default=True,
    type=int,
    help="Minimal number of interactions of every kept user and item.",
)
@click.pass_context
def preprocess(ctx, raw_path, out_path, core):
    """Filter RAW_PATH to its k-core and write it re-indexed to OUT_PATH"""
    from swh.bsarec.data import core_filter, load_interactions, write_processed

    with exit_codes(ctx):
        log = core_filter(load_interactions(raw_path), core)
        stats_path = write_processed(log, out_path)
        stats = log.stats()
        click.echo(
            f"{stats.users} users, {stats.items} items, {stats.interactions} "
            f"interactions, avg length {stats.avg_length}, sparsity "
            f"{100 * stats.sparsity:.2f}% (stats in {stats_path})"
        )


def _load_run_config(config, overrides):
    from swh.bsarec.config import RunConfig, list_presets, preset_path
    from swh.bsarec.error import ConfigError

    if not os.path.exists(config):
        if config in list_presets():
            config = preset_path(config)
        else:
            presets = ", ".join(list_presets())
            raise ConfigError([f"{config} is neither a file nor a preset ({presets})"])
    return RunConfig.load(config, overrides)


def _load_splits(path):
    from swh.bsarec.data import load_interactions, split_leave_one_out

    return split_leave_one_out(load_interactions(path))


def _rank(model, splits, protocol, seed, stage, mask_history, batch_size=256):
    from swh.bsarec.evaluation import full_ranking_eval, sampled_eval_99

    max_len = model.config.max_len
    if protocol == "full":
        return full_ranking_eval(
            model,
            splits,
            max_len,
            stage=stage,
            mask_history=mask_history,
            batch_size=batch_size,
        )
    return sampled_eval_99(
        model, splits, max_len, seed=seed, stage=stage, batch_size=batch_size
    )


@bsarec.command(name="train")
@click.argument("config")
@click.option("--set", "assignments", multiple=True, help="Override: key=value.")
@click.option("--alpha", type=float, help="Weight of the inductive bias term.")
@click.option("--cutoff", type=int, help="Number of low frequency bins.")
@click.option("--heads", type=int, help="Number of attention heads.")
@click.option("--beta-mode", type=click.Choice(["scalar", "vector"]))
@click.option("--lr", type=float, help="Adam learning rate.")
@click.option("--epochs", type=int, help="Maximal number of epochs.")
@click.option("--seed", type=int, help="Random seed.")
@click.option("--data", "data_path", type=click.Path(dir_okay=False))
@click.option("--output-dir", type=click.Path(file_okay=False))
@click.pass_context
def train(
    ctx,
    config,
    assignments,
    alpha,
    cutoff,
    heads,
    beta_mode,
    lr,
    epochs,
    seed,
    data_path,
    output_dir,
):
    """Train a model described by CONFIG, a config file or a preset name"""
    import torch

    from swh.bsarec.error import ConfigError
    from swh.bsarec.model import BSARec, count_parameters, save_checkpoint
    from swh.bsarec.trainer import train as train_model
    from swh.bsarec.trainer import validation_hook

    with exit_codes(ctx):
        overrides = parse_assignments(assignments)
        flags = {
            "alpha": alpha,
            "cutoff": cutoff,
            "num_heads": heads,
            "beta_mode": beta_mode,
            "learning_rate": lr,
            "epochs": epochs,
            "seed": seed,
            "data_path": data_path,
            "output_dir": output_dir,
        }
        overrides.update({k: v for k, v in flags.items() if v is not None})
        run = _load_run_config(config, overrides)
        if not run["data_path"]:
            raise ConfigError(["data_path is not set"])

        splits = _load_splits(run["data_path"])
        model_config = run.model_config(num_items=splits.num_items)
        train_config = run.train_config()
        out = run.output_dir()
        os.makedirs(out, exist_ok=True)
        write_text(os.path.join(out, "config.cfg"), run.dumps())
        log_path = os.path.join(out, "train_log.csv")
        if os.path.exists(log_path):
            os.remove(log_path)
        checkpoint_path = os.path.join(out, "checkpoint.pt")

        torch.manual_seed(train_config.seed)
        model = BSARec(model_config)
        parameters = count_parameters(model)
        click.echo(
            "parameters: "
            + ", ".join(f"{name}={count}" for name, count in parameters.items())
        )
        result = train_model(
            model,
            splits,
            train_config,
            eval_hook=validation_hook(
                splits,
                model_config.max_len,
                mask_history=run["mask_history"],
                batch_size=train_config.eval_batch_size,
            ),
            log_path=log_path,
        )
        save_checkpoint(
            checkpoint_path,
            model,
            extra={"epoch": result.best_epoch, "run_config": run.dumps()},
        )
        test = _rank(
            model,
            splits,
            run["protocol"],
            run["eval_seed"],
            "test",
            run["mask_history"],
            batch_size=train_config.eval_batch_size,
        )
        summary = {
            "protocol": run["protocol"],
            "best_epoch": result.best_epoch,
            "epochs_run": len(result.history),
            "seconds_per_epoch": result.seconds_per_epoch,
            "parameters": parameters,
            "valid": result.best_report.as_dict() if result.best_report else None,
            "test": test.as_dict(),
        }
        write_text(
            os.path.join(out, "summary.json"), json.dumps(summary, indent=2) + "\n"
        )
        click.echo(test.to_table(), nl=False)


@bsarec.command(name="evaluate")
@click.argument("checkpoint", type=click.Path(dir_okay=False))
@click.option(
    "--protocol",
    type=click.Choice(["full", "sampled-99"]),
    help="Defaults to the protocol of the training run, else full.",
)
@click.option("--seed", type=int, help="Sampling seed, defaults to eval_seed.")
@click.option(
    "--stage", type=click.Choice(["valid", "test"]), default="test", show_default=True
)
@click.option("--data", "data_path", type=click.Path(dir_okay=False))
@click.option("--no-mask-history", is_flag=True, help="Rank training items too.")
@click.option("--output-dir", type=click.Path(file_okay=False))
@click.pass_context
def evaluate(
    ctx, checkpoint, protocol, seed, stage, data_path, no_mask_history, output_dir
):
    """Evaluate CHECKPOINT with the full or the sampled ranking protocol"""
    from swh.bsarec.config import RunConfig, parse_config_text
    from swh.bsarec.error import ConfigError
    from swh.bsarec.model import load_checkpoint, read_checkpoint

    with exit_codes(ctx):
        extra = read_checkpoint(checkpoint).get("extra", {})
        run: Optional[RunConfig] = None
        if "run_config" in extra:
            run = RunConfig.from_mapping(parse_config_text(extra["run_config"]))
        data_path = data_path or (run["data_path"] if run else None)
        if not data_path:
            raise ConfigError(["no dataset: pass --data"])
        splits = _load_splits(data_path)
        model = load_checkpoint(checkpoint, num_items=splits.num_items).eval()
        if protocol is None:
            protocol = run["protocol"] if run else "full"
        if seed is None:
            seed = run["eval_seed"] if run else 0
        mask_history = not no_mask_history and (run["mask_history"] if run else True)
        report = _rank(model, splits, protocol, seed, stage, mask_history)
        out = output_dir or os.path.dirname(os.path.abspath(checkpoint))
        os.makedirs(out, exist_ok=True)
        name = f"metrics_{stage}_{protocol}"
        write_text(os.path.join(out, f"{name}.json"), report.to_json())
        write_text(os.path.join(out, f"{name}.txt"), report.to_table())
        click.echo(report.to_table(), nl=False)


@bsarec.command(name="diagnose")
@click.option("--checkpoint", type=click.Path(dir_okay=False))
@click.option("--data", "data_path", type=click.Path(dir_okay=False))
@click.option("--synthetic", is_flag=True, help="Random softmax attention suite.")
@click.option("--n", "length", default=16, show_default=True, type=int)
@click.option("--tmax", default=64, show_default=True, type=int)
@click.option("--instances", default=20, show_default=True, type=int)
@click.option("--cutoff", default=1, show_default=True, type=int)
@click.option("--layers", help="Depth sweep, e.g. 1..8.")
@click.option("--pure-attention", is_flag=True, help="Sweep with alpha=0.")
@click.option("--seed", default=0, show_default=True, type=int)
@click.option(
    "--output-dir", default="diagnostics", show_default=True, type=click.Path()
)
@click.pass_context
def diagnose(
    ctx,
    checkpoint,
    data_path,
    synthetic,
    length,
    tmax,
    instances,
    cutoff,
    layers,
    pure_attention,
    seed,
    output_dir,
):
    """Spectral response, low-pass decay, oversmoothing and beta reports"""
    import torch

    from swh.bsarec import diagnostics as diag
    from swh.bsarec.config import OUTPUT_ROOT_ENVVAR
    from swh.bsarec.data import evaluation_inputs
    from swh.bsarec.error import ConfigError
    from swh.bsarec.model import ModelConfig, load_checkpoint
    from swh.bsarec.spectral import FrequencySplit

    with exit_codes(ctx):
        if not (synthetic or checkpoint or layers):
            raise ConfigError(["pass --synthetic, --checkpoint or --layers"])
        report = diag.DiagnosticsReport()
        model = load_checkpoint(checkpoint).eval() if checkpoint else None

        if synthetic:
            split = FrequencySplit(cutoff)
            below = 0
            for instance in range(instances):
                generator = torch.Generator().manual_seed(seed + instance)
                A = diag.random_softmax_attention(length, generator=generator)
                x = torch.randn(length, generator=generator, dtype=torch.float64)
                X = torch.randn(length, 8, generator=generator, dtype=torch.float64)
                ratios = diag.lowpass_decay(A, x, split, tmax)
                last = ratios[-1]
                below += last is not None and last < 1e-3
                report.decay[f"random{instance}"] = ratios
                report.responses[f"random{instance}"] = diag.spectral_response(A)
                report.profiles[f"iterates{instance}"] = diag.iterate_profile(
                    A, X, [0, 1, 2, 4, 8, 16, 32]
                )
            click.echo(
                f"{below}/{instances} random attentions reach HFC/LFC < 1e-3 "
                f"after {tmax} applications"
            )

        if model is not None:
            report.betas = diag.beta_report(model)
            for summary in report.betas:
                click.echo(
                    f"layer {summary.layer}: beta mean {summary.mean:.4f} "
                    f"min {summary.min:.4f} max {summary.max:.4f}"
                )
            config = model.config
            if data_path:
                sequences, _ = evaluation_inputs(
                    _load_splits(data_path), config.max_len, "test"
                )
                sequences = torch.from_numpy(sequences[:256])
            else:
                generator = torch.Generator().manual_seed(seed)
                sequences = torch.randint(
                    1, config.num_items + 1, (64, config.max_len), generator=generator
                )
            model = model.double()
            for layer, curve in enumerate(
                diag.attention_responses(model, sequences), start=1
            ):
                report.responses[f"layer{layer}"] = curve
            report.profiles["layers"] = diag.layer_profile(model, sequences)

        if layers:
            base = (
                model.config
                if model is not None
                else ModelConfig(num_items=1000, dropout=0.0)
            )
            report.profiles["depth"] = diag.depth_sweep(
                base, parse_range(layers), seed=seed, pure_attention=pure_attention
            )

        root = os.environ.get(OUTPUT_ROOT_ENVVAR)
        if root and not os.path.isabs(output_dir):
            output_dir = os.path.join(root, output_dir)
        written = report.write(output_dir)
        click.echo(f"wrote {len(written)} files to {output_dir}")
