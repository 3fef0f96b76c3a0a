import sys
import traceback
from pathlib import Path
from typing import Callable, List, Optional

import click
from pydantic import ValidationError

from benchmark import directional_check, run_lossbench, summarize
from core import PixelDistribution
from data import (
    generate,
    read_dataset,
    read_fixations_csv,
    read_pfm,
    write_dataset,
    write_jsonl,
    write_pfm,
)
from errors import EXIT_INTERNAL, EXIT_INVALID, EXIT_OK, InvalidInputError, SaliencyError
from gradcheck import check_loss_gradients, check_model_gradients
from instrumentation import MetricsTimer, command_seconds, export_metrics
from metrics import (
    DEFAULT_EMD_GRID,
    DEFAULT_SPLITS,
    aggregate,
    evaluate_batch,
)
from models import (
    GT_PRESETS,
    METRIC_NAMES,
    CenterBiasParams,
    GtParams,
    LossKind,
    LossSpec,
    MetricReport,
    SynthConfig,
    TrainConfig,
)
from net import FcnModel, default_layers, load_checkpoint, predict, save_checkpoint
from pipeline import center_bias_postprocess, make_gt_distribution, optimize_postprocess
from settings import (
    COMMAND_CONFIG_KEYS,
    DEFAULT_JOBS,
    DEFAULT_SEED,
    METRICS_FILE,
    VERBOSE,
    command_defaults,
    load_config_file,
)
from training.replay import best_epoch
from training.train_log import TrainLog
from training.trainer import evaluate_model, train

LOSS_NAMES = [kind.value for kind in LossKind]


def _parse_list(value: str, cast: Callable, name: str) -> List:
    try:
        return [cast(item.strip()) for item in value.split(",") if item.strip()]
    except ValueError:
        raise click.BadParameter(f"cannot parse '{value}'", param_hint=name)


def _parse_losses(value: str) -> List[LossKind]:
    if value == "all":
        return list(LossKind)
    kinds = []
    for name in _parse_list(value, str, "--losses"):
        if name not in LOSS_NAMES:
            raise click.BadParameter(
                f"unknown loss '{name}'. Known losses: {', '.join(LOSS_NAMES)}",
                param_hint="--losses",
            )
        kinds.append(LossKind(name))
    return kinds


def _gt_params(preset: str, kernel_width: Optional[int], sigma: Optional[float]) -> GtParams:
    params = GtParams.preset(preset)
    return GtParams(
        kernel_width=kernel_width if kernel_width is not None else params.kernel_width,
        sigma=sigma if sigma is not None else params.sigma,
    )


def _read_distribution(path: Path) -> PixelDistribution:
    """PFM maps are float32; renormalize to a distribution"""
    return PixelDistribution.from_map(read_pfm(path))


def _echo_reports(reports: List[MetricReport]) -> None:
    click.echo("image".ljust(12) + "".join(name.rjust(11) for name in METRIC_NAMES))
    for report in reports:
        cells = "".join(
            ("-" if getattr(report, name) is None else f"{getattr(report, name):.4f}").rjust(11)
            for name in METRIC_NAMES
        )
        click.echo(str(report.image).ljust(12) + cells)
    means = aggregate(reports)
    click.echo("mean".ljust(12) + "".join(
        ("-" if name not in means else f"{means[name]:.4f}").rjust(11) for name in METRIC_NAMES
    ))


gt_preset_option = click.option(
    "--preset",
    type=click.Choice(sorted(GT_PRESETS)),
    default="toy",
    show_default=True,
    help="GT kernel preset",
)
kernel_width_option = click.option(
    "--kernel-width", type=int, default=None, help="GT kernel width in pixels (overrides preset)"
)
sigma_option = click.option(
    "--sigma", type=float, default=None, help="GT kernel sigma in pixels (overrides preset)"
)
seed_option = click.option(
    "--seed", type=int, default=DEFAULT_SEED, show_default=True, help="Random seed"
)
jobs_option = click.option(
    "--jobs", type=int, default=DEFAULT_JOBS, show_default=True, help="Parallel workers per image"
)


@click.group()
@click.option(
    "--config",
    "config_path",
    type=click.Path(dir_okay=False, path_type=Path),
    default=None,
    help="key=value file with gt.*, post.*, train.*, synth.*, eval.* defaults",
)
@click.option("--verbose/--quiet", default=VERBOSE, show_default=True, help="Progress on stderr")
@click.pass_context
def cli(ctx: click.Context, config_path: Optional[Path], verbose: bool):
    """Saliency maps as pixel distributions: GT, losses, metrics and training."""
    ctx.ensure_object(dict)
    ctx.obj["verbose"] = verbose
    config = load_config_file(config_path) if config_path else {}
    # Flags override file values through click's default_map
    ctx.default_map = {command: command_defaults(config, command) for command in COMMAND_CONFIG_KEYS}


@cli.command()
@click.option("--out", type=click.Path(file_okay=False, path_type=Path), required=True, help="Dataset directory")
@click.option("--n-images", type=int, default=100, show_default=True)
@click.option("--height", type=int, default=64, show_default=True)
@click.option("--width", type=int, default=64, show_default=True)
@click.option("--blobs-min", type=int, default=1, show_default=True)
@click.option("--blobs-max", type=int, default=3, show_default=True)
@click.option("--fixations-per-image", type=int, default=60, show_default=True)
@click.option("--center-bias-weight", type=float, default=0.2, show_default=True)
@click.option("--noise-sigma", type=float, default=0.05, show_default=True)
@click.option("--channels", type=click.Choice(["1", "3"]), default="1", show_default=True)
@gt_preset_option
@kernel_width_option
@sigma_option
@seed_option
@jobs_option
def synth(out, n_images, height, width, blobs_min, blobs_max, fixations_per_image,
          center_bias_weight, noise_sigma, channels, preset, kernel_width, sigma, seed, jobs):
    """Generate a synthetic fixation dataset."""
    with MetricsTimer(command_seconds, "synth"):
        config = SynthConfig(
            n_images=n_images,
            height=height,
            width=width,
            blobs_min=blobs_min,
            blobs_max=blobs_max,
            fixations_per_image=fixations_per_image,
            center_bias_weight=center_bias_weight,
            noise_sigma=noise_sigma,
            channels=int(channels),
            seed=seed,
            gt=_gt_params(preset, kernel_width, sigma),
        )
        samples = generate(config, jobs=jobs)
        write_dataset(out, samples, config.gt, synth=config)
        click.echo(f"wrote {len(samples)} samples to {out} (seed {seed})")


@cli.command()
@click.option("--fix", "fix_path", type=click.Path(exists=True, dir_okay=False, path_type=Path), required=True, help="Fixation CSV")
@click.option("--height", type=int, required=True)
@click.option("--width", type=int, required=True)
@gt_preset_option
@kernel_width_option
@sigma_option
@click.option("--out", type=click.Path(dir_okay=False, path_type=Path), required=True, help="GT distribution PFM")
def gtgen(fix_path, height, width, preset, kernel_width, sigma, out):
    """Build the ground-truth distribution of one image's fixations."""
    with MetricsTimer(command_seconds, "gtgen"):
        params = _gt_params(preset, kernel_width, sigma)
        fix = read_fixations_csv(fix_path, height, width)
        g = make_gt_distribution(fix, params)
        write_pfm(out, g.values)
        click.echo(
            f"wrote {height}x{width} GT from {len(fix)} fixations "
            f"(kernel {params.kernel_width}, sigma {params.sigma}) to {out}"
        )


@cli.command(name="train")
@click.option("--data", "data_dir", type=click.Path(exists=True, file_okay=False, path_type=Path), required=True)
@click.option("--val-data", type=click.Path(exists=True, file_okay=False, path_type=Path), default=None, help="Validation dataset")
@click.option("--n-val", type=int, default=0, show_default=True, help="Trailing samples of --data used for validation")
@click.option("--out", type=click.Path(dir_okay=False, path_type=Path), required=True, help="Checkpoint path")
@click.option("--log", "log_path", type=click.Path(dir_okay=False, path_type=Path), default=None, help="TrainLog JSON lines")
@click.option("--init-checkpoint", type=click.Path(exists=True, dir_okay=False, path_type=Path), default=None, help="Fine-tune from this model")
@click.option("--loss", type=click.Choice(LOSS_NAMES), default="bhattacharyya", show_default=True)
@click.option("--base-lr", type=float, default=0.1, show_default=True)
@click.option("--momentum", type=float, default=0.9, show_default=True)
@click.option("--weight-decay", type=float, default=0.0005, show_default=True)
@click.option("--batch-size", type=int, default=10, show_default=True)
@click.option("--epochs", type=int, default=10, show_default=True)
@click.option("--frozen-prefix", type=int, default=0, show_default=True)
@click.option("--snapshot-every", type=int, default=0, show_default=True)
@click.option("--eval-splits", type=int, default=10, show_default=True)
@seed_option
@click.pass_context
def train_command(ctx, data_dir, val_data, n_val, out, log_path, init_checkpoint, loss, base_lr,
                  momentum, weight_decay, batch_size, epochs, frozen_prefix, snapshot_every,
                  eval_splits, seed):
    """Train the saliency network with SGD."""
    with MetricsTimer(command_seconds, "train"):
        config = TrainConfig(
            base_lr=base_lr,
            momentum=momentum,
            weight_decay=weight_decay,
            batch_size=batch_size,
            epochs=epochs,
            loss=LossSpec(kind=LossKind(loss)),
            seed=seed,
            frozen_prefix=frozen_prefix,
            snapshot_every=snapshot_every,
            eval_splits=eval_splits,
        )
        _, samples = read_dataset(data_dir)
        val_samples = None
        if val_data is not None:
            _, val_samples = read_dataset(val_data)
        elif n_val:
            if not 0 < n_val < len(samples):
                raise InvalidInputError(f"--n-val must be in (0, {len(samples)})")
            samples, val_samples = samples[: len(samples) - n_val], samples[len(samples) - n_val :]

        if init_checkpoint is not None:
            model = load_checkpoint(init_checkpoint)
        else:
            model = FcnModel.initialize(default_layers(samples[0].image.shape[0]), seed=seed)

        log = TrainLog()
        try:
            model, log = train(
                model, samples, config, val_samples=val_samples, log=log, verbose=ctx.obj["verbose"]
            )
        finally:
            if log_path is not None:
                log.write_jsonl(log_path)

        save_checkpoint(model, out)
        losses = log.loss_curve()
        final = f"{losses[-1]:.6g}" if losses else "-"
        click.echo(f"trained {len(losses)} iterations with {loss} (seed {seed}); final loss {final}")
        best = best_epoch(log)
        if best is not None:
            click.echo(f"best epoch {best.epoch}: " + " ".join(f"{k}={v:.4f}" for k, v in best.metrics.items()))
        click.echo(f"wrote {out}")


@cli.command(name="predict")
@click.option("--model", "model_path", type=click.Path(exists=True, dir_okay=False, path_type=Path), required=True)
@click.option("--image", "image_path", type=click.Path(exists=True, dir_okay=False, path_type=Path), required=True)
@click.option("--out", type=click.Path(dir_okay=False, path_type=Path), required=True, help="Predicted distribution PFM")
def predict_command(model_path, image_path, out):
    """Predict the saliency distribution of one image."""
    with MetricsTimer(command_seconds, "predict"):
        model = load_checkpoint(model_path)
        p = predict(model, read_pfm(image_path))
        write_pfm(out, p.values)
        click.echo(f"wrote {p.shape[0]}x{p.shape[1]} prediction to {out}")


@cli.command(name="eval")
@click.option("--pred", "pred_paths", type=click.Path(exists=True, dir_okay=False, path_type=Path), multiple=True, help="Predicted map PFM (repeatable)")
@click.option("--fix", "fix_paths", type=click.Path(exists=True, dir_okay=False, path_type=Path), multiple=True, help="Fixation CSV, one per --pred")
@click.option("--gt", "gt_paths", type=click.Path(exists=True, dir_okay=False, path_type=Path), multiple=True, help="GT distribution PFM, one per --pred")
@click.option("--bank", "bank_paths", type=click.Path(exists=True, dir_okay=False, path_type=Path), multiple=True, help="Fixation CSVs of other images for the sAUC bank; a single --pred needs one, or sauc is left empty")
@click.option("--data", "data_dir", type=click.Path(exists=True, file_okay=False, path_type=Path), default=None, help="Evaluate a model on a dataset")
@click.option("--model", "model_path", type=click.Path(exists=True, dir_okay=False, path_type=Path), default=None)
@click.option("--n-splits", type=int, default=DEFAULT_SPLITS, show_default=True)
@click.option("--n-neg", type=int, default=None, help="Negatives per split [default: fixation count]")
@click.option("--emd-grid", type=int, default=DEFAULT_EMD_GRID, show_default=True)
@click.option("--out", type=click.Path(dir_okay=False, path_type=Path), default=None, help="MetricReport JSON lines")
@seed_option
@jobs_option
def eval_command(pred_paths, fix_paths, gt_paths, bank_paths, data_dir, model_path, n_splits,
                 n_neg, emd_grid, out, seed, jobs):
    """
    Evaluate saliency maps against fixations and GT maps.

    sAUC draws negatives from the fixations of the other --pred images and
    of every --bank file; a single --pred without --bank reports no sauc.
    """
    with MetricsTimer(command_seconds, "eval"):
        if data_dir is not None:
            if model_path is None:
                raise InvalidInputError("--data needs --model")
            _, samples = read_dataset(data_dir)
            model = load_checkpoint(model_path)
            reports = evaluate_model(
                model, samples, n_splits=n_splits, n_neg=n_neg, seed=seed, emd_grid=emd_grid, jobs=jobs
            )
        else:
            reports = _eval_files(pred_paths, fix_paths, gt_paths, bank_paths, n_splits, n_neg, emd_grid, seed, jobs)

        _echo_reports(reports)
        if out is not None:
            write_jsonl(out, reports)
            click.echo(f"wrote {len(reports)} reports to {out} (seed {seed})")


def _eval_files(pred_paths, fix_paths, gt_paths, bank_paths, n_splits, n_neg, emd_grid, seed, jobs):
    if not pred_paths:
        raise InvalidInputError("eval needs --pred files or --data with --model")
    if len(fix_paths) != len(pred_paths):
        raise InvalidInputError("Give one --fix per --pred")
    if gt_paths and len(gt_paths) != len(pred_paths):
        raise InvalidInputError("Give one --gt per --pred, or none")

    maps = [read_pfm(path) for path in pred_paths]
    if any(m.ndim != 2 for m in maps):
        raise InvalidInputError("Predicted maps must have one channel")
    fixations = [read_fixations_csv(path, *m.shape) for path, m in zip(fix_paths, maps)]
    gts = [_read_distribution(path) for path in gt_paths] if gt_paths else None
    names = [path.name for path in pred_paths]

    bank_sets = [read_fixations_csv(path, *maps[0].shape) for path in bank_paths]
    return evaluate_batch(
        maps, fixations, gts=gts, n_splits=n_splits, n_neg=n_neg, seed=seed,
        emd_grid=emd_grid, names=names, jobs=jobs, extra_bank=bank_sets,
    )


@cli.command(name="gradcheck")
@click.option("--loss", "loss_names", default="all", show_default=True, help="Comma-separated losses or 'all'")
@click.option("--target", type=click.Choice(["loss", "net", "all"]), default="loss", show_default=True)
@click.option("--trials", type=int, default=100, show_default=True)
@click.option("--h", "step", type=float, default=None, help="Finite-difference step [default: 1e-5 loss, 1e-6 net]")
@click.option("--out", type=click.Path(dir_okay=False, path_type=Path), default=None, help="Reports as JSON lines")
@seed_option
def gradcheck_command(loss_names, target, trials, step, out, seed):
    """Certify analytic gradients against central finite differences."""
    with MetricsTimer(command_seconds, "gradcheck"):
        reports = []
        for kind in _parse_losses(loss_names):
            spec = LossSpec(kind=kind)
            if target in ("loss", "all"):
                reports.append(check_loss_gradients(spec, trials=trials, seed=seed, h=step or 1e-5))
            if target in ("net", "all"):
                reports.append(check_model_gradients(spec, seed=seed, h=step or 1e-6))

        for report in reports:
            status = "ok" if report.passed else "FAIL"
            click.echo(
                f"{report.target:4s} {report.loss.value:14s} trials={report.trials:<5d} "
                f"max relative error {report.max_rel_error:.3e} "
                f"(tolerance {report.tolerance:.0e}) {status}"
            )
        if out is not None:
            write_jsonl(out, reports)
        failed = [r for r in reports if not r.passed]
        if failed:
            raise SaliencyError(
                "Gradient check failed for " + ", ".join(f"{r.target}:{r.loss.value}" for r in failed)
            )


@cli.command()
@click.option("--losses", default="all", show_default=True, help="Comma-separated losses or 'all'")
@click.option("--seeds", default="0,1,2", show_default=True, help="Comma-separated training seeds")
@click.option("--data", "data_dir", type=click.Path(exists=True, file_okay=False, path_type=Path), default=None, help="Use this dataset instead of generating one")
@click.option("--n-train", type=int, default=500, show_default=True)
@click.option("--n-val", type=int, default=100, show_default=True)
@click.option("--height", type=int, default=64, show_default=True)
@click.option("--width", type=int, default=64, show_default=True)
@kernel_width_option
@sigma_option
@click.option("--data-seed", type=int, default=0, show_default=True, help="Seed of the generated dataset and splits")
@click.option("--splits", type=int, default=1, show_default=True, help="Random train/validation partitions")
@click.option("--base-lr", type=float, default=0.1, show_default=True)
@click.option("--momentum", type=float, default=0.9, show_default=True)
@click.option("--weight-decay", type=float, default=0.0005, show_default=True)
@click.option("--batch-size", type=int, default=10, show_default=True)
@click.option("--epochs", type=int, default=10, show_default=True)
@click.option("--eval-splits", type=int, default=10, show_default=True)
@click.option("--out", type=click.Path(dir_okay=False, path_type=Path), default=None, help="Rows and per-epoch curves as JSON lines")
@jobs_option
@click.pass_context
def lossbench(ctx, losses, seeds, data_dir, n_train, n_val, height, width, kernel_width, sigma,
              data_seed, splits, base_lr, momentum, weight_decay, batch_size, epochs, eval_splits,
              out, jobs):
    """Compare losses by training the same network with each."""
    with MetricsTimer(command_seconds, "lossbench"):
        kinds = _parse_losses(losses)
        seed_list = _parse_list(seeds, int, "--seeds")
        if data_dir is not None:
            _, samples = read_dataset(data_dir)
        else:
            synth_config = SynthConfig(
                n_images=n_train + n_val,
                height=height,
                width=width,
                seed=data_seed,
                gt=_gt_params("toy", kernel_width, sigma),
            )
            samples = generate(synth_config, jobs=jobs)

        config = TrainConfig(
            base_lr=base_lr,
            momentum=momentum,
            weight_decay=weight_decay,
            batch_size=batch_size,
            epochs=epochs,
            eval_splits=eval_splits,
        )
        rows = run_lossbench(
            samples, kinds, seed_list, config, n_val=n_val, n_splits=splits,
            split_seed=data_seed, jobs=jobs, verbose=ctx.obj["verbose"],
        )
        if out is not None:
            write_jsonl(out, rows)

        for selection in ("final", "best"):
            summary = summarize(rows, selection)
            click.echo(f"{selection} epoch, mean over seeds {seed_list} and {splits} split(s)")
            click.echo("loss".ljust(15) + "".join(name.rjust(11) for name in METRIC_NAMES))
            for kind, means in summary.items():
                click.echo(kind.value.ljust(15) + "".join(
                    ("-" if name not in means else f"{means[name]:.4f}").rjust(11) for name in METRIC_NAMES
                ))
            for result in directional_check(summary):
                click.echo(
                    f"  {result.metric}: bhattacharyya>=euclidean {result.bhattacharyya_not_worse}, "
                    f"distances rank better than regression {result.distances_rank_better}"
                )
        if out is not None:
            click.echo(f"wrote {len(rows)} rows to {out}")


@cli.command()
@click.option("--pred", "pred_path", type=click.Path(exists=True, dir_okay=False, path_type=Path), default=None, help="Predicted distribution PFM")
@click.option("--out", type=click.Path(dir_okay=False, path_type=Path), default=None, help="Output PFM, or chosen parameters (JSON) with --optimize")
@click.option("--blur-sigma", type=float, default=0.0, show_default=True)
@click.option("--bias-weight", type=float, default=0.0, show_default=True)
@click.option("--bias-sigma", type=float, default=0.25, show_default=True)
@click.option("--optimize", is_flag=True, help="Grid-search blur and center weight on --data with --model")
@click.option("--data", "data_dir", type=click.Path(exists=True, file_okay=False, path_type=Path), default=None)
@click.option("--model", "model_path", type=click.Path(exists=True, dir_okay=False, path_type=Path), default=None)
@click.option("--blur-grid", default="0,0.5,1,2,4", show_default=True)
@click.option("--weight-grid", default="0,0.1,0.2,0.3,0.5", show_default=True)
@click.option("--metric", type=click.Choice(["nss", "auc_judd"]), default="nss", show_default=True)
def postprocess(pred_path, out, blur_sigma, bias_weight, bias_sigma, optimize, data_dir, model_path,
                blur_grid, weight_grid, metric):
    """Blur and center-bias a predicted distribution."""
    with MetricsTimer(command_seconds, "postprocess"):
        if optimize:
            if data_dir is None or model_path is None:
                raise InvalidInputError("--optimize needs --data and --model")
            _, samples = read_dataset(data_dir)
            model = load_checkpoint(model_path)
            params, score = optimize_postprocess(
                [predict(model, s.image) for s in samples],
                [s.fixations for s in samples],
                _parse_list(blur_grid, float, "--blur-grid"),
                _parse_list(weight_grid, float, "--weight-grid"),
                bias_sigma=bias_sigma,
                metric=metric,
            )
            click.echo(
                f"best blur_sigma={params.blur_sigma} bias_weight={params.bias_weight} "
                f"mean {metric}={score:.4f}"
            )
            if out is not None:
                Path(out).write_text(params.model_dump_json() + "\n", encoding="utf-8")
            return

        if pred_path is None or out is None:
            raise InvalidInputError("postprocess needs --pred and --out")
        params = CenterBiasParams(blur_sigma=blur_sigma, bias_weight=bias_weight, bias_sigma=bias_sigma)
        result = center_bias_postprocess(_read_distribution(pred_path), params)
        write_pfm(out, result.values)
        click.echo(f"wrote post-processed map to {out}")


def run(argv: Optional[List[str]] = None) -> int:
    """
    Run the CLI and return its exit code.

    0 on success, 1 on validation errors, 2 on internal failures; a one-line
    diagnostic goes to stderr.
    """
    verbose = VERBOSE or (argv is not None and "--verbose" in argv)
    try:
        result = cli.main(args=argv, prog_name="saldist", standalone_mode=False)
        return result if isinstance(result, int) else EXIT_OK
    except click.ClickException as e:
        e.show()
        return EXIT_INVALID
    except click.Abort:
        click.echo("Aborted", err=True)
        return EXIT_INVALID
    except SaliencyError as e:
        click.echo(f"error: {e.detail}", err=True)
        return e.exit_code
    except ValidationError as e:
        click.echo(f"error: invalid parameters: {e}", err=True)
        return EXIT_INVALID
    except Exception as e:
        click.echo(f"internal error: {e}", err=True)
        if verbose:
            click.echo(traceback.format_exc(), err=True)
        return EXIT_INTERNAL
    finally:
        export_metrics(METRICS_FILE)


if __name__ == "__main__":
    sys.exit(run())
