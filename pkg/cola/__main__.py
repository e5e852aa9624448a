import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import verification
from .collaboration import run_collaboration
from .cost import cost_table, cost_table_csv, format_cost_table
from .helpers import arg_options
from .helpers.checkpoint import save_checkpoint
from .helpers.config_helpers import dataset_dims, load_config, load_dataset, load_output_template
from .helpers.constants import HELP_MESSAGES
from .helpers.errors import ColaError, ConfigError
from .helpers.metrics import MetricsWriter, RunMetadata, metrics_to_csv, read_metrics
from .models import build_model
from .training import USER_SEED_STRIDE, TrainingConfig, run_training

logger = logging.getLogger(__name__)


def run_metadata(command: str, config: TrainingConfig) -> RunMetadata:
    """
    The self-description written next to a metrics file.

    Args:
        command (str): The subcommand that produced the metrics.
        config (TrainingConfig): The configuration of the run.

    Returns:
        RunMetadata: Config snapshot, seeds, precision and the presets chosen for the run.
    """
    presets = {'model': config.model, 'adapter': config.adapter, 'variant': config.variant}
    if config.model == arg_options.ModelPreset.MLP.value:
        presets['hidden'] = list(config.hidden)
    if config.adapter == arg_options.AdapterKind.LOWRANK.value:
        presets['rank'] = config.rank
    elif config.adapter == arg_options.AdapterKind.MLP.value:
        presets['adapter_hidden'] = config.adapter_hidden
    return RunMetadata(
        command=command,
        config=config.snapshot(),
        seeds={'seed': config.seed, 'user_seed_stride': USER_SEED_STRIDE},
        precision=config.precision,
        presets=presets,
    )


def _write_text(text: str, output: str) -> None:
    output_path = Path(output)
    output_path.parent.mkdir(parents=True, exist_ok=True)
    with open(output_path, "w", encoding="utf-8") as f:
        f.write(text)


def _config_with_overrides(args: argparse.Namespace) -> TrainingConfig:
    config = load_config(args.config)
    overrides = {}
    for key in ('batch_size', 'users', 'mode'):
        value = getattr(args, key, None)
        if value is not None:
            overrides[key] = value
    if overrides:
        config = replace(config, **overrides)
        config.validate()
    return config


def verify_command(args: argparse.Namespace) -> int:
    """Run every theory check; exit status 1 when any check fails."""
    report = verification.run_all(seed=args.seed)
    print(report.render(load_output_template("verify_report")))
    if args.json:
        report.write_json(args.json)
    return 0 if report.passed else 1


def train_command(args: argparse.Namespace) -> int:
    """Train one adapter set on the configured data and write the metrics with their metadata."""
    config = _config_with_overrides(args)
    train, test = load_dataset(config)
    with MetricsWriter(args.output or None, record_wall_time=config.record_wall_time) as metrics:
        metrics.write_metadata(run_metadata("train", config))
        result = run_training(config, train, test_dataset=test, metrics=metrics, message_log=args.message_log)
    if args.checkpoint:
        save_checkpoint(result.adapters, args.checkpoint)
    if not args.output:
        print(metrics_to_csv(result.history), end="")
    test_lines = [record for record in result.history if record['split'] == 'test']
    if test_lines:
        logger.info(f"Final test accuracy {test_lines[-1]['accuracy']:.4f}")
    return 0


def ftaas_command(args: argparse.Namespace) -> int:
    """Train K users over one shared base model in the joint, alone or collab setup."""
    config = _config_with_overrides(args)
    train, test = load_dataset(config)
    with MetricsWriter(args.output or None, record_wall_time=config.record_wall_time) as metrics:
        metrics.write_metadata(run_metadata("ftaas", config))
        result = run_collaboration(config, train, test_dataset=test, metrics=metrics, message_log=args.message_log)
    if args.checkpoint:
        save_checkpoint(result.adapters, args.checkpoint)
    if not args.output:
        print(metrics_to_csv(result.history), end="")
    final = {}
    for record in result.history:
        if record['split'] in ('test', 'test_merged'):
            final[(record['split'], record.get('user'))] = record['accuracy']
    for (split, user), accuracy in sorted(final.items(), key=lambda item: (item[0][0], item[0][1] or 0)):
        logger.info(f"User {user} {split} accuracy {accuracy:.4f}")
    return 0


def cost_command(args: argparse.Namespace) -> int:
    """Print the computation-space table of every method for the configured model and adapters."""
    config = _config_with_overrides(args)
    in_dim, out_dim = dataset_dims(config)
    model = build_model(
        config.model, seed=config.seed, in_dim=in_dim, out_dim=out_dim, hidden=config.hidden, dtype=config.dtype
    )
    adapter_specs = [config.adapter_spec(model, m) for m in range(model.M)]
    reports = cost_table(model, adapter_specs, config.users, config.batch_size)
    print(format_cost_table(reports), end="")
    if args.csv:
        _write_text(cost_table_csv(reports), args.csv)
    return 0


def plot_command(args: argparse.Namespace) -> int:
    """Emit learning-curve data from a metrics file as CSV."""
    text = metrics_to_csv(read_metrics(args.metrics), split=args.split)
    if args.output:
        _write_text(text, args.output)
    else:
        print(text, end="")
    return 0


COMMANDS = {
    'verify': verify_command,
    'train': train_command,
    'ftaas': ftaas_command,
    'cost': cost_command,
    'plot': plot_command,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cola")
    parser.add_argument("--verbose", action="store_true", help=HELP_MESSAGES["verbose"])
    subparsers = parser.add_subparsers(dest="command", required=True)

    verify = subparsers.add_parser("verify", help=HELP_MESSAGES["verify"])
    verify.add_argument("--seed", type=int, required=False, default=0, help=HELP_MESSAGES["seed"])
    verify.add_argument("--json", type=str, required=False, default="", help=HELP_MESSAGES["json"])

    train = subparsers.add_parser("train", help=HELP_MESSAGES["train"])
    ftaas = subparsers.add_parser("ftaas", help=HELP_MESSAGES["ftaas"])
    for subparser in (train, ftaas):
        subparser.add_argument("--config", type=str, required=True, help=HELP_MESSAGES["config"])
        subparser.add_argument("--output", type=str, required=False, default="", help=HELP_MESSAGES["output"])
        subparser.add_argument("--checkpoint", type=str, required=False, default="", help=HELP_MESSAGES["checkpoint"])
        subparser.add_argument(
            "--message_log", type=str, required=False, default=None, help=HELP_MESSAGES["message_log"]
        )
        subparser.add_argument(
            "--batch_size", type=int, required=False, default=None, help=HELP_MESSAGES["batch_size"]
        )
    ftaas.add_argument("--users", type=int, required=False, default=None, help=HELP_MESSAGES["users"])
    ftaas.add_argument(
        "--mode",
        type=str,
        choices=arg_options.get_enum_values(arg_options.CollaborationMode),
        required=False,
        default=None,
        help=HELP_MESSAGES["mode"],
    )

    cost = subparsers.add_parser("cost", help=HELP_MESSAGES["cost"])
    cost.add_argument("--config", type=str, required=True, help=HELP_MESSAGES["config"])
    cost.add_argument("--users", type=int, required=False, default=None, help=HELP_MESSAGES["users"])
    cost.add_argument("--batch_size", type=int, required=False, default=None, help=HELP_MESSAGES["batch_size"])
    cost.add_argument("--csv", type=str, required=False, default="", help=HELP_MESSAGES["csv"])

    plot = subparsers.add_parser("plot", help=HELP_MESSAGES["plot"])
    plot.add_argument("--metrics", type=str, required=True, help=HELP_MESSAGES["metrics"])
    plot.add_argument("--split", type=str, required=False, default=None, help=HELP_MESSAGES["split"])
    plot.add_argument("--output", type=str, required=False, default="", help=HELP_MESSAGES["plot_output"])
    return parser


def main(argv=None) -> int:
    """
    Parses the command line and runs one subcommand: verify, train, ftaas, cost or plot.

    Returns:
        int: Exit status code; 0 on success, 1 on a failed verification or a run error,
        2 on a configuration error. Argument errors exit with 2 through argparse.
    """
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format='%(asctime)s - %(levelname)s - %(message)s',
    )
    try:
        return COMMANDS[args.command](args)
    except ConfigError as e:
        parser.print_usage(sys.stderr)
        print(f"Error: {e}", file=sys.stderr)
        return 2
    except (ColaError, ValueError, OSError) as e:
        print(f"Error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
