"""Command-line entry point: ``python3 -m varlenrec <subcommand>``.

Each stage reads and writes plain files in a data directory (``--data-dir``,
else ``$VARLENREC_DATA_DIR``, else ``./varlenrec-data``).  Settings come from
built-in defaults, then ``--config FILE``, then individual flags such as
``--train.epochs 10`` or ``--beta 2``.

Exit codes: 0 success, 1 stage failure, 2 invalid configuration.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from .decoder import Trie, decode
from .harq import forward
from .id_registry import (assign_raw_ids, collision_rate, format_id_table, parse_id_table,
                          resolve_collisions)
from .harness.io import (format_catalog, format_decode_response, format_raw_ids, format_sessions,
                         parse_catalog, parse_decode_request, parse_raw_ids, parse_sessions)
from .harness.pipeline import (PipelineConfig, StageError, decode_sessions, fit_sequence_model,
                               format_decodes, run_pipeline, split_sessions)
from .harness.report import stratified_report
from .harness.synth import generate_catalog, generate_sessions
from .harness.verify import verify_suite
from .piba import PibaParams, assign_lengths, format_assignment, parse_assignment
from .training import history_to_csv, load_checkpoint, loss_recon, save_checkpoint, train

DATA_ENV = "VARLENREC_DATA_DIR"
DEFAULT_DATA_DIR = "varlenrec-data"

EXIT_OK, EXIT_STAGE, EXIT_CONFIG = 0, 1, 2

log = logging.getLogger("varlenrec")


class ConfigError(ValueError):
    pass


def _parse_value(text: str):
    """JSON literal if it parses (numbers, true/false, null), else the raw string."""
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    group = parser.add_argument_group("config keys (override --config)")
    for f in fields(PipelineConfig):
        if f.name in PipelineConfig.SECTIONS:
            for sub in fields(PipelineConfig.SECTIONS[f.name]):
                group.add_argument(f"--{f.name}.{sub.name}", dest=f"cfg:{f.name}.{sub.name}",
                                   metavar="V", type=_parse_value, default=argparse.SUPPRESS)
        else:
            group.add_argument(f"--{f.name}", dest=f"cfg:{f.name}", metavar="V",
                               type=_parse_value, default=argparse.SUPPRESS)


def build_config(args: argparse.Namespace) -> PipelineConfig:
    """Defaults, then the config file, then flags."""
    try:
        cfg = PipelineConfig()
        if args.config is not None:
            cfg = PipelineConfig.from_json(Path(args.config).read_text(), cfg)
        overrides: dict = {}
        for key, value in vars(args).items():
            if not key.startswith("cfg:"):
                continue
            path = key[4:].split(".")
            if len(path) == 2:
                overrides.setdefault(path[0], {})[path[1]] = value
            else:
                overrides[path[0]] = value
        return PipelineConfig.from_dict(overrides, cfg) if overrides else cfg
    except (OSError, ValueError, TypeError) as err:
        raise ConfigError(str(err)) from err


class DataDir:
    def __init__(self, root: Path):
        self.root = root

    def __truediv__(self, name: str) -> Path:
        return self.root / name

    def read(self, name: str) -> str:
        path = self.root / name
        if not path.exists():
            raise FileNotFoundError(f"{path} not found; run the earlier stage first")
        return path.read_text()

    def write(self, name: str, text: str) -> None:
        self.root.mkdir(parents=True, exist_ok=True)
        (self.root / name).write_text(text)
        log.info("wrote %s", self.root / name)

    def catalog(self):
        return parse_catalog(self.read("catalog.tsv"))

    def table(self):
        return parse_id_table(self.read("ids.tsv"))

    def sessions(self, split: str, catalog):
        return parse_sessions(self.read(f"sessions_{split}.txt"), catalog)


# --------------------------------------------------------------------------- subcommands

def cmd_synth(cfg: PipelineConfig, data: DataDir, args) -> int:
    if cfg.catalog_path is not None:
        catalog = parse_catalog(Path(cfg.catalog_path).read_text())
    else:
        catalog = generate_catalog(cfg.catalog)
    sessions = generate_sessions(catalog, cfg.sessions)
    train_s, test_s = split_sessions(sessions, cfg.test_fraction, cfg.sessions.seed)
    data.write("catalog.tsv", format_catalog(catalog))
    data.write("sessions_train.txt", format_sessions(train_s, catalog))
    data.write("sessions_test.txt", format_sessions(test_s, catalog))
    data.write("config.json", cfg.to_json())
    print(f"{len(catalog)} items, {len(train_s)} training and {len(test_s)} held-out sessions")
    return EXIT_OK


def cmd_piba(cfg: PipelineConfig, data: DataDir, args) -> int:
    catalog = data.catalog()
    K = cfg.effective_train().K
    assignment = assign_lengths(catalog.table, PibaParams(K=K, beta=cfg.beta))
    data.write("lengths.tsv", format_assignment(catalog.table, assignment, catalog.item_ids))
    counts = np.bincount(assignment.lengths, minlength=K + 1)[1:]
    print("target lengths: " + ", ".join(f"L={L}: {n}" for L, n in enumerate(counts, start=1)))
    return EXIT_OK


def cmd_train(cfg: PipelineConfig, data: DataDir, args) -> int:
    catalog = data.catalog()
    tcfg = cfg.effective_train()
    names, _, assignment, K = parse_assignment(data.read("lengths.tsv"))
    if names != catalog.item_ids or K != tcfg.K:
        raise ValueError("lengths.tsv does not match the catalog or K; rerun piba")
    targets = np.ones_like(assignment.masks) if cfg.fixed_length is not None else assignment.masks
    result = train(catalog.features, targets, tcfg)
    save_checkpoint(data / "model.npz", result.model, tcfg)
    data.write("history.csv", history_to_csv(result.history))
    print(f"loss {result.history[0].total:.4f} -> {result.history[-1].total:.4f} "
          f"over {len(result.history)} epochs")
    return EXIT_OK


def cmd_assign(cfg: PipelineConfig, data: DataDir, args) -> int:
    catalog = data.catalog()
    model, tcfg = load_checkpoint(data / "model.npz")
    tau = tcfg.tau if tcfg is not None else cfg.train.tau
    raw = assign_raw_ids(catalog.features, model, tau)
    table = resolve_collisions(raw, model.M, model.K, catalog.item_ids)
    data.write("raw_ids.tsv", format_raw_ids(raw, catalog.item_ids))
    data.write("ids.tsv", format_id_table(table))
    print(f"raw collision rate {collision_rate(raw):.4f}; "
          f"{table.aux_count()} items received an auxiliary token")
    return EXIT_OK


def cmd_decode(cfg: PipelineConfig, data: DataDir, args) -> int:
    catalog = data.catalog()
    table = data.table()
    text = sys.stdin.read() if args.request in (None, "-") else Path(args.request).read_text()
    try:
        req = parse_decode_request(text)
        index = {n: i for i, n in enumerate(catalog.item_ids)}
        history = [table.ids[index[str(n)]].tokens for n in req["history"]]
    except (ValueError, KeyError) as err:
        raise ConfigError(f"bad decode request: {err}") from err
    model = fit_sequence_model(table, data.sessions("train", catalog), table.K, cfg.carry)
    ranked = decode(history, model, table, Trie.build(table), req.get("beam", cfg.beam),
                    req.get("topk", cfg.topk))
    sys.stdout.write(format_decode_response(ranked, catalog.item_ids))
    return EXIT_OK


def cmd_report(cfg: PipelineConfig, data: DataDir, args) -> int:
    catalog = data.catalog()
    table = data.table()
    _, raw = parse_raw_ids(data.read("raw_ids.tsv"))
    model, _ = load_checkpoint(data / "model.npz")
    trie = Trie.build(table)
    seq_model = fit_sequence_model(table, data.sessions("train", catalog), table.K, cfg.carry)
    decodes = decode_sessions(table, trie, seq_model, data.sessions("test", catalog), cfg.beam,
                              cfg.topk)
    recon = loss_recon(catalog.features, forward(model, catalog.features).x_hat)
    history = []
    if (data / "history.csv").exists():
        rows = data.read("history.csv").splitlines()[1:]
        history = [[float(v) for v in r.split(",")[1:]] for r in rows]
    report = stratified_report(table, catalog, decodes, cfg.topk, raw, recon, history)
    data.write("decodes.jsonl", format_decodes(decodes, catalog.item_ids))
    data.write("report.csv", report.to_csv())
    data.write("report.json", report.to_json())
    data.write("summary.txt", report.summary())
    sys.stdout.write(report.summary())
    return EXIT_OK


def cmd_verify(cfg: PipelineConfig, data: DataDir, args) -> int:
    codebook = None
    if args.checkpoint is not None:
        codebook = load_checkpoint(args.checkpoint)[0].codebook
    report = verify_suite(args.seed, codebook)
    sys.stdout.write(report.summary())
    return EXIT_OK if report.passed else EXIT_STAGE


def cmd_run(cfg: PipelineConfig, data: DataDir, args) -> int:
    result = run_pipeline(cfg, data.root)
    sys.stdout.write(result.report.summary())
    return EXIT_OK


COMMANDS = {
    "synth": (cmd_synth, "generate a synthetic catalog and interaction sessions"),
    "piba": (cmd_piba, "assign popularity-based target lengths"),
    "train": (cmd_train, "train the quantizer against the target lengths"),
    "assign": (cmd_assign, "derive item IDs and resolve collisions"),
    "decode": (cmd_decode, "decode next-item candidates for a JSON request"),
    "report": (cmd_report, "evaluate held-out sessions and write per-tier reports"),
    "verify": (cmd_verify, "run the self-check suite"),
    "run": (cmd_run, "run every stage end to end"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="varlenrec", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text, description=help_text)
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--data-dir", help=f"artifact directory (default ${DATA_ENV} or ./{DEFAULT_DATA_DIR})")
        if name == "decode":
            p.add_argument("--request", help="JSON request file, '-' or omitted for stdin")
        if name == "verify":
            p.add_argument("--checkpoint", help="also check this model's codebook")
            p.add_argument("--seed", type=int, default=0)
        _add_config_flags(p)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    root = Path(args.data_dir or os.environ.get(DATA_ENV) or DEFAULT_DATA_DIR)
    fn = COMMANDS[args.command][0]
    try:
        cfg = build_config(args)
        return fn(cfg, DataDir(root), args)
    except ConfigError as err:
        print(f"varlenrec: invalid configuration: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except StageError as err:
        print(f"varlenrec: {err}", file=sys.stderr)
        return EXIT_STAGE
    except Exception as err:  # any other failure belongs to the subcommand's stage
        print(f"varlenrec: stage '{args.command}' failed: {type(err).__name__}: {err}",
              file=sys.stderr)
        return EXIT_STAGE
