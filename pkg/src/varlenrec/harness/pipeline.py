"""End-to-end run: lengths, training, IDs, trie, sequence model, decoding, report."""

from __future__ import annotations

import json
import logging
import time
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Optional

import numpy as np

from ..decoder import MarkovModel, Trie, decode
from ..harq import HARQModel, forward
from ..id_registry import IdTable, assign_raw_ids, format_id_table, resolve_collisions
from ..piba import LengthAssignment, PibaParams, assign_lengths, format_assignment
from ..training import TrainConfig, history_to_csv, loss_recon, save_checkpoint, train
from .io import format_catalog, format_raw_ids, format_sessions, parse_catalog
from .report import DecodeOutcome, ExperimentReport, stratified_report
from .synth import (ItemCatalog, SessionSpec, SyntheticCatalogSpec, generate_catalog,
                    generate_sessions)

log = logging.getLogger(__name__)

# lam_len strong enough that lengths follow the allocation; the tangent clip keeps
# short fixed-length ablations from driving encodings to the boundary
PIPELINE_TRAIN_DEFAULTS = dict(lam_len=10.0, max_tangent=1.0)


class StageError(RuntimeError):
    def __init__(self, stage: str, detail: str):
        super().__init__(f"stage '{stage}' failed: {detail}")
        self.stage = stage
        self.detail = detail


@dataclass
class PipelineConfig:
    catalog: SyntheticCatalogSpec = field(default_factory=SyntheticCatalogSpec)
    sessions: SessionSpec = field(default_factory=SessionSpec)
    train: TrainConfig = field(default_factory=lambda: TrainConfig(**PIPELINE_TRAIN_DEFAULTS))
    catalog_path: Optional[str] = None  # load instead of generating
    beta: float = 1.0
    test_fraction: float = 0.2
    beam: int = 30
    topk: int = 10
    fixed_length: Optional[int] = None  # gate-free ablation with every ID this long
    carry: str = "first"  # history token the sequence model conditions a new ID on

    SECTIONS = {"catalog": SyntheticCatalogSpec, "sessions": SessionSpec, "train": TrainConfig}

    def validate(self) -> None:
        self.train.validate()
        if not (self.beta > 0 and 0 < self.test_fraction < 1):
            raise ValueError("need beta > 0 and 0 < test_fraction < 1")
        if self.beam < 1 or self.topk < 1:
            raise ValueError("beam and topk must be positive")
        if self.fixed_length is not None and self.fixed_length < 1:
            raise ValueError("fixed_length must be positive")
        if self.carry not in MarkovModel.CARRY:
            raise ValueError(f"carry must be one of {MarkovModel.CARRY}")

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        for key in self.SECTIONS:
            d[key] = asdict(d[key])
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, data: dict, base: Optional["PipelineConfig"] = None) -> "PipelineConfig":
        """Overlay ``data`` on ``base`` (defaults if omitted); unknown keys are rejected."""
        cfg = base or cls()
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        updates = {}
        for key, value in data.items():
            if key in cls.SECTIONS:
                if not isinstance(value, dict):
                    raise ValueError(f"section '{key}' must be a mapping")
                section = getattr(cfg, key)
                allowed = {f.name for f in fields(section)}
                bad = set(value) - allowed
                if bad:
                    raise ValueError(f"unknown keys in '{key}': {sorted(bad)}")
                updates[key] = replace(section, **value)
            else:
                updates[key] = value
        out = replace(cfg, **updates)
        out.validate()
        return out

    @classmethod
    def from_json(cls, text: str, base: Optional["PipelineConfig"] = None) -> "PipelineConfig":
        return cls.from_dict(json.loads(text), base)

    def effective_train(self) -> TrainConfig:
        if self.fixed_length is None:
            return self.train
        return replace(self.train, K=self.fixed_length, pinned_gates=True)


@dataclass
class PipelineResult:
    report: ExperimentReport
    catalog: ItemCatalog
    assignment: LengthAssignment
    model: HARQModel
    raw: list[tuple]
    table: IdTable
    trie: Trie
    sequence_model: MarkovModel
    decodes: list[DecodeOutcome]


@contextmanager
def _stage(name: str, timings: dict):
    start = time.perf_counter()
    log.info("stage %s", name)
    try:
        yield
    except StageError:
        raise
    except Exception as err:  # any failure inside a stage is reported under its name
        raise StageError(name, f"{type(err).__name__}: {err}") from err
    timings[name] = time.perf_counter() - start


def split_sessions(sessions: list, test_fraction: float, seed: int) -> tuple[list, list]:
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(sessions))
    n_test = max(1, int(round(test_fraction * len(sessions))))
    test = set(order[:n_test].tolist())
    return ([s for i, s in enumerate(sessions) if i not in test],
            [s for i, s in enumerate(sessions) if i in test])


def fit_sequence_model(table: IdTable, sessions: list, max_main: int,
                       carry: str = "first") -> MarkovModel:
    """Markov model over the token sequences of training sessions."""
    tok = [sid.tokens for sid in table.ids]
    return MarkovModel.fit([[tok[i] for i in s] for s in sessions], table.M, max_main + 2, carry)


def decode_sessions(table: IdTable, trie: Trie, model: MarkovModel, sessions: list, beam: int,
                    topk: int) -> list[DecodeOutcome]:
    """Decode each session's last item from the items before it."""
    tok = [sid.tokens for sid in table.ids]
    return [DecodeOutcome.from_ranked(s[-1], decode([tok[i] for i in s[:-1]], model, table, trie,
                                                    beam, topk))
            for s in sessions]


def format_decodes(decodes: list[DecodeOutcome], names: list[str]) -> str:
    return "".join(json.dumps(dict(target=names[d.target], ranked=[names[i] for i in d.ranked]))
                   + "\n" for d in decodes)


def run_pipeline(config: PipelineConfig, out_dir=None) -> PipelineResult:
    """Run every stage in order; artifacts go to ``out_dir`` when given."""
    config.validate()
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.json").write_text(config.to_json())
    write = (lambda name, text: (out / name).write_text(text)) if out is not None else (lambda *a: None)
    tcfg = config.effective_train()
    timings: dict[str, float] = {}

    with _stage("catalog", timings):
        if config.catalog_path is not None:
            catalog = parse_catalog(Path(config.catalog_path).read_text())
        else:
            catalog = generate_catalog(config.catalog)
        write("catalog.tsv", format_catalog(catalog))

    with _stage("sessions", timings):
        sessions = generate_sessions(catalog, config.sessions)
        train_s, test_s = split_sessions(sessions, config.test_fraction, config.sessions.seed)
        write("sessions_train.txt", format_sessions(train_s, catalog))
        write("sessions_test.txt", format_sessions(test_s, catalog))

    with _stage("piba", timings):
        assignment = assign_lengths(catalog.table, PibaParams(K=tcfg.K, beta=config.beta))
        targets = assignment.masks
        if config.fixed_length is not None:
            targets = np.ones_like(targets)
        write("lengths.tsv", format_assignment(catalog.table, assignment, catalog.item_ids))

    with _stage("train", timings):
        result = train(catalog.features, targets, tcfg)
        model = result.model
        if out is not None:
            save_checkpoint(out / "model.npz", model, tcfg)
        write("history.csv", history_to_csv(result.history))

    with _stage("assign", timings):
        raw = assign_raw_ids(catalog.features, model, tcfg.tau)
        write("raw_ids.tsv", format_raw_ids(raw, catalog.item_ids))

    with _stage("resolve", timings):
        table = resolve_collisions(raw, tcfg.M, tcfg.K, catalog.item_ids)
        write("ids.tsv", format_id_table(table))

    with _stage("trie", timings):
        trie = Trie.build(table)

    with _stage("sequence_model", timings):
        seq_model = fit_sequence_model(table, train_s, tcfg.K, config.carry)

    with _stage("decode", timings):
        decodes = decode_sessions(table, trie, seq_model, test_s, config.beam, config.topk)
        write("decodes.jsonl", format_decodes(decodes, catalog.item_ids))

    with _stage("report", timings):
        recon = loss_recon(catalog.features, forward(model, catalog.features).x_hat)
        rows = [h.as_row() for h in result.history]
        report = stratified_report(table, catalog, decodes, config.topk, raw, recon, rows, timings)
        write("report.csv", report.to_csv())
        write("report.json", report.to_json())
        write("summary.txt", report.summary())
    report.timings = dict(timings)
    return PipelineResult(report, catalog, assignment, model, raw, table, trie, seq_model, decodes)
