"""On-disk formats: config files, dataset directories, checkpoints and stores.

Everything is line-oriented text.  Record files are JSON lines whose reals
are written with 17 significant digits, so ``write -> read -> write`` is
byte-identical and every f64 survives the trip exactly.  Config files are a
flat ``key = value`` list whose first entry must be ``version = 1``.
"""

from __future__ import annotations

import csv
import io
import json
import math
import os
from dataclasses import fields
from pathlib import Path
from typing import Iterable

import numpy as np

from .errors import ConfigError, DataError
from .losses import CentroidTable
from .momentprop import ProjectedGaussian
from .scoring import LABELS, Trial
from .synthbench.data import Dataset, Split, SynthConfig
from .synthbench.model import Architecture, XiPlusModel
from .synthbench.train import Checkpoint, TrainConfig

CONFIG_VERSION = 1
CHECKPOINT_VERSION = 1
COV_KINDS = ("none", "diag", "full")

# -- number formatting ----------------------------------------------------


def fmt_float(x) -> str:
    x = float(x)
    if not math.isfinite(x):
        raise DataError(f"cannot serialize non-finite value {x!r}")
    return "%.17g" % x


def _array(values) -> str:
    flat = np.asarray(values, dtype=np.float64).reshape(-1)
    return "[" + ",".join(fmt_float(v) for v in flat) + "]"


def _record(pairs) -> str:
    """One JSON object with keys in the given order; arrays pre-rendered."""
    parts = []
    for key, value in pairs:
        if isinstance(value, np.ndarray):
            text = _array(value)
        elif isinstance(value, float):
            text = fmt_float(value)
        else:
            text = json.dumps(value, separators=(",", ":"), sort_keys=isinstance(value, dict))
        parts.append(json.dumps(key) + ":" + text)
    return "{" + ",".join(parts) + "}"


def _read_jsonl(path) -> list:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except FileNotFoundError:
        raise DataError(f"no such file: {path}") from None
    out = []
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        try:
            out.append(json.loads(line))
        except json.JSONDecodeError as exc:
            raise DataError(f"{path}:{lineno}: malformed record ({exc.msg})") from None
    return out


def write_text(path, text: str):
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
    except OSError as exc:
        raise DataError(f"cannot write {path}: {exc.strerror or exc}") from None


# -- config files ---------------------------------------------------------


def _config_fields() -> dict:
    """Known keys and their defaults; ``seed`` is shared by both configs."""
    known = {}
    for cls in (SynthConfig, TrainConfig):
        inst = cls()
        for f in fields(cls):
            known.setdefault(f.name, getattr(inst, f.name))
    return known


def _coerce(key, raw: str, default):
    raw = raw.strip()
    if isinstance(default, bool):
        low = raw.lower()
        if low in ("true", "1", "yes"):
            return True
        if low in ("false", "0", "no"):
            return False
        raise ValueError(f"expected a boolean, got {raw!r}")
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    if isinstance(default, tuple):
        items = [s for s in raw.split(",") if s.strip()]
        return tuple(float(s) for s in items)
    return raw


def parse_config(text: str, source: str = "<config>") -> dict:
    """Parse a flat config into ``{key: value}``; returns values with line numbers.

    The result maps each key to ``(value, lineno)``.  Unknown keys, repeated
    keys, malformed lines and a missing or unsupported version are errors.
    """
    known = _config_fields()
    values: dict = {}
    version_seen = False
    for lineno, line in enumerate(text.splitlines(), 1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, raw = (s.strip() for s in body.split("=", 1))
        if not version_seen:
            if key != "version":
                raise ConfigError(f"{source}:{lineno}: first entry must be 'version = {CONFIG_VERSION}'")
            if raw != str(CONFIG_VERSION):
                raise ConfigError(f"{source}:{lineno}: unsupported config version {raw!r}")
            version_seen = True
            continue
        if key not in known:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        try:
            values[key] = (_coerce(key, raw, known[key]), lineno)
        except ValueError as exc:
            raise ConfigError(f"{source}:{lineno}: bad value for {key}: {exc}") from None
    if not version_seen:
        raise ConfigError(f"{source}: missing 'version = {CONFIG_VERSION}' line")
    return values


def read_config(path) -> dict:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    return parse_config(text, str(path))


def _build(cls, values: dict, source: str, overrides: dict | None = None):
    keys = set(cls.keys())
    kwargs = {k: v for k, (v, _) in values.items() if k in keys}
    kwargs.update(overrides or {})
    try:
        return cls(**kwargs)
    except ConfigError as exc:
        msg = str(exc)
        key = msg.split(" ", 1)[0]
        if key in values:
            raise ConfigError(f"{source}:{values[key][1]}: {msg}") from None
        raise ConfigError(f"{source}: {msg}") from None


def synth_config(values: dict, source="<config>", **overrides) -> SynthConfig:
    return _build(SynthConfig, values, source, overrides)


def train_config(values: dict, source="<config>", **overrides) -> TrainConfig:
    return _build(TrainConfig, values, source, overrides)


def _render_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        return ", ".join(repr(float(v)) for v in value)
    return str(value)


def format_config(config) -> str:
    """Canonical text of a config dataclass (round-trips through :func:`parse_config`)."""
    lines = [f"version = {CONFIG_VERSION}"]
    for f in fields(config):
        lines.append(f"{f.name} = {_render_value(getattr(config, f.name))}")
    return "\n".join(lines) + "\n"


# -- trials ---------------------------------------------------------------


def parse_trials(text: str, source: str = "<trials>") -> list:
    """``enroll_id test_id label`` per line; blank lines and ``#`` comments ignored."""
    trials = []
    for lineno, line in enumerate(text.splitlines(), 1):
        tokens = line.split("#", 1)[0].split()
        if not tokens:
            continue
        if len(tokens) != 3:
            raise DataError(f"{source}:{lineno}: expected 'enroll_id test_id label', got {len(tokens)} fields")
        if tokens[2] not in LABELS:
            raise DataError(f"{source}:{lineno}: label must be one of {', '.join(LABELS)}")
        trials.append(Trial(*tokens))
    return trials


def format_trials(trials: Iterable[Trial]) -> str:
    return "".join(f"{t.enroll_id} {t.test_id} {t.label}\n" for t in trials)


def read_trials(path) -> list:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except FileNotFoundError:
        raise DataError(f"trials file not found: {path}") from None
    return parse_trials(text, str(path))


# -- dataset directories ----------------------------------------------------


def _utterance_lines(split: Split) -> str:
    lines = []
    for uid, spk, frames in zip(split.ids, split.speakers, split.frames):
        lines.append(_record([("id", uid), ("speaker", spk), ("num_frames", frames.shape[0]),
                              ("frame_dim", frames.shape[1]), ("frames", frames)]))
    return "\n".join(lines) + "\n"


def _truth_lines(dataset: Dataset) -> str:
    lines = []
    if dataset.mixing is not None:
        lines.append(_record([("kind", "mixing"), ("shape", list(dataset.mixing.shape)),
                              ("values", dataset.mixing)]))
    for spk in sorted(dataset.identities):
        lines.append(_record([("kind", "speaker"), ("id", spk), ("identity", dataset.identities[spk])]))
    for name, split in (("train", dataset.train), ("eval", dataset.eval)):
        for uid, spk, sig, var in zip(split.ids, split.speakers, split.frame_sigmas, split.true_variance):
            lines.append(_record([("kind", "utterance"), ("id", uid), ("split", name), ("speaker", spk),
                                  ("sigma2", float(var)), ("frame_sigmas", sig)]))
    return "\n".join(lines) + "\n"


def write_dataset(dataset: Dataset, out_dir):
    """``config.txt``, ``train/``, ``eval/``, ``trials.txt`` and ``truth.jsonl``."""
    out = Path(out_dir)
    write_text(out / "config.txt", format_config(dataset.config))
    write_text(out / "train" / "utterances.jsonl", _utterance_lines(dataset.train))
    write_text(out / "eval" / "utterances.jsonl", _utterance_lines(dataset.eval))
    write_text(out / "trials.txt", format_trials(dataset.trials))
    write_text(out / "truth.jsonl", _truth_lines(dataset))


def read_split(path) -> Split:
    ids, speakers, frames = [], [], []
    for rec in _read_jsonl(path):
        try:
            x = np.asarray(rec["frames"], dtype=np.float64).reshape(rec["num_frames"], rec["frame_dim"])
            ids.append(rec["id"])
            speakers.append(rec["speaker"])
        except (KeyError, ValueError, TypeError) as exc:
            raise DataError(f"{path}: bad utterance record ({exc})") from None
        frames.append(x)
    if not frames:
        raise DataError(f"{path}: no utterances")
    if len({f.shape for f in frames}) != 1:
        raise DataError(f"{path}: utterances must share frame count and dimension")
    return Split(ids, speakers, np.stack(frames), None)


def read_dataset(data_dir, require_truth: bool = False) -> Dataset:
    """Load a directory written by :func:`write_dataset`.

    Ground truth is attached when ``truth.jsonl`` exists; ``require_truth``
    turns its absence into an error.
    """
    root = Path(data_dir)
    if not root.is_dir():
        raise DataError(f"dataset directory not found: {root}")
    cfg_path = root / "config.txt"
    config = synth_config(read_config(cfg_path), str(cfg_path)) if cfg_path.exists() else SynthConfig()
    train = read_split(root / "train" / "utterances.jsonl")
    evl = read_split(root / "eval" / "utterances.jsonl")
    trials_path = root / "trials.txt"
    trials = read_trials(trials_path) if trials_path.exists() else []
    identities, mixing = {}, None
    truth_path = root / "truth.jsonl"
    if truth_path.exists():
        sigmas = {}
        for rec in _read_jsonl(truth_path):
            kind = rec.get("kind")
            if kind == "utterance":
                sigmas[rec["id"]] = np.asarray(rec["frame_sigmas"], dtype=np.float64)
            elif kind == "speaker":
                identities[rec["id"]] = np.asarray(rec["identity"], dtype=np.float64)
            elif kind == "mixing":
                mixing = np.asarray(rec["values"], dtype=np.float64).reshape(rec["shape"])
        for split in (train, evl):
            missing = [u for u in split.ids if u not in sigmas]
            if missing:
                raise DataError(f"{truth_path}: no ground truth for utterance {missing[0]!r}")
            split.frame_sigmas = np.stack([sigmas[u] for u in split.ids])
    elif require_truth:
        raise DataError(f"ground-truth file missing: {truth_path}")
    return Dataset(config, train, evl, trials, identities, mixing)


def read_utterance_list(path) -> list:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except FileNotFoundError:
        raise DataError(f"utterance list not found: {path}") from None
    return [tok for line in text.splitlines() for tok in line.split("#", 1)[0].split()[:1]]


# -- embeddings -------------------------------------------------------------


def embedding_record(uid: str, emb: ProjectedGaussian, cov_kind: str) -> str:
    if cov_kind not in COV_KINDS:
        raise ConfigError(f"cov mode must be one of {COV_KINDS}")
    mean = np.asarray(emb.mean, dtype=np.float64)
    if cov_kind == "none":
        cov = np.zeros(0)
    elif cov_kind == "diag":
        cov = emb.variance()
    else:
        cov = emb.dense()
    return _record([("id", uid), ("dim", int(mean.size)), ("mean", mean), ("cov_kind", cov_kind), ("cov", cov)])


def write_embeddings(path, store: dict, cov_kind: str):
    lines = [embedding_record(uid, emb, cov_kind) for uid, emb in store.items()]
    write_text(path, "\n".join(lines) + "\n")


def parse_embedding(rec: dict, where: str = "") -> tuple:
    try:
        uid, dim, kind = rec["id"], int(rec["dim"]), rec["cov_kind"]
        mean = np.asarray(rec["mean"], dtype=np.float64)
        cov = np.asarray(rec["cov"], dtype=np.float64)
    except (KeyError, TypeError, ValueError) as exc:
        raise DataError(f"{where}bad embedding record ({exc})") from None
    expected = {"none": 0, "diag": dim, "full": dim * dim}
    if kind not in expected:
        raise DataError(f"{where}unknown cov_kind {kind!r}")
    if mean.shape != (dim,) or cov.size != expected[kind]:
        raise DataError(f"{where}array lengths do not match dim={dim}, cov_kind={kind}")
    if not (np.all(np.isfinite(mean)) and np.all(np.isfinite(cov))):
        raise DataError(f"{where}non-finite values in embedding {uid!r}")
    if kind == "none":
        return uid, ProjectedGaussian(mean, None)
    if kind == "diag":
        return uid, ProjectedGaussian(mean, cov, diagonal=True)
    return uid, ProjectedGaussian(mean, cov.reshape(dim, dim))


def read_embeddings(path) -> dict:
    store = {}
    for i, rec in enumerate(_read_jsonl(path), 1):
        uid, emb = parse_embedding(rec, f"{path}: record {i}: ")
        if uid in store:
            raise DataError(f"{path}: duplicate embedding id {uid!r}")
        store[uid] = emb
    return store


# -- centroids ----------------------------------------------------------------


def write_centroids(path, table: CentroidTable):
    lines = [_record([("speaker_id", spk), ("centroid", table.centroids[spk]), ("count", int(table.counts[spk]))])
             for spk in table.speakers]
    write_text(path, "\n".join(lines) + "\n")


def read_centroids(path) -> CentroidTable:
    centroids, counts = {}, {}
    for rec in _read_jsonl(path):
        try:
            spk = rec["speaker_id"]
            centroids[spk] = np.asarray(rec["centroid"], dtype=np.float64)
            counts[spk] = int(rec["count"])
        except (KeyError, TypeError, ValueError) as exc:
            raise DataError(f"{path}: bad centroid record ({exc})") from None
    if not centroids:
        raise DataError(f"{path}: no centroids")
    return CentroidTable(centroids, counts, str(path))


# -- checkpoints ----------------------------------------------------------------


def _arch_dict(arch: Architecture) -> dict:
    return {f.name: getattr(arch, f.name) for f in fields(arch)}


def _config_dict(config: TrainConfig) -> dict:
    return {f.name: getattr(config, f.name) for f in fields(config)}


def format_checkpoint(ckpt: Checkpoint, speakers: list | None = None) -> str:
    """Header line (version, stage, epoch, config echo, rng state) then one line per tensor."""
    model = ckpt.model
    header = [("format_version", CHECKPOINT_VERSION), ("stage", ckpt.stage), ("epoch", int(ckpt.epoch)),
              ("config", _config_dict(ckpt.config)), ("architecture", _arch_dict(model.arch)),
              ("margin_schedule", [model.aam.margin_start, model.aam.margin_end, model.aam.margin_final]),
              ("speakers", list(speakers or [])), ("rng_state", ckpt.rng_state)]
    lines = [_record(header)]
    for name, value in model.state().items():
        arr = np.asarray(value, dtype=np.float64)
        lines.append(_record([("name", name), ("shape", list(arr.shape)), ("values", arr)]))
    return "\n".join(lines) + "\n"


def write_checkpoint(path, ckpt: Checkpoint, speakers: list | None = None):
    write_text(path, format_checkpoint(ckpt, speakers))


def read_checkpoint(path) -> tuple:
    """Returns ``(checkpoint, speakers)``."""
    records = _read_jsonl(path)
    if not records:
        raise DataError(f"{path}: empty checkpoint")
    header, tensors = records[0], records[1:]
    if header.get("format_version") != CHECKPOINT_VERSION:
        raise DataError(f"{path}: unsupported checkpoint version {header.get('format_version')!r}")
    try:
        config = TrainConfig(**header["config"])
        arch = Architecture(**header["architecture"])
    except (KeyError, TypeError) as exc:
        raise DataError(f"{path}: bad checkpoint header ({exc})") from None
    model = XiPlusModel.init(arch, np.random.default_rng(0), tuple(header["margin_schedule"]))
    state = model.state()
    seen = set()
    for rec in tensors:
        name = rec.get("name")
        if name not in state:
            raise DataError(f"{path}: unknown tensor {name!r}")
        target = state[name]
        shape = tuple(rec["shape"])
        if shape != target.shape:
            raise DataError(f"{path}: tensor {name} has shape {shape}, expected {target.shape}")
        target[...] = np.asarray(rec["values"], dtype=np.float64).reshape(shape)
        seen.add(name)
    missing = sorted(set(state) - seen)
    if missing:
        raise DataError(f"{path}: missing tensors {missing}")
    model.bump()
    rng_state = header.get("rng_state")
    ckpt = Checkpoint(model, config, header["epoch"], header["stage"], rng_state)
    return ckpt, list(header.get("speakers", []))


# -- reports --------------------------------------------------------------------

METRIC_COLUMNS = ("epoch", "ce_loss", "svl_loss", "total_loss", "kappa", "alpha", "lr")


def _cell(value) -> str:
    if isinstance(value, (int, np.integer)) and not isinstance(value, bool):
        return str(int(value))
    value = float(value)
    return "nan" if math.isnan(value) else "%.17g" % value


def format_metrics(history: list) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(METRIC_COLUMNS)
    for row in history:
        writer.writerow([_cell(row[c]) for c in METRIC_COLUMNS])
    return buf.getvalue()


def read_metrics(path) -> list:
    with open(path, encoding="utf-8", newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [{k: (int(v) if k == "epoch" else float(v)) for k, v in row.items()} for row in rows]


def format_diagnostics(report) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["utterance_id", "predicted_variance", "true_variance"])
    for uid, pred, true in zip(report.ids, report.predicted_variance, report.true_variance):
        writer.writerow([uid, _cell(pred), _cell(true)])
    return buf.getvalue()


def ensure_dir(path) -> Path:
    path = Path(path)
    try:
        os.makedirs(path, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create {path}: {exc.strerror or exc}") from None
    return path
