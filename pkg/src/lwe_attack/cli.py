"""Command-line entry point: one seeded subcommand per pipeline stage.

Every command resolves its configuration as preset defaults, then the JSON file
given by ``--config`` (a previous run's manifest also works), then explicit
flags. The resolved configuration is written into ``manifest.json`` next to the
artifacts, so rerunning with ``--config manifest.json`` regenerates them.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import __version__
from .checksum import crc64
from .dataset import (FormatError, TrainSet, assemble, load, load_reduction, load_samples,
                      pretrain_set, save, save_reduction, save_samples, synthesize_reduced)
from .distinguish import RecoverConfig, RecoveryReport, make_hook
from .instance import LweParams, gen_samples, gen_secret, nomod_fraction
from .model import ModelConfig
from .modq import ContractError
from .presets import PRESETS, get_preset
from .reduction import ReductionSchedule, reduce_batch
from .train import Checkpoint, TrainConfig, finetune, init_checkpoint, pretrain, run_attack

log = logging.getLogger("lwe_attack")

EXIT_OK = 0
EXIT_MISSING_INPUT = 2
EXIT_BAD_CONFIG = 3
EXIT_NO_SEED = 4
EXIT_NOT_RECOVERED = 10


class MissingInput(Exception):
    pass


class ConfigError(Exception):
    pass


SECTIONS = {
    "lwe": LweParams,
    "reduction": ReductionSchedule,
    "train": TrainConfig,
    "recover": RecoverConfig,
    "model": ModelConfig,
}

# command-specific options and their defaults
OPTIONS = {
    "gen": {},
    "reduce": {"count": 8, "m": None},
    "synth": {"target_rho": 0.1, "size": 200_000},
    "assemble": {"fresh_secret": False},
    "train": {},
    "pretrain": {"secrets": 16, "h_values": [2, 3], "target_rho": 0.1, "rows": 50_000},
    "finetune": {},
    "attack": {"count": 8, "m": None},
    "nomod": {},
    "report": {},
}

INPUTS = {
    "gen": [],
    "reduce": ["samples"],
    "synth": [],
    "assemble": ["samples", "reductions"],
    "train": ["data"],
    "pretrain": [],
    "finetune": ["theta", "data"],
    "attack": [],
    "nomod": ["data", "samples"],
    "report": ["runs"],
}
OPTIONAL_INPUTS = {"train": ["samples"], "finetune": ["samples"]}


# ---------------------------------------------------------------- configuration

def preset_defaults(name: str) -> dict:
    p = get_preset(name)
    return {
        "lwe": {"n": p.n, "q": p.q, "sigma_e": p.sigma_e, "h": 3, "secret_dist": "binary"},
        "reduction": {},
        "train": {"lr": p.lr, "warmup": p.warmup, "batch_size": p.batch_size},
        "recover": {},
        "model": {"n": p.n, "q": p.q, "layers": p.layers, "d_model": p.d_model,
                  "heads": p.heads, "vocab_base": p.vocab_base, "vocab_bucket": p.vocab_bucket},
        "omega": p.omega,
        "m": p.m,
    }


def _merge(base: dict, over: dict) -> dict:
    out = dict(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def _build(section: str, values: dict):
    cls = SECTIONS[section]
    names = {f.name for f in fields(cls)}
    unknown = set(values) - names
    if unknown:
        raise ConfigError(f"unknown {section} keys: {sorted(unknown)}")
    try:
        return cls(**values)
    except (ContractError, TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {section} config: {exc}") from exc


def resolve_config(command: str, args: argparse.Namespace) -> dict:
    file_cfg: dict = {}
    if args.config:
        path = Path(args.config)
        if not path.exists():
            raise MissingInput(f"config file {path} not found")
        try:
            file_cfg = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from exc
        if "command" in file_cfg and "config" in file_cfg:   # a manifest
            file_cfg = file_cfg["config"]
    preset = args.preset or file_cfg.get("preset") or "desk64"
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r}")
    cfg = _merge(preset_defaults(preset), {"options": dict(OPTIONS[command]), "inputs": {}})
    cfg = _merge(cfg, file_cfg)
    cfg["preset"] = preset
    if args.seed is not None:
        cfg["seed"] = args.seed
    if args.workers is not None:
        cfg["workers"] = args.workers
    cfg.setdefault("workers", 1)
    for name in INPUTS[command] + OPTIONAL_INPUTS.get(command, []):
        val = getattr(args, name, None)
        if val is not None:
            cfg["inputs"][name] = val if isinstance(val, list) else str(val)
    for key, val in (getattr(args, "set", None) or []):
        section, _, field_name = key.partition(".")
        if not field_name:
            raise ConfigError(f"--set expects section.key, got {key!r}")
        cfg.setdefault(section, {})[field_name] = val
    if "seed" not in cfg:
        if args.strict:
            raise SeedMissing("--strict requires an explicit seed")
        cfg["seed"] = 0
    seed = cfg["seed"]
    if not isinstance(seed, int) or not 0 <= seed < 1 << 64:
        raise ConfigError("seed must be an unsigned 64-bit integer")
    cfg["train"].setdefault("seed", seed)
    cfg["recover"].setdefault("seed", seed)
    for section in SECTIONS:
        _build(section, cfg[section])
    return cfg


class SeedMissing(Exception):
    pass


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()


def _file_digest(path: Path) -> str:
    return f"{crc64(path.read_bytes()):016x}"


def write_manifest(out: Path, command: str, cfg: dict, outputs: list[str], result: dict) -> None:
    inputs = {}
    for name, val in cfg.get("inputs", {}).items():
        paths = val if isinstance(val, list) else [val]
        entries = []
        for p in paths:
            p = Path(p)
            files = sorted(p.glob("*")) if p.is_dir() else [p]
            entries.append({"path": str(p), "crc64": {f.name: _file_digest(f) for f in files
                                                      if f.is_file()}})
        inputs[name] = entries
    manifest = {
        "command": command,
        "config": cfg,
        "config_hash": config_hash(cfg),
        "seed": cfg["seed"],
        "inputs": inputs,
        "outputs": {o: _file_digest(out / o) for o in outputs},
        "result": result,
        "versions": {"lwe_attack": __version__, "numpy": np.__version__,
                     "python": sys.version.split()[0]},
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _need(cfg: dict, name: str) -> Path:
    val = cfg["inputs"].get(name)
    if val is None:
        raise MissingInput(f"missing input --{name}")
    p = Path(val)
    if not p.exists():
        raise MissingInput(f"input {p} does not exist")
    return p


def _load_input(loader, path: Path):
    try:
        return loader(path)
    except (FormatError, OSError) as exc:
        raise MissingInput(f"cannot read {path}: {exc}") from exc


def _lwe(cfg) -> LweParams:
    return _build("lwe", cfg["lwe"])


def _model(cfg, **over) -> ModelConfig:
    return _build("model", _merge(cfg["model"], over))


def _write_events(out: Path, events, name: str = "events.csv") -> str:
    (out / name).write_text(events.to_csv(wall=False))
    rows = [(r["step"], r["wall_seconds"]) for r in events.records if r["wall_seconds"] != ""]
    with open(out / "timings.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "wall_seconds"])
        w.writerows(rows)
    return name


def _recovery_result(events, samples) -> dict:
    report = events.recovery
    last = events.reports[-1][1] if events.reports else None
    out = {"recovered": report is not None,
           "attempts": len(events.reports),
           "recovered_step": None if report is None else
           next(s for s, r in events.reports if r is report)}
    if report is not None and samples.secret is not None:
        out["matches_planted"] = bool(np.array_equal(report.secret, samples.secret))
    if last is not None:
        out["last_scores_top"] = np.argsort(-last.scores)[:8].tolist()
    return out


# ---------------------------------------------------------------- commands

def cmd_gen(cfg, out: Path) -> tuple[dict, list[str], int]:
    params = _lwe(cfg)
    secret = gen_secret(params, cfg["seed"])
    samples = gen_samples(params, secret, cfg["seed"])
    save_samples(samples, out / "samples.slsf", cfg["seed"])
    return {"t": params.t}, ["samples.slsf", "samples.meta.json"], EXIT_OK


def _reduce(cfg, samples, out: Path) -> list[str]:
    opts = cfg["options"]
    m = opts.get("m") or cfg["m"]
    schedule = _build("reduction", cfg["reduction"])
    results = reduce_batch(samples, int(opts["count"]), int(m), int(cfg["omega"]), schedule,
                           cfg["seed"], int(cfg["workers"]))
    rdir = out / "reductions"
    rdir.mkdir(exist_ok=True)
    names = []
    with open(out / "reduction_timings.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["matrix", "loop", "reducer", "rho", "seconds", "accepted"])
        for i, res in enumerate(results):
            save_reduction(res, rdir / f"red_{i:03d}.slsf", cfg["seed"] ^ i)
            names += [f"reductions/red_{i:03d}.slsf", f"reductions/red_{i:03d}.meta.json"]
            for rec in res.loop_log:
                w.writerow([i, rec.loop, rec.reducer, repr(rec.rho), f"{rec.seconds:.4f}",
                            int(rec.accepted)])
    return names


def cmd_reduce(cfg, out):
    samples = _load_input(load_samples, _need(cfg, "samples"))
    names = _reduce(cfg, samples, out)
    return {"matrices": len(names) // 2}, names, EXIT_OK


def _load_reductions(path: Path):
    files = sorted(path.glob("red_*.slsf")) if path.is_dir() else [path]
    if not files:
        raise MissingInput(f"no reductions found in {path}")
    return [_load_input(load_reduction, f) for f in files]


def cmd_assemble(cfg, out):
    samples = _load_input(load_samples, _need(cfg, "samples"))
    reds = _load_reductions(_need(cfg, "reductions"))
    secret = None
    if cfg["options"].get("fresh_secret"):
        secret = gen_secret(samples.params, cfg["seed"] ^ 0x5EC7E7)
    ts = assemble(reds, samples, secret, cfg["seed"])
    save(ts, out / "train.slsf")
    return {"rows": len(ts), "rho": ts.meta.get("rho")}, ["train.slsf", "train.meta.json"], EXIT_OK


def cmd_synth(cfg, out):
    params = _lwe(cfg)
    opts = cfg["options"]
    secret = gen_secret(params, cfg["seed"])
    samples = gen_samples(params, secret, cfg["seed"])
    ts = synthesize_reduced(params, float(opts["target_rho"]), int(opts["size"]), secret,
                            cfg["seed"])
    save(ts, out / "train.slsf")
    save_samples(samples, out / "samples.slsf", cfg["seed"])
    nm = nomod_fraction(ts.rows, ts.targets, secret, params.q)
    return ({"rows": len(ts), "rho": ts.meta["rho"], "nomod": nm},
            ["train.slsf", "train.meta.json", "samples.slsf", "samples.meta.json"], EXIT_OK)


def _train_common(cfg, out, ck: Checkpoint, data: TrainSet, tune: bool):
    tcfg = _build("train", cfg["train"])
    rcfg = _build("recover", cfg["recover"])
    samples = None
    if cfg["inputs"].get("samples"):
        samples = _load_input(load_samples, _need(cfg, "samples"))
    hook = None
    if samples is not None:
        token = 0 if ck.model.secret_tokens else None
        hook = make_hook(samples, rcfg, data.rows, token)
    if tune:
        ck, events = finetune(ck, data, tcfg, hook, wall=True)
    else:
        ck, events = run_attack(ck, data, tcfg, hook, wall=True)
    ck.save(out / "checkpoint.slsm")
    names = ["checkpoint.slsm", _write_events(out, events)]
    result = {"steps": ck.step, "provenance": ck.meta.get("provenance")}
    code = EXIT_OK
    if samples is not None:
        result.update(_recovery_result(events, samples))
        if events.reports:
            rep = events.recovery or events.reports[-1][1]
            (out / "report.json").write_text(rep.to_json() + "\n")
            (out / "scores.csv").write_text(rep.scores_csv())
            names += ["report.json", "scores.csv"]
        if events.recovery is None:
            code = EXIT_NOT_RECOVERED
        if samples.secret is not None:
            result["nomod"] = nomod_fraction(data.rows, data.targets, samples.secret, data.q)
    result["size"] = len(data) if tcfg.sample_cap is None else min(len(data), tcfg.sample_cap)
    result["rho"] = data.meta.get("rho")
    return result, names, code


def cmd_train(cfg, out):
    data = _load_input(load, _need(cfg, "data"))
    model = _model(cfg, n=data.n, q=data.q)
    ck = init_checkpoint(model, cfg["seed"], _build("train", cfg["train"]).init_std)
    return _train_common(cfg, out, ck, data, tune=False)


def cmd_finetune(cfg, out):
    theta = _load_input(Checkpoint.load, _need(cfg, "theta"))
    data = _load_input(load, _need(cfg, "data"))
    return _train_common(cfg, out, theta, data, tune=True)


def build_pretrain_set(params: LweParams, opts: dict, seed: int):
    """Shared synthetic rows paired with ``secrets`` planted secrets of varying weight."""
    count = int(opts["secrets"])
    hs = list(opts["h_values"])
    secrets = []
    for i in range(count):
        p = LweParams(n=params.n, q=params.q, sigma_e=params.sigma_e, h=int(hs[i % len(hs)]),
                      secret_dist=params.secret_dist)
        secrets.append(gen_secret(p, (seed ^ (0x9E3779B97F4A7C15 + i)) % (1 << 64)))
    rows = synthesize_reduced(params, float(opts["target_rho"]), int(opts["rows"]),
                              secrets[0], seed).rows
    return pretrain_set(rows, secrets, params, seed), secrets


def cmd_pretrain(cfg, out):
    params = _lwe(cfg)
    opts = cfg["options"]
    ts, secrets = build_pretrain_set(params, opts, cfg["seed"])
    model = _model(cfg, n=params.n, q=params.q, secret_tokens=len(secrets))
    ck = pretrain(model, ts, _build("train", cfg["train"]))
    ck.save(out / "theta_star.slsm")
    return {"steps": ck.step, "secrets": len(secrets)}, ["theta_star.slsm"], EXIT_OK


def cmd_attack(cfg, out):
    code = EXIT_OK
    params = _lwe(cfg)
    secret = gen_secret(params, cfg["seed"])
    samples = gen_samples(params, secret, cfg["seed"])
    save_samples(samples, out / "samples.slsf", cfg["seed"])
    names = ["samples.slsf", "samples.meta.json"]
    names += _reduce(cfg, samples, out)
    reds = [load_reduction(out / n) for n in names if n.endswith(".slsf") and "red_" in n]
    data = assemble(reds, samples, None, cfg["seed"])
    save(data, out / "train.slsf")
    names += ["train.slsf", "train.meta.json"]
    cfg["inputs"] = {}
    model = _model(cfg, n=params.n, q=params.q)
    ck = init_checkpoint(model, cfg["seed"], _build("train", cfg["train"]).init_std)
    tcfg = _build("train", cfg["train"])
    hook = make_hook(samples, _build("recover", cfg["recover"]), data.rows)
    ck, events = run_attack(ck, data, tcfg, hook, wall=True)
    ck.save(out / "checkpoint.slsm")
    names += ["checkpoint.slsm", _write_events(out, events)]
    result = _recovery_result(events, samples)
    result.update(rows=len(data), rho=data.meta.get("rho"),
                  nomod=nomod_fraction(data.rows, data.targets, secret, params.q))
    if events.reports:
        rep = events.recovery or events.reports[-1][1]
        (out / "report.json").write_text(rep.to_json() + "\n")
        names.append("report.json")
    if events.recovery is None:
        code = EXIT_NOT_RECOVERED
    return result, names, code


def cmd_nomod(cfg, out):
    data = _load_input(load, _need(cfg, "data"))
    samples = _load_input(load_samples, _need(cfg, "samples"))
    if samples.secret is None:
        raise ConfigError("sample file carries no secret")
    value = nomod_fraction(data.rows, data.targets, samples.secret, data.q)
    (out / "nomod.json").write_text(json.dumps({"nomod": value}) + "\n")
    print(repr(value))
    return {"nomod": value}, ["nomod.json"], EXIT_OK


def cmd_report(cfg, out):
    runs = cfg["inputs"].get("runs") or []
    manifests = []
    for r in runs:
        p = Path(r)
        if not p.exists():
            raise MissingInput(f"run directory {p} does not exist")
        manifests += sorted(p.rglob("manifest.json")) if p.is_dir() else [p]
    rho_rows, nomod_rows, sample_rows = [], [], []
    for mpath in manifests:
        man = json.loads(mpath.read_text())
        run = str(mpath.parent)
        res = man.get("result", {})
        timings = mpath.parent / "reduction_timings.csv"
        if timings.exists():
            with open(timings) as fh:
                elapsed: dict[str, float] = {}
                for row in csv.DictReader(fh):
                    elapsed[row["matrix"]] = elapsed.get(row["matrix"], 0.0) + float(row["seconds"])
                    rho_rows.append([run, row["matrix"], row["loop"], row["reducer"],
                                     f"{elapsed[row['matrix']]:.4f}", row["rho"]])
        if "recovered" in res:
            nomod_rows.append([run, res.get("rho"), res.get("nomod"), int(res["recovered"])])
            sample_rows.append([run, res.get("size", res.get("rows")), int(res["recovered"]),
                                res.get("recovered_step")])
    tables = {
        "rho_vs_time.csv": (["run", "matrix", "loop", "reducer", "seconds", "rho"], rho_rows),
        "nomod_vs_success.csv": (["run", "rho", "nomod", "recovered"], nomod_rows),
        "samples_vs_recovery.csv": (["run", "samples", "recovered", "recovered_step"], sample_rows),
    }
    for name, (header, rows) in tables.items():
        with open(out / name, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            w.writerows(rows)
    return {"runs": len(manifests)}, list(tables), EXIT_OK


COMMANDS = {
    "gen": (cmd_gen, "generate an LWE instance and its samples"),
    "reduce": (cmd_reduce, "reduce seeded subsamples of a sample file"),
    "synth": (cmd_synth, "synthesize a reduced-looking training set"),
    "assemble": (cmd_assemble, "build a training set from reductions"),
    "train": (cmd_train, "train a model, attempting recovery periodically"),
    "pretrain": (cmd_pretrain, "pre-train on many secrets with secret tokens"),
    "finetune": (cmd_finetune, "fine-tune a pre-trained model on a new secret"),
    "attack": (cmd_attack, "gen, reduce, assemble, train and recover in one run"),
    "nomod": (cmd_nomod, "fraction of pairs without modular wraparound"),
    "report": (cmd_report, "aggregate run manifests into CSV tables"),
}


def _kv(text: str):
    key, sep, val = text.partition("=")
    if not sep:
        raise argparse.ArgumentTypeError("expected section.key=value")
    try:
        return key, json.loads(val)
    except json.JSONDecodeError:
        return key, val


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file (or a manifest.json)")
    common.add_argument("--seed", type=int, help="global seed (unsigned 64-bit)")
    common.add_argument("--workers", type=int, help="worker processes for reduction")
    common.add_argument("--out", default=".", help="output directory")
    common.add_argument("--preset", help=f"parameter preset ({', '.join(PRESETS)})")
    common.add_argument("--strict", action="store_true", help="require an explicit seed")
    common.add_argument("--set", action="append", type=_kv, metavar="SECTION.KEY=VALUE",
                        help="override one config value (JSON-decoded)")
    common.add_argument("-v", "--verbose", action="count", default=0)
    parser = argparse.ArgumentParser(prog="lwe-attack", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, parents=[common], help=help_text)
        for inp in INPUTS[name] + OPTIONAL_INPUTS.get(name, []):
            if inp == "runs":
                p.add_argument("runs", nargs="*", help="run directories or manifests")
            else:
                p.add_argument(f"--{inp}", help=f"{inp} input path")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    cmd, _ = COMMANDS[args.command]
    try:
        cfg = resolve_config(args.command, args)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        result, outputs, code = cmd(cfg, out)
        write_manifest(out, args.command, cfg, outputs, result)
    except MissingInput as exc:
        log.error("%s", exc)
        return EXIT_MISSING_INPUT
    except SeedMissing as exc:
        log.error("%s", exc)
        return EXIT_NO_SEED
    except (ConfigError, ContractError) as exc:
        log.error("%s", exc)
        return EXIT_BAD_CONFIG
    if code == EXIT_NOT_RECOVERED:
        log.warning("secret not recovered")
    return code


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
