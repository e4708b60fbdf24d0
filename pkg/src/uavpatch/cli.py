"""Command-line entry point: one command per pipeline stage.

Every command reads the same config file, writes into its own stage
directory under ``--out`` and leaves a ``manifest.json`` recording the
config hash, seed, input hashes and a content digest of its outputs.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import shutil
import sys
import time
from contextlib import contextmanager
from pathlib import Path

import numpy as np
import torch

from .config import RunConfig, dump_config, load_config
from .errors import ConfigError, MissingArtifactError, NumericalError

log = logging.getLogger("uavpatch")

EXIT_OK, EXIT_CONFIG, EXIT_MISSING, EXIT_NUMERICAL = 0, 2, 3, 4
MANIFEST_VERSION = 1

STAGE_DIRS = {
    "prepare-data": "data",
    "train-detector": "detector",
    "gen-patch": "patch",
    "train-defense": "defense",
    "train-mask-baseline": "mask_baseline",
    "evaluate": "evaluate",
    "report": "report",
}
# files whose contents legitimately vary between identical runs
VOLATILE = {"timing.json"}


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def tree_digest(entries: dict[str, str]) -> str:
    """Digest over sorted ``<sha256> <path>`` lines, like a git tree listing."""
    lines = "".join(f"{h} {p}\n" for p, h in sorted(entries.items()))
    return hashlib.sha256(lines.encode()).hexdigest()


class Stage:
    """Output bookkeeping for one command run."""

    def __init__(self, cfg: RunConfig, command: str, subdir: str | None = None):
        self.cfg = cfg
        self.command = command
        self.out = Path(cfg.out)
        rel = STAGE_DIRS[command] if subdir is None else f"{STAGE_DIRS[command]}/{subdir}"
        self.final = self.out / rel
        self.dir = self.final.with_name(self.final.name + ".partial")
        self.inputs: dict[str, str] = {}

    def need(self, rel: str, producer: str) -> Path:
        """Resolve an upstream artifact, recording its hash as an input."""
        p = self.out / rel
        if not p.exists():
            raise MissingArtifactError(
                f"{p} not found; run `uavpatch {producer} --config <file> --out {self.out}` first")
        self.inputs[rel] = file_sha256(p)
        return p

    def begin(self):
        if self.final.exists():
            raise ConfigError(f"{self.final} already exists; stage outputs are append-only, "
                              f"choose a new --out or remove that directory")
        if self.dir.exists():
            shutil.rmtree(self.dir)  # leftovers of an interrupted run of this same stage
        self.dir.mkdir(parents=True)
        return self

    def path(self, name: str) -> Path:
        return self.dir / name

    def finish(self, elapsed: float) -> dict:
        outputs, volatile = {}, {}
        for p in sorted(self.dir.rglob("*")):
            if p.is_file():
                rel = p.relative_to(self.dir).as_posix()
                (volatile if p.name in VOLATILE else outputs)[rel] = file_sha256(p)
        core = {"manifest_version": MANIFEST_VERSION, "command": self.command,
                "config_hash": self.cfg.hash(), "seed": self.cfg.seed,
                "inputs": dict(sorted(self.inputs.items())), "outputs": outputs}
        digest = tree_digest({**{f"in/{k}": v for k, v in self.inputs.items()},
                              **{f"out/{k}": v for k, v in outputs.items()},
                              "config": self.cfg.hash(), "command": hashlib.sha256(self.command.encode()).hexdigest(),
                              "seed": hashlib.sha256(str(self.cfg.seed).encode()).hexdigest()})
        manifest = {**core, "digest": digest,
                    "volatile": {"files": volatile, "elapsed_s": round(elapsed, 3)}}
        (self.dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
        self.dir.rename(self.final)
        return manifest


@contextmanager
def output_lock(out: Path):
    """Refuse to run while another command writes into the same output dir."""
    out.mkdir(parents=True, exist_ok=True)
    lock = out / ".lock"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise ConfigError(f"{out} is locked by another run ({lock}); remove the lock if that run died") from None
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield
    finally:
        lock.unlink(missing_ok=True)


def _seed_everything(seed: int):
    torch.manual_seed(seed)
    np.random.seed(seed % (2 ** 32))


def _write_history(path, rows: list[dict]):
    if not rows:
        path.write_text("")
        return
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, list(rows[0]), lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})


# --------------------------------------------------------------------------
# commands


def cmd_prepare_data(cfg: RunConfig, stage: Stage):
    from .datasets import (filter_small_objects, generate_toy_dataset, generate_toy_textures,
                           load_texture_bank, load_visdrone_split, save_samples, save_texture_bank)
    d = cfg.data
    splits = {}
    for k, (name, n) in enumerate((("train", d.n_train), ("val", d.n_val), ("test", d.n_test))):
        if d.source == "toy":
            samples = generate_toy_dataset(cfg.seed * 3 + k, n, d.scene())
        else:
            split_dir = Path(d.root) / name
            if not (split_dir / "images").is_dir():
                raise MissingArtifactError(f"{split_dir / 'images'} not found; data.root must hold "
                                           f"train/, val/ and test/ splits with images/ and annotations/")
            samples = load_visdrone_split(split_dir, d.class_map, d.input_size, min_frac=None)
        if name != "test" or d.filter_test:
            samples = filter_small_objects(samples, d.min_frac)
        splits[name] = samples
    for name, samples in splits.items():
        if not samples:
            raise ConfigError(f"data: the {name} split is empty after filtering")
        save_samples(stage.path(f"{name}.npz"), samples)
        log.info("%s: %d images", name, len(samples))
    if d.texture_dir:
        bank = load_texture_bank(d.texture_dir)
    else:
        bank = generate_toy_textures(cfg.seed, d.n_textures)
    save_texture_bank(stage.path("textures.npz"), bank)


def _load_split(stage: Stage, name: str):
    from .datasets import load_samples
    return load_samples(stage.need(f"data/{name}.npz", "prepare-data"))


def cmd_train_detector(cfg: RunConfig, stage: Stage):
    from .detector import save_detector, train_tiny_detector
    train, val = _load_split(stage, "train"), _load_split(stage, "val")
    _seed_everything(cfg.detector_train.seed)
    model, history = train_tiny_detector(train, cfg.detector_train, cfg.detector, val)
    save_detector(model, stage.path("detector.pt"))
    _write_history(stage.path("history.csv"), [{"epoch": i, "loss": v} for i, v in enumerate(history["loss"])])
    (stage.path("summary.json")).write_text(json.dumps({"val_ap": history["val_ap"]}, sort_keys=True) + "\n")
    if history["val_ap"] is not None:
        log.info("detector val AP %.4f", history["val_ap"])


def _load_detector(stage: Stage):
    from .detector import load_detector
    return load_detector(stage.need("detector/detector.pt", "train-detector"))


def cmd_gen_patch(cfg: RunConfig, stage: Stage):
    from .attack import PrintableColorSet, optimize_patch, write_trace
    from .patching import save_patch
    detector = _load_detector(stage)
    train = _load_split(stage, "train")
    colors = PrintableColorSet.load(cfg.patch.printable_colors)
    _seed_everything(cfg.attack.seed)
    result = optimize_patch(detector, train, cfg.attack, colors)
    save_patch(result.patch, stage.path("patch.png"))
    write_trace(result.trace, stage.path("trace.csv"))


def _load_textures(stage: Stage):
    from .datasets import load_texture_cache
    return load_texture_cache(stage.need("data/textures.npz", "prepare-data"))


def cmd_train_defense(cfg: RunConfig, stage: Stage):
    from .defense import build_restoration_model, count_parameters, save_model, train_defense
    train, val = _load_split(stage, "train"), _load_split(stage, "val")
    textures = _load_textures(stage)
    _seed_everything(cfg.defense_train.seed)
    model = build_restoration_model(cfg.defense)
    log.info("restoration model: %d parameters", count_parameters(model))
    history = train_defense(model, train, textures, cfg.defense_train, val)
    save_model(model, stage.path("model.pt"), history)
    _write_history(stage.path("history.csv"), history.rows)


def cmd_train_mask_baseline(cfg: RunConfig, stage: Stage):
    from .defense import save_model, train_masking_baseline
    train, val = _load_split(stage, "train"), _load_split(stage, "val")
    textures = _load_textures(stage)
    _seed_everything(cfg.mask_baseline.seed)
    model, history = train_masking_baseline(train, textures, cfg.mask_baseline, cfg.defense, val)
    save_model(model, stage.path("model.pt"), history)
    _write_history(stage.path("history.csv"), history.rows)


def eval_tag(cfg: RunConfig) -> str:
    e = cfg.eval
    return f"{'-'.join(e.attacks)}__{'-'.join(e.defenses)}__r{e.runs}"


def cmd_evaluate(cfg: RunConfig, stage: Stage):
    from .defense import load_model, mask_apply_batch, restore_batch
    from .evaluation import measure_overhead
    from .patching import image_tensor, load_patch
    from .pipeline import evaluate
    detector = _load_detector(stage)
    test = _load_split(stage, "test")
    patch = None
    if "adversarial" in cfg.eval.attacks:
        patch = load_patch(stage.need("patch/patch.png", "gen-patch"))
    defenses = {}
    for name in cfg.eval.defenses:
        if name == "none":
            defenses[name] = None
        elif name == "restore":
            model = load_model(stage.need("defense/model.pt", "train-defense"))
            defenses[name] = lambda x, m=model: restore_batch(m, x)
        elif name == "mask":
            seg = load_model(stage.need("mask_baseline/model.pt", "train-mask-baseline"))
            defenses[name] = lambda x, m=seg: mask_apply_batch(m, x)
    meta = {"config_hash": cfg.hash(), "inputs": dict(sorted(stage.inputs.items()))}
    report = evaluate(detector, test, cfg.eval.attacks, defenses, cfg.eval.runs, cfg.seed, patch,
                      cfg.patch.side, meta)
    record = report.to_record()
    stage.path("record.json").write_text(json.dumps(record, indent=2, sort_keys=True) + "\n")
    for cond, m in record["means"].items():
        log.info("%s: %s", cond, {k: round(v, 4) for k, v in m.items()})
    if cfg.eval.timing and defenses.get("restore") is not None:
        images = [image_tensor(s)[None] for s in test][: cfg.eval.timing_images]
        if len(images) < cfg.eval.timing_images:
            images = (images * (cfg.eval.timing_images // max(len(images), 1) + 1))[: cfg.eval.timing_images]
        with torch.no_grad():
            res = measure_overhead(detector.detect_batch, defenses["restore"], images,
                                   min_images=cfg.eval.timing_images)
        stage.path("timing.json").write_text(json.dumps(res.as_dict(), indent=2, sort_keys=True) + "\n")
        log.info("restoration overhead %.1f%% +- %.1f", res.mean_pct, res.std_pct)


def cmd_report(cfg: RunConfig, stage: Stage):
    from .evaluation import EvalReport, render_report
    tag = eval_tag(cfg)
    record = json.loads(stage.need(f"evaluate/{tag}/record.json", "evaluate").read_text())
    report = EvalReport.from_record(record)
    report.timing = None
    render_report(report, stage.dir)
    timing = Path(cfg.out) / "evaluate" / tag / "timing.json"
    if timing.exists():
        shutil.copyfile(timing, stage.path("timing.json"))


COMMANDS = {
    "prepare-data": cmd_prepare_data,
    "train-detector": cmd_train_detector,
    "gen-patch": cmd_gen_patch,
    "train-defense": cmd_train_defense,
    "train-mask-baseline": cmd_train_mask_baseline,
    "evaluate": cmd_evaluate,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="uavpatch", description="Adversarial patch attack and defense pipeline.")
    ap.add_argument("command", choices=list(COMMANDS))
    ap.add_argument("--config", help="YAML run config")
    ap.add_argument("--seed", type=int)
    ap.add_argument("--out", help="output directory for all stages")
    ap.add_argument("--attack", help="comma-separated subset of none,gray,random,adversarial")
    ap.add_argument("--defense", help="comma-separated subset of none,restore,mask")
    ap.add_argument("--runs", type=int)
    ap.add_argument("--device")
    ap.add_argument("-v", "--verbose", action="store_true")
    return ap


def _split(value):
    return None if value is None else [v.strip() for v in value.split(",") if v.strip()]


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        flags = {"seed": args.seed, "out": args.out, "device": args.device,
                 "eval.attacks": _split(args.attack), "eval.defenses": _split(args.defense),
                 "eval.runs": args.runs}
        cfg = load_config(args.config, flags)
        subdir = eval_tag(cfg) if args.command in ("evaluate", "report") else None
        stage = Stage(cfg, args.command, subdir)
        with output_lock(stage.out):
            stage.begin()
            try:
                dump_config(cfg, stage.path("config.yaml"))
                t0 = time.perf_counter()
                COMMANDS[args.command](cfg, stage)
                manifest = stage.finish(time.perf_counter() - t0)
            except BaseException:
                shutil.rmtree(stage.dir, ignore_errors=True)
                raise
        log.info("%s done: %s (digest %s)", args.command, stage.final, manifest["digest"][:12])
        return EXIT_OK
    except ConfigError as e:
        log.error("config error: %s", e)
        return EXIT_CONFIG
    except MissingArtifactError as e:
        log.error("missing artifact: %s", e)
        return EXIT_MISSING
    except NumericalError as e:
        log.error("numerical failure: %s", e)
        return EXIT_NUMERICAL


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
