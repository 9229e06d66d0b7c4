from __future__ import annotations

import argparse
import dataclasses as dc
import logging
import sys
from pathlib import Path
from typing import List, Optional

from .config import ConfigError, RunConfig, load_config
from .pipeline import DATA_STAGE, StageFailed, emit_run_plots, load_manifest, run_id_for, run_pipeline

APP_VERSION = "0.3.0"

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_STAGE = 4

# command -> last stage executed (upstream stages run first, or are reused with --resume)
COMMANDS = {
    "make-data": DATA_STAGE,
    "train-ae": "train-ae",
    "fit-ot": "fit-ot",
    "train-gan": "train-gan",
    "eval": "eval",
    "run": None,
    "plot": None,
}


def setup_logging(level: str, file: str) -> None:
    lvl = getattr(logging, level.upper(), logging.INFO)
    handlers = [logging.StreamHandler(sys.stdout)]
    if file:
        try:
            path = Path(file)
            # a directory (or trailing separator) means app.log inside it
            if str(file).endswith(("/", "\\")) or path.is_dir():
                path = path / "app.log"
            if path.parent and not path.parent.exists():
                path.parent.mkdir(parents=True, exist_ok=True)
            handlers.append(logging.FileHandler(path, encoding="utf-8"))
            print(f"Logging to file: {path}")
        except Exception as e:
            print(f"WARN: Failed to open log file '{file}': {e}. Falling back to stdout only.")
    logging.basicConfig(
        level=lvl,
        format="%(asctime)s %(levelname)s %(message)s",
        handlers=handlers,
        force=True,
    )


def parse_args(argv: Optional[List[str]] = None) -> argparse.Namespace:
    p = argparse.ArgumentParser(prog="aeot_gan", description="AE-OT-GAN pipeline (autoencoder -> semi-discrete OT -> GAN)")
    p.add_argument("command", choices=list(COMMANDS), help="Stage to run; upstream stages run first")
    p.add_argument("--config", type=str, default="config.yaml", help="Path to config YAML/JSON")
    p.add_argument("--seed", type=int, default=None, help="Override the config seed")
    p.add_argument("--out", type=str, default=None, help="Override the output directory")
    p.add_argument("--resume", action="store_true", help="Reuse completed stage directories")
    return p.parse_args(argv)


def _load(cfg_path: Path) -> Optional[RunConfig]:
    try:
        return load_config(cfg_path)
    except Exception as e:
        ex = Path("config.example.yaml")
        # fall back only when the requested file is missing
        if not cfg_path.exists() and ex.exists() and ex.resolve() != cfg_path.resolve():
            try:
                cfg = load_config(ex)
            except ConfigError as e2:
                print(f"ERROR: Failed to load fallback config '{ex}': {e2}")
                return None
            print(f"WARN: Failed to load '{cfg_path}'. Using '{ex}'. Error: {e}")
            return cfg
        print(f"ERROR: Failed to load config '{cfg_path}': {e}")
        return None


def main(argv: Optional[List[str]] = None) -> int:
    args = parse_args(argv)
    cfg_path = Path(args.config)
    cfg = _load(cfg_path)
    if cfg is None:
        return EXIT_CONFIG
    if args.seed is not None:
        cfg = dc.replace(cfg, seed=int(args.seed))
    out_dir = Path(args.out if args.out is not None else cfg.out_dir)
    setup_logging(cfg.logging.level, cfg.logging.file)
    logging.info("aeot_gan %s: command=%s config=%s seed=%d out=%s", APP_VERSION, args.command, cfg_path, cfg.seed, out_dir)

    if args.command == "plot":
        try:
            manifest = load_manifest(out_dir, run_id_for(cfg))
            paths = emit_run_plots(manifest, out_dir)
        except FileNotFoundError as e:
            logging.error("Cannot plot: %s", e)
            return EXIT_DATA
        for p in paths:
            logging.info("Figure written: %s", p)
        return EXIT_OK

    try:
        manifest = run_pipeline(cfg, out_dir=out_dir, resume=args.resume, until=COMMANDS[args.command])
    except StageFailed as e:
        logging.error("%s", e)
        return EXIT_DATA if e.stage == DATA_STAGE else EXIT_STAGE
    done = [s.name for s in manifest.stages if s.status in ("completed", "cached")]
    logging.info("Run %s finished: %s", manifest.run_id, ", ".join(done) if done else "data only")
    return EXIT_OK
