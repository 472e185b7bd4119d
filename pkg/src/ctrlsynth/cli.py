"""Command-line entry point: ``ctrlsynth <subcommand> [flags]``.

Every flag has a config-file twin (the flag name with dashes turned into
underscores).  Precedence, lowest first: built-in defaults, ``--config``
JSON, environment (``CTRLSYNTH_OUT_DIR``, ``CTRLSYNTH_LOG_LEVEL``), flags.
The effective settings are written to ``<out_dir>/config.echo.json``.
Logs go to stderr as JSON lines; failures print one JSON line and exit 1
(2 for usage errors).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np

from . import conditioning, curation, diffusion, evaluation, hf_overlay, imageio, scenegen, train
from .model import load_model

log = logging.getLogger("ctrlsynth")

ENV_OUT_DIR = "CTRLSYNTH_OUT_DIR"
ENV_LOG_LEVEL = "CTRLSYNTH_LOG_LEVEL"

GLOBAL_DEFAULTS = {"seed": 0, "out_dir": "out", "log_level": "INFO", "workers": 1}

_TRAIN_DEFAULTS = {f.name: f.default for f in fields(train.TrainConfig)
                   if f.name not in ("stage", "seed")}

DEFAULTS: dict[str, dict] = {
    "gen-data": {"n": 64, "resolution": 32},
    "curate": {"manifest": None, "root": None,
               "aesthetic_threshold": curation.DEFAULT_AESTHETIC_THRESHOLD,
               "color_threshold": curation.DEFAULT_COLOR_THRESHOLD},
    "pretrain": {"manifest": None, "root": None, "resume": None, **_TRAIN_DEFAULTS},
    "finetune": {"manifest": None, "root": None, "resume": None, "from": None,
                 **_TRAIN_DEFAULTS},
    "sample": {"ckpt": None, "prompt": "", "fg": None, "mask": None, "bg": None,
               "bg_edges": None, "light_deg": None, "guidance": 1.0, "T": None},
    "overlay": {"src": None, "gen": None, "mask": None},
    "evaluate": {"manifest": None, "root": None,
                 "edge_threshold": conditioning.DEFAULT_EDGE_THRESHOLD},
}

REQUIRED = {
    "curate": ["manifest"], "pretrain": ["manifest"], "finetune": ["manifest", "from"],
    "sample": ["ckpt", "fg", "mask"], "overlay": ["src", "gen", "mask"],
    "evaluate": ["manifest"],
}


class CliError(Exception):
    def __init__(self, message: str, fields: list[str] | None = None, code: int = 1):
        super().__init__(message)
        self.fields = fields or []
        self.code = code


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError(message, code=2)


class JsonFormatter(logging.Formatter):
    def format(self, record: logging.LogRecord) -> str:
        out = {"time": round(record.created, 3), "level": record.levelname,
               "logger": record.name, "message": record.getMessage()}
        if record.exc_info:
            out["exc"] = self.formatException(record.exc_info)
        return json.dumps(out)


def _setup_logging(level: str) -> None:
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(JsonFormatter())
    root = logging.getLogger()
    root.handlers[:] = [handler]
    try:
        root.setLevel(level.upper())
    except ValueError as e:
        raise CliError(f"bad log level {level!r}", ["log_level"]) from e


# ---------------------------------------------------------------- parser


def _flag(name: str) -> str:
    return "--" + name.replace("_", "-")


_TYPES = {bool: lambda s: s.lower() in ("1", "true", "yes", "on")}


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="ctrlsynth", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name, defaults in DEFAULTS.items():
        sp = sub.add_parser(name, argument_default=argparse.SUPPRESS)
        sp.add_argument("--config", help="JSON file with settings; flags override it")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out-dir", dest="out_dir")
        sp.add_argument("--log-level", dest="log_level")
        sp.add_argument("--workers", type=int)
        for key, val in defaults.items():
            if key in GLOBAL_DEFAULTS:
                continue
            typ = type(val) if val is not None else str
            if key in ("light_deg", "T"):
                typ = float if key == "light_deg" else int
            sp.add_argument(_flag(key), dest=key, type=_TYPES.get(typ, typ))
    return p


def resolve_config(command: str, ns: argparse.Namespace,
                   env: dict | None = None) -> dict:
    env = os.environ if env is None else env
    cfg = dict(GLOBAL_DEFAULTS)
    cfg.update(DEFAULTS[command])
    given = {k: v for k, v in vars(ns).items() if k not in ("command", "config")}
    if getattr(ns, "config", None):
        try:
            file_cfg = json.loads(Path(ns.config).read_text())
        except OSError as e:
            raise CliError(f"cannot read config file: {e}", ["config"]) from e
        except json.JSONDecodeError as e:
            raise CliError(f"config file is not valid JSON: {e}", ["config"]) from e
        file_cfg.pop("command", None)
        unknown = sorted(set(file_cfg) - set(cfg))
        if unknown:
            raise CliError(f"unknown config keys for {command}: {unknown}", unknown)
        cfg.update(file_cfg)
    if env.get(ENV_OUT_DIR):
        cfg["out_dir"] = env[ENV_OUT_DIR]
    if env.get(ENV_LOG_LEVEL):
        cfg["log_level"] = env[ENV_LOG_LEVEL]
    cfg.update(given)
    missing = [k for k in REQUIRED.get(command, []) if cfg.get(k) in (None, "")]
    if missing:
        raise CliError(f"{command}: missing required settings {missing}", missing)
    if cfg["workers"] < 1:
        raise CliError("workers must be >= 1", ["workers"])
    return cfg


def _need_file(cfg: dict, key: str) -> Path:
    p = Path(cfg[key])
    if not p.is_file():
        raise CliError(f"{key}: file not found: {p}", [key])
    return p


# ---------------------------------------------------------------- commands


def cmd_gen_data(cfg: dict, out: Path) -> dict:
    sc = scenegen.SceneConfig(resolution=cfg["resolution"])
    res = scenegen.gen_dataset(cfg["n"], cfg["seed"], out, sc, workers=cfg["workers"])
    for e in res.errors:
        log.error("gen-data: %s", e)
    if res.errors:
        raise CliError(f"gen-data: {len(res.errors)} files failed to write")
    return {"manifest": str(res.manifest_path), "count": len(res.records)}


def _absolutize(rec: dict, root: Path) -> dict:
    rec = json.loads(json.dumps(rec))

    def fix(p):
        q = Path(p)
        return str(q if q.is_absolute() else (root / q).resolve())

    for key in ("image", "mask", "layout"):
        if rec.get(key):
            rec[key] = fix(rec[key])
    if "files" in rec:
        rec["files"] = {k: fix(v) for k, v in rec["files"].items()}
    if "masks" in rec:
        rec["masks"] = [fix(m) for m in rec["masks"]]
    return rec


def cmd_curate(cfg: dict, out: Path) -> dict:
    manifest = _need_file(cfg, "manifest")
    root = Path(cfg["root"]) if cfg["root"] else manifest.parent
    records = scenegen.read_manifest(manifest)
    rep = curation.filter_images(records, curation.heuristic_aesthetic,
                                 cfg["aesthetic_threshold"], cfg["color_threshold"],
                                 root=root, workers=cfg["workers"])
    for e in rep.errors:
        log.warning("curate: unreadable image %s", e)
    path = out / "curated.jsonl"
    with open(path, "w") as f:
        for rec in rep.retained:
            f.write(json.dumps(_absolutize(rec, root), sort_keys=True) + "\n")
    (out / "curation_report.json").write_text(json.dumps(rep.to_json(), indent=2,
                                                         sort_keys=True))
    return {"manifest": str(path), "retained": len(rep.retained),
            "removed_colorless": rep.removed_colorless,
            "removed_low_aesthetic": rep.removed_low_aesthetic, "failed": rep.failed}


def _train_config(cfg: dict, stage: str) -> train.TrainConfig:
    d = {k: cfg[k] for k in _TRAIN_DEFAULTS}
    d["stage"] = stage
    d["seed"] = cfg["seed"]
    tc = train.TrainConfig(**d)
    try:
        tc.validate()
    except ValueError as e:
        raise CliError(str(e), [s.split(":")[0] for s in str(e).split("; ")]) from e
    return tc


def _run_train(cfg: dict, out: Path, stage: str) -> dict:
    manifest = _need_file(cfg, "manifest")
    tc = _train_config(cfg, stage)
    init = None
    if stage == "finetune":
        init = _need_file(cfg, "from")
    resume = _need_file(cfg, "resume") if cfg.get("resume") else None
    try:
        state = train.run_stage(tc, manifest, init=init, out_dir=out, resume=resume,
                                root=cfg["root"])
    except train.CheckpointError as e:
        raise CliError(str(e), ["resume" if resume else "from"]) from e
    return {"checkpoint": str(out / "last.bin"), "steps": state.step,
            "final_loss": state.extra.get("last_loss")}


def cmd_pretrain(cfg: dict, out: Path) -> dict:
    return _run_train(cfg, out, "pretrain")


def cmd_finetune(cfg: dict, out: Path) -> dict:
    return _run_train(cfg, out, "finetune")


def load_any_model(path: Path):
    """(model, TrainConfig or None) from a training checkpoint or a bare model file."""
    try:
        st = train.load_checkpoint(path)
        return st.model, st.config
    except train.CheckpointError:
        return load_model(path), None


def cmd_sample(cfg: dict, out: Path) -> dict:
    ckpt = _need_file(cfg, "ckpt")
    try:
        model, tc = load_any_model(ckpt)
    except (ValueError, EOFError) as e:
        raise CliError(f"ckpt: cannot load {ckpt}: {e}", ["ckpt"]) from e
    fg_img = imageio.read_png(_need_file(cfg, "fg"))
    mask = imageio.read_mask(_need_file(cfg, "mask"))
    if fg_img.ndim == 2:
        fg_img = np.repeat(fg_img[..., None], 3, axis=2)
    res = model.config.resolution
    if fg_img.shape[:2] != (res, res) or mask.shape != (res, res):
        raise CliError(f"fg {fg_img.shape[:2]} and mask {mask.shape} must be {res}x{res}",
                       ["fg", "mask"])
    B = None
    if cfg.get("bg_edges"):
        B = conditioning.layout_from_edge_file(_need_file(cfg, "bg_edges"), mask)
    elif cfg.get("bg"):
        B = conditioning.edge_layout(imageio.read_png(_need_file(cfg, "bg")), mask)
    L = None
    if cfg.get("light_deg") is not None:
        L = conditioning.light_map(float(cfg["light_deg"]), res, res)
    try:
        stack = conditioning.assemble_stack(conditioning.make_fg_canvas(fg_img, mask), mask, B, L)
    except conditioning.StackError as e:
        raise CliError(str(e), ["fg", "mask", "bg", "light_deg"]) from e
    try:
        tokens = scenegen.Tokenizer().encode(cfg["prompt"])
    except ValueError as e:
        raise CliError(str(e), ["prompt"]) from e
    T = cfg.get("T") or (tc.T if tc else 200)
    sched = diffusion.make_schedule(T, tc.beta_start, tc.beta_end) if tc else \
        diffusion.make_schedule(T)
    img = diffusion.sample(model, tokens, stack, sched, float(cfg["guidance"]), cfg["seed"])
    path = out / "sample.png"
    imageio.write_png(path, img)
    side = conditioning.save_stack(stack, out, "stack", azimuth_deg=cfg.get("light_deg"),
                                   source_ids=[str(Path(cfg["fg"]).name)])
    return {"image": str(path), "stack": str(side)}


def cmd_overlay(cfg: dict, out: Path) -> dict:
    I = imageio.read_png(_need_file(cfg, "src"))
    J = imageio.read_png(_need_file(cfg, "gen"))
    M = imageio.read_mask(_need_file(cfg, "mask"))
    try:
        res = hf_overlay.overlay(I, J, M)
    except ValueError as e:
        raise CliError(str(e), ["src", "gen", "mask"]) from e
    path = out / "overlay.png"
    imageio.write_png(path, res)
    return {"image": str(path)}


def cmd_evaluate(cfg: dict, out: Path) -> dict:
    manifest = _need_file(cfg, "manifest")
    root = Path(cfg["root"]) if cfg["root"] else manifest.parent
    records = scenegen.read_manifest(manifest)
    rep = evaluation.evaluate_manifest(records, root, cfg["edge_threshold"])
    rep.write(out / "report.json", out / "report.csv")
    return {"report": str(out / "report.json"), "samples": len(rep.samples)}


COMMANDS = {"gen-data": cmd_gen_data, "curate": cmd_curate, "pretrain": cmd_pretrain,
            "finetune": cmd_finetune, "sample": cmd_sample, "overlay": cmd_overlay,
            "evaluate": cmd_evaluate}


def _fail(err: Exception, code: int) -> int:
    fields_ = getattr(err, "fields", [])
    sys.stderr.write(json.dumps({"error": type(err).__name__, "message": str(err),
                                 "fields": fields_}) + "\n")
    return code


def main(argv: list[str] | None = None, env: dict | None = None) -> int:
    try:
        ns = build_parser().parse_args(argv)
        cfg = resolve_config(ns.command, ns, env)
        _setup_logging(cfg["log_level"])
        out = Path(cfg["out_dir"])
        out.mkdir(parents=True, exist_ok=True)
        echo = {"command": ns.command, **cfg}
        (out / "config.echo.json").write_text(json.dumps(echo, indent=2, sort_keys=True))
        t0 = time.perf_counter()
        result = COMMANDS[ns.command](cfg, out)
        log.info(json.dumps({"command": ns.command, "seconds": round(time.perf_counter() - t0, 3),
                             **result}))
        return 0
    except CliError as e:
        return _fail(e, e.code)
    except SystemExit as e:  # --help
        return int(e.code or 0)
    except Exception as e:  # noqa: BLE001 -- last-resort single-line report
        return _fail(e, 1)


if __name__ == "__main__":
    sys.exit(main())
