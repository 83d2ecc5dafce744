"""Command-line driver: train, eval, ablate, strategies, export, corpus.

Configs are plain ``key=value`` files, one pair per line, ``#`` starts a
comment. Every key is checked before any file is written.

Exit codes: 0 success, 2 configuration error, 3 runtime error.
"""
from __future__ import annotations

import argparse
import dataclasses
import logging
import os
import sys
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .data import IMAGE_SIZE, dump_corpus, sample_episode
from .functional import resize_array
from .metrics import cosine_similarity_map
from .model import SDAANet
from .pnm import encode_pgm, write_ppm
from .sdpm import KShotStrategy
from .tensor import no_grad
from .train import TrainConfig, evaluate, train

logger = logging.getLogger("sdaanet")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3
SEED_ENV = "SDAA_SEED"


class ConfigError(ValueError):
    pass


# ------------------------------------------------------------------- config
def _parse_bool(text: str) -> bool:
    low = text.lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"expected a boolean, got {text!r}")


def _parse_ints(text: str) -> tuple:
    parts = [p.strip() for p in text.split(",")]
    if not parts or any(p == "" for p in parts):
        raise ValueError(f"expected comma-separated integers, got {text!r}")
    return tuple(int(p) for p in parts)


def _parse_strategy(text: str) -> str:
    return KShotStrategy.parse(text).value


_TRAIN_FIELDS = {f.name: f for f in dataclasses.fields(TrainConfig)}
_PARSERS = {float: float, int: int, bool: _parse_bool, tuple: _parse_ints, str: str}

# keys beyond TrainConfig
_EXTRA_KEYS = {
    "out_dir": str,
    "use_sdpm": _parse_bool,
    "use_saam": _parse_bool,
    "eval_episodes": int,
    "eval_seed": int,
    "multi_scale": _parse_bool,
    "folds": _parse_ints,
    "seeds": _parse_ints,
}
REQUIRED_KEYS = ("out_dir", "max_iter")


def _key_parser(key: str):
    if key == "strategy":
        return _parse_strategy
    if key in _TRAIN_FIELDS:
        default = _TRAIN_FIELDS[key].default
        return _PARSERS[type(default)]
    return _EXTRA_KEYS.get(key)


@dataclass
class RunConfig:
    train: TrainConfig
    out_dir: str
    use_sdpm: bool = True
    use_saam: bool = True
    eval_episodes: int = 0
    eval_seed: int = 0
    multi_scale: bool = False
    folds: tuple = (0,)
    seeds: tuple = ()
    source: dict = field(default_factory=dict)

    def run_seeds(self) -> tuple:
        return self.seeds if self.seeds else (self.train.seed,)


def parse_config_text(text: str, env: Optional[dict] = None) -> RunConfig:
    """Parse and validate a whole config; raises ConfigError on the first problem found."""
    values: dict = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {raw.strip()!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        parser = _key_parser(key)
        if parser is None:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        if value == "":
            raise ConfigError(f"line {lineno}: empty value for {key!r}")
        try:
            values[key] = parser(value)
        except ValueError as exc:
            raise ConfigError(f"line {lineno}: bad value for {key!r}: {exc}") from None

    missing = [k for k in REQUIRED_KEYS if k not in values]
    if missing:
        raise ConfigError(f"missing required key(s): {', '.join(missing)}")

    env = os.environ if env is None else env
    if env.get(SEED_ENV, "") != "":
        try:
            values["seed"] = int(env[SEED_ENV])
        except ValueError:
            raise ConfigError(f"{SEED_ENV} must be an integer, got {env[SEED_ENV]!r}") from None

    train_kwargs = {k: v for k, v in values.items() if k in _TRAIN_FIELDS}
    try:
        tcfg = TrainConfig(**train_kwargs)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    extra = {k: v for k, v in values.items() if k in _EXTRA_KEYS}
    cfg = RunConfig(train=tcfg, source=dict(values), **extra)
    if cfg.eval_episodes < 0:
        raise ConfigError(f"eval_episodes must be >= 0, got {cfg.eval_episodes}")
    for f in cfg.folds:
        if not 0 <= f <= 3:
            raise ConfigError(f"folds must be in 0..3, got {f}")
    _check_out_dir(cfg.out_dir)
    return cfg


def load_config(path: str, env: Optional[dict] = None) -> RunConfig:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    return parse_config_text(text, env)


def _check_out_dir(path: str) -> None:
    if os.path.exists(path) and not os.path.isdir(path):
        raise ConfigError(f"out_dir {path} exists and is not a directory")
    parent = os.path.dirname(os.path.abspath(path))
    if not os.path.isdir(parent):
        raise ConfigError(f"parent of out_dir {path} does not exist")


def resolved_config_text(cfg: RunConfig) -> str:
    lines = [f"{k}={_fmt(v)}" for k, v in sorted(dataclasses.asdict(cfg.train).items())]
    for k in sorted(_EXTRA_KEYS):
        lines.append(f"{k}={_fmt(getattr(cfg, k))}")
    return "\n".join(lines) + "\n"


def _fmt(v) -> str:
    if isinstance(v, tuple):
        return ",".join(str(x) for x in v)
    return str(v)


def _write_text(path: str, text: str) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)


# ----------------------------------------------------------------- heatmaps
def heatmap_to_gray(values: np.ndarray, lo: Optional[float] = None, hi: Optional[float] = None, upsample_to: Optional[tuple] = None) -> np.ndarray:
    """Map a 2-D (or 1x1xHxW) float map to uint8.

    With ``lo``/``hi`` unset the map's own min and max are used. A constant
    map becomes mid-gray 128. Values round half up.
    """
    a = np.asarray(values, dtype=np.float64)
    a = a.reshape(a.shape[-2:])
    if upsample_to is not None:
        a = resize_array(a, int(upsample_to[0]), int(upsample_to[1]), align_corners=True)
    lo = float(a.min()) if lo is None else float(lo)
    hi = float(a.max()) if hi is None else float(hi)
    if not hi > lo:
        return np.full(a.shape, 128, dtype=np.uint8)
    scaled = 255.0 * (np.clip(a, lo, hi) - lo) / (hi - lo)
    return np.floor(scaled + 0.5).astype(np.uint8)


def export_heatmap(values, path: str, lo=None, hi=None, upsample_to=None) -> bytes:
    raw = encode_pgm(heatmap_to_gray(values, lo, hi, upsample_to))
    with open(path, "wb") as fh:
        fh.write(raw)
    return raw


# ----------------------------------------------------------------- commands
def cmd_train(cfg: RunConfig) -> int:
    os.makedirs(cfg.out_dir, exist_ok=True)
    result = train(cfg.train, cfg.use_sdpm, cfg.use_saam, progress=True)
    save_checkpoint(os.path.join(cfg.out_dir, "checkpoint.sdaa"), result.params)
    _write_text(os.path.join(cfg.out_dir, "train.log"), "\n".join(result.log) + "\n")
    _write_text(os.path.join(cfg.out_dir, "config.txt"), resolved_config_text(cfg))
    if cfg.eval_episodes > 0:
        rep = evaluate(
            result.params, cfg.train.fold, cfg.eval_episodes, cfg.train.k, cfg.train.strategy,
            cfg.multi_scale, cfg.eval_seed, cfg.train.image_size,
        )
        line = rep.metrics_line(cfg.train.max_iter)
        print(line)
        _write_text(os.path.join(cfg.out_dir, "metrics.txt"), line + "\n")
    return EXIT_OK


def cmd_eval(ckpt: str, fold: int, episodes: int, k: int, strategy: str, multi_scale: bool, seed: int, out: Optional[str]) -> int:
    params = load_checkpoint(ckpt)
    rep = evaluate(params, fold, episodes, k, strategy, multi_scale, seed)
    for cid, iou in sorted(rep.per_class_iou.items()):
        print(f"class={cid} iou={iou:.4f}")
    line = rep.metrics_line(0)
    print(line)
    if out:
        _write_text(out, line + "\n")
    return EXIT_OK


ABLATION_ROWS = (("baseline", False, False), ("+SAAM", False, True), ("+SDPM", True, False), ("SD-AANet", True, True))


def run_ablation(cfg: RunConfig, rows=ABLATION_ROWS, log_dir: Optional[str] = None) -> dict:
    """mIoU per (row, fold), averaged over the configured seeds."""
    episodes = cfg.eval_episodes if cfg.eval_episodes > 0 else 200
    table = {}
    for name, use_sdpm, use_saam in rows:
        for fold in cfg.folds:
            scores = []
            for seed in cfg.run_seeds():
                tcfg = dataclasses.replace(cfg.train, fold=fold, seed=seed)
                result = train(tcfg, use_sdpm, use_saam)
                if log_dir:
                    slug = name.strip("+").lower()
                    _write_text(os.path.join(log_dir, f"{slug}_fold{fold}_seed{seed}.log"), "\n".join(result.log) + "\n")
                rep = evaluate(result.params, fold, episodes, tcfg.k, tcfg.strategy, cfg.multi_scale, cfg.eval_seed + seed, tcfg.image_size)
                scores.append(rep.miou)
                logger.info("%s fold=%d seed=%d miou=%.4f", name, fold, seed, rep.miou)
            table[(name, fold)] = float(np.mean(scores))
    return table


def format_table(table: dict, rows: Sequence[str], folds: Sequence[int]) -> str:
    header = f"{'method':<10}" + "".join(f"{'fold' + str(f):>9}" for f in folds) + f"{'mean':>9}"
    lines = [header]
    for name in rows:
        vals = [100.0 * table[(name, f)] for f in folds]
        lines.append(f"{name:<10}" + "".join(f"{v:>9.2f}" for v in vals) + f"{np.mean(vals):>9.2f}")
    return "\n".join(lines) + "\n"


def cmd_ablate(cfg: RunConfig) -> int:
    os.makedirs(cfg.out_dir, exist_ok=True)
    table = run_ablation(cfg, log_dir=cfg.out_dir)
    text = format_table(table, [r[0] for r in ABLATION_ROWS], cfg.folds)
    print(text, end="")
    _write_text(os.path.join(cfg.out_dir, "ablation.txt"), text)
    return EXIT_OK


def cmd_strategies(cfg: RunConfig) -> int:
    """Integral vs Separate teacher strategies with the full model at the configured K."""
    os.makedirs(cfg.out_dir, exist_ok=True)
    table = {}
    for strategy in (KShotStrategy.INTEGRAL.value, KShotStrategy.SEPARATE.value):
        sub = dataclasses.replace(cfg, train=dataclasses.replace(cfg.train, strategy=strategy))
        for (name, fold), v in run_ablation(sub, rows=(("full", True, True),)).items():
            table[(strategy, fold)] = v
    text = format_table(table, ["integral", "separate"], cfg.folds)
    print(text, end="")
    _write_text(os.path.join(cfg.out_dir, "strategies.txt"), text)
    return EXIT_OK


def cmd_export(ckpt: str, episode_seed: int, out: str, fold: int, k: int, strategy: str, upsample: bool) -> list:
    params = load_checkpoint(ckpt)
    net = SDAANet.from_params(params, strategy)
    ep = sample_episode("test", fold, k, episode_seed, IMAGE_SIZE)
    with no_grad():
        res = net.forward_episode([ep], "eval")
    size = ep.query.image.shape[2:] if upsample else None
    os.makedirs(out, exist_ok=True)
    written = []

    def put(name, values, lo=None, hi=None, up=size):
        path = os.path.join(out, name)
        export_heatmap(values, path, lo, hi, up)
        written.append(path)

    put("attention.pgm", res.attention.data[0, 0])
    put("similarity_query.pgm", cosine_similarity_map(res.query_feature.data[:1], res.prototype.data[:1]), -1.0, 1.0)
    put("similarity_support.pgm", cosine_similarity_map(res.support_features[0].data[:1], res.prototype.data[:1]), -1.0, 1.0)
    logits = res.logits.data[0]
    put("prediction.pgm", (logits[1] > logits[0]).astype(np.float64), 0.0, 1.0, None)
    put("query_mask.pgm", ep.query.mask[0, 0], 0.0, 1.0, None)
    query_path = os.path.join(out, "query.ppm")
    write_ppm(query_path, np.floor(ep.query.image[0].transpose(1, 2, 0) * 255.0 + 0.5).astype(np.uint8))
    written.append(query_path)
    return written


# --------------------------------------------------------------------- main
def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sdaanet", description="Few-shot segmentation with self-distilled prototypes and affinity attention.")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train one model from a config file")
    t.add_argument("--config", required=True)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a test fold")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--fold", type=int, required=True, choices=range(4))
    e.add_argument("--episodes", type=int, default=1000)
    e.add_argument("--k", type=int, default=1)
    e.add_argument("--strategy", default="separate", choices=[s.value for s in KShotStrategy])
    e.add_argument("--multi-scale", action="store_true")
    e.add_argument("--seed", type=int, default=None)
    e.add_argument("--out", default=None, help="also write the metrics line here")

    a = sub.add_parser("ablate", help="baseline / +SAAM / +SDPM / both table")
    a.add_argument("--config", required=True)

    s = sub.add_parser("strategies", help="integral vs separate K-shot teachers")
    s.add_argument("--config", required=True)

    x = sub.add_parser("export", help="write attention, similarity and prediction maps as PGM")
    x.add_argument("--ckpt", required=True)
    x.add_argument("--episode-seed", type=int, required=True)
    x.add_argument("--out", required=True)
    x.add_argument("--fold", type=int, default=0, choices=range(4))
    x.add_argument("--k", type=int, default=1)
    x.add_argument("--strategy", default="separate", choices=[s.value for s in KShotStrategy])
    x.add_argument("--upsample", action="store_true", help="bilinearly resize maps to image size")

    c = sub.add_parser("corpus", help="dump sample images and masks")
    c.add_argument("--out", required=True)
    c.add_argument("--per-class", type=int, default=4)
    c.add_argument("--seed", type=int, default=0)
    return p


def _env_seed(default: int) -> int:
    raw = os.environ.get(SEED_ENV, "")
    if raw == "":
        return default
    try:
        return int(raw)
    except ValueError:
        raise ConfigError(f"{SEED_ENV} must be an integer, got {raw!r}") from None


def main(argv: Optional[Sequence[str]] = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(message)s", stream=sys.stderr)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    try:
        if args.command in ("train", "ablate", "strategies"):
            cfg = load_config(args.config)
            return {"train": cmd_train, "ablate": cmd_ablate, "strategies": cmd_strategies}[args.command](cfg)
        if args.command == "eval":
            if args.episodes < 1:
                raise ConfigError(f"--episodes must be >= 1, got {args.episodes}")
            if args.k < 1:
                raise ConfigError(f"--k must be >= 1, got {args.k}")
            return cmd_eval(args.ckpt, args.fold, args.episodes, args.k, args.strategy, args.multi_scale, _env_seed(0) if args.seed is None else args.seed, args.out)
        if args.command == "export":
            if args.k < 1:
                raise ConfigError(f"--k must be >= 1, got {args.k}")
            for path in cmd_export(args.ckpt, args.episode_seed, args.out, args.fold, args.k, args.strategy, args.upsample):
                print(path)
            return EXIT_OK
        if args.command == "corpus":
            if args.per_class < 1:
                raise ConfigError(f"--per-class must be >= 1, got {args.per_class}")
            written = dump_corpus(args.out, args.per_class, _env_seed(args.seed))
            print(f"wrote {len(written)} files to {args.out}")
            return EXIT_OK
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (CheckpointError, OSError, ValueError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_RUNTIME
