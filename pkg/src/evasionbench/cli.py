"""Command-line driver: ``python -m evasionbench <command> [flags]``.

Exit status is 0 on success, 1 when flags or inputs fail validation (checked
before any work starts) and 2 when the work itself fails. Flag values beat
values from ``--config`` which beat the built-in defaults; the effective
configuration is written as ``config.json`` next to the outputs.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

__all__ = ["main", "build_parser", "CliError"]

logger = logging.getLogger("evasionbench")

EPS_GRID = (8, 16, 32)


class CliError(Exception):
    """Invalid flags or inputs; exit status 1."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError(f"{self.format_usage()}{self.prog}: error: {message}")


def _eps_k(text: str) -> int:
    try:
        k = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"--eps-k takes an integer numerator over 255, got {text!r}") from None
    if not 1 <= k <= 255:
        raise argparse.ArgumentTypeError(f"--eps-k must lie in 1..255, got {k}")
    return k


def _positive_int(text: str) -> int:
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text!r}") from None
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {v}")
    return v


def _non_negative_int(text: str) -> int:
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer >= 0, got {text!r}") from None
    if v < 0:
        raise argparse.ArgumentTypeError(f"expected an integer >= 0, got {v}")
    return v


def _positive_float(text: str) -> float:
    try:
        v = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a positive number, got {text!r}") from None
    if not v > 0:
        raise argparse.ArgumentTypeError(f"expected a positive number, got {v}")
    return v


# built-in defaults per command; --config and flags override these
DEFAULTS = {
    "common": {"seed": 0, "parallelism": 1, "quiet": False},
    "gen-data": {
        "out": "data",
        "n_real": 2000,
        "n_fake_per_generator": 500,
        "n_test_real": 240,
        "n_test_fake_per_generator": 60,
        "side": 64,
        "noise": 0.03,
    },
    "train": {"out": "detectors", "kind": ["all"], "epochs": None, "learning_rate": None, "batch_size": None},
    "attack": {
        "out": "attack",
        "eps_k": [16],
        "steps": 10,
        "step_size": 0.05,
        "init": "zero",
        "target": "flip",
    },
    "build-raid": {"out": "raid", "eps_k": list(EPS_GRID), "steps": 10, "step_size": 0.05},
    "eval": {"out": None},
    "matrix": {
        "out": "matrix",
        "eps_k": [16],
        "steps": 10,
        "step_size": 0.05,
        "seeds": 1,
        "subsample": None,
        "composition": "adversarial",
    },
    "serve": {"host": "127.0.0.1", "port": 8080},
    "remote-eval": {"out": None, "concurrency": 4, "timeout_ms": 10000, "retries": 2},
    "report": {"format": "markdown", "out": None},
}


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False, argument_default=argparse.SUPPRESS)
    g = common.add_argument_group("global options")
    g.add_argument("--seed", type=int, help="root seed for all randomness (default 0)")
    g.add_argument("--out", help="output directory or file")
    g.add_argument("--parallelism", type=_positive_int, help="worker threads (default 1)")
    g.add_argument("--quiet", action="store_true", help="suppress progress output")
    g.add_argument("--config", help="JSON file of defaults; flags take precedence")

    parser = _Parser(prog="evasionbench", description="Adversarial robustness benchmark for generated-image detectors.")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    def add(name, help_text):
        return sub.add_parser(name, parents=[common], help=help_text, argument_default=argparse.SUPPRESS)

    p = add("gen-data", "build the synthetic train/test corpus")
    p.add_argument("--n-real", type=_positive_int)
    p.add_argument("--n-fake-per-generator", type=_positive_int)
    p.add_argument("--n-test-real", type=_positive_int)
    p.add_argument("--n-test-fake-per-generator", type=_positive_int)
    p.add_argument("--side", type=_positive_int)
    p.add_argument("--noise", type=float)

    p = add("train", "train one or all detector architectures")
    p.add_argument("--data", required=True, help="training manifest (file or directory)")
    p.add_argument("--kind", action="append", help="architecture, repeatable, or 'all'")
    p.add_argument("--epochs", type=_positive_int)
    p.add_argument("--learning-rate", type=float)
    p.add_argument("--batch-size", type=_positive_int)

    def attack_flags(p, eps_help):
        p.add_argument("--data", required=True, help="manifest to attack")
        p.add_argument("--detector", action="append", required=True, help="checkpoint path, repeatable")
        p.add_argument("--eps-k", type=_eps_k, action="append", help=eps_help)
        p.add_argument("--steps", type=_non_negative_int)
        p.add_argument("--step-size", type=_positive_float)

    p = add("attack", "PGD against one detector or an ensemble")
    attack_flags(p, "budget numerator over 255 (8, 16, 32 or any of 1..255)")
    p.add_argument("--init", choices=("zero", "uniform"))
    p.add_argument("--target", choices=("flip", "real", "fake"))

    p = add("build-raid", "attack a test manifest against the full ensemble at every budget")
    attack_flags(p, "budget numerator over 255, repeatable (default 8, 16, 32)")

    p = add("eval", "evaluate detectors on a manifest")
    p.add_argument("--data", required=True)
    p.add_argument("--detector", action="append", required=True)

    p = add("matrix", "transfer matrix with leave-one-out ensembles")
    attack_flags(p, "budget numerator over 255, repeatable")
    p.add_argument("--seeds", type=_positive_int, help="number of seeds (seed, seed+1, ...)")
    p.add_argument("--subsample", type=_positive_int, help="balanced test subset size per seed")
    p.add_argument("--composition", choices=("adversarial", "mixed"))

    p = add("serve", "serve one detector over HTTP")
    p.add_argument("--detector", required=True)
    p.add_argument("--host")
    p.add_argument("--port", type=_non_negative_int)

    p = add("remote-eval", "evaluate a manifest against a scoring endpoint")
    p.add_argument("--endpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--concurrency", type=_positive_int)
    p.add_argument("--timeout-ms", type=_positive_int)
    p.add_argument("--retries", type=_non_negative_int)

    p = add("report", "render a stored matrix or aggregate")
    p.add_argument("--input", required=True, help="matrix_*.json")
    p.add_argument("--format", choices=("csv", "markdown"))
    return parser


def _effective(args: argparse.Namespace) -> dict:
    cfg = dict(DEFAULTS["common"])
    cfg.update(DEFAULTS[args.command])
    given = vars(args).copy()
    path = given.pop("config", None)
    if path is not None:
        try:
            loaded = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise CliError(f"cannot read --config {path}: {exc}") from None
        if not isinstance(loaded, dict):
            raise CliError("--config must hold a JSON object")
        unknown = set(loaded) - set(cfg) - {"data", "detector", "endpoint", "input"}
        if unknown:
            raise CliError(f"--config has unknown keys for {args.command}: {sorted(unknown)}")
        cfg.update({k.replace("-", "_"): v for k, v in loaded.items()})
    cfg.update(given)
    return cfg


def _write_config(out_dir: Path, cfg: dict) -> None:
    # the output location itself is left out so that runs differing only in
    # --out produce identical trees
    data = {k: v for k, v in cfg.items() if k not in ("out", "quiet")}
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.json").write_text(json.dumps(data, sort_keys=True, indent=1) + "\n")


def _need_file(path, what: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise CliError(f"{what} not found: {path}")
    return p


def _read_manifest(path):
    from .datagen import DatasetManifest, ManifestError

    _need_file(path, "manifest")
    try:
        return DatasetManifest.read(path)
    except (ManifestError, OSError, ValueError) as exc:
        raise CliError(f"invalid manifest {path}: {exc}") from None


def _read_detectors(paths) -> dict:
    from .zoo import DetectorError, load_detector

    out = {}
    for path in paths:
        try:
            det = load_detector(_need_file(path, "detector").read_bytes())
        except DetectorError as exc:
            raise CliError(f"invalid detector {path}: {exc}") from None
        name = det.name
        n = 1
        while name in out:
            name = f"{det.name}#{n}"
            n += 1
        out[name] = det
    sides = {d.spec.input_side for d in out.values()}
    if len(sides) > 1:
        raise CliError(f"detectors disagree on input side: {sorted(sides)}")
    return out


def _attack_config(cfg: dict, eps_k: int):
    from .attack import AttackConfig, AttackError

    target = cfg.get("target", "flip")
    try:
        return AttackConfig(
            eps_k=eps_k,
            steps=cfg["steps"],
            step_size=cfg["step_size"],
            init=cfg.get("init", "zero"),
            seed=cfg["seed"],
            target_policy="flip" if target == "flip" else "fixed",
            fixed_target=None if target == "flip" else int(target == "fake"),
        )
    except AttackError as exc:
        raise CliError(str(exc)) from None


def _print_json(obj) -> None:
    sys.stdout.write(json.dumps(obj, sort_keys=True) + "\n")


# validators return a zero-argument callable that performs the work


def _cmd_gen_data(cfg):
    from .datagen import CorpusConfig, build_corpus

    try:
        corpus = CorpusConfig(
            n_real=cfg["n_real"],
            n_fake_per_generator=cfg["n_fake_per_generator"],
            n_test_real=cfg["n_test_real"],
            n_test_fake_per_generator=cfg["n_test_fake_per_generator"],
            side=cfg["side"],
            seed=cfg["seed"],
            noise=cfg["noise"],
        )
    except (ValueError, TypeError) as exc:
        raise CliError(str(exc)) from None
    out = Path(cfg["out"])

    def run():
        manifests = build_corpus(corpus, out)
        _write_config(out, cfg)
        _print_json({split: len(m) for split, m in manifests.items()})

    return run


def _cmd_train(cfg):
    from .zoo import KINDS, DetectorSpec, default_train_config, init_detector, save_detector, train

    kinds = list(KINDS) if "all" in cfg["kind"] else cfg["kind"]
    bad = [k for k in kinds if k not in KINDS]
    if bad:
        raise CliError(f"unknown detector kind(s) {bad}; expected {list(KINDS)} or 'all'")
    manifest = _read_manifest(cfg["data"])
    overrides = {
        k: cfg[k] for k in ("epochs", "learning_rate", "batch_size") if cfg.get(k) is not None
    }
    out = Path(cfg["out"])

    def run():
        first = manifest.load_image(manifest[0])
        side = min(first.shape[:2]) // 4 * 4
        images = None
        summary = {}
        for kind in kinds:
            spec = DetectorSpec(kind, input_side=side)
            if images is None:
                images = manifest.load_images(side)
            tcfg = default_train_config(kind, seed=cfg["seed"], **overrides)
            logger.info("training %s", kind)
            det = train(init_detector(spec, cfg["seed"]), manifest, tcfg, images=images)
            out.mkdir(parents=True, exist_ok=True)
            (out / f"{kind}.evfg").write_bytes(save_detector(det))
            summary[kind] = {"val_accuracy": det.train_meta["val_accuracy"], "val_f1": det.train_meta["val_f1"]}
            logger.info("%s: validation accuracy %.3f", kind, det.train_meta["val_accuracy"])
        _write_config(out, cfg)
        _print_json(summary)

    return run


def _cmd_attack(cfg):
    from .attack import attack_dataset
    from .datagen import MANIFEST_NAME, DatasetManifest, png_write

    manifest = _read_manifest(cfg["data"])
    dets = _read_detectors(cfg["detector"])
    configs = [_attack_config(cfg, k) for k in cfg["eps_k"]]
    out = Path(cfg["out"])

    def run():
        summary = {}
        for acfg in configs:
            res = attack_dataset(manifest, dets, acfg, parallelism=cfg["parallelism"])
            tier = out / f"eps{acfg.eps_k}"
            tier.mkdir(parents=True, exist_ok=True)
            records = []
            for rec, r in zip(res.records, res.results):
                name = Path(rec.path).name
                (tier / name).write_bytes(png_write(r.adversarial))
                records.append(rec.__class__(**{**rec.__dict__, "path": name}))
            DatasetManifest(records, tier).write(tier / MANIFEST_NAME)
            if res.failures:
                (tier / "failures.json").write_text(
                    json.dumps([f.__dict__ for f in res.failures], indent=1, sort_keys=True) + "\n"
                )
            summary[f"eps{acfg.eps_k}"] = {"attacked": len(records), "failed": len(res.failures)}
        _write_config(out, cfg)
        _print_json(summary)
        if any(v["failed"] for v in summary.values()):
            raise RuntimeError("some records could not be attacked; see failures.json")

    return run


def _cmd_build_raid(cfg):
    from .datagen import build_raid

    manifest = _read_manifest(cfg["data"])
    dets = _read_detectors(cfg["detector"])
    for k in cfg["eps_k"]:
        _attack_config(cfg, k)
    out = Path(cfg["out"])

    def run():
        combined = build_raid(
            manifest,
            dets,
            epsilon_ks=sorted(set(cfg["eps_k"])),
            out_dir=out,
            steps=cfg["steps"],
            step_size=cfg["step_size"],
            seed=cfg["seed"],
            parallelism=cfg["parallelism"],
        )
        _write_config(out, cfg)
        _print_json({"images": len(combined)})

    return run


def _cmd_eval(cfg):
    from .metrics import evaluate

    manifest = _read_manifest(cfg["data"])
    dets = _read_detectors(cfg["detector"])

    def run():
        reports = {name: evaluate(det, manifest, cfg["parallelism"]) for name, det in dets.items()}
        if cfg.get("out"):
            from .bench import render_baseline

            out = Path(cfg["out"])
            out.mkdir(parents=True, exist_ok=True)
            (out / "eval.json").write_text(
                json.dumps({k: r.to_dict() for k, r in reports.items()}, indent=1) + "\n"
            )
            (out / "eval.csv").write_bytes(render_baseline(reports, "csv"))
            (out / "eval.md").write_bytes(render_baseline(reports, "markdown"))
            _write_config(out, cfg)
        _print_json({k: r.to_dict() for k, r in reports.items()})

    return run


def _cmd_matrix(cfg):
    from .bench import aggregate_seeds, run_matrix, write_aggregate, write_matrix

    manifest = _read_manifest(cfg["data"])
    dets = _read_detectors(cfg["detector"])
    if len(dets) < 2:
        raise CliError("matrix needs at least two --detector checkpoints")
    configs = [_attack_config(cfg, k) for k in cfg["eps_k"]]
    if cfg["subsample"] is not None and cfg["subsample"] < 2:
        raise CliError("--subsample must be at least 2")
    out = Path(cfg["out"])
    seeds = [cfg["seed"] + i for i in range(cfg["seeds"])]

    def run():
        reports = out / "reports"
        written = []
        for acfg in configs:
            mats = []
            for s in seeds:
                logger.info("matrix eps=%d/255 seed %d", acfg.eps_k, s)
                m = run_matrix(
                    dets,
                    acfg,
                    manifest,
                    seed=s,
                    composition=cfg["composition"],
                    subsample=cfg["subsample"],
                    parallelism=cfg["parallelism"],
                )
                written += write_matrix(m, reports)
                mats.append(m)
            if len(mats) > 1:
                written += write_aggregate(aggregate_seeds(mats), reports)
        _write_config(out, cfg)
        _print_json({"reports": [str(p) for p in written]})

    return run


def _cmd_serve(cfg):
    from .remote import ScoringServer

    dets = _read_detectors([cfg["detector"]])
    (det,) = dets.values()

    def run():
        try:
            server = ScoringServer(det, cfg["host"], cfg["port"])
        except OSError as exc:
            raise RuntimeError(f"cannot bind {cfg['host']}:{cfg['port']}: {exc}") from None
        print(server.url, file=sys.stderr, flush=True)
        try:
            server.serve_forever()
        except KeyboardInterrupt:
            pass
        finally:
            server.shutdown()

    return run


def _cmd_remote_eval(cfg):
    from .remote import remote_evaluate

    manifest = _read_manifest(cfg["data"])

    def run():
        rep = remote_evaluate(
            cfg["endpoint"],
            manifest,
            concurrency=cfg["concurrency"],
            timeout=cfg["timeout_ms"] / 1000.0,
            retries=cfg["retries"],
        )
        if cfg.get("out"):
            out = Path(cfg["out"])
            out.mkdir(parents=True, exist_ok=True)
            (out / "remote_eval.json").write_text(rep.to_json() + "\n")
            _write_config(out, cfg)
        sys.stdout.write(rep.to_json() + "\n")

    return run


def _cmd_report(cfg):
    from .bench import load_matrix, render_report

    path = _need_file(cfg["input"], "report input")
    try:
        obj = load_matrix(path)
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise CliError(f"{path} is not a stored matrix or aggregate: {exc}") from None

    def run():
        data = render_report(obj, cfg["format"])
        if cfg.get("out"):
            Path(cfg["out"]).write_bytes(data)
        else:
            sys.stdout.buffer.write(data)
            sys.stdout.flush()

    return run


COMMANDS = {
    "gen-data": _cmd_gen_data,
    "train": _cmd_train,
    "attack": _cmd_attack,
    "build-raid": _cmd_build_raid,
    "eval": _cmd_eval,
    "matrix": _cmd_matrix,
    "serve": _cmd_serve,
    "remote-eval": _cmd_remote_eval,
    "report": _cmd_report,
}


def main(argv=None) -> int:
    parser = build_parser()
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        if not argv:
            raise CliError(parser.format_usage().rstrip())
        args = parser.parse_args(argv)
        if args.command is None:
            raise CliError(parser.format_usage().rstrip())
        cfg = _effective(args)
        logging.basicConfig(
            level=logging.WARNING if cfg["quiet"] else logging.INFO,
            format="%(levelname)s %(name)s: %(message)s",
            stream=sys.stderr,
        )
        work = COMMANDS[args.command](cfg)
    except CliError as exc:
        print(str(exc), file=sys.stderr)
        return 1
    try:
        work()
    except KeyboardInterrupt:
        return 2
    except Exception as exc:  # noqa: BLE001 - any failure during the work is exit 2
        logger.debug("failure", exc_info=True)
        print(f"evasionbench {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    return 0
