"""Command-line entry point: gen-data, meta-train, meta-test, inspect-transform."""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from dmtnet.config import RunConfig, apply_seed_env, load_config, load_data_spec
from dmtnet.data import gen_domain, load_dataset, save_dataset
from dmtnet.episodes import (
    TestSettings,
    meta_test,
    meta_train,
    save_training,
    transform_diagnostics,
)
from dmtnet.errors import (
    ConfigError,
    DimensionMismatch,
    EmptyMask,
    InsufficientData,
    MalformedHeader,
    NonFiniteLoss,
    NoValidPrototypes,
    ShapeMismatch,
    SingularPrototypeMatrix,
    TruncatedPayload,
    ZeroPrototype,
)
from dmtnet.model import DMTNet, load_checkpoint

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC = 0, 2, 3, 4

log = logging.getLogger("dmtnet")

_NUMERIC = (NonFiniteLoss, SingularPrototypeMatrix, ZeroPrototype, EmptyMask, NoValidPrototypes)
_IO = (OSError, MalformedHeader, TruncatedPayload, ShapeMismatch)
_CONFIG = (ConfigError, DimensionMismatch, InsufficientData, ValueError, KeyError)


def _seed(args, cfg_seed: int) -> int:
    return args.seed if getattr(args, "seed", None) is not None else cfg_seed


def cmd_gen_data(args) -> int:
    spec = load_data_spec(args.spec)
    seed = _seed(args, apply_seed_env(RunConfig()).seed)
    out = Path(args.out)
    for i, dom in enumerate(spec.domains):
        ds = gen_domain(dom, spec.n_images, seed=seed, image_size=spec.image_size)
        save_dataset(ds, out / dom.name, seed)
        log.info("wrote %d images for domain %s", len(ds), dom.name)
    (out / "domains.json").write_text(json.dumps(
        {"seed": seed, "source": spec.source, "n_images": spec.n_images, "image_size": spec.image_size,
         "domains": [d.to_dict() for d in spec.domains]}, indent=2, sort_keys=True) + "\n")
    return EXIT_OK


def _model_from_config(cfg: RunConfig) -> DMTNet:
    return DMTNet(spec=cfg.pyramid, smt_cfg=cfg.smt, weights=cfg.loss, seed=cfg.seed, extractor_mode=cfg.extractor)


def cmd_meta_train(args) -> int:
    cfg = load_config(args.config)
    cfg.seed = _seed(args, cfg.seed)
    data = Path(args.data or cfg.paths.data)
    dataset = load_dataset(data)
    if args.resume:
        model, manifest, optim = load_checkpoint(args.resume)
        start = int(manifest["episode"])
    else:
        model, optim, start = _model_from_config(cfg), None, 0
    episodes = args.episodes if args.episodes is not None else cfg.train.episodes
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    try:
        model, optim, tlog = meta_train(model, dataset, episodes, cfg.episode, lr=cfg.train.lr, seed=cfg.seed,
                                        start_episode=start, optim=optim, group=cfg.train.group,
                                        dump_dir=out, log_every=cfg.train.log_every)
    except NonFiniteLoss:
        log.error("training aborted; diagnostics in %s", out / "nonfinite_dump.json")
        raise
    save_training(model, optim, tlog, out, start + episodes, extra={"run_config": cfg.to_dict(), "data": str(data)})
    log.info("checkpoint written to %s (episode %d)", out, start + episodes)
    return EXIT_OK


def cmd_meta_test(args) -> int:
    cfg = load_config(args.config)
    model, _, _ = load_checkpoint(args.ckpt)
    dataset = load_dataset(args.domain)
    reference = load_dataset(args.reference) if args.reference else None
    tsf = cfg.tsf
    if args.no_tsf:
        tsf = replace(tsf, steps=0)
    elif args.tsf_group:
        tsf = replace(tsf, group=args.tsf_group)
    settings = TestSettings(
        runs=args.runs if args.runs is not None else cfg.test.runs,
        episodes=args.episodes if args.episodes is not None else cfg.test.episodes,
        spec=cfg.episode, tsf=tsf,
        combine=args.combine or cfg.test.combine,
        seed=_seed(args, cfg.seed), bypass_smt=args.bypass_smt,
        jobs=args.jobs if args.jobs is not None else cfg.test.jobs,
    )
    if settings.combine not in ("f", "fb"):
        raise ConfigError(f"unknown combine mode {settings.combine!r}")
    if settings.runs < 1 or settings.episodes < 1 or settings.jobs < 1:
        raise ConfigError("runs, episodes and jobs must be >= 1")
    report = meta_test(model, dataset, settings, reference)
    out = report.write(args.out or cfg.paths.report, dump_masks=args.dump_masks)
    s = report.summary()
    log.info("mIoU %.4f +- %.4f over %d runs; report in %s", s["miou"]["mean"], s["miou"]["std"], settings.runs, out)
    print(json.dumps(s["miou"]))
    return EXIT_OK


INSPECT_COLUMNS = ["level", "dist_pre", "dist_post", "residual_s", "residual_q"]


def cmd_inspect_transform(args) -> int:
    model, _, _ = load_checkpoint(args.ckpt)
    dataset = load_dataset(args.domain)
    reference = load_dataset(args.reference) if args.reference else dataset
    seed = _seed(args, apply_seed_env(RunConfig()).seed)
    rows = transform_diagnostics(model, dataset, reference, episodes=args.episodes, seed=seed)
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=INSPECT_COLUMNS, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: (f"{v:.8g}" if isinstance(v, float) else v) for k, v in r.items()})
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(buf.getvalue())
    else:
        sys.stdout.write(buf.getvalue())
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dmtnet", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write synthetic source/target domains")
    g.add_argument("--spec", help="data spec JSON (defaults: source + 2 targets)")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("meta-train", help="episodic training on a source domain")
    t.add_argument("--config")
    t.add_argument("--out", required=True, help="checkpoint directory")
    t.add_argument("--data", help="source domain directory (overrides paths.data)")
    t.add_argument("--resume", help="checkpoint to continue from")
    t.add_argument("--episodes", type=int)
    t.add_argument("--seed", type=int)
    t.set_defaults(func=cmd_meta_train)

    m = sub.add_parser("meta-test", help="evaluate a checkpoint on a domain")
    m.add_argument("--ckpt", required=True)
    m.add_argument("--domain", required=True)
    m.add_argument("--config")
    m.add_argument("--runs", type=int)
    m.add_argument("--episodes", type=int)
    m.add_argument("--no-tsf", action="store_true")
    m.add_argument("--tsf-group", choices=["encoder", "decoder", "low", "mid", "high"])
    m.add_argument("--combine", choices=["f", "fb"])
    m.add_argument("--bypass-smt", action="store_true", help="use identity transforms")
    m.add_argument("--dump-masks", action="store_true")
    m.add_argument("--reference", help="source domain directory for feature distances")
    m.add_argument("--jobs", type=int)
    m.add_argument("--out")
    m.add_argument("--seed", type=int)
    m.set_defaults(func=cmd_meta_test)

    i = sub.add_parser("inspect-transform", help="per-level feature distances and solve residuals")
    i.add_argument("--ckpt", required=True)
    i.add_argument("--domain", required=True)
    i.add_argument("--reference")
    i.add_argument("--episodes", type=int, default=20)
    i.add_argument("--out")
    i.add_argument("--seed", type=int)
    i.set_defaults(func=cmd_inspect_transform)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except _NUMERIC as exc:
        log.error("numeric abort: %s", exc)
        return EXIT_NUMERIC
    except _IO as exc:
        log.error("I/O error: %s", exc)
        return EXIT_IO
    except _CONFIG as exc:
        log.error("configuration error: %s", exc)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
