"""Command-line entry point wiring the whole pipeline.

Subcommands: victim-train, prior-train, attack, dmat, traverse, kde,
report, replay. Every run resolves its configuration (flags > config
file section > built-in defaults), derives all randomness from one
64-bit seed, and writes a manifest that `replay` can re-execute to
byte-identical artifacts. Exit codes: 0 success, 2 validation or usage
error, 3 oracle transport failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__, analysis, imageio, rng
from .attacks import NesConfig, dop_dta, dop_loa, dop_rd, dop_transfer, summarize_reports
from .compose import PatchSpec
from .dmat import DmatConfig, dmat_train, save_dmat_checkpoint
from .mixture import ValidationError
from .oracle import (
    ClassifierOracle,
    EmbedderOracle,
    RemoteOracle,
    TransportError,
)
from .prior import MappingNetwork, load_prior_set, save_prior_set, train_prior
from .toydata import checker_patch
from .victims import IdentityDatabase, load_victim, save_victim, train_toy_victim

DEFAULTS = {
    "victim_train": {
        "task": "classification",
        "epochs": 20,
        "lr": 0.1,
        "seed": 0,
        "hidden": [128, 64],
        "embed_dim": 16,
    },
    "prior_train": {
        "k": 5,
        "lam": 0.1,
        "epochs": 500,
        "lr": 0.01,
        "decay_every": 150,
        "decay_factor": 0.2,
        "q": 5,
        "seed": 0,
        "rotation": True,
        "tau": 3000.0,
    },
    "attack": {
        "method": "dop-rd",
        "budget": 500,
        "init": 10,
        "beta": 2.0,
        "nes_lr": 100.0,
        "nes_pop": 10,
        "nes_iters": 50,
        "lam": 0.1,
        "seed": 0,
        "rotation": True,
        "task": "classification",
    },
    "dmat": {
        "epochs": 150,
        "k": 5,
        "q": 5,
        "lam": 0.1,
        "inner_lr": 0.01,
        "outer_lr": 0.001,
        "batch_size": 16,
        "seed": 0,
        "rotation": True,
    },
    "traverse": {"stride": 2, "rotations": [0.0], "image_index": 0, "seed": 0},
    "kde": {"bandwidth": None, "resolution": 64},
}


class CliError(Exception):
    """Validation problem; maps to exit code 2."""


def _resolve_config(section: str, config_path: str | None, flag_values: dict) -> dict:
    resolved = dict(DEFAULTS[section])
    if config_path:
        try:
            file_cfg = json.loads(Path(config_path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise CliError(f"cannot read config file {config_path}: {exc}")
        resolved.update(file_cfg.get(section, {}))
    for key, value in flag_values.items():
        if value is not None:
            resolved[key] = value
    return resolved


def _config_hash(config: dict) -> str:
    return hashlib.sha256(json.dumps(config, sort_keys=True).encode()).hexdigest()[:16]


def _make_run_dir(out: str | None, tag: str) -> Path:
    if out:
        run_dir = Path(out)
    else:
        stamp = time.strftime("%Y%m%d-%H%M%S", time.gmtime())
        run_dir = Path("runs") / f"{stamp}-{tag}"
    run_dir.mkdir(parents=True, exist_ok=True)
    return run_dir


def _write_manifest(run_dir: Path, subcommand: str, config: dict, inputs: dict) -> None:
    manifest = {
        "subcommand": subcommand,
        "config": config,
        "inputs": inputs,
        "seed": config.get("seed"),
        "config_hash": _config_hash(config),
        "version": __version__,
        "created": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()),
    }
    (run_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))


def _load_patch(source: str, mask_path: str | None) -> PatchSpec:
    if source.startswith("checker:"):
        return checker_patch(int(source.split(":", 1)[1]))
    pattern = imageio.load_png(source)
    if mask_path:
        mask = (imageio.load_png(mask_path)[..., 0] >= 0.5).astype(float)
    else:
        mask = np.ones(pattern.shape[:2])
    return PatchSpec(pattern=pattern, mask=mask)


def _load_exclusion(path: str | None):
    if not path:
        return None
    return imageio.load_png(path)[..., 0] >= 0.5


# -- subcommand implementations -------------------------------------------------


def cmd_victim_train(args) -> int:
    cfg = _resolve_config(
        "victim_train",
        args.config,
        {"task": args.task, "epochs": args.epochs, "lr": args.lr, "seed": args.seed},
    )
    images, labels = imageio.load_dataset(args.data)
    victim, report = train_toy_victim(
        images,
        labels,
        task=cfg["task"],
        epochs=cfg["epochs"],
        lr=cfg["lr"],
        seed=cfg["seed"],
        hidden=tuple(cfg["hidden"]),
        embed_dim=cfg["embed_dim"],
    )
    run_dir = _make_run_dir(args.out, "victim")
    save_victim(run_dir / "victim.bin", victim)
    (run_dir / "training_report.json").write_text(json.dumps(report, indent=2, sort_keys=True))
    _write_manifest(run_dir, "victim-train", cfg, {"data": str(args.data)})
    print(f"victim trained: {report['weight_tag']} val_acc={report['val_accuracy']}")
    print(f"artifacts in {run_dir}")
    return 0


def cmd_prior_train(args) -> int:
    cfg = _resolve_config(
        "prior_train",
        args.config,
        {
            "k": args.k,
            "lam": args.lam,
            "epochs": args.epochs,
            "lr": args.lr,
            "q": args.q,
            "seed": args.seed,
        },
    )
    images, labels = imageio.load_dataset(args.data)
    surrogate = load_victim(args.victim)
    patch = _load_patch(args.patch, args.patch_mask)
    net = MappingNetwork(k=cfg["k"], tau=cfg["tau"], seed=cfg["seed"])
    net, records, trace = train_prior(
        net,
        images,
        labels,
        surrogate,
        patch,
        epochs=cfg["epochs"],
        lr=cfg["lr"],
        decay_every=cfg["decay_every"],
        decay_factor=cfg["decay_factor"],
        q=cfg["q"],
        lam=cfg["lam"],
        seed=cfg["seed"],
        rotation=cfg["rotation"],
    )
    run_dir = _make_run_dir(args.out, "prior")
    save_prior_set(run_dir / "priors", records, extra={"config_hash": _config_hash(cfg)})
    imageio.save_float_array(
        run_dir / "mapping_net.bin",
        net.params_flat(),
        meta={"k": net.k, "tau": net.tau, "pool": net.pool, "hidden": list(net.encoder.sizes[1:])},
    )
    (run_dir / "trace.json").write_text(json.dumps(trace, indent=2, sort_keys=True))
    _write_manifest(
        run_dir, "prior-train", cfg,
        {"data": str(args.data), "victim": str(args.victim),
         "patch": args.patch, "patch_mask": args.patch_mask},
    )
    print(f"prior set with {len(records)} records in {run_dir}")
    return 0


def _build_oracle(args, cfg, victim, images, labels):
    url = os.environ.get("PATCHDIST_ORACLE_URL", args.oracle_url)
    if url:
        return RemoteOracle(url, task=cfg["task"])
    if victim is None:
        raise CliError("attack needs --victim or --oracle-url / PATCHDIST_ORACLE_URL")
    if cfg["task"] == "classification":
        return ClassifierOracle(victim)
    database = IdentityDatabase.from_images(victim, images, labels)
    return EmbedderOracle(victim, database)


def cmd_attack(args) -> int:
    cfg = _resolve_config(
        "attack",
        args.config,
        {
            "method": args.method,
            "budget": args.budget,
            "init": args.init,
            "beta": args.beta,
            "nes_lr": args.nes_lr,
            "nes_pop": args.nes_pop,
            "nes_iters": args.nes_iters,
            "lam": args.lam,
            "seed": args.seed,
            "task": args.task,
        },
    )
    images, labels = imageio.load_dataset(args.data)
    patch = _load_patch(args.patch, args.patch_mask)
    exclusion = _load_exclusion(args.exclusion)
    victim = load_victim(args.victim) if args.victim else None
    oracle = _build_oracle(args, cfg, victim, images, labels)
    records = load_prior_set(args.priors)
    by_id = {r.image_id: r for r in records}

    run_dir = _make_run_dir(args.out, f"attack-{cfg['method']}")
    reports = []
    for i, (image, label) in enumerate(zip(images, labels)):
        image_id = f"img_{i:05d}"
        if image_id not in by_id:
            continue
        prior = by_id[image_id].psi
        target = int(label) if cfg["task"] == "classification" else (image, int(label))
        seed_i = int(rng.substream(cfg["seed"], "attack.image", i).integers(2**63))
        common = dict(
            image_id=image_id, exclusion=exclusion, rotation=cfg["rotation"]
        )
        if cfg["method"] == "dop":
            rep = dop_transfer(prior, oracle, image, target, patch,
                               rotation=cfg["rotation"], image_id=image_id)
        elif cfg["method"] == "dop-rd":
            rep = dop_rd(prior, oracle, image, target, patch,
                         budget=cfg["budget"], seed=seed_i, **common)
        elif cfg["method"] == "dop-loa":
            rep = dop_loa(prior, oracle, image, target, patch,
                          n_init=cfg["init"], budget=cfg["budget"], beta=cfg["beta"],
                          seed=seed_i, **common)
        elif cfg["method"] == "dop-dta":
            nes = NesConfig(lr=cfg["nes_lr"], population=cfg["nes_pop"],
                            iterations=cfg["nes_iters"], lam=cfg["lam"], seed=seed_i)
            rep = dop_dta(prior, oracle, image, target, patch, nes, **common)
        else:
            raise CliError(f"unknown attack method {cfg['method']!r}")
        reports.append(rep)
        (run_dir / f"report_{image_id}.json").write_text(
            json.dumps(rep.to_dict(), indent=2, sort_keys=True)
        )
    summary = summarize_reports(reports)
    (run_dir / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
    _write_manifest(
        run_dir,
        "attack",
        cfg,
        {"data": str(args.data), "victim": str(args.victim), "priors": str(args.priors),
         "patch": args.patch, "patch_mask": args.patch_mask, "exclusion": args.exclusion,
         "oracle_url": args.oracle_url},
    )
    print(f"{cfg['method']}: ASR={summary['asr']:.3f} mean_NQ={summary['mean_nq_all']:.1f} "
          f"(successes: {summary['mean_nq_success']})")
    print(f"artifacts in {run_dir}")
    return 0


def cmd_dmat(args) -> int:
    cfg = _resolve_config(
        "dmat",
        args.config,
        {
            "epochs": args.epochs,
            "k": args.k,
            "q": args.q,
            "lam": args.lam,
            "inner_lr": args.inner_lr,
            "outer_lr": args.outer_lr,
            "seed": args.seed,
        },
    )
    images, labels = imageio.load_dataset(args.data)
    patch = _load_patch(args.patch, args.patch_mask)
    dmat_cfg = DmatConfig(
        epochs=cfg["epochs"], k=cfg["k"], q=cfg["q"], lam=cfg["lam"],
        inner_lr=cfg["inner_lr"], outer_lr=cfg["outer_lr"],
        batch_size=cfg["batch_size"], seed=cfg["seed"], rotation=cfg["rotation"],
    )
    victim, net, report = dmat_train(images, labels, patch, dmat_cfg)
    run_dir = _make_run_dir(args.out, "dmat")
    save_dmat_checkpoint(run_dir, victim, net, report)
    _write_manifest(
        run_dir, "dmat", cfg,
        {"data": str(args.data), "patch": args.patch, "patch_mask": args.patch_mask},
    )
    final = report["epochs"][-1] if report["epochs"] else {}
    print(f"dmat done: clean_acc={final.get('clean_accuracy')} artifacts in {run_dir}")
    return 0


def cmd_traverse(args) -> int:
    cfg = _resolve_config(
        "traverse",
        args.config,
        {"stride": args.stride, "image_index": args.image_index, "seed": args.seed},
    )
    images, labels = imageio.load_dataset(args.data)
    idx = cfg["image_index"]
    victim = load_victim(args.victim)
    oracle = ClassifierOracle(victim)
    patch = _load_patch(args.patch, args.patch_mask)
    exclusion = _load_exclusion(args.exclusion)
    thetas, queries = analysis.grid_traverse(
        images[idx], patch, oracle, int(labels[idx]),
        stride=cfg["stride"], rotations=tuple(cfg["rotations"]), exclusion=exclusion,
    )
    run_dir = _make_run_dir(args.out, "traverse")
    payload = {"image_index": idx, "queries": queries,
               "adversarial_thetas": [t.tolist() for t in thetas]}
    (run_dir / "traversal.json").write_text(json.dumps(payload, indent=2, sort_keys=True))
    _write_manifest(
        run_dir, "traverse", cfg,
        {"data": str(args.data), "victim": str(args.victim),
         "patch": args.patch, "patch_mask": args.patch_mask, "exclusion": args.exclusion},
    )
    print(f"{len(thetas)} adversarial placements / {queries} queries; artifacts in {run_dir}")
    return 0


def cmd_kde(args) -> int:
    cfg = _resolve_config(
        "kde", args.config, {"bandwidth": args.bandwidth, "resolution": args.resolution}
    )
    payload = json.loads(Path(args.thetas).read_text())
    points = payload["adversarial_thetas"] if isinstance(payload, dict) else payload
    if not points:
        raise CliError("no adversarial placements to estimate a density from")
    grid = analysis.kde_density(
        np.asarray(points, dtype=float),
        bandwidth=cfg["bandwidth"],
        grid_resolution=cfg["resolution"],
    )
    run_dir = _make_run_dir(args.out, "kde")
    analysis.save_density_csv(run_dir / "density.csv", grid)
    analysis.save_marginals_csv(run_dir / "marginals.csv", grid)
    analysis.save_density_png(run_dir / "density.png", grid)
    _write_manifest(run_dir, "kde", cfg, {"thetas": str(args.thetas)})
    print(f"density grid mass={grid.mass():.6f}; artifacts in {run_dir}")
    return 0


def cmd_report(args) -> int:
    run_dir = Path(args.run)
    reports = []
    from .attacks import AttackReport

    for path in sorted(run_dir.glob("report_*.json")):
        reports.append(AttackReport.from_dict(json.loads(path.read_text())))
    if not reports:
        raise CliError(f"no attack reports found under {run_dir}")
    summary = summarize_reports(reports)
    method = reports[0].method
    nq_s = summary["mean_nq_success"]
    print(f"{'method':<10} {'n':>5} {'ASR':>7} {'meanNQ(all)':>12} {'meanNQ(succ)':>13}")
    print(
        f"{method:<10} {summary['n']:>5} {summary['asr']:>7.3f} "
        f"{summary['mean_nq_all']:>12.1f} {'-' if nq_s is None else round(nq_s, 1):>13}"
    )
    return 0


def cmd_replay(args) -> int:
    manifest = json.loads(Path(args.manifest).read_text())
    sub = manifest["subcommand"]
    cfg = manifest["config"]
    inputs = manifest["inputs"]
    config_blob = {sub.replace("-", "_"): cfg}
    tmp_cfg = Path(args.out) / "replay_config.json" if args.out else Path("replay_config.json")
    tmp_cfg.parent.mkdir(parents=True, exist_ok=True)
    tmp_cfg.write_text(json.dumps(config_blob, sort_keys=True))
    argv = [sub, "--config", str(tmp_cfg)]
    for key in ("data", "victim", "priors", "patch", "patch_mask", "exclusion", "thetas"):
        if inputs.get(key):
            argv += [f"--{key.replace('_', '-')}", str(inputs[key])]
    if inputs.get("oracle_url"):
        argv += ["--oracle-url", str(inputs["oracle_url"])]
    if args.out:
        argv += ["--out", args.out]
    return main(argv)


# -- argument parsing ------------------------------------------------------------


def _add_common(p, *, data=False, victim=False, patch=False, priors=False):
    p.add_argument("--config", help="JSON config file with per-subcommand sections")
    p.add_argument("--out", help="run directory (default runs/<timestamp>-<tag>)")
    p.add_argument("--seed", type=int, default=None)
    if data:
        p.add_argument("--data", required=True, help="dataset index file (path,label lines)")
    if victim:
        p.add_argument("--victim", help="victim checkpoint")
    if patch:
        p.add_argument("--patch", required=True, help="patch PNG or checker:N")
        p.add_argument("--patch-mask", help="binary mask PNG (default: full)")
        p.add_argument("--exclusion", help="binary exclusion-mask PNG")
    if priors:
        p.add_argument("--priors", required=True, help="prior-set directory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="patchdist",
        description="Distribution-optimized placement of fixed-pattern adversarial patches.",
    )
    sub = parser.add_subparsers(dest="subcommand", required=True)

    p = sub.add_parser("victim-train", help="train a toy victim")
    _add_common(p, data=True)
    p.add_argument("--task", choices=["classification", "identification"])
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.set_defaults(func=cmd_victim_train)

    p = sub.add_parser("prior-train", help="train the distribution mapping network")
    _add_common(p, data=True, victim=True, patch=True)
    p.add_argument("--k", type=int)
    p.add_argument("--lambda", dest="lam", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--q", type=int)
    p.set_defaults(func=cmd_prior_train)

    p = sub.add_parser("attack", help="run a black-box attack")
    _add_common(p, data=True, victim=True, patch=True, priors=True)
    p.add_argument("--method", choices=["dop", "dop-rd", "dop-loa", "dop-dta"])
    p.add_argument("--budget", type=int)
    p.add_argument("--init", type=int)
    p.add_argument("--beta", type=float)
    p.add_argument("--nes-lr", type=float)
    p.add_argument("--nes-pop", type=int)
    p.add_argument("--nes-iters", type=int)
    p.add_argument("--lambda", dest="lam", type=float)
    p.add_argument("--task", choices=["classification", "identification"])
    p.add_argument("--oracle-url", help="remote oracle base URL (or PATCHDIST_ORACLE_URL)")
    p.set_defaults(func=cmd_attack)

    p = sub.add_parser("dmat", help="distributional adversarial training")
    _add_common(p, data=True, patch=True)
    p.add_argument("--epochs", type=int)
    p.add_argument("--k", type=int)
    p.add_argument("--q", type=int)
    p.add_argument("--lambda", dest="lam", type=float)
    p.add_argument("--inner-lr", type=float)
    p.add_argument("--outer-lr", type=float)
    p.set_defaults(func=cmd_dmat)

    p = sub.add_parser("traverse", help="exhaustive placement traversal")
    _add_common(p, data=True, victim=True, patch=True)
    p.add_argument("--stride", type=int)
    p.add_argument("--image-index", type=int)
    p.set_defaults(func=cmd_traverse)

    p = sub.add_parser("kde", help="density estimate of adversarial placements")
    _add_common(p)
    p.add_argument("--thetas", required=True, help="traversal.json or a JSON list of thetas")
    p.add_argument("--bandwidth", type=float)
    p.add_argument("--resolution", type=int)
    p.set_defaults(func=cmd_kde)

    p = sub.add_parser("report", help="summarize attack reports in a run directory")
    p.add_argument("--run", required=True)
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("replay", help="re-execute a run from its manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", help="directory for the replayed artifacts")
    p.set_defaults(func=cmd_replay)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except TransportError as exc:
        print(f"oracle transport failure: {exc}", file=sys.stderr)
        return 3
    except (CliError, ValidationError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
