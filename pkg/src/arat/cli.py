"""Command-line interface: ``arat {gen-data,train,eval,attack,diagnose}``.

Exit codes: 0 success, 2 configuration error, 3 numeric abort, 4 I/O error.
``ARAT_RUN_ROOT`` sets the directory under which ``train`` creates run
directories when ``--out`` is not given (default ``./runs``).
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt
from . import config as C
from . import data as Dt
from . import diagnostics as D
from . import nn
from . import tensor as T
from . import trainer as Tr
from .attacks import AttackError, pgd, with_branch
from .losses import LossAssembly, LossError, compute_loss
from .nn import Branch, Mode

RUN_ROOT_ENV = "ARAT_RUN_ROOT"
EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4
INSTRUMENTS = ("conflict", "feature-distance", "similarity", "bn-variance", "drift", "gradient-norm")

log = logging.getLogger("arat")


def _emit(rec: dict, stream=None) -> None:
    print(json.dumps(rec, sort_keys=True), file=stream or sys.stdout)


# -- datasets ------------------------------------------------------------------------


def _resolve_path(p: str, base: Path | None) -> Path:
    path = Path(p)
    return path if path.is_absolute() or base is None else base / path


def load_splits(cfg: dict, base: Path | None = None) -> tuple[Dt.Dataset, Dt.Dataset]:
    if bool(cfg["data.train"]) != bool(cfg["data.test"]):
        raise C.ConfigError("set both data.train and data.test, or neither")
    if cfg["data.train"]:
        return (Dt.load_raw(_resolve_path(cfg["data.train"], base)),
                Dt.load_raw(_resolve_path(cfg["data.test"], base)))
    try:
        return Dt.make_splits(
            cfg["data.classes"], cfg["data.train_per_class"], cfg["data.test_per_class"], cfg["data.size"],
            cfg["data.seed"], noise=cfg["data.noise"], channels=cfg["data.channels"],
            contrast=cfg["data.contrast"], phase_jitter=cfg["data.phase_jitter"],
        )
    except Dt.DataError as exc:
        raise C.ConfigError(str(exc)) from exc


def _check_arch(arch: nn.Arch, ds: Dt.Dataset, source) -> None:
    expect = (arch.in_channels, arch.image_size, arch.image_size)
    if ds.shape != expect or ds.num_classes != arch.num_classes:
        raise C.ConfigError(
            f"{source}: dataset shape {ds.shape} with {ds.num_classes} classes does not match the "
            f"architecture (input {expect}, {arch.num_classes} classes)"
        )


# -- subcommands ---------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    cfg = _config_from(args)
    if cfg["data.train"] or cfg["data.test"]:
        raise C.ConfigError("gen-data generates synthetic data; leave data.train/data.test unset")
    train, test = load_splits(cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    Dt.save_raw(train, out / "train.bin")
    Dt.save_raw(test, out / "test.bin")
    _emit({"train": str(out / "train.bin"), "test": str(out / "test.bin"),
           "train_size": len(train), "test_size": len(test), "shape": list(train.shape)})
    return EXIT_OK


def _config_from(args) -> dict:
    overrides = C.parse_overrides(args.set or [])
    if getattr(args, "config", None):
        _, cfg = C.load(args.config)
        cfg.update(overrides)
        return cfg
    return C.resolve(overrides)


def _run_dir(args) -> Path:
    if args.out:
        return Path(args.out)
    root = Path(os.environ.get(RUN_ROOT_ENV, "runs"))
    return root / Path(args.config).stem


SUMMARY_FIELDS = list(Tr.MetricsRecord(0, 0, 0, 0).summary_row())


def cmd_train(args) -> int:
    text, cfg = C.load(args.config, args.set)
    base = Path(args.config).resolve().parent
    arch = C.build_arch(cfg)
    tcfg = C.build_train_config(cfg)
    for tag in tcfg.loss.tags:
        if tag not in arch.tags():
            raise C.ConfigError(f"loss.tags: {tag!r} is not a layer of this model; known: {arch.tags()}")
    train_ds, test_ds = load_splits(cfg, base)
    _check_arch(arch, train_ds, "data.train")
    _check_arch(arch, test_ds, "data.test")

    out = _run_dir(args)
    ck = out / "checkpoints"
    ck.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(text)
    resolved = dict(cfg)
    for key in ("data.train", "data.test"):
        if resolved[key]:
            resolved[key] = str(_resolve_path(resolved[key], base))
    (out / "config.resolved.txt").write_text(C.format_resolved(resolved))
    predictor_tags = list(tcfg.loss.tags) if tcfg.loss.predictor else []
    model = nn.init_model(arch, cfg["model.seed"], predictor_tags)
    ckpt.save(model, ck / "init.ckpt")

    every = cfg["trainer.checkpoint_every"]
    metrics = (out / "metrics.jsonl").open("w")
    summary = (out / "summary.csv").open("w", newline="")
    writer = csv.DictWriter(summary, fieldnames=SUMMARY_FIELDS)
    writer.writeheader()

    def on_epoch(rec: Tr.MetricsRecord, live: nn.Model) -> None:
        _emit(D.record(rec.epoch, "train", **{k: v for k, v in rec.summary_row().items() if k != "epoch"}), metrics)
        for r in rec.diagnostics:
            _emit(r, metrics)
        metrics.flush()
        writer.writerow(rec.summary_row())
        summary.flush()
        if every and (rec.epoch + 1) % every == 0:
            ckpt.save(live, ck / f"epoch_{rec.epoch:03d}.ckpt")

    try:
        result = Tr.train(model, train_ds, tcfg, test_ds, on_epoch)
    finally:
        metrics.close()
        summary.close()
    ckpt.save(result.model, ck / "final.ckpt")
    final = result.history[-1]
    report = {"run": str(out), "epochs": tcfg.epochs, "clean_acc": final.test_clean_acc,
              "robust_acc": final.test_robust_acc}
    if result.swa_model is not None:
        ckpt.save(result.swa_model, ck / "swa.ckpt")
        clean, robust = Tr.evaluate(result.swa_model, test_ds, Branch.MAIN, tcfg.eval_attack, tcfg.eval_batch_size)
        rec = D.record(tcfg.epochs - 1, "swa_eval", branch="main", clean_acc=clean, robust_acc=robust,
                       snapshots=result.swa.count)
        with (out / "metrics.jsonl").open("a") as fh:
            _emit(rec, fh)
        report.update(swa_clean_acc=clean, swa_robust_acc=robust)
    _emit(report)
    return EXIT_OK


def _attack_from_flags(args) -> "C.AttackConfig":
    cfg = C.resolve({})
    overrides = C.parse_overrides([f"eval.{k}" for k in (args.attack or [])])
    cfg.update(overrides)
    return C.attack_config(cfg, "eval")


def _load_eval_inputs(args) -> tuple[nn.Model, Dt.Dataset]:
    model = ckpt.load(args.checkpoint)
    ds = Dt.load_raw(args.data)
    _check_arch(model.arch, ds, args.data)
    return model, ds


def cmd_eval(args) -> int:
    model, ds = _load_eval_inputs(args)
    attack = None if args.clean_only else _attack_from_flags(args)
    clean, robust = Tr.evaluate(model, ds, Branch(args.branch), attack, args.batch_size)
    rec = {"checkpoint": str(args.checkpoint), "branch": args.branch, "clean_acc": clean,
           "robust_acc": robust, "samples": len(ds)}
    if attack is not None:
        rec["attack"] = {"norm": attack.norm, "epsilon": attack.epsilon, "step_size": attack.step_size,
                         "iterations": attack.iterations, "random_init": attack.random_init}
    _emit(rec)
    if args.json:
        Path(args.json).write_text(json.dumps(rec, sort_keys=True, indent=2) + "\n")
    return EXIT_OK


def cmd_attack(args) -> int:
    model, ds = _load_eval_inputs(args)
    attack = with_branch(_attack_from_flags(args), Branch(args.branch))
    if args.limit:
        ds = ds.subset(np.arange(min(args.limit, len(ds))))
    out = open(args.out, "w") if args.out else sys.stdout
    try:
        for b, (idx, x, y) in enumerate(Dt.iterate_batches(ds, args.batch_size, shuffle=False)):
            x_adv = pgd(model, x, y, attack, np.random.default_rng([attack.seed, b]))
            clean_pred = nn.forward(model, x, attack.branch, Mode.EVAL)[0].data.argmax(axis=1)
            adv_pred = nn.forward(model, x_adv, attack.branch, Mode.EVAL)[0].data.argmax(axis=1)
            rec = {
                "batch": b, "indices": idx.tolist(), "labels": y.tolist(),
                "clean_pred": clean_pred.tolist(), "adv_pred": adv_pred.tolist(),
                "success": (adv_pred != y).tolist(),
                "linf": np.abs(x_adv - x).reshape(len(y), -1).max(axis=1).tolist(),
            }
            if not args.no_images:
                rec["x_adv"] = np.round(x_adv * 255).astype(int).tolist()
            _emit(rec, out)
    finally:
        if out is not sys.stdout:
            out.close()
    return EXIT_OK


# -- diagnose ------------------------------------------------------------------------


def _read_jsonl(path: Path) -> list[dict]:
    return [json.loads(line) for line in path.read_text().splitlines() if line.strip()]


def _diagnose_target(args) -> tuple[dict, list[tuple[int, nn.Model]], Path | None]:
    """Resolved config, (epoch, model) series, run dir (or None for a lone checkpoint)."""
    target = Path(args.target)
    if target.is_dir():
        cfg_path = target / "config.resolved.txt"
        _, cfg = C.load(cfg_path)
        cfg.update(C.parse_overrides(args.set or []))
        paths = sorted((target / "checkpoints").glob("epoch_*.ckpt"))
        series = [(int(p.stem.split("_")[1]), ckpt.load(p)) for p in paths]
        if not series:
            series = [(cfg["trainer.epochs"] - 1, ckpt.load(target / "checkpoints" / "final.ckpt"))]
        return cfg, series, target
    cfg = C.resolve(C.parse_overrides(args.set or []))
    return cfg, [(0, ckpt.load(target))], None


def cmd_diagnose(args) -> int:
    unknown = [i for i in args.instrument if i not in INSTRUMENTS]
    if unknown:
        raise C.ConfigError(f"unknown instrument(s) {unknown}; choose from {list(INSTRUMENTS)}")
    cfg, series, run = _diagnose_target(args)
    tcfg = C.build_train_config(cfg)
    if args.data:
        train_ds = test_ds = Dt.load_raw(args.data)
    else:
        train_ds, test_ds = load_splits(cfg)
    _check_arch(series[-1][1].arch, train_ds, "diagnose data")
    probe = Tr.Probe.from_dataset(train_ds, tcfg.probe_size, tcfg.seed)
    records: list[dict] = []
    last_epoch, last = series[-1]
    clean_branch = tcfg.loss.clean_branch
    rng = lambda: np.random.default_rng([tcfg.attack.seed, tcfg.seed, 0x50524F42])  # noqa: E731
    for inst in args.instrument:
        if inst == "conflict":
            x_adv = pgd(last, probe.x, probe.y, with_branch(tcfg.attack, Branch.MAIN), rng())
            rep = D.measure_conflict(last, probe.x, x_adv, probe.y, tcfg.loss, tcfg.conflict_granularity)
            records.append(D.record(last_epoch, "gradient_conflict", granularity=tcfg.conflict_granularity,
                                    global_cosine=rep.global_cosine, conflict_fraction=rep.conflict_fraction,
                                    counted=rep.counted))
        elif inst == "gradient-norm":
            x_adv = pgd(last, probe.x, probe.y, with_branch(tcfg.attack, Branch.MAIN), rng())
            records.append(D.record(last_epoch, "loss_gradient_norm",
                                    value=_full_gradient_norm(last, probe.x, x_adv, probe.y, tcfg.loss)))
        elif inst == "feature-distance":
            for epoch, model in series:
                d = D.feature_distance(model, probe.x, probe.y, tcfg.attack, clean_branch, rng())
                records.append(D.record(epoch, "feature_distance", model.arch.penultimate, clean_branch.value,
                                        value=d))
        elif inst == "similarity":
            s = D.representation_similarity(last, test_ds, tcfg.eval_attack, tcfg.eval_batch_size)
            records.append(D.record(last_epoch, "representation_similarity", last.arch.penultimate, "main",
                                    value=s))
        elif inst == "bn-variance":
            for epoch, model in series:
                for (tag, branch), mean in D.bn_running_means(model).items():
                    records.append(D.record(epoch, "bn_stat_variance", tag, branch,
                                            value=D.bn_stat_variance([mean])[0]))
        elif inst == "drift":
            prev = None
            for epoch, model in series:
                _, z_adv = D.penultimate_pair(model, probe.x, probe.y, tcfg.attack, clean_branch, rng())
                if prev is not None:
                    records.append(D.record(epoch, "representation_drift", model.arch.penultimate, "main",
                                            value=D.representation_drift(prev, z_adv)))
                prev = z_adv
    for r in records:
        _emit(r)
    if args.export_plot:
        history = _read_jsonl(run / "metrics.jsonl") if run is not None else []
        export_plots(history + records, Path(args.export_plot))
    return EXIT_OK


def _full_gradient_norm(model: nn.Model, x, x_adv, y, loss: LossAssembly) -> float:
    probe = model.copy()
    params = probe.parameters()
    with T.Tape() as tape:
        fw = compute_loss(probe, x, x_adv, y, loss, Mode.TRAIN)
    grads = dict(zip(params, tape.gradient(fw.breakdown.total, list(params.values()))))
    return D.loss_gradient_norm(grads)


_PLOT_FIELDS = {
    "gradient_conflict": ("global_cosine", "conflict_fraction"),
    "feature_distance": ("value",),
    "representation_similarity": ("value",),
    "representation_drift": ("value",),
    "loss_gradient_norm": ("value",),
    "bn_stat_variance": ("value",),
    "train": ("clean_acc", "robust_acc", "alpha", "beta", "lr", "loss_total"),
}


def export_plots(records: list[dict], out: Path) -> list[Path]:
    """One CSV per instrument: a row per epoch, one column per (layer, branch, field) series."""
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for inst, fields in _PLOT_FIELDS.items():
        rows: dict[int, dict[str, object]] = {}
        columns: list[str] = []
        for r in records:
            if r.get("instrument") != inst:
                continue
            prefix = ".".join(str(r[k]) for k in ("layer", "branch") if k in r)
            for f in fields:
                if f not in r:
                    continue
                col = f"{prefix}.{f}" if prefix else f
                if col not in columns:
                    columns.append(col)
                rows.setdefault(r["epoch"], {})[col] = r[f]
        if not rows:
            continue
        path = out / f"{inst}.csv"
        with path.open("w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=["epoch"] + columns)
            w.writeheader()
            for epoch in sorted(rows):
                w.writerow({"epoch": epoch, **rows[epoch]})
        written.append(path)
    return written


# -- entry point ---------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="arat", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write synthetic train/test containers")
    g.add_argument("--out", required=True, help="output directory")
    g.add_argument("--config", help="config file supplying data.* keys")
    g.add_argument("--set", action="append", metavar="KEY=VALUE", help="config override (repeatable)")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train a model from a config file")
    t.add_argument("config")
    t.add_argument("--out", help=f"run directory (default ${RUN_ROOT_ENV}/<config name>)")
    t.add_argument("--set", action="append", metavar="KEY=VALUE", help="config override (repeatable)")
    t.set_defaults(func=cmd_train)

    for name, func, text in (("eval", cmd_eval, "clean and robust accuracy of a checkpoint"),
                             ("attack", cmd_attack, "write adversarial examples as JSON lines")):
        e = sub.add_parser(name, help=text)
        e.add_argument("checkpoint")
        e.add_argument("--data", required=True, help="dataset container")
        e.add_argument("--branch", choices=[b.value for b in Branch], default="main")
        e.add_argument("--batch-size", type=int, default=200)
        e.set_defaults(func=func, attack=[])
        if name == "eval":
            e.add_argument("--clean-only", action="store_true", help="skip the attack")
            e.add_argument("--json", help="also write the report to this file")
        else:
            e.add_argument("--out", help="JSON-lines output file (default stdout)")
            e.add_argument("--limit", type=int, default=0, help="attack only the first N samples")
            e.add_argument("--no-images", action="store_true", help="omit perturbed pixels")

    d = sub.add_parser("diagnose", help="measurement instruments on a run directory or checkpoint")
    d.add_argument("target", help="run directory or checkpoint file")
    d.add_argument("--instrument", action="append", default=[], help=f"one of {', '.join(INSTRUMENTS)}")
    d.add_argument("--data", help="dataset container (default: the run's configured data)")
    d.add_argument("--set", action="append", metavar="KEY=VALUE", help="config override (repeatable)")
    d.add_argument("--export-plot", metavar="DIR", help="write per-instrument CSV series")
    d.set_defaults(func=cmd_diagnose)
    return p


def _split_attack_flags(argv: list[str]) -> tuple[list[str], list[str]]:
    """Pull ``--attack.KEY=VALUE`` flags out of argv (they address the evaluation attack)."""
    rest, flags = [], []
    it = iter(argv)
    for a in it:
        if a.startswith("--attack."):
            body = a[len("--attack."):]
            if "=" not in body:
                body = f"{body}={next(it, '')}"
            flags.append(body)
        else:
            rest.append(a)
    return rest, flags


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    argv, attack_flags = _split_attack_flags(argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    if attack_flags:
        if args.command not in ("eval", "attack"):
            parser.error("--attack.* flags apply to eval and attack only")
        args.attack = attack_flags
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except Tr.NumericAbort as exc:
        print(f"arat: numeric abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (C.ConfigError, Tr.TrainError, LossError, AttackError, nn.ModelError) as exc:
        print(f"arat: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, Dt.DataError, ckpt.CheckpointError) as exc:
        print(f"arat: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
