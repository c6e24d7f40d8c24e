"""Command-line pipeline: synth -> pretrain -> infer-groups -> train-guidance ->
sample -> evaluate -> report, plus validate, augment, sweep and a full run.

Every stage reads its inputs from one run directory and writes its outputs
next to them. Artifacts carry the format version, the hash of the config
fields the stage consumed, and the seed; a stage whose artifact already holds
the current hash is skipped.
"""
from __future__ import annotations

import argparse
import csv
import io as _stdio
import logging
import sys
from pathlib import Path

import numpy as np

from . import datasets, diffusion, grouper, invtrain, io, metrics
from .autodiff import NumericalError
from .config import ConfigError, load_config, set_field, stage_hash, validate_file
from .models import Denoiser, Guidance

log = logging.getLogger("debiasdiff")

EXIT_OK, EXIT_CONFIG, EXIT_MISSING, EXIT_NUMERIC = 0, 2, 3, 4
MODELS = ("biased", "invdiff")
SUMMARY_COLUMNS = ["run_id", "model", "delta", "lambda", "E", "omega",
                   "bias_mean", "bias_std", "frechet", "recall", "fidelity", "purity"]


class MissingArtifact(Exception):
    def __init__(self, path: Path, stage: str):
        super().__init__(f"{path} not found; run `{stage}` first")
        self.path, self.stage = path, stage


class Run:
    """Paths and cached-stage bookkeeping for one run directory."""

    def __init__(self, cfg: dict, out: str | Path | None = None):
        self.cfg = cfg
        self.dir = Path(out if out is not None else cfg["paths"]["run_dir"])
        self.seed = int(cfg["seed"])

    def path(self, name: str) -> Path:
        return self.dir / name

    def need(self, name: str, stage: str) -> Path:
        p = self.path(name)
        if not p.exists():
            raise MissingArtifact(p, stage)
        return p

    def fresh(self, name: str, chash: str) -> bool:
        p = self.path(name)
        if not p.exists():
            return False
        try:
            return io.read_json(p).get("config_hash") == chash
        except io.ArtifactError:
            return False

    def stamp(self, chash: str) -> dict:
        return {"config_hash": chash, "seed": self.seed}

    def schedule(self) -> diffusion.NoiseSchedule:
        s = self.cfg["schedule"]
        return diffusion.make_schedule(s["T"], s["beta_min"], s["beta_max"])

    def dataset(self, test: bool = False) -> datasets.BiasedDataset:
        name = "dataset_test.json" if test else "dataset.json"
        return datasets.load(self.need(name, "synth"))

    def denoiser(self) -> Denoiser:
        return Denoiser.load(self.need("denoiser.json", "pretrain"))

    def guidance(self) -> Guidance:
        return Guidance.load(self.need("guidance.json", "train-guidance"))

    def groups(self) -> dict:
        return io.read_json(self.need("groups.json", "infer-groups"))


# stages -------------------------------------------------------------------


def stage_synth(run: Run) -> None:
    d = run.cfg["dataset"]
    chash = stage_hash(run.cfg, "synth")
    if run.fresh("dataset.json", chash) and run.fresh("dataset_test.json", chash):
        log.info("synth: up to date")
        return
    train = datasets.synthesize(d["n"], d["rho"], d["sigma"], d["seed"])
    test = datasets.synthesize(d["n_test"], 0.5, d["sigma"], d["seed"] + datasets.TEST_SEED_OFFSET)
    datasets.save(train, run.path("dataset.json"), config_hash=chash)
    datasets.save(test, run.path("dataset_test.json"), config_hash=chash)
    log.info("synth: %d train / %d test samples", train.n, test.n)


def stage_pretrain(run: Run) -> None:
    chash = stage_hash(run.cfg, "pretrain")
    if run.fresh("denoiser.json", chash):
        log.info("pretrain: up to date")
        return
    ds = run.dataset()
    p = run.cfg["pretrain"]
    conf = diffusion.PretrainConfig(p["steps"], p["lr"], p["batch"], p["p_drop"])
    net, history = diffusion.pretrain_biased(ds, run.schedule(), conf, io.stream(run.seed, "pretrain"),
                                             init_seed=run.seed)
    run.path("pretrain_loss.csv").write_text(history.to_csv())
    net.save(run.path("denoiser.json"), **run.stamp(chash))
    log.info("pretrain: tail loss %.4f", history.tail_mean())


def stage_infer_groups(run: Run) -> None:
    chash = stage_hash(run.cfg, "infer-groups")
    if run.fresh("groups.json", chash):
        log.info("infer-groups: up to date")
        return
    g = run.cfg["grouper"]
    ds = run.dataset()
    net = run.denoiser()
    ell = grouper.per_sample_loss(ds, net, run.schedule(), g["M"], int(io.stream(run.seed, "grouper/loss").integers(2**31)))
    ga = grouper.infer_groups(ell.values, g["E"], g["omega"], g["steps"], g["lr"],
                              seed=int(io.stream(run.seed, "grouper/init").integers(2**31)))
    W = ga.W
    align = grouper.group_alignment(W, ds.groups, 4)
    doc = {
        "version": io.FORMAT_VERSION, "kind": "groups", **run.stamp(chash),
        "E": ga.E, "omega": ga.omega, "harden": bool(g["harden"]),
        "W": W.tolist(), "hard": ga.hard.tolist(),
        "J_final": ga.j_final, "J_initial": ga.j_initial,
        "J_random": grouper.random_assignment_objective(ell.values, ga.E, ga.omega, io.stream(run.seed, "grouper/random")),
        "purity": align.purity, "purity_flagged": align.flagged,
        "losses": ell.values.tolist(), "M": ell.M,
    }
    io.write_json(run.path("groups.json"), doc)
    log.info("infer-groups: J %.4f -> %.4f, purity %.3f", ga.j_initial, ga.j_final, align.purity)


def stage_train_guidance(run: Run) -> None:
    chash = stage_hash(run.cfg, "train-guidance")
    if run.fresh("guidance.json", chash):
        log.info("train-guidance: up to date")
        return
    ds = run.dataset()
    net = run.denoiser()
    groups = run.groups()
    t = run.cfg["invtrain"]
    conf = invtrain.InvTrainConfig(delta=t["delta"], lam=t["lambda"], steps=t["steps"], batch=t["batch"],
                                   lr=t["lr"], width=t["width"], full=t["full"],
                                   w_source="hard" if groups["harden"] else "soft")
    before = io.canonical_json(net.to_doc())
    try:
        guid, history = invtrain.train_guidance(ds, net, np.array(groups["W"]), run.schedule(), conf,
                                                io.stream(run.seed, "invtrain"), init_seed=run.seed)
    except invtrain.TrainingAborted as exc:
        run.path("guidance_loss.csv").write_text(exc.history.to_csv())
        last = Guidance(ds.d, net.n_labels, net.T, conf.width)
        last.restore(exc.last_good)
        last.save(run.path("guidance_last_good.json"), **run.stamp(chash), delta=conf.delta, aborted=str(exc))
        raise
    if not conf.full and io.canonical_json(net.to_doc()) != before:
        raise RuntimeError("denoiser parameters changed during guidance training")
    run.path("guidance_loss.csv").write_text(history.to_csv())
    guid.save(run.path("guidance.json"), **run.stamp(chash), delta=conf.delta,
              unstable=history.unstable, unstable_step=history.unstable_step,
              skipped_batches=history.skipped_groups,
              var_initial=history.var_initial, var_final=history.var_final)
    if history.unstable:
        log.warning("train-guidance: run flagged unstable at step %d", history.unstable_step)
    log.info("train-guidance: final loss %.4f", history.loss[-1])


def _sample_hash(run: Run, model: str) -> str:
    upstream = "train-guidance" if model == "invdiff" else "pretrain"
    return stage_hash(run.cfg, upstream, {"eval": run.cfg["eval"], "model": model})


def _sample_name(model: str, y: int, seed: int) -> str:
    return f"samples/{model}_y{y}_seed{seed}.json"


def stage_sample(run: Run, model: str) -> None:
    e = run.cfg["eval"]
    chash = _sample_hash(run, model)
    names = [_sample_name(model, y, s) for y in (0, 1) for s in e["seeds"]]
    if all(run.fresh(n, chash) for n in names):
        log.info("sample %s: up to date", model)
        return
    net = run.denoiser()
    guid = run.guidance() if model == "invdiff" else None
    delta = run.cfg["invtrain"]["delta"] if model == "invdiff" else 0.0
    sch = run.schedule()
    for y in (0, 1):
        for s in e["seeds"]:
            # the stream depends on (seed, y) only, so both models see identical noise
            x = diffusion.sample(e["samples_per_prompt"], y, net, guid, sch, io.stream(s, f"sample/y{y}"),
                                 delta=delta, w_cfg=e["w_cfg"])
            io.write_json(run.path(_sample_name(model, y, s)), {
                "version": io.FORMAT_VERSION, "kind": "samples", "config_hash": chash, "seed": s,
                "model": model, "y": y, "delta": delta, "w_cfg": e["w_cfg"], "samples": x.tolist()})
    log.info("sample %s: %d sets", model, len(names))


def stage_evaluate(run: Run, model: str) -> dict:
    e = run.cfg["eval"]
    chash = _sample_hash(run, model)
    sets: dict[int, list[np.ndarray]] = {0: [], 1: []}
    for y in (0, 1):
        for s in e["seeds"]:
            doc = io.read_json(run.need(_sample_name(model, y, s), "sample"))
            if doc.get("config_hash") != chash:
                raise io.ArtifactError(f"{_sample_name(model, y, s)} is stale; rerun `sample --model {model}`")
            sets[y].append(np.array(doc["samples"]))
    test = run.dataset(test=True)
    t, g = run.cfg["invtrain"], run.cfg["grouper"]
    echo = {"delta": t["delta"] if model == "invdiff" else 0.0, "lambda": t["lambda"], "E": g["E"], "omega": g["omega"]}
    rep = metrics.evaluate_samples(model, sets, test.samples, e["seeds"], e["k"], echo)
    if model == "invdiff" and run.path("groups.json").exists():
        rep.purity = run.groups()["purity"]
    path = run.path("report.json")
    report = io.read_json(path) if path.exists() else {"version": io.FORMAT_VERSION, "kind": "report", "models": {}}
    report["models"][model] = {**rep.to_doc(), "config_hash": chash}
    report["models"] = {m: report["models"][m] for m in sorted(report["models"])}
    report["seed"] = run.seed
    report["config_hash"] = stage_hash(run.cfg, "report")
    io.write_json(path, report)
    log.info("evaluate %s: bias %.3f (%.3f) frechet %.3f recall %.3f fidelity %.3f", model,
             rep.bias_mean, rep.bias_std, rep.frechet, rep.recall, rep.fidelity)
    return report["models"][model]


def stage_augment(run: Run) -> dict:
    e = run.cfg["eval"]
    ds, test = run.dataset(), run.dataset(test=True)
    net, guid = run.denoiser(), run.guidance()
    delta = run.cfg["invtrain"]["delta"]
    sch = run.schedule()
    half = e["aug_samples"] // 2
    erm = metrics.augmentation_eval(ds, None, test)
    rows = []
    for s in e["aug_seeds"]:
        xs = [diffusion.sample(half, y, net, guid, sch, io.stream(s, f"augment/y{y}"), delta=delta) for y in (0, 1)]
        gen = (np.concatenate(xs), np.repeat([0, 1], half))
        aug = metrics.augmentation_eval(ds, gen, test)
        rows.append({"seed": s, "acc": aug.acc, "worst_group_acc": aug.worst_group_acc, "group_acc": aug.group_acc})
    doc = {
        "version": io.FORMAT_VERSION, "kind": "augment", **run.stamp(_sample_hash(run, "invdiff")),
        "erm": {"acc": erm.acc, "worst_group_acc": erm.worst_group_acc, "group_acc": erm.group_acc},
        "augmented": rows,
        "median_gain": float(np.median([r["worst_group_acc"] for r in rows]) - erm.worst_group_acc),
    }
    io.write_json(run.path("augment.json"), doc)
    log.info("augment: ERM worst-group %.3f, median gain %+.3f", erm.worst_group_acc, doc["median_gain"])
    return doc


def aggregate(root: Path) -> list[dict]:
    """Rows for every run directory under ``root`` (``root`` itself included)."""
    rows = []
    candidates = [root] + sorted(p for p in root.rglob("*") if p.is_dir())
    for d in candidates:
        path = d / "report.json"
        if not path.exists():
            continue
        report = io.read_json(path)  # raises VersionError on mismatch
        run_id = "." if d == root else d.relative_to(root).as_posix()
        for model, r in report["models"].items():
            c = r["config"]
            rows.append({"run_id": run_id, "model": model, "delta": c["delta"], "lambda": c["lambda"],
                         "E": c["E"], "omega": c["omega"], "bias_mean": r["bias_mean"], "bias_std": r["bias_std"],
                         "frechet": r["frechet"], "recall": r["recall"], "fidelity": r["fidelity"],
                         "purity": "" if r.get("purity") is None else r["purity"]})
    return rows


def write_summary(root: Path, rows: list[dict], name: str = "summary.csv") -> Path:
    buf = _stdio.StringIO()
    writer = csv.DictWriter(buf, fieldnames=SUMMARY_COLUMNS, lineterminator="\n")
    writer.writeheader()
    for r in rows:
        writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
    path = root / name
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(buf.getvalue())
    return path


def run_pipeline(run: Run, augment: bool = True) -> None:
    stage_synth(run)
    stage_pretrain(run)
    stage_infer_groups(run)
    stage_train_guidance(run)
    for model in MODELS:
        stage_sample(run, model)
        stage_evaluate(run, model)
    if augment:
        stage_augment(run)
    write_summary(run.dir, aggregate(run.dir))


def sweep(cfg: dict, out: Path, axis: str, values: list[float]) -> Path:
    rows = []
    for v in values:
        child_cfg = set_field(cfg, axis, v)
        child = Run(child_cfg, out / f"{axis.rsplit('.', 1)[-1]}={v:g}")
        run_pipeline(child, augment=False)
        # the biased baseline is identical across children; only the swept model is tabulated
        rows += [dict(r, run_id=child.dir.name) for r in aggregate(child.dir) if r["model"] == "invdiff"]
    return write_summary(out, rows, "sweep.csv")


# argument handling --------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run config (defaults when omitted)")
    common.add_argument("--out", help="run directory (overrides paths.run_dir)")
    common.add_argument("--seed", type=int, help="override the top-level seed")
    common.add_argument("--harden", action="store_true",
                        help="use hard group assignments downstream of the grouper")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="debiasdiff", description=__doc__.split("\n\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("synth", "pretrain", "infer-groups", "train-guidance", "augment", "report", "run"):
        sub.add_parser(name, parents=[common])
    for name in ("sample", "evaluate"):
        p = sub.add_parser(name, parents=[common])
        p.add_argument("--model", choices=MODELS, default="invdiff")
    p = sub.add_parser("validate", parents=[common])
    p = sub.add_parser("sweep", parents=[common])
    p.add_argument("--axis", required=True, help="dotted numeric config field, e.g. invtrain.delta")
    p.add_argument("--values", required=True, help="comma-separated values")
    return parser


def _config_from_args(args) -> dict:
    cfg = load_config(args.config)
    if args.seed is not None:
        if args.seed < 0:
            raise ConfigError([f"--seed={args.seed}: must be >= 0"])
        cfg["seed"] = args.seed
    if args.harden:
        cfg["grouper"]["harden"] = True
    return cfg


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(message)s")
    try:
        if args.command == "validate":
            problems = validate_file(args.config) if args.config else []
            for p in problems:
                print(p)
            if not problems:
                print("ok")
            return EXIT_CONFIG if problems else EXIT_OK
        cfg = _config_from_args(args)
        run = Run(cfg, args.out)
        if args.command == "synth":
            stage_synth(run)
        elif args.command == "pretrain":
            stage_pretrain(run)
        elif args.command == "infer-groups":
            stage_infer_groups(run)
        elif args.command == "train-guidance":
            stage_train_guidance(run)
        elif args.command == "sample":
            stage_sample(run, args.model)
        elif args.command == "evaluate":
            stage_evaluate(run, args.model)
        elif args.command == "augment":
            stage_augment(run)
        elif args.command == "report":
            path = write_summary(run.dir, aggregate(run.dir))
            print(path)
        elif args.command == "run":
            run_pipeline(run)
        elif args.command == "sweep":
            try:
                values = [float(v) for v in args.values.split(",")]
            except ValueError:
                raise ConfigError([f"--values={args.values!r}: expected comma-separated numbers"]) from None
            print(sweep(cfg, run.dir, args.axis, values))
    except ConfigError as exc:
        for v in exc.violations:
            print(f"config error: {v}", file=sys.stderr)
        return EXIT_CONFIG
    except MissingArtifact as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except io.ArtifactError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except FileNotFoundError as exc:
        print(f"error: missing file {exc}", file=sys.stderr)
        return EXIT_MISSING
    except (NumericalError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
