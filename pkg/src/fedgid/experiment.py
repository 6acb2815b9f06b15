"""Experiment driver and command line.

Subcommands::

    fedgid gen-data   --out FILE [--split train|ood_test] [--correlation 0.9] ...
    fedgid run        --dataset FILE [--algorithm fedgid] [--rounds 20] ...
    fedgid ablate     --dataset FILE [--trials 3] ...
    fedgid gradcam    --checkpoint CKPT --dataset FILE [--ids 0,1,2]
    fedgid project    --checkpoints A B --dataset FILE [--num 100]
    fedgid report     RUN_DIR [RUN_DIR ...]

Exit codes: 0 success, 1 usage error, 2 runtime failure.  Output directories
default to ``$FEDGID_RUN_ROOT`` (or ``./runs``).
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import analysis as A
from . import model as M
from .datagen import DatasetSpec, ImageSet, dirichlet_partition, generate_dataset, load_dataset, save_dataset
from .distillation import DistillConfig
from .federation import RoundReport, RunResult, TrainConfig, run_experiment
from .intervention import InterventionConfig

log = logging.getLogger("fedgid")

# Desk-scale settings.  Full-scale values (50 rounds, lr 0.005, 60k images)
# are reachable through the flags.
DESK = {
    "rounds": 20,
    "train_samples": 12000,
    "test_samples": 2000,
    "lr": 0.05,
    "lambda_gd": 5.0,
    "alpha": 0.7,
    "tau": 1.0,
}

ABLATION = ("fedavg", "+GD", "+GI_F", "+GI_FM", "+GI_F+GD", "+GI_FM+GD")


def run_root() -> Path:
    return Path(os.environ.get("FEDGID_RUN_ROOT", "runs"))


def base_config(**overrides) -> TrainConfig:
    cfg = TrainConfig(
        num_rounds=DESK["rounds"], lr=DESK["lr"],
        intervention=InterventionConfig(alpha=DESK["alpha"], level="GI_FM"),
        distill=DistillConfig(temperature=DESK["tau"], lambda_gd=DESK["lambda_gd"]),
    )
    return replace(cfg, **overrides)


def variant_config(name: str, base: TrainConfig) -> TrainConfig:
    """Config for one ablation row; only algorithm, GI switch/level and lambda change."""
    gi_on = replace(base.intervention, enabled=True)
    gi_off = replace(base.intervention, enabled=False)
    no_gd = replace(base.distill, lambda_gd=0.0)
    if name == "fedavg":
        return replace(base, algorithm="fedavg")
    if name == "+GD":
        return replace(base, algorithm="fedgid", intervention=gi_off)
    if name in ("+GI_F", "+GI_FM", "+GI_F+GD", "+GI_FM+GD"):
        level = "GI_FM" if "GI_FM" in name else "GI_F"
        return replace(base, algorithm="fedgid", intervention=replace(gi_on, level=level),
                       distill=base.distill if name.endswith("+GD") else no_gd)
    raise ValueError(f"unknown ablation variant {name!r}")


def trial_config(base: TrainConfig, trial: int) -> TrainConfig:
    # trials move the init/shuffle seed and the partition seed together
    return replace(base, seed=base.seed + trial)


def ood_set_for(train: ImageSet, num_samples: int = DESK["test_samples"]) -> ImageSet:
    spec = replace(train.spec, split="ood_test", seed=train.spec.seed + 1, num_samples=num_samples)
    return generate_dataset(spec)


def run_trial(config: TrainConfig, train: ImageSet, test: ImageSet, run_dir=None,
              label: str | None = None) -> RunResult:
    partition = dirichlet_partition(train.labels, config.num_clients, config.beta, config.seed)
    extra = {"variant": label or config.algorithm}
    return run_experiment(config, train, partition, test, run_dir=run_dir, summary_extra=extra)


def run_ablation(base: TrainConfig, train: ImageSet, test: ImageSet, trials: int = 3,
                 out_dir=None, variants=ABLATION) -> dict[str, list[RunResult]]:
    results: dict[str, list[RunResult]] = {}
    for name in variants:
        cfg = variant_config(name, base)
        results[name] = []
        for t in range(trials):
            tc = trial_config(cfg, t)
            rd = None if out_dir is None else Path(out_dir) / _slug(name) / f"trial_{t}"
            log.info("ablation %s trial %d", name, t)
            results[name].append(run_trial(tc, train, test, rd, label=name))
    return results


def _slug(name: str) -> str:
    # "+GI_FM+GD" -> "gi_fm_gd"
    return name.lstrip("+").replace("+", "_").lower()


# --- summary tables --------------------------------------------------------

@dataclass
class SummaryRow:
    variant: str
    beta: float
    accuracies: list[float]

    @property
    def mean(self) -> float:
        return float(np.mean(self.accuracies))

    @property
    def std(self) -> float | None:
        return float(np.std(self.accuracies, ddof=1)) if len(self.accuracies) >= 2 else None

    def to_dict(self) -> dict:
        return {"variant": self.variant, "beta": self.beta, "trials": len(self.accuracies),
                "accuracies": self.accuracies, "mean": self.mean, "std": self.std}


def summarize(records) -> list[SummaryRow]:
    """Group ``(variant, beta, accuracy)`` records into mean/std rows, in first-seen order."""
    rows: dict[tuple, SummaryRow] = {}
    for variant, beta, acc in records:
        rows.setdefault((variant, beta), SummaryRow(variant, beta, [])).accuracies.append(acc)
    return list(rows.values())


def format_table(rows: list[SummaryRow]) -> str:
    lines = [f"{'variant':<12} {'beta':>6} {'trials':>6}  ood accuracy (%)"]
    for r in rows:
        std = "n/a" if r.std is None else f"{100 * r.std:.2f}"
        lines.append(f"{r.variant:<12} {r.beta:>6g} {len(r.accuracies):>6}  {100 * r.mean:.2f} ± {std}")
    return "\n".join(lines)


def write_summary(rows: list[SummaryRow], out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "summary_table.txt").write_text(format_table(rows) + "\n")
    (out / "summary_table.json").write_text(json.dumps([r.to_dict() for r in rows], indent=2) + "\n")


def read_run_dir(path) -> tuple[str, float, float]:
    path = Path(path)
    summary = path / "summary.json"
    if not summary.exists():
        raise FileNotFoundError(f"{path}: no summary.json (run incomplete?)")
    s = json.loads(summary.read_text())
    if s.get("final_ood_accuracy") is None:
        raise ValueError(f"{path}: run has no completed rounds")
    # every record must parse, and the last one must agree with the summary
    reports = [RoundReport.from_json(l) for l in (path / "metrics.jsonl").read_text().splitlines()]
    if len(reports) != s["rounds"] or reports[-1].global_ood_accuracy != s["final_ood_accuracy"]:
        raise ValueError(f"{path}: summary and metrics.jsonl disagree")
    return s.get("variant", s["algorithm"]), s["beta"], s["final_ood_accuracy"]


def find_run_dirs(paths) -> list[Path]:
    found = []
    for p in map(Path, paths):
        if (p / "config.json").exists():
            found.append(p)
        elif p.is_dir():
            found.extend(sorted(q.parent for q in p.rglob("config.json")))
        else:
            raise FileNotFoundError(f"{p}: not a run directory")
    return found


# --- command line ----------------------------------------------------------

class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--dataset", required=True, help="training set container")
    p.add_argument("--test-dataset", help="OOD test container (default: generated from the train spec)")
    p.add_argument("--out", help="output directory")
    p.add_argument("--algorithm", choices=("fedavg", "fedprox", "fedgid"), default="fedgid")
    p.add_argument("--rounds", type=int, default=DESK["rounds"])
    p.add_argument("--clients", type=int, default=5)
    p.add_argument("--local-epochs", type=int, default=5)
    p.add_argument("--batch", type=int, default=64)
    p.add_argument("--lr", type=float, default=DESK["lr"])
    p.add_argument("--wd", type=float, default=0.01)
    p.add_argument("--alpha", type=float, default=DESK["alpha"])
    p.add_argument("--lambda", dest="lambda_gd", type=float, default=DESK["lambda_gd"])
    p.add_argument("--tau", type=float, default=DESK["tau"])
    p.add_argument("--gi-level", choices=("f", "fm"), default="fm")
    p.add_argument("--no-gi", action="store_true", help="disable global intervention")
    p.add_argument("--mu", type=float, default=0.01, help="FedProx proximal weight")
    p.add_argument("--beta", type=float, default=0.1)
    p.add_argument("--fraction", type=float, default=1.0, help="client sampling fraction")
    p.add_argument("--trials", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--checkpoint-every", type=int, default=0)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="fedgid", description="FedGID federated OOD laboratory")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", help="generate a colour-background digit set")
    g.add_argument("--out", required=True)
    g.add_argument("--split", choices=("train", "ood_test"), default="train")
    g.add_argument("--correlation", type=float, default=0.9)
    g.add_argument("--samples", type=int)
    g.add_argument("--image-size", type=int, default=10)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--clients", type=int, help="also store a Dirichlet partition")
    g.add_argument("--beta", type=float, default=0.1)

    _train_flags(sub.add_parser("run", help="run one experiment (optionally several trials)"))
    a = sub.add_parser("ablate", help="run the six ablation configurations")
    _train_flags(a)
    a.set_defaults(trials=3)

    c = sub.add_parser("gradcam", help="Grad-CAM heatmaps for a checkpoint")
    c.add_argument("--checkpoint", required=True)
    c.add_argument("--dataset", required=True)
    c.add_argument("--ids", help="comma-separated image ids (default: first --num)")
    c.add_argument("--num", type=int, default=8)
    c.add_argument("--out")

    pr = sub.add_parser("project", help="shared 2-D PCA of two models' features")
    pr.add_argument("--checkpoints", nargs=2, required=True, metavar=("A", "B"))
    pr.add_argument("--dataset", required=True)
    pr.add_argument("--ids", help="comma-separated sample ids (default: --num seeded draws)")
    pr.add_argument("--num", type=int, default=100)
    pr.add_argument("--seed", type=int, default=0)
    pr.add_argument("--out")

    r = sub.add_parser("report", help="aggregate finished runs into a summary table")
    r.add_argument("runs", nargs="+")
    r.add_argument("--out")
    return parser


def config_from_args(args) -> TrainConfig:
    level = "GI_FM" if args.gi_level == "fm" else "GI_F"
    return TrainConfig(
        num_rounds=args.rounds, num_clients=args.clients, local_epochs=args.local_epochs,
        batch_size=args.batch, lr=args.lr, weight_decay=args.wd, sample_fraction=args.fraction,
        seed=args.seed, beta=args.beta, algorithm=args.algorithm, fedprox_mu=args.mu,
        checkpoint_every=args.checkpoint_every,
        intervention=InterventionConfig(alpha=args.alpha, level=level, enabled=not args.no_gi),
        distill=DistillConfig(temperature=args.tau, lambda_gd=args.lambda_gd),
    )


def _load_sets(args):
    train, _ = load_dataset(args.dataset)
    test = load_dataset(args.test_dataset)[0] if args.test_dataset else ood_set_for(train)
    return train, test


def _parse_ids(text, n_total):
    ids = [int(t) for t in text.split(",") if t.strip()]
    bad = [i for i in ids if not 0 <= i < n_total]
    if bad:
        raise UsageError(f"unknown image id(s) {bad}; dataset has {n_total} images")
    return ids


def cmd_gen_data(args) -> int:
    spec = DatasetSpec(correlation_strength=args.correlation, split=args.split, seed=args.seed,
                       image_size=(args.image_size, args.image_size),
                       num_samples=args.samples or (DESK["train_samples"] if args.split == "train"
                                                    else DESK["test_samples"]))
    images = generate_dataset(spec)
    part = dirichlet_partition(images.labels, args.clients, args.beta, args.seed) if args.clients else None
    save_dataset(args.out, images, part)
    print(f"wrote {len(images)} {args.split} images to {args.out}")
    print(f"measured correlation P(background == label) = {images.correlation():.4f}")
    return 0


def cmd_run(args) -> int:
    train, test = _load_sets(args)
    cfg = config_from_args(args)
    out = Path(args.out) if args.out else run_root() / f"{cfg.algorithm}_beta{cfg.beta:g}_seed{cfg.seed}"
    records = []
    for t in range(args.trials):
        tc = trial_config(cfg, t)
        rd = out if args.trials == 1 else out / f"trial_{t}"
        res = run_trial(tc, train, test, rd)
        print(f"trial {t}: final OOD accuracy {res.final_accuracy}")
        records.append((cfg.algorithm, cfg.beta, res.final_accuracy))
    if args.trials > 1:
        rows = summarize(records)
        write_summary(rows, out)
        print(format_table(rows))
    return 0


def cmd_ablate(args) -> int:
    train, test = _load_sets(args)
    base = config_from_args(args)
    out = Path(args.out) if args.out else run_root() / f"ablation_beta{base.beta:g}_seed{base.seed}"
    results = run_ablation(base, train, test, trials=args.trials, out_dir=out)
    rows = summarize((name, base.beta, r.final_accuracy) for name, rs in results.items() for r in rs)
    write_summary(rows, out)
    print(format_table(rows))
    return 0


def cmd_gradcam(args) -> int:
    params, _ = M.load_checkpoint(args.checkpoint)
    images, _ = load_dataset(args.dataset)
    ids = _parse_ids(args.ids, len(images)) if args.ids else list(range(min(args.num, len(images))))
    out = Path(args.out) if args.out else run_root() / "gradcam"
    out.mkdir(parents=True, exist_ok=True)
    sel = images.subset(ids)
    heat, pred, _ = A.gradcam(params, sel.pixels)
    with open(out / "predictions.jsonl", "w") as fh:
        for j, i in enumerate(ids):
            A.write_pgm(out / f"heatmap_{i}.pgm", heat[j], scale=8)
            A.write_ppm(out / f"image_{i}.ppm", np.kron(sel.pixels[j], np.ones((8, 8, 1))))
            rec = {"id": i, "label": int(sel.labels[j]), "predicted": int(pred[j]),
                   "bbox": [int(v) for v in sel.bboxes[j]],
                   "mass_in_box": A.box_mass_fraction(heat[j], sel.bboxes[j]),
                   "box_area_fraction": A.box_area_fraction(sel.bboxes[j], images.spec.image_size)}
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
            print(f"image {i}: label {rec['label']} predicted {rec['predicted']} "
                  f"mass in box {rec['mass_in_box']:.3f} (area {rec['box_area_fraction']:.3f})")
    return 0


def cmd_project(args) -> int:
    pa, _ = M.load_checkpoint(args.checkpoints[0])
    pb, _ = M.load_checkpoint(args.checkpoints[1])
    images, _ = load_dataset(args.dataset)
    if args.ids:
        ids = _parse_ids(args.ids, len(images))
    else:
        rng = np.random.default_rng(args.seed)
        ids = sorted(rng.choice(len(images), size=min(args.num, len(images)), replace=False).tolist())
    if len(ids) < 3:
        raise UsageError("need at least 3 samples to project")
    x = images.pixels[ids]
    proj = A.project_features(M.encode(pa, x)[1], M.encode(pb, x)[1])
    out = Path(args.out) if args.out else run_root() / "projection"
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "coords.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["source", "sample_id", "pc1", "pc2"])
        for (c1, c2), s, i in zip(proj.coords, proj.source, ids + ids):
            w.writerow(["AB"[int(s)], i, repr(float(c1)), repr(float(c2))])
    info = {"degenerate": proj.degenerate, "paired_distance": A.paired_distance(proj),
            "explained_variance": proj.explained_variance.tolist(), "num_samples": len(ids),
            "checkpoints": list(args.checkpoints)}
    (out / "projection.json").write_text(json.dumps(info, indent=2, sort_keys=True) + "\n")
    A.scatter_ppm(out / "scatter.ppm", proj)
    if proj.degenerate:
        print("degenerate input: all features identical, projection is all zeros")
    print(f"mean paired distance between models: {info['paired_distance']:.6f}")
    return 0


def cmd_report(args) -> int:
    dirs = find_run_dirs(args.runs)
    if not dirs:
        raise FileNotFoundError("no run directories found")
    rows = summarize(read_run_dir(d) for d in dirs)
    if args.out:
        write_summary(rows, args.out)
    print(format_table(rows))
    return 0


COMMANDS = {"gen-data": cmd_gen_data, "run": cmd_run, "ablate": cmd_ablate,
            "gradcam": cmd_gradcam, "project": cmd_project, "report": cmd_report}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(message)s")
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"fedgid: usage error: {exc}", file=sys.stderr)
        return 1
    except SystemExit as exc:
        # --help
        return 0 if exc.code in (0, None) else 1
    except Exception as exc:
        print(f"fedgid: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
