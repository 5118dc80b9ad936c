"""Command-line front end: train, build-manifold, profile, fuzz, quantize, retrain, report.

Every subcommand reads the same JSON config, writes its artifacts under
``--out`` and prints one ``key=value`` summary line. Exit status is 0 on
success, 2 for configuration errors and 1 for runtime errors.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import __version__
from .bench import BenchmarkSettings, make_dataset, select_corpus, train_model
from .config import ConfigError, load_config
from .coverage import CRITERIA, CoverageConfig, NeuronProfile, profile
from .datasets import load_idx, split
from .manifold import build_class_pca, load_manifold
from .oracle import Differential, LabelConsistency, QuantDiff
from .reporting import export_report, load_faults, retrain_eval
from .runtime import accuracy, load_model, model_digest, quantize, save_model
from .traversal import Bindings, FuzzConfig, run_campaign


def summary_line(cmd: str, fields: dict) -> str:
    parts = [f"cmd={cmd}"]
    for key, value in fields.items():
        if isinstance(value, float):
            value = f"{value:.6f}"
        parts.append(f"{key}={value}")
    return " ".join(parts)


class Context:
    def __init__(self, cfg: dict, base: Path, out: Path):
        self.cfg = cfg
        self.base = base
        self.out = out

    def path(self, key: str) -> Path:
        p = Path(self.cfg["paths"][key])
        return p if p.is_absolute() else self.out / p

    def input_path(self, value: str) -> Path:
        p = Path(value)
        return p if p.is_absolute() else self.base / p

    def settings(self, shape=None, classes=None) -> BenchmarkSettings:
        c = self.cfg
        ds = c["dataset"]
        return BenchmarkSettings(
            classes=classes or ds["classes"], shape=tuple(shape or ds["shape"]),
            per_class=ds["per_class"], spread=ds["spread"], jitter=ds["jitter"],
            train_fraction=c["split"]["train_fraction"], hidden=tuple(c["train"]["hidden"]),
            batchnorm=c["train"]["batchnorm"], lr=c["train"]["lr"], epochs=c["train"]["epochs"],
            batch=c["train"]["batch"], latent_dim=c["manifold"]["latent_dim"],
            corpus_per_class=c["corpus"]["per_class"], seed=c["seed"])

    def data(self):
        ds = self.cfg["dataset"]
        if ds["kind"] == "blobs":
            return make_dataset(self.settings())
        data = load_idx(self.input_path(ds["images"]), self.input_path(ds["labels"]), ds["class_count"])
        return split(data, self.cfg["split"]["train_fraction"], self.cfg["seed"] + 1)


def _prepare(path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    return path


def cmd_train(ctx: Context, args) -> dict:
    train, test = ctx.data()
    model, curve = train_model(ctx.settings(train.shape, train.class_count), train)
    path = save_model(model, _prepare(ctx.path("model")))
    return {"model": path, "accuracy_train": accuracy(model, train.inputs, train.labels),
            "accuracy_test": accuracy(model, test.inputs, test.labels),
            "final_loss": curve[-1] if curve else float("nan"), "digest": model_digest(path)[:16]}


def cmd_build_manifold(ctx: Context, args) -> dict:
    train, _ = ctx.data()
    manifold = build_class_pca(train, ctx.cfg["manifold"]["latent_dim"])
    for w in manifold.warnings:
        print(f"warning: {w}", file=sys.stderr)
    path = manifold.save(_prepare(ctx.path("manifold")))
    return {"manifold": path, "latent_dim": manifold.latent_dim, "classes": len(manifold.classes),
            "warnings": len(manifold.warnings)}


def cmd_profile(ctx: Context, args) -> dict:
    model = load_model(ctx.path("model"))
    train, _ = ctx.data()
    prof = profile(model, train)
    path = _prepare(ctx.path("profile"))
    prof.save(path)
    return {"profile": path, "neurons": int(sum(prof.neuron_counts)), "samples": len(train)}


def _oracle(ctx: Context, model):
    spec = ctx.cfg["oracle"]
    if spec["kind"] == "label":
        return LabelConsistency()
    if spec["kind"] == "differential":
        others = [load_model(ctx.input_path(p)) for p in spec["models"]]
        return Differential((model, *others), spec["agreement"], spec["tau"])
    return QuantDiff(model, load_model(ctx.path("quantized")))


def cmd_fuzz(ctx: Context, args) -> dict:
    c = ctx.cfg
    model = load_model(ctx.path("model"))
    manifold = load_manifold(ctx.path("manifold"))
    prof = NeuronProfile.load(ctx.path("profile"))
    _, test = ctx.data()
    corpus, inputs = select_corpus(manifold, test, c["corpus"]["per_class"])
    fuzz = dict(c["fuzz"])
    if fuzz["rng_seed"] is None:
        fuzz["rng_seed"] = c["seed"]
    if args.budget_steps is not None:
        fuzz["budget_steps"] = args.budget_steps
    if args.budget_seconds is not None:
        fuzz["budget_seconds"] = args.budget_seconds
    bindings = Bindings(model, prof, manifold, corpus, _oracle(ctx, model),
                        CoverageConfig(**c["coverage"]), c["mode"], inputs)
    report = run_campaign(FuzzConfig(**fuzz), bindings)
    out_dir = ctx.path("report")
    export_report(report, out_dir)
    fields = {"report": out_dir, "mode": report.mode, "strategy": fuzz["strategy"], "steps": report.steps,
              "init_nc": report.init_coverage["nc"]}
    fields.update({c_: report.final_coverage[c_] for c_ in CRITERIA})
    fields.update({"faults": len(report.faults), "accepted": report.accepted,
                   "lambda": report.lambda_history[-1][1] if report.lambda_history else 0.0})
    return fields


def cmd_quantize(ctx: Context, args) -> dict:
    model = load_model(ctx.path("model"))
    q = quantize(model, tuple(ctx.cfg["quantize"]["layer_kinds"]))
    path = save_model(q, _prepare(ctx.path("quantized")))
    _, test = ctx.data()
    before = accuracy(model, test.inputs, test.labels)
    after = accuracy(q, test.inputs, test.labels)
    return {"quantized": path, "accuracy_float": before, "accuracy_quant": after,
            "delta_points": 100 * (after - before)}


def cmd_retrain(ctx: Context, args) -> dict:
    r = ctx.cfg["retrain"]
    model = load_model(ctx.path("model"))
    faults = load_faults(ctx.path("report"))
    train, test = ctx.data()
    result = retrain_eval(model, train, test, faults, r["limit"], ctx.cfg["seed"],
                          r["epochs"], r["lr"], r["batch"])
    path = save_model(result["model"], _prepare(ctx.path("retrained")))
    return {"model": path, "faults_used": result["faults_used"], "accuracy_before": result["acc_before"],
            "accuracy_after": result["acc_after"]}


def _read_report(path: Path) -> dict:
    path = Path(path)
    if path.is_dir():
        path = path / "report.json"
    return json.loads(path.read_text())


def _scaled_entropy(rep: dict) -> float:
    div = rep.get("diversity")
    return div["scaled_entropy"] if div else 0.0


def cmd_report(ctx: Context, args) -> dict:
    targets = args.reports or [ctx.path("report")]
    if len(targets) > 2:
        raise ConfigError("report takes at most two report directories")
    reps = [_read_report(t) for t in targets]
    if len(reps) == 1:
        rep = reps[0]
        print(f"mode {rep['mode']}, strategy {rep['config']['strategy']}, {rep['steps']} steps")
        for c in CRITERIA:
            print(f"  {c:<5} init {rep['init_coverage'][c]:.4f}  final {rep['final_coverage'][c]:.4f}")
        print(f"  faults {rep['fault_count']}, scaled entropy {_scaled_entropy(rep):.4f}")
        fields = {c: rep["final_coverage"][c] for c in CRITERIA}
        fields.update({"faults": rep["fault_count"], "entropy": _scaled_entropy(rep)})
        return fields
    a, b = reps
    print(f"{'':<8}{'A':>10}{'B':>10}{'B-A':>10}")
    fields = {}
    for c in CRITERIA:
        va, vb = a["final_coverage"][c], b["final_coverage"][c]
        print(f"{c:<8}{va:>10.4f}{vb:>10.4f}{vb - va:>+10.4f}")
        fields[f"d_{c}"] = vb - va
    print(f"{'faults':<8}{a['fault_count']:>10}{b['fault_count']:>10}{b['fault_count'] - a['fault_count']:>+10}")
    fields["d_faults"] = b["fault_count"] - a["fault_count"]
    return fields


COMMANDS = {
    "train": (cmd_train, "train the target model on the configured dataset"),
    "build-manifold": (cmd_build_manifold, "fit per-class PCA manifolds on the training split"),
    "profile": (cmd_profile, "record per-neuron output ranges over the training split"),
    "fuzz": (cmd_fuzz, "run a traversal campaign and export its report"),
    "quantize": (cmd_quantize, "write an int8-quantized copy of the model"),
    "retrain": (cmd_retrain, "fine-tune on the training split plus fault inputs"),
    "report": (cmd_report, "summarise one report or diff two"),
}


def _global_flags(parser: argparse.ArgumentParser, suppress: bool) -> None:
    # subcommands repeat the global flags; SUPPRESS keeps them from resetting values given earlier
    d = (lambda v: argparse.SUPPRESS) if suppress else (lambda v: v)
    parser.add_argument("--config", type=Path, default=d(None),
                        help="JSON config file (defaults apply when omitted)")
    parser.add_argument("--seed", type=int, default=d(None), help="override the config seed")
    parser.add_argument("--out", type=Path, default=d(Path("out")), help="artifact directory (default: out)")
    parser.add_argument("--deterministic", action="store_true", default=d(False),
                        help="force serial evaluation (evaluation is always serial here)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="latentfuzz", description=__doc__.splitlines()[0])
    _global_flags(parser, suppress=False)
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text)
        _global_flags(p, suppress=True)
        if name == "fuzz":
            p.add_argument("--budget-steps", type=int, help="override fuzz.budget_steps")
            p.add_argument("--budget-seconds", type=float, help="add a wall-clock budget")
        if name == "report":
            p.add_argument("reports", nargs="*", type=Path, help="one report to show, or two to diff")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if getattr(args, "budget_steps", None) is not None and args.budget_steps < 0:
            raise ConfigError("--budget-steps must be >= 0")
        if getattr(args, "budget_seconds", None) is not None and args.budget_seconds <= 0:
            raise ConfigError("--budget-seconds must be > 0")
        if args.seed is not None and args.seed < 0:
            raise ConfigError("--seed must be >= 0")
        cfg, base = load_config(args.config, args.seed)
        fields = COMMANDS[args.command][0](Context(cfg, base, args.out), args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (OSError, ValueError, FloatingPointError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    print(summary_line(args.command, fields))
    return 0


if __name__ == "__main__":
    sys.exit(main())
