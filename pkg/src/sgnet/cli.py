"""Command-line entry points.

Subcommands: gen-data, train, eval, crossval, gradcam, attack-eval.
Global flags: --config PATH (JSON), --seed N, --jobs N, --out DIR,
--f64 (verification precision), --deterministic (reproducibility mode:
byte-identical outputs, no timestamps in manifests).

Exit codes: 0 success, 2 configuration error, 3 data/format error,
4 numerical failure (non-finite loss).
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import data as data_mod
from . import model as model_mod
from .attack import AttackConfig, pgd
from .crossval import (CONDITION_OOD, CONDITION_WD, CrossvalPlan, MetricsReport, RegimeSpec,
                       condition_adv, evaluate_conditions, metrics_from_scores, nested_cv,
                       score_batch)
from .errors import (ConfigError, ContractError, DegenerateInputError, FormatError,
                     NumericalError, ShapeError, SgnetError)
from .gradcam import activation_map, export_saliency, upsample_for_export
from .model import ModelConfig
from .trainer import RegimeConfig, cross_entropy_objective, fit

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4


def _sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def _config_hash(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode("utf-8")).hexdigest()


class RunContext:
    def __init__(self, args, command: str):
        self.command = command
        self.out_dir = Path(args.out)
        self.deterministic = bool(args.deterministic)
        self.jobs = int(args.jobs)
        file_cfg = {}
        if args.config:
            try:
                file_cfg = json.loads(Path(args.config).read_text())
            except FileNotFoundError as e:
                raise ConfigError(f"config file not found: {args.config}") from e
            except json.JSONDecodeError as e:
                raise ConfigError(f"config file is not valid JSON: {e}") from e
        self.raw = file_cfg
        self.master_seed = int(args.seed) if args.seed is not None \
            else int(file_cfg.get("master_seed", 0))

    def section(self, name: str) -> dict:
        sec = self.raw.get(name, {})
        if not isinstance(sec, dict):
            raise ConfigError(f"config section {name!r} must be an object")
        return dict(sec)

    def data_config(self) -> data_mod.SyntheticConfig:
        sec = self.section("data")
        sec.setdefault("seed", self.master_seed)
        try:
            return data_mod.SyntheticConfig.from_dict({**data_mod.SyntheticConfig().to_dict(), **sec})
        except TypeError as e:
            raise ConfigError(f"bad data config: {e}") from e

    def model_config(self) -> ModelConfig:
        sec = self.section("model")
        base = ModelConfig().to_dict()
        base.update(sec)
        return ModelConfig.from_dict(base)

    def train_config(self, **overrides) -> RegimeConfig:
        sec = self.section("train")
        sec.update({k: v for k, v in overrides.items() if v is not None})
        try:
            cfg = RegimeConfig(**sec)
        except TypeError as e:
            raise ConfigError(f"bad train config: {e}") from e
        cfg.validate()
        return cfg

    def eval_section(self) -> dict:
        sec = self.section("eval")
        sec.setdefault("eps_test", [0.001, 0.005])
        sec.setdefault("lambdas", [1.0, 3.0, 5.0])
        sec.setdefault("k", 5)
        sec.setdefault("repeats", 3)
        sec.setdefault("regimes", ["normal", "adversarial", "interp_aware"])
        return sec

    def resolved(self, command_cfg: dict) -> dict:
        return {"command": self.command, "master_seed": self.master_seed,
                "deterministic": self.deterministic, **command_cfg}

    def write_manifest(self, resolved_cfg: dict) -> Path:
        self.out_dir.mkdir(parents=True, exist_ok=True)
        manifest = {
            "command": self.command,
            "config": resolved_cfg,
            "config_sha256": _config_hash(resolved_cfg),
            "outputs": {},
            "completed": False,
        }
        if not self.deterministic:
            manifest["created_unix"] = time.time()
        path = self.out_dir / "manifest.json"
        path.write_text(json.dumps(manifest, sort_keys=True, indent=2))
        return path

    def finish_manifest(self, path: Path, outputs: list[Path]) -> None:
        manifest = json.loads(path.read_text())
        manifest["outputs"] = {p.name: _sha256_file(p) for p in sorted(outputs)}
        manifest["completed"] = True
        path.write_text(json.dumps(manifest, sort_keys=True, indent=2))

    def is_completed_run(self, resolved_cfg: dict) -> bool:
        path = self.out_dir / "manifest.json"
        if not path.exists():
            return False
        try:
            manifest = json.loads(path.read_text())
        except json.JSONDecodeError:
            return False
        if not manifest.get("completed") or \
                manifest.get("config_sha256") != _config_hash(resolved_cfg):
            return False
        for name, digest in manifest.get("outputs", {}).items():
            p = self.out_dir / name
            if not p.exists() or _sha256_file(p) != digest:
                return False
        return True


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_gen_data(ctx: RunContext, args) -> int:
    cfg = ctx.data_config()
    resolved = ctx.resolved({"data": cfg.to_dict()})
    manifest = ctx.write_manifest(resolved)
    ds = data_mod.generate(cfg)
    wd = ds.by_domain("WD")
    ood = ds.by_domain("OOD")
    wd_path = ctx.out_dir / "wd.sgdata"
    ood_path = ctx.out_dir / "ood.sgdata"
    data_mod.save_dataset(wd, wd_path)
    data_mod.save_dataset(ood, ood_path)
    ctx.finish_manifest(manifest, [wd_path, ood_path])
    print(f"WD:  {len(wd)} samples, prevalence {wd.prevalence():.3f} -> {wd_path}")
    print(f"OOD: {len(ood)} samples, prevalence {ood.prevalence():.3f} -> {ood_path}")
    return EXIT_OK


def _load_split(path: str) -> data_mod.Dataset:
    return data_mod.load_dataset(path)


def cmd_train(ctx: RunContext, args) -> int:
    train_cfg = ctx.train_config(regime=args.regime, lambda_interp=args.lam,
                                 epsilon_train=args.epsilon, seed=ctx.master_seed)
    model_cfg = ctx.model_config()
    resolved = ctx.resolved({"train": vars(train_cfg).copy(), "model": model_cfg.to_dict(),
                             "wd": args.wd, "ood": args.ood})
    manifest = ctx.write_manifest(resolved)
    wd = _load_split(args.wd)
    pool = wd
    if train_cfg.regime == "combined":
        if not args.ood:
            raise ConfigError("the combined regime needs --ood training data")
        pool = wd.merged_with(_load_split(args.ood))
    tr, va = data_mod.stratified_split(pool, [0.8, 0.2],
                                       seed=int(np.random.SeedSequence((ctx.master_seed, 0x5B)).generate_state(1)[0]))
    model = model_mod.init(model_cfg, seed=ctx.master_seed)
    model, hist = fit(model, (tr.stacked_voxels(), tr.labels()),
                      (va.stacked_voxels(), va.labels()), train_cfg)
    if not np.isfinite([r.train_loss for r in hist.epochs]).all():
        raise NumericalError("training loss became non-finite")
    ckpt = ctx.out_dir / "model.ckpt"
    hist_path = ctx.out_dir / "history.csv"
    model_mod.save(model, ckpt)
    hist.write_csv(hist_path)
    ctx.finish_manifest(manifest, [ckpt, hist_path])
    print(f"trained {train_cfg.regime} for {len(hist.epochs)} epochs "
          f"(best epoch {hist.best_epoch}) -> {ckpt}")
    return EXIT_OK


def cmd_eval(ctx: RunContext, args) -> int:
    eval_sec = ctx.eval_section()
    eps_test = tuple(float(e) for e in (args.eps_test or eval_sec["eps_test"]))
    resolved = ctx.resolved({"checkpoint": args.checkpoint, "wd": args.wd, "ood": args.ood,
                             "eps_test": list(eps_test)})
    manifest = ctx.write_manifest(resolved)
    model = model_mod.load(args.checkpoint)
    wd = _load_split(args.wd)
    ood = _load_split(args.ood) if args.ood else None
    attack = AttackConfig(epsilon=0.0, n_iters=int(eval_sec.get("attack_iters", 10)))
    conds = evaluate_conditions(model, wd, ood, eps_test, attack, seed=ctx.master_seed)

    # per-sample scores (benign + adversarial + ood) for self-consistency checks
    scores_path = ctx.out_dir / "scores.csv"
    import csv as _csv
    with open(scores_path, "w", newline="") as f:
        w = _csv.writer(f)
        w.writerow(["condition", "subject_id", "label", "score"])
        x_wd, y_wd = wd.stacked_voxels(), wd.labels()
        benign = score_batch(model, x_wd)
        for s, lab, sc in zip(wd.samples, y_wd, benign):
            w.writerow([CONDITION_WD, s.subject_id, int(lab), repr(float(sc))])
        for i, eps in enumerate(eps_test):
            rng = np.random.default_rng((ctx.master_seed, 0xA77AC, i))
            x_adv = pgd(model, x_wd, y_wd, replace(attack, epsilon=float(eps)),
                        loss=cross_entropy_objective, rng=rng)
            adv_scores = score_batch(model, x_adv.data)
            for s, lab, sc in zip(wd.samples, y_wd, adv_scores):
                w.writerow([condition_adv(eps), s.subject_id, int(lab), repr(float(sc))])
        if ood is not None:
            ood_scores = score_batch(model, ood.stacked_voxels())
            for s, lab, sc in zip(ood.samples, ood.labels(), ood_scores):
                w.writerow([CONDITION_OOD, s.subject_id, int(lab), repr(float(sc))])

    metrics_path = ctx.out_dir / "metrics.json"
    doc = {"conditions": {cond: {m: (None if v is None else
                                     {"mean": v, "std": 0.0, "n": 1})
                                 for m, v in metrics.items()}
                          for cond, metrics in conds.items()}}
    metrics_path.write_text(json.dumps(doc, sort_keys=True, indent=2))
    ctx.finish_manifest(manifest, [scores_path, metrics_path])
    print(f"evaluated {len(conds)} conditions -> {metrics_path}")
    return EXIT_OK


def build_regime_specs(eval_sec: dict, train_cfg: RegimeConfig) -> list[RegimeSpec]:
    specs: list[RegimeSpec] = []
    for regime in eval_sec["regimes"]:
        if regime in ("normal", "combined"):
            specs.append(RegimeSpec(regime, replace(train_cfg, regime=regime, lambda_interp=0.0)))
        elif regime == "adversarial":
            specs.append(RegimeSpec(regime, replace(train_cfg, regime="adversarial",
                                                    lambda_interp=0.0)))
        elif regime == "interp_aware":
            for lam in eval_sec["lambdas"]:
                specs.append(RegimeSpec(f"interp_lambda{lam:g}",
                                        replace(train_cfg, regime="interp_aware",
                                                lambda_interp=float(lam))))
        else:
            raise ConfigError(f"unknown regime {regime!r} in eval.regimes")
    return specs


def cmd_crossval(ctx: RunContext, args) -> int:
    eval_sec = ctx.eval_section()
    train_cfg = ctx.train_config()
    model_cfg = ctx.model_config()
    specs = build_regime_specs(eval_sec, train_cfg)
    plan = CrossvalPlan(
        model=model_cfg, regimes=specs, k=int(eval_sec["k"]),
        repeats=int(eval_sec["repeats"]),
        eps_test=tuple(float(e) for e in eval_sec["eps_test"]),
        eval_attack=AttackConfig(epsilon=0.0, n_iters=int(eval_sec.get("attack_iters", 10))),
        master_seed=ctx.master_seed, jobs=ctx.jobs)
    resolved = ctx.resolved({
        "train": vars(train_cfg).copy(), "model": model_cfg.to_dict(),
        "eval": {k: v for k, v in eval_sec.items()},
        "wd": args.wd, "ood": args.ood})
    if ctx.is_completed_run(resolved):
        print("run already completed for this config hash; nothing to do")
        return EXIT_OK
    manifest = ctx.write_manifest(resolved)
    wd = _load_split(args.wd)
    ood = _load_split(args.ood) if args.ood else data_mod.Dataset([], wd.extents)
    report = nested_cv(wd, ood, plan)
    records_path = ctx.out_dir / "records.csv"
    summary_path = ctx.out_dir / "summary.json"
    report.write_csv(records_path)
    baseline = "normal" if "normal" in report.regimes() else report.regimes()[0]
    report.write_json(summary_path, baseline=baseline)
    ctx.finish_manifest(manifest, [records_path, summary_path])
    print(f"{len(report.records)} records over {len(specs)} regimes -> {summary_path}")
    return EXIT_OK


def cmd_gradcam(ctx: RunContext, args) -> int:
    resolved = ctx.resolved({"checkpoint": args.checkpoint, "dataset": args.dataset,
                             "samples": list(args.samples), "class_id": args.class_id})
    manifest = ctx.write_manifest(resolved)
    model = model_mod.load(args.checkpoint)
    ds = _load_split(args.dataset)
    by_subject = {s.subject_id: s for s in ds.samples}
    outputs: list[Path] = []
    for sid in args.samples:
        if sid not in by_subject:
            raise FormatError(f"unknown sample id {sid} (dataset has "
                              f"{len(by_subject)} subjects)")
        sample = by_subject[sid]
        fp = model_mod.forward(model, sample.voxels[None, None, ...], training=False)
        cam = activation_map(fp, args.class_id, "detached")
        up = upsample_for_export(cam, ds.extents)[0]
        base = ctx.out_dir / f"saliency_s{sid}_c{args.class_id}"
        outputs.extend(Path(p) for p in export_saliency(up, base))
    ctx.finish_manifest(manifest, outputs)
    print(f"wrote {len(outputs)} saliency files to {ctx.out_dir}")
    return EXIT_OK


def cmd_attack_eval(ctx: RunContext, args) -> int:
    eval_sec = ctx.eval_section()
    eps_list = tuple(float(e) for e in (args.eps_test or eval_sec["eps_test"]))
    resolved = ctx.resolved({"checkpoint": args.checkpoint, "dataset": args.dataset,
                             "eps_test": list(eps_list)})
    manifest = ctx.write_manifest(resolved)
    model = model_mod.load(args.checkpoint)
    ds = _load_split(args.dataset)
    x, y = ds.stacked_voxels(), ds.labels()
    benign_scores = score_batch(model, x)
    benign_correct = (benign_scores > 0.5).astype(int) == y
    doc: dict = {"benign": metrics_from_scores(benign_scores, y), "attacks": {}}
    attack = AttackConfig(epsilon=0.0, n_iters=int(eval_sec.get("attack_iters", 10)))
    for i, eps in enumerate(eps_list):
        rng = np.random.default_rng((ctx.master_seed, 0xA77AC, i))
        x_adv = pgd(model, x, y, replace(attack, epsilon=eps),
                    loss=cross_entropy_objective, rng=rng)
        adv_scores = score_batch(model, x_adv.data)
        adv_correct = (adv_scores > 0.5).astype(int) == y
        flipped = benign_correct & ~adv_correct
        n_ok = int(benign_correct.sum())
        doc["attacks"][f"eps{eps:g}"] = {
            "metrics": metrics_from_scores(adv_scores, y),
            "attack_success_rate": (float(flipped.sum()) / n_ok) if n_ok else None,
            "max_perturbation": float(np.max(np.abs(
                x_adv.data.astype(np.float64) - x.astype(np.float64)))),
        }
    out_path = ctx.out_dir / "attack_eval.json"
    out_path.write_text(json.dumps(doc, sort_keys=True, indent=2))
    ctx.finish_manifest(manifest, [out_path])
    print(f"attack evaluation over {len(eps_list)} epsilons -> {out_path}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sgnet",
        description="Saliency-guided adversarial training and OOD evaluation "
                    "for small 2D/3D CNN classifiers.",
        epilog="exit codes: 0 success, 2 config error, 3 data/format error, "
               "4 numerical failure")
    parser.add_argument("--config", default=None, help="JSON run configuration")
    parser.add_argument("--seed", type=int, default=None, help="master seed")
    parser.add_argument("--jobs", type=int, default=1, help="parallel jobs (crossval)")
    parser.add_argument("--out", default="sgnet_out", help="output directory")
    parser.add_argument("--f64", action="store_true", help="float64 verification precision")
    parser.add_argument("--deterministic", action="store_true",
                        help="reproducibility mode: byte-identical outputs")
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("gen-data", help="generate the synthetic WD/OOD datasets")

    p_train = sub.add_parser("train", help="train one model under a regime")
    p_train.add_argument("--regime", default=None,
                         choices=["normal", "combined", "adversarial", "interp_aware"])
    p_train.add_argument("--wd", required=True, help="WD dataset file")
    p_train.add_argument("--ood", default=None, help="OOD dataset file (combined regime)")
    p_train.add_argument("--lambda", dest="lam", type=float, default=None)
    p_train.add_argument("--epsilon", type=float, default=None)

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint on all conditions")
    p_eval.add_argument("--checkpoint", required=True)
    p_eval.add_argument("--wd", required=True)
    p_eval.add_argument("--ood", default=None)
    p_eval.add_argument("--eps-test", type=float, nargs="*", default=None)

    p_cv = sub.add_parser("crossval", help="nested cross-validation over the regime grid")
    p_cv.add_argument("--wd", required=True)
    p_cv.add_argument("--ood", default=None)

    p_cam = sub.add_parser("gradcam", help="export saliency maps for selected samples")
    p_cam.add_argument("--checkpoint", required=True)
    p_cam.add_argument("--dataset", required=True)
    p_cam.add_argument("--samples", type=int, nargs="+", required=True)
    p_cam.add_argument("--class-id", type=int, default=1, choices=[0, 1])

    p_att = sub.add_parser("attack-eval", help="PGD attack-success evaluation")
    p_att.add_argument("--checkpoint", required=True)
    p_att.add_argument("--dataset", required=True)
    p_att.add_argument("--eps-test", type=float, nargs="*", default=None)

    return parser


_COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "crossval": cmd_crossval,
    "gradcam": cmd_gradcam,
    "attack-eval": cmd_attack_eval,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.f64:
        ad.set_default_dtype("float64")
    try:
        ctx = RunContext(args, args.command)
        return _COMMANDS[args.command](ctx, args)
    except (ConfigError, ContractError, ShapeError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (FormatError, DegenerateInputError, FileNotFoundError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except SgnetError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
