"""Command-line driver: each subcommand runs one stage of the pipeline and
persists its artifacts under the configured output directory."""

from __future__ import annotations

import argparse
import sys
import time
from pathlib import Path

import numpy as np

from . import attack as attack_mod
from . import data as data_mod
from . import models as models_mod
from . import whitebox
from .config import ConfigError, ExperimentConfig, config_keys_help, load_config
from .flow import FlowConfig, FlowModel, load_flow, save_flow
from .train import TrainConfig, load_train_state, train

COMMANDS = ("train-classifier", "collect-adv", "train-flow", "attack", "eval-transfer", "stats")


class CliError(RuntimeError):
    pass


def eps_tag(epsilon: float) -> str:
    scaled = epsilon * 255.0
    if abs(scaled - round(scaled)) < 1e-6:
        return str(int(round(scaled)))
    return f"{epsilon:.6f}".replace(".", "p")


class Artifacts:
    """File layout under the output directory."""

    def __init__(self, out_dir: str):
        self.root = Path(out_dir)

    def ensure(self) -> None:
        self.root.mkdir(parents=True, exist_ok=True)

    def target_model(self, index: int) -> Path:
        return self.root / f"target-{index}.tff"

    def condition_model(self) -> Path:
        return self.root / "condition.tff"

    def pairs(self, epsilon: float) -> Path:
        return self.root / f"pairs-eps{eps_tag(epsilon)}.tff"

    def flow(self, epsilon: float) -> Path:
        return self.root / f"flow-eps{eps_tag(epsilon)}.tff"

    def train_state(self, epsilon: float) -> Path:
        return self.root / f"train-state-eps{eps_tag(epsilon)}.tff"

    def stats(self, epsilon: float) -> Path:
        return self.root / f"stats-eps{eps_tag(epsilon)}.tff"

    def loss_csv(self, epsilon: float) -> Path:
        return self.root / f"loss-eps{eps_tag(epsilon)}.csv"

    def metrics_json(self, epsilon: float, method: str) -> Path:
        return self.root / f"metrics-eps{eps_tag(epsilon)}-{method}.json"

    def metrics_csv(self, epsilon: float) -> Path:
        return self.root / f"metrics-eps{eps_tag(epsilon)}.csv"

    def transfer_csv(self, epsilon: float, method: str) -> Path:
        return self.root / f"transfer-eps{eps_tag(epsilon)}-{method}.csv"


def build_dataset(cfg: ExperimentConfig) -> data_mod.Dataset:
    if cfg.dataset == "synthetic":
        return data_mod.gen_synthetic(cfg.num_classes, cfg.image_size, cfg.count, cfg.data_seed)
    if not cfg.cifar_path:
        raise CliError("dataset = cifar requires data.cifar_path")
    return data_mod.load_cifar_batch(cfg.cifar_path)


def load_splits(cfg: ExperimentConfig):
    dataset = build_dataset(cfg)
    return data_mod.split(dataset, cfg.train_fraction, cfg.data_seed)


def _load_zoo(cfg: ExperimentConfig, art: Artifacts) -> list[models_mod.SmallCNN]:
    zoo = []
    for i in range(len(cfg.model_seeds)):
        path = art.target_model(i)
        if not path.exists():
            raise CliError(f"missing classifier checkpoint {path}; run train-classifier first")
        zoo.append(models_mod.load_model(path))
    return zoo


def _load_condition(art: Artifacts) -> models_mod.SmallCNN:
    path = art.condition_model()
    if not path.exists():
        raise CliError(f"missing condition checkpoint {path}; run train-classifier first")
    return models_mod.load_model(path)


def _flow_config(cfg: ExperimentConfig, condition_net: models_mod.SmallCNN, image_shape) -> FlowConfig:
    cond_channels = condition_net.CONV_CHANNELS[-1]
    return FlowConfig(
        blocks=cfg.blocks,
        steps=cfg.steps,
        in_shape=tuple(image_shape),
        cond_channels=cond_channels,
        hidden_width=cfg.hidden_width,
    )


# ---- commands -------------------------------------------------------------------


def cmd_train_classifier(cfg: ExperimentConfig) -> dict:
    art = Artifacts(cfg.out_dir)
    art.ensure()
    train_set, test_set = load_splits(cfg)
    print(f"dataset: {len(train_set)} train / {len(test_set)} test, shape {train_set.image_shape}")
    accuracies = {}
    for i, seed in enumerate(cfg.model_seeds):
        model = models_mod.train_classifier(
            train_set, cfg.cls_epochs, cfg.cls_lr, seed, test_set=test_set, batch_size=cfg.cls_batch
        )
        acc = model.train_report["test_accuracy"]
        models_mod.save_model(model, art.target_model(i))
        accuracies[f"target-{i}"] = acc
        print(f"target-{i} (seed {seed}): test accuracy {acc:.4f} -> {art.target_model(i)}")
    condition = models_mod.train_classifier(
        train_set, cfg.cls_epochs, cfg.cls_lr, cfg.condition_seed,
        test_set=test_set, batch_size=cfg.cls_batch,
    )
    acc = condition.train_report["test_accuracy"]
    models_mod.save_model(condition, art.condition_model())
    accuracies["condition"] = acc
    print(f"condition (seed {cfg.condition_seed}): test accuracy {acc:.4f} -> {art.condition_model()}")
    return accuracies


def cmd_collect_adv(cfg: ExperimentConfig) -> dict:
    art = Artifacts(cfg.out_dir)
    art.ensure()
    train_set, _ = load_splits(cfg)
    zoo = _load_zoo(cfg, art)
    reports = {}
    for epsilon in cfg.epsilons:
        ensemble = zoo if cfg.collector == "mifgsm" else [zoo[0]]
        params = whitebox.AttackParams(
            epsilon=epsilon,
            step_size=min(cfg.step_size, epsilon),
            iterations=cfg.iterations,
            momentum=cfg.momentum,
            ensemble=ensemble,
        )
        result = whitebox.collect_pairs(train_set, cfg.collector, params, cfg.collect_seed)
        if result.empty:
            raise CliError(f"collected zero pairs at epsilon {epsilon}")
        data_mod.save_pairs(result.pairs, art.pairs(epsilon))
        print(
            f"eps {eps_tag(epsilon)}/255: {result.succeeded}/{result.eligible} eligible "
            f"examples yielded pairs -> {art.pairs(epsilon)}"
        )
        reports[epsilon] = result
    return reports


def cmd_train_flow(cfg: ExperimentConfig) -> dict:
    art = Artifacts(cfg.out_dir)
    art.ensure()
    condition = _load_condition(art)
    out = {}
    for epsilon in cfg.epsilons:
        pairs_path = art.pairs(epsilon)
        if not pairs_path.exists():
            raise CliError(f"missing pair file {pairs_path}; run collect-adv first")
        pairs = data_mod.load_pairs(pairs_path)
        flow_cfg = _flow_config(cfg, condition, pairs.image_shape)
        model = FlowModel(flow_cfg, seed=cfg.flow_seed)
        tcfg = TrainConfig(
            lr=cfg.train_lr,
            beta1=cfg.beta1,
            beta2=cfg.beta2,
            max_iters=cfg.max_iters,
            batch_size=cfg.train_batch,
            seed=cfg.train_seed,
            mse_enabled=cfg.mse_enabled,
            checkpoint_every=cfg.checkpoint_every,
            checkpoint_path=str(art.train_state(epsilon)),
        )
        resume = art.train_state(epsilon) if art.train_state(epsilon).exists() else None
        if resume is not None:
            _, _, done = load_train_state(resume)
            if done >= cfg.max_iters:
                resume = None
                print(f"eps {eps_tag(epsilon)}/255: stale checkpoint ignored (restarting)")
            else:
                print(f"eps {eps_tag(epsilon)}/255: resuming from iteration {done}")
        started = time.time()
        result = train(model, pairs, condition, tcfg, resume_from=resume, progress_every=200)
        save_flow(model, art.flow(epsilon))
        stats = attack_mod.compute_latent_stats(model, pairs, condition)
        stats.save(art.stats(epsilon))
        result.write_csv(art.loss_csv(epsilon))
        print(
            f"eps {eps_tag(epsilon)}/255: trained {cfg.max_iters} iters in "
            f"{time.time() - started:.0f}s -> {art.flow(epsilon)}, {art.stats(epsilon)}"
        )
        out[epsilon] = result
    return out


def _attack_artifacts(cfg: ExperimentConfig, art: Artifacts, epsilon: float):
    flow_path, stats_path = art.flow(epsilon), art.stats(epsilon)
    for path in (flow_path, stats_path):
        if not path.exists():
            raise CliError(f"missing attack artifact {path}; run train-flow first")
    return load_flow(flow_path), attack_mod.GaussianStats.load(stats_path)


def cmd_attack(cfg: ExperimentConfig) -> dict:
    art = Artifacts(cfg.out_dir)
    art.ensure()
    _, test_set = load_splits(cfg)
    zoo = _load_zoo(cfg, art)
    condition = _load_condition(art)
    target = zoo[cfg.target_index]
    max_budget = max(cfg.budgets)
    out = {}
    for epsilon in cfg.epsilons:
        flow_model, stats = _attack_artifacts(cfg, art, epsilon)
        if not cfg.shifted_stats:
            stats = attack_mod.GaussianStats.standard(stats.dim)
        reports = {}
        records, skipped = attack_mod.attack_dataset(
            test_set, target, max_budget, cfg.attack_seed, method="dta",
            flow=flow_model, stats=stats, condition_net=condition,
            epsilon=epsilon, limit=cfg.attack_examples,
            count_eligibility_query=cfg.count_eligibility,
        )
        reports["dta"] = attack_mod.evaluate(records, list(cfg.budgets))
        print(f"eps {eps_tag(epsilon)}/255 dta: attacked {len(records)} (skipped {skipped})")
        if cfg.run_baseline:
            base_records, _ = attack_mod.attack_dataset(
                test_set, target, max_budget, cfg.attack_seed, method="noise",
                epsilon=epsilon, limit=cfg.attack_examples,
                count_eligibility_query=cfg.count_eligibility,
            )
            reports["noise"] = attack_mod.evaluate(base_records, list(cfg.budgets))
        for method, report in reports.items():
            report.save_json(art.metrics_json(epsilon, method))
            asr = {b: f"{100 * report.asr[b]:.1f}%" for b in cfg.budgets}
            print(f"  {method}: ASR {asr}")
        art.metrics_csv(epsilon).write_text(
            attack_mod.metrics_table(reports, list(cfg.budgets))
        )
        print(f"  table -> {art.metrics_csv(epsilon)}")
        out[epsilon] = reports
    return out


def cmd_eval_transfer(cfg: ExperimentConfig) -> dict:
    art = Artifacts(cfg.out_dir)
    art.ensure()
    _, test_set = load_splits(cfg)
    zoo = _load_zoo(cfg, art)
    if len(zoo) < 2:
        raise CliError("eval-transfer needs at least 2 target models")
    condition = _load_condition(art)
    max_budget = max(cfg.budgets)
    targets = {f"target-{i}": m for i, m in enumerate(zoo)}
    out = {}
    for epsilon in cfg.epsilons:
        flow_model, stats = _attack_artifacts(cfg, art, epsilon)
        methods = {"dta": dict(method="dta", flow=flow_model, stats=stats, condition_net=condition)}
        if cfg.run_baseline:
            methods["noise"] = dict(method="noise")
        for label, kwargs in methods.items():
            records_by_source = {}
            for name, model in targets.items():
                records, _ = attack_mod.attack_dataset(
                    test_set, model, max_budget, cfg.attack_seed,
                    epsilon=epsilon, limit=cfg.attack_examples,
                    count_eligibility_query=cfg.count_eligibility, **kwargs,
                )
                if not any(r.success for r in records):
                    raise CliError(f"{label}: no successful attacks on {name}")
                records_by_source[name] = records
            sources, names, matrix = attack_mod.transfer_matrix(records_by_source, targets)
            art.transfer_csv(epsilon, label).write_text(
                attack_mod.transfer_matrix_csv(sources, names, matrix)
            )
            off_diag = matrix[~np.eye(len(sources), dtype=bool)]
            print(
                f"eps {eps_tag(epsilon)}/255 {label}: mean off-diagonal transfer "
                f"{100 * off_diag.mean():.1f}% -> {art.transfer_csv(epsilon, label)}"
            )
            out[(epsilon, label)] = matrix
    return out


def cmd_stats(cfg: ExperimentConfig) -> dict:
    art = Artifacts(cfg.out_dir)
    art.ensure()
    condition = _load_condition(art)
    out = {}
    for epsilon in cfg.epsilons:
        flow_path, pairs_path = art.flow(epsilon), art.pairs(epsilon)
        for path in (flow_path, pairs_path):
            if not path.exists():
                raise CliError(f"missing artifact {path}")
        flow_model = load_flow(flow_path)
        pairs = data_mod.load_pairs(pairs_path)
        stats = attack_mod.compute_latent_stats(flow_model, pairs, condition)
        stats.save(art.stats(epsilon))
        print(
            f"eps {eps_tag(epsilon)}/255: D={stats.dim} "
            f"|mu|={np.linalg.norm(stats.mu):.3f} "
            f"sigma range [{stats.sigma.min():.3f}, {stats.sigma.max():.3f}] "
            f"-> {art.stats(epsilon)}"
        )
        out[epsilon] = stats
    return out


_DISPATCH = {
    "train-classifier": cmd_train_classifier,
    "collect-adv": cmd_collect_adv,
    "train-flow": cmd_train_flow,
    "attack": cmd_attack,
    "eval-transfer": cmd_eval_transfer,
    "stats": cmd_stats,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="flowstrike",
        description="Flow-based query-limited hard-label attack pipeline.",
        epilog=config_keys_help(),
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name, help=f"run the {name} stage")
        p.add_argument("--config", required=True, help="experiment config file")
        p.add_argument("--seed", type=int, default=None, help="offset every configured seed by N")
        p.add_argument("--out", default=None, help="override the output directory")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg = cfg.shifted(args.seed)
        if args.out is not None:
            cfg.out_dir = args.out
        _DISPATCH[args.command](cfg)
    except (ConfigError, CliError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
