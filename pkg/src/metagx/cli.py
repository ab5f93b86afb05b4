"""Command-line entry point: preprocess, train, evaluate, sweep, explain, synth.

Settings come from an INI config file (``--config``) with command-line
overrides; every command is deterministic given the same config and seed, and
writes only reproducible artifacts (no timestamps). Paths inside the config
file resolve relative to the config file's directory.

Exit codes: 0 success, 2 usage/configuration/data errors, 3 training
divergence.
"""

from __future__ import annotations

import argparse
import configparser
import json
import sys
from dataclasses import dataclass, fields, replace
from pathlib import Path

import numpy as np

from . import __version__
from .data import (
    ExpressionDataset,
    GeneInteractionSet,
    apply_normalization,
    filter_by_interactions,
    fit_normalization,
    load_expression_tsv,
    load_interactions_tsv,
    project,
    select_common_genes,
    write_expression_tsv,
)
from .errors import ConfigError, MetagxError, TrainingError
from .evaluate import (
    TRAINERS,
    best_lambda,
    cross_validate,
    cv_to_csv,
    lambda_sweep,
    sweep_to_csv,
)
from .explain import attribution_to_csv, rank_features, ranking_to_csv, shapley_sampled
from .models import ARCHITECTURES, ModelConfig, load_checkpoint, save_checkpoint
from .synth import SynthSpec, generate_task_family
from .training import MetaConfig, train_meta, train_plain, train_transfer

DEFAULT_LAMBDAS = (0.1, 0.3, 0.5, 0.7, 0.9, 1.0)


@dataclass(frozen=True)
class RunConfig:
    """Effective settings for one command after config-file/flag merging."""

    sources: tuple[Path, ...] = ()
    target: Path | None = None
    interactions: Path | None = None

    architecture: str = "mlp"
    hidden_dims: tuple[int, ...] = (128, 64)
    channels: int = 32
    kernel_size: int = 3
    conv_stride: int = 1
    conv_padding: int = 1
    pool_size: int = 2
    pool_stride: int = 2
    conv_layers: int = 2
    embed_dim: int = 32
    tokens: int = 16
    leaky_slope: float = 0.01

    alpha: float = 4e-4
    momentum: float = 0.2
    beta: float = 4e-4
    lam: float = 0.5
    epochs: int = 40
    batch_size: int = 32
    fresh_inner_eval: bool = False

    trainer: str = "meta"
    k: int = 10
    seed: int = 0
    jobs: int = 1
    lambdas: tuple[float, ...] = DEFAULT_LAMBDAS
    out: Path = Path("metagx-out")
    lam_given: bool = False
    arch_given: bool = False

    def model_config(self, input_dim: int) -> ModelConfig:
        return ModelConfig(
            architecture=self.architecture,
            input_dim=input_dim,
            hidden_dims=self.hidden_dims,
            channels=self.channels,
            kernel_size=self.kernel_size,
            conv_stride=self.conv_stride,
            conv_padding=self.conv_padding,
            pool_size=self.pool_size,
            pool_stride=self.pool_stride,
            conv_layers=self.conv_layers,
            embed_dim=self.embed_dim,
            tokens=self.tokens,
            leaky_slope=self.leaky_slope,
        )

    def meta_config(self, input_dim: int) -> MetaConfig:
        return MetaConfig(
            model=self.model_config(input_dim),
            inner_lr=self.alpha,
            inner_momentum=self.momentum,
            outer_lr=self.beta,
            lam=self.lam,
            epochs=self.epochs,
            batch_size=self.batch_size,
            seed=self.seed,
            fresh_inner_eval=self.fresh_inner_eval,
        )


# ---------------------------------------------------------------------------
# config file parsing


def _split_list(raw: str) -> list[str]:
    parts: list[str] = []
    for chunk in raw.replace("\n", ",").split(","):
        chunk = chunk.strip()
        if chunk:
            parts.append(chunk)
    return parts


def _parse_ints(raw: str, key: str) -> tuple[int, ...]:
    try:
        return tuple(int(p) for p in _split_list(raw))
    except ValueError:
        raise ConfigError(f"{key} must be a comma-separated list of integers, got {raw!r}") from None


def _parse_floats(raw: str, key: str) -> tuple[float, ...]:
    try:
        return tuple(float(p) for p in _split_list(raw))
    except ValueError:
        raise ConfigError(f"{key} must be a comma-separated list of numbers, got {raw!r}") from None


_SECTION_KEYS = {
    "data": {"sources", "target", "interactions"},
    "model": {
        "architecture",
        "hidden_dims",
        "channels",
        "kernel_size",
        "conv_stride",
        "conv_padding",
        "pool_size",
        "pool_stride",
        "conv_layers",
        "embed_dim",
        "tokens",
        "leaky_slope",
    },
    "training": {
        "alpha",
        "momentum",
        "beta",
        "lambda",
        "epochs",
        "batch_size",
        "fresh_inner_eval",
    },
    "run": {"trainer", "k", "seed", "jobs", "lambdas"},
}


def load_run_config(path: Path) -> RunConfig:
    """Parse an INI run config; unknown sections or keys are ConfigErrors."""
    parser = configparser.ConfigParser()
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from None
    try:
        parser.read_string(text, source=str(path))
    except configparser.Error as exc:
        raise ConfigError(f"config file {path} is not valid INI: {exc}") from None

    for section in parser.sections():
        if section not in _SECTION_KEYS:
            raise ConfigError(f"{path}: unknown section [{section}]")
        unknown = set(parser[section]) - _SECTION_KEYS[section]
        if unknown:
            raise ConfigError(
                f"{path}: unknown key(s) in [{section}]: {', '.join(sorted(unknown))}"
            )

    base = path.parent

    def _path(raw: str) -> Path:
        p = Path(raw)
        return p if p.is_absolute() else base / p

    kw: dict = {}
    if parser.has_section("data"):
        sec = parser["data"]
        if "sources" in sec:
            kw["sources"] = tuple(_path(p) for p in _split_list(sec["sources"]))
        if "target" in sec:
            kw["target"] = _path(sec["target"])
        if "interactions" in sec:
            kw["interactions"] = _path(sec["interactions"])
    try:
        if parser.has_section("model"):
            sec = parser["model"]
            if "architecture" in sec:
                kw["architecture"] = sec["architecture"].strip()
                kw["arch_given"] = True
            if "hidden_dims" in sec:
                kw["hidden_dims"] = _parse_ints(sec["hidden_dims"], "hidden_dims")
            for key in (
                "channels",
                "kernel_size",
                "conv_stride",
                "conv_padding",
                "pool_size",
                "pool_stride",
                "conv_layers",
                "embed_dim",
                "tokens",
            ):
                if key in sec:
                    kw[key] = sec.getint(key)
            if "leaky_slope" in sec:
                kw["leaky_slope"] = sec.getfloat("leaky_slope")
        if parser.has_section("training"):
            sec = parser["training"]
            for key in ("alpha", "momentum", "beta"):
                if key in sec:
                    kw[key] = sec.getfloat(key)
            if "lambda" in sec:
                kw["lam"] = sec.getfloat("lambda")
                kw["lam_given"] = True
            for key in ("epochs", "batch_size"):
                if key in sec:
                    kw[key] = sec.getint(key)
            if "fresh_inner_eval" in sec:
                kw["fresh_inner_eval"] = sec.getboolean("fresh_inner_eval")
        if parser.has_section("run"):
            sec = parser["run"]
            if "trainer" in sec:
                kw["trainer"] = sec["trainer"].strip()
            for key in ("k", "seed", "jobs"):
                if key in sec:
                    kw[key] = sec.getint(key)
            if "lambdas" in sec:
                kw["lambdas"] = _parse_floats(sec["lambdas"], "lambdas")
    except ValueError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return RunConfig(**kw)


def write_effective_config(cfg: RunConfig, path: Path) -> None:
    """Snapshot the effective settings as INI (skipping unset paths)."""
    lines = ["[data]"]
    if cfg.sources:
        lines.append("sources = " + ", ".join(str(p) for p in cfg.sources))
    if cfg.target is not None:
        lines.append(f"target = {cfg.target}")
    if cfg.interactions is not None:
        lines.append(f"interactions = {cfg.interactions}")
    lines += [
        "",
        "[model]",
        f"architecture = {cfg.architecture}",
        "hidden_dims = " + ", ".join(str(h) for h in cfg.hidden_dims),
        f"channels = {cfg.channels}",
        f"kernel_size = {cfg.kernel_size}",
        f"conv_stride = {cfg.conv_stride}",
        f"conv_padding = {cfg.conv_padding}",
        f"pool_size = {cfg.pool_size}",
        f"pool_stride = {cfg.pool_stride}",
        f"conv_layers = {cfg.conv_layers}",
        f"embed_dim = {cfg.embed_dim}",
        f"tokens = {cfg.tokens}",
        f"leaky_slope = {cfg.leaky_slope!r}",
        "",
        "[training]",
        f"alpha = {cfg.alpha!r}",
        f"momentum = {cfg.momentum!r}",
        f"beta = {cfg.beta!r}",
        f"lambda = {cfg.lam!r}",
        f"epochs = {cfg.epochs}",
        f"batch_size = {cfg.batch_size}",
        f"fresh_inner_eval = {str(cfg.fresh_inner_eval).lower()}",
        "",
        "[run]",
        f"trainer = {cfg.trainer}",
        f"k = {cfg.k}",
        f"seed = {cfg.seed}",
        f"jobs = {cfg.jobs}",
        "lambdas = " + ", ".join(repr(l) for l in cfg.lambdas),
    ]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# shared command plumbing


def _apply_overrides(cfg: RunConfig, args: argparse.Namespace) -> RunConfig:
    updates: dict = {}
    if getattr(args, "seed", None) is not None:
        updates["seed"] = args.seed
    if getattr(args, "out", None) is not None:
        updates["out"] = Path(args.out)
    if getattr(args, "jobs", None) is not None:
        updates["jobs"] = args.jobs
    if getattr(args, "trainer", None) is not None:
        updates["trainer"] = args.trainer
    if getattr(args, "k", None) is not None:
        updates["k"] = args.k
    if getattr(args, "lam", None) is not None:
        updates["lam"] = args.lam
        updates["lam_given"] = True
    if getattr(args, "lambdas", None) is not None:
        updates["lambdas"] = _parse_floats(args.lambdas, "--lambdas")
    return replace(cfg, **updates) if updates else cfg


def _config_from_args(args: argparse.Namespace) -> RunConfig:
    cfg = load_run_config(Path(args.config)) if args.config else RunConfig()
    cfg = _apply_overrides(cfg, args)
    if cfg.trainer not in TRAINERS:
        raise ConfigError(f"trainer must be one of {TRAINERS}, got {cfg.trainer!r}")
    if cfg.architecture not in ARCHITECTURES:
        raise ConfigError(
            f"architecture must be one of {ARCHITECTURES}, got {cfg.architecture!r}"
        )
    if cfg.jobs < 1:
        raise ConfigError(f"jobs must be >= 1, got {cfg.jobs}")
    return cfg


def _load_inputs(
    cfg: RunConfig, need_target: bool = True
) -> tuple[list[ExpressionDataset], ExpressionDataset | None, GeneInteractionSet | None]:
    if need_target and cfg.target is None:
        raise ConfigError("no target dataset configured (set [data] target)")
    sources = [load_expression_tsv(p) for p in cfg.sources]
    target = load_expression_tsv(cfg.target) if cfg.target is not None else None
    inter = load_interactions_tsv(cfg.interactions) if cfg.interactions else None
    return sources, target, inter


def _select_genes(
    sources: list[ExpressionDataset],
    target: ExpressionDataset,
    inter: GeneInteractionSet | None,
) -> tuple[str, ...]:
    genes = select_common_genes([*sources, target])
    if inter is not None:
        genes = filter_by_interactions(genes, inter)
    return genes


def _warn_lambda_ignored(cfg: RunConfig) -> None:
    if cfg.trainer == "plain" and cfg.lam_given:
        print(
            "warning: lambda is ignored by the plain trainer (no source mixing)",
            file=sys.stderr,
        )


def _out_dir(cfg: RunConfig) -> Path:
    cfg.out.mkdir(parents=True, exist_ok=True)
    return cfg.out


# ---------------------------------------------------------------------------
# commands


def cmd_preprocess(args: argparse.Namespace) -> int:
    cfg = _config_from_args(args)
    sources, target, inter = _load_inputs(cfg)
    before = select_common_genes([*sources, target])
    genes = filter_by_interactions(before, inter) if inter is not None else before
    out = _out_dir(cfg)
    processed = out / "processed"
    processed.mkdir(exist_ok=True)
    report = [
        f"datasets: {len(sources)} source(s) + 1 target",
        f"shared genes: {len(before)}",
        f"after interaction filter: {len(genes)}",
    ]
    for ds in [*sources, target]:
        projected = project(ds, genes)
        write_expression_tsv(projected, processed / f"{ds.name}.tsv")
        report.append(
            f"dataset {ds.name}: {ds.n_samples} samples, "
            f"{int(ds.labels.sum())} positive"
        )
    (out / "genes.txt").write_text("\n".join(genes) + "\n", encoding="utf-8")
    (out / "report.txt").write_text("\n".join(report) + "\n", encoding="utf-8")
    write_effective_config(cfg, out / "config.ini")
    print(f"preprocess: {len(genes)} genes -> {processed}")
    return 0


def _normalized_training_inputs(cfg: RunConfig):
    sources, target, inter = _load_inputs(cfg)
    if cfg.trainer != "plain" and not sources:
        raise ConfigError(f"trainer {cfg.trainer!r} requires [data] sources")
    genes = _select_genes(sources, target, inter)
    sources_p = [project(s, genes) for s in sources]
    target_p = project(target, genes)
    norm_sources = [
        s.with_matrix(apply_normalization(s.matrix, fit_normalization(s.matrix)))
        for s in sources_p
    ]
    stats = fit_normalization(target_p.matrix)
    target_n = target_p.with_matrix(apply_normalization(target_p.matrix, stats))
    return genes, norm_sources, target_n, stats


def cmd_train(args: argparse.Namespace) -> int:
    cfg = _config_from_args(args)
    _warn_lambda_ignored(cfg)
    genes, norm_sources, target_n, stats = _normalized_training_inputs(cfg)
    meta_cfg = cfg.meta_config(len(genes))
    if cfg.trainer == "plain":
        params, log = train_plain(meta_cfg, target_n)
    elif cfg.trainer == "transfer":
        params, log = train_transfer(meta_cfg, norm_sources, target_n)
    else:
        params, log = train_meta(meta_cfg, norm_sources, target_n)
    out = _out_dir(cfg)
    save_checkpoint(out / "checkpoint.json", params, meta_cfg.model)
    log.to_csv(out / "trainlog.csv")
    sidecar = {
        "genes": list(genes),
        "normalization": {
            "mean": stats.mean.tolist(),
            "std": stats.std.tolist(),
        },
        "trainer": cfg.trainer,
        "seed": cfg.seed,
    }
    (out / "preprocess.json").write_text(
        json.dumps(sidecar, sort_keys=True) + "\n", encoding="utf-8"
    )
    write_effective_config(cfg, out / "config.ini")
    final = log.records[-1]
    print(
        f"train[{cfg.trainer}]: {len(log)} steps, final loss {final.loss_target!r} "
        f"-> {out / 'checkpoint.json'}"
    )
    return 0


def cmd_evaluate(args: argparse.Namespace) -> int:
    cfg = _config_from_args(args)
    _warn_lambda_ignored(cfg)
    sources, target, inter = _load_inputs(cfg)
    if cfg.trainer != "plain" and not sources:
        raise ConfigError(f"trainer {cfg.trainer!r} requires [data] sources")
    genes = _select_genes(sources, target, inter)
    result = cross_validate(
        sources,
        target,
        cfg.meta_config(len(genes)),
        trainer=cfg.trainer,
        k=cfg.k,
        interactions=inter,
        n_jobs=cfg.jobs,
    )
    out = _out_dir(cfg)
    cv_to_csv(result, out / f"cv_{cfg.trainer}.csv")
    summary = (
        "model,accuracy,f1,precision,recall,prauc\n"
        f"{cfg.trainer},{result.mean_accuracy!r},{result.mean_f1!r},"
        f"{result.mean_precision!r},{result.mean_recall!r},{result.mean_pr_auc!r}\n"
    )
    (out / "summary.csv").write_text(summary, encoding="utf-8")
    write_effective_config(cfg, out / "config.ini")
    for i, fold in enumerate(result.per_fold):
        print(f"fold {i}: f1={fold.f1!r} accuracy={fold.accuracy!r}")
    print(
        f"evaluate[{cfg.trainer}] k={cfg.k}: mean f1={result.mean_f1!r} "
        f"accuracy={result.mean_accuracy!r} pr_auc={result.mean_pr_auc!r}"
    )
    return 0


def cmd_sweep(args: argparse.Namespace) -> int:
    cfg = _config_from_args(args)
    sources, target, inter = _load_inputs(cfg)
    if not sources:
        raise ConfigError("sweep requires [data] sources")
    genes = _select_genes(sources, target, inter)
    points = lambda_sweep(
        sources,
        target,
        cfg.meta_config(len(genes)),
        lambdas=cfg.lambdas,
        k=cfg.k,
        interactions=inter,
        n_jobs=cfg.jobs,
    )
    out = _out_dir(cfg)
    sweep_to_csv(points, out / "sweep.csv")
    write_effective_config(cfg, out / "config.ini")
    for p in points:
        print(f"lambda={p.lam!r}: f1={p.f1_mean!r} +- {p.f1_std!r}")
    best = best_lambda(points)
    print(f"best lambda={best.lam!r} (f1={best.f1_mean!r})")
    return 0


def cmd_explain(args: argparse.Namespace) -> int:
    cfg = _config_from_args(args)
    checkpoint_path = Path(args.checkpoint)
    params, model_cfg = load_checkpoint(checkpoint_path)
    if cfg.arch_given and cfg.architecture != model_cfg.architecture:
        raise ConfigError(
            f"checkpoint holds a {model_cfg.architecture!r} model but the config "
            f"says {cfg.architecture!r}"
        )
    sidecar_path = checkpoint_path.parent / "preprocess.json"
    try:
        sidecar = json.loads(sidecar_path.read_text(encoding="utf-8"))
        genes = tuple(sidecar["genes"])
        mean = np.asarray(sidecar["normalization"]["mean"], dtype=np.float64)
        std = np.asarray(sidecar["normalization"]["std"], dtype=np.float64)
    except (OSError, json.JSONDecodeError, KeyError, TypeError) as exc:
        raise ConfigError(
            f"cannot read preprocessing sidecar {sidecar_path}: {exc}"
        ) from None
    if len(genes) != model_cfg.input_dim:
        raise ConfigError(
            f"checkpoint expects {model_cfg.input_dim} features but the sidecar "
            f"lists {len(genes)} genes"
        )
    _, target, _ = _load_inputs(cfg)
    target_p = project(target, genes)
    matrix = (target_p.matrix - mean) / std
    n_samples = min(args.samples, target_p.n_samples)
    out = _out_dir(cfg)
    attributions = []
    for i in range(n_samples):
        att = shapley_sampled(
            params,
            model_cfg,
            matrix,
            matrix[i],
            n_permutations=args.permutations,
            seed=int(np.random.SeedSequence([cfg.seed, i]).generate_state(1)[0]),
            gene_ids=genes,
        )
        attributions.append(att)
        attribution_to_csv(att, out / f"attribution_s{i:04d}.csv")
    ranked = rank_features(attributions, top_k=args.top_k)
    ranking_to_csv(ranked, out / "ranking.csv")
    write_effective_config(cfg, out / "config.ini")
    for gene, score in ranked[:5]:
        print(f"{gene}: {score!r}")
    print(f"explain: {n_samples} sample(s), ranking -> {out / 'ranking.csv'}")
    return 0


def cmd_synth(args: argparse.Namespace) -> int:
    cfg = _config_from_args(args)
    spec = SynthSpec(
        n_sources=args.sources,
        source_samples=args.source_samples,
        target_samples=args.target_samples,
        n_features=args.features,
        signal_dims=args.signal_dims,
        perturbation=args.perturbation,
        label_noise=args.noise,
        class_balance=args.balance,
        seed=cfg.seed,
    )
    sources, target = generate_task_family(spec)
    out = _out_dir(cfg)
    manifest: dict = {
        "spec": {f.name: getattr(spec, f.name) for f in fields(spec)},
        "datasets": {},
    }
    for ds in [*sources, target]:
        write_expression_tsv(ds, out / f"{ds.name}.tsv")
        manifest["datasets"][ds.name] = {
            "samples": ds.n_samples,
            "positives": int(ds.labels.sum()),
        }
    (out / "family.json").write_text(
        json.dumps(manifest, sort_keys=True) + "\n", encoding="utf-8"
    )
    print(f"synth: {len(sources)} sources + target -> {out}")
    return 0


# ---------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI run configuration file")
    common.add_argument("--seed", type=int, help="override the run seed")
    common.add_argument("--out", help="output directory (default metagx-out)")
    common.add_argument("--jobs", type=int, help="parallel fold workers")

    parser = argparse.ArgumentParser(
        prog="metagx",
        description="Meta-learning pipeline for gene-expression classification",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("preprocess", parents=[common], help="select genes and export TSVs")
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("train", parents=[common], help="train one model on the full target")
    p.add_argument("--trainer", choices=TRAINERS)
    p.add_argument("--lambda", dest="lam", type=float, help="target-loss mixing weight")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", parents=[common], help="k-fold cross-validation")
    p.add_argument("--trainer", choices=TRAINERS)
    p.add_argument("--k", type=int, help="fold count")
    p.add_argument("--lambda", dest="lam", type=float, help="target-loss mixing weight")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("sweep", parents=[common], help="cross-validated mixing-weight sweep")
    p.add_argument("--k", type=int, help="fold count")
    p.add_argument("--lambdas", help="comma-separated mixing weights")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("explain", parents=[common], help="Shapley attributions for a checkpoint")
    p.add_argument("--checkpoint", required=True, help="checkpoint.json from `metagx train`")
    p.add_argument("--samples", type=int, default=5, help="how many target rows to explain")
    p.add_argument("--permutations", type=int, default=2000, help="permutations per sample")
    p.add_argument("--top-k", type=int, default=20, help="ranking length")
    p.set_defaults(func=cmd_explain)

    p = sub.add_parser("synth", parents=[common], help="generate a synthetic task family")
    p.add_argument("--sources", type=int, default=3)
    p.add_argument("--source-samples", type=int, default=200)
    p.add_argument("--target-samples", type=int, default=60)
    p.add_argument("--features", type=int, default=50)
    p.add_argument("--signal-dims", type=int, default=10)
    p.add_argument("--perturbation", type=float, default=0.3)
    p.add_argument("--noise", type=float, default=0.05)
    p.add_argument("--balance", type=float, default=0.5)
    p.set_defaults(func=cmd_synth)

    return parser


def main(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except TrainingError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except (MetagxError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def entrypoint() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entrypoint()
