"""Experiment runner.

Subcommands: ``generate`` (synthetic dataset files), ``train`` (federated /
centralized / local protocols over a seed list), ``zero-shot`` (held-out
treatment protocol), ``export-attention`` (averaged attention matrices).

Configuration is a single JSON file; every field defaults to the standard
training setup (200 rounds of 5 local epochs, batch 128, learning rate
5e-3, patience 20, width 256, 2 encoder layers, 8 heads) so experiments at
full scale need no overrides while tests shrink the dims.

Exit codes: 0 all seeds completed, 1 runtime failure (reports which seed),
2 configuration/usage error.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .data import (DataError, DatasetSchema, SyntheticDGPConfig,
                   generate_synthetic, load_dataset, load_descriptions,
                   make_sites, partition_sites, pooled_site, write_dataset,
                   write_schema)
from .evaluation import (METRIC_TABLE_HEADER, SiteMetrics, attention_snapshot,
                         evaluate_sites, metrics_table_rows, summarize_reports,
                         zero_shot_eval)
from .federation import (FederationConfig, FederationContext, RoundSummary,
                         run_centralized, run_federation, setup_federation)
from .model import ModelConfig, load_checkpoint, save_checkpoint
from .numerics import ConfigurationError, Tensor
from .tabular import Standardizer, Vocabulary
from .training import DivergenceError, LocalTrainConfig, TraceRow

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_CONFIG = 2

PROTOCOLS = ("federated", "centralized", "local")


@dataclass
class ExperimentConfig:
    protocol: str
    dataset_files: dict | None
    dgp: SyntheticDGPConfig | None
    dgp_seed: int | None           # None: reuse the run seed
    num_sites: int
    heterogeneity: float
    min_per_site: int
    model: ModelConfig
    local: LocalTrainConfig
    rounds: int
    patience: int
    seeds: list[int]
    descriptions_path: str | None
    output_dir: str


def _check_keys(section: Mapping, allowed: set[str], where: str) -> None:
    unknown = sorted(set(section) - allowed)
    if unknown:
        raise ConfigurationError(f"unknown keys in {where}: {unknown}")


def _dgp_from_dict(section: Mapping) -> tuple[SyntheticDGPConfig, int | None]:
    _check_keys(section, {
        "n", "num_numerical", "num_categorical", "num_treatments", "num_levels",
        "linear_coefficients", "interaction_terms", "intercepts",
        "propensity_coefficients", "propensity_sharpness", "noise_std", "seed"},
        "dataset.synthetic")
    if "n" not in section:
        raise ConfigurationError("dataset.synthetic needs an 'n'")
    seed = section.get("seed")
    cfg = SyntheticDGPConfig(
        n=int(section["n"]),
        num_numerical=int(section.get("num_numerical", 6)),
        num_categorical=int(section.get("num_categorical", 0)),
        num_treatments=int(section.get("num_treatments", 2)),
        num_levels=int(section.get("num_levels", 3)),
        linear_coefficients=_maybe_array(section.get("linear_coefficients")),
        interaction_terms=_maybe_interactions(section.get("interaction_terms")),
        intercepts=_maybe_array(section.get("intercepts")),
        propensity_coefficients=_maybe_array(section.get("propensity_coefficients")),
        propensity_sharpness=float(section.get("propensity_sharpness", 0.0)),
        noise_std=float(section.get("noise_std", 0.0)),
        seed=0 if seed is None else int(seed))
    return cfg, (None if seed is None else int(seed))


def _maybe_array(value) -> np.ndarray | None:
    return None if value is None else np.asarray(value, dtype=np.float64)


def _maybe_interactions(value) -> list[tuple[int, int, float]] | None:
    if value is None:
        return None
    return [(int(a), int(b), float(c)) for a, b, c in value]


def load_experiment_config(path: str | Path) -> ExperimentConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            raw = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigurationError(f"cannot read config {path}: {exc}") from None
    _check_keys(raw, {"protocol", "dataset", "partition", "model", "local",
                      "federation", "seeds", "descriptions", "output_dir"}, "config")

    protocol = raw.get("protocol", "federated")
    if protocol not in PROTOCOLS:
        raise ConfigurationError(f"protocol must be one of {PROTOCOLS}, got {protocol!r}")

    dataset = raw.get("dataset", {})
    _check_keys(dataset, {"synthetic", "files"}, "dataset")
    if ("synthetic" in dataset) == ("files" in dataset):
        raise ConfigurationError("dataset needs exactly one of 'synthetic' or 'files'")
    dgp = dgp_seed = files = None
    if "synthetic" in dataset:
        dgp, dgp_seed = _dgp_from_dict(dataset["synthetic"])
    else:
        files = dataset["files"]
        _check_keys(files, {"data", "schema", "num_treatments"}, "dataset.files")
        if "data" not in files or "schema" not in files:
            raise ConfigurationError("dataset.files needs 'data' and 'schema' paths")

    part = raw.get("partition", {})
    _check_keys(part, {"sites", "heterogeneity", "min_per_site"}, "partition")

    model_section = dict(raw.get("model", {}))
    _check_keys(model_section, {
        "embed_width", "encoder_layers", "self_heads", "cross_heads", "cross_layers",
        "predictor_hidden", "description_dim", "layer_norm_eps", "init_std"}, "model")
    model = ModelConfig(**model_section)

    local_section = dict(raw.get("local", {}))
    _check_keys(local_section, {"local_epochs", "batch_size", "learning_rate",
                                "alternation"}, "local")
    local = LocalTrainConfig(**local_section)

    fed = raw.get("federation", {})
    _check_keys(fed, {"rounds", "patience"}, "federation")

    seeds = [int(s) for s in raw.get("seeds", [0, 1, 2, 3, 4])]
    if not seeds:
        raise ConfigurationError("seeds must be nonempty")

    return ExperimentConfig(
        protocol=protocol, dataset_files=files, dgp=dgp, dgp_seed=dgp_seed,
        num_sites=int(part.get("sites", 3)),
        heterogeneity=float(part.get("heterogeneity", 0.0)),
        min_per_site=int(part.get("min_per_site", 1)),
        model=model, local=local,
        rounds=int(fed.get("rounds", 200)), patience=int(fed.get("patience", 20)),
        seeds=seeds, descriptions_path=raw.get("descriptions"),
        output_dir=raw.get("output_dir", "out"))


def resolve_dataset(config: ExperimentConfig, run_seed: int):
    """Records, schema and arm count for one run."""
    if config.dgp is not None:
        dgp = replace(config.dgp,
                      seed=config.dgp_seed if config.dgp_seed is not None else run_seed)
        records, schema = generate_synthetic(dgp)
        return records, schema, dgp.num_treatments
    files = config.dataset_files
    records, schema = load_dataset(files["data"], files["schema"],
                                   num_treatments=files.get("num_treatments"))
    if files.get("num_treatments"):
        k = int(files["num_treatments"])
    else:
        k = max(r.treatment for r in records) + 1
        k = max(k, 2)
    return records, schema, k


def _resolved_model_config(config: ExperimentConfig, num_treatments: int,
                           descriptions: Mapping[int, Tensor] | None) -> ModelConfig:
    model = replace(config.model, num_treatments=num_treatments)
    if descriptions is not None:
        width = len(next(iter(descriptions.values())))
        if model.description_dim is None:
            model = replace(model, description_dim=width)
        elif model.description_dim != width:
            raise ConfigurationError(
                f"description file width {width} != configured description_dim "
                f"{model.description_dim}")
        missing = [t for t in range(num_treatments) if t not in descriptions]
        if missing:
            raise ConfigurationError(f"descriptions missing for treatments {missing}")
    return model


def _fed_config(config: ExperimentConfig, run_seed: int) -> FederationConfig:
    return FederationConfig(rounds=config.rounds, patience=config.patience,
                            local=replace(config.local, seed=run_seed))


# ---------------------------------------------------------------------------
# Delimited writers. Floats are written with repr so reruns are byte-identical.

def _write_csv(path: Path, header: Sequence[str], rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)


def write_history_csv(path: Path, history: Sequence[RoundSummary]) -> None:
    rows = []
    for h in history:
        for sid in sorted(h.site_train_rmse):
            rows.append([h.round_index, sid,
                         repr(h.site_train_rmse[sid]),
                         repr(h.site_val_rmse[sid]) if sid in h.site_val_rmse else "",
                         repr(h.aggregate_val_rmse), h.stale_rounds])
    _write_csv(path, ["round", "site", "train_rmse_f", "val_rmse_f",
                      "aggregate_val_rmse_f", "stale_rounds"], rows)


def write_trace_csv(path: Path, trace: Sequence[TraceRow]) -> None:
    rows = [[r.round_index, r.site_id, r.epoch, r.phase, r.split, repr(r.loss)]
            for r in trace]
    _write_csv(path, ["round", "site", "epoch", "phase", "split", "loss"], rows)


def write_metrics_files(out_dir: Path, reports: Sequence[SiteMetrics]) -> None:
    payload = {"sites": [rep.to_dict() for rep in reports]}
    (out_dir / "metrics.json").write_text(
        json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    _write_csv(out_dir / "metrics.csv", METRIC_TABLE_HEADER, metrics_table_rows(reports))


def _checkpoint_meta(config: ExperimentConfig, model: ModelConfig,
                     ctx: FederationContext, seed: int) -> dict:
    return {
        "model_config": model.to_dict(),
        "schema": ctx.sites[0].schema.to_dict(),
        "vocab": ctx.vocab.to_dict(),
        "standardizers": {str(sid): std.to_dict()
                          for sid, std in ctx.standardizers.items()},
        "protocol": config.protocol,
        "seed": seed,
        "uses_descriptions": ctx.descriptions is not None,
    }


# ---------------------------------------------------------------------------
# train

def _train_one_seed(config: ExperimentConfig, seed: int, out_dir: Path,
                    descriptions: Mapping[int, Tensor] | None,
                    figures: bool) -> dict[str, float | None]:
    records, schema, k = resolve_dataset(config, seed)
    model = _resolved_model_config(config, k, descriptions)
    fed_cfg = _fed_config(config, seed)
    out_dir.mkdir(parents=True, exist_ok=True)

    reports: list[SiteMetrics] = []
    history: list[RoundSummary] = []
    trace: list[TraceRow] = []

    if config.protocol == "centralized":
        result, ctx = run_centralized(records, schema, model, fed_cfg, seed,
                                      descriptions)
        runs = [(ctx, result)]
        save_checkpoint(out_dir / "checkpoint.ckpt", result.state.shared,
                        result.state.heads, _checkpoint_meta(config, model, ctx, seed))
    else:
        partitions = partition_sites(records, config.num_sites, config.heterogeneity,
                                     seed, min_per_site=config.min_per_site)
        sites = make_sites(partitions, schema, seed)
        if config.protocol == "federated":
            ctx = setup_federation(sites, model, fed_cfg, descriptions)
            result = run_federation(ctx, seed)
            runs = [(ctx, result)]
            save_checkpoint(out_dir / "checkpoint.ckpt", result.state.shared,
                            result.state.heads,
                            _checkpoint_meta(config, model, ctx, seed))
        else:  # local: every site trains alone, nothing is shared or aggregated
            runs = []
            for site in sites:
                ctx_i = setup_federation([site], model, fed_cfg, descriptions)
                result_i = run_federation(ctx_i, seed)
                runs.append((ctx_i, result_i))
                save_checkpoint(out_dir / f"checkpoint_site{site.site_id}.ckpt",
                                result_i.state.shared, result_i.state.heads,
                                _checkpoint_meta(config, model, ctx_i, seed))

    for ctx, result in runs:
        reports.extend(evaluate_sites(ctx, result.state.shared, result.state.heads))
        history.extend(result.history)
        trace.extend(result.trace)

    write_history_csv(out_dir / "round_history.csv", history)
    write_trace_csv(out_dir / "loss_trace.csv", trace)
    write_metrics_files(out_dir, reports)
    if figures:
        from . import report

        fig_dir = out_dir / "figures"
        fig_dir.mkdir(exist_ok=True)
        if history:
            report.render_round_history(history, fig_dir / "round_history.png")
        if trace:
            report.render_loss_trace(trace, fig_dir / "loss_trace.png")
    return summarize_reports(reports)


_SUMMARY_FIELDS = ("rmse_f", "pehe", "ate_error_abs", "att_error")


def write_summary_csv(path: Path, per_seed: dict[int, dict[str, float | None]]) -> None:
    rows = []
    for seed in sorted(per_seed):
        summary = per_seed[seed]
        rows.append([str(seed)] + ["" if summary[f] is None else repr(summary[f])
                                   for f in _SUMMARY_FIELDS])
    for stat, fn in (("mean", np.mean), ("std", np.std)):
        row = [stat]
        for f in _SUMMARY_FIELDS:
            values = [s[f] for s in per_seed.values() if s[f] is not None]
            row.append(repr(float(fn(values))) if values else "")
        rows.append(row)
    _write_csv(path, ["seed"] + list(_SUMMARY_FIELDS), rows)


def cmd_train(args: argparse.Namespace) -> int:
    config = load_experiment_config(args.config)
    if args.protocol:
        config = replace(config, protocol=args.protocol)
    if args.out:
        config = replace(config, output_dir=args.out)
    seeds = _cli_seeds(args, config)
    descriptions = (load_descriptions(config.descriptions_path)
                    if config.descriptions_path else None)
    out_root = Path(config.output_dir)
    out_root.mkdir(parents=True, exist_ok=True)

    per_seed: dict[int, dict[str, float | None]] = {}
    failures: list[tuple[int, Exception]] = []
    for seed in seeds:
        try:
            per_seed[seed] = _train_one_seed(
                config, seed, out_root / f"seed_{seed}", descriptions,
                figures=not args.no_figures)
        except Exception as exc:  # noqa: BLE001 - reported per seed, run continues
            failures.append((seed, exc))
    if per_seed:
        write_summary_csv(out_root / "summary.csv", per_seed)
    for seed, exc in failures:
        print(f"seed {seed} failed: {exc}", file=sys.stderr)
    return EXIT_RUNTIME if failures else EXIT_OK


def _cli_seeds(args: argparse.Namespace, config: ExperimentConfig) -> list[int]:
    if getattr(args, "seeds", None):
        return list(args.seeds)
    if getattr(args, "seed", None) is not None:
        return [args.seed]
    return config.seeds


# ---------------------------------------------------------------------------
# generate

def cmd_generate(args: argparse.Namespace) -> int:
    config = load_experiment_config(args.config)
    if config.dgp is None:
        raise ConfigurationError("generate needs a dataset.synthetic section")
    seed = args.seed if args.seed is not None else (
        config.dgp_seed if config.dgp_seed is not None else config.seeds[0])
    records, schema = generate_synthetic(replace(config.dgp, seed=seed))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_dataset(out / "data.csv", records, schema)
    write_schema(out / "schema.csv", schema)
    print(f"wrote {len(records)} records to {out / 'data.csv'}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# zero-shot

def _build_sites(config: ExperimentConfig, records, schema, seed: int):
    if config.protocol == "centralized":
        return [pooled_site(records, schema, seed)]
    if config.protocol == "federated":
        partitions = partition_sites(records, config.num_sites, config.heterogeneity,
                                     seed, min_per_site=config.min_per_site)
        return make_sites(partitions, schema, seed)
    raise ConfigurationError("zero-shot supports the federated and centralized protocols")


def cmd_zero_shot(args: argparse.Namespace) -> int:
    config = load_experiment_config(args.config)
    if args.out:
        config = replace(config, output_dir=args.out)
    descriptions_path = args.descriptions or config.descriptions_path
    if not descriptions_path:
        raise ConfigurationError("zero-shot needs a treatment descriptions file")
    descriptions = load_descriptions(descriptions_path)
    seeds = _cli_seeds(args, config)
    out_root = Path(config.output_dir)
    out_root.mkdir(parents=True, exist_ok=True)

    by_seed_rows = []
    means: dict[int, tuple[float, float, float]] = {}
    for arm in args.held_out:
        sup, zs = [], []
        for seed in seeds:
            records, schema, k = resolve_dataset(config, seed)
            model = _resolved_model_config(config, k, descriptions)
            sites = _build_sites(config, records, schema, seed)
            rep = zero_shot_eval(sites, arm, descriptions, model,
                                 _fed_config(config, seed), seed)
            by_seed_rows.append([seed, arm, repr(rep.supervised_rmse),
                                 repr(rep.zero_shot_rmse), repr(rep.delta),
                                 rep.n_eval])
            sup.append(rep.supervised_rmse)
            zs.append(rep.zero_shot_rmse)
        mean_sup = float(np.mean(sup))
        mean_zs = float(np.mean(zs))
        means[arm] = (mean_sup, mean_zs, mean_zs - mean_sup)

    _write_csv(out_root / "zero_shot_by_seed.csv",
               ["seed", "held_out", "supervised", "zero_shot", "delta", "n_eval"],
               by_seed_rows)
    _write_csv(out_root / "zero_shot.csv",
               ["held_out", "supervised", "zero_shot", "delta"],
               [[arm, repr(v[0]), repr(v[1]), repr(v[2])]
                for arm, v in sorted(means.items())])
    if not args.no_figures:
        from . import report

        report.render_zero_shot({a: (v[0], v[1]) for a, v in means.items()},
                                out_root / "zero_shot.png")
    for arm, (mean_sup, mean_zs, delta) in sorted(means.items()):
        print(f"held-out {arm}: supervised {mean_sup:.4f}  "
              f"zero-shot {mean_zs:.4f}  delta {delta:+.4f}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# export-attention

def write_matrix_csv(path: Path, matrix: np.ndarray, row_labels: Sequence[str],
                     col_labels: Sequence[str]) -> None:
    rows = [[label] + [repr(float(v)) for v in row]
            for label, row in zip(row_labels, matrix)]
    _write_csv(path, [""] + list(col_labels), rows)


def cmd_export_attention(args: argparse.Namespace) -> int:
    shared, heads, meta = load_checkpoint(args.checkpoint)
    model = ModelConfig.from_dict(meta["model_config"])
    vocab = Vocabulary.from_dict(meta["vocab"])
    ckpt_schema = DatasetSchema.from_dict(meta["schema"])
    records, schema = load_dataset(args.data, args.schema,
                                   num_treatments=model.num_treatments)
    if schema != ckpt_schema:
        ours = set(schema.features)
        theirs = set(ckpt_schema.features)
        raise ConfigurationError(
            f"dataset schema diverges from the checkpoint's: "
            f"only in data {sorted(ours - theirs)}, only in checkpoint "
            f"{sorted(theirs - ours)}")
    site = (str(args.site) if args.site is not None
            else sorted(meta["standardizers"], key=int)[0])
    if site not in meta["standardizers"]:
        raise ConfigurationError(f"checkpoint has no site {site}; "
                                 f"choices: {sorted(meta['standardizers'])}")
    standardizer = Standardizer.from_dict(meta["standardizers"][site])
    descriptions = None
    if meta.get("uses_descriptions"):
        if not args.descriptions:
            raise ConfigurationError(
                "checkpoint was trained with treatment descriptions; pass --descriptions")
        descriptions = load_descriptions(args.descriptions)

    snapshot = attention_snapshot(records, schema, vocab, standardizer, shared,
                                  model, descriptions)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    layers, heads_n = snapshot.self_attention.shape[:2]
    for layer in range(layers):
        for h in range(heads_n):
            write_matrix_csv(out / f"self_l{layer}_h{h}.csv",
                             snapshot.self_attention[layer, h],
                             snapshot.labels, snapshot.labels)
    for arm, maps in snapshot.cross_attention.items():
        cross_layers = maps.shape[0]
        for layer in range(cross_layers):
            for h in range(maps.shape[1]):
                name = (f"cross_h{h}_t{arm}.csv" if cross_layers == 1
                        else f"cross_l{layer}_h{h}_t{arm}.csv")
                write_matrix_csv(out / name, maps[layer, h], ["treatment"],
                                 snapshot.labels)
    if not args.no_figures:
        from . import report

        report.render_attention_snapshot(snapshot, out / "figures")
    print(f"exported attention for {snapshot.n_records} records to {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fedite",
        description="Federated individual-treatment-effect estimation runner")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write synthetic dataset files")
    g.add_argument("--config", required=True)
    g.add_argument("--out", required=True, help="output directory")
    g.add_argument("--seed", type=int, default=None)
    g.set_defaults(fn=cmd_generate)

    t = sub.add_parser("train", help="run a training protocol over the seed list")
    t.add_argument("--config", required=True)
    t.add_argument("--seeds", type=int, nargs="+", default=None)
    t.add_argument("--seed", type=int, default=None)
    t.add_argument("--out", default=None)
    t.add_argument("--protocol", choices=PROTOCOLS, default=None)
    t.add_argument("--no-figures", action="store_true")
    t.set_defaults(fn=cmd_train)

    z = sub.add_parser("zero-shot", help="held-out treatment evaluation")
    z.add_argument("--config", required=True)
    z.add_argument("--held-out", type=int, nargs="+", required=True)
    z.add_argument("--descriptions", default=None)
    z.add_argument("--seeds", type=int, nargs="+", default=None)
    z.add_argument("--seed", type=int, default=None)
    z.add_argument("--out", default=None)
    z.add_argument("--no-figures", action="store_true")
    z.set_defaults(fn=cmd_zero_shot)

    e = sub.add_parser("export-attention", help="averaged attention matrices")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--schema", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--site", type=int, default=None)
    e.add_argument("--descriptions", default=None)
    e.add_argument("--no-figures", action="store_true")
    e.set_defaults(fn=cmd_export_attention)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except DivergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (DataError, ConfigurationError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
