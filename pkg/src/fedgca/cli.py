"""Command line entry point: ``fedgca run|ablate|compare|eval|export-cams|augment-preview``.

Dataset references (``source_domain`` / ``target_domains``):

    mnist, mnist-test         IDX files under $FEDGCA_DATA_DIR/mnist
    idx:IMAGES:LABELS         explicit IDX (optionally .gz) file pair
    dir:ROOT                  ROOT/labels.csv + PNG images
    sklearn-digits            scikit-learn's bundled 8x8 digits
    colorshift:SEED:REF       synthetic colour-shifted copy of a grayscale REF

Any reference may end in ``[start:stop]`` to take a contiguous subset.
Relative paths that do not exist are retried under $FEDGCA_DATA_DIR.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import json
import logging
import re
import statistics
import sys
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from fedgca import __version__
from fedgca import classifier as clf
from fedgca.config import (
    ABLATION_GRID, AblationSpec, ConfigError, ExperimentConfig, PRESETS, build_config, config_keys, parse_config,
)
from fedgca.dataset_store import (
    DatasetError, LabeledDataset, conform, content_hash, data_dir, load_directory_dataset, load_idx_dataset,
    partition_dirichlet, sklearn_digits, synth_colorshift_domain,
)
from fedgca.evaluation import (
    evaluate, export_cams, make_evaluator, run_ablation, write_results_csv, write_summary_csv,
)
from fedgca.federation import FederationError, run_federation
from fedgca.style_complement import style_complement

log = logging.getLogger("fedgca")

_SUBSET = re.compile(r"^(.*)\[(\d*):(\d*)\]$")

MNIST_FILES = {
    "mnist": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "mnist-test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


def _resolve_path(raw: str) -> Path:
    p = Path(raw)
    if p.exists():
        return p
    alt = data_dir() / raw
    if not p.is_absolute() and alt.exists():
        return alt
    for suffix in (".gz",):
        if Path(raw + suffix).exists():
            return Path(raw + suffix)
        if (data_dir() / (raw + suffix)).exists():
            return data_dir() / (raw + suffix)
    raise DatasetError(f"{raw}: no such file or directory (also tried under {data_dir()})")


def _load_raw(ref: str, shape, class_count: int) -> LabeledDataset:
    m = _SUBSET.match(ref)
    if m:
        base = _load_raw(m.group(1), shape, class_count)
        start = int(m.group(2)) if m.group(2) else 0
        stop = int(m.group(3)) if m.group(3) else len(base)
        if stop > len(base) or start >= stop:
            raise DatasetError(f"{ref}: subset [{start}:{stop}] out of range for {len(base)} samples")
        return base.subset(np.arange(start, stop))
    if ref in MNIST_FILES:
        img, lab = MNIST_FILES[ref]
        root = data_dir() / "mnist"
        return load_idx_dataset(_resolve_path(str(root / img)), _resolve_path(str(root / lab)), "mnist", class_count)
    if ref == "sklearn-digits":
        return sklearn_digits()
    kind, _, rest = ref.partition(":")
    if kind == "idx":
        images, _, labels = rest.partition(":")
        if not images or not labels:
            raise DatasetError(f"{ref}: expected idx:IMAGES:LABELS")
        path = _resolve_path(images)
        # the containing directory names the domain better than "train-images-..."
        tag = path.parent.name or path.name.split("-")[0]
        return load_idx_dataset(path, _resolve_path(labels), tag, class_count)
    if kind == "dir":
        root = _resolve_path(rest)
        return load_directory_dataset(root, root.name, shape, class_count)
    if kind == "colorshift":
        seed, _, base_ref = rest.partition(":")
        if not seed.isdigit() or not base_ref:
            raise DatasetError(f"{ref}: expected colorshift:SEED:REF")
        return synth_colorshift_domain(_load_raw(base_ref, shape, class_count), int(seed))
    raise DatasetError(f"{ref}: unknown dataset reference")


def load_ref(ref: str, shape, class_count: int = 10) -> LabeledDataset:
    """Load a dataset reference and conform it to the experiment's image shape."""
    return conform(_load_raw(ref, shape, class_count), shape)


def load_domains(cfg: ExperimentConfig) -> tuple[LabeledDataset, list[LabeledDataset]]:
    shape = cfg.input_shape
    source = load_ref(cfg.source_domain, shape, cfg.class_count)
    targets = [load_ref(r, shape, cfg.class_count) for r in cfg.target_domains]
    seen: dict[str, int] = {}
    for i, t in enumerate(targets):
        # keep domain tags unique so per-domain results never collide
        n = seen.get(t.domain_tag, 0)
        seen[t.domain_tag] = n + 1
        if n:
            targets[i] = LabeledDataset(t.images, t.labels, f"{t.domain_tag}#{n}", t.class_count)
    return source, targets


# --------------------------------------------------------------------- config


def config_from_args(args) -> ExperimentConfig:
    """Config file, then per-key flags, then ``--set`` overrides."""
    flags = [f"{key}={getattr(args, f'cfg_{key}')}" for key in config_keys() if getattr(args, f"cfg_{key}", None) is not None]
    return parse_config(args.config, flags + list(args.set))


def default_run_id(cfg: ExperimentConfig, label: str | None = None) -> str:
    digest = hashlib.sha1(cfg.dumps().encode()).hexdigest()[:8]
    return f"{label or cfg.preset}-s{cfg.master_seed}-{digest}"


def prepare_run_dir(args, cfg: ExperimentConfig, label: str | None = None) -> tuple[Path, ExperimentConfig]:
    run_id = cfg.run_id or default_run_id(cfg, label)
    if run_id != cfg.run_id:
        cfg = dataclasses.replace(cfg, run_id=run_id)
    run_dir = Path(args.runs_dir) / run_id
    run_dir.mkdir(parents=True, exist_ok=True)
    cfg.save(run_dir / "config.json")
    return run_dir, cfg


def write_manifest(run_dir: Path, cfg: ExperimentConfig, source: LabeledDataset, targets) -> None:
    plan = partition_dirichlet(source, cfg.K, cfg.dirichlet_concentration, cfg.master_seed)
    (run_dir / "partition.json").write_text(plan.to_json())
    doc = {
        "fedgca_version": __version__,
        "torch_version": torch.__version__,
        "numpy_version": np.__version__,
        "master_seed": cfg.master_seed,
        "inputs": {
            cfg.source_domain: {"tag": source.domain_tag, "count": len(source), "sha1": content_hash(source)},
            **{
                ref: {"tag": t.domain_tag, "count": len(t), "sha1": content_hash(t)}
                for ref, t in zip(cfg.target_domains, targets)
            },
        },
        "partition_sizes": plan.sizes,
    }
    (run_dir / "manifest.json").write_text(json.dumps(doc, indent=2))


# ------------------------------------------------------------------ commands


def _train(cfg: ExperimentConfig, run_dir: Path, source, targets):
    history_path = run_dir / "history.ndjson"
    history_path.unlink(missing_ok=True)
    params, history = run_federation(
        cfg, source, evaluator=make_evaluator(cfg.classifier_spec, targets),
        history_path=history_path, checkpoint_dir=run_dir / "checkpoints",
    )
    write_results_csv(run_dir / "results.csv", cfg.run_id, history)
    final = history[-1].per_domain_accuracy if history else evaluate(cfg.classifier_spec, params, targets)
    return params, history, final


def cmd_run(args) -> int:
    cfg = config_from_args(args)
    source, targets = load_domains(cfg)
    run_dir, cfg = prepare_run_dir(args, cfg)
    write_manifest(run_dir, cfg, source, targets)
    params, history, final = _train(cfg, run_dir, source, targets)
    domains = [t.domain_tag for t in targets]
    write_summary_csv(run_dir / "summary.csv", [(cfg.preset, final)], domains)
    if not history:
        clf.save_checkpoint(_ckpt_dir(run_dir) / "round_0000.json", cfg.classifier_spec, params, round=0)
    print(json.dumps({"run_dir": str(run_dir), "rounds": len(history), "accuracy": final}))
    return 0


def _ckpt_dir(run_dir: Path) -> Path:
    d = run_dir / "checkpoints"
    d.mkdir(parents=True, exist_ok=True)
    return d


def _parse_seeds(raw: str | None, cfg: ExperimentConfig) -> list[int]:
    if not raw:
        return [cfg.master_seed]
    return [int(s) for s in raw.split(",") if s.strip()]


def _mean_rows(per_seed: dict[str, list[dict[str, float]]], domains):
    rows, std_rows = [], []
    for name, accs in per_seed.items():
        rows.append((name, {d: statistics.fmean(a[d] for a in accs) for d in domains}))
        std_rows.append((name, {d: statistics.pstdev([a[d] for a in accs]) for d in domains}))
    return rows, std_rows


def _write_seed_table(path: Path, per_seed: dict[str, list[dict[str, float]]], seeds, domains) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["method", "seed", *domains, "Avg"])
        for name, accs in per_seed.items():
            for seed, acc in zip(seeds, accs):
                vals = [100 * acc[d] for d in domains]
                writer.writerow([name, seed, *(f"{v:.2f}" for v in vals), f"{statistics.fmean(vals):.2f}"])


def cmd_ablate(args) -> int:
    base = config_from_args(args)
    grid = [AblationSpec.from_flags(f) for f in args.grid.split(",")] if args.grid else ABLATION_GRID
    source, targets = load_domains(base)
    run_dir, base = prepare_run_dir(args, base, label="ablate")
    domains = [t.domain_tag for t in targets]
    seeds = _parse_seeds(args.seeds, base)
    per_seed: dict[str, list[dict[str, float]]] = {}
    for seed in seeds:
        cfg = dataclasses.replace(base, master_seed=seed)
        for row in run_ablation(cfg, grid, source, targets):
            per_seed.setdefault(row.spec.label, []).append(row.accuracy)
            with open(run_dir / "history.ndjson", "a") as fh:
                for rec in row.history:
                    fh.write(json.dumps({"ablation": row.spec.label, "seed": seed, **json.loads(rec.to_json())}) + "\n")
    rows, std_rows = _mean_rows(per_seed, domains)
    write_summary_csv(run_dir / "summary.csv", rows, domains)
    if len(seeds) > 1:
        write_summary_csv(run_dir / "summary_std.csv", std_rows, domains)
        _write_seed_table(run_dir / "summary_seeds.csv", per_seed, seeds, domains)
    print(json.dumps({"run_dir": str(run_dir), "rows": {n: a for n, a in rows}}))
    return 0


def cmd_compare(args) -> int:
    """Run several presets on identical data and seeds (the method-comparison table)."""
    base = config_from_args(args)
    presets = args.presets.split(",")
    source, targets = load_domains(base)
    run_dir, base = prepare_run_dir(args, base, label="compare")
    domains = [t.domain_tag for t in targets]
    seeds = _parse_seeds(args.seeds, base)
    per_seed: dict[str, list[dict[str, float]]] = {}
    for name in presets:
        if name not in PRESETS:
            raise ConfigError(f"presets: unknown preset {name!r}")
        for seed in seeds:
            values = {k: v for k, v in base.to_dict().items() if k not in ("preset", "alpha", "beta", "J", "run_id")}
            values.update(preset=name, master_seed=seed)
            cfg = build_config(values)
            sub = run_dir / f"{name}-s{seed}"
            sub.mkdir(exist_ok=True)
            cfg = dataclasses.replace(cfg, run_id=f"{base.run_id}/{name}-s{seed}")
            cfg.save(sub / "config.json")
            _, _, final = _train(cfg, sub, source, targets)
            per_seed.setdefault(name, []).append(final)
            log.info("%s seed %d: %s", name, seed, final)
    rows, std_rows = _mean_rows(per_seed, domains)
    write_summary_csv(run_dir / "summary.csv", rows, domains)
    write_summary_csv(run_dir / "summary_std.csv", std_rows, domains)
    _write_seed_table(run_dir / "summary_seeds.csv", per_seed, seeds, domains)
    print(json.dumps({"run_dir": str(run_dir), "rows": {n: a for n, a in rows}}))
    return 0


def _load_params(path, cfg: ExperimentConfig):
    spec, params, _ = clf.load_checkpoint(_resolve_path(path))
    if spec != cfg.classifier_spec:
        log.info("using classifier spec from checkpoint: %s", spec)
    return spec, params


def cmd_eval(args) -> int:
    cfg = config_from_args(args)
    spec, params = _load_params(args.checkpoint, cfg)
    targets = [load_ref(r, spec.input_shape, spec.class_count) for r in cfg.target_domains]
    acc = evaluate(spec, params, targets)
    run_dir, cfg = prepare_run_dir(args, cfg, label="eval")
    write_summary_csv(run_dir / "summary.csv", [(Path(args.checkpoint).stem, acc)], list(acc))
    print(json.dumps({"run_dir": str(run_dir), "accuracy": acc}))
    return 0


def cmd_export_cams(args) -> int:
    cfg = config_from_args(args)
    spec, params = _load_params(args.checkpoint, cfg)
    ref = args.samples or cfg.target_domains[0]
    ds = load_ref(ref, spec.input_shape, spec.class_count)
    run_dir, cfg = prepare_run_dir(args, cfg, label="cams")
    paths = export_cams(spec, params, ds.images[: args.n], run_dir / "cams")
    print(json.dumps({"run_dir": str(run_dir), "files": [str(p) for p in paths]}))
    return 0


def cmd_augment_preview(args) -> int:
    """Contact sheet: one row per sample, columns are the J+1 views."""
    cfg = config_from_args(args)
    ref = args.samples or cfg.source_domain
    ds = load_ref(ref, cfg.input_shape, cfg.class_count)
    n = min(args.n, len(ds))
    aug = style_complement(ds.images[:n], ds.labels[:n], cfg.augment, cfg.master_seed)
    grid = np.stack(aug.views, axis=1)  # (n, V, C, H, W)
    if grid.shape[2] == 1:
        grid = np.repeat(grid, 3, axis=2)
    n, V, _, H, W = grid.shape
    sheet = grid[:, :, :3].transpose(0, 3, 1, 4, 2).reshape(n * H, V * W, 3)
    out = Path(args.out) if args.out else prepare_run_dir(args, cfg, label="augment")[0] / "augment.png"
    out.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.clip(np.rint(sheet * 255), 0, 255).astype(np.uint8)).save(out)
    print(json.dumps({"file": str(out), "views": V, "samples": n}))
    return 0


# --------------------------------------------------------------------- parser


def _add_config_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat JSON config file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="config override (repeatable)")
    p.add_argument("--runs-dir", default="runs", help="root directory for run outputs (default: runs)")
    g = p.add_argument_group("config keys")
    for key in config_keys():
        g.add_argument(f"--{key}", dest=f"cfg_{key}", metavar="VALUE")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fedgca", description="Single-source federated domain generalization simulator.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="train one configuration")
    _add_config_args(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("ablate", help="sweep consistency-loss ablations (default: the 5-row grid)")
    _add_config_args(p)
    p.add_argument("--grid", help="comma-separated 4-char flag strings for P,PG,M,MG, e.g. 1000,1111")
    p.add_argument("--seeds", help="comma-separated master seeds")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("compare", help="run several presets on identical data and seeds")
    _add_config_args(p)
    p.add_argument("--presets", default="fedavg,fedavg_rc,fedgca")
    p.add_argument("--seeds", help="comma-separated master seeds")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("eval", help="evaluate a checkpoint on the target domains")
    _add_config_args(p)
    p.add_argument("--checkpoint", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("export-cams", help="write CAM overlays for sample images")
    _add_config_args(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--samples", help="dataset reference to draw samples from (default: first target)")
    p.add_argument("--n", type=int, default=8)
    p.set_defaults(func=cmd_export_cams)

    p = sub.add_parser("augment-preview", help="write a contact sheet of the J+1 augmented views")
    _add_config_args(p)
    p.add_argument("--samples", help="dataset reference (default: source domain)")
    p.add_argument("--n", type=int, default=8)
    p.add_argument("--out", help="output PNG path")
    p.set_defaults(func=cmd_augment_preview)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING, format="%(asctime)s %(name)s %(message)s"
    )
    try:
        return args.func(args)
    except (ConfigError, DatasetError, FederationError, ValueError, OSError) as exc:
        print(f"fedgca {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
