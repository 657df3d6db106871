"""Command line entry point: ``metarf {run,sample,ablate,sweep,importance,synth}``.

Every command resolves its configuration (defaults, then ``--config``, then
``--set key=value`` items, then the dedicated flags), writes the resolved
configuration into the output directory (``config_<tag>.txt``, where the tag
names the mode, split seed and fine-tune count) and exits non-zero with the
failing stage named on stderr when anything goes wrong.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from contextlib import contextmanager
from dataclasses import replace
from pathlib import Path

import numpy as np

from metarf.config import ConfigError, RunConfig, apply_overrides, dump_config, load_config, to_dict
from metarf.data import DescriptorTable, load_descriptor_table, write_descriptor_table
from metarf.evaluation import IMPORTANCE_MODES, ablation_grid, finetune_sweep, permutation_importance
from metarf.head import save_checkpoint
from metarf.metrics import top_k_report
from metarf.pipeline import MODES, evaluate, fit_pipeline, predict_rows, resolve_seeds
from metarf.sampling import kennard_stone, select_representative, standardize_columns
from metarf.seeding import derive_seed, make_rng
from metarf.synth import SynthSpec, make_synthetic_table
from metarf.tsne import tsne_embed

log = logging.getLogger("metarf")


class StageError(RuntimeError):
    def __init__(self, stage: str, exc: BaseException):
        super().__init__(f"[{stage}] {type(exc).__name__}: {exc}")
        self.stage = stage


@contextmanager
def stage(name: str):
    log.info("stage: %s", name)
    try:
        yield
    except StageError:
        raise
    except Exception as exc:
        raise StageError(name, exc) from exc


# ---------------------------------------------------------------- output helpers


def _write_csv(path: Path, header: list[str], rows) -> Path:
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for r in rows:
            w.writerow([repr(v) if isinstance(v, float) else v for v in r])
    return path


def _write_json(path: Path, doc) -> Path:
    path.write_text(json.dumps(doc, indent=2, sort_keys=True, default=_json_default) + "\n", encoding="utf-8")
    return path


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (set, frozenset)):
        return sorted(o)
    raise TypeError(f"not JSON serialisable: {type(o).__name__}")


def _validate(paths: list[Path]) -> None:
    """Re-read every output: it must exist, be non-empty and parse."""
    for p in paths:
        if not p.is_file() or p.stat().st_size == 0:
            raise OSError(f"output {p} missing or empty")
        if p.suffix == ".json":
            json.loads(p.read_text(encoding="utf-8"))
        elif p.suffix == ".csv":
            with p.open(newline="", encoding="utf-8") as fh:
                rows = list(csv.reader(fh))
            width = len(rows[0])
            if any(len(r) != width for r in rows):
                raise OSError(f"output {p} has ragged rows")


def _tag(config: RunConfig, count: int | None = None) -> str:
    p = config.pipeline
    f = p.finetune_count if count is None else count
    return f"{p.mode}_split{p.split_seed}_F{f}"


def _metrics_dict(m) -> dict:
    return {"rmse": m.rmse, "r2": m.r2, "n": m.n}


# ---------------------------------------------------------------- config


def _resolve(args: argparse.Namespace) -> RunConfig:
    config = load_config(args.config) if args.config else RunConfig()
    items = []
    for item in args.set or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        items.append((k, v))
    config = apply_overrides(config, items)
    flags = {
        "data.path": args.data,
        "seed": args.seed,
        "out": args.out,
        "mode": args.mode,
        "finetune_count": args.finetune_count,
    }
    config = apply_overrides(config, {k: str(v) for k, v in flags.items() if v is not None})
    return replace(config, pipeline=resolve_seeds(config.pipeline))


def _prepare_out(config: RunConfig, name: str = "config.resolved.txt") -> tuple[Path, Path]:
    out = Path(config.out)
    out.mkdir(parents=True, exist_ok=True)
    echo = out / name
    echo.write_text(dump_config(config), encoding="utf-8")
    return out, echo


def _load_table(config: RunConfig) -> DescriptorTable:
    if not config.data.path:
        raise ConfigError("no dataset given (use --data or data.path)")
    return load_descriptor_table(config.data.path, config.data.schema())


# ---------------------------------------------------------------- commands


def cmd_run(args: argparse.Namespace, config: RunConfig) -> list[Path]:
    out, echo = _prepare_out(config, f"config_{_tag(config)}.txt")
    cfg = config.pipeline
    with stage("load"):
        table = _load_table(config)
    with stage("fit"):
        fitted = fit_pipeline(table, cfg)
    with stage("evaluate"):
        ev = evaluate(fitted)
    tag = _tag(config)
    written = [echo]
    with stage("write"):
        ids = table.row_ids
        rows = []
        train_pred = predict_rows(fitted, fitted.train_rows)
        for r, p in zip(fitted.train_rows, train_pred):
            rows.append((ids[r], table.groups[r], float(table.yields[r]), float(p), "train"))
        for g in sorted(ev.finetune_rows):
            for r, p in zip(ev.finetune_rows[g], ev.finetune_pred.get(g, [])):
                rows.append((ids[r], g, float(table.yields[r]), float(p), "finetune"))
        for r, g, role, t, p in zip(ev.rows, ev.groups, ev.roles, ev.y_true, ev.y_pred):
            rows.append((ids[r], g, float(t), float(p), role))
        written.append(_write_csv(out / f"predictions_{tag}.csv", ["row_id", "group", "y_true", "y_pred", "role"], rows))

        roles = sorted(set(ev.roles.tolist()))
        doc = {
            "mode": cfg.mode,
            "split_seed": cfg.split_seed,
            "finetune_count": cfg.finetune_count,
            "split": fitted.split.to_dict(),
            "n_train_rows": int(fitted.train_rows.size),
            "support_size": fitted.support_size,
            "metrics": {role: _metrics_dict(ev.metrics(role)) for role in roles},
            "unadapted_metrics": {role: _metrics_dict(ev.unadapted_metrics(role)) for role in roles},
            "groups": {
                role: {g: {"adapted": _metrics_dict(a), "unadapted": _metrics_dict(u)} for g, (a, u) in ev.group_metrics(role).items()}
                for role in roles
            },
            "meta_loss_history": list(fitted.meta_history),
            "config": to_dict(config),
        }
        test = np.flatnonzero(ev.roles == "test")
        if test.size:
            # candidates in row-id order so prediction ties go to the lowest id
            test = test[np.argsort(ids[ev.rows[test]], kind="stable")]
            k = min(args.top_k, test.size)
            rng = make_rng(derive_seed(cfg.seed, "topk"))
            rep = top_k_report(ev.y_pred[test], ev.y_true[test], k, rng, ids[ev.rows[test]])
            doc["top_k"] = rep.to_dict()
        written.append(_write_json(out / f"metrics_{tag}.json", doc))

        fitted.forest.save(out / f"forest_{tag}.json")
        written.append(out / f"forest_{tag}.json")
        if fitted.uses_head:
            mode = "raw-features" if cfg.mode == "maml-only" else "tree-outputs"
            save_checkpoint(out / f"head_{tag}.json", fitted.head, mode, fitted.x_scaler, fitted.y_scaler, cfg.meta)
            written.append(out / f"head_{tag}.json")

        sel = [(g, i, ids[r], int(r)) for g in sorted(ev.finetune_rows) for i, r in enumerate(ev.finetune_rows[g])]
        written.append(_write_csv(out / f"selection_{tag}.csv", ["group", "order", "row_id", "index"], sel))
        if cfg.sampling == "dimension-reduction" and cfg.finetune_count > 0:
            erows, coords = fitted.embedding()
            written.append(_write_embedding(out / f"embedding_{tag}.csv", ids[erows], coords))
    for role in sorted(set(ev.roles.tolist())):
        m = ev.metrics(role)
        print(f"{role}: RMSE {m.rmse:.4f}  R2 {m.r2:.4f}  (n={m.n})")
    return written


def _write_embedding(path: Path, ids, coords: np.ndarray) -> Path:
    header = ["row_id", *[f"z{j + 1}" for j in range(coords.shape[1])]]
    return _write_csv(path, header, ([i, *map(float, z)] for i, z in zip(ids, coords)))


def cmd_sample(args: argparse.Namespace, config: RunConfig) -> list[Path]:
    out, echo = _prepare_out(config)
    with stage("load"):
        table = _load_table(config)
        idx = np.arange(table.n_rows) if not args.group else table.rows_in(args.group)
        if idx.size == 0:
            raise ValueError(f"no rows in group(s) {args.group}")
    k = idx.size if args.k is None else args.k
    tsne = config.pipeline.tsne
    with stage("select"):
        X = table.features[idx]
        coords = None
        if args.raw or idx.size < 3:
            picked = select_representative(X, k, tsne, embed=False)
        else:
            coords = tsne_embed(standardize_columns(X), tsne).coords
            picked = kennard_stone(coords, k)
    written = [echo]
    with stage("write"):
        ids = table.row_ids
        rows = [(i, ids[idx[p]], int(idx[p]), table.groups[idx[p]]) for i, p in enumerate(picked)]
        written.append(_write_csv(out / f"selection_k{k}.csv", ["order", "row_id", "index", "group"], rows))
        if coords is not None:
            written.append(_write_embedding(out / "embedding.csv", ids[idx], coords))
    print(f"selected {k} of {idx.size} rows")
    return written


def cmd_ablate(args: argparse.Namespace, config: RunConfig) -> list[Path]:
    tag = f"split{config.pipeline.split_seed}_F{config.pipeline.finetune_count}"
    out, echo = _prepare_out(config, f"config_ablation_{tag}.txt")
    with stage("load"):
        table = _load_table(config)
    with stage("ablate"):
        rows = ablation_grid(table, config.pipeline, repeats=args.repeats)
    written = [echo]
    with stage("write"):
        header = ["label", "mode", "sampling", "rmse", "r2", "rmse_std", "r2_std", "repeats"]
        written.append(_write_csv(out / f"ablation_{tag}.csv", header, ([getattr(r, h) for h in header] for r in rows)))
        written.append(_write_json(out / f"ablation_{tag}.json", {"rows": [r.to_dict() for r in rows], "config": to_dict(config)}))
    for r in rows:
        print(f"{r.label:<42} RMSE {r.rmse:8.4f}  R2 {r.r2:7.4f}")
    return written


def cmd_sweep(args: argparse.Namespace, config: RunConfig) -> list[Path]:
    with stage("config"):
        counts = [int(c) for c in args.counts.split(",") if c.strip()]
    tag = f"{config.pipeline.mode}_split{config.pipeline.split_seed}_F{'-'.join(map(str, counts))}"
    out, echo = _prepare_out(config, f"config_sweep_{tag}.txt")
    with stage("load"):
        table = _load_table(config)
    with stage("sweep"):
        rows = finetune_sweep(table, config.pipeline, counts, reference_mode=args.reference)
    written = [echo]
    with stage("write"):
        dicts = [r.to_dict() for r in rows]
        header = list(dicts[0]) if dicts else ["count"]
        written.append(_write_csv(out / f"sweep_{tag}.csv", header, ([d[h] for h in header] for d in dicts)))
        written.append(_write_json(out / f"sweep_{tag}.json", {"rows": dicts, "reference": args.reference, "config": to_dict(config)}))
    for r in rows:
        print(
            f"F={r.count:<3} RMSE {r.method.rmse:.4f} vs {r.reference.rmse:.4f} ({100 * r.rmse_margin:+.2f}%)  "
            f"R2 {r.method.r2:.4f} vs {r.reference.r2:.4f} ({100 * r.r2_margin:+.2f}%)"
        )
    return written


def _parse_groups(items: list[str] | None) -> dict[str, list[str]] | None:
    if not items:
        return None
    out = {}
    for item in items:
        if "=" not in item:
            raise ConfigError(f"--feature-group expects NAME=col1,col2, got {item!r}")
        name, cols = item.split("=", 1)
        out[name.strip()] = [c.strip() for c in cols.split(",") if c.strip()]
    return out


def cmd_importance(args: argparse.Namespace, config: RunConfig) -> list[Path]:
    tag = f"{_tag(config)}_{args.importance_mode}"
    out, echo = _prepare_out(config, f"config_importance_{tag}.txt")
    with stage("load"):
        table = _load_table(config)
    with stage("fit"):
        fitted = fit_pipeline(table, config.pipeline)
    with stage("importance"):
        features = [f.strip() for f in args.features.split(",")] if args.features else None
        rep = permutation_importance(
            fitted,
            args.importance_mode,
            derive_seed(config.pipeline.seed, "importance"),
            features=features,
            groups=_parse_groups(args.feature_group),
            repeats=args.repeats,
        )
    written = [echo]
    with stage("write"):
        written.append(_write_csv(out / f"importance_{tag}.csv", ["rank", "name", "score"], ((i + 1, n, s) for i, (n, s) in enumerate(rep.ranking()))))
        written.append(_write_json(out / f"importance_{tag}.json", {**rep.to_dict(), "config": to_dict(config)}))
    for n, s in rep.ranking()[:10]:
        print(f"{n:<24} {s:+.5f}")
    return written


def cmd_synth(args: argparse.Namespace, config: RunConfig) -> list[Path]:
    out, echo = _prepare_out(config)
    with stage("generate"):
        spec = SynthSpec(
            n_groups=args.n_groups,
            rows_per_group=args.rows_per_group,
            n_features=args.n_features,
            group_effect=args.group_effect,
            noise=args.noise,
            levels=tuple(int(v) for v in args.levels.split(",") if v.strip()),
        )
        table, effects = make_synthetic_table(spec, config.pipeline.seed)
    written = [echo]
    with stage("write"):
        path = out / args.name
        write_descriptor_table(table, path)
        written.append(path)
        eff = [(g, a, b) for g, (a, b) in sorted(effects.items())]
        written.append(_write_csv(out / "group_effects.csv", ["group", "slope", "offset"], eff))
    print(f"wrote {table.n_rows} rows, {len(table.group_keys)} groups, p={table.n_features} to {path}")
    return written


# ---------------------------------------------------------------- parser


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat key = value config file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one dotted config key (repeatable)")
    p.add_argument("--data", help="descriptor CSV (overrides data.path)")
    p.add_argument("--seed", type=int, help="top-level seed; component seeds derive from it")
    p.add_argument("--out", help="output directory")
    p.add_argument("--mode", choices=MODES)
    p.add_argument("--finetune-count", type=int, help="fine-tune rows per evaluated group (F)")
    p.add_argument("-v", "--verbose", action="count", default=0)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="metarf", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="fit, fine-tune and evaluate one configuration")
    _common(p)
    p.add_argument("--top-k", type=int, default=10, help="size of the high-yield selection report")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("sample", help="order rows by representative (Kennard-Stone) selection")
    _common(p)
    p.add_argument("-k", type=int, help="number of rows to select (default: all)")
    p.add_argument("--group", action="append", help="restrict to these groups (repeatable)")
    p.add_argument("--raw", action="store_true", help="Kennard-Stone in the standardised feature space, no t-SNE")
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("ablate", help="seven-row ablation table")
    _common(p)
    p.add_argument("--repeats", type=int, default=10, help="repeats of each random-sampling cell")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("sweep", help="method against a reference over fine-tune counts")
    _common(p)
    p.add_argument("--counts", default="2,4,6,8,10")
    p.add_argument("--reference", choices=MODES, default="baseline")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("importance", help="permutation feature importance")
    _common(p)
    p.add_argument("--importance-mode", choices=IMPORTANCE_MODES, default="retrain")
    p.add_argument("--features", help="comma-separated subset of feature names")
    p.add_argument("--feature-group", action="append", metavar="NAME=COL1,COL2", help="shuffle columns together")
    p.add_argument("--repeats", type=int, default=1)
    p.set_defaults(func=cmd_importance)

    p = sub.add_parser("synth", help="write a synthetic grouped descriptor table")
    _common(p)
    d = SynthSpec()
    p.add_argument("--n-groups", type=int, default=d.n_groups)
    p.add_argument("--rows-per-group", type=int, default=d.rows_per_group)
    p.add_argument("--n-features", type=int, default=d.n_features)
    p.add_argument("--group-effect", type=float, default=d.group_effect)
    p.add_argument("--noise", type=float, default=d.noise)
    p.add_argument(
        "--levels",
        default=",".join(map(str, d.levels)),
        help="descriptor vectors per component, e.g. 15,4,3 (empty: continuous features)",
    )
    p.add_argument("--name", default="synth.csv", help="file name inside --out")
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.WARNING - 10 * min(args.verbose, 2),
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        with stage("config"):
            config = _resolve(args)
        written = args.func(args, config)
        with stage("validate"):
            _validate(written)
    except StageError as exc:
        print(f"metarf {args.command}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
