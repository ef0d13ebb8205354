"""Command line surface: pretrain | validate | deploy | report.

Phases are strictly ordered and communicate only through files in the run
directory, so each one can be rerun or audited in isolation:

    checkpoints/*.ckpt        pretrain output
    validation/report.json    grid results, winners (checksummed), model pick
    deploy/report.json        improvement-over-baseline statistics
"""

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from . import config as C
from . import model as M
from . import pretrain as P
from . import protocol as PR
from . import reports as R
from . import strategies as S
from . import world as W
from .seeding import rng_for

VARIANT_ORDER = ("erm", "dr2", "dr3", "dr4")


class PhaseError(RuntimeError):
    pass


def build_parser():
    parser = argparse.ArgumentParser(
        prog="oasis",
        description="online adaptation engine: pretrain, validate, deploy, report")
    parser.add_argument("--version", action="version", version=f"oasis {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, summary in (
        ("pretrain", "train the source checkpoints (plain + domain randomized)"),
        ("validate", "run the strategy grid on validation episodes"),
        ("deploy", "run validated winners once on held-out episodes"),
        ("report", "regenerate tables and curves from stored records"),
    ):
        sp = sub.add_parser(name, help=summary)
        sp.add_argument("--config", type=Path, help="JSON run configuration")
        sp.add_argument("--jobs", type=int, help="worker processes (default from config)")
        sp.add_argument("--seed", type=int, help="override the global seed")
        sp.add_argument("--out", type=Path, help="override the output directory")
        sp.add_argument("--set", action="append", default=[], dest="overrides",
                        metavar="KEY.PATH=VALUE", help="override one config key")
    return parser


def _resolve(args):
    cfg = C.load_config(args.config) if args.config else C.resolve_config()
    overrides = list(args.overrides)
    if args.jobs is not None:
        overrides.append(f"jobs={args.jobs}")
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    if args.out is not None:
        overrides.append(f"out_dir={json.dumps(str(args.out))}")
    cfg, log = C.apply_overrides(cfg, overrides)
    for line in log:
        print(line)
    return cfg


def _out_dir(cfg, sub=None):
    path = Path(cfg["out_dir"])
    if sub:
        path = path / sub
    path.mkdir(parents=True, exist_ok=True)
    return path


def _dtype(cfg):
    return np.float32 if cfg["precision"] == "float32" else np.float64


def _variants(cfg):
    return [("erm", 0)] + [(f"dr{k}", int(k)) for k in cfg["pretrain"]["dr_levels"]]


def _write_manifests(cfg, benchmark):
    mdir = _out_dir(cfg, "manifests")
    for ep in benchmark.val_episodes + benchmark.deploy_episodes:
        R.write_json(mdir / f"{ep.episode_id}.json", W.episode_manifest(ep))


# ---------------------------------------------------------------------------
# pretrain
# ---------------------------------------------------------------------------

def cmd_pretrain(cfg):
    out = _out_dir(cfg)
    C.save_config(cfg, out / "config.resolved.json")
    cfg_hash = C.config_hash(cfg)
    benchmark = W.make_benchmark(C.world_config(cfg), cfg["seed"])
    _write_manifests(cfg, benchmark)

    if cfg["precision"] == "float32":
        for frame in benchmark.train_set:
            frame.image = frame.image.astype(np.float32)

    ckpt_dir = _out_dir(cfg, "checkpoints")
    log_rows = []
    for name, level in _variants(cfg):
        t0 = time.perf_counter()
        model, losses = P.pretrain_variant(name, benchmark.train_set,
                                           C.pretrain_config(cfg, level),
                                           seed=cfg["seed"], classes=cfg["world"]["classes"],
                                           dtype=_dtype(cfg))
        M.save_checkpoint(model, ckpt_dir / f"{name}.ckpt",
                          extra_meta={"variant": name, "dr_level": level,
                                      "config": cfg_hash, "seed": cfg["seed"]})
        for epoch, loss in enumerate(losses):
            log_rows.append((name, epoch, loss))
        final = f"final loss {losses[-1]:.4f}" if losses else "no training epochs"
        print(f"pretrain {name}: {final} ({time.perf_counter() - t0:.0f}s)")

    with open(out / "pretrain_log.csv", "w", encoding="utf-8", newline="\n") as fh:
        fh.write(R.provenance_line(cfg_hash, cfg["seed"]) + "\n")
        fh.write("variant,epoch,mean_loss\n")
        for name, epoch, loss in log_rows:
            fh.write(f"{name},{epoch},{loss:.10f}\n")
    return 0


def _load_checkpoints(cfg):
    ckpt_dir = Path(cfg["out_dir"]) / "checkpoints"
    candidates = []
    for name, _ in _variants(cfg):
        path = ckpt_dir / f"{name}.ckpt"
        if not path.exists():
            raise PhaseError(f"missing checkpoint {path}; run `oasis pretrain` first")
        model, _ = M.load_checkpoint(path)
        candidates.append((name, model))
    return candidates


# ---------------------------------------------------------------------------
# validate
# ---------------------------------------------------------------------------

def cmd_validate(cfg):
    out = _out_dir(cfg, "validation")
    cfg_hash = C.config_hash(cfg)
    benchmark = W.make_benchmark(C.world_config(cfg), cfg["seed"])
    candidates = _load_checkpoints(cfg)
    episodes = [W.MaterializedEpisode(ep) for ep in benchmark.val_episodes]

    # stage 1: pick the pre-training by NA performance on the val episodes
    na_grid = [C.strategy_base(cfg, "NA")]
    stage1, rec1 = PR.validate(na_grid, episodes, candidates, cfg["seed"])
    selected = stage1.selected_model
    print(f"selected pre-training: {selected} "
          f"(ranking: {', '.join(f'{m}={v:.4f}' for m, v in stage1.model_ranking)})")

    # stage 2: the full strategy grid on the selected checkpoint only
    theta0 = dict(candidates)[selected]
    memory = S.SourceMemory(benchmark.source_memory, feature_model=theta0)
    grid = [g for g in C.strategy_grid(cfg) if g.kind != "NA"]
    stage2, rec2 = PR.validate(grid, episodes, [(selected, theta0)], cfg["seed"],
                               source_memories={selected: memory}, jobs=cfg["jobs"])

    report = PR.ValidationReport(
        results=stage1.results + stage2.results,
        winners={**stage2.winners,
                 "NA": next(r for r in stage1.results if r.model_id == selected)},
        model_ranking=stage1.model_ranking,
        selected_model=selected,
    )
    records = rec1 + rec2

    doc = R.validation_report_doc(report, cfg_hash, cfg["seed"])
    doc["strategies_section_hash"] = C.config_hash(cfg["strategies"])
    R.write_json(out / "report.json", doc)
    with open(out / "report.txt", "w", encoding="utf-8", newline="\n") as fh:
        fh.write(R.render_validation_table(report, cfg_hash, cfg["seed"]))
    R.write_records_csv(out / "records.csv", records, cfg_hash, cfg["seed"])
    R.write_timing_csv(out / "timing.csv", records, cfg_hash, cfg["seed"])
    for kind, res in sorted(report.winners.items()):
        print(f"winner {kind}: {res.config.config_id} mIoU {res.mean_miou:.4f}")
    return 0


# ---------------------------------------------------------------------------
# deploy
# ---------------------------------------------------------------------------

def cmd_deploy(cfg):
    out = _out_dir(cfg, "deploy")
    cfg_hash = C.config_hash(cfg)
    val_doc_path = Path(cfg["out_dir"]) / "validation" / "report.json"
    if not val_doc_path.exists():
        raise PhaseError(f"missing {val_doc_path}; run `oasis validate` first")
    doc = R.read_json(val_doc_path)
    winners, selected = R.load_validation_winners(doc)
    if doc.get("strategies_section_hash") != C.config_hash(cfg["strategies"]):
        raise PhaseError("deploy refused: strategy configuration differs from the one "
                         "used at validation (hand-tuning after validation is not allowed)")

    benchmark = W.make_benchmark(C.world_config(cfg), cfg["seed"])
    theta0 = dict(_load_checkpoints(cfg))[selected]
    memory = S.SourceMemory(benchmark.source_memory, feature_model=theta0)
    episodes = [W.MaterializedEpisode(ep) for ep in benchmark.deploy_episodes]

    result, records, _ = PR.deploy(winners, episodes, theta0, cfg["seed"],
                                   source=memory, expected_configs=winners,
                                   jobs=cfg["jobs"])
    result["_provenance"] = R.provenance_line(cfg_hash, cfg["seed"], prefix="")
    result["selected_model"] = selected
    R.write_json(out / "report.json", result)
    R.write_records_csv(out / "records.csv", records, cfg_hash, cfg["seed"])
    R.write_timing_csv(out / "timing.csv", records, cfg_hash, cfg["seed"])
    _render_deploy_artifacts(cfg, out)
    for kind in sorted(result["rows"]):
        row = result["rows"][kind]
        print(f"{kind}: {row['mean_improvement'] * 100:+.1f}% ± {row['std_improvement'] * 100:.1f}")
    return 0


def _render_deploy_artifacts(cfg, out):
    """Tables and curves are derived from the stored files only, so `report`
    regenerates byte-identical artifacts later."""
    cfg_hash = C.config_hash(cfg)
    result = R.read_json(out / "report.json")
    records = R.read_records_csv(out / "records.csv")
    with open(out / "table.txt", "w", encoding="utf-8", newline="\n") as fh:
        fh.write(R.render_deploy_table(result, cfg_hash, cfg["seed"]))
    for episode_id in sorted({r.episode_id for r in records}):
        R.write_episode_curves(out / f"curves-{episode_id}.svg", records,
                               episode_id, cfg_hash, cfg["seed"])


def cmd_report(cfg):
    out = Path(cfg["out_dir"])
    regenerated = False
    if (out / "deploy" / "records.csv").exists():
        _render_deploy_artifacts(cfg, out / "deploy")
        regenerated = True
    val_path = out / "validation" / "report.json"
    if val_path.exists():
        doc = R.read_json(val_path)
        # re-render the validation table from the stored document
        lines = [R.provenance_line(C.config_hash(cfg), cfg["seed"])]
        lines.append("")
        lines.append("pre-training selection (mean NA mIoU on validation episodes)")
        for model_id, mean in doc["model_ranking"]:
            marker = " <- selected" if model_id == doc["selected_model"] else ""
            lines.append(f"  {model_id:<10} {mean:.4f}{marker}")
        with open(out / "validation" / "ranking.txt", "w", encoding="utf-8", newline="\n") as fh:
            fh.write("\n".join(lines) + "\n")
        regenerated = True
    if not regenerated:
        raise PhaseError(f"no stored records found under {out}")
    print(f"regenerated artifacts under {out}")
    return 0


# ---------------------------------------------------------------------------

COMMANDS = {
    "pretrain": cmd_pretrain,
    "validate": cmd_validate,
    "deploy": cmd_deploy,
    "report": cmd_report,
}


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        cfg = _resolve(args)
        return COMMANDS[args.command](cfg)
    except C.ConfigError as exc:
        print(f"error class=config message={exc}", file=sys.stderr)
        return 2
    except PhaseError as exc:
        print(f"error class=phase message={exc}", file=sys.stderr)
        return 3
    except Exception as exc:  # pragma: no cover - last-resort reporting
        print(f"error class={type(exc).__name__} message={exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
