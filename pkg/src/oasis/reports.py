"""Deterministic output artifacts: CSV records, report documents, text
tables and SVG curves. Apart from measured wall times, every byte is a
pure function of (seed, config)."""

import dataclasses
import hashlib
import json

import numpy as np

from .protocol import FrameRecord
from .strategies import StrategyConfig, DISPLAY_NAMES

RECORDS_HEADER = ("episode_id,frame_index,environment,condition,strategy,"
                  "miou,n_classes_pred,n_classes_gt,reset_fired,wall_time_ms")

ADD_COMPUTE = {
    "NA": "-",
    "N_BN": "BN stat. update (*)", "C_BN": "BN stat. update (*)",
    "N_ST_RANDOM": "ST optim. (++)", "N_ST_NN": "ST optim. & NN (+++)",
}
ADD_MEMORY = {
    "NA": "-", "N_BN": "-", "C_BN": "-", "N_TENT": "-", "N_PL": "-",
    "C_TENT": "-", "C_PL": "-",
    "C_TENT_SR": "Source set (++)", "C_PL_SR": "Source set (++)",
    "N_ST_RANDOM": "Source set (++)", "N_ST_NN": "Source set (++)",
    "CLASS_R_TENT": "Backup net (+)", "CLASS_R_PL": "Backup net (+)",
    "ORACLE_R_TENT": "Backup net (+)", "ORACLE_R_PL": "Backup net (+)",
}


def provenance_line(cfg_hash, seed, prefix="#"):
    from . import __version__
    return f"{prefix} oasis v{__version__} config={cfg_hash} seed={seed}"


# ---------------------------------------------------------------------------
# frame record CSV
# ---------------------------------------------------------------------------

def write_records_csv(path, records, cfg_hash, seed):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(provenance_line(cfg_hash, seed) + "\n")
        fh.write(RECORDS_HEADER + "\n")
        for r in records:
            fh.write(f"{r.episode_id},{r.frame_index},{r.environment},{r.condition},"
                     f"{r.strategy},{r.miou:.10f},{r.n_classes_pred},{r.n_classes_gt},"
                     f"{int(r.reset_fired)},{r.wall_time_ms:.3f}\n")


def read_records_csv(path):
    records = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            if line.startswith("#") or line.startswith("episode_id"):
                continue
            parts = line.rstrip("\n").split(",")
            records.append(FrameRecord(
                episode_id=parts[0], frame_index=int(parts[1]), environment=parts[2],
                condition=parts[3], strategy=parts[4], miou=float(parts[5]),
                n_classes_pred=int(parts[6]), n_classes_gt=int(parts[7]),
                reset_fired=bool(int(parts[8])), wall_time_ms=float(parts[9])))
    return records


def write_timing_csv(path, records, cfg_hash, seed):
    """Measured per-strategy wall time; excluded from byte-level determinism."""
    by_strategy = {}
    for r in records:
        by_strategy.setdefault(r.strategy, []).append(r.wall_time_ms)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(provenance_line(cfg_hash, seed) + "\n")
        fh.write("strategy,frames,mean_ms,max_ms\n")
        for name in sorted(by_strategy):
            arr = np.asarray(by_strategy[name])
            fh.write(f"{name},{arr.size},{arr.mean():.3f},{arr.max():.3f}\n")


# ---------------------------------------------------------------------------
# structured reports
# ---------------------------------------------------------------------------

def _config_to_dict(cfg):
    return dataclasses.asdict(cfg)


def _config_from_dict(d):
    return StrategyConfig(**d)


def winners_checksum(winner_configs):
    doc = json.dumps({k: _config_to_dict(v) for k, v in sorted(winner_configs.items())},
                     sort_keys=True)
    return hashlib.sha256(doc.encode("utf-8")).hexdigest()


def validation_report_doc(report, cfg_hash, seed):
    winners = {kind: res.config for kind, res in report.winners.items()}
    return {
        "_provenance": provenance_line(cfg_hash, seed, prefix=""),
        "model_ranking": [[m, round(v, 10)] for m, v in report.model_ranking],
        "selected_model": report.selected_model,
        "results": [
            {
                "kind": r.config.kind,
                "config_id": r.config.config_id,
                "config": _config_to_dict(r.config),
                "model_id": r.model_id,
                "episode_means": [round(v, 10) for v in r.episode_means],
                "mean_miou": round(r.mean_miou, 10),
                "std_miou": round(r.std_miou, 10),
                "failed": r.failed,
            }
            for r in report.results
        ],
        "winners": {kind: _config_to_dict(cfg) for kind, cfg in winners.items()},
        "winners_checksum": winners_checksum(winners),
    }


def load_validation_winners(doc):
    """Winner configs from a report document, verifying the tamper checksum."""
    winners = {kind: _config_from_dict(d) for kind, d in doc["winners"].items()}
    if winners_checksum(winners) != doc["winners_checksum"]:
        raise ValueError("validation report was modified after writing "
                         "(winner checksum mismatch)")
    return winners, doc["selected_model"]


def write_json(path, doc):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(json.dumps(doc, sort_keys=True, indent=2) + "\n")


def read_json(path):
    with open(path, "r", encoding="utf-8") as fh:
        return json.load(fh)


# ---------------------------------------------------------------------------
# text tables
# ---------------------------------------------------------------------------

def render_validation_table(report, cfg_hash, seed):
    lines = [provenance_line(cfg_hash, seed), ""]
    lines.append("pre-training selection (mean NA mIoU on validation episodes)")
    for model_id, mean in report.model_ranking:
        marker = " <- selected" if model_id == report.selected_model else ""
        lines.append(f"  {model_id:<10} {mean:.4f}{marker}")
    lines.append("")
    lines.append(f"{'configuration':<34} {'model':<8} {'mean mIoU':>10} {'std':>8}  winner")
    lines.append("-" * 74)
    winner_ids = {(res.config.config_id, res.model_id) for res in report.winners.values()}
    for r in report.results:
        mark = "*" if (r.config.config_id, r.model_id) in winner_ids else ""
        failed = " FAILED" if r.failed else ""
        lines.append(f"{r.config.config_id:<34} {r.model_id:<8} {r.mean_miou:>10.4f} "
                     f"{r.std_miou:>8.4f}  {mark}{failed}")
    return "\n".join(lines) + "\n"


def render_deploy_table(deploy_result, cfg_hash, seed):
    """Strategy x improvement table in the benchmark's reporting shape."""
    rows = deploy_result["rows"]
    lines = [provenance_line(cfg_hash, seed), ""]
    lines.append(f"NA baseline mean mIoU: {deploy_result['baseline_mean_miou']:.4f} "
                 f"(per episode: "
                 + ", ".join(f"{v:.4f}" for v in deploy_result["baseline_per_episode"]) + ")")
    lines.append("")
    header = f"{'method':<16} {'improvement':>16}   {'add. computation':<24} {'add. memory':<16}"
    lines.append(header)
    lines.append("-" * len(header))
    for kind in sorted(rows, key=_display_order):
        if kind == "NA":
            continue
        row = rows[kind]
        imp = f"{row['mean_improvement'] * 100:+.1f}% ± {row['std_improvement'] * 100:.1f}"
        compute = ADD_COMPUTE.get(kind, "O(train steps) (+)")
        memory = ADD_MEMORY.get(kind, "-")
        lines.append(f"{DISPLAY_NAMES[kind]:<16} {imp:>16}   {compute:<24} {memory:<16}")
    return "\n".join(lines) + "\n"


_ORDER = ["N_ST_RANDOM", "N_ST_NN", "N_BN", "N_PL", "N_TENT", "C_BN", "C_PL", "C_TENT",
          "C_PL_SR", "C_TENT_SR", "CLASS_R_PL", "CLASS_R_TENT",
          "ORACLE_R_PL", "ORACLE_R_TENT", "NA"]


def _display_order(kind):
    return _ORDER.index(kind) if kind in _ORDER else len(_ORDER)


# ---------------------------------------------------------------------------
# SVG curves
# ---------------------------------------------------------------------------

_PALETTE = ("#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b",
            "#e377c2", "#7f7f7f", "#bcbd22", "#17becf")


def svg_miou_curves(series, title, width=720, height=340):
    """Line chart of per-frame mIoU; series is {label: [values]}."""
    pad_l, pad_r, pad_t, pad_b = 46, 12, 28, 30
    plot_w, plot_h = width - pad_l - pad_r, height - pad_t - pad_b
    n = max((len(v) for v in series.values()), default=1)

    def sx(i):
        return pad_l + plot_w * (i / max(n - 1, 1))

    def sy(v):
        return pad_t + plot_h * (1.0 - min(max(v, 0.0), 1.0))

    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
             f'viewBox="0 0 {width} {height}">',
             f'<rect width="{width}" height="{height}" fill="white"/>',
             f'<text x="{pad_l}" y="18" font-family="monospace" font-size="13">{title}</text>']
    for frac in (0.0, 0.25, 0.5, 0.75, 1.0):
        y = sy(frac)
        parts.append(f'<line x1="{pad_l}" y1="{y:.1f}" x2="{width - pad_r}" y2="{y:.1f}" '
                     f'stroke="#dddddd" stroke-width="1"/>')
        parts.append(f'<text x="6" y="{y + 4:.1f}" font-family="monospace" '
                     f'font-size="11">{frac:.2f}</text>')
    for k, (label, values) in enumerate(sorted(series.items())):
        color = _PALETTE[k % len(_PALETTE)]
        pts = " ".join(f"{sx(i):.1f},{sy(v):.1f}" for i, v in enumerate(values))
        parts.append(f'<polyline points="{pts}" fill="none" stroke="{color}" stroke-width="1.3"/>')
        parts.append(f'<text x="{pad_l + 8 + 150 * (k % 4)}" y="{height - 8 - 14 * (k // 4)}" '
                     f'font-family="monospace" font-size="11" fill="{color}">{label}</text>')
    parts.append(f'<text x="{width // 2 - 20}" y="{height - 16}" font-family="monospace" '
                 f'font-size="11">frame</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def write_episode_curves(path, records, episode_id, cfg_hash, seed):
    series = {}
    for r in records:
        if r.episode_id == episode_id:
            series.setdefault(r.strategy, {})[r.frame_index] = r.miou
    ordered = {label: [vals[i] for i in sorted(vals)] for label, vals in series.items()}
    svg = svg_miou_curves(ordered, f"mIoU per frame: {episode_id}")
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(f"<!-- {provenance_line(cfg_hash, seed, prefix='')} -->\n")
        fh.write(svg)
