"""Sequence runner, validation grid and one-shot deployment evaluation."""

import concurrent.futures
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import model as M
from . import strategies as S
from . import world as W
from .metrics import count_classes, frame_miou
from .seeding import rng_for


@dataclass
class FrameRecord:
    episode_id: str
    frame_index: int
    environment: str
    condition: str
    strategy: str
    miou: float
    n_classes_pred: int
    n_classes_gt: int
    reset_fired: bool
    wall_time_ms: float


@dataclass
class EpisodeSummary:
    episode_id: str
    strategy: str
    mean_miou: float
    sub_mean_miou: list
    failed: bool = False
    reset_count: int = 0


@dataclass
class GridResult:
    """One (strategy config, pre-trained model) cell of the validation grid."""
    config: S.StrategyConfig
    model_id: str
    episode_means: list
    mean_miou: float
    std_miou: float
    failed: bool


@dataclass
class ValidationReport:
    results: list                     # GridResult, grid order
    winners: dict                     # kind -> GridResult
    model_ranking: list               # (model_id, mean NA mIoU), best first
    selected_model: str


def theta0_reference(model, episode):
    """Per-frame predicted-class count and mIoU of the frozen model.

    Shared across every reset-style run of the same (model, episode) so the
    reference predictions are computed once.
    """
    ref = []
    for _, _, frame in episode:
        pred = M.predict(model, frame.image).argmax(axis=0)
        ref.append((count_classes(pred), frame_miou(pred, frame.mask, model.classes)))
    return ref


def run_episode(episode, cfg, theta0, seed, source=None, theta0_ref=None):
    """Strictly sequential adapt-then-predict over one episode.

    Ground truth is touched only for metrics, except by the oracle reset
    strategies, which are oracles by construction. The adapted state is
    discarded at the end: nothing leaks across episodes.
    """
    if not isinstance(episode, W.MaterializedEpisode):
        episode = W.MaterializedEpisode(episode)
    spec = episode.spec
    state = S.init_adapt_state(theta0, cfg, seed, source=source, theta0_reference=theta0_ref)
    records = []
    failed = False
    for index, sub_index, frame in episode:
        sub = spec.subsequences[sub_index]
        t0 = time.perf_counter()
        try:
            probs, state = S.adapt_step(state, frame, frame_index=index)
            pred = probs.argmax(axis=0)
            miou = frame_miou(pred, frame.mask, theta0.classes)
            n_pred = count_classes(pred)
        except S.StrategyError:
            failed = True
            records.append(FrameRecord(spec.episode_id, index, sub.domain.environment,
                                       sub.domain.condition, cfg.config_id, 0.0, 0,
                                       count_classes(frame.mask), False,
                                       (time.perf_counter() - t0) * 1000.0))
            break
        records.append(FrameRecord(
            spec.episode_id, index, sub.domain.environment, sub.domain.condition,
            cfg.config_id, miou, n_pred, count_classes(frame.mask),
            bool(state.diagnostics.pop("reset_fired", False)),
            (time.perf_counter() - t0) * 1000.0,
        ))

    mean = float(np.mean([r.miou for r in records])) if records else 0.0
    sub_means = []
    offset = 0
    for sub in spec.subsequences:
        chunk = [r.miou for r in records if offset <= r.frame_index < offset + sub.frames]
        sub_means.append(float(np.mean(chunk)) if chunk else 0.0)
        offset += sub.frames
    summary = EpisodeSummary(spec.episode_id, cfg.config_id, mean, sub_means,
                             failed=failed, reset_count=state.reset_count)
    return summary, records


def _needs_source(cfg):
    return cfg.kind in S.SR_KINDS + S.ST_KINDS


def _needs_theta0_ref(cfg):
    return cfg.kind in S.RESET_KINDS


def run_grid_cell(cfg, model_id, theta0, episodes, seed, source=None, theta0_refs=None):
    """One strategy config over every episode; returns (GridResult, records)."""
    episode_means = []
    all_records = []
    failed = False
    for e_idx, episode in enumerate(episodes):
        ref = theta0_refs[e_idx] if (theta0_refs is not None and _needs_theta0_ref(cfg)) else None
        run_seed = int(rng_for(seed, "run", cfg.config_id, model_id, e_idx).integers(0, 2 ** 31))
        summary, records = run_episode(episode, cfg, theta0, run_seed,
                                       source=source if _needs_source(cfg) else None,
                                       theta0_ref=ref)
        episode_means.append(summary.mean_miou)
        all_records.extend(records)
        failed = failed or summary.failed
    arr = np.asarray(episode_means)
    result = GridResult(cfg, model_id, episode_means,
                        float(arr.mean()), float(arr.std()), failed)
    return result, all_records


# worker-side context for `jobs > 1`; populated once per worker via fork
_POOL_CTX = {}


def _pool_init(payload):
    _POOL_CTX.update(payload)


def _pool_cell(cell):
    cfg, model_id = cell
    ctx = _POOL_CTX
    return run_grid_cell(cfg, model_id, ctx["models"][model_id], ctx["episodes"],
                         ctx["seed"],
                         source=ctx["memories"].get(model_id) if _needs_source(cfg) else None,
                         theta0_refs=ctx["refs"].get(model_id))


def _map_cells(cells, models, episodes, seed, memories, refs, jobs):
    """Run (config, model) cells sequentially or on a worker pool.

    Results come back in cell order either way, so aggregation is
    independent of scheduling.
    """
    if jobs <= 1:
        out = []
        for cfg, model_id in cells:
            out.append(run_grid_cell(cfg, model_id, models[model_id], episodes, seed,
                                     source=memories.get(model_id) if _needs_source(cfg) else None,
                                     theta0_refs=refs.get(model_id)))
        return out
    payload = {"models": models, "episodes": episodes, "seed": seed,
               "memories": memories, "refs": refs}
    with concurrent.futures.ProcessPoolExecutor(
            max_workers=jobs, initializer=_pool_init, initargs=(payload,)) as pool:
        return list(pool.map(_pool_cell, cells))


def _winner_sort_key(result):
    # higher mean wins; ties prefer lower eta, then fewer adapt iterations
    return (-result.mean_miou, result.config.eta, result.config.adapt_iters)


def select_winners(results):
    """Best configuration per strategy kind among failure-free cells."""
    winners = {}
    for res in sorted(results, key=_winner_sort_key):
        if res.failed:
            continue
        winners.setdefault(res.config.kind, res)
    return winners


def validate(strategy_grids, episodes, candidates, seed, source_memories=None, jobs=1):
    """Run every (config, model) combination on every episode.

    strategy_grids: list of StrategyConfig (already expanded grids).
    candidates: list of (model_id, ModelState); NA rows double as the
    pre-training selector, winners are per strategy kind on the best model.
    Returns (ValidationReport, frame records).
    """
    episodes = [ep if isinstance(ep, W.MaterializedEpisode) else W.MaterializedEpisode(ep)
                for ep in episodes]
    models = dict(candidates)
    refs_by_model = {}
    if any(_needs_theta0_ref(cfg) for cfg in strategy_grids):
        for model_id, theta0 in candidates:
            refs_by_model[model_id] = [theta0_reference(theta0, ep) for ep in episodes]
    cells = [(cfg, model_id) for model_id, _ in candidates for cfg in strategy_grids]
    outputs = _map_cells(cells, models, episodes, seed, source_memories or {},
                         refs_by_model, jobs)
    results = [res for res, _ in outputs]
    records = [rec for _, recs in outputs for rec in recs]

    na_rows = [r for r in results if r.config.kind == "NA"]
    ranking = sorted(((r.model_id, r.mean_miou) for r in na_rows), key=lambda kv: -kv[1])
    selected = ranking[0][0] if ranking else candidates[0][0]
    best_results = [r for r in results if r.model_id == selected]
    report = ValidationReport(results=results, winners=select_winners(best_results),
                              model_ranking=ranking, selected_model=selected)
    return report, records


def deploy(winners, deploy_episodes, theta0, seed, source=None, expected_configs=None, jobs=1):
    """Run each validated winner once on the held-out episodes.

    Refuses to run when a winner's configuration differs from the validated
    one (expected_configs, when provided, is the tamper reference).
    Returns per-strategy relative improvements over the NA baseline,
    aggregated per episode first.
    """
    if expected_configs is not None:
        for kind, cfg in winners.items():
            if kind not in expected_configs or expected_configs[kind] != cfg:
                raise ValueError(f"deploy refused: configuration for {kind} does not match "
                                 f"its validated winner")
    episodes = [W.MaterializedEpisode(ep) if not isinstance(ep, W.MaterializedEpisode) else ep
                for ep in deploy_episodes]
    na_cfg = winners.get("NA", S.default_config("NA"))
    model_id = theta0.snapshot_id
    refs = {model_id: [theta0_reference(theta0, ep) for ep in episodes]}

    na_result, na_records = run_grid_cell(na_cfg, model_id, theta0, episodes, seed)
    baseline = np.asarray(na_result.episode_means)
    if np.any(baseline <= 0):
        raise RuntimeError("NA baseline scored zero on an episode; improvements undefined")

    kinds = [k for k in sorted(winners) if k != "NA"]
    cells = [(winners[k], model_id) for k in kinds]
    outputs = _map_cells(cells, {model_id: theta0}, episodes, seed,
                         {model_id: source}, refs, jobs)

    rows = {"NA": {
        "config_id": na_cfg.config_id,
        "per_episode_improvement": [0.0] * len(baseline),
        "mean_improvement": 0.0,
        "std_improvement": 0.0,
    }}
    all_records = list(na_records)
    summaries = {"NA": na_result}
    for kind, (res, recs) in zip(kinds, outputs):
        all_records.extend(recs)
        summaries[kind] = res
        rel = (np.asarray(res.episode_means) - baseline) / baseline
        rows[kind] = {
            "config_id": winners[kind].config_id,
            "per_episode_improvement": [float(v) for v in rel],
            "mean_improvement": float(rel.mean()),
            "std_improvement": float(rel.std()),
        }
    return {
        "baseline_mean_miou": float(baseline.mean()),
        "baseline_per_episode": [float(v) for v in baseline],
        "rows": rows,
    }, all_records, summaries
