"""Ablation harness: train config variants under one budget and compare.

Every run in a grid shares the data, the data order, and the parameter
initialization for its seed; only the varied configuration axis changes, so
metric differences isolate the mechanism under study. Verdicts aggregate
pairwise metric comparisons by seed majority.
"""

from __future__ import annotations

import dataclasses
import itertools
import json
from dataclasses import dataclass, field

import numpy as np

from .config import RunConfig
from .metrics import EvalReport, evaluate
from .model import build_model
from .synthworld import SyntheticEpisode, WorldConfig, generate_episode
from .training import train

# axis name -> ModelConfig field
AXES = {
    "temporal_memory": "temporal_memory",
    "spatial_memory": "spatial_memory",
    "design": "design",
    "n_s": "n_s",
}

# the standard single-axis studies and the metric orderings they are
# expected to reproduce directionally (strict or non-strict per comparison)
STUDIES = {
    "temporal_memory": {
        "grid": {"temporal_memory": ["off", "all", "selective"]},
        "orderings": [("m_tIoU", [("selective", "off", ">"),
                                  ("off", "all", ">")])],
    },
    "spatial_memory": {
        "grid": {"spatial_memory": ["off", "all", "selective"]},
        "orderings": [("m_tIoU", [("selective", "all", ">="),
                                  ("all", "off", ">=")])],
    },
    "design": {
        "grid": {"design": ["parallel", "cascaded"]},
        "orderings": [("m_vIoU", [("cascaded", "parallel", ">")])],
    },
    "n_s": {
        "grid": {"n_s": [16, 32, 48]},
        "orderings": [],   # execution only; differences are noise-level
    },
}


@dataclass
class AblationRow:
    variant: dict
    seed: int
    metrics: dict

    def label(self) -> str:
        return ",".join(f"{k}={v}" for k, v in sorted(self.variant.items()))


@dataclass
class AblationResult:
    rows: list[AblationRow] = field(default_factory=list)
    verdicts: dict = field(default_factory=dict)

    def metric(self, variant: dict, seed: int, name: str) -> float:
        for row in self.rows:
            if row.variant == variant and row.seed == seed:
                return row.metrics[name]
        raise KeyError(f"no row for {variant} seed {seed}")


def _variant_config(base: RunConfig, variant: dict, seed: int) -> RunConfig:
    model = dataclasses.replace(base.model,
                                **{AXES[k]: v for k, v in variant.items()})
    return dataclasses.replace(base, model=model, seed=seed)


def _report_metrics(report: EvalReport) -> dict:
    out = {"m_tIoU": report.m_tiou, "m_vIoU": report.m_viou}
    for r, v in report.viou_at.items():
        out[f"vIoU@{r}"] = v
    return out


def ablate(base: RunConfig, grid: dict[str, list],
           train_episodes: list[SyntheticEpisode],
           eval_episodes: list[SyntheticEpisode],
           seeds: list[int], progress=None) -> AblationResult:
    """Cross-product of ``grid`` x ``seeds``, trained and evaluated."""
    for axis in grid:
        if axis not in AXES:
            raise ValueError(f"unknown ablation axis {axis!r}")
    result = AblationResult()
    names = list(grid)
    for combo in itertools.product(*(grid[a] for a in names)):
        variant = dict(zip(names, combo))
        for seed in seeds:
            cfg = _variant_config(base, variant, seed)
            model = build_model(cfg)
            train(model, train_episodes, cfg.train, seed=seed)
            report = evaluate(model, eval_episodes)
            row = AblationRow(variant=variant, seed=seed,
                              metrics=_report_metrics(report))
            result.rows.append(row)
            if progress is not None:
                progress(row)
    return result


def judge(result: AblationResult, axis: str, metric: str,
          orderings: list[tuple]) -> dict:
    """Seed-majority verdicts for pairwise orderings along one axis."""
    seeds = sorted({row.seed for row in result.rows})
    out = {}
    for hi, lo, op in orderings:
        per_seed = []
        for seed in seeds:
            a = result.metric({axis: hi}, seed, metric)
            b = result.metric({axis: lo}, seed, metric)
            per_seed.append(bool(a > b if op == ">" else a >= b))
        out[f"{axis}:{hi}{op}{lo}:{metric}"] = {
            "per_seed": per_seed,
            "majority": sum(per_seed) * 2 > len(per_seed),
        }
    return out


def run_studies(base: RunConfig, seeds: list[int],
                n_train: int, n_eval: int,
                studies: list[str] | None = None,
                progress=None) -> dict[str, AblationResult]:
    """Run the standard single-axis studies on freshly generated data."""
    studies = studies or list(STUDIES)
    train_eps = [generate_episode(base.world,
                                  np.random.SeedSequence([base.seed, 1, i]))
                 for i in range(n_train)]
    eval_eps = [generate_episode(base.world,
                                 np.random.SeedSequence([base.seed, 2, i]))
                for i in range(n_eval)]
    results = {}
    for name in studies:
        spec_ = STUDIES[name]
        res = ablate(base, spec_["grid"], train_eps, eval_eps, seeds,
                     progress=progress)
        for metric, orderings in spec_["orderings"]:
            res.verdicts.update(judge(res, name, metric, orderings))
        results[name] = res
    return results


# ---------------------------------------------------------------------------
# reporting
# ---------------------------------------------------------------------------

def result_table(result: AblationResult) -> str:
    if not result.rows:
        return "(empty)\n"
    metrics = list(result.rows[0].metrics)
    label_w = max(len(r.label()) for r in result.rows) + 2
    head = f"{'variant':<{label_w}}{'seed':>6}" + "".join(
        f"{m:>12}" for m in metrics)
    lines = [head]
    by_variant: dict[str, list[AblationRow]] = {}
    for row in result.rows:
        lines.append(f"{row.label():<{label_w}}{row.seed:>6}" + "".join(
            f"{100 * row.metrics[m]:12.2f}" for m in metrics))
        by_variant.setdefault(row.label(), []).append(row)
    lines.append("-" * len(head))
    for label, rows in by_variant.items():
        lines.append(f"{label:<{label_w}}{'mean':>6}" + "".join(
            f"{100 * np.mean([r.metrics[m] for r in rows]):12.2f}"
            for m in metrics))
    if result.verdicts:
        lines.append("")
        for name, v in sorted(result.verdicts.items()):
            status = "holds" if v["majority"] else "FAILS"
            lines.append(f"{name}: {status} per_seed={v['per_seed']}")
    return "\n".join(lines) + "\n"


def results_json(results: dict[str, AblationResult]) -> str:
    payload = {}
    for name, res in results.items():
        payload[name] = {
            "rows": [{"variant": r.variant, "seed": r.seed,
                      "metrics": r.metrics} for r in res.rows],
            "verdicts": res.verdicts,
        }
    return json.dumps(payload, indent=2, sort_keys=True)
