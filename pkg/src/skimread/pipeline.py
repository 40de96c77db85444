"""End-to-end wiring: corpus assembly, training runs, ablation grids.

The ablation runner trains one model per grid cell with a shared seed and
training schedule, evaluates text-to-video retrieval on the test split, and
emits both a machine-readable JSONL report and an aligned text table.
"""

from __future__ import annotations

import itertools
import json
import os
from dataclasses import dataclass

from .config import Config
from .corpus import (
    CorpusSplit,
    build_concept_vocabulary,
    build_vocabulary,
    load_captions,
    load_external_embeddings,
    load_frame_features,
    make_synthetic_corpus,
)
from .evaluator import RankMetrics, rank_metrics, similarity_matrix, t2v_ground_truth
from .model import RetrievalModel
from .trainer import TrainingLog, train


def load_corpus(cfg: Config) -> tuple[CorpusSplit, CorpusSplit, CorpusSplit]:
    d = cfg.data
    if d.kind == "synthetic":
        return make_synthetic_corpus(
            seed=d.seed,
            n_videos=d.n_videos,
            captions_per_video=d.captions_per_video,
            m_range=(d.m_min, d.m_max),
            d_frame=d.d_frame,
            vocab_size=d.vocab_size,
            n_topics=d.n_topics,
            split_fractions=d.split_fractions,
        )
    if d.kind == "files":
        for name in ("train", "val", "test"):
            if name not in d.caption_files:
                raise ValueError(f"data.caption_files missing the {name!r} split")
        videos = load_frame_features(d.feature_file)
        by_id = {v.video_id: v for v in videos}
        external = (
            load_external_embeddings(d.external_file) if d.external_file else {}
        )
        splits = []
        for name in ("train", "val", "test"):
            caps = load_captions(d.caption_files[name])
            for c in caps:
                if c.sentence_id in external:
                    c.external_embedding = external[c.sentence_id]
            vids = sorted({c.video_id for c in caps})
            splits.append(CorpusSplit([by_id[v] for v in vids], caps))
        return tuple(splits)  # type: ignore[return-value]
    raise ValueError(f"unknown data.kind {d.kind!r}")


def build_model(
    cfg: Config, train_split: CorpusSplit
) -> tuple[RetrievalModel, Config]:
    """Vocabularies from the training split, then the model.

    k_concepts is clamped to the number of distinct training words when the
    training captions cannot support the configured size; the effective
    config is returned alongside the model.
    """
    vocab = build_vocabulary(train_split.captions, cfg.train.vocab_min_count)
    distinct = len({t for c in train_split.captions for t in c.tokens})
    k_eff = min(cfg.hybrid.k_concepts, distinct)
    eff_cfg = cfg if k_eff == cfg.hybrid.k_concepts else cfg.with_overrides(
        {"hybrid.k_concepts": k_eff}
    )
    concept_vocab = build_concept_vocabulary(train_split.captions, k_eff)
    d_frame = train_split.videos[0].d_frame
    model = RetrievalModel(eff_cfg, vocab, concept_vocab, d_frame)
    return model, eff_cfg


@dataclass
class RunResult:
    model: RetrievalModel
    log: TrainingLog
    metrics: RankMetrics
    config: Config


def train_run(
    cfg: Config, out_dir: str | None = None, max_epochs: int | None = None
) -> RunResult:
    """Build everything from a config, train, evaluate t2v on the test split."""
    train_split, val_split, test_split = load_corpus(cfg)
    model, eff_cfg = build_model(cfg, train_split)
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
    model, log = train(eff_cfg, train_split, val_split, model, out_dir, max_epochs)
    sims = similarity_matrix(model, test_split, direction="t2v")
    metrics = rank_metrics(sims, t2v_ground_truth(test_split))
    return RunResult(model=model, log=log, metrics=metrics, config=eff_cfg)


# ---------------------------------------------------------------------------
# ablation grid
# ---------------------------------------------------------------------------

def _cell_label(overrides: dict) -> str:
    return ",".join(f"{k.split('.')[-1]}={v}" for k, v in overrides.items())


def run_ablation(
    base_cfg: Config,
    grid: dict[str, list],
    out_dir: str | None = None,
    max_epochs: int | None = None,
) -> list[dict]:
    """Train/evaluate every cell of a config grid.

    grid maps dotted config keys to value lists; cells are their cartesian
    product applied over the base config.  Invalid combinations (for example
    a dependent attention query without both branches) are skipped with a
    note.  Returns one row dict per cell.
    """
    keys = sorted(grid)
    rows: list[dict] = []
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
    for values in itertools.product(*(grid[k] for k in keys)):
        overrides = dict(zip(keys, values))
        label = _cell_label(overrides)
        try:
            cfg = base_cfg.with_overrides(overrides)
        except ValueError as err:
            rows.append({"cell": label, "skipped": str(err)})
            continue
        result = train_run(cfg, max_epochs=max_epochs)
        row = {"cell": label, **result.metrics.as_dict()}
        rows.append(row)
        if out_dir is not None:
            record = {
                "cell": label,
                "config_hash": cfg.config_hash(),
                "metrics": result.metrics.as_dict(),
            }
            with open(f"{out_dir}/ablation.jsonl", "a", encoding="utf-8") as f:
                f.write(json.dumps(record, sort_keys=True) + "\n")
    if out_dir is not None:
        from .evaluator import format_table

        with open(f"{out_dir}/ablation.txt", "w", encoding="utf-8") as f:
            f.write(format_table([r for r in rows if "skipped" not in r]) + "\n")
            for r in rows:
                if "skipped" in r:
                    f.write(f"# skipped {r['cell']}: {r['skipped']}\n")
    return rows
