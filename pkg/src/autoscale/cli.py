"""Operator entry point: batch subcommands wiring the whole pipeline.

Flags override config-file keys. Exit codes: 0 success, 1 validation failure
(bad config/inputs), 2 runtime error. Set AUTOSCALE_LOG=DEBUG (or INFO, ...)
for verbosity. All randomness hangs off --seed / the config seed.
"""

from __future__ import annotations

import csv
import dataclasses
import functools
import json
import logging
import os
import sys
from pathlib import Path

import click
import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # python 3.10
    import tomli as tomllib

from autoscale import engine as engine_mod
from autoscale import baselines, driving_metrics, mixture, reporting, retrieval, scenes
from autoscale.clustering import ClusterModel, build_cluster_model
from autoscale.encoder import (
    EncoderConfig,
    TrainSettings,
    read_embeddings_csv,
    save_params,
    train_encoder,
    write_embeddings_csv,
)
from autoscale.harness import (
    ArchetypeSpec,
    GroundTruthOracle,
    World,
    WorldSpec,
    default_world_spec,
    descriptor_embeddings,
)

logger = logging.getLogger(__name__)


class ConfigError(ValueError):
    pass


ENGINE_KEYS = {
    "budget", "rounds", "clusters", "sigma", "lambda_reg", "eps_max", "seed", "method",
}
TOP_KEYS = ENGINE_KEYS | {"embedder", "paths", "world", "encoder"}
PATH_KEYS = {"real", "syn", "cal", "out", "world", "embeddings"}
WORLD_KEYS = {
    "preset", "seed", "t_len", "t_hist", "t_fut", "noise_sigma", "synth_ratio_coeff",
    "transfer_strength", "cal_fraction", "eval_draws", "metric_fraction", "archetypes",
    "transfer",
}
ARCH_KEYS = {
    "name", "curvature", "curvature_wobble", "speed", "speed_end", "real_count",
    "syn_count", "base_score", "data_return", "agent_rate", "crossing",
}
ENCODER_KEYS = {
    "hidden_dim", "num_layers", "num_heads", "t_len", "t_hist", "t_fut", "mlp_hidden",
    "metric_dim", "huber_delta", "temperature", "lambda_weight", "steps", "batch_size",
    "learning_rate", "seed",
}


def _reject_unknown(table: dict, known: set, where: str):
    unknown = set(table) - known
    if unknown:
        raise ConfigError(f"unknown key(s) in {where}: {', '.join(sorted(unknown))}")


def _load_toml(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    with path.open("rb") as fh:
        return tomllib.load(fh)


def world_spec_from_dict(table: dict) -> WorldSpec:
    _reject_unknown(table, WORLD_KEYS, "[world]")
    overrides = {
        k: table[k]
        for k in (
            "seed", "t_len", "t_hist", "t_fut", "noise_sigma", "synth_ratio_coeff",
            "transfer_strength", "cal_fraction", "eval_draws", "metric_fraction",
        )
        if k in table
    }
    if "archetypes" in table:
        archetypes = []
        for i, entry in enumerate(table["archetypes"]):
            _reject_unknown(entry, ARCH_KEYS, f"[[world.archetypes]] #{i}")
            archetypes.append(ArchetypeSpec(**entry))
        transfer = table.get("transfer")
        return WorldSpec(
            archetypes=tuple(archetypes),
            transfer=tuple(map(tuple, transfer)) if transfer else None,
            **overrides,
        )
    spec = default_world_spec(
        seed=table.get("seed", 0), scale=table.get("preset", "desk")
    )
    overrides.pop("seed", None)
    return dataclasses.replace(spec, **overrides) if overrides else spec


@dataclasses.dataclass
class RunConfig:
    engine: engine_mod.EngineConfig
    world: WorldSpec | None
    paths: dict[str, Path]
    embedder: str = "descriptor"
    encoder: dict = dataclasses.field(default_factory=dict)


def load_run_config(path, overrides: dict) -> RunConfig:
    data = _load_toml(path)
    _reject_unknown(data, TOP_KEYS, str(path))
    engine_kwargs = {k: data[k] for k in ENGINE_KEYS if k in data}
    engine_kwargs.update({k: v for k, v in overrides.items() if v is not None})
    try:
        cfg = engine_mod.EngineConfig(**engine_kwargs)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc

    paths_table = data.get("paths", {})
    _reject_unknown(paths_table, PATH_KEYS, "[paths]")
    base = Path(path).parent
    paths = {k: (base / v if not Path(v).is_absolute() else Path(v)) for k, v in paths_table.items()}
    if overrides.get("out"):
        paths["out"] = Path(overrides["out"])

    world = None
    if "world" in data:
        world = world_spec_from_dict(data["world"])
    elif "world" in paths:
        world_table = _load_toml(paths["world"])
        world = world_spec_from_dict(world_table.get("world", world_table))
    if world is not None and overrides.get("seed") is not None:
        world = dataclasses.replace(world, seed=overrides["seed"])

    encoder_table = data.get("encoder", {})
    _reject_unknown(encoder_table, ENCODER_KEYS, "[encoder]")
    embedder = data.get("embedder", "descriptor")
    if embedder not in ("descriptor", "encoder"):
        raise ConfigError(f"embedder must be 'descriptor' or 'encoder', got {embedder!r}")
    return RunConfig(engine=cfg, world=world, paths=paths, embedder=embedder, encoder=encoder_table)


VALIDATION_ERRORS = (ConfigError, ValueError, FileNotFoundError, KeyError)


def guarded(fn):
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except VALIDATION_ERRORS as exc:
            click.echo(f"error: {exc}", err=True)
            sys.exit(1)
        except Exception as exc:  # noqa: BLE001 - runtime failures exit 2
            click.echo(f"runtime error: {exc}", err=True)
            sys.exit(2)

    return wrapper


@click.group()
def main():
    """Closed-loop data-mixture optimization engine."""
    level = os.environ.get("AUTOSCALE_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING))


def _require(condition: bool, message: str):
    if not condition:
        raise ConfigError(message)


def _load_dataset(path) -> scenes.Dataset:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"dataset file not found: {path}")
    return scenes.read_jsonl(path)


def _validated(dataset: scenes.Dataset, name: str) -> scenes.Dataset:
    report = scenes.validate_dataset(dataset)
    if not report.ok:
        raise ConfigError(
            f"{name} dataset invalid: {report.violations[0]} "
            f"(+{len(report.violations) - 1} more)" if len(report.violations) > 1
            else f"{name} dataset invalid: {report.violations[0]}"
        )
    return dataset


@main.command("gen-world")
@click.option("--config", "config_path", required=True, type=click.Path())
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--seed", type=int, default=None, help="override the world seed")
@guarded
def gen_world(config_path, out_dir, seed):
    """Generate harness datasets (real/syn_pool/cal JSONL) from a world spec."""
    data = _load_toml(config_path)
    spec = world_spec_from_dict(data.get("world", data))
    if seed is not None:
        spec = dataclasses.replace(spec, seed=seed)
    world = World.generate(spec)
    out = Path(out_dir)
    scenes.write_jsonl(world.real, out / "real.jsonl")
    scenes.write_jsonl(world.syn_pool, out / "syn_pool.jsonl")
    scenes.write_jsonl(world.cal, out / "cal.jsonl")
    click.echo(
        f"wrote {len(world.real)} real, {len(world.syn_pool)} synthetic, "
        f"{len(world.cal)} calibration scenes to {out}"
    )


@main.command()
@click.option("--real", "real_path", required=True, type=click.Path())
@click.option("--syn", "syn_path", type=click.Path(), default=None)
@click.option("--cal", "cal_path", type=click.Path(), default=None)
@click.option("--config", "config_path", type=click.Path(), default=None,
              help="TOML with an [encoder] table")
@click.option("--seed", type=int, default=0)
@click.option("--out", "out_dir", required=True, type=click.Path())
@guarded
def embed(real_path, syn_path, cal_path, config_path, seed, out_dir):
    """Train the scene encoder and export embeddings for all given scenes."""
    datasets = [_validated(_load_dataset(real_path), "real")]
    if syn_path:
        datasets.append(_validated(_load_dataset(syn_path), "synthetic"))
    if cal_path:
        datasets.append(_validated(_load_dataset(cal_path), "calibration"))
    merged = scenes.merge(*datasets)

    table = {}
    if config_path:
        raw = _load_toml(config_path)
        table = raw.get("encoder", raw if "archetypes" not in raw else {})
        _reject_unknown(table, ENCODER_KEYS, "[encoder]")
    settings = TrainSettings(
        steps=table.pop("steps", 200) if isinstance(table, dict) else 200,
        batch_size=table.pop("batch_size", 8),
        learning_rate=table.pop("learning_rate", 1e-2),
        seed=table.pop("seed", seed),
    )
    sample = next(iter(merged.graphs.values()))
    config = EncoderConfig(
        **{"t_len": sample.t_len, "t_hist": sample.t_hist, "t_fut": sample.t_fut, **table}
    )
    model, history = train_encoder(merged, config, settings)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_params(out / "encoder.grae", model)

    import torch

    from autoscale.encoder import GraphTensors

    embeddings = {}
    with torch.no_grad():
        for token_id in sorted(merged.graphs):
            gt = GraphTensors.from_scene_graph(merged.graphs[token_id])
            embeddings[token_id] = model.scene_embedding(gt).numpy()
    write_embeddings_csv(out / "embeddings.csv", embeddings)
    click.echo(
        f"trained {settings.steps} steps (loss {history[0]:.4g} -> {history[-1]:.4g}); "
        f"wrote {len(embeddings)} embeddings to {out}"
    )


@main.command()
@click.option("--embeddings", "emb_path", required=True, type=click.Path())
@click.option("--real", "real_path", required=True, type=click.Path())
@click.option("--cal", "cal_path", required=True, type=click.Path())
@click.option("--clusters", type=int, default=8)
@click.option("--pca-dim", type=int, default=None)
@click.option("--seed", type=int, default=0)
@click.option("--out", "out_dir", required=True, type=click.Path())
@guarded
def cluster(emb_path, real_path, cal_path, clusters, pca_dim, seed, out_dir):
    """Fit the cluster model on real-token embeddings; write model + table."""
    embeddings = read_embeddings_csv(emb_path)
    real = _load_dataset(real_path)
    cal = _load_dataset(cal_path)
    model, assignments = build_cluster_model(
        embeddings, real.token_ids(), cal.token_ids(), k=clusters,
        random_state=seed, pca_dim=pca_dim,
    )
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    model.save(out / "cluster_model.json")
    with (out / "assignments.csv").open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["token_id", "cluster_id"])
        for token_id in sorted(assignments):
            writer.writerow([token_id, assignments[token_id]])
    click.echo(f"fit {clusters} clusters over {len(assignments)} tokens; wrote {out}")


@main.command()
@click.option("--log", "log_path", required=True, type=click.Path())
@click.option("--cluster-model", "model_path", required=True, type=click.Path())
@click.option("--budget", type=int, required=True)
@click.option("--rounds", type=int, default=5)
@click.option("--sigma", type=float, default=0.5)
@click.option("--lambda-reg", type=float, default=1.0)
@click.option("--eps-max", type=float, default=0.1)
@click.option("--seed", type=int, default=0)
@click.option("--out", "out_path", required=True, type=click.Path())
@guarded
def optimize(log_path, model_path, budget, rounds, sigma, lambda_reg, eps_max, seed, out_path):
    """Fit the surrogate on a round log and propose the next mixture."""
    records = engine_mod.load_round_log(log_path)
    _require(len(records) >= 2, f"insufficient history: {len(records)} round(s), need >= 2")
    model = ClusterModel.load(model_path)
    from autoscale.clustering import rbf_similarity
    from autoscale.rng import stable_hash

    similarity = rbf_similarity(model.centroids, sigma)
    n0 = np.asarray(model.n0, dtype=int)
    n_total = int(n0.sum()) + budget
    history = [(np.asarray(r.mixture), r.s_bar_array()) for r in records]
    pairs = mixture.build_pairs(history, n0=n0, n_total=n_total)
    params = mixture.fit_predictor(pairs, similarity, lambda_reg)
    t = len(records)
    _require(t <= rounds, f"log already holds {t} rounds; schedule covers {rounds}")
    best = int(np.argmax([r.overall for r in records]))
    w_prev = np.asarray(records[best].mixture)
    g = mixture.gradient(params, similarity, model.pi, w_prev, n0, n_total)
    eps_t = mixture.half_cosine_schedule(max(t, 2), rounds, eps_max)
    candidate = mixture.eg_update(w_prev, g, eps_t)
    alpha = mixture.gains(params, similarity, w_prev, candidate.w, n0, n_total)
    payload = {
        "round": t,
        "warm_start_round": best,
        "eps_t": eps_t,
        "mixture": [float(x) for x in candidate.w],
        "predictor": {
            "beta": [float(b) for b in params.beta],
            "gamma": params.gamma,
            "lambda_reg": params.lambda_reg,
        },
        "gains": [float(a) for a in alpha.alpha],
    }
    Path(out_path).parent.mkdir(parents=True, exist_ok=True)
    Path(out_path).write_text(json.dumps(payload, indent=2))
    click.echo(f"proposed round-{t} mixture written to {out_path}")


def _read_scores_csv(path, column: str) -> dict[str, float]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or "token_id" not in reader.fieldnames:
            raise ConfigError(f"{path}: scores CSV needs a token_id column")
        if column not in reader.fieldnames:
            raise ConfigError(f"{path}: no column {column!r} (have {reader.fieldnames})")
        return {row["token_id"]: float(row[column]) for row in reader}


@main.command()
@click.argument("method", type=click.Choice(["autoscale", "uniform", "iwr", "chameleon"]))
@click.option("--embeddings", "emb_path", required=True, type=click.Path())
@click.option("--syn", "syn_path", required=True, type=click.Path(),
              help="synthetic pool JSONL (defines the candidate ids)")
@click.option("--real", "real_path", type=click.Path(), default=None)
@click.option("--cluster-model", "model_path", type=click.Path(), default=None)
@click.option("--scores", "scores_path", type=click.Path(), default=None,
              help="calibration per-scene scores CSV (autoscale anchors)")
@click.option("--score-column", default="score")
@click.option("--gains", "gains_path", type=click.Path(), default=None,
              help="JSON with a 'gains' array (output of optimize)")
@click.option("--budget", type=int, required=True)
@click.option("--seed", type=int, default=0)
@click.option("--out", "out_path", required=True, type=click.Path())
@guarded
def select(method, emb_path, syn_path, real_path, model_path, scores_path, score_column,
           gains_path, budget, seed, out_path):
    """Select synthetic tokens with one selector; write the ranked CSV."""
    embeddings = read_embeddings_csv(emb_path)
    pool_ids = [t for t in _load_dataset(syn_path).token_ids()]
    missing = [t for t in pool_ids if t not in embeddings]
    _require(not missing, f"{len(missing)} pool tokens lack embeddings")
    pool_emb = {t: embeddings[t] for t in pool_ids}

    if method == "uniform":
        chosen = baselines.uniform_select(pool_ids, budget, seed)
        candidates = [retrieval.RankedCandidate(t, 0.0, None, None) for t in chosen]
    elif method == "iwr":
        _require(real_path is not None, "iwr needs --real for the real embedding set")
        real_ids = _load_dataset(real_path).token_ids()
        real_emb = {t: embeddings[t] for t in real_ids if t in embeddings}
        _require(len(real_emb) == len(real_ids), "some real tokens lack embeddings")
        chosen, weights = baselines.iwr_select(real_emb, pool_emb, budget)
        by_id = {w.token_id: w.log_weight for w in weights}
        candidates = [retrieval.RankedCandidate(t, by_id[t], None, None) for t in chosen]
    elif method == "chameleon":
        _require(model_path is not None, "chameleon needs --cluster-model for centroids")
        model = ClusterModel.load(model_path)
        reduced_vectors = model.reduce(np.asarray([pool_emb[t] for t in sorted(pool_emb)]))
        reduced = dict(zip(sorted(pool_emb), reduced_vectors))
        assignments = baselines.assign_nearest_centroid(reduced, model.centroids)
        chosen, budgets = baselines.chameleon_select(
            model.centroids, assignments, budget, seed=seed
        )
        candidates = [
            retrieval.RankedCandidate(t, 0.0, None, assignments[t]) for t in chosen
        ]
    else:  # autoscale
        _require(scores_path is not None, "autoscale needs --scores for anchor selection")
        _require(model_path is not None, "autoscale needs --cluster-model for assignments")
        model = ClusterModel.load(model_path)
        scores = _read_scores_csv(scores_path, score_column)
        missing_emb = [t for t in scores if t not in embeddings]
        _require(not missing_emb, f"{len(missing_emb)} scored tokens lack embeddings")
        cal_vectors = np.asarray([embeddings[t] for t in sorted(scores)])
        assignments = dict(zip(sorted(scores), (int(c) for c in model.assign(cal_vectors))))
        alpha = np.zeros(model.k)
        if gains_path:
            payload = json.loads(Path(gains_path).read_text())
            alpha = np.asarray(payload["gains"], dtype=float)
            _require(len(alpha) == model.k, "gains length does not match cluster count")
        anchors = retrieval.select_anchors(
            scores, assignments, {t: embeddings[t] for t in scores}
        )
        result = retrieval.retrieve(anchors, pool_emb, alpha, budget, seed=seed)
        candidates = result.candidates
    reporting.write_selection_csv(candidates, method, out_path)
    click.echo(f"selected {len(candidates)} tokens via {method}; wrote {out_path}")


@main.command()
@click.option("--config", "config_path", required=True, type=click.Path())
@click.option("--seed", type=int, default=None)
@click.option("--budget", type=int, default=None)
@click.option("--rounds", type=int, default=None)
@click.option("--clusters", type=int, default=None)
@click.option("--method", type=click.Choice(list(engine_mod.METHODS)), default=None)
@click.option("--out", "out_dir", type=click.Path(), default=None)
@guarded
def run(config_path, seed, budget, rounds, clusters, method, out_dir):
    """Full closed loop on the harness world: generate, embed, cluster,
    optimize, retrieve, train/evaluate; write the round log and reports."""
    overrides = {
        "seed": seed, "budget": budget, "rounds": rounds,
        "clusters": clusters, "method": method, "out": out_dir,
    }
    cfg = load_run_config(config_path, overrides)
    _require(cfg.world is not None, "run needs a [world] table or paths.world")
    _require("out" in cfg.paths, "run needs paths.out (or --out)")
    out = cfg.paths["out"]
    out.mkdir(parents=True, exist_ok=True)

    world = World.generate(cfg.world)
    for key, dataset in (("real", world.real), ("syn", world.syn_pool), ("cal", world.cal)):
        if key in cfg.paths:
            scenes.write_jsonl(dataset, cfg.paths[key])

    if "embeddings" in cfg.paths and cfg.paths["embeddings"].exists():
        embeddings = read_embeddings_csv(cfg.paths["embeddings"])
    elif cfg.embedder == "encoder":
        merged = scenes.merge(world.real, world.syn_pool, world.cal)
        table = dict(cfg.encoder)
        settings = TrainSettings(
            steps=table.pop("steps", 60),
            batch_size=table.pop("batch_size", 8),
            learning_rate=table.pop("learning_rate", 1e-2),
            seed=table.pop("seed", cfg.engine.seed),
        )
        enc_config = EncoderConfig(
            **{"t_len": cfg.world.t_len, "t_hist": cfg.world.t_hist,
               "t_fut": cfg.world.t_fut, **table}
        )
        model, _ = train_encoder(merged, enc_config, settings)
        import torch

        from autoscale.encoder import GraphTensors

        embeddings = {}
        with torch.no_grad():
            for token_id in sorted(merged.graphs):
                gt = GraphTensors.from_scene_graph(merged.graphs[token_id])
                embeddings[token_id] = model.scene_embedding(gt).numpy()
    else:
        embeddings = descriptor_embeddings(world.real, world.syn_pool, world.cal)
    write_embeddings_csv(out / "embeddings.csv", embeddings)

    oracle = GroundTruthOracle(world)
    clusters_state = engine_mod.prepare_clusters(embeddings, world.real, world.cal, cfg.engine)
    records = engine_mod.run(
        world.real, world.syn_pool, world.cal, oracle, cfg.engine, embeddings,
        log_path=out / "rounds.jsonl", cluster_state=clusters_state,
    )
    clusters_state.model.save(out / "cluster_model.json")
    reporting.write_report(
        records, clusters_state.model, out,
        embeddings=embeddings, assignments=clusters_state.assignments,
        budget=cfg.engine.budget,
    )
    click.echo(
        f"completed {len(records)} rounds (method={cfg.engine.method}); "
        f"overall {records[0].overall:.4f} -> {records[-1].overall:.4f}; outputs in {out}"
    )


@main.command()
@click.option("--dataset", "dataset_path", required=True, type=click.Path())
@click.option("--out", "out_dir", required=True, type=click.Path())
@guarded
def score(dataset_path, out_dir):
    """Batch-score dataset metrics fields: per-scene and aggregate CSV."""
    dataset = _load_dataset(dataset_path)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for token_id in sorted(dataset.metrics):
        s = dataset.metrics[token_id]
        rows.append((token_id, driving_metrics.pdms(s), driving_metrics.epdms(s)))
    with (out / "per_scene_scores.csv").open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["token_id", "pdms", "epdms"])
        for token_id, p, e in rows:
            writer.writerow([token_id, format(p, ".9g"), format(e, ".9g")])
    with (out / "aggregate_scores.csv").open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["scenes_scored", "scenes_without_metrics", "mean_pdms", "mean_epdms"])
        n = len(rows)
        writer.writerow(
            [
                n,
                len(dataset.tokens) - n,
                format(float(np.mean([r[1] for r in rows])) if n else 0.0, ".9g"),
                format(float(np.mean([r[2] for r in rows])) if n else 0.0, ".9g"),
            ]
        )
    click.echo(f"scored {len(rows)} scenes; wrote {out}")


@main.command()
@click.option("--log", "log_path", required=True, type=click.Path())
@click.option("--cluster-model", "model_path", required=True, type=click.Path())
@click.option("--embeddings", "emb_path", type=click.Path(), default=None)
@click.option("--budget", type=int, default=None)
@click.option("--out", "out_dir", required=True, type=click.Path())
@guarded
def report(log_path, model_path, emb_path, budget, out_dir):
    """Tabulate a round log: rounds.csv, clusters.csv, selection.csv, and a
    2-D PCA projection when embeddings are given. Never mutates the log."""
    records = engine_mod.load_round_log(log_path)
    model = ClusterModel.load(model_path)
    embeddings = read_embeddings_csv(emb_path) if emb_path else None
    assignments = None
    if embeddings is not None:
        ids = sorted(embeddings)
        labels = model.assign(np.asarray([embeddings[t] for t in ids]))
        assignments = {t: int(c) for t, c in zip(ids, labels)}
    written = reporting.write_report(
        records, model, out_dir, embeddings=embeddings, assignments=assignments, budget=budget
    )
    click.echo(f"wrote {', '.join(p.name for p in written)} to {out_dir}")


if __name__ == "__main__":
    main()
