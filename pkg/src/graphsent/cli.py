"""Command-line pipeline: ingest, train, stack, evaluate, glmm, pipeline.

Exit codes: 0 success, 1 computational failure (divergence, separation),
2 input error.  Set GRAPHSENT_LOG=INFO (or DEBUG) for progress logging.
"""

import csv
import dataclasses
import functools
import logging
import os
import sys
from pathlib import Path

import click
import numpy as np

from . import calibrate, gat, glmm, graph, metrics
from .config import LABEL_SOURCES, load_config
from .corpus import (School, SentimentLabel, collapse_scores, gold_label_vector,
                     labeled_counts, load_edges, load_embeddings, load_messages,
                     load_scores, make_splits)
from .errors import ComputationError, InputError

log = logging.getLogger("graphsent")


def _setup_logging():
    level = os.environ.get("GRAPHSENT_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")


def _handle_errors(fn):
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except InputError as exc:
            click.echo(f"input error: {exc}", err=True)
            sys.exit(2)
        except ComputationError as exc:
            click.echo(f"computation failed: {exc}", err=True)
            sys.exit(1)
    return wrapper


def _load_pipeline_config(config_path, seed, output):
    cfg = load_config(config_path)
    if seed is not None:
        cfg.seed = seed
    if output is not None:
        cfg.output = Path(output)
    cfg.output.mkdir(parents=True, exist_ok=True)
    return cfg


def _load_corpus(cfg, need_embeddings=True, need_scores=True):
    names = ["messages", "edges"]
    if need_embeddings:
        names.append("embeddings")
    if need_scores:
        names.append("scores")
    cfg.require_paths(*names)
    messages, id_map = load_messages(cfg.messages)
    edges = load_edges(cfg.edges, id_map)
    g = graph.build_graph(edges, len(messages))
    embeddings = scores = None
    if need_embeddings:
        embeddings = load_embeddings(cfg.embeddings, n=len(messages))
    if need_scores:
        scores = load_scores(cfg.scores, n=len(messages))
    log.info("loaded %d messages, %d edge rows", len(messages), len(edges))
    return messages, id_map, edges, g, embeddings, scores


_config_option = click.option("--config", "config_path", required=True,
                              type=click.Path(), help="pipeline INI file")
_seed_option = click.option("--seed", type=int, default=None,
                            help="override [run] seed")
_output_option = click.option("--output", type=click.Path(), default=None,
                              help="override output directory")


@click.group()
def cli():
    """Graph-sentiment analysis pipeline."""
    _setup_logging()


# ---------------------------------------------------------------------------


def _print_label_table(messages):
    counts = labeled_counts(messages)
    click.echo("labeled cases per school-year (non-negative / negative / total):")
    year_totals = {2019: [0, 0], 2020: [0, 0]}
    for school in School:
        for year in (2019, 2020):
            cell = counts.get((school, year))
            if cell is None:
                continue
            nn = cell[SentimentLabel.NON_NEGATIVE]
            neg = cell[SentimentLabel.NEGATIVE]
            year_totals[year][0] += nn
            year_totals[year][1] += neg
            click.echo(f"  {school.token:10s} {year}  {nn:5d} {neg:5d} {nn + neg:6d}")
    for year in (2019, 2020):
        nn, neg = year_totals[year]
        click.echo(f"  {'total':10s} {year}  {nn:5d} {neg:5d} {nn + neg:6d}")


@cli.command()
@_config_option
@_seed_option
@_output_option
@_handle_errors
def ingest(config_path, seed, output):
    """Load and validate all inputs; print corpus summaries."""
    cfg = _load_pipeline_config(config_path, seed, output)
    messages, id_map, edges, g, embeddings, scores = _load_corpus(cfg)
    click.echo(f"total messages: {len(messages)}")
    click.echo(f"edge rows: {len(edges)}")
    click.echo(f"graph neighbor pairs: {g.num_neighbor_pairs}")
    hist = graph.degree_histogram(g)
    top = sorted(hist.items())[:10]
    click.echo("degree histogram (first 10): " + ", ".join(f"{d}:{c}" for d, c in top))
    click.echo(f"embedding dimension: {embeddings.shape[1]}")
    _print_label_table(messages)
    with (cfg.output / "idmap.csv").open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["original_id", "node_id"])
        for orig, dense in id_map.items():
            writer.writerow([orig, dense])
    counts = labeled_counts(messages)
    with (cfg.output / "labeled_counts.csv").open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["school", "year", "non_negative", "negative", "total"])
        for (school, year), cell in sorted(counts.items(),
                                           key=lambda kv: (kv[0][0].token, kv[0][1])):
            nn = cell[SentimentLabel.NON_NEGATIVE]
            neg = cell[SentimentLabel.NEGATIVE]
            writer.writerow([school.token, year, nn, neg, nn + neg])
    click.echo(f"wrote {cfg.output / 'idmap.csv'} and {cfg.output / 'labeled_counts.csv'}")


# ---------------------------------------------------------------------------


def _train_labels(messages, splits):
    """Per-node y vector with labels revealed on the gat_train set only."""
    y_gold = gold_label_vector(messages)
    y = np.full(len(messages), -1, dtype=np.int64)
    y[splits.gat_train] = y_gold[splits.gat_train]
    return y


@cli.command()
@_config_option
@_seed_option
@_output_option
@click.option("--lambda-grid", default=None,
              help="comma-separated l2 penalties to cross-validate")
@_handle_errors
def train(config_path, seed, output, lambda_grid):
    """Train the graph-attention classifier; write checkpoint and loss trace."""
    cfg = _load_pipeline_config(config_path, seed, output)
    messages, _, _, g, embeddings, _ = _load_corpus(cfg, need_scores=False)
    splits = make_splits(messages, cfg.split_spec())
    y = _train_labels(messages, splits)
    gat_cfg = cfg.gat_config(embeddings.shape[1])

    if lambda_grid:
        try:
            grid = [float(v) for v in lambda_grid.split(",") if v.strip()]
        except ValueError:
            raise InputError(f"cannot parse --lambda-grid {lambda_grid!r}") from None
        best, fold_scores = gat.cross_validate_lambda(g, embeddings, y, grid, gat_cfg)
        with (cfg.output / "cv_scores.csv").open("w", newline="") as fh:
            fh.write(f"# seed={cfg.seed}\n")
            writer = csv.writer(fh)
            writer.writerow(["l2_penalty", "fold", "score"])
            for lam in sorted(fold_scores):
                for fold, score in enumerate(fold_scores[lam]):
                    writer.writerow([repr(lam), fold, repr(score)])
        click.echo(f"cross-validated l2_penalty: {best}")
        gat_cfg = dataclasses.replace(gat_cfg, l2_penalty=best)

    params, trace = gat.train(g, embeddings, y, gat_cfg)
    checkpoint = cfg.output / "gat_checkpoint.bin"
    gat.save_checkpoint(checkpoint, params, gat_cfg)
    with (cfg.output / "loss_trace.csv").open("w", newline="") as fh:
        fh.write(f"# seed={cfg.seed}\n")
        writer = csv.writer(fh)
        writer.writerow(["epoch", "loss"])
        for epoch, value in enumerate(trace):
            writer.writerow([epoch, repr(value)])
    click.echo(f"final training loss: {trace[-1]:.6f}")
    click.echo(f"wrote {checkpoint}")


# ---------------------------------------------------------------------------


def _frequency_table(messages, records):
    """Table-4 layout: per school-year stacked-label frequencies."""
    by_node = {rec.node_id: rec for rec in records}
    cells = {}
    for msg in messages:
        rec = by_node[msg.node_id]
        cell = cells.setdefault((msg.school, msg.year), [0, 0])
        if rec.label is SentimentLabel.NEGATIVE:
            cell[0] += 1
        else:
            cell[1] += 1
    rows = []
    totals = {2019: [0, 0], 2020: [0, 0]}
    for school in School:
        for year in (2019, 2020):
            if (school, year) not in cells:
                continue
            neg, nn = cells[(school, year)]
            totals[year][0] += neg
            totals[year][1] += nn
            rows.append((school.token, year, neg, nn))
    for year in (2019, 2020):
        neg, nn = totals[year]
        if neg + nn:
            rows.append(("total", year, neg, nn))
    return rows


@cli.command()
@_config_option
@_seed_option
@_output_option
@_handle_errors
def stack(config_path, seed, output):
    """Calibrate cutoffs, fit the stacking meta-model, label every message."""
    cfg = _load_pipeline_config(config_path, seed, output)
    messages, _, _, g, embeddings, scores = _load_corpus(cfg)
    checkpoint = cfg.output / "gat_checkpoint.bin"
    if not checkpoint.exists():
        raise InputError(f"checkpoint not found: {checkpoint} (run `train` first)")
    params, gat_cfg = gat.load_checkpoint(checkpoint)

    p1 = collapse_scores(scores)
    p2 = gat.predict(g, embeddings, params, gat_cfg)
    X = np.column_stack([p1, p2])

    splits = make_splits(messages, cfg.split_spec())
    y_gold = gold_label_vector(messages)
    stacker = calibrate.StackedClassifier()
    stacker.fit(X[splits.stack_train], y_gold[splits.stack_train])
    log.info("cutoffs: baseline %.4f, gat %.4f", stacker.cutoff_1_, stacker.cutoff_2_)

    records = stacker.decision_records(np.arange(len(messages)), X)
    predictions = cfg.output / "predictions.csv"
    calibrate.write_predictions(predictions, records, seed=cfg.seed)
    calibrate.write_meta_model(cfg.output / "meta_model.txt", stacker.meta_,
                               stacker.cutoff_1_, stacker.cutoff_2_, seed=cfg.seed)

    freq = _frequency_table(messages, records)
    with (cfg.output / "label_frequencies.csv").open("w", newline="") as fh:
        fh.write(f"# seed={cfg.seed}\n")
        writer = csv.writer(fh)
        writer.writerow(["school", "year", "negative", "non_negative", "total",
                         "pct_negative"])
        for school, year, neg, nn in freq:
            total = neg + nn
            writer.writerow([school, year, neg, nn, total,
                             f"{100.0 * neg / total:.2f}"])
    click.echo(f"cutoff baseline: {stacker.cutoff_1_:.4f}")
    click.echo(f"cutoff gat: {stacker.cutoff_2_:.4f}")
    click.echo(f"meta-model coefficients: ({stacker.meta_.beta0:.4f}, "
               f"{stacker.meta_.beta1:.4f}, {stacker.meta_.beta2:.4f})")
    click.echo(f"wrote {predictions}")


# ---------------------------------------------------------------------------

MODEL_SOURCES = {
    "baseline": lambda rec: rec.p_scaled_1 >= 0.5,
    "gat": lambda rec: rec.p_scaled_2 >= 0.5,
    "stacked": lambda rec: rec.label is SentimentLabel.NON_NEGATIVE,
}

_METRIC_ROWS = ("car", "f1", "precision", "recall", "specificity")


def _fmt(value):
    return "" if value is None else f"{value:.3f}"


def _metrics_table(messages, records, test_ids, source):
    """Per school-year metric suites for one model plus pooled/mean overall."""
    by_node = {rec.node_id: rec for rec in records}
    msg_by_node = {msg.node_id: msg for msg in messages}
    cells = {}
    for node in test_ids:
        msg = msg_by_node[int(node)]
        gold = msg.gold_label
        if gold is None:
            raise InputError(f"test node {node} has no gold label")
        pred = 1 if MODEL_SOURCES[source](by_node[int(node)]) else 0
        cells.setdefault((msg.school, msg.year), []).append((gold.to_binary(), pred))

    suites = {}
    pooled = None
    for key, pairs in cells.items():
        gold, pred = zip(*pairs)
        cm = metrics.confusion(gold, pred)
        suites[key] = metrics.metric_suite(cm)
        pooled = cm if pooled is None else pooled + cm
    overall = metrics.metric_suite(pooled)
    means = {}
    for name in _METRIC_ROWS:
        values = [getattr(s, name) for s in suites.values()]
        defined = [v for v in values if v is not None]
        means[name] = float(np.mean(defined)) if defined else None
    return suites, overall, means


def _write_metrics_report(path, suites, overall, means, seed):
    schools = [s.token for s in School]
    with Path(path).open("w", newline="") as fh:
        fh.write(f"# seed={seed}\n")
        writer = csv.writer(fh)
        writer.writerow(["metric", "year"] + schools + ["overall", "mean"])
        for name in _METRIC_ROWS:
            for idx, year in enumerate((2019, 2020)):
                row = [name, year]
                for school in School:
                    suite = suites.get((school, year))
                    row.append(_fmt(getattr(suite, name)) if suite else "")
                # overall/mean printed once per metric, on the 2019 line
                row.append(_fmt(getattr(overall, name)) if idx == 0 else "")
                row.append(_fmt(means[name]) if idx == 0 else "")
                writer.writerow(row)


@cli.command()
@_config_option
@_seed_option
@_output_option
@_handle_errors
def evaluate(config_path, seed, output):
    """Score baseline, GAT, and stacked labels on the held-out test split."""
    cfg = _load_pipeline_config(config_path, seed, output)
    messages, _, _, _, _, _ = _load_corpus(cfg, need_embeddings=False,
                                           need_scores=False)
    records = calibrate.read_predictions(cfg.output / "predictions.csv")
    splits = make_splits(messages, cfg.split_spec())
    if splits.test.size == 0:
        raise InputError("test split is empty")
    for source in ("stacked", "gat", "baseline"):
        suites, overall, means = _metrics_table(messages, records, splits.test, source)
        path = cfg.output / f"metrics_{source}.csv"
        _write_metrics_report(path, suites, overall, means, cfg.seed)
        click.echo(f"{source}: overall car={_fmt(overall.car)} f1={_fmt(overall.f1)} "
                   f"precision={_fmt(overall.precision)} recall={_fmt(overall.recall)} "
                   f"specificity={_fmt(overall.specificity)}")
        click.echo(f"wrote {path}")


# ---------------------------------------------------------------------------


def _rows_from_predictions(cfg, source):
    messages, _, _, _, _, _ = _load_corpus(cfg, need_embeddings=False,
                                           need_scores=False)
    records = calibrate.read_predictions(cfg.output / "predictions.csv")
    decide = MODEL_SOURCES[source]
    labels = {rec.node_id: 1 if decide(rec) else 0 for rec in records}
    return glmm.sufficient_stats(messages, labels)


def _report_fit(fh_rows, model_name, fit):
    lines = [f"{model_name}: sigma_school={fit.sigma:.4f} loglik={fit.loglik:.2f} "
             f"method={fit.method}" + (" (boundary)" if fit.boundary else "")]
    for effect in glmm.odds_ratios(fit):
        lines.append(f"  {effect.factor:15s} OR_negative={effect.odds_ratio:.3f} "
                     f"p={effect.p_value:.4g}")
        fh_rows.append([model_name, effect.factor, repr(effect.estimate),
                        repr(effect.se), repr(effect.odds_ratio),
                        repr(effect.p_value)])
    return lines


@cli.command(name="glmm")
@_config_option
@_seed_option
@_output_option
@click.option("--rows", "rows_path", type=click.Path(), default=None,
              help="fit directly from a GlmmRow CSV instead of predictions")
@click.option("--labels-from", type=click.Choice(LABEL_SOURCES), default=None,
              help="which predicted labels to aggregate (default: config)")
@click.option("--quad-nodes", type=int, default=None,
              help="adaptive Gauss-Hermite nodes (1 = Laplace)")
@_handle_errors
def glmm_cmd(config_path, seed, output, rows_path, labels_from, quad_nodes):
    """Fit the two mixed models and report negative-sentiment odds ratios."""
    cfg = _load_pipeline_config(config_path, seed, output)
    source = labels_from or cfg.labels_from
    nq = quad_nodes if quad_nodes is not None else cfg.quad_nodes
    if rows_path:
        rows = glmm.load_rows(rows_path)
    else:
        rows = _rows_from_predictions(cfg, source)
        glmm.write_rows(cfg.output / f"glmm_rows_{source}.csv", rows)

    fit1 = glmm.fit_glmm(rows, ("intercept", "type_private", "location_small",
                                "year"), quad_nodes=nq)
    rows_2020 = [r for r in rows if r.year == 1]
    fit2 = glmm.fit_glmm(rows_2020, ("intercept", "type_private", "location_small",
                                     "in_person"), quad_nodes=nq)
    report_rows = []
    lines = _report_fit(report_rows, "pandemic_effect", fit1)
    lines += _report_fit(report_rows, "in_person_effect_2020", fit2)
    suffix = "" if rows_path else f"_{source}"
    report = cfg.output / f"glmm_report{suffix}.csv"
    with report.open("w", newline="") as fh:
        fh.write(f"# seed={cfg.seed} labels={source if not rows_path else 'file'}\n")
        writer = csv.writer(fh)
        writer.writerow(["model", "factor", "estimate", "se", "or_negative", "p"])
        writer.writerows(report_rows)
    click.echo("\n".join(lines))
    click.echo(f"wrote {report}")


# ---------------------------------------------------------------------------


@cli.command()
@_config_option
@_seed_option
@_output_option
@click.option("--lambda-grid", default=None,
              help="comma-separated l2 penalties to cross-validate")
@click.option("--quad-nodes", type=int, default=None)
@_handle_errors
def pipeline(config_path, seed, output, lambda_grid, quad_nodes):
    """Run ingest, train, stack, evaluate, and glmm in sequence."""
    ctx = click.get_current_context()
    common = {"config_path": config_path, "seed": seed, "output": output}
    ctx.invoke(ingest, **common)
    ctx.invoke(train, lambda_grid=lambda_grid, **common)
    ctx.invoke(stack, **common)
    ctx.invoke(evaluate, **common)
    ctx.invoke(glmm_cmd, rows_path=None, labels_from=None,
               quad_nodes=quad_nodes, **common)


def main():
    cli(prog_name="graphsent")


if __name__ == "__main__":
    main()
