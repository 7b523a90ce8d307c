"""Round-based orchestration of every training mode, evaluation and metric logging.

Rounds are bulk-synchronous: all devices take their local step, parameters
are snapshotted, every device aggregates from the snapshots, then devices are
evaluated. Results do not depend on how local steps are scheduled across
threads.
"""

import csv
import io
import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from dbcd import data as data_mod
from dbcd.baselines import TrainingDiverged, sgd_epoch
from dbcd.config import ExperimentConfig, dump_config
from dbcd.model import AuxState, LocalDataset, MlpParams, device_objective, empirical_risk, forward, init_state, relu
from dbcd.network import DeviceGraph, aggregate, build_random_graph, neighbor_weights, select_neighbors
from dbcd.numerics import seeded_rng
from dbcd.solver import device_bcd_iteration

logger = logging.getLogger(__name__)

CSV_HEADER = ["round", "device", "split", "acc", "mpre", "mrec", "objective", "elapsed_ms"]
BUDGET_COLUMNS = ["hour", "n_train", "aggregations"]
GLOBAL = "GLOBAL"


# --------------------------------------------------------------------- metrics

@dataclass
class Metrics:
    acc: float
    mpre: float
    mrec: float
    precision: float
    recall: float
    confusion: np.ndarray
    undefined_classes: tuple = ()


def metrics_from_confusion(confusion):
    """Accuracy, macro precision/recall and positive-class precision/recall.

    Rows of ``confusion`` are true classes. A class with no predictions (or
    no true samples) contributes 0 to the macro precision (recall) and is
    listed in ``undefined_classes``.
    """
    confusion = np.asarray(confusion, dtype=np.float64)
    total = confusion.sum()
    tp = np.diag(confusion)
    pred = confusion.sum(axis=0)
    true = confusion.sum(axis=1)
    prec = np.divide(tp, pred, out=np.zeros_like(tp), where=pred > 0)
    rec = np.divide(tp, true, out=np.zeros_like(tp), where=true > 0)
    undefined = tuple(int(c) for c in np.flatnonzero((pred == 0) | (true == 0)))
    pos = 1 if confusion.shape[0] > 1 else 0
    return Metrics(
        acc=float(tp.sum() / total) if total else 0.0,
        mpre=float(prec.mean()),
        mrec=float(rec.mean()),
        precision=float(prec[pos]),
        recall=float(rec[pos]),
        confusion=confusion.astype(np.int64),
        undefined_classes=undefined,
    )


def predict(params, x):
    """Argmax of the logits; ties go to the lowest class, non-finite logits lose."""
    with np.errstate(all="ignore"):
        logits = forward(params, x)
    logits = np.where(np.isfinite(logits), logits, -np.inf)
    return logits.argmax(axis=0)


def evaluate(params, data, n_classes=None):
    if data.n_samples == 0:
        raise ValueError("cannot evaluate on an empty split")
    k = n_classes or params.layer_dims[-1]
    pred = predict(params, data.x)
    confusion = np.zeros((k, k), dtype=np.int64)
    np.add.at(confusion, (data.y, pred), 1)
    return metrics_from_confusion(confusion)


# -------------------------------------------------------------------- logging

@dataclass
class MetricsLog:
    rows: list = field(default_factory=list)
    extra_columns: list = field(default_factory=list)
    summary: dict = field(default_factory=dict)

    def append(self, **row):
        self.rows.append(row)

    def select(self, device=GLOBAL, split="test"):
        return [r for r in self.rows if r["device"] == device and r["split"] == split]

    def final(self, device=GLOBAL, split="test", key="acc"):
        rows = self.select(device, split)
        return rows[-1][key] if rows else float("nan")

    def curve(self, device=GLOBAL, split="test", key="acc"):
        return [r[key] for r in self.select(device, split)]

    def to_csv(self, path=None):
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        header = CSV_HEADER + self.extra_columns
        writer.writerow(header)
        for r in self.rows:
            writer.writerow([_fmt(r[c]) for c in header])
        text = buf.getvalue()
        if path is not None:
            Path(path).write_text(text)
        return text


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return str(v)


# ------------------------------------------------------------------- the core

@dataclass
class ModelSlot:
    params: MlpParams
    aux: AuxState = None
    diverged: bool = False


def _device_rng(seed, device):
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), int(device)])))


def extend_state(params, aux, data):
    """Forward-pass columns for samples appended after ``aux`` was built."""
    have = aux.v[0].shape[1]
    if have == data.n_samples:
        return aux
    if have > data.n_samples:
        return init_state(params, data)
    fresh = init_state(params, LocalDataset(data.x[:, have:], data.y[have:]))
    return AuxState(
        [np.concatenate([a, b], axis=1) for a, b in zip(aux.v, fresh.v)],
        [np.concatenate([a, b], axis=1) for a, b in zip(aux.u, fresh.u)],
    )


class Federation:
    """Training state for every device (or the single central model) plus the round logic."""

    def __init__(self, cfg, train_sets, profiles, graph, input_dim, n_classes):
        self.cfg = cfg
        self.hyper = cfg.bcd_hyper()
        self.agg_cfg = cfg.aggregation_config()
        self.centralized = cfg.mode in ("csgd", "cbcd")
        self.uses_bcd = cfg.mode in ("cbcd", "ibcd", "dbcd")
        self.n_devices = len(train_sets)
        self.layer_dims = [input_dim] + [cfg.hidden_dim] * (cfg.layers - 1) + [n_classes]
        self.graph = graph
        m = 0 if (self.centralized or cfg.mode == "ibcd" or cfg.aggregation == "off") else cfg.neighbors
        self.neighbors = [select_neighbors(graph, a, m) for a in range(self.n_devices)]
        self.weights = [neighbor_weights(profiles, a, nb, self.agg_cfg) for a, nb in enumerate(self.neighbors)]
        self.aggregations = [0] * self.n_devices
        self.train_sets = list(train_sets)
        n_models = 1 if self.centralized else self.n_devices
        self.slots = []
        for a in range(n_models):
            stream = 0 if cfg.shared_init else a
            params = MlpParams.random(self.layer_dims, _device_rng(cfg.seed_init, stream), cfg.init)
            aux = init_state(params, self.model_train(a)) if self.uses_bcd and self.model_train(a).n_samples else None
            self.slots.append(ModelSlot(params, aux))
        self.history = [[s.params for s in self.slots]]
        self.round = 0

    # data ---------------------------------------------------------------
    def model_train(self, k):
        if self.centralized:
            return LocalDataset.concat(self.train_sets)
        return self.train_sets[k]

    def set_train(self, device_sets):
        """Swap in new training splits; BCD state grows by forward pass for new samples."""
        self.train_sets = list(device_sets)
        if not self.uses_bcd:
            return
        for k, slot in enumerate(self.slots):
            data = self.model_train(k)
            if data.n_samples == 0:
                slot.aux = None
            elif slot.aux is None:
                slot.aux = init_state(slot.params, data)
            else:
                slot.aux = extend_state(slot.params, slot.aux, data)

    def params_for_device(self, a):
        return self.slots[0 if self.centralized else a].params

    # round --------------------------------------------------------------
    def _local(self, k):
        slot = self.slots[k]
        data = self.model_train(k)
        if data.n_samples == 0 or slot.diverged:
            return slot
        if self.uses_bcd:
            params, aux, _ = device_bcd_iteration(slot.params, slot.aux, data, self.hyper, track=False)
            return ModelSlot(params, aux)
        sgd = self.cfg.sgd_config(shuffle_seed=self.cfg.seed_init * 1_000_003 + k)
        try:
            return ModelSlot(sgd_epoch(slot.params, data, sgd, epoch=self.round))
        except TrainingDiverged as exc:
            logger.warning("device %d diverged at round %d; freezing its model", k, self.round)
            return ModelSlot(exc.params, diverged=True)

    def _snapshot(self, a, b, current):
        cfg = self.cfg
        if cfg.share == "current":
            return current[b]
        lag = 0
        if cfg.staleness:
            rng = np.random.Generator(np.random.PCG64(
                np.random.SeedSequence([cfg.seed_graph, self.round, a, b])))
            lag = int(rng.integers(0, cfg.staleness + 1))
        hist = self.history[max(0, len(self.history) - 1 - lag)]
        return hist[b]

    def _shared(self, a, b, current):
        snap = self._snapshot(a, b, current)
        if not self.cfg.mask_shares or not self.neighbors[b]:
            return snap
        # b blends its parameters with its own neighbours before sending
        others = [(self._snapshot(b, c, current), 1.0) for c in self.neighbors[b]]
        return aggregate(snap, others, self.agg_cfg.__class__(0.5, "mean"))

    def step(self, pool=None):
        """One round: local steps, then aggregation from snapshots. Returns aggregation count."""
        self.round += 1
        ks = range(len(self.slots))
        new = list(pool.map(self._local, ks)) if pool is not None else [self._local(k) for k in ks]
        events = 0
        if not self.centralized:
            current = [s.params for s in new]
            for a, slot in enumerate(new):
                nb = self.neighbors[a]
                if not nb or self.cfg.mu == 0.0:
                    continue
                shared = [(self._shared(a, b, current), h) for b, h in zip(nb, self.weights[a])]
                shared = [(p, h) for p, h in shared if all(np.isfinite(w).all() for w in p.weights)]
                slot.params = aggregate(slot.params, shared, self.agg_cfg)
                self.aggregations[a] += 1
                events += 1
        self.slots = new
        self.history.append([s.params for s in new])
        keep = self.cfg.staleness + 2
        if len(self.history) > keep:
            self.history = self.history[-keep:]
        return events

    def objective(self, k):
        slot = self.slots[k]
        data = self.model_train(k)
        if data.n_samples == 0:
            return float("nan")
        if self.uses_bcd:
            return float(device_objective(slot.params, slot.aux, data, self.hyper))
        with np.errstate(all="ignore"):
            return float(empirical_risk(slot.params, data, "cross_entropy"))


# ------------------------------------------------------------- experiments

def build_dataset(cfg):
    d = cfg.data
    if d.source == "blobs":
        fed = data_mod.gen_blobs(
            d.devices, d.per_device, dims=d.dims, classes=d.classes,
            heterogeneity=d.heterogeneity, seed=cfg.seed_data, separation=d.separation,
            noise=d.noise, n_groups=d.n_groups, group_spread=d.group_spread,
        )
    else:
        samples = data_mod.load_idx(d.idx_images, d.idx_labels)
        if d.idx_limit:
            samples = samples.take(np.arange(min(d.idx_limit, samples.n_samples)))
        fed = data_mod.distribute_evenly(samples, d.devices, seed=cfg.seed_data, n_classes=10)
    if d.profiles_csv:
        profiles = data_mod.read_profiles_csv(d.profiles_csv)
        for dev, e in zip(fed.devices, profiles):
            dev.profile = e
    if d.sparsity_r < 100.0:
        fed = fed.map_train(lambda a, tr: data_mod.subsample(tr, d.sparsity_r, seed=cfg.seed_data * 1_000_003 + a))
    return fed


def build_graph(cfg, n_devices):
    g = cfg.graph
    if g.cost_csv:
        graph = DeviceGraph.from_csv(g.cost_csv)
        if graph.n_devices != n_devices:
            raise ValueError(f"cost matrix covers {graph.n_devices} devices, dataset has {n_devices}")
        return graph
    if n_devices == 1:
        return DeviceGraph(np.zeros((1, 1)))
    return build_random_graph(n_devices, g.max_degree, seeded_rng(cfg.seed_graph),
                              cost_range=(g.cost_low, g.cost_high), edge_prob=g.edge_prob)


class _Clock:
    def __init__(self, wall):
        self.wall = wall
        self.t0 = time.perf_counter()

    def ms(self, simulated=0):
        if self.wall:
            return int((time.perf_counter() - self.t0) * 1000)
        return int(simulated)


def _log_round(log, fedn, fed, rnd, elapsed, extra_for=None):
    for split in ("val", "test"):
        per = []
        for a, dev in enumerate(fed.devices):
            ds = getattr(dev, split)
            if ds.n_samples == 0:
                continue
            m = evaluate(fedn.params_for_device(a), ds, fed.n_classes)
            obj = fedn.objective(0 if fedn.centralized else a)
            row = dict(round=rnd, device=a, split=split, acc=m.acc, mpre=m.mpre, mrec=m.mrec,
                       objective=obj, elapsed_ms=elapsed)
            if extra_for:
                row.update(extra_for(a))
            log.append(**row)
            per.append(row)
        if per:
            row = dict(
                round=rnd, device=GLOBAL, split=split,
                acc=float(np.mean([r["acc"] for r in per])),
                mpre=float(np.mean([r["mpre"] for r in per])),
                mrec=float(np.mean([r["mrec"] for r in per])),
                objective=float(np.mean([r["objective"] for r in per])),
                elapsed_ms=elapsed,
            )
            if extra_for:
                row.update({k: _global_extra(per, k) for k in log.extra_columns})
            log.append(**row)


def _global_extra(rows, key):
    vals = [r[key] for r in rows]
    if key == "hour":
        return vals[0]
    return int(sum(vals))


def _finish(log, cfg, fed, rounds_run, started):
    log.summary = {
        "mode": cfg.mode,
        "rounds_run": rounds_run,
        "final": {
            split: {k: log.final(GLOBAL, split, k) for k in ("acc", "mpre", "mrec", "objective")}
            for split in ("val", "test")
        },
        "devices": len(fed),
        "wall_seconds": time.perf_counter() - started,
        "config": cfg.to_dict(),
    }
    return log


def run_experiment(cfg, fed=None, graph=None):
    """Train ``cfg.mode`` for up to ``cfg.rounds`` rounds, evaluating val/test every round.

    Stops early when GLOBAL validation accuracy has not improved by more than
    ``plateau_tol`` for ``patience`` rounds (``patience = 0`` disables this).
    """
    if cfg.budget.exchanges_per_hour:
        return run_budgeted_simulation(cfg, fed, graph)
    started = time.perf_counter()
    fed = fed if fed is not None else build_dataset(cfg)
    graph = graph if graph is not None else build_graph(cfg, len(fed))
    fedn = Federation(cfg, [d.train for d in fed.devices], fed.profiles, graph, fed.input_dim, fed.n_classes)
    log = MetricsLog()
    clock = _Clock(cfg.wall_clock)
    best, stale = -np.inf, 0
    pool = ThreadPoolExecutor(cfg.threads) if cfg.threads > 1 else None
    try:
        for rnd in range(1, cfg.rounds + 1):
            fedn.step(pool)
            _log_round(log, fedn, fed, rnd, clock.ms())
            val = log.final(GLOBAL, "val")
            if val > best + cfg.plateau_tol:
                best, stale = val, 0
            else:
                stale += 1
            if cfg.patience and stale >= cfg.patience:
                break
    finally:
        if pool is not None:
            pool.shutdown()
    return _finish(log, cfg, fed, rnd, started)


def run_budgeted_simulation(cfg, fed=None, graph=None):
    """Hour-by-hour run: hour T exposes the first ceil(N T / 10) training samples
    and allows ``exchanges_per_hour`` local-step + aggregation cycles."""
    per_hour = cfg.budget.exchanges_per_hour
    if not per_hour:
        return run_experiment(cfg, fed, graph)
    started = time.perf_counter()
    fed = fed if fed is not None else build_dataset(cfg)
    graph = graph if graph is not None else build_graph(cfg, len(fed))
    full = [d.train for d in fed.devices]
    fedn = Federation(cfg, [data_mod.available_at_hour(t, 1) for t in full], fed.profiles, graph,
                      fed.input_dim, fed.n_classes)
    log = MetricsLog(extra_columns=list(BUDGET_COLUMNS))
    clock = _Clock(cfg.wall_clock)
    ms_per_cycle = 3_600_000 / per_hour
    pool = ThreadPoolExecutor(cfg.threads) if cfg.threads > 1 else None
    rnd = 0
    try:
        for hour in range(1, cfg.budget.hours + 1):
            fedn.set_train([data_mod.available_at_hour(t, hour) for t in full])
            for _ in range(per_hour):
                fedn.step(pool)
                rnd += 1

            def extra(a, hour=hour):
                return {"hour": hour, "n_train": fedn.train_sets[a].n_samples,
                        "aggregations": fedn.aggregations[a]}
            _log_round(log, fedn, fed, rnd, clock.ms(rnd * ms_per_cycle), extra)
    finally:
        if pool is not None:
            pool.shutdown()
    _finish(log, cfg, fed, rnd, started)
    log.summary["aggregations_per_device"] = list(fedn.aggregations)
    return log


def sweep(base_cfg, key, values):
    """Independent runs differing only in the dotted config ``key``.

    Returns ``(logs, summary_rows)`` with one ``{"value", "final_test_acc"}`` row per value.
    """
    logs, summary = [], []
    for v in values:
        log = run_experiment(base_cfg.replace(**{key: v}))
        logs.append(log)
        summary.append({"value": v, "final_test_acc": log.final(GLOBAL, "test")})
    return logs, summary


def write_sweep_summary(path, key, summary):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow([key, "final_test_acc"])
        for row in summary:
            writer.writerow([row["value"], repr(float(row["final_test_acc"]))])


def write_run(log, cfg, out_dir, stem="metrics"):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    log.to_csv(out / f"{stem}.csv")
    (out / f"{stem}_summary.json").write_text(json.dumps(log.summary, indent=2, sort_keys=True, default=float) + "\n")
    dump_config(cfg, out / "config.json")
