"""End-to-end experiment runner: staged training, inference simulation,
metrics, baselines, and sweeps.

A run is a pure function of its RunConfig. Every random draw comes from
a stream derived as (seed, component, round, client), artifacts never
record wall-clock time, and floats are serialized by repr, so rerunning
a config reproduces its results record byte for byte.

Artifacts written under the output directory:
  config.json       the validated config echo
  results.json      the full results record (canonical JSON)
  training_log.jsonl  one line per (stage, round, client)
  model.json        the trained mixture, stamped with the config hash
  heatmap.csv       row-normalized routing matrix (+ sidecar manifest)
  FAILED            present only if the run aborted, with stage context
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import seeding
from .config import RunConfig, config_from_dict, config_hash
from .datasets import Dataset, Shard, gen_synthetic, load_cifar10, \
    partition_noniid
from .errors import ConfigError, NmoeError
from .federated import (FedRoundReport, Stage1Result, Stage2Result,
                        Stage3Result, classifier_round_bytes, fedavg,
                        stage1_fedce, stage1_fedsc, stage2_experts,
                        stage3_fedgate, stage3_rangate, stage3_rollgate,
                        _check_finite, _sgd_head_epoch)
from .metrics import EvalReport, evaluate_clients
from .moe import (GateParams, NmoeModel, init_gate_params, load_balance_loss,
                  moe_backward, moe_forward, save_model)
from .netsim import CostModel, InferenceResult, RoutingLog, export_heatmap, \
    local_ratio, simulate_inference
from .numerics import (MlpSpec, ParamSet, cross_entropy, forward,
                       grad_normalize, init_mlp_params, sgd_step, softmax)
from .seeding import derive_rng

# Round slots within the BASELINE component, so baseline streams never
# collide with each other or with pipeline streams.
_BASE_CENTRAL_INIT = 0   # client field selects fe / gate / expert slots
_BASE_CENTRAL_TRAIN = 1
_BASE_LOCAL_INIT = 2     # client field selects the client
_BASE_LOCAL_TRAIN = 3
_BASE_FEDAVG_INIT = 4
_BASE_FEDAVG_ROUND = 1000  # plus the round index


@dataclass(frozen=True)
class RunResult:
    """Everything a finished run produced, plus its serializable record."""

    config: RunConfig
    config_hash: str
    model: NmoeModel
    stage1: Stage1Result
    stage2: Stage2Result
    stage3: Stage3Result
    inference: InferenceResult
    evaluation: EvalReport
    baselines: dict | None = None

    @property
    def routing(self) -> RoutingLog:
        return self.inference.log

    def record(self) -> dict:
        stages = {
            "stage1": [_report_dict(r) for r in self.stage1.reports],
            "stage2": [_report_dict(r) for r in self.stage2.reports],
            "stage3": [_report_dict(r) for r in self.stage3.reports],
        }
        bytes_by_stage = {
            name: sum(r["bytes_sent"] for r in reports)
            for name, reports in stages.items()
        }
        bytes_by_stage["inference"] = \
            self.routing.bytes_out + self.routing.bytes_back
        bytes_by_stage["total"] = sum(bytes_by_stage.values())
        return {
            "config": self.config.to_dict(),
            "config_hash": self.config_hash,
            "stages": stages,
            "bytes": bytes_by_stage,
            "evaluation": self.evaluation.as_dict(),
            "routing": {
                "counts": self.routing.counts.tolist(),
                "bytes_out": self.routing.bytes_out,
                "bytes_back": self.routing.bytes_back,
                "total_decisions": self.routing.total,
                "local_ratio": local_ratio(self.routing),
            },
            "baselines": self.baselines,
        }


def _report_dict(report: FedRoundReport) -> dict:
    # wall_clock is deliberately dropped: records must be reproducible
    return {
        "stage": report.stage,
        "round": report.round_index,
        "participants": list(report.participants),
        "client_losses": {str(c): loss
                          for c, loss in sorted(report.client_losses.items())},
        "params_digest": report.params_digest,
        "bytes_sent": report.bytes_sent,
    }


def build_dataset(config: RunConfig) -> Dataset:
    d = config.data
    if d.source == "cifar10":
        return load_cifar10(d.path)
    return gen_synthetic(d.num_classes, d.dim, d.samples_per_class,
                         d.cluster_spread,
                         derive_rng(config.seed, seeding.DATA, 0, 0))


def build_shards(config: RunConfig, data: Dataset | None = None
                 ) -> list[Shard]:
    if data is None:
        data = build_dataset(config)
    d = config.data
    return partition_noniid(data, d.num_clients, d.tau, d.train_per_client,
                            d.test_per_client,
                            derive_rng(config.seed, seeding.DATA, 1, 0),
                            test_distribution=d.test_distribution)


def _pooled_train(shards) -> Dataset:
    features = np.concatenate([s.train.features for s in shards])
    labels = np.concatenate([s.train.labels for s in shards])
    return Dataset(features, labels, shards[0].train.num_classes)


def _run_stage1(config: RunConfig, shards) -> Stage1Result:
    s1 = config.stage1
    common = dict(rounds=s1.rounds, local_epochs=s1.local_epochs, lr=s1.lr,
                  seed=config.seed, batch_size=config.batch_size,
                  bytes_per_scalar=config.bytes_per_scalar)
    if s1.method == "fedce":
        return stage1_fedce(shards, config.model.fe_spec(),
                            config.model.expert_spec(), **common)
    return stage1_fedsc(shards, config.model.fe_spec(),
                        aug_spec=s1.aug_spec(),
                        dp_noise_std=s1.dp_noise_std, **common)


def _run_stage3(config: RunConfig, shards, fe_params: ParamSet,
                experts) -> Stage3Result:
    s3 = config.stage3
    m = config.data.num_clients
    if s3.method == "rangate":
        return stage3_rangate(np.full(m, 1.0 / m))
    # scale 0 leaves early routing to the exploration noise, which keeps
    # the router from collapsing onto whichever experts init favored
    gate_init = init_gate_params(
        config.model.latent_dim, m, config.model.gate_noise_std,
        derive_rng(config.seed, seeding.INIT, seeding.INIT_GATE, 0),
        scale=0.0)
    if s3.method == "rollgate":
        return stage3_rollgate(
            shards, config.model.fe_spec(), fe_params, gate_init,
            p=s3.pseudo_ratio, epochs_per_client=s3.epochs_per_client,
            max_passes=s3.max_passes, lr=s3.lr, seed=config.seed,
            batch_size=config.batch_size,
            bytes_per_scalar=config.bytes_per_scalar)
    return stage3_fedgate(
        shards, config.model.fe_spec(), fe_params,
        config.model.expert_spec(), experts, gate_init,
        rounds=s3.rounds, local_epochs=s3.local_epochs, lr=s3.lr,
        lambda_load=s3.lambda_load, client_fraction=s3.client_fraction,
        grad_max_norm=s3.grad_max_norm, k=config.k, seed=config.seed,
        batch_size=config.batch_size,
        bytes_per_scalar=config.bytes_per_scalar)


def _cost_model(config: RunConfig) -> CostModel:
    return CostModel(latent_dim=config.model.latent_dim,
                     num_classes=config.data.num_classes,
                     bytes_per_scalar=config.bytes_per_scalar)


def _write_failed(out: Path | None, stage: str, error: Exception) -> None:
    if out is None:
        return
    marker = {"stage": stage,
              "category": getattr(error, "category", "error"),
              "message": str(error)}
    (out / "FAILED").write_text(json.dumps(marker, indent=2) + "\n")


def run_pipeline(config: RunConfig, *, with_baselines: bool = False
                 ) -> RunResult:
    """Train all three stages, simulate inference, and evaluate.

    Artifacts go under config.output_dir when it is set; with
    output_dir None the run is purely in-memory. Any stage failure
    leaves a FAILED marker naming the stage beside whatever artifacts
    were already written, then propagates the error.
    """
    h = config_hash(config)
    out = Path(config.output_dir) if config.output_dir else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        failed = out / "FAILED"
        if failed.exists():
            failed.unlink()
        (out / "config.json").write_text(
            json.dumps(config.to_dict(), sort_keys=True, indent=2) + "\n")

    stage = "data"
    try:
        shards = build_shards(config)
        stage = "stage1"
        stage1 = _run_stage1(config, shards)
        stage = "stage2"
        # experts start fresh for every stage-1 method: warm-starting from
        # the FedCE heads would hand FedCE extra head epochs that the
        # head-free FedSC run can never match
        stage2 = stage2_experts(
            shards, config.model.fe_spec(), stage1.fe_params,
            config.model.expert_spec(), epochs=config.stage2.epochs,
            lr=config.stage2.lr, seed=config.seed,
            batch_size=config.batch_size)
        stage = "stage3"
        stage3 = _run_stage3(config, shards, stage1.fe_params,
                             stage2.experts)
        stage = "inference"
        model = NmoeModel(fe_spec=config.model.fe_spec(),
                          fe_params=stage1.fe_params,
                          gate=stage3.gate,
                          expert_spec=config.model.expert_spec(),
                          experts=stage2.experts)
        inference = simulate_inference(
            model, shards, config.k, _cost_model(config),
            rng=derive_rng(config.seed, seeding.EVAL, 0, 0))
        stage = "metrics"
        evaluation = evaluate_clients(inference.predictions,
                                      inference.scores, inference.labels,
                                      config.data.num_classes)
        baselines = None
        if with_baselines:
            stage = "baselines"
            baselines = run_baselines(config, shards)
    except NmoeError as exc:
        _write_failed(out, stage, exc)
        raise

    result = RunResult(config=config, config_hash=h, model=model,
                       stage1=stage1, stage2=stage2, stage3=stage3,
                       inference=inference, evaluation=evaluation,
                       baselines=baselines)
    if out is not None:
        _write_artifacts(result, out)
    return result


def _write_artifacts(result: RunResult, out: Path) -> None:
    record = result.record()
    (out / "results.json").write_text(
        json.dumps(record, sort_keys=True, indent=2) + "\n")
    with (out / "training_log.jsonl").open("w") as fh:
        for reports in (result.stage1.reports, result.stage2.reports,
                        result.stage3.reports):
            for report in reports:
                for client, loss in sorted(report.client_losses.items()):
                    fh.write(json.dumps(
                        {"stage": report.stage,
                         "round": report.round_index,
                         "client": client,
                         "loss": loss,
                         "round_bytes": report.bytes_sent},
                        sort_keys=True) + "\n")
    save_model(result.model, out / "model.json",
               extra={"config_hash": result.config_hash})
    export_heatmap(result.routing, out / "heatmap.csv", k=result.config.k,
                   seed=result.config.seed,
                   config_hash=result.config_hash)


# ---------------------------------------------------------------------------
# baselines

def _combined_spec(config: RunConfig) -> MlpSpec:
    """The end-to-end classifier: extractor topology with the expert
    stacked on top, as one network."""
    fe = config.model.fe_spec()
    expert = config.model.expert_spec()
    return MlpSpec(fe.widths + expert.widths[1:],
                   fe.activations + expert.activations)


def _inference_on_own_shard(params_by_client: dict, spec: MlpSpec,
                            shards, num_classes: int):
    """Evaluate per-client models locally: diagonal routing, no bytes."""
    m = len(shards)
    counts = np.zeros((m, m), dtype=np.int64)
    predictions, scores, labels = {}, {}, {}
    for shard in shards:
        c = shard.client_id
        logits = forward(spec, params_by_client[c], shard.test.features)
        predictions[c] = np.argmax(logits, axis=1)
        scores[c] = softmax(logits)
        labels[c] = shard.test.labels.copy()
        counts[c, c] = shard.test.num_samples
    report = evaluate_clients(predictions, scores, labels, num_classes)
    return report, RoutingLog(counts, 0, 0)


def _baseline_entry(report: EvalReport, log: RoutingLog,
                    training_bytes: int, losses) -> dict:
    return {
        "evaluation": report.as_dict(),
        "local_ratio": local_ratio(log),
        "routing": {"counts": log.counts.tolist(),
                    "bytes_out": log.bytes_out,
                    "bytes_back": log.bytes_back},
        "training_bytes": training_bytes,
        "losses": [float(v) for v in losses],
    }


def train_centralized_moe(config: RunConfig, shards
                          ) -> tuple[NmoeModel, list[float]]:
    """Jointly train extractor, gate, and experts on the pooled data with
    cross-entropy plus the load-balance penalty."""
    pooled = _pooled_train(shards)
    m = config.data.num_clients
    fe_spec = config.model.fe_spec()
    expert_spec = config.model.expert_spec()
    model = NmoeModel(
        fe_spec=fe_spec,
        fe_params=init_mlp_params(
            fe_spec, derive_rng(config.seed, seeding.BASELINE,
                                _BASE_CENTRAL_INIT, 0)),
        gate=init_gate_params(
            config.model.latent_dim, m, config.model.gate_noise_std,
            derive_rng(config.seed, seeding.BASELINE,
                       _BASE_CENTRAL_INIT, 1),
            scale=0.0),
        expert_spec=expert_spec,
        experts=tuple(
            init_mlp_params(expert_spec,
                            derive_rng(config.seed, seeding.BASELINE,
                                       _BASE_CENTRAL_INIT, 2 + e))
            for e in range(m)))
    lam = config.stage3.lambda_load
    max_norm = config.stage3.grad_max_norm
    rng = derive_rng(config.seed, seeding.BASELINE, _BASE_CENTRAL_TRAIN, 0)
    n = pooled.num_samples
    losses = []
    for epoch in range(config.baselines.epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, config.batch_size):
            rows = order[start:start + config.batch_size]
            fwd = moe_forward(model, pooled.features[rows], config.k,
                              mode="train", rng=rng)
            ce, dlogits = cross_entropy(fwd.logits, pooled.labels[rows])
            lb, dlb = load_balance_loss(fwd.gate_probs)
            grads = moe_backward(model, fwd, dlogits, lam * dlb)
            model = NmoeModel(
                fe_spec=fe_spec,
                fe_params=sgd_step(model.fe_params,
                                   grad_normalize(grads.fe, max_norm),
                                   config.baselines.lr),
                gate=GateParams(
                    params=sgd_step(model.gate.params,
                                    grad_normalize(grads.gate, max_norm),
                                    config.baselines.lr),
                    noise_std=model.gate.noise_std),
                expert_spec=expert_spec,
                experts=tuple(
                    sgd_step(p, grad_normalize(g, max_norm),
                             config.baselines.lr)
                    for p, g in zip(model.experts, grads.experts)))
            total += (ce + lam * lb) * rows.size
        loss = total / n
        _check_finite(loss, "baseline_centralized_moe", 0, epoch)
        losses.append(float(loss))
    return model, losses


def run_baselines(config: RunConfig, shards=None) -> dict:
    """The three reference systems, evaluated exactly like the pipeline:
    a centralized mixture on pooled data, purely local classifiers, and
    a federated average of the full classifier."""
    if shards is None:
        shards = build_shards(config)
    num_classes = config.data.num_classes
    spec = _combined_spec(config)
    m = len(shards)

    central_model, central_losses = train_centralized_moe(config, shards)
    central_inference = simulate_inference(
        central_model, shards, config.k, _cost_model(config),
        rng=derive_rng(config.seed, seeding.EVAL, 1, 0))
    central_report = evaluate_clients(
        central_inference.predictions, central_inference.scores,
        central_inference.labels, num_classes)

    local_params = {}
    local_losses = []
    for shard in shards:
        c = shard.client_id
        params = init_mlp_params(
            spec, derive_rng(config.seed, seeding.BASELINE,
                             _BASE_LOCAL_INIT, c))
        rng = derive_rng(config.seed, seeding.BASELINE,
                         _BASE_LOCAL_TRAIN, c)
        loss = float("nan")
        for epoch in range(config.baselines.epochs):
            params, loss = _sgd_head_epoch(
                spec, params, shard.train.features, shard.train.labels,
                config.baselines.lr, config.batch_size, rng)
            _check_finite(loss, "baseline_local_classifier", c, epoch)
        local_params[c] = params
        local_losses.append(loss)
    local_report, local_log = _inference_on_own_shard(
        local_params, spec, shards, num_classes)

    sizes = [float(s.train.num_samples) for s in shards]
    global_params = init_mlp_params(
        spec, derive_rng(config.seed, seeding.BASELINE,
                         _BASE_FEDAVG_INIT, 0))
    fedavg_losses = []
    rounds = config.stage1.rounds
    for r in range(rounds):
        locals_p = []
        round_losses = []
        for shard in shards:
            rng = derive_rng(config.seed, seeding.BASELINE,
                             _BASE_FEDAVG_ROUND + r, 0)
            params = global_params
            loss = float("nan")
            for _ in range(config.stage1.local_epochs):
                params, loss = _sgd_head_epoch(
                    spec, params, shard.train.features, shard.train.labels,
                    config.stage1.lr, config.batch_size, rng)
                _check_finite(loss, "baseline_fedavg_classifier",
                              shard.client_id, r)
            locals_p.append(params)
            round_losses.append(loss)
        global_params = fedavg(locals_p, sizes)
        fedavg_losses.append(float(np.mean(round_losses)))
    fedavg_report, fedavg_log = _inference_on_own_shard(
        {s.client_id: global_params for s in shards}, spec, shards,
        num_classes)
    fedavg_bytes = classifier_round_bytes(
        m, global_params.size(), config.bytes_per_scalar) * rounds

    return {
        "centralized_moe": _baseline_entry(
            central_report, central_inference.log, 0, central_losses),
        "local_classifier": _baseline_entry(
            local_report, local_log, 0, local_losses),
        "fedavg_classifier": _baseline_entry(
            fedavg_report, fedavg_log, fedavg_bytes, fedavg_losses),
    }


# ---------------------------------------------------------------------------
# sweeps

SWEEP_AXES = ("num_clients", "k", "tau")

_SWEEP_COLUMNS = ("axis", "value", "status", "config_hash",
                  "pooled_accuracy", "pooled_macro_f1", "pooled_macro_auc",
                  "client_mean_macro_f1", "local_ratio", "bytes_out",
                  "bytes_back", "training_bytes", "error")


def _sweep_config(config: RunConfig, axis: str, value) -> RunConfig:
    echo = config.to_dict()
    echo["output_dir"] = None
    if axis == "num_clients":
        echo["data"]["num_clients"] = value
    elif axis == "k":
        echo["k"] = value
    elif axis == "tau":
        echo["data"]["tau"] = value
    else:
        raise ConfigError(f"sweep axis must be one of {SWEEP_AXES}, "
                          f"got {axis!r}")
    return config_from_dict(echo)


def run_ablation(config: RunConfig, axis: str, values) -> list[dict]:
    """One full pipeline per value, all under the shared base seed.

    A failing grid point is recorded with its error and the sweep
    continues; every row carries the derived config's hash.
    """
    if axis not in SWEEP_AXES:
        raise ConfigError(f"sweep axis must be one of {SWEEP_AXES}, "
                          f"got {axis!r}")
    values = list(values)
    if not values:
        raise ConfigError("sweep values must be nonempty")
    rows = []
    for value in values:
        row = {c: None for c in _SWEEP_COLUMNS}
        row.update(axis=axis, value=value)
        try:
            derived = _sweep_config(config, axis, value)
            row["config_hash"] = config_hash(derived)
            result = run_pipeline(derived)
            ev = result.evaluation
            row.update(
                status="ok",
                pooled_accuracy=ev.pooled_accuracy,
                pooled_macro_f1=ev.pooled_macro_f1,
                pooled_macro_auc=ev.pooled_macro_auc,
                client_mean_macro_f1=ev.client_mean_macro_f1,
                local_ratio=local_ratio(result.routing),
                bytes_out=result.routing.bytes_out,
                bytes_back=result.routing.bytes_back,
                training_bytes=sum(
                    r.bytes_sent for reports in
                    (result.stage1.reports, result.stage2.reports,
                     result.stage3.reports) for r in reports))
        except NmoeError as exc:
            row.update(status="failed",
                       error=f"{exc.category}: {exc}")
        rows.append(row)
    return rows


def write_sweep_csv(rows, path) -> None:
    def fmt(value):
        if value is None:
            return ""
        if isinstance(value, float):
            return f"{value:.6f}"
        return str(value)

    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(_SWEEP_COLUMNS)
        for row in rows:
            writer.writerow([fmt(row[c]) for c in _SWEEP_COLUMNS])
