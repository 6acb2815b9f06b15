"""FedAvg-style round loop with FedProx and FedGID local objectives.

Only ``ModelParams`` and scalar metrics cross the client/server boundary:
``local_update`` receives the broadcast params plus the client's own images
and returns new params plus a dict of floats.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import model as M
from .datagen import ClientPartition, ImageSet
from .distillation import DistillConfig, gd_loss_and_grads
from .intervention import InterventionConfig, interventional_feature, mix_features, sample_backgrounds

log = logging.getLogger(__name__)

ALGORITHMS = ("fedavg", "fedprox", "fedgid")


class TrainingDiverged(FloatingPointError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    num_rounds: int = 20
    num_clients: int = 5
    local_epochs: int = 5
    batch_size: int = 64
    lr: float = 0.005
    weight_decay: float = 0.01
    sample_fraction: float = 1.0
    seed: int = 0
    intervention: InterventionConfig = field(default_factory=InterventionConfig)
    distill: DistillConfig = field(default_factory=DistillConfig)
    beta: float = 0.1
    algorithm: str = "fedgid"
    fedprox_mu: float = 0.01
    checkpoint_every: int = 0
    eval_batch: int = 1000

    def __post_init__(self):
        if self.algorithm not in ALGORITHMS:
            raise ValueError(f"algorithm must be one of {ALGORITHMS}")
        if not 0.0 < self.sample_fraction <= 1.0:
            raise ValueError("sample_fraction must be in (0, 1]")
        if self.num_rounds < 0 or self.local_epochs < 0:
            raise ValueError("round and epoch counts must be non-negative")
        if self.num_clients < 1 or self.batch_size < 1:
            raise ValueError("num_clients and batch_size must be >= 1")
        if self.lr <= 0:
            raise ValueError("lr must be positive")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        d["intervention"] = InterventionConfig(**d["intervention"])
        d["distill"] = DistillConfig(**d["distill"])
        return cls(**d)

    @property
    def uses_gi(self) -> bool:
        return self.algorithm == "fedgid" and self.intervention.enabled

    @property
    def uses_gd(self) -> bool:
        return self.algorithm == "fedgid" and self.distill.lambda_gd > 0


@dataclass
class ClientMetrics:
    client_id: int
    loss_em: float
    loss_gi: float
    loss_gd: float
    loss_total: float
    num_samples: int


@dataclass
class RoundReport:
    round: int
    per_client: list[ClientMetrics]
    global_ood_accuracy: float

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, line: str) -> "RoundReport":
        d = json.loads(line)
        return cls(d["round"], [ClientMetrics(**c) for c in d["per_client"]], d["global_ood_accuracy"])


def _client_rngs(seed: int, round_idx: int, client_id: int):
    # independent streams so that turning GI on never perturbs batch order
    shuffle_ss, background_ss = np.random.SeedSequence([seed, round_idx, client_id]).spawn(2)
    return np.random.default_rng(shuffle_ss), np.random.default_rng(background_ss)


def fedgid_batch(local: M.ModelParams, global_params: M.ModelParams, xb: ImageSet,
                 config: TrainConfig, bg_rng: np.random.Generator | None = None):
    """Loss terms and parameter gradients of one local step.

    Returns ``(terms, grads)`` with terms ``{"em", "gi", "gd", "prox", "total"}``.
    With GI off and lambda = 0 this reduces to plain cross-entropy and takes
    exactly the FedAvg code path.
    """
    fwd = M.forward(local, xb.pixels)
    l_em, d_logits = M.softmax_cross_entropy(fwd.logits, xb.labels)
    terms = {"em": l_em, "gi": 0.0, "gd": 0.0, "prox": 0.0}
    d_feature = d_fmap = None
    extra: list[dict] = []

    gi = config.uses_gi and len(xb) >= 2
    if gi:
        icfg = config.intervention
        backgrounds, _ = sample_backgrounds(xb, bg_rng)
        if icfg.level == "GI_F":
            _, f_b = M.encode(global_params, backgrounds)
            mixed = mix_features(fwd.feature, f_b, icfg.alpha)
        else:
            fmap_b, _ = M.conv_stage(global_params, backgrounds)
            mixed = mix_features(fwd.feature_map, fmap_b, icfg.alpha)
        f_inv, tail_cache = interventional_feature(local, mixed, icfg.level)
        l_gi, d_z = M.softmax_cross_entropy(M.classify_feature(local, f_inv), xb.labels)
        terms["gi"] = l_gi
        head_g, d_f_inv = M.head_backward(local, f_inv, d_z)
        extra.append(head_g)
    else:
        f_inv = None

    if config.uses_gd:
        lam = config.distill.lambda_gd
        _, f_g = M.encode(global_params, xb.pixels)
        l_gd, g_i, g_inv = gd_loss_and_grads(fwd.feature, f_inv, f_g, config.distill.temperature)
        terms["gd"] = l_gd
        d_feature = lam * g_i
        if gi:
            d_f_inv = d_f_inv + lam * g_inv

    if gi:
        alpha = config.intervention.alpha
        if config.intervention.level == "GI_F":
            d_feature = alpha * d_f_inv if d_feature is None else d_feature + alpha * d_f_inv
        else:
            tail_g, d_mixed = M.tail_backward(local, tail_cache, d_f_inv)
            extra.append(tail_g)
            d_fmap = alpha * d_mixed

    grads = M.backward(local, fwd, d_logits=d_logits, d_feature=d_feature, d_fmap=d_fmap)
    for g in extra:
        M.add_grads(grads, g)

    if config.algorithm == "fedprox":
        mu = config.fedprox_mu
        sq = 0.0
        for k, w in local.tensors.items():
            diff = w - global_params[k]
            sq += float(np.sum(diff * diff))
            grads[k] = grads[k] + mu * diff
        terms["prox"] = 0.5 * mu * sq

    terms["total"] = terms["em"] + terms["gi"] + config.distill.lambda_gd * terms["gd"] + terms["prox"]
    return terms, grads


def local_update(global_params: M.ModelParams, client_data: ImageSet, config: TrainConfig,
                 round_idx: int = 0, client_id: int = 0) -> tuple[M.ModelParams, ClientMetrics]:
    if len(client_data) == 0:
        raise ValueError(f"client {client_id} has no data")
    shuffle_rng, bg_rng = _client_rngs(config.seed, round_idx, client_id)
    local = global_params.copy()
    sums = {"em": 0.0, "gi": 0.0, "gd": 0.0, "total": 0.0}
    seen = 0
    n = len(client_data)
    for epoch in range(config.local_epochs):
        order = shuffle_rng.permutation(n)
        for b, start in enumerate(range(0, n, config.batch_size)):
            xb = client_data.subset(order[start:start + config.batch_size])
            terms, grads = fedgid_batch(local, global_params, xb, config, bg_rng)
            if not math.isfinite(terms["total"]):
                raise TrainingDiverged(
                    f"non-finite loss {terms} at round {round_idx}, client {client_id}, "
                    f"epoch {epoch}, batch {b}")
            try:
                local = M.sgd_step(local, grads, config.lr, config.weight_decay)
            except M.NonFiniteGradientError as exc:
                raise TrainingDiverged(
                    f"{exc} at round {round_idx}, client {client_id}, epoch {epoch}, batch {b}") from exc
            for k in sums:
                sums[k] += terms[k] * len(xb)
            seen += len(xb)
    denom = max(seen, 1)
    metrics = ClientMetrics(client_id, sums["em"] / denom, sums["gi"] / denom, sums["gd"] / denom,
                            sums["total"] / denom, n)
    return local, metrics


def aggregate(params_list, weights, client_ids=None) -> M.ModelParams:
    """Weighted average sum(w_i * p_i) / sum(w_i), summed in client-id order."""
    params_list = list(params_list)
    weights = np.asarray(weights, dtype=np.float64)
    if not params_list:
        raise ValueError("nothing to aggregate")
    if len(weights) != len(params_list):
        raise ValueError("one weight per params object required")
    if np.any(weights < 0):
        raise ValueError("weights must be non-negative")
    total = weights.sum()
    if total <= 0:
        raise ValueError("weights sum to zero")
    ref = params_list[0]
    for p in params_list[1:]:
        if p.arch != ref.arch:
            raise ValueError("architectures differ")
        ref.check_compatible(p)
    order = np.argsort(client_ids, kind="stable") if client_ids is not None else range(len(params_list))
    out = {}
    for name in M.PARAM_NAMES:
        acc = np.zeros_like(ref[name])
        for i in order:
            acc = acc + (weights[i] / total) * params_list[i][name]
        out[name] = acc
    return M.ModelParams(ref.arch, out)


def evaluate(params: M.ModelParams, images: ImageSet, batch: int = 1000) -> float:
    correct = 0
    for start in range(0, len(images), batch):
        sl = slice(start, start + batch)
        _, feat = M.encode(params, images.pixels[sl])
        correct += int(np.sum(M.classify_feature(params, feat).argmax(axis=1) == images.labels[sl]))
    return correct / len(images)


def sample_clients(config: TrainConfig, round_idx: int) -> list[int]:
    k = config.num_clients
    if config.sample_fraction >= 1.0:
        return list(range(k))
    m = max(1, int(round(config.sample_fraction * k)))
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, round_idx, 1 << 20]))
    return sorted(rng.choice(k, size=m, replace=False).tolist())


def initial_params(config: TrainConfig, arch: M.Arch) -> M.ModelParams:
    return M.init_params(config.seed, arch)


def arch_for(images: ImageSet) -> M.Arch:
    return M.Arch(image_size=tuple(images.spec.image_size), num_classes=images.spec.num_classes)


@dataclass
class RunResult:
    reports: list[RoundReport]
    params: M.ModelParams
    client_params: dict[int, M.ModelParams]

    @property
    def final_accuracy(self) -> float | None:
        return self.reports[-1].global_ood_accuracy if self.reports else None


def run_experiment(config: TrainConfig, dataset: ImageSet, partition: ClientPartition,
                   test_set: ImageSet, run_dir=None, arch: M.Arch | None = None,
                   init: M.ModelParams | None = None, summary_extra: dict | None = None) -> RunResult:
    """Run ``config.num_rounds`` rounds of broadcast, local update and averaging.

    With ``run_dir`` set, writes ``config.json``, one JSON line per round to
    ``metrics.jsonl``, periodic checkpoints, the last round's client models
    under ``clients/``, ``final.ckpt`` and ``summary.json``.  Reports are
    flushed as they are produced, so a crash leaves the completed rounds on
    disk (plus ``error.json``).
    """
    if partition.num_clients != config.num_clients:
        raise ValueError(f"partition has {partition.num_clients} clients, config {config.num_clients}")
    covered = sorted(i for idx in partition.assignments.values() for i in idx)
    if covered != list(range(len(dataset))):
        raise ValueError("partition does not cover the dataset exactly once")
    arch = arch or arch_for(dataset)
    params = init if init is not None else initial_params(config, arch)
    clients = {k: dataset.subset(partition.assignments[k]) for k in range(config.num_clients)}

    out = Path(run_dir) if run_dir is not None else None
    metrics_fh = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.json").write_text(json.dumps(config.to_dict(), indent=2, sort_keys=True) + "\n")
        metrics_fh = open(out / "metrics.jsonl", "w")
    reports: list[RoundReport] = []
    client_params: dict[int, M.ModelParams] = {}
    try:
        for r in range(config.num_rounds):
            ids = sample_clients(config, r)
            updated, per_client = [], []
            for k in ids:
                p, m = local_update(params, clients[k], config, round_idx=r, client_id=k)
                updated.append(p)
                per_client.append(m)
            client_params = dict(zip(ids, updated))
            params = aggregate(updated, [m.num_samples for m in per_client], client_ids=ids)
            acc = evaluate(params, test_set, config.eval_batch)
            rep = RoundReport(r, per_client, acc)
            reports.append(rep)
            log.info("round %d  ood_acc=%.4f", r, acc)
            if metrics_fh is not None:
                metrics_fh.write(rep.to_json() + "\n")
                metrics_fh.flush()
                if config.checkpoint_every and (r + 1) % config.checkpoint_every == 0:
                    M.save_checkpoint(out / f"round_{r + 1:04d}.ckpt", params, seed=config.seed)
    except Exception as exc:
        if out is not None:
            (out / "error.json").write_text(json.dumps(
                {"error": type(exc).__name__, "message": str(exc), "completed_rounds": len(reports)}))
        raise
    finally:
        if metrics_fh is not None:
            metrics_fh.close()
    result = RunResult(reports, params, client_params)
    if out is not None:
        M.save_checkpoint(out / "final.ckpt", params, seed=config.seed)
        if client_params:
            (out / "clients").mkdir(exist_ok=True)
            for k, p in client_params.items():
                M.save_checkpoint(out / "clients" / f"client_{k}.ckpt", p, seed=config.seed,
                                  extra={"client_id": k, "round": len(reports) - 1})
        summary = {"rounds": len(reports), "final_ood_accuracy": result.final_accuracy,
                   "algorithm": config.algorithm, "beta": config.beta, "seed": config.seed,
                   **(summary_extra or {})}
        (out / "summary.json").write_text(json.dumps(summary, sort_keys=True) + "\n")
    return result


def degenerate_fedgid(config: TrainConfig) -> TrainConfig:
    """FedGID with lambda = 0, alpha = 1 and GI off; must reproduce FedAvg exactly."""
    return replace(config, algorithm="fedgid",
                   intervention=replace(config.intervention, alpha=1.0, enabled=False),
                   distill=replace(config.distill, lambda_gd=0.0))
