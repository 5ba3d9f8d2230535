"""Progressive meta-learning driver.

Three stages: source pretraining (extractor + learnable base prototypes,
jointly optimized through the closed-form reconstruction), two-stage target
finetuning on pseudo-episodes carved out of the support set (stage 1 moves
the extractor, stage 2 freezes it and moves only the reprojection
prototypes, the temperature, and the normalization gate), and the querying
phase that re-normalizes with query statistics before measuring. The
evaluation harness re-runs finetuning per episode and reports mean accuracy
with a 95% confidence interval.
"""

from __future__ import annotations

import concurrent.futures
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from . import nda
from .backbone import BackboneParams, forward_batch, forward_numpy, init_backbone
from .data import Episode, EpisodeSpec, FeatureBank, sample_episode
from .errors import DivergenceDetected, InsufficientItems
from .nda import GateParams
from .pfa import (
    MeasurementParams,
    ReconstructionFactors,
    ReprojectionConfig,
    build_pool,
    init_reprojection,
    predict,
    reconstruction_factors,
    softmax_rows,
)


@dataclass
class TrainConfig:
    pretrain_epochs: int = 100
    finetune_epochs: int = 100       # split evenly across the two stages
    lr_pretrain: float = 0.05
    lr_stage1: float = 0.01
    lr_stage2: float = 0.01
    batch_size: int = 16
    c_hidden: int = 32
    c_feat: int = 160
    beta: float = 1.0
    seed: int = 0
    workers: int = 1
    use_recalibration: bool = True
    use_reprojection_finetune: bool = True
    use_nda: bool = True
    nda_variant: str = "learnable"   # learnable | mean | bn | in | sum
    statistic_source: str = "q-all"  # q-all | s+q-1 | s+q-1x5
    pool_mode: str = "stacked"       # stacked | pooled
    shared_finetune: bool = False
    clamp_negative_weights: bool = False

    def validate(self) -> "TrainConfig":
        if self.pretrain_epochs < 1:
            raise ValueError("pretrain_epochs must be >= 1")
        if self.finetune_epochs < 0:
            raise ValueError("finetune_epochs must be >= 0")
        # zero is allowed so no-op training runs stay expressible in tests
        for name in ("lr_pretrain", "lr_stage1", "lr_stage2"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.batch_size < 1 or self.c_hidden < 1 or self.c_feat < 1:
            raise ValueError("batch_size and layer widths must be >= 1")
        if self.beta < 0:
            raise ValueError("beta must be >= 0")
        if self.workers < 1:
            raise ValueError("workers must be >= 1")
        if self.nda_variant not in ("learnable", "mean", "bn", "in", "sum"):
            raise ValueError(f"unknown nda_variant {self.nda_variant!r}")
        if self.statistic_source not in ("q-all", "s+q-1", "s+q-1x5"):
            raise ValueError(f"unknown statistic_source {self.statistic_source!r}")
        if self.pool_mode not in ("stacked", "pooled"):
            raise ValueError(f"unknown pool_mode {self.pool_mode!r}")
        return self

    def reprojection(self) -> ReprojectionConfig:
        return ReprojectionConfig(
            beta=self.beta, clamp_negative_weights=self.clamp_negative_weights
        )


@dataclass
class ModelState:
    backbone: BackboneParams
    gamma_log: float
    gate: GateParams
    reprojection: dict[int, np.ndarray] = field(default_factory=dict)

    def copy(self) -> "ModelState":
        return ModelState(
            backbone=self.backbone.copy(),
            gamma_log=self.gamma_log,
            gate=GateParams(
                mode=self.gate.mode,
                w=self.gate.w.copy(),
                b=self.gate.b,
                alpha=self.gate.alpha,
            ),
            reprojection={n: z.copy() for n, z in self.reprojection.items()},
        )

    def measurement(self, resolution: int) -> MeasurementParams:
        return MeasurementParams(gamma_log=self.gamma_log, resolution=resolution)


@dataclass
class EvalReport:
    per_episode: list[float]
    mean: float
    ci95: float
    episodes: int
    config_digest: str

    def to_dict(self) -> dict:
        return {
            "mean": self.mean,
            "ci95": self.ci95,
            "episodes": self.episodes,
            "per_episode": self.per_episode,
            "config_digest": self.config_digest,
        }


def _check_finite(loss: float, stage: str) -> float:
    if not np.isfinite(loss):
        raise DivergenceDetected(f"{stage} loss became {loss}")
    return loss


def _split_indices(
    k: int, pseudo_query_shots: int, rng: np.random.Generator
) -> tuple[list[int], list[int]]:
    """Index form of the pseudo-split; K = 1 puts the item on both sides."""
    if k == 1:
        return [0], [0]
    order = rng.permutation(k)
    q = sorted(order[:pseudo_query_shots].tolist())
    s = sorted(set(range(k)) - set(q))
    return s, q


def _pool_graph(feats: list[ad.Var], cfg: TrainConfig) -> ad.Var:
    """Tape twin of pfa.build_pool."""
    if cfg.use_recalibration and len(feats) > 1:
        k = len(feats)
        weighted = []
        for i in range(k):
            sims = [ad.cosine(feats[i], feats[j]) for j in range(k) if j != i]
            acc = sims[0]
            for s in sims[1:]:
                acc = ad.add(acc, s)
            a_i = ad.scale(acc, 1.0 / (k - 1))
            if cfg.clamp_negative_weights:
                a_i = ad.relu(a_i)
            weighted.append(ad.mul(a_i, feats[i]))
    else:
        weighted = list(feats)
    if cfg.pool_mode == "stacked":
        return ad.vstack(weighted)
    acc = weighted[0]
    for w in weighted[1:]:
        acc = ad.add(acc, w)
    return ad.scale(acc, 1.0 / len(weighted))


def _recon_factors_graph(
    tape: ad.Tape, pool: ad.Var, lam: float
) -> tuple[ad.Var, ad.Var]:
    """Tape twin of pfa.reconstruction_factors, differentiable via the solve."""
    gram = ad.matmul(pool, ad.transpose(pool))
    if lam > 0.0:
        gram = ad.add(gram, tape.var(lam * np.eye(pool.shape[0])))
    return pool, ad.solve_through(gram, pool)


def _cross_entropy_graph(
    tape: ad.Tape,
    factors: list[tuple[ad.Var, ad.Var]],
    query_stack: ad.Var,
    labels: list[int],
    gamma_log: ad.Var,
    resolution: int,
) -> tuple[ad.Var, np.ndarray]:
    """Mean cross-entropy of the temperature-softmax measurement.

    Returns the loss node and the raw logits matrix (one row per query) for
    accuracy bookkeeping.
    """
    neg_gamma_over_r = ad.scale(ad.exp(gamma_log), -1.0 / resolution)
    cols = []
    for pool, solved in factors:
        recon = ad.matmul(ad.matmul(query_stack, ad.transpose(pool)), solved)
        resid = ad.sub(recon, query_stack)
        cols.append(ad.mul(neg_gamma_over_r, ad.block_frobenius_sq(resid, resolution)))
    logits = ad.hstack(cols)
    logp = ad.row_log_softmax(logits)
    onehot = np.zeros(logits.shape)
    onehot[np.arange(len(labels)), labels] = 1.0
    picked = ad.mul(logp, tape.var(onehot))
    loss = ad.scale(ad.mean_over(picked, (0, 1)), -float(logits.shape[1]))
    return loss, logits.value


@dataclass
class PretrainResult:
    state: ModelState
    prototypes: dict[int, np.ndarray]
    epoch_losses: list[float]
    epoch_accuracies: list[float]


def init_state(bank: FeatureBank, cfg: TrainConfig, rng: np.random.Generator) -> ModelState:
    return ModelState(
        backbone=init_backbone(bank.channels, cfg.c_hidden, cfg.c_feat, rng),
        gamma_log=MeasurementParams.default(bank.resolution).gamma_log,
        gate=GateParams(mode="learnable", w=np.zeros((1, cfg.c_feat)), b=0.0),
    )


def pretrain_source(source: FeatureBank, cfg: TrainConfig) -> PretrainResult:
    """Jointly fit the extractor and random-init base prototypes by SGD.

    Every source sample is reconstructed from every class prototype; the
    cross-entropy of the softmax over (negative, temperature-scaled)
    reconstruction distances is minimized over minibatches.
    """
    cfg.validate()
    source.validate()
    root = np.random.SeedSequence(cfg.seed)
    init_seq, proto_seq, order_seq = root.spawn(3)
    state = init_state(source, cfg, np.random.default_rng(init_seq))
    r = source.resolution

    proto_rng = np.random.default_rng(proto_seq)
    protos = {
        n: proto_rng.standard_normal((r, cfg.c_feat))
        for n in range(source.class_count)
    }
    lam = cfg.reprojection().lam(r, cfg.c_feat)
    order_rng = np.random.default_rng(order_seq)

    epoch_losses: list[float] = []
    epoch_accs: list[float] = []
    for _ in range(cfg.pretrain_epochs):
        order = order_rng.permutation(len(source.items))
        losses, hits, total = [], 0, 0
        for at in range(0, len(order), cfg.batch_size):
            batch = order[at : at + cfg.batch_size]
            items = [source.items[i][0] for i in batch]
            labels = [source.items[i][1] for i in batch]

            tape = ad.Tape()
            leaves = {
                "w1": tape.var(state.backbone.w1),
                "b1": tape.var(state.backbone.b1),
                "w2": tape.var(state.backbone.w2),
                "b2": tape.var(state.backbone.b2),
                "gamma_log": tape.var([[state.gamma_log]]),
            }
            proto_leaves = {n: tape.var(protos[n]) for n in sorted(protos)}
            feats = forward_batch(
                tape,
                (leaves["w1"], leaves["b1"], leaves["w2"], leaves["b2"]),
                tape.var(np.vstack(items)),
            )
            factors = [
                _recon_factors_graph(tape, proto_leaves[n], lam) for n in sorted(protos)
            ]
            loss, logits = _cross_entropy_graph(
                tape, factors, feats, labels, leaves["gamma_log"], r
            )
            losses.append(_check_finite(float(loss.value[0, 0]), "pretraining"))
            hits += int(np.sum(np.argmax(logits, axis=1) == np.asarray(labels)))
            total += len(labels)

            grads = tape.backward(loss)
            lr = cfg.lr_pretrain
            state.backbone.w1 -= lr * grads[leaves["w1"]]
            state.backbone.b1 -= lr * grads[leaves["b1"]]
            state.backbone.w2 -= lr * grads[leaves["w2"]]
            state.backbone.b2 -= lr * grads[leaves["b2"]]
            state.gamma_log -= lr * float(grads[leaves["gamma_log"]][0, 0])
            for n, leaf in proto_leaves.items():
                protos[n] -= lr * grads[leaf]
        epoch_losses.append(float(np.mean(losses)))
        epoch_accs.append(hits / max(total, 1))
    return PretrainResult(state, protos, epoch_losses, epoch_accs)


def stage1_graph(
    state: ModelState,
    support: list[list[np.ndarray]],
    splits: list[tuple[list[int], list[int]]],
    cfg: TrainConfig,
) -> tuple[ad.Tape, dict[str, ad.Var], ad.Var]:
    """One stage-1 forward build: extractor -> recalibrated pseudo-support
    pools -> closed-form reconstruction of the pseudo-query -> measurement
    cross-entropy. Returns (tape, leaves, loss)."""
    tape = ad.Tape()
    leaves = {
        "w1": tape.var(state.backbone.w1),
        "b1": tape.var(state.backbone.b1),
        "w2": tape.var(state.backbone.w2),
        "b2": tape.var(state.backbone.b2),
        "gamma_log": tape.var([[state.gamma_log]]),
    }
    all_items = [m for shots in support for m in shots]
    feats = forward_batch(
        tape,
        (leaves["w1"], leaves["b1"], leaves["w2"], leaves["b2"]),
        tape.var(np.vstack(all_items)),
    )
    r = all_items[0].shape[0]
    per_item: list[list[ad.Var]] = []
    at = 0
    for shots in support:
        row = []
        for _ in shots:
            row.append(ad.rows(feats, at * r, (at + 1) * r))
            at += 1
        per_item.append(row)

    pools = [
        _pool_graph([per_item[way][i] for i in ps], cfg)
        for way, (ps, _) in enumerate(splits)
    ]
    rcfg = cfg.reprojection()
    factors = [
        _recon_factors_graph(tape, pool, rcfg.lam(pool.shape[0], cfg.c_feat))
        for pool in pools
    ]
    queries, labels = [], []
    for way, (_, pq) in enumerate(splits):
        for i in pq:
            queries.append(per_item[way][i])
            labels.append(way)
    loss, _ = _cross_entropy_graph(
        tape, factors, ad.vstack(queries), labels, leaves["gamma_log"], r
    )
    return tape, leaves, loss


def finetune_stage1(
    state: ModelState,
    support: list[list[np.ndarray]],
    spec: EpisodeSpec,
    cfg: TrainConfig,
    rng: np.random.Generator,
    steps: int,
) -> list[float]:
    """Stage 1: move the extractor (and temperature) on pseudo-episodes.

    Each step redraws the pseudo-split, rebuilds the reconstruction from
    the pseudo-support pool against the pseudo-query, and takes one SGD
    step on the extractor parameters; the reconstruction weights themselves
    are recomputed, never persisted.
    """
    losses: list[float] = []
    for _ in range(steps):
        splits = [
            _split_indices(len(shots), spec.pseudo_query_shots, rng)
            for shots in support
        ]
        tape, leaves, loss = stage1_graph(state, support, splits, cfg)
        losses.append(_check_finite(float(loss.value[0, 0]), "stage 1"))

        grads = tape.backward(loss)
        lr = cfg.lr_stage1
        state.backbone.w1 -= lr * grads[leaves["w1"]]
        state.backbone.b1 -= lr * grads[leaves["b1"]]
        state.backbone.w2 -= lr * grads[leaves["w2"]]
        state.backbone.b2 -= lr * grads[leaves["b2"]]
        state.gamma_log -= lr * float(grads[leaves["gamma_log"]][0, 0])
    return losses


def _aligned_query_graph(
    tape: ad.Tape,
    fmap: np.ndarray,
    stats: nda.TanStats,
    item_index: int,
    cfg: TrainConfig,
    gate_leaves: tuple[ad.Var, ad.Var] | None,
) -> ad.Var:
    """Differentiable alignment of one pseudo-query map (gate on the tape)."""
    bn, inn = nda.tan_branches(fmap, stats, item_index)
    variant = cfg.nda_variant
    if variant == "bn":
        return tape.var(bn)
    if variant == "in":
        return tape.var(inn)
    if variant == "sum":
        return tape.var(bn + inn)
    if variant == "mean":
        tau = tape.var([[0.5]])
    else:
        w, b = gate_leaves
        pooled = fmap.mean(axis=0, keepdims=True)  # gate input: raw pooled feature
        tau = ad.sigmoid(ad.add(ad.matmul(w, tape.var(pooled.T)), b))
    one = tape.var([[1.0]])
    return ad.add(
        ad.mul(ad.sub(one, tau), tape.var(bn)), ad.mul(tau, tape.var(inn))
    )


def init_stage2_pools(
    state: ModelState,
    support_feats: list[list[np.ndarray]],
    spec: EpisodeSpec,
    cfg: TrainConfig,
    rng: np.random.Generator,
) -> dict[int, np.ndarray]:
    """Reprojection prototypes start as a copy of the pseudo-support pools.

    Uses the first pseudo-split drawn from `rng`; with alignment enabled the
    pools are built from aligned features so stage 2 optimizes in the same
    space it is queried in.
    """
    splits = [
        _split_indices(len(fs), spec.pseudo_query_shots, rng) for fs in support_feats
    ]
    stats = None
    if cfg.use_nda:
        pq_batch = [support_feats[w][i] for w, (_, q) in enumerate(splits) for i in q]
        stats = nda.extract_stats(pq_batch)
    pools = {}
    for way, (ps, _) in enumerate(splits):
        feats = [support_feats[way][i] for i in ps]
        if stats is not None:
            feats = [
                nda.align(f, stats, state.gate, None, cfg.nda_variant) for f in feats
            ]
        pools[way] = build_pool(
            feats, cfg.use_recalibration, cfg.pool_mode, cfg.clamp_negative_weights
        )
    return init_reprojection(pools)


def stage2_graph(
    state: ModelState,
    support_feats: list[list[np.ndarray]],
    splits: list[tuple[list[int], list[int]]],
    cfg: TrainConfig,
) -> tuple[ad.Tape, dict, ad.Var]:
    """One stage-2 forward build with the extractor frozen.

    Leaves: reprojection prototypes, log-temperature, and (learnable NDA)
    the gate; the pseudo-query features themselves are constants.
    """
    r = support_feats[0][0].shape[0]
    train_gate = cfg.use_nda and cfg.nda_variant == "learnable"
    pq_maps, labels = [], []
    for way, (_, pq) in enumerate(splits):
        for i in pq:
            pq_maps.append(support_feats[way][i])
            labels.append(way)

    tape = ad.Tape()
    leaves: dict = {"gamma_log": tape.var([[state.gamma_log]])}
    z_leaves = {n: tape.var(z) for n, z in sorted(state.reprojection.items())}
    leaves["z"] = z_leaves
    gate_leaves = None
    if train_gate:
        gate_leaves = (tape.var(state.gate.w), tape.var([[state.gate.b]]))
        leaves["gate_w"], leaves["gate_b"] = gate_leaves

    if cfg.use_nda:
        stats = nda.extract_stats(pq_maps)
        queries = [
            _aligned_query_graph(tape, fmap, stats, i, cfg, gate_leaves)
            for i, fmap in enumerate(pq_maps)
        ]
    else:
        queries = [tape.var(fmap) for fmap in pq_maps]

    rcfg = cfg.reprojection()
    factors = [
        _recon_factors_graph(tape, z, rcfg.lam(z.shape[0], cfg.c_feat))
        for _, z in sorted(z_leaves.items())
    ]
    loss, _ = _cross_entropy_graph(
        tape, factors, ad.vstack(queries), labels, leaves["gamma_log"], r
    )
    return tape, leaves, loss


def finetune_stage2(
    state: ModelState,
    support: list[list[np.ndarray]],
    spec: EpisodeSpec,
    cfg: TrainConfig,
    rng: np.random.Generator,
    steps: int,
) -> list[float]:
    """Stage 2: extractor frozen; optimize reprojection prototypes Z,
    the temperature, and (in learnable mode) the normalization gate."""
    support_feats = [forward_numpy(state.backbone, shots) for shots in support]
    state.reprojection = init_stage2_pools(state, support_feats, spec, cfg, rng)
    train_gate = cfg.use_nda and cfg.nda_variant == "learnable"

    losses: list[float] = []
    for _ in range(steps):
        splits = [
            _split_indices(len(fs), spec.pseudo_query_shots, rng)
            for fs in support_feats
        ]
        tape, leaves, loss = stage2_graph(state, support_feats, splits, cfg)
        losses.append(_check_finite(float(loss.value[0, 0]), "stage 2"))

        grads = tape.backward(loss)
        lr = cfg.lr_stage2
        for n, leaf in leaves["z"].items():
            state.reprojection[n] -= lr * grads[leaf]
        state.gamma_log -= lr * float(grads[leaves["gamma_log"]][0, 0])
        if train_gate:
            if leaves["gate_w"] in grads:
                state.gate.w -= lr * grads[leaves["gate_w"]]
            if leaves["gate_b"] in grads:
                state.gate.b -= lr * float(grads[leaves["gate_b"]][0, 0])
    return losses


def finetune(
    state: ModelState,
    support: list[list[np.ndarray]],
    spec: EpisodeSpec,
    cfg: TrainConfig,
    seed_seq: np.random.SeedSequence,
) -> tuple[list[float], list[float]]:
    """Both finetuning stages with an even epoch split; disabled stages skip."""
    s1_seq, s2_seq = seed_seq.spawn(2)
    steps1 = cfg.finetune_epochs // 2
    steps2 = cfg.finetune_epochs - steps1
    losses1: list[float] = []
    losses2: list[float] = []
    if cfg.finetune_epochs > 0:
        losses1 = finetune_stage1(
            state, support, spec, cfg, np.random.default_rng(s1_seq), steps1
        )
        if cfg.use_reprojection_finetune:
            losses2 = finetune_stage2(
                state, support, spec, cfg, np.random.default_rng(s2_seq), steps2
            )
    return losses1, losses2


@dataclass
class QueryResult:
    predictions: list[int]
    probabilities: np.ndarray        # one row per query
    true_class_distances: list[float]  # gamma/R scaled squared distance
    accuracy: float


def query_episode(
    state: ModelState, episode: Episode, spec: EpisodeSpec, cfg: TrainConfig
) -> QueryResult:
    """Classify an episode's queries with the trained artifacts.

    Support features are aligned with query-batch statistics and pooled
    (unless finetuned reprojection prototypes exist, which replace the
    pools); each query is measured against its closed-form reconstruction
    from every class. Statistic sources: "q-all" uses the whole query
    batch, "s+q-1" uses support plus the one query at hand, "s+q-1x5" uses
    support plus the first query of each way. The query's instance-branch
    statistics are always its own.
    """
    cfg.validate()
    support_feats = [forward_numpy(state.backbone, shots) for shots in episode.support]
    query_feats = forward_numpy(state.backbone, [q for q, _ in episode.query])
    query_labels = [lab for _, lab in episode.query]
    r = query_feats[0].shape[0]

    rcfg = cfg.reprojection()
    use_z = cfg.use_reprojection_finetune and bool(state.reprojection)

    def factors_from(support_maps: list[list[np.ndarray]]) -> list[ReconstructionFactors]:
        pools = [
            build_pool(fs, cfg.use_recalibration, cfg.pool_mode, cfg.clamp_negative_weights)
            for fs in support_maps
        ]
        return [
            reconstruction_factors(p, rcfg.lam(p.shape[0], cfg.c_feat)) for p in pools
        ]

    def align_support(stats: nda.TanStats) -> list[list[np.ndarray]]:
        return [
            [nda.align(f, stats, state.gate, None, cfg.nda_variant) for f in fs]
            for fs in support_feats
        ]

    shared: list[ReconstructionFactors] | None = None
    per_query: list[list[ReconstructionFactors]] | None = None
    if use_z:
        shared = [
            reconstruction_factors(
                state.reprojection[n], rcfg.lam(state.reprojection[n].shape[0], cfg.c_feat)
            )
            for n in sorted(state.reprojection)
        ]

    if not cfg.use_nda:
        aligned_queries = query_feats
        if shared is None:
            shared = factors_from(support_feats)
    elif cfg.statistic_source == "q-all":
        stats = nda.extract_stats(query_feats)
        aligned_queries = [
            nda.align(f, stats, state.gate, i, cfg.nda_variant)
            for i, f in enumerate(query_feats)
        ]
        if shared is None:
            shared = factors_from(align_support(stats))
    elif cfg.statistic_source == "s+q-1x5":
        flat_support = [f for fs in support_feats for f in fs]
        firsts: dict[int, int] = {}
        for i, lab in enumerate(query_labels):
            firsts.setdefault(lab, i)
        batch = flat_support + [query_feats[i] for i in sorted(firsts.values())]
        stats = nda.extract_stats(batch)
        aligned_queries = [
            nda.align(f, nda.stats_for_item(stats, f), state.gate, 0, cfg.nda_variant)
            for f in query_feats
        ]
        if shared is None:
            shared = factors_from(align_support(stats))
    else:  # s+q-1: statistics batch changes per query
        flat_support = [f for fs in support_feats for f in fs]
        aligned_queries = []
        if shared is None:
            per_query = []
        for f in query_feats:
            stats = nda.extract_stats(flat_support + [f])
            aligned_queries.append(
                nda.align(f, stats, state.gate, len(flat_support), cfg.nda_variant)
            )
            if per_query is not None:
                per_query.append(factors_from(align_support(stats)))

    params = state.measurement(r)
    logit_scale = params.gamma / r
    n_q = len(aligned_queries)
    if shared is not None:
        stacked = np.vstack(aligned_queries)
        distances = np.empty((n_q, len(shared)))
        for way, factors in enumerate(shared):
            resid = factors.reconstruct(stacked) - stacked
            distances[:, way] = (resid * resid).reshape(n_q, -1).sum(axis=1)
    else:
        distances = np.empty((n_q, len(per_query[0])))
        for qi, q in enumerate(aligned_queries):
            for way, factors in enumerate(per_query[qi]):
                resid = factors.reconstruct(q) - q
                distances[qi, way] = float(np.sum(resid * resid))

    probabilities = softmax_rows(-logit_scale * distances)
    preds = [predict(row) for row in probabilities]
    dists = [
        logit_scale * float(distances[qi, lab]) for qi, lab in enumerate(query_labels)
    ]
    accuracy = float(np.mean([p == t for p, t in zip(preds, query_labels)]))
    return QueryResult(preds, probabilities, dists, accuracy)


def run_episode(
    pretrained: ModelState,
    bank: FeatureBank,
    spec: EpisodeSpec,
    cfg: TrainConfig,
    episode_index: int,
    query_delta: float = 0.0,
) -> tuple[Episode, ModelState, QueryResult]:
    """Sample, finetune a fresh copy of the pretrained state, and query."""
    seq = np.random.SeedSequence(spec.seed, spawn_key=(episode_index,))
    sample_seq, tune_seq = seq.spawn(2)
    episode = sample_episode(
        bank, spec, np.random.default_rng(sample_seq), query_delta
    )
    state = pretrained.copy()
    finetune(state, episode.support, spec, cfg, tune_seq)
    return episode, state, query_episode(state, episode, spec, cfg)


def _sample_query_set(
    bank: FeatureBank,
    episode: Episode,
    spec: EpisodeSpec,
    rng: np.random.Generator,
    query_delta: float,
) -> Episode:
    """Fresh queries for an existing support set (shared-finetune protocol)."""
    groups = bank.by_class()
    taken = {i for way in episode.support_indices for i in way}
    query = []
    for way, cid in enumerate(episode.class_ids):
        candidates = [i for i in groups[cid] if i not in taken]
        if len(candidates) < spec.queries_per_class:
            raise InsufficientItems(
                f"class {cid} has only {len(candidates)} items left for queries"
            )
        picks = rng.choice(candidates, size=spec.queries_per_class, replace=False)
        for i in picks:
            query.append((bank.items[i][0] + query_delta, way))
    return Episode(episode.class_ids, episode.support, query, episode.support_indices)


def evaluate(
    pretrained: ModelState,
    bank: FeatureBank,
    spec: EpisodeSpec,
    cfg: TrainConfig,
    episode_count: int,
    query_delta: float = 0.0,
    config_digest: str = "",
) -> EvalReport:
    """Benchmark protocol: independent episodes, finetuning re-run per
    episode, mean accuracy with a 1.96 * sd / sqrt(E) interval."""
    if episode_count < 1:
        raise ValueError("episode_count must be >= 1")
    cfg.validate()
    spec.validate()

    if cfg.shared_finetune:
        seq = np.random.SeedSequence(spec.seed, spawn_key=(0,))
        sample_seq, tune_seq = seq.spawn(2)
        episode = sample_episode(
            bank, spec, np.random.default_rng(sample_seq), query_delta
        )
        state = pretrained.copy()
        finetune(state, episode.support, spec, cfg, tune_seq)
        accs = []
        for e in range(episode_count):
            qrng = np.random.default_rng(
                np.random.SeedSequence(spec.seed, spawn_key=(e, 1))
            )
            ep = _sample_query_set(bank, episode, spec, qrng, query_delta)
            accs.append(query_episode(state, ep, spec, cfg).accuracy)
    elif cfg.workers > 1:
        accs = _evaluate_parallel(
            pretrained, bank, spec, cfg, episode_count, query_delta
        )
    else:
        accs = [
            run_episode(pretrained, bank, spec, cfg, e, query_delta)[2].accuracy
            for e in range(episode_count)
        ]

    mean = float(np.mean(accs))
    sd = float(np.std(accs, ddof=1)) if len(accs) > 1 else 0.0
    ci95 = 1.96 * sd / np.sqrt(len(accs))
    return EvalReport(
        per_episode=[float(a) for a in accs],
        mean=mean,
        ci95=float(ci95),
        episodes=episode_count,
        config_digest=config_digest,
    )


_WORKER_PAYLOAD: dict = {}


def _init_worker(pretrained, bank, spec, cfg, query_delta):
    _WORKER_PAYLOAD.update(
        pretrained=pretrained, bank=bank, spec=spec, cfg=cfg, query_delta=query_delta
    )


def _episode_task(index: int) -> tuple[int, float]:
    p = _WORKER_PAYLOAD
    result = run_episode(
        p["pretrained"], p["bank"], p["spec"], p["cfg"], index, p["query_delta"]
    )[2]
    return index, result.accuracy


def _evaluate_parallel(pretrained, bank, spec, cfg, episode_count, query_delta):
    with concurrent.futures.ProcessPoolExecutor(
        max_workers=cfg.workers,
        initializer=_init_worker,
        initargs=(pretrained, bank, spec, cfg, query_delta),
    ) as pool:
        results = list(pool.map(_episode_task, range(episode_count), chunksize=8))
    results.sort(key=lambda pair: pair[0])
    return [acc for _, acc in results]


def baseline_config(cfg: TrainConfig) -> TrainConfig:
    """Frozen-pretrain ridge measurement: every alignment component off."""
    return replace(
        cfg,
        finetune_epochs=0,
        use_recalibration=False,
        use_reprojection_finetune=False,
        use_nda=False,
        pool_mode="pooled",
    )


def _distance_rows(
    state: ModelState,
    episode: Episode,
    cfg: TrainConfig,
    query_stats: bool,
) -> list[float]:
    """True-class reconstruction distances, (gamma/R)-scaled.

    `query_stats` toggles the alignment: statistics taken from the query
    batch (the alignment this engine contributes) versus conventional
    normalization by the support batch's own statistics. Everything else
    (extractor, recalibration, pools, fusion variant) is held identical, so
    the two passes compare distances in commensurately scaled spaces.
    """
    support_feats = [forward_numpy(state.backbone, shots) for shots in episode.support]
    query_feats = forward_numpy(state.backbone, [q for q, _ in episode.query])
    query_labels = [lab for _, lab in episode.query]
    r = query_feats[0].shape[0]
    variant = cfg.nda_variant

    if query_stats:
        stats = nda.extract_stats(query_feats)
        aligned_queries = [
            nda.align(f, stats, state.gate, i, variant)
            for i, f in enumerate(query_feats)
        ]
        aligned_support = [
            [nda.align(f, stats, state.gate, None, variant) for f in fs]
            for fs in support_feats
        ]
    else:
        flat_support = [f for fs in support_feats for f in fs]
        stats = nda.extract_stats(flat_support)
        aligned_queries = [
            nda.align(f, nda.stats_for_item(stats, f), state.gate, 0, variant)
            for f in query_feats
        ]
        aligned_support = []
        at = 0
        for fs in support_feats:
            aligned_support.append(
                [nda.align(f, stats, state.gate, at + i, variant) for i, f in enumerate(fs)]
            )
            at += len(fs)

    rcfg = cfg.reprojection()
    pools = [
        build_pool(fs, cfg.use_recalibration, cfg.pool_mode, cfg.clamp_negative_weights)
        for fs in aligned_support
    ]
    factors = [
        reconstruction_factors(p, rcfg.lam(p.shape[0], cfg.c_feat)) for p in pools
    ]
    scale_ = state.measurement(r).gamma / r
    out = []
    for q, lab in zip(aligned_queries, query_labels):
        resid = factors[lab].reconstruct(q) - q
        out.append(scale_ * float(np.sum(resid * resid)))
    return out


def export_distance_histogram(
    pretrained: ModelState,
    bank: FeatureBank,
    spec: EpisodeSpec,
    cfg: TrainConfig,
    episode_count: int,
    query_delta: float = 0.0,
) -> list[tuple[int, int, int, float, int]]:
    """Rows of (episode, query_index, true_class, distance, aligned).

    Each episode is finetuned once; the aligned pass normalizes with
    query-batch statistics, the unaligned pass with the support batch's
    own statistics (the conventional choice), and both measure the
    distance of every query to its true class's pool reconstruction.
    """
    rows: list[tuple[int, int, int, float, int]] = []
    for e in range(episode_count):
        seq = np.random.SeedSequence(spec.seed, spawn_key=(e,))
        sample_seq, tune_seq = seq.spawn(2)
        episode = sample_episode(
            bank, spec, np.random.default_rng(sample_seq), query_delta
        )
        state = pretrained.copy()
        finetune(state, episode.support, spec, cfg, tune_seq)
        aligned = _distance_rows(state, episode, cfg, query_stats=True)
        unaligned = _distance_rows(state, episode, cfg, query_stats=False)
        for qi, (_, way) in enumerate(episode.query):
            cid = episode.class_ids[way]
            rows.append((e, qi, cid, aligned[qi], 1))
            rows.append((e, qi, cid, unaligned[qi], 0))
    return rows
