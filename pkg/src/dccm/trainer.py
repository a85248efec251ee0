"""Minibatch training loop, optimizer, evaluation, and the probe protocol.

Each step forwards the original batch, derives the graph/label supervision
from the detached predictions, forwards a transformed copy of the same
indices under that supervision, adds the triplet mutual-information term,
and takes one joint RMSprop step over encoder and discriminator. Everything
is deterministic given the experiment seed, and checkpoints capture enough
state (parameters, optimizer cache, RNG) to resume bit-exactly.
"""

from __future__ import annotations

import dataclasses
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import correlation as corr
from . import data as dio
from . import graph_analysis as ga
from . import metrics as mt
from . import model as mdl
from . import transforms as tfm
from .autodiff import Tensor, no_grad
from .errors import ConfigError, DegenerateBatchError, TrainingDivergenceError

log = logging.getLogger(__name__)

METRICS_HEADER = (
    "epoch,loss_total,loss_pg,loss_pg_t,loss_pl,loss_pl_t,loss_mi,"
    "nmi,acc,ari,selected_label_frac,positive_pair_frac"
)

# loss-structure presets mirroring the ablation rows
ABLATIONS = {
    "M1": dict(use_robustness=False, use_pseudo_label=False, use_mi=False),
    "M2": dict(use_robustness=True, use_pseudo_label=False, use_mi=False),
    "M3": dict(use_robustness=True, use_pseudo_label=True, use_mi=False),
    "M4": dict(use_robustness=True, use_pseudo_label=True, use_mi=True),
}


@dataclass
class ExperimentConfig:
    """Everything a run needs; JSON-serialisable, defaults per the method."""

    dataset: dict
    encoder: dict
    epochs: int = 200
    batch_size: int = 50
    thres1: float = 0.95
    thres2: float = 0.9
    alpha: float = 5.0
    beta: float = 0.1
    learning_rate: float = 1e-4
    rmsprop_decay: float = 0.99
    rmsprop_epsilon: float = 1e-8
    strategy: str = "nearest-pos+random-neg"
    transforms: dict = field(default_factory=dict)
    use_robustness: bool = True
    use_pseudo_label: bool = True
    use_mi: bool = True
    use_feature_invariance: bool = False
    fi_weight: float = 1.0
    disc_hidden: int = 128
    seed: int = 0
    out_dir: str | None = None
    bcubed_thresholds: tuple = (0.5, 0.7, 0.9, 0.95, 0.99)
    bcubed_every: int = 10

    def __post_init__(self):
        if not (0.0 < self.thres1 < 1.0 and 0.0 < self.thres2 < 1.0):
            raise ConfigError("thresholds must lie in (0, 1)")
        if self.alpha < 0 or self.beta < 0:
            raise ConfigError("alpha and beta must be nonnegative")
        if self.strategy not in corr.STRATEGIES:
            raise ConfigError(f"unknown sampling strategy {self.strategy!r}")
        if self.epochs < 1 or self.batch_size < 2:
            raise ConfigError("need epochs >= 1 and batch_size >= 2")

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        out["bcubed_thresholds"] = list(self.bcubed_thresholds)
        return out

    @staticmethod
    def from_dict(d: dict) -> "ExperimentConfig":
        d = dict(d)
        if "bcubed_thresholds" in d:
            d["bcubed_thresholds"] = tuple(d["bcubed_thresholds"])
        return ExperimentConfig(**d)

    @staticmethod
    def from_json(path) -> "ExperimentConfig":
        return ExperimentConfig.from_dict(json.loads(Path(path).read_text()))

    def transform_spec(self, seed: int = 0) -> tfm.TransformSpec:
        spec = dict(self.transforms)
        spec["seed"] = seed
        return tfm.TransformSpec.from_dict(spec)


def load_dataset(spec: dict) -> dio.Dataset:
    """Construct a dataset from its config stanza (kinds: blobs, cifar, dtns)."""
    spec = dict(spec)
    kind = spec.pop("kind", None)
    standardize = spec.pop("standardize", False)
    scale = spec.pop("scale", 1.0)
    if kind == "blobs":
        ds = dio.generate_blobs(**spec)
    elif kind == "cifar":
        ds = dio.load_cifar_binary(spec["paths"])
    elif kind == "dtns":
        samples = dio.load_tensor(spec["data"])
        labels = None
        if spec.get("labels"):
            labels = dio.load_tensor(spec["labels"]).astype(np.intp)
        ds = dio.Dataset(samples=samples, labels=labels, name=spec.get("name", "dtns"))
    else:
        raise ConfigError(f"unknown dataset kind {kind!r}")
    note = ds.normalization
    samples = ds.samples
    if standardize:
        mu, sd = samples.mean(), samples.std()
        samples = (samples - mu) / (sd if sd > 0 else 1.0)
        note = f"{note}+standardize"
    if scale != 1.0:
        samples = samples * scale
        note = f"{note}+scale:{scale}"
    if standardize or scale != 1.0:
        ds = dio.Dataset(samples=samples, labels=ds.labels, name=ds.name, normalization=note)
    return ds


def build_encoder_config(encoder: dict, num_classes_hint: int | None = None) -> mdl.EncoderConfig:
    """Expand an encoder stanza: either an arch shortcut or explicit layers."""
    encoder = dict(encoder)
    arch = encoder.pop("arch", None)
    if arch == "mlp":
        return mdl.mlp_encoder_config(
            tuple(encoder["input_shape"]),
            encoder.get("num_classes", num_classes_hint),
            hidden=tuple(encoder.get("hidden", (64, 64))),
            seed=encoder.get("seed", 0),
        )
    if arch == "conv":
        return mdl.conv_encoder_config(
            tuple(encoder["input_shape"]),
            encoder.get("num_classes", num_classes_hint),
            seed=encoder.get("seed", 0),
        )
    if arch is None:
        return mdl.EncoderConfig.from_dict(encoder)
    raise ConfigError(f"unknown encoder arch {arch!r}")


# -- optimizer ---------------------------------------------------------------------


def rmsprop_step(value, grad, cache, lr, decay=0.99, eps=1e-8):
    """One RMSprop update: cache <- d*cache + (1-d)*g^2; step by g/sqrt(cache)."""
    cache = decay * cache + (1.0 - decay) * grad * grad
    return value - lr * grad / (np.sqrt(cache) + eps), cache


class RMSprop:
    """Joint optimizer over a named parameter dict."""

    def __init__(self, params: dict, lr: float, decay: float = 0.99, eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.decay = decay
        self.eps = eps
        self.cache = {name: np.zeros_like(p.data) for name, p in params.items()}

    def step(self) -> None:
        for name, p in self.params.items():
            grad = p.grad if p.grad is not None else np.zeros_like(p.data)
            if not np.all(np.isfinite(grad)):
                raise TrainingDivergenceError(f"non-finite gradient for {name}")
            p.data, self.cache[name] = rmsprop_step(
                p.data, grad, self.cache[name], self.lr, self.decay, self.eps
            )

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None


# -- evaluation --------------------------------------------------------------------


@dataclass
class EvalResult:
    labels: np.ndarray
    confidence: np.ndarray
    deep: np.ndarray
    nmi: float | None = None
    acc: float | None = None
    ari: float | None = None
    bcubed: list = field(default_factory=list)
    histogram: tuple | None = None
    onehot_fraction: float = 0.0


def _batch_tensor(samples: np.ndarray, input_shape) -> Tensor:
    flat_in = int(np.prod(input_shape))
    if tuple(samples.shape[1:]) == tuple(input_shape):
        return Tensor(samples)
    if int(np.prod(samples.shape[1:])) != flat_in:
        raise ConfigError(
            f"sample shape {samples.shape[1:]} incompatible with encoder input {tuple(input_shape)}"
        )
    return Tensor(samples.reshape((len(samples),) + tuple(input_shape)))


def full_forward(state: mdl.EncoderState, samples: np.ndarray, batch: int = 256):
    """Inference-mode predictions and deep features over a whole dataset."""
    zs, ds = [], []
    with no_grad():
        for start in range(0, len(samples), batch):
            x = _batch_tensor(samples[start : start + batch], state.config.input_shape)
            z, d, _ = mdl.encoder_forward(state, x)
            zs.append(z.data)
            ds.append(d.data)
    return np.concatenate(zs), np.concatenate(ds)


def evaluate(
    state: mdl.EncoderState,
    dataset: dio.Dataset,
    bcubed_thresholds=(),
    embeddings_path=None,
) -> EvalResult:
    """Cluster the dataset by argmax prediction and score against ground truth.

    Without labels the metrics are omitted but cluster assignments, the
    concentration histogram, and embeddings are still produced.
    """
    z, deep = full_forward(state, dataset.samples)
    pred = z.argmax(axis=1)
    result = EvalResult(
        labels=pred,
        confidence=z.max(axis=1),
        deep=deep,
        histogram=ga.concentration_histogram(z),
        onehot_fraction=ga.verify_one_hot(z, tol=0.1)[0],
    )
    if dataset.labels is not None and len(dataset.labels):
        result.nmi = mt.nmi(pred, dataset.labels)
        result.acc = mt.hungarian_acc(pred, dataset.labels)
        result.ari = mt.ari(pred, dataset.labels)
        if len(bcubed_thresholds):
            sim = _cosine_np(z)
            result.bcubed = ga.bcubed_curve(sim, dataset.labels, bcubed_thresholds)
    if embeddings_path is not None:
        _write_embeddings(embeddings_path, deep, pred)
    return result


def _cosine_np(z: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(z, axis=1, keepdims=True)
    return (z @ z.T) / (norms @ norms.T)


def _write_embeddings(path, deep: np.ndarray, labels: np.ndarray) -> None:
    cols = ",".join(f"d{i}" for i in range(deep.shape[1]))
    lines = [f"id,{cols},label"]
    for i in range(len(deep)):
        values = ",".join(repr(float(v)) for v in deep[i])
        lines.append(f"{i},{values},{int(labels[i])}")
    Path(path).write_text("\n".join(lines) + "\n")


# -- training ----------------------------------------------------------------------


@dataclass
class TrainResult:
    encoder: mdl.EncoderState
    discriminator: mdl.DiscriminatorState
    metrics_rows: list
    eval_history: list
    bcubed_history: list
    out_dir: Path | None


def _metrics_row(epoch, sums, steps, ev) -> dict:
    def avg(key):
        return sums[key] / max(1, steps)

    return {
        "epoch": epoch,
        "loss_total": avg("total"),
        "loss_pg": avg("l_pg"),
        "loss_pg_t": avg("l_pg_prime"),
        "loss_pl": avg("l_pl"),
        "loss_pl_t": avg("l_pl_prime"),
        "loss_mi": avg("l_mi"),
        "nmi": ev.nmi if ev.nmi is not None else float("nan"),
        "acc": ev.acc if ev.acc is not None else float("nan"),
        "ari": ev.ari if ev.ari is not None else float("nan"),
        "selected_label_frac": avg("selected"),
        "positive_pair_frac": avg("positive"),
    }


def _format_row(row: dict) -> str:
    parts = [str(row["epoch"])]
    for key in METRICS_HEADER.split(",")[1:]:
        parts.append(repr(float(row[key])))
    return ",".join(parts)


def _checkpoint_from(state, disc, opt, epoch, rng, config) -> dio.Checkpoint:
    params = {f"enc.{k}": v.data for k, v in state.params.items()}
    params.update({f"disc.{k}": v.data for k, v in disc.params.items()})
    cache = dict(opt.cache)  # keys already carry the enc./disc. prefixes
    return dio.Checkpoint(
        config={
            "encoder": state.config.to_dict(),
            "discriminator": disc.to_dict(),
            "experiment": config.to_dict(),
        },
        parameters=params,
        optimizer=cache,
        epoch=epoch,
        rng_state=rng.bit_generator.state,
    )


def _restore_into(ckpt: dio.Checkpoint, state, disc, opt, rng) -> int:
    for name, p in state.params.items():
        p.data = ckpt.parameters[f"enc.{name}"].copy()
    for name, p in disc.params.items():
        p.data = ckpt.parameters[f"disc.{name}"].copy()
    for name in opt.cache:
        opt.cache[name] = ckpt.optimizer[name].copy()
    rng.bit_generator.state = ckpt.rng_state
    return ckpt.epoch


def encoder_from_checkpoint(ckpt: dio.Checkpoint):
    """Rebuild encoder and discriminator states from a checkpoint alone."""
    enc_cfg = mdl.EncoderConfig.from_dict(ckpt.config["encoder"])
    state = mdl.init_encoder(enc_cfg)
    for name, p in state.params.items():
        p.data = ckpt.parameters[f"enc.{name}"].copy()
    dcfg = ckpt.config["discriminator"]
    disc = mdl.init_discriminator(dcfg["in_dim"], dcfg["hidden"], dcfg["seed"])
    for name, p in disc.params.items():
        p.data = ckpt.parameters[f"disc.{name}"].copy()
    return state, disc


def train(
    config: ExperimentConfig,
    dataset: dio.Dataset | None = None,
    resume_from=None,
) -> TrainResult:
    """Run the full training loop; returns states plus per-epoch records.

    With ``out_dir`` set, writes metrics.csv, bcubed.csv, embeddings.csv and
    rolling checkpoints there. ``resume_from`` continues a checkpointed run
    bit-exactly (same config required).
    """
    if dataset is None:
        dataset = load_dataset(config.dataset)
    n = len(dataset)
    if n < config.batch_size:
        raise ConfigError(f"batch_size {config.batch_size} exceeds dataset size {n}")
    num_classes = config.encoder.get("num_classes")
    enc_cfg = build_encoder_config({**config.encoder, "seed": config.seed}, num_classes)
    state = mdl.init_encoder(enc_cfg)
    disc = mdl.init_discriminator(
        in_dim=enc_cfg.deep_dim + enc_cfg.shallow_dim,
        hidden=config.disc_hidden,
        seed=config.seed + 1,
    )
    params = {f"enc.{k}": v for k, v in state.params.items()}
    params.update({f"disc.{k}": v for k, v in disc.params.items()})
    opt = RMSprop(params, config.learning_rate, config.rmsprop_decay, config.rmsprop_epsilon)
    rng = np.random.default_rng([config.seed, 2])

    out_dir = Path(config.out_dir) if config.out_dir else None
    if out_dir:
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "config.json").write_text(json.dumps(config.to_dict(), indent=2))

    start_epoch = 0
    if resume_from is not None:
        ckpt = dio.load_checkpoint(resume_from)
        if ckpt.config["encoder"] != enc_cfg.to_dict():
            raise ConfigError("checkpoint encoder config does not match experiment")
        start_epoch = _restore_into(ckpt, state, disc, opt, rng)
        log.info("resumed from %s at epoch %d", resume_from, start_epoch)

    base_spec = config.transform_spec()
    metrics_rows, eval_history, bcubed_history = [], [], []
    tracked = ("total", "l_pg", "l_pg_prime", "l_pl", "l_pl_prime", "l_mi", "selected", "positive")

    for epoch in range(start_epoch + 1, config.epochs + 1):
        shuffle_seed = int(rng.integers(2**63))
        sums = {key: 0.0 for key in tracked}
        steps = 0
        for idx in dio.minibatches(n, config.batch_size, shuffle_seed):
            transform_seed = int(rng.integers(2**63))
            pair_seed = int(rng.integers(2**63))
            breakdown = _train_step(
                config, state, disc, opt, dataset.samples[idx], base_spec,
                transform_seed, pair_seed, sums,
            )
            if breakdown is None:
                continue
            steps += 1
        ev = evaluate(state, dataset)
        row = _metrics_row(epoch, sums, steps, ev)
        metrics_rows.append(row)
        eval_history.append(
            {"epoch": epoch, "nmi": ev.nmi, "acc": ev.acc, "ari": ev.ari,
             "onehot_fraction": ev.onehot_fraction}
        )
        if dataset.labels is not None and (
            epoch == 1 or epoch == config.epochs or epoch % config.bcubed_every == 0
        ):
            z_full, _ = full_forward(state, dataset.samples)
            curve = ga.bcubed_curve(_cosine_np(z_full), dataset.labels, config.bcubed_thresholds)
            bcubed_history.append({"epoch": epoch, "curve": curve})
        if out_dir:
            dio.save_checkpoint(
                out_dir / "checkpoint_latest.bin",
                _checkpoint_from(state, disc, opt, epoch, rng, config),
            )

    if out_dir:
        _write_metrics_csv(out_dir / "metrics.csv", metrics_rows)
        _write_bcubed_csv(out_dir / "bcubed.csv", bcubed_history)
        dio.save_checkpoint(
            out_dir / "checkpoint_final.bin",
            _checkpoint_from(state, disc, opt, config.epochs, rng, config),
        )
        evaluate(state, dataset, embeddings_path=out_dir / "embeddings.csv")
    return TrainResult(
        encoder=state,
        discriminator=disc,
        metrics_rows=metrics_rows,
        eval_history=eval_history,
        bcubed_history=bcubed_history,
        out_dir=out_dir,
    )


def _train_step(config, state, disc, opt, samples, base_spec, transform_seed, pair_seed, sums):
    x = _batch_tensor(samples, state.config.input_shape)
    z, d, s = mdl.encoder_forward(state, x)
    sim = corr.cosine_similarity(z)

    # supervision targets from the detached current predictions
    graph = corr.build_pseudo_graph(sim.data, config.thres1)
    labels = corr.assign_pseudo_labels(z.data, config.thres2)

    terms = []
    l_pg = corr.pseudo_graph_loss(sim, graph)
    terms.append(l_pg)
    breakdown = corr.LossBreakdown(
        l_pg=l_pg.item(), alpha=config.alpha, beta=config.beta,
        fi_weight=config.fi_weight if config.use_feature_invariance else 0.0,
    )

    if config.use_pseudo_label:
        l_pl = corr.pseudo_label_loss(z, labels)
        terms.append(l_pl * config.alpha)
        breakdown.l_pl = l_pl.item()

    if config.use_robustness:
        transformed = tfm.apply_transform(x, dataclasses.replace(base_spec, seed=transform_seed))
        z_t, _, _ = mdl.encoder_forward(state, transformed.x)
        sim_t = corr.cosine_similarity(z_t)
        l_pg_t, l_pl_t = tfm.robustness_losses(z_t, sim_t, graph, labels)
        terms.append(l_pg_t)
        breakdown.l_pg_prime = l_pg_t.item()
        if config.use_pseudo_label:
            terms.append(l_pl_t * config.alpha)
            breakdown.l_pl_prime = l_pl_t.item()
        if config.use_feature_invariance:
            l_fi = tfm.feature_invariance_loss(z, z_t)
            terms.append(l_fi * config.fi_weight)
            breakdown.l_fi = l_fi.item()

    if config.use_mi:
        try:
            pairs = corr.sample_triplet_pairs(
                graph, sim.data, config.strategy, n=len(samples), seed=pair_seed
            )
            l_mi = corr.triplet_mi_loss(disc, d, s, pairs)
            terms.append(l_mi * config.beta)
            breakdown.l_mi = l_mi.item()
        except DegenerateBatchError as exc:
            log.info("skipping mutual-information term this step: %s", exc)

    try:
        breakdown.total = corr.total_loss(breakdown)
    except TrainingDivergenceError:
        log.error("divergence; loss breakdown: %s", breakdown.as_dict())
        raise

    total = terms[0]
    for term in terms[1:]:
        total = total + term
    opt.zero_grad()
    total.backward()
    opt.step()

    b = graph.w.shape[0]
    off = 1.0 - np.eye(b)
    sums["total"] += breakdown.total
    sums["l_pg"] += breakdown.l_pg
    sums["l_pg_prime"] += breakdown.l_pg_prime
    sums["l_pl"] += breakdown.l_pl
    sums["l_pl_prime"] += breakdown.l_pl_prime
    sums["l_mi"] += breakdown.l_mi
    sums["selected"] += labels.selected_fraction
    sums["positive"] += float((graph.w * off).sum() / max(1.0, off.sum()))
    return breakdown


def _write_metrics_csv(path, rows) -> None:
    lines = [METRICS_HEADER] + [_format_row(r) for r in rows]
    Path(path).write_text("\n".join(lines) + "\n")


def _write_bcubed_csv(path, history) -> None:
    lines = ["epoch,threshold,precision,recall"]
    for record in history:
        for t, p, r in record["curve"]:
            lines.append(f"{record['epoch']},{t!r},{p!r},{r!r}")
    Path(path).write_text("\n".join(lines) + "\n")


# -- probe protocol ----------------------------------------------------------------


def extract_features(state: mdl.EncoderState, samples: np.ndarray, which: str) -> np.ndarray:
    """Frozen-encoder features: the deep tap or the final classifier input."""
    if which not in ("deep-tap", "prediction-layer-input"):
        raise ConfigError(f"unknown probe feature {which!r}")
    outs = []
    with no_grad():
        for start in range(0, len(samples), 256):
            x = _batch_tensor(samples[start : start + 256], state.config.input_shape)
            acts = mdl.encoder_activations(state, x)
            tap = state.config.deep_tap if which == "deep-tap" else len(state.config.layers) - 2
            flat = acts[tap]
            outs.append(flat.data.reshape(len(flat.data), -1))
    return np.concatenate(outs)


def probe(
    state: mdl.EncoderState,
    train_split: dio.Dataset,
    test_split: dio.Dataset,
    feature: str = "deep-tap",
    hidden: int = 200,
    epochs: int = 60,
    batch_size: int = 32,
    lr: float = 1e-3,
    seed: int = 0,
) -> float:
    """Supervised single-hidden-layer readout on frozen features; top-1 accuracy."""
    if train_split.labels is None or test_split.labels is None:
        raise ConfigError("probe needs ground truth on both splits")
    classes = np.unique(train_split.labels)
    if not np.array_equal(classes, np.unique(test_split.labels)):
        raise ConfigError("probe splits disagree on the label set")
    lookup = {c: i for i, c in enumerate(classes)}
    y_train = np.array([lookup[c] for c in train_split.labels])
    y_test = np.array([lookup[c] for c in test_split.labels])

    x_train = extract_features(state, train_split.samples, feature)
    x_test = extract_features(state, test_split.samples, feature)
    k = len(classes)
    in_dim = x_train.shape[1]

    rng = np.random.default_rng(seed)
    limit1 = np.sqrt(6.0 / (in_dim + hidden))
    limit2 = np.sqrt(6.0 / (hidden + k))
    params = {
        "w1": Tensor(rng.uniform(-limit1, limit1, (hidden, in_dim)), requires_grad=True),
        "b1": Tensor(np.zeros(hidden), requires_grad=True),
        "w2": Tensor(rng.uniform(-limit2, limit2, (k, hidden)), requires_grad=True),
        "b2": Tensor(np.zeros(k), requires_grad=True),
    }
    opt = RMSprop(params, lr)

    def forward(xb):
        from . import autodiff as ad

        h = ad.relu(xb @ params["w1"].T + params["b1"])
        return ad.softmax(h @ params["w2"].T + params["b2"])

    from . import autodiff as ad

    for epoch in range(epochs):
        order_seed = int(rng.integers(2**63))
        for idx in dio.minibatches(len(x_train), min(batch_size, len(x_train)), order_seed):
            zb = forward(Tensor(x_train[idx]))
            onehot = np.zeros((len(idx), k))
            onehot[np.arange(len(idx)), y_train[idx]] = 1.0
            picked = (zb * Tensor(onehot)).sum(axis=1)
            loss = -(ad.log(ad.clamp(picked, 1e-12, 1.0))).mean()
            opt.zero_grad()
            loss.backward()
            opt.step()

    with no_grad():
        pred = forward(Tensor(x_test)).data.argmax(axis=1)
    return float((pred == y_test).mean())
