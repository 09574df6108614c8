"""
The class-membership predicate ``P(x, class)`` and its training.

One multilayer perceptron serves both detectors: the baseline is trained on
mean cross-entropy, the logic tensor network on the satisfaction of four
axioms (three class-membership axioms and the NWS axiom). Both start from the
same seeded initialisation.
"""

import json
import logging
import struct
from dataclasses import asdict, dataclass, field, replace
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from nesy_soc import fuzzcore as fz
from nesy_soc.errors import ModelError
from nesy_soc.flowdata import LABEL_NAMES, FeatureStats, Label, N_FEATURES

logger = logging.getLogger(__name__)

HIDDEN_DIMS = (16, 16, 8)
REFERENCE_DIMS = (N_FEATURES,) + HIDDEN_DIMS + (len(Label),)
FULL_BATCH_LIMIT = 10_000
BATCH_SIZE = 512

CHECKPOINT_MAGIC = b"NESYCKPT"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class TrainConfig:
    """Hyperparameters of one training run."""

    epochs: int = 200
    batch_size: int = BATCH_SIZE
    seed: int = 1
    learning_rate: float = 0.01
    p: float = 2.0
    mode: str = "ltn"
    layer_dims: Tuple[int, ...] = REFERENCE_DIMS
    # seeded stratified split the training rows came from, when there was one
    split_seed: Optional[int] = None
    split_fraction: Optional[float] = None

    def __post_init__(self):
        if self.mode not in ("baseline", "ltn"):
            raise ModelError(f"unknown training mode {self.mode!r}")
        if self.epochs < 0 or self.batch_size < 1:
            raise ModelError("epochs must be >= 0 and batch size >= 1")


@dataclass(eq=False)
class MlpModel:
    """
    Fully connected network with ELU hidden layers and a softmax head.

    Attributes
    ----------
    layer_dims : tuple of int
        Input width, hidden widths, output width.
    params : list of numpy.ndarray
        ``[W0, b0, W1, b1, ...]`` with ``W_k`` of shape ``(in, out)``.
    activation : str
        Hidden activation tag; only ``elu`` is implemented.
    history : list of dict
        Per-epoch training record; not part of the model's identity.
    """

    layer_dims: Tuple[int, ...]
    params: List[np.ndarray]
    activation: str = "elu"
    config: Optional[TrainConfig] = None
    stats: Optional[FeatureStats] = None
    history: List[Dict[str, float]] = field(default_factory=list, compare=False, repr=False)

    def parameter_bytes(self) -> bytes:
        return b"".join(np.ascontiguousarray(p, dtype="<f8").tobytes() for p in self.params)

    def forward(self, x: fz.Operand) -> Tuple[fz.ComputeNode, List[fz.ComputeNode]]:
        """Builds the graph of ``P(x, .)``; returns the output node and the parameter nodes."""
        nodes = [fz.parameter(p, name=f"{'W' if i % 2 == 0 else 'b'}{i // 2}") for i, p in enumerate(self.params)]
        h = x if isinstance(x, fz.ComputeNode) else fz.constant(x)
        n_layers = len(self.layer_dims) - 1
        for k in range(n_layers):
            h = fz.affine(h, nodes[2 * k], nodes[2 * k + 1])
            if k < n_layers - 1:
                h = fz.elu(h)
        return fz.softmax(h), nodes


@dataclass
class AdamState:
    """First/second moments per parameter and the step counter."""

    m: List[np.ndarray]
    v: List[np.ndarray]
    t: int = 0
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_model(cls, model: MlpModel, learning_rate: float = 1e-3, **kwargs) -> "AdamState":
        return cls(
            [np.zeros_like(p) for p in model.params],
            [np.zeros_like(p) for p in model.params],
            0,
            learning_rate,
            **kwargs,
        )


# ===== MODEL =====


def mlp_init(layer_dims: Sequence[int], seed: int) -> MlpModel:
    """Glorot-uniform weights and zero biases drawn from ``seed``."""
    dims = tuple(int(d) for d in layer_dims)
    if len(dims) < 2 or any(d <= 0 for d in dims):
        raise ModelError(f"layer dimensions must be at least two positive widths, got {dims}")
    rng = np.random.default_rng(seed)
    params: List[np.ndarray] = []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        params.append(rng.uniform(-limit, limit, size=(fan_in, fan_out)))
        params.append(np.zeros(fan_out))
    return MlpModel(dims, params)


def _check_finite(features: np.ndarray) -> None:
    if not np.isfinite(features).all():
        raise ModelError("features must be finite numbers")


def predict_batch(model: MlpModel, features: np.ndarray) -> np.ndarray:
    """Class memberships for every row of ``features``."""
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2 or features.shape[1] != model.layer_dims[0]:
        raise ModelError(f"expected a matrix with {model.layer_dims[0]} columns, got shape {features.shape}")
    _check_finite(features)
    out, _ = model.forward(features)
    return out.value


def predict(model: MlpModel, features: Sequence[float]) -> np.ndarray:
    """Membership truth values ``P(x, Benign), P(x, BruteForce), P(x, XSS)``."""
    features = np.asarray(features, dtype=np.float64)
    if features.shape != (model.layer_dims[0],):
        raise ModelError(f"expected {model.layer_dims[0]} features, got shape {features.shape}")
    _check_finite(features)
    out, _ = model.forward(features)
    return out.value


def classify_memberships(memberships: np.ndarray) -> np.ndarray:
    """Argmax per row; ``np.argmax`` keeps the lowest index on ties."""
    return np.argmax(np.atleast_2d(memberships), axis=1)


def classify(model: MlpModel, features: Sequence[float]) -> Label:
    """Class with the highest membership."""
    return Label(int(classify_memberships(predict(model, features))[0]))


def classify_batch(model: MlpModel, features: np.ndarray) -> np.ndarray:
    return classify_memberships(predict_batch(model, features))


def adam_step(
    model: MlpModel, grads: Sequence[np.ndarray], state: AdamState
) -> Tuple[MlpModel, AdamState]:
    """One bias-corrected Adam update; returns new model and state objects."""
    if len(grads) != len(model.params):
        raise ModelError(f"got {len(grads)} gradients for {len(model.params)} parameters")
    for p, g in zip(model.params, grads):
        if np.shape(g) != p.shape:
            raise ModelError(f"gradient shape {np.shape(g)} does not match parameter shape {p.shape}")

    t = state.t + 1
    b1, b2 = state.beta1, state.beta2
    new_m, new_v, new_params = [], [], []
    for p, g, m, v in zip(model.params, grads, state.m, state.v):
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        m_hat = m / (1.0 - b1 ** t)
        v_hat = v / (1.0 - b2 ** t)
        new_params.append(p - state.learning_rate * m_hat / (np.sqrt(v_hat) + state.eps))
        new_m.append(m)
        new_v.append(v)

    new_model = replace(model, params=new_params, history=model.history)
    return new_model, replace(state, m=new_m, v=new_v, t=t)


# ===== AXIOMS =====


@dataclass(frozen=True, eq=False)
class Partitions:
    """Row indices of the training matrix referenced by the axioms."""

    benign: np.ndarray
    brute_force: np.ndarray
    xss: np.ndarray
    nws: np.ndarray

    @classmethod
    def from_labels(cls, labels: np.ndarray, nws_indices: Sequence[int]) -> "Partitions":
        labels = np.asarray(labels)
        nws = np.array(sorted(set(int(i) for i in nws_indices)), dtype=np.int64)
        if nws.size and (nws.min() < 0 or nws.max() >= len(labels)):
            raise ModelError("NWS indices fall outside the training set")
        return cls(
            np.flatnonzero(labels == Label.BENIGN),
            np.flatnonzero(labels == Label.BRUTE_FORCE),
            np.flatnonzero(labels == Label.XSS),
            nws,
        )

    def named(self) -> List[Tuple[str, np.ndarray]]:
        return [("Benign", self.benign), ("BruteForce", self.brute_force), ("XSS", self.xss), ("NWS", self.nws)]

    def check(self) -> None:
        for name, idx in self.named():
            if idx.size == 0:
                raise ModelError(f"empty partition for {name}; every axiom needs support")


def _axioms(
    memberships: fz.ComputeNode, rows: Mapping[str, np.ndarray], p: float = 2.0
) -> List[Tuple[str, fz.ComputeNode]]:
    """
    The four axioms over ``memberships`` (the output node of the predicate).

    ``rows`` maps Benign, BruteForce, XSS and NWS to row indices of the
    membership matrix:

    * forall x in B:   P(x, Benign)
    * forall x in BF:  P(x, BruteForce)
    * forall x in X:   P(x, XSS)
    * forall x in NWS: not (P(x, BruteForce) or P(x, XSS))
    """
    axioms = []
    for name, label in (("Benign", Label.BENIGN), ("BruteForce", Label.BRUTE_FORCE), ("XSS", Label.XSS)):
        member = fz.select(_take_rows(memberships, rows[name]), int(label))
        axioms.append((f"forall {name}", fz.forall_aggregate(member, p)))
    nws = _take_rows(memberships, rows["NWS"])
    web_attack = fz.fuzzy_or(fz.select(nws, int(Label.BRUTE_FORCE)), fz.select(nws, int(Label.XSS)))
    axioms.append(("forall NWS", fz.forall_aggregate(fz.fuzzy_not(web_attack), p)))
    return axioms


def _take_rows(x: fz.ComputeNode, rows: np.ndarray) -> fz.ComputeNode:
    rows = np.asarray(rows, dtype=np.int64)

    def backward_fn(g):
        gx = np.zeros_like(x.value)
        np.add.at(gx, rows, g)
        return [gx]

    return fz.ComputeNode("select", (x,), x.value[rows], backward_fn)


def axiom_set(
    model: MlpModel, features: np.ndarray, partitions: Partitions, p: float = 2.0
) -> List[Tuple[str, fz.ComputeNode]]:
    """Named axiom nodes grounded on the full partitions of ``features``."""
    partitions.check()
    out, _ = model.forward(np.asarray(features, dtype=np.float64))
    return _axioms(out, dict(partitions.named()), p)


def satisfaction(model: MlpModel, features: np.ndarray, partitions: Partitions, p: float = 2.0) -> float:
    """Aggregated truth of the four axioms on full partitions."""
    return fz.sat_aggregate([node for _, node in axiom_set(model, features, partitions, p)], p).item()


# ===== TRAINING =====


def _batches(rng: np.random.Generator, indices: np.ndarray, n_steps: int) -> List[np.ndarray]:
    """Splits a shuffled partition into ``n_steps`` non-empty chunks, recycling small partitions."""
    perm = rng.permutation(indices)
    if len(perm) < n_steps:
        perm = np.resize(perm, n_steps)
    return np.array_split(perm, n_steps)


def _steps_per_epoch(n: int, config: TrainConfig) -> int:
    if n <= FULL_BATCH_LIMIT:
        return 1
    return int(np.ceil(n / config.batch_size))


def _ordered_grads(model_nodes: List[fz.ComputeNode], grads: Dict[fz.ComputeNode, np.ndarray]) -> List[np.ndarray]:
    return [grads.get(node, np.zeros_like(node.value)) for node in model_nodes]


def _check_train_inputs(
    features: np.ndarray, labels: np.ndarray, config: TrainConfig
) -> Tuple[np.ndarray, np.ndarray]:
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if features.ndim != 2 or len(features) == 0:
        raise ModelError("training set is empty")
    if features.shape[1] != config.layer_dims[0]:
        raise ModelError(f"{features.shape[1]} feature columns for an input layer of {config.layer_dims[0]}")
    if len(features) != len(labels):
        raise ModelError(f"{len(features)} feature rows for {len(labels)} labels")
    return features, labels


def train_baseline(features: np.ndarray, labels: np.ndarray, config: TrainConfig) -> MlpModel:
    """Minimises mean cross-entropy with Adam; returns the trained baseline."""
    features, labels = _check_train_inputs(features, labels, config)
    config = replace(config, mode="baseline")
    model = replace(mlp_init(config.layer_dims, config.seed), config=config)
    state = AdamState.for_model(model, config.learning_rate)
    rng = np.random.default_rng((config.seed, 1))
    everything = np.arange(len(features))
    n_steps = _steps_per_epoch(len(features), config)

    for epoch in range(1, config.epochs + 1):
        losses = []
        for batch in _batches(rng, everything, n_steps):
            batch = np.sort(batch)
            out, nodes = model.forward(features[batch])
            loss = fz.cross_entropy(out, labels[batch])
            grads = fz.backward(loss)
            model, state = adam_step(model, _ordered_grads(nodes, grads), state)
            losses.append(loss.item())
        accuracy = float(np.mean(classify_batch(model, features) == labels))
        model.history.append({"epoch": epoch, "loss": float(np.mean(losses)), "accuracy": accuracy})
        logger.debug("baseline epoch %d loss %.6f accuracy %.4f", epoch, model.history[-1]["loss"], accuracy)

    if config.epochs:
        logger.info("baseline trained for %d epochs, final loss %.6f", config.epochs, model.history[-1]["loss"])
    return model


def train_ltn(features: np.ndarray, labels: np.ndarray, nws_indices: Sequence[int], config: TrainConfig) -> MlpModel:
    """
    Maximises the aggregated truth of the four axioms with Adam.

    The loss of every step is ``1 - sat_aggregate(axioms)``; above
    ``FULL_BATCH_LIMIT`` rows every partition is split into the same number
    of mini-batches so each step sees all four axioms.
    """
    features, labels = _check_train_inputs(features, labels, config)
    config = replace(config, mode="ltn")
    partitions = Partitions.from_labels(labels, nws_indices)
    partitions.check()
    model = replace(mlp_init(config.layer_dims, config.seed), config=config)
    state = AdamState.for_model(model, config.learning_rate)
    rng = np.random.default_rng((config.seed, 1))
    n_steps = _steps_per_epoch(len(features), config)

    for epoch in range(1, config.epochs + 1):
        chunks = {name: _batches(rng, idx, n_steps) for name, idx in partitions.named()}
        losses = []
        for step in range(n_steps):
            picked = {name: np.sort(chunks[name][step]) for name in chunks}
            used = np.unique(np.concatenate(list(picked.values())))
            rows = {name: np.searchsorted(used, idx) for name, idx in picked.items()}

            out, nodes = model.forward(features[used])
            sat = fz.sat_aggregate([node for _, node in _axioms(out, rows, config.p)], config.p)
            loss = fz.fuzzy_not(sat)
            grads = fz.backward(loss)
            model, state = adam_step(model, _ordered_grads(nodes, grads), state)
            losses.append(loss.item())
        sat_value = satisfaction(model, features, partitions, config.p)
        model.history.append({"epoch": epoch, "loss": float(np.mean(losses)), "satisfaction": sat_value})
        logger.debug("ltn epoch %d loss %.6f satisfaction %.6f", epoch, model.history[-1]["loss"], sat_value)

    if config.epochs:
        logger.info("ltn trained for %d epochs, final satisfaction %.6f", config.epochs, model.history[-1]["satisfaction"])
    return model


# ===== CHECKPOINTS =====


def save_checkpoint(path: str, model: MlpModel) -> None:
    """
    Writes the model to ``path``.

    Layout: ``NESYCKPT``, uint32 little-endian header length, JSON header
    (sorted keys), then every parameter as little-endian float64 in header
    order.
    """
    header = {
        "format_version": CHECKPOINT_VERSION,
        "layer_dims": list(model.layer_dims),
        "activation": model.activation,
        "shapes": [list(p.shape) for p in model.params],
        "train_config": _config_to_dict(model.config),
        "feature_stats": model.stats.to_dict() if model.stats else None,
        "labels": list(LABEL_NAMES),
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(model.parameter_bytes())
    logger.info("saved checkpoint %s", path)


def load_checkpoint(path: str) -> MlpModel:
    """Reads a checkpoint written by ``save_checkpoint``."""
    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except OSError as exc:
        raise ModelError(f"cannot read checkpoint {path}: {exc}")
    if not data.startswith(CHECKPOINT_MAGIC):
        raise ModelError(f"{path} is not a checkpoint")
    offset = len(CHECKPOINT_MAGIC)
    if len(data) < offset + 4:
        raise ModelError(f"{path}: truncated before the header length")
    (length,) = struct.unpack_from("<I", data, offset)
    offset += 4
    if len(data) < offset + length:
        raise ModelError(f"{path}: header of {length} bytes is truncated")
    try:
        header = json.loads(data[offset:offset + length].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ModelError(f"{path}: corrupt header: {exc}")
    offset += length
    if not isinstance(header, dict):
        raise ModelError(f"{path}: corrupt header")
    if header.get("format_version") != CHECKPOINT_VERSION:
        raise ModelError(f"{path}: unsupported checkpoint version {header.get('format_version')}")
    if header.get("labels") != list(LABEL_NAMES):
        raise ModelError(f"{path}: checkpoint labels {header.get('labels')} do not match {list(LABEL_NAMES)}")

    try:
        shapes = [tuple(int(d) for d in shape) for shape in header["shapes"]]
        payload = 8 * sum(int(np.prod(shape)) for shape in shapes)
        if len(data) - offset != payload:
            raise ModelError(f"{path}: expected {payload} parameter bytes, found {len(data) - offset}")
        params = []
        for shape in shapes:
            count = int(np.prod(shape))
            chunk = np.frombuffer(data, dtype="<f8", count=count, offset=offset)
            params.append(chunk.reshape(shape).astype(np.float64))
            offset += 8 * count

        stats = FeatureStats.from_dict(header["feature_stats"]) if header["feature_stats"] else None
        config = TrainConfig(**_config_from_dict(header["train_config"])) if header["train_config"] else None
        return MlpModel(tuple(header["layer_dims"]), params, header["activation"], config, stats)
    except ModelError:
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise ModelError(f"{path}: corrupt header: {exc!r}")


def _config_to_dict(config: Optional[TrainConfig]) -> Optional[dict]:
    if config is None:
        return None
    data = asdict(config)
    data["layer_dims"] = list(config.layer_dims)
    return data


def _config_from_dict(data: Mapping) -> dict:
    data = dict(data)
    data["layer_dims"] = tuple(data["layer_dims"])
    return data
