"""
NetFlow ingestion for CICIDS2017-style CSV exports.

Loads flows, keeps the fifteen features used by the detector, splits the data
by class, derives the NWS set (flows that never touch a web server) and
scores predictions per class.
"""

import ipaddress
import logging
import math
import os
import re
from dataclasses import dataclass, field, replace
from enum import IntEnum
from typing import Dict, List, Mapping, Optional, Sequence, Set, Tuple

import numpy as np
import pandas as pd
from sklearn.metrics import precision_recall_fscore_support

from nesy_soc.config import read_kv_file, split_list
from nesy_soc.errors import ConfigError, FlowDataError

logger = logging.getLogger(__name__)


class Label(IntEnum):
    """Flow classes; the integer value is the output index of the detector."""

    BENIGN = 0
    BRUTE_FORCE = 1
    XSS = 2

    @property
    def display(self) -> str:
        return LABEL_NAMES[self.value]

    @classmethod
    def from_display(cls, name: str) -> "Label":
        try:
            return cls(LABEL_NAMES.index(name))
        except ValueError:
            raise FlowDataError(f"unknown class name {name!r}; expected one of {', '.join(LABEL_NAMES)}")


LABEL_NAMES = ("Benign", "BruteForce", "XSS")
ATTACK_LABELS = (Label.BRUTE_FORCE, Label.XSS)

# CICIDS2017 label spellings after _normalize_label().
DEFAULT_LABEL_TABLE: Dict[str, Label] = {
    "benign": Label.BENIGN,
    "web attack - benign": Label.BENIGN,
    "web attack - brute force": Label.BRUTE_FORCE,
    "brute force": Label.BRUTE_FORCE,
    "bruteforce": Label.BRUTE_FORCE,
    "web attack - xss": Label.XSS,
    "xss": Label.XSS,
}

# FlowRecord field -> CICIDS2017 column header (leading blanks stripped).
DEFAULT_SCHEMA: Dict[str, str] = {
    "src_addr": "Source IP",
    "src_port": "Source Port",
    "dst_addr": "Destination IP",
    "dst_port": "Destination Port",
    "protocol": "Protocol",
    "flow_duration": "Flow Duration",
    "total_length_fwd": "Total Length of Fwd Packets",
    "total_length_bwd": "Total Length of Bwd Packets",
    "fwd_header_length": "Fwd Header Length",
    "bwd_header_length": "Bwd Header Length",
    "fwd_psh_flags": "Fwd PSH Flags",
    "fin_flag_count": "FIN Flag Count",
    "bwd_packet_length_min": "Bwd Packet Length Min",
    "init_win_bytes_fwd": "Init_Win_bytes_forward",
    "init_win_bytes_bwd": "Init_Win_bytes_backward",
    "subflow_fwd_bytes": "Subflow Fwd Bytes",
    "label": "Label",
}

NUMERIC_FIELDS = (
    "src_port",
    "dst_port",
    "protocol",
    "flow_duration",
    "total_length_fwd",
    "total_length_bwd",
    "fwd_header_length",
    "bwd_header_length",
    "fwd_psh_flags",
    "fin_flag_count",
    "bwd_packet_length_min",
    "init_win_bytes_fwd",
    "init_win_bytes_bwd",
    "subflow_fwd_bytes",
)

# CICIDS2017 feature order used by the detector; "Total Length of Fwd Packets" is listed twice and the
# encoded tensor keeps both entries.
FEATURE_FIELDS = (
    "src_port",
    "dst_port",
    "protocol",
    "flow_duration",
    "total_length_fwd",
    "total_length_bwd",
    "fwd_header_length",
    "bwd_header_length",
    "fwd_psh_flags",
    "fin_flag_count",
    "bwd_packet_length_min",
    "init_win_bytes_fwd",
    "init_win_bytes_bwd",
    "subflow_fwd_bytes",
    "total_length_fwd",
)
N_FEATURES = len(FEATURE_FIELDS)

DEFAULT_WEB_PORTS = (80, 443, 8080)


@dataclass(frozen=True)
class FlowRecord:
    """One NetFlow entry; ``label`` is None for unlabelled input."""

    src_addr: str
    src_port: int
    dst_addr: str
    dst_port: int
    protocol: int
    flow_duration: float
    total_length_fwd: float
    total_length_bwd: float
    fwd_header_length: float
    bwd_header_length: float
    fwd_psh_flags: float
    fin_flag_count: float
    bwd_packet_length_min: float
    init_win_bytes_fwd: float
    init_win_bytes_bwd: float
    subflow_fwd_bytes: float
    label: Optional[Label] = None

    def raw_features(self) -> np.ndarray:
        return np.array([float(getattr(self, name)) for name in FEATURE_FIELDS])


@dataclass(frozen=True)
class FeatureStats:
    """Per-feature minimum and maximum of the training split."""

    minimum: Tuple[float, ...]
    maximum: Tuple[float, ...]

    def to_dict(self) -> Dict[str, List[float]]:
        return {"min": list(self.minimum), "max": list(self.maximum)}

    @classmethod
    def from_dict(cls, data: Mapping[str, Sequence[float]]) -> "FeatureStats":
        return cls(tuple(float(v) for v in data["min"]), tuple(float(v) for v in data["max"]))


@dataclass(frozen=True)
class Dataset:
    """Immutable collection of flows plus the statistics used to scale them."""

    records: Tuple[FlowRecord, ...]
    stats: Optional[FeatureStats] = None
    dropped: int = 0

    def __len__(self) -> int:
        return len(self.records)

    @property
    def labels(self) -> np.ndarray:
        if any(r.label is None for r in self.records):
            raise FlowDataError("dataset is unlabelled")
        return np.array([int(r.label) for r in self.records], dtype=np.int64)

    def class_counts(self) -> Dict[Label, int]:
        counts = {label: 0 for label in Label}
        for r in self.records:
            if r.label is not None:
                counts[r.label] += 1
        return counts

    def subset(self, indices: Sequence[int]) -> "Dataset":
        return Dataset(tuple(self.records[i] for i in indices), self.stats, 0)

    def feature_matrix(self, stats: Optional[FeatureStats] = None) -> np.ndarray:
        """Normalised ``(n, 15)`` matrix; defaults to the dataset's own stats."""
        stats = stats or self.stats
        if stats is None:
            raise FlowDataError("no normalization statistics; fit them on the training split first")
        if not self.records:
            return np.zeros((0, N_FEATURES))
        raw = np.vstack([r.raw_features() for r in self.records])
        return _scale(raw, stats)


@dataclass(frozen=True)
class NwsConfig:
    """Where the web servers are; everything else is NWS."""

    web_server_addrs: Tuple[str, ...] = ()
    web_server_ports: Tuple[int, ...] = DEFAULT_WEB_PORTS

    def __post_init__(self):
        if not self.web_server_addrs and not self.web_server_ports:
            raise ConfigError("NWS config needs at least one web server address or port")


# ===== LOADING =====


def _normalize_label(text: str) -> str:
    text = re.sub(r"[–—\u0096�]", "-", str(text))
    return re.sub(r"\s+", " ", text).strip().lower()


def read_schema(path: str) -> Dict[str, str]:
    """Reads a ``field = column`` remap file on top of the CICIDS2017 defaults."""
    schema = dict(DEFAULT_SCHEMA)
    for key, column in read_kv_file(path).items():
        if key not in DEFAULT_SCHEMA:
            raise ConfigError(f"{path}: unknown schema field {key!r}")
        schema[key] = column
    return schema


def read_nws_config(path: str) -> NwsConfig:
    """Reads ``web_server_addrs`` / ``web_server_ports`` from a key-value file."""
    values = read_kv_file(path)
    unknown = set(values) - {"web_server_addrs", "web_server_ports"}
    if unknown:
        raise ConfigError(f"{path}: unknown NWS keys {', '.join(sorted(unknown))}")
    addrs = split_list(values.get("web_server_addrs", ""))
    for addr in addrs:
        try:
            ipaddress.ip_address(addr)
        except ValueError:
            raise ConfigError(f"{path}: invalid web server address {addr!r}")
    if "web_server_ports" in values:
        try:
            ports = tuple(int(p) for p in split_list(values["web_server_ports"]))
        except ValueError:
            raise ConfigError(f"{path}: web_server_ports must be integers")
    else:
        ports = DEFAULT_WEB_PORTS
    return NwsConfig(tuple(addrs), ports)


def load_flows(
    path: str,
    schema: Optional[Mapping[str, str]] = None,
    label_table: Optional[Mapping[str, Label]] = None,
    labelled: bool = True,
) -> Dataset:
    """
    Loads a CICIDS2017-style CSV into a Dataset.

    Parameters
    ----------
    path : str
        CSV file with a header row.
    schema : dict, optional
        FlowRecord field -> column header. Defaults to the CICIDS2017 names.
    label_table : dict, optional
        Normalised label text -> Label. Defaults to the CICIDS2017 spellings.
    labelled : bool, optional
        If False the label column is neither required nor read.

    Notes
    -----
    Rows whose required fields are missing, non-numeric, infinite, negative or
    out of range are dropped and counted in ``Dataset.dropped``; so are rows
    with a blank label. A non-empty unknown label string aborts the load.
    """
    schema = dict(DEFAULT_SCHEMA if schema is None else schema)
    table = {_normalize_label(k): v for k, v in (label_table or DEFAULT_LABEL_TABLE).items()}

    try:
        df = pd.read_csv(path, dtype=str, keep_default_na=False, encoding="utf-8", encoding_errors="replace")
    except pd.errors.EmptyDataError:
        raise FlowDataError(f"{path}: missing header row")
    except OSError as exc:
        raise FlowDataError(f"{path}: {exc}")
    df.columns = [str(c).strip() for c in df.columns]

    wanted = {k: v for k, v in schema.items() if labelled or k != "label"}
    missing = [column for column in wanted.values() if column not in df.columns]
    if missing:
        raise FlowDataError(f"{path}: missing columns {', '.join(missing)}")

    # ===== NUMERIC FIELDS =====
    numeric = pd.DataFrame(
        {name: pd.to_numeric(df[wanted[name]].str.strip(), errors="coerce") for name in NUMERIC_FIELDS}
    )
    valid = np.isfinite(numeric.to_numpy(dtype=float)).all(axis=1)
    valid &= (numeric >= 0).all(axis=1).to_numpy()
    valid &= (numeric["src_port"] <= 65535).to_numpy() & (numeric["dst_port"] <= 65535).to_numpy()

    # ===== ADDRESSES =====
    src = df[wanted["src_addr"]].str.strip()
    dst = df[wanted["dst_addr"]].str.strip()
    valid &= np.array([_is_address(a) and _is_address(b) for a, b in zip(src, dst)], dtype=bool)

    # ===== LABELS =====
    labels: List[Optional[Label]] = [None] * len(df)
    if labelled:
        raw_labels = df[wanted["label"]]
        valid &= np.array([_normalize_label(v) != "" for v in raw_labels], dtype=bool)
        unknown = sorted({v for v, ok in zip(raw_labels, valid) if ok and _normalize_label(v) not in table})
        if unknown:
            raise FlowDataError(f"{path}: unknown label values: {', '.join(repr(u) for u in unknown)}")
        labels = [table[_normalize_label(v)] if ok else None for v, ok in zip(raw_labels, valid)]

    values = numeric.to_numpy(dtype=float)
    column = {name: j for j, name in enumerate(NUMERIC_FIELDS)}
    records = []
    for i in np.flatnonzero(valid):
        row = {name: values[i, j] for name, j in column.items()}
        records.append(
            FlowRecord(
                src_addr=src.iloc[i],
                src_port=int(row["src_port"]),
                dst_addr=dst.iloc[i],
                dst_port=int(row["dst_port"]),
                protocol=int(row["protocol"]),
                **{name: float(row[name]) for name in NUMERIC_FIELDS[3:]},
                label=labels[i],
            )
        )

    dropped = int(len(df) - len(records))
    if not records:
        raise FlowDataError(f"{path}: no parseable rows ({dropped} dropped)")
    if dropped:
        logger.warning("%s: dropped %d malformed rows", path, dropped)
    logger.info("loaded %d flows from %s", len(records), path)
    return Dataset(tuple(records), None, dropped)


def _is_address(text: str) -> bool:
    try:
        ipaddress.ip_address(text)
    except ValueError:
        return False
    return True


# ===== SPLIT AND FEATURES =====


def _round_half_up(x: float) -> int:
    # 5 * 0.7 is 3.4999999999999996 in binary; round away the representation error first.
    return int(math.floor(round(x, 9) + 0.5))


def fit_stats(dataset: Dataset) -> FeatureStats:
    """Min/max of every feature over ``dataset``."""
    if not len(dataset):
        raise FlowDataError("cannot fit normalization statistics on an empty dataset")
    raw = np.vstack([r.raw_features() for r in dataset.records])
    return FeatureStats(tuple(raw.min(axis=0).tolist()), tuple(raw.max(axis=0).tolist()))


def split(dataset: Dataset, train_fraction: float, seed: int) -> Tuple[Dataset, Dataset]:
    """
    Stratified, seeded train/test split.

    Each class contributes ``round_half_up(train_fraction * n_class)`` flows
    to the training part. Both parts keep the original record order and carry
    the statistics fitted on the training part. Every class needs at least
    two members, absent classes included.
    """
    if not 0.0 < train_fraction < 1.0:
        raise FlowDataError(f"train fraction must lie strictly between 0 and 1, got {train_fraction}")
    labels = dataset.labels
    rng = np.random.default_rng(seed)
    train_idx: List[int] = []
    for label in Label:
        members = np.flatnonzero(labels == int(label))
        if len(members) < 2:
            raise FlowDataError(f"class {label.display} has {len(members)} member(s); need at least 2 to split")
        k = _round_half_up(train_fraction * len(members))
        train_idx.extend(rng.permutation(members)[:k].tolist())

    in_train = np.zeros(len(dataset), dtype=bool)
    in_train[train_idx] = True
    train = dataset.subset(np.flatnonzero(in_train).tolist())
    test = dataset.subset(np.flatnonzero(~in_train).tolist())
    stats = fit_stats(train)
    logger.info("split %d flows into %d train / %d test (seed %d)", len(dataset), len(train), len(test), seed)
    return replace(train, stats=stats), replace(test, stats=stats)


def _scale(raw: np.ndarray, stats: FeatureStats) -> np.ndarray:
    lo = np.asarray(stats.minimum)
    hi = np.asarray(stats.maximum)
    span = hi - lo
    safe = np.where(span > 0, span, 1.0)
    scaled = np.where(span > 0, (raw - lo) / safe, 0.0)
    return np.clip(scaled, 0.0, 1.0)


def extract_features(record: FlowRecord, stats: FeatureStats) -> np.ndarray:
    """Min-max scaled 15-vector; values outside the training range clamp to [0, 1]."""
    return _scale(record.raw_features(), stats)


# ===== DOMAIN KNOWLEDGE =====


def compute_nws(dataset: Dataset, config: NwsConfig) -> Set[int]:
    """Indices of flows where neither endpoint is a web server address or web port."""
    if config is None:
        raise ConfigError("NWS config is required")
    addrs = {str(ipaddress.ip_address(a)) for a in config.web_server_addrs}
    ports = set(config.web_server_ports)
    nws = set()
    for i, r in enumerate(dataset.records):
        if r.src_addr in addrs or r.dst_addr in addrs:
            continue
        if r.src_port in ports or r.dst_port in ports:
            continue
        nws.add(i)
    return nws


def nws_diagnostics(dataset: Dataset, nws: Set[int]) -> float:
    """Fraction of attack-labelled flows that fall inside NWS (expected ~0)."""
    attacks = [i for i, r in enumerate(dataset.records) if r.label in ATTACK_LABELS]
    if not attacks:
        return 0.0
    inside = sum(1 for i in attacks if i in nws)
    fraction = inside / len(attacks)
    if inside:
        logger.warning("%d of %d attack-labelled flows fall inside NWS; check the web server config", inside, len(attacks))
    return fraction


# ===== METRICS =====


@dataclass(frozen=True)
class ClassMetrics:
    precision: float
    recall: float
    f1: float


def metrics(predictions: Sequence[int], truth: Sequence[int]) -> Dict[Label, ClassMetrics]:
    """One-vs-rest precision, recall and F1 per class; 0/0 is defined as 0."""
    if len(predictions) != len(truth):
        raise FlowDataError(f"length mismatch: {len(predictions)} predictions for {len(truth)} labels")
    if not len(truth):
        raise FlowDataError("cannot score an empty prediction list")
    labels = [int(label) for label in Label]
    precision, recall, f1, _ = precision_recall_fscore_support(
        [int(t) for t in truth],
        [int(p) for p in predictions],
        labels=labels,
        average=None,
        zero_division=0,
    )
    return {
        label: ClassMetrics(float(precision[i]), float(recall[i]), float(f1[i]))
        for i, label in enumerate(Label)
    }


# ===== MINIATURE DATASET =====

WEB_SERVER = "192.168.10.50"
DOMAIN_CONTROLLER = "192.168.10.3"
ATTACKER = "205.174.165.73"
RESOLVER = "192.168.10.1"


@dataclass
class _Profile:
    """Uniform ranges of one traffic cluster; flags are fixed values."""

    duration: Tuple[float, float]
    fwd_len: Tuple[float, float]
    bwd_len: Tuple[float, float]
    fwd_hdr: Tuple[float, float]
    bwd_hdr: Tuple[float, float]
    psh: Optional[int]
    fin: Optional[int]
    bwd_min: Tuple[float, float]
    win_fwd: Tuple[int, ...]
    win_bwd: Tuple[float, float]
    protocol: int = 6
    extra: Dict[str, float] = field(default_factory=dict)


# fmt: off
_PROFILES = {
    "web": _Profile((6e6, 1.2e7), (2500, 4000), (12000, 20000), (600, 1000), (500, 900), None, None, (0, 60), (8192, 65535), (235, 2000)),
    "bf_core": _Profile((2.5e6, 3.5e6), (600, 800), (3000, 4000), (200, 260), (150, 200), 0, 1, (0, 0), (29200,), (28960, 28960)),
    "bf_short": _Profile((0.8e6, 1.2e6), (100, 200), (0, 500), (40, 80), (20, 40), 1, 0, (0, 0), (29200,), (0, 0)),
    "xss_core": _Profile((4e6, 5e6), (1500, 2000), (6000, 8000), (300, 400), (240, 320), 1, 1, (0, 0), (29200,), (28960, 28960)),
    "xss_short": _Profile((1.5e6, 2e6), (1000, 1200), (1000, 2000), (120, 160), (80, 120), 0, 0, (0, 0), (29200,), (2048, 2048)),
    "dns": _Profile((1e3, 5e4), (40, 80), (40, 120), (8, 16), (8, 16), 0, 0, (40, 120), (0,), (0, 0), protocol=17),
}
# fmt: on


def synthesize_flows(n_flows: int = 2000, seed: int = 7) -> pd.DataFrame:
    """
    Miniature CICIDS2017-like dataset with a planted NWS structure.

    Composition (fractions of ``n_flows``): 54% benign web traffic to the web
    server, 20% brute-force and 20% XSS flows from an external attacker (a
    quarter of each attack class uses a short-flow signature), 5% benign
    Kerberos/LDAP flows to the domain controller sharing the short-flow
    signatures of the attacks, and 1% DNS/RPC flows. The domain-controller and
    DNS/RPC flows form the NWS set.
    """
    rng = np.random.default_rng(seed)
    n_attack = int(round(0.2 * n_flows))
    n_short = n_attack // 4
    n_decoy = int(round(0.025 * n_flows))
    n_misc = max(2, int(round(0.01 * n_flows)))
    n_web = n_flows - 2 * n_attack - 2 * n_decoy - n_misc

    groups = [
        ("web", n_web, "BENIGN", None, WEB_SERVER, (80, 443)),
        ("bf_core", n_attack - n_short, "Web Attack – Brute Force", ATTACKER, WEB_SERVER, (80,)),
        ("bf_short", n_short, "Web Attack – Brute Force", ATTACKER, WEB_SERVER, (80,)),
        ("xss_core", n_attack - n_short, "Web Attack – XSS", ATTACKER, WEB_SERVER, (80,)),
        ("xss_short", n_short, "Web Attack – XSS", ATTACKER, WEB_SERVER, (80,)),
        ("bf_short", n_decoy, "BENIGN", None, DOMAIN_CONTROLLER, (88,)),
        ("xss_short", n_decoy, "BENIGN", None, DOMAIN_CONTROLLER, (389,)),
        ("dns", n_misc, "BENIGN", None, RESOLVER, (53, 49666, 62000)),
    ]

    rows = []
    for profile_name, count, label, src, dst, ports in groups:
        p = _PROFILES[profile_name]
        for _ in range(count):
            fwd = rng.uniform(*p.fwd_len)
            rows.append(
                {
                    "Source IP": src or f"192.168.10.{int(rng.integers(5, 30))}",
                    "Source Port": int(rng.integers(32768, 61000)),
                    "Destination IP": dst,
                    "Destination Port": int(ports[int(rng.integers(0, len(ports)))]),
                    "Protocol": p.protocol,
                    "Flow Duration": int(rng.uniform(*p.duration)),
                    "Total Length of Fwd Packets": int(fwd),
                    "Total Length of Bwd Packets": int(rng.uniform(*p.bwd_len)),
                    "Fwd Header Length": int(rng.uniform(*p.fwd_hdr)),
                    "Bwd Header Length": int(rng.uniform(*p.bwd_hdr)),
                    "Fwd PSH Flags": p.psh if p.psh is not None else int(rng.integers(0, 2)),
                    "FIN Flag Count": p.fin if p.fin is not None else int(rng.integers(0, 2)),
                    "Bwd Packet Length Min": int(rng.uniform(*p.bwd_min)),
                    "Init_Win_bytes_forward": int(p.win_fwd[int(rng.integers(0, len(p.win_fwd)))]),
                    "Init_Win_bytes_backward": int(rng.uniform(*p.win_bwd)),
                    "Subflow Fwd Bytes": int(fwd),
                    "Label": label,
                }
            )

    frame = pd.DataFrame(rows)
    order = rng.permutation(len(frame))
    return frame.iloc[order].reset_index(drop=True)


def write_synthetic_bundle(directory: str, n_flows: int = 2000, seed: int = 7) -> Dict[str, str]:
    """Writes ``flows.csv``, ``nws.conf`` and ``alerts.conf`` for the miniature dataset."""
    os.makedirs(directory, exist_ok=True)
    paths = {
        "flows": os.path.join(directory, "flows.csv"),
        "nws": os.path.join(directory, "nws.conf"),
        "alerts": os.path.join(directory, "alerts.conf"),
    }
    synthesize_flows(n_flows, seed).to_csv(paths["flows"], index=False, lineterminator="\n")
    with open(paths["nws"], "w", encoding="utf-8") as fh:
        fh.write("# the only web server of the miniature network\n")
        fh.write(f"web_server_addrs = {WEB_SERVER}\n")
        fh.write("web_server_ports = 80, 443, 8080\n")
    with open(paths["alerts"], "w", encoding="utf-8") as fh:
        fh.write("# detector class -> symbolic alert\n")
        fh.write("BruteForce = webBruteForce\n")
        fh.write("XSS = webXss\n")
    logger.info("wrote miniature dataset (%d flows, seed %d) to %s", n_flows, seed, directory)
    return paths
