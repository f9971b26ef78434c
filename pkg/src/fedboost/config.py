"""Experiment configuration: dataclasses, validation, JSON (de)serialization."""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict

from .datasets import GaussianSpec
from .errors import ConfigError
from .nn import OptimizerConfig, mlp_layout
from .protocol import ProtocolSettings
from .quantize import QuantConfig

AGGREGATORS = ("fedavg", "fedboosting", "centralized")
ENCRYPTIONS = ("none", "he", "he_dp")
WEIGHTING_MODES = ("literal", "score")
TRANSPORTS = ("loopback", "tcp")


@dataclass(frozen=True)
class ClientSpec:
    """One client's data source: cluster mixture, sampling seed, and an
    optional label-poisoning fraction applied to its training part."""

    clusters: tuple[GaussianSpec, ...]
    seed: int
    poison_flip_frac: float = 0.0


@dataclass(frozen=True)
class GridSpec:
    xmin: float = -6.0
    xmax: float = 6.0
    ymin: float = -6.0
    ymax: float = 6.0
    steps: int = 101


@dataclass
class ExperimentConfig:
    aggregator: str = "fedboosting"
    encryption: str = "none"
    weighting_mode: str = "score"
    rounds: int = 50
    epochs: int = 1
    batch_size: int = 8
    learning_rate: float = 0.003
    clients: tuple[ClientSpec, ...] = ()
    quant: QuantConfig = field(default_factory=QuantConfig)
    key_bits: int = 128
    p_hat: float = 0.9
    dp_jitter: float = 0.0
    train_frac: float = 0.9
    val_frac_of_train: float = 0.1
    n_hidden: int = 8
    timeout_s: float = 60.0
    transport: str = "loopback"
    tcp_host: str = "127.0.0.1"
    tcp_port: int = 0  # 0 picks an ephemeral port
    out_dir: str | None = None
    master_seed: int = 0

    def validate(self) -> None:
        if self.aggregator not in AGGREGATORS:
            raise ConfigError("aggregator", f"must be one of {AGGREGATORS}, got {self.aggregator!r}")
        if self.encryption not in ENCRYPTIONS:
            raise ConfigError("encryption", f"must be one of {ENCRYPTIONS}, got {self.encryption!r}")
        if self.weighting_mode not in WEIGHTING_MODES:
            raise ConfigError(
                "weighting_mode", f"must be one of {WEIGHTING_MODES}, got {self.weighting_mode!r}"
            )
        if self.transport not in TRANSPORTS:
            raise ConfigError("transport", f"must be one of {TRANSPORTS}, got {self.transport!r}")
        if self.rounds < 1:
            raise ConfigError("rounds", f"must be >= 1, got {self.rounds}")
        if self.epochs < 1:
            raise ConfigError("epochs", f"must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError("batch_size", f"must be >= 1, got {self.batch_size}")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate", f"must be > 0, got {self.learning_rate}")
        if not self.clients:
            raise ConfigError("clients", "at least one client is required")
        n = len(self.clients)
        if self.aggregator == "fedboosting" and n < 2:
            raise ConfigError("clients", f"cross-validation needs >= 2 clients, got {n}")
        if self.encryption == "he_dp" and self.aggregator != "fedboosting":
            raise ConfigError(
                "encryption", "he_dp perturbs cross-validation models, so it requires fedboosting"
            )
        if self.aggregator == "centralized" and self.encryption != "none":
            raise ConfigError("encryption", "centralized training has no gradients to encrypt")
        if self.encryption != "none" and (self.key_bits < 64 or self.key_bits % 2):
            raise ConfigError("key_bits", f"must be even and >= 64, got {self.key_bits}")
        if self.encryption == "he_dp" and not (1.0 / n < self.p_hat <= 1.0):
            raise ConfigError("p_hat", f"must lie in (1/{n}, 1], got {self.p_hat}")
        if self.dp_jitter < 0:
            raise ConfigError("dp_jitter", f"must be >= 0, got {self.dp_jitter}")
        if not (0 < self.train_frac < 1):
            raise ConfigError("train_frac", f"must lie in (0, 1), got {self.train_frac}")
        if not (0 < self.val_frac_of_train < 1):
            raise ConfigError(
                "val_frac_of_train", f"must lie in (0, 1), got {self.val_frac_of_train}"
            )
        if self.n_hidden < 1:
            raise ConfigError("n_hidden", f"must be >= 1, got {self.n_hidden}")
        if self.timeout_s <= 0:
            raise ConfigError("timeout_s", f"must be > 0, got {self.timeout_s}")
        for i, client in enumerate(self.clients):
            if not client.clusters:
                raise ConfigError(f"clients[{i}].clusters", "must not be empty")
            if not (0 <= client.poison_flip_frac <= 1):
                raise ConfigError(
                    f"clients[{i}].poison_flip_frac",
                    f"must lie in [0, 1], got {client.poison_flip_frac}",
                )

    def to_protocol_settings(self) -> ProtocolSettings:
        return ProtocolSettings(
            n_clients=len(self.clients),
            rounds=self.rounds,
            aggregator=self.aggregator,
            encryption=self.encryption,
            weighting_mode=self.weighting_mode,
            layout=mlp_layout(2, self.n_hidden, 2),
            optimizer=OptimizerConfig(kind="adam", learning_rate=self.learning_rate),
            batch_size=self.batch_size,
            epochs=self.epochs,
            quant=self.quant,
            key_bits=self.key_bits,
            p_hat=self.p_hat,
            dp_jitter=self.dp_jitter,
            master_seed=self.master_seed,
            timeout_s=self.timeout_s,
        )


def two_client_noniid(
    samples_per_client: int = 40000,
    master_seed: int = 0,
    poison_client: int | None = None,
    poison_flip_frac: float = 0.5,
) -> tuple[ClientSpec, ClientSpec]:
    """Default Non-IID pair: horizontally separated unit-covariance clusters for
    client 1, vertically separated anisotropic clusters for client 2."""
    half = samples_per_client // 2
    identity = ((1.0, 0.0), (0.0, 1.0))
    aniso = ((1.5, 0.0), (0.0, 0.5))
    specs = (
        ClientSpec(
            clusters=(
                GaussianSpec((-2.0, 0.0), identity, 0, half),
                GaussianSpec((2.0, 0.0), identity, 1, samples_per_client - half),
            ),
            seed=master_seed * 7919 + 1,
            poison_flip_frac=poison_flip_frac if poison_client == 1 else 0.0,
        ),
        ClientSpec(
            clusters=(
                GaussianSpec((0.0, -2.0), aniso, 0, half),
                GaussianSpec((0.0, 2.0), aniso, 1, samples_per_client - half),
            ),
            seed=master_seed * 7919 + 2,
            poison_flip_frac=poison_flip_frac if poison_client == 2 else 0.0,
        ),
    )
    return specs


def default_config(**overrides) -> ExperimentConfig:
    cfg = ExperimentConfig(clients=two_client_noniid(), **overrides)
    return cfg


# --- JSON (de)serialization ---------------------------------------------------


def config_to_dict(cfg: ExperimentConfig) -> dict:
    return asdict(cfg)


def _gaussian_from_dict(data: dict, path: str) -> GaussianSpec:
    try:
        return GaussianSpec(
            mean=tuple(data["mean"]),
            covariance=tuple(tuple(row) for row in data["covariance"]),
            label=int(data["label"]),
            count=int(data["count"]),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(path, f"bad cluster spec: {exc}") from exc


def config_from_dict(data: dict) -> ExperimentConfig:
    if not isinstance(data, dict):
        raise ConfigError("", "config must be a JSON object")
    known = set(ExperimentConfig.__dataclass_fields__)
    unknown = set(data) - known
    if unknown:
        raise ConfigError(sorted(unknown)[0], "unknown field")
    kwargs = {k: v for k, v in data.items() if k not in ("clients", "quant")}
    if "quant" in data:
        q = data["quant"]
        try:
            kwargs["quant"] = QuantConfig(
                scale_exponent=int(q["scale_exponent"]), pieces=int(q["pieces"])
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError("quant", f"bad quantization config: {exc}") from exc
    clients = []
    for i, c in enumerate(data.get("clients", ())):
        clusters = tuple(
            _gaussian_from_dict(g, f"clients[{i}].clusters[{j}]")
            for j, g in enumerate(c.get("clusters", ()))
        )
        try:
            clients.append(
                ClientSpec(
                    clusters=clusters,
                    seed=int(c["seed"]),
                    poison_flip_frac=float(c.get("poison_flip_frac", 0.0)),
                )
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"clients[{i}]", f"bad client spec: {exc}") from exc
    kwargs["clients"] = tuple(clients)
    try:
        return ExperimentConfig(**kwargs)
    except TypeError as exc:
        raise ConfigError("", f"bad config: {exc}") from exc


def load_config(path: str) -> ExperimentConfig:
    try:
        with open(path) as fh:
            data = json.load(fh)
    except OSError as exc:
        raise ConfigError("", f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError("", f"config {path} is not valid JSON: {exc}") from exc
    return config_from_dict(data)


def save_config(cfg: ExperimentConfig, path: str) -> None:
    with open(path, "w") as fh:
        json.dump(config_to_dict(cfg), fh, indent=2, sort_keys=True)
        fh.write("\n")
