"""Round-based federation simulator.

Orchestrates client sampling, local training, compressed (or baseline)
uplink, server aggregation, downlink history compression, and privacy
accounting. Every stream of randomness is derived from the master seed
through tagged counter-based streams, so a full run is a pure function of
its configuration.

Canonical ordering rules that make runs bit-deterministic:

* sampled client ids are processed in ascending order (duplicates under
  with-replacement sampling run independently, with occurrence-indexed
  private streams);
* server aggregation sums decoded updates in processing order, then
  divides once by the round size; history replay repeats exactly that
  arithmetic.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .accountant import (
    AccountantState,
    OrderGrid,
    accumulate,
    epsilon_of_delta,
    gauss_baseline_epsilon,
    step,
)
from .codec import RecConfig, RecMessage, clip, decode, encode, message_size_bits
from .errors import DesyncError, InvalidConfigError, OverheadExceedsDeltaError
from .params import (
    GroupPartition,
    LocalDataset,
    Model,
    ModelSpec,
    ParamVector,
    local_train,
    model_delta,
)
from .rng import (
    TAG_CATEGORICAL,
    TAG_CLIENT,
    TAG_MESSAGE_SEED,
    TAG_MODEL_INIT,
    TAG_PRIVATE,
    TAG_SAMPLING,
    TAG_SERVER_NOISE,
    TAG_SHUFFLE,
    StreamKey,
    derive_seed,
    make_stream_id,
    raw_uint64,
    standard_normals,
    uniform64_at,
)

MECHANISMS = ("dp-rec", "dp-rec-nocomp", "dp-fedavg", "none")
SAMPLING_MODES = ("with-replacement", "without-replacement")

# Full-precision payload accounting uses 32-bit floats per parameter.
_FLOAT_BITS = 32


@dataclass(frozen=True)
class FederationConfig:
    """Everything that determines a run, except the data itself."""

    n_clients: int
    per_round: int
    rounds: int
    sampling: str = "with-replacement"
    epochs: int = 1
    batch_size: int = 20
    learning_rate: float = 0.05
    mechanism: str = "none"
    rec: RecConfig | None = None
    noise_mult: float = 0.0  # dp-fedavg noise multiplier z
    clip_norm: float = 0.0  # dp-fedavg clip threshold C
    delta: float | None = None  # None -> 1 / n_clients^1.1
    eval_every: int = 1
    master_seed: int = 0

    def __post_init__(self) -> None:
        if self.n_clients < 1 or self.per_round < 1 or self.rounds < 0:
            raise InvalidConfigError("n_clients, per_round >= 1 and rounds >= 0 required")
        if self.sampling not in SAMPLING_MODES:
            raise InvalidConfigError(f"unknown sampling mode {self.sampling!r}")
        if self.mechanism not in MECHANISMS:
            raise InvalidConfigError(f"unknown mechanism {self.mechanism!r}")
        if self.sampling == "without-replacement" and self.per_round > self.n_clients:
            raise InvalidConfigError("per_round > n_clients needs sampling with replacement")
        if self.epochs < 0 or self.batch_size < 1 or self.eval_every < 1:
            raise InvalidConfigError("bad local-training or eval settings")
        if self.mechanism in ("dp-rec", "dp-rec-nocomp"):
            if self.rec is None:
                raise InvalidConfigError(f"{self.mechanism} requires a rec config")
            if self.sampling != "with-replacement":
                raise InvalidConfigError(
                    "compressed-update accounting assumes sampling with replacement"
                )
        if self.mechanism == "dp-fedavg":
            if self.noise_mult < 0 or self.clip_norm <= 0:
                raise InvalidConfigError("dp-fedavg needs noise_mult >= 0 and clip_norm > 0")
            if self.sampling != "without-replacement":
                raise InvalidConfigError("baseline accounting assumes sampling without replacement")

    @property
    def target_delta(self) -> float:
        if self.delta is not None:
            return self.delta
        return 1.0 / self.n_clients**1.1


@dataclass
class HistoryEntry:
    """One round's worth of downlink replay data.

    ``messages`` holds one index tuple per uplink message of that round,
    in canonical processing order; an empty tuple marks the model-init
    entry (round -1), legal only at the start of a history.
    """

    round: int
    seed: int
    messages: tuple[tuple[int, ...], ...]
    _mean_cache: np.ndarray | None = field(default=None, repr=False, compare=False)


@dataclass
class ClientHistory:
    """Entries accumulated since this client's last participation."""

    entries: list[HistoryEntry] = field(default_factory=list)

    def append(self, entry: HistoryEntry) -> None:
        self.entries.append(entry)

    def validate_contiguous(self) -> None:
        for prev, cur in zip(self.entries, self.entries[1:]):
            if cur.round != prev.round + 1:
                raise DesyncError(
                    f"history gap: round {prev.round} followed by {cur.round}"
                )
        for i, entry in enumerate(self.entries):
            if not entry.messages and i != 0:
                raise DesyncError("model-init entry is only legal as the first entry")


@dataclass(frozen=True)
class RoundMetrics:
    round: int
    accuracy: float
    eps_central: float
    eps_local: float
    uplink_bits: int
    downlink_bits: int


def sample_clients(n_clients: int, per_round: int, mode: str, round_key: StreamKey) -> list[int]:
    """Deterministic per-round client sample; may repeat with replacement."""
    if mode not in SAMPLING_MODES:
        raise InvalidConfigError(f"unknown sampling mode {mode!r}")
    if mode == "without-replacement":
        if per_round > n_clients:
            raise InvalidConfigError("cannot sample more clients than exist without replacement")
        idx = np.arange(n_clients, dtype=np.int64)
        for j in range(n_clients - 1, 0, -1):
            i = int(uniform64_at(round_key, n_clients - 1 - j)) % (j + 1)
            idx[j], idx[i] = idx[i], idx[j]
        return [int(v) for v in idx[:per_round]]
    draws = raw_uint64(round_key, 0, per_round)
    return [int(v % n_clients) for v in draws]


def history_size_bits(history: ClientHistory, rec_cfg: RecConfig) -> int:
    """64 seed bits per entry plus ``groups x bits`` per recorded message."""
    per_msg = len(rec_cfg.partition) * rec_cfg.bits
    return sum(64 + len(e.messages) * per_msg for e in history.entries)


def full_model_bits(dim: int) -> int:
    """Uncompressed payload: 32-bit floats, no optimizer state (plain SGD)."""
    return _FLOAT_BITS * dim


def downlink_payload(
    history: ClientHistory, model: ParamVector, rec_cfg: RecConfig
) -> tuple[str, int]:
    """Choose the smaller downlink representation (history wins ties)."""
    h_bits = history_size_bits(history, rec_cfg)
    f_bits = full_model_bits(len(model.values))
    if h_bits <= f_bits:
        return "history", h_bits
    return "full-model", f_bits


def _mean_update(seed: int, messages: tuple[tuple[int, ...], ...], rec_cfg: RecConfig) -> np.ndarray:
    # Shared by server aggregation and history replay so both perform
    # bit-identical arithmetic: sum in message order, divide once.
    acc = np.zeros(rec_cfg.partition.total_length, dtype=np.float64)
    for indices in messages:
        acc += decode(RecMessage(seed, indices), rec_cfg).values
    acc /= len(messages)
    return acc


def _entry_mean(entry: HistoryEntry, rec_cfg: RecConfig) -> np.ndarray:
    # Entries are shared across all clients' histories, so each round's
    # replay mean is computed from wire data once, then reused.
    if entry._mean_cache is None:
        entry._mean_cache = _mean_update(entry.seed, entry.messages, rec_cfg)
    return entry._mean_cache


def client_reconstruct(
    last_model: ParamVector | None,
    history: ClientHistory,
    rec_cfg: RecConfig,
    model_spec: ModelSpec,
    expected_first_round: int | None = None,
) -> ParamVector:
    """Replay a history onto the client's last-known model.

    Init entries reset the model from their seed; message entries apply
    the mean of their decoded updates. The result is bit-identical to the
    server model the history was recorded against.
    """
    history.validate_contiguous()
    if expected_first_round is not None and history.entries:
        first = history.entries[0].round
        if first != expected_first_round:
            raise DesyncError(
                f"history starts at round {first}, expected {expected_first_round}"
            )
    if last_model is None:
        if not history.entries or history.entries[0].messages:
            raise DesyncError("no base model and history lacks an init entry")
        values: np.ndarray | None = None
        partition: GroupPartition | None = None
    else:
        values = last_model.values.copy()
        partition = last_model.partition
    for entry in history.entries:
        if not entry.messages:
            init = Model.init(model_spec, entry.seed)
            values = init.weights.values.copy()
            partition = init.weights.partition
        else:
            assert values is not None
            values += _entry_mean(entry, rec_cfg)
    assert values is not None and partition is not None
    return ParamVector(values, partition)


@dataclass
class _ClientSlot:
    data: LocalDataset
    base_values: np.ndarray | None = None  # model at last participation
    base_round: int = -1  # round it was downloaded for
    participations: int = 0


class Simulation:
    """Mutable run state; drive with :meth:`run` or round by round."""

    def __init__(
        self,
        cfg: FederationConfig,
        model_spec: ModelSpec,
        client_data: list[LocalDataset],
        test_data: LocalDataset,
    ) -> None:
        if len(client_data) != cfg.n_clients:
            raise InvalidConfigError(
                f"{len(client_data)} shards for {cfg.n_clients} clients"
            )
        if cfg.mechanism in ("dp-rec", "dp-rec-nocomp"):
            assert cfg.rec is not None
            if cfg.rec.partition.total_length != model_spec.partition().total_length:
                raise InvalidConfigError("rec partition does not match model size")
        self.cfg = cfg
        self.spec = model_spec
        self.test_data = test_data
        self.init_seed = derive_seed(cfg.master_seed, make_stream_id(0, TAG_MODEL_INIT))
        self.model = Model.init(model_spec, self.init_seed)
        self.dim = self.model.weights.partition.total_length
        self.clients = [_ClientSlot(data=d) for d in client_data]
        init_entry = HistoryEntry(round=-1, seed=self.init_seed, messages=())
        self.histories = [ClientHistory([init_entry]) for _ in range(cfg.n_clients)]
        self.accountant = AccountantState(OrderGrid.default())
        self.baseline_rounds = 0
        self.uplink_bits = 0
        self.downlink_bits = 0
        self.uplink_index_bits = 0  # index payload only, for the overhead term
        self.round_no = 0

    # -- seed derivations ------------------------------------------------

    def _client_seed(self, client: int) -> int:
        return derive_seed(self.cfg.master_seed, make_stream_id(0, TAG_CLIENT), client)

    def _round_message_seed(self, round_no: int) -> int:
        return derive_seed(self.cfg.master_seed, make_stream_id(round_no, TAG_MESSAGE_SEED))

    def _train_seed(self, client: int, round_no: int, occurrence: int) -> int:
        return uniform64_at(
            StreamKey(self._client_seed(client), make_stream_id(round_no, TAG_SHUFFLE)),
            occurrence,
        )

    def _private_key(self, client: int, round_no: int, occurrence: int) -> StreamKey:
        private_seed = uniform64_at(
            StreamKey(self._client_seed(client), make_stream_id(round_no, TAG_PRIVATE)),
            occurrence,
        )
        return StreamKey(private_seed, make_stream_id(round_no, TAG_CATEGORICAL))

    # -- round drivers ---------------------------------------------------

    def sample_round(self, round_no: int) -> list[int]:
        key = StreamKey(self.cfg.master_seed, make_stream_id(round_no, TAG_SAMPLING))
        return sample_clients(self.cfg.n_clients, self.cfg.per_round, self.cfg.sampling, key)

    def _download(self, client: int, round_no: int) -> Model:
        slot = self.clients[client]
        history = self.histories[client]
        rec_cfg = self.cfg.rec
        if self.cfg.mechanism == "dp-rec":
            assert rec_cfg is not None
            _, bits = downlink_payload(history, self.model.weights, rec_cfg)
            self.downlink_bits += bits
            base_vec = (
                ParamVector(slot.base_values, self.model.weights.partition)
                if slot.base_values is not None
                else None
            )
            expected = slot.base_round if slot.base_values is not None else None
            weights = client_reconstruct(base_vec, history, rec_cfg, self.spec, expected)
            slot.base_values = weights.values.copy()
            slot.base_round = round_no
            self.histories[client] = ClientHistory([])
            return Model(self.spec, weights)
        # Baselines and the raw-sample arm ship the full model every round.
        self.downlink_bits += full_model_bits(self.dim)
        return self.model.copy()

    def _local_update(self, client: int, round_no: int, occurrence: int, base: Model) -> ParamVector:
        trained = local_train(
            base,
            self.clients[client].data,
            self.cfg.epochs,
            self.cfg.batch_size,
            self.cfg.learning_rate,
            self._train_seed(client, round_no, occurrence),
        )
        return model_delta(trained, base)

    def run_round_dprec(self, round_no: int, sampled: list[int]) -> list[RecMessage]:
        cfg = self.cfg
        rec_cfg = cfg.rec
        assert rec_cfg is not None
        seed = self._round_message_seed(round_no)
        ordered = sorted(sampled)
        occurrence: dict[int, int] = {}
        messages: list[RecMessage] = []
        for client in ordered:
            occ = occurrence.get(client, 0)
            occurrence[client] = occ + 1
            base = self._download(client, round_no)
            delta = self._local_update(client, round_no, occ, base)
            msg = encode(delta, rec_cfg, seed, self._private_key(client, round_no, occ))
            messages.append(msg)
            self.uplink_bits += message_size_bits(msg, rec_cfg)
            self.uplink_index_bits += len(rec_cfg.partition) * rec_cfg.bits
            self.accountant = step(
                self.accountant, rec_cfg.clip, rec_cfg.sigma, 1.0 / cfg.n_clients
            )
            self.clients[client].participations += 1
        agg = _mean_update(seed, tuple(m.indices for m in messages), rec_cfg)
        self.model.weights.values += agg
        entry = HistoryEntry(round_no, seed, tuple(m.indices for m in messages))
        for history in self.histories:
            history.append(entry)
        return messages

    def run_round_nocomp(self, round_no: int, sampled: list[int]) -> None:
        # Ablation arm: transmit an exact sample from the clipped update
        # distribution instead of a coded index.
        cfg = self.cfg
        rec_cfg = cfg.rec
        assert rec_cfg is not None
        ordered = sorted(sampled)
        occurrence: dict[int, int] = {}
        total = np.zeros(self.dim)
        for client in ordered:
            occ = occurrence.get(client, 0)
            occurrence[client] = occ + 1
            base = self._download(client, round_no)
            delta = self._local_update(client, round_no, occ, base)
            clipped = clip(delta.values, rec_cfg.clip)
            noise_key = self._private_key(client, round_no, occ)
            sample = clipped + rec_cfg.sigma * standard_normals(noise_key, 0, self.dim)
            total += sample
            self.uplink_bits += full_model_bits(self.dim)
            self.accountant = step(
                self.accountant, rec_cfg.clip, rec_cfg.sigma, 1.0 / cfg.n_clients
            )
            self.clients[client].participations += 1
        self.model.weights.values += total / len(ordered)

    def run_round_dpfedavg(self, round_no: int, sampled: list[int]) -> None:
        cfg = self.cfg
        ordered = sorted(sampled)
        occurrence: dict[int, int] = {}
        total = np.zeros(self.dim)
        for client in ordered:
            occ = occurrence.get(client, 0)
            occurrence[client] = occ + 1
            base = self._download(client, round_no)
            delta = self._local_update(client, round_no, occ, base)
            if cfg.mechanism == "dp-fedavg":
                total += clip(delta.values, cfg.clip_norm)
            else:
                total += delta.values
            self.uplink_bits += full_model_bits(self.dim)
            self.clients[client].participations += 1
        update = total / len(ordered)
        if cfg.mechanism == "dp-fedavg":
            noise_key = StreamKey(
                cfg.master_seed, make_stream_id(round_no, TAG_SERVER_NOISE)
            )
            scale = cfg.noise_mult * cfg.clip_norm / len(ordered)
            update = update + scale * standard_normals(noise_key, 0, self.dim)
            self.baseline_rounds += 1
        self.model.weights.values += update

    def run_round(self, round_no: int) -> None:
        sampled = self.sample_round(round_no)
        if self.cfg.mechanism == "dp-rec":
            self.run_round_dprec(round_no, sampled)
        elif self.cfg.mechanism == "dp-rec-nocomp":
            self.run_round_nocomp(round_no, sampled)
        else:
            self.run_round_dpfedavg(round_no, sampled)
        self.round_no = round_no + 1

    # -- reporting ---------------------------------------------------------

    def max_participations(self) -> int:
        return max((c.participations for c in self.clients), default=0)

    def epsilons(self) -> tuple[float, float]:
        cfg = self.cfg
        delta = cfg.target_delta
        if cfg.mechanism in ("dp-rec", "dp-rec-nocomp"):
            rec_cfg = cfg.rec
            assert rec_cfg is not None
            # The raw-sample arm has no coding failure probability, so its
            # overhead term vanishes.
            coded = cfg.mechanism == "dp-rec"
            central = epsilon_of_delta(
                self.accountant, delta, self.uplink_index_bits if coded else None
            )
            per_msg_bits = len(rec_cfg.partition) * rec_cfg.bits
            m = self.max_participations()
            local_state = accumulate(
                AccountantState(self.accountant.orders), rec_cfg.clip, rec_cfg.sigma, 1.0, m
            )
            try:
                local = epsilon_of_delta(local_state, delta, m * per_msg_bits if coded else None)
            except OverheadExceedsDeltaError:
                # A client's own few-bit messages cannot reach this delta;
                # the local column is diagnostic, so report "no finite eps"
                # instead of aborting a run whose central budget holds.
                local = math.inf
            return central, local
        if cfg.mechanism == "dp-fedavg":
            if cfg.noise_mult <= 0:
                return math.inf, math.inf
            central = gauss_baseline_epsilon(
                self.baseline_rounds, cfg.per_round / cfg.n_clients, cfg.noise_mult, delta
            )
            local = gauss_baseline_epsilon(
                self.max_participations(), 1.0, cfg.noise_mult / cfg.per_round, delta
            )
            return central, local
        return math.inf, math.inf

    def metrics(self, round_no: int) -> RoundMetrics:
        central, local = self.epsilons()
        return RoundMetrics(
            round=round_no,
            accuracy=self.model.accuracy(self.test_data),
            eps_central=central,
            eps_local=local,
            uplink_bits=self.uplink_bits,
            downlink_bits=self.downlink_bits,
        )

    def run(self) -> list[RoundMetrics]:
        cfg = self.cfg
        if cfg.rounds == 0:
            return [self.metrics(0)]
        out = []
        for t in range(cfg.rounds):
            self.run_round(t)
            if (t + 1) % cfg.eval_every == 0 or t + 1 == cfg.rounds:
                out.append(self.metrics(t + 1))
        return out


def run_experiment(
    cfg: FederationConfig,
    model_spec: ModelSpec,
    client_data: list[LocalDataset],
    test_data: LocalDataset,
) -> list[RoundMetrics]:
    """Execute a full configured run and return its metric rows."""
    return Simulation(cfg, model_spec, client_data, test_data).run()


def mean_estimation(
    dim: int,
    n_samples: int,
    bits: int,
    prior: str = "zero",
    *,
    sigma: float = 0.9,
    spread: float = 0.3,
    seed: int = 0,
    clip_mult: float | None = None,
) -> float:
    """One-shot private mean estimation with coded unit vectors.

    ``n_samples`` unit-norm vectors clustered around the all-ones
    direction (per-sample dispersion ``spread``) are each encoded against
    a prior centered at zero ("zero") or at the cluster direction
    ("informed"), with client-chosen seeds, then decoded; returns the
    squared L2 distance between the decoded mean and the true empirical
    mean. No clipping unless ``clip_mult`` is given.
    """
    if dim < 1 or n_samples < 1:
        raise InvalidConfigError("dim and n_samples must be >= 1")
    if bits < 1:
        raise InvalidConfigError("bits must be >= 1")
    if prior not in ("zero", "informed"):
        raise InvalidConfigError(f"unknown prior {prior!r}")
    partition = GroupPartition.single(dim)
    cfg = RecConfig(
        sigma=sigma,
        clip_mult=clip_mult if clip_mult is not None else 1e18,
        bits=bits,
        partition=partition,
    )
    center = np.ones(dim) / math.sqrt(dim)
    data_key = StreamKey(seed, make_stream_id(0, TAG_SAMPLING))
    noise = standard_normals(data_key, 0, n_samples * dim).reshape(n_samples, dim)
    x = center + (spread / math.sqrt(dim)) * noise
    x /= np.linalg.norm(x, axis=1, keepdims=True)
    prior_mean = center if prior == "informed" else np.zeros(dim)
    true_mean = x.mean(axis=0)

    seed_key = StreamKey(seed, make_stream_id(1, TAG_MESSAGE_SEED))
    priv_key = StreamKey(seed, make_stream_id(1, TAG_PRIVATE))
    acc = np.zeros(dim)
    for i in range(n_samples):
        msg_seed = uniform64_at(seed_key, i)
        private = StreamKey(uniform64_at(priv_key, i), make_stream_id(0, TAG_CATEGORICAL))
        msg = encode(ParamVector(x[i] - prior_mean, partition), cfg, msg_seed, private)
        acc += decode(msg, cfg).values + prior_mean
    est = acc / n_samples
    err = est - true_mean
    return float(err @ err)
