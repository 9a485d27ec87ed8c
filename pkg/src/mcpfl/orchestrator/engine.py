"""Round state machine for one (method, seed) federation and the experiment driver.

A round runs: selection -> invite/accept -> local training -> clip + noise ->
fixed-point encode + pairwise mask -> dropout -> (abort and retry once) ->
weighted aggregation of deltas -> energy/staleness/budget bookkeeping ->
evaluation on the global test set.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np

from ..config import ExperimentConfig
from ..core import ModelVector, RandomStream, RoundRecord
from ..datagen import MODALITIES, ClientDataset, generate, partition, train_test_split
from ..errors import ConfigError, EmptyRound, NegotiationRejected, RoundAbort
from ..fusion import CapabilitySet, FusionPlan, SchemaDescriptor, SchemaRegistry
from ..learner import init_model, local_train
from ..privacy import BudgetState, Gate, gate, privatize
from ..sched import init_profiles, select_round, simulate_participation, step_energy
from ..secagg import MaskedUpdate, PairwiseSeeds, aggregate_unmask, decode_fixed, encode_fixed, mask
from .methods import MethodConfig
from .metrics import evaluate
from .network import NetworkModel
from .protocol import SERVER, WireMessage, client_name, pack_vector

logger = logging.getLogger(__name__)

ROW_FIELDS = (
    "method", "seed", "round", "accuracy", "f1", "auc", "roster_size", "dropouts",
    "dropout_rate", "epsilon_spent_max", "bytes", "wall_ms",
)


@dataclass
class _ClientResult:
    client_id: int
    update: np.ndarray  # weighted, privatized delta (w_k * theta_tilde_k)
    weight: float
    outcome: str
    absent: tuple
    time_ms: float


class Federation:
    """Server plus simulated clients for one method and one seed."""

    def __init__(
        self,
        cfg: ExperimentConfig,
        method: MethodConfig,
        seed: int,
        record_transcript: bool = False,
    ):
        method.validate()
        self.cfg = cfg
        self.method = method
        self.seed = seed
        self.transcript: list[WireMessage] | None = [] if record_transcript else None

        spec = replace(cfg.data, seed=seed)
        full = generate(spec)
        self.train, self.test = train_test_split(full, spec.test_fraction, seed)
        self.clients: list[ClientDataset] = partition(
            self.train, cfg.n_clients, cfg.dirichlet_beta, seed
        )

        self.registry = SchemaRegistry(
            SchemaDescriptor(m, 1, int(cfg.data.dims[m]), int(cfg.model.latent_dims[m]))
            for m in method.modalities
        )
        self.server_plan = self.registry.plan()
        self.network = NetworkModel.sample(cfg.n_clients, cfg.network, seed)
        self.sched_cfg = replace(cfg.sched, policy=method.policy)
        self.local_cfg = replace(
            cfg.model, fedprox_mu=cfg.model.fedprox_mu if method.proximal else 0.0
        )

        links = [self.network.link(k, 0) for k in range(cfg.n_clients)]
        self.profiles = {p.id: p for p in init_profiles(cfg.n_clients, links, cfg.energy, seed)}
        self.budgets = {k: BudgetState() for k in range(cfg.n_clients)}
        self.theta = init_model(self.server_plan, seed, cfg.model.init_scale)
        self.round = 0
        self.records: list[RoundRecord] = []

        self.plans: dict[int, FusionPlan] = {}
        self.client_data: dict[int, ClientDataset] = {}
        self.rejected: list[int] = []
        setup_msgs = self._negotiate_all()
        self.metrics = evaluate(self.theta, self.test, self.server_plan)
        self.history = [
            self._row(0, self.metrics, roster=0, dropouts=0, n_bytes=_bytes(setup_msgs), wall_ms=0.0)
        ]

    # -- setup -------------------------------------------------------------

    def capabilities(self, k: int) -> CapabilitySet:
        """Schemas client ``k`` advertises; some versions are deliberately wrong."""
        u = RandomStream(self.seed, f"caps:{k}").uniform(len(MODALITIES))
        descs = []
        for i, m in enumerate(MODALITIES):
            version = 2 if u[i] < self.cfg.schema_mismatch_rate else 1
            descs.append(
                SchemaDescriptor(m, version, int(self.cfg.data.dims[m]), int(self.cfg.model.latent_dims[m]))
            )
        return CapabilitySet(k, frozenset(descs))

    def _negotiate_all(self) -> list[WireMessage]:
        msgs = []
        strict = not self.method.use_schema_negotiation
        offer = [d.to_dict() for d in self.registry.required]
        for k in range(self.cfg.n_clients):
            caps = self.capabilities(k)
            name = client_name(k)
            msgs.append(WireMessage(
                "capability_advertise", 0, name, SERVER,
                {"schemas": [d.to_dict() for d in sorted(caps.supported)]},
            ))
            msgs.append(WireMessage("schema_offer", 0, SERVER, name, {"schemas": offer}))
            try:
                plan = self.registry.negotiate(caps, strict=strict)
            except NegotiationRejected:
                self.rejected.append(k)
                msgs.append(WireMessage(
                    "negotiation_reject", 0, SERVER, name, {"reason": "schema mismatch"}
                ))
                continue
            self.plans[k] = plan
            self.client_data[k] = self.clients[k].without(plan.absent)
            msgs.append(WireMessage(
                "schema_ack", 0, name, SERVER,
                {"agreed": list(plan.available), "absent": sorted(plan.absent)},
            ))
        self._log(msgs)
        return msgs

    # -- one round ---------------------------------------------------------

    def run_round(self, workers: int = 1) -> RoundRecord:
        r = self.round + 1
        ids = sorted(self.plans)
        for k in ids:
            self.profiles[k] = replace(self.profiles[k], link=self.network.link(k, r))

        try:
            if not ids:
                raise EmptyRound("no client passed negotiation")
            alpha = select_round(
                [self.profiles[k] for k in ids], self.sched_cfg, RandomStream(self.seed, f"select:{r}")
            )
            if sum(alpha.values()) < self.sched_cfg.min_roster:
                raise EmptyRound("quorum not met")
        except EmptyRound:
            alpha = {k: 0 for k in ids}
        roster = [k for k in ids if alpha[k]]

        msgs: list[WireMessage] = []
        dim = len(self.theta)
        accepted, declined = [], []
        for k in roster:
            msgs.append(WireMessage("round_invite", r, SERVER, client_name(k), {"model_dim": dim}))
        for k in roster:
            if self.method.use_dp and gate(self.budgets[k], self.cfg.dp) is Gate.EXHAUSTED:
                declined.append(k)
                msgs.append(WireMessage(
                    "round_decline", r, client_name(k), SERVER, {"reason": "privacy budget exhausted"}
                ))
            else:
                accepted.append(k)
                msgs.append(WireMessage("round_accept", r, client_name(k), SERVER, {}))

        if workers > 1 and len(accepted) > 1:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                results = list(pool.map(lambda k: self._client_work(k, r), accepted))
        else:
            results = [self._client_work(k, r) for k in accepted]
        completed = [res for res in results if res.outcome == "completed"]
        dropped = [res.client_id for res in results if res.outcome != "completed"]

        aggregate, upload_msgs, retried = self._aggregate(r, accepted, completed)
        msgs.extend(upload_msgs)

        aggregated = aggregate is not None
        if aggregated:
            self.theta = self.theta.with_values(self.theta.values + aggregate)
        global_vec = pack_vector(self.theta.values)
        for k in roster:
            msgs.append(WireMessage("global_model", r, SERVER, client_name(k), {"vector": global_vec}))

        done = {res.client_id for res in completed} if aggregated else set()
        update_bytes = 8 * dim
        for k in ids:
            trained = k in accepted
            self.profiles[k] = step_energy(
                self.profiles[k],
                participated=trained,
                bytes_sent=update_bytes if trained and k not in dropped else 0,
                succeeded=k in done,
                round_ran=bool(roster),
            )
            if self.method.use_dp and k in done:
                self.budgets[k] = self.budgets[k].charged()

        if aggregated:
            self.metrics = evaluate(self.theta, self.test, self.server_plan)
        self.round = r
        self._log(msgs)

        wall = self._wall_ms(r, roster, declined, completed, bool(dropped), retried)
        row = self._row(r, self.metrics, len(roster), len(dropped), _bytes(msgs), wall)
        self.history.append(row)
        record = RoundRecord(
            round=r,
            roster=frozenset(roster),
            alpha=alpha,
            dropouts=frozenset(dropped),
            global_model=self.theta,
            metrics=dict(self.metrics),
            declined=frozenset(declined),
            empty=not roster,
        )
        self.records.append(record)
        return record

    def _client_work(self, k: int, r: int) -> _ClientResult:
        data = self.client_data[k]
        plan = self.plans[k]
        delta = local_train(data, self.theta, self.local_cfg, RandomStream(self.seed, f"train:{r}:{k}"), plan)
        if self.method.use_dp:
            delta = privatize(
                delta, self.cfg.dp, RandomStream(self.seed, f"noise:{r}:{k}"),
                use_clip=self.method.clip_updates,
            )
        weight = float(len(data))
        outcome = simulate_participation(
            self.profiles[k], self.sched_cfg, RandomStream(self.seed, f"drop:{r}:{k}")
        )
        net = self.network
        time_ms = (
            2 * net.latency_ms[k]
            + net.compute_ms(len(data), self.local_cfg.local_epochs)
            + net.transfer_ms(k, r, 8 * len(delta))
        )
        if outcome == "completed" and time_ms > net.round_timeout_ms:
            outcome = "timeout"
        return _ClientResult(k, weight * delta.values, weight, outcome, tuple(sorted(plan.absent)), time_ms)

    def _aggregate(self, r: int, accepted: list[int], completed: list[_ClientResult]):
        """Return ``(mean_delta or None, messages, retried)`` for this round."""
        msgs: list[WireMessage] = []
        if not self.method.use_secagg:
            for res in completed:
                msgs.append(self._update_msg(r, res, res.update, "plain"))
            if not completed:
                return None, msgs, False
            total = np.zeros_like(completed[0].update)
            weight = 0.0
            for res in completed:  # ascending client id
                total = total + res.update
                weight += res.weight
            return total / weight, msgs, False

        if not accepted:
            return None, msgs, False
        roster = list(accepted)
        retried = False
        for attempt in (0, 1):
            seeds = PairwiseSeeds.provision(roster, self.seed, r, attempt)
            received = []
            for res in completed:
                if res.client_id not in roster:
                    continue
                fv = mask(encode_fixed(res.update, self.cfg.frac_bits), res.client_id, roster, seeds, r)
                received.append(MaskedUpdate(res.client_id, r, fv, res.weight, res.absent))
                msgs.append(self._update_msg(r, res, fv.values, "field"))
            try:
                total = aggregate_unmask(received, roster)
            except RoundAbort as abort:
                msgs.append(WireMessage("round_abort", r, SERVER, "broadcast", {"missing": abort.missing}))
                roster = [k for k in roster if k not in abort.missing]
                retried = True
                if attempt == 0 and roster:
                    continue
                return None, msgs, retried
            weight = sum(mu.weight for mu in received)
            return decode_fixed(total) / weight, msgs, retried
        return None, msgs, retried

    def _update_msg(self, r: int, res: _ClientResult, vector: np.ndarray, encoding: str) -> WireMessage:
        return WireMessage(
            "masked_update", r, client_name(res.client_id), SERVER,
            {
                "encoding": encoding,
                "frac_bits": self.cfg.frac_bits if encoding == "field" else 0,
                "vector": pack_vector(vector),
                "weight": res.weight,
                "absent": list(res.absent),
            },
        )

    def _wall_ms(self, r, roster, declined, completed, had_dropout, retried) -> float:
        if not roster:
            return 0.0
        net = self.network
        phase = max([2 * net.latency_ms[k] for k in declined] + [res.time_ms for res in completed] + [0.0])
        if had_dropout:
            phase = net.round_timeout_ms
        if retried and completed:
            phase += max(2 * net.latency_ms[res.client_id] + net.transfer_ms(res.client_id, r, 8 * len(self.theta))
                         for res in completed)
        model_bytes = 8 * len(self.theta)
        phase += max(net.transfer_ms(k, r, model_bytes) for k in roster)
        return round(float(phase), 3)

    # -- bookkeeping -------------------------------------------------------

    def epsilon_spent_max(self) -> float:
        if not self.method.use_dp or not self.plans:
            return 0.0
        return max(self.budgets[k].epsilon_spent(self.cfg.dp) for k in self.plans)

    def _row(self, r, metrics, roster, dropouts, n_bytes, wall_ms) -> dict:
        return {
            "method": self.method.label,
            "seed": self.seed,
            "round": r,
            "accuracy": metrics["accuracy"],
            "f1": metrics["f1"],
            "auc": metrics["auc"],
            "roster_size": roster,
            "dropouts": dropouts,
            "dropout_rate": dropouts / roster if roster else 0.0,
            "epsilon_spent_max": self.epsilon_spent_max(),
            "bytes": n_bytes,
            "wall_ms": wall_ms,
        }

    def _log(self, msgs: Iterable[WireMessage]) -> None:
        if self.transcript is not None:
            self.transcript.extend(msgs)

    def run(self, rounds: int, workers: int = 1) -> "Federation":
        for _ in range(rounds):
            self.run_round(workers=workers)
        return self


def _bytes(msgs: Sequence[WireMessage]) -> int:
    return sum(m.byte_size for m in msgs)


@dataclass
class RunResult:
    method: str
    seed: int
    history: list[dict]
    records: list[RoundRecord]
    final_model: ModelVector
    rejected: list[int]
    transcript: list[WireMessage] | None = None


@dataclass
class ExperimentResult:
    runs: list[RunResult] = field(default_factory=list)

    @property
    def rows(self) -> list[dict]:
        return [row for run in self.runs for row in run.history]

    def by_method(self) -> dict[str, list[RunResult]]:
        out: dict[str, list[RunResult]] = {}
        for run in self.runs:
            out.setdefault(run.method, []).append(run)
        return out

    def final_rows(self) -> list[dict]:
        return [run.history[-1] for run in self.runs]


def run_experiment(
    cfg: ExperimentConfig,
    methods: Sequence[MethodConfig] | None = None,
    record_transcript: bool = False,
) -> ExperimentResult:
    """Run every method for every seed; cells execute in (method, seed) order."""
    cfg.validate()
    methods = list(methods) if methods is not None else cfg.method_configs()
    labels = [m.label for m in methods]
    if len(set(labels)) != len(labels):
        raise ConfigError("method labels must be unique", "experiment.methods")
    for m in methods:
        m.validate()
        if m.proximal and cfg.model.fedprox_mu <= 0:
            raise ConfigError("fedprox needs model.fedprox_mu > 0", "model.fedprox_mu")
    result = ExperimentResult()
    for m in methods:
        for seed in cfg.seeds:
            fed = Federation(cfg, m, seed, record_transcript=record_transcript)
            fed.run(cfg.rounds, workers=cfg.workers)
            logger.info("%s seed=%s final accuracy %.4f", m.label, seed, fed.metrics["accuracy"])
            result.runs.append(
                RunResult(m.label, seed, fed.history, fed.records, fed.theta, fed.rejected, fed.transcript)
            )
    return result
