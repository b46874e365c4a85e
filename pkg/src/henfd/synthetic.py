"""Synthetic two-domain payment-event sequences with planted fraud signals.

Every sample is a user's history plus a target payment event.  The fraud
label is drawn from a logistic model whose log-odds add

* first-order effects: three high-risk values in each of ``card_bin``,
  ``issuer`` (shared fields) and ``ip_prefix`` (domain-specific field),
* one interaction: a pair of individually common values of ``email_domain``
  and ``device`` that is risky only when both occur,
* one history motif: a failed-payment event somewhere in the history,
* small per-value noise and weak numerical effects.

The world (vocabularies, popularity, planted values) is derived from
``config.seed`` alone, so source and target draws share it.  Each sample
records which planted signals fired in ``Sample.flags``.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np
from scipy.optimize import brentq
from scipy.special import expit

from .data import CATEGORICAL, DOMAINS, NUMERICAL, Dataset, DataError, FieldSpec, Sample, Schema

EVENT_TYPES = ["signup", "signin", "browse", "add_card", "payment", "pay_fail"]
HISTORY_EVENT_PROBS = [0.05, 0.30, 0.35, 0.10, 0.20]
FAILED_PAYMENT = "pay_fail"
CORE_FIELDS = ["event_type", "card_bin", "issuer", "email_domain", "device", "ip_prefix", "amount", "account_age"]
RISK_FIELDS = ["card_bin", "issuer", "ip_prefix"]
SHARED_RISK_FIELDS = ["card_bin", "issuer"]
PAIR_FIELDS = ("email_domain", "device")
N_PLANTED = 3
START_TS = 1546300800  # 2019-01-01T00:00:00Z
ZIPF = 0.7


@dataclass
class GeneratorConfig:
    seed: int = 0
    n_samples: int = 20000
    positive_rate: float = 0.01
    target_positive_rate: float | None = None
    n_fields: int = 8
    vocab_size: int = 40
    vocab_sizes: dict = field(default_factory=dict)
    vocab_overlap: float = 1.0
    shift: float = 0.0
    risk_share: float = 0.5
    mean_history: float = 4.9
    t_max: int = 10
    signal_coverage: float = 0.95
    signal_strength: float = 12.0
    pair_share: float = 0.2
    pattern_share: float = 0.2
    noise_scale: float = 0.2
    conflict_ranks: tuple = (2, 12)
    weeks: int = 10

    def __post_init__(self):
        self.conflict_ranks = tuple(int(r) for r in self.conflict_ranks)
        if len(self.conflict_ranks) != 2 or not 0 <= self.conflict_ranks[0] < self.conflict_ranks[1]:
            raise DataError("conflict_ranks must be (lo, hi) with 0 <= lo < hi")
        if not 0.0 < self.positive_rate < 1.0:
            raise DataError("positive_rate must lie in (0, 1)")
        if self.target_positive_rate is not None and not 0.0 < self.target_positive_rate < 1.0:
            raise DataError("target_positive_rate must lie in (0, 1)")
        if not 0.0 <= self.vocab_overlap <= 1.0:
            raise DataError("vocab_overlap must lie in [0, 1]")
        if not 0.0 <= self.risk_share <= 1.0:
            raise DataError("risk_share must lie in [0, 1]")
        if min(self.pair_share, self.pattern_share) < 0 or self.pair_share + self.pattern_share >= 1:
            raise DataError("pair_share and pattern_share must be non-negative and sum below 1")
        if self.n_fields < len(CORE_FIELDS):
            raise DataError(f"n_fields must be at least {len(CORE_FIELDS)}")
        if self.t_max < 2:
            raise DataError("t_max must be at least 2")

    def rate(self, domain):
        if domain == "target" and self.target_positive_rate is not None:
            return self.target_positive_rate
        return self.positive_rate

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)

    @classmethod
    def load(cls, path):
        return cls.from_dict(json.loads(Path(path).read_text()))

    def key(self):
        return json.dumps(self.to_dict(), sort_keys=True)


def field_layout(config: GeneratorConfig):
    """(name, kind, shared) for every generated field."""
    out = []
    for name in CORE_FIELDS:
        kind = NUMERICAL if name in ("amount", "account_age") else CATEGORICAL
        out.append((name, kind, name != "ip_prefix"))
    for j in range(config.n_fields - len(CORE_FIELDS)):
        out.append((f"misc_{j + 1}", CATEGORICAL, True))
    return out


def make_schema(config: GeneratorConfig) -> Schema:
    return Schema([FieldSpec(name, kind, shared) for name, kind, shared in field_layout(config)])


def _vocab_size(config, name):
    return int(config.vocab_sizes.get(name, config.vocab_size))


@dataclass
class DomainWorld:
    vocab: dict  # field -> np.ndarray of value names
    probs: dict  # field -> background probabilities (planted values zeroed)
    plants: dict  # field -> list of planted values
    pair: tuple
    effects: dict  # field -> per-value log-odds noise
    amount_loc: float


@dataclass
class World:
    domains: dict
    history_p: float

    def __getitem__(self, domain) -> DomainWorld:
        return self.domains[domain]


def _history_p(mean, t_max):
    L = t_max - 1
    ls = np.arange(1, L + 1)

    def mean_of(p):
        w = (1 - p) ** (ls - 1)
        return float((w * ls).sum() / w.sum()) - mean

    if mean >= (L + 1) / 2 or mean <= 1:
        raise DataError(f"mean_history must lie in (1, {(L + 1) / 2}) for t_max={t_max}")
    return brentq(mean_of, 1e-12, 1 - 1e-12)


@lru_cache(maxsize=16)
def _world_cached(key: str) -> World:
    return _build_world(GeneratorConfig.from_dict(json.loads(key)))


def build_world(config: GeneratorConfig) -> World:
    return _world_cached(config.key())


def _build_world(config: GeneratorConfig) -> World:
    rng = np.random.default_rng([config.seed, 7919])
    layout = field_layout(config)
    cat_fields = [(n, shared) for n, kind, shared in layout if kind == CATEGORICAL and n != "event_type"]
    tags = {"source": "s", "target": "t"}

    vocab = {d: {} for d in DOMAINS}
    logits = {d: {} for d in DOMAINS}
    common = {}
    for name, shared in cat_fields:
        V = _vocab_size(config, name)
        n_common = int(round(config.vocab_overlap * V)) if shared else 0
        common[name] = [f"{name}_{j:02d}" for j in range(n_common)]
        base = -ZIPF * np.log1p(rng.permutation(V))
        for d in DOMAINS:
            names = common[name] + [f"{name}_{tags[d]}{j:02d}" for j in range(n_common, V)]
            vocab[d][name] = np.array(names)
            logits[d][name] = base.copy()
    # domain-specific popularity perturbation, drawn per domain in a fixed order
    for d in DOMAINS:
        for name, _ in cat_fields:
            logits[d][name] = logits[d][name] + config.shift * rng.standard_normal(len(logits[d][name]))

    def popular(d, name, exclude, lo, hi):
        order = np.argsort(-logits[d][name], kind="stable")
        names = [vocab[d][name][i] for i in order]
        cand = [v for v in names[lo:] if v in common[name] and v not in exclude]
        return cand[: hi - lo]

    # pair values: popular and common in both domains
    pair = []
    for name in PAIR_FIELDS:
        cand = [v for v in popular("source", name, (), 0, 6) if v in popular("target", name, (), 0, 6)] or \
               popular("source", name, (), 0, 6)
        if not cand:
            raise DataError(f"vocab_overlap leaves no common value in {name!r} for the shared interaction")
        pair.append(str(cand[0]))
    pair = tuple(pair)

    plants = {d: {f: [] for f in RISK_FIELDS} for d in DOMAINS}
    n_shared = int(round(config.risk_share * N_PLANTED * len(SHARED_RISK_FIELDS)))
    slots = [(f, i) for f in SHARED_RISK_FIELDS for i in range(N_PLANTED)]
    for slot, (name, _) in enumerate(slots):
        if slot < n_shared:
            taken = plants["source"][name]
            pool = [v for v in common[name][3:] if v not in taken] if len(common[name]) > 3 else \
                   [v for v in common[name] if v not in taken]
            if not pool:
                raise DataError(
                    f"vocab_overlap={config.vocab_overlap} leaves too few common {name!r} values "
                    f"for risk_share={config.risk_share}")
            v = pool[rng.integers(len(pool))]
            for d in DOMAINS:
                plants[d][name].append(v)
    for slot, (name, _) in enumerate(slots):
        if slot < n_shared:
            continue
        for d in DOMAINS:
            other = "target" if d == "source" else "source"
            taken = set(plants[d][name]) | set(plants[other][name])
            # risky here, ordinary and popular in the other domain
            cand = popular(other, name, taken, *config.conflict_ranks)
            if not cand:
                own = [v for v in vocab[d][name] if v not in taken and v not in common[name]]
                cand = own
            plants[d][name].append(str(cand[rng.integers(len(cand))]))
    for d in DOMAINS:
        V = len(vocab[d]["ip_prefix"])
        order = np.argsort(-logits[d]["ip_prefix"], kind="stable")[3:]
        pick = rng.choice(order, N_PLANTED, replace=False)
        plants[d]["ip_prefix"] = [str(vocab[d]["ip_prefix"][i]) for i in sorted(pick)]

    domains = {}
    for d in DOMAINS:
        probs, effects = {}, {}
        for name, _ in cat_fields:
            p = np.exp(logits[d][name] - logits[d][name].max())
            if name in plants[d]:
                p[np.isin(vocab[d][name], plants[d][name])] = 0.0
            probs[name] = p / p.sum()
            effects[name] = config.noise_scale * rng.standard_normal(len(p))
        domains[d] = DomainWorld(
            vocab=vocab[d], probs=probs, plants=plants[d], pair=pair, effects=effects,
            amount_loc=3.5 + 0.5 * config.shift * (0.0 if d == "source" else 1.0),
        )
    return World(domains=domains, history_p=_history_p(config.mean_history, config.t_max))


def planted_values(config: GeneratorConfig, domain="source") -> dict:
    w = build_world(config)[domain]
    return {"risk_values": {f: list(v) for f, v in w.plants.items()}, "pair": dict(zip(PAIR_FIELDS, w.pair)),
            "history_pattern": FAILED_PAYMENT}


def _draw(rng, probs, size):
    return rng.choice(len(probs), size=size, p=probs)


def synthesize(config: GeneratorConfig, domain="source", n_samples=None, seed_offset=0) -> Dataset:
    """Draw a dataset for one domain of the configured world."""
    if domain not in DOMAINS:
        raise DataError(f"domain must be one of {DOMAINS}")
    world = build_world(config)
    w = world[domain]
    n = int(config.n_samples if n_samples is None else n_samples)
    rng = np.random.default_rng([config.seed, DOMAINS.index(domain), seed_offset, 104729])
    L = config.t_max - 1
    layout = field_layout(config)
    cat_names = [name for name, kind, _ in layout if kind == CATEGORICAL and name != "event_type"]
    rate = config.rate(domain)
    # chance that a sample carries each planted signal; 0.9 approximates the
    # fraction of carriers that end up positive
    budget = rate * config.signal_coverage / 0.9
    value_share = 1.0 - config.pair_share - config.pattern_share
    value_p = budget * value_share / len(RISK_FIELDS)
    pair_p = budget * config.pair_share
    pattern_p = budget * config.pattern_share

    # history lengths: geometric truncated to 1..L
    ls = np.arange(1, L + 1)
    pmf = (1 - world.history_p) ** (ls - 1)
    hist_len = rng.choice(ls, size=n, p=pmf / pmf.sum())

    # target event
    tgt = {}
    fired = {}
    for name in cat_names:
        idx = _draw(rng, w.probs[name], n)
        vals = w.vocab[name][idx]
        if name in w.plants:
            hit = rng.random(n) < value_p
            plant_vals = np.array(w.plants[name])[rng.integers(N_PLANTED, size=n)]
            vals = np.where(hit, plant_vals, vals)
            fired[name] = hit
        tgt[name] = vals
    pair_hit = rng.random(n) < pair_p
    a, b = w.pair
    clash = (tgt["email_domain"] == a) & (tgt["device"] == b) & ~pair_hit
    while clash.any():
        tgt["device"][clash] = w.vocab["device"][_draw(rng, w.probs["device"], int(clash.sum()))]
        clash = (tgt["email_domain"] == a) & (tgt["device"] == b) & ~pair_hit
    tgt["email_domain"] = np.where(pair_hit, a, tgt["email_domain"])
    tgt["device"] = np.where(pair_hit, b, tgt["device"])
    amount = np.round(rng.lognormal(w.amount_loc, 1.0, n), 2)
    age = np.round(rng.exponential(400.0, n), 1)
    pattern = rng.random(n) < pattern_p
    pattern_pos = np.floor(rng.random(n) * hist_len).astype(int)

    # history events
    total = int(hist_len.sum())
    h_type = np.array(EVENT_TYPES[:5])[rng.choice(5, size=total, p=HISTORY_EVENT_PROBS)]
    h_cat = {name: w.vocab[name][_draw(rng, w.probs[name], total)] for name in cat_names}
    h_amount = np.round(rng.lognormal(w.amount_loc, 1.0, total), 2)
    h_age = np.round(rng.exponential(400.0, total), 1)
    starts = np.concatenate([[0], np.cumsum(hist_len)[:-1]])
    h_type[(starts + pattern_pos)[pattern]] = FAILED_PAYMENT

    # label model
    log_odds = np.zeros(n)
    for name in cat_names:
        if name in w.effects:
            pos = {v: i for i, v in enumerate(w.vocab[name])}
            log_odds += w.effects[name][[pos[v] for v in tgt[name]]]
    n_fired = sum(fired.values()).astype(float) + pair_hit + pattern
    log_odds += config.signal_strength * n_fired
    log_odds += 0.3 * (np.log(amount) - w.amount_loc) - 0.2 * (age / 400.0 - 1.0)
    b0 = brentq(lambda c: expit(c + log_odds).mean() - rate, -60.0, 60.0)
    log_odds += b0
    labels = (rng.random(n) < expit(log_odds)).astype(int)
    ts = START_TS + rng.integers(0, config.weeks * 7 * 86400, size=n)

    samples = []
    for i in range(n):
        lo, hi = starts[i], starts[i] + hist_len[i]
        history = []
        for j in range(lo, hi):
            ev = {"event_type": str(h_type[j])}
            for name in cat_names:
                ev[name] = str(h_cat[name][j])
            ev["amount"] = float(h_amount[j])
            ev["account_age"] = float(h_age[j])
            history.append(ev)
        target = {"event_type": "payment"}
        for name in cat_names:
            target[name] = str(tgt[name][i])
        target["amount"] = float(amount[i])
        target["account_age"] = float(age[i])
        flags = {
            "log_odds": float(log_odds[i]),
            "risk_values": [f for f in fired if fired[f][i]],
            "pair": bool(pair_hit[i]),
            "history_pattern": bool(pattern[i]),
            "pattern_position": int(pattern_pos[i]) if pattern[i] else None,
        }
        samples.append(Sample(history, target, int(labels[i]), domain, int(ts[i]), f"{domain}-{seed_offset}-{i:06d}", flags))
    return Dataset(make_schema(config), samples, "train")


def oracle_scores(dataset: Dataset) -> np.ndarray:
    """The generator's own log-odds, usable as a reference ranking."""
    return np.array([s.flags["log_odds"] for s in dataset.samples])
