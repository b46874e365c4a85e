"""Built-in numerical checks: independent reference evaluations compared
against the library implementations."""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .autodiff import ParamStore, Tape, directional_check, grad_check
from .data import FieldSpec, Sample, Schema
from .embedding import EmbeddingTable, build_domain_vocabs, vocab_from_values
from .hen import HENModel, event_extract, field_extract, nll_loss
from .metrics import spauc
from .transfer import TransferModel, batch_class_stats, ced, lambda_schedule


@dataclass
class Check:
    name: str
    passed: bool
    value: float
    limit: float
    seconds: float

    def __post_init__(self):
        self.passed, self.value = bool(self.passed), float(self.value)

    def line(self):
        status = "PASS" if self.passed else "FAIL"
        return f"[{status}] {self.name}: {self.value:.3e} (limit {self.limit:g}, {self.seconds:.1f}s)"


# -- second-order interaction equivalence ------------------------------------------


def naive_event_embedding(v, a):
    """Attention-weighted sum plus the explicit sum over field pairs i < j."""
    w = np.exp(a - a.max())
    w /= w.sum()
    out = (w[:, None] * v).sum(axis=0)
    i, j = np.triu_indices(len(v), k=1)
    return out + (v[i] * v[j]).sum(axis=0)


def fm_equivalence(n_instances=1000, max_fields=56, k=16, seed=0):
    """Largest gap between the linear-time and pairwise forms, relative to the
    largest magnitude of the pairwise result in each instance."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_instances):
        n = int(rng.integers(1, max_fields + 1))
        v = rng.normal(size=(n, k))
        a = rng.normal(size=n)
        tape = Tape()
        e, _ = field_extract(tape, tape.const(v), tape.const(a))
        ref = naive_event_embedding(v, a)
        worst = max(worst, float(np.abs(e.value - ref).max() / max(np.abs(ref).max(), 1e-300)))
    return worst


# -- SPAUC reference ----------------------------------------------------------------


def brute_force_spauc(scores, labels, maxfpr):
    """Threshold sweep by explicit counting at every distinct score."""
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels).astype(bool)
    P, N = labels.sum(), (~labels).sum()
    pts = [(0.0, 0.0)]
    for thr in sorted(set(scores.tolist()), reverse=True):
        above = scores >= thr
        pts.append(((above & ~labels).sum() / N, (above & labels).sum() / P))
    area = 0.0
    for (x0, y0), (x1, y1) in zip(pts, pts[1:]):
        if x0 >= maxfpr:
            break
        if x1 > maxfpr:
            y1 = y0 + (y1 - y0) * (maxfpr - x0) / (x1 - x0)
            x1 = maxfpr
        area += (x1 - x0) * (y0 + y1) / 2.0
    lo, hi = maxfpr ** 2 / 2.0, maxfpr
    return 0.5 * (1.0 + (area - lo) / (hi - lo))


def random_score_set(rng, max_n=1000):
    n = int(rng.integers(2, max_n + 1))
    labels = rng.random(n) < rng.uniform(0.05, 0.5)
    labels[0], labels[1] = True, False
    # coarse rounding creates ties
    scores = np.round(rng.normal(size=n) + labels * rng.uniform(0, 2), int(rng.integers(0, 3)))
    maxfpr = float(rng.choice([0.01, 0.05, 0.1, 0.3, 1.0]))
    return scores, labels.astype(int), maxfpr


def spauc_sweep(n_sets=200, seed=0):
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_sets):
        scores, labels, maxfpr = random_score_set(rng)
        worst = max(worst, abs(spauc(scores, labels, maxfpr) - brute_force_spauc(scores, labels, maxfpr)))
    return worst


# -- alignment anchors ----------------------------------------------------------------


def ced_of(z, domains, labels):
    tape = Tape()
    return float(ced(tape, batch_class_stats(tape, tape.const(z), domains, labels)).value)


def ced_hand_case():
    """1-d cell means 0 (source/0), 1 (source/1), 0.5 (target/0), 1.5 (target/1)."""
    z = np.array([[-0.1], [0.1], [0.9], [1.1], [0.4], [0.6], [1.4], [1.6]])
    domains = ["source"] * 4 + ["target"] * 4
    labels = [0, 0, 1, 1, 0, 0, 1, 1]
    return z, domains, labels


# -- gradient suite -------------------------------------------------------------------


def _op_cases():
    """name -> (parameter shapes, build(tape, p) -> scalar node)."""
    pos = lambda t, x: t.add(t.square(x), 0.5)  # noqa: E731  strictly positive input
    mask = np.array([[True, False, True, True], [False, True, True, False]])
    idx = np.array([[0, 2, 2], [3, 1, 0]])
    w = np.linspace(-1.0, 1.0, 8).reshape(2, 4)  # fixed weights keep outputs non-trivial
    red = lambda t, x: t.sum(t.mul(x, np.resize(w, x.shape)))  # noqa: E731
    return {
        "add": ({"a": (2, 4), "b": (4,)}, lambda t, p: red(t, t.add(p["a"], p["b"]))),
        "sub": ({"a": (2, 4), "b": (2, 4)}, lambda t, p: red(t, t.sub(p["a"], p["b"]))),
        "mul": ({"a": (2, 4), "b": (2, 4)}, lambda t, p: red(t, t.mul(p["a"], p["b"]))),
        "div": ({"a": (2, 4), "b": (2, 4)}, lambda t, p: red(t, t.div(p["a"], pos(t, p["b"])))),
        "matmul": ({"a": (2, 3, 4), "w": (4, 2)}, lambda t, p: red(t, t.matmul(p["a"], p["w"]))),
        "inner": ({"a": (2, 4), "b": (2, 4)}, lambda t, p: red(t, t.inner(p["a"], p["b"]))),
        "scale": ({"a": (2, 4)}, lambda t, p: red(t, t.scale(p["a"], -1.7))),
        "concat": ({"a": (2, 1), "b": (2, 3)}, lambda t, p: red(t, t.concat([p["a"], p["b"]], axis=-1))),
        "reshape": ({"a": (8,)}, lambda t, p: red(t, t.reshape(p["a"], (2, 4)))),
        "getitem": ({"a": (3, 4)}, lambda t, p: red(t, t.getitem(p["a"], (slice(0, 2),)))),
        "gather": ({"a": (4, 4)}, lambda t, p: red(t, t.gather(p["a"], idx))),
        "sum": ({"a": (2, 3, 4)}, lambda t, p: red(t, t.sum(p["a"], axis=1))),
        "square": ({"a": (2, 4)}, lambda t, p: red(t, t.square(p["a"]))),
        "exp": ({"a": (2, 4)}, lambda t, p: red(t, t.exp(p["a"]))),
        "log": ({"a": (2, 4)}, lambda t, p: red(t, t.log(pos(t, p["a"])))),
        "sigmoid": ({"a": (2, 4)}, lambda t, p: red(t, t.sigmoid(p["a"]))),
        "relu": ({"a": (2, 4)}, lambda t, p: red(t, t.relu(p["a"]))),
        "clip": ({"a": (2, 4)}, lambda t, p: red(t, t.clip(p["a"], -0.5, 0.5))),
        "masked_softmax": ({"a": (2, 4)}, lambda t, p: red(t, t.masked_softmax(p["a"], mask))),
        "dropout": ({"a": (2, 4)}, lambda t, p: red(t, t.dropout(p["a"], 0.8))),
    }


def _away_from_kinks(name, value):
    """Keep non-smooth ops' inputs at least 1e-3 away from their kinks."""
    if name == "relu":
        return np.where(np.abs(value) < 1e-3, 1e-2, value)
    if name == "clip":
        for edge in (-0.5, 0.5):
            value = np.where(np.abs(value - edge) < 1e-3, edge + 1e-2, value)
    return value


def op_gradient_errors(points=100, seed=0):
    rng = np.random.default_rng(seed)
    out = {}
    for name, (shapes, build) in _op_cases().items():
        worst = 0.0
        for _ in range(points):
            store = ParamStore()
            for pname, shape in shapes.items():
                store.add(pname, _away_from_kinks(name, rng.normal(size=shape)))
            fn = lambda t: build(t, {n: t.param(n) for n in shapes})  # noqa: E731
            worst = max(worst, grad_check(fn, store))
        out[name] = worst
    return out


def tiny_schema():
    return Schema([
        FieldSpec("a", "categorical", shared=True),
        FieldSpec("b", "categorical", shared=False),
        FieldSpec("x", "numerical"),
    ])


def random_samples(rng, n, domain, t_max=4):
    samples = []
    for i in range(n):
        ev = lambda: {"a": f"a{rng.integers(4)}", "b": f"b{rng.integers(3)}", "x": float(rng.normal())}  # noqa: E731
        hist = [ev() for _ in range(int(rng.integers(0, t_max)))]
        samples.append(Sample(hist, ev(), int(i % 2), domain, i, f"{domain}-{i}"))
    return samples


def _randomize(store: ParamStore, rng, scale=0.5):
    for name, p in store.items():
        p.value[...] = rng.normal(scale=scale, size=p.value.shape)


def hen_loss_builder(rng, extractor="hen", k=4, t_max=4, batch=6):
    schema = tiny_schema()
    samples = random_samples(rng, batch, "source", t_max)
    vocabs = vocab_from_values(schema, {"a": [f"a{i}" for i in range(4)], "b": [f"b{i}" for i in range(3)]})
    model = HENModel(schema, EmbeddingTable("emb", schema, vocabs, k), extractor, t_max, hidden=5)
    store = ParamStore()
    model.init(store, rng)
    enc = model.encode(samples)
    return store, lambda tape: model.loss(tape, enc)[0]


def transfer_loss_builder(rng, align="ced", lam=0.7, k=4, t_max=4, per_domain=4, extractor="hen"):
    schema = tiny_schema()
    values = {"a": [f"a{i}" for i in range(4)], "b": [f"b{i}" for i in range(3)]}
    model = TransferModel(schema, build_domain_vocabs(schema, values, values), extractor, k, t_max, hidden=5)
    store = ParamStore()
    model.init(store, rng)
    src = model.encode_views(random_samples(rng, per_domain, "source", t_max), "source")
    tgt = model.encode_views(random_samples(rng, per_domain, "target", t_max), "target")
    batch = model.make_batch(src, tgt)
    return store, lambda tape: model.loss(tape, batch, lam, align)[0]


def relu_margin(build_fn, store: ParamStore) -> float:
    """Smallest |input| over every relu node in the graph (inf if none)."""
    tape = Tape(store, train=False)
    build_fn(tape)
    ins = [np.abs(n.inputs[0].value).min() for n in tape.nodes if n.op == "relu" and n.inputs[0].value.size]
    return float(min(ins, default=np.inf))


def _smooth_point(make, rng, margin=1e-3, tries=100):
    """Random parameters whose relu inputs all sit at least ``margin`` from 0,
    so finite differences never straddle a kink."""
    for _ in range(tries):
        store, fn = make()
        _randomize(store, rng)
        if relu_margin(fn, store) >= margin:
            return store, fn
    raise RuntimeError("no kink-free point found")


def model_gradient_errors(points=100, seed=0, coord_points=5, max_coords=3):
    """Directional checks at every point plus per-coordinate probes at the
    first ``coord_points`` points."""
    rng = np.random.default_rng(seed)
    cases = {
        "hen_loss": lambda: hen_loss_builder(rng),
        "dense_loss": lambda: hen_loss_builder(rng, "dense"),
        "fm_loss": lambda: hen_loss_builder(rng, "fm"),
        "transfer_loss_ced": lambda: transfer_loss_builder(rng, "ced"),
        "transfer_loss_ed": lambda: transfer_loss_builder(rng, "ed"),
    }
    out = {}
    for name, make in cases.items():
        worst = 0.0
        for i in range(points):
            store, fn = _smooth_point(make, rng)
            worst = max(worst, directional_check(fn, store, seed=i))
            if i < coord_points:
                worst = max(worst, grad_check(fn, store, max_coords=max_coords, seed=i))
        out[name] = worst
    return out


def event_extract_error(points=100, seed=0, k=4):
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(points):
        store = ParamStore()
        store.add("e", rng.normal(scale=0.5, size=(3, 5, k)))
        for f in ("f1", "f2", "f3"):
            store.add(f"{f}.w", rng.normal(scale=0.5, size=(k, k)))
        store.add("f1.b", rng.normal(size=k))
        mask = rng.random((3, 5)) < 0.7
        mask[:, 0] = True
        w = rng.normal(size=k)

        def fn(t):
            s, _ = event_extract(t, t.param("e"), mask, t.param("f1.w"), t.param("f1.b"), t.param("f2.w"),
                                 t.param("f3.w"), k)
            return t.sum(t.mul(s, w))

        worst = max(worst, grad_check(fn, store))
    return worst


def field_extract_error(points=100, seed=0):
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(points):
        store = ParamStore()
        store.add("v", rng.normal(size=(2, 5, 4)))
        store.add("a", rng.normal(size=(2, 5)))
        worst = max(worst, grad_check(lambda t: t.sum(field_extract(t, t.param("v"), t.param("a"))[0]), store))
    return worst


def nll_error(points=100, seed=0):
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(points):
        store = ParamStore()
        store.add("logit", rng.normal(size=6))
        y = rng.integers(0, 2, size=6)
        worst = max(worst, grad_check(lambda t: nll_loss(t, t.sigmoid(t.param("logit")), y), store))
    return worst


def gradient_suite(points=100, seed=0):
    """Max relative finite-difference error per operation and per full loss."""
    errs = op_gradient_errors(points, seed)
    errs["field_extract"] = field_extract_error(points, seed)
    errs["event_extract"] = event_extract_error(points, seed)
    errs["nll_loss"] = nll_error(points, seed)
    errs.update(model_gradient_errors(points, seed))
    return errs


# -- runner ---------------------------------------------------------------------------


def _timed(name, fn, limit, compare="le"):
    t0 = time.perf_counter()
    value = float(fn())
    ok = value <= limit if compare == "le" else value >= limit
    return Check(name, ok, value, limit, time.perf_counter() - t0)


def run_selftest(quick=False):
    """Run every built-in check; returns the list of :class:`Check`."""
    checks = [
        _timed("fm_equivalence", lambda: fm_equivalence(200 if quick else 1000), 1e-9),
        _timed("spauc_vs_bruteforce", lambda: spauc_sweep(50 if quick else 200), 1e-12),
    ]
    perfect = spauc([0.9, 0.8, 0.2, 0.1], [1, 1, 0, 0], 0.01)
    tied = spauc([0.5] * 6, [1, 0, 1, 0, 0, 0], 0.01)
    checks.append(Check("spauc_anchors", perfect == 1.0 and tied == 0.5, abs(perfect - 1) + abs(tied - 0.5), 0, 0))
    z, d, y = ced_hand_case()
    checks.append(Check("ced_hand_case", abs(ced_of(z, d, y) - 1 / 9) <= 1e-12, abs(ced_of(z, d, y) - 1 / 9),
                        1e-12, 0))
    base = ced_of(z, d, y)
    gap = max(abs(ced_of(alpha * z, d, y) - base) for alpha in (0.1, 3.0, 10.0))
    checks.append(Check("ced_scale_invariance", gap <= 1e-9, gap, 1e-9, 0))
    aligned = ced_of(np.array([[0.0], [0.0], [1.0], [1.0], [0.0], [0.0], [1.0], [1.0]]), d, y)
    checks.append(Check("ced_aligned_zero", aligned == 0.0, aligned, 0, 0))
    lam = [lambda_schedule(0.0), lambda_schedule(0.5), lambda_schedule(1.0)]
    lam_gap = abs(lam[0]) + abs(lam[1] - (2 / (1 + np.exp(-5)) - 1)) + abs(lam[2] - (2 / (1 + np.exp(-10)) - 1))
    checks.append(Check("lambda_schedule", lam_gap <= 1e-15, lam_gap, 1e-15, 0))
    t0 = time.perf_counter()
    grads = gradient_suite(20 if quick else 100)
    worst = max(grads.values())
    checks.append(Check("gradient_suite", worst <= 1e-4, worst, 1e-4, time.perf_counter() - t0))
    return checks
