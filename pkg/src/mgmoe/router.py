"""Degradation/granularity heads, noisy gates, two-stage routing and router training.

Routing picks the finest cluster k from gate_d(e_deg), then one level of
k's ancestor chain from gate_g(e_gran). Training minimizes

    l1(mixture over the chain) + alpha * L_dg + beta * L_load + ce_weight * CE(gate_d)

with experts frozen.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

import numpy as np

from .tinynn import Adam, Mlp, ShapeError, sigmoid, softmax, softmax_backward, softplus

log = logging.getLogger(__name__)

GRAN_EPS = 1e-6


class RoutingError(ValueError):
    pass


# ---------------------------------------------------------------- gate

class Gate:
    """One-layer noisy gate: softmax(h.w_g + N(0,1) * softplus(h.w_n)).

    The noise term is added to the logits (train mode only) so the output
    stays on the simplex; eval mode is softmax(h.w_g).
    """

    def __init__(self, in_dim: int, n_out: int, seed: int = 0, init: str = "glorot"):
        rng = np.random.default_rng(seed)
        s1, s2 = rng.integers(0, 2 ** 31, size=2)
        self.w_g = Mlp([in_dim, n_out], ["none"], seed=int(s1), init=init)
        self.w_n = Mlp([in_dim, n_out], ["none"], seed=int(s2), init=init)
        self._cache = None
        self.grads = None

    @property
    def n_out(self) -> int:
        return self.w_g.output_dim

    @property
    def in_dim(self) -> int:
        return self.w_g.input_dim

    def params(self) -> list[np.ndarray]:
        return self.w_g.params() + self.w_n.params()

    def forward(self, h, mode: str = "eval", rng: np.random.Generator | None = None,
                noise: np.ndarray | None = None) -> np.ndarray:
        h = np.atleast_2d(np.asarray(h, dtype=np.float64))
        zg = self.w_g.forward(h)
        if mode == "eval":
            p = softmax(zg)
            self._cache = (p, None, None)
            return p
        if mode != "train":
            raise ValueError(f"unknown gate mode {mode!r}")
        zn = self.w_n.forward(h)
        if noise is None:
            rng = rng if rng is not None else np.random.default_rng(0)
            noise = rng.standard_normal(zg.shape)
        p = softmax(zg + noise * softplus(zn))
        self._cache = (p, noise, zn)
        return p

    __call__ = forward

    def backward(self, gp) -> np.ndarray:
        p, noise, zn = self._cache
        gl = softmax_backward(p, np.atleast_2d(gp))
        gh = self.w_g.backward(gl)
        grads = list(self.w_g.grads)
        if noise is not None:
            gh = gh + self.w_n.backward(gl * noise * sigmoid(zn))
            grads += self.w_n.grads
        else:
            grads += [np.zeros_like(q) for q in self.w_n.params()]
        self.grads = grads
        return gh

    def to_dict(self) -> dict:
        return {"w_g": self.w_g.to_dict(), "w_n": self.w_n.to_dict()}

    @classmethod
    def from_dict(cls, d) -> "Gate":
        g = cls.__new__(cls)
        g.w_g = Mlp.from_dict(d["w_g"])
        g.w_n = Mlp.from_dict(d["w_n"])
        g._cache = None
        g.grads = None
        return g


# ---------------------------------------------------------------- losses

def loss_dg(e_deg, e_gran, u_y) -> tuple[float, np.ndarray, np.ndarray]:
    """||u - e_deg||^2 / (2 e_gran) + ln(e_gran) / 2, averaged over a batch.

    Returns (loss, d/d e_deg, d/d e_gran) with the gradient shapes of the inputs.
    """
    e = np.asarray(e_deg, dtype=np.float64)
    g = np.asarray(e_gran, dtype=np.float64)
    u = np.asarray(u_y, dtype=np.float64)
    if np.any(g <= 0):
        raise ValueError("e_gran must be strictly positive")
    single = e.ndim == 1
    e2, u2 = np.atleast_2d(e), np.atleast_2d(u)
    g1 = np.reshape(g, (-1,))
    if e2.shape != u2.shape or len(g1) != len(e2):
        raise ShapeError(f"loss_dg shapes {e.shape}, {g.shape}, {u.shape} do not agree")
    n = len(e2)
    diff = e2 - u2
    d2 = (diff ** 2).sum(axis=1)
    loss = float(np.mean(d2 / (2 * g1) + 0.5 * np.log(g1)))
    ge = diff / g1[:, None] / n
    gg = (-d2 / (2 * g1 ** 2) + 0.5 / g1) / n
    return loss, (ge[0] if single else ge), gg.reshape(np.shape(g))


def loss_load(loads) -> tuple[float, np.ndarray]:
    """Population coefficient of variation sigma/mu and its gradient."""
    l = np.asarray(loads, dtype=np.float64)
    if np.any(l < 0):
        raise ValueError("loads must be nonnegative")
    mu = l.mean()
    if mu <= 0:
        raise ValueError("loads are all zero")
    sd = l.std()
    if sd == 0:
        return 0.0, np.zeros_like(l)
    n = len(l)
    grad = (l - mu) / (n * sd * mu) - sd / (n * mu ** 2)
    return float(sd / mu), grad


# ---------------------------------------------------------------- bundle

@dataclass
class RouterBundle:
    head_d: Mlp
    head_g: Mlp
    gate_d: Gate
    gate_g: Gate
    tree_checksum: str = ""

    @classmethod
    def create(cls, dr_dim: int, n_finest: int, n_levels: int, seed: int = 0,
               init: str = "glorot", tree_checksum: str = "",
               gate_init: str = "zeros") -> "RouterBundle":
        """Gates start at zero (uniform routing): a random gate on the unbounded
        e_gran input saturates its softmax before training begins."""
        s = np.random.default_rng(seed).integers(0, 2 ** 31, size=4)
        return cls(Mlp([dr_dim] * 6, seed=int(s[0]), init=init),
                   Mlp([dr_dim] * 5 + [1], seed=int(s[1]), init=init),
                   Gate(dr_dim, n_finest, seed=int(s[2]), init=gate_init),
                   Gate(1, n_levels, seed=int(s[3]), init=gate_init),
                   tree_checksum)

    @property
    def dr_dim(self) -> int:
        return self.head_d.input_dim

    def modules(self):
        return [self.head_d, self.head_g, self.gate_d, self.gate_g]

    def params(self) -> list[np.ndarray]:
        return [p for m in self.modules() for p in m.params()]

    def to_dict(self) -> dict:
        return {"schema": 1, "tree_checksum": self.tree_checksum,
                "head_d": self.head_d.to_dict(), "head_g": self.head_g.to_dict(),
                "gate_d": self.gate_d.to_dict(), "gate_g": self.gate_g.to_dict()}

    @classmethod
    def from_dict(cls, d) -> "RouterBundle":
        if d.get("schema") != 1:
            raise ValueError(f"unsupported router schema {d.get('schema')!r}")
        return cls(Mlp.from_dict(d["head_d"]), Mlp.from_dict(d["head_g"]),
                   Gate.from_dict(d["gate_d"]), Gate.from_dict(d["gate_g"]), d["tree_checksum"])

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh)

    @classmethod
    def load(cls, path) -> "RouterBundle":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def estimate(bundle: RouterBundle, dr) -> tuple[np.ndarray, np.ndarray]:
    """e_deg = head_d(dr); e_gran = softplus(head_g(dr)) + 1e-6 (batched or single)."""
    dr = np.asarray(dr, dtype=np.float64)
    if dr.shape[-1] != bundle.dr_dim:
        raise ShapeError(f"DR has {dr.shape[-1]} components, router expects {bundle.dr_dim}")
    e_deg = bundle.head_d.forward(dr)
    a = bundle.head_g.forward(dr)
    e_gran = softplus(a)[..., 0] + GRAN_EPS
    return e_deg, (float(e_gran) if np.ndim(e_gran) == 0 else e_gran)


@dataclass
class RoutingDecision:
    finest_index: int
    chosen: tuple
    gate_d: list
    gate_g: list
    e_gran: float
    mask: list | None = None

    @property
    def level(self) -> int:
        return self.chosen[0]

    def to_dict(self) -> dict:
        return {"finest_index": self.finest_index, "chosen": list(self.chosen),
                "gate_d": list(self.gate_d), "gate_g": list(self.gate_g),
                "e_gran": self.e_gran, "mask": self.mask}

    @classmethod
    def from_dict(cls, d) -> "RoutingDecision":
        return cls(d["finest_index"], tuple(d["chosen"]), d["gate_d"], d["gate_g"], d["e_gran"],
                   d.get("mask"))


def _check_compat(bundle, tree):
    if bundle.gate_d.n_out != tree.level_counts[-1] or bundle.gate_g.n_out != tree.n_levels:
        raise RoutingError("router gate sizes do not match the tree")
    if bundle.tree_checksum and bundle.tree_checksum != tree.checksum():
        raise RoutingError("router was trained against a different tree")


def route(bundle: RouterBundle, tree, dr, mask=None, finest_only: bool = False) -> RoutingDecision:
    """Eval-mode two-stage top-1 routing, optionally restricted to `mask` finest clusters."""
    _check_compat(bundle, tree)
    e_deg, e_gran = estimate(bundle, dr)
    pd = bundle.gate_d.forward(e_deg, "eval")[0]
    allowed = None
    if mask is not None:
        allowed = sorted(set(int(i) for i in mask) & set(range(len(pd))))
        if not allowed:
            raise RoutingError("instruction mask leaves no finest cluster")
        k = allowed[int(np.argmax(pd[allowed]))]
    else:
        k = int(np.argmax(pd))
    chain = tree.chain(k)
    pg = bundle.gate_g.forward(np.array([[e_gran]]), "eval")[0]
    level = tree.n_levels - 1 if finest_only else int(np.argmax(pg))
    return RoutingDecision(k, chain[level], pd.tolist(), pg.tolist(), float(e_gran), allowed)


# ---------------------------------------------------------------- instruction mode

def cluster_task_stats(tree, specs: dict) -> dict:
    """Per finest cluster: member count and how many members' specs contain each kind."""
    stats = {}
    for node in tree.levels[-1]:
        counts = {}
        for m in node.members:
            for kind in set(specs[m].kinds):
                counts[kind] = counts.get(kind, 0) + 1
        stats[node.index] = {"size": len(node.members), "kinds": counts}
    return stats


def instruction_mask_for(task: str, tree, stats: dict) -> list[int]:
    """Finest clusters where a majority of members' specs contain `task`.

    If the task occurs but never holds a majority, the clusters with the
    highest share of it are used.
    """
    stats = {int(k): v for k, v in stats.items()}
    share = {k: v["kinds"].get(task, 0) / max(1, v["size"]) for k, v in stats.items()}
    if not any(share.values()):
        raise RoutingError(f"task {task!r} does not occur in the training corpus")
    if tree.n_levels == 1:
        return [0]
    mask = sorted(k for k, s in share.items() if s > 0.5)
    if not mask:
        top = max(share.values())
        mask = sorted(k for k, s in share.items() if s == top)
    return mask


# ---------------------------------------------------------------- training

@dataclass
class RouterConfig:
    steps: int = 2000
    lr: float = 1e-3
    batch: int = 8
    alpha: float = 0.1
    beta: float = 0.01
    ce_weight: float = 1.0
    ce_head_weight: float = 0.0  # share of the cross-entropy gradient passed on to head_d
    ce_clean_only: bool = False
    jitter_relabel: str = "ce"  # none | ce | all
    jitter_prob: float = 0.4
    jitter_scale: float = 3.0
    chain: str = "sibling"  # predicted | true | sibling (jittered rows take a sibling's chain)
    seed: int = 0


@dataclass
class RouterSample:
    dr: np.ndarray          # standardized DR
    label: int              # finest cluster from the tree
    expert_out: np.ndarray  # (n_nodes, H, W, 3) outputs of every node's expert, float32
    clean: np.ndarray


@dataclass
class TrainLog:
    steps: list = field(default_factory=list)
    l1: list = field(default_factory=list)
    dg: list = field(default_factory=list)
    load: list = field(default_factory=list)
    ce: list = field(default_factory=list)


def node_order(tree) -> list[tuple[int, int]]:
    return [(lv, n.index) for lv, nodes in enumerate(tree.levels) for n in nodes]


def precompute_samples(tree, registry, items) -> list[RouterSample]:
    """items: iterable of (image id or None, standardized dr, degraded, clean)."""
    from .experts import apply_expert

    order = node_order(tree)
    resolved = [registry.resolve(n) for n in order]
    uniq = sorted(set(resolved))
    items = list(items)
    X = np.stack([np.asarray(it[2], dtype=np.float64) for it in items])
    outs = {}
    for key in uniq:
        model = registry.experts[key]
        outs[key] = np.concatenate([apply_expert(model, X[s:s + 32]).astype(np.float32)
                                    for s in range(0, len(X), 32)])
    samples = []
    for i, (iid, dr, _, clean) in enumerate(items):
        label = tree.assignment[iid] if iid is not None and iid in tree.assignment else \
            tree.assign(dr, tree.n_levels - 1)
        eo = np.stack([outs[r][i] for r in resolved])
        samples.append(RouterSample(np.asarray(dr, dtype=np.float64), int(label), eo,
                                    np.asarray(clean, dtype=np.float32)))
    return samples


def _siblings(tree) -> list[list[int]]:
    """Finest clusters sharing each one's parent, itself excluded when it has company."""
    fin = tree.levels[-1]
    if tree.n_levels == 1:
        return [[0]]
    out = []
    for node in fin:
        sib = [n.index for n in fin if n.parent == node.parent and n.index != node.index]
        out.append(sib or [node.index])
    return out


def train_routers(bundle: RouterBundle, tree, registry, samples, config: RouterConfig | None = None,
                  log_every: int = 100) -> tuple[RouterBundle, TrainLog]:
    """Train heads and gates in place against frozen experts; returns (bundle, log)."""
    cfg = config or RouterConfig()
    if registry is not None and registry.tree_checksum != tree.checksum():
        raise RoutingError("expert registry was built against a different tree")
    _check_compat(bundle, tree)
    samples = list(samples)
    if not samples:
        raise ValueError("no router training samples")
    order = node_order(tree)
    slot = {node: i for i, node in enumerate(order)}
    chains = [[slot[n] for n in tree.chain(k)] for k in range(tree.level_counts[-1])]
    centers = tree.centers(tree.n_levels - 1)
    siblings = _siblings(tree)
    D = np.stack([s.dr for s in samples])
    labels = np.array([s.label for s in samples])
    rng = np.random.default_rng(cfg.seed)
    opt = Adam(bundle.params(), lr=cfg.lr)
    tlog = TrainLog()
    B = min(cfg.batch, len(samples))
    for step in range(1, cfg.steps + 1):
        idx = rng.integers(0, len(samples), size=B)
        x = D[idx]
        jittered = rng.random(B) < cfg.jitter_prob
        jit = jittered * rng.uniform(0, cfg.jitter_scale, B)
        x = x + jit[:, None] * rng.standard_normal(x.shape)
        y = labels[idx]
        y_ce = y
        if cfg.jitter_relabel != "none":
            # the tree labels any DR, so jittered rows can get their exact assignment
            y_ce = np.array([tree.assign(xi, tree.n_levels - 1) if j else yi
                             for xi, j, yi in zip(x, jittered, y)])
        u = centers[y_ce if cfg.jitter_relabel == "all" else y]

        e_deg = bundle.head_d.forward(x)
        a = bundle.head_g.forward(x)[:, 0]
        e_gran = softplus(a) + GRAN_EPS

        pd = bundle.gate_d.forward(e_deg, "train", rng)
        # cross-entropy on unjittered rows only: a jittered DR may have crossed a boundary
        w_ce = (~jittered if cfg.ce_clean_only else np.ones(B, bool)).astype(np.float64)
        w_ce = w_ce / max(w_ce.sum(), 1.0)
        ce = float(-np.sum(w_ce * np.log(pd[np.arange(B), y_ce] + 1e-12)))
        g_pd = np.zeros_like(pd)
        g_pd[np.arange(B), y_ce] = -w_ce / (pd[np.arange(B), y_ce] + 1e-12)
        g_edeg = cfg.ce_weight * cfg.ce_head_weight * bundle.gate_d.backward(g_pd)
        grads_gate_d = bundle.gate_d.grads
        grads_gate_d = [cfg.ce_weight * g for g in grads_gate_d]

        pg = bundle.gate_g.forward(e_gran[:, None], "train", rng)
        if cfg.chain == "predicted":
            ks = np.argmax(pd, axis=1)
        elif cfg.chain == "sibling":
            ks = np.array([rng.choice(siblings[yi]) if j else yi for yi, j in zip(y, jittered)])
        else:
            ks = y
        outs = np.stack([samples[i].expert_out[chains[k]] for i, k in zip(idx, ks)]).astype(np.float64)
        tgt = np.stack([samples[i].clean for i in idx]).astype(np.float64)
        yhat = np.einsum("bl,blhwc->bhwc", pg, outs)
        diff = yhat - tgt
        l1 = float(np.abs(diff).mean())
        g_yhat = np.sign(diff) / diff.size
        g_pg = np.einsum("bhwc,blhwc->bl", g_yhat, outs)

        if cfg.beta > 0 and pg.shape[1] > 1:
            lload, g_loads = loss_load(pg.sum(axis=0))
            g_pg = g_pg + cfg.beta * g_loads[None, :]
        else:
            lload = loss_load(pg.sum(axis=0))[0] if pg.shape[1] > 1 else 0.0

        ldg, g_e, g_g = loss_dg(e_deg, e_gran, u)
        g_egran = bundle.gate_g.backward(g_pg)[:, 0] + cfg.alpha * g_g
        bundle.head_g.backward((g_egran * sigmoid(a))[:, None])
        bundle.head_d.backward(g_edeg + cfg.alpha * g_e)

        grads = (bundle.head_d.grads + bundle.head_g.grads + grads_gate_d + bundle.gate_g.grads)
        opt.step(grads)
        if step % log_every == 0 or step == cfg.steps:
            tlog.steps.append(step)
            tlog.l1.append(l1)
            tlog.dg.append(ldg)
            tlog.load.append(lload)
            tlog.ce.append(ce)
            log.debug("router step %d: l1 %.5f dg %.4f load %.4f ce %.4f", step, l1, ldg, lload, ce)
    bundle.tree_checksum = tree.checksum()
    return bundle, tlog


def level_loads(bundle: RouterBundle, drs) -> np.ndarray:
    """Eval-mode soft level loads summed over a set of DRs."""
    _, e_gran = estimate(bundle, np.atleast_2d(drs))
    return bundle.gate_g.forward(np.reshape(e_gran, (-1, 1)), "eval").sum(axis=0)
