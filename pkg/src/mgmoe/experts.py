"""Residual ConvNet restorers, one per granularity-tree node."""
from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .imagecore import as_image
from .tinynn import Adam, ConvNet, cosine_lr, l1_loss

log = logging.getLogger(__name__)

MIN_MEMBERS = 8


@dataclass
class ExpertConfig:
    steps: int = 2000           # root expert
    child_steps: int = 1000     # non-root experts, fine-tuned from their parent
    lr: float = 3e-4
    batch: int = 8
    patch: int = 32
    channels: list = field(default_factory=lambda: [3, 16, 16, 3])
    val_frac: float = 0.1
    eval_every: int = 100
    seed: int = 0
    dtype: str = "float32"


@dataclass
class ExpertModel:
    node: tuple
    net: ConvNet
    final_l1: float = float("nan")
    steps: int = 0
    best_step: int = 0

    def __call__(self, img):
        return apply_expert(self, img)


def apply_expert(model, img, dtype: str = "float32") -> np.ndarray:
    """clip(x + net(x)); accepts one (H, W, 3) image or an NHWC batch."""
    net = model.net if isinstance(model, ExpertModel) else model
    x = np.asarray(img, dtype=np.float64)
    if x.ndim == 3:
        x = as_image(x)
    r = net.forward(x.astype(dtype)).astype(np.float64)
    return np.clip(x + r, 0.0, 1.0)


def _stack(pairs):
    return (np.stack([np.asarray(d, dtype=np.float64) for d, _ in pairs]),
            np.stack([np.asarray(c, dtype=np.float64) for _, c in pairs]))


def _val_l1(net, xv, yv, dtype):
    if len(xv) == 0:
        return float("nan")
    total = 0.0
    for s in range(0, len(xv), 16):
        x = xv[s:s + 16]
        pred = np.clip(x + net.forward(x.astype(dtype)).astype(np.float64), 0.0, 1.0)
        total += np.abs(pred - yv[s:s + 16]).sum()
    return float(total / xv.size)


def split_val(n: int, frac: float, seed: int) -> np.ndarray:
    """Boolean validation mask over n items by seeded shuffle (at least one item)."""
    mask = np.zeros(n, dtype=bool)
    k = max(1, int(round(frac * n)))
    mask[np.random.default_rng(seed).permutation(n)[:k]] = True
    return mask


def fit_expert(pairs, config: ExpertConfig | None = None, init: ConvNet | None = None,
               val_pairs=None, steps: int | None = None, node=(0, 0)) -> ExpertModel:
    """Fit a residual restorer with l1 loss, Adam and cosine annealing.

    Without `val_pairs`, 10% of `pairs` is held out. The returned parameters
    are those with the lowest held-out l1, step 0 (the initialization) included.
    """
    cfg = config or ExpertConfig()
    pairs = list(pairs)
    if not pairs:
        raise ValueError("fit_expert needs at least one pair")
    if val_pairs is None:
        if len(pairs) < MIN_MEMBERS:
            raise ValueError(f"fit_expert needs >= {MIN_MEMBERS} pairs, got {len(pairs)}")
        vm = split_val(len(pairs), cfg.val_frac, cfg.seed)
        val_pairs = [p for p, v in zip(pairs, vm) if v]
        pairs = [p for p, v in zip(pairs, vm) if not v]
    X, Y = _stack(pairs)
    xv, yv = _stack(val_pairs) if val_pairs else (np.zeros((0,) + X.shape[1:]), None)
    if init is not None:
        net = ConvNet.from_dict(init.to_dict())
    else:
        net = ConvNet(cfg.channels, seed=cfg.seed, zero_last=True)
    total = cfg.steps if steps is None else steps
    dt = np.dtype(cfg.dtype)
    rng = np.random.default_rng(cfg.seed)
    opt = Adam(net.params(), lr=cfg.lr)
    best = (_val_l1(net, xv, yv, dt), 0, [p.copy() for p in net.params()])
    n, h, w, _ = X.shape
    ps = min(cfg.patch, h, w)
    last_l1 = float("nan")
    for step in range(1, total + 1):
        idx = rng.integers(0, n, size=cfg.batch)
        oy = rng.integers(0, h - ps + 1, size=cfg.batch)
        ox = rng.integers(0, w - ps + 1, size=cfg.batch)
        xb = np.stack([X[i, a:a + ps, b:b + ps] for i, a, b in zip(idx, oy, ox)])
        yb = np.stack([Y[i, a:a + ps, b:b + ps] for i, a, b in zip(idx, oy, ox)])
        flip = rng.random(cfg.batch) < 0.5
        xb[flip] = xb[flip, :, ::-1]
        yb[flip] = yb[flip, :, ::-1]
        r = net.forward(xb.astype(dt))
        last_l1, g = l1_loss(xb + r.astype(np.float64), yb)
        net.backward(g.astype(dt), input_grad=False)
        opt.step(net.grads, lr=cosine_lr(cfg.lr, step - 1, total))
        if step % cfg.eval_every == 0 or step == total:
            v = _val_l1(net, xv, yv, dt)
            if v < best[0]:
                best = (v, step, [p.copy() for p in net.params()])
    for p, b in zip(net.params(), best[2]):
        p[...] = b
    return ExpertModel(tuple(node), net, final_l1=best[0] if len(xv) else last_l1,
                       steps=total, best_step=best[1])


# ---------------------------------------------------------------- registry

@dataclass
class ExpertRegistry:
    tree_checksum: str
    experts: dict  # (level, index) -> ExpertModel
    aliases: dict  # (level, index) -> (level, index) of the expert actually used

    def resolve(self, node) -> tuple:
        node = tuple(node)
        while node in self.aliases:
            node = self.aliases[node]
        return node

    def get(self, node) -> ExpertModel:
        return self.experts[self.resolve(node)]

    def __len__(self):
        return len(self.experts)

    def save(self, directory) -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        entries = []
        for (lv, ix), m in sorted(self.experts.items()):
            fname = f"expert_{lv}_{ix}.json"
            with open(d / fname, "w") as fh:
                json.dump(m.net.to_dict(), fh)
            entries.append({"level": lv, "index": ix, "file": fname, "alias_of": None,
                            "final_l1": m.final_l1, "steps": m.steps, "best_step": m.best_step})
        for (lv, ix), target in sorted(self.aliases.items()):
            entries.append({"level": lv, "index": ix, "file": None, "alias_of": list(target)})
        with open(d / "registry.json", "w") as fh:
            json.dump({"schema": 1, "tree_checksum": self.tree_checksum, "nodes": entries}, fh,
                      indent=1, sort_keys=True)

    @classmethod
    def load(cls, directory) -> "ExpertRegistry":
        d = Path(directory)
        with open(d / "registry.json") as fh:
            meta = json.load(fh)
        experts, aliases = {}, {}
        for e in meta["nodes"]:
            key = (e["level"], e["index"])
            if e["alias_of"] is not None:
                aliases[key] = tuple(e["alias_of"])
            else:
                with open(d / e["file"]) as fh:
                    net = ConvNet.from_dict(json.load(fh))
                experts[key] = ExpertModel(key, net, e["final_l1"], e["steps"], e["best_step"])
        return cls(meta["tree_checksum"], experts, aliases)


def is_val_id(image_id: str, seed: int, frac: float = 0.1) -> bool:
    """Global seeded validation membership, so a child's held-out set nests in its parent's."""
    h = hashlib.sha256(f"{seed}:{image_id}".encode()).digest()
    return int.from_bytes(h[:8], "little") / 2 ** 64 < frac


def _cache_key(members, init: ConvNet | None, cfg: ExpertConfig, steps: int) -> str:
    h = hashlib.sha256()
    h.update(json.dumps(sorted(members)).encode())
    h.update(json.dumps(asdict(cfg), sort_keys=True).encode())
    h.update(str(steps).encode())
    if init is not None:
        for p in init.params():
            h.update(np.ascontiguousarray(p).tobytes())
    return h.hexdigest()[:32]


def train_registry(tree, corpus: dict, config: ExpertConfig | None = None,
                   cache_dir=None) -> ExpertRegistry:
    """Fit one expert per tree node on exactly that node's members, coarse to fine.

    `corpus` maps image id -> (degraded, clean). Each non-root expert starts
    from its parent's weights. Nodes with fewer than MIN_MEMBERS members
    alias their parent, as do nodes whose fine-tuning never improves on the
    parent's held-out l1. With `cache_dir`, experts fitted on identical member
    sets from identical initializations are reused.
    """
    cfg = config or ExpertConfig()
    missing = set(tree.assignment) - set(corpus)
    if missing:
        raise KeyError(f"{len(missing)} tree members missing from corpus")
    experts, aliases = {}, {}
    cache = Path(cache_dir) if cache_dir is not None else None
    if cache is not None:
        cache.mkdir(parents=True, exist_ok=True)
    for lv, nodes in enumerate(tree.levels):
        for node in nodes:
            key = (lv, node.index)
            parent = (lv - 1, node.parent) if lv > 0 else None
            if len(node.members) < MIN_MEMBERS and parent is not None:
                aliases[key] = parent
                continue
            init = experts[registry_resolve(aliases, parent)].net if parent is not None else None
            steps = cfg.steps if parent is None else cfg.child_steps
            members = sorted(node.members)
            val = [m for m in members if is_val_id(m, cfg.seed, cfg.val_frac)]
            if not val:
                val = [members[int(np.random.default_rng(cfg.seed).integers(len(members)))]]
            vset = set(val)
            train = [m for m in members if m not in vset]
            ckey = _cache_key(members, init, cfg, steps)
            cpath = cache / f"{ckey}.json" if cache is not None else None
            if cpath is not None and cpath.exists():
                with open(cpath) as fh:
                    d = json.load(fh)
                model = ExpertModel(key, ConvNet.from_dict(d["net"]), d["final_l1"],
                                    d["steps"], d["best_step"])
                log.info("expert %s: cache hit", key)
            else:
                model = fit_expert([corpus[m] for m in train], cfg, init=init,
                                   val_pairs=[corpus[m] for m in val], steps=steps, node=key)
                log.info("expert %s: %d members, val l1 %.5f (best step %d)",
                         key, len(members), model.final_l1, model.best_step)
                if cpath is not None:
                    with open(cpath, "w") as fh:
                        json.dump({"net": model.net.to_dict(), "final_l1": model.final_l1,
                                   "steps": model.steps, "best_step": model.best_step}, fh)
            if parent is not None and model.best_step == 0:
                # fine-tuning never beat the parent on held-out data: same function
                aliases[key] = parent
            else:
                experts[key] = model
    return ExpertRegistry(tree.checksum(), experts, aliases)


def registry_resolve(aliases: dict, node) -> tuple:
    node = tuple(node)
    while node in aliases:
        node = aliases[node]
    return node
