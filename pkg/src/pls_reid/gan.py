"""Feature-space camera translation trained with a cycle-consistent adversarial objective.

For every unordered camera pair ``(a, b)`` with ``a < b`` there is one quadruple:
generator ``G: a -> b``, generator ``F: b -> a`` and least-squares discriminators
``D_G`` (judges camera-``b`` features) and ``D_F`` (judges camera-``a`` features).
Generators are trained on

    adv_weight * (LSGAN(D_G, G) + LSGAN(D_F, F)) + lambda * (|F(G(x_a)) - x_a|_1 + |G(F(x_b)) - x_b|_1)

with the L1 terms averaged over batch and feature dimension. Only inputs and
camera ids are read; identity labels never reach the optimizer.
"""

from __future__ import annotations

import io
import json
from dataclasses import dataclass, field
from itertools import combinations
from pathlib import Path

import numpy as np

from pls_reid.datagen import REAL, Dataset, OneShotSplit
from pls_reid.errors import InvalidParameterError, MalformedFileError, MissingTranslatorError

TRANSLATOR_VERSION = 1
LEAK = 0.2


class _Net:
    """Dense net with leaky-ReLU hidden layers; ``residual`` adds the input to the output."""

    def __init__(self, weights, biases, residual=False):
        self.weights = weights
        self.biases = biases
        self.residual = residual

    @classmethod
    def build(cls, sizes, rng, residual=False, last_scale=1.0):
        ws, bs = [], []
        for k, (i, o) in enumerate(zip(sizes[:-1], sizes[1:])):
            scale = last_scale if k == len(sizes) - 2 else 1.0
            ws.append(rng.normal(0.0, scale / np.sqrt(i), size=(i, o)))
            bs.append(np.zeros(o))
        return cls(ws, bs, residual)

    def params(self):
        return self.weights + self.biases

    def forward(self, x):
        acts = [x]
        pre = []
        h = x
        last = len(self.weights) - 1
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            z = h @ w + b
            pre.append(z)
            h = z if k == last else np.where(z > 0, z, LEAK * z)
            acts.append(h)
        out = h + x if self.residual else h
        return out, (acts, pre)

    def backward(self, cache, g_out):
        acts, pre = cache
        gw = [None] * len(self.weights)
        gb = [None] * len(self.biases)
        g = g_out
        last = len(self.weights) - 1
        for k in range(last, -1, -1):
            if k != last:
                g = g * np.where(pre[k] > 0, 1.0, LEAK)
            gw[k] = acts[k].T @ g
            gb[k] = g.sum(axis=0)
            g = g @ self.weights[k].T
        if self.residual:
            g = g + g_out
        return gw + gb, g

    def __call__(self, x):
        return self.forward(x)[0]


class _Adam:
    def __init__(self, params, lr, beta1=0.5, beta2=0.999, eps=1e-8):
        self.params = params
        self.lr = lr
        self.b1, self.b2, self.eps = beta1, beta2, eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, grads):
        self.t += 1
        c1 = 1 - self.b1**self.t
        c2 = 1 - self.b2**self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


@dataclass
class PairTranslator:
    cameras: tuple[int, int]
    G: _Net
    F: _Net
    D_G: _Net
    D_F: _Net


@dataclass
class CameraTranslator:
    A: int
    pairs: dict[tuple[int, int], PairTranslator]
    mean: np.ndarray
    scale: np.ndarray
    cycle_weight: float = 10.0
    generator: str = "affine"
    history: list[dict] = field(default_factory=list)

    def translate(self, x, source: int, target: int) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        if source == target:
            return x.copy()
        key = (min(source, target), max(source, target))
        pair = self.pairs.get(key)
        if pair is None:
            raise MissingTranslatorError(f"no translator for cameras {key}")
        net = pair.G if source == key[0] else pair.F
        return net((x - self.mean) / self.scale) * self.scale + self.mean

    def cycle(self, x, source: int, target: int) -> np.ndarray:
        return self.translate(self.translate(x, source, target), target, source)


def _build_generator(kind, D, rng, init, init_scale, hidden):
    if kind == "affine":
        if init == "identity":
            W = np.eye(D)
        else:
            W = np.eye(D) + init_scale * rng.normal(0.0, 1.0 / np.sqrt(D), size=(D, D))
        return _Net([W], [np.zeros(D)])
    if kind == "mlp":
        net = _Net.build([D, hidden, D], rng, residual=True, last_scale=init_scale)
        if init == "identity":
            net.weights[-1][:] = 0.0
        return net
    raise InvalidParameterError(f"unknown generator kind {kind!r}")


def train_translators(
    dataset: Dataset,
    epochs: int = 200,
    cycle_weight: float = 10.0,
    seed: int = 0,
    *,
    generator: str = "affine",
    init: str = "perturbed",
    init_scale: float = 0.3,
    adversarial_weight: float = 1.0,
    batch_size: int = 32,
    lr_generator: float = 2e-3,
    lr_discriminator: float = 2e-3,
    hidden: int = 32,
    indices=None,
) -> CameraTranslator:
    """Train one translator quadruple per unordered camera pair.

    ``indices`` restricts training to a subset of real samples (e.g. to hold
    some out). Deterministic for a fixed seed.
    """
    if cycle_weight <= 0:
        raise InvalidParameterError("cycle weight must be > 0")
    if epochs < 0:
        raise InvalidParameterError("epochs must be >= 0")
    idx = np.flatnonzero(~dataset.is_generated) if indices is None else np.asarray(indices, dtype=np.int64)
    x_all = dataset.inputs[idx]
    cams = dataset.cameras[idx]
    A = dataset.A
    if A < 2:
        raise InvalidParameterError("need at least two cameras")
    per_cam = [x_all[cams == a] for a in range(A)]
    for a, xa in enumerate(per_cam):
        if xa.shape[0] < 2:
            raise InvalidParameterError(f"camera {a} has fewer than 2 samples")

    mean = x_all.mean(axis=0)
    scale = x_all.std(axis=0)
    scale[scale == 0] = 1.0
    per_cam = [(xa - mean) / scale for xa in per_cam]
    D = dataset.D
    rng = np.random.default_rng(seed)

    pairs = {}
    history = []
    for a, b in combinations(range(A), 2):
        G = _build_generator(generator, D, rng, init, init_scale, hidden)
        F = _build_generator(generator, D, rng, init, init_scale, hidden)
        D_G = _Net.build([D, hidden, 1], rng)
        D_F = _Net.build([D, hidden, 1], rng)
        opt_gen = _Adam(G.params() + F.params(), lr_generator)
        opt_dis = _Adam(D_G.params() + D_F.params(), lr_discriminator)
        xa_all, xb_all = per_cam[a], per_cam[b]
        steps = -(-max(len(xa_all), len(xb_all)) // batch_size)
        for epoch in range(epochs):
            for _ in range(steps):
                xa = xa_all[rng.integers(0, len(xa_all), batch_size)]
                xb = xb_all[rng.integers(0, len(xb_all), batch_size)]
                stats = _step(G, F, D_G, D_F, xa, xb, opt_gen, opt_dis, cycle_weight, adversarial_weight)
            if epoch == epochs - 1:
                history.append({"pair": [a, b], **stats})
        pairs[(a, b)] = PairTranslator((a, b), G, F, D_G, D_F)
    return CameraTranslator(A, pairs, mean, scale, cycle_weight, generator, history)


def _lsgan_d(net, real, fake):
    """Discriminator loss ``0.5 (mean (D(real)-1)^2 + mean D(fake)^2)`` and its grads."""
    n = real.shape[0]
    d_real, c_real = net.forward(real)
    d_fake, c_fake = net.forward(fake)
    loss = 0.5 * (np.mean((d_real - 1) ** 2) + np.mean(d_fake**2))
    g_real, _ = net.backward(c_real, (d_real - 1) / n)
    g_fake, _ = net.backward(c_fake, d_fake / n)
    return loss, [p + q for p, q in zip(g_real, g_fake)]


def _step(G, F, D_G, D_F, xa, xb, opt_gen, opt_dis, lam, adv_w):
    n, D = xa.shape
    fake_b, cg_a = G.forward(xa)
    fake_a, cf_b = F.forward(xb)

    # discriminators
    ld_g, grads_dg = _lsgan_d(D_G, xb, fake_b)
    ld_f, grads_df = _lsgan_d(D_F, xa, fake_a)
    opt_dis.step(grads_dg + grads_df)

    # generators: adversarial terms
    dg_out, dg_cache = D_G.forward(fake_b)
    df_out, df_cache = D_F.forward(fake_a)
    adv = np.mean((dg_out - 1) ** 2) + np.mean((df_out - 1) ** 2)
    _, g_fake_b = D_G.backward(dg_cache, adv_w * 2 * (dg_out - 1) / n)
    _, g_fake_a = D_F.backward(df_cache, adv_w * 2 * (df_out - 1) / n)

    # cycle terms
    rec_a, cf_fake_b = F.forward(fake_b)
    rec_b, cg_fake_a = G.forward(fake_a)
    cyc = np.mean(np.abs(rec_a - xa)) + np.mean(np.abs(rec_b - xb))
    g_rec_a = lam * np.sign(rec_a - xa) / (n * D)
    g_rec_b = lam * np.sign(rec_b - xb) / (n * D)

    gF1, g_fb_cyc = F.backward(cf_fake_b, g_rec_a)
    gG1, g_fa_cyc = G.backward(cg_fake_a, g_rec_b)
    gG0, _ = G.backward(cg_a, g_fake_b + g_fb_cyc)
    gF0, _ = F.backward(cf_b, g_fake_a + g_fa_cyc)
    grads_g = [p + q for p, q in zip(gG0, gG1)]
    grads_f = [p + q for p, q in zip(gF0, gF1)]
    opt_gen.step(grads_g + grads_f)
    return {
        "discriminator_loss": float(ld_g + ld_f),
        "adversarial_loss": float(adv),
        "cycle_loss": float(cyc),
    }


def cycle_residual(translator: CameraTranslator, dataset: Dataset, indices=None) -> float:
    """Mean ``|F(G(x)) - x|_2`` over both directions of every camera pair."""
    idx = np.flatnonzero(~dataset.is_generated) if indices is None else np.asarray(indices, dtype=np.int64)
    x, cams = dataset.inputs[idx], dataset.cameras[idx]
    res = []
    for a, b in translator.pairs:
        for src, dst in ((a, b), (b, a)):
            xs = x[cams == src]
            if len(xs):
                res.append(np.linalg.norm(translator.cycle(xs, src, dst) - xs, axis=1))
    return float(np.mean(np.concatenate(res)))


@dataclass
class EnhancedDataset:
    """Original samples (same indices) followed by every real sample translated to each other camera."""

    dataset: Dataset
    source_index: np.ndarray
    original_N: int

    @property
    def A(self) -> int:
        return self.dataset.A

    def copies_of(self, index: int) -> np.ndarray:
        """Index of ``index`` plus its generated copies, in camera order of generation."""
        return np.flatnonzero(self.source_index == index)

    def labeled_groups(self, split: OneShotSplit) -> list[np.ndarray]:
        """Per identity: the labeled real samples and all their generated copies."""
        ids = self.dataset.identities
        groups = []
        for i in range(self.dataset.C):
            real = split.labeled[ids[split.labeled] == i]
            groups.append(np.concatenate([self.copies_of(int(r)) for r in real]))
        return groups

    def enhanced_split(self, split: OneShotSplit) -> OneShotSplit:
        labeled_hat = np.concatenate(self.labeled_groups(split))
        rest = np.setdiff1d(np.arange(self.dataset.N), labeled_hat)
        return OneShotSplit(labeled_hat, rest, split.shots)


def augment_dataset(dataset: Dataset, translators: CameraTranslator) -> EnhancedDataset:
    if np.any(dataset.is_generated):
        raise InvalidParameterError("augmentation sources must all be real samples")
    if translators.A != dataset.A:
        raise InvalidParameterError(f"translators cover {translators.A} cameras, dataset has {dataset.A}")
    A = dataset.A
    inputs = [dataset.inputs]
    ids = [dataset.identities]
    cams = [dataset.cameras]
    srcs = [np.full(dataset.N, REAL)]
    src_index = [np.arange(dataset.N)]
    # batch per (source camera, target camera), then restore source-major order
    gen_x = np.zeros((dataset.N, A, dataset.D))
    for a in range(A):
        sel = np.flatnonzero(dataset.cameras == a)
        if sel.size == 0:
            continue
        for t in range(A):
            if t != a:
                gen_x[sel, t] = translators.translate(dataset.inputs[sel], a, t)
    order_i, order_t = [], []
    for i in range(dataset.N):
        for t in range(A):
            if t != dataset.cameras[i]:
                order_i.append(i)
                order_t.append(t)
    order_i = np.array(order_i, dtype=np.int64)
    order_t = np.array(order_t, dtype=np.int64)
    inputs.append(gen_x[order_i, order_t])
    ids.append(dataset.identities[order_i])
    cams.append(order_t)
    srcs.append(dataset.cameras[order_i])
    src_index.append(order_i)
    enhanced = Dataset(
        np.concatenate(inputs), np.concatenate(ids), np.concatenate(cams), np.concatenate(srcs),
        A=A, C=dataset.C,
    )
    return EnhancedDataset(enhanced, np.concatenate(src_index), dataset.N)


def save_translators(tr: CameraTranslator, path) -> None:
    meta = {
        "format_version": TRANSLATOR_VERSION,
        "A": tr.A,
        "cycle_weight": tr.cycle_weight,
        "generator": tr.generator,
        "pairs": [],
    }
    arrays = {"mean": tr.mean, "scale": tr.scale}
    for (a, b), pair in sorted(tr.pairs.items()):
        entry = {"cameras": [a, b]}
        for name in ("G", "F", "D_G", "D_F"):
            net = getattr(pair, name)
            entry[name] = {"layers": len(net.weights), "residual": net.residual}
            for k, (w, bias) in enumerate(zip(net.weights, net.biases)):
                arrays[f"{a}_{b}.{name}.w{k}"] = w
                arrays[f"{a}_{b}.{name}.b{k}"] = bias
        meta["pairs"].append(entry)
    buf = io.BytesIO()
    np.savez(buf, meta=np.array(json.dumps(meta, sort_keys=True)), **arrays)
    Path(path).write_bytes(buf.getvalue())


def load_translators(path) -> CameraTranslator:
    try:
        with np.load(path, allow_pickle=False) as z:
            meta = json.loads(str(z["meta"]))
            arrays = {k: z[k].copy() for k in z.files if k != "meta"}
    except (OSError, ValueError, KeyError) as exc:
        raise MalformedFileError(f"unreadable translator checkpoint: {exc}") from None
    if meta.get("format_version") != TRANSLATOR_VERSION:
        raise MalformedFileError(f"unsupported translator version {meta.get('format_version')!r}")
    pairs = {}
    for entry in meta["pairs"]:
        a, b = entry["cameras"]
        nets = {}
        for name in ("G", "F", "D_G", "D_F"):
            L = entry[name]["layers"]
            nets[name] = _Net(
                [arrays[f"{a}_{b}.{name}.w{k}"] for k in range(L)],
                [arrays[f"{a}_{b}.{name}.b{k}"] for k in range(L)],
                entry[name]["residual"],
            )
        pairs[(a, b)] = PairTranslator((a, b), **nets)
    return CameraTranslator(
        meta["A"], pairs, arrays["mean"], arrays["scale"], meta["cycle_weight"], meta["generator"]
    )
