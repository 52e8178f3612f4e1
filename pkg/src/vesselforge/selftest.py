"""Oracle suites: fast paths checked against slow independent references.

Each suite returns its worst observed error; ``run_all`` prints one line per
suite and is what ``vesselforge selftest`` executes.
"""

from __future__ import annotations

import time

import numpy as np

from . import kernels, net, preprocess
from . import tensor as T
from .metrics import roc_auc
from .oracles import finite_difference, pairwise_auc, relative_error, zero_inflate
from .train import loss_ce

FD_EPS = 1e-3


def gradcheck(build, leaves, seed: int = 0, eps: float = FD_EPS, probes: int | None = None) -> float:
    """Analytic vs central-difference gradient of ``sum(build() * R)`` for random R.

    With ``probes`` set, only that many randomly chosen entries of each leaf
    are differenced.
    """
    rng = np.random.default_rng(seed)
    out = build()
    proj = rng.standard_normal(out.shape)
    for leaf in leaves:
        leaf.zero_grad()
    T.backward(T.sum(T.mul(out, proj)))
    analytic, numeric = [], []
    for leaf in leaves:
        size = leaf.data.size
        idx = np.arange(size) if probes is None or probes >= size else np.sort(rng.choice(size, probes, replace=False))
        num = finite_difference(lambda: (build().data * proj).sum(), leaf.data, eps, indices=idx)
        analytic.append(leaf.grad.reshape(-1)[idx])
        numeric.append(num.reshape(-1)[idx])
    return relative_error(np.concatenate(analytic), np.concatenate(numeric))


def _leaf(rng, shape, margin=0.0):
    x = rng.standard_normal(shape)
    if margin:
        # keep entries away from the kinks of relu / clip / max
        x = np.where(np.abs(x) < margin, np.sign(x) * margin + x, x)
    return T.Tensor(x, requires_grad=True, dtype=np.float64)


def op_gradient_suite(seed: int = 0) -> dict:
    """Worst relative gradient error for every differentiable op."""
    rng = np.random.default_rng(seed)
    errs = {}
    x = _leaf(rng, (2, 2, 9, 8))
    w = _leaf(rng, (3, 2, 3, 3))
    b = _leaf(rng, (3,))
    for stride, rate in [(1, 1), (2, 1), (1, 2), (2, 3)]:
        spec = T.ConvSpec(stride=stride, rate=rate, padding=T.same_padding((3, 3), rate))
        errs[f"conv2d s{stride} r{rate}"] = gradcheck(lambda: T.conv2d(x, w, b, spec), [x, w, b], seed)
    p = T.Tensor(np.random.default_rng(seed + 1).permutation(72).reshape(1, 2, 6, 6) / 7.0,
                 requires_grad=True, dtype=np.float64)  # distinct values: no max ties
    for kind in ("max", "avg"):
        errs[f"pool {kind}"] = gradcheck(lambda: T.pool2d(p, kind, (3, 3), 1, (1, 1, 1, 1)), [p], seed)
    s = _leaf(rng, (1, 2, 3, 4), margin=0.01)
    c = _leaf(rng, (1, 3, 3, 4))
    errs["upsample"] = gradcheck(lambda: T.upsample_bilinear(s, 2), [s], seed)
    errs["concat"] = gradcheck(lambda: T.concat([s, c, s]), [s, c], seed)
    errs["relu"] = gradcheck(lambda: T.relu(s), [s], seed)
    errs["sigmoid"] = gradcheck(lambda: T.sigmoid(s), [s], seed)
    errs["softmax"] = gradcheck(lambda: T.softmax_channel(c), [c], seed)
    errs["take"] = gradcheck(lambda: T.take(c, 1), [c], seed)
    errs["add"] = gradcheck(lambda: T.add(c, T.mul(c, c)), [c], seed)
    scale = rng.standard_normal(s.shape)
    errs["mul"] = gradcheck(lambda: T.mul(s, scale), [s], seed)
    u = T.Tensor(np.random.default_rng(seed + 2).uniform(0.2, 0.8, (2, 3)), requires_grad=True)
    errs["log clip"] = gradcheck(lambda: T.log(T.clip(u, 0.1, 0.9)), [u], seed)
    errs["sum"] = gradcheck(lambda: T.sum(u), [u], seed)
    errs["mean"] = gradcheck(lambda: T.mean(u), [u], seed)
    z = _leaf(rng, (2, 2, 4, 4))
    labels = np.random.default_rng(seed + 3).integers(0, 2, (2, 4, 4))
    fov = np.random.default_rng(seed + 4).integers(0, 2, (2, 4, 4))
    fov[0, 0, 0] = 1
    errs["loss_ce"] = gradcheck(lambda: loss_ce(T.softmax_channel(z), labels, fov), [z], seed)
    probs = T.Tensor(rng.uniform(0.05, 0.95, (2, 2, 4, 4)), requires_grad=True, dtype=np.float64)
    errs["loss_ce_probs"] = gradcheck(lambda: loss_ce(probs, labels, fov), [probs], seed)
    return errs


class KinkRecorder:
    """Records every relu sign pattern and max-pool winner during forwards.

    Central differences are only meaningful when neither perturbed forward
    crosses a kink, so probes that change any recorded pattern are discarded.
    """

    def __init__(self):
        self.patterns: list[np.ndarray] = []
        self._saved = None

    def __enter__(self):
        relu, pool2d = T.relu, T.pool2d

        def relu_hook(x):
            x = T.as_tensor(x)
            self.patterns.append(x.data > 0)
            return relu(x)

        def pool_hook(x, kind, window=(3, 3), stride=1, padding=(0, 0, 0, 0)):
            out = pool2d(x, kind, window, stride, padding)
            if kind == "max":
                xp = T._pad(T.as_tensor(x).data, tuple(padding), value=-np.inf)
                _, arg = kernels.maxpool_forward(xp, window[0], window[1], stride, out.shape[2], out.shape[3])
                self.patterns.append(arg)
            return out

        self._saved = (relu, pool2d)
        T.relu, T.pool2d = relu_hook, pool_hook
        return self

    def __exit__(self, *exc):
        T.relu, T.pool2d = self._saved

    def run(self, fn):
        self.patterns = []
        value = fn()
        return value, self.patterns


def _same_patterns(a, b) -> bool:
    return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))


def network_gradient_check(seed: int = 0, side: int = 32, probes: int = 3, eps: float = FD_EPS,
                           cfg: net.ModelConfig | None = None) -> tuple[float, int, int]:
    """End-to-end gradient check of a network in float64 on one small image.

    Returns ``(relative error, probes used, probes rejected at kinks)``; every
    parameter tensor and the input contribute up to ``probes`` entries.
    """
    rng = np.random.default_rng(seed)
    params = net.build(cfg or net.ModelConfig(), seed=seed, dtype=np.float64)
    image = T.Tensor(rng.standard_normal((1, 3, side, side)), requires_grad=True, dtype=np.float64)
    labels = rng.integers(0, 2, (1, side, side))

    def loss():
        return loss_ce(net.forward(params, image), labels)

    leaves = [image] + list(params.tensors.values())
    for leaf in leaves:
        leaf.zero_grad()
    analytic, numeric = [], []
    rejected = 0
    with KinkRecorder() as rec:
        base, base_patterns = rec.run(loss)
        T.backward(base)
        for leaf in leaves:
            flat = leaf.data.reshape(-1)
            accepted = 0
            for k in rng.permutation(flat.size)[: 4 * probes]:
                orig = flat[k]
                flat[k] = orig + eps
                up, up_patterns = rec.run(loss)
                flat[k] = orig - eps
                down, down_patterns = rec.run(loss)
                flat[k] = orig
                if not (_same_patterns(base_patterns, up_patterns) and _same_patterns(base_patterns, down_patterns)):
                    rejected += 1
                    continue
                analytic.append(leaf.grad.reshape(-1)[k])
                numeric.append((up.item() - down.item()) / (2 * eps))
                accepted += 1
                if accepted == probes:
                    break
    return relative_error(np.array(analytic), np.array(numeric)), len(analytic), rejected


def atrous_suite(n_shapes: int = 100, rates=(1, 2, 4, 8), seed: int = 0) -> float:
    """conv2d at rate r vs rate-1 conv2d with a zero-inflated kernel, float32."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for k in range(n_shapes):
        rate = int(rates[k % len(rates)])
        kh, kw = (int(v) for v in rng.integers(1, 4, 2))
        eh, ew = (kh - 1) * rate + 1, (kw - 1) * rate + 1
        n, c, oc = (int(v) for v in rng.integers(1, 4, 3))
        h = int(rng.integers(max(1, eh - 4), eh + 12))
        w = int(rng.integers(max(1, ew - 4), ew + 12))
        pad = tuple(int(v) for v in rng.integers(0, 4, 4))
        if h + pad[0] + pad[1] < eh or w + pad[2] + pad[3] < ew:
            pad = (pad[0] + eh, pad[1], pad[2] + ew, pad[3])
        stride = int(rng.integers(1, 3))
        x = rng.standard_normal((n, c, h, w)).astype(np.float32)
        wt = rng.standard_normal((oc, c, kh, kw)).astype(np.float32)
        bias = rng.standard_normal(oc).astype(np.float32)
        dil = T.conv2d(x, wt, bias, T.ConvSpec((kh, kw), stride, rate, pad))
        big = zero_inflate(wt, rate).astype(np.float32)
        ref = T.conv2d(x, big, bias, T.ConvSpec(big.shape[2:], stride, 1, pad))
        worst = max(worst, relative_error(dil.data, ref.data))
    return worst


def ace_suite(n_images: int = 50, size: int = 32, seed: int = 0, degree: int = 9) -> float:
    """Max absolute pixel error of the polynomial fast ACE against the exact sum."""
    rng = np.random.default_rng(seed)
    fast = preprocess.AceParams(mode="poly_approx", poly_degree=degree)
    exact = preprocess.AceParams(mode="exact")
    worst = 0.0
    for _ in range(n_images):
        img = rng.random((size, size, 3))
        worst = max(worst, float(np.abs(preprocess.ace(img, fast) - preprocess.ace(img, exact)).max()))
    return worst


def ace_two_level_suite(n_images: int = 10, size: int = 32, seed: int = 0) -> float:
    """Interpolated ACE with one level per distinct intensity vs the exact sum."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_images):
        lo, hi = np.sort(rng.random(2))
        img = np.where(rng.random((size, size)) < 0.5, lo, hi)
        fast = preprocess.ace(img, preprocess.AceParams(mode="interp_approx", levels=2))
        exact = preprocess.ace(img, preprocess.AceParams(mode="exact"))
        worst = max(worst, float(np.abs(fast - exact).max()))
    return worst


def auc_suite(n_vectors: int = 1000, max_len: int = 10_000, seed: int = 0) -> float:
    """Rank-statistic AUC against the pairwise count on random vectors with ties."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for k in range(n_vectors):
        n = int(rng.integers(2, max_len + 1))
        labels = rng.random(n) < rng.uniform(0.05, 0.95)
        labels[0], labels[1] = True, False
        if k % 3 == 0:
            scores = rng.integers(0, 20, n).astype(np.float64)  # heavy ties
        else:
            scores = rng.random(n) + 0.3 * labels
        worst = max(worst, abs(roc_auc(scores, labels) - pairwise_auc(scores, labels)))
    return worst


def run_all(seed: int = 0, quick: bool = True) -> bool:
    """Run every suite (smaller sizes when ``quick``) and print a line per suite."""
    checks = [
        ("op gradients", lambda: max(op_gradient_suite(seed).values()), 1e-4),
        ("network gradient", lambda: network_gradient_check(seed, probes=1 if quick else 3)[0], 1e-3),
        ("atrous equivalence", lambda: atrous_suite(20 if quick else 100, seed=seed), 1e-5),
        ("ACE poly vs exact", lambda: ace_suite(5 if quick else 50, seed=seed), 0.03),
        ("ACE interp 2-level", lambda: ace_two_level_suite(3 if quick else 10, seed=seed), 1e-5),
        ("AUC vs pairwise", lambda: auc_suite(50 if quick else 1000, 2000 if quick else 10_000, seed), 1e-9),
    ]
    ok = True
    for name, fn, tol in checks:
        start = time.perf_counter()
        err = fn()
        passed = err < tol
        ok &= passed
        print(f"{'PASS' if passed else 'FAIL'}  {name:<20} max error {err:.3e} (< {tol:g})  {time.perf_counter() - start:.1f}s")
    return ok
