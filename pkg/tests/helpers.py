"""Independent oracles shared by the test modules."""
import numpy as np


def naive_matmul_dense(x, w, b):
    batch, n_in = x.shape
    n_out = w.shape[0]
    out = np.zeros((batch, n_out))
    for bi in range(batch):
        for o in range(n_out):
            acc = 0.0
            for i in range(n_in):
                acc += w[o, i] * x[bi, i]
            out[bi, o] = acc + b[o]
    return out


def naive_conv2d(x, k, stride):
    B, C, H, W = x.shape
    O, _, kh, kw = k.shape
    sh, sw = stride
    Ho, Wo = (H - kh) // sh + 1, (W - kw) // sw + 1
    out = np.zeros((B, O, Ho, Wo))
    for b in range(B):
        for o in range(O):
            for r in range(Ho):
                for c in range(Wo):
                    acc = 0.0
                    for ch in range(C):
                        for i in range(kh):
                            for j in range(kw):
                                acc += x[b, ch, r * sh + i, c * sw + j] * k[o, ch, i, j]
                    out[b, o, r, c] = acc
    return out


def central_diff(f, x, h=1e-6):
    """Numerical gradient of scalar ``f`` at array ``x`` (x is restored)."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        fp = f()
        x[i] = old - h
        fm = f()
        x[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


def max_rel_error(analytic, numeric, floor=1e-4):
    """Entrywise |a - n| / max(|a|, |n|, floor); the floor guards near-zero entries."""
    a = np.asarray(analytic)
    n = np.asarray(numeric)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom)) if a.size else 0.0


def manual_two_column_dense_grads(P, x, a):
    """Per-sample d log pi(a|s) / d h for a two-layer, two-column dense net.

    Written out by hand with explicit loops over samples; ``P`` maps parameter
    ids to arrays and ``x`` is ``[N, n_in]``. Returns a dict keyed by
    ``(layer, column)`` of ``[N, width]`` arrays.
    """
    relu = lambda v: np.maximum(v, 0.0)
    out = {key: [] for key in ((1, 1), (2, 1), (1, 2), (2, 2))}
    for s in range(len(x)):
        xs = x[s]
        z11 = P["c1/l1.W"] @ xs + P["c1/l1.b"]; h11 = relu(z11)
        z21 = P["c1/l2.W"] @ h11 + P["c1/l2.b"]; h21 = relu(z21)
        z12 = P["c2/l1.W"] @ xs + P["c2/l1.b"]; h12 = relu(z12)
        a2 = P["c2/l2.alpha.1"][0]
        u2 = P["c2/l2.V"] @ (a2 * h11) + P["c2/l2.c"]
        z22 = P["c2/l2.W"] @ h12 + P["c2/l2.b"] + P["c2/l2.U"] @ relu(u2)
        h22 = relu(z22)
        ap = P["c2/policy.alpha.1"][0]
        up = P["c2/policy.V"] @ (ap * h21) + P["c2/policy.c"]
        logits = P["c2/policy.W"] @ h22 + P["c2/policy.b"] + P["c2/policy.U"] @ relu(up)
        p = np.exp(logits - logits.max())
        p /= p.sum()
        d = -p
        d[a[s]] += 1.0
        g22 = P["c2/policy.W"].T @ d
        g21 = ap * (P["c2/policy.V"].T @ ((up > 0) * (P["c2/policy.U"].T @ d)))
        gz22 = (z22 > 0) * g22
        g12 = P["c2/l2.W"].T @ gz22
        g11 = a2 * (P["c2/l2.V"].T @ ((u2 > 0) * (P["c2/l2.U"].T @ gz22)))
        g11 = g11 + P["c1/l2.W"].T @ ((z21 > 0) * g21)
        for key, g, h in (((1, 1), g11, h11), ((2, 1), g21, h21), ((1, 2), g12, h12), ((2, 2), g22, h22)):
            out[key].append((g, h))
    return {k: (np.array([g for g, _ in v]), np.array([h for _, h in v])) for k, v in out.items()}
