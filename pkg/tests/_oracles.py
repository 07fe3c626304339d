"""Independent reference implementations used by several test modules.

Deliberately written with numpy loops and eigendecompositions rather than the
torch/SVD code paths they check.
"""
import numpy as np


def mse_loop(a, b):
    a, b = np.asarray(a, float).ravel(), np.asarray(b, float).ravel()
    acc = 0.0
    for u, v in zip(a, b):
        acc += (u - v) ** 2
    return acc / len(a)


def div_loop(z, zb):
    z, zb = np.asarray(z, float), np.asarray(zb, float)
    tot = 0.0
    for i in range(z.shape[0]):
        tot += sum((u - v) ** 2 for u, v in zip(z[i].ravel(), zb[i].ravel()))
    return tot / z.shape[0]


def kl_closed_form(zb, z, floor=1e-6):
    zb = np.asarray(zb, float).reshape(len(zb), -1)
    z = np.asarray(z, float).reshape(len(z), -1)
    out = []
    for j in range(z.shape[1]):
        mb, m = zb[:, j].mean(), z[:, j].mean()
        vb = max(np.var(zb[:, j]), floor ** 2)
        v = max(np.var(z[:, j]), floor ** 2)
        out.append(0.5 * (np.log(v / vb) + (vb + (mb - m) ** 2) / v - 1.0))
    return float(np.mean(out))


def top_k_basis(delta, k):
    """Top-k right singular vectors from an eigendecomposition of the B x B Gram matrix."""
    g = delta @ delta.T
    vals, vecs = np.linalg.eigh(g)
    order = np.argsort(vals)[::-1][:k]
    sv = np.sqrt(np.clip(vals[order], 0, None))
    basis = (delta.T @ vecs[:, order] / sv).T
    return basis, sv


def geometric_loss_oracle(z, z_hat, x, x_hat, k, eps=1e-8):
    dz = (np.asarray(z, float) - np.asarray(z_hat, float)).reshape(len(z), -1)
    dx = (np.asarray(x, float) - np.asarray(x_hat, float)).reshape(len(x), -1)
    nz, nx = np.linalg.norm(dz, axis=1), np.linalg.norm(dx, axis=1)
    keep = (nz >= eps) & (nx >= eps)
    dz, dx = dz[keep] / nz[keep, None], dx[keep] / nx[keep, None]
    cs = []
    for d in (dz, dx):
        basis, _ = top_k_basis(d, k)
        c = d @ basis.T
        for j in range(k):
            col = c[:, j]
            if col[np.argmax(np.abs(col))] < 0:
                c[:, j] = -col
        cs.append(c / np.linalg.norm(c))
    cz, cx = cs
    D = np.array([a @ b / (np.linalg.norm(a) * np.linalg.norm(b)) for a, b in zip(cz, cx)])
    return float(np.mean((D - 1.0) ** 2))


def isometry_fixture(rng, B=16, S=6, Dm=32, image_shape=(3, 32, 32)):
    """Latent pairs and image pairs whose differences are related by a fixed linear isometry."""
    M, P = S * Dm, int(np.prod(image_shape))
    q, _ = np.linalg.qr(rng.standard_normal((P, M)))
    z = rng.standard_normal((B, S, Dm))
    z_hat = z + 0.3 * rng.standard_normal((B, S, Dm))
    x = rng.standard_normal((B, *image_shape))
    x_hat = x - ((z - z_hat).reshape(B, M) @ q.T).reshape(B, *image_shape)
    return z, z_hat, x, x_hat


def spectral_gaps_ok(delta, k, gap=1e-3):
    sv = np.linalg.svd(delta, compute_uv=False)
    sv = np.concatenate([sv, [0.0]])[: k + 1]
    return bool(np.all(np.abs(np.diff(sv)) >= gap))


# -- kNN metric oracles: plain double loops ------------------------------------

def dist(u, v):
    acc = 0.0
    for a, b in zip(u, v):
        acc += (a - b) * (a - b)
    return acc ** 0.5


def radii_loop(x, k):
    out = []
    for i in range(len(x)):
        ds = sorted(dist(x[i], x[j]) for j in range(len(x)) if j != i)
        out.append(ds[k - 1])
    return np.array(out)


def precision_recall_loop(real, gen, k):
    rr, rg = radii_loop(real, k), radii_loop(gen, k)
    prec = np.mean([any(dist(g, r) <= rr[i] for i, r in enumerate(real)) for g in gen])
    rec = np.mean([any(dist(r, g) <= rg[j] for j, g in enumerate(gen)) for r in real])
    return float(prec), float(rec)


def density_coverage_loop(real, gen, k):
    rr = radii_loop(real, k)
    count = sum(1 for g in gen for i, r in enumerate(real) if dist(g, r) <= rr[i])
    cov = np.mean([any(dist(g, r) <= rr[i] for g in gen) for i, r in enumerate(real)])
    return count / (k * len(gen)), float(cov)


def fid_eig_oracle(a, b):
    """FID with the matrix square root of the (non-symmetric) product from its eigendecomposition."""
    mu1, mu2 = a.mean(0), b.mean(0)
    s1, s2 = np.atleast_2d(np.cov(a, rowvar=False)), np.atleast_2d(np.cov(b, rowvar=False))
    w = np.linalg.eigvals(s1 @ s2)
    tr_sqrt = np.sqrt(np.clip(w.real, 0, None)).sum()
    return float(((mu1 - mu2) ** 2).sum() + np.trace(s1) + np.trace(s2) - 2 * tr_sqrt)


def inception_loop(p):
    n, K = p.shape
    marg = [sum(p[i, c] for i in range(n)) / n for c in range(K)]
    kl = 0.0
    for i in range(n):
        for c in range(K):
            if p[i, c] > 0:
                kl += p[i, c] * (np.log(p[i, c]) - np.log(marg[c]))
    return float(np.exp(kl / n))
