"""Independent reference implementations used by the tests.

Nothing here calls into the package's numerical kernels: rotations are built
from their textbook formula, the field is a brute-force loop over all
primitives, and the loss terms are direct loops.
"""

import numpy as np


def rot(q):
    w, x, y, z = np.asarray(q, dtype=np.float64) / np.linalg.norm(q)
    return np.array([
        [w * w + x * x - y * y - z * z, 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), w * w - x * x + y * y - z * z, 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), w * w - x * x - y * y + z * z],
    ])


def rodrigues(v):
    v = np.asarray(v, dtype=np.float64)
    th = np.linalg.norm(v)
    if th < 1e-15:
        return np.eye(3)
    k = v / th
    K = np.array([[0, -k[2], k[1]], [k[2], 0, -k[0]], [-k[1], k[0], 0]])
    return np.eye(3) + np.sin(th) * K + (1 - np.cos(th)) * K @ K


def active_mask(centers, log_scales, points):
    """(P, J) boolean: point within 3 * max scale of the centre."""
    r = 3.0 * np.exp(np.asarray(log_scales)).max(axis=1)
    d = np.linalg.norm(points[:, None, :] - centers[None, :, :], axis=2)
    return d <= r[None, :]


def field(centers, quats, log_scales, intens, points, mask=None):
    """Brute-force truncated sum; ``mask`` freezes the active set."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if mask is None:
        mask = active_mask(centers, log_scales, points)
    out = np.zeros(len(points))
    for j in range(len(centers)):
        R = rot(quats[j])
        inv = R @ np.diag(np.exp(-2.0 * np.asarray(log_scales[j]))) @ R.T
        d = points - centers[j]
        e = np.einsum("pa,ab,pb->p", d, inv, d)
        out += np.where(mask[:, j], intens[j] * np.exp(-0.5 * e), 0.0)
    return out


def ssim_direct(a, b, window=11, sigma=1.5, L=1.0):
    """Mean SSIM with an explicit zero-padded window loop (2D)."""
    r = (window - 1) // 2
    x = np.arange(window) - r
    g1 = np.exp(-x * x / (2 * sigma * sigma))
    g1 /= g1.sum()
    W = np.outer(g1, g1)
    C1, C2 = (0.01 * L) ** 2, (0.03 * L) ** 2
    pa = np.pad(a, r)
    pb = np.pad(b, r)
    vals = np.zeros(a.shape)
    for i in range(a.shape[0]):
        for j in range(a.shape[1]):
            wa = pa[i:i + window, j:j + window]
            wb = pb[i:i + window, j:j + window]
            ma, mb = np.sum(W * wa), np.sum(W * wb)
            va = np.sum(W * wa * wa) - ma * ma
            vb = np.sum(W * wb * wb) - mb * mb
            cv = np.sum(W * wa * wb) - ma * mb
            vals[i, j] = ((2 * ma * mb + C1) * (2 * cv + C2)) / ((ma * ma + mb * mb + C1) * (va + vb + C2))
    return float(vals.mean())


def tv_loops(v):
    v = np.asarray(v, dtype=np.float64)
    nx, ny, nz = v.shape
    total = 0.0
    for i in range(nx):
        for j in range(ny):
            for k in range(nz):
                if i + 1 < nx:
                    total += abs(v[i + 1, j, k] - v[i, j, k])
                if j + 1 < ny:
                    total += abs(v[i, j + 1, k] - v[i, j, k])
                if k + 1 < nz:
                    total += abs(v[i, j, k + 1] - v[i, j, k])
    return total / v.size


def rel_err(analytic, fd):
    analytic = np.asarray(analytic, dtype=np.float64).ravel()
    fd = np.asarray(fd, dtype=np.float64).ravel()
    return float(np.max(np.abs(analytic - fd)) / max(np.max(np.abs(fd)), 1e-12))


def central_diff(f, x, h=1e-6):
    """Central differences of scalar ``f`` w.r.t. every entry of array ``x`` (in place)."""
    g = np.zeros_like(x, dtype=np.float64)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f()
        flat[i] = old - h
        fm = f()
        flat[i] = old
        gf[i] = (fp - fm) / (2 * h)
    return g


def random_gaussians(rng, J, spread=4.0, smin=0.6, smax=2.0):
    centers = rng.uniform(-spread, spread, (J, 3))
    quats = rng.normal(size=(J, 4))
    quats /= np.linalg.norm(quats, axis=1, keepdims=True)
    log_s = np.log(rng.uniform(smin, smax, (J, 3)))
    intens = rng.uniform(0.2, 1.0, J)
    return centers, quats, log_s, intens


_JUNK = [None, True, -1, 0, 2**40, 1e308, float("nan"), "x", [], [1, 2], {}, {"a": 1}, [0.0, 0.0, 0.0]]


def _poke_json(rng, obj):
    """Replace one randomly chosen leaf or container entry of a JSON object."""
    import json
    node = obj
    while True:
        keys = list(node.keys()) if isinstance(node, dict) else list(range(len(node)))
        if not keys:
            return
        k = keys[int(rng.integers(len(keys)))]
        child = node[k]
        if isinstance(child, (dict, list)) and child and rng.random() < 0.6:
            node = child
            continue
        roll = rng.random()
        if roll < 0.1 and isinstance(node, dict):
            node[str(rng.integers(1000))] = 1
        elif roll < 0.2 and isinstance(node, dict):
            del node[k]
        else:
            node[k] = json.loads(json.dumps(_JUNK[int(rng.integers(len(_JUNK)))]))
        return


def mutate(rng, raw):
    """One random corruption of an encoded file: bytes, truncation, growth or header edits."""
    import json
    import struct
    buf = bytearray(raw)
    op = int(rng.integers(5))
    if op == 0:
        for _ in range(int(rng.integers(1, 4))):
            if buf:
                buf[int(rng.integers(len(buf)))] = int(rng.integers(256))
    elif op == 1:
        del buf[int(rng.integers(len(buf) + 1)):]
    elif op == 2:
        buf += rng.integers(0, 256, int(rng.integers(1, 9))).astype(np.uint8).tobytes()
    elif op == 3 and len(buf) >= 16:
        # header length or version field
        off = 4 if rng.random() < 0.3 else 8
        width = 4 if off == 4 else 8
        buf[off:off + width] = int(rng.integers(0, 2**31)).to_bytes(width, "little")
    else:
        magic, ver, hlen = struct.unpack_from("<4sIQ", raw)
        header = json.loads(raw[16:16 + hlen])
        _poke_json(rng, header)
        hb = json.dumps(header).encode()
        buf = bytearray(struct.pack("<4sIQ", magic, ver, len(hb)) + hb + raw[16 + hlen:])
    return bytes(buf)
