#!/usr/bin/env python3
"""Scalar reference implementations used to freeze expected values in
crates/core/tests/oracle.rs. Deliberately written loop-by-loop without
numpy so it shares no code path with the Rust implementation.

Run: python3 tools/oracle.py
"""

import json
import math


def affine(values, bits):
    if bits >= 32:
        return list(values)
    lo, hi = min(values), max(values)
    levels = 2**bits - 1
    scale = (hi - lo) / levels
    out = []
    for x in values:
        q = round((x - lo) / scale)  # Python rounds half to even
        q = max(0, min(levels, q))
        out.append(hi if q >= levels else lo + q * scale)
    return out


def log_pow2(values, bits):
    if bits >= 32:
        return list(values)
    max_abs = max(abs(x) for x in values)
    if max_abs == 0:
        return [0.0 for _ in values]
    e_max = round(math.log2(max_abs))
    e_min = e_max - (2 ** (bits - 1) - 2)
    out = []
    for x in values:
        if x == 0:
            out.append(0.0)
            continue
        e = max(e_min, min(e_max, round(math.log2(abs(x)))))
        out.append(math.copysign(2.0**e, x))
    return out


def quantize(values, bits, kind):
    if not values:
        return []
    return affine(values, bits) if kind == "linear" else log_pow2(values, bits)


def quantize_where(m, bits, kind, selected):
    pos = [(r, c) for r in range(len(m)) for c in range(len(m[0])) if selected(r, c)]
    q = quantize([m[r][c] for r, c in pos], bits, kind)
    out = [row[:] for row in m]
    for (r, c), x in zip(pos, q):
        out[r][c] = x
    return out


def softmax(row):
    mx = max(row)
    e = [math.exp(x - mx) for x in row]
    s = sum(e)
    return [x / s for x in e]


def weights(q, k):
    d = len(k[0])
    return [softmax([sum(qi[j] * kt[j] for j in range(d)) / math.sqrt(d) for kt in k]) for qi in q]


def matmul(a, b):
    return [[sum(a[i][t] * b[t][j] for t in range(len(b))) for j in range(len(b[0]))] for i in range(len(a))]


def mse(a, b):
    n = len(a) * len(a[0])
    return sum((a[i][j] - b[i][j]) ** 2 for i in range(len(a)) for j in range(len(a[0]))) / n


def cosine(a, b):
    na = math.sqrt(sum(x * x for x in a))
    nb = math.sqrt(sum(x * x for x in b))
    if na == 0 or nb == 0:
        return 0.0
    return sum(x * y for x, y in zip(a, b)) / (na * nb)


def pool(m):
    return [sum(m[i][j] for i in range(len(m))) / len(m) for j in range(len(m[0]))]


def taq(q, k, v, triggers, bits, kind, separate):
    prot = set(triggers) if separate else set()
    kt = quantize_where(k, bits, kind, lambda r, c: r not in prot)
    vt = quantize_where(v, bits, kind, lambda r, c: r not in prot)
    qt = quantize_where(q, bits, kind, lambda r, c: True)
    a = weights(qt, kt)
    ah = quantize_where(a, bits, kind, lambda r, c: c not in prot)
    y = matmul(ah, vt)
    dev = max(abs(sum(row) - 1.0) for row in ah)
    return y, dev


def probe(q, k, v, i, bits, kind):
    ref = matmul(weights(q, k), v)
    kq = quantize_where(k, bits, kind, lambda r, c: r == i)
    vq = quantize_where(v, bits, kind, lambda r, c: r == i)
    y = matmul(weights(q, kq), vq)
    return mse(y, ref), 1.0 - cosine(pool(y), pool(ref))


def fnv1a64(s):
    h = 0xCBF29CE484222325
    for b in s.encode():
        h ^= b
        h = (h * 0x100000001B3) % 2**64
    return h


def embed(text, dim):
    acc = [0.0] * dim
    word, words = "", []
    for ch in text.lower() + " ":
        if ch.isalnum():
            word += ch
        elif word:
            words.append(word)
            word = ""
    for w in words:
        h = fnv1a64(w)
        acc[h % dim] += -1.0 if h >> 63 else 1.0
    n = math.sqrt(sum(x * x for x in acc))
    return [x / n for x in acc] if n else acc


def bm25(query, cards, k1=1.2, b=0.75):
    n = len(cards)
    avg = sum(len(c) for c in cards) / n
    df = {}
    for c in cards:
        for t in set(c):
            df[t] = df.get(t, 0) + 1
    out = []
    for c in cards:
        s = 0.0
        for t in set(query):
            tf = c.count(t)
            if tf == 0:
                continue
            idf = math.log((n - df[t] + 0.5) / (df[t] + 0.5) + 1)
            s += idf * tf * (k1 + 1) / (tf + k1 * (1 - b + b * len(c) / avg))
        out.append(s)
    return out


def main():
    res = {}

    q = [[0.7, -0.4, 0.5]]
    k = [[0.9, 0.2, -0.3], [-0.5, 1.1, 0.4]]
    v = [[1.3, -0.6, 0.1], [0.2, 0.8, -0.7]]
    res["probe_bits2"] = [probe(q, k, v, i, 2, "linear") for i in range(2)]
    res["probe_bits2_log"] = [probe(q, k, v, i, 2, "log") for i in range(2)]

    q = [[0.5, -1.2, 0.3], [1.1, 0.4, -0.6]]
    k = [[0.2, 0.7, -0.1], [1.9, -1.4, 2.2], [-0.3, 0.05, 0.6]]
    v = [[0.4, -0.2, 0.9], [3.0, 2.5, -2.8], [-0.7, 0.3, 0.1]]
    res["taq_reference"] = matmul(weights(q, k), v)
    for kind in ("linear", "log"):
        for sep in (True, False):
            y, dev = taq(q, k, v, [1], 4, kind, sep)
            res[f"taq_{kind}_4_{'sep' if sep else 'joint'}"] = {"y": y, "row_sum_deviation": dev}

    res["embed8_brown_bear"] = embed("realistic brown bear", 8)
    res["dense8_partial"] = cosine(embed("realistic brown bear", 8), embed("brown bear in snow", 8))
    res["fnv"] = {w: fnv1a64(w) for w in ["bear", "realistic", ""]}
    cards = [["bear", "realistic"], ["bear", "stuffed-toy", "cute"], ["cat", "anime"]]
    res["bm25"] = bm25(["bear", "cute", "dog", "bear"], cards)
    res["bm25_single_doc"] = bm25(["bear"], [["bear", "realistic"]])[0]
    print(json.dumps(res, indent=1))


if __name__ == "__main__":
    main()
