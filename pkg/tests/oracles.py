"""Independent scalar oracles, written with pure-python math only.

These deliberately avoid numpy and the library under test: every formula
is a hand-rolled loop over lists, so agreement with the library is a real
cross-check rather than a tautology.
"""

import math

Q_CLAMP = 1e-12


def softmax_rows(rows, tau):
    out = []
    for row in rows:
        shifted = [v / tau for v in row]
        m = max(shifted)
        exps = [math.exp(v - m) for v in shifted]
        z = sum(exps)
        out.append([e / z for e in exps])
    return out


def kl_rows(p_rows, q_rows):
    total = 0.0
    for p_row, q_row in zip(p_rows, q_rows):
        acc = 0.0
        for p, q in zip(p_row, q_row):
            if p > 0.0:
                acc += p * math.log(p / max(q, Q_CLAMP))
        total += acc
    return total / len(p_rows)


def hkd(f_t, f_s, tau):
    return tau * tau * kl_rows(softmax_rows(f_t, tau), softmax_rows(f_s, tau))


def cross_entropy(rows, labels):
    total = 0.0
    for row, label in zip(rows, labels):
        m = max(row)
        z = sum(math.exp(v - m) for v in row)
        total += -(row[label] - m - math.log(z))
    return total / len(rows)


def self_analyze(f_nk, f_b, tau, labels):
    return hkd(f_nk, f_b, tau) + cross_entropy(f_b, labels)


def ensemble(a_rows, n_rows, d_rows):
    return [
        [(a + n + d) / 3.0 for a, n, d in zip(ar, nr, dr)]
        for ar, nr, dr in zip(a_rows, n_rows, d_rows)
    ]


def gwd(teacher, student, taus, base_kd=0.0):
    return sum(hkd(teacher[k], student[k], taus[k]) for k in ("ak", "nk", "dk")) + base_kd


def se(teacher, branches, student, taus, base_kd=0.0):
    en = hkd(ensemble(branches["akb"], teacher["nk"], branches["dkb"]), student["nk"], taus["nk"])
    return (
        hkd(teacher["ak"], student["ak"], taus["ak"])
        + hkd(teacher["dk"], student["dk"], taus["dk"])
        + en
        + base_kd
    )


def pearson(xs, ys):
    n = len(xs)
    mx = sum(xs) / n
    my = sum(ys) / n
    cov = sum((x - mx) * (y - my) for x, y in zip(xs, ys))
    vx = sum((x - mx) ** 2 for x in xs)
    vy = sum((y - my) ** 2 for y in ys)
    return cov / math.sqrt(vx * vy)


def cosine(xs, ys):
    dot = sum(x * y for x, y in zip(xs, ys))
    nx = math.sqrt(sum(x * x for x in xs))
    ny = math.sqrt(sum(y * y for y in ys))
    return dot / (nx * ny)


def euclidean(xs, ys):
    return math.sqrt(sum((x - y) ** 2 for x, y in zip(xs, ys)))


def global_ssim(xs, ys):
    n = len(xs)
    mx = sum(xs) / n
    my = sum(ys) / n
    vx = sum((x - mx) ** 2 for x in xs) / n
    vy = sum((y - my) ** 2 for y in ys) / n
    cov = sum((x - mx) * (y - my) for x, y in zip(xs, ys)) / n
    dyn = max(xs) - min(xs)
    if dyn <= 0:
        dyn = 1.0
    c1 = (0.01 * dyn) ** 2
    c2 = (0.03 * dyn) ** 2
    return ((2 * mx * my + c1) * (2 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2))


def hsic_cka(x_rows, y_rows):
    """Direct HSIC-definition CKA with linear kernels, all loops."""
    n = len(x_rows)

    def column_center(rows):
        cols = len(rows[0])
        means = [sum(row[j] for row in rows) / n for j in range(cols)]
        return [[row[j] - means[j] for j in range(cols)] for row in rows]

    def gram(rows):
        return [[sum(a * b for a, b in zip(r1, r2)) for r2 in rows] for r1 in rows]

    def double_center(k):
        row_means = [sum(row) / n for row in k]
        col_means = [sum(k[i][j] for i in range(n)) / n for j in range(n)]
        grand = sum(row_means) / n
        return [
            [k[i][j] - row_means[i] - col_means[j] + grand for j in range(n)]
            for i in range(n)
        ]

    def hsic(ka, kb):
        return sum(ka[i][j] * kb[i][j] for i in range(n) for j in range(n))

    kx = double_center(gram(column_center(x_rows)))
    ky = double_center(gram(column_center(y_rows)))
    return hsic(kx, ky) / math.sqrt(hsic(kx, kx) * hsic(ky, ky))
