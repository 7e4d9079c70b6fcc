"""Independent S-measure / E-measure reference used to freeze test fixtures.

Written against the original MATLAB toolkits (1-based centroid, N-1+eps
variances, round half away from zero). Regenerate with:

    python3 sod_reference.py > sod_reference.txt
"""
import numpy as np

EPS = np.finfo(np.float64).eps


def matlab_round(v):
    return np.floor(v + 0.5)


def object_term(pred, gt):
    def score(vals):
        if vals.size == 0:
            return 0.0
        x = vals.mean()
        sd = vals.std(ddof=1) if vals.size > 1 else 0.0
        return 2.0 * x / (x * x + 1.0 + sd + EPS)

    fg = gt > 0.5
    u = gt.mean()
    return u * score(pred[fg]) + (1 - u) * score(1.0 - pred[~fg])


def ssim(pred, gt):
    n = pred.size
    x, y = pred.mean(), gt.mean()
    sx = ((pred - x) ** 2).sum() / (n - 1 + EPS)
    sy = ((gt - y) ** 2).sum() / (n - 1 + EPS)
    sxy = ((pred - x) * (gt - y)).sum() / (n - 1 + EPS)
    a = 4 * x * y * sxy
    b = (x * x + y * y) * (sx + sy)
    if a != 0:
        return a / (b + EPS)
    return 1.0 if b == 0 else 0.0


def region_term(pred, gt):
    h, w = gt.shape
    rows, cols = np.nonzero(gt > 0.5)
    # 1-based centroid; the centroid pixel belongs to the top-left part
    X = int(matlab_round((cols + 1).mean()))
    Y = int(matlab_round((rows + 1).mean()))
    area = h * w
    parts = [
        (slice(0, Y), slice(0, X), X * Y / area),
        (slice(0, Y), slice(X, w), (w - X) * Y / area),
        (slice(Y, h), slice(0, X), X * (h - Y) / area),
        (slice(Y, h), slice(X, w), None),
    ]
    total, used = 0.0, 0.0
    for rs, cs, wt in parts:
        if wt is None:
            wt = 1.0 - used
        used += wt
        p, g = pred[rs, cs], gt[rs, cs]
        if p.size:
            total += wt * ssim(p, g)
    return total


def s_measure(pred, gt, alpha=0.5):
    y = gt.mean()
    if y == 0:
        return 1.0 - pred.mean()
    if y == 1:
        return pred.mean()
    return max(0.0, alpha * object_term(pred, gt) + (1 - alpha) * region_term(pred, gt))


def e_measure(pred, gt):
    fg = (gt > 0.5).sum()
    if fg == 0:
        return (1.0 - pred).mean()
    if fg == gt.size:
        return pred.mean()
    ap = pred - pred.mean()
    ag = gt - gt.mean()
    xi = 2 * ag * ap / (ag * ag + ap * ap + EPS)
    return (((xi + 1) ** 2) / 4).mean()


def main():
    rng = np.random.default_rng(20240917)
    n = 16
    yy, xx = np.mgrid[0:n, 0:n]
    for case in range(24):
        cy, cx = rng.uniform(3, 12, size=2)
        ry, rx = rng.uniform(2, 6, size=2)
        gt = ((((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2) <= 1).astype(np.float64)
        if case % 6 == 5:
            gt = (rng.uniform(size=(n, n)) < 0.3).astype(np.float64)
        if case % 4 == 3:
            pred = (rng.uniform(size=(n, n)) < 0.5).astype(np.float64)
        else:
            pred = np.clip(0.6 * gt + rng.uniform(0, 0.5, size=(n, n)) - 0.1, 0, 1)
        print("case", case)
        print("g", "".join(str(int(v)) for v in gt.ravel()))
        print("p", " ".join(repr(float(v)) for v in pred.ravel()))
        print("sm", repr(float(s_measure(pred, gt))))
        print("em", repr(float(e_measure(pred, gt))))


if __name__ == "__main__":
    main()
