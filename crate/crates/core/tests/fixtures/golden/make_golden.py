"""Reference compositor for the 3-element golden fixture.

Written against the canvas rules (equal-height left column, aspect-fit
placement, pixel-center coverage, bilinear sampling on premultiplied alpha,
round-half-up source-over), independently of the Rust renderer.

Run from this directory: python3 make_golden.py
"""

import math

import numpy as np
from PIL import Image

W, H, SPLIT = 1280, 720, 640
FILL = (255, 255, 255)


def element_0():
    h, w = 200, 120
    img = np.zeros((h, w, 4), np.uint8)
    yy, xx = np.mgrid[0:h, 0:w]
    cy, cx = 100.0, 60.0
    r = ((yy - cy) / 88.0) ** 2 + ((xx - cx) / 48.0) ** 2
    img[..., 0] = 200 + (yy % 50)
    img[..., 1] = (xx * 2) % 256
    img[..., 2] = 40
    img[..., 3] = np.where(r <= 0.8, 255, np.where(r <= 1.0, 128, 0))
    return img


def element_1():
    h, w = 90, 300
    img = np.zeros((h, w, 4), np.uint8)
    yy, xx = np.mgrid[0:h, 0:w]
    checker = ((xx // 15) + (yy // 15)) % 2
    img[..., 0] = 20
    img[..., 1] = np.where(checker == 1, 180, 60)
    img[..., 2] = 230
    img[..., 3] = 0
    img[5:85, 7:290, 3] = 255
    return img


def element_2():
    h, w = 64, 64
    img = np.zeros((h, w, 4), np.uint8)
    yy, xx = np.mgrid[0:h, 0:w]
    stripe = ((xx + yy) // 8) % 2
    img[..., 0] = np.where(stripe == 1, 250, 10)
    img[..., 1] = 120
    img[..., 2] = np.where(stripe == 1, 10, 250)
    img[..., 3] = 255
    img[0:3, :, 3] = 0
    return img


def background():
    h, w = 300, 400
    yy, xx = np.mgrid[0:h, 0:w]
    img = np.zeros((h, w, 3), np.uint8)
    img[..., 0] = (xx * 255 // (w - 1)).astype(np.uint8)
    img[..., 1] = (yy * 255 // (h - 1)).astype(np.uint8)
    img[..., 2] = ((xx + yy) % 97 + 100).astype(np.uint8)
    return img


def tight_bbox(rgba):
    ys, xs = np.nonzero(rgba[..., 3] > 0)
    return xs.min(), ys.min(), xs.max() - xs.min() + 1, ys.max() - ys.min() + 1


def fit(sw, sh, rx, ry, rw, rh):
    sw, sh = float(sw), float(sh)
    if rw / sw <= rh / sh:
        w, h = rw, sh * rw / sw
    else:
        w, h = sw * rh / sh, rh
    return rx + (rw - w) / 2.0, ry + (rh - h) / 2.0, w, h


def span(lo, length, limit):
    first = max(math.ceil(lo - 0.5), 0)
    last = max(math.ceil(lo + length - 0.5), 0)
    return min(first, limit), min(last, limit)


def axis(p, lo, length, n):
    scale = n / length
    u = min(max((p + 0.5 - lo) * scale - 0.5, 0.0), float(n - 1))
    i0 = math.floor(u)
    i1 = min(i0 + 1, n - 1)
    return i0, i1, u - i0


def blend(canvas, src, dest):
    """src is an RGBA float array already restricted to its region."""
    sh, sw = src.shape[:2]
    dx, dy, dw, dh = dest
    x0, x1 = span(dx, dw, W)
    y0, y1 = span(dy, dh, H)
    for y in range(y0, y1):
        ry0, ry1, fy = axis(y, dy, dh, sh)
        for x in range(x0, x1):
            rx0, rx1, fx = axis(x, dx, dw, sw)
            p00, p10 = src[ry0, rx0], src[ry0, rx1]
            p01, p11 = src[ry1, rx0], src[ry1, rx1]
            w00 = (1.0 - fx) * (1.0 - fy)
            w10 = fx * (1.0 - fy)
            w01 = (1.0 - fx) * fy
            w11 = fx * fy
            a = w00 * p00[3] + w10 * p10[3] + w01 * p01[3] + w11 * p11[3]
            if a <= 0.0:
                continue
            for c in range(3):
                pc = (w00 * (p00[c] * p00[3]) + w10 * (p10[c] * p10[3])
                      + w01 * (p01[c] * p01[3]) + w11 * (p11[c] * p11[3]))
                v = (pc + canvas[y, x, c] * (255.0 - a)) / 255.0
                canvas[y, x, c] = min(max(math.floor(v + 0.5), 0), 255)


def main():
    elements = [element_0(), element_1(), element_2()]
    bg = background()
    for i, e in enumerate(elements):
        Image.fromarray(e, "RGBA").save(f"element_{i}.png")
    Image.fromarray(bg, "RGB").save("background.png")

    canvas = np.empty((H, W, 3), np.int64)
    canvas[...] = FILL
    n = len(elements)
    cell_h = float(H // n)

    bg_rgba = np.concatenate([bg, np.full(bg.shape[:2] + (1,), 255, np.uint8)], axis=2).astype(np.float64)
    bg_dest = fit(bg.shape[1], bg.shape[0], float(SPLIT), 0.0, float(W - SPLIT), float(H))
    blend(canvas, bg_rgba, bg_dest)
    for i, e in enumerate(elements):
        bx, by, bw, bh = tight_bbox(e)
        region = e[by:by + bh, bx:bx + bw].astype(np.float64)
        dest = fit(bw, bh, 0.0, i * cell_h, float(SPLIT), cell_h)
        blend(canvas, region, dest)

    Image.fromarray(canvas.astype(np.uint8), "RGB").save("composite_golden.png")


if __name__ == "__main__":
    main()
