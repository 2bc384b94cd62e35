"""Independent hand counts of parameters and FLOPs for the mini UNet."""


def hand_params(depth, base, classes, in_ch, downs, fusion="sum"):
    """Independent layer-by-layer count of learnable scalars."""

    def conv3(ci, co):
        return 9 * ci * co + co

    def bn(c):
        return 2 * c

    def double(ci, co):
        return conv3(ci, co) + bn(co) + conv3(co, co) + bn(co)

    total = double(in_ch, base)
    for s, kind in enumerate(downs):
        c, nxt = base << s, base << (s + 1)
        block_in = c
        if kind == "hpd":
            total += (2 * c if fusion == "concat" else c) * nxt + nxt + bn(nxt)
            block_in = nxt
        elif kind == "stridedconv":
            total += 4 * c * c + c
        total += double(block_in, nxt)
    for s in range(depth):
        c, nxt = base << s, base << (s + 1)
        total += conv3(nxt, c) + bn(c) + double(2 * c, c)
    return total + base * classes + classes


def hand_flops(depth, base, classes, in_ch, downs, h, w):
    """Independent FLOP count: MAC=2, bias=1, BN=2, ReLU=1, comparison=1, fusion add=1."""

    def cbr(ci, co, hh, ww):
        return (2 * 9 * ci * co + co) * hh * ww + 3 * co * hh * ww

    total = cbr(in_ch, base, h, w) + cbr(base, base, h, w)
    for s, kind in enumerate(downs):
        c, nxt = base << s, base << (s + 1)
        hh, ww = h // 2 ** (s + 1), w // 2 ** (s + 1)
        cells = c * hh * ww
        if kind == "maxpool":
            total += 3 * cells
            block_in = c
        elif kind == "hpd":
            total += 3 * cells + 3 * cells + cells
            total += (2 * c * nxt + nxt) * hh * ww + 3 * nxt * hh * ww
            block_in = nxt
        total += cbr(block_in, nxt, hh, ww) + cbr(nxt, nxt, hh, ww)
    for s in range(depth):
        c, nxt = base << s, base << (s + 1)
        hh, ww = h // 2**s, w // 2**s
        total += cbr(nxt, c, hh, ww) + cbr(2 * c, c, hh, ww) + cbr(c, c, hh, ww)
    return total + (2 * base * classes + classes) * h * w
