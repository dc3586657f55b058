"""Pre-activation interval bounds feeding every ReLU big-M constant.

Two routes: rigorous interval propagation through the architecture (sound for
any weights inside the declared boxes), and empirical calibration from forward
passes of a fixed network over a dataset, widened by a user slack.  Either way
each interval is widened to include 0 so the ReLU encoding stays well posed.
"""

from dataclasses import dataclass

import numpy as np

from .nnspec import ConvArch, DenseArch, conv_map_shapes


class BoundsError(Exception):
    pass


@dataclass
class LayerBounds:
    layer: int                 # 0-based hidden/conv layer index
    unit_lo: np.ndarray        # per unit (dense) or per channel (conv)
    unit_hi: np.ndarray
    provenance: str            # "interval" or "sampled"

    @property
    def z_lo(self):
        return float(self.unit_lo.min())

    @property
    def z_hi(self):
        return float(self.unit_hi.max())

    @property
    def a_hi(self):
        return max(0.0, self.z_hi)


class BoundsTable:
    def __init__(self, layers):
        self.layers = list(layers)

    def __len__(self):
        return len(self.layers)

    def layer(self, l):
        return self.layers[l]

    def relu_bounds(self, l, unit=None):
        """(z_lo, z_hi) for hidden layer l, collapsed unless a unit is given."""
        lb = self.layers[l]
        if unit is None:
            return lb.z_lo, lb.z_hi
        return float(lb.unit_lo[unit]), float(lb.unit_hi[unit])

    def to_text(self):
        lines = ["# layer unit z_lo z_hi provenance"]
        for lb in self.layers:
            lines.append("%d * %r %r %s" % (lb.layer, lb.z_lo, lb.z_hi, lb.provenance))
            for j in range(len(lb.unit_lo)):
                lines.append("%d %d %r %r %s"
                             % (lb.layer, j, float(lb.unit_lo[j]),
                                float(lb.unit_hi[j]), lb.provenance))
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text):
        per_layer = {}
        prov = {}
        for line in text.splitlines():
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            layer_s, unit_s, lo_s, hi_s, p = line.split()
            l = int(layer_s)
            prov[l] = p
            if unit_s == "*":
                continue
            per_layer.setdefault(l, []).append((int(unit_s), float(lo_s), float(hi_s)))
        layers = []
        for l in sorted(per_layer):
            rows = sorted(per_layer[l])
            layers.append(LayerBounds(
                layer=l,
                unit_lo=np.array([r[1] for r in rows]),
                unit_hi=np.array([r[2] for r in rows]),
                provenance=prov[l]))
        return cls(layers)


def _widen(lo, hi, slack):
    lo = np.where(lo < 0, lo * (1.0 + slack), lo)
    hi = np.where(hi > 0, hi * (1.0 + slack), hi)
    return np.minimum(lo, 0.0), np.maximum(hi, 0.0)


def _interval_dot(w_lo, w_hi, a_lo, a_hi):
    """Endpoint products for sum_k w_k * a_k with elementwise intervals."""
    cands = (w_lo * a_lo, w_lo * a_hi, w_hi * a_lo, w_hi * a_hi)
    lo = np.minimum.reduce(cands).sum(axis=-1)
    hi = np.maximum.reduce(cands).sum(axis=-1)
    return lo, hi


def propagate_bounds(arch, input_lo, input_hi, weight_lo, weight_hi,
                     bias_lo=None, bias_hi=None, fixed_weights=None):
    """Interval forward pass yielding sound per-unit pre-activation bounds.

    ``weight_lo``/``weight_hi`` are scalars boxing every weight and bias; pass
    ``fixed_weights`` (a list of (W, b) arrays) to use degenerate boxes
    instead, e.g. for verification of a given network.
    """
    input_lo = np.asarray(input_lo, dtype=float)
    input_hi = np.asarray(input_hi, dtype=float)
    if np.any(~np.isfinite(input_lo)) or np.any(~np.isfinite(input_hi)):
        raise BoundsError("input box must be finite")
    if bias_lo is None:
        bias_lo, bias_hi = weight_lo, weight_hi

    if isinstance(arch, DenseArch):
        return _propagate_dense(arch, input_lo, input_hi, weight_lo, weight_hi,
                                bias_lo, bias_hi, fixed_weights)
    if isinstance(arch, ConvArch):
        return _propagate_conv(arch, input_lo, input_hi, weight_lo, weight_hi,
                               bias_lo, bias_hi, fixed_weights)
    raise TypeError("unknown architecture %r" % (arch,))


def _propagate_dense(arch, a_lo, a_hi, w_lo_s, w_hi_s, b_lo_s, b_hi_s, fixed):
    widths = arch.widths
    layers = []
    for l in range(arch.num_hidden + 1):
        n_out, n_in = widths[l + 1], widths[l]
        if fixed is not None:
            W, b = fixed[l]
            w_lo = w_hi = np.asarray(W, dtype=float)
            b_lo = b_hi = np.asarray(b, dtype=float)
        else:
            w_lo = np.full((n_out, n_in), w_lo_s)
            w_hi = np.full((n_out, n_in), w_hi_s)
            b_lo = np.full(n_out, b_lo_s)
            b_hi = np.full(n_out, b_hi_s)
        z_lo, z_hi = _interval_dot(w_lo, w_hi, a_lo[None, :], a_hi[None, :])
        z_lo, z_hi = z_lo + b_lo, z_hi + b_hi
        if l < arch.num_hidden:
            layers.append(LayerBounds(l, z_lo, z_hi, "interval"))
            a_lo, a_hi = np.maximum(z_lo, 0.0), np.maximum(z_hi, 0.0)
    table = BoundsTable(layers)
    for lb in table.layers:
        lb.unit_lo, lb.unit_hi = _widen(lb.unit_lo, lb.unit_hi, 0.0)
    return table


def _propagate_conv(arch, a_lo, a_hi, w_lo_s, w_hi_s, b_lo_s, b_hi_s, fixed):
    map_shapes = conv_map_shapes(arch)
    layers = []
    for l, layer in enumerate(arch.conv_layers):
        c_out, oh, ow = map_shapes[l]
        c_in = a_lo.shape[0]
        kh, kw = layer.kernel
        if fixed is not None:
            K, b = fixed[l]
            k_lo = k_hi = np.asarray(K, dtype=float)
            b_lo = b_hi = np.asarray(b, dtype=float)
        else:
            k_lo = np.full((c_out, c_in, kh, kw), w_lo_s)
            k_hi = np.full((c_out, c_in, kh, kw), w_hi_s)
            b_lo = np.full(c_out, b_lo_s)
            b_hi = np.full(c_out, b_hi_s)
        z_lo = np.empty((c_out, oh, ow))
        z_hi = np.empty((c_out, oh, ow))
        s = layer.stride
        for h in range(oh):
            for w in range(ow):
                patch_lo = a_lo[:, h * s:h * s + kh, w * s:w * s + kw].ravel()
                patch_hi = a_hi[:, h * s:h * s + kh, w * s:w * s + kw].ravel()
                lo, hi = _interval_dot(k_lo.reshape(c_out, -1),
                                       k_hi.reshape(c_out, -1),
                                       patch_lo[None, :], patch_hi[None, :])
                z_lo[:, h, w] = lo + b_lo
                z_hi[:, h, w] = hi + b_hi
        ch_lo = z_lo.reshape(c_out, -1).min(axis=1)
        ch_hi = z_hi.reshape(c_out, -1).max(axis=1)
        ch_lo, ch_hi = _widen(ch_lo, ch_hi, 0.0)
        layers.append(LayerBounds(l, ch_lo, ch_hi, "interval"))
        a_lo = np.maximum(z_lo, 0.0)
        a_hi = np.maximum(z_hi, 0.0)
        if layer.pool is not None:
            (ph, pw), ps = layer.pool
            qh = (oh - ph) // ps + 1
            qw = (ow - pw) // ps + 1
            p_lo = np.empty((c_out, qh, qw))
            p_hi = np.empty((c_out, qh, qw))
            for h in range(qh):
                for w in range(qw):
                    win_lo = a_lo[:, h * ps:h * ps + ph, w * ps:w * ps + pw]
                    win_hi = a_hi[:, h * ps:h * ps + ph, w * ps:w * ps + pw]
                    p_lo[:, h, w] = win_lo.reshape(c_out, -1).max(axis=1)
                    p_hi[:, h, w] = win_hi.reshape(c_out, -1).max(axis=1)
            a_lo, a_hi = p_lo, p_hi
    return BoundsTable(layers)


def calibrate_from_samples(arch, net, data, slack=0.5):
    """Empirical per-layer bounds from forward passes of a fixed net.

    Layer l's interval is the min/max realized pre-activation over all samples
    and units, widened multiplicatively by (1 + slack) and then to include 0.
    """
    from .recon import forward_preactivations

    if data.n == 0:
        raise BoundsError("empty dataset")
    layers = []
    for l, z in enumerate(forward_preactivations(net, data.inputs)):
        # z has shape (n, units...) ; reduce over samples, keep per-unit axes
        flat = z.reshape(data.n, -1)
        if isinstance(arch, ConvArch):
            c = z.shape[1]
            per = z.reshape(data.n, c, -1)
            lo = per.min(axis=(0, 2))
            hi = per.max(axis=(0, 2))
        else:
            lo = flat.min(axis=0)
            hi = flat.max(axis=0)
        lo, hi = _widen(lo, hi, slack)
        layers.append(LayerBounds(l, lo, hi, "sampled"))
    return BoundsTable(layers)
