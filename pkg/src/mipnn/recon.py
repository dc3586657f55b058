"""Network reconstruction, independent forward inference, auditing and metrics.

The forward pass here is plain numpy arithmetic with no dependency on the
model IR, so it can serve as an oracle for the encodings.
"""

from dataclasses import dataclass, field

import numpy as np

from .ir import Assignment, Violation, round_binaries

SPARSITY_TOL = 1e-6


class ReconError(Exception):
    pass


@dataclass
class QuantSpec:
    bits: int
    w_max: float

    @property
    def step(self):
        return 2.0 * self.w_max / (2 ** self.bits - 1)

    def decode(self, digits):
        """Map a digit vector (LSB first) onto the fixed-point weight grid."""
        total = 0.0
        for t, d in enumerate(digits):
            total += (2 ** t) * d
        return self.step * total - self.w_max

    def grid(self):
        return [self.decode(_bits(v, self.bits)) for v in range(2 ** self.bits)]


def _bits(value, width):
    return [(value >> t) & 1 for t in range(width)]


@dataclass
class DenseNet:
    weights: list                # [(W, b)] for layers 1..L+1
    gamma: np.ndarray            # retained flag per hidden layer
    quant: QuantSpec = None

    @property
    def num_hidden(self):
        return len(self.weights) - 1


@dataclass
class ConvNet:
    kernels: list                # [(K, b)] per conv layer; K is (C, C', KH, KW)
    head: tuple                  # (W, b) of the dense head
    gamma: list                  # per conv layer, retained flag per channel
    pools: list                  # per conv layer, ((PH, PW), stride) or None
    strides: list = None         # conv stride per layer (default 1)
    quant: QuantSpec = None


def forward(net, x):
    """Plain forward pass; returns the raw head outputs for a batch."""
    x = np.asarray(x, dtype=float)
    if isinstance(net, DenseNet):
        return _forward_dense(net, x)[-1][1]
    return _forward_conv(net, x)[-1][1]


def forward_trace(net, x):
    """Per-layer (z, a) pairs; for conv nets ``a`` is the post-pool map."""
    x = np.asarray(x, dtype=float)
    if isinstance(net, DenseNet):
        return _forward_dense(net, x)
    return _forward_conv(net, x)


def forward_preactivations(net, x):
    """Hidden-layer pre-activation arrays, one per ReLU layer."""
    return [z for z, _ in forward_trace(net, x)[:-1]]


def _forward_dense(net, x):
    trace = []
    a = x
    for l, (W, b) in enumerate(net.weights):
        z = a @ W.T + b
        if l < net.num_hidden:
            a = np.maximum(z, 0.0)
            trace.append((z, a))
        else:
            trace.append((z, z))
    return trace


def _conv2d(a, K, b, stride):
    n, c_in, h, w = a.shape
    c_out, _, kh, kw = K.shape
    oh = (h - kh) // stride + 1
    ow = (w - kw) // stride + 1
    z = np.empty((n, c_out, oh, ow))
    for hh in range(oh):
        for ww in range(ow):
            patch = a[:, :, hh * stride:hh * stride + kh, ww * stride:ww * stride + kw]
            z[:, :, hh, ww] = np.tensordot(patch, K, axes=([1, 2, 3], [1, 2, 3]))
    return z + b[None, :, None, None]


def maxpool2d(a, window, stride):
    ph, pw = window
    n, c, h, w = a.shape
    qh = (h - ph) // stride + 1
    qw = (w - pw) // stride + 1
    p = np.empty((n, c, qh, qw))
    for hh in range(qh):
        for ww in range(qw):
            win = a[:, :, hh * stride:hh * stride + ph, ww * stride:ww * stride + pw]
            p[:, :, hh, ww] = win.reshape(n, c, -1).max(axis=2)
    return p


def _forward_conv(net, x):
    trace = []
    strides = net.strides or [1] * len(net.kernels)
    a = x
    for l, (K, b) in enumerate(net.kernels):
        z = _conv2d(a, K, b, strides[l])
        a = np.maximum(z, 0.0)
        if net.pools[l] is not None:
            window, ps = net.pools[l]
            a = maxpool2d(a, window, ps)
        trace.append((z, a))
    flat = a.reshape(a.shape[0], -1)          # channel-major flattening
    W, b = net.head
    out = flat @ W.T + b
    trace.append((out, out))
    return trace


def flatten_index(c, h, w, H, W):
    """Channel-major linear index of a feature-map cell."""
    if not (0 <= h < H and 0 <= w < W) or c < 0:
        raise ReconError("index (%d,%d,%d) out of range for %dx%d maps" % (c, h, w, H, W))
    return c * H * W + h * W + w


def audit(build, asg, tol=1e-6):
    """Evaluate an assignment against the build's model, with a ReLU sanity check.

    Beyond the raw constraint audit, the ReLU indicators are compared against
    the sign of the pre-activations; indicators at z = 0 may take either value.
    """
    report = build.model.evaluate_assignment(asg, tol)
    values = asg.values
    for z_name, d_name in build.relu_pairs():
        z = values[z_name]
        d = values[d_name]
        if abs(z) <= tol:
            continue
        want = 1.0 if z > 0 else 0.0
        if abs(d - want) > tol:
            report.violations.append(Violation("relu_indicator:" + d_name, -1, abs(z)))
    return report


def reconstruct(build, asg, tol=1e-6):
    """Rebuild the network encoded by a solution; the audit must pass first."""
    report = audit(build, asg, tol)
    if not report.ok:
        raise ReconError(
            "audit failed: %d violations, worst %g (%s)"
            % (len(report.violations) + len(report.integrality_violations),
               report.max_violation,
               report.violations[0].label if report.violations else "integrality"))
    values = round_binaries(build.model, asg.values, tol)
    return build.extract_net(values)


def canonicalize(net):
    """Sort each hidden layer's rows by descending row sum, permuting the next
    layer's columns to preserve the computed function."""
    if not isinstance(net, DenseNet):
        raise ReconError("canonicalization applies to dense nets")
    weights = [(W.copy(), b.copy()) for W, b in net.weights]
    for l in range(net.num_hidden):
        W, b = weights[l]
        order = sorted(range(W.shape[0]), key=lambda j: -W[j].sum())
        weights[l] = (W[order], b[order])
        Wn, bn = weights[l + 1]
        weights[l + 1] = (Wn[:, order], bn)
    return DenseNet(weights=weights, gamma=net.gamma.copy(), quant=net.quant)


@dataclass
class MetricsReport:
    accuracy: float                    # percent
    layer_sparsity: list               # percent per layer, None for pruned layers
    retained: list                     # gamma flags (dense: per layer; conv: per channel list)
    neuron_counts: list = None         # nonzero-row counts per hidden layer
    gap: float = None                  # solver-reported optimality gap, percent
    objective_breakdown: dict = field(default_factory=dict)

    def render_dense_row(self, dataset=""):
        retained = "[" + ", ".join(str(int(g)) for g in self.retained) + "]"
        spars = "[" + ", ".join(
            "-" if s is None else _fmt1(s) for s in self.layer_sparsity) + "]"
        cells = [retained, spars, _fmt1(self.accuracy),
                 "-" if self.gap is None else _fmt1(self.gap)]
        if dataset:
            cells.insert(0, dataset)
        return " / ".join(cells)

    def render_dense_table(self, dataset=""):
        head = "Dataset & Hidden Layers & Sparsity (%) & Test Accuracy (%) & MIP Gap (%)"
        return head + "\n" + self.render_dense_row(dataset or "-").replace(" / ", " & ")

    def render_cnn_row(self):
        """Compact conv summary: accuracy / retained filters / first and last
        layer weight sparsity / gap, slash separated."""
        total = len(self.retained)
        kept = sum(int(g) for g in self.retained)
        cells = [_fmt1(self.accuracy), "%d of %d" % (kept, total),
                 _fmt1(self.layer_sparsity[0]), _fmt1(self.layer_sparsity[-1]),
                 "-" if self.gap is None else _fmt1(self.gap)]
        return " / ".join(cells)

    def render_cnn_block(self, conv_sparsity=None, dense_sparsity=None,
                         hidden_neurons=None):
        total = len(self.retained)
        kept = sum(int(g) for g in self.retained)
        if conv_sparsity is None:
            conv_sparsity = self.layer_sparsity[0]
        if dense_sparsity is None:
            dense_sparsity = self.layer_sparsity[-1]
        lines = [
            ("Test Accuracy", _fmt1(self.accuracy) + "%"),
            ("Retained Filters", "%d of %d" % (kept, total)),
        ]
        if hidden_neurons is not None:
            lines.append(("Hidden Neurons (Dense)", str(hidden_neurons)))
        lines += [
            ("CNN Weight Sparsity", _fmt1(conv_sparsity) + "%"),
            ("Dense Weight Sparsity", _fmt1(dense_sparsity) + "%"),
        ]
        if self.gap is not None:
            lines.append(("Final MIP Gap", _fmt1(self.gap) + "%"))
        width = max(len(k) for k, _ in lines)
        return "\n".join("%-*s  %s" % (width, k, v) for k, v in lines)

    def to_kv_lines(self):
        out = ["accuracy %r" % self.accuracy]
        for i, s in enumerate(self.layer_sparsity):
            out.append("sparsity[%d] %s" % (i, "-" if s is None else repr(s)))
        out.append("retained %s" % " ".join(str(int(g)) for g in np.ravel(self.retained)))
        if self.neuron_counts is not None:
            out.append("neurons %s" % " ".join(str(c) for c in self.neuron_counts))
        if self.gap is not None:
            out.append("gap %r" % self.gap)
        for k, v in self.objective_breakdown.items():
            out.append("objective.%s %r" % (k, v))
        return "\n".join(out) + "\n"


def _fmt1(x):
    return "%.1f" % float(x)


def metrics(net, data, split=None, reported_gap=None, hyper=None):
    """Accuracy, per-layer weight sparsity, retained structure and objective parts."""
    inputs, targets = data.inputs, data.targets
    if split is not None:
        if len(split) and (min(split) < 0 or max(split) >= data.n):
            raise ReconError("split indices out of range")
        inputs, targets = inputs[split], targets[split]
    out = forward(net, inputs)
    pred = np.argmax(out, axis=1)
    truth = np.argmax(targets, axis=1)
    accuracy = 100.0 * float(np.mean(pred == truth)) if len(pred) else 0.0

    if isinstance(net, DenseNet):
        param_layers = net.weights[:-1]
        retained = [int(round(g)) for g in np.ravel(net.gamma)]
    else:
        param_layers = [(K.reshape(K.shape[0], -1), b) for K, b in net.kernels]
        retained = [int(round(g)) for g in np.ravel(np.concatenate(net.gamma))]

    sparsity = []
    neuron_counts = []
    for l, (W, _) in enumerate(param_layers):
        pruned = isinstance(net, DenseNet) and l < len(net.gamma) and net.gamma[l] < 0.5
        if pruned:
            sparsity.append(None)
            neuron_counts.append(0)
            continue
        frac = 100.0 * float(np.mean(np.abs(W) <= SPARSITY_TOL))
        sparsity.append(frac)
        neuron_counts.append(int(np.sum(np.abs(W).max(axis=1) > SPARSITY_TOL)))

    breakdown = {}
    if hyper is not None:
        res = out - targets
        all_w = (net.weights if isinstance(net, DenseNet)
                 else net.kernels + [net.head])
        l1 = sum(float(np.abs(W).sum()) for W, _ in all_w)
        fro = sum(float((W ** 2).sum()) for W, _ in all_w)
        if isinstance(net, DenseNet):
            structural = sum(float(g) for g in np.ravel(net.gamma))
        else:
            structural = sum(float(g) for g in np.ravel(np.concatenate(net.gamma)))
        from .nnspec import LOSS_ABS
        loss = (float(np.abs(res).sum()) if hyper.loss == LOSS_ABS
                else float((res ** 2).sum()))
        breakdown = {
            "loss": loss,
            "l1": hyper.alpha * hyper.lam * l1,
            "frobenius": 0.5 * hyper.alpha * (1.0 - hyper.lam) * fro,
            "structural": hyper.beta * structural,
        }
        breakdown["total"] = sum(breakdown.values())

    return MetricsReport(accuracy=accuracy, layer_sparsity=sparsity,
                         retained=retained, neuron_counts=neuron_counts,
                         gap=reported_gap, objective_breakdown=breakdown)
