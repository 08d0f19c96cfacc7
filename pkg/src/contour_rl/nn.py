"""Small numpy network engine with exact backpropagation.

Activations are NHWC. Convolutions use valid padding; pooling floors the
output size. Parameters are float32 unless a network is explicitly promoted
(gradient checks run on a float64 copy).
"""
from __future__ import annotations

import copy
import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import CheckpointError, ShapeMismatch

CONV2D = "conv2d"
MAXPOOL2D = "maxpool2d"
FC = "fc"
RELU = "relu"
SOFTMAX = "softmax"
FLATTEN = "flatten"
KINDS = (CONV2D, MAXPOOL2D, FC, RELU, SOFTMAX, FLATTEN)


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    filters: int = 0  # output channels (conv) or width (fc)
    size: int = 1
    stride: int = 1

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.size < 1 or self.stride < 1:
            raise ValueError("filter size and stride must be >= 1")
        if self.kind in (CONV2D, FC) and self.filters < 1:
            raise ValueError(f"{self.kind} needs at least one output unit")


def conv(filters, size, stride=1):
    return LayerSpec(CONV2D, filters, size, stride)


def pool(size=2, stride=2):
    return LayerSpec(MAXPOOL2D, 0, size, stride)


def fc(units):
    return LayerSpec(FC, units)


RELU_SPEC = LayerSpec(RELU)
SOFTMAX_SPEC = LayerSpec(SOFTMAX)
FLATTEN_SPEC = LayerSpec(FLATTEN)


def output_shape(spec: LayerSpec, shape: tuple) -> tuple:
    """Per-example output shape of ``spec`` applied to per-example ``shape``."""
    if spec.kind in (CONV2D, MAXPOOL2D):
        if len(shape) != 3:
            raise ShapeMismatch(f"{spec.kind} needs an (H, W, C) input, got {shape}")
        h, w, c = shape
        ho = (h - spec.size) // spec.stride + 1
        wo = (w - spec.size) // spec.stride + 1
        if ho < 1 or wo < 1:
            raise ShapeMismatch(f"{spec.kind} {spec.size}x{spec.size} does not fit {shape}")
        return (ho, wo, spec.filters if spec.kind == CONV2D else c)
    if spec.kind == FLATTEN:
        return (int(np.prod(shape)),)
    if spec.kind == FC:
        if len(shape) != 1:
            raise ShapeMismatch(f"fc needs a flat input, got {shape}")
        return (spec.filters,)
    return shape


def _tap(x, i, j, stride, ho, wo):
    """View of the inputs seen by window offset ``(i, j)`` for every output cell."""
    return x[:, i : i + stride * (ho - 1) + 1 : stride, j : j + stride * (wo - 1) + 1 : stride, :]


def _im2col(x, k, stride, ho, wo):
    """(B*Ho*Wo, k*k*C) patch matrix, columns ordered (ki, kj, c) like conv weights."""
    if x.shape[3] == 1:
        win = sliding_window_view(x[..., 0], (k, k), axis=(1, 2))
        return win[:, ::stride, ::stride][:, :ho, :wo].reshape(-1, k * k)
    win = sliding_window_view(x, (k, k), axis=(1, 2))[:, ::stride, ::stride][:, :ho, :wo]
    return win.transpose(0, 1, 2, 4, 5, 3).reshape(-1, k * k * x.shape[3])


class Network:
    """Ordered layer stack with its parameters.

    ``params[i]`` lists the arrays of layer ``i`` (weights then bias), empty for
    parameter-free layers.
    """

    def __init__(self, specs, input_shape, seed: int = 0, arch: str = "custom", dtype=np.float32):
        self.specs = [s if isinstance(s, LayerSpec) else LayerSpec(**s) for s in specs]
        self.input_shape = tuple(int(v) for v in input_shape)
        self.seed = int(seed)
        self.arch = arch
        self.shapes = [self.input_shape]
        for spec in self.specs:
            self.shapes.append(output_shape(spec, self.shapes[-1]))
        self.params = self._init_params(np.dtype(dtype))

    def _init_params(self, dtype):
        # He-uniform weights, zero biases; drawn in float64 for platform-stable values
        rng = np.random.default_rng(self.seed)
        params = []
        for spec, shape in zip(self.specs, self.shapes):
            if spec.kind == CONV2D:
                fan_in = spec.size * spec.size * shape[2]
                wshape = (spec.size, spec.size, shape[2], spec.filters)
            elif spec.kind == FC:
                fan_in = shape[0]
                wshape = (shape[0], spec.filters)
            else:
                params.append([])
                continue
            limit = np.sqrt(6.0 / fan_in)
            w = rng.uniform(-limit, limit, size=wshape).astype(dtype)
            params.append([w, np.zeros(spec.filters, dtype=dtype)])
        return params

    @property
    def dtype(self):
        for p in self.parameters():
            return p.dtype
        return np.dtype(np.float32)

    @property
    def output_shape(self) -> tuple:
        return self.shapes[-1]

    def parameters(self) -> list[np.ndarray]:
        return [p for layer in self.params for p in layer]

    def param_count(self) -> int:
        return int(sum(p.size for p in self.parameters()))

    def copy(self) -> "Network":
        return copy.deepcopy(self)

    def astype(self, dtype) -> "Network":
        out = copy.copy(self)
        out.params = [[p.astype(dtype) for p in layer] for layer in self.params]
        return out

    def set_parameters(self, arrays) -> None:
        arrays = list(arrays)
        mine = self.parameters()
        if len(arrays) != len(mine):
            raise ShapeMismatch(f"expected {len(mine)} parameter arrays, got {len(arrays)}")
        for dst, src in zip(mine, arrays):
            if dst.shape != np.shape(src):
                raise ShapeMismatch(f"parameter shape {np.shape(src)} != {dst.shape}")
            dst[...] = src

    def forward(self, x, keep_cache: bool = True):
        x = np.asarray(x, dtype=self.dtype)
        ins = self.input_shape
        if x.shape == ins:
            x = x[None]
        elif len(ins) == 3 and ins[2] == 1 and x.ndim in (2, 3) and x.shape[-2:] == ins[:2]:
            x = x.reshape(-1, *ins)  # single-channel (H, W) or (B, H, W)
        if x.shape[1:] != ins:
            raise ShapeMismatch(f"input shape {x.shape[1:]} != network input {self.input_shape}")
        caches = []
        for i, (spec, params) in enumerate(zip(self.specs, self.params)):
            x, c = _layer_forward(spec, params, x, self.shapes[i + 1], need_cols=keep_cache)
            # the softmax cache is tiny and holds the logits, so it is always kept
            caches.append(c if keep_cache or spec.kind == SOFTMAX else None)
        return x, caches

    def backward(self, caches, output_grad, through_softmax: bool = True):
        """Gradients of ``sum(output * output_grad)`` w.r.t. every parameter.

        With ``through_softmax=False`` and a final softmax layer, ``output_grad``
        is taken to be the gradient w.r.t. the logits feeding that softmax.
        """
        if caches is None or any(c is None for c in caches):
            raise ValueError("forward was run without keep_cache")
        g = np.asarray(output_grad, dtype=self.dtype)
        n = len(self.specs)
        last = n - 1
        if not through_softmax and self.specs[-1].kind == SOFTMAX:
            last = n - 2
        expected = self.shapes[last + 1]
        if g.shape[1:] != expected:
            raise ShapeMismatch(f"output_grad shape {g.shape[1:]} != {expected}")
        grads = [[np.zeros_like(p) for p in layer] for layer in self.params]
        for i in range(last, -1, -1):
            need_dx = i > 0
            g, layer_grads = _layer_backward(self.specs[i], self.params[i], caches[i], g, need_dx)
            grads[i] = layer_grads
        return Gradients(grads)

    def logits(self, caches) -> np.ndarray:
        """Input to the final softmax, taken from a forward cache."""
        if self.specs[-1].kind != SOFTMAX:
            raise ValueError("network does not end in a softmax")
        return caches[-1]["z"]

    def describe(self) -> list[str]:
        lines = [f"input {self.input_shape}"]
        for spec, shape in zip(self.specs, self.shapes[1:]):
            lines.append(f"{spec.kind:<10} {shape}")
        return lines


class Gradients:
    """Per-layer gradient arrays congruent with ``Network.params``."""

    def __init__(self, per_layer):
        self.per_layer = per_layer

    def arrays(self) -> list[np.ndarray]:
        return [g for layer in self.per_layer for g in layer]

    def scale(self, s) -> "Gradients":
        return Gradients([[g * s for g in layer] for layer in self.per_layer])

    def __add__(self, other: "Gradients") -> "Gradients":
        return Gradients([[a + b for a, b in zip(la, lb)] for la, lb in zip(self.per_layer, other.per_layer)])

    def norm(self) -> float:
        return float(np.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in self.arrays())))

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(g)) for g in self.arrays())


def _layer_forward(spec, params, x, out_shape, need_cols=True):
    # need_cols=False skips everything only backward would read
    kind = spec.kind
    if kind == CONV2D:
        w, b = params
        k, s = spec.size, spec.stride
        ho, wo, cout = out_shape
        bsz = x.shape[0]
        cols = _im2col(x, k, s, ho, wo)
        out = (cols @ w.reshape(-1, cout) + b).reshape(bsz, ho, wo, cout)
        return out, {"cols": cols if need_cols else None, "x_shape": x.shape}
    if kind == MAXPOOL2D:
        k, s = spec.size, spec.stride
        ho, wo, c = out_shape
        out = _tap(x, 0, 0, s, ho, wo).copy()
        for i in range(k):
            for j in range(k):
                if i or j:
                    np.maximum(out, _tap(x, i, j, s, ho, wo), out=out)
        return out, {"x": x if need_cols else None, "out": out}
    if kind == FLATTEN:
        return x.reshape(x.shape[0], -1), {"x_shape": x.shape}
    if kind == FC:
        w, b = params
        return x @ w + b, {"x": x}
    if kind == RELU:
        return np.maximum(x, 0), {"mask": x > 0 if need_cols else None}
    if kind == SOFTMAX:
        z = x - x.max(axis=1, keepdims=True)
        e = np.exp(z)
        p = e / e.sum(axis=1, keepdims=True)
        return p, {"z": x, "p": p}
    raise ValueError(kind)


def _layer_backward(spec, params, cache, g, need_dx):
    kind = spec.kind
    if kind == CONV2D:
        w, b = params
        k, s = spec.size, spec.stride
        bsz, ho, wo, cout = g.shape
        g2 = g.reshape(-1, cout)
        dw = (cache["cols"].T @ g2).reshape(w.shape)
        db = g2.sum(axis=0)
        dx = None
        if need_dx:
            cin = w.shape[2]
            dcols = (g2 @ w.reshape(-1, cout).T).reshape(bsz, ho, wo, k, k, cin)
            dx = np.zeros(cache["x_shape"], dtype=g.dtype)
            for i in range(k):
                for j in range(k):
                    _tap(dx, i, j, s, ho, wo)[...] += dcols[:, :, :, i, j, :]
        return dx, [dw, db]
    if kind == MAXPOOL2D:
        k, s = spec.size, spec.stride
        x, out = cache["x"], cache["out"]
        _, ho, wo, _ = g.shape
        dx = np.zeros(x.shape, dtype=g.dtype)
        taken = np.zeros(out.shape, dtype=bool)
        # each window routes its gradient to its first maximum in row-major order
        for i in range(k):
            for j in range(k):
                hit = _tap(x, i, j, s, ho, wo) == out
                hit &= ~taken
                taken |= hit
                if k == s:  # windows do not overlap, so plain assignment suffices
                    np.multiply(hit, g, out=_tap(dx, i, j, s, ho, wo))
                else:
                    _tap(dx, i, j, s, ho, wo)[...] += hit * g
        return dx, []
    if kind == FLATTEN:
        return g.reshape(cache["x_shape"]), []
    if kind == FC:
        w, b = params
        x = cache["x"]
        return (g @ w.T if need_dx else None), [x.T @ g, g.sum(axis=0)]
    if kind == RELU:
        return g * cache["mask"], []
    if kind == SOFTMAX:
        p = cache["p"]
        return p * (g - np.sum(g * p, axis=1, keepdims=True)), []
    raise ValueError(kind)


# ----------------------------------------------------------------- architectures

def _trunk(first, second):
    return [
        conv(first, 5), RELU_SPEC, pool(),
        conv(second, 3), RELU_SPEC, pool(),
        FLATTEN_SPEC,
        fc(256), RELU_SPEC,
        fc(64), RELU_SPEC,
    ]


def policy_network(seed: int = 0, patch_size: int = 21) -> Network:
    """21x21 patch -> probabilities over the eight moves."""
    specs = _trunk(16, 64) + [fc(8), SOFTMAX_SPEC]
    return Network(specs, (patch_size, patch_size, 1), seed=seed, arch="policy")


def value_network(seed: int = 0, patch_size: int = 21) -> Network:
    specs = _trunk(16, 64) + [fc(1)]
    return Network(specs, (patch_size, patch_size, 1), seed=seed, arch="value")


def landing_network(seed: int = 0) -> Network:
    """100x80 upper-right crop -> (row, col) in crop pixels."""
    specs = [
        conv(32, 5), RELU_SPEC, pool(),
        conv(64, 5), RELU_SPEC, pool(),
        conv(64, 5), RELU_SPEC, pool(),
        FLATTEN_SPEC,
        fc(1024), RELU_SPEC,
        fc(64), RELU_SPEC,
        fc(2),
    ]
    return Network(specs, (100, 80, 1), seed=seed, arch="landing")


ARCHITECTURES = {"policy": policy_network, "value": value_network, "landing": landing_network}


# ----------------------------------------------------------------- functional API

def forward(net: Network, x):
    return net.forward(x)


def backward(net: Network, cache, output_grad, through_softmax: bool = True) -> Gradients:
    return net.backward(cache, output_grad, through_softmax=through_softmax)


def apply_update(net: Network, grads: Gradients, learning_rate: float, ascent: bool = False) -> Network:
    """In-place ``theta -= lr * g`` (or ``+=`` with ``ascent``)."""
    arrays = grads.arrays() if isinstance(grads, Gradients) else list(grads)
    params = net.parameters()
    if len(arrays) != len(params):
        raise ShapeMismatch(f"{len(arrays)} gradient arrays for {len(params)} parameters")
    step = learning_rate if ascent else -learning_rate
    for p, g in zip(params, arrays):
        if p.shape != g.shape:
            raise ShapeMismatch(f"gradient shape {g.shape} != parameter shape {p.shape}")
        p += np.asarray(step * g, dtype=p.dtype)
    return net


class Adam:
    """Adam moments kept alongside a network; steps go through :func:`apply_update`."""

    def __init__(self, net: Network, beta1=0.9, beta2=0.999, eps=1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = [np.zeros_like(p, dtype=np.float64) for p in net.parameters()]
        self.v = [np.zeros_like(p, dtype=np.float64) for p in net.parameters()]
        self.t = 0

    def step(self, net: Network, grads: Gradients, learning_rate: float, ascent: bool = False) -> Network:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        directions = []
        for m, v, g in zip(self.m, self.v, grads.arrays()):
            g = g.astype(np.float64)
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            mhat = m / (1 - b1 ** self.t)
            vhat = v / (1 - b2 ** self.t)
            directions.append(mhat / (np.sqrt(vhat) + self.eps))
        return apply_update(net, directions, learning_rate, ascent=ascent)


# ----------------------------------------------------------------- gradient check

def relu_masks(caches) -> list[np.ndarray]:
    return [c["mask"] for c in caches if c is not None and "mask" in c]


def kink_state(net: Network, caches) -> list[np.ndarray]:
    """ReLU on/off masks plus the winning tap of every max-pool window.

    Two forward passes with equal kink states lie on the same linear piece.
    """
    out = []
    for spec, c, shape in zip(net.specs, caches, net.shapes[1:]):
        if c is None:
            continue
        if spec.kind == RELU:
            out.append(c["mask"])
        elif spec.kind == MAXPOOL2D:
            ho, wo, _ = shape
            taps = [_tap(c["x"], i, j, spec.stride, ho, wo)
                    for i in range(spec.size) for j in range(spec.size)]
            out.append(np.argmax(np.stack(taps), axis=0))
    return out


def grad_check(net: Network, x, loss_fn, eps: float = 1e-5, max_params: int = 400,
               rng=None, return_details: bool = False):
    """Compare backprop against central differences.

    ``loss_fn(output) -> (loss, d_loss/d_output)``. Runs on a float64 copy of
    ``net``. Networks with more than ``max_params`` parameters are checked on a
    random subset that covers every parameter tensor. Coordinates whose
    perturbation flips any ReLU or changes a max-pool winner are skipped,
    since the loss has a kink there.
    """
    if not 1e-6 <= eps <= 1e-2:
        raise ValueError("eps must lie in [1e-6, 1e-2]")
    rng = np.random.default_rng(0) if rng is None else rng
    net64 = net.astype(np.float64)
    x = np.asarray(x, dtype=np.float64)
    out, caches = net64.forward(x)
    _, dout = loss_fn(out)
    analytic = net64.backward(caches, dout).arrays()
    base_masks = kink_state(net64, caches)
    params = net64.parameters()

    total = sum(p.size for p in params)
    picks = []
    if total <= max_params:
        for pi, p in enumerate(params):
            picks.extend((pi, j) for j in range(p.size))
    else:
        per = max(1, max_params // len(params))
        for pi, p in enumerate(params):
            n = min(p.size, per)
            picks.extend((pi, int(j)) for j in rng.choice(p.size, size=n, replace=False))
        while len(picks) < max(200, max_params):
            pi = int(rng.integers(len(params)))
            picks.append((pi, int(rng.integers(params[pi].size))))

    def loss_and_masks():
        o, c = net64.forward(x)
        return float(loss_fn(o)[0]), kink_state(net64, c)

    worst, checked, skipped = 0.0, 0, 0
    for pi, j in picks:
        flat = params[pi].reshape(-1)
        orig = flat[j]
        flat[j] = orig + eps
        lp, mp = loss_and_masks()
        flat[j] = orig - eps
        lm, mm = loss_and_masks()
        flat[j] = orig
        if any(not np.array_equal(a, b) for a, b in zip(mp, base_masks)) or \
                any(not np.array_equal(a, b) for a, b in zip(mm, base_masks)):
            skipped += 1
            continue
        numeric = (lp - lm) / (2 * eps)
        a = float(analytic[pi].reshape(-1)[j])
        denom = max(abs(a), abs(numeric))
        err = 0.0 if denom < 1e-10 else abs(a - numeric) / denom
        worst = max(worst, err)
        checked += 1
    if return_details:
        return {"max_relative_error": worst, "checked": checked, "skipped": skipped}
    return worst


# ----------------------------------------------------------------- checkpoints

_MAGIC = b"CRLNET1\n"


def save_checkpoint(path, net: Network, iteration: int = 0, extra: dict | None = None) -> None:
    header = {
        "architecture": net.arch,
        "input_shape": list(net.input_shape),
        "layers": [asdict(s) for s in net.specs],
        "layer_shapes": [[list(p.shape) for p in layer] for layer in net.params],
        "seed": net.seed,
        "iteration": int(iteration),
        "dtype": "<f4",
    }
    if extra:
        header["extra"] = extra
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    body = b"".join(np.ascontiguousarray(p, dtype="<f4").tobytes() for p in net.parameters())
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<Q", len(hbytes)))
        f.write(hbytes)
        f.write(body)
    tmp.replace(path)


def load_checkpoint(path) -> tuple[Network, dict]:
    data = Path(path).read_bytes()
    if not data.startswith(_MAGIC):
        raise CheckpointError(f"{path}: not a network checkpoint")
    off = len(_MAGIC)
    if len(data) < off + 8:
        raise CheckpointError(f"{path}: truncated header")
    (hlen,) = struct.unpack_from("<Q", data, off)
    off += 8
    try:
        header = json.loads(data[off:off + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: bad header ({exc})") from None
    off += hlen
    net = Network([LayerSpec(**s) for s in header["layers"]], header["input_shape"],
                  seed=header["seed"], arch=header["architecture"])
    arrays = []
    for shape in (s for layer in header["layer_shapes"] for s in layer):
        n = int(np.prod(shape))
        if len(data) < off + 4 * n:
            raise CheckpointError(f"{path}: parameter block truncated")
        arrays.append(np.frombuffer(data, dtype="<f4", count=n, offset=off).reshape(shape))
        off += 4 * n
    if off != len(data):
        raise CheckpointError(f"{path}: {len(data) - off} trailing bytes")
    net.set_parameters(arrays)
    return net, header
