"""Small convolutional function approximator with hand-written gradients.

Fixed topology: two 3x3 valid convolutions with rectifiers (7->5->3
spatial), flatten, concatenation of the scalar features, a dense trunk
with rectifier, and one of two heads:

* ``dueling``      -> (state value, per-action advantages)
* ``actor_critic`` -> (action logits, state value)

Everything is plain numpy in double precision. ``forward`` is pure and
returns a cache that ``backward`` consumes to produce gradients aligned
with the parameter list; ``optimize_step`` applies an adaptive-moment
update in place. ``gradient_check`` verifies the analytic gradients
against central finite differences, parameter by parameter.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import as_strided

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

HEADS = ("dueling", "actor_critic")


@dataclass(frozen=True)
class NetworkSpec:
    head: str
    input_hw: tuple[int, int] = (7, 7)
    in_channels: int = 5
    n_scalars: int = 8
    conv_channels: tuple[int, int] = (16, 32)
    dense_units: int = 128
    n_actions: int = 5

    def __post_init__(self):
        if self.head not in HEADS:
            raise ValueError(f"head must be one of {HEADS}, got {self.head!r}")
        h, w = self.input_hw
        if h < 5 or w < 5:
            raise ValueError("input must be at least 5x5 for two valid 3x3 convolutions")

    @property
    def flat_units(self) -> int:
        h, w = self.input_hw
        return (h - 4) * (w - 4) * self.conv_channels[1]

    @property
    def trunk_in(self) -> int:
        return self.flat_units + self.n_scalars

    def param_shapes(self) -> list[tuple[str, tuple[int, ...]]]:
        c1, c2 = self.conv_channels
        shapes = [
            ("conv1.w", (3, 3, self.in_channels, c1)),
            ("conv1.b", (c1,)),
            ("conv2.w", (3, 3, c1, c2)),
            ("conv2.b", (c2,)),
            ("trunk.w", (self.trunk_in, self.dense_units)),
            ("trunk.b", (self.dense_units,)),
        ]
        if self.head == "dueling":
            shapes += [
                ("value.w", (self.dense_units, 1)),
                ("value.b", (1,)),
                ("adv.w", (self.dense_units, self.n_actions)),
                ("adv.b", (self.n_actions,)),
            ]
        else:
            shapes += [
                ("policy.w", (self.dense_units, self.n_actions)),
                ("policy.b", (self.n_actions,)),
                ("value.w", (self.dense_units, 1)),
                ("value.b", (1,)),
            ]
        return shapes

    def param_names(self) -> list[str]:
        return [name for name, _ in self.param_shapes()]

    def n_params(self) -> int:
        return sum(int(np.prod(s)) for _, s in self.param_shapes())


class NetworkState:
    """Parameters plus adaptive-moment optimizer state.

    All parameters live in one flat vector; ``params`` holds reshaped
    views into it so layers see ordinary arrays while the optimizer
    works on a single contiguous buffer.
    """

    def __init__(self, params, m=None, v=None, t: int = 0):
        arrays = [np.asarray(p, dtype=np.float64) for p in params]
        self._shapes = [a.shape for a in arrays]
        self.flat = (
            np.concatenate([a.ravel() for a in arrays])
            if arrays
            else np.zeros(0)
        )
        self.params = self._views(self.flat)
        self.m = self._flatten_moments(m)
        self.v = self._flatten_moments(v)
        self.t = t

    def _flatten_moments(self, given) -> np.ndarray:
        if given is None:
            return np.zeros_like(self.flat)
        if isinstance(given, np.ndarray) and given.ndim == 1:
            return given.astype(np.float64, copy=True)
        return np.concatenate([np.asarray(a, dtype=np.float64).ravel() for a in given])

    def _views(self, flat: np.ndarray) -> list[np.ndarray]:
        views = []
        offset = 0
        for shape in self._shapes:
            size = int(np.prod(shape))
            views.append(flat[offset : offset + size].reshape(shape))
            offset += size
        return views

    def clone(self) -> "NetworkState":
        out = NetworkState.__new__(NetworkState)
        out._shapes = list(self._shapes)
        out.flat = self.flat.copy()
        out.params = out._views(out.flat)
        out.m = self.m.copy()
        out.v = self.v.copy()
        out.t = self.t
        return out

    def copy_params_from(self, other: "NetworkState") -> None:
        np.copyto(self.flat, other.flat)

    def theta_norm(self) -> float:
        return math.sqrt(float(self.flat @ self.flat))


def init_network(
    spec: NetworkSpec,
    rng: np.random.Generator,
    scale: float = 1.0,
    head_gain: float = 0.01,
) -> NetworkState:
    """He-normal weights (head layers shrunk by ``head_gain``), zero biases."""
    head_names = {"value.w", "adv.w", "policy.w"}
    params = []
    for name, shape in spec.param_shapes():
        if name.endswith(".b"):
            params.append(np.zeros(shape))
            continue
        fan_in = int(np.prod(shape[:-1]))
        std = scale * math.sqrt(2.0 / fan_in)
        if name in head_names:
            std *= head_gain
        params.append(rng.standard_normal(shape) * std)
    return NetworkState(
        params=params,
        m=[np.zeros_like(p) for p in params],
        v=[np.zeros_like(p) for p in params],
        t=0,
    )


# ----------------------------------------------------------------------
# layer primitives
# ----------------------------------------------------------------------

_PATCH_INDEX: dict[tuple[int, int, int], np.ndarray] = {}


def _patch_index(h: int, w: int, cin: int) -> np.ndarray:
    """Flat gather indices turning an (h*w*cin) image into 3x3 patches.

    Per-patch element order is (kh, kw, cin), matching the flattened
    (3, 3, cin, cout) weight layout.
    """
    key = (h, w, cin)
    idx = _PATCH_INDEX.get(key)
    if idx is None:
        ho, wo = h - 2, w - 2
        rows = []
        for oy in range(ho):
            for ox in range(wo):
                cols = []
                for i in range(3):
                    for j in range(3):
                        base = ((oy + i) * w + (ox + j)) * cin
                        cols.extend(range(base, base + cin))
                rows.append(cols)
        idx = np.asarray(rows, dtype=np.intp)
        _PATCH_INDEX[key] = idx
    return idx


def conv3x3_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray):
    """Valid 3x3 convolution on NHWC input via patch extraction.

    Small batches gather patches through a precomputed index (lower call
    overhead); larger ones go through a strided window view (less copy
    work). Both produce the (kh, kw, cin) patch layout that matches the
    flattened (3, 3, cin, cout) weights.
    """
    n, h, wid, cin = x.shape
    ho, wo = h - 2, wid - 2
    if n <= 8:
        idx = _patch_index(h, wid, cin)
        patches = np.take(x.reshape(n, h * wid * cin), idx, axis=1).reshape(
            n * ho * wo, 9 * cin
        )
    else:
        s = x.strides
        win = as_strided(
            x,
            shape=(n, ho, wo, 3, 3, cin),
            strides=(s[0], s[1], s[2], s[1], s[2], s[3]),
        )
        patches = win.reshape(n * ho * wo, 9 * cin)
    cout = w.shape[-1]
    y = patches @ w.reshape(9 * cin, cout) + b
    return y.reshape(n, ho, wo, cout), (patches, x.shape)


def conv3x3_backward(gy: np.ndarray, cache, w: np.ndarray, need_input_grad: bool = True):
    patches, x_shape = cache
    n, h, wid, cin = x_shape
    ho, wo = h - 2, wid - 2
    cout = w.shape[-1]
    gy_flat = gy.reshape(n * ho * wo, cout)
    gw = (patches.T @ gy_flat).reshape(3, 3, cin, cout)
    gb = gy_flat.sum(axis=0)
    if not need_input_grad:
        return None, gw, gb
    cols = (gy_flat @ w.reshape(9 * cin, cout).T).reshape(n, ho, wo, 3, 3, cin)
    gx = np.zeros(x_shape)
    for i in range(3):
        for j in range(3):
            gx[:, i : i + ho, j : j + wo, :] += cols[:, :, :, i, j, :]
    return gx, gw, gb


def dense_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray):
    return x @ w + b, x


def dense_backward(gy: np.ndarray, x: np.ndarray, w: np.ndarray):
    return gy @ w.T, x.T @ gy, gy.sum(axis=0)


def relu_forward(x: np.ndarray):
    mask = x > 0.0
    return x * mask, mask


def relu_backward(gy: np.ndarray, mask: np.ndarray):
    return gy * mask


# ----------------------------------------------------------------------
# whole-network forward / backward
# ----------------------------------------------------------------------

def batch_observations(observations) -> tuple[np.ndarray, np.ndarray]:
    """Stack Observation objects into (images, scalars) batch arrays."""
    images = np.stack([o.image for o in observations])
    scalars = np.stack([o.scalars for o in observations])
    return images, scalars


def forward(
    state: NetworkState,
    spec: NetworkSpec,
    images: np.ndarray,
    scalars: np.ndarray,
):
    """Run the network on a batch. Returns (out1, out2, cache).

    dueling head:      out1 = state values (n,), out2 = advantages (n, A)
    actor_critic head: out1 = logits (n, A),     out2 = state values (n,)
    """
    if images.ndim != 4 or images.shape[1:] != (*spec.input_hw, spec.in_channels):
        raise ValueError(
            f"images must be (n, {spec.input_hw[0]}, {spec.input_hw[1]}, "
            f"{spec.in_channels}), got {images.shape}"
        )
    if scalars.ndim != 2 or scalars.shape != (images.shape[0], spec.n_scalars):
        raise ValueError(
            f"scalars must be ({images.shape[0]}, {spec.n_scalars}), got {scalars.shape}"
        )
    p = state.params
    z1, c1 = conv3x3_forward(images, p[0], p[1])
    a1, m1 = relu_forward(z1)
    z2, c2 = conv3x3_forward(a1, p[2], p[3])
    a2, m2 = relu_forward(z2)
    n = images.shape[0]
    feat = np.concatenate([a2.reshape(n, -1), scalars], axis=1)
    z3, c3 = dense_forward(feat, p[4], p[5])
    a3, m3 = relu_forward(z3)
    ha, _ = dense_forward(a3, p[6], p[7])
    hb, _ = dense_forward(a3, p[8], p[9])
    cache = (c1, m1, c2, m2, c3, m3, a3, a2.shape)
    if spec.head == "dueling":
        return ha[:, 0], hb, cache  # (V, A)
    return ha, hb[:, 0], cache  # (logits, V)


def backward(
    state: NetworkState,
    spec: NetworkSpec,
    cache,
    g_out1: np.ndarray,
    g_out2: np.ndarray,
) -> list[np.ndarray]:
    """Gradients of a scalar loss w.r.t. every parameter.

    ``g_out1``/``g_out2`` are the loss gradients w.r.t. the two head
    outputs, in the same order ``forward`` returned them.
    """
    p = state.params
    c1, m1, c2, m2, c3, m3, a3, a2_shape = cache
    if spec.head == "dueling":
        g_ha = np.asarray(g_out1).reshape(-1, 1)
        g_hb = np.asarray(g_out2)
    else:
        g_ha = np.asarray(g_out1)
        g_hb = np.asarray(g_out2).reshape(-1, 1)
    if g_ha.shape[0] != a3.shape[0] or g_hb.shape[0] != a3.shape[0]:
        raise ValueError("output gradient batch size does not match the forward cache")

    ga3_a, gw_a, gb_a = dense_backward(g_ha, a3, p[6])
    ga3_b, gw_b, gb_b = dense_backward(g_hb, a3, p[8])
    gz3 = relu_backward(ga3_a + ga3_b, m3)
    gfeat, gw_t, gb_t = dense_backward(gz3, c3, p[4])
    n = gfeat.shape[0]
    flat = spec.flat_units
    ga2 = gfeat[:, :flat].reshape(a2_shape)
    gz2 = relu_backward(ga2, m2)
    ga1, gw2, gb2 = conv3x3_backward(gz2, c2, p[2])
    gz1 = relu_backward(ga1, m1)
    _, gw1, gb1 = conv3x3_backward(gz1, c1, p[0], need_input_grad=False)
    return [gw1, gb1, gw2, gb2, gw_t, gb_t, gw_a, gb_a, gw_b, gb_b]


# ----------------------------------------------------------------------
# optimizer
# ----------------------------------------------------------------------

def optimize_step(
    state: NetworkState,
    grads: list[np.ndarray],
    lr: float,
    clip_norm: float | None = None,
) -> float:
    """In-place adaptive-moment update; returns the L2 norm of the step."""
    if len(grads) != len(state.params):
        raise ValueError(f"expected {len(state.params)} gradients, got {len(grads)}")
    g = np.concatenate([np.asarray(a).ravel() for a in grads])
    if g.shape != state.flat.shape:
        raise ValueError("gradient shapes do not match the parameters")
    sq = float(g @ g)
    if not math.isfinite(sq):
        raise ValueError("non-finite gradient")
    gnorm = math.sqrt(sq)
    if clip_norm is not None and gnorm > clip_norm > 0.0:
        g = g * (clip_norm / gnorm)

    state.t += 1
    bc1 = 1.0 - ADAM_BETA1**state.t
    bc2 = 1.0 - ADAM_BETA2**state.t
    m, v = state.m, state.v
    m *= ADAM_BETA1
    m += (1.0 - ADAM_BETA1) * g
    v *= ADAM_BETA2
    v += (1.0 - ADAM_BETA2) * np.square(g, out=g)
    # lr/bc1 * m / (sqrt(v/bc2) + eps) with one sqrt and one divide
    root_bc2 = math.sqrt(bc2)
    step = np.sqrt(v, out=g)
    step += ADAM_EPS * root_bc2
    np.divide(m, step, out=step)
    step *= lr * root_bc2 / bc1
    state.flat -= step
    return math.sqrt(float(step @ step))


# ----------------------------------------------------------------------
# checkpoints
# ----------------------------------------------------------------------

CHECKPOINT_FORMAT = "gridrelay-net-1"


def save_checkpoint(state: NetworkState, spec: NetworkSpec, path) -> None:
    """Write parameters + optimizer state as one .npz.

    Layout (format ``gridrelay-net-1``): a JSON manifest carrying the
    format tag, the head, the parameter names/shapes and the step count,
    plus three flat float64 vectors (params, first/second moments) in
    manifest order.
    """
    import json as _json

    manifest = {
        "format": CHECKPOINT_FORMAT,
        "head": spec.head,
        "params": [[name, list(shape)] for name, shape in spec.param_shapes()],
        "t": state.t,
    }
    np.savez(
        path,
        manifest=np.frombuffer(_json.dumps(manifest).encode("utf-8"), dtype=np.uint8),
        flat=state.flat,
        m=state.m,
        v=state.v,
    )


def load_checkpoint(path, spec: NetworkSpec) -> NetworkState:
    """Read a checkpoint written by :func:`save_checkpoint`."""
    import json as _json

    with np.load(path) as data:
        manifest = _json.loads(bytes(data["manifest"]).decode("utf-8"))
        if manifest.get("format") != CHECKPOINT_FORMAT:
            raise ValueError(f"unsupported checkpoint format {manifest.get('format')!r}")
        expected = [[name, list(shape)] for name, shape in spec.param_shapes()]
        if manifest["params"] != expected:
            raise ValueError("checkpoint shape manifest does not match the network spec")
        state = NetworkState.__new__(NetworkState)
        state._shapes = [tuple(shape) for _, shape in manifest["params"]]
        state.flat = np.array(data["flat"], dtype=np.float64)
        state.params = state._views(state.flat)
        state.m = np.array(data["m"], dtype=np.float64)
        state.v = np.array(data["v"], dtype=np.float64)
        state.t = int(manifest["t"])
        return state


# ----------------------------------------------------------------------
# finite-difference verification
# ----------------------------------------------------------------------

@dataclass
class GradientReport:
    """Per-parameter agreement between analytic and numeric gradients."""

    head: str
    tolerance: float
    max_rel_error: dict[str, float] = field(default_factory=dict)
    failed: list[str] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return not self.failed

    @property
    def worst(self) -> tuple[str, float]:
        name = max(self.max_rel_error, key=self.max_rel_error.get)
        return name, self.max_rel_error[name]

    def summary(self) -> str:
        lines = [f"head={self.head} tolerance={self.tolerance:g}"]
        for name, err in self.max_rel_error.items():
            status = "ok" if err < self.tolerance else "FAIL"
            lines.append(f"  {name:<10} max_rel_err={err:.3e}  {status}")
        lines.append("PASS" if self.passed else f"FAIL: {', '.join(self.failed)}")
        return "\n".join(lines)


def gradient_check(
    spec: NetworkSpec,
    seed: int,
    tolerance: float = 1e-4,
    batch: int = 2,
    h: float = 1e-5,
) -> GradientReport:
    """Compare analytic gradients to central finite differences.

    Checks a random scalar projection of both head outputs on a random
    input batch, element by element over every parameter array. Relative
    error is |g_a - g_n| / max(|g_a|, |g_n|, 1e-8).
    """
    if tolerance <= 0:
        raise ValueError("tolerance must be positive")
    rng = np.random.default_rng(seed)
    state = init_network(spec, rng, scale=0.5, head_gain=1.0)
    images = rng.standard_normal((batch, *spec.input_hw, spec.in_channels))
    scalars = rng.standard_normal((batch, spec.n_scalars))
    o1, o2, _ = forward(state, spec, images, scalars)
    u1 = rng.standard_normal(o1.shape)
    u2 = rng.standard_normal(o2.shape)

    def loss() -> float:
        a, b, _ = forward(state, spec, images, scalars)
        return float(np.vdot(u1, a) + np.vdot(u2, b))

    _, _, cache = forward(state, spec, images, scalars)
    analytic = backward(state, spec, cache, u1, u2)

    report = GradientReport(head=spec.head, tolerance=tolerance)
    for name, param, ga in zip(spec.param_names(), state.params, analytic):
        flat = param.reshape(-1)
        ga_flat = ga.reshape(-1)
        worst = 0.0
        for k in range(flat.size):
            orig = flat[k]
            flat[k] = orig + h
            up = loss()
            flat[k] = orig - h
            down = loss()
            flat[k] = orig
            gn = (up - down) / (2.0 * h)
            rel = abs(ga_flat[k] - gn) / max(abs(ga_flat[k]), abs(gn), 1e-8)
            if rel > worst:
                worst = rel
        report.max_rel_error[name] = worst
        if worst >= tolerance:
            report.failed.append(name)
    return report
