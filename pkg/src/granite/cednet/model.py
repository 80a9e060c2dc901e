"""The encoder-decoder network: architecture, initialisation, forward/backward."""
import json
from pathlib import Path

import numpy as np

from .. import tensorio
from .layers import (LayerDimError, LayerSpec, activate, activation_grad, conv2d,
                     conv2d_backward, maxpool2d, maxpool2d_backward, tconv2d,
                     tconv2d_backward)

INPUT_SIZE = 128
INPUT_CHANNELS = 4


def architecture(r=1):
    """Layer stack for filter multiplier ``r`` (r=1 is the reference network)."""
    return [
        LayerSpec("conv", 8, 8, 64 * r, "relu"),
        LayerSpec("maxpool", 2, 2),
        LayerSpec("conv", 3, 1, 16 * r, "relu"),
        LayerSpec("maxpool", 2, 1),
        LayerSpec("tconv", 2, 2, 64 * r, "relu"),
        LayerSpec("tconv", 3, 1, 8 * r, "relu"),
        LayerSpec("tconv", 10, 2, 1, "tanh"),
    ]


class CedModel:
    """Ordered layer specs plus one ``(w, b)`` pair per learnable layer."""

    def __init__(self, specs=None, in_channels=INPUT_CHANNELS, input_size=INPUT_SIZE,
                 seed=0, dtype=np.float32):
        self.specs = list(architecture() if specs is None else specs)
        self.in_channels = in_channels
        self.input_size = input_size
        self.seed = seed
        self.dtype = np.dtype(dtype)
        self.params = init_params(self, seed)

    # ``params`` holds None for maxpool layers
    def parameters(self):
        return [p for pair in self.params if pair is not None for p in pair]

    def set_parameters(self, flat):
        it = iter(flat)
        self.params = [None if pair is None else (next(it), next(it)) for pair in self.params]

    def copy(self):
        other = CedModel.__new__(CedModel)
        other.__dict__.update(self.__dict__)
        other.params = [None if p is None else (p[0].copy(), p[1].copy()) for p in self.params]
        return other

    def astype(self, dtype):
        other = self.copy()
        other.dtype = np.dtype(dtype)
        other.params = [None if p is None else (p[0].astype(dtype), p[1].astype(dtype))
                        for p in other.params]
        return other

    def dims_chain(self, size=None):
        """Spatial size after every layer for a square input."""
        n = self.input_size if size is None else size
        chain = [n]
        for idx, spec in enumerate(self.specs):
            n = spec.out_size(n, f"layer {idx + 1} ({spec.kind})")
            chain.append(n)
        return chain

    def architecture_dict(self):
        return {"layers": [s.to_dict() for s in self.specs], "in_channels": self.in_channels,
                "input_size": self.input_size}


def init_params(model, seed):
    """He-uniform weights (variance 2/fan_in), zero biases."""
    rng = np.random.default_rng(seed)
    params = []
    c_in = model.in_channels
    for spec in model.specs:
        if spec.kind == "maxpool":
            params.append(None)
            continue
        fan_in = spec.kernel * spec.kernel * c_in
        lim = np.sqrt(6.0 / fan_in)
        w = rng.uniform(-lim, lim, (spec.kernel, spec.kernel, c_in, spec.filters))
        params.append((w.astype(model.dtype), np.zeros(spec.filters, dtype=model.dtype)))
        c_in = spec.filters
    return params


def forward(model, x, keep=False):
    """Run the stack on an NHWC batch (a single HWC image is promoted).

    With ``keep=True`` also returns the per-layer cache for :func:`backward`.
    """
    a = np.asarray(x, dtype=model.dtype)
    single = a.ndim == 3
    if single:
        a = a[None]
    cache = []
    for idx, (spec, pair) in enumerate(zip(model.specs, model.params)):
        name = f"layer {idx + 1} ({spec.kind})"
        if spec.kind == "maxpool":
            out, arg = maxpool2d(a, spec.kernel, spec.stride, name)
            cache.append((a.shape, arg))
            a = out
            continue
        w, b = pair
        if spec.kind == "conv":
            z = conv2d(a, w, b, spec.stride, name)
        else:
            z = tconv2d(a, w, b, spec.stride, name)
        out = activate(z, spec.activation)
        cache.append((a, z, out))
        a = out
    if single:
        a = a[0]
    return (a, cache) if keep else a


def loss_mse(pred, truth):
    """Per-sample sum of squared errors averaged over the batch."""
    d = np.asarray(pred, dtype=np.float64) - np.asarray(truth, dtype=np.float64)
    if d.ndim == 3:
        d = d[None]
    return float((d * d).reshape(d.shape[0], -1).sum(axis=1).mean())


def per_pixel(mse, shape=(32, 32)):
    return mse / float(np.prod(shape))


def backward(model, cache, pred, truth):
    """Gradients of :func:`loss_mse` w.r.t. every parameter, in ``parameters()`` order."""
    pred = np.asarray(pred)
    if pred.ndim == 3:
        pred = pred[None]
        truth = np.asarray(truth)[None]
    da = (2.0 / pred.shape[0]) * (pred - np.asarray(truth, dtype=pred.dtype))
    grads = [None] * len(model.specs)
    for idx in range(len(model.specs) - 1, -1, -1):
        spec = model.specs[idx]
        if spec.kind == "maxpool":
            shape, arg = cache[idx]
            da = maxpool2d_backward(shape, spec.kernel, spec.stride, arg, da)
            continue
        a_in, z, out = cache[idx]
        w, _ = model.params[idx]
        dz = activation_grad(z, out, spec.activation, da)
        if spec.kind == "conv":
            da, dw, db = conv2d_backward(a_in, w, spec.stride, dz, need_dx=idx > 0)
        else:
            da, dw, db = tconv2d_backward(a_in, w, spec.stride, dz, need_dy=idx > 0)
        grads[idx] = (dw.astype(model.dtype, copy=False), db.astype(model.dtype, copy=False))
    return [g for pair in grads if pair is not None for g in pair]


def loss_and_grad(model, x, y):
    pred, cache = forward(model, x, keep=True)
    return loss_mse(pred, y), backward(model, cache, pred, y)


def predict(model, x, batch=100):
    x = np.asarray(x)
    return np.concatenate([forward(model, x[i:i + batch]) for i in range(0, len(x), batch)])


def evaluate_mse(model, x, y, batch=100):
    """Dataset MSE (sum over pixels, mean over samples)."""
    p = predict(model, x, batch).astype(np.float64)
    d = p - y
    return float((d * d).reshape(len(d), -1).sum(axis=1).mean())


# --- checkpoints -------------------------------------------------------------------

def save_checkpoint(model, path, **meta):
    """Parameter bundle at ``path`` plus a JSON sidecar at ``path + '.json'``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tensorio.write_bundle(path, model.parameters())
    side = {"architecture": model.architecture_dict(), "seed": int(model.seed),
            "dtype": model.dtype.name}
    side.update(meta)
    Path(str(path) + ".json").write_text(json.dumps(side, indent=1, sort_keys=True))


def load_checkpoint(path):
    path = Path(path)
    side = json.loads(Path(str(path) + ".json").read_text())
    arch = side["architecture"]
    specs = [LayerSpec(**d) for d in arch["layers"]]
    model = CedModel(specs, arch["in_channels"], arch["input_size"], side.get("seed", 0),
                     np.dtype(side.get("dtype", "float32")))
    params = tensorio.read_bundle(path)
    expected = [p.shape for p in model.parameters()]
    if [p.shape for p in params] != expected:
        raise LayerDimError(f"{path}: parameter shapes do not match the architecture")
    model.set_parameters([p.astype(model.dtype) for p in params])
    return model, side
