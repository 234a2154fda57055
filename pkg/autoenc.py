import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

from config import Config
from core import SubsequenceSet
from errors import DataError, InvariantViolation, ShapeError, ValidationError

logger = logging.getLogger(__name__)

FULLY_CONNECTED = 'fc'
CONVOLUTIONAL = 'conv'
ARCH_KINDS = (FULLY_CONNECTED, CONVOLUTIONAL)

MODEL_MAGIC = b'LSAE'
MODEL_VERSION = 1
MODEL_HEADER = struct.Struct('<4sHBIIIQ')
KIND_CODES = {FULLY_CONNECTED: 0, CONVOLUTIONAL: 1}


def _ceil_div(a: int, b: int) -> int:
    return -(-a // b)


@dataclass(frozen=True)
class LayerSpec:
    """One step of the forward pass.

    kind is one of dense, conv, convT, flatten, reshape. A transposed dense
    layer reuses another layer's weight matrix as W^T (weight tying).
    """
    name: str
    kind: str
    in_shape: Tuple[int, ...]
    out_shape: Tuple[int, ...]
    activation: str = 'linear'
    weight: Optional[str] = None
    bias: Optional[str] = None
    transposed: bool = False
    kernel: int = 0
    stride: int = 1
    padding: int = 0
    output_padding: int = 0


@dataclass(frozen=True)
class AeArchitecture:
    kind: str
    nc: int
    nw: int
    latent_dim: int
    layers: Tuple[LayerSpec, ...]
    n_encoder: int
    params: Tuple[Tuple[str, Tuple[int, ...], int], ...]  # (name, shape, fan_in)

    @property
    def encoder(self) -> Tuple[LayerSpec, ...]:
        return self.layers[:self.n_encoder]

    @property
    def decoder(self) -> Tuple[LayerSpec, ...]:
        return self.layers[self.n_encoder:]

    @property
    def param_count(self) -> int:
        return int(sum(np.prod(shape) for _, shape, _ in self.params))

    def offsets(self) -> Dict[str, Tuple[int, Tuple[int, ...]]]:
        out = {}
        pos = 0
        for name, shape, _ in self.params:
            out[name] = (pos, shape)
            pos += int(np.prod(shape))
        return out


def _dense(name, n_in, n_out, activation, weight=None, transposed=False):
    return LayerSpec(name, 'dense', (n_in,), (n_out,), activation,
                     weight or f"{name}.weight", f"{name}.bias", transposed)


def build_arch(kind: str, nc: int, nw: int) -> AeArchitecture:
    """Layer plan for the fully connected or convolutional autoencoder.

    fc:   d = nc*nw -> ceil(d/2) -> ceil(d/4) -> ceil(d/10), sigmoid units,
          tied decoder with a linear output layer.
    conv: two stride-2 convolutions (nc -> 2nc -> 4nc channels), flatten to
          L = nc*nw, dense L -> ceil(L/2) -> ceil(L/4) -> ceil(L/6), ReLU units,
          tied dense decoder, two stride-2 transposed convolutions back to
          nc x nw with a linear output. Requires nw divisible by 4.
    """
    if kind not in ARCH_KINDS:
        raise ValidationError(f"unknown architecture '{kind}', expected one of {ARCH_KINDS}")
    if nc < 1 or nw < 1:
        raise ValidationError(f"architecture needs nc >= 1 and nw >= 1, got nc={nc}, nw={nw}")

    d = nc * nw
    if kind == FULLY_CONNECTED:
        h1, h2, z = _ceil_div(d, 2), _ceil_div(d, 4), _ceil_div(d, 10)
        encoder = [
            LayerSpec('flatten', 'flatten', (nc, nw), (d,)),
            _dense('enc1', d, h1, 'sigmoid'),
            _dense('enc2', h1, h2, 'sigmoid'),
            _dense('enc3', h2, z, 'sigmoid'),
        ]
        decoder = [
            _dense('dec3', z, h2, 'sigmoid', 'enc3.weight', True),
            _dense('dec2', h2, h1, 'sigmoid', 'enc2.weight', True),
            _dense('dec1', h1, d, 'linear', 'enc1.weight', True),
            LayerSpec('reshape', 'reshape', (d,), (nc, nw)),
        ]
    else:
        if nw % 4 != 0:
            raise ValidationError(
                f"convolutional architecture needs nw divisible by 4 (two stride-2 layers), got nw={nw}")
        q = nw // 4
        f1, f2, z = _ceil_div(d, 2), _ceil_div(d, 4), _ceil_div(d, 6)
        encoder = [
            LayerSpec('conv1', 'conv', (nc, nw), (2 * nc, 2 * q), 'relu', 'conv1.weight', 'conv1.bias',
                      kernel=3, stride=2, padding=1),
            LayerSpec('conv2', 'conv', (2 * nc, 2 * q), (4 * nc, q), 'relu', 'conv2.weight', 'conv2.bias',
                      kernel=3, stride=2, padding=1),
            LayerSpec('flatten', 'flatten', (4 * nc, q), (d,)),
            _dense('fc1', d, f1, 'relu'),
            _dense('fc2', f1, f2, 'relu'),
            _dense('fc3', f2, z, 'relu'),
        ]
        decoder = [
            _dense('dfc3', z, f2, 'relu', 'fc3.weight', True),
            _dense('dfc2', f2, f1, 'relu', 'fc2.weight', True),
            _dense('dfc1', f1, d, 'relu', 'fc1.weight', True),
            LayerSpec('reshape', 'reshape', (d,), (4 * nc, q)),
            LayerSpec('deconv2', 'convT', (4 * nc, q), (2 * nc, 2 * q), 'relu', 'deconv2.weight', 'deconv2.bias',
                      kernel=3, stride=2, padding=1, output_padding=1),
            LayerSpec('deconv1', 'convT', (2 * nc, 2 * q), (nc, nw), 'linear', 'deconv1.weight', 'deconv1.bias',
                      kernel=3, stride=2, padding=1, output_padding=1),
        ]

    params = []
    for layer in encoder + decoder:
        if layer.kind == 'dense':
            n_in, n_out = layer.in_shape[0], layer.out_shape[0]
            if not layer.transposed:
                params.append((layer.weight, (n_out, n_in), n_in))
            params.append((layer.bias, (n_out,), n_in))
        elif layer.kind == 'conv':
            c_in, c_out = layer.in_shape[0], layer.out_shape[0]
            params.append((layer.weight, (c_out, c_in, layer.kernel), c_in * layer.kernel))
            params.append((layer.bias, (c_out,), c_in * layer.kernel))
        elif layer.kind == 'convT':
            c_in, c_out = layer.in_shape[0], layer.out_shape[0]
            params.append((layer.weight, (c_in, c_out, layer.kernel), c_out * layer.kernel))
            params.append((layer.bias, (c_out,), c_out * layer.kernel))

    latent = z
    return AeArchitecture(kind, nc, nw, latent, tuple(encoder + decoder), len(encoder), tuple(params))


@dataclass(eq=False)
class AeModel:
    """Architecture plus a flat float64 parameter store; weights are addressed through named views"""
    arch: AeArchitecture
    weights: np.ndarray
    trained_epochs: int = 0
    best_val_loss: float = float('inf')
    seed: int = 0
    history: List[Dict[str, float]] = field(default_factory=list)

    def __post_init__(self):
        if self.weights.shape != (self.arch.param_count,):
            raise ShapeError(f"parameter store has {self.weights.size} values, "
                             f"architecture needs {self.arch.param_count}")

    def views(self) -> Dict[str, np.ndarray]:
        return _views(self.arch, self.weights)

    def view(self, name: str) -> np.ndarray:
        return self.views()[name]


def _views(arch: AeArchitecture, flat: np.ndarray) -> Dict[str, np.ndarray]:
    out = {}
    for name, (pos, shape) in arch.offsets().items():
        out[name] = flat[pos:pos + int(np.prod(shape))].reshape(shape)
    return out


def init_model(arch: AeArchitecture, seed: int = 0) -> AeModel:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) initialization, seeded"""
    rng = np.random.default_rng(seed)
    chunks = []
    for _, shape, fan_in in arch.params:
        bound = 1.0 / np.sqrt(fan_in)
        chunks.append(rng.uniform(-bound, bound, size=int(np.prod(shape))))
    return AeModel(arch, np.concatenate(chunks), seed=seed)


# ---------------------------------------------------------------------------
# Layer kernels
# ---------------------------------------------------------------------------

def _activate(kind: str, pre: np.ndarray) -> np.ndarray:
    if kind == 'sigmoid':
        return expit(pre)
    if kind == 'relu':
        return np.maximum(pre, 0.0)
    return pre


def _activation_grad(kind: str, pre: np.ndarray, out: np.ndarray, grad: np.ndarray) -> np.ndarray:
    if kind == 'sigmoid':
        return grad * out * (1.0 - out)
    if kind == 'relu':
        return grad * (pre > 0.0)
    return grad


def _ordered_matmul(x: np.ndarray, m: np.ndarray) -> np.ndarray:
    """x @ m with products summed in a fixed order, so each row's result ignores the batch size"""
    acc = x[:, 0:1] * m[0]
    for i in range(1, m.shape[0]):
        acc += x[:, i:i + 1] * m[i]
    return acc


def _conv_out_len(n_in: int, kernel: int, stride: int, padding: int) -> int:
    return (n_in + 2 * padding - kernel) // stride + 1


def _conv_windows(x: np.ndarray, kernel: int, stride: int, padding: int) -> np.ndarray:
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding)))
    return sliding_window_view(xp, kernel, axis=2)[:, :, ::stride, :]


def _conv_forward(x, w, b, stride, padding, ordered):
    win = _conv_windows(x, w.shape[2], stride, padding)  # (B, Cin, Lout, K)
    if ordered:
        acc = None
        for c in range(w.shape[1]):
            for k in range(w.shape[2]):
                term = win[:, c, np.newaxis, :, k] * w[np.newaxis, :, c, k, np.newaxis]
                acc = term if acc is None else acc + term
        pre = acc
    else:
        pre = np.einsum('bclk,ock->bol', win, w)
    return pre + b[np.newaxis, :, np.newaxis]


def _conv_backward(x, w, grad, stride, padding):
    k_size = w.shape[2]
    win = _conv_windows(x, k_size, stride, padding)
    gw = np.einsum('bclk,bol->ock', win, grad)
    gb = grad.sum(axis=(0, 2))
    n_in = x.shape[2]
    n_out = grad.shape[2]
    gxp = np.zeros((x.shape[0], x.shape[1], n_in + 2 * padding))
    for k in range(k_size):
        gxp[:, :, k:k + stride * (n_out - 1) + 1:stride] += np.einsum('bol,oc->bcl', grad, w[:, :, k])
    return gxp[:, :, padding:padding + n_in], gw, gb


def _convT_lengths(n_in, kernel, stride, padding, output_padding):
    n_out = (n_in - 1) * stride - 2 * padding + kernel + output_padding
    full = max((n_in - 1) * stride + kernel, padding + n_out)
    return n_out, full


def _convT_forward(x, w, b, stride, padding, output_padding, ordered):
    batch, c_in, n_in = x.shape
    c_out, k_size = w.shape[1], w.shape[2]
    n_out, full = _convT_lengths(n_in, k_size, stride, padding, output_padding)
    y = np.zeros((batch, c_out, full))
    span = stride * (n_in - 1) + 1
    for k in range(k_size):
        if ordered:
            for c in range(c_in):
                y[:, :, k:k + span:stride] += x[:, c, np.newaxis, :] * w[np.newaxis, c, :, k, np.newaxis]
        else:
            y[:, :, k:k + span:stride] += np.einsum('bcl,co->bol', x, w[:, :, k])
    return y[:, :, padding:padding + n_out] + b[np.newaxis, :, np.newaxis]


def _convT_backward(x, w, grad, stride, padding, output_padding):
    batch, c_in, n_in = x.shape
    c_out, k_size = w.shape[1], w.shape[2]
    n_out, full = _convT_lengths(n_in, k_size, stride, padding, output_padding)
    gfull = np.zeros((batch, c_out, full))
    gfull[:, :, padding:padding + n_out] = grad
    span = stride * (n_in - 1) + 1
    gx = np.zeros_like(x)
    gw = np.zeros_like(w)
    for k in range(k_size):
        g = gfull[:, :, k:k + span:stride]
        gx += np.einsum('bol,co->bcl', g, w[:, :, k])
        gw[:, :, k] = np.einsum('bcl,bol->co', x, g)
    gb = grad.sum(axis=(0, 2))
    return gx, gw, gb


def _layer_forward(layer: LayerSpec, views, x, ordered):
    if layer.kind == 'flatten':
        return x.reshape(len(x), -1), None
    if layer.kind == 'reshape':
        return x.reshape((len(x),) + layer.out_shape), None
    w = views[layer.weight]
    b = views[layer.bias]
    if layer.kind == 'dense':
        m = w if layer.transposed else w.T  # (in, out)
        pre = (_ordered_matmul(x, m) if ordered else x @ m) + b
    elif layer.kind == 'conv':
        pre = _conv_forward(x, w, b, layer.stride, layer.padding, ordered)
    else:
        pre = _convT_forward(x, w, b, layer.stride, layer.padding, layer.output_padding, ordered)
    out = _activate(layer.activation, pre)
    return out, (x, pre, out)


def _layer_backward(layer: LayerSpec, views, grads, cache, grad_out):
    if layer.kind in ('flatten', 'reshape'):
        return grad_out.reshape((len(grad_out),) + layer.in_shape)
    x, pre, out = cache
    g = _activation_grad(layer.activation, pre, out, grad_out)
    w = views[layer.weight]
    if layer.kind == 'dense':
        m = w if layer.transposed else w.T
        gm = x.T @ g
        grads[layer.weight] += gm if layer.transposed else gm.T
        grads[layer.bias] += g.sum(axis=0)
        return g @ m.T
    if layer.kind == 'conv':
        gx, gw, gb = _conv_backward(x, w, g, layer.stride, layer.padding)
    else:
        gx, gw, gb = _convT_backward(x, w, g, layer.stride, layer.padding, layer.output_padding)
    grads[layer.weight] += gw
    grads[layer.bias] += gb
    return gx


def _run(layers, views, x, ordered=False):
    caches = []
    for layer in layers:
        x, cache = _layer_forward(layer, views, x, ordered)
        caches.append(cache)
    return x, caches


def loss_and_grad(arch: AeArchitecture, weights: np.ndarray, batch: np.ndarray) -> Tuple[float, np.ndarray]:
    """MSE reconstruction loss of a (B, nc, nw) batch and its gradient w.r.t. the flat parameters"""
    views = _views(arch, weights)
    recon, caches = _run(arch.layers, views, batch)
    diff = recon - batch
    loss = float(np.mean(diff * diff))
    flat_grad = np.zeros_like(weights)
    grads = _views(arch, flat_grad)
    g = 2.0 * diff / diff.size
    for layer, cache in zip(reversed(arch.layers), reversed(caches)):
        g = _layer_backward(layer, views, grads, cache, g)
    return loss, flat_grad


def reconstruction_loss(arch: AeArchitecture, weights: np.ndarray, windows: np.ndarray,
                        chunk: int = 1024) -> float:
    """Mean squared reconstruction error over all windows, evaluated in chunks"""
    views = _views(arch, weights)
    total = 0.0
    for start in range(0, len(windows), chunk):
        part = windows[start:start + chunk]
        recon, _ = _run(arch.layers, views, part)
        total += float(np.sum((recon - part) ** 2))
    return total / windows.size


def _relu_pattern(arch: AeArchitecture, weights: np.ndarray, batch: np.ndarray) -> List[np.ndarray]:
    _, caches = _run(arch.layers, _views(arch, weights), batch)
    return [cache[1] > 0.0 for layer, cache in zip(arch.layers, caches)
            if cache is not None and layer.activation == 'relu']


# ---------------------------------------------------------------------------
# Inference
# ---------------------------------------------------------------------------

def _as_windows(arch: AeArchitecture, windows: Union[np.ndarray, SubsequenceSet]) -> np.ndarray:
    if isinstance(windows, SubsequenceSet):
        windows = windows.windows
    x = np.ascontiguousarray(windows, dtype=np.float64)
    if x.ndim != 3 or x.shape[1:] != (arch.nc, arch.nw):
        raise ShapeError(f"expected windows of shape (*, {arch.nc}, {arch.nw}), got {x.shape}")
    return x


def encode_batch(model: AeModel, windows, chunk: int = 4096) -> np.ndarray:
    """Latent vectors of a (B, nc, nw) batch; each row is independent of the others"""
    x = _as_windows(model.arch, windows)
    views = model.views()
    parts = [_run(model.arch.encoder, views, x[s:s + chunk], ordered=True)[0]
             for s in range(0, len(x), chunk)]
    if not parts:
        return np.empty((0, model.arch.latent_dim))
    return np.vstack(parts)


def decode_batch(model: AeModel, latents: np.ndarray) -> np.ndarray:
    z = np.ascontiguousarray(latents, dtype=np.float64)
    if z.ndim != 2 or z.shape[1] != model.arch.latent_dim:
        raise ShapeError(f"expected latent vectors of shape (*, {model.arch.latent_dim}), got {z.shape}")
    out, _ = _run(model.arch.decoder, model.views(), z, ordered=True)
    return out


def encode(model: AeModel, window: np.ndarray) -> np.ndarray:
    """psi: one nc x nw window to its latent vector"""
    window = np.asarray(window, dtype=np.float64)
    if window.shape != (model.arch.nc, model.arch.nw):
        raise ShapeError(f"expected a window of shape ({model.arch.nc}, {model.arch.nw}), got {window.shape}")
    return encode_batch(model, window[np.newaxis])[0]


def decode(model: AeModel, latent: np.ndarray) -> np.ndarray:
    """phi: one latent vector back to an nc x nw window"""
    latent = np.asarray(latent, dtype=np.float64)
    if latent.shape != (model.arch.latent_dim,):
        raise ShapeError(f"expected a latent vector of length {model.arch.latent_dim}, got {latent.shape}")
    return decode_batch(model, latent[np.newaxis])[0]


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

@dataclass
class TrainConfig:
    learning_rate: float = Config.AE_LEARNING_RATE
    beta1: float = 0.9
    beta2: float = 0.999
    eps_adam: float = 1e-8
    batch_size: int = Config.AE_BATCH_SIZE
    max_epochs: int = Config.AE_MAX_EPOCHS
    patience: int = Config.AE_PATIENCE
    val_fraction: float = Config.AE_VAL_FRACTION
    seed: int = Config.SEED

    def __post_init__(self):
        if not 0.0 < self.val_fraction < 1.0:
            raise ValidationError(f"val_fraction must lie in (0, 1), got {self.val_fraction}")
        for name in ('learning_rate', 'eps_adam'):
            if not getattr(self, name) > 0:
                raise ValidationError(f"{name} must be positive, got {getattr(self, name)}")
        for name in ('beta1', 'beta2'):
            if not 0.0 <= getattr(self, name) < 1.0:
                raise ValidationError(f"{name} must lie in [0, 1), got {getattr(self, name)}")
        for name in ('batch_size', 'max_epochs', 'patience'):
            if getattr(self, name) < 1:
                raise ValidationError(f"{name} must be at least 1, got {getattr(self, name)}")


class Adam:
    """Bias-corrected Adam over a flat parameter vector"""

    def __init__(self, size: int, learning_rate: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.learning_rate = learning_rate
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = np.zeros(size)
        self.v = np.zeros(size)
        self.t = 0

    def step(self, params: np.ndarray, grad: np.ndarray):
        """Update params in place"""
        self.t += 1
        self.m = self.beta1 * self.m + (1.0 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1.0 - self.beta2) * grad * grad
        m_hat = self.m / (1.0 - self.beta1 ** self.t)
        v_hat = self.v / (1.0 - self.beta2 ** self.t)
        params -= self.learning_rate * m_hat / (np.sqrt(v_hat) + self.eps)


def _check_finite(value: float, what: str, epoch: int):
    if not np.isfinite(value):
        raise InvariantViolation(f"{what} became non-finite at epoch {epoch}")


def train(model: AeModel, windows, cfg: Optional[TrainConfig] = None) -> AeModel:
    """Mini-batch Adam on the reconstruction MSE with a seeded train/validation split.

    The returned model carries the parameters with the lowest validation loss.
    Training stops after max_epochs or after `patience` epochs without a
    validation improvement. history[0] holds the losses before any update.
    """
    cfg = cfg or TrainConfig()
    arch = model.arch
    x = _as_windows(arch, windows)
    n = len(x)
    if n < 2:
        raise ValidationError(f"insufficient data: training needs at least 2 windows, got {n}")

    rng = np.random.default_rng(cfg.seed)
    perm = rng.permutation(n)
    n_val = min(n - 1, max(1, int(round(n * cfg.val_fraction))))
    val_x = x[np.sort(perm[:n_val])]
    train_x = x[np.sort(perm[n_val:])]

    weights = model.weights.copy()
    optimizer = Adam(weights.size, cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.eps_adam)

    train_loss = reconstruction_loss(arch, weights, train_x)
    val_loss = reconstruction_loss(arch, weights, val_x)
    _check_finite(train_loss, 'training loss', 0)
    history = [{'epoch': 0, 'train_loss': train_loss, 'val_loss': val_loss}]
    best_val = val_loss
    best_weights = weights.copy()
    stale = 0
    epoch = 0
    logger.info(f"Training {arch.kind} autoencoder on {len(train_x)} windows ({n_val} held out), "
                f"{arch.param_count} parameters")

    for epoch in range(1, cfg.max_epochs + 1):
        order = rng.permutation(len(train_x))
        for start in range(0, len(order), cfg.batch_size):
            batch = train_x[order[start:start + cfg.batch_size]]
            loss, grad = loss_and_grad(arch, weights, batch)
            _check_finite(loss, 'batch loss', epoch)
            optimizer.step(weights, grad)

        train_loss = reconstruction_loss(arch, weights, train_x)
        val_loss = reconstruction_loss(arch, weights, val_x)
        _check_finite(train_loss, 'training loss', epoch)
        _check_finite(val_loss, 'validation loss', epoch)
        history.append({'epoch': epoch, 'train_loss': train_loss, 'val_loss': val_loss})
        logger.info(f"Epoch {epoch}/{cfg.max_epochs}: train loss {train_loss:.6g}, val loss {val_loss:.6g}")

        if val_loss < best_val:
            best_val = val_loss
            best_weights = weights.copy()
            stale = 0
        else:
            stale += 1
            if stale >= cfg.patience:
                logger.info(f"Early stopping after {epoch} epochs (best val loss {best_val:.6g})")
                break

    return AeModel(arch, best_weights, trained_epochs=epoch, best_val_loss=best_val,
                   seed=cfg.seed, history=history)


def gradient_check(model: AeModel, window: np.ndarray, tolerance: float = 1e-4, h: float = 1e-5,
                   coords_per_tensor: int = 200, bias_only: bool = False, seed: int = 0) -> Dict:
    """Compare backpropagated gradients with central finite differences.

    Up to `coords_per_tensor` random coordinates of every parameter tensor are
    perturbed by +-h. Coordinates whose perturbation flips a ReLU unit are
    skipped since the loss is not differentiable there. Relative error is
    |a - n| / max(|a|, |n|, 1e-6). Failure is reported, never raised.
    """
    arch = model.arch
    batch = _as_windows(arch, np.asarray(window, dtype=np.float64)[np.newaxis])
    weights = model.weights.copy()
    _, analytic = loss_and_grad(arch, weights, batch)
    base_pattern = _relu_pattern(arch, weights, batch)
    rng = np.random.default_rng(seed)

    per_tensor = {}
    max_rel = 0.0
    max_abs = 0.0
    checked = 0
    skipped = 0
    for name, (pos, shape) in arch.offsets().items():
        if bias_only and not name.endswith('.bias'):
            continue
        size = int(np.prod(shape))
        picks = rng.choice(size, size=min(size, coords_per_tensor), replace=False)
        worst = 0.0
        for p in np.sort(picks):
            idx = pos + int(p)
            original = weights[idx]
            weights[idx] = original + h
            plus, _ = loss_and_grad(arch, weights, batch)
            pattern_plus = _relu_pattern(arch, weights, batch)
            weights[idx] = original - h
            minus, _ = loss_and_grad(arch, weights, batch)
            pattern_minus = _relu_pattern(arch, weights, batch)
            weights[idx] = original
            if not all(np.array_equal(a, b) and np.array_equal(a, c)
                       for a, b, c in zip(base_pattern, pattern_plus, pattern_minus)):
                skipped += 1
                continue
            numeric = (plus - minus) / (2.0 * h)
            a = analytic[idx]
            abs_err = abs(a - numeric)
            rel = abs_err / max(abs(a), abs(numeric), 1e-6)
            worst = max(worst, rel)
            max_abs = max(max_abs, abs_err)
            checked += 1
        per_tensor[name] = worst
        max_rel = max(max_rel, worst)

    report = {
        'max_rel_error': max_rel,
        'max_abs_error': max_abs,
        'checked': checked,
        'skipped_kinks': skipped,
        'per_tensor': per_tensor,
        'tolerance': tolerance,
        'passed': max_rel < tolerance,
    }
    level = logging.INFO if report['passed'] else logging.WARNING
    logger.log(level, f"Gradient check on {checked} coordinates: max relative error {max_rel:.3g}")
    return report


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------

def model_bytes(model: AeModel) -> bytes:
    arch = model.arch
    header = MODEL_HEADER.pack(MODEL_MAGIC, MODEL_VERSION, KIND_CODES[arch.kind], arch.nc, arch.nw,
                               arch.latent_dim, arch.param_count)
    return header + model.weights.astype('<f8').tobytes()


def save_model(model: AeModel, path: Union[str, Path]):
    """Write the LSAE file: little-endian header followed by the f64 parameter vector"""
    Path(path).write_bytes(model_bytes(model))
    logger.info(f"Saved {model.arch.kind} model ({model.arch.param_count} parameters) to {path}")


def load_model(path: Union[str, Path]) -> AeModel:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as e:
        raise DataError(f"cannot read model file: {e}", path)
    if len(raw) < MODEL_HEADER.size:
        raise DataError("truncated model header", path)
    magic, version, code, nc, nw, latent, count = MODEL_HEADER.unpack_from(raw)
    if magic != MODEL_MAGIC:
        raise DataError(f"bad magic {magic!r}, expected {MODEL_MAGIC!r}", path)
    if version != MODEL_VERSION:
        raise DataError(f"unsupported model format version {version}", path)
    kinds = {v: k for k, v in KIND_CODES.items()}
    if code not in kinds:
        raise DataError(f"unknown architecture code {code}", path)
    try:
        arch = build_arch(kinds[code], nc, nw)
    except ValidationError as e:
        raise DataError(f"invalid architecture descriptor: {e}", path)
    if arch.latent_dim != latent or arch.param_count != count:
        raise DataError(f"descriptor mismatch: latent {latent}, {count} parameters for a "
                        f"{arch.kind} nc={nc} nw={nw} model", path)
    body = raw[MODEL_HEADER.size:]
    if len(body) != 8 * count:
        raise DataError(f"expected {8 * count} parameter bytes, found {len(body)}", path)
    weights = np.frombuffer(body, dtype='<f8').astype(np.float64)
    return AeModel(arch, weights)
