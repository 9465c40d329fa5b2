"""Minimal differentiable building blocks: dense layers, softmax, a small
convolutional feature encoder, bilinear map sampling, and Adam.

Everything is plain numpy with explicit forward tapes and hand-written
reverse-mode gradients; dtype follows the parameters (float32 for training,
float64 for gradient audits). No general-purpose autodiff: only the ops the
rendering pipeline needs.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import FormatError, OutOfBoundsError, ShapeError, TapeError

NVCK_MAGIC = b"NVCK"
NVCK_VERSION = 1


# ---------------------------------------------------------------------------
# MLP
# ---------------------------------------------------------------------------


@dataclass
class MlpParams:
    """Feed-forward net: ReLU on hidden layers, linear output."""

    weights: list  # [(d_in, d_out)]
    biases: list  # [(d_out,)]

    @property
    def layer_sizes(self) -> list:
        return [self.weights[0].shape[0]] + [w.shape[1] for w in self.weights]

    def param_dict(self, prefix: str = "mlp") -> dict:
        out = {}
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            out[f"{prefix}/W{i}"] = w
            out[f"{prefix}/b{i}"] = b
        return out

    def astype(self, dtype) -> "MlpParams":
        return MlpParams(
            weights=[w.astype(dtype) for w in self.weights],
            biases=[b.astype(dtype) for b in self.biases],
        )


def init_mlp(layer_sizes, rng: np.random.Generator, dtype=np.float32) -> MlpParams:
    """He-uniform weights, zero biases."""
    weights, biases = [], []
    for d_in, d_out in zip(layer_sizes[:-1], layer_sizes[1:]):
        limit = np.sqrt(6.0 / d_in)
        weights.append(rng.uniform(-limit, limit, size=(d_in, d_out)).astype(dtype))
        biases.append(np.zeros(d_out, dtype=dtype))
    return MlpParams(weights=weights, biases=biases)


@dataclass
class MlpTape:
    params: MlpParams
    inputs: list  # activation entering each layer, (N, d_in)
    masks: list  # ReLU masks for hidden layers
    out_shape: tuple
    squeezed: bool


def mlp_forward(params: MlpParams, x: np.ndarray):
    """Forward pass; accepts (d,) or (N, d). Returns (output, tape)."""
    x = np.asarray(x)
    squeezed = x.ndim == 1
    a = x[None, :] if squeezed else x
    if a.shape[1] != params.weights[0].shape[0]:
        raise ShapeError(
            f"input dim {a.shape[1]} != first layer size {params.weights[0].shape[0]}"
        )
    n_layers = len(params.weights)
    inputs, masks = [], []
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        inputs.append(a)
        z = a @ w + b
        if i < n_layers - 1:
            mask = z > 0
            masks.append(mask)
            a = z * mask
        else:
            a = z
    tape = MlpTape(
        params=params, inputs=inputs, masks=masks, out_shape=a.shape, squeezed=squeezed
    )
    return (a[0] if squeezed else a), tape


def mlp_backward(tape: MlpTape, output_grad: np.ndarray):
    """Exact reverse-mode gradients of a recorded forward pass.

    Returns (MlpParams-shaped grads, input gradient matching the forward input).
    """
    g = np.asarray(output_grad)
    if tape.squeezed:
        g = g[None, :]
    if g.shape != tape.out_shape:
        raise TapeError(
            f"output_grad shape {g.shape} does not match recorded {tape.out_shape}"
        )
    p = tape.params
    w_grads = [None] * len(p.weights)
    b_grads = [None] * len(p.biases)
    gz = g
    for i in range(len(p.weights) - 1, -1, -1):
        a_in = tape.inputs[i]
        w_grads[i] = a_in.T @ gz
        b_grads[i] = gz.sum(axis=0)
        ga = gz @ p.weights[i].T
        if i > 0:
            gz = ga * tape.masks[i - 1]
    input_grad = ga[0] if tape.squeezed else ga
    return MlpParams(weights=w_grads, biases=b_grads), input_grad


# ---------------------------------------------------------------------------
# Softmax
# ---------------------------------------------------------------------------


def softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    """Max-shifted softmax; tolerates -inf logits (for masked entries)."""
    x = np.asarray(logits)
    m = np.max(x, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    e = np.exp(x - m)
    return e / e.sum(axis=axis, keepdims=True)


def softmax_backward(y: np.ndarray, gy: np.ndarray, axis: int = -1) -> np.ndarray:
    """Gradient through softmax given its output y."""
    dot = (y * gy).sum(axis=axis, keepdims=True)
    return y * (gy - dot)


# ---------------------------------------------------------------------------
# Convolutional feature encoder (3 -> hidden -> F, 3x3, stride 1, same pad)
# ---------------------------------------------------------------------------


@dataclass
class EncoderParams:
    """Two 3x3 conv layers with a ReLU in between."""

    w1: np.ndarray  # (3, 3, 3, hidden)
    b1: np.ndarray  # (hidden,)
    w2: np.ndarray  # (3, 3, hidden, F)
    b2: np.ndarray  # (F,)

    def __post_init__(self):
        if self.w1.shape[:2] != (3, 3) or self.w2.shape[:2] != (3, 3):
            raise ShapeError("encoder kernels must be 3x3")
        if self.w1.shape[3] != self.w2.shape[2]:
            raise ShapeError("encoder channel chain mismatch")
        if self.feature_dim < 2:
            raise ValueError("feature dim must be >= 2")

    @property
    def hidden_dim(self) -> int:
        return self.w1.shape[3]

    @property
    def feature_dim(self) -> int:
        return self.w2.shape[3]

    def param_dict(self, prefix: str = "enc") -> dict:
        return {
            f"{prefix}/w1": self.w1,
            f"{prefix}/b1": self.b1,
            f"{prefix}/w2": self.w2,
            f"{prefix}/b2": self.b2,
        }

    def astype(self, dtype) -> "EncoderParams":
        return EncoderParams(
            w1=self.w1.astype(dtype),
            b1=self.b1.astype(dtype),
            w2=self.w2.astype(dtype),
            b2=self.b2.astype(dtype),
        )


def init_encoder(
    rng: np.random.Generator, hidden: int = 16, feature_dim: int = 8, dtype=np.float32
) -> EncoderParams:
    def he(shape):
        fan_in = shape[0] * shape[1] * shape[2]
        limit = np.sqrt(6.0 / fan_in)
        return rng.uniform(-limit, limit, size=shape).astype(dtype)

    return EncoderParams(
        w1=he((3, 3, 3, hidden)),
        b1=np.zeros(hidden, dtype=dtype),
        w2=he((3, 3, hidden, feature_dim)),
        b2=np.zeros(feature_dim, dtype=dtype),
    )


def _im2col(img: np.ndarray) -> np.ndarray:
    """(H, W, C) -> (H*W, 9*C) patches for a 3x3 same-padded convolution."""
    h, w, c = img.shape
    padded = np.zeros((h + 2, w + 2, c), dtype=img.dtype)
    padded[1:-1, 1:-1] = img
    win = np.lib.stride_tricks.sliding_window_view(padded, (3, 3), axis=(0, 1))
    # (H, W, C, 3, 3) -> (H, W, 3, 3, C)
    return np.ascontiguousarray(win.transpose(0, 1, 3, 4, 2)).reshape(h * w, 9 * c)


def conv2d_same(img: np.ndarray, kernel: np.ndarray, bias=None) -> np.ndarray:
    """3x3 stride-1 zero-padded convolution; img (H,W,Cin), kernel (3,3,Cin,Cout)."""
    h, w, _ = img.shape
    cout = kernel.shape[3]
    col = _im2col(img)
    out = col @ kernel.reshape(9 * kernel.shape[2], cout)
    if bias is not None:
        out = out + bias
    return out.reshape(h, w, cout)


def _flip_kernel(kernel: np.ndarray) -> np.ndarray:
    """Spatially flipped, channel-transposed kernel for input gradients."""
    return kernel[::-1, ::-1].transpose(0, 1, 3, 2)


@dataclass
class EncoderTape:
    params: EncoderParams
    shape: tuple  # (H, W)
    mask1: np.ndarray
    col_img: np.ndarray  # (H*W, 27) image patches
    col_a1: np.ndarray  # (H*W, 9*hidden) hidden patches


def encode_features(
    params: EncoderParams,
    image: np.ndarray,
    want_tape: bool = False,
    col_img: Optional[np.ndarray] = None,
):
    """Feature map at the input's spatial resolution.

    image (H, W, 3) -> (H, W, F). With want_tape=True also returns the tape
    needed by encoder_backward. col_img caches the image's im2col patches
    (the image is constant across training steps; its patches are too).
    """
    if image.ndim != 3 or image.shape[2] != 3:
        raise ShapeError("encoder expects an (H, W, 3) image")
    if image.shape[0] < 3 or image.shape[1] < 3:
        raise ShapeError("encoder expects H, W >= 3")
    h, w, _ = image.shape
    if col_img is None:
        col_img = _im2col(image.astype(params.w1.dtype, copy=False))
    z1 = col_img @ params.w1.reshape(27, -1) + params.b1
    mask1 = z1 > 0
    a1 = (z1 * mask1).reshape(h, w, params.hidden_dim)
    col_a1 = _im2col(a1)
    fmap = (col_a1 @ params.w2.reshape(-1, params.feature_dim) + params.b2).reshape(
        h, w, params.feature_dim
    )
    if want_tape:
        return fmap, EncoderTape(
            params=params, shape=(h, w), mask1=mask1, col_img=col_img, col_a1=col_a1
        )
    return fmap


def encoder_backward(tape: EncoderTape, gfmap: np.ndarray) -> EncoderParams:
    """Parameter gradients from d(loss)/d(feature map)."""
    p = tape.params
    h, w = tape.shape
    if gfmap.shape != (h, w, p.feature_dim):
        raise TapeError("feature-map gradient shape mismatch")
    g2 = gfmap.reshape(h * w, p.feature_dim)
    gw2 = (tape.col_a1.T @ g2).reshape(3, 3, p.hidden_dim, p.feature_dim)
    gb2 = g2.sum(axis=0)
    ga1 = conv2d_same(gfmap, _flip_kernel(p.w2))
    gz1 = ga1.reshape(h * w, p.hidden_dim) * tape.mask1
    gw1 = (tape.col_img.T @ gz1).reshape(3, 3, 3, p.hidden_dim)
    gb1 = gz1.sum(axis=0)
    return EncoderParams(w1=gw1, b1=gb1, w2=gw2, b2=gb2)


# ---------------------------------------------------------------------------
# Bilinear map sampling (feature maps and images share the texel convention)
# ---------------------------------------------------------------------------


def bilinear_weights(height: int, width: int, pixels: np.ndarray):
    """Corner indices and weights for sampling at continuous pixel coords.

    Texel (i, j) has its center at (i + 0.5, j + 0.5); borders clamp to edge.
    Returns (flat_idx (N, 4) into H*W, weights (N, 4)).
    """
    p = np.asarray(pixels)
    qx = np.clip(p[:, 0] - 0.5, 0.0, width - 1.0)
    qy = np.clip(p[:, 1] - 0.5, 0.0, height - 1.0)
    x0 = np.minimum(qx.astype(np.int64), width - 2) if width > 1 else np.zeros(len(p), np.int64)
    y0 = np.minimum(qy.astype(np.int64), height - 2) if height > 1 else np.zeros(len(p), np.int64)
    rx = qx - x0
    ry = qy - y0
    w00 = (1 - rx) * (1 - ry)
    w10 = rx * (1 - ry)
    w01 = (1 - rx) * ry
    w11 = rx * ry
    x1 = np.minimum(x0 + 1, width - 1)
    y1 = np.minimum(y0 + 1, height - 1)
    idx = np.stack(
        [y0 * width + x0, y0 * width + x1, y1 * width + x0, y1 * width + x1], axis=-1
    )
    wts = np.stack([w00, w10, w01, w11], axis=-1)
    return idx, wts


def sample_feature(fmap: np.ndarray, pixel) -> np.ndarray:
    """Bilinear sample of an (H, W, F) map at one pixel. Out of bounds raises."""
    h, w = fmap.shape[:2]
    px, py = float(pixel[0]), float(pixel[1])
    if not (0.0 <= px < w and 0.0 <= py < h):
        raise OutOfBoundsError(f"pixel ({px}, {py}) outside [0,{w})x[0,{h})")
    idx, wts = bilinear_weights(h, w, np.array([[px, py]]))
    flat = fmap.reshape(h * w, -1)
    return (flat[idx[0]] * wts[0][:, None]).sum(axis=0)


def sample_maps_batch(maps: np.ndarray, view_idx: np.ndarray, pixels: np.ndarray):
    """Sample stacked per-view maps (V, H, W, C) at per-point views/pixels.

    Returns (values (N, C), flat_idx (N, 4) into V*H*W, weights (N, 4)); the
    indices/weights suffice to scatter gradients back into the maps.
    """
    v, h, w, c = maps.shape
    idx, wts = bilinear_weights(h, w, pixels)
    flat_idx = idx + (view_idx * (h * w))[:, None]
    flat = maps.reshape(v * h * w, c)
    vals = np.einsum("nkc,nk->nc", flat[flat_idx], wts)
    return vals, flat_idx, wts


def scatter_map_gradient(shape, flat_idx, wts, gvals) -> np.ndarray:
    """Adjoint of sample_maps_batch: accumulate gvals (N, C) into (V, H, W, C)."""
    v, h, w, c = shape
    size = v * h * w
    out = np.empty((size, c), dtype=gvals.dtype)
    contrib = wts[:, :, None] * gvals[:, None, :]  # (N, 4, C)
    idx_flat = flat_idx.ravel()
    for ch in range(c):
        out[:, ch] = np.bincount(
            idx_flat, weights=contrib[:, :, ch].ravel(), minlength=size
        )
    return out.reshape(v, h, w, c)


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------


class Adam:
    """Adam with per-parameter step counts (parameter groups may update on
    different schedules)."""

    def __init__(self, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.state: dict = {}

    def step(self, params: dict, grads: dict, lr: float) -> None:
        """Update params[name] in place for every name present in grads."""
        for name, g in grads.items():
            p = params[name]
            if name not in self.state:
                self.state[name] = [
                    np.zeros_like(p, dtype=np.float64),
                    np.zeros_like(p, dtype=np.float64),
                    0,
                ]
            m, v, t = self.state[name]
            t += 1
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * np.square(g)
            mhat = m / (1 - self.beta1**t)
            vhat = v / (1 - self.beta2**t)
            p -= (lr * mhat / (np.sqrt(vhat) + self.eps)).astype(p.dtype)
            self.state[name][2] = t


# ---------------------------------------------------------------------------
# Checkpoint container
# ---------------------------------------------------------------------------


def save_checkpoint(
    path: str, mlp: MlpParams, encoder: EncoderParams, hyperparams: Optional[dict] = None
) -> None:
    """Binary checkpoint: magic, version, JSON header, then f32 blocks in
    declaration order (mlp W0,b0,W1,b1,..., then enc w1,b1,w2,b2)."""
    header = {
        "layer_sizes": mlp.layer_sizes,
        "encoder_hidden": encoder.hidden_dim,
        "feature_dim": encoder.feature_dim,
        "hyperparams": hyperparams or {},
    }
    hjson = json.dumps(header, sort_keys=True).encode("utf-8")
    blocks = []
    for w, b in zip(mlp.weights, mlp.biases):
        blocks += [w, b]
    blocks += [encoder.w1, encoder.b1, encoder.w2, encoder.b2]
    with open(path, "wb") as f:
        f.write(NVCK_MAGIC)
        f.write(struct.pack("<II", NVCK_VERSION, len(hjson)))
        f.write(hjson)
        for arr in blocks:
            f.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_checkpoint(path: str):
    """Returns (MlpParams, EncoderParams, hyperparams dict)."""
    with open(path, "rb") as f:
        data = f.read()
    if data[:4] != NVCK_MAGIC:
        raise FormatError("bad NVCK magic")
    version, hlen = struct.unpack_from("<II", data, 4)
    if version != NVCK_VERSION:
        raise FormatError(f"unsupported NVCK version {version}")
    try:
        header = json.loads(data[12 : 12 + hlen].decode("utf-8"))
        sizes = [int(s) for s in header["layer_sizes"]]
        hidden = int(header["encoder_hidden"])
        fdim = int(header["feature_dim"])
    except (ValueError, KeyError) as e:
        raise FormatError(f"bad NVCK header: {e}") from e
    pos = 12 + hlen

    def take(shape):
        nonlocal pos
        n = int(np.prod(shape))
        if pos + 4 * n > len(data):
            raise FormatError("truncated NVCK parameter block")
        arr = np.frombuffer(data, dtype="<f4", count=n, offset=pos).reshape(shape)
        pos += 4 * n
        return arr.copy()

    weights, biases = [], []
    for d_in, d_out in zip(sizes[:-1], sizes[1:]):
        weights.append(take((d_in, d_out)))
        biases.append(take((d_out,)))
    encoder = EncoderParams(
        w1=take((3, 3, 3, hidden)),
        b1=take((hidden,)),
        w2=take((3, 3, hidden, fdim)),
        b2=take((fdim,)),
    )
    if pos != len(data):
        raise FormatError("trailing bytes in NVCK file")
    return MlpParams(weights=weights, biases=biases), encoder, header["hyperparams"]
