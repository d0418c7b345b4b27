"""Differentiable tensor operations used by the generator, discriminator and losses.

Tensors are ``torch.Tensor`` objects and reverse-mode differentiation is
torch's autograd.  What lives here is the op vocabulary with this project's
conventions baked in (pixel-unit warping with border clamping, parameter-free
SPADE normalization, spectral normalization with a persistent power-iteration
vector, GAN-style Adam) plus a finite-difference gradient checker.
"""

import math

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

NORM_EPS = 1e-5


class ShapeError(ValueError):
    """Raised when operand shapes violate an op's contract."""


class NonFiniteError(FloatingPointError):
    """Raised when an op receives NaN/Inf where it cannot propagate them meaningfully."""


def _require_4d(name, x):
    if x.dim() != 4:
        raise ShapeError(f"{name} must be 4-D [B,C,H,W], got shape {tuple(x.shape)}")


# ---------------------------------------------------------------------------
# convolution and resampling
# ---------------------------------------------------------------------------

def conv2d(input, weight, bias=None, stride=1, padding=0):
    """Cross-correlation with square odd kernels.

    Output size follows the usual floor rule ``(H + 2p - k) // stride + 1``.
    """
    _require_4d("input", input)
    if weight.dim() != 4 or weight.shape[2] != weight.shape[3]:
        raise ShapeError(f"weight must be [Co,Ci,k,k], got {tuple(weight.shape)}")
    k = weight.shape[2]
    if k % 2 == 0:
        raise ShapeError(f"kernel size must be odd, got {k}")
    if padding < 0 or stride < 1:
        raise ShapeError("padding must be >= 0 and stride >= 1")
    if input.shape[1] != weight.shape[1]:
        raise ShapeError(f"input has {input.shape[1]} channels, weight expects {weight.shape[1]}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ShapeError(f"bias must have shape ({weight.shape[0]},)")
    h, w = input.shape[2:]
    if (h + 2 * padding - k) < 0 or (w + 2 * padding - k) < 0:
        raise ShapeError("kernel larger than padded input")
    return F.conv2d(input, weight, bias, stride=stride, padding=padding)


def grid_warp(features, displacement):
    """Bilinearly resample ``features`` at ``(x + dx, y + dy)`` for every output pixel.

    ``displacement`` is in pixel units, channel 0 = x offset, channel 1 = y
    offset.  Sample positions are clamped to the image border.  A zero
    displacement reproduces the input bit-exactly.
    """
    _require_4d("features", features)
    _require_4d("displacement", displacement)
    b, c, h, w = features.shape
    if displacement.shape != (b, 2, h, w):
        raise ShapeError(f"displacement must be {(b, 2, h, w)}, got {tuple(displacement.shape)}")
    dt = features.dtype
    disp = displacement.to(dt)
    if not torch.isfinite(disp).all():
        raise NonFiniteError("grid_warp received a non-finite displacement")
    gx = torch.arange(w, dtype=dt).view(1, 1, w)
    gy = torch.arange(h, dtype=dt).view(1, h, 1)
    x = (gx + disp[:, 0]).clamp(0, w - 1)
    y = (gy + disp[:, 1]).clamp(0, h - 1)
    x0 = torch.floor(x.detach())
    y0 = torch.floor(y.detach())
    wx = x - x0
    wy = y - y0
    x0i = x0.long()
    y0i = y0.long()
    x1i = (x0i + 1).clamp(max=w - 1)
    y1i = (y0i + 1).clamp(max=h - 1)

    flat = features.reshape(b, c, h * w)

    def tap(yi, xi):
        idx = (yi * w + xi).view(b, 1, h * w).expand(b, c, h * w)
        return flat.gather(2, idx).view(b, c, h, w)

    wx = wx.unsqueeze(1)
    wy = wy.unsqueeze(1)
    return (tap(y0i, x0i) * (1 - wx) * (1 - wy) + tap(y0i, x1i) * wx * (1 - wy)
            + tap(y1i, x0i) * (1 - wx) * wy + tap(y1i, x1i) * wx * wy)


def resize_bilinear(input, out_h, out_w):
    """Bilinear resampling with half-pixel centers (align_corners=False)."""
    _require_4d("input", input)
    if out_h < 1 or out_w < 1:
        raise ShapeError("output size must be positive")
    if tuple(input.shape[2:]) == (out_h, out_w):
        return input
    return F.interpolate(input, size=(out_h, out_w), mode="bilinear", align_corners=False)


def resize_displacement(disp, out_h, out_w):
    """Resize a pixel-unit displacement field, rescaling the vectors by the size ratio."""
    h, w = disp.shape[2:]
    out = resize_bilinear(disp, out_h, out_w)
    if (out_h, out_w) == (h, w):
        return out
    scale = torch.tensor([out_w / w, out_h / h], dtype=disp.dtype).view(1, 2, 1, 1)
    return out * scale


def upsample_displacement(disp):
    """2x upsample of a displacement field; magnitudes double with resolution."""
    h, w = disp.shape[2:]
    return resize_bilinear(disp, 2 * h, 2 * w) * 2


# ---------------------------------------------------------------------------
# elementwise and pooling
# ---------------------------------------------------------------------------

def leaky_relu(x, slope=0.2):
    return F.leaky_relu(x, slope)


def relu(x):
    return F.relu(x)


def tanh(x):
    return torch.tanh(x)


def add(a, b):
    return a + b


def concat_channels(*maps):
    ref = maps[0]
    for m in maps[1:]:
        if m.shape[0] != ref.shape[0] or m.shape[2:] != ref.shape[2:]:
            raise ShapeError(f"cannot concat {tuple(ref.shape)} with {tuple(m.shape)}")
    return torch.cat(maps, dim=1)


def avg_pool2d(x, k=2):
    return F.avg_pool2d(x, k)


# ---------------------------------------------------------------------------
# spatially-adaptive normalization
# ---------------------------------------------------------------------------

def param_free_norm(x, eps=NORM_EPS):
    """Per-channel standardization over batch and spatial extent."""
    mean = x.mean(dim=(0, 2, 3), keepdim=True)
    var = ((x - mean) ** 2).mean(dim=(0, 2, 3), keepdim=True)
    return (x - mean) / torch.sqrt(var + eps)


def spade_normalize(features, guidance, params):
    """``norm(features) * (1 + gamma) + beta`` with gamma/beta predicted from ``guidance``.

    ``params`` is a :class:`SPADE` module (its shared/gamma/beta convolutions).
    """
    if guidance.shape[2:] != features.shape[2:]:
        raise ShapeError("guidance must already be resized to the feature resolution")
    normalized = param_free_norm(features)
    actv = relu(params.shared(guidance))
    return normalized * (1 + params.gamma(actv)) + params.beta(actv)


class SPADE(nn.Module):
    def __init__(self, norm_channels, guidance_channels, hidden=64):
        super().__init__()
        self.shared = SNConv2d(guidance_channels, hidden, 3, padding=1)
        self.gamma = SNConv2d(hidden, norm_channels, 3, padding=1)
        self.beta = SNConv2d(hidden, norm_channels, 3, padding=1)

    def forward(self, x, guidance):
        return spade_normalize(x, guidance, self)


# ---------------------------------------------------------------------------
# spectral normalization
# ---------------------------------------------------------------------------

def spectral_normalize(weight, u, update=True, eps=1e-12):
    """Divide ``weight`` by its power-iteration estimate of the top singular value.

    ``u`` (length = out-channels) is the persistent left singular vector
    estimate; when ``update`` is true one power-iteration step refines it in
    place.  The singular vectors are treated as constants for the gradient.
    """
    mat = weight.reshape(weight.shape[0], -1)
    with torch.no_grad():
        if update:
            v = F.normalize(mat.t() @ u, dim=0, eps=eps)
            u.copy_(F.normalize(mat @ v, dim=0, eps=eps))
        v = F.normalize(mat.t() @ u, dim=0, eps=eps)
    sigma = torch.dot(u.to(mat.dtype).clone(), mat @ v.to(mat.dtype))
    return weight / sigma.clamp_min(eps)


class SNConv2d(nn.Module):
    """Convolution whose weight is spectrally normalized on every forward."""

    def __init__(self, in_channels, out_channels, kernel_size=3, stride=1, padding=0, bias=True):
        super().__init__()
        self.stride, self.padding = stride, padding
        self.weight = nn.Parameter(torch.empty(out_channels, in_channels, kernel_size, kernel_size))
        self.bias = nn.Parameter(torch.zeros(out_channels)) if bias else None
        nn.init.kaiming_uniform_(self.weight, a=math.sqrt(5))
        self.register_buffer("u", F.normalize(torch.randn(out_channels), dim=0))

    def normalized_weight(self):
        return spectral_normalize(self.weight, self.u, update=self.training)

    def forward(self, x):
        return conv2d(x, self.normalized_weight(), self.bias, self.stride, self.padding)


# ---------------------------------------------------------------------------
# optimization
# ---------------------------------------------------------------------------

def adam_step(params, states, lr, beta1=0.5, beta2=0.999, eps=1e-8):
    """One bias-corrected Adam update.

    ``states`` maps each parameter to a dict with ``step``, ``m`` and ``v``;
    missing entries are created with zero moments.  Parameters without a
    gradient are skipped.
    """
    with torch.no_grad():
        for p in params:
            if p.grad is None:
                continue
            st = states.get(p)
            if st is None:
                st = states[p] = {"step": 0, "m": torch.zeros_like(p), "v": torch.zeros_like(p)}
            g = p.grad
            st["step"] += 1
            st["m"].mul_(beta1).add_(g, alpha=1 - beta1)
            st["v"].mul_(beta2).addcmul_(g, g, value=1 - beta2)
            m_hat = st["m"] / (1 - beta1 ** st["step"])
            v_hat = st["v"] / (1 - beta2 ** st["step"])
            p.sub_(lr * m_hat / (v_hat.sqrt() + eps))


class Adam:
    """Adam over a fixed, ordered parameter list; betas default to (0.5, 0.999)."""

    def __init__(self, params, lr=2e-4, betas=(0.5, 0.999), eps=1e-8):
        self.params = list(params)
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.states = {}

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        adam_step(self.params, self.states, self.lr, self.betas[0], self.betas[1], self.eps)

    def state_arrays(self, prefix):
        out = {}
        for i, p in enumerate(self.params):
            st = self.states.get(p)
            if st is not None:
                out[f"{prefix}.{i}.m"] = st["m"].detach().cpu().numpy()
                out[f"{prefix}.{i}.v"] = st["v"].detach().cpu().numpy()
                out[f"{prefix}.{i}.step"] = np.array([st["step"]], dtype=np.int32)
        return out

    def load_state_arrays(self, arrays, prefix):
        self.states = {}
        for i, p in enumerate(self.params):
            key = f"{prefix}.{i}"
            if f"{key}.m" in arrays:
                self.states[p] = {
                    "step": int(arrays[f"{key}.step"][0]),
                    "m": torch.as_tensor(arrays[f"{key}.m"], dtype=p.dtype).reshape(p.shape).clone(),
                    "v": torch.as_tensor(arrays[f"{key}.v"], dtype=p.dtype).reshape(p.shape).clone(),
                }


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------

def grad_check(f, inputs, eps=1e-5, max_elements=None, seed=0, floor=1e-6):
    """Max relative error between autograd and central-difference gradients.

    ``f(*inputs)`` may return any tensor; it is reduced to a scalar with a
    fixed random projection.  Every input must be a float64 leaf tensor that
    requires grad (module parameters work too; they are perturbed in place).
    With ``max_elements`` set, at most that many randomly chosen entries of
    each input are checked numerically.  The relative error divides by at
    least ``floor`` so exactly-zero gradients are judged by the absolute
    round-off of the central difference rather than by 0/0.
    """
    rng = np.random.default_rng(seed)
    with torch.no_grad():
        out0 = f(*inputs)
    proj = torch.as_tensor(rng.standard_normal(tuple(out0.shape)), dtype=torch.float64)

    def objective():
        return (f(*inputs).to(torch.float64) * proj).sum()

    for x in inputs:
        x.grad = None
    objective().backward()
    analytic = [x.grad.detach().clone() if x.grad is not None else torch.zeros_like(x) for x in inputs]

    worst = 0.0
    with torch.no_grad():
        for x, g in zip(inputs, analytic):
            flat = x.view(-1)
            gflat = g.reshape(-1)
            n = flat.numel()
            idx = np.arange(n)
            if max_elements is not None and n > max_elements:
                idx = np.sort(rng.choice(n, size=max_elements, replace=False))
            for i in idx:
                orig = flat[i].item()
                flat[i] = orig + eps
                fp = objective().item()
                flat[i] = orig - eps
                fm = objective().item()
                flat[i] = orig
                num = (fp - fm) / (2 * eps)
                ana = gflat[i].item()
                err = abs(ana - num) / max(abs(ana), abs(num), floor)
                worst = max(worst, err)
    return worst
