"""Dense float64 tensor operations with hand-derived backward passes.

There is no autodiff graph: the matching head is a fixed pipeline, so
every operation here ships its own backward function that consumes the
upstream gradient and returns (or accumulates) input gradients. Tensors
are plain ``numpy.float64`` arrays; ``Parameter`` pairs a named value
array with a same-shaped gradient buffer. Everything is checkable against
central finite differences via :func:`gradient_check`.

Masks are boolean arrays aligned with a tensor's leading axes; masked
reductions require at least one valid entry.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

CKPT_MAGIC = b"TSEG-CKPT"
CKPT_VERSION = 1

# flip on in tests to assert finiteness after key ops
check_finite = False


class NumericsError(ValueError):
    pass


def _assert_finite(name: str, arr: np.ndarray) -> None:
    if check_finite and not np.all(np.isfinite(arr)):
        raise NumericsError(f"{name}: non-finite values produced")


@dataclass
class Parameter:
    """Named learnable array with an accumulating gradient of the same shape."""

    name: str
    value: np.ndarray
    grad: np.ndarray = field(init=False)

    def __post_init__(self):
        self.value = np.asarray(self.value, dtype=np.float64)
        self.grad = np.zeros_like(self.value)

    def zero_grad(self) -> None:
        self.grad[...] = 0.0


def zero_grads(params: Iterable[Parameter]) -> None:
    for p in params:
        p.zero_grad()


def _expand_mask(mask: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Broadcast a leading-axes mask up to ``shape``."""
    mask = np.asarray(mask, dtype=bool)
    if mask.ndim > len(shape) or mask.shape != shape[:mask.ndim]:
        raise NumericsError(f"mask shape {mask.shape} does not lead tensor shape {shape}")
    return np.broadcast_to(mask.reshape(mask.shape + (1,) * (len(shape) - mask.ndim)), shape)


# ---------------------------------------------------------------------------
# contractions
# ---------------------------------------------------------------------------

def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise NumericsError(f"matmul: inner dimensions disagree: {a.shape} vs {b.shape}")
    out = a @ b
    _assert_finite("matmul", out)
    return out


def matmul_backward(grad: np.ndarray, a: np.ndarray, b: np.ndarray):
    """dA = dC @ B^T, dB = A^T @ dC (batched over leading axes)."""
    da = grad @ np.swapaxes(b, -1, -2)
    db = np.swapaxes(a, -1, -2) @ grad
    # reduce broadcast batch axes back to the operand shapes
    while da.ndim > a.ndim:
        da = da.sum(axis=0)
    while db.ndim > b.ndim:
        db = db.sum(axis=0)
    return da, db


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------

def tanh(x: np.ndarray) -> np.ndarray:
    return np.tanh(x)


def tanh_backward(grad: np.ndarray, out: np.ndarray) -> np.ndarray:
    return grad * (1.0 - out * out)


def sigmoid(x: np.ndarray) -> np.ndarray:
    return 1.0 / (1.0 + np.exp(-x))


def sigmoid_backward(grad: np.ndarray, out: np.ndarray) -> np.ndarray:
    return grad * out * (1.0 - out)


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def relu_backward(grad: np.ndarray, x: np.ndarray) -> np.ndarray:
    return grad * (x > 0.0)


# ---------------------------------------------------------------------------
# softmax
# ---------------------------------------------------------------------------

def softmax(x: np.ndarray, axis: int = -1, mask: np.ndarray | None = None) -> np.ndarray:
    """Max-subtracted softmax; masked positions get probability exactly 0."""
    if mask is not None:
        full = _expand_mask(mask, x.shape)
        if not np.all(np.any(full, axis=axis)):
            raise NumericsError("softmax: some slice has every position masked")
        shifted = np.where(full, x, -np.inf)
    else:
        shifted = x
    shifted = shifted - np.max(shifted, axis=axis, keepdims=True)
    expd = np.exp(shifted)
    if mask is not None:
        expd = np.where(full, expd, 0.0)
    out = expd / np.sum(expd, axis=axis, keepdims=True)
    _assert_finite("softmax", out)
    return out


def softmax_backward(grad: np.ndarray, probs: np.ndarray, axis: int = -1) -> np.ndarray:
    """dx = p * (g - sum(g*p)); masked positions carry p = 0 and get dx = 0."""
    inner = np.sum(grad * probs, axis=axis, keepdims=True)
    return probs * (grad - inner)


# ---------------------------------------------------------------------------
# layer normalization (over the last axis)
# ---------------------------------------------------------------------------

def layer_norm(x: np.ndarray, gain: np.ndarray, bias: np.ndarray, eps: float = 1e-5):
    mean = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    x_hat = (x - mean) * inv_std
    out = x_hat * gain + bias
    _assert_finite("layer_norm", out)
    return out, (x_hat, inv_std, gain)


def layer_norm_backward(grad: np.ndarray, cache):
    x_hat, inv_std, gain = cache
    dgain = np.sum(grad * x_hat, axis=tuple(range(grad.ndim - 1)))
    dbias = np.sum(grad, axis=tuple(range(grad.ndim - 1)))
    dx_hat = grad * gain
    dx = inv_std * (dx_hat
                    - dx_hat.mean(axis=-1, keepdims=True)
                    - x_hat * np.mean(dx_hat * x_hat, axis=-1, keepdims=True))
    return dx, dgain, dbias


# ---------------------------------------------------------------------------
# pooling
# ---------------------------------------------------------------------------

def mean_pool(x: np.ndarray, axis: int, mask: np.ndarray | None = None) -> np.ndarray:
    if mask is None:
        return x.mean(axis=axis)
    full = _expand_mask(mask, x.shape)
    counts = full.sum(axis=axis)
    if np.any(counts == 0):
        raise NumericsError("mean_pool: some slice has every position masked")
    return np.where(full, x, 0.0).sum(axis=axis) / counts


def mean_pool_backward(grad: np.ndarray, x_shape: tuple[int, ...], axis: int,
                       mask: np.ndarray | None = None) -> np.ndarray:
    axis = axis % len(x_shape)
    expanded = np.expand_dims(grad, axis)
    if mask is None:
        return np.broadcast_to(expanded / x_shape[axis], x_shape).copy()
    full = _expand_mask(mask, x_shape)
    counts = np.expand_dims(full.sum(axis=axis), axis)
    return np.where(full, np.broadcast_to(expanded / counts, x_shape), 0.0)


def max_pool(x: np.ndarray, axis: int, mask: np.ndarray | None = None):
    """Masked max; returns (values, argmax indices). Ties go to the first argmax."""
    if mask is not None:
        full = _expand_mask(mask, x.shape)
        if not np.all(np.any(full, axis=axis)):
            raise NumericsError("max_pool: some slice has every position masked")
        masked = np.where(full, x, -np.inf)
    else:
        masked = x
    idx = np.argmax(masked, axis=axis)
    values = np.take_along_axis(masked, np.expand_dims(idx, axis), axis=axis).squeeze(axis)
    return values, idx


def max_pool_backward(grad: np.ndarray, x_shape: tuple[int, ...], axis: int,
                      argmax_idx: np.ndarray) -> np.ndarray:
    dx = np.zeros(x_shape, dtype=np.float64)
    np.put_along_axis(dx, np.expand_dims(argmax_idx, axis),
                      np.expand_dims(grad, axis), axis=axis)
    return dx


# ---------------------------------------------------------------------------
# GRU
# ---------------------------------------------------------------------------

class GruParams:
    """Gate and candidate weights for a GRU with given input/hidden sizes."""

    def __init__(self, input_size: int, hidden_size: int,
                 rng: np.random.Generator, prefix: str = "gru"):
        self.input_size = input_size
        self.hidden_size = hidden_size

        def mat(name, rows, cols):
            return Parameter(f"{prefix}_{name}", rng.normal(0.0, rows ** -0.5, (rows, cols)))

        def vec(name):
            return Parameter(f"{prefix}_{name}", np.zeros(hidden_size))

        self.w_z = mat("wz", input_size, hidden_size)
        self.u_z = mat("uz", hidden_size, hidden_size)
        self.b_z = vec("bz")
        self.w_r = mat("wr", input_size, hidden_size)
        self.u_r = mat("ur", hidden_size, hidden_size)
        self.b_r = vec("br")
        self.w_h = mat("wh", input_size, hidden_size)
        self.u_h = mat("uh", hidden_size, hidden_size)
        self.b_h = vec("bh")

    def parameters(self) -> list[Parameter]:
        return [self.w_z, self.u_z, self.b_z, self.w_r, self.u_r, self.b_r,
                self.w_h, self.u_h, self.b_h]


def gru_cell(x: np.ndarray, h_prev: np.ndarray, gp: GruParams):
    """One step: z and r gates (sigmoid), tanh candidate, convex update.

    ``h = z * h_prev + (1 - z) * h_tilde`` so ``z`` keeps the old state.
    """
    z = sigmoid(x @ gp.w_z.value + h_prev @ gp.u_z.value + gp.b_z.value)
    r = sigmoid(x @ gp.w_r.value + h_prev @ gp.u_r.value + gp.b_r.value)
    h_tilde = tanh(x @ gp.w_h.value + (r * h_prev) @ gp.u_h.value + gp.b_h.value)
    h = z * h_prev + (1.0 - z) * h_tilde
    return h, (x, h_prev, z, r, h_tilde)


def gru_cell_backward(grad_h: np.ndarray, cache, gp: GruParams):
    """Backward of one step; accumulates into gp grads, returns (dx, dh_prev)."""
    x, h_prev, z, r, h_tilde = cache
    dz = grad_h * (h_prev - h_tilde)
    dh_tilde = grad_h * (1.0 - z)
    dh_prev = grad_h * z

    dpre_h = tanh_backward(dh_tilde, h_tilde)
    gp.w_h.grad += np.outer(x, dpre_h)
    gp.u_h.grad += np.outer(r * h_prev, dpre_h)
    gp.b_h.grad += dpre_h
    dx = dpre_h @ gp.w_h.value.T
    drh = dpre_h @ gp.u_h.value.T
    dr = drh * h_prev
    dh_prev = dh_prev + drh * r

    dpre_r = sigmoid_backward(dr, r)
    gp.w_r.grad += np.outer(x, dpre_r)
    gp.u_r.grad += np.outer(h_prev, dpre_r)
    gp.b_r.grad += dpre_r
    dx += dpre_r @ gp.w_r.value.T
    dh_prev += dpre_r @ gp.u_r.value.T

    dpre_z = sigmoid_backward(dz, z)
    gp.w_z.grad += np.outer(x, dpre_z)
    gp.u_z.grad += np.outer(h_prev, dpre_z)
    gp.b_z.grad += dpre_z
    dx += dpre_z @ gp.w_z.value.T
    dh_prev += dpre_z @ gp.u_z.value.T
    return dx, dh_prev


def gru_sequence(inputs: np.ndarray, gp: GruParams,
                 step_mask: np.ndarray | None = None):
    """Run the GRU over ``inputs`` (steps x input_size) from a zero state.

    Masked steps copy the previous hidden state. Returns the final hidden
    state and a cache for :func:`gru_sequence_backward`.
    """
    steps = inputs.shape[0]
    if steps < 1:
        raise NumericsError("gru_sequence: need at least one step")
    h = np.zeros(gp.hidden_size)
    caches = []
    for t in range(steps):
        if step_mask is not None and not step_mask[t]:
            caches.append(None)
            continue
        h, cache = gru_cell(inputs[t], h, gp)
        caches.append(cache)
    _assert_finite("gru_sequence", h)
    return h, caches


def gru_sequence_backward(grad_h: np.ndarray, caches, gp: GruParams,
                          input_shape: tuple[int, int]) -> np.ndarray:
    dinputs = np.zeros(input_shape)
    dh = np.asarray(grad_h, dtype=np.float64).copy()
    for t in range(len(caches) - 1, -1, -1):
        if caches[t] is None:
            continue
        dx, dh = gru_cell_backward(dh, caches[t], gp)
        dinputs[t] = dx
    return dinputs


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

class Adam:
    """Bias-corrected adaptive-moment optimizer; zeroes gradients after each step."""

    def __init__(self, params: Sequence[Parameter], lr: float = 1e-3,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self._m = {p.name: np.zeros_like(p.value) for p in self.params}
        self._v = {p.name: np.zeros_like(p.value) for p in self.params}

    def step(self) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for p in self.params:
            m = self._m[p.name]
            v = self._v[p.name]
            m *= self.beta1
            m += (1.0 - self.beta1) * p.grad
            v *= self.beta2
            v += (1.0 - self.beta2) * p.grad * p.grad
            p.value -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            p.zero_grad()


def adam_step(params: Sequence[Parameter], state: Adam | None = None,
              lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> Adam:
    """One optimizer step; pass the returned state back in for the next one."""
    if state is None:
        state = Adam(params, lr=lr, beta1=beta1, beta2=beta2, eps=eps)
    state.step()
    return state


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------

@dataclass
class GradientCheckReport:
    max_rel_err: float
    per_param: dict[str, float]
    worst_param: str
    passed: bool


def gradient_check(f: Callable[[], float], params: Sequence[Parameter],
                   epsilon: float = 1e-3, tolerance: float = 1e-4,
                   samples_per_param: int = 32, seed: int = 0) -> GradientCheckReport:
    """Compare populated analytic gradients against central finite differences.

    ``f`` re-evaluates the scalar objective at the current parameter values
    and must be deterministic (verified by evaluating it twice). Each
    parameter gets at least ``samples_per_param`` sampled coordinates; the
    step is ``epsilon`` scaled by the coordinate's magnitude. Relative
    error is ``|a - g| / max(1e-6, |a| + |g|)``: the floor sits above the
    float64 finite-difference noise, so gradients that are numerically
    zero on both sides compare absolutely instead of amplifying roundoff.
    """
    base = f()
    again = f()
    if base != again:
        raise NumericsError(
            f"gradient_check: f is not deterministic ({base!r} != {again!r})")

    rng = np.random.default_rng(seed)
    per_param: dict[str, float] = {}
    worst = ("", 0.0)
    for p in params:
        flat_val = p.value.reshape(-1)
        flat_grad = p.grad.reshape(-1)
        size = flat_val.size
        if size <= samples_per_param:
            coords = np.arange(size)
        else:
            coords = rng.choice(size, size=samples_per_param, replace=False)
        max_err = 0.0
        for c in coords:
            original = flat_val[c]
            step = epsilon * max(1.0, abs(original))
            flat_val[c] = original + step
            f_plus = f()
            flat_val[c] = original - step
            f_minus = f()
            flat_val[c] = original
            numeric = (f_plus - f_minus) / (2.0 * step)
            analytic = flat_grad[c]
            err = abs(analytic - numeric) / max(1e-6, abs(analytic) + abs(numeric))
            max_err = max(max_err, err)
        per_param[p.name] = max_err
        if max_err >= worst[1]:
            worst = (p.name, max_err)
    overall = max(per_param.values()) if per_param else 0.0
    return GradientCheckReport(max_rel_err=overall, per_param=per_param,
                               worst_param=worst[0], passed=overall <= tolerance)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(path, params: Sequence[Parameter]) -> None:
    """Write named tensors as little-endian float32 in TSEG-CKPT layout."""
    names = [p.name for p in params]
    if len(set(names)) != len(names):
        raise NumericsError("save_checkpoint: duplicate parameter names")
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<II", CKPT_VERSION, len(names)))
        for p in params:
            name = p.name.encode("utf-8")
            fh.write(struct.pack("<H", len(name)))
            fh.write(name)
            shape = p.value.shape
            fh.write(struct.pack("<B", len(shape)))
            for dim in shape:
                fh.write(struct.pack("<I", dim))
            fh.write(p.value.astype("<f4").tobytes())


def load_checkpoint(path) -> dict[str, np.ndarray]:
    """Read a TSEG-CKPT file into name -> float64 array (upcast from float32)."""
    with open(path, "rb") as fh:
        data = fh.read()

    def fail(offset, why):
        raise NumericsError(f"{path}: {why} at byte {offset}")

    m = len(CKPT_MAGIC)
    if len(data) < m or data[:m] != CKPT_MAGIC:
        fail(0, f"bad magic {data[:m]!r}")
    off = m
    if len(data) < off + 8:
        fail(off, "truncated header")
    version, count = struct.unpack_from("<II", data, off)
    if version != CKPT_VERSION:
        fail(off, f"unsupported checkpoint version {version}")
    off += 8
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        if len(data) < off + 2:
            fail(off, "truncated entry header")
        (name_len,) = struct.unpack_from("<H", data, off)
        off += 2
        name = data[off:off + name_len].decode("utf-8")
        off += name_len
        if len(data) < off + 1:
            fail(off, "truncated rank")
        rank = data[off]
        off += 1
        if len(data) < off + 4 * rank:
            fail(off, "truncated dims")
        dims = struct.unpack_from(f"<{rank}I", data, off) if rank else ()
        off += 4 * rank
        size = int(np.prod(dims)) if dims else 1
        if len(data) < off + 4 * size:
            fail(off, f"truncated tensor data for {name!r}")
        arr = np.frombuffer(data, dtype="<f4", count=size, offset=off)
        out[name] = arr.reshape(dims).astype(np.float64)
        off += 4 * size
    return out
