"""Reverse-mode automatic differentiation over dense numpy arrays.

Provides exactly the operation set the linking models need: 2-D matrix
products, elementwise arithmetic and activations, row gather/scatter,
column slicing/concatenation, and reductions over contiguous row segments
(sum, mean, max, tempered softmax).  Every operation records a pull-back
closure on a :class:`Tape`; :func:`backward` replays the tape in exact
reverse order and accumulates gradients into watched :class:`Parameter`
objects.  All arithmetic is float64.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

__all__ = [
    "ShapeError",
    "Tensor",
    "Parameter",
    "Tape",
    "constant",
    "backward",
    "adam_step",
    "gradient_check",
    "GradCheckReport",
    "save_checkpoint",
    "load_checkpoint",
    "matmul",
    "transpose",
    "add",
    "sub",
    "mul",
    "scale",
    "add_const",
    "add_bias",
    "scale_rows",
    "concat_cols",
    "concat_rows",
    "slice_cols",
    "gather_rows",
    "select_timestep",
    "relu",
    "sigmoid",
    "tanh",
    "log",
    "sum_all",
    "mean_rows",
    "max_over",
    "segment_sum",
    "segment_mean",
    "segment_max",
    "segment_softmax",
    "temperature_softmax",
]


class ShapeError(ValueError):
    """Operation inputs have incompatible shapes."""


class Tensor:
    """A dense float64 array plus the tape that recorded its creation."""

    __slots__ = ("value", "grad", "tape")

    def __init__(self, value, tape: "Tape | None" = None):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.tape = tape

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def item(self) -> float:
        if self.value.size != 1:
            raise ShapeError(f"item: tensor of shape {self.value.shape} is not scalar")
        return float(self.value.reshape(-1)[0])

    def __repr__(self) -> str:  # pragma: no cover
        return f"Tensor(shape={self.value.shape}, recorded={self.tape is not None})"


class Parameter:
    """Named trainable tensor with gradient buffer and Adam moments."""

    __slots__ = ("name", "value", "grad", "m", "v", "step")

    def __init__(self, name: str, value):
        self.name = name
        self.value = np.array(value, dtype=np.float64)
        self.grad = np.zeros_like(self.value)
        self.m = np.zeros_like(self.value)
        self.v = np.zeros_like(self.value)
        self.step = 0

    def zero_grad(self) -> None:
        self.grad.fill(0.0)

    def __repr__(self) -> str:  # pragma: no cover
        return f"Parameter({self.name!r}, shape={self.value.shape})"


class Tape:
    """Records operations for reverse-order gradient replay.

    A tape and the parameters it watches must be confined to one worker at
    a time; replay order is the exact reverse of recording order, so
    gradients are bit-deterministic for a fixed op sequence.
    """

    def __init__(self, check_finite: bool = True):
        self.check_finite = check_finite
        self._steps: list[tuple[str, Tensor, object]] = []
        self._watched: dict[int, tuple[Parameter, Tensor]] = {}

    def watch(self, param: Parameter) -> Tensor:
        """Return the leaf tensor for ``param``, creating it on first use.

        Repeated calls within one tape return the same node, so a parameter
        used in several places accumulates a single combined gradient.
        """
        entry = self._watched.get(id(param))
        if entry is not None:
            return entry[1]
        leaf = Tensor(param.value, tape=self)
        self._watched[id(param)] = (param, leaf)
        return leaf

    def _record(self, name: str, out: Tensor, pull) -> None:
        if self.check_finite and not np.all(np.isfinite(out.value)):
            raise FloatingPointError(f"op '{name}' produced non-finite values")
        self._steps.append((name, out, pull))


def backward(tape: Tape, loss: Tensor) -> None:
    """Accumulate d(loss)/d(param) into every watched parameter's ``.grad``."""
    if loss.value.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.value.shape}")
    if loss.tape is not tape:
        raise ValueError("backward: loss was not recorded on this tape")
    loss.grad = np.ones_like(loss.value)
    for _name, out, pull in reversed(tape._steps):
        if out.grad is not None:
            pull(out.grad)
    for param, leaf in tape._watched.values():
        if leaf.grad is not None:
            param.grad += leaf.grad


def constant(value) -> Tensor:
    """Wrap an array as an untracked tensor (no gradient flows into it)."""
    return Tensor(value, None)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64), None)


def _tape_of(*tensors: Tensor) -> Tape | None:
    tape = None
    for t in tensors:
        if t.tape is not None:
            if tape is None:
                tape = t.tape
            elif tape is not t.tape:
                raise ValueError("operation inputs were recorded on different tapes")
    return tape


def _accum(t: Tensor, delta: np.ndarray) -> None:
    if t.tape is None:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.value)
    t.grad += delta


def _unary(name: str, x: Tensor, value: np.ndarray, dfdx) -> Tensor:
    """Build an elementwise op whose pull-back multiplies by ``dfdx``."""
    tape = _tape_of(x)
    out = Tensor(value, tape)
    if tape is not None:
        def pull(g):
            _accum(x, g * dfdx())
        tape._record(name, out, pull)
    return out


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.value.ndim != 2 or b.value.ndim != 2 or a.value.shape[1] != b.value.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.value.shape} @ {b.value.shape}")
    tape = _tape_of(a, b)
    out = Tensor(a.value @ b.value, tape)
    if tape is not None:
        def pull(g):
            _accum(a, g @ b.value.T)
            _accum(b, a.value.T @ g)
        tape._record("matmul", out, pull)
    return out


def transpose(a) -> Tensor:
    a = _as_tensor(a)
    if a.value.ndim != 2:
        raise ShapeError(f"transpose: need 2-D input, got {a.value.shape}")
    tape = _tape_of(a)
    out = Tensor(a.value.T.copy(), tape)
    if tape is not None:
        def pull(g):
            _accum(a, g.T)
        tape._record("transpose", out, pull)
    return out


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.value.shape != b.value.shape:
        raise ShapeError(f"add: shape mismatch {a.value.shape} vs {b.value.shape}")
    tape = _tape_of(a, b)
    out = Tensor(a.value + b.value, tape)
    if tape is not None:
        def pull(g):
            _accum(a, g)
            _accum(b, g)
        tape._record("add", out, pull)
    return out


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.value.shape != b.value.shape:
        raise ShapeError(f"sub: shape mismatch {a.value.shape} vs {b.value.shape}")
    tape = _tape_of(a, b)
    out = Tensor(a.value - b.value, tape)
    if tape is not None:
        def pull(g):
            _accum(a, g)
            _accum(b, -g)
        tape._record("sub", out, pull)
    return out


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.value.shape != b.value.shape:
        raise ShapeError(f"mul: shape mismatch {a.value.shape} vs {b.value.shape}")
    tape = _tape_of(a, b)
    out = Tensor(a.value * b.value, tape)
    if tape is not None:
        def pull(g):
            _accum(a, g * b.value)
            _accum(b, g * a.value)
        tape._record("mul", out, pull)
    return out


def scale(a, c: float) -> Tensor:
    a = _as_tensor(a)
    c = float(c)
    return _unary("scale", a, a.value * c, lambda: c)


def add_const(a, c: float) -> Tensor:
    a = _as_tensor(a)
    return _unary("add_const", a, a.value + float(c), lambda: 1.0)


def add_bias(x, b) -> Tensor:
    """Add a (1, d) bias row to every row of a (n, d) matrix."""
    x, b = _as_tensor(x), _as_tensor(b)
    if x.value.ndim != 2 or b.value.shape != (1, x.value.shape[1]):
        raise ShapeError(f"add_bias: got {x.value.shape} with bias {b.value.shape}")
    tape = _tape_of(x, b)
    out = Tensor(x.value + b.value, tape)
    if tape is not None:
        def pull(g):
            _accum(x, g)
            _accum(b, g.sum(axis=0, keepdims=True))
        tape._record("add_bias", out, pull)
    return out


def scale_rows(x, s) -> Tensor:
    """Multiply each row of (n, d) ``x`` by the matching (n, 1) scalar."""
    x, s = _as_tensor(x), _as_tensor(s)
    if x.value.ndim != 2 or s.value.shape != (x.value.shape[0], 1):
        raise ShapeError(f"scale_rows: got {x.value.shape} with scales {s.value.shape}")
    tape = _tape_of(x, s)
    out = Tensor(x.value * s.value, tape)
    if tape is not None:
        def pull(g):
            _accum(x, g * s.value)
            _accum(s, (g * x.value).sum(axis=1, keepdims=True))
        tape._record("scale_rows", out, pull)
    return out


def concat_cols(parts) -> Tensor:
    parts = [_as_tensor(p) for p in parts]
    if not parts:
        raise ShapeError("concat_cols: no inputs")
    n = parts[0].value.shape[0]
    if any(p.value.ndim != 2 or p.value.shape[0] != n for p in parts):
        raise ShapeError(f"concat_cols: row counts differ: {[p.value.shape for p in parts]}")
    tape = _tape_of(*parts)
    out = Tensor(np.concatenate([p.value for p in parts], axis=1), tape)
    if tape is not None:
        widths = [p.value.shape[1] for p in parts]
        def pull(g):
            at = 0
            for p, w in zip(parts, widths):
                _accum(p, g[:, at:at + w])
                at += w
        tape._record("concat_cols", out, pull)
    return out


def concat_rows(parts) -> Tensor:
    parts = [_as_tensor(p) for p in parts]
    if not parts:
        raise ShapeError("concat_rows: no inputs")
    d = parts[0].value.shape[1]
    if any(p.value.ndim != 2 or p.value.shape[1] != d for p in parts):
        raise ShapeError(f"concat_rows: column counts differ: {[p.value.shape for p in parts]}")
    tape = _tape_of(*parts)
    out = Tensor(np.concatenate([p.value for p in parts], axis=0), tape)
    if tape is not None:
        heights = [p.value.shape[0] for p in parts]
        def pull(g):
            at = 0
            for p, h in zip(parts, heights):
                _accum(p, g[at:at + h])
                at += h
        tape._record("concat_rows", out, pull)
    return out


def slice_cols(x, start: int, stop: int) -> Tensor:
    x = _as_tensor(x)
    if x.value.ndim != 2 or not (0 <= start < stop <= x.value.shape[1]):
        raise ShapeError(f"slice_cols: [{start}:{stop}] invalid for shape {x.value.shape}")
    tape = _tape_of(x)
    out = Tensor(x.value[:, start:stop].copy(), tape)
    if tape is not None:
        def pull(g):
            full = np.zeros_like(x.value)
            full[:, start:stop] = g
            _accum(x, full)
        tape._record("slice_cols", out, pull)
    return out


def gather_rows(x, indices) -> Tensor:
    """Select (with repeats allowed) rows of a 2-D tensor."""
    x = _as_tensor(x)
    idx = np.asarray(indices, dtype=np.intp)
    if x.value.ndim != 2 or idx.ndim != 1:
        raise ShapeError(f"gather_rows: shape {x.value.shape}, indices ndim {idx.ndim}")
    if idx.size and (idx.min() < 0 or idx.max() >= x.value.shape[0]):
        raise IndexError(f"gather_rows: index out of range for {x.value.shape[0]} rows")
    tape = _tape_of(x)
    out = Tensor(x.value[idx], tape)
    if tape is not None:
        def pull(g):
            dx = np.zeros_like(x.value)
            np.add.at(dx, idx, g)
            _accum(x, dx)
        tape._record("gather_rows", out, pull)
    return out


def select_timestep(states, positions) -> Tensor:
    """Per-row selection across a list of equally shaped (n, d) tensors.

    Row ``i`` of the output is row ``i`` of ``states[positions[i]]``.
    """
    states = [_as_tensor(s) for s in states]
    pos = np.asarray(positions, dtype=np.intp)
    if not states:
        raise ShapeError("select_timestep: no states")
    shape = states[0].value.shape
    if any(s.value.shape != shape for s in states):
        raise ShapeError("select_timestep: state shapes differ")
    if pos.shape != (shape[0],):
        raise ShapeError(f"select_timestep: positions shape {pos.shape} vs {shape[0]} rows")
    if pos.size and (pos.min() < 0 or pos.max() >= len(states)):
        raise IndexError(f"select_timestep: position out of range 0..{len(states) - 1}")
    tape = _tape_of(*states)
    value = np.empty(shape)
    for j in np.unique(pos):
        m = pos == j
        value[m] = states[j].value[m]
    out = Tensor(value, tape)
    if tape is not None:
        def pull(g):
            for j in np.unique(pos):
                m = pos == j
                d = np.zeros(shape)
                d[m] = g[m]
                _accum(states[j], d)
        tape._record("select_timestep", out, pull)
    return out


# ---------------------------------------------------------------------------
# activations and elementwise transforms


def relu(x) -> Tensor:
    x = _as_tensor(x)
    # subgradient at the kink is 0: the strict mask drops x == 0
    return _unary("relu", x, np.maximum(x.value, 0.0), lambda: (x.value > 0).astype(np.float64))


def _sigmoid_values(v: np.ndarray) -> np.ndarray:
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    ev = np.exp(v[~pos])
    out[~pos] = ev / (1.0 + ev)
    # keep the open interval even where float64 would saturate
    return np.clip(out, np.nextafter(0.0, 1.0), np.nextafter(1.0, 0.0))


def sigmoid(x) -> Tensor:
    x = _as_tensor(x)
    s = _sigmoid_values(x.value)
    return _unary("sigmoid", x, s, lambda: s * (1.0 - s))


def tanh(x) -> Tensor:
    x = _as_tensor(x)
    t = np.tanh(x.value)
    return _unary("tanh", x, t, lambda: 1.0 - t * t)


def log(x) -> Tensor:
    x = _as_tensor(x)
    if np.any(x.value <= 0):
        raise FloatingPointError("log: input has non-positive values")
    return _unary("log", x, np.log(x.value), lambda: 1.0 / x.value)


# ---------------------------------------------------------------------------
# reductions


def sum_all(x) -> Tensor:
    x = _as_tensor(x)
    tape = _tape_of(x)
    out = Tensor(np.array([[x.value.sum()]]), tape)
    if tape is not None:
        def pull(g):
            _accum(x, np.full_like(x.value, g[0, 0]))
        tape._record("sum_all", out, pull)
    return out


def mean_rows(x) -> Tensor:
    """Mean over rows of a (n, d) tensor, yielding (1, d)."""
    x = _as_tensor(x)
    if x.value.ndim != 2 or x.value.shape[0] == 0:
        raise ShapeError(f"mean_rows: need nonempty 2-D input, got {x.value.shape}")
    n = x.value.shape[0]
    tape = _tape_of(x)
    out = Tensor(x.value.mean(axis=0, keepdims=True), tape)
    if tape is not None:
        def pull(g):
            _accum(x, np.repeat(g, n, axis=0) / n)
        tape._record("mean_rows", out, pull)
    return out


def _check_segments(starts, n: int) -> tuple[np.ndarray, np.ndarray]:
    starts = np.asarray(starts, dtype=np.intp)
    if starts.ndim != 1 or starts.size < 2 or starts[0] != 0 or starts[-1] != n:
        raise ShapeError(f"segments: boundaries {starts!r} do not cover {n} rows")
    lengths = np.diff(starts)
    if np.any(lengths <= 0):
        raise ShapeError("segments: empty segment")
    return starts, lengths


def segment_sum(x, starts) -> Tensor:
    x = _as_tensor(x)
    if x.value.ndim != 2:
        raise ShapeError(f"segment_sum: need 2-D input, got {x.value.shape}")
    starts, lengths = _check_segments(starts, x.value.shape[0])
    tape = _tape_of(x)
    out = Tensor(np.add.reduceat(x.value, starts[:-1], axis=0), tape)
    if tape is not None:
        def pull(g):
            _accum(x, np.repeat(g, lengths, axis=0))
        tape._record("segment_sum", out, pull)
    return out


def segment_mean(x, starts) -> Tensor:
    x = _as_tensor(x)
    if x.value.ndim != 2:
        raise ShapeError(f"segment_mean: need 2-D input, got {x.value.shape}")
    starts, lengths = _check_segments(starts, x.value.shape[0])
    tape = _tape_of(x)
    out = Tensor(np.add.reduceat(x.value, starts[:-1], axis=0) / lengths[:, None], tape)
    if tape is not None:
        def pull(g):
            _accum(x, np.repeat(g / lengths[:, None], lengths, axis=0))
        tape._record("segment_mean", out, pull)
    return out


def _segment_argmax(v: np.ndarray, starts: np.ndarray, lengths: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Max and first-argmax row index per segment, per column."""
    seg_id = np.repeat(np.arange(lengths.size), lengths)
    maxv = np.maximum.reduceat(v, starts[:-1], axis=0)
    rows = np.arange(v.shape[0])[:, None]
    cand = np.where(v == maxv[seg_id], rows, v.shape[0])
    argmax = np.minimum.reduceat(cand, starts[:-1], axis=0)
    return maxv, argmax


def segment_max(x, starts) -> Tensor:
    """Per-segment, per-column max; gradient routes to the first maximum."""
    x = _as_tensor(x)
    if x.value.ndim != 2:
        raise ShapeError(f"segment_max: need 2-D input, got {x.value.shape}")
    starts, lengths = _check_segments(starts, x.value.shape[0])
    maxv, argmax = _segment_argmax(x.value, starts, lengths)
    tape = _tape_of(x)
    out = Tensor(maxv, tape)
    if tape is not None:
        d = x.value.shape[1]
        cols = np.tile(np.arange(d), lengths.size)
        def pull(g):
            dx = np.zeros_like(x.value)
            np.add.at(dx, (argmax.ravel(), cols), g.ravel())
            _accum(x, dx)
        tape._record("segment_max", out, pull)
    return out


def max_over(x) -> Tensor:
    """Max over all rows (single segment); ties go to the lowest row index."""
    x = _as_tensor(x)
    return segment_max(x, np.array([0, x.value.shape[0]]))


def segment_softmax(x, starts, temperature: float) -> Tensor:
    """Column-wise softmax of ``x / temperature`` within each row segment."""
    x = _as_tensor(x)
    if x.value.ndim != 2:
        raise ShapeError(f"segment_softmax: need 2-D input, got {x.value.shape}")
    t = float(temperature)
    if t <= 0:
        raise ValueError(f"segment_softmax: temperature must be positive, got {t}")
    starts, lengths = _check_segments(starts, x.value.shape[0])
    seg_id = np.repeat(np.arange(lengths.size), lengths)
    z = x.value / t
    z = z - np.maximum.reduceat(z, starts[:-1], axis=0)[seg_id]
    e = np.exp(z)
    p = e / np.add.reduceat(e, starts[:-1], axis=0)[seg_id]
    tape = _tape_of(x)
    out = Tensor(p, tape)
    if tape is not None:
        def pull(g):
            inner = np.add.reduceat(g * p, starts[:-1], axis=0)[seg_id]
            _accum(x, p * (g - inner) / t)
        tape._record("segment_softmax", out, pull)
    return out


def temperature_softmax(x, temperature: float) -> Tensor:
    """Softmax of ``x / temperature`` over all entries of a vector or column."""
    x = _as_tensor(x)
    v = x.value
    if v.ndim == 1:
        col = Tensor(v.reshape(-1, 1), x.tape)
        if x.tape is not None:
            def pull(g):
                _accum(x, g.reshape(v.shape))
            x.tape._record("reshape", col, pull)
        out = segment_softmax(col, np.array([0, v.size]), temperature)
        flat = Tensor(out.value.reshape(-1), x.tape)
        if x.tape is not None:
            def pull2(g):
                _accum(out, g.reshape(-1, 1))
            x.tape._record("reshape", flat, pull2)
        return flat
    return segment_softmax(x, np.array([0, v.shape[0]]), temperature)


# ---------------------------------------------------------------------------
# optimizer


def adam_step(params, lr: float, betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
    """Apply one bias-corrected Adam update to each parameter, then clear grads."""
    b1, b2 = betas
    for p in params:
        p.step += 1
        p.m *= b1
        p.m += (1.0 - b1) * p.grad
        p.v *= b2
        p.v += (1.0 - b2) * np.square(p.grad)
        mhat = p.m / (1.0 - b1 ** p.step)
        vhat = p.v / (1.0 - b2 ** p.step)
        p.value -= lr * mhat / (np.sqrt(vhat) + eps)
        p.zero_grad()
    return params


# ---------------------------------------------------------------------------
# gradient checking


@dataclass
class GradCheckReport:
    max_rel_error: float
    n_checked: int
    n_excluded: int
    worst: tuple[str, tuple] | None

    def __str__(self) -> str:
        where = f" at {self.worst[0]}{list(self.worst[1])}" if self.worst else ""
        return (f"max relative error {self.max_rel_error:.3e}{where} "
                f"({self.n_checked} coordinates, {self.n_excluded} excluded at kinks)")


def gradient_check(builder, params, eps: float = 1e-5, max_coords_per_param: int | None = None,
                   seed: int = 0, kink_tol: float = 1e-3, noise_ulps: float = 256.0) -> GradCheckReport:
    """Compare tape gradients of ``builder``'s loss against central differences.

    ``builder(tape)`` must reconstruct the same scalar loss from the current
    parameter values.  Coordinates where the loss is locally nondifferentiable
    (the two one-sided slopes disagree, e.g. a hinge active exactly at its
    kink) are excluded from the comparison and counted in the report.
    Large tensors can be subsampled with ``max_coords_per_param`` (seeded,
    deterministic).

    A central difference carries rounding noise of roughly ``ulp(loss)/eps``,
    so ``noise_ulps`` times that floor is subtracted from each disagreement
    before the relative error is formed; differences below the floor carry
    no information about the gradient either way.
    """
    params = list(params)

    def eval_loss() -> float:
        out = builder(Tape())
        f = out.item()
        if not np.isfinite(f):
            raise FloatingPointError("gradient_check: non-finite loss under perturbation")
        return f

    for p in params:
        p.zero_grad()
    tape = Tape()
    loss = builder(tape)
    backward(tape, loss)
    analytic = {p.name: p.grad.copy() for p in params}
    for p in params:
        p.zero_grad()
    f0 = loss.item()
    if not np.isfinite(f0):
        raise FloatingPointError("gradient_check: non-finite loss")

    rng = np.random.default_rng(seed)
    max_rel, worst = 0.0, None
    n_checked = n_excluded = 0
    for p in params:
        flat = p.value.reshape(-1)
        n = flat.size
        if max_coords_per_param is not None and n > max_coords_per_param:
            coords = np.sort(rng.choice(n, size=max_coords_per_param, replace=False))
        else:
            coords = np.arange(n)
        ga = analytic[p.name].reshape(-1)
        for i in coords:
            orig = flat[i]
            flat[i] = orig + eps
            f_plus = eval_loss()
            flat[i] = orig - eps
            f_minus = eval_loss()
            flat[i] = orig
            numeric = (f_plus - f_minus) / (2.0 * eps)
            one_sided_gap = abs((f_plus - f0) - (f0 - f_minus)) / eps
            if one_sided_gap > kink_tol * (1.0 + abs(numeric)):
                n_excluded += 1
                continue
            n_checked += 1
            a = ga[i]
            scale_f = max(1.0, abs(f0), abs(f_plus), abs(f_minus))
            noise_floor = noise_ulps * np.finfo(np.float64).eps * scale_f / (2.0 * eps)
            gap = abs(a - numeric) - noise_floor
            denom = max(abs(a), abs(numeric))
            if gap <= 0.0 or denom < 1e-7:
                continue
            rel = gap / denom
            if rel > max_rel:
                max_rel = rel
                worst = (p.name, np.unravel_index(i, p.value.shape))
    return GradCheckReport(max_rel, n_checked, n_excluded, worst)


# ---------------------------------------------------------------------------
# checkpoint archive: named tensors, versioned header, little-endian float64


_MAGIC = b"NTAR"
_VERSION = 1


def save_checkpoint(path, tensors: dict[str, np.ndarray]) -> None:
    """Write a named-tensor archive (row-major little-endian float64)."""
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<II", _VERSION, len(tensors)))
        for name, arr in tensors.items():
            a = np.ascontiguousarray(np.asarray(arr), dtype="<f8")
            nb = name.encode("utf-8")
            fh.write(struct.pack("<I", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<I", a.ndim))
            if a.ndim:
                fh.write(struct.pack(f"<{a.ndim}q", *a.shape))
            fh.write(a.tobytes())


def load_checkpoint(path, expected_shapes: dict[str, tuple[int, ...]] | None = None) -> dict[str, np.ndarray]:
    """Read a named-tensor archive; reject unknown versions and shape drift.

    When ``expected_shapes`` is given, every expected name must be present
    with exactly the expected shape.
    """
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != _MAGIC:
        raise ValueError(f"checkpoint {path}: bad magic {raw[:4]!r}")
    version, count = struct.unpack_from("<II", raw, 4)
    if version != _VERSION:
        raise ValueError(f"checkpoint {path}: unsupported version {version}")
    at = 12
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<I", raw, at)
        at += 4
        name = raw[at:at + name_len].decode("utf-8")
        at += name_len
        (ndim,) = struct.unpack_from("<I", raw, at)
        at += 4
        shape = struct.unpack_from(f"<{ndim}q", raw, at) if ndim else ()
        at += 8 * ndim
        size = int(np.prod(shape, dtype=np.int64)) if ndim else 1
        values = np.frombuffer(raw, dtype="<f8", count=size, offset=at).reshape(shape)
        at += 8 * size
        tensors[name] = values.astype(np.float64)
    if expected_shapes is not None:
        for name, shape in expected_shapes.items():
            if name not in tensors:
                raise ValueError(f"checkpoint {path}: missing tensor '{name}'")
            if tensors[name].shape != tuple(shape):
                raise ValueError(
                    f"checkpoint {path}: tensor '{name}' has shape "
                    f"{tensors[name].shape}, expected {tuple(shape)}")
    return tensors
