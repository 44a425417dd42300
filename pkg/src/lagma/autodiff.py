"""Dense float64 tensors with taped reverse-mode differentiation.

Everything runs on CPU numpy in double precision. A forward pass records each
primitive on a Tape together with a closure that maps the output gradient to
input gradients; ``backward`` replays the record in reverse, accumulating into
``Tensor.grad``. Passing ``tape=None`` to any primitive runs the identical
forward computation without recording, which keeps target-network evaluation
and greedy action selection cheap.

The op set is deliberately small and fused where it pays: a single GRU-cell
primitive covers the recurrent agents, and split/concat primitives move data
between time-major layout and per-step slices in one tape entry each.
"""

from __future__ import annotations

import logging
from typing import Callable, Sequence

import numpy as np

logger = logging.getLogger(__name__)

Array = np.ndarray


class ShapeError(ValueError):
    """Operands do not conform for a primitive."""


class Tensor:
    """A dense float64 array plus an optional gradient accumulator."""

    __slots__ = ("data", "grad")

    def __init__(self, data, grad: Array | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = grad

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape})"


class Tape:
    """Ordered record of applied primitives.

    Append order is a topological order of the forward graph, so the reverse
    walk in ``backward`` visits every node after all of its consumers. Each
    entry is ``(outputs, inputs, rule)`` where ``rule`` maps the gradients of
    ``outputs`` to gradients of ``inputs`` (None where nothing flows).
    """

    __slots__ = ("_entries",)

    def __init__(self):
        self._entries: list[tuple[tuple[Tensor, ...], tuple[Tensor, ...], Callable]] = []

    def record(self, outputs, inputs, rule) -> None:
        self._entries.append((outputs, inputs, rule))

    def __len__(self) -> int:
        return len(self._entries)


def backward(tape: Tape, loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into .grad for every tensor on the tape.

    The loss must be a scalar (shape ()). Gradients add into any existing
    .grad contents, so callers zero parameter gradients beforehand; a tape is
    meant to be walked once and discarded.
    """
    if loss.data.shape != ():
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.data.shape}")
    loss.grad = np.ones((), dtype=np.float64)
    for outputs, inputs, rule in reversed(tape._entries):
        out_grads = tuple(o.grad for o in outputs)
        if all(g is None for g in out_grads):
            continue
        in_grads = rule(*out_grads)
        for t, g in zip(inputs, in_grads):
            if g is None:
                continue
            if t.grad is None:
                # copy: rules may hand back a shared or aliased array
                t.grad = np.array(g)
            else:
                t.grad += g


def _unbroadcast(g: Array, shape: tuple[int, ...]) -> Array:
    """Sum g down to `shape`, undoing numpy broadcasting."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# primitives


def matmul(tape: Tape | None, a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul: {a.data.shape} @ {b.data.shape}")
    out = Tensor(a.data @ b.data)
    if tape is not None:
        ad, bd = a.data, b.data
        tape.record((out,), (a, b), lambda g: (g @ bd.T, ad.T @ g))
    return out


def matmul_nt(tape: Tape | None, a: Tensor, b: Tensor) -> Tensor:
    """a @ b.T in one entry (used for pairwise-distance expansions)."""
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[1]:
        raise ShapeError(f"matmul_nt: {a.data.shape} @ {b.data.shape}.T")
    out = Tensor(a.data @ b.data.T)
    if tape is not None:
        ad, bd = a.data, b.data
        tape.record((out,), (a, b), lambda g: (g @ bd, g.T @ ad))
    return out


def bmm(tape: Tape | None, a: Tensor, b: Tensor) -> Tensor:
    if (
        a.data.ndim != 3
        or b.data.ndim != 3
        or a.data.shape[0] != b.data.shape[0]
        or a.data.shape[2] != b.data.shape[1]
    ):
        raise ShapeError(f"bmm: {a.data.shape} @ {b.data.shape}")
    out = Tensor(a.data @ b.data)
    if tape is not None:
        ad, bd = a.data, b.data
        tape.record(
            (out,),
            (a, b),
            lambda g: (g @ bd.swapaxes(1, 2), ad.swapaxes(1, 2) @ g),
        )
    return out


def _broadcast_op(tape, a: Tensor, b: Tensor, fwd, da_rule, db_rule) -> Tensor:
    try:
        out = Tensor(fwd(a.data, b.data))
    except ValueError as exc:
        raise ShapeError(f"{fwd.__name__}: {a.data.shape} vs {b.data.shape}") from exc
    if tape is not None:
        a_shape, b_shape = a.data.shape, b.data.shape
        tape.record(
            (out,),
            (a, b),
            lambda g: (
                _unbroadcast(da_rule(g), a_shape),
                _unbroadcast(db_rule(g), b_shape),
            ),
        )
    return out


def add(tape: Tape | None, a: Tensor, b: Tensor) -> Tensor:
    return _broadcast_op(tape, a, b, np.add, lambda g: g, lambda g: g)


def sub(tape: Tape | None, a: Tensor, b: Tensor) -> Tensor:
    return _broadcast_op(tape, a, b, np.subtract, lambda g: g, lambda g: -g)


def mul(tape: Tape | None, a: Tensor, b: Tensor) -> Tensor:
    ad, bd = a.data, b.data
    return _broadcast_op(tape, a, b, np.multiply, lambda g: g * bd, lambda g: g * ad)


def cmul(tape: Tape | None, a: Tensor, c) -> Tensor:
    """Multiply by a constant scalar or ndarray (no gradient into c)."""
    c = np.asarray(c, dtype=np.float64)
    out = Tensor(a.data * c)
    if tape is not None:
        a_shape = a.data.shape
        tape.record((out,), (a,), lambda g: (_unbroadcast(g * c, a_shape),))
    return out


def relu(tape: Tape | None, a: Tensor) -> Tensor:
    out = Tensor(np.maximum(a.data, 0.0))
    if tape is not None:
        mask = a.data > 0.0
        tape.record((out,), (a,), lambda g: (g * mask,))
    return out


def elu(tape: Tape | None, a: Tensor) -> Tensor:
    neg = a.data < 0.0
    out_data = np.where(neg, np.expm1(np.minimum(a.data, 0.0)), a.data)
    out = Tensor(out_data)
    if tape is not None:
        slope = np.where(neg, out_data + 1.0, 1.0)
        tape.record((out,), (a,), lambda g: (g * slope,))
    return out


def abs_(tape: Tape | None, a: Tensor) -> Tensor:
    out = Tensor(np.abs(a.data))
    if tape is not None:
        sign = np.sign(a.data)
        tape.record((out,), (a,), lambda g: (g * sign,))
    return out


def sum_(tape: Tape | None, a: Tensor, axis: int | None = None) -> Tensor:
    out = Tensor(a.data.sum(axis=axis))
    if tape is not None:
        a_shape = a.data.shape

        def rule(g):
            if axis is None:
                return (np.broadcast_to(g, a_shape).copy(),)
            return (np.broadcast_to(np.expand_dims(g, axis), a_shape).copy(),)

        tape.record((out,), (a,), rule)
    return out


def sqsum(tape: Tape | None, a: Tensor, axis: int | None = None) -> Tensor:
    """Sum of squares along an axis (one entry for the d(x^2) chain)."""
    out = Tensor((a.data * a.data).sum(axis=axis))
    if tape is not None:
        ad = a.data

        def rule(g):
            if axis is None:
                return (2.0 * g * ad,)
            return (2.0 * np.expand_dims(g, axis) * ad,)

        tape.record((out,), (a,), rule)
    return out


def reshape(tape: Tape | None, a: Tensor, shape: tuple[int, ...]) -> Tensor:
    out = Tensor(a.data.reshape(shape))
    if tape is not None:
        a_shape = a.data.shape
        tape.record((out,), (a,), lambda g: (g.reshape(a_shape),))
    return out


def take_rows(tape: Tape | None, a: Tensor, idx: Array) -> Tensor:
    """Gather rows of a 2-D tensor; duplicate indices accumulate on backward."""
    if a.data.ndim != 2:
        raise ShapeError(f"take_rows: need 2-D, got {a.data.shape}")
    idx = np.asarray(idx, dtype=np.int64)
    out = Tensor(a.data[idx])
    if tape is not None:
        a_shape = a.data.shape

        def rule(g):
            acc = np.zeros(a_shape)
            np.add.at(acc, idx, g)
            return (acc,)

        tape.record((out,), (a,), rule)
    return out


def gather_last(tape: Tape | None, a: Tensor, idx: Array) -> Tensor:
    """Pick one entry along the last axis per leading position."""
    idx = np.asarray(idx, dtype=np.int64)
    if idx.shape != a.data.shape[:-1]:
        raise ShapeError(f"gather_last: idx {idx.shape} vs data {a.data.shape}")
    out = Tensor(np.take_along_axis(a.data, idx[..., None], axis=-1)[..., 0])
    if tape is not None:
        a_shape = a.data.shape

        def rule(g):
            acc = np.zeros(a_shape)
            np.put_along_axis(acc, idx[..., None], g[..., None], axis=-1)
            return (acc,)

        tape.record((out,), (a,), rule)
    return out


def split_rows(tape: Tape | None, a: Tensor, parts: int) -> list[Tensor]:
    """Split axis 0 into equal parts; one tape entry for the whole family."""
    n = a.data.shape[0]
    if n % parts != 0:
        raise ShapeError(f"split_rows: {n} rows into {parts} parts")
    step = n // parts
    outs = [Tensor(a.data[i * step : (i + 1) * step]) for i in range(parts)]
    if tape is not None:
        a_shape = a.data.shape

        def rule(*gs):
            acc = np.zeros(a_shape)
            for i, g in enumerate(gs):
                if g is not None:
                    acc[i * step : (i + 1) * step] = g
            return (acc,)

        tape.record(tuple(outs), (a,), rule)
    return outs


def concat_rows(tape: Tape | None, parts: Sequence[Tensor]) -> Tensor:
    out = Tensor(np.concatenate([p.data for p in parts], axis=0))
    if tape is not None:
        sizes = [p.data.shape[0] for p in parts]
        offsets = np.concatenate([[0], np.cumsum(sizes)])

        def rule(g):
            return tuple(g[offsets[i] : offsets[i + 1]] for i in range(len(sizes)))

        tape.record((out,), tuple(parts), rule)
    return out


def stop_grad(a: Tensor) -> Tensor:
    """Detach: a fresh leaf sharing the value, receiving no gradient."""
    return Tensor(a.data)


def straight_through(tape: Tape | None, value: Array, bypass: Tensor) -> Tensor:
    """Forward an arbitrary value, route the whole gradient to `bypass`."""
    value = np.asarray(value, dtype=np.float64)
    if value.shape != bypass.data.shape:
        raise ShapeError(f"straight_through: {value.shape} vs {bypass.data.shape}")
    out = Tensor(value)
    if tape is not None:
        tape.record((out,), (bypass,), lambda g: (g,))
    return out


def _sigmoid(x: Array) -> Array:
    # tanh form: stable at both tails and a single C-level pass.
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def gru_cell(tape: Tape | None, gx: Tensor, gh: Tensor, h: Tensor) -> Tensor:
    """Fused GRU cell.

    gx: input-side gate preactivations [N, 3H] (reset | update | candidate),
    with any biases already folded in. gh: hidden-side preactivations [N, 3H].
    h: previous hidden state [N, H]. Returns the next hidden state.
    """
    n_rows, h3 = gx.data.shape
    hdim = h.data.shape[1]
    if h3 != 3 * hdim or gh.data.shape != (n_rows, h3) or h.data.shape[0] != n_rows:
        raise ShapeError(
            f"gru_cell: gx {gx.data.shape}, gh {gh.data.shape}, h {h.data.shape}"
        )
    xr, xz, xn = gx.data[:, :hdim], gx.data[:, hdim : 2 * hdim], gx.data[:, 2 * hdim :]
    hr, hz, hn = gh.data[:, :hdim], gh.data[:, hdim : 2 * hdim], gh.data[:, 2 * hdim :]
    r = _sigmoid(xr + hr)
    z = _sigmoid(xz + hz)
    n = np.tanh(xn + r * hn)
    out = Tensor(n + z * (h.data - n))
    if tape is not None:
        hd = h.data

        def rule(g):
            dn = g * (1.0 - z)
            dz = g * (hd - n)
            dh = g * z
            dpre_n = dn * (1.0 - n * n)
            dr = dpre_n * hn
            dpre_r = dr * r * (1.0 - r)
            dpre_z = dz * z * (1.0 - z)
            dgx = np.concatenate([dpre_r, dpre_z, dpre_n], axis=1)
            dgh = np.concatenate([dpre_r, dpre_z, dpre_n * r], axis=1)
            return dgx, dgh, dh

        tape.record((out,), (gx, gh, h), rule)
    return out


# ---------------------------------------------------------------------------
# parameters and optimization


class ParamSet:
    """Named float64 parameters with preallocated gradient buffers."""

    def __init__(self):
        self._tensors: dict[str, Tensor] = {}

    def add(self, name: str, data) -> Tensor:
        if name in self._tensors:
            raise ValueError(f"duplicate parameter {name!r}")
        arr = np.array(data, dtype=np.float64)
        t = Tensor(arr, grad=np.zeros_like(arr))
        self._tensors[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self._tensors

    def names(self) -> list[str]:
        return list(self._tensors)

    def zero_grad(self) -> None:
        for t in self._tensors.values():
            t.grad[...] = 0.0

    def copy_from(self, other: "ParamSet") -> None:
        if other.names() != self.names():
            raise ValueError("parameter sets do not match")
        for name, t in self._tensors.items():
            t.data[...] = other[name].data

    def clone(self) -> "ParamSet":
        out = ParamSet()
        for name, t in self._tensors.items():
            out.add(name, t.data.copy())
        return out

    def n_values(self) -> int:
        return sum(t.data.size for t in self._tensors.values())


def uniform_fan_in(rng: np.random.Generator, fan_in: int, shape) -> Array:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def clip_grad_norm(params: ParamSet, max_norm: float) -> float:
    """Scale all gradients so their global L2 norm is at most max_norm."""
    total = 0.0
    for name in params.names():
        g = params[name].grad
        total += float((g * g).sum())
    norm = float(np.sqrt(total))
    if norm > max_norm:
        factor = max_norm / norm
        for name in params.names():
            params[name].grad *= factor
    return norm


class Adam:
    """Adam with per-parameter moment buffers.

    A step with any non-finite gradient is skipped entirely (with a warning)
    rather than poisoning the moments.
    """

    def __init__(self, lr: float = 5e-4, beta1: float = 0.9, beta2: float = 0.99,
                 eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m: dict[str, Array] = {}
        self.v: dict[str, Array] = {}

    def step(self, params: ParamSet) -> bool:
        for name in params.names():
            if not np.isfinite(params[name].grad).all():
                logger.warning("skipping update: non-finite gradient in %s", name)
                return False
        self.step_count += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.step_count
        c2 = 1.0 - b2 ** self.step_count
        for name in params.names():
            t = params[name]
            g = t.grad
            if name not in self.m:
                self.m[name] = np.zeros_like(t.data)
                self.v[name] = np.zeros_like(t.data)
            m = self.m[name]
            v = self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            t.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
        return True


def grad_check(
    fn: Callable[[Tape | None], Tensor],
    params: ParamSet,
    n_probes: int = 64,
    rng: np.random.Generator | None = None,
    step: float = 1e-5,
) -> float:
    """Compare taped gradients against central finite differences.

    fn maps an optional tape to a scalar loss, reading `params`; it must be
    deterministic (two no-tape evaluations are compared bitwise first). Probes
    are distinct coordinates sampled across the whole parameter vector.
    Returns the maximum relative error |a - n| / max(1e-8, |a| + |n|).
    """
    if rng is None:
        rng = np.random.default_rng(0)
    v1 = fn(None).item()
    v2 = fn(None).item()
    if v1 != v2:
        raise ValueError("grad_check needs a deterministic function of params")

    params.zero_grad()
    tape = Tape()
    loss = fn(tape)
    backward(tape, loss)

    names = params.names()
    sizes = [params[n].data.size for n in names]
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    total = int(offsets[-1])
    count = min(n_probes, total)
    coords = rng.choice(total, size=count, replace=False)

    worst = 0.0
    for flat in coords:
        k = int(np.searchsorted(offsets, flat, side="right") - 1)
        off = int(flat - offsets[k])
        data = params[names[k]].data
        orig = data.flat[off]
        data.flat[off] = orig + step
        f_plus = fn(None).item()
        data.flat[off] = orig - step
        f_minus = fn(None).item()
        data.flat[off] = orig
        numeric = (f_plus - f_minus) / (2.0 * step)
        analytic = params[names[k]].grad.flat[off]
        err = abs(analytic - numeric) / max(1e-8, abs(analytic) + abs(numeric))
        worst = max(worst, err)
    return worst
