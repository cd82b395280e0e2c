"""Dense float64 tensors, a define-by-run tape and the reverse pass."""

from __future__ import annotations

from typing import Callable, Iterator, Optional, Sequence

import numpy as np


class ShapeError(ValueError):
    """Operand shapes are incompatible for a kernel."""

    def __init__(self, op: str, *shapes, detail: str = ""):
        self.op = op
        self.shapes = tuple(tuple(s) for s in shapes)
        msg = f"{op}: incompatible shapes " + " vs ".join(str(s) for s in self.shapes)
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class NonFiniteError(FloatingPointError):
    """An op produced NaN or Inf."""


class TapeError(RuntimeError):
    pass


class Tensor:
    """Value-semantic array with an optional gradient slot.

    Leaves created with ``requires_grad=True`` own a ``grad`` array of the same
    shape that the reverse pass accumulates into.  Op outputs only carry the
    ``requires_grad`` flag; their adjoints live inside :func:`backward`.
    """

    __slots__ = ("data", "requires_grad", "grad", "name", "_leaf")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        arr = np.array(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(arr) if requires_grad else None
        self.name = name
        self._leaf = True

    @classmethod
    def _result(cls, data: np.ndarray, requires_grad: bool) -> "Tensor":
        out = cls.__new__(cls)
        out.data = data
        out.requires_grad = requires_grad
        out.grad = None
        out.name = None
        out._leaf = False
        return out

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad[...] = 0.0

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    # operator sugar; the kernels live in ops.py
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops
        return ops.add(ops.neg(self), other)

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        from . import ops
        if isinstance(other, Tensor):
            return ops.div(self, other)
        return ops.mul(self, 1.0 / float(other))

    def __neg__(self):
        from . import ops
        return ops.neg(self)

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)

    def __getitem__(self, key):
        from . import ops
        return ops.index(self, key)


BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class _Node:
    __slots__ = ("out", "inputs", "backward", "op")

    def __init__(self, out, inputs, backward, op):
        self.out = out
        self.inputs = inputs
        self.backward = backward
        self.op = op


_ACTIVE: list = []


class Tape:
    """Ordered record of differentiable ops executed while the tape is active.

    >>> with Tape() as tape:
    ...     loss = some_scalar_computation()
    >>> backward(loss, tape)
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self.consumed = False
        self._outputs: set[int] = set()

    def __enter__(self) -> "Tape":
        if self.consumed:
            raise TapeError("tape already consumed")
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE.remove(self)

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, out: Tensor, inputs: tuple, backward: BackwardFn, op: str) -> None:
        self.nodes.append(_Node(out, inputs, backward, op))
        self._outputs.add(id(out))


def active_tape() -> Optional[Tape]:
    return _ACTIVE[-1] if _ACTIVE else None


class no_record:
    """Context manager that suspends recording (inference, finite differences)."""

    def __enter__(self):
        self._saved = list(_ACTIVE)
        _ACTIVE.clear()
        return self

    def __exit__(self, *exc):
        _ACTIVE.extend(self._saved)


def make_result(data: np.ndarray, inputs: tuple, backward: BackwardFn, op: str) -> Tensor:
    """Wrap an op's forward value and register its backward on the active tape."""
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"{op}: produced non-finite values")
    req = any(t.requires_grad for t in inputs)
    out = Tensor._result(data, req)
    if req:
        tape = active_tape()
        if tape is not None:
            tape.record(out, inputs, backward, op)
    return out


def backward(loss: Tensor, tape: Tape, store: Optional["ParamStore"] = None) -> None:
    """Replay ``tape`` in reverse, accumulating d(loss)/d(leaf) into ``leaf.grad``.

    Parameters of ``store`` that the loss does not reach keep whatever gradient
    they held before (zero after :meth:`ParamStore.zero_grad`).
    """
    if loss.size != 1:
        raise TapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if tape.consumed:
        raise TapeError("tape already consumed")
    if loss._leaf:
        if loss.requires_grad:
            loss.grad += 1.0
        tape.consumed = True
        return
    if id(loss) not in tape._outputs:
        raise TapeError("loss was not computed through this tape")

    adjoints: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = adjoints.pop(id(node.out), None)
        if g is None:
            continue
        grads = node.backward(g)
        for inp, gi in zip(node.inputs, grads):
            if gi is None or not inp.requires_grad:
                continue
            if gi.shape != inp.data.shape:
                raise ShapeError(f"{node.op}.backward", gi.shape, inp.data.shape)
            if inp._leaf:
                inp.grad += gi
            else:
                key = id(inp)
                prev = adjoints.get(key)
                adjoints[key] = gi if prev is None else prev + gi
    tape.consumed = True
    tape.nodes = []
    tape._outputs = set()
    if store is not None:
        for name, p in store.items():
            if not np.all(np.isfinite(p.grad)):
                raise NonFiniteError(f"non-finite gradient for {name}")


class ParamStore:
    """Name -> trainable tensor map with dot-separated hierarchical names.

    Iteration is lexicographic by name, so anything that walks the store
    (optimizers, checkpoints, gradient checks) is order-deterministic.
    """

    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self._buffers: dict[str, np.ndarray] = {}

    def add(self, name: str, value, requires_grad: bool = True) -> Tensor:
        if name in self._params or name in self._buffers:
            raise KeyError(f"duplicate parameter name {name!r}")
        t = value if isinstance(value, Tensor) else Tensor(value, requires_grad=requires_grad, name=name)
        if t.grad is None:
            t.requires_grad = True
            t.grad = np.zeros_like(t.data)
        t.name = name
        self._params[name] = t
        return t

    def add_buffer(self, name: str, value) -> np.ndarray:
        """Non-trainable state (batch-norm running statistics)."""
        if name in self._params or name in self._buffers:
            raise KeyError(f"duplicate buffer name {name!r}")
        arr = np.array(value, dtype=np.float64)
        self._buffers[name] = arr
        return arr

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return sorted(self._params)

    def items(self) -> Iterator[tuple[str, Tensor]]:
        for name in sorted(self._params):
            yield name, self._params[name]

    def buffers(self) -> Iterator[tuple[str, np.ndarray]]:
        for name in sorted(self._buffers):
            yield name, self._buffers[name]

    def buffer(self, name: str) -> np.ndarray:
        return self._buffers[name]

    def zero_grad(self) -> None:
        for p in self._params.values():
            p.grad[...] = 0.0

    def num_values(self) -> int:
        return sum(p.size for p in self._params.values())

    def state_arrays(self) -> dict[str, np.ndarray]:
        """Every parameter and buffer by name, for serialization."""
        out = {f"param/{k}": v.data for k, v in self.items()}
        out.update({f"buffer/{k}": v for k, v in self.buffers()})
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for key, arr in arrays.items():
            kind, name = key.split("/", 1)
            target = self._params[name].data if kind == "param" else self._buffers[name]
            if target.shape != arr.shape:
                raise ShapeError("load_state", target.shape, arr.shape, detail=name)
            target[...] = arr
