"""Parameter containers, initialization, and the Adam update rule."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import AutodiffError, Tensor


class ParamStore:
    """Ordered mapping from dotted names to trainable tensors.

    Iteration order is insertion order, which fixes the serialization layout
    of checkpoints and the update order of the optimizer.
    """

    def __init__(self) -> None:
        self._params: dict[str, Tensor] = {}

    def add(self, name: str, value: np.ndarray, requires_grad: bool = True) -> Tensor:
        if name in self._params:
            raise AutodiffError(f"duplicate parameter name: {name!r}")
        t = Tensor(value, requires_grad=requires_grad)
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        try:
            return self._params[name]
        except KeyError:
            raise KeyError(f"no parameter named {name!r}") from None

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def items(self) -> list[tuple[str, Tensor]]:
        return list(self._params.items())

    def tensors(self) -> list[Tensor]:
        return list(self._params.values())

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.zero_grad()

    def detached(self) -> "ParamStore":
        """A view with the same arrays but requires_grad=False everywhere.

        Running a network on a detached store keeps its parameters out of
        the tape, so a loss through it only differentiates the inputs.
        """
        out = ParamStore()
        for name, t in self._params.items():
            frozen = Tensor(t.data, requires_grad=False)
            frozen.data = t.data  # share storage, no copy
            out._params[name] = frozen
        return out

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self._params.items()}

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        missing = [n for n in self._params if n not in arrays]
        extra = [n for n in arrays if n not in self._params]
        if missing or extra:
            raise AutodiffError(
                f"parameter name mismatch: missing {missing}, unexpected {extra}"
            )
        for name, t in self._params.items():
            arr = np.asarray(arrays[name], dtype=np.float64)
            if arr.shape != t.shape:
                raise AutodiffError(
                    f"parameter {name!r}: shape {arr.shape} != expected {t.shape}"
                )
            t.data = np.ascontiguousarray(arr)


def fan_in_normal(rng: np.random.Generator, shape: tuple[int, ...], gain: float = 0.1) -> np.ndarray:
    """Kaiming-style normal draw scaled down for residual-dense stability.

    fan_in is the product of all dims after the first (input channels times
    kernel taps); std = gain * sqrt(2 / fan_in).
    """
    fan_in = int(np.prod(shape[1:])) if len(shape) > 1 else int(shape[0])
    std = gain * np.sqrt(2.0 / fan_in)
    return rng.normal(0.0, std, size=shape)


@dataclass(frozen=True)
class AdamConfig:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self) -> None:
        if not np.isfinite(self.lr) or self.lr < 0:
            raise AutodiffError(f"lr must be finite and >= 0, got {self.lr}")
        for name, beta in (("beta1", self.beta1), ("beta2", self.beta2)):
            if not 0.0 <= beta < 1.0:
                raise AutodiffError(f"{name} must be in [0, 1), got {beta}")
        if self.eps <= 0:
            raise AutodiffError(f"eps must be > 0, got {self.eps}")


@dataclass
class AdamState:
    """First/second moment buffers keyed like the store they update."""

    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def adam_state_for(store: ParamStore) -> AdamState:
    state = AdamState()
    for name, t in store.items():
        state.m[name] = np.zeros(t.shape)
        state.v[name] = np.zeros(t.shape)
    return state


def adam_step(store: ParamStore, state: AdamState, config: AdamConfig) -> None:
    """One bias-corrected Adam update over every parameter in the store.

    Parameters are replaced out of place (fresh arrays), so tensors captured
    by earlier tape nodes keep the values used in their forward pass. Grad
    buffers are cleared afterwards.
    """
    state.step += 1
    t = state.step
    bc1 = 1.0 - config.beta1**t
    bc2 = 1.0 - config.beta2**t
    for name, p in store.items():
        g = p.grad
        m = state.m[name]
        v = state.v[name]
        m *= config.beta1
        m += (1.0 - config.beta1) * g
        v *= config.beta2
        v += (1.0 - config.beta2) * g * g
        m_hat = m / bc1
        v_hat = v / bc2
        p.data = p.data - config.lr * m_hat / (np.sqrt(v_hat) + config.eps)
    store.zero_grad()
