"""Minimal optimizers over named parameter dicts, with serializable state."""

from __future__ import annotations

import numpy as np

from .errors import InputError, NumericalError

OPTIMIZERS = ("sgd", "sgd-momentum", "adam")
SCHEDULERS = ("constant", "linear-decay")


class Optimizer:
    """sgd / sgd-momentum / adam with a constant or linearly decaying rate.

    Parameters are passed as {name: array}; state arrays are keyed by the
    same names so checkpoints can round-trip them exactly.
    """

    def __init__(self, kind: str, lr: float, scheduler: str = "constant",
                 total_steps: int | None = None, momentum: float = 0.9,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        if kind not in OPTIMIZERS:
            raise InputError(f"unknown optimizer {kind!r}; choose from {OPTIMIZERS}")
        if scheduler not in SCHEDULERS:
            raise InputError(f"unknown scheduler {scheduler!r}; choose from {SCHEDULERS}")
        if scheduler == "linear-decay" and not total_steps:
            raise InputError("linear-decay needs total_steps")
        if lr <= 0:
            raise InputError("learning rate must be positive")
        self.kind = kind
        self.lr = float(lr)
        self.scheduler = scheduler
        self.total_steps = total_steps
        self.momentum = momentum
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.slots: dict[str, np.ndarray] = {}

    def current_lr(self) -> float:
        if self.scheduler == "constant":
            return self.lr
        frac = min(self.t / self.total_steps, 1.0)
        return self.lr * (1.0 - frac)

    def step(self, params: dict[str, np.ndarray],
             grads: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
        for name in sorted(grads):
            if not np.all(np.isfinite(grads[name])):
                raise NumericalError("non-finite gradient", parameter=name)
        lr = self.current_lr()
        self.t += 1
        out = {}
        for name in sorted(params):
            p, g = params[name], grads[name]
            if self.kind == "sgd":
                out[name] = p - lr * g
            elif self.kind == "sgd-momentum":
                buf = self.slots.setdefault(f"{name}.v", np.zeros_like(p))
                buf = self.momentum * buf + g
                self.slots[f"{name}.v"] = buf
                out[name] = p - lr * buf
            else:  # adam
                m = self.slots.setdefault(f"{name}.m", np.zeros_like(p))
                v = self.slots.setdefault(f"{name}.v", np.zeros_like(p))
                m = self.beta1 * m + (1 - self.beta1) * g
                v = self.beta2 * v + (1 - self.beta2) * (g * g)
                self.slots[f"{name}.m"] = m
                self.slots[f"{name}.v"] = v
                mhat = m / (1 - self.beta1 ** self.t)
                vhat = v / (1 - self.beta2 ** self.t)
                out[name] = p - lr * mhat / (np.sqrt(vhat) + self.eps)
        return out

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {f"opt.{k}": v for k, v in self.slots.items()}

    def state_meta(self) -> dict:
        return {"kind": self.kind, "lr": self.lr, "scheduler": self.scheduler,
                "total_steps": self.total_steps, "t": self.t}

    def load_state(self, arrays: dict[str, np.ndarray], meta: dict) -> None:
        if meta["kind"] != self.kind:
            raise InputError(f"checkpoint optimizer {meta['kind']} != {self.kind}")
        self.t = int(meta["t"])
        # keep the original schedule horizon so a resumed run decays
        # exactly like the uninterrupted one
        if meta.get("total_steps") is not None:
            self.total_steps = int(meta["total_steps"])
        self.slots = {k[len("opt."):]: np.asarray(v, dtype=np.float64)
                      for k, v in arrays.items() if k.startswith("opt.")}
