"""Parameter containers, MLP building blocks, Adam, and checkpoint I/O."""

from __future__ import annotations

import json
import os

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


class ParamStore:
    """Named float64 parameters with per-parameter Adam moments.

    Names are dotted paths (e.g. ``"enc.w0"``); the first component is the
    parameter-group tag used by the trainer to mask gradients.
    """

    def __init__(self):
        self.params: dict[str, Tensor] = {}
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.step = 0
        self.frozen: set[str] = set()

    def add(self, name: str, value: np.ndarray) -> Tensor:
        if name in self.params:
            raise ValueError(f"duplicate parameter name: {name}")
        t = Tensor(np.asarray(value, dtype=np.float64))
        self.params[name] = t
        self.m[name] = np.zeros_like(t.data)
        self.v[name] = np.zeros_like(t.data)
        return t

    def freeze(self, name: str):
        if name not in self.params:
            raise KeyError(name)
        self.frozen.add(name)

    def names(self) -> list[str]:
        return list(self.params.keys())

    def group_of(self, name: str) -> str:
        return name.split(".", 1)[0]

    def tensors(self) -> list[Tensor]:
        return [self.params[n] for n in self.params]

    def reset_moments(self):
        """Zero the Adam moments and step counter (fresh optimizer state)."""
        for n in self.params:
            self.m[n][...] = 0.0
            self.v[n][...] = 0.0
        self.step = 0

    def adam_step(self, grads: dict[str, np.ndarray], lr: float):
        """One Adam update. Frozen parameters and missing grads are skipped."""
        self.step += 1
        t = self.step
        bc1 = 1.0 - ADAM_BETA1 ** t
        bc2 = 1.0 - ADAM_BETA2 ** t
        for name, p in self.params.items():
            g = grads.get(name)
            if g is None or name in self.frozen:
                continue
            if not np.all(np.isfinite(g)):
                raise FloatingPointError(f"non-finite gradient for parameter {name!r}")
            m = self.m[name]
            v = self.v[name]
            m *= ADAM_BETA1
            m += (1.0 - ADAM_BETA1) * g
            v *= ADAM_BETA2
            v += (1.0 - ADAM_BETA2) * g * g
            p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + ADAM_EPS)

    # -- checkpoint format ----------------------------------------------------
    # One file: a JSON manifest line (names, shapes, optimizer step) followed
    # by little-endian float64 payloads in manifest order. Each parameter is
    # stored as value, then its two Adam moments.

    def save(self, path: str):
        manifest = {
            "version": 1,
            "step": self.step,
            "names": list(self.params.keys()),
            "shapes": {n: list(self.params[n].shape) for n in self.params},
            "frozen": sorted(self.frozen),
            "moments": True,
        }
        with open(path, "wb") as f:
            f.write(json.dumps(manifest, sort_keys=True).encode() + b"\n")
            for n in manifest["names"]:
                f.write(self.params[n].data.astype("<f8").tobytes())
                f.write(self.m[n].astype("<f8").tobytes())
                f.write(self.v[n].astype("<f8").tobytes())

    def load(self, path: str):
        with open(path, "rb") as f:
            manifest = json.loads(f.readline().decode())
            if set(manifest["names"]) != set(self.params.keys()):
                missing = set(self.params.keys()) ^ set(manifest["names"])
                raise ValueError(f"checkpoint/model parameter mismatch: {sorted(missing)}")
            self.step = manifest["step"]
            self.frozen = set(manifest.get("frozen", []))
            for n in manifest["names"]:
                shape = tuple(manifest["shapes"][n])
                if shape != self.params[n].shape:
                    raise ValueError(
                        f"checkpoint shape mismatch for {n!r}: "
                        f"{shape} vs {self.params[n].shape}"
                    )
                count = int(np.prod(shape)) if shape else 1
                for target in (self.params[n].data, self.m[n], self.v[n]):
                    buf = f.read(count * 8)
                    target[...] = np.frombuffer(buf, dtype="<f8").reshape(shape)


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    scale = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-scale, scale, size=(fan_in, fan_out))


class MLP:
    """Fully-connected ReLU network.

    ``dims = [in, h1, ..., out]``. With ``heads=1`` the final layer is a
    single linear map; with ``heads=2`` the last hidden layer feeds separate
    linear (mean, log-variance) heads.
    """

    def __init__(self, store: ParamStore, prefix: str, rng: np.random.Generator,
                 dims: list[int], heads: int = 1, logvar_bias: float = 0.0):
        self.prefix = prefix
        self.heads = heads
        body = dims[:-1] if heads == 2 else dims
        self.ws = []
        self.bs = []
        for i, (din, dout) in enumerate(zip(body[:-1], body[1:])):
            self.ws.append(store.add(f"{prefix}.w{i}", glorot(rng, din, dout)))
            self.bs.append(store.add(f"{prefix}.b{i}", np.zeros(dout)))
        if heads == 2:
            hidden, out = dims[-2], dims[-1]
            self.mean_w = store.add(f"{prefix}.mean_w", glorot(rng, hidden, out))
            self.mean_b = store.add(f"{prefix}.mean_b", np.zeros(out))
            self.logvar_w = store.add(f"{prefix}.logvar_w", glorot(rng, hidden, out))
            self.logvar_b = store.add(f"{prefix}.logvar_b", np.full(out, logvar_bias))

    def __call__(self, x: Tensor):
        vec = len(x.shape) == 1
        h = ad.reshape(x, (1,) + x.shape) if vec else x
        for i, (w, b) in enumerate(zip(self.ws, self.bs)):
            h = ad.add(ad.matmul(h, w), b)
            if self.heads == 2 or i < len(self.ws) - 1:
                h = ad.relu(h)
        if self.heads == 1:
            return ad.reshape(h, h.shape[1:]) if vec else h
        mean = ad.add(ad.matmul(h, self.mean_w), self.mean_b)
        logvar = ad.add(ad.matmul(h, self.logvar_w), self.logvar_b)
        if vec:
            mean = ad.reshape(mean, mean.shape[1:])
            logvar = ad.reshape(logvar, logvar.shape[1:])
        return mean, logvar
