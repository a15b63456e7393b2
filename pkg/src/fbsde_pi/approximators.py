"""Trial functions for the value and gradient processes.

Each model keeps all trainable reals in one flat ``theta`` array so that
optimisers and finite-difference checks can treat it as a vector. Inputs are
batched: ``s`` has shape ``(N,)`` (or is a scalar) and ``x`` has shape ``(N, n)``.
"""

from __future__ import annotations

import os

import numpy as np

__all__ = [
    "QuadValueModel",
    "QuadGradModel",
    "MlpModel",
    "fd_grad",
    "save_params",
    "load_params",
]


class _Model:
    kind = "model"
    out_dim = 1
    scalar = True

    def get_params(self) -> np.ndarray:
        return self.theta.copy()

    def set_params(self, theta) -> None:
        theta = np.asarray(theta, dtype=float)
        if theta.shape != self.theta.shape:
            raise ValueError(f"expected {self.theta.shape[0]} parameters, got {theta.shape}")
        self.theta[...] = theta

    @property
    def n_params(self) -> int:
        return self.theta.size

    def header(self) -> dict:
        return {"kind": self.kind}


class QuadValueModel(_Model):
    """``v(s, x) = theta * |x|^2``."""

    kind = "quad_value"

    def __init__(self, theta: float = 0.0):
        self.theta = np.array([float(theta)])

    def forward(self, s, x):
        return self.theta[0] * np.einsum("ij,ij->i", x, x)

    def param_grad(self, s, x, upstream):
        return np.array([np.dot(np.asarray(upstream).reshape(-1), np.einsum("ij,ij->i", x, x))])

    def input_grad(self, s, x):
        return 2.0 * self.theta[0] * x

    def copy(self):
        return QuadValueModel(self.theta[0])


class QuadGradModel(_Model):
    """``z(s, x) = 2 theta x``."""

    kind = "quad_grad"
    scalar = False

    def __init__(self, theta: float = 0.0, dim: int = 1):
        self.theta = np.array([float(theta)])
        self.out_dim = dim

    def forward(self, s, x):
        return 2.0 * self.theta[0] * x

    def param_grad(self, s, x, upstream):
        return np.array([2.0 * np.vdot(upstream, x)])

    def input_grad(self, s, x):
        raise TypeError("input_grad is only defined for scalar-output models")

    def copy(self):
        return QuadGradModel(self.theta[0], self.out_dim)

    def header(self) -> dict:
        return {"kind": self.kind, "dim": self.out_dim}


class MlpModel(_Model):
    """One hidden tanh layer on the concatenated input ``[s, x]``.

    Weights are drawn from ``U(-1/sqrt(fan_in), 1/sqrt(fan_in))`` with a
    seeded generator; ``out_scale`` multiplies the output-layer draw
    (``0`` starts the model at the zero function).
    """

    kind = "mlp"

    def __init__(
        self,
        n: int,
        hidden: int = 16,
        out_dim: int = 1,
        seed: int = 0,
        scalar: bool | None = None,
        out_scale: float = 1.0,
    ):
        self.n = int(n)
        self.hidden = int(hidden)
        self.out_dim = int(out_dim)
        self.scalar = (out_dim == 1) if scalar is None else scalar
        self.seed = int(seed)
        self.out_scale = float(out_scale)
        in_dim = self.n + 1
        self._shapes = [(hidden, in_dim), (hidden,), (out_dim, hidden), (out_dim,)]
        sizes = [int(np.prod(sh)) for sh in self._shapes]
        self._offsets = np.concatenate([[0], np.cumsum(sizes)])
        self.theta = np.empty(self._offsets[-1])
        rng = np.random.default_rng(self.seed)
        fan_ins = [in_dim, in_dim, hidden, hidden]
        for i, fan_in in enumerate(fan_ins):
            bound = (1.0 if i < 2 else self.out_scale) / np.sqrt(fan_in)
            self.theta[self._offsets[i] : self._offsets[i + 1]] = rng.uniform(-bound, bound, sizes[i])

    def _view(self, i):
        return self.theta[self._offsets[i] : self._offsets[i + 1]].reshape(self._shapes[i])

    @property
    def W1(self):
        return self._view(0)

    @property
    def b1(self):
        return self._view(1)

    @property
    def W2(self):
        return self._view(2)

    @property
    def b2(self):
        return self._view(3)

    def _inputs(self, s, x):
        x = np.asarray(x, dtype=float)
        s = np.broadcast_to(np.asarray(s, dtype=float), (x.shape[0],))
        return np.concatenate([s[:, None], x], axis=1)

    def _hidden(self, inp):
        return np.tanh(inp @ self.W1.T + self.b1)

    def forward(self, s, x):
        h = self._hidden(self._inputs(s, x))
        out = h @ self.W2.T + self.b2
        return out[:, 0] if self.scalar else out

    def param_grad(self, s, x, upstream):
        inp = self._inputs(s, x)
        h = self._hidden(inp)
        G = np.asarray(upstream, dtype=float).reshape(inp.shape[0], self.out_dim)
        dpre = (G @ self.W2) * (1.0 - h * h)
        return np.concatenate(
            [
                (dpre.T @ inp).ravel(),
                dpre.sum(axis=0),
                (G.T @ h).ravel(),
                G.sum(axis=0),
            ]
        )

    def input_grad(self, s, x):
        if not self.scalar:
            raise TypeError("input_grad is only defined for scalar-output models")
        h = self._hidden(self._inputs(s, x))
        dpre = (1.0 - h * h) * self.W2[0]
        return dpre @ self.W1[:, 1:]

    def copy(self):
        other = MlpModel(self.n, self.hidden, self.out_dim, self.seed, self.scalar, self.out_scale)
        other.theta[...] = self.theta
        return other

    def header(self) -> dict:
        return {
            "kind": self.kind,
            "n": self.n,
            "hidden": self.hidden,
            "out_dim": self.out_dim,
            "seed": self.seed,
            "scalar": int(self.scalar),
            "out_scale": self.out_scale,
        }


def fd_grad(fn, at, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of a scalar function of a flat vector."""
    if not h > 0:
        raise ValueError("step h must be positive")
    p = np.array(at, dtype=float)
    grad = np.empty_like(p)
    for i in range(p.size):
        orig = p[i]
        p[i] = orig + h
        fp = fn(p)
        p[i] = orig - h
        fm = fn(p)
        p[i] = orig
        grad[i] = (fp - fm) / (2.0 * h)
    return grad


def save_params(model, path: str | os.PathLike) -> None:
    """Write a plain-text snapshot: one ``# key=value`` header line, one real per line."""
    head = " ".join(f"{k}={v}" for k, v in model.header().items())
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"# {head} n_params={model.n_params}\n")
        for v in model.theta:
            fh.write(f"{float(v)!r}\n")


def load_params(path: str | os.PathLike):
    with open(path, encoding="utf-8") as fh:
        head = fh.readline()
        if not head.startswith("#"):
            raise ValueError(f"{path}: missing snapshot header")
        meta = dict(item.split("=", 1) for item in head[1:].split())
        values = np.array([float(line) for line in fh if line.strip()])
    if int(meta.pop("n_params")) != values.size:
        raise ValueError(f"{path}: header/parameter count mismatch")
    kind = meta.pop("kind")
    if kind == "mlp":
        model = MlpModel(
            int(meta["n"]), int(meta["hidden"]), int(meta["out_dim"]), int(meta["seed"]), bool(int(meta["scalar"])),
            float(meta.get("out_scale", 1.0)),
        )
    elif kind == "quad_value":
        model = QuadValueModel()
    elif kind == "quad_grad":
        model = QuadGradModel(dim=int(meta["dim"]))
    else:
        raise ValueError(f"{path}: unknown model kind {kind!r}")
    model.set_params(values)
    return model
