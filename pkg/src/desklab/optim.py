"""AdamW and Muon, plus the mid-run switch at decay start.

Muon applies an approximately orthogonal update to rank-2 hidden matrices:
momentum buffer B <- beta*B + g, update = NS(B) * sqrt(max(1, rows/cols)).
Everything that is not a hidden matrix (embedding, norm gains — and the
tied head through the embedding) keeps stepping with AdamW; at the switch
those AdamW moments carry over bit-identically and the Muon buffers start
at zero. The learning-rate schedule, weight decay and gradient clip are
shared state and untouched by the switch.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import ScheduleError
from .mup import HIDDEN_MATRIX, MuPConfig, ParamGroup, effective_lr
from .tensor import Tensor

ADAMW, MUON = "adamw", "muon"

# Quintic Newton-Schulz polynomial a*x + b*x^3 + c*x^5 applied to singular
# values. This set has phi(1)=1 and phi'(1)=0, so five iterations land all
# singular values within a few percent of 1 for the matrix shapes Muon sees
# (aspect ratio >= 1.5); more aggressive sets oscillate and miss the
# orthogonality tolerance.
NS_COEFFS = (2.5, -2.5, 1.0)
NS_ITERS = 5


def newton_schulz_orthogonalize(G: np.ndarray, iters: int = NS_ITERS,
                                coeffs: tuple[float, float, float] = NS_COEFFS
                                ) -> np.ndarray:
    """Approximate the orthogonal polar factor U V^T of G.

    Input is pre-normalized by its Frobenius norm (+1e-7), making the
    result scale-invariant. An all-zero G returns zeros with a warning.
    """
    if iters < 1:
        raise ValueError("iters must be >= 1")
    G = np.asarray(G, dtype=np.float64)
    if G.ndim != 2:
        raise ValueError("orthogonalization expects a matrix")
    if not np.any(G):
        warnings.warn("orthogonalize: all-zero matrix", RuntimeWarning,
                      stacklevel=2)
        return np.zeros_like(G)
    a, b, c = coeffs
    X = G
    transposed = X.shape[0] > X.shape[1]
    if transposed:
        X = X.T
    X = X / (np.linalg.norm(X) + 1e-7)
    for _ in range(iters):
        A = X @ X.T
        X = a * X + (b * A + c * (A @ A)) @ X
    return X.T if transposed else X


def clip_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    """Scale all grads in place so their joint L2 norm is <= max_norm.

    Returns the pre-clip norm. Applied identically under both optimizers.
    """
    sq = sum(float(np.sum(g * g)) for g in grads.values())
    norm = float(np.sqrt(sq))
    if max_norm > 0 and norm > max_norm:
        factor = max_norm / norm
        for g in grads.values():
            g *= factor
    return norm


def _check_finite(grads: dict[str, np.ndarray]) -> None:
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for {name!r}; step rejected")


@dataclass
class AdamW:
    """Decoupled-weight-decay Adam with bias-corrected moments."""
    params: dict[str, Tensor]
    groups: dict[str, ParamGroup]
    mup: MuPConfig
    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-8
    weight_decay: float = 0.1
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    name = ADAMW

    def __post_init__(self):
        for n, p in self.params.items():
            self.m.setdefault(n, np.zeros_like(p.data))
            self.v.setdefault(n, np.zeros_like(p.data))

    def _decays(self, name: str) -> bool:
        # norm gains are excluded from weight decay
        return self.groups[name].kind != "norm_gain"

    def step(self, grads: dict[str, np.ndarray], schedule_lr: float,
             names: list[str] | None = None) -> None:
        _check_finite(grads)
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for name in (names if names is not None else sorted(grads)):
            g = grads[name]
            p = self.params[name]
            lr = effective_lr(self.groups[name], schedule_lr, self.mup)
            if self.weight_decay and self._decays(name):
                p.data *= 1.0 - lr * self.weight_decay
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {f"{ADAMW}/t": np.array([float(self.t)])}
        for n in sorted(self.m):
            out[f"{ADAMW}/m/{n}"] = self.m[n]
            out[f"{ADAMW}/v/{n}"] = self.v[n]
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        self.t = int(arrays[f"{ADAMW}/t"][0])
        for n in self.m:
            self.m[n] = arrays[f"{ADAMW}/m/{n}"].copy()
            self.v[n] = arrays[f"{ADAMW}/v/{n}"].copy()


@dataclass
class Muon:
    """Orthogonalized-momentum steps for 2-D hidden matrices.

    Non-matrix groups (embedding, norm gains) keep stepping through the
    embedded AdamW instance, typically carried over from before the switch.
    """
    params: dict[str, Tensor]
    groups: dict[str, ParamGroup]
    mup: MuPConfig
    momentum: float = 0.95
    ns_iters: int = NS_ITERS
    weight_decay: float = 0.1
    fallback: AdamW | None = None
    include_embedding: bool = False   # ablation knob; tied embedding stays AdamW
    buffers: dict[str, np.ndarray] = field(default_factory=dict)

    name = MUON

    def __post_init__(self):
        if self.fallback is None:
            self.fallback = AdamW(self.params, self.groups, self.mup,
                                  weight_decay=self.weight_decay)
        for n, p in self.params.items():
            if self._is_matrix(n):
                self.buffers.setdefault(n, np.zeros_like(p.data))

    def _is_matrix(self, name: str) -> bool:
        if self.groups[name].kind == HIDDEN_MATRIX and self.params[name].ndim == 2:
            return True
        return self.include_embedding and self.groups[name].kind == "embedding"

    def step(self, grads: dict[str, np.ndarray], schedule_lr: float) -> None:
        _check_finite(grads)
        matrix_names = [n for n in sorted(grads) if self._is_matrix(n)]
        other_names = [n for n in sorted(grads) if not self._is_matrix(n)]
        for name in matrix_names:
            p = self.params[name]
            lr = effective_lr(self.groups[name], schedule_lr, self.mup)
            if self.weight_decay:
                p.data *= 1.0 - lr * self.weight_decay
            B = self.buffers[name]
            B *= self.momentum
            B += grads[name]
            if not np.any(B):
                continue
            O = newton_schulz_orthogonalize(B, self.ns_iters)
            rows, cols = p.data.shape
            p.data -= lr * np.sqrt(max(1.0, rows / cols)) * O
        if other_names:
            self.fallback.step(grads, schedule_lr, names=other_names)

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = self.fallback.state_arrays()
        for n in sorted(self.buffers):
            out[f"{MUON}/momentum/{n}"] = self.buffers[n]
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        self.fallback.load_state_arrays(arrays)
        for n in self.buffers:
            self.buffers[n] = arrays[f"{MUON}/momentum/{n}"].copy()


@dataclass(frozen=True)
class SwitchRecord:
    switch_step: int
    optimizer_before: str
    optimizer_after: str
    carryover: str = "adamw-moments-for-non-matrix; muon-buffers-zeroed"


def switch_optimizer(adamw: AdamW, plan, step: int,
                     momentum: float = 0.95, ns_iters: int = NS_ITERS,
                     include_embedding: bool = False) -> tuple[Muon, SwitchRecord]:
    """Replace AdamW with Muon at the decay boundary.

    The embedded AdamW (used for non-matrix groups) is the same object, so
    its moments carry over unchanged; schedule, weight decay and clip
    threshold are not touched here at all.
    """
    if step != plan.decay_start:
        raise ScheduleError(f"optimizer switch requested at step {step}, "
                            f"but decay starts at {plan.decay_start}")
    muon = Muon(adamw.params, adamw.groups, adamw.mup, momentum=momentum,
                ns_iters=ns_iters, weight_decay=adamw.weight_decay,
                fallback=adamw, include_embedding=include_embedding)
    record = SwitchRecord(step, ADAMW, MUON)
    return muon, record
