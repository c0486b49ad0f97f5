"""Maximal-update parameterization with tied embeddings.

Rules (m = d_model / base_width):
  * hidden matrices: init std = init_std_base / sqrt(fan_in), LR x 1/m
  * embedding:       init std = init_std_base (width-independent), LR x 1
  * norm gains:      init 1, LR x 1
  * tied head:       logits multiplied by 1/m (the tied matrix itself keeps
                     embedding init and LR)
  * attention logits multiplied by 1/d_head instead of 1/sqrt(d_head)

At m = 1 every multiplier is 1, so the parameterization coincides with the
standard one for identical seeds. The coordinate check trains the same task
at several widths and fits log2(activation RMS) against log2(width): under
these rules the slope stays near 0 at every probe site, while standard
parameterization blows up at the logits.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import model as M
from . import tensor as tz
from .errors import GroupingError
from .model import ModelConfig, ModelScales, Params
from .tensor import Tensor

EMBEDDING, HIDDEN_MATRIX, NORM_GAIN = "embedding", "hidden_matrix", "norm_gain"
TIED_HEAD = "tied_head_readout"


@dataclass(frozen=True)
class MuPConfig:
    base_width: int = 64
    peak_lr_hidden: float = 1.67e-3
    peak_lr_embed: float = 0.01
    init_std_base: float = 0.25
    # off-by-default residual-projection init shrink (1/sqrt(2*n_layers))
    residual_init_scaling: bool = False

    def width_mult(self, d_model: int) -> float:
        m = d_model / self.base_width
        if m <= 0:
            raise ValueError("width multiplier must be positive")
        return m


@dataclass(frozen=True)
class ParamGroup:
    kind: str
    lr_multiplier: float
    init_std: float | None = None
    output_multiplier: float | None = None  # tied head only


def attention_logit_scale(d_head: int) -> float:
    """1/d_head (not 1/sqrt): keeps attention logits O(1) across widths."""
    if d_head < 1:
        raise ValueError("d_head must be >= 1")
    return 1.0 / d_head


def group_kind(name: str) -> str:
    """Assign a parameter name to its group; unknown names are an error."""
    if name == "embed.weight":
        return EMBEDDING
    if name.endswith(("norm_gain", "final_norm.gain")):
        return NORM_GAIN
    if name.endswith((".wq", ".wk", ".wv", ".wo", ".wgate", ".wup", ".wdown")):
        return HIDDEN_MATRIX
    raise GroupingError(f"parameter {name!r} matches no group")


def parameterize(cfg: ModelConfig, mup: MuPConfig, seed: int = 0,
                 standard: bool = False) -> tuple[Params, dict[str, ParamGroup], ModelScales]:
    """Initialize parameters and derive per-group multipliers.

    ``standard=True`` builds the negative control: same inits, but uniform
    LR multipliers, 1/sqrt(d_head) attention logits and an unscaled head.
    """
    m = mup.width_mult(cfg.d_model)
    shapes = M.param_shapes(cfg)
    rng = np.random.Generator(np.random.Philox(key=seed))
    params: Params = {}
    groups: dict[str, ParamGroup] = {}
    for name in sorted(shapes):
        shape = shapes[name]
        kind = group_kind(name)
        if kind == NORM_GAIN:
            params[name] = Tensor(np.ones(shape), requires_grad=True)
            groups[name] = ParamGroup(kind, 1.0)
            continue
        if kind == EMBEDDING:
            std = mup.init_std_base
            lr_mult = 1.0
        else:
            fan_in = shape[0]
            std = mup.init_std_base / math.sqrt(fan_in)
            if mup.residual_init_scaling and name.endswith((".wo", ".wdown")):
                std /= math.sqrt(2 * cfg.n_layers)
            lr_mult = 1.0 if standard else 1.0 / m
        params[name] = Tensor(rng.normal(0.0, std, size=shape), requires_grad=True)
        groups[name] = ParamGroup(kind, lr_mult, init_std=std)

    groups[TIED_HEAD] = ParamGroup(TIED_HEAD, 0.0,
                                   output_multiplier=1.0 if standard else 1.0 / m)
    if standard:
        scales = ModelScales(1.0 / math.sqrt(cfg.d_head), 1.0)
    else:
        scales = ModelScales(attention_logit_scale(cfg.d_head), 1.0 / m)
    return params, groups, scales


def effective_lr(group: ParamGroup, schedule_lr: float,
                 mup: MuPConfig) -> float:
    """Per-group LR from the hidden-referenced schedule value.

    ``schedule_lr`` is peak_lr_hidden times the schedule multiplier; the
    embedding group swaps in its own peak via the peak ratio.
    """
    if schedule_lr < 0:
        raise ValueError("schedule_lr must be non-negative")
    lr = schedule_lr * group.lr_multiplier
    if group.kind == EMBEDDING:
        lr *= mup.peak_lr_embed / mup.peak_lr_hidden
    return lr


# -- coordinate check -------------------------------------------------------

PROBE_SLOPE_LIMIT = 0.2


@dataclass
class CoordCheckResult:
    records: list[dict]                  # width, step, site, rms
    slopes: dict[str, float]             # site -> log2-log2 slope at final step
    verdict: str                         # PASS | FAIL
    failed_sites: list[str] = field(default_factory=list)


def _toy_config(width: int, seq_len: int = 64) -> ModelConfig:
    return ModelConfig(d_model=width, d_ff=int(2.5 * width), n_layers=2,
                       n_q_heads=4, n_kv_heads=2, seq_len=seq_len,
                       max_positions=4096, vocab_size=258)


def coord_check(widths: list[int], steps: int, seed: int = 0,
                parameterization: str = "mup",
                lr: float = 0.015, batch: int = 8, seq_len: int = 64,
                base_width: int | None = None,
                replicates: int = 5) -> CoordCheckResult:
    """Train each width on identical data and record activation RMS per site.

    Slopes are fit on log2(RMS) at the final step, with log-RMS averaged
    over ``replicates`` init/data seeds to tame few-step estimator noise.
    PASS iff |slope| <= 0.2 at every probe site; divergence (non-finite
    loss) is an immediate FAIL naming the site.
    """
    from . import data as D
    from . import optim as O

    if len(widths) < 3:
        raise ValueError("need at least 3 widths for a slope fit")
    standard = parameterization == "sp"
    base = base_width or min(widths)
    mixture = D.MIXTURES["sft_blend"]
    records: list[dict] = []
    # site -> width -> list of final-step rms across replicates
    final_rms: dict[str, dict[int, list[float]]] = {}
    diverged: list[str] = []

    for rep in range(replicates):
        rep_seed = seed + 1000 * rep
        for width in widths:
            cfg = _toy_config(width, seq_len)
            mup = MuPConfig(base_width=base, peak_lr_hidden=lr, peak_lr_embed=lr)
            params, groups, scales = parameterize(cfg, mup, seed=rep_seed,
                                                  standard=standard)
            opt = O.AdamW(params, groups, mup, weight_decay=0.0)
            for step in range(steps + 1):
                block = D.sample_batch(step, batch, seq_len, mixture, rep_seed)
                probes: dict[str, float] = {}

                def hook(site: str, act: np.ndarray) -> None:
                    probes[site] = float(np.sqrt(np.mean(act * act)))

                loss = M.next_token_loss(block, params, cfg, scales, probe=hook)
                if rep == 0:
                    for site, rms in probes.items():
                        records.append({"width": width, "step": step,
                                        "site": site, "rms": rms})
                if not np.isfinite(loss.data):
                    diverged.append(f"width {width} step {step}")
                    break
                if step == steps:
                    for site, rms in probes.items():
                        final_rms.setdefault(site, {}).setdefault(width, []).append(rms)
                    break
                loss.backward()
                # no gradient clip here: a fixed global threshold engages
                # harder at larger widths and would mask the scaling itself
                grads = {n: p.grad for n, p in params.items()}
                opt.step(grads, schedule_lr=lr)
                for p in params.values():
                    p.zero_grad()

    slopes: dict[str, float] = {}
    failed: list[str] = list(diverged)
    if not diverged:
        logw = np.log2(np.asarray(widths, dtype=float))
        for site, by_width in sorted(final_rms.items()):
            logr = [float(np.mean(np.log2(by_width[w]))) for w in widths]
            slope = float(np.polyfit(logw, logr, 1)[0])
            slopes[site] = slope
            if abs(slope) > PROBE_SLOPE_LIMIT:
                failed.append(site)
    verdict = "PASS" if not failed else "FAIL"
    return CoordCheckResult(records, slopes, verdict, failed)


# -- LR transfer -------------------------------------------------------------

def lr_transfer_losses(widths: tuple[int, int] = (64, 256),
                       grid_exponents: range = range(-3, 4),
                       peak: float = 0.02, steps: int = 40, seed: int = 0,
                       batch: int = 8, seq_len: int = 64,
                       tail: int = 8) -> dict[int, list[float]]:
    """Final toy-task loss per width over the LR grid {peak * 2^k}.

    The loss for a run is the mean over the last ``tail`` steps, which
    stabilizes the argmin against single-batch noise.
    """
    from . import data as D
    from . import optim as O

    mixture = D.MIXTURES["sft_blend"]
    base = min(widths)
    out: dict[int, list[float]] = {}
    for width in widths:
        cfg = _toy_config(width, seq_len)
        losses_per_lr: list[float] = []
        for k in grid_exponents:
            lr = peak * 2.0 ** k
            mup = MuPConfig(base_width=base, peak_lr_hidden=lr, peak_lr_embed=lr)
            params, groups, scales = parameterize(cfg, mup, seed=seed)
            opt = O.AdamW(params, groups, mup, weight_decay=0.0)
            tail_losses: list[float] = []
            for step in range(steps):
                block = D.sample_batch(step, batch, seq_len, mixture, seed)
                loss = M.next_token_loss(block, params, cfg, scales)
                if not np.isfinite(loss.data):
                    tail_losses = [float("inf")]
                    break
                if step >= steps - tail:
                    tail_losses.append(float(loss.data))
                loss.backward()
                grads = {n: p.grad for n, p in params.items()}
                opt.step(grads, schedule_lr=lr)
                for p in params.values():
                    p.zero_grad()
            losses_per_lr.append(float(np.mean(tail_losses)))
        out[width] = losses_per_lr
    return out


def lr_transfer_argmins(**kwargs) -> dict[int, int]:
    """Index of the grid argmin per width (for the transfer property)."""
    losses = lr_transfer_losses(**kwargs)
    return {w: int(np.argmin(v)) for w, v in losses.items()}
