"""Five-phase warmup-stable-decay curriculum as a pure function of step.

Phases: Warmup (linear LR ramp), Stable1, Stable2 (batch doubles), Decay
(exponential LR decay, SFT-heavy data re-blend, optimizer switch), and
LongContext (constant floor LR, two-stage sequence-length ramp). The
full-scale reference plan mirrors the published recipe; a shrink factor
scales the step spans down to desk size while batch shapes are configured
independently.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

from .errors import ScheduleError

WARMUP, STABLE1, STABLE2, DECAY, LONG_CONTEXT = (
    "warmup", "stable1", "stable2", "decay", "long_context")

PHASE_ORDER = (WARMUP, STABLE1, STABLE2, DECAY, LONG_CONTEXT)

# reference step spans at full scale
REFERENCE_SPANS = {WARMUP: 2_000, STABLE1: 270_000, STABLE2: 260_000,
                   DECAY: 20_000, LONG_CONTEXT: 10_000}

ADAMW, MUON = "adamw", "muon"


@dataclass(frozen=True)
class Phase:
    name: str
    start: int          # first step of the phase
    span: int
    lr_law: str         # linear-up | constant | exponential-decay | constant-at-decayed
    sequences: int
    seq_len: int
    mixture_id: str
    optimizer_id: str

    @property
    def end(self) -> int:
        return self.start + self.span

    def tokens_per_step(self) -> int:
        return self.sequences * self.seq_len


@dataclass(frozen=True)
class PhasePlan:
    phases: tuple[Phase, ...]
    peak_lr: float
    decay_final_ratio: float
    # long-context ramp: first `lc_mid_frac` of the phase at mid length
    lc_mid_seq_len: int
    lc_final_seq_len: int
    lc_mid_frac: float = 0.3
    lc_tokens_per_step: int | None = None

    @property
    def total_steps(self) -> int:
        return self.phases[-1].end

    @property
    def warmup_steps(self) -> int:
        return self.phases[0].span

    @property
    def decay_start(self) -> int:
        return self.phase_by_name(DECAY).start

    @property
    def decay_steps(self) -> int:
        return self.phase_by_name(DECAY).span

    def phase_by_name(self, name: str) -> Phase:
        for p in self.phases:
            if p.name == name:
                return p
        raise ScheduleError(f"no phase named {name!r}")

    def validate(self) -> None:
        if self.phases[0].start != 0:
            raise ScheduleError("plan must start at step 0")
        for prev, cur in zip(self.phases, self.phases[1:]):
            if cur.start != prev.end:
                raise ScheduleError(f"phase spans not contiguous at {cur.name}")
        switches = [(prev.optimizer_id, cur.optimizer_id, cur.name)
                    for prev, cur in zip(self.phases, self.phases[1:])
                    if prev.optimizer_id != cur.optimizer_id]
        if len(switches) > 1:
            raise ScheduleError("optimizer id changes more than once")
        if switches and switches[0][2] != DECAY:
            raise ScheduleError("optimizer switch must coincide with decay start")


def build_plan(shrink: float = 1.0,
               sequences: dict[str, int] | None = None,
               seq_len: int = 3712,
               lc_mid_seq_len: int = 8192,
               lc_final_seq_len: int = 16384,
               lc_tokens_per_step: int | None = None,
               peak_lr: float = 1.67e-3,
               decay_final_ratio: float = 0.1,
               switch_to_muon: bool = True,
               stable_mixture: str = "pretrain",
               decay_mixture: str = "sft_blend") -> PhasePlan:
    """Construct a plan with spans = ceil(reference * shrink).

    ``sequences`` maps phase name to sequences-per-step; defaults are the
    full-scale batch shapes (480 / 960 ... doubling at stable1->stable2,
    long-context sized to hold tokens/step at ~3.93M).
    """
    if not 0 < shrink <= 1:
        raise ScheduleError("shrink must be in (0, 1]")
    if sequences is None:
        sequences = {WARMUP: 480, STABLE1: 480, STABLE2: 960, DECAY: 960}
    lc_tokens = (lc_tokens_per_step if lc_tokens_per_step is not None
                 else 240 * 16384 if seq_len == 3712
                 else 2 * sequences[DECAY] * seq_len)

    spans = {name: math.ceil(REFERENCE_SPANS[name] * shrink) for name in PHASE_ORDER}
    mixtures = {WARMUP: stable_mixture, STABLE1: stable_mixture,
                STABLE2: stable_mixture, DECAY: decay_mixture,
                LONG_CONTEXT: decay_mixture + "_long"}
    late_opt = MUON if switch_to_muon else ADAMW

    phases = []
    start = 0
    for name in PHASE_ORDER:
        if name == LONG_CONTEXT:
            seqs = max(1, round(lc_tokens / lc_final_seq_len))
            length = lc_final_seq_len
        else:
            seqs = sequences[name]
            length = seq_len
        law = {WARMUP: "linear-up", STABLE1: "constant", STABLE2: "constant",
               DECAY: "exponential-decay", LONG_CONTEXT: "constant-at-decayed"}[name]
        opt = late_opt if name in (DECAY, LONG_CONTEXT) else ADAMW
        phases.append(Phase(name, start, spans[name], law, seqs, length,
                            mixtures[name], opt))
        start += spans[name]

    plan = PhasePlan(tuple(phases), peak_lr, decay_final_ratio,
                     lc_mid_seq_len, lc_final_seq_len,
                     lc_tokens_per_step=lc_tokens)
    plan.validate()
    return plan


def lr_at(step: int, plan: PhasePlan) -> float:
    """LR multiplier of peak at ``step`` (multiply by plan.peak_lr for value)."""
    if step < 0 or step > plan.total_steps:
        raise ScheduleError(f"step {step} outside plan [0, {plan.total_steps}]")
    warmup = plan.phases[0]
    decay = plan.phase_by_name(DECAY)
    r = plan.decay_final_ratio
    if step < warmup.end:
        return step / warmup.span
    if step < decay.start:
        return 1.0
    if step < decay.end:
        return r ** ((step - decay.start) / decay.span)
    return r


def phase_at(step: int, plan: PhasePlan) -> Phase:
    """The active phase row, with long-context seq_len resolved by the ramp."""
    if step < 0 or step >= plan.total_steps:
        raise ScheduleError(f"step {step} outside plan [0, {plan.total_steps})")
    for p in plan.phases:
        if p.start <= step < p.end:
            if p.name == LONG_CONTEXT:
                length = context_ramp(step, plan)
                tokens = plan.lc_tokens_per_step or p.tokens_per_step()
                return Phase(p.name, p.start, p.span, p.lr_law,
                             max(1, round(tokens / length)), length,
                             p.mixture_id, p.optimizer_id)
            return p
    raise ScheduleError(f"step {step} not covered")  # unreachable


def context_ramp(step: int, plan: PhasePlan) -> int:
    """Two-stage sequence-length ramp inside the long-context phase."""
    lc = plan.phase_by_name(LONG_CONTEXT)
    if not lc.start <= step < lc.end:
        raise ScheduleError(f"step {step} outside long-context phase")
    stage1 = math.ceil(lc.span * plan.lc_mid_frac)
    return plan.lc_mid_seq_len if step - lc.start < stage1 else plan.lc_final_seq_len


def total_tokens(plan: PhasePlan) -> int:
    """Sum of tokens over every step of every phase."""
    total = 0
    for p in plan.phases:
        if p.name == LONG_CONTEXT:
            total += sum(phase_at(s, plan).tokens_per_step()
                         for s in range(p.start, p.end))
        else:
            total += p.tokens_per_step() * p.span
    return total


def dump_rows(plan: PhasePlan) -> list[dict]:
    """Per-step table for CSV export: step, lr, tokens, seq_len, mixture, optimizer."""
    rows = []
    for step in range(plan.total_steps):
        p = phase_at(step, plan)
        rows.append({"step": step, "phase": p.name,
                     "lr": lr_at(step, plan) * plan.peak_lr,
                     "tokens": p.tokens_per_step(), "seq_len": p.seq_len,
                     "mixture": p.mixture_id, "optimizer": p.optimizer_id})
    return rows


def phase_table(plan: PhasePlan) -> list[dict]:
    """One summary row per phase."""
    rows = []
    for p in plan.phases:
        if p.name == LONG_CONTEXT:
            tokens = sum(phase_at(s, plan).tokens_per_step()
                         for s in range(p.start, p.end))
        else:
            tokens = p.tokens_per_step() * p.span
        rows.append({"phase": p.name, "start": p.start, "end": p.end,
                     "span": p.span, "lr_law": p.lr_law,
                     "sequences": p.sequences, "seq_len": p.seq_len,
                     "tokens_per_step": p.tokens_per_step(),
                     "phase_tokens": tokens, "mixture": p.mixture_id,
                     "optimizer": p.optimizer_id})
    return rows
