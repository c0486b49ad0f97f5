"""End-to-end training runs: manifest, metrics stream, checkpoints, ablation.

A run is fully determined by its RunConfig. The manifest (config as JSON)
is written before step 0 and suffices to reproduce the metrics stream
bit-exactly: data is counter-based (no RNG state to save), parameters and
optimizer state serialize losslessly, and every float in the metrics file
is written with repr() round-tripping.
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import data as D
from . import model as M
from . import optim as O
from . import schedule as S
from .checkpoint import load_arrays, save_arrays
from .errors import NonFiniteError
from .model import Fp8Context, ModelConfig, ModelScales
from .mup import MuPConfig, parameterize


@dataclass(frozen=True)
class PlanConfig:
    """Desk-scale knobs for the five-phase plan."""
    shrink: float = 0.002
    seq_len: int = 128
    sequences_stable1: int = 8
    lc_mid_seq_len: int = 256
    lc_final_seq_len: int = 512
    peak_lr: float = 1.67e-3
    decay_final_ratio: float = 0.1
    switch_to_muon: bool = True
    reblend_on_decay: bool = True   # False = keep the stable mixture (control)

    def build(self) -> S.PhasePlan:
        seqs = {S.WARMUP: self.sequences_stable1,
                S.STABLE1: self.sequences_stable1,
                S.STABLE2: 2 * self.sequences_stable1,
                S.DECAY: 2 * self.sequences_stable1}
        decay_mixture = "sft_blend" if self.reblend_on_decay else "pretrain"
        return S.build_plan(
            shrink=self.shrink, sequences=seqs, seq_len=self.seq_len,
            lc_mid_seq_len=self.lc_mid_seq_len,
            lc_final_seq_len=self.lc_final_seq_len,
            lc_tokens_per_step=2 * self.sequences_stable1 * self.seq_len,
            peak_lr=self.peak_lr, decay_final_ratio=self.decay_final_ratio,
            switch_to_muon=self.switch_to_muon,
            decay_mixture=decay_mixture)


@dataclass(frozen=True)
class OptimConfig:
    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-8
    weight_decay: float = 0.1
    grad_clip: float = 1.0
    muon_momentum: float = 0.95
    muon_ns_iters: int = 5
    muon_include_embedding: bool = False


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    mup: MuPConfig = field(default_factory=MuPConfig)
    plan: PlanConfig = field(default_factory=PlanConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    fp8: bool = False
    fp8_history_len: int = 128
    seed: int = 0
    log_every: int = 10
    outdir: str = "runs/default"

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), indent=2, sort_keys=True)

    @staticmethod
    def from_json(text: str) -> "RunConfig":
        raw = json.loads(text)
        return RunConfig(model=ModelConfig(**raw["model"]),
                         mup=MuPConfig(**raw["mup"]),
                         plan=PlanConfig(**raw["plan"]),
                         optim=OptimConfig(**raw["optim"]),
                         **{k: raw[k] for k in
                            ("fp8", "fp8_history_len", "seed", "log_every", "outdir")})


@dataclass
class MetricRecord:
    step: int
    phase: str
    lr: float
    tokens: int
    loss: float
    grad_norm: float
    optimizer: str
    seq_len: int
    fp8_saturations: int | None = None

    FIELDS = ("step", "phase", "lr", "tokens", "loss", "grad_norm",
              "optimizer", "seq_len", "fp8_saturations")

    def to_line(self) -> str:
        vals = {k: getattr(self, k) for k in self.FIELDS}
        # json of repr-exact floats with fixed key order: stable, parseable lines
        return json.dumps(vals, sort_keys=False)


@dataclass
class RunResult:
    config: RunConfig
    metrics: list[MetricRecord] = field(default_factory=list)
    losses: list[float] = field(default_factory=list)
    step_hashes: list[str] = field(default_factory=list)
    final_step: int = 0
    aborted: bool = False
    params: dict | None = None
    scales: ModelScales | None = None
    model_config: ModelConfig | None = None
    plan: S.PhasePlan | None = None

    def metrics_text(self) -> str:
        return "".join(rec.to_line() + "\n" for rec in self.metrics)


def _model_config_for_run(rc: RunConfig) -> ModelConfig:
    need = max(rc.plan.lc_final_seq_len, rc.model.seq_len) + 1
    if rc.model.max_positions < need:
        return dataclasses.replace(rc.model, max_positions=need)
    return rc.model


def _save_checkpoint(path: Path, params, opt, step: int, optimizer_id: str,
                     config: RunConfig) -> None:
    arrays = {f"param/{n}": p.data for n, p in params.items()}
    arrays.update(opt.state_arrays())
    kv = {"step": str(step), "optimizer": optimizer_id,
          "config_json": config.to_json().replace("\n", "\\n")}
    save_arrays(path, arrays, kv)


def train(rc: RunConfig, write_files: bool = True,
          resume_from: str | Path | None = None,
          stop_after: int | None = None,
          hash_batches: bool = False) -> RunResult:
    """Run the five-phase curriculum end to end.

    ``stop_after`` halts after that step (inclusive, checkpointing the
    state) for resume and branching tests. A NaN loss aborts the run and
    keeps the last good checkpoint on disk.
    """
    plan = rc.plan.build()
    cfg = _model_config_for_run(rc)
    params, groups, scales = parameterize(cfg, rc.mup, seed=rc.seed)
    oc = rc.optim
    adamw = O.AdamW(params, groups, rc.mup, beta1=oc.beta1, beta2=oc.beta2,
                    eps=oc.eps, weight_decay=oc.weight_decay)
    opt: O.AdamW | O.Muon = adamw
    optimizer_id = S.ADAMW
    fp8_ctx = Fp8Context(history_len=rc.fp8_history_len) if rc.fp8 else None

    outdir = Path(rc.outdir)
    start_step = 0
    if write_files:
        outdir.mkdir(parents=True, exist_ok=True)
        (outdir / "manifest.json").write_text(rc.to_json())

    if resume_from is not None:
        arrays, kv = load_arrays(resume_from)
        for n, p in params.items():
            p.data[...] = arrays[f"param/{n}"]
        adamw.load_state_arrays(arrays)
        start_step = int(kv["step"])
        if kv["optimizer"] == S.MUON:
            opt, _ = O.switch_optimizer(
                adamw, plan, plan.decay_start, momentum=oc.muon_momentum,
                ns_iters=oc.muon_ns_iters,
                include_embedding=oc.muon_include_embedding)
            opt.load_state_arrays(arrays)
            optimizer_id = S.MUON

    result = RunResult(rc, params=params, scales=scales, model_config=cfg,
                       plan=plan)
    end_step = plan.total_steps if stop_after is None else min(stop_after + 1,
                                                               plan.total_steps)
    for step in range(start_step, end_step):
        phase = S.phase_at(step, plan)

        if phase.optimizer_id == S.MUON and optimizer_id == S.ADAMW:
            opt, switch_record = O.switch_optimizer(
                adamw, plan, step, momentum=oc.muon_momentum,
                ns_iters=oc.muon_ns_iters,
                include_embedding=oc.muon_include_embedding)
            optimizer_id = S.MUON
            if write_files:
                (outdir / "switch.json").write_text(
                    json.dumps(dataclasses.asdict(switch_record)))

        mixture = D.MIXTURES[phase.mixture_id]
        block = D.sample_batch(step, phase.sequences, phase.seq_len, mixture,
                               rc.seed)
        if hash_batches:
            result.step_hashes.append(D.batch_hash(block))
        try:
            loss_t = M.next_token_loss(block, params, cfg, scales, fp8=fp8_ctx)
        except NonFiniteError:
            result.aborted = True
            break
        loss = float(loss_t.data)
        if not math.isfinite(loss):
            result.aborted = True
            break
        loss_t.backward()
        grads = {n: p.grad for n, p in params.items()}
        grad_norm = O.clip_global_norm(grads, oc.grad_clip)
        schedule_lr = S.lr_at(step, plan) * plan.peak_lr
        opt.step(grads, schedule_lr=schedule_lr)
        for p in params.values():
            p.zero_grad()

        result.losses.append(loss)
        if step % rc.log_every == 0 or step == end_step - 1:
            result.metrics.append(MetricRecord(
                step=step, phase=phase.name, lr=schedule_lr,
                tokens=phase.tokens_per_step(), loss=loss,
                grad_norm=grad_norm, optimizer=optimizer_id,
                seq_len=phase.seq_len,
                fp8_saturations=(fp8_ctx.saturation_total() if fp8_ctx else None)))

        if write_files and any(p.end == step + 1 for p in plan.phases):
            _save_checkpoint(outdir / f"step{step + 1:06d}.ckpt", params, opt,
                             step + 1, optimizer_id, rc)

    result.final_step = start_step + len(result.losses)
    if write_files:
        (outdir / "metrics.jsonl").write_text(result.metrics_text())
        if not result.aborted:
            _save_checkpoint(outdir / "latest.ckpt", params, opt,
                             result.final_step, optimizer_id, rc)
    return result


def eval_heldout(params, cfg: ModelConfig, scales: ModelScales,
                 mixture_id: str, seed: int, steps: int = 4,
                 sequences: int = 8, seq_len: int = 128) -> float:
    """Held-out perplexity under a mixture; stream disjoint from training."""
    def loss_fn(block):
        return M.next_token_loss(block, params, cfg, scales).data
    return D.heldout_perplexity(loss_fn, steps, sequences, seq_len,
                                D.MIXTURES[mixture_id], seed)


def kv_value_nll(params, cfg: ModelConfig, scales: ModelScales, seed: int,
                 seq_len: int, window: int | None = None,
                 batches: int = 8, sequences: int = 16) -> float:
    """Mean NLL on the end-of-sequence recall query's value token.

    Only the final query counts: its distance to the binding block exceeds
    half the sequence by construction. ``window`` truncates each sequence
    to its trailing tokens before the forward pass (a short-context model's
    view of the same query); None sees the whole thing.
    """
    mixture = D.Mixture("kv_only", {"kv_long": 1.0})
    total, count = 0.0, 0
    for b in range(batches):
        block = D.sample_batch(b, sequences, seq_len, mixture, seed,
                               stream=D.HELDOUT_STREAM)
        positions = [(r, c) for r, c in D.value_token_positions(block)
                     if c >= block.shape[1] - 3]
        start = 0 if window is None else max(0, block.shape[1] - window)
        view = block[:, start:]
        logits = M.forward(view[:, :-1], params, cfg, scales)
        z = logits.data
        zmax = z.max(axis=-1, keepdims=True)
        logp = z - zmax - np.log(np.sum(np.exp(z - zmax), axis=-1, keepdims=True))
        for r, c in positions:
            c2 = c - start
            if c2 - 1 < 0 or c2 - 1 >= view.shape[1] - 1:
                continue
            total += -float(logp[r, c2 - 1, block[r, c]])
            count += 1
    return total / max(count, 1)


@dataclass
class WsdShapeReport:
    """Loss-curve shape measurements for the five-phase run."""
    jump_before: float          # mean loss in a window before stable1->stable2
    jump_after: float           # mean loss in the window after
    decay_drop_reblend: float   # loss drop over decay with the SFT re-blend
    decay_drop_control: float   # same span without re-blending
    ppl_decay_end: float        # held-out ppl before the context ramp
    lcr_ppls: dict[int, float]  # held-out ppl sampled during the ramp
    ppl_lcr_end: float          # held-out ppl after the phase
    kv_nll_before: float        # long-range value NLL at decay end (full window)
    kv_nll_after: float         # same after the long-context phase
    kv_nll_after_short: float   # after, but seen through the short window
    losses: list[float] = field(default_factory=list)

    @property
    def ppl_ramp_peak(self) -> float:
        return max(*self.lcr_ppls.values(), self.ppl_lcr_end)


def wsd_shape_report(rc: RunConfig, window: int = 40) -> WsdShapeReport:
    """Run the curriculum plus a no-reblend decay control and measure shape.

    The stable prefix is shared between the decay branches. The long-context
    phase runs in short legs so held-out perplexity is sampled several times
    during the ramp (the bump is a transient) as well as at the end.
    """
    base = Path(rc.outdir)
    plan = rc.plan.build()
    s2_end = plan.phase_by_name(S.STABLE2).end
    decay_end = plan.phase_by_name(S.DECAY).end
    jump_step = plan.phase_by_name(S.STABLE2).start
    lc = plan.phase_by_name(S.LONG_CONTEXT)
    stage1_end = lc.start + math.ceil(lc.span * plan.lc_mid_frac)

    rc_main = dataclasses.replace(rc, outdir=str(base / "main"))
    shared = train(rc_main, stop_after=s2_end - 1)
    ckpt_s2 = Path(rc_main.outdir) / "latest.ckpt"

    # control branch: decay span with the stable mixture kept in place
    rc_ctrl = dataclasses.replace(
        rc, plan=dataclasses.replace(rc.plan, reblend_on_decay=False),
        outdir=str(base / "control"))
    ctrl = train(rc_ctrl, resume_from=ckpt_s2, stop_after=decay_end - 1)

    # main branch: re-blend decay, then the ramp with interleaved evals
    mid = train(rc_main, resume_from=ckpt_s2, stop_after=decay_end - 1)
    ppl_decay_end = eval_heldout(mid.params, mid.model_config, mid.scales,
                                 "sft_blend", rc.seed, seq_len=rc.plan.seq_len)
    kv_before = kv_value_nll(mid.params, mid.model_config, mid.scales, rc.seed,
                             seq_len=rc.plan.lc_final_seq_len)

    eval_steps = sorted({min(lc.start + 2, lc.end - 1), stage1_end - 1,
                         min(stage1_end + 2, lc.end - 1), lc.end - 1})
    lcr_ppls: dict[int, float] = {}
    losses = shared.losses + mid.losses
    last = mid
    for stop in eval_steps:
        last = train(rc_main, resume_from=Path(rc_main.outdir) / "latest.ckpt",
                     stop_after=stop)
        losses += last.losses
        lcr_ppls[stop] = eval_heldout(last.params, last.model_config,
                                      last.scales, "sft_blend", rc.seed,
                                      seq_len=rc.plan.seq_len)
    final = last
    ppl_lcr_end = lcr_ppls[lc.end - 1]
    kv_after = kv_value_nll(final.params, final.model_config, final.scales,
                            rc.seed, seq_len=rc.plan.lc_final_seq_len)
    kv_after_short = kv_value_nll(final.params, final.model_config, final.scales,
                                  rc.seed, seq_len=rc.plan.lc_final_seq_len,
                                  window=rc.plan.seq_len)

    w = min(window, plan.phase_by_name(S.STABLE1).span // 2,
            plan.phase_by_name(S.STABLE2).span // 2)
    jump_before = float(np.mean(losses[jump_step - w:jump_step]))
    jump_after = float(np.mean(losses[jump_step:jump_step + w]))
    k = max(2, min(window, plan.phase_by_name(S.DECAY).span // 4))
    decay_losses_main = losses[plan.decay_start:decay_end]
    decay_losses_ctrl = ctrl.losses
    drop_main = float(np.mean(decay_losses_main[:k]) - np.mean(decay_losses_main[-k:]))
    drop_ctrl = float(np.mean(decay_losses_ctrl[:k]) - np.mean(decay_losses_ctrl[-k:]))

    return WsdShapeReport(jump_before, jump_after, drop_main, drop_ctrl,
                          ppl_decay_end, lcr_ppls, ppl_lcr_end,
                          kv_before, kv_after, kv_after_short, losses)


@dataclass
class AblationResult:
    shared_losses: list[float]
    adamw_losses: list[float]
    muon_losses: list[float]
    adamw_hashes: list[str]
    muon_hashes: list[str]
    adamw_ppl: float
    muon_ppl: float
    switch_step: int
    lr_at_switch: float


def ablate_optimizer(rc: RunConfig, outdir: str | Path | None = None) -> AblationResult:
    """Two runs branching at decay start: AdamW-only vs AdamW->Muon.

    The prefix through stable2 is shared via a checkpoint, so losses up to
    the switch are bit-identical by construction, and both branches draw
    byte-identical batch streams (hashes recorded per step).
    """
    base = Path(outdir) if outdir else Path(rc.outdir)
    plan_muon = dataclasses.replace(rc.plan, switch_to_muon=True)
    plan_adamw = dataclasses.replace(rc.plan, switch_to_muon=False)
    rc_shared = dataclasses.replace(rc, plan=plan_adamw,
                                    outdir=str(base / "shared"))
    plan = rc_shared.plan.build()
    switch_step = plan.decay_start

    shared = train(rc_shared, stop_after=switch_step - 1, hash_batches=True)
    ckpt = Path(rc_shared.outdir) / "latest.ckpt"

    branches = {}
    for tag, plan_cfg in (("adamw", plan_adamw), ("muon", plan_muon)):
        rc_branch = dataclasses.replace(rc, plan=plan_cfg,
                                        outdir=str(base / tag))
        res = train(rc_branch, resume_from=ckpt, hash_batches=True)
        ppl = eval_heldout(res.params, res.model_config, res.scales,
                           "sft_blend", rc.seed, seq_len=rc.plan.seq_len)
        branches[tag] = (res, ppl)

    res_a, ppl_a = branches["adamw"]
    res_m, ppl_m = branches["muon"]
    return AblationResult(
        shared_losses=shared.losses,
        adamw_losses=res_a.losses, muon_losses=res_m.losses,
        adamw_hashes=res_a.step_hashes, muon_hashes=res_m.step_hashes,
        adamw_ppl=ppl_a, muon_ppl=ppl_m,
        switch_step=switch_step,
        lr_at_switch=S.lr_at(switch_step, plan) * plan.peak_lr)
