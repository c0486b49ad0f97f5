import dataclasses
import json
from pathlib import Path

import numpy as np
import pytest

from desklab import cli
from desklab import data as D
from desklab import schedule as S
from desklab import train as TR
from desklab.model import ModelConfig


def tiny_run_config(outdir, **plan_kw) -> TR.RunConfig:
    plan = TR.PlanConfig(shrink=0.0002, seq_len=32, sequences_stable1=4,
                         lc_mid_seq_len=48, lc_final_seq_len=64, **plan_kw)
    model = ModelConfig(d_model=32, d_ff=80, n_layers=2, n_q_heads=4,
                        n_kv_heads=2, seq_len=32, max_positions=128)
    return TR.RunConfig(model=model, plan=plan, outdir=str(outdir),
                        log_every=5)


@pytest.fixture(scope="module")
def tiny_result(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    rc = tiny_run_config(out)
    return rc, TR.train(rc)


class TestTrainLoop:
    def test_completes_all_phases(self, tiny_result):
        rc, res = tiny_result
        plan = rc.plan.build()
        assert res.final_step == plan.total_steps
        assert not res.aborted

    def test_manifest_written_first_and_complete(self, tiny_result):
        rc, _ = tiny_result
        manifest = json.loads((Path(rc.outdir) / "manifest.json").read_text())
        rc2 = TR.RunConfig.from_json(json.dumps(manifest))
        assert rc2 == rc

    def test_metrics_stream_is_jsonl_with_increasing_steps(self, tiny_result):
        rc, res = tiny_result
        lines = (Path(rc.outdir) / "metrics.jsonl").read_text().splitlines()
        steps = []
        for line in lines:
            rec = json.loads(line)
            assert list(rec) == list(TR.MetricRecord.FIELDS)
            steps.append(rec["step"])
        assert steps == sorted(steps) and len(set(steps)) == len(steps)

    def test_phase_boundary_checkpoints_exist(self, tiny_result):
        rc, _ = tiny_result
        plan = rc.plan.build()
        for p in plan.phases:
            assert (Path(rc.outdir) / f"step{p.end:06d}.ckpt").exists()

    def test_switch_record_written_at_decay_start(self, tiny_result):
        rc, _ = tiny_result
        plan = rc.plan.build()
        rec = json.loads((Path(rc.outdir) / "switch.json").read_text())
        assert rec["switch_step"] == plan.decay_start
        assert rec["optimizer_before"] == "adamw"
        assert rec["optimizer_after"] == "muon"

    def test_manifest_only_rerun_bitwise(self, tiny_result, tmp_path):
        rc, res = tiny_result
        manifest = (Path(rc.outdir) / "manifest.json").read_text()
        rc2 = dataclasses.replace(TR.RunConfig.from_json(manifest),
                                  outdir=str(tmp_path / "rerun"))
        res2 = TR.train(rc2)
        assert res.losses == res2.losses
        # byte-compare the metric streams
        a = (Path(rc.outdir) / "metrics.jsonl").read_bytes()
        b = (Path(rc2.outdir) / "metrics.jsonl").read_bytes()
        assert a == b

    def test_resume_is_bit_exact(self, tiny_result, tmp_path):
        rc, res = tiny_result
        plan = rc.plan.build()
        boundary = plan.phase_by_name(S.STABLE2).end
        ckpt = Path(rc.outdir) / f"step{boundary:06d}.ckpt"
        rc2 = dataclasses.replace(rc, outdir=str(tmp_path / "resumed"))
        res2 = TR.train(rc2, resume_from=ckpt)
        assert res2.losses == res.losses[boundary:]

    def test_nan_abort_keeps_last_good_checkpoint(self, tiny_result, tmp_path):
        # resume from a checkpoint whose parameters were corrupted to NaN:
        # the run must abort without writing a new latest checkpoint
        rc, _ = tiny_result
        from desklab.checkpoint import load_arrays, save_arrays
        src = Path(rc.outdir) / "step000001.ckpt"
        arrays, kv = load_arrays(src)
        victim = next(k for k in arrays if k.startswith("param/"))
        arrays[victim] = arrays[victim] * np.nan
        bad = tmp_path / "corrupt.ckpt"
        save_arrays(bad, arrays, kv)
        rc2 = dataclasses.replace(rc, outdir=str(tmp_path / "aborted"))
        res = TR.train(rc2, resume_from=bad)
        assert res.aborted and res.losses == []
        assert not (Path(rc2.outdir) / "latest.ckpt").exists()


class TestAblation:
    def test_branches_share_prefix_and_diverge(self, tmp_path):
        rc = tiny_run_config(tmp_path / "ab")
        ab = TR.ablate_optimizer(rc)
        assert ab.adamw_hashes == ab.muon_hashes  # identical batch streams
        assert ab.adamw_losses[0] == ab.muon_losses[0]  # same resume point
        assert ab.adamw_losses != ab.muon_losses        # diverge after switch
        plan = rc.plan.build()
        assert ab.switch_step == plan.decay_start
        expected_lr = S.lr_at(ab.switch_step, plan) * plan.peak_lr
        assert ab.lr_at_switch == expected_lr

    def test_divergence_within_two_decay_steps(self, tmp_path):
        rc = tiny_run_config(tmp_path / "ab2")
        ab = TR.ablate_optimizer(rc)
        first_diff = next(i for i, (a, m) in
                          enumerate(zip(ab.adamw_losses, ab.muon_losses))
                          if a != m)
        assert first_diff <= 2


class TestCli:
    def test_dry_run_prints_phase_table(self, capsys, tmp_path):
        cfg = tiny_run_config(tmp_path / "c")
        path = tmp_path / "cfg.json"
        path.write_text(cfg.to_json())
        code = cli.main(["train", "--config", str(path), "--dry-run"])
        out = capsys.readouterr().out
        assert code == 0
        rows = [json.loads(line) for line in out.strip().splitlines()]
        assert [r["phase"] for r in rows] == list(S.PHASE_ORDER)

    def test_schedule_dump_full_scale(self, capsys):
        code = cli.main(["schedule", "dump", "--full-scale"])
        out = capsys.readouterr().out
        assert code == 0
        total = int(out.strip().splitlines()[-1].split("=")[1])
        assert total == 1_521_745_920_000  # five-phase grand total

    def test_schedule_dump_csv(self, tmp_path, capsys):
        csv_path = tmp_path / "steps.csv"
        code = cli.main(["schedule", "dump", "--full-scale", "--shrink",
                         "0.0001", "--csv", str(csv_path)])
        capsys.readouterr()
        assert code == 0
        lines = csv_path.read_text().splitlines()
        assert lines[0] == "step,phase,lr,tokens,seq_len,mixture,optimizer"
        assert len(lines) == 1 + 57  # header + ceil-shrunk spans

    def test_fp8_selftest(self, capsys):
        code = cli.main(["fp8-selftest"])
        out = capsys.readouterr().out
        assert code == 0
        assert "512/512" in out

    def test_fp8_dump_tables(self, tmp_path, capsys):
        code = cli.main(["fp8-selftest", "--dump-tables", str(tmp_path)])
        capsys.readouterr()
        assert code == 0
        e4m3 = (tmp_path / "e4m3_codes.csv").read_text().splitlines()
        assert len(e4m3) == 257
        vals = [float(line.split(",")[1]) for line in e4m3[1:]
                if "nan" not in line and "inf" not in line]
        assert max(vals) == 448.0

    def test_train_and_eval_checkpoint(self, tmp_path, capsys):
        cfg = tiny_run_config(tmp_path / "trained")
        path = tmp_path / "cfg.json"
        path.write_text(cfg.to_json())
        assert cli.main(["train", "--config", str(path)]) == 0
        capsys.readouterr()
        ckpt = tmp_path / "trained" / "latest.ckpt"
        code = cli.main(["eval", "--checkpoint", str(ckpt)])
        out = capsys.readouterr().out
        assert code == 0
        assert json.loads(out)["heldout_ppl"] > 0

    def test_config_error_exit_code(self, tmp_path, capsys):
        bad = tmp_path / "bad.json"
        bad.write_text("{not json")
        assert cli.main(["train", "--config", str(bad)]) == 2
        capsys.readouterr()

    def test_missing_config_exit_code(self, capsys):
        assert cli.main(["train", "--config", "/nonexistent.json"]) == 2
        capsys.readouterr()


class TestFp8Training:
    def test_fp8_run_completes_and_counts_saturations(self, tmp_path):
        rc = dataclasses.replace(tiny_run_config(tmp_path / "f8"), fp8=True)
        res = TR.train(rc)
        assert not res.aborted
        assert res.metrics[-1].fp8_saturations is not None

    def test_fp8_and_wide_runs_differ_but_track(self, tmp_path):
        rc_wide = tiny_run_config(tmp_path / "w")
        rc_fp8 = dataclasses.replace(tiny_run_config(tmp_path / "q"), fp8=True)
        wide = TR.train(rc_wide, write_files=False, stop_after=40)
        quant = TR.train(rc_fp8, write_files=False, stop_after=40)
        assert wide.losses != quant.losses
        assert abs(wide.losses[-1] - quant.losses[-1]) / wide.losses[-1] < 0.2
