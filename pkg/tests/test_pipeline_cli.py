import json

import numpy as np
import pytest
from click.testing import CliRunner

from attnquant.cli import main
from attnquant.errors import DataError
from attnquant.model import attention_forward, generate_synthetic, load_calibration, load_checkpoint, save_calibration, save_checkpoint
from attnquant.pipeline import (
    PipelineConfig,
    dequantized_head,
    evaluate_quantized,
    load_quantized,
    quantize_head,
    save_quantized,
)
from attnquant.quantizer import QuantSpec, quantized_to_json, QuantizedWeight
from attnquant.rounding import SoftQuantConfig


def make_files(tmp_path, seed=0, d=8, d_h=4, length=6, n=8):
    head, seqs = generate_synthetic(seed, d, d_h, length, n)
    model = tmp_path / "model.json"
    calib = tmp_path / "calib.json"
    save_checkpoint(head, model)
    save_calibration(seqs, calib)
    return head, seqs, model, calib


class TestPipeline:
    def test_high_bit_nearest_rounding_is_accurate(self, tmp_path):
        head, seqs, _, _ = make_files(tmp_path, seed=1)
        cfg = PipelineConfig(bits=8, method="rtn")
        _, report = quantize_head(head, seqs, cfg)
        fp_norm = np.mean([np.sum(attention_forward(head, s).sa ** 2) for s in seqs])
        for row in report["projections"].values():
            assert row["exact_attention_error"] <= 1e-4 * fp_norm

    def test_aespa_zero_iterations_equals_noround_byte_for_byte(self, tmp_path):
        head, seqs, _, _ = make_files(tmp_path, seed=2)
        soft = SoftQuantConfig(iterations=0)
        doc_a, _ = quantize_head(head, seqs, PipelineConfig(bits=2, method="aespa", soft=soft))
        doc_b, _ = quantize_head(head, seqs, PipelineConfig(bits=2, method="aespa-noround"))
        assert json.dumps(doc_a["projections"], sort_keys=True) == json.dumps(
            doc_b["projections"], sort_keys=True
        )

    def test_report_deterministic_across_runs(self, tmp_path):
        head, seqs, _, _ = make_files(tmp_path, seed=3)
        cfg = PipelineConfig(bits=2, method="aespa", soft=SoftQuantConfig(iterations=200, seed=5))
        _, r1 = quantize_head(head, seqs, cfg)
        _, r2 = quantize_head(head, seqs, cfg)
        assert json.dumps(r1, sort_keys=True) == json.dumps(r2, sort_keys=True)

    def test_projection_filter_carries_full_precision(self, tmp_path):
        head, seqs, _, _ = make_files(tmp_path, seed=4)
        cfg = PipelineConfig(bits=4, method="rtn", projections="VQ")
        doc, report = quantize_head(head, seqs, cfg)
        assert set(doc["projections"]) == {"W_V", "W_Q"}
        assert set(doc["full_precision"]) == {"W_K"}
        assert set(report["projections"]) == {"W_V", "W_Q"}
        q_head = dequantized_head(doc)
        np.testing.assert_array_equal(q_head.w_k, head.w_k)

    def test_value_kind_override_reported(self, tmp_path):
        head, seqs, _, _ = make_files(tmp_path, seed=5)
        cfg = PipelineConfig(bits=4, method="aespa-noround", value_kind="other")
        _, report = quantize_head(head, seqs, cfg)
        assert report["projections"]["W_V"]["kind"] == "other"
        cfg2 = PipelineConfig(bits=4, method="aespa-noround", value_kind="value")
        _, report2 = quantize_head(head, seqs, cfg2)
        assert report2["projections"]["W_V"]["kind"] == "value"

    def test_order_recorded_and_configurable(self, tmp_path):
        head, seqs, _, _ = make_files(tmp_path, seed=6)
        doc, report = quantize_head(head, seqs, PipelineConfig(bits=4, method="rtn", order="QKV"))
        assert doc["order"] == "QKV" and report["order"] == "QKV"

    def test_invalid_config_rejected(self):
        with pytest.raises(DataError):
            PipelineConfig(bits=5)
        with pytest.raises(DataError):
            PipelineConfig(method="fancy")
        with pytest.raises(DataError):
            PipelineConfig(order="VVQ")

    def test_eval_identity_quantization_zero_error(self, tmp_path):
        # weights constructed exactly on a quantization grid
        rng = np.random.default_rng(7)
        d, d_h, bits = 6, 3, 4
        spec = QuantSpec(n_bits=bits, scale=np.full(d_h, 0.125), zero_point=np.full(d_h, 7, dtype=np.int64))
        projections = {}
        weights = {}
        for name in ("W_Q", "W_K", "W_V"):
            w_int = rng.integers(0, spec.grid_max + 1, size=(d_h, d))
            projections[name] = quantized_to_json(QuantizedWeight(w_int, spec))
            weights[name] = 0.125 * (w_int - 7)
        from attnquant.model import AttentionHead

        head = AttentionHead(d, d_h, weights["W_Q"], weights["W_K"], weights["W_V"])
        doc = {
            "schema_version": 1,
            "d": d,
            "d_h": d_h,
            "n_bits": bits,
            "method": "rtn",
            "order": "VQK",
            "projections": projections,
            "full_precision": {},
        }
        _, seqs = generate_synthetic(8, d, d_h, 5, 4)
        report = evaluate_quantized(head, dequantized_head(doc), seqs)
        assert report["mean_attention_error"] == 0.0
        assert report["relative_output_error"] == 0.0

    def test_eval_rejects_empty_and_mismatched(self, tmp_path):
        head, seqs, _, _ = make_files(tmp_path, seed=9)
        with pytest.raises(DataError):
            evaluate_quantized(head, head, [])
        other, _ = generate_synthetic(10, 6, 3, 4, 1)
        with pytest.raises(DataError):
            evaluate_quantized(head, other, seqs)


class TestCli:
    def test_gen_quantize_eval_roundtrip(self, tmp_path):
        runner = CliRunner()
        model = tmp_path / "m.json"
        calib = tmp_path / "c.json"
        evald = tmp_path / "e.json"
        out = tmp_path / "q.json"
        report = tmp_path / "r.json"
        res = runner.invoke(
            main,
            [
                "gen", "--seed", "0", "--d", "8", "--dh", "4", "--length", "6",
                "--n-sequences", "8", "--model-out", str(model), "--calib-out", str(calib),
                "--n-eval", "4", "--eval-out", str(evald),
            ],
        )
        assert res.exit_code == 0, res.output
        assert model.exists() and calib.exists() and evald.exists()
        assert len(load_calibration(calib)) == 8
        assert len(load_calibration(evald)) == 4

        res = runner.invoke(
            main,
            [
                "quantize", "--model", str(model), "--calib", str(calib),
                "--output", str(out), "--bits", "2", "--method", "aespa",
                "--iterations", "100", "--report-out", str(report),
            ],
        )
        assert res.exit_code == 0, res.output
        doc = load_quantized(out)
        assert doc["method"] == "aespa"
        rep = json.loads(report.read_text())
        assert rep["schema_version"] == 1
        assert set(rep["projections"]) == {"W_Q", "W_K", "W_V"}

        res = runner.invoke(
            main, ["eval", "--model", str(model), "--quantized", str(out), "--data", str(evald)]
        )
        assert res.exit_code == 0, res.output
        payload = json.loads(res.output)
        assert payload["mean_attention_error"] > 0.0
        assert payload["schema_version"] == 1

    def test_gen_determinism(self, tmp_path):
        runner = CliRunner()
        paths = []
        for tag in ("a", "b"):
            model = tmp_path / f"m_{tag}.json"
            calib = tmp_path / f"c_{tag}.json"
            res = runner.invoke(
                main,
                ["gen", "--seed", "3", "--model-out", str(model), "--calib-out", str(calib)],
            )
            assert res.exit_code == 0
            paths.append((model, calib))
        assert paths[0][0].read_text() == paths[1][0].read_text()
        assert paths[0][1].read_text() == paths[1][1].read_text()

    def test_usage_error_exit_code_two(self):
        res = CliRunner().invoke(main, ["quantize", "--no-such-flag"])
        assert res.exit_code == 2

    def test_data_error_exit_code_three(self, tmp_path):
        res = CliRunner().invoke(
            main,
            [
                "quantize", "--model", str(tmp_path / "missing.json"),
                "--calib", str(tmp_path / "missing2.json"),
                "--output", str(tmp_path / "o.json"),
            ],
        )
        assert res.exit_code == 3
        assert "error" in res.output

    def test_failed_run_writes_no_output(self, tmp_path):
        head, seqs, model, calib = make_files(tmp_path, seed=11)
        bad_calib = tmp_path / "bad.json"
        bad_calib.write_text('{"d": 8, "L": 6}')  # missing sequences
        out = tmp_path / "q.json"
        res = CliRunner().invoke(
            main,
            ["quantize", "--model", str(model), "--calib", str(bad_calib), "--output", str(out)],
        )
        assert res.exit_code == 3
        assert not out.exists()

    def test_config_file_with_flag_override(self, tmp_path):
        head, seqs, model, calib = make_files(tmp_path, seed=12)
        cfg_path = tmp_path / "cfg.json"
        cfg_path.write_text(json.dumps({"bits": 2, "method": "rtn", "projections": "V"}))
        out = tmp_path / "q.json"
        res = CliRunner().invoke(
            main,
            [
                "quantize", "--model", str(model), "--calib", str(calib),
                "--output", str(out), "--config", str(cfg_path), "--bits", "4",
            ],
        )
        assert res.exit_code == 0, res.output
        doc = load_quantized(out)
        assert doc["n_bits"] == 4  # flag overrides config
        assert set(doc["projections"]) == {"W_V"}  # config supplies the rest

    def test_flops_single_point_and_itemization(self):
        res = CliRunner().invoke(
            main, ["flops", "--d", "768", "--dh", "64", "--L", "2048", "--B", "4"]
        )
        assert res.exit_code == 0
        assert "239124477" in res.output.replace(",", "")
        assert "6744432636" in res.output.replace(",", "")
        assert "per-sequence" in res.output

    def test_stats_cache_written_then_reused(self, tmp_path):
        head, seqs, model, calib = make_files(tmp_path, seed=15)
        cache = tmp_path / "stats.json"
        out1, out2 = tmp_path / "q1.json", tmp_path / "q2.json"
        args = ["quantize", "--model", str(model), "--calib", str(calib),
                "--bits", "4", "--method", "optq", "--stats-cache", str(cache)]
        res = CliRunner().invoke(main, args + ["--output", str(out1)])
        assert res.exit_code == 0, res.output
        assert cache.exists()
        stamp = cache.stat().st_mtime_ns
        res = CliRunner().invoke(main, args + ["--output", str(out2)])
        assert res.exit_code == 0, res.output
        assert cache.stat().st_mtime_ns == stamp  # reused, not rewritten
        assert out1.read_text() == out2.read_text()

    def test_flops_table_and_csv(self, tmp_path):
        csv_out = tmp_path / "table.csv"
        res = CliRunner().invoke(main, ["flops", "--csv", str(csv_out)])
        assert res.exit_code == 0
        assert "6.7" in res.output and "0.24" in res.output
        lines = csv_out.read_text().strip().splitlines()
        assert len(lines) == 7  # header + six presets

    def test_flops_requires_both_dims(self):
        res = CliRunner().invoke(main, ["flops", "--d", "64"])
        assert res.exit_code == 3

    def test_check_command_passes(self):
        res = CliRunner().invoke(main, ["check", "--seed", "0"])
        assert res.exit_code == 0, res.output
        assert "all 7 checks passed" in res.output
        assert "FAIL" not in res.output

    def test_trace_prefix_writes_csv(self, tmp_path):
        head, seqs, model, calib = make_files(tmp_path, seed=13)
        out = tmp_path / "q.json"
        prefix = tmp_path / "trace"
        res = CliRunner().invoke(
            main,
            [
                "quantize", "--model", str(model), "--calib", str(calib),
                "--output", str(out), "--bits", "2", "--method", "aespa",
                "--iterations", "5", "--projections", "V", "--trace-prefix", str(prefix),
            ],
        )
        assert res.exit_code == 0, res.output
        assert (tmp_path / "trace_W_V.csv").exists()


class TestSeedSweep:
    def test_learned_method_beats_naive_baseline_at_two_bits(self):
        # 20-seed sweep comparing full quantized heads on the calibration
        # data (reconstruction); learned pipeline median <= naive median
        errors = {"rtn": [], "aespa": []}
        for seed in range(20):
            head, seqs = generate_synthetic(seed, 16, 4, 8, 32)
            for method in errors:
                cfg = PipelineConfig(bits=2, method=method, soft=SoftQuantConfig(seed=0))
                doc, _ = quantize_head(head, seqs, cfg)
                rep = evaluate_quantized(head, dequantized_head(doc), seqs)
                errors[method].append(rep["mean_attention_error"])
        assert np.median(errors["aespa"]) <= np.median(errors["rtn"])


class TestQuantizedCheckpointIO:
    def test_round_trip(self, tmp_path):
        head, seqs, _, _ = make_files(tmp_path, seed=14)
        doc, _ = quantize_head(head, seqs, PipelineConfig(bits=4, method="optq"))
        path = tmp_path / "q.json"
        save_quantized(doc, path)
        loaded = load_quantized(path)
        h1 = dequantized_head(doc)
        h2 = dequantized_head(loaded)
        np.testing.assert_array_equal(h1.w_v, h2.w_v)

    def test_schema_version_checked(self, tmp_path):
        path = tmp_path / "q.json"
        path.write_text(json.dumps({"schema_version": 99}))
        with pytest.raises(DataError):
            load_quantized(path)

    def test_missing_projection_rejected(self):
        with pytest.raises(DataError, match="W_K"):
            dequantized_head(
                {"d": 4, "d_h": 2, "projections": {}, "full_precision": {
                    "W_Q": [[0.0] * 4] * 2, "W_V": [[0.0] * 4] * 2}}
            )
