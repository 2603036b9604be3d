import json

import pytest
from click.testing import CliRunner

from akhbar.cli import main
from akhbar.detect import DetectorTask, write_detection_fixture
from akhbar.imageops import write_image
from akhbar.model import (
    BoundingBox,
    Detection,
    Manifest,
    Sample,
    load_manifest,
    save_manifest,
)
from akhbar.recognize import write_recognition_fixture

from conftest import make_image
from pipefix import EXPECTED_STITCHED, build_bundle


@pytest.fixture
def runner():
    return CliRunner()


def invoke(runner, *args):
    result = runner.invoke(main, list(args), catch_exceptions=False)
    return result


class TestHelp:
    SUBCOMMANDS = ["degrade", "segment", "enhance", "recognize", "pipeline",
                   "eval-det", "eval-ocr", "eval-psnr", "report"]

    def test_every_subcommand_has_help(self, runner):
        for name in self.SUBCOMMANDS:
            result = invoke(runner, name, "--help")
            assert result.exit_code == 0, name
            assert "Usage" in result.output

    def test_unknown_option_is_usage_error(self, runner):
        result = runner.invoke(main, ["degrade", "--bogus"])
        assert result.exit_code == 2


class TestDegradeCommand:
    def test_writes_paired_manifest(self, runner, tmp_path):
        image_path = tmp_path / "scan.png"
        write_image(make_image(64, 48, seed=1), image_path)
        manifest_path = tmp_path / "m.jsonl"
        save_manifest(Manifest(samples=(
            Sample(id="s1", image_path=str(image_path), reference_text="متن"),
        )), manifest_path)
        result = invoke(runner, "degrade", "--manifest", str(manifest_path),
                        "--out", str(tmp_path / "deg"),
                        "--scale", "4", "--quality-reduction", "30")
        assert result.exit_code == 0
        paired = load_manifest(tmp_path / "deg" / "degraded.jsonl")
        assert paired.samples[0].pair_path == str(image_path)

    def test_missing_image_exits_one(self, runner, tmp_path):
        manifest_path = tmp_path / "m.jsonl"
        save_manifest(Manifest(samples=(
            Sample(id="s1", image_path=str(tmp_path / "nope.png")),
        )), manifest_path)
        result = runner.invoke(main, ["degrade", "--manifest", str(manifest_path),
                                      "--out", str(tmp_path / "deg")])
        assert result.exit_code == 1


class TestSegmentAndEvalDet:
    def test_replay_segment_then_eval(self, runner, tmp_path):
        image = make_image(100, 100, seed=2)
        image_path = tmp_path / "page.png"
        write_image(image, image_path)
        box = BoundingBox(10, 10, 60, 60)
        fixture = tmp_path / "fixture.jsonl"
        write_detection_fixture(
            fixture,
            [(image.digest(), DetectorTask.ARTICLE,
              [Detection(box=box, class_id=0, confidence=1.0)])],
        )
        label_path = tmp_path / "page.txt"
        label_path.write_text("0 0.35 0.35 0.5 0.5\n")  # the same box, normalized
        manifest_path = tmp_path / "m.jsonl"
        save_manifest(Manifest(samples=(
            Sample(id="page", image_path=str(image_path), labels_path=str(label_path)),
        )), manifest_path)

        export = tmp_path / "dets.jsonl"
        result = invoke(runner, "segment", "--manifest", str(manifest_path),
                        "--task", "article", "--backend", "replay",
                        "--fixture", str(fixture), "--out", str(export))
        assert result.exit_code == 0
        assert export.exists()

        report = tmp_path / "det.md"
        result = invoke(runner, "eval-det", "--pred", str(export),
                        "--ref", str(manifest_path), "--out", str(report))
        assert result.exit_code == 0
        content = report.read_text(encoding="utf-8")
        assert "| Precision | 1.000 |" in content

    def test_replay_without_fixture_is_config_error(self, runner, tmp_path):
        manifest_path = tmp_path / "m.jsonl"
        save_manifest(Manifest(samples=()), manifest_path)
        result = runner.invoke(main, ["segment", "--manifest", str(manifest_path),
                                      "--task", "article", "--backend", "replay",
                                      "--out", str(tmp_path / "o.jsonl")])
        assert result.exit_code == 2


class TestRecognizeAndEvalOcr:
    def test_replay_recognize_then_perfect_wer(self, runner, tmp_path):
        image = make_image(32, 32, seed=3)
        image_path = tmp_path / "col.png"
        write_image(image, image_path)
        text = "یہ عین متن ہے"
        fixture = tmp_path / "texts.jsonl"
        write_recognition_fixture(fixture, [(image.digest(), text)])
        manifest_path = tmp_path / "m.jsonl"
        save_manifest(Manifest(samples=(
            Sample(id="col", image_path=str(image_path), reference_text=text),
        )), manifest_path)

        outcomes = tmp_path / "outcomes.jsonl"
        result = invoke(runner, "recognize", "--manifest", str(manifest_path),
                        "--backend", "replay", "--fixture", str(fixture),
                        "--out", str(outcomes))
        assert result.exit_code == 0

        report = tmp_path / "ocr.md"
        result = invoke(runner, "eval-ocr", "--hyp", str(outcomes),
                        "--ref", str(manifest_path), "--out", str(report), "--stdout")
        assert result.exit_code == 0
        assert "0.000 | 0.000" in report.read_text(encoding="utf-8")


class TestEnhanceCommand:
    def test_bicubic_enhance(self, runner, tmp_path):
        image_path = tmp_path / "low.png"
        write_image(make_image(16, 12, seed=4), image_path)
        manifest_path = tmp_path / "m.jsonl"
        save_manifest(Manifest(samples=(
            Sample(id="a", image_path=str(image_path)),
        )), manifest_path)
        result = invoke(runner, "enhance", "--manifest", str(manifest_path),
                        "--backend", "bicubic", "--scale", "2",
                        "--out", str(tmp_path / "up"))
        assert result.exit_code == 0
        enhanced = load_manifest(tmp_path / "up" / "enhanced.jsonl")
        from akhbar.imageops import read_image

        out = read_image(enhanced.samples[0].image_path)
        assert (out.width, out.height) == (32, 24)
        assert enhanced.samples[0].pair_path == str(image_path)


class TestEvalPsnr:
    def test_exact_pairs(self, runner, tmp_path):
        image = make_image(8, 8, seed=5)
        a = tmp_path / "a.png"
        write_image(image, a)
        manifest_path = tmp_path / "m.jsonl"
        save_manifest(Manifest(samples=(
            Sample(id="p", image_path=str(a), pair_path=str(a)),
        )), manifest_path)
        result = invoke(runner, "eval-psnr", "--manifest", str(manifest_path), "--stdout")
        assert result.exit_code == 0
        assert "exact" in result.output


class TestPipelineCommand:
    def _config_file(self, tmp_path, bundle, out_dir):
        path = tmp_path / "run.toml"
        path.write_text(f"""
manifest = "{bundle['manifest'].as_posix()}"
workers = 2
output_root = "{out_dir.as_posix()}"
crop_padding = 4.0

[article_detector]
backend = "replay"
fixture = "{bundle['articles'].as_posix()}"

[upscaler]
backend = "bicubic"
scale = 2

[column_detector]
backend = "replay"
fixture = "{bundle['columns'].as_posix()}"

[recognizer]
backend = "replay"
fixture = "{bundle['texts'].as_posix()}"
""", encoding="utf-8")
        return path

    def test_config_driven_run_is_deterministic(self, runner, tmp_path):
        bundle = build_bundle(tmp_path / "bundle")
        config = self._config_file(tmp_path, bundle, tmp_path / "out1")
        result = invoke(runner, "pipeline", "--config", str(config))
        assert result.exit_code == 0
        first = (tmp_path / "out1" / "run.jsonl").read_bytes()

        result = invoke(runner, "pipeline", "--config", str(config),
                        "--output-root", str(tmp_path / "out2"))
        assert result.exit_code == 0
        assert (tmp_path / "out2" / "run.jsonl").read_bytes() == first

        stitched = {}
        for line in first.decode("utf-8").splitlines():
            record = json.loads(line)
            stitched[record["sample_id"]] = [a["stitched_text"] for a in record["articles"]]
        assert stitched == EXPECTED_STITCHED

    def test_set_override_and_digest_logging(self, runner, tmp_path):
        bundle = build_bundle(tmp_path / "bundle")
        config = self._config_file(tmp_path, bundle, tmp_path / "out")
        result = invoke(runner, "pipeline", "--config", str(config),
                        "--set", "workers=1")
        assert result.exit_code == 0
        assert "effective config digest" in result.output

    def test_missing_manifest_is_config_error(self, runner, tmp_path):
        bundle = build_bundle(tmp_path / "bundle")
        config_path = tmp_path / "run.toml"
        config_path.write_text(f"""
[article_detector]
backend = "replay"
fixture = "{bundle['articles'].as_posix()}"
[column_detector]
backend = "replay"
fixture = "{bundle['columns'].as_posix()}"
[recognizer]
backend = "replay"
fixture = "{bundle['texts'].as_posix()}"
""", encoding="utf-8")
        result = runner.invoke(main, ["pipeline", "--config", str(config_path)])
        assert result.exit_code == 2


class TestReportCommand:
    def test_machine_to_markdown(self, runner, tmp_path):
        machine = tmp_path / "report.jsonl"
        machine.write_text(json.dumps({
            "schema": "ocr-bench/1", "kind": "ocr", "model": "m", "tier": "high",
            "mean_wer": 0.133, "mean_cer": 0.032, "refusal_rate": 0.0,
            "sample_count": 10, "failed": False, "included_count": 10,
        }) + "\n", encoding="utf-8")
        result = invoke(runner, "report", "--results", str(machine), "--stdout")
        assert result.exit_code == 0
        assert "| m | n/a | n/a | 0.133 | 0.032 |" in result.output


class TestJsonlLogging:
    def test_events_emitted(self, runner, tmp_path):
        image_path = tmp_path / "scan.png"
        write_image(make_image(32, 32, seed=6), image_path)
        manifest_path = tmp_path / "m.jsonl"
        save_manifest(Manifest(samples=(
            Sample(id="s1", image_path=str(image_path)),
        )), manifest_path)
        result = invoke(runner, "--log", "jsonl", "degrade",
                        "--manifest", str(manifest_path),
                        "--out", str(tmp_path / "deg"))
        assert result.exit_code == 0
