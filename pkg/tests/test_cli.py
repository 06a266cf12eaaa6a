# Copyright 2025 Gowtham Rao <rao@ohdsi.org>
#
# Licensed under the Apache License, Version 2.0 (the "License");
# you may not use this file except in compliance with the License.
# You may obtain a copy of the License at
#
#     http://www.apache.org/licenses/LICENSE-2.0
#
# Unless required by applicable law or agreed to in writing, software
# distributed under the License is distributed on an "AS IS" BASIS,
# WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
# See the License for the specific language governing permissions and
# limitations under the License.

import json

import pytest

import py_dder.selftest as selftest
from py_dder.cli import build_parser, load_settings, main


def _write_config(tmp_path, **extra) -> str:
    values = {
        "SEED": 0,
        "NUM_CLASSES": 3,
        "IMAGE_SIZE": 8,
        "TRAIN_SIZE": 48,
        "TEST_SIZE": 24,
        "FEATURE_DIM": 16,
        "PRETRAIN_EPOCHS": 2,
        "MIN_CLEAN_ACCURACY": 0.0,
        "N_EXPERTS": 4,
        "RANK": 2,
        "EPOCHS": 1,
        "BATCH_SIZE": 16,
        "CONTEXT_LENGTH": 2,
        "EMBED_DIM": 8,
        "TEXT_HIDDEN": 8,
        "ASN_EPOCHS": 1,
        "PSEUDO_PER_STAGE": 8,
        "SEQUENCE": "clean,fgsm,pgd",
        "STEPS": 2,
        "CACHE_DIR": tmp_path / "cache",
    }
    values.update(extra)
    path = tmp_path / "run.env"
    path.write_text("".join(f"DDER_{key}={value}\n" for key, value in values.items()))
    return str(path)


def test_parser_requires_a_command():
    """
    Tests that a missing subcommand is a usage error.
    """
    with pytest.raises(SystemExit) as info:
        build_parser().parse_args([])
    assert info.value.code == 2


def test_unknown_flag_exits_with_usage_error():
    """
    Tests exit status 2 on an unknown option.
    """
    with pytest.raises(SystemExit) as info:
        main(["train", "--no-such-flag"])
    assert info.value.code == 2


def test_overrides_win_over_config_file(tmp_path):
    """
    Tests that command-line flags override the config file.
    """
    config = _write_config(tmp_path, VARIANT="c")
    args = build_parser().parse_args(["eval", "--config", config, "--seed", "5", "--variant", "b", "--mode", "adaptive", "--out", str(tmp_path)])
    settings = load_settings(args)
    assert settings.seed == 5
    assert settings.variant == "b"
    assert settings.eval_mode == "adaptive"
    assert settings.out_dir == tmp_path


def test_selftest_command(capsys):
    """
    Tests that the self-test prints one line per check and exits 0.
    """
    assert main(["selftest"]) == 0
    out = capsys.readouterr().out
    assert out.count("[PASS]") == len(selftest.CHECKS)


def test_failing_selftest_exits_one(monkeypatch, capsys):
    """
    Tests that a failed property check gives exit status 1.
    """
    def broken(generator):
        raise AssertionError("broken on purpose")

    monkeypatch.setitem(selftest.CHECKS, "attacks", broken)
    assert main(["selftest"]) == 1
    assert "[FAIL] attacks" in capsys.readouterr().out


def test_invalid_config_exits_one(tmp_path):
    """
    Tests that an inconsistent configuration is a runtime failure.
    """
    config = _write_config(tmp_path, TOP_K=9)
    assert main(["train", "--config", config, "--out", str(tmp_path / "run")]) == 1


def test_missing_matrix_exits_one(tmp_path):
    """
    Tests that re-emitting a report without a saved matrix fails cleanly.
    """
    assert main(["report", "--out", str(tmp_path)]) == 1


def test_train_eval_report_cycle(tmp_path, capsys):
    """
    Tests the full command-line cycle on a tiny configuration.
    """
    config = _write_config(tmp_path)
    out = tmp_path / "run"

    assert main(["train", "--config", config, "--out", str(out)]) == 0
    assert (out / "checkpoints" / "stage_02.ckpt").exists()
    assert len((out / "stage_results.jsonl").read_text().splitlines()) == 3

    assert main(["eval", "--config", config, "--out", str(out)]) == 0
    report_dir = out / "report" / "transfer"
    metrics = json.loads((report_dir / "metrics.json").read_text())
    assert set(metrics["final_accuracy"]) == {"clean", "fgsm:linf", "pgd:linf"}
    assert (report_dir / "parameters.json").exists()

    (report_dir / "metrics.json").unlink()
    assert main(["report", "--config", config, "--out", str(out)]) == 0
    assert json.loads((report_dir / "metrics.json").read_text()) == metrics
    assert "Report re-emitted" in capsys.readouterr().out


def test_attack_cache_command(tmp_path, capsys):
    """
    Tests that cached stage datasets are generated from saved checkpoints.
    """
    config = _write_config(tmp_path)
    out = tmp_path / "run"
    assert main(["train", "--config", config, "--out", str(out)]) == 0
    for entry in (tmp_path / "cache").iterdir():
        entry.unlink()
    assert main(["attack-cache", "--config", config, "--out", str(out)]) == 0
    assert len(list((tmp_path / "cache").glob("*.bin"))) == 2
    assert "Generated 2 stage datasets" in capsys.readouterr().out
