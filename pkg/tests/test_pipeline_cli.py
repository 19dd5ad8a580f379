import hashlib
import json
import os
import subprocess
import sys

import numpy as np
import pytest

from loramix.cli import main
from loramix.io import read_pgm, read_raw, write_raw
from loramix.mmdit import flow_denoise, init_model, noise_latent, synthetic_prompt
from loramix.pipeline import ConfigError, load_config, run_command

from conftest import REPO

DEFAULT = REPO / "configs" / "default.json"
# sha256 of latent.f32 from `gen` on the shipped config with the gate at t=0 (no blending step)
GATE_ZERO_LATENT_SHA256 = "7ec45cd9db34318e90e5509cdc81573913fa28750e1bb1150238ed1edabe9278"


def report(out):
    return json.loads((out / "report.json").read_text())


def sha(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


def run_cli(args, threads=None):
    env = dict(os.environ)
    if threads is not None:
        env.update(OMP_NUM_THREADS=str(threads), OPENBLAS_NUM_THREADS=str(threads), MKL_NUM_THREADS=str(threads))
    return subprocess.run([sys.executable, "-m", "loramix", *args], env=env, capture_output=True, text=True,
                          cwd=REPO)


def test_prior_writes_disjoint_masks(tmp_path):
    assert run_command("prior", DEFAULT, {"out": str(tmp_path)}) == 0
    masks = [read_pgm(tmp_path / f"prior_{i}_{n}.pgm") > 0 for i, n in enumerate(["subject_a", "subject_b"])]
    assert not (masks[0] & masks[1]).any()
    rep = report(tmp_path)
    assert rep["status"] == "ok" and rep["metrics"]["capture_step"] == 1
    assert [p["claimed_tokens"] for p in rep["priors"]] == [int(m.sum()) for m in masks]
    assert read_raw(tmp_path / "prior_0_subject_a.f32").shape == (8, 8)


def test_gen_report(tmp_path):
    assert run_command("gen", DEFAULT, {"out": str(tmp_path)}) == 0
    rep = report(tmp_path)
    assert rep["counters"] == {"base_forwards": 16, "adapter_forwards": [14, 14]}
    assert [g["open"] for g in rep["gates"]] == [False, False] + [True] * 14
    assert rep["residual_checks"]["violations"] == 0 and rep["residual_checks"]["steps_checked"] == 14
    assert rep["checksums"]["latent.f32"] == sha(tmp_path / "latent.f32")
    assert "timings" not in rep or not rep["timings"]


def test_gate_zero_golden_checksum(tmp_path, cfg):
    assert run_command("gen", DEFAULT, {"out": str(tmp_path), "t": 0.0}) == 0
    assert sha(tmp_path / "latent.f32") == GATE_ZERO_LATENT_SHA256
    # and it is the adapter-free sample
    model = init_model(cfg)
    base = flow_denoise(model, noise_latent(cfg, 2), 16, synthetic_prompt(cfg, 1))
    write_raw(base, tmp_path / "base.f32")
    assert sha(tmp_path / "base.f32") == GATE_ZERO_LATENT_SHA256


def test_single_subject_config(tmp_path):
    assert run_command("gen", REPO / "configs" / "single.json", {"out": str(tmp_path)}) == 0
    assert report(tmp_path)["counters"]["adapter_forwards"] == [14]


def test_missing_adapter_names_path(tmp_path):
    conf = json.loads(DEFAULT.read_text())
    conf["subjects"][1]["adapter"] = "adapters/nope.lora"
    path = tmp_path / "c.json"
    path.write_text(json.dumps(conf))
    (tmp_path / "adapters").symlink_to(REPO / "configs" / "adapters")
    out = tmp_path / "out"
    assert run_command("gen", path, {"out": str(out)}) == 2
    rep = report(out)
    assert rep["status"] == "error" and "nope.lora" in rep["error"]


def test_unknown_config_key(tmp_path):
    path = tmp_path / "c.json"
    path.write_text(json.dumps({**json.loads(DEFAULT.read_text()), "bogus": 1}))
    with pytest.raises(ConfigError):
        load_config(path, {})


def test_bad_override_is_config_error(tmp_path):
    assert run_command("gen", DEFAULT, {"out": str(tmp_path), "tau": 1.5}) == 2
    assert report(tmp_path)["exit_code"] == 2


def test_edit_roundtrip(tmp_path):
    gen = tmp_path / "gen"
    assert run_command("gen", DEFAULT, {"out": str(gen), "t": 0.0}) == 0
    out = tmp_path / "edit"
    assert run_command("edit", DEFAULT, {"out": str(out)}, input_path=gen / "latent.f32") == 0
    rep = report(out)
    assert rep["counters"]["adapter_forwards"] == [14, 14]
    assert rep["metrics"]["roundtrip_rms"] < 0.0745
    again = tmp_path / "edit2"
    run_command("edit", DEFAULT, {"out": str(again)}, input_path=gen / "latent.f32")
    assert sha(again / "latent.f32") == sha(out / "latent.f32")


def test_edit_malformed_latent(tmp_path):
    bad = tmp_path / "bad.f32"
    bad.write_bytes(b"\x08\x00\x00\x00\x04\x00\x00\x00" + b"\x00" * 10)
    assert run_command("edit", DEFAULT, {"out": str(tmp_path / "o")}, input_path=bad) == 2
    assert "error" == report(tmp_path / "o")["status"]
    wrong = tmp_path / "wrong.f32"
    write_raw(np.zeros((3, 3)), wrong)
    assert run_command("edit", DEFAULT, {"out": str(tmp_path / "w")}, input_path=wrong) == 2


def test_more_steps_lower_roundtrip_error(tmp_path):
    gen = tmp_path / "gen"
    run_command("gen", DEFAULT, {"out": str(gen), "t": 0.0})
    errs = []
    for steps in (8, 16):
        out = tmp_path / f"e{steps}"
        assert run_command("edit", DEFAULT, {"out": str(out), "steps": steps}, input_path=gen / "latent.f32") == 0
        errs.append(report(out)["metrics"]["roundtrip_rms"])
    assert errs[1] < errs[0]


def test_cli_determinism_across_threads(tmp_path):
    # same --out for both runs since the report records the output path
    out = tmp_path / "run"
    outs = []
    for threads in (1, 4):
        proc = run_cli(["gen", "--config", str(DEFAULT), "--out", str(out)], threads)
        assert proc.returncode == 0, proc.stderr
        outs.append(out.rename(tmp_path / f"t{threads}"))
    names = sorted(p.name for p in outs[0].iterdir())
    assert names == sorted(p.name for p in outs[1].iterdir())
    for name in names:
        assert (outs[0] / name).read_bytes() == (outs[1] / name).read_bytes(), name


def test_timings_opt_in(tmp_path):
    assert run_command("prior", DEFAULT, {"out": str(tmp_path)}, timings=True) == 0
    assert set(report(tmp_path)["timings"]) >= {"priors"}


def test_cli_main_entry(tmp_path):
    assert main(["prior", "--config", str(DEFAULT), "--out", str(tmp_path), "--gamma", "1.0"]) == 0
    assert report(tmp_path)["metrics"]["capture_step"] == 0


def test_selftest_pass_and_mutation():
    ok = run_cli(["selftest"])
    assert ok.returncode == 0 and "11/11 suites passed" in ok.stdout
    assert run_cli(["selftest"]).stdout == ok.stdout
    bad = run_cli(["selftest", "--mutate", "gaussian_kernel"])
    assert bad.returncode == 1
    assert "gaussian kernel weights sum to 1" in bad.stdout
    assert run_cli(["selftest", "--mutate", "nothing"]).returncode == 2


@pytest.mark.parametrize("kernel", ["conv2d_same", "matmul"])
def test_selftest_catches_other_mutations(kernel):
    from loramix.selftest import run_selftest
    assert not all(r.passed for r in run_selftest([kernel]))
