import json

import numpy as np
import pytest

from blobcf.cli import EXIT_OK, EXIT_RUNTIME, EXIT_USAGE, main
from blobcf.config import ConfigError, dump_config, env_overrides, load_hyperparams, parse_config
from blobcf.counterfact import HyperParams
from blobcf.imageio import read_pgm, write_pgm

FAST = "t_inv = 4\nt_probe = 3\nt_cf = 3\n"


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    data, models = root / "data", root / "models"
    cfg = root / "fast.cfg"
    cfg.write_text(FAST)
    assert main(["synth", "--out", str(data), "--n-per-class", "7", "--res", "32", "--blobs", "5",
                 "--seed", "3"]) == EXIT_OK
    assert main(["train-classifier", "--data", str(data), "--out", str(models / "classifier.json"),
                 "--seed", "3"]) == EXIT_OK
    common = ["--data", str(data), "--generator", str(data / "generator.json"),
              "--classifier", str(models / "classifier.json"), "--out", str(models / "encoder.json"), "--seed", "3"]
    assert main(["train-encoder", *common, "--phase", "pretrain", "--steps", "3"]) == EXIT_OK
    assert main(["train-encoder", *common, "--phase", "finetune", "--steps", "2"]) == EXIT_OK
    return root, data, models, cfg


def test_pgm_roundtrip(tmp_path, rng):
    img = rng.uniform(size=(5, 7))
    write_pgm(tmp_path / "a.pgm", img)
    back = read_pgm(tmp_path / "a.pgm")
    assert back.shape == (5, 7)
    assert np.max(np.abs(back - img)) <= 0.5 / 65535 + 1e-15
    # quantised values survive a second round trip bit-exactly
    write_pgm(tmp_path / "b.pgm", back)
    assert np.array_equal(read_pgm(tmp_path / "b.pgm"), back)
    assert (tmp_path / "a.pgm").read_bytes().startswith(b"P5\n7 5\n65535\n")


def test_pgm_rejects_other_formats(tmp_path):
    (tmp_path / "x.pgm").write_bytes(b"P2\n1 1\n255\n0\n")
    with pytest.raises(ValueError, match="binary PGM"):
        read_pgm(tmp_path / "x.pgm")


def test_config_parsing_and_env_override(tmp_path):
    cfg = tmp_path / "h.cfg"
    cfg.write_text("# comment\ncf = 2.5\nt_cf = 12  # inline\nspatial_ranges = 1,1,1,1,1,1\n")
    hp = load_hyperparams(cfg, environ={"TACE_T_CF": "20", "OTHER": "x"})
    assert hp.cf == 2.5 and hp.t_cf == 20 and hp.spatial_ranges == (1.0,) * 6
    assert parse_config(dump_config(hp)) == {k: (tuple(v) if isinstance(v, list) else v)
                                            for k, v in hp.to_dict().items()}
    with pytest.raises(ConfigError, match="unknown key"):
        parse_config("warp = 9\n")
    with pytest.raises(ConfigError):
        env_overrides({"TACE_NOPE": "1"})
    with pytest.raises(ConfigError):
        load_hyperparams(environ={"TACE_T_CF": "0"})


def test_synth_layout(workspace):
    _, data, _, _ = workspace
    man = json.loads((data / "manifest.json").read_text())
    assert len(man["samples"]) == 14
    first = man["samples"][0]
    assert read_pgm(data / first["image"]).shape == (32, 32)
    assert (data / "generator.json").exists()


def test_models_dir_is_complete(workspace):
    _, _, models, _ = workspace
    for name in ("generator.json", "classifier.json", "encoder.json", "encoder.traces.csv"):
        assert (models / name).exists()
    assert json.loads((models / "encoder.json").read_text())["phase"] == "finetuned"


def test_invert_and_explain_write_outputs(workspace, tmp_path):
    _, data, models, cfg = workspace
    image = str(data / "images" / "00001.pgm")
    assert main(["--config", str(cfg), "invert", "--image", image, "--models", str(models),
                 "--out", str(tmp_path / "inv")]) == EXIT_OK
    assert {"scene.json", "reconstruction.pgm", "trace.csv", "summary.json"} <= {p.name for p in (tmp_path / "inv").iterdir()}
    args = ["--config", str(cfg), "explain", "--image", image, "--target", "0", "--mode", "tace",
            "--models", str(models), "--seed", "1"]
    assert main([*args, "--out", str(tmp_path / "e1")]) == EXIT_OK
    assert main([*args, "--out", str(tmp_path / "e2")]) == EXIT_OK
    r1 = (tmp_path / "e1" / "result.json").read_bytes()
    assert r1 == (tmp_path / "e2" / "result.json").read_bytes()
    body = json.loads(r1)
    assert body["mode"] == "tace" and body["k_star"] in body["neighborhood"]
    assert (tmp_path / "e1" / "counterfactual.pgm").exists()


def test_eval_is_byte_identical_across_runs(workspace, tmp_path):
    _, data, models, cfg = workspace
    outs = []
    for name in ("a", "b"):
        out = tmp_path / name
        assert main(["--config", str(cfg), "eval", "--data", str(data), "--models", str(models),
                     "--modes", "tace,unrestricted", "--n", "2", "--out", str(out), "--seed", "5"]) == EXIT_OK
        outs.append(out)
    for f in ("report.csv", "report.json", "queries.csv"):
        assert (outs[0] / f).read_bytes() == (outs[1] / f).read_bytes()
    header = (outs[0] / "report.csv").read_text().splitlines()[0]
    assert header == "mode,n,n_failed,success_rate,mean_perceptual,fid_proxy_query,fid_proxy_reference"
    assert "FID-proxy" in (outs[0] / "report.json").read_text()
    assert (outs[0] / "timing.csv").exists()


def test_usage_errors_exit_1(workspace, tmp_path, capsys):
    _, data, models, _ = workspace
    assert main(["explain", "--image", "x.pgm", "--target", "0", "--mode", "tace", "--models",
                 str(tmp_path / "nowhere"), "--out", str(tmp_path)]) == EXIT_USAGE
    assert main(["eval", "--data", str(data), "--models", str(models), "--modes", "greedy",
                 "--out", str(tmp_path)]) == EXIT_USAGE
    with pytest.raises(SystemExit) as exc:
        main(["explain", "--target", "3"])
    assert exc.value.code == EXIT_USAGE
    bad_cfg = tmp_path / "bad.cfg"
    bad_cfg.write_text("t_cf = zero\n")
    assert main(["--config", str(bad_cfg), "eval", "--data", str(data), "--models", str(models),
                 "--out", str(tmp_path)]) == EXIT_USAGE


def test_runtime_failure_exits_2(workspace, tmp_path):
    _, _, models, _ = workspace
    broken = tmp_path / "broken.pgm"
    broken.write_bytes(b"P5\n32 32\n65535\n\x00\x01")
    assert main(["invert", "--image", str(broken), "--models", str(models), "--out", str(tmp_path)]) == EXIT_RUNTIME


def test_wrong_image_size_is_usage_error(workspace, tmp_path):
    _, _, models, _ = workspace
    write_pgm(tmp_path / "big.pgm", np.zeros((64, 64)))
    assert main(["invert", "--image", str(tmp_path / "big.pgm"), "--models", str(models),
                 "--out", str(tmp_path)]) == EXIT_USAGE


def test_degenerate_hyperparams_leave_reconstructions(workspace, tmp_path):
    # one probe/cf step with no flip drive: counterfactuals are the reconstructions
    from blobcf.cli import _load_data, load_models
    from blobcf.counterfact import invert
    from blobcf.evaluation import evaluate_run
    from blobcf.phantom import load_split

    _, data, models_dir, _ = workspace
    models = load_models(models_dir)
    man, _ = _load_data(data)
    _, x, y = load_split(man, "train", models.generator)
    hp = HyperParams(t_inv=150, t_probe=1, t_cf=1, cf=0.0)
    out = evaluate_run(x[:4], y[:4], 1 - y[:4], ["tace", "unrestricted"], models, hp)
    inv = invert(x[:4], models, hp)
    with np.errstate(all="ignore"):
        rec_perc = models.classifier.perceptor.perceptual_distance(x[:4], inv.images).numpy()
        p_rec = models.classifier.forward(inv.images)[0].detach().numpy()
    for row in out.report.rows:
        assert row["mean_perceptual"] == pytest.approx(rec_perc.mean(), rel=0.05, abs=1e-4)
        assert row["success_rate"] == pytest.approx(np.mean((p_rec > 0.5) == (1 - y[:4]).astype(bool)))
