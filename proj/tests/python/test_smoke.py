import json
import math

import pytest

import safm


def test_init_lambda_matches_closed_form():
    lam = safm.init_lambda(2, 0.11, 0.08)
    phi = math.exp(0.11) + 2 * math.exp(0.08) + math.exp(-0.08)
    assert lam == pytest.approx(
        [math.exp(0.11) / phi, math.exp(0.08) / phi, math.exp(0.08) / phi, math.exp(-0.08) / phi],
        abs=1e-12,
    )
    with pytest.raises(ValueError):
        safm.init_lambda(1, 0.08, 0.11)


def test_model_config_layout():
    cfg = safm.ModelConfig()
    assert cfg.vocab() == 83
    assert cfg.task_token(1) == 3
    assert cfg.base_token(0) == 19
    assert safm.adapter_param_count(cfg.width, cfg.bottleneck) == 552


def test_default_no_as_layers():
    assert safm.default_no_as_layers(4) == [3]
    assert safm.default_no_as_layers(12) == [7]


def test_stream_and_materialize():
    stream = json.loads(safm.make_stream("similar", 3, 1))
    assert stream["scenario"] == "similar"
    assert len(stream["specs"]) == 3
    domains = [set(s["domain"]) for s in stream["specs"]]
    assert not (domains[0] & domains[1])
    data = safm.materialize_task(safm.make_stream("similar", 3, 1), 2)
    assert len(data["train"]) == 256
    sample = data["train"][0]
    toks = safm.encode_sample(sample["task"], sample["x"], sample["y"])
    assert toks[0] == safm.ModelConfig().task_token(2)
    assert toks[-1] == 2  # EOS


def test_metrics():
    assert safm.score([[0.8], [0.75, 0.7]]) == pytest.approx(0.725)
    assert safm.bwt([[0.9], [0.8, 0.7]]) == pytest.approx(-0.1)
    assert safm.bwt([[0.5], [0.45, 0.6], [0.4, 0.55, 0.3]]) == pytest.approx(-0.075)


def test_run_seed_tiny(tmp_path):
    cfg = json.loads(safm.default_config_json())
    cfg.update(
        n_tasks=2,
        seeds=[1],
        method="adaptercl",
        model=dict(layers=2, width=16, heads=2, max_seq=16, bottleneck=4,
                   base_vocab=16, max_tasks=4),
        data=dict(domain_size=4, x_len=2, train_n=16, valid_n=4, test_n=8),
        pretrain_epochs=2,
        pretrain_n=32,
        warmup_epochs=1,
        search_epochs=1,
        tune_epochs=2,
        out_dir=str(tmp_path / "run"),
    )
    report = safm.run_seed(json.dumps(cfg), 1, str(tmp_path / "run"))
    assert report["method"] == "adaptercl"
    assert report["bwt"] == 0.0
    assert len(report["r_matrix"]) == 2
    assert (tmp_path / "run" / "r_matrix.csv").exists()
    md = safm.aggregate_report(str(tmp_path / "run"))
    assert "adaptercl" in md


def test_unknown_config_key_rejected():
    with pytest.raises(ValueError):
        safm.run_seed(json.dumps({"optimizer": "adam"}), 1, "")
