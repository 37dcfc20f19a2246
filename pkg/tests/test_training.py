import json

import numpy as np
import pytest

from hralert import autodiff as ad
from hralert.graph import build_graph
from hralert.metrics import known_tails
from hralert.synthetic import functional_statements
from hralert.training import (CHECKPOINT_DIR, MODEL_KINDS, TrainConfig, epoch_batches, evaluate,
                              load_checkpoint, make_groups, train, write_history)

SIZES = (30, 4, 4, 10)


@pytest.fixture(scope="module")
def data():
    stmts = functional_statements(np.random.default_rng(0), n_statements=60)
    return stmts[:40], stmts[40:50], stmts[50:]


def small(model="alertstar", **kw):
    base = dict(model=model, d=4, heads=2, mt_heads=2, mt_layers=1, ffn=8, layers=1, epochs=2,
                dropout=0.1, batch_size=16)
    base.update(kw)
    return TrainConfig(**base)


@pytest.mark.parametrize("field,value", [("model", "transe"), ("d", 0), ("dropout", 1.0),
                                         ("lambda_rel", -1.0), ("batch_size", -2)])
def test_config_validation(field, value):
    with pytest.raises(ValueError):
        TrainConfig(**{field: value})


def test_config_defaults_follow_reported_hyperparameters():
    cfg = TrainConfig()
    assert (cfg.lr, cfg.epochs, cfg.margin, cfg.clip_norm, cfg.k_max, cfg.q_max, cfg.d,
            cfg.dropout, cfg.layers) == (5e-4, 20, 1.0, 1.0, 8, 8, 200, 0.2, 3)
    assert [TrainConfig(model=m).effective_batch_size for m in MODEL_KINDS[:4]] == [128, 64, 32, 32]


def test_config_dict_round_trip():
    cfg = small("mt-hr-nbfnet", lambda_qv=0.0)
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ValueError):
        TrainConfig.from_dict({"bogus": 1})


@pytest.mark.parametrize("kind", MODEL_KINDS)
def test_every_model_trains_and_reloads(kind, data, tmp_path):
    result = train(small(kind), SIZES, *data, out_dir=tmp_path, vocab_hash="abc")
    assert len(result.history) == 2
    assert result.best_val_mrr == max(row["val_mrr"] for row in result.history)
    model, cfg, meta = load_checkpoint(tmp_path / CHECKPOINT_DIR, SIZES)
    assert cfg.model == kind and meta["vocab_sha256"] == "abc"
    g = build_graph(data[0], 30, 4)
    known = known_tails(*data)
    assert evaluate(model, data[1], known, graph=g).mrr == result.best_val_mrr


def test_twenty_epochs_give_twenty_rows_and_gate_trace(data, tmp_path):
    result = train(small(epochs=20, d=4), SIZES, *data)
    assert len(result.history) == 20
    assert result.initial_gate == pytest.approx(0.6225, abs=5e-5)
    assert all(row["gate"] is not None for row in result.history)
    write_history(tmp_path, result.history, result.initial_gate)
    lines = (tmp_path / "history.tsv").read_text().splitlines()
    assert lines[0].startswith("# initial_gate=") and len(lines) == 22
    assert len(json.loads((tmp_path / "history.json").read_text())["epochs"]) == 20


def test_runs_are_bit_reproducible(data, tmp_path):
    outs = []
    for run in ("a", "b"):
        res = train(small("mt-alertstar"), SIZES, *data, out_dir=tmp_path / run)
        ckpt = tmp_path / run / CHECKPOINT_DIR
        outs.append((res.history, (ckpt / "params.bin").read_bytes(), (ckpt / "meta.json").read_text()))
    assert outs[0] == outs[1]


def test_non_finite_loss_raises(data, monkeypatch):
    from hralert.alertstar import AlertStar
    monkeypatch.setattr(AlertStar, "batch_loss",
                        lambda self, *a, **k: ad.sum_(self.gate * float("nan")))
    with pytest.raises(FloatingPointError, match="epoch 1"):
        train(small(), SIZES, *data)


def test_empty_splits_rejected(data):
    with pytest.raises(ValueError):
        train(small(), SIZES, [], data[1])
    with pytest.raises(ValueError):
        train(small(), SIZES, data[0], [])


def test_groups_collect_unique_tails(data):
    groups = make_groups(data[0], 8)
    seen = {(g.head, g.relation) for g in groups}
    assert len(seen) == len(groups)
    for g in groups:
        assert sorted(set(g.tails.tolist())) == g.tails.tolist()


def test_group_batches_cap_tails():
    from hralert.graph import Statement
    stmts = [Statement(0, 0, t) for t in range(1, 20)]
    cfg = small("hr-nbfnet", k_max=5)
    (batch,) = epoch_batches(cfg, stmts, make_groups(stmts, 8), np.random.default_rng(0))
    assert len(batch) == 1 and len(batch[0].tails) == 5
    assert set(batch[0].tails.tolist()) <= set(range(1, 20))
