"""Binary checkpoint round trips, byte reproducibility, and corruption
diagnostics."""

import numpy as np
import numpy.testing as npt
import pytest

from lmnet.checkpoint import (
    config_text,
    load_any,
    load_checkpoint,
    load_training_checkpoint,
    parse_config_text,
    save_checkpoint,
    save_training_checkpoint,
)
from lmnet.errors import CheckpointError
from lmnet.model import GraphConfig, Variant, build_model, init_parameters
from lmnet.optim import adam_init, adam_step

from conftest import TINY_GRAPH


def tiny_graph(variant=Variant.PROPOSED, seed=0, dtype=np.float32):
    graph = build_model(variant, TINY_GRAPH, dtype=dtype)
    return init_parameters(graph, seed)


def trained_state(graph):
    """A couple of optimizer steps so moments and t are non-trivial."""
    adam = adam_init(graph.params, lr=0.01)
    rng = np.random.default_rng(5)
    for _ in range(3):
        grads = {k: rng.normal(size=v.shape).astype(v.dtype)
                 for k, v in graph.params.items()}
        adam_step(graph.params, grads, adam)
    return adam


def test_deploy_round_trip_restores_everything(tmp_path):
    graph = tiny_graph()
    graph.stats["l2.running_mean"] = np.full(2, 0.25, np.float32)
    path = tmp_path / "m.ckpt"
    save_checkpoint(graph, path)
    back = load_checkpoint(path)
    assert back.variant is Variant.PROPOSED
    assert back.config == graph.config
    assert back.dtype == np.float32
    assert set(back.params) == set(graph.params)
    for k in graph.params:
        npt.assert_array_equal(back.params[k], graph.params[k])
    for k in graph.stats:
        npt.assert_array_equal(back.stats[k], graph.stats[k])


def test_save_load_save_is_byte_identical(tmp_path):
    graph = tiny_graph(seed=2)
    first = tmp_path / "a.ckpt"
    second = tmp_path / "b.ckpt"
    save_checkpoint(graph, first)
    save_checkpoint(load_checkpoint(first), second)
    assert first.read_bytes() == second.read_bytes()


def test_predictions_survive_the_round_trip(tmp_path):
    graph = tiny_graph(seed=4)
    x = np.random.default_rng(0).random((2, 3, 8, 8)).astype(np.float32)
    before, _ = graph.forward(x, "eval")
    save_checkpoint(graph, tmp_path / "m.ckpt")
    after, _ = load_checkpoint(tmp_path / "m.ckpt").forward(x, "eval")
    npt.assert_array_equal(before, after)


def test_training_round_trip_restores_optimizer_and_meta(tmp_path):
    graph = tiny_graph(Variant.RESIDUAL, seed=1)
    adam = trained_state(graph)
    path = tmp_path / "t.ckpt"
    save_training_checkpoint(graph, adam, {"epochs_done": 3, "note": "x"}, path)
    back, adam2, meta = load_training_checkpoint(path)
    for k in graph.params:
        npt.assert_array_equal(back.params[k], graph.params[k])
        npt.assert_array_equal(adam2.m[k], adam.m[k])
        npt.assert_array_equal(adam2.v[k], adam.v[k])
    assert adam2.t == adam.t == 3
    assert adam2.lr == 0.01
    assert meta["epochs_done"] == "3"
    assert meta["note"] == "x"
    assert "lr" not in meta  # optimizer fields are lifted out of the meta dict


def test_training_save_is_reproducible(tmp_path):
    graph = tiny_graph(seed=3)
    adam = trained_state(graph)
    save_training_checkpoint(graph, adam, {"epochs_done": 1}, tmp_path / "a")
    save_training_checkpoint(graph, adam, {"epochs_done": 1}, tmp_path / "b")
    assert (tmp_path / "a").read_bytes() == (tmp_path / "b").read_bytes()


def test_kind_mismatch_both_directions(tmp_path):
    graph = tiny_graph()
    save_checkpoint(graph, tmp_path / "d.ckpt")
    save_training_checkpoint(graph, adam_init(graph.params), {}, tmp_path / "t.ckpt")
    with pytest.raises(CheckpointError, match="training checkpoint"):
        load_checkpoint(tmp_path / "t.ckpt")
    with pytest.raises(CheckpointError, match="deployment checkpoint"):
        load_training_checkpoint(tmp_path / "d.ckpt")
    # the permissive loader takes either
    assert load_any(tmp_path / "d.ckpt").variant is Variant.PROPOSED
    assert load_any(tmp_path / "t.ckpt").variant is Variant.PROPOSED


def test_missing_file_is_a_checkpoint_error(tmp_path):
    with pytest.raises(CheckpointError, match="cannot read"):
        load_checkpoint(tmp_path / "nope.ckpt")
    with pytest.raises(CheckpointError, match="cannot read"):
        load_any(tmp_path / "nope.ckpt")


def test_bad_magic_and_version(tmp_path):
    path = tmp_path / "x.ckpt"
    path.write_bytes(b"ZZZZ" + b"\x00" * 16)
    with pytest.raises(CheckpointError, match="bad magic"):
        load_checkpoint(path)

    graph = tiny_graph()
    save_checkpoint(graph, path)
    blob = bytearray(path.read_bytes())
    blob[4:6] = (99).to_bytes(2, "little")
    path.write_bytes(bytes(blob))
    with pytest.raises(CheckpointError, match="version 99"):
        load_checkpoint(path)


def test_truncation_and_trailing_bytes(tmp_path):
    path = tmp_path / "x.ckpt"
    save_checkpoint(tiny_graph(), path)
    blob = path.read_bytes()

    path.write_bytes(blob[: len(blob) // 2])
    with pytest.raises(CheckpointError, match="truncated tensor table"):
        load_checkpoint(path)

    path.write_bytes(blob + b"junk")
    with pytest.raises(CheckpointError, match="trailing bytes"):
        load_checkpoint(path)


def test_missing_tensor_is_reported_by_name(tmp_path):
    graph = tiny_graph()
    removed = graph.params.pop("l8.b")
    path = tmp_path / "x.ckpt"
    save_checkpoint(graph, path)
    graph.params["l8.b"] = removed
    with pytest.raises(CheckpointError, match="missing tensor l8.b"):
        load_checkpoint(path)


def test_config_text_round_trip():
    cfg = GraphConfig(
        input_size=(64, 96), channel_sequence=(4, 8, 16, 32),
        dilation_rates=(1, 2, 4), dropout_schedule=((5, 0.25),),
        bn_momentum=0.2, seed=9,
    )
    text = config_text(Variant.DILATION, cfg)
    variant, back = parse_config_text(text)
    assert variant is Variant.DILATION
    assert back == cfg
    assert text == config_text(variant, back)
    assert "input_size=64,96" in text
    assert text.index("bn_epsilon") < text.index("variant")  # sorted keys


def test_config_text_rejects_missing_and_unknown_keys():
    text = config_text(Variant.PLAIN, GraphConfig())
    pruned = "\n".join(l for l in text.splitlines() if not l.startswith("loss="))
    with pytest.raises(CheckpointError, match="missing keys.*loss"):
        parse_config_text(pruned)
    with pytest.raises(CheckpointError, match="unknown keys.*surprise"):
        parse_config_text(text + "surprise=1\n")
    with pytest.raises(CheckpointError, match="malformed"):
        parse_config_text("variant proposed\n")


def test_float64_graphs_keep_their_precision(tmp_path):
    graph = tiny_graph(dtype=np.float64, seed=6)
    path = tmp_path / "wide.ckpt"
    save_checkpoint(graph, path)
    back = load_checkpoint(path)
    assert back.dtype == np.float64
    npt.assert_array_equal(back.params["l4.w"], graph.params["l4.w"])


def test_empty_dropout_schedule_survives(tmp_path):
    cfg = GraphConfig(input_size=(8, 8), channel_sequence=(2, 2, 3, 3),
                      dropout_schedule=())
    graph = init_parameters(build_model(Variant.PLAIN, cfg), 0)
    path = tmp_path / "nodrop.ckpt"
    save_checkpoint(graph, path)
    assert load_checkpoint(path).config.dropout_schedule == ()
