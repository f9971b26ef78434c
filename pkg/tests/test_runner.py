import json

import numpy as np
import pytest

from fedboost import nn
from fedboost.config import (
    ClientSpec,
    ExperimentConfig,
    GridSpec,
    config_from_dict,
    config_to_dict,
    load_config,
    two_client_noniid,
)
from fedboost.errors import ConfigError, IoError
from fedboost.runner import (
    build_splits,
    export_boundary,
    export_metrics,
    load_model,
    run_experiment,
    save_model,
)


def desk_config(**overrides) -> ExperimentConfig:
    base = dict(
        clients=two_client_noniid(400, master_seed=5),
        rounds=3,
        master_seed=5,
        aggregator="fedboosting",
        encryption="none",
    )
    base.update(overrides)
    return ExperimentConfig(**base)


class TestConfigValidation:
    def test_zero_rounds_rejected(self):
        with pytest.raises(ConfigError, match="rounds"):
            run_experiment(desk_config(rounds=0))

    def test_he_dp_requires_fedboosting(self):
        with pytest.raises(ConfigError, match="encryption"):
            desk_config(aggregator="fedavg", encryption="he_dp").validate()

    def test_centralized_cannot_encrypt(self):
        with pytest.raises(ConfigError, match="encryption"):
            desk_config(aggregator="centralized", encryption="he").validate()

    def test_fedboosting_needs_two_clients(self):
        cfg = desk_config()
        cfg.clients = cfg.clients[:1]
        with pytest.raises(ConfigError, match="clients"):
            cfg.validate()

    def test_unknown_aggregator(self):
        with pytest.raises(ConfigError, match="aggregator"):
            desk_config(aggregator="fedprox").validate()

    def test_poison_fraction_bounds(self):
        cfg = desk_config()
        bad = ClientSpec(clusters=cfg.clients[0].clusters, seed=1, poison_flip_frac=1.5)
        cfg.clients = (bad, cfg.clients[1])
        with pytest.raises(ConfigError, match="poison_flip_frac"):
            cfg.validate()

    def test_json_roundtrip(self, tmp_path):
        cfg = desk_config(encryption="he_dp", out_dir=str(tmp_path / "out"))
        data = config_to_dict(cfg)
        assert config_from_dict(json.loads(json.dumps(data))) == cfg

    def test_unknown_field_rejected(self):
        with pytest.raises(ConfigError, match="gpu_count"):
            config_from_dict({"gpu_count": 4})

    def test_load_config_missing_file(self, tmp_path):
        with pytest.raises(ConfigError):
            load_config(str(tmp_path / "nope.json"))


class TestSplits:
    def test_poisoning_applied_to_train_only(self):
        cfg = desk_config()
        poisoned_cfg = desk_config(
            clients=two_client_noniid(400, master_seed=5, poison_client=2, poison_flip_frac=0.5)
        )
        clean = build_splits(cfg)[1]
        poisoned = build_splits(poisoned_cfg)[1]
        flips = (clean.train.y != poisoned.train.y).sum()
        assert flips == int(round(0.5 * len(clean.train)))
        assert np.array_equal(clean.validation.y, poisoned.validation.y)
        assert np.array_equal(clean.test.y, poisoned.test.y)


class TestRunExperiment:
    def test_fedboosting_records_have_weights_and_matrix(self):
        result = run_experiment(desk_config())
        assert len(result.records) == 3
        for rec in result.records:
            assert rec.weights is not None and abs(sum(rec.weights) - 1.0) < 1e-12
            assert np.array(rec.validation).shape == (2, 2)
            assert 0.0 <= rec.global_test_acc <= 1.0

    def test_fedavg_records_have_no_weights(self):
        result = run_experiment(desk_config(aggregator="fedavg"))
        for rec in result.records:
            assert rec.weights is None and rec.validation is None

    def test_boost_weights_leave_uniform_on_noniid_data(self):
        result = run_experiment(desk_config())
        weights = np.array([rec.weights for rec in result.records])
        assert np.abs(weights - 0.5).max() > 1e-6

    def test_centralized_runs_and_reports(self):
        result = run_experiment(desk_config(aggregator="centralized"))
        assert len(result.records) == 3
        assert len(result.records[0].train_losses) == 1
        assert result.final_test_acc > 0.5

    def test_single_round_he_fedavg_within_merge_bound_of_plaintext(self):
        from fedboost.protocol import derive_seed

        cfg = desk_config(aggregator="fedavg", rounds=1)
        plain = run_experiment(cfg)
        enc = run_experiment(desk_config(aggregator="fedavg", rounds=1, encryption="he"))
        # both runs share the round-1 gradients; only the merge path differs
        settings = cfg.to_protocol_settings()
        initial = nn.init_params(derive_seed(cfg.master_seed, "init"), settings.layout)
        grads = [
            nn.train_local(
                initial,
                split_part,
                cfg.batch_size,
                cfg.epochs,
                settings.optimizer,
                derive_seed(cfg.master_seed, "shuffle", 1, cid),
            ).gradient
            for cid, split_part in enumerate(build_splits(cfg), start=1)
        ]
        P, S = cfg.quant.pieces, cfg.quant.scale
        bound = sum(np.abs(g) for g in grads) / (2 * P) + len(grads) * P / (2 * S)
        diff = np.abs(enc.final_params.values - plain.final_params.values)
        assert np.all(diff <= bound)

    def test_reproducible_final_model(self):
        a = run_experiment(desk_config(encryption="he_dp"))
        b = run_experiment(desk_config(encryption="he_dp"))
        assert np.array_equal(a.final_params.values, b.final_params.values)

    def test_transports_yield_identical_transcripts(self):
        cfg = dict(
            clients=two_client_noniid(200, master_seed=6),
            rounds=2,
            master_seed=6,
            aggregator="fedboosting",
            encryption="he_dp",
        )
        loop = run_experiment(ExperimentConfig(**cfg, transport="loopback"), keep_transcript=True)
        tcp = run_experiment(ExperimentConfig(**cfg, transport="tcp"), keep_transcript=True)
        assert loop.transcript == tcp.transcript
        assert np.array_equal(loop.final_params.values, tcp.final_params.values)

    def test_outputs_written(self, tmp_path):
        out = tmp_path / "run"
        run_experiment(desk_config(rounds=2, out_dir=str(out)))
        assert (out / "metrics.csv").exists()
        assert (out / "model.json").exists()
        assert (out / "records.json").exists()
        assert (out / "config.json").exists()
        params = load_model(out / "model.json")
        assert params.values.shape == (42,)


class TestExportMetrics:
    def test_row_count_and_header(self, tmp_path):
        result = run_experiment(desk_config())
        path = tmp_path / "metrics.csv"
        export_metrics(result.records, path)
        lines = path.read_text().splitlines()
        assert lines[0] == "round,client,train_loss,weight,global_test_loss,global_test_acc"
        assert len(lines) == 1 + 3 * 2

    def test_reexport_is_byte_identical(self, tmp_path):
        result = run_experiment(desk_config(rounds=2))
        a, b = tmp_path / "a.csv", tmp_path / "b.csv"
        export_metrics(result.records, a)
        export_metrics(result.records, b)
        assert a.read_bytes() == b.read_bytes()

    def test_weight_column_sums_to_one_per_round(self, tmp_path):
        result = run_experiment(desk_config())
        path = tmp_path / "metrics.csv"
        export_metrics(result.records, path)
        per_round = {}
        for line in path.read_text().splitlines()[1:]:
            parts = line.split(",")
            per_round.setdefault(parts[0], 0.0)
            per_round[parts[0]] += float(parts[3])
        assert all(abs(total - 1.0) < 1e-9 for total in per_round.values())

    def test_unwritable_path(self, tmp_path):
        result = run_experiment(desk_config(rounds=2))
        with pytest.raises(IoError):
            export_metrics(result.records, tmp_path / "missing-dir" / "metrics.csv")


class TestExportBoundary:
    def test_two_steps_gives_four_rows(self, tmp_path):
        params = nn.init_params(0, nn.mlp_layout())
        path = tmp_path / "grid.csv"
        export_boundary(params, GridSpec(steps=2), path)
        lines = path.read_text().splitlines()
        assert lines[0] == "x,y,p_class1"
        assert len(lines) == 1 + 4

    def test_zero_params_give_half_everywhere(self, tmp_path):
        params = nn.ModelParams(np.zeros(42), nn.mlp_layout())
        path = tmp_path / "grid.csv"
        export_boundary(params, GridSpec(steps=3), path)
        for line in path.read_text().splitlines()[1:]:
            assert float(line.split(",")[2]) == 0.5

    def test_grid_matches_forward_pointwise(self, tmp_path):
        params = nn.init_params(3, nn.mlp_layout())
        path = tmp_path / "grid.csv"
        export_boundary(params, GridSpec(xmin=-1, xmax=1, ymin=-1, ymax=1, steps=4), path)
        for line in path.read_text().splitlines()[1:]:
            x, y, p = (float(v) for v in line.split(","))
            assert p == nn.forward(params, (x, y))[1]

    def test_degenerate_grid_rejected(self, tmp_path):
        params = nn.init_params(0, nn.mlp_layout())
        with pytest.raises(ConfigError):
            export_boundary(params, GridSpec(steps=1), tmp_path / "g.csv")
        with pytest.raises(ConfigError):
            export_boundary(params, GridSpec(xmin=2.0, xmax=-2.0), tmp_path / "g.csv")


class TestModelRoundtrip:
    def test_save_load_bit_exact(self, tmp_path):
        params = nn.init_params(11, nn.mlp_layout())
        path = tmp_path / "model.json"
        save_model(params, path)
        restored = load_model(path)
        assert np.array_equal(restored.values, params.values)
        assert restored.layout == params.layout
