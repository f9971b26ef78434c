"""End-to-end acceptance checks, one test per criterion.

Each test prints a single CRITERION line (visible with ``pytest -s``); the
pytest verdict for the test is the authoritative pass/fail signal.
"""

import functools
import random
import time
import numpy as np
import pytest

from fedboost import aggregate as agg
from fedboost import nn, paillier
from fedboost import quantize as qz
from fedboost.config import ExperimentConfig, two_client_noniid
from fedboost.protocol import derive_seed
from fedboost.runner import run_experiment

from test_aggregate import oracle_boost_weights
from test_protocol import make_settings, reference_fedavg, run_loopback, client_split


def criterion(number: int, name: str):
    def decorate(fn):
        @functools.wraps(fn)
        def wrapper(*args, **kwargs):
            start = time.perf_counter()
            try:
                result = fn(*args, **kwargs)
            except BaseException:
                print(f"\nCRITERION {number} [{name}]: FAIL")
                raise
            print(f"\nCRITERION {number} [{name}]: PASS ({time.perf_counter() - start:.1f}s)")
            return result

        return wrapper

    return decorate


@criterion(1, "full-scale ordinal comparison: boosted >= averaged on >= 4/5 seeds")
def test_criterion_1_full_scale_comparison():
    start = time.perf_counter()
    seeds = (1, 2, 3, 4, 5)
    wins = 0
    for seed in seeds:
        base = dict(
            clients=two_client_noniid(40000, master_seed=seed),
            master_seed=seed,
            rounds=15,
            epochs=1,
            batch_size=8,
            learning_rate=0.003,
            n_hidden=8,
        )
        averaged = run_experiment(ExperimentConfig(**base, aggregator="fedavg"))
        boosted = run_experiment(
            ExperimentConfig(**base, aggregator="fedboosting", weighting_mode="score")
        )
        win = boosted.final_test_acc >= averaged.final_test_acc
        wins += win
        print(
            f"  seed {seed}: fedavg={averaged.final_test_acc:.4f} "
            f"fedboosting={boosted.final_test_acc:.4f} win={win}"
        )
    elapsed = time.perf_counter() - start
    assert wins >= 4, f"boosted beat averaged on only {wins}/5 seeds"
    assert elapsed < 600, f"full-scale comparison took {elapsed:.0f}s (budget 600s)"


@criterion(2, "encrypted merge within closed-form bound on 500 draws")
def test_criterion_2_encryption_fidelity(key128):
    cfg = qz.QuantConfig(scale_exponent=32, pieces=100)
    assert key128.public.n.bit_length() == 128
    rng = np.random.default_rng(2024)
    nonce_rng = random.Random(2024)
    n_clients, length = 2, 6
    violations = 0
    for _ in range(500):
        scale = 10.0 ** rng.uniform(-4, 0.5)
        grads = [rng.standard_normal(length) * scale for _ in range(n_clients)]
        raw = rng.uniform(0.05, 1.0, n_clients)
        weights = agg.AggregationWeights(raw / raw.sum())
        egrads = [
            agg.encrypt_gradient(key128.public, qz.quantize(g, cfg), nonce_rng) for g in grads
        ]
        merged = agg.merge_encrypted(key128.public, egrads, weights, pieces=cfg.pieces)
        decoded = qz.dequantize(agg.decrypt_gradient(key128, merged))
        plain = agg.merge_plain(grads, weights)
        bound = sum(np.abs(g) for g in grads) / (2 * cfg.pieces) + n_clients * cfg.pieces / (
            2 * cfg.scale
        )
        violations += int(np.any(np.abs(decoded - plain) > bound))
    assert violations == 0, f"{violations}/500 draws exceeded the rounding bound"


@criterion(3, "encrypted vs plaintext end-to-end accuracy gap <= 0.5pp")
def test_criterion_3_encrypted_end_to_end():
    start = time.perf_counter()
    for seed in (1, 2, 3):
        base = dict(
            clients=two_client_noniid(4000, master_seed=seed),
            master_seed=seed,
            rounds=20,
            aggregator="fedboosting",
            weighting_mode="score",
        )
        plain = run_experiment(ExperimentConfig(**base, encryption="none"))
        protected = run_experiment(ExperimentConfig(**base, encryption="he_dp"))
        gap = abs(plain.final_test_acc - protected.final_test_acc)
        print(
            f"  seed {seed}: plaintext={plain.final_test_acc:.4f} "
            f"he_dp={protected.final_test_acc:.4f} gap={gap * 100:.3f}pp"
        )
        assert gap <= 0.005, f"seed {seed}: accuracy gap {gap * 100:.3f}pp exceeds 0.5pp"
    elapsed = time.perf_counter() - start
    assert elapsed < 180, f"desk-scale comparison took {elapsed:.0f}s (budget 180s)"


@criterion(4, "boost-weight formula matches high-precision oracle to 1e-12")
def test_criterion_4_weight_formula_oracle():
    rng = np.random.default_rng(4)
    for _ in range(1000):
        n = int(rng.integers(2, 7))
        T = rng.uniform(0.0, 4.0, n)
        V = rng.uniform(0.0, 4.0, (n, n))
        mode = "literal" if rng.integers(0, 2) == 0 else "score"
        weights = agg.fedboost_weights(T, agg.ValidationMatrix(V), mode=mode)
        expected = oracle_boost_weights(list(T), V.tolist(), mode)
        assert np.abs(weights.values - expected).max() < 1e-12
        assert np.all(weights.values >= 0) and np.all(weights.values <= 1)
        assert abs(weights.values.sum() - 1.0) < 1e-12


@criterion(5, "poisoned client weighted below 1/N in >= 90% of late rounds")
def test_criterion_5_poisoning_resilience():
    total, below = 0, 0
    for seed in (1, 2, 3):
        cfg = ExperimentConfig(
            clients=two_client_noniid(
                4000, master_seed=seed, poison_client=2, poison_flip_frac=0.5
            ),
            master_seed=seed,
            rounds=10,
            aggregator="fedboosting",
            weighting_mode="score",
        )
        result = run_experiment(cfg)
        late = [rec.weights[1] for rec in result.records if rec.round > 3]
        total += len(late)
        below += sum(w < 0.5 for w in late)
        print(f"  seed {seed}: late-round poisoned weights {[round(w, 3) for w in late]}")
    fraction = below / total
    print(f"  below 1/N in {below}/{total} rounds ({fraction:.0%})")
    assert fraction >= 0.9


@criterion(6, "uniform boosting merge reproduces the averaging reference loop")
def test_criterion_6_fedavg_reduction(key128):
    # plaintext: bit-for-bit against the monolithic reference loop
    settings = make_settings(aggregator="fedavg", encryption="none", rounds=3)
    splits = [client_split(1), client_split(2)]
    live = run_loopback(settings, splits)
    expected = reference_fedavg(settings, splits)
    assert np.array_equal(live.final_weights.values, expected.values)
    print("  plaintext reduction: bit-for-bit")

    # encrypted: every round stays within the criterion-2 bound of the float
    # merge, and the whole trajectory equals an integer shadow bit-for-bit
    settings_he = make_settings(aggregator="fedavg", encryption="he", rounds=3)
    live_he = run_loopback(settings_he, splits)
    P, S = settings_he.quant.pieces, settings_he.quant.scale
    n_clients = len(splits)
    k_uniform = qz.quantize_weight(1.0 / n_clients, P)
    params = nn.init_params(derive_seed(settings_he.master_seed, "init"), settings_he.layout)
    for r in range(1, settings_he.rounds + 1):
        grads = [
            nn.train_local(
                params,
                splits[cid - 1],
                settings_he.batch_size,
                settings_he.epochs,
                settings_he.optimizer,
                derive_seed(settings_he.master_seed, "shuffle", r, cid),
            ).gradient
            for cid in range(1, n_clients + 1)
        ]
        quantized = [qz.quantize(g, settings_he.quant).values for g in grads]
        merged_ints = [
            sum(k_uniform * q[e] for q in quantized) for e in range(len(quantized[0]))
        ]
        decoded = qz.dequantize(
            qz.QuantizedGradient(
                merged_ints, qz.QuantConfig(settings_he.quant.scale_exponent, pieces=1)
            )
        )
        plain = agg.merge_plain(grads, agg.fedavg_weights(n_clients))
        bound = sum(np.abs(g) for g in grads) / (2 * P) + n_clients * P / (2 * S)
        assert np.all(np.abs(decoded - plain) <= bound), f"round {r} exceeded the merge bound"
        params = nn.apply_gradient(params, decoded)
    assert np.array_equal(live_he.final_weights.values, params.values)
    print("  encrypted reduction: within per-round bound, shadow bit-for-bit")


@criterion(7, "cryptosystem property suite: 1000-case roundtrips, zero failures")
def test_criterion_7_paillier_properties(key128):
    pk = key128.public
    rng = random.Random(7)
    for _ in range(1000):
        m1, m2 = rng.randrange(pk.n), rng.randrange(pk.n)
        total = paillier.he_add(pk, paillier.encrypt(pk, m1, rng), paillier.encrypt(pk, m2, rng))
        assert paillier.decrypt(key128, total) == (m1 + m2) % pk.n
    for _ in range(1000):
        m, k = rng.randrange(pk.n), rng.randrange(0, 10**6)
        scaled = paillier.he_scalar_mul(pk, k, paillier.encrypt(pk, m, rng))
        assert paillier.decrypt(key128, scaled) == k * m % pk.n
    half = pk.n // 2
    for v in [0, 1, -1, half, -half] + [rng.randrange(-half, half + 1) for _ in range(1000)]:
        encoded = paillier.encode_signed(v, pk.n)
        assert 0 <= encoded < pk.n
        assert paillier.decode_signed(encoded, pk.n) == v


@criterion(8, "loopback and TCP transports produce byte-identical metrics")
def test_criterion_8_transport_equivalence(tmp_path):
    outputs = {}
    for transport in ("loopback", "tcp"):
        out = tmp_path / transport
        cfg = ExperimentConfig(
            clients=two_client_noniid(200, master_seed=8),
            master_seed=8,
            rounds=2,
            aggregator="fedboosting",
            encryption="he_dp",
            transport=transport,
            out_dir=str(out),
        )
        run_experiment(cfg)
        outputs[transport] = (out / "metrics.csv").read_bytes()
    assert outputs["loopback"] == outputs["tcp"]
    print(f"  metrics identical across transports ({len(outputs['loopback'])} bytes)")
