"""Tests for the federation engine: aggregation algebra, adaptive
weights, strategy behavior, determinism, and the privacy boundary."""

import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fedrecon import autodiff as ad
from fedrecon.autodiff import PartitionTag
from fedrecon.checks import softmax_oracle
from fedrecon.federation import (
    CSV_COLUMNS,
    ClientState,
    FedRunConfig,
    ProtocolError,
    UploadPayload,
    adaptive_weights,
    aggregate,
    batch_loss,
    client_receive,
    client_train,
    dataset_loss,
    eval_mixed_loss,
    eval_server_loss,
    fedavg_weights,
    run_federation,
    split_dataset,
    write_reports_csv,
    zero_filled_metrics,
    evaluate_model,
)
from fedrecon.mri import PhantomSpec, make_mask, make_phantoms
from fedrecon.network import UnrolledModel, partition_params
from fedrecon.optim import AdamW


def tiny_dataset(seed=0, count=6, size=16):
    mask = make_mask(size, size, "1D_RANDOM", 2, seed=seed)
    return make_phantoms(PhantomSpec(size=size, seed=seed), count, mask)


def tiny_client(seed=0, hidden=4, gamma=0.1):
    samples = tiny_dataset(seed=seed)
    s1, s2 = samples[:4], samples[4:]
    model = UnrolledModel(hidden=hidden, unroll_steps=1, cg_iters=4, seed=seed)
    partition_params(model, "SLAM_LOCAL")
    return ClientState(
        client_id=0,
        model=model,
        optimizer=AdamW(lr=1e-3),
        s1=s1,
        s2=s2,
        gamma=gamma,
        local_epochs=1,
        batch_size=2,
        seed=seed,
    )


def tiny_run_config(**overrides):
    values = dict(
        strategy="MODFED",
        rounds=2,
        local_epochs=1,
        learning_rate=1e-3,
        batch_size=2,
        hidden=4,
        unroll_steps=1,
        cg_iters=4,
        seed=0,
    )
    values.update(overrides)
    return FedRunConfig(**values)


def tiny_fleet(n_clients=2):
    out = []
    for k in range(n_clients):
        samples = tiny_dataset(seed=10 + k)
        out.append((samples[:4], samples[4:]))
    return out


# ---------------------------------------------------------------------------
# weights


def test_adaptive_weights_two_client_exact():
    # softmax of [0, ln 2] is exactly [1/3, 2/3]
    w = adaptive_weights([0.0, math.log(2.0)])
    assert abs(w[0] - 1.0 / 3.0) < 1e-15
    assert abs(w[1] - 2.0 / 3.0) < 1e-15


def test_adaptive_weights_three_client_values():
    w = adaptive_weights([1.0, 2.0, 3.0])
    assert np.allclose(w, [0.09003057, 0.24472847, 0.66524096], atol=1e-6)
    assert np.allclose(w, softmax_oracle([1.0, 2.0, 3.0]), atol=1e-12)


def test_adaptive_weights_shift_invariant_and_normalized():
    base = adaptive_weights([0.5, 1.5, 2.5])
    shifted = adaptive_weights([100.5, 101.5, 102.5])
    assert np.allclose(base, shifted, atol=1e-12)
    assert abs(base.sum() - 1.0) < 1e-12


def test_adaptive_weights_rank_order():
    # larger subset-2 loss -> larger weight (the aggregation favors
    # clients the shared model currently serves worst)
    w = adaptive_weights([0.2, 3.0, 1.0])
    assert w[1] > w[2] > w[0]


def test_adaptive_weights_reject_non_finite():
    with pytest.raises(ProtocolError):
        adaptive_weights([1.0, math.nan])


def test_fedavg_weights_proportional():
    assert np.allclose(fedavg_weights([10, 30]), [0.25, 0.75], atol=1e-15)
    with pytest.raises(ValueError):
        fedavg_weights([0, 5])


@given(st.lists(st.floats(-20, 20), min_size=1, max_size=6))
@settings(max_examples=40, deadline=None)
def test_adaptive_weights_simplex_property(losses):
    w = adaptive_weights(losses)
    assert np.all(w > 0.0) and abs(w.sum() - 1.0) < 1e-9


# ---------------------------------------------------------------------------
# aggregation


def _payload(cid, values):
    return UploadPayload(
        client_id=cid,
        tensors={k: np.asarray(v, dtype=float) for k, v in values.items()},
        loss_s1=0.0,
        loss_s2=0.0,
    )


def test_aggregate_hand_computed_two_clients():
    pa = _payload(0, {"w": [1.0, 2.0]})
    pb = _payload(1, {"w": [3.0, 6.0]})
    out = aggregate([pa, pb], np.array([0.25, 0.75]))
    assert np.allclose(out["w"], [2.5, 5.0], atol=1e-12)


def test_aggregate_affine_equivariance():
    # aggregating (a*x + c) equals a*aggregate(x) + c for convex weights
    rng = np.random.default_rng(0)
    xs = [rng.standard_normal(5) for _ in range(3)]
    alphas = adaptive_weights([1.0, 0.5, 2.0])
    base = aggregate([_payload(i, {"w": x}) for i, x in enumerate(xs)], alphas)["w"]
    mapped = aggregate(
        [_payload(i, {"w": 3.0 * x + 1.0}) for i, x in enumerate(xs)], alphas
    )["w"]
    assert np.allclose(mapped, 3.0 * base + 1.0, atol=1e-12)


def test_aggregate_identity_when_single_client():
    x = np.arange(4.0)
    out = aggregate([_payload(0, {"w": x})], np.array([1.0]))
    assert np.array_equal(out["w"], x)


def test_aggregate_validates_weights_names_shapes():
    pa = _payload(0, {"w": [1.0]})
    pb = _payload(1, {"w": [2.0]})
    with pytest.raises(ProtocolError):
        aggregate([pa, pb], np.array([0.5, 0.6]))
    with pytest.raises(ProtocolError):
        aggregate([pa, _payload(1, {"v": [2.0]})], np.array([0.5, 0.5]))
    with pytest.raises(ProtocolError):
        aggregate([pa, _payload(1, {"w": [[2.0]]})], np.array([0.5, 0.5]))


# ---------------------------------------------------------------------------
# client protocol


def test_client_receive_overwrites_only_shared_partition():
    client = tiny_client(seed=1)
    server = UnrolledModel(hidden=4, unroll_steps=1, cg_iters=4, seed=99)
    partition_params(server, "SLAM_LOCAL")
    before = client.model.state_dict()
    client_receive(client, server)
    after = client.model.state_dict()
    server_state = server.state_dict()
    for name, p in client.model.named_parameters().items():
        if p.tag is PartitionTag.GLOBAL_SHARED:
            assert np.array_equal(after[name], server_state[name])
        else:
            assert np.array_equal(after[name], before[name])


def test_client_receive_name_mismatch_raises():
    client = tiny_client(seed=1)
    server = UnrolledModel(hidden=6, unroll_steps=1, cg_iters=4, seed=0)
    with pytest.raises(ProtocolError):
        client_receive(client, server)


def test_eval_losses_require_receive_and_data():
    client = tiny_client(seed=2)
    with pytest.raises(ProtocolError):
        eval_server_loss(client)
    client.s2 = []
    with pytest.raises(ValueError):
        eval_mixed_loss(client)


def test_mixed_loss_equals_client_model_loss_after_receive():
    client = tiny_client(seed=3)
    server = UnrolledModel(hidden=4, unroll_steps=1, cg_iters=4, seed=7)
    partition_params(server, "SLAM_LOCAL")
    client_receive(client, server)
    assert eval_mixed_loss(client) == dataset_loss(client.model, client.s2)


def test_literal_mode_server_loss_never_changes_training():
    # the server-loss regularizer enters as a constant, so the parameter
    # trajectory is identical for any value of it
    results = []
    for loss_server in (0.0, 123.4):
        client = tiny_client(seed=4)
        server = UnrolledModel(hidden=4, unroll_steps=1, cg_iters=4, seed=8)
        partition_params(server, "SLAM_LOCAL")
        client_receive(client, server)
        client_train(client, loss_server, mode="LITERAL", round_index=1)
        results.append(client.model.state_dict())
    for name in results[0]:
        assert np.array_equal(results[0][name], results[1][name])


def test_consistency_mode_changes_training():
    states = []
    for mode in ("LITERAL", "CONSISTENCY"):
        client = tiny_client(seed=5, gamma=0.5)
        server = UnrolledModel(hidden=4, unroll_steps=1, cg_iters=4, seed=9)
        partition_params(server, "SLAM_LOCAL")
        client_receive(client, server)
        client_train(client, 1.0, mode=mode, round_index=1)
        states.append(client.model.state_dict())
    assert any(
        not np.array_equal(states[0][name], states[1][name]) for name in states[0]
    )


def test_fedprox_pulls_toward_server():
    # with a large proximal coefficient the drift from the received
    # weights must shrink relative to plain local training
    drifts = []
    for strategy, mu in (("FEDAVG", 0.0), ("FEDPROX", 50.0)):
        client = tiny_client(seed=6)
        server = UnrolledModel(hidden=4, unroll_steps=1, cg_iters=4, seed=10)
        partition_params(server, "SLAM_LOCAL")
        client_receive(client, server)
        anchor = client.model.state_dict()
        client_train(client, 0.0, strategy=strategy, fedprox_mu=mu, round_index=1)
        after = client.model.state_dict()
        drifts.append(
            sum(float(np.sum((after[n] - anchor[n]) ** 2)) for n in anchor)
        )
    assert drifts[1] < drifts[0]


def test_upload_payload_contains_only_tensors_and_scalars():
    config = tiny_run_config(rounds=1)
    result = run_federation(config, tiny_fleet())
    # re-create what a round uploads and check the message surface
    payload = UploadPayload(
        client_id=0,
        tensors=result.clients[0].model.state_dict(),
        loss_s1=1.0,
        loss_s2=2.0,
    )
    assert set(vars(payload)) == {"client_id", "tensors", "loss_s1", "loss_s2"}
    for value in payload.tensors.values():
        assert isinstance(value, np.ndarray)


def test_non_finite_training_loss_raises():
    client = tiny_client(seed=7)
    client.model.rho.data = np.asarray(1e6)  # softplus overflow -> inf lambda
    server = UnrolledModel(hidden=4, unroll_steps=1, cg_iters=4, seed=11)
    partition_params(server, "SLAM_LOCAL")
    client_receive(client, server)
    client.model.rho.data = np.asarray(np.inf)
    with pytest.raises(Exception):
        client_train(client, 0.0, round_index=1)


# ---------------------------------------------------------------------------
# orchestration


def test_run_federation_reports_and_final_distribution():
    config = tiny_run_config(rounds=2)
    result = run_federation(config, tiny_fleet())
    assert len(result.reports) == 2
    assert [r.round for r in result.reports] == [1, 2]
    server_state = result.server.model.state_dict()
    for client in result.clients:
        for name, p in client.model.named_parameters().items():
            if p.tag is PartitionTag.GLOBAL_SHARED:
                assert np.array_equal(p.data, server_state[name])


def test_run_federation_deterministic_for_fixed_seed():
    a = run_federation(tiny_run_config(), tiny_fleet())
    b = run_federation(tiny_run_config(), tiny_fleet())
    for ca, cb in zip(a.clients, b.clients):
        for name, p in ca.model.named_parameters().items():
            assert np.array_equal(p.data, cb.model.named_parameters()[name].data)
    for ra, rb in zip(a.reports, b.reports):
        assert ra.client_losses_s1 == rb.client_losses_s1
        assert ra.alphas == rb.alphas


def test_run_federation_single_client_degenerate_weight():
    result = run_federation(tiny_run_config(rounds=1), tiny_fleet(1))
    assert result.reports[0].alphas == [1.0]


def test_singleset_never_communicates():
    config = tiny_run_config(strategy="SINGLESET", rounds=2)
    fleet = tiny_fleet()
    result = run_federation(config, fleet)
    assert all(math.isnan(a) for r in result.reports for a in r.alphas)
    # the server model stays at initialization
    init = UnrolledModel(hidden=4, unroll_steps=1, cg_iters=4, seed=0).state_dict()
    server = result.server.model.state_dict()
    for name in init:
        assert np.array_equal(init[name], server[name])


def test_modfed_weights_follow_softmax_of_s2_losses():
    config = tiny_run_config(rounds=1)
    result = run_federation(config, tiny_fleet())
    rep = result.reports[0]
    assert np.allclose(
        rep.alphas, softmax_oracle(rep.client_losses_s2), atol=1e-12
    )


def test_fedavg_weights_follow_sample_counts():
    fleet = tiny_fleet()
    fleet[1] = (fleet[1][0][:2], fleet[1][1])  # client 1 has half the data
    config = tiny_run_config(strategy="FEDAVG", rounds=1)
    result = run_federation(config, fleet)
    assert np.allclose(result.reports[0].alphas, [4 / 6, 2 / 6], atol=1e-12)


def test_run_federation_validation_metrics_on_schedule():
    config = tiny_run_config(rounds=3, val_interval=2)
    fleet = tiny_fleet()
    vals = [tiny_dataset(seed=30 + k, count=2) for k in range(2)]
    result = run_federation(config, fleet, val_sets=vals)
    has_val = [r.psnr_val is not None for r in result.reports]
    assert has_val == [False, True, True]  # interval hit + final round


def test_run_federation_rejects_empty_fleet():
    with pytest.raises(ValueError):
        run_federation(tiny_run_config(), [])


def test_fed_run_config_validation():
    with pytest.raises(ValueError):
        FedRunConfig(strategy="GOSSIP")
    with pytest.raises(ValueError):
        FedRunConfig(loss_mode="HYBRID")


# ---------------------------------------------------------------------------
# losses and metrics plumbing


def test_batch_loss_matches_manual_l2():
    model = UnrolledModel(hidden=4, unroll_steps=1, cg_iters=4, seed=12)
    samples = tiny_dataset(seed=20, count=3)
    loss = batch_loss(model, samples).item()
    total = 0.0
    for s in samples:
        recon = model.reconstruct(s.kspace[None], s.mask)[0]
        total += float(np.sqrt(np.sum(np.abs(recon - s.image) ** 2)))
    assert abs(loss - total / 3.0) < 1e-9


def test_dataset_loss_batch_size_invariant():
    model = UnrolledModel(hidden=4, unroll_steps=1, cg_iters=4, seed=13)
    samples = tiny_dataset(seed=21, count=5)
    assert abs(
        dataset_loss(model, samples, batch=2) - dataset_loss(model, samples, batch=5)
    ) < 1e-10
    with pytest.raises(ValueError):
        dataset_loss(model, [])


def test_evaluate_model_beats_noise_on_identityish_model():
    model = UnrolledModel(hidden=4, unroll_steps=1, cg_iters=8, seed=14)
    samples = tiny_dataset(seed=22, count=2)
    p, s = evaluate_model(model, samples)
    zp, zs = zero_filled_metrics(samples)
    assert np.isfinite(p) and 0.0 < s <= 1.0
    assert np.isfinite(zp) and 0.0 < zs <= 1.0


def test_split_dataset_disjoint_and_deterministic():
    samples = tiny_dataset(seed=23, count=10)
    s1, s2 = split_dataset(samples, 0.8, seed=5)
    t1, t2 = split_dataset(samples, 0.8, seed=5)
    assert len(s1) == 8 and len(s2) == 2
    assert [id(x) for x in s1] == [id(x) for x in t1]
    ids1, ids2 = {id(x) for x in s1}, {id(x) for x in s2}
    assert not ids1 & ids2 and len(ids1 | ids2) == 10


def test_write_reports_csv_schema_and_determinism(tmp_path):
    config = tiny_run_config(rounds=2)
    fleet = tiny_fleet()
    vals = [tiny_dataset(seed=40 + k, count=2) for k in range(2)]
    pa, pb = tmp_path / "a.csv", tmp_path / "b.csv"
    write_reports_csv(run_federation(config, fleet, val_sets=vals).reports, pa)
    write_reports_csv(run_federation(config, fleet, val_sets=vals).reports, pb)
    header = pa.read_text().splitlines()[0]
    assert header.split(",") == CSV_COLUMNS
    assert pa.read_bytes() == pb.read_bytes()  # byte-identical reruns
    rows = pa.read_text().splitlines()
    assert len(rows) == 1 + 2 * 2  # header + rounds * clients
