import json
import math
from fractions import Fraction

import numpy as np
import pytest
import torch

from mapseg.errors import ConfigurationError
from mapseg.federated import (
    FederatedConfig,
    aggregate,
    aggregation_weights,
    client_round,
    round_learning_rate,
    run_federated,
    server_round,
    state_checksum,
)
from mapseg.losses import HyperParams
from mapseg.masking import MaskConfig
from mapseg.model import MapSegModel, NetworkSpec, TeacherStudentPair
from mapseg.rng import SeedBank
from mapseg.synthdata import DomainSpec, generate_domain, load_manifest
from mapseg.trainer import DomainData, TrainConfig

TINY_NET = dict(encoder_channels=8, num_res_blocks=1, mae_channels=(8, 8), head_channels=8, gn_groups=4)


@pytest.fixture(scope="module")
def fed_data(tmp_path_factory):
    root = tmp_path_factory.mktemp("fed")
    src = load_manifest(
        generate_domain(3, DomainSpec(dims_range=(24, 28), noise=0.01), 7, 0, "source", root / "s", False)
    )
    c1 = load_manifest(
        generate_domain(
            3,
            DomainSpec(shift="contrast_inversion", dims_range=(24, 28), noise=0.01),
            7, 1, "client1", root / "c1", True,
        )
    )
    c2 = load_manifest(
        generate_domain(
            1,
            DomainSpec(shift="bias_field", dims_range=(24, 28), noise=0.01),
            7, 2, "client2", root / "c2", True,
        )
    )
    return src, c1, c2


# ------------------------------------------------------------- aggregation


def test_aggregation_weights_sum_to_one_exactly():
    weights = aggregation_weights([3, 1, 5])
    assert sum(weights) == Fraction(1)
    assert weights[0] == Fraction(3, 9)


def test_aggregate_single_client_identity():
    sd = {"w": torch.randn(3, 3), "b": torch.randn(3)}
    out = aggregate([sd], [5])
    for k in sd:
        torch.testing.assert_close(out[k], sd[k])


def test_aggregate_weighted_mean_example():
    # sizes 3 and 1, scalar params 0 and 4 -> 0.75*0 + 0.25*4 = 1.0
    a = {"w": torch.zeros(1)}
    b = {"w": torch.full((1,), 4.0)}
    out = aggregate([a, b], [3, 1])
    assert float(out["w"]) == 1.0


def test_aggregate_equal_params_fixed_point():
    sd = {"w": torch.randn(4, 4)}
    copies = [{"w": sd["w"].clone()} for _ in range(3)]
    out = aggregate(copies, [2, 5, 1])
    torch.testing.assert_close(out["w"], sd["w"], rtol=1e-6, atol=1e-7)


def test_aggregate_errors():
    with pytest.raises(ConfigurationError):
        aggregate([], [])
    a = {"w": torch.zeros(2)}
    b = {"w": torch.zeros(3)}
    with pytest.raises(ValueError, match="shape"):
        aggregate([a, b], [1, 1])
    with pytest.raises(ConfigurationError):
        aggregation_weights([0, 2])


def test_round_learning_rate_endpoints():
    cfg = FederatedConfig(rounds=10, lr_start=1e-4, lr_end=1e-6)
    assert round_learning_rate(cfg, 0) == pytest.approx(1e-4)
    assert round_learning_rate(cfg, 9) == pytest.approx(1e-6)
    assert round_learning_rate(FederatedConfig(rounds=1), 0) == pytest.approx(1e-4)


# ------------------------------------------------------------ round pieces


def _net(num_classes):
    return NetworkSpec(num_classes=num_classes, patch_edge=16, **TINY_NET)


def _common(seed=0):
    return dict(
        mask_cfg=MaskConfig(local_block=4),
        hyper=HyperParams(),
        weight_decay=0.01,
        betas=(0.9, 0.999),
    )


def test_server_round_zero_steps_is_noop(fed_data):
    src, _, _ = fed_data
    torch.manual_seed(0)
    net = _net(src.num_classes)
    student = MapSegModel(net)
    before = {k: v.clone() for k, v in student.state_dict().items()}
    pair = TeacherStudentPair(student, "small_pretrain")
    from mapseg.augment import source_policy

    losses = server_round(
        pair, DomainData(src.entries, True), 0, 1e-4, SeedBank(1), 0,
        network=net, policy=source_policy(), **_common(),
    )
    assert losses == []
    for k, v in student.state_dict().items():
        assert torch.equal(v, before[k])
    # teacher was (re)initialized to the student
    for tp, sp in zip(pair.teacher.parameters(), student.parameters()):
        assert torch.equal(tp, sp)


def test_server_round_alpha_one_keeps_teacher_at_preround_state(fed_data):
    src, _, _ = fed_data
    torch.manual_seed(1)
    net = _net(src.num_classes)
    student = MapSegModel(net)
    pre_round = {k: v.clone() for k, v in student.state_dict().items()}
    pair = TeacherStudentPair(student, "small_pretrain")
    from mapseg.augment import source_policy

    losses = server_round(
        pair, DomainData(src.entries, True), 2, 1e-3, SeedBank(2), 0,
        network=net, policy=source_policy(), alpha_override=1.0, **_common(),
    )
    assert len(losses) == 2 and all(math.isfinite(v) for v in losses)
    for k, v in pair.teacher.state_dict().items():
        assert torch.equal(v, pre_round[k])
    # while the student did move
    moved = any(
        not torch.equal(v, pre_round[k]) for k, v in student.state_dict().items()
    )
    assert moved


def test_client_round_zero_steps_returns_broadcast(fed_data):
    src, c1, _ = fed_data
    torch.manual_seed(2)
    net = _net(src.num_classes)
    broadcast = {k: v.detach().clone() for k, v in MapSegModel(net).state_dict().items()}
    from mapseg.augment import target_policy

    theta, losses, score = client_round(
        broadcast, DomainData(c1.entries, False), 0, 1e-4, SeedBank(3), 0, 0,
        network=net, policy=target_policy(), ema_schedule="small_pretrain", **_common(),
    )
    assert losses == [] and math.isnan(score)
    for k in broadcast:
        assert torch.equal(theta[k], broadcast[k])


def test_client_round_lr_zero_returns_broadcast_exactly(fed_data):
    src, c1, _ = fed_data
    torch.manual_seed(3)
    net = _net(src.num_classes)
    broadcast = {k: v.detach().clone() for k, v in MapSegModel(net).state_dict().items()}
    from mapseg.augment import target_policy

    theta, losses, score = client_round(
        broadcast, DomainData(c1.entries, False), 1, 0.0, SeedBank(4), 0, 0,
        network=net, policy=target_policy(), ema_schedule="small_pretrain", **_common(),
    )
    assert len(losses) == 1
    for k in broadcast:
        assert torch.equal(theta[k], broadcast[k])


def test_client_round_never_reads_labels(fed_data):
    src, c1, _ = fed_data
    from mapseg.augment import target_policy
    from mapseg.volume import audit_reads

    torch.manual_seed(4)
    net = _net(src.num_classes)
    broadcast = {k: v.detach().clone() for k, v in MapSegModel(net).state_dict().items()}
    with audit_reads() as log:
        client_round(
            broadcast, DomainData(c1.entries, False), 2, 1e-4, SeedBank(5), 0, 0,
            network=net, policy=target_policy(), ema_schedule="small_pretrain", **_common(),
        )
    label_paths = {e.labels_path.resolve() for e in c1.entries}
    assert not (set(log) & label_paths)


def test_client_order_independence(fed_data):
    src, c1, c2 = fed_data
    from mapseg.augment import target_policy

    torch.manual_seed(5)
    net = _net(src.num_classes)
    broadcast = {k: v.detach().clone() for k, v in MapSegModel(net).state_dict().items()}
    datasets = [DomainData(c1.entries, False), DomainData(c2.entries, False)]
    sizes = [len(d) for d in datasets]

    def run(order):
        results = {}
        for k in order:
            theta, _, _ = client_round(
                broadcast, datasets[k], 2, 1e-3, SeedBank(6), 0, k,
                network=net, policy=target_policy(), ema_schedule="small_pretrain", **_common(),
            )
            results[k] = theta
        # fixed reduction order regardless of execution order
        return aggregate([results[0], results[1]], sizes)

    fwd = run([0, 1])
    rev = run([1, 0])
    for k in fwd:
        assert torch.equal(fwd[k], rev[k])


# ------------------------------------------------------------ full runs


def test_run_federated_noop_round_preserves_model(fed_data, tmp_path):
    src, c1, _ = fed_data
    net = _net(src.num_classes)
    fed = FederatedConfig(rounds=1, server_steps=0, client_steps=0)
    cfg = TrainConfig(seed=8, iters_per_epoch=1)
    result = run_federated(
        src.entries, [c1.entries], fed, cfg, net, tmp_path / "noop",
        mask_cfg=MaskConfig(local_block=4),
    )
    # final phi equals the seeded initial phi
    bank = SeedBank(8)
    torch.manual_seed(bank.torch_seed("init"))
    reference = MapSegModel(net)
    from mapseg.model import load_checkpoint

    final, _ = load_checkpoint(result.final_checkpoint)
    for a, b in zip(final.parameters(), reference.parameters()):
        assert torch.equal(a, b)


def test_run_federated_deterministic_checksums(fed_data, tmp_path):
    src, c1, c2 = fed_data
    net = _net(src.num_classes)
    fed = FederatedConfig(rounds=3, server_steps=2, client_steps=2)

    def checksums(out):
        cfg = TrainConfig(seed=9, iters_per_epoch=2)
        result = run_federated(
            src.entries, [c1.entries, c2.entries], fed, cfg, net, out,
            mask_cfg=MaskConfig(local_block=4),
        )
        return [r.checksum for r in result.records]

    a = checksums(tmp_path / "a")
    b = checksums(tmp_path / "b")
    assert a == b
    assert len(a) == 3
    assert len(set(a)) == 3  # rounds actually changed the model


def test_run_federated_logs_and_scores(fed_data, tmp_path):
    src, c1, c2 = fed_data
    net = _net(src.num_classes)
    fed = FederatedConfig(rounds=2, server_steps=1, client_steps=2)
    cfg = TrainConfig(seed=10, iters_per_epoch=1)
    result = run_federated(
        src.entries, [c1.entries, c2.entries], fed, cfg, net, tmp_path / "log",
        mask_cfg=MaskConfig(local_block=4),
    )
    lines = [json.loads(l) for l in result.rounds_log.read_text().splitlines()]
    assert len(lines) == 2
    for line in lines:
        assert set(line["client_scores"].keys()) == {"0", "1"}
        assert all(len(v) == 1 for v in [line["server_losses"]])
        assert all(math.isfinite(x) for x in line["server_losses"])
    assert result.best_checkpoint.exists()
    assert result.final_checkpoint.exists()
    assert (result.best_checkpoint / "manifest.json").exists()
