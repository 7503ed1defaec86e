import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from wafermoe.collectives import plan_all_to_all, plan_entwined_allreduce
from wafermoe.engine import (
    ComputeModel,
    Simulation,
    SimulationSettings,
    compute_time_attention,
    compute_time_moe,
    expert_demands,
    pipeline_time,
    run_iteration,
    run_simulation,
)
from wafermoe.errors import ConfigError
from wafermoe.mapping import ParallelismConfig, er_mapping, make_mapping
from wafermoe.topology import build_mesh
from wafermoe.workload import ModelSpec, gate_tokens, make_gating

CM = ComputeModel()


def tiny_model(**kw) -> ModelSpec:
    base = dict(
        name="tiny",
        total_params=1e9,
        n_layers=3,
        moe_layers=2,
        n_experts=16,
        top_k=2,
        expert_bytes=1e6,
        hidden_dim=512,
    )
    base.update(kw)
    return ModelSpec(**base)


def make_sim(mesh=(1, 4, 4), tp=4, model=None, dist="uniform", seed=0, drift=0.0, **st_kw):
    topo = build_mesh(*mesh)
    model = model or tiny_model()
    cfg = ParallelismConfig.derive(topo, tp=tp)
    mapping = make_mapping("er", topo, cfg, n_experts=model.n_experts)
    gating = make_gating(
        model.n_experts, model.moe_layers, dist=dist, seed=seed, drift=drift
    )
    return topo, mapping, model, gating, SimulationSettings(**st_kw)


def test_moe_roofline_memory_bound_oracle():
    # one resident 42 MB expert, a handful of tokens: weight streaming wins
    assert compute_time_moe(8, 1, 42e6, CM) == pytest.approx(5.25e-6, rel=1e-12)
    assert compute_time_moe(0, 0, 42e6, CM) == 0.0


def test_moe_roofline_compute_bound_linear():
    t1 = compute_time_moe(1e6, 1, 1e6, CM)
    t2 = compute_time_moe(2e6, 1, 1e6, CM)
    assert t1 == pytest.approx(2 * 1e6 * 1e6 / 2250e12)
    assert t2 == pytest.approx(2 * t1)


def test_attention_roofline_oracle():
    # 256 tokens, hidden 2048: flops 8*256*2048^2 / 2250e12 = 3.8178e-6 s,
    # weights 8*2048^2 B / 8e12 = 4.1943e-6 s; memory term dominates
    got = compute_time_attention(256, 2048, CM)
    assert got == pytest.approx(4.194304e-6, rel=1e-12)
    assert compute_time_attention(0, 2048, CM) == 0.0
    assert compute_time_attention(256, 2048, CM, tp=2) == pytest.approx(got / 2)


def test_attention_compute_bound_scaling():
    t1 = compute_time_attention(4096, 2048, CM)
    t2 = compute_time_attention(8192, 2048, CM)
    assert t2 == pytest.approx(2 * t1)


def test_pipeline_formula():
    assert pipeline_time(3.0, 5.0, 1) == 8.0
    assert pipeline_time(3.0, 5.0, 4) == 5.75
    assert pipeline_time(5.0, 3.0, 4) == 5.75  # symmetric
    with pytest.raises(ConfigError):
        pipeline_time(1.0, 1.0, 0)


@given(
    c=st.floats(0, 1e-3),
    t=st.floats(0, 1e-3),
    m=st.integers(1, 64),
)
@settings(max_examples=200)
def test_pipeline_overlap_bounds(c, t, m):
    phase = pipeline_time(c, t, m)
    assert max(c, t) <= phase <= c + t + 1e-18


def test_iteration_structure_and_bounds():
    topo, mapping, model, gating, settings = make_sim(micro_batches=4)
    sim = Simulation(topo, mapping, model, gating, settings=settings)
    m = run_iteration(sim, 0)
    assert len(m.layers) == model.moe_layers
    assert m.attention_time == pytest.approx(model.n_layers * sim.attention_phase)
    for lp in m.layers:
        comm = lp.dispatch + lp.combine
        assert max(lp.expert_compute, comm) <= lp.moe_phase <= lp.expert_compute + comm
        assert max(lp.attention_compute, lp.allreduce) <= lp.attention_phase
    assert m.wall_time == pytest.approx(m.attention_time + m.moe_time)
    assert m.migration_overhead == 0.0
    # every gated token lands somewhere
    total = sim.total_tokens * model.top_k * model.moe_layers
    assert sum(m.device_tokens.values()) == pytest.approx(total)


def test_micro_batches_shrink_wall():
    t1 = make_sim(micro_batches=1)
    t4 = make_sim(micro_batches=4)
    w1 = run_iteration(Simulation(t1[0], t1[1], t1[2], t1[3], settings=t1[4]), 0).wall_time
    w4 = run_iteration(Simulation(t4[0], t4[1], t4[2], t4[3], settings=t4[4]), 0).wall_time
    assert w4 < w1


def test_simulation_deterministic():
    def run():
        topo, mapping, model, gating, settings = make_sim(dist="zipf", drift=0.3, seed=5)
        return run_simulation(topo, mapping, model, gating, settings=settings, iterations=4)

    a, b = run(), run()
    assert [m.wall_time for m in a.trace] == [m.wall_time for m in b.trace]
    assert [m.link_bytes for m in a.trace] == [m.link_bytes for m in b.trace]
    assert a.aggregates == b.aggregates


def test_bandwidth_monotonicity():
    def wall(intra):
        topo = build_mesh(1, 4, 4, intra_bandwidth=intra)
        model = tiny_model()
        cfg = ParallelismConfig.derive(topo, tp=4)
        mapping = make_mapping("er", topo, cfg, n_experts=model.n_experts)
        gating = make_gating(model.n_experts, model.moe_layers, dist="zipf", seed=3)
        res = run_simulation(topo, mapping, model, gating, iterations=3)
        return [m.wall_time for m in res.trace]

    slow, fast = wall(8e12), wall(16e12)
    for s, f in zip(slow, fast):
        assert f <= s + 1e-18


def test_link_byte_conservation_balancer_off():
    topo, mapping, model, gating, settings = make_sim(dist="zipf", seed=9)
    sim = Simulation(topo, mapping, model, gating, settings=settings)
    m = run_iteration(sim, 0)
    expected = {}
    ar = plan_entwined_allreduce(
        mapping, topo, mapping.cfg.tokens_per_tp_group * model.hidden_dim * 2.0, True
    )
    for k, v in ar.link_bytes(topo).items():
        expected[k] = expected.get(k, 0.0) + v * model.n_layers
    for layer in range(model.moe_layers):
        counts = gate_tokens(gating, layer, 0, sim.total_tokens, model.top_k)
        hosts = {e: [d] for d, es in mapping.native_experts.items() for e in es}
        hosts = {e: hosts[e] for e in sorted(hosts)}
        demands = expert_demands(counts, hosts, mapping.cfg.dp, model.hidden_dim * 2.0)
        dispatch = plan_all_to_all(mapping, topo, demands, gathered=True)
        for plan in (dispatch, dispatch.reversed()):
            for k, v in plan.link_bytes(topo).items():
                expected[k] = expected.get(k, 0.0) + v
    assert set(m.link_bytes) == set(expected)
    for k in expected:
        assert m.link_bytes[k] == pytest.approx(expected[k])


def test_noninvasive_wall_matches_disabled_run():
    kw = dict(mesh=(1, 4, 4), tp=4, dist="zipf", seed=11)
    topo, mapping, model, gating, _ = make_sim(**kw)
    off = run_simulation(
        topo, mapping, model, gating,
        settings=SimulationSettings(balancer_mode="off"),
        iterations=8,
    )
    topo, mapping, model, gating, _ = make_sim(**kw)
    non = run_simulation(
        topo, mapping, model, gating,
        settings=SimulationSettings(balancer_mode="topo_noninvasive", alpha=0.05, shadow_slots=2),
        iterations=8,
    )
    issued = [m.moves_issued for m in non.trace]
    completed = [m.moves_completed for m in non.trace]
    assert sum(issued) > 0, "scenario never triggered; test needs a hotter workload"
    first_active = next(i for i, c in enumerate(completed) if c > 0)
    for i in range(first_active + 1):
        assert non.trace[i].wall_time == off.trace[i].wall_time  # bit-exact
    assert all(m.migration_overhead == 0.0 for m in non.trace)
    assert all(m.hot_migration_bytes == 0.0 for m in non.trace)


def test_noninvasive_migration_bytes_accounted():
    topo, mapping, model, gating, _ = make_sim(dist="zipf", seed=11)
    res = run_simulation(
        topo, mapping, model, gating,
        settings=SimulationSettings(balancer_mode="topo_noninvasive", alpha=0.05, shadow_slots=2),
        iterations=8,
    )
    moved = sum(sum(m.migration_link_bytes.values()) for m in res.trace)
    assert moved > 0
    for m in res.trace:
        for k, v in m.migration_link_bytes.items():
            assert m.link_bytes[k] >= v - 1e-9


def test_invasive_adds_stall_to_wall():
    kw = dict(mesh=(1, 4, 4), tp=4, dist="zipf", seed=11)
    topo, mapping, model, gating, _ = make_sim(**kw)
    off = run_simulation(topo, mapping, model, gating, iterations=6)
    topo, mapping, model, gating, _ = make_sim(**kw)
    inv = run_simulation(
        topo, mapping, model, gating,
        settings=SimulationSettings(balancer_mode="topo", alpha=0.05, beta=0, shadow_slots=2),
        iterations=6,
    )
    first = next(i for i, m in enumerate(inv.trace) if m.moves_issued > 0)
    assert inv.trace[first].migration_overhead > 0
    assert inv.trace[first].wall_time == pytest.approx(
        off.trace[first].wall_time + inv.trace[first].migration_overhead
    )


def test_balancing_reduces_imbalance():
    model = tiny_model(n_experts=32, moe_layers=2)
    topo, mapping, _, gating, _ = make_sim(model=model, dist="zipf", seed=7)
    res = run_simulation(
        topo, mapping, model, gating,
        settings=SimulationSettings(balancer_mode="topo", alpha=0.1, beta=0, shadow_slots=4),
        iterations=12,
    )
    assert res.aggregates["imbalance_last"] < res.aggregates["imbalance_first"]


def test_uniform_gating_never_triggers_with_default_alpha():
    topo, mapping, model, gating, _ = make_sim(dist="uniform", seed=2)
    res = run_simulation(
        topo, mapping, model, gating,
        settings=SimulationSettings(balancer_mode="topo_noninvasive"),
        iterations=5,
    )
    assert all(not m.trigger for m in res.trace)


def test_run_simulation_validates_inputs():
    topo, mapping, model, gating, settings = make_sim()
    with pytest.raises(ConfigError):
        run_simulation(topo, mapping, model, gating, settings=settings, iterations=0)
    bad_gating = make_gating(model.n_experts, model.moe_layers + 1, seed=0)
    with pytest.raises(ConfigError):
        Simulation(topo, mapping, model, bad_gating)
    with pytest.raises(ConfigError):
        SimulationSettings(balancer_mode="nope")


def test_hier_mapping_uses_two_phase_allreduce():
    topo = build_mesh(2, 4, 4)
    model = tiny_model(n_experts=32)
    cfg = ParallelismConfig.derive(topo, tp=8)
    mapping = make_mapping("hier_er", topo, cfg, n_experts=model.n_experts)
    gating = make_gating(model.n_experts, model.moe_layers, seed=1)
    sim = Simulation(topo, mapping, model, gating)
    assert sim.ar_plan.name == "hier_allreduce"
    m = run_iteration(sim, 0)
    assert m.wall_time > 0
