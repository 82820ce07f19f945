import numpy as np
from sklearn.base import clone

from gaitsync import HierarchicalSynchronizer, PipelineConfig, TemplateRegistrar, pipeline, sim
from gaitsync.registration import RegistrationParams

TINY = {"sim.duration": 1.2, "sim.n_cameras": 3, "sim.n_points": 300, "labeling.T": 6, "train.T": 6,
        "train.epochs": 1, "model.embed_dim": 8, "model.hidden_dim": 4, "model.attention_dim": 4,
        "graph.max_nodes": 24, "sync.groups_per_epoch": 2, "sync.finetune_epochs": 1,
        "sync.sampler.nodes_per_side": 4, "sync.repeats": 1}


def test_registrar_self_fit():
    m = sim.template_mesh(sim.DeformingShape(n_lat=12, n_lon=16))
    reg = TemplateRegistrar(m, RegistrationParams(alphas=(50.0, 5.0), inner_iterations=1))
    V = reg.fit_transform(m.vertices)
    assert np.sqrt(np.mean(np.sum((V - m.vertices) ** 2, axis=1))) < 0.05
    assert reg.dimensions_.length > 0
    assert clone(reg).get_params()["params"] == reg.params


def test_synchronizer_matches_pipeline():
    cfg = PipelineConfig().replace(**TINY)
    frames, _ = pipeline.simulate(cfg)
    graphs = pipeline.build_graphs(frames, cfg)
    est = HierarchicalSynchronizer(cfg, n_reference=len(frames[1])).fit(graphs)
    model, _ = pipeline.train_base_model(graphs, cfg)
    ref = pipeline.synchronise(graphs, cfg, model, n_reference=len(frames[1]))
    for c in graphs:
        np.testing.assert_array_equal(est.mappings_[c].reference, ref.mappings[c].reference)
    merged = est.transform(frames)
    assert len(merged) == len(frames[1])
