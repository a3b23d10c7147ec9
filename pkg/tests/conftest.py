import numpy as np
import pytest

from evisurv import dataio, evidential, model, survival

TINY = dict(d_model=8, heads=2, attn_hidden=8, ffn_dim=16, gene_hidden=8, K=4)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_config():
    return model.ModelConfig(**TINY)


@pytest.fixture
def tiny_dataset():
    ds, _ = dataio.synth_cohort(dataio.SynthConfig(patients=12, d_h=6, n_genes=12, mean_bag_size=5, seed=3))
    return ds


@pytest.fixture
def tiny_record(tiny_dataset):
    """The first patient, with its bag cut or tiled to exactly five instances."""
    r = tiny_dataset[0]
    bag = np.vstack([r.wsi_bag] * 5)[:5]
    return dataio.PatientRecord(r.id, r.survival_months, r.status, bag, r.gene_values)


def randomize_biases(params, seed=5, scale=0.1):
    rng = np.random.default_rng(seed)
    for k, v in params.items():
        if k.endswith(("bias", "beta")) or ".b_" in k:
            v[:] = rng.normal(0.0, scale, v.shape)
    return params


def eval_loss(record, label, gene_sets, params, config):
    """Full loss value on constants (no tape), used as the finite-difference target."""
    out = model.forward(record, gene_sets, model.bind(params, None), config)
    fused = evidential.fuse_tensors(out.e_h, out.e_g, out.s_risk)
    return survival.nll_loss(fused.o_risk, label).item()
